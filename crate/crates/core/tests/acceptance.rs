//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any fails.
//!
//! Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test --test acceptance -- 1 4 9`.

use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use setfuse_core::corpus::{CorpusConfig, Generator, SyntheticCorpus};
use setfuse_core::io::{encode_record, read_checkpoint, read_features, write_checkpoint, write_features, FeatureLayout};
use setfuse_core::metrics::{run_protocol, EvalProtocol, Method, MetricsReport, ProtocolConfig};
use setfuse_core::model::{FusionModel, ModelConfig};
use setfuse_core::numeric::{randn, Tensor};
use setfuse_core::service::Service;
use setfuse_core::stream::FusionSession;
use setfuse_core::style::FeatureRecord;
use setfuse_core::train::{loss_gradient_check, sample_batch, targets, train, LossWeights, TargetMode, TrainConfig};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn default_model_config() -> ModelConfig {
    TrainConfig::default().model
}

/// Random initialisation with a non-zero aggregation head, so fusion
/// weights are not uniform.
fn random_model(cfg: ModelConfig, seed: u64) -> FusionModel {
    let mut m = FusionModel::new_random(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let shape = m.params.proj.head_w.shape().to_vec();
    m.params.proj.head_w = randn(&mut rng, &shape, 0.5);
    m.frozen.norm_mean = 1.6;
    m.frozen.norm_std = 0.6;
    m
}

fn generator(cfg: &ModelConfig, n_ids: usize, seed: u64) -> Generator {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Generator::new(CorpusConfig::for_model(cfg), n_ids, &mut rng).unwrap()
}

fn render_probe(g: &Generator, rng: &mut ChaCha8Rng, n: usize) -> Vec<FeatureRecord> {
    let id = rng.random_range(0..g.n_ids());
    (0..n)
        .map(|_| {
            let q = g.draw_quality(rng);
            g.render(rng, id, q)
        })
        .collect()
}

/// Uniform random records, unrelated to the synthetic corpus.
fn uniform_records(rng: &mut ChaCha8Rng, cfg: &ModelConfig, n: usize) -> Vec<FeatureRecord> {
    (0..n)
        .map(|_| {
            let f = (0..cfg.feature_dim).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mut s = Vec::with_capacity(cfg.style_len());
            for _ in 0..cfg.num_taps {
                s.extend((0..cfg.style_channels).map(|_| rng.random_range(-1.0f32..1.0)));
                s.extend((0..cfg.style_channels).map(|_| rng.random_range(0.0f32..1.5)));
            }
            FeatureRecord::new(0, f, s)
        })
        .collect()
}

fn random_partition(rng: &mut ChaCha8Rng, n: usize, max: usize) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let len = rng.random_range(1..=max).min(n - start);
        out.push(start..start + len);
        start += len;
    }
    out
}

fn linf(v: &[f32]) -> f64 {
    v.iter().map(|x| x.abs() as f64).fold(0.0, f64::max)
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() as f64).fold(0.0, f64::max)
}

fn c1_batch_order() -> Verdict {
    let cfg = default_model_config();
    let model = random_model(cfg.clone(), 1);
    let g = generator(&cfg, 200, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(10..=2000);
        let recs = render_probe(&g, &mut rng, n);
        let mut batches = random_partition(&mut rng, n, cfg.max_batch);
        let mut reference: Option<Vec<f32>> = None;
        for _ in 0..5 {
            batches.shuffle(&mut rng);
            let mut s = FusionSession::open(0, &cfg);
            for b in &batches {
                s.update(&recs[b.clone()], &model).unwrap();
            }
            let f = s.finalize(&model).unwrap().fused;
            match &reference {
                None => reference = Some(f),
                Some(r) => worst = worst.max(max_abs_diff(r, &f) / linf(r)),
            }
        }
    }
    verdict(worst < 1e-5, format!("max relative deviation {worst:.2e} (limit 1e-5)"))
}

fn c2_incremental_vs_direct() -> Verdict {
    let cfg = default_model_config();
    let model = random_model(cfg.clone(), 2);
    let g = generator(&cfg, 200, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let (m, c) = (cfg.num_centers, cfg.feature_dim);
    let (mut worst_state, mut worst_fused) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let n = rng.random_range(10..=800);
        let recs = render_probe(&g, &mut rng, n);
        let batches = random_partition(&mut rng, n, 200);
        let mut session = FusionSession::open(0, &cfg);
        let mut sums = vec![0.0f64; m * c];
        let mut style_sums = vec![0.0f64; m * cfg.key_dim()];
        let mut mass = vec![0.0f64; m];
        for b in &batches {
            let batch = &recs[b.clone()];
            session.update(batch, &model).unwrap();
            let summary = model.summarize_batch(batch).unwrap();
            for (acc, &v) in sums.iter_mut().zip(summary.feature_sums.data()) {
                *acc += v as f64;
            }
            for (acc, &v) in style_sums.iter_mut().zip(summary.style_sums.data()) {
                *acc += v as f64;
            }
            for (acc, &v) in mass.iter_mut().zip(&summary.assignment.row_mass) {
                *acc += v as f64;
            }
        }
        let pooled: Vec<f64> = (0..m * c).map(|k| sums[k] / mass[k / c]).collect();
        let pooled_s: Vec<f64> = (0..style_sums.len())
            .map(|k| style_sums[k] / mass[k / cfg.key_dim()])
            .collect();
        let scale = pooled.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for (x, y) in session.f_hat().iter().zip(&pooled) {
            worst_state = worst_state.max((x - y).abs() / scale);
        }
        let scale_s = pooled_s.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for (x, y) in session.s_hat().iter().zip(&pooled_s) {
            worst_state = worst_state.max((x - y).abs() / scale_s);
        }
        let inter = setfuse_core::cluster::ClusteredIntermediate {
            f_prime: Tensor::matrix(m, c, pooled.iter().map(|&v| v as f32).collect()),
            s_prime: Tensor::matrix(m, cfg.key_dim(), pooled_s.iter().map(|&v| v as f32).collect()),
        };
        let (direct, _) = model.aggregate(&inter).unwrap();
        let streamed = session.finalize(&model).unwrap().fused;
        worst_fused = worst_fused.max(max_abs_diff(&direct, &streamed) / linf(&direct));
    }
    let worst = worst_state.max(worst_fused);
    verdict(
        worst < 1e-5,
        format!("state dev {worst_state:.2e}, fused dev {worst_fused:.2e} (limit 1e-5)"),
    )
}

fn c3_within_batch_permutation() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let cfgs = [default_model_config(), ModelConfig::toy()];
    let models: Vec<FusionModel> = cfgs.iter().map(|c| random_model(c.clone(), 3)).collect();
    let mut worst = 0.0f64;
    for case in 0..1000 {
        let model = &models[case % 2];
        let n = rng.random_range(1..=64);
        let recs = uniform_records(&mut rng, &model.config, n);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let shuffled: Vec<FeatureRecord> = perm.iter().map(|&i| recs[i].clone()).collect();
        let (a, am) = model.cluster_network(&recs).unwrap();
        let (b, bm) = model.cluster_network(&shuffled).unwrap();
        let rel = |x: &Tensor<f32>, y: &Tensor<f32>| max_abs_diff(x.data(), y.data()) / linf(x.data()).max(1e-12);
        worst = worst.max(rel(&a.f_prime, &b.f_prime)).max(rel(&a.s_prime, &b.s_prime));
        for j in 0..am.num_centers() {
            for (k, &i) in perm.iter().enumerate() {
                worst = worst.max((am.a.at(j, i) - bm.a.at(j, k)).abs() as f64);
            }
        }
    }
    verdict(worst < 1e-5, format!("max deviation {worst:.2e} over 1000 cases (limit 1e-5)"))
}

fn c4_stochastic_and_convex() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let cfg = default_model_config();
    let models = [random_model(cfg.clone(), 4), random_model(ModelConfig::toy(), 4)];
    let g = generator(&cfg, 100, 42);
    let (mut col_err, mut hull_err, mut fuse_err) = (0.0f64, 0.0f64, 0.0f64);
    for case in 0..1000 {
        let model = &models[case % 2];
        let n = rng.random_range(1..=64);
        let recs = if case % 4 == 0 {
            render_probe(&g, &mut rng, n)
        } else {
            uniform_records(&mut rng, &model.config, n)
        };
        let out = model.fuse(&recs).unwrap();
        let a = &out.assignment.a;
        for i in 0..n {
            let s: f64 = (0..a.rows()).map(|j| a.at(j, i) as f64).sum();
            col_err = col_err.max((s - 1.0).abs());
        }
        let fp = &out.intermediate.f_prime;
        for ch in 0..model.config.feature_dim {
            let lo = recs.iter().map(|r| r.feature[ch]).fold(f32::INFINITY, f32::min) as f64;
            let hi = recs.iter().map(|r| r.feature[ch]).fold(f32::NEG_INFINITY, f32::max) as f64;
            let (mut flo, mut fhi) = (f64::INFINITY, f64::NEG_INFINITY);
            for j in 0..fp.rows() {
                let v = fp.at(j, ch) as f64;
                hull_err = hull_err.max(lo - v).max(v - hi);
                flo = flo.min(v);
                fhi = fhi.max(v);
            }
            let f = out.fused[ch] as f64;
            fuse_err = fuse_err.max(flo - f).max(f - fhi);
        }
    }
    let pass = col_err <= 1e-6 && hull_err <= 1e-6 && fuse_err <= 1e-6;
    verdict(
        pass,
        format!("column sum err {col_err:.2e}, F' hull excess {hull_err:.2e}, fused hull excess {fuse_err:.2e} (limit 1e-6)"),
    )
}

fn c5_gradients() -> Verdict {
    let model_cfg = ModelConfig {
        num_centers: 2,
        max_batch: 16,
        ..ModelConfig::toy()
    };
    assert_eq!((model_cfg.feature_dim, model_cfg.key_dim()), (8, 8));
    let cfg = TrainConfig {
        min_set_size: 3,
        max_set_size: 3,
        subjects_per_step: 2,
        n_ids: 6,
        per_id: 8,
        corpus: CorpusConfig {
            max_center_cos: 0.95,
            ..CorpusConfig::for_model(&model_cfg)
        },
        model: model_cfg,
        ..TrainConfig::default()
    };
    let w = LossWeights {
        lambda_t: 1.0,
        lambda_p: 1.0,
    };
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let corpus = SyntheticCorpus::generate(cfg.corpus.clone(), seed, cfg.n_ids, cfg.per_id).unwrap();
        let mut model = random_model(cfg.model.clone(), seed);
        let (mean, std) = corpus.norm_stats();
        model.frozen.norm_mean = mean;
        model.frozen.norm_std = std;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = targets(&corpus, TargetMode::Center);
        let batch = sample_batch(&mut rng, &corpus, &t, &[0, 1], &cfg);
        worst = worst.max(loss_gradient_check(&model, &batch, w).unwrap());
    }
    verdict(worst < 1e-4, format!("max relative error {worst:.2e} over 20 seeds (limit 1e-4)"))
}

const PROBE_SIZES: [usize; 3] = [4, 16, 64];

fn trend_protocol(seed: u64, model: &ModelConfig) -> EvalProtocol {
    let cfg = ProtocolConfig {
        seed: 777 + seed,
        n_ids: 500,
        probe_size: 64,
        probes_per_id: 1,
        ..ProtocolConfig::default()
    };
    EvalProtocol::synthetic(&cfg, model).unwrap()
}

/// Rank-1 of `method` on the protocol truncated to each probe size.
fn rank1_by_size(protocol: &EvalProtocol, method: Method<'_>) -> Vec<f64> {
    PROBE_SIZES
        .iter()
        .map(|&n| run_protocol(&protocol.truncated(n), method).unwrap().rank(1).unwrap())
        .collect()
}

fn trained(seed: u64, num_centers: usize) -> (FusionModel, Vec<f64>) {
    let mut cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    cfg.model.num_centers = num_centers;
    let out = train(&cfg).unwrap();
    (out.model, out.epoch_loss)
}

fn fmt(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{:.1}", 100.0 * x)).collect();
    parts.join("/")
}

fn c6_trend(models: &mut Vec<(u64, FusionModel)>) -> Verdict {
    let mut gains = vec![0.0f64; PROBE_SIZES.len()];
    let mut model_mean = vec![0.0f64; PROBE_SIZES.len()];
    let mut naive_mean = vec![0.0f64; PROBE_SIZES.len()];
    let seeds = 5;
    for seed in 0..seeds {
        let (model, _) = trained(seed, 4);
        let protocol = trend_protocol(seed, &model.config);
        let m = rank1_by_size(&protocol, Method::Model(&model));
        let b = rank1_by_size(&protocol, Method::Baseline);
        for k in 0..PROBE_SIZES.len() {
            gains[k] += (m[k] - b[k]) / seeds as f64;
            model_mean[k] += m[k] / seeds as f64;
            naive_mean[k] += b[k] / seeds as f64;
        }
        models.push((seed, model));
    }
    let beats = gains.iter().all(|&g| g >= 0.03);
    let monotone = gains.windows(2).all(|w| w[1] >= w[0]);

    // Sweep over M on seed 0.
    let protocol = trend_protocol(0, &models[0].1.config);
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let m4 = mean(rank1_by_size(&protocol, Method::Model(&models[0].1)));
    let (model1, _) = trained(0, 1);
    let m1 = mean(rank1_by_size(&protocol, Method::Model(&model1)));
    let (model2, _) = trained(0, 2);
    let m2 = mean(rank1_by_size(&protocol, Method::Model(&model2)));
    let sweep = m4 >= m1;
    verdict(
        beats && monotone && sweep,
        format!(
            "rank-1 % at N=4/16/64: model {}, naive {}, gain {} (need >=3.0 and non-decreasing); \
             mean rank-1 M=1 {:.1}, M=2 {:.1}, M=4 {:.1}",
            fmt(&model_mean),
            fmt(&naive_mean),
            fmt(&gains),
            100.0 * m1,
            100.0 * m2,
            100.0 * m4
        ),
    )
}

fn c7_random_order(models: &mut Vec<(u64, FusionModel)>) -> Verdict {
    if models.is_empty() {
        models.push((0, trained(0, 4).0));
    }
    let model = &models[0].1;
    let cfg = ProtocolConfig {
        seed: 4242,
        n_ids: 500,
        probe_size: 16,
        probes_per_id: 4,
        batch_size: 4,
        far: vec![1e-2, 1e-3],
        ranks: vec![1, 5],
        ..ProtocolConfig::default()
    };
    let protocol = EvalProtocol::synthetic(&cfg, &model.config).unwrap();
    let metrics = |r: &MetricsReport| vec![r.rank(1).unwrap(), r.rank(5).unwrap(), r.tar(1e-2).unwrap(), r.tar(1e-3).unwrap()];
    let base = metrics(&run_protocol(&protocol, Method::Model(model)).unwrap());
    let mut worst = 0.0f64;
    for s in 0..5 {
        let m = metrics(&run_protocol(&protocol.shuffled(100 + s), Method::Model(model)).unwrap());
        for (a, b) in base.iter().zip(&m) {
            worst = worst.max((a - b).abs());
        }
    }
    verdict(
        100.0 * worst < 0.2,
        format!(
            "max change {:.3} points over 5 shuffles (limit 0.2); rank-1/5, TAR@1e-2/1e-3 = {}",
            100.0 * worst,
            fmt(&base)
        ),
    )
}

fn rss_kib() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmRSS:"))?;
    line.split_whitespace().nth(1)?.parse().ok()
}

fn c8_constant_memory() -> Verdict {
    let cfg = default_model_config();
    let model = random_model(cfg.clone(), 8);
    let g = generator(&cfg, 50, 81);
    let mut rng = ChaCha8Rng::seed_from_u64(82);
    let mut session = FusionSession::open(0, &cfg);
    let expected = cfg.num_centers * (cfg.feature_dim + cfg.key_dim() + 1) * 8;
    let start = session.state_bytes();
    let mut flat = start == expected;
    let mut done = 0;
    while done < 100_000 {
        let n = 256.min(100_000 - done);
        let batch = render_probe(&g, &mut rng, n);
        session.update(&batch, &model).unwrap();
        flat &= session.state_bytes() == start;
        done += n;
    }
    let finalized = session.finalize(&model).is_ok() && session.items_seen() == 100_000;

    let service = Service::new(model, None).unwrap();
    let reply = |line: &str| -> Value { serde_json::from_str(&service.handle_line(line).0).unwrap() };
    let id = reply(r#"{"op":"open"}"#)["session"].as_u64().unwrap();
    let svc_start = service.session_bytes(id).unwrap();
    let mut svc_flat = true;
    let mut ok = true;
    let rss_before = rss_kib();
    for _ in 0..1000 {
        let batch = render_probe(&g, &mut rng, 8);
        let enc: Vec<String> = batch.iter().map(|r| B64.encode(encode_record(r))).collect();
        let line = serde_json::json!({ "op": "push", "session": id, "records": enc }).to_string();
        ok &= reply(&line).get("items_seen").is_some();
        svc_flat &= service.session_bytes(id) == Some(svc_start);
    }
    ok &= reply(&format!(r#"{{"op":"finalize","session":{id}}}"#)).get("fused").is_some();
    let rss = match (rss_before, rss_kib()) {
        (Some(a), Some(b)) => format!(", RSS change over pushes {} KiB", b as i64 - a as i64),
        _ => String::new(),
    };
    verdict(
        flat && finalized && svc_flat && ok,
        format!("session state {start} B (M·(C_f+d+1)·8 = {expected}) constant over 100000 records; service state {svc_start} B constant over 1000 pushes{rss}"),
    )
}

fn random_layout(rng: &mut ChaCha8Rng) -> FeatureLayout {
    FeatureLayout {
        feature_dim: rng.random_range(1..40),
        style_channels: rng.random_range(0..10),
        num_taps: rng.random_range(0..4),
    }
}

fn random_f32(rng: &mut ChaCha8Rng) -> f32 {
    match rng.random_range(0..10) {
        0 => f32::from_bits(rng.random()),
        1 => 0.0,
        _ => rng.random_range(-1e3..1e3),
    }
}

fn c9_round_trips() -> Verdict {
    let mut failures = Vec::new();
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let layout = random_layout(&mut rng);
        let records: Vec<FeatureRecord> = (0..rng.random_range(0..20))
            .map(|_| {
                FeatureRecord::new(
                    rng.random(),
                    (0..layout.feature_dim).map(|_| random_f32(&mut rng)).collect(),
                    (0..layout.style_len()).map(|_| random_f32(&mut rng)).collect(),
                )
            })
            .collect();
        let mut a = Vec::new();
        write_features(&mut a, &layout, &records).unwrap();
        let back = read_features(a.as_slice()).unwrap();
        let mut b = Vec::new();
        write_features(&mut b, &back.layout, &back.records).unwrap();
        if a != b {
            failures.push(format!("CAFF seed {seed}"));
        }

        let heads = [1usize, 2][rng.random_range(0..2)];
        let cfg = ModelConfig {
            num_centers: rng.random_range(1..5),
            feature_dim: rng.random_range(2..12),
            style_channels: rng.random_range(1..5),
            gamma_dim: 2 * rng.random_range(1..4),
            norm_embed_dim: 2 * rng.random_range(1..3),
            num_heads: heads,
            encoder_layers: rng.random_range(0..3),
            mixer_depth: rng.random_range(0..3),
            ..ModelConfig::toy()
        };
        let mut model = FusionModel::new_random(cfg.clone(), seed).unwrap();
        model.params.visit_mut(|t| t.data_mut().iter_mut().for_each(|v| *v = random_f32(&mut rng)));
        model.frozen.bn_mean = (0..cfg.gamma_dim).map(|_| rng.random_range(-5.0..5.0)).collect();
        model.frozen.bn_var = (0..cfg.gamma_dim).map(|_| rng.random_range(0.0..5.0)).collect();
        model.frozen.norm_mean = rng.random();
        let mut a = Vec::new();
        write_checkpoint(&mut a, &model).unwrap();
        let mut b = Vec::new();
        write_checkpoint(&mut b, &read_checkpoint(a.as_slice()).unwrap()).unwrap();
        if a != b {
            failures.push(format!("CAFW seed {seed}"));
        }

        let small = random_model(ModelConfig::toy(), seed);
        let mut session = FusionSession::open(rng.random(), &small.config);
        for _ in 0..rng.random_range(0..4) {
            let n = rng.random_range(1..10);
            session.update(&uniform_records(&mut rng, &small.config, n), &small).unwrap();
        }
        let a = session.to_snapshot();
        let b = FusionSession::from_snapshot(&a).unwrap().to_snapshot();
        if a != b {
            failures.push(format!("CAFS seed {seed}"));
        }
    }
    verdict(
        failures.is_empty(),
        if failures.is_empty() {
            "CAFF, CAFW, CAFS byte-identical over 100 seeds".to_string()
        } else {
            format!("mismatches: {}", failures.join(", "))
        },
    )
}

fn c10_single_center() -> Verdict {
    let cfg = ModelConfig {
        num_centers: 1,
        ..default_model_config()
    };
    let model = random_model(cfg.clone(), 10);
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut exact = true;
    let mut mean_dev = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(1..=64);
        let recs = uniform_records(&mut rng, &cfg, n);
        let out = model.fuse(&recs).unwrap();
        exact &= out.weights.p.data().iter().all(|&p| p == 1.0);
        exact &= out.fused.as_slice() == out.intermediate.f_prime.row(0);
        exact &= out.assignment.a.data().iter().all(|&a| a == 1.0);
        for ch in 0..cfg.feature_dim {
            let avg = recs.iter().map(|r| r.feature[ch] as f64).sum::<f64>() / n as f64;
            mean_dev = mean_dev.max((avg - out.fused[ch] as f64).abs());
        }
    }
    verdict(
        exact && mean_dev < 1e-5,
        format!("P == 1, A == 1, fused == F' row bit-exact: {exact}; max deviation from plain mean {mean_dev:.2e}"),
    )
}

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run = |n: u32| wanted.is_empty() || wanted.contains(&n);
    let mut trained_models = Vec::new();
    let mut results: Vec<(u32, &str, Verdict, Duration)> = Vec::new();
    let mut record = |n: u32, name: &'static str, f: &mut dyn FnMut() -> Verdict| {
        if run(n) {
            let t = Instant::now();
            let v = f();
            let line = format!(
                "criterion {n:>2} [{}] {name}: {} ({:.1}s)",
                if v.pass { "PASS" } else { "FAIL" },
                v.detail,
                t.elapsed().as_secs_f64()
            );
            println!("{line}");
            results.push((n, name, v, t.elapsed()));
        }
    };
    record(1, "batch-order invariance", &mut c1_batch_order);
    record(2, "incremental vs pooled", &mut c2_incremental_vs_direct);
    record(3, "within-batch permutation invariance", &mut c3_within_batch_permutation);
    record(4, "column-stochastic A and convex fusion", &mut c4_stochastic_and_convex);
    record(5, "full-pipeline gradient check", &mut c5_gradients);
    record(6, "trained fusion beats naive averaging", &mut || c6_trend(&mut trained_models));
    record(7, "random-order robustness", &mut || c7_random_order(&mut trained_models));
    record(8, "constant-memory streaming", &mut c8_constant_memory);
    record(9, "format round-trips", &mut c9_round_trips);
    record(10, "single-center degeneracy", &mut c10_single_center);

    println!();
    println!("acceptance summary:");
    for (n, name, v, d) in &results {
        println!(
            "  {n:>2} {:<40} {} ({:.1}s)",
            name,
            if v.pass { "PASS" } else { "FAIL" },
            d.as_secs_f64()
        );
    }
    let failed = results.iter().filter(|r| !r.2.pass).count();
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
