//! End-to-end training of the fusion parameters on a synthetic corpus.
//!
//! One step draws `B` identities, two disjoint sets of `N'` items per
//! identity, and a random split of every set into consecutive chunks. The
//! loss is `λ_t·L_t + λ_p·L_p` where `L_t` compares the concurrent fused
//! output against the identity template and `L_p` compares it against the
//! chunk-streamed output. The streamed branch is built on the tape from the
//! pooled per-chunk sums, which is what a [`FusionSession`] computes.
//!
//! [`FusionSession`]: crate::stream::FusionSession

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::aggregate::{cluster_weights_graph, fuse_graph};
use crate::cluster::{assignment_graph, cluster_graph, cluster_sums_graph, CLUSTER_EPS};
use crate::corpus::{CorpusConfig, SyntheticCorpus};
use crate::error::{Error, Result};
use crate::losses::cosine_distance_graph;
use crate::model::{FrozenStats, FusionModel, ModelConfig, Params};
use crate::numeric::{finite_difference_check, Real, Tape, Tensor, Var};
use crate::style::{feature_matrix, style_graph, BatchMoments, BnMode, FeatureRecord, StyleBatch};

const CORPUS_SEED_SALT: u64 = 0xc0_4b05;

/// Source of the per-identity target template.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetMode {
    /// The generator's class center.
    Center,
    /// Normalised mean of the identity's corpus features.
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    /// `B`: identities per step.
    pub subjects_per_step: usize,
    pub sets_per_subject: usize,
    pub min_set_size: usize,
    pub max_set_size: usize,
    /// Upper bound on the number of chunks in the streamed branch.
    pub max_chunks: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Zero-based epochs at which the learning rate is multiplied by
    /// `lr_decay_factor`.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub lambda_t: f64,
    pub lambda_p: f64,
    pub bn_momentum: f64,
    /// Std of train-time noise added to style statistics.
    pub style_augment: f64,
    pub target: TargetMode,
    pub n_ids: usize,
    pub per_id: usize,
    pub model: ModelConfig,
    pub corpus: CorpusConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let model = ModelConfig {
            feature_dim: 64,
            ..ModelConfig::default()
        };
        Self {
            seed: 0,
            epochs: 10,
            subjects_per_step: 32,
            sets_per_subject: 2,
            min_set_size: 2,
            max_set_size: 16,
            max_chunks: 4,
            learning_rate: 1e-3,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            lr_decay_epochs: vec![6, 9],
            lr_decay_factor: 0.1,
            lambda_t: 1.0,
            lambda_p: 1.0,
            bn_momentum: 0.1,
            style_augment: 0.05,
            target: TargetMode::Center,
            n_ids: 1000,
            per_id: 32,
            corpus: CorpusConfig::for_model(&model),
            model,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.corpus = cfg.corpus.with_dims(&cfg.model);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.corpus.validate()?;
        let (m, c) = (&self.model, &self.corpus);
        if m.feature_dim != c.feature_dim || m.style_channels != c.style_channels || m.num_taps != c.num_taps {
            return Err(Error::Config("corpus and model dimensions differ".into()));
        }
        if self.subjects_per_step == 0 || self.sets_per_subject == 0 {
            return Err(Error::Config("steps need at least one set".into()));
        }
        if self.min_set_size < 2 || self.min_set_size > self.max_set_size {
            return Err(Error::Config("set sizes must satisfy 2 <= min <= max".into()));
        }
        if self.max_set_size > m.max_batch {
            return Err(Error::Config("max_set_size exceeds the model's max_batch".into()));
        }
        if self.per_id < self.sets_per_subject * self.max_set_size {
            return Err(Error::Config("per_id too small for disjoint sets of max_set_size".into()));
        }
        if self.n_ids < self.subjects_per_step.max(2) {
            return Err(Error::Config("n_ids must cover one step".into()));
        }
        if self.max_chunks < 1 {
            return Err(Error::Config("max_chunks must be at least 1".into()));
        }
        let finite = [
            self.learning_rate,
            self.weight_decay,
            self.lambda_t,
            self.lambda_p,
            self.style_augment,
        ];
        if finite.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("rates, weights and noise must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must be in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("bn_momentum must be in [0, 1]".into()));
        }
        Ok(())
    }

    /// Learning rate in effect during zero-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.learning_rate * self.lr_decay_factor.powi(decays as i32)
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.n_ids / self.subjects_per_step
    }

    pub fn corpus_seed(&self) -> u64 {
        self.seed ^ CORPUS_SEED_SALT
    }
}

/// AdamW moments and step count, aligned with [`Params::flatten`] order.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl OptimizerState {
    pub fn new(params: &Params<Tensor<f32>>, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor<f32>> = params.flatten().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One decoupled-weight-decay Adam update.
    pub fn apply(&mut self, params: &mut Params<Tensor<f32>>, grads: &[Tensor<f32>], lr: f64) {
        assert_eq!(grads.len(), self.m.len(), "gradient count");
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let decay = 1.0 - lr * self.weight_decay;
        let mut i = 0;
        params.visit_mut(|p| {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            for (((w, m), v), &g) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                let g = g as f64;
                let mn = b1 * *m as f64 + (1.0 - b1) * g;
                let vn = b2 * *v as f64 + (1.0 - b2) * g * g;
                *m = mn as f32;
                *v = vn as f32;
                let update = (mn / c1) / ((vn / c2).sqrt() + self.eps);
                *w = (*w as f64 * decay - lr * update) as f32;
            }
            i += 1;
        });
    }
}

/// One set: its items, target template and streamed chunk sizes.
#[derive(Clone, Debug)]
pub struct TrainSet {
    pub records: Vec<FeatureRecord>,
    pub target: Vec<f32>,
    pub chunks: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub sets: Vec<TrainSet>,
}

#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub lambda_t: f64,
    pub lambda_p: f64,
}

/// Loss values of one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepLoss {
    pub step: usize,
    pub epoch: usize,
    pub template: f64,
    pub consistency: f64,
    pub total: f64,
}

pub(crate) struct StepGraph {
    pub total: Var,
    pub template: Var,
    pub consistency: Var,
    pub moments: Option<BatchMoments>,
}

/// Random composition of `n` into `2..=max_chunks` positive parts
/// (a single part when `n < 2` or `max_chunks < 2`).
pub fn random_chunks<R: Rng + ?Sized>(rng: &mut R, n: usize, max_chunks: usize) -> Vec<usize> {
    let hi = n.min(max_chunks);
    if hi < 2 {
        return vec![n];
    }
    let t = rng.random_range(2..=hi);
    let mut cuts: Vec<usize> = (1..n).collect();
    cuts.shuffle(rng);
    cuts.truncate(t - 1);
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(t);
    let mut prev = 0;
    for c in cuts.into_iter().chain(std::iter::once(n)) {
        out.push(c - prev);
        prev = c;
    }
    out
}

fn augment<R: Rng + ?Sized>(rng: &mut R, rec: &FeatureRecord, cfg: &ModelConfig, noise: f64) -> FeatureRecord {
    let mut r = rec.clone();
    if noise > 0.0 {
        let ch = cfg.style_channels;
        for tap in 0..cfg.num_taps {
            let base = 2 * tap * ch;
            for k in 0..ch {
                let e: f64 = StandardNormal.sample(rng);
                r.style_stats[base + k] += (noise * e) as f32;
                let e: f64 = StandardNormal.sample(rng);
                r.style_stats[base + ch + k] *= (noise * e).exp() as f32;
            }
        }
    }
    r
}

/// Draws one step's batch for the given identities.
pub fn sample_batch<R: Rng + ?Sized>(
    rng: &mut R,
    corpus: &SyntheticCorpus,
    targets: &Tensor<f32>,
    ids: &[usize],
    config: &TrainConfig,
) -> TrainBatch {
    let n = rng.random_range(config.min_set_size..=config.max_set_size);
    let mut sets = Vec::with_capacity(ids.len() * config.sets_per_subject);
    for &id in ids {
        let idx = corpus.sample_indices(rng, id, n * config.sets_per_subject);
        for part in idx.chunks(n) {
            let records = part
                .iter()
                .map(|&i| augment(rng, &corpus.records[i], &config.model, config.style_augment))
                .collect();
            sets.push(TrainSet {
                records,
                target: targets.row(id).to_vec(),
                chunks: random_chunks(rng, n, config.max_chunks),
            });
        }
    }
    TrainBatch { sets }
}

/// Builds the loss graph of one step.
pub(crate) fn step_graph<T: Real>(
    tape: &mut Tape<'_, T>,
    p: &Params<Var>,
    cfg: &ModelConfig,
    frozen: &FrozenStats,
    batch: &TrainBatch,
    weights: LossWeights,
    bn: BnMode<'_>,
) -> Result<StepGraph> {
    if batch.sets.is_empty() {
        return Err(Error::Usage("empty training batch".into()));
    }
    let all: Vec<FeatureRecord> = batch.sets.iter().flat_map(|s| s.records.iter().cloned()).collect();
    for r in &all {
        r.validate(cfg)?;
    }
    let style_in = StyleBatch::<T>::build(&all, cfg, frozen)?;
    let (s, moments) = style_graph(tape, &p.style, &style_in, bn);
    let f = tape.constant(feature_matrix(&all, cfg.feature_dim));

    let mut fused_rows = Vec::with_capacity(batch.sets.len());
    let mut split_rows = Vec::with_capacity(batch.sets.len());
    let mut offset = 0;
    for set in &batch.sets {
        let n = set.records.len();
        if set.chunks.iter().sum::<usize>() != n || set.chunks.contains(&0) {
            return Err(Error::Usage("chunk sizes must be positive and cover the set".into()));
        }
        let sk = tape.slice_rows(s, offset, n);
        let fk = tape.slice_rows(f, offset, n);
        offset += n;

        let a = assignment_graph(tape, p, sk, cfg.num_heads);
        let fp = cluster_graph(tape, a, fk);
        let sp = cluster_graph(tape, a, sk);
        let w = cluster_weights_graph(tape, p, sp);
        fused_rows.push(fuse_graph(tape, w, fp));

        if weights.lambda_p > 0.0 {
            let mut sums: Option<(Var, Var, Var)> = None;
            let mut start = 0;
            for &len in &set.chunks {
                let sc = tape.slice_rows(sk, start, len);
                let fc = tape.slice_rows(fk, start, len);
                start += len;
                let ac = assignment_graph(tape, p, sc, cfg.num_heads);
                let (fs, mass) = cluster_sums_graph(tape, ac, fc);
                let ss = tape.matmul(ac, sc);
                sums = Some(match sums {
                    None => (fs, ss, mass),
                    Some((f0, s0, m0)) => (tape.add(f0, fs), tape.add(s0, ss), tape.add(m0, mass)),
                });
            }
            let (fs, ss, mass) = sums.expect("at least one chunk");
            let denom = tape.add_scalar(mass, T::from_f64_lossy(CLUSTER_EPS));
            let f_hat = tape.div_rows(fs, denom);
            let s_hat = tape.div_rows(ss, denom);
            let w = cluster_weights_graph(tape, p, s_hat);
            split_rows.push(fuse_graph(tape, w, f_hat));
        }
    }

    let fused = tape.concat_rows(&fused_rows);
    let targets: Vec<T> = batch
        .sets
        .iter()
        .flat_map(|s| s.target.iter().map(|&v| T::from_f64_lossy(v as f64)))
        .collect();
    let targets = tape.constant(Tensor::matrix(batch.sets.len(), cfg.feature_dim, targets));
    let template = cosine_distance_graph(tape, fused, targets);
    let consistency = if split_rows.is_empty() {
        tape.constant(Tensor::scalar(T::zero()))
    } else {
        let split = tape.concat_rows(&split_rows);
        cosine_distance_graph(tape, fused, split)
    };
    let lt = tape.scale(template, T::from_f64_lossy(weights.lambda_t));
    let lp = tape.scale(consistency, T::from_f64_lossy(weights.lambda_p));
    let total = tape.add(lt, lp);
    Ok(StepGraph {
        total,
        template,
        consistency,
        moments,
    })
}

/// Loss and parameter gradients (in [`Params::flatten`] order) of one step
/// with batch-moment normalisation.
pub fn loss_and_grads(
    model: &FusionModel,
    batch: &TrainBatch,
    weights: LossWeights,
) -> Result<(StepLoss, Vec<Tensor<f32>>, Option<BatchMoments>)> {
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, true);
    let g = step_graph(&mut tape, &p, &model.config, &model.frozen, batch, weights, BnMode::Batch)?;
    let value = |v: Var| tape.value(v).data()[0] as f64;
    let loss = StepLoss {
        step: 0,
        epoch: 0,
        template: value(g.template),
        consistency: value(g.consistency),
        total: value(g.total),
    };
    if !loss.total.is_finite() {
        return Err(Error::Diverged(format!(
            "non-finite loss (template {}, consistency {})",
            loss.template, loss.consistency
        )));
    }
    let grads = tape.backward(g.total)?;
    let shapes = model.params.flatten();
    let flat: Vec<Tensor<f32>> = p
        .flatten()
        .iter()
        .zip(shapes)
        .map(|(&&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((loss, flat, g.moments))
}

/// Max relative error between the analytic gradient of the full step loss
/// (both branches, batch-moment normalisation) and central differences, in
/// f64 with `h = 1e-5`.
pub fn loss_gradient_check(model: &FusionModel, batch: &TrainBatch, weights: LossWeights) -> Result<f64> {
    let model64 = model.cast::<f64>();
    let flat: Vec<Tensor<f64>> = model64.params.flatten().into_iter().cloned().collect();
    let layout = &model64.params;
    {
        // Surface batch errors here; the closure below can then assume success.
        let mut tape = Tape::new();
        let p = model64.bind(&mut tape, true);
        step_graph(&mut tape, &p, &model64.config, &model64.frozen, batch, weights, BnMode::Batch)?;
    }
    finite_difference_check(
        |tape, vars| {
            let mut it = vars.iter();
            let p = layout.map(|_| *it.next().unwrap());
            step_graph(tape, &p, &model64.config, &model64.frozen, batch, weights, BnMode::Batch)
                .expect("validated above")
                .total
        },
        &flat,
        1e-5,
    )
}

/// Per-identity targets for `mode`.
pub fn targets(corpus: &SyntheticCorpus, mode: TargetMode) -> Tensor<f32> {
    match mode {
        TargetMode::Center => corpus.class_centers.clone(),
        TargetMode::Mean => corpus.mean_templates(),
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: FusionModel,
    pub trace: Vec<StepLoss>,
    /// Mean total loss per epoch.
    pub epoch_loss: Vec<f64>,
}

impl TrainOutcome {
    /// CSV with columns `step,L_t,L_p,total`.
    pub fn write_trace<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "step,L_t,L_p,total")?;
        for s in &self.trace {
            writeln!(w, "{},{},{},{}", s.step, s.template, s.consistency, s.total)?;
        }
        Ok(())
    }
}

fn update_running(stats: &mut FrozenStats, moments: &BatchMoments, momentum: f64) {
    for (r, &b) in stats.bn_mean.iter_mut().zip(&moments.mean) {
        *r = (1.0 - momentum) * *r + momentum * b;
    }
    for (r, &b) in stats.bn_var.iter_mut().zip(&moments.var) {
        *r = (1.0 - momentum) * *r + momentum * b;
    }
}

/// Generates the corpus for `config` and trains on it.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let corpus = SyntheticCorpus::generate(config.corpus.clone(), config.corpus_seed(), config.n_ids, config.per_id)?;
    train_on(config, &corpus)
}

/// Trains a freshly initialised model on `corpus`.
pub fn train_on(config: &TrainConfig, corpus: &SyntheticCorpus) -> Result<TrainOutcome> {
    config.validate()?;
    let mut model = FusionModel::new_random(config.model.clone(), config.seed)?;
    let (norm_mean, norm_std) = corpus.norm_stats();
    model.frozen.norm_mean = norm_mean;
    model.frozen.norm_std = norm_std.max(1e-6);
    let targets = targets(corpus, config.target);
    let weights = LossWeights {
        lambda_t: config.lambda_t,
        lambda_p: config.lambda_p,
    };
    let mut opt = OptimizerState::new(&model.params, config.beta1, config.beta2, config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut trace = Vec::new();
    let mut epoch_loss = Vec::with_capacity(config.epochs);
    let mut ids: Vec<usize> = (0..corpus.n_ids()).collect();
    let steps = corpus.n_ids() / config.subjects_per_step;
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        ids.shuffle(&mut rng);
        let mut acc = 0.0;
        for chunk in ids.chunks_exact(config.subjects_per_step).take(steps) {
            let batch = sample_batch(&mut rng, corpus, &targets, chunk, config);
            let (mut loss, grads, moments) = loss_and_grads(&model, &batch, weights).map_err(|e| match e {
                Error::Diverged(msg) => Error::Diverged(format!("epoch {epoch}, step {}: {msg}", trace.len())),
                other => other,
            })?;
            opt.apply(&mut model.params, &grads, lr);
            if let Some(m) = moments {
                update_running(&mut model.frozen, &m, config.bn_momentum);
            }
            loss.step = trace.len();
            loss.epoch = epoch;
            acc += loss.total;
            trace.push(loss);
        }
        let mean = acc / steps.max(1) as f64;
        log::info!("epoch {epoch}: lr {lr:.1e}, mean loss {mean:.5}");
        epoch_loss.push(mean);
    }
    Ok(TrainOutcome {
        model,
        trace,
        epoch_loss,
    })
}
