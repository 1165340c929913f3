//! Command-line surface of the `setfuse` binary.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::Serialize;

use crate::corpus::{CorpusConfig, SyntheticCorpus};
use crate::error::{Error, Result};
use crate::io::{load_checkpoint, load_features, save_checkpoint, save_features, FeatureLayout};
use crate::metrics::{run_protocol, sample_weights, EvalProtocol, MetricsReport, Method, ProtocolConfig};
use crate::model::FusionModel;
use crate::numeric::Tensor;
use crate::service::{serve, Service};
use crate::stream::FusionSession;
use crate::style::FeatureRecord;
use crate::train::{train, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "setfuse", version, about = "Streaming set feature fusion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fuse every probe of a CAFF file into one template.
    Fuse(FuseArgs),
    /// Train on a synthetic corpus and write a checkpoint.
    Train(TrainArgs),
    /// Score a model and/or the naive average on an evaluation protocol.
    Eval(EvalArgs),
    /// Run the NDJSON fusion service.
    Serve(ServeArgs),
    /// Write a synthetic corpus as CAFF files.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    #[arg(long)]
    pub output: PathBuf,
    /// CSV of per-record weights, `subject,record,weight`.
    #[arg(long)]
    pub emit_weights: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML training config; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub out_checkpoint: PathBuf,
    /// Loss trace CSV; defaults to the checkpoint path with `.trace.csv`.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// TOML protocol config; a generated protocol with defaults otherwise.
    #[arg(long)]
    pub protocol: Option<PathBuf>,
    /// Also score the naive average.
    #[arg(long)]
    pub baseline: bool,
    /// File-backed probes (CAFF); requires `--gallery`.
    #[arg(long, requires = "gallery")]
    pub probes: Option<PathBuf>,
    #[arg(long, requires = "probes")]
    pub gallery: Option<PathBuf>,
    /// Report path; stdout when absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub weights_csv: Option<PathBuf>,
    #[arg(long)]
    pub entropy_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:7878")]
    pub listen: String,
    #[arg(long)]
    pub model: PathBuf,
    /// Directory for session snapshots.
    #[arg(long)]
    pub state_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub n_ids: usize,
    #[arg(long, default_value_t = 16)]
    pub per_id: usize,
    /// Take feature and style dimensions from this checkpoint.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub gallery_output: Option<PathBuf>,
}

#[derive(Debug, Default, PartialEq, Serialize)]
pub struct FuseSummary {
    pub probes: usize,
    pub records: usize,
    pub rejected: usize,
}

/// Fused template of one probe plus per-record weights.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedProbe {
    pub subject: u32,
    pub fused: Vec<f32>,
    /// `(record index in the input, weight)`.
    pub weights: Vec<(usize, f64)>,
}

/// Groups `records` by subject (first appearance order), drops non-finite
/// records and streams each group through a session in `batch_size` chunks.
pub fn fuse_records(
    model: &FusionModel,
    records: &[FeatureRecord],
    batch_size: usize,
) -> Result<(Vec<FusedProbe>, FuseSummary)> {
    if batch_size == 0 {
        return Err(Error::Usage("batch size must be positive".into()));
    }
    let batch_size = batch_size.min(model.config.max_batch);
    let mut order: Vec<u32> = Vec::new();
    let mut groups: std::collections::HashMap<u32, Vec<usize>> = Default::default();
    let mut summary = FuseSummary {
        records: records.len(),
        ..Default::default()
    };
    for (i, r) in records.iter().enumerate() {
        if !r.is_finite() {
            summary.rejected += 1;
            continue;
        }
        groups
            .entry(r.subject)
            .or_insert_with(|| {
                order.push(r.subject);
                Vec::new()
            })
            .push(i);
    }
    let m = model.config.num_centers;
    let mut out = Vec::with_capacity(order.len());
    for subject in order {
        let idx = &groups[&subject];
        let mut session = FusionSession::open(subject as u64, &model.config);
        let mut columns: Vec<Vec<f32>> = vec![Vec::with_capacity(idx.len()); m];
        for chunk in idx.chunks(batch_size) {
            let batch: Vec<FeatureRecord> = chunk.iter().map(|&i| records[i].clone()).collect();
            let a = session.update(&batch, model)?;
            for (j, col) in columns.iter_mut().enumerate() {
                col.extend_from_slice(a.a.row(j));
            }
        }
        let done = session.finalize(model)?;
        let w = sample_weights(&Tensor::matrix(m, idx.len(), columns.concat()), &done.weights.p)?;
        out.push(FusedProbe {
            subject,
            fused: done.fused,
            weights: idx.iter().copied().zip(w).collect(),
        });
    }
    summary.probes = out.len();
    Ok((out, summary))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn cmd_fuse(args: &FuseArgs) -> Result<()> {
    let model = load_checkpoint(&args.model)?;
    let input = load_features(&args.input)?;
    if input.records.is_empty() {
        return Err(Error::Usage(format!("{} holds no records", args.input.display())));
    }
    if input.layout != FeatureLayout::of(&model.config) {
        return Err(Error::Config(format!(
            "input layout {:?} does not match the model",
            input.layout
        )));
    }
    let (probes, summary) = fuse_records(&model, &input.records, args.batch_size)?;
    if summary.rejected > 0 {
        warn!("rejected {} non-finite records", summary.rejected);
    }
    let fused: Vec<FeatureRecord> = probes
        .iter()
        .map(|p| FeatureRecord::new(p.subject, p.fused.clone(), Vec::new()))
        .collect();
    let out_layout = FeatureLayout {
        feature_dim: model.config.feature_dim,
        style_channels: 0,
        num_taps: 0,
    };
    save_features(&args.output, &out_layout, &fused)?;
    if let Some(path) = &args.emit_weights {
        let mut w = create(path)?;
        writeln!(w, "subject,record,weight")?;
        for p in &probes {
            for (i, v) in &p.weights {
                writeln!(w, "{},{},{}", p.subject, i, v)?;
            }
        }
        w.flush()?;
    }
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut config = match &args.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(e) = args.epochs {
        config.epochs = e;
    }
    let outcome = train(&config)?;
    for (e, l) in outcome.epoch_loss.iter().enumerate() {
        info!("epoch {e}: loss {l:.5}");
    }
    save_checkpoint(&args.out_checkpoint, &outcome.model)?;
    let trace = args
        .trace
        .clone()
        .unwrap_or_else(|| args.out_checkpoint.with_extension("trace.csv"));
    let mut w = create(&trace)?;
    outcome.write_trace(&mut w)?;
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalOutput {
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<MetricsReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    baseline: Option<MetricsReport>,
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    if args.model.is_none() && !args.baseline {
        return Err(Error::Usage("give --model, --baseline or both".into()));
    }
    let model = args.model.as_deref().map(load_checkpoint).transpose()?;
    let config = match &args.protocol {
        Some(p) => ProtocolConfig::from_toml(&std::fs::read_to_string(p)?)?,
        None => ProtocolConfig::default(),
    };
    let model_cfg = model
        .as_ref()
        .map(|m| m.config.clone())
        .unwrap_or_else(|| TrainConfig::default().model);
    let protocol = match (&args.probes, &args.gallery) {
        (Some(p), Some(g)) => {
            EvalProtocol::from_records(load_features(p)?.records, load_features(g)?.records, &config)?
        }
        _ => EvalProtocol::synthetic(&config, &model_cfg)?,
    };
    let out = EvalOutput {
        model: model.as_ref().map(|m| run_protocol(&protocol, Method::Model(m))).transpose()?,
        baseline: args.baseline.then(|| run_protocol(&protocol, Method::Baseline)).transpose()?,
    };
    let primary = out.model.as_ref().or(out.baseline.as_ref()).expect("one report exists");
    if let Some(path) = &args.weights_csv {
        let mut w = create(path)?;
        primary.write_weights_csv(&mut w)?;
        w.flush()?;
    }
    if let Some(path) = &args.entropy_csv {
        let mut w = create(path)?;
        primary.write_entropy_csv(&mut w)?;
        w.flush()?;
    }
    let json = serde_json::to_string_pretty(&out)?;
    match &args.output {
        Some(p) => std::fs::write(p, json + "\n")?,
        None => println!("{json}"),
    }
    Ok(())
}

fn cmd_serve(args: &ServeArgs) -> Result<()> {
    let model = load_checkpoint(&args.model)?;
    let service = Arc::new(Service::new(model, args.state_dir.clone())?);
    let listener = TcpListener::bind(&args.listen)?;
    serve(listener, service)
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let model_cfg = match &args.model {
        Some(p) => load_checkpoint(p)?.config,
        None => TrainConfig::default().model,
    };
    let corpus = SyntheticCorpus::generate(CorpusConfig::for_model(&model_cfg), args.seed, args.n_ids, args.per_id)?;
    let layout = FeatureLayout::of(&model_cfg);
    save_features(&args.output, &layout, &corpus.records)?;
    if let Some(g) = &args.gallery_output {
        save_features(g, &layout, &corpus.gallery)?;
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Fuse(a) => cmd_fuse(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Serve(a) => cmd_serve(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::testutil::random_records;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> FusionModel {
        let mut m = FusionModel::new_random(ModelConfig::toy(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let shape = m.params.proj.head_w.shape().to_vec();
        m.params.proj.head_w = crate::numeric::randn(&mut rng, &shape, 0.5);
        m
    }

    #[test]
    fn fuse_groups_by_subject_and_rejects_nan() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut recs = random_records(&mut rng, &m.config, 5, 3);
        recs.extend(random_records(&mut rng, &m.config, 4, 1));
        recs[2].feature[0] = f32::NAN;
        let (probes, summary) = fuse_records(&m, &recs, 2).unwrap();
        assert_eq!(summary, FuseSummary { probes: 2, records: 9, rejected: 1 });
        assert_eq!(probes[0].subject, 3);
        assert_eq!(probes[0].weights.len(), 4);
        for p in &probes {
            assert!((p.weights.iter().map(|w| w.1).sum::<f64>() - 1.0).abs() < 1e-6);
        }
        assert!(fuse_records(&m, &recs, 0).is_err());
    }

    #[test]
    fn batch_size_and_order_do_not_matter_for_one_batch_runs() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let recs = random_records(&mut rng, &m.config, 12, 0);
        let (whole, _) = fuse_records(&m, &recs, 64).unwrap();
        let mut shuffled = recs.clone();
        shuffled.shuffle(&mut rng);
        let (again, _) = fuse_records(&m, &shuffled, 64).unwrap();
        for (a, b) in whole[0].fused.iter().zip(&again[0].fused) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn cli_parses() {
        let cli = Cli::try_parse_from([
            "setfuse", "fuse", "--model", "m", "--input", "i", "--output", "o", "--emit-weights", "w",
        ])
        .unwrap();
        match cli.command {
            Command::Fuse(a) => {
                assert_eq!(a.batch_size, 256);
                assert!(a.emit_weights.is_some());
            }
            _ => panic!(),
        }
        assert!(Cli::try_parse_from(["setfuse", "eval", "--probes", "p"]).is_err());
    }
}
