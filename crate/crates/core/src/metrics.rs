//! Verification and identification metrics, assignment diagnostics and the
//! synthetic evaluation protocol.

use std::io::Write;

use log::warn;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusConfig, SyntheticCorpus};
use crate::error::{Error, Result};
use crate::losses::COSINE_EPS;
use crate::model::{FusionModel, ModelConfig};
use crate::numeric::Tensor;
use crate::stream::FusionSession;
use crate::style::FeatureRecord;

pub fn cosine_similarity(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    (dot / (na.sqrt() * nb.sqrt() + COSINE_EPS)).clamp(-1.0, 1.0)
}

/// One operating point of a verification curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TarAtFar {
    pub tar: f64,
    /// A pair is accepted when its score is strictly above this value.
    /// `None` means every pair is accepted.
    pub threshold: Option<f64>,
    /// Impostor acceptance rate actually realised at `threshold`.
    pub far: f64,
}

/// TAR at the strictest threshold whose impostor acceptance rate does not
/// exceed `far`.
///
/// With impostors sorted high to low and `k = ⌊far·n⌋`, the threshold is the
/// `(k+1)`-th highest impostor score and acceptance is strict, so impostors
/// tied with it are rejected.
pub fn tar_at_far(genuine: &[f64], impostor: &[f64], far: f64) -> Result<TarAtFar> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::Usage("score lists must be non-empty".into()));
    }
    if genuine.iter().chain(impostor).any(|s| !s.is_finite()) || !far.is_finite() || far < 0.0 {
        return Err(Error::NonFinite("scores and FAR must be finite".into()));
    }
    let n = impostor.len();
    let achievable = 1.0 / n as f64;
    if far < achievable {
        return Err(Error::FarInfeasible {
            requested: far,
            achievable,
            impostors: n,
        });
    }
    // The small slack keeps products like 0.001 * 10000 from rounding down.
    let k = (far * n as f64 + 1e-9).floor() as usize;
    if k >= n {
        return Ok(TarAtFar {
            tar: 1.0,
            threshold: None,
            far: 1.0,
        });
    }
    let mut sorted = impostor.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let t = sorted[k];
    let above = |scores: &[f64]| scores.iter().filter(|&&s| s > t).count() as f64 / scores.len() as f64;
    Ok(TarAtFar {
        tar: above(genuine),
        threshold: Some(t),
        far: above(impostor),
    })
}

/// Fraction of probes whose subject appears among the `k` most similar
/// gallery entries. Equal scores keep gallery order.
pub fn rank_k<P: AsRef<[f32]>, G: AsRef<[f32]>>(
    probes: &[P],
    probe_labels: &[u32],
    gallery: &[G],
    gallery_labels: &[u32],
    k: usize,
) -> Result<f64> {
    if probes.len() != probe_labels.len() || gallery.len() != gallery_labels.len() {
        return Err(Error::Dimension("labels must match their features".into()));
    }
    if probes.is_empty() || gallery.is_empty() || k == 0 {
        return Err(Error::Usage("rank-k needs probes, a gallery and k >= 1".into()));
    }
    let mut hits = 0usize;
    let mut order: Vec<usize> = Vec::with_capacity(gallery.len());
    for (p, &label) in probes.iter().zip(probe_labels) {
        let scores: Vec<f64> = gallery.iter().map(|g| cosine_similarity(p.as_ref(), g.as_ref())).collect();
        order.clear();
        order.extend(0..gallery.len());
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        if order.iter().take(k).any(|&g| gallery_labels[g] == label) {
            hits += 1;
        }
    }
    Ok(hits as f64 / probes.len() as f64)
}

/// How per-row entropies of an assignment map are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntropyReduction {
    #[default]
    Mean,
    Sum,
}

/// Entropy (natural log) of each row of `A` after normalising it to a
/// distribution over items, reduced over rows. Rows with zero mass count as
/// zero entropy.
pub fn assignment_entropy(a: &Tensor<f32>, reduction: EntropyReduction) -> Result<f64> {
    if a.shape().len() != 2 || a.rows() == 0 || a.cols() == 0 {
        return Err(Error::Dimension(format!("A must be a non-empty matrix, got {:?}", a.shape())));
    }
    if a.data().iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::NonFinite("A must be finite and non-negative".into()));
    }
    let mut total = 0.0;
    for j in 0..a.rows() {
        let row = a.row(j);
        let z: f64 = row.iter().map(|&v| v as f64).sum();
        if z <= 0.0 {
            continue;
        }
        total -= row
            .iter()
            .map(|&v| v as f64 / z)
            .filter(|&p| p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>();
    }
    Ok(match reduction {
        EntropyReduction::Mean => total / a.rows() as f64,
        EntropyReduction::Sum => total,
    })
}

/// Per-item contribution `w_i ∝ Σ_j A_{j,i}·mean_c P_{j,c}`, normalised to
/// sum to one.
pub fn sample_weights(a: &Tensor<f32>, p: &Tensor<f32>) -> Result<Vec<f64>> {
    if a.shape().len() != 2 || p.shape().len() != 2 || a.rows() != p.rows() || a.cols() == 0 {
        return Err(Error::Dimension(format!("A {:?} and P {:?} disagree", a.shape(), p.shape())));
    }
    let importance: Vec<f64> = (0..p.rows())
        .map(|j| p.row(j).iter().map(|&v| v as f64).sum::<f64>() / p.cols() as f64)
        .collect();
    let mut w = vec![0.0f64; a.cols()];
    for (j, imp) in importance.iter().enumerate() {
        for (wi, &v) in w.iter_mut().zip(a.row(j)) {
            *wi += v as f64 * imp;
        }
    }
    let z: f64 = w.iter().sum();
    if !z.is_finite() || z <= 0.0 {
        return Err(Error::Usage("assignment carries no weight".into()));
    }
    w.iter_mut().for_each(|v| *v /= z);
    Ok(w)
}

/// Unnormalised mean of the raw features.
pub fn naive_average(records: &[FeatureRecord]) -> Result<Vec<f32>> {
    let first = records.first().ok_or_else(|| Error::Usage("empty set".into()))?;
    let dim = first.feature.len();
    let mut acc = vec![0.0f64; dim];
    for r in records {
        if r.feature.len() != dim {
            return Err(Error::Dimension("feature lengths differ".into()));
        }
        for (a, &v) in acc.iter_mut().zip(&r.feature) {
            *a += v as f64;
        }
    }
    let n = records.len() as f64;
    Ok(acc.iter().map(|&v| (v / n) as f32).collect())
}

/// Settings for a generated evaluation protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    /// Seed of the evaluation identities; keep it distinct from training.
    pub seed: u64,
    pub n_ids: usize,
    pub probe_size: usize,
    pub probes_per_id: usize,
    /// Impostor pairs drawn per genuine pair.
    pub impostor_ratio: usize,
    pub batch_size: usize,
    pub far: Vec<f64>,
    pub ranks: Vec<usize>,
    pub corpus: CorpusConfig,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            seed: 9001,
            n_ids: 500,
            probe_size: 16,
            probes_per_id: 2,
            impostor_ratio: 10,
            batch_size: 256,
            far: vec![1e-1, 1e-2, 1e-3],
            ranks: vec![1, 5],
            corpus: CorpusConfig::default(),
        }
    }
}

impl ProtocolConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub subject: u32,
    /// Indices into [`EvalProtocol::records`], in streaming order.
    pub items: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub probe: usize,
    pub gallery: usize,
    pub genuine: bool,
}

/// Probes, gallery and verification pairs over a shared identity space.
#[derive(Clone, Debug)]
pub struct EvalProtocol {
    pub records: Vec<FeatureRecord>,
    pub probes: Vec<Probe>,
    pub gallery: Vec<FeatureRecord>,
    pub pairs: Vec<Pair>,
    pub batch_size: usize,
    pub far: Vec<f64>,
    pub ranks: Vec<usize>,
}

impl EvalProtocol {
    /// Generates fresh identities and splits each identity's records into
    /// disjoint probes. The gallery holds one high-quality record per
    /// identity.
    pub fn synthetic(config: &ProtocolConfig, model: &ModelConfig) -> Result<Self> {
        if config.probe_size == 0 || config.probes_per_id == 0 || config.n_ids < 2 {
            return Err(Error::Config("protocol needs probe_size, probes_per_id >= 1 and n_ids >= 2".into()));
        }
        let corpus_cfg = config.corpus.clone().with_dims(model);
        let per_id = config.probe_size * config.probes_per_id;
        let corpus = SyntheticCorpus::generate(corpus_cfg, config.seed, config.n_ids, per_id)?;
        let probes = (0..config.n_ids)
            .flat_map(|id| {
                (0..config.probes_per_id).map(move |p| {
                    let start = id * per_id + p * config.probe_size;
                    Probe {
                        subject: id as u32,
                        items: (start..start + config.probe_size).collect(),
                    }
                })
            })
            .collect();
        Self::assemble(corpus.records, probes, corpus.gallery, config)
    }

    /// Builds a protocol from externally supplied records: consecutive
    /// records of one subject are chunked into probes of `config.probe_size`.
    pub fn from_records(
        records: Vec<FeatureRecord>,
        gallery: Vec<FeatureRecord>,
        config: &ProtocolConfig,
    ) -> Result<Self> {
        if config.probe_size == 0 {
            return Err(Error::Config("probe_size must be positive".into()));
        }
        let mut probes: Vec<Probe> = Vec::new();
        for (i, r) in records.iter().enumerate() {
            match probes.last_mut() {
                Some(p) if p.subject == r.subject && p.items.len() < config.probe_size => p.items.push(i),
                _ => probes.push(Probe {
                    subject: r.subject,
                    items: vec![i],
                }),
            }
        }
        Self::assemble(records, probes, gallery, config)
    }

    fn assemble(
        records: Vec<FeatureRecord>,
        probes: Vec<Probe>,
        gallery: Vec<FeatureRecord>,
        config: &ProtocolConfig,
    ) -> Result<Self> {
        if gallery.is_empty() {
            return Err(Error::Usage("empty gallery".into()));
        }
        if config.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let mut by_subject: std::collections::BTreeMap<u32, Vec<usize>> = Default::default();
        for (g, r) in gallery.iter().enumerate() {
            by_subject.entry(r.subject).or_default().push(g);
        }
        if probes.iter().any(|p| !by_subject.contains_key(&p.subject)) {
            return Err(Error::Usage("probe subject missing from the gallery".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9a1e);
        let mut pairs = Vec::with_capacity(probes.len() * (config.impostor_ratio + 1));
        for (i, p) in probes.iter().enumerate() {
            let genuine = by_subject[&p.subject][0];
            pairs.push(Pair {
                probe: i,
                gallery: genuine,
                genuine: true,
            });
            let others: Vec<usize> = (0..gallery.len()).filter(|&g| gallery[g].subject != p.subject).collect();
            for &g in others.choose_multiple(&mut rng, config.impostor_ratio) {
                pairs.push(Pair {
                    probe: i,
                    gallery: g,
                    genuine: false,
                });
            }
        }
        Ok(Self {
            records,
            probes,
            gallery,
            pairs,
            batch_size: config.batch_size,
            far: config.far.clone(),
            ranks: config.ranks.clone(),
        })
    }

    /// Same protocol with the item order of every probe permuted.
    pub fn shuffled(&self, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = self.clone();
        for p in &mut out.probes {
            p.items.shuffle(&mut rng);
        }
        out
    }

    /// Same protocol with every probe truncated to its first `n` items.
    pub fn truncated(&self, n: usize) -> Self {
        let mut out = self.clone();
        for p in &mut out.probes {
            p.items.truncate(n);
        }
        out
    }
}

/// Fusion used for every probe of a protocol.
#[derive(Clone, Copy, Debug)]
pub enum Method<'a> {
    Model(&'a FusionModel),
    Baseline,
}

impl Method<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Model(_) => "model",
            Method::Baseline => "naive_average",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationPoint {
    pub requested_far: f64,
    /// `None` when the impostor list is too short for `requested_far`.
    pub result: Option<TarAtFar>,
    pub achievable_far: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankPoint {
    pub k: usize,
    pub accuracy: f64,
}

/// Per-probe diagnostics, exported as CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeExport {
    pub probe: usize,
    pub subject: u32,
    pub entropy: Option<f64>,
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub probes: usize,
    pub skipped: usize,
    pub verification: Vec<VerificationPoint>,
    pub identification: Vec<RankPoint>,
    pub mean_entropy: Option<f64>,
    pub mean_entropy_sum: Option<f64>,
    #[serde(skip)]
    pub exports: Vec<ProbeExport>,
}

impl MetricsReport {
    pub fn rank(&self, k: usize) -> Option<f64> {
        self.identification.iter().find(|r| r.k == k).map(|r| r.accuracy)
    }

    pub fn tar(&self, far: f64) -> Option<f64> {
        self.verification
            .iter()
            .find(|v| v.requested_far == far)
            .and_then(|v| v.result)
            .map(|r| r.tar)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `probe,subject,item,weight`
    pub fn write_weights_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "probe,subject,item,weight")?;
        for e in &self.exports {
            for (i, v) in e.weights.iter().enumerate() {
                writeln!(w, "{},{},{},{}", e.probe, e.subject, i, v)?;
            }
        }
        Ok(())
    }

    /// `probe,subject,entropy`; baseline rows leave the entropy empty.
    pub fn write_entropy_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "probe,subject,entropy")?;
        for e in &self.exports {
            let h = e.entropy.map(|h| h.to_string()).unwrap_or_default();
            writeln!(w, "{},{},{}", e.probe, e.subject, h)?;
        }
        Ok(())
    }
}

struct Fused {
    feature: Vec<f32>,
    export: ProbeExport,
    entropy_sum: Option<f64>,
}

fn fuse_probe(protocol: &EvalProtocol, index: usize, method: Method<'_>) -> Result<Fused> {
    let probe = &protocol.probes[index];
    let items: Vec<FeatureRecord> = probe.items.iter().map(|&i| protocol.records[i].clone()).collect();
    match method {
        Method::Baseline => {
            let n = items.len();
            Ok(Fused {
                feature: naive_average(&items)?,
                export: ProbeExport {
                    probe: index,
                    subject: probe.subject,
                    entropy: None,
                    weights: vec![1.0 / n as f64; n],
                },
                entropy_sum: None,
            })
        }
        Method::Model(model) => {
            let batch = protocol.batch_size.min(model.config.max_batch);
            let mut session = FusionSession::open(index as u64, &model.config);
            let m = model.config.num_centers;
            let mut columns: Vec<Vec<f32>> = vec![Vec::with_capacity(items.len()); m];
            for chunk in items.chunks(batch) {
                let a = session.update(chunk, model)?;
                for (j, col) in columns.iter_mut().enumerate() {
                    col.extend_from_slice(a.a.row(j));
                }
            }
            let done = session.finalize(model)?;
            let a = Tensor::matrix(m, items.len(), columns.concat());
            Ok(Fused {
                feature: done.fused,
                export: ProbeExport {
                    probe: index,
                    subject: probe.subject,
                    entropy: Some(assignment_entropy(&a, EntropyReduction::Mean)?),
                    weights: sample_weights(&a, &done.weights.p)?,
                },
                entropy_sum: Some(assignment_entropy(&a, EntropyReduction::Sum)?),
            })
        }
    }
}

/// Fuses every probe by streaming it in `batch_size` chunks, then scores
/// verification pairs and gallery identification.
pub fn run_protocol(protocol: &EvalProtocol, method: Method<'_>) -> Result<MetricsReport> {
    let mut fused: Vec<Option<Fused>> = Vec::with_capacity(protocol.probes.len());
    let mut skipped = 0;
    for (i, p) in protocol.probes.iter().enumerate() {
        if p.items.is_empty() {
            skipped += 1;
            fused.push(None);
            continue;
        }
        fused.push(Some(fuse_probe(protocol, i, method)?));
    }
    if skipped > 0 {
        warn!("skipped {skipped} empty probes");
    }

    let (mut genuine, mut impostor) = (Vec::new(), Vec::new());
    for pair in &protocol.pairs {
        if let Some(f) = &fused[pair.probe] {
            let s = cosine_similarity(&f.feature, &protocol.gallery[pair.gallery].feature);
            if pair.genuine {
                genuine.push(s);
            } else {
                impostor.push(s);
            }
        }
    }
    let mut verification = Vec::with_capacity(protocol.far.len());
    if !genuine.is_empty() && !impostor.is_empty() {
        for &far in &protocol.far {
            let result = match tar_at_far(&genuine, &impostor, far) {
                Ok(r) => Some(r),
                Err(Error::FarInfeasible { .. }) => None,
                Err(e) => return Err(e),
            };
            verification.push(VerificationPoint {
                requested_far: far,
                result,
                achievable_far: 1.0 / impostor.len() as f64,
            });
        }
    }

    let kept: Vec<&Fused> = fused.iter().flatten().collect();
    let mut identification = Vec::with_capacity(protocol.ranks.len());
    if !kept.is_empty() {
        let probes: Vec<&[f32]> = kept.iter().map(|f| f.feature.as_slice()).collect();
        let labels: Vec<u32> = kept.iter().map(|f| f.export.subject).collect();
        let gallery: Vec<&[f32]> = protocol.gallery.iter().map(|g| g.feature.as_slice()).collect();
        let gallery_labels: Vec<u32> = protocol.gallery.iter().map(|g| g.subject).collect();
        for &k in &protocol.ranks {
            identification.push(RankPoint {
                k,
                accuracy: rank_k(&probes, &labels, &gallery, &gallery_labels, k)?,
            });
        }
    }

    let mean = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let mean_entropy = mean(kept.iter().filter_map(|f| f.export.entropy).collect());
    let mean_entropy_sum = mean(kept.iter().filter_map(|f| f.entropy_sum).collect());
    Ok(MetricsReport {
        method: method.name().into(),
        probes: kept.len(),
        skipped,
        verification,
        identification,
        mean_entropy,
        mean_entropy_sum,
        exports: fused.into_iter().flatten().map(|f| f.export).collect(),
    })
}
