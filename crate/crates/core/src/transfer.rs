//! Parameter-instance transfer from high-density to low-density pilots.
//!
//! A source network is trained on high-density pilots. Low-density samples
//! are carved out of the same measurements, together with neighbours shifted
//! one RB left or right, and each neighbour is kept with a weight equal to its
//! cosine similarity to the base sample. The target network starts from the
//! source backbone and trains on this weighted set.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::chansim::PilotSample;
use crate::ctensor::ComplexTensor3;
use crate::dacen::{AblationSpec, Dacen, DacenSpec};
use crate::error::{Error, Result};
use crate::tensor::Scalar;
use crate::training::{train, TrainConfig, TrainData, TrainRun};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    /// First selected position on the high-density pilot axis (0-based).
    pub r0: usize,
    pub spacing: usize,
    pub n_low: usize,
    /// Neighbours scoring below this are dropped.
    pub s_th: f64,
}

impl SamplerConfig {
    /// Presets for 6, 4 and 2 pilot RBs out of 52 sampled from 26.
    pub const PAPER: [SamplerConfig; 3] = [
        SamplerConfig { r0: 1, spacing: 4, n_low: 6, s_th: 0.9 },
        SamplerConfig { r0: 5, spacing: 5, n_low: 4, s_th: 0.9 },
        SamplerConfig { r0: 9, spacing: 8, n_low: 2, s_th: 0.9 },
    ];

    /// Two of eight RBs.
    pub const DESK: SamplerConfig = SamplerConfig { r0: 1, spacing: 4, n_low: 2, s_th: 0.9 };

    pub fn base_indices(&self) -> Vec<usize> {
        (0..self.n_low).map(|k| self.r0 + k * self.spacing).collect()
    }

    pub fn validate(&self, n_high: usize) -> Result<()> {
        if self.n_low == 0 || self.spacing == 0 {
            return Err(Error::config("sampler needs a positive count and spacing"));
        }
        let last = self.r0 + self.spacing * (self.n_low - 1);
        if last >= n_high {
            return Err(Error::Index { what: "low-density pilot position", index: last as i64, len: n_high });
        }
        if !(self.s_th >= 0.0) || self.s_th.is_infinite() {
            return Err(Error::config(format!("similarity threshold {} must be finite and non-negative", self.s_th)));
        }
        Ok(())
    }

    /// Indices shifted by `offset`, or `None` if any leaves `0..n_high`.
    pub fn shifted(&self, offset: i64, n_high: usize) -> Option<Vec<usize>> {
        self.base_indices()
            .into_iter()
            .map(|i| usize::try_from(i as i64 + offset).ok().filter(|&j| j < n_high))
            .collect()
    }
}

fn select(y: &PilotSample, idx: &[usize]) -> Result<PilotSample> {
    let rbs = idx
        .iter()
        .map(|&i| y.rbs.get(i).copied().ok_or(Error::Index { what: "pilot position", index: i as i64, len: y.rbs.len() }))
        .collect::<Result<Vec<_>>>()?;
    Ok(PilotSample { y: y.y.select_last(idx)?, snr_db: y.snr_db, rbs })
}

pub fn generate_low_density(y_high: &PilotSample, sc: &SamplerConfig) -> Result<PilotSample> {
    sc.validate(y_high.rbs.len())?;
    select(y_high, &sc.base_indices())
}

/// Left (`-1`) and right (`+1`) neighbours; one that would leave the pilot
/// axis is absent.
pub fn neighbor_samples(y_high: &PilotSample, sc: &SamplerConfig) -> Result<(Option<PilotSample>, Option<PilotSample>)> {
    let n = y_high.rbs.len();
    sc.validate(n)?;
    let pick = |off| sc.shifted(off, n).map(|idx| select(y_high, &idx)).transpose();
    Ok((pick(-1)?, pick(1)?))
}

/// Mean over pilot positions of `|<a_j, b_j>| / (|a_j| |b_j|)`, where `a_j` is
/// the vector of all antenna pairs at pilot position `j`.
pub fn cosine_similarity_score(a: &ComplexTensor3, b: &ComplexTensor3) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::shape("cosine_similarity_score", &a.dims(), &b.dims()));
    }
    let [nr, nt, nl] = a.dims();
    if nl == 0 {
        return Err(Error::data("cosine_similarity_score", "no pilot positions"));
    }
    let mut total = 0.0;
    for j in 0..nl {
        let (mut dot, mut na, mut nb) = (num_complex::Complex64::new(0.0, 0.0), 0.0, 0.0);
        for r in 0..nr {
            for t in 0..nt {
                let (x, y) = (a.get(r, t, j), b.get(r, t, j));
                dot += x.conj() * y;
                na += x.norm_sqr();
                nb += y.norm_sqr();
            }
        }
        if na == 0.0 || nb == 0.0 {
            log::warn!("zero-norm pilot vector at position {j}; pair scored 0");
            continue;
        }
        total += (dot.norm() / (na.sqrt() * nb.sqrt())).min(1.0);
    }
    Ok(total / nl as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Base,
    Left,
    Right,
}

impl Origin {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Base => "base",
            Self::Left => "left",
            Self::Right => "right",
        }
    }
}

/// One scored candidate, kept or not.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightRecord {
    /// Index of the source sample.
    pub sample: usize,
    pub origin: Origin,
    pub score: f64,
    pub included: bool,
}

/// Low-density training samples with their instance weights.
#[derive(Debug, Clone)]
pub struct ExtendedSet {
    pub pilots: Vec<PilotSample>,
    /// Source sample each entry came from; labels are shared with it.
    pub source: Vec<usize>,
    pub origin: Vec<Origin>,
    pub weights: Vec<f64>,
    pub records: Vec<WeightRecord>,
}

impl ExtendedSet {
    pub fn len(&self) -> usize {
        self.pilots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pilots.is_empty()
    }

    pub fn neighbor_inclusion(&self) -> f64 {
        let cands: Vec<&WeightRecord> = self.records.iter().filter(|r| r.origin != Origin::Base).collect();
        if cands.is_empty() {
            0.0
        } else {
            cands.iter().filter(|r| r.included).count() as f64 / cands.len() as f64
        }
    }

    /// `sample,origin,score,included` rows.
    pub fn weights_csv(&self) -> String {
        let mut s = String::from("sample,origin,score,included\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{},{:.6},{}", r.sample, r.origin.as_str(), r.score, u8::from(r.included));
        }
        s
    }
}

pub fn build_extended_trainset(high: &[PilotSample], sc: &SamplerConfig) -> Result<ExtendedSet> {
    if high.is_empty() {
        return Err(Error::data("extended training set", "no source samples"));
    }
    let mut out = ExtendedSet { pilots: Vec::new(), source: Vec::new(), origin: Vec::new(), weights: Vec::new(), records: Vec::new() };
    for (i, y) in high.iter().enumerate() {
        let base = generate_low_density(y, sc)?;
        let (left, right) = neighbor_samples(y, sc)?;
        out.records.push(WeightRecord { sample: i, origin: Origin::Base, score: 1.0, included: true });
        let mut kept = vec![(base.clone(), Origin::Base, 1.0)];
        for (cand, origin) in [(left, Origin::Left), (right, Origin::Right)] {
            let Some(cand) = cand else { continue };
            let score = cosine_similarity_score(&base.y, &cand.y)?;
            let included = score >= sc.s_th;
            out.records.push(WeightRecord { sample: i, origin, score, included });
            if included {
                kept.push((cand, origin, score));
            }
        }
        for (p, o, w) in kept {
            out.pilots.push(p);
            out.source.push(i);
            out.origin.push(o);
            out.weights.push(w);
        }
    }
    Ok(out)
}

/// High-density source data, already split.
#[derive(Debug, Clone)]
pub struct SourceData {
    pub train_pilots: Vec<PilotSample>,
    pub train_labels: Vec<ComplexTensor3>,
    pub train_ids: Vec<u64>,
    pub val_pilots: Vec<PilotSample>,
    pub val_labels: Vec<ComplexTensor3>,
    pub val_ids: Vec<u64>,
}

fn to_data<T: Scalar>(pilots: &[PilotSample], labels: &[ComplexTensor3], ids: Vec<u64>, weights: Option<Vec<f64>>) -> Result<TrainData<T>> {
    let p: Vec<ComplexTensor3> = pilots.iter().map(|s| s.y.clone()).collect();
    TrainData::from_samples(&p, labels, ids, weights)
}

/// Phase 1: the high-density source network.
pub fn train_source<T: Scalar>(data: &SourceData, spec: &DacenSpec, ablation: AblationSpec, cfg: &TrainConfig) -> Result<(Dacen<T>, TrainRun)> {
    let n_high = data.train_pilots.first().map_or(0, |p| p.rbs.len());
    let spec = DacenSpec { n_l: n_high, ..spec.clone() };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Dacen::build(spec, ablation, &mut rng)?;
    let tr = to_data(&data.train_pilots, &data.train_labels, data.train_ids.clone(), None)?;
    let va = to_data(&data.val_pilots, &data.val_labels, data.val_ids.clone(), None)?;
    let run = train(&mut model, &tr, &va, cfg)?;
    Ok((model, run))
}

#[derive(Debug, Clone)]
pub struct TransferOutcome<T: Scalar> {
    pub model: Dacen<T>,
    pub run: TrainRun,
    pub extended: ExtendedSet,
    /// Parameters copied verbatim from the source.
    pub copied: Vec<String>,
    /// Target parameters right after the copy, before any update.
    pub initial: Dacen<T>,
}

/// Phases 2 and 3 from a trained source network.
pub fn transfer_from<T: Scalar>(source: &Dacen<T>, data: &SourceData, sc: &SamplerConfig, cfg: &TrainConfig) -> Result<TransferOutcome<T>> {
    let extended = build_extended_trainset(&data.train_pilots, sc)?;
    if extended.pilots.iter().any(|p| p.rbs.len() != sc.n_low) {
        return Err(Error::data("transfer", "a target training sample carries high-density pilots"));
    }
    let labels: Vec<ComplexTensor3> = extended.source.iter().map(|&i| data.train_labels[i].clone()).collect();
    let ids: Vec<u64> = (0..extended.len())
        .map(|k| data.train_ids[extended.source[k]] * 4 + extended.origin[k] as u64)
        .collect();
    let tr = to_data::<T>(&extended.pilots, &labels, ids, Some(extended.weights.clone()))?;
    let val_low = data.val_pilots.iter().map(|y| generate_low_density(y, sc)).collect::<Result<Vec<_>>>()?;
    let val_ids = data.val_ids.iter().map(|&i| i * 4).collect();
    let va = to_data::<T>(&val_low, &data.val_labels, val_ids, None)?;

    let spec = DacenSpec { n_l: sc.n_low, ..source.spec().clone() };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Dacen::build(spec, *source.ablation(), &mut rng)?;
    let copied = model.copy_backbone_from(source)?;
    let initial = model.clone();
    let run = train(&mut model, &tr, &va, cfg)?;
    Ok(TransferOutcome { model, run, extended, copied, initial })
}

/// All three phases.
pub fn run_transfer<T: Scalar>(
    data: &SourceData,
    sc: &SamplerConfig,
    spec: &DacenSpec,
    ablation: AblationSpec,
    source_cfg: &TrainConfig,
    target_cfg: &TrainConfig,
) -> Result<(Dacen<T>, TrainRun, TransferOutcome<T>)> {
    let n_high = data.train_pilots.first().map_or(0, |p| p.rbs.len());
    sc.validate(n_high)?;
    let (source, source_run) = train_source(data, spec, ablation, source_cfg).map_err(|e| e.in_stage("source"))?;
    let outcome = transfer_from(&source, data, sc, target_cfg).map_err(|e| e.in_stage("target"))?;
    Ok((source, source_run, outcome))
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;

    fn ramp(n_high: usize) -> PilotSample {
        let y = ComplexTensor3::from_fn([1, 2, n_high], |_, t, k| Complex64::new(k as f64 + 1.0, t as f64));
        PilotSample { y, snr_db: 10.0, rbs: (0..n_high).map(|k| 2 * k).collect() }
    }

    #[test]
    fn paper_index_sets() {
        assert_eq!(SamplerConfig::PAPER[0].base_indices(), vec![1, 5, 9, 13, 17, 21]);
        assert_eq!(SamplerConfig::PAPER[1].base_indices(), vec![5, 10, 15, 20]);
        assert_eq!(SamplerConfig::PAPER[2].base_indices(), vec![9, 17]);
        let sc = SamplerConfig::PAPER[1];
        assert_eq!(sc.shifted(-1, 26), Some(vec![4, 9, 14, 19]));
        assert_eq!(sc.shifted(1, 26), Some(vec![6, 11, 16, 21]));
        let edge = SamplerConfig { r0: 0, ..SamplerConfig::PAPER[0] };
        assert_eq!(edge.shifted(-1, 26), None);
        assert!(edge.shifted(1, 26).is_some());
    }

    #[test]
    fn identity_selection() {
        let y = ramp(5);
        let sc = SamplerConfig { r0: 0, spacing: 1, n_low: 5, s_th: 0.9 };
        assert_eq!(generate_low_density(&y, &sc).unwrap(), y);
    }

    #[test]
    fn out_of_range_is_rejected_up_front() {
        let y = ramp(10);
        let sc = SamplerConfig { r0: 2, spacing: 4, n_low: 3, s_th: 0.9 };
        assert!(matches!(generate_low_density(&y, &sc), Err(Error::Index { .. })));
    }

    #[test]
    fn similarity_invariances() {
        let a = ramp(3).y;
        assert!((cosine_similarity_score(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let b = a.scaled(Complex64::new(-0.3, 2.0));
        assert!((cosine_similarity_score(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let x = ComplexTensor3::from_fn([1, 2, 2], |_, t, _| Complex64::new(if t == 0 { 1.0 } else { 0.0 }, 0.0));
        let y = ComplexTensor3::from_fn([1, 2, 2], |_, t, _| Complex64::new(if t == 1 { 1.0 } else { 0.0 }, 0.0));
        assert_eq!(cosine_similarity_score(&x, &y).unwrap(), 0.0);
    }

    #[test]
    fn threshold_extremes() {
        let high: Vec<PilotSample> = (0..4).map(|_| ramp(8)).collect();
        let all = build_extended_trainset(&high, &SamplerConfig { s_th: 0.0, ..SamplerConfig::DESK }).unwrap();
        assert_eq!(all.len(), 12);
        let none = build_extended_trainset(&high, &SamplerConfig { s_th: 1.5, ..SamplerConfig::DESK }).unwrap();
        assert_eq!(none.len(), 4);
        assert!(none.weights.iter().all(|&w| w == 1.0));
        assert!(none.weights_csv().starts_with("sample,origin,score,included\n"));
    }
}
