//! Method x density x SNR evaluation over stored test channels.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::baselines::{fit_stats, ls_estimate, LmmseFilter, SecondOrderStats};
use crate::chansim::{noise_variance, DatasetBundle, PilotPattern, PilotSample, Split, SystemConfig};
use crate::ctensor::ComplexTensor3;
use crate::dacen::Dacen;
use crate::domainxform::nmse_db;
use crate::error::{Error, Result};
use crate::tensor::Scalar;
use crate::transfer::SamplerConfig;

/// A pilot density tied to concrete RBs.
#[derive(Debug, Clone, PartialEq)]
pub struct Density {
    pub pattern: PilotPattern,
    /// How to carve this density out of high-density samples; `None` for the
    /// high density itself.
    pub sampler: Option<SamplerConfig>,
}

impl Density {
    pub fn label(&self) -> String {
        format!("{}/{}", self.pattern.len(), self.pattern.n_rb())
    }

    pub fn n_pilots(&self) -> usize {
        self.pattern.len()
    }
}

/// The high-density comb and the sampler presets below it.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityPlan {
    pub high: PilotPattern,
    pub presets: Vec<SamplerConfig>,
}

impl DensityPlan {
    /// Every RB for the desk system, every other RB otherwise.
    pub fn for_system(cfg: &SystemConfig) -> Result<Self> {
        if cfg.n_rb == 8 {
            Ok(Self {
                high: PilotPattern::all(8),
                presets: vec![SamplerConfig { r0: 1, spacing: 2, n_low: 4, s_th: 0.9 }, SamplerConfig::DESK],
            })
        } else if cfg.n_rb == 52 {
            Ok(Self { high: PilotPattern::comb(52, 0, 2, 26)?, presets: SamplerConfig::PAPER.to_vec() })
        } else {
            Ok(Self { high: PilotPattern::all(cfg.n_rb), presets: Vec::new() })
        }
    }

    pub fn high(&self) -> Density {
        Density { pattern: self.high.clone(), sampler: None }
    }

    /// Preset sampler if one exists, else evenly spread positions centred on
    /// the high-density axis.
    pub fn sampler_for(&self, n_low: usize) -> Result<SamplerConfig> {
        let n_high = self.high.len();
        if let Some(p) = self.presets.iter().find(|p| p.n_low == n_low) {
            return Ok(*p);
        }
        if n_low == 0 || n_low > n_high {
            return Err(Error::config(format!("{n_low} pilots do not fit under {n_high}")));
        }
        let spacing = if n_low == 1 { 1 } else { (n_high - 1) / (n_low - 1) };
        let r0 = (n_high - 1 - spacing * (n_low - 1)) / 2;
        let sc = SamplerConfig { r0, spacing, n_low, s_th: 0.9 };
        sc.validate(n_high)?;
        Ok(sc)
    }

    pub fn density(&self, n_pilots: usize) -> Result<Density> {
        if n_pilots == self.high.len() {
            return Ok(self.high());
        }
        let sc = self.sampler_for(n_pilots)?;
        let rbs = sc.base_indices().iter().map(|&i| self.high.rbs()[i]).collect();
        Ok(Density { pattern: PilotPattern::new(rbs, self.high.n_rb())?, sampler: Some(sc) })
    }

    /// Accepts `k/n` with `n` the RB count, or a fraction in `(0, 1]`.
    pub fn parse(&self, s: &str) -> Result<Density> {
        let n_rb = self.high.n_rb();
        let bad = || Error::config(format!("density `{s}` is not k/{n_rb} or a fraction in (0, 1]"));
        let k = match s.split_once('/') {
            Some((k, n)) => {
                let (k, n): (usize, usize) = (k.trim().parse().map_err(|_| bad())?, n.trim().parse().map_err(|_| bad())?);
                if n == 0 || k == 0 || k > n {
                    return Err(bad());
                }
                if n == n_rb {
                    k
                } else if (k * n_rb) % n == 0 {
                    k * n_rb / n
                } else {
                    return Err(bad());
                }
            }
            None => {
                let f: f64 = s.trim().parse().map_err(|_| bad())?;
                if !(f > 0.0 && f <= 1.0) {
                    return Err(bad());
                }
                let k = (f * n_rb as f64).round() as usize;
                if k == 0 || (k as f64 - f * n_rb as f64).abs() > 1e-9 {
                    return Err(bad());
                }
                k
            }
        };
        self.density(k)
    }
}

/// Anything that turns received pilots into tap-domain estimates.
pub trait Estimator: Sync {
    fn name(&self) -> &str;

    /// `None` when the method has nothing for this density.
    fn estimate(&self, density: &Density, snr_db: f64, pilots: &[PilotSample]) -> Result<Option<Vec<ComplexTensor3>>>;
}

pub struct Ls {
    pub cfg: SystemConfig,
}

impl Estimator for Ls {
    fn name(&self) -> &str {
        "ls"
    }

    fn estimate(&self, _: &Density, _: f64, pilots: &[PilotSample]) -> Result<Option<Vec<ComplexTensor3>>> {
        let tc = self.cfg.transform();
        pilots.iter().map(|y| ls_estimate(y, &self.cfg, &tc)).collect::<Result<_>>().map(Some)
    }
}

/// LMMSE with statistics from the training split and the noise level of
/// each evaluated SNR.
pub struct Lmmse {
    pub stats: SecondOrderStats,
    pub despread_gain: f64,
}

impl Lmmse {
    pub fn fit(ds: &DatasetBundle) -> Result<Self> {
        let idx = ds.indices(Split::Train);
        let rbs: Vec<_> = idx.iter().map(|&i| ds.rb_channels[i].clone()).collect();
        let labels: Vec<_> = idx.iter().map(|&i| ds.labels[i].clone()).collect();
        let gain = ds.pattern.despread_gain;
        Ok(Self { stats: fit_stats(&rbs, &labels, ds.request.snr_db, gain)?, despread_gain: gain })
    }
}

impl Estimator for Lmmse {
    fn name(&self) -> &str {
        "lmmse"
    }

    fn estimate(&self, density: &Density, snr_db: f64, pilots: &[PilotSample]) -> Result<Option<Vec<ComplexTensor3>>> {
        let nv = noise_variance(snr_db, self.despread_gain).max(1e-12);
        let f = LmmseFilter::with_noise(&self.stats, &density.pattern, nv)?;
        pilots.iter().map(|y| f.apply(y)).collect::<Result<_>>().map(Some)
    }
}

/// Trained networks keyed by pilot count.
pub struct Network<T: Scalar> {
    pub name: String,
    pub models: BTreeMap<usize, Dacen<T>>,
}

impl<T: Scalar> Network<T> {
    pub fn new(name: impl Into<String>) -> Self {
        Self { name: name.into(), models: BTreeMap::new() }
    }

    pub fn with(mut self, model: Dacen<T>) -> Self {
        self.models.insert(model.spec().n_l, model);
        self
    }
}

pub fn predict_samples<T: Scalar>(model: &Dacen<T>, pilots: &[PilotSample]) -> Result<Vec<ComplexTensor3>> {
    let spec = model.spec();
    let mut x = Vec::with_capacity(pilots.len() * spec.antenna_pairs() * 2 * spec.n_l);
    for y in pilots {
        if y.y.dims() != [spec.n_r, spec.n_t, spec.n_l] {
            return Err(Error::shape("network input", &y.y.dims(), &[spec.n_r, spec.n_t, spec.n_l]));
        }
        x.extend(y.y.to_im_re().into_iter().map(T::from_f64_lossy));
    }
    let out = model.predict(&x, 64)?;
    let per = spec.antenna_pairs() * 2 * spec.n_p;
    out.chunks_exact(per)
        .map(|c| ComplexTensor3::from_im_re([spec.n_r, spec.n_t, spec.n_p], &c.iter().map(|v| v.to_f64_lossy()).collect::<Vec<_>>()))
        .collect()
}

impl<T: Scalar> Estimator for Network<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn estimate(&self, density: &Density, _: f64, pilots: &[PilotSample]) -> Result<Option<Vec<ComplexTensor3>>> {
        match self.models.get(&density.n_pilots()) {
            Some(m) => predict_samples(m, pilots).map(Some),
            None => Ok(None),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub method: String,
    pub density: String,
    pub snr_db: f64,
    pub nmse_db: f64,
    pub n_samples: usize,
    pub seed: u64,
}

pub const METRICS_HEADER: &str = "method,density,snr_db,nmse_db,n_samples,seed";

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{:.6},{},{}", r.method, r.density, r.snr_db, r.nmse_db, r.n_samples, r.seed);
    }
    s
}

/// Seed of the test-noise draw for one SNR; shared by every method.
pub fn test_noise_seed(seed: u64, snr_db: f64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ snr_db.to_bits().rotate_left(17)
}

/// Test pilots regenerated from the stored test channels.
pub fn test_pilots(ds: &DatasetBundle, density: &Density, snr_db: f64, seed: u64) -> Result<Vec<PilotSample>> {
    ds.reobserve(&ds.indices(Split::Test), &density.pattern, snr_db, test_noise_seed(seed, snr_db))
}

/// Rows ordered method-major, then density, then SNR. Cells run on up to
/// `threads` workers; the output does not depend on the worker count.
pub fn eval_sweep(
    ds: &DatasetBundle,
    methods: &[&dyn Estimator],
    densities: &[Density],
    snrs: &[f64],
    seed: u64,
    threads: usize,
) -> Result<Vec<MetricRow>> {
    if snrs.is_empty() || densities.is_empty() {
        return Err(Error::config("sweep needs at least one SNR and one density"));
    }
    let test = ds.indices(Split::Test);
    let labels: Vec<ComplexTensor3> = test.iter().map(|&i| ds.labels[i].clone()).collect();
    let cells: Vec<(usize, usize)> = (0..densities.len()).flat_map(|d| (0..snrs.len()).map(move |s| (d, s))).collect();
    let run_cell = |&(d, s): &(usize, usize)| -> Result<Vec<(usize, MetricRow)>> {
        let density = &densities[d];
        let pilots = test_pilots(ds, density, snrs[s], seed)?;
        let mut out = Vec::new();
        for (m, method) in methods.iter().enumerate() {
            let Some(est) = method.estimate(density, snrs[s], &pilots)? else { continue };
            out.push((
                m,
                MetricRow {
                    method: method.name().to_string(),
                    density: density.label(),
                    snr_db: snrs[s],
                    nmse_db: nmse_db(&labels, &est)?,
                    n_samples: labels.len(),
                    seed,
                },
            ));
        }
        Ok(out)
    };

    let threads = threads.clamp(1, cells.len());
    let mut results: Vec<Option<Result<Vec<(usize, MetricRow)>>>> = (0..cells.len()).map(|_| None).collect();
    if threads == 1 {
        for (c, r) in cells.iter().zip(results.iter_mut()) {
            *r = Some(run_cell(c));
        }
    } else {
        std::thread::scope(|scope| {
            let mut slots: Vec<&mut Option<_>> = results.iter_mut().collect();
            let mut lanes: Vec<Vec<(usize, &mut Option<_>)>> = (0..threads).map(|_| Vec::new()).collect();
            for (i, slot) in slots.drain(..).enumerate() {
                lanes[i % threads].push((i, slot));
            }
            for lane in lanes {
                let cells = &cells;
                let run_cell = &run_cell;
                scope.spawn(move || {
                    for (i, slot) in lane {
                        *slot = Some(run_cell(&cells[i]));
                    }
                });
            }
        });
    }
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r.expect("every cell ran")?);
    }
    let pos = |r: &MetricRow| densities.iter().position(|d| d.label() == r.density).unwrap_or(0);
    let snr_pos = |r: &MetricRow| snrs.iter().position(|&s| s == r.snr_db).unwrap_or(0);
    let mut keyed: Vec<_> = rows.into_iter().map(|(m, r)| ((m, pos(&r), snr_pos(&r)), r)).collect();
    keyed.sort_by_key(|(k, _)| *k);
    Ok(keyed.into_iter().map(|(_, r)| r).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chansim::{make_dataset, DatasetRequest};

    #[test]
    fn desk_plan() {
        let plan = DensityPlan::for_system(&SystemConfig::desk()).unwrap();
        assert_eq!(plan.parse("2/8").unwrap().pattern.rbs(), &[1, 5]);
        assert_eq!(plan.parse("0.5").unwrap().pattern.rbs(), &[1, 3, 5, 7]);
        assert_eq!(plan.parse("8/8").unwrap().sampler, None);
        assert_eq!(plan.parse("3/8").unwrap().n_pilots(), 3);
        assert!(plan.parse("0.3").is_err());
        assert!(plan.parse("9/8").is_err());
    }

    #[test]
    fn paper_plan_uses_presets() {
        let plan = DensityPlan::for_system(&SystemConfig::paper()).unwrap();
        assert_eq!(plan.parse("2/52").unwrap().pattern.rbs(), &[18, 34]);
        assert_eq!(plan.parse("26/52").unwrap().n_pilots(), 26);
    }

    #[test]
    fn sweep_row_count_and_thread_independence() {
        let cfg = SystemConfig::desk();
        let req = DatasetRequest { n_ue: 16, snapshots_per_ue: 3, val_ue: 2, test_ue: 3, snr_db: 10.0, seed: 4 };
        let plan = DensityPlan::for_system(&cfg).unwrap();
        let ds = make_dataset(&cfg, &req, &plan.high).unwrap();
        let ls = Ls { cfg: cfg.clone() };
        let lm = Lmmse::fit(&ds).unwrap();
        let dens = vec![plan.parse("8/8").unwrap(), plan.parse("2/8").unwrap()];
        let snrs = [0.0, 10.0, 20.0];
        let a = eval_sweep(&ds, &[&ls, &lm], &dens, &snrs, 1, 1).unwrap();
        let b = eval_sweep(&ds, &[&ls, &lm], &dens, &snrs, 1, 3).unwrap();
        assert_eq!(a.len(), 2 * 2 * 3);
        assert_eq!(metrics_csv(&a), metrics_csv(&b));
        assert!(metrics_csv(&a).starts_with("method,density,snr_db,nmse_db,n_samples,seed\n"));
        assert!(a.iter().all(|r| r.n_samples == 9));
    }
}
