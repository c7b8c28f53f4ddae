//! Clustered multipath MIMO-OFDM channels and per-RB pilot measurements.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};

use crate::ctensor::ComplexTensor3;
use crate::domainxform::{freq_to_time, TransformConfig};
use crate::error::{Error, Result};

pub const SUBCARRIERS_PER_RB: usize = 12;
/// Offset of the measurement subcarrier inside an RB.
pub const RB_CENTER: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct SystemConfig {
    pub n_t: usize,
    pub n_r: usize,
    pub n_c: usize,
    pub n_rb: usize,
    pub sc_per_rb: usize,
    /// Channel sampling rate in Hz; one delay tap is `1/f_s`.
    pub f_s: f64,
    pub carrier_hz: f64,
    pub scs_hz: f64,
    pub n_cl: usize,
    /// Rician K-factor of the first cluster.
    pub k_factor_db: f64,
    /// Retained delay taps of the label.
    pub n_p: usize,
    /// Mean excess delay of the exponential cluster-delay draw.
    pub delay_spread_s: f64,
    /// Fixed delay added to every cluster, in taps.
    pub timing_offset_taps: f64,
    /// Per-cluster angle jitter around the UE's mean direction (degrees, std).
    pub angle_spread_deg: f64,
    /// Fraction of each cluster gain redrawn between snapshots of one UE;
    /// 1 keeps only the geometry (delays, angles, powers).
    pub snapshot_perturbation: f64,
}

impl SystemConfig {
    /// Full-size system: 32x4 antennas, 52 RBs, 624 subcarriers, 14 clusters.
    pub fn paper() -> Self {
        Self {
            n_t: 32,
            n_r: 4,
            n_c: 624,
            n_rb: 52,
            sc_per_rb: SUBCARRIERS_PER_RB,
            f_s: 61.44e6,
            carrier_hz: 3.5e9,
            scs_hz: 60e3,
            n_cl: 14,
            k_factor_db: -10.0,
            n_p: 64,
            delay_spread_s: 100e-9,
            timing_offset_taps: 0.0,
            angle_spread_deg: 5.0,
            snapshot_perturbation: 1.0,
        }
    }

    /// Reduced system that trains in minutes on one core.
    pub fn desk() -> Self {
        Self {
            n_t: 8,
            n_r: 2,
            n_c: 96,
            n_rb: 8,
            sc_per_rb: SUBCARRIERS_PER_RB,
            f_s: 7.68e6,
            carrier_hz: 3.5e9,
            scs_hz: 60e3,
            n_cl: 6,
            k_factor_db: -10.0,
            n_p: 16,
            delay_spread_s: 30e-9,
            timing_offset_taps: 0.0,
            angle_spread_deg: 5.0,
            snapshot_perturbation: 1.0,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::config(format!("unknown preset `{other}` (expected paper or desk)"))),
        }
    }

    pub fn n_ifft(&self) -> usize {
        (self.f_s / self.scs_hz).round() as usize
    }

    pub fn transform(&self) -> TransformConfig {
        TransformConfig { n_ifft: self.n_ifft(), n_p: self.n_p }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [self.n_t, self.n_r, self.n_c, self.n_rb, self.sc_per_rb, self.n_p];
        if counts.contains(&0) {
            return Err(Error::config("antenna, subcarrier, RB and tap counts must be positive"));
        }
        if self.n_cl < 1 {
            return Err(Error::config("at least one cluster is required"));
        }
        if self.n_c > self.n_rb * self.sc_per_rb {
            return Err(Error::config(format!("{} subcarriers do not fit in {} RBs", self.n_c, self.n_rb)));
        }
        if (self.n_rb - 1) * self.sc_per_rb + RB_CENTER >= self.n_c {
            return Err(Error::config("last RB center lies beyond the subcarrier range"));
        }
        if !(self.f_s > 0.0 && self.scs_hz > 0.0) {
            return Err(Error::config("sampling rate and subcarrier spacing must be positive"));
        }
        if !(0.0..=1.0).contains(&self.snapshot_perturbation) {
            return Err(Error::config("snapshot perturbation must lie in [0, 1]"));
        }
        if self.delay_spread_s < 0.0 || self.timing_offset_taps < 0.0 || self.angle_spread_deg < 0.0 {
            return Err(Error::config("delay spread, timing offset and angle spread must be non-negative"));
        }
        self.transform().validate()?;
        if self.n_c > self.n_ifft() {
            return Err(Error::config("more subcarriers than IFFT points"));
        }
        Ok(())
    }

    /// Subcarrier carrying the measurement of RB `rb`.
    pub fn rb_center(&self, rb: usize) -> usize {
        rb * self.sc_per_rb + RB_CENTER
    }

    fn max_delay_taps(&self) -> f64 {
        (self.n_p - 1) as f64
    }
}

#[inline]
fn cn<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// One ray per cluster.
#[derive(Debug, Clone)]
struct Cluster {
    power: f64,
    gain: Complex64,
    delay_taps: f64,
    aoa: f64,
    aod: f64,
}

/// Geometry of one UE; snapshots share it and differ by a partial redraw of
/// the cluster gains.
#[derive(Debug, Clone)]
pub struct UeChannel {
    clusters: Vec<Cluster>,
    los: Complex64,
}

impl UeChannel {
    pub fn draw<R: Rng + ?Sized>(cfg: &SystemConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mean_aoa = rng.random_range(-PI / 3.0..PI / 3.0);
        let mean_aod = rng.random_range(-PI / 3.0..PI / 3.0);
        let spread = cfg.angle_spread_deg.to_radians();
        let ds_taps = cfg.delay_spread_s * cfg.f_s;
        let max_excess = cfg.max_delay_taps() - cfg.timing_offset_taps;
        let mut excess: Vec<f64> = (0..cfg.n_cl)
            .map(|n| {
                if n == 0 || ds_taps == 0.0 {
                    0.0
                } else {
                    let d: f64 = Exp::new(1.0 / ds_taps).map(|e| e.sample(rng)).unwrap_or(0.0);
                    d.min(max_excess.max(0.0))
                }
            })
            .collect();
        excess[1..].sort_by(f64::total_cmp);
        let mut powers: Vec<f64> = excess
            .iter()
            .map(|&d| {
                let shadow: f64 = StandardNormal.sample(rng);
                let decay = if ds_taps > 0.0 { (-d / ds_taps).exp() } else { 1.0 };
                decay * 10f64.powf(0.3 * shadow)
            })
            .collect();
        let total: f64 = powers.iter().sum();
        powers.iter_mut().for_each(|p| *p /= total);

        let k = 10f64.powf(cfg.k_factor_db / 10.0);
        let los = Complex64::from_polar((powers[0] * k / (k + 1.0)).sqrt(), rng.random_range(0.0..2.0 * PI));
        let clusters = excess
            .iter()
            .zip(&powers)
            .enumerate()
            .map(|(n, (&d, &p))| {
                let scatter = if n == 0 { p / (k + 1.0) } else { p };
                let aoa_jitter: f64 = StandardNormal.sample(rng);
                let aod_jitter: f64 = StandardNormal.sample(rng);
                Cluster {
                    power: scatter,
                    gain: cn(rng) * scatter.sqrt(),
                    delay_taps: cfg.timing_offset_taps + d,
                    aoa: mean_aoa + spread * aoa_jitter,
                    aod: mean_aod + spread * aod_jitter,
                }
            })
            .collect();
        Ok(Self { clusters, los })
    }

    /// `g' = sqrt(1 - eps^2) g + eps sqrt(P) CN(0, 1)` for every scattered gain.
    pub fn perturb<R: Rng + ?Sized>(&mut self, eps: f64, rng: &mut R) {
        let keep = (1.0 - eps * eps).max(0.0).sqrt();
        for c in &mut self.clusters {
            c.gain = c.gain * keep + cn(rng) * (eps * c.power.sqrt());
        }
    }

    /// Frequency response at the given subcarrier indices.
    pub fn response(&self, cfg: &SystemConfig, subcarriers: &[usize]) -> ComplexTensor3 {
        let n_ifft = cfg.n_ifft() as f64;
        let steer = |n: usize, angle: f64| -> Vec<Complex64> {
            (0..n).map(|m| Complex64::from_polar(1.0, PI * m as f64 * angle.sin())).collect()
        };
        let mut h = ComplexTensor3::zeros([cfg.n_r, cfg.n_t, subcarriers.len()]);
        for (idx, c) in self.clusters.iter().enumerate() {
            let a_r = steer(cfg.n_r, c.aoa);
            let a_t = steer(cfg.n_t, c.aod);
            let g = if idx == 0 { c.gain + self.los } else { c.gain };
            let phase: Vec<Complex64> = subcarriers
                .iter()
                .map(|&i| Complex64::from_polar(1.0, -2.0 * PI * i as f64 * c.delay_taps / n_ifft))
                .collect();
            for r in 0..cfg.n_r {
                for t in 0..cfg.n_t {
                    let w = g * a_r[r] * a_t[t].conj();
                    let off = (r * cfg.n_t + t) * subcarriers.len();
                    for (v, p) in h.data_mut()[off..off + subcarriers.len()].iter_mut().zip(&phase) {
                        *v += w * p;
                    }
                }
            }
        }
        h
    }
}

/// Frequency-domain channel over all subcarriers, `N_R x N_T x N_c`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    pub h_f: ComplexTensor3,
}

impl ChannelRealization {
    /// Noiseless channel at every RB center, `N_R x N_T x N_RB`.
    pub fn rb_centers(&self, cfg: &SystemConfig) -> Result<ComplexTensor3> {
        let idx: Vec<usize> = (0..cfg.n_rb).map(|r| cfg.rb_center(r)).collect();
        self.h_f.select_last(&idx)
    }
}

pub fn gen_channel<R: Rng + ?Sized>(cfg: &SystemConfig, rng: &mut R) -> Result<ChannelRealization> {
    let ue = UeChannel::draw(cfg, rng)?;
    let sc: Vec<usize> = (0..cfg.n_c).collect();
    Ok(ChannelRealization { h_f: ue.response(cfg, &sc) })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PilotPattern {
    n_rb: usize,
    rbs: Vec<usize>,
    /// Resource elements combined per port per RB.
    pub despread_gain: f64,
}

impl PilotPattern {
    pub fn new(rbs: Vec<usize>, n_rb: usize) -> Result<Self> {
        if rbs.is_empty() {
            return Err(Error::config("pilot pattern needs at least one RB"));
        }
        if let Some(&bad) = rbs.iter().find(|&&r| r >= n_rb) {
            return Err(Error::Index { what: "pilot RB", index: bad as i64, len: n_rb });
        }
        if rbs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("pilot RB indices must be strictly increasing"));
        }
        Ok(Self { n_rb, rbs, despread_gain: 2.0 })
    }

    /// `count` RBs starting at `first`, `step` apart.
    pub fn comb(n_rb: usize, first: usize, step: usize, count: usize) -> Result<Self> {
        Self::new((0..count).map(|i| first + i * step).collect(), n_rb)
    }

    pub fn all(n_rb: usize) -> Self {
        Self { n_rb, rbs: (0..n_rb).collect(), despread_gain: 2.0 }
    }

    pub fn rbs(&self) -> &[usize] {
        &self.rbs
    }

    pub fn n_rb(&self) -> usize {
        self.n_rb
    }

    pub fn len(&self) -> usize {
        self.rbs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rbs.is_empty()
    }

    pub fn density(&self) -> f64 {
        self.rbs.len() as f64 / self.n_rb as f64
    }

    /// Keeps the positions `idx` of this pattern's RB list.
    pub fn subpattern(&self, idx: &[usize]) -> Result<Self> {
        let rbs = idx
            .iter()
            .map(|&i| self.rbs.get(i).copied().ok_or(Error::Index { what: "pilot position", index: i as i64, len: self.rbs.len() }))
            .collect::<Result<Vec<_>>>()?;
        let mut p = Self::new(rbs, self.n_rb)?;
        p.despread_gain = self.despread_gain;
        Ok(p)
    }
}

pub fn pilot_density(pattern: &PilotPattern, cfg: &SystemConfig) -> f64 {
    pattern.len() as f64 / cfg.n_rb as f64
}

/// Per-element noise variance after despreading.
pub fn noise_variance(snr_db: f64, despread_gain: f64) -> f64 {
    if snr_db == f64::INFINITY {
        0.0
    } else {
        10f64.powf(-snr_db / 10.0) / despread_gain
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PilotSample {
    /// `N_R x N_T x N_pilot`.
    pub y: ComplexTensor3,
    pub snr_db: f64,
    pub rbs: Vec<usize>,
}

fn add_noise<R: Rng + ?Sized>(y: &mut ComplexTensor3, variance: f64, rng: &mut R) {
    let sigma = variance.sqrt();
    if sigma > 0.0 {
        y.data_mut().iter_mut().for_each(|v| *v += cn(rng) * sigma);
    }
}

/// Adds measurement noise to noiseless RB-center channels (`N_R x N_T x N_RB`).
pub fn observe<R: Rng + ?Sized>(rb_channel: &ComplexTensor3, pattern: &PilotPattern, snr_db: f64, rng: &mut R) -> Result<PilotSample> {
    let mut y = rb_channel.select_last(pattern.rbs())?;
    add_noise(&mut y, noise_variance(snr_db, pattern.despread_gain), rng);
    Ok(PilotSample { y, snr_db, rbs: pattern.rbs().to_vec() })
}

pub fn transmit_pilots<R: Rng + ?Sized>(
    h: &ChannelRealization,
    cfg: &SystemConfig,
    pattern: &PilotPattern,
    snr_db: f64,
    rng: &mut R,
) -> Result<PilotSample> {
    if pattern.n_rb() > cfg.n_rb {
        return Err(Error::Index { what: "pilot RB", index: pattern.n_rb() as i64 - 1, len: cfg.n_rb });
    }
    let centers: Vec<usize> = pattern.rbs().iter().map(|&r| cfg.rb_center(r)).collect();
    if let Some(&bad) = centers.iter().find(|&&c| c >= h.h_f.dims()[2]) {
        return Err(Error::Index { what: "pilot subcarrier", index: bad as i64, len: h.h_f.dims()[2] });
    }
    let mut y = h.h_f.select_last(&centers)?;
    add_noise(&mut y, noise_variance(snr_db, pattern.despread_gain), rng);
    Ok(PilotSample { y, snr_db, rbs: pattern.rbs().to_vec() })
}

/// Independent generator stream per UE so generation order never changes results.
pub fn ue_rng(seed: u64, ue: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(ue as u64 + 1);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRequest {
    pub n_ue: usize,
    pub snapshots_per_ue: usize,
    pub val_ue: usize,
    pub test_ue: usize,
    pub snr_db: f64,
    pub seed: u64,
}

impl DatasetRequest {
    /// 250 UEs x 10 snapshots: 1800 train, 200 validation, 500 test samples.
    pub fn desk(seed: u64) -> Self {
        Self { n_ue: 270, snapshots_per_ue: 10, val_ue: 20, test_ue: 50, snr_db: 10.0, seed }
    }

    pub fn train_ue(&self) -> usize {
        self.n_ue - self.val_ue - self.test_ue
    }
}

/// Samples ordered by UE: train UEs first, then validation, then test.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub cfg: SystemConfig,
    pub pattern: PilotPattern,
    pub request: DatasetRequest,
    pub pilots: Vec<ComplexTensor3>,
    pub labels: Vec<ComplexTensor3>,
    /// Noiseless channel at every RB center.
    pub rb_channels: Vec<ComplexTensor3>,
    pub ue: Vec<u32>,
}

impl DatasetBundle {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn split_of_ue(&self, ue: u32) -> Split {
        let ue = ue as usize;
        let train = self.request.train_ue();
        if ue < train {
            Split::Train
        } else if ue < train + self.request.val_ue {
            Split::Val
        } else {
            Split::Test
        }
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split_of_ue(self.ue[i]) == split).collect()
    }

    /// Fresh measurements of the stored channels with another pattern and SNR.
    pub fn reobserve(&self, idx: &[usize], pattern: &PilotPattern, snr_db: f64, seed: u64) -> Result<Vec<PilotSample>> {
        idx.iter()
            .map(|&i| {
                let mut rng = ue_rng(seed ^ 0x5eed_0f_7e57, i);
                observe(&self.rb_channels[i], pattern, snr_db, &mut rng)
            })
            .collect()
    }
}

pub fn make_dataset(cfg: &SystemConfig, req: &DatasetRequest, pattern: &PilotPattern) -> Result<DatasetBundle> {
    cfg.validate()?;
    if req.n_ue == 0 || req.snapshots_per_ue == 0 {
        return Err(Error::config("UE and snapshot counts must be positive"));
    }
    if req.val_ue + req.test_ue >= req.n_ue {
        return Err(Error::config("validation and test UEs leave no training UE"));
    }
    if pattern.n_rb() != cfg.n_rb {
        return Err(Error::config("pilot pattern was built for a different RB count"));
    }
    let tc = cfg.transform();
    let all_sc: Vec<usize> = (0..cfg.n_c).collect();
    let centers: Vec<usize> = (0..cfg.n_rb).map(|r| cfg.rb_center(r)).collect();
    let n = req.n_ue * req.snapshots_per_ue;
    let mut out = DatasetBundle {
        cfg: cfg.clone(),
        pattern: pattern.clone(),
        request: req.clone(),
        pilots: Vec::with_capacity(n),
        labels: Vec::with_capacity(n),
        rb_channels: Vec::with_capacity(n),
        ue: Vec::with_capacity(n),
    };
    for u in 0..req.n_ue {
        let mut rng = ue_rng(req.seed, u);
        let mut ue = UeChannel::draw(cfg, &mut rng)?;
        for s in 0..req.snapshots_per_ue {
            if s > 0 {
                ue.perturb(cfg.snapshot_perturbation, &mut rng);
            }
            let h_f = ue.response(cfg, &all_sc);
            let rb = h_f.select_last(&centers)?;
            out.pilots.push(observe(&rb, pattern, req.snr_db, &mut rng)?.y);
            out.labels.push(freq_to_time(&h_f, &tc)?);
            out.rb_channels.push(rb);
            out.ue.push(u as u32);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        SystemConfig::paper().validate().unwrap();
        SystemConfig::desk().validate().unwrap();
        assert_eq!(SystemConfig::paper().n_ifft(), 1024);
        assert_eq!(SystemConfig::desk().n_ifft(), 128);
    }

    #[test]
    fn zero_clusters_rejected() {
        let cfg = SystemConfig { n_cl: 0, ..SystemConfig::desk() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(gen_channel(&cfg, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn pattern_validation() {
        assert!(PilotPattern::new(vec![0, 8], 8).is_err());
        assert!(PilotPattern::new(vec![3, 1], 8).is_err());
        let p = PilotPattern::comb(52, 0, 2, 26).unwrap();
        assert_eq!(p.len(), 26);
        assert_eq!(p.density(), 0.5);
    }

    #[test]
    fn split_is_by_ue() {
        let cfg = SystemConfig::desk();
        let req = DatasetRequest { n_ue: 6, snapshots_per_ue: 3, val_ue: 1, test_ue: 2, snr_db: 10.0, seed: 1 };
        let ds = make_dataset(&cfg, &req, &PilotPattern::all(cfg.n_rb)).unwrap();
        assert_eq!(ds.len(), 18);
        assert_eq!(ds.indices(Split::Train).len(), 9);
        assert_eq!(ds.indices(Split::Val).len(), 3);
        assert_eq!(ds.indices(Split::Test).len(), 6);
    }
}
