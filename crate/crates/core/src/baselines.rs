//! Least-squares interpolation and frequency-domain Wiener (LMMSE) estimation.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::chansim::{noise_variance, PilotPattern, PilotSample, SystemConfig};
use crate::ctensor::ComplexTensor3;
use crate::domainxform::{freq_to_time, TransformConfig};
use crate::error::{Error, Result};

pub const MIN_STATS_SAMPLES: usize = 32;

/// Linear interpolation of one antenna pair's pilot values onto every
/// subcarrier, holding the end values beyond the outermost pilots.
fn interpolate_row(xs: &[f64], ys: &[Complex64], n_c: usize, out: &mut [Complex64]) {
    let mut seg = 0;
    for (i, o) in out.iter_mut().enumerate().take(n_c) {
        let x = i as f64;
        *o = if x <= xs[0] {
            ys[0]
        } else if x >= xs[xs.len() - 1] {
            ys[ys.len() - 1]
        } else {
            while xs[seg + 1] < x {
                seg += 1;
            }
            let w = (x - xs[seg]) / (xs[seg + 1] - xs[seg]);
            ys[seg] * (1.0 - w) + ys[seg + 1] * w
        };
    }
}

/// LS frequency response over all subcarriers.
pub fn ls_interpolate(y: &PilotSample, cfg: &SystemConfig) -> Result<ComplexTensor3> {
    let [nr, nt, np] = y.y.dims();
    if np == 0 || np != y.rbs.len() {
        return Err(Error::shape("ls_estimate", &y.y.dims(), &[y.rbs.len()]));
    }
    if np == 1 {
        log::warn!("single pilot RB: LS estimate is a constant extrapolation");
    }
    let xs: Vec<f64> = y.rbs.iter().map(|&r| cfg.rb_center(r) as f64).collect();
    let mut h = ComplexTensor3::zeros([nr, nt, cfg.n_c]);
    for (row, out) in y.y.fibers().zip(h.data_mut().chunks_mut(cfg.n_c)) {
        interpolate_row(&xs, row, cfg.n_c, out);
    }
    Ok(h)
}

pub fn ls_estimate(y: &PilotSample, cfg: &SystemConfig, tc: &TransformConfig) -> Result<ComplexTensor3> {
    freq_to_time(&ls_interpolate(y, cfg)?, tc)
}

/// Second moments pooled over antenna pairs and samples.
#[derive(Debug, Clone)]
pub struct SecondOrderStats {
    /// `E[h_rb h_rb^H]` over all RB centers, `N_RB x N_RB`.
    pub r_pp: DMatrix<Complex64>,
    /// `E[h_t h_rb^H]` between delay taps and RB centers, `N_P x N_RB`.
    pub r_tp: DMatrix<Complex64>,
    pub noise_var: f64,
}

/// Fits the statistics from noiseless RB-center channels and their labels.
pub fn fit_stats(rb_channels: &[ComplexTensor3], labels: &[ComplexTensor3], snr_db: f64, despread_gain: f64) -> Result<SecondOrderStats> {
    if rb_channels.len() < MIN_STATS_SAMPLES {
        return Err(Error::data("fit_stats", format!("{} samples, need at least {MIN_STATS_SAMPLES}", rb_channels.len())));
    }
    if rb_channels.len() != labels.len() {
        return Err(Error::shape("fit_stats", &[rb_channels.len()], &[labels.len()]));
    }
    let n_rb = rb_channels[0].dims()[2];
    let n_p = labels[0].dims()[2];
    let mut r_pp = DMatrix::<Complex64>::zeros(n_rb, n_rb);
    let mut r_tp = DMatrix::<Complex64>::zeros(n_p, n_rb);
    let mut count = 0usize;
    for (rb, lab) in rb_channels.iter().zip(labels) {
        if rb.dims()[..2] != lab.dims()[..2] || rb.dims()[2] != n_rb || lab.dims()[2] != n_p {
            return Err(Error::shape("fit_stats", &rb.dims(), &lab.dims()));
        }
        for (p, t) in rb.fibers().zip(lab.fibers()) {
            for j in 0..n_rb {
                let pj = p[j].conj();
                for i in 0..n_rb {
                    r_pp[(i, j)] += p[i] * pj;
                }
                for i in 0..n_p {
                    r_tp[(i, j)] += t[i] * pj;
                }
            }
            count += 1;
        }
    }
    let s = 1.0 / count as f64;
    r_pp *= Complex64::new(s, 0.0);
    r_tp *= Complex64::new(s, 0.0);
    Ok(SecondOrderStats { r_pp, r_tp, noise_var: noise_variance(snr_db, despread_gain) })
}

/// Wiener matrix for one pilot pattern, `N_P x N_pilot`.
#[derive(Debug, Clone)]
pub struct LmmseFilter {
    w: DMatrix<Complex64>,
    rbs: Vec<usize>,
}

impl LmmseFilter {
    pub fn new(stats: &SecondOrderStats, pattern: &PilotPattern) -> Result<Self> {
        Self::with_noise(stats, pattern, stats.noise_var)
    }

    pub fn with_noise(stats: &SecondOrderStats, pattern: &PilotPattern, noise_var: f64) -> Result<Self> {
        let rbs = pattern.rbs();
        let n_rb = stats.r_pp.nrows();
        if let Some(&bad) = rbs.iter().find(|&&r| r >= n_rb) {
            return Err(Error::Index { what: "pilot RB in LMMSE statistics", index: bad as i64, len: n_rb });
        }
        let k = rbs.len();
        let mut a = DMatrix::from_fn(k, k, |i, j| stats.r_pp[(rbs[i], rbs[j])]);
        for i in 0..k {
            a[(i, i)] += Complex64::new(noise_var, 0.0);
        }
        let c = DMatrix::from_fn(stats.r_tp.nrows(), k, |i, j| stats.r_tp[(i, rbs[j])]);
        let chol = match a.clone().cholesky() {
            Some(ch) => ch,
            None => {
                let trace: f64 = (0..k).map(|i| a[(i, i)].re).sum();
                let bump = 1e-9 * trace / k as f64;
                log::warn!("LMMSE system is singular; adding ridge {bump:e}");
                for i in 0..k {
                    a[(i, i)] += Complex64::new(bump, 0.0);
                }
                a.cholesky().ok_or_else(|| Error::data("lmmse", "pilot covariance is not positive definite"))?
            }
        };
        // W = C A^-1  <=>  A W^H = C^H (A Hermitian)
        let w = chol.solve(&c.adjoint()).adjoint();
        Ok(Self { w, rbs: rbs.to_vec() })
    }

    pub fn apply(&self, y: &PilotSample) -> Result<ComplexTensor3> {
        if y.rbs != self.rbs {
            return Err(Error::data("lmmse", "pilot sample was taken with a different pattern than the filter"));
        }
        let [nr, nt, k] = y.y.dims();
        let n_p = self.w.nrows();
        let mut out = Vec::with_capacity(nr * nt * n_p);
        for row in y.y.fibers() {
            for i in 0..n_p {
                out.push((0..k).map(|j| self.w[(i, j)] * row[j]).sum());
            }
        }
        ComplexTensor3::from_vec([nr, nt, n_p], out)
    }

    pub fn matrix(&self) -> &DMatrix<Complex64> {
        &self.w
    }
}

pub fn lmmse_estimate(y: &PilotSample, stats: &SecondOrderStats, pattern: &PilotPattern) -> Result<ComplexTensor3> {
    LmmseFilter::new(stats, pattern)?.apply(y)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(values: Vec<Complex64>, rbs: Vec<usize>) -> PilotSample {
        let n = rbs.len();
        PilotSample { y: ComplexTensor3::from_vec([1, 1, n], values).unwrap(), snr_db: f64::INFINITY, rbs }
    }

    #[test]
    fn nearest_extrapolation_and_linear_interior() {
        let cfg = SystemConfig::desk();
        let y = sample(vec![Complex64::new(1.0, 0.0), Complex64::new(3.0, -1.0)], vec![1, 3]);
        let h = ls_interpolate(&y, &cfg).unwrap();
        let (a, b) = (cfg.rb_center(1), cfg.rb_center(3));
        assert_eq!(h.get(0, 0, 0), Complex64::new(1.0, 0.0));
        assert_eq!(h.get(0, 0, cfg.n_c - 1), Complex64::new(3.0, -1.0));
        let mid = (a + b) / 2;
        assert!((h.get(0, 0, mid) - Complex64::new(2.0, -0.5)).norm() < 1e-12);
    }

    #[test]
    fn noise_variance_for_ten_db() {
        assert!((noise_variance(10.0, 2.0) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn too_few_samples() {
        let h = vec![ComplexTensor3::zeros([1, 1, 4]); 10];
        assert!(fit_stats(&h, &h, 10.0, 2.0).is_err());
    }

    #[test]
    fn huge_noise_shrinks_to_zero() {
        let h: Vec<ComplexTensor3> = (0..40)
            .map(|i| ComplexTensor3::from_fn([1, 2, 4], |_, t, k| Complex64::new((i + t + k) as f64 * 0.1, 1.0)))
            .collect();
        let stats = fit_stats(&h, &h, 10.0, 2.0).unwrap();
        let p = PilotPattern::new(vec![0, 2], 4).unwrap();
        let f = LmmseFilter::with_noise(&stats, &p, 1e12).unwrap();
        let y = sample(vec![Complex64::new(1.0, 0.0), Complex64::new(1.0, 1.0)], vec![0, 2]);
        let est = f.apply(&y).unwrap();
        assert!(est.norm_sqr() < 1e-18);
    }
}
