//! Frequency/delay conversions and the NMSE metric.

use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::ctensor::ComplexTensor3;
use crate::error::{Error, Result};

/// Lowest value reported by [`nmse_db`]; an exact match would otherwise be `-inf`.
pub const NMSE_FLOOR_DB: f64 = -300.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransformConfig {
    pub n_ifft: usize,
    /// Retained delay taps.
    pub n_p: usize,
}

impl TransformConfig {
    pub fn new(n_ifft: usize, n_p: usize) -> Result<Self> {
        let tc = Self { n_ifft, n_p };
        tc.validate()?;
        Ok(tc)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.n_ifft.is_power_of_two() {
            return Err(Error::config(format!("IFFT length {} is not a power of two; zero-pad to the next power", self.n_ifft)));
        }
        if self.n_p == 0 || self.n_p > self.n_ifft {
            return Err(Error::config(format!("retained taps {} must be in 1..={}", self.n_p, self.n_ifft)));
        }
        Ok(())
    }
}

fn check_pow2(n: usize) -> Result<()> {
    if n.is_power_of_two() {
        Ok(())
    } else {
        Err(Error::config(format!("transform length {n} is not a power of two; zero-pad to {}", n.next_power_of_two())))
    }
}

/// Inverse DFT with `1/N` scaling, in place.
pub fn ifft_in_place(x: &mut [Complex64]) -> Result<()> {
    check_pow2(x.len())?;
    let n = x.len();
    FftPlanner::new().plan_fft_inverse(n).process(x);
    let s = 1.0 / n as f64;
    x.iter_mut().for_each(|v| *v *= s);
    Ok(())
}

pub fn ifft(x: &[Complex64]) -> Result<Vec<Complex64>> {
    let mut y = x.to_vec();
    ifft_in_place(&mut y)?;
    Ok(y)
}

/// Unscaled forward DFT, the inverse of [`ifft`].
pub fn fft(x: &[Complex64]) -> Result<Vec<Complex64>> {
    check_pow2(x.len())?;
    let mut y = x.to_vec();
    FftPlanner::new().plan_fft_forward(y.len()).process(&mut y);
    Ok(y)
}

/// Zero-pads every antenna-pair row to `n_ifft`, inverse transforms it and
/// keeps the first `n_p` taps.
pub fn freq_to_time(h: &ComplexTensor3, tc: &TransformConfig) -> Result<ComplexTensor3> {
    tc.validate()?;
    let [nr, nt, nc] = h.dims();
    if nc > tc.n_ifft {
        return Err(Error::config(format!("{nc} subcarriers exceed IFFT length {}", tc.n_ifft)));
    }
    let plan = FftPlanner::new().plan_fft_inverse(tc.n_ifft);
    let scale = 1.0 / tc.n_ifft as f64;
    let mut buf = vec![Complex64::new(0.0, 0.0); tc.n_ifft];
    let mut out = Vec::with_capacity(nr * nt * tc.n_p);
    for row in h.fibers() {
        buf[..nc].copy_from_slice(row);
        buf[nc..].iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
        plan.process(&mut buf);
        out.extend(buf[..tc.n_p].iter().map(|v| v * scale));
    }
    ComplexTensor3::from_vec([nr, nt, tc.n_p], out)
}

/// Fraction of the full `n_ifft`-tap energy that lands in the first `n_p` taps.
pub fn tap_energy_fraction(h: &ComplexTensor3, tc: &TransformConfig) -> Result<f64> {
    let full = freq_to_time(h, &TransformConfig { n_ifft: tc.n_ifft, n_p: tc.n_ifft })?;
    let total = full.norm_sqr();
    let kept: f64 = full.fibers().map(|f| f[..tc.n_p].iter().map(|z| z.norm_sqr()).sum::<f64>()).sum();
    Ok(if total > 0.0 { kept / total } else { 0.0 })
}

fn to_db(ratio: f64) -> f64 {
    if ratio <= 0.0 {
        NMSE_FLOOR_DB
    } else {
        (10.0 * ratio.log10()).max(NMSE_FLOOR_DB)
    }
}

/// `‖h - est‖² / ‖h‖²` for one sample.
pub fn nmse_ratio(h: &ComplexTensor3, est: &ComplexTensor3) -> Result<f64> {
    if h.dims() != est.dims() {
        return Err(Error::shape("nmse", &h.dims(), &est.dims()));
    }
    let den = h.norm_sqr();
    if !(den > 0.0) {
        return Err(Error::data("nmse", "label has zero norm"));
    }
    let num: f64 = h.data().iter().zip(est.data()).map(|(a, b)| (a - b).norm_sqr()).sum();
    Ok(num / den)
}

/// Mean normalized squared error in dB. Zero-norm labels are skipped with a
/// warning; an empty usable set is an error.
pub fn nmse_db(labels: &[ComplexTensor3], estimates: &[ComplexTensor3]) -> Result<f64> {
    if labels.len() != estimates.len() {
        return Err(Error::shape("nmse_db (batch)", &[labels.len()], &[estimates.len()]));
    }
    let mut sum = 0.0;
    let mut used = 0usize;
    for (i, (h, e)) in labels.iter().zip(estimates).enumerate() {
        match nmse_ratio(h, e) {
            Ok(r) => {
                sum += r;
                used += 1;
            }
            Err(Error::Data { .. }) => log::warn!("sample {i}: zero-norm label excluded from NMSE"),
            Err(e) => return Err(e),
        }
    }
    if used == 0 {
        return Err(Error::data("nmse_db", "no sample with a non-zero label"));
    }
    Ok(to_db(sum / used as f64))
}

pub fn nmse_db_single(h: &ComplexTensor3, est: &ComplexTensor3) -> Result<f64> {
    nmse_ratio(h, est).map(to_db)
}
