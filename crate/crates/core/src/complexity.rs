//! Closed-form multiply-accumulate and parameter counts.
//!
//! One multiply-accumulate counts as one FLOP. Parameter counts come in two
//! conventions: [`Convention::Paper`] keeps linear and convolution weights
//! and biases, [`Convention::Full`] counts every learnable value.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dacen::{AblationSpec, Dacen, DacenSpec, Mixer, Variant};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Convention {
    Paper,
    Full,
}

impl Convention {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Self::Paper),
            "full" => Ok(Self::Full),
            other => Err(Error::config(format!("unknown parameter convention `{other}`"))),
        }
    }
}

/// `6 (2 N_P) d^2 + 2 (2 N_P)^2 d`
pub fn tam_flops(n_p: u64, d_model: u64) -> u64 {
    let l = 2 * n_p;
    6 * l * d_model * d_model + 2 * l * l * d_model
}

/// `2 S + S d + 2 S d^2` with `S = N_R N_T`.
pub fn sam_flops(n_r: u64, n_t: u64, d_model: u64) -> u64 {
    let s = n_r * n_t;
    2 * s + s * d_model + 2 * s * d_model * d_model
}

pub fn sconv_flops(n_r: u64, n_t: u64, k_s: u64, d_model: u64) -> u64 {
    n_r * n_t * k_s * k_s * d_model * d_model
}

pub fn tconv_flops(n_p: u64, k_t: u64, d_model: u64) -> u64 {
    2 * n_p * k_t * d_model * d_model
}

fn block_flops(mixer: Mixer, spec: &DacenSpec, ab: &AblationSpec) -> u64 {
    let (d, dff) = (spec.d_model as u64, spec.d_ff as u64);
    let (s, l) = (spec.antenna_pairs() as u64, 2 * spec.n_p as u64);
    let ff = |pos: u64| 2 * pos * d * dff;
    match mixer {
        Mixer::Temporal => 4 * l * d * d + 2 * l * l * d + ff(l),
        Mixer::Spatial => 2 * s + s * d + ff(s),
        Mixer::SpatialConv => s * (ab.k_s * ab.k_s) as u64 * d * d + ff(s),
        Mixer::TemporalConv => l * ab.k_t as u64 * d * d + ff(l),
    }
}

/// Whole-network count: every wrapped block plus the linear maps.
pub fn model_flops<T: Scalar>(model: &Dacen<T>) -> u64 {
    let spec = model.spec();
    let ab = model.ablation();
    let blocks: u64 = model
        .spatial_blocks()
        .iter()
        .chain(model.temporal_blocks())
        .map(|b| block_flops(b.mixer, spec, ab))
        .sum();
    let s = spec.antenna_pairs() as u64;
    let linear: u64 = model
        .params()
        .iter()
        .filter(|p| matches!(p.name.as_str(), "l1.w" | "l12.w" | "l2.w" | "l3.w" | "l4.w"))
        .map(|p| {
            let (n_in, n_out) = (p.value.shape()[0] as u64, p.value.shape()[1] as u64);
            let positions = match p.name.as_str() {
                "l3.w" | "l4.w" => 2 * spec.n_p as u64,
                _ => s,
            };
            positions * n_in * n_out
        })
        .sum();
    blocks + linear
}

fn counted<T: Scalar>(model: &Dacen<T>, conv: Convention, prefix: &str) -> u64 {
    model
        .params()
        .iter()
        .filter(|p| p.name.starts_with(prefix))
        .filter(|p| conv == Convention::Full || p.kind.counts_in_layer_convention())
        .map(|p| p.value.numel() as u64)
        .sum()
}

pub fn count_params<T: Scalar>(model: &Dacen<T>, conv: Convention) -> u64 {
    counted(model, conv, "")
}

/// One table line. Published values are in raw units (FLOPs, parameters).
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub label: String,
    pub flops: u64,
    pub params_paper: u64,
    pub params_full: u64,
    pub published_flops: Option<f64>,
    pub published_params: Option<f64>,
}

impl Row {
    pub fn params(&self, conv: Convention) -> u64 {
        match conv {
            Convention::Paper => self.params_paper,
            Convention::Full => self.params_full,
        }
    }

    /// Relative deviation of the computed count from the published one.
    pub fn flops_error(&self) -> Option<f64> {
        self.published_flops.map(|p| (self.flops as f64 - p).abs() / p)
    }

    pub fn params_error(&self, conv: Convention) -> Option<f64> {
        self.published_params.map(|p| (self.params(conv) as f64 - p).abs() / p)
    }
}

/// Published whole-model figures for the reference configuration.
pub const PUBLISHED_MODELS: [(Variant, f64, f64); 5] = [
    (Variant::Full, 2.31e9, 17.01e6),
    (Variant::WithoutSams, 1.76e9, 12.74e6),
    (Variant::WithoutTams, 0.55e9, 4.27e6),
    (Variant::SconvTam, 3.96e9, 29.92e6),
    (Variant::SamTconv, 1.35e9, 10.57e6),
];

/// Published per-layer figures: TAM, TConv, SAM, SConv.
pub const PUBLISHED_LAYERS: [(&str, f64, f64); 4] = [
    ("TAM", 218.47e6, 1.58e6),
    ("TConv", 100.73e6, 786.94e3),
    ("SAM", 67.18e6, 525.31e3),
    ("SConv", 302.06e6, 2.36e6),
];

/// Published figures of other learned estimators, for reference only.
pub const PUBLISHED_OTHERS: [(&str, f64, f64); 4] = [
    ("FC-DNN", 19.00e6, 18.90e6),
    ("CNN", 2.50e9, 19.52e6),
    ("CDRN", 3.40e9, 26.58e6),
    ("SC-attention", 3.74e9, 29.21e6),
];

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexityReport {
    pub layers: Vec<Row>,
    pub models: Vec<Row>,
}

fn build(spec: &DacenSpec, variant: Variant) -> Result<Dacen<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    Dacen::build(spec.clone(), AblationSpec::new(variant), &mut rng)
}

/// Published figures apply only to the reference preset.
fn is_reference(spec: &DacenSpec) -> bool {
    *spec == DacenSpec::paper(6)
}

pub fn layer_rows(spec: &DacenSpec) -> Result<Vec<Row>> {
    let one = DacenSpec { n_sa: 1, n_ta: 1, ..spec.clone() };
    let full = build(&one, Variant::Full)?;
    let sconv = build(&one, Variant::SconvTam)?;
    let tconv = build(&one, Variant::SamTconv)?;
    let ab = AblationSpec::default();
    let (n_r, n_t, n_p, d) = (spec.n_r as u64, spec.n_t as u64, spec.n_p as u64, spec.d_model as u64);
    let row = |label: &str, flops: u64, m: &Dacen<f32>, prefix: &str| Row {
        label: label.to_string(),
        flops,
        params_paper: counted(m, Convention::Paper, prefix),
        params_full: counted(m, Convention::Full, prefix),
        published_flops: None,
        published_params: None,
    };
    let mut rows = vec![
        row("TAM", block_flops(Mixer::Temporal, spec, &ab), &full, "tam0."),
        row("TConv", tconv_flops(n_p, ab.k_t as u64, d), &tconv, "tam0.conv."),
        row("SAM", block_flops(Mixer::Spatial, spec, &ab), &full, "sam0."),
        row("SConv", sconv_flops(n_r, n_t, ab.k_s as u64, d), &sconv, "sam0.conv."),
    ];
    if is_reference(spec) {
        for (r, (_, f, p)) in rows.iter_mut().zip(PUBLISHED_LAYERS) {
            r.published_flops = Some(f);
            r.published_params = Some(p);
        }
    }
    Ok(rows)
}

pub fn model_row(spec: &DacenSpec, variant: Variant) -> Result<Row> {
    let m = build(spec, variant)?;
    let published = PUBLISHED_MODELS.iter().find(|p| p.0 == variant).filter(|_| is_reference(spec));
    Ok(Row {
        label: variant.as_str().to_string(),
        flops: model_flops(&m),
        params_paper: count_params(&m, Convention::Paper),
        params_full: count_params(&m, Convention::Full),
        published_flops: published.map(|p| p.1),
        published_params: published.map(|p| p.2),
    })
}

pub fn report(spec: &DacenSpec, variants: &[Variant]) -> Result<ComplexityReport> {
    let layers = layer_rows(spec)?;
    let models = variants.iter().map(|&v| model_row(spec, v)).collect::<Result<_>>()?;
    Ok(ComplexityReport { layers, models })
}

fn si(v: f64) -> String {
    match v {
        v if v >= 1e9 => format!("{:.2} G", v / 1e9),
        v if v >= 1e6 => format!("{:.2} M", v / 1e6),
        v if v >= 1e3 => format!("{:.2} k", v / 1e3),
        v => format!("{v:.0}"),
    }
}

impl ComplexityReport {
    /// Aligned text table; `conventions` selects the parameter columns.
    pub fn to_text(&self, conventions: &[Convention]) -> String {
        let mut s = String::new();
        for (title, rows) in [("per layer", &self.layers), ("per model", &self.models)] {
            let _ = write!(s, "{title:<12} {:>12} {:>12}", "FLOPs", "published");
            for c in conventions {
                let _ = write!(s, " {:>14}", if *c == Convention::Paper { "params(paper)" } else { "params(full)" });
            }
            let _ = writeln!(s, " {:>12}", "published");
            for r in rows {
                let pf = r.published_flops.map(si).unwrap_or_else(|| "-".into());
                let _ = write!(s, "{:<12} {:>12} {:>12}", r.label, si(r.flops as f64), pf);
                for c in conventions {
                    let _ = write!(s, " {:>14}", r.params(*c));
                }
                let pp = r.published_params.map(si).unwrap_or_else(|| "-".into());
                let _ = writeln!(s, " {pp:>12}");
            }
            s.push('\n');
        }
        s
    }

    /// `section,label,flops,params_paper,params_full,published_flops,published_params`
    pub fn to_csv(&self) -> String {
        let mut s = String::from("section,label,flops,params_paper,params_full,published_flops,published_params\n");
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.0}")).unwrap_or_default();
        for (section, rows) in [("layer", &self.layers), ("model", &self.models)] {
            for r in rows {
                let _ = writeln!(
                    s,
                    "{section},{},{},{},{},{},{}",
                    r.label,
                    r.flops,
                    r.params_paper,
                    r.params_full,
                    opt(r.published_flops),
                    opt(r.published_params)
                );
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formulas_on_small_inputs() {
        assert_eq!(tam_flops(1, 2), 64);
        assert_eq!(sam_flops(1, 1, 1), 5);
        assert_eq!(sconv_flops(1, 1, 1, 7), 49);
        assert_eq!(sam_flops(4, 32, 1024) - 2 * 128 - 128 * 1024, 4 * (sam_flops(4, 32, 512) - 2 * 128 - 128 * 512));
    }

    #[test]
    fn formulas_at_reference_scale() {
        assert_eq!(tam_flops(64, 512), 218_103_808);
        assert_eq!(sam_flops(4, 32, 512), 67_174_656);
        assert_eq!(sconv_flops(4, 32, 3, 512), 301_989_888);
        assert_eq!(tconv_flops(64, 3, 512), 100_663_296);
    }

    #[test]
    fn block_flops_match_closed_forms() {
        let spec = DacenSpec::paper(6);
        let ab = AblationSpec::default();
        assert_eq!(block_flops(Mixer::Temporal, &spec, &ab), tam_flops(64, 512));
        assert_eq!(block_flops(Mixer::Spatial, &spec, &ab), sam_flops(4, 32, 512));
    }

    #[test]
    fn desk_counts_are_consistent() {
        let spec = DacenSpec::desk(2);
        for v in Variant::ALL {
            let r = model_row(&spec, v).unwrap();
            assert!(r.params_full >= r.params_paper, "{v:?}");
            assert!(r.published_flops.is_none());
        }
        let m = build(&spec, Variant::Full).unwrap();
        assert_eq!(count_params(&m, Convention::Full), m.params().numel() as u64);
    }

    #[test]
    fn csv_shape() {
        let rep = report(&DacenSpec::desk(2), &[Variant::Full]).unwrap();
        let csv = rep.to_csv();
        assert_eq!(csv.lines().count(), 1 + 4 + 1);
        assert!(rep.to_text(&[Convention::Paper, Convention::Full]).contains("TConv"));
    }
}
