//! On-disk layout of datasets and trained models.
//!
//! A dataset directory holds `pilots.dtns`, `labels.dtns`, `rbchan.dtns`
//! (complex128, leading sample axis) and `manifest.txt`. A model is a
//! checkpoint plus a `.cfg` sidecar describing the architecture.

use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ConfigText;
use super::format::{Checkpoint, StoredTensor, TensorData};
use crate::chansim::{DatasetBundle, DatasetRequest, PilotPattern, SystemConfig};
use crate::ctensor::ComplexTensor3;
use crate::dacen::{AblationSpec, Dacen, DacenSpec, FfInput, Variant};
use crate::error::{Error, Result};
use crate::tensor::{Precision, Scalar, Tensor};

pub const PILOTS_FILE: &str = "pilots.dtns";
pub const LABELS_FILE: &str = "labels.dtns";
pub const RB_FILE: &str = "rbchan.dtns";
pub const MANIFEST_FILE: &str = "manifest.txt";

pub fn write_system(c: &mut ConfigText, sec: &str, s: &SystemConfig) {
    c.set(sec, "n_t", s.n_t);
    c.set(sec, "n_r", s.n_r);
    c.set(sec, "n_c", s.n_c);
    c.set(sec, "n_rb", s.n_rb);
    c.set(sec, "sc_per_rb", s.sc_per_rb);
    c.set(sec, "f_s", s.f_s);
    c.set(sec, "carrier_hz", s.carrier_hz);
    c.set(sec, "scs_hz", s.scs_hz);
    c.set(sec, "n_cl", s.n_cl);
    c.set(sec, "k_factor_db", s.k_factor_db);
    c.set(sec, "n_p", s.n_p);
    c.set(sec, "delay_spread_s", s.delay_spread_s);
    c.set(sec, "timing_offset_taps", s.timing_offset_taps);
    c.set(sec, "angle_spread_deg", s.angle_spread_deg);
    c.set(sec, "snapshot_perturbation", s.snapshot_perturbation);
}

pub const SYSTEM_KEYS: &[&str] = &[
    "preset",
    "n_t",
    "n_r",
    "n_c",
    "n_rb",
    "sc_per_rb",
    "f_s",
    "carrier_hz",
    "scs_hz",
    "n_cl",
    "k_factor_db",
    "n_p",
    "delay_spread_s",
    "timing_offset_taps",
    "angle_spread_deg",
    "snapshot_perturbation",
];

/// Starts from `preset` (default `desk`) and applies any listed field.
pub fn read_system(c: &ConfigText, sec: &str) -> Result<SystemConfig> {
    let base = SystemConfig::preset(c.get(sec, "preset").unwrap_or("desk"))?;
    let s = SystemConfig {
        n_t: c.value_or(sec, "n_t", base.n_t)?,
        n_r: c.value_or(sec, "n_r", base.n_r)?,
        n_c: c.value_or(sec, "n_c", base.n_c)?,
        n_rb: c.value_or(sec, "n_rb", base.n_rb)?,
        sc_per_rb: c.value_or(sec, "sc_per_rb", base.sc_per_rb)?,
        f_s: c.value_or(sec, "f_s", base.f_s)?,
        carrier_hz: c.value_or(sec, "carrier_hz", base.carrier_hz)?,
        scs_hz: c.value_or(sec, "scs_hz", base.scs_hz)?,
        n_cl: c.value_or(sec, "n_cl", base.n_cl)?,
        k_factor_db: c.value_or(sec, "k_factor_db", base.k_factor_db)?,
        n_p: c.value_or(sec, "n_p", base.n_p)?,
        delay_spread_s: c.value_or(sec, "delay_spread_s", base.delay_spread_s)?,
        timing_offset_taps: c.value_or(sec, "timing_offset_taps", base.timing_offset_taps)?,
        angle_spread_deg: c.value_or(sec, "angle_spread_deg", base.angle_spread_deg)?,
        snapshot_perturbation: c.value_or(sec, "snapshot_perturbation", base.snapshot_perturbation)?,
    };
    s.validate()?;
    Ok(s)
}

fn stack(samples: &[ComplexTensor3]) -> Result<StoredTensor> {
    let d = samples.first().map_or([0, 0, 0], |s| s.dims());
    let mut data = Vec::with_capacity(samples.len() * d.iter().product::<usize>());
    for s in samples {
        if s.dims() != d {
            return Err(Error::shape("dataset stack", &s.dims(), &d));
        }
        data.extend_from_slice(s.data());
    }
    StoredTensor::new(vec![samples.len(), d[0], d[1], d[2]], TensorData::Complex128(data))
}

fn unstack(t: StoredTensor, what: &str) -> Result<Vec<ComplexTensor3>> {
    let TensorData::Complex128(data) = t.data else {
        return Err(Error::data(what, "expected complex128 samples"));
    };
    let [n, a, b, c] = t.dims[..] else {
        return Err(Error::data(what, format!("expected rank 4, found {}", t.dims.len())));
    };
    let per = a * b * c;
    (0..n).map(|i| ComplexTensor3::from_vec([a, b, c], data[i * per..(i + 1) * per].to_vec())).collect()
}

pub fn save_dataset(dir: impl AsRef<Path>, ds: &DatasetBundle) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    super::format::save_tensor(dir.join(PILOTS_FILE), &stack(&ds.pilots)?)?;
    super::format::save_tensor(dir.join(LABELS_FILE), &stack(&ds.labels)?)?;
    super::format::save_tensor(dir.join(RB_FILE), &stack(&ds.rb_channels)?)?;
    let mut m = ConfigText::default();
    write_system(&mut m, "system", &ds.cfg);
    let r = &ds.request;
    m.set("request", "n_ue", r.n_ue);
    m.set("request", "snapshots_per_ue", r.snapshots_per_ue);
    m.set("request", "val_ue", r.val_ue);
    m.set("request", "test_ue", r.test_ue);
    m.set("request", "snr_db", r.snr_db);
    m.set("request", "seed", r.seed);
    m.set("pilots", "rbs", join(ds.pattern.rbs()));
    m.set("pilots", "n_rb", ds.pattern.n_rb());
    m.set("samples", "count", ds.len());
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, m.to_string()).map_err(|e| Error::io(&path, e))
}

pub fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(", ")
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<DatasetBundle> {
    let dir = dir.as_ref();
    let m = ConfigText::load(dir.join(MANIFEST_FILE))?;
    let cfg = read_system(&m, "system")?;
    let need = |k: &str| -> Result<usize> {
        m.value("request", k)?.ok_or_else(|| Error::data("dataset manifest", format!("missing request.{k}")))
    };
    let request = DatasetRequest {
        n_ue: need("n_ue")?,
        snapshots_per_ue: need("snapshots_per_ue")?,
        val_ue: need("val_ue")?,
        test_ue: need("test_ue")?,
        snr_db: m.value_or("request", "snr_db", 10.0)?,
        seed: m.value_or("request", "seed", 0u64)?,
    };
    let rbs = m.list::<usize>("pilots", "rbs")?.ok_or_else(|| Error::data("dataset manifest", "missing pilots.rbs"))?;
    let pattern = PilotPattern::new(rbs, cfg.n_rb)?;
    let pilots = unstack(super::format::load_tensor(dir.join(PILOTS_FILE))?, PILOTS_FILE)?;
    let labels = unstack(super::format::load_tensor(dir.join(LABELS_FILE))?, LABELS_FILE)?;
    let rb_channels = unstack(super::format::load_tensor(dir.join(RB_FILE))?, RB_FILE)?;
    let n = request.n_ue * request.snapshots_per_ue;
    if pilots.len() != n || labels.len() != n || rb_channels.len() != n {
        return Err(Error::data(
            "dataset",
            format!("expected {n} samples, found {}/{}/{}", pilots.len(), labels.len(), rb_channels.len()),
        ));
    }
    let ue = (0..n).map(|i| (i / request.snapshots_per_ue) as u32).collect();
    Ok(DatasetBundle { cfg, pattern, request, pilots, labels, rb_channels, ue })
}

pub fn write_model_spec(c: &mut ConfigText, sec: &str, spec: &DacenSpec, ab: &AblationSpec) {
    c.set(sec, "d_model", spec.d_model);
    c.set(sec, "d_ff", spec.d_ff);
    c.set(sec, "n_h", spec.n_h);
    c.set(sec, "n_sa", spec.n_sa);
    c.set(sec, "n_ta", spec.n_ta);
    c.set(sec, "omega", spec.omega);
    c.set(sec, "n_p", spec.n_p);
    c.set(sec, "n_r", spec.n_r);
    c.set(sec, "n_t", spec.n_t);
    c.set(sec, "n_l", spec.n_l);
    c.set(sec, "ff_input", spec.ff_input.as_str());
    c.set(sec, "ln_eps", spec.ln_eps);
    c.set(sec, "use_pe", spec.use_pe);
    c.set(sec, "variant", ab.variant.as_str());
    c.set(sec, "k_s", ab.k_s);
    c.set(sec, "k_t", ab.k_t);
}

pub const MODEL_KEYS: &[&str] = &[
    "preset", "d_model", "d_ff", "n_h", "n_sa", "n_ta", "omega", "n_p", "n_r", "n_t", "n_l", "ff_input", "ln_eps", "use_pe", "variant",
    "k_s", "k_t",
];

/// Starts from `preset` (default `desk`) at `n_l` pilots and applies overrides.
pub fn read_model_spec(c: &ConfigText, sec: &str, n_l: usize) -> Result<(DacenSpec, AblationSpec)> {
    let base = DacenSpec::preset(c.get(sec, "preset").unwrap_or("desk"), n_l)?;
    let spec = DacenSpec {
        d_model: c.value_or(sec, "d_model", base.d_model)?,
        d_ff: c.value_or(sec, "d_ff", base.d_ff)?,
        n_h: c.value_or(sec, "n_h", base.n_h)?,
        n_sa: c.value_or(sec, "n_sa", base.n_sa)?,
        n_ta: c.value_or(sec, "n_ta", base.n_ta)?,
        omega: c.value_or(sec, "omega", base.omega)?,
        n_p: c.value_or(sec, "n_p", base.n_p)?,
        n_r: c.value_or(sec, "n_r", base.n_r)?,
        n_t: c.value_or(sec, "n_t", base.n_t)?,
        n_l: c.value_or(sec, "n_l", base.n_l)?,
        ff_input: c.get(sec, "ff_input").map(FfInput::parse).transpose()?.unwrap_or(base.ff_input),
        ln_eps: c.value_or(sec, "ln_eps", base.ln_eps)?,
        use_pe: c.value_or(sec, "use_pe", base.use_pe)?,
    };
    let d = AblationSpec::default();
    let ab = AblationSpec {
        variant: c.get(sec, "variant").map(Variant::parse).transpose()?.unwrap_or(d.variant),
        k_s: c.value_or(sec, "k_s", d.k_s)?,
        k_t: c.value_or(sec, "k_t", d.k_t)?,
    };
    spec.validate()?;
    ab.validate()?;
    Ok((spec, ab))
}

pub fn model_checkpoint<T: Scalar>(model: &Dacen<T>) -> Result<Checkpoint> {
    let mut ck = Checkpoint::default();
    for p in model.params().iter() {
        let data = match T::PRECISION {
            Precision::F32 => TensorData::Real32(p.value.data().iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect()),
            Precision::F64 => TensorData::Real64(p.value.data().iter().map(|v| v.to_f64_lossy()).collect()),
        };
        ck.push(p.name.clone(), StoredTensor::new(p.value.shape().to_vec(), data)?)?;
    }
    Ok(ck)
}

pub fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("cfg")
}

pub fn save_model<T: Scalar>(path: impl AsRef<Path>, model: &Dacen<T>) -> Result<()> {
    let path = path.as_ref();
    model_checkpoint(model)?.save(path)?;
    let mut c = ConfigText::default();
    write_model_spec(&mut c, "model", model.spec(), model.ablation());
    c.set("model", "precision", T::PRECISION.as_str());
    let side = sidecar(path);
    std::fs::write(&side, c.to_string()).map_err(|e| Error::io(&side, e))
}

/// Rebuilds the architecture from the sidecar and fills every parameter
/// from the checkpoint, converting precision if needed.
pub fn load_model<T: Scalar>(path: impl AsRef<Path>) -> Result<Dacen<T>> {
    let path = path.as_ref();
    let c = ConfigText::load(sidecar(path))?;
    let n_l = c.value("model", "n_l")?.ok_or_else(|| Error::data("model sidecar", "missing n_l"))?;
    let (spec, ab) = read_model_spec(&c, "model", n_l)?;
    let ck = Checkpoint::load(path)?;
    let mut model = Dacen::<T>::build(spec, ab, &mut ChaCha8Rng::seed_from_u64(0))?;
    if ck.tensors.len() != model.params().len() {
        return Err(Error::data(
            "checkpoint",
            format!("{} tensors, model has {}", ck.tensors.len(), model.params().len()),
        ));
    }
    for p in model.params_mut().iter_mut() {
        let t = ck.get(&p.name).ok_or_else(|| Error::data("checkpoint", format!("missing tensor `{}`", p.name)))?;
        if t.dims != p.value.shape() {
            return Err(Error::shape("checkpoint tensor", &t.dims, p.value.shape()));
        }
        let vals: Vec<T> = match &t.data {
            TensorData::Real32(v) => v.iter().map(|&x| T::from_f64_lossy(x as f64)).collect(),
            TensorData::Real64(v) => v.iter().map(|&x| T::from_f64_lossy(x)).collect(),
            _ => return Err(Error::data("checkpoint", format!("tensor `{}` is complex", p.name))),
        };
        p.value = Tensor::new(t.dims.clone(), vals)?;
    }
    Ok(model)
}

/// Complex samples in file order, as used by the CLI for ad-hoc inputs.
pub fn complex_samples(t: StoredTensor) -> Result<Vec<ComplexTensor3>> {
    unstack(t, "samples")
}

pub fn complex_tensor(dims: [usize; 3], data: Vec<Complex64>) -> Result<StoredTensor> {
    StoredTensor::new(dims.to_vec(), TensorData::Complex128(data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chansim::make_dataset;

    #[test]
    fn dataset_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SystemConfig::desk();
        let req = DatasetRequest { n_ue: 4, snapshots_per_ue: 2, val_ue: 1, test_ue: 1, snr_db: 10.0, seed: 3 };
        let ds = make_dataset(&cfg, &req, &PilotPattern::comb(8, 1, 4, 2).unwrap()).unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn model_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dack");
        let spec = DacenSpec { d_model: 8, d_ff: 8, n_sa: 1, n_ta: 1, ..DacenSpec::desk(2) };
        let m = Dacen::<f32>::build(spec, AblationSpec::new(Variant::SamTconv), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        save_model(&path, &m).unwrap();
        let back: Dacen<f32> = load_model(&path).unwrap();
        assert_eq!(back.spec(), m.spec());
        assert_eq!(back.variant(), Variant::SamTconv);
        for (a, b) in back.params().iter().zip(m.params().iter()) {
            assert_eq!(a.value.data(), b.value.data(), "{}", a.name);
        }
        let ck = Checkpoint::load(&path).unwrap();
        assert_eq!(ck.numel() as u64, crate::complexity::count_params(&m, crate::complexity::Convention::Full));
    }
}
