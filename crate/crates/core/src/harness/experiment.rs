//! End-to-end runs: generate, train, transfer, evaluate, count.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ConfigText;
use super::plot::nmse_svg;
use super::store::{read_model_spec, read_system, save_dataset, save_model, write_model_spec, write_system, MODEL_KEYS, SYSTEM_KEYS};
use super::sweep::{eval_sweep, metrics_csv, Density, DensityPlan, Estimator, Lmmse, Ls, MetricRow, Network};
use crate::chansim::{make_dataset, DatasetBundle, DatasetRequest, PilotSample, Split, SystemConfig};
use crate::complexity::report;
use crate::dacen::{AblationSpec, Dacen, DacenSpec, Variant};
use crate::error::{Error, Result};
use crate::tensor::{Precision, Scalar};
use crate::training::{train, LrSchedule, TrainConfig, TrainData, TrainRun};
use crate::transfer::{generate_low_density, train_source, transfer_from, SourceData};

#[derive(Debug, Clone, PartialEq)]
pub struct TransferSettings {
    pub s_th: f64,
    pub source: TrainConfig,
    pub target: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub system: SystemConfig,
    pub request: DatasetRequest,
    /// Density strings, resolved against the system's plan.
    pub densities: Vec<String>,
    pub snrs: Vec<f64>,
    pub model: DacenSpec,
    pub ablation: AblationSpec,
    pub train: TrainConfig,
    pub transfer: Option<TransferSettings>,
    pub seed: u64,
}

const TRAIN_KEYS: &[&str] = &["batch_size", "lr", "iterations", "val_interval", "schedule", "precision", "seed"];
const KNOWN: &[(&str, &[&str])] = &[
    ("run", &["seed"]),
    ("system", SYSTEM_KEYS),
    ("dataset", &["n_ue", "snapshots_per_ue", "val_ue", "test_ue", "snr_db"]),
    ("eval", &["densities", "snr_db"]),
    ("model", MODEL_KEYS),
    ("train", TRAIN_KEYS),
    ("transfer", &["enabled", "s_th", "source_iterations", "source_lr", "target_iterations", "target_lr"]),
];

pub fn read_train(c: &ConfigText, sec: &str, base: TrainConfig) -> Result<TrainConfig> {
    let t = TrainConfig {
        batch_size: c.value_or(sec, "batch_size", base.batch_size)?,
        lr: c.value_or(sec, "lr", base.lr)?,
        iterations: c.value_or(sec, "iterations", base.iterations)?,
        val_interval: c.value_or(sec, "val_interval", base.val_interval)?,
        schedule: c.get(sec, "schedule").map(LrSchedule::parse).transpose()?.unwrap_or(base.schedule),
        precision: match c.get(sec, "precision") {
            Some(p) => Precision::parse(p).ok_or_else(|| Error::config(format!("unknown precision `{p}`")))?,
            None => base.precision,
        },
        seed: c.value_or(sec, "seed", base.seed)?,
    };
    t.validate()?;
    Ok(t)
}

pub fn write_train(c: &mut ConfigText, sec: &str, t: &TrainConfig) {
    c.set(sec, "batch_size", t.batch_size);
    c.set(sec, "lr", t.lr);
    c.set(sec, "iterations", t.iterations);
    c.set(sec, "val_interval", t.val_interval);
    c.set(sec, "schedule", t.schedule.as_str());
    c.set(sec, "precision", t.precision.as_str());
    c.set(sec, "seed", t.seed);
}

impl ExperimentConfig {
    /// Desk system, three densities, the 5..25 dB grid and transfer enabled.
    pub fn desk(seed: u64) -> Self {
        Self {
            system: SystemConfig::desk(),
            request: DatasetRequest::desk(seed),
            densities: vec!["8/8".into(), "4/8".into(), "2/8".into()],
            snrs: vec![5.0, 10.0, 15.0, 20.0, 25.0],
            model: DacenSpec::desk(8),
            ablation: AblationSpec::default(),
            train: TrainConfig { seed, ..TrainConfig::desk() },
            transfer: Some(TransferSettings {
                s_th: 0.9,
                source: TrainConfig { seed, ..TrainConfig::desk() },
                target: TrainConfig { seed, ..TrainConfig::desk() },
            }),
            seed,
        }
    }

    pub fn from_text(c: &ConfigText) -> Result<Self> {
        let unknown = c.unknown_keys(KNOWN);
        if !unknown.is_empty() {
            return Err(Error::config(format!("unknown keys: {}", unknown.join(", "))));
        }
        let seed = c.value_or("run", "seed", 0u64)?;
        let system = read_system(c, "system")?;
        let d = if system.n_rb == 8 { DatasetRequest::desk(seed) } else { DatasetRequest { n_ue: 1000, snapshots_per_ue: 10, val_ue: 50, test_ue: 200, snr_db: 10.0, seed } };
        let request = DatasetRequest {
            n_ue: c.value_or("dataset", "n_ue", d.n_ue)?,
            snapshots_per_ue: c.value_or("dataset", "snapshots_per_ue", d.snapshots_per_ue)?,
            val_ue: c.value_or("dataset", "val_ue", d.val_ue)?,
            test_ue: c.value_or("dataset", "test_ue", d.test_ue)?,
            snr_db: c.value_or("dataset", "snr_db", d.snr_db)?,
            seed,
        };
        let plan = DensityPlan::for_system(&system)?;
        let densities = c
            .list::<String>("eval", "densities")?
            .unwrap_or_else(|| vec![format!("{}/{}", plan.high.len(), plan.high.n_rb())]);
        let snrs = c.list::<f64>("eval", "snr_db")?.unwrap_or_else(|| vec![5.0, 10.0, 15.0, 20.0, 25.0]);
        if snrs.is_empty() || densities.is_empty() {
            return Err(Error::config("eval needs at least one density and one SNR"));
        }
        for s in &densities {
            plan.parse(s)?;
        }
        let (model, ablation) = read_model_spec(c, "model", plan.high.len())?;
        let train_base = if system.n_rb == 8 { TrainConfig::desk() } else { TrainConfig::paper() };
        let train_cfg = read_train(c, "train", TrainConfig { seed, ..train_base })?;
        let transfer = if c.value_or("transfer", "enabled", false)? {
            let with = |it: &str, lr: &str| -> Result<TrainConfig> {
                Ok(TrainConfig {
                    iterations: c.value_or("transfer", it, train_cfg.iterations)?,
                    lr: c.value_or("transfer", lr, train_cfg.lr)?,
                    ..train_cfg.clone()
                })
            };
            Some(TransferSettings {
                s_th: c.value_or("transfer", "s_th", 0.9)?,
                source: with("source_iterations", "source_lr")?,
                target: with("target_iterations", "target_lr")?,
            })
        } else {
            None
        };
        Ok(Self { system, request, densities, snrs, model, ablation, train: train_cfg, transfer, seed })
    }

    /// Fully resolved form; its digest identifies the run.
    pub fn to_text(&self) -> ConfigText {
        let mut c = ConfigText::default();
        c.set("run", "seed", self.seed);
        write_system(&mut c, "system", &self.system);
        let r = &self.request;
        c.set("dataset", "n_ue", r.n_ue);
        c.set("dataset", "snapshots_per_ue", r.snapshots_per_ue);
        c.set("dataset", "val_ue", r.val_ue);
        c.set("dataset", "test_ue", r.test_ue);
        c.set("dataset", "snr_db", r.snr_db);
        c.set("eval", "densities", self.densities.join(", "));
        c.set("eval", "snr_db", super::store::join(&self.snrs));
        write_model_spec(&mut c, "model", &self.model, &self.ablation);
        write_train(&mut c, "train", &self.train);
        match &self.transfer {
            Some(t) => {
                c.set("transfer", "enabled", true);
                c.set("transfer", "s_th", t.s_th);
                c.set("transfer", "source_iterations", t.source.iterations);
                c.set("transfer", "source_lr", t.source.lr);
                c.set("transfer", "target_iterations", t.target.iterations);
                c.set("transfer", "target_lr", t.target.lr);
            }
            None => c.set("transfer", "enabled", false),
        }
        c
    }
}

/// Train and validation splits of a dataset, as stored.
pub fn source_data(ds: &DatasetBundle) -> Result<SourceData> {
    let pick = |split| {
        let idx = ds.indices(split);
        let pilots: Vec<PilotSample> = idx
            .iter()
            .map(|&i| PilotSample { y: ds.pilots[i].clone(), snr_db: ds.request.snr_db, rbs: ds.pattern.rbs().to_vec() })
            .collect();
        let labels = idx.iter().map(|&i| ds.labels[i].clone()).collect();
        (pilots, labels, idx.iter().map(|&i| i as u64).collect())
    };
    let (train_pilots, train_labels, train_ids) = pick(Split::Train);
    let (val_pilots, val_labels, val_ids) = pick(Split::Val);
    if train_pilots.is_empty() || val_pilots.is_empty() {
        return Err(Error::data("dataset", "train and validation splits must be non-empty"));
    }
    Ok(SourceData { train_pilots, train_labels, train_ids, val_pilots, val_labels, val_ids })
}

/// Restricts stored samples to `density` without touching the labels.
pub fn at_density(data: &SourceData, density: &Density) -> Result<SourceData> {
    let Some(sc) = &density.sampler else {
        return Ok(data.clone());
    };
    let low = |v: &[PilotSample]| v.iter().map(|y| generate_low_density(y, sc)).collect::<Result<Vec<_>>>();
    Ok(SourceData { train_pilots: low(&data.train_pilots)?, val_pilots: low(&data.val_pilots)?, ..data.clone() })
}

/// From-scratch training at one density.
pub fn train_scratch<T: Scalar>(
    data: &SourceData,
    density: &Density,
    spec: &DacenSpec,
    ab: AblationSpec,
    cfg: &TrainConfig,
) -> Result<(Dacen<T>, TrainRun)> {
    train_source(&at_density(data, density)?, spec, ab, cfg)
}

pub fn train_data<T: Scalar>(pilots: &[PilotSample], labels: &[crate::ctensor::ComplexTensor3], ids: &[u64]) -> Result<TrainData<T>> {
    let p: Vec<_> = pilots.iter().map(|s| s.y.clone()).collect();
    TrainData::from_samples(&p, labels, ids.to_vec(), None)
}

/// Fine-tunes an existing model; used by the CLI `train --init`.
pub fn continue_training<T: Scalar>(model: &mut Dacen<T>, data: &SourceData, cfg: &TrainConfig) -> Result<TrainRun> {
    let tr = train_data(&data.train_pilots, &data.train_labels, &data.train_ids)?;
    let va = train_data(&data.val_pilots, &data.val_labels, &data.val_ids)?;
    train(model, &tr, &va, cfg)
}

/// `DACEN_THREADS` if set, else the available cores; 1 when deterministic.
pub fn worker_threads(deterministic: bool) -> usize {
    if deterministic {
        return 1;
    }
    std::env::var("DACEN_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out: PathBuf,
    pub metrics: Vec<MetricRow>,
    pub digest: String,
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn tag(d: &Density) -> String {
    d.label().replace('/', "of")
}

/// Runs every stage into `out`. A directory holding a different config
/// digest is refused; artifacts of completed stages survive a failure.
pub fn run_experiment(cfg: &ExperimentConfig, out: impl AsRef<Path>, threads: usize) -> Result<RunSummary> {
    match cfg.train.precision {
        Precision::F32 => run_typed::<f32>(cfg, out.as_ref(), threads),
        Precision::F64 => run_typed::<f64>(cfg, out.as_ref(), threads),
    }
}

fn run_typed<T: Scalar>(cfg: &ExperimentConfig, out: &Path, threads: usize) -> Result<RunSummary> {
    let resolved = cfg.to_text();
    let digest = resolved.digest();
    std::fs::create_dir_all(out.join("models")).map_err(|e| Error::io(out, e))?;
    let digest_path = out.join("config.sha256");
    if let Ok(prev) = std::fs::read_to_string(&digest_path) {
        if prev.trim() != digest {
            return Err(Error::config(format!(
                "{} holds a run with config digest {}, refusing to mix it with {digest}",
                out.display(),
                prev.trim()
            )));
        }
    }
    write(&out.join("config.txt"), &resolved.to_string())?;
    write(&digest_path, &format!("{digest}\n"))?;
    write(
        &out.join("seeds.txt"),
        &format!(
            "dataset = {}\ntrain = {}\ntest_noise = {}\n",
            cfg.request.seed, cfg.train.seed, cfg.seed
        ),
    )?;

    let plan = DensityPlan::for_system(&cfg.system)?;
    let densities: Vec<Density> = cfg.densities.iter().map(|s| plan.parse(s)).collect::<Result<_>>()?;

    let ds = (|| {
        let ds = make_dataset(&cfg.system, &cfg.request, &plan.high)?;
        save_dataset(out.join("dataset"), &ds)?;
        Ok(ds)
    })()
    .map_err(|e: Error| e.in_stage("generate"))?;

    let data = source_data(&ds).map_err(|e| e.in_stage("train"))?;
    let mut scratch = Network::<T>::new("dacen");
    for d in &densities {
        let (m, run) = train_scratch::<T>(&data, d, &cfg.model, cfg.ablation, &cfg.train)
            .map_err(|e| e.in_stage(format!("train {}", d.label())))?;
        log::info!("dacen {}: best validation {:.5} at step {}", d.label(), run.best_val, run.best_iteration);
        save_model(out.join("models").join(format!("dacen-{}.dack", tag(d))), &m)?;
        write(&out.join(format!("trainlog-dacen-{}.csv", tag(d))), &run.to_csv())?;
        scratch = scratch.with(m);
    }

    let mut tf = Network::<T>::new("dacen+tf");
    if let Some(t) = &cfg.transfer {
        let lows: Vec<&Density> = densities.iter().filter(|d| d.sampler.is_some()).collect();
        if !lows.is_empty() {
            let high = plan.high();
            let source = match scratch.models.get(&high.n_pilots()) {
                Some(m) if t.source == cfg.train => m.clone(),
                _ => {
                    let (m, run) = train_scratch::<T>(&data, &high, &cfg.model, cfg.ablation, &t.source)
                        .map_err(|e| e.in_stage("transfer source"))?;
                    write(&out.join("trainlog-source.csv"), &run.to_csv())?;
                    m
                }
            };
            for d in lows {
                let sc = crate::transfer::SamplerConfig { s_th: t.s_th, ..d.sampler.expect("low density") };
                let o = transfer_from(&source, &data, &sc, &t.target).map_err(|e| e.in_stage(format!("transfer {}", d.label())))?;
                save_model(out.join("models").join(format!("dacen-tf-{}.dack", tag(d))), &o.model)?;
                write(&out.join(format!("trainlog-dacen-tf-{}.csv", tag(d))), &o.run.to_csv())?;
                write(&out.join(format!("weights-{}.csv", tag(d))), &o.extended.weights_csv())?;
                tf = tf.with(o.model);
            }
        }
    }

    let metrics = (|| {
        let ls = Ls { cfg: cfg.system.clone() };
        let lm = Lmmse::fit(&ds)?;
        let mut methods: Vec<&dyn Estimator> = vec![&ls, &lm, &scratch];
        if !tf.models.is_empty() {
            methods.push(&tf);
        }
        let rows = eval_sweep(&ds, &methods, &densities, &cfg.snrs, cfg.seed, threads)?;
        write(&out.join("metrics.csv"), &metrics_csv(&rows))?;
        for d in &densities {
            write(&out.join(format!("nmse-{}.svg", tag(d))), &nmse_svg(&d.label(), &rows))?;
        }
        Ok(rows)
    })()
    .map_err(|e: Error| e.in_stage("eval"))?;

    (|| {
        let n_l = densities.iter().map(Density::n_pilots).min().unwrap_or(plan.high.len());
        let rep = report(&DacenSpec { n_l, ..cfg.model.clone() }, &Variant::ALL)?;
        write(&out.join("complexity.csv"), &rep.to_csv())
    })()
    .map_err(|e: Error| e.in_stage("complexity"))?;

    Ok(RunSummary { out: out.to_path_buf(), metrics, digest })
}

/// Builds a fresh model for `spec`, used when no checkpoint is given.
pub fn fresh_model<T: Scalar>(spec: DacenSpec, ab: AblationSpec, seed: u64) -> Result<Dacen<T>> {
    Dacen::build(spec, ab, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_text_roundtrip() {
        let cfg = ExperimentConfig::desk(3);
        let back = ExperimentConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        let c = ConfigText::parse("[train]\nlearning_rate = 1").unwrap();
        assert!(ExperimentConfig::from_text(&c).is_err());
    }

    #[test]
    fn low_density_view_keeps_labels() {
        let cfg = SystemConfig::desk();
        let req = DatasetRequest { n_ue: 5, snapshots_per_ue: 2, val_ue: 1, test_ue: 1, snr_db: 10.0, seed: 2 };
        let plan = DensityPlan::for_system(&cfg).unwrap();
        let ds = make_dataset(&cfg, &req, &plan.high).unwrap();
        let data = source_data(&ds).unwrap();
        let low = at_density(&data, &plan.parse("2/8").unwrap()).unwrap();
        assert_eq!(low.train_labels, data.train_labels);
        assert!(low.train_pilots.iter().all(|p| p.rbs == vec![1, 5]));
        assert_eq!(low.train_pilots[0].y.get(0, 0, 1), data.train_pilots[0].y.get(0, 0, 5));
    }
}
