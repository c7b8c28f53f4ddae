use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dacen::chansim::{make_dataset, DatasetRequest, SystemConfig};
use dacen::complexity::{report, Convention};
use dacen::dacen::{AblationSpec, DacenSpec, Variant};
use dacen::domainxform::nmse_db;
use dacen::harness::experiment::{read_train, source_data, train_scratch, worker_threads, ExperimentConfig};
use dacen::harness::store::{load_dataset, load_model, read_model_spec, save_dataset, save_model};
use dacen::harness::sweep::{eval_sweep, metrics_csv, test_pilots, Density, DensityPlan, Estimator, Lmmse, Ls, Network};
use dacen::harness::{plot, ConfigText};
use dacen::tensor::{Precision, Scalar};
use dacen::training::TrainConfig;
use dacen::transfer::{transfer_from, SamplerConfig};
use dacen::{Error, Result};

#[derive(Parser)]
#[command(name = "dacen", version, about = "Dual-attention channel estimation experiments")]
struct Cli {
    /// Single worker thread everywhere.
    #[arg(long, global = true)]
    deterministic: bool,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate channels and pilots into a dataset directory.
    Generate(GenerateArgs),
    /// Train a network from scratch on a dataset.
    Train(TrainArgs),
    /// Source training, neighbour sampling and target training.
    Transfer(TransferArgs),
    /// Sweep methods over densities and SNRs.
    Eval(EvalArgs),
    /// NMSE of a classical estimator.
    Baseline(BaselineArgs),
    /// FLOP and parameter tables.
    Complexity(ComplexityArgs),
    /// Full pipeline from a config file.
    Run(RunArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value = "desk")]
    preset: String,
    #[arg(long)]
    n_ue: Option<usize>,
    #[arg(long)]
    snapshots: Option<usize>,
    #[arg(long)]
    val_ue: Option<usize>,
    #[arg(long)]
    test_ue: Option<usize>,
    /// Defaults to the high density of the preset.
    #[arg(long)]
    density: Option<String>,
    #[arg(long, default_value_t = 10.0)]
    snr_db: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// `[model]` and `[train]` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    variant: Option<String>,
    /// Carve a lower density out of the stored pilots.
    #[arg(long)]
    density: Option<String>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TransferArgs {
    #[arg(long)]
    source_dataset: PathBuf,
    #[arg(long)]
    r0: usize,
    #[arg(long)]
    spacing: usize,
    #[arg(long)]
    n_low: usize,
    #[arg(long, default_value_t = 0.9)]
    sth: f64,
    #[arg(long)]
    source_config: Option<PathBuf>,
    #[arg(long)]
    target_config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// `PATH` or `NAME=PATH`; models sharing a name form one method.
    #[arg(long = "model")]
    models: Vec<String>,
    /// Comma-separated; defaults to every density a model was trained for.
    #[arg(long, value_delimiter = ',')]
    density: Vec<String>,
    #[arg(long, value_delimiter = ',', default_values_t = [5.0, 10.0, 15.0, 20.0, 25.0])]
    snr_db: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long)]
    method: String,
    #[arg(long)]
    density: String,
    #[arg(long, default_value_t = 10.0)]
    snr_db: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    dataset: PathBuf,
}

#[derive(Args)]
struct ComplexityArgs {
    #[arg(long, default_value = "paper")]
    preset: String,
    /// One variant, or all of them.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long, default_value = "both")]
    convention: String,
    /// Pilot RBs at the input.
    #[arg(long, default_value_t = 6)]
    n_l: usize,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn load_config(path: Option<&Path>) -> Result<ConfigText> {
    path.map(ConfigText::load).transpose().map(Option::unwrap_or_default)
}

fn generate(a: GenerateArgs) -> Result<()> {
    let cfg = SystemConfig::preset(&a.preset)?;
    let base = if a.preset == "desk" { DatasetRequest::desk(a.seed) } else { DatasetRequest { n_ue: 1000, snapshots_per_ue: 10, val_ue: 50, test_ue: 200, snr_db: 10.0, seed: a.seed } };
    let req = DatasetRequest {
        n_ue: a.n_ue.unwrap_or(base.n_ue),
        snapshots_per_ue: a.snapshots.unwrap_or(base.snapshots_per_ue),
        val_ue: a.val_ue.unwrap_or(base.val_ue),
        test_ue: a.test_ue.unwrap_or(base.test_ue),
        snr_db: a.snr_db,
        seed: a.seed,
    };
    let plan = DensityPlan::for_system(&cfg)?;
    let density = a.density.as_deref().map(|d| plan.parse(d)).transpose()?.unwrap_or_else(|| plan.high());
    let ds = make_dataset(&cfg, &req, &density.pattern)?;
    save_dataset(&a.out, &ds)?;
    println!("{} samples at density {} written to {}", ds.len(), density.label(), a.out.display());
    Ok(())
}

fn dataset_density(ds: &dacen::chansim::DatasetBundle, requested: Option<&str>) -> Result<Density> {
    let own = Density { pattern: ds.pattern.clone(), sampler: None };
    let Some(s) = requested else { return Ok(own) };
    let plan = DensityPlan::for_system(&ds.cfg)?;
    let d = plan.parse(s)?;
    if d.pattern == ds.pattern {
        return Ok(own);
    }
    if ds.pattern != plan.high {
        return Err(Error::config(format!(
            "density {s} can only be carved from a high-density dataset, this one holds {}",
            own.label()
        )));
    }
    Ok(d)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let c = load_config(a.config.as_deref())?;
    let ds = load_dataset(&a.dataset)?;
    let density = dataset_density(&ds, a.density.as_deref())?;
    let (spec, mut ab) = read_model_spec(&c, "model", density.n_pilots())?;
    if let Some(v) = &a.variant {
        ab.variant = Variant::parse(v)?;
    }
    let mut cfg = read_train(&c, "train", TrainConfig::desk())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.iterations {
        cfg.iterations = n;
    }
    mkdir(&a.out)?;
    let data = source_data(&ds)?;
    fn go<T: Scalar>(data: &dacen::transfer::SourceData, d: &Density, spec: &DacenSpec, ab: AblationSpec, cfg: &TrainConfig, out: &Path) -> Result<()> {
        let (m, run) = train_scratch::<T>(data, d, spec, ab, cfg)?;
        save_model(out.join("model.dack"), &m)?;
        write(&out.join("trainlog.csv"), &run.to_csv())?;
        println!("best validation MSE {:.6} at step {} ({:.1?})", run.best_val, run.best_iteration, run.elapsed);
        Ok(())
    }
    match cfg.precision {
        Precision::F32 => go::<f32>(&data, &density, &spec, ab, &cfg, &a.out),
        Precision::F64 => go::<f64>(&data, &density, &spec, ab, &cfg, &a.out),
    }
}

fn transfer_cmd(a: TransferArgs) -> Result<()> {
    let ds = load_dataset(&a.source_dataset)?;
    let sc = SamplerConfig { r0: a.r0, spacing: a.spacing, n_low: a.n_low, s_th: a.sth };
    sc.validate(ds.pattern.len())?;
    let src_c = load_config(a.source_config.as_deref())?;
    let tgt_c = load_config(a.target_config.as_deref())?;
    let (spec, ab) = read_model_spec(&src_c, "model", ds.pattern.len())?;
    let mut source_cfg = read_train(&src_c, "train", TrainConfig::desk())?;
    let mut target_cfg = read_train(&tgt_c, "train", TrainConfig::desk())?;
    if let Some(s) = a.seed {
        source_cfg.seed = s;
        target_cfg.seed = s;
    }
    if source_cfg.precision != target_cfg.precision {
        return Err(Error::config("source and target configs must use the same precision"));
    }
    mkdir(&a.out)?;
    let data = source_data(&ds)?;
    let high = Density { pattern: ds.pattern.clone(), sampler: None };
    fn go<T: Scalar>(
        data: &dacen::transfer::SourceData,
        high: &Density,
        spec: &DacenSpec,
        ab: AblationSpec,
        sc: &SamplerConfig,
        (scfg, tcfg): (&TrainConfig, &TrainConfig),
        out: &Path,
    ) -> Result<()> {
        let (source, srun) = train_scratch::<T>(data, high, spec, ab, scfg).map_err(|e| e.in_stage("source"))?;
        save_model(out.join("source.dack"), &source)?;
        write(&out.join("trainlog-source.csv"), &srun.to_csv())?;
        let o = transfer_from(&source, data, sc, tcfg).map_err(|e| e.in_stage("target"))?;
        save_model(out.join("target.dack"), &o.model)?;
        write(&out.join("trainlog-target.csv"), &o.run.to_csv())?;
        write(&out.join("weights.csv"), &o.extended.weights_csv())?;
        println!(
            "{} target samples, {:.1}% of neighbours kept, {} tensors copied from the source",
            o.extended.len(),
            100.0 * o.extended.neighbor_inclusion(),
            o.copied.len()
        );
        Ok(())
    }
    let cfgs = (&source_cfg, &target_cfg);
    match source_cfg.precision {
        Precision::F32 => go::<f32>(&data, &high, &spec, ab, &sc, cfgs, &a.out),
        Precision::F64 => go::<f64>(&data, &high, &spec, ab, &sc, cfgs, &a.out),
    }
}

fn eval_cmd(a: EvalArgs, threads: usize) -> Result<()> {
    let ds = load_dataset(&a.dataset)?;
    let plan = DensityPlan::for_system(&ds.cfg)?;
    let mut nets: Vec<Network<f32>> = Vec::new();
    for spec in &a.models {
        let (name, path) = spec.split_once('=').unwrap_or(("dacen", spec.as_str()));
        let m = load_model::<f32>(path)?;
        match nets.iter_mut().find(|n| n.name == name) {
            Some(n) => {
                n.models.insert(m.spec().n_l, m);
            }
            None => nets.push(Network::new(name).with(m)),
        }
    }
    let densities: Vec<Density> = if a.density.is_empty() {
        let mut ks: Vec<usize> = nets.iter().flat_map(|n| n.models.keys().copied()).collect();
        if ks.is_empty() {
            ks.push(plan.high.len());
        }
        ks.sort_unstable_by(|a, b| b.cmp(a));
        ks.dedup();
        ks.into_iter().map(|k| plan.density(k)).collect::<Result<_>>()?
    } else {
        a.density.iter().map(|s| plan.parse(s)).collect::<Result<_>>()?
    };
    let ls = Ls { cfg: ds.cfg.clone() };
    let lm = Lmmse::fit(&ds)?;
    let mut methods: Vec<&dyn Estimator> = vec![&ls, &lm];
    methods.extend(nets.iter().map(|n| n as &dyn Estimator));
    let rows = eval_sweep(&ds, &methods, &densities, &a.snr_db, a.seed, threads)?;
    mkdir(&a.out)?;
    let csv = metrics_csv(&rows);
    write(&a.out.join("metrics.csv"), &csv)?;
    for d in &densities {
        write(&a.out.join(format!("nmse-{}.svg", d.label().replace('/', "of"))), &plot::nmse_svg(&d.label(), &rows))?;
    }
    print!("{csv}");
    Ok(())
}

fn baseline_cmd(a: BaselineArgs) -> Result<()> {
    let ds = load_dataset(&a.dataset)?;
    let plan = DensityPlan::for_system(&ds.cfg)?;
    let density = plan.parse(&a.density)?;
    let est: Box<dyn Estimator> = match a.method.as_str() {
        "ls" => Box::new(Ls { cfg: ds.cfg.clone() }),
        "lmmse" => Box::new(Lmmse::fit(&ds)?),
        other => return Err(Error::config(format!("unknown baseline `{other}` (expected ls or lmmse)"))),
    };
    let pilots = test_pilots(&ds, &density, a.snr_db, a.seed)?;
    let labels: Vec<_> = ds.indices(dacen::chansim::Split::Test).iter().map(|&i| ds.labels[i].clone()).collect();
    let out = est.estimate(&density, a.snr_db, &pilots)?.unwrap_or_default();
    println!("{} density {} snr {} dB: NMSE {:.3} dB over {} samples", a.method, density.label(), a.snr_db, nmse_db(&labels, &out)?, labels.len());
    Ok(())
}

fn complexity_cmd(a: ComplexityArgs) -> Result<()> {
    let spec = DacenSpec::preset(&a.preset, a.n_l)?;
    let variants = match &a.variant {
        Some(v) => vec![Variant::parse(v)?],
        None => Variant::ALL.to_vec(),
    };
    let conventions = match a.convention.as_str() {
        "both" => vec![Convention::Paper, Convention::Full],
        c => vec![Convention::parse(c)?],
    };
    let rep = report(&spec, &variants)?;
    print!("{}", rep.to_text(&conventions));
    if let Some(path) = &a.csv {
        write(path, &rep.to_csv())?;
    }
    Ok(())
}

fn run_cmd(a: RunArgs, threads: usize) -> Result<()> {
    let cfg = ExperimentConfig::from_text(&ConfigText::load(&a.config)?)?;
    let summary = dacen::harness::run_experiment(&cfg, &a.out, threads)?;
    print!("{}", metrics_csv(&summary.metrics));
    println!("config digest {}", summary.digest);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let threads = worker_threads(cli.deterministic);
    let res = match cli.cmd {
        Cmd::Generate(a) => generate(a),
        Cmd::Train(a) => train_cmd(a),
        Cmd::Transfer(a) => transfer_cmd(a),
        Cmd::Eval(a) => eval_cmd(a, threads),
        Cmd::Baseline(a) => baseline_cmd(a),
        Cmd::Complexity(a) => complexity_cmd(a),
        Cmd::Run(a) => run_cmd(a, threads),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
