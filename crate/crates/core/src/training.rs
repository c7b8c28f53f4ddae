//! Mini-batch Adam training with validation-based model selection.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ctensor::ComplexTensor3;
use crate::dacen::Dacen;
use crate::error::{Error, Result};
use crate::tensor::{AdamConfig, AdamState, ParamStore, Precision, Scalar, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Cosine decay to zero over the iteration budget.
    Cosine,
}

impl LrSchedule {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Self::Constant),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::config(format!("unknown learning-rate schedule `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Constant => "constant",
            Self::Cosine => "cosine",
        }
    }

    fn factor(self, step: usize, total: usize) -> f64 {
        match self {
            Self::Constant => 1.0,
            Self::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total.max(1) as f64).cos()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    /// Optimizer steps.
    pub iterations: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Steps between validation passes; the final step is always validated.
    pub val_interval: usize,
    pub schedule: LrSchedule,
}

impl TrainConfig {
    /// Batch 256, learning rate 6e-5.
    pub fn paper() -> Self {
        Self {
            batch_size: 256,
            lr: 6e-5,
            iterations: 20_000,
            seed: 0,
            precision: Precision::F32,
            val_interval: 500,
            schedule: LrSchedule::Constant,
        }
    }

    pub fn desk() -> Self {
        Self {
            batch_size: 32,
            lr: 1e-3,
            iterations: 8000,
            seed: 0,
            precision: Precision::F32,
            val_interval: 100,
            schedule: LrSchedule::Cosine,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("learning rate must be finite and non-negative"));
        }
        if self.val_interval == 0 {
            return Err(Error::config("validation interval must be positive"));
        }
        Ok(())
    }
}

/// Flattened network inputs and targets with optional per-sample weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainData<T> {
    pub inputs: Vec<T>,
    pub targets: Vec<T>,
    pub weights: Option<Vec<T>>,
    /// Stable sample identifiers, used to assert split disjointness.
    pub ids: Vec<u64>,
    pub in_width: usize,
    pub out_width: usize,
}

impl<T: Scalar> TrainData<T> {
    pub fn from_samples(pilots: &[ComplexTensor3], labels: &[ComplexTensor3], ids: Vec<u64>, weights: Option<Vec<f64>>) -> Result<Self> {
        if pilots.len() != labels.len() || ids.len() != labels.len() {
            return Err(Error::shape("TrainData", &[pilots.len()], &[labels.len(), ids.len()]));
        }
        if pilots.is_empty() {
            return Err(Error::data("training data", "no samples"));
        }
        if let Some(w) = &weights {
            if w.len() != labels.len() {
                return Err(Error::shape("TrainData weights", &[w.len()], &[labels.len()]));
            }
            if w.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::data("training data", "instance weights must be positive"));
            }
        }
        let [nr, nt, nl] = pilots[0].dims();
        let [lr, lt, np] = labels[0].dims();
        if (nr, nt) != (lr, lt) {
            return Err(Error::shape("TrainData antennas", &pilots[0].dims(), &labels[0].dims()));
        }
        let mut inputs = Vec::with_capacity(pilots.len() * nr * nt * nl * 2);
        let mut targets = Vec::with_capacity(labels.len() * nr * nt * np * 2);
        for (p, l) in pilots.iter().zip(labels) {
            if p.dims() != pilots[0].dims() || l.dims() != labels[0].dims() {
                return Err(Error::shape("TrainData sample", &p.dims(), &l.dims()));
            }
            inputs.extend(p.to_im_re().into_iter().map(T::from_f64_lossy));
            targets.extend(l.to_im_re().into_iter().map(T::from_f64_lossy));
        }
        Ok(Self {
            inputs,
            targets,
            weights: weights.map(|w| w.into_iter().map(T::from_f64_lossy).collect()),
            ids,
            in_width: nr * nt * nl * 2,
            out_width: nr * nt * np * 2,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Mean (optionally weighted) squared error per sample, computed outside the tape.
pub fn mse_loss<T: Scalar>(pred: &[T], label: &[T], batch: usize, weights: Option<&[T]>) -> Result<f64> {
    if pred.len() != label.len() || batch == 0 || pred.len() % batch != 0 {
        return Err(Error::shape("mse_loss", &[pred.len()], &[label.len()]));
    }
    if let Some(w) = weights {
        if w.len() != batch {
            return Err(Error::shape("mse_loss weights", &[batch], &[w.len()]));
        }
        if w.iter().any(|&v| !(v > T::zero())) {
            return Err(Error::data("mse_loss", "weights must be positive"));
        }
    }
    let per = pred.len() / batch;
    let total: f64 = (0..batch)
        .map(|i| {
            let w = weights.map_or(1.0, |w| w[i].to_f64_lossy());
            let s: f64 = pred[i * per..(i + 1) * per]
                .iter()
                .zip(&label[i * per..(i + 1) * per])
                .map(|(&p, &t)| (t - p).to_f64_lossy().powi(2))
                .sum();
            w * s
        })
        .sum();
    Ok(total / batch as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogEntry {
    pub iteration: usize,
    pub train_mse: f64,
    /// Present on validation steps.
    pub val_mse: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub log: Vec<LogEntry>,
    pub best_iteration: usize,
    pub best_val: f64,
    pub initial_val: f64,
    pub elapsed: Duration,
    pub seed: u64,
}

impl TrainRun {
    /// `iteration,train_mse,val_mse` rows; the validation column is empty
    /// between validation steps.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,train_mse,val_mse\n");
        for e in &self.log {
            let v = e.val_mse.map(|v| format!("{v:.9e}")).unwrap_or_default();
            s.push_str(&format!("{},{:.9e},{}\n", e.iteration, e.train_mse, v));
        }
        s
    }

    pub fn train_losses(&self) -> Vec<f64> {
        self.log.iter().map(|e| e.train_mse).collect()
    }
}

pub fn evaluate<T: Scalar>(model: &Dacen<T>, data: &TrainData<T>) -> Result<f64> {
    let pred = model.predict(&data.inputs, 64)?;
    mse_loss(&pred, &data.targets, data.len(), data.weights.as_deref())
}

/// Trains in place and leaves the model at the best validated parameters.
pub fn train<T: Scalar>(model: &mut Dacen<T>, train: &TrainData<T>, val: &TrainData<T>, cfg: &TrainConfig) -> Result<TrainRun> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::data("training", "train and validation sets must be non-empty"));
    }
    let spec = model.spec();
    let in_w = spec.antenna_pairs() * 2 * spec.n_l;
    let out_w = spec.antenna_pairs() * 2 * spec.n_p;
    for (what, d) in [("train", train), ("validation", val)] {
        if d.in_width != in_w || d.out_width != out_w {
            return Err(Error::data(
                format!("{what} set"),
                format!("sample widths {}/{} do not fit the model ({in_w}/{out_w})", d.in_width, d.out_width),
            ));
        }
    }
    if let Some(id) = val.ids.iter().find(|id| train.ids.contains(id)) {
        return Err(Error::data("validation set", format!("sample {id} is also in the training set")));
    }

    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(model.params(), AdamConfig::with_lr(cfg.lr));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let bs = cfg.batch_size.min(train.len());
    let (s, n_l) = (spec.antenna_pairs(), spec.n_l);

    let initial_val = evaluate(model, val)?;
    let mut best: (ParamStore<T>, usize, f64) = (model.params().clone(), 0, initial_val);
    let mut log = Vec::with_capacity(cfg.iterations);
    let mut xb = Vec::with_capacity(bs * in_w);
    let mut yb = Vec::with_capacity(bs * out_w);
    let mut wb = Vec::with_capacity(bs);

    for it in 1..=cfg.iterations {
        if cursor + bs > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        xb.clear();
        yb.clear();
        wb.clear();
        for &i in &order[cursor..cursor + bs] {
            xb.extend_from_slice(&train.inputs[i * in_w..(i + 1) * in_w]);
            yb.extend_from_slice(&train.targets[i * out_w..(i + 1) * out_w]);
            wb.push(train.weights.as_ref().map_or(T::one(), |w| w[i]));
        }
        cursor += bs;

        let mut tape = Tape::new();
        let vars = model.params().bind(&mut tape);
        let x = tape.constant(Tensor::from_parts(vec![bs, s, 2 * n_l], xb.clone()));
        let y = model.forward(&mut tape, &vars, x)?;
        let weights = train.weights.as_ref().map(|_| wb.as_slice());
        let loss = tape.mse_loss(y, &yb, weights)?;
        let lv = tape.value(loss)[0].to_f64_lossy();
        if !lv.is_finite() {
            model.params_mut().clone_from(&best.0);
            log::error!("non-finite loss at step {it}; restored parameters from step {}", best.1);
            return Err(Error::NonFiniteLoss { iteration: it });
        }
        let mut grads = tape.backward(loss)?;
        let g: Vec<Vec<T>> = vars
            .iter()
            .zip(model.params().iter())
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| vec![T::zero(); p.value.numel()]))
            .collect();
        adam.config.lr = cfg.lr * cfg.schedule.factor(it - 1, cfg.iterations);
        if let Err(e) = adam.step(model.params_mut(), &g) {
            model.params_mut().clone_from(&best.0);
            return Err(e);
        }

        let val_mse = if it % cfg.val_interval == 0 || it == cfg.iterations {
            let v = evaluate(model, val)?;
            log::debug!("step {it}: train {lv:.5} val {v:.5}");
            if v < best.2 {
                best = (model.params().clone(), it, v);
            }
            Some(v)
        } else {
            None
        };
        log.push(LogEntry { iteration: it, train_mse: lv, val_mse });
    }
    let (params, best_iteration, best_val) = best;
    *model.params_mut() = params;
    Ok(TrainRun { log, best_iteration, best_val, initial_val, elapsed: start.elapsed(), seed: cfg.seed })
}
