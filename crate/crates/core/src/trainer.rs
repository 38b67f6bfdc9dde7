//! Adam with decoupled weight decay, gradient accumulation, early stopping
//! and dataset evaluation.

use rand::seq::SliceRandom;

use crate::block::Dropout;
use crate::error::{Error, Result};
use crate::metrics::{self, FoldMetrics};
use crate::model::{Model, ModelParams, PatchBag, Prediction, TaskKind, Target};
use crate::par::{self, Exec};
use crate::synth::stream;
use crate::NumArray;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub accumulation_steps: usize,
    pub dropout_rate: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
            accumulation_steps: 32,
            dropout_rate: 0.0,
            patience: 10,
            max_epochs: 50,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be a nonnegative number, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0,1)".into());
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("eps must be positive and weight_decay nonnegative".into());
        }
        if self.accumulation_steps == 0 {
            return bad("accumulation_steps must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must lie in [0,1), got {}", self.dropout_rate));
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        Ok(())
    }
}

/// One Adam update of a flat parameter slice. `t` is the 1-based step.
/// Nothing is modified when a gradient entry is non-finite.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    cfg: &OptimConfig,
) -> Result<()> {
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(format!("entry {i} = {}", grads[i])));
    }
    if t == 0 {
        return Err(Error::Invalid("Adam step counter starts at 1".into()));
    }
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        params[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps) + cfg.lr * cfg.weight_decay * params[i];
    }
    Ok(())
}

/// Adam moments for every array of a [`ModelParams`].
#[derive(Clone, Debug)]
pub struct Adam {
    m: ModelParams,
    v: ModelParams,
    t: u64,
}

impl Adam {
    pub fn new(params: &ModelParams) -> Self {
        let zeros = params
            .try_map(|_, a| Ok::<_, Error>(NumArray::zeros(a.shape())))
            .expect("infallible");
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Apply `grads`; rejected as a whole when any entry is non-finite.
    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, cfg: &OptimConfig) -> Result<()> {
        for (name, g) in grads.named() {
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(name));
            }
        }
        self.t += 1;
        let gs: Vec<&NumArray> = grads.named().into_iter().map(|(_, g)| g).collect();
        let ps = params.values_mut();
        let ms = self.m.values_mut();
        let vs = self.v.values_mut();
        for (((p, g), m), v) in ps.into_iter().zip(gs).zip(ms).zip(vs) {
            adam_step(p.data_mut(), g.data(), m.data_mut(), v.data_mut(), self.t, cfg)?;
        }
        Ok(())
    }
}

/// Mean loss and mean gradient over `bags`, reduced in slice order.
/// `dropout_seeds[i]`, when given, seeds the dropout stream of bag `i`.
pub fn accumulate(
    model: &Model,
    bags: &[&PatchBag],
    dropout: Option<(f64, &[u64])>,
    exec: Exec,
) -> Result<(f64, ModelParams)> {
    if bags.is_empty() {
        return Err(Error::EmptyInput("gradient accumulation"));
    }
    let idx: Vec<usize> = (0..bags.len()).collect();
    let results = par::map(exec, &idx, |&i| {
        let bag = bags[i];
        let out = match dropout {
            Some((rate, seeds)) if rate > 0.0 => {
                let mut rng = stream(seeds[i], 0);
                model.loss_and_grad(bag, Some(Dropout { rate, rng: &mut rng }))
            }
            _ => model.loss_and_grad(bag, None),
        };
        match out {
            Ok((loss, _)) if !loss.is_finite() => Err(Error::Divergence { bag: bag.id.clone() }),
            Err(Error::Invalid(msg)) if msg.contains("non-finite") => Err(Error::Divergence { bag: bag.id.clone() }),
            other => other,
        }
    });
    let scale = 1.0 / bags.len() as f64;
    let mut total_loss = 0.0;
    let mut sum: Option<ModelParams> = None;
    for r in results {
        let (loss, g) = r?;
        total_loss += loss;
        match &mut sum {
            None => sum = Some(g),
            Some(s) => {
                for (acc, (_, x)) in s.values_mut().into_iter().zip(g.named()) {
                    acc.data_mut().iter_mut().zip(x.data()).for_each(|(a, b)| *a += b);
                }
            }
        }
    }
    let mut mean = sum.expect("non-empty");
    for a in mean.values_mut() {
        a.data_mut().iter_mut().for_each(|x| *x *= scale);
    }
    Ok((total_loss * scale, mean))
}

/// Predictions and metrics over a set of bags.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub predictions: Vec<Prediction>,
    pub acc: Option<f64>,
    pub auc: Option<f64>,
    pub c_index: Option<f64>,
}

impl Evaluation {
    /// Early-stopping score: AUC (ACC when undefined) or C-index
    /// (0.5 when undefined).
    pub fn selection_metric(&self, task: TaskKind) -> f64 {
        match task {
            TaskKind::Classification => self.auc.or(self.acc).unwrap_or(0.0),
            TaskKind::Survival => self.c_index.unwrap_or(0.5),
        }
    }

    pub fn fold_metrics(&self, fold: usize) -> FoldMetrics {
        FoldMetrics { fold, acc: self.acc, auc: self.auc, c_index: self.c_index }
    }
}

pub fn evaluate(model: &Model, bags: &[PatchBag], exec: Exec) -> Result<Evaluation> {
    if bags.is_empty() {
        return Err(Error::EmptyInput("evaluation"));
    }
    let predictions = par::map(exec, bags, |b| model.predict(b)).into_iter().collect::<Result<Vec<_>>>()?;
    evaluation_from(predictions, bags)
}

/// Metrics of precomputed predictions; undefined metrics are absent.
pub fn evaluation_from(predictions: Vec<Prediction>, bags: &[PatchBag]) -> Result<Evaluation> {
    let mut ev = Evaluation { predictions, acc: None, auc: None, c_index: None };
    match bags[0].target {
        Target::Class(_) => {
            let labels: Vec<usize> = bags.iter().map(|b| b.label().ok_or(Error::Invalid("mixed targets".into()))).collect::<Result<_>>()?;
            let probs: Vec<Vec<f64>> = ev
                .predictions
                .iter()
                .map(|p| p.probs().map(<[f64]>::to_vec).ok_or(Error::Invalid("expected class probabilities".into())))
                .collect::<Result<_>>()?;
            ev.acc = Some(metrics::accuracy(&probs, &labels)?);
            ev.auc = optional(metrics::auc_ovr(&probs, &labels))?;
        }
        Target::Survival { .. } => {
            let mut risks = Vec::new();
            let mut times = Vec::new();
            let mut events = Vec::new();
            for (p, b) in ev.predictions.iter().zip(bags) {
                let (Some(r), Target::Survival { time, event }) = (p.risk(), &b.target) else {
                    return Err(Error::Invalid("mixed targets".into()));
                };
                risks.push(r);
                times.push(*time);
                events.push(*event);
            }
            ev.c_index = optional(metrics::c_index(&risks, &times, &events))?;
        }
    }
    Ok(ev)
}

fn optional(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(x) => Ok(Some(x)),
        Err(Error::UndefinedMetric(msg)) => {
            log::debug!("metric undefined: {msg}");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
    pub val_loss: f64,
    pub best: bool,
}

impl EpochLog {
    pub fn line(&self) -> String {
        format!(
            "epoch {}\ttrain_loss {:.6}\tval_metric {:.6}\tval_loss {:.6}\tbest {}",
            self.epoch,
            self.train_loss,
            self.val_metric,
            self.val_loss,
            if self.best { "yes" } else { "no" }
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    /// Parameters of the best-validation epoch.
    pub model: Model,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_metric: f64,
}

/// Mean inference loss over `bags`.
pub fn mean_loss(model: &Model, bags: &[PatchBag], exec: Exec) -> Result<f64> {
    let losses = par::map(exec, bags, |b| model.loss(b)).into_iter().collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / bags.len().max(1) as f64)
}

/// Train on `train`, selecting parameters by the validation metric.
pub fn train(mut model: Model, train: &[PatchBag], val: &[PatchBag], cfg: &OptimConfig, exec: Exec) -> Result<TrainOutput> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyInput("training needs non-empty train and validation sets"));
    }
    let task = model.config.task;
    let mut adam = Adam::new(&model.params);
    let mut shuffle_rng = stream(cfg.seed, 1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::new();
    let mut best: Option<(usize, f64, f64, ModelParams)> = None;
    let mut since_best = 0;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for (w, window) in order.chunks(cfg.accumulation_steps).enumerate() {
            let bags: Vec<&PatchBag> = window.iter().map(|&i| &train[i]).collect();
            let seeds: Vec<u64> = (0..window.len())
                .map(|j| cfg.seed ^ ((epoch as u64) << 40) ^ ((w * cfg.accumulation_steps + j) as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
                .collect();
            let (loss, grads) = accumulate(&model, &bags, Some((cfg.dropout_rate, &seeds)), exec)?;
            loss_sum += loss * window.len() as f64;
            adam.step(&mut model.params, &grads, cfg)?;
        }
        let val_metric = evaluate(&model, val, exec)?.selection_metric(task);
        let val_loss = mean_loss(&model, val, exec)?;
        // equal metrics (a saturated AUC, say) fall back to the lower loss
        let improved = best
            .as_ref()
            .is_none_or(|(_, m, l, _)| val_metric > *m || (val_metric == *m && val_loss < *l));
        if improved {
            best = Some((epoch, val_metric, val_loss, model.params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
        }
        let entry = EpochLog { epoch, train_loss: loss_sum / train.len() as f64, val_metric, val_loss, best: improved };
        log::info!("{}", entry.line());
        log.push(entry);
        if since_best >= cfg.patience {
            break;
        }
    }
    let (best_epoch, best_metric, _, params) = best.expect("at least one epoch");
    model.params = params;
    Ok(TrainOutput { model, log, best_epoch, best_metric })
}
