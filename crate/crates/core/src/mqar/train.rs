use std::f64::consts::PI;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::Example;
use super::model::{is_no_decay, MixPath, Params, TinyModel};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub eval_every: usize,
    /// Stop once held-out accuracy reaches this value.
    pub stop_at: Option<f64>,
    pub seed: u64,
}

/// 3000 steps of batch 64 at peak learning rate 3e-3, 100 warmup steps,
/// cosine decay, weight decay 0.1 and gradient clipping at 1.
impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 64,
            lr: 3e-3,
            weight_decay: 0.1,
            warmup_steps: 100,
            grad_clip: Some(1.0),
            eval_every: 100,
            stop_at: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::InvalidConfig("batch_size and eval_every must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig("lr must be > 0 and weight_decay >= 0".into()));
        }
        Ok(())
    }
}

/// Linear warmup, then cosine decay to zero at `total`.
pub fn cosine_lr(step: usize, total: usize, warmup: usize, base: f64) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    0.5 * base * (1.0 + (PI * progress).cos())
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Params,
    v: Params,
    decay_mask: Vec<bool>,
    t: i32,
}

impl AdamW {
    pub fn new(params: &Params, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: params.zeros_like(),
            v: params.zeros_like(),
            decay_mask: params.tensors().iter().map(|(n, _)| !is_no_decay(n)).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &Params, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let tensors = params.tensors_mut().into_iter().zip(grads.tensors());
        let moments = self.m.tensors_mut().into_iter().zip(self.v.tensors_mut());
        for (((p, (_, g)), (m, v)), decay) in tensors.zip(moments).zip(&self.decay_mask) {
            let wd = if *decay { self.weight_decay } else { 0.0 };
            for (((p, g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= lr * (wd * *p + (*m / c1) / ((*v / c2).sqrt() + self.eps));
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    /// Mean training loss since the previous point.
    pub loss: f64,
    /// Held-out accuracy at this step.
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TrainStatus {
    Completed,
    EarlyStopped,
    Diverged { step: usize, loss: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub curve: Vec<CurvePoint>,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub steps_run: usize,
    pub status: TrainStatus,
    pub seconds: f64,
}

fn global_norm(grads: &Params) -> f64 {
    grads.tensors().iter().map(|(_, t)| t.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt()
}

/// Mini-batch AdamW on `data`, evaluating on `eval` every `eval_every`
/// steps and at the end. A non-finite loss ends the run with
/// [`TrainStatus::Diverged`].
pub fn train(model: &mut TinyModel, data: &[Example], eval: &[Example], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(&model.params, cfg.weight_decay);
    let mut curve = Vec::new();
    let mut loss_acc = 0.0;
    let mut loss_n = 0usize;
    let mut status = TrainStatus::Completed;
    let mut steps_run = 0;
    let mut last_eval = None;

    for step in 0..cfg.steps {
        let batch: Vec<&Example> = (0..cfg.batch_size).map(|_| &data[rng.gen_range(0..data.len())]).collect();
        let (stats, mut grads) = model.loss_and_grad(&batch)?;
        steps_run = step + 1;
        if !stats.loss.is_finite() {
            status = TrainStatus::Diverged { step, loss: stats.loss };
            break;
        }
        if let Some(clip) = cfg.grad_clip {
            let norm = global_norm(&grads);
            if norm > clip {
                grads.tensors_mut().into_iter().for_each(|t| t.scale(clip / norm));
            }
        }
        opt.step(&mut model.params, &grads, cosine_lr(step, cfg.steps, cfg.warmup_steps, cfg.lr));
        loss_acc += stats.loss;
        loss_n += 1;

        if steps_run % cfg.eval_every == 0 || steps_run == cfg.steps {
            let accuracy = model.evaluate(eval, MixPath::Sequential)?.accuracy();
            curve.push(CurvePoint {
                step: steps_run,
                loss: loss_acc / loss_n as f64,
                accuracy,
            });
            last_eval = Some(steps_run);
            (loss_acc, loss_n) = (0.0, 0);
            if cfg.stop_at.is_some_and(|target| accuracy >= target) {
                status = TrainStatus::EarlyStopped;
                break;
            }
        }
    }
    if last_eval != Some(steps_run) && !matches!(status, TrainStatus::Diverged { .. }) {
        let accuracy = model.evaluate(eval, MixPath::Sequential)?.accuracy();
        curve.push(CurvePoint {
            step: steps_run,
            loss: if loss_n > 0 { loss_acc / loss_n as f64 } else { f64::NAN },
            accuracy,
        });
    }
    let final_accuracy = curve.last().map_or(0.0, |p| p.accuracy);
    let best_accuracy = curve.iter().map(|p| p.accuracy).fold(0.0, f64::max);
    Ok(TrainReport {
        curve,
        final_accuracy,
        best_accuracy,
        steps_run,
        status,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// `step,loss,accuracy` with 17 significant digits.
pub fn write_curve_csv(curve: &[CurvePoint], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "loss", "accuracy"])?;
    for p in curve {
        w.write_record([p.step.to_string(), crate::format_f64(p.loss), crate::format_f64(p.accuracy)])?;
    }
    w.flush()?;
    Ok(())
}
