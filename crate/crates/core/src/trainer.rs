//! Training loop: episode sampling, noising, joint-loss gradients, Adam with
//! warmup and cosine decay, gradient accumulation and checkpointing.

use std::f64::consts::PI;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{BinaryMask, LongitudinalCase};
use crate::denoiser::{
    assemble_input, ActivationCache, Checkpoint, Denoiser, OptimizerState, TreatmentDayPair,
    MASK_SESSIONS,
};
use crate::diffusion::{forward_sample, ImageTensor, NoiseDraw, Shape};
use crate::error::{Error, Result};
use crate::losses::{joint_loss_from_logits, weight_map, LossConfig};
use crate::rng::{child_seed, seeded, Rng};
use crate::schedule::ScheduleTable;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_peak: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    /// Episodes per micro-batch.
    pub batch_size: usize,
    pub accum_steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_peak: 2.5e-4,
            warmup_steps: 1000,
            total_steps: 5000,
            batch_size: 32,
            accum_steps: 2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_peak >= 0.0 && self.lr_peak.is_finite()) {
            return Err(Error::config("train.lr_peak", "must be finite and >= 0"));
        }
        if self.total_steps == 0 {
            return Err(Error::config("train.total_steps", "must be at least 1"));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(Error::config("train.warmup_steps", "must be below train.total_steps"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if self.accum_steps == 0 {
            return Err(Error::config("train.accum_steps", "must be at least 1"));
        }
        Ok(())
    }

    pub fn episodes_per_step(&self) -> usize {
        self.batch_size * self.accum_steps
    }
}

/// Linear warmup from 0 to `lr_peak`, then cosine decay to 0 at `total_steps`.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(Error::Argument(format!(
            "step {step} beyond total_steps {}",
            cfg.total_steps
        )));
    }
    if step < cfg.warmup_steps {
        return Ok(cfg.lr_peak * step as f64 / cfg.warmup_steps as f64);
    }
    let span = (cfg.total_steps - cfg.warmup_steps) as f64;
    let progress = (step - cfg.warmup_steps) as f64 / span;
    Ok(cfg.lr_peak * 0.5 * (1.0 + (PI * progress).cos()))
}

/// One Adam update with bias correction.
pub fn adam_update(params: &mut [f64], grad: &[f64], state: &mut OptimizerState, lr: f64) {
    state.updates += 1;
    let k = state.updates as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(k);
    let c2 = 1.0 - ADAM_BETA2.powi(k);
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let mhat = state.m[i] / c1;
        let vhat = state.v[i] / c2;
        params[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
    }
}

/// Three sorted source sessions and a later target session of one case.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub case_id: String,
    /// Zero-based session indices `s1, s2, s3, f`.
    pub indices: [usize; 4],
    pub source_images: [ImageTensor; 3],
    pub source_masks: [BinaryMask; 3],
    pub target_image: ImageTensor,
    pub target_mask: BinaryMask,
    pub pairs: [TreatmentDayPair; 4],
}

impl Episode {
    /// Builds an episode from explicit zero-based session indices.
    pub fn from_indices(case: &LongitudinalCase, indices: [usize; 4]) -> Result<Self> {
        let l = case.len();
        let [s1, s2, s3, f] = indices;
        if f >= l || !(s1 <= s2 && s2 <= s3 && s3 < f) {
            return Err(Error::Argument(format!(
                "episode indices {indices:?} invalid for {l} sessions"
            )));
        }
        let s = |i: usize| &case.sessions[i];
        let pair = |i: usize| TreatmentDayPair::new(s(i).treatment, s(i).day);
        Ok(Self {
            case_id: case.case_id.clone(),
            indices,
            source_images: [s1, s2, s3].map(|i| s(i).image.clone()),
            source_masks: [s1, s2, s3].map(|i| s(i).mask.clone()),
            target_image: s(f).image.clone(),
            target_mask: s(f).mask.clone(),
            pairs: [pair(s1), pair(s2), pair(s3), pair(f)],
        })
    }

    /// Ground-truth masks stacked as `4 x H x W`.
    pub fn gt_masks(&self) -> ImageTensor {
        let m = &self.target_mask;
        let mut data = Vec::with_capacity(MASK_SESSIONS * m.area().max(1));
        for s in self.source_masks.iter().chain(std::iter::once(m)) {
            data.extend(s.to_f64());
        }
        ImageTensor::new(Shape::new(MASK_SESSIONS, m.height(), m.width()), data)
            .expect("masks share one plane")
    }
}

/// Draws sorted sources with replacement from sessions `1..L-1` and a target
/// uniformly after the last source (one-based, as in the session list).
pub fn sample_episode(case: &LongitudinalCase, rng: &mut Rng) -> Result<Episode> {
    let l = case.len();
    if l < 2 {
        return Err(Error::Data(format!(
            "case {} has {l} session(s); episodes need at least 2",
            case.case_id
        )));
    }
    let mut s = [0usize; 3];
    for v in &mut s {
        *v = rng.random_range(1..l);
    }
    s.sort_unstable();
    let f = rng.random_range(s[2] + 1..=l);
    Episode::from_indices(case, [s[0] - 1, s[1] - 1, s[2] - 1, f - 1])
}

/// Mean losses of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    pub weighted_mse: f64,
    pub seg: f64,
    pub wall_ms: u128,
}

pub const LOG_HEADER: &str = "step,lr,total,weighted_mse,seg,wall_ms";

impl StepLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{}",
            self.step, self.lr, self.total, self.weighted_mse, self.seg, self.wall_ms
        )
    }
}

/// Append-only CSV training log.
pub struct TrainLog {
    out: BufWriter<File>,
}

impl TrainLog {
    pub fn open(path: &Path) -> Result<Self> {
        let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        if fresh {
            writeln!(out, "{LOG_HEADER}").map_err(|e| Error::io(path, e))?;
        }
        Ok(Self { out })
    }

    pub fn append(&mut self, row: &StepLog) -> std::io::Result<()> {
        writeln!(self.out, "{}", row.csv_row())?;
        self.out.flush()
    }
}

struct Prepared {
    episode: Episode,
    t: usize,
    eps: ImageTensor,
}

struct EpisodeGrad {
    grad: Vec<f64>,
    total: f64,
    weighted_mse: f64,
    seg: f64,
    t: usize,
}

/// Owns the model, optimizer state and data for one training run.
pub struct Trainer {
    model: Denoiser,
    opt: OptimizerState,
    step: u64,
    cases: Vec<LongitudinalCase>,
    train: TrainConfig,
    loss: LossConfig,
    table: ScheduleTable,
}

impl Trainer {
    pub fn new(
        model: Denoiser,
        cases: Vec<LongitudinalCase>,
        train: TrainConfig,
        loss: LossConfig,
        table: ScheduleTable,
    ) -> Result<Self> {
        let opt = OptimizerState::new(model.params().len());
        Self::resume(model, opt, 0, cases, train, loss, table)
    }

    pub fn from_checkpoint(
        ckpt: Checkpoint,
        cases: Vec<LongitudinalCase>,
        train: TrainConfig,
        loss: LossConfig,
        table: ScheduleTable,
    ) -> Result<Self> {
        let opt = ckpt
            .optimizer
            .ok_or_else(|| Error::State("checkpoint has no optimizer state to resume".into()))?;
        Self::resume(ckpt.model, opt, ckpt.step, cases, train, loss, table)
    }

    fn resume(
        model: Denoiser,
        opt: OptimizerState,
        step: u64,
        cases: Vec<LongitudinalCase>,
        train: TrainConfig,
        loss: LossConfig,
        table: ScheduleTable,
    ) -> Result<Self> {
        train.validate()?;
        loss.validate()?;
        let cases: Vec<_> = cases.into_iter().filter(|c| c.len() >= 2).collect();
        if cases.is_empty() {
            return Err(Error::Data("no eligible cases".into()));
        }
        let shape = cases[0].shape();
        for c in &cases {
            if c.shape() != shape {
                return Err(Error::Data(format!(
                    "case {} has shape {:?}, expected {:?}",
                    c.case_id,
                    c.shape(),
                    shape
                )));
            }
        }
        if shape.channels != model.config().channels {
            return Err(Error::Data(format!(
                "cases have {} channels, model expects {}",
                shape.channels,
                model.config().channels
            )));
        }
        if opt.m.len() != model.params().len() || opt.v.len() != model.params().len() {
            return Err(Error::State("optimizer state does not match the model".into()));
        }
        if step > train.total_steps {
            return Err(Error::State(format!(
                "checkpoint step {step} beyond total_steps {}",
                train.total_steps
            )));
        }
        Ok(Self {
            model,
            opt,
            step,
            cases,
            train,
            loss,
            table,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn model(&self) -> &Denoiser {
        &self.model
    }

    pub fn optimizer(&self) -> &OptimizerState {
        &self.opt
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.train.total_steps
    }

    pub fn checkpoint(&self, run_config: serde_json::Value) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            step: self.step,
            optimizer: Some(self.opt.clone()),
            run_config,
        }
    }

    /// Episodes, steps and noise for update `step` depend only on the seed
    /// and the step index, so a resumed run replays the same draws.
    fn prepare(&self, step: u64) -> Result<Vec<Prepared>> {
        let mut rng = seeded(child_seed(self.train.seed, step));
        let shape = self.cases[0].shape();
        (0..self.train.episodes_per_step())
            .map(|_| {
                let case = &self.cases[rng.random_range(0..self.cases.len())];
                let episode = sample_episode(case, &mut rng)?;
                let t = rng.random_range(1..=self.table.steps());
                let eps = NoiseDraw::sample(shape, &mut rng).into_tensor();
                Ok(Prepared { episode, t, eps })
            })
            .collect()
    }

    fn episode_grad(&self, p: &Prepared) -> Result<EpisodeGrad> {
        let e = &p.episode;
        let x_t = forward_sample(&e.target_image, p.t, &p.eps, &self.table)?;
        let input = assemble_input(&e.source_images, &x_t)?;
        let mut cache = ActivationCache::new();
        let out = self.model.forward(&input, &e.pairs, p.t, Some(&mut cache))?;
        let gt = e.gt_masks();
        let omega = weight_map(&gt, &self.loss)?;
        let lg = joint_loss_from_logits(
            &p.eps,
            &out.eps_hat,
            &out.mask_logits,
            &gt,
            &omega,
            p.t,
            &self.table,
            &self.loss,
        )?;
        let grad = self.model.backward(&cache, &lg.d_eps_hat, &lg.d_mask_logits)?;
        Ok(EpisodeGrad {
            grad,
            total: lg.loss.total,
            weighted_mse: lg.loss.weighted_mse,
            seg: lg.loss.seg,
            t: p.t,
        })
    }

    /// Runs one optimizer update (all micro-batches) and returns its log row.
    pub fn train_step(&mut self) -> Result<StepLog> {
        if self.is_done() {
            return Err(Error::State(format!(
                "training already reached total_steps {}",
                self.train.total_steps
            )));
        }
        let start = Instant::now();
        let step = self.step + 1;
        let prepared = self.prepare(step)?;
        let n = prepared.len() as f64;
        let mut grad = vec![0.0; self.model.params().len()];
        let (mut total, mut wmse, mut seg) = (0.0, 0.0, 0.0);
        for micro in prepared.chunks(self.train.batch_size) {
            let parts = micro
                .par_iter()
                .map(|p| self.episode_grad(p))
                .collect::<Result<Vec<_>>>()?;
            let mut micro_grad = vec![0.0; grad.len()];
            for part in &parts {
                if !(part.total.is_finite() && part.grad.iter().all(|g| g.is_finite())) {
                    return Err(Error::NonFiniteLoss {
                        step,
                        t: part.t,
                        total: part.total,
                        weighted_mse: part.weighted_mse,
                        seg: part.seg,
                    });
                }
                micro_grad.iter_mut().zip(&part.grad).for_each(|(a, g)| *a += g);
                total += part.total;
                wmse += part.weighted_mse;
                seg += part.seg;
            }
            grad.iter_mut().zip(&micro_grad).for_each(|(a, g)| *a += g / n);
        }
        let lr = lr_at(step, &self.train)?;
        adam_update(self.model.params_mut(), &grad, &mut self.opt, lr);
        self.step = step;
        Ok(StepLog {
            step,
            lr,
            total: total / n,
            weighted_mse: wmse / n,
            seg: seg / n,
            wall_ms: start.elapsed().as_millis(),
        })
    }

    /// Trains until `until` (capped at `total_steps`), reporting every row.
    pub fn run_until(&mut self, until: u64, mut on_step: impl FnMut(&StepLog) -> Result<()>) -> Result<()> {
        let until = until.min(self.train.total_steps);
        while self.step < until {
            let row = self.train_step()?;
            on_step(&row)?;
        }
        Ok(())
    }
}
