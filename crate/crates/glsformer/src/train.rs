//! Training: Adam over per-window cross-entropy, with per-epoch validation
//! and a Table-style ablation runner over gating modes and long-stream
//! strides.

use std::collections::HashMap;
use std::path::Path;

use autodiff::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::eval;
use crate::model::{
    forward, forward_logits, save_checkpoint, GatingMode, ModelConfig, ModelParams, TapedParams,
};
use crate::sampler::sample_window;
use crate::synth::{Dataset, LabeledVideo};
use crate::{GlsError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// training windows sampled per epoch; 0 means one pass over every
    /// (video, frame) pair
    pub windows_per_epoch: usize,
    /// validation evaluates every `val_stride`-th frame
    pub val_stride: usize,
    pub aug_crop: bool,
    pub aug_mirror: bool,
    pub aug_jitter: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 10,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            windows_per_epoch: 256,
            val_stride: 4,
            aug_crop: false,
            aug_mirror: false,
            aug_jitter: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(GlsError::config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.val_stride == 0 {
            return Err(GlsError::config(
                "batch_size, epochs and val_stride must be positive",
            ));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(GlsError::config(format!("{} must be in [0, 1), got {}", name, b)));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(GlsError::config("adam_eps must be positive"));
        }
        Ok(())
    }
}

/// Adam with bias correction, state keyed by parameter name.
pub struct Adam {
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Self {
        Adam {
            m: HashMap::new(),
            v: HashMap::new(),
            step: 0,
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
        }
    }

    /// One update. Errors with the offending parameter name on non-finite
    /// gradients; parameters are untouched in that case.
    pub fn step(&mut self, params: &mut ModelParams, grads: &HashMap<String, Vec<f64>>) -> Result<()> {
        for (name, g) in grads {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(GlsError::NanGradient(name.clone()));
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, t) in params.iter_mut() {
            let g = match grads.get(name) {
                Some(g) => g,
                None => continue,
            };
            let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                t.data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// One window-consistent photometric/geometric transform, shared by every
/// frame of both streams so temporal structure is preserved.
#[derive(Debug, Clone, Copy, Default)]
struct WindowAugment {
    mirror: bool,
    dx: i64,
    dy: i64,
    jitter: [f64; 3],
}

impl WindowAugment {
    fn sample(cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut a = WindowAugment::default();
        if cfg.aug_mirror {
            a.mirror = rng.gen_range(0..2) == 1;
        }
        if cfg.aug_crop {
            a.dx = rng.gen_range(-2i64..=2);
            a.dy = rng.gen_range(-2i64..=2);
        }
        if cfg.aug_jitter {
            for c in 0..3 {
                a.jitter[c] = rng.gen_range(-0.05..=0.05);
            }
        }
        a
    }

    fn is_identity(&self) -> bool {
        !self.mirror && self.dx == 0 && self.dy == 0 && self.jitter == [0.0; 3]
    }

    /// Apply to a [T, H, W, C] tensor. Shifts clamp at the border.
    fn apply(&self, frames: &Tensor) -> Tensor {
        if self.is_identity() {
            return frames.clone();
        }
        let (t_count, h, w, c) = (
            frames.shape[0],
            frames.shape[1],
            frames.shape[2],
            frames.shape[3],
        );
        let mut out = vec![0.0; frames.numel()];
        for t in 0..t_count {
            for y in 0..h {
                for x in 0..w {
                    let sx0 = if self.mirror { (w - 1 - x) as i64 } else { x as i64 };
                    let sx = (sx0 + self.dx).clamp(0, w as i64 - 1) as usize;
                    let sy = (y as i64 + self.dy).clamp(0, h as i64 - 1) as usize;
                    let src = ((t * h + sy) * w + sx) * c;
                    let dst = ((t * h + y) * w + x) * c;
                    for ch in 0..c {
                        out[dst + ch] =
                            (frames.data[src + ch] + self.jitter[ch.min(2)]).clamp(0.0, 1.0);
                    }
                }
            }
        }
        Tensor::new(frames.shape.clone(), out).unwrap()
    }
}

/// Gather the short/long frame windows for query time `t` of a video.
pub fn window_inputs(
    video: &LabeledVideo,
    t: usize,
    cfg: &ModelConfig,
) -> (Tensor, Option<Tensor>) {
    let w = sample_window(t, &cfg.stream_config());
    let st = video.gather(&w.short_idx);
    let lt = if cfg.gating_mode.uses_long_stream() {
        Some(video.gather(&w.long_idx))
    } else {
        None
    };
    (st, lt)
}

/// Mean cross-entropy gradients over a batch of (video index, frame) pairs.
/// Each sample runs on its own tape; gradients accumulate in canonical
/// parameter order. Returns (grads, mean loss).
fn batch_gradients(
    params: &ModelParams,
    cfg: &ModelConfig,
    videos: &[LabeledVideo],
    batch: &[(usize, usize)],
    augments: &[WindowAugment],
) -> Result<(HashMap<String, Vec<f64>>, f64)> {
    let mut grads: HashMap<String, Vec<f64>> = params
        .iter()
        .map(|(n, t)| (n.to_string(), vec![0.0; t.numel()]))
        .collect();
    let inv = 1.0 / batch.len() as f64;
    let mut total_loss = 0.0;
    for (sample, &(vi, t)) in batch.iter().enumerate() {
        let video = &videos[vi];
        let (st, lt) = window_inputs(video, t, cfg);
        let aug = augments.get(sample).copied().unwrap_or_default();
        let st = aug.apply(&st);
        let lt = lt.map(|f| aug.apply(&f));
        let mut tape = Tape::new();
        let tp = TapedParams::record(&mut tape, params);
        let logits = forward(&mut tape, &st, lt.as_ref(), &tp, cfg, None)?;
        let loss = tape.cross_entropy(&logits, video.labels[t])?;
        let loss = tape.scale(&loss, inv)?;
        total_loss += loss.item();
        tape.backward(&loss)?;
        for (name, _) in params.iter() {
            let g = tape.grad(tp.get(name))?;
            let acc = grads.get_mut(name).expect("same parameter set");
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
    }
    Ok((grads, total_loss))
}

/// Greedy per-frame accuracy (percent) over every `stride`-th frame of the
/// given videos.
pub fn validation_accuracy(
    params: &ModelParams,
    cfg: &ModelConfig,
    videos: &[LabeledVideo],
    stride: usize,
) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for video in videos {
        for t in (0..video.num_frames()).step_by(stride) {
            let (st, lt) = window_inputs(video, t, cfg);
            let logits = forward_logits(params, cfg, &st, lt.as_ref())?;
            let pred = argmax(&logits);
            if pred == video.labels[t] {
                hits += 1;
            }
            total += 1;
        }
    }
    Ok(100.0 * hits as f64 / total.max(1) as f64)
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// parameters from the epoch with the best validation accuracy
    pub best_params: ModelParams,
    /// parameters after the final epoch
    pub final_params: ModelParams,
    pub best_val_accuracy: f64,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

fn epoch_windows(
    videos: &[LabeledVideo],
    tcfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, usize)> {
    if tcfg.windows_per_epoch > 0 {
        (0..tcfg.windows_per_epoch)
            .map(|_| {
                let vi = rng.gen_range(0..videos.len());
                let t = rng.gen_range(0..videos[vi].num_frames());
                (vi, t)
            })
            .collect()
    } else {
        let mut all: Vec<(usize, usize)> = videos
            .iter()
            .enumerate()
            .flat_map(|(vi, v)| (0..v.num_frames()).map(move |t| (vi, t)))
            .collect();
        // Fisher-Yates with the epoch rng
        for i in (1..all.len()).rev() {
            all.swap(i, rng.gen_range(0..=i));
        }
        all
    }
}

/// Train on `ds.train`, validating on `ds.val` each epoch. When `out_dir`
/// is given, writes `train_log.csv` and the best-validation checkpoint
/// `model.ckpt` there.
pub fn train(
    ds: &Dataset,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    tcfg.validate()?;
    if ds.train.is_empty() || ds.val.is_empty() {
        return Err(GlsError::config("training needs non-empty train and val splits"));
    }
    if ds.spec.height != cfg.height || ds.spec.width != cfg.width {
        return Err(GlsError::config(format!(
            "dataset frames are {}x{} but the model expects {}x{}",
            ds.spec.height, ds.spec.width, cfg.height, cfg.width
        )));
    }
    let mut params = ModelParams::init(cfg, tcfg.seed);
    let mut adam = Adam::new(tcfg);
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed.wrapping_add(0x9e3779b97f4a7c15));
    let mut log = Vec::with_capacity(tcfg.epochs);
    let mut best_params = params.clone();
    let mut best_val = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    for epoch in 1..=tcfg.epochs {
        let windows = epoch_windows(&ds.train, tcfg, &mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch in windows.chunks(tcfg.batch_size) {
            let augments: Vec<WindowAugment> = batch
                .iter()
                .map(|_| WindowAugment::sample(tcfg, &mut rng))
                .collect();
            let (grads, loss) = batch_gradients(&params, cfg, &ds.train, batch, &augments)?;
            adam.step(&mut params, &grads)?;
            loss_sum += loss;
            batches += 1;
        }
        let train_loss = loss_sum / batches.max(1) as f64;
        let val_accuracy = validation_accuracy(&params, cfg, &ds.val, tcfg.val_stride)?;
        if val_accuracy > best_val {
            best_val = val_accuracy;
            best_params = params.clone();
            best_epoch = epoch;
        }
        log.push(EpochLog {
            epoch,
            train_loss,
            val_accuracy,
        });
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| GlsError::io(dir.display().to_string(), e))?;
        let mut csv = String::from("epoch,train_loss,val_accuracy\n");
        for row in &log {
            csv.push_str(&format!(
                "{},{:.6},{:.3}\n",
                row.epoch, row.train_loss, row.val_accuracy
            ));
        }
        let log_path = dir.join("train_log.csv");
        std::fs::write(&log_path, csv)
            .map_err(|e| GlsError::io(log_path.display().to_string(), e))?;
        save_checkpoint(&dir.join("model.ckpt"), cfg, &best_params)?;
    }
    Ok(TrainOutcome {
        best_params,
        final_params: params,
        best_val_accuracy: best_val,
        best_epoch,
        log,
    })
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub gating_mode: GatingMode,
    pub s: usize,
    pub metrics: eval::Metrics,
}

/// Train and test one configuration per (gating mode, long-stream stride)
/// cell and report test metrics. Stride cells run under the full model.
pub fn run_ablation(
    ds: &Dataset,
    base: &ModelConfig,
    tcfg: &TrainConfig,
    modes: &[GatingMode],
    strides: &[usize],
    out_csv: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    let mut cells: Vec<(GatingMode, usize)> =
        modes.iter().map(|&m| (m, base.s)).collect();
    for &s in strides {
        if !(modes.contains(&base.gating_mode) && s == base.s) {
            cells.push((base.gating_mode, s));
        }
    }
    let mut rows = Vec::with_capacity(cells.len());
    for (mode, s) in cells {
        let cfg = ModelConfig {
            gating_mode: mode,
            s,
            ..base.clone()
        };
        let outcome = train(ds, &cfg, tcfg, None)?;
        let metrics = eval::evaluate(&outcome.best_params, &cfg, &ds.test, tcfg.val_stride)?;
        rows.push(AblationRow {
            gating_mode: mode,
            s,
            metrics,
        });
    }
    if let Some(path) = out_csv {
        let mut csv = String::from("gating_mode,s,accuracy,precision,recall,jaccard\n");
        for r in &rows {
            csv.push_str(&format!(
                "{},{},{:.3},{:.3},{:.3},{:.3}\n",
                r.gating_mode.name(),
                r.s,
                r.metrics.accuracy,
                r.metrics.precision,
                r.metrics.recall,
                r.metrics.jaccard
            ));
        }
        std::fs::write(path, csv).map_err(|e| GlsError::io(path.display().to_string(), e))?;
    }
    Ok(rows)
}
