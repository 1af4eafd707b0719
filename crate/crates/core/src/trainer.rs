//! SGD training loop with poly learning-rate decay, periodic validation and
//! checkpointing.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::RngCore;

use crate::data::{substream, Batch, BatchStream, Dataset, RngStream};
use crate::error::{Error, Result};
use crate::io::{resize_plane, RgbImage};
use crate::losses::{total_loss, LossBreakdown, SupervisionSet};
use crate::maps::{BinaryMask, PredictionMap};
use crate::metrics::{evaluate_dataset, MetricsReport};
use crate::network::{GlassNet, NetworkConfig};
use crate::neural::checkpoint::Checkpoint;
use crate::neural::{no_grad, sgd_step, sigmoid, NormMode, Real, SgdConfig, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Self::F32),
            "f64" => Ok(Self::F64),
            _ => Err(Error::Config(format!("precision must be f32 or f64, got {s}"))),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::F32 => "f32",
            Self::F64 => "f64",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub batch_size: usize,
    pub max_iters: usize,
    pub eval_every: usize,
    pub seed: u64,
    pub precision: Precision,
}

/// Learning rate of the desk preset. The losses are pixel means, so the
/// step size that suits a summed loss is far too small here.
pub const DESK_LR: f64 = 0.05;

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            momentum: 0.9,
            weight_decay: 5e-4,
            poly_power: 0.9,
            batch_size: 4,
            max_iters: 2000,
            eval_every: 200,
            seed: 0,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    /// Defaults with the desk learning rate.
    pub fn desk() -> Self {
        Self {
            base_lr: DESK_LR,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("train.base_lr must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("train.momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("train.weight_decay must be non-negative");
        }
        if !(self.poly_power > 0.0 && self.poly_power <= 1.0) {
            return bad("train.poly_power must lie in (0, 1]");
        }
        if self.batch_size == 0 || self.max_iters == 0 || self.eval_every == 0 {
            return bad("train.batch_size, train.max_iters and train.eval_every must be positive");
        }
        Ok(())
    }

    /// Seed for weight initialization.
    pub fn init_seed(&self) -> u64 {
        substream(self.seed, RngStream::Init).next_u64()
    }
}

/// `base_lr · (1 − iter / max_iters)^poly_power` for `0 ≤ iter ≤ max_iters`.
pub fn poly_lr(iter: usize, cfg: &TrainConfig) -> Result<f64> {
    if iter > cfg.max_iters || cfg.max_iters == 0 {
        return Err(Error::invalid(format!(
            "iteration {iter} outside 0..={}",
            cfg.max_iters
        )));
    }
    if iter == 0 {
        return Ok(cfg.base_lr);
    }
    Ok(cfg.base_lr * (1.0 - iter as f64 / cfg.max_iters as f64).powf(cfg.poly_power))
}

fn tensor<T: Real>(shape: &[usize], values: &[f32]) -> Result<Tensor<T>> {
    Tensor::new(shape, values.iter().map(|&v| T::from_f64(f64::from(v))).collect())
}

pub fn batch_inputs<T: Real>(batch: &Batch) -> Result<(Tensor<T>, SupervisionSet<T>)> {
    let (b, s) = (batch.len(), batch.size);
    let map = [b, 1, s, s];
    Ok((
        tensor(&[b, 3, s, s], &batch.images)?,
        SupervisionSet {
            glass: tensor(&map, &batch.masks)?,
            inner: tensor(&map, &batch.interior)?,
            boundary: tensor(&map, &batch.boundary)?,
        },
    ))
}

/// Final-map probabilities for a stack of images `[B,3,H,W]`, eval mode.
pub fn predict_batch<T: Real>(net: &GlassNet<T>, images: &Tensor<T>) -> Result<Vec<PredictionMap>> {
    let bundle = no_grad(|| net.forward(images, NormMode::Eval))?;
    let probs = sigmoid(&bundle.final_map);
    let &[_, _, h, w] = probs.shape() else { unreachable!("rank 4") };
    let values: Vec<f32> = probs.to_f64_vec().into_iter().map(|v| v as f32).collect();
    values
        .chunks(h * w)
        .map(|c| PredictionMap::from_values(h, w, c.to_vec()))
        .collect()
}

/// Probability map for one image of any size. The image is resized to the
/// network input and the prediction is resized back.
pub fn predict_image<T: Real>(net: &GlassNet<T>, image: &RgbImage) -> Result<PredictionMap> {
    let n = net.config().input_size;
    let input = image.resize(n, n)?;
    let x = tensor(&[1, 3, n, n], input.data())?;
    let pred = predict_batch(net, &x)?.remove(0);
    let (h, w) = (image.height(), image.width());
    PredictionMap::from_values(h, w, resize_plane(pred.values(), (n, n), (h, w))?)
}

/// Eval-mode metrics of `net` over `data`.
pub fn evaluate<T: Real>(net: &GlassNet<T>, data: &Dataset, batch_size: usize) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let mut pairs: Vec<(PredictionMap, BinaryMask)> = Vec::with_capacity(data.len());
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let samples: Vec<_> = chunk.iter().map(|&i| data.samples[i].clone()).collect();
        let batch = Batch::stack(&samples, chunk.to_vec())?;
        let (images, _) = batch_inputs::<T>(&batch)?;
        for (pred, s) in predict_batch(net, &images)?.into_iter().zip(samples) {
            pairs.push((pred, s.mask));
        }
    }
    evaluate_dataset(&pairs)
}

/// Loads a checkpoint and evaluates it in `f32`.
pub fn evaluate_checkpoint(ckpt: &Path, data: &Dataset, batch_size: usize) -> Result<MetricsReport> {
    let net = GlassNet::<f32>::from_checkpoint(&Checkpoint::load(ckpt)?)?;
    if net.config().input_size != data.size {
        return Err(Error::Checkpoint(format!(
            "checkpoint expects {0}x{0} input, data is {1}x{1}",
            net.config().input_size,
            data.size
        )));
    }
    evaluate(&net, data, batch_size)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub iter: usize,
    pub report: MetricsReport,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// One entry per iteration.
    pub losses: Vec<LossBreakdown>,
    pub evals: Vec<EvalRecord>,
    pub best: Option<EvalRecord>,
    pub final_checkpoint: Option<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
}

pub struct TrainSetup<'a> {
    pub train: &'a Dataset,
    pub val: Option<&'a Dataset>,
    pub out_dir: Option<&'a Path>,
    pub augment: bool,
}

pub const FINAL_CHECKPOINT: &str = "final.glck";
pub const BEST_CHECKPOINT: &str = "best.glck";
pub const HISTORY_FILE: &str = "history.txt";

fn save(net_ck: Checkpoint, path: &Path) -> Result<PathBuf> {
    net_ck.save(path)?;
    Ok(path.to_path_buf())
}

/// Runs `cfg.max_iters` SGD steps on `setup.train`.
///
/// Every `eval_every` iterations (and after the last one) the network is
/// scored on `setup.val`; with an output directory the best-IoU and final
/// checkpoints and `history.txt` are written there.
pub fn train<T: Real>(
    net: &mut GlassNet<T>,
    setup: &TrainSetup<'_>,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&str),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if setup.train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if setup.train.size != net.config().input_size {
        return Err(Error::Config(format!(
            "data resolution {} differs from net.input_size {}",
            setup.train.size,
            net.config().input_size
        )));
    }
    let history = match setup.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join(HISTORY_FILE);
            fs::write(&p, "").map_err(|e| Error::io(&p, e))?;
            Some(p)
        }
        None => None,
    };

    let net_cfg: NetworkConfig = net.config().clone();
    let (n_glass, n_boundary) = (net_cfg.glass_branches(), net_cfg.boundary_branches());
    let mut stream = BatchStream::new(setup.train.len(), cfg.batch_size, cfg.seed, setup.augment)?;
    let mut outcome = TrainOutcome {
        losses: Vec::with_capacity(cfg.max_iters),
        evals: Vec::new(),
        best: None,
        final_checkpoint: None,
        best_checkpoint: None,
    };

    for iter in 1..=cfg.max_iters {
        let lr = poly_lr(iter - 1, cfg)?;
        let batch = stream.next_batch(setup.train)?;
        let (images, sup) = batch_inputs::<T>(&batch)?;
        let bundle = net.forward(&images, NormMode::Train)?;
        let loss = total_loss(&bundle, &sup, n_glass, n_boundary)?;
        if !loss.breakdown.is_finite() {
            return Err(Error::NonFinite {
                iter,
                detail: loss.breakdown.log_line(iter, lr),
            });
        }
        loss.total.backward()?;
        drop(bundle);
        let sgd = SgdConfig {
            lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
        };
        sgd_step(net.store_mut().params_mut(), &sgd)?;
        outcome.losses.push(loss.breakdown);
        log(&loss.breakdown.log_line(iter, lr));

        let eval_now = iter % cfg.eval_every == 0 || iter == cfg.max_iters;
        if let (true, Some(val)) = (eval_now, setup.val) {
            let mut report = evaluate(net, val, cfg.batch_size)?;
            report.per_image = None;
            log(&format!(
                "eval iter {iter} acc {:.4} iou {:.4} fbeta {:.4} mae {:.4} ber {:.3}",
                report.acc, report.iou, report.f_beta, report.mae, report.ber
            ));
            if let Some(p) = &history {
                let line = format!(
                    "iter {iter} acc {:.6} iou {:.6} fbeta {:.6} mae {:.6} ber {:.6} n_images {}\n",
                    report.acc, report.iou, report.f_beta, report.mae, report.ber, report.image_count
                );
                OpenOptions::new()
                    .append(true)
                    .open(p)
                    .and_then(|mut f| f.write_all(line.as_bytes()))
                    .map_err(|e| Error::io(p, e))?;
            }
            let record = EvalRecord { iter, report };
            let improved = outcome.best.as_ref().map_or(true, |b| record.report.iou > b.report.iou);
            if improved {
                if let Some(dir) = setup.out_dir {
                    outcome.best_checkpoint = Some(save(net.to_checkpoint(), &dir.join(BEST_CHECKPOINT))?);
                }
                outcome.best = Some(record.clone());
            }
            outcome.evals.push(record);
        }
    }
    if let Some(dir) = setup.out_dir {
        outcome.final_checkpoint = Some(save(net.to_checkpoint(), &dir.join(FINAL_CHECKPOINT))?);
    }
    Ok(outcome)
}
