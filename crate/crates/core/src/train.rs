//! Training loop: letterboxed batches, nesterov SGD with decoupled roles,
//! linear warmup then linear decay, and split evaluation.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::boxes::BBox;
use crate::data::{hflip, letterbox, Dataset, DatasetSample, Split};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport, GroundTruth, MATCH_IOU};
use crate::model::checkpoint;
use crate::model::head::clamp_box;
use crate::model::nms::{NMS_IOU, SWEEP_CONF};
use crate::model::{training_loss, Arch, Detection, Detector, LossConfig, ModelConfig, Target};
use crate::nn::ParamRole;
use crate::tensor::{Float, Graph, ParamId, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            momentum: 0.937,
            weight_decay: 5e-4,
            nesterov: true,
        }
    }
}

fn f<T: Float>(v: T) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

/// SGD with momentum; weight decay applies to `Weight` tensors only.
#[derive(Debug, Clone)]
pub struct Sgd<T: Float> {
    pub cfg: SgdConfig,
    velocity: Vec<Option<Vec<T>>>,
}

impl<T: Float> Sgd<T> {
    pub fn new(cfg: SgdConfig) -> Self {
        Self { cfg, velocity: Vec::new() }
    }

    pub fn step(&mut self, store: &mut crate::nn::ParamStore<T>, grads: &[(ParamId, Tensor<T>)], lr: f64) {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        let (mu, wd) = (self.cfg.momentum, self.cfg.weight_decay);
        for (id, grad) in grads {
            let decay = if store.get(*id).role == ParamRole::Weight { wd } else { 0.0 };
            let v = self.velocity[id.0].get_or_insert_with(|| vec![T::zero(); grad.numel()]);
            let p = store.value_mut(*id).data_mut();
            for ((w, &gr), vel) in p.iter_mut().zip(grad.data()).zip(v.iter_mut()) {
                let d = f(gr) + decay * f(*w);
                let nv = mu * f(*vel) + d;
                *vel = T::from_f64_lossy(nv);
                let upd = if self.cfg.nesterov { d + mu * nv } else { nv };
                *w = T::from_f64_lossy(f(*w) - lr * upd);
            }
        }
    }
}

/// Learning rate at `iter` of `total`: linear warmup from zero, then linear
/// decay to `lr0 * lrf`.
pub fn lr_at(iter: usize, total: usize, warmup: usize, lr0: f64, lrf: f64) -> f64 {
    if iter < warmup {
        return lr0 * (iter + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let t = ((iter - warmup) as f64 / span).min(1.0);
    lr0 * (1.0 - t * (1.0 - lrf))
}

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub img: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr0: f64,
    /// Final learning rate as a fraction of `lr0`.
    pub lrf: f64,
    pub warmup_iters: usize,
    /// Stops after this many steps even mid-epoch.
    pub max_iters: Option<usize>,
    pub hflip: bool,
    pub seed: u64,
    pub sgd: SgdConfig,
    pub loss: LossConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.img == 0 || self.epochs == 0 || self.batch == 0 || !(self.lr0 > 0.0) || !(0.0..=1.0).contains(&self.lrf) {
            return Err(Error::Config(format!("bad training config {self:?}")));
        }
        Ok(())
    }
}

/// Named bundles of model and training settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    /// Desk scale: width 0.125, 128 px inputs, short overfit runs.
    Toy,
    /// Full recipe: width 0.25, 448 px, batch 16, lr 0.01, 100 epochs.
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Profile::Toy),
            "paper" => Ok(Profile::Paper),
            _ => Err(Error::Config(format!("unknown profile {s:?} (toy|paper)"))),
        }
    }
}

impl Profile {
    pub fn model(self, arch: Arch, nc: usize) -> ModelConfig {
        let base = ModelConfig::new(arch, nc);
        match self {
            Profile::Toy => ModelConfig {
                width_multiple: 0.125,
                ws: 2,
                img: TOY_IMG,
                ..base
            },
            Profile::Paper => base,
        }
    }

    pub fn train(self, seed: u64) -> TrainConfig {
        match self {
            Profile::Toy => TrainConfig {
                img: TOY_IMG,
                epochs: 1000,
                batch: TOY_BATCH,
                lr0: TOY_LR,
                lrf: 0.1,
                warmup_iters: 20,
                max_iters: Some(TOY_ITERS),
                hflip: false,
                seed,
                sgd: SgdConfig::default(),
                loss: LossConfig::default(),
            },
            Profile::Paper => TrainConfig {
                img: 448,
                epochs: 100,
                batch: 16,
                lr0: 0.01,
                lrf: 0.01,
                warmup_iters: 100,
                max_iters: None,
                hflip: true,
                seed,
                sgd: SgdConfig::default(),
                loss: LossConfig::default(),
            },
        }
    }

    /// Synthetic dataset size for this profile.
    pub fn synth_count(self) -> usize {
        match self {
            Profile::Toy => 64,
            Profile::Paper => 640,
        }
    }
}

pub const TOY_IMG: usize = 128;
pub const TOY_ITERS: usize = 300;
pub const TOY_BATCH: usize = 32;
pub const TOY_LR: f64 = 0.06;

/// A letterboxed image and its boxes in canvas pixels.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub image: Tensor<f32>,
    pub boxes: Vec<(usize, BBox)>,
}

/// Letterboxes a sample to `size` (and mirrors it when `flip`).
pub fn prepare(sample: &DatasetSample, size: usize, flip: bool) -> Prepared {
    let s = sample.image.shape();
    let (w, h) = (s[2], s[1]);
    let (mut image, lb) = letterbox(&sample.image, size);
    let mut boxes: Vec<(usize, BBox)> = sample
        .labels
        .iter()
        .map(|l| (l.class_id, clamp_box(&lb.forward(&l.to_pixels(w, h)), size as f64, size as f64)))
        .filter(|(_, b)| b.w > 0.0 && b.h > 0.0)
        .collect();
    if flip {
        image = hflip(&image);
        for (_, b) in &mut boxes {
            b.cx = size as f64 - b.cx;
        }
    }
    Prepared { image, boxes }
}

/// Stacks prepared samples into `[N, 3, S, S]` plus loss targets.
pub fn collate<T: Float>(items: &[Prepared]) -> Result<(Tensor<T>, Vec<Target>)> {
    let first = items.first().ok_or_else(|| Error::Config("empty batch".into()))?;
    let per = first.image.shape().to_vec();
    let mut data = Vec::with_capacity(items.len() * first.image.numel());
    let mut targets = Vec::new();
    for (i, p) in items.iter().enumerate() {
        if p.image.shape() != per {
            return Err(Error::ShapeMismatch {
                op: "collate",
                lhs: per.clone(),
                rhs: p.image.shape().to_vec(),
            });
        }
        data.extend(p.image.data().iter().map(|&v| T::from_f64_lossy(v as f64)));
        targets.extend(p.boxes.iter().map(|&(class_id, bbox)| Target { image: i, class_id, bbox }));
    }
    let mut shape = vec![items.len()];
    shape.extend(per);
    Ok((Tensor::new(&shape, data)?, targets))
}

/// Loads and prepares samples in order; decoding fans out over the rayon pool.
pub fn load_batch(ds: &Dataset, indices: &[usize], flips: &[bool], size: usize) -> Result<Vec<Prepared>> {
    indices
        .par_iter()
        .zip(flips)
        .map(|(&i, &f)| ds.load(i).map(|s| prepare(&s, size, f)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub box_term: f64,
    pub obj_term: f64,
    pub cls_term: f64,
    pub lr: f64,
}

/// One forward/backward/update on a prepared batch.
pub fn train_step<T: Float>(
    model: &mut Detector<T>,
    opt: &mut Sgd<T>,
    images: &Tensor<T>,
    targets: &[Target],
    loss_cfg: &LossConfig,
    lr: f64,
) -> Result<StepStats> {
    let mut g = Graph::new().with_training(true);
    let x = g.constant(images.clone());
    let heads = model.forward(&mut g, x)?;
    let out = training_loss(&mut g, &heads, targets, &model.head().anchors, model.config.nc, loss_cfg)?;
    let loss = f(g.value(out.total).item());
    if !loss.is_finite() {
        return Err(Error::Config(format!("loss diverged to {loss}")));
    }
    g.backward(out.total)?;
    let grads: Vec<(ParamId, Tensor<T>)> = g.bound_params().filter_map(|(id, v)| g.grad(v).map(|t| (id, t))).collect();
    let stats = g.take_stat_updates();
    model.store.apply_stat_updates(stats);
    opt.step(&mut model.store, &grads, lr);
    Ok(StepStats {
        loss,
        box_term: out.box_term,
        obj_term: out.obj_term,
        cls_term: out.cls_term,
        lr,
    })
}

/// Detections in source-image pixels for each index, thresholded at the
/// sweep floor so the AP curve is complete.
pub fn predict<T: Float>(model: &Detector<T>, ds: &Dataset, indices: &[usize], size: usize, batch: usize) -> Result<(Vec<Vec<Detection>>, Vec<Vec<GroundTruth>>)> {
    let mut dets = Vec::with_capacity(indices.len());
    let mut gts = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch.max(1)) {
        let samples: Vec<DatasetSample> = chunk.par_iter().map(|&i| ds.load(i)).collect::<Result<_>>()?;
        let mut prepared = Vec::with_capacity(samples.len());
        let mut boxes = Vec::with_capacity(samples.len());
        for s in &samples {
            let sh = s.image.shape();
            let (w, h) = (sh[2], sh[1]);
            let (img, lb) = letterbox(&s.image, size);
            prepared.push(Prepared { image: img, boxes: Vec::new() });
            boxes.push((lb, w, h));
            gts.push(
                s.labels
                    .iter()
                    .map(|l| GroundTruth {
                        class_id: l.class_id,
                        bbox: l.to_pixels(w, h),
                    })
                    .collect(),
            );
        }
        let (images, _) = collate::<T>(&prepared)?;
        for (found, (lb, w, h)) in model.detect(&images, SWEEP_CONF, NMS_IOU)?.into_iter().zip(boxes) {
            dets.push(
                found
                    .into_iter()
                    .map(|d| Detection {
                        bbox: clamp_box(&lb.inverse(&d.bbox), w as f64, h as f64),
                        ..d
                    })
                    .collect(),
            );
        }
    }
    Ok((dets, gts))
}

pub fn evaluate_indices<T: Float>(model: &Detector<T>, ds: &Dataset, indices: &[usize], size: usize, batch: usize) -> Result<EvalReport> {
    let (dets, gts) = predict(model, ds, indices, size, batch)?;
    Ok(evaluate(&dets, &gts, model.config.nc, MATCH_IOU))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub iters: usize,
    /// Mean of the step statistics over the epoch.
    pub mean: StepStats,
    pub val_map50: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochLog>,
    /// Per-step loss, in order.
    pub trace: Vec<f64>,
    pub best_map50: Option<f64>,
}

/// Full training run over the train split. Validation runs after every epoch
/// when the val split is nonempty; the best (or, without val, the last)
/// weights are written to `checkpoint_path`.
pub fn fit<T: Float>(
    model: &mut Detector<T>,
    ds: &Dataset,
    cfg: &TrainConfig,
    checkpoint_path: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if model.config.nc != ds.nc {
        return Err(Error::Config(format!("model has {} classes, dataset {}", model.config.nc, ds.nc)));
    }
    let train = ds.indices(Split::Train);
    if train.is_empty() {
        return Err(Error::Config("train split is empty".into()));
    }
    let val = ds.indices(Split::Val);
    let per_epoch = train.len().div_ceil(cfg.batch);
    let total = cfg.max_iters.unwrap_or(usize::MAX).min(per_epoch * cfg.epochs);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(cfg.sgd);
    let mut out = TrainOutcome {
        epochs: Vec::new(),
        trace: Vec::new(),
        best_map50: None,
    };
    let mut iter = 0;
    for epoch in 0..cfg.epochs {
        if iter >= total {
            break;
        }
        let mut order = train.clone();
        order.shuffle(&mut rng);
        let mut sums = [0.0; 4];
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch) {
            if iter >= total {
                break;
            }
            let flips: Vec<bool> = chunk.iter().map(|_| cfg.hflip && rng.gen_bool(0.5)).collect();
            let items = load_batch(ds, chunk, &flips, cfg.img)?;
            let (images, targets) = collate::<T>(&items)?;
            let lr = lr_at(iter, total, cfg.warmup_iters, cfg.lr0, cfg.lrf);
            let s = train_step(model, &mut opt, &images, &targets, &cfg.loss, lr)?;
            for (acc, v) in sums.iter_mut().zip([s.loss, s.box_term, s.obj_term, s.cls_term]) {
                *acc += v;
            }
            out.trace.push(s.loss);
            steps += 1;
            iter += 1;
        }
        let n = steps.max(1) as f64;
        let val_map50 = if val.is_empty() {
            None
        } else {
            Some(evaluate_indices(model, ds, &val, cfg.img, cfg.batch)?.map50)
        };
        let improved = match (val_map50, out.best_map50) {
            // Ties go to the later, longer-trained weights.
            (Some(m), Some(b)) => m >= b,
            _ => true,
        };
        if improved {
            if val_map50.is_some() {
                out.best_map50 = val_map50;
            }
            if let Some(p) = checkpoint_path {
                checkpoint::save(&model.store, p)?;
            }
        }
        let log = EpochLog {
            epoch,
            iters: iter,
            mean: StepStats {
                loss: sums[0] / n,
                box_term: sums[1] / n,
                obj_term: sums[2] / n,
                cls_term: sums[3] / n,
                lr: lr_at(iter.saturating_sub(1), total, cfg.warmup_iters, cfg.lr0, cfg.lrf),
            },
            val_map50,
        };
        on_epoch(&log);
        out.epochs.push(log);
    }
    Ok(out)
}
