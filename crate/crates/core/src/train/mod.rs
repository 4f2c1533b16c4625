//! Target assignment, detection loss, decoding and the training loop.

mod assign;
mod loss;
mod optim;

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use assign::{
    assign_targets, decode, decode_box, encode_box, postprocess, preferred_scale, CellTarget, ScaleTargets, TargetMap, MAX_SIZE_LOGIT,
};
pub use loss::{detection_loss, LossParts, LossWeights};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};

use crate::error::{Error, Result};
use crate::metrics::{map_suite, Detection, GroundTruth, MetricsReport};
use crate::model::{Model, ModelSpec};
use crate::nn::ForwardCtx;
use crate::sim::{parse_labels, AnnotatedFrame, LabelBox, Manifest, RgbImage};
use crate::tensor::{read_weights, write_weights, NormMode, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub loss: LossWeights,
    /// Confidence floor used when evaluating mAP during training.
    pub conf_threshold: f64,
    pub nms_iou: f64,
    /// Evaluate training-set mAP50 every this many epochs (0 disables).
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 8,
            optimizer: OptimizerConfig::default(),
            loss: LossWeights::default(),
            conf_threshold: 0.001,
            nms_iou: 0.5,
            eval_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Invalid("epochs and batch size must be positive".into()));
        }
        if !(self.optimizer.lr >= 0.0 && self.optimizer.lr.is_finite()) {
            return Err(Error::Invalid(format!("learning rate {} must be finite and non-negative", self.optimizer.lr)));
        }
        if !(0.0..=1.0).contains(&self.conf_threshold) || !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::Invalid("thresholds must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One training image with its labels and precomputed cell assignment.
#[derive(Clone, Debug)]
pub struct Sample {
    pub size: usize,
    /// Channel-planar `[3, S, S]` values in `[0, 1]`.
    pub pixels: Vec<f64>,
    pub labels: Vec<LabelBox>,
    pub targets: TargetMap,
}

impl Sample {
    pub fn new(image: &RgbImage, labels: Vec<LabelBox>, strides: &[usize]) -> Result<Sample> {
        if image.width != image.height {
            return Err(Error::Invalid(format!("images must be square, got {}x{}", image.width, image.height)));
        }
        let targets = assign_targets(&labels, image.width, strides);
        Ok(Sample { size: image.width, pixels: image.planar(), labels, targets })
    }

    pub fn from_frame(frame: &AnnotatedFrame, strides: &[usize]) -> Result<Sample> {
        Sample::new(&frame.image, frame.boxes.clone(), strides)
    }

    pub fn ground_truth(&self) -> Vec<GroundTruth> {
        self.labels
            .iter()
            .map(|l| GroundTruth { class: l.class, bbox: l.to_pixels(self.size, self.size) })
            .collect()
    }
}

/// Loads one split of a generated dataset directory.
pub fn load_split(dir: &Path, split: &str, strides: &[usize]) -> Result<Vec<Sample>> {
    let manifest = Manifest::load(dir)?;
    manifest
        .split(split)
        .map(|e| {
            let image = RgbImage::load_ppm(&dir.join(&e.image))?;
            let label_path = dir.join(&e.label);
            let text = std::fs::read_to_string(&label_path).map_err(|err| Error::io(&label_path, err))?;
            Sample::new(&image, parse_labels(&text)?, strides)
        })
        .collect()
}

fn batch_tensor(samples: &[&Sample]) -> Result<Tensor> {
    let s = samples[0].size;
    let mut data = Vec::with_capacity(samples.len() * 3 * s * s);
    for x in samples {
        data.extend_from_slice(&x.pixels);
    }
    Tensor::from_vec(&[samples.len(), 3, s, s], data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub box_loss: f64,
    pub obj_loss: f64,
    pub cls_loss: f64,
    pub lr: f64,
    pub map50: Option<f64>,
}

pub const LOG_HEADER: &str = "epoch,loss,box,obj,cls,lr,map50";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let map = self.map50.map(|m| format!("{m:.6}")).unwrap_or_default();
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{},{}",
            self.epoch, self.loss, self.box_loss, self.obj_loss, self.cls_loss, self.lr, map
        )
    }
}

pub fn write_log_csv(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut text = String::from(LOG_HEADER);
    text.push('\n');
    for row in log {
        text.push_str(&row.csv_row());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Detections after decoding and NMS, one list per sample, in inference mode.
pub fn predict(model: &Model, samples: &[Sample], conf_threshold: f64, nms_iou: f64) -> Result<Vec<Vec<Detection>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(8) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let maps = model.predict(&batch_tensor(&refs)?)?;
        out.extend(postprocess(&maps, &model.spec.strides, model.spec.input_size, conf_threshold, nms_iou));
    }
    Ok(out)
}

pub fn evaluate(model: &Model, samples: &[Sample], conf_threshold: f64, nms_iou: f64) -> Result<MetricsReport> {
    let dets = predict(model, samples, conf_threshold, nms_iou)?;
    let gts: Vec<Vec<GroundTruth>> = samples.iter().map(Sample::ground_truth).collect();
    Ok(map_suite(&dets, &gts))
}

/// Optimizer state and progress; `model` is passed to each call so the
/// caller keeps ownership.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub optimizer: Optimizer,
    /// Completed epochs.
    pub epoch: usize,
    pub log: Vec<EpochLog>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { optimizer: Optimizer::new(cfg.optimizer), cfg, epoch: 0, log: Vec::new() })
    }

    /// One optimizer step on a batch; returns the loss terms.
    pub fn step(&mut self, model: &mut Model, batch: &[&Sample]) -> Result<LossParts> {
        let x = batch_tensor(batch)?;
        let targets: Vec<TargetMap> = batch.iter().map(|s| s.targets.clone()).collect();
        let (parts, grads, bn) = {
            let ctx = ForwardCtx::new(&model.params, NormMode::Train, true);
            let maps = model.forward(&ctx, &x)?;
            let parts = detection_loss(&maps, &targets, &self.cfg.loss)?;
            parts.total.backward()?;
            (parts, ctx.grads(), ctx.take_bn_updates())
        };
        self.optimizer.step(&mut model.params, &grads)?;
        model.params.apply_bn_updates(bn)?;
        Ok(parts)
    }

    /// Runs the next epoch. The visiting order is drawn from `(seed, epoch)`,
    /// so resuming from a checkpoint continues the same sequence.
    pub fn train_epoch(&mut self, model: &mut Model, data: &[Sample]) -> Result<EpochLog> {
        if data.is_empty() {
            return Err(Error::Invalid("training set is empty".into()));
        }
        let epoch = self.epoch + 1;
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);

        let (mut total, mut bbox, mut obj, mut cls) = (0.0, 0.0, 0.0, 0.0);
        let batches: Vec<&[usize]> = order.chunks(self.cfg.batch_size).collect();
        for idx in &batches {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &data[i]).collect();
            let parts = match self.step(model, &batch) {
                Ok(p) => p,
                Err(Error::NonFinite { op }) => return Err(Error::Diverged { epoch, term: op }),
                Err(Error::Stage { stage, source }) if matches!(*source, Error::NonFinite { .. }) => {
                    return Err(Error::Diverged { epoch, term: stage })
                }
                Err(e) => return Err(e),
            };
            let loss = parts.total.item()?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, term: "total".into() });
            }
            total += loss;
            bbox += parts.bbox;
            obj += parts.obj;
            cls += parts.cls;
        }
        let n = batches.len() as f64;
        let map50 = if self.cfg.eval_every > 0 && epoch % self.cfg.eval_every == 0 {
            Some(evaluate(model, data, self.cfg.conf_threshold, self.cfg.nms_iou)?.map50)
        } else {
            None
        };
        let row = EpochLog {
            epoch,
            loss: total / n,
            box_loss: bbox / n,
            obj_loss: obj / n,
            cls_loss: cls / n,
            lr: self.cfg.optimizer.lr,
            map50,
        };
        self.epoch = epoch;
        self.log.push(row.clone());
        Ok(row)
    }

    /// Trains until `cfg.epochs` epochs are complete, calling `on_epoch` after each.
    pub fn fit(&mut self, model: &mut Model, data: &[Sample], mut on_epoch: impl FnMut(&EpochLog)) -> Result<()> {
        while self.epoch < self.cfg.epochs {
            let row = self.train_epoch(model, data)?;
            on_epoch(&row);
        }
        Ok(())
    }
}

/// Trains `model` in place for `cfg.epochs` epochs and returns the per-epoch log.
pub fn train(model: &mut Model, data: &[Sample], cfg: &TrainConfig) -> Result<Vec<EpochLog>> {
    let mut trainer = Trainer::new(cfg.clone())?;
    trainer.fit(model, data, |_| {})?;
    Ok(trainer.log)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub steps: u64,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub weights_seed: u64,
}

fn sidecar(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

/// Writes `path` (weights), `path.json` (metadata) and `path.opt` (optimizer moments).
pub fn save_checkpoint(path: &Path, model: &Model, trainer: &Trainer, weights_seed: u64) -> Result<()> {
    model.save_weights(path)?;
    let meta = CheckpointMeta {
        epoch: trainer.epoch,
        steps: trainer.optimizer.steps,
        model: model.spec.clone(),
        train: trainer.cfg.clone(),
        weights_seed,
    };
    let meta_path = sidecar(path, ".json");
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta)? + "\n").map_err(|e| Error::io(&meta_path, e))?;
    let opt_path = sidecar(path, ".opt");
    let f = File::create(&opt_path).map_err(|e| Error::io(&opt_path, e))?;
    write_weights(BufWriter::new(f), &trainer.optimizer.to_records())
}

pub fn read_checkpoint_meta(path: &Path) -> Result<CheckpointMeta> {
    let meta_path = sidecar(path, ".json");
    let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Restores a model and trainer written by [`save_checkpoint`]. The log of
/// earlier epochs is not part of the checkpoint.
pub fn load_checkpoint(path: &Path) -> Result<(Model, Trainer)> {
    let meta = read_checkpoint_meta(path)?;
    let mut model = Model::build(&meta.model, meta.weights_seed)?;
    model.load_weights(path)?;
    let opt_path = sidecar(path, ".opt");
    let f = File::open(&opt_path).map_err(|e| Error::io(&opt_path, e))?;
    let optimizer = Optimizer::from_records(meta.train.optimizer, &read_weights(BufReader::new(f))?)?;
    let trainer = Trainer { cfg: meta.train, optimizer, epoch: meta.epoch, log: Vec::new() };
    Ok((model, trainer))
}
