//! Supervised training from scratch: warmup + cosine learning-rate schedule,
//! SGD with momentum, and DINO-style multi-crop augmentation where every
//! view is classified against the image label.

use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{self, CropBox, Normalization, Tensor3};
use crate::nn::{EncoderSpec, Grads, Model, Sgd};
use crate::par::{self, Parallelism};
use crate::store::DatasetView;

/// Learning rate at optimizer step `step` of `total_steps`: linear warmup
/// over the first `ceil(warmup_fraction·total_steps)` steps, then cosine
/// decay to zero at `step == total_steps`.
pub fn lr_at(step: usize, total_steps: usize, base_lr: f64, warmup_fraction: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Contract("total_steps must be positive".into()));
    }
    if step > total_steps {
        return Err(Error::Contract(format!(
            "step {step} beyond total {total_steps}"
        )));
    }
    let warmup = warmup_steps(total_steps, warmup_fraction)?;
    if step < warmup {
        return Ok(base_lr * (step + 1) as f64 / warmup as f64);
    }
    if total_steps == warmup {
        return Ok(0.0);
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    Ok(0.5 * base_lr * (1.0 + (std::f64::consts::PI * progress).cos()))
}

pub fn warmup_steps(total_steps: usize, warmup_fraction: f64) -> Result<usize> {
    if !(warmup_fraction > 0.0 && warmup_fraction < 1.0) {
        return Err(Error::Contract(format!(
            "warmup_fraction {warmup_fraction} not in (0,1)"
        )));
    }
    Ok(((warmup_fraction * total_steps as f64).ceil() as usize).max(1))
}

/// Optimizer steps for `epochs` passes over `n` samples (last batch kept).
pub fn total_steps(n: usize, batch_size: usize, epochs: usize) -> usize {
    epochs * n.div_ceil(batch_size.max(1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MultiCropConfig {
    pub num_global: usize,
    pub num_local: usize,
    pub global_size: u32,
    pub local_size: u32,
    /// Area fraction range for global crops.
    pub global_scale: [f32; 2],
    pub local_scale: [f32; 2],
}

impl Default for MultiCropConfig {
    /// One global and eight local crops, at desk-scale sizes.
    fn default() -> Self {
        Self {
            num_global: 1,
            num_local: 8,
            global_size: 32,
            local_size: 16,
            global_scale: [0.4, 1.0],
            local_scale: [0.05, 0.4],
        }
    }
}

impl MultiCropConfig {
    pub fn full_scale() -> Self {
        Self {
            global_size: 224,
            local_size: 96,
            ..Self::default()
        }
    }

    pub fn num_views(&self) -> usize {
        self.num_global + self.num_local
    }
}

/// Photometric augmentation settings (DINO recipe by default).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub flip_p: f32,
    pub jitter_p: f32,
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue: f32,
    pub grayscale_p: f32,
    /// Blur probability for the first and for subsequent global views.
    pub global_blur_p: [f32; 2],
    pub local_blur_p: f32,
    /// Solarization probability for global views after the first.
    pub solarize_p: f32,
    /// Blur sigma range at `blur_reference_size`; scaled with crop size.
    pub blur_sigma: [f32; 2],
    pub blur_reference_size: u32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_p: 0.5,
            jitter_p: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.2,
            hue: 0.1,
            grayscale_p: 0.2,
            global_blur_p: [1.0, 0.1],
            local_blur_p: 0.5,
            solarize_p: 0.2,
            blur_sigma: [0.1, 2.0],
            blur_reference_size: 224,
        }
    }
}

impl AugmentConfig {
    /// Geometry only: crops and flips, no photometric changes.
    pub fn geometric_only() -> Self {
        Self {
            jitter_p: 0.0,
            grayscale_p: 0.0,
            global_blur_p: [0.0, 0.0],
            local_blur_p: 0.0,
            solarize_p: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    #[default]
    WarmupCosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    /// Defaults to 0.1·batch_size/256 when unset.
    pub base_lr: Option<f64>,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub schedule: Schedule,
    pub multicrop: MultiCropConfig,
    pub augment: AugmentConfig,
    pub normalization: Normalization,
    pub encoder_arch: String,
    pub encoder_channels: [usize; 2],
    /// Shorter side images are resized to when loaded; defaults to
    /// global_size·8/7.
    pub load_size: Option<u32>,
    pub seed: u64,
    /// Worker threads for per-sample gradient computation (0 = all cores).
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let enc = EncoderSpec::default();
        Self {
            epochs: 100,
            batch_size: 256,
            momentum: 0.9,
            base_lr: None,
            weight_decay: 1e-4,
            warmup_fraction: 0.1,
            schedule: Schedule::WarmupCosine,
            multicrop: MultiCropConfig::default(),
            augment: AugmentConfig::default(),
            normalization: Normalization::default(),
            encoder_arch: enc.arch,
            encoder_channels: enc.channels,
            load_size: None,
            seed: 0,
            workers: 0,
        }
    }
}

impl TrainConfig {
    pub fn base_lr(&self) -> f64 {
        self.base_lr.unwrap_or(0.1 * self.batch_size as f64 / 256.0)
    }

    pub fn encoder_spec(&self) -> EncoderSpec {
        EncoderSpec {
            arch: self.encoder_arch.clone(),
            channels: self.encoder_channels,
        }
    }

    pub fn load_size(&self) -> u32 {
        self.load_size
            .unwrap_or_else(|| (self.multicrop.global_size * 8).div_ceil(7))
    }

    pub fn parallelism(&self) -> Parallelism {
        match self.workers {
            0 => Parallelism::Auto,
            n => Parallelism::from_workers(n),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Contract(m));
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return bad(format!(
                "warmup_fraction {} not in (0,1)",
                self.warmup_fraction
            ));
        }
        if self.multicrop.num_global < 1 {
            return bad("num_global must be at least 1".into());
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if self.multicrop.local_size == 0 || self.multicrop.global_size == 0 {
            return bad("crop sizes must be positive".into());
        }
        self.encoder_spec().validate()
    }

    /// Parses YAML or JSON (JSON is valid YAML).
    pub fn from_yaml(text: &str) -> Result<Self> {
        serde_yaml::from_str(text).map_err(|e| Error::InvalidData(format!("train config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_yaml(&text)
    }
}

fn random_resized_crop(w: f32, h: f32, scale: [f32; 2], rng: &mut impl Rng) -> CropBox {
    let area = w * h;
    let (lr0, lr1) = ((3.0f32 / 4.0).ln(), (4.0f32 / 3.0).ln());
    for _ in 0..10 {
        let target = area * rng.random_range(scale[0]..=scale[1]);
        let ratio = rng.random_range(lr0..=lr1).exp();
        let cw = (target * ratio).sqrt();
        let ch = (target / ratio).sqrt();
        if cw <= w && ch <= h && cw >= 1.0 && ch >= 1.0 {
            let x = rng.random_range(0.0..=(w - cw));
            let y = rng.random_range(0.0..=(h - ch));
            return CropBox { x, y, w: cw, h: ch };
        }
    }
    // Fallback: central crop with clamped aspect ratio.
    let ratio = w / h;
    let (cw, ch) = if ratio < 3.0 / 4.0 {
        (w, w / (3.0 / 4.0))
    } else if ratio > 4.0 / 3.0 {
        (h * 4.0 / 3.0, h)
    } else {
        (w, h)
    };
    CropBox {
        x: (w - cw) / 2.0,
        y: (h - ch) / 2.0,
        w: cw,
        h: ch,
    }
}

fn photometric(
    t: &mut Tensor3,
    aug: &AugmentConfig,
    blur_p: f32,
    solarize_p: f32,
    rng: &mut impl Rng,
) {
    if rng.random::<f32>() < aug.flip_p {
        imaging::hflip(t);
    }
    if rng.random::<f32>() < aug.jitter_p {
        let factor = |rng: &mut dyn rand::RngCore, s: f32| {
            if s > 0.0 {
                rng.random_range((1.0 - s).max(0.0)..=1.0 + s)
            } else {
                1.0
            }
        };
        let b = factor(rng, aug.brightness);
        let c = factor(rng, aug.contrast);
        let s = factor(rng, aug.saturation);
        let h = if aug.hue > 0.0 {
            rng.random_range(-aug.hue..=aug.hue)
        } else {
            0.0
        };
        imaging::adjust_brightness(t, b);
        imaging::adjust_contrast(t, c);
        imaging::adjust_saturation(t, s);
        imaging::adjust_hue(t, h);
    }
    if rng.random::<f32>() < aug.grayscale_p {
        imaging::grayscale(t);
    }
    if rng.random::<f32>() < blur_p {
        let scale = t.width as f32 / aug.blur_reference_size as f32;
        let sigma = rng.random_range(aug.blur_sigma[0]..=aug.blur_sigma[1]) * scale;
        imaging::gaussian_blur(t, sigma);
    }
    if rng.random::<f32>() < solarize_p {
        imaging::solarize(t, 0.5);
    }
}

/// Produces `num_global` global views followed by `num_local` local views of
/// `image` (values in [0,1]), each augmented and normalized. Images smaller
/// than the local crop size are upscaled first.
pub fn multicrop_views(
    image: &Tensor3,
    crops: &MultiCropConfig,
    aug: &AugmentConfig,
    norm: &Normalization,
    rng: &mut impl Rng,
) -> Vec<Tensor3> {
    let min_side = crops.local_size as usize;
    let upscaled;
    let src = if image.width < min_side || image.height < min_side {
        log::debug!(
            "upscaling {}x{} image below local crop size {min_side}",
            image.width,
            image.height
        );
        let s = min_side as f32 / image.width.min(image.height) as f32;
        let (w, h) = (
            ((image.width as f32 * s).ceil() as usize).max(min_side),
            ((image.height as f32 * s).ceil() as usize).max(min_side),
        );
        let full = CropBox {
            x: 0.0,
            y: 0.0,
            w: image.width as f32,
            h: image.height as f32,
        };
        let t = imaging::crop_resize_rect(image, full, w, h);
        upscaled = t;
        &upscaled
    } else {
        image
    };
    let (w, h) = (src.width as f32, src.height as f32);
    let mut views = Vec::with_capacity(crops.num_views());
    for g in 0..crops.num_global {
        let bx = random_resized_crop(w, h, crops.global_scale, rng);
        let mut v = imaging::crop_resize(src, bx, crops.global_size as usize);
        let (blur_p, sol_p) = if g == 0 {
            (aug.global_blur_p[0], 0.0)
        } else {
            (aug.global_blur_p[1], aug.solarize_p)
        };
        photometric(&mut v, aug, blur_p, sol_p, rng);
        norm.apply(&mut v);
        views.push(v);
    }
    for _ in 0..crops.num_local {
        let bx = random_resized_crop(w, h, crops.local_scale, rng);
        let mut v = imaging::crop_resize(src, bx, crops.local_size as usize);
        photometric(&mut v, aug, aug.local_blur_p, 0.0, rng);
        norm.apply(&mut v);
        views.push(v);
    }
    views
}

/// Evaluation preprocessing: shortest side to `size` (bicubic), central
/// square crop, normalize.
pub fn eval_tensor(img: &RgbImage, size: u32, norm: &Normalization) -> Tensor3 {
    let mut t = Tensor3::from_rgb(&imaging::resize_center_crop(img, size));
    norm.apply(&mut t);
    t
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    /// Learning rate used at every optimizer step.
    pub step_lrs: Vec<f64>,
    pub total_steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub config: TrainConfig,
    pub history: TrainHistory,
    /// `classes[class_index]` is the wnid.
    pub classes: Vec<String>,
    pub catalog_name: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    config: TrainConfig,
    history: TrainHistory,
    catalog_name: Option<String>,
    #[serde(rename = "N")]
    num_classes: usize,
    classes: Vec<String>,
}

pub const WEIGHTS_FILE: &str = "model.bin";
pub const META_FILE: &str = "model.json";

impl Checkpoint {
    pub fn num_classes(&self) -> usize {
        self.model.num_classes
    }

    /// Writes `model.bin` and its `model.json` sidecar into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.model.save(&dir.join(WEIGHTS_FILE))?;
        let meta = CheckpointMeta {
            config: self.config.clone(),
            history: self.history.clone(),
            catalog_name: self.catalog_name.clone(),
            num_classes: self.num_classes(),
            classes: self.classes.clone(),
        };
        let path = dir.join(META_FILE);
        fs::write(&path, serde_json::to_string_pretty(&meta)? + "\n")
            .map_err(|e| Error::io(&path, e))
    }

    /// Accepts a checkpoint directory or the path of its weights file.
    pub fn load(path: &Path) -> Result<Self> {
        let (weights, meta_path): (PathBuf, PathBuf) = if path.is_dir() {
            (path.join(WEIGHTS_FILE), path.join(META_FILE))
        } else {
            (path.to_path_buf(), path.with_extension("json"))
        };
        let model = Model::load(&weights)?;
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: CheckpointMeta =
            serde_json::from_str(&text).map_err(|e| Error::format(&meta_path, e.to_string()))?;
        if meta.num_classes != model.num_classes {
            return Err(Error::format(&meta_path, "N disagrees with weights"));
        }
        Ok(Self {
            model,
            config: meta.config,
            history: meta.history,
            classes: meta.classes,
            catalog_name: meta.catalog_name,
        })
    }

    /// Logits for a decoded image under evaluation preprocessing.
    pub fn logits(&self, img: &RgbImage) -> Vec<f32> {
        let t = eval_tensor(
            img,
            self.config.multicrop.global_size,
            &self.config.normalization,
        );
        self.model.logits(&t)
    }
}

/// Stable 64-bit mix of (seed, a, b) for per-sample RNG streams.
fn stream_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z =
        seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Decodes and resizes every dataset image for training.
pub fn load_training_images(
    dataset: &DatasetView,
    load_size: u32,
    par: Parallelism,
) -> Result<Vec<Tensor3>> {
    par::map(par, &dataset.items, |item| {
        let img = crate::generation::load_image(&item.path)?;
        Ok(Tensor3::from_rgb(&imaging::resize_shortest_side(
            &img, load_size,
        )))
    })
    .into_iter()
    .collect()
}

/// Trains on a dataset directory view.
pub fn train(dataset: &DatasetView, config: &TrainConfig) -> Result<Checkpoint> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Contract("training dataset is empty".into()));
    }
    let images = load_training_images(dataset, config.load_size(), config.parallelism())?;
    let labels = dataset.labels();
    let mut ckpt = train_on_tensors(&images, &labels, dataset.num_classes(), config)?;
    ckpt.classes = dataset.classes.clone();
    ckpt.catalog_name = dataset.catalog_name.clone();
    Ok(ckpt)
}

/// Per-step engine, exposed so callers can drive steps directly.
pub struct Trainer {
    pub model: Model,
    pub optimizer: Sgd,
    pub config: TrainConfig,
}

impl Trainer {
    pub fn new(num_classes: usize, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, u64::MAX, 0));
        let model = Model::new(config.encoder_spec(), num_classes, &mut rng)?;
        Ok(Self {
            model,
            optimizer: Sgd::new(config.momentum as f32, config.weight_decay as f32),
            config: config.clone(),
        })
    }

    /// Mean loss of `batch` (each item a set of views plus its label) and the
    /// averaged gradient.
    pub fn loss_and_grad(&self, batch: &[(Vec<Tensor3>, usize)]) -> (f64, Grads) {
        let per_sample = par::map(self.config.parallelism(), batch, |(views, label)| {
            let mut g = Grads::zeros_like(&self.model);
            let loss = self.model.loss_and_grad(views, *label, &mut g);
            (loss, g)
        });
        let mut total = Grads::zeros_like(&self.model);
        let mut loss = 0.0f64;
        for (l, g) in &per_sample {
            loss += *l as f64;
            total.add_assign(g);
        }
        let k = 1.0 / batch.len() as f32;
        total.scale(k);
        (loss / batch.len() as f64, total)
    }

    /// One SGD step; returns the batch loss measured before the update.
    pub fn step(&mut self, batch: &[(Vec<Tensor3>, usize)], lr: f64) -> f64 {
        let (loss, grads) = self.loss_and_grad(batch);
        self.optimizer.step(&mut self.model, &grads, lr as f32);
        loss
    }
}

/// Trains on in-memory images (values in [0,1], any size ≥ 1 px).
pub fn train_on_tensors(
    images: &[Tensor3],
    labels: &[usize],
    num_classes: usize,
    config: &TrainConfig,
) -> Result<Checkpoint> {
    config.validate()?;
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::Contract(
            "need one label per image and at least one image".into(),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::Contract(format!(
            "label {bad} out of range for {num_classes} classes"
        )));
    }
    let mut per_class = vec![0usize; num_classes];
    labels.iter().for_each(|&l| per_class[l] += 1);
    for (c, &n) in per_class.iter().enumerate() {
        if n == 0 {
            log::warn!("class {c} has no training images");
        }
    }

    let mut trainer = Trainer::new(num_classes, config)?;
    let n = images.len();
    let total = total_steps(n, config.batch_size, config.epochs);
    let base_lr = config.base_lr();
    let mut history = TrainHistory {
        total_steps: total,
        ..Default::default()
    };
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, epoch as u64, 1));
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut epoch_steps = 0;
        let mut lr = 0.0;
        for chunk in order.chunks(config.batch_size) {
            lr = lr_at(step, total, base_lr, config.warmup_fraction)?;
            let batch: Vec<(Vec<Tensor3>, usize)> =
                par::map(trainer.config.parallelism(), chunk, |&i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(
                        config.seed,
                        step as u64 + 2,
                        i as u64,
                    ));
                    let views = multicrop_views(
                        &images[i],
                        &config.multicrop,
                        &config.augment,
                        &config.normalization,
                        &mut rng,
                    );
                    (views, labels[i])
                });
            let loss = trainer.step(&batch, lr);
            if !loss.is_finite() || !trainer.model.all_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite loss {loss} at epoch {epoch}, step {step}, lr {lr:.3e}"
                )));
            }
            history.step_lrs.push(lr);
            loss_sum += loss;
            epoch_steps += 1;
            step += 1;
        }
        let mean_loss = loss_sum / epoch_steps as f64;
        log::info!("epoch {epoch}: loss {mean_loss:.4} lr {lr:.4e}");
        history.epochs.push(EpochStats {
            epoch,
            mean_loss,
            lr,
            steps: epoch_steps,
        });
    }
    debug_assert_eq!(step, total);
    Ok(Checkpoint {
        model: trainer.model,
        config: config.clone(),
        history,
        classes: (0..num_classes).map(|i| format!("class{i}")).collect(),
        catalog_name: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_boundaries() {
        let (t, base) = (1000, 0.1);
        let w = warmup_steps(t, 0.1).unwrap();
        assert_eq!(w, 100);
        assert!((lr_at(w - 1, t, base, 0.1).unwrap() - base).abs() < 1e-12);
        assert!(lr_at(t, t, base, 0.1).unwrap().abs() < 1e-12);
        assert!((lr_at(550, t, base, 0.1).unwrap() - 0.05).abs() < 1e-12);
        assert!((lr_at(0, t, base, 0.1).unwrap() - base / 100.0).abs() < 1e-12);
    }

    #[test]
    fn schedule_contract() {
        assert!(lr_at(0, 0, 0.1, 0.1).is_err());
        assert!(lr_at(11, 10, 0.1, 0.1).is_err());
        assert!(lr_at(0, 10, 0.1, 1.0).is_err());
        // Tiny runs: warmup rounds up to one step.
        assert_eq!(lr_at(0, 1, 0.2, 0.1).unwrap(), 0.2);
        assert_eq!(lr_at(1, 1, 0.2, 0.1).unwrap(), 0.0);
    }

    #[test]
    fn step_counts() {
        assert_eq!(total_steps(24, 8, 100), 300);
        assert_eq!(total_steps(240, 8, 10), 300);
        assert_eq!(total_steps(25, 8, 1), 4);
    }

    fn solid(r: f32, g: f32, b: f32, size: usize) -> Tensor3 {
        let mut t = Tensor3::zeros(3, size, size);
        for (c, v) in [r, g, b].into_iter().enumerate() {
            t.plane_mut(c).iter_mut().for_each(|x| *x = v);
        }
        t
    }

    #[test]
    fn view_counts_and_sizes() {
        let img = solid(0.5, 0.2, 0.1, 40);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let crops = MultiCropConfig::default();
        let views = multicrop_views(
            &img,
            &crops,
            &AugmentConfig::default(),
            &Normalization::default(),
            &mut rng,
        );
        assert_eq!(views.len(), 9);
        assert!(views[..1].iter().all(|v| (v.width, v.height) == (32, 32)));
        assert!(views[1..].iter().all(|v| (v.width, v.height) == (16, 16)));

        let two = MultiCropConfig {
            num_global: 2,
            num_local: 0,
            ..crops
        };
        let views = multicrop_views(
            &img,
            &two,
            &AugmentConfig::default(),
            &Normalization::default(),
            &mut rng,
        );
        assert_eq!(views.len(), 2);
        assert!(views.iter().all(|v| (v.width, v.height) == (32, 32)));
    }

    #[test]
    fn small_images_are_upscaled() {
        let img = solid(0.5, 0.2, 0.1, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let views = multicrop_views(
            &img,
            &MultiCropConfig::default(),
            &AugmentConfig::default(),
            &Normalization::default(),
            &mut rng,
        );
        assert_eq!(views.len(), 9);
        assert!(views.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn crop_geometry_is_seeded() {
        let img = {
            let mut t = solid(0.0, 0.0, 0.0, 40);
            t.data
                .iter_mut()
                .enumerate()
                .for_each(|(i, v)| *v = (i % 97) as f32 / 97.0);
            t
        };
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            multicrop_views(
                &img,
                &MultiCropConfig::default(),
                &AugmentConfig::default(),
                &Normalization::default(),
                &mut rng,
            )
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }

    #[test]
    fn config_yaml() {
        let cfg = TrainConfig::from_yaml("epochs: 5\nbatch_size: 16\nmulticrop:\n  num_local: 2\n")
            .unwrap();
        assert_eq!(cfg.epochs, 5);
        assert_eq!(cfg.multicrop.num_local, 2);
        assert_eq!(cfg.multicrop.num_global, 1);
        assert!((cfg.base_lr() - 0.1 * 16.0 / 256.0).abs() < 1e-12);
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(TrainConfig::from_yaml(&json).unwrap(), cfg);
        assert!(TrainConfig {
            warmup_fraction: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            multicrop: MultiCropConfig {
                num_global: 0,
                ..Default::default()
            },
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
