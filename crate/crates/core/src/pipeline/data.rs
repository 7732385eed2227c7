//! Procedural texture images.
//!
//! An image is a `grid × grid` map of patch classes. One majority class
//! covers a fraction in `[majority_min, majority_max]` of the patches (always
//! more than half); the rest is painted with small rectangles of other
//! classes. Each class has a sinusoidal texture with its own frequency,
//! orientation, phase and brightness offset; pixels get Gaussian noise.
//!
//! The upstream label is the majority class, the downstream labels are the
//! per-patch classes. Every image is a pure function of `(seed, index)`.
//! Textures depend only on the class index and the texture seed, so tasks
//! sharing a texture seed share textures for their common classes.

use std::f32::consts::PI;

use crate::rng::{derive_seed, Stream};
use crate::tensor::Tensor;
use crate::vit::Batch;
use crate::Result;

use super::config::PipelineConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Upstream,
    Downstream,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Texture {
    freq: f32,
    cos: f32,
    sin: f32,
    phase: f32,
    offset: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub seed: u64,
    pub grid: usize,
    pub patch_side: usize,
    pub classes: usize,
    pub noise: f32,
    pub majority_min: f32,
    pub majority_max: f32,
    pub train_images: usize,
    pub val_images: usize,
    textures: Vec<Texture>,
}

/// One generated image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    /// `[T, patch_side²]` pixel rows, patch-major.
    pub pixels: Vec<f32>,
    pub patch_classes: Vec<usize>,
    pub majority: usize,
}

fn texture(texture_seed: u64, c: usize) -> Texture {
    let mut s = Stream::derived(texture_seed, &format!("class.{c}"));
    let golden = 0.618_034_f32;
    let spread = |x: f32| x - x.floor();
    let theta = PI * spread(c as f32 * golden + 0.1 * s.uniform(0.0, 1.0));
    Texture {
        freq: 0.08 + 0.22 * spread(c as f32 * 0.381_966 + 0.05 * s.uniform(0.0, 1.0)),
        cos: theta.cos(),
        sin: theta.sin(),
        phase: 2.0 * PI * s.uniform(0.0, 1.0),
        offset: 0.6 * s.uniform_sym(),
    }
}

impl SyntheticTask {
    pub fn new(kind: TaskKind, cfg: &PipelineConfig) -> Self {
        let (label, classes) = match kind {
            TaskKind::Upstream => ("data.upstream", cfg.model.n_classes_upstream),
            TaskKind::Downstream => ("data.downstream", cfg.model.n_classes_downstream),
        };
        let texture_seed = derive_seed(cfg.seed, "data.textures");
        let patch_side = (cfg.model.patch_dim as f64).sqrt().round() as usize;
        Self {
            kind,
            seed: derive_seed(cfg.seed, label),
            grid: cfg.model.image_grid,
            patch_side,
            classes,
            noise: cfg.data.noise,
            majority_min: cfg.data.majority_min,
            majority_max: cfg.data.majority_max,
            train_images: cfg.data.train_images,
            val_images: cfg.data.val_images,
            textures: (0..classes).map(|c| texture(texture_seed, c)).collect(),
        }
    }

    pub fn upstream(cfg: &PipelineConfig) -> Self {
        Self::new(TaskKind::Upstream, cfg)
    }

    pub fn downstream(cfg: &PipelineConfig) -> Self {
        Self::new(TaskKind::Downstream, cfg)
    }

    /// The same images read the other way (upstream labels vs per-patch).
    pub fn with_kind(&self, kind: TaskKind) -> Self {
        Self { kind, ..self.clone() }
    }

    pub fn tokens(&self) -> usize {
        self.grid * self.grid
    }

    pub fn image(&self, index: usize) -> Image {
        let g = self.grid;
        let t = g * g;
        let mut s = Stream::derived(self.seed, &format!("image.{index}"));
        let majority = s.below(self.classes);
        let frac = if self.majority_max > self.majority_min {
            s.uniform(self.majority_min, self.majority_max)
        } else {
            self.majority_min
        };
        let minority = if self.classes > 1 { ((1.0 - frac) * t as f32).round() as usize } else { 0 };
        let minority = minority.min((t - 1) / 2);
        let mut classes = vec![majority; t];
        let mut painted = vec![false; t];
        let mut left = minority;
        while left > 0 {
            let other = (majority + 1 + s.below(self.classes - 1)) % self.classes;
            let (h, w) = (1 + s.below(3), 1 + s.below(3));
            let (r0, c0) = (s.below(g), s.below(g));
            for r in r0..(r0 + h).min(g) {
                for c in c0..(c0 + w).min(g) {
                    let p = r * g + c;
                    if left > 0 && !painted[p] {
                        painted[p] = true;
                        classes[p] = other;
                        left -= 1;
                    }
                }
            }
        }
        let jitter = 2.0 * PI * s.uniform(0.0, 1.0);
        let ps = self.patch_side;
        let mut pixels = Vec::with_capacity(t * ps * ps);
        for p in 0..t {
            let tex = &self.textures[classes[p]];
            let (gr, gc) = (p / g, p % g);
            for v in 0..ps {
                for u in 0..ps {
                    let x = (gc * ps + u) as f32;
                    let y = (gr * ps + v) as f32;
                    let arg = 2.0 * PI * tex.freq * (x * tex.cos + y * tex.sin) + tex.phase + jitter;
                    pixels.push(tex.offset + arg.sin() + self.noise * s.normal());
                }
            }
        }
        Image {
            pixels,
            patch_classes: classes,
            majority,
        }
    }

    pub fn generate_batch(&self, indices: &[usize]) -> Result<Batch> {
        let t = self.tokens();
        let pd = self.patch_side * self.patch_side;
        let mut data = Vec::with_capacity(indices.len() * t * pd);
        let mut labels = Vec::new();
        for &i in indices {
            let img = self.image(i);
            data.extend_from_slice(&img.pixels);
            match self.kind {
                TaskKind::Upstream => labels.push(img.majority),
                TaskKind::Downstream => labels.extend_from_slice(&img.patch_classes),
            }
        }
        Ok(Batch {
            patches: Tensor::new(vec![indices.len(), t, pd], data)?,
            labels,
        })
    }

    /// Training batch for `step` of the stream named `label`: indices drawn
    /// uniformly from the training range.
    pub fn train_batch(&self, label: &str, step: usize, batch: usize) -> Result<Batch> {
        let mut s = Stream::derived(self.seed, &format!("{label}.step.{step}"));
        let idx: Vec<usize> = (0..batch).map(|_| s.below(self.train_images)).collect();
        self.generate_batch(&idx)
    }

    /// The validation range `[train_images, train_images + val_images)` in
    /// batches of at most `batch`.
    pub fn val_batches(&self, batch: usize) -> Result<Vec<Batch>> {
        let idx: Vec<usize> = (self.train_images..self.train_images + self.val_images).collect();
        idx.chunks(batch).map(|c| self.generate_batch(c)).collect()
    }
}
