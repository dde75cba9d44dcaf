//! Per-image crop sets and batch assembly.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::{strong_canvas, weak_canvas, AugmentPolicy, CropBox};
use super::{Dataset, ImageRef, Normalization};
use crate::error::Result;
use crate::rng;
use crate::tensor::Tensor;
use crate::train::objective::ViewBatch;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiCropConfig {
    pub global_size: usize,
    pub local_size: usize,
    pub num_locals: usize,
    pub global_scale: (f32, f32),
    pub local_scale: (f32, f32),
    pub teacher_policy: AugmentPolicy,
    pub student_policy: AugmentPolicy,
}

impl Default for MultiCropConfig {
    fn default() -> Self {
        MultiCropConfig {
            global_size: 32,
            local_size: 16,
            num_locals: 10,
            global_scale: (0.25, 1.0),
            local_scale: (0.05, 0.25),
            teacher_policy: AugmentPolicy::weak(),
            student_policy: AugmentPolicy::strong(),
        }
    }
}

/// Where a crop came from and which chain produced it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropTag {
    pub image: usize,
    pub view: usize,
    pub global: bool,
    pub auto_augment: bool,
    pub source: CropBox,
}

/// Crops of one image: two globals then the locals.
#[derive(Clone, Debug)]
pub struct CropSet {
    pub globals: [Tensor; 2],
    pub locals: Vec<Tensor>,
    pub tags: Vec<CropTag>,
}

/// Two weak-policy globals followed by `num_locals` student-policy locals.
pub fn multi_crop(
    img: ImageRef<'_>,
    image_index: usize,
    rng: &mut ChaCha8Rng,
    cfg: &MultiCropConfig,
    norm: &Normalization,
) -> CropSet {
    let mut tags = Vec::with_capacity(2 + cfg.num_locals);
    let mut global = |view: usize, rng: &mut ChaCha8Rng| {
        let (c, source) = weak_canvas(img, rng, cfg.global_size, cfg.global_scale, &cfg.teacher_policy);
        tags.push(CropTag { image: image_index, view, global: true, auto_augment: false, source });
        c.normalize(norm)
    };
    let globals = [global(0, rng), global(1, rng)];
    let locals = (0..cfg.num_locals)
        .map(|v| {
            let (c, source, auto) = student_crop(img, rng, cfg);
            tags.push(CropTag { image: image_index, view: 2 + v, global: false, auto_augment: auto, source });
            c.normalize(norm)
        })
        .collect();
    CropSet { globals, locals, tags }
}

fn student_crop(
    img: ImageRef<'_>,
    rng: &mut ChaCha8Rng,
    cfg: &MultiCropConfig,
) -> (super::augment::Canvas, CropBox, bool) {
    match cfg.student_policy.kind {
        super::AugmentKind::Strong => strong_canvas(img, rng, cfg.local_size, cfg.local_scale, &cfg.student_policy),
        super::AugmentKind::Weak => {
            let (c, b) = weak_canvas(img, rng, cfg.local_size, cfg.local_scale, &cfg.student_policy);
            (c, b, false)
        }
    }
}

/// Crops for a batch of images, image-major.
#[derive(Clone, Debug)]
pub struct CropBatch {
    /// `[b, 2, Sg, Sg, 3]`.
    pub globals: Tensor,
    /// `[b, V, Sl, Sl, 3]`, absent when `V = 0`.
    pub locals: Option<Tensor>,
    pub tags: Vec<CropTag>,
}

impl CropBatch {
    /// Crops every listed image with its own stream `(seed, epoch, index)`.
    pub fn build(
        ds: &Dataset,
        indices: &[usize],
        seed: u64,
        epoch: u64,
        cfg: &MultiCropConfig,
        norm: &Normalization,
    ) -> Result<Self> {
        let b = indices.len();
        let (sg, sl, v) = (cfg.global_size, cfg.local_size, cfg.num_locals);
        let mut globals = Vec::with_capacity(b * 2 * sg * sg * 3);
        let mut locals = Vec::with_capacity(b * v * sl * sl * 3);
        let mut tags = Vec::new();
        for &i in indices {
            let mut r = rng::stream(seed, &[rng::TAG_AUGMENT, epoch, i as u64]);
            let set = multi_crop(ds.image(i), i, &mut r, cfg, norm);
            for g in &set.globals {
                globals.extend_from_slice(g.data());
            }
            for l in &set.locals {
                locals.extend_from_slice(l.data());
            }
            tags.extend(set.tags);
        }
        Ok(CropBatch {
            globals: Tensor::new([b, 2, sg, sg, 3], globals)?,
            locals: if v == 0 { None } else { Some(Tensor::new([b, v, sl, sl, 3], locals)?) },
            tags,
        })
    }

    pub fn batch(&self) -> usize {
        self.globals.shape()[0]
    }

    /// Re-stacks the crops view-major for the networks.
    pub fn to_views(&self) -> Result<ViewBatch> {
        Ok(ViewBatch {
            batch: self.batch(),
            globals: view_major(&self.globals)?,
            locals: self.locals.as_ref().map(view_major).transpose()?,
        })
    }
}

/// `[b, v, …] → [v·b, …]`.
fn view_major(t: &Tensor) -> Result<Tensor> {
    let s = t.shape();
    let (b, v) = (s[0], s[1]);
    let per: usize = s[2..].iter().product();
    let mut out = Vec::with_capacity(t.numel());
    for view in 0..v {
        for i in 0..b {
            let o = (i * v + view) * per;
            out.extend_from_slice(&t.data()[o..o + per]);
        }
    }
    let mut shape = vec![v * b];
    shape.extend_from_slice(&s[2..]);
    Tensor::new(shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{synth_hierarchical_dataset, SynthSpec};

    #[test]
    fn crop_counts() {
        let ds = synth_hierarchical_dataset(SynthSpec::new(0, 1));
        let norm = ds.normalization();
        for v in [0, 10] {
            let cfg = MultiCropConfig { num_locals: v, ..MultiCropConfig::default() };
            let mut r = rng::stream(0, &[1]);
            let set = multi_crop(ds.image(0), 0, &mut r, &cfg, &norm);
            assert_eq!(2 + set.locals.len(), 2 + v);
            assert_eq!(set.tags.len(), 2 + v);
            for t in &set.tags {
                let a = t.source.area_fraction(32, 32);
                let (lo, hi) = if t.global { cfg.global_scale } else { cfg.local_scale };
                assert!(a >= lo - 1e-4 && a <= hi + 1e-4);
            }
        }
    }

    #[test]
    fn batch_is_order_independent_per_image() {
        let ds = synth_hierarchical_dataset(SynthSpec::new(0, 1));
        let norm = ds.normalization();
        let cfg = MultiCropConfig { num_locals: 2, ..MultiCropConfig::default() };
        let a = CropBatch::build(&ds, &[3, 5], 7, 1, &cfg, &norm).unwrap();
        let b = CropBatch::build(&ds, &[5, 3], 7, 1, &cfg, &norm).unwrap();
        let per: usize = 2 * 32 * 32 * 3;
        assert_eq!(&a.globals.data()[..per], &b.globals.data()[per..]);
        let views = a.to_views().unwrap();
        assert_eq!(views.globals.shape(), &[4, 32, 32, 3]);
        assert_eq!(views.locals.as_ref().unwrap().shape(), &[4, 16, 16, 3]);
        // view 1 of image 0 sits at row b + 0
        let img = 32 * 32 * 3;
        assert_eq!(&views.globals.data()[2 * img..3 * img], &a.globals.data()[img..2 * img]);
    }
}
