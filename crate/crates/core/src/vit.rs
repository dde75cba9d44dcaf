//! Vision transformer backbone.
//!
//! One weight set serves both crop sizes: positional embeddings are learnt
//! for the global grid and bilinearly resampled for smaller crops. The
//! resampling is a fixed linear map, so it runs on the tape as a matmul and
//! local crops send gradient back into the global-grid embedding.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Block, LayerNorm, Linear};
use crate::params::{Bound, ParamBuilder, ParamId, ParamSet};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub image_size_global: usize,
    pub image_size_local: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub drop_path_rate: f32,
}

impl Default for ViTConfig {
    fn default() -> Self {
        ViTConfig {
            image_size_global: 32,
            image_size_local: 16,
            patch_size: 4,
            embed_dim: 64,
            depth: 4,
            num_heads: 4,
            mlp_ratio: 4,
            drop_path_rate: 0.1,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || self.image_size_global % p != 0 || self.image_size_local % p != 0 {
            return Err(Error::Config(format!(
                "crop sizes {} and {} must be positive multiples of patch_size {p}",
                self.image_size_global, self.image_size_local
            )));
        }
        if self.image_size_global == 0 || self.image_size_local == 0 {
            return Err(Error::Config("crop sizes must be positive".into()));
        }
        if self.num_heads == 0 || self.embed_dim == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return Err(Error::Config(format!(
                "drop_path_rate {} must lie in [0, 1)",
                self.drop_path_rate
            )));
        }
        Ok(())
    }

    pub fn patches_for(&self, size: usize) -> usize {
        (size / self.patch_size).pow(2)
    }
}

/// Class token `[b, d]` and patch tokens `[b, P, d]` for one crop batch.
#[derive(Clone, Copy, Debug)]
pub struct BackboneOutput {
    pub class_token: Var,
    pub patch_tokens: Var,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: ViTConfig,
    pub patch_embed: Linear,
    pub cls_token: ParamId,
    pub pos_embed: ParamId,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

impl Backbone {
    pub fn new(b: &mut ParamBuilder<'_>, config: &ViTConfig) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let patch_dim = config.patch_size * config.patch_size * 3;
        let grid = config.patches_for(config.image_size_global);
        let patch_embed = Linear::new(&mut b.child("patch_embed"), patch_dim, d)?;
        let cls_token = b.trunc_normal("cls_token", &[1, d], 0.02)?;
        let pos_embed = b.trunc_normal("pos_embed", &[1 + grid, d], 0.02)?;
        let blocks = (0..config.depth)
            .map(|i| {
                // stochastic depth grows linearly with block index
                let rate = if config.depth > 1 {
                    config.drop_path_rate * i as f32 / (config.depth - 1) as f32
                } else {
                    config.drop_path_rate
                };
                Block::new(
                    &mut b.child(&format!("blocks.{i}")),
                    d,
                    config.num_heads,
                    config.mlp_ratio,
                    rate,
                )
            })
            .collect::<Result<_>>()?;
        let norm = LayerNorm::new(&mut b.child("norm"), d)?;
        Ok(Backbone {
            config: config.clone(),
            patch_embed,
            cls_token,
            pos_embed,
            blocks,
            norm,
        })
    }

    /// `images: [b, S, S, 3]` with `S` one of the two configured crop sizes.
    /// `rng` enables drop-path (training mode).
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        images: &Tensor,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<BackboneOutput> {
        let s = images.shape();
        let cfg = &self.config;
        if s.len() != 4
            || s[3] != 3
            || s[1] != s[2]
            || (s[1] != cfg.image_size_global && s[1] != cfg.image_size_local)
        {
            return Err(Error::dim(
                "backbone",
                format!(
                    "expected [b, S, S, 3] with S in {{{}, {}}}, got {s:?}",
                    cfg.image_size_global, cfg.image_size_local
                ),
            ));
        }
        let b = s[0];
        let d = cfg.embed_dim;
        let num_patches = cfg.patches_for(s[1]);

        let patches = tape.constant(patchify(images, cfg.patch_size)?);
        let x = self.patch_embed.forward(tape, p, patches)?;
        let cls = tape.expand_leading(p[self.cls_token], b)?;
        let mut x = tape.concat(&[cls, x], 1)?;

        let grid = cfg.patches_for(cfg.image_size_global);
        let pos = if num_patches == grid {
            p[self.pos_embed]
        } else {
            let class_row = tape.narrow(p[self.pos_embed], 0, 0, 1)?;
            let grid_rows = tape.narrow(p[self.pos_embed], 0, 1, grid)?;
            let m = tape.constant(interpolation_matrix(side(grid)?, side(num_patches)?)?);
            let resampled = tape.matmul(m, grid_rows)?;
            tape.concat(&[class_row, resampled], 0)?
        };
        x = tape.add_broadcast(x, pos)?;

        for block in &self.blocks {
            x = block.forward(tape, p, x, rng.as_deref_mut())?;
        }
        x = self.norm.forward(tape, p, x)?;

        let c = tape.narrow(x, 1, 0, 1)?;
        let class_token = tape.reshape(c, &[b, d])?;
        let patch_tokens = tape.narrow(x, 1, 1, num_patches)?;
        Ok(BackboneOutput {
            class_token,
            patch_tokens,
        })
    }

    /// Eval-mode forward without gradients; returns `(class, patches)`.
    pub fn embed(&self, params: &ParamSet, images: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let out = self.forward(&mut tape, &p, images, None)?;
        Ok((
            tape.value(out.class_token).clone(),
            tape.value(out.patch_tokens).clone(),
        ))
    }
}

fn side(tokens: usize) -> Result<usize> {
    let s = (tokens as f64).sqrt().round() as usize;
    if s * s != tokens {
        return Err(Error::Contract(format!("{tokens} tokens do not form a square grid")));
    }
    Ok(s)
}

/// Splits `[b, H, W, 3]` into non-overlapping `p×p` patches in row-major
/// patch order, each flattened row-major then by channel:
/// `[b, (H/p)·(W/p), p·p·3]`.
pub fn patchify(images: &Tensor, patch_size: usize) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 || s[3] != 3 {
        return Err(Error::dim("patchify", format!("expected [b, H, W, 3], got {s:?}")));
    }
    let (b, h, w) = (s[0], s[1], s[2]);
    let p = patch_size;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::dim(
            "patchify",
            format!("{h}x{w} image is not divisible into {p}x{p} patches"),
        ));
    }
    let (gh, gw) = (h / p, w / p);
    let src = images.data();
    let mut out = Vec::with_capacity(src.len());
    for bi in 0..b {
        for py in 0..gh {
            for px in 0..gw {
                for dy in 0..p {
                    let row = ((bi * h + py * p + dy) * w + px * p) * 3;
                    out.extend_from_slice(&src[row..row + p * 3]);
                }
            }
        }
    }
    Tensor::new([b, gh * gw, p * p * 3], out)
}

/// 1-D bilinear resampling weights `[dst, src]` with half-pixel centres.
fn linear_weights(src: usize, dst: usize) -> Vec<f32> {
    let mut m = vec![0.0; dst * src];
    let scale = src as f64 / dst as f64;
    for i in 0..dst {
        let x = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
        let i0 = x.floor() as usize;
        let i1 = (i0 + 1).min(src - 1);
        let w = (x - i0 as f64) as f32;
        m[i * src + i0] += 1.0 - w;
        m[i * src + i1] += w;
    }
    m
}

/// Bilinear map from a `src×src` token grid to `dst×dst`, as a
/// `[dst², src²]` matrix over row-major grid positions.
pub fn interpolation_matrix(src: usize, dst: usize) -> Result<Tensor> {
    if src == 0 || dst == 0 {
        return Err(Error::Contract("empty token grid".into()));
    }
    let r = linear_weights(src, dst);
    let (n_out, n_in) = (dst * dst, src * src);
    let mut m = vec![0.0; n_out * n_in];
    for yi in 0..dst {
        for xi in 0..dst {
            let row = yi * dst + xi;
            for ys in 0..src {
                let wy = r[yi * src + ys];
                if wy == 0.0 {
                    continue;
                }
                for xs in 0..src {
                    m[row * n_in + ys * src + xs] = wy * r[xi * src + xs];
                }
            }
        }
    }
    Tensor::new([n_out, n_in], m)
}

/// Resamples `pos: [1 + P₀, d]` to `[1 + target, d]`: the class row is kept,
/// the grid rows are bilinearly interpolated.
pub fn interpolate_pos_embed(pos: &Tensor, target_patches: usize) -> Result<Tensor> {
    if pos.rank() != 2 || pos.shape()[0] < 2 {
        return Err(Error::dim(
            "interpolate_pos_embed",
            format!("expected [1 + P, d], got {:?}", pos.shape()),
        ));
    }
    let (rows, d) = (pos.shape()[0], pos.shape()[1]);
    let src = side(rows - 1)?;
    let dst = side(target_patches)?;
    if src == dst {
        return Ok(pos.clone());
    }
    let grid = Tensor::new([rows - 1, d], pos.data()[d..].to_vec())?;
    let resampled = crate::tensor::ops::matmul(&interpolation_matrix(src, dst)?, &grid)?;
    let mut data = pos.data()[..d].to_vec();
    data.extend_from_slice(resampled.data());
    Tensor::new([1 + target_patches, d], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamSet;
    use rand::SeedableRng;

    fn image(b: usize, s: usize, f: impl Fn(usize, usize, usize, usize) -> f32) -> Tensor {
        let mut data = Vec::new();
        for bi in 0..b {
            for y in 0..s {
                for x in 0..s {
                    for c in 0..3 {
                        data.push(f(bi, y, x, c));
                    }
                }
            }
        }
        Tensor::new([b, s, s, 3], data).unwrap()
    }

    fn build(cfg: &ViTConfig, seed: u64) -> (Backbone, ParamSet) {
        let mut set = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bb = Backbone::new(&mut ParamBuilder::new(&mut set, &mut rng).child("backbone"), cfg).unwrap();
        (bb, set)
    }

    #[test]
    fn patchify_shapes_and_identity() {
        let img = image(1, 8, |_, y, x, c| (y * 8 + x) as f32 + c as f32 * 0.1);
        let p = patchify(&img, 4).unwrap();
        assert_eq!(p.shape(), &[1, 4, 48]);
        let whole = patchify(&img, 8).unwrap();
        assert_eq!(whole.shape(), &[1, 1, 192]);
        assert_eq!(whole.data(), img.data());
        assert!(patchify(&img, 3).is_err());
    }

    #[test]
    fn patchify_checkerboard_blocks_are_constant() {
        // 2x2 blocks of alternating value; patch 2 aligns with blocks
        let img = image(1, 8, |_, y, x, _| ((y / 2 + x / 2) % 2) as f32);
        let p = patchify(&img, 2).unwrap();
        for (i, patch) in p.data().chunks(12).enumerate() {
            let (py, px) = (i / 4, i % 4);
            let expect = ((py + px) % 2) as f32;
            assert!(patch.iter().all(|&v| v == expect), "patch {i}");
        }
    }

    #[test]
    fn patchify_matches_index_map() {
        let img = image(2, 4, |b, y, x, c| (b * 1000 + y * 100 + x * 10 + c) as f32);
        let p = patchify(&img, 2).unwrap();
        for b in 0..2 {
            for patch in 0..4 {
                for e in 0..12 {
                    let (py, px) = (patch / 2, patch % 2);
                    let (dy, dx, c) = (e / 6, (e / 3) % 2, e % 3);
                    let expect = (b * 1000 + (py * 2 + dy) * 100 + (px * 2 + dx) * 10 + c) as f32;
                    assert_eq!(p.data()[(b * 4 + patch) * 12 + e], expect);
                }
            }
        }
    }

    #[test]
    fn forward_shapes_for_both_crop_sizes() {
        let cfg = ViTConfig::default();
        let (bb, set) = build(&cfg, 0);
        let g = image(2, 32, |b, y, x, c| ((b + y * 3 + x * 5 + c) % 7) as f32 / 7.0);
        let (c, p) = bb.embed(&set, &g).unwrap();
        assert_eq!(c.shape(), &[2, 64]);
        assert_eq!(p.shape(), &[2, 64, 64]);
        let l = image(3, 16, |_, y, x, _| (y + x) as f32 / 32.0);
        let (c, p) = bb.embed(&set, &l).unwrap();
        assert_eq!(c.shape(), &[3, 64]);
        assert_eq!(p.shape(), &[3, 16, 64]);
        assert!(bb.embed(&set, &image(1, 24, |_, _, _, _| 0.0)).is_err());
    }

    #[test]
    fn eval_forward_is_deterministic_and_batch_independent() {
        let cfg = ViTConfig { depth: 2, ..ViTConfig::default() };
        let (bb, set) = build(&cfg, 1);
        let imgs = image(3, 16, |b, y, x, c| ((b * 7 + y * 3 + x + c) % 11) as f32 / 11.0);
        let (c1, _) = bb.embed(&set, &imgs).unwrap();
        let (c2, _) = bb.embed(&set, &imgs).unwrap();
        assert_eq!(c1.data(), c2.data());
        // reversed batch gives reversed outputs
        let rev = imgs.gather_rows(&[2, 1, 0]).unwrap();
        let (cr, _) = bb.embed(&set, &rev).unwrap();
        assert_eq!(cr.data(), c1.gather_rows(&[2, 1, 0]).unwrap().data());
    }

    #[test]
    fn depth_zero_class_token_is_normed_cls_plus_pos() {
        let cfg = ViTConfig { depth: 0, ..ViTConfig::default() };
        let (bb, set) = build(&cfg, 2);
        let imgs = image(2, 32, |b, y, x, c| ((b + y + x + c) % 5) as f32);
        let (c, _) = bb.embed(&set, &imgs).unwrap();
        let cls = set.get(bb.cls_token).data();
        let pos = set.get(bb.pos_embed).data();
        let x: Vec<f32> = cls.iter().zip(pos).map(|(a, b)| a + b).collect();
        let mean = x.iter().sum::<f32>() / 64.0;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / 64.0;
        for bi in 0..2 {
            for j in 0..64 {
                let expect = (x[j] - mean) / (var + crate::nn::LN_EPS).sqrt();
                assert!((c.data()[bi * 64 + j] - expect).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn parameter_count_is_crop_size_independent() {
        let (_, a) = build(&ViTConfig::default(), 0);
        let (_, b) = build(&ViTConfig { image_size_local: 8, ..ViTConfig::default() }, 0);
        assert_eq!(a.numel(), b.numel());
        assert_eq!(a.digest(), b.digest());
    }

    #[test]
    fn pos_embed_interpolation() {
        let pos = Tensor::new([5, 3], (0..15).map(|v| v as f32).collect()).unwrap();
        assert_eq!(interpolate_pos_embed(&pos, 4).unwrap(), pos);

        let mut constant = vec![7.0, 8.0, 9.0];
        constant.extend(std::iter::repeat_n([1.5f32, -2.0, 0.25], 4).flatten());
        let pos = Tensor::new([5, 3], constant).unwrap();
        let up = interpolate_pos_embed(&pos, 16).unwrap();
        assert_eq!(up.shape(), &[17, 3]);
        assert_eq!(&up.data()[..3], &[7.0, 8.0, 9.0]);
        for row in up.data()[3..].chunks(3) {
            for (a, b) in row.iter().zip([1.5f32, -2.0, 0.25]) {
                assert!((a - b).abs() < 1e-6);
            }
        }
        assert!(interpolate_pos_embed(&pos, 5).is_err());
    }

    #[test]
    fn interpolation_rows_sum_to_one() {
        let m = interpolation_matrix(8, 4).unwrap();
        for row in m.data().chunks(64) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }
}
