//! Straight-line f64 reference of the whole objective.
//!
//! Everything here is written from the definitions, reads weights from a
//! [`ParamSet`] by name only, and shares no code with the engine kernels,
//! layers or losses.

use crate::error::{Error, Result};
use crate::params::ParamSet;

/// Row-major f64 matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub v: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, v: Vec<f64>) -> Self {
        assert_eq!(v.len(), rows * cols);
        Mat { rows, cols, v }
    }

    pub fn from_f32(rows: usize, cols: usize, v: &[f32]) -> Self {
        Mat::new(rows, cols, v.iter().map(|&x| x as f64).collect())
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.v[i * self.cols..(i + 1) * self.cols]
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        self.v[i * self.cols + j]
    }
}

fn param(p: &ParamSet, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
    let t = p
        .by_name(name)
        .ok_or_else(|| Error::Contract(format!("reference needs tensor `{name}`")))?;
    Ok((t.shape().to_vec(), t.data().iter().map(|&x| x as f64).collect()))
}

pub fn linear(p: &ParamSet, prefix: &str, x: &Mat) -> Result<Mat> {
    let (ws, w) = param(p, &format!("{prefix}.weight"))?;
    let (_, b) = param(p, &format!("{prefix}.bias"))?;
    let (i_dim, o_dim) = (ws[0], ws[1]);
    assert_eq!(x.cols, i_dim, "{prefix}");
    let mut out = vec![0.0; x.rows * o_dim];
    for r in 0..x.rows {
        for o in 0..o_dim {
            let mut s = b[o];
            for i in 0..i_dim {
                s += x.get(r, i) * w[i * o_dim + o];
            }
            out[r * o_dim + o] = s;
        }
    }
    Ok(Mat::new(x.rows, o_dim, out))
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn layer_norm(p: &ParamSet, prefix: &str, x: &Mat, eps: f64) -> Result<Mat> {
    let (_, g) = param(p, &format!("{prefix}.weight"))?;
    let (_, b) = param(p, &format!("{prefix}.bias"))?;
    let n = x.cols as f64;
    let mut out = Vec::with_capacity(x.v.len());
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        for (j, v) in row.iter().enumerate() {
            out.push((v - mean) / (var + eps).sqrt() * g[j] + b[j]);
        }
    }
    Ok(Mat::new(x.rows, x.cols, out))
}

/// Multi-head self-attention over the rows of `qkv: [t, 3d]`.
pub fn attention(qkv: &Mat, heads: usize) -> Mat {
    let (t, d) = (qkv.rows, qkv.cols / 3);
    let dh = d / heads;
    let mut out = vec![0.0; t * d];
    for h in 0..heads {
        for i in 0..t {
            let q = |c: usize| qkv.get(i, h * dh + c);
            let scores: Vec<f64> = (0..t)
                .map(|j| (0..dh).map(|c| q(c) * qkv.get(j, d + h * dh + c)).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let w = softmax(&scores);
            for c in 0..dh {
                out[i * d + h * dh + c] = (0..t).map(|j| w[j] * qkv.get(j, 2 * d + h * dh + c)).sum();
            }
        }
    }
    Mat::new(t, d, out)
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    Mat::new(a.rows, a.cols, a.v.iter().zip(&b.v).map(|(x, y)| x + y).collect())
}

/// Pre-norm transformer block without stochastic depth.
pub fn block(p: &ParamSet, prefix: &str, x: &Mat, heads: usize) -> Result<Mat> {
    let h = layer_norm(p, &format!("{prefix}.norm1"), x, 1e-6)?;
    let qkv = linear(p, &format!("{prefix}.attn.qkv"), &h)?;
    let a = linear(p, &format!("{prefix}.attn.proj"), &attention(&qkv, heads))?;
    let x = add(x, &a);
    let h = layer_norm(p, &format!("{prefix}.norm2"), &x, 1e-6)?;
    let mut h = linear(p, &format!("{prefix}.mlp.fc1"), &h)?;
    h.v.iter_mut().for_each(|v| *v = gelu(*v));
    let h = linear(p, &format!("{prefix}.mlp.fc2"), &h)?;
    Ok(add(&x, &h))
}

/// GELU MLP with `layers` linear maps named `{prefix}.0`, `{prefix}.1`, …
pub fn mlp(p: &ParamSet, prefix: &str, layers: usize, x: &Mat) -> Result<Mat> {
    let mut x = x.clone();
    for i in 0..layers {
        x = linear(p, &format!("{prefix}.{i}"), &x)?;
        if i + 1 < layers {
            x.v.iter_mut().for_each(|v| *v = gelu(*v));
        }
    }
    Ok(x)
}

/// Bilinear weight of source index `s` for target index `i` (half-pixel
/// centres, edge clamped).
fn bilinear_weight(src: usize, dst: usize, i: usize, s: usize) -> f64 {
    let x = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
    let lo = x.floor() as usize;
    let hi = (lo + 1).min(src - 1);
    let frac = x - lo as f64;
    let mut w = 0.0;
    if s == lo {
        w += 1.0 - frac;
    }
    if s == hi {
        w += frac;
    }
    w
}

pub struct BackboneShape {
    pub patch: usize,
    pub heads: usize,
    pub depth: usize,
    pub global_size: usize,
}

/// One image `[S, S, 3]` (row-major, channel last) → (class token, patch tokens).
pub fn backbone(p: &ParamSet, shape: &BackboneShape, image: &[f32], size: usize) -> Result<(Vec<f64>, Mat)> {
    let ps = shape.patch;
    let g = size / ps;
    let mut patches = Vec::with_capacity(g * g * ps * ps * 3);
    for gy in 0..g {
        for gx in 0..g {
            for y in 0..ps {
                for x in 0..ps {
                    for c in 0..3 {
                        patches.push(image[((gy * ps + y) * size + gx * ps + x) * 3 + c] as f64);
                    }
                }
            }
        }
    }
    let tokens = linear(p, "backbone.patch_embed", &Mat::new(g * g, ps * ps * 3, patches))?;
    let (cs, cls) = param(p, "backbone.cls_token")?;
    let d = cs[1];
    let (_, pos) = param(p, "backbone.pos_embed")?;
    let src = shape.global_size / ps;
    let mut x = Vec::with_capacity((1 + g * g) * d);
    for j in 0..d {
        x.push(cls[j] + pos[j]);
    }
    for t in 0..g * g {
        let (ty, tx) = (t / g, t % g);
        for j in 0..d {
            let mut pe = 0.0;
            for sy in 0..src {
                for sx in 0..src {
                    let w = bilinear_weight(src, g, ty, sy) * bilinear_weight(src, g, tx, sx);
                    if w != 0.0 {
                        pe += w * pos[(1 + sy * src + sx) * d + j];
                    }
                }
            }
            x.push(tokens.get(t, j) + pe);
        }
    }
    let mut x = Mat::new(1 + g * g, d, x);
    for i in 0..shape.depth {
        x = block(p, &format!("backbone.blocks.{i}"), &x, shape.heads)?;
    }
    let x = layer_norm(p, "backbone.norm", &x, 1e-6)?;
    let cls_out = x.row(0).to_vec();
    let patch_tokens = Mat::new(g * g, d, x.v[d..].to_vec());
    Ok((cls_out, patch_tokens))
}

pub fn mean_rows(x: &Mat) -> Vec<f64> {
    (0..x.cols).map(|j| (0..x.rows).map(|i| x.get(i, j)).sum::<f64>() / x.rows as f64).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

/// Indices of the `k` rows most cosine-similar to `q`, best first, older
/// index first on exact ties.
pub fn topk(rows: &[Vec<f64>], q: &[f64], k: usize) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = rows.iter().enumerate().map(|(i, r)| (cosine(q, r), i)).collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    scored.into_iter().take(k).map(|(_, i)| i).collect()
}

/// `−log( e^{cos(z1,z2)/τ} / (e^{cos(z1,z2)/τ} + Σ e^{cos(z2,n)/τ}) )`.
pub fn infonce(z1: &[f64], z2: &[f64], negatives: &[Vec<f64>], tau: f64) -> f64 {
    let mut logits = vec![cosine(z1, z2) / tau];
    logits.extend(negatives.iter().map(|n| cosine(z2, n) / tau));
    -softmax(&logits)[0].ln()
}

/// Aggregator over `[query; neighbours]`, output is the first token.
pub fn aggregate(p: &ParamSet, depth: usize, heads: usize, query: &[f64], neighbors: &[Vec<f64>]) -> Result<Vec<f64>> {
    let d = query.len();
    let mut v = query.to_vec();
    for n in neighbors {
        v.extend_from_slice(n);
    }
    let mut x = Mat::new(1 + neighbors.len(), d, v);
    for i in 0..depth {
        x = block(p, &format!("aggregator.blocks.{i}"), &x, heads)?;
    }
    Ok(x.row(0).to_vec())
}

/// `softmax((h − c)·Cᵀ / τ)` with prototypes `C` as rows.
pub fn assignment(h: &[f64], center: Option<&[f64]>, prototypes: &[Vec<f64>], tau: f64) -> Vec<f64> {
    let hc: Vec<f64> = match center {
        Some(c) => h.iter().zip(c).map(|(a, b)| a - b).collect(),
        None => h.to_vec(),
    };
    let logits: Vec<f64> = prototypes.iter().map(|c| dot(&hc, c) / tau).collect();
    softmax(&logits)
}

pub fn cross_entropy(pt: &[f64], ps: &[f64]) -> f64 {
    -pt.iter().zip(ps).map(|(t, s)| t * s.max(1e-12).ln()).sum::<f64>()
}

pub fn rows_of(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.rows).map(|i| m.row(i).to_vec()).collect()
}

fn layer_count(p: &ParamSet, prefix: &str) -> usize {
    (0..).take_while(|i| p.by_name(&format!("{prefix}.{i}.weight")).is_some()).count()
}

fn head(p: &ParamSet, prefix: &str, x: &[f64]) -> Result<Vec<f64>> {
    Ok(mlp(p, prefix, layer_count(p, prefix), &Mat::new(1, x.len(), x.to_vec()))?.v)
}

/// Reference values of the three supervisions and their weighted sum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveValues {
    pub instance: f64,
    pub local_group: f64,
    pub group: f64,
    pub total: f64,
}

#[derive(Clone)]
struct ViewOut {
    cls: Vec<f64>,
    avg: Vec<f64>,
}

/// The full multi-crop objective recomputed image by image.
pub fn objective(
    pair: &crate::model::ModelPair,
    views: &crate::train::objective::ViewBatch,
    state: &crate::losses::SupervisionState,
    cfg: &crate::losses::LossConfig,
    tau_g: f64,
) -> Result<ObjectiveValues> {
    if cfg.normalize_prototypes {
        return Err(Error::Contract("reference covers raw prototype dot products only".into()));
    }
    let vit = &pair.arch.vit;
    let shape = BackboneShape { patch: vit.patch_size, heads: vit.num_heads, depth: vit.depth, global_size: vit.image_size_global };
    let b = views.batch;
    let n_views = 2 + views.num_locals();
    let image = |v: usize, i: usize| -> (&[f32], usize) {
        let (t, row, s) = if v < 2 {
            (&views.globals, v * b + i, vit.image_size_global)
        } else {
            (views.locals.as_ref().unwrap(), (v - 2) * b + i, vit.image_size_local)
        };
        let per = s * s * 3;
        (&t.data()[row * per..(row + 1) * per], s)
    };
    let run = |params: &ParamSet, v: usize, i: usize| -> Result<ViewOut> {
        let (img, s) = image(v, i);
        let (cls, patches) = backbone(params, &shape, img, s)?;
        Ok(ViewOut { cls, avg: mean_rows(&patches) })
    };
    let (s_p, t_p) = (&pair.student, &pair.teacher);
    let mut teacher = vec![vec![]; 2];
    for (v, slot) in teacher.iter_mut().enumerate() {
        for i in 0..b {
            slot.push(run(t_p, v, i)?);
        }
    }
    let mut student = vec![vec![]; n_views];
    for (v, slot) in student.iter_mut().enumerate() {
        for i in 0..b {
            slot.push(run(s_p, v, i)?);
        }
    }
    let bank = |f: &crate::buffer::FifoBuffer| -> Vec<Vec<f64>> {
        f.rows().map(|r| r.iter().map(|&x| x as f64).collect()).collect()
    };
    let in_neg = bank(&state.instance_bank);
    let lg_neg = bank(&state.local_group_bank);
    let nb_rows = bank(&state.neighbor_bank);
    let (_, protos) = param(s_p, "prototypes")?;
    let m_dim = protos.len() / pair.arch.num_prototypes;
    let protos: Vec<Vec<f64>> = protos.chunks(m_dim).map(<[f64]>::to_vec).collect();
    let center: Vec<f64> = state.center.data().iter().map(|&x| x as f64).collect();
    let k = cfg.k;
    let lg_active = nb_rows.len() >= k;
    let local = |params: &ParamSet, avg: &[f64]| -> Result<Vec<f64>> {
        let nb: Vec<Vec<f64>> = topk(&nb_rows, avg, k).into_iter().map(|j| nb_rows[j].clone()).collect();
        aggregate(params, layer_count_blocks(params), pair.arch.aggregator_heads, avg, &nb)
    };

    let mut pairs = Vec::new();
    for g in 0..2 {
        for c in 0..n_views {
            if c != g {
                pairs.push((g, c));
            }
        }
    }
    let (mut l_in, mut l_lg, mut l_g) = (0.0, 0.0, 0.0);
    for &(g, c) in &pairs {
        let (mut a, mut l, mut q) = (0.0, 0.0, 0.0);
        for i in 0..b {
            let (t, s) = (&teacher[g][i], &student[c][i]);
            let z1 = head(t_p, "head_instance", &t.cls)?;
            let z2 = head(s_p, "predictor_instance", &head(s_p, "head_instance", &s.cls)?)?;
            a += infonce(&z1, &z2, &in_neg, cfg.tau_instance as f64);
            if lg_active {
                let z1 = head(t_p, "head_local_group", &local(t_p, &t.avg)?)?;
                let z2 = head(s_p, "predictor_local_group", &head(s_p, "head_local_group", &local(s_p, &s.avg)?)?)?;
                l += infonce(&z1, &z2, &lg_neg, cfg.tau_local_group as f64);
            }
            let pt = assignment(&head(t_p, "head_group", &t.cls)?, Some(&center), &protos, tau_g);
            let ps = assignment(&head(s_p, "head_group", &s.cls)?, None, &protos, cfg.tau_student_group as f64);
            q += cross_entropy(&pt, &ps);
        }
        l_in += a / b as f64;
        l_lg += l / b as f64;
        l_g += q / b as f64;
    }
    let n = pairs.len() as f64;
    let (instance, local_group, group) = (l_in / n, l_lg / n, l_g / n);
    let w = &cfg.weights;
    Ok(ObjectiveValues {
        instance,
        local_group,
        group,
        total: w.instance as f64 * instance + w.local_group as f64 * local_group + w.group as f64 * group,
    })
}

fn layer_count_blocks(p: &ParamSet) -> usize {
    (0..).take_while(|i| p.by_name(&format!("aggregator.blocks.{i}.norm1.weight")).is_some()).count()
}
