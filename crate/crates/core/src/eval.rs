//! Frozen-feature evaluation: feature extraction, weighted kNN and a linear
//! probe, plus the feature export file.
//!
//! Feature files (`MGFT`), all little-endian:
//!
//! | bytes            | content                 |
//! |------------------|-------------------------|
//! | 0..4             | magic `MGFT`            |
//! | 4..8             | version, u32            |
//! | 8..12            | `n`, u32                |
//! | 12..16           | `d`, u32                |
//! | 16..16+4nd       | features, f32 row-major |
//! | 16+4nd..16+4n(d+1) | labels, u32           |

use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};

use crate::checkpoint::load_checkpoint;
use crate::data::{augment::resample, augment::CropBox, write_file, Dataset, Normalization};
use crate::error::{Error, Result};
use crate::model::ModelPair;
use crate::rng;
use crate::tensor::ops::{l2_normalize, matmul_t};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: [u8; 4] = *b"MGFT";
pub const FEATURE_VERSION: u32 = 1;
pub const KNN_KS: [usize; 4] = [10, 20, 50, 100];
pub const KNN_TAU: f32 = 0.07;

/// One feature row per image with its label.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBank {
    /// `[n, d]`.
    pub features: Tensor,
    pub labels: Vec<usize>,
}

impl FeatureBank {
    pub fn new(features: Tensor, labels: Vec<usize>) -> Result<Self> {
        if features.rank() != 2 || features.shape()[0] != labels.len() {
            return Err(Error::Contract(format!(
                "{:?} features for {} labels",
                features.shape(),
                labels.len()
            )));
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("feature bank".into()));
        }
        Ok(FeatureBank { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    /// Copy with unit-norm rows.
    pub fn normalized(&self) -> Result<Self> {
        Ok(FeatureBank { features: l2_normalize(&self.features)?, labels: self.labels.clone() })
    }

    /// Same features under different labels (e.g. a coarser level).
    pub fn relabel(&self, labels: Vec<usize>) -> Result<Self> {
        FeatureBank::new(self.features.clone(), labels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (n, d) = (self.len(), self.dim());
        let mut out = Vec::with_capacity(16 + 4 * n * (d + 1));
        out.extend_from_slice(&FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.extend_from_slice(&(n as u32).to_le_bytes());
        out.extend_from_slice(&(d as u32).to_le_bytes());
        for v in self.features.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &l in &self.labels {
            out.extend_from_slice(&(l as u32).to_le_bytes());
        }
        write_file(path, &out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let err = |offset: usize, msg: String| Error::Format { offset: offset as u64, msg };
        if bytes.len() < 16 {
            return Err(err(bytes.len(), "file shorter than the feature header".into()));
        }
        if bytes[..4] != FEATURE_MAGIC {
            return Err(err(0, "bad magic, expected MGFT".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        if word(4) != FEATURE_VERSION {
            return Err(err(4, format!("unsupported feature file version {}", word(4))));
        }
        let (n, d) = (word(8) as usize, word(12) as usize);
        let expected = 16 + 4 * n * (d + 1);
        if bytes.len() != expected {
            return Err(err(bytes.len().min(expected), format!("{n}x{d} features need {expected} bytes, file has {}", bytes.len())));
        }
        let floats = bytes[16..16 + 4 * n * d]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let labels = (0..n).map(|i| word(16 + 4 * n * d + 4 * i) as usize).collect();
        FeatureBank::new(Tensor::new([n, d], floats)?, labels)
    }
}

/// Class tokens of every image, resized whole to the global crop size and
/// normalized with `norm`. Uses the teacher backbone unless `student`.
pub fn extract_features(pair: &ModelPair, ds: &Dataset, norm: &Normalization, student: bool) -> Result<FeatureBank> {
    let size = pair.arch.vit.image_size_global;
    let params = if student { &pair.student } else { &pair.teacher };
    let full = CropBox { x: 0.0, y: 0.0, w: ds.width as f32, h: ds.height as f32 };
    let chunk = 64;
    let mut features = Vec::with_capacity(ds.len() * pair.arch.vit.embed_dim);
    for start in (0..ds.len()).step_by(chunk) {
        let end = (start + chunk).min(ds.len());
        let mut pixels = Vec::with_capacity((end - start) * size * size * 3);
        for i in start..end {
            pixels.extend_from_slice(resample(ds.image(i), full, size).normalize(norm).data());
        }
        let images = Tensor::new([end - start, size, size, 3], pixels)?;
        let (cls, _) = pair.nets.backbone.embed(params, &images)?;
        features.extend_from_slice(cls.data());
    }
    FeatureBank::new(Tensor::new([ds.len(), pair.arch.vit.embed_dim], features)?, ds.labels.iter().map(|&l| l as usize).collect())
}

/// [`extract_features`] with the model and normalization stored in a
/// checkpoint.
pub fn extract_from_checkpoint(path: &Path, ds: &Dataset, student: bool) -> Result<FeatureBank> {
    let t = load_checkpoint(path)?;
    extract_features(&t.pair, ds, &t.norm, student)
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnnReport {
    /// `(k, top-1 accuracy)` in the requested order.
    pub per_k: Vec<(usize, f32)>,
    pub best_k: usize,
    pub best: f32,
}

/// Weighted kNN: each test row's `k` most cosine-similar train rows vote for
/// their label with weight `exp(cos/τ)`. Ties in similarity prefer the
/// lower train index, ties in votes the lower label.
pub fn knn_classify(train: &FeatureBank, test: &FeatureBank, ks: &[usize], tau: f32) -> Result<KnnReport> {
    let max_k = ks.iter().copied().max().ok_or(Error::EmptyInput("knn k list"))?;
    if ks.contains(&0) || max_k > train.len() {
        return Err(Error::Contract(format!(
            "k values {ks:?} need 1 <= k <= train size {}",
            train.len()
        )));
    }
    if train.dim() != test.dim() {
        return Err(Error::Shape { op: "knn_classify".into(), lhs: train.features.shape().to_vec(), rhs: test.features.shape().to_vec() });
    }
    if !(tau > 0.0) {
        return Err(Error::Contract(format!("kNN temperature {tau} must be > 0")));
    }
    let classes = train.labels.iter().chain(&test.labels).max().map_or(0, |m| m + 1);
    let tr = l2_normalize(&train.features)?;
    let te = l2_normalize(&test.features)?;
    let sims = matmul_t(&te, &tr)?;
    let n = train.len();
    let mut correct = vec![0usize; ks.len()];
    let mut order: Vec<(f32, usize)> = Vec::with_capacity(n);
    for (row, &truth) in sims.data().chunks(n).zip(&test.labels) {
        order.clear();
        order.extend(row.iter().copied().zip(0..));
        let by_rank = |a: &(f32, usize), b: &(f32, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
        if max_k < n {
            order.select_nth_unstable_by(max_k - 1, by_rank);
            order.truncate(max_k);
        }
        order.sort_by(by_rank);
        // Shift by the top similarity so the exponentials stay finite at small τ.
        let top = order[0].0;
        for (slot, &k) in ks.iter().enumerate() {
            let mut votes = vec![0f64; classes];
            for &(s, j) in &order[..k] {
                votes[train.labels[j]] += (((s - top) / tau) as f64).exp();
            }
            let pred = argmax(&votes);
            if pred == truth {
                correct[slot] += 1;
            }
        }
    }
    let per_k: Vec<(usize, f32)> =
        ks.iter().zip(&correct).map(|(&k, &c)| (k, c as f32 / test.len().max(1) as f32)).collect();
    let (best_k, best) = per_k.iter().copied().fold((ks[0], f32::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
    Ok(KnnReport { per_k, best_k, best })
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { epochs: 30, lr: 0.1, momentum: 0.9, batch_size: 64, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub train_accuracy: f32,
    pub test_accuracy: f32,
}

/// Softmax regression on frozen features, standardized with the train
/// statistics. SGD with momentum and a per-step cosine learning rate.
pub fn linear_probe(train: &FeatureBank, test: &FeatureBank, cfg: &ProbeConfig) -> Result<ProbeReport> {
    if train.dim() != test.dim() {
        return Err(Error::Shape { op: "linear_probe".into(), lhs: train.features.shape().to_vec(), rhs: test.features.shape().to_vec() });
    }
    let mut distinct = train.labels.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::Contract("linear probe needs at least two classes in the train set".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Contract("probe batch_size must be >= 1".into()));
    }
    let d = train.dim();
    let c = train.labels.iter().chain(&test.labels).max().unwrap() + 1;
    let (mean, std) = column_stats(&train.features);
    let standardize = |bank: &FeatureBank| -> Vec<f32> {
        bank.features
            .data()
            .chunks(d)
            .flat_map(|r| r.iter().zip(&mean).zip(&std).map(|((x, m), s)| (x - m) / s))
            .collect()
    };
    let xtr = standardize(train);
    let xte = standardize(test);

    let mut init = rng::stream(cfg.seed, &[rng::TAG_PROBE]);
    let normal = Normal::new(0.0f32, 0.01).expect("valid std");
    let mut w: Vec<f32> = (0..d * c).map(|_| normal.sample(&mut init)).collect();
    let mut b = vec![0f32; c];
    let mut vw = vec![0f32; d * c];
    let mut vb = vec![0f32; c];

    let n = train.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total = (cfg.epochs * steps_per_epoch).max(1);
    let mut step = 0;
    let mut gw = vec![0f32; d * c];
    let mut gb = vec![0f32; c];
    let mut logits = vec![0f32; c];
    for epoch in 0..cfg.epochs {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng::stream(cfg.seed, &[rng::TAG_PROBE, 1 + epoch as u64]));
        for batch in idx.chunks(cfg.batch_size) {
            gw.fill(0.0);
            gb.fill(0.0);
            for &i in batch {
                let x = &xtr[i * d..(i + 1) * d];
                forward(&w, &b, x, &mut logits);
                softmax_in_place(&mut logits);
                logits[train.labels[i]] -= 1.0;
                for (k, &g) in logits.iter().enumerate() {
                    gb[k] += g;
                    for (j, &xj) in x.iter().enumerate() {
                        gw[j * c + k] += g * xj;
                    }
                }
            }
            let lr = 0.5 * cfg.lr * (1.0 + (std::f32::consts::PI * step as f32 / total as f32).cos());
            let scale = 1.0 / batch.len() as f32;
            for (p, (v, g)) in w.iter_mut().zip(vw.iter_mut().zip(&gw)) {
                *v = cfg.momentum * *v + g * scale;
                *p -= lr * *v;
            }
            for (p, (v, g)) in b.iter_mut().zip(vb.iter_mut().zip(&gb)) {
                *v = cfg.momentum * *v + g * scale;
                *p -= lr * *v;
            }
            step += 1;
        }
    }
    let accuracy = |x: &[f32], labels: &[usize]| {
        let mut logits = vec![0f32; c];
        let hits = labels
            .iter()
            .enumerate()
            .filter(|&(i, &l)| {
                forward(&w, &b, &x[i * d..(i + 1) * d], &mut logits);
                let pred = argmax(&logits.iter().map(|&v| v as f64).collect::<Vec<_>>());
                pred == l
            })
            .count();
        hits as f32 / labels.len().max(1) as f32
    };
    Ok(ProbeReport { train_accuracy: accuracy(&xtr, &train.labels), test_accuracy: accuracy(&xte, &test.labels) })
}

fn forward(w: &[f32], b: &[f32], x: &[f32], out: &mut [f32]) {
    let c = b.len();
    out.copy_from_slice(b);
    for (j, &xj) in x.iter().enumerate() {
        for (o, &wv) in out.iter_mut().zip(&w[j * c..(j + 1) * c]) {
            *o += xj * wv;
        }
    }
}

fn softmax_in_place(v: &mut [f32]) {
    let m = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in v.iter_mut() {
        *x /= s;
    }
}

fn column_stats(x: &Tensor) -> (Vec<f32>, Vec<f32>) {
    let d = x.shape()[1];
    let n = x.shape()[0] as f64;
    let mut mean = vec![0f64; d];
    for r in x.data().chunks(d) {
        for (m, &v) in mean.iter_mut().zip(r) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0f64; d];
    for r in x.data().chunks(d) {
        for ((s, &v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v as f64 - m).powi(2);
        }
    }
    let std = var.iter().map(|s| ((s / n).sqrt() as f32).max(1e-6)).collect();
    (mean.into_iter().map(|m| m as f32).collect(), std)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank(rows: &[&[f32]], labels: &[usize]) -> FeatureBank {
        FeatureBank::new(Tensor::from_rows(rows).unwrap(), labels.to_vec()).unwrap()
    }

    #[test]
    fn lone_identical_point() {
        let train = bank(&[&[1.0, 0.0], &[0.0, 1.0]], &[3, 5]);
        let test = bank(&[&[0.0, 2.0]], &[5]);
        let r = knn_classify(&train, &test, &[1], KNN_TAU).unwrap();
        assert_eq!(r.per_k, vec![(1, 1.0)]);
    }

    #[test]
    fn k_beyond_train_size_is_rejected() {
        let train = bank(&[&[1.0, 0.0]], &[0]);
        assert!(matches!(knn_classify(&train, &train, &[2], KNN_TAU), Err(Error::Contract(_))));
    }

    #[test]
    fn separable_probe() {
        let rows: Vec<Vec<f32>> = (0..40).map(|i| vec![if i % 2 == 0 { 1.0 } else { -1.0 }, (i as f32 * 0.37).sin()]).collect();
        let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let b = FeatureBank::new(Tensor::from_rows(&rows).unwrap(), labels).unwrap();
        let r = linear_probe(&b, &b, &ProbeConfig::default()).unwrap();
        assert_eq!(r.test_accuracy, 1.0);
    }

    #[test]
    fn single_class_probe_is_rejected() {
        let b = bank(&[&[1.0], &[2.0]], &[0, 0]);
        assert!(matches!(linear_probe(&b, &b, &ProbeConfig::default()), Err(Error::Contract(_))));
    }

    #[test]
    fn feature_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.bin");
        let b = bank(&[&[1.5, -2.0], &[0.25, 8.0]], &[1, 0]);
        b.save(&p).unwrap();
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 16 + 4 * 2 * 3);
        assert_eq!(FeatureBank::load(&p).unwrap(), b);
    }
}
