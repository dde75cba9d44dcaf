//! Central finite-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

/// Step and tolerances for [`check_gradients`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f32,
    pub atol: f32,
    pub rtol: f32,
    /// Combine differences at `step` and `step / 2` to cancel the
    /// second-order truncation term.
    pub extrapolate: bool,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-3,
            atol: 1e-3,
            rtol: 1e-2,
            extrapolate: false,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_abs_err: f32,
    /// `|a - n| / max(|a|, |n|)` over entries whose magnitude exceeds `atol`.
    pub max_rel_err: f32,
    /// Every entry satisfied `|a - n| <= atol + rtol·|n|`.
    pub passed: bool,
}

/// Compares tape gradients of `f` with central differences at `inputs`.
///
/// When `f` returns a non-scalar, the check runs on `Σ f(x) ⊙ w` for a fixed
/// random `w`, so every output entry contributes.
pub fn check_gradients<F>(inputs: &[Tensor], cfg: GradCheck, seed: u64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights: Option<Tensor> = None;

    let mut eval = |xs: &[Tensor], want_grad: bool| -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs
            .iter()
            .map(|x| tape.leaf(x.clone().with_requires_grad(want_grad)))
            .collect();
        let out = f(&mut tape, &vars)?;
        let loss = if tape.value(out).numel() == 1 {
            out
        } else {
            let w = weights
                .get_or_insert_with(|| {
                    let shape = tape.shape(out).to_vec();
                    let n: usize = shape.iter().product();
                    let data = (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect();
                    Tensor::new(shape, data).expect("weight shape")
                })
                .clone();
            let w = tape.constant(w);
            let p = tape.mul(out, w)?;
            tape.sum_all(p)
        };
        let value = tape.value(loss).item()? as f64;
        if !want_grad {
            return Ok((value, Vec::new()));
        }
        let mut grads = tape.backward(loss)?;
        let gs = vars
            .iter()
            .map(|&v| grads.take(v).expect("leaf gradient"))
            .collect();
        Ok((value, gs))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut report = GradCheckReport {
        checked: 0,
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        passed: true,
    };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data()[j];
            let mut central = |h: f32| -> Result<f64> {
                probe[i].data_mut()[j] = orig + h;
                let (up, _) = eval(&probe, false)?;
                probe[i].data_mut()[j] = orig - h;
                let (down, _) = eval(&probe, false)?;
                probe[i].data_mut()[j] = orig;
                Ok((up - down) / (2.0 * h as f64))
            };
            let coarse = central(cfg.step)?;
            let numeric = if cfg.extrapolate {
                let fine = central(cfg.step / 2.0)?;
                (4.0 * fine - coarse) / 3.0
            } else {
                coarse
            } as f32;
            let a = analytic[i].data()[j];
            record(&mut report, a, numeric, cfg);
        }
    }
    Ok(report)
}

pub(crate) fn record(report: &mut GradCheckReport, analytic: f32, numeric: f32, cfg: GradCheck) {
    let err = (analytic - numeric).abs();
    report.checked += 1;
    report.max_abs_err = report.max_abs_err.max(err);
    let scale = analytic.abs().max(numeric.abs());
    if scale > cfg.atol {
        report.max_rel_err = report.max_rel_err.max(err / scale);
    }
    if !(err <= cfg.atol + cfg.rtol * numeric.abs()) {
        report.passed = false;
    }
}

/// Uniform samples in `[-1, 1)` with the given shape.
pub fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive shape")
}
