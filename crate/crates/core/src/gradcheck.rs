//! Sampled finite-difference check of the model's analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Batch;
use crate::error::Result;
use crate::model::DsMoeModel;
use crate::params::Parameters;
use crate::tensor::GradComparison;

pub const DEFAULT_FRACTION: f64 = 0.05;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Elements whose analytic and numeric gradients are both below this are
/// not compared.
pub const DEFAULT_FLOOR: f64 = 1e-10;
const STEP: f64 = 1e-3;

/// Result for one named parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub group: String,
    pub sampled: usize,
    pub compared: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub passed: bool,
}

/// Richardson-extrapolated central difference, accurate to `O(h^4)`.
fn derivative(f: &mut dyn FnMut(f64) -> f64, x0: f64) -> f64 {
    let central = |f: &mut dyn FnMut(f64) -> f64, h: f64| (f(x0 + h) - f(x0 - h)) / (2.0 * h);
    let coarse = central(f, STEP);
    let fine = central(f, STEP / 2.0);
    (4.0 * fine - coarse) / 3.0
}

/// Compares the gradient of the training objective on `batch` against
/// numerical derivatives at a random `fraction` of every tensor's entries
/// (at least one each).
pub fn check_gradients(
    model: &DsMoeModel,
    batch: &Batch,
    fraction: f64,
    seed: u64,
    tolerance: f64,
) -> Result<Vec<GroupCheck>> {
    let mut work = model.clone();
    let mut grads = model.zeros_like();
    work.loss_and_grad(batch, &mut grads)?;
    compare_sampled(model, batch, &grads.named_params(), fraction, seed, tolerance)
}

fn compare_sampled(
    model: &DsMoeModel,
    batch: &Batch,
    analytic: &[(String, crate::tensor::Tensor)],
    fraction: f64,
    seed: u64,
    tolerance: f64,
) -> Result<Vec<GroupCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(analytic.len());
    for (k, (name, value)) in model.named_params().into_iter().enumerate() {
        let n = value.numel();
        let m = ((n as f64 * fraction).ceil() as usize).clamp(1, n);
        let mut idx = sample(&mut rng, n, m).into_vec();
        idx.sort_unstable();
        let mut pairs = Vec::with_capacity(m);
        let mut probe = model.clone();
        for &i in &idx {
            let mut err = None;
            let mut f = |v: f64| {
                probe.visit_mut("", &mut |pn, t| {
                    if pn == name {
                        t.data_mut()[i] = v;
                    }
                });
                match probe.training_loss(batch) {
                    Ok(r) => r.total,
                    Err(e) => {
                        err.get_or_insert(e);
                        f64::NAN
                    }
                }
            };
            let x0 = value.data()[i];
            let numeric = derivative(&mut f, x0);
            f(x0);
            if let Some(e) = err {
                return Err(e);
            }
            pairs.push((analytic[k].1.data()[i], numeric));
        }
        let cmp = GradComparison::from_pairs(pairs, DEFAULT_FLOOR);
        out.push(GroupCheck {
            group: name,
            sampled: m,
            compared: cmp.compared,
            max_rel_err: cmp.max_rel_err,
            max_abs_err: cmp.max_abs_err,
            passed: cmp.max_rel_err < tolerance,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::next_batch;
    use crate::model::{ModelConfig, TrainMode};

    fn batch() -> Batch {
        let tokens: Vec<usize> = (0..400).map(|i| (i * 37 + i / 5) % 257).collect();
        next_batch(&tokens, 2, 6, 3, 0).unwrap()
    }

    #[test]
    fn richardson_is_exact_on_quartics() {
        let mut f = |x: f64| x.powi(4) - 2.0 * x.powi(3);
        let d = derivative(&mut f, 0.7);
        let exact = 4.0 * 0.343 - 6.0 * 0.49;
        assert!((d - exact).abs() < 1e-9, "{d} vs {exact}");
    }

    #[test]
    fn every_group_passes_in_each_mode() {
        for mode in [TrainMode::DenseGradient, TrainMode::SingleExpert] {
            let m = DsMoeModel::new(&ModelConfig::tiny().with_mode(mode), 4).unwrap();
            let checks = check_gradients(&m, &batch(), 0.02, 1, DEFAULT_TOLERANCE).unwrap();
            assert_eq!(checks.len(), m.named_params().len());
            for c in &checks {
                assert!(c.passed, "{mode}: {c:?}");
            }
        }
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let m = DsMoeModel::new(&ModelConfig::tiny(), 5).unwrap();
        let mut work = m.clone();
        let mut grads = m.zeros_like();
        work.loss_and_grad(&batch(), &mut grads).unwrap();
        grads.blocks[1].ffn.experts[2].w_in.scale(1.001);
        let checks = compare_sampled(&m, &batch(), &grads.named_params(), 0.05, 1, DEFAULT_TOLERANCE).unwrap();
        let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.group.as_str()).collect();
        assert_eq!(failed, ["blocks.1.ffn.experts.2.w_in"]);
    }
}
