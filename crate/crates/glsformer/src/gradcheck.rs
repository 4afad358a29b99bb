//! End-to-end gradient verification: central finite differences against the
//! reverse-mode gradients of the full forward pass plus cross-entropy.

use autodiff::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{forward, ModelConfig, ModelParams, TapedParams};
use crate::Result;

const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    /// scalar entries compared
    pub checked: usize,
    pub max_rel_err: f64,
    /// `name[index]` of the worst entry
    pub worst: String,
}

impl GradcheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-4)
}

fn loss_value(
    params: &ModelParams,
    cfg: &ModelConfig,
    st: &Tensor,
    lt: Option<&Tensor>,
    label: usize,
) -> Result<f64> {
    let mut tape = Tape::new();
    let tp = TapedParams::record(&mut tape, params);
    let logits = forward(&mut tape, st, lt, &tp, cfg, None)?;
    let loss = tape.cross_entropy(&logits, label)?;
    Ok(loss.item())
}

/// Compare reverse-mode gradients of a random window against central
/// differences, sampling `samples_per_param` entries from every parameter
/// tensor.
pub fn check_model(cfg: &ModelConfig, seed: u64, samples_per_param: usize) -> Result<GradcheckReport> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::init(cfg, seed);
    let frame_shape = vec![0, cfg.height, cfg.width, cfg.channels];
    let mut random_frames = |count: usize| {
        let mut shape = frame_shape.clone();
        shape[0] = count;
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    };
    let st = random_frames(cfg.n_st);
    let lt = if cfg.gating_mode.uses_long_stream() {
        Some(random_frames(cfg.n_lt))
    } else {
        None
    };
    let label = rng.gen_range(0..cfg.num_classes);

    // one reverse pass for every analytic gradient
    let mut tape = Tape::new();
    let tp = TapedParams::record(&mut tape, &params);
    let logits = forward(&mut tape, &st, lt.as_ref(), &tp, cfg, None)?;
    let loss = tape.cross_entropy(&logits, label)?;
    tape.backward(&loss)?;
    let analytic: Vec<(String, Vec<f64>)> = params
        .iter()
        .map(|(name, _)| {
            let g = tape.grad(tp.get(name))?.to_vec();
            Ok((name.to_string(), g))
        })
        .collect::<Result<Vec<_>>>()?;
    drop(tape);

    let mut report = GradcheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    for (name, grad) in &analytic {
        let numel = grad.len();
        let mut indices: Vec<usize> = if numel <= samples_per_param {
            (0..numel).collect()
        } else {
            let mut picked = std::collections::BTreeSet::new();
            while picked.len() < samples_per_param {
                picked.insert(rng.gen_range(0..numel));
            }
            picked.into_iter().collect()
        };
        indices.sort_unstable();
        for i in indices {
            let original = params.get(name).unwrap().data[i];
            params.get_mut(name).unwrap().data[i] = original + FD_STEP;
            let up = loss_value(&params, cfg, &st, lt.as_ref(), label)?;
            params.get_mut(name).unwrap().data[i] = original - FD_STEP;
            let down = loss_value(&params, cfg, &st, lt.as_ref(), label)?;
            params.get_mut(name).unwrap().data[i] = original;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let err = rel_err(grad[i], numeric);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = format!("{}[{}]", name, i);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GatingMode;

    #[test]
    fn toy_model_gradients_match_finite_differences() {
        let cfg = ModelConfig::gradcheck_toy();
        let report = check_model(&cfg, 1, 2).unwrap();
        assert!(report.checked > 0);
        assert!(
            report.passes(1e-3),
            "worst {} rel err {}",
            report.worst,
            report.max_rel_err
        );
    }

    #[test]
    fn short_only_model_gradients_match_finite_differences() {
        let cfg = ModelConfig {
            gating_mode: GatingMode::OnlyShortTerm,
            ..ModelConfig::gradcheck_toy()
        };
        let report = check_model(&cfg, 2, 2).unwrap();
        assert!(
            report.passes(1e-3),
            "worst {} rel err {}",
            report.worst,
            report.max_rel_err
        );
    }
}
