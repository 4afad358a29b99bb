//! Parameter allocation, initialization and lookup.
//!
//! Shapes are a pure function of the config, so checkpoints can be
//! validated without reading tensor payloads.

use autodiff::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{GatingMode, ModelConfig};
use crate::{GlsError, Result};

const INIT_STD: f64 = 0.02;

/// All learnable tensors, in a fixed order shared by the optimizer and the
/// checkpoint format.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    entries: Vec<(String, Tensor)>,
}

/// Shape table for a config. The order here is the canonical parameter
/// order everywhere else.
fn shape_table(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let k = cfg.embed_dim;
    let kh = cfg.head_dim();
    let n = cfg.patches_per_frame();
    let long = cfg.gating_mode.uses_long_stream();
    let mut t = vec![
        ("patch_embed".to_string(), vec![cfg.patch_len(), k]),
        ("pos_st".to_string(), vec![n * cfg.n_st + 1, k]),
    ];
    if long {
        t.push(("pos_lt".to_string(), vec![n * cfg.n_lt, k]));
    }
    t.push(("cls".to_string(), vec![k]));
    for l in 0..cfg.blocks {
        let p = |s: &str| format!("block{}.{}", l, s);
        t.push((p("ln_attn_g"), vec![k]));
        t.push((p("ln_attn_b"), vec![k]));
        t.push((p("u_qkv_st"), vec![k, 3 * k]));
        if long {
            t.push((p("u_qkv_lt"), vec![k, 3 * k]));
            t.push((p("u_qkv_joint"), vec![k, 3 * k]));
        }
        match cfg.gating_mode {
            GatingMode::Feature => {
                t.push((p("gate_st_w"), vec![6 * kh, 2]));
                t.push((p("gate_st_b"), vec![2]));
                t.push((p("gate_lt_w"), vec![6 * kh, 2]));
                t.push((p("gate_lt_b"), vec![2]));
            }
            GatingMode::FixedParam => {
                t.push((p("gate_st_logits"), vec![cfg.heads, 2]));
                t.push((p("gate_lt_logits"), vec![cfg.heads, 2]));
            }
            GatingMode::NoGating | GatingMode::OnlyShortTerm => {}
        }
        t.push((p("u_msa_w"), vec![k, k]));
        t.push((p("u_msa_b"), vec![k]));
        t.push((p("ln_mlp_g"), vec![k]));
        t.push((p("ln_mlp_b"), vec![k]));
        t.push((p("mlp_w1"), vec![k, 4 * k]));
        t.push((p("mlp_b1"), vec![4 * k]));
        t.push((p("mlp_w2"), vec![4 * k, k]));
        t.push((p("mlp_b2"), vec![k]));
    }
    t.push(("ln_final_g".to_string(), vec![k]));
    t.push(("ln_final_b".to_string(), vec![k]));
    t.push(("head_w1".to_string(), vec![k, k]));
    t.push(("head_b1".to_string(), vec![k]));
    t.push(("head_w2".to_string(), vec![k, cfg.num_classes]));
    t.push(("head_b2".to_string(), vec![cfg.num_classes]));
    t
}

fn trunc_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    // resample outside two standard deviations
    loop {
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

fn init_tensor(name: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let numel: usize = shape.iter().product();
    let leaf = name.rsplit('.').next().unwrap_or(name);
    let data: Vec<f64> = if leaf.starts_with("ln_") && leaf.ends_with("_g")
        || leaf == "ln_final_g"
    {
        vec![1.0; numel]
    } else if leaf.ends_with("_b")
        || leaf.ends_with("_b1")
        || leaf.ends_with("_b2")
        || leaf.ends_with("logits")
    {
        vec![0.0; numel]
    } else {
        (0..numel).map(|_| trunc_normal(rng, INIT_STD)).collect()
    };
    Tensor::new(shape.to_vec(), data).unwrap()
}

impl ModelParams {
    /// Allocate and initialize: projections truncated normal (std 0.02),
    /// biases and gate logits zero, layer norm gain one.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = shape_table(cfg)
            .into_iter()
            .map(|(name, shape)| {
                let t = init_tensor(&name, &shape, &mut rng);
                (name, t)
            })
            .collect();
        ModelParams { entries }
    }

    /// Zero-valued allocation with the canonical shapes.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let entries = shape_table(cfg)
            .into_iter()
            .map(|(name, shape)| (name, Tensor::zeros(shape)))
            .collect();
        ModelParams { entries }
    }

    /// The canonical (name, shape) list for a config.
    pub fn shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        shape_table(cfg)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        match self.get_mut(name) {
            Some(slot) => {
                if slot.shape != t.shape {
                    return Err(GlsError::config(format!(
                        "shape mismatch for parameter {}: {:?} vs {:?}",
                        name, slot.shape, t.shape
                    )));
                }
                *slot = t;
                Ok(())
            }
            None => Err(GlsError::config(format!("unknown parameter {}", name))),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar parameter count; pure in the config.
    pub fn count_for(cfg: &ModelConfig) -> usize {
        shape_table(cfg)
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    pub fn count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_are_pure_in_config() {
        let cfg = ModelConfig::desk_default();
        assert_eq!(ModelParams::shapes(&cfg), ModelParams::shapes(&cfg));
        let p = ModelParams::init(&cfg, 0);
        assert_eq!(p.count(), ModelParams::count_for(&cfg));
        for (name, shape) in ModelParams::shapes(&cfg) {
            assert_eq!(p.get(&name).unwrap().shape, shape, "{}", name);
        }
    }

    #[test]
    fn init_is_deterministic_and_finite() {
        let cfg = ModelConfig::desk_default();
        let a = ModelParams::init(&cfg, 42);
        let b = ModelParams::init(&cfg, 42);
        assert_eq!(a, b);
        for (name, t) in a.iter() {
            assert!(t.is_finite(), "{} has non-finite init", name);
        }
    }

    #[test]
    fn layer_norm_gains_start_at_one() {
        let cfg = ModelConfig::desk_default();
        let p = ModelParams::init(&cfg, 0);
        assert!(p.get("block0.ln_attn_g").unwrap().data.iter().all(|&v| v == 1.0));
        assert!(p.get("ln_final_g").unwrap().data.iter().all(|&v| v == 1.0));
        assert!(p.get("block0.mlp_b1").unwrap().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn only_short_term_drops_long_stream_parameters() {
        let cfg = ModelConfig {
            gating_mode: GatingMode::OnlyShortTerm,
            ..ModelConfig::desk_default()
        };
        let p = ModelParams::init(&cfg, 0);
        assert!(p.get("pos_lt").is_none());
        assert!(p.get("block0.u_qkv_lt").is_none());
        assert!(p.get("block0.u_qkv_joint").is_none());
        assert!(p.get("block0.gate_st_w").is_none());
    }

    #[test]
    fn fixed_param_gates_are_per_head() {
        let cfg = ModelConfig {
            gating_mode: GatingMode::FixedParam,
            ..ModelConfig::desk_default()
        };
        let p = ModelParams::init(&cfg, 0);
        assert_eq!(p.get("block0.gate_st_logits").unwrap().shape, vec![4, 2]);
    }
}
