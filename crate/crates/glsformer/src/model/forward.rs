//! Forward pass: embedding, gated temporal attention, shared spatial
//! attention, MLP blocks and the classification head.
//!
//! Token order everywhere is [long-stream patches, cls, short-stream
//! patches]; within a stream, patches are ordered frame-major. With that
//! layout the joint stream of the gating path is simply the full token
//! matrix, and the cls token rides the short-stream gating path.

use std::collections::HashMap;

use autodiff::{Tape, Tensor, TensorError};

use super::{GatingMode, ModelConfig, ModelParams};
use crate::Result;

const LN_EPS: f64 = 1e-5;

/// Model parameters recorded as leaves on a tape, looked up by name.
pub struct TapedParams {
    map: HashMap<String, Tensor>,
}

impl TapedParams {
    pub fn record(tape: &mut Tape, params: &ModelParams) -> Self {
        let map = params
            .iter()
            .map(|(name, t)| (name.to_string(), tape.leaf(t)))
            .collect();
        TapedParams { map }
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("parameter {} not recorded", name))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }
}

/// Position of a token within the two-stream layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenCoord {
    Cls,
    /// long-stream patch (frame slot, spatial position)
    Lt { t: usize, p: usize },
    /// short-stream patch (frame slot, spatial position)
    St { t: usize, p: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pass {
    Temporal,
    Spatial,
}

/// Attention support set of one query row, captured when stats collection
/// is enabled.
#[derive(Debug, Clone)]
pub struct SupportRecord {
    pub pass: Pass,
    pub block: usize,
    pub head: usize,
    pub query: TokenCoord,
    pub keys: Vec<TokenCoord>,
    /// softmax row for this query, in key order
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct GateRecord {
    pub block: usize,
    pub head: usize,
    /// "st" or "lt"
    pub stream: &'static str,
    pub value: f64,
}

/// Instrumentation collected during a forward pass.
#[derive(Debug)]
pub struct ForwardStats {
    pub temporal_logits: usize,
    pub spatial_logits: usize,
    /// worst |row sum - 1| over every attention row seen
    pub max_row_sum_dev: f64,
    pub min_attn_entry: f64,
    pub gates: Vec<GateRecord>,
    pub collect_support: bool,
    pub support: Vec<SupportRecord>,
}

impl Default for ForwardStats {
    fn default() -> Self {
        ForwardStats {
            temporal_logits: 0,
            spatial_logits: 0,
            max_row_sum_dev: 0.0,
            min_attn_entry: f64::INFINITY,
            gates: Vec::new(),
            collect_support: false,
            support: Vec::new(),
        }
    }
}

impl ForwardStats {
    pub fn collecting_support() -> Self {
        ForwardStats {
            collect_support: true,
            ..Default::default()
        }
    }

    fn note_attention(
        &mut self,
        alpha: &Tensor,
        pass: Pass,
        block: usize,
        head: usize,
        queries: &[TokenCoord],
        keys: &[TokenCoord],
    ) {
        let cols = keys.len();
        debug_assert_eq!(alpha.numel(), queries.len() * cols);
        match pass {
            Pass::Temporal => self.temporal_logits += alpha.numel(),
            Pass::Spatial => self.spatial_logits += alpha.numel(),
        }
        for (q, row) in queries.iter().zip(alpha.data.chunks(cols)) {
            let sum: f64 = row.iter().sum();
            self.max_row_sum_dev = self.max_row_sum_dev.max((sum - 1.0).abs());
            for &w in row {
                self.min_attn_entry = self.min_attn_entry.min(w);
            }
            if self.collect_support {
                self.support.push(SupportRecord {
                    pass,
                    block,
                    head,
                    query: *q,
                    keys: keys.to_vec(),
                    weights: row.to_vec(),
                });
            }
        }
    }
}

struct Fwd<'a> {
    tape: &'a mut Tape,
    tp: &'a TapedParams,
    cfg: &'a ModelConfig,
    stats: Option<&'a mut ForwardStats>,
}

/// Flatten non-overlapping patches of a [T, H, W, C] frame tensor into a
/// [T*N, C*Q*Q] matrix, frame-major then patch-row-major.
fn patchify(frames: &Tensor, cfg: &ModelConfig) -> Tensor {
    let (h, w, c, q) = (cfg.height, cfg.width, cfg.channels, cfg.patch);
    let t_count = frames.shape[0];
    let n = cfg.patches_per_frame();
    let per_row = w / q;
    let plen = cfg.patch_len();
    let mut out = vec![0.0; t_count * n * plen];
    for t in 0..t_count {
        for p in 0..n {
            let (py, px) = (p / per_row, p % per_row);
            let row = &mut out[(t * n + p) * plen..(t * n + p + 1) * plen];
            let mut i = 0;
            for dy in 0..q {
                for dx in 0..q {
                    let y = py * q + dy;
                    let x = px * q + dx;
                    let src = ((t * h + y) * w + x) * c;
                    row[i..i + c].copy_from_slice(&frames.data[src..src + c]);
                    i += c;
                }
            }
        }
    }
    Tensor::new(vec![t_count * n, plen], out).unwrap()
}

/// Per-head (q, k, v) slices of a full-width [tokens, 3K] qkv matrix.
fn head_slices(
    tape: &mut Tape,
    qkv: &Tensor,
    head: usize,
    k: usize,
    kh: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let q = tape.slice(qkv, 1, head * kh, (head + 1) * kh)?;
    let kk = tape.slice(qkv, 1, k + head * kh, k + (head + 1) * kh)?;
    let v = tape.slice(qkv, 1, 2 * k + head * kh, 2 * k + (head + 1) * kh)?;
    Ok((q, kk, v))
}

/// Pool q, k, v over tokens and concatenate into one feature vector.
fn pooled_features(
    tape: &mut Tape,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
) -> Result<Tensor> {
    let pq = tape.mean(q, 0)?;
    let pk = tape.mean(k, 0)?;
    let pv = tape.mean(v, 0)?;
    Ok(tape.concat(&[&pq, &pk, &pv], 0)?)
}

/// Gate pair (weight on the joint stream, complement). Both come from the
/// same 2-way softmax so they sum to one.
fn split_gate(tape: &mut Tape, probs: &Tensor) -> Result<(Tensor, Tensor)> {
    let g = tape.slice(probs, 1, 0, 1)?;
    let g = tape.reshape(&g, vec![])?;
    let comp = tape.slice(probs, 1, 1, 2)?;
    let comp = tape.reshape(&comp, vec![])?;
    Ok((g, comp))
}

/// Convex combination (1-g)*individual + g*joint, both weights taken from
/// the same softmax pair so the endpoints are exact.
pub fn gate_qkv(
    tape: &mut Tape,
    ind: &Tensor,
    joint: &Tensor,
    gate: Option<(&Tensor, &Tensor)>,
) -> Result<Tensor> {
    if ind.shape != joint.shape {
        return Err(TensorError::ShapeMismatch {
            op: "gate_qkv",
            lhs: ind.shape.clone(),
            rhs: joint.shape.clone(),
        }
        .into());
    }
    match gate {
        Some((g, comp)) => {
            let a = tape.scale_t(ind, comp)?;
            let b = tape.scale_t(joint, g)?;
            Ok(tape.add(&a, &b)?)
        }
        None => {
            let a = tape.scale(ind, 0.5)?;
            let b = tape.scale(joint, 0.5)?;
            Ok(tape.add(&a, &b)?)
        }
    }
}

struct GatedHead {
    q: Tensor,
    k: Tensor,
    v: Tensor,
}

impl<'a> Fwd<'a> {
    fn stat(&mut self, f: impl FnOnce(&mut ForwardStats)) {
        if let Some(s) = self.stats.as_deref_mut() {
            f(s);
        }
    }

    fn block_param(&self, block: usize, name: &str) -> &'a Tensor {
        self.tp.get(&format!("block{}.{}", block, name))
    }

    fn embed(
        &mut self,
        frames_st: &Tensor,
        frames_lt: Option<&Tensor>,
    ) -> Result<(Tensor, Option<Tensor>)> {
        let cfg = self.cfg;
        let want_st = vec![cfg.n_st, cfg.height, cfg.width, cfg.channels];
        if frames_st.shape != want_st {
            return Err(TensorError::ShapeMismatch {
                op: "embed",
                lhs: frames_st.shape.clone(),
                rhs: want_st,
            }
            .into());
        }
        let e = self.tp.get("patch_embed").clone();
        let x_st = patchify(frames_st, cfg);
        let x_st = self.tape.leaf(&x_st);
        let proj_st = self.tape.matmul(&x_st, &e)?;
        let cls = self.tp.get("cls").clone();
        let cls_row = self.tape.reshape(&cls, vec![1, cfg.embed_dim])?;
        let with_cls = self.tape.concat(&[&cls_row, &proj_st], 0)?;
        let z_st = self.tape.add(&with_cls, self.tp.get("pos_st"))?;

        let z_lt = match frames_lt {
            Some(fr) => {
                let want_lt = vec![cfg.n_lt, cfg.height, cfg.width, cfg.channels];
                if fr.shape != want_lt {
                    return Err(TensorError::ShapeMismatch {
                        op: "embed",
                        lhs: fr.shape.clone(),
                        rhs: want_lt,
                    }
                    .into());
                }
                let x_lt = patchify(fr, cfg);
                let x_lt = self.tape.leaf(&x_lt);
                let proj_lt = self.tape.matmul(&x_lt, &e)?;
                Some(self.tape.add(&proj_lt, self.tp.get("pos_lt"))?)
            }
            None => None,
        };
        Ok((z_st, z_lt))
    }

    /// Gate pair for one stream of one head, per the configured mode.
    fn compute_gate(
        &mut self,
        block: usize,
        head: usize,
        stream: &'static str,
        ind: &GatedHead,
        joint: &GatedHead,
    ) -> Result<Option<(Tensor, Tensor)>> {
        let probs = match self.cfg.gating_mode {
            GatingMode::OnlyShortTerm | GatingMode::NoGating => return Ok(None),
            GatingMode::FixedParam => {
                let logits = self.block_param(block, &format!("gate_{}_logits", stream)).clone();
                let row = self.tape.slice(&logits, 0, head, head + 1)?;
                self.tape.softmax_last(&row)?
            }
            GatingMode::Feature => {
                let pooled_i = pooled_features(self.tape, &ind.q, &ind.k, &ind.v)?;
                let pooled_j = pooled_features(self.tape, &joint.q, &joint.k, &joint.v)?;
                let feat = self.tape.concat(&[&pooled_i, &pooled_j], 0)?;
                let feat = self.tape.reshape(&feat, vec![1, 6 * self.cfg.head_dim()])?;
                let w = self.block_param(block, &format!("gate_{}_w", stream)).clone();
                let b = self.block_param(block, &format!("gate_{}_b", stream)).clone();
                let logits = self.tape.matmul(&feat, &w)?;
                let logits = self.tape.add_bias(&logits, &b)?;
                self.tape.softmax_last(&logits)?
            }
        };
        let (g, comp) = split_gate(self.tape, &probs)?;
        let value = g.item();
        self.stat(|s| {
            s.gates.push(GateRecord {
                block,
                head,
                stream,
                value,
            })
        });
        Ok(Some((g, comp)))
    }

    fn gate_head(
        &mut self,
        block: usize,
        head: usize,
        stream: &'static str,
        ind: GatedHead,
        joint: GatedHead,
    ) -> Result<GatedHead> {
        let gate = self.compute_gate(block, head, stream, &ind, &joint)?;
        let gate_ref = gate.as_ref().map(|(g, c)| (g, c));
        Ok(GatedHead {
            q: gate_qkv(self.tape, &ind.q, &joint.q, gate_ref)?,
            k: gate_qkv(self.tape, &ind.k, &joint.k, gate_ref)?,
            v: gate_qkv(self.tape, &ind.v, &joint.v, gate_ref)?,
        })
    }

    /// Scaled-dot-product attention of `q` rows against `keys`, returning
    /// the weighted sum of `values` and recording stats.
    fn attend(
        &mut self,
        q: &Tensor,
        keys: &Tensor,
        values: &Tensor,
        pass: Pass,
        block: usize,
        head: usize,
        query_coords: &[TokenCoord],
        key_coords: &[TokenCoord],
    ) -> Result<Tensor> {
        let scale = 1.0 / (self.cfg.head_dim() as f64).sqrt();
        let logits = self.tape.matmul_nt(q, keys)?;
        let logits = self.tape.scale(&logits, scale)?;
        let alpha = self.tape.softmax_last(&logits)?;
        self.stat(|s| s.note_attention(&alpha, pass, block, head, query_coords, key_coords));
        Ok(self.tape.matmul(&alpha, values)?)
    }

    /// Temporal attention for one head. Stream tensors include the cls row
    /// at the front of the short stream. Returns tokens in [lt, cls, st]
    /// order, width K_h.
    fn temporal_head(
        &mut self,
        block: usize,
        head: usize,
        st: &GatedHead,
        lt: Option<&GatedHead>,
    ) -> Result<Tensor> {
        let cfg = self.cfg;
        let n = cfg.patches_per_frame();
        let kh = cfg.head_dim();
        let st_tokens = cfg.n_st * n;

        let q_cls = self.tape.slice(&st.q, 0, 0, 1)?;
        let k_cls = self.tape.slice(&st.k, 0, 0, 1)?;
        let v_cls = self.tape.slice(&st.v, 0, 0, 1)?;
        let q_st = self.tape.slice(&st.q, 0, 1, st_tokens + 1)?;
        let q_st = self.tape.reshape(&q_st, vec![cfg.n_st, n, kh])?;
        let k_st = self.tape.slice(&st.k, 0, 1, st_tokens + 1)?;
        let k_st = self.tape.reshape(&k_st, vec![cfg.n_st, n, kh])?;
        let v_st = self.tape.slice(&st.v, 0, 1, st_tokens + 1)?;
        let v_st = self.tape.reshape(&v_st, vec![cfg.n_st, n, kh])?;

        let lt3 = match lt {
            Some(lt) => {
                let q = self.tape.reshape(&lt.q, vec![cfg.n_lt, n, kh])?;
                let k = self.tape.reshape(&lt.k, vec![cfg.n_lt, n, kh])?;
                let v = self.tape.reshape(&lt.v, vec![cfg.n_lt, n, kh])?;
                Some((q, k, v))
            }
            None => None,
        };
        let n_lt = if lt3.is_some() { cfg.n_lt } else { 0 };

        let mut lt_cols: Vec<Tensor> = Vec::with_capacity(n);
        let mut st_cols: Vec<Tensor> = Vec::with_capacity(n);
        for p in 0..n {
            let take = |tape: &mut Tape, t3: &Tensor, frames: usize| -> Result<Tensor> {
                let sl = tape.slice(t3, 1, p, p + 1)?;
                Ok(tape.reshape(&sl, vec![frames, kh])?)
            };
            let q_stp = take(self.tape, &q_st, cfg.n_st)?;
            let k_stp = take(self.tape, &k_st, cfg.n_st)?;
            let v_stp = take(self.tape, &v_st, cfg.n_st)?;

            let (q_all, k_aug, v_aug) = match &lt3 {
                Some((ql, kl, vl)) => {
                    let q_ltp = take(self.tape, ql, cfg.n_lt)?;
                    let k_ltp = take(self.tape, kl, cfg.n_lt)?;
                    let v_ltp = take(self.tape, vl, cfg.n_lt)?;
                    (
                        self.tape.concat(&[&q_ltp, &q_stp], 0)?,
                        self.tape.concat(&[&k_cls, &k_ltp, &k_stp], 0)?,
                        self.tape.concat(&[&v_cls, &v_ltp, &v_stp], 0)?,
                    )
                }
                None => (
                    q_stp,
                    self.tape.concat(&[&k_cls, &k_stp], 0)?,
                    self.tape.concat(&[&v_cls, &v_stp], 0)?,
                ),
            };

            let mut query_coords: Vec<TokenCoord> = (0..n_lt)
                .map(|t| TokenCoord::Lt { t, p })
                .collect();
            query_coords.extend((0..cfg.n_st).map(|t| TokenCoord::St { t, p }));
            let mut key_coords = vec![TokenCoord::Cls];
            key_coords.extend((0..n_lt).map(|t| TokenCoord::Lt { t, p }));
            key_coords.extend((0..cfg.n_st).map(|t| TokenCoord::St { t, p }));

            let out = self.attend(
                &q_all,
                &k_aug,
                &v_aug,
                Pass::Temporal,
                block,
                head,
                &query_coords,
                &key_coords,
            )?;
            if n_lt > 0 {
                let lt_part = self.tape.slice(&out, 0, 0, n_lt)?;
                lt_cols.push(self.tape.reshape(&lt_part, vec![n_lt, 1, kh])?);
                let st_part = self.tape.slice(&out, 0, n_lt, n_lt + cfg.n_st)?;
                st_cols.push(self.tape.reshape(&st_part, vec![cfg.n_st, 1, kh])?);
            } else {
                st_cols.push(self.tape.reshape(&out, vec![cfg.n_st, 1, kh])?);
            }
        }

        // cls attends globally over both streams
        let (cls_keys, cls_vals, cls_key_coords) = {
            let k_st_flat = self.tape.reshape(&k_st, vec![st_tokens, kh])?;
            let v_st_flat = self.tape.reshape(&v_st, vec![st_tokens, kh])?;
            let mut coords = vec![TokenCoord::Cls];
            match &lt3 {
                Some((_, kl, vl)) => {
                    let k_lt_flat = self.tape.reshape(kl, vec![n_lt * n, kh])?;
                    let v_lt_flat = self.tape.reshape(vl, vec![n_lt * n, kh])?;
                    for t in 0..n_lt {
                        for p in 0..n {
                            coords.push(TokenCoord::Lt { t, p });
                        }
                    }
                    for t in 0..cfg.n_st {
                        for p in 0..n {
                            coords.push(TokenCoord::St { t, p });
                        }
                    }
                    (
                        self.tape.concat(&[&k_cls, &k_lt_flat, &k_st_flat], 0)?,
                        self.tape.concat(&[&v_cls, &v_lt_flat, &v_st_flat], 0)?,
                        coords,
                    )
                }
                None => {
                    for t in 0..cfg.n_st {
                        for p in 0..n {
                            coords.push(TokenCoord::St { t, p });
                        }
                    }
                    (
                        self.tape.concat(&[&k_cls, &k_st_flat], 0)?,
                        self.tape.concat(&[&v_cls, &v_st_flat], 0)?,
                        coords,
                    )
                }
            }
        };
        let cls_out = self.attend(
            &q_cls,
            &cls_keys,
            &cls_vals,
            Pass::Temporal,
            block,
            head,
            &[TokenCoord::Cls],
            &cls_key_coords,
        )?;

        let st_grid = self.tape.concat(&st_cols.iter().collect::<Vec<_>>(), 1)?;
        let st_flat = self.tape.reshape(&st_grid, vec![st_tokens, kh])?;
        if n_lt > 0 {
            let lt_grid = self.tape.concat(&lt_cols.iter().collect::<Vec<_>>(), 1)?;
            let lt_flat = self.tape.reshape(&lt_grid, vec![n_lt * n, kh])?;
            Ok(self.tape.concat(&[&lt_flat, &cls_out, &st_flat], 0)?)
        } else {
            Ok(self.tape.concat(&[&cls_out, &st_flat], 0)?)
        }
    }

    /// Per-frame attention for one stream: every patch of frame f attends
    /// to cls plus the N patches of frame f.
    #[allow(clippy::too_many_arguments)]
    fn spatial_stream(
        &mut self,
        block: usize,
        head: usize,
        q2: &Tensor,
        k2: &Tensor,
        v2: &Tensor,
        k_cls: &Tensor,
        v_cls: &Tensor,
        frames: usize,
        long: bool,
    ) -> Result<Vec<Tensor>> {
        let n = self.cfg.patches_per_frame();
        let coord = |t: usize, p: usize| {
            if long {
                TokenCoord::Lt { t, p }
            } else {
                TokenCoord::St { t, p }
            }
        };
        let mut outs = Vec::with_capacity(frames);
        for f in 0..frames {
            let qf = self.tape.slice(q2, 0, f * n, (f + 1) * n)?;
            let kf = self.tape.slice(k2, 0, f * n, (f + 1) * n)?;
            let vf = self.tape.slice(v2, 0, f * n, (f + 1) * n)?;
            let keys = self.tape.concat(&[k_cls, &kf], 0)?;
            let vals = self.tape.concat(&[v_cls, &vf], 0)?;
            let query_coords: Vec<TokenCoord> = (0..n).map(|p| coord(f, p)).collect();
            let mut key_coords = vec![TokenCoord::Cls];
            key_coords.extend((0..n).map(|p| coord(f, p)));
            outs.push(self.attend(
                &qf,
                &keys,
                &vals,
                Pass::Spatial,
                block,
                head,
                &query_coords,
                &key_coords,
            )?);
        }
        Ok(outs)
    }

    /// Spatial attention for one head: each patch attends to cls plus its
    /// own frame's patches within its own stream.
    fn spatial_head(
        &mut self,
        block: usize,
        head: usize,
        st: &GatedHead,
        lt: Option<&GatedHead>,
    ) -> Result<Tensor> {
        let cfg = self.cfg;
        let n = cfg.patches_per_frame();
        let st_tokens = cfg.n_st * n;

        let q_cls = self.tape.slice(&st.q, 0, 0, 1)?;
        let k_cls = self.tape.slice(&st.k, 0, 0, 1)?;
        let v_cls = self.tape.slice(&st.v, 0, 0, 1)?;
        let q_st = self.tape.slice(&st.q, 0, 1, st_tokens + 1)?;
        let k_st = self.tape.slice(&st.k, 0, 1, st_tokens + 1)?;
        let v_st = self.tape.slice(&st.v, 0, 1, st_tokens + 1)?;

        let lt_outs = match lt {
            Some(lt) => self.spatial_stream(
                block,
                head,
                &lt.q,
                &lt.k,
                &lt.v,
                &k_cls,
                &v_cls,
                cfg.n_lt,
                true,
            )?,
            None => Vec::new(),
        };
        let st_outs = self.spatial_stream(
            block, head, &q_st, &k_st, &v_st, &k_cls, &v_cls, cfg.n_st, false,
        )?;

        // cls attends to the query frame: the short stream's last frame
        let k_last = self
            .tape
            .slice(&k_st, 0, (cfg.n_st - 1) * n, cfg.n_st * n)?;
        let v_last = self
            .tape
            .slice(&v_st, 0, (cfg.n_st - 1) * n, cfg.n_st * n)?;
        let keys = self.tape.concat(&[&k_cls, &k_last], 0)?;
        let vals = self.tape.concat(&[&v_cls, &v_last], 0)?;
        let mut key_coords = vec![TokenCoord::Cls];
        key_coords.extend((0..n).map(|p| TokenCoord::St { t: cfg.n_st - 1, p }));
        let cls_out = self.attend(
            &q_cls,
            &keys,
            &vals,
            Pass::Spatial,
            block,
            head,
            &[TokenCoord::Cls],
            &key_coords,
        )?;

        let mut parts: Vec<&Tensor> = lt_outs.iter().collect();
        parts.push(&cls_out);
        parts.extend(st_outs.iter());
        Ok(self.tape.concat(&parts, 0)?)
    }

    /// Concatenate head outputs, project, and add the residual.
    fn msa_project(
        &mut self,
        block: usize,
        heads: &[Tensor],
        residual: &Tensor,
    ) -> Result<Tensor> {
        let refs: Vec<&Tensor> = heads.iter().collect();
        let cat = self.tape.concat(&refs, 1)?;
        let proj = self.tape.matmul(&cat, self.block_param(block, "u_msa_w"))?;
        let proj = self.tape.add_bias(&proj, self.block_param(block, "u_msa_b"))?;
        Ok(self.tape.add(&proj, residual)?)
    }

    /// Full-width qkv matrices for one attention pass, from a layer-normed
    /// token matrix in [lt, cls, st] order.
    fn compute_qkv(
        &mut self,
        block: usize,
        h_full: &Tensor,
        with_joint: bool,
    ) -> Result<(Tensor, Option<Tensor>, Option<Tensor>)> {
        let cfg = self.cfg;
        let lt_tokens = cfg.tokens_lt();
        let total = cfg.tokens_total();
        let h_st = self.tape.slice(h_full, 0, lt_tokens, total)?;
        let qkv_st = self.tape.matmul(&h_st, self.block_param(block, "u_qkv_st"))?;
        if lt_tokens == 0 {
            return Ok((qkv_st, None, None));
        }
        let h_lt = self.tape.slice(h_full, 0, 0, lt_tokens)?;
        let qkv_lt = self.tape.matmul(&h_lt, self.block_param(block, "u_qkv_lt"))?;
        let qkv_joint = if with_joint {
            Some(
                self.tape
                    .matmul(h_full, self.block_param(block, "u_qkv_joint"))?,
            )
        } else {
            None
        };
        Ok((qkv_st, Some(qkv_lt), qkv_joint))
    }

    fn block(&mut self, l: usize, z: &Tensor) -> Result<Tensor> {
        let cfg = self.cfg;
        let k = cfg.embed_dim;
        let kh = cfg.head_dim();
        let lt_tokens = cfg.tokens_lt();
        let total = cfg.tokens_total();

        // gated temporal attention
        let ln_g = self.block_param(l, "ln_attn_g").clone();
        let ln_b = self.block_param(l, "ln_attn_b").clone();
        let h = self.tape.layer_norm(z, &ln_g, &ln_b, LN_EPS)?;
        let (qkv_st, qkv_lt, qkv_joint) = self.compute_qkv(l, &h, true)?;

        let mut head_outs = Vec::with_capacity(cfg.heads);
        for a in 0..cfg.heads {
            let (q, kk, v) = head_slices(self.tape, &qkv_st, a, k, kh)?;
            let ind_st = GatedHead { q, k: kk, v };
            let (st_gated, lt_gated) = match (&qkv_lt, &qkv_joint) {
                (Some(qkv_lt), Some(qkv_joint)) => {
                    let joint_st = self.tape.slice(qkv_joint, 0, lt_tokens, total)?;
                    let joint_lt = self.tape.slice(qkv_joint, 0, 0, lt_tokens)?;
                    let (jq, jk, jv) = head_slices(self.tape, &joint_st, a, k, kh)?;
                    let joint_st_h = GatedHead { q: jq, k: jk, v: jv };
                    let (lq, lk, lv) = head_slices(self.tape, qkv_lt, a, k, kh)?;
                    let ind_lt = GatedHead { q: lq, k: lk, v: lv };
                    let (jlq, jlk, jlv) = head_slices(self.tape, &joint_lt, a, k, kh)?;
                    let joint_lt_h = GatedHead { q: jlq, k: jlk, v: jlv };
                    let st_gated = self.gate_head(l, a, "st", ind_st, joint_st_h)?;
                    let lt_gated = self.gate_head(l, a, "lt", ind_lt, joint_lt_h)?;
                    (st_gated, Some(lt_gated))
                }
                _ => (ind_st, None),
            };
            head_outs.push(self.temporal_head(l, a, &st_gated, lt_gated.as_ref())?);
        }
        let z1 = self.msa_project(l, &head_outs, z)?;

        // shared spatial attention with fresh qkv
        let h2 = self.tape.layer_norm(&z1, &ln_g, &ln_b, LN_EPS)?;
        let (qkv_st2, qkv_lt2, _) = self.compute_qkv(l, &h2, false)?;
        let mut head_outs = Vec::with_capacity(cfg.heads);
        for a in 0..cfg.heads {
            let (q, kk, v) = head_slices(self.tape, &qkv_st2, a, k, kh)?;
            let st_h = GatedHead { q, k: kk, v };
            let lt_h = match &qkv_lt2 {
                Some(qkv_lt2) => {
                    let (lq, lk, lv) = head_slices(self.tape, qkv_lt2, a, k, kh)?;
                    Some(GatedHead { q: lq, k: lk, v: lv })
                }
                None => None,
            };
            head_outs.push(self.spatial_head(l, a, &st_h, lt_h.as_ref())?);
        }
        let z2 = self.msa_project(l, &head_outs, &z1)?;

        // MLP with pre-norm and residual
        let mg = self.block_param(l, "ln_mlp_g").clone();
        let mb = self.block_param(l, "ln_mlp_b").clone();
        let h3 = self.tape.layer_norm(&z2, &mg, &mb, LN_EPS)?;
        let m = self.tape.matmul(&h3, self.block_param(l, "mlp_w1"))?;
        let m = self.tape.add_bias(&m, self.block_param(l, "mlp_b1"))?;
        let m = self.tape.gelu(&m)?;
        let m = self.tape.matmul(&m, self.block_param(l, "mlp_w2"))?;
        let m = self.tape.add_bias(&m, self.block_param(l, "mlp_b2"))?;
        Ok(self.tape.add(&z2, &m)?)
    }

    fn head(&mut self, z: &Tensor) -> Result<Tensor> {
        let cfg = self.cfg;
        let cls_row = self
            .tape
            .slice(z, 0, cfg.tokens_lt(), cfg.tokens_lt() + 1)?;
        let y = self.tape.layer_norm(
            &cls_row,
            self.tp.get("ln_final_g"),
            self.tp.get("ln_final_b"),
            LN_EPS,
        )?;
        let h = self.tape.matmul(&y, self.tp.get("head_w1"))?;
        let h = self.tape.add_bias(&h, self.tp.get("head_b1"))?;
        let h = self.tape.gelu(&h)?;
        let logits = self.tape.matmul(&h, self.tp.get("head_w2"))?;
        let logits = self.tape.add_bias(&logits, self.tp.get("head_b2"))?;
        Ok(self.tape.reshape(&logits, vec![cfg.num_classes])?)
    }
}

/// Run the full model on one window. `frames_lt` must be `None` exactly
/// when the gating mode drops the long stream. Returns the class logits as
/// a tensor on the tape.
pub fn forward(
    tape: &mut Tape,
    frames_st: &Tensor,
    frames_lt: Option<&Tensor>,
    tp: &TapedParams,
    cfg: &ModelConfig,
    stats: Option<&mut ForwardStats>,
) -> Result<Tensor> {
    if cfg.gating_mode.uses_long_stream() != frames_lt.is_some() {
        return Err(crate::GlsError::config(format!(
            "gating mode {} {} a long stream input",
            cfg.gating_mode.name(),
            if cfg.gating_mode.uses_long_stream() {
                "requires"
            } else {
                "forbids"
            }
        )));
    }
    let mut fw = Fwd {
        tape,
        tp,
        cfg,
        stats,
    };
    let (z_st, z_lt) = fw.embed(frames_st, frames_lt)?;
    let mut z = match &z_lt {
        Some(z_lt) => fw.tape.concat(&[z_lt, &z_st], 0)?,
        None => z_st,
    };
    for l in 0..cfg.blocks {
        z = fw.block(l, &z)?;
    }
    fw.head(&z)
}

/// Inference convenience: fresh tape, plain logit values out.
pub fn forward_logits(
    params: &ModelParams,
    cfg: &ModelConfig,
    frames_st: &Tensor,
    frames_lt: Option<&Tensor>,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let tp = TapedParams::record(&mut tape, params);
    let logits = forward(&mut tape, frames_st, frames_lt, &tp, cfg, None)?;
    Ok(logits.data)
}
