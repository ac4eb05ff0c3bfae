//! Audio-visual fusion losses.
//!
//! Four static strategies (distillation or contrastive, applied to the
//! continuous encoder output or to the first quantizer layer) plus
//! timing-aware fusion, which pools audio frames inside a window whose width
//! follows the visual change at each video frame.
//!
//! Frame indices in this module are 1-based where they appear in the public
//! window helpers ([`align_index`], [`window`], [`attention_pool`]).

use std::ops::RangeInclusive;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ad::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, Component, ParamStore};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionLocation {
    PreQuantization,
    QuantizationLevel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMethod {
    None,
    Distillation,
    Contrastive,
    Tapf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComplexityNorm {
    L1,
    L2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Attention,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub location: FusionLocation,
    pub method: FusionMethod,
    pub lambda_fusion: f64,
    /// Contrastive temperature.
    pub tau: f64,
    pub w_min: usize,
    pub w_max: usize,
    pub lambda_sim: f64,
    pub complexity_norm: ComplexityNorm,
    pub pooling: Pooling,
    /// Map complexity scores to zero mean and unit variance per sequence.
    pub complexity_standardize: bool,
    /// Replace dynamic windows with this constant width (ablation).
    pub fixed_window: Option<usize>,
    /// Shared projection width; defaults to the visual feature width.
    pub proj_dim: Option<usize>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            location: FusionLocation::PreQuantization,
            method: FusionMethod::Tapf,
            lambda_fusion: 1.0,
            tau: 0.07,
            w_min: 1,
            w_max: 7,
            lambda_sim: 1.0,
            complexity_norm: ComplexityNorm::L2,
            pooling: Pooling::Attention,
            complexity_standardize: true,
            fixed_window: None,
            proj_dim: None,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.w_min < 1 || self.w_min > self.w_max {
            return Err(Error::config(format!(
                "fusion window bounds need 1 <= w_min <= w_max, got {}..{}",
                self.w_min, self.w_max
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::config("fusion.tau must be positive"));
        }
        if !(self.lambda_fusion >= 0.0) || !(self.lambda_sim >= 0.0) {
            return Err(Error::config("fusion weights must be nonnegative"));
        }
        if self.fixed_window == Some(0) {
            return Err(Error::config("fusion.fixed_window must be positive"));
        }
        Ok(())
    }

    pub fn active(&self) -> bool {
        self.method != FusionMethod::None
    }

    /// Window width for complexity score `c`.
    pub fn window_for(&self, c: f64) -> usize {
        self.fixed_window
            .unwrap_or_else(|| dynamic_window(c, self.w_min, self.w_max))
    }
}

// ---------------------------------------------------------------------------
// Projection heads

/// Linear maps into the shared space. The audio head is trainable; the vision
/// head is a fixed map (identity when widths agree) so the target space
/// cannot collapse.
pub struct Heads {
    pub proj_dim: usize,
}

impl Heads {
    pub fn init_params(cfg: &FusionConfig, latent_dim: usize, visual_dim: usize, rng: &mut Rng, store: &mut ParamStore) -> Self {
        let ds = cfg.proj_dim.unwrap_or(visual_dim);
        store.insert_layer(rng, "fusion.audio", Component::FusionHead, vec![latent_dim, ds], latent_dim, ds);
        let w = if ds == visual_dim {
            let mut w = Tensor::zeros(vec![visual_dim, ds]);
            for i in 0..ds {
                w.data_mut()[i * ds + i] = 1.0;
            }
            w
        } else {
            let normal = Normal::new(0.0, 1.0 / (visual_dim as f64).sqrt()).expect("std");
            let data = (0..visual_dim * ds).map(|_| normal.sample(rng)).collect();
            Tensor::new(vec![visual_dim, ds], data).expect("shape")
        };
        store.insert("fusion.vision.weight", Component::FusionHead, w, false);
        store.insert("fusion.vision.bias", Component::FusionHead, Tensor::zeros(vec![ds]), false);
        Self { proj_dim: ds }
    }

    fn apply(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
        let w = p.var(&format!("{prefix}.weight"))?;
        let b = p.var(&format!("{prefix}.bias"))?;
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }

    /// `[..., d] → [..., d_s]`.
    pub fn project_audio(tape: &mut Tape, p: &Bound, z: Var) -> Result<Var> {
        Self::apply(tape, p, "fusion.audio", z)
    }

    /// `[..., d_v] → [..., d_s]`.
    pub fn project_vision(tape: &mut Tape, p: &Bound, v: Var) -> Result<Var> {
        Self::apply(tape, p, "fusion.vision", v)
    }
}

// ---------------------------------------------------------------------------
// Alignment helpers

/// Audio frame (1-based) at the centre of video frame `t` (1-based):
/// `clamp(round((t - 0.5)·T'/T_v + 0.5), 1, T')`.
pub fn align_index(t: usize, t_v: usize, t_latent: usize) -> usize {
    let c = ((t as f64 - 0.5) * t_latent as f64 / t_v as f64 + 0.5).round();
    (c.max(1.0) as usize).min(t_latent)
}

/// `round(W_min + (W_max - W_min)·σ(c))`, rounding half away from zero.
pub fn dynamic_window(c: f64, w_min: usize, w_max: usize) -> usize {
    let s = 1.0 / (1.0 + (-c).exp());
    let w = (w_min as f64 + (w_max - w_min) as f64 * s).round() as usize;
    w.clamp(w_min, w_max)
}

/// 1-based indices within `⌊w/2⌋` of `center`, clipped to `[1, len]`.
pub fn window(center: usize, w: usize, len: usize) -> RangeInclusive<usize> {
    let half = w / 2;
    center.saturating_sub(half).max(1)..=(center + half).min(len)
}

/// Per-frame visual change `c_t = ‖v_t − v_{t−1}‖`, `c_1 = ‖v_1‖`, for
/// `v: [T_v, d_v]`.
pub fn visual_complexity(v: &Tensor, norm: ComplexityNorm, standardize: bool) -> Result<Vec<f64>> {
    if v.rank() != 2 {
        return Err(Error::dim("visual_complexity", v.shape(), &[0, 0]));
    }
    let measure = |x: &mut dyn Iterator<Item = f64>| -> f64 {
        match norm {
            ComplexityNorm::L1 => x.map(f64::abs).sum(),
            ComplexityNorm::L2 => x.map(|a| a * a).sum::<f64>().sqrt(),
        }
    };
    let mut c = Vec::with_capacity(v.shape()[0]);
    let mut prev: Option<&[f64]> = None;
    for row in v.rows() {
        c.push(match prev {
            None => measure(&mut row.iter().copied()),
            Some(p) => measure(&mut row.iter().zip(p).map(|(a, b)| a - b)),
        });
        prev = Some(row);
    }
    if standardize {
        let n = c.len() as f64;
        let mean = c.iter().sum::<f64>() / n;
        let var = c.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let sd = var.sqrt();
        for x in &mut c {
            *x = if sd > 1e-12 { (*x - mean) / sd } else { 0.0 };
        }
    }
    Ok(c)
}

// ---------------------------------------------------------------------------
// Losses

fn batched(tape: &Tape, x: Var, op: &'static str) -> Result<(usize, usize, usize)> {
    match *tape.shape(x) {
        [t, d] => Ok((1, t, d)),
        [b, t, d] => Ok((b, t, d)),
        _ => Err(Error::dim(op, tape.shape(x), &[0, 0, 0])),
    }
}

/// Dimension-wise distillation: `softplus(−cos(a_{c(t)}, v_t))` averaged over
/// video frames, where `c(t)` is [`align_index`]. Accepts `[T, d]` or
/// `[B, T, d]` inputs.
pub fn distill_loss(tape: &mut Tape, f_audio: Var, f_vision: Var) -> Result<Var> {
    let (b, ta, d) = batched(tape, f_audio, "distill_loss")?;
    let (bv, tv, dv) = batched(tape, f_vision, "distill_loss")?;
    if b != bv || d != dv {
        return Err(Error::dim("distill_loss", tape.shape(f_audio), tape.shape(f_vision)));
    }
    let a = tape.reshape(f_audio, &[b * ta, d])?;
    let v = tape.reshape(f_vision, &[b * tv, d])?;
    let idx: Vec<usize> = (0..b)
        .flat_map(|i| (1..=tv).map(move |t| i * ta + align_index(t, tv, ta) - 1))
        .collect();
    let aligned = tape.gather(a, &idx)?;
    let cos = tape.cosine_similarity(aligned, v)?;
    let neg = tape.neg(cos);
    let per = tape.softplus(neg);
    Ok(tape.mean(per))
}

/// Symmetric InfoNCE over time-averaged features `[B, T, d]`.
pub fn contrastive_loss(tape: &mut Tape, f_audio: Var, f_vision: Var, tau: f64) -> Result<Var> {
    let (b, _, d) = batched(tape, f_audio, "contrastive_loss")?;
    let (bv, _, dv) = batched(tape, f_vision, "contrastive_loss")?;
    if b != bv || d != dv {
        return Err(Error::dim("contrastive_loss", tape.shape(f_audio), tape.shape(f_vision)));
    }
    if !(tau > 0.0) {
        return Err(Error::config("contrastive temperature must be positive"));
    }
    let a = pool_time(tape, f_audio, b, d)?;
    let v = pool_time(tape, f_vision, b, d)?;
    let sims = similarity_matrix(tape, a, v, b)?;
    let logits = tape.scale(sims, 1.0 / tau);
    let eye = tape.constant(identity(b));
    let a2v = tape.log_softmax(logits);
    let a2v = tape.mul(a2v, eye)?;
    let a2v = tape.sum(a2v);
    let logits_t = tape.transpose(logits)?;
    let v2a = tape.log_softmax(logits_t);
    let v2a = tape.mul(v2a, eye)?;
    let v2a = tape.sum(v2a);
    let both = tape.add(a2v, v2a)?;
    Ok(tape.scale(both, -0.5 / b as f64))
}

fn pool_time(tape: &mut Tape, x: Var, b: usize, d: usize) -> Result<Var> {
    let t = tape.value(x).numel() / (b * d);
    let x = tape.reshape(x, &[b, t, d])?;
    tape.mean_axis(x, 1)
}

fn identity(n: usize) -> Tensor {
    let mut t = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        t.data_mut()[i * n + i] = 1.0;
    }
    t
}

/// `s[i][j] = cos(a_i, v_j)` for `a, v: [B, d]`.
fn similarity_matrix(tape: &mut Tape, a: Var, v: Var, b: usize) -> Result<Var> {
    let mut rows = Vec::with_capacity(b);
    for i in 0..b {
        let ai = tape.gather(a, &[i])?;
        let d = tape.shape(ai)[1];
        let ai = tape.reshape(ai, &[d])?;
        let row = tape.cosine_similarity(v, ai)?;
        rows.push(tape.reshape(row, &[1, b])?);
    }
    let flat = tape.concat(&rows)?;
    tape.reshape(flat, &[b, b])
}

/// Attention pooling of `z: [T', d]` around `center` (1-based) with width `w`:
/// softmax over the window of `cos(v_t, z_j)`, then the weighted sum. Returns
/// `[d]`.
pub fn attention_pool(tape: &mut Tape, v_t: Var, z: Var, center: usize, w: usize) -> Result<Var> {
    let (t, d) = match *tape.shape(z) {
        [t, d] => (t, d),
        _ => return Err(Error::dim("attention_pool", tape.shape(z), &[0, 0])),
    };
    if center < 1 || center > t || w == 0 {
        return Err(Error::contract(format!("window centre {center} (width {w}) outside 1..={t}")));
    }
    let idx: Vec<usize> = window(center, w, t).map(|j| j - 1).collect();
    let pooled = pool_rows(tape, z, v_t, &idx, Pooling::Attention)?;
    tape.reshape(pooled, &[d])
}

/// Pools rows `idx` of `z: [N, d]` against query `v: [d]` or `[1, d]`; returns
/// `[1, d]`.
fn pool_rows(tape: &mut Tape, z: Var, v: Var, idx: &[usize], pooling: Pooling) -> Result<Var> {
    let d = *tape.shape(z).last().unwrap();
    let zw = tape.gather(z, idx)?;
    match pooling {
        Pooling::Mean => {
            let m = tape.mean_axis(zw, 0)?;
            tape.reshape(m, &[1, d])
        }
        Pooling::Attention => {
            let q = tape.reshape(v, &[d])?;
            let cos = tape.cosine_similarity(zw, q)?;
            let alpha = tape.softmax(cos);
            let alpha = tape.reshape(alpha, &[1, idx.len()])?;
            tape.matmul(alpha, zw)
        }
    }
}

/// Timing-aware loss for projected audio `z: [B, T', d_s]` and projected
/// video `v: [B, T_v, d_s]` (rank-2 inputs mean `B = 1`). `complexity[b]`
/// holds the per-frame scores of clip `b`.
///
/// `(1/T_v) Σ_t ‖ẑ_t − v_t‖₁ + λ_sim (1 − cos(ẑ_t, v_t))`, averaged over the
/// batch.
pub fn tapf_loss(tape: &mut Tape, z: Var, v: Var, complexity: &[Vec<f64>], cfg: &FusionConfig) -> Result<Var> {
    let (b, ta, d) = batched(tape, z, "tapf_loss")?;
    let (bv, tv, dv) = batched(tape, v, "tapf_loss")?;
    if b != bv || d != dv {
        return Err(Error::dim("tapf_loss", tape.shape(z), tape.shape(v)));
    }
    if complexity.len() != b || complexity.iter().any(|c| c.len() != tv) {
        return Err(Error::contract(format!("tapf_loss needs {b} complexity rows of length {tv}")));
    }
    let zf = tape.reshape(z, &[b * ta, d])?;
    let vf = tape.reshape(v, &[b * tv, d])?;
    let mut pooled = Vec::with_capacity(b * tv);
    for (i, c) in complexity.iter().enumerate() {
        for t in 1..=tv {
            let center = align_index(t, tv, ta);
            let w = cfg.window_for(c[t - 1]);
            let idx: Vec<usize> = window(center, w, ta).map(|j| i * ta + j - 1).collect();
            let q = tape.gather(vf, &[i * tv + t - 1])?;
            pooled.push(pool_rows(tape, zf, q, &idx, cfg.pooling)?);
        }
    }
    let flat = tape.concat(&pooled)?;
    let zhat = tape.reshape(flat, &[b * tv, d])?;
    let diff = tape.sub(zhat, vf)?;
    let l1 = tape.l1(diff);
    let l1 = tape.mean(l1);
    let cos = tape.cosine_similarity(zhat, vf)?;
    let cos = tape.mean(cos);
    let sim = tape.neg(cos);
    let sim = tape.add_scalar(sim, 1.0);
    let sim = tape.scale(sim, cfg.lambda_sim);
    tape.add(l1, sim)
}

/// Features the fusion loss sees: the continuous encoder output, or the first
/// quantizer layer with a straight-through path into the encoder. `None` when
/// fusion is disabled.
pub fn fusion_features(tape: &mut Tape, cfg: &FusionConfig, z_e: Var, first_layer: &Tensor) -> Result<Option<Var>> {
    if !cfg.active() {
        return Ok(None);
    }
    match cfg.location {
        FusionLocation::PreQuantization => Ok(Some(z_e)),
        FusionLocation::QuantizationLevel => {
            let shaped = first_layer.clone().reshape(tape.shape(z_e).to_vec())?;
            Ok(Some(tape.straight_through(z_e, shaped)?))
        }
    }
}

/// Fusion loss for projected audio `[B, T', d_s]` and projected video
/// `[B, T_v, d_s]` under `cfg.method`; raw `visual[b]: [T_v, d_v]` drives the
/// complexity scores.
pub fn fusion_loss(tape: &mut Tape, cfg: &FusionConfig, audio: Var, vision: Var, visual: &[Tensor]) -> Result<Option<Var>> {
    match cfg.method {
        FusionMethod::None => Ok(None),
        FusionMethod::Distillation => distill_loss(tape, audio, vision).map(Some),
        FusionMethod::Contrastive => contrastive_loss(tape, audio, vision, cfg.tau).map(Some),
        FusionMethod::Tapf => {
            let complexity = visual
                .iter()
                .map(|v| visual_complexity(v, cfg.complexity_norm, cfg.complexity_standardize))
                .collect::<Result<Vec<_>>>()?;
            tapf_loss(tape, audio, vision, &complexity, cfg).map(Some)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn softplus(x: f64) -> f64 {
        (1.0 + x.exp()).ln()
    }

    fn distill_value(a: &[Vec<f64>], v: &[Vec<f64>]) -> f64 {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(a).unwrap());
        let v = tape.constant(Tensor::from_rows(v).unwrap());
        let l = distill_loss(&mut tape, a, v).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn distill_closed_forms() {
        assert!((distill_value(&[vec![1.0, 0.0]], &[vec![2.0, 0.0]]) - softplus(-1.0)).abs() < 1e-12);
        assert!((distill_value(&[vec![1.0, 0.0]], &[vec![0.0, 3.0]]) - 2f64.ln()).abs() < 1e-12);
        assert!((distill_value(&[vec![1.0, 0.0]], &[vec![-1.0, 0.0]]) - softplus(1.0)).abs() < 1e-12);
    }

    #[test]
    fn distill_zero_vector_warns() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap());
        let v = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let l = distill_loss(&mut tape, a, v).unwrap();
        assert!((tape.value(l).item() - 2f64.ln()).abs() < 1e-15);
        assert!(!tape.warnings().is_empty());
    }

    fn contrastive_value(a: &[Vec<f64>], v: &[Vec<f64>], tau: f64) -> f64 {
        let b = a.len();
        let d = a[0].len();
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(a).unwrap().reshape(vec![b, 1, d]).unwrap());
        let v = tape.constant(Tensor::from_rows(v).unwrap().reshape(vec![b, 1, d]).unwrap());
        let l = contrastive_loss(&mut tape, a, v, tau).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn contrastive_closed_forms() {
        assert_eq!(contrastive_value(&[vec![0.3, 0.4]], &[vec![-1.0, 2.0]], 0.07), 0.0);
        let same = vec![vec![1.0, 0.0]; 4];
        assert!((contrastive_value(&same, &same, 0.07) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn contrastive_rejects_bad_tau() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 1, 2]).map(|_| 1.0));
        assert!(contrastive_loss(&mut tape, a, a, 0.0).is_err());
    }

    #[test]
    fn align_examples() {
        assert_eq!(align_index(1, 10, 50), 3);
        assert_eq!(align_index(10, 10, 50), 48);
        for t in 1..=12 {
            assert_eq!(align_index(t, 12, 12), t);
        }
    }

    #[test]
    fn window_examples() {
        assert_eq!(dynamic_window(0.0, 1, 7), 4);
        assert_eq!(dynamic_window(1e9, 1, 7), 7);
        assert_eq!(dynamic_window(-5.0, 1, 7), 1);
        assert_eq!(window(1, 7, 10), 1..=4);
        assert_eq!(window(5, 1, 10), 5..=5);
    }

    #[test]
    fn complexity_examples() {
        let v = Tensor::from_rows(&[vec![1.0, 0.0], vec![2.0, 0.0], vec![3.0, 0.0]]).unwrap();
        assert_eq!(visual_complexity(&v, ComplexityNorm::L2, false).unwrap(), vec![1.0, 1.0, 1.0]);
        let k = Tensor::from_rows(&[vec![3.0, -4.0], vec![3.0, -4.0]]).unwrap();
        assert_eq!(visual_complexity(&k, ComplexityNorm::L2, false).unwrap(), vec![5.0, 0.0]);
        assert_eq!(visual_complexity(&k, ComplexityNorm::L1, false).unwrap(), vec![7.0, 0.0]);
        let s = visual_complexity(&k, ComplexityNorm::L2, true).unwrap();
        assert_eq!(s, vec![1.0, -1.0]);
    }

    #[test]
    fn attention_examples() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let v = tape.constant(Tensor::vector(&[1.0, 0.0]));
        let p = attention_pool(&mut tape, v, z, 1, 3).unwrap();
        let a = 1f64.exp() / (1f64.exp() + 1.0);
        let got = tape.value(p).data();
        assert!((got[0] - a).abs() < 1e-15 && (got[1] - (1.0 - a)).abs() < 1e-15);

        let single = attention_pool(&mut tape, v, z, 2, 1).unwrap();
        assert_eq!(tape.value(single).data(), &[0.0, 1.0]);
    }

    #[test]
    fn tapf_zero_when_aligned_and_four_when_opposed() {
        let cfg = FusionConfig::default();
        let mut tape = Tape::new();
        let rows = vec![vec![1.0, 0.0], vec![0.0, 2.0], vec![-1.0, 1.0]];
        let z = tape.constant(Tensor::from_rows(&rows).unwrap());
        let c = vec![vec![0.0; 3]];
        let fixed = FusionConfig {
            fixed_window: Some(1),
            ..cfg.clone()
        };
        let l = tapf_loss(&mut tape, z, z, &c, &fixed).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);

        let zneg = tape.constant(Tensor::from_rows(&[vec![-1.0, 0.0]]).unwrap());
        let v = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let l = tapf_loss(&mut tape, zneg, v, &[vec![0.0]], &cfg).unwrap();
        assert!((tape.value(l).item() - 4.0).abs() < 1e-15);
    }

    #[test]
    fn fusion_features_locations() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::from_rows(&[vec![0.5, 0.25]]).unwrap());
        let q = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let cfg = FusionConfig::default();
        assert_eq!(fusion_features(&mut tape, &cfg, z, &q).unwrap(), Some(z));
        let ql = FusionConfig {
            location: FusionLocation::QuantizationLevel,
            ..cfg.clone()
        };
        let f = fusion_features(&mut tape, &ql, z, &q).unwrap().unwrap();
        assert_eq!(tape.value(f), &q);
        let none = FusionConfig {
            method: FusionMethod::None,
            ..cfg
        };
        assert_eq!(fusion_features(&mut tape, &none, z, &q).unwrap(), None);
    }

    #[test]
    fn config_validation() {
        assert!(FusionConfig::default().validate().is_ok());
        let bad = FusionConfig {
            w_min: 5,
            w_max: 3,
            ..FusionConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad_tau = FusionConfig {
            tau: 0.0,
            ..FusionConfig::default()
        };
        assert!(bad_tau.validate().is_err());
    }
}
