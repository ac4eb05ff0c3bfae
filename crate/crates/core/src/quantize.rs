//! Residual vector quantization and finite scalar quantization.
//!
//! RVQ layer `i` picks the codebook entry nearest (squared Euclidean, ties to
//! the lowest index) to the running residual `r_{i-1}` and subtracts it:
//! `ẑ_i = Q_i(r_{i-1})`, `r_i = r_{i-1} - ẑ_i`, with `r_0 = z_e`. The
//! reported final residual is `z_e - ẑ`, so `z_e - ẑ - r == 0` holds exactly in
//! floating point. Codebooks learn by exponential moving averages only; loss
//! gradients reach the encoder through a straight-through copy.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ad::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RvqConfig {
    pub n_q: usize,
    pub codebook_size: usize,
    pub ema_decay: f64,
    /// Entries unused for this many consecutive updates are re-seeded.
    pub dead_code_steps: u64,
    /// Standard deviation of the initial random entries.
    pub init_scale: f64,
}

impl Default for RvqConfig {
    fn default() -> Self {
        Self {
            n_q: 8,
            codebook_size: 64,
            ema_decay: 0.99,
            dead_code_steps: 1000,
            init_scale: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FsqConfig {
    pub levels: Vec<usize>,
}

impl Default for FsqConfig {
    fn default() -> Self {
        Self {
            levels: vec![8, 5, 5, 5],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QuantizerConfig {
    Rvq(RvqConfig),
    Fsq(FsqConfig),
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        QuantizerConfig::Rvq(RvqConfig::default())
    }
}

/// Output of one quantization pass over `N` latent rows.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizeResult {
    /// `codes[i][t]`: index chosen by layer `i` for row `t`.
    pub codes: Vec<Vec<usize>>,
    /// Sum of the per-layer outputs, `[N, d]`.
    pub z_hat: Tensor,
    /// Per-layer quantized outputs `ẑ_i`.
    pub layers: Vec<Tensor>,
    /// Residual each layer quantized (`r_{i-1}`); these are the EMA targets.
    pub layer_inputs: Vec<Tensor>,
    /// `z_e - ẑ`.
    pub residual: Tensor,
}

impl QuantizeResult {
    /// `ẑ_1`, the first layer's quantized features.
    pub fn first_layer(&self) -> &Tensor {
        &self.layers[0]
    }
}

// ---------------------------------------------------------------------------
// RVQ

#[derive(Clone, Debug, PartialEq)]
pub struct RvqState {
    /// `n_q` codebooks of shape `[K, d]`.
    pub codebooks: Vec<Tensor>,
    /// EMA cluster sizes per entry.
    pub counts: Vec<Vec<f64>>,
    /// Consecutive updates without an assignment, per entry.
    pub idle: Vec<Vec<u64>>,
    /// Entry 0 of every book is the zero vector and never moves.
    pub pinned_zero: bool,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl RvqState {
    /// Random books with the zero vector at index 0 of every layer.
    pub fn init(cfg: &RvqConfig, dim: usize, rng: &mut Rng) -> Result<Self> {
        if cfg.n_q == 0 || cfg.codebook_size == 0 || dim == 0 {
            return Err(Error::config("rvq needs n_q >= 1, codebook_size >= 1, d >= 1"));
        }
        let normal = Normal::new(0.0, cfg.init_scale.max(0.0))
            .map_err(|e| Error::config(format!("rvq init_scale: {e}")))?;
        let k = cfg.codebook_size;
        let codebooks = (0..cfg.n_q)
            .map(|_| {
                let mut data: Vec<f64> = (0..k * dim).map(|_| normal.sample(rng)).collect();
                data[..dim].fill(0.0);
                Tensor::new(vec![k, dim], data).expect("codebook shape")
            })
            .collect();
        Ok(Self {
            codebooks,
            counts: vec![vec![1.0; k]; cfg.n_q],
            idle: vec![vec![cfg.dead_code_steps; k]; cfg.n_q],
            pinned_zero: true,
        })
    }

    /// Books given explicitly; nothing is pinned.
    pub fn from_codebooks(codebooks: Vec<Tensor>) -> Result<Self> {
        if codebooks.is_empty() {
            return Err(Error::config("rvq needs at least one codebook"));
        }
        let d = codebooks[0].last_dim();
        for b in &codebooks {
            if b.rank() != 2 || b.shape()[1] != d {
                return Err(Error::config(format!("codebook shape {:?} (d = {d})", b.shape())));
            }
            if !b.all_finite() {
                return Err(Error::config("codebook entries must be finite"));
            }
        }
        let counts = codebooks.iter().map(|b| vec![1.0; b.shape()[0]]).collect();
        let idle = codebooks.iter().map(|b| vec![0; b.shape()[0]]).collect();
        Ok(Self {
            codebooks,
            counts,
            idle,
            pinned_zero: false,
        })
    }

    pub fn n_q(&self) -> usize {
        self.codebooks.len()
    }

    pub fn dim(&self) -> usize {
        self.codebooks[0].shape()[1]
    }

    pub fn codebook_sizes(&self) -> Vec<usize> {
        self.codebooks.iter().map(|b| b.shape()[0]).collect()
    }

    /// Nearest entry of book `layer` to `row`; ties go to the lowest index.
    pub fn nearest(&self, layer: usize, row: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (k, e) in self.codebooks[layer].rows().enumerate() {
            let d = sq_dist(row, e);
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }

    /// Exponential-moving-average update of one book.
    ///
    /// For each entry `k` with `n_k > 0` assigned targets summing to `s_k`:
    /// `N' = decay·N + (1-decay)·n_k` and
    /// `e' = (decay·N·e + (1-decay)·s_k) / N'`. Entries with no assignment
    /// (and a pinned zero entry) are left untouched, counters included.
    pub fn ema_update_layer(&mut self, layer: usize, codes: &[usize], targets: &Tensor, decay: f64) {
        let d = self.dim();
        let k = self.codebooks[layer].shape()[0];
        let mut n = vec![0usize; k];
        let mut sums = vec![0.0; k * d];
        for (&c, row) in codes.iter().zip(targets.rows()) {
            n[c] += 1;
            for (s, x) in sums[c * d..(c + 1) * d].iter_mut().zip(row) {
                *s += x;
            }
        }
        let book = self.codebooks[layer].data_mut();
        for e in 0..k {
            if n[e] == 0 {
                self.idle[layer][e] = self.idle[layer][e].saturating_add(1);
                continue;
            }
            self.idle[layer][e] = 0;
            if self.pinned_zero && e == 0 {
                continue;
            }
            let old = self.counts[layer][e];
            let new = decay * old + (1.0 - decay) * n[e] as f64;
            for j in 0..d {
                book[e * d + j] = (decay * old * book[e * d + j] + (1.0 - decay) * sums[e * d + j]) / new;
            }
            self.counts[layer][e] = new;
        }
    }

    /// EMA update of every layer from a quantization result.
    pub fn ema_update(&mut self, result: &QuantizeResult, decay: f64) {
        for layer in 0..self.n_q() {
            self.ema_update_layer(layer, &result.codes[layer], &result.layer_inputs[layer], decay);
        }
    }

    /// Re-seeds entries idle for at least `threshold` updates with random rows
    /// of the residuals each layer just saw. Returns the number re-seeded.
    pub fn reseed_dead(&mut self, result: &QuantizeResult, threshold: u64, rng: &mut Rng) -> usize {
        let d = self.dim();
        let mut reseeded = 0;
        for layer in 0..self.n_q() {
            let targets = &result.layer_inputs[layer];
            let rows = targets.numel() / d;
            let k = self.codebooks[layer].shape()[0];
            let start = usize::from(self.pinned_zero);
            let dead: Vec<usize> = (start..k).filter(|&e| self.idle[layer][e] >= threshold).collect();
            if dead.is_empty() {
                continue;
            }
            let mut order: Vec<usize> = (0..rows).collect();
            order.shuffle(rng);
            for (i, &e) in dead.iter().enumerate() {
                let src = if i < rows { order[i] } else { rng.gen_range(0..rows) };
                self.codebooks[layer].data_mut()[e * d..(e + 1) * d]
                    .copy_from_slice(targets.row(src));
                self.counts[layer][e] = 1.0;
                self.idle[layer][e] = 0;
                reseeded += 1;
            }
        }
        reseeded
    }
}

/// Quantizes `z_e: [N, d]` through every RVQ layer.
pub fn rvq_quantize(z_e: &Tensor, state: &RvqState) -> Result<QuantizeResult> {
    if z_e.rank() != 2 || z_e.shape()[1] != state.dim() {
        return Err(Error::dim("rvq_quantize", z_e.shape(), &[0, state.dim()]));
    }
    let (n, d) = (z_e.shape()[0], z_e.shape()[1]);
    let mut residual = z_e.clone();
    let mut codes = Vec::with_capacity(state.n_q());
    let mut layers = Vec::with_capacity(state.n_q());
    let mut layer_inputs = Vec::with_capacity(state.n_q());
    for layer in 0..state.n_q() {
        let book = &state.codebooks[layer];
        let mut chosen = Vec::with_capacity(n);
        let mut q = vec![0.0; n * d];
        for (t, row) in residual.rows().enumerate() {
            let c = state.nearest(layer, row);
            chosen.push(c);
            q[t * d..(t + 1) * d].copy_from_slice(book.row(c));
        }
        let q = Tensor::from_parts(vec![n, d], q);
        let next = residual.zip_map(&q, |r, e| r - e)?;
        layer_inputs.push(std::mem::replace(&mut residual, next));
        layers.push(q);
        codes.push(chosen);
    }
    let mut z_hat = layers[0].clone();
    for q in &layers[1..] {
        for (a, b) in z_hat.data_mut().iter_mut().zip(q.data()) {
            *a += b;
        }
    }
    let residual = z_e.zip_map(&z_hat, |z, q| z - q)?;
    Ok(QuantizeResult {
        codes,
        z_hat,
        layers,
        layer_inputs,
        residual,
    })
}

/// Sum of the selected entries for per-layer `codes`.
pub fn rvq_decode(codes: &[Vec<usize>], state: &RvqState) -> Result<Tensor> {
    if codes.len() != state.n_q() {
        return Err(Error::contract(format!("expected {} code layers, got {}", state.n_q(), codes.len())));
    }
    let d = state.dim();
    let n = codes[0].len();
    let mut out = vec![0.0; n * d];
    for (layer, cs) in codes.iter().enumerate() {
        let size = state.codebooks[layer].shape()[0];
        for (t, &c) in cs.iter().enumerate() {
            if c >= size {
                return Err(Error::Index { level: layer, value: c, size });
            }
            for (o, e) in out[t * d..(t + 1) * d].iter_mut().zip(state.codebooks[layer].row(c)) {
                *o += e;
            }
        }
    }
    Tensor::new(vec![n, d], out)
}

/// Mean squared error between `z_e` and a stop-gradient copy of `z_hat`.
pub fn commit_loss(tape: &mut Tape, z_e: Var, z_hat: &Tensor) -> Result<Var> {
    if tape.shape(z_e) != z_hat.shape() {
        return Err(Error::dim("commit_loss", tape.shape(z_e), z_hat.shape()));
    }
    let target = tape.constant(z_hat.clone());
    let diff = tape.sub(z_e, target)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}

// ---------------------------------------------------------------------------
// FSQ

impl FsqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::config("fsq levels must be non-empty"));
        }
        if let Some(l) = self.levels.iter().find(|&&l| l < 2) {
            return Err(Error::config(format!("fsq level count {l} < 2")));
        }
        Ok(())
    }

    /// Size of the implicit codebook.
    pub fn code_space(&self) -> usize {
        self.levels.iter().product()
    }

    fn half(l: usize) -> f64 {
        (l as f64 - 1.0) / 2.0
    }

    /// Offset applied before rounding: 0 for odd level counts, 1/2 for even
    /// ones so that all `L` grid points are reachable.
    fn offset(l: usize) -> f64 {
        if l.is_multiple_of(2) {
            0.5
        } else {
            0.0
        }
    }

    /// Quantized value of one dimension (without gradient bookkeeping).
    fn quantize_scalar(z: f64, l: usize) -> (usize, f64) {
        let h = Self::half(l);
        let off = Self::offset(l);
        let r = (h * z.tanh() - off).round();
        let code = (r + (h + off)).round() as usize;
        (code, (r + off) * (1.0 / h))
    }

    /// Value of integer level `code` in dimension with `l` levels.
    fn level_value(code: usize, l: usize) -> f64 {
        let h = Self::half(l);
        (code as f64 - h) * (1.0 / h)
    }

    /// Mixed-radix composite code, first dimension most significant.
    pub fn compose(&self, digits: &[usize]) -> usize {
        digits
            .iter()
            .zip(&self.levels)
            .fold(0, |acc, (&d, &l)| acc * l + d)
    }

    pub fn decompose(&self, mut code: usize) -> Vec<usize> {
        let mut digits = vec![0; self.levels.len()];
        for (slot, &l) in digits.iter_mut().zip(&self.levels).rev() {
            *slot = code % l;
            code /= l;
        }
        digits
    }

    /// Latent vector for a composite code.
    pub fn decode(&self, code: usize) -> Result<Vec<f64>> {
        let size = self.code_space();
        if code >= size {
            return Err(Error::Index { level: 0, value: code, size });
        }
        Ok(self
            .decompose(code)
            .into_iter()
            .zip(&self.levels)
            .map(|(c, &l)| Self::level_value(c, l))
            .collect())
    }
}

/// Finite scalar quantization of `z: [N, d]`: per dimension
/// `ẑ = round(h·tanh(z)) / h` with `h = (L-1)/2` (even `L` use a half-step
/// offset). Returns composite codes and `ẑ`.
pub fn fsq_quantize(z: &Tensor, cfg: &FsqConfig) -> Result<(Vec<usize>, Tensor)> {
    cfg.validate()?;
    let d = cfg.levels.len();
    if z.rank() != 2 || z.shape()[1] != d {
        return Err(Error::dim("fsq_quantize", z.shape(), &[0, d]));
    }
    let mut codes = Vec::with_capacity(z.shape()[0]);
    let mut out = Vec::with_capacity(z.numel());
    let mut digits = vec![0; d];
    for row in z.rows() {
        for ((slot, &x), &l) in digits.iter_mut().zip(row).zip(&cfg.levels) {
            let (c, v) = FsqConfig::quantize_scalar(x, l);
            *slot = c;
            out.push(v);
        }
        codes.push(cfg.compose(&digits));
    }
    Ok((codes, Tensor::from_parts(z.shape().to_vec(), out)))
}

/// Differentiable FSQ on the tape for `z: [..., d]`; rounding is
/// straight-through.
pub fn fsq_var(tape: &mut Tape, z: Var, cfg: &FsqConfig) -> Result<Var> {
    cfg.validate()?;
    let d = cfg.levels.len();
    if tape.shape(z).last() != Some(&d) {
        return Err(Error::dim("fsq", tape.shape(z), &[d]));
    }
    let half = Tensor::vector(&cfg.levels.iter().map(|&l| FsqConfig::half(l)).collect::<Vec<_>>());
    let offset = Tensor::vector(&cfg.levels.iter().map(|&l| FsqConfig::offset(l)).collect::<Vec<_>>());
    let inv_half = half.map(|h| 1.0 / h);
    let (half, offset, inv_half) = (tape.constant(half), tape.constant(offset), tape.constant(inv_half));
    let t = tape.tanh(z);
    let scaled = tape.mul(t, half)?;
    let shifted = tape.sub(scaled, offset)?;
    let rounded = tape.round_ste(shifted);
    let back = tape.add(rounded, offset)?;
    tape.mul(back, inv_half)
}

// ---------------------------------------------------------------------------

/// Quantizer state carried by a codec.
#[derive(Clone, Debug, PartialEq)]
pub enum Quantizer {
    Rvq(RvqState),
    Fsq(FsqConfig),
}

impl Quantizer {
    pub fn init(cfg: &QuantizerConfig, dim: usize, rng: &mut Rng) -> Result<Self> {
        match cfg {
            QuantizerConfig::Rvq(c) => Ok(Quantizer::Rvq(RvqState::init(c, dim, rng)?)),
            QuantizerConfig::Fsq(c) => {
                c.validate()?;
                if c.levels.len() != dim {
                    return Err(Error::config(format!(
                        "fsq has {} levels but latent_dim is {dim}",
                        c.levels.len()
                    )));
                }
                Ok(Quantizer::Fsq(c.clone()))
            }
        }
    }

    /// Number of code streams per frame.
    pub fn n_levels(&self) -> usize {
        match self {
            Quantizer::Rvq(s) => s.n_q(),
            Quantizer::Fsq(_) => 1,
        }
    }

    /// Code count of each stream.
    pub fn level_sizes(&self) -> Vec<usize> {
        match self {
            Quantizer::Rvq(s) => s.codebook_sizes(),
            Quantizer::Fsq(c) => vec![c.code_space()],
        }
    }

    /// Quantizes values (no tape). FSQ yields a single layer.
    pub fn quantize(&self, z_e: &Tensor) -> Result<QuantizeResult> {
        match self {
            Quantizer::Rvq(s) => rvq_quantize(z_e, s),
            Quantizer::Fsq(c) => {
                let (codes, z_hat) = fsq_quantize(z_e, c)?;
                let residual = z_e.zip_map(&z_hat, |a, b| a - b)?;
                Ok(QuantizeResult {
                    codes: vec![codes],
                    layers: vec![z_hat.clone()],
                    layer_inputs: vec![z_e.clone()],
                    z_hat,
                    residual,
                })
            }
        }
    }

    /// Latent rows for per-stream codes.
    pub fn decode_codes(&self, codes: &[Vec<usize>]) -> Result<Tensor> {
        match self {
            Quantizer::Rvq(s) => rvq_decode(codes, s),
            Quantizer::Fsq(c) => {
                let stream = codes
                    .first()
                    .ok_or_else(|| Error::contract("fsq decode needs one code stream"))?;
                let mut out = Vec::with_capacity(stream.len() * c.levels.len());
                for &code in stream {
                    out.extend(c.decode(code)?);
                }
                Tensor::new(vec![stream.len(), c.levels.len()], out)
            }
        }
    }
}
