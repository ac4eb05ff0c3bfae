//! Convolutional encoder/decoder pair.
//!
//! Encoder: `conv(k) → tanh → [strided conv(2s, s) → tanh]* → conv1x1 → tanh →
//! conv(k)`. Channel width doubles at each downsampling stage. The decoder
//! mirrors it with transposed convolutions. Each strided stage uses a kernel of
//! `2s` and padding `s` split as `(s/2, s - s/2)`, so lengths divide exactly.

use serde::{Deserialize, Serialize};

use crate::ad::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, Component, ParamStore};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    /// Downsampling factor per encoder stage.
    pub strides: Vec<usize>,
    /// Channel width of the first stage.
    pub channels: usize,
    /// Latent dimension `d`.
    pub latent_dim: usize,
    /// Kernel width of the input/output convolutions (odd).
    pub kernel_size: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            strides: vec![4, 2],
            channels: 32,
            latent_dim: 64,
            kernel_size: 7,
        }
    }
}

impl CodecConfig {
    /// Compression factor: product of strides.
    pub fn hop(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.strides.is_empty() || self.strides.contains(&0) {
            return Err(Error::config("codec.strides must be non-empty positive integers"));
        }
        if self.channels == 0 || self.latent_dim == 0 {
            return Err(Error::config("codec.channels and codec.latent_dim must be positive"));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::config("codec.kernel_size must be odd"));
        }
        Ok(())
    }

    /// Channel width after stage `i` (stage 0 is the input convolution).
    fn width(&self, stage: usize) -> usize {
        self.channels << stage
    }

    /// Latent length for an input of `len` samples.
    pub fn latent_len(&self, len: usize) -> Result<usize> {
        let hop = self.hop();
        if len == 0 || !len.is_multiple_of(hop) {
            return Err(Error::PaddingRequired { len, hop });
        }
        Ok(len / hop)
    }

    /// Reconstructs the architecture from stored parameter shapes.
    pub fn infer(params: &ParamStore) -> Result<Self> {
        let w_in = params.require("enc.in.weight")?;
        let (channels, kernel_size) = (w_in.shape()[0], w_in.shape()[2]);
        let mut strides = Vec::new();
        while let Some(w) = params.get(&format!("enc.down.{}.weight", strides.len())) {
            strides.push(w.shape()[2] / 2);
        }
        let latent_dim = params.require("enc.out.weight")?.shape()[0];
        let cfg = Self {
            strides,
            channels,
            latent_dim,
            kernel_size,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Adds freshly initialised encoder and decoder parameters to `store`.
    pub fn init_params(&self, rng: &mut Rng, store: &mut ParamStore) {
        let k = self.kernel_size;
        let n = self.strides.len();
        let enc = Component::EncoderConv;
        let dec = Component::DecoderConv;
        let c0 = self.width(0);
        store.insert_layer(rng, "enc.in", enc, vec![c0, 1, k], k, c0);
        for (i, &s) in self.strides.iter().enumerate() {
            let (cin, cout) = (self.width(i), self.width(i + 1));
            store.insert_layer(rng, &format!("enc.down.{i}"), enc, vec![cout, cin, 2 * s], cin * 2 * s, cout);
        }
        let top = self.width(n);
        store.insert_layer(rng, "enc.mix", enc, vec![top, top, 1], top, top);
        store.insert_layer(rng, "enc.out", enc, vec![self.latent_dim, top, k], top * k, self.latent_dim);

        store.insert_layer(rng, "dec.in", dec, vec![top, self.latent_dim, k], self.latent_dim * k, top);
        store.insert_layer(rng, "dec.mix", dec, vec![top, top, 1], top, top);
        for (j, &s) in self.strides.iter().rev().enumerate() {
            let stage = n - j;
            let (cin, cout) = (self.width(stage), self.width(stage - 1));
            store.insert_layer(rng, &format!("dec.up.{j}"), dec, vec![cin, cout, 2 * s], cin * 2, cout);
        }
        store.insert_layer(rng, "dec.out", dec, vec![1, c0, k], c0 * k, 1);
    }

    fn conv_same(&self, tape: &mut Tape, p: &Bound, name: &str, x: Var) -> Result<Var> {
        let w = p.var(&format!("{name}.weight"))?;
        let b = p.var(&format!("{name}.bias"))?;
        let k = tape.shape(w)[2];
        tape.conv1d(x, w, Some(b), 1, (k - 1) / 2, (k - 1) / 2)
    }

    /// Encodes `x: [B, T]` into `z_e: [B, T', d]`.
    pub fn encode_var(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(Error::dim("encode", &shape, &[0, 0]));
        }
        self.latent_len(shape[1])?;
        let x = tape.reshape(x, &[shape[0], 1, shape[1]])?;
        let h = self.conv_same(tape, p, "enc.in", x)?;
        let mut h = tape.tanh(h);
        for (i, &s) in self.strides.iter().enumerate() {
            let w = p.var(&format!("enc.down.{i}.weight"))?;
            let b = p.var(&format!("enc.down.{i}.bias"))?;
            let y = tape.conv1d(h, w, Some(b), s, s / 2, s - s / 2)?;
            h = tape.tanh(y);
        }
        let y = self.conv_same(tape, p, "enc.mix", h)?;
        let h = tape.tanh(y);
        let z = self.conv_same(tape, p, "enc.out", h)?;
        tape.transpose(z)
    }

    /// Decodes `z: [B, T', d]` into `x_hat: [B, T' * hop]`.
    pub fn decode_var(&self, tape: &mut Tape, p: &Bound, z: Var) -> Result<Var> {
        let shape = tape.shape(z).to_vec();
        if shape.len() != 3 || shape[2] != self.latent_dim {
            return Err(Error::dim("decode", &shape, &[0, 0, self.latent_dim]));
        }
        if !tape.value(z).all_finite() {
            return Err(Error::Numeric("decode: non-finite latent".into()));
        }
        let z = tape.transpose(z)?;
        let y = self.conv_same(tape, p, "dec.in", z)?;
        let h = tape.tanh(y);
        let y = self.conv_same(tape, p, "dec.mix", h)?;
        let mut h = tape.tanh(y);
        for (j, &s) in self.strides.iter().rev().enumerate() {
            let w = p.var(&format!("dec.up.{j}.weight"))?;
            let b = p.var(&format!("dec.up.{j}.bias"))?;
            let len = tape.shape(h)[2] * s;
            let y = tape.conv1d_transpose(h, w, Some(b), s, s / 2, len)?;
            h = tape.tanh(y);
        }
        let y = self.conv_same(tape, p, "dec.out", h)?;
        let (b, len) = (tape.shape(y)[0], tape.shape(y)[2]);
        tape.reshape(y, &[b, len])
    }

    /// Non-differentiable encode of a single clip: `T` samples → `[T', d]`.
    pub fn encode(&self, params: &ParamStore, audio: &[f64]) -> Result<Tensor> {
        self.latent_len(audio.len())?;
        let mut tape = Tape::new();
        let p = bind_frozen(params, &mut tape);
        let x = tape.constant(Tensor::new(vec![1, audio.len()], audio.to_vec())?);
        let z = self.encode_var(&mut tape, &p, x)?;
        let (t, d) = (tape.shape(z)[1], tape.shape(z)[2]);
        tape.value(z).clone().reshape(vec![t, d])
    }

    /// Non-differentiable decode of a single clip: `[T', d]` → `T' * hop` samples.
    pub fn decode(&self, params: &ParamStore, z: &Tensor) -> Result<Vec<f64>> {
        if z.rank() != 2 {
            return Err(Error::dim("decode", z.shape(), &[0, self.latent_dim]));
        }
        let mut tape = Tape::new();
        let p = bind_frozen(params, &mut tape);
        let zv = tape.constant(z.clone().reshape(vec![1, z.shape()[0], z.shape()[1]])?);
        let x = self.decode_var(&mut tape, &p, zv)?;
        Ok(tape.value(x).data().to_vec())
    }
}

/// Binds every parameter as a constant (no gradient bookkeeping).
pub(crate) fn bind_frozen(params: &ParamStore, tape: &mut Tape) -> Bound {
    let mut frozen = params.clone();
    frozen.iter_mut().for_each(|p| p.trainable = false);
    frozen.bind(tape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    fn small() -> (CodecConfig, ParamStore) {
        let cfg = CodecConfig {
            strides: vec![4, 2],
            channels: 4,
            latent_dim: 6,
            kernel_size: 5,
        };
        let mut store = ParamStore::new();
        cfg.init_params(&mut rng_for(3, "init"), &mut store);
        (cfg, store)
    }

    #[test]
    fn shape_laws() {
        let (cfg, store) = small();
        let x: Vec<f64> = (0..64).map(|i| (i as f64 * 0.3).sin()).collect();
        let z = cfg.encode(&store, &x).unwrap();
        assert_eq!(z.shape(), &[8, 6]);
        let y = cfg.decode(&store, &z).unwrap();
        assert_eq!(y.len(), 64);
    }

    #[test]
    fn four_stage_320x_compression() {
        let cfg = CodecConfig {
            strides: vec![8, 5, 4, 2],
            channels: 2,
            latent_dim: 4,
            kernel_size: 3,
        };
        assert_eq!(cfg.hop(), 320);
        let mut store = ParamStore::new();
        cfg.init_params(&mut rng_for(0, "init"), &mut store);
        let z = cfg.encode(&store, &vec![0.1; 3200]).unwrap();
        assert_eq!(z.shape()[0], 10);
    }

    #[test]
    fn indivisible_length_requires_padding() {
        let (cfg, store) = small();
        let err = cfg.encode(&store, &[0.0; 63]).unwrap_err();
        assert!(matches!(err, Error::PaddingRequired { len: 63, hop: 8 }));
    }

    #[test]
    fn zero_final_layer_gives_zero_latent() {
        let (cfg, mut store) = small();
        let w = store.get("enc.out.weight").unwrap().shape().to_vec();
        store.set("enc.out.weight", Tensor::zeros(w)).unwrap();
        let x: Vec<f64> = (0..64).map(|i| i as f64).collect();
        let z = cfg.encode(&store, &x).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_latent_and_biases_decode_to_silence() {
        let (cfg, store) = small();
        let y = cfg.decode(&store, &Tensor::zeros(vec![8, 6])).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_latent_is_rejected() {
        let (cfg, store) = small();
        let mut z = Tensor::zeros(vec![8, 6]);
        z.data_mut()[3] = f64::NAN;
        assert!(matches!(cfg.decode(&store, &z), Err(Error::Numeric(_))));
    }

    #[test]
    fn infer_recovers_config() {
        let (cfg, store) = small();
        assert_eq!(CodecConfig::infer(&store).unwrap(), cfg);
    }
}
