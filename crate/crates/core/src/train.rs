//! Composite objective, AdamW and the training loop.

use std::io::{BufRead, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::ad::{Tape, Tensor, Var};
use crate::checkpoint::{Checkpoint, Precision};
use crate::codec::{bind_frozen, CodecConfig};
use crate::error::{Error, Result};
use crate::fusion::{self, FusionConfig, Heads};
use crate::gradscope::{self, GradTrace};
use crate::params::{Component, ParamStore};
use crate::quantize::{self, FsqConfig, Quantizer, QuantizerConfig, RvqState};
use crate::rng::{derive_indexed, rng_for, rng_indexed};
use crate::spectral::{self, SpectralConfig};
use crate::synthav::{self, AVPair, SynthParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda_recon: f64,
    pub lambda_mel: f64,
    pub lambda_commit: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub precision: Precision,
    /// Gradient norms are captured at step 1 and every `grad_every` steps.
    pub grad_every: u64,
    /// Record wall-clock time per step; when false the `ms` field is 0 so logs
    /// are byte-identical across runs.
    pub log_wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_recon: 500.0,
            lambda_mel: 1.0,
            lambda_commit: 10.0,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.0,
            batch_size: 8,
            steps: 2000,
            seed: 0,
            precision: Precision::F32,
            grad_every: 50,
            log_wall_clock: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("train.learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("train.beta1 and train.beta2 must lie in [0, 1)"));
        }
        for (name, v) in [
            ("lambda_recon", self.lambda_recon),
            ("lambda_mel", self.lambda_mel),
            ("lambda_commit", self.lambda_commit),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0) {
                return Err(Error::config(format!("train.{name} must be nonnegative")));
            }
        }
        if self.batch_size == 0 || self.grad_every == 0 {
            return Err(Error::config("train.batch_size and train.grad_every must be positive"));
        }
        Ok(())
    }
}

/// Every section of a run configuration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub codec: CodecConfig,
    pub quantizer: QuantizerConfig,
    pub fusion: FusionConfig,
    pub spectral: SpectralConfig,
    pub train: TrainConfig,
    pub data: SynthParams,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        self.fusion.validate()?;
        self.spectral.validate()?;
        self.train.validate()?;
        self.codec.latent_len(self.data.t)?;
        if let Some(n) = self.spectral.fft_sizes.iter().find(|&&n| n > self.data.t) {
            return Err(Error::config(format!("spectral fft size {n} exceeds clip length {}", self.data.t)));
        }
        if let QuantizerConfig::Fsq(f) = &self.quantizer {
            f.validate()?;
            if f.levels.len() != self.codec.latent_dim {
                return Err(Error::config(format!(
                    "quantizer has {} fsq levels but codec.latent_dim is {}",
                    f.levels.len(),
                    self.codec.latent_dim
                )));
            }
        }
        Ok(())
    }

    /// A preset that trains in about twenty seconds on one core: 1024-sample
    /// clips, 16x compression to a 16-d latent, four 64-entry codebooks and
    /// 400 f64 steps.
    pub fn desk() -> Self {
        Self {
            codec: CodecConfig {
                strides: vec![4, 4],
                channels: 8,
                latent_dim: 16,
                kernel_size: 7,
            },
            quantizer: QuantizerConfig::Rvq(quantize::RvqConfig {
                n_q: 4,
                codebook_size: 64,
                ..Default::default()
            }),
            fusion: FusionConfig::default(),
            spectral: SpectralConfig {
                fft_sizes: vec![256, 128, 64, 32],
                mel_bins: vec![32, 16, 8, 4],
                ..SpectralConfig::default()
            },
            train: TrainConfig {
                learning_rate: 1e-3,
                steps: 400,
                precision: Precision::F64,
                grad_every: 10,
                ..TrainConfig::default()
            },
            data: SynthParams {
                t: 1024,
                t_v: 16,
                d_v: 16,
                ..SynthParams::default()
            },
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

// ---------------------------------------------------------------------------
// Objective

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub recon: f64,
    pub mel: f64,
    pub commit: f64,
    pub fusion: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub recon: f64,
    pub mel: f64,
    pub commit: f64,
    pub fusion: f64,
}

impl LossWeights {
    pub fn from_config(train: &TrainConfig, fusion: &FusionConfig) -> Self {
        Self {
            recon: train.lambda_recon,
            mel: train.lambda_mel,
            commit: train.lambda_commit,
            fusion: if fusion.active() { fusion.lambda_fusion } else { 0.0 },
        }
    }
}

impl LossTerms {
    fn named(&self) -> [(&'static str, f64); 4] {
        [
            ("l_recon", self.recon),
            ("l_mel", self.mel),
            ("l_commit", self.commit),
            ("l_fusion", self.fusion),
        ]
    }

    fn check(&self, step: u64) -> Result<()> {
        match self.named().into_iter().find(|(_, v)| !v.is_finite()) {
            Some((term, _)) => Err(Error::NonFiniteLoss { term, step }),
            None => Ok(()),
        }
    }
}

/// `λ_recon L_recon + λ_mel L_mel + λ_commit L_commit + λ_fusion L_fusion`.
pub fn total_loss(terms: &LossTerms, w: &LossWeights) -> Result<f64> {
    terms.check(0)?;
    Ok(w.recon * terms.recon + w.mel * terms.mel + w.commit * terms.commit + w.fusion * terms.fusion)
}

// ---------------------------------------------------------------------------
// Optimizer

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&TrainConfig> for AdamW {
    fn from(c: &TrainConfig) -> Self {
        Self {
            lr: c.learning_rate,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
            weight_decay: c.weight_decay,
        }
    }
}

/// One AdamW update at step `t >= 1`. Weight decay scales the parameter by
/// `1 - lr·wd` before the moment update.
pub fn adamw_step(param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], opt: &AdamW, t: u64) {
    assert!(t >= 1, "adam step counter starts at 1");
    let bc1 = 1.0 - opt.beta1.powi(t as i32);
    let bc2 = 1.0 - opt.beta2.powi(t as i32);
    let decay = 1.0 - opt.lr * opt.weight_decay;
    for i in 0..param.len() {
        param[i] *= decay;
        m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * grad[i];
        v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * grad[i] * grad[i];
        let mh = m[i] / bc1;
        let vh = v[i] / bc2;
        param[i] -= opt.lr * mh / (vh.sqrt() + opt.eps);
    }
}

// ---------------------------------------------------------------------------
// Model

/// Component and trainability implied by a parameter name.
pub fn classify(name: &str) -> (Component, bool) {
    if name.starts_with("enc.") {
        (Component::EncoderConv, true)
    } else if name.starts_with("dec.") {
        (Component::DecoderConv, true)
    } else if name.starts_with("fusion.vision.") {
        (Component::FusionHead, false)
    } else {
        (Component::FusionHead, true)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub codec: CodecConfig,
    pub params: ParamStore,
    pub quantizer: Quantizer,
}

impl Model {
    pub fn init(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.train.seed;
        let mut params = ParamStore::new();
        cfg.codec.init_params(&mut rng_for(seed, "init.codec"), &mut params);
        Heads::init_params(&cfg.fusion, cfg.codec.latent_dim, cfg.data.d_v, &mut rng_for(seed, "init.fusion"), &mut params);
        let quantizer = Quantizer::init(&cfg.quantizer, cfg.codec.latent_dim, &mut rng_for(seed, "init.quantizer"))?;
        let mut model = Self {
            codec: cfg.codec.clone(),
            params,
            quantizer,
        };
        model.round_to(cfg.train.precision);
        Ok(model)
    }

    fn round_to(&mut self, precision: Precision) {
        if precision == Precision::F64 {
            return;
        }
        for p in self.params.iter_mut() {
            p.value = precision.apply(&p.value);
        }
        if let Quantizer::Rvq(s) = &mut self.quantizer {
            for b in &mut s.codebooks {
                *b = precision.apply(b);
            }
            for c in s.counts.iter_mut().flatten() {
                *c = *c as f32 as f64;
            }
        }
    }

    /// Pads `audio` with zeros to a multiple of the hop; returns the padding.
    pub fn pad(&self, audio: &[f64]) -> (Vec<f64>, usize) {
        let hop = self.codec.hop();
        let pad = (hop - audio.len() % hop) % hop;
        let mut x = audio.to_vec();
        x.resize(audio.len() + pad, 0.0);
        (x, pad)
    }

    /// Continuous latents `[T', d]` of one clip.
    pub fn encode(&self, audio: &[f64]) -> Result<Tensor> {
        self.codec.encode(&self.params, audio)
    }

    pub fn quantize(&self, audio: &[f64]) -> Result<quantize::QuantizeResult> {
        self.quantizer.quantize(&self.encode(audio)?)
    }

    /// Code streams `n_levels × T'` of one clip.
    pub fn codes(&self, audio: &[f64]) -> Result<Vec<Vec<usize>>> {
        Ok(self.quantize(audio)?.codes)
    }

    /// Encode, quantize and decode one clip (length must divide by the hop).
    pub fn reconstruct(&self, audio: &[f64]) -> Result<Vec<f64>> {
        let q = self.quantize(audio)?;
        self.codec.decode(&self.params, &q.z_hat)
    }

    /// Continuous latents for a batch `[B, T]`, without gradients.
    pub fn encode_batch(&self, audio: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = bind_frozen(&self.params, &mut tape);
        let x = tape.constant(audio.clone());
        let z = self.codec.encode_var(&mut tape, &p, x)?;
        Ok(tape.value(z).clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    /// First and second moments, one per trainable parameter in store order.
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Completed optimizer steps.
    pub step: u64,
}

impl TrainState {
    pub fn new(model: Model) -> Self {
        let zeros: Vec<Tensor> = model
            .params
            .trainable()
            .map(|p| Tensor::zeros(p.value.shape().to_vec()))
            .collect();
        Self {
            model,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        for p in self.model.params.iter() {
            ck.push(p.name.clone(), p.value.clone());
        }
        match &self.model.quantizer {
            Quantizer::Rvq(s) => {
                for (i, b) in s.codebooks.iter().enumerate() {
                    ck.push(format!("quant.rvq.codebook.{i}"), b.clone());
                    ck.push(format!("quant.rvq.counts.{i}"), Tensor::vector(&s.counts[i]));
                    let idle: Vec<f64> = s.idle[i].iter().map(|&n| n as f64).collect();
                    ck.push(format!("quant.rvq.idle.{i}"), Tensor::vector(&idle));
                }
                ck.push("quant.rvq.pinned_zero", Tensor::scalar(f64::from(u8::from(s.pinned_zero))));
            }
            Quantizer::Fsq(c) => {
                let levels: Vec<f64> = c.levels.iter().map(|&l| l as f64).collect();
                ck.push("quant.fsq.levels", Tensor::vector(&levels));
            }
        }
        for ((p, m), v) in self.model.params.trainable().zip(&self.m).zip(&self.v) {
            ck.push(format!("opt.m.{}", p.name), m.clone());
            ck.push(format!("opt.v.{}", p.name), v.clone());
        }
        ck.push("state.step", Tensor::scalar(self.step as f64));
        ck
    }

    /// Rebuilds the state; the architecture is read from tensor shapes.
    /// Optimizer moments default to zero when absent.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut params = ParamStore::new();
        for (name, t) in &ck.tensors {
            if name.starts_with("enc.") || name.starts_with("dec.") || name.starts_with("fusion.") {
                let (component, trainable) = classify(name);
                params.insert(name, component, t.clone(), trainable);
            }
        }
        let codec = CodecConfig::infer(&params)?;
        let quantizer = if let Some(levels) = ck.get("quant.fsq.levels") {
            let levels = levels.data().iter().map(|&l| l as usize).collect();
            Quantizer::Fsq(FsqConfig { levels })
        } else {
            let mut books = Vec::new();
            while let Some(b) = ck.get(&format!("quant.rvq.codebook.{}", books.len())) {
                books.push(b.clone());
            }
            let mut s = RvqState::from_codebooks(books)?;
            for i in 0..s.n_q() {
                if let Some(c) = ck.get(&format!("quant.rvq.counts.{i}")) {
                    s.counts[i] = c.data().to_vec();
                }
                if let Some(c) = ck.get(&format!("quant.rvq.idle.{i}")) {
                    s.idle[i] = c.data().iter().map(|&n| n as u64).collect();
                }
            }
            s.pinned_zero = ck.get("quant.rvq.pinned_zero").is_some_and(|t| t.item() != 0.0);
            Quantizer::Rvq(s)
        };
        let model = Model {
            codec,
            params,
            quantizer,
        };
        let mut state = TrainState::new(model);
        let names: Vec<String> = state.model.params.trainable().map(|p| p.name.clone()).collect();
        for (i, name) in names.iter().enumerate() {
            if let (Some(m), Some(v)) = (ck.get(&format!("opt.m.{name}")), ck.get(&format!("opt.v.{name}"))) {
                state.m[i] = m.clone();
                state.v[i] = v.clone();
            }
        }
        state.step = ck.get("state.step").map_or(0, |t| t.item() as u64);
        Ok(state)
    }
}

// ---------------------------------------------------------------------------
// Data

/// Supplies the training batch for each step.
pub trait DataSource {
    fn batch(&self, step: u64, batch_size: usize) -> Result<Vec<AVPair>>;
}

/// Fresh synthetic pairs; clip `i` of step `s` has its own derived seed.
pub struct SyntheticData {
    pub seed: u64,
    pub params: SynthParams,
}

impl DataSource for SyntheticData {
    fn batch(&self, step: u64, batch_size: usize) -> Result<Vec<AVPair>> {
        (0..batch_size)
            .map(|i| {
                let s = derive_indexed(self.seed, "data.train", step * batch_size as u64 + i as u64);
                synthav::generate(s, &self.params)
            })
            .collect()
    }
}

/// A fixed list of pairs, cycled in order.
pub struct InMemoryData(pub Vec<AVPair>);

impl DataSource for InMemoryData {
    fn batch(&self, step: u64, batch_size: usize) -> Result<Vec<AVPair>> {
        if self.0.is_empty() {
            return Err(Error::contract("empty dataset"));
        }
        let start = (step as usize).wrapping_mul(batch_size);
        Ok((0..batch_size).map(|i| self.0[(start + i) % self.0.len()].clone()).collect())
    }
}

// ---------------------------------------------------------------------------
// Loop

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub l_recon: f64,
    pub l_mel: f64,
    pub l_commit: f64,
    pub l_fusion: f64,
    pub l_total: f64,
    pub ms: u64,
}

impl StepRecord {
    pub fn terms(&self) -> LossTerms {
        LossTerms {
            recon: self.l_recon,
            mel: self.l_mel,
            commit: self.l_commit,
            fusion: self.l_fusion,
        }
    }
}

fn stack(rows: &[&[f64]], shape: Vec<usize>) -> Result<Tensor> {
    Tensor::new(shape, rows.iter().flat_map(|r| r.iter().copied()).collect())
}

fn weighted(tape: &mut Tape, acc: Option<Var>, term: Var, w: f64) -> Result<Option<Var>> {
    let t = tape.scale(term, w);
    Ok(Some(match acc {
        None => t,
        Some(a) => tape.add(a, t)?,
    }))
}

/// Runs one optimisation step on `batch` and returns its record. On a
/// non-finite loss the state is left untouched.
pub fn train_step(state: &mut TrainState, cfg: &RunConfig, batch: &[AVPair], trace: Option<&mut GradTrace>) -> Result<StepRecord> {
    let started = Instant::now();
    let step = state.step + 1;
    let model = &state.model;
    let b = batch.len();
    if b == 0 {
        return Err(Error::contract("empty batch"));
    }
    let t = batch[0].audio.len();
    let tv = batch[0].video.shape()[0];
    if batch.iter().any(|p| p.audio.len() != t || p.video.shape() != batch[0].video.shape()) {
        return Err(Error::contract("batch clips must share audio and video shapes"));
    }
    let t_lat = model.codec.latent_len(t)?;
    let d = model.codec.latent_dim;

    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let audio: Vec<&[f64]> = batch.iter().map(|p| p.audio.as_slice()).collect();
    let x = tape.constant(stack(&audio, vec![b, t])?);
    let z_e = model.codec.encode_var(&mut tape, &bound, x)?;

    let flat = tape.value(z_e).clone().reshape(vec![b * t_lat, d])?;
    let q = model.quantizer.quantize(&flat)?;
    let z_hat = q.z_hat.clone().reshape(vec![b, t_lat, d])?;
    let z_q = match &model.quantizer {
        Quantizer::Rvq(_) => tape.straight_through(z_e, z_hat.clone())?,
        Quantizer::Fsq(c) => quantize::fsq_var(&mut tape, z_e, c)?,
    };
    let x_hat = model.codec.decode_var(&mut tape, &bound, z_q)?;

    let diff = tape.sub(x, x_hat)?;
    let diff = tape.abs(diff);
    let l_recon = tape.mean(diff);
    let l_mel = spectral::multiscale_spectral_loss(&mut tape, x, x_hat, &cfg.spectral)?;
    let l_commit = quantize::commit_loss(&mut tape, z_e, &z_hat)?;

    let first = q.first_layer().clone().reshape(vec![b, t_lat, d])?;
    let l_fusion = match fusion::fusion_features(&mut tape, &cfg.fusion, z_e, &first)? {
        None => None,
        Some(feats) => {
            let fa = Heads::project_audio(&mut tape, &bound, feats)?;
            let video: Vec<&[f64]> = batch.iter().map(|p| p.video.data()).collect();
            let dv = batch[0].video.shape()[1];
            let v = tape.constant(stack(&video, vec![b, tv, dv])?);
            let fv = Heads::project_vision(&mut tape, &bound, v)?;
            let visual: Vec<Tensor> = batch.iter().map(|p| p.video.clone()).collect();
            fusion::fusion_loss(&mut tape, &cfg.fusion, fa, fv, &visual)?
        }
    };

    let terms = LossTerms {
        recon: tape.value(l_recon).item(),
        mel: tape.value(l_mel).item(),
        commit: tape.value(l_commit).item(),
        fusion: l_fusion.map_or(0.0, |v| tape.value(v).item()),
    };
    terms.check(step)?;
    let w = LossWeights::from_config(&cfg.train, &cfg.fusion);
    let mut total = None;
    total = weighted(&mut tape, total, l_recon, w.recon)?;
    total = weighted(&mut tape, total, l_mel, w.mel)?;
    total = weighted(&mut tape, total, l_commit, w.commit)?;
    if let Some(lf) = l_fusion {
        total = weighted(&mut tape, total, lf, w.fusion)?;
    }
    let total = total.expect("terms present");
    let l_total = tape.value(total).item();
    if !l_total.is_finite() {
        return Err(Error::NonFiniteLoss { term: "l_total", step });
    }

    let mut grads = tape.backward(total)?;
    if let Some(trace) = trace {
        if step == 1 || step.is_multiple_of(cfg.train.grad_every) {
            trace.extend(gradscope::capture(step, &model.params, &bound, Some(&grads))?);
        }
    }

    // Parameter update.
    let opt = AdamW::from(&cfg.train);
    let precision = cfg.train.precision;
    let vars: Vec<Var> = bound.vars().to_vec();
    let mut k = 0;
    for (p, var) in state.model.params.iter_mut().zip(vars) {
        if !p.trainable {
            continue;
        }
        let g = grads
            .take(var)
            .unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec()));
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        adamw_step(p.value.data_mut(), g.data(), m.data_mut(), v.data_mut(), &opt, step);
        if precision == Precision::F32 {
            p.value = precision.apply(&p.value);
            *m = precision.apply(m);
            *v = precision.apply(v);
        }
        k += 1;
    }

    // Codebook update.
    if let Quantizer::Rvq(s) = &mut state.model.quantizer {
        if let QuantizerConfig::Rvq(rc) = &cfg.quantizer {
            s.ema_update(&q, rc.ema_decay);
            s.reseed_dead(&q, rc.dead_code_steps, &mut rng_indexed(cfg.train.seed, "quant.reseed", step));
        }
    }
    state.model.round_to(precision);
    state.step = step;

    let ms = if cfg.train.log_wall_clock {
        started.elapsed().as_millis() as u64
    } else {
        0
    };
    Ok(StepRecord {
        step,
        l_recon: terms.recon,
        l_mel: terms.mel,
        l_commit: terms.commit,
        l_fusion: terms.fusion,
        l_total,
        ms,
    })
}

pub struct TrainOutput {
    pub state: TrainState,
    pub records: Vec<StepRecord>,
    pub trace: GradTrace,
    /// Set when training stopped early; `state` is the last good step.
    pub aborted: Option<Error>,
}

/// Trains from a fresh initialisation for `cfg.train.steps` steps.
pub fn train_run(cfg: &RunConfig, data: &dyn DataSource) -> Result<TrainOutput> {
    let state = TrainState::new(Model::init(cfg)?);
    Ok(train_from(state, cfg, data, cfg.train.steps))
}

/// Continues `state` for `steps` more steps.
pub fn train_from(mut state: TrainState, cfg: &RunConfig, data: &dyn DataSource, steps: u64) -> TrainOutput {
    let mut records = Vec::with_capacity(steps as usize);
    let mut trace = GradTrace::default();
    let mut aborted = None;
    for _ in 0..steps {
        let result = data
            .batch(state.step, cfg.train.batch_size)
            .and_then(|batch| train_step(&mut state, cfg, &batch, Some(&mut trace)));
        match result {
            Ok(r) => {
                log::debug!("step {} total {:.6}", r.step, r.l_total);
                records.push(r);
            }
            Err(e) => {
                log::error!("training stopped at step {}: {e}", state.step + 1);
                aborted = Some(e);
                break;
            }
        }
    }
    TrainOutput {
        state,
        records,
        trace,
        aborted,
    }
}

pub fn write_step_log(path: &Path, records: &[StepRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r).map_err(|e| Error::Io(e.into()))?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_step_log(path: &Path) -> Result<Vec<StepRecord>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::config(format!("{}: line {}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_loss_examples() {
        let terms = LossTerms {
            recon: 0.1,
            mel: 0.2,
            commit: 0.05,
            fusion: 0.3,
        };
        let mut w = LossWeights {
            recon: 500.0,
            mel: 1.0,
            commit: 10.0,
            fusion: 1.0,
        };
        assert!((total_loss(&terms, &w).unwrap() - 51.0).abs() < 1e-12);
        let base = total_loss(&terms, &w).unwrap();
        w.fusion = 120.0;
        assert!((total_loss(&terms, &w).unwrap() - base - 119.0 * 0.3).abs() < 1e-12);
        let bad = LossTerms { mel: f64::NAN, ..terms };
        match total_loss(&bad, &w) {
            Err(Error::NonFiniteLoss { term, .. }) => assert_eq!(term, "l_mel"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn adamw_examples() {
        let opt = AdamW {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let (mut p, mut m, mut v) = ([1.0], [0.0], [0.0]);
        adamw_step(&mut p, &[1.0], &mut m, &mut v, &opt, 1);
        assert!((p[0] - 0.9).abs() < 1e-7);

        let (mut p, mut m, mut v) = ([1.5], [0.0], [0.0]);
        adamw_step(&mut p, &[0.0], &mut m, &mut v, &opt, 1);
        assert_eq!(p[0], 1.5);

        let wd = AdamW { weight_decay: 0.1, ..opt };
        let (mut p, mut m, mut v) = ([2.0], [0.0], [0.0]);
        adamw_step(&mut p, &[0.0], &mut m, &mut v, &wd, 1);
        assert!((p[0] - 2.0 * 0.99).abs() < 1e-15);
    }

    #[test]
    fn config_toml_round_trip_and_unknown_key() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        let err = RunConfig::from_toml("[train]\nlearning_rat = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rat"), "{err}");
    }

    #[test]
    fn classify_names() {
        assert_eq!(classify("enc.in.weight"), (Component::EncoderConv, true));
        assert_eq!(classify("fusion.vision.weight"), (Component::FusionHead, false));
        assert_eq!(classify("fusion.audio.bias"), (Component::FusionHead, true));
    }
}
