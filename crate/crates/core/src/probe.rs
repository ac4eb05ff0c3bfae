//! Frozen-tokenizer probe: per-level code embeddings, a small mapping network
//! and a linear classifier trained on mean-pooled tokens.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ad::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, Component, ParamStore};
use crate::rng::{rng_for, Rng};
use crate::synthav::AVPair;
use crate::train::{adamw_step, AdamW, Model};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub e_dim: usize,
    pub learning_rate: f64,
    pub steps: u64,
    pub batch_size: usize,
    /// Share of clips held out for testing.
    pub test_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            e_dim: 32,
            learning_rate: 1e-3,
            steps: 500,
            batch_size: 32,
            test_fraction: 0.25,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.e_dim == 0 || self.batch_size == 0 {
            return Err(Error::config("probe.e_dim and probe.batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("probe.learning_rate must be positive"));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::config("probe.test_fraction must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Token streams and labels of a labelled clip set.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeDataset {
    /// Per clip, `n_q × T'` codes. Every clip has the same shape.
    pub codes: Vec<Vec<Vec<usize>>>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    /// Code count of each quantizer level.
    pub level_sizes: Vec<usize>,
}

impl ProbeDataset {
    pub fn new(codes: Vec<Vec<Vec<usize>>>, labels: Vec<usize>, n_classes: usize, level_sizes: Vec<usize>) -> Result<Self> {
        if codes.is_empty() || codes.len() != labels.len() {
            return Err(Error::contract(format!("{} code streams for {} labels", codes.len(), labels.len())));
        }
        let n_q = level_sizes.len();
        let frames = codes[0].first().map_or(0, Vec::len);
        if frames == 0 {
            return Err(Error::contract("empty code stream"));
        }
        for c in &codes {
            if c.len() != n_q || c.iter().any(|l| l.len() != frames) {
                return Err(Error::contract(format!("every clip needs {n_q} levels of {frames} codes")));
            }
            check_codes(c, &level_sizes)?;
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::contract(format!("label {l} outside {n_classes} classes")));
        }
        Ok(Self {
            codes,
            labels,
            n_classes,
            level_sizes,
        })
    }

    /// Tokenizes `pairs` with the (unchanged) `model`; labels are event classes.
    pub fn from_model(model: &Model, pairs: &[AVPair], n_classes: usize) -> Result<Self> {
        let codes = pairs
            .iter()
            .map(|p| model.codes(&model.pad(&p.audio).0))
            .collect::<Result<Vec<_>>>()?;
        let labels = pairs.iter().map(AVPair::label).collect();
        Self::new(codes, labels, n_classes, model.quantizer.level_sizes())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Train and test indices. Fails if some class has no training clip.
    pub fn split(&self, seed: u64, test_fraction: f64) -> Result<(Vec<usize>, Vec<usize>)> {
        let n = self.len();
        let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
        if n < 2 {
            return Err(Error::contract("probe needs at least two clips"));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng_for(seed, "probe.split"));
        let test = idx.split_off(n - n_test);
        for c in 0..self.n_classes {
            if !idx.iter().any(|&i| self.labels[i] == c) {
                return Err(Error::contract(format!("class {c} is absent from the training split")));
            }
        }
        Ok((idx, test))
    }
}

fn check_codes(codes: &[Vec<usize>], level_sizes: &[usize]) -> Result<()> {
    for (level, (c, &size)) in codes.iter().zip(level_sizes).enumerate() {
        if let Some(&value) = c.iter().find(|&&v| v >= size) {
            return Err(Error::Index { level, value, size });
        }
    }
    Ok(())
}

/// Probe parameters: `embed.{i}` `[K_i, e]`, `map.0`, `map.1` and `head`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeState {
    pub params: ParamStore,
    pub level_sizes: Vec<usize>,
    pub e_dim: usize,
    pub n_classes: usize,
}

impl ProbeState {
    pub fn init(level_sizes: &[usize], e_dim: usize, n_classes: usize, rng: &mut Rng) -> Self {
        let mut params = ParamStore::new();
        let c = Component::FusionHead;
        let normal = Normal::new(0.0, 1.0).expect("std");
        for (i, &k) in level_sizes.iter().enumerate() {
            let data = (0..k * e_dim).map(|_| normal.sample(rng)).collect();
            params.insert(&format!("embed.{i}"), c, Tensor::new(vec![k, e_dim], data).expect("shape"), true);
        }
        let n_q = level_sizes.len();
        dense(&mut params, rng, "map.0", n_q * e_dim, e_dim);
        dense(&mut params, rng, "map.1", e_dim, e_dim);
        dense(&mut params, rng, "head", e_dim, n_classes);
        Self {
            params,
            level_sizes: level_sizes.to_vec(),
            e_dim,
            n_classes,
        }
    }

    /// `n_q × T'` codes to `[T', n_q·e]` embeddings.
    pub fn embed_codes(&self, codes: &[Vec<usize>]) -> Result<Tensor> {
        if codes.len() != self.level_sizes.len() {
            return Err(Error::contract(format!(
                "{} code levels for {} embedding tables",
                codes.len(),
                self.level_sizes.len()
            )));
        }
        check_codes(codes, &self.level_sizes)?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let v = embed_var(&mut tape, &p, codes)?;
        Ok(tape.value(v).clone())
    }

    /// Class logits `[B, C]` for a batch of equally shaped code streams.
    fn logits(&self, tape: &mut Tape, p: &Bound, batch: &[&Vec<Vec<usize>>]) -> Result<Var> {
        let b = batch.len();
        let frames = batch[0][0].len();
        let e = self.e_dim;
        let w0 = p.var("map.0.weight")?;
        // concat(e_i) · W equals Σ_i e_i · W_i with W_i the i-th row block of
        // W, so each table is projected once and then gathered.
        let mut h: Option<Var> = None;
        for i in 0..self.level_sizes.len() {
            let block: Vec<usize> = (i * e..(i + 1) * e).collect();
            let wi = tape.gather(w0, &block)?;
            let table = p.var(&format!("embed.{i}"))?;
            let proj = tape.matmul(table, wi)?;
            let idx: Vec<usize> = batch.iter().flat_map(|c| c[i].iter().copied()).collect();
            let rows = tape.gather(proj, &idx)?;
            h = Some(match h {
                None => rows,
                Some(acc) => tape.add(acc, rows)?,
            });
        }
        let h = tape.add(h.expect("at least one level"), p.var("map.0.bias")?)?;
        let h = tape.relu(h);
        let h = linear(tape, p, "map.1", h)?;
        let h = tape.relu(h);
        let h = tape.reshape(h, &[b, frames, e])?;
        let pooled = tape.mean_axis(h, 1)?;
        linear(tape, p, "head", pooled)
    }

    /// Predicted class of each clip.
    pub fn predict(&self, batch: &[&Vec<Vec<usize>>]) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let logits = self.logits(&mut tape, &p, batch)?;
        Ok(tape
            .value(logits)
            .rows()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (k, &x)| if x > best.1 { (k, x) } else { best })
                    .0
            })
            .collect())
    }
}

fn dense(store: &mut ParamStore, rng: &mut Rng, prefix: &str, fan_in: usize, fan_out: usize) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let w = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
    let c = Component::FusionHead;
    store.insert(&format!("{prefix}.weight"), c, Tensor::new(vec![fan_in, fan_out], w).expect("shape"), true);
    store.insert(&format!("{prefix}.bias"), c, Tensor::zeros(vec![fan_out]), true);
}

fn linear(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let y = tape.matmul(x, p.var(&format!("{prefix}.weight"))?)?;
    tape.add(y, p.var(&format!("{prefix}.bias"))?)
}

fn embed_var(tape: &mut Tape, p: &Bound, codes: &[Vec<usize>]) -> Result<Var> {
    let parts = codes
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let table = p.var(&format!("embed.{i}"))?;
            tape.gather(table, c)
        })
        .collect::<Result<Vec<_>>>()?;
    tape.concat(&parts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub checkpoint: String,
    pub seed: u64,
    pub accuracy: f64,
    pub n_test: usize,
}

impl ProbeResult {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("result serializes");
        std::fs::write(path, text + "\n")?;
        Ok(())
    }
}

/// Trains a fresh probe on the training split of `data` and returns it with
/// the test accuracy and test-set size. Split, initialisation and batches all
/// derive from `seed`.
pub fn train_probe(data: &ProbeDataset, cfg: &ProbeConfig, seed: u64) -> Result<(ProbeState, f64, usize)> {
    cfg.validate()?;
    let (train, test) = data.split(seed, cfg.test_fraction)?;
    let mut state = ProbeState::init(&data.level_sizes, cfg.e_dim, data.n_classes, &mut rng_for(seed, "probe.init"));
    let opt = AdamW {
        lr: cfg.learning_rate,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.0,
    };
    let mut m: Vec<Tensor> = state.params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
    let mut v = m.clone();
    let mut rng = rng_for(seed, "probe.batch");
    let bsz = cfg.batch_size.min(train.len());
    for step in 1..=cfg.steps {
        let picks: Vec<usize> = train.choose_multiple(&mut rng, bsz).copied().collect();
        let batch: Vec<&Vec<Vec<usize>>> = picks.iter().map(|&i| &data.codes[i]).collect();
        let mut onehot = Tensor::zeros(vec![bsz, data.n_classes]);
        for (r, &i) in picks.iter().enumerate() {
            onehot.data_mut()[r * data.n_classes + data.labels[i]] = 1.0;
        }
        let mut tape = Tape::new();
        let p = state.params.bind(&mut tape);
        let logits = state.logits(&mut tape, &p, &batch)?;
        let logp = tape.log_softmax(logits);
        let target = tape.constant(onehot);
        let picked = tape.mul(logp, target)?;
        let total = tape.sum(picked);
        let loss = tape.scale(total, -1.0 / bsz as f64);
        if !tape.value(loss).item().is_finite() {
            return Err(Error::NonFiniteLoss { term: "probe", step });
        }
        let mut grads = tape.backward(loss)?;
        let vars = p.vars().to_vec();
        for (k, (param, var)) in state.params.iter_mut().zip(vars).enumerate() {
            let g = grads.take(var).unwrap_or_else(|| Tensor::zeros(param.value.shape().to_vec()));
            adamw_step(param.value.data_mut(), g.data(), m[k].data_mut(), v[k].data_mut(), &opt, step);
        }
    }
    let mut correct = 0;
    for chunk in test.chunks(cfg.batch_size) {
        let batch: Vec<&Vec<Vec<usize>>> = chunk.iter().map(|&i| &data.codes[i]).collect();
        let pred = state.predict(&batch)?;
        correct += chunk.iter().zip(pred).filter(|(&i, p)| data.labels[i] == *p).count();
    }
    Ok((state, correct as f64 / test.len() as f64, test.len()))
}

/// Test accuracy of a probe trained on top of a frozen tokenizer.
pub fn probe_train_eval(model: &Model, pairs: &[AVPair], n_classes: usize, cfg: &ProbeConfig, seed: u64) -> Result<f64> {
    let data = ProbeDataset::from_model(model, pairs, n_classes)?;
    Ok(train_probe(&data, cfg, seed)?.1)
}
