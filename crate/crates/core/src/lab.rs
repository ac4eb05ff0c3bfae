//! Paired experiment runs: train a configuration, probe the frozen tokenizer
//! and score reconstructions on held-out clips.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradscope::GradTrace;
use crate::probe::{self, ProbeConfig, ProbeDataset};
use crate::rng::derive_indexed;
use crate::spectral::{self, Metrics};
use crate::synthav::{self, AVPair, SynthParams};
use crate::train::{self, Model, RunConfig, StepRecord, SyntheticData, TrainState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabConfig {
    pub probe: ProbeConfig,
    /// Labelled clips tokenized for the probe (split into train and test).
    pub probe_clips: u64,
    /// Held-out clips for reconstruction metrics.
    pub eval_clips: u64,
}

impl Default for LabConfig {
    fn default() -> Self {
        Self {
            probe: ProbeConfig::default(),
            probe_clips: 384,
            eval_clips: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quality {
    pub accuracy: f64,
    pub n_test: usize,
    /// Mean absolute reconstruction error over the evaluation clips.
    pub recon_l1: f64,
    /// Evaluation-clip averages.
    pub metrics: Metrics,
}

pub struct LabRun {
    pub state: TrainState,
    pub records: Vec<StepRecord>,
    pub trace: GradTrace,
    pub quality: Quality,
}

/// Clips `0..n` of the labelled stream `label` under `seed`.
pub fn clips(seed: u64, label: &str, n: u64, params: &SynthParams) -> Result<Vec<AVPair>> {
    (0..n)
        .map(|i| synthav::generate(derive_indexed(seed, label, i), params))
        .collect()
}

/// Probe accuracy and reconstruction quality of a trained model. The model
/// is only read.
pub fn assess(model: &Model, cfg: &RunConfig, lab: &LabConfig, seed: u64) -> Result<Quality> {
    let probe_pairs = clips(seed, "lab.probe", lab.probe_clips, &cfg.data)?;
    let data = ProbeDataset::from_model(model, &probe_pairs, cfg.data.n_classes)?;
    let (_, accuracy, n_test) = probe::train_probe(&data, &lab.probe, seed)?;

    let eval = clips(seed, "lab.eval", lab.eval_clips, &cfg.data)?;
    if eval.is_empty() {
        return Err(Error::config("lab.eval_clips must be positive"));
    }
    let (mut l1, mut mel, mut stft, mut sdr) = (0.0, 0.0, 0.0, 0.0);
    for p in &eval {
        let (x, _) = model.pad(&p.audio);
        let y = model.reconstruct(&x)?;
        l1 += x.iter().zip(&y).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64;
        let m = spectral::metrics(&x, &y, &cfg.spectral)?;
        mel += m.mel_error;
        stft += m.stft_distance;
        sdr += m.si_sdr_db;
    }
    let n = eval.len() as f64;
    Ok(Quality {
        accuracy,
        n_test,
        recon_l1: l1 / n,
        metrics: Metrics {
            mel_error: mel / n,
            stft_distance: stft / n,
            si_sdr_db: sdr / n,
        },
    })
}

/// Trains `cfg` with `cfg.train.seed` replaced by `seed`, then assesses it.
/// An aborted run is an error.
pub fn run(cfg: &RunConfig, lab: &LabConfig, seed: u64) -> Result<LabRun> {
    let mut cfg = cfg.clone();
    cfg.train.seed = seed;
    let data = SyntheticData {
        seed,
        params: cfg.data.clone(),
    };
    let out = train::train_run(&cfg, &data)?;
    if let Some(e) = out.aborted {
        return Err(e);
    }
    let quality = assess(&out.state.model, &cfg, lab, seed)?;
    Ok(LabRun {
        state: out.state,
        records: out.records,
        trace: out.trace,
        quality,
    })
}
