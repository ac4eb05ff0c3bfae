//! Synthetic audio-visual pairs and the on-disk feature formats.
//!
//! Each event is a faint class tone masked by a louder nuisance burst of
//! random pitch. With probability `rho` the event also shows up in the video:
//! a step along a class-specific direction at the onset frame that decays over
//! the event. The video otherwise follows a smooth zero-mean trajectory that
//! ignores the audio.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ad::Tensor;
use crate::binio::{put_values, Reader};
use crate::error::{Error, Result};
use crate::rng::{rng_for, rng_indexed, Rng};

pub const AVF_MAGIC: &[u8; 4] = b"AVF1";
pub const AVF_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthParams {
    pub rho: f64,
    pub n_events: usize,
    /// Audio samples per clip.
    pub t: usize,
    /// Video feature frames per clip.
    pub t_v: usize,
    pub d_v: usize,
    pub n_classes: usize,
    pub sample_rate_hz: f64,
    /// Event length in samples; `t / 4` when unset.
    pub event_len: Option<usize>,
    pub tone_amp: f64,
    pub nuisance_amp: f64,
    pub noise_amp: f64,
    /// Size of the visual step at an event onset.
    pub step_amp: f64,
    /// Amplitude of the smooth base trajectory.
    pub base_amp: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            rho: 1.0,
            n_events: 1,
            t: 8000,
            t_v: 25,
            d_v: 16,
            n_classes: 8,
            sample_rate_hz: 8000.0,
            event_len: None,
            tone_amp: 0.15,
            nuisance_amp: 0.45,
            noise_amp: 0.02,
            step_amp: 2.0,
            base_amp: 0.3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    /// First sample of the event.
    pub onset: usize,
    pub len: usize,
    pub class: usize,
    /// Whether the event was drawn into the video.
    pub visible: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AVPair {
    pub audio: Vec<f64>,
    /// `[T_v, d_v]`.
    pub video: Tensor,
    pub events: Vec<Event>,
    pub rho: f64,
}

impl AVPair {
    /// Class of the first event.
    pub fn label(&self) -> usize {
        self.events[0].class
    }
}

impl SynthParams {
    pub fn event_len(&self) -> usize {
        self.event_len.unwrap_or(self.t / 4)
    }

    /// Video frame (0-based) containing sample `s`.
    pub fn frame_of(&self, s: usize) -> usize {
        s * self.t_v / self.t
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::config(format!("rho {} outside [0, 1]", self.rho)));
        }
        if self.n_events == 0 || self.n_classes == 0 || self.t_v < 2 || self.d_v == 0 || self.t == 0 {
            return Err(Error::config("synth needs n_events, n_classes, d_v >= 1 and t_v >= 2"));
        }
        if self.t < self.t_v {
            return Err(Error::config("synth needs at least one sample per video frame"));
        }
        Ok(())
    }
}

/// Unit direction in video space for `class`; fixed across seeds.
pub fn class_direction(class: usize, d_v: usize) -> Vec<f64> {
    let mut rng = rng_indexed(0x5eed, "class_direction", class as u64);
    let mut v: Vec<f64> = (0..d_v).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// Tone frequency for `class`, spread over the band below Nyquist.
pub fn class_frequency(class: usize, n_classes: usize, sample_rate_hz: f64) -> f64 {
    let nyq = sample_rate_hz / 2.0;
    nyq * (0.1 + 0.8 * (class as f64 + 0.5) / n_classes as f64)
}

/// Pair from the default parameters with the given sizes.
pub fn generate_pair(seed: u64, rho: f64, n_events: usize, t: usize, t_v: usize, d_v: usize) -> Result<AVPair> {
    generate(
        seed,
        &SynthParams {
            rho,
            n_events,
            t,
            t_v,
            d_v,
            ..SynthParams::default()
        },
    )
}

/// Pure function of `(seed, params)`.
pub fn generate(seed: u64, p: &SynthParams) -> Result<AVPair> {
    p.validate()?;
    let len = p.event_len();
    // Onsets start after the first video frame so the step is visible as a change.
    let first = p.t.div_ceil(p.t_v);
    let room = p.t.saturating_sub(first);
    if len == 0 || p.n_events * len > room {
        return Err(Error::contract(format!(
            "cannot pack {} events of {len} samples into {room} samples",
            p.n_events
        )));
    }
    let mut rng = rng_for(seed, "synth.events");
    let events = place_events(&mut rng, p, first, len);
    let audio = render_audio(seed, p, &events);

    let mut vis_rng = rng_for(seed, "synth.visible");
    let events: Vec<Event> = events
        .into_iter()
        .map(|e| Event {
            visible: vis_rng.gen::<f64>() < p.rho,
            ..e
        })
        .collect();
    let video = render_video(seed, p, &events);
    Ok(AVPair {
        audio,
        video,
        events,
        rho: p.rho,
    })
}

fn place_events(rng: &mut Rng, p: &SynthParams, first: usize, len: usize) -> Vec<Event> {
    // Distribute the slack between events uniformly (stars and bars).
    let slack = p.t - first - p.n_events * len;
    let mut cuts: Vec<usize> = (0..p.n_events).map(|_| rng.gen_range(0..=slack)).collect();
    cuts.sort_unstable();
    cuts.iter()
        .enumerate()
        .map(|(i, &c)| Event {
            onset: first + c + i * len,
            len,
            class: rng.gen_range(0..p.n_classes),
            visible: false,
        })
        .collect()
}

fn render_audio(seed: u64, p: &SynthParams, events: &[Event]) -> Vec<f64> {
    let mut rng = rng_for(seed, "synth.audio");
    let mut audio: Vec<f64> = (0..p.t)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            p.noise_amp * z
        })
        .collect();
    for e in events {
        let f = class_frequency(e.class, p.n_classes, p.sample_rate_hz);
        let phase = rng.gen_range(0.0..2.0 * PI);
        let nf = rng.gen_range(0.05..0.95) * p.sample_rate_hz / 2.0;
        let nphase = rng.gen_range(0.0..2.0 * PI);
        let namp = p.nuisance_amp * rng.gen_range(0.6..1.0);
        for i in 0..e.len {
            let s = e.onset + i;
            let tsec = i as f64 / p.sample_rate_hz;
            // Raised-cosine envelope avoids clicks at the edges.
            let env = 0.5 - 0.5 * (2.0 * PI * i as f64 / e.len as f64).cos();
            audio[s] += env
                * (p.tone_amp * (2.0 * PI * f * tsec + phase).sin()
                    + namp * (2.0 * PI * nf * tsec + nphase).sin());
        }
    }
    let rms = (audio.iter().map(|x| x * x).sum::<f64>() / p.t as f64).sqrt();
    let target = rms.clamp(0.01, 1.0);
    if rms > 0.0 && target != rms {
        audio.iter_mut().for_each(|x| *x *= target / rms);
    }
    audio
}

fn render_video(seed: u64, p: &SynthParams, events: &[Event]) -> Tensor {
    let mut rng = rng_for(seed, "synth.video");
    let (tv, dv) = (p.t_v, p.d_v);
    let mut v = vec![0.0; tv * dv];
    // Smooth base: two slow sinusoids per dimension with random phases.
    for j in 0..dv {
        for _ in 0..2 {
            let cycles = rng.gen_range(0.2..1.0);
            let phase = rng.gen_range(0.0..2.0 * PI);
            let amp = p.base_amp * rng.gen_range(0.5..1.0) / 2.0;
            for t in 0..tv {
                v[t * dv + j] += amp * (2.0 * PI * cycles * t as f64 / tv as f64 + phase).sin();
            }
        }
    }
    for e in events.iter().filter(|e| e.visible) {
        let dir = class_direction(e.class, dv);
        let f0 = p.frame_of(e.onset);
        let span = (p.frame_of(e.onset + e.len - 1) - f0 + 1) as f64;
        for t in f0..tv {
            let decay = (-((t - f0) as f64) / span).exp();
            for j in 0..dv {
                v[t * dv + j] += p.step_amp * decay * dir[j];
            }
        }
    }
    Tensor::new(vec![tv, dv], v).expect("video shape")
}

// ---------------------------------------------------------------------------
// Files

/// Encodes `[T_v, d_v]` features as AVF1 with dtype tag 0 (f32) or 1 (f64).
pub fn encode_features(v: &Tensor, dtype: u8) -> Result<Vec<u8>> {
    if v.rank() != 2 {
        return Err(Error::dim("write_features", v.shape(), &[0, 0]));
    }
    if dtype > 1 {
        return Err(Error::config(format!("unknown dtype tag {dtype}")));
    }
    if !v.all_finite() {
        return Err(Error::Numeric("write_features: non-finite value".into()));
    }
    let mut out = Vec::with_capacity(17 + v.numel() * 8);
    out.extend_from_slice(AVF_MAGIC);
    out.extend_from_slice(&AVF_VERSION.to_le_bytes());
    out.push(dtype);
    out.extend_from_slice(&(v.shape()[0] as u32).to_le_bytes());
    out.extend_from_slice(&(v.shape()[1] as u32).to_le_bytes());
    put_values(&mut out, dtype, v.data());
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<(Tensor, u8)> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4, "magic")?;
    if magic != AVF_MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}, expected \"AVF1\"")));
    }
    let at = r.offset();
    let version = r.u32("version")?;
    if version != AVF_VERSION {
        return Err(Error::format(at, format!("unsupported version {version}")));
    }
    let at = r.offset();
    let dtype = r.u8("dtype")?;
    if dtype > 1 {
        return Err(Error::format(at, format!("unknown dtype tag {dtype}")));
    }
    let at = r.offset();
    let (tv, dv) = (r.u32("T_v")? as usize, r.u32("d_v")? as usize);
    if tv == 0 || dv == 0 {
        return Err(Error::format(at, format!("empty feature array {tv}x{dv}")));
    }
    let data = r.values(dtype, tv * dv, "payload")?;
    if !r.is_empty() {
        return Err(Error::format(r.offset(), "trailing bytes after payload"));
    }
    Ok((Tensor::new(vec![tv, dv], data)?, dtype))
}

pub fn write_features(path: &Path, v: &Tensor, dtype: u8) -> Result<()> {
    fs::write(path, encode_features(v, dtype)?)?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    Ok(decode_features(&fs::read(path)?)?.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AudioSidecar {
    pub sample_rate_hz: f64,
    pub length: usize,
}

/// `<path>.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes f32 little-endian samples plus the JSON sidecar.
pub fn write_raw_audio(path: &Path, audio: &[f64], sample_rate_hz: f64) -> Result<()> {
    let mut bytes = Vec::with_capacity(audio.len() * 4);
    put_values(&mut bytes, 0, audio);
    fs::write(path, bytes)?;
    let meta = AudioSidecar {
        sample_rate_hz,
        length: audio.len(),
    };
    fs::write(sidecar_path(path), serde_json::to_string(&meta).expect("sidecar json"))?;
    Ok(())
}

/// Reads raw f32 audio; the sidecar is optional and checked when present.
pub fn read_raw_audio(path: &Path) -> Result<(Vec<f64>, Option<AudioSidecar>)> {
    let bytes = fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::format(
            (bytes.len() - bytes.len() % 4) as u64,
            "raw audio length is not a multiple of 4 bytes",
        ));
    }
    let audio = Reader::new(&bytes).values(0, bytes.len() / 4, "samples")?;
    let side = sidecar_path(path);
    let meta = if side.exists() {
        let m: AudioSidecar = serde_json::from_str(&fs::read_to_string(&side)?)
            .map_err(|e| Error::config(format!("{}: {e}", side.display())))?;
        if m.length != audio.len() {
            return Err(Error::config(format!(
                "{}: length {} but file holds {} samples",
                side.display(),
                m.length,
                audio.len()
            )));
        }
        Some(m)
    } else {
        None
    };
    Ok((audio, meta))
}
