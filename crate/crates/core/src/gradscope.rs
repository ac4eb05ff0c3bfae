//! Per-component gradient norms and their variance over training.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ad::Gradients;
use crate::error::{Error, Result};
use crate::params::{Bound, Component, ParamStore};
use crate::spectral::csv_err;

/// Label used for statistics over every trainable tensor.
pub const GLOBAL: &str = "global";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormRecord {
    pub step: u64,
    pub component: Component,
    pub tensor_name: String,
    pub grad_norm: f64,
    /// The tensor had no gradient (it did not reach the loss); norm is 0.
    #[serde(default)]
    pub missing: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceRecord {
    pub step: u64,
    /// A component label or [`GLOBAL`].
    pub component: String,
    pub variance: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradTrace {
    pub records: Vec<NormRecord>,
}

/// One L2 norm per trainable tensor. `grads` is `None` before a backward pass.
pub fn capture(step: u64, store: &ParamStore, bound: &Bound, grads: Option<&Gradients>) -> Result<Vec<NormRecord>> {
    let grads = grads.ok_or_else(|| Error::contract("gradient capture before backward"))?;
    let mut out = Vec::new();
    for (p, &v) in store.iter().zip(bound.vars()) {
        if !p.trainable {
            continue;
        }
        let (grad_norm, missing) = match grads.get(v) {
            Some(g) => (g.data().iter().map(|x| x * x).sum::<f64>().sqrt(), false),
            None => (0.0, true),
        };
        out.push(NormRecord {
            step,
            component: p.component,
            tensor_name: p.name.clone(),
            grad_norm,
            missing,
        });
    }
    Ok(out)
}

/// Population variance.
pub fn gradient_variance(norms: &[f64]) -> Result<f64> {
    if norms.is_empty() {
        return Err(Error::contract("gradient_variance of an empty list"));
    }
    // A rounded mean can sit off a constant list; equal norms are exactly 0.
    if norms.iter().all(|&x| x == norms[0]) {
        return Ok(0.0);
    }
    let n = norms.len() as f64;
    let mean = norms.iter().sum::<f64>() / n;
    Ok(norms.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n)
}

/// Least-squares slope over the last `tail_fraction` of `series` (at least
/// two points are required in the tail).
pub fn trend_slope(series: &[(f64, f64)], tail_fraction: f64) -> Result<f64> {
    if !(tail_fraction > 0.0 && tail_fraction <= 1.0) {
        return Err(Error::contract(format!("tail fraction {tail_fraction} outside (0, 1]")));
    }
    let n = (series.len() as f64 * tail_fraction).ceil() as usize;
    if n < 2 {
        return Err(Error::contract(format!(
            "tail of {n} point(s) cannot define a slope ({} in series)",
            series.len()
        )));
    }
    let tail = &series[series.len() - n..];
    let k = n as f64;
    let mx = tail.iter().map(|p| p.0).sum::<f64>() / k;
    let my = tail.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = tail.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::contract("tail steps are all equal"));
    }
    let sxy: f64 = tail.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Ok(sxy / sxx)
}

impl GradTrace {
    pub fn extend(&mut self, records: Vec<NormRecord>) {
        self.records.extend(records);
    }

    pub fn steps(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self.records.iter().map(|r| r.step).collect();
        s.dedup();
        s
    }

    /// Variance per step for every component present and for all tensors
    /// together, ordered by step then label.
    pub fn variances(&self) -> Vec<VarianceRecord> {
        let mut groups: BTreeMap<(u64, String), Vec<f64>> = BTreeMap::new();
        for r in &self.records {
            groups
                .entry((r.step, r.component.label().to_string()))
                .or_default()
                .push(r.grad_norm);
            groups.entry((r.step, GLOBAL.to_string())).or_default().push(r.grad_norm);
        }
        groups
            .into_iter()
            .map(|((step, component), norms)| VarianceRecord {
                step,
                component,
                variance: gradient_variance(&norms).expect("non-empty group"),
            })
            .collect()
    }

    /// `(step, variance)` for one label.
    pub fn variance_series(&self, component: &str) -> Vec<(f64, f64)> {
        self.variances()
            .into_iter()
            .filter(|r| r.component == component)
            .map(|r| (r.step as f64, r.variance))
            .collect()
    }

    /// CSV with columns `step,component,tensor_name,grad_norm`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["step", "component", "tensor_name", "grad_norm"]).map_err(csv_err)?;
        for r in &self.records {
            w.write_record([
                r.step.to_string(),
                r.component.label().to_string(),
                r.tensor_name.clone(),
                format!("{:e}", r.grad_norm),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
        let mut records = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let bad = |what: &str| Error::config(format!("{}: row {}: bad {what}", path.display(), line + 2));
            if rec.len() != 4 {
                return Err(bad("column count"));
            }
            records.push(NormRecord {
                step: rec[0].parse().map_err(|_| bad("step"))?,
                component: Component::from_label(&rec[1]).ok_or_else(|| bad("component"))?,
                tensor_name: rec[2].to_string(),
                grad_norm: rec[3].parse().map_err(|_| bad("grad_norm"))?,
                missing: false,
            });
        }
        Ok(Self { records })
    }
}

/// CSV with columns `step,component,variance`.
pub fn write_variance_csv(path: &Path, rows: &[VarianceRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["step", "component", "variance"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([r.step.to_string(), r.component.clone(), format!("{:e}", r.variance)])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ad::{Tape, Tensor};

    #[test]
    fn variance_examples() {
        assert_eq!(gradient_variance(&[2.0, 2.0, 2.0]).unwrap(), 0.0);
        assert_eq!(gradient_variance(&[1.0, 3.0]).unwrap(), 1.0);
        assert_eq!(gradient_variance(&[1.0, 2.0, 3.0, 4.0]).unwrap(), 1.25);
        assert!(gradient_variance(&[]).is_err());
    }

    #[test]
    fn slope_examples() {
        let flat: Vec<(f64, f64)> = (0..10).map(|i| (i as f64, 3.0)).collect();
        assert_eq!(trend_slope(&flat, 0.5).unwrap(), 0.0);
        let line: Vec<(f64, f64)> = (0..10).map(|i| (i as f64, i as f64)).collect();
        assert!((trend_slope(&line, 0.3).unwrap() - 1.0).abs() < 1e-12);
        assert!(trend_slope(&line[..1], 1.0).is_err());
        assert!(trend_slope(&line, 0.0).is_err());
    }

    fn store_and_grads() -> (ParamStore, Tape, Bound, Gradients) {
        let mut store = ParamStore::new();
        store.insert("enc.w", Component::EncoderConv, Tensor::vector(&[0.0, 0.0]), true);
        store.insert("fusion.audio.w", Component::FusionHead, Tensor::vector(&[1.0]), true);
        store.insert("fusion.vision.w", Component::FusionHead, Tensor::vector(&[1.0]), false);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let w = bound.var("enc.w").unwrap();
        let target = tape.constant(Tensor::vector(&[3.0, 4.0]));
        let prod = tape.mul(w, target).unwrap();
        let loss = tape.sum(prod);
        let grads = tape.backward(loss).unwrap();
        (store, tape, bound, grads)
    }

    #[test]
    fn capture_norms_and_missing_flags() {
        let (store, _tape, bound, grads) = store_and_grads();
        let recs = capture(5, &store, &bound, Some(&grads)).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].grad_norm, 5.0);
        assert!(!recs[0].missing);
        assert_eq!((recs[1].grad_norm, recs[1].missing), (0.0, true));
        assert!(capture(5, &store, &bound, None).is_err());
    }

    #[test]
    fn trace_csv_round_trip_and_variances() {
        let (store, _tape, bound, grads) = store_and_grads();
        let mut trace = GradTrace::default();
        trace.extend(capture(1, &store, &bound, Some(&grads)).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        trace.write_csv(&path).unwrap();
        let back = GradTrace::read_csv(&path).unwrap();
        assert_eq!(back.records.len(), 2);
        assert_eq!(back.records[0].grad_norm, 5.0);
        let v = trace.variances();
        let global = v.iter().find(|r| r.component == GLOBAL).unwrap();
        assert_eq!(global.variance, 6.25);
    }
}
