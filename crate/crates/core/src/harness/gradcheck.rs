use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::model::Model;
use crate::datamodel::FeatureBag;
use crate::error::Result;

/// Denominator floor of the relative error, so entries whose true gradient
/// is zero are judged by absolute error.
pub const GRAD_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
    pub max_abs_grad: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_err: f64,
}

fn total_loss(model: &Model, bags: &[&FeatureBag], cfg: &RunConfig) -> Result<f64> {
    let mut sum = 0.0;
    for b in bags {
        let p = model.forward(b, cfg)?;
        sum += p.tape.scalar(p.loss);
    }
    Ok(sum)
}

/// Compares the tape gradient of the summed bag losses with central
/// differences, entry by entry, for every model tensor. Tensors the current
/// configuration does not touch must come out with zero numeric gradient.
pub fn gradient_check(model: &Model, bags: &[&FeatureBag], cfg: &RunConfig, step: f64) -> Result<GradReport> {
    let names: Vec<String> = model.tensors().into_iter().map(|(n, _)| n).collect();
    let mut analytic: Vec<Option<crate::autograd::Mat>> = vec![None; names.len()];
    for b in bags {
        let p = model.forward(b, cfg)?;
        let mut g = p.tape.backward(p.loss);
        for (slot, &v) in analytic.iter_mut().zip(&p.params) {
            if let Some(m) = g.take(v) {
                match slot {
                    Some(acc) => *acc += &m,
                    None => *slot = Some(m),
                }
            }
        }
    }
    let mut probe = model.clone();
    let mut tensors = Vec::with_capacity(names.len());
    for (t, name) in names.iter().enumerate() {
        let shape = model.tensors()[t].1.dim();
        let mut worst: f64 = 0.0;
        let mut biggest: f64 = 0.0;
        for idx in ndarray::indices(shape) {
            let orig = model.tensors()[t].1[idx];
            probe.tensors_mut()[t].1[idx] = orig + step;
            let up = total_loss(&probe, bags, cfg)?;
            probe.tensors_mut()[t].1[idx] = orig - step;
            let down = total_loss(&probe, bags, cfg)?;
            probe.tensors_mut()[t].1[idx] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[t].as_ref().map_or(0.0, |m| m[idx]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            worst = worst.max(rel);
            biggest = biggest.max(a.abs());
        }
        tensors.push(TensorCheck {
            name: name.clone(),
            entries: shape.0 * shape.1,
            max_rel_err: worst,
            max_abs_grad: biggest,
        });
    }
    let max_rel_err = tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max);
    Ok(GradReport { tensors, max_rel_err })
}

/// Two bags, two classes, two low patches each, at width 8.
pub fn toy_problem() -> Result<(crate::datamodel::Dataset, RunConfig)> {
    let synth = crate::synthgen::SynthConfig {
        num_classes: 2,
        bags_per_class: 1,
        n_min: 2,
        n_max: 2,
        dim: 8,
        parents_per_class: 2,
        children_per_parent: 2,
        context_len: 4,
        context_std: 0.1,
        ..crate::synthgen::SynthConfig::default()
    };
    let ds = crate::synthgen::generate_dataset(&synth)?;
    let cfg = RunConfig {
        parents_per_class: 2,
        children_per_parent: 2,
        context_len: 4,
        init: super::config::InitConfig {
            identity_gain: 0.5,
            std: 0.2,
            scale_std: 0.2,
        },
        ..RunConfig::default()
    };
    Ok((ds, cfg))
}
