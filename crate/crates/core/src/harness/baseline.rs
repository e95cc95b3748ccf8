//! Vision-only pooling baselines over the valid high-scale features, each
//! followed by a linear classifier and trained with the shared protocol.

use ndarray::{Array1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::split::split_bags;
use super::train::{evaluate, fit, Learner};
use crate::autograd::{softmax, Mat, Tape, Var};
use crate::datamodel::{Dataset, FeatureBag};
use crate::error::{ensure, Result};
use crate::evalkit::{RunMetrics, SeedMetrics};

pub const ATTN_HIDDEN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BaselineKind {
    MeanPool,
    MaxPool,
    AttnMil,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 3] = [Self::MeanPool, Self::MaxPool, Self::AttnMil];

    pub fn name(self) -> &'static str {
        match self {
            Self::MeanPool => "MEAN_POOL",
            Self::MaxPool => "MAX_POOL",
            Self::AttnMil => "ATTN_MIL",
        }
    }
}

impl std::str::FromStr for BaselineKind {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(&s.replace('-', "_")))
            .ok_or_else(|| crate::error::Error::Argument(format!("unknown baseline {s}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Baseline {
    pub kind: BaselineKind,
    /// `C × D` classifier weights.
    pub w: Mat,
    pub b: Mat,
    /// Attention projection, `ATTN_HIDDEN × D`, and its scoring row.
    pub v: Mat,
    pub u: Mat,
}

impl Baseline {
    pub fn new(kind: BaselineKind, classes: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        let mut normal = |rows, cols, std: f64| {
            let n = Normal::new(0.0, std).expect("positive std");
            Mat::from_shape_simple_fn((rows, cols), || n.sample(&mut rng))
        };
        Self {
            kind,
            w: normal(classes, dim, 0.01),
            b: Mat::zeros((1, classes)),
            v: normal(ATTN_HIDDEN, dim, 1.0 / (dim as f64).sqrt()),
            u: normal(1, ATTN_HIDDEN, 1.0 / (ATTN_HIDDEN as f64).sqrt()),
        }
    }

    fn logits(&self, tape: &mut Tape, bag: &FeatureBag) -> Result<(Var, Vec<Var>)> {
        let feats = bag.valid_high_feats();
        ensure!(feats.nrows() > 0, Argument, "bag {} has no valid high patches", bag.bag_id);
        let params: Vec<Var> = [&self.w, &self.b, &self.v, &self.u].into_iter().map(|m| tape.leaf(m.clone())).collect();
        let (w, b, v, u) = (params[0], params[1], params[2], params[3]);
        let z = match self.kind {
            BaselineKind::MeanPool => tape.leaf(feats.mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0))),
            BaselineKind::MaxPool => {
                let m = feats.fold_axis(Axis(0), f64::NEG_INFINITY, |&a, &x| a.max(x));
                tape.leaf(m.insert_axis(Axis(0)))
            }
            BaselineKind::AttnMil => {
                let h = tape.leaf(feats);
                let proj = tape.matmul_nt(h, v);
                let act = tape.tanh(proj);
                let score = tape.matmul_nt(act, u);
                let a = tape.softmax_col(score);
                let at = tape.transpose(a);
                tape.matmul(at, h)
            }
        };
        let raw = tape.matmul_nt(z, w);
        Ok((tape.add(raw, b), params))
    }
}

impl Learner for Baseline {
    fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        vec![&mut self.w, &mut self.b, &mut self.v, &mut self.u]
    }

    fn tensor_count(&self) -> usize {
        4
    }

    fn loss(&self, bag: &FeatureBag, _cfg: &RunConfig) -> Result<(Tape, Var, Vec<Var>)> {
        let mut tape = Tape::new();
        let (logits, params) = self.logits(&mut tape, bag)?;
        ensure!(bag.label < self.w.nrows(), Argument, "label out of range");
        let loss = tape.softmax_ce(logits, bag.label);
        Ok((tape, loss, params))
    }

    fn probabilities(&self, bag: &FeatureBag, _cfg: &RunConfig) -> Result<Array1<f64>> {
        let mut tape = Tape::new();
        let (logits, _) = self.logits(&mut tape, bag)?;
        Ok(Array1::from(softmax(tape.value(logits).iter().copied())))
    }
}

pub fn run_baseline_seed(kind: BaselineKind, ds: &Dataset, cfg: &RunConfig, seed: u64) -> Result<SeedMetrics> {
    let split = split_bags(&ds.bags, ds.num_classes(), cfg.shots, seed)?;
    let init = Baseline::new(kind, ds.num_classes(), ds.dim(), seed);
    let f = fit(init, ds, &split, cfg, seed)?;
    Ok(SeedMetrics::new(seed, evaluate(&f.model, ds, &split.test, cfg)?, None))
}

/// Same splits, seeds and optimizer settings as the full model.
pub fn run_baseline(kind: BaselineKind, ds: &Dataset, cfg: &RunConfig) -> Result<RunMetrics> {
    cfg.validate()?;
    let per_seed = cfg
        .seeds
        .par_iter()
        .map(|&s| run_baseline_seed(kind, ds, cfg, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(RunMetrics { per_seed })
}
