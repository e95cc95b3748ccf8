use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{HitSource, RunConfig};
use super::model::{expand_high, Model};
use super::optim::Adam;
use super::split::{split_bags, Split};
use crate::autograd::{Mat, Tape, Var};
use crate::datamodel::{Dataset, FeatureBag};
use crate::error::{Error, Result};
use crate::evalkit::{argmax, classification_metrics, hit_ratio_at_k, ClassMetrics, RunMetrics, SeedMetrics};

/// Anything the shared training protocol can fit.
pub trait Learner: Clone + Send + Sync {
    fn tensors_mut(&mut self) -> Vec<&mut Mat>;

    fn tensor_count(&self) -> usize;

    /// Builds the loss for one bag; returns the tape, the scalar loss, and
    /// parameter handles in `tensors_mut` order.
    fn loss(&self, bag: &FeatureBag, cfg: &RunConfig) -> Result<(Tape, Var, Vec<Var>)>;

    fn probabilities(&self, bag: &FeatureBag, cfg: &RunConfig) -> Result<Array1<f64>>;
}

impl Learner for Model {
    fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        Model::tensors_mut(self).into_iter().map(|(_, m)| m).collect()
    }

    fn tensor_count(&self) -> usize {
        self.tensors().len()
    }

    fn loss(&self, bag: &FeatureBag, cfg: &RunConfig) -> Result<(Tape, Var, Vec<Var>)> {
        let p = self.forward(bag, cfg)?;
        Ok((p.tape, p.loss, p.params))
    }

    fn probabilities(&self, bag: &FeatureBag, cfg: &RunConfig) -> Result<Array1<f64>> {
        Ok(self.forward(bag, cfg)?.probabilities())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean training loss; `None` for the pre-training evaluation.
    pub train_loss: Option<f64>,
    pub val_f1: f64,
}

#[derive(Clone, Debug)]
pub struct Fit<L> {
    /// Parameters at the best validation epoch.
    pub model: L,
    pub best_epoch: usize,
    pub best_val_f1: f64,
    pub history: Vec<EpochLog>,
    pub steps: usize,
}

pub fn predict<L: Learner>(model: &L, ds: &Dataset, idx: &[usize], cfg: &RunConfig) -> Result<(Vec<usize>, Mat, Vec<usize>)> {
    let probs = idx
        .iter()
        .map(|&i| model.probabilities(&ds.bags[i], cfg))
        .collect::<Result<Vec<_>>>()?;
    let c = ds.num_classes();
    let mut m = Mat::zeros((idx.len(), c));
    for (r, p) in probs.iter().enumerate() {
        m.row_mut(r).assign(p);
    }
    let preds = probs.iter().map(|p| argmax(p.iter().copied())).collect();
    let labels = idx.iter().map(|&i| ds.bags[i].label).collect();
    Ok((preds, m, labels))
}

pub fn evaluate<L: Learner>(model: &L, ds: &Dataset, idx: &[usize], cfg: &RunConfig) -> Result<ClassMetrics> {
    let (p, m, l) = predict(model, ds, idx, cfg)?;
    classification_metrics(&p, &m, &l)
}

/// Batch-size-one Adam training with early stopping on validation macro-F1.
/// The untrained model is evaluated first and counts as epoch 0; only a
/// strict improvement replaces the kept parameters.
pub fn fit<L: Learner>(init: L, ds: &Dataset, split: &Split, cfg: &RunConfig, seed: u64) -> Result<Fit<L>> {
    let mut model = init;
    let mut opt = Adam::new(cfg.adam, cfg.lr, cfg.weight_decay, model.tensor_count());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let f1 = evaluate(&model, ds, &split.val, cfg)?.macro_f1;
    let mut history = vec![EpochLog {
        epoch: 0,
        train_loss: None,
        val_f1: f1,
    }];
    let (mut best, mut best_epoch, mut best_f1) = (model.clone(), 0, f1);
    let mut stale = 0;
    let mut steps = 0;
    for epoch in 1..=cfg.max_epochs {
        let mut order = split.train.clone();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (step, &i) in order.iter().enumerate() {
            let bag = &ds.bags[i];
            let (tape, loss, params) = model.loss(bag, cfg)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Divergence(format!(
                    "loss {value} on bag {} (epoch {epoch}, step {step})",
                    bag.bag_id
                )));
            }
            let mut g = tape.backward(loss);
            let grads: Vec<Option<Mat>> = params.iter().map(|&v| g.take(v)).collect();
            if grads.iter().flatten().any(|m| m.iter().any(|x| !x.is_finite())) {
                return Err(Error::Divergence(format!(
                    "non-finite gradient on bag {} (epoch {epoch}, step {step})",
                    bag.bag_id
                )));
            }
            opt.step(model.tensors_mut(), grads);
            total += value;
            steps += 1;
        }
        let f1 = evaluate(&model, ds, &split.val, cfg)?.macro_f1;
        history.push(EpochLog {
            epoch,
            train_loss: Some(total / order.len().max(1) as f64),
            val_f1: f1,
        });
        if f1 > best_f1 {
            (best, best_epoch, best_f1) = (model.clone(), epoch, f1);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    Ok(Fit {
        model: best,
        best_epoch,
        best_val_f1: best_f1,
        history,
        steps,
    })
}

/// Test metrics of the full model, hit ratio included (mean over bags).
pub fn evaluate_model(model: &Model, ds: &Dataset, idx: &[usize], cfg: &RunConfig) -> Result<(ClassMetrics, f64)> {
    let cp = model.texts.child_parents();
    let mut probs = Mat::zeros((idx.len(), ds.num_classes()));
    let mut preds = Vec::with_capacity(idx.len());
    let mut hits = 0.0;
    for (r, &i) in idx.iter().enumerate() {
        let bag = &ds.bags[i];
        let p = model.forward(bag, cfg)?;
        let pr = p.probabilities();
        preds.push(argmax(pr.iter().copied()));
        probs.row_mut(r).assign(&pr);
        let s = match cfg.hit_source {
            HitSource::PostGnn => &p.output,
            HitSource::Raw => &p.input,
        };
        hits += hit_ratio_at_k(&s.img_low, &expand_high(bag, &s.img_high), bag.validity(), &s.text_low, &s.text_high, &cp, 2)?;
    }
    let labels: Vec<usize> = idx.iter().map(|&i| ds.bags[i].label).collect();
    Ok((classification_metrics(&preds, &probs, &labels)?, hits / idx.len() as f64))
}

#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub split: Split,
    pub fit: Fit<Model>,
    pub metrics: SeedMetrics,
}

pub fn run_seed(ds: &Dataset, cfg: &RunConfig, seed: u64) -> Result<SeedRun> {
    let split = split_bags(&ds.bags, ds.num_classes(), cfg.shots, seed)?;
    let model = Model::new(ds, cfg, seed)?;
    let fit = fit(model, ds, &split, cfg, seed)?;
    let (m, hit) = evaluate_model(&fit.model, ds, &split.test, cfg)?;
    Ok(SeedRun {
        seed,
        split,
        fit,
        metrics: SeedMetrics::new(seed, m, Some(hit)),
    })
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub runs: Vec<SeedRun>,
    pub metrics: RunMetrics,
}

/// Trains one model per configured seed, seeds in parallel.
pub fn train(cfg: &RunConfig, ds: &Dataset) -> Result<TrainReport> {
    cfg.validate()?;
    let runs = cfg
        .seeds
        .par_iter()
        .map(|&s| run_seed(ds, cfg, s))
        .collect::<Result<Vec<_>>>()?;
    let metrics = RunMetrics {
        per_seed: runs.iter().map(|r| r.metrics).collect(),
    };
    Ok(TrainReport { runs, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate_dataset, SynthConfig};

    fn toy() -> (Dataset, RunConfig) {
        let ds = generate_dataset(&SynthConfig {
            num_classes: 2,
            bags_per_class: 10,
            n_min: 2,
            n_max: 3,
            dim: 8,
            parents_per_class: 2,
            children_per_parent: 2,
            context_len: 4,
            ..SynthConfig::default()
        })
        .unwrap();
        let cfg = RunConfig {
            shots: 4,
            seeds: vec![0],
            parents_per_class: 2,
            children_per_parent: 2,
            context_len: 4,
            max_epochs: 3,
            patience: 2,
            lr: 1e-2,
            ..RunConfig::default()
        };
        (ds, cfg)
    }

    #[test]
    fn early_steps_have_finite_loss_and_nonzero_gradient() {
        let (ds, cfg) = toy();
        let mut model = Model::new(&ds, &cfg, 0).unwrap();
        let mut opt = Adam::new(cfg.adam, cfg.lr, cfg.weight_decay, model.tensors().len());
        for i in 0..10 {
            let (tape, loss, params) = Learner::loss(&model, &ds.bags[i % ds.bags.len()], &cfg).unwrap();
            assert!(tape.scalar(loss).is_finite());
            let mut g = tape.backward(loss);
            let grads: Vec<Option<Mat>> = params.iter().map(|&v| g.take(v)).collect();
            let norm: f64 = grads.iter().flatten().map(|m| m.iter().map(|x| x * x).sum::<f64>()).sum();
            assert!(norm > 0.0 && norm.is_finite());
            opt.step(Learner::tensors_mut(&mut model), grads);
        }
    }

    #[test]
    fn best_checkpoint_is_never_below_history() {
        let (ds, cfg) = toy();
        let split = split_bags(&ds.bags, 2, cfg.shots, 0).unwrap();
        let f = fit(Model::new(&ds, &cfg, 0).unwrap(), &ds, &split, &cfg, 0).unwrap();
        let max = f.history.iter().map(|h| h.val_f1).fold(f64::MIN, f64::max);
        assert_eq!(f.best_val_f1, max);
        assert_eq!(evaluate(&f.model, &ds, &split.val, &cfg).unwrap().macro_f1, f.best_val_f1);
        assert!(f.history.len() <= cfg.max_epochs + 1);
    }

    #[test]
    fn training_is_deterministic() {
        let (ds, cfg) = toy();
        let a = train(&cfg, &ds).unwrap();
        let b = train(&cfg, &ds).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.runs[0].fit.model, b.runs[0].fit.model);
    }

    #[test]
    fn single_class_is_rejected() {
        let ds = generate_dataset(&SynthConfig {
            num_classes: 1,
            dim: 8,
            context_len: 16,
            ..SynthConfig::default()
        })
        .unwrap();
        let cfg = RunConfig {
            lambda: 0.0,
            shots: 4,
            ..RunConfig::default()
        };
        assert!(matches!(train(&cfg, &ds), Err(Error::Config(_))));
    }
}
