//! Seeded synthetic datasets with a planted parent/child prototype hierarchy.
//!
//! Each class owns `O` parent prototypes on the unit sphere, and each parent
//! owns `K` children placed near it. A signal low patch sits near one parent
//! of the bag's class and its 16 high patches near that parent's children.
//! Background patches come from prototypes shared by every class. Text base
//! embeddings are noisy copies of the prototypes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::datamodel::{normalize_rows, Dataset, EncoderStub, FeatureBag, StubKind, TextHierarchy, GRID};
use crate::error::{ensure, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub bags_per_class: usize,
    /// Inclusive range of low patches per bag.
    pub n_min: usize,
    pub n_max: usize,
    pub dim: usize,
    pub parents_per_class: usize,
    pub children_per_parent: usize,
    /// Share of low patches drawn from the bag's class.
    pub rho: f64,
    /// Patch noise scale.
    pub tau: f64,
    /// Noise on the text copies of the prototypes.
    pub text_noise: f64,
    /// Distance of a child prototype from its parent.
    pub child_spread: f64,
    pub background_prototypes: usize,
    /// Scale of a per-bag shift added to every patch of the bag.
    pub nuisance: f64,
    /// Probability that a high patch holds tissue.
    pub valid_fraction: f64,
    pub context_len: usize,
    pub context_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            bags_per_class: 30,
            n_min: 8,
            n_max: 16,
            dim: 64,
            parents_per_class: 4,
            children_per_parent: 3,
            rho: 0.8,
            tau: 0.3,
            text_noise: 0.6,
            child_spread: 0.5,
            background_prototypes: 4,
            nuisance: 0.0,
            valid_fraction: 0.9,
            context_len: 16,
            context_std: 0.02,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// The separation benchmark: noisy prompts, noisy patches and a strong
    /// per-bag shift, with enough bags for a 16-shot split.
    pub fn reference() -> Self {
        Self {
            bags_per_class: 40,
            tau: 1.0,
            text_noise: 6.0,
            nuisance: 1.5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.num_classes >= 1, Config, "num_classes must be positive");
        ensure!(self.bags_per_class >= 1, Config, "bags_per_class must be positive");
        ensure!(
            self.n_min >= 1 && self.n_min <= self.n_max,
            Config,
            "patch range {}..={} is invalid",
            self.n_min,
            self.n_max
        );
        ensure!(self.dim >= 1, Config, "dim must be positive");
        ensure!(
            self.parents_per_class >= 1 && self.children_per_parent >= 1,
            Config,
            "hierarchy sizes must be positive"
        );
        ensure!(self.rho >= 0.0 && self.rho <= 1.0, Config, "rho must lie in [0, 1], got {}", self.rho);
        ensure!(self.tau > 0.0, Config, "tau must be positive, got {}", self.tau);
        for (name, v) in [
            ("text_noise", self.text_noise),
            ("child_spread", self.child_spread),
            ("nuisance", self.nuisance),
            ("context_std", self.context_std),
        ] {
            ensure!(v >= 0.0 && v.is_finite(), Config, "{name} must be non-negative, got {v}");
        }
        ensure!(
            self.valid_fraction > 0.0 && self.valid_fraction <= 1.0,
            Config,
            "valid_fraction must lie in (0, 1]"
        );
        ensure!(
            self.rho == 1.0 || self.background_prototypes >= 1,
            Config,
            "background patches need at least one background prototype"
        );
        ensure!(self.context_len >= 1, Config, "context_len must be positive");
        Ok(())
    }
}

/// The planted prototypes, unit norm.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototypes {
    pub parents: Mat,
    pub children: Mat,
    pub background: Mat,
    pub background_children: Mat,
}

/// Isotropic Gaussian with per-coordinate variance `1/d`, so `E|g|² = 1`.
fn gaussian(rng: &mut ChaCha8Rng, rows: usize, d: usize) -> Mat {
    let s = 1.0 / (d as f64).sqrt();
    Mat::from_shape_simple_fn((rows, d), || {
        let z: f64 = StandardNormal.sample(rng);
        z * s
    })
}

fn unit(mut m: Mat) -> Mat {
    normalize_rows(&mut m);
    m
}

fn jitter(rng: &mut ChaCha8Rng, centers: &Mat, scale: f64) -> Mat {
    centers + &(gaussian(rng, centers.nrows(), centers.ncols()) * scale)
}

fn spawn_children(rng: &mut ChaCha8Rng, parents: &Mat, k: usize, spread: f64) -> Mat {
    let rows: Vec<usize> = (0..parents.nrows() * k).map(|s| s / k).collect();
    unit(jitter(rng, &parents.select(ndarray::Axis(0), &rows), spread))
}

pub fn prototypes(cfg: &SynthConfig) -> Prototypes {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.dim;
    let parents = unit(gaussian(&mut rng, cfg.num_classes * cfg.parents_per_class, d));
    let children = spawn_children(&mut rng, &parents, cfg.children_per_parent, cfg.child_spread);
    let background = unit(gaussian(&mut rng, cfg.background_prototypes, d));
    let background_children = spawn_children(&mut rng, &background, cfg.children_per_parent, cfg.child_spread);
    Prototypes {
        parents,
        children,
        background,
        background_children,
    }
}

fn make_bag(cfg: &SynthConfig, p: &Prototypes, index: usize, label: usize) -> Result<FeatureBag> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // stream 0 holds the prototypes and texts
    rng.set_stream(index as u64 + 1);
    let d = cfg.dim;
    let k = cfg.children_per_parent;
    let n = rng.random_range(cfg.n_min..=cfg.n_max);
    let shift = gaussian(&mut rng, 1, d) * cfg.nuisance;
    let mut low = Mat::zeros((n, d));
    let mut high = Mat::zeros((n * GRID, d));
    let mut validity = vec![false; n * GRID];
    for i in 0..n {
        let (center, kids) = if rng.random_bool(cfg.rho) {
            let o = label * cfg.parents_per_class + rng.random_range(0..cfg.parents_per_class);
            (p.parents.row(o), p.children.slice(ndarray::s![o * k..(o + 1) * k, ..]))
        } else {
            let b = rng.random_range(0..cfg.background_prototypes);
            (p.background.row(b), p.background_children.slice(ndarray::s![b * k..(b + 1) * k, ..]))
        };
        let jitter = gaussian(&mut rng, 1, d) * cfg.tau;
        low.row_mut(i).assign(&(&center + &jitter.row(0) + shift.row(0)));
        for j in 0..GRID {
            let r = i * GRID + j;
            let s = rng.random_range(0..k);
            let jitter = gaussian(&mut rng, 1, d) * cfg.tau;
            if rng.random_bool(cfg.valid_fraction) {
                validity[r] = true;
                high.row_mut(r).assign(&(&kids.row(s) + &jitter.row(0) + shift.row(0)));
            }
        }
    }
    FeatureBag::new(format!("bag{index:05}"), label, low, high, validity)
}

/// Text hierarchy whose base embeddings are noisy prototype copies.
pub fn texts(cfg: &SynthConfig, p: &Prototypes) -> Result<TextHierarchy> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u64::MAX);
    let d = cfg.dim;
    let base_parent = unit(jitter(&mut rng, &p.parents, cfg.text_noise));
    let base_child = unit(jitter(&mut rng, &p.children, cfg.text_noise));
    let context_low = gaussian(&mut rng, cfg.context_len, d) * (cfg.context_std * (d as f64).sqrt());
    let context_high = gaussian(&mut rng, cfg.context_len, d) * (cfg.context_std * (d as f64).sqrt());
    TextHierarchy::new(
        cfg.num_classes,
        cfg.parents_per_class,
        cfg.children_per_parent,
        base_parent,
        base_child,
        context_low,
        context_high,
    )
}

/// Bags are ordered by class, `bags_per_class` each, and the encoder stub is
/// the identity.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let p = prototypes(cfg);
    let bags = (0..cfg.num_classes * cfg.bags_per_class)
        .map(|i| make_bag(cfg, &p, i, i / cfg.bags_per_class))
        .collect::<Result<Vec<_>>>()?;
    let texts = texts(cfg, &p)?;
    let ds = Dataset {
        bags,
        texts,
        stub: EncoderStub::identity(cfg.dim),
        stub_kind: StubKind::Identity,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn save_synth(dir: &std::path::Path, cfg: &SynthConfig) -> Result<Dataset> {
    let ds = generate_dataset(cfg)?;
    crate::datamodel::io::save_dataset(dir, &ds, Some(serde_json::to_value(cfg)?))?;
    Ok(ds)
}
