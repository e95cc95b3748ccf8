//! Multi-scale feature bags, the parent/child text hierarchy, and the frozen
//! projection that turns learnable context tokens into text embeddings.

use std::ops::Range;

use ndarray::{Array1, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape, Var, NORM_EPS};
use crate::error::{ensure, Result};

pub mod io;

/// High-scale patches per low-scale patch (a 4×4 grid).
pub const GRID: usize = 16;

/// Tolerance for unit-norm checks.
pub const UNIT_TOL: f64 = 1e-6;

/// Index of grid cell `m` of low patch `n` in the flattened high-scale array.
pub fn flatten_index(n: usize, m: usize) -> Result<usize> {
    ensure!(m < GRID, Argument, "grid position {m} outside 0..{GRID}");
    Ok(GRID * n + m)
}

/// Low-scale patch that contains high-scale patch `r`.
pub fn parent_patch(r: usize) -> usize {
    r / GRID
}

/// Signed entry point for callers holding untrusted indices.
pub fn parent_patch_checked(r: i64) -> Result<usize> {
    ensure!(r >= 0, Argument, "negative high-patch index {r}");
    Ok(parent_patch(r as usize))
}

pub fn l2_normalize(v: ArrayView1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    if n > NORM_EPS {
        &v / n
    } else {
        v.to_owned()
    }
}

pub fn normalize_rows(m: &mut Mat) {
    for mut row in m.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > NORM_EPS {
            row /= n;
        }
    }
}

/// Lays the children of one low patch out on the 16-cell grid, zero-filling
/// the cells that have no child.
pub fn pad_children(children: &[Vec<f64>], positions: &[usize], dim: usize) -> Result<(Mat, Vec<bool>)> {
    ensure!(
        children.len() == positions.len(),
        Argument,
        "{} children but {} positions",
        children.len(),
        positions.len()
    );
    ensure!(children.len() <= GRID, Argument, "more than {GRID} children");
    let mut out = Mat::zeros((GRID, dim));
    let mut valid = vec![false; GRID];
    for (child, &m) in children.iter().zip(positions) {
        ensure!(m < GRID, Argument, "grid position {m} outside 0..{GRID}");
        ensure!(!valid[m], Argument, "duplicate grid position {m}");
        ensure!(child.len() == dim, Shape, "child has width {}, expected {dim}", child.len());
        out.row_mut(m).assign(&ArrayView1::from(child.as_slice()));
        valid[m] = true;
    }
    Ok((out, valid))
}

/// One slide: low-scale patches, their 16 high-scale children each, and a label.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBag {
    pub bag_id: String,
    pub label: usize,
    low: Mat,
    high: Mat,
    validity: Vec<bool>,
}

impl FeatureBag {
    /// Builds a bag, L2-normalizing every real row. Invalid high rows must be
    /// exactly zero.
    pub fn new(bag_id: impl Into<String>, label: usize, mut low: Mat, mut high: Mat, validity: Vec<bool>) -> Result<Self> {
        let bag_id = bag_id.into();
        ensure!(low.nrows() > 0, Argument, "bag {bag_id} has no low-scale patches");
        ensure!(
            high.nrows() == GRID * low.nrows(),
            Shape,
            "bag {bag_id}: {} high rows for {} low rows",
            high.nrows(),
            low.nrows()
        );
        ensure!(low.ncols() == high.ncols(), Shape, "bag {bag_id}: feature widths differ");
        ensure!(validity.len() == high.nrows(), Shape, "bag {bag_id}: validity length");
        for (r, row) in high.axis_iter(Axis(0)).enumerate() {
            ensure!(
                validity[r] || row.iter().all(|&x| x == 0.0),
                Argument,
                "bag {bag_id}: padded high row {r} is not zero"
            );
        }
        normalize_rows(&mut low);
        normalize_rows(&mut high);
        Ok(Self {
            bag_id,
            label,
            low,
            high,
            validity,
        })
    }

    pub fn low(&self) -> &Mat {
        &self.low
    }

    pub fn high(&self) -> &Mat {
        &self.high
    }

    pub fn validity(&self) -> &[bool] {
        &self.validity
    }

    pub fn n_low(&self) -> usize {
        self.low.nrows()
    }

    pub fn n_high(&self) -> usize {
        self.high.nrows()
    }

    pub fn dim(&self) -> usize {
        self.low.ncols()
    }

    pub fn valid_high(&self) -> impl Iterator<Item = usize> + '_ {
        self.validity.iter().enumerate().filter_map(|(r, &v)| v.then_some(r))
    }

    /// High rows restricted to valid patches, in ascending original order.
    pub fn valid_high_feats(&self) -> Mat {
        self.high.select(Axis(0), &self.valid_high().collect::<Vec<_>>())
    }
}

/// Class → parent prompts → child prompts, with learnable context banks.
///
/// Prompts are laid out contiguously: parent `o` belongs to class
/// `o / parents_per_class`, and child `s` belongs to parent
/// `s / children_per_parent`.
#[derive(Clone, Debug, PartialEq)]
pub struct TextHierarchy {
    pub num_classes: usize,
    pub parents_per_class: usize,
    pub children_per_parent: usize,
    pub base_parent: Mat,
    pub base_child: Mat,
    pub context_low: Mat,
    pub context_high: Mat,
}

impl TextHierarchy {
    pub fn new(
        num_classes: usize,
        parents_per_class: usize,
        children_per_parent: usize,
        base_parent: Mat,
        base_child: Mat,
        context_low: Mat,
        context_high: Mat,
    ) -> Result<Self> {
        ensure!(
            num_classes > 0 && parents_per_class > 0 && children_per_parent > 0,
            Config,
            "hierarchy sizes must be positive"
        );
        let parents = num_classes * parents_per_class;
        ensure!(
            base_parent.nrows() == parents,
            Shape,
            "{} parent embeddings for {parents} parents",
            base_parent.nrows()
        );
        ensure!(
            base_child.nrows() == parents * children_per_parent,
            Shape,
            "{} child embeddings for {} children",
            base_child.nrows(),
            parents * children_per_parent
        );
        let d = base_parent.ncols();
        for (name, m) in [("base_child", &base_child), ("context_low", &context_low), ("context_high", &context_high)] {
            ensure!(m.ncols() == d, Shape, "{name} has width {}, expected {d}", m.ncols());
        }
        ensure!(context_low.nrows() == context_high.nrows(), Shape, "context banks differ in length");
        Ok(Self {
            num_classes,
            parents_per_class,
            children_per_parent,
            base_parent,
            base_child,
            context_low,
            context_high,
        })
    }

    pub fn num_parents(&self) -> usize {
        self.num_classes * self.parents_per_class
    }

    pub fn num_children(&self) -> usize {
        self.num_parents() * self.children_per_parent
    }

    pub fn base_dim(&self) -> usize {
        self.base_parent.ncols()
    }

    pub fn context_len(&self) -> usize {
        self.context_low.nrows()
    }

    pub fn parent_of_child(&self, s: usize) -> usize {
        s / self.children_per_parent
    }

    pub fn class_of_parent(&self, o: usize) -> usize {
        o / self.parents_per_class
    }

    pub fn class_of_child(&self, s: usize) -> usize {
        self.class_of_parent(self.parent_of_child(s))
    }

    pub fn children_of(&self, o: usize) -> Range<usize> {
        o * self.children_per_parent..(o + 1) * self.children_per_parent
    }

    pub fn parent_classes(&self) -> Vec<usize> {
        (0..self.num_parents()).map(|o| self.class_of_parent(o)).collect()
    }

    pub fn child_parents(&self) -> Vec<usize> {
        (0..self.num_children()).map(|s| self.parent_of_child(s)).collect()
    }

    pub fn child_classes(&self) -> Vec<usize> {
        (0..self.num_children()).map(|s| self.class_of_child(s)).collect()
    }
}

/// Unit-norm text embeddings at both scales.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedTexts {
    pub low: Mat,
    pub high: Mat,
}

/// Stand-in for a frozen text encoder: mean-pools the context tokens together
/// with the prompt's base embedding, then applies a fixed linear projection.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStub {
    /// `D × D_base`
    projection: Mat,
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
pub enum StubKind {
    Identity,
    Random { seed: u64 },
}

impl EncoderStub {
    pub fn from_projection(projection: Mat) -> Self {
        Self { projection }
    }

    pub fn identity(dim: usize) -> Self {
        Self::from_projection(Mat::eye(dim))
    }

    /// Gaussian projection scaled by `1/√D_base`.
    pub fn random(seed: u64, base_dim: usize, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (base_dim as f64).sqrt();
        let projection = Mat::from_shape_simple_fn((dim, base_dim), || {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        });
        Self::from_projection(projection)
    }

    pub fn build(kind: StubKind, base_dim: usize, dim: usize) -> Result<Self> {
        match kind {
            StubKind::Identity => {
                ensure!(base_dim == dim, Config, "identity stub needs D_base = D ({base_dim} vs {dim})");
                Ok(Self::identity(dim))
            }
            StubKind::Random { seed } => Ok(Self::random(seed, base_dim, dim)),
        }
    }

    pub fn projection(&self) -> &Mat {
        &self.projection
    }

    pub fn out_dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.projection.ncols()
    }

    /// Encodes one prompt set on `tape`; `context` is the `L × D_base` token
    /// bank shared by every prompt in `base`.
    pub fn encode_on_tape(&self, tape: &mut Tape, context: Var, base: &Mat) -> Result<Var> {
        let ctx = tape.value(context);
        ensure!(
            ctx.ncols() == self.in_dim() && base.ncols() == self.in_dim(),
            Config,
            "encoder expects width {}, got context {} / base {}",
            self.in_dim(),
            ctx.ncols(),
            base.ncols()
        );
        let tokens = ctx.nrows() + 1;
        let ctx_sum = tape.col_sum(context);
        let base = tape.leaf(base.clone());
        let pooled = tape.add_row(base, ctx_sum);
        let pooled = tape.scale(pooled, 1.0 / tokens as f64);
        let proj = tape.leaf(self.projection.clone());
        let out = tape.matmul_nt(pooled, proj);
        Ok(tape.row_normalize(out))
    }
}

/// Tape handles for both text scales, plus the context leaves they came from.
#[derive(Clone, Copy, Debug)]
pub struct TextVars {
    pub context_low: Var,
    pub context_high: Var,
    pub low: Var,
    pub high: Var,
}

pub fn encode_texts_on_tape(tape: &mut Tape, h: &TextHierarchy, stub: &EncoderStub) -> Result<TextVars> {
    let context_low = tape.leaf(h.context_low.clone());
    let context_high = tape.leaf(h.context_high.clone());
    let low = stub.encode_on_tape(tape, context_low, &h.base_parent)?;
    let high = stub.encode_on_tape(tape, context_high, &h.base_child)?;
    Ok(TextVars {
        context_low,
        context_high,
        low,
        high,
    })
}

pub fn encode_texts(h: &TextHierarchy, stub: &EncoderStub) -> Result<EncodedTexts> {
    let mut tape = Tape::new();
    let vars = encode_texts_on_tape(&mut tape, h, stub)?;
    Ok(EncodedTexts {
        low: tape.value(vars.low).clone(),
        high: tape.value(vars.high).clone(),
    })
}

/// A full dataset: bags, their shared text hierarchy, and the encoder stub.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub bags: Vec<FeatureBag>,
    pub texts: TextHierarchy,
    pub stub: EncoderStub,
    pub stub_kind: StubKind,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.texts.num_classes
    }

    pub fn dim(&self) -> usize {
        self.stub.out_dim()
    }

    pub fn validate(&self) -> Result<()> {
        for bag in &self.bags {
            ensure!(bag.dim() == self.dim(), Shape, "bag {} has width {}", bag.bag_id, bag.dim());
            ensure!(
                bag.label < self.num_classes(),
                Argument,
                "bag {} label {} out of range",
                bag.bag_id,
                bag.label
            );
        }
        ensure!(self.stub.in_dim() == self.texts.base_dim(), Config, "stub/base width mismatch");
        Ok(())
    }
}
