//! Relation-aware message passing over an [`HHGraph`].
//!
//! Each layer sums an intra-scale part (a GraphSAGE mean aggregator with
//! relation-specific weights) and a hierarchical part (modality-scale
//! attention by default, or one of its ablation variants). A ReLU follows
//! every layer except the last. All weights act on row vectors as `h · Wᵀ`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Neighbors, Tape, Var};
use crate::error::{ensure, Result};
use crate::hhgraph::{HHGraph, Relation};

pub const DEFAULT_LAYERS: usize = 2;
pub const DEFAULT_HEADS: usize = 2;

/// Hierarchical aggregator choice.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum HierAggregator {
    /// Relation-specific projections plus scale embeddings.
    #[default]
    Msa,
    /// Shared projections, scale embeddings kept.
    Saa,
    /// Relation-specific projections, no scale embeddings.
    Maa,
    /// Shared projections, no scale embeddings.
    Attn,
    /// GraphSAGE mean aggregation over hierarchical edges.
    Sage,
}

impl HierAggregator {
    pub const ALL: [HierAggregator; 5] = [Self::Msa, Self::Saa, Self::Maa, Self::Attn, Self::Sage];

    fn uses_scale(self) -> bool {
        matches!(self, Self::Msa | Self::Saa)
    }

    fn shared_weights(self) -> bool {
        matches!(self, Self::Saa | Self::Attn)
    }
}

impl std::str::FromStr for HierAggregator {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_uppercase().as_str() {
            "MSA" => Self::Msa,
            "SAA" => Self::Saa,
            "MAA" => Self::Maa,
            "ATTN" => Self::Attn,
            "SAGE" => Self::Sage,
            other => return Err(crate::error::Error::Argument(format!("unknown aggregator {other}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SageWeights {
    pub w_self: Mat,
    pub w_neigh: Mat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttnWeights {
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub intra_low: SageWeights,
    pub intra_high: SageWeights,
    pub msa_img: AttnWeights,
    pub msa_text: AttnWeights,
    /// Used by the shared-weight variants.
    pub attn_shared: AttnWeights,
    /// Used by the SAGE variant.
    pub sage_img: SageWeights,
    pub sage_text: SageWeights,
}

/// Initialization: each matrix is `identity_gain · I + N(0, std²)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GnnInit {
    pub seed: u64,
    pub identity_gain: f64,
    pub std: f64,
    pub scale_std: f64,
}

impl Default for GnnInit {
    fn default() -> Self {
        Self {
            seed: 0,
            identity_gain: 1.0,
            std: 0.02,
            scale_std: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GnnParams {
    pub layers: Vec<LayerParams>,
    /// `1 × D`, shared by every layer and both modalities.
    pub scale_low: Mat,
    pub scale_high: Mat,
    pub heads: usize,
}

impl GnnParams {
    pub fn new(dim: usize, layers: usize, heads: usize, init: GnnInit) -> Result<Self> {
        ensure!(heads > 0 && dim.is_multiple_of(heads), Config, "{heads} heads do not divide width {dim}");
        ensure!(layers > 0, Config, "need at least one layer");
        let mut rng = ChaCha8Rng::seed_from_u64(init.seed);
        let normal = Normal::new(0.0, init.std.max(0.0)).map_err(|e| crate::error::Error::Config(e.to_string()))?;
        let mut mat = |gain: f64| -> Mat {
            let mut m = Mat::eye(dim) * gain;
            m.mapv_inplace(|x| x + normal.sample(&mut rng));
            m
        };
        let g = init.identity_gain;
        let sage = |mat: &mut dyn FnMut(f64) -> Mat| SageWeights {
            w_self: mat(g),
            w_neigh: mat(g),
        };
        let mut layer_list = Vec::with_capacity(layers);
        for _ in 0..layers {
            let intra_low = sage(&mut mat);
            let intra_high = sage(&mut mat);
            let attn = |mat: &mut dyn FnMut(f64) -> Mat| AttnWeights {
                wq: mat(g),
                wk: mat(g),
                wv: mat(g),
            };
            let msa_img = attn(&mut mat);
            let msa_text = attn(&mut mat);
            let attn_shared = attn(&mut mat);
            layer_list.push(LayerParams {
                intra_low,
                intra_high,
                msa_img,
                msa_text,
                attn_shared,
                sage_img: sage(&mut mat),
                sage_text: sage(&mut mat),
            });
        }
        let scale = Normal::new(0.0, init.scale_std.max(0.0)).map_err(|e| crate::error::Error::Config(e.to_string()))?;
        let scale_low = Mat::from_shape_simple_fn((1, dim), || scale.sample(&mut rng));
        let scale_high = Mat::from_shape_simple_fn((1, dim), || scale.sample(&mut rng));
        Ok(Self {
            layers: layer_list,
            scale_low,
            scale_high,
            heads,
        })
    }

    pub fn dim(&self) -> usize {
        self.scale_low.ncols()
    }

    /// Every tensor with a stable name, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Mat)> {
        let mut out = vec![("scale_low".to_owned(), &self.scale_low), ("scale_high".to_owned(), &self.scale_high)];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, m) in layer_tensors(l) {
                out.push((format!("layer{i}.{name}"), m));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let mut out = vec![
            ("scale_low".to_owned(), &mut self.scale_low),
            ("scale_high".to_owned(), &mut self.scale_high),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (name, m) in layer_tensors_mut(l) {
                out.push((format!("layer{i}.{name}"), m));
            }
        }
        out
    }
}

macro_rules! layer_fields {
    ($l:expr, $($r:tt)*) => {
        vec![
            ("intra_low.w_self", $($r)* $l.intra_low.w_self),
            ("intra_low.w_neigh", $($r)* $l.intra_low.w_neigh),
            ("intra_high.w_self", $($r)* $l.intra_high.w_self),
            ("intra_high.w_neigh", $($r)* $l.intra_high.w_neigh),
            ("msa_img.wq", $($r)* $l.msa_img.wq),
            ("msa_img.wk", $($r)* $l.msa_img.wk),
            ("msa_img.wv", $($r)* $l.msa_img.wv),
            ("msa_text.wq", $($r)* $l.msa_text.wq),
            ("msa_text.wk", $($r)* $l.msa_text.wk),
            ("msa_text.wv", $($r)* $l.msa_text.wv),
            ("attn_shared.wq", $($r)* $l.attn_shared.wq),
            ("attn_shared.wk", $($r)* $l.attn_shared.wk),
            ("attn_shared.wv", $($r)* $l.attn_shared.wv),
            ("sage_img.w_self", $($r)* $l.sage_img.w_self),
            ("sage_img.w_neigh", $($r)* $l.sage_img.w_neigh),
            ("sage_text.w_self", $($r)* $l.sage_text.w_self),
            ("sage_text.w_neigh", $($r)* $l.sage_text.w_neigh),
        ]
    };
}

fn layer_tensors(l: &LayerParams) -> Vec<(&'static str, &Mat)> {
    layer_fields!(l, &)
}

fn layer_tensors_mut(l: &mut LayerParams) -> Vec<(&'static str, &mut Mat)> {
    layer_fields!(l, &mut)
}

/// Node states per type.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeStates {
    pub img_low: Mat,
    pub img_high: Mat,
    pub text_low: Mat,
    pub text_high: Mat,
}

#[derive(Clone, Copy, Debug)]
pub struct NodeVars {
    pub img_low: Var,
    pub img_high: Var,
    pub text_low: Var,
    pub text_high: Var,
}

impl NodeVars {
    pub fn leaves(tape: &mut Tape, s: &NodeStates) -> Self {
        Self {
            img_low: tape.leaf(s.img_low.clone()),
            img_high: tape.leaf(s.img_high.clone()),
            text_low: tape.leaf(s.text_low.clone()),
            text_high: tape.leaf(s.text_high.clone()),
        }
    }

    pub fn values(&self, tape: &Tape) -> NodeStates {
        NodeStates {
            img_low: tape.value(self.img_low).clone(),
            img_high: tape.value(self.img_high).clone(),
            text_low: tape.value(self.text_low).clone(),
            text_high: tape.value(self.text_high).clone(),
        }
    }
}

impl NodeStates {
    pub fn from_graph(g: &HHGraph) -> Self {
        Self {
            img_low: g.img_low.clone(),
            img_high: g.img_high.clone(),
            text_low: g.text_low.clone(),
            text_high: g.text_high.clone(),
        }
    }
}

/// Tape leaves for every tensor of [`GnnParams`], in `tensors()` order.
pub struct GnnVars {
    pub vars: Vec<Var>,
    layers: usize,
}

const PER_LAYER: usize = 17;

impl GnnVars {
    pub fn register(tape: &mut Tape, p: &GnnParams) -> Self {
        let vars = p.tensors().into_iter().map(|(_, m)| tape.leaf(m.clone())).collect();
        Self {
            vars,
            layers: p.layers.len(),
        }
    }

    fn scale_low(&self) -> Var {
        self.vars[0]
    }

    fn scale_high(&self) -> Var {
        self.vars[1]
    }

    fn layer(&self, i: usize) -> LayerVars<'_> {
        assert!(i < self.layers);
        LayerVars(&self.vars[2 + i * PER_LAYER..2 + (i + 1) * PER_LAYER])
    }
}

struct LayerVars<'a>(&'a [Var]);

#[derive(Clone, Copy)]
struct SageVars {
    w_self: Var,
    w_neigh: Var,
}

#[derive(Clone, Copy)]
struct AttnVars {
    wq: Var,
    wk: Var,
    wv: Var,
}

impl LayerVars<'_> {
    fn sage(&self, at: usize) -> SageVars {
        SageVars {
            w_self: self.0[at],
            w_neigh: self.0[at + 1],
        }
    }

    fn attn(&self, at: usize) -> AttnVars {
        AttnVars {
            wq: self.0[at],
            wk: self.0[at + 1],
            wv: self.0[at + 2],
        }
    }

    fn intra(&self, rel: Relation) -> SageVars {
        match rel {
            Relation::IntraLow => self.sage(0),
            Relation::IntraHigh => self.sage(2),
            _ => unreachable!(),
        }
    }

    fn msa(&self, rel: Relation) -> AttnVars {
        match rel {
            Relation::HierImg => self.attn(4),
            Relation::HierText => self.attn(7),
            _ => unreachable!(),
        }
    }

    fn shared(&self) -> AttnVars {
        self.attn(10)
    }

    fn hier_sage(&self, rel: Relation) -> SageVars {
        match rel {
            Relation::HierImg => self.sage(13),
            Relation::HierText => self.sage(15),
            _ => unreachable!(),
        }
    }
}

/// Precomputed adjacency for message passing.
pub struct Structure {
    adj: Vec<(Relation, Neighbors, Neighbors)>,
}

impl Structure {
    pub fn of(g: &HHGraph) -> Self {
        Self {
            adj: Relation::ALL
                .into_iter()
                .map(|r| {
                    let (f, b) = g.adjacency(r);
                    (r, f, b)
                })
                .collect(),
        }
    }

    fn get(&self, rel: Relation) -> (&Neighbors, &Neighbors) {
        let (_, f, b) = self.adj.iter().find(|(r, _, _)| *r == rel).expect("all relations present");
        (f, b)
    }
}

fn endpoints(h: &NodeVars, rel: Relation) -> (Var, Var) {
    match rel {
        Relation::IntraLow => (h.img_low, h.text_low),
        Relation::IntraHigh => (h.img_high, h.text_high),
        Relation::HierImg => (h.img_low, h.img_high),
        Relation::HierText => (h.text_low, h.text_high),
    }
}

/// `W_self h_v + W_neigh · mean_{u∈N(v)} h_u` for both endpoint types.
fn sage_pair(tape: &mut Tape, w: SageVars, src: Var, dst: Var, fwd: &Neighbors, back: &Neighbors) -> (Var, Var) {
    let one = |tape: &mut Tape, x: Var, other: Var, nbrs: &Neighbors| {
        let own = tape.matmul_nt(x, w.w_self);
        let mean = tape.neighbor_mean(nbrs.clone(), other);
        let msg = tape.matmul_nt(mean, w.w_neigh);
        tape.add(own, msg)
    };
    let a = one(tape, src, dst, fwd);
    let b = one(tape, dst, src, back);
    (a, b)
}

/// `q_v + Σ β_vu v_u` for both endpoint types of a hierarchical relation.
/// The source type of every hierarchical relation is the low scale.
#[allow(clippy::too_many_arguments)]
fn attn_pair(
    tape: &mut Tape,
    w: AttnVars,
    scales: Option<(Var, Var)>,
    low: Var,
    high: Var,
    fwd: &Neighbors,
    back: &Neighbors,
    heads: usize,
) -> (Var, Var) {
    let (xl, xh) = match scales {
        Some((sl, sh)) => (tape.add_row(low, sl), tape.add_row(high, sh)),
        None => (low, high),
    };
    let project = |tape: &mut Tape, x: Var| (tape.matmul_nt(x, w.wq), tape.matmul_nt(x, w.wk), tape.matmul_nt(x, w.wv));
    let (ql, kl, vl) = project(tape, xl);
    let (qh, kh, vh) = project(tape, xh);
    let al = tape.attention(ql, kh, vh, fwd.clone(), heads);
    let ah = tape.attention(qh, kl, vl, back.clone(), heads);
    (tape.add(ql, al), tape.add(qh, ah))
}

fn intra_on_tape(tape: &mut Tape, st: &Structure, lv: &LayerVars, h: &NodeVars) -> NodeVars {
    let mut out = *h;
    for rel in [Relation::IntraLow, Relation::IntraHigh] {
        let (src, dst) = endpoints(h, rel);
        let (f, b) = st.get(rel);
        let (a, c) = sage_pair(tape, lv.intra(rel), src, dst, f, b);
        // each node type takes part in exactly one intra relation, so the
        // mean over relations is that relation's output
        match rel {
            Relation::IntraLow => (out.img_low, out.text_low) = (a, c),
            _ => (out.img_high, out.text_high) = (a, c),
        }
    }
    out
}

fn hier_on_tape(
    tape: &mut Tape,
    st: &Structure,
    lv: &LayerVars,
    scales: (Var, Var),
    h: &NodeVars,
    variant: HierAggregator,
    heads: usize,
) -> NodeVars {
    let mut out = *h;
    for rel in [Relation::HierImg, Relation::HierText] {
        let (low, high) = endpoints(h, rel);
        let (f, b) = st.get(rel);
        let (a, c) = if variant == HierAggregator::Sage {
            sage_pair(tape, lv.hier_sage(rel), low, high, f, b)
        } else {
            let w = if variant.shared_weights() { lv.shared() } else { lv.msa(rel) };
            let s = variant.uses_scale().then_some(scales);
            attn_pair(tape, w, s, low, high, f, b, heads)
        };
        match rel {
            Relation::HierImg => (out.img_low, out.img_high) = (a, c),
            _ => (out.text_low, out.text_high) = (a, c),
        }
    }
    out
}

fn add_states(tape: &mut Tape, a: &NodeVars, b: &NodeVars, relu: bool) -> NodeVars {
    let mut f = |x: Var, y: Var| {
        let s = tape.add(x, y);
        if relu {
            tape.relu(s)
        } else {
            s
        }
    };
    NodeVars {
        img_low: f(a.img_low, b.img_low),
        img_high: f(a.img_high, b.img_high),
        text_low: f(a.text_low, b.text_low),
        text_high: f(a.text_high, b.text_high),
    }
}

/// Runs every layer on `tape`, starting from `input`.
pub fn forward_on_tape(
    tape: &mut Tape,
    st: &Structure,
    params: &GnnVars,
    heads: usize,
    input: NodeVars,
    variant: HierAggregator,
) -> NodeVars {
    let scales = (params.scale_low(), params.scale_high());
    let mut h = input;
    for i in 0..params.layers {
        let lv = params.layer(i);
        let intra = intra_on_tape(tape, st, &lv, &h);
        let hier = hier_on_tape(tape, st, &lv, scales, &h, variant, heads);
        h = add_states(tape, &intra, &hier, i + 1 < params.layers);
    }
    h
}

fn check_graph(g: &HHGraph, params: &GnnParams) -> Result<()> {
    for m in [&g.img_low, &g.img_high, &g.text_low, &g.text_high] {
        ensure!(
            m.ncols() == params.dim(),
            Shape,
            "node width {} vs parameter width {}",
            m.ncols(),
            params.dim()
        );
    }
    Ok(())
}

/// Full forward pass from the graph's own node features.
pub fn forward(g: &HHGraph, params: &GnnParams, variant: HierAggregator) -> Result<NodeStates> {
    check_graph(g, params)?;
    let mut tape = Tape::new();
    let pv = GnnVars::register(&mut tape, params);
    let input = NodeVars::leaves(&mut tape, &NodeStates::from_graph(g));
    let out = forward_on_tape(&mut tape, &Structure::of(g), &pv, params.heads, input, variant);
    Ok(out.values(&tape))
}

/// One intra-scale aggregation step of layer `layer` for `rel`; returns the
/// new states of its `(source, destination)` node types.
pub fn intra_aggregate(g: &HHGraph, states: &NodeStates, params: &GnnParams, layer: usize, rel: Relation) -> Result<(Mat, Mat)> {
    ensure!(rel.is_intra(), Argument, "{rel:?} is not an intra-scale relation");
    ensure!(layer < params.layers.len(), Argument, "layer {layer} out of range");
    let mut tape = Tape::new();
    let pv = GnnVars::register(&mut tape, params);
    let h = NodeVars::leaves(&mut tape, states);
    let (src, dst) = endpoints(&h, rel);
    let st = Structure::of(g);
    let (f, b) = st.get(rel);
    let (a, c) = sage_pair(&mut tape, pv.layer(layer).intra(rel), src, dst, f, b);
    Ok((tape.value(a).clone(), tape.value(c).clone()))
}

/// One hierarchical aggregation step; returns `(low-scale, high-scale)` states.
pub fn hier_aggregate(
    g: &HHGraph,
    states: &NodeStates,
    params: &GnnParams,
    layer: usize,
    rel: Relation,
    variant: HierAggregator,
) -> Result<(Mat, Mat)> {
    ensure!(!rel.is_intra(), Argument, "{rel:?} is not a hierarchical relation");
    ensure!(layer < params.layers.len(), Argument, "layer {layer} out of range");
    let mut tape = Tape::new();
    let pv = GnnVars::register(&mut tape, params);
    let h = NodeVars::leaves(&mut tape, states);
    let out = hier_on_tape(
        &mut tape,
        &Structure::of(g),
        &pv.layer(layer),
        (pv.scale_low(), pv.scale_high()),
        &h,
        variant,
        params.heads,
    );
    let (l, hh) = endpoints(&out, rel);
    Ok((tape.value(l).clone(), tape.value(hh).clone()))
}
