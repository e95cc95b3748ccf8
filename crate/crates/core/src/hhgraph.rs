//! The hierarchical heterogeneous graph: four node types, two intra-scale
//! relations driven by the filter masks, and two hierarchical relations that
//! follow patch and prompt parentage.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Neighbors};
use crate::datamodel::{parent_patch, EncodedTexts, FeatureBag};
use crate::error::{ensure, Result};
use crate::tgdf::FilterMasks;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeType {
    ImgLow,
    ImgHigh,
    TextLow,
    TextHigh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    IntraLow,
    IntraHigh,
    HierImg,
    HierText,
}

impl Relation {
    pub const ALL: [Relation; 4] = [Relation::IntraLow, Relation::IntraHigh, Relation::HierImg, Relation::HierText];

    /// `(source type, destination type)` of the stored orientation.
    pub fn endpoints(self) -> (NodeType, NodeType) {
        match self {
            Relation::IntraLow => (NodeType::ImgLow, NodeType::TextLow),
            Relation::IntraHigh => (NodeType::ImgHigh, NodeType::TextHigh),
            Relation::HierImg => (NodeType::ImgLow, NodeType::ImgHigh),
            Relation::HierText => (NodeType::TextLow, NodeType::TextHigh),
        }
    }

    pub fn is_intra(self) -> bool {
        matches!(self, Relation::IntraLow | Relation::IntraHigh)
    }
}

/// Per-relation edge cardinalities.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeCounts {
    pub intra_low: usize,
    pub intra_high: usize,
    pub hier_img: usize,
    pub hier_text: usize,
}

/// Edges are stored once as `(source, destination)` in the orientation given
/// by [`Relation::endpoints`] and are read in both directions.
#[derive(Clone, Debug, PartialEq)]
pub struct HHGraph {
    pub img_low: Mat,
    /// Valid high patches only, in ascending original order.
    pub img_high: Mat,
    pub text_low: Mat,
    pub text_high: Mat,
    /// Compact high-patch index → original flattened index.
    pub high_original: Vec<usize>,
    /// Original flattened index → compact index (None for padded cells).
    pub high_compact: Vec<Option<usize>>,
    edges: BTreeMap<Relation, Vec<(usize, usize)>>,
}

impl HHGraph {
    pub fn edges(&self, rel: Relation) -> &[(usize, usize)] {
        &self.edges[&rel]
    }

    pub fn node_count(&self, t: NodeType) -> usize {
        self.node_feats(t).nrows()
    }

    pub fn node_feats(&self, t: NodeType) -> &Mat {
        match t {
            NodeType::ImgLow => &self.img_low,
            NodeType::ImgHigh => &self.img_high,
            NodeType::TextLow => &self.text_low,
            NodeType::TextHigh => &self.text_high,
        }
    }

    /// Replaces the edge list of one relation.
    pub fn set_edges(&mut self, rel: Relation, edges: Vec<(usize, usize)>) -> Result<()> {
        let (st, dt) = rel.endpoints();
        let (ns, nd) = (self.node_count(st), self.node_count(dt));
        ensure!(
            edges.iter().all(|&(a, b)| a < ns && b < nd),
            Argument,
            "{rel:?} edge outside {ns}×{nd} nodes"
        );
        self.edges.insert(rel, edges);
        Ok(())
    }

    /// Drops every hierarchical edge.
    pub fn without_hier_edges(mut self) -> Self {
        self.edges.insert(Relation::HierImg, Vec::new());
        self.edges.insert(Relation::HierText, Vec::new());
        self
    }

    /// Adjacency lists for one relation: `(for each source node, its
    /// destinations; for each destination node, its sources)`.
    pub fn adjacency(&self, rel: Relation) -> (Neighbors, Neighbors) {
        let (st, dt) = rel.endpoints();
        let mut fwd = vec![Vec::new(); self.node_count(st)];
        let mut back = vec![Vec::new(); self.node_count(dt)];
        for &(a, b) in self.edges(rel) {
            fwd[a].push(b);
            back[b].push(a);
        }
        (Arc::new(fwd), Arc::new(back))
    }

    /// Every stored edge in both directions, as typed `(from, to)` pairs.
    pub fn expanded_edges(&self, rel: Relation) -> Vec<((NodeType, usize), (NodeType, usize))> {
        let (st, dt) = rel.endpoints();
        self.edges(rel)
            .iter()
            .flat_map(|&(a, b)| [((st, a), (dt, b)), ((dt, b), (st, a))])
            .collect()
    }

    pub fn dump(&self) -> GraphDump {
        GraphDump {
            nodes: [NodeType::ImgLow, NodeType::ImgHigh, NodeType::TextLow, NodeType::TextHigh]
                .into_iter()
                .map(|t| (t, self.node_count(t)))
                .collect(),
            edges: self.edges.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphDump {
    pub nodes: BTreeMap<NodeType, usize>,
    pub edges: BTreeMap<Relation, Vec<(usize, usize)>>,
}

pub fn build_hhg(bag: &FeatureBag, texts: &EncodedTexts, child_parent: &[usize], masks: &FilterMasks) -> Result<HHGraph> {
    let (n, r) = (bag.n_low(), bag.n_high());
    let (o, s) = (texts.low.nrows(), texts.high.nrows());
    ensure!(masks.low.dim() == (n, o), Shape, "low mask {:?} vs ({n}, {o})", masks.low.dim());
    ensure!(masks.high.dim() == (r, s), Shape, "high mask {:?} vs ({r}, {s})", masks.high.dim());
    ensure!(child_parent.len() == s, Shape, "{} child parents for {s} child texts", child_parent.len());
    ensure!(child_parent.iter().all(|&p| p < o), Shape, "child parent index out of range");

    let high_original: Vec<usize> = bag.valid_high().collect();
    let mut high_compact = vec![None; r];
    for (c, &orig) in high_original.iter().enumerate() {
        high_compact[orig] = Some(c);
    }

    let intra_low = masks.low.indexed_iter().filter(|(_, &b)| b).map(|(ix, _)| ix).collect();
    let mut intra_high = Vec::new();
    for ((row, col), &b) in masks.high.indexed_iter() {
        if b {
            let c = high_compact[row].ok_or_else(|| {
                crate::error::Error::Argument(format!("high mask selects padded patch {row} in bag {}", bag.bag_id))
            })?;
            intra_high.push((c, col));
        }
    }
    let hier_img = high_original.iter().enumerate().map(|(c, &orig)| (parent_patch(orig), c)).collect();
    let hier_text = child_parent.iter().enumerate().map(|(child, &p)| (p, child)).collect();

    let edges = BTreeMap::from([
        (Relation::IntraLow, intra_low),
        (Relation::IntraHigh, intra_high),
        (Relation::HierImg, hier_img),
        (Relation::HierText, hier_text),
    ]);
    Ok(HHGraph {
        img_low: bag.low().clone(),
        img_high: bag.valid_high_feats(),
        text_low: texts.low.clone(),
        text_high: texts.high.clone(),
        high_original,
        high_compact,
        edges,
    })
}

pub fn edge_counts(g: &HHGraph) -> EdgeCounts {
    EdgeCounts {
        intra_low: g.edges(Relation::IntraLow).len(),
        intra_high: g.edges(Relation::IntraHigh).len(),
        hier_img: g.edges(Relation::HierImg).len(),
        hier_text: g.edges(Relation::HierText).len(),
    }
}
