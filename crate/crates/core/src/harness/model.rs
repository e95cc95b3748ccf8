use ndarray::Array1;

use super::config::RunConfig;
use crate::autograd::{softmax, Mat, Tape, Var};
use crate::datamodel::{encode_texts_on_tape, Dataset, EncodedTexts, EncoderStub, FeatureBag, TextHierarchy};
use crate::error::{ensure, Result};
use crate::hhgnn::{forward_on_tape, GnnInit, GnnParams, GnnVars, NodeStates, NodeVars, Structure};
use crate::hhgraph::{build_hhg, HHGraph};
use crate::objective::{class_logits_on_tape, fuse_and_ce_on_tape, htcl_on_tape, Contribution, LogitsBundle, TextMaps};
use crate::tgdf::{tgdf, FilterMasks};

/// Trainable state: the two context token banks and the graph network.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub texts: TextHierarchy,
    pub stub: EncoderStub,
    pub gnn: GnnParams,
}

/// Everything one bag's forward pass produced.
pub struct Pass {
    pub tape: Tape,
    pub loss: Var,
    pub ce: f64,
    pub htcl: Option<f64>,
    /// Tape handles in `Model::tensors` order.
    pub params: Vec<Var>,
    pub logits: LogitsBundle,
    pub masks: Option<FilterMasks>,
    pub graph: Option<HHGraph>,
    pub encoded: EncodedTexts,
    pub input: NodeStates,
    pub output: NodeStates,
}

impl Pass {
    pub fn probabilities(&self) -> Array1<f64> {
        Array1::from(softmax(self.logits.fused.iter().copied()))
    }
}

impl Model {
    pub fn new(ds: &Dataset, cfg: &RunConfig, seed: u64) -> Result<Self> {
        let t = &ds.texts;
        ensure!(t.num_classes >= 2, Config, "training needs at least two classes");
        ensure!(
            t.parents_per_class == cfg.parents_per_class && t.children_per_parent == cfg.children_per_parent,
            Config,
            "dataset has O={} K={}, config expects O={} K={}",
            t.parents_per_class,
            t.children_per_parent,
            cfg.parents_per_class,
            cfg.children_per_parent
        );
        ensure!(
            t.context_len() == cfg.context_len,
            Config,
            "dataset context length {} differs from configured {}",
            t.context_len(),
            cfg.context_len
        );
        let init = GnnInit {
            seed,
            identity_gain: cfg.init.identity_gain,
            std: cfg.init.std,
            scale_std: cfg.init.scale_std,
        };
        Ok(Self {
            texts: t.clone(),
            stub: ds.stub.clone(),
            gnn: GnnParams::new(ds.dim(), cfg.layers, cfg.heads, init)?,
        })
    }

    pub fn tensors(&self) -> Vec<(String, &Mat)> {
        let mut out = vec![
            ("context_low".to_owned(), &self.texts.context_low),
            ("context_high".to_owned(), &self.texts.context_high),
        ];
        out.extend(self.gnn.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let mut out = vec![
            ("context_low".to_owned(), &mut self.texts.context_low),
            ("context_high".to_owned(), &mut self.texts.context_high),
        ];
        out.extend(self.gnn.tensors_mut());
        out
    }

    /// Filtering masks and graph for `bag` under the module switches; `None`
    /// when message passing is bypassed.
    pub fn graph_for(&self, bag: &FeatureBag, enc: &EncodedTexts, cfg: &RunConfig) -> Result<Option<(FilterMasks, HHGraph)>> {
        if cfg.modules.bypass_gnn() {
            return Ok(None);
        }
        let cp = self.texts.child_parents();
        let masks = if cfg.modules.tgdf {
            tgdf(bag, enc, &cp, cfg.alpha, cfg.tgdf)?
        } else {
            FilterMasks::dense(bag.n_low(), self.texts.num_parents(), bag.validity(), self.texts.num_children())
        };
        let mut g = build_hhg(bag, enc, &cp, &masks)?;
        if !cfg.modules.hhg {
            g = g.without_hier_edges();
        }
        Ok(Some((masks, g)))
    }

    pub fn forward(&self, bag: &FeatureBag, cfg: &RunConfig) -> Result<Pass> {
        ensure!(bag.label < self.texts.num_classes, Argument, "bag {} label out of range", bag.bag_id);
        let mut tape = Tape::new();
        let tv = encode_texts_on_tape(&mut tape, &self.texts, &self.stub)?;
        let gv = GnnVars::register(&mut tape, &self.gnn);
        let mut params = vec![tv.context_low, tv.context_high];
        params.extend(gv.vars.iter().copied());
        let encoded = EncodedTexts {
            low: tape.value(tv.low).clone(),
            high: tape.value(tv.high).clone(),
        };
        let input_states = NodeStates {
            img_low: bag.low().clone(),
            img_high: bag.valid_high_feats(),
            text_low: encoded.low.clone(),
            text_high: encoded.high.clone(),
        };
        let img_low = tape.leaf(input_states.img_low.clone());
        let img_high = tape.leaf(input_states.img_high.clone());
        let input = NodeVars {
            img_low,
            img_high,
            text_low: tv.low,
            text_high: tv.high,
        };
        let built = self.graph_for(bag, &encoded, cfg)?;
        let out = match &built {
            Some((_, g)) => forward_on_tape(&mut tape, &Structure::of(g), &gv, self.gnn.heads, input, cfg.aggregator),
            None => input,
        };

        let k = self.texts.num_classes;
        let (low_class, high_class) = (self.texts.parent_classes(), self.texts.child_classes());
        let (low, low_top) = class_logits_on_tape(&mut tape, out.img_low, out.text_low, &low_class, k, cfg.topk_low, cfg.gamma)?;
        let (high, mut high_top) =
            class_logits_on_tape(&mut tape, out.img_high, out.text_high, &high_class, k, cfg.topk_high, cfg.gamma)?;
        let valid: Vec<usize> = bag.valid_high().collect();
        for c in high_top.iter_mut().flatten() {
            c.patch = valid[c.patch];
        }
        let (fused, ce) = fuse_and_ce_on_tape(&mut tape, low, high, bag.label)?;
        let ce_value = tape.scalar(ce);
        let lambda = cfg.effective_lambda();
        let (loss, htcl) = if lambda > 0.0 {
            let h = htcl_on_tape(&mut tape, out.text_low, out.text_high, &TextMaps::of(&self.texts), cfg.htcl_variant)?;
            let hv = tape.scalar(h);
            let weighted = tape.scale(h, lambda);
            (tape.add(ce, weighted), Some(hv))
        } else {
            (ce, None)
        };
        let row = |v: Var, tape: &Tape| tape.value(v).row(0).to_owned();
        let logits = LogitsBundle {
            low: row(low, &tape),
            high: row(high, &tape),
            fused: row(fused, &tape),
            low_top,
            high_top,
        };
        let output = out.values(&tape);
        let (masks, graph) = built.map_or((None, None), |(m, g)| (Some(m), Some(g)));
        Ok(Pass {
            tape,
            loss,
            ce: ce_value,
            htcl,
            params,
            logits,
            masks,
            graph,
            encoded,
            input: input_states,
            output,
        })
    }
}

/// Expands compact high-patch rows back to all `N·16` positions, zero-filling
/// padded ones.
pub fn expand_high(bag: &FeatureBag, compact: &Mat) -> Mat {
    let mut full = Mat::zeros((bag.n_high(), compact.ncols()));
    for (c, r) in bag.valid_high().enumerate() {
        full.row_mut(r).assign(&compact.row(c));
    }
    full
}

/// The top-k entries of one class, for reporting.
pub fn describe(top: &[Contribution]) -> String {
    top.iter().map(|c| format!("({},{},{:.3})", c.patch, c.text, c.score)).collect::<Vec<_>>().join(" ")
}
