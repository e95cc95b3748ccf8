//! Patch–text logits, cross-entropy, and the hierarchical text contrastive loss.

use std::sync::Arc;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape, Var};
use crate::error::{ensure, Result};

/// Logit scale of the default encoder.
pub const GAMMA_QUILTNET: f64 = 4.6052;
pub const GAMMA_PLIP: f64 = 4.5871;
pub const GAMMA_CONCH: f64 = 4.0315;
pub const TOPK_LOW: usize = 2;
pub const TOPK_HIGH: usize = 100;
pub const DEFAULT_LAMBDA: f64 = 0.5;

/// One retained `(patch, text, score)` entry of a class's top-k pool.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Contribution {
    pub patch: usize,
    pub text: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogitsBundle {
    pub low: Array1<f64>,
    pub high: Array1<f64>,
    pub fused: Array1<f64>,
    /// Per class, the low-scale top-k entries.
    pub low_top: Vec<Vec<Contribution>>,
    pub high_top: Vec<Vec<Contribution>>,
}

/// For every class, the `k` largest entries of `scores` over that class's
/// columns. Ties break toward the smaller `(patch, text)` pair.
pub fn select_topk(scores: &Mat, text_class: &[usize], num_classes: usize, k: usize) -> Result<Vec<Vec<Contribution>>> {
    ensure!(k >= 1, Config, "top-k must be at least 1");
    ensure!(
        scores.ncols() == text_class.len(),
        Shape,
        "{} score columns for {} texts",
        scores.ncols(),
        text_class.len()
    );
    let mut out = vec![Vec::new(); num_classes];
    for (c, pool) in out.iter_mut().enumerate() {
        let cols: Vec<usize> = text_class.iter().enumerate().filter_map(|(j, &cl)| (cl == c).then_some(j)).collect();
        ensure!(!cols.is_empty(), Config, "class {c} has no text prompts");
        let mut all: Vec<Contribution> = (0..scores.nrows())
            .flat_map(|p| {
                cols.iter().map(move |&t| Contribution {
                    patch: p,
                    text: t,
                    score: scores[[p, t]],
                })
            })
            .collect();
        all.sort_by(|a, b| b.score.total_cmp(&a.score).then((a.patch, a.text).cmp(&(b.patch, b.text))));
        all.truncate(k);
        *pool = all;
    }
    Ok(out)
}

/// `γ · mean(top-k cosine scores)` per class, on the tape. Rows of `x` and
/// `t` are renormalized before scoring.
pub fn class_logits_on_tape(
    tape: &mut Tape,
    x: Var,
    t: Var,
    text_class: &[usize],
    num_classes: usize,
    k: usize,
    gamma: f64,
) -> Result<(Var, Vec<Vec<Contribution>>)> {
    ensure!(
        tape.value(x).ncols() == tape.value(t).ncols(),
        Shape,
        "patch width {} vs text width {}",
        tape.value(x).ncols(),
        tape.value(t).ncols()
    );
    let xn = tape.row_normalize(x);
    let tn = tape.row_normalize(t);
    let s = tape.matmul_nt(xn, tn);
    let top = select_topk(tape.value(s), text_class, num_classes, k)?;
    let picks = top.iter().map(|p| p.iter().map(|c| (c.patch, c.text)).collect()).collect();
    let pooled = tape.topk_mean(s, picks);
    Ok((tape.scale(pooled, gamma), top))
}

pub fn class_logits(x: &Mat, t: &Mat, text_class: &[usize], num_classes: usize, k: usize, gamma: f64) -> Result<Array1<f64>> {
    let mut tape = Tape::new();
    let (xv, tv) = (tape.leaf(x.clone()), tape.leaf(t.clone()));
    let (l, _) = class_logits_on_tape(&mut tape, xv, tv, text_class, num_classes, k, gamma)?;
    Ok(tape.value(l).row(0).to_owned())
}

/// Fused logits and `-log softmax(fused)[label]`.
pub fn fuse_and_ce(low: &Array1<f64>, high: &Array1<f64>, label: usize) -> Result<(Array1<f64>, f64)> {
    ensure!(low.len() == high.len(), Shape, "logit lengths {} vs {}", low.len(), high.len());
    ensure!(label < low.len(), Argument, "label {label} outside {} classes", low.len());
    let fused = low + high;
    let ce = -crate::autograd::log_softmax_at(fused.iter().copied(), label);
    Ok((fused, ce))
}

pub fn fuse_and_ce_on_tape(tape: &mut Tape, low: Var, high: Var, label: usize) -> Result<(Var, Var)> {
    let c = tape.value(low).ncols();
    ensure!(c == tape.value(high).ncols(), Shape, "logit lengths differ");
    ensure!(label < c, Argument, "label {label} outside {c} classes");
    let fused = tape.add(low, high);
    let ce = tape.softmax_ce(fused, label);
    Ok((fused, ce))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum HtclVariant {
    /// Child anchors; positives are every parent of the same class.
    #[default]
    ClassWise,
    /// Per-parent mean of the children as anchor; positive is that parent.
    ShareParent,
    /// Child anchors; positive is the child's own parent.
    InstanceWise,
}

impl HtclVariant {
    pub const ALL: [HtclVariant; 3] = [Self::ClassWise, Self::ShareParent, Self::InstanceWise];
}

impl std::str::FromStr for HtclVariant {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "CLASS_WISE" => Self::ClassWise,
            "SHARE_PARENT" => Self::ShareParent,
            "INSTANCE_WISE" => Self::InstanceWise,
            other => return Err(crate::error::Error::Argument(format!("unknown HTCL variant {other}"))),
        })
    }
}

/// Parent/child bookkeeping for the contrastive loss.
#[derive(Clone, Debug, PartialEq)]
pub struct TextMaps {
    pub child_parent: Vec<usize>,
    pub parent_class: Vec<usize>,
}

impl TextMaps {
    pub fn of(h: &crate::datamodel::TextHierarchy) -> Self {
        Self {
            child_parent: h.child_parents(),
            parent_class: h.parent_classes(),
        }
    }

    pub fn child_class(&self) -> Vec<usize> {
        self.child_parent.iter().map(|&o| self.parent_class[o]).collect()
    }
}

/// Pair weights `(positive, negative)`, each `anchors × parents`, already
/// divided by the set sizes and the anchor count.
fn pair_weights(maps: &TextMaps, variant: HtclVariant) -> Result<(Mat, Mat)> {
    let parents = maps.parent_class.len();
    let anchor_positive: Vec<Box<dyn Fn(usize) -> bool + '_>> = match variant {
        HtclVariant::ClassWise => maps
            .child_parent
            .iter()
            .map(|&p| {
                let cls = maps.parent_class[p];
                Box::new(move |o: usize| maps.parent_class[o] == cls) as Box<dyn Fn(usize) -> bool>
            })
            .collect(),
        HtclVariant::InstanceWise => maps
            .child_parent
            .iter()
            .map(|&p| Box::new(move |o: usize| o == p) as Box<dyn Fn(usize) -> bool>)
            .collect(),
        HtclVariant::ShareParent => (0..parents)
            .map(|p| Box::new(move |o: usize| o == p) as Box<dyn Fn(usize) -> bool>)
            .collect(),
    };
    let anchors = anchor_positive.len();
    ensure!(anchors > 0, Config, "no contrastive anchors");
    let mut pos = Mat::zeros((anchors, parents));
    let mut neg = Mat::zeros((anchors, parents));
    for (a, is_pos) in anchor_positive.iter().enumerate() {
        let np = (0..parents).filter(|&o| is_pos(o)).count();
        let nn = parents - np;
        ensure!(np > 0 && nn > 0, Config, "anchor {a} has an empty positive or negative set");
        for o in 0..parents {
            if is_pos(o) {
                pos[[a, o]] = 1.0 / (np * anchors) as f64;
            } else {
                neg[[a, o]] = 1.0 / (nn * anchors) as f64;
            }
        }
    }
    Ok((pos, neg))
}

/// Mean over anchors of `−mean_P log σ(sim) − mean_N log σ(−sim)`.
pub fn htcl_on_tape(tape: &mut Tape, t_low: Var, t_high: Var, maps: &TextMaps, variant: HtclVariant) -> Result<Var> {
    let (tl, th) = (tape.value(t_low), tape.value(t_high));
    ensure!(tl.nrows() == maps.parent_class.len(), Shape, "{} low texts vs map", tl.nrows());
    ensure!(th.nrows() == maps.child_parent.len(), Shape, "{} high texts vs map", th.nrows());
    ensure!(tl.ncols() == th.ncols(), Shape, "text widths differ");
    let (pos, neg) = pair_weights(maps, variant)?;
    let anchors = match variant {
        HtclVariant::ShareParent => {
            let parents = maps.parent_class.len();
            let mut avg = Mat::zeros((parents, maps.child_parent.len()));
            for (s, &p) in maps.child_parent.iter().enumerate() {
                avg[[p, s]] = 1.0;
            }
            for mut row in avg.rows_mut() {
                let n = row.sum();
                ensure!(n > 0.0, Config, "a parent has no children");
                row /= n;
            }
            tape.const_left(Arc::new(avg), t_high)
        }
        _ => t_high,
    };
    let an = tape.row_normalize(anchors);
    let pn = tape.row_normalize(t_low);
    let sim = tape.matmul_nt(an, pn);
    // −log σ(x) = softplus(−x), −log σ(−x) = softplus(x)
    let neg_sim = tape.scale(sim, -1.0);
    let sp_pos = tape.softplus(neg_sim);
    let sp_neg = tape.softplus(sim);
    let wp = tape.mul_const(sp_pos, Arc::new(pos));
    let wn = tape.mul_const(sp_neg, Arc::new(neg));
    let lp = tape.sum(wp);
    let ln = tape.sum(wn);
    Ok(tape.add(lp, ln))
}

pub fn htcl(t_low: &Mat, t_high: &Mat, maps: &TextMaps, variant: HtclVariant) -> Result<f64> {
    let mut tape = Tape::new();
    let (l, h) = (tape.leaf(t_low.clone()), tape.leaf(t_high.clone()));
    let out = htcl_on_tape(&mut tape, l, h, maps, variant)?;
    Ok(tape.scalar(out))
}

pub fn total_loss(ce: f64, htcl: f64, lambda: f64) -> f64 {
    ce + lambda * htcl
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::sigmoid;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn maps(c: usize, o: usize, k: usize) -> TextMaps {
        TextMaps {
            child_parent: (0..c * o * k).map(|s| s / k).collect(),
            parent_class: (0..c * o).map(|p| p / o).collect(),
        }
    }

    #[test]
    fn single_patch_logits_are_scaled_similarity() {
        let x = array![[1.0, 0.0]];
        let t = array![[0.6, 0.8], [-1.0, 0.0]];
        let l = class_logits(&x, &t, &[0, 1], 2, 1, 2.0).unwrap();
        assert!((l[0] - 1.2).abs() < 1e-12 && (l[1] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn weak_patch_does_not_move_logits() {
        let x = array![[1.0, 0.0], [0.8, 0.6]];
        let t = array![[1.0, 0.0], [0.0, 1.0]];
        let before = class_logits(&x, &t, &[0, 1], 2, 1, 1.0).unwrap();
        let x2 = array![[1.0, 0.0], [0.8, 0.6], [-0.6, -0.8]];
        let after = class_logits(&x2, &t, &[0, 1], 2, 1, 1.0).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn oversized_k_averages_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Mat::from_shape_simple_fn((3, 4), || rng.random_range(-1.0..1.0));
        let t = Mat::from_shape_simple_fn((4, 4), || rng.random_range(-1.0..1.0));
        let classes = [0, 1, 1, 0];
        let l = class_logits(&x, &t, &classes, 2, 1000, 3.0).unwrap();
        // brute force: normalize, score, average every class column
        let norm = |m: &Mat| {
            let mut m = m.clone();
            crate::datamodel::normalize_rows(&mut m);
            m
        };
        let s = norm(&x).dot(&norm(&t).t());
        for c in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|p| (0..4).filter(|&j| classes[j] == c).map(move |j| (p, j)))
                .map(|(p, j)| s[[p, j]])
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            assert!((l[c] - 3.0 * mean).abs() < 1e-12);
        }
        assert!(class_logits(&x, &t, &[0, 0, 0, 0], 2, 1, 1.0).is_err());
        assert!(class_logits(&x, &t, &classes, 2, 0, 1.0).is_err());
    }

    #[test]
    fn ce_examples() {
        let (f, ce) = fuse_and_ce(&array![0.3, 0.3], &array![0.1, 0.1], 0).unwrap();
        assert_eq!(f, array![0.4, 0.4]);
        assert!((ce - 2f64.ln()).abs() < 1e-12);
        let low = array![1.5, -0.2, 0.7];
        let (_, ce) = fuse_and_ce(&low, &(-&low), 2).unwrap();
        assert!((ce - 3f64.ln()).abs() < 1e-12);
        // logits (1, 2, 3), label 0: ln(e + e² + e³) − 1 = 2.40760596444438...
        let (_, ce) = fuse_and_ce(&array![1.0, 2.0, 3.0], &array![0.0, 0.0, 0.0], 0).unwrap();
        assert!((ce - 2.407_605_964_444_38).abs() < 1e-12);
        assert!(fuse_and_ce(&low, &low, 3).is_err());
    }

    #[test]
    fn htcl_closed_forms() {
        // orthonormal texts: every parent–child similarity is zero
        let m = maps(2, 1, 2);
        let e = Mat::eye(6);
        let tl = e.slice(ndarray::s![0..2, ..]).to_owned();
        let th = e.slice(ndarray::s![2..6, ..]).to_owned();
        for v in HtclVariant::ALL {
            assert!((htcl(&tl, &th, &m, v).unwrap() - 2.0 * 2f64.ln()).abs() < 1e-12);
        }
        // perfect ±1 similarities
        let m = maps(2, 1, 1);
        let tl = array![[1.0, 0.0], [-1.0, 0.0]];
        let th = array![[2.0, 0.0], [-3.0, 0.0]];
        let want = -2.0 * sigmoid(1.0).ln();
        assert!((htcl(&tl, &th, &m, HtclVariant::ClassWise).unwrap() - want).abs() < 1e-12);
        assert!((want - 0.626_523_375_036_445_6).abs() < 1e-12);
    }

    #[test]
    fn htcl_falls_as_positive_similarity_rises() {
        // parents e1, e2; child 0 rotates from e3 toward e1, child 1 sits on e2,
        // so only child 0's positive similarity changes
        let m = maps(2, 1, 1);
        let tl = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let loss = |theta: f64| {
            let th = array![[theta.cos(), 0.0, theta.sin()], [0.0, 1.0, 0.0]];
            htcl(&tl, &th, &m, HtclVariant::ClassWise).unwrap()
        };
        let mut prev = f64::INFINITY;
        for i in 0..=10 {
            let theta = std::f64::consts::FRAC_PI_2 * (10 - i) as f64 / 10.0;
            let l = loss(theta);
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn variant_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = maps(3, 2, 1);
        let tl = Mat::from_shape_simple_fn((6, 4), || rng.random_range(-1.0..1.0));
        let th = Mat::from_shape_simple_fn((6, 4), || rng.random_range(-1.0..1.0));
        let sp = htcl(&tl, &th, &m, HtclVariant::ShareParent).unwrap();
        let iw = htcl(&tl, &th, &m, HtclVariant::InstanceWise).unwrap();
        assert!((sp - iw).abs() < 1e-12);

        let m = maps(2, 1, 3);
        let th = Mat::from_shape_simple_fn((6, 4), || rng.random_range(-1.0..1.0));
        let tl2 = tl.slice(ndarray::s![0..2, ..]).to_owned();
        let cw = htcl(&tl2, &th, &m, HtclVariant::ClassWise).unwrap();
        let iw = htcl(&tl2, &th, &m, HtclVariant::InstanceWise).unwrap();
        assert!((cw - iw).abs() < 1e-12);
        assert_eq!(pair_weights(&m, HtclVariant::ClassWise).unwrap(), pair_weights(&m, HtclVariant::InstanceWise).unwrap());
    }

    #[test]
    fn single_class_has_no_negatives() {
        let m = maps(1, 2, 2);
        let err = htcl(&Mat::ones((2, 3)), &Mat::ones((4, 3)), &m, HtclVariant::ClassWise).unwrap_err();
        assert!(matches!(err, crate::error::Error::Config(_)));
    }

    #[test]
    fn total_loss_is_affine_in_lambda() {
        assert_eq!(total_loss(1.3, 2.0, 0.0), 1.3);
        assert_eq!(total_loss(1.0, 2.0, 0.5), 2.0);
        let (a, b, c) = (total_loss(0.7, 1.9, 0.0), total_loss(0.7, 1.9, 1.0), total_loss(0.7, 1.9, 2.0));
        assert!(((b - a) - (c - b)).abs() < 1e-15);
    }

    #[test]
    fn variant_names_parse() {
        assert_eq!("share-parent".parse::<HtclVariant>().unwrap(), HtclVariant::ShareParent);
        for v in HtclVariant::ALL {
            let name = serde_json::to_value(v).unwrap();
            assert_eq!(name.as_str().unwrap().parse::<HtclVariant>().unwrap(), v);
        }
    }
}
