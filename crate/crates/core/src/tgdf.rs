//! Text-guided dynamic filtering: per-text soft thresholding of patch–text
//! similarities, first at the low scale and then, gated by the low-scale
//! result, at the high scale.

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::datamodel::{parent_patch, EncodedTexts, FeatureBag};
use crate::error::{ensure, Result};

pub type Mask = Array2<bool>;

pub const DEFAULT_ALPHA: f64 = 0.5;

/// Slack on the inclusive threshold test. Some columns sit exactly on their
/// threshold in real arithmetic (two patches at `alpha = 1`, constant
/// columns), and rounding must not decide those.
pub const TIE_EPS: f64 = 1e-12;

/// Component switches for the filtering ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TgdfSwitches {
    /// Gate high-scale pairs by the low-scale mask of their parents.
    pub mask_propagation: bool,
    /// Threshold the low-scale similarities; when off every low pair is kept.
    pub low_filter: bool,
}

impl Default for TgdfSwitches {
    fn default() -> Self {
        Self {
            mask_propagation: true,
            low_filter: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterMasks {
    /// `N × (C·O)`
    pub low: Mask,
    /// `R × (C·O·K)`
    pub high: Mask,
    pub alpha: f64,
}

impl FilterMasks {
    /// Masks that keep every pair (invalid high rows excepted).
    pub fn dense(n_low: usize, parents: usize, validity: &[bool], children: usize) -> Self {
        let high = Mask::from_shape_fn((validity.len(), children), |(r, _)| validity[r]);
        Self {
            low: Mask::from_elem((n_low, parents), true),
            high,
            alpha: f64::NAN,
        }
    }

    pub fn nnz_low(&self) -> usize {
        self.low.iter().filter(|&&b| b).count()
    }

    pub fn nnz_high(&self) -> usize {
        self.high.iter().filter(|&&b| b).count()
    }

    pub fn dump(&self, bag_id: &str) -> MaskDump {
        MaskDump {
            bag_id: bag_id.to_owned(),
            alpha: self.alpha,
            low: coords(&self.low),
            high: coords(&self.high),
        }
    }
}

fn coords(m: &Mask) -> Vec<[usize; 2]> {
    m.indexed_iter().filter(|(_, &b)| b).map(|((i, j), _)| [i, j]).collect()
}

/// Sparse coordinate debug dump of one bag's masks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskDump {
    pub bag_id: String,
    pub alpha: f64,
    pub low: Vec<[usize; 2]>,
    pub high: Vec<[usize; 2]>,
}

/// Row-by-row dot products; rows are assumed unit-norm.
pub fn cosine_sim(a: &Mat, b: &Mat) -> Result<Mat> {
    ensure!(
        a.ncols() == b.ncols(),
        Shape,
        "cosine_sim widths differ: {} vs {}",
        a.ncols(),
        b.ncols()
    );
    Ok(a.dot(&b.t()))
}

/// `mean + alpha · popstd` of one column.
///
/// The mean is accumulated as offsets from the first entry, which makes it
/// exact for constant columns (so `std = 0` and every entry is retained).
pub fn column_threshold(col: ArrayView1<f64>, alpha: f64) -> f64 {
    let n = col.len() as f64;
    let x0 = col[0];
    let mean = x0 + col.iter().map(|x| x - x0).sum::<f64>() / n;
    let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    mean + alpha * var.sqrt()
}

fn threshold_columns(s: &Mat, alpha: f64) -> Mask {
    let mut out = Mask::from_elem(s.dim(), false);
    for (j, col) in s.axis_iter(Axis(1)).enumerate() {
        let t = column_threshold(col, alpha);
        for (i, &x) in col.iter().enumerate() {
            out[[i, j]] = x >= t - TIE_EPS;
        }
    }
    out
}

pub fn low_scale_filter(s_low: &Mat, alpha: f64) -> Result<Mask> {
    ensure!(
        s_low.nrows() > 0 && s_low.ncols() > 0,
        Argument,
        "low-scale similarity matrix is empty"
    );
    Ok(threshold_columns(s_low, alpha))
}

/// Stage two. `child_parent[s]` is the parent text of child text `s`.
///
/// Column statistics run over the full masked column, zeros included; a pair
/// survives only if it clears the threshold, its parent pair is retained, and
/// its high patch is real.
pub fn high_scale_filter(
    s_high: &Mat,
    low_mask: &Mask,
    alpha: f64,
    validity: &[bool],
    child_parent: &[usize],
) -> Result<Mask> {
    let (r_count, s_count) = s_high.dim();
    ensure!(validity.len() == r_count, Shape, "validity length {} vs {r_count} rows", validity.len());
    ensure!(child_parent.len() == s_count, Shape, "{} child texts vs {s_count} columns", child_parent.len());
    ensure!(
        r_count == low_mask.nrows() * crate::datamodel::GRID,
        Shape,
        "{r_count} high rows for {} low rows",
        low_mask.nrows()
    );
    ensure!(
        child_parent.iter().all(|&o| o < low_mask.ncols()),
        Shape,
        "child parent index outside {} low texts",
        low_mask.ncols()
    );
    let eligible = Mask::from_shape_fn((r_count, s_count), |(r, s)| low_mask[[parent_patch(r), child_parent[s]]]);
    let masked = Mat::from_shape_fn((r_count, s_count), |(r, s)| {
        if eligible[[r, s]] {
            s_high[[r, s]]
        } else {
            0.0
        }
    });
    let mut out = threshold_columns(&masked, alpha);
    out.zip_mut_with(&eligible, |o, &e| *o &= e);
    for (r, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        if !validity[r] {
            row.fill(false);
        }
    }
    Ok(out)
}

pub fn tgdf(
    bag: &FeatureBag,
    texts: &EncodedTexts,
    child_parent: &[usize],
    alpha: f64,
    switches: TgdfSwitches,
) -> Result<FilterMasks> {
    let s_low = cosine_sim(bag.low(), &texts.low)?;
    let low = if switches.low_filter {
        low_scale_filter(&s_low, alpha)?
    } else {
        Mask::from_elem(s_low.dim(), true)
    };
    let s_high = cosine_sim(bag.high(), &texts.high)?;
    let gate = if switches.mask_propagation {
        low.clone()
    } else {
        Mask::from_elem(low.dim(), true)
    };
    let high = high_scale_filter(&s_high, &gate, alpha, bag.validity(), child_parent)?;
    Ok(FilterMasks { low, high, alpha })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::GRID;
    use crate::error::Error;
    use ndarray::array;

    fn col(xs: &[f64]) -> Mat {
        Mat::from_shape_vec((xs.len(), 1), xs.to_vec()).unwrap()
    }

    fn flags(m: &Mask) -> Vec<u8> {
        m.iter().map(|&b| b as u8).collect()
    }

    #[test]
    fn cosine_examples() {
        let a = array![[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]];
        let b = array![[1.0, 0.0]];
        let s = cosine_sim(&a, &b).unwrap();
        assert_eq!(s.column(0).to_vec(), vec![1.0, 0.0, -1.0]);
        assert!(matches!(cosine_sim(&a, &Mat::ones((1, 3))), Err(Error::Shape(_))));
    }

    #[test]
    fn low_filter_examples() {
        // thresholds computed by exact rational arithmetic:
        // [.1,.2,.3], α=0: μ = .2 → [0,1,1]
        assert_eq!(flags(&low_scale_filter(&col(&[0.1, 0.2, 0.3]), 0.0).unwrap()), vec![0, 1, 1]);
        // [.1,.2,.3,.4], α=.5: μ=.25, σ=√.0125≈.111803 → t≈.305902 → [0,0,0,1]
        let t = column_threshold(col(&[0.1, 0.2, 0.3, 0.4]).column(0), 0.5);
        assert!((t - 0.305_901_699_437_494_7).abs() < 1e-12);
        assert_eq!(flags(&low_scale_filter(&col(&[0.1, 0.2, 0.3, 0.4]), 0.5).unwrap()), vec![0, 0, 0, 1]);
        assert_eq!(flags(&low_scale_filter(&col(&[0.7, 0.7, 0.7]), 2.0).unwrap()), vec![1, 1, 1]);
        assert!(matches!(low_scale_filter(&Mat::zeros((0, 3)), 0.5), Err(Error::Argument(_))));
    }

    #[test]
    fn two_patch_tie_keeps_the_larger() {
        // mean + popstd equals the larger entry exactly
        for (a, b) in [(-0.9483593354892327, 0.8889204609194937), (0.9774000248633897, -0.9337501908819119)] {
            let m = low_scale_filter(&col(&[a, b]), 1.0).unwrap();
            assert_eq!(flags(&m), vec![(a > b) as u8, (b > a) as u8]);
        }
    }

    #[test]
    fn single_patch_is_retained() {
        assert_eq!(flags(&low_scale_filter(&col(&[-0.3]), 1.0).unwrap()), vec![1]);
    }

    #[test]
    fn high_filter_with_dead_parent_is_empty() {
        let s = Mat::from_shape_fn((GRID, 2), |(r, c)| 0.1 * r as f64 - 0.3 * c as f64);
        let low = Mask::from_elem((1, 1), false);
        let out = high_scale_filter(&s, &low, 0.0, &[true; GRID], &[0, 0]).unwrap();
        assert!(out.iter().all(|&b| !b));
    }

    #[test]
    fn high_filter_reduces_to_low_rule_under_open_gate() {
        let mut scores = vec![0.0; GRID];
        scores[..3].copy_from_slice(&[0.1, 0.2, 0.3]);
        let validity: Vec<bool> = (0..GRID).map(|r| r < 3).collect();
        // padded rows enter the statistics as zeros: μ = .6/16, so .1,.2,.3 all clear it
        let out = high_scale_filter(&col(&scores), &Mask::from_elem((1, 1), true), 0.0, &validity, &[0]).unwrap();
        assert_eq!(&flags(&out)[..3], &[1, 1, 1]);
        assert!(flags(&out)[3..].iter().all(|&b| b == 0));

        // with only three rows of real data (N must be a multiple of 16, so pad with the mean
        // to leave the statistics unchanged) the Eq.-2 example is reproduced
        let mut scores = vec![0.2; GRID];
        scores[..3].copy_from_slice(&[0.1, 0.2, 0.3]);
        let out = high_scale_filter(&col(&scores), &Mask::from_elem((1, 1), true), 0.0, &[true; GRID], &[0]).unwrap();
        assert_eq!(&flags(&out)[..3], &[0, 1, 1]);
    }

    #[test]
    fn negative_scores_behind_masked_parents_do_not_leak() {
        // two low patches; patch 1's parent pair is filtered out. All real
        // scores under patch 0 are negative, so μ and the threshold are below
        // zero only through the masked zeros, which the eligibility check drops.
        let s = Mat::from_shape_fn((2 * GRID, 1), |(r, _)| if r < GRID { -0.5 } else { 0.9 });
        let low = array![[true], [false]];
        let out = high_scale_filter(&s, &low, 0.0, &[true; 2 * GRID], &[0]).unwrap();
        // μ = -0.25 > -0.5, so no eligible entry passes and the zeros are ineligible
        assert!(out.iter().all(|&b| !b));
    }

    #[test]
    fn shape_errors() {
        let s = Mat::zeros((GRID, 2));
        let low = Mask::from_elem((1, 1), true);
        assert!(high_scale_filter(&s, &low, 0.5, &[true; 3], &[0, 0]).is_err());
        assert!(high_scale_filter(&s, &low, 0.5, &[true; GRID], &[0]).is_err());
        assert!(high_scale_filter(&s, &low, 0.5, &[true; GRID], &[0, 1]).is_err());
    }

    #[test]
    fn dump_lists_coordinates() {
        let m = FilterMasks {
            low: array![[true, false], [false, true]],
            high: Mask::from_elem((32, 1), false),
            alpha: 0.5,
        };
        let d = m.dump("x");
        assert_eq!(d.low, vec![[0, 0], [1, 1]]);
        assert!(d.high.is_empty());
        let json = serde_json::to_value(&d).unwrap();
        assert_eq!(json["low"][1][0], 1);
    }
}
