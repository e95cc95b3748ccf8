//! Classification metrics, hierarchical hit ratio, and interpretability triplets.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::datamodel::{normalize_rows, GRID};
use crate::error::{ensure, Error, Result};

/// Index of the largest entry; the first one wins ties.
pub fn argmax(xs: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, x) in xs.into_iter().enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best.0
}

fn unit_rows(m: &Mat) -> Mat {
    let mut m = m.clone();
    normalize_rows(&mut m);
    m
}

/// Fraction of low patches with at least one valid child whose best high
/// text is a child of one of the patch's `topk` best low texts.
///
/// `e_high` keeps all `N·16` rows; rows flagged invalid are skipped.
pub fn hit_ratio_at_k(
    e_low: &Mat,
    e_high: &Mat,
    validity: &[bool],
    t_low: &Mat,
    t_high: &Mat,
    child_parent: &[usize],
    topk: usize,
) -> Result<f64> {
    let n = e_low.nrows();
    ensure!(n > 0, Argument, "bag has no low-scale patches");
    ensure!(topk >= 1, Argument, "topk must be at least 1");
    ensure!(e_high.nrows() == n * GRID, Shape, "{} high rows for {n} low rows", e_high.nrows());
    ensure!(validity.len() == e_high.nrows(), Shape, "validity length {}", validity.len());
    ensure!(child_parent.len() == t_high.nrows(), Shape, "child map length {}", child_parent.len());
    ensure!(child_parent.iter().all(|&o| o < t_low.nrows()), Shape, "child parent out of range");
    let s_low = unit_rows(e_low).dot(&unit_rows(t_low).t());
    let s_high = unit_rows(e_high).dot(&unit_rows(t_high).t());
    let mut hits = 0usize;
    for i in 0..n {
        let mut order: Vec<usize> = (0..t_low.nrows()).collect();
        order.sort_by(|&a, &b| s_low[[i, b]].total_cmp(&s_low[[i, a]]).then(a.cmp(&b)));
        order.truncate(topk);
        let hit = (i * GRID..(i + 1) * GRID)
            .filter(|&r| validity[r])
            .any(|r| order.contains(&child_parent[argmax(s_high.row(r).iter().copied())]));
        hits += hit as usize;
    }
    Ok(hits as f64 / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub accuracy: f64,
    /// Missing when no class has both positive and negative samples.
    pub auc: Option<f64>,
    pub macro_f1: f64,
}

/// Area under the ROC curve by the rank statistic, ties counted half.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let np = positive.iter().filter(|&&p| p).count();
    let nn = positive.len() - np;
    if np == 0 || nn == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    let rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    Some((rank_sum - (np * (np + 1)) as f64 / 2.0) / (np * nn) as f64)
}

/// Accuracy, macro one-vs-rest AUC and macro-F1.
///
/// Macro-F1 averages over the classes that occur in `labels` or
/// `predictions`; a class with no true positives scores 0.
pub fn classification_metrics(predictions: &[usize], probabilities: &Mat, labels: &[usize]) -> Result<ClassMetrics> {
    let n = labels.len();
    ensure!(n > 0, Argument, "no samples");
    ensure!(
        predictions.len() == n && probabilities.nrows() == n,
        Shape,
        "{} predictions, {} probability rows, {n} labels",
        predictions.len(),
        probabilities.nrows()
    );
    let c = probabilities.ncols();
    ensure!(
        labels.iter().chain(predictions).all(|&l| l < c),
        Argument,
        "class index outside {c} columns"
    );
    for (i, row) in probabilities.rows().into_iter().enumerate() {
        ensure!((row.sum() - 1.0).abs() <= 1e-6, Argument, "probability row {i} sums to {}", row.sum());
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    let mut f1s = Vec::new();
    let mut aucs = Vec::new();
    for k in 0..c {
        let tp = predictions.iter().zip(labels).filter(|&(&p, &l)| p == k && l == k).count();
        let pred_k = predictions.iter().filter(|&&p| p == k).count();
        let true_k = labels.iter().filter(|&&l| l == k).count();
        if pred_k + true_k > 0 {
            f1s.push(2.0 * tp as f64 / (pred_k + true_k) as f64);
        }
        let pos: Vec<bool> = labels.iter().map(|&l| l == k).collect();
        if let Some(a) = binary_auc(&probabilities.column(k).to_vec(), &pos) {
            aucs.push(a);
        }
    }
    Ok(ClassMetrics {
        accuracy: correct as f64 / n as f64,
        auc: (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64),
        macro_f1: f1s.iter().sum::<f64>() / f1s.len() as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub accuracy: f64,
    pub auc: Option<f64>,
    pub macro_f1: f64,
    pub hit_ratio_at_2: Option<f64>,
}

impl SeedMetrics {
    pub fn new(seed: u64, m: ClassMetrics, hit_ratio_at_2: Option<f64>) -> Self {
        Self {
            seed,
            accuracy: m.accuracy,
            auc: m.auc,
            macro_f1: m.macro_f1,
            hit_ratio_at_2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Mean and population standard deviation; `None` for an empty input.
pub fn mean_std(xs: &[f64]) -> Option<MeanStd> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Some(MeanStd {
        mean,
        std: var.sqrt(),
        n: xs.len(),
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub per_seed: Vec<SeedMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub accuracy: Option<MeanStd>,
    pub auc: Option<MeanStd>,
    pub macro_f1: Option<MeanStd>,
    pub hit_ratio_at_2: Option<MeanStd>,
}

impl RunMetrics {
    pub fn push(&mut self, m: SeedMetrics) {
        self.per_seed.push(m);
    }

    pub fn summary(&self) -> Summary {
        let pick = |f: fn(&SeedMetrics) -> Option<f64>| mean_std(&self.per_seed.iter().filter_map(f).collect::<Vec<_>>());
        Summary {
            accuracy: pick(|m| Some(m.accuracy)),
            auc: pick(|m| m.auc),
            macro_f1: pick(|m| Some(m.macro_f1)),
            hit_ratio_at_2: pick(|m| m.hit_ratio_at_2),
        }
    }

    pub fn mean_f1(&self) -> f64 {
        self.summary().macro_f1.map_or(f64::NAN, |s| s.mean)
    }

    pub fn mean_hit_ratio(&self) -> f64 {
        self.summary().hit_ratio_at_2.map_or(f64::NAN, |s| s.mean)
    }
}

/// One row of the metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub config: String,
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub auc: Option<f64>,
    pub macro_f1: Option<f64>,
    pub hit_ratio_at_2: Option<f64>,
    /// Empty on success.
    pub error: String,
}

impl MetricsRow {
    pub fn ok(config: &str, m: &SeedMetrics) -> Self {
        Self {
            config: config.to_owned(),
            seed: m.seed,
            accuracy: Some(m.accuracy),
            auc: m.auc,
            macro_f1: Some(m.macro_f1),
            hit_ratio_at_2: m.hit_ratio_at_2,
            error: String::new(),
        }
    }

    pub fn failed(config: &str, seed: u64, err: &Error) -> Self {
        Self {
            config: config.to_owned(),
            seed,
            accuracy: None,
            auc: None,
            macro_f1: None,
            hit_ratio_at_2: None,
            error: err.to_string(),
        }
    }
}

pub fn write_csv<W: Write>(out: W, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row).map_err(|e| Error::Argument(format!("csv: {e}")))?;
    }
    w.flush().map_err(|e| Error::Argument(format!("csv: {e}")))?;
    Ok(())
}

pub fn save_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut buf = Vec::new();
    write_csv(&mut buf, rows)?;
    crate::datamodel::io::write_file(path, buf)
}

pub fn save_summary(path: &Path, summaries: &[(String, Summary)]) -> Result<()> {
    let map: serde_json::Map<String, serde_json::Value> = summaries
        .iter()
        .map(|(k, s)| Ok((k.clone(), serde_json::to_value(s)?)))
        .collect::<Result<_>>()?;
    crate::datamodel::io::write_json(path, &map)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: usize,
    pub anchor_score: f64,
    /// `(patch, distribution similarity)`, most similar first.
    pub positives: Vec<(usize, f64)>,
    /// Least similar first.
    pub negatives: Vec<(usize, f64)>,
}

/// Anchor, nearest and farthest patches for one class at one scale.
///
/// A patch's distribution is its cosine score vector over every text. The
/// anchor maximizes the mean score over the class's texts. `keep` masks out
/// rows (padded high patches); `count` bounds each list.
pub fn interpretability_triplets(
    patches: &Mat,
    keep: Option<&[bool]>,
    texts: &Mat,
    text_class: &[usize],
    class: usize,
    count: usize,
) -> Result<Triplet> {
    ensure!(text_class.len() == texts.nrows(), Shape, "text class map length");
    let cols: Vec<usize> = (0..texts.nrows()).filter(|&j| text_class[j] == class).collect();
    ensure!(!cols.is_empty(), Argument, "class {class} has no texts");
    let rows: Vec<usize> = (0..patches.nrows()).filter(|&i| keep.is_none_or(|k| k[i])).collect();
    ensure!(!rows.is_empty(), Argument, "no patches to rank");
    let s = unit_rows(patches).dot(&unit_rows(texts).t());
    let class_score = |i: usize| cols.iter().map(|&j| s[[i, j]]).sum::<f64>() / cols.len() as f64;
    let a = rows[argmax(rows.iter().map(|&i| class_score(i)))];
    let dist = unit_rows(&s);
    let mut ranked: Vec<(usize, f64)> = rows
        .iter()
        .filter(|&&i| i != a)
        .map(|&i| (i, dist.row(i).dot(&dist.row(a))))
        .collect();
    ranked.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    let positives = ranked.iter().take(count).copied().collect();
    let negatives = ranked.iter().rev().take(count).copied().collect();
    Ok(Triplet {
        anchor: a,
        anchor_score: class_score(a),
        positives,
        negatives,
    })
}
