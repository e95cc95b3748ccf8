//! Acceptance run: one PASS/FAIL line per criterion, then a single assertion.
//!
//! Run with `cargo test -p hivemil-core --test acceptance -- --nocapture` to
//! see the report.

use std::time::Instant;

use hivemil::datamodel::{normalize_rows, parent_patch, EncodedTexts, FeatureBag, GRID};
use hivemil::evalkit::hit_ratio_at_k;
use hivemil::harness::gradcheck::{gradient_check, toy_problem};
use hivemil::harness::matrix::{run_matrix, MatrixSpec};
use hivemil::harness::{self, BaselineKind, Model, ModuleSwitches, RunConfig};
use hivemil::hhgnn::{forward, hier_aggregate, GnnInit, GnnParams, HierAggregator, NodeStates};
use hivemil::hhgraph::{build_hhg, edge_counts, Relation};
use hivemil::objective::{fuse_and_ce, htcl, HtclVariant, TextMaps};
use hivemil::synthgen::SynthConfig;
use hivemil::tgdf::{high_scale_filter, tgdf, FilterMasks, Mask, TgdfSwitches, TIE_EPS};
use hivemil::Mat;
use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TGDF_INSTANCES: u64 = 100;
const INVARIANT_INSTANCES: u64 = 50;
const HIT_INSTANCES: u64 = 100;
const ALPHAS: [f64; 4] = [0.0, 0.25, 0.5, 1.0];
const TGDF_SECONDS: f64 = 10.0;
const GRAD_TOL: f64 = 1e-3;
const GRAD_STEP: f64 = 1e-5;
const GRAD_SECONDS: f64 = 60.0;
const HTCL_TOL: f64 = 1e-6;
const CE_TOL: f64 = 1e-9;
const MSA_TOL: f64 = 1e-9;
const REDUCTION_TOL: f64 = 1e-9;
const F1_MARGIN_BASELINE: f64 = 0.10;
const F1_MARGIN_ROW_A: f64 = 0.05;
const SEPARATION_SECONDS: f64 = 900.0;

struct Report {
    failures: Vec<String>,
}

impl Report {
    fn line(&mut self, id: &str, ok: bool, detail: String) {
        println!("criterion {id}: {} | {detail}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            self.failures.push(id.to_owned());
        }
    }

    fn note(&self, id: &str, detail: String) {
        println!("criterion {id}: INFO | {detail}");
    }
}

/// A random bag with `n` low patches, texts for `parents` parents with `k`
/// children each, and the child → parent map.
struct Instance {
    bag: FeatureBag,
    texts: EncodedTexts,
    child_parent: Vec<usize>,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, d: usize) -> Mat {
    Mat::from_shape_simple_fn((rows, d), || rng.random_range(-1.0..1.0))
}

fn instance(seed: u64, max_low: usize, max_parents: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=max_low);
    let parents = rng.random_range(1..=max_parents);
    let k = rng.random_range(1..=3);
    let d = rng.random_range(2..=8);
    let low = uniform(&mut rng, n, d);
    let mut high = uniform(&mut rng, n * GRID, d);
    let validity: Vec<bool> = (0..n * GRID).map(|_| rng.random_bool(0.8)).collect();
    for (r, &v) in validity.iter().enumerate() {
        if !v {
            high.row_mut(r).fill(0.0);
        }
    }
    let mut t_low = uniform(&mut rng, parents, d);
    let mut t_high = uniform(&mut rng, parents * k, d);
    normalize_rows(&mut t_low);
    normalize_rows(&mut t_high);
    Instance {
        bag: FeatureBag::new(format!("i{seed}"), 0, low, high, validity).unwrap(),
        texts: EncodedTexts { low: t_low, high: t_high },
        child_parent: (0..parents * k).map(|s| s / k).collect(),
    }
}

fn rows(m: &Mat) -> Vec<Vec<f64>> {
    m.outer_iter().map(|r| r.to_vec()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean plus alpha population deviations, by the textbook formula.
fn threshold(col: &[f64], alpha: f64) -> f64 {
    let n = col.len() as f64;
    let mean = col.iter().sum::<f64>() / n;
    let var = col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    mean + alpha * var.sqrt()
}

/// Straight transcription of the two-stage filter, ties taken with the
/// library's slack: threshold each low text column, zero high similarities whose parent pair was dropped, threshold
/// each high text column over all rows, then keep a pair only if it passed,
/// its parent pair survived and the patch is real.
fn tgdf_oracle(inst: &Instance, alpha: f64) -> (Vec<Vec<bool>>, Vec<Vec<bool>>) {
    let low = rows(inst.bag.low());
    let high = rows(inst.bag.high());
    let tl = rows(&inst.texts.low);
    let th = rows(&inst.texts.high);
    let validity = inst.bag.validity();
    let mut low_mask = vec![vec![false; tl.len()]; low.len()];
    for (o, t) in tl.iter().enumerate() {
        let col: Vec<f64> = low.iter().map(|p| dot(p, t)).collect();
        let thr = threshold(&col, alpha);
        for (n, &v) in col.iter().enumerate() {
            low_mask[n][o] = v >= thr - TIE_EPS;
        }
    }
    let mut high_mask = vec![vec![false; th.len()]; high.len()];
    for (s, t) in th.iter().enumerate() {
        let parent = inst.child_parent[s];
        let eligible: Vec<bool> = (0..high.len()).map(|r| low_mask[r / GRID][parent]).collect();
        let col: Vec<f64> = (0..high.len()).map(|r| if eligible[r] { dot(&high[r], t) } else { 0.0 }).collect();
        let thr = threshold(&col, alpha);
        for r in 0..high.len() {
            high_mask[r][s] = col[r] >= thr - TIE_EPS && eligible[r] && validity[r];
        }
    }
    (low_mask, high_mask)
}

fn mask_rows(m: &Mask) -> Vec<Vec<bool>> {
    m.outer_iter().map(|r| r.to_vec()).collect()
}

fn not_subset(bigger_alpha: &Mask, smaller_alpha: &Mask) -> usize {
    bigger_alpha.iter().zip(smaller_alpha).filter(|(&a, &b)| a && !b).count()
}

fn criterion_1(rep: &mut Report) {
    let start = Instant::now();
    let mut mismatched = 0;
    for seed in 0..TGDF_INSTANCES {
        let inst = instance(seed, 8, 6);
        let alpha = [0.0, 0.25, 0.5, 1.0, 2.0][seed as usize % 5];
        let got = tgdf(&inst.bag, &inst.texts, &inst.child_parent, alpha, TgdfSwitches::default()).unwrap();
        let (low, high) = tgdf_oracle(&inst, alpha);
        if mask_rows(&got.low) != low || mask_rows(&got.high) != high {
            mismatched += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    rep.line(
        "1",
        mismatched == 0 && secs < TGDF_SECONDS,
        format!("filter vs brute force: {mismatched}/{TGDF_INSTANCES} instances differ, {secs:.2} s (limit {TGDF_SECONDS} s)"),
    );
}

fn criterion_2(rep: &mut Report) {
    let (mut low_viol, mut high_fixed_viol, mut hier_viol, mut composed_viol) = (0, 0, 0, 0);
    for seed in 0..INVARIANT_INSTANCES {
        let inst = instance(1000 + seed, 8, 6);
        let masks: Vec<FilterMasks> = ALPHAS
            .iter()
            .map(|&a| tgdf(&inst.bag, &inst.texts, &inst.child_parent, a, TgdfSwitches::default()).unwrap())
            .collect();
        for w in masks.windows(2) {
            low_viol += not_subset(&w[1].low, &w[0].low);
            composed_viol += not_subset(&w[1].high, &w[0].high);
        }
        for m in &masks {
            for ((r, s), &b) in m.high.indexed_iter() {
                if b && !m.low[[parent_patch(r), inst.child_parent[s]]] {
                    hier_viol += 1;
                }
            }
        }
        // stage two on identical inputs: one gate for every alpha
        let s_high = inst.bag.high().dot(&inst.texts.high.t());
        let gate = &masks[2].low;
        let highs: Vec<Mask> = ALPHAS
            .iter()
            .map(|&a| high_scale_filter(&s_high, gate, a, inst.bag.validity(), &inst.child_parent).unwrap())
            .collect();
        for w in highs.windows(2) {
            high_fixed_viol += not_subset(&w[1], &w[0]);
        }
    }
    rep.line(
        "2",
        low_viol + high_fixed_viol + hier_viol == 0,
        format!(
            "alpha monotonicity: low {low_viol}, high on a fixed gate {high_fixed_viol}; hierarchy {hier_viol} violations over {INVARIANT_INSTANCES} instances"
        ),
    );
    rep.note(
        "2",
        format!(
            "end-to-end high masks gain {composed_viol} entries as alpha rises, because stage-two column statistics include the zeros of a gate that itself shrinks"
        ),
    );
}

fn criterion_3(rep: &mut Report) {
    let mut violations = 0;
    for seed in 0..INVARIANT_INSTANCES {
        let inst = instance(2000 + seed, 8, 6);
        let m = tgdf(&inst.bag, &inst.texts, &inst.child_parent, 0.5, TgdfSwitches::default()).unwrap();
        let g = build_hhg(&inst.bag, &inst.texts, &inst.child_parent, &m).unwrap();
        let c = edge_counts(&g);
        let valid = inst.bag.validity().iter().filter(|&&v| v).count();
        violations += (c.intra_low != m.nnz_low()) as usize
            + (c.intra_high != m.nnz_high()) as usize
            + (c.hier_img != valid) as usize
            + (c.hier_text != inst.texts.high.nrows()) as usize;
    }
    rep.line("3", violations == 0, format!("edge cardinalities: {violations} violations over {INVARIANT_INSTANCES} graphs"));
}

fn criterion_4(rep: &mut Report) {
    let start = Instant::now();
    let (ds, cfg) = toy_problem().unwrap();
    let model = Model::new(&ds, &cfg, 0).unwrap();
    let bags: Vec<&FeatureBag> = ds.bags.iter().collect();
    let r = gradient_check(&model, &bags, &cfg, GRAD_STEP).unwrap();
    let secs = start.elapsed().as_secs_f64();
    rep.line(
        "4",
        r.max_rel_err < GRAD_TOL && secs < GRAD_SECONDS,
        format!(
            "gradient check over {} tensors on {} bags, C=2, N=2: max relative error {:.2e} (limit {GRAD_TOL:.0e}), {secs:.2} s (limit {GRAD_SECONDS} s)",
            r.tensors.len(),
            bags.len(),
            r.max_rel_err
        ),
    );
}

fn criterion_5(rep: &mut Report) {
    let maps = TextMaps {
        child_parent: vec![0, 0, 1, 1],
        parent_class: vec![0, 1],
    };
    let eye = Mat::eye(6);
    let tl = eye.slice(ndarray::s![0..2, ..]).to_owned();
    let th = eye.slice(ndarray::s![2..6, ..]).to_owned();
    let htcl_dev = HtclVariant::ALL
        .iter()
        .map(|&v| (htcl(&tl, &th, &maps, v).unwrap() - 2.0 * 2f64.ln()).abs())
        .fold(0.0, f64::max);
    let mut ce_dev: f64 = 0.0;
    for c in 2..=5 {
        let z = Array1::zeros(c);
        let (_, ce) = fuse_and_ce(&z, &z, c - 1).unwrap();
        ce_dev = ce_dev.max((ce - (c as f64).ln()).abs());
    }

    // one low patch, so every high patch has exactly its parent as neighbor
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = 6;
    let validity: Vec<bool> = (0..GRID).map(|r| r % 5 != 0).collect();
    let mut high = uniform(&mut rng, GRID, d);
    for (r, &v) in validity.iter().enumerate() {
        if !v {
            high.row_mut(r).fill(0.0);
        }
    }
    let bag = FeatureBag::new("msa", 0, uniform(&mut rng, 1, d), high, validity.clone()).unwrap();
    let texts = EncodedTexts {
        low: uniform(&mut rng, 2, d),
        high: uniform(&mut rng, 2, d),
    };
    let masks = FilterMasks::dense(1, 2, &validity, 2);
    let g = build_hhg(&bag, &texts, &[0, 1], &masks).unwrap();
    let init = GnnInit {
        seed: 9,
        identity_gain: 0.3,
        std: 0.4,
        scale_std: 0.4,
    };
    let p = GnnParams::new(d, 1, 2, init).unwrap();
    let states = NodeStates::from_graph(&g);
    let (_, out) = hier_aggregate(&g, &states, &p, 0, Relation::HierImg, HierAggregator::Msa).unwrap();
    let w = &p.layers[0].msa_img;
    let project = |wm: &Mat, x: Vec<f64>| -> Vec<f64> { (0..d).map(|i| (0..d).map(|j| wm[[i, j]] * x[j]).sum()).collect() };
    let parent: Vec<f64> = (0..d).map(|j| g.img_low[[0, j]] + p.scale_low[[0, j]]).collect();
    let v_u = project(&w.wv, parent);
    let mut msa_dev: f64 = 0.0;
    for c in 0..g.img_high.nrows() {
        let x: Vec<f64> = (0..d).map(|j| g.img_high[[c, j]] + p.scale_high[[0, j]]).collect();
        let q_v = project(&w.wq, x);
        for j in 0..d {
            msa_dev = msa_dev.max((out[[c, j]] - (q_v[j] + v_u[j])).abs());
        }
    }
    rep.line(
        "5",
        htcl_dev <= HTCL_TOL && ce_dev <= CE_TOL && msa_dev <= MSA_TOL,
        format!(
            "htcl at zero similarity off 2 ln 2 by {htcl_dev:.1e} (tol {HTCL_TOL:.0e}); ce at zero logits off ln C by {ce_dev:.1e} (tol {CE_TOL:.0e}); single-neighbor attention off q+v by {msa_dev:.1e} (tol {MSA_TOL:.0e})"
        ),
    );
}

fn max_state_diff(a: &NodeStates, b: &NodeStates) -> f64 {
    [(&a.img_low, &b.img_low), (&a.img_high, &b.img_high), (&a.text_low, &b.text_low), (&a.text_high, &b.text_high)]
        .iter()
        .flat_map(|(x, y)| x.iter().zip(y.iter()).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

fn criterion_6(rep: &mut Report) {
    let inst = instance(6, 4, 4);
    let m = tgdf(&inst.bag, &inst.texts, &inst.child_parent, 0.25, TgdfSwitches::default()).unwrap();
    let g = build_hhg(&inst.bag, &inst.texts, &inst.child_parent, &m).unwrap();
    let d = inst.bag.dim();
    let heads = if d.is_multiple_of(2) { 2 } else { 1 };
    let init = GnnInit {
        seed: 61,
        identity_gain: 0.5,
        std: 0.3,
        scale_std: 0.3,
    };

    let mut tied = GnnParams::new(d, 2, heads, init).unwrap();
    for l in &mut tied.layers {
        l.msa_img = l.attn_shared.clone();
        l.msa_text = l.attn_shared.clone();
    }
    let tied_dev = max_state_diff(&forward(&g, &tied, HierAggregator::Msa).unwrap(), &forward(&g, &tied, HierAggregator::Saa).unwrap());

    let mut flat = GnnParams::new(d, 2, heads, GnnInit { seed: 62, ..init }).unwrap();
    flat.scale_low.fill(0.0);
    flat.scale_high.fill(0.0);
    let flat_dev = max_state_diff(&forward(&g, &flat, HierAggregator::Msa).unwrap(), &forward(&g, &flat, HierAggregator::Maa).unwrap());

    let mut rng = ChaCha8Rng::seed_from_u64(63);
    let maps = TextMaps {
        child_parent: (0..6).collect(),
        parent_class: vec![0, 0, 1, 1, 2, 2],
    };
    let tl = uniform(&mut rng, 6, 5);
    let th = uniform(&mut rng, 6, 5);
    let htcl_dev = (htcl(&tl, &th, &maps, HtclVariant::ShareParent).unwrap() - htcl(&tl, &th, &maps, HtclVariant::InstanceWise).unwrap()).abs();
    rep.line(
        "6",
        tied_dev <= REDUCTION_TOL && flat_dev <= REDUCTION_TOL && htcl_dev <= REDUCTION_TOL,
        format!(
            "tied-weight attention vs shared {tied_dev:.1e}; zero scale embeddings vs no-scale {flat_dev:.1e}; share-parent vs instance-wise at K=1 {htcl_dev:.1e} (tol {REDUCTION_TOL:.0e})"
        ),
    );
}

fn reference_config() -> RunConfig {
    RunConfig {
        shots: 16,
        seeds: (0..5).collect(),
        data: harness::config::DataSource {
            path: None,
            synth: Some(SynthConfig::reference()),
        },
        ..RunConfig::default()
    }
}

const NO_HIER: ModuleSwitches = ModuleSwitches {
    tgdf: true,
    hhg: false,
    htcl: true,
};

fn criteria_7_8(rep: &mut Report) {
    let start = Instant::now();
    let cfg = reference_config();
    let ds = harness::load_data(&cfg).unwrap();
    let spec = MatrixSpec {
        modules: vec![ModuleSwitches::FULL, ModuleSwitches::NONE, NO_HIER],
        baselines: vec![BaselineKind::MeanPool],
        ..MatrixSpec::default()
    };
    let result = run_matrix(&cfg, &spec, &ds).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let failed = result.rows.iter().filter(|r| !r.error.is_empty()).count();
    let metrics: Vec<_> = result.metrics.iter().collect();
    let (full, row_a, no_hier, pool) = (metrics[0], metrics[1], metrics[2], metrics[3]);
    let complete = failed == 0 && metrics.iter().all(|m| m.per_seed.len() == cfg.seeds.len());
    let (f_full, f_a, f_pool) = (full.mean_f1(), row_a.mean_f1(), pool.mean_f1());
    rep.line(
        "7",
        complete && f_full - f_pool >= F1_MARGIN_BASELINE && f_full - f_a >= F1_MARGIN_ROW_A && secs < SEPARATION_SECONDS,
        format!(
            "mean test macro-F1 over {} seeds: full {f_full:.4}, mean pooling {f_pool:.4} (margin {:+.4}, need {F1_MARGIN_BASELINE}), no modules {f_a:.4} (margin {:+.4}, need {F1_MARGIN_ROW_A}); {secs:.0} s for all cells (limit {SEPARATION_SECONDS} s), {failed} failed jobs",
            cfg.seeds.len(),
            f_full - f_pool,
            f_full - f_a
        ),
    );
    let (h_full, h_flat) = (full.mean_hit_ratio(), no_hier.mean_hit_ratio());
    rep.line(
        "8",
        complete && h_full >= h_flat,
        format!("mean hit ratio@2: full {h_full:.4}, without hierarchical edges {h_flat:.4}"),
    );
}

/// Plain transcription of the hit-ratio procedure.
fn hit_oracle(e_low: &Mat, e_high: &Mat, validity: &[bool], t_low: &Mat, t_high: &Mat, child_parent: &[usize], k: usize) -> f64 {
    let unit = |m: &Mat| {
        rows(m)
            .into_iter()
            .map(|r| {
                let n = dot(&r, &r).sqrt();
                r.into_iter().map(|x| if n > 0.0 { x / n } else { x }).collect::<Vec<f64>>()
            })
            .collect::<Vec<_>>()
    };
    let (el, eh, tl, th) = (unit(e_low), unit(e_high), unit(t_low), unit(t_high));
    let mut hits = 0;
    for (i, p) in el.iter().enumerate() {
        let sims: Vec<f64> = tl.iter().map(|t| dot(p, t)).collect();
        let mut top = Vec::new();
        while top.len() < k.min(sims.len()) {
            let mut best = usize::MAX;
            for o in 0..sims.len() {
                if !top.contains(&o) && (best == usize::MAX || sims[o] > sims[best]) {
                    best = o;
                }
            }
            top.push(best);
        }
        for r in i * GRID..(i + 1) * GRID {
            if !validity[r] {
                continue;
            }
            let mut best = 0;
            for s in 1..th.len() {
                if dot(&eh[r], &th[s]) > dot(&eh[r], &th[best]) {
                    best = s;
                }
            }
            if top.contains(&child_parent[best]) {
                hits += 1;
                break;
            }
        }
    }
    hits as f64 / el.len() as f64
}

fn criterion_9(rep: &mut Report) {
    let mut mismatched = 0;
    for seed in 0..HIT_INSTANCES {
        let inst = instance(9000 + seed, 8, 6);
        let k = 1 + seed as usize % 3;
        let (el, eh, v) = (inst.bag.low(), inst.bag.high(), inst.bag.validity());
        let (tl, th) = (&inst.texts.low, &inst.texts.high);
        let got = hit_ratio_at_k(el, eh, v, tl, th, &inst.child_parent, k).unwrap();
        if got != hit_oracle(el, eh, v, tl, th, &inst.child_parent, k) {
            mismatched += 1;
        }
    }
    rep.line("9", mismatched == 0, format!("hit ratio vs brute force: {mismatched}/{HIT_INSTANCES} instances differ"));
}

fn criterion_10(rep: &mut Report) {
    let cfg = RunConfig {
        seeds: vec![0, 1],
        max_epochs: 4,
        lr: 1e-3,
        ..reference_config()
    };
    let ds = harness::load_data(&cfg).unwrap();
    let csv = |dir: &std::path::Path| {
        let report = harness::train(&cfg, &ds).unwrap();
        harness::save_train_outputs(dir, &cfg, &report).unwrap();
        std::fs::read(dir.join("metrics.csv")).unwrap()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (first, second) = (csv(a.path()), csv(b.path()));
    rep.line(
        "10",
        first == second && !first.is_empty(),
        format!("two runs of one config: metrics.csv {} ({} bytes)", if first == second { "identical" } else { "differs" }, first.len()),
    );
}

#[test]
fn acceptance() {
    let mut rep = Report { failures: vec![] };
    criterion_1(&mut rep);
    criterion_2(&mut rep);
    criterion_3(&mut rep);
    criterion_4(&mut rep);
    criterion_5(&mut rep);
    criterion_6(&mut rep);
    criteria_7_8(&mut rep);
    criterion_9(&mut rep);
    criterion_10(&mut rep);
    assert!(rep.failures.is_empty(), "failed criteria: {:?}", rep.failures);
}
