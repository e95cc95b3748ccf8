//! Quick self-checks: closed-form losses, filtering invariants, gradients.

use anyhow::Result;
use hivemil::autograd::Mat;
use hivemil::datamodel::FeatureBag;
use hivemil::harness::gradcheck::{gradient_check, toy_problem};
use hivemil::harness::{Model, ModuleSwitches};
use hivemil::objective::{fuse_and_ce, htcl, HtclVariant, TextMaps};
use hivemil::synthgen::{generate_dataset, SynthConfig};
use hivemil::tgdf::{tgdf, TgdfSwitches};
use ndarray::Array1;

fn report(name: &str, ok: bool, detail: String) -> bool {
    println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    ok
}

fn closed_forms() -> bool {
    let maps = TextMaps {
        child_parent: vec![0, 0, 1, 1],
        parent_class: vec![0, 1],
    };
    let eye = Mat::eye(6);
    let tl = eye.slice(ndarray::s![0..2, ..]).to_owned();
    let th = eye.slice(ndarray::s![2..6, ..]).to_owned();
    let worst = HtclVariant::ALL
        .iter()
        .map(|&v| htcl(&tl, &th, &maps, v).map(|x| (x - 2.0 * 2f64.ln()).abs()).unwrap_or(f64::INFINITY))
        .fold(0.0, f64::max);
    let ok_h = report("htcl at zero similarity", worst < 1e-6, format!("max deviation {worst:.2e}"));
    let z = Array1::zeros(3);
    let ce = fuse_and_ce(&z, &z, 1).map(|(_, c)| (c - 3f64.ln()).abs()).unwrap_or(f64::INFINITY);
    let ok_c = report("cross-entropy at zero logits", ce < 1e-9, format!("deviation {ce:.2e}"));
    ok_h && ok_c
}

fn filtering_invariants() -> Result<bool> {
    let ds = generate_dataset(&SynthConfig {
        bags_per_class: 5,
        n_min: 2,
        n_max: 6,
        dim: 16,
        ..SynthConfig::default()
    })?;
    let enc = hivemil::datamodel::encode_texts(&ds.texts, &ds.stub)?;
    let cp = ds.texts.child_parents();
    let mut violations = 0;
    for bag in &ds.bags {
        let masks: Vec<_> = [0.0, 0.25, 0.5, 1.0]
            .iter()
            .map(|&a| tgdf(bag, &enc, &cp, a, TgdfSwitches::default()))
            .collect::<Result<_, _>>()?;
        for w in masks.windows(2) {
            violations += w[1].low.iter().zip(&w[0].low).filter(|(&hi, &lo)| hi && !lo).count();
        }
        for m in &masks {
            for ((r, s), &b) in m.high.indexed_iter() {
                if b && !m.low[[hivemil::datamodel::parent_patch(r), cp[s]]] {
                    violations += 1;
                }
            }
        }
    }
    Ok(report(
        "low-scale monotonicity in alpha and high-scale hierarchy",
        violations == 0,
        format!("{violations} violations over {} bags", ds.bags.len()),
    ))
}

fn gradients() -> Result<bool> {
    let (ds, cfg) = toy_problem()?;
    let model = Model::new(&ds, &cfg, 0)?;
    let bags: Vec<&FeatureBag> = ds.bags.iter().collect();
    let r = gradient_check(&model, &bags, &cfg, 1e-5)?;
    Ok(report(
        "end-to-end gradient",
        r.max_rel_err < 1e-3,
        format!("max relative error {:.2e} over {} tensors", r.max_rel_err, r.tensors.len()),
    ))
}

fn bypass() -> Result<bool> {
    let (ds, mut cfg) = toy_problem()?;
    cfg.modules = ModuleSwitches::NONE;
    let model = Model::new(&ds, &cfg, 0)?;
    let p = model.forward(&ds.bags[0], &cfg)?;
    Ok(report("module row (a) bypass", p.input == p.output, "output states equal input states".into()))
}

pub fn run_all() -> Result<bool> {
    let mut ok = closed_forms();
    ok &= filtering_invariants()?;
    ok &= bypass()?;
    ok &= gradients()?;
    Ok(ok)
}
