use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::baseline::{run_baseline_seed, BaselineKind};
use super::config::{ModuleSwitches, RunConfig};
use super::train::run_seed;
use crate::datamodel::Dataset;
use crate::error::{ensure, Result};
use crate::evalkit::{MetricsRow, RunMetrics, Summary};
use crate::hhgnn::HierAggregator;
use crate::objective::HtclVariant;
use crate::tgdf::TgdfSwitches;

/// Axes of an ablation grid. An empty model axis takes the base config's
/// value; the model grid is skipped entirely when `models` is false.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatrixSpec {
    pub models: bool,
    pub aggregators: Vec<HierAggregator>,
    pub htcl_variants: Vec<HtclVariant>,
    pub modules: Vec<ModuleSwitches>,
    pub tgdf: Vec<TgdfSwitches>,
    pub baselines: Vec<BaselineKind>,
}

impl Default for MatrixSpec {
    fn default() -> Self {
        Self {
            models: true,
            aggregators: vec![],
            htcl_variants: vec![],
            modules: vec![],
            tgdf: vec![],
            baselines: vec![],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum CellKind {
    Model(Box<RunConfig>),
    Baseline(BaselineKind),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub name: String,
    pub kind: CellKind,
}

fn axis<T: Clone>(values: &[T], base: T) -> Vec<T> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

fn tgdf_label(t: TgdfSwitches) -> &'static str {
    match (t.mask_propagation, t.low_filter) {
        (true, true) => "full",
        (false, true) => "no-prop",
        (true, false) => "no-low",
        (false, false) => "no-prop-no-low",
    }
}

fn enum_name<T: Serialize>(v: T) -> String {
    serde_json::to_value(v).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default()
}

/// Cartesian product of the model axes, then one cell per baseline.
pub fn cells(base: &RunConfig, spec: &MatrixSpec) -> Result<Vec<Cell>> {
    let mut out = Vec::new();
    if spec.models {
        for agg in axis(&spec.aggregators, base.aggregator) {
            for hv in axis(&spec.htcl_variants, base.htcl_variant) {
                for m in axis(&spec.modules, base.modules) {
                    for t in axis(&spec.tgdf, base.tgdf) {
                        let cfg = RunConfig {
                            aggregator: agg,
                            htcl_variant: hv,
                            modules: m,
                            tgdf: t,
                            ..base.clone()
                        };
                        out.push(Cell {
                            name: format!(
                                "agg={};htcl={};modules={};tgdf={}",
                                enum_name(agg),
                                enum_name(hv),
                                m.label(),
                                tgdf_label(t)
                            ),
                            kind: CellKind::Model(Box::new(cfg)),
                        });
                    }
                }
            }
        }
    }
    for &b in &spec.baselines {
        out.push(Cell {
            name: b.name().to_owned(),
            kind: CellKind::Baseline(b),
        });
    }
    ensure!(!out.is_empty(), Argument, "the matrix has no cells");
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct MatrixResult {
    pub cells: Vec<Cell>,
    /// One row per cell per seed, in cell then seed order.
    pub rows: Vec<MetricsRow>,
    /// Successful seeds only.
    pub metrics: Vec<RunMetrics>,
}

impl MatrixResult {
    pub fn summaries(&self) -> Vec<(String, Summary)> {
        self.cells.iter().zip(&self.metrics).map(|(c, m)| (c.name.clone(), m.summary())).collect()
    }

    pub fn metrics_of(&self, name: &str) -> Option<&RunMetrics> {
        self.cells.iter().position(|c| c.name == name).map(|i| &self.metrics[i])
    }
}

/// Runs every `(cell, seed)` job in parallel. Splits depend only on the seed,
/// so all cells share them. A failing job becomes an error row.
pub fn run_matrix(base: &RunConfig, spec: &MatrixSpec, ds: &Dataset) -> Result<MatrixResult> {
    base.validate()?;
    let cells = cells(base, spec)?;
    let jobs: Vec<(usize, u64)> = (0..cells.len()).flat_map(|c| base.seeds.iter().map(move |&s| (c, s))).collect();
    let results: Vec<_> = jobs
        .par_iter()
        .map(|&(c, seed)| match &cells[c].kind {
            CellKind::Model(cfg) => run_seed(ds, cfg, seed).map(|r| r.metrics),
            CellKind::Baseline(kind) => run_baseline_seed(*kind, ds, base, seed),
        })
        .collect();
    let mut rows = Vec::with_capacity(jobs.len());
    let mut metrics = vec![RunMetrics::default(); cells.len()];
    for (&(c, seed), r) in jobs.iter().zip(results) {
        match r {
            Ok(m) => {
                rows.push(MetricsRow::ok(&cells[c].name, &m));
                metrics[c].push(m);
            }
            Err(e) => rows.push(MetricsRow::failed(&cells[c].name, seed, &e)),
        }
    }
    Ok(MatrixResult { cells, rows, metrics })
}
