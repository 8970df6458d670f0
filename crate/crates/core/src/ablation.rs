//! Ablation drivers: each variant is trained from scratch with the same
//! budget and scored by its 15-scenario average.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::Components;
use crate::error::{Error, Result};
use crate::evaluator::{evaluate_scenarios, ComparisonRow, ComparisonTable, EvalConfig, ScenarioTable};
use crate::losses::KdPlacement;
use crate::modality::{enumerate_scenarios, RelationshipTable};
use crate::trainer::{train_cases, RunOptions, TrainConfig};
use crate::volume_io::CaseRecord;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationKind {
    Components,
    RcrOrder,
    KdPlacement,
}

impl AblationKind {
    pub const ALL: [AblationKind; 3] = [AblationKind::Components, AblationKind::RcrOrder, AblationKind::KdPlacement];

    pub fn name(self) -> &'static str {
        match self {
            AblationKind::Components => "components",
            AblationKind::RcrOrder => "rcr-order",
            AblationKind::KdPlacement => "kd-placement",
        }
    }
}

impl FromStr for AblationKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown ablation kind {s:?} (components, rcr-order, kd-placement)")))
    }
}

pub struct Variant {
    pub keys: Vec<String>,
    pub config: TrainConfig,
}

fn mark(on: bool) -> String {
    if on { "✓" } else { "✗" }.to_string()
}

/// Variants in published row order, each derived from `base`.
pub fn variants(kind: AblationKind, base: &TrainConfig) -> Vec<Variant> {
    match kind {
        AblationKind::Components => Components::all()
            .into_iter()
            .map(|c| {
                let mut config = base.clone();
                config.network.components = c;
                Variant {
                    keys: vec![mark(c.feature_decoupling), mark(c.cssa), mark(c.rcr)],
                    config,
                }
            })
            .collect(),
        AblationKind::RcrOrder => RelationshipTable::all_orders()
            .into_iter()
            .map(|t| {
                let mut config = base.clone();
                config.network.rcr_order = t;
                Variant {
                    keys: vec![t.arrow_label()],
                    config,
                }
            })
            .collect(),
        AblationKind::KdPlacement => KdPlacement::ALL
            .into_iter()
            .map(|p| {
                let mut config = base.clone();
                config.loss.kd_placement = p;
                Variant {
                    keys: vec![p.label().to_string()],
                    config,
                }
            })
            .collect(),
    }
}

fn key_headers(kind: AblationKind) -> Vec<String> {
    match kind {
        AblationKind::Components => vec!["FD".into(), "CSSA".into(), "RCR".into()],
        AblationKind::RcrOrder => vec!["Compensation Order".into()],
        AblationKind::KdPlacement => vec!["Constraint".into()],
    }
}

pub struct AblationReport {
    pub table: ComparisonTable,
    /// Full scenario table of each variant, in row order.
    pub scenario_tables: Vec<ScenarioTable>,
}

/// Trains and evaluates every variant. With `out`, variant `i` writes its
/// training artifacts under `out/variant_{i}`.
pub fn run_ablation(
    kind: AblationKind,
    train: &[CaseRecord],
    test: &[CaseRecord],
    base: &TrainConfig,
    eval: &EvalConfig,
    out: Option<&Path>,
    mut on_variant: impl FnMut(usize, &ComparisonRow),
) -> Result<AblationReport> {
    let mut rows = Vec::new();
    let mut scenario_tables = Vec::new();
    let scenarios = enumerate_scenarios();
    for (i, v) in variants(kind, base).into_iter().enumerate() {
        let opts = RunOptions {
            out: out.map(|o| o.join(format!("variant_{i}"))),
            ..Default::default()
        };
        let trained = train_cases(train, &v.config, opts)?;
        let (table, _) = evaluate_scenarios(&trained.model, test, &scenarios, eval)?;
        let row = ComparisonRow {
            keys: v.keys,
            dsc: table.average,
        };
        on_variant(i, &row);
        rows.push(row);
        scenario_tables.push(table);
    }
    let title = match kind {
        AblationKind::Components => "Component ablation",
        AblationKind::RcrOrder => "Compensation order ablation",
        AblationKind::KdPlacement => "Alignment constraint ablation",
    };
    Ok(AblationReport {
        table: ComparisonTable {
            title: title.into(),
            key_headers: key_headers(kind),
            rows,
        },
        scenario_tables,
    })
}
