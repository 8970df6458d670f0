use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::modality::{Modality, ModalityIndicator};

/// The fifteen scenarios in published row order: singles, pairs, triples,
/// then the full set.
pub fn table_scenario_order() -> [ModalityIndicator; 15] {
    use Modality::*;
    let rows: [&[Modality]; 15] = [
        &[T2],
        &[Tc],
        &[T1],
        &[Fl],
        &[Tc, T2],
        &[T1, Tc],
        &[Fl, T1],
        &[T1, T2],
        &[Fl, T2],
        &[Fl, Tc],
        &[Fl, T1, Tc],
        &[Fl, T1, T2],
        &[Fl, Tc, T2],
        &[T1, Tc, T2],
        &[Fl, T1, Tc, T2],
    ];
    rows.map(|ms| {
        let mut flags = [false; 4];
        for m in ms {
            flags[m.index()] = true;
        }
        ModalityIndicator::new(flags).expect("non-empty")
    })
}

/// Modality column order of the scenario tables.
pub const TABLE_COLUMNS: [Modality; 4] = [Modality::Fl, Modality::T1, Modality::Tc, Modality::T2];

const AVAILABLE: &str = "•";
const MISSING: &str = "◦";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRow {
    pub delta: ModalityIndicator,
    /// Mean WT, TC, ET DSC over test cases.
    pub dsc: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioTable {
    pub rows: Vec<ScenarioRow>,
    pub average: [f64; 3],
}

pub(crate) fn mean3<'a>(it: impl IntoIterator<Item = &'a [f64; 3]>) -> [f64; 3] {
    let mut s = [0.0; 3];
    let mut n = 0usize;
    for v in it {
        for k in 0..3 {
            s[k] += v[k];
        }
        n += 1;
    }
    if n == 0 {
        return [f64::NAN; 3];
    }
    s.map(|x| x / n as f64)
}

impl ScenarioTable {
    /// Sorts rows into published order; the average is recomputed.
    pub fn new(mut rows: Vec<ScenarioRow>) -> Self {
        let order = table_scenario_order();
        rows.sort_by_key(|r| order.iter().position(|d| *d == r.delta));
        let average = mean3(rows.iter().map(|r| &r.dsc));
        Self { rows, average }
    }

    pub fn row(&self, delta: ModalityIndicator) -> Option<&ScenarioRow> {
        self.rows.iter().find(|r| r.delta == delta)
    }

    fn cells(&self) -> Vec<Vec<String>> {
        let mut out: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let mut c: Vec<String> = TABLE_COLUMNS
                    .iter()
                    .map(|m| if r.delta.is_available(*m) { AVAILABLE } else { MISSING }.to_string())
                    .collect();
                c.extend(r.dsc.iter().map(|v| format!("{v:.4}")));
                c
            })
            .collect();
        let mut avg = vec!["Average".to_string(), String::new(), String::new(), String::new()];
        avg.extend(self.average.iter().map(|v| format!("{v:.4}")));
        out.push(avg);
        out
    }

    fn header() -> Vec<String> {
        TABLE_COLUMNS
            .iter()
            .map(|m| m.name().to_string())
            .chain(["WT", "TC", "ET"].map(String::from))
            .collect()
    }

    pub fn to_tsv(&self) -> String {
        render_tsv(&Self::header(), &self.cells())
    }

    pub fn to_text(&self) -> String {
        render_text(&Self::header(), &self.cells())
    }
}

/// A labelled comparison table (one row per ablation variant).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub title: String,
    pub key_headers: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub keys: Vec<String>,
    /// WT, TC, ET averaged over the fifteen scenarios.
    pub dsc: [f64; 3],
}

impl ComparisonTable {
    fn header(&self) -> Vec<String> {
        self.key_headers
            .iter()
            .cloned()
            .chain(["WT", "TC", "ET"].map(String::from))
            .collect()
    }

    fn cells(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                r.keys
                    .iter()
                    .cloned()
                    .chain(r.dsc.iter().map(|v| format!("{v:.4}")))
                    .collect()
            })
            .collect()
    }

    pub fn to_tsv(&self) -> String {
        render_tsv(&self.header(), &self.cells())
    }

    pub fn to_text(&self) -> String {
        format!("{}\n{}", self.title, render_text(&self.header(), &self.cells()))
    }
}

fn render_tsv(header: &[String], rows: &[Vec<String>]) -> String {
    let mut s = header.join("\t");
    s.push('\n');
    for r in rows {
        s.push_str(&r.join("\t"));
        s.push('\n');
    }
    s
}

fn render_text(header: &[String], rows: &[Vec<String>]) -> String {
    let width = |i: usize| {
        std::iter::once(&header[i])
            .chain(rows.iter().map(|r| &r[i]))
            .map(|c| c.chars().count())
            .max()
            .unwrap_or(0)
    };
    let widths: Vec<usize> = (0..header.len()).map(width).collect();
    let line = |cells: &[String]| {
        let mut s = String::new();
        for (i, c) in cells.iter().enumerate() {
            let pad = widths[i] - c.chars().count();
            if i > 0 {
                s.push_str("  ");
            }
            let _ = write!(s, "{}{c}", " ".repeat(pad));
        }
        s.trim_end().to_string() + "\n"
    };
    let mut s = line(header);
    s.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    s.push('\n');
    for r in rows {
        s.push_str(&line(r));
    }
    s
}
