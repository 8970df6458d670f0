//! Region DSC, ET post-processing, sliding-window inference and the
//! 15-scenario evaluation.

mod efficiency;
mod tables;

pub use efficiency::{efficiency_factor, EfficiencyInput};
pub use tables::{table_scenario_order, ComparisonRow, ComparisonTable, ScenarioRow, ScenarioTable, TABLE_COLUMNS};

use serde::{Deserialize, Serialize};

use crate::backbone::DeMoSeg;
use crate::diffops::{Graph, Tensor};
use crate::error::{shape_err, Error, Result};
use crate::modality::ModalityIndicator;
use crate::trainer::{crop_case, Checkpoint};
use crate::volume_io::{voxel_count, CaseRecord, DatasetManifest, Shape3, Split};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Region {
    Wt,
    Tc,
    Et,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Wt, Region::Tc, Region::Et];

    pub fn contains(self, label: u8) -> bool {
        match self {
            Region::Wt => matches!(label, 1..=3),
            Region::Tc => matches!(label, 1 | 3),
            Region::Et => label == 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Region::Wt => "WT",
            Region::Tc => "TC",
            Region::Et => "ET",
        }
    }
}

pub fn region_mask(labels: &[u8], region: Region) -> Vec<bool> {
    labels.iter().map(|&l| region.contains(l)).collect()
}

/// Value returned when both masks are empty.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmptyConvention {
    #[default]
    One,
    Zero,
}

/// `2|A∩B| / (|A|+|B|)`.
pub fn dsc(pred: &[bool], gt: &[bool], empty: EmptyConvention) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(shape_err("dsc", format!("{} vs {} voxels", pred.len(), gt.len())));
    }
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += (p && g) as usize;
        a += p as usize;
        b += g as usize;
    }
    if a + b == 0 {
        return Ok(match empty {
            EmptyConvention::One => 1.0,
            EmptyConvention::Zero => 0.0,
        });
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

/// WT, TC, ET DSC of one labelled prediction.
pub fn region_dsc(pred: &[u8], gt: &[u8], empty: EmptyConvention) -> Result<[f64; 3]> {
    let mut out = [0.0; 3];
    for (o, r) in out.iter_mut().zip(Region::ALL) {
        *o = dsc(&region_mask(pred, r), &region_mask(gt, r), empty)?;
    }
    Ok(out)
}

pub const ET_THRESHOLD_FULL: usize = 500;
pub const FULL_VOLUME: [usize; 3] = [240, 240, 155];

/// The 500-voxel ET threshold scaled by volume ratio, rounded.
pub fn scaled_et_threshold(shape: Shape3) -> usize {
    let ratio = voxel_count(shape) as f64 / voxel_count(FULL_VOLUME) as f64;
    (ET_THRESHOLD_FULL as f64 * ratio).round() as usize
}

/// Relabels every ET voxel as class 1 when fewer than `threshold` remain.
pub fn postprocess_et(labels: &[u8], threshold: usize) -> Vec<u8> {
    let n_et = labels.iter().filter(|&&l| l == 3).count();
    if n_et > 0 && n_et < threshold {
        labels.iter().map(|&l| if l == 3 { 1 } else { l }).collect()
    } else {
        labels.to_vec()
    }
}

fn window_starts(n: usize, w: usize) -> Vec<usize> {
    let step = (w / 2).max(1);
    let mut s: Vec<usize> = (0..=n - w).step_by(step).collect();
    if *s.last().expect("n >= w") != n - w {
        s.push(n - w);
    }
    s
}

/// Class logits `[K, D, H, W]` averaged uniformly over overlapping windows
/// (stride half the window).
pub fn sliding_window_logits(
    model: &DeMoSeg<f32>,
    case: &CaseRecord,
    delta: ModalityIndicator,
    window: Shape3,
) -> Result<Tensor<f32>> {
    let shape = case.shape();
    if (0..3).any(|a| window[a] > shape[a]) {
        return Err(Error::InvalidArgument(format!("window {window:?} larger than volume {shape:?}")));
    }
    model.config().check_extent(window)?;
    let k = model.config().num_classes;
    let [d, h, w] = shape;
    let mut acc = vec![0.0f32; k * d * h * w];
    let mut hits = vec![0u32; d * h * w];
    let starts = [0, 1, 2].map(|a| window_starts(shape[a], window[a]));
    for &z in &starts[0] {
        for &y in &starts[1] {
            for &x in &starts[2] {
                let patch = crop_case(case, [z, y, x], window)?;
                let inputs: Vec<Tensor<f32>> = patch
                    .volumes
                    .iter()
                    .map(|v| Tensor::from_vec(&[1, window[0], window[1], window[2]], v.clone()))
                    .collect();
                let mut g = Graph::new(model.params());
                let out = model.forward(&mut g, &inputs, delta)?;
                let logits = g.tape.value(out.logits[0]);
                let wp = window[0] * window[1] * window[2];
                for i in 0..window[0] {
                    for j in 0..window[1] {
                        for l in 0..window[2] {
                            let src = (i * window[1] + j) * window[2] + l;
                            let dst = ((z + i) * h + y + j) * w + x + l;
                            hits[dst] += 1;
                            for c in 0..k {
                                acc[c * d * h * w + dst] += logits.data()[c * wp + src];
                            }
                        }
                    }
                }
            }
        }
    }
    let n = d * h * w;
    for (i, v) in acc.iter_mut().enumerate() {
        *v /= hits[i % n] as f32;
    }
    Ok(Tensor::from_vec(&[k, d, h, w], acc))
}

/// Channel argmax; ties go to the lower class.
pub fn argmax_labels(logits: &Tensor<f32>) -> Vec<u8> {
    let k = logits.channels();
    let n = logits.plane();
    (0..n)
        .map(|i| {
            let mut best = 0;
            for c in 1..k {
                if logits.data()[c * n + i] > logits.data()[best * n + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub window: Shape3,
    pub empty: EmptyConvention,
    pub postprocess: bool,
    /// `None` scales the full-resolution threshold to the case volume.
    pub et_threshold: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            window: [16, 16, 16],
            empty: EmptyConvention::One,
            postprocess: true,
            et_threshold: None,
        }
    }
}

/// Per-case DSC for one scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DscReport {
    pub delta: ModalityIndicator,
    pub case_ids: Vec<String>,
    pub per_case: Vec<[f64; 3]>,
    pub mean: [f64; 3],
}

/// Scores any segmenter `predict(case, delta) -> labels` over the given
/// scenarios; rows come back in published table order.
pub fn evaluate_with<F>(
    cases: &[CaseRecord],
    scenarios: &[ModalityIndicator],
    cfg: &EvalConfig,
    mut predict: F,
) -> Result<(ScenarioTable, Vec<DscReport>)>
where
    F: FnMut(&CaseRecord, ModalityIndicator) -> Result<Vec<u8>>,
{
    if cases.is_empty() {
        return Err(Error::InvalidArgument("test split is empty".into()));
    }
    let mut reports = Vec::with_capacity(scenarios.len());
    for &delta in scenarios {
        let mut per_case = Vec::with_capacity(cases.len());
        for case in cases {
            let mut pred = predict(case, delta)?;
            if cfg.postprocess {
                let t = cfg.et_threshold.unwrap_or_else(|| scaled_et_threshold(case.shape()));
                pred = postprocess_et(&pred, t);
            }
            per_case.push(region_dsc(&pred, case.labels.labels(), cfg.empty)?);
        }
        reports.push(DscReport {
            delta,
            case_ids: cases.iter().map(|c| c.case_id.clone()).collect(),
            mean: tables::mean3(&per_case),
            per_case,
        });
    }
    let table = ScenarioTable::new(
        reports
            .iter()
            .map(|r| ScenarioRow {
                delta: r.delta,
                dsc: r.mean,
            })
            .collect(),
    );
    Ok((table, reports))
}

/// Sliding-window evaluation of `model` on already-normalized cases.
pub fn evaluate_scenarios(
    model: &DeMoSeg<f32>,
    cases: &[CaseRecord],
    scenarios: &[ModalityIndicator],
    cfg: &EvalConfig,
) -> Result<(ScenarioTable, Vec<DscReport>)> {
    evaluate_with(cases, scenarios, cfg, |case, delta| {
        Ok(argmax_labels(&sliding_window_logits(model, case, delta, cfg.window)?))
    })
}

/// Loads and normalizes the test split and evaluates the checkpoint's model.
pub fn evaluate_checkpoint(
    ck: &Checkpoint,
    manifest: &DatasetManifest,
    scenarios: &[ModalityIndicator],
    cfg: &EvalConfig,
) -> Result<(ScenarioTable, Vec<DscReport>)> {
    let cases = load_normalized(manifest, Split::Test)?;
    evaluate_scenarios(&ck.model, &cases, scenarios, cfg)
}

pub fn load_normalized(manifest: &DatasetManifest, split: Split) -> Result<Vec<CaseRecord>> {
    manifest
        .load_split(split)?
        .iter()
        .map(CaseRecord::normalized)
        .collect()
}
