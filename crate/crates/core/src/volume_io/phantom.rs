//! Deterministic brain-tumor phantoms.
//!
//! A case is a brain ellipsoid holding three nested tumor ellipsoids
//! (whole tumor ⊇ tumor core ⊇ enhancing tumor) that share one center and
//! one smooth surface modulation, so nesting holds voxel by voxel. Each
//! modality renders the regions with its own contrast: the fluid-sensitive
//! pair (t2, fl) lights up edema, tc lights up the enhancing region, and t1
//! shows moderate hypointensity across the core.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    voxel_count, CaseRecord, LabelVolume, Shape3, Volume, LABEL_BACKGROUND, LABEL_CORE, LABEL_EDEMA, LABEL_ENHANCING,
};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Outside,
    Brain,
    Edema,
    Core,
    Enhancing,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionStats {
    pub mean: f64,
    pub std: f64,
}

const fn rs(mean: f64, std: f64) -> RegionStats {
    RegionStats { mean, std }
}

/// Per-region intensity distribution for one modality.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntensityProfile {
    pub outside: RegionStats,
    pub brain: RegionStats,
    pub edema: RegionStats,
    pub core: RegionStats,
    pub enhancing: RegionStats,
}

impl IntensityProfile {
    pub fn stats(&self, region: Region) -> RegionStats {
        match region {
            Region::Outside => self.outside,
            Region::Brain => self.brain,
            Region::Edema => self.edema,
            Region::Core => self.core,
            Region::Enhancing => self.enhancing,
        }
    }

    /// Default contrasts in `[t1, tc, t2, fl]` order. Tissue noise is half a
    /// contrast unit; each modality sees the whole tumor at least weakly.
    pub fn defaults() -> [IntensityProfile; 4] {
        let bg = rs(0.0, 2.0);
        [
            // t1: hypointense tumor, strongest in the core
            IntensityProfile {
                outside: bg,
                brain: rs(400.0, 25.0),
                edema: rs(355.0, 25.0),
                core: rs(310.0, 25.0),
                enhancing: rs(370.0, 25.0),
            },
            // tc: bright enhancing region, dark necrosis
            IntensityProfile {
                outside: bg,
                brain: rs(500.0, 30.0),
                edema: rs(545.0, 30.0),
                core: rs(450.0, 30.0),
                enhancing: rs(680.0, 30.0),
            },
            // t2: fluid bright, core brightest
            IntensityProfile {
                outside: bg,
                brain: rs(300.0, 20.0),
                edema: rs(380.0, 20.0),
                core: rs(400.0, 20.0),
                enhancing: rs(360.0, 20.0),
            },
            // fl: edema brightest, suppressed core
            IntensityProfile {
                outside: bg,
                brain: rs(250.0, 20.0),
                edema: rs(350.0, 20.0),
                core: rs(290.0, 20.0),
                enhancing: rs(310.0, 20.0),
            },
        ]
    }
}

/// Geometry and contrast of one synthetic case.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub shape: Shape3,
    pub seed: u64,
    /// Brain ellipsoid semi-axes (voxels), centered in the grid.
    pub brain_radii: [f64; 3],
    pub wt_radii: [f64; 3],
    pub tc_radii: [f64; 3],
    /// All-zero disables the enhancing region.
    pub et_radii: [f64; 3],
    /// Relative amplitude of the shared surface modulation.
    pub surface_jitter: f64,
    /// Max tumor center offset from the grid center (voxels, per axis).
    pub center_jitter: f64,
    /// Tumor radii are scaled by a factor drawn from this range.
    pub size_range: (f64, f64),
    pub profiles: [IntensityProfile; 4],
}

impl PhantomSpec {
    /// Radii proportional to the grid.
    pub fn desk(shape: Shape3, seed: u64) -> Self {
        let scaled = |f: f64| shape.map(|d| d as f64 * f);
        Self {
            shape,
            seed,
            brain_radii: scaled(0.42),
            wt_radii: scaled(0.24),
            tc_radii: scaled(0.14),
            et_radii: scaled(0.08),
            surface_jitter: 0.15,
            center_jitter: shape.iter().min().copied().unwrap_or(0) as f64 * 0.06,
            size_range: (0.85, 1.1),
            profiles: IntensityProfile::defaults(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(format!("phantom spec: {msg}")));
        if self.shape.iter().any(|&d| d < 2) {
            return bad(format!("shape {:?} too small", self.shape));
        }
        let (lo, hi) = self.size_range;
        if !(lo > 0.0 && hi >= lo) || self.surface_jitter < 0.0 || self.surface_jitter >= 1.0 || self.center_jitter < 0.0 {
            return bad("jitter parameters out of range".into());
        }
        for i in 0..3 {
            let (b, w, t, e) = (self.brain_radii[i], self.wt_radii[i], self.tc_radii[i], self.et_radii[i]);
            if !(b > 0.0 && w > 0.0 && t > 0.0 && e >= 0.0) {
                return bad(format!("radii must be positive on axis {i}"));
            }
            if !(e <= t && t <= w) {
                return bad(format!("radii not nested on axis {i}: et {e} ≤ tc {t} ≤ wt {w} violated"));
            }
            if b > self.shape[i] as f64 / 2.0 {
                return bad(format!("brain radius {b} exceeds half extent {} on axis {i}", self.shape[i] as f64 / 2.0));
            }
            let reach = w * hi * (1.0 + self.surface_jitter) + self.center_jitter;
            if reach > b {
                return bad(format!("tumor reach {reach:.2} exceeds brain radius {b} on axis {i}"));
            }
        }
        Ok(())
    }
}

fn normalized_radius(p: [f64; 3], radii: [f64; 3]) -> f64 {
    (0..3).map(|i| (p[i] / radii[i]).powi(2)).sum::<f64>().sqrt()
}

/// Renders a case. Identical specs give bit-identical records.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<CaseRecord> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let [d, h, w] = spec.shape;
    let grid_center = spec.shape.map(|e| (e as f64 - 1.0) / 2.0);
    let tumor_center: [f64; 3] =
        std::array::from_fn(|i| grid_center[i] + rng.random_range(-1.0..=1.0) * spec.center_jitter);
    let scale = rng.random_range(spec.size_range.0..=spec.size_range.1);
    let wt = spec.wt_radii.map(|r| r * scale);
    let tc = spec.tc_radii.map(|r| r * scale);
    let et = spec.et_radii.map(|r| r * scale);
    let has_et = et.iter().all(|&r| r > 0.0);
    // Shared surface modulation: first and second order angular terms.
    let coeffs: [f64; 6] = std::array::from_fn(|_| rng.random_range(-1.0..=1.0));
    let norm: f64 = coeffs.iter().map(|c| c.abs()).sum::<f64>().max(1e-12);

    let n = voxel_count(spec.shape);
    let mut labels = vec![LABEL_BACKGROUND; n];
    let mut mask = vec![false; n];
    let mut regions = vec![Region::Outside; n];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = (z * h + y) * w + x;
                let p = [z as f64, y as f64, x as f64];
                let brain_rel = std::array::from_fn(|k| p[k] - grid_center[k]);
                let in_brain = normalized_radius(brain_rel, spec.brain_radii) <= 1.0;
                let rel: [f64; 3] = std::array::from_fn(|k| p[k] - tumor_center[k]);
                let len = (rel[0] * rel[0] + rel[1] * rel[1] + rel[2] * rel[2]).sqrt();
                let f = if len > 0.0 {
                    let u = rel.map(|v| v / len);
                    (coeffs[0] * u[0]
                        + coeffs[1] * u[1]
                        + coeffs[2] * u[2]
                        + coeffs[3] * u[0] * u[1]
                        + coeffs[4] * u[1] * u[2]
                        + coeffs[5] * u[0] * u[2])
                        / norm
                } else {
                    0.0
                };
                let limit = 1.0 + spec.surface_jitter * f;
                let (label, region) = if has_et && normalized_radius(rel, et) <= limit {
                    (LABEL_ENHANCING, Region::Enhancing)
                } else if normalized_radius(rel, tc) <= limit {
                    (LABEL_CORE, Region::Core)
                } else if normalized_radius(rel, wt) <= limit {
                    (LABEL_EDEMA, Region::Edema)
                } else if in_brain {
                    (LABEL_BACKGROUND, Region::Brain)
                } else {
                    (LABEL_BACKGROUND, Region::Outside)
                };
                labels[i] = label;
                regions[i] = region;
                mask[i] = in_brain || label != LABEL_BACKGROUND;
            }
        }
    }

    let render = |profile: &IntensityProfile, rng: &mut ChaCha8Rng| -> Result<Volume> {
        let data = regions
            .iter()
            .map(|&r| {
                let s = profile.stats(r);
                let z: f64 = StandardNormal.sample(rng);
                (s.mean + s.std * z) as f32
            })
            .collect();
        Volume::new(spec.shape, data)
    };
    let volumes = [
        render(&spec.profiles[0], &mut rng)?,
        render(&spec.profiles[1], &mut rng)?,
        render(&spec.profiles[2], &mut rng)?,
        render(&spec.profiles[3], &mut rng)?,
    ];
    CaseRecord::new(
        format!("phantom_{:06}", spec.seed),
        volumes,
        LabelVolume::new(spec.shape, labels)?,
        mask,
    )
}
