//! Patch cropping and light augmentation.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume_io::{voxel_count, CaseRecord, Shape3};

/// Aligned crop of all four modalities and the labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub shape: Shape3,
    /// Canonical modality order, C-order voxels.
    pub volumes: [Vec<f32>; 4],
    pub labels: Vec<u8>,
    pub offset: Shape3,
}

impl Patch {
    pub fn has_foreground(&self) -> bool {
        self.labels.iter().any(|&l| l > 0)
    }
}

/// Copies the `shape` block starting at `offset` out of a C-order grid.
pub fn crop<V: Copy>(src: &[V], dims: Shape3, offset: Shape3, shape: Shape3) -> Vec<V> {
    let mut out = Vec::with_capacity(voxel_count(shape));
    for z in 0..shape[0] {
        for y in 0..shape[1] {
            let row = ((offset[0] + z) * dims[1] + offset[1] + y) * dims[2] + offset[2];
            out.extend_from_slice(&src[row..row + shape[2]]);
        }
    }
    out
}

pub fn crop_case(case: &CaseRecord, offset: Shape3, shape: Shape3) -> Result<Patch> {
    let dims = case.shape();
    if (0..3).any(|a| offset[a] + shape[a] > dims[a]) {
        return Err(Error::InvalidArgument(format!(
            "patch {shape:?} at {offset:?} exceeds volume {dims:?}"
        )));
    }
    Ok(Patch {
        shape,
        volumes: [0, 1, 2, 3].map(|m| crop(case.volumes[m].data(), dims, offset, shape)),
        labels: crop(case.labels.labels(), dims, offset, shape),
        offset,
    })
}

/// Random crop. With probability `foreground_prob` (and when the case has
/// tumor) the crop is centred-ish on a random tumor voxel so it is
/// guaranteed to contain one.
pub fn sample_patch<R: Rng + ?Sized>(case: &CaseRecord, shape: Shape3, foreground_prob: f64, rng: &mut R) -> Result<Patch> {
    let dims = case.shape();
    if (0..3).any(|a| shape[a] > dims[a] || shape[a] == 0) {
        return Err(Error::InvalidArgument(format!("patch {shape:?} larger than volume {dims:?}")));
    }
    let want_fg = rng.random_bool(foreground_prob.clamp(0.0, 1.0));
    let fg: Vec<usize> = if want_fg {
        case.labels
            .labels()
            .iter()
            .enumerate()
            .filter(|(_, &l)| l > 0)
            .map(|(i, _)| i)
            .collect()
    } else {
        Vec::new()
    };
    let mut offset = [0; 3];
    if fg.is_empty() {
        for a in 0..3 {
            offset[a] = rng.random_range(0..=dims[a] - shape[a]);
        }
    } else {
        let v = fg[rng.random_range(0..fg.len())];
        let pos = [v / (dims[1] * dims[2]), (v / dims[2]) % dims[1], v % dims[2]];
        for a in 0..3 {
            let lo = pos[a].saturating_sub(shape[a] - 1);
            let hi = pos[a].min(dims[a] - shape[a]);
            offset[a] = rng.random_range(lo..=hi);
        }
    }
    crop_case(case, offset, shape)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub mirror: bool,
    pub rotate: bool,
    pub noise: bool,
    pub blur: bool,
    pub noise_std: f64,
    pub blur_prob: f64,
    pub blur_sigma: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            mirror: true,
            rotate: true,
            noise: true,
            blur: true,
            noise_std: 0.1,
            blur_prob: 0.2,
            blur_sigma: [0.5, 1.0],
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            mirror: false,
            rotate: false,
            noise: false,
            blur: false,
            ..Self::default()
        }
    }
}

/// Reverses voxel order along `axis`.
pub fn flip<V: Copy>(src: &[V], dims: Shape3, axis: usize) -> Vec<V> {
    let mut out = Vec::with_capacity(src.len());
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let mut p = [z, y, x];
                p[axis] = dims[axis] - 1 - p[axis];
                out.push(src[(p[0] * dims[1] + p[1]) * dims[2] + p[2]]);
            }
        }
    }
    out
}

/// Quarter turn in the plane of axes `(a, b)`: `out[.., i, .., j] =
/// in[.., j, .., n-1-i]`. The two extents must match.
pub fn rot90<V: Copy>(src: &[V], dims: Shape3, a: usize, b: usize) -> Vec<V> {
    debug_assert_eq!(dims[a], dims[b]);
    let n = dims[a];
    let mut out = Vec::with_capacity(src.len());
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let q = [z, y, x];
                let mut p = q;
                p[a] = q[b];
                p[b] = n - 1 - q[a];
                out.push(src[(p[0] * dims[1] + p[1]) * dims[2] + p[2]]);
            }
        }
    }
    out
}

fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let r = (3.0 * sigma).ceil() as i64;
    let w: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|v| (v / z) as f32).collect()
}

/// Separable Gaussian smoothing with edge clamping.
pub fn gaussian_blur(src: &[f32], dims: Shape3, sigma: f64) -> Vec<f32> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let mut cur = src.to_vec();
    let strides = [dims[1] * dims[2], dims[2], 1];
    for axis in 0..3 {
        let mut next = vec![0.0f32; cur.len()];
        for (i, dst) in next.iter_mut().enumerate() {
            let pos = (i / strides[axis]) % dims[axis];
            let base = i - pos * strides[axis];
            let mut acc = 0.0;
            for (t, &w) in k.iter().enumerate() {
                let q = (pos as i64 + t as i64 - r).clamp(0, dims[axis] as i64 - 1) as usize;
                acc += w * cur[base + q * strides[axis]];
            }
            *dst = acc;
        }
        cur = next;
    }
    cur
}

/// Geometric transforms act on every modality and the labels identically;
/// intensity transforms touch only the images.
pub fn augment<R: Rng + ?Sized>(mut p: Patch, rng: &mut R, cfg: &AugmentConfig) -> Patch {
    let dims = p.shape;
    if cfg.rotate && rng.random_bool(0.5) {
        let planes: Vec<(usize, usize)> = [(1, 2), (0, 2), (0, 1)]
            .into_iter()
            .filter(|&(a, b)| dims[a] == dims[b])
            .collect();
        if !planes.is_empty() {
            let (a, b) = planes[rng.random_range(0..planes.len())];
            let turns = rng.random_range(1..4);
            for _ in 0..turns {
                for v in p.volumes.iter_mut() {
                    *v = rot90(v, dims, a, b);
                }
                p.labels = rot90(&p.labels, dims, a, b);
            }
        }
    }
    if cfg.mirror {
        for axis in 0..3 {
            if rng.random_bool(0.5) {
                for v in p.volumes.iter_mut() {
                    *v = flip(v, dims, axis);
                }
                p.labels = flip(&p.labels, dims, axis);
            }
        }
    }
    if cfg.blur {
        for v in p.volumes.iter_mut() {
            if rng.random_bool(cfg.blur_prob) {
                let sigma = rng.random_range(cfg.blur_sigma[0]..=cfg.blur_sigma[1]);
                *v = gaussian_blur(v, dims, sigma);
            }
        }
    }
    if cfg.noise && cfg.noise_std > 0.0 {
        let n = Normal::new(0.0, cfg.noise_std).expect("positive std");
        for v in p.volumes.iter_mut() {
            for x in v.iter_mut() {
                *x += n.sample(rng) as f32;
            }
        }
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume_io::{generate_phantom, PhantomSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn case() -> CaseRecord {
        generate_phantom(&PhantomSpec::desk([16, 16, 16], 3)).unwrap().normalized().unwrap()
    }

    #[test]
    fn full_size_patch_is_identity() {
        let c = case();
        let p = sample_patch(&c, [16, 16, 16], 0.5, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(p.offset, [0, 0, 0]);
        assert_eq!(p.labels, c.labels.labels());
        assert_eq!(p.volumes[2], c.volumes[2].data());
    }

    #[test]
    fn oversized_patch_rejected() {
        assert!(sample_patch(&case(), [32, 8, 8], 0.5, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn foreground_bias_and_determinism() {
        let c = case();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let hits = (0..1000)
            .filter(|_| sample_patch(&c, [4, 4, 4], 0.5, &mut rng).unwrap().has_foreground())
            .count();
        assert!(hits >= 500, "{hits}");
        let a = sample_patch(&c, [8, 8, 8], 0.5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_patch(&c, [8, 8, 8], 0.5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.offset, b.offset);
    }

    #[test]
    fn toggles_off_is_identity() {
        let c = case();
        let p = sample_patch(&c, [8, 8, 8], 0.5, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let q = augment(p.clone(), &mut ChaCha8Rng::seed_from_u64(3), &AugmentConfig::none());
        assert_eq!(p, q);
    }

    #[test]
    fn flip_is_an_involution_and_rot90_has_order_four() {
        let dims = [2, 3, 3];
        let v: Vec<u32> = (0..18).collect();
        for axis in 0..3 {
            assert_eq!(flip(&flip(&v, dims, axis), dims, axis), v);
        }
        let mut r = v.clone();
        for _ in 0..4 {
            r = rot90(&r, dims, 1, 2);
        }
        assert_eq!(r, v);
        assert_ne!(rot90(&v, dims, 1, 2), v);
    }

    #[test]
    fn geometry_keeps_voxel_correspondence() {
        let c = case();
        let p = sample_patch(&c, [8, 8, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        // Encode each label into the t1 channel so correspondence is checkable.
        let mut tagged = p.clone();
        tagged.volumes[0] = p.labels.iter().map(|&l| l as f32 * 100.0).collect();
        let cfg = AugmentConfig {
            noise: false,
            blur: false,
            ..AugmentConfig::default()
        };
        for seed in 0..20 {
            let q = augment(tagged.clone(), &mut ChaCha8Rng::seed_from_u64(seed), &cfg);
            for (v, l) in q.volumes[0].iter().zip(&q.labels) {
                assert_eq!(*v, *l as f32 * 100.0);
            }
        }
    }

    #[test]
    fn intensity_transforms_leave_labels_alone() {
        let c = case();
        let p = sample_patch(&c, [8, 8, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let cfg = AugmentConfig {
            mirror: false,
            rotate: false,
            blur_prob: 1.0,
            ..AugmentConfig::default()
        };
        let q = augment(p.clone(), &mut ChaCha8Rng::seed_from_u64(6), &cfg);
        assert_eq!(q.labels, p.labels);
        assert_ne!(q.volumes[0], p.volumes[0]);
    }

    #[test]
    fn blur_preserves_constants() {
        let v = vec![2.5f32; 27];
        for x in gaussian_blur(&v, [3, 3, 3], 0.8) {
            assert!((x - 2.5).abs() < 1e-5);
        }
    }
}
