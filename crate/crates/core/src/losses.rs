//! Feature distillation, Dice + cross-entropy, deep supervision and the
//! combined objective.

use serde::{Deserialize, Serialize};

use crate::backbone::ForwardOutput;
use crate::decoupler::{DecoupledFeatures, Subspaces};
use crate::diffops::tape::softmax_axis;
use crate::diffops::{CustomOp, Real, Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};

pub const DICE_EPS: f64 = 1e-5;

/// Which sub-space views the distillation term compares.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KdPlacement {
    None,
    AfterCssa,
    #[default]
    BeforeCssa,
}

impl KdPlacement {
    /// Row order of the placement ablation.
    pub const ALL: [KdPlacement; 3] = [KdPlacement::None, KdPlacement::AfterCssa, KdPlacement::BeforeCssa];

    pub fn label(self) -> &'static str {
        match self {
            KdPlacement::None => "w/o L_kd",
            KdPlacement::AfterCssa => "L_kd after CSSA",
            KdPlacement::BeforeCssa => "L_kd before CSSA",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub temperature: f64,
    pub kd_placement: KdPlacement,
    pub kd_detach_teacher: bool,
    pub dice_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            kd_placement: KdPlacement::BeforeCssa,
            kd_detach_teacher: true,
            dice_eps: DICE_EPS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossBreakdown {
    /// Per supervised scale, full resolution first.
    pub seg: Vec<f64>,
    pub weights: Vec<f64>,
    /// `Σ w_s · seg_s`.
    pub seg_total: f64,
    pub kd: f64,
    pub total: f64,
    pub temperature: f64,
}

fn log_softmax_channels(x: &[f64], k: usize, plane: usize, t: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for v in 0..plane {
        let max = (0..k).map(|j| x[j * plane + v] / t).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + (0..k).map(|j| (x[j * plane + v] / t - max).exp()).sum::<f64>().ln();
        for j in 0..k {
            out[j * plane + v] = x[j * plane + v] / t - lse;
        }
    }
    out
}

/// Voxel-mean `KL(softmax(u/t) ‖ softmax(s/t))` over the channel axis.
struct KlOp {
    t: f64,
}

fn kl_parts<T: Real>(u: &Tensor<T>, s: &Tensor<T>, t: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let k = u.channels();
    let plane = u.plane();
    let uf: Vec<f64> = u.data().iter().map(|v| v.as_f64()).collect();
    let sf: Vec<f64> = s.data().iter().map(|v| v.as_f64()).collect();
    let lp = log_softmax_channels(&uf, k, plane, t);
    let lq = log_softmax_channels(&sf, k, plane, t);
    let mut kl = vec![0.0; plane];
    for v in 0..plane {
        kl[v] = (0..k).map(|j| lp[j * plane + v].exp() * (lp[j * plane + v] - lq[j * plane + v])).sum();
    }
    (lp, lq, kl)
}

impl<T: Real> CustomOp<T> for KlOp {
    fn name(&self) -> &'static str {
        "kl_div"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, dy: &Tensor<T>, need: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (u, s) = (inputs[0], inputs[1]);
        let k = u.channels();
        let plane = u.plane();
        let (lp, lq, kl) = kl_parts(u, s, self.t);
        let scale = dy.item().as_f64() / (plane as f64 * self.t);
        let du = need[0].then(|| {
            let mut g = vec![T::zero(); u.numel()];
            for j in 0..k {
                for v in 0..plane {
                    let i = j * plane + v;
                    g[i] = T::lit(scale * lp[i].exp() * (lp[i] - lq[i] - kl[v]));
                }
            }
            Tensor::from_vec(u.shape(), g)
        });
        let ds = need[1].then(|| {
            let g = (0..s.numel()).map(|i| T::lit(-scale * (lp[i].exp() - lq[i].exp()))).collect();
            Tensor::from_vec(s.shape(), g)
        });
        vec![du, ds]
    }
}

/// Voxel-mean channel-wise KL divergence between two equally shaped maps.
pub fn kl_divergence<T: Real>(tape: &mut Tape<T>, student: Var, teacher: Var, t: f64) -> Result<Var> {
    if !(t > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {t}")));
    }
    let (us, ss) = (tape.shape(student), tape.shape(teacher));
    if us != ss || us.len() < 2 {
        return Err(shape_err("kl_divergence", format!("student {us:?}, teacher {ss:?}")));
    }
    let (_, _, kl) = kl_parts(tape.value(student), tape.value(teacher), t);
    let value = kl.iter().sum::<f64>() / kl.len() as f64;
    Ok(tape.custom(&[student, teacher], Tensor::scalar(T::lit(value)), Box::new(KlOp { t })))
}

/// Ordered `(teacher m, student n)` pairs with both modalities present.
pub fn kd_pairs(features: &[DecoupledFeatures]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, fm) in features.iter().enumerate() {
        for (j, fn_) in features.iter().enumerate() {
            if fm.modality != fn_.modality {
                out.push((i, j));
            }
        }
    }
    out
}

/// `Σ_m Σ_{n≠m} KL(σ(u_{n→m}/t) ‖ σ(s_m/t))` over available modalities.
/// `view` selects the pre- or post-CSSA sub-spaces.
pub fn kd_loss<T: Real>(
    tape: &mut Tape<T>,
    features: &[DecoupledFeatures],
    view: impl Fn(&DecoupledFeatures) -> Subspaces,
    t: f64,
    detach_teacher: bool,
) -> Result<Var> {
    if !(t > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {t}")));
    }
    let mut total: Option<Var> = None;
    let mut teachers: Vec<Option<Var>> = vec![None; features.len()];
    for (i, j) in kd_pairs(features) {
        let (fm, fn_) = (&features[i], &features[j]);
        let teacher = match teachers[i] {
            Some(v) => v,
            None => {
                let mut v = view(fm).self_feature;
                if detach_teacher {
                    v = tape.detach(v);
                }
                teachers[i] = Some(v);
                v
            }
        };
        let student = view(fn_)
            .mutual_for(fm.modality)
            .ok_or_else(|| Error::Contract(format!("{} has no mutual block for {}", fn_.modality, fm.modality)))?;
        let term = kl_divergence(tape, student, teacher, t)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(total.unwrap_or_else(|| tape.constant(Tensor::scalar(T::zero()))))
}

/// Mean-over-classes soft Dice term and voxel-mean cross-entropy from class
/// probabilities `p: [K, N]` (row-major) and labels.
pub fn dice_ce_from_probs(p: &[f64], labels: &[u8], k: usize, eps: f64) -> Result<(f64, f64)> {
    let n = labels.len();
    if p.len() != k * n {
        return Err(shape_err("dice_ce", format!("{} probabilities for {k} classes x {n} voxels", p.len())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l as usize >= k) {
        return Err(Error::InvalidArgument(format!("label id {l} outside 0..{k}")));
    }
    let mut dice = 0.0;
    for c in 0..k {
        let row = &p[c * n..(c + 1) * n];
        let (mut inter, mut g, mut pr) = (0.0, 0.0, 0.0);
        for (v, &pv) in row.iter().enumerate() {
            let gv = (labels[v] as usize == c) as u8 as f64;
            inter += gv * pv;
            g += gv;
            pr += pv;
        }
        dice += 1.0 - (2.0 * inter + eps) / (g + pr + eps);
    }
    let ce = -labels
        .iter()
        .enumerate()
        .map(|(v, &l)| p[l as usize * n + v].ln())
        .sum::<f64>()
        / n as f64;
    Ok((dice / k as f64, ce))
}

struct DiceCeOp {
    labels: Vec<u8>,
    eps: f64,
}

impl<T: Real> CustomOp<T> for DiceCeOp {
    fn name(&self) -> &'static str {
        "dice_ce"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, dy: &Tensor<T>, need: &[bool]) -> Vec<Option<Tensor<T>>> {
        if !need[0] {
            return vec![None];
        }
        let z = inputs[0];
        let k = z.channels();
        let n = z.plane();
        let p: Vec<f64> = softmax_axis(z, 0).data().iter().map(|v| v.as_f64()).collect();
        let scale = dy.item().as_f64();
        // dL/dp for the Dice term.
        let mut a = vec![0.0; k * n];
        for c in 0..k {
            let row = &p[c * n..(c + 1) * n];
            let (mut inter, mut g, mut pr) = (0.0, 0.0, 0.0);
            for (v, &pv) in row.iter().enumerate() {
                let gv = (self.labels[v] as usize == c) as u8 as f64;
                inter += gv * pv;
                g += gv;
                pr += pv;
            }
            let den = g + pr + self.eps;
            let num = 2.0 * inter + self.eps;
            for v in 0..n {
                let gv = (self.labels[v] as usize == c) as u8 as f64;
                a[c * n + v] = -(2.0 * gv * den - num) / (den * den) / k as f64;
            }
        }
        let mut out = vec![T::zero(); k * n];
        for v in 0..n {
            let dot: f64 = (0..k).map(|c| p[c * n + v] * a[c * n + v]).sum();
            for c in 0..k {
                let i = c * n + v;
                let gv = (self.labels[v] as usize == c) as u8 as f64;
                let ce = (p[i] - gv) / n as f64;
                out[i] = T::lit(scale * (p[i] * (a[i] - dot) + ce));
            }
        }
        vec![Some(Tensor::from_vec(z.shape(), out))]
    }
}

/// Soft Dice + cross-entropy on `logits: [K, ...]` against class ids.
pub fn dice_ce_loss<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[u8], eps: f64) -> Result<Var> {
    let z = tape.value(logits);
    if z.shape().len() < 2 || z.plane() != labels.len() {
        return Err(shape_err("dice_ce_loss", format!("logits {:?} for {} labels", z.shape(), labels.len())));
    }
    let p: Vec<f64> = softmax_axis(z, 0).data().iter().map(|v| v.as_f64()).collect();
    let (dice, ce) = dice_ce_from_probs(&p, labels, z.channels(), eps)?;
    let op = DiceCeOp {
        labels: labels.to_vec(),
        eps,
    };
    Ok(tape.custom(&[logits], Tensor::scalar(T::lit(dice + ce)), Box::new(op)))
}

/// `w_s ∝ 2^-s`, normalized.
pub fn deep_supervision_weights(num_scales: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..num_scales).map(|s| 0.5f64.powi(s as i32)).collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / z).collect()
}

/// Halves each extent by majority vote over 2×2×2 blocks; ties go to the
/// lower label id.
pub fn downsample_labels(labels: &[u8], shape: [usize; 3], num_classes: usize) -> Result<(Vec<u8>, [usize; 3])> {
    let [d, h, w] = shape;
    if labels.len() != d * h * w || shape.iter().any(|&s| s % 2 != 0 || s == 0) {
        return Err(shape_err("downsample_labels", format!("{} labels for shape {shape:?}", labels.len())));
    }
    let os = [d / 2, h / 2, w / 2];
    let mut out = Vec::with_capacity(os[0] * os[1] * os[2]);
    let mut votes = vec![0u8; num_classes];
    for z in 0..os[0] {
        for y in 0..os[1] {
            for x in 0..os[2] {
                votes.iter_mut().for_each(|v| *v = 0);
                for dz in 0..2 {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let l = labels[((2 * z + dz) * h + 2 * y + dy) * w + 2 * x + dx] as usize;
                            if l >= num_classes {
                                return Err(Error::InvalidArgument(format!("label id {l} outside 0..{num_classes}")));
                            }
                            votes[l] += 1;
                        }
                    }
                }
                let mut best = 0;
                for (c, &v) in votes.iter().enumerate() {
                    if v > votes[best] {
                        best = c;
                    }
                }
                out.push(best as u8);
            }
        }
    }
    Ok((out, os))
}

/// Label pyramid with `levels` entries, full resolution first.
pub fn label_pyramid(labels: &[u8], shape: [usize; 3], levels: usize, num_classes: usize) -> Result<Vec<Vec<u8>>> {
    let mut out = vec![labels.to_vec()];
    let mut cur_shape = shape;
    while out.len() < levels {
        let (next, s) = downsample_labels(out.last().expect("non-empty"), cur_shape, num_classes)?;
        out.push(next);
        cur_shape = s;
    }
    Ok(out)
}

/// `Σ_s w_s · L_seg,s + L_kd` for one forward pass. `targets` is the label
/// pyramid; only its first `weights.len()` levels are used.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    out: &ForwardOutput,
    targets: &[Vec<u8>],
    supervised_scales: usize,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    if supervised_scales == 0 || supervised_scales > out.logits.len() || targets.len() < supervised_scales {
        return Err(Error::InvalidArgument(format!(
            "{supervised_scales} supervised scales for {} logits and {} targets",
            out.logits.len(),
            targets.len()
        )));
    }
    let weights = deep_supervision_weights(supervised_scales);
    let mut seg = Vec::with_capacity(supervised_scales);
    let mut acc: Option<Var> = None;
    for (s, &w) in weights.iter().enumerate() {
        let l = dice_ce_loss(tape, out.logits[s], &targets[s], cfg.dice_eps)?;
        seg.push(tape.value(l).item().as_f64());
        let term = tape.scale(l, w);
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    let seg_var = acc.expect("at least one scale");
    let seg_total = tape.value(seg_var).item().as_f64();
    let kd_var = match cfg.kd_placement {
        KdPlacement::None => None,
        KdPlacement::BeforeCssa => Some(kd_loss(tape, &out.features, |f| f.pre, cfg.temperature, cfg.kd_detach_teacher)?),
        KdPlacement::AfterCssa => Some(kd_loss(
            tape,
            &out.features,
            |f| *f.post_or_pre(),
            cfg.temperature,
            cfg.kd_detach_teacher,
        )?),
    };
    let (total, kd) = match kd_var {
        Some(k) => (tape.add(seg_var, k)?, tape.value(k).item().as_f64()),
        None => (seg_var, 0.0),
    };
    let breakdown = LossBreakdown {
        seg,
        weights,
        seg_total,
        kd,
        total: tape.value(total).item().as_f64(),
        temperature: cfg.temperature,
    };
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite(format!("loss is {}", breakdown.total)));
    }
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modality::Modality;
    use proptest::prelude::*;

    fn feature(tape: &mut Tape<f64>, m: Modality, self_v: Tensor<f64>, mutual_v: Tensor<f64>) -> DecoupledFeatures {
        let c = self_v.channels();
        let self_feature = tape.constant(self_v);
        let o = m.others();
        let mutual = o.map(|l| (l, tape.constant(mutual_v.clone())));
        DecoupledFeatures {
            modality: m,
            c,
            pre: Subspaces { self_feature, mutual },
            post: None,
        }
    }

    #[test]
    fn two_channel_closed_form_kl() {
        let mut t = Tape::new();
        let u = t.constant(Tensor::from_vec(&[2, 1], vec![3f64.ln(), 0.0]));
        let s = t.constant(Tensor::from_vec(&[2, 1], vec![0.0, 0.0]));
        let kl = kl_divergence(&mut t, u, s, 1.0).unwrap();
        let expected = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        assert!((t.value(kl).item() - expected).abs() < 1e-12);
        assert!((expected - 0.13081).abs() < 1e-5);
    }

    #[test]
    fn identical_subspaces_give_zero_kd_and_twelve_terms() {
        let mut t = Tape::new();
        let v = Tensor::from_vec(&[3, 1, 1, 2], vec![0.1, -0.3, 0.7, 2.0, -1.0, 0.0]);
        let fs: Vec<_> = Modality::ALL.iter().map(|&m| feature(&mut t, m, v.clone(), v.clone())).collect();
        let kd = kd_loss(&mut t, &fs, |f| f.pre, 1.0, true).unwrap();
        assert!(t.value(kd).item().abs() < 1e-15);
        assert_eq!(kd_pairs(&fs).len(), 12);
        assert_eq!(kd_pairs(&fs[..3]).len(), 6);
    }

    #[test]
    fn single_modality_has_no_pairs() {
        let mut t = Tape::new();
        let fs = vec![feature(
            &mut t,
            Modality::T2,
            Tensor::from_vec(&[2, 1, 1, 1], vec![1.0, 0.0]),
            Tensor::from_vec(&[2, 1, 1, 1], vec![0.0, 1.0]),
        )];
        let kd = kd_loss(&mut t, &fs, |f| f.pre, 1.0, true).unwrap();
        assert_eq!(t.value(kd).item(), 0.0);
    }

    #[test]
    fn nonpositive_temperature_rejected() {
        let mut t = Tape::<f64>::new();
        assert!(kd_loss(&mut t, &[], |f| f.pre, 0.0, true).is_err());
    }

    #[test]
    fn teacher_detach_blocks_gradient() {
        let mut t = Tape::new();
        let s = t.param(Tensor::from_vec(&[2, 1], vec![0.3, -0.2]));
        let u = t.param(Tensor::from_vec(&[2, 1], vec![-0.5, 0.4]));
        let mk = |m: Modality| DecoupledFeatures {
            modality: m,
            c: 2,
            pre: Subspaces {
                self_feature: s,
                mutual: m.others().map(|l| (l, u)),
            },
            post: None,
        };
        let fs = vec![mk(Modality::T1), mk(Modality::Fl)];
        let kd = kd_loss(&mut t, &fs, |f| f.pre, 1.0, true).unwrap();
        let g = t.backward(kd).unwrap();
        assert!(g.get(s).is_none());
        assert!(g.get(u).is_some());
        let kd2 = kd_loss(&mut t, &fs, |f| f.pre, 1.0, false).unwrap();
        let g2 = t.backward(kd2).unwrap();
        assert!(g2.get(s).is_some());
    }

    #[test]
    fn perfect_one_hot_is_zero_without_smoothing() {
        let labels = [0u8, 2, 1, 1];
        let mut p = vec![0.0; 12];
        for (v, &l) in labels.iter().enumerate() {
            p[l as usize * 4 + v] = 1.0;
        }
        let (dice, ce) = dice_ce_from_probs(&p, &labels, 3, 0.0).unwrap();
        assert_eq!(dice + ce, 0.0);
    }

    #[test]
    fn hand_evaluated_two_class_case() {
        let (dice, ce) = dice_ce_from_probs(&[0.5, 0.5], &[0], 2, 0.0).unwrap();
        assert!((dice - 2.0 / 3.0).abs() < 1e-12);
        assert!((ce - 2f64.ln()).abs() < 1e-12);
        assert!((dice + ce - 1.3598).abs() < 1e-4);
        let mut t = Tape::<f64>::new();
        let z = t.constant(Tensor::from_vec(&[2, 1], vec![0.0, 0.0]));
        let l = dice_ce_loss(&mut t, z, &[0], 0.0).unwrap();
        assert!((t.value(l).item() - 1.3598).abs() < 1e-4);
    }

    #[test]
    fn empty_class_contributes_zero_with_smoothing() {
        // Class 1 absent from labels and (almost) from predictions.
        let p = [1.0, 1.0, 0.0, 0.0];
        let (dice, _) = dice_ce_from_probs(&p, &[0, 0], 2, 1e-5).unwrap();
        assert!(dice.abs() < 1e-9);
    }

    #[test]
    fn bad_label_rejected() {
        assert!(dice_ce_from_probs(&[0.5, 0.5], &[2], 2, 0.0).is_err());
    }

    #[test]
    fn supervision_weights() {
        let w = deep_supervision_weights(3);
        let expected = [4.0 / 7.0, 2.0 / 7.0, 1.0 / 7.0];
        for (a, b) in w.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(deep_supervision_weights(1), vec![1.0]);
    }

    #[test]
    fn majority_vote_with_low_id_ties() {
        let mut labels = vec![0u8; 8];
        labels[..3].fill(3);
        labels[3..6].fill(1);
        let (out, s) = downsample_labels(&labels, [2, 2, 2], 4).unwrap();
        assert_eq!((out, s), (vec![1], [1, 1, 1]));
        let labels = [2u8, 2, 2, 2, 0, 0, 0, 1];
        assert_eq!(downsample_labels(&labels, [2, 2, 2], 4).unwrap().0, vec![2]);
        assert!(downsample_labels(&[0; 6], [1, 2, 3], 4).is_err());
    }

    proptest! {
        #[test]
        fn supervision_weights_sum_to_one(n in 1usize..12) {
            let w = deep_supervision_weights(n);
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(w.iter().all(|&x| x > 0.0));
        }

        #[test]
        fn kl_is_non_negative(u in proptest::collection::vec(-4.0f64..4.0, 12), s in proptest::collection::vec(-4.0f64..4.0, 12)) {
            let mut t = Tape::new();
            let a = t.constant(Tensor::from_vec(&[3, 4], u));
            let b = t.constant(Tensor::from_vec(&[3, 4], s));
            let kl = kl_divergence(&mut t, a, b, 1.0).unwrap();
            prop_assert!(t.value(kl).item() >= -1e-12);
        }

        #[test]
        fn dice_terms_bounded_and_order_invariant(
            z in proptest::collection::vec(-3.0f64..3.0, 24),
            labels in proptest::collection::vec(0u8..3, 8),
            rot in 0usize..8,
        ) {
            let p = softmax_axis(&Tensor::from_vec(&[3, 8], z.clone()), 0);
            let (dice, ce) = dice_ce_from_probs(p.data(), &labels, 3, 1e-5).unwrap();
            prop_assert!((0.0..=1.0).contains(&dice));
            prop_assert!(ce >= 0.0);
            let perm: Vec<usize> = (0..8).map(|v| (v + rot) % 8).collect();
            let zp: Vec<f64> = (0..3).flat_map(|c| perm.iter().map(move |&v| (c, v))).map(|(c, v)| z[c * 8 + v]).collect();
            let lp: Vec<u8> = perm.iter().map(|&v| labels[v]).collect();
            let pp = softmax_axis(&Tensor::from_vec(&[3, 8], zp), 0);
            let (d2, c2) = dice_ce_from_probs(pp.data(), &lp, 3, 1e-5).unwrap();
            prop_assert!((dice - d2).abs() < 1e-12 && (ce - c2).abs() < 1e-12);
        }
    }
}
