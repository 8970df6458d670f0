//! 3D U-Net whose first encoding layer is the decouple → CSSA → compensate
//! front end.

use serde::{Deserialize, Serialize};

use crate::cssa::{self, PermutationPlan};
use crate::decoupler::{self, DecoupledFeatures, DecouplerConfig};
use crate::diffops::{Graph, ParameterStore, Real, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::layers::{self, conv_flops, conv_params};
use crate::modality::{Modality, ModalityIndicator, RelationshipTable};
use crate::rcr::{self, SlotSource};
use crate::volume_io::{Shape3, NUM_CLASSES};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    #[default]
    Desk,
    Full,
}

/// Front-end component toggles for the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Components {
    pub feature_decoupling: bool,
    pub cssa: bool,
    pub rcr: bool,
}

impl Default for Components {
    fn default() -> Self {
        Self {
            feature_decoupling: true,
            cssa: true,
            rcr: true,
        }
    }
}

impl Components {
    pub fn new(feature_decoupling: bool, cssa: bool, rcr: bool) -> Self {
        Self {
            feature_decoupling,
            cssa,
            rcr,
        }
    }

    /// The eight toggle combinations in component-ablation row order.
    pub fn all() -> [Components; 8] {
        let c = Components::new;
        [
            c(false, false, false),
            c(true, false, false),
            c(false, true, false),
            c(false, false, true),
            c(false, true, true),
            c(true, false, true),
            c(true, true, false),
            c(true, true, true),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub profile: Profile,
    /// Channels per decoupled sub-space.
    pub c: usize,
    /// Feature channels per scale; scale 0 must equal `4C`.
    pub channels: Vec<usize>,
    pub max_channels: usize,
    pub num_classes: usize,
    /// Number of scales (from full resolution down) that receive a loss.
    pub supervised_scales: usize,
    pub decoupler_norm_act: bool,
    pub cssa_soft_gate: bool,
    pub components: Components,
    pub rcr_order: RelationshipTable,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl UNetConfig {
    pub fn desk() -> Self {
        Self {
            profile: Profile::Desk,
            c: 8,
            channels: vec![32, 64, 128],
            max_channels: 320,
            num_classes: NUM_CLASSES,
            supervised_scales: 3,
            decoupler_norm_act: true,
            cssa_soft_gate: false,
            components: Components::default(),
            rcr_order: RelationshipTable::default(),
        }
    }

    pub fn full() -> Self {
        Self {
            profile: Profile::Full,
            channels: vec![32, 64, 128, 256, 320, 320],
            supervised_scales: 6,
            ..Self::desk()
        }
    }

    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Desk => Self::desk(),
            Profile::Full => Self::full(),
        }
    }

    pub fn num_scales(&self) -> usize {
        self.channels.len()
    }

    /// Spatial extents must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << self.num_scales().saturating_sub(1)
    }

    pub fn decoupler(&self) -> DecouplerConfig {
        DecouplerConfig {
            c: self.c,
            norm_act: self.decoupler_norm_act,
            partition: self.components.feature_decoupling,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.num_scales() < 2 {
            return bad(format!("need at least 2 scales, got {}", self.num_scales()));
        }
        if self.c == 0 || self.c % 2 != 0 {
            return bad(format!("sub-space channels C must be even and positive, got {}", self.c));
        }
        if self.channels[0] != 4 * self.c {
            return bad(format!(
                "stage-2 input has {} channels but the front end emits 4C = {}",
                self.channels[0],
                4 * self.c
            ));
        }
        if let Some(&c) = self.channels.iter().find(|&&c| c == 0 || c > self.max_channels) {
            return bad(format!("channel count {c} outside 1..={}", self.max_channels));
        }
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.supervised_scales == 0 || self.supervised_scales > self.num_scales() {
            return bad(format!(
                "supervised scales {} outside 1..={}",
                self.supervised_scales,
                self.num_scales()
            ));
        }
        Ok(())
    }

    pub fn check_extent(&self, shape: Shape3) -> Result<()> {
        let d = self.divisor();
        if shape.iter().any(|&s| s == 0 || s % d != 0) {
            return Err(shape_err(
                "forward",
                format!(
                    "spatial dims {shape:?} must be divisible by 2^(num_scales-1) = {d} for {} scales",
                    self.num_scales()
                ),
            ));
        }
        Ok(())
    }
}

/// Parameter/FLOP accounting scope.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    /// Decoupler + CSSA + RCR.
    Enabling,
    Decoupler,
    Cssa,
    Rcr,
    Whole,
}

const FUSE: &str = "enabling.fuse";

pub struct ForwardOutput {
    /// Scale 0 (full resolution) first.
    pub logits: Vec<Var>,
    pub features: Vec<DecoupledFeatures>,
    pub plans: Vec<(Modality, PermutationPlan)>,
    /// `None` when the learned fusion conv replaces RCR.
    pub provenance: Option<[SlotSource; 4]>,
}

#[derive(Clone, Debug)]
pub struct DeMoSeg<T: Real> {
    config: UNetConfig,
    params: ParameterStore<T>,
}

impl<T: Real> DeMoSeg<T> {
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut p = ParameterStore::new(seed);
        let dc = config.decoupler();
        for m in Modality::ALL {
            decoupler::register_decoupler(&mut p, m, &dc)?;
        }
        if config.components.cssa {
            for m in Modality::ALL {
                cssa::register_cssa(&mut p, m, dc.out_channels())?;
            }
        }
        let c4 = 4 * config.c;
        if !config.components.rcr {
            layers::register_conv(&mut p, FUSE, c4, c4, 1)?;
        }
        let ch = &config.channels;
        layers::register_conv_block(&mut p, "encoder.0.block", c4, ch[0], true)?;
        for s in 1..ch.len() {
            layers::register_conv_block(&mut p, &format!("encoder.{s}.down"), ch[s - 1], ch[s], true)?;
            layers::register_conv_block(&mut p, &format!("encoder.{s}.block"), ch[s], ch[s], true)?;
        }
        for s in (0..ch.len() - 1).rev() {
            layers::register_conv_transpose(&mut p, &format!("decoder.{s}.up"), ch[s + 1], ch[s])?;
            layers::register_conv_block(&mut p, &format!("decoder.{s}.block1"), 2 * ch[s], ch[s], true)?;
            layers::register_conv_block(&mut p, &format!("decoder.{s}.block2"), ch[s], ch[s], true)?;
        }
        for (s, &c) in ch.iter().enumerate() {
            layers::register_conv(&mut p, &format!("head.{s}"), c, config.num_classes, 1)?;
        }
        Ok(Self { config, params: p })
    }

    /// Rebuilds a network around an existing parameter store, checking that
    /// names and shapes match the architecture.
    pub fn from_parts(config: UNetConfig, params: ParameterStore<T>) -> Result<Self> {
        let reference = DeMoSeg::<T>::new(config.clone(), 0)?;
        if reference.params.names() != params.names() {
            return Err(Error::Contract("parameter names do not match the configured network".into()));
        }
        for (a, b) in reference.params.values().iter().zip(params.values()) {
            if a.shape() != b.shape() {
                return Err(Error::Contract("parameter shapes do not match the configured network".into()));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParameterStore<T> {
        self.params
    }

    pub fn cast<U: Real>(&self) -> DeMoSeg<U> {
        DeMoSeg {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// `volumes` holds one `[1, D, H, W]` tensor per modality in canonical
    /// order; entries of unavailable modalities are never read.
    pub fn forward(&self, g: &mut Graph<'_, T>, volumes: &[Tensor<T>], delta: ModalityIndicator) -> Result<ForwardOutput> {
        if g.params().len() != self.params.len() {
            return Err(Error::Contract("graph is bound to a different parameter store".into()));
        }
        if volumes.len() != 4 {
            return Err(shape_err("forward", format!("expected 4 modality slots, got {}", volumes.len())));
        }
        let first = delta.available().next().expect("indicator is non-empty");
        let shape = volumes[first.index()].shape().to_vec();
        if shape.len() != 4 || shape[0] != 1 {
            return Err(shape_err("forward", format!("modality input {shape:?}, expected [1, D, H, W]")));
        }
        let spatial = [shape[1], shape[2], shape[3]];
        self.config.check_extent(spatial)?;

        let cfg = &self.config;
        let dc = cfg.decoupler();
        let mut features = Vec::with_capacity(4);
        let mut plans = Vec::new();
        for m in delta.available() {
            let v = &volumes[m.index()];
            if v.shape() != shape.as_slice() {
                return Err(shape_err("forward", format!("{m} input {:?} differs from {shape:?}", v.shape())));
            }
            let x = g.tape.constant(v.clone());
            let (raw, mut f) = decoupler::decouple(g, x, m, &dc)?;
            f.post = Some(if cfg.components.cssa {
                let (y, plan) = cssa::cssa_for(g, raw, m, cfg.cssa_soft_gate)?;
                plans.push((m, plan));
                decoupler::split(&mut g.tape, y, m, &dc)?
            } else {
                f.pre
            });
            features.push(f);
        }

        let (fused, provenance) = if cfg.components.rcr {
            let fused = rcr::compensate(&mut g.tape, &features, delta, &cfg.rcr_order)?;
            (fused.value, Some(fused.provenance))
        } else {
            let mut slots = Vec::with_capacity(4);
            for m in Modality::ALL {
                match features.iter().find(|f| f.modality == m) {
                    Some(f) => slots.push(f.post_or_pre().self_feature),
                    None => slots.push(g.tape.constant(Tensor::zeros(&[cfg.c, spatial[0], spatial[1], spatial[2]]))),
                }
            }
            let cat = g.tape.concat(&slots, 0)?;
            (layers::conv(g, FUSE, cat, 1)?, None)
        };

        let n = cfg.num_scales();
        let mut x = layers::conv_block(g, "encoder.0.block", fused, 1, true)?;
        let mut skips = vec![x];
        for s in 1..n {
            x = layers::conv_block(g, &format!("encoder.{s}.down"), x, 2, true)?;
            x = layers::conv_block(g, &format!("encoder.{s}.block"), x, 1, true)?;
            skips.push(x);
        }
        let mut logits = vec![None; n];
        logits[n - 1] = Some(layers::conv(g, &format!("head.{}", n - 1), x, 1)?);
        for s in (0..n - 1).rev() {
            let up = layers::conv_transpose(g, &format!("decoder.{s}.up"), x)?;
            let cat = g.tape.concat(&[up, skips[s]], 0)?;
            x = layers::conv_block(g, &format!("decoder.{s}.block1"), cat, 1, true)?;
            x = layers::conv_block(g, &format!("decoder.{s}.block2"), x, 1, true)?;
            logits[s] = Some(layers::conv(g, &format!("head.{s}"), x, 1)?);
        }
        Ok(ForwardOutput {
            logits: logits.into_iter().map(|l| l.expect("every scale has a head")).collect(),
            features,
            plans,
            provenance,
        })
    }

    /// Exact parameter count within `scope`.
    pub fn count_params(&self, scope: Scope) -> usize {
        let p = &self.params;
        match scope {
            Scope::Enabling => p.count_with_prefix("enabling."),
            Scope::Decoupler => p.count_with_prefix(decoupler::PREFIX),
            Scope::Cssa => p.count_with_prefix(cssa::PREFIX),
            Scope::Rcr => p.count_with_prefix(FUSE),
            Scope::Whole => p.count(),
        }
    }

    /// Analytic FLOPs for one full-modality forward on `patch`.
    pub fn count_flops(&self, scope: Scope, patch: Shape3) -> u64 {
        count_flops(&self.config, scope, patch)
    }
}

/// FLOPs of one full-modality forward: two per multiply-add of every conv,
/// transposed conv and linear layer. Normalization, activations, pooling
/// and elementwise additions are not counted.
pub fn count_flops(cfg: &UNetConfig, scope: Scope, patch: Shape3) -> u64 {
    let v0: usize = patch.iter().product();
    let dc = cfg.decoupler();
    let out = dc.out_channels();
    let c4 = 4 * cfg.c;
    let dec = 4 * (conv_flops(1, out, 3, v0) + conv_flops(out, out, 3, v0));
    let cs = if cfg.components.cssa {
        4 * 2 * (out * (out / 2) * 2) as u64
    } else {
        0
    };
    let rc = if cfg.components.rcr {
        0
    } else {
        conv_flops(c4, c4, 1, v0)
    };
    match scope {
        Scope::Decoupler => return dec,
        Scope::Cssa => return cs,
        Scope::Rcr => return rc,
        Scope::Enabling => return dec + cs + rc,
        Scope::Whole => {}
    }
    let ch = &cfg.channels;
    let vox = |s: usize| v0 >> (3 * s);
    let mut total = dec + cs + rc + conv_flops(c4, ch[0], 3, v0);
    for s in 1..ch.len() {
        total += conv_flops(ch[s - 1], ch[s], 3, vox(s)) + conv_flops(ch[s], ch[s], 3, vox(s));
    }
    for s in 0..ch.len() - 1 {
        total += 2 * (8 * ch[s + 1] * ch[s]) as u64 * vox(s + 1) as u64;
        total += conv_flops(2 * ch[s], ch[s], 3, vox(s)) + conv_flops(ch[s], ch[s], 3, vox(s));
    }
    for (s, &c) in ch.iter().enumerate() {
        total += conv_flops(c, cfg.num_classes, 1, vox(s));
    }
    total
}

/// Closed-form parameter count of the enabling module with every modality
/// encoded.
pub fn enabling_params(cfg: &UNetConfig) -> usize {
    let dc = cfg.decoupler();
    let out = dc.out_channels();
    let norm = if dc.norm_act { 2 * out } else { 0 };
    let per_dec = conv_params(1, out, 3) + conv_params(out, out, 3) + 2 * norm;
    let per_cssa = if cfg.components.cssa {
        (out * (out / 2) + out / 2) + (out / 2 * out + out)
    } else {
        0
    };
    let fuse = if cfg.components.rcr {
        0
    } else {
        conv_params(4 * cfg.c, 4 * cfg.c, 1)
    };
    4 * (per_dec + per_cssa) + fuse
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn volumes(shape: Shape3, seed: u64) -> Vec<Tensor<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        (0..4)
            .map(|_| Tensor::from_vec(&[1, shape[0], shape[1], shape[2]], (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect()
    }

    fn run(net: &DeMoSeg<f32>, vols: &[Tensor<f32>], delta: &str) -> Vec<Tensor<f32>> {
        let mut g = Graph::new(net.params());
        let out = net.forward(&mut g, vols, delta.parse().unwrap()).unwrap();
        out.logits.iter().map(|&l| g.tape.value(l).clone()).collect()
    }

    #[test]
    fn desk_logit_shapes() {
        let net = DeMoSeg::<f32>::new(UNetConfig::desk(), 1).unwrap();
        let logits = run(&net, &volumes([8, 8, 8], 1), "1111");
        let shapes: Vec<&[usize]> = logits.iter().map(|l| l.shape()).collect();
        assert_eq!(shapes, vec![&[4, 8, 8, 8][..], &[4, 4, 4, 4][..], &[4, 2, 2, 2][..]]);
        assert!(logits.iter().all(|l| l.all_finite()));
    }

    #[test]
    fn full_profile_has_six_scales() {
        let cfg = UNetConfig::full();
        cfg.validate().unwrap();
        assert_eq!(cfg.num_scales(), 6);
        assert_eq!(cfg.channels[0], 32);
        assert_eq!(cfg.divisor(), 32);
    }

    #[test]
    fn missing_modality_path_runs_and_differs() {
        let net = DeMoSeg::<f32>::new(UNetConfig::desk(), 2).unwrap();
        let vols = volumes([8, 8, 8], 2);
        let a = run(&net, &vols, "1000");
        let b = run(&net, &vols, "1111");
        assert_eq!(a[0].shape(), b[0].shape());
        assert_ne!(a[0], b[0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let vols = volumes([8, 8, 8], 3);
        let a = run(&DeMoSeg::<f32>::new(UNetConfig::desk(), 9).unwrap(), &vols, "0110");
        let b = run(&DeMoSeg::<f32>::new(UNetConfig::desk(), 9).unwrap(), &vols, "0110");
        assert_eq!(a, b);
    }

    #[test]
    fn full_modality_ignores_rcr_order() {
        let vols = volumes([8, 8, 8], 4);
        let base = DeMoSeg::<f32>::new(UNetConfig::desk(), 5).unwrap();
        let reference = run(&base, &vols, "1111");
        for table in RelationshipTable::all_orders() {
            let cfg = UNetConfig {
                rcr_order: table,
                ..UNetConfig::desk()
            };
            let net = DeMoSeg::from_parts(cfg, base.params().clone()).unwrap();
            assert_eq!(run(&net, &vols, "1111"), reference);
        }
    }

    #[test]
    fn indivisible_extent_rejected() {
        let net = DeMoSeg::<f32>::new(UNetConfig::desk(), 1).unwrap();
        let mut g = Graph::new(net.params());
        let err = net.forward(&mut g, &volumes([6, 8, 8], 1), ModalityIndicator::FULL).err().unwrap();
        assert!(err.to_string().contains("divisible"));
    }

    #[test]
    fn every_component_combination_builds_and_runs() {
        let vols = volumes([4, 4, 4], 6);
        for comp in Components::all() {
            let cfg = UNetConfig {
                components: comp,
                ..UNetConfig::desk()
            };
            let net = DeMoSeg::<f32>::new(cfg.clone(), 1).unwrap();
            for delta in ["0001", "1011", "1111"] {
                let logits = run(&net, &vols, delta);
                assert_eq!(logits[0].shape(), &[4, 4, 4, 4]);
            }
            assert_eq!(net.count_params(Scope::Enabling), enabling_params(&cfg));
        }
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(conv_params(1, 8, 3), 224);
        let net = DeMoSeg::<f32>::new(UNetConfig::desk(), 1).unwrap();
        assert_eq!(net.count_params(Scope::Rcr), 0);
        assert_eq!(net.count_params(Scope::Decoupler), 4 * (896 + 64 + 27_680 + 64));
        assert_eq!(net.count_params(Scope::Cssa), 4 * (528 + 544));
        assert_eq!(net.count_params(Scope::Enabling), 119_104);
        let off = DeMoSeg::<f32>::new(
            UNetConfig {
                components: Components::new(true, true, false),
                ..UNetConfig::desk()
            },
            1,
        )
        .unwrap();
        assert_eq!(off.count_params(Scope::Rcr), 32 * 32 + 32);
    }

    #[test]
    fn flops_of_single_conv_and_scopes() {
        assert_eq!(conv_flops(1, 8, 3, 32 * 32 * 32), 2 * 216 * 32768);
        let cfg = UNetConfig::desk();
        assert_eq!(count_flops(&cfg, Scope::Rcr, [32; 3]), 0);
        let e = count_flops(&cfg, Scope::Enabling, [32; 3]);
        assert_eq!(e, count_flops(&cfg, Scope::Decoupler, [32; 3]) + count_flops(&cfg, Scope::Cssa, [32; 3]));
        assert!(count_flops(&cfg, Scope::Whole, [32; 3]) > e);
    }

    #[test]
    fn config_validation() {
        let mut cfg = UNetConfig::desk();
        cfg.channels[0] = 16;
        assert!(cfg.validate().is_err());
        let mut cfg = UNetConfig::desk();
        cfg.channels = vec![32];
        assert!(cfg.validate().is_err());
        let mut cfg = UNetConfig::desk();
        cfg.channels[2] = 512;
        assert!(cfg.validate().is_err());
        assert!(DeMoSeg::<f32>::from_parts(UNetConfig::full(), DeMoSeg::<f32>::new(UNetConfig::desk(), 0).unwrap().into_params()).is_err());
    }
}
