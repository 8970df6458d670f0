//! Per-modality feature decoupling into one Self and three Mutual sub-spaces.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::diffops::{Graph, ParameterStore, Real, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::layers;
use crate::modality::Modality;

pub const PREFIX: &str = "enabling.decoupler";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecouplerConfig {
    /// Channels per sub-space.
    pub c: usize,
    /// Instance norm + leaky ReLU after each of the two convs.
    pub norm_act: bool,
    /// When off, the encoder emits one entangled `C`-channel map that is
    /// used as the Self feature and as every Mutual feature.
    pub partition: bool,
}

impl Default for DecouplerConfig {
    fn default() -> Self {
        Self {
            c: 8,
            norm_act: true,
            partition: true,
        }
    }
}

impl DecouplerConfig {
    pub fn out_channels(&self) -> usize {
        if self.partition {
            4 * self.c
        } else {
            self.c
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Subspace {
    SelfFeature,
    Mutual(Modality),
}

/// Channel ranges of the four sub-spaces of modality `m`: Self first, then
/// one Mutual block per other modality in canonical order.
pub fn subspace_ranges(m: Modality, c: usize) -> [(Subspace, Range<usize>); 4] {
    let o = m.others();
    [
        (Subspace::SelfFeature, 0..c),
        (Subspace::Mutual(o[0]), c..2 * c),
        (Subspace::Mutual(o[1]), 2 * c..3 * c),
        (Subspace::Mutual(o[2]), 3 * c..4 * c),
    ]
}

#[derive(Clone, Copy, Debug)]
pub struct Subspaces {
    pub self_feature: Var,
    /// Keyed by target modality, canonical order.
    pub mutual: [(Modality, Var); 3],
}

impl Subspaces {
    pub fn mutual_for(&self, target: Modality) -> Option<Var> {
        self.mutual.iter().find(|(l, _)| *l == target).map(|&(_, v)| v)
    }

    pub fn get(&self, s: Subspace) -> Option<Var> {
        match s {
            Subspace::SelfFeature => Some(self.self_feature),
            Subspace::Mutual(l) => self.mutual_for(l),
        }
    }
}

/// Sub-space views of one modality, before (`pre`) and after (`post`) CSSA.
#[derive(Clone, Copy, Debug)]
pub struct DecoupledFeatures {
    pub modality: Modality,
    pub c: usize,
    pub pre: Subspaces,
    pub post: Option<Subspaces>,
}

impl DecoupledFeatures {
    pub fn post_or_pre(&self) -> &Subspaces {
        self.post.as_ref().unwrap_or(&self.pre)
    }
}

pub fn register_decoupler<T: Real>(store: &mut ParameterStore<T>, m: Modality, cfg: &DecouplerConfig) -> Result<()> {
    let out = cfg.out_channels();
    let base = format!("{PREFIX}.{m}");
    layers::register_conv_block(store, &format!("{base}.block1"), 1, out, cfg.norm_act)?;
    layers::register_conv_block(store, &format!("{base}.block2"), out, out, cfg.norm_act)
}

/// Runs the two-conv stack of modality `m` on a single-channel input and
/// returns the raw `4C` (or `C`, unpartitioned) channel map.
pub fn encode<T: Real>(g: &mut Graph<'_, T>, x: Var, m: Modality, cfg: &DecouplerConfig) -> Result<Var> {
    let s = g.tape.shape(x);
    if s.len() != 4 || s[0] != 1 {
        return Err(shape_err("decouple", format!("expected a [1, D, H, W] input, got {s:?}")));
    }
    let base = format!("{PREFIX}.{m}");
    let y = layers::conv_block(g, &format!("{base}.block1"), x, 1, cfg.norm_act)?;
    layers::conv_block(g, &format!("{base}.block2"), y, 1, cfg.norm_act)
}

/// Slices a raw map into sub-spaces by [`subspace_ranges`].
pub fn split<T: Real>(tape: &mut Tape<T>, raw: Var, m: Modality, cfg: &DecouplerConfig) -> Result<Subspaces> {
    let ch = tape.shape(raw).first().copied().unwrap_or(0);
    if ch != cfg.out_channels() {
        return Err(Error::Contract(format!(
            "decoupler for {m} produced {ch} channels, backbone expects {}",
            cfg.out_channels()
        )));
    }
    if !cfg.partition {
        return Ok(Subspaces {
            self_feature: raw,
            mutual: m.others().map(|l| (l, raw)),
        });
    }
    let r = subspace_ranges(m, cfg.c);
    let mut slice = |i: usize| tape.narrow(raw, 0, r[i].1.start, cfg.c);
    let self_feature = slice(0)?;
    let (a, b, c) = (slice(1)?, slice(2)?, slice(3)?);
    let o = m.others();
    Ok(Subspaces {
        self_feature,
        mutual: [(o[0], a), (o[1], b), (o[2], c)],
    })
}

/// `encode` followed by `split`; CSSA fields are left empty.
pub fn decouple<T: Real>(g: &mut Graph<'_, T>, x: Var, m: Modality, cfg: &DecouplerConfig) -> Result<(Var, DecoupledFeatures)> {
    let raw = encode(g, x, m, cfg)?;
    let pre = split(&mut g.tape, raw, m, cfg)?;
    Ok((
        raw,
        DecoupledFeatures {
            modality: m,
            c: cfg.c,
            pre,
            post: None,
        },
    ))
}
