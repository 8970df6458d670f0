//! Pseudo full-modality feature assembly: each slot holds its modality's
//! Self feature when available, otherwise a donor's Mutual feature.

use std::fmt;

use serde::Serialize;

use crate::decoupler::DecoupledFeatures;
use crate::diffops::{Real, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::modality::{donor_for, Modality, ModalityIndicator, RelationshipTable};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SlotSource {
    #[serde(rename = "self")]
    SelfFeature { modality: Modality },
    Mutual { donor: Modality, target: Modality },
}

impl fmt::Display for SlotSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SlotSource::SelfFeature { modality } => write!(f, "s_{modality}"),
            SlotSource::Mutual { donor, target } => write!(f, "u_{donor}->{target}"),
        }
    }
}

/// Slot provenance in t1, tc, t2, fl order.
pub fn route(delta: ModalityIndicator, table: &RelationshipTable) -> Result<[SlotSource; 4]> {
    let mut out = [SlotSource::SelfFeature { modality: Modality::T1 }; 4];
    for m in Modality::ALL {
        out[m.index()] = if delta.is_available(m) {
            SlotSource::SelfFeature { modality: m }
        } else {
            SlotSource::Mutual {
                donor: donor_for(m, delta, table)?,
                target: m,
            }
        };
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug)]
pub struct FusedFeature {
    /// `4C` channels, slot order t1, tc, t2, fl.
    pub value: Var,
    pub provenance: [SlotSource; 4],
}

/// Concatenates the routed sub-spaces (post-CSSA where present). Selection
/// only; nothing here is learned.
pub fn compensate<T: Real>(
    tape: &mut Tape<T>,
    features: &[DecoupledFeatures],
    delta: ModalityIndicator,
    table: &RelationshipTable,
) -> Result<FusedFeature> {
    let mut by_modality: [Option<&DecoupledFeatures>; 4] = [None; 4];
    for f in features {
        if !delta.is_available(f.modality) {
            return Err(Error::Contract(format!(
                "features supplied for {} which is unavailable under {delta}",
                f.modality
            )));
        }
        if by_modality[f.modality.index()].replace(f).is_some() {
            return Err(Error::Contract(format!("features for {} supplied twice", f.modality)));
        }
    }
    let provenance = route(delta, table)?;
    let mut slots = Vec::with_capacity(4);
    for src in provenance {
        let (owner, var) = match src {
            SlotSource::SelfFeature { modality } => {
                let f = by_modality[modality.index()];
                (modality, f.map(|f| f.post_or_pre().self_feature))
            }
            SlotSource::Mutual { donor, target } => {
                let f = by_modality[donor.index()];
                (donor, f.and_then(|f| f.post_or_pre().mutual_for(target)))
            }
        };
        let var = var.ok_or_else(|| Error::Contract(format!("no features for available modality {owner}")))?;
        slots.push(var);
    }
    let first = tape.shape(slots[0]).to_vec();
    if slots.iter().any(|&v| tape.shape(v) != first.as_slice()) {
        return Err(shape_err("compensate", "sub-space shapes differ across slots"));
    }
    Ok(FusedFeature {
        value: tape.concat(&slots, 0)?,
        provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoupler::Subspaces;
    use crate::diffops::Tensor;
    use crate::modality::Pairing;

    fn s(m: Modality) -> SlotSource {
        SlotSource::SelfFeature { modality: m }
    }

    fn u(donor: Modality, target: Modality) -> SlotSource {
        SlotSource::Mutual { donor, target }
    }

    /// Fills every sub-space with a distinct constant: 10·modality + slot.
    fn features(tape: &mut Tape<f64>, delta: ModalityIndicator) -> Vec<DecoupledFeatures> {
        delta
            .available()
            .map(|m| {
                let mut mk = |k: usize| tape.constant(Tensor::full(&[2, 1, 1, 1], (10 * m.index() + k) as f64));
                let pre = Subspaces {
                    self_feature: mk(0),
                    mutual: [(m.others()[0], mk(1)), (m.others()[1], mk(2)), (m.others()[2], mk(3))],
                };
                DecoupledFeatures {
                    modality: m,
                    c: 2,
                    pre,
                    post: None,
                }
            })
            .collect()
    }

    #[test]
    fn full_modality_is_self_concatenation() {
        use Modality::*;
        for table in RelationshipTable::all_orders() {
            let mut t = Tape::new();
            let fs = features(&mut t, ModalityIndicator::FULL);
            let fused = compensate(&mut t, &fs, ModalityIndicator::FULL, &table).unwrap();
            assert_eq!(fused.provenance, [s(T1), s(Tc), s(T2), s(Fl)]);
            let parts: Vec<Var> = fs.iter().map(|f| f.pre.self_feature).collect();
            let direct = t.concat(&parts, 0).unwrap();
            assert_eq!(t.value(fused.value), t.value(direct));
        }
    }

    #[test]
    fn t1_tc_missing_routes_to_t2_and_fl() {
        use Modality::*;
        let delta: ModalityIndicator = "0011".parse().unwrap();
        let p = route(delta, &RelationshipTable::default()).unwrap();
        assert_eq!(p, [u(T2, T1), u(Fl, Tc), s(T2), s(Fl)]);
        let mut t = Tape::new();
        let fs = features(&mut t, delta);
        let fused = compensate(&mut t, &fs, delta, &RelationshipTable::default()).unwrap();
        // t2 is modality 2, its mutual block for t1 is k=1; fl is 3, block for tc is k=2.
        assert_eq!(t.value(fused.value).data(), &[21.0, 21.0, 32.0, 32.0, 20.0, 20.0, 30.0, 30.0]);
    }

    #[test]
    fn only_t1_donates_everywhere() {
        use Modality::*;
        let p = route("1000".parse().unwrap(), &RelationshipTable::default()).unwrap();
        assert_eq!(p, [s(T1), u(T1, Tc), u(T1, T2), u(T1, Fl)]);
    }

    #[test]
    fn table_order_changes_donor() {
        use Modality::*;
        let table = RelationshipTable::new([Pairing::III, Pairing::II, Pairing::I]).unwrap();
        let p = route("0011".parse().unwrap(), &table).unwrap();
        // With III first, tc's primary partner is t2.
        assert_eq!(p[1], u(T2, Tc));
        assert_eq!(Pairing::III.partner(Tc), T2);
    }

    #[test]
    fn unavailable_features_are_a_contract_error() {
        let mut t = Tape::new();
        let fs = features(&mut t, ModalityIndicator::FULL);
        let delta: ModalityIndicator = "0011".parse().unwrap();
        let err = compensate(&mut t, &fs, delta, &RelationshipTable::default()).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn missing_features_for_available_modality_rejected() {
        let mut t = Tape::new();
        let delta: ModalityIndicator = "0011".parse().unwrap();
        let mut fs = features(&mut t, delta);
        fs.pop();
        assert!(compensate(&mut t, &fs, delta, &RelationshipTable::default()).is_err());
    }
}
