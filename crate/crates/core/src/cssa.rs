//! Channel-wise sparse self-attention: score channels, sort them, and add
//! the sorted-channel view back onto the input.
//!
//! The permutation is applied as a channel gather. Backward treats the sort
//! order as a constant of the forward pass.

use std::cmp::Ordering;

use crate::diffops::{Graph, ParameterStore, Real, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::layers::{self, LEAKY_SLOPE};
use crate::modality::Modality;

pub const PREFIX: &str = "enabling.cssa";

#[derive(Clone, Debug, PartialEq)]
pub struct PermutationPlan {
    pub scores: Vec<f64>,
    /// `order[i]` is the channel with the i-th highest score.
    pub order: Vec<usize>,
}

impl PermutationPlan {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Dense 0/1 matrix, row-major, with row `i` one-hot at `order[i]`.
    pub fn matrix(&self) -> Vec<u8> {
        let n = self.order.len();
        let mut p = vec![0u8; n * n];
        for (i, &j) in self.order.iter().enumerate() {
            p[i * n + j] = 1;
        }
        p
    }

    /// `inverse()[order[i]] == i`.
    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.order.len()];
        for (i, &j) in self.order.iter().enumerate() {
            inv[j] = i;
        }
        inv
    }

    pub fn is_identity(&self) -> bool {
        self.order.iter().enumerate().all(|(i, &j)| i == j)
    }
}

/// Stable descending argsort; equal scores keep the lower channel first.
pub fn permutation_from_scores(scores: &[f64]) -> Result<PermutationPlan> {
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("channel score {i} is {}", scores[i])));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    Ok(PermutationPlan {
        scores: scores.to_vec(),
        order,
    })
}

pub fn register_cssa<T: Real>(store: &mut ParameterStore<T>, m: Modality, c1: usize) -> Result<()> {
    if c1 < 2 || c1 % 2 != 0 {
        return Err(Error::InvalidArgument(format!("CSSA needs an even channel count, got {c1}")));
    }
    let base = format!("{PREFIX}.{m}");
    layers::register_linear(store, &format!("{base}.fc1"), c1, c1 / 2)?;
    layers::register_linear(store, &format!("{base}.fc2"), c1 / 2, c1)
}

/// Weights of the two-layer score MLP: `fc1: [C₁/2, C₁]`, `fc2: [C₁, C₁/2]`.
#[derive(Clone, Copy, Debug)]
pub struct ScoreMlp {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl ScoreMlp {
    pub fn bind<T: Real>(g: &mut Graph<'_, T>, m: Modality) -> Result<Self> {
        let base = format!("{PREFIX}.{m}");
        Ok(Self {
            w1: g.param(&format!("{base}.fc1.weight"))?,
            b1: g.param(&format!("{base}.fc1.bias"))?,
            w2: g.param(&format!("{base}.fc2.weight"))?,
            b2: g.param(&format!("{base}.fc2.bias"))?,
        })
    }
}

/// `S = MLP(GAP(x))`, one score per channel.
pub fn channel_scores<T: Real>(tape: &mut Tape<T>, x: Var, mlp: &ScoreMlp) -> Result<Var> {
    let c1 = tape.shape(x).first().copied().unwrap_or(0);
    if tape.shape(mlp.w1).get(1) != Some(&c1) || tape.shape(mlp.w2).first() != Some(&c1) {
        return Err(shape_err(
            "channel_scores",
            format!("{c1} channels for MLP {:?} / {:?}", tape.shape(mlp.w1), tape.shape(mlp.w2)),
        ));
    }
    let gap = tape.global_avg_pool(x)?;
    let h = tape.linear(gap, mlp.w1, Some(mlp.b1))?;
    let h = tape.leaky_relu(h, LEAKY_SLOPE);
    tape.linear(h, mlp.w2, Some(mlp.b2))
}

/// `Y[c] = X[c] + X[Q(c)]`, or `X[c] + σ(S[Q(c)])·X[Q(c)]` with the soft
/// gate.
pub fn cssa_forward<T: Real>(tape: &mut Tape<T>, x: Var, mlp: &ScoreMlp, soft_gate: bool) -> Result<(Var, PermutationPlan)> {
    let s = channel_scores(tape, x, mlp)?;
    let scores: Vec<f64> = tape.value(s).data().iter().map(|v| v.as_f64()).collect();
    let plan = permutation_from_scores(&scores)?;
    let mut gathered = tape.channel_gather(x, &plan.order)?;
    if soft_gate {
        let sorted = tape.channel_gather(s, &plan.order)?;
        let gate = tape.sigmoid(sorted);
        gathered = tape.scale_channels(gathered, gate)?;
    }
    Ok((tape.add(x, gathered)?, plan))
}

/// Named-parameter form of [`cssa_forward`] for modality `m`.
pub fn cssa_for<T: Real>(g: &mut Graph<'_, T>, x: Var, m: Modality, soft_gate: bool) -> Result<(Var, PermutationPlan)> {
    let mlp = ScoreMlp::bind(g, m)?;
    cssa_forward(&mut g.tape, x, &mlp, soft_gate)
}
