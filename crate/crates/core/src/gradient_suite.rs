//! Finite-difference checks of every differentiable primitive and of the
//! composite CSSA, Dice + CE and distillation terms, in double precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::cssa::{cssa_forward, permutation_from_scores, ScoreMlp};
use crate::decoupler::{DecoupledFeatures, Subspaces};
use crate::diffops::gradcheck::DEFAULT_TOLERANCE;
use crate::diffops::gradcheck::grad_check_wrt;
use crate::diffops::{GradCheckReport, Tape, Tensor, Var};
use crate::error::Result;
use crate::losses::{dice_ce_loss, kd_loss};
use crate::modality::Modality;

type Build = fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

struct Case {
    name: &'static str,
    inputs: fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>,
    build: Build,
    /// Inputs excluded from probing (detached teachers, label ids).
    constant: fn(usize) -> bool,
}

fn none(_: usize) -> bool {
    false
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
}

/// Normal samples pushed at least `gap` away from zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    randn(rng, shape).map(|v| if v >= 0.0 { v + gap } else { v - gap })
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(0.5..2.0)).collect())
}

/// Reduces a tensor to a scalar with a fixed pseudo-random projection so
/// every output element carries a distinct upstream gradient.
fn project(t: &mut Tape<f64>, y: Var) -> Result<Var> {
    let n = t.value(y).numel();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7919 % 23) as f64 - 11.0) / 7.0).collect();
    let w = t.constant(Tensor::from_vec(t.shape(y), w));
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

fn gap_of(scores: &[f64]) -> f64 {
    let mut s = scores.to_vec();
    s.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
    s.windows(2).map(|w| w[0] - w[1]).fold(f64::INFINITY, f64::min)
}

/// CSSA inputs `[x, w1, b1, w2, b2]` whose channel scores are separated by
/// at least `1e-2`, so finite-difference probes never cross a sort tie.
fn cssa_inputs(rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let c1 = 8;
    loop {
        let x = randn(rng, &[c1, 2, 2, 2]);
        let w1 = randn(rng, &[c1 / 2, c1]).map(|v| v * 0.5);
        let b1 = randn(rng, &[c1 / 2]);
        let w2 = randn(rng, &[c1, c1 / 2]).map(|v| v * 0.5);
        let b2 = randn(rng, &[c1]);
        let mut t = Tape::new();
        let vars: Vec<Var> = [&x, &w1, &b1, &w2, &b2].iter().map(|v| t.constant((*v).clone())).collect();
        let mlp = ScoreMlp {
            w1: vars[1],
            b1: vars[2],
            w2: vars[3],
            b2: vars[4],
        };
        let s = crate::cssa::channel_scores(&mut t, vars[0], &mlp).expect("valid shapes");
        let scores: Vec<f64> = t.value(s).data().to_vec();
        // Hidden pre-activations must also stay clear of the leaky kink.
        let gap_ok = gap_of(&scores) > 1e-2 && permutation_from_scores(&scores).is_ok();
        let gapv = t.global_avg_pool(vars[0]).expect("4-d input");
        let h = t.linear(gapv, vars[1], Some(vars[2])).expect("shapes");
        let kink_ok = t.value(h).data().iter().all(|v| v.abs() > 1e-2);
        if gap_ok && kink_ok {
            return vec![x, w1, b1, w2, b2];
        }
    }
}

fn cssa_build(t: &mut Tape<f64>, v: &[Var], soft: bool) -> Result<Var> {
    let mlp = ScoreMlp {
        w1: v[1],
        b1: v[2],
        w2: v[3],
        b2: v[4],
    };
    let (y, _) = cssa_forward(t, v[0], &mlp, soft)?;
    project(t, y)
}

/// Class ids carried as an extra (non-differentiable) input so each seed
/// draws its own labelling; rounding makes them immune to probe steps.
fn label_input(rng: &mut ChaCha8Rng, n: usize, k: u8) -> Tensor<f64> {
    Tensor::from_vec(&[n], (0..n).map(|_| rng.random_range(0..k) as f64).collect())
}

fn kd_build(t: &mut Tape<f64>, v: &[Var], detach: bool) -> Result<Var> {
    // Three modalities, each with a Self and three Mutual blocks.
    let mods = [Modality::T1, Modality::Tc, Modality::Fl];
    let feats: Vec<DecoupledFeatures> = mods
        .iter()
        .enumerate()
        .map(|(i, &m)| {
            let o = m.others();
            DecoupledFeatures {
                modality: m,
                c: 3,
                pre: Subspaces {
                    self_feature: v[4 * i],
                    mutual: [(o[0], v[4 * i + 1]), (o[1], v[4 * i + 2]), (o[2], v[4 * i + 3])],
                },
                post: None,
            }
        })
        .collect();
    kd_loss(t, &feats, |f| f.pre, 1.0, detach)
}

fn cases() -> Vec<Case> {
    vec![
        Case {
            name: "conv3d_k3_s1",
            inputs: |r| vec![randn(r, &[2, 4, 4, 4]), randn(r, &[3, 2, 3, 3, 3]), randn(r, &[3])],
            build: |t, v| {
                let y = t.conv3d(v[0], v[1], Some(v[2]), 1)?;
                project(t, y)
            },
            constant: none,
        },
        Case {
            name: "conv3d_k3_s2",
            inputs: |r| vec![randn(r, &[2, 4, 4, 4]), randn(r, &[3, 2, 3, 3, 3]), randn(r, &[3])],
            build: |t, v| {
                let y = t.conv3d(v[0], v[1], Some(v[2]), 2)?;
                project(t, y)
            },
            constant: none,
        },
        Case {
            name: "conv3d_k1",
            inputs: |r| vec![randn(r, &[3, 2, 3, 2]), randn(r, &[2, 3, 1, 1, 1]), randn(r, &[2])],
            build: |t, v| {
                let y = t.conv3d(v[0], v[1], Some(v[2]), 1)?;
                project(t, y)
            },
            constant: none,
        },
        Case {
            name: "conv_transpose3d",
            inputs: |r| vec![randn(r, &[3, 2, 2, 2]), randn(r, &[3, 2, 2, 2, 2]), randn(r, &[2])],
            build: |t, v| {
                let y = t.conv_transpose3d(v[0], v[1], Some(v[2]))?;
                project(t, y)
            },
            constant: none,
        },
        Case {
            name: "instance_norm",
            inputs: |r| vec![randn(r, &[3, 2, 3, 2]), randn(r, &[3]), randn(r, &[3])],
            build: |t, v| {
                let y = t.instance_norm(v[0], v[1], v[2])?;
                project(t, y)
            },
            constant: none,
        },
        Case {
            name: "leaky_relu",
            inputs: |r| vec![away_from_zero(r, &[2, 3, 2, 2], 0.01)],
            build: |t, v| {
                let y = t.leaky_relu(v[0], 0.01);
                project(t, y)
            },
            constant: none,
        },
        Case {
            name: "sigmoid",
            inputs: |r| vec![randn(r, &[2, 2, 2, 2])],
            build: |t, v| {
                let y = t.sigmoid(v[0]);
                project(t, y)
            },
            constant: none,
        },
        Case {
            name: "log",
            inputs: |r| vec![positive(r, &[2, 2, 2, 2])],
            build: |t, v| {
                let y = t.log(v[0])?;
                project(t, y)
            },
            constant: none,
        },
        Case {
            name: "global_avg_pool",
            inputs: |r| vec![randn(r, &[3, 2, 2, 3])],
            build: |t, v| {
                let y = t.global_avg_pool(v[0])?;
                project(t, y)
            },
            constant: none,
        },
        Case {
            name: "linear",
            inputs: |r| vec![randn(r, &[5]), randn(r, &[3, 5]), randn(r, &[3])],
            build: |t, v| {
                let y = t.linear(v[0], v[1], Some(v[2]))?;
                project(t, y)
            },
            constant: none,
        },
        Case {
            name: "softmax",
            inputs: |r| vec![randn(r, &[4, 2, 2, 2])],
            build: |t, v| {
                let y = t.softmax(v[0], 0)?;
                project(t, y)
            },
            constant: none,
        },
        Case {
            name: "concat",
            inputs: |r| vec![randn(r, &[2, 2, 2, 2]), randn(r, &[3, 2, 2, 2])],
            build: |t, v| {
                let y = t.concat(&[v[0], v[1]], 0)?;
                project(t, y)
            },
            constant: none,
        },
        Case {
            name: "narrow",
            inputs: |r| vec![randn(r, &[5, 2, 2, 2])],
            build: |t, v| {
                let y = t.narrow(v[0], 0, 1, 3)?;
                project(t, y)
            },
            constant: none,
        },
        Case {
            name: "add",
            inputs: |r| vec![randn(r, &[2, 2, 2, 2]), randn(r, &[2, 2, 2, 2])],
            build: |t, v| {
                let y = t.add(v[0], v[1])?;
                project(t, y)
            },
            constant: none,
        },
        Case {
            name: "mul",
            inputs: |r| vec![randn(r, &[2, 2, 2, 2]), randn(r, &[2, 2, 2, 2])],
            build: |t, v| {
                let y = t.mul(v[0], v[1])?;
                project(t, y)
            },
            constant: none,
        },
        Case {
            name: "scale",
            inputs: |r| vec![randn(r, &[2, 2, 2, 2])],
            build: |t, v| {
                let y = t.scale(v[0], -1.7);
                project(t, y)
            },
            constant: none,
        },
        Case {
            name: "sum",
            inputs: |r| vec![randn(r, &[2, 3, 2, 2])],
            build: |t, v| {
                let y = t.mul(v[0], v[0])?;
                Ok(t.sum(y))
            },
            constant: none,
        },
        Case {
            name: "mean",
            inputs: |r| vec![randn(r, &[2, 3, 2, 2])],
            build: |t, v| {
                let y = t.mul(v[0], v[0])?;
                t.mean(y)
            },
            constant: none,
        },
        Case {
            name: "channel_gather",
            inputs: |r| vec![randn(r, &[4, 2, 2, 2])],
            build: |t, v| {
                let y = t.channel_gather(v[0], &[2, 0, 3, 1, 2])?;
                project(t, y)
            },
            constant: none,
        },
        Case {
            name: "scale_channels",
            inputs: |r| vec![randn(r, &[3, 2, 2, 2]), randn(r, &[3])],
            build: |t, v| {
                let y = t.scale_channels(v[0], v[1])?;
                project(t, y)
            },
            constant: none,
        },
        Case {
            name: "avg_pool2",
            inputs: |r| vec![randn(r, &[2, 4, 2, 4])],
            build: |t, v| {
                let y = t.avg_pool2(v[0])?;
                project(t, y)
            },
            constant: none,
        },
        Case {
            name: "nearest_down2",
            inputs: |r| vec![randn(r, &[2, 4, 2, 4])],
            build: |t, v| {
                let y = t.nearest_down2(v[0])?;
                project(t, y)
            },
            constant: none,
        },
        Case {
            name: "cssa_forward",
            inputs: cssa_inputs,
            build: |t, v| cssa_build(t, v, false),
            constant: none,
        },
        Case {
            name: "cssa_forward_soft_gate",
            inputs: cssa_inputs,
            build: |t, v| cssa_build(t, v, true),
            constant: none,
        },
        Case {
            name: "dice_ce_loss",
            inputs: |r| vec![randn(r, &[4, 2, 3, 2]), label_input(r, 12, 4)],
            build: |t, v| {
                let labels: Vec<u8> = t.value(v[1]).data().iter().map(|x| x.round() as u8).collect();
                dice_ce_loss(t, v[0], &labels, 1e-5)
            },
            constant: |k| k == 1,
        },
        Case {
            name: "kd_loss",
            inputs: |r| (0..12).map(|_| randn(r, &[3, 2, 1, 2])).collect(),
            build: |t, v| kd_build(t, v, true),
            constant: |k| k % 4 == 0,
        },
        Case {
            name: "kd_loss_undetached",
            inputs: |r| (0..12).map(|_| randn(r, &[3, 2, 1, 2])).collect(),
            build: |t, v| kd_build(t, v, false),
            constant: none,
        },
    ]
}

/// Names of the checked operations, in report order.
pub fn suite_ops() -> Vec<&'static str> {
    cases().iter().map(|c| c.name).collect()
}

/// Runs every case over `seeds` random draws. One report per operation
/// carrying the worst relative error across seeds.
pub fn run_gradient_suite(seeds: usize, base_seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::new();
    for (k, case) in cases().into_iter().enumerate() {
        let mut worst = 0.0f64;
        for s in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(base_seed.wrapping_add((k * 1000 + s) as u64));
            let inputs = (case.inputs)(&mut rng);
            let wrt: Vec<bool> = (0..inputs.len()).map(|i| !(case.constant)(i)).collect();
            let r = grad_check_wrt(case.name, case.build, &inputs, &wrt, DEFAULT_TOLERANCE)?;
            worst = if r.max_rel_error.is_nan() { f64::INFINITY } else { worst.max(r.max_rel_error) };
        }
        out.push(GradCheckReport {
            op: case.name.to_string(),
            max_rel_error: worst,
            tolerance: DEFAULT_TOLERANCE,
            passed: worst <= DEFAULT_TOLERANCE,
        });
    }
    Ok(out)
}
