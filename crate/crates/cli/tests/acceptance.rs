//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! `DEMOSEG_ACCEPTANCE=1,2,5` restricts the run to the listed criteria.
//! Criteria 6 and 7 train real models and take about 20 minutes together on
//! one core.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use demoseg_core::cssa::permutation_from_scores;
use demoseg_core::decoupler::{DecoupledFeatures, Subspaces};
use demoseg_core::diffops::{Tape, Tensor};
use demoseg_core::evaluator::{efficiency_factor, EfficiencyInput};
use demoseg_core::gradient_suite::{run_gradient_suite, suite_ops};
use demoseg_core::losses::{dice_ce_from_probs, dice_ce_loss, kd_loss};
use demoseg_core::modality::{enumerate_scenarios, Modality, ModalityIndicator, Pairing, RelationshipTable};
use demoseg_core::rcr::{route, SlotSource};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(t: Instant, limit: Duration) -> Result<(), String> {
    let e = t.elapsed();
    ensure(e <= limit, format!("took {:.1}s, limit {:.0}s", e.as_secs_f64(), limit.as_secs_f64()))
}

fn demoseg(args: &[&str]) -> Result<String, String> {
    let o = Command::new(env!("CARGO_BIN_EXE_demoseg"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !o.status.success() {
        return Err(format!(
            "`demoseg {}` exited with {:?}: {}",
            args.join(" "),
            o.status.code(),
            String::from_utf8_lossy(&o.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&o.stdout).into_owned())
}

fn p(path: &Path) -> String {
    path.to_str().expect("utf-8 path").to_string()
}

fn efficiency_rows() -> Check {
    let t = Instant::now();
    let rows = [
        ("RFNet", EfficiencyInput::new(6.01, 6.9, 162.0, 1.0), 0.071),
        ("mmF", EfficiencyInput::new(0.72, 27.0, 58.0, 1.6), 0.035),
        ("DeMoSeg", EfficiencyInput::new(4.10, 0.3, 176.0, 1.6), 0.189),
    ];
    let mut detail = Vec::new();
    for (name, inp, want) in rows {
        let got = efficiency_factor(&inp).map_err(|e| e.to_string())?;
        ensure((got - want).abs() <= 1e-3, format!("{name}: {got:.5} vs {want}"))?;
        detail.push(format!("{name} {got:.5}"));
    }
    within(t, Duration::from_secs(1))?;
    Ok(detail.join(", "))
}

fn permutation_suite() -> Check {
    let t = Instant::now();
    let c1 = 32;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let voxels = 8;
    for trial in 0..10_000 {
        let scores: Vec<f64> = if trial % 2 == 0 {
            (0..c1).map(|_| rng.random_range(-3.0..3.0)).collect()
        } else {
            // integer scores produce ties
            (0..c1).map(|_| rng.random_range(0..6) as f64).collect()
        };
        let plan = permutation_from_scores(&scores).map_err(|e| e.to_string())?;
        let m = plan.matrix();
        for i in 0..c1 {
            let row: u32 = (0..c1).map(|j| m[i * c1 + j] as u32).sum();
            let col: u32 = (0..c1).map(|j| m[j * c1 + i] as u32).sum();
            ensure(row == 1 && col == 1, format!("trial {trial}: row/col {i} sums {row}/{col}"))?;
        }
        let dense = DMatrix::from_fn(c1, c1, |i, j| m[i * c1 + j] as f64);
        let det = dense.determinant();
        ensure((det.abs() - 1.0).abs() < 1e-9, format!("trial {trial}: |det| = {}", det.abs()))?;

        let mut sorted = scores.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
        ensure(
            permutation_from_scores(&sorted).map_err(|e| e.to_string())?.is_identity(),
            format!("trial {trial}: sorted scores not identity"),
        )?;

        let x: Vec<f64> = (0..c1 * voxels).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(Tensor::from_vec(&[c1, voxels], x.clone()));
        let g = tape.channel_gather(xv, &plan.order).map_err(|e| e.to_string())?;
        let xm = DMatrix::from_row_slice(c1, voxels, &x);
        let px = &dense * &xm;
        for i in 0..c1 {
            for v in 0..voxels {
                let a = tape.value(g).data()[i * voxels + v];
                ensure((a - px[(i, v)]).abs() <= 1e-12, format!("trial {trial}: gather differs from P·X"))?;
            }
        }
    }
    let tie = vec![0.5; c1];
    ensure(
        permutation_from_scores(&tie).map_err(|e| e.to_string())?.is_identity(),
        "all-tied scores not identity",
    )?;
    within(t, Duration::from_secs(30))?;
    Ok(format!("10000 vectors, C1 = {c1}, {:.1}s", t.elapsed().as_secs_f64()))
}

/// Matchings written out independently of `Pairing::partner`.
fn oracle_partner(p: Pairing, m: Modality) -> Modality {
    use Modality::*;
    let pairs: [(Modality, Modality); 2] = match p {
        Pairing::I => [(T1, Tc), (T2, Fl)],
        Pairing::II => [(T1, T2), (Tc, Fl)],
        Pairing::III => [(T1, Fl), (Tc, T2)],
    };
    pairs
        .iter()
        .find_map(|&(a, b)| {
            if a == m {
                Some(b)
            } else if b == m {
                Some(a)
            } else {
                None
            }
        })
        .expect("every modality is matched")
}

fn rcr_oracle() -> Check {
    let t = Instant::now();
    let mut n = 0;
    for delta in enumerate_scenarios() {
        for table in RelationshipTable::all_orders() {
            let got = route(delta, &table).map_err(|e| e.to_string())?;
            for m in Modality::ALL {
                let want = if delta.flags()[m.index()] {
                    SlotSource::SelfFeature { modality: m }
                } else {
                    let donor = table
                        .order()
                        .iter()
                        .map(|&p| oracle_partner(p, m))
                        .find(|d| delta.flags()[d.index()])
                        .ok_or_else(|| format!("{delta}: no donor for {m}"))?;
                    SlotSource::Mutual { donor, target: m }
                };
                ensure(got[m.index()] == want, format!("{delta} {}: slot {m} is {:?}", table.label(), got[m.index()]))?;
            }
            n += 1;
        }
    }
    use Modality::*;
    let s = |m| SlotSource::SelfFeature { modality: m };
    let full = route(ModalityIndicator::FULL, &RelationshipTable::default()).map_err(|e| e.to_string())?;
    ensure(full == [s(T1), s(Tc), s(T2), s(Fl)], "full-modality routing")?;
    let missing = route("0011".parse().unwrap(), &RelationshipTable::default()).map_err(|e| e.to_string())?;
    let want = [
        SlotSource::Mutual { donor: T2, target: T1 },
        SlotSource::Mutual { donor: Fl, target: Tc },
        s(T2),
        s(Fl),
    ];
    ensure(missing == want, format!("t1,tc missing routing: {missing:?}"))?;
    within(t, Duration::from_secs(5))?;
    Ok(format!("{n} cases plus 2 cited routings"))
}

fn gradient_suite() -> Check {
    let t = Instant::now();
    let reports = run_gradient_suite(20, 7).map_err(|e| e.to_string())?;
    ensure(reports.len() == suite_ops().len(), "missing reports")?;
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.passed || r.max_rel_error > 1e-4)
        .map(|r| format!("{} ({:.2e})", r.op, r.max_rel_error))
        .collect();
    ensure(failed.is_empty(), format!("failed: {}", failed.join(", ")))?;
    within(t, Duration::from_secs(600))?;
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    Ok(format!("{} ops x 20 seeds, worst rel err {worst:.2e}", reports.len()))
}

fn features(tape: &mut Tape<f64>, spec: &[(Modality, Tensor<f64>, Tensor<f64>)]) -> Vec<DecoupledFeatures> {
    spec.iter()
        .map(|(m, s, u)| {
            let self_feature = tape.constant(s.clone());
            let mutual = m.others().map(|l| (l, tape.constant(u.clone())));
            DecoupledFeatures {
                modality: *m,
                c: s.channels(),
                pre: Subspaces { self_feature, mutual },
                post: None,
            }
        })
        .collect()
}

fn loss_identities() -> Check {
    let err = |e: demoseg_core::Error| e.to_string();
    // identical sub-spaces
    let mut tape = Tape::<f64>::new();
    let v = Tensor::from_vec(&[2, 1, 1, 3], vec![0.2, -1.0, 0.4, 1.5, 0.0, -0.3]);
    let spec: Vec<_> = Modality::ALL.iter().map(|&m| (m, v.clone(), v.clone())).collect();
    let fs = features(&mut tape, &spec);
    let kd = kd_loss(&mut tape, &fs, |f| f.pre, 1.0, true).map_err(err)?;
    let kd0 = tape.value(kd).item();
    ensure(kd0.abs() < 1e-12, format!("kd on identical sub-spaces = {kd0}"))?;

    // two channels: u_{fl→t1} = (ln 3, 0) against s_t1 = (0, 0); the reverse pair agrees exactly
    let mut tape = Tape::<f64>::new();
    let zero = Tensor::from_vec(&[2, 1, 1, 1], vec![0.0, 0.0]);
    let skew = Tensor::from_vec(&[2, 1, 1, 1], vec![3f64.ln(), 0.0]);
    let fs = features(&mut tape, &[(Modality::T1, zero.clone(), zero.clone()), (Modality::Fl, zero, skew)]);
    let kd = kd_loss(&mut tape, &fs, |f| f.pre, 1.0, true).map_err(err)?;
    let kd1 = tape.value(kd).item();
    ensure((kd1 - 0.13081).abs() <= 1e-5, format!("two-channel kd = {kd1}"))?;

    // perfect one-hot, eps = 0
    let labels = [0u8, 2, 1, 1, 3];
    let k = 4;
    let mut probs = vec![0.0; k * labels.len()];
    for (i, &l) in labels.iter().enumerate() {
        probs[l as usize * labels.len() + i] = 1.0;
    }
    let (d, c) = dice_ce_from_probs(&probs, &labels, k, 0.0).map_err(err)?;
    ensure(d + c == 0.0, format!("perfect prediction loss = {}", d + c))?;

    // K = 2, uniform prediction, one voxel of class 0
    let mut tape = Tape::<f64>::new();
    let z = tape.constant(Tensor::from_vec(&[2, 1], vec![0.0, 0.0]));
    let l = dice_ce_loss(&mut tape, z, &[0], 0.0).map_err(err)?;
    let hand = tape.value(l).item();
    ensure((hand - 1.3598).abs() <= 1e-4, format!("hand case = {hand}"))?;
    Ok(format!("kd {kd0:.1e} / {kd1:.6}; dice_ce 0 / {hand:.5}"))
}

fn read_table(path: &Path) -> Result<Vec<(String, [f64; 3])>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        let cells: Vec<&str> = line.split('\t').collect();
        let n = cells.len();
        ensure(n >= 4, format!("short row {line:?}"))?;
        let num = |s: &str| s.parse::<f64>().map_err(|e| format!("{s:?}: {e}"));
        let key = cells[..n - 3].join("");
        rows.push((key, [num(cells[n - 3])?, num(cells[n - 2])?, num(cells[n - 1])?]));
    }
    Ok(rows)
}

/// Row key of a scenario in the emitted table: marks in fl, t1, tc, t2 order.
fn marks(delta: &str) -> String {
    let d: ModalityIndicator = delta.parse().unwrap();
    [Modality::Fl, Modality::T1, Modality::Tc, Modality::T2]
        .iter()
        .map(|m| if d.flags()[m.index()] { "•" } else { "◦" })
        .collect()
}

fn mean_total(lines: &[serde_json::Value]) -> f64 {
    lines.iter().map(|v| v["L_total"].as_f64().unwrap()).sum::<f64>() / lines.len() as f64
}

fn end_to_end(work: &Path) -> Check {
    let data = work.join("c6_data");
    let run = work.join("c6_run");
    let ev = work.join("c6_eval");
    demoseg(&["gen-data", "--n", "10", "--shape", "32,32,32", "--seed", "1", "--out", &p(&data)])?;
    let manifest = p(&data.join("manifest.json"));
    let t = Instant::now();
    demoseg(&[
        "train", "--manifest", &manifest, "--out", &p(&run), "--epochs", "20", "--iters-per-epoch", "50",
        "--batch-size", "2", "--seed", "0", "--log-every", "0",
    ])?;
    let train_secs = t.elapsed().as_secs_f64();
    let metrics: Vec<serde_json::Value> = fs::read_to_string(run.join("metrics.jsonl"))
        .map_err(|e| e.to_string())?
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    ensure(metrics.len() == 1000, format!("{} iterations logged", metrics.len()))?;
    demoseg(&[
        "eval", "--checkpoint", &p(&run.join("checkpoint.bin")), "--manifest", &manifest, "--out", &p(&ev),
    ])?;
    let rows = read_table(&ev.join("table.tsv"))?;
    ensure(rows.len() == 16, format!("{} table rows", rows.len()))?;
    let full = rows
        .iter()
        .find(|(k, _)| *k == marks("1111"))
        .ok_or("no full-modality row")?
        .1;
    let worst_wt = rows[..15].iter().map(|r| r.1[0]).fold(f64::INFINITY, f64::min);
    let (first, last) = (mean_total(&metrics[..50]), mean_total(&metrics[950..]));
    let detail = format!(
        "full WT {:.4} TC {:.4}; min scenario WT {worst_wt:.4}; L_total {first:.3} -> {last:.3}; train {train_secs:.0}s",
        full[0], full[1]
    );
    ensure(full[0] >= 0.85 && full[1] >= 0.70, detail.clone())?;
    ensure(worst_wt >= 0.60, detail.clone())?;
    ensure(last < first, detail.clone())?;
    ensure(train_secs <= 1800.0, detail.clone())?;
    Ok(detail)
}

fn ordering(work: &Path) -> Check {
    let data = work.join("c7_data");
    demoseg(&["gen-data", "--n", "10", "--shape", "32,32,32", "--seed", "2", "--out", &p(&data)])?;
    let manifest = p(&data.join("manifest.json"));
    let singles = ["1000", "0100", "0010", "0001"];
    let seeds = [11u64, 12, 13];
    let mut sums = [0.0f64; 5];
    for seed in seeds {
        let run = work.join(format!("c7_run_{seed}"));
        let ev = work.join(format!("c7_eval_{seed}"));
        demoseg(&[
            "train", "--manifest", &manifest, "--out", &p(&run), "--epochs", "20", "--iters-per-epoch", "50",
            "--batch-size", "2", "--seed", &seed.to_string(), "--log-every", "0",
        ])?;
        let mut args = vec![
            "eval".to_string(),
            "--checkpoint".into(),
            p(&run.join("checkpoint.bin")),
            "--manifest".into(),
            manifest.clone(),
            "--out".into(),
            p(&ev),
        ];
        for s in singles.iter().chain(["1111"].iter()) {
            args.push("--scenario".into());
            args.push(s.to_string());
        }
        demoseg(&args.iter().map(String::as_str).collect::<Vec<_>>())?;
        let rows = read_table(&ev.join("table.tsv"))?;
        for (i, s) in singles.iter().chain(["1111"].iter()).enumerate() {
            let wt = rows.iter().find(|(k, _)| *k == marks(s)).ok_or(format!("no row {s}"))?.1[0];
            sums[i] += wt;
        }
    }
    let avg = sums.map(|s| s / seeds.len() as f64);
    let detail = format!(
        "WT over {} seeds: t1 {:.4} tc {:.4} t2 {:.4} fl {:.4} full {:.4}",
        seeds.len(),
        avg[0],
        avg[1],
        avg[2],
        avg[3],
        avg[4]
    );
    ensure(avg[..4].iter().all(|&s| s <= avg[4]), detail.clone())?;
    Ok(detail)
}

fn determinism(work: &Path) -> Check {
    let data = work.join("c8_data");
    demoseg(&["gen-data", "--n", "6", "--shape", "32,32,32", "--seed", "3", "--out", &p(&data)])?;
    let manifest = p(&data.join("manifest.json"));
    let train = |out: &Path, extra: &[&str]| {
        let mut args = vec![
            "train", "--manifest", &manifest, "--epochs", "3", "--iters-per-epoch", "8", "--batch-size", "2",
            "--seed", "5", "--log-every", "0",
        ];
        let out = p(out);
        args.extend(["--out", &out]);
        args.extend(extra);
        demoseg(&args)
    };
    let (a, b, c) = (work.join("c8_a"), work.join("c8_b"), work.join("c8_c"));
    train(&a, &[])?;
    train(&b, &[])?;
    let read = |d: &Path| fs::read(d.join("metrics.jsonl")).map_err(|e| e.to_string());
    ensure(read(&a)? == read(&b)?, "two identical runs logged different metrics")?;
    train(&c, &["--stop-after", "1"])?;
    let ck = p(&c.join("checkpoint.bin"));
    train(&c, &["--resume", &ck])?;
    ensure(read(&a)? == read(&c)?, "resumed trace differs from the uninterrupted run")?;
    let n = read(&a)?.iter().filter(|&&b| b == b'\n').count();
    Ok(format!("{n} iterations bit-identical across 2 runs and a resume after epoch 1"))
}

fn ablation_tables(work: &Path) -> Check {
    let data = work.join("c9_data");
    demoseg(&["gen-data", "--n", "5", "--shape", "16,16,16", "--seed", "4", "--out", &p(&data)])?;
    let manifest = p(&data.join("manifest.json"));
    let mut counts = Vec::new();
    for (kind, want) in [("components", 8), ("rcr-order", 6), ("kd-placement", 3)] {
        let out = work.join(format!("c9_{kind}"));
        demoseg(&[
            "ablate", "--kind", kind, "--manifest", &manifest, "--out", &p(&out), "--epochs", "1",
            "--iters-per-epoch", "2", "--batch-size", "1",
        ])?;
        let text = fs::read_to_string(out.join("table.tsv")).map_err(|e| e.to_string())?;
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().ok_or("empty table")?.split('\t').collect();
        ensure(header.ends_with(&["WT", "TC", "ET"]), format!("{kind}: header {header:?}"))?;
        let rows = read_table(&out.join("table.tsv"))?;
        ensure(rows.len() == want, format!("{kind}: {} rows, want {want}", rows.len()))?;
        ensure(
            rows.iter().all(|r| r.1.iter().all(|v| (0.0..=1.0).contains(v))),
            format!("{kind}: DSC out of range"),
        )?;
        counts.push(format!("{kind} {}", rows.len()));
    }
    Ok(counts.join(", "))
}

fn main() {
    let only: Option<Vec<u32>> = std::env::var("DEMOSEG_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let work_dir = tempfile::tempdir().expect("temp dir");
    let work: PathBuf = work_dir.path().to_path_buf();
    let criteria: Vec<(u32, &str, Box<dyn Fn() -> Check>)> = vec![
        (1, "efficiency factor reproduces the published P values", Box::new(efficiency_rows)),
        (2, "CSSA permutation suite", Box::new(permutation_suite)),
        (3, "RCR routing oracle", Box::new(rcr_oracle)),
        (4, "gradient suite", Box::new(gradient_suite)),
        (5, "loss identities", Box::new(loss_identities)),
        (6, "end-to-end desk training", Box::new({
            let w = work.clone();
            move || end_to_end(&w)
        })),
        (7, "missing-modality ordering over 3 seeds", Box::new({
            let w = work.clone();
            move || ordering(&w)
        })),
        (8, "determinism and resume", Box::new({
            let w = work.clone();
            move || determinism(&w)
        })),
        (9, "ablation table shapes", Box::new({
            let w = work.clone();
            move || ablation_tables(&w)
        })),
    ];
    let mut failed = 0;
    for (id, name, run) in &criteria {
        if only.as_ref().is_some_and(|o| !o.contains(id)) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| run())).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {id}: PASS  {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id}: FAIL  {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
