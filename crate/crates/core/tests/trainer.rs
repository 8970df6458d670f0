use std::fs;

use demoseg_core::modality::enumerate_scenarios;
use demoseg_core::trainer::{train_cases, Checkpoint, IterRecord, PerturbGranularity, RunOptions, TrainConfig};
use demoseg_core::volume_io::{generate_phantom, CaseRecord, PhantomSpec, Volume};
use demoseg_core::Error;

fn cases(n: u64, side: usize) -> Vec<CaseRecord> {
    (0..n)
        .map(|i| {
            generate_phantom(&PhantomSpec::desk([side; 3], 100 + i))
                .unwrap()
                .normalized()
                .unwrap()
        })
        .collect()
}

fn small_config() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        iters_per_epoch: 4,
        batch_size: 2,
        seed: 42,
        ..TrainConfig::default()
    }
}

#[test]
fn identical_seeds_give_identical_metrics() {
    let cs = cases(3, 16);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let opts = RunOptions {
            out: Some(d.path().to_path_buf()),
            ..Default::default()
        };
        train_cases(&cs, &small_config(), opts).unwrap();
    }
    let a = fs::read(dirs[0].path().join("metrics.jsonl")).unwrap();
    let b = fs::read(dirs[1].path().join("metrics.jsonl")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn resume_reproduces_uninterrupted_trace() {
    let cs = cases(3, 16);
    let cfg = small_config();
    let full = tempfile::tempdir().unwrap();
    let whole = train_cases(
        &cs,
        &cfg,
        RunOptions {
            out: Some(full.path().to_path_buf()),
            ..Default::default()
        },
    )
    .unwrap();

    let part = tempfile::tempdir().unwrap();
    let first = train_cases(
        &cs,
        &cfg,
        RunOptions {
            out: Some(part.path().to_path_buf()),
            stop_after_epoch: Some(1),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(first.history.len(), cfg.iters_per_epoch);
    let ck = Checkpoint::load(&part.path().join("checkpoint.bin")).unwrap();
    assert_eq!((ck.epoch, ck.iteration), (1, cfg.iters_per_epoch));
    let rest = train_cases(
        &cs,
        &cfg,
        RunOptions {
            out: Some(part.path().to_path_buf()),
            resume: Some(ck),
            ..Default::default()
        },
    )
    .unwrap();
    let stitched: Vec<IterRecord> = first.history.into_iter().chain(rest.history).collect();
    assert_eq!(stitched, whole.history);
    assert_eq!(
        fs::read(full.path().join("metrics.jsonl")).unwrap(),
        fs::read(part.path().join("metrics.jsonl")).unwrap()
    );
    assert_eq!(whole.model.params().values(), rest.model.params().values());
}

#[test]
fn resume_rejects_a_different_config() {
    let cs = cases(2, 16);
    let cfg = small_config();
    let dir = tempfile::tempdir().unwrap();
    train_cases(
        &cs,
        &cfg,
        RunOptions {
            out: Some(dir.path().to_path_buf()),
            stop_after_epoch: Some(1),
            ..Default::default()
        },
    )
    .unwrap();
    let ck = Checkpoint::load(&dir.path().join("checkpoint.bin")).unwrap();
    let mut other = cfg.clone();
    other.lr = 0.02;
    let r = train_cases(
        &cs,
        &other,
        RunOptions {
            resume: Some(ck),
            ..Default::default()
        },
    );
    assert!(matches!(r, Err(Error::Contract(_))));
}

#[test]
fn deltas_are_valid_and_granularity_is_respected() {
    let cs = cases(2, 16);
    let valid: Vec<String> = enumerate_scenarios().iter().map(|d| d.to_digits()).collect();
    let mut cfg = small_config();
    cfg.epochs = 1;
    cfg.iters_per_epoch = 12;
    let batch = train_cases(&cs, &cfg, RunOptions::default()).unwrap();
    for r in &batch.history {
        assert_eq!(r.delta.len(), 2);
        assert_eq!(r.delta[0], r.delta[1]);
        assert!(r.delta.iter().all(|d| valid.contains(d)));
    }
    cfg.perturb_granularity = PerturbGranularity::Sample;
    let sample = train_cases(&cs, &cfg, RunOptions::default()).unwrap();
    assert!(sample.history.iter().any(|r| r.delta[0] != r.delta[1]));
    assert!(sample.history.iter().flat_map(|r| &r.delta).all(|d| valid.contains(d)));
}

#[test]
fn non_finite_loss_aborts_with_dump() {
    let mut cs = cases(1, 16);
    let huge = Volume::new([16; 3], vec![1e38; 4096]).unwrap();
    cs[0].volumes = [huge.clone(), huge.clone(), huge.clone(), huge];
    let mut cfg = small_config();
    cfg.perturb = false;
    let dir = tempfile::tempdir().unwrap();
    let r = train_cases(
        &cs,
        &cfg,
        RunOptions {
            out: Some(dir.path().to_path_buf()),
            ..Default::default()
        },
    );
    assert!(matches!(r, Err(Error::NonFinite(_))), "{:?}", r.err());
    let dump: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("nan_dump.json")).unwrap()).unwrap();
    assert_eq!(dump["iter"], 0);
    assert_eq!(dump["delta"][0], "1111");
}

#[test]
fn loss_decreases_over_200_iterations() {
    let cs = cases(4, 32);
    let cfg = TrainConfig {
        epochs: 4,
        iters_per_epoch: 50,
        batch_size: 1,
        seed: 3,
        ..TrainConfig::default()
    };
    let h = train_cases(&cs, &cfg, RunOptions::default()).unwrap().history;
    assert_eq!(h.len(), 200);
    let mean = |s: &[IterRecord]| s.iter().map(|r| r.l_total).sum::<f64>() / s.len() as f64;
    let (first, last) = (mean(&h[..20]), mean(&h[180..]));
    assert!(last < first, "first {first} last {last}");
}
