use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use demoseg_core::ablation::{run_ablation, AblationKind};
use demoseg_core::backbone::{DeMoSeg, Profile, UNetConfig};
use demoseg_core::evaluator::{efficiency_factor, evaluate_checkpoint, load_normalized, EfficiencyInput, EmptyConvention, EvalConfig};
use demoseg_core::gradient_suite::run_gradient_suite;
use demoseg_core::modality::{enumerate_scenarios, ModalityIndicator, RelationshipTable};
use demoseg_core::trainer::{train, Checkpoint, IterRecord, PerturbGranularity, RunOptions, TrainConfig};
use demoseg_core::volume_io::{generate_dataset, DatasetManifest, Split};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(name = "demoseg", version, about = "Missing-modality brain tumor segmentation on synthetic phantoms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write seeded phantom cases and a 70/10/20 manifest.
    GenData(GenDataArgs),
    /// Train under random modality dropout.
    Train(TrainArgs),
    /// Score a checkpoint on the test split for every missing-modality scenario.
    Eval(EvalArgs),
    /// Train and score ablation variants.
    Ablate(AblateArgs),
    /// Finite-difference gradient checks of every differentiable op.
    Gradcheck(GradcheckArgs),
    /// Accuracy gain per unit cost.
    Efficiency(EfficiencyArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 10)]
    n: usize,
    /// D,H,W
    #[arg(long, default_value = "32,32,32", value_parser = parse_shape)]
    shape: [usize; 3],
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Allow writing into a non-empty directory.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Desk,
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum GranularityArg {
    Batch,
    Sample,
}

/// Overrides applied on top of `--config` (or the defaults).
#[derive(Args)]
struct TrainOverrides {
    /// JSON training config; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    profile: Option<ProfileArg>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    iters_per_epoch: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_shape)]
    patch: Option<[usize; 3]>,
    #[arg(long, value_enum)]
    perturb_granularity: Option<GranularityArg>,
    /// Priority order of the pairings, e.g. `I,II,III`.
    #[arg(long)]
    rcr_order: Option<RelationshipTable>,
    /// Scale gathered CSSA channels by their sigmoid scores.
    #[arg(long)]
    cssa_soft_gate: bool,
    /// Disable all augmentation.
    #[arg(long)]
    no_augment: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: TrainOverrides,
    /// Continue from a checkpoint written by an earlier run of the same config.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many completed epochs.
    #[arg(long)]
    stop_after: Option<usize>,
    /// Print a progress line every this many iterations (0 disables).
    #[arg(long, default_value_t = 50)]
    log_every: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum EmptyArg {
    One,
    Zero,
}

#[derive(Args)]
struct EvalOptions {
    /// Value of DSC when both prediction and reference are empty.
    #[arg(long, value_enum, default_value = "one")]
    empty_dsc: EmptyArg,
    /// Skip small-ET relabelling.
    #[arg(long)]
    no_postprocess: bool,
    /// ET voxel threshold; defaults to 500 scaled by volume.
    #[arg(long)]
    et_threshold: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Availability digits in t1,tc,t2,fl order (e.g. 0011); repeatable.
    #[arg(long)]
    scenario: Vec<ModalityIndicator>,
    #[arg(long)]
    rcr_order: Option<RelationshipTable>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    eval: EvalOptions,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    kind: AblationKind,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: TrainOverrides,
    #[command(flatten)]
    eval: EvalOptions,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    seeds: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EfficiencyArgs {
    /// DSC gain, percentage points.
    #[arg(long)]
    ddsc: f64,
    /// Parameters, millions.
    #[arg(long)]
    param: f64,
    /// FLOPs, billions.
    #[arg(long)]
    flops: f64,
    #[arg(long, default_value_t = 1.0)]
    eta: f64,
    #[arg(long, default_value_t = 0.5)]
    lambda: f64,
    #[arg(long, default_value_t = 0.5)]
    mu: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_shape(s: &str) -> Result<[usize; 3], String> {
    let v: Vec<usize> = s
        .split([',', 'x'])
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    v.try_into().map_err(|_| format!("expected three extents, got {s:?}"))
}

/// An error that already knows its exit code.
#[derive(Debug)]
struct Exit(u8, String);

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.1)
    }
}

impl std::error::Error for Exit {}

fn exit_code(err: &anyhow::Error) -> u8 {
    use demoseg_core::Error as E;
    for cause in err.chain() {
        if let Some(Exit(code, _)) = cause.downcast_ref::<Exit>() {
            return *code;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::NonFinite(_) => EXIT_NUMERIC,
                E::InvalidArgument(_) | E::Degenerate(_) => EXIT_USAGE,
                _ => EXIT_DATA,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() || cause.downcast_ref::<serde_json::Error>().is_some() {
            return EXIT_DATA;
        }
    }
    EXIT_USAGE
}

fn write_json(path: &Path, value: &serde_json::Value) -> anyhow::Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn load_manifest(path: &Path) -> anyhow::Result<DatasetManifest> {
    DatasetManifest::load(path).with_context(|| format!("loading manifest {}", path.display()))
}

fn train_config(o: &TrainOverrides) -> anyhow::Result<TrainConfig> {
    let mut cfg: TrainConfig = match &o.config {
        Some(p) => {
            let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", p.display()))?
        }
        None => TrainConfig::default(),
    };
    if let Some(p) = o.profile {
        let keep = (cfg.network.components, cfg.network.rcr_order, cfg.network.cssa_soft_gate);
        cfg.network = UNetConfig::for_profile(match p {
            ProfileArg::Desk => Profile::Desk,
            ProfileArg::Full => Profile::Full,
        });
        (cfg.network.components, cfg.network.rcr_order, cfg.network.cssa_soft_gate) = keep;
    }
    macro_rules! set {
        ($field:ident) => {
            if let Some(v) = o.$field {
                cfg.$field = v;
            }
        };
    }
    set!(epochs);
    set!(iters_per_epoch);
    set!(batch_size);
    set!(lr);
    set!(seed);
    set!(patch);
    if let Some(g) = o.perturb_granularity {
        cfg.perturb_granularity = match g {
            GranularityArg::Batch => PerturbGranularity::Batch,
            GranularityArg::Sample => PerturbGranularity::Sample,
        };
    }
    if let Some(t) = o.rcr_order {
        cfg.network.rcr_order = t;
    }
    if o.cssa_soft_gate {
        cfg.network.cssa_soft_gate = true;
    }
    if o.no_augment {
        cfg.augment = demoseg_core::trainer::AugmentConfig::none();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn eval_config(o: &EvalOptions, window: [usize; 3]) -> EvalConfig {
    EvalConfig {
        window,
        empty: match o.empty_dsc {
            EmptyArg::One => EmptyConvention::One,
            EmptyArg::Zero => EmptyConvention::Zero,
        },
        postprocess: !o.no_postprocess,
        et_threshold: o.et_threshold,
    }
}

fn gen_data(a: GenDataArgs) -> anyhow::Result<()> {
    if a.out.exists() && fs::read_dir(&a.out)?.next().is_some() && !a.force {
        bail!(Exit(
            EXIT_DATA,
            format!("{} exists and is not empty (pass --force to overwrite)", a.out.display())
        ));
    }
    let desk = UNetConfig::desk();
    if desk.check_extent(a.shape).is_err() {
        eprintln!(
            "warning: shape {:?} is not divisible by 2^(num_scales-1) = {} as the desk backbone requires; \
             training patches and inference windows must still be",
            a.shape,
            desk.divisor()
        );
    }
    fs::create_dir_all(&a.out)?;
    let m = generate_dataset(a.n, a.shape, a.seed, &a.out)?;
    write_json(
        &a.out.join("config.json"),
        &json!({"command": "gen-data", "n": a.n, "shape": a.shape, "seed": a.seed}),
    )?;
    println!(
        "wrote {} cases to {} (train {}, val {}, test {})",
        a.n,
        a.out.display(),
        m.train.len(),
        m.val.len(),
        m.test.len()
    );
    Ok(())
}

fn train_cmd(a: TrainArgs) -> anyhow::Result<()> {
    let cfg = train_config(&a.overrides)?;
    let manifest = load_manifest(&a.manifest)?;
    fs::create_dir_all(&a.out)?;
    let resume = match &a.resume {
        Some(p) => Some(Checkpoint::load(p).with_context(|| format!("loading checkpoint {}", p.display()))?),
        None => None,
    };
    write_json(
        &a.out.join("config.json"),
        &json!({
            "command": "train",
            "manifest": a.manifest,
            "config_hash": cfg.hash(),
            "resume": a.resume,
            "stop_after": a.stop_after,
            "train": cfg,
        }),
    )?;
    let every = a.log_every;
    let mut progress = |r: &IterRecord| {
        if every > 0 && r.iter % every == 0 {
            eprintln!(
                "iter {:>6}  epoch {:>4}  lr {:.5}  L_seg {:.4}  L_kd {:.4}  L_total {:.4}",
                r.iter, r.epoch, r.lr, r.l_seg, r.l_kd, r.l_total
            );
        }
    };
    let outcome = train(
        &manifest,
        &cfg,
        RunOptions {
            out: Some(a.out.clone()),
            resume,
            stop_after_epoch: a.stop_after,
            progress: Some(&mut progress),
        },
    )?;
    println!(
        "trained {} epochs; checkpoint {}",
        outcome.epochs_completed,
        outcome.checkpoint.map(|p| p.display().to_string()).unwrap_or_else(|| "-".into())
    );
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> anyhow::Result<()> {
    let mut ck = Checkpoint::load(&a.checkpoint).with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    if let Some(order) = a.rcr_order {
        let mut net = ck.model.config().clone();
        net.rcr_order = order;
        ck.model = DeMoSeg::from_parts(net, ck.model.params().clone())?;
    }
    let manifest = load_manifest(&a.manifest)?;
    let scenarios = if a.scenario.is_empty() { enumerate_scenarios() } else { a.scenario.clone() };
    let cfg = eval_config(&a.eval, ck.config.patch);
    let (table, reports) = evaluate_checkpoint(&ck, &manifest, &scenarios, &cfg)?;
    print!("{}", table.to_text());
    if let Some(out) = &a.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("table.tsv"), table.to_tsv())?;
        fs::write(out.join("table.txt"), table.to_text())?;
        write_json(&out.join("per_case.json"), &serde_json::to_value(&reports)?)?;
        write_json(
            &out.join("config.json"),
            &json!({
                "command": "eval",
                "checkpoint": a.checkpoint,
                "manifest": a.manifest,
                "scenarios": scenarios,
                "rcr_order": ck.model.config().rcr_order,
                "eval": cfg,
            }),
        )?;
    }
    Ok(())
}

fn ablate_cmd(a: AblateArgs) -> anyhow::Result<()> {
    let base = train_config(&a.overrides)?;
    let manifest = load_manifest(&a.manifest)?;
    let train_cases = load_normalized(&manifest, Split::Train)?;
    let test_cases = load_normalized(&manifest, Split::Test)?;
    let cfg = eval_config(&a.eval, base.patch);
    fs::create_dir_all(&a.out)?;
    write_json(
        &a.out.join("config.json"),
        &json!({
            "command": "ablate",
            "kind": a.kind,
            "manifest": a.manifest,
            "train": base,
            "eval": cfg,
        }),
    )?;
    let report = run_ablation(a.kind, &train_cases, &test_cases, &base, &cfg, Some(&a.out), |i, row| {
        eprintln!("variant {i} [{}]: WT {:.4} TC {:.4} ET {:.4}", row.keys.join(" "), row.dsc[0], row.dsc[1], row.dsc[2]);
    })?;
    for (i, t) in report.scenario_tables.iter().enumerate() {
        fs::write(a.out.join(format!("variant_{i}")).join("table.tsv"), t.to_tsv())?;
    }
    fs::write(a.out.join("table.tsv"), report.table.to_tsv())?;
    fs::write(a.out.join("table.txt"), report.table.to_text())?;
    print!("{}", report.table.to_text());
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> anyhow::Result<()> {
    let reports = run_gradient_suite(a.seeds, a.seed)?;
    let mut out = std::io::stdout().lock();
    for r in &reports {
        writeln!(
            out,
            "{:<28} max_rel_err {:.3e}  tol {:.0e}  {}",
            r.op,
            r.max_rel_error,
            r.tolerance,
            if r.passed { "ok" } else { "FAIL" }
        )?;
    }
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("config.json"), &json!({"command": "gradcheck", "seeds": a.seeds, "seed": a.seed}))?;
        write_json(&dir.join("gradcheck.json"), &serde_json::to_value(&reports)?)?;
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.op.as_str()).collect();
    if !failed.is_empty() {
        bail!(Exit(EXIT_NUMERIC, format!("gradient check failed for {}", failed.join(", "))));
    }
    Ok(())
}

fn efficiency_cmd(a: EfficiencyArgs) -> anyhow::Result<()> {
    let input = EfficiencyInput {
        ddsc: a.ddsc,
        param_m: a.param,
        flops_g: a.flops,
        eta: a.eta,
        lambda: a.lambda,
        mu: a.mu,
    };
    let p = efficiency_factor(&input)?;
    println!("{p:.5}");
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir)?;
        write_json(
            &dir.join("config.json"),
            &json!({"command": "efficiency", "input": input, "p": p}),
        )?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Efficiency(a) => efficiency_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
