mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dsnet::analysis::{render_csv, render_table, resource_report};
use dsnet::arch::{Stem, DEPTH_PRESETS, WIDTH_PRESETS};
use dsnet::checkpoint::Checkpoint;
use dsnet::data::{dataset_for_dir, CifarVariant, Dataset, Split};
use dsnet::equivalence::{
    expand_dense_identity_coefficients, fuzz_concat_sum, fuzz_shared_weight, gradient_check, linear_closed_form_coefficients,
    measure_normalization_economy, EquivalenceReport,
};
use dsnet::train::{evaluate, train, FINAL_CHECKPOINT, METRICS_FILE};
use dsnet::{DType, Network, NetworkConfig, Tensor, Variant};
use log::{info, warn};
use num_bigint::BigUint;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use config::{ModelArgs, TrainArgs};

/// Dense weighted normalized shortcut networks: training, evaluation and checks.
#[derive(Debug, Parser)]
#[command(name = "dsnet", version, about)]
struct Cli {
    /// Single-threaded, serial kernels. Results are bitwise reproducible either way;
    /// this also makes timing and log order reproducible.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train on CIFAR binaries (or a synthetic set) and write checkpoints and metrics.
    Train(TrainCmd),
    /// Top-1 / top-5 error of a checkpoint.
    Eval(EvalCmd),
    /// Equivalence, coefficient and shared-normalization checks.
    Verify(VerifyCmd),
    /// Backward against central finite differences on tiny networks.
    Gradcheck(GradcheckCmd),
    /// Parameter, MAC and activation-memory table.
    Analyze(AnalyzeCmd),
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Directory holding the CIFAR-10 or CIFAR-100 binary files.
    #[arg(long, value_name = "DIR")]
    data_dir: Option<PathBuf>,
    /// Use N generated images instead of CIFAR (plus N/4 held out for validation).
    #[arg(long, value_name = "N", conflicts_with = "data_dir")]
    synthetic: Option<usize>,
    /// Seed of the synthetic image generator.
    #[arg(long, default_value_t = 0)]
    synthetic_seed: u64,
}

impl DataArgs {
    /// Training and validation sets.
    fn load(&self, classes: usize, dataset: Option<CifarVariant>) -> Result<(Dataset, Dataset)> {
        match (&self.data_dir, self.synthetic) {
            (Some(dir), _) => {
                let variant = dataset_for_dir(dataset, dir)?;
                let train = dsnet::data::load_cifar(dir, variant, Split::Train)?;
                let test = dsnet::data::load_cifar(dir, variant, Split::Test)?;
                Ok((train, test))
            }
            (None, Some(n)) => {
                let held = (n / 4).max(1);
                let all = Dataset::synthetic(n + held, classes, self.synthetic_seed)?;
                Ok(all.split_at(n))
            }
            (None, None) => bail!("pass --data-dir with CIFAR binaries or --synthetic N"),
        }
    }
}

#[derive(Debug, Args)]
struct TrainCmd {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Output directory for checkpoints, metrics.csv and run.json.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalCmd {
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Evaluate the training split instead of the test split.
    #[arg(long)]
    train_split: bool,
    /// Evaluate at most this many images.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    /// Print a JSON object instead of text.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct VerifyCmd {
    /// Randomized cases per equivalence.
    #[arg(long, default_value_t = 100)]
    cases: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Largest depth for the dense-identity coefficient oracle.
    #[arg(long, default_value_t = 12)]
    max_depth: usize,
}

#[derive(Debug, Args)]
struct GradcheckCmd {
    #[command(flatten)]
    model: ModelArgs,
    /// Coordinates sampled per parameter.
    #[arg(long, default_value_t = 20)]
    coords: usize,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 2)]
    batch: usize,
    /// Print the worst coordinate of every parameter.
    #[arg(long, short)]
    verbose: bool,
}

#[derive(Debug, Args)]
struct AnalyzeCmd {
    #[command(flatten)]
    model: ModelArgs,
    /// Rows for every depth preset.
    #[arg(long)]
    all_depths: bool,
    /// Rows for every width preset.
    #[arg(long)]
    all_widths: bool,
    /// Batch size for the activation-memory estimate.
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value = "f32")]
    precision: DType,
    #[arg(long)]
    csv: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    if let Err(e) = configure_threads(cli.deterministic, cli.threads) {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    let outcome = match &cli.command {
        Command::Train(c) => run_train(c, cli.deterministic),
        Command::Eval(c) => run_eval(c),
        Command::Verify(c) => run_verify(c),
        Command::Gradcheck(c) => run_gradcheck(c),
        Command::Analyze(c) => run_analyze(c),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn configure_threads(deterministic: bool, threads: Option<usize>) -> Result<()> {
    let n = if deterministic { Some(1) } else { threads };
    if deterministic {
        dsnet::kernels::set_parallel(false);
    }
    if let Some(n) = n {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    Ok(())
}

fn run_train(cmd: &TrainCmd, deterministic: bool) -> Result<bool> {
    let file = cmd.model.run_file()?;
    let mut net_cfg = cmd
        .model
        .network(&file, NetworkConfig::new(Variant::DsNet, 26, 0.25, Stem::Cifar, 10))?;
    let cfg = cmd.train.train(&file, cmd.model.seed)?;

    let dataset = match &cmd.data.data_dir {
        Some(dir) => Some(dataset_for_dir(cfg.dataset, dir)?),
        None => None,
    };
    if let Some(d) = dataset {
        if net_cfg.classes != d.classes() {
            if cmd.model.classes.is_some() {
                bail!("--classes {} does not match {:?} ({} classes)", net_cfg.classes, d, d.classes());
            }
            info!("using {} classes from the dataset", d.classes());
            net_cfg.classes = d.classes();
        }
    }
    let (train_set, val_set) = cmd.data.load(net_cfg.classes, dataset)?;
    info!(
        "{} train / {} validation images, {} classes",
        train_set.len(),
        val_set.len(),
        train_set.classes()
    );

    let out = cmd
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("runs/{}-seed{}", net_cfg.variant, cfg.seed)));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let run = serde_json::json!({ "network": net_cfg, "train": cfg });
    fs::write(out.join("run.json"), serde_json::to_string_pretty(&run)? + "\n")?;
    info!(
        "training {} ({} parameters) for {} iterations at {}{}",
        net_cfg.variant,
        dsnet::analysis::count_parameters(&net_cfg)?.total(),
        cfg.iterations,
        cfg.precision,
        if deterministic { ", deterministic" } else { "" }
    );

    let report = match cfg.precision {
        DType::F32 => train::<f32>(&net_cfg, &cfg, &train_set, Some(&val_set), Some(&out))?.2,
        DType::F64 => train::<f64>(&net_cfg, &cfg, &train_set, Some(&val_set), Some(&out))?.2,
    };
    let last = report.losses.last().copied().unwrap_or(f64::NAN);
    println!("final train loss {last:.4}");
    if let Some((e1, e5)) = report.final_val {
        println!("validation top-1 error {e1:.2}%  top-5 error {e5:.2}%");
    }
    println!("checkpoint {}", out.join(FINAL_CHECKPOINT).display());
    println!("metrics    {}", out.join(METRICS_FILE).display());
    Ok(true)
}

fn run_eval(cmd: &EvalCmd) -> Result<bool> {
    let ckpt = Checkpoint::load(&cmd.checkpoint).with_context(|| format!("loading {}", cmd.checkpoint.display()))?;
    let classes = ckpt.meta.network.classes;
    let dataset = ckpt.meta.train.as_ref().and_then(|t| t.dataset);
    let (train_set, test_set) = cmd.data.load(classes, dataset)?;
    let stats = ckpt.meta.data_stats.unwrap_or_else(|| {
        warn!("checkpoint has no standardization statistics; using the training split's");
        train_set.channel_stats()
    });
    let mut data = if cmd.train_split { train_set } else { test_set };
    if let Some(n) = cmd.limit {
        data = data.truncated(n);
    }
    let dtype = ckpt.entries.first().map_or(DType::F32, |e| e.dtype);
    let (e1, e5) = match dtype {
        DType::F32 => evaluate(&ckpt.to_network::<f32>()?, &data, &stats, cmd.batch_size)?,
        DType::F64 => evaluate(&ckpt.to_network::<f64>()?, &data, &stats, cmd.batch_size)?,
    };
    if cmd.json {
        let v = serde_json::json!({
            "checkpoint": cmd.checkpoint,
            "images": data.len(),
            "top1_err": e1,
            "top5_err": e5,
        });
        println!("{v}");
    } else {
        println!("{} images: top-1 error {e1:.2}%  top-5 error {e5:.2}%", data.len());
    }
    Ok(true)
}

fn worst(case: &str, reports: &[EquivalenceReport], tol: f64) -> EquivalenceReport {
    let max = reports.iter().map(|r| r.max_abs_diff).fold(0.0, f64::max);
    let mut r = EquivalenceReport::new(format!("{case} x{}", reports.len()), max, tol);
    r.passed &= reports.iter().all(|r| r.passed);
    r
}

fn coefficient_report(max_depth: usize) -> (EquivalenceReport, String) {
    let mut ok = true;
    let mut partial = BigUint::from(0u32);
    let mut first_divergence = None;
    for l in 1..=max_depth {
        let c = expand_dense_identity_coefficients(l);
        let x0 = &c[0];
        ok &= *x0 == BigUint::from(1u32) << (l - 1);
        ok &= *x0 == BigUint::from(1u32) + &partial;
        partial += x0;
        if first_divergence.is_none() && linear_closed_form_coefficients(l) != c {
            first_divergence = Some(l);
        }
    }
    let note = match first_divergence {
        Some(l) => format!(
            "linear closed form (coefficient l-j) diverges from the recursion from l = {l}: c({l}, X_0) = {} vs {l}",
            expand_dense_identity_coefficients(l)[0]
        ),
        None => format!("linear closed form agrees up to l = {max_depth}"),
    };
    let r = EquivalenceReport::new(
        format!("c(l, X_0) = 2^(l-1), l <= {max_depth}"),
        if ok { 0.0 } else { 1.0 },
        0.0,
    );
    (r, note)
}

fn print_table(rows: &[EquivalenceReport]) {
    let width = rows.iter().map(|r| r.case.len()).max().unwrap_or(4).max(4);
    println!("{:<width$}  {:>12}  {:>9}  result", "case", "max diff", "tol");
    for r in rows {
        println!(
            "{:<width$}  {:>12.3e}  {:>9.1e}  {}",
            r.case,
            r.max_abs_diff,
            r.tolerance,
            if r.passed { "PASS" } else { "FAIL" }
        );
    }
}

fn run_verify(cmd: &VerifyCmd) -> Result<bool> {
    let mut rows = vec![
        worst("concat-then-conv == sum of sliced convs", &fuzz_concat_sum(cmd.cases, cmd.seed)?, dsnet::equivalence::EQUIVALENCE_TOL),
        worst("conv of sum == sum of convs", &fuzz_shared_weight(cmd.cases, cmd.seed)?, dsnet::equivalence::EQUIVALENCE_TOL),
    ];
    let (coeff, note) = coefficient_report(cmd.max_depth);
    rows.push(coeff);
    for variant in [Variant::DsNetA, Variant::DsNet, Variant::Ds2Net] {
        let mut cfg = NetworkConfig::new(variant, 50, 1.0, Stem::Cifar, 10);
        cfg.base_width = 2;
        cfg.input_size = Some(8);
        let e = measure_normalization_economy(&cfg, 2, cmd.seed)?;
        let mut r = e.report(format!(
            "{variant}50 normalizations {} == sources {}",
            e.shortcut_normalize_ops, e.expected_sources
        ));
        r.passed &= e.passed();
        rows.push(r);
    }
    print_table(&rows);
    println!("note: {note}");
    let passed = rows.iter().all(|r| r.passed);
    println!("{}", if passed { "all checks passed" } else { "verification FAILED" });
    Ok(passed)
}

fn labels_for(batch: usize, classes: usize) -> Vec<usize> {
    (0..batch).map(|i| (3 * i + 1) % classes).collect()
}

fn run_gradcheck(cmd: &GradcheckCmd) -> Result<bool> {
    let file = cmd.model.run_file()?;
    let variants = match cmd.model.variant.or(file.network.as_ref().map(|n| n.variant)) {
        Some(v) => vec![v],
        None => Variant::ALL.to_vec(),
    };
    let seed = cmd.model.seed.unwrap_or(7);
    let mut all_passed = true;
    println!(
        "{:<13} {:>7} {:>12} {:>8} {:>6}  result",
        "variant", "coords", "max rel err", "retries", "skips"
    );
    for variant in variants {
        let base = NetworkConfig::tiny(variant, vec![2, 2], 8, 8, 10);
        let mut args = cmd.model.clone();
        args.variant = Some(variant);
        let cfg = args.network(&file, base)?;
        let mut net = Network::<f64>::build(&cfg, seed)?;
        let side = cfg.input_side();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let x = Tensor::<f64>::uniform([cmd.batch, 3, side, side], -1.0, 1.0, &mut rng)?;
        let labels = labels_for(cmd.batch, cfg.classes);
        let r = gradient_check(&mut net, &x, &labels, cmd.coords, cmd.step, cmd.tol, seed.wrapping_add(2))?;
        println!(
            "{:<13} {:>7} {:>12.3e} {:>8} {:>6}  {}",
            variant.name(),
            r.entries.len(),
            r.max_rel_err,
            r.kink_retries,
            r.kink_skips,
            if r.passed { "PASS" } else { "FAIL" }
        );
        if cmd.verbose || !r.passed {
            print!("{}", worst_per_param(&r.entries));
        }
        for name in &r.shortfall {
            println!("  too few usable coordinates for {name}");
        }
        all_passed &= r.passed;
    }
    Ok(all_passed)
}

fn worst_per_param(entries: &[dsnet::equivalence::GradCheckEntry]) -> String {
    let mut out = String::new();
    let mut i = 0;
    while i < entries.len() {
        let name = &entries[i].param;
        let group: Vec<_> = entries[i..].iter().take_while(|e| &e.param == name).collect();
        let w = group.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err)).expect("non-empty group");
        let _ = writeln!(
            out,
            "  {name:<40} [{:>5}] analytic {:>12.5e} numeric {:>12.5e} rel {:.2e} (h={:.0e})",
            w.coord, w.analytic, w.numeric, w.rel_err, w.step
        );
        i += group.len();
    }
    out
}

fn run_analyze(cmd: &AnalyzeCmd) -> Result<bool> {
    let file = cmd.model.run_file()?;
    let base = cmd
        .model
        .network(&file, NetworkConfig::new(Variant::ResNet, 50, 1.0, Stem::Imagenet, 1000))?;
    let variants = match cmd.model.variant {
        Some(v) => vec![v],
        None if file.network.is_some() => vec![base.variant],
        None => Variant::ALL.to_vec(),
    };
    let depths: Vec<Option<usize>> = if cmd.all_depths {
        DEPTH_PRESETS.iter().map(|(d, _)| Some(*d)).collect()
    } else {
        vec![None]
    };
    let widths = if cmd.all_widths { WIDTH_PRESETS.to_vec() } else { vec![base.width] };
    let mut rows = Vec::new();
    for &depth in &depths {
        for &width in &widths {
            for &variant in &variants {
                let mut cfg = base.clone();
                cfg.variant = variant;
                cfg.width = width;
                if let Some(d) = depth {
                    cfg.depth = d;
                    cfg.blocks = None;
                }
                rows.push(resource_report(&cfg, cmd.batch, cmd.precision)?);
            }
        }
    }
    if cmd.csv {
        print!("{}", render_csv(&rows));
    } else {
        print!("{}", render_table(&rows));
        let input = base.input_side();
        println!("MACs at {input}x{input}; activation memory for batch {} at {}", cmd.batch, cmd.precision);
    }
    Ok(true)
}
