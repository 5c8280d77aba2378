use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use gnap::bench::{self, BenchConfig};
use gnap::certify;
use gnap::check::{self, CheckConfig, Mutation};
use gnap::exec;
use gnap::gradcheck::{DEFAULT_STEP, DEFAULT_TOLERANCE};
use gnap::io;
use gnap::metrics::evaluate;
use gnap::toy::{self, HeadKind, HeadParams, ToyConfig};
use gnap::{Error, Shape4};

/// Global norm-aware pooling: invariant checks, gradient certification,
/// benchmarks, toy training and verification metrics.
///
/// Results are printed as JSON on stdout and diagnostics on stderr. Exit
/// status is 0 on success, 1 when a check fails and 2 on usage or I/O errors.
#[derive(Parser)]
#[command(name = "gnap", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the invariant suite on seeded fixtures.
    Check(CheckArgs),
    /// Compare every backward pass with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Time GAP, reweighting and the full block across thread counts.
    Bench(BenchArgs),
    /// Train the toy network and score held-out verification pairs.
    TrainToy(TrainArgs),
    /// Compute accuracy, EER and TPR@FPR from a `label,score` CSV.
    Eval(EvalArgs),
}

#[derive(Args)]
struct CheckArgs {
    /// Print the property names and exit.
    #[arg(long)]
    list: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Extra tensor JSON fixture(s) to include.
    #[arg(long = "input", value_name = "FILE")]
    inputs: Vec<PathBuf>,
    #[arg(long, default_value_t = 100)]
    fixtures: usize,
    #[arg(long, default_value_t = 50)]
    permutations: usize,
    /// Swap in a broken reweighting kernel (suite self-test).
    #[arg(long, value_enum, hide = true)]
    mutate: Option<Mutation>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Layer name, or `all`.
    #[arg(long, default_value = "all")]
    layer: String,
    /// First seed; `--instances` consecutive seeds are checked.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    instances: u64,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    tol: f64,
    #[arg(long, default_value_t = DEFAULT_STEP)]
    step: f64,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = bench::DEFAULT_SHAPE.n)]
    n: usize,
    #[arg(long, default_value_t = bench::DEFAULT_SHAPE.c)]
    c: usize,
    #[arg(long, default_value_t = bench::DEFAULT_SHAPE.h)]
    h: usize,
    #[arg(long, default_value_t = bench::DEFAULT_SHAPE.w)]
    w: usize,
    #[arg(long, default_value_t = 50)]
    iters: usize,
    /// Comma-separated worker counts; defaults to 1 and all cores.
    #[arg(long, value_delimiter = ',')]
    threads: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum, default_value_t = HeadKind::Gnap)]
    head: HeadKind,
    /// Tenfold classifier learning rate and 5e-4 weight decay.
    #[arg(long)]
    fasterfc: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Held-out samples; every pair among them is scored.
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, default_value = "toy-run")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    scores: PathBuf,
    /// Operating point(s) for TPR@FPR.
    #[arg(long = "fpr", default_value = "0.001")]
    fprs: Vec<f64>,
}

/// A finished command: JSON for stdout and whether its checks passed.
struct Outcome {
    payload: Value,
    passed: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            println!("{}", json!({ "error": e.kind().to_string() }));
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Bench(args) => cmd_bench(args),
        // everything except bench runs on one worker
        other => exec::with_threads(1, move || match other {
            Command::Check(args) => cmd_check(args),
            Command::Gradcheck(args) => cmd_gradcheck(args),
            Command::TrainToy(args) => cmd_train(args),
            Command::Eval(args) => cmd_eval(args),
            Command::Bench(_) => unreachable!(),
        }),
    };
    match result {
        Ok(outcome) => {
            println!("{}", outcome.payload);
            if outcome.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            let mut payload = json!({ "error": e.to_string() });
            let code = match &e {
                Error::Parse { line, .. } => {
                    payload["line"] = json!(line);
                    2
                }
                Error::Divergence { step, .. } => {
                    payload["step"] = json!(step);
                    1
                }
                Error::Contract(_) | Error::Evaluation(_) => 1,
                Error::Size(_) | Error::Parameter(_) | Error::Io(_) | Error::Json(_) => 2,
            };
            println!("{payload}");
            ExitCode::from(code)
        }
    }
}

fn cmd_check(args: CheckArgs) -> gnap::Result<Outcome> {
    if args.list {
        for (name, what) in check::PROPERTIES {
            eprintln!("{name:<24} {what}");
        }
        let props: Vec<Value> = check::PROPERTIES
            .iter()
            .map(|(name, what)| json!({ "name": name, "description": what }))
            .collect();
        return Ok(Outcome {
            payload: json!({ "command": "check", "properties": props }),
            passed: true,
        });
    }
    let extra_inputs = args
        .inputs
        .iter()
        .map(|p| io::read_tensor_file(p))
        .collect::<gnap::Result<Vec<_>>>()?;
    let config = CheckConfig {
        seed: args.seed,
        fixtures: args.fixtures,
        permutations: args.permutations,
        extra_inputs,
        mutation: args.mutate,
    };
    let outcomes = check::run(&config)?;
    for o in &outcomes {
        let verdict = if o.passed { "pass" } else { "FAIL" };
        let op = match o.bound {
            check::Bound::Max => "<=",
            check::Bound::Min => ">",
        };
        eprintln!(
            "{verdict} {:<24} {:.3e} {op} {:.0e} ({} cases){}",
            o.property,
            o.value,
            o.threshold,
            o.cases,
            o.note.as_ref().map(|n| format!("; {n}")).unwrap_or_default()
        );
    }
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.property).collect();
    Ok(Outcome {
        passed: failed.is_empty(),
        payload: json!({ "command": "check", "passed": failed.is_empty(), "failed": failed, "properties": outcomes }),
    })
}

fn cmd_gradcheck(args: GradcheckArgs) -> gnap::Result<Outcome> {
    if !(args.tol > 0.0) || !(args.step > 0.0) || args.instances == 0 {
        return Err(Error::Parameter("--tol, --step and --instances must be positive".into()));
    }
    let layers: Vec<&str> = if args.layer == "all" {
        certify::LAYERS.to_vec()
    } else {
        vec![args.layer.as_str()]
    };
    let reports = certify::certify_all(&layers, args.seed, args.instances, args.tol, args.step)?;
    for r in reports.iter().filter(|r| !r.passed) {
        eprintln!(
            "FAIL {} max rel error {:.3e} at {:?}",
            r.layer_name, r.max_rel_error, r.worst_coordinate
        );
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    eprintln!("{} gradients checked, {failed} failed, worst {worst:.3e}", reports.len());
    Ok(Outcome {
        passed: failed == 0,
        payload: json!({
            "command": "gradcheck",
            "passed": failed == 0,
            "tolerance": args.tol,
            "worst_rel_error": worst,
            "reports": reports,
        }),
    })
}

fn cmd_bench(args: BenchArgs) -> gnap::Result<Outcome> {
    let shape = Shape4::new(args.n, args.c, args.h, args.w);
    shape.checked_len()?;
    let config = BenchConfig {
        shape,
        iters: args.iters,
        threads: if args.threads.is_empty() {
            BenchConfig::default().threads
        } else {
            args.threads
        },
        seed: args.seed,
    };
    let report = bench::run(&config)?;
    for run in &report.runs {
        eprintln!("threads {}:", run.threads);
        for t in &run.timings {
            eprintln!("  {:<20} {:>10.1} us  {:.3e} elem/s", t.kernel, t.median_ns as f64 / 1e3, t.elements_per_sec);
        }
        eprintln!(
            "  gnap/gap {:.2} (train-mode forward {:.2}), max output diff {:e}",
            run.gnap_over_gap, run.gnap_train_over_gap, run.max_output_diff
        );
    }
    Ok(Outcome {
        passed: report.outputs_identical,
        payload: serde_json::to_value(&report)?,
    })
}

fn write_file(dir: &Path, name: &str, contents: &str) -> gnap::Result<String> {
    let path = dir.join(name);
    fs::write(&path, contents)?;
    Ok(path.display().to_string())
}

fn cmd_train(args: TrainArgs) -> gnap::Result<Outcome> {
    let mut config = ToyConfig {
        head: args.head,
        seed: args.seed,
        steps: args.steps,
        ..ToyConfig::default()
    };
    if let Some(lr) = args.lr {
        config.lr = lr;
    }
    if let Some(batch) = args.batch {
        config.batch = batch;
    }
    if args.fasterfc {
        config = config.faster_fc();
    }
    if args.samples < 2 {
        return Err(Error::Parameter("--samples must be at least 2".into()));
    }
    let log = toy::train(&config)?;
    let held = toy::held_out_pairs(&config, args.samples);
    let scores = toy::embed_pairs(&log.params, &held.batch, &held.pairs)?;
    let report = evaluate(&scores, &[0.01, 0.001])?;

    fs::create_dir_all(&args.out)?;
    let mut files = serde_json::Map::new();
    files.insert("log".into(), json!(write_file(&args.out, "train_log.jsonl", &log.to_json_lines())?));
    files.insert("scores".into(), json!(write_file(&args.out, "scores.csv", &io::write_scores(&scores))?));
    files.insert(
        "params".into(),
        json!(write_file(&args.out, "params.json", &serde_json::to_string_pretty(&log.params)?)?),
    );
    if let HeadParams::Gnap { state } = &log.params.head {
        let path = args.out.join("gnap_state.json");
        io::write_state_file(&path, state)?;
        files.insert("gnap_state".into(), json!(path.display().to_string()));
    }

    eprintln!(
        "{} head, {} steps: loss {:.4} -> {:.4}",
        config.head.name(),
        config.steps,
        log.initial_loss(),
        log.final_loss()
    );
    eprintln!("{}", report.human());
    Ok(Outcome {
        passed: true,
        payload: json!({
            "command": "train-toy",
            "head": config.head,
            "fasterfc": args.fasterfc,
            "seed": config.seed,
            "steps": config.steps,
            "initial_loss": log.initial_loss(),
            "final_loss": log.final_loss(),
            "files": files,
            "metrics": report,
        }),
    })
}

fn cmd_eval(args: EvalArgs) -> gnap::Result<Outcome> {
    let scores = io::read_scores_file(&args.scores)?;
    let report = evaluate(&scores, &args.fprs)?;
    eprintln!("{}", report.human());
    Ok(Outcome {
        passed: true,
        payload: serde_json::to_value(&report)?,
    })
}
