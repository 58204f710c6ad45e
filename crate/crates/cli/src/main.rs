//! `ssmax`: benchmark, gradient-check and toy-train the sampled softmax loss.
//!
//! Exit codes: 0 success, 1 check failure, 2 usage error, 3 runtime error.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use sampled_softmax::bench::{
    emit_jsonl, emit_plot_svg, run_bench, BenchConfig, BenchRecord, Kernel, Pass,
};
use sampled_softmax::gradcheck::{check_sampled, GradCheckConfig, ProblemSize};
use sampled_softmax::train::{emit_train_log, train_skipgram, TrainConfig};
use sampled_softmax::Dtype;

const EXIT_CHECK_FAILED: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "ssmax",
    version,
    about = "Sampled softmax loss: benchmark, gradient check and toy training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Time full softmax against the fused and unfused sampled kernels.
    Bench(BenchArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Train a toy SkipGram model on a synthetic Zipf corpus.
    Train(TrainArgs),
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, default_value_t = 100_000, value_parser = positive)]
    classes: usize,
    #[arg(long, default_value_t = 100, value_parser = positive)]
    sampled: usize,
    #[arg(long, default_value_t = 300, value_parser = positive)]
    embed: usize,
    #[arg(long, default_value_t = 256, value_parser = positive)]
    batch: usize,
    #[arg(long, default_value_t = 20, value_parser = positive)]
    iters: usize,
    #[arg(long, default_value_t = 2)]
    warmup: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "f32")]
    dtype: Dtype,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "full,sampled,sampled_naive_bwd"
    )]
    kernels: Vec<Kernel>,
    #[arg(long, default_value = "bench.jsonl")]
    out: PathBuf,
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20, value_parser = positive)]
    classes: usize,
    #[arg(long, default_value_t = 8, value_parser = positive)]
    sampled: usize,
    #[arg(long, default_value_t = 4, value_parser = positive)]
    embed: usize,
    #[arg(long, default_value_t = 4, value_parser = positive)]
    batch: usize,
    #[arg(long, default_value_t = 5, value_parser = positive)]
    trials: usize,
    #[arg(long, default_value_t = 3)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5, value_parser = non_negative)]
    rtol: f64,
    #[arg(long, default_value_t = 1e-8, value_parser = non_negative)]
    atol: f64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, default_value_t = 2000, value_parser = positive)]
    classes: usize,
    #[arg(long, default_value_t = 32, value_parser = positive)]
    embed: usize,
    #[arg(long, default_value_t = 128, value_parser = positive)]
    batch: usize,
    #[arg(long, default_value_t = 32, value_parser = positive)]
    sampled: usize,
    #[arg(long, default_value_t = 1000, value_parser = positive)]
    steps: usize,
    #[arg(long, default_value_t = 0.05, value_parser = non_negative)]
    lr: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    log: Option<PathBuf>,
}

fn positive(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(n) => Ok(n),
        Err(e) => Err(e.to_string()),
    }
}

fn non_negative(s: &str) -> Result<f64, String> {
    let x: f64 = s
        .parse()
        .map_err(|e: std::num::ParseFloatError| e.to_string())?;
    if x.is_finite() && x >= 0.0 {
        Ok(x)
    } else {
        Err(format!("expected a finite non-negative number, got {s}"))
    }
}

fn print_records(records: &[BenchRecord]) {
    println!(
        "{:<18} {:<17} {:>14} {:>14} {:>14} {:>14}",
        "kernel", "pass", "mean_ms", "p50_ms", "p95_ms", "min_ms"
    );
    let ms = |ns: u64| ns as f64 / 1e6;
    for r in records {
        println!(
            "{:<18} {:<17} {:>14.3} {:>14.3} {:>14.3} {:>14.3}",
            r.kernel.name(),
            r.pass.name(),
            ms(r.mean_ns),
            ms(r.p50_ns),
            ms(r.p95_ns),
            ms(r.min_ns)
        );
    }
}

fn bench(args: BenchArgs) -> anyhow::Result<u8> {
    let cfg = BenchConfig {
        n_classes: args.classes,
        n_sampled: args.sampled,
        n_embed: args.embed,
        n_batch: args.batch,
        iters: args.iters,
        warmup: args.warmup,
        seed: args.seed,
        dtype: args.dtype,
        kernels: args.kernels,
    };
    let outcome = run_bench(&cfg).context("benchmark failed")?;
    print_records(&outcome.records);
    for pass in Pass::ALL {
        if let Some(x) = outcome.speedup(Kernel::Full, Kernel::Sampled, pass) {
            println!("full / sampled ({pass}): {x:.1}x");
        }
    }
    if let Some(x) = outcome.speedup(
        Kernel::SampledNaiveBwd,
        Kernel::Sampled,
        Pass::ForwardBackward,
    ) {
        println!("naive / fused backward (forward_backward): {x:.2}x");
    }

    emit_jsonl(&outcome.records, &args.out)?;
    println!("wrote {}", args.out.display());
    if let Some(svg) = args.svg {
        emit_plot_svg(&outcome.records, &svg)?;
        println!("wrote {}", svg.display());
    }
    Ok(0)
}

fn gradcheck(args: GradcheckArgs) -> anyhow::Result<u8> {
    let size = ProblemSize {
        n_classes: args.classes,
        n_embed: args.embed,
        n_batch: args.batch,
        n_sampled: args.sampled,
    };
    let cfg = GradCheckConfig {
        rtol: args.rtol,
        atol: args.atol,
        ..GradCheckConfig::default()
    };
    let mut failed = 0;
    for trial in 0..args.trials as u64 {
        let seed = args.seed.wrapping_add(trial);
        let report = check_sampled(&size, seed, &cfg)?;
        println!("seed {seed}: {report}");
        failed += usize::from(!report.pass);
    }
    if failed == 0 {
        println!("gradcheck passed ({} trials)", args.trials);
        Ok(0)
    } else {
        println!("gradcheck FAILED ({failed} of {} trials)", args.trials);
        Ok(EXIT_CHECK_FAILED)
    }
}

fn train(args: TrainArgs) -> anyhow::Result<u8> {
    let cfg = TrainConfig {
        n_classes: args.classes,
        n_embed: args.embed,
        n_batch: args.batch,
        n_sampled: args.sampled,
        steps: args.steps,
        lr: args.lr,
        seed: args.seed,
        ..TrainConfig::toy()
    };
    let outcome = train_skipgram(&cfg)?;
    for entry in &outcome.log {
        println!("step {:>6}  loss {:.6}", entry.step, entry.loss);
    }
    let window = outcome.losses.len().min(100);
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let first = mean(&outcome.losses[..window]);
    let last = mean(&outcome.losses[outcome.losses.len() - window..]);
    println!(
        "mean loss: first {window} steps {first:.4}, last {window} steps {last:.4} ({:+.1}%)",
        100.0 * (last - first) / first
    );
    if let Some(path) = args.log {
        emit_train_log(&outcome.log, &path)?;
        println!("wrote {}", path.display());
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Bench(args) => bench(args),
        Command::Gradcheck(args) => gradcheck(args),
        Command::Train(args) => train(args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
