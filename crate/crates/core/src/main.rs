use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gradleak::harness::gradcheck::gradcheck_suite;
use gradleak::harness::{run_sweep, snapshot_stages, thread_count, RawConfig, RunRecord, ScenarioConfig};
use gradleak::Error;

/// Reconstruct private training data from shared gradients, and measure
/// defenses against it.
#[derive(Parser)]
#[command(name = "gradleak", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Attack one scenario and write a one-row CSV.
    Attack(Common),
    /// Run every point of the config's sweep axes.
    Sweep(Common),
    /// Check analytic gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        graphs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train and save (weights, gradient) checkpoints at given stages.
    Train {
        #[command(flatten)]
        common: Common,
        /// Fractions of train.steps at which to save.
        #[arg(long, default_value = "0,0.3,0.7,1")]
        stages: String,
    },
    /// Recover a sentence from an embedding classifier's gradient.
    Tokens(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// `key=value` override, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn raw(&self) -> gradleak::Result<RawConfig> {
        let mut raw = match &self.config {
            Some(p) => RawConfig::load(p)?,
            None => RawConfig::default(),
        };
        if let Some(s) = self.seed {
            raw.set("seed", &s.to_string())?;
        }
        if let Some(o) = &self.out {
            raw.set("output.dir", &o.to_string_lossy())?;
        }
        for o in &self.overrides {
            raw.set_override(o)?;
        }
        Ok(raw)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e @ Error::Config { .. }) => {
            eprintln!("gradleak: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("gradleak: {e}");
            ExitCode::from(1)
        }
    }
}

fn single(mut raw: RawConfig) -> gradleak::Result<Vec<RunRecord>> {
    if raw.axes().next().is_some() {
        eprintln!("gradleak: ignoring sweep axes; use `sweep` to run them");
        raw.clear_axes();
    }
    let cfg = ScenarioConfig::from_raw(&raw)?;
    run_sweep(&raw, &cfg.out_dir.join("results.csv"), 0)
}

fn print_record(r: &RunRecord) {
    match &r.outcome {
        Ok(s) => println!(
            "run {}: mse {:.3e} ({}), labels {:.0}%, D {:.3e}, {} iterations",
            r.index,
            s.report.mse,
            s.report.verdict,
            100.0 * s.report.label_accuracy,
            s.final_distance,
            s.iterations
        ),
        Err(e) => println!("run {}: error: {e}", r.index),
    }
}

fn run(command: Command) -> gradleak::Result<ExitCode> {
    match command {
        Command::Attack(c) => {
            for r in single(c.raw()?)? {
                print_record(&r);
            }
        }
        Command::Sweep(c) => {
            let raw = c.raw()?;
            let out = ScenarioConfig::from_raw(&raw)?.out_dir.join("results.csv");
            let records = run_sweep(&raw, &out, thread_count())?;
            for r in &records {
                print_record(r);
            }
            println!("{} rows written to {}", records.len(), out.display());
        }
        Command::Gradcheck { graphs, seed } => {
            let report = gradcheck_suite(graphs, seed, 1e-5)?;
            println!("first order, {} random graphs: max relative error {:.3e}", report.graphs, report.first_order);
            for (name, err) in &report.second_order {
                println!("distance gradient, {name}: max relative error {err:.3e}");
            }
            if report.worst() >= 1e-5 {
                println!("FAIL");
                return Ok(ExitCode::from(1));
            }
            println!("ok");
        }
        Command::Train { common, stages } => {
            let cfg = ScenarioConfig::from_raw(&common.raw()?)?;
            let stages = parse_stages(&stages)?;
            for s in snapshot_stages(&cfg, &stages)? {
                println!(
                    "stage {:.2} (round {}): {} {}",
                    s.stage,
                    s.round,
                    s.params_path.display(),
                    s.grads_path.display()
                );
            }
        }
        Command::Tokens(c) => {
            let mut raw = c.raw()?;
            if raw.get("model.kind").is_none() {
                raw.set("model.kind", "embed")?;
            }
            for r in single(raw)? {
                match &r.outcome {
                    Ok(s) => {
                        if let Some((rec, truth)) = &s.tokens {
                            for (a, b) in rec.iter().zip(truth) {
                                println!("true      {}", join(b));
                                println!("recovered {}", join(a));
                            }
                        }
                        println!("token match {:.0}%", 100.0 * s.report.token_match_rate.unwrap_or(0.0));
                    }
                    Err(e) => println!("error: {e}"),
                }
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn join(ids: &[usize]) -> String {
    ids.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

fn parse_stages(s: &str) -> gradleak::Result<Vec<f64>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad stage `{v}`")))
        })
        .collect()
}
