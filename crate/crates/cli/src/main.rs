//! `amptrack` command line: simulate tracks, run the filters on them and
//! benchmark the variants over parameter sweeps.
//!
//! Exit codes: 0 on success, 2 for configuration errors (including bad
//! flags), 3 for I/O errors, 1 for anything else.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use amptrack::error::{Error, Result};
use amptrack::experiment::{run_experiment, ExperimentResult, ExperimentSpec};
use amptrack::filter::Variant;
use amptrack::model::simulate;
use amptrack::rng;
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "amptrack", version, about = "Multitarget tracking over amplitude sensor grids")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate ground truth and sensor amplitudes.
    Simulate(Common),
    /// Run the filters on simulated tracks and write their estimates.
    Track(Common),
    /// Compare the variants at the configured parameter point.
    Benchmark(Common),
    /// Run every point of the parameter sweep.
    Sweep(Common),
}

/// Flags shared by every subcommand; they override the config file.
#[derive(Debug, Args)]
struct Common {
    /// Experiment config (JSON). Missing fields take their defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, env = "TT_SEED", value_name = "N")]
    seed: Option<u64>,
    /// Output directory, created if needed.
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Variants to run, repeated or comma separated.
    #[arg(long = "variant", value_name = "NAME", value_delimiter = ',')]
    variants: Vec<Variant>,
    #[arg(long, value_name = "N")]
    tracks: Option<usize>,
    #[arg(long, value_name = "N")]
    steps: Option<usize>,
    /// Worker threads (default: every core).
    #[arg(long, value_name = "N")]
    jobs: Option<usize>,
}

impl Common {
    fn spec(&self) -> Result<ExperimentSpec> {
        let mut spec = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
                ExperimentSpec::from_json(&text)?
            }
            None => ExperimentSpec::default(),
        };
        if let Some(seed) = self.seed {
            spec.seed = seed;
        }
        if !self.variants.is_empty() {
            spec.variants = self.variants.clone();
        }
        if let Some(n) = self.tracks {
            spec.tracks = n;
        }
        if let Some(n) = self.steps {
            spec.steps = n;
        }
        if self.jobs.is_some() {
            spec.jobs = self.jobs;
        }
        spec.validate()?;
        Ok(spec)
    }
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn cmd_simulate(args: &Common) -> Result<()> {
    let spec = args.spec()?;
    let scenario = spec.scenario.build()?;
    fs::create_dir_all(&args.out)?;
    for track in 0..spec.tracks {
        // Same per-track seeds as the filter runs, so the files line up.
        let traj = simulate(&scenario, spec.steps, rng::track_seed(spec.seed, track as u64))?;
        let mut truth = create(&args.out, &format!("track_{track:03}_truth.csv"))?;
        traj.write_truth_csv(&mut truth)?;
        truth.flush()?;
        let mut frames = create(&args.out, &format!("track_{track:03}_frames.csv"))?;
        traj.write_frames_csv(&mut frames)?;
        frames.flush()?;
    }
    println!("wrote {} tracks of {} steps to {}", spec.tracks, spec.steps, args.out.display());
    Ok(())
}

/// Estimates next to the truth they are scored against.
fn write_estimates(result: &ExperimentResult, w: impl Write) -> Result<()> {
    let mut w = w;
    writeln!(w, "variant,track,step,target,x,y,truth_x,truth_y")?;
    for point in &result.points {
        for (k, variant) in result.spec.variants.iter().enumerate() {
            for run in &point.runs {
                let record = &run.records[k];
                for (t, est) in record.estimates.iter().enumerate() {
                    let truth = &run.trajectory.states[t];
                    for (c, e) in est.iter().enumerate() {
                        let s = truth.targets[c];
                        writeln!(w, "{variant},{},{},{c},{},{},{},{}", run.track, t + 1, e[0], e[1], s[0], s[1])?;
                    }
                }
            }
        }
    }
    Ok(())
}

fn print_summary(result: &ExperimentResult, mut out: impl Write) -> io::Result<()> {
    writeln!(out, "sigma_s2\talpha\tgamma\tvariant\tomat_m\tsec_per_step\tfailed_steps")?;
    for p in &result.points {
        for v in &p.variants {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{:.4}\t{:.3e}\t{}",
                p.point.sigma_s2, p.point.alpha, p.point.gamma, v.variant, v.mean_omat, v.mean_step_seconds, v.failed_steps
            )?;
        }
        for f in &p.track_failures {
            writeln!(out, "# track {} failed: {}", f.track, f.message)?;
        }
    }
    Ok(())
}

fn cmd_run(args: &Common, sweep: bool, estimates: bool) -> Result<()> {
    let mut spec = args.spec()?;
    if !sweep {
        spec = spec.single_point()?;
    }
    let result = run_experiment(&spec)?;
    result.write(&args.out)?;
    if estimates {
        let mut w = create(&args.out, "estimates.csv")?;
        write_estimates(&result, &mut w)?;
        w.flush()?;
    }
    print_summary(&result, io::stdout().lock())?;
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Io(_) | Error::Json(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Track(a) => cmd_run(a, false, true),
        Command::Benchmark(a) => cmd_run(a, false, false),
        Command::Sweep(a) => cmd_run(a, true, false),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("amptrack: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
