use clap::{Parser, Subcommand};
use elastic_infogan::data::{
    expected_false_negative, format_split_file, generate_split, load_canonical_splits,
    parse_split_file, DatasetKind, ImbalancedSplit, SplitSource,
};
use elastic_infogan::error::Error;
use elastic_infogan_cli::artifacts::{emit_grid, emit_interpolation};
use elastic_infogan_cli::{parse_experiment_config, report, run};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "elastic-infogan",
    about = "Train and evaluate categorical-disentanglement GANs on imbalanced data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute the experiment described by a config file.
    Run {
        /// Path to a flat key-value experiment config.
        config: PathBuf,
    },
    /// Aggregate metrics.json files under the given directories into tables.
    Report {
        /// Completed run directories (searched recursively).
        dirs: Vec<PathBuf>,
        /// Write table.csv / table.txt here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a k x cols grid of one-hot-conditioned samples.
    Grid {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        cols: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "grid.png")]
        out: PathBuf,
    },
    /// Render an interpolation strip over one continuous code.
    Interpolate {
        checkpoint: PathBuf,
        /// Categorical code to condition on.
        #[arg(long, default_value_t = 0)]
        code: usize,
        /// Which continuous dimension to sweep.
        #[arg(long, default_value_t = 0)]
        dim: usize,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "interpolation.png")]
        out: PathBuf,
    },
    /// Inspect or generate imbalanced splits.
    Splits {
        #[command(subcommand)]
        command: SplitsCommand,
    },
    /// Expected false-negative rate of each split in a split file.
    Fnrate { splitfile: PathBuf },
}

#[derive(Subcommand)]
enum SplitsCommand {
    /// Print the bundled canonical splits for a dataset kind.
    List {
        #[arg(default_value = "mnist")]
        kind: String,
    },
    /// Generate a random split and print it in the split-file format.
    Gen {
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.02)]
        min_prop: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::from(0),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}

/// 1 = configuration error, 2 = runtime error, 3 = non-finite-loss abort.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::NonFiniteLoss { .. }) | Some(Error::NonFiniteStep { .. }) => 3,
        Some(Error::InvalidConfig(_))
        | Some(Error::SplitParse { .. })
        | Some(Error::UnknownDatasetKind(_)) => 1,
        _ => 2,
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run { config } => {
            let text = std::fs::read_to_string(&config).map_err(|e| {
                anyhow::Error::new(Error::InvalidConfig(format!(
                    "cannot read {}: {e}",
                    config.display()
                )))
            })?;
            let config = parse_experiment_config(&text)?;
            let manifest = run(&config)?;
            println!(
                "completed {} runs; manifest hash {}",
                manifest.runs.len(),
                manifest.config_hash
            );
            println!("table:\n{}", std::fs::read_to_string(&manifest.table_txt)?);
            Ok(())
        }
        Command::Report { dirs, out } => {
            if dirs.is_empty() {
                return Err(Error::InvalidConfig("report needs at least one directory".into()).into());
            }
            let tables = report(&dirs)?;
            match out {
                Some(dir) => {
                    std::fs::create_dir_all(&dir)?;
                    std::fs::write(dir.join("table.csv"), &tables.csv)?;
                    std::fs::write(dir.join("table.txt"), &tables.text)?;
                    println!("wrote {}", dir.join("table.txt").display());
                }
                None => print!("{}", tables.text),
            }
            Ok(())
        }
        Command::Grid {
            checkpoint,
            cols,
            seed,
            out,
        } => {
            let state =
                elastic_infogan::training::checkpoint::checkpoint_load::<f32>(&checkpoint)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            emit_grid(&state.gen, &state.config.net, cols, &mut rng, &out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Interpolate {
            checkpoint,
            code,
            dim,
            steps,
            seed,
            out,
        } => {
            let state =
                elastic_infogan::training::checkpoint::checkpoint_load::<f32>(&checkpoint)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            emit_interpolation(
                &state.gen,
                &state.config.net,
                code,
                dim,
                steps,
                &mut rng,
                &out,
            )?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Splits { command } => match command {
            SplitsCommand::List { kind } => {
                let kind: DatasetKind = kind.parse()?;
                let splits = load_canonical_splits(kind)?;
                println!("# dataset={kind} k={}", splits[0].k());
                for (i, split) in splits.iter().enumerate() {
                    let efn = expected_false_negative(split);
                    let line: Vec<String> =
                        split.proportions.iter().map(|p| format!("{p}")).collect();
                    println!("{:>3}: {}  (E(F.N.) = {efn:.4})", i + 1, line.join(", "));
                }
                Ok(())
            }
            SplitsCommand::Gen { k, seed, min_prop } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let split = generate_split(k, &mut rng, min_prop, seed)?;
                print!(
                    "{}",
                    format_split_file(&format!("generated-{seed}"), k, &[split.proportions])
                );
                Ok(())
            }
        },
        Command::Fnrate { splitfile } => {
            let text = std::fs::read_to_string(&splitfile)?;
            let file = parse_split_file(&text)?;
            let mut values = Vec::new();
            for (i, props) in file.splits.iter().enumerate() {
                let split = ImbalancedSplit::new(props.clone(), SplitSource::File)?;
                let efn = expected_false_negative(&split);
                println!("split {:>3}: E(F.N.) = {efn:.6}", i + 1);
                values.push(efn);
            }
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let std = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
            println!("mean = {mean:.6}, std = {std:.6} over {} splits", values.len());
            Ok(())
        }
    }
}
