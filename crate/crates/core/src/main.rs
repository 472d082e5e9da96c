//! `curio` command line: dataset generation, training, evaluation, the
//! analytic oracle experiment and render dumps.
//!
//! stdout carries one `key=value` summary line per command; progress and
//! tables go to stderr. Exit codes: 0 success, 2 invalid input, 3 IO,
//! 4 numeric failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "curio", version, about = "Curiosity-driven analysis-by-synthesis")]
struct Cli {
    /// Worker threads for parallel sections (default: logical cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a labelled dataset.
    Gen {
        /// Preset name (circles, spheres, varied) or a file with a [world] section.
        #[arg(long)]
        world: String,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Image side for preset worlds.
        #[arg(long, default_value_t = 64)]
        image_size: usize,
    },
    /// Train a generator from an experiment config.
    Train {
        /// Experiment config: top-level `seed`, `[paths] dataset` and `out`.
        #[arg(long)]
        config: PathBuf,
        /// Overrides `[train] mode`.
        #[arg(long)]
        mode: Option<String>,
        /// Overrides `[train] supervision_frac`.
        #[arg(long)]
        supervision_frac: Option<f64>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split from the novel view.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Report of the reference (fully supervised) run for ratios.
        #[arg(long)]
        reference_report: Option<PathBuf>,
        /// Output directory (default: next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Experiment config whose `[eval]` section sets metric weights.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the analytic blob experiment with or without the distribution term.
    Oracle {
        #[arg(long, default_value_t = 64)]
        n_problems: usize,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, value_enum, default_value_t = Switch::On)]
        curiosity: Switch,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-render an image through a checkpoint, or render a scene JSON.
    Render {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Input PNG; written side by side with its re-render.
        #[arg(long, conflicts_with = "scene_json", requires = "checkpoint")]
        image: Option<PathBuf>,
        /// Scene in label JSON form.
        #[arg(long, required_unless_present = "image")]
        scene_json: Option<PathBuf>,
        /// Dataset whose world renders the scene JSON.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Preset world for the scene JSON when no checkpoint or dataset is given.
        #[arg(long)]
        world: Option<String>,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("error: --workers must be at least 1");
            return ExitCode::from(2);
        }
        // Only fails if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let result = match cli.command {
        Command::Gen {
            world,
            n,
            seed,
            out,
            image_size,
        } => commands::gen(&world, n, seed, &out, image_size),
        Command::Train {
            config,
            mode,
            supervision_frac,
            resume,
        } => commands::train(&config, mode.as_deref(), supervision_frac, resume.as_deref()),
        Command::Eval {
            checkpoint,
            dataset,
            reference_report,
            out,
            config,
        } => commands::eval(&checkpoint, &dataset, reference_report.as_deref(), out.as_deref(), config.as_deref()),
        Command::Oracle {
            n_problems,
            steps,
            curiosity,
            seed,
            out,
        } => commands::oracle(n_problems, steps, curiosity == Switch::On, seed, &out),
        Command::Render {
            checkpoint,
            image,
            scene_json,
            dataset,
            world,
            image_size,
            out,
        } => commands::render(commands::RenderArgs {
            checkpoint: checkpoint.as_deref(),
            image: image.as_deref(),
            scene_json: scene_json.as_deref(),
            dataset: dataset.as_deref(),
            world: world.as_deref(),
            image_size,
            out: &out,
        }),
    };
    match result {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
