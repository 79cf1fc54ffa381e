use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gaitbo::bo::{enumerate_actions, sample_context, train, Scenario};
use gaitbo::collocation::Context;
use gaitbo::config::RunConfig;
use gaitbo::eval::{duel, transition_map, write_transition_map, ActionPredictor, BaselineSet, Player};
use gaitbo::gp::GpState;
use gaitbo::terrain::{Heightmap, TerrainFeatures};
use gaitbo::{Error, Result};

#[derive(Parser)]
#[command(name = "gaitbo", version, about = "Contact-schedule selection for a planar hopper")]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed of the selected command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn a model by GP-UCB; writes the model JSON and a CSV log next to it.
    Train {
        #[arg(long)]
        scenario: Option<Scenario>,
        /// Continue from a flat-terrain model with the rough stage only.
        #[arg(long)]
        warm_start: Option<PathBuf>,
        #[arg(long)]
        max_iterations: Option<usize>,
        #[arg(short, long, default_value = "model.json")]
        out: PathBuf,
    },
    /// Duel a model against the baseline or another model.
    Eval {
        model: PathBuf,
        /// `baseline` or a model path.
        #[arg(long, default_value = "baseline")]
        vs: String,
        #[arg(short, long)]
        n: Option<usize>,
        #[arg(long)]
        scenario: Option<Scenario>,
        /// Output prefix for `<out>.csv` and `<out>.json`.
        #[arg(short, long, default_value = "duel")]
        out: PathBuf,
    },
    /// Print the predicted action for one goal distance.
    Predict {
        model: PathBuf,
        #[arg(long)]
        goal: f64,
        /// Heightmap supplying the terrain features; flat when omitted.
        #[arg(long, conflicts_with = "flat")]
        terrain: Option<PathBuf>,
        /// All-zero terrain features (the default).
        #[arg(long)]
        flat: bool,
    },
    /// Predicted action over a goal-distance sweep on flat terrain.
    TransitionMap {
        model: PathBuf,
        #[arg(long, default_value_t = 0.001)]
        resolution: f64,
        #[arg(short, long, default_value = "transition.csv")]
        out: PathBuf,
    },
    /// Sample a rough heightmap from the configured terrain settings.
    TerrainGen {
        #[arg(short, long, default_value = "terrain.txt")]
        out: PathBuf,
    },
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn model_name(path: &Path) -> String {
    path.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned())
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let space = enumerate_actions();
    match cli.command {
        Command::Train { scenario, warm_start, max_iterations, out } => {
            if let Some(s) = scenario {
                config.bo.scenario = s;
            }
            if let Some(seed) = cli.seed {
                config.bo.seed = seed;
            }
            if let Some(m) = max_iterations {
                config.bo.max_iterations = m;
            }
            config.validate()?;
            let warm = warm_start.map(|p| GpState::load(&p)).transpose()?;
            let setup = config.train_setup()?;
            let outcome = train(&setup, &config.oracle(), warm.as_ref())?;
            outcome.gp.save(&out)?;
            let log_path = with_suffix(&out, ".log.csv");
            let mut log = create(&log_path)?;
            outcome.write_log(&mut log)?;
            log.flush()?;
            println!(
                "{:?} after {} iterations, fsrr {:.4e}; model {} log {}",
                outcome.stop,
                outcome.log.len(),
                outcome.fsrr,
                out.display(),
                log_path.display()
            );
        }
        Command::Eval { model, vs, n, scenario, out } => {
            if let Some(s) = scenario {
                config.eval.scenario = s;
            }
            if let Some(seed) = cli.seed {
                config.eval.seed = seed;
            }
            if let Some(n) = n {
                config.eval.rounds = n;
            }
            config.validate()?;
            let p1 = Player::Model { name: model_name(&model), model: GpState::load(&model)? };
            let p2 = if vs == "baseline" {
                Player::Baseline(BaselineSet::default())
            } else {
                let path = PathBuf::from(&vs);
                Player::Model { name: model_name(&path), model: GpState::load(&path)? }
            };
            let sampler = config.terrain.sampler()?;
            let report = duel(&p1, &p2, &config.eval, &sampler, &space, &config.oracle())?;
            let csv_path = with_suffix(&out, ".csv");
            let json_path = with_suffix(&out, ".json");
            let mut w = create(&csv_path)?;
            report.write_csv(&mut w)?;
            w.flush()?;
            let mut w = create(&json_path)?;
            report.write_summary_json(&mut w)?;
            w.flush()?;
            let s = &report.summary;
            println!(
                "{} vs {}: wins {} / {}, ties {}, failure rates {:.3} / {:.3}",
                s.player1, s.player2, s.wins1, s.wins2, s.ties, s.failure_rate1, s.failure_rate2
            );
        }
        Command::Predict { model, goal, terrain, .. } => {
            config.validate()?;
            let gp = GpState::load(&model)?;
            let predictor = ActionPredictor::new(&gp, &space);
            let n_t = predictor.context_dim() - 1;
            let features = match terrain {
                Some(path) => {
                    let hm = Heightmap::load(&path)?;
                    let sampler = config.terrain.sampler()?;
                    let idx = sampler.variable_indices();
                    if hm.len() != sampler.base().len() {
                        return Err(Error::InvalidHeightmap("terrain must share the configured heightmap grid".into()));
                    }
                    let mut z: Vec<f64> = idx.iter().map(|&i| hm.z_samples()[i]).collect();
                    z.resize(n_t, 0.0);
                    TerrainFeatures { node_heights: z }
                }
                None => TerrainFeatures::zeros(n_t),
            };
            let context = Context::new(goal, features)?;
            let (action, mean) = predictor.predict(&context)?;
            println!("{action} {} mean {mean:.6}", action.schedule_string());
        }
        Command::TransitionMap { model, resolution, out } => {
            let gp = GpState::load(&model)?;
            let rows = transition_map(&gp, &space, resolution)?;
            let mut w = create(&out)?;
            write_transition_map(&rows, &mut w)?;
            w.flush()?;
            println!("{} rows written to {}", rows.len(), out.display());
        }
        Command::TerrainGen { out } => {
            config.validate()?;
            let sampler = config.terrain.sampler()?;
            let mut rng = ChaCha8Rng::seed_from_u64(cli.seed.unwrap_or(config.bo.seed));
            let (context, terrain) = sample_context(&mut rng, Scenario::Rough, &sampler)?;
            terrain.heightmap().save(&out)?;
            println!("node heights {:?} written to {}", context.terrain_features.node_heights, out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if matches!(e, Error::Io(_)) { 2 } else { 1 })
        }
    }
}
