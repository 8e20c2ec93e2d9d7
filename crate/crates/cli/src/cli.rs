//! Command-line front end.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::{error, info};
use romgnn_core::field::SpaceTimeField;
use romgnn_core::mesh::{generate_geometry, read_msh, triangulate, write_msh};
use romgnn_core::pgd::{pgd_compress, ReducedBasis};
use romgnn_core::rom::{field_error, noise_rows_csv, Filter};
use romgnn_nn::checkpoint::Checkpoint;
use romgnn_nn::train::TrainConfig;

use crate::config::RunConfig;
use crate::database::{build_database, Database, Split};
use crate::error::CliError;
use crate::offline::{history_csv, search, train_ar_model, train_basis, write_text};
use crate::online::{compare_ar, evaluate, generalization_study, noise_on_record, OnlineCase};

#[derive(Debug, Parser)]
#[command(name = "rom-gnn", version, about = "GNN-predicted reduced-order bases for 2D elastodynamics")]
pub struct Cli {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Start from the large preset (500 geometries, 1000 time samples).
    #[arg(long, global = true)]
    pub paper_scale: bool,
    /// Overrides the run, training and baseline seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw one geometry and write its mesh.
    Mesh {
        #[arg(long, default_value_t = 1)]
        holes: usize,
    },
    /// Solve the transient response of a mesh.
    Solve {
        #[arg(long)]
        mesh: PathBuf,
    },
    /// Compress a space-time field into separated modes.
    Compress {
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        eps: Option<f64>,
        /// Enrich to at least this many modes.
        #[arg(long, default_value_t = 1)]
        min_rank: usize,
    },
    /// Generate, solve and compress the geometry database.
    BuildDb {
        #[arg(long)]
        count: Option<usize>,
        /// Database directory (default: OUT_DIR/db).
        #[arg(long)]
        db: Option<PathBuf>,
    },
    /// Latin hypercube search over training hyperparameters.
    Doe {
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train the basis model, or the autoregressive baseline with --ar.
    Train {
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        ar: bool,
        /// TOML file with training hyperparameters (e.g. from `doe`).
        #[arg(long)]
        hp: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Predict the reduced basis of a mesh.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        mesh: PathBuf,
    },
    /// Galerkin solve of a mesh on a given basis.
    Project {
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        basis: PathBuf,
        /// identity or k-inverse (default from the configuration).
        #[arg(long)]
        filter: Option<Filter>,
        /// Reference field to report the space-time error against.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Score a basis model on a database split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        db: PathBuf,
        #[arg(long, default_value = "test")]
        split: SplitArg,
        #[arg(long, default_value_t = 10)]
        bins: usize,
    },
    /// Per-timestep errors of the basis model and the autoregressive baseline.
    CompareAr {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        ar_checkpoint: PathBuf,
        #[arg(long)]
        db: PathBuf,
    },
    /// Canonical and filtered projection onto noisy copies of a stored basis.
    NoiseStudy {
        #[arg(long)]
        db: PathBuf,
        /// Record seed (default: first test record).
        #[arg(long)]
        record: Option<u64>,
    },
    /// Score a model on topologies with more holes than it was trained on.
    Generalize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',')]
        holes: Option<Vec<usize>>,
        #[arg(long)]
        count: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match (&cli.config, cli.paper_scale) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, true) => RunConfig::paper_scale(),
        (None, false) => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report serializes")
}

fn out(cli: &Cli, name: &str) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(&cli.out_dir).map_err(|e| CliError::io(&cli.out_dir, e))?;
    Ok(cli.out_dir.join(name))
}

fn checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Ok(Checkpoint::read(path)?)
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Mesh { holes } => {
            let params = generate_geometry(cfg.seed, *holes, &cfg.geometry.ranges)?;
            let mesh = triangulate(&params)?;
            write_msh(&mesh, &out(cli, "mesh.msh")?)?;
            write_text(&out(cli, "geometry.json")?, &to_json(&params))?;
            println!("{} nodes, {} triangles", mesh.n_nodes(), mesh.triangles().len());
        }
        Command::Solve { mesh } => {
            let mesh = read_msh(mesh)?;
            let (_, _, u) = romgnn_core::fem::solve_geometry(&mesh, &cfg.material, &cfg.pulse, cfg.solver.nt)?;
            u.write(&out(cli, "field.stf")?)?;
            println!("max displacement {:e} m", u.max_displacement());
        }
        Command::Compress { field, eps, min_rank } => {
            let u = SpaceTimeField::read(field)?;
            let mut pgd = cfg.pgd.clone();
            if let Some(eps) = eps {
                pgd.eps = *eps;
            }
            let res = pgd_compress(u.values(), u.dt(), &pgd.options(*min_rank))?;
            res.field.write(&out(cli, "basis.rob")?)?;
            let at_eps = res.rank_at_eps.map_or("not reached".to_string(), |r| r.to_string());
            println!("rank {} (tolerance met at rank {at_eps}), error {:e}", res.rank(), res.errors.last().unwrap_or(&1.0));
        }
        Command::BuildDb { count, db } => {
            let mut cfg = cfg;
            if let Some(c) = count {
                cfg.database.count = *c;
                cfg.validate()?;
            }
            let root = db.clone().unwrap_or_else(|| cli.out_dir.join("db"));
            let manifest = build_database(&cfg, &root);
            if let Ok(m) = &manifest {
                for (rank, n) in m.rank_histogram() {
                    let rank = rank.map_or("none".to_string(), |r| r.to_string());
                    println!("rank at tolerance {rank}: {n}");
                }
            }
            write_text(&root.join("config.toml"), &cfg.to_toml())?;
            manifest?;
        }
        Command::Doe { db, trials, epochs } => {
            let mut cfg = cfg;
            cfg.doe.trials = trials.unwrap_or(cfg.doe.trials);
            cfg.doe.epochs = epochs.unwrap_or(cfg.doe.epochs);
            let db = Database::open_for(db, &cfg)?;
            let report = search(&db, &cfg)?;
            write_text(&out(cli, "doe_trials.csv")?, &report.to_csv())?;
            match report.best_trial() {
                Some(best) => {
                    let hp = best.assignment.apply(&cfg.train);
                    let text = toml::to_string_pretty(&hp).expect("hyperparameters serialize");
                    write_text(&out(cli, "best_hp.toml")?, &text)?;
                    println!("best trial {} with validation loss {:e}", best.index, best.best_val_loss.unwrap_or(f64::NAN));
                }
                None => return Err(CliError::Numerical("every trial diverged or failed".into())),
            }
        }
        Command::Train { db, ar, hp, epochs } => {
            let mut cfg = cfg;
            if let Some(path) = hp {
                let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                let mut train: TrainConfig =
                    toml::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
                train.seed = cfg.train.seed;
                cfg.train = train;
            }
            if let Some(e) = epochs {
                cfg.train.max_epochs = *e;
                cfg.ar.max_epochs = *e;
            }
            cfg.validate()?;
            let db = Database::open_for(db, &cfg)?;
            let (trained, name) = if *ar {
                (train_ar_model(&db, &cfg)?, "ar")
            } else {
                (train_basis(&db, &cfg, &cfg.train)?, "model")
            };
            trained.checkpoint.write(&out(cli, &format!("{name}.ckpt"))?)?;
            write_text(&out(cli, &format!("{name}_history.csv"))?, &history_csv(&trained.history))?;
            let m = &trained.checkpoint.meta;
            println!(
                "{} parameters, best validation loss {:e} at epoch {} of {}",
                trained.checkpoint.model.param_count(),
                m.best_val_loss,
                m.best_epoch,
                m.epochs_run
            );
        }
        Command::Infer { checkpoint: ck, mesh } => {
            let ck = checkpoint(ck)?;
            let case = OnlineCase::new(read_msh(mesh)?, &cfg)?;
            let basis = case.predict(&ck)?;
            basis.write(&out(cli, "predicted.rob")?)?;
            println!("{} modes over {} dofs", basis.rank(), basis.n_dofs());
        }
        Command::Project {
            mesh,
            basis,
            filter,
            reference,
        } => {
            let case = OnlineCase::new(read_msh(mesh)?, &cfg)?;
            let basis = ReducedBasis::read(basis)?;
            let u = case.reconstruct(&basis, filter.unwrap_or(cfg.evaluation.filter))?;
            u.write(&out(cli, "reconstructed.stf")?)?;
            if let Some(path) = reference {
                let reference = SpaceTimeField::read(path)?;
                println!("space-time error {:.4}%", field_error(&reference, &u)?);
            }
        }
        Command::Evaluate {
            checkpoint: ck,
            db,
            split,
            bins,
        } => {
            let ck = checkpoint(ck)?;
            let db = Database::open_for(db, &cfg)?;
            let report = evaluate(&ck, &db, &cfg, (*split).into())?;
            let summary = report.summary();
            write_text(&out(cli, "evaluation.csv")?, &report.to_csv())?;
            write_text(&out(cli, "histograms.csv")?, &report.histograms_csv(*bins))?;
            write_text(&out(cli, "evaluation_summary.json")?, &to_json(&summary))?;
            println!("{}", to_json(&summary));
        }
        Command::CompareAr {
            checkpoint: ck,
            ar_checkpoint,
            db,
        } => {
            let ck = checkpoint(ck)?;
            let ar = checkpoint(ar_checkpoint)?;
            let db = Database::open_for(db, &cfg)?;
            let report = compare_ar(&ck, &ar, &db, &cfg)?;
            write_text(&out(cli, "rollout_error.csv")?, &report.to_csv())?;
            let summary = report.summary();
            write_text(&out(cli, "rollout_summary.json")?, &to_json(&summary))?;
            println!("{}", to_json(&summary));
        }
        Command::NoiseStudy { db, record } => {
            let db = Database::open_for(db, &cfg)?;
            let entry = match record {
                Some(seed) => db.manifest.entries.iter().find(|e| e.record.seed == *seed),
                None => db.manifest.split(Split::Test).next(),
            }
            .ok_or_else(|| CliError::Validation("no such record".into()))?;
            let rows = noise_on_record(&db, entry, &cfg)?;
            let csv = noise_rows_csv(&rows);
            write_text(&out(cli, "noise_study.csv")?, &csv)?;
            print!("{csv}");
        }
        Command::Generalize {
            checkpoint: ck,
            holes,
            count,
        } => {
            let ck = checkpoint(ck)?;
            let holes = holes.clone().unwrap_or_else(|| cfg.evaluation.generalization_holes.clone());
            let count = count.unwrap_or(cfg.evaluation.generalization_count);
            let first = cfg.seed + cfg.evaluation.generalization_seed_offset;
            let report = generalization_study(&ck, &cfg, &holes, count, first)?;
            write_text(&out(cli, "generalization.csv")?, &report.to_csv())?;
            write_text(&out(cli, "generalization_scores.json")?, &to_json(&report.scores))?;
            print!("{}", report.to_csv());
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            error!("thread pool: {e}");
        }
    }
    match run(&cli) {
        Ok(()) => {
            info!("done");
            0
        }
        Err(e) => {
            error!("{e}");
            e.exit_code()
        }
    }
}
