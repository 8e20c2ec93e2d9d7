use std::fs;
use std::path::Path;
use std::process::Command;

use nalgebra::DMatrix;
use rom_gnn::config::RunConfig;
use rom_gnn::database::{build_database, Database, Split, MANIFEST_FILE};
use rom_gnn::error::CliError;
use rom_gnn::offline::{train_basis, write_text};
use rom_gnn::online::{
    compare_ar, evaluate, score_topology, BasisModel, OnlineCase, RolloutModel, EVALUATION_CSV_HEADER,
    GENERALIZATION_CSV_HEADER, HISTOGRAM_CSV_HEADER, ROLLOUT_CSV_HEADER,
};
use romgnn_core::field::SpaceTimeField;
use romgnn_core::mesh::Mesh;
use romgnn_core::pgd::ReducedBasis;
use romgnn_core::rom::{rom_solve, Filter, NOISE_CSV_HEADER};
use romgnn_nn::doe::DOE_CSV_HEADER;

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.database.count = 6;
    cfg.solver.nt = 40;
    cfg.train.hidden = 8;
    cfg.train.layers = 2;
    cfg.train.max_epochs = 5;
    cfg.ar.hidden = 8;
    cfg.ar.layers = 2;
    cfg.ar.max_epochs = 5;
    cfg.doe.trials = 2;
    cfg.doe.epochs = 2;
    cfg.evaluation.noise_seeds = 2;
    cfg.evaluation.generalization_count = 1;
    cfg
}

/// Returns the stored PGD basis of whichever database mesh it is shown.
struct Oracle(Vec<(Mesh, ReducedBasis)>);

impl Oracle {
    fn new(db: &Database, n_modes: usize) -> Self {
        Oracle(
            db.manifest
                .entries
                .iter()
                .map(|e| (db.mesh(e).unwrap(), db.basis(e).unwrap().basis.truncated(n_modes)))
                .collect(),
        )
    }
}

impl BasisModel for Oracle {
    fn infer(&self, mesh: &Mesh, _: &DMatrix<f64>) -> Result<ReducedBasis, CliError> {
        self.0
            .iter()
            .find(|(m, _)| m.coords() == mesh.coords())
            .map(|(_, b)| b.clone())
            .ok_or_else(|| CliError::Validation("unknown mesh".into()))
    }
}

/// A "rollout" that is really the reduced solve on the oracle basis.
struct ProjectedRollout<'a>(&'a Oracle, Filter);

impl RolloutModel for ProjectedRollout<'_> {
    fn rollout(&self, mesh: &Mesh, forces: &DMatrix<f64>, dt: f64) -> Result<SpaceTimeField, CliError> {
        let (sys, _) = rom_gnn::offline::loaded_system(mesh, &small_config())?;
        let basis = self.0.infer(mesh, forces)?;
        Ok(rom_solve(&sys, &basis, forces, dt, self.1)?)
    }
}

fn header_and_width(csv: &str, header: &str) {
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(header));
    let width = header.split(',').count();
    for line in lines {
        assert_eq!(line.split(',').count(), width, "{line}");
    }
}

fn modified(path: &Path) -> std::time::SystemTime {
    fs::metadata(path).unwrap().modified().unwrap()
}

#[test]
fn three_records_validate_and_resume_without_recomputation() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.database.count = 3;
    let m1 = build_database(&cfg, dir.path()).unwrap();
    assert_eq!(m1.entries.len(), 3);
    assert_eq!((m1.counts.train, m1.counts.val, m1.counts.test), (1, 1, 1));
    let db = Database::open(dir.path()).unwrap();
    db.validate().unwrap();

    let field = dir.path().join(&m1.entries[0].record.field.path);
    let stamp = modified(&field);
    let bytes = fs::read(dir.path().join(MANIFEST_FILE)).unwrap();
    std::thread::sleep(std::time::Duration::from_millis(20));
    let m2 = build_database(&cfg, dir.path()).unwrap();
    assert_eq!(m1, m2);
    assert_eq!(fs::read(dir.path().join(MANIFEST_FILE)).unwrap(), bytes);
    assert_eq!(modified(&field), stamp, "a completed record was recomputed");
}

#[test]
fn damaged_record_is_rebuilt_and_detected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.database.count = 3;
    let m1 = build_database(&cfg, dir.path()).unwrap();
    let field = dir.path().join(&m1.entries[1].record.field.path);
    fs::write(&field, b"garbage").unwrap();
    assert!(matches!(Database::open(dir.path()).unwrap().validate(), Err(CliError::Validation(_))));
    let m2 = build_database(&cfg, dir.path()).unwrap();
    assert_eq!(m1, m2);
    Database::open(dir.path()).unwrap().validate().unwrap();
}

#[test]
fn identical_configs_give_identical_databases() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = small_config();
    build_database(&cfg, a.path()).unwrap();
    build_database(&cfg, b.path()).unwrap();
    let read = |d: &Path| fs::read(d.join(MANIFEST_FILE)).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
}

#[test]
fn opening_with_other_settings_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    build_database(&cfg, dir.path()).unwrap();
    let mut other = cfg.clone();
    other.solver.nt = 41;
    assert!(matches!(Database::open_for(dir.path(), &other), Err(CliError::Validation(_))));
    assert!(Database::open_for(dir.path(), &cfg.with_seed(9)).is_ok());
}

#[test]
fn exact_bases_score_zero_mode_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    build_database(&cfg, dir.path()).unwrap();
    let db = Database::open(dir.path()).unwrap();
    let oracle = Oracle::new(&db, cfg.train.n_modes());
    for split in [Split::Train, Split::Test] {
        let report = evaluate(&oracle, &db, &cfg, split).unwrap();
        for s in &report.scores {
            assert_eq!(s.mode_rmse, vec![0.0; 3]);
            assert!(s.field_error < 200.0 * cfg.pgd.eps, "{}", s.field_error);
        }
    }
}

#[test]
fn identical_predictions_give_identical_curves() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    build_database(&cfg, dir.path()).unwrap();
    let db = Database::open(dir.path()).unwrap();
    let oracle = Oracle::new(&db, cfg.train.n_modes());
    let report = compare_ar(&oracle, &ProjectedRollout(&oracle, cfg.evaluation.filter), &db, &cfg).unwrap();
    assert_eq!(report.gnnpgd, report.ar);
    assert_eq!(report.gnnpgd.len(), cfg.solver.nt);
    header_and_width(&report.to_csv(), ROLLOUT_CSV_HEADER);
}

#[test]
fn one_hole_generalization_matches_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    build_database(&cfg, dir.path()).unwrap();
    let db = Database::open(dir.path()).unwrap();
    let trained = train_basis(&db, &cfg, &cfg.train).unwrap();
    let ck = &trained.checkpoint;
    let evaluated = evaluate(ck, &db, &cfg, Split::Test).unwrap();
    let s = &evaluated.scores[0];
    let fresh = score_topology(ck, &cfg, 1, 1, s.seed).unwrap();
    assert_eq!(fresh[0].seed, s.seed);
    assert_eq!(fresh[0].n_nodes, s.n_nodes);
    assert!((fresh[0].field_error - s.field_error).abs() < 1e-9 * s.field_error.max(1.0));
    for (a, b) in fresh[0].mode_rmse.iter().zip(&s.mode_rmse) {
        assert!((a - b).abs() < 1e-9 * b.max(1.0), "{a} vs {b}");
    }
}

#[test]
fn unseen_topologies_stay_finite() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    build_database(&cfg, dir.path()).unwrap();
    let db = Database::open(dir.path()).unwrap();
    let ck = train_basis(&db, &cfg, &cfg.train).unwrap().checkpoint;
    for holes in [2, 3] {
        let scores = score_topology(&ck, &cfg, holes, 1, 500).unwrap();
        assert_eq!(scores[0].holes, holes);
        assert!(scores[0].field_error.is_finite());
        assert!(scores[0].mode_rmse.iter().all(|v| v.is_finite()));
        assert!(scores[0].per_timestep.iter().all(|v| v.is_finite()));
    }
}

fn rom_gnn(dir: &Path, config: &Path, args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_rom-gnn"))
        .current_dir(dir)
        .arg("--config")
        .arg(config)
        .arg("--out-dir")
        .arg(dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stdout).into_owned())
}

const SMALL_TOML: &str = "[database]\ncount = 6\n[solver]\nnt = 40\n[train]\nhidden = 8\nlayers = 2\nmax_epochs = 3\n\
    [ar]\nhidden = 8\nlayers = 2\nmax_epochs = 3\n[doe]\ntrials = 2\nepochs = 2\n\
    [evaluation]\nnoise_seeds = 2\ngeneralization_count = 1\n";

#[test]
fn every_verb_emits_valid_csv() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let config = d.join("run.toml");
    fs::write(&config, SMALL_TOML).unwrap();
    let db = d.join("db");
    let db = db.to_str().unwrap();
    let ok = |args: &[&str]| {
        let (code, stdout) = rom_gnn(d, &config, args);
        assert_eq!(code, 0, "{args:?}: {stdout}");
    };
    ok(&["build-db"]);
    ok(&["doe", "--db", db]);
    ok(&["train", "--db", db, "--hp", d.join("best_hp.toml").to_str().unwrap()]);
    ok(&["train", "--db", db, "--ar"]);
    let model = d.join("model.ckpt");
    let model = model.to_str().unwrap();
    ok(&["evaluate", "--checkpoint", model, "--db", db]);
    ok(&["compare-ar", "--checkpoint", model, "--ar-checkpoint", d.join("ar.ckpt").to_str().unwrap(), "--db", db]);
    ok(&["noise-study", "--db", db]);
    ok(&["generalize", "--checkpoint", model, "--holes", "2"]);

    let read = |name: &str| fs::read_to_string(d.join(name)).unwrap();
    header_and_width(&read("doe_trials.csv"), DOE_CSV_HEADER);
    header_and_width(&read("model_history.csv"), rom_gnn::offline::HISTORY_CSV_HEADER);
    header_and_width(&read("ar_history.csv"), rom_gnn::offline::HISTORY_CSV_HEADER);
    header_and_width(&read("evaluation.csv"), EVALUATION_CSV_HEADER);
    header_and_width(&read("histograms.csv"), HISTOGRAM_CSV_HEADER);
    header_and_width(&read("rollout_error.csv"), ROLLOUT_CSV_HEADER);
    header_and_width(&read("noise_study.csv"), NOISE_CSV_HEADER);
    header_and_width(&read("generalization.csv"), GENERALIZATION_CSV_HEADER);
    assert_eq!(read("doe_trials.csv").lines().count(), 3);
    assert_eq!(read("rollout_error.csv").lines().count(), 41);
    assert_eq!(read("generalization.csv").lines().count(), 2);
}

/// The online verbs run in a directory holding only the checkpoint, a mesh
/// and the configuration, and agree with the library path.
#[test]
fn online_phase_needs_only_checkpoint_and_mesh() {
    let offline = tempfile::tempdir().unwrap();
    let cfg = small_config();
    build_database(&cfg, offline.path()).unwrap();
    let db = Database::open(offline.path()).unwrap();
    let ck = train_basis(&db, &cfg, &cfg.train).unwrap().checkpoint;
    let entry = db.manifest.split(Split::Test).next().unwrap();

    let online = tempfile::tempdir().unwrap();
    let o = online.path();
    ck.write(&o.join("model.ckpt")).unwrap();
    fs::copy(offline.path().join(&entry.record.mesh.path), o.join("seat.msh")).unwrap();
    let config = o.join("run.toml");
    write_text(&config, &cfg.to_toml()).unwrap();
    drop(offline);

    let (code, _) = rom_gnn(o, &config, &["infer", "--checkpoint", "model.ckpt", "--mesh", "seat.msh"]);
    assert_eq!(code, 0);
    let (code, _) = rom_gnn(o, &config, &["project", "--mesh", "seat.msh", "--basis", "predicted.rob"]);
    assert_eq!(code, 0);

    let mut names: Vec<String> = fs::read_dir(o).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(
        names,
        ["model.ckpt", "model.ckpt.json", "predicted.rob", "reconstructed.stf", "run.toml", "seat.msh"]
    );
    let case = OnlineCase::new(romgnn_core::mesh::read_msh(&o.join("seat.msh")).unwrap(), &cfg).unwrap();
    let basis = case.predict(&ck).unwrap();
    assert_eq!(ReducedBasis::read(&o.join("predicted.rob")).unwrap().modes(), basis.modes());
    let u = case.reconstruct(&basis, cfg.evaluation.filter).unwrap();
    assert_eq!(SpaceTimeField::read(&o.join("reconstructed.stf")).unwrap(), u);
}

#[test]
fn exit_codes_follow_the_failure_kind() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let bad = d.join("bad.toml");
    fs::write(&bad, "[solver]\nnt = 1\n").unwrap();
    assert_eq!(rom_gnn(d, &bad, &["build-db"]).0, 2);
    fs::write(&bad, "unknown_key = 1\n").unwrap();
    assert_eq!(rom_gnn(d, &bad, &["build-db"]).0, 2);

    let good = d.join("good.toml");
    fs::write(&good, SMALL_TOML).unwrap();
    assert_eq!(rom_gnn(d, &good, &["solve", "--mesh", "missing.msh"]).0, 2);

    // three holes with coarse clearance cannot be placed: every record fails
    let crowded = d.join("crowded.toml");
    fs::write(
        &crowded,
        format!("{SMALL_TOML}[geometry]\nholes = 3\n[geometry.ranges]\ntarget_edge_length = 0.08\n"),
    )
    .unwrap();
    assert_eq!(rom_gnn(d, &crowded, &["build-db", "--count", "3"]).0, 4);
    let manifest = fs::read_to_string(d.join("db").join(MANIFEST_FILE)).unwrap();
    assert!(manifest.contains("\"failures\""));
}
