use std::path::{Path, PathBuf};

use bihoi_cli::commands::{self, EvaluateOptions, SampleOptions, TrainOptions, Which};
use bihoi_cli::{error_kind, RunConfig};
use bihoi_core::data::{generate_sample, Family, SequenceFile};
use bihoi_core::geometry::ArticulatedObjectModel;

const TINY: &str = r#"
[data]
families = ["bi-art"]
count = 2
frames = 8
text_dim = 8
object_dim = 8
[joint]
latent_dim = 4
hidden = 32
text_dim = 8
object_dim = 8
[joint_train]
steps = 10
[mani]
latent_dim = 8
hidden = 32
text_dim = 8
object_dim = 8
[mani_train]
steps = 10
[diffusion]
latent_dim = 8
text_dim = 8
object_dim = 8
steps = 50
[diffusion.backbone]
model_dim = 16
num_blocks = 1
[diffusion_train]
steps = 6
[sample]
frames = 12
"#;

fn config(dir: &Path, extra: &str) -> RunConfig {
    let path = dir.join("run.toml");
    std::fs::write(&path, format!("{TINY}\n{extra}")).unwrap();
    let mut cfg = RunConfig::load_with_env(Some(&path), std::iter::empty()).unwrap();
    cfg.run.out = dir.join("out");
    cfg
}

fn with_steps(cfg: &RunConfig, steps: u64) -> RunConfig {
    let mut c = cfg.clone();
    c.joint_train.steps = steps;
    c.mani_train.steps = steps;
    c.diffusion_train.steps = steps;
    c
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn resumed_training_equals_an_uninterrupted_run() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let full = config(a.path(), "");
    let split = config(b.path(), "");
    commands::generate(&full).unwrap();
    commands::generate(&split).unwrap();
    for which in [Which::Joint, Which::Mani] {
        let whole = commands::train_vae(&full, which, &TrainOptions::default()).unwrap();
        let head = commands::train_vae(&with_steps(&split, 4), which, &TrainOptions::default()).unwrap();
        assert_eq!((head.first_step, head.steps), (0, 4));
        let resume = TrainOptions { resume: true, dataset: None };
        let tail = commands::train_vae(&split, which, &resume).unwrap();
        assert_eq!(tail.first_step, 4);
        assert_eq!(read(&whole.log), read(&tail.log), "{which:?} log");
        assert_eq!(read(&whole.checkpoint), read(&tail.checkpoint), "{which:?} checkpoint");
        let log = String::from_utf8(read(&tail.log)).unwrap();
        assert_eq!(log.lines().count(), 11);
        assert_eq!(log.lines().filter(|l| l.starts_with("step,")).count(), 1);
    }
    let whole = commands::train_diffusion(&full, &TrainOptions::default()).unwrap();
    commands::train_diffusion(&with_steps(&split, 2), &TrainOptions::default()).unwrap();
    let tail = commands::train_diffusion(&split, &TrainOptions { resume: true, dataset: None }).unwrap();
    assert_eq!(read(&whole.checkpoint), read(&tail.checkpoint));
    assert_eq!(read(&whole.log), read(&tail.log));
}

#[test]
fn fresh_training_truncates_an_old_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    commands::generate(&cfg).unwrap();
    let first = commands::train_vae(&cfg, Which::Joint, &TrainOptions::default()).unwrap();
    let again = commands::train_vae(&cfg, Which::Joint, &TrainOptions::default()).unwrap();
    assert_eq!(read(&first.log).len(), read(&again.log).len());
    assert!(again.last.unwrap() < again.initial.unwrap());
}

#[test]
fn missing_inputs_map_to_their_error_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let kind = |r: anyhow::Result<()>| error_kind(&r.unwrap_err());
    assert_eq!(kind(commands::train_vae(&cfg, Which::Joint, &TrainOptions::default()).map(drop)), "FileNotFound");
    commands::generate(&cfg).unwrap();
    assert_eq!(kind(commands::train_diffusion(&cfg, &TrainOptions::default()).map(drop)), "DependencyError");
    assert_eq!(kind(commands::sample_sequence(&cfg, &SampleOptions::default()).map(drop)), "DependencyError");
    let mut long = cfg.clone();
    long.sample.frames = 151;
    assert_eq!(kind(commands::sample_sequence(&long, &SampleOptions::default()).map(drop)), "InvalidLength");
    let missing = SampleOptions { object: Some(dir.path().join("nope.toml")), ..Default::default() };
    assert_eq!(kind(commands::sample_sequence(&cfg, &missing).map(drop)), "FileNotFound");
    assert_eq!(kind(commands::evaluate(&cfg, &EvaluateOptions::default()).map(drop)), "InvalidInput");
    assert_eq!(kind(commands::export_object(&cfg, 9).map(drop)), "InvalidInput");
}

#[test]
fn exported_objects_drive_sampling() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    commands::generate(&cfg).unwrap();
    let path = commands::export_object(&cfg, 1).unwrap();
    let object = ArticulatedObjectModel::from_toml(&std::fs::read_to_string(&path).unwrap()).unwrap();
    commands::train_vae(&cfg, Which::Joint, &TrainOptions::default()).unwrap();
    commands::train_vae(&cfg, Which::Mani, &TrainOptions::default()).unwrap();
    commands::train_diffusion(&cfg, &TrainOptions::default()).unwrap();
    let opts = SampleOptions { object: Some(path), instruction: Some("open the box".into()), name: Some("custom.bhsq".into()), ..Default::default() };
    let out = commands::sample_sequence(&cfg, &opts).unwrap();
    let file = SequenceFile::load(&out).unwrap();
    assert_eq!(file.object, object);
    assert_eq!(file.instruction, "open the box");
    assert_eq!(file.sequence.len(), 12);
    file.sequence.validate(object.limits()).unwrap();
    let again = commands::sample_sequence(&cfg, &opts).unwrap();
    assert_eq!(read(&out), read(&again));
}

fn write_sample(dir: &Path, family: Family, name: &str) -> PathBuf {
    let s = generate_sample(family, 20, 4).unwrap();
    let file = SequenceFile { seed: 0, hand_type: s.hand_type, instruction: s.instruction, object: s.object, sequence: s.sequence };
    let path = dir.join(name);
    file.save(&path).unwrap();
    path
}

fn gamma_column(csv: &str) -> Vec<f64> {
    csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect()
}

#[test]
fn plots_are_deterministic_and_follow_the_joint_angle() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let art = write_sample(dir.path(), Family::BiArt, "art.bhsq");
    let rigid = write_sample(dir.path(), Family::SingleRigid, "rigid.bhsq");
    let written = commands::plot(&cfg, &art).unwrap();
    let names: Vec<_> = written.iter().map(|p| p.file_name().unwrap().to_str().unwrap().to_owned()).collect();
    assert_eq!(names, ["gamma.svg", "distance_minima.svg", "trajectory_xy.svg", "trajectory_xz.svg", "trajectory_yz.svg", "series.csv"]);
    let first: Vec<_> = written.iter().map(|p| read(p)).collect();
    let again: Vec<_> = commands::plot(&cfg, &art).unwrap().iter().map(|p| read(p)).collect();
    assert_eq!(first, again);
    assert!(String::from_utf8(first[0].clone()).unwrap().starts_with("<svg"));

    let g = gamma_column(&String::from_utf8(first[5].clone()).unwrap());
    assert_eq!(g.len(), 20);
    assert!(g.iter().any(|v| (v - g[0]).abs() > 1e-3));

    let rigid_out = commands::plot(&cfg, &rigid).unwrap();
    let csv = String::from_utf8(read(&rigid_out[5])).unwrap();
    let g = gamma_column(&csv);
    assert!(g.iter().all(|v| *v == g[0]));
    let empty = |col: usize| csv.lines().skip(1).all(|l| l.split(',').nth(col) == Some(""));
    assert!(empty(2) != empty(3), "exactly one hand column is blank for a single-hand sample");
}

#[test]
fn evaluating_the_reference_alone_fills_real_diversity() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let dataset = commands::generate(&cfg).unwrap();
    let opts = EvaluateOptions { sequences: vec![], reference: Some(dataset), name: Some("real".into()) };
    let (path, report) = commands::evaluate(&cfg, &opts).unwrap();
    assert!(report.od_real.unwrap() > 0.0);
    let table = std::fs::read_to_string(path.join("table.csv")).unwrap();
    assert!(table.starts_with("iv_right,iv_left,id_right,id_left,jerk,sd,od,od_real\n"));
}
