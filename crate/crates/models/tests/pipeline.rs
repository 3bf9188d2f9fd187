use std::io::Cursor;

use bihoi_core::data::{generate_dataset, Family, StubEmbedder};
use bihoi_core::{HandPose, HandType};
use bihoi_models::diffusion::{DiffusionConfig, DiffusionModel};
use bihoi_models::jointvae::{JointTrajectory, JointVae, JointVaeConfig};
use bihoi_models::manivae::{pose_from_row, ManiVae, ManiVaeConfig};
use bihoi_models::persist::Persist;
use bihoi_models::pipeline::{assemble_output, build_composite, composite_from_sample, prepare, AssemblyCondition, Generator, PreparedSample};
use bihoi_models::ssm::SsmBlockConfig;
use bihoi_models::train::{joint_step, mani_step, prepare_diffusion};
use bihoi_nn::{Adam, AdamConfig, Checkpoint, Tensor};

const TEXT: usize = 8;
const OBJ: usize = 8;

fn data(families: &[Family], count: usize, frames: usize) -> Vec<PreparedSample> {
    let ds = generate_dataset(families, count, frames, 11, TEXT, OBJ).unwrap();
    prepare(&ds, &StubEmbedder { text_dim: TEXT, object_dim: OBJ }).unwrap()
}

fn mani() -> ManiVae {
    ManiVae::new(ManiVaeConfig { latent_dim: 6, hidden: 24, depth: 1, text_dim: TEXT, object_dim: OBJ, ..Default::default() }, 1).unwrap()
}

fn joint() -> JointVae {
    JointVae::new(JointVaeConfig { latent_dim: 4, hidden: 24, depth: 1, text_dim: TEXT, object_dim: OBJ, ..Default::default() }, 2).unwrap()
}

fn diffusion(steps: usize) -> DiffusionModel {
    DiffusionModel::new(
        DiffusionConfig {
            backbone: SsmBlockConfig { model_dim: 16, state_dim: 4, num_blocks: 1, ..Default::default() },
            latent_dim: 6,
            text_dim: TEXT,
            object_dim: OBJ,
            steps,
            zero_output: false,
            clip_x0: 5.0,
        },
        3,
    )
    .unwrap()
}

fn assembly(s: &PreparedSample) -> AssemblyCondition {
    AssemblyCondition { text: s.text.clone(), object: s.object.clone(), hand_type: s.sample.hand_type, limits: s.sample.object.limits() }
}

#[test]
fn composites_require_a_frozen_grasp_vae() {
    let s = &data(&[Family::BiArt], 1, 5)[0];
    let mut m = mani();
    assert_eq!(composite_from_sample(&m, s).unwrap_err().kind(), "ConfigError");
    m.store.freeze();
    let x = composite_from_sample(&m, s).unwrap();
    assert_eq!(x.shape(), (5, 6 + 15));
    assert!(build_composite(&m, &s.sample.sequence.hands()[..2], &s.frame_conditions()).is_err());
}

#[test]
fn diffusion_preparation_requires_both_vaes_frozen() {
    let ds = data(&[Family::BiArt], 2, 5);
    let (mut m, mut j) = (mani(), joint());
    m.store.freeze();
    assert_eq!(prepare_diffusion(&m, &j, &ds).unwrap_err().kind(), "ConfigError");
    j.store.freeze();
    let (examples, stats) = prepare_diffusion(&m, &j, &ds).unwrap();
    assert_eq!(examples.len(), 2);
    assert_eq!(stats.mean.len(), 21);
    assert_eq!(stats.denormalize(&examples[0].x0).max_abs_diff(&composite_from_sample(&m, &ds[0]).unwrap()) < 1e-9, true);
}

#[test]
fn round_trip_reproduces_globals_and_decoded_poses() {
    let mut m = mani();
    m.store.freeze();
    for s in data(&Family::ALL, 4, 7) {
        let x = composite_from_sample(&m, &s).unwrap();
        let gamma = JointTrajectory { gamma: s.sample.sequence.joint_angles() };
        let out = assemble_output(&m, &x, &gamma, &assembly(&s)).unwrap();
        let conds = s.frame_conditions();
        let raw = m.decode_raw(&x.slice_cols(0, 6), &conds.iter().collect::<Vec<_>>()).unwrap();
        for i in 0..7 {
            let (h, o) = out.frame(i);
            let (gh, go) = s.sample.sequence.frame(i);
            assert_eq!(o.joint_angle, gamma.gamma[i]);
            assert_eq!(o.trans, go.trans);
            let (a, b) = (o.rot.to_matrix().unwrap(), go.rot.to_matrix().unwrap());
            assert!((a - b).norm() < 1e-9);
            assert_eq!((h.trans_left, h.trans_right), (gh.trans_left, gh.trans_right));
            let pose = pose_from_row(raw.row(i), s.sample.hand_type).unwrap();
            let gap = |a: &HandPose, b: &HandPose| a.to_flat().iter().zip(b.to_flat()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(gap(&pose.left.unwrap_or_else(HandPose::identity), &h.pose_left) < 1e-9);
            assert!(gap(&pose.right.unwrap_or_else(HandPose::identity), &h.pose_right) < 1e-9);
        }
    }
}

#[test]
fn single_frame_assembles_and_bad_input_is_rejected() {
    let mut m = mani();
    m.store.freeze();
    let s = &data(&[Family::SingleArt], 1, 1)[0];
    let x = composite_from_sample(&m, s).unwrap();
    let g = JointTrajectory { gamma: vec![0.2] };
    let seq = assemble_output(&m, &x, &g, &assembly(s)).unwrap();
    assert_eq!(seq.len(), 1);
    assert_eq!(assemble_output(&m, &x, &JointTrajectory { gamma: vec![0.1, 0.2] }, &assembly(s)).unwrap_err().kind(), "ShapeMismatch");
    let mut bad = x.clone();
    bad.row_mut(0)[0] = f64::NAN;
    assert_eq!(assemble_output(&m, &bad, &g, &assembly(s)).unwrap_err().kind(), "AssemblyError");
    let mut degenerate = x.clone();
    degenerate.row_mut(0)[6 + 9..6 + 15].iter_mut().for_each(|v| *v = 0.0);
    assert_eq!(assemble_output(&m, &degenerate, &g, &assembly(s)).unwrap_err().kind(), "AssemblyError");
    let out_of_range = JointTrajectory { gamma: vec![s.sample.object.limits().1 + 1.0] };
    assert_eq!(assemble_output(&m, &x, &out_of_range, &assembly(s)).unwrap_err().kind(), "AssemblyError");
}

#[test]
fn generation_is_seeded_and_length_checked() {
    let gen = Generator::new(joint(), mani(), diffusion(10)).unwrap();
    let s = &data(&[Family::BiArt], 1, 4)[0];
    let e = StubEmbedder { text_dim: TEXT, object_dim: OBJ };
    let run = |n, seed| gen.generate(&s.sample.instruction, &s.sample.object, HandType::Bimanual, n, seed, &e);
    let a = run(12, 5).unwrap();
    assert_eq!(a.len(), 12);
    assert_eq!(a, run(12, 5).unwrap());
    assert_ne!(a, run(12, 6).unwrap());
    let (lo, hi) = s.sample.object.limits();
    assert!(a.joint_angles().iter().all(|g| *g >= lo && *g <= hi));
    assert_eq!(run(150, 1).unwrap().len(), 150);
    assert_eq!(run(151, 1).unwrap_err().kind(), "InvalidLength");
    assert_eq!(run(0, 1).unwrap_err().kind(), "InvalidLength");
    let err = gen.generate("", &s.sample.object, HandType::Bimanual, 4, 1, &e).unwrap_err();
    assert_eq!(err.kind(), "InvalidInput");
    let bad = Generator::new(joint(), mani(), DiffusionModel::new(DiffusionConfig { latent_dim: 5, ..diffusion(10).config }, 0).unwrap());
    assert_eq!(bad.unwrap_err().kind(), "InvalidConfig");
}

fn through_bytes(ck: &Checkpoint) -> Checkpoint {
    let mut buf = Vec::new();
    ck.write_to(&mut buf).unwrap();
    Checkpoint::read_from(&mut Cursor::new(buf)).unwrap()
}

#[test]
fn checkpoints_restore_identical_models() {
    let s = &data(&[Family::BiRigid], 1, 6)[0];
    let j = joint();
    let j2 = JointVae::from_checkpoint(&through_bytes(&j.to_checkpoint(3, None))).unwrap();
    let ex = s.joint_example();
    assert_eq!(j.encode(&ex.gamma, &ex.object, &ex.text).unwrap(), j2.encode(&ex.gamma, &ex.object, &ex.text).unwrap());

    let mut m = mani();
    m.store.freeze();
    let m2 = ManiVae::from_checkpoint(&through_bytes(&m.to_checkpoint(0, None))).unwrap();
    assert!(!m2.store.is_frozen());
    let mut m2f = m2.clone();
    m2f.store.freeze();
    assert_eq!(composite_from_sample(&m, s).unwrap(), composite_from_sample(&m2f, s).unwrap());

    let mut d = diffusion(10);
    d.stats.mean[2] = 0.7;
    d.stats.std[4] = 3.0;
    let d2 = DiffusionModel::from_checkpoint(&through_bytes(&d.to_checkpoint(9, None))).unwrap();
    assert_eq!(d2.stats, d.stats);
    let c = s.conditioning();
    let x = Tensor::filled(6, 21, 0.3);
    assert_eq!(d.predict_eps(&x, 4, &c).unwrap(), d2.predict_eps(&x, 4, &c).unwrap());

    assert_eq!(ManiVae::from_checkpoint(&j.to_checkpoint(0, None)).unwrap_err().kind(), "ConfigError");
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let ds = data(&[Family::BiArt], 3, 4);
    let frames: Vec<_> = ds.iter().flat_map(|s| s.mani_frames().unwrap()).collect();
    let cfg = AdamConfig { lr: 1e-3, ..Default::default() };

    let mut a = mani();
    let mut opt = Adam::new(cfg, &a.store);
    for step in 0..8 {
        mani_step(&mut a, &mut opt, &frames, 5, 4, step).unwrap();
    }

    let mut b = mani();
    let mut opt_b = Adam::new(cfg, &b.store);
    for step in 0..4 {
        mani_step(&mut b, &mut opt_b, &frames, 5, 4, step).unwrap();
    }
    let ck = through_bytes(&b.to_checkpoint(4, Some(&opt_b)));
    let mut b = ManiVae::from_checkpoint(&ck).unwrap();
    let mut opt_b = ck.adam.clone().unwrap();
    for step in ck.step..8 {
        mani_step(&mut b, &mut opt_b, &frames, 5, 4, step).unwrap();
    }
    assert_eq!(a.store, b.store);

    let ex: Vec<_> = ds.iter().map(|s| s.joint_example()).collect();
    let mut j = joint();
    let mut oj = Adam::new(cfg, &j.store);
    let first = joint_step(&mut j, &mut oj, &ex, 2, 1, 0).unwrap();
    assert!(first.total.is_finite() && first.kl >= 0.0);
}
