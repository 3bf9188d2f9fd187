//! One function per subcommand. Each returns the paths it wrote.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use bihoi_core::data::{default_hand_models, distance_fields, generate_dataset, Dataset, SequenceFile};
use bihoi_core::geometry::{ArticulatedObjectModel, HandModel};
use bihoi_core::metrics::{diversity, evaluate_sequence, DiversityMode, MetricReport, SequenceMetrics};
use bihoi_core::{HandSide, HandType, MotionSequence};
use bihoi_models::diffusion::{forward_noise, DiffusionModel};
use bihoi_models::jointvae::JointVae;
use bihoi_models::manivae::ManiVae;
use bihoi_models::persist::Persist;
use bihoi_models::pipeline::{prepare, Generator};
use bihoi_models::ssm::{forward_wall_times, scaling_exponent, Backbone};
use bihoi_models::train::{diffusion_step, joint_step, mani_step, prepare_diffusion, step_rng, DiffusionExample};
use bihoi_nn::{Adam, AdamConfig, Checkpoint, Tensor};
use rand::Rng;

use crate::artifacts::{embedder, ensure_parent, load_dataset, load_dependency, save_checkpoint, write_text, CsvLog};
use crate::config::{check_frames, parse_family, RunConfig, TrainSettings};
use crate::error::fail;
use crate::svg::{line_chart, Series, PALETTE};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Which {
    Joint,
    Mani,
}

impl Which {
    pub fn name(self) -> &'static str {
        match self {
            Which::Joint => "joint",
            Which::Mani => "mani",
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub resume: bool,
    pub dataset: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub first_step: u64,
    pub steps: u64,
    /// Total loss at the first and last executed step.
    pub initial: Option<f64>,
    pub last: Option<f64>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

fn adam_config(t: &TrainSettings) -> AdamConfig {
    AdamConfig { lr: t.lr, clip_norm: Some(t.clip_norm), ..Default::default() }
}

fn progress(stage: &str, step: u64, total: u64, loss: f64) {
    let every = (total / 10).max(1);
    if step % every == 0 || step + 1 == total {
        eprintln!("{stage}: step {}/{total} loss {loss:.6}", step + 1);
    }
}

pub fn generate(cfg: &RunConfig) -> Result<PathBuf> {
    let families = cfg.families()?;
    let ds = generate_dataset(&families, cfg.data.count, cfg.data.frames, cfg.stage_seed("data"), cfg.data.text_dim, cfg.data.object_dim)?;
    let path = cfg.dataset_path();
    ensure_parent(&path)?;
    ds.save(&path).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

/// Resumes from `path` when asked and present; otherwise starts fresh.
fn resume_point<M: Persist>(path: &Path, resume: bool) -> Result<Option<(M, Adam, u64)>> {
    if !(resume && path.exists()) {
        return Ok(None);
    }
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let model = M::from_checkpoint(&ck)?;
    let adam = ck.adam.clone().ok_or_else(|| fail("ConfigError", format!("{} holds no optimizer state", path.display())))?;
    Ok(Some((model, adam, ck.step)))
}

pub fn train_vae(cfg: &RunConfig, which: Which, opts: &TrainOptions) -> Result<TrainSummary> {
    let ds = load_dataset(cfg, opts.dataset.as_deref())?;
    let prepared = prepare(&ds, &embedder(cfg))?;
    let ck_path = cfg.checkpoint_path(which.name());
    let log_path = cfg.log_path(which.name());
    let seed = cfg.stage_seed(&format!("{}.train", which.name()));
    let (initial, last, start, steps) = match which {
        Which::Joint => {
            let data: Vec<_> = prepared.iter().map(|s| s.joint_example()).collect();
            let t = &cfg.joint_train;
            let (mut vae, mut adam, start) = match resume_point::<JointVae>(&ck_path, opts.resume)? {
                Some(r) => r,
                None => {
                    let vae = JointVae::new(cfg.joint.clone(), cfg.stage_seed("joint.init"))?;
                    let adam = Adam::new(adam_config(t), &vae.store);
                    (vae, adam, 0)
                }
            };
            let mut log = CsvLog::open(&log_path, "step,total,recon_nll,kl,rec", opts.resume)?;
            let (mut first, mut last) = (None, None);
            for step in start..t.steps {
                let l = joint_step(&mut vae, &mut adam, &data, t.batch, seed, step)?;
                log.row(step, &[l.total, l.recon_nll, l.kl, l.rec])?;
                first.get_or_insert(l.total);
                last = Some(l.total);
                progress("train-vae joint", step, t.steps, l.total);
            }
            log.finish()?;
            save_checkpoint(&vae.to_checkpoint(t.steps.max(start), Some(&adam)), &ck_path)?;
            (first, last, start, t.steps)
        }
        Which::Mani => {
            if ds.hand_points != cfg.mani.hand_points {
                return Err(fail(
                    "InvalidConfig",
                    format!("dataset distance fields use {} hand points, [mani] expects {}", ds.hand_points, cfg.mani.hand_points),
                ));
            }
            let frames = prepared.iter().map(|s| s.mani_frames()).collect::<bihoi_models::Result<Vec<_>>>()?.concat();
            let t = &cfg.mani_train;
            let (mut vae, mut adam, start) = match resume_point::<ManiVae>(&ck_path, opts.resume)? {
                Some(r) => r,
                None => {
                    let vae = ManiVae::new(cfg.mani.clone(), cfg.stage_seed("mani.init"))?;
                    let adam = Adam::new(adam_config(t), &vae.store);
                    (vae, adam, 0)
                }
            };
            let mut log = CsvLog::open(&log_path, "step,total,elbo,mesh,dist,ro,kl", opts.resume)?;
            let (mut first, mut last) = (None, None);
            for step in start..t.steps {
                let l = mani_step(&mut vae, &mut adam, &frames, t.batch, seed, step)?;
                log.row(step, &[l.total, l.elbo, l.mesh, l.dist, l.ro, l.kl])?;
                first.get_or_insert(l.total);
                last = Some(l.total);
                progress("train-vae mani", step, t.steps, l.total);
            }
            log.finish()?;
            save_checkpoint(&vae.to_checkpoint(t.steps.max(start), Some(&adam)), &ck_path)?;
            (first, last, start, t.steps)
        }
    };
    Ok(TrainSummary { first_step: start, steps, initial, last, checkpoint: ck_path, log: log_path })
}

fn frozen_vaes(cfg: &RunConfig) -> Result<(JointVae, ManiVae)> {
    let (mut joint, _) = load_dependency::<JointVae>(&cfg.checkpoint_path("joint"), "train-vae --which joint")?;
    let (mut mani, _) = load_dependency::<ManiVae>(&cfg.checkpoint_path("mani"), "train-vae --which mani")?;
    joint.store.freeze();
    mani.store.freeze();
    Ok((joint, mani))
}

fn diffusion_examples(cfg: &RunConfig, dataset: Option<&Path>) -> Result<(Dataset, Vec<DiffusionExample>, bihoi_models::diffusion::CompositeStats)> {
    let (joint, mani) = frozen_vaes(cfg)?;
    let ds = load_dataset(cfg, dataset)?;
    let prepared = prepare(&ds, &embedder(cfg))?;
    let (examples, stats) = prepare_diffusion(&mani, &joint, &prepared)?;
    Ok((ds, examples, stats))
}

pub fn train_diffusion(cfg: &RunConfig, opts: &TrainOptions) -> Result<TrainSummary> {
    let (_, examples, stats) = diffusion_examples(cfg, opts.dataset.as_deref())?;
    let ck_path = cfg.checkpoint_path("diffusion");
    let log_path = cfg.log_path("diffusion");
    let t = &cfg.diffusion_train;
    let (mut model, mut adam, start) = match resume_point::<DiffusionModel>(&ck_path, opts.resume)? {
        Some(r) => r,
        None => {
            let mut model = DiffusionModel::new(cfg.diffusion.clone(), cfg.stage_seed("diffusion.init"))?;
            model.stats = stats;
            let adam = Adam::new(adam_config(t), &model.store);
            (model, adam, 0)
        }
    };
    let seed = cfg.stage_seed("diffusion.train");
    let mut log = CsvLog::open(&log_path, "step,loss", opts.resume)?;
    let (mut first, mut last) = (None, None);
    for step in start..t.steps {
        let l = diffusion_step(&mut model, &mut adam, &examples, t.batch, seed, step)?;
        log.row(step, &[l])?;
        first.get_or_insert(l);
        last = Some(l);
        progress("train-diffusion", step, t.steps, l);
    }
    log.finish()?;
    save_checkpoint(&model.to_checkpoint(t.steps.max(start), Some(&adam)), &ck_path)?;
    Ok(TrainSummary { first_step: start, steps: t.steps, initial: first, last, checkpoint: ck_path, log: log_path })
}

#[derive(Clone, Debug, Default)]
pub struct SampleOptions {
    pub instruction: Option<String>,
    pub object: Option<PathBuf>,
    pub hand_type: Option<HandType>,
    pub family: Option<String>,
    pub name: Option<String>,
}

pub fn load_generator(cfg: &RunConfig) -> Result<Generator> {
    let (joint, mani) = frozen_vaes(cfg)?;
    let (diffusion, _) = load_dependency::<DiffusionModel>(&cfg.checkpoint_path("diffusion"), "train-diffusion")?;
    Ok(Generator::new(joint, mani, diffusion)?)
}

/// Instruction and object from the options, falling back to a dataset sample.
fn sample_inputs(cfg: &RunConfig, opts: &SampleOptions) -> Result<(String, ArticulatedObjectModel)> {
    let object = match &opts.object {
        Some(p) => Some(ArticulatedObjectModel::load(p).with_context(|| format!("loading object {}", p.display()))?),
        None => None,
    };
    if let (Some(i), Some(o)) = (&opts.instruction, &object) {
        return Ok((i.clone(), o.clone()));
    }
    let ds = load_dataset(cfg, None)?;
    let sample = match &opts.family {
        Some(f) => {
            let fam = parse_family(f)?;
            ds.samples
                .iter()
                .find(|s| s.family == fam)
                .ok_or_else(|| fail("InvalidInput", format!("the dataset has no {} sample", fam.name())))?
        }
        None => ds
            .samples
            .get(cfg.sample.index)
            .ok_or_else(|| fail("InvalidInput", format!("dataset has {} samples, index {} requested", ds.samples.len(), cfg.sample.index)))?,
    };
    Ok((
        opts.instruction.clone().unwrap_or_else(|| sample.instruction.clone()),
        object.unwrap_or_else(|| sample.object.clone()),
    ))
}

pub fn sample_sequence(cfg: &RunConfig, opts: &SampleOptions) -> Result<PathBuf> {
    let n = cfg.sample.frames;
    check_frames(n)?;
    let hand_type = match opts.hand_type {
        Some(h) => h,
        None => cfg.hand_type()?,
    };
    let (instruction, object) = sample_inputs(cfg, opts)?;
    let generator = load_generator(cfg)?;
    let seed = cfg.run.seed;
    let sequence = generator.generate(&instruction, &object, hand_type, n, seed, &embedder(cfg))?;
    let file = SequenceFile { seed, hand_type, instruction, object, sequence };
    let name = opts.name.clone().unwrap_or_else(|| format!("sample_s{seed}.bhsq"));
    let path = cfg.run.out.join("samples").join(name);
    ensure_parent(&path)?;
    file.save(&path).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

struct Evaluated {
    file: SequenceFile,
    metrics: SequenceMetrics,
}

fn evaluate_file(cfg: &RunConfig, file: SequenceFile) -> Result<Evaluated> {
    let metrics = evaluate_sequence(&file.sequence, file.hand_type, &default_hand_models(), &file.object, &cfg.metric_config())?;
    Ok(Evaluated { file, metrics })
}

fn flattened(files: &[&SequenceFile]) -> Result<Vec<Vec<f64>>> {
    let n = files[0].sequence.len();
    if files.iter().any(|f| f.sequence.len() != n) {
        return Err(fail("ShapeMismatch", "sequences have different frame counts; diversity needs equal lengths"));
    }
    Ok(files.iter().map(|f| f.sequence.flatten()).collect())
}

/// Metric report over generated sequences, with SD over same-condition groups
/// and OD over the pool.
fn report(cfg: &RunConfig, items: &[Evaluated], reference: Option<&[SequenceFile]>) -> Result<MetricReport> {
    let mut report = MetricReport::from_sequences(items.iter().map(|e| e.metrics.clone()).collect(), cfg.metrics.dt)?;
    if items.len() >= 2 {
        let files: Vec<&SequenceFile> = items.iter().map(|e| &e.file).collect();
        let flat = flattened(&files)?;
        let mut groups: BTreeMap<(u64, u64, usize), Vec<Vec<f64>>> = BTreeMap::new();
        for (f, v) in files.iter().zip(flat) {
            groups.entry(f.condition_key()).or_default().push(v);
        }
        let groups: Vec<Vec<Vec<f64>>> = groups.into_values().collect();
        report.sd = diversity(&groups, DiversityMode::Sample).ok();
        report.od = Some(diversity(&groups, DiversityMode::Overall)?);
    }
    if let Some(real) = reference.filter(|r| r.len() >= 2) {
        let flat = flattened(&real.iter().collect::<Vec<_>>())?;
        report.od_real = Some(diversity(&[flat], DiversityMode::Overall)?);
    }
    Ok(report)
}

fn dataset_files(ds: &Dataset) -> Vec<SequenceFile> {
    ds.samples
        .iter()
        .map(|s| SequenceFile {
            seed: ds.seed,
            hand_type: s.hand_type,
            instruction: s.instruction.clone(),
            object: s.object.clone(),
            sequence: s.sequence.clone(),
        })
        .collect()
}

#[derive(Clone, Debug, Default)]
pub struct EvaluateOptions {
    pub sequences: Vec<PathBuf>,
    pub reference: Option<PathBuf>,
    pub name: Option<String>,
}

/// Writes `report.txt` and `table.csv`; with no sequences the reference set
/// is evaluated against itself.
pub fn evaluate(cfg: &RunConfig, opts: &EvaluateOptions) -> Result<(PathBuf, MetricReport)> {
    let reference = match &opts.reference {
        Some(p) => Some(dataset_files(&load_dataset(cfg, Some(p))?)),
        None => None,
    };
    let files: Vec<SequenceFile> = if opts.sequences.is_empty() {
        reference.clone().ok_or_else(|| fail("InvalidInput", "nothing to evaluate: pass sequence files or --reference"))?
    } else {
        opts.sequences
            .iter()
            .map(|p| SequenceFile::load(p).with_context(|| format!("loading {}", p.display())))
            .collect::<Result<_>>()?
    };
    let items = files.into_iter().map(|f| evaluate_file(cfg, f)).collect::<Result<Vec<_>>>()?;
    let report = report(cfg, &items, reference.as_deref())?;
    let dir = cfg.run.out.join("eval").join(opts.name.as_deref().unwrap_or("default"));
    write_text(&dir.join("report.txt"), &report.to_text())?;
    write_text(&dir.join("table.csv"), &report.to_table())?;
    Ok((dir, report))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub backbone: Backbone,
    pub params: usize,
    pub eval_loss: f64,
    pub report: MetricReport,
}

pub const ABLATION_HEADER: &str = "backbone,params,eval_loss,iv_right,iv_left,id_right,id_left,jerk,sd";

impl AblationRow {
    pub fn csv(&self) -> String {
        let r = &self.report;
        let sd = r.sd.map_or(String::new(), |v| format!("{v:.6}"));
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{sd}",
            self.backbone, self.params, self.eval_loss, r.iv_right, r.iv_left, r.id_right, r.id_left, r.jerk
        )
    }
}

/// Held-out noise-prediction loss on draws fixed by `seed`.
fn eval_loss(model: &DiffusionModel, data: &[DiffusionExample], draws: usize, seed: u64) -> Result<f64> {
    let mut rng = step_rng(seed, 0);
    let mut total = 0.0;
    for k in 0..draws {
        let ex = &data[k % data.len()];
        let t = rng.random_range(1..=model.schedule.steps());
        let eps = Tensor::randn(&mut rng, ex.x0.rows(), ex.x0.cols(), 1.0);
        let xt = forward_noise(&model.schedule, &ex.x0, t, &eps)?;
        let pred = model.predict_eps(&xt, t, &ex.condition)?;
        total += pred.zip_map(&eps, |a, b| (a - b) * (a - b)).sum() / eps.len() as f64;
    }
    Ok(total / draws as f64)
}

/// Trains every backbone under the same budget and seeds, then scores it.
/// Writes `ablation.csv` and, separately, wall-clock `scaling.csv`.
pub fn ablate(cfg: &RunConfig, timing: bool) -> Result<(PathBuf, Vec<AblationRow>)> {
    let (ds, examples, stats) = diffusion_examples(cfg, None)?;
    let (joint, mani) = frozen_vaes(cfg)?;
    let sample = ds.samples.get(cfg.sample.index).unwrap_or(&ds.samples[0]);
    let hand_type = sample.hand_type;
    let emb = embedder(cfg);
    let a = &cfg.ablate;
    let mut rows = Vec::new();
    for &backbone in &a.backbones {
        let mut model = DiffusionModel::new(cfg.ablation_model(backbone), cfg.stage_seed("ablate.init"))?;
        model.stats = stats.clone();
        let mut adam = Adam::new(adam_config(&cfg.diffusion_train), &model.store);
        let seed = cfg.stage_seed("ablate.train");
        for step in 0..a.train_steps {
            let l = diffusion_step(&mut model, &mut adam, &examples, cfg.diffusion_train.batch, seed, step)?;
            progress(&format!("ablate {backbone}"), step, a.train_steps, l);
        }
        let loss = eval_loss(&model, &examples, a.eval_draws, cfg.stage_seed("ablate.eval"))?;
        let params = model.store.ids().map(|id| model.store.get(id).len()).sum();
        let generator = Generator::new(joint.clone(), mani.clone(), model)?;
        let mut items = Vec::new();
        for i in 0..a.samples {
            let seed = cfg.stage_seed("ablate.sample").wrapping_add(i as u64);
            let sequence = generator.generate(&sample.instruction, &sample.object, hand_type, a.frames, seed, &emb)?;
            let file = SequenceFile { seed, hand_type, instruction: sample.instruction.clone(), object: sample.object.clone(), sequence };
            items.push(evaluate_file(cfg, file)?);
        }
        rows.push(AblationRow { backbone, params, eval_loss: loss, report: report(cfg, &items, None)? });
    }
    let dir = cfg.run.out.join("ablation");
    let mut table = format!("{ABLATION_HEADER}\n");
    for r in &rows {
        table.push_str(&r.csv());
        table.push('\n');
    }
    write_text(&dir.join("ablation.csv"), &table)?;
    if timing {
        write_text(&dir.join("scaling.csv"), &scaling_table(cfg)?)?;
    }
    Ok((dir, rows))
}

/// Forward wall time per backbone and length, plus the fitted log-log slope.
pub fn scaling_table(cfg: &RunConfig) -> Result<String> {
    let a = &cfg.ablate;
    let mut out = String::from("backbone,length,seconds\n");
    let mut slopes = String::from("backbone,exponent\n");
    for &b in &a.backbones {
        let times = forward_wall_times(b, a.timing_dim, &a.lengths, a.timing_reps, cfg.stage_seed("ablate.timing"))?;
        for (l, t) in a.lengths.iter().zip(&times) {
            out.push_str(&format!("{b},{l},{t:.6e}\n"));
        }
        slopes.push_str(&format!("{b},{:.4}\n", scaling_exponent(&a.lengths, &times)));
    }
    Ok(format!("{out}\n{slopes}"))
}

/// Per-frame nearest object distance of each hand, active hands only.
pub fn distance_minima(file: &SequenceFile) -> Result<[Option<Vec<f64>>; 2]> {
    let fields = distance_fields(&file.sequence, &file.object, &default_hand_models())?;
    let per = |side: HandSide| {
        file.hand_type
            .is_active(side)
            .then(|| fields.iter().map(|f| f.hand(side).iter().copied().fold(f64::INFINITY, f64::min)).collect())
    };
    Ok([per(HandSide::Left), per(HandSide::Right)])
}

fn centroid_path(seq: &MotionSequence, side: HandSide, model: &impl HandModel) -> Result<Vec<[f64; 3]>> {
    seq.hands()
        .iter()
        .map(|h| {
            let pts = model.forward(h.pose(side), h.trans(side))?;
            let c = pts.iter().fold(nalgebra::Vector3::zeros(), |a, p| a + p) / pts.len() as f64;
            Ok([c.x, c.y, c.z])
        })
        .collect()
}

/// γ curve, trajectory projections and distance minima as SVG, plus the
/// underlying numbers as CSV.
pub fn plot(cfg: &RunConfig, sequence: &Path) -> Result<Vec<PathBuf>> {
    let file = SequenceFile::load(sequence).with_context(|| format!("loading {}", sequence.display()))?;
    let stem = sequence.file_stem().and_then(|s| s.to_str()).unwrap_or("sequence");
    let dir = cfg.run.out.join("plots").join(stem);
    let seq = &file.sequence;
    let frames: Vec<f64> = (0..seq.len()).map(|i| i as f64).collect();
    let gamma = seq.joint_angles();
    let minima = distance_minima(&file)?;
    let models = default_hand_models();
    let mut written = Vec::new();

    let g = Series { name: "joint angle".into(), color: PALETTE[0], points: frames.iter().copied().zip(gamma.iter().copied()).collect() };
    written.push(write_text(&dir.join("gamma.svg"), &line_chart("Object joint angle", "frame", "rad", &[g]))?);

    let mut dseries = Vec::new();
    for side in HandSide::BOTH {
        if let Some(m) = &minima[side.index()] {
            dseries.push(Series {
                name: format!("{side:?} hand").to_lowercase(),
                color: PALETTE[1 + side.index()],
                points: frames.iter().copied().zip(m.iter().copied()).collect(),
            });
        }
    }
    written.push(write_text(&dir.join("distance_minima.svg"), &line_chart("Closest hand-object distance", "frame", "m", &dseries))?);

    let mut paths = Vec::new();
    for side in HandSide::BOTH {
        if file.hand_type.is_active(side) {
            paths.push((format!("{side:?} hand").to_lowercase(), centroid_path(seq, side, &models[side.index()])?));
        }
    }
    paths.push(("object".into(), seq.objects().iter().map(|o| o.trans).collect()));
    for (name, (a, b)) in [("xy", (0, 1)), ("xz", (0, 2)), ("yz", (1, 2))] {
        let series: Vec<Series> = paths
            .iter()
            .enumerate()
            .map(|(k, (label, p))| Series { name: label.clone(), color: PALETTE[k % PALETTE.len()], points: p.iter().map(|v| (v[a], v[b])).collect() })
            .collect();
        let axes = ["x", "y", "z"];
        let title = format!("Trajectories, {name} projection");
        written.push(write_text(&dir.join(format!("trajectory_{name}.svg")), &line_chart(&title, axes[a], axes[b], &series))?);
    }

    let mut csv = String::from("frame,gamma,dmin_left,dmin_right\n");
    let cell = |m: &Option<Vec<f64>>, i: usize| m.as_ref().map_or(String::new(), |v| format!("{:.6}", v[i]));
    for i in 0..seq.len() {
        csv.push_str(&format!("{i},{:.6},{},{}\n", gamma[i], cell(&minima[0], i), cell(&minima[1], i)));
    }
    written.push(write_text(&dir.join("series.csv"), &csv)?);
    Ok(written)
}

/// Writes the object of one dataset sample as TOML.
pub fn export_object(cfg: &RunConfig, index: usize) -> Result<PathBuf> {
    let ds = load_dataset(cfg, None)?;
    let s = ds
        .samples
        .get(index)
        .ok_or_else(|| fail("InvalidInput", format!("dataset has {} samples, index {index} requested", ds.samples.len())))?;
    let path = cfg.run.out.join("objects").join(format!("sample_{index}.toml"));
    write_text(&path, &s.object.to_toml())?;
    Ok(path)
}
