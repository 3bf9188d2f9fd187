//! Argument parsing and dispatch.

use std::path::PathBuf;

use anyhow::Result;
use bihoi_core::HandType;
use bihoi_models::ssm::Backbone;
use clap::{Parser, Subcommand, ValueEnum};

use crate::commands::{self, EvaluateOptions, SampleOptions, TrainOptions, Which};
use crate::config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "bihoi", version, about = "Text-conditioned bimanual hand-object motion generation")]
pub struct Cli {
    /// TOML run configuration; every field has a default.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed for every stage of the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory holding the dataset, checkpoints, logs and outputs.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum WhichArg {
    Joint,
    Mani,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Synthesize the training dataset.
    Generate {
        #[arg(long = "family")]
        families: Vec<String>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train the joint-trajectory or the grasp VAE.
    TrainVae {
        #[arg(long, value_enum)]
        which: WhichArg,
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from the existing checkpoint and log.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Train the latent diffusion model on frozen VAEs.
    TrainDiffusion {
        #[arg(long)]
        backbone: Option<Backbone>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Generate one sequence.
    Sample {
        #[arg(long)]
        instruction: Option<String>,
        /// Object TOML; defaults to the object of a dataset sample.
        #[arg(long)]
        object: Option<PathBuf>,
        #[arg(long)]
        hand_type: Option<HandType>,
        /// Pick the first dataset sample of this family for instruction and object.
        #[arg(long)]
        family: Option<String>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        index: Option<usize>,
        /// File name under `<out>/samples/`.
        #[arg(long)]
        name: Option<String>,
    },
    /// Compute the metric table for generated sequences.
    Evaluate {
        sequences: Vec<PathBuf>,
        /// Real dataset used for the reference diversity.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Report directory name under `<out>/eval/`.
        #[arg(long)]
        name: Option<String>,
    },
    /// Compare temporal backbones under one training budget.
    Ablate {
        #[arg(long = "backbone")]
        backbones: Vec<Backbone>,
        #[arg(long)]
        frames: Option<usize>,
        /// Skip the wall-clock scaling measurement.
        #[arg(long)]
        no_timing: bool,
    },
    /// Render plots of a sequence file.
    Plot { sequence: PathBuf },
    /// Write the object of a dataset sample as TOML.
    ExportObject {
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
}

impl Cli {
    /// The configuration after flag overrides.
    pub fn config(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        if let Some(s) = self.seed {
            cfg.run.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.run.out = o.clone();
        }
        match &self.command {
            Command::Generate { families, frames, count } => {
                if !families.is_empty() {
                    cfg.data.families = families.clone();
                }
                cfg.data.frames = frames.unwrap_or(cfg.data.frames);
                cfg.data.count = count.unwrap_or(cfg.data.count);
            }
            Command::TrainVae { which, steps: Some(s), .. } => match which {
                WhichArg::Joint => cfg.joint_train.steps = *s,
                WhichArg::Mani => cfg.mani_train.steps = *s,
            },
            Command::TrainDiffusion { backbone, steps, .. } => {
                if let Some(b) = backbone {
                    cfg.diffusion.backbone.backbone = *b;
                }
                cfg.diffusion_train.steps = steps.unwrap_or(cfg.diffusion_train.steps);
            }
            Command::Sample { frames, index, .. } => {
                cfg.sample.frames = frames.unwrap_or(cfg.sample.frames);
                cfg.sample.index = index.unwrap_or(cfg.sample.index);
            }
            Command::Ablate { backbones, frames, .. } => {
                if !backbones.is_empty() {
                    cfg.ablate.backbones = backbones.clone();
                }
                cfg.ablate.frames = frames.unwrap_or(cfg.ablate.frames);
            }
            _ => {}
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn run(&self) -> Result<()> {
        let cfg = self.config()?;
        match &self.command {
            Command::Generate { .. } => println!("{}", commands::generate(&cfg)?.display()),
            Command::TrainVae { which, resume, dataset, .. } => {
                let which = match which {
                    WhichArg::Joint => Which::Joint,
                    WhichArg::Mani => Which::Mani,
                };
                let s = commands::train_vae(&cfg, which, &TrainOptions { resume: *resume, dataset: dataset.clone() })?;
                println!("{}", s.checkpoint.display());
            }
            Command::TrainDiffusion { resume, dataset, .. } => {
                let s = commands::train_diffusion(&cfg, &TrainOptions { resume: *resume, dataset: dataset.clone() })?;
                println!("{}", s.checkpoint.display());
            }
            Command::Sample { instruction, object, hand_type, family, name, .. } => {
                let opts = SampleOptions {
                    instruction: instruction.clone(),
                    object: object.clone(),
                    hand_type: *hand_type,
                    family: family.clone(),
                    name: name.clone(),
                };
                println!("{}", commands::sample_sequence(&cfg, &opts)?.display());
            }
            Command::Evaluate { sequences, reference, name } => {
                let opts = EvaluateOptions { sequences: sequences.clone(), reference: reference.clone(), name: name.clone() };
                let (dir, report) = commands::evaluate(&cfg, &opts)?;
                print!("{}", report.to_table());
                eprintln!("report written to {}", dir.display());
            }
            Command::Ablate { no_timing, .. } => {
                let (dir, rows) = commands::ablate(&cfg, !no_timing)?;
                println!("{}", commands::ABLATION_HEADER);
                for r in &rows {
                    println!("{}", r.csv());
                }
                eprintln!("tables written to {}", dir.display());
            }
            Command::Plot { sequence } => {
                for p in commands::plot(&cfg, sequence)? {
                    println!("{}", p.display());
                }
            }
            Command::ExportObject { index } => println!("{}", commands::export_object(&cfg, *index)?.display()),
        }
        Ok(())
    }
}
