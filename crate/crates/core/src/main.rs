use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;
use serde::Serialize;

use ccvqa::frame::load_frames;
use ccvqa::harness::ablation::run_ablation;
use ccvqa::harness::checkpoint::{peek_dtype, Checkpoint};
use ccvqa::harness::config::TrainConfig;
use ccvqa::harness::data::load_named_split;
use ccvqa::harness::experiment::{pretrain_clip, PreparedData};
use ccvqa::harness::train::{evaluate, MetricsRecord, Trainer};
use ccvqa::harness::verify::gradcheck_seed;
use ccvqa::keyframe::select_keyframes;
use ccvqa::model::{Ccvqa, Mode, PromptCache};
use ccvqa::synth::{build_dataset, DatasetConfig};
use ccvqa::tensor::{Dtype, ParamStore, Real};

#[derive(Parser)]
#[command(name = "ccvqa", about = "CLIP-guided cross-domain VideoQA at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic moving-shape dataset.
    GenData {
        #[arg(long, default_value_t = 200)]
        videos: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Frames per video.
        #[arg(long, default_value_t = 8)]
        frames: usize,
        /// Optional TOML dataset config; flags above override it.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Contrastively pretrain the CLIP branch on the training captions.
    PretrainClip {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output checkpoint (CLIP tensors only).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model and keep the best validation checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        mode: Option<Mode>,
        /// Load CLIP weights from this checkpoint instead of pretraining.
        #[arg(long)]
        clip_ckpt: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on one split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Dataset directory; defaults to the one recorded in the checkpoint.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train all three modes over the configured seeds and print the table.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Print the key frames selected from a frame directory.
    Keyframes {
        #[arg(long)]
        frames: PathBuf,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference check of full-model gradients on random geometries.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn emit<S: Serialize>(value: &S) {
    let line = serde_json::to_string(value).expect("serializable");
    let mut out = io::stdout().lock();
    let _ = writeln!(out, "{line}");
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    Ok(match path {
        Some(p) => TrainConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => TrainConfig::default(),
    })
}

fn model_from_checkpoint<T: Real>(c: &Checkpoint<T>) -> Result<(Ccvqa, ParamStore<T>)> {
    let (model, mut store) = Ccvqa::build::<T>(
        c.config.model.clone(),
        c.answers.clone(),
        c.question_vocab.clone(),
        c.clip_vocab.clone(),
        c.config.seed,
    )?;
    let n = store.load_matching(&c.params, "")?;
    if n != store.len() {
        bail!("checkpoint covers {n} of {} model tensors", store.len());
    }
    Ok((model, store))
}

fn pretrain<T: Real>(cfg: TrainConfig, data: &Path, out: &Path) -> Result<()> {
    let prepared = PreparedData::load(data, &cfg)?;
    let (model, mut store) = prepared.build_model::<T>(&cfg, cfg.seed)?;
    let losses = pretrain_clip(&model, &mut store, &prepared.captions, &cfg, cfg.seed)?;
    for (step, loss) in losses.iter().enumerate() {
        emit(&serde_json::json!({ "step": step, "contrastive_loss": loss }));
    }
    let mut ckpt = Trainer::new(cfg, model, store)?.checkpoint();
    let mut clip_only = ParamStore::new();
    for (_, p) in ckpt.params.iter().filter(|(_, p)| p.name.starts_with("clip.")) {
        clip_only.insert(p.name.clone(), p.tensor.clone())?;
    }
    ckpt.params = clip_only;
    ckpt.moments = Default::default();
    ckpt.save(out)?;
    info!("wrote {}", out.display());
    Ok(())
}

fn train<T: Real>(cfg: TrainConfig, data: &Path, clip_ckpt: Option<&Path>, out: &Path) -> Result<()> {
    let prepared = PreparedData::load(data, &cfg)?;
    let (model, mut store) = prepared.build_model::<T>(&cfg, cfg.seed)?;
    if cfg.mode.uses_clip() {
        match clip_ckpt {
            Some(p) => {
                let c = Checkpoint::<T>::load(p)?;
                let n = store.load_matching(&c.params, "clip.")?;
                info!("loaded {n} CLIP tensors from {}", p.display());
            }
            None => {
                let losses = pretrain_clip(&model, &mut store, &prepared.captions, &cfg, cfg.seed)?;
                if let (Some(a), Some(b)) = (losses.first(), losses.last()) {
                    info!("clip pretraining loss {a:.4} -> {b:.4}");
                }
            }
        }
    }
    let mut trainer = Trainer::new(cfg, model, store)?;
    trainer.fit(&prepared.train, &prepared.val, |m| emit(m))?;
    trainer.best_checkpoint().save(out)?;
    trainer.restore_best();
    emit(&trainer.evaluate(&prepared.test)?);
    info!("wrote {}", out.display());
    Ok(())
}

fn eval<T: Real>(ckpt_path: &Path, split: &str, data: Option<PathBuf>) -> Result<MetricsRecord> {
    let c = Checkpoint::<T>::load(ckpt_path)?;
    let dir = data
        .or_else(|| c.config.data_dir.clone())
        .context("no dataset directory given or recorded in the checkpoint")?;
    let (model, store) = model_from_checkpoint(&c)?;
    let loaded = load_named_split(&dir, split, &c.config.model, c.config.seed)?;
    let cache = PromptCache::new();
    let use_cache = c.config.clip_frozen && c.config.mode.uses_clip();
    Ok(evaluate(&model, &store, &loaded, c.config.mode, use_cache.then_some(&cache), c.epoch)?)
}

fn ablate<T: Real>(cfg: TrainConfig, data: &Path) -> Result<()> {
    let prepared = PreparedData::load(data, &cfg)?;
    let (table, _) = run_ablation::<T>(&cfg, &prepared, |mode, seed, m| {
        emit(&serde_json::json!({ "mode": mode, "seed": seed, "metrics": m }));
    })?;
    for mode in Mode::ALL {
        emit(&table.summary(mode));
    }
    eprint!("{}", table.render());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GenData {
            videos,
            out,
            seed,
            frames,
            config,
        } => {
            let mut cfg: DatasetConfig = match config {
                Some(p) => toml::from_str(&std::fs::read_to_string(&p).with_context(|| p.display().to_string())?)?,
                None => DatasetConfig::default(),
            };
            cfg.videos = videos;
            cfg.seed = seed;
            cfg.frames_per_video = frames;
            let ds = build_dataset(&cfg, &out)?;
            info!(
                "wrote {} train, {} val, {} test questions over {} answers to {}",
                ds.train.records.len(),
                ds.val.records.len(),
                ds.test.records.len(),
                ds.train.answers.len(),
                out.display()
            );
        }
        Command::PretrainClip {
            data,
            steps,
            config,
            out,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            cfg.clip_pretrain.steps = steps;
            let out = out.unwrap_or_else(|| data.join("clip.ckpt"));
            match cfg.precision {
                Dtype::F32 => pretrain::<f32>(cfg, &data, &out)?,
                Dtype::F64 => pretrain::<f64>(cfg, &data, &out)?,
            }
        }
        Command::Train {
            config,
            data,
            mode,
            clip_ckpt,
            out,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(m) = mode {
                cfg.mode = m;
            }
            cfg.data_dir = Some(data.clone());
            let out = out.unwrap_or_else(|| data.join(format!("{}.ckpt", cfg.mode)));
            match cfg.precision {
                Dtype::F32 => train::<f32>(cfg, &data, clip_ckpt.as_deref(), &out)?,
                Dtype::F64 => train::<f64>(cfg, &data, clip_ckpt.as_deref(), &out)?,
            }
        }
        Command::Eval { ckpt, split, data } => {
            let m = match peek_dtype(&ckpt)? {
                Dtype::F32 => eval::<f32>(&ckpt, &split, data)?,
                Dtype::F64 => eval::<f64>(&ckpt, &split, data)?,
            };
            emit(&m);
        }
        Command::Ablate { config, data } => {
            let cfg = load_config(config.as_deref())?;
            let data = data
                .or_else(|| cfg.data_dir.clone())
                .context("pass --data or set data_dir in the config")?;
            match cfg.precision {
                Dtype::F32 => ablate::<f32>(cfg, &data)?,
                Dtype::F64 => ablate::<f64>(cfg, &data)?,
            }
        }
        Command::Keyframes { frames, k, seed } => {
            let loaded = load_frames(&frames)?;
            let sel = select_keyframes(&loaded, k, seed)?;
            for (index, score) in sel.indices.iter().zip(&sel.scores) {
                emit(&serde_json::json!({ "frame": index, "score": score }));
            }
        }
        Command::Gradcheck { seeds, tolerance } => {
            let mut failed = 0;
            for seed in 0..seeds {
                let r = gradcheck_seed(seed, Mode::Full)?;
                let pass = r.max_rel_error < tolerance;
                failed += usize::from(!pass);
                emit(&serde_json::json!({
                    "seed": seed,
                    "max_rel_error": r.max_rel_error,
                    "coordinates": r.coordinates,
                    "worst": r.worst,
                    "pass": pass,
                }));
            }
            if failed > 0 {
                bail!("{failed} of {seeds} geometries exceeded relative error {tolerance}");
            }
        }
    }
    Ok(())
}
