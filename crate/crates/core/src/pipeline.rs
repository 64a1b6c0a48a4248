//! The full experiment: generate data, train the variants, fine-tune and
//! compare.

use crate::checkpoint::{Checkpoint, CheckpointMeta, Stage};
use crate::config::Config;
use crate::dpo::{build_preference_pairs, finetune, DpoOutcome};
use crate::error::{Error, Result};
use crate::eval::{ablation_suite, AblationCheckpoints, AblationResult};
use crate::model::{Model, ModelConfig, RtgVariant};
use crate::training::{train_with, EpochStats, TrainConfig, TrainOutcome};
use crate::trajgen::{dataset_seeds, generate_dataset, Dataset};

/// Trains one stage-1 checkpoint; `on_epoch` sees every epoch's stats.
pub fn train_checkpoint(
    dataset: &Dataset,
    model: &ModelConfig,
    train: &TrainConfig,
    on_epoch: impl FnMut(&EpochStats),
) -> Result<(Checkpoint, TrainOutcome)> {
    let init = Model::new(model.clone(), train.seed)?;
    let outcome = train_with(&dataset.stage1, init, train, on_epoch)?;
    let ckpt = Checkpoint {
        model: outcome.best.clone(),
        meta: CheckpointMeta {
            stage: Stage::Stage1,
            rtg: train.rtg,
            rtg_scale: outcome.rtg_scale,
            max_episode_return: dataset.manifest.max_episode_return,
            best_loss: outcome.best_loss.is_finite().then_some(outcome.best_loss),
            seed: train.seed,
        },
    };
    Ok((ckpt, outcome))
}

/// Fine-tunes `stage1` on the dataset's preference pool.
pub fn finetune_checkpoint(dataset: &Dataset, stage1: &Checkpoint, config: &Config) -> Result<DpoOutcome> {
    let pairs = build_preference_pairs(&dataset.dpo_pool, config.dpo.delta);
    finetune(stage1, &dataset.stage1, &pairs, &config.dpo)
}

/// Everything the experiment produced.
pub struct Experiment {
    pub dataset: Dataset,
    pub checkpoints: AblationCheckpoints,
    pub ablation: AblationResult,
}

/// Progress messages from [`run_experiment`].
pub enum Progress<'a> {
    Stage(&'a str),
    Epoch(&'a str, &'a EpochStats),
}

pub fn run_experiment(config: &Config, mut progress: impl FnMut(Progress<'_>)) -> Result<Experiment> {
    config.validate()?;
    progress(Progress::Stage("generating trajectories"));
    let seeds = dataset_seeds(config.gen.seed_base, config.gen.episodes);
    let dataset = generate_dataset(&config.env, &config.controllers, &seeds, config.workers())?;

    let mut train_variant = |label: &str, rtg: RtgVariant, use_gca: bool| -> Result<Checkpoint> {
        progress(Progress::Stage(label));
        let model = ModelConfig {
            use_gca,
            ..config.model.clone()
        };
        let train = TrainConfig {
            rtg,
            ..config.train.clone()
        };
        let (ckpt, outcome) = train_checkpoint(&dataset, &model, &train, |e| progress(Progress::Epoch(label, e)))?;
        if let Some(reason) = outcome.aborted {
            return Err(Error::NonFinite(format!("{label}: {reason}")));
        }
        Ok(ckpt)
    };
    let stage1 = train_variant("stage1", RtgVariant::Memoryless, config.model.use_gca)?;
    let his_rtg = train_variant("his_rtg", RtgVariant::Historical, config.model.use_gca)?;
    let no_gca = train_variant("no_gca", RtgVariant::Memoryless, false)?;

    progress(Progress::Stage("preference fine-tuning"));
    let full = finetune_checkpoint(&dataset, &stage1, config)?.checkpoint;

    progress(Progress::Stage("evaluating"));
    let checkpoints = AblationCheckpoints {
        full,
        stage1,
        his_rtg,
        no_gca,
    };
    let ablation = ablation_suite(
        &config.env,
        &config.controllers,
        &config.eval,
        &config.eval.seeds(),
        &checkpoints,
    )?;
    Ok(Experiment {
        dataset,
        checkpoints,
        ablation,
    })
}
