use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{RunConfig, Setting, Task, TrainSection};
use super::eval::{eval_pairs, fewshot_eval, supervised_eval, EvalRow, TOP1};
use super::stages::{run_stage, StageKind, StageLog, StageSpec};
use crate::dataeng::{Dataset, Split};
use crate::error::{Error, Result};
use crate::modality::ModalityMask;
use crate::model::Model;

/// Offsets that give model init, fusion reset and training their own streams.
const FUSION_SEED_SALT: u64 = 0x5EED_F05E;
const TRAIN_SEED_SALT: u64 = 0x7AA1_0000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub setting: Setting,
    pub task: Task,
    pub stages: Vec<StageSpec>,
    /// Modalities whose labeled data any stage may read.
    pub labeled_mask: ModalityMask,
}

impl PipelineSpec {
    /// The stage sequence of a (setting, task) pair.
    ///
    /// With `use_align` off the supervised alignment term and the
    /// unsupervised alignment stage are dropped; with `use_proto` off the
    /// meta-train stage is.
    pub fn new(setting: Setting, task: Task, train: &TrainSection) -> Result<Self> {
        use StageKind::*;
        let all = train.modalities;
        if all != ModalityMask::ALL && task != Task::Regular {
            return Err(Error::Config(format!(
                "modalities {all} can only be restricted for the regular task"
            )));
        }
        let mut stages = Vec::new();
        let mut labeled_mask = all;
        match (setting, task) {
            (Setting::Supervised, Task::Zeroshot) => {
                labeled_mask = train.zeroshot_train_mask;
                if labeled_mask == all || labeled_mask.is_empty() {
                    return Err(Error::Config(format!(
                        "zero-shot training mask {labeled_mask} must leave a modality out"
                    )));
                }
                if train.use_align {
                    stages.push(StageSpec::new(MultimodalUnsupervisedPretrain, all));
                }
                stages.push(StageSpec::new(MultimodalSupervisedTrain, labeled_mask));
            }
            (Setting::Supervised, _) => {
                stages.push(StageSpec::new(UnimodalSupervisedPretrain, all));
                stages.push(StageSpec {
                    align: train.use_align,
                    ..StageSpec::new(MultimodalSupervisedTrain, all)
                });
            }
            (Setting::Fewshot, _) => {
                stages.push(StageSpec::new(UnimodalSupervisedPretrain, all));
                stages.push(StageSpec {
                    align: train.use_align,
                    ..StageSpec::new(MultimodalSupervisedTrain, all)
                });
                if train.use_proto {
                    stages.push(StageSpec {
                        meta_task: Some(task),
                        ..StageSpec::new(MultimodalMetaTrain, all)
                    });
                }
            }
        }
        if train.freeze_encoders {
            for st in stages.iter_mut().skip(1) {
                st.train_encoders = false;
            }
        }
        Ok(PipelineSpec {
            setting,
            task,
            stages,
            labeled_mask,
        })
    }

    pub fn labels(&self) -> Vec<&'static str> {
        self.stages.iter().map(StageSpec::label).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub pipeline: PipelineSpec,
    pub config: RunConfig,
    pub config_hash: String,
    pub seed: u64,
    pub stages: Vec<StageLog>,
    pub rows: Vec<EvalRow>,
    pub wall_time_secs: f64,
}

/// Runs the training stages of `spec` from a fresh model.
pub fn train_pipeline(
    spec: &PipelineSpec,
    ds: &Dataset,
    cfg: &RunConfig,
    seed: u64,
) -> Result<(Model, Vec<StageLog>)> {
    cfg.validate()?;
    let mut model = Model::new(cfg.model.model_config(ds)?, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ TRAIN_SEED_SALT);
    let mut logs = Vec::with_capacity(spec.stages.len());
    let mut fusion_fresh = false;
    for stage in &spec.stages {
        if stage.kind.is_multimodal() && !fusion_fresh {
            model.reset_fusion(seed ^ FUSION_SEED_SALT)?;
            fusion_fresh = true;
        }
        logs.push(run_stage(stage, &mut model, ds, &cfg.train, &mut rng)?);
    }
    Ok((model, logs))
}

/// Evaluation rows of a trained model for `spec`'s task.
pub fn evaluate_pipeline(
    spec: &PipelineSpec,
    model: &Model,
    ds: &Dataset,
    cfg: &RunConfig,
    seed: u64,
) -> Result<Vec<EvalRow>> {
    let mut rows = Vec::new();
    for (train, test) in eval_pairs(spec.setting, spec.task, &cfg.train) {
        let row = match spec.setting {
            Setting::Supervised => {
                let r = supervised_eval(model, ds, Split::BaseTest, test)?;
                EvalRow {
                    train_mask: train,
                    test_mask: test,
                    metric: TOP1.into(),
                    value: r.accuracy,
                    ci: r.ci95,
                    n: r.n,
                }
            }
            Setting::Fewshot => {
                // every row uses the same episodes, so rows are paired
                let r = fewshot_eval(model, ds, &cfg.eval, train, test, seed)?;
                EvalRow {
                    train_mask: train,
                    test_mask: test,
                    metric: TOP1.into(),
                    value: r.mean,
                    ci: r.ci95,
                    n: r.episodes,
                }
            }
        };
        log::info!(
            "{} {} {} -> {}: {:.4}",
            spec.setting,
            spec.task,
            train,
            test,
            row.value
        );
        rows.push(row);
    }
    Ok(rows)
}

/// Trains and evaluates one (setting, task) pipeline.
pub fn run_pipeline(
    setting: Setting,
    task: Task,
    ds: &Dataset,
    cfg: &RunConfig,
    seed: u64,
) -> Result<(RunRecord, Model)> {
    let start = Instant::now();
    let spec = PipelineSpec::new(setting, task, &cfg.train)?;
    let (model, stages) = train_pipeline(&spec, ds, cfg, seed)?;
    let rows = evaluate_pipeline(&spec, &model, ds, cfg, seed)?;
    let record = RunRecord {
        pipeline: spec,
        config: *cfg,
        config_hash: cfg.hash(),
        seed,
        stages,
        rows,
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    Ok((record, model))
}
