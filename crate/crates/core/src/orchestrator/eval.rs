use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{EvalSection, Setting, Task, TrainSection};
use crate::dataeng::{Dataset, Split};
use crate::episodic::{run_fewshot_suite, EpisodeSpec, SuiteResult};
use crate::error::{Error, Result};
use crate::modality::{Modality, ModalityMask};
use crate::model::Model;

pub const TOP1: &str = "top1";

/// One evaluated (train/support mask, test/query mask) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub train_mask: ModalityMask,
    pub test_mask: ModalityMask,
    pub metric: String,
    pub value: f64,
    /// Half-width of the 95% interval.
    pub ci: f64,
    /// Test examples (supervised) or episodes (few-shot).
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupervisedResult {
    pub accuracy: f64,
    pub n: usize,
    /// Binomial normal-approximation half-width.
    pub ci95: f64,
}

/// Top-1 accuracy of the fused classifier on `split` under `test_mask`.
pub fn supervised_eval(
    model: &Model,
    ds: &Dataset,
    split: Split,
    test_mask: ModalityMask,
) -> Result<SupervisedResult> {
    if !split.is_base() {
        return Err(Error::Invalid(format!(
            "supervised eval needs a base split, got {split}"
        )));
    }
    test_mask.ensure_non_empty("test mask")?;
    let idx = ds.indices(split);
    if idx.is_empty() {
        return Err(Error::Data(format!("{split} split is empty")));
    }
    let hits: Vec<bool> = idx
        .par_iter()
        .map(|&i| {
            let ex = &ds.examples[i];
            let y = ex
                .label
                .and_then(|l| ds.base_class_index(l))
                .ok_or_else(|| Error::Data(format!("{} has no base-class label", ex.id)))?;
            let logits = model.classify(&ex.restricted(test_mask), test_mask)?;
            logits.ensure_finite("classifier logits")?;
            Ok(argmax(logits.data()) == y)
        })
        .collect::<Result<_>>()?;
    let n = hits.len();
    let p = hits.iter().filter(|&&h| h).count() as f64 / n as f64;
    Ok(SupervisedResult {
        accuracy: p,
        n,
        ci95: 1.96 * (p * (1.0 - p) / n as f64).sqrt(),
    })
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Few-shot accuracy on novel classes for one mask pair.
pub fn fewshot_eval(
    model: &Model,
    ds: &Dataset,
    eval: &EvalSection,
    support: ModalityMask,
    query: ModalityMask,
    seed: u64,
) -> Result<SuiteResult> {
    let spec = EpisodeSpec {
        n_way: eval.n_way,
        k_shot: eval.k_shot,
        q_queries: eval.q_queries,
        support_mask: support,
        query_mask: query,
        class_pool: Split::Novel,
    };
    run_fewshot_suite(model, ds, &spec, eval.episodes, seed, &eval.finetune)
}

/// Task whose contract a mask pair satisfies, if any.
pub fn infer_task(train: ModalityMask, test: ModalityMask) -> Option<Task> {
    [Task::Regular, Task::Missing, Task::Zeroshot]
        .into_iter()
        .find(|t| t.allows(train, test))
}

/// Mask pairs evaluated after training, in report order.
pub fn eval_pairs(
    setting: Setting,
    task: Task,
    train: &TrainSection,
) -> Vec<(ModalityMask, ModalityMask)> {
    let zeroshot_train_mask = train.zeroshot_train_mask;
    use Modality::{Audio, Imu, Video};
    let all = ModalityMask::ALL;
    let m = ModalityMask::from_modalities;
    match (setting, task) {
        (_, Task::Regular) => vec![(train.modalities, train.modalities)],
        (Setting::Supervised, Task::Missing) => {
            vec![
                (all, m(&[Video, Audio])),
                (all, m(&[Audio, Imu])),
                (all, m(&[Video, Imu])),
            ]
        }
        (Setting::Fewshot, Task::Missing) => all
            .non_empty_subsets()
            .into_iter()
            .filter(|s| *s != all)
            .map(|s| (all, s))
            .collect(),
        (Setting::Supervised, Task::Zeroshot) => zeroshot_train_mask
            .complement()
            .non_empty_subsets()
            .into_iter()
            .map(|s| (zeroshot_train_mask, s))
            .collect(),
        (Setting::Fewshot, Task::Zeroshot) => vec![
            (m(&[Audio]), m(&[Video])),
            (m(&[Imu]), m(&[Video])),
            (m(&[Audio, Imu]), m(&[Video])),
            (m(&[Video]), m(&[Audio])),
            (m(&[Video]), m(&[Imu])),
            (m(&[Video]), m(&[Audio, Imu])),
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eval_pairs_conform_to_their_task() {
        let mut section = TrainSection::default();
        let train = ModalityMask::parse_list("audio,imu").unwrap();
        section.zeroshot_train_mask = train;
        for setting in [Setting::Supervised, Setting::Fewshot] {
            for task in [Task::Regular, Task::Missing, Task::Zeroshot] {
                let pairs = eval_pairs(setting, task, &section);
                assert!(!pairs.is_empty());
                for (s, q) in pairs {
                    assert!(task.allows(s, q), "{setting} {task} {s} {q}");
                }
            }
        }
        assert_eq!(
            eval_pairs(Setting::Fewshot, Task::Missing, &section).len(),
            6
        );
        assert_eq!(
            eval_pairs(Setting::Supervised, Task::Zeroshot, &section),
            vec![(train, ModalityMask::single(Modality::Video))]
        );
        section.modalities = ModalityMask::single(Modality::Imu);
        assert_eq!(
            eval_pairs(Setting::Fewshot, Task::Regular, &section),
            vec![(section.modalities, section.modalities)]
        );
    }

    #[test]
    fn infer_task_classifies_pairs() {
        let p = |s: &str| ModalityMask::parse_list(s).unwrap();
        assert_eq!(
            infer_task(ModalityMask::ALL, ModalityMask::ALL),
            Some(Task::Regular)
        );
        assert_eq!(
            infer_task(p("video,audio"), p("audio")),
            Some(Task::Missing)
        );
        assert_eq!(infer_task(p("video"), p("audio,imu")), Some(Task::Zeroshot));
        assert_eq!(infer_task(p("video,audio"), ModalityMask::ALL), None);
        assert_eq!(infer_task(p("video,audio"), p("audio,imu")), None);
    }
}
