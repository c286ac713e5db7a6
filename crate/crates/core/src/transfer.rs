//! Sequential train/retrain/test protocol: train on one dataset, continue
//! training the same weights on later ones, then measure every test split.
//! Row names follow the Tr/R/Te convention, so the forgetting story is
//! readable straight off the results matrix.

use crate::metrics::{aggregate, AggregateMetrics, MetricsError};
use crate::phantom::PhantomVolume;
use crate::preprocess::{
    samples_from_volumes, split_dataset, ChannelBank, FilteredSlide, PreprocessError, Sample,
    SampleMode, SlideId, SplitSpec,
};
use crate::segnet::{
    evaluate_samples, init_unet, train, ParamSet, SegnetError, TrainConfig, TrainLog, UNetConfig,
};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TransferError {
    #[error("malformed tag {0:?}: tags must be nonempty and free of underscores")]
    MalformedTag(String),
    #[error("unknown dataset tag {0:?}")]
    UnknownTag(String),
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("no matrix row for test tag {0:?}")]
    MissingRow(String),
    #[error("stage {stage}: {source}")]
    Stage {
        stage: usize,
        #[source]
        source: SegnetError,
    },
    #[error(transparent)]
    Segnet(#[from] SegnetError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
}

fn check_tag(tag: &str) -> Result<(), TransferError> {
    if tag.is_empty() || tag.contains('_') {
        return Err(TransferError::MalformedTag(tag.to_string()));
    }
    Ok(())
}

/// Lineage part of a model name: `Tr{t}` plus `_R_{r}` per retrain, or
/// `_R_None` when there were none.
pub fn lineage_name(train_tag: &str, retrain_tags: &[String]) -> Result<String, TransferError> {
    check_tag(train_tag)?;
    let mut name = format!("Tr{train_tag}");
    if retrain_tags.is_empty() {
        name.push_str("_R_None");
    } else {
        for r in retrain_tags {
            check_tag(r)?;
            name.push_str(&format!("_R_{r}"));
        }
    }
    Ok(name)
}

/// Full row name: lineage plus the test tag.
pub fn plan_name(
    train_tag: &str,
    retrain_tags: &[String],
    test_tag: &str,
) -> Result<String, TransferError> {
    check_tag(test_tag)?;
    Ok(format!("{}_Te{test_tag}", lineage_name(train_tag, retrain_tags)?))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub init: u64,
    pub stages: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    #[serde(rename = "train")]
    pub train_tag: String,
    #[serde(rename = "retrains")]
    pub retrain_tags: Vec<String>,
    #[serde(rename = "tests")]
    pub test_tags: Vec<String>,
    pub stage_epochs: Vec<usize>,
    pub seeds: StageSeeds,
}

impl ExperimentPlan {
    pub fn stage_count(&self) -> usize {
        1 + self.retrain_tags.len()
    }

    pub fn validate(&self) -> Result<(), TransferError> {
        check_tag(&self.train_tag)?;
        for t in self.retrain_tags.iter().chain(&self.test_tags) {
            check_tag(t)?;
        }
        if self.test_tags.is_empty() {
            return Err(TransferError::InvalidPlan("no test tags".into()));
        }
        if self.stage_epochs.len() != self.stage_count() {
            return Err(TransferError::InvalidPlan(format!(
                "stage_epochs has {} entries for {} stages",
                self.stage_epochs.len(),
                self.stage_count()
            )));
        }
        if self.seeds.stages.len() != self.stage_count() {
            return Err(TransferError::InvalidPlan(format!(
                "seeds.stages has {} entries for {} stages",
                self.seeds.stages.len(),
                self.stage_count()
            )));
        }
        Ok(())
    }
}

/// Train/val/test samples of one registered dataset.
#[derive(Debug, Clone, Default)]
pub struct SplitSamples {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl SplitSamples {
    /// Assemble splits directly from generated phantom volumes.
    pub fn from_phantom(
        volumes: &[PhantomVolume],
        tag: &str,
        bank: &ChannelBank,
        side: usize,
        split: &SplitSpec,
        mode: SampleMode,
    ) -> Result<SplitSamples, TransferError> {
        let mut all: Vec<Sample> = Vec::new();
        for (i, v) in volumes.iter().enumerate() {
            all.extend(samples_from_volumes(
                &v.ct, &v.lung, &v.lesion, tag, i, bank, side, mode,
            )?);
        }
        let filtered: Vec<FilteredSlide> = all
            .iter()
            .map(|s| FilteredSlide {
                slide_id: s.slide_id.clone(),
                has_lesion: s.has_lesion,
            })
            .collect();
        let splits = split_dataset(&filtered, split)?;
        let mut by_id: BTreeMap<SlideId, Sample> =
            all.into_iter().map(|s| (s.slide_id.clone(), s)).collect();
        let mut pick = |ids: &[SlideId]| -> Vec<Sample> {
            ids.iter()
                .map(|id| by_id.remove(id).expect("split id from this dataset"))
                .collect()
        };
        Ok(SplitSamples {
            train: pick(&splits.train),
            val: pick(&splits.val),
            test: pick(&splits.test),
        })
    }
}

/// Read-only map from dataset tag to its splits.
#[derive(Debug, Default)]
pub struct DatasetRegistry {
    datasets: BTreeMap<String, SplitSamples>,
}

impl DatasetRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, tag: impl Into<String>, splits: SplitSamples) {
        self.datasets.insert(tag.into(), splits);
    }

    pub fn get(&self, tag: &str) -> Result<&SplitSamples, TransferError> {
        self.datasets
            .get(tag)
            .ok_or_else(|| TransferError::UnknownTag(tag.to_string()))
    }
}

/// One trained model chain: the checkpoint and log of every stage.
#[derive(Debug, Clone)]
pub struct ModelLineage {
    pub name: String,
    pub checkpoints: Vec<ParamSet<f32>>,
    pub logs: Vec<TrainLog>,
    pub seeds: StageSeeds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub name: String,
    pub test_tag: String,
    pub metrics: AggregateMetrics,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ResultsMatrix {
    pub rows: Vec<MatrixRow>,
}

impl ResultsMatrix {
    pub fn row_for_test(&self, test_tag: &str) -> Result<&MatrixRow, TransferError> {
        self.rows
            .iter()
            .find(|r| r.test_tag == test_tag)
            .ok_or_else(|| TransferError::MissingRow(test_tag.to_string()))
    }
}

pub const PREDICT_THRESHOLD: f64 = 0.5;

/// Execute a plan: train stage 0 from a fresh init, resume each retrain
/// stage from the previous checkpoint with a fresh optimizer, then evaluate
/// the final model on every requested test split.
pub fn run_experiment(
    plan: &ExperimentPlan,
    registry: &DatasetRegistry,
    net_config: &UNetConfig,
    train_defaults: &TrainConfig,
) -> Result<(ModelLineage, ResultsMatrix), TransferError> {
    plan.validate()?;
    for tag in std::iter::once(&plan.train_tag)
        .chain(&plan.retrain_tags)
        .chain(&plan.test_tags)
    {
        registry.get(tag)?;
    }

    let mut checkpoints = Vec::with_capacity(plan.stage_count());
    let mut logs = Vec::with_capacity(plan.stage_count());
    let mut params = init_unet::<f32>(net_config, plan.seeds.init)?;

    for stage in 0..plan.stage_count() {
        let tag = if stage == 0 {
            &plan.train_tag
        } else {
            &plan.retrain_tags[stage - 1]
        };
        let data = registry.get(tag)?;
        let cfg = TrainConfig {
            max_epochs: plan.stage_epochs[stage],
            seed: plan.seeds.stages[stage],
            ..train_defaults.clone()
        };
        let (best, log) = train(params, &data.train, &data.val, &cfg)
            .map_err(|source| TransferError::Stage { stage, source })?;
        checkpoints.push(best.clone());
        logs.push(log);
        params = best;
    }

    let mut matrix = ResultsMatrix::default();
    for test_tag in &plan.test_tags {
        let data = registry.get(test_tag)?;
        let (rows, flags) = evaluate_samples(&params, &data.test, PREDICT_THRESHOLD)?;
        let metrics = aggregate(&rows, &flags)?;
        matrix.rows.push(MatrixRow {
            name: plan_name(&plan.train_tag, &plan.retrain_tags, test_tag)?,
            test_tag: test_tag.clone(),
            metrics,
        });
    }

    Ok((
        ModelLineage {
            name: lineage_name(&plan.train_tag, &plan.retrain_tags)?,
            checkpoints,
            logs,
            seeds: plan.seeds.clone(),
        },
        matrix,
    ))
}

/// F1 difference on one test tag between two matrices; negative means the
/// later model forgot.
pub fn forgetting_delta(
    before: &ResultsMatrix,
    after: &ResultsMatrix,
    test_tag: &str,
) -> Result<f64, TransferError> {
    let b = before.row_for_test(test_tag)?;
    let a = after.row_for_test(test_tag)?;
    Ok(a.metrics.f1 - b.metrics.f1)
}

/// Table-2-style CSV: name, the four metrics, and the slide count.
pub fn matrix_csv(matrix: &ResultsMatrix) -> String {
    let mut out = String::from("name,accuracy,precision,recall,f1,slides\n");
    for row in &matrix.rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{}\n",
            row.name,
            row.metrics.accuracy,
            row.metrics.precision,
            row.metrics.recall,
            row.metrics.f1,
            row.metrics.slide_count
        ));
    }
    out
}
