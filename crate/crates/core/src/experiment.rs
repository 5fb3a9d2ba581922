//! The augmentation comparison end to end: generate a cohort, train one
//! model with cut augmentation and one without, and score both on complete
//! and on synthetically cut test tractograms.

use serde::{Deserialize, Serialize};

use crate::context::{ContextDataset, ContextParams, Normalization};
use crate::error::{Error, Result};
use crate::eval::{default_scope, evaluate_split, table_csv, SplitMetrics, TableRow};
use crate::fovcut::{apply_cut, augment_training_set, sample_cut_plane, DEFAULT_MIN_SURVIVING_POINTS};
use crate::net::{predict, ModelConfig, ModelParams, TrainLog, TrainOutcome};
use crate::rng::substream;
use crate::synth::{generate_cohort, Cohort, CohortSpec};
use crate::tract::{brain_center, Tractogram};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub cohort: CohortSpec,
    /// `num_classes`, `n_points` and `normalization` are filled in from the
    /// cohort before training.
    pub model: ModelConfig,
    pub planes_per_subject: usize,
    pub min_surviving_points: usize,
}

impl ExperimentConfig {
    /// The default cohort with a network small enough for one CPU core.
    pub fn desk(seed: u64) -> ExperimentConfig {
        let cohort = crate::synth::default_spec(seed);
        let model = ModelConfig {
            k_local: 10,
            k_global: 10,
            repr_dim: 32,
            head_widths: vec![64, 64],
            learning_rate: 0.002,
            batch_size: 256,
            epochs: 8,
            seed,
            ..ModelConfig::new(cohort.bundles.len())
        };
        ExperimentConfig { cohort, model, planes_per_subject: 10, min_surviving_points: DEFAULT_MIN_SURVIVING_POINTS }
    }
}

/// Labels of every sample, in dataset order.
pub fn dataset_labels(d: &ContextDataset) -> Result<Vec<usize>> {
    d.samples().iter().enumerate().map(|(i, s)| s.label.ok_or(Error::MissingLabel { index: i })).collect()
}

/// Builds per-streamline contexts for `tractograms` with the model's
/// neighborhood sizes. Global draws use the config seed under `stream`.
pub fn contexts(tractograms: &[Tractogram], model: &ModelConfig, stream: u64) -> Result<ContextDataset> {
    let params = ContextParams { k_local: model.k_local, k_global: model.k_global, seed: model.seed ^ stream };
    ContextDataset::build(tractograms, params, &model.normalization)
}

/// Each subject cut once by a plane from substream `("test-plane", [i])`.
pub fn cut_test_set(subjects: &[Tractogram], seed: u64, min_surviving_points: usize) -> Result<Vec<Tractogram>> {
    subjects
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let center = brain_center(t)?;
            let plane = sample_cut_plane(&mut substream(seed, "test-plane", &[i as u64]), center, t.space_tag());
            Ok(apply_cut(t, &plane, min_surviving_points)?.tractogram)
        })
        .collect()
}

/// Originals plus `planes` cut copies of every subject, or the originals
/// alone when `fovca` is off.
pub fn training_set(subjects: &[Tractogram], planes: usize, seed: u64, min: usize, fovca: bool) -> Result<Vec<Tractogram>> {
    let planes = if fovca { planes } else { 0 };
    Ok(augment_training_set(subjects, planes, seed, min)?.tractograms.into_iter().map(|a| a.tractogram).collect())
}

#[derive(Clone, Debug)]
pub struct ArmResult {
    pub fovca: bool,
    pub config: ModelConfig,
    pub outcome: TrainOutcome,
    pub original: SplitMetrics,
    pub cut: SplitMetrics,
}

/// Scores `params` on tractograms of known labels.
pub fn score(params: &ModelParams, model: &ModelConfig, tractograms: &[Tractogram], stream: u64) -> Result<SplitMetrics> {
    let data = contexts(tractograms, model, stream)?;
    let truth = dataset_labels(&data)?;
    let pred = predict(params, &data, None)?;
    let status: Vec<_> = data.samples().iter().map(|s| s.cut_status).collect();
    evaluate_split(&pred, &truth, &status, model.num_classes, &default_scope(model.num_classes))
}

const STREAM_TRAIN: u64 = 1;
const STREAM_VAL: u64 = 2;
const STREAM_TEST: u64 = 3;

/// Trains and scores one arm. Validation data gets the same treatment as
/// the training data: cut copies with augmentation, originals without.
pub fn run_arm(cfg: &ExperimentConfig, cohort: &Cohort, norm: Normalization, fovca: bool) -> Result<ArmResult> {
    let mut model = cfg.model.clone();
    model.num_classes = cohort.manifest.class_names.len();
    model.n_points = cfg.cohort.n_points;
    model.normalization = norm;
    let seed = cfg.cohort.seed;
    let train = training_set(&cohort.train, cfg.planes_per_subject, seed, cfg.min_surviving_points, fovca)?;
    let val = training_set(&cohort.val, cfg.planes_per_subject, seed ^ 0x5eed, cfg.min_surviving_points, fovca)?;
    let train_data = contexts(&train, &model, STREAM_TRAIN)?;
    let val_data = contexts(&val, &model, STREAM_VAL)?;
    let train_labels = dataset_labels(&train_data)?;
    let val_labels = dataset_labels(&val_data)?;
    let outcome = crate::net::train(&model, &train_data, &train_labels, Some((&val_data, val_labels.as_slice())))?;
    let original = score(&outcome.best, &model, &cohort.test, STREAM_TEST)?;
    let cut_test = cut_test_set(&cohort.test, seed, cfg.min_surviving_points)?;
    let cut = score(&outcome.best, &model, &cut_test, STREAM_TEST)?;
    Ok(ArmResult { fovca, config: model, outcome, original, cut })
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub with_fovca: ArmResult,
    pub without_fovca: ArmResult,
}

impl ExperimentResult {
    pub fn table(&self) -> String {
        table_csv(&[
            TableRow { method: "without_fovca", original: Some(&self.without_fovca.original), cut: Some(&self.without_fovca.cut) },
            TableRow { method: "with_fovca", original: Some(&self.with_fovca.original), cut: Some(&self.with_fovca.cut) },
        ])
    }

    pub fn logs(&self) -> [&TrainLog; 2] {
        [&self.with_fovca.outcome.log, &self.without_fovca.outcome.log]
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let cohort = generate_cohort(&cfg.cohort)?;
    let norm = Normalization::fit(&cohort.train)?;
    Ok(ExperimentResult {
        with_fovca: run_arm(cfg, &cohort, norm, true)?,
        without_fovca: run_arm(cfg, &cohort, norm, false)?,
    })
}
