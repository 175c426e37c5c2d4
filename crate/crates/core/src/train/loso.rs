use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{train, LossCurve, TrainConfig};
use crate::data::{loso_folds, sub_seed, Dataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, truths_from_annotations, EvalConfig, EvalReport};
use crate::geometry::IouVariant;
use crate::network::NetworkConfig;
use crate::pipeline::{detect_all, Predictions};

/// Scoring options implied by a run configuration.
pub fn eval_config(config: &TrainConfig) -> EvalConfig {
    EvalConfig {
        num_categories: config.network.num_categories,
        spotting_only: config.network.spotting_only,
        detection_mode: config.eval.detection_mode,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub held_out_subject: String,
    pub test_videos: Vec<String>,
    pub curve: LossCurve,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LosoResult {
    pub folds: Vec<FoldResult>,
    /// Held-out predictions of every fold; each video appears once.
    pub predictions: Predictions,
    /// Scores of the pooled predictions.
    pub aggregate: EvalReport,
    pub wall_clock_seconds: f64,
}

/// One fold per subject: train on the others, detect on the held-out videos.
/// Folds run concurrently; each uses a seed derived from the run seed and the
/// held-out subject.
pub fn loso(dataset: &Dataset, config: &TrainConfig) -> Result<LosoResult> {
    config.validate()?;
    let clock = std::time::Instant::now();
    let folds = loso_folds(&dataset.annotations);
    let eval_cfg = eval_config(config);
    let outcomes: Vec<(FoldResult, Predictions)> = folds
        .par_iter()
        .map(|fold| -> Result<(FoldResult, Predictions)> {
            let mut fold_cfg = config.clone();
            fold_cfg.train.seed = sub_seed(config.train.seed, &format!("fold/{}", fold.held_out_subject));
            let outcome = train(&dataset.select(&fold.train), &fold_cfg)?;
            let test = dataset.select(&fold.test);
            let preds = detect_all(&test.features, &outcome.network, &config.detect)?;
            let report = evaluate(&preds, &truths_from_annotations(&test.annotations), &eval_cfg);
            Ok((
                FoldResult {
                    held_out_subject: fold.held_out_subject.clone(),
                    test_videos: test.annotations.iter().map(|a| a.video_id.clone()).collect(),
                    curve: LossCurve::from(&outcome),
                    report,
                },
                preds,
            ))
        })
        .collect::<Result<_>>()?;
    let mut predictions = Predictions::new();
    let mut results = Vec::with_capacity(outcomes.len());
    for (fold, preds) in outcomes {
        predictions.extend(preds);
        results.push(fold);
    }
    let aggregate = evaluate(&predictions, &truths_from_annotations(&dataset.annotations), &eval_cfg);
    Ok(LosoResult {
        folds: results,
        predictions,
        aggregate,
        wall_clock_seconds: clock.elapsed().as_secs_f64(),
    })
}

/// Architecture and objective variations compared against the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    Full,
    NoSegAtt,
    NoSwAtt,
    NoBoth,
    SpottingOnly,
    CoupledHead,
    ConfBranch,
    LossIou,
    LossGiou,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 9] = [
        Self::Full,
        Self::NoSegAtt,
        Self::NoSwAtt,
        Self::NoBoth,
        Self::SpottingOnly,
        Self::CoupledHead,
        Self::ConfBranch,
        Self::LossIou,
        Self::LossGiou,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoSegAtt => "no_seg_att",
            Self::NoSwAtt => "no_sw_att",
            Self::NoBoth => "no_both",
            Self::SpottingOnly => "spotting_only",
            Self::CoupledHead => "coupled_head",
            Self::ConfBranch => "conf_branch",
            Self::LossIou => "loss_iou",
            Self::LossGiou => "loss_giou",
        }
    }

    /// The network configuration of this variant.
    pub fn apply(self, base: &NetworkConfig) -> NetworkConfig {
        let mut c = base.clone();
        match self {
            Self::Full => {}
            Self::NoSegAtt => c.use_segment_attention = false,
            Self::NoSwAtt => c.use_window_attention = false,
            Self::NoBoth => {
                c.use_segment_attention = false;
                c.use_window_attention = false;
            }
            Self::SpottingOnly => c.spotting_only = true,
            Self::CoupledHead => c.decoupled_head = false,
            Self::ConfBranch => c.with_confidence_branch = true,
            Self::LossIou => c.loss_variant = IouVariant::Iou,
            Self::LossGiou => c.loss_variant = IouVariant::Giou,
        }
        c
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub result: LosoResult,
}

/// Runs [`loso`] for each variant with the same seed.
pub fn ablate(dataset: &Dataset, config: &TrainConfig, variants: &[AblationVariant]) -> Result<Vec<AblationRow>> {
    variants
        .iter()
        .map(|&variant| {
            let mut cfg = config.clone();
            cfg.network = variant.apply(&config.network);
            Ok(AblationRow {
                variant,
                result: loso(dataset, &cfg)?,
            })
        })
        .collect()
}

/// Reproducible record of a run. Wall-clock time is kept out of the
/// serialized form so that identical runs produce identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub seed: u64,
    pub curve: Option<LossCurve>,
    pub folds: Vec<FoldResult>,
    pub aggregate: Option<EvalReport>,
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

impl RunManifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}
