//! Training phases: coreference labeling with pseudo labels (phase 0),
//! joint sparse-annotation training (phase 1), dense-relevance finetuning
//! (phase 2), and score ensembling.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::SyntheticConfig;
use crate::error::{Error, Result};
use crate::numerics::AdamConfig;
use crate::pruning::PruneRule;
use crate::taskheads::LossWeights;

mod model;
mod pcr;
mod rank;

pub use model::{Model, ModelConfig, ModelSettings};
pub use pcr::{
    bootstrap_pseudo_labels, clusters_from_links, dialog_pcr_loss, evaluate_pcr,
    merge_pseudo_labels, pcr_loss_value, predict_antecedents, resolve, strip_labels, train_phase0,
    Bootstrap, TrainReport,
};
pub use rank::{
    corrected_relevance, ensemble, evaluate, phase1_terms, phase2_round_loss, rank_dialogs,
    round_input, score_candidates, summarize_rounds, train_phase1, train_phase2, Phase1Terms,
    RankEvaluation, RoundScores,
};

/// Where the coreference scorer reads its features in phase 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PcrModeKind {
    #[default]
    LastLayer,
    SelectedHeads,
}

/// Hyperparameters of one training phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_nsp: f64,
    pub lambda_mtm: f64,
    pub lambda_pcr: f64,
    pub lr: f64,
    /// Decoupled weight decay of the optimizer.
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Wrong candidates sampled per ground-truth answer.
    pub n_negatives: usize,
    /// Margin a head must exceed to be selected.
    pub a_thres: f64,
    pub pcr_mode: PcrModeKind,
    pub prune_rule: PruneRule,
    pub mask_rate: f64,
    /// Feed the coreference scorer constant encoder features, so its loss
    /// trains only its own parameters.
    pub detach_pcr: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            lambda_nsp: w.nsp,
            lambda_mtm: w.mtm,
            lambda_pcr: w.pcr,
            lr: 1e-3,
            weight_decay: 0.0,
            epochs: 10,
            batch_size: 8,
            seed: 0,
            n_negatives: 3,
            a_thres: 0.1,
            pcr_mode: PcrModeKind::LastLayer,
            prune_rule: PruneRule::All,
            mask_rate: 0.15,
            detach_pcr: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_nsp, self.lambda_mtm, self.lambda_pcr];
        if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative, got {lambdas:?}"
            )));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if !(self.weight_decay.is_finite()
            && self.weight_decay >= 0.0
            && self.lr * self.weight_decay < 1.0)
        {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative with lr * weight_decay < 1, got {}",
                self.weight_decay
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be at least 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return Err(Error::Config(format!(
                "mask_rate must lie in [0, 1], got {}",
                self.mask_rate
            )));
        }
        if self.a_thres.is_nan() {
            return Err(Error::Config("a_thres is NaN".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            nsp: self.lambda_nsp,
            mtm: self.lambda_mtm,
            pcr: self.lambda_pcr,
        }
    }
}

/// Toy corpus, model geometry and one section per phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub synthetic: SyntheticConfig,
    pub model: ModelSettings,
    pub phase0: TrainConfig,
    pub phase1: TrainConfig,
    pub phase2: TrainConfig,
}

/// Settings tuned for the synthetic corpus.
impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            synthetic: SyntheticConfig::default(),
            model: ModelSettings::default(),
            phase0: TrainConfig {
                lr: 2e-3,
                batch_size: 4,
                ..TrainConfig::default()
            },
            phase1: TrainConfig {
                lr: 2e-3,
                ..TrainConfig::default()
            },
            phase2: TrainConfig {
                lr: 1e-3,
                epochs: 2,
                ..TrainConfig::default()
            },
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.synthetic.validate()?;
        self.phase0.validate()?;
        self.phase1.validate()?;
        self.phase2.validate()
    }
}

/// One row of a training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: String,
    pub epoch: usize,
    pub loss: f64,
    pub metric: String,
    pub value: f64,
}

impl EpochLog {
    pub fn new(phase: &str, epoch: usize, loss: f64, metric: &str, value: f64) -> Self {
        Self {
            phase: phase.into(),
            epoch,
            loss,
            metric: metric.into(),
            value,
        }
    }
}

pub fn epoch_log_tsv(rows: &[EpochLog]) -> String {
    let mut out = String::from("phase\tepoch\tloss\tmetric\tvalue\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            r.phase, r.epoch, r.loss, r.metric, r.value
        );
    }
    out
}
