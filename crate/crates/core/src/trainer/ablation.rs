use serde::{Deserialize, Serialize};

use super::{train, TrainOptions, TrainerConfig, TrainingMode};
use crate::data::{GroundTruth, Volume};
use crate::eval::{evaluate, EvalReport, EvalSettings};
use crate::{Error, Result};

/// The four component toggles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Experiment {
    /// Plain backbone trained on patient labels copied to every slice.
    SliceBaseline = 1,
    /// Section pooling loss only.
    ClsOnly = 2,
    /// Noisy loss only.
    NoisyOnly = 3,
    /// Both losses.
    Full = 4,
}

impl Experiment {
    pub const ALL: [Experiment; 4] = [
        Experiment::SliceBaseline,
        Experiment::ClsOnly,
        Experiment::NoisyOnly,
        Experiment::Full,
    ];

    pub fn number(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            Experiment::SliceBaseline => "slice-baseline",
            Experiment::ClsOnly => "cls-only",
            Experiment::NoisyOnly => "noisy-only",
            Experiment::Full => "cls+noisy",
        }
    }

    /// `base` with this experiment's toggles applied.
    pub fn configure(self, base: &TrainerConfig) -> TrainerConfig {
        let mut c = base.clone();
        c.mode = TrainingMode::Mil;
        match self {
            Experiment::SliceBaseline => {
                c.mode = TrainingMode::SliceLabels;
            }
            Experiment::ClsOnly => {
                c.enable_cls_loss = true;
                c.enable_noisy_loss = false;
            }
            Experiment::NoisyOnly => {
                c.enable_cls_loss = false;
                c.enable_noisy_loss = true;
            }
            Experiment::Full => {
                c.enable_cls_loss = true;
                c.enable_noisy_loss = true;
            }
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub experiment: u8,
    pub name: String,
    pub patient_accuracy: Option<f64>,
    pub image_accuracy: Option<f64>,
    pub image_auc: Option<f64>,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, e: Experiment) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.experiment == e.number())
    }

    pub fn to_text(&self) -> String {
        let f = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{:.2}", 100.0 * v));
        let mut s = String::from("exp  name            patient acc  image acc  image auc\n");
        for r in &self.rows {
            s += &format!(
                "{:<4} {:<15} {:>11}  {:>9}  {:>9}\n",
                r.experiment,
                r.name,
                f(r.patient_accuracy),
                f(r.image_accuracy),
                f(r.image_auc)
            );
        }
        s
    }
}

pub fn ablation_row(e: Experiment, report: &EvalReport, final_loss: Option<f64>) -> AblationRow {
    AblationRow {
        experiment: e.number(),
        name: e.name().to_string(),
        patient_accuracy: report.patient.accuracy,
        image_accuracy: report.image.as_ref().and_then(|m| m.accuracy),
        image_auc: report.image.as_ref().and_then(|m| m.auc),
        final_loss,
    }
}

/// Trains and evaluates the four experiments on `train_set`/`test_set`.
pub fn ablation_suite(
    train_set: &[Volume],
    test_set: &[Volume],
    truth: Option<&GroundTruth>,
    base: &TrainerConfig,
) -> Result<AblationReport> {
    if test_set.is_empty() {
        return Err(Error::invalid("ablation needs a held-out split"));
    }
    let mut rows = Vec::new();
    for e in Experiment::ALL {
        let config = e.configure(base);
        log::info!("ablation experiment {} ({})", e.number(), e.name());
        let outcome = train(train_set, &config, TrainOptions::default())?;
        let report = evaluate(&outcome.state.model, test_set, truth, &EvalSettings::from_config(&config))?;
        rows.push(ablation_row(e, &report, outcome.history.last().map(|r| r.loss)));
    }
    Ok(AblationReport { rows })
}
