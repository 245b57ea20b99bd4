//! Training modes, the training loop, evaluation and run artifacts.

mod checkpoint;
mod eval;
mod model;
mod run_dir;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT};
pub use eval::{evaluate, EvalReport, LanguageScores};
pub use model::{Model, Prediction};
pub use run_dir::{read_history_csv, write_run_dir, RunFiles};
pub use train::{train, EpochRecord, History, Phase, StepRecord};

use serde::{Deserialize, Serialize};

use crate::data::Corpus;
use crate::encoder::Preset;
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, OneCycleSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Task loss on labeled target-language data.
    Target,
    /// Task loss on source data only.
    ZeroShot,
    /// Task loss on source plus labeled target data.
    TranslateTrain,
    /// Task loss on source plus weighted CLS alignment on paired targets.
    #[serde(rename = "xeroalign")]
    XeroAlign,
    /// Alignment only for the first half of the epochs, then task only.
    #[serde(rename = "xeroalign_seq_align_first")]
    XeroAlignSeqAlignFirst,
    /// Task only for the first half of the epochs, then alignment only.
    #[serde(rename = "xeroalign_seq_task_first")]
    XeroAlignSeqTaskFirst,
    /// Joint alignment that also pairs unlabeled dev and test utterances.
    #[serde(rename = "xeroalign_unlabeled_eval")]
    XeroAlignUnlabeledEval,
}

impl Mode {
    pub const ALL: [Mode; 7] = [
        Mode::Target,
        Mode::ZeroShot,
        Mode::TranslateTrain,
        Mode::XeroAlign,
        Mode::XeroAlignSeqAlignFirst,
        Mode::XeroAlignSeqTaskFirst,
        Mode::XeroAlignUnlabeledEval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Target => "target",
            Mode::ZeroShot => "zero_shot",
            Mode::TranslateTrain => "translate_train",
            Mode::XeroAlign => "xeroalign",
            Mode::XeroAlignSeqAlignFirst => "xeroalign_seq_align_first",
            Mode::XeroAlignSeqTaskFirst => "xeroalign_seq_task_first",
            Mode::XeroAlignUnlabeledEval => "xeroalign_unlabeled_eval",
        }
    }

    pub fn parse(s: &str) -> Option<Mode> {
        Mode::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn is_alignment(self) -> bool {
        matches!(
            self,
            Mode::XeroAlign
                | Mode::XeroAlignSeqAlignFirst
                | Mode::XeroAlignSeqTaskFirst
                | Mode::XeroAlignUnlabeledEval
        )
    }

    /// Whether training may read target-language labels.
    pub fn reads_target_labels(self) -> bool {
        matches!(self, Mode::Target | Mode::TranslateTrain)
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        let d = OneCycleSchedule::new(1.0, 1);
        ScheduleConfig {
            pct_start: d.pct_start,
            div_factor: d.div_factor,
            final_div_factor: d.final_div_factor,
        }
    }
}

fn default_epochs() -> usize {
    10
}

fn default_batch_size() -> usize {
    32
}

fn default_lambda() -> f64 {
    1.0
}

fn default_min_count() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Weight of the alignment loss.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub preset: Preset,
    /// Peak learning rate; the preset default when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_lr: Option<f64>,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Target languages paired for alignment; all of them when empty.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub align_languages: Vec<String>,
    #[serde(default)]
    pub dropout: f64,
    /// Minimum training-split frequency for a vocabulary entry.
    #[serde(default = "default_min_count")]
    pub min_count: usize,
    /// Evaluate on the dev split after every epoch.
    #[serde(default = "default_true")]
    pub eval_each_epoch: bool,
}

fn default_true() -> bool {
    true
}

impl TrainConfig {
    pub fn new(mode: Mode, seed: u64) -> Self {
        TrainConfig {
            mode,
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            seed,
            lambda: default_lambda(),
            preset: Preset::default(),
            max_lr: None,
            schedule: ScheduleConfig::default(),
            adam: AdamConfig::default(),
            align_languages: Vec::new(),
            dropout: 0.0,
            min_count: default_min_count(),
            eval_each_epoch: true,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn max_lr(&self) -> f64 {
        self.max_lr.unwrap_or_else(|| self.preset.default_max_lr())
    }

    pub fn schedule(&self, total_steps: usize) -> OneCycleSchedule {
        OneCycleSchedule {
            max_lr: self.max_lr(),
            total_steps,
            pct_start: self.schedule.pct_start,
            div_factor: self.schedule.div_factor,
            final_div_factor: self.schedule.final_div_factor,
        }
    }

    /// Checks field ranges without looking at data.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return bad(format!("lambda must be a finite non-negative number, got {}", self.lambda));
        }
        if !(self.max_lr() > 0.0 && self.max_lr().is_finite()) {
            return bad("max_lr must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        let s = &self.schedule;
        if !(0.0..=1.0).contains(&s.pct_start) || s.div_factor <= 0.0 || s.final_div_factor <= 0.0 {
            return bad("schedule factors out of range".into());
        }
        if !self.mode.is_alignment() && !self.align_languages.is_empty() {
            return bad(format!("align_languages given for non-alignment mode {}", self.mode));
        }
        if matches!(self.mode, Mode::XeroAlignSeqAlignFirst | Mode::XeroAlignSeqTaskFirst)
            && self.epochs % 2 == 1
        {
            return bad(format!("{} needs an even number of epochs", self.mode));
        }
        Ok(())
    }

    /// Alignment languages after defaulting, checked against the corpus.
    /// Empty for non-alignment modes.
    pub fn resolved_align_languages(&self, corpus: &Corpus) -> Result<Vec<String>> {
        if !self.mode.is_alignment() {
            return Ok(Vec::new());
        }
        let available = corpus.target_languages();
        if self.align_languages.is_empty() {
            if available.is_empty() {
                return Err(Error::Config("corpus has no target language to align".into()));
            }
            return Ok(available);
        }
        for l in &self.align_languages {
            if !available.contains(l) {
                return Err(Error::Config(format!("alignment language `{l}` is not in the corpus")));
            }
        }
        Ok(self.align_languages.clone())
    }
}
