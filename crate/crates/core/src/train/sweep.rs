//! The five extension-loss ablation groups, trained side by side.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use asymgan_autograd::Scalar;
use serde::{Deserialize, Serialize};

use super::{config::TrainConfig, Trainer};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{eval_photo_to_label, SegMetrics};
use crate::losses::Ablation;
use crate::model::Mode;

/// Number of final steps averaged into a row's loss summary.
const TAIL: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationGroup {
    WithoutAll,
    WithoutAdv,
    WithoutPerception,
    WithoutTv,
    All,
}

impl AblationGroup {
    pub const ALL: [AblationGroup; 5] = [
        AblationGroup::WithoutAll,
        AblationGroup::WithoutAdv,
        AblationGroup::WithoutPerception,
        AblationGroup::WithoutTv,
        AblationGroup::All,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AblationGroup::WithoutAll => "w/o-all",
            AblationGroup::WithoutAdv => "w/o-adv",
            AblationGroup::WithoutPerception => "w/o-perception",
            AblationGroup::WithoutTv => "w/o-TV",
            AblationGroup::All => "+all",
        }
    }

    /// Directory-safe form of the label.
    pub fn slug(self) -> &'static str {
        match self {
            AblationGroup::WithoutAll => "wo_all",
            AblationGroup::WithoutAdv => "wo_adv",
            AblationGroup::WithoutPerception => "wo_perception",
            AblationGroup::WithoutTv => "wo_tv",
            AblationGroup::All => "all",
        }
    }

    pub fn flags(self) -> Ablation {
        let none = Ablation::default();
        match self {
            AblationGroup::WithoutAll => Ablation::all(),
            AblationGroup::WithoutAdv => Ablation {
                disable_adv_ext: true,
                ..none
            },
            AblationGroup::WithoutPerception => Ablation {
                disable_perception: true,
                ..none
            },
            AblationGroup::WithoutTv => Ablation {
                disable_tv: true,
                ..none
            },
            AblationGroup::All => none,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub group: AblationGroup,
    pub label: String,
    pub steps: u64,
    /// Set when training stopped on a non-finite value.
    pub aborted: Option<String>,
    /// Mean of each loss term over the last steps.
    pub tail_losses: BTreeMap<String, f64>,
    pub photo_to_label: Option<SegMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn any_aborted(&self) -> bool {
        self.rows.iter().any(|r| r.aborted.is_some())
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<16}{:>7}{:>10}{:>10}{:>10}{:>10}{:>10}  status",
            "group", "steps", "cyc_x", "cyc_y", "cyc_z", "pix_acc", "iou"
        );
        for r in &self.rows {
            let loss = |k: &str| r.tail_losses.get(k).map_or("-".into(), |v| format!("{v:.4}"));
            let (acc, iou) = r.photo_to_label.as_ref().map_or(("-".into(), "-".into()), |m| {
                (format!("{:.4}", m.per_pixel_acc), format!("{:.4}", m.class_iou))
            });
            let status = r.aborted.as_deref().unwrap_or("ok");
            let _ = writeln!(
                out,
                "{:<16}{:>7}{:>10}{:>10}{:>10}{:>10}{:>10}  {status}",
                r.label,
                r.steps,
                loss("cyc_x"),
                loss("cyc_y"),
                loss("cyc_z"),
                acc,
                iou
            );
        }
        out
    }
}

/// Trains one `asym_ext` model per ablation group from `base`, each in its own
/// subdirectory of `out_dir`. Non-finite aborts are recorded in the row rather
/// than returned.
pub fn ablation_sweep<S: Scalar>(base: &TrainConfig, data: &Dataset<S>, out_dir: &Path) -> Result<SweepReport> {
    if base.mode != Mode::AsymExt {
        return Err(Error::Config("the ablation sweep runs in asym_ext mode".into()));
    }
    let mut rows = Vec::new();
    for group in AblationGroup::ALL {
        let mut cfg = base.clone();
        cfg.ablation = group.flags();
        let mut trainer = Trainer::<S>::new(cfg)?;
        let mut history: Vec<Vec<(&'static str, f64)>> = Vec::new();
        let result = trainer.run_observed(data, &out_dir.join(group.slug()), None, |_, b| {
            history.push(b.terms().collect());
        });
        let aborted = match result {
            Ok(_) => None,
            Err(e @ Error::NonFinite { .. }) => Some(e.to_string()),
            Err(e) => return Err(e),
        };
        let tail = &history[history.len().saturating_sub(TAIL)..];
        let mut tail_losses = BTreeMap::new();
        for row in tail {
            for &(name, v) in row {
                *tail_losses.entry(name.to_string()).or_insert(0.0) += v / tail.len() as f64;
            }
        }
        let photo_to_label = match aborted {
            None => Some(eval_photo_to_label(&trainer.bundle, data)?),
            Some(_) => None,
        };
        rows.push(SweepRow {
            group,
            label: group.label().into(),
            steps: history.len() as u64,
            aborted,
            tail_losses,
            photo_to_label,
        });
    }
    Ok(SweepReport { rows })
}
