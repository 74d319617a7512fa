use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::Subcommand;
use serde::{Deserialize, Serialize};
use spawnwatch_core::annotate::{
    export_labels, import_labels, make_split, plan_rounds, LabelBox, DEFAULT_BATCH, DEFAULT_BOOTSTRAP,
};
use spawnwatch_core::simtank::FrameTruth;

use crate::output;
use crate::plan::Plan;
use crate::simulate::TRUTH_LOG;

#[derive(Debug, Subcommand)]
pub enum AnnotateCommand {
    /// Split an image pool into a manual bootstrap round and pseudo-labeled batches.
    Plan {
        #[arg(long)]
        images: usize,
        #[arg(long, default_value_t = DEFAULT_BOOTSTRAP)]
        bootstrap: usize,
        #[arg(long, default_value_t = DEFAULT_BATCH)]
        batch: usize,
    },
    /// Seeded train/validation/test split of image ids `0..images`.
    Split {
        #[arg(long)]
        images: usize,
        /// Comma-separated train,val,test fractions.
        #[arg(long, default_value = "0.7,0.2,0.1")]
        ratios: String,
    },
    /// Write a run's truth boxes as one label file per frame.
    Export { run: PathBuf },
    /// Read a directory of label files back into one JSON document.
    Import { labels: PathBuf },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    Plan {
        images: usize,
        bootstrap: usize,
        batch: usize,
    },
    Split {
        images: usize,
        ratios: (f64, f64, f64),
        seed: u64,
    },
    Export {
        run: PathBuf,
    },
    Import {
        labels: PathBuf,
    },
}

impl Action {
    pub fn name(&self) -> &'static str {
        match self {
            Action::Plan { .. } => "plan",
            Action::Split { .. } => "split",
            Action::Export { .. } => "export",
            Action::Import { .. } => "import",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotatePlan {
    #[serde(flatten)]
    pub action: Action,
    pub out: PathBuf,
}

fn parse_ratios(s: &str) -> Result<(f64, f64, f64)> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| anyhow::anyhow!("bad ratio list {s:?}: {e}"))?;
    match parts[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => bail!("expected three ratios, got {s:?}"),
    }
}

pub fn resolve(cmd: AnnotateCommand, seed: u64, out: Option<PathBuf>) -> Result<Plan> {
    let action = match cmd {
        AnnotateCommand::Plan {
            images,
            bootstrap,
            batch,
        } => Action::Plan {
            images,
            bootstrap,
            batch,
        },
        AnnotateCommand::Split { images, ratios } => Action::Split {
            images,
            ratios: parse_ratios(&ratios)?,
            seed,
        },
        AnnotateCommand::Export { run } => Action::Export { run },
        AnnotateCommand::Import { labels } => Action::Import { labels },
    };
    let default_out = match &action {
        Action::Export { run } => Some(run.clone()),
        _ => None,
    };
    let Some(out) = out.or(default_out) else {
        bail!("annotate {} needs --out", action.name());
    };
    Ok(Plan::Annotate(AnnotatePlan { action, out }))
}

/// Label-file image id for each frame, in truth-log order.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ImageIndexEntry {
    image_id: u64,
    unit_id: String,
    frame_id: u64,
}

pub fn run(plan: &AnnotatePlan) -> Result<()> {
    match &plan.action {
        Action::Plan {
            images,
            bootstrap,
            batch,
        } => {
            let rounds = plan_rounds(*images, *bootstrap, *batch)?;
            output::write_json(&plan.out.join("rounds.json"), &rounds)
        }
        Action::Split { images, ratios, seed } => {
            let ids: Vec<u64> = (0..*images as u64).collect();
            let split = make_split(&ids, *ratios, *seed)?;
            output::write_json(&plan.out.join("split.json"), &split)
        }
        Action::Export { run } => {
            output::require_dir(run)?;
            let dir = plan.out.join("labels");
            if dir.exists() {
                std::fs::remove_dir_all(&dir)?;
            }
            let mut images = BTreeMap::new();
            let mut index = Vec::new();
            for (i, env) in output::read_jsonl(&run.join(TRUTH_LOG))?.into_iter().enumerate() {
                let t: FrameTruth = env.payload_as()?;
                images.insert(i as u64, t.boxes.iter().map(LabelBox::from_truth).collect::<Vec<_>>());
                index.push(ImageIndexEntry {
                    image_id: i as u64,
                    unit_id: env.unit_id.unwrap_or_default(),
                    frame_id: t.frame_id,
                });
            }
            std::fs::create_dir_all(&dir)?;
            export_labels(&dir, &images)?;
            output::write_json(&plan.out.join("labels-index.json"), &index)
        }
        Action::Import { labels } => {
            output::require_dir(labels)?;
            let images = import_labels(labels)?;
            output::write_json(&plan.out.join("labels.json"), &images)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_lists() {
        assert_eq!(parse_ratios("0.7, 0.2,0.1").unwrap(), (0.7, 0.2, 0.1));
        assert!(parse_ratios("0.5,0.5").is_err());
        assert!(parse_ratios("a,b,c").is_err());
    }
}
