//! Block-by-block calibration and pruning driver.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{generate_mask, wanda_scores, ComparisonGroup, SparsityPattern};
use crate::calibration::{accumulate_norms, build_selection, PoolKind, PoolPolicy};
use crate::error::{AtvError, Result};
use crate::model::{BlockMasks, BlockTrace, ForwardOptions, LayerKind, Model, TokenSequence};
use crate::saliency::{BlockSaliency, BudgetRule, SaliencySignal};

/// Which hidden states feed block `b` during calibration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Propagation {
    /// Outputs of the already-pruned blocks `< b`.
    #[default]
    Sequential,
    /// Outputs of the dense model.
    Dense,
}

impl std::str::FromStr for Propagation {
    type Err = AtvError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(Self::Sequential),
            "dense" => Ok(Self::Dense),
            other => Err(AtvError::InvalidConfig(format!("unknown propagation `{other}`"))),
        }
    }
}

/// How the per-block visual budget is set.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetMode {
    /// `K = ⌊α · s̄ · n_text⌋` per sample.
    #[default]
    Adaptive,
    /// Caller-supplied per-sample `K` for each block.
    Fixed(Vec<usize>),
    /// Fixed per-block `K` whose batch total equals the adaptive run's
    /// (up to integer rounding); runs the adaptive pipeline once first.
    FixedMatched,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub policy: PoolPolicy,
    pub pattern: SparsityPattern,
    pub group: ComparisonGroup,
    pub propagation: Propagation,
    pub budget_mode: BudgetMode,
    pub seed: u64,
}

impl PipelineConfig {
    pub fn new(policy: PoolPolicy, pattern: SparsityPattern) -> Self {
        Self {
            policy,
            pattern,
            group: ComparisonGroup::default(),
            propagation: Propagation::default(),
            budget_mode: BudgetMode::default(),
            seed: 0,
        }
    }

    pub fn validate(&self, model: &Model) -> Result<()> {
        self.policy.validate()?;
        self.pattern.validate()?;
        if let SparsityPattern::SemiStructured { m, .. } = self.pattern {
            for l in LayerKind::ALL {
                let (_, d_in) = model.config.layer_shape(l);
                if d_in % m != 0 {
                    return Err(AtvError::InvalidConfig(format!(
                        "{} input width {d_in} is not divisible by M = {m}",
                        l.name()
                    )));
                }
            }
        }
        if let BudgetMode::Fixed(ks) = &self.budget_mode {
            if ks.len() != model.config.n_blocks {
                return Err(AtvError::InvalidConfig(format!(
                    "{} fixed budgets for {} blocks",
                    ks.len(),
                    model.config.n_blocks
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub block: usize,
    pub layer: LayerKind,
    pub rows: usize,
    pub cols: usize,
    pub pruned: usize,
    pub sparsity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub block: usize,
    /// Batch mean visual saliency `s̄` under the configured signal.
    pub mean_saliency: f64,
    /// Visual budget `K` per sample, dataset order.
    pub budget_per_sample: Vec<usize>,
    pub mean_budget: f64,
    pub selected_visual_total: usize,
    pub text_rows: usize,
    pub calibration_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub config: PipelineConfig,
    pub n_samples: usize,
    pub blocks: Vec<BlockReport>,
    pub layers: Vec<LayerReport>,
    pub global_sparsity: f64,
}

#[derive(Debug, Clone)]
pub struct PruneOutcome {
    pub model: Model,
    pub masks: Vec<BlockMasks>,
    pub report: PruneReport,
}

/// Runs calibration and pruning one block at a time.
///
/// Per block: forward the calibration set through the still-dense block,
/// score visual tokens, derive the batch mean and per-sample budgets, pick
/// each sample's pool, accumulate channel norms over the pooled positions,
/// score and mask all six layers, then move the hidden states on according
/// to `config.propagation`.
pub fn run_atv_pipeline(model: &Model, dataset: &[TokenSequence], config: &PipelineConfig) -> Result<PruneOutcome> {
    model.validate()?;
    config.validate(model)?;
    if dataset.is_empty() {
        return Err(AtvError::EmptyCalibration("calibration dataset is empty".into()));
    }
    for s in dataset {
        if s.embeddings.cols() != model.config.d_model {
            return Err(AtvError::DimensionMismatch(format!(
                "sample `{}` has width {}, model expects {}",
                s.id,
                s.embeddings.cols(),
                model.config.d_model
            )));
        }
        if s.count(crate::model::Modality::Text) == 0 {
            return Err(AtvError::InvalidConfig(format!("sample `{}` has no text token", s.id)));
        }
    }

    if config.budget_mode == BudgetMode::FixedMatched {
        let adaptive = PipelineConfig {
            budget_mode: BudgetMode::Adaptive,
            ..config.clone()
        };
        let first = run_blocks(model, dataset, &adaptive, None)?;
        let fixed = matched_fixed_budgets(&first.report, dataset.len());
        let mut out = run_blocks(model, dataset, config, Some(&fixed))?;
        out.report.config.budget_mode = BudgetMode::Fixed(fixed);
        return Ok(out);
    }
    let fixed = match &config.budget_mode {
        BudgetMode::Fixed(ks) => Some(ks.clone()),
        _ => None,
    };
    run_blocks(model, dataset, config, fixed.as_deref())
}

/// Spreads the adaptive run's total selected-visual count evenly over
/// blocks as a per-sample constant.
pub fn matched_fixed_budgets(adaptive: &PruneReport, n_samples: usize) -> Vec<usize> {
    let n_blocks = adaptive.blocks.len().max(1);
    let total: usize = adaptive.blocks.iter().map(|b| b.selected_visual_total).sum();
    let per_sample = (total as f64 / n_samples.max(1) as f64).round() as usize;
    (0..n_blocks)
        .map(|b| per_sample / n_blocks + usize::from(b < per_sample % n_blocks))
        .collect()
}

fn run_blocks(
    model: &Model,
    dataset: &[TokenSequence],
    config: &PipelineConfig,
    fixed: Option<&[usize]>,
) -> Result<PruneOutcome> {
    let n_heads = model.config.n_heads;
    let mut pruned = model.clone();
    let mut hidden: Vec<_> = dataset.iter().map(|s| s.embeddings.clone()).collect();
    let mut masks = Vec::with_capacity(model.blocks.len());
    let mut block_reports = Vec::with_capacity(model.blocks.len());
    let mut layer_reports = Vec::new();
    let signal = config.policy.signal;
    let opts = ForwardOptions {
        activations: true,
        attention: signal == SaliencySignal::Abs,
        causal: true,
    };

    for b in 0..model.blocks.len() {
        let dense_block = model.blocks[b].prepare();
        let traces: Vec<BlockTrace> = hidden
            .par_iter()
            .zip(dataset)
            .map(|(x, s)| dense_block.run(x, &s.modality, n_heads, opts))
            .collect();

        let saliency = BlockSaliency::compute(signal, &traces, dataset)?;
        let mut policy = config.policy;
        if let Some(ks) = fixed {
            policy.budget = BudgetRule {
                fixed_k: Some(ks[b]),
                ..policy.budget
            };
        }
        let selection = build_selection(&policy, &traces, dataset, Some(&saliency), b, config.seed)?;
        let norms = accumulate_norms(&traces, &selection)?;
        if norms.is_empty() {
            return Err(AtvError::EmptyCalibration(format!(
                "block {b}: the {} pool selected no positions",
                policy.kind.name()
            )));
        }

        let mut block_masks = BlockMasks::new();
        for l in LayerKind::ALL {
            let w = model.blocks[b].layer(l);
            let scores = wanda_scores(w, norms.layer(l))?;
            let mask = generate_mask(&scores, config.pattern, config.group)?;
            layer_reports.push(LayerReport {
                block: b,
                layer: l,
                rows: w.rows(),
                cols: w.cols(),
                pruned: mask.pruned_count(),
                sparsity: mask.sparsity(),
            });
            mask.apply(pruned.blocks[b].layer_mut(l));
            block_masks.insert(l, mask);
        }
        let unchanged = block_masks.values().all(|m| m.pruned_count() == 0);
        masks.push(block_masks);

        let budgets: Vec<usize> = match policy.kind {
            PoolKind::Atv => selection.samples.iter().map(|s| s.budget).collect(),
            _ => vec![0; dataset.len()],
        };
        block_reports.push(BlockReport {
            block: b,
            mean_saliency: saliency.mean,
            mean_budget: budgets.iter().sum::<usize>() as f64 / budgets.len() as f64,
            budget_per_sample: budgets,
            selected_visual_total: selection.selected_visual(),
            text_rows: selection.samples.iter().map(|s| s.text_kept).sum(),
            calibration_rows: selection.total_rows(),
        });

        hidden = match config.propagation {
            Propagation::Sequential if !unchanged => {
                let pruned_block = pruned.blocks[b].prepare();
                hidden
                    .par_iter()
                    .zip(dataset)
                    .map(|(x, s)| {
                        pruned_block
                            .run(x, &s.modality, n_heads, ForwardOptions::hidden_only())
                            .output
                    })
                    .collect()
            }
            _ => traces.into_iter().map(|t| t.output).collect(),
        };
    }

    let total: usize = layer_reports.iter().map(|l| l.rows * l.cols).sum();
    let pruned_total: usize = layer_reports.iter().map(|l| l.pruned).sum();
    let report = PruneReport {
        config: config.clone(),
        n_samples: dataset.len(),
        blocks: block_reports,
        layers: layer_reports,
        global_sparsity: if total == 0 {
            0.0
        } else {
            pruned_total as f64 / total as f64
        },
    };
    Ok(PruneOutcome {
        model: pruned,
        masks,
        report,
    })
}
