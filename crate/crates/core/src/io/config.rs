//! Run configuration shared by the command-line tools.

use serde::{Deserialize, Serialize};

use crate::calibration::{PoolKind, PoolPolicy};
use crate::error::{AtvError, Result};
use crate::pruner::{BudgetMode, ComparisonGroup, PipelineConfig, Propagation, SparsityPattern};
use crate::saliency::{BudgetRule, SaliencySignal};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub alpha: f64,
    /// Unstructured target sparsity; excludes `pattern`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sparsity: Option<f64>,
    /// `"N:M"`; excludes `sparsity`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<String>,
    pub signal: SaliencySignal,
    pub policy: PoolKind,
    pub comparison_group: ComparisonGroup,
    pub propagation: Propagation,
    pub text_keep_ratio: f64,
    /// Fixed per-block budget matched to the adaptive run's token total.
    #[serde(default)]
    pub fixed_budget: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            sparsity: None,
            pattern: None,
            signal: SaliencySignal::Drift,
            policy: PoolKind::Atv,
            comparison_group: ComparisonGroup::PerOutputRow,
            propagation: Propagation::Sequential,
            text_keep_ratio: 1.0,
            fixed_budget: false,
            seed: None,
        }
    }
}

/// Parses `"N:M"`.
pub fn parse_nm(s: &str) -> Result<SparsityPattern> {
    let bad = || AtvError::InvalidConfig(format!("pattern `{s}` is not of the form N:M"));
    let (n, m) = s.split_once(':').ok_or_else(bad)?;
    let p = SparsityPattern::SemiStructured {
        n: n.trim().parse().map_err(|_| bad())?,
        m: m.trim().parse().map_err(|_| bad())?,
    };
    p.validate()?;
    Ok(p)
}

impl RunConfig {
    pub fn pattern(&self) -> Result<SparsityPattern> {
        let p = match (self.sparsity, self.pattern.as_deref()) {
            (Some(rho), None) => SparsityPattern::Unstructured { rho },
            (None, Some(nm)) => parse_nm(nm)?,
            (Some(_), Some(_)) => {
                return Err(AtvError::InvalidConfig(
                    "give either a sparsity or an N:M pattern, not both".into(),
                ))
            }
            (None, None) => {
                return Err(AtvError::InvalidConfig("one of sparsity or N:M pattern is required".into()))
            }
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.pattern()?;
        if self.signal == SaliencySignal::Random && self.seed.is_none() {
            return Err(AtvError::InvalidConfig("the random signal requires a seed".into()));
        }
        if self.fixed_budget && self.policy != PoolKind::Atv {
            return Err(AtvError::InvalidConfig("a fixed budget only applies to the atv policy".into()));
        }
        self.policy()?.validate()
    }

    fn policy(&self) -> Result<PoolPolicy> {
        Ok(PoolPolicy {
            kind: self.policy,
            signal: self.signal,
            budget: BudgetRule::adaptive(self.alpha),
            text_keep_ratio: self.text_keep_ratio,
        })
    }

    pub fn to_pipeline(&self) -> Result<PipelineConfig> {
        self.validate()?;
        Ok(PipelineConfig {
            policy: self.policy()?,
            pattern: self.pattern()?,
            group: self.comparison_group,
            propagation: self.propagation,
            budget_mode: if self.fixed_budget {
                BudgetMode::FixedMatched
            } else {
                BudgetMode::Adaptive
            },
            seed: self.seed.unwrap_or(0),
        })
    }
}
