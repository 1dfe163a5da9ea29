//! Per-block calibration pools and the channel norms they induce.
//!
//! An ATV pool keeps the text tokens and a budgeted subset of visual tokens
//! per sample; the baselines keep all tokens, only text, or only visual.

use serde::{Deserialize, Serialize};

use crate::error::{AtvError, Result};
use crate::model::{ActivationSite, BlockTrace, LayerKind, Modality, TokenSequence};
use crate::numerics::accumulate_column_squares;
use crate::saliency::{
    budget, drift_at, select_maxmin, select_random, select_topk, selection_rng, BlockSaliency,
    BudgetRule, SaliencySignal,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    MixedAll,
    TextOnly,
    VisualOnly,
    #[default]
    Atv,
}

impl PoolKind {
    pub fn name(self) -> &'static str {
        match self {
            PoolKind::MixedAll => "mixed_all",
            PoolKind::TextOnly => "text_only",
            PoolKind::VisualOnly => "visual_only",
            PoolKind::Atv => "atv",
        }
    }
}

impl std::str::FromStr for PoolKind {
    type Err = AtvError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mixed_all" | "mixed" => Ok(Self::MixedAll),
            "text_only" | "text" => Ok(Self::TextOnly),
            "visual_only" | "visual" => Ok(Self::VisualOnly),
            "atv" => Ok(Self::Atv),
            other => Err(AtvError::InvalidConfig(format!("unknown pool policy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolPolicy {
    pub kind: PoolKind,
    /// Only consulted by the ATV pool.
    pub signal: SaliencySignal,
    /// Only consulted by the ATV pool.
    pub budget: BudgetRule,
    /// Fraction of text tokens kept by the ATV pool, highest drift first.
    pub text_keep_ratio: f64,
}

impl PoolPolicy {
    pub fn atv(alpha: f64, signal: SaliencySignal) -> Self {
        Self {
            kind: PoolKind::Atv,
            signal,
            budget: BudgetRule::adaptive(alpha),
            text_keep_ratio: 1.0,
        }
    }

    pub fn baseline(kind: PoolKind) -> Self {
        Self {
            kind,
            ..Self::atv(0.0, SaliencySignal::Drift)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.budget.validate()?;
        if !(0.0..=1.0).contains(&self.text_keep_ratio) {
            return Err(AtvError::InvalidConfig(format!(
                "text keep ratio {} outside [0, 1]",
                self.text_keep_ratio
            )));
        }
        Ok(())
    }
}

/// Pool of one sample at one block, with its audit counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSelection {
    /// Retained token positions, ascending.
    pub positions: Vec<usize>,
    pub n_text: usize,
    pub n_visual: usize,
    pub text_kept: usize,
    pub visual_selected: usize,
    /// Visual budget before capping at `n_visual` (0 for baseline pools).
    pub budget: usize,
}

/// Pools of every sample at one block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CalibrationSelection {
    pub samples: Vec<SampleSelection>,
}

impl CalibrationSelection {
    pub fn total_rows(&self) -> usize {
        self.samples.iter().map(|s| s.positions.len()).sum()
    }

    pub fn selected_visual(&self) -> usize {
        self.samples.iter().map(|s| s.visual_selected).sum()
    }
}

/// Number of text tokens kept at a given ratio: `ceil(ratio · n)`.
pub fn text_keep_count(ratio: f64, n_text: usize) -> usize {
    ((ratio * n_text as f64 - 1e-9).ceil().max(0.0) as usize).min(n_text)
}

/// Builds the pool for every sample at one block.
///
/// `traces[i]` must be sample `i`'s trace at this block. The ATV pool needs
/// `saliency`; random selection draws from `(seed, sample id, block)`.
pub fn build_selection(
    policy: &PoolPolicy,
    traces: &[BlockTrace],
    seqs: &[TokenSequence],
    saliency: Option<&BlockSaliency>,
    block: usize,
    seed: u64,
) -> Result<CalibrationSelection> {
    if traces.len() != seqs.len() {
        return Err(AtvError::DimensionMismatch(format!(
            "{} traces for {} samples",
            traces.len(),
            seqs.len()
        )));
    }
    let mut samples = Vec::with_capacity(seqs.len());
    for (i, (trace, seq)) in traces.iter().zip(seqs).enumerate() {
        let text = seq.text_positions();
        let visual = seq.visual_positions();
        let (n_text, n_visual) = (text.len(), visual.len());
        let (text_kept, vis_sub, k) = match policy.kind {
            PoolKind::MixedAll => (text, visual, 0),
            PoolKind::TextOnly => (text, Vec::new(), 0),
            PoolKind::VisualOnly => (Vec::new(), visual, 0),
            PoolKind::Atv => {
                let sal = saliency.ok_or(AtvError::MissingSaliency(block))?;
                let scores = sal.scores.get(i).ok_or(AtvError::MissingSaliency(block))?;
                let k = budget(&policy.budget, sal.mean, n_text);
                let vis_sub = match policy.signal {
                    SaliencySignal::Drift | SaliencySignal::Abs => select_topk(scores, k),
                    SaliencySignal::Dbs => select_maxmin(&trace.input, &visual, k),
                    SaliencySignal::Random => {
                        select_random(&mut selection_rng(seed, &seq.id, block), &visual, k)
                    }
                };
                let text_kept = if policy.text_keep_ratio >= 1.0 {
                    text
                } else {
                    let keep = text_keep_count(policy.text_keep_ratio, n_text);
                    select_topk(&drift_at(trace, &text), keep)
                };
                (text_kept, vis_sub, k)
            }
        };
        let mut positions: Vec<usize> = text_kept.iter().chain(&vis_sub).copied().collect();
        positions.sort_unstable();
        debug_assert!(positions.windows(2).all(|w| w[0] < w[1]));
        samples.push(SampleSelection {
            text_kept: text_kept.len(),
            visual_selected: vis_sub.len(),
            positions,
            n_text,
            n_visual,
            budget: k,
        });
    }
    Ok(CalibrationSelection { samples })
}

/// Channel norms for every prunable layer of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelNorms {
    /// Indexed like [`ActivationSite::ALL`].
    sites: [Vec<f64>; 4],
    /// Pooled positions the norms were estimated from.
    pub rows: usize,
}

impl ChannelNorms {
    pub fn site(&self, site: ActivationSite) -> &[f64] {
        &self.sites[site as usize]
    }

    pub fn layer(&self, layer: LayerKind) -> &[f64] {
        self.site(layer.site())
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }
}

/// `‖X_j‖₂` over the pooled positions of all samples, per activation site.
///
/// Samples are visited in dataset order and rows in ascending order, so the
/// result is bit-reproducible. An empty pool gives zero norms plus an
/// `empty-calibration` warning.
pub fn accumulate_norms(traces: &[BlockTrace], selection: &CalibrationSelection) -> Result<ChannelNorms> {
    if traces.len() != selection.samples.len() {
        return Err(AtvError::DimensionMismatch(format!(
            "{} traces for {} selections",
            traces.len(),
            selection.samples.len()
        )));
    }
    let first = traces
        .first()
        .ok_or_else(|| AtvError::EmptyCalibration("no calibration samples".into()))?;
    let widths = ActivationSite::ALL.map(|s| first.site(s).map_or(0, |m| m.cols()));
    let mut acc = widths.map(|w| vec![0.0f64; w]);
    for (trace, sel) in traces.iter().zip(&selection.samples) {
        for (site, sums) in ActivationSite::ALL.iter().zip(acc.iter_mut()) {
            let x = trace.site(*site).ok_or_else(|| {
                AtvError::InvalidConfig("trace was captured without activations".into())
            })?;
            accumulate_column_squares(x, &sel.positions, sums);
        }
    }
    let rows = selection.total_rows();
    if rows == 0 {
        log::warn!("empty-calibration: pooled selection is empty across all samples");
    }
    Ok(ChannelNorms {
        sites: acc.map(|v| v.into_iter().map(f64::sqrt).collect()),
        rows,
    })
}

/// Token positions a fixed-modality pool keeps for `modality`.
pub fn positions_for_pool(kind: PoolKind, modality: &[Modality]) -> Vec<usize> {
    modality
        .iter()
        .enumerate()
        .filter_map(|(i, m)| {
            let keep = match kind {
                PoolKind::MixedAll | PoolKind::Atv => true,
                PoolKind::TextOnly => *m == Modality::Text,
                PoolKind::VisualOnly => *m == Modality::Visual,
            };
            keep.then_some(i)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ForwardOptions, Model, ModelConfig};
    use crate::numerics::{column_l2_norms, Matrix, Rng};
    use crate::saliency::BlockSaliency;

    fn seq(id: &str, n_vis: usize, n_text: usize, d: usize, rng: &mut Rng) -> TokenSequence {
        let emb = Matrix::from_fn(n_vis + n_text, d, |_, _| rng.normal() as f32);
        let mut m = vec![Modality::Visual; n_vis];
        m.extend(vec![Modality::Text; n_text]);
        TokenSequence::new(id, emb, m).unwrap()
    }

    fn model(seed: u64) -> Model {
        let mut rng = Rng::new(seed);
        let mut m = Model::zeros(ModelConfig {
            d_model: 8,
            n_blocks: 1,
            n_heads: 2,
            d_ffn: 12,
        })
        .unwrap();
        for l in LayerKind::ALL {
            for v in m.blocks[0].layer_mut(l).data_mut() {
                *v = (rng.normal() * 0.5) as f32;
            }
        }
        m
    }

    fn traces(m: &Model, seqs: &[TokenSequence]) -> Vec<BlockTrace> {
        seqs.iter()
            .map(|s| m.forward(s, ForwardOptions::all()).unwrap().blocks.remove(0))
            .collect()
    }

    #[test]
    fn baseline_pools() {
        let mut rng = Rng::new(1);
        let seqs = vec![seq("a", 6, 4, 8, &mut rng)];
        let t = traces(&model(2), &seqs);
        let mixed = build_selection(&PoolPolicy::baseline(PoolKind::MixedAll), &t, &seqs, None, 0, 0)
            .unwrap();
        assert_eq!(mixed.samples[0].positions, (0..10).collect::<Vec<_>>());
        let text = build_selection(&PoolPolicy::baseline(PoolKind::TextOnly), &t, &seqs, None, 0, 0)
            .unwrap();
        assert_eq!(text.samples[0].positions, vec![6, 7, 8, 9]);
        let vis = build_selection(&PoolPolicy::baseline(PoolKind::VisualOnly), &t, &seqs, None, 0, 0)
            .unwrap();
        assert_eq!(vis.samples[0].positions, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn atv_needs_saliency() {
        let mut rng = Rng::new(1);
        let seqs = vec![seq("a", 2, 2, 8, &mut rng)];
        let t = traces(&model(2), &seqs);
        let err = build_selection(&PoolPolicy::atv(1.0, SaliencySignal::Drift), &t, &seqs, None, 3, 0);
        assert!(matches!(err, Err(AtvError::MissingSaliency(3))));
    }

    #[test]
    fn atv_alpha_zero_is_text_pool() {
        let mut rng = Rng::new(3);
        let seqs: Vec<_> = (0..3).map(|i| seq(&format!("s{i}"), 5, 3, 8, &mut rng)).collect();
        let t = traces(&model(4), &seqs);
        let sal = BlockSaliency::compute(SaliencySignal::Drift, &t, &seqs).unwrap();
        let atv = build_selection(&PoolPolicy::atv(0.0, SaliencySignal::Drift), &t, &seqs, Some(&sal), 0, 0)
            .unwrap();
        for (s, q) in atv.samples.iter().zip(&seqs) {
            assert_eq!(s.positions, q.text_positions());
        }
    }

    /// Six-token sample with hand-set scores: visual {0,1,2,3} scored
    /// {0.2, 0.5, 0.1, 0.5}, text {4,5}. With s̄ = 0.6 and α = 2:
    /// K = ⌊2 · 0.6 · 2⌋ = 2, top-2 = {1, 3} (tie at 0.5 is taken whole).
    #[test]
    fn atv_hand_computed_sample() {
        let mut rng = Rng::new(5);
        let seqs = vec![seq("h", 4, 2, 8, &mut rng)];
        let t = traces(&model(6), &seqs);
        let sal = BlockSaliency {
            signal: SaliencySignal::Drift,
            scores: vec![vec![(0, 0.2), (1, 0.5), (2, 0.1), (3, 0.5)]],
            mean: 0.6,
        };
        let sel = build_selection(&PoolPolicy::atv(2.0, SaliencySignal::Drift), &t, &seqs, Some(&sal), 0, 0)
            .unwrap();
        let s = &sel.samples[0];
        assert_eq!(s.positions, vec![1, 3, 4, 5]);
        assert_eq!((s.budget, s.visual_selected, s.text_kept), (2, 2, 2));
    }

    #[test]
    fn text_keep_ratio_ranks_by_drift() {
        assert_eq!(text_keep_count(0.9, 10), 9);
        assert_eq!(text_keep_count(0.01, 10), 1);
        assert_eq!(text_keep_count(0.0, 10), 0);
        assert_eq!(text_keep_count(0.3, 10), 3);

        let mut rng = Rng::new(7);
        let seqs = vec![seq("r", 3, 6, 8, &mut rng)];
        let t = traces(&model(8), &seqs);
        let sal = BlockSaliency::compute(SaliencySignal::Drift, &t, &seqs).unwrap();
        let mut policy = PoolPolicy::atv(0.0, SaliencySignal::Drift);
        policy.text_keep_ratio = 0.5;
        let sel = build_selection(&policy, &t, &seqs, Some(&sal), 0, 0).unwrap();
        let expect = select_topk(&drift_at(&t[0], &seqs[0].text_positions()), 3);
        assert_eq!(sel.samples[0].positions, expect);
    }

    #[test]
    fn position_set_law() {
        let mut rng = Rng::new(9);
        let seqs: Vec<_> = (0..4).map(|i| seq(&format!("s{i}"), 7, 3, 8, &mut rng)).collect();
        let t = traces(&model(10), &seqs);
        let sal = BlockSaliency::compute(SaliencySignal::Drift, &t, &seqs).unwrap();
        let text = build_selection(&PoolPolicy::baseline(PoolKind::TextOnly), &t, &seqs, None, 0, 0).unwrap();
        let mixed = build_selection(&PoolPolicy::baseline(PoolKind::MixedAll), &t, &seqs, None, 0, 0).unwrap();
        for alpha in [0.5, 3.0, 20.0] {
            let atv = build_selection(&PoolPolicy::atv(alpha, SaliencySignal::Drift), &t, &seqs, Some(&sal), 0, 0)
                .unwrap();
            for i in 0..4 {
                let a = &atv.samples[i].positions;
                assert!(text.samples[i].positions.iter().all(|p| a.contains(p)));
                assert!(a.iter().all(|p| mixed.samples[i].positions.contains(p)));
            }
        }
    }

    #[test]
    fn norms_reduce_to_column_norms() {
        let mut rng = Rng::new(11);
        let seqs = vec![seq("a", 4, 4, 8, &mut rng)];
        let t = traces(&model(12), &seqs);
        let sel = build_selection(&PoolPolicy::baseline(PoolKind::MixedAll), &t, &seqs, None, 0, 0).unwrap();
        let norms = accumulate_norms(&t, &sel).unwrap();
        let all: Vec<usize> = (0..8).collect();
        for site in ActivationSite::ALL {
            let expect = column_l2_norms(t[0].site(site).unwrap(), &all).unwrap();
            assert_eq!(norms.site(site), expect.as_slice());
        }
    }

    #[test]
    fn norms_over_disjoint_samples_combine_in_quadrature() {
        let mut rng = Rng::new(13);
        let seqs: Vec<_> = (0..2).map(|i| seq(&format!("s{i}"), 3, 3, 8, &mut rng)).collect();
        let t = traces(&model(14), &seqs);
        let sel = build_selection(&PoolPolicy::baseline(PoolKind::MixedAll), &t, &seqs, None, 0, 0).unwrap();
        let both = accumulate_norms(&t, &sel).unwrap();
        let one = |i: usize| {
            let s = CalibrationSelection {
                samples: vec![sel.samples[i].clone()],
            };
            accumulate_norms(&t[i..=i], &s).unwrap()
        };
        let (a, b) = (one(0), one(1));
        for l in LayerKind::ALL {
            for j in 0..both.layer(l).len() {
                let c = (a.layer(l)[j].powi(2) + b.layer(l)[j].powi(2)).sqrt();
                assert!((c - both.layer(l)[j]).abs() <= 1e-9 * c.max(1.0));
            }
        }
    }

    #[test]
    fn empty_pool_gives_zero_norms() {
        let mut rng = Rng::new(15);
        let seqs = vec![seq("t", 0, 3, 8, &mut rng)];
        let t = traces(&model(16), &seqs);
        let sel = build_selection(&PoolPolicy::baseline(PoolKind::VisualOnly), &t, &seqs, None, 0, 0).unwrap();
        let n = accumulate_norms(&t, &sel).unwrap();
        assert!(n.is_empty());
        assert!(n.layer(LayerKind::Down).iter().all(|&v| v == 0.0));
    }
}
