//! Modality-decoupled ("mixture of transformers") sensitivity probe.
//!
//! Every block's q/k/v/up/down weights are copied into a textual and a
//! visual pathway; each token is projected by its own modality's pathway
//! while attention still mixes all tokens, and `w_o` plus the norms stay
//! shared. Before pruning, the decoupled model computes exactly what the
//! shared model does.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{positions_for_pool, PoolKind};
use crate::error::{AtvError, Result};
use crate::evalgen::{evaluate_outputs, ClassErrors, OutputModel};
use crate::model::{
    BlockTrace, ForwardOptions, ForwardTrace, LayerKind, Model, ModelConfig, Modality,
    PreparedBlock, PreparedLinear, TokenSequence, TransformerBlock,
};
use crate::numerics::{accumulate_column_squares, Matrix};
use crate::pruner::{generate_mask, wanda_scores, ComparisonGroup, PruneMask, SparsityPattern};
use crate::pruner::Propagation;

/// Layers replicated per pathway. `o_proj` stays shared and is never pruned
/// by the probe.
pub const PATHWAY_LAYERS: [LayerKind; 5] = [
    LayerKind::Q,
    LayerKind::K,
    LayerKind::V,
    LayerKind::Up,
    LayerKind::Down,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pathway {
    Textual,
    Visual,
}

impl Pathway {
    pub const ALL: [Pathway; 2] = [Pathway::Textual, Pathway::Visual];

    pub fn modality(self) -> Modality {
        match self {
            Pathway::Textual => Modality::Text,
            Pathway::Visual => Modality::Visual,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Pathway::Textual => "textual",
            Pathway::Visual => "visual",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathwayWeights {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

impl PathwayWeights {
    fn copy_of(block: &TransformerBlock) -> Self {
        Self {
            w_q: block.w_q.clone(),
            w_k: block.w_k.clone(),
            w_v: block.w_v.clone(),
            w_up: block.w_up.clone(),
            w_down: block.w_down.clone(),
        }
    }

    /// `None` for `o_proj`, which is not part of a pathway.
    pub fn layer(&self, l: LayerKind) -> Option<&Matrix> {
        match l {
            LayerKind::Q => Some(&self.w_q),
            LayerKind::K => Some(&self.w_k),
            LayerKind::V => Some(&self.w_v),
            LayerKind::Up => Some(&self.w_up),
            LayerKind::Down => Some(&self.w_down),
            LayerKind::O => None,
        }
    }

    pub fn layer_mut(&mut self, l: LayerKind) -> Option<&mut Matrix> {
        match l {
            LayerKind::Q => Some(&mut self.w_q),
            LayerKind::K => Some(&mut self.w_k),
            LayerKind::V => Some(&mut self.w_v),
            LayerKind::Up => Some(&mut self.w_up),
            LayerKind::Down => Some(&mut self.w_down),
            LayerKind::O => None,
        }
    }

    fn prepared(&self, w_o: &Matrix) -> [PreparedLinear; 6] {
        LayerKind::ALL.map(|l| PreparedLinear::new(self.layer(l).unwrap_or(w_o)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoupledBlock {
    pub text: PathwayWeights,
    pub visual: PathwayWeights,
    pub w_o: Matrix,
    pub norm1: Vec<f32>,
    pub norm2: Vec<f32>,
}

impl DecoupledBlock {
    pub fn pathway(&self, p: Pathway) -> &PathwayWeights {
        match p {
            Pathway::Textual => &self.text,
            Pathway::Visual => &self.visual,
        }
    }

    pub fn pathway_mut(&mut self, p: Pathway) -> &mut PathwayWeights {
        match p {
            Pathway::Textual => &mut self.text,
            Pathway::Visual => &mut self.visual,
        }
    }

    fn prepare(&self) -> PreparedBlock {
        PreparedBlock::routed(
            self.text.prepared(&self.w_o),
            self.visual.prepared(&self.w_o),
            &self.norm1,
            &self.norm2,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoupledModel {
    pub config: ModelConfig,
    pub blocks: Vec<DecoupledBlock>,
}

/// Splits every block into bitwise-identical textual and visual pathways.
pub fn decouple(model: &Model) -> DecoupledModel {
    DecoupledModel {
        config: model.config,
        blocks: model
            .blocks
            .iter()
            .map(|b| DecoupledBlock {
                text: PathwayWeights::copy_of(b),
                visual: PathwayWeights::copy_of(b),
                w_o: b.w_o.clone(),
                norm1: b.norm1.clone(),
                norm2: b.norm2.clone(),
            })
            .collect(),
    }
}

impl DecoupledModel {
    pub fn forward(&self, seq: &TokenSequence, opts: ForwardOptions) -> Result<ForwardTrace> {
        self.check_width(seq)?;
        let mut x = seq.embeddings.clone();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let t = b.prepare().run(&x, &seq.modality, self.config.n_heads, opts);
            x = t.output.clone();
            blocks.push(t);
        }
        Ok(ForwardTrace { blocks })
    }

    /// Number of token rows `seq` routes through `pathway` in each block.
    pub fn routed_rows(&self, seq: &TokenSequence, pathway: Pathway) -> usize {
        seq.count(pathway.modality())
    }

    fn check_width(&self, seq: &TokenSequence) -> Result<()> {
        if seq.embeddings.cols() != self.config.d_model {
            return Err(AtvError::DimensionMismatch(format!(
                "sample `{}` has width {}, model expects {}",
                seq.id,
                seq.embeddings.cols(),
                self.config.d_model
            )));
        }
        Ok(())
    }
}

impl OutputModel for DecoupledModel {
    fn block_outputs(&self, seq: &TokenSequence) -> Result<Vec<Matrix>> {
        Ok(self
            .forward(seq, ForwardOptions::hidden_only())?
            .blocks
            .into_iter()
            .map(|b| b.output)
            .collect())
    }
}

/// Masks for the five pathway layers of each block.
pub type PathwayMasks = Vec<BTreeMap<LayerKind, PruneMask>>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathwayPruneConfig {
    pub target: Pathway,
    /// `mixed_all`, `text_only` or `visual_only`.
    pub pool: PoolKind,
    pub pattern: SparsityPattern,
    pub group: ComparisonGroup,
    pub propagation: Propagation,
}

#[derive(Debug, Clone)]
pub struct PathwayOutcome {
    pub model: DecoupledModel,
    pub masks: PathwayMasks,
}

/// Prunes only `config.target`'s five layers in every block.
///
/// Channel norms come from the block's pre-routing activations at the
/// pool's positions, i.e. what a shared layer would have seen. That keeps
/// every pathway × pool combination computable, including text pathway
/// with a visual-only pool.
pub fn prune_pathway(
    model: &DecoupledModel,
    dataset: &[TokenSequence],
    config: &PathwayPruneConfig,
) -> Result<PathwayOutcome> {
    config.pattern.validate()?;
    if config.pool == PoolKind::Atv {
        return Err(AtvError::InvalidConfig(
            "the probe uses fixed-modality pools: mixed_all, text_only or visual_only".into(),
        ));
    }
    if dataset.is_empty() {
        return Err(AtvError::EmptyPathwayCalibration("no calibration samples".into()));
    }
    for s in dataset {
        model.check_width(s)?;
    }
    let n_heads = model.config.n_heads;
    let mut pruned = model.clone();
    let mut hidden: Vec<Matrix> = dataset.iter().map(|s| s.embeddings.clone()).collect();
    let pools: Vec<Vec<usize>> = dataset
        .iter()
        .map(|s| positions_for_pool(config.pool, &s.modality))
        .collect();
    let rows: usize = pools.iter().map(Vec::len).sum();
    if rows == 0 {
        return Err(AtvError::EmptyPathwayCalibration(format!(
            "{} pool selects no positions for the {} pathway",
            config.pool.name(),
            config.target.name()
        )));
    }
    let opts = ForwardOptions {
        activations: true,
        attention: false,
        causal: true,
    };
    let mut masks = Vec::with_capacity(model.blocks.len());

    for b in 0..model.blocks.len() {
        let dense_block = model.blocks[b].prepare();
        let traces: Vec<BlockTrace> = hidden
            .par_iter()
            .zip(dataset)
            .map(|(x, s)| dense_block.run(x, &s.modality, n_heads, opts))
            .collect();

        let mut block_masks = BTreeMap::new();
        for l in PATHWAY_LAYERS {
            let w = model.blocks[b]
                .pathway(config.target)
                .layer(l)
                .expect("pathway layer");
            let mut sums = vec![0.0f64; w.cols()];
            for (t, pool) in traces.iter().zip(&pools) {
                let x = t.layer_input(l).expect("activations captured");
                accumulate_column_squares(x, pool, &mut sums);
            }
            let norms: Vec<f64> = sums.into_iter().map(f64::sqrt).collect();
            let mask = generate_mask(&wanda_scores(w, &norms)?, config.pattern, config.group)?;
            mask.apply(
                pruned.blocks[b]
                    .pathway_mut(config.target)
                    .layer_mut(l)
                    .expect("pathway layer"),
            );
            block_masks.insert(l, mask);
        }
        masks.push(block_masks);

        hidden = match config.propagation {
            Propagation::Sequential => {
                let pb = pruned.blocks[b].prepare();
                hidden
                    .par_iter()
                    .zip(dataset)
                    .map(|(x, s)| pb.run(x, &s.modality, n_heads, ForwardOptions::hidden_only()).output)
                    .collect()
            }
            Propagation::Dense => traces.into_iter().map(|t| t.output).collect(),
        };
    }
    Ok(PathwayOutcome {
        model: pruned,
        masks,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskIoU {
    pub value: f64,
    /// Both masks pruned everything; `value` is reported as 1.
    pub both_empty: bool,
}

/// `|kept_a ∩ kept_b| / |kept_a ∪ kept_b|`.
pub fn mask_iou(a: &PruneMask, b: &PruneMask) -> Result<MaskIoU> {
    if a.shape() != b.shape() {
        return Err(AtvError::MaskMismatch(format!(
            "IoU of {:?} and {:?} masks",
            a.shape(),
            b.shape()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.keep().iter().zip(b.keep()) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    if union == 0 {
        return Ok(MaskIoU {
            value: 1.0,
            both_empty: true,
        });
    }
    Ok(MaskIoU {
        value: inter as f64 / union as f64,
        both_empty: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerIoU {
    pub block: usize,
    pub layer: LayerKind,
    pub iou: f64,
    pub both_empty: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskIoUStats {
    pub layers: Vec<LayerIoU>,
    pub min: f64,
    pub mean: f64,
    pub max: f64,
    /// Counts over ten equal-width bins of `[0, 1]`; 1.0 lands in the last.
    pub histogram: [usize; 10],
}

pub fn iou_stats(a: &PathwayMasks, b: &PathwayMasks) -> Result<MaskIoUStats> {
    if a.len() != b.len() {
        return Err(AtvError::MaskMismatch(format!("{} vs {} blocks", a.len(), b.len())));
    }
    let mut layers = Vec::new();
    for (block, (ma, mb)) in a.iter().zip(b).enumerate() {
        for (l, mask_a) in ma {
            let mask_b = mb.get(l).ok_or_else(|| {
                AtvError::MaskMismatch(format!("block {block} has no {} mask", l.name()))
            })?;
            let iou = mask_iou(mask_a, mask_b)?;
            layers.push(LayerIoU {
                block,
                layer: *l,
                iou: iou.value,
                both_empty: iou.both_empty,
            });
        }
    }
    let mut histogram = [0usize; 10];
    let (mut min, mut max, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
    for l in &layers {
        histogram[((l.iou * 10.0) as usize).min(9)] += 1;
        min = min.min(l.iou);
        max = max.max(l.iou);
        sum += l.iou;
    }
    let mean = if layers.is_empty() { 0.0 } else { sum / layers.len() as f64 };
    Ok(MaskIoUStats {
        layers,
        min,
        mean,
        max,
        histogram,
    })
}

/// One pathway × pool cell of the sensitivity grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub sparsity: f64,
    pub pathway: Pathway,
    pub pool: PoolKind,
    pub error: ClassErrors,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouRow {
    pub sparsity: f64,
    pub pathway: Pathway,
    pub block: usize,
    pub layer: LayerKind,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouSummary {
    pub sparsity: f64,
    pub pathway: Pathway,
    pub stats: MaskIoUStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeGrid {
    pub cells: Vec<GridCell>,
    /// Flat per-layer rows, one per (sparsity, pathway, block, layer).
    pub iou: Vec<IouRow>,
    pub summaries: Vec<IouSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub sparsities: Vec<f64>,
    pub group: ComparisonGroup,
    pub propagation: Propagation,
    /// The two pools whose masks are compared for IoU.
    pub iou_pools: (PoolKind, PoolKind),
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            sparsities: vec![0.5, 0.6],
            group: ComparisonGroup::default(),
            propagation: Propagation::default(),
            iou_pools: (PoolKind::TextOnly, PoolKind::VisualOnly),
        }
    }
}

pub const GRID_POOLS: [PoolKind; 3] = [PoolKind::TextOnly, PoolKind::VisualOnly, PoolKind::MixedAll];

/// Runs the 2 × 3 pathway × pool grid at each sparsity, evaluating on
/// `heldout`, plus per-layer IoU between the two configured pools.
pub fn run_probe_grid(
    model: &Model,
    calibration: &[TokenSequence],
    heldout: &[TokenSequence],
    config: &ProbeConfig,
) -> Result<ProbeGrid> {
    let dense = decouple(model);
    let mut cells = Vec::new();
    let mut iou = Vec::new();
    let mut summaries = Vec::new();
    for &rho in &config.sparsities {
        let pattern = SparsityPattern::Unstructured { rho };
        for pathway in Pathway::ALL {
            let mut masks_by_pool: BTreeMap<PoolKind, PathwayMasks> = BTreeMap::new();
            let mut pools: Vec<PoolKind> = GRID_POOLS.to_vec();
            for p in [config.iou_pools.0, config.iou_pools.1] {
                if !pools.contains(&p) {
                    pools.push(p);
                }
            }
            for pool in pools {
                let out = prune_pathway(
                    &dense,
                    calibration,
                    &PathwayPruneConfig {
                        target: pathway,
                        pool,
                        pattern,
                        group: config.group,
                        propagation: config.propagation,
                    },
                )?;
                if GRID_POOLS.contains(&pool) {
                    cells.push(GridCell {
                        sparsity: rho,
                        pathway,
                        pool,
                        error: evaluate_outputs(&dense, &out.model, heldout)?,
                    });
                }
                masks_by_pool.insert(pool, out.masks);
            }
            let stats = iou_stats(
                &masks_by_pool[&config.iou_pools.0],
                &masks_by_pool[&config.iou_pools.1],
            )?;
            iou.extend(stats.layers.iter().map(|l| IouRow {
                sparsity: rho,
                pathway,
                block: l.block,
                layer: l.layer,
                iou: l.iou,
            }));
            summaries.push(IouSummary {
                sparsity: rho,
                pathway,
                stats,
            });
        }
    }
    Ok(ProbeGrid { cells, iou, summaries })
}
