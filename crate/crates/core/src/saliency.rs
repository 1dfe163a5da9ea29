//! Visual-token saliency, block budgets and visual subset selection.
//!
//! Scores are reported as `(position, score)` pairs over a sample's visual
//! positions, in ascending position order.

use serde::{Deserialize, Serialize};

use crate::error::{AtvError, Result};
use crate::model::{BlockTrace, ForwardTrace, Modality, TokenSequence};
use crate::numerics::{cosine_distance, fnv1a, Rng};

/// A scored token position.
pub type Scored = (usize, f64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaliencySignal {
    /// `1 − cos(block input, block output)` per token.
    #[default]
    Drift,
    /// Mean attention received from text queries.
    #[serde(alias = "abs_attention")]
    Abs,
    /// Mean cosine distance to the sample's other visual tokens; selection
    /// switches to greedy max-min.
    #[serde(alias = "dbs_diversity")]
    Dbs,
    /// Uniform random subset; the budget still follows drift.
    Random,
}

impl SaliencySignal {
    pub fn name(self) -> &'static str {
        match self {
            SaliencySignal::Drift => "drift",
            SaliencySignal::Abs => "abs",
            SaliencySignal::Dbs => "dbs",
            SaliencySignal::Random => "random",
        }
    }
}

impl std::str::FromStr for SaliencySignal {
    type Err = AtvError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "drift" => Ok(Self::Drift),
            "abs" | "abs_attention" => Ok(Self::Abs),
            "dbs" | "dbs_diversity" => Ok(Self::Dbs),
            "random" => Ok(Self::Random),
            other => Err(AtvError::InvalidConfig(format!("unknown signal `{other}`"))),
        }
    }
}

fn block_of(trace: &ForwardTrace, block: usize) -> Result<&BlockTrace> {
    trace.blocks.get(block).ok_or_else(|| {
        AtvError::OutOfRange(format!(
            "block {block} of a trace with {} blocks",
            trace.blocks.len()
        ))
    })
}

/// Drift at the given positions of one block.
pub fn drift_at(block: &BlockTrace, positions: &[usize]) -> Vec<Scored> {
    positions
        .iter()
        .map(|&p| (p, cosine_distance(block.input.row(p), block.output.row(p))))
        .collect()
}

/// Visual drift `s_v = 1 − cos(X_in,v, X_out,v)` for every visual token.
pub fn drift_scores(trace: &ForwardTrace, seq: &TokenSequence, block: usize) -> Result<Vec<Scored>> {
    Ok(drift_at(block_of(trace, block)?, &seq.visual_positions()))
}

/// Attention-based saliency for one block: the mean over heads and over all
/// text queries of the attention each visual token receives.
pub fn abs_block(block: &BlockTrace, seq: &TokenSequence) -> Result<Vec<Scored>> {
    let text = seq.text_positions();
    if text.is_empty() {
        return Err(AtvError::AbsRequiresText(seq.id.clone()));
    }
    let heads = block.attention.as_ref().ok_or_else(|| {
        AtvError::InvalidConfig("attention-based saliency needs captured attention".into())
    })?;
    let denom = (heads.len() * text.len()) as f64;
    Ok(seq
        .visual_positions()
        .into_iter()
        .map(|v| {
            let mut sum = 0.0f64;
            for a in heads {
                for &t in &text {
                    sum += f64::from(a.get(t, v));
                }
            }
            (v, sum / denom)
        })
        .collect())
}

pub fn abs_scores(trace: &ForwardTrace, seq: &TokenSequence, block: usize) -> Result<Vec<Scored>> {
    abs_block(block_of(trace, block)?, seq)
}

/// Diversity saliency on block inputs: mean cosine distance from each
/// visual token to the sample's other visual tokens. A lone visual token
/// scores 0.
pub fn dbs_block(block: &BlockTrace, seq: &TokenSequence) -> Vec<Scored> {
    let vis = seq.visual_positions();
    let n = vis.len();
    if n < 2 {
        return vis.into_iter().map(|v| (v, 0.0)).collect();
    }
    let mut sums = vec![0.0f64; n];
    for a in 0..n {
        for b in a + 1..n {
            let d = cosine_distance(block.input.row(vis[a]), block.input.row(vis[b]));
            sums[a] += d;
            sums[b] += d;
        }
    }
    vis.into_iter()
        .zip(sums)
        .map(|(v, s)| (v, s / (n - 1) as f64))
        .collect()
}

pub fn dbs_scores(seq: &TokenSequence, trace: &ForwardTrace, block: usize) -> Result<Vec<Scored>> {
    Ok(dbs_block(block_of(trace, block)?, seq))
}

/// Scores for one block under `signal`. The random signal borrows drift so
/// its budget matches the drift run.
pub fn block_scores(signal: SaliencySignal, block: &BlockTrace, seq: &TokenSequence) -> Result<Vec<Scored>> {
    match signal {
        SaliencySignal::Drift | SaliencySignal::Random => Ok(drift_at(block, &seq.visual_positions())),
        SaliencySignal::Abs => abs_block(block, seq),
        SaliencySignal::Dbs => Ok(dbs_block(block, seq)),
    }
}

/// Arithmetic mean of every visual-token score at a block across the batch.
/// With no visual tokens at all the mean is 0, which forces `K = 0`.
pub fn block_mean_saliency<'a>(scores: impl IntoIterator<Item = &'a [Scored]>) -> f64 {
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for sample in scores {
        for &(_, s) in sample {
            sum += s;
            count += 1;
        }
    }
    if count == 0 {
        log::warn!("no visual tokens in the calibration batch; block mean saliency is 0");
        0.0
    } else {
        sum / count as f64
    }
}

/// Per-sample visual scores at one block plus their batch mean.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSaliency {
    pub signal: SaliencySignal,
    /// One entry per sample, in dataset order.
    pub scores: Vec<Vec<Scored>>,
    pub mean: f64,
}

impl BlockSaliency {
    pub fn compute(
        signal: SaliencySignal,
        traces: &[BlockTrace],
        seqs: &[TokenSequence],
    ) -> Result<Self> {
        let scores = traces
            .iter()
            .zip(seqs)
            .map(|(t, s)| block_scores(signal, t, s))
            .collect::<Result<Vec<_>>>()?;
        let mean = block_mean_saliency(scores.iter().map(Vec::as_slice));
        Ok(Self {
            signal,
            scores,
            mean,
        })
    }
}

/// Saliency for every block of a calibration run.
pub type SaliencyProfile = Vec<BlockSaliency>;

/// Visual-token budget rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetRule {
    pub alpha: f64,
    /// `Some(k)` switches off adaptivity: every sample gets `k` at this block.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_k: Option<usize>,
}

impl BudgetRule {
    pub fn adaptive(alpha: f64) -> Self {
        Self {
            alpha,
            fixed_k: None,
        }
    }

    pub fn fixed(k: usize) -> Self {
        Self {
            alpha: 0.0,
            fixed_k: Some(k),
        }
    }

    pub fn is_adaptive(&self) -> bool {
        self.fixed_k.is_none()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(AtvError::InvalidConfig(format!(
                "alpha must be a finite value >= 0, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// `K = ⌊α · s̄ · n_text⌋` in adaptive mode, the fixed constant otherwise.
pub fn budget(rule: &BudgetRule, mean_saliency: f64, n_text: usize) -> usize {
    if let Some(k) = rule.fixed_k {
        return k;
    }
    let k = (rule.alpha * mean_saliency * n_text as f64).floor();
    if k.is_nan() || k <= 0.0 {
        0
    } else {
        k as usize
    }
}

/// Total order used for ranking: higher score first, then smaller position.
/// `-0.0` and `0.0` count as the same score.
fn rank(a: &Scored, b: &Scored) -> std::cmp::Ordering {
    (b.1 + 0.0).total_cmp(&(a.1 + 0.0)).then(a.0.cmp(&b.0))
}

/// The `k` highest-scoring positions (ties: smaller position first),
/// returned in ascending position order.
pub fn select_topk(scores: &[Scored], k: usize) -> Vec<usize> {
    let mut ranked = scores.to_vec();
    if k < ranked.len() {
        if k == 0 {
            return Vec::new();
        }
        ranked.select_nth_unstable_by(k - 1, rank);
        ranked.truncate(k);
    }
    let mut out: Vec<usize> = ranked.into_iter().map(|(p, _)| p).collect();
    out.sort_unstable();
    out
}

/// Greedy farthest-point selection under cosine distance.
///
/// Seeds with the token of highest mean distance to the rest (the diversity
/// score), then repeatedly adds the token whose minimum distance to the
/// chosen set is largest; ties go to the smaller position. For metric
/// distances this greedy rule is a 2-approximation of the max-min
/// dispersion optimum. Returns positions in ascending order.
pub fn select_maxmin(reps: &crate::numerics::Matrix, positions: &[usize], k: usize) -> Vec<usize> {
    let n = positions.len();
    if k >= n {
        let mut all = positions.to_vec();
        all.sort_unstable();
        return all;
    }
    if k == 0 {
        return Vec::new();
    }
    let dist = |a: usize, b: usize| cosine_distance(reps.row(positions[a]), reps.row(positions[b]));

    let mut mean = vec![0.0f64; n];
    for a in 0..n {
        for b in a + 1..n {
            let d = dist(a, b);
            mean[a] += d;
            mean[b] += d;
        }
    }
    let argmax = |vals: &[f64], allowed: &[bool]| -> usize {
        let mut best: Option<usize> = None;
        for i in 0..n {
            if !allowed[i] {
                continue;
            }
            best = match best {
                None => Some(i),
                Some(b) if vals[i] > vals[b] || (vals[i] == vals[b] && positions[i] < positions[b]) => {
                    Some(i)
                }
                keep => keep,
            };
        }
        best.expect("at least one candidate")
    };

    let mut free = vec![true; n];
    let first = argmax(&mean, &free);
    free[first] = false;
    let mut chosen = vec![positions[first]];
    let mut min_d: Vec<f64> = (0..n).map(|i| dist(i, first)).collect();
    while chosen.len() < k {
        let next = argmax(&min_d, &free);
        free[next] = false;
        chosen.push(positions[next]);
        for i in 0..n {
            if free[i] {
                min_d[i] = min_d[i].min(dist(i, next));
            }
        }
    }
    chosen.sort_unstable();
    chosen
}

/// Uniform `k`-subset of `positions`.
pub fn select_random(rng: &mut Rng, positions: &[usize], k: usize) -> Vec<usize> {
    rng.sample(positions, k)
}

/// The generator used for random selection of one sample at one block.
/// Depends only on `(seed, sample id, block)`, never on execution order.
pub fn selection_rng(seed: u64, sample_id: &str, block: usize) -> Rng {
    Rng::derived(seed, &[fnv1a(sample_id.as_bytes()), block as u64])
}

/// Minimum pairwise cosine distance inside a subset (the max-min objective).
pub fn min_pairwise_distance(reps: &crate::numerics::Matrix, subset: &[usize]) -> f64 {
    let mut best = f64::INFINITY;
    for (i, &a) in subset.iter().enumerate() {
        for &b in &subset[i + 1..] {
            best = best.min(cosine_distance(reps.row(a), reps.row(b)));
        }
    }
    best
}

/// Positions of `seq` with modality `m`, used by callers that only hold a
/// label slice.
pub fn positions_of(modality: &[Modality], m: Modality) -> Vec<usize> {
    modality
        .iter()
        .enumerate()
        .filter_map(|(i, &x)| (x == m).then_some(i))
        .collect()
}
