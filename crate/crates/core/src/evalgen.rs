//! Synthetic bimodal data, random toy models, and reconstruction-error
//! evaluation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{AtvError, Result};
use crate::model::{ForwardOptions, Model, ModelConfig, Modality, TokenSequence, TransformerBlock};
use crate::numerics::{Matrix, Rng};
use crate::pruner::{run_atv_pipeline, PipelineConfig};

/// Parameters of the synthetic two-cluster token distribution.
///
/// Text and visual means are supported on disjoint random sets of "hot"
/// channels (`hot_fraction · d_model` each) and sit `separation` apart;
/// tokens add isotropic noise with the modality's `sigma`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_samples: usize,
    pub n_visual: usize,
    pub n_text: usize,
    pub d_model: usize,
    pub separation: f64,
    pub sigma_text: f64,
    pub sigma_visual: f64,
    pub hot_fraction: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_samples: 80,
            n_visual: 64,
            n_text: 32,
            d_model: 32,
            separation: 10.0,
            sigma_text: 1.0,
            sigma_visual: 1.0,
            hot_fraction: 0.25,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AtvError::InvalidConfig(m));
        if self.n_samples == 0 || self.n_visual == 0 || self.n_text == 0 || self.d_model < 2 {
            return bad("n_samples, n_visual, n_text must be >= 1 and d_model >= 2".into());
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return bad(format!("separation must be finite and >= 0, got {}", self.separation));
        }
        if !(self.sigma_text >= 0.0 && self.sigma_visual >= 0.0) {
            return bad("sigmas must be >= 0".into());
        }
        if !(self.hot_fraction > 0.0 && self.hot_fraction <= 0.5) {
            return bad(format!("hot_fraction must be in (0, 0.5], got {}", self.hot_fraction));
        }
        Ok(())
    }

    pub fn hot_channels(&self) -> usize {
        ((self.hot_fraction * self.d_model as f64).round() as usize).clamp(1, self.d_model / 2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub calibration: Vec<TokenSequence>,
    pub heldout: Vec<TokenSequence>,
    pub text_mean: Vec<f64>,
    pub visual_mean: Vec<f64>,
}

impl SynthData {
    /// Calibration then held-out samples, in generation order.
    pub fn all(&self) -> Vec<TokenSequence> {
        self.calibration.iter().chain(&self.heldout).cloned().collect()
    }
}

/// Number of leading samples that form the calibration split.
pub fn calibration_split(n: usize) -> usize {
    ((n * 4) / 5).clamp(1, n.max(1))
}

/// Deterministic per seed. Each sample lays out its visual tokens first,
/// then its text tokens; the first 80% of samples are calibration.
pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let d = spec.d_model;
    let h = spec.hot_channels();
    let mut rng = Rng::derived(spec.seed, &[0x5359_4e54]);
    let mut channels: Vec<usize> = (0..d).collect();
    for i in (1..d).rev() {
        channels.swap(i, rng.below(i + 1));
    }
    // Orthogonal unit directions, so the means are `separation` apart.
    let amp = spec.separation / std::f64::consts::SQRT_2 / (h as f64).sqrt();
    let mut text_mean = vec![0.0; d];
    let mut visual_mean = vec![0.0; d];
    for k in 0..h {
        let sign = |r: &mut Rng| if r.next_u64() & 1 == 0 { 1.0 } else { -1.0 };
        text_mean[channels[k]] = amp * sign(&mut rng);
        visual_mean[channels[h + k]] = amp * sign(&mut rng);
    }

    let n = spec.n_visual + spec.n_text;
    let samples: Vec<TokenSequence> = (0..spec.n_samples)
        .map(|i| {
            let mut r = Rng::derived(spec.seed, &[1, i as u64]);
            let mut data = Vec::with_capacity(n * d);
            for t in 0..n {
                let (mu, sigma) = if t < spec.n_visual {
                    (&visual_mean, spec.sigma_visual)
                } else {
                    (&text_mean, spec.sigma_text)
                };
                data.extend(mu.iter().map(|&m| (m + sigma * r.normal()) as f32));
            }
            let modality = (0..n)
                .map(|t| if t < spec.n_visual { Modality::Visual } else { Modality::Text })
                .collect();
            let emb = Matrix::from_vec(n, d, data).expect("finite draws");
            TokenSequence::new(format!("synth-{}-{i:05}", spec.seed), emb, modality).expect("valid sample")
        })
        .collect();
    let split = calibration_split(samples.len());
    let mut calibration = samples;
    let heldout = calibration.split_off(split);
    Ok(SynthData {
        calibration,
        heldout,
        text_mean,
        visual_mean,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyModelSpec {
    pub config: ModelConfig,
    pub seed: u64,
    /// Weights are `N(0, (weight_scale² / fan_in))`.
    pub weight_scale: f64,
}

impl ToyModelSpec {
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        Self {
            config,
            seed,
            weight_scale: 1.0,
        }
    }
}

/// Random Gaussian toy model with unit norm gains.
pub fn toy_model(spec: &ToyModelSpec) -> Model {
    let cfg = spec.config;
    let blocks = (0..cfg.n_blocks)
        .map(|b| {
            let mut block = TransformerBlock::zeros(&cfg);
            for (li, l) in crate::model::LayerKind::ALL.into_iter().enumerate() {
                let mut rng = Rng::derived(spec.seed, &[2, b as u64, li as u64]);
                let w = block.layer_mut(l);
                let std = spec.weight_scale / (w.cols() as f64).sqrt();
                for v in w.data_mut() {
                    *v = (std * rng.normal()) as f32;
                }
            }
            block
        })
        .collect();
    Model { config: cfg, blocks }
}

/// Anything that maps a sequence to per-block hidden states.
pub trait OutputModel: Sync {
    fn block_outputs(&self, seq: &TokenSequence) -> Result<Vec<Matrix>>;

    fn output(&self, seq: &TokenSequence) -> Result<Matrix> {
        let mut outs = self.block_outputs(seq)?;
        Ok(outs.pop().unwrap_or_else(|| seq.embeddings.clone()))
    }
}

impl OutputModel for Model {
    fn block_outputs(&self, seq: &TokenSequence) -> Result<Vec<Matrix>> {
        Ok(self
            .forward(seq, ForwardOptions::hidden_only())?
            .blocks
            .into_iter()
            .map(|b| b.output)
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassErrors {
    pub text: f64,
    pub visual: f64,
    pub all: f64,
}

impl ClassErrors {
    /// `1 − error`, with the error clamped to `[0, 1]`.
    pub fn retention(&self) -> ClassErrors {
        let r = |e: f64| 1.0 - e.clamp(0.0, 1.0);
        ClassErrors {
            text: r(self.text),
            visual: r(self.visual),
            all: r(self.all),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Relative Frobenius error at the final block output.
    pub error: ClassErrors,
    pub retention: ClassErrors,
    /// All-position relative error after each block.
    pub block_errors: Vec<f64>,
}

/// Squared difference and squared reference sums for text, visual, all.
#[derive(Debug, Clone, Copy, Default)]
struct Sums {
    diff: [f64; 3],
    reference: [f64; 3],
}

impl Sums {
    fn add(&mut self, o: &Sums) {
        for c in 0..3 {
            self.diff[c] += o.diff[c];
            self.reference[c] += o.reference[c];
        }
    }

    fn of(dense: &Matrix, pruned: &Matrix, modality: &[Modality]) -> Sums {
        let mut s = Sums::default();
        for (i, m) in modality.iter().enumerate() {
            let c = match m {
                Modality::Text => 0,
                Modality::Visual => 1,
            };
            for (&a, &b) in dense.row(i).iter().zip(pruned.row(i)) {
                let (a, b) = (a as f64, b as f64);
                s.diff[c] += (a - b) * (a - b);
                s.reference[c] += a * a;
            }
        }
        s.diff[2] = s.diff[0] + s.diff[1];
        s.reference[2] = s.reference[0] + s.reference[1];
        s
    }

    fn errors(&self) -> ClassErrors {
        let e = |c: usize| relative_error(self.diff[c], self.reference[c]);
        ClassErrors {
            text: e(0),
            visual: e(1),
            all: e(2),
        }
    }
}

/// `sqrt(diff_sq / ref_sq)`; a zero reference gives 0 for a zero
/// difference and 1 otherwise.
fn relative_error(diff_sq: f64, ref_sq: f64) -> f64 {
    if ref_sq > 0.0 {
        (diff_sq / ref_sq).sqrt()
    } else if diff_sq == 0.0 {
        0.0
    } else {
        1.0
    }
}

fn check_congruent_configs(a: &dyn ConfigOf, b: &dyn ConfigOf) -> Result<()> {
    if a.config() != b.config() {
        return Err(AtvError::DimensionMismatch(format!(
            "cannot compare models with configs {:?} and {:?}",
            a.config(),
            b.config()
        )));
    }
    Ok(())
}

/// Access to the architecture shared by dense and pruned models.
pub trait ConfigOf {
    fn config(&self) -> ModelConfig;
}

impl ConfigOf for Model {
    fn config(&self) -> ModelConfig {
        self.config
    }
}

impl ConfigOf for crate::mot::DecoupledModel {
    fn config(&self) -> ModelConfig {
        self.config
    }
}

/// Full evaluation: final-output class errors, retention, per-block errors.
pub fn evaluate<D, P>(dense: &D, pruned: &P, heldout: &[TokenSequence]) -> Result<EvalResult>
where
    D: OutputModel + ConfigOf,
    P: OutputModel + ConfigOf,
{
    check_congruent_configs(dense, pruned)?;
    let per_sample: Vec<Vec<Sums>> = heldout
        .par_iter()
        .map(|s| {
            let a = dense.block_outputs(s)?;
            let b = pruned.block_outputs(s)?;
            Ok(a.iter().zip(&b).map(|(x, y)| Sums::of(x, y, &s.modality)).collect())
        })
        .collect::<Result<_>>()?;
    let n_blocks = dense.config().n_blocks;
    let mut totals = vec![Sums::default(); n_blocks];
    for sample in &per_sample {
        for (t, s) in totals.iter_mut().zip(sample) {
            t.add(s);
        }
    }
    let error = totals.last().map(Sums::errors).unwrap_or_default();
    Ok(EvalResult {
        error,
        retention: error.retention(),
        block_errors: totals.iter().map(|t| t.errors().all).collect(),
    })
}

/// Final-output class errors only; one forward per model and sample.
pub fn evaluate_outputs<D, P>(dense: &D, pruned: &P, heldout: &[TokenSequence]) -> Result<ClassErrors>
where
    D: OutputModel + ConfigOf,
    P: OutputModel + ConfigOf,
{
    check_congruent_configs(dense, pruned)?;
    let per_sample: Vec<Sums> = heldout
        .par_iter()
        .map(|s| Ok(Sums::of(&dense.output(s)?, &pruned.output(s)?, &s.modality)))
        .collect::<Result<_>>()?;
    let mut total = Sums::default();
    for s in &per_sample {
        total.add(s);
    }
    Ok(total.errors())
}

/// One row of the block-wise drift / budget table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftRow {
    pub block: usize,
    pub mean_saliency: f64,
    pub mean_budget: f64,
    pub selected_visual: usize,
}

/// Block-wise `s̄`, mean per-sample `K` and selected visual total, taken
/// from the same block-sequential run the pruner performs; with a no-op
/// pattern every block sees dense hidden states.
pub fn drift_report(model: &Model, dataset: &[TokenSequence], config: &PipelineConfig) -> Result<Vec<DriftRow>> {
    let out = run_atv_pipeline(model, dataset, config)?;
    Ok(out
        .report
        .blocks
        .iter()
        .map(|b| DriftRow {
            block: b.block,
            mean_saliency: b.mean_saliency,
            mean_budget: b.mean_budget,
            selected_visual: b.selected_visual_total,
        })
        .collect())
}
