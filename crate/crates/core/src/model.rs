//! Toy pre-norm decoder used as the pruning test vehicle.
//!
//! Each block computes `x' = x + Attn(RMSNorm(x))` then
//! `x'' = x' + W_down · silu(W_up · RMSNorm(x'))`, with causal multi-head
//! softmax attention and no positional encoding. Linear weights are stored
//! `out x in`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{AtvError, Result};
use crate::numerics::{dot, linear_f64_into, Matrix};
use crate::pruner::PruneMask;

pub const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Visual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_blocks == 0 || self.n_heads == 0 || self.d_ffn == 0 {
            return Err(AtvError::InvalidConfig(format!(
                "all model dimensions must be >= 1: {self:?}"
            )));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(AtvError::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// `(out, in)` shape of a prunable layer.
    pub fn layer_shape(&self, layer: LayerKind) -> (usize, usize) {
        match layer {
            LayerKind::Q | LayerKind::K | LayerKind::V | LayerKind::O => {
                (self.d_model, self.d_model)
            }
            LayerKind::Up => (self.d_ffn, self.d_model),
            LayerKind::Down => (self.d_model, self.d_ffn),
        }
    }
}

/// The six prunable linear layers of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    #[serde(rename = "q_proj")]
    Q,
    #[serde(rename = "k_proj")]
    K,
    #[serde(rename = "v_proj")]
    V,
    #[serde(rename = "o_proj")]
    O,
    #[serde(rename = "up_proj")]
    Up,
    #[serde(rename = "down_proj")]
    Down,
}

impl LayerKind {
    pub const ALL: [LayerKind; 6] = [
        LayerKind::Q,
        LayerKind::K,
        LayerKind::V,
        LayerKind::O,
        LayerKind::Up,
        LayerKind::Down,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Q => "q_proj",
            LayerKind::K => "k_proj",
            LayerKind::V => "v_proj",
            LayerKind::O => "o_proj",
            LayerKind::Up => "up_proj",
            LayerKind::Down => "down_proj",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|l| l.name() == name)
    }

    /// Where this layer reads its input from.
    pub fn site(self) -> ActivationSite {
        match self {
            LayerKind::Q | LayerKind::K | LayerKind::V => ActivationSite::AttnIn,
            LayerKind::O => ActivationSite::AttnOut,
            LayerKind::Up => ActivationSite::FfnIn,
            LayerKind::Down => ActivationSite::FfnHidden,
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Distinct layer-input tensors inside a block. q/k/v share one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ActivationSite {
    /// `RMSNorm₁(x)`, input of q/k/v.
    AttnIn,
    /// Concatenated head outputs, input of o.
    AttnOut,
    /// `RMSNorm₂(x')`, input of up.
    FfnIn,
    /// `silu(up)`, input of down.
    FfnHidden,
}

impl ActivationSite {
    pub const ALL: [ActivationSite; 4] = [
        ActivationSite::AttnIn,
        ActivationSite::AttnOut,
        ActivationSite::FfnIn,
        ActivationSite::FfnHidden,
    ];
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerBlock {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
    pub norm1: Vec<f32>,
    pub norm2: Vec<f32>,
}

impl TransformerBlock {
    pub fn zeros(config: &ModelConfig) -> Self {
        let m = |l: LayerKind| {
            let (o, i) = config.layer_shape(l);
            Matrix::zeros(o, i)
        };
        Self {
            w_q: m(LayerKind::Q),
            w_k: m(LayerKind::K),
            w_v: m(LayerKind::V),
            w_o: m(LayerKind::O),
            w_up: m(LayerKind::Up),
            w_down: m(LayerKind::Down),
            norm1: vec![1.0; config.d_model],
            norm2: vec![1.0; config.d_model],
        }
    }

    pub fn layer(&self, layer: LayerKind) -> &Matrix {
        match layer {
            LayerKind::Q => &self.w_q,
            LayerKind::K => &self.w_k,
            LayerKind::V => &self.w_v,
            LayerKind::O => &self.w_o,
            LayerKind::Up => &self.w_up,
            LayerKind::Down => &self.w_down,
        }
    }

    pub fn layer_mut(&mut self, layer: LayerKind) -> &mut Matrix {
        match layer {
            LayerKind::Q => &mut self.w_q,
            LayerKind::K => &mut self.w_k,
            LayerKind::V => &mut self.w_v,
            LayerKind::O => &mut self.w_o,
            LayerKind::Up => &mut self.w_up,
            LayerKind::Down => &mut self.w_down,
        }
    }

    pub(crate) fn prepare(&self) -> PreparedBlock {
        PreparedBlock::shared(
            LayerKind::ALL.map(|l| PreparedLinear::new(self.layer(l))),
            &self.norm1,
            &self.norm2,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub blocks: Vec<TransformerBlock>,
}

impl Model {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            blocks: (0..config.n_blocks)
                .map(|_| TransformerBlock::zeros(&config))
                .collect(),
        })
    }

    /// Checks that every tensor has the shape the config implies.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.blocks.len() != self.config.n_blocks {
            return Err(AtvError::DimensionMismatch(format!(
                "{} blocks, config says {}",
                self.blocks.len(),
                self.config.n_blocks
            )));
        }
        for (b, block) in self.blocks.iter().enumerate() {
            for l in LayerKind::ALL {
                if block.layer(l).shape() != self.config.layer_shape(l) {
                    return Err(AtvError::DimensionMismatch(format!(
                        "block {b} {} has shape {:?}, expected {:?}",
                        l.name(),
                        block.layer(l).shape(),
                        self.config.layer_shape(l)
                    )));
                }
            }
            if block.norm1.len() != self.config.d_model || block.norm2.len() != self.config.d_model
            {
                return Err(AtvError::DimensionMismatch(format!(
                    "block {b} norm gains have the wrong width"
                )));
            }
        }
        Ok(())
    }

    pub fn forward(&self, seq: &TokenSequence, opts: ForwardOptions) -> Result<ForwardTrace> {
        check_width(seq, self.config.d_model)?;
        let mut x = seq.embeddings.clone();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let trace = block.prepare().run(&x, &seq.modality, self.config.n_heads, opts);
            x = trace.output.clone();
            blocks.push(trace);
        }
        Ok(ForwardTrace { blocks })
    }

    /// Final hidden states only.
    pub fn output(&self, seq: &TokenSequence) -> Result<Matrix> {
        check_width(seq, self.config.d_model)?;
        let mut x = seq.embeddings.clone();
        for block in &self.blocks {
            x = block
                .prepare()
                .run(&x, &seq.modality, self.config.n_heads, ForwardOptions::hidden_only())
                .output;
        }
        Ok(x)
    }

    /// Zeroes every weight whose mask entry is `false`. Masks are required
    /// for all six layers of every block.
    pub fn apply_masks(&self, masks: &[BlockMasks]) -> Result<Model> {
        let mut out = self.clone();
        out.apply_masks_in_place(masks)?;
        Ok(out)
    }

    pub fn apply_masks_in_place(&mut self, masks: &[BlockMasks]) -> Result<()> {
        if masks.len() != self.blocks.len() {
            return Err(AtvError::MaskMismatch(format!(
                "{} block masks for {} blocks",
                masks.len(),
                self.blocks.len()
            )));
        }
        // Validate everything before touching any weight.
        for (b, (block, bm)) in self.blocks.iter().zip(masks).enumerate() {
            for l in LayerKind::ALL {
                let mask = bm.get(&l).ok_or_else(|| {
                    AtvError::MaskMismatch(format!("block {b} is missing a {} mask", l.name()))
                })?;
                check_congruent(block.layer(l), mask, b, l)?;
            }
        }
        for (block, bm) in self.blocks.iter_mut().zip(masks) {
            for l in LayerKind::ALL {
                bm[&l].apply(block.layer_mut(l));
            }
        }
        Ok(())
    }
}

/// Per-block masks keyed by layer.
pub type BlockMasks = BTreeMap<LayerKind, PruneMask>;

pub(crate) fn check_congruent(w: &Matrix, mask: &PruneMask, block: usize, l: LayerKind) -> Result<()> {
    if mask.shape() != w.shape() {
        return Err(AtvError::MaskMismatch(format!(
            "block {block} {} mask {:?} vs weight {:?}",
            l.name(),
            mask.shape(),
            w.shape()
        )));
    }
    Ok(())
}

fn check_width(seq: &TokenSequence, d_model: usize) -> Result<()> {
    if seq.embeddings.cols() != d_model {
        return Err(AtvError::DimensionMismatch(format!(
            "sample `{}` has width {}, model expects {d_model}",
            seq.id,
            seq.embeddings.cols()
        )));
    }
    Ok(())
}

/// One calibration/evaluation sample: embeddings plus per-token modality.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub id: String,
    pub embeddings: Matrix,
    pub modality: Vec<Modality>,
}

impl TokenSequence {
    pub fn new(id: impl Into<String>, embeddings: Matrix, modality: Vec<Modality>) -> Result<Self> {
        let id = id.into();
        if modality.len() != embeddings.rows() {
            return Err(AtvError::DimensionMismatch(format!(
                "sample `{id}`: {} modality labels for {} tokens",
                modality.len(),
                embeddings.rows()
            )));
        }
        if !modality.contains(&Modality::Text) {
            return Err(AtvError::InvalidConfig(format!(
                "sample `{id}` has no text token"
            )));
        }
        Ok(Self {
            id,
            embeddings,
            modality,
        })
    }

    pub fn len(&self) -> usize {
        self.modality.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modality.is_empty()
    }

    pub fn positions(&self, m: Modality) -> Vec<usize> {
        self.modality
            .iter()
            .enumerate()
            .filter_map(|(i, &x)| (x == m).then_some(i))
            .collect()
    }

    pub fn text_positions(&self) -> Vec<usize> {
        self.positions(Modality::Text)
    }

    pub fn visual_positions(&self) -> Vec<usize> {
        self.positions(Modality::Visual)
    }

    pub fn count(&self, m: Modality) -> usize {
        self.modality.iter().filter(|&&x| x == m).count()
    }
}

/// What a forward pass records beyond block inputs/outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    pub activations: bool,
    pub attention: bool,
    /// Causal masking; only tests switch it off.
    pub causal: bool,
}

impl ForwardOptions {
    pub fn hidden_only() -> Self {
        Self {
            activations: false,
            attention: false,
            causal: true,
        }
    }

    pub fn all() -> Self {
        Self {
            activations: true,
            attention: true,
            causal: true,
        }
    }
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self::all()
    }
}

/// Everything one block's forward exposes.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockTrace {
    /// Hidden state entering the block (before `norm1`).
    pub input: Matrix,
    /// Hidden state leaving the block (after the second residual).
    pub output: Matrix,
    /// Indexed like [`ActivationSite::ALL`].
    pub activations: Option<[Matrix; 4]>,
    /// Post-softmax attention weights, one `n x n` matrix per head.
    pub attention: Option<Vec<Matrix>>,
}

impl BlockTrace {
    pub fn site(&self, site: ActivationSite) -> Option<&Matrix> {
        self.activations.as_ref().map(|a| &a[site as usize])
    }

    pub fn layer_input(&self, layer: LayerKind) -> Option<&Matrix> {
        self.site(layer.site())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub blocks: Vec<BlockTrace>,
}

/// A linear layer widened to `f64` once so many samples can reuse it.
#[derive(Debug, Clone)]
pub(crate) struct PreparedLinear {
    out: usize,
    inp: usize,
    w: Vec<f64>,
}

impl PreparedLinear {
    pub(crate) fn new(m: &Matrix) -> Self {
        Self {
            out: m.rows(),
            inp: m.cols(),
            w: m.to_f64(),
        }
    }
}

/// Block weights ready for forward passes. `visual` is `None` for a shared
/// block; otherwise visual-token rows route through it.
#[derive(Debug, Clone)]
pub(crate) struct PreparedBlock {
    text: [PreparedLinear; 6],
    visual: Option<[PreparedLinear; 6]>,
    norm1: Vec<f64>,
    norm2: Vec<f64>,
}

impl PreparedBlock {
    pub(crate) fn shared(layers: [PreparedLinear; 6], norm1: &[f32], norm2: &[f32]) -> Self {
        Self {
            text: layers,
            visual: None,
            norm1: norm1.iter().map(|&g| f64::from(g)).collect(),
            norm2: norm2.iter().map(|&g| f64::from(g)).collect(),
        }
    }

    pub(crate) fn routed(
        text: [PreparedLinear; 6],
        visual: [PreparedLinear; 6],
        norm1: &[f32],
        norm2: &[f32],
    ) -> Self {
        let mut b = Self::shared(text, norm1, norm2);
        b.visual = Some(visual);
        b
    }

    /// Applies `layer` row-wise, choosing each row's weights by modality.
    fn project(&self, layer: LayerKind, x: &[f64], n: usize, modality: &[Modality]) -> Matrix {
        let t = &self.text[layer.index()];
        let mut out = Matrix::zeros(n, t.out);
        match &self.visual {
            None => linear_f64_into(x, n, &t.w, t.out, t.inp, out.data_mut()),
            Some(vis) => {
                let v = &vis[layer.index()];
                for (lin, m) in [(t, Modality::Text), (v, Modality::Visual)] {
                    let rows: Vec<usize> = (0..n).filter(|&i| modality[i] == m).collect();
                    if rows.is_empty() {
                        continue;
                    }
                    let mut xs = Vec::with_capacity(rows.len() * lin.inp);
                    for &r in &rows {
                        xs.extend_from_slice(&x[r * lin.inp..(r + 1) * lin.inp]);
                    }
                    let mut ys = vec![0.0f32; rows.len() * lin.out];
                    linear_f64_into(&xs, rows.len(), &lin.w, lin.out, lin.inp, &mut ys);
                    for (k, &r) in rows.iter().enumerate() {
                        out.row_mut(r)
                            .copy_from_slice(&ys[k * lin.out..(k + 1) * lin.out]);
                    }
                }
            }
        }
        out
    }

    pub(crate) fn run(
        &self,
        x: &Matrix,
        modality: &[Modality],
        n_heads: usize,
        opts: ForwardOptions,
    ) -> BlockTrace {
        let n = x.rows();
        let d = x.cols();
        debug_assert_eq!(modality.len(), n);

        let h1 = rms_norm(x, &self.norm1);
        let h1f = h1.to_f64();
        let q = self.project(LayerKind::Q, &h1f, n, modality);
        let k = self.project(LayerKind::K, &h1f, n, modality);
        let v = self.project(LayerKind::V, &h1f, n, modality);
        let (ctx, attn) = attention(&q, &k, &v, n_heads, opts.causal, opts.attention);
        let o = self.project(LayerKind::O, &ctx.to_f64(), n, modality);
        let x1 = add(x, &o);

        let h2 = rms_norm(&x1, &self.norm2);
        let up = self.project(LayerKind::Up, &h2.to_f64(), n, modality);
        let act = silu(&up);
        let down = self.project(LayerKind::Down, &act.to_f64(), n, modality);
        let out = add(&x1, &down);
        debug_assert_eq!(out.cols(), d);

        BlockTrace {
            input: x.clone(),
            output: out,
            activations: opts.activations.then(|| [h1, ctx, h2, act]),
            attention: attn,
        }
    }
}

fn rms_norm(x: &Matrix, gain: &[f64]) -> Matrix {
    let d = x.cols();
    let mut out = Matrix::zeros(x.rows(), d);
    for i in 0..x.rows() {
        let row = x.row(i);
        let ms = row.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>() / d as f64;
        let inv = 1.0 / (ms + RMS_EPS).sqrt();
        for (o, (&v, &g)) in out.row_mut(i).iter_mut().zip(row.iter().zip(gain)) {
            *o = (f64::from(v) * inv * g) as f32;
        }
    }
    out
}

fn add(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = a.clone();
    for (o, &v) in out.data_mut().iter_mut().zip(b.data()) {
        *o += v;
    }
    out
}

fn silu(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for v in out.data_mut() {
        let z = f64::from(*v);
        *v = (z / (1.0 + (-z).exp())) as f32;
    }
    out
}

/// Multi-head softmax attention. Returns the concatenated per-head context
/// and, if asked, the per-head weight matrices.
fn attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    n_heads: usize,
    causal: bool,
    keep_weights: bool,
) -> (Matrix, Option<Vec<Matrix>>) {
    let n = q.rows();
    let d = q.cols();
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut ctx = Matrix::zeros(n, d);
    let mut weights = keep_weights.then(|| Vec::with_capacity(n_heads));

    // Head-major f64 copies so every dot product runs over a contiguous slice.
    let split = |m: &Matrix, h: usize| -> Vec<f64> {
        let mut out = Vec::with_capacity(n * hd);
        for i in 0..n {
            out.extend(m.row(i)[h * hd..(h + 1) * hd].iter().map(|&x| f64::from(x)));
        }
        out
    };

    let mut logits = vec![0.0f64; n];
    let mut acc = vec![0.0f64; hd];
    for h in 0..n_heads {
        let qh = split(q, h);
        let kh = split(k, h);
        let vh = split(v, h);
        let mut wmat = keep_weights.then(|| Matrix::zeros(n, n));
        for i in 0..n {
            let visible = if causal { i + 1 } else { n };
            let qi = &qh[i * hd..(i + 1) * hd];
            let mut max = f64::NEG_INFINITY;
            for j in 0..visible {
                let s = dot(qi, &kh[j * hd..(j + 1) * hd]) * scale;
                logits[j] = s;
                max = max.max(s);
            }
            let mut sum = 0.0;
            for l in logits.iter_mut().take(visible) {
                *l = (*l - max).exp();
                sum += *l;
            }
            acc.iter_mut().for_each(|a| *a = 0.0);
            for j in 0..visible {
                let p = logits[j] / sum;
                logits[j] = p;
                for (a, &vv) in acc.iter_mut().zip(&vh[j * hd..(j + 1) * hd]) {
                    *a += p * vv;
                }
            }
            for (c, &a) in ctx.row_mut(i)[h * hd..(h + 1) * hd].iter_mut().zip(&acc) {
                *c = a as f32;
            }
            if let Some(w) = wmat.as_mut() {
                for (dst, &p) in w.row_mut(i).iter_mut().zip(&logits[..visible]) {
                    *dst = p as f32;
                }
            }
        }
        if let (Some(ws), Some(w)) = (weights.as_mut(), wmat) {
            ws.push(w);
        }
    }
    (ctx, weights)
}
