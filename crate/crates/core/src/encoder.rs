//! A small ModernBERT-style encoder in `f64` with a hand-written backward pass.
//!
//! Layout per layer: pre-norm attention (rotary positions, global or local
//! sliding-window), then a pre-norm GeGLU feed-forward block. No biases in
//! the trunk; LayerNorm has a gain only. The MLM head is dense + GELU +
//! LayerNorm followed by a decoder tied to the token embedding, plus an
//! output bias.
//!
//! Matrices are stored `in x out` and applied as `x.dot(W)`.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, ArrayViewMut2, Axis};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::par::{self, Exec};
use crate::rng;
use crate::schedule::{LayerKind, RoPEBaseSchedule};
use crate::{Error, Result};

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderPreset {
    Tiny,
    Base,
    Large,
}

impl EncoderPreset {
    pub const ALL: [EncoderPreset; 3] = [EncoderPreset::Tiny, EncoderPreset::Base, EncoderPreset::Large];

    pub fn name(self) -> &'static str {
        match self {
            EncoderPreset::Tiny => "tiny",
            EncoderPreset::Base => "base",
            EncoderPreset::Large => "large",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }

    /// (layers, hidden, intermediate, heads)
    pub fn dims(self) -> (usize, usize, usize, usize) {
        match self {
            EncoderPreset::Tiny => (6, 768, 1152, 12),
            EncoderPreset::Base => (22, 768, 1152, 12),
            EncoderPreset::Large => (28, 1024, 2624, 16),
        }
    }

    /// Planned vocabulary for this size.
    pub fn vocab_size(self) -> usize {
        match self {
            EncoderPreset::Tiny => 27_264,
            EncoderPreset::Base => 42_240,
            EncoderPreset::Large => 55_616,
        }
    }
}

/// Vocabulary of the "-short" sibling models.
pub const SHORT_VOCAB: usize = 128_000;

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub intermediate: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    /// Layer `i` is global when `i % global_layer_period == 0`.
    pub global_layer_period: usize,
    pub local_window: usize,
    pub rope: RoPEBaseSchedule,
    #[serde(default = "yes")]
    pub use_rope: bool,
    #[serde(default = "yes")]
    pub tied_head: bool,
}

impl EncoderConfig {
    pub fn preset(preset: EncoderPreset) -> Self {
        let (layers, hidden, intermediate, heads) = preset.dims();
        EncoderConfig {
            layers,
            hidden,
            intermediate,
            heads,
            vocab_size: preset.vocab_size(),
            max_seq: 16_384,
            global_layer_period: 3,
            local_window: 128,
            rope: RoPEBaseSchedule::default(),
            use_rope: true,
            tied_head: true,
        }
    }

    /// `tiny`, `base`, `large`, or the same with a `-short` suffix.
    pub fn from_preset_name(name: &str) -> Option<Self> {
        let (base, short) = match name.strip_suffix("-short") {
            Some(b) => (b, true),
            None => (name, false),
        };
        let mut cfg = Self::preset(EncoderPreset::from_name(base)?);
        if short {
            cfg.vocab_size = SHORT_VOCAB;
        }
        Some(cfg)
    }

    /// Two-layer model small enough for finite-difference checks.
    pub fn toy(vocab_size: usize) -> Self {
        EncoderConfig {
            layers: 2,
            hidden: 16,
            intermediate: 24,
            heads: 2,
            vocab_size,
            max_seq: 64,
            global_layer_period: 2,
            local_window: 4,
            rope: RoPEBaseSchedule::default(),
            use_rope: true,
            tied_head: true,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads.max(1)
    }

    pub fn layer_kind(&self, layer: usize) -> LayerKind {
        if layer.is_multiple_of(self.global_layer_period.max(1)) {
            LayerKind::Global
        } else {
            LayerKind::Local
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut errs = Vec::new();
        for (name, v) in [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("intermediate", self.intermediate),
            ("heads", self.heads),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
            ("global_layer_period", self.global_layer_period),
            ("local_window", self.local_window),
        ] {
            if v == 0 {
                errs.push(format!("encoder.{name}: must be > 0"));
            }
        }
        if self.heads > 0 && !self.hidden.is_multiple_of(self.heads) {
            errs.push(format!(
                "encoder.heads: hidden {} not divisible by heads {}",
                self.hidden, self.heads
            ));
        } else if self.heads > 0 && !self.head_dim().is_multiple_of(2) {
            errs.push(format!("encoder.heads: head_dim {} must be even", self.head_dim()));
        }
        for (name, b) in [
            ("global_base_stable", self.rope.global_base_stable),
            ("global_base_extended", self.rope.global_base_extended),
            ("local_base", self.rope.local_base),
        ] {
            if !(b.is_finite() && b > 1.0) {
                errs.push(format!("encoder.rope.{name}: must be > 1, got {b}"));
            }
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let errs = self.violations();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::config(errs.join("; ")))
        }
    }

    pub fn embedding_params(&self) -> u64 {
        (self.vocab_size * self.hidden) as u64
    }

    pub fn param_count(&self) -> u64 {
        let h = self.hidden as u64;
        let i = self.intermediate as u64;
        let per_layer = 4 * h * h + h * 2 * i + i * h + 2 * h;
        let head = h * h + h + self.vocab_size as u64;
        let decoder = if self.tied_head { 0 } else { self.embedding_params() };
        self.embedding_params() + h + self.layers as u64 * per_layer + h + head + decoder
    }

    pub fn non_embedding_params(&self) -> u64 {
        self.param_count() - self.embedding_params()
    }
}

// ---------------------------------------------------------------------------
// Parameters

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl ParamTensor {
    pub fn validate(&self) -> Result<()> {
        let n: usize = self.shape.iter().product();
        if n != self.values.len() {
            return Err(Error::Checkpoint(format!(
                "{}: shape {:?} holds {n} values, found {}",
                self.name,
                self.shape,
                self.values.len()
            )));
        }
        if let Some(v) = self.values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Checkpoint(format!("{}: non-finite value {v}", self.name)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub attn_norm: Array1<f64>,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub mlp_norm: Array1<f64>,
    /// `H x 2I`: gate columns first, then up-projection columns.
    pub wi: Array2<f64>,
    pub wo_mlp: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    /// `V x H`
    pub embed: Array2<f64>,
    pub embed_norm: Array1<f64>,
    pub layers: Vec<LayerParams>,
    pub final_norm: Array1<f64>,
    pub head_dense: Array2<f64>,
    pub head_norm: Array1<f64>,
    pub decoder_bias: Array1<f64>,
    /// `V x H`, only when the head is untied.
    pub decoder: Option<Array2<f64>>,
}

impl EncoderParams {
    pub fn zeros(cfg: &EncoderConfig) -> Self {
        let (h, i, v) = (cfg.hidden, cfg.intermediate, cfg.vocab_size);
        let sq = || Array2::zeros((h, h));
        EncoderParams {
            embed: Array2::zeros((v, h)),
            embed_norm: Array1::zeros(h),
            layers: (0..cfg.layers)
                .map(|_| LayerParams {
                    attn_norm: Array1::zeros(h),
                    wq: sq(),
                    wk: sq(),
                    wv: sq(),
                    wo: sq(),
                    mlp_norm: Array1::zeros(h),
                    wi: Array2::zeros((h, 2 * i)),
                    wo_mlp: Array2::zeros((i, h)),
                })
                .collect(),
            final_norm: Array1::zeros(h),
            head_dense: sq(),
            head_norm: Array1::zeros(h),
            decoder_bias: Array1::zeros(v),
            decoder: (!cfg.tied_head).then(|| Array2::zeros((v, h))),
        }
    }

    /// Normal(0, 0.02) weights, output projections scaled by `1/sqrt(2L)`,
    /// unit norm gains, zero bias.
    pub fn init(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut p = Self::zeros(cfg);
        let mut rng = rng::substream(seed, "encoder.init");
        let out_std = INIT_STD / (2.0 * cfg.layers as f64).sqrt();
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let out_normal = Normal::new(0.0, out_std).expect("valid std");
        for (name, values) in p.fields_mut() {
            if name.ends_with("norm") {
                values.fill(1.0);
            } else if name.ends_with("bias") {
                values.fill(0.0);
            } else if name.ends_with(".wo") || name.ends_with(".wo_mlp") {
                values.iter_mut().for_each(|x| *x = out_normal.sample(&mut rng));
            } else {
                values.iter_mut().for_each(|x| *x = normal.sample(&mut rng));
            }
        }
        Ok(p)
    }

    /// Named flat views in a fixed order.
    pub fn fields(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        fn a2(name: String, a: &Array2<f64>) -> (String, Vec<usize>, &[f64]) {
            (name, a.shape().to_vec(), a.as_slice().expect("standard layout"))
        }
        fn a1(name: String, a: &Array1<f64>) -> (String, Vec<usize>, &[f64]) {
            (name, a.shape().to_vec(), a.as_slice().expect("standard layout"))
        }
        let mut out = vec![a2("embed".into(), &self.embed), a1("embed_norm".into(), &self.embed_norm)];
        for (i, l) in self.layers.iter().enumerate() {
            out.push(a1(format!("layers.{i}.attn_norm"), &l.attn_norm));
            out.push(a2(format!("layers.{i}.wq"), &l.wq));
            out.push(a2(format!("layers.{i}.wk"), &l.wk));
            out.push(a2(format!("layers.{i}.wv"), &l.wv));
            out.push(a2(format!("layers.{i}.wo"), &l.wo));
            out.push(a1(format!("layers.{i}.mlp_norm"), &l.mlp_norm));
            out.push(a2(format!("layers.{i}.wi"), &l.wi));
            out.push(a2(format!("layers.{i}.wo_mlp"), &l.wo_mlp));
        }
        out.push(a1("final_norm".into(), &self.final_norm));
        out.push(a2("head_dense".into(), &self.head_dense));
        out.push(a1("head_norm".into(), &self.head_norm));
        out.push(a1("decoder_bias".into(), &self.decoder_bias));
        if let Some(d) = &self.decoder {
            out.push(a2("decoder".into(), d));
        }
        out
    }

    pub fn fields_mut(&mut self) -> Vec<(String, &mut [f64])> {
        fn m<D: ndarray::Dimension>(name: String, a: &mut ndarray::Array<f64, D>) -> (String, &mut [f64]) {
            (name, a.as_slice_mut().expect("standard layout"))
        }
        let mut out = vec![m("embed".into(), &mut self.embed), m("embed_norm".into(), &mut self.embed_norm)];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push(m(format!("layers.{i}.attn_norm"), &mut l.attn_norm));
            out.push(m(format!("layers.{i}.wq"), &mut l.wq));
            out.push(m(format!("layers.{i}.wk"), &mut l.wk));
            out.push(m(format!("layers.{i}.wv"), &mut l.wv));
            out.push(m(format!("layers.{i}.wo"), &mut l.wo));
            out.push(m(format!("layers.{i}.mlp_norm"), &mut l.mlp_norm));
            out.push(m(format!("layers.{i}.wi"), &mut l.wi));
            out.push(m(format!("layers.{i}.wo_mlp"), &mut l.wo_mlp));
        }
        out.push(m("final_norm".into(), &mut self.final_norm));
        out.push(m("head_dense".into(), &mut self.head_dense));
        out.push(m("head_norm".into(), &mut self.head_norm));
        out.push(m("decoder_bias".into(), &mut self.decoder_bias));
        if let Some(d) = &mut self.decoder {
            out.push(m("decoder".into(), d));
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.fields().iter().map(|(_, _, v)| v.len()).sum()
    }

    pub fn tensors(&self) -> Vec<ParamTensor> {
        self.fields()
            .into_iter()
            .map(|(name, shape, values)| ParamTensor {
                name,
                shape,
                values: values.to_vec(),
            })
            .collect()
    }

    pub fn from_tensors(cfg: &EncoderConfig, tensors: &[ParamTensor]) -> Result<Self> {
        let mut p = Self::zeros(cfg);
        let expected: Vec<(String, Vec<usize>)> = p.fields().into_iter().map(|(n, s, _)| (n, s)).collect();
        if expected.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in expected.iter().zip(tensors) {
            t.validate()?;
            if &t.name != name || &t.shape != shape {
                return Err(Error::Checkpoint(format!(
                    "tensor mismatch: expected {name} {shape:?}, found {} {:?}",
                    t.name, t.shape
                )));
            }
        }
        for ((_, dst), t) in p.fields_mut().into_iter().zip(tensors) {
            dst.copy_from_slice(&t.values);
        }
        Ok(p)
    }

    pub fn add_assign(&mut self, other: &EncoderParams) {
        let src = other.fields();
        for ((_, dst), (_, _, s)) in self.fields_mut().into_iter().zip(src) {
            dst.iter_mut().zip(s).for_each(|(d, x)| *d += x);
        }
    }

    pub fn scale(&mut self, k: f64) {
        for (_, v) in self.fields_mut() {
            v.iter_mut().for_each(|x| *x *= k);
        }
    }

    fn decoder_matrix(&self) -> &Array2<f64> {
        self.decoder.as_ref().unwrap_or(&self.embed)
    }
}

// ---------------------------------------------------------------------------
// RoPE

#[derive(Debug, Clone, PartialEq)]
pub struct RoPEParams {
    pub base: f64,
    pub head_dim: usize,
    /// `base^(-2i/d)` for `i` in `0..d/2`.
    pub thetas: Vec<f64>,
}

impl RoPEParams {
    pub fn new(base: f64, head_dim: usize) -> Result<Self> {
        if head_dim == 0 || !head_dim.is_multiple_of(2) {
            return Err(Error::config(format!("rope: head_dim {head_dim} must be even and > 0")));
        }
        if !(base.is_finite() && base > 1.0) {
            return Err(Error::config(format!("rope: base {base} must be > 1")));
        }
        let thetas = (0..head_dim / 2)
            .map(|i| base.powf(-2.0 * i as f64 / head_dim as f64))
            .collect();
        Ok(RoPEParams { base, head_dim, thetas })
    }

    /// Rotation angle of pair `i` at `position`.
    pub fn angle(&self, i: usize, position: usize) -> f64 {
        position as f64 * self.thetas[i]
    }
}

/// Rotate one vector in place as if it sat at `position`. `sign = -1`
/// applies the inverse rotation.
fn rotate(x: &mut [f64], position: usize, params: &RoPEParams, sign: f64) {
    for (i, &theta) in params.thetas.iter().enumerate() {
        let (sin, cos) = (sign * position as f64 * theta).sin_cos();
        let (a, b) = (x[2 * i], x[2 * i + 1]);
        x[2 * i] = a * cos - b * sin;
        x[2 * i + 1] = a * sin + b * cos;
    }
}

pub fn rope_rotate(x: &mut [f64], position: usize, params: &RoPEParams) -> Result<()> {
    if x.len() != params.head_dim {
        return Err(Error::input(format!(
            "rope: vector length {} != head_dim {}",
            x.len(),
            params.head_dim
        )));
    }
    rotate(x, position, params, 1.0);
    Ok(())
}

/// Rotate every row `p` of a `[positions x head_dim]` matrix by angle `p * theta_i`.
pub fn rope_apply(x: &Array2<f64>, params: &RoPEParams) -> Result<Array2<f64>> {
    if x.ncols() != params.head_dim {
        return Err(Error::input(format!(
            "rope: {} columns != head_dim {}",
            x.ncols(),
            params.head_dim
        )));
    }
    let mut out = x.to_owned();
    rope_rows(out.view_mut(), params, 1.0);
    Ok(out)
}

fn rope_rows(mut x: ArrayViewMut2<f64>, params: &RoPEParams, sign: f64) {
    for (p, mut row) in x.outer_iter_mut().enumerate() {
        let mut buf: Vec<f64> = row.iter().copied().collect();
        rotate(&mut buf, p, params, sign);
        row.iter_mut().zip(buf).for_each(|(r, b)| *r = b);
    }
}

// ---------------------------------------------------------------------------
// Attention

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub output: Array2<f64>,
    /// Row-stochastic attention weights.
    pub weights: Array2<f64>,
}

pub fn attention_allows(i: usize, j: usize, kind: LayerKind, window: usize) -> bool {
    match kind {
        LayerKind::Global => true,
        LayerKind::Local => 2 * i.abs_diff(j) <= window,
    }
}

fn softmax_rows(scores: &mut Array2<f64>) {
    for mut row in scores.outer_iter_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
}

fn attention_weights(q: ArrayView2<f64>, k: ArrayView2<f64>, kind: LayerKind, window: usize) -> Array2<f64> {
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let mut scores = q.dot(&k.t()) * scale;
    if kind == LayerKind::Local {
        for ((i, j), s) in scores.indexed_iter_mut() {
            if !attention_allows(i, j, kind, window) {
                *s = f64::NEG_INFINITY;
            }
        }
    }
    softmax_rows(&mut scores);
    scores
}

/// Scaled dot-product attention for one head. Rotary embedding, if any, must
/// already be applied to `q` and `k`.
pub fn attention(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    kind: LayerKind,
    window: usize,
) -> Result<AttentionOutput> {
    if kind == LayerKind::Local && window == 0 {
        return Err(Error::config("attention: local window must be > 0"));
    }
    if q.dim() != k.dim() || q.nrows() != v.nrows() || q.nrows() == 0 {
        return Err(Error::input(format!(
            "attention: shapes q {:?}, k {:?}, v {:?} do not conform",
            q.dim(),
            k.dim(),
            v.dim()
        )));
    }
    let weights = attention_weights(q.view(), k.view(), kind, window);
    Ok(AttentionOutput {
        output: weights.dot(v),
        weights,
    })
}

// ---------------------------------------------------------------------------
// Building blocks

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let t = (C * (x + 0.044_715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044_715 * x * x)
}

struct NormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, gamma: &Array1<f64>) -> (Array2<f64>, NormCache) {
    let h = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, is) in xhat.outer_iter_mut().zip(inv_std.iter_mut()) {
        let mean = row.sum() / h;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h;
        *is = 1.0 / (var + LN_EPS).sqrt();
        let s = *is;
        row.mapv_inplace(|v| (v - mean) * s);
    }
    let y = &xhat * gamma;
    (y, NormCache { xhat, inv_std })
}

fn layer_norm_backward(dy: &Array2<f64>, gamma: &Array1<f64>, c: &NormCache, dgamma: &mut Array1<f64>) -> Array2<f64> {
    *dgamma += &(dy * &c.xhat).sum_axis(Axis(0));
    let h = dy.ncols() as f64;
    let dxhat = dy * gamma;
    let mut dx = Array2::zeros(dy.dim());
    for r in 0..dy.nrows() {
        let dh = dxhat.row(r);
        let xh = c.xhat.row(r);
        let mean_dh = dh.sum() / h;
        let mean_dhx = dh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / h;
        let s = c.inv_std[r];
        for ((d, &a), &b) in dx.row_mut(r).iter_mut().zip(dh).zip(xh) {
            *d = s * (a - mean_dh - b * mean_dhx);
        }
    }
    dx
}

struct LayerCache {
    n1: NormCache,
    xn1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    concat: Array2<f64>,
    rope: Option<RoPEParams>,
    n2: NormCache,
    xn2: Array2<f64>,
    hpre: Array2<f64>,
    act: Array2<f64>,
}

struct Trunk {
    embed_cache: NormCache,
    layers: Vec<LayerCache>,
    final_cache: NormCache,
    z: Array2<f64>,
}

fn check_ids(cfg: &EncoderConfig, ids: &[u32]) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::input("forward: empty sequence"));
    }
    if ids.len() > cfg.max_seq {
        return Err(Error::input(format!(
            "forward: length {} exceeds max_seq {}",
            ids.len(),
            cfg.max_seq
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(Error::input(format!(
            "forward: token id {bad} out of range for vocab {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

fn layer_forward(
    cfg: &EncoderConfig,
    lp: &LayerParams,
    kind: LayerKind,
    step: u64,
    x: &Array2<f64>,
) -> Result<(Array2<f64>, LayerCache)> {
    let d = cfg.head_dim();
    let (xn1, n1) = layer_norm(x, &lp.attn_norm);
    let mut q = xn1.dot(&lp.wq);
    let mut k = xn1.dot(&lp.wk);
    let v = xn1.dot(&lp.wv);
    let rope = if cfg.use_rope {
        Some(RoPEParams::new(cfg.rope.base_at(step, kind), d)?)
    } else {
        None
    };
    let mut concat = Array2::zeros(q.dim());
    let mut probs = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let cols = s![.., h * d..(h + 1) * d];
        if let Some(r) = &rope {
            rope_rows(q.slice_mut(cols), r, 1.0);
            rope_rows(k.slice_mut(cols), r, 1.0);
        }
        let p = attention_weights(q.slice(cols), k.slice(cols), kind, cfg.local_window);
        concat.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
        probs.push(p);
    }
    let x_mid = x + &concat.dot(&lp.wo);
    let (xn2, n2) = layer_norm(&x_mid, &lp.mlp_norm);
    let hpre = xn2.dot(&lp.wi);
    let i = cfg.intermediate;
    let gate = hpre.slice(s![.., ..i]);
    let up = hpre.slice(s![.., i..]);
    let act = gate.mapv(gelu) * up;
    let out = &x_mid + &act.dot(&lp.wo_mlp);
    Ok((
        out,
        LayerCache {
            n1,
            xn1,
            q,
            k,
            v,
            probs,
            concat,
            rope,
            n2,
            xn2,
            hpre,
            act,
        },
    ))
}

fn layer_backward(cfg: &EncoderConfig, lp: &LayerParams, c: &LayerCache, dout: &Array2<f64>, g: &mut LayerParams) -> Array2<f64> {
    let d = cfg.head_dim();
    let i = cfg.intermediate;

    // feed-forward
    g.wo_mlp += &c.act.t().dot(dout);
    let dact = dout.dot(&lp.wo_mlp.t());
    let gate = c.hpre.slice(s![.., ..i]);
    let up = c.hpre.slice(s![.., i..]);
    let mut dh = Array2::zeros(c.hpre.dim());
    dh.slice_mut(s![.., ..i]).assign(&(&dact * &up * gate.mapv(gelu_grad)));
    dh.slice_mut(s![.., i..]).assign(&(&dact * &gate.mapv(gelu)));
    g.wi += &c.xn2.t().dot(&dh);
    let dxn2 = dh.dot(&lp.wi.t());
    let dx_mid = dout + &layer_norm_backward(&dxn2, &lp.mlp_norm, &c.n2, &mut g.mlp_norm);

    // attention
    g.wo += &c.concat.t().dot(&dx_mid);
    let dconcat = dx_mid.dot(&lp.wo.t());
    let scale = 1.0 / (d as f64).sqrt();
    let mut dq = Array2::zeros(c.q.dim());
    let mut dk = Array2::zeros(c.k.dim());
    let mut dv = Array2::zeros(c.v.dim());
    for (h, p) in c.probs.iter().enumerate() {
        let cols = s![.., h * d..(h + 1) * d];
        let doh = dconcat.slice(cols);
        let dp = doh.dot(&c.v.slice(cols).t());
        dv.slice_mut(cols).assign(&p.t().dot(&doh));
        let row_dot = (&dp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ds = p * &(&dp - &row_dot) * scale;
        dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
        if let Some(r) = &c.rope {
            rope_rows(dq.slice_mut(cols), r, -1.0);
            rope_rows(dk.slice_mut(cols), r, -1.0);
        }
    }
    g.wq += &c.xn1.t().dot(&dq);
    g.wk += &c.xn1.t().dot(&dk);
    g.wv += &c.xn1.t().dot(&dv);
    let dxn1 = dq.dot(&lp.wq.t()) + dk.dot(&lp.wk.t()) + dv.dot(&lp.wv.t());
    dx_mid + layer_norm_backward(&dxn1, &lp.attn_norm, &c.n1, &mut g.attn_norm)
}

fn trunk_forward(cfg: &EncoderConfig, p: &EncoderParams, ids: &[u32], step: u64) -> Result<Trunk> {
    check_ids(cfg, ids)?;
    let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let e = p.embed.select(Axis(0), &idx);
    let (mut x, embed_cache) = layer_norm(&e, &p.embed_norm);
    let mut layers = Vec::with_capacity(cfg.layers);
    for (li, lp) in p.layers.iter().enumerate() {
        let (next, cache) = layer_forward(cfg, lp, cfg.layer_kind(li), step, &x)?;
        x = next;
        layers.push(cache);
    }
    let (z, final_cache) = layer_norm(&x, &p.final_norm);
    Ok(Trunk {
        embed_cache,
        layers,
        final_cache,
        z,
    })
}

struct HeadCache {
    zr: Array2<f64>,
    u: Array2<f64>,
    hn: Array2<f64>,
    norm: NormCache,
}

fn head_forward(p: &EncoderParams, zr: Array2<f64>) -> (Array2<f64>, HeadCache) {
    let u = zr.dot(&p.head_dense);
    let (hn, norm) = layer_norm(&u.mapv(gelu), &p.head_norm);
    let logits = hn.dot(&p.decoder_matrix().t()) + &p.decoder_bias;
    (logits, HeadCache { zr, u, hn, norm })
}

/// Logits `[len x vocab_size]` for one sequence at training step `step`
/// (the step selects the rotary base).
pub fn forward(cfg: &EncoderConfig, p: &EncoderParams, ids: &[u32], step: u64) -> Result<Array2<f64>> {
    cfg.validate()?;
    let trunk = trunk_forward(cfg, p, ids, step)?;
    Ok(head_forward(p, trunk.z).0)
}

// ---------------------------------------------------------------------------
// Loss

#[derive(Debug, Clone, PartialEq)]
pub struct MlmLoss {
    /// Mean cross-entropy over labelled positions.
    pub loss: f64,
    pub labelled: usize,
    /// d loss / d logits.
    pub grad: Array2<f64>,
}

fn cross_entropy_sum(logits: &Array2<f64>, targets: &[u32]) -> (f64, Array2<f64>) {
    let mut probs = logits.to_owned();
    softmax_rows(&mut probs);
    let mut loss = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        loss += lse - row[t as usize];
        probs[[r, t as usize]] -= 1.0;
    }
    (loss, probs)
}

/// Mean cross-entropy over positions whose label is `Some`.
pub fn mlm_loss(logits: &Array2<f64>, labels: &[Option<u32>]) -> Result<MlmLoss> {
    if labels.len() != logits.nrows() {
        return Err(Error::input(format!(
            "mlm_loss: {} labels for {} positions",
            labels.len(),
            logits.nrows()
        )));
    }
    let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_some()).collect();
    if rows.is_empty() {
        return Err(Error::input("mlm_loss: every position is ignored"));
    }
    let targets: Vec<u32> = rows.iter().map(|&i| labels[i].expect("filtered")).collect();
    if let Some(&t) = targets.iter().find(|&&t| t as usize >= logits.ncols()) {
        return Err(Error::input(format!("mlm_loss: label {t} out of range")));
    }
    let sel = logits.select(Axis(0), &rows);
    let (sum, dsel) = cross_entropy_sum(&sel, &targets);
    let n = rows.len() as f64;
    let mut grad = Array2::zeros(logits.dim());
    for (k, &r) in rows.iter().enumerate() {
        grad.row_mut(r).assign(&(&dsel.row(k) / n));
    }
    Ok(MlmLoss {
        loss: sum / n,
        labelled: rows.len(),
        grad,
    })
}

/// One training example: input ids and per-position labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub ids: Vec<u32>,
    pub labels: Vec<Option<u32>>,
}

/// Summed (not averaged) cross-entropy of one sequence and its gradient.
pub fn sequence_loss_and_grad(
    cfg: &EncoderConfig,
    p: &EncoderParams,
    ex: &Example,
    step: u64,
) -> Result<(f64, usize, EncoderParams)> {
    if ex.labels.len() != ex.ids.len() {
        return Err(Error::input("example: labels and ids differ in length"));
    }
    let rows: Vec<usize> = (0..ex.labels.len()).filter(|&i| ex.labels[i].is_some()).collect();
    let mut g = EncoderParams::zeros(cfg);
    if rows.is_empty() {
        return Ok((0.0, 0, g));
    }
    let targets: Vec<u32> = rows.iter().map(|&i| ex.labels[i].expect("filtered")).collect();
    if let Some(&t) = targets.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::input(format!("example: label {t} out of range")));
    }
    let trunk = trunk_forward(cfg, p, &ex.ids, step)?;
    let (logits, hc) = head_forward(p, trunk.z.select(Axis(0), &rows));
    let (loss, dlogits) = cross_entropy_sum(&logits, &targets);

    // head
    g.decoder_bias += &dlogits.sum_axis(Axis(0));
    let dec_grad = dlogits.t().dot(&hc.hn);
    match &mut g.decoder {
        Some(d) => *d += &dec_grad,
        None => g.embed += &dec_grad,
    }
    let dhn = dlogits.dot(p.decoder_matrix());
    let dg = layer_norm_backward(&dhn, &p.head_norm, &hc.norm, &mut g.head_norm);
    let du = dg * hc.u.mapv(gelu_grad);
    g.head_dense += &hc.zr.t().dot(&du);
    let dzr = du.dot(&p.head_dense.t());
    let mut dz = Array2::zeros(trunk.z.dim());
    for (k, &r) in rows.iter().enumerate() {
        dz.row_mut(r).assign(&dzr.row(k));
    }

    // trunk
    let mut dx = layer_norm_backward(&dz, &p.final_norm, &trunk.final_cache, &mut g.final_norm);
    for li in (0..cfg.layers).rev() {
        dx = layer_backward(cfg, &p.layers[li], &trunk.layers[li], &dx, &mut g.layers[li]);
    }
    let de = layer_norm_backward(&dx, &p.embed_norm, &trunk.embed_cache, &mut g.embed_norm);
    for (r, &id) in ex.ids.iter().enumerate() {
        let mut row = g.embed.row_mut(id as usize);
        row += &de.row(r);
    }
    Ok((loss, rows.len(), g))
}

/// Mean MLM loss over every labelled position in the batch and its gradient.
/// Per-sequence gradients are summed in batch order, so the result does not
/// depend on `exec`.
pub fn loss_and_grad(
    cfg: &EncoderConfig,
    p: &EncoderParams,
    batch: &[Example],
    step: u64,
    exec: Exec,
) -> Result<(f64, EncoderParams)> {
    cfg.validate()?;
    let parts = par::map(exec, batch, |ex| sequence_loss_and_grad(cfg, p, ex, step));
    let mut total = 0.0;
    let mut count = 0usize;
    let mut grad = EncoderParams::zeros(cfg);
    for part in parts {
        let (l, n, g) = part?;
        if n > 0 {
            total += l;
            count += n;
            grad.add_assign(&g);
        }
    }
    if count == 0 {
        return Err(Error::input("loss: no labelled positions in batch"));
    }
    grad.scale(1.0 / count as f64);
    Ok((total / count as f64, grad))
}

/// Mean MLM loss without gradients.
pub fn batch_loss(cfg: &EncoderConfig, p: &EncoderParams, batch: &[Example], step: u64, exec: Exec) -> Result<f64> {
    cfg.validate()?;
    let parts = par::map(exec, batch, |ex| -> Result<(f64, usize)> {
        let rows: Vec<usize> = (0..ex.labels.len()).filter(|&i| ex.labels[i].is_some()).collect();
        if rows.is_empty() {
            return Ok((0.0, 0));
        }
        let targets: Vec<u32> = rows.iter().map(|&i| ex.labels[i].expect("filtered")).collect();
        let trunk = trunk_forward(cfg, p, &ex.ids, step)?;
        let (logits, _) = head_forward(p, trunk.z.select(Axis(0), &rows));
        Ok((cross_entropy_sum(&logits, &targets).0, rows.len()))
    });
    let (mut total, mut count) = (0.0, 0);
    for part in parts {
        let (l, n) = part?;
        total += l;
        count += n;
    }
    if count == 0 {
        return Err(Error::input("loss: no labelled positions in batch"));
    }
    Ok(total / count as f64)
}

// ---------------------------------------------------------------------------
// Checkpoints

const MAGIC: &[u8; 8] = b"PTENCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: EncoderConfig,
    pub step: u64,
    pub params: EncoderParams,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: EncoderConfig,
    step: u64,
}

impl Checkpoint {
    /// Little-endian container: magic, version, JSON header, then named tensors.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&CheckpointHeader {
            config: self.config.clone(),
            step: self.step,
        })
        .expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let tensors = self.params.tensors();
        out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
        for t in tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for d in &t.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = read_u64(&mut r)? as usize;
        if hlen > r.len() {
            return Err(Error::Checkpoint("truncated header".into()));
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&r[..hlen]).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        r = &r[hlen..];
        header.config.validate()?;
        let n = read_u64(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let nlen = read_u32(&mut r)? as usize;
            if nlen > r.len() {
                return Err(Error::Checkpoint("truncated tensor name".into()));
            }
            let name = String::from_utf8(r[..nlen].to_vec()).map_err(|_| Error::Checkpoint("tensor name not UTF-8".into()))?;
            r = &r[nlen..];
            let ndim = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(read_u64(&mut r)? as usize);
            }
            let count: usize = shape.iter().product();
            if count.checked_mul(8).is_none_or(|b| b > r.len()) {
                return Err(Error::Checkpoint(format!("{name}: truncated values")));
            }
            let values = r[..count * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            r = &r[count * 8..];
            tensors.push(ParamTensor { name, shape, values });
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        let params = EncoderParams::from_tensors(&header.config, &tensors)?;
        Ok(Checkpoint {
            config: header.config,
            step: header.step,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    if r.len() < buf.len() {
        return Err(Error::Checkpoint("unexpected end of file".into()));
    }
    buf.copy_from_slice(&r[..buf.len()]);
    *r = &r[buf.len()..];
    Ok(())
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}
