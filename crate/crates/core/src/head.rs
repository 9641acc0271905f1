//! Two-layer projection head trained with a multi-positive InfoNCE loss.
//!
//! The head maps an embedding `x` to
//!
//! ```text
//! z = W2 · dropout(relu(W1 · x + b1)) + b2        z ∈ R^768
//! ```
//!
//! Anchors, positives and negatives all pass through the same weights. For
//! one training example with modalities `m = 1..M`, each holding a positive
//! `p_m` and negatives `n_{m,1..N}`, the loss is
//!
//! ```text
//! L = -(1/M) Σ_m log( f(a,p_m) / (f(a,p_m) + Σ_n f(a,n_{m,n})) ),   f(x,y) = exp(cos(x,y)/τ)
//! ```
//!
//! evaluated as a log-sum-exp over `cos/τ` logits. Gradients are derived by
//! hand: the logit gradient is `(softmax - onehot)/(M τ)` and flows through
//! the cosine into both projected vectors, then back through the two layers
//! with dropout masks held fixed.

use std::borrow::Cow;
use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Sample;
use crate::embedstore::{EmbeddingRecord, EmbeddingStore, StoreError};
use crate::seed;

/// Output width of the projection head.
pub const OUT_DIM: usize = 768;

pub const DEFAULT_HIDDEN: usize = 1024;

#[derive(Debug, Error)]
pub enum HeadError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("zero-norm projected vector")]
    ZeroNorm,
    #[error("malformed example: {0}")]
    MalformedExample(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Forward-pass mode. Dropout is applied only in training mode.
pub enum Mode<'a> {
    Train(&'a mut dyn RngCore),
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// `[hidden × in_dim]`
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// `[out_dim × hidden]`
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub dropout_rate: f64,
    pub tau: f64,
}

impl HeadParams {
    /// He-uniform weights (bound `sqrt(6 / fan_in)`), zero biases.
    pub fn init(
        in_dim: usize,
        hidden: usize,
        dropout_rate: f64,
        tau: f64,
        seed: u64,
    ) -> Result<Self, HeadError> {
        let mut rng = seed::rng_for(seed, "init");
        let mut uniform = |rows: usize, cols: usize| {
            let bound = (6.0 / cols as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
        };
        let w1 = uniform(hidden, in_dim);
        let w2 = uniform(OUT_DIM, hidden);
        Self::from_weights(
            w1,
            Array1::zeros(hidden),
            w2,
            Array1::zeros(OUT_DIM),
            dropout_rate,
            tau,
        )
    }

    /// Assembles a head from explicit weights. Shapes must chain.
    pub fn from_weights(
        w1: Array2<f64>,
        b1: Array1<f64>,
        w2: Array2<f64>,
        b2: Array1<f64>,
        dropout_rate: f64,
        tau: f64,
    ) -> Result<Self, HeadError> {
        let shape_err = |m: &str| HeadError::InvalidConfig(m.to_string());
        if b1.len() != w1.nrows() || w2.ncols() != w1.nrows() || b2.len() != w2.nrows() {
            return Err(shape_err("weight shapes do not chain"));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(shape_err("dropout rate must lie in [0, 1)"));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(shape_err("temperature must be positive"));
        }
        let params = Self {
            w1,
            b1,
            w2,
            b2,
            dropout_rate,
            tau,
        };
        if params
            .tensors()
            .iter()
            .any(|t| t.iter().any(|v| !v.is_finite()))
        {
            return Err(shape_err("non-finite weight"));
        }
        Ok(params)
    }

    pub fn in_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.w2.nrows()
    }

    fn tensors(&self) -> [&[f64]; 4] {
        [
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
        ]
    }

    /// Total number of trainable scalars.
    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Reads trainable scalar `i` in (w1, b1, w2, b2) row-major order.
    pub fn param(&self, i: usize) -> f64 {
        let (t, j) = locate(&self.tensors().map(<[f64]>::len), i);
        self.tensors()[t][j]
    }

    pub fn set_param(&mut self, i: usize, value: f64) {
        let (t, j) = locate(&self.tensors().map(<[f64]>::len), i);
        self.tensors_mut()[t][j] = value;
    }

    fn forward_batch(&self, x: ArrayView2<'_, f64>, mode: Mode<'_>) -> Result<Forward, HeadError> {
        if x.ncols() != self.in_dim() {
            return Err(HeadError::DimMismatch {
                expected: self.in_dim(),
                found: x.ncols(),
            });
        }
        let pre = x.dot(&self.w1.t()) + &self.b1;
        let mut hidden = pre.mapv(|v| v.max(0.0));
        let mask = match mode {
            Mode::Train(rng) if self.dropout_rate > 0.0 => {
                let keep = 1.0 / (1.0 - self.dropout_rate);
                let p = self.dropout_rate;
                let mask = Array2::from_shape_fn(hidden.raw_dim(), |_| {
                    if rng.random::<f64>() < p {
                        0.0
                    } else {
                        keep
                    }
                });
                hidden *= &mask;
                Some(mask)
            }
            _ => None,
        };
        let z = hidden.dot(&self.w2.t()) + &self.b2;
        Ok(Forward {
            pre,
            mask,
            hidden,
            z,
        })
    }

    fn backward(&self, x: ArrayView2<'_, f64>, fwd: &Forward, dz: &Array2<f64>) -> Gradients {
        let w2 = dz.t().dot(&fwd.hidden);
        let b2 = dz.sum_axis(Axis(0));
        let mut dh = dz.dot(&self.w2);
        if let Some(mask) = &fwd.mask {
            dh *= mask;
        }
        ndarray::Zip::from(&mut dh).and(&fwd.pre).for_each(|d, &p| {
            if p <= 0.0 {
                *d = 0.0;
            }
        });
        let w1 = dh.t().dot(&x);
        let b1 = dh.sum_axis(Axis(0));
        Gradients { w1, b1, w2, b2 }
    }

    /// Projects a matrix of row vectors.
    pub fn project_rows(
        &self,
        x: ArrayView2<'_, f64>,
        mode: Mode<'_>,
    ) -> Result<Array2<f64>, HeadError> {
        Ok(self.forward_batch(x, mode)?.z)
    }
}

fn locate(lens: &[usize; 4], mut i: usize) -> (usize, usize) {
    for (t, &len) in lens.iter().enumerate() {
        if i < len {
            return (t, i);
        }
        i -= len;
    }
    panic!("parameter index out of range");
}

struct Forward {
    pre: Array2<f64>,
    mask: Option<Array2<f64>>,
    hidden: Array2<f64>,
    z: Array2<f64>,
}

/// Projects a single vector.
pub fn forward(params: &HeadParams, x: &[f64], mode: Mode<'_>) -> Result<Vec<f64>, HeadError> {
    let view = ArrayView2::from_shape((1, x.len()), x).expect("row view");
    Ok(params.project_rows(view, mode)?.row(0).to_vec())
}

/// Gradients shaped like [`HeadParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl Gradients {
    pub fn zeros_like(params: &HeadParams) -> Self {
        Self {
            w1: Array2::zeros(params.w1.raw_dim()),
            b1: Array1::zeros(params.b1.len()),
            w2: Array2::zeros(params.w2.raw_dim()),
            b2: Array1::zeros(params.b2.len()),
        }
    }

    fn tensors(&self) -> [&[f64]; 4] {
        [
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
        ]
    }

    /// Component `i` in the same order as [`HeadParams::param`].
    pub fn get(&self, i: usize) -> f64 {
        let (t, j) = locate(&self.tensors().map(<[f64]>::len), i);
        self.tensors()[t][j]
    }

    pub fn norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// One positive and its negatives for a single modality.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityGroup {
    pub positive: Vec<f64>,
    pub negatives: Vec<Vec<f64>>,
}

/// Unprojected vectors of one training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveExample {
    pub anchor: Vec<f64>,
    pub groups: Vec<ModalityGroup>,
}

impl ContrastiveExample {
    fn row_count(&self) -> usize {
        1 + self
            .groups
            .iter()
            .map(|g| 1 + g.negatives.len())
            .sum::<usize>()
    }

    fn check(&self, in_dim: usize) -> Result<(), HeadError> {
        if self.groups.is_empty() {
            return Err(HeadError::MalformedExample("no positives".into()));
        }
        let n = self.groups[0].negatives.len();
        if self.groups.iter().any(|g| g.negatives.len() != n) {
            return Err(HeadError::MalformedExample(
                "negative counts differ across modalities".into(),
            ));
        }
        let dims = std::iter::once(&self.anchor).chain(
            self.groups
                .iter()
                .flat_map(|g| std::iter::once(&g.positive).chain(&g.negatives)),
        );
        for v in dims {
            if v.len() != in_dim {
                return Err(HeadError::DimMismatch {
                    expected: in_dim,
                    found: v.len(),
                });
            }
        }
        Ok(())
    }

    fn push_rows(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.anchor);
        for g in &self.groups {
            out.extend_from_slice(&g.positive);
            for n in &g.negatives {
                out.extend_from_slice(n);
            }
        }
    }
}

fn check_tau(tau: f64) -> Result<(), HeadError> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(HeadError::InvalidConfig(format!(
            "temperature {tau} must be positive"
        )))
    }
}

fn dot(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.dot(&b)
}

/// Loss of one example whose rows `start..start+len` of `z` hold its
/// projected vectors. When `grad` is given, `scale · dL/dz` is added to the
/// matching rows.
fn example_loss(
    z: &Array2<f64>,
    norms: &[f64],
    start: usize,
    group_sizes: &[usize],
    tau: f64,
    mut grad: Option<(&mut Array2<f64>, f64)>,
) -> f64 {
    let m = group_sizes.len() as f64;
    let a = z.row(start);
    let na = norms[start];
    let mut total = 0.0;
    let mut row = start + 1;
    let mut logits = Vec::new();
    let mut cosines = Vec::new();
    for &size in group_sizes {
        logits.clear();
        cosines.clear();
        for (r, nr) in norms.iter().enumerate().skip(row).take(size) {
            let c = dot(a, z.row(r)) / (na * nr);
            cosines.push(c);
            logits.push(c / tau);
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - logits[0];

        if let Some((g, scale)) = grad.as_mut() {
            for (j, r) in (row..row + size).enumerate() {
                let softmax = (logits[j] - lse).exp();
                let onehot = if j == 0 { 1.0 } else { 0.0 };
                let w = *scale * (softmax - onehot) / (m * tau);
                if w == 0.0 {
                    continue;
                }
                let c = cosines[j];
                let nv = norms[r];
                let v = z.row(r);
                // d cos / d a = v/(|a||v|) - c a/|a|^2 ; symmetric for v.
                g.row_mut(start).scaled_add(w / (na * nv), &v);
                g.row_mut(start).scaled_add(-w * c / (na * na), &a);
                g.row_mut(r).scaled_add(w / (na * nv), &a);
                g.row_mut(r).scaled_add(-w * c / (nv * nv), &v);
            }
        }
        row += size;
    }
    total / m
}

fn row_norms(z: &Array2<f64>) -> Result<Vec<f64>, HeadError> {
    z.rows()
        .into_iter()
        .map(|r| {
            let n = r.dot(&r).sqrt();
            if n > 0.0 && n.is_finite() {
                Ok(n)
            } else {
                Err(HeadError::ZeroNorm)
            }
        })
        .collect()
}

/// Loss of already-projected vectors: anchor `a` and, per modality, the
/// positive followed by its negatives.
pub fn infonce_projected(
    anchor: &[f64],
    groups: &[ModalityGroup],
    tau: f64,
) -> Result<f64, HeadError> {
    check_tau(tau)?;
    let example = ContrastiveExample {
        anchor: anchor.to_vec(),
        groups: groups.to_vec(),
    };
    example.check(anchor.len())?;
    let mut flat = Vec::new();
    example.push_rows(&mut flat);
    let z =
        Array2::from_shape_vec((example.row_count(), anchor.len()), flat).expect("row-major rows");
    let norms = row_norms(&z)?;
    let sizes: Vec<usize> = groups.iter().map(|g| 1 + g.negatives.len()).collect();
    Ok(example_loss(&z, &norms, 0, &sizes, tau, None))
}

/// Loss of one example after projecting every vector through the head.
pub fn infonce_loss(
    params: &HeadParams,
    example: &ContrastiveExample,
    mode: Mode<'_>,
) -> Result<f64, HeadError> {
    let (loss, _) = batch_loss(params, std::slice::from_ref(example), mode, false)?;
    Ok(loss)
}

/// Mean loss over `batch` and its exact gradient.
pub fn loss_and_grads(
    params: &HeadParams,
    batch: &[ContrastiveExample],
    mode: Mode<'_>,
) -> Result<(f64, Gradients), HeadError> {
    let (loss, grads) = batch_loss(params, batch, mode, true)?;
    Ok((loss, grads.expect("gradients requested")))
}

fn batch_loss(
    params: &HeadParams,
    batch: &[ContrastiveExample],
    mode: Mode<'_>,
    want_grad: bool,
) -> Result<(f64, Option<Gradients>), HeadError> {
    check_tau(params.tau)?;
    if batch.is_empty() {
        return Err(HeadError::EmptyBatch);
    }
    let in_dim = params.in_dim();
    let mut rows = 0;
    let mut flat = Vec::new();
    for example in batch {
        example.check(in_dim)?;
        example.push_rows(&mut flat);
        rows += example.row_count();
    }
    let x = Array2::from_shape_vec((rows, in_dim), flat).expect("row-major rows");
    let fwd = params.forward_batch(x.view(), mode)?;
    let norms = row_norms(&fwd.z)?;

    let scale = 1.0 / batch.len() as f64;
    let mut dz = want_grad.then(|| Array2::zeros(fwd.z.raw_dim()));
    let mut total = 0.0;
    let mut start = 0;
    for example in batch {
        let sizes: Vec<usize> = example
            .groups
            .iter()
            .map(|g| 1 + g.negatives.len())
            .collect();
        let grad = dz.as_mut().map(|g| (g, scale));
        total += example_loss(&fwd.z, &norms, start, &sizes, params.tau, grad);
        start += example.row_count();
    }
    let grads = dz.map(|dz| params.backward(x.view(), &fwd, &dz));
    Ok((total * scale, grads))
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: i32,
    m: Gradients,
    v: Gradients,
}

impl Adam {
    pub fn new(params: &HeadParams, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: Gradients::zeros_like(params),
            v: Gradients::zeros_like(params),
        }
    }

    pub fn step(&mut self, params: &mut HeadParams, grads: &Gradients) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let lr = self.learning_rate;
        let eps = self.epsilon;
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(ms)
            .zip(vs)
        {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Soft negatives per modality used to build the training triplets.
    pub k_soft: usize,
    pub tau: f64,
    pub dropout_rate: f64,
    pub hidden: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Redraw soft negatives every epoch instead of fixing them once.
    #[serde(default)]
    pub resample_per_epoch: bool,
}

impl Default for TrainConfig {
    /// The GPT-3.5 + LABSE-14 selection.
    fn default() -> Self {
        Self {
            batch_size: 16,
            learning_rate: 1e-5,
            k_soft: 49,
            tau: 0.1,
            dropout_rate: 0.1,
            hidden: DEFAULT_HIDDEN,
            max_epochs: 200,
            patience: 10,
            seed: 0,
            resample_per_epoch: false,
        }
    }
}

impl TrainConfig {
    /// Selected hyperparameters per LLM for the LABSE-14 encoder.
    pub fn preset(llm: &str) -> Option<Self> {
        let (batch_size, learning_rate, k_soft, tau, dropout_rate) =
            match llm.to_ascii_lowercase().as_str() {
                "gpt-3.5" | "gpt35" | "gpt-3.5-turbo" => (16, 1e-5, 49, 0.1, 0.1),
                "gpt-4" | "gpt4" => (16, 1e-5, 30, 0.1, 0.3),
                "gpt-4o" | "gpt4o" => (16, 1e-4, 10, 0.08, 0.5),
                _ => return None,
            };
        Some(Self {
            batch_size,
            learning_rate,
            k_soft,
            tau,
            dropout_rate,
            ..Self::default()
        })
    }

    pub fn validate(&self) -> Result<(), HeadError> {
        let bad = |m: String| Err(HeadError::InvalidConfig(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning rate {} must be positive",
                self.learning_rate
            ));
        }
        check_tau(self.tau)?;
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.hidden == 0 || self.max_epochs == 0 {
            return bad("hidden width and max_epochs must be positive".into());
        }
        Ok(())
    }

    /// Stable identifier of the grid point.
    pub fn key(&self) -> String {
        format!(
            "bs{}_lr{:e}_k{}_tau{}_do{}",
            self.batch_size, self.learning_rate, self.k_soft, self.tau, self.dropout_rate
        )
    }
}

/// Held-out ranking check used to report top-1 accuracy during training.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingProbe {
    pub query: Vec<f64>,
    pub images: Vec<Vec<f64>>,
    /// When present, scores add the caption similarity.
    pub captions: Option<Vec<Vec<f64>>>,
    /// Index of the gold top image.
    pub gold_top: usize,
}

/// Probes for labeled samples from a store: the `llm_name` query against the
/// image records, plus the caption records when `with_captions` is set.
pub fn probes_from_store(
    samples: &[Sample],
    store: &EmbeddingStore,
    llm_name: &str,
    with_captions: bool,
) -> Result<Vec<RankingProbe>, HeadError> {
    samples
        .iter()
        .map(|s| {
            let gold_top = s
                .gold_top()
                .and_then(|id| s.candidate_index(id))
                .ok_or_else(|| {
                    HeadError::MalformedExample(format!("sample {} has no gold order", s.sample_id))
                })?;
            let bundle = store.get_sample_bundle(s, llm_name)?;
            let captions = if with_captions {
                let caps = bundle
                    .candidates
                    .iter()
                    .map(|c| {
                        c.caption.map(<[f64]>::to_vec).ok_or_else(|| {
                            HeadError::MalformedExample(format!(
                                "sample {} lacks captions",
                                s.sample_id
                            ))
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                Some(caps)
            } else {
                None
            };
            Ok(RankingProbe {
                query: bundle.query.to_vec(),
                images: bundle.candidates.iter().map(|c| c.image.to_vec()).collect(),
                captions,
                gold_top,
            })
        })
        .collect()
}

/// Fraction of probes whose best projected candidate is the gold top.
pub fn probe_top1(params: &HeadParams, probes: &[RankingProbe]) -> Result<f64, HeadError> {
    if probes.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for probe in probes {
        let mut flat = probe.query.clone();
        probe.images.iter().for_each(|v| flat.extend_from_slice(v));
        if let Some(captions) = &probe.captions {
            captions.iter().for_each(|v| flat.extend_from_slice(v));
        }
        let rows = flat.len() / params.in_dim().max(1);
        let x = Array2::from_shape_vec((rows, params.in_dim()), flat).map_err(|_| {
            HeadError::DimMismatch {
                expected: params.in_dim(),
                found: probe.query.len(),
            }
        })?;
        let z = params.project_rows(x.view(), Mode::Eval)?;
        let norms = row_norms(&z)?;
        let n = probe.images.len();
        let cos = |r: usize| dot(z.row(0), z.row(r)) / (norms[0] * norms[r]);
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for i in 0..n {
            let mut score = cos(1 + i);
            if probe.captions.is_some() {
                score += cos(1 + n + i);
            }
            if score > best_score {
                best_score = score;
                best = i;
            }
        }
        if best == probe.gold_top {
            hits += 1;
        }
    }
    Ok(hits as f64 / probes.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    #[serde(default)]
    pub test_top1: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStopping,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop_reason: StopReason,
}

impl TrainReport {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch - 1]
    }

    /// Per-epoch curves as CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,test_top1\n");
        for e in &self.epochs {
            let acc = e.test_top1.map(|a| a.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{}\n",
                e.epoch, e.train_loss, e.val_loss, acc
            ));
        }
        out
    }
}

/// Mean eval-mode loss over `examples`.
pub fn evaluate_loss(
    params: &HeadParams,
    examples: &[ContrastiveExample],
) -> Result<f64, HeadError> {
    let mut total = 0.0;
    for chunk in examples.chunks(64) {
        let (loss, _) = batch_loss(params, chunk, Mode::Eval, false)?;
        total += loss * chunk.len() as f64;
    }
    Ok(total / examples.len() as f64)
}

/// Trains on a fixed example set.
pub fn train(
    train_set: &[ContrastiveExample],
    val_set: &[ContrastiveExample],
    probes: &[RankingProbe],
    config: &TrainConfig,
) -> Result<(HeadParams, TrainReport), HeadError> {
    train_with(|_| Ok(Cow::Borrowed(train_set)), val_set, probes, config)
}

/// Trains with per-epoch training data supplied by `epoch_data(epoch)`.
///
/// Shuffling and dropout draw from streams derived from `config.seed`. The
/// returned parameters are those of the epoch with the lowest validation
/// loss. Training stops after `patience` consecutive epochs without
/// improvement, or at `max_epochs`.
pub fn train_with<'d, F>(
    mut epoch_data: F,
    val_set: &[ContrastiveExample],
    probes: &[RankingProbe],
    config: &TrainConfig,
) -> Result<(HeadParams, TrainReport), HeadError>
where
    F: FnMut(usize) -> Result<Cow<'d, [ContrastiveExample]>, HeadError>,
{
    config.validate()?;
    if val_set.is_empty() {
        return Err(HeadError::InvalidConfig("empty validation set".into()));
    }
    let first = epoch_data(1)?;
    let in_dim = first
        .first()
        .map(|e| e.anchor.len())
        .ok_or_else(|| HeadError::InvalidConfig("empty training set".into()))?;
    let mut params = HeadParams::init(
        in_dim,
        config.hidden,
        config.dropout_rate,
        config.tau,
        config.seed,
    )?;
    let mut adam = Adam::new(&params, config.learning_rate);
    let mut shuffle_rng = seed::rng_for(config.seed, "shuffle");
    let mut dropout_rng = seed::rng_for(config.seed, "dropout");

    let mut epochs = Vec::new();
    let mut best = (0usize, f64::INFINITY, params.clone());
    let mut stale = 0usize;
    let mut stop_reason = StopReason::MaxEpochs;
    let mut data = Some(first);

    for epoch in 1..=config.max_epochs {
        let examples = match data.take() {
            Some(d) => d,
            None => epoch_data(epoch)?,
        };
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for batch_idx in order.chunks(config.batch_size) {
            let batch: Vec<ContrastiveExample> =
                batch_idx.iter().map(|&i| examples[i].clone()).collect();
            let (loss, grads) = loss_and_grads(&params, &batch, Mode::Train(&mut dropout_rng))?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(HeadError::Diverged { epoch, loss });
            }
            adam.step(&mut params, &grads);
            loss_sum += loss * batch.len() as f64;
        }
        let train_loss = loss_sum / examples.len() as f64;
        let val_loss = evaluate_loss(&params, val_set)?;
        if !val_loss.is_finite() {
            return Err(HeadError::Diverged {
                epoch,
                loss: val_loss,
            });
        }
        let test_top1 = if probes.is_empty() {
            None
        } else {
            Some(probe_top1(&params, probes)?)
        };
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            test_top1,
        });
        log::debug!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6}");

        if val_loss < best.1 {
            best = (epoch, val_loss, params.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                stop_reason = StopReason::EarlyStopping;
                break;
            }
        }
    }
    let (best_epoch, best_val_loss, best_params) = best;
    Ok((
        best_params,
        TrainReport {
            epochs,
            best_epoch,
            best_val_loss,
            stop_reason,
        },
    ))
}

/// Axes of the hyperparameter grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridAxes {
    pub batch_size: Vec<usize>,
    pub learning_rate: Vec<f64>,
    pub k_soft: Vec<usize>,
    pub tau: Vec<f64>,
    pub dropout_rate: Vec<f64>,
}

impl Default for GridAxes {
    fn default() -> Self {
        Self {
            batch_size: vec![16, 32],
            learning_rate: vec![1e-3, 1e-4, 1e-5],
            k_soft: vec![10, 30, 49],
            tau: vec![0.08, 0.09, 0.1],
            dropout_rate: vec![0.1, 0.3, 0.5],
        }
    }
}

impl GridAxes {
    pub fn len(&self) -> usize {
        self.batch_size.len()
            * self.learning_rate.len()
            * self.k_soft.len()
            * self.tau.len()
            * self.dropout_rate.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cartesian product; fields not on an axis come from `base`.
    pub fn configs(&self, base: &TrainConfig) -> Vec<TrainConfig> {
        let mut out = Vec::with_capacity(self.len());
        for &batch_size in &self.batch_size {
            for &learning_rate in &self.learning_rate {
                for &k_soft in &self.k_soft {
                    for &tau in &self.tau {
                        for &dropout_rate in &self.dropout_rate {
                            out.push(TrainConfig {
                                batch_size,
                                learning_rate,
                                k_soft,
                                tau,
                                dropout_rate,
                                ..base.clone()
                            });
                        }
                    }
                }
            }
        }
        out
    }

    /// Configs varying one axis while the others stay at `best`.
    pub fn one_axis_sweeps(&self, best: &TrainConfig) -> Vec<(GridAxis, TrainConfig)> {
        let mut out = Vec::new();
        for &v in &self.batch_size {
            out.push((
                GridAxis::BatchSize,
                TrainConfig {
                    batch_size: v,
                    ..best.clone()
                },
            ));
        }
        for &v in &self.learning_rate {
            out.push((
                GridAxis::LearningRate,
                TrainConfig {
                    learning_rate: v,
                    ..best.clone()
                },
            ));
        }
        for &v in &self.k_soft {
            out.push((
                GridAxis::KSoft,
                TrainConfig {
                    k_soft: v,
                    ..best.clone()
                },
            ));
        }
        for &v in &self.tau {
            out.push((
                GridAxis::Tau,
                TrainConfig {
                    tau: v,
                    ..best.clone()
                },
            ));
        }
        for &v in &self.dropout_rate {
            out.push((
                GridAxis::DropoutRate,
                TrainConfig {
                    dropout_rate: v,
                    ..best.clone()
                },
            ));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridAxis {
    BatchSize,
    LearningRate,
    KSoft,
    Tau,
    DropoutRate,
}

impl GridAxis {
    pub fn value(self, config: &TrainConfig) -> f64 {
        match self {
            GridAxis::BatchSize => config.batch_size as f64,
            GridAxis::LearningRate => config.learning_rate,
            GridAxis::KSoft => config.k_soft as f64,
            GridAxis::Tau => config.tau,
            GridAxis::DropoutRate => config.dropout_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRun {
    pub config: TrainConfig,
    pub best_val_loss: f64,
    /// Top-1 accuracy at the best epoch, when probes were given.
    pub test_top1: Option<f64>,
    pub report: TrainReport,
}

/// Trains every grid point, `workers` at a time. `train_data(k_soft)` supplies
/// the training examples for a soft-negative count. Runs come back sorted by
/// best validation loss, ties by config key.
pub fn grid_search<F>(
    base: &TrainConfig,
    axes: &GridAxes,
    train_data: F,
    val_set: &[ContrastiveExample],
    probes: &[RankingProbe],
    workers: usize,
) -> Result<Vec<GridRun>, HeadError>
where
    F: Fn(usize) -> Result<Vec<ContrastiveExample>, HeadError> + Sync,
{
    use rayon::prelude::*;
    if axes.is_empty() {
        return Err(HeadError::InvalidConfig("empty grid axis".into()));
    }
    let configs = axes.configs(base);
    let mut ks: Vec<usize> = axes.k_soft.clone();
    ks.sort_unstable();
    ks.dedup();
    let data: BTreeMap<usize, Vec<ContrastiveExample>> = ks
        .into_iter()
        .map(|k| Ok((k, train_data(k)?)))
        .collect::<Result<_, HeadError>>()?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("thread pool");
    let mut runs: Vec<GridRun> = pool.install(|| {
        configs
            .par_iter()
            .map(|config| {
                let (_, report) = train(&data[&config.k_soft], val_set, probes, config)?;
                Ok(GridRun {
                    config: config.clone(),
                    best_val_loss: report.best_val_loss,
                    test_top1: report.best().test_top1,
                    report,
                })
            })
            .collect::<Result<_, HeadError>>()
    })?;
    runs.sort_by(|a, b| {
        a.best_val_loss
            .total_cmp(&b.best_val_loss)
            .then_with(|| a.config.key().cmp(&b.config.key()))
    });
    Ok(runs)
}

/// Test accuracy per epoch for one value of one axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub axis: GridAxis,
    pub value: f64,
    pub config_key: String,
    pub test_top1: Vec<Option<f64>>,
    pub val_loss: Vec<f64>,
}

/// One-axis sensitivity curves around `best`, read from completed runs.
pub fn sensitivity_curves(
    runs: &[GridRun],
    axes: &GridAxes,
    best: &TrainConfig,
) -> Vec<SweepCurve> {
    axes.one_axis_sweeps(best)
        .into_iter()
        .filter_map(|(axis, config)| {
            let key = config.key();
            runs.iter()
                .find(|r| r.config.key() == key)
                .map(|run| SweepCurve {
                    axis,
                    value: axis.value(&config),
                    config_key: key,
                    test_top1: run.report.epochs.iter().map(|e| e.test_top1).collect(),
                    val_loss: run.report.epochs.iter().map(|e| e.val_loss).collect(),
                })
        })
        .collect()
}

/// Sensitivity curves as long-format CSV.
pub fn curves_to_csv(curves: &[SweepCurve]) -> String {
    let mut out = String::from("axis,value,config,epoch,val_loss,test_top1\n");
    for c in curves {
        let axis = serde_json::to_value(c.axis).expect("axis serializes");
        for (i, (loss, acc)) in c.val_loss.iter().zip(&c.test_top1).enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                axis.as_str().unwrap_or_default(),
                c.value,
                c.config_key,
                i + 1,
                loss,
                acc.map(|a| a.to_string()).unwrap_or_default()
            ));
        }
    }
    out
}

/// Replaces every record by its eval-mode projection.
pub fn project_store(
    params: &HeadParams,
    store: &EmbeddingStore,
) -> Result<EmbeddingStore, HeadError> {
    if store.dim() != params.in_dim() {
        return Err(HeadError::DimMismatch {
            expected: params.in_dim(),
            found: store.dim(),
        });
    }
    let records: Vec<&EmbeddingRecord> = store.records().collect();
    let mut out = EmbeddingStore::new(format!("{}+head", store.encoder()), params.out_dim());
    out.meta_mut().sidecar_version = store.meta().sidecar_version.clone();
    for chunk in records.chunks(256) {
        let mut flat = Vec::with_capacity(chunk.len() * store.dim());
        chunk.iter().for_each(|r| flat.extend_from_slice(&r.vector));
        let x = Array2::from_shape_vec((chunk.len(), store.dim()), flat).expect("row-major rows");
        let z = params.project_rows(x.view(), Mode::Eval)?;
        for (record, row) in chunk.iter().zip(z.rows()) {
            out.insert(EmbeddingRecord {
                key: record.key.clone(),
                role: record.role,
                dim: params.out_dim(),
                vector: row.to_vec(),
                truncated: record.truncated,
            })?;
        }
    }
    Ok(out)
}

pub const CHECKPOINT_FORMAT: &str = "head-ckpt/1";

/// Checkpoint file: dimensions and hyperparameters, then row-major weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub in_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
    pub tau: f64,
    pub dropout_rate: f64,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl From<&HeadParams> for Checkpoint {
    fn from(p: &HeadParams) -> Self {
        let [w1, b1, w2, b2] = p.tensors().map(<[f64]>::to_vec);
        Self {
            format: CHECKPOINT_FORMAT.into(),
            in_dim: p.in_dim(),
            hidden: p.hidden(),
            out_dim: p.out_dim(),
            tau: p.tau,
            dropout_rate: p.dropout_rate,
            w1,
            b1,
            w2,
            b2,
        }
    }
}

impl Checkpoint {
    pub fn into_params(self) -> Result<HeadParams, HeadError> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(HeadError::Checkpoint(format!(
                "unsupported format {:?}",
                self.format
            )));
        }
        let bad = |what: &str| HeadError::Checkpoint(format!("{what} has the wrong length"));
        let w1 =
            Array2::from_shape_vec((self.hidden, self.in_dim), self.w1).map_err(|_| bad("w1"))?;
        let w2 =
            Array2::from_shape_vec((self.out_dim, self.hidden), self.w2).map_err(|_| bad("w2"))?;
        HeadParams::from_weights(
            w1,
            Array1::from(self.b1),
            w2,
            Array1::from(self.b2),
            self.dropout_rate,
            self.tau,
        )
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string(self).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, HeadError> {
        serde_json::from_str(text).map_err(|e| HeadError::Checkpoint(e.to_string()))
    }
}
