//! Angular-margin softmax losses over unit-norm class anchors.
//!
//! Features are L2-normalized and compared against the anchor columns, so
//! every logit is `s * cos θ`. ArcFace replaces the target cosine with
//! `cos(θ + m)`. A per-sample weight either multiplies the loss term
//! ([`WeightMethod::LossScale`]) or the logit scale of the sample's whole row
//! ([`WeightMethod::LogitScale`]); weights are constants for differentiation.

use ndarray::{Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::weighting::WeightMethod;

/// Cosines are kept this far inside `(-1, 1)` before the margin identity.
const TRIG_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    /// `d × C`; column `j` is the anchor of class `j`.
    pub anchors: Array2<f64>,
    pub scale: f64,
}

impl ClassifierHead {
    pub fn new(mut anchors: Array2<f64>, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidInput(format!("scale {scale} must be positive")));
        }
        if anchors.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite anchor".into()));
        }
        for col in anchors.columns() {
            if col.dot(&col) == 0.0 {
                return Err(Error::DegenerateInput("zero-norm anchor".into()));
            }
        }
        normalize_columns(&mut anchors);
        Ok(ClassifierHead { anchors, scale })
    }

    /// Anchors drawn uniformly on the unit sphere.
    pub fn random<R: Rng + ?Sized>(dim: usize, classes: usize, scale: f64, rng: &mut R) -> Result<Self> {
        let anchors = Array2::from_shape_simple_fn((dim, classes), || rng.sample(StandardNormal));
        Self::new(anchors, scale)
    }

    pub fn dim(&self) -> usize {
        self.anchors.nrows()
    }

    pub fn classes(&self) -> usize {
        self.anchors.ncols()
    }

    pub fn renormalize(&mut self) {
        normalize_columns(&mut self.anchors);
    }
}

fn normalize_columns(m: &mut Array2<f64>) {
    for mut col in m.columns_mut() {
        let norm = col.dot(&col).sqrt();
        if norm > 0.0 {
            col /= norm;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LossKind {
    L2Softmax,
    #[serde(rename = "arcface")]
    ArcFace { margin: f64 },
}

impl LossKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LossKind::L2Softmax => Ok(()),
            LossKind::ArcFace { margin } => {
                if (0.0..std::f64::consts::FRAC_PI_2).contains(&margin) {
                    Ok(())
                } else {
                    Err(Error::Config(format!("arcface margin {margin} outside [0, pi/2)")))
                }
            }
        }
    }
}

/// Cosines of one batch against every anchor.
#[derive(Debug, Clone)]
pub struct LogitRecord {
    /// `N × C`, clamped to `[-1, 1]`.
    pub cos: Array2<f64>,
    pub target_cos: Vec<f64>,
    pub labels: Vec<usize>,
    unit: Array2<f64>,
    norms: Vec<f64>,
    raw: Array2<f64>,
}

impl LogitRecord {
    /// A record holding only a cosine matrix, for evaluating
    /// [`loss_and_grad`] directly. It cannot be passed to
    /// [`backprop_to_features`].
    pub fn from_cosines(cos: Array2<f64>, labels: &[usize]) -> Result<Self> {
        if labels.len() != cos.nrows() {
            return Err(Error::InvalidInput(format!("{} labels for {} rows", labels.len(), cos.nrows())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= cos.ncols()) {
            return Err(Error::InvalidInput(format!("label {bad} out of range for {} classes", cos.ncols())));
        }
        let target_cos = labels.iter().enumerate().map(|(i, &y)| cos[[i, y]]).collect();
        Ok(LogitRecord {
            raw: cos.clone(),
            cos,
            target_cos,
            labels: labels.to_vec(),
            unit: Array2::zeros((0, 0)),
            norms: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The L2-normalized feature rows.
    pub fn unit_features(&self) -> ArrayView2<'_, f64> {
        self.unit.view()
    }
}

pub fn cosines(features: ArrayView2<'_, f64>, head: &ClassifierHead, labels: &[usize]) -> Result<LogitRecord> {
    let (n, d) = features.dim();
    if d != head.dim() {
        return Err(Error::InvalidInput(format!(
            "feature dim {d} does not match anchor dim {}",
            head.dim()
        )));
    }
    if labels.len() != n {
        return Err(Error::InvalidInput(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= head.classes()) {
        return Err(Error::InvalidInput(format!(
            "label {bad} out of range for {} classes",
            head.classes()
        )));
    }
    let mut unit = features.to_owned();
    let mut norms = Vec::with_capacity(n);
    for (i, mut row) in unit.rows_mut().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::DegenerateInput(format!("feature row {i} has norm {norm}")));
        }
        row /= norm;
        norms.push(norm);
    }
    let raw = unit.dot(&head.anchors);
    let cos = raw.mapv(|v| v.clamp(-1.0, 1.0));
    let target_cos = labels.iter().enumerate().map(|(i, &y)| cos[[i, y]]).collect();
    Ok(LogitRecord {
        cos,
        target_cos,
        labels: labels.to_vec(),
        unit,
        norms,
        raw,
    })
}

/// `cos(θ + m)` and its derivative with respect to `cos θ`.
fn margin_target(c: f64, margin: f64) -> (f64, f64) {
    if margin == 0.0 {
        return (c, 1.0);
    }
    let lo = -1.0 + TRIG_CLAMP;
    let hi = 1.0 - TRIG_CLAMP;
    let cc = c.clamp(lo, hi);
    let sin = (1.0 - cc * cc).max(0.0).sqrt();
    let (sm, cm) = margin.sin_cos();
    let value = cc * cm - sin * sm;
    let slope = if c > lo && c < hi { cm + sm * cc / sin } else { 0.0 };
    (value, slope)
}

#[derive(Debug, Clone)]
pub struct LossGrad {
    /// Mean over the batch.
    pub loss: f64,
    pub per_sample: Vec<f64>,
    /// `dL/dcos`, `N × C`.
    pub grad_cos: Array2<f64>,
}

pub fn loss_and_grad(
    rec: &LogitRecord,
    kind: LossKind,
    scale: f64,
    weights: &[f64],
    method: WeightMethod,
) -> Result<LossGrad> {
    let (n, c) = rec.cos.dim();
    if weights.len() != n {
        return Err(Error::InvalidInput(format!("{} weights for {n} rows", weights.len())));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidInput(format!("scale {scale} must be positive")));
    }
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(Error::InvalidInput(format!("sample weight {w} must be finite and non-negative")));
    }
    let margin = match kind {
        LossKind::L2Softmax => 0.0,
        LossKind::ArcFace { margin } => margin,
    };

    let mut grad_cos = Array2::<f64>::zeros((n, c));
    let mut per_sample = Vec::with_capacity(n);
    let mut logits = vec![0.0; c];
    for i in 0..n {
        let y = rec.labels[i];
        let w = weights[i];
        let (row_scale, loss_mult) = match method {
            WeightMethod::LossScale => (scale, w),
            WeightMethod::LogitScale => (w * scale, 1.0),
        };
        let (target, slope) = margin_target(rec.cos[[i, y]], margin);
        let row = rec.cos.row(i);
        for (j, l) in logits.iter_mut().enumerate() {
            *l = row_scale * if j == y { target } else { row[j] };
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let lse = max + sum.ln();
        if !lse.is_finite() {
            return Err(Error::NumericOverflow(format!("non-finite log-sum-exp in row {i}")));
        }
        per_sample.push(loss_mult * (lse - logits[y]));

        let coef = loss_mult * row_scale / n as f64;
        let mut g = grad_cos.row_mut(i);
        for j in 0..c {
            let p = (logits[j] - lse).exp();
            g[j] = coef * (p - if j == y { 1.0 } else { 0.0 });
        }
        g[y] *= slope;
    }
    let loss = per_sample.iter().sum::<f64>() / n.max(1) as f64;
    if !loss.is_finite() {
        return Err(Error::NumericOverflow("non-finite loss".into()));
    }
    Ok(LossGrad {
        loss,
        per_sample,
        grad_cos,
    })
}

/// Chains `dL/dcos` through the anchor product and the feature normalization.
///
/// Returns `(dL/dfeatures, dL/danchors)`. Entries whose cosine was clamped
/// carry no gradient.
pub fn backprop_to_features(
    rec: &LogitRecord,
    grad_cos: &Array2<f64>,
    head: &ClassifierHead,
) -> (Array2<f64>, Array2<f64>) {
    let mut g = grad_cos.clone();
    Zip::from(&mut g).and(&rec.raw).for_each(|g, &r| {
        if !(-1.0..=1.0).contains(&r) {
            *g = 0.0;
        }
    });
    let grad_anchors = rec.unit.t().dot(&g);
    let mut grad_features = g.dot(&head.anchors.t());
    for ((mut row, u), &norm) in grad_features
        .axis_iter_mut(Axis(0))
        .zip(rec.unit.axis_iter(Axis(0)))
        .zip(&rec.norms)
    {
        let radial = row.dot(&u);
        row.zip_mut_with(&u, |gv, &uv| *gv = (*gv - radial * uv) / norm);
    }
    (grad_features, grad_anchors)
}
