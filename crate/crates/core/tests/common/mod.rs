//! Finite-difference oracle shared by the gradient and acceptance suites.

#![allow(dead_code)]

use ndarray::Array2;
use noisetol::losses::{backprop_to_features, cosines, loss_and_grad, ClassifierHead, LogitRecord, LossKind};
use noisetol::weighting::WeightMethod;
use rand::Rng;
use rand_distr::StandardNormal;

pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCase {
    pub kind: LossKind,
    pub method: WeightMethod,
    pub scale: f64,
    pub weights: Vec<f64>,
    pub labels: Vec<usize>,
    /// `N × d`, unnormalized.
    pub features: Array2<f64>,
    /// `d × C`, unit columns at the evaluation point.
    pub anchors: Array2<f64>,
}

impl GradCase {
    pub fn random<R: Rng>(rng: &mut R, kind: LossKind, method: WeightMethod) -> Self {
        let n = rng.random_range(1..=8);
        let c = rng.random_range(2..=10);
        let d = rng.random_range(2..=16);
        let features = Array2::from_shape_simple_fn((n, d), || rng.sample::<f64, _>(StandardNormal));
        let head = ClassifierHead::random(d, c, 1.0, rng).unwrap();
        GradCase {
            kind,
            method,
            scale: rng.random_range(2.0..32.0),
            weights: (0..n).map(|_| rng.random_range(0.01..1.0)).collect(),
            labels: (0..n).map(|_| rng.random_range(0..c)).collect(),
            features,
            anchors: head.anchors,
        }
    }

    fn head(&self, anchors: &Array2<f64>) -> ClassifierHead {
        // raw field access keeps perturbed anchors unnormalized
        ClassifierHead {
            anchors: anchors.clone(),
            scale: self.scale,
        }
    }

    pub fn loss_at(&self, features: &Array2<f64>, anchors: &Array2<f64>) -> f64 {
        let rec = cosines(features.view(), &self.head(anchors), &self.labels).unwrap();
        loss_and_grad(&rec, self.kind, self.scale, &self.weights, self.method).unwrap().loss
    }

    pub fn loss_at_cos(&self, cos: &Array2<f64>) -> f64 {
        let rec = LogitRecord::from_cosines(cos.clone(), &self.labels).unwrap();
        loss_and_grad(&rec, self.kind, self.scale, &self.weights, self.method).unwrap().loss
    }
}

/// Central differences of `f` with respect to every entry of `x`.
pub fn numeric_grad(x: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
    let mut g = Array2::zeros(x.dim());
    let mut probe = x.clone();
    for (idx, &v) in x.indexed_iter() {
        probe[idx] = v + FD_STEP;
        let up = f(&probe);
        probe[idx] = v - FD_STEP;
        let down = f(&probe);
        probe[idx] = v;
        g[idx] = (up - down) / (2.0 * FD_STEP);
    }
    g
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)` over the whole tensor.
pub fn rel_error(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let diff = (a - b).mapv(|v| v * v).sum().sqrt();
    let scale = a.mapv(|v| v * v).sum().sqrt().max(b.mapv(|v| v * v).sum().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradErrors {
    pub cos: f64,
    pub features: f64,
    pub anchors: f64,
}

impl GradErrors {
    pub fn max(&self) -> f64 {
        self.cos.max(self.features).max(self.anchors)
    }
}

pub fn check_case(case: &GradCase) -> GradErrors {
    let head = case.head(&case.anchors);
    let rec = cosines(case.features.view(), &head, &case.labels).unwrap();
    let lg = loss_and_grad(&rec, case.kind, case.scale, &case.weights, case.method).unwrap();
    let (gf, ga) = backprop_to_features(&rec, &lg.grad_cos, &head);

    let num_cos = numeric_grad(&rec.cos, |c| case.loss_at_cos(c));
    let num_f = numeric_grad(&case.features, |f| case.loss_at(f, &case.anchors));
    let num_a = numeric_grad(&case.anchors, |a| case.loss_at(&case.features, a));
    GradErrors {
        cos: rel_error(&lg.grad_cos, &num_cos),
        features: rel_error(&gf, &num_f),
        anchors: rel_error(&ga, &num_a),
    }
}

pub fn loss_kinds<R: Rng>(rng: &mut R) -> [LossKind; 2] {
    [
        LossKind::L2Softmax,
        LossKind::ArcFace {
            margin: rng.random_range(0.05..1.2),
        },
    ]
}
