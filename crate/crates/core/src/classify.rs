//! Final-stage classifiers: k-nearest neighbours and a one-vs-one RBF-kernel
//! SVM trained by sequential minimal optimization, plus accuracy.
//!
//! Both classifiers work on any labeled feature matrix, so the same code path
//! serves the CDM training set and the SM-only baseline.

use std::collections::VecDeque;
use std::rc::Rc;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::error::{CdmError, Result};
use crate::numerics::squared_euclidean;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    Knn,
    SvmRbf,
}

/// RBF width: a fixed value, or `1 / (features · mean feature variance)`
/// computed on the training set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Gamma {
    Value(f64),
    #[serde(with = "auto_tag")]
    Auto,
}

pub(crate) mod auto_tag {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str("auto")
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<(), D::Error> {
        let s = String::deserialize(d)?;
        if s == "auto" {
            Ok(())
        } else {
            Err(serde::de::Error::custom(format!("expected \"auto\" or a number, got `{s}`")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSpec {
    pub kind: ClassifierKind,
    pub k: usize,
    pub svm_c: f64,
    pub svm_gamma: Gamma,
    pub svm_tol: f64,
}

impl Default for ClassifierSpec {
    fn default() -> Self {
        Self {
            kind: ClassifierKind::Knn,
            k: 5,
            svm_c: 1.0,
            svm_gamma: Gamma::Auto,
            svm_tol: 1e-3,
        }
    }
}

impl ClassifierSpec {
    pub fn knn(k: usize) -> Self {
        Self {
            k,
            ..Self::default()
        }
    }

    pub fn svm_rbf() -> Self {
        Self {
            kind: ClassifierKind::SvmRbf,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(CdmError::InvalidArgument("knn k must be at least 1".into()));
        }
        if !(self.svm_c > 0.0 && self.svm_c.is_finite()) {
            return Err(CdmError::InvalidArgument(format!(
                "svm_c must be positive, got {}",
                self.svm_c
            )));
        }
        if let Gamma::Value(g) = self.svm_gamma {
            if !(g > 0.0 && g.is_finite()) {
                return Err(CdmError::InvalidArgument(format!(
                    "svm_gamma must be positive, got {g}"
                )));
            }
        }
        if !(self.svm_tol > 0.0 && self.svm_tol.is_finite()) {
            return Err(CdmError::InvalidArgument(format!(
                "svm_tol must be positive, got {}",
                self.svm_tol
            )));
        }
        Ok(())
    }
}

fn check_query(train: &LabeledDataset, query: ArrayView2<f64>) -> Result<()> {
    if query.ncols() != train.dim() {
        return Err(CdmError::DimensionMismatch {
            context: "classifier query",
            expected: train.dim(),
            found: query.ncols(),
        });
    }
    Ok(())
}

/// Majority vote among the `k` nearest training rows.
///
/// Neighbours at equal distance are ordered by class index, so the result
/// does not depend on the order of training rows. A tied vote goes to the
/// class of the nearest neighbour among the tied classes.
pub fn knn_predict(train: &LabeledDataset, query: ArrayView2<f64>, k: usize) -> Result<Vec<usize>> {
    if train.is_empty() {
        return Err(CdmError::InvalidArgument("knn needs training instances".into()));
    }
    if k == 0 {
        return Err(CdmError::InvalidArgument("knn k must be at least 1".into()));
    }
    check_query(train, query)?;
    let k = k.min(train.len());
    let x = train.features();
    let labels = train.labels();
    let c = train.n_classes();
    Ok((0..query.nrows())
        .into_par_iter()
        .map(|row| {
            let q = query.row(row);
            let mut order: Vec<(f64, usize)> = x
                .rows()
                .into_iter()
                .zip(labels)
                .map(|(r, &l)| (squared_euclidean(r.iter().copied(), q.iter().copied()), l))
                .collect();
            let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if k < order.len() {
                order.select_nth_unstable_by(k - 1, cmp);
                order.truncate(k);
            }
            order.sort_by(cmp);
            let mut votes = vec![0usize; c];
            for &(_, l) in &order {
                votes[l] += 1;
            }
            let top = *votes.iter().max().expect("at least one class");
            order
                .iter()
                .map(|&(_, l)| l)
                .find(|&l| votes[l] == top)
                .expect("winning class has a neighbour")
        })
        .collect())
}

fn rbf(gamma: f64, a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    (-gamma * squared_euclidean(a.iter().copied(), b.iter().copied())).exp()
}

/// `1 / (features · mean per-feature variance)`, or `1 / features` when the
/// training features have no spread.
pub fn auto_gamma(x: ArrayView2<f64>) -> f64 {
    let d = x.ncols().max(1) as f64;
    let mean_var = if x.nrows() == 0 {
        0.0
    } else {
        x.var_axis(Axis(0), 0.0).mean().unwrap_or(0.0)
    };
    if mean_var > 1e-300 {
        1.0 / (d * mean_var)
    } else {
        1.0 / d
    }
}

/// Kernel rows computed on demand and kept under a memory budget.
struct KernelCache<'a> {
    x: &'a Array2<f64>,
    gamma: f64,
    rows: Vec<Option<Rc<[f64]>>>,
    order: VecDeque<usize>,
    capacity: usize,
}

const CACHE_ENTRIES: usize = 1 << 25;

impl<'a> KernelCache<'a> {
    fn new(x: &'a Array2<f64>, gamma: f64) -> Self {
        let n = x.nrows();
        Self {
            x,
            gamma,
            rows: vec![None; n],
            order: VecDeque::new(),
            capacity: (CACHE_ENTRIES / n.max(1)).max(2),
        }
    }

    fn row(&mut self, i: usize) -> Rc<[f64]> {
        if let Some(r) = &self.rows[i] {
            return Rc::clone(r);
        }
        if self.order.len() >= self.capacity {
            if let Some(old) = self.order.pop_front() {
                self.rows[old] = None;
            }
        }
        let xi = self.x.row(i);
        let r: Rc<[f64]> = self.x.rows().into_iter().map(|xt| rbf(self.gamma, xi, xt)).collect();
        self.rows[i] = Some(Rc::clone(&r));
        self.order.push_back(i);
        r
    }
}

/// One binary problem's solution: `f(x) = Σ coef_t·K(x_t, x) − rho` over the
/// support vectors, positive for the first class of the pair.
#[derive(Debug, Clone)]
pub struct BinarySvm {
    pub support: Array2<f64>,
    pub coef: Vec<f64>,
    pub rho: f64,
    pub dual_objective: f64,
    pub iterations: usize,
}

impl BinarySvm {
    pub fn decision(&self, gamma: f64, x: ArrayView1<f64>) -> f64 {
        self.support
            .rows()
            .into_iter()
            .zip(&self.coef)
            .map(|(s, &a)| a * rbf(gamma, s, x))
            .sum::<f64>()
            - self.rho
    }
}

const TAU: f64 = 1e-12;

/// Solves `min ½αᵀQα − Σα` subject to `0 ≤ α ≤ C` and `yᵀα = 0`, where
/// `Q_ij = y_i·y_j·K(x_i, x_j)`, by SMO with second-order working-set
/// selection. `y` holds ±1.
pub fn smo_binary(x: &Array2<f64>, y: &[f64], c: f64, gamma: f64, tol: f64, max_iter: usize) -> Result<BinarySvm> {
    let n = x.nrows();
    if n != y.len() || n == 0 {
        return Err(CdmError::DimensionMismatch {
            context: "svm labels",
            expected: n,
            found: y.len(),
        });
    }
    let mut cache = KernelCache::new(x, gamma);
    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let upper = |a: f64| a >= c;
    let lower = |a: f64| a <= 0.0;
    let in_up = |t: usize, a: &[f64]| (y[t] > 0.0 && !upper(a[t])) || (y[t] < 0.0 && !lower(a[t]));
    let in_low = |t: usize, a: &[f64]| (y[t] > 0.0 && !lower(a[t])) || (y[t] < 0.0 && !upper(a[t]));

    let mut iterations = 0;
    loop {
        // Maximal violator from the "up" set.
        let mut gmax = f64::NEG_INFINITY;
        let mut i = usize::MAX;
        for t in 0..n {
            if in_up(t, &alpha) && -y[t] * grad[t] >= gmax {
                gmax = -y[t] * grad[t];
                i = t;
            }
        }
        let mut gmin = f64::INFINITY;
        for t in 0..n {
            if in_low(t, &alpha) {
                gmin = gmin.min(-y[t] * grad[t]);
            }
        }
        if i == usize::MAX || gmax - gmin < tol {
            break;
        }
        if iterations >= max_iter {
            return Err(CdmError::NonConvergence {
                what: "SMO",
                iterations,
                gap: gmax - gmin,
            });
        }
        iterations += 1;

        let ki = cache.row(i);
        let mut j = usize::MAX;
        let mut best = f64::INFINITY;
        for t in 0..n {
            if !in_low(t, &alpha) {
                continue;
            }
            let b = gmax + y[t] * grad[t];
            if b > 0.0 {
                let a = (2.0 - 2.0 * ki[t]).max(TAU);
                let score = -(b * b) / a;
                if score <= best {
                    best = score;
                    j = t;
                }
            }
        }
        if j == usize::MAX {
            break;
        }
        let kj = cache.row(j);

        let (old_i, old_j) = (alpha[i], alpha[j]);
        let quad = (2.0 - 2.0 * ki[j]).max(TAU);
        if y[i] != y[j] {
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }

        let di = alpha[i] - old_i;
        let dj = alpha[j] - old_j;
        for t in 0..n {
            grad[t] += y[t] * (y[i] * ki[t] * di + y[j] * kj[t] * dj);
        }
    }

    // Offset from free variables, or the midpoint of the feasible interval.
    let mut free_sum = 0.0;
    let mut free = 0usize;
    let mut ub = f64::INFINITY;
    let mut lb = f64::NEG_INFINITY;
    for t in 0..n {
        let yg = y[t] * grad[t];
        if upper(alpha[t]) {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if lower(alpha[t]) {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            free += 1;
            free_sum += yg;
        }
    }
    let rho = if free > 0 { free_sum / free as f64 } else { (ub + lb) / 2.0 };

    let dual_objective = alpha.iter().zip(&grad).map(|(a, g)| a * (g - 1.0)).sum::<f64>() / 2.0;
    let sv: Vec<usize> = (0..n).filter(|&t| alpha[t] > 0.0).collect();
    Ok(BinarySvm {
        support: x.select(Axis(0), &sv),
        coef: sv.iter().map(|&t| y[t] * alpha[t]).collect(),
        rho,
        dual_objective,
        iterations,
    })
}

/// One-vs-one RBF SVM. Pair `(a, b)` with `a < b` votes for `a` when its
/// decision value is non-negative.
#[derive(Debug, Clone)]
pub struct SvmModel {
    pub gamma: f64,
    pub n_classes: usize,
    pub dim: usize,
    pub pairs: Vec<(usize, usize, BinarySvm)>,
}

pub fn svm_fit(train: &LabeledDataset, spec: &ClassifierSpec) -> Result<SvmModel> {
    spec.validate()?;
    let counts = train.class_counts();
    let present: Vec<usize> = (0..counts.len()).filter(|&c| counts[c] > 0).collect();
    if present.len() < 2 {
        return Err(CdmError::InvalidArgument(
            "svm needs at least two classes with instances".into(),
        ));
    }
    let gamma = match spec.svm_gamma {
        Gamma::Auto => auto_gamma(train.features().view()),
        Gamma::Value(g) => g,
    };
    let mut jobs = Vec::new();
    for (ia, &a) in present.iter().enumerate() {
        for &b in &present[ia + 1..] {
            jobs.push((a, b));
        }
    }
    let pairs = jobs
        .into_par_iter()
        .map(|(a, b)| {
            let rows: Vec<usize> = (0..train.len())
                .filter(|&t| train.labels()[t] == a || train.labels()[t] == b)
                .collect();
            let x = train.features().select(Axis(0), &rows);
            let y: Vec<f64> = rows
                .iter()
                .map(|&t| if train.labels()[t] == a { 1.0 } else { -1.0 })
                .collect();
            let cap = 10_000usize.saturating_mul(rows.len());
            smo_binary(&x, &y, spec.svm_c, gamma, spec.svm_tol, cap).map(|m| (a, b, m))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SvmModel {
        gamma,
        n_classes: train.n_classes(),
        dim: train.dim(),
        pairs,
    })
}

pub fn svm_predict(model: &SvmModel, query: ArrayView2<f64>) -> Result<Vec<usize>> {
    if query.ncols() != model.dim {
        return Err(CdmError::DimensionMismatch {
            context: "svm query",
            expected: model.dim,
            found: query.ncols(),
        });
    }
    Ok((0..query.nrows())
        .into_par_iter()
        .map(|row| {
            let q = query.row(row);
            let mut votes = vec![0usize; model.n_classes];
            for (a, b, m) in &model.pairs {
                if m.decision(model.gamma, q) >= 0.0 {
                    votes[*a] += 1;
                } else {
                    votes[*b] += 1;
                }
            }
            let top = *votes.iter().max().expect("at least one class");
            votes.iter().position(|&v| v == top).expect("maximum exists")
        })
        .collect())
}

/// Trains the classifier described by `spec` on `train` and labels `query`.
pub fn fit_predict(spec: &ClassifierSpec, train: &LabeledDataset, query: ArrayView2<f64>) -> Result<Vec<usize>> {
    spec.validate()?;
    match spec.kind {
        ClassifierKind::Knn => knn_predict(train, query, spec.k),
        ClassifierKind::SvmRbf => {
            check_query(train, query)?;
            svm_predict(&svm_fit(train, spec)?, query)
        }
    }
}

/// Fraction of positions where `predicted` equals `truth`.
pub fn accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(CdmError::DimensionMismatch {
            context: "accuracy",
            expected: truth.len(),
            found: predicted.len(),
        });
    }
    if truth.is_empty() {
        return Err(CdmError::InvalidArgument("accuracy of an empty label set".into()));
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}
