//! Geometric medians, cluster radii and the pairwise-disjointness test in the
//! shared latent space.
//!
//! Medians are Euclidean (Fermat–Weber) points computed with Weiszfeld's
//! iteration. When an iterate lands on a data point the Vardi–Zhang update is
//! used, and the data point nearest to each iterate is tested for optimality
//! directly, which avoids the slow creep Weiszfeld shows when the median is
//! itself a data point.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{CdmError, Result};
use crate::numerics::{euclidean, spd_solve};

pub const DEFAULT_TOL: f64 = 1e-9;
pub const DEFAULT_MAX_ITER: usize = 1000;

/// Points in the latent space with their class indices.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentEmbedding {
    pub points: Array2<f64>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl LatentEmbedding {
    pub fn new(points: Array2<f64>, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if points.nrows() != labels.len() {
            return Err(CdmError::DimensionMismatch {
                context: "latent embedding labels",
                expected: points.nrows(),
                found: labels.len(),
            });
        }
        if points.ncols() == 0 {
            return Err(CdmError::InvalidArgument(
                "latent dimension must be at least 1".into(),
            ));
        }
        if labels.iter().any(|&l| l >= n_classes) {
            return Err(CdmError::InvalidArgument(
                "latent label outside class range".into(),
            ));
        }
        if !points.iter().all(|v| v.is_finite()) {
            return Err(CdmError::NonFinite("latent embedding"));
        }
        Ok(Self {
            points,
            labels,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn class_points(&self, class: usize) -> Array2<f64> {
        let rows: Vec<usize> = (0..self.len())
            .filter(|&i| self.labels[i] == class)
            .collect();
        self.points.select(Axis(0), &rows)
    }

    /// Stacks two embeddings of the same latent space.
    pub fn concat(&self, other: &LatentEmbedding) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(CdmError::DimensionMismatch {
                context: "latent concat",
                expected: self.dim(),
                found: other.dim(),
            });
        }
        let points = ndarray::concatenate(Axis(0), &[self.points.view(), other.points.view()])
            .expect("matching widths");
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Self::new(points, labels, self.n_classes.max(other.n_classes))
    }
}

/// Median and radius of one class cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub class_id: usize,
    pub median: Vec<f64>,
    /// Largest distance from a member to the median.
    pub radius: f64,
    pub count: usize,
}

pub fn objective(points: ArrayView2<f64>, p: ArrayView1<f64>) -> f64 {
    points
        .rows()
        .into_iter()
        .map(|x| euclidean(x.iter().copied(), p.iter().copied()))
        .sum()
}

/// Threshold under which an iterate counts as sitting on a data point.
fn coincidence_eps(points: ArrayView2<f64>) -> f64 {
    let scale = points.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    1e-12 * (1.0 + scale)
}

/// Pull of all points not coinciding with `p`, and the number that do.
fn residual_at(points: ArrayView2<f64>, p: ArrayView1<f64>, eps: f64) -> (Array1<f64>, usize) {
    let mut pull = Array1::zeros(p.len());
    let mut coincident = 0;
    for x in points.rows() {
        let d = euclidean(x.iter().copied(), p.iter().copied());
        if d <= eps {
            coincident += 1;
        } else {
            pull.scaled_add(1.0 / d, &(&x - &p));
        }
    }
    (pull, coincident)
}

/// Norm of the (sub)gradient of the distance-sum objective at `p`.
///
/// Away from data points this is `‖Σ (p − xᵢ)/‖p − xᵢ‖‖`. At a data point of
/// multiplicity `η` it is `max(0, ‖R‖ − η)` with `R` the pull of the other
/// points, which is zero exactly when `p` is optimal.
pub fn subgradient_residual(points: ArrayView2<f64>, p: ArrayView1<f64>) -> f64 {
    let (pull, coincident) = residual_at(points, p, coincidence_eps(points));
    let norm = pull.dot(&pull).sqrt();
    if coincident == 0 {
        norm
    } else {
        (norm - coincident as f64).max(0.0)
    }
}

/// Geometric median of the rows of `points`.
pub fn geometric_median(points: ArrayView2<f64>, tol: f64, max_iter: usize) -> Result<Array1<f64>> {
    geometric_median_traced(points, tol, max_iter).map(|(p, _)| p)
}

/// Like [`geometric_median`], also returning the objective value after each
/// iterate (starting with the initial centroid).
pub fn geometric_median_traced(
    points: ArrayView2<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<(Array1<f64>, Vec<f64>)> {
    let k = points.nrows();
    if k == 0 {
        return Err(CdmError::InvalidArgument(
            "geometric median of an empty point set".into(),
        ));
    }
    if tol.is_nan() || tol <= 0.0 {
        return Err(CdmError::InvalidArgument(format!(
            "median tolerance must be positive, got {tol}"
        )));
    }
    if !points.iter().all(|v| v.is_finite()) {
        return Err(CdmError::NonFinite("median input"));
    }
    if k == 1 {
        let p = points.row(0).to_owned();
        return Ok((p, vec![0.0]));
    }
    if k == 2 {
        // Every point of the segment is optimal.
        let p = (&points.row(0) + &points.row(1)) * 0.5;
        let f = objective(points, p.view());
        return Ok((p, vec![f]));
    }

    let eps = coincidence_eps(points);
    let mut p = points.mean_axis(Axis(0)).expect("k > 0");
    let mut trace = vec![objective(points, p.view())];
    let mut movement = f64::INFINITY;

    for _ in 0..max_iter {
        if let Some(x) = optimal_nearest_point(points, p.view(), eps) {
            p = x;
            trace.push(objective(points, p.view()));
            return Ok((p, trace));
        }

        let mut weighted = Array1::zeros(p.len());
        let mut weight = 0.0;
        let mut coincident = 0usize;
        for x in points.rows() {
            let d = euclidean(x.iter().copied(), p.iter().copied());
            if d <= eps {
                coincident += 1;
            } else {
                weighted.scaled_add(1.0 / d, &x);
                weight += 1.0 / d;
            }
        }
        let target = weighted / weight;
        let next = if coincident == 0 {
            target
        } else {
            // Vardi–Zhang step from a data point.
            let pull = &target * weight - &p * weight;
            let r = pull.dot(&pull).sqrt();
            let ratio = coincident as f64 / r;
            if ratio >= 1.0 {
                return Ok((p, trace));
            }
            &target * (1.0 - ratio) + &p * ratio
        };

        let (mut next, mut value) = extrapolate(points, p.view(), next);
        if coincident == 0 {
            if let Some((x, v)) = newton_candidate(points, p.view(), value) {
                next = x;
                value = v;
            }
        }
        movement = euclidean(next.iter().copied(), p.iter().copied());
        p = next;
        trace.push(value);
        if movement <= tol {
            return Ok((p, trace));
        }
    }
    Err(CdmError::NonConvergence {
        what: "Weiszfeld iteration",
        iterations: max_iter,
        gap: movement,
    })
}

/// Step doubling along the Weiszfeld direction `next − p`, kept while the
/// objective keeps falling. Near a data point the plain iteration takes many
/// tiny steps in an almost constant direction; this collapses them.
fn extrapolate(points: ArrayView2<f64>, p: ArrayView1<f64>, next: Array1<f64>) -> (Array1<f64>, f64) {
    let step = &next - &p;
    let mut best = next;
    let mut best_value = objective(points, best.view());
    let mut scale = 2.0;
    while scale <= 1024.0 {
        let trial = &p + &(&step * scale);
        let value = objective(points, trial.view());
        if value >= best_value {
            break;
        }
        best = trial;
        best_value = value;
        scale *= 2.0;
    }
    (best, best_value)
}

/// Damped Newton step on the smooth objective, returned only when it beats
/// `to_beat`. Away from data points the Hessian is `Σ (I − uᵢuᵢᵀ)/dᵢ`.
fn newton_candidate(points: ArrayView2<f64>, p: ArrayView1<f64>, to_beat: f64) -> Option<(Array1<f64>, f64)> {
    let d = p.len();
    let mut grad = Array1::zeros(d);
    let mut hess = Array2::zeros((d, d));
    for x in points.rows() {
        let diff = &p - &x;
        let dist = diff.dot(&diff).sqrt();
        let u = &diff / dist;
        grad.scaled_add(1.0, &u);
        for a in 0..d {
            hess[[a, a]] += 1.0 / dist;
            for b in 0..d {
                hess[[a, b]] -= u[a] * u[b] / dist;
            }
        }
    }
    let step = spd_solve(hess.view(), grad.view())?;
    let grad_norm = grad.dot(&grad).sqrt();
    // Close to the optimum the objective stops resolving progress, so a step
    // that ties within rounding is taken when it shrinks the gradient.
    let rounding = to_beat * 4.0 * f64::EPSILON;
    let mut scale = 1.0;
    for _ in 0..20 {
        let trial = &p - &(&step * scale);
        let value = objective(points, trial.view());
        if value < to_beat
            || (value <= to_beat + rounding && subgradient_residual(points, trial.view()) < grad_norm)
        {
            return Some((trial, value));
        }
        scale *= 0.5;
    }
    None
}

/// Returns the data point closest to `p` if it satisfies the optimality
/// condition `‖R‖ ≤ η`.
fn optimal_nearest_point(points: ArrayView2<f64>, p: ArrayView1<f64>, eps: f64) -> Option<Array1<f64>> {
    let nearest = points
        .rows()
        .into_iter()
        .map(|x| euclidean(x.iter().copied(), p.iter().copied()))
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(&b.1))?
        .0;
    let candidate = points.row(nearest);
    let (pull, coincident) = residual_at(points, candidate, eps);
    (pull.dot(&pull).sqrt() <= coincident as f64).then(|| candidate.to_owned())
}

/// One summary per class, in class order.
pub fn cluster_summaries(emb: &LatentEmbedding) -> Result<Vec<ClusterSummary>> {
    (0..emb.n_classes)
        .map(|class| {
            let pts = emb.class_points(class);
            if pts.nrows() == 0 {
                return Err(CdmError::EmptyClass(class.to_string()));
            }
            let median = geometric_median(pts.view(), DEFAULT_TOL, DEFAULT_MAX_ITER)?;
            let radius = pts
                .rows()
                .into_iter()
                .map(|x| euclidean(x.iter().copied(), median.iter().copied()))
                .fold(0.0_f64, f64::max);
            Ok(ClusterSummary {
                class_id: class,
                median: median.to_vec(),
                radius,
                count: pts.nrows(),
            })
        })
        .collect()
}

/// Margins `d(γᵢ, γⱼ) − rᵢ − rⱼ` between every pair of clusters. The flag is
/// set only when every off-diagonal margin is strictly positive. Diagonal
/// entries are zero and carry no meaning.
pub fn pairwise_disjoint(summaries: &[ClusterSummary]) -> Result<(bool, Array2<f64>)> {
    let c = summaries.len();
    if c < 2 {
        return Err(CdmError::InvalidArgument(
            "disjointness needs at least two clusters".into(),
        ));
    }
    let mut margins = Array2::zeros((c, c));
    let mut disjoint = true;
    for i in 0..c {
        for j in (i + 1)..c {
            let a = &summaries[i];
            let b = &summaries[j];
            let m = euclidean(a.median.iter().copied(), b.median.iter().copied()) - a.radius - b.radius;
            margins[[i, j]] = m;
            margins[[j, i]] = m;
            disjoint &= m > 0.0;
        }
    }
    Ok((disjoint, margins))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn median(points: &Array2<f64>) -> Array1<f64> {
        geometric_median(points.view(), DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap()
    }

    #[test]
    fn single_point_is_its_own_median() {
        assert_eq!(median(&array![[2.0, 7.0]]).to_vec(), vec![2.0, 7.0]);
    }

    #[test]
    fn two_points_give_midpoint() {
        assert_eq!(median(&array![[0.0, 0.0], [2.0, 4.0]]).to_vec(), vec![1.0, 2.0]);
    }

    #[test]
    fn square_corners() {
        let m = median(&array![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]);
        assert!((m[0] - 0.5).abs() < 1e-9 && (m[1] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn collinear_points_match_grid_search() {
        let pts = array![[0.0, 0.0], [1.0, 0.0], [10.0, 0.0]];
        // Oracle: dense grid over the x-axis.
        let mut best = (f64::INFINITY, 0.0);
        for i in 0..=100_000 {
            let x = i as f64 * 1e-4;
            let f = x.abs() + (x - 1.0).abs() + (x - 10.0).abs();
            if f < best.0 {
                best = (f, x);
            }
        }
        let m = median(&pts);
        assert!((m[0] - best.1).abs() < 1e-6);
        assert!((m[0] - 1.0).abs() < 1e-6 && m[1].abs() < 1e-12);
    }

    #[test]
    fn obtuse_triangle_median_is_the_obtuse_vertex() {
        // Angle at the origin is 150°, above the 120° Fermat threshold.
        let a = 150f64.to_radians();
        let pts = array![[0.0, 0.0], [1.0, 0.0], [a.cos(), a.sin()]];
        assert_eq!(median(&pts).to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn empty_input_and_bad_tolerance_are_rejected() {
        let empty = Array2::<f64>::zeros((0, 2));
        assert!(geometric_median(empty.view(), 1e-9, 10).is_err());
        let pts = array![[0.0], [1.0], [3.0]];
        assert!(geometric_median(pts.view(), 0.0, 10).is_err());
    }

    #[test]
    fn non_convergence_reports_gap() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = Array2::from_shape_fn((20, 3), |_| rng.random_range(-1.0..1.0));
        match geometric_median(pts.view(), 1e-300, 2) {
            Err(CdmError::NonConvergence { iterations, gap, .. }) => {
                assert_eq!(iterations, 2);
                assert!(gap > 0.0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn summaries_of_simple_clusters() {
        let emb = LatentEmbedding::new(array![[4.0, 4.0]], vec![0], 1).unwrap();
        assert_eq!(cluster_summaries(&emb).unwrap()[0].radius, 0.0);

        let emb = LatentEmbedding::new(
            array![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]],
            vec![0; 4],
            1,
        )
        .unwrap();
        let s = &cluster_summaries(&emb).unwrap()[0];
        assert!((s.median[0] - 0.5).abs() < 1e-9);
        assert!((s.radius - 0.5f64.sqrt()).abs() < 1e-9);
        assert_eq!(s.count, 4);

        let emb = LatentEmbedding::new(array![[0.0], [5.0], [1.0]], vec![0, 1, 0], 2).unwrap();
        let s = cluster_summaries(&emb).unwrap();
        assert_eq!(s.len(), 2);
        assert_ne!(s[0].class_id, s[1].class_id);
    }

    #[test]
    fn empty_class_is_an_error() {
        let emb = LatentEmbedding::new(array![[0.0]], vec![0], 2).unwrap();
        assert!(matches!(cluster_summaries(&emb), Err(CdmError::EmptyClass(_))));
    }

    fn summary(class_id: usize, median: Vec<f64>, radius: f64) -> ClusterSummary {
        ClusterSummary {
            class_id,
            median,
            radius,
            count: 1,
        }
    }

    #[test]
    fn disjointness_is_strict() {
        let (flag, m) =
            pairwise_disjoint(&[summary(0, vec![0.0], 1.0), summary(1, vec![3.0], 1.0)]).unwrap();
        assert!(flag);
        assert_eq!(m[[0, 1]], 1.0);

        let (flag, m) =
            pairwise_disjoint(&[summary(0, vec![0.0], 1.0), summary(1, vec![2.0], 1.0)]).unwrap();
        assert!(!flag);
        assert_eq!(m[[0, 1]], 0.0);
    }

    #[test]
    fn one_overlapping_pair_out_of_three() {
        let s = [
            summary(0, vec![0.0, 0.0], 1.0),
            summary(1, vec![10.0, 0.0], 1.0),
            summary(2, vec![10.0, 1.5], 1.0),
        ];
        let (flag, m) = pairwise_disjoint(&s).unwrap();
        assert!(!flag);
        let negative: Vec<(usize, usize)> = (0..3)
            .flat_map(|i| ((i + 1)..3).map(move |j| (i, j)))
            .filter(|&(i, j)| m[[i, j]] < 0.0)
            .collect();
        assert_eq!(negative, vec![(1, 2)]);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m[[i, j]], m[[j, i]]);
            }
        }
    }

    #[test]
    fn disjointness_needs_two_clusters() {
        assert!(pairwise_disjoint(&[summary(0, vec![0.0], 0.0)]).is_err());
    }

    proptest! {
        #[test]
        fn weiszfeld_objective_never_increases(seed in 0u64..10_000, k in 3usize..=50, d in 1usize..=5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts = Array2::from_shape_fn((k, d), |_| rng.random_range(-5.0..5.0));
            let (p, trace) = geometric_median_traced(pts.view(), DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
            // Rounding bound of evaluating a sum of k distances.
            let slack = 4.0 * k as f64 * f64::EPSILON;
            for w in trace.windows(2) {
                prop_assert!(w[1] <= w[0] * (1.0 + slack), "{} > {}", w[1], w[0]);
            }
            prop_assert!(subgradient_residual(pts.view(), p.view()) <= 1e-6);
        }

        #[test]
        fn median_is_translation_equivariant(seed in 0u64..10_000, k in 1usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts = Array2::from_shape_fn((k, 3), |_| rng.random_range(-1.0..1.0));
            let shift = Array1::from_shape_fn(3, |_| rng.random_range(-10.0..10.0));
            let a = median(&pts);
            let b = median(&(&pts + &shift));
            for i in 0..3 {
                prop_assert!((b[i] - a[i] - shift[i]).abs() <= 1e-8);
            }
        }
    }
}
