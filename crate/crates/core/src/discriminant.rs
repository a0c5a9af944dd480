//! Discriminative projections into the shared latent space.
//!
//! The LTM projection `P` can be learned three ways: LDA, a class-similarity
//! graph embedding, or ridge regression onto fixed simplex targets. The final
//! discrimination map `H` is LDA on the union of both projected domains.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::error::{CdmError, Result};
use crate::median::LatentEmbedding;
use crate::numerics::{gen_eig_sym, ridge_solve, sym_eig};

/// Within-scatter shrinkage factor: `S_w + ε·tr(S_w)/m·I`.
pub const WITHIN_SHRINKAGE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    Lda,
    GraphEmbedding,
    FixedMedians,
    RidgeToMedians,
    Identity,
}

/// A linear map `ℝ^source_dim → ℝ^target_dim` stored as a `target×source`
/// matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearMap {
    #[serde(with = "crate::serde_matrix")]
    matrix: Array2<f64>,
    kind: MapKind,
}

impl LinearMap {
    pub fn new(matrix: Array2<f64>, kind: MapKind) -> Result<Self> {
        if !matrix.iter().all(|v| v.is_finite()) {
            return Err(CdmError::NonFinite("linear map"));
        }
        Ok(Self { matrix, kind })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            matrix: Array2::eye(dim),
            kind: MapKind::Identity,
        }
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn kind(&self) -> MapKind {
        self.kind
    }

    pub fn source_dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn target_dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// `self ∘ inner`.
    pub fn compose(&self, inner: &LinearMap) -> Result<LinearMap> {
        if inner.target_dim() != self.source_dim() {
            return Err(CdmError::DimensionMismatch {
                context: "map composition",
                expected: self.source_dim(),
                found: inner.target_dim(),
            });
        }
        LinearMap::new(self.matrix.dot(&inner.matrix), self.kind)
    }

    /// Maps each row of `rows` (instances × source_dim).
    pub fn apply_rows(&self, rows: ArrayView2<f64>) -> Result<Array2<f64>> {
        if rows.ncols() != self.source_dim() {
            return Err(CdmError::DimensionMismatch {
                context: "apply map",
                expected: self.source_dim(),
                found: rows.ncols(),
            });
        }
        Ok(rows.dot(&self.matrix.t()))
    }

    pub fn apply_vec(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        if x.len() != self.source_dim() {
            return Err(CdmError::DimensionMismatch {
                context: "apply map",
                expected: self.source_dim(),
                found: x.len(),
            });
        }
        Ok(self.matrix.dot(&x))
    }
}

/// Between-class and within-class scatter of row instances.
#[derive(Debug, Clone)]
pub struct Scatter {
    pub between: Array2<f64>,
    pub within: Array2<f64>,
}

pub fn scatter_matrices(x: ArrayView2<f64>, labels: &[usize], n_classes: usize) -> Scatter {
    let m = x.ncols();
    let mean = x.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(m));
    let mut sums = Array2::<f64>::zeros((n_classes, m));
    let mut counts = vec![0usize; n_classes];
    for (row, &l) in x.rows().into_iter().zip(labels) {
        sums.row_mut(l).scaled_add(1.0, &row);
        counts[l] += 1;
    }
    let mut class_means = sums;
    for (mut row, &n) in class_means.rows_mut().into_iter().zip(&counts) {
        if n > 0 {
            row /= n as f64;
        }
    }

    let mut centered = x.to_owned();
    for (mut row, &l) in centered.rows_mut().into_iter().zip(labels) {
        row -= &class_means.row(l);
    }
    let within = centered.t().dot(&centered);

    let mut between_factors = Array2::<f64>::zeros((n_classes, m));
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 {
            let diff = (&class_means.row(c) - &mean) * (n as f64).sqrt();
            between_factors.row_mut(c).assign(&diff);
        }
    }
    let between = between_factors.t().dot(&between_factors);
    Scatter { between, within }
}

/// `tr(S_b) / tr(S_w)` of the given coordinates; infinite when the classes
/// have no within-class spread.
pub fn lda_trace_ratio(x: ArrayView2<f64>, labels: &[usize], n_classes: usize) -> f64 {
    let s = scatter_matrices(x, labels, n_classes);
    let b = s.between.diag().sum();
    let w = s.within.diag().sum();
    if w > 0.0 {
        b / w
    } else if b > 0.0 {
        f64::INFINITY
    } else {
        0.0
    }
}

/// Top-`d` LDA directions as rows, scaled to unit within-class variance.
fn lda_directions(
    x: ArrayView2<f64>,
    labels: &[usize],
    n_classes: usize,
    d: usize,
) -> Result<Array2<f64>> {
    let (n, m) = x.dim();
    let scatter = scatter_matrices(x, labels, n_classes);
    let within_trace = scatter.within.diag().sum();
    let total_trace = within_trace + scatter.between.diag().sum();
    if total_trace.is_nan() || total_trace <= 0.0 {
        return Err(CdmError::DegenerateScatter(
            "all instances are identical".into(),
        ));
    }
    // With no within-class spread at all, shrink toward the total scatter.
    let shift = if within_trace > 1e-12 * total_trace {
        WITHIN_SHRINKAGE * within_trace / m as f64
    } else {
        WITHIN_SHRINKAGE * total_trace / m as f64
    };
    let mut within = scatter.within;
    for i in 0..m {
        within[[i, i]] += shift;
    }
    let eig = gen_eig_sym(scatter.between.view(), within.view()).map_err(|e| match e {
        CdmError::NotPositiveDefinite => {
            CdmError::DegenerateScatter("within-class scatter singular after shrinkage".into())
        }
        other => other,
    })?;
    if eig.values[0] <= 1e-12 * (1.0 + eig.values[0].abs()) {
        log::warn!("between-class scatter vanishes; LDA directions are arbitrary");
    }
    let dof = n.saturating_sub(n_classes).max(1) as f64;
    Ok(eig.vectors.slice(s![.., ..d]).t().to_owned() * dof.sqrt())
}

fn check_classes_present(data: &LabeledDataset) -> Result<()> {
    for (c, &count) in data.class_counts().iter().enumerate() {
        if count == 0 {
            return Err(CdmError::EmptyClass(data.classes()[c].clone()));
        }
    }
    Ok(())
}

/// LDA projection of the LTM domain to `d ≤ c−1` dimensions.
pub fn fit_p_lda(ltm: &LabeledDataset, d: usize) -> Result<LinearMap> {
    let c = ltm.n_classes();
    if d == 0 || d + 1 > c {
        return Err(CdmError::InvalidArgument(format!(
            "LDA dimension {d} must lie in 1..={} for {c} classes",
            c.saturating_sub(1)
        )));
    }
    if d > ltm.dim() {
        return Err(CdmError::InvalidArgument(format!(
            "LDA dimension {d} exceeds the input dimension {}",
            ltm.dim()
        )));
    }
    check_classes_present(ltm)?;
    if ltm.len() <= c {
        return Err(CdmError::InvalidArgument(format!(
            "LDA needs more instances ({}) than classes ({c})",
            ltm.len()
        )));
    }
    let rows = lda_directions(ltm.features().view(), ltm.labels(), c, d)?;
    LinearMap::new(rows, MapKind::Lda)
}

/// The symmetric matrix `X·L·Xᵀ` of the class-similarity graph, where
/// `W_ij = +1` for same-class pairs, `−1` otherwise, and `L = D − W`.
pub fn graph_laplacian_form(x: ArrayView2<f64>, labels: &[usize], n_classes: usize) -> Array2<f64> {
    let (n, m) = x.dim();
    let mut counts = vec![0usize; n_classes];
    let mut class_sums = Array2::<f64>::zeros((n_classes, m));
    for (row, &l) in x.rows().into_iter().zip(labels) {
        counts[l] += 1;
        class_sums.row_mut(l).scaled_add(1.0, &row);
    }
    let total_sum = class_sums.sum_axis(Axis(0));

    // Σ_i D_ii x_i x_iᵀ with D_ii = 2·N_{l_i} − N.
    let mut weighted = x.to_owned();
    for (mut row, &l) in weighted.rows_mut().into_iter().zip(labels) {
        row *= 2.0 * counts[l] as f64 - n as f64;
    }
    let degree_term = weighted.t().dot(&x);

    // Σ_ij W_ij x_i x_jᵀ = 2·Σ_c s_c s_cᵀ − s sᵀ.
    let same = class_sums.t().dot(&class_sums) * 2.0;
    let total = outer(total_sum.view(), total_sum.view());
    degree_term - same + total
}

fn outer(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}

/// `½·Σ_ij ‖P·xᵢ − P·xⱼ‖²·W_ij` for a given projection.
pub fn graph_objective(p: ArrayView2<f64>, form: ArrayView2<f64>) -> f64 {
    p.dot(&form).dot(&p.t()).diag().sum()
}

/// Graph-embedding projection: the `d` orthonormal directions minimizing the
/// signed class-similarity objective.
pub fn fit_p_graph_embedding(ltm: &LabeledDataset, d: usize) -> Result<LinearMap> {
    let m = ltm.dim();
    if ltm.len() < 2 {
        return Err(CdmError::InvalidArgument(
            "graph embedding needs at least two instances".into(),
        ));
    }
    if d == 0 || d > m {
        return Err(CdmError::InvalidArgument(format!(
            "graph embedding dimension {d} must lie in 1..={m}"
        )));
    }
    let form = graph_laplacian_form(ltm.features().view(), ltm.labels(), ltm.n_classes());
    let eig = sym_eig(form.view())?;
    // Smallest eigenvalues sit at the end of the descending spectrum.
    let mut rows = Array2::zeros((d, m));
    for r in 0..d {
        rows.row_mut(r).assign(&eig.vectors.column(m - 1 - r));
    }
    LinearMap::new(rows, MapKind::GraphEmbedding)
}

/// Vertices of a regular simplex with `classes` vertices, centred at the
/// origin with unit circumradius, in `classes − 1` coordinates.
pub fn simplex_vertices(classes: usize) -> Array2<f64> {
    let c = classes;
    if c < 2 {
        return Array2::zeros((c, 0));
    }
    let radius = ((c - 1) as f64 / c as f64).sqrt();
    Array2::from_shape_fn((c, c - 1), |(vertex, k)| {
        // Helmert basis vector k: ones on the first k+1 slots, −(k+1) on the next.
        let k1 = (k + 1) as f64;
        let norm = (k1 * (k1 + 1.0)).sqrt();
        let entry = if vertex <= k {
            1.0
        } else if vertex == k + 1 {
            -k1
        } else {
            0.0
        };
        entry / norm / radius
    })
}

/// Approach with predefined class targets: each class gets a simplex vertex
/// (zero-padded to `d`), and `P` is the ridge fit mapping every instance to
/// its class target. Returns the map and the per-class targets.
pub fn fit_p_fixed_medians(
    ltm: &LabeledDataset,
    d: usize,
    eta: f64,
) -> Result<(LinearMap, Vec<Array1<f64>>)> {
    let c = ltm.n_classes();
    if c < 2 {
        return Err(CdmError::InvalidArgument(
            "fixed targets need at least two classes".into(),
        ));
    }
    if d + 1 < c {
        return Err(CdmError::InvalidArgument(format!(
            "fixed-target dimension {d} below c−1 = {}",
            c - 1
        )));
    }
    check_classes_present(ltm)?;
    let vertices = simplex_vertices(c);
    let targets: Vec<Array1<f64>> = vertices
        .rows()
        .into_iter()
        .map(|v| {
            let mut t = Array1::zeros(d);
            t.slice_mut(s![..c - 1]).assign(&v);
            t
        })
        .collect();
    let mut goal = Array2::zeros((d, ltm.len()));
    for (i, &l) in ltm.labels().iter().enumerate() {
        goal.column_mut(i).assign(&targets[l]);
    }
    let p = ridge_solve(ltm.features().t(), goal.view(), eta)?;
    Ok((LinearMap::new(p, MapKind::FixedMedians)?, targets))
}

/// Final discrimination map: LDA on the union embedding, mapping the latent
/// space to `min(d, latent dim)` dimensions. Falls back to the identity when
/// fewer than two classes are present or the scatter is degenerate.
pub fn fit_h(combined: &LatentEmbedding, d: usize) -> Result<LinearMap> {
    let d_in = combined.dim();
    let present = {
        let mut seen = vec![false; combined.n_classes];
        for &l in &combined.labels {
            seen[l] = true;
        }
        seen.iter().filter(|&&s| s).count()
    };
    if present < 2 {
        log::warn!("discrimination map: fewer than two classes present, using identity");
        return Ok(LinearMap::identity(d_in));
    }
    if d == 0 || d + 1 > combined.n_classes {
        return Err(CdmError::InvalidArgument(format!(
            "discrimination dimension {d} must lie in 1..={}",
            combined.n_classes - 1
        )));
    }
    let out = d.min(d_in);
    match lda_directions(
        combined.points.view(),
        &combined.labels,
        combined.n_classes,
        out,
    ) {
        Ok(rows) => LinearMap::new(rows, MapKind::Lda),
        Err(CdmError::DegenerateScatter(why)) => {
            log::warn!("discrimination map degenerate ({why}), using identity");
            Ok(LinearMap::identity(d_in))
        }
        Err(e) => Err(e),
    }
}
