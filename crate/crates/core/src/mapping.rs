//! The SM-domain map `Q`, fit so that every SM instance lands as close as
//! possible to the geometric median of its class in the latent space.

use ndarray::Array2;

use crate::dataset::LabeledDataset;
use crate::discriminant::{LinearMap, MapKind};
use crate::error::{CdmError, Result};
use crate::median::{ClusterSummary, LatentEmbedding};
use crate::numerics::ridge_solve;

/// Target matrix `G` (d×N) whose column `i` is the median of instance `i`'s
/// class.
fn median_targets(data: &LabeledDataset, summaries: &[ClusterSummary]) -> Result<Array2<f64>> {
    let d = summaries
        .first()
        .map(|s| s.median.len())
        .ok_or_else(|| CdmError::InvalidArgument("no cluster medians supplied".into()))?;
    let mut by_class: Vec<Option<&ClusterSummary>> = vec![None; data.n_classes()];
    for s in summaries {
        if s.median.len() != d {
            return Err(CdmError::DimensionMismatch {
                context: "cluster median",
                expected: d,
                found: s.median.len(),
            });
        }
        if let Some(slot) = by_class.get_mut(s.class_id) {
            *slot = Some(s);
        }
    }
    let mut goal = Array2::zeros((d, data.len()));
    for (i, &l) in data.labels().iter().enumerate() {
        let s = by_class[l].ok_or_else(|| {
            CdmError::ClassMismatch(format!("no median for class `{}`", data.classes()[l]))
        })?;
        for (k, &v) in s.median.iter().enumerate() {
            goal[[k, i]] = v;
        }
    }
    Ok(goal)
}

/// `Σ_l Σ_{i: lᵢ = l} ‖Q·yᵢ − γ_l‖² + η‖Q‖²_F`.
pub fn q_objective(
    q: &Array2<f64>,
    data: &LabeledDataset,
    summaries: &[ClusterSummary],
    eta: f64,
) -> Result<f64> {
    let goal = median_targets(data, summaries)?;
    let residual = q.dot(&data.features().t()) - goal;
    Ok(residual.iter().map(|v| v * v).sum::<f64>() + eta * q.iter().map(|v| v * v).sum::<f64>())
}

/// Ridge fit of `Q` toward the class medians.
pub fn fit_q(sm_train: &LabeledDataset, summaries: &[ClusterSummary], eta: f64) -> Result<LinearMap> {
    let goal = median_targets(sm_train, summaries)?;
    let q = ridge_solve(sm_train.features().t(), goal.view(), eta)?;
    LinearMap::new(q, MapKind::RidgeToMedians)
}

/// Applies `map` to every instance, carrying labels through.
pub fn apply_map(map: &LinearMap, data: &LabeledDataset) -> Result<LatentEmbedding> {
    let points = map.apply_rows(data.features().view())?;
    LatentEmbedding::new(points, data.labels().to_vec(), data.n_classes())
}
