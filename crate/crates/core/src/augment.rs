//! Two-block feature augmentation.
//!
//! LTM instances become `[H·P·x, 0_n]` and SM instances `[H·Q·y, y]`, so both
//! domains share the dimension `d + n`.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::discriminant::LinearMap;
use crate::error::{CdmError, Result};

fn chain(h: &LinearMap, inner: &LinearMap) -> Result<()> {
    if h.source_dim() != inner.target_dim() {
        return Err(CdmError::DimensionMismatch {
            context: "augmentation map chain",
            expected: h.source_dim(),
            found: inner.target_dim(),
        });
    }
    Ok(())
}

pub fn augment_ltm(h: &LinearMap, p: &LinearMap, x: ArrayView1<f64>, n: usize) -> Result<Array1<f64>> {
    chain(h, p)?;
    let latent = h.apply_vec(p.apply_vec(x)?.view())?;
    let mut out = Array1::zeros(latent.len() + n);
    out.slice_mut(s![..latent.len()]).assign(&latent);
    Ok(out)
}

pub fn augment_sm(h: &LinearMap, q: &LinearMap, y: ArrayView1<f64>) -> Result<Array1<f64>> {
    chain(h, q)?;
    let latent = h.apply_vec(q.apply_vec(y)?.view())?;
    Ok(concatenate(Axis(0), &[latent.view(), y]).expect("1-d blocks"))
}

/// Row-wise [`augment_ltm`] given the fused map `H·P`.
pub fn augment_ltm_rows(hp: &LinearMap, x: ArrayView2<f64>, n: usize) -> Result<Array2<f64>> {
    let latent = hp.apply_rows(x)?;
    let zeros = Array2::zeros((x.nrows(), n));
    Ok(concatenate(Axis(1), &[latent.view(), zeros.view()]).expect("matching rows"))
}

/// Row-wise [`augment_sm`] given the fused map `H·Q`.
pub fn augment_sm_rows(hq: &LinearMap, y: ArrayView2<f64>) -> Result<Array2<f64>> {
    let latent = hq.apply_rows(y)?;
    Ok(concatenate(Axis(1), &[latent.view(), y]).expect("matching rows"))
}

/// Optional rescaling that gives the latent block and the raw block the same
/// average per-feature spread on the training rows. Values are divided, not
/// centred, so the zero tail of LTM rows stays exactly zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockScales {
    pub latent_dim: usize,
    pub latent: f64,
    pub raw: f64,
}

fn block_spread(block: ArrayView2<f64>) -> f64 {
    let n = block.nrows();
    if n < 2 || block.ncols() == 0 {
        return 1.0;
    }
    let mean = block.mean_axis(Axis(0)).expect("non-empty");
    let var: f64 = block
        .rows()
        .into_iter()
        .map(|r| (&r - &mean).mapv(|v| v * v).sum())
        .sum::<f64>()
        / ((n - 1) * block.ncols()) as f64;
    let sd = var.sqrt();
    if sd > 1e-12 {
        sd
    } else {
        1.0
    }
}

impl BlockScales {
    pub fn fit(training: ArrayView2<f64>, latent_dim: usize) -> Self {
        Self {
            latent_dim,
            latent: block_spread(training.slice(s![.., ..latent_dim])),
            raw: block_spread(training.slice(s![.., latent_dim..])),
        }
    }

    pub fn apply(&self, rows: &mut Array2<f64>) {
        let d = self.latent_dim;
        rows.slice_mut(s![.., ..d]).mapv_inplace(|v| v / self.latent);
        rows.slice_mut(s![.., d..]).mapv_inplace(|v| v / self.raw);
    }
}
