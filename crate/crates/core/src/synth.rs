//! Synthetic heterogeneous-domain benchmarks.
//!
//! Class prototypes are the vertices of a regular simplex in a hidden latent
//! space. Each domain observes noisy prototypes through its own random linear
//! mixing matrix, so the two feature spaces share no coordinates. The mixing
//! matrices stretch hidden axes unevenly, which lets noise-only axes dominate
//! raw Euclidean distances in a domain.

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::discriminant::simplex_vertices;
use crate::error::{CdmError, Result};
use crate::numerics::sym_eig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    pub classes: usize,
    /// Hidden latent dimension. Prototypes occupy the first `c − 1` axes; the
    /// rest carry noise only.
    pub latent_dim: usize,
    pub ltm_dim: usize,
    pub sm_dim: usize,
    pub ltm_per_class: usize,
    /// Size of the per-class SM pool that few-shot splits draw from.
    pub sm_per_class: usize,
    /// Standard deviation of the isotropic latent noise.
    pub noise: f64,
    /// Each domain stretches every hidden axis by its own gain from
    /// `[1/gain_spread, gain_spread]`, so the domains disagree about which
    /// directions dominate Euclidean distance.
    pub gain_spread: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            classes: 3,
            latent_dim: 8,
            ltm_dim: 40,
            sm_dim: 25,
            ltm_per_class: 50,
            sm_per_class: 50,
            noise: 0.1,
            gain_spread: 10.0,
            seed: 0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        let c = self.classes;
        if c < 2 {
            return Err(CdmError::InvalidArgument("synthetic data needs at least two classes".into()));
        }
        let k = self.latent_dim;
        if k + 1 < c {
            return Err(CdmError::InvalidArgument(format!(
                "latent dimension {k} below c−1 = {}",
                c - 1
            )));
        }
        if self.ltm_dim + 1 < c || self.sm_dim + 1 < c {
            return Err(CdmError::InvalidArgument(format!(
                "domain dimensions ({}, {}) below c−1 = {}",
                self.ltm_dim,
                self.sm_dim,
                c - 1
            )));
        }
        if self.ltm_per_class == 0 || self.sm_per_class == 0 {
            return Err(CdmError::InvalidArgument("per-class counts must be positive".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(CdmError::InvalidArgument(format!(
                "noise must be a nonnegative number, got {}",
                self.noise
            )));
        }
        if !(self.gain_spread >= 1.0 && self.gain_spread.is_finite()) {
            return Err(CdmError::InvalidArgument(format!(
                "gain_spread must be at least 1, got {}",
                self.gain_spread
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub ltm: LabeledDataset,
    pub sm: LabeledDataset,
}

/// Random `rows×cols` Gaussian matrix of full rank `min(rows, cols)`.
fn gaussian_full_rank(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    loop {
        let a: Array2<f64> = Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng));
        let gram = if rows >= cols { a.t().dot(&a) } else { a.dot(&a.t()) };
        let eig = sym_eig(gram.view()).expect("finite gram matrix");
        let rank = rows.min(cols);
        if eig.values[rank - 1] > 1e-10 * eig.values[0] {
            return a;
        }
    }
}

/// Mixing matrix whose column `j` (the image of hidden axis `j`) is scaled
/// by a gain drawn log-uniformly from `[1/spread, spread]`.
fn mixing(rng: &mut ChaCha8Rng, rows: usize, cols: usize, spread: f64) -> Array2<f64> {
    let mut a = gaussian_full_rank(rng, rows, cols);
    for mut col in a.columns_mut() {
        col *= spread.powf(rng.random_range(-1.0..=1.0));
    }
    a
}

fn domain(
    rng: &mut ChaCha8Rng,
    mix: &Array2<f64>,
    prototypes: &Array2<f64>,
    per_class: usize,
    noise: f64,
    tag: &str,
) -> Result<LabeledDataset> {
    let (c, k) = prototypes.dim();
    let mut latent = Array2::zeros((c * per_class, k));
    let mut labels = Vec::with_capacity(c * per_class);
    for class in 0..c {
        for i in 0..per_class {
            let mut row = latent.row_mut(class * per_class + i);
            for (j, v) in row.iter_mut().enumerate() {
                let e: f64 = StandardNormal.sample(rng);
                *v = prototypes[[class, j]] + noise * e;
            }
            labels.push(class);
        }
    }
    let classes = (0..c).map(|k| k.to_string()).collect();
    LabeledDataset::new(latent.dot(&mix.t()), labels, classes, tag)
}

pub fn generate(params: &SynthParams) -> Result<SynthData> {
    params.validate()?;
    let c = params.classes;
    let k = params.latent_dim;
    let mut prototypes = Array2::zeros((c, k));
    prototypes.slice_mut(s![.., ..c - 1]).assign(&simplex_vertices(c));

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let a = mixing(&mut rng, params.ltm_dim, k, params.gain_spread);
    let b = mixing(&mut rng, params.sm_dim, k, params.gain_spread);
    let ltm = domain(&mut rng, &a, &prototypes, params.ltm_per_class, params.noise, "ltm")?;
    let sm = domain(&mut rng, &b, &prototypes, params.sm_per_class, params.noise, "sm")?;
    Ok(SynthData { ltm, sm })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{load_dense_csv, write_dense_csv};

    #[test]
    fn shapes_and_classes() {
        let data = generate(&SynthParams {
            sm_per_class: 3,
            ..SynthParams::default()
        })
        .unwrap();
        assert_eq!(data.ltm.features().dim(), (150, 40));
        assert_eq!(data.sm.features().dim(), (9, 25));
        assert_eq!(data.ltm.class_counts(), vec![50; 3]);
        assert_eq!(data.ltm.classes(), data.sm.classes());
    }

    #[test]
    fn noiseless_classes_collapse_to_points() {
        let data = generate(&SynthParams {
            noise: 0.0,
            ..SynthParams::default()
        })
        .unwrap();
        for class in 0..3 {
            let rows = data.ltm.subset(&data.ltm.rows_of_class(class));
            let first = rows.features().row(0).to_owned();
            assert!(rows.features().rows().into_iter().all(|r| r == first));
        }
    }

    #[test]
    fn same_seed_same_data() {
        let p = SynthParams { seed: 9, ..SynthParams::default() };
        let (a, b) = (generate(&p).unwrap(), generate(&p).unwrap());
        assert_eq!(a.ltm, b.ltm);
        assert_eq!(a.sm, b.sm);
        let other = generate(&SynthParams { seed: 10, ..p }).unwrap();
        assert_ne!(a.sm, other.sm);
    }

    #[test]
    fn files_round_trip_with_matching_classes() {
        let dir = tempfile::tempdir().unwrap();
        let data = generate(&SynthParams { sm_per_class: 3, ..SynthParams::default() }).unwrap();
        let (lp, sp) = (dir.path().join("ltm.csv"), dir.path().join("sm.csv"));
        write_dense_csv(&lp, &data.ltm, "label").unwrap();
        write_dense_csv(&sp, &data.sm, "label").unwrap();
        let (l, s) = (load_dense_csv(&lp, "label").unwrap(), load_dense_csv(&sp, "label").unwrap());
        assert_eq!(l.classes(), s.classes());
        assert_eq!(l.features(), data.ltm.features());
        assert_eq!(s.labels(), data.sm.labels());
    }

    #[test]
    fn infeasible_dimensions_rejected() {
        let bad = SynthParams { latent_dim: 1, ..SynthParams::default() };
        assert!(generate(&bad).is_err());
        let bad = SynthParams { ltm_dim: 1, ..SynthParams::default() };
        assert!(generate(&bad).is_err());
        let bad = SynthParams { gain_spread: 0.5, ..SynthParams::default() };
        assert!(generate(&bad).is_err());
        let bad = SynthParams { classes: 1, ..SynthParams::default() };
        assert!(generate(&bad).is_err());
    }
}
