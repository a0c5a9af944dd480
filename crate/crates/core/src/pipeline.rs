//! End-to-end fitting and prediction, plus the geometric diagnostics of the
//! shared latent space.
//!
//! Fitting runs in a fixed order: learn `P` on the LTM domain, project the LTM
//! data and summarize each class by its geometric median, fit `Q` so the SM
//! training instances land on those medians, then learn the final
//! discrimination map `H` on the union of both projected domains.

use std::path::Path;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::augment::{augment_ltm_rows, BlockScales};
use crate::classify::{accuracy, fit_predict, ClassifierSpec};
use crate::dataset::{LabeledDataset, Standardizer};
use crate::discriminant::{fit_h, fit_p_fixed_medians, fit_p_graph_embedding, fit_p_lda, LinearMap};
use crate::error::{CdmError, Result};
use crate::mapping::{apply_map, fit_q};
use crate::median::{cluster_summaries, pairwise_disjoint, ClusterSummary, LatentEmbedding};
use crate::numerics::{euclidean, squared_euclidean};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PApproach {
    FixedMedians,
    #[default]
    Lda,
    GraphEmbedding,
}

/// Latent dimension. `Auto` means `c − 1`, capped by the LTM feature count
/// for the projection approaches that cannot exceed it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LatentDim {
    Fixed(usize),
    #[default]
    #[serde(with = "crate::classify::auto_tag")]
    Auto,
}

impl LatentDim {
    pub fn resolve(self, classes: usize) -> usize {
        match self {
            LatentDim::Fixed(d) => d,
            LatentDim::Auto => classes.saturating_sub(1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CdmConfig {
    pub p_approach: PApproach,
    pub latent_dim: LatentDim,
    pub eta: f64,
    pub use_augmentation: bool,
    pub classifier: ClassifierSpec,
    /// Rescale the latent and raw blocks of augmented features to equal spread.
    pub block_rescale: bool,
    /// Per-domain z-scoring of features before `P` and `Q` are fit.
    pub standardize: bool,
    /// Append a constant-1 feature to SM instances before `Q`, giving `Q` an
    /// offset.
    pub q_intercept: bool,
    /// Sum squared instead of plain Euclidean distances in `ψ_S`, `ψ_D`.
    pub psi_squared: bool,
}

impl Default for CdmConfig {
    fn default() -> Self {
        Self {
            p_approach: PApproach::Lda,
            latent_dim: LatentDim::Auto,
            eta: 1.0,
            use_augmentation: false,
            classifier: ClassifierSpec::default(),
            block_rescale: false,
            standardize: true,
            q_intercept: false,
            psi_squared: false,
        }
    }
}

impl CdmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(CdmError::InvalidArgument(format!(
                "eta must be a nonnegative number, got {}",
                self.eta
            )));
        }
        if self.latent_dim == LatentDim::Fixed(0) {
            return Err(CdmError::InvalidArgument("latent_dim must be at least 1".into()));
        }
        self.classifier.validate()
    }
}

/// A fitted model: the three maps, the LTM cluster summaries in the latent
/// space, and the per-domain standardization used during fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdmModel {
    pub p: LinearMap,
    pub q: LinearMap,
    pub h: LinearMap,
    pub medians: Vec<ClusterSummary>,
    pub config: CdmConfig,
    pub classes: Vec<String>,
    pub ltm_scaling: Standardizer,
    pub sm_scaling: Standardizer,
}

const MODEL_FORMAT: &str = "cdm-model";
const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDocument {
    format: String,
    version: u32,
    ltm_dim: usize,
    sm_dim: usize,
    latent_dim: usize,
    model: CdmModel,
}

impl CdmModel {
    pub fn ltm_dim(&self) -> usize {
        self.p.source_dim()
    }

    pub fn sm_dim(&self) -> usize {
        self.sm_scaling.dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.p.target_dim()
    }

    /// Dimension of the features the final classifier sees.
    pub fn feature_dim(&self) -> usize {
        let d = self.h.target_dim();
        if self.config.use_augmentation {
            d + self.sm_dim()
        } else {
            d
        }
    }

    fn check(&self) -> Result<()> {
        if self.p.target_dim() != self.q.target_dim() || self.h.source_dim() != self.p.target_dim() {
            return Err(CdmError::Serialization(
                "model maps do not share a latent dimension".into(),
            ));
        }
        if self.medians.len() != self.classes.len()
            || self.medians.iter().any(|m| m.median.len() != self.latent_dim())
        {
            return Err(CdmError::Serialization(
                "model medians do not cover the class list".into(),
            ));
        }
        if self.ltm_scaling.dim() != self.ltm_dim()
            || self.q.source_dim() != self.sm_dim() + usize::from(self.config.q_intercept)
        {
            return Err(CdmError::Serialization(
                "model scaling does not match map dimensions".into(),
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = ModelDocument {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            ltm_dim: self.ltm_dim(),
            sm_dim: self.sm_dim(),
            latent_dim: self.latent_dim(),
            model: self.clone(),
        };
        serde_json::to_string_pretty(&doc).map_err(|e| CdmError::Serialization(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDocument =
            serde_json::from_str(text).map_err(|e| CdmError::Serialization(e.to_string()))?;
        if doc.format != MODEL_FORMAT || doc.version != MODEL_VERSION {
            return Err(CdmError::Serialization(format!(
                "unsupported model document {} v{}",
                doc.format, doc.version
            )));
        }
        doc.model.check()?;
        if doc.ltm_dim != doc.model.ltm_dim()
            || doc.sm_dim != doc.model.sm_dim()
            || doc.latent_dim != doc.model.latent_dim()
        {
            return Err(CdmError::Serialization(
                "declared dimensions disagree with the stored maps".into(),
            ));
        }
        Ok(doc.model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|source| CdmError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| CdmError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }
}

/// Re-indexes `data` onto `classes`, failing unless both carry the same class
/// set.
pub fn align_classes(data: &LabeledDataset, classes: &[String]) -> Result<LabeledDataset> {
    if data.classes() == classes {
        return Ok(data.clone());
    }
    let mut a = data.classes().to_vec();
    let mut b = classes.to_vec();
    a.sort();
    b.sort();
    if a != b {
        return Err(CdmError::ClassMismatch(format!(
            "{} classes {:?} differ from {:?}",
            data.domain_tag(),
            data.classes(),
            classes
        )));
    }
    let remap: Vec<usize> = data
        .classes()
        .iter()
        .map(|c| classes.iter().position(|k| k == c).expect("same set"))
        .collect();
    let labels = data.labels().iter().map(|&l| remap[l]).collect();
    LabeledDataset::new(data.features().clone(), labels, classes.to_vec(), data.domain_tag())
}

fn require_every_class(data: &LabeledDataset) -> Result<()> {
    for (c, &n) in data.class_counts().iter().enumerate() {
        if n == 0 {
            return Err(CdmError::ClassMismatch(format!(
                "class `{}` has no {} instances",
                data.classes()[c],
                data.domain_tag()
            )));
        }
    }
    Ok(())
}

fn scaling(config: &CdmConfig, data: &LabeledDataset) -> Standardizer {
    if config.standardize {
        Standardizer::fit(data.features())
    } else {
        Standardizer::identity(data.dim())
    }
}

/// Fits `P`, the LTM cluster medians, `Q` and `H`.
pub fn cdm_fit(ltm: &LabeledDataset, sm_train: &LabeledDataset, config: &CdmConfig) -> Result<CdmModel> {
    config.validate()?;
    let classes = ltm.classes().to_vec();
    let c = classes.len();
    if c < 2 {
        return Err(CdmError::InvalidArgument("CDM needs at least two classes".into()));
    }
    let sm_train = align_classes(sm_train, &classes)?;
    require_every_class(ltm)?;
    require_every_class(&sm_train)?;
    let d = match (config.latent_dim, config.p_approach) {
        (LatentDim::Auto, PApproach::Lda | PApproach::GraphEmbedding) => (c - 1).min(ltm.dim()),
        (dim, _) => dim.resolve(c),
    };

    let ltm_scaling = scaling(config, ltm);
    let sm_scaling = scaling(config, &sm_train);
    let ltm_z = ltm_scaling.transform_dataset(ltm)?;
    let sm_z = sm_scaling.transform_dataset(&sm_train)?;

    let p = match config.p_approach {
        PApproach::Lda => fit_p_lda(&ltm_z, d),
        PApproach::GraphEmbedding => fit_p_graph_embedding(&ltm_z, d),
        PApproach::FixedMedians => fit_p_fixed_medians(&ltm_z, d, config.eta).map(|(p, _)| p),
    }
    .map_err(CdmError::at("fit P"))?;

    let ltm_emb = apply_map(&p, &ltm_z).map_err(CdmError::at("project LTM"))?;
    let medians = cluster_summaries(&ltm_emb).map_err(CdmError::at("cluster medians"))?;
    let sm_q = sm_z.with_features(q_input(config, sm_z.features()))?;
    let q = fit_q(&sm_q, &medians, config.eta).map_err(CdmError::at("fit Q"))?;
    let sm_emb = apply_map(&q, &sm_q).map_err(CdmError::at("project SM"))?;
    let union = ltm_emb.concat(&sm_emb).map_err(CdmError::at("union embedding"))?;
    let h = fit_h(&union, d.min(c - 1)).map_err(CdmError::at("fit H"))?;

    Ok(CdmModel {
        p,
        q,
        h,
        medians,
        config: *config,
        classes,
        ltm_scaling,
        sm_scaling,
    })
}

/// Standardized SM rows as `Q` consumes them.
fn q_input(config: &CdmConfig, z: &Array2<f64>) -> Array2<f64> {
    if config.q_intercept {
        concatenate(Axis(1), &[z.view(), Array2::ones((z.nrows(), 1)).view()]).expect("matching rows")
    } else {
        z.clone()
    }
}

/// `H·Q·y` for standardized rows `z`, followed by `z` itself with augmentation.
fn sm_rows(model: &CdmModel, hq: &LinearMap, z: &Array2<f64>) -> Result<Array2<f64>> {
    let latent = hq.apply_rows(q_input(&model.config, z).view())?;
    if model.config.use_augmentation {
        Ok(concatenate(Axis(1), &[latent.view(), z.view()]).expect("matching rows"))
    } else {
        Ok(latent)
    }
}

fn standardized(model: &CdmModel, ltm: &LabeledDataset, sm: &LabeledDataset) -> Result<(LabeledDataset, LabeledDataset)> {
    let ltm = align_classes(ltm, &model.classes)?;
    let sm = align_classes(sm, &model.classes)?;
    Ok((
        model.ltm_scaling.transform_dataset(&ltm)?,
        model.sm_scaling.transform_dataset(&sm)?,
    ))
}

/// Projects LTM rows with `P` and SM rows with `Q` into the latent space.
pub fn latent_embeddings(
    model: &CdmModel,
    ltm: &LabeledDataset,
    sm: &LabeledDataset,
) -> Result<(LatentEmbedding, LatentEmbedding)> {
    let (ltm, sm) = standardized(model, ltm, sm)?;
    let sm = sm.with_features(q_input(&model.config, sm.features()))?;
    Ok((apply_map(&model.p, &ltm)?, apply_map(&model.q, &sm)?))
}

/// Training set and query matrix in the space the final classifier works in:
/// `[H·P·x, 0]` and `[H·Q·y, y]` with augmentation, `H·P·x` and `H·Q·y`
/// without.
pub fn classifier_inputs(
    model: &CdmModel,
    ltm_train: &LabeledDataset,
    sm_train: &LabeledDataset,
    sm_query: ArrayView2<f64>,
) -> Result<(LabeledDataset, Array2<f64>)> {
    let (ltm, sm) = standardized(model, ltm_train, sm_train)?;
    let query = model.sm_scaling.transform(&sm_query.to_owned())?;
    let hp = model.h.compose(&model.p)?;
    let hq = model.h.compose(&model.q)?;
    let ltm_rows = if model.config.use_augmentation {
        augment_ltm_rows(&hp, ltm.features().view(), model.sm_dim())?
    } else {
        hp.apply_rows(ltm.features().view())?
    };
    let sm_block = sm_rows(model, &hq, sm.features())?;
    let mut query_rows = sm_rows(model, &hq, &query)?;
    let mut rows = concatenate(Axis(0), &[ltm_rows.view(), sm_block.view()]).expect("equal widths");
    if model.config.use_augmentation && model.config.block_rescale {
        let scales = BlockScales::fit(rows.view(), model.h.target_dim());
        scales.apply(&mut rows);
        scales.apply(&mut query_rows);
    }
    let mut labels = ltm.labels().to_vec();
    labels.extend_from_slice(sm.labels());
    let train = LabeledDataset::new(rows, labels, model.classes.clone(), "cdm")?;
    Ok((train, query_rows))
}

/// Labels SM queries with the configured classifier trained on the
/// transformed LTM and SM training instances.
pub fn cdm_predict(
    model: &CdmModel,
    ltm_train: &LabeledDataset,
    sm_train: &LabeledDataset,
    sm_query: ArrayView2<f64>,
) -> Result<Vec<usize>> {
    let (train, query) = classifier_inputs(model, ltm_train, sm_train, sm_query)?;
    fit_predict(&model.config.classifier, &train, query.view()).map_err(CdmError::at("classifier"))
}

/// The same classifier trained on the SM training instances alone.
pub fn baseline_predict(spec: &ClassifierSpec, sm_train: &LabeledDataset, sm_query: ArrayView2<f64>) -> Result<Vec<usize>> {
    fit_predict(spec, sm_train, sm_query)
}

/// Sums of pairwise distances between same-class (`ψ_S`) and different-class
/// (`ψ_D`) points: every LTM–SM pair, plus unordered pairs within each domain.
pub fn compute_psi(ltm_emb: &LatentEmbedding, sm_emb: &LatentEmbedding) -> Result<(f64, f64)> {
    compute_psi_with(ltm_emb, sm_emb, false)
}

/// [`compute_psi`], optionally summing squared distances.
pub fn compute_psi_with(ltm_emb: &LatentEmbedding, sm_emb: &LatentEmbedding, squared: bool) -> Result<(f64, f64)> {
    if ltm_emb.dim() != sm_emb.dim() {
        return Err(CdmError::DimensionMismatch {
            context: "psi embeddings",
            expected: ltm_emb.dim(),
            found: sm_emb.dim(),
        });
    }
    let mut same = 0.0;
    let mut diff = 0.0;
    let mut add = |a: &LatentEmbedding, i: usize, b: &LatentEmbedding, j: usize| {
        let (x, y) = (a.points.row(i), b.points.row(j));
        let dist = if squared {
            squared_euclidean(x.iter().copied(), y.iter().copied())
        } else {
            euclidean(x.iter().copied(), y.iter().copied())
        };
        if a.labels[i] == b.labels[j] {
            same += dist;
        } else {
            diff += dist;
        }
    };
    for i in 0..ltm_emb.len() {
        for j in 0..sm_emb.len() {
            add(ltm_emb, i, sm_emb, j);
        }
    }
    for emb in [ltm_emb, sm_emb] {
        for i in 0..emb.len() {
            for j in (i + 1)..emb.len() {
                add(emb, i, emb, j);
            }
        }
    }
    Ok((same, diff))
}

/// Reported-only comparison of `ψ_S` and `ψ_D` against user-chosen bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsiBounds {
    pub upper: f64,
    pub lower: f64,
    pub psi_s_within_upper: bool,
    pub psi_d_above_lower: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub psi_s: f64,
    pub psi_d: f64,
    pub disjoint: bool,
    #[serde(with = "crate::serde_matrix")]
    pub margins: Array2<f64>,
    pub radii: Vec<f64>,
    pub err_sm_only: f64,
    pub err_combined: f64,
    pub bounds: Option<PsiBounds>,
}

impl Diagnostics {
    /// Whether the combined-domain classifier erred no more than the SM-only
    /// one on the holdout.
    pub fn combined_no_worse(&self) -> bool {
        self.err_combined <= self.err_sm_only
    }

    pub fn with_bounds(mut self, upper: f64, lower: f64) -> Self {
        self.bounds = Some(PsiBounds {
            upper,
            lower,
            psi_s_within_upper: self.psi_s <= upper,
            psi_d_above_lower: self.psi_d >= lower,
        });
        self
    }
}

/// Geometry of the fitted latent space (ψ values over the projected LTM and
/// SM training sets, LTM cluster margins and radii) and the holdout errors of
/// `classifier` trained on projected LTM plus SM training instances versus SM
/// training instances alone. The error comparison uses the final latent space
/// `H·P`, `H·Q`.
pub fn hypothesis_check(
    model: &CdmModel,
    ltm: &LabeledDataset,
    sm_train: &LabeledDataset,
    sm_holdout: &LabeledDataset,
    classifier: &ClassifierSpec,
) -> Result<Diagnostics> {
    if sm_holdout.is_empty() {
        return Err(CdmError::InvalidArgument("hypothesis check needs a nonempty holdout".into()));
    }
    let holdout = align_classes(sm_holdout, &model.classes)?;
    let (ltm_emb, sm_emb) = latent_embeddings(model, ltm, sm_train)?;
    let (psi_s, psi_d) = compute_psi_with(&ltm_emb, &sm_emb, model.config.psi_squared)?;
    let (disjoint, margins) = pairwise_disjoint(&model.medians)?;
    let radii = model.medians.iter().map(|m| m.radius).collect();

    let hold_z = model.sm_scaling.transform(holdout.features())?;
    let u = model.h.apply_rows(ltm_emb.points.view())?;
    let v = model.h.apply_rows(sm_emb.points.view())?;
    let query = model.h.compose(&model.q)?.apply_rows(q_input(&model.config, &hold_z).view())?;
    let classes = model.classes.clone();

    let sm_only = LabeledDataset::new(v.clone(), sm_emb.labels.clone(), classes.clone(), "V")?;
    let err_sm_only = 1.0 - accuracy(&fit_predict(classifier, &sm_only, query.view())?, holdout.labels())?;
    let err_combined = if u.nrows() == 0 {
        err_sm_only
    } else {
        let rows = concatenate(Axis(0), &[u.view(), v.view()]).expect("equal widths");
        let mut labels = ltm_emb.labels.clone();
        labels.extend_from_slice(&sm_emb.labels);
        let union = LabeledDataset::new(rows, labels, classes, "U∪V")?;
        1.0 - accuracy(&fit_predict(classifier, &union, query.view())?, holdout.labels())?
    };
    Ok(Diagnostics {
        psi_s,
        psi_d,
        disjoint,
        margins,
        radii,
        err_sm_only,
        err_combined,
        bounds: None,
    })
}

/// Fraction of embedded points whose nearest cluster median is their own.
pub fn nearest_median_accuracy(emb: &LatentEmbedding, medians: &[ClusterSummary]) -> f64 {
    if emb.is_empty() {
        return 0.0;
    }
    let hits = (0..emb.len())
        .filter(|&i| {
            let p = emb.points.row(i);
            let best = medians
                .iter()
                .map(|m| (euclidean(p.iter().copied(), m.median.iter().copied()), m.class_id))
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
                .map(|(_, c)| c);
            best == Some(emb.labels[i])
        })
        .count();
    hits as f64 / emb.len() as f64
}
