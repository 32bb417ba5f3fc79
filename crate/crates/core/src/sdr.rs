//! Feature regeneration: re-weights the final visual features by the model's own
//! saliency map and fuses the result into the output embedding.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numerics::{softmax_unchecked, Grid2D};

/// How the regenerated feature joins the Eol feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Eol feature only.
    Base,
    /// Eol feature plus regenerated feature.
    Add,
    /// Learned projection of the concatenated pair.
    ConcatProject,
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "base" => Ok(Self::Base),
            "add" => Ok(Self::Add),
            "concat_project" | "concat" => Ok(Self::ConcatProject),
            other => Err(Error::invalid(format!("unknown fusion mode '{other}'"))),
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Base => "base",
            Self::Add => "add",
            Self::ConcatProject => "concat_project",
        })
    }
}

/// Number of visual tokens kept before the softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopK {
    All,
    #[serde(untagged)]
    K(usize),
}

impl TopK {
    fn resolve(self, n: usize) -> Result<usize> {
        match self {
            TopK::All => Ok(n),
            TopK::K(0) => Err(Error::invalid("top_k must be >= 1")),
            TopK::K(k) if k > n => Err(Error::invalid(format!("top_k {k} exceeds {n} visual tokens"))),
            TopK::K(k) => Ok(k),
        }
    }
}

impl FromStr for TopK {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(TopK::All);
        }
        s.parse::<usize>()
            .map(TopK::K)
            .map_err(|_| Error::invalid(format!("top_k must be a positive integer or 'all', got '{s}'")))
    }
}

impl fmt::Display for TopK {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TopK::All => f.write_str("all"),
            TopK::K(k) => write!(f, "{k}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SdrConfig {
    /// Softmax temperature over the saliency scores.
    pub tau: f64,
    pub fusion: FusionMode,
    pub top_k: TopK,
    /// Also regenerate candidate-side embeddings.
    pub apply_to_candidates: bool,
}

impl Default for SdrConfig {
    fn default() -> Self {
        Self { tau: 0.01, fusion: FusionMode::Add, top_k: TopK::All, apply_to_candidates: true }
    }
}

impl SdrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::invalid(format!("sdr tau must be > 0, got {}", self.tau)));
        }
        if self.top_k == TopK::K(0) {
            return Err(Error::invalid("top_k must be >= 1"));
        }
        Ok(())
    }
}

/// Row-major flattening of a patch-grid saliency map.
pub fn flatten_saliency(q_map: &Grid2D) -> Vec<f64> {
    q_map.values().to_vec()
}

/// Indices of the `k` largest scores, ties going to the lower index, in ascending index order.
fn top_indices(scores: &[f64], k: usize) -> Vec<usize> {
    if k == scores.len() {
        return (0..k).collect();
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut picked = order[..k].to_vec();
    picked.sort_unstable();
    picked
}

/// Result of [`regenerate_with_cache`]: the feature plus what its backward pass needs.
#[derive(Debug, Clone)]
pub struct Regenerated {
    pub feature: Array1<f64>,
    selected: Vec<usize>,
    weights: Vec<f64>,
}

impl Regenerated {
    /// Softmax weight of each kept visual token, keyed by token index.
    pub fn weights(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.selected.iter().copied().zip(self.weights.iter().copied())
    }
}

/// Softmax-weighted sum of the top-k visual features under the saliency scores `q_hat`.
pub fn regenerate(q_hat: &[f64], f_visual: &Array2<f64>, config: &SdrConfig) -> Result<Array1<f64>> {
    regenerate_with_cache(q_hat, f_visual, config).map(|r| r.feature)
}

pub fn regenerate_with_cache(q_hat: &[f64], f_visual: &Array2<f64>, config: &SdrConfig) -> Result<Regenerated> {
    config.validate()?;
    let n = f_visual.nrows();
    if q_hat.len() != n {
        return Err(Error::shape(format!("{} saliency scores for {} visual features", q_hat.len(), n)));
    }
    if n == 0 {
        return Err(Error::invalid("regeneration needs at least one visual feature"));
    }
    if q_hat.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("saliency scores".into()));
    }
    let k = config.top_k.resolve(n)?;
    let selected = top_indices(q_hat, k);
    let picked: Vec<f64> = selected.iter().map(|&i| q_hat[i]).collect();
    let weights = softmax_unchecked(&picked, config.tau);
    let mut feature = Array1::zeros(f_visual.ncols());
    for (&i, &w) in selected.iter().zip(&weights) {
        feature.scaled_add(w, &f_visual.row(i));
    }
    Ok(Regenerated { feature, selected, weights })
}

/// Gradients of [`regenerate`] w.r.t. the scores and the visual features.
pub fn regenerate_backward(
    cache: &Regenerated,
    f_visual: &Array2<f64>,
    d_feature: &Array1<f64>,
    tau: f64,
) -> (Vec<f64>, Array2<f64>) {
    let mut d_scores = vec![0.0; f_visual.nrows()];
    let mut d_visual = Array2::zeros(f_visual.dim());
    let dw: Vec<f64> = cache.selected.iter().map(|&i| f_visual.row(i).dot(d_feature)).collect();
    let inner: f64 = dw.iter().zip(&cache.weights).map(|(a, w)| a * w).sum();
    for ((&i, &w), &g) in cache.selected.iter().zip(&cache.weights).zip(&dw) {
        d_visual.row_mut(i).scaled_add(w, d_feature);
        d_scores[i] = w * (g - inner) / tau;
    }
    (d_scores, d_visual)
}

/// Combines the Eol feature with the regenerated feature.
///
/// `params` supplies the projection for [`FusionMode::ConcatProject`].
pub fn fuse(f_last: &Array1<f64>, f_hat: &Array1<f64>, mode: FusionMode, params: &ModelParams) -> Result<Array1<f64>> {
    if f_last.len() != f_hat.len() {
        return Err(Error::shape(format!("fuse width mismatch: {} vs {}", f_last.len(), f_hat.len())));
    }
    Ok(match mode {
        FusionMode::Base => f_last.clone(),
        FusionMode::Add => f_last + f_hat,
        FusionMode::ConcatProject => {
            let d = f_last.len();
            if params.fuse_w.dim() != (2 * d, d) {
                return Err(Error::shape("fusion projection does not match the feature width"));
            }
            f_last.dot(&params.fuse_w.slice(s![..d, ..])) + f_hat.dot(&params.fuse_w.slice(s![d.., ..])) + &params.fuse_b
        }
    })
}

/// Backward of [`fuse`]: returns `(d_last, d_hat)` and accumulates projection gradients into `grads`.
pub fn fuse_backward(
    f_last: &Array1<f64>,
    f_hat: &Array1<f64>,
    d_out: &Array1<f64>,
    mode: FusionMode,
    params: &ModelParams,
    grads: &mut ModelParams,
) -> (Array1<f64>, Array1<f64>) {
    match mode {
        FusionMode::Base => (d_out.clone(), Array1::zeros(f_hat.len())),
        FusionMode::Add => (d_out.clone(), d_out.clone()),
        FusionMode::ConcatProject => {
            let d = f_last.len();
            let top = params.fuse_w.slice(s![..d, ..]);
            let bottom = params.fuse_w.slice(s![d.., ..]);
            for i in 0..d {
                grads.fuse_w.row_mut(i).scaled_add(f_last[i], d_out);
                grads.fuse_w.row_mut(d + i).scaled_add(f_hat[i], d_out);
            }
            grads.fuse_b += d_out;
            (top.dot(d_out), bottom.dot(d_out))
        }
    }
}
