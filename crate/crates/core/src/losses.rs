//! Training objectives: in-batch InfoNCE, the saliency-guided alignment loss,
//! and their weighted sum.
//!
//! Each loss has a plain evaluation entry point and a `*_with_grad` variant
//! returning the analytic gradient used by the training loop.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::AttentionRecord;
use crate::numerics::{clamp_renormalize, dot, kl_divergence_raw, l2_norm, Distribution, KL_EPS};
use crate::saliency::SaliencyTarget;

/// Which transformer layers the alignment loss supervises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignmentLayers {
    /// First layer.
    Early,
    /// Layer `ceil(L / 2)`.
    Middle,
    /// Last layer.
    Late,
    /// Every layer.
    All,
}

impl AlignmentLayers {
    /// Zero-based layer indices for a model with `num_layers` layers.
    pub fn select(self, num_layers: usize) -> Vec<usize> {
        match self {
            AlignmentLayers::Early => vec![0],
            AlignmentLayers::Middle => vec![num_layers.div_ceil(2) - 1],
            AlignmentLayers::Late => vec![num_layers - 1],
            AlignmentLayers::All => (0..num_layers).collect(),
        }
    }
}

impl FromStr for AlignmentLayers {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "early" => Ok(Self::Early),
            "middle" => Ok(Self::Middle),
            "late" => Ok(Self::Late),
            "all" => Ok(Self::All),
            other => Err(Error::invalid(format!("unknown alignment layer set '{other}'"))),
        }
    }
}

impl fmt::Display for AlignmentLayers {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Early => "early",
            Self::Middle => "middle",
            Self::Late => "late",
            Self::All => "all",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the alignment loss in the total objective.
    pub alpha: f64,
    /// Mix between `KL(Q || A)` (weight beta) and `KL(A || Q)`.
    pub beta: f64,
    /// InfoNCE temperature.
    pub tau_con: f64,
    pub layers: AlignmentLayers,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 10.0, beta: 0.5, tau_con: 0.02, layers: AlignmentLayers::Late }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(Error::invalid(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::invalid(format!("beta must lie in [0, 1], got {}", self.beta)));
        }
        if !(self.tau_con > 0.0) {
            return Err(Error::invalid(format!("tau_con must be > 0, got {}", self.tau_con)));
        }
        Ok(())
    }
}

/// Query and candidate embeddings of one batch; row `i` of each forms a positive pair.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchEmbeddings {
    pub queries: Vec<Vec<f64>>,
    pub candidates: Vec<Vec<f64>>,
}

impl BatchEmbeddings {
    fn validate(&self) -> Result<usize> {
        let b = self.queries.len();
        if b == 0 || self.candidates.len() != b {
            return Err(Error::shape(format!(
                "batch needs equal non-zero query/candidate counts, got {} and {}",
                b,
                self.candidates.len()
            )));
        }
        let d = self.queries[0].len();
        for v in self.queries.iter().chain(&self.candidates) {
            if v.len() != d {
                return Err(Error::shape("embedding widths differ within the batch"));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("embedding".into()));
            }
            if l2_norm(v) == 0.0 {
                return Err(Error::invalid("zero-norm embedding"));
            }
        }
        Ok(b)
    }
}

/// InfoNCE gradient with respect to the raw (unnormalized) embeddings.
#[derive(Debug, Clone)]
pub struct InfoNceGrad {
    pub loss: f64,
    pub d_queries: Vec<Vec<f64>>,
    pub d_candidates: Vec<Vec<f64>>,
}

pub fn infonce(batch: &BatchEmbeddings, tau_con: f64) -> Result<f64> {
    infonce_with_grad(batch, tau_con).map(|g| g.loss)
}

pub fn infonce_with_grad(batch: &BatchEmbeddings, tau_con: f64) -> Result<InfoNceGrad> {
    if !(tau_con > 0.0) {
        return Err(Error::invalid(format!("tau_con must be > 0, got {tau_con}")));
    }
    let b = batch.validate()?;
    let unit = |v: &Vec<f64>| {
        let n = l2_norm(v);
        (v.iter().map(|x| x / n).collect::<Vec<_>>(), n)
    };
    let (qn, q_norms): (Vec<_>, Vec<_>) = batch.queries.iter().map(unit).unzip();
    let (cn, c_norms): (Vec<_>, Vec<_>) = batch.candidates.iter().map(unit).unzip();

    let mut cos = Array2::zeros((b, b));
    for i in 0..b {
        for j in 0..b {
            cos[[i, j]] = dot(&qn[i], &cn[j]);
        }
    }
    // d loss / d cos
    let mut g = Array2::zeros((b, b));
    let mut loss = 0.0;
    for i in 0..b {
        let row: Vec<f64> = cos.row(i).iter().map(|c| c / tau_con).collect();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|s| (s - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[i];
        for j in 0..b {
            let p = (row[j] - lse).exp();
            g[[i, j]] = (p - if i == j { 1.0 } else { 0.0 }) / (b as f64 * tau_con);
        }
    }
    loss /= b as f64;

    // d cos(a, c) / d a = (c_hat - cos * a_hat) / |a|
    let d = qn[0].len();
    let mut d_queries = vec![vec![0.0; d]; b];
    let mut d_candidates = vec![vec![0.0; d]; b];
    for i in 0..b {
        for j in 0..b {
            let gij = g[[i, j]];
            if gij == 0.0 {
                continue;
            }
            let c = cos[[i, j]];
            for k in 0..d {
                d_queries[i][k] += gij * (cn[j][k] - c * qn[i][k]) / q_norms[i];
                d_candidates[j][k] += gij * (qn[i][k] - c * cn[j][k]) / c_norms[j];
            }
        }
    }
    Ok(InfoNceGrad { loss, d_queries, d_candidates })
}

/// `KL(p || q)` with clamping, and its gradient with respect to both raw arguments.
pub(crate) fn kl_with_grad(p: &[f64], q: &[f64], eps: f64) -> (f64, Vec<f64>, Vec<f64>) {
    let pc = clamp_renormalize(p, eps);
    let qc = clamp_renormalize(q, eps);
    let kl: f64 = pc.iter().zip(&qc).map(|(a, b)| a * (a / b).ln()).sum();
    let gp: Vec<f64> = pc.iter().zip(&qc).map(|(a, b)| (a / b).ln() + 1.0).collect();
    let gq: Vec<f64> = pc.iter().zip(&qc).map(|(a, b)| -a / b).collect();
    (kl, renorm_clamp_backward(p, &pc, &gp, eps), renorm_clamp_backward(q, &qc, &gq, eps))
}

/// Backpropagates through `x -> max(x, eps) / sum(max(x, eps))`.
fn renorm_clamp_backward(raw: &[f64], normalized: &[f64], g: &[f64], eps: f64) -> Vec<f64> {
    let total: f64 = raw.iter().map(|x| x.max(eps)).sum();
    let inner = dot(g, normalized);
    raw.iter()
        .zip(g)
        .map(|(x, gi)| if *x > eps { (gi - inner) / total } else { 0.0 })
        .collect()
}

/// Gradient of the alignment loss with respect to the recorded Eol attention rows.
#[derive(Debug, Clone)]
pub struct SgaGrad {
    pub loss: f64,
    /// `(layer, heads x seq_len)` pairs for the supervised layers.
    pub d_rows: Vec<(usize, Array2<f64>)>,
}

/// Symmetric-KL alignment between the model's visual attention and the saliency target,
/// averaged over the configured layer set.
pub fn sga_loss(record: &AttentionRecord, target: &SaliencyTarget, config: &LossConfig) -> Result<f64> {
    let target = target
        .target()
        .ok_or_else(|| Error::invalid("alignment loss needs a valid saliency target"))?;
    let layers = config.layers.select(record.num_layers());
    let mut total = 0.0;
    for &l in &layers {
        let q = record.query_distribution(l)?;
        check_target_len(&q, target)?;
        let fwd = kl_divergence_raw(q.as_slice(), target.as_slice(), KL_EPS)?;
        let rev = kl_divergence_raw(target.as_slice(), q.as_slice(), KL_EPS)?;
        total += config.beta * fwd + (1.0 - config.beta) * rev;
    }
    Ok(total / layers.len() as f64)
}

fn check_target_len(q: &Distribution, target: &Distribution) -> Result<()> {
    if q.len() != target.len() {
        return Err(Error::shape(format!(
            "attention covers {} visual tokens but target has {}",
            q.len(),
            target.len()
        )));
    }
    Ok(())
}

pub fn sga_loss_with_grad(record: &AttentionRecord, target: &Distribution, config: &LossConfig) -> Result<SgaGrad> {
    let layers = config.layers.select(record.num_layers());
    let scale = 1.0 / layers.len() as f64;
    let mut loss = 0.0;
    let mut d_rows = Vec::with_capacity(layers.len());
    for &l in &layers {
        let q = record.query_distribution(l)?;
        check_target_len(&q, target)?;
        let (fwd, d_fwd, _) = kl_with_grad(q.as_slice(), target.as_slice(), KL_EPS);
        let (rev, _, d_rev) = kl_with_grad(target.as_slice(), q.as_slice(), KL_EPS);
        loss += scale * (config.beta * fwd + (1.0 - config.beta) * rev);
        let d_q: Vec<f64> = d_fwd
            .iter()
            .zip(&d_rev)
            .map(|(a, b)| scale * (config.beta * a + (1.0 - config.beta) * b))
            .collect();
        d_rows.push((l, record.query_distribution_backward(l, &d_q)?));
    }
    Ok(SgaGrad { loss, d_rows })
}

/// Batch alignment term: mean over valid-target samples, or `None` when there are none.
pub fn mean_sga(per_sample: &[f64]) -> Option<f64> {
    if per_sample.is_empty() {
        None
    } else {
        Some(per_sample.iter().sum::<f64>() / per_sample.len() as f64)
    }
}

/// `L_con + alpha * L_sg`, with an absent alignment term counting as zero.
pub fn total_loss(con: f64, sga: Option<f64>, alpha: f64) -> f64 {
    con + alpha * sga.unwrap_or(0.0)
}
