//! Retrieval evaluation, modality balance of the Eol attention, attention
//! heatmaps, and spatial statistics of saliency targets.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::datagen::{candidate_sequence, read_candidates, CandidateRecord, Corpus, Flavor, LoadedImage};
use crate::error::{Error, Result};
use crate::model::{AttentionRecord, EncoderInput, ModelConfig, ModelParams, Token, TokenSequence};
use crate::numerics::{dot, kl_divergence, l2_norm, Distribution, Grid2D, KL_EPS};
use crate::saliency::{footprint_patches, SaliencyTarget};
use crate::sdr::SdrConfig;
use crate::train::{embed_batch, Mode, Side};

/// Unit-normalized candidate embeddings, sorted by id.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    ids: Vec<String>,
    vectors: Vec<Vec<f64>>,
}

pub fn build_index(candidates: Vec<(String, Vec<f64>)>) -> Result<RetrievalIndex> {
    if candidates.is_empty() {
        return Err(Error::invalid("index needs at least one candidate"));
    }
    let dim = candidates[0].1.len();
    let mut sorted = candidates;
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut ids = Vec::with_capacity(sorted.len());
    let mut vectors = Vec::with_capacity(sorted.len());
    for (id, v) in sorted {
        if ids.last() == Some(&id) {
            return Err(Error::invalid(format!("duplicate candidate id '{id}'")));
        }
        if v.len() != dim {
            return Err(Error::shape(format!("candidate '{id}' has width {}, expected {dim}", v.len())));
        }
        let n = l2_norm(&v);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::invalid(format!("candidate '{id}' has a zero or non-finite norm")));
        }
        ids.push(id);
        vectors.push(v.iter().map(|x| x / n).collect());
    }
    Ok(RetrievalIndex { ids, vectors })
}

impl RetrievalIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn dim(&self) -> usize {
        self.vectors[0].len()
    }

    /// Sub-index over `ids`, every one of which must be present.
    pub fn restrict(&self, ids: &[String]) -> Result<RetrievalIndex> {
        let mut picked = Vec::with_capacity(ids.len());
        for id in ids {
            let pos = self
                .ids
                .binary_search(id)
                .map_err(|_| Error::invalid(format!("candidate '{id}' is not in the index")))?;
            picked.push((id.clone(), self.vectors[pos].clone()));
        }
        build_index(picked)
    }
}

/// Top-`k` ids by descending cosine similarity; ties go to the smaller id.
pub fn rank(query: &[f64], index: &RetrievalIndex, k: usize) -> Result<Vec<String>> {
    if query.len() != index.dim() {
        return Err(Error::shape(format!("query width {} vs index width {}", query.len(), index.dim())));
    }
    let n = l2_norm(query);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::invalid("zero-norm query"));
    }
    let mut scored: Vec<(f64, usize)> = index.vectors.iter().enumerate().map(|(i, v)| (dot(query, v) / n, i)).collect();
    // ids are sorted, so the index position breaks ties by id
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(k).map(|(_, i)| index.ids[i].clone()).collect())
}

pub fn precision_at_1(rankings: &[Vec<String>], truth: &[String]) -> Result<f64> {
    if rankings.len() != truth.len() {
        return Err(Error::invalid(format!("{} rankings but {} ground-truth ids", rankings.len(), truth.len())));
    }
    if rankings.is_empty() {
        return Err(Error::invalid("no queries to score"));
    }
    let hits = rankings.iter().zip(truth).filter(|(r, t)| r.first() == Some(t)).count();
    Ok(hits as f64 / rankings.len() as f64)
}

/// Mean Eol attention on image vs. text tokens in the final layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub mu_img: f64,
    pub mu_text: f64,
    pub distance: f64,
}

pub fn balance_report(record: &AttentionRecord, seq: &TokenSequence) -> Result<BalanceReport> {
    let layers = record.num_layers();
    if layers == 0 {
        return Err(Error::invalid("empty attention record"));
    }
    let row = record.head_mean(layers - 1)?;
    if row.len() != seq.len() {
        return Err(Error::shape(format!("attention row covers {} positions, sequence has {}", row.len(), seq.len())));
    }
    let (mut img, mut n_img, mut text, mut n_text) = (0.0, 0usize, 0.0, 0usize);
    for (tok, w) in seq.tokens().iter().zip(&row) {
        match tok {
            Token::Visual(_) => {
                img += w;
                n_img += 1;
            }
            Token::Text(_) | Token::Instruction(_) => {
                text += w;
                n_text += 1;
            }
            Token::Eol => {}
        }
    }
    if n_img == 0 || n_text == 0 {
        return Err(Error::invalid("balance needs both image and text tokens"));
    }
    let (mu_img, mu_text) = (img / n_img as f64, text / n_text as f64);
    Ok(BalanceReport { mu_img, mu_text, distance: (mu_img - mu_text).abs() })
}

/// Averages per-sample reports field by field.
pub fn mean_balance(reports: &[BalanceReport]) -> Result<BalanceReport> {
    if reports.is_empty() {
        return Err(Error::invalid("no balance reports to average"));
    }
    let n = reports.len() as f64;
    Ok(BalanceReport {
        mu_img: reports.iter().map(|r| r.mu_img).sum::<f64>() / n,
        mu_text: reports.iter().map(|r| r.mu_text).sum::<f64>() / n,
        distance: reports.iter().map(|r| r.distance).sum::<f64>() / n,
    })
}

/// Relative reduction of the modality distance, `(D_base - D_ours) / D_base`.
pub fn balance_improvement(baseline: &BalanceReport, ours: &BalanceReport) -> Result<f64> {
    if baseline.distance == 0.0 {
        return Err(Error::invalid("baseline distance is zero"));
    }
    Ok((baseline.distance - ours.distance) / baseline.distance)
}

/// Nearest-neighbour upscaling of a patch map, scaled so its maximum maps to 1.
pub fn export_heatmap(q_map: &Grid2D, factor: usize) -> Result<Grid2D> {
    if factor == 0 {
        return Err(Error::invalid("upscale factor must be >= 1"));
    }
    let (h, w) = q_map.dims();
    let max = q_map.max();
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    let mut out = Grid2D::zeros(h * factor, w * factor);
    for r in 0..h * factor {
        for c in 0..w * factor {
            out.set(r, c, q_map.get(r / factor, c / factor) * scale);
        }
    }
    Ok(out)
}

/// Places two equally tall maps next to each other.
pub fn side_by_side(left: &Grid2D, right: &Grid2D) -> Result<Grid2D> {
    if left.height() != right.height() {
        return Err(Error::shape("side-by-side maps need equal heights"));
    }
    let (h, w) = (left.height(), left.width() + right.width());
    let mut out = Grid2D::zeros(h, w);
    for r in 0..h {
        for c in 0..left.width() {
            out.set(r, c, left.get(r, c));
        }
        for c in 0..right.width() {
            out.set(r, left.width() + c, right.get(r, c));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyStats {
    pub mean: Grid2D,
    /// 1 where the mean is at or above its 90th percentile.
    pub hotspots: Grid2D,
    pub threshold: f64,
    pub count: usize,
}

/// Percentile with linear interpolation between the two nearest order statistics
/// (position `p * (n - 1)` in the sorted values).
pub fn percentile_inclusive(values: &[f64], p: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn saliency_stats<'a>(targets: impl IntoIterator<Item = &'a SaliencyTarget>) -> Result<SaliencyStats> {
    let mut sum: Option<Grid2D> = None;
    let mut count = 0;
    for t in targets.into_iter().filter(|t| t.is_valid()) {
        let g = t.as_grid();
        match &mut sum {
            None => sum = Some(g),
            Some(s) => {
                if s.dims() != g.dims() {
                    return Err(Error::shape("saliency targets have different grids"));
                }
                s.values_mut().iter_mut().zip(g.values()).for_each(|(a, b)| *a += b);
            }
        }
        count += 1;
    }
    let mut mean = sum.ok_or_else(|| Error::invalid("no valid saliency targets"))?;
    mean.values_mut().iter_mut().for_each(|v| *v /= count as f64);
    let threshold = percentile_inclusive(mean.values(), 0.9);
    let mut hotspots = Grid2D::zeros(mean.height(), mean.width());
    for (h, v) in hotspots.values_mut().iter_mut().zip(mean.values()) {
        *h = if *v >= threshold { 1.0 } else { 0.0 };
    }
    Ok(SaliencyStats { mean, hotspots, threshold, count })
}

/// Attention mass on the patches covered by the ground-truth footprint.
pub fn mask_mass(q_map: &Distribution, footprint: &[bool]) -> Result<f64> {
    if q_map.len() != footprint.len() {
        return Err(Error::shape(format!("{} attention cells vs {} footprint cells", q_map.len(), footprint.len())));
    }
    if !footprint.iter().any(|&f| f) {
        return Err(Error::invalid("empty footprint"));
    }
    Ok(q_map.as_slice().iter().zip(footprint).filter(|(_, &f)| f).map(|(q, _)| q).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub mode: Mode,
    pub sdr: SdrConfig,
    pub seed: u64,
    /// Sequences per encoder call.
    pub chunk: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { mode: Mode::Full, sdr: SdrConfig::default(), seed: 0, chunk: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub mode: Mode,
    pub sdr: SdrConfig,
    pub model: ModelConfig,
    pub queries: usize,
    pub candidates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub p_at_1: f64,
    pub p_at_1_by_flavor: BTreeMap<String, f64>,
    /// Mean `KL(Q || A)` of the final layer over image queries with a valid target.
    pub mean_kl_to_target: Option<f64>,
    /// Mean final-layer attention mass on the referenced object's patches.
    pub mean_mask_mass: Option<f64>,
    pub balance: Option<BalanceReport>,
    pub config: ConfigEcho,
    pub seed: u64,
}

/// Loads every retrievable image listed in `candidates.jsonl`.
pub fn load_candidates(root: &Path, model: &ModelConfig) -> Result<Vec<(CandidateRecord, LoadedImage)>> {
    read_candidates(root)?
        .into_iter()
        .map(|c| {
            let img = LoadedImage::load(root, &c.image, model.patch_size).map_err(|e| e.for_sample(&c.id))?;
            Ok((c, img))
        })
        .collect()
}

/// Embeds every candidate; returns `(id, embedding)` pairs in input order.
pub fn embed_candidates(
    params: &ModelParams,
    candidates: &[(CandidateRecord, LoadedImage)],
    config: &EvalConfig,
) -> Result<Vec<(String, Vec<f64>)>> {
    let seq = candidate_sequence(params.config.num_patches())?;
    let sdr = config.mode.uses_sdr().then_some(&config.sdr);
    let mut out = Vec::with_capacity(candidates.len());
    for chunk in candidates.chunks(config.chunk.max(1)) {
        let inputs: Vec<EncoderInput> = chunk.iter().map(|(_, img)| EncoderInput::new(&seq, Some(&img.patches))).collect();
        let sides = vec![Side::Candidate; inputs.len()];
        let (embs, _) = embed_batch(params, &inputs, &sides, sdr)?;
        out.extend(chunk.iter().zip(embs).map(|((c, _), e)| (c.id.clone(), e.to_vec())));
    }
    Ok(out)
}

/// Per-query outputs of [`embed_queries`].
#[derive(Debug, Clone)]
pub struct QueryOutput {
    pub embedding: Vec<f64>,
    pub attention: AttentionRecord,
    pub seq: TokenSequence,
}

pub fn embed_queries(params: &ModelParams, corpus: &Corpus, config: &EvalConfig) -> Result<Vec<QueryOutput>> {
    let n = params.config.num_patches();
    let sdr = config.mode.uses_sdr().then_some(&config.sdr);
    let seqs = corpus.samples.iter().map(|s| s.query_sequence(n)).collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(seqs.len());
    let pairs: Vec<_> = corpus.samples.iter().zip(&seqs).collect();
    for chunk in pairs.chunks(config.chunk.max(1)) {
        let inputs: Vec<EncoderInput> = chunk
            .iter()
            .map(|(s, seq)| EncoderInput::new(seq, s.query_image.as_ref().map(|q| &q.patches)))
            .collect();
        let sides = vec![Side::Query; inputs.len()];
        let (embs, outs) = embed_batch(params, &inputs, &sides, sdr)?;
        for ((e, o), (_, seq)) in embs.into_iter().zip(outs).zip(chunk) {
            out.push(QueryOutput { embedding: e.to_vec(), attention: o.attention, seq: (*seq).clone() });
        }
    }
    Ok(out)
}

/// Final-layer visual attention of a query laid out on the patch grid.
pub fn attention_map(record: &AttentionRecord, model: &ModelConfig) -> Result<Grid2D> {
    let q = record.query_distribution(record.num_layers() - 1)?;
    let (gh, gw) = model.grid();
    Grid2D::new(gh, gw, q.into_vec())
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Scores a model on an evaluation split: P@1 within each query's candidate pool,
/// plus attention diagnostics on the queries that carry an image.
pub fn evaluate(
    params: &ModelParams,
    corpus: &Corpus,
    candidates: &[(CandidateRecord, LoadedImage)],
    config: &EvalConfig,
) -> Result<EvalReport> {
    if corpus.is_empty() {
        return Err(Error::invalid("evaluation split is empty"));
    }
    let model = params.config;
    let index = build_index(embed_candidates(params, candidates, config)?)?;
    let queries = embed_queries(params, corpus, config)?;

    let mut rankings = Vec::with_capacity(queries.len());
    let mut truth = Vec::with_capacity(queries.len());
    let mut by_flavor: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut kls = Vec::new();
    let mut masses = Vec::new();
    let mut balances = Vec::new();
    for (sample, q) in corpus.samples.iter().zip(&queries) {
        let pool = index.restrict(&sample.candidate_pool_ids).map_err(|e| e.for_sample(&sample.id))?;
        let top = rank(&q.embedding, &pool, 1).map_err(|e| e.for_sample(&sample.id))?;
        let hit = top.first() == Some(&sample.positive_id);
        let entry = by_flavor.entry(sample.flavor.to_string()).or_default();
        entry.0 += hit as usize;
        entry.1 += 1;
        rankings.push(top);
        truth.push(sample.positive_id.clone());

        if let (Flavor::It2i, Some(img)) = (sample.flavor, &sample.query_image) {
            let last = q.attention.num_layers() - 1;
            let qd = q.attention.query_distribution(last)?;
            if let Some(t) = sample.target.as_ref().and_then(SaliencyTarget::target) {
                kls.push(kl_divergence(&qd, t, KL_EPS)?);
            }
            if let Some(fp) = img.footprint(&sample.label()) {
                masses.push(mask_mass(&qd, &footprint_patches(fp, model.patch_size)?)?);
            }
            balances.push(balance_report(&q.attention, &q.seq)?);
        }
    }
    Ok(EvalReport {
        p_at_1: precision_at_1(&rankings, &truth)?,
        p_at_1_by_flavor: by_flavor.into_iter().map(|(k, (h, n))| (k, h as f64 / n as f64)).collect(),
        mean_kl_to_target: mean(&kls),
        mean_mask_mass: mean(&masses),
        balance: if balances.is_empty() { None } else { Some(mean_balance(&balances)?) },
        config: ConfigEcho {
            mode: config.mode,
            sdr: config.sdr,
            model,
            queries: corpus.len(),
            candidates: index.len(),
        },
        seed: config.seed,
    })
}

/// Stacks embeddings into a `rows x width` array.
pub fn stack(embeddings: &[Vec<f64>]) -> Result<Array2<f64>> {
    let w = embeddings.first().map_or(0, Vec::len);
    let flat: Vec<f64> = embeddings.iter().flatten().copied().collect();
    Array2::from_shape_vec((embeddings.len(), w), flat).map_err(|e| Error::shape(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{cosine_similarity, Rng};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn ids(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn index_and_rank_examples() {
        let idx = build_index(vec![("only".into(), vec![1.0, 2.0])]).unwrap();
        assert_eq!(rank(&[-1.0, 0.5], &idx, 3).unwrap(), ids(&["only"]));

        let items = vec![("b".to_string(), vec![1.0, 0.0]), ("a".to_string(), vec![0.0, 1.0]), ("c".to_string(), vec![1.0, 1.0])];
        let idx = build_index(items.clone()).unwrap();
        let mut rev = items.clone();
        rev.reverse();
        assert_eq!(build_index(rev).unwrap(), idx);
        assert_eq!(rank(&[0.0, 3.0], &idx, 1).unwrap(), ids(&["a"]));
        assert_eq!(rank(&[1.0, 0.0], &idx, 10).unwrap().len(), 3);
        // equal scores fall back to id order
        let tie = build_index(vec![("y".into(), vec![1.0, 0.0]), ("x".into(), vec![2.0, 0.0])]).unwrap();
        assert_eq!(rank(&[1.0, 0.0], &tie, 2).unwrap(), ids(&["x", "y"]));

        assert!(rank(&[0.0, 0.0], &idx, 1).is_err());
        assert!(rank(&[1.0], &idx, 1).is_err());
        assert!(build_index(vec![("a".into(), vec![1.0]), ("a".into(), vec![2.0])]).is_err());
        assert!(build_index(vec![]).is_err());
    }

    #[test]
    fn precision_examples() {
        let r = |v: &[&str]| v.iter().map(|s| vec![s.to_string()]).collect::<Vec<_>>();
        assert_eq!(precision_at_1(&r(&["a", "b"]), &ids(&["a", "b"])).unwrap(), 1.0);
        assert_eq!(precision_at_1(&r(&["a", "b"]), &ids(&["b", "a"])).unwrap(), 0.0);
        assert_eq!(precision_at_1(&r(&["a", "b", "c", "d"]), &ids(&["a", "b", "c", "x"])).unwrap(), 0.75);
        assert!(precision_at_1(&r(&["a"]), &ids(&[])).is_err());
    }

    fn record(row: Vec<f64>, n_visual: usize) -> AttentionRecord {
        AttentionRecord { rows: vec![vec![row]], n_visual }
    }

    #[test]
    fn balance_examples() {
        let seq = TokenSequence::build(4, &[1, 2, 3], &[9]).unwrap();
        let uniform = record(vec![1.0 / 9.0; 9], 4);
        assert_abs_diff_eq!(balance_report(&uniform, &seq).unwrap().distance, 0.0, epsilon = 1e-15);
        let visual = record(vec![0.25, 0.25, 0.25, 0.25, 0.0, 0.0, 0.0, 0.0, 0.0], 4);
        let b = balance_report(&visual, &seq).unwrap();
        assert_eq!((b.mu_img, b.mu_text, b.distance), (0.25, 0.0, 0.25));
        assert_eq!(balance_improvement(&b, &b).unwrap(), 0.0);
        let text_only = TokenSequence::build(0, &[1], &[9]).unwrap();
        assert!(balance_report(&record(vec![0.5, 0.3, 0.2], 0), &text_only).is_err());
    }

    #[test]
    fn heatmap_examples() {
        let one_hot = Grid2D::new(2, 2, vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let h = export_heatmap(&one_hot, 3).unwrap();
        assert_eq!(h.dims(), (6, 6));
        assert_eq!(h.sum(), 9.0);
        assert_eq!(h.get(0, 3), 1.0);
        let uniform = Grid2D::filled(2, 2, 0.25);
        assert!(export_heatmap(&uniform, 2).unwrap().values().iter().all(|&v| v == 1.0));
        let q = Grid2D::new(1, 2, vec![0.2, 0.8]).unwrap();
        let h = export_heatmap(&q, 4).unwrap();
        let left: f64 = (0..4).flat_map(|r| (0..4).map(move |c| (r, c))).map(|(r, c)| h.get(r, c)).sum();
        let right: f64 = (0..4).flat_map(|r| (4..8).map(move |c| (r, c))).map(|(r, c)| h.get(r, c)).sum();
        assert_abs_diff_eq!(left / right, 0.25, epsilon = 1e-12);
        assert!(export_heatmap(&q, 0).is_err());
    }

    #[test]
    fn stats_examples() {
        let t = SaliencyTarget::from_distribution(
            Distribution::from_weights((1..=20).map(|v| v as f64).collect()).unwrap(),
            (4, 5),
        );
        let s = saliency_stats([&t]).unwrap();
        assert_eq!(s.mean, t.as_grid());
        assert_eq!(s.hotspots.sum(), 2.0);
        assert_eq!(s.hotspots.values()[18..], [1.0, 1.0]);

        let left = SaliencyTarget::from_distribution(Distribution::new(vec![0.7, 0.3, 0.0, 0.0]).unwrap(), (2, 2));
        let right = SaliencyTarget::from_distribution(Distribution::new(vec![0.3, 0.7, 0.0, 0.0]).unwrap(), (2, 2));
        let s = saliency_stats([&left, &right]).unwrap();
        assert_eq!(s.mean.get(0, 0), s.mean.get(0, 1));
        assert_eq!(s.count, 2);
        let invalid = SaliencyTarget::invalid(Grid2D::zeros(4, 4), (2, 2));
        assert!(saliency_stats([&invalid]).is_err());
    }

    #[test]
    fn mask_mass_examples() {
        let inside = Distribution::new(vec![0.5, 0.5, 0.0, 0.0]).unwrap();
        assert_eq!(mask_mass(&inside, &[true, true, false, false]).unwrap(), 1.0);
        let u = Distribution::uniform(8).unwrap();
        assert_eq!(mask_mass(&u, &[true, false, true, false, false, true, false, false]).unwrap(), 3.0 / 8.0);
        assert!(mask_mass(&u, &[false; 8]).is_err());
    }

    proptest! {
        #[test]
        fn rank_matches_exhaustive_sort(seed in 0u64..1000) {
            let mut rng = Rng::new(seed);
            let items: Vec<(String, Vec<f64>)> =
                (0..5).map(|i| (format!("c{i}"), (0..3).map(|_| rng.normal()).collect())).collect();
            let q: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
            let idx = build_index(items.clone()).unwrap();
            let mut brute: Vec<(f64, String)> =
                items.iter().map(|(id, v)| (cosine_similarity(&q, v).unwrap(), id.clone())).collect();
            brute.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let expect: Vec<String> = brute.into_iter().map(|(_, id)| id).collect();
            prop_assert_eq!(rank(&q, &idx, 5).unwrap(), expect);
        }

        #[test]
        fn precision_is_scale_invariant(seed in 0u64..300, c in 0.01f64..100.0) {
            let mut rng = Rng::new(seed);
            let items: Vec<(String, Vec<f64>)> =
                (0..4).map(|i| (format!("c{i}"), (0..3).map(|_| rng.normal()).collect())).collect();
            let qs: Vec<Vec<f64>> = (0..4).map(|_| (0..3).map(|_| rng.normal()).collect()).collect();
            let truth: Vec<String> = (0..4).map(|i| format!("c{i}")).collect();
            let p = |scale: f64| {
                let idx = build_index(items.iter().map(|(i, v)| (i.clone(), v.iter().map(|x| x * scale).collect())).collect()).unwrap();
                let r: Vec<Vec<String>> = qs.iter().map(|q| rank(&q.iter().map(|x| x * scale).collect::<Vec<_>>(), &idx, 1).unwrap()).collect();
                precision_at_1(&r, &truth).unwrap()
            };
            prop_assert_eq!(p(1.0), p(c));
        }

        #[test]
        fn percentile_matches_sorting(values in prop::collection::vec(0.0f64..1.0, 1..80)) {
            let t = percentile_inclusive(&values, 0.9);
            let mut sorted = values.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let pos = 0.9 * (values.len() - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            let expect = sorted[lo] * (1.0 - (pos - lo as f64)) + sorted[hi] * (pos - lo as f64);
            prop_assert!((t - expect).abs() < 1e-12);
            prop_assert!(t >= sorted[lo] && t <= sorted[hi]);
        }
    }
}
