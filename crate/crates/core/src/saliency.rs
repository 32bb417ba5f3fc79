//! Offline construction of per-sample saliency targets.
//!
//! A target is built in five stages: pick the subjects shared by a query and its
//! positive, segment each subject in the query image, blur the masks, keep only
//! masks whose subject/region agreement clears a threshold, and max-merge the
//! survivors. The merged pixel mask is then pooled onto the patch grid.
//!
//! The three external models (subject extractor, segmenter, scorer) sit behind
//! traits. [`Oracle`] answers from ground-truth annotations; [`WireClient`]
//! forwards calls over the JSON record contract to some other implementation.

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ImageTensor;
use crate::numerics::{convolve2d, gaussian_kernel, Distribution, Grid2D};

/// Instruction text handed to a subject extractor.
///
/// The input layout after the instruction is
/// `QUERY:<Image_q><Text_q>; POSITIVE SAMPLES: <Image_t><Text_t>...`.
pub const DEFAULT_PROMPT: &str = "You will see a query and its matching positive samples. \
List the concrete objects that the query and the positive samples have in common. \
Keep a noun only when it is mentioned or shown in the query and also appears in a positive sample. \
Keep only things a viewer could point to in the picture. \
Drop abstract ideas, attributes on their own, actions and anything not grounded in the image. \
Answer with one object label per line and nothing else.\n\
QUERY:<Image_q><Text_q>; POSITIVE SAMPLES: <Image_t><Text_t>...";

/// Deduplicated, non-empty subject labels in extraction order.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct SubjectList(Vec<String>);

impl SubjectList {
    pub fn new<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut out: Vec<String> = Vec::new();
        for label in labels {
            let label = label.into();
            if label.trim().is_empty() {
                return Err(Error::invalid("empty subject label"));
            }
            if !out.contains(&label) {
                out.push(label);
            }
        }
        Ok(Self(out))
    }

    pub fn labels(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<String>> for SubjectList {
    type Error = Error;

    fn try_from(v: Vec<String>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<SubjectList> for Vec<String> {
    fn from(s: SubjectList) -> Self {
        s.0
    }
}

/// Pixel mask with entries exactly 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask(Grid2D);

impl BinaryMask {
    pub fn new(grid: Grid2D) -> Result<Self> {
        if grid.values().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid("binary mask entries must be 0 or 1"));
        }
        Ok(Self(grid))
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self(Grid2D::zeros(height, width))
    }

    pub fn from_fn(height: usize, width: usize, mut inside: impl FnMut(usize, usize) -> bool) -> Self {
        let mut g = Grid2D::zeros(height, width);
        for r in 0..height {
            for c in 0..width {
                if inside(r, c) {
                    g.set(r, c, 1.0);
                }
            }
        }
        Self(g)
    }

    pub fn grid(&self) -> &Grid2D {
        &self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    pub fn count(&self) -> usize {
        self.0.values().iter().filter(|&&v| v == 1.0).count()
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        self.0.get(row, col) == 1.0
    }

    /// Intersection over union; two empty masks score 0.
    pub fn iou(&self, other: &BinaryMask) -> Result<f64> {
        if self.dims() != other.dims() {
            return Err(Error::shape(format!("mask dims {:?} vs {:?}", self.dims(), other.dims())));
        }
        let (mut inter, mut union) = (0usize, 0usize);
        for (a, b) in self.0.values().iter().zip(other.0.values()) {
            let (a, b) = (*a == 1.0, *b == 1.0);
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
    }
}

/// Smoothed subject mask and its grounding confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredMask {
    pub mask: Grid2D,
    pub confidence: f64,
}

impl ScoredMask {
    pub fn new(mask: Grid2D, confidence: f64) -> Result<Self> {
        if mask.values().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("scored mask values must lie in [0, 1]"));
        }
        if !(-1.0..=1.0).contains(&confidence) {
            return Err(Error::invalid(format!("confidence must lie in [-1, 1], got {confidence}")));
        }
        Ok(Self { mask, confidence })
    }
}

/// Patch-level attention target for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyTarget {
    target: Option<Distribution>,
    merged: Grid2D,
    grid: (usize, usize),
}

impl SaliencyTarget {
    /// A valid target without a pixel mask; the merged mask is the target laid out on the grid.
    pub fn from_distribution(target: Distribution, grid: (usize, usize)) -> Self {
        let merged = Grid2D::new(grid.0, grid.1, target.as_slice().to_vec())
            .unwrap_or_else(|_| Grid2D::zeros(grid.0, grid.1));
        Self { target: Some(target), merged, grid }
    }

    pub fn invalid(merged: Grid2D, grid: (usize, usize)) -> Self {
        Self { target: None, merged, grid }
    }

    /// The patch distribution, or `None` when the sample has no usable target.
    pub fn target(&self) -> Option<&Distribution> {
        self.target.as_ref()
    }

    pub fn is_valid(&self) -> bool {
        self.target.is_some()
    }

    /// Merged pixel-level mask.
    pub fn merged(&self) -> &Grid2D {
        &self.merged
    }

    /// Patch grid `(rows, cols)`.
    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    /// The target as a patch grid; zeros when invalid.
    pub fn as_grid(&self) -> Grid2D {
        match &self.target {
            Some(d) => Grid2D::new(self.grid.0, self.grid.1, d.as_slice().to_vec())
                .expect("target length matches its grid"),
            None => Grid2D::zeros(self.grid.0, self.grid.1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Gaussian blur width in pixels.
    pub sigma: f64,
    /// Minimum confidence for a mask to survive filtering.
    pub delta: f64,
    pub filtering: bool,
    pub patch_size: usize,
    pub prompt: String,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self { sigma: 2.0, delta: 0.2, filtering: true, patch_size: 4, prompt: DEFAULT_PROMPT.to_string() }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::invalid(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if !(-1.0..=1.0).contains(&self.delta) {
            return Err(Error::invalid(format!("delta must lie in [-1, 1], got {}", self.delta)));
        }
        if self.patch_size == 0 {
            return Err(Error::invalid("patch size must be >= 1"));
        }
        Ok(())
    }
}

/// Text plus optional image of one side of a retrieval pair.
#[derive(Debug, Clone, Copy)]
pub struct PairView<'a> {
    pub text: &'a str,
    pub image: Option<&'a ImageTensor>,
}

pub trait SubjectExtractor {
    fn extract(&self, prompt: &str, query: &PairView, positive: &PairView) -> Result<SubjectList>;
}

pub trait Segmenter {
    fn segment(&self, image: &ImageTensor, subject: &str) -> Result<BinaryMask>;
}

pub trait Scorer {
    /// Agreement between `subject` and the masked image region, in `[-1, 1]`.
    fn score(&self, subject: &str, masked: &ImageTensor, mask: &BinaryMask) -> Result<f64>;
}

/// The three external models used by [`build_target`].
#[derive(Clone, Copy)]
pub struct Interfaces<'a> {
    pub extractor: &'a dyn SubjectExtractor,
    pub segmenter: &'a dyn Segmenter,
    pub scorer: &'a dyn Scorer,
}

impl<'a> Interfaces<'a> {
    pub fn uniform<T: SubjectExtractor + Segmenter + Scorer>(all: &'a T) -> Self {
        Self { extractor: all, segmenter: all, scorer: all }
    }
}

/// Ground-truth objects of one image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SceneAnnotation {
    pub objects: Vec<(String, BinaryMask)>,
}

impl SceneAnnotation {
    pub fn footprint(&self, label: &str) -> Option<&BinaryMask> {
        self.objects.iter().find(|(l, _)| l == label).map(|(_, m)| m)
    }

    pub fn contains(&self, label: &str) -> bool {
        self.footprint(label).is_some()
    }
}

/// Synthetic stand-in for all three models, answering from annotations.
///
/// Extraction keeps the known labels named in the query text that also appear in
/// the positive sample (in its image or its text), and, when the query carries an
/// image, in the query image. With a query image, a shape or color word names
/// every query object of that shape or color. Segmentation returns the true footprint in the query
/// image. Scoring returns the IoU between the mask and that footprint.
#[derive(Debug, Clone)]
pub struct Oracle {
    vocabulary: Vec<String>,
    query: SceneAnnotation,
    positive: SceneAnnotation,
}

impl Oracle {
    pub fn new(vocabulary: Vec<String>, query: SceneAnnotation, positive: SceneAnnotation) -> Self {
        Self { vocabulary, query, positive }
    }

    fn known(&self, label: &str) -> bool {
        self.vocabulary.iter().any(|v| v == label)
    }

    fn query_footprint(&self, subject: &str, dims: (usize, usize)) -> Result<BinaryMask> {
        if !self.known(subject) {
            return Err(Error::invalid(format!("unknown subject '{subject}'")));
        }
        match self.query.footprint(subject) {
            Some(m) if m.dims() != dims => {
                Err(Error::shape(format!("annotation dims {:?} vs image {:?}", m.dims(), dims)))
            }
            Some(m) => Ok(m.clone()),
            None => Ok(BinaryMask::zeros(dims.0, dims.1)),
        }
    }
}

impl SubjectExtractor for Oracle {
    fn extract(&self, _prompt: &str, query: &PairView, positive: &PairView) -> Result<SubjectList> {
        let positive_words: Vec<&str> = positive.text.split_whitespace().collect();
        let mut picked: Vec<&str> = Vec::new();
        for w in query.text.split_whitespace() {
            // a bare shape or color word refers to the query object carrying it
            let resolved: Vec<&str> = match query.image {
                Some(_) => self
                    .query
                    .objects
                    .iter()
                    .map(|(l, _)| l.as_str())
                    .filter(|l| *l == w || l.split('_').any(|part| part == w))
                    .collect(),
                None => vec![w],
            };
            for l in resolved {
                if self.known(l) && (self.positive.contains(l) || positive_words.contains(&l)) && !picked.contains(&l) {
                    picked.push(l);
                }
            }
        }
        SubjectList::new(picked)
    }
}

impl Segmenter for Oracle {
    fn segment(&self, image: &ImageTensor, subject: &str) -> Result<BinaryMask> {
        self.query_footprint(subject, (image.height(), image.width()))
    }
}

impl Scorer for Oracle {
    fn score(&self, subject: &str, _masked: &ImageTensor, mask: &BinaryMask) -> Result<f64> {
        self.query_footprint(subject, mask.dims())?.iou(mask)
    }
}

pub fn extract_subjects(
    extractor: &dyn SubjectExtractor,
    prompt: &str,
    query: &PairView,
    positive: &PairView,
) -> Result<SubjectList> {
    extractor.extract(prompt, query, positive)
}

pub fn segment_subject(segmenter: &dyn Segmenter, image: &ImageTensor, subject: &str) -> Result<BinaryMask> {
    let mask = segmenter.segment(image, subject)?;
    if mask.dims() != (image.height(), image.width()) {
        return Err(Error::shape(format!(
            "segmenter returned {:?} for a {}x{} image",
            mask.dims(),
            image.height(),
            image.width()
        )));
    }
    Ok(mask)
}

/// Gaussian blur of a binary mask; stays within `[0, 1]`.
pub fn smooth_mask(mask: &BinaryMask, sigma: f64) -> Result<Grid2D> {
    let mut out = convolve2d(mask.grid(), &gaussian_kernel(sigma)?)?;
    out.values_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(out)
}

/// Pixelwise product of an image with a mask, broadcast over channels.
pub fn apply_mask(image: &ImageTensor, mask: &BinaryMask) -> Result<ImageTensor> {
    if mask.dims() != (image.height(), image.width()) {
        return Err(Error::shape(format!(
            "mask {:?} vs image {}x{}",
            mask.dims(),
            image.height(),
            image.width()
        )));
    }
    let c = image.channels();
    let pixels = image
        .pixels()
        .iter()
        .enumerate()
        .map(|(i, p)| p * mask.grid().values()[i / c])
        .collect();
    ImageTensor::new(image.height(), image.width(), c, pixels)
}

pub fn score_subject(scorer: &dyn Scorer, image: &ImageTensor, mask: &BinaryMask, subject: &str) -> Result<f64> {
    let masked = apply_mask(image, mask)?;
    let alpha = scorer.score(subject, &masked, mask)?;
    if !(-1.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("scorer returned {alpha} outside [-1, 1]")));
    }
    Ok(alpha)
}

/// Pointwise maximum of the masks that pass the confidence filter.
///
/// Returns `valid = false` (and an empty grid if there is no input) when nothing survives.
pub fn merge_masks(scored: &[ScoredMask], delta: f64, filtering: bool) -> Result<(Grid2D, bool)> {
    let Some(first) = scored.first() else {
        return Ok((Grid2D::zeros(0, 0), false));
    };
    let dims = first.mask.dims();
    if let Some(bad) = scored.iter().find(|s| s.mask.dims() != dims) {
        return Err(Error::shape(format!("mask dims {:?} vs {:?}", bad.mask.dims(), dims)));
    }
    let mut merged = Grid2D::zeros(dims.0, dims.1);
    let mut any = false;
    for s in scored.iter().filter(|s| !filtering || s.confidence >= delta) {
        any = true;
        for (m, v) in merged.values_mut().iter_mut().zip(s.mask.values()) {
            *m = m.max(*v);
        }
    }
    Ok((merged, any))
}

/// Average-pools a pixel mask onto the patch grid and normalizes it.
pub fn to_patch_target(merged: &Grid2D, patch: usize) -> Result<SaliencyTarget> {
    let (h, w) = merged.dims();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::shape(format!("{h}x{w} mask is not divisible into {patch}px patches")));
    }
    let grid = (h / patch, w / patch);
    let area = (patch * patch) as f64;
    let mut pooled = vec![0.0; grid.0 * grid.1];
    for r in 0..h {
        for c in 0..w {
            pooled[(r / patch) * grid.1 + c / patch] += merged.get(r, c);
        }
    }
    pooled.iter_mut().for_each(|v| *v /= area);
    if pooled.iter().sum::<f64>() <= 0.0 {
        return Ok(SaliencyTarget::invalid(merged.clone(), grid));
    }
    Ok(SaliencyTarget { target: Some(Distribution::from_weights(pooled)?), merged: merged.clone(), grid })
}

/// One sample's inputs to [`build_target`].
#[derive(Debug, Clone, Copy)]
pub struct TargetRequest<'a> {
    pub sample_id: &'a str,
    pub query: PairView<'a>,
    pub positive: PairView<'a>,
}

/// Runs the whole pipeline for one sample. Degenerate stages yield an invalid target.
pub fn build_target(request: &TargetRequest, config: &PipelineConfig, interfaces: &Interfaces) -> Result<SaliencyTarget> {
    let run = || -> Result<SaliencyTarget> {
        config.validate()?;
        let image = request
            .query
            .image
            .ok_or_else(|| Error::invalid("saliency targets need a query image"))?;
        let (h, w) = (image.height(), image.width());
        if h % config.patch_size != 0 || w % config.patch_size != 0 {
            return Err(Error::shape(format!("{h}x{w} image is not divisible into {}px patches", config.patch_size)));
        }
        let grid = (h / config.patch_size, w / config.patch_size);
        let subjects = extract_subjects(interfaces.extractor, &config.prompt, &request.query, &request.positive)?;
        let mut scored = Vec::with_capacity(subjects.len());
        for subject in subjects.labels() {
            let mask = segment_subject(interfaces.segmenter, image, subject)?;
            let smoothed = smooth_mask(&mask, config.sigma)?;
            let alpha = score_subject(interfaces.scorer, image, &mask, subject)?;
            scored.push(ScoredMask::new(smoothed, alpha)?);
        }
        let (merged, valid) = merge_masks(&scored, config.delta, config.filtering)?;
        if !valid {
            let merged = if merged.dims() == (h, w) { merged } else { Grid2D::zeros(h, w) };
            return Ok(SaliencyTarget::invalid(merged, grid));
        }
        to_patch_target(&merged, config.patch_size)
    };
    run().map_err(|e| e.for_sample(request.sample_id))
}

/// Image as carried on the wire: 8-bit HWC bytes, base64-encoded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: String,
}

impl WireImage {
    pub fn encode(image: &ImageTensor) -> Self {
        let bytes: Vec<u8> = image.pixels().iter().map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        Self { height: image.height(), width: image.width(), channels: image.channels(), data: BASE64.encode(bytes) }
    }

    pub fn decode(&self) -> Result<ImageTensor> {
        let bytes = BASE64.decode(&self.data).map_err(|e| Error::invalid(format!("bad image payload: {e}")))?;
        ImageTensor::new(self.height, self.width, self.channels, bytes.iter().map(|&b| b as f64 / 255.0).collect())
    }
}

/// Binary mask on the wire: one byte per pixel (0 or 1), base64-encoded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireMask {
    pub height: usize,
    pub width: usize,
    pub data: String,
}

impl WireMask {
    pub fn encode(mask: &BinaryMask) -> Self {
        let (height, width) = mask.dims();
        let bytes: Vec<u8> = mask.grid().values().iter().map(|&v| v as u8).collect();
        Self { height, width, data: BASE64.encode(bytes) }
    }

    pub fn decode(&self) -> Result<BinaryMask> {
        let bytes = BASE64.decode(&self.data).map_err(|e| Error::invalid(format!("bad mask payload: {e}")))?;
        BinaryMask::new(Grid2D::new(self.height, self.width, bytes.iter().map(|&b| b as f64).collect())?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WirePair {
    pub text: String,
    pub image: Option<WireImage>,
}

impl WirePair {
    fn encode(view: &PairView) -> Self {
        Self { text: view.text.to_string(), image: view.image.map(WireImage::encode) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WirePayload {
    Extract { prompt: String, query: WirePair, positive: WirePair },
    Segment { image: WireImage, subject: String },
    Score { subject: String, masked: WireImage, mask: WireMask },
}

/// One interface call: `{"op": ..., "sample_id": ..., "payload": {...}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub op: WireOp,
    pub sample_id: String,
    pub payload: WirePayload,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WireOp {
    Extract,
    Segment,
    Score,
}

/// Reply to a [`WireRequest`]; exactly one of the result fields is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    pub op: WireOp,
    pub sample_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subjects: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<WireMask>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl WireResponse {
    fn empty(op: WireOp, sample_id: &str) -> Self {
        Self { op, sample_id: sample_id.to_string(), subjects: None, mask: None, score: None, error: None }
    }
}

/// Moves one serialized request to an implementation and returns its serialized reply.
pub trait WireTransport {
    fn exchange(&self, request: &str) -> Result<String>;
}

/// Answers wire requests with local implementations; the serving end of a transport.
pub struct WireServer<'a> {
    interfaces: Interfaces<'a>,
}

impl<'a> WireServer<'a> {
    pub fn new(interfaces: Interfaces<'a>) -> Self {
        Self { interfaces }
    }

    pub fn handle(&self, request: &str) -> String {
        let reply = match serde_json::from_str::<WireRequest>(request) {
            Ok(req) => {
                let mut resp = WireResponse::empty(req.op, &req.sample_id);
                if let Err(e) = self.answer(&req, &mut resp) {
                    resp.error = Some(e.to_string());
                }
                resp
            }
            Err(e) => {
                let mut resp = WireResponse::empty(WireOp::Extract, "");
                resp.error = Some(format!("malformed request: {e}"));
                resp
            }
        };
        serde_json::to_string(&reply).expect("responses serialize")
    }

    fn answer(&self, req: &WireRequest, resp: &mut WireResponse) -> Result<()> {
        match (&req.op, &req.payload) {
            (WireOp::Extract, WirePayload::Extract { prompt, query, positive }) => {
                let qi = query.image.as_ref().map(WireImage::decode).transpose()?;
                let pi = positive.image.as_ref().map(WireImage::decode).transpose()?;
                let q = PairView { text: &query.text, image: qi.as_ref() };
                let p = PairView { text: &positive.text, image: pi.as_ref() };
                resp.subjects = Some(self.interfaces.extractor.extract(prompt, &q, &p)?.into());
            }
            (WireOp::Segment, WirePayload::Segment { image, subject }) => {
                let mask = self.interfaces.segmenter.segment(&image.decode()?, subject)?;
                resp.mask = Some(WireMask::encode(&mask));
            }
            (WireOp::Score, WirePayload::Score { subject, masked, mask }) => {
                resp.score = Some(self.interfaces.scorer.score(subject, &masked.decode()?, &mask.decode()?)?);
            }
            _ => return Err(Error::invalid("payload does not match op")),
        }
        Ok(())
    }
}

/// Implements the interface traits by sending wire records through a transport.
pub struct WireClient<T> {
    transport: T,
    sample_id: String,
}

impl<T: WireTransport> WireClient<T> {
    pub fn new(transport: T, sample_id: impl Into<String>) -> Self {
        Self { transport, sample_id: sample_id.into() }
    }

    pub fn set_sample(&mut self, sample_id: impl Into<String>) {
        self.sample_id = sample_id.into();
    }

    fn call(&self, op: WireOp, payload: WirePayload) -> Result<WireResponse> {
        let req = WireRequest { op, sample_id: self.sample_id.clone(), payload };
        let raw = self.transport.exchange(&serde_json::to_string(&req)?)?;
        let resp: WireResponse = serde_json::from_str(&raw)?;
        if let Some(e) = resp.error {
            return Err(Error::invalid(format!("remote {op:?} failed: {e}")));
        }
        if resp.op != op || resp.sample_id != self.sample_id {
            return Err(Error::invalid("response does not match the request"));
        }
        Ok(resp)
    }
}

impl<T: WireTransport> SubjectExtractor for WireClient<T> {
    fn extract(&self, prompt: &str, query: &PairView, positive: &PairView) -> Result<SubjectList> {
        let payload = WirePayload::Extract {
            prompt: prompt.to_string(),
            query: WirePair::encode(query),
            positive: WirePair::encode(positive),
        };
        let resp = self.call(WireOp::Extract, payload)?;
        SubjectList::new(resp.subjects.ok_or_else(|| Error::invalid("extract response without subjects"))?)
    }
}

impl<T: WireTransport> Segmenter for WireClient<T> {
    fn segment(&self, image: &ImageTensor, subject: &str) -> Result<BinaryMask> {
        let payload = WirePayload::Segment { image: WireImage::encode(image), subject: subject.to_string() };
        let resp = self.call(WireOp::Segment, payload)?;
        resp.mask.ok_or_else(|| Error::invalid("segment response without mask"))?.decode()
    }
}

impl<T: WireTransport> Scorer for WireClient<T> {
    fn score(&self, subject: &str, masked: &ImageTensor, mask: &BinaryMask) -> Result<f64> {
        let payload = WirePayload::Score {
            subject: subject.to_string(),
            masked: WireImage::encode(masked),
            mask: WireMask::encode(mask),
        };
        let resp = self.call(WireOp::Score, payload)?;
        resp.score.ok_or_else(|| Error::invalid("score response without score"))
    }
}

/// Per-label ground-truth footprints pooled onto the patch grid (any-overlap rule).
pub fn footprint_patches(mask: &BinaryMask, patch: usize) -> Result<Vec<bool>> {
    let (h, w) = mask.dims();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::shape(format!("{h}x{w} mask is not divisible into {patch}px patches")));
    }
    let cols = w / patch;
    let mut out = vec![false; (h / patch) * cols];
    for r in 0..h {
        for c in 0..w {
            if mask.contains(r, c) {
                out[(r / patch) * cols + c / patch] = true;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn disc(h: usize, w: usize, cy: f64, cx: f64, r: f64) -> BinaryMask {
        BinaryMask::from_fn(h, w, |y, x| {
            let dy = y as f64 + 0.5 - cy;
            let dx = x as f64 + 0.5 - cx;
            dy * dy + dx * dx <= r * r
        })
    }

    fn vocab() -> Vec<String> {
        ["disc_red", "box_blue", "triangle_green"].iter().map(|s| s.to_string()).collect()
    }

    fn scene(items: &[(&str, BinaryMask)]) -> SceneAnnotation {
        SceneAnnotation { objects: items.iter().map(|(l, m)| (l.to_string(), m.clone())).collect() }
    }

    #[test]
    fn subject_list_dedups_and_rejects_empty() {
        let s = SubjectList::new(["a", "b", "a"]).unwrap();
        assert_eq!(s.labels(), ["a", "b"]);
        assert!(SubjectList::new(["a", " "]).is_err());
    }

    #[test]
    fn oracle_extraction() {
        let m = disc(8, 8, 4.0, 4.0, 2.0);
        let pos = scene(&[("disc_red", m.clone()), ("box_blue", m.clone())]);
        let oracle = Oracle::new(vocab(), SceneAnnotation::default(), pos);
        let p = PairView { text: "", image: None };
        let q = |t| PairView { text: t, image: None };
        assert_eq!(oracle.extract("", &q("find disc_red"), &p).unwrap().labels(), ["disc_red"]);
        assert!(oracle.extract("", &q("triangle_green"), &p).unwrap().is_empty());
        assert_eq!(
            oracle.extract("", &q("disc_red box_blue"), &p).unwrap().labels(),
            ["disc_red", "box_blue"]
        );
    }

    #[test]
    fn oracle_segmentation() {
        let m = disc(16, 16, 8.0, 6.0, 3.5);
        let oracle = Oracle::new(vocab(), scene(&[("disc_red", m.clone())]), SceneAnnotation::default());
        let img = ImageTensor::filled(16, 16, 3, 0.5);
        assert_eq!(segment_subject(&oracle, &img, "disc_red").unwrap(), m);
        assert_eq!(segment_subject(&oracle, &img, "box_blue").unwrap().count(), 0);
        assert!(segment_subject(&oracle, &img, "unicorn").is_err());
        let full = BinaryMask::from_fn(16, 16, |_, _| true);
        let oracle = Oracle::new(vocab(), scene(&[("box_blue", full.clone())]), SceneAnnotation::default());
        assert_eq!(segment_subject(&oracle, &img, "box_blue").unwrap(), full);
        // independent rasterization of the disc
        let mut count = 0;
        for y in 0..16 {
            for x in 0..16 {
                let (fy, fx) = (y as f64 + 0.5 - 8.0, x as f64 + 0.5 - 6.0);
                if fy.hypot(fx) <= 3.5 {
                    count += 1;
                    assert!(m.contains(y, x));
                }
            }
        }
        assert_eq!(m.count(), count);
    }

    #[test]
    fn smoothing_examples() {
        let ones = BinaryMask::from_fn(9, 9, |_, _| true);
        for v in smooth_mask(&ones, 2.0).unwrap().values() {
            assert_abs_diff_eq!(*v, 1.0, epsilon = 1e-12);
        }
        assert!(smooth_mask(&BinaryMask::zeros(9, 9), 2.0).unwrap().values().iter().all(|&v| v == 0.0));
        let impulse = BinaryMask::from_fn(15, 15, |y, x| y == 7 && x == 7);
        let out = smooth_mask(&impulse, 1.0).unwrap();
        let k = gaussian_kernel(1.0).unwrap();
        for dy in 0..7 {
            for dx in 0..7 {
                assert_abs_diff_eq!(out.get(4 + dy, 4 + dx), k.get(dy, dx), epsilon = 1e-15);
            }
        }
        assert!(smooth_mask(&impulse, 0.0).is_err());
    }

    #[test]
    fn oracle_scoring() {
        let truth = BinaryMask::from_fn(4, 4, |y, _| y < 2);
        let oracle = Oracle::new(vocab(), scene(&[("disc_red", truth.clone())]), SceneAnnotation::default());
        let img = ImageTensor::filled(4, 4, 1, 1.0);
        assert_eq!(score_subject(&oracle, &img, &truth, "disc_red").unwrap(), 1.0);
        let disjoint = BinaryMask::from_fn(4, 4, |y, _| y >= 2);
        assert_eq!(score_subject(&oracle, &img, &disjoint, "disc_red").unwrap(), 0.0);
        // shifted by half: 4 shared cells out of 12 covered
        let half = BinaryMask::from_fn(4, 4, |y, _| (1..3).contains(&y));
        let brute = {
            let (mut i, mut u) = (0, 0);
            for y in 0..4 {
                for x in 0..4 {
                    let (a, b) = (truth.contains(y, x), half.contains(y, x));
                    i += (a && b) as i32;
                    u += (a || b) as i32;
                }
            }
            i as f64 / u as f64
        };
        assert_abs_diff_eq!(score_subject(&oracle, &img, &half, "disc_red").unwrap(), brute, epsilon = 1e-15);
        assert_abs_diff_eq!(brute, 1.0 / 3.0, epsilon = 1e-15);
        let wrong = BinaryMask::zeros(3, 4);
        assert!(score_subject(&oracle, &img, &wrong, "disc_red").is_err());
    }

    #[test]
    fn merge_examples() {
        let a = Grid2D::new(2, 2, vec![0.1, 0.9, 0.0, 0.4]).unwrap();
        let b = Grid2D::new(2, 2, vec![0.5, 0.2, 0.3, 0.4]).unwrap();
        let (m, valid) = merge_masks(&[ScoredMask::new(a.clone(), 0.5).unwrap()], 0.2, true).unwrap();
        assert!(valid);
        assert_eq!(m, a);
        let low = [ScoredMask::new(a.clone(), 0.15).unwrap(), ScoredMask::new(b.clone(), 0.1).unwrap()];
        assert!(!merge_masks(&low, 0.2, true).unwrap().1);
        assert!(merge_masks(&low, 0.2, false).unwrap().1);
        let both = [ScoredMask::new(a.clone(), 0.5).unwrap(), ScoredMask::new(b.clone(), 0.7).unwrap()];
        let (m, _) = merge_masks(&both, 0.2, true).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                let expect = if a.get(r, c) > b.get(r, c) { a.get(r, c) } else { b.get(r, c) };
                assert_eq!(m.get(r, c), expect);
            }
        }
        let odd = [ScoredMask::new(a, 0.5).unwrap(), ScoredMask::new(Grid2D::zeros(1, 2), 0.5).unwrap()];
        assert!(merge_masks(&odd, 0.2, true).is_err());
    }

    #[test]
    fn patch_target_examples() {
        let t = to_patch_target(&Grid2D::filled(4, 4, 0.7), 2).unwrap();
        assert_eq!(t.target().unwrap().as_slice(), &[0.25; 4]);
        let one = Grid2D::new(4, 4, (0..16).map(|i| if i == 10 { 1.0 } else { 0.0 }).collect()).unwrap();
        assert_eq!(to_patch_target(&one, 2).unwrap().target().unwrap().as_slice(), &[0.0, 0.0, 0.0, 1.0]);
        // 3 covered pixels in patch 0, 1 in patch 1
        let mut split = Grid2D::zeros(2, 4);
        for (r, c) in [(0, 0), (0, 1), (1, 0), (1, 2)] {
            split.set(r, c, 1.0);
        }
        assert_eq!(to_patch_target(&split, 2).unwrap().target().unwrap().as_slice(), &[0.75, 0.25]);
        assert!(!to_patch_target(&Grid2D::zeros(4, 4), 2).unwrap().is_valid());
        assert!(to_patch_target(&Grid2D::zeros(5, 4), 2).is_err());
    }

    fn sample_pipeline(filtering: bool) -> (SaliencyTarget, BinaryMask) {
        // smaller objects leak more of the blur into neighbouring patches
        let red = disc(32, 32, 14.0, 13.0, 7.0);
        let blue = BinaryMask::from_fn(32, 32, |y, x| (20..28).contains(&y) && (20..28).contains(&x));
        let oracle = Oracle::new(
            vocab(),
            scene(&[("disc_red", red.clone()), ("box_blue", blue.clone())]),
            scene(&[("disc_red", disc(32, 32, 20.0, 20.0, 5.0))]),
        );
        let img = ImageTensor::filled(32, 32, 3, 0.3);
        let req = TargetRequest {
            sample_id: "s1",
            query: PairView { text: "disc_red", image: Some(&img) },
            positive: PairView { text: "", image: Some(&img) },
        };
        let cfg = PipelineConfig { filtering, ..PipelineConfig::default() };
        (build_target(&req, &cfg, &Interfaces::uniform(&oracle)).unwrap(), red)
    }

    #[test]
    fn pipeline_concentrates_on_the_referenced_object() {
        let (t, red) = sample_pipeline(true);
        let inside = footprint_patches(&red, 4).unwrap();
        let mass: f64 = t.target().unwrap().as_slice().iter().zip(&inside).filter(|(_, &i)| i).map(|(v, _)| v).sum();
        assert!(mass >= 0.9, "mass {mass}");
        let (off, _) = sample_pipeline(false);
        assert_eq!(off, t);
    }

    #[test]
    fn pipeline_without_shared_subject_is_invalid() {
        let oracle = Oracle::new(vocab(), SceneAnnotation::default(), SceneAnnotation::default());
        let img = ImageTensor::filled(8, 8, 3, 0.3);
        let req = TargetRequest {
            sample_id: "s2",
            query: PairView { text: "disc_red", image: Some(&img) },
            positive: PairView { text: "", image: Some(&img) },
        };
        let t = build_target(&req, &PipelineConfig::default(), &Interfaces::uniform(&oracle)).unwrap();
        assert!(!t.is_valid());
        assert_eq!(t.merged().dims(), (8, 8));

        let text_only = TargetRequest { query: PairView { text: "disc_red", image: None }, ..req };
        let err = build_target(&text_only, &PipelineConfig::default(), &Interfaces::uniform(&oracle)).unwrap_err();
        assert!(err.to_string().contains("s2"));
    }

    struct Loopback<'a>(WireServer<'a>);

    impl WireTransport for Loopback<'_> {
        fn exchange(&self, request: &str) -> Result<String> {
            Ok(self.0.handle(request))
        }
    }

    #[test]
    fn wire_client_round_trips_through_the_oracle() {
        let red = disc(32, 32, 10.0, 12.0, 5.0);
        let oracle = Oracle::new(
            vocab(),
            scene(&[("disc_red", red.clone())]),
            scene(&[("disc_red", red.clone())]),
        );
        let client = WireClient::new(Loopback(WireServer::new(Interfaces::uniform(&oracle))), "w1");
        let img = ImageTensor::filled(32, 32, 3, 0.3);
        let req = TargetRequest {
            sample_id: "w1",
            query: PairView { text: "disc_red", image: Some(&img) },
            positive: PairView { text: "", image: Some(&img) },
        };
        let cfg = PipelineConfig::default();
        let direct = build_target(&req, &cfg, &Interfaces::uniform(&oracle)).unwrap();
        let remote = build_target(&req, &cfg, &Interfaces::uniform(&client)).unwrap();
        assert_eq!(direct, remote);
        assert!(client.segment(&img, "unicorn").is_err());
    }

    #[test]
    fn wire_records_have_the_documented_shape() {
        let req = WireRequest {
            op: WireOp::Segment,
            sample_id: "a".into(),
            payload: WirePayload::Segment {
                image: WireImage::encode(&ImageTensor::filled(1, 1, 1, 1.0)),
                subject: "disc_red".into(),
            },
        };
        let v: serde_json::Value = serde_json::to_value(&req).unwrap();
        assert_eq!(v["op"], "segment");
        assert_eq!(v["sample_id"], "a");
        assert_eq!(v["payload"]["subject"], "disc_red");
        assert_eq!(serde_json::from_value::<WireRequest>(v).unwrap(), req);
    }

    fn arb_scored() -> impl Strategy<Value = Vec<ScoredMask>> {
        prop::collection::vec(
            (prop::collection::vec(0.0f64..=1.0, 6), -1.0f64..=1.0)
                .prop_map(|(v, a)| ScoredMask::new(Grid2D::new(2, 3, v).unwrap(), a).unwrap()),
            1..5,
        )
    }

    proptest! {
        #[test]
        fn merge_is_order_free_and_idempotent(masks in arb_scored(), delta in -1.0f64..=1.0) {
            let (m, v) = merge_masks(&masks, delta, true).unwrap();
            let mut rev = masks.clone();
            rev.reverse();
            prop_assert_eq!(merge_masks(&rev, delta, true).unwrap(), (m.clone(), v));
            let mut doubled = masks.clone();
            doubled.extend(masks.iter().cloned());
            prop_assert_eq!(merge_masks(&doubled, delta, true).unwrap(), (m, v));
        }

        #[test]
        fn lower_threshold_never_loses_masks(masks in arb_scored(), d1 in -1.0f64..=1.0, d2 in -1.0f64..=1.0) {
            let (lo, hi) = if d1 < d2 { (d1, d2) } else { (d2, d1) };
            let (m_lo, v_lo) = merge_masks(&masks, lo, true).unwrap();
            let (m_hi, v_hi) = merge_masks(&masks, hi, true).unwrap();
            prop_assert!(v_lo || !v_hi);
            for (a, b) in m_lo.values().iter().zip(m_hi.values()) {
                prop_assert!(a >= b);
            }
            prop_assert_eq!(merge_masks(&masks, lo, false).unwrap(), merge_masks(&masks, hi, false).unwrap());
        }

        #[test]
        fn smoothing_stays_in_unit_range(bits in prop::collection::vec(any::<bool>(), 64), sigma in 0.3f64..3.0) {
            let m = BinaryMask::from_fn(8, 8, |y, x| bits[y * 8 + x]);
            let out = smooth_mask(&m, sigma).unwrap();
            prop_assert!(out.values().iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!(out.max() <= m.grid().max() + 1e-12);
        }

        #[test]
        fn patch_target_is_a_monotone_distribution(v in prop::collection::vec(0.0f64..=1.0, 64)) {
            let g = Grid2D::new(8, 8, v).unwrap();
            let t = to_patch_target(&g, 2).unwrap();
            if let Some(d) = t.target() {
                prop_assert!((d.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-6);
                let mut pooled = vec![0.0; 16];
                for r in 0..8 { for c in 0..8 { pooled[(r / 2) * 4 + c / 2] += g.get(r, c); } }
                for i in 0..16 { for j in 0..16 {
                    if pooled[i] < pooled[j] { prop_assert!(d.as_slice()[i] <= d.as_slice()[j]); }
                } }
            }
        }
    }
}
