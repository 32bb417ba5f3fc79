//! Synthetic retrieval corpus: colored shapes on noisy gray canvases.
//!
//! Two query flavors are generated. A `t2i` query is a class name whose positive
//! is an image containing that class. An `it2i` query is an image with several
//! objects plus a shape or color word that only one of them has; its positive
//! contains that object but none of the query's other objects, so the text alone
//! does not say which class to retrieve. Every object's exact footprint
//! is saved so saliency targets and localization metrics can be checked against
//! ground truth.
//!
//! Layout of a corpus directory:
//!
//! ```text
//! corpus.json              generation config
//! manifest.jsonl           one record per sample
//! candidates.jsonl         one record per retrievable image
//! images/<image id>.ppm
//! masks/<image id>/<label>.pgm
//! targets/<sample id>.tnsr saliency targets (it2i only)
//! targets/<sample id>-merged.pgm
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::model::{patchify, ImageTensor, ModelConfig, TokenSequence};
use crate::numerics::Rng;
use crate::saliency::{
    build_target, BinaryMask, Interfaces, Oracle, PairView, PipelineConfig, SaliencyTarget, SceneAnnotation,
    TargetRequest,
};

pub const SHAPES: [&str; 3] = ["disc", "box", "triangle"];

pub const PALETTE: [(&str, [f64; 3]); 8] = [
    ("red", [0.90, 0.12, 0.10]),
    ("green", [0.12, 0.75, 0.15]),
    ("blue", [0.12, 0.25, 0.92]),
    ("yellow", [0.95, 0.88, 0.10]),
    ("cyan", [0.10, 0.85, 0.88]),
    ("magenta", [0.85, 0.12, 0.85]),
    ("black", [0.04, 0.04, 0.04]),
    ("white", [0.97, 0.97, 0.97]),
];

pub const MAX_CLASSES: usize = SHAPES.len() * PALETTE.len();

/// Instruction token of a text-to-image query.
pub const INSTR_T2I: u32 = MAX_CLASSES as u32;
/// Instruction token of an image+text-to-image query.
pub const INSTR_IT2I: u32 = MAX_CLASSES as u32 + 1;
/// Instruction token of a candidate.
pub const INSTR_CANDIDATE: u32 = MAX_CLASSES as u32 + 2;
/// First attribute token: one per shape, then one per color.
pub const ATTRIBUTE_BASE: u32 = MAX_CLASSES as u32 + 3;

pub const BACKGROUND: f64 = 0.5;

/// `"<shape>_<color>"`, e.g. `disc_red` for class 0.
pub fn class_label(class: usize) -> String {
    format!("{}_{}", SHAPES[class / PALETTE.len()], PALETTE[class % PALETTE.len()].0)
}

pub fn class_from_label(label: &str) -> Option<usize> {
    (0..MAX_CLASSES).find(|&c| class_label(c) == label)
}

/// Which part of a class an it2i query names.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Attribute {
    Shape,
    Color,
}

impl Attribute {
    pub fn of(self, class: usize) -> usize {
        match self {
            Attribute::Shape => class / PALETTE.len(),
            Attribute::Color => class % PALETTE.len(),
        }
    }

    pub fn token(self, class: usize) -> u32 {
        match self {
            Attribute::Shape => ATTRIBUTE_BASE + self.of(class) as u32,
            Attribute::Color => ATTRIBUTE_BASE + (SHAPES.len() + self.of(class)) as u32,
        }
    }
}

/// The word a text token stands for: a class label, a shape or a color.
pub fn token_word(token: u32) -> Option<String> {
    let t = token as usize;
    let a = t.checked_sub(ATTRIBUTE_BASE as usize);
    match a {
        _ if t < MAX_CLASSES => Some(class_label(t)),
        Some(a) if a < SHAPES.len() => Some(SHAPES[a].to_string()),
        Some(a) if a < SHAPES.len() + PALETTE.len() => Some(PALETTE[a - SHAPES.len()].0.to_string()),
        _ => None,
    }
}

pub fn vocabulary(classes: usize) -> Vec<String> {
    (0..classes).map(class_label).collect()
}

/// One shape instance. `scale` is the disc radius, the box half-side, or the
/// triangle half-height (and half-base).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub class: usize,
    /// `(row, col)` in pixels.
    pub center: (f64, f64),
    pub scale: f64,
}

impl ObjectSpec {
    /// Whether the pixel cell `(row, col)` (sampled at its center) lies in the footprint.
    pub fn covers(&self, row: usize, col: usize) -> bool {
        let dy = row as f64 + 0.5 - self.center.0;
        let dx = col as f64 + 0.5 - self.center.1;
        let s = self.scale;
        match self.class / PALETTE.len() {
            0 => dy * dy + dx * dx <= s * s,
            1 => dy.abs() <= s && dx.abs() <= s,
            _ => (-s..=s).contains(&dy) && dx.abs() <= (dy + s) / 2.0,
        }
    }

    fn inside(&self, h: usize, w: usize) -> bool {
        let (cy, cx, s) = (self.center.0, self.center.1, self.scale);
        cy - s >= 0.0 && cx - s >= 0.0 && cy + s <= h as f64 && cx + s <= w as f64
    }

    fn separated(&self, other: &ObjectSpec, gap: f64) -> bool {
        // bounding squares kept apart by `gap`
        let reach = self.scale + other.scale + gap;
        (self.center.0 - other.center.0).abs() >= reach || (self.center.1 - other.center.1).abs() >= reach
    }
}

/// Paints objects over a noisy background. Returns the image and one exact
/// footprint mask per object. Pixel values are quantized to 8 bits.
pub fn render_image(
    objects: &[ObjectSpec],
    height: usize,
    width: usize,
    noise: f64,
    rng: &mut Rng,
) -> Result<(ImageTensor, Vec<BinaryMask>)> {
    if objects.is_empty() || objects.len() > 4 {
        return Err(Error::invalid(format!("scenes hold 1-4 objects, got {}", objects.len())));
    }
    let classes: BTreeSet<usize> = objects.iter().map(|o| o.class).collect();
    if classes.len() != objects.len() {
        return Err(Error::invalid("object classes must differ within one image"));
    }
    for o in objects {
        if o.class >= MAX_CLASSES {
            return Err(Error::invalid(format!("class {} out of range", o.class)));
        }
        if !(o.scale > 0.0) || !o.inside(height, width) {
            return Err(Error::invalid(format!("{} at {:?} leaves the canvas", class_label(o.class), o.center)));
        }
    }
    let mut px = vec![0.0; height * width * 3];
    for v in px.iter_mut() {
        *v = BACKGROUND + noise * rng.normal();
    }
    let mut masks = Vec::with_capacity(objects.len());
    for o in objects {
        let color = PALETTE[o.class % PALETTE.len()].1;
        let mask = BinaryMask::from_fn(height, width, |r, c| o.covers(r, c));
        for r in 0..height {
            for c in 0..width {
                if mask.contains(r, c) {
                    let base = (r * width + c) * 3;
                    px[base..base + 3].copy_from_slice(&color);
                }
            }
        }
        masks.push(mask);
    }
    px.iter_mut().for_each(|v| *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
    Ok((ImageTensor::new(height, width, 3, px)?, masks))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flavor {
    T2i,
    It2i,
}

impl fmt::Display for Flavor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Flavor::T2i => "t2i",
            Flavor::It2i => "it2i",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "eval" => Ok(Split::Eval),
            other => Err(Error::invalid(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub n_train: usize,
    pub n_eval: usize,
    /// Candidates per eval query, positive included.
    pub pool_size: usize,
    pub classes: usize,
    pub seed: u64,
    /// Share of t2i samples; the rest are it2i.
    pub t2i_fraction: f64,
    pub image_size: usize,
    pub noise: f64,
    pub min_scale: f64,
    pub max_scale: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_eval: 500,
            pool_size: 64,
            classes: MAX_CLASSES,
            seed: 0,
            t2i_fraction: 0.5,
            image_size: 32,
            noise: 0.05,
            min_scale: 4.0,
            max_scale: 7.0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pool_size < 2 {
            return Err(Error::invalid(format!("pool_size must be >= 2, got {}", self.pool_size)));
        }
        if !(4..=MAX_CLASSES).contains(&self.classes) {
            return Err(Error::invalid(format!("classes must lie in 4..={MAX_CLASSES}, got {}", self.classes)));
        }
        if !(0.0..=1.0).contains(&self.t2i_fraction) {
            return Err(Error::invalid("t2i_fraction must lie in [0, 1]"));
        }
        if !(self.min_scale >= 1.0 && self.max_scale >= self.min_scale) {
            return Err(Error::invalid("need 1 <= min_scale <= max_scale"));
        }
        if (self.image_size as f64) < 4.0 * self.max_scale + 4.0 {
            return Err(Error::invalid("image too small for the object scale"));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::invalid("noise must be >= 0"));
        }
        Ok(())
    }
}

/// Per-image file references: image path plus one mask path per object label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRef {
    pub image: String,
    pub masks: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestImages {
    pub query: Option<ImageRef>,
    pub positive: ImageRef,
}

/// One line of `manifest.jsonl`. Paths are relative to the corpus directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub split: Split,
    pub flavor: Flavor,
    /// `[instruction, text]`; the text token is the subject's class for t2i and
    /// one of its attributes for it2i.
    pub token_ids: Vec<u32>,
    /// Class label of the object the query is about.
    pub subject: String,
    pub images: ManifestImages,
    pub targets: Option<String>,
    pub positive_id: String,
    pub candidate_pool_ids: Vec<String>,
}

impl ManifestRecord {
    pub fn referenced_class(&self) -> Result<usize> {
        class_from_label(&self.subject)
            .ok_or_else(|| Error::invalid(format!("unknown subject '{}'", self.subject)).for_sample(&self.id))
    }

    pub fn text_token(&self) -> Result<u32> {
        self.token_ids
            .get(1)
            .copied()
            .filter(|&t| token_word(t).is_some())
            .ok_or_else(|| Error::invalid("manifest record lacks a text token").for_sample(&self.id))
    }
}

/// One line of `candidates.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub id: String,
    #[serde(flatten)]
    pub image: ImageRef,
}

struct Scene {
    objects: Vec<ObjectSpec>,
}

impl Scene {
    fn labels(&self) -> Vec<String> {
        self.objects.iter().map(|o| class_label(o.class)).collect()
    }

    fn classes(&self) -> BTreeSet<usize> {
        self.objects.iter().map(|o| o.class).collect()
    }
}

struct Generator<'a> {
    cfg: &'a CorpusConfig,
    rng: Rng,
    deck: Vec<usize>,
    /// Filler decks: `[0]` for retrievable images, `[1]` for query images.
    filler: [Vec<usize>; 2],
}

impl Generator<'_> {
    /// Next class from a shuffled deck, so reference classes stay balanced.
    fn deal(&mut self) -> usize {
        if self.deck.is_empty() {
            self.deck = (0..self.cfg.classes).collect();
            self.rng.shuffle(&mut self.deck);
        }
        self.deck.pop().expect("deck refilled")
    }

    /// Filler classes from a second deck: the topmost card that fits is taken,
    /// and a fresh shuffled deck goes underneath when none does.
    fn pick_others(&mut self, deck: usize, count: usize, exclude: &BTreeSet<usize>) -> Vec<usize> {
        let mut picked: Vec<usize> = Vec::with_capacity(count);
        let mut refills = 0;
        while picked.len() < count {
            match self.filler[deck].iter().rposition(|c| !exclude.contains(c) && !picked.contains(c)) {
                Some(i) => picked.push(self.filler[deck].remove(i)),
                None if refills < 2 => {
                    refills += 1;
                    let mut fresh: Vec<usize> = (0..self.cfg.classes).collect();
                    self.rng.shuffle(&mut fresh);
                    fresh.append(&mut self.filler[deck]);
                    self.filler[deck] = fresh;
                }
                None => break,
            }
        }
        picked
    }

    /// Picks the attribute an it2i query names, preferring one that leaves
    /// `extra` other classes to fill the scene.
    fn attribute(&mut self, r: usize, extra: usize) -> Result<Attribute> {
        let mut order = [Attribute::Shape, Attribute::Color];
        if self.rng.below(2) == 1 {
            order.swap(0, 1);
        }
        let free = |a: Attribute| (0..self.cfg.classes).filter(|&c| a.of(c) != a.of(r)).count();
        order
            .into_iter()
            .find(|&a| free(a) >= extra)
            .ok_or_else(|| Error::invalid(format!("no attribute singles out {} among {} classes", class_label(r), self.cfg.classes)))
    }

    fn layout(&mut self, classes: &[usize]) -> Result<Scene> {
        let size = self.cfg.image_size as f64;
        'attempt: for _ in 0..1000 {
            let mut objects: Vec<ObjectSpec> = Vec::with_capacity(classes.len());
            for &class in classes {
                let mut placed = None;
                for _ in 0..50 {
                    let scale = self.rng.uniform_range(self.cfg.min_scale, self.cfg.max_scale);
                    let cy = self.rng.uniform_range(scale, size - scale);
                    let cx = self.rng.uniform_range(scale, size - scale);
                    let o = ObjectSpec { class, center: (cy, cx), scale };
                    if objects.iter().all(|p| p.separated(&o, 1.0)) {
                        placed = Some(o);
                        break;
                    }
                }
                match placed {
                    Some(o) => objects.push(o),
                    None => continue 'attempt,
                }
            }
            return Ok(Scene { objects });
        }
        Err(Error::invalid(format!("could not place {} objects without overlap", classes.len())))
    }

    fn scene_with(&mut self, deck: usize, required: usize, extra: usize, exclude: &BTreeSet<usize>) -> Result<Scene> {
        let mut ex = exclude.clone();
        ex.insert(required);
        let mut classes = vec![required];
        classes.extend(self.pick_others(deck, extra, &ex));
        self.rng.shuffle(&mut classes);
        self.layout(&classes)
    }
}

/// Writes an image and its masks; returns the file references.
fn save_scene(root: &Path, image_id: &str, scene: &Scene, image: &ImageTensor, masks: &[BinaryMask]) -> Result<ImageRef> {
    let image_rel = format!("images/{image_id}.ppm");
    io::write_image(&root.join(&image_rel), image)?;
    let mut mask_refs = BTreeMap::new();
    for (label, mask) in scene.labels().into_iter().zip(masks) {
        let rel = format!("masks/{image_id}/{label}.pgm");
        io::write_gray(&root.join(&rel), mask.grid())?;
        mask_refs.insert(label, rel);
    }
    Ok(ImageRef { image: image_rel, masks: mask_refs })
}

struct Pending {
    record: ManifestRecord,
    query_scene: Option<Scene>,
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    io::write_file(path, out.as_bytes())
}

/// Generates a corpus under `out`. The directory tree is a pure function of `config`.
///
/// Saliency targets for it2i samples are built with the annotation oracle and the
/// given pipeline settings.
pub fn generate_corpus(config: &CorpusConfig, pipeline: &PipelineConfig, out: &Path) -> Result<()> {
    config.validate()?;
    pipeline.validate()?;
    let size = config.image_size;
    let mut gen = Generator { cfg: config, rng: Rng::new(config.seed), deck: Vec::new(), filler: [Vec::new(), Vec::new()] };
    let mut pending: Vec<Pending> = Vec::new();
    let mut candidates: Vec<(CandidateRecord, BTreeSet<usize>)> = Vec::new();

    let n_total = config.n_train + config.n_eval;
    let mut flavors: Vec<Flavor> = (0..n_total)
        .map(|i| {
            let split_i = if i < config.n_train { i } else { i - config.n_train };
            let n = if i < config.n_train { config.n_train } else { config.n_eval };
            if (split_i as f64) < config.t2i_fraction * n as f64 { Flavor::T2i } else { Flavor::It2i }
        })
        .collect();
    gen.rng.shuffle(&mut flavors[..config.n_train]);
    gen.rng.shuffle(&mut flavors[config.n_train..]);

    for (i, &flavor) in flavors.iter().enumerate() {
        let (split, id) = if i < config.n_train {
            (Split::Train, format!("train-{i:05}"))
        } else {
            (Split::Eval, format!("eval-{:05}", i - config.n_train))
        };
        let r = gen.deal();
        let (query_scene, positive_scene) = match flavor {
            Flavor::T2i => {
                let extra = gen.rng.below(3);
                (None, gen.scene_with(0, r, extra, &BTreeSet::new())?)
            }
            Flavor::It2i => {
                let extra = 1 + gen.rng.below(2);
                let attr = gen.attribute(r, extra)?;
                // no other object in the query may share the named attribute
                let clash: BTreeSet<usize> = (0..config.classes).filter(|&c| attr.of(c) == attr.of(r)).collect();
                let q = gen.scene_with(1, r, extra, &clash)?;
                let mut others = q.classes();
                others.remove(&r);
                let extra = gen.rng.below(3);
                let p = gen.scene_with(0, r, extra, &others)?;
                (Some((q, attr)), p)
            }
        };
        let (query_scene, text_token) = match query_scene {
            Some((q, attr)) => (Some(q), attr.token(r)),
            None => (None, r as u32),
        };
        let mut img_rng = gen.rng.fork(i as u64 + 1);
        let query_ref = match &query_scene {
            Some(s) => {
                let (img, masks) = render_image(&s.objects, size, size, config.noise, &mut img_rng)?;
                Some(save_scene(out, &format!("{id}-q"), s, &img, &masks)?)
            }
            None => None,
        };
        let (img, masks) = render_image(&positive_scene.objects, size, size, config.noise, &mut img_rng)?;
        let positive_id = format!("{id}-p");
        let positive_ref = save_scene(out, &positive_id, &positive_scene, &img, &masks)?;
        let instr = if flavor == Flavor::T2i { INSTR_T2I } else { INSTR_IT2I };
        if split == Split::Eval {
            candidates.push((
                CandidateRecord { id: positive_id.clone(), image: positive_ref.clone() },
                positive_scene.classes(),
            ));
        }
        pending.push(Pending {
            record: ManifestRecord {
                id: id.clone(),
                split,
                flavor,
                token_ids: vec![instr, text_token],
                subject: class_label(r),
                images: ManifestImages { query: query_ref, positive: positive_ref },
                targets: (flavor == Flavor::It2i).then(|| format!("targets/{id}.tnsr")),
                positive_id,
                candidate_pool_ids: Vec::new(),
            },
            query_scene,
        });
    }

    if config.n_eval > 0 {
        for g in 0..2 * config.pool_size {
            let n_obj = 1 + gen.rng.below(3);
            let first = gen.pick_others(0, 1, &BTreeSet::new())[0];
            let scene = gen.scene_with(0, first, n_obj - 1, &BTreeSet::new())?;
            let mut img_rng = gen.rng.fork((n_total + g) as u64 + 1);
            let (img, masks) = render_image(&scene.objects, size, size, config.noise, &mut img_rng)?;
            let id = format!("gallery-{g:04}");
            let image = save_scene(out, &id, &scene, &img, &masks)?;
            candidates.push((CandidateRecord { id, image }, scene.classes()));
        }
    }

    for p in pending.iter_mut() {
        let rec = &mut p.record;
        if rec.split == Split::Train {
            rec.candidate_pool_ids = vec![rec.positive_id.clone()];
            continue;
        }
        let r = rec.referenced_class()?;
        let eligible: Vec<usize> = (0..candidates.len())
            .filter(|&c| candidates[c].0.id != rec.positive_id && !candidates[c].1.contains(&r))
            .collect();
        let need = config.pool_size - 1;
        if eligible.len() < need {
            return Err(Error::invalid(format!(
                "only {} distractors available for {} but the pool needs {need}",
                eligible.len(),
                rec.id
            )));
        }
        let mut pool: Vec<usize> = Vec::with_capacity(need);
        if let Some(q) = &p.query_scene {
            // hard distractors share the query's other objects or the named attribute
            let word = token_word(rec.text_token()?).unwrap_or_default();
            let mut others: BTreeSet<usize> = q.classes().into_iter().filter(|&c| c != r).collect();
            others.extend((0..config.classes).filter(|&c| c != r && class_label(c).split('_').any(|w| w == word)));
            let mut hard: Vec<usize> =
                eligible.iter().copied().filter(|&c| !candidates[c].1.is_disjoint(&others)).collect();
            gen.rng.shuffle(&mut hard);
            hard.truncate(need / 2);
            pool.extend(hard);
        }
        let mut rest: Vec<usize> = eligible.into_iter().filter(|c| !pool.contains(c)).collect();
        gen.rng.shuffle(&mut rest);
        pool.extend(rest.into_iter().take(need - pool.len()));
        let mut ids: Vec<String> = pool.into_iter().map(|c| candidates[c].0.id.clone()).collect();
        ids.push(rec.positive_id.clone());
        ids.sort();
        rec.candidate_pool_ids = ids;
    }

    let records: Vec<&ManifestRecord> = pending.iter().map(|p| &p.record).collect();
    write_jsonl(&out.join("manifest.jsonl"), &records)?;
    let cand: Vec<&CandidateRecord> = candidates.iter().map(|(c, _)| c).collect();
    write_jsonl(&out.join("candidates.jsonl"), &cand)?;
    io::write_file(&out.join("corpus.json"), serde_json::to_string_pretty(config)?.as_bytes())?;
    build_corpus_targets(out, config.classes, pipeline, out)?;
    Ok(())
}

/// Counts from one pass of [`build_corpus_targets`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSummary {
    pub requested: usize,
    pub valid: usize,
}

fn load_annotation(root: &Path, r: &ImageRef) -> Result<SceneAnnotation> {
    let mut objects = Vec::with_capacity(r.masks.len());
    for (label, rel) in &r.masks {
        objects.push((label.clone(), BinaryMask::new(io::read_gray(&root.join(rel))?)?));
    }
    Ok(SceneAnnotation { objects })
}

/// Builds the saliency target of every record that names one, reading scenes
/// from `corpus` and writing target files under `out` at the manifest paths.
/// Subjects come from the annotation oracle over the first `classes` labels.
pub fn build_corpus_targets(corpus: &Path, classes: usize, pipeline: &PipelineConfig, out: &Path) -> Result<TargetSummary> {
    pipeline.validate()?;
    let vocab = vocabulary(classes);
    let mut summary = TargetSummary { requested: 0, valid: 0 };
    for rec in read_manifest(corpus)? {
        let (Some(query_ref), Some(target_rel)) = (&rec.images.query, &rec.targets) else {
            continue;
        };
        let build = || -> Result<SaliencyTarget> {
            let query_image = io::read_image(&corpus.join(&query_ref.image))?;
            let oracle = Oracle::new(
                vocab.clone(),
                load_annotation(corpus, query_ref)?,
                load_annotation(corpus, &rec.images.positive)?,
            );
            let text = token_word(rec.text_token()?).unwrap_or_default();
            let request = TargetRequest {
                sample_id: &rec.id,
                query: PairView { text: &text, image: Some(&query_image) },
                positive: PairView { text: "", image: None },
            };
            build_target(&request, pipeline, &Interfaces::uniform(&oracle))
        };
        let target = build().map_err(|e| match e {
            Error::Sample { .. } => e,
            other => other.for_sample(&rec.id),
        })?;
        summary.requested += 1;
        summary.valid += usize::from(target.is_valid());
        write_target_files(out, target_rel, &target)?;
    }
    Ok(summary)
}

/// Writes a target tensor at `rel` (relative to `root`) and its merged mask next to it.
pub fn write_target_files(root: &Path, rel: &str, target: &SaliencyTarget) -> Result<()> {
    let path = root.join(rel);
    io::write_target(&path, target)?;
    io::write_gray(&merged_mask_path(&path), target.merged())
}

pub fn merged_mask_path(target_path: &Path) -> PathBuf {
    let stem = target_path.file_stem().and_then(|s| s.to_str()).unwrap_or("target");
    target_path.with_file_name(format!("{stem}-merged.pgm"))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| Error::format(path, format!("line {}: {e}", n + 1))))
        .collect()
}

pub fn read_manifest(corpus: &Path) -> Result<Vec<ManifestRecord>> {
    read_jsonl(&corpus.join("manifest.jsonl"))
}

pub fn read_candidates(corpus: &Path) -> Result<Vec<CandidateRecord>> {
    read_jsonl(&corpus.join("candidates.jsonl"))
}

/// An image with its patches and ground-truth object footprints.
#[derive(Debug, Clone)]
pub struct LoadedImage {
    pub image: ImageTensor,
    pub patches: Array2<f64>,
    pub objects: Vec<(String, BinaryMask)>,
}

impl LoadedImage {
    pub fn load(root: &Path, r: &ImageRef, patch: usize) -> Result<Self> {
        let image = io::read_image(&root.join(&r.image))?;
        let patches = patchify(&image, patch)?;
        let mut objects = Vec::with_capacity(r.masks.len());
        for (label, rel) in &r.masks {
            objects.push((label.clone(), BinaryMask::new(io::read_gray(&root.join(rel))?)?));
        }
        Ok(Self { image, patches, objects })
    }

    pub fn footprint(&self, label: &str) -> Option<&BinaryMask> {
        self.objects.iter().find(|(l, _)| l == label).map(|(_, m)| m)
    }

    pub fn annotation(&self) -> SceneAnnotation {
        SceneAnnotation { objects: self.objects.clone() }
    }
}

/// A loaded sample ready for encoding.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub id: String,
    pub flavor: Flavor,
    pub instruction: u32,
    pub text_token: u32,
    pub class: usize,
    pub query_image: Option<LoadedImage>,
    pub positive: LoadedImage,
    pub positive_id: String,
    pub candidate_pool_ids: Vec<String>,
    pub target: Option<SaliencyTarget>,
}

impl TrainSample {
    pub fn label(&self) -> String {
        class_label(self.class)
    }

    pub fn query_sequence(&self, n_visual: usize) -> Result<TokenSequence> {
        let n = if self.query_image.is_some() { n_visual } else { 0 };
        TokenSequence::build(n, &[self.text_token], &[self.instruction])
    }
}

/// Template of every candidate: its image followed by the candidate instruction.
pub fn candidate_sequence(n_visual: usize) -> Result<TokenSequence> {
    TokenSequence::build(n_visual, &[], &[INSTR_CANDIDATE])
}

/// One split of a corpus held in memory.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub root: PathBuf,
    pub samples: Vec<TrainSample>,
}

impl Corpus {
    /// Loads `split`. Targets are read from `targets_root` (default: the corpus
    /// directory) when the record names one and the file exists.
    pub fn load(root: &Path, split: Split, targets_root: Option<&Path>, model: &ModelConfig) -> Result<Self> {
        let troot = targets_root.unwrap_or(root);
        let mut samples = Vec::new();
        for rec in read_manifest(root)?.into_iter().filter(|r| r.split == split) {
            let load = || -> Result<TrainSample> {
                let class = rec.referenced_class()?;
                let query_image =
                    rec.images.query.as_ref().map(|q| LoadedImage::load(root, q, model.patch_size)).transpose()?;
                let positive = LoadedImage::load(root, &rec.images.positive, model.patch_size)?;
                for img in query_image.iter().chain([&positive]) {
                    if (img.image.height(), img.image.width(), img.image.channels())
                        != (model.image_height, model.image_width, model.channels)
                    {
                        return Err(Error::shape("image size does not match the model"));
                    }
                }
                let target = match &rec.targets {
                    Some(rel) if troot.join(rel).exists() => Some(io::read_target(&troot.join(rel))?),
                    _ => None,
                };
                Ok(TrainSample {
                    id: rec.id.clone(),
                    flavor: rec.flavor,
                    instruction: rec.token_ids[0],
                    text_token: rec.text_token()?,
                    class,
                    query_image,
                    positive,
                    positive_id: rec.positive_id.clone(),
                    candidate_pool_ids: rec.candidate_pool_ids.clone(),
                    target,
                })
            };
            samples.push(load().map_err(|e| match e {
                Error::Sample { .. } => e,
                other => other.for_sample(&rec.id),
            })?);
        }
        Ok(Self { root: root.to_path_buf(), samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Samples whose query image carries a saliency target file reference.
    pub fn expects_targets(&self) -> impl Iterator<Item = &TrainSample> {
        self.samples.iter().filter(|s| s.flavor == Flavor::It2i)
    }
}

/// Endless stream of shuffled index batches; each epoch is a fresh permutation.
#[derive(Debug, Clone)]
pub struct BatchStream {
    n: usize,
    batch: usize,
    rng: Rng,
    order: Vec<usize>,
    pos: usize,
}

impl BatchStream {
    pub fn new(n: usize, batch: usize, rng: Rng) -> Result<Self> {
        if n == 0 || batch == 0 {
            return Err(Error::invalid("batching needs a non-empty corpus and batch size"));
        }
        Ok(Self { n, batch, rng, order: Vec::new(), pos: 0 })
    }

    /// Indices of the next batch. A batch never spans two epochs, so the last one
    /// of an epoch may be short.
    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos >= self.order.len() {
            self.order = (0..self.n).collect();
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        let end = (self.pos + self.batch).min(self.n);
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        out
    }

    /// Skips `batches` batches (used when resuming).
    pub fn skip(&mut self, batches: usize) {
        for _ in 0..batches {
            self.next_batch();
        }
    }
}

/// One epoch of batches over `corpus`.
pub fn load_batches<'a>(corpus: &'a Corpus, batch: usize, rng: Rng) -> Result<Vec<Vec<&'a TrainSample>>> {
    let mut stream = BatchStream::new(corpus.len(), batch, rng)?;
    let per_epoch = corpus.len().div_ceil(batch);
    Ok((0..per_epoch).map(|_| stream.next_batch().into_iter().map(|i| &corpus.samples[i]).collect()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_round_trip() {
        assert_eq!(class_label(0), "disc_red");
        assert_eq!(class_label(23), "triangle_white");
        for c in 0..MAX_CLASSES {
            assert_eq!(class_from_label(&class_label(c)), Some(c));
        }
        assert_eq!(vocabulary(24).len(), 24);
    }

    #[test]
    fn render_without_noise_leaves_background_untouched() {
        let o = ObjectSpec { class: 0, center: (16.0, 16.0), scale: 5.0 };
        let (img, masks) = render_image(&[o], 32, 32, 0.0, &mut Rng::new(1)).unwrap();
        let bg = (BACKGROUND * 255.0).round() / 255.0;
        for r in 0..32 {
            for c in 0..32 {
                if !masks[0].contains(r, c) {
                    assert!((0..3).all(|ch| img.get(r, c, ch) == bg));
                }
            }
        }
    }

    #[test]
    fn footprint_areas_match_geometry() {
        for (class, area) in [(0, std::f64::consts::PI * 25.0), (8, 100.0), (16, 50.0)] {
            let o = ObjectSpec { class, center: (15.3, 16.1), scale: 5.0 };
            let (_, masks) = render_image(&[o], 32, 32, 0.0, &mut Rng::new(1)).unwrap();
            let count = masks[0].count() as f64;
            // boundary rasterization: within one perimeter's worth of cells
            assert!((count - area).abs() <= 4.0 * 5.0 * 2.0, "class {class}: {count} vs {area}");
            let mut brute = 0;
            for r in 0..32 {
                for c in 0..32 {
                    brute += o.covers(r, c) as usize;
                }
            }
            assert_eq!(masks[0].count(), brute);
        }
    }

    #[test]
    fn render_is_deterministic_and_validates() {
        let objs = [
            ObjectSpec { class: 3, center: (8.0, 8.0), scale: 4.0 },
            ObjectSpec { class: 12, center: (22.0, 22.0), scale: 5.0 },
        ];
        let a = render_image(&objs, 32, 32, 0.05, &mut Rng::new(5)).unwrap();
        let b = render_image(&objs, 32, 32, 0.05, &mut Rng::new(5)).unwrap();
        assert_eq!(a.0, b.0);
        let dup = [objs[0], ObjectSpec { center: (22.0, 22.0), ..objs[0] }];
        assert!(render_image(&dup, 32, 32, 0.0, &mut Rng::new(0)).is_err());
        let off = [ObjectSpec { class: 1, center: (2.0, 16.0), scale: 5.0 }];
        assert!(render_image(&off, 32, 32, 0.0, &mut Rng::new(0)).is_err());
        assert!(render_image(&[], 32, 32, 0.0, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn batch_stream_behaviour() {
        let mut s = BatchStream::new(5, 8, Rng::new(3)).unwrap();
        let mut first = s.next_batch();
        assert_eq!(first.len(), 5);
        first.sort();
        assert_eq!(first, vec![0, 1, 2, 3, 4]);

        let mut a = BatchStream::new(10, 3, Rng::new(7)).unwrap();
        let mut b = BatchStream::new(10, 3, Rng::new(7)).unwrap();
        let mut epoch = Vec::new();
        for _ in 0..4 {
            let x = a.next_batch();
            assert_eq!(x, b.next_batch());
            epoch.extend(x);
        }
        epoch.sort();
        assert_eq!(epoch, (0..10).collect::<Vec<_>>());
        assert!(BatchStream::new(0, 3, Rng::new(0)).is_err());
    }
}
