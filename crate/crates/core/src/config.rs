//! Flat `key = value` run configuration with dotted keys.
//!
//! ```text
//! # comments and blank lines are ignored
//! train.steps = 1500
//! loss.alpha = 10
//! sdr.top_k = all
//! ```
//!
//! Unknown keys are rejected. Later assignments win, which is how command-line
//! flags override the file.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::datagen::CorpusConfig;
use crate::error::{Error, Result};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: CorpusConfig,
}

/// Splits config text into `(key, value)` pairs without interpreting them.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        out.push((k.to_string(), unquote(v).to_string()));
    }
    Ok(out)
}

fn unquote(v: &str) -> &str {
    v.strip_prefix('"').and_then(|s| s.strip_suffix('"')).unwrap_or(v)
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value.parse().map_err(|e| Error::Config(format!("{key}: cannot parse '{value}': {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got '{value}'"))),
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_all(&parse_pairs(&text)?)?;
        Ok(cfg)
    }

    pub fn apply_all(&mut self, pairs: &[(String, String)]) -> Result<()> {
        pairs.iter().try_for_each(|(k, v)| self.apply(k, v))
    }

    /// Sets one key.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "train.steps" => t.steps = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.learning_rate" => t.learning_rate = parse(key, value)?,
            "train.seed" => t.seed = parse(key, value)?,
            "train.mode" => t.mode = parse(key, value)?,
            "model.image_height" => t.model.image_height = parse(key, value)?,
            "model.image_width" => t.model.image_width = parse(key, value)?,
            "model.channels" => t.model.channels = parse(key, value)?,
            "model.patch_size" => {
                t.model.patch_size = parse(key, value)?;
                t.pipeline.patch_size = t.model.patch_size;
            }
            "model.layers" => t.model.layers = parse(key, value)?,
            "model.width" => t.model.width = parse(key, value)?,
            "model.heads" => t.model.heads = parse(key, value)?,
            "model.ffn_width" => t.model.ffn_width = parse(key, value)?,
            "model.vocab_size" => t.model.vocab_size = parse(key, value)?,
            "model.max_len" => t.model.max_len = parse(key, value)?,
            "loss.alpha" => t.loss.alpha = parse(key, value)?,
            "loss.beta" => t.loss.beta = parse(key, value)?,
            "loss.tau_con" => t.loss.tau_con = parse(key, value)?,
            "loss.layers" => t.loss.layers = parse(key, value)?,
            "sdr.tau" => t.sdr.tau = parse(key, value)?,
            "sdr.fusion" => t.sdr.fusion = parse(key, value)?,
            "sdr.top_k" => t.sdr.top_k = parse(key, value)?,
            "sdr.apply_to_candidates" => t.sdr.apply_to_candidates = parse_bool(key, value)?,
            "saliency.sigma" => t.pipeline.sigma = parse(key, value)?,
            "saliency.delta" => t.pipeline.delta = parse(key, value)?,
            "saliency.filtering" => t.pipeline.filtering = parse_bool(key, value)?,
            "saliency.prompt" => t.pipeline.prompt = value.replace("\\n", "\n"),
            "data.n_train" => d.n_train = parse(key, value)?,
            "data.n_eval" => d.n_eval = parse(key, value)?,
            "data.pool_size" => d.pool_size = parse(key, value)?,
            "data.classes" => d.classes = parse(key, value)?,
            "data.seed" => d.seed = parse(key, value)?,
            "data.t2i_fraction" => d.t2i_fraction = parse(key, value)?,
            "data.image_size" => d.image_size = parse(key, value)?,
            "data.noise" => d.noise = parse(key, value)?,
            "data.min_scale" => d.min_scale = parse(key, value)?,
            "data.max_scale" => d.max_scale = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a form [`parse_pairs`] reads back.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let t = &self.train;
        let d = &self.data;
        let m = &t.model;
        let kv: Vec<(&str, String)> = vec![
            ("train.steps", t.steps.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.learning_rate", t.learning_rate.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.mode", t.mode.to_string()),
            ("model.image_height", m.image_height.to_string()),
            ("model.image_width", m.image_width.to_string()),
            ("model.channels", m.channels.to_string()),
            ("model.patch_size", m.patch_size.to_string()),
            ("model.layers", m.layers.to_string()),
            ("model.width", m.width.to_string()),
            ("model.heads", m.heads.to_string()),
            ("model.ffn_width", m.ffn_width.to_string()),
            ("model.vocab_size", m.vocab_size.to_string()),
            ("model.max_len", m.max_len.to_string()),
            ("loss.alpha", t.loss.alpha.to_string()),
            ("loss.beta", t.loss.beta.to_string()),
            ("loss.tau_con", t.loss.tau_con.to_string()),
            ("loss.layers", t.loss.layers.to_string()),
            ("sdr.tau", t.sdr.tau.to_string()),
            ("sdr.fusion", t.sdr.fusion.to_string()),
            ("sdr.top_k", t.sdr.top_k.to_string()),
            ("sdr.apply_to_candidates", t.sdr.apply_to_candidates.to_string()),
            ("saliency.sigma", t.pipeline.sigma.to_string()),
            ("saliency.delta", t.pipeline.delta.to_string()),
            ("saliency.filtering", t.pipeline.filtering.to_string()),
            ("saliency.prompt", format!("\"{}\"", t.pipeline.prompt.replace('\n', "\\n"))),
            ("data.n_train", d.n_train.to_string()),
            ("data.n_eval", d.n_eval.to_string()),
            ("data.pool_size", d.pool_size.to_string()),
            ("data.classes", d.classes.to_string()),
            ("data.seed", d.seed.to_string()),
            ("data.t2i_fraction", d.t2i_fraction.to_string()),
            ("data.image_size", d.image_size.to_string()),
            ("data.noise", d.noise.to_string()),
            ("data.min_scale", d.min_scale.to_string()),
            ("data.max_scale", d.max_scale.to_string()),
        ];
        kv.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// The resolved configuration as config-file text.
    pub fn render(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::AlignmentLayers;
    use crate::sdr::{FusionMode, TopK};
    use crate::train::Mode;

    #[test]
    fn parses_and_applies_keys() {
        let text = "# run\ntrain.steps = 20\n\nloss.layers = all\nsdr.top_k = 10\nsdr.fusion = concat_project\ntrain.mode = sga\n";
        let mut cfg = RunConfig::default();
        cfg.apply_all(&parse_pairs(text).unwrap()).unwrap();
        assert_eq!(cfg.train.steps, 20);
        assert_eq!(cfg.train.loss.layers, AlignmentLayers::All);
        assert_eq!(cfg.train.sdr.top_k, TopK::K(10));
        assert_eq!(cfg.train.sdr.fusion, FusionMode::ConcatProject);
        assert_eq!(cfg.train.mode, Mode::SgaOnly);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let mut cfg = RunConfig::default();
        assert!(matches!(cfg.apply("train.stpes", "3"), Err(Error::Config(_))));
        assert!(cfg.apply("train.steps", "many").is_err());
        assert!(cfg.apply("saliency.filtering", "maybe").is_err());
        assert!(parse_pairs("just words").is_err());
    }

    #[test]
    fn later_assignments_override_earlier_ones() {
        let mut cfg = RunConfig::default();
        let mut pairs = parse_pairs("train.seed = 3").unwrap();
        pairs.push(("train.seed".into(), "9".into()));
        cfg.apply_all(&pairs).unwrap();
        assert_eq!(cfg.train.seed, 9);
    }

    #[test]
    fn rendered_config_reads_back_identically() {
        let mut cfg = RunConfig::default();
        cfg.apply("loss.alpha", "2.5").unwrap();
        cfg.apply("data.pool_size", "16").unwrap();
        let mut back = RunConfig::default();
        back.apply_all(&parse_pairs(&cfg.render()).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
