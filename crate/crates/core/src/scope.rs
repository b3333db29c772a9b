//! Key patterns and merge-scope filters.
//!
//! Patterns are globs over full parameter names: `*` matches any run of
//! characters (dots included) and `?` matches one character. A layer pattern
//! additionally contains exactly one `#`, which captures the decimal layer
//! index, e.g. `*layers.#.*`.

use std::fmt;
use std::str::FromStr;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn glob_to_regex(pattern: &str, allow_capture: bool) -> Result<(Regex, usize)> {
    let mut re = String::with_capacity(pattern.len() * 2 + 2);
    re.push('^');
    let mut captures = 0;
    for c in pattern.chars() {
        match c {
            '*' => re.push_str(".*"),
            '?' => re.push('.'),
            '#' if allow_capture => {
                captures += 1;
                re.push_str(r"(\d+)");
            }
            c => re.push_str(&regex::escape(&c.to_string())),
        }
    }
    re.push('$');
    let compiled = Regex::new(&re).map_err(|e| Error::Config(format!("bad pattern `{pattern}`: {e}")))?;
    Ok((compiled, captures))
}

/// A compiled glob over parameter names.
#[derive(Clone, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct GlobPattern {
    source: String,
    regex: Regex,
}

impl GlobPattern {
    pub fn new(pattern: &str) -> Result<Self> {
        let (regex, _) = glob_to_regex(pattern, false)?;
        Ok(Self {
            source: pattern.to_string(),
            regex,
        })
    }

    pub fn matches(&self, key: &str) -> bool {
        self.regex.is_match(key)
    }

    pub fn as_str(&self) -> &str {
        &self.source
    }
}

impl PartialEq for GlobPattern {
    fn eq(&self, other: &Self) -> bool {
        self.source == other.source
    }
}

impl fmt::Debug for GlobPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.source)
    }
}

impl TryFrom<String> for GlobPattern {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        GlobPattern::new(&s)
    }
}

impl From<GlobPattern> for String {
    fn from(p: GlobPattern) -> String {
        p.source
    }
}

/// Glob with one `#` placeholder capturing a layer index.
#[derive(Clone, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct LayerPattern {
    source: String,
    regex: Regex,
}

impl LayerPattern {
    pub fn new(pattern: &str) -> Result<Self> {
        let (regex, captures) = glob_to_regex(pattern, true)?;
        if captures != 1 {
            return Err(Error::Config(format!(
                "layer pattern `{pattern}` must contain exactly one `#`"
            )));
        }
        Ok(Self {
            source: pattern.to_string(),
            regex,
        })
    }

    /// Parsed layer index, if the key matches.
    pub fn layer_of(&self, key: &str) -> Option<u32> {
        self.regex.captures(key)?.get(1)?.as_str().parse().ok()
    }

    pub fn as_str(&self) -> &str {
        &self.source
    }
}

impl Default for LayerPattern {
    fn default() -> Self {
        LayerPattern::new(DEFAULT_LAYER_PATTERN).expect("default pattern compiles")
    }
}

impl PartialEq for LayerPattern {
    fn eq(&self, other: &Self) -> bool {
        self.source == other.source
    }
}

impl fmt::Debug for LayerPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.source)
    }
}

impl TryFrom<String> for LayerPattern {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        LayerPattern::new(&s)
    }
}

impl From<LayerPattern> for String {
    fn from(p: LayerPattern) -> String {
        p.source
    }
}

pub const DEFAULT_LAYER_PATTERN: &str = "*layers.#.*";

const EMBED: &str = "*embed_tokens*";
const LM_HEAD: &str = "*lm_head*";
const LAYERS: &str = "*layers.*";
const FINAL_NORM: &str = "*norm.weight";

/// Named merge scopes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScopePreset {
    Full,
    EmbedOnly,
    /// Transformer layers and the final norm; no embedding, no output head.
    LlmOnly,
    LmheadOnly,
    /// Embedding, layers `lo..=hi`, and output head.
    Layers(u32, u32),
}

impl fmt::Display for ScopePreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScopePreset::Full => f.write_str("full"),
            ScopePreset::EmbedOnly => f.write_str("embed_only"),
            ScopePreset::LlmOnly => f.write_str("llm_only"),
            ScopePreset::LmheadOnly => f.write_str("lmhead_only"),
            ScopePreset::Layers(lo, hi) => write!(f, "layers:{lo}-{hi}"),
        }
    }
}

impl FromStr for ScopePreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown scope preset `{s}`"));
        match s {
            "full" => Ok(ScopePreset::Full),
            "embed_only" => Ok(ScopePreset::EmbedOnly),
            "llm_only" => Ok(ScopePreset::LlmOnly),
            "lmhead_only" => Ok(ScopePreset::LmheadOnly),
            _ => {
                let range = s.strip_prefix("layers:").ok_or_else(bad)?;
                let (lo, hi) = range.split_once('-').ok_or_else(bad)?;
                let lo: u32 = lo.trim().parse().map_err(|_| bad())?;
                let hi: u32 = hi.trim().parse().map_err(|_| bad())?;
                if lo > hi {
                    return Err(Error::Config(format!("empty layer range in `{s}`")));
                }
                Ok(ScopePreset::Layers(lo, hi))
            }
        }
    }
}

impl Serialize for ScopePreset {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ScopePreset {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Decides which aligned backbone tensors are merged.
///
/// A key is in scope when it matches some include pattern, matches no
/// exclude pattern, and, if a layer range is set, either its parsed layer
/// index lies in the range or it matches a range-exempt pattern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScopeSpec", into = "ScopeSpec")]
pub struct ScopeFilter {
    pub preset: ScopePreset,
    pub include: Vec<GlobPattern>,
    pub exclude: Vec<GlobPattern>,
    pub layer_range: Option<(u32, u32)>,
    pub layer_pattern: LayerPattern,
    pub range_exempt: Vec<GlobPattern>,
}

fn globs(patterns: &[&str]) -> Vec<GlobPattern> {
    patterns
        .iter()
        .map(|p| GlobPattern::new(p).expect("preset pattern compiles"))
        .collect()
}

impl ScopeFilter {
    pub fn preset(preset: ScopePreset) -> Self {
        let (include, layer_range, exempt): (&[&str], _, &[&str]) = match preset {
            ScopePreset::Full => (&["*"], None, &[]),
            ScopePreset::EmbedOnly => (&[EMBED], None, &[]),
            ScopePreset::LlmOnly => (&[LAYERS, FINAL_NORM], None, &[]),
            ScopePreset::LmheadOnly => (&[LM_HEAD], None, &[]),
            ScopePreset::Layers(lo, hi) => (&[EMBED, LAYERS, LM_HEAD], Some((lo, hi)), &[EMBED, LM_HEAD]),
        };
        Self {
            preset,
            include: globs(include),
            exclude: Vec::new(),
            layer_range,
            layer_pattern: LayerPattern::default(),
            range_exempt: globs(exempt),
        }
    }

    pub fn full() -> Self {
        Self::preset(ScopePreset::Full)
    }

    /// Scope admitting nothing: every tensor passes through from the anchor.
    pub fn empty() -> Self {
        Self {
            include: Vec::new(),
            ..Self::full()
        }
    }

    pub fn admits(&self, key: &str) -> bool {
        if !self.include.iter().any(|p| p.matches(key)) {
            return false;
        }
        if self.exclude.iter().any(|p| p.matches(key)) {
            return false;
        }
        match self.layer_range {
            None => true,
            Some((lo, hi)) => {
                if self.range_exempt.iter().any(|p| p.matches(key)) {
                    return true;
                }
                matches!(self.layer_pattern.layer_of(key), Some(l) if (lo..=hi).contains(&l))
            }
        }
    }
}

impl Default for ScopeFilter {
    fn default() -> Self {
        Self::full()
    }
}

/// Serialized form of [`ScopeFilter`]: a preset plus optional overrides.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScopeSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<ScopePreset>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub include: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exclude: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_range: Option<(u32, u32)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_pattern: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range_exempt: Option<Vec<String>>,
}

fn compile_all(patterns: &[String]) -> Result<Vec<GlobPattern>> {
    patterns.iter().map(|p| GlobPattern::new(p)).collect()
}

impl TryFrom<ScopeSpec> for ScopeFilter {
    type Error = Error;

    fn try_from(spec: ScopeSpec) -> Result<Self> {
        let mut f = ScopeFilter::preset(spec.preset.unwrap_or(ScopePreset::Full));
        if let Some(p) = spec.include {
            f.include = compile_all(&p)?;
        }
        if let Some(p) = spec.exclude {
            f.exclude = compile_all(&p)?;
        }
        if let Some((lo, hi)) = spec.layer_range {
            if lo > hi {
                return Err(Error::Config(format!("empty layer range ({lo}, {hi})")));
            }
            f.layer_range = Some((lo, hi));
        }
        if let Some(p) = spec.layer_pattern {
            f.layer_pattern = LayerPattern::new(&p)?;
        }
        if let Some(p) = spec.range_exempt {
            f.range_exempt = compile_all(&p)?;
        }
        Ok(f)
    }
}

impl From<ScopeFilter> for ScopeSpec {
    fn from(f: ScopeFilter) -> Self {
        let base = ScopeFilter::preset(f.preset);
        let strings = |v: &[GlobPattern]| v.iter().map(|p| p.as_str().to_string()).collect::<Vec<_>>();
        ScopeSpec {
            preset: Some(f.preset),
            include: (f.include != base.include).then(|| strings(&f.include)),
            exclude: (f.exclude != base.exclude).then(|| strings(&f.exclude)),
            layer_range: if f.layer_range != base.layer_range { f.layer_range } else { None },
            layer_pattern: (f.layer_pattern != base.layer_pattern)
                .then(|| f.layer_pattern.as_str().to_string()),
            range_exempt: (f.range_exempt != base.range_exempt).then(|| strings(&f.range_exempt)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const KEYS: &[&str] = &[
        "model.embed_tokens.weight",
        "model.layers.0.self_attn.q_proj.weight",
        "model.layers.7.mlp.down_proj.weight",
        "model.layers.8.input_layernorm.weight",
        "model.layers.31.mlp.up_proj.weight",
        "model.norm.weight",
        "lm_head.weight",
    ];

    fn admitted(f: &ScopeFilter) -> Vec<&'static str> {
        KEYS.iter().copied().filter(|k| f.admits(k)).collect()
    }

    #[test]
    fn glob_semantics() {
        let g = GlobPattern::new("model.layers.?.mlp*").unwrap();
        assert!(g.matches("model.layers.7.mlp.down_proj.weight"));
        assert!(!g.matches("model.layers.31.mlp.up_proj.weight"));
        assert!(!GlobPattern::new("layers").unwrap().matches("model.layers.0"));
    }

    #[test]
    fn layer_pattern_capture() {
        let p = LayerPattern::default();
        assert_eq!(p.layer_of("model.layers.31.mlp.up_proj.weight"), Some(31));
        assert_eq!(p.layer_of("model.norm.weight"), None);
        assert!(LayerPattern::new("*layers.*").is_err());
    }

    #[test]
    fn presets() {
        assert_eq!(admitted(&ScopeFilter::full()).len(), KEYS.len());
        assert_eq!(admitted(&ScopeFilter::empty()).len(), 0);
        assert_eq!(
            admitted(&ScopeFilter::preset(ScopePreset::EmbedOnly)),
            vec!["model.embed_tokens.weight"]
        );
        assert_eq!(admitted(&ScopeFilter::preset(ScopePreset::LmheadOnly)), vec!["lm_head.weight"]);
        assert_eq!(
            admitted(&ScopeFilter::preset(ScopePreset::LlmOnly)),
            vec![
                "model.layers.0.self_attn.q_proj.weight",
                "model.layers.7.mlp.down_proj.weight",
                "model.layers.8.input_layernorm.weight",
                "model.layers.31.mlp.up_proj.weight",
                "model.norm.weight",
            ]
        );
        assert_eq!(
            admitted(&ScopeFilter::preset(ScopePreset::Layers(0, 7))),
            vec![
                "model.embed_tokens.weight",
                "model.layers.0.self_attn.q_proj.weight",
                "model.layers.7.mlp.down_proj.weight",
                "lm_head.weight",
            ]
        );
    }

    #[test]
    fn exclude_wins() {
        let mut f = ScopeFilter::full();
        f.exclude = vec![GlobPattern::new("*norm*").unwrap()];
        assert!(!f.admits("model.norm.weight"));
        assert!(f.admits("lm_head.weight"));
    }

    #[test]
    fn preset_strings_roundtrip() {
        for s in ["full", "embed_only", "llm_only", "lmhead_only", "layers:24-31"] {
            assert_eq!(s.parse::<ScopePreset>().unwrap().to_string(), s);
        }
        assert!("layers:9-3".parse::<ScopePreset>().is_err());
    }

    #[test]
    fn serde_keeps_overrides_only() {
        let f = ScopeFilter::preset(ScopePreset::EmbedOnly);
        let json = serde_json::to_value(&f).unwrap();
        assert_eq!(json, serde_json::json!({"preset": "embed_only"}));

        let g: ScopeFilter =
            serde_json::from_value(serde_json::json!({"preset": "full", "exclude": ["lm_head*"]})).unwrap();
        assert!(!g.admits("lm_head.weight"));
        let back: ScopeFilter = serde_json::from_value(serde_json::to_value(&g).unwrap()).unwrap();
        assert_eq!(back, g);
    }
}
