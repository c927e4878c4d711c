//! Declarative model descriptions covering every encoder/decoder variant,
//! addressable by a compact variant name such as `E^{t1,t2}E^{pet}-D^{t2}D^{pet}`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::volume::{Modality, Target};

/// Per-level filter counts of the encoder dense blocks (finest level first).
pub const ENCODER_GROWTH: [usize; 4] = [12, 28, 44, 60];
/// Default decoder growth, bottleneck side first.
pub const DECODER_GROWTH: [usize; 4] = [44, 28, 12, 12];
/// Encoder growth mirrored onto the decoder, bottleneck side first.
pub const MIRRORED_DECODER_GROWTH: [usize; 4] = [60, 44, 28, 12];
pub const INITIAL_FILTERS: usize = 48;
/// Anisotropic schedule: the second level keeps the slice axis.
pub const POOLING_SCHEDULE: [[usize; 3]; 4] = [[2, 2, 2], [2, 2, 1], [2, 2, 2], [2, 2, 2]];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Swish,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseBlockSpec {
    #[serde(default = "default_layers")]
    pub n_layers: usize,
    pub growth: usize,
    #[serde(default = "default_kernel")]
    pub kernel: [usize; 3],
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "default_compression")]
    pub compression: f64,
}

fn default_layers() -> usize {
    3
}
fn default_kernel() -> [usize; 3] {
    [3, 3, 3]
}
fn default_compression() -> f64 {
    0.5
}

impl DenseBlockSpec {
    pub fn with_growth(growth: usize) -> Self {
        DenseBlockSpec {
            n_layers: default_layers(),
            growth,
            kernel: default_kernel(),
            activation: Activation::Swish,
            compression: default_compression(),
        }
    }

    /// Channels leaving the block after the 1×1×1 compression.
    pub fn out_channels(&self) -> usize {
        ((self.n_layers * self.growth) as f64 * self.compression).floor() as usize
    }

    fn validate(&self) -> Result<(), ModelError> {
        if self.n_layers == 0 || self.growth == 0 {
            return Err(ModelError::InvalidConfig("dense block needs ≥1 layer and growth ≥1".into()));
        }
        if self.kernel.iter().any(|k| k % 2 == 0) {
            return Err(ModelError::InvalidConfig(format!("kernel {:?} must be odd", self.kernel)));
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) || self.out_channels() == 0 {
            return Err(ModelError::InvalidConfig(format!("compression {} out of range", self.compression)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    /// Modalities fused at the input level, in channel order.
    pub inputs: Vec<Modality>,
    #[serde(default = "default_initial_filters")]
    pub initial_filters: usize,
    #[serde(default = "default_encoder_blocks")]
    pub blocks: Vec<DenseBlockSpec>,
    #[serde(default = "default_pooling")]
    pub pooling: Vec<[usize; 3]>,
}

fn default_initial_filters() -> usize {
    INITIAL_FILTERS
}
fn default_encoder_blocks() -> Vec<DenseBlockSpec> {
    ENCODER_GROWTH.iter().map(|&g| DenseBlockSpec::with_growth(g)).collect()
}
fn default_pooling() -> Vec<[usize; 3]> {
    POOLING_SCHEDULE.to_vec()
}

impl EncoderSpec {
    pub fn new(inputs: Vec<Modality>) -> Self {
        EncoderSpec {
            inputs,
            initial_filters: INITIAL_FILTERS,
            blocks: default_encoder_blocks(),
            pooling: default_pooling(),
        }
    }

    /// Product of pooling factors per axis.
    pub fn total_pooling(&self) -> [usize; 3] {
        self.pooling.iter().fold([1, 1, 1], |acc, p| [acc[0] * p[0], acc[1] * p[1], acc[2] * p[2]])
    }

    pub fn skip_channels(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.out_channels()).collect()
    }

    pub fn latent_channels(&self) -> usize {
        self.blocks.last().map_or(self.initial_filters, |b| b.out_channels())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecoderTarget {
    T2,
    PET,
    /// One decoder with an output channel per target (T2, then PET).
    SHARED,
}

impl DecoderTarget {
    pub fn targets(self) -> Vec<Target> {
        match self {
            DecoderTarget::T2 => vec![Target::T2],
            DecoderTarget::PET => vec![Target::PET],
            DecoderTarget::SHARED => vec![Target::T2, Target::PET],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipFusion {
    Concat,
    /// Elementwise product of the encoders' skips, except channel
    /// concatenation at the finest level.
    MultiplyExceptFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleMode {
    #[default]
    Nearest,
    TransposedConv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderSpec {
    pub target: DecoderTarget,
    /// Dense blocks ordered from the bottleneck towards full resolution.
    #[serde(default = "default_decoder_blocks")]
    pub blocks: Vec<DenseBlockSpec>,
    pub skip_fusion: SkipFusion,
    #[serde(default)]
    pub upsample: UpsampleMode,
}

fn default_decoder_blocks() -> Vec<DenseBlockSpec> {
    DECODER_GROWTH.iter().map(|&g| DenseBlockSpec::with_growth(g)).collect()
}

impl DecoderSpec {
    pub fn new(target: DecoderTarget) -> Self {
        DecoderSpec {
            target,
            blocks: default_decoder_blocks(),
            skip_fusion: match target {
                DecoderTarget::SHARED => SkipFusion::MultiplyExceptFirst,
                _ => SkipFusion::Concat,
            },
            upsample: UpsampleMode::Nearest,
        }
    }

    /// Decoder whose growth mirrors the encoder (60, 44, 28, 12).
    pub fn mirrored(target: DecoderTarget) -> Self {
        DecoderSpec {
            blocks: MIRRORED_DECODER_GROWTH.iter().map(|&g| DenseBlockSpec::with_growth(g)).collect(),
            ..Self::new(target)
        }
    }

    pub fn head_channels(&self) -> usize {
        self.target.targets().len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant_name: String,
    pub encoders: Vec<EncoderSpec>,
    pub decoders: Vec<DecoderSpec>,
}

/// Every predefined model variant.
pub const TABLE_VARIANTS: [&str; 12] = [
    "E^{t1,t2}E^{pet}-D^{t2}D^{pet}",
    "E^{t1,t2}E^{pet}-D^{t2,pet}",
    "E^{t1,t2}E^{pet}-D^{t2}",
    "E^{t1,t2}E^{pet}-D^{pet}",
    "E^{t2}-D^{t2}",
    "E^{t1,t2}-D^{t2}",
    "E^{t1}E^{t2}-D^{t2}",
    "E^{pet}-D^{pet}",
    "E^{pet,ct}-D^{pet}",
    "E^{pet}E^{ct}-D^{pet}",
    "E^{t2}E^{pet}-D^{t2}D^{pet}",
    "E^{t2}E^{pet}-D^{t2,pet}",
];

/// Splits `X^{a,b}Y^{c}` into `[(X, [a, b]), (Y, [c])]`.
fn parse_groups(s: &str) -> Option<Vec<(char, Vec<String>)>> {
    let mut out = Vec::new();
    let mut rest = s.trim();
    while !rest.is_empty() {
        let mut chars = rest.chars();
        let letter = chars.next()?;
        let after = chars.as_str().strip_prefix("^{")?;
        let close = after.find('}')?;
        let items = after[..close]
            .split(',')
            .map(|t| t.trim().to_ascii_lowercase())
            .collect::<Vec<_>>();
        if items.iter().any(|t| t.is_empty()) {
            return None;
        }
        out.push((letter.to_ascii_uppercase(), items));
        rest = after[close + 1..].trim_start();
    }
    Some(out)
}

fn modality_token(m: Modality) -> &'static str {
    match m {
        Modality::T1 => "t1",
        Modality::T2 => "t2",
        Modality::CT => "ct",
        Modality::PET => "pet",
        Modality::PROB => "prob",
    }
}

impl ModelConfig {
    /// Expands a variant name into a full configuration with default widths.
    pub fn from_variant(name: &str) -> Result<Self, ModelError> {
        let unknown = || ModelError::UnknownVariant(name.to_string());
        let (enc_part, dec_part) = name.split_once('-').ok_or_else(unknown)?;
        let enc_groups = parse_groups(enc_part).ok_or_else(unknown)?;
        let dec_groups = parse_groups(dec_part).ok_or_else(unknown)?;
        let mut encoders = Vec::new();
        for (letter, items) in enc_groups {
            if letter != 'E' {
                return Err(unknown());
            }
            let inputs = items
                .iter()
                .map(|t| Modality::parse(t).filter(|m| *m != Modality::PROB))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(unknown)?;
            encoders.push(EncoderSpec::new(inputs));
        }
        let mut decoders = Vec::new();
        for (letter, items) in dec_groups {
            if letter != 'D' {
                return Err(unknown());
            }
            let target = match items.iter().map(String::as_str).collect::<Vec<_>>().as_slice() {
                ["t2"] => DecoderTarget::T2,
                ["pet"] => DecoderTarget::PET,
                ["t2", "pet"] | ["pet", "t2"] => DecoderTarget::SHARED,
                _ => return Err(unknown()),
            };
            decoders.push(DecoderSpec::new(target));
        }
        let cfg = ModelConfig {
            variant_name: String::new(),
            encoders,
            decoders,
        };
        let cfg = ModelConfig {
            variant_name: cfg.canonical_name(),
            ..cfg
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Same encoders and decoders with narrower layers: `growth` lists the
    /// encoder growth per level (shallow first; the pooling schedule is cut
    /// to match) and the decoders use it in reverse.
    pub fn narrowed(&self, initial_filters: usize, growth: &[usize], n_layers: usize) -> Result<ModelConfig, ModelError> {
        if growth.is_empty() || growth.len() > POOLING_SCHEDULE.len() {
            return Err(ModelError::InvalidConfig(format!(
                "narrowed config needs 1..={} levels, got {}",
                POOLING_SCHEDULE.len(),
                growth.len()
            )));
        }
        let block = |g: usize| DenseBlockSpec {
            n_layers,
            ..DenseBlockSpec::with_growth(g)
        };
        let mut cfg = self.clone();
        for e in &mut cfg.encoders {
            e.initial_filters = initial_filters;
            e.blocks = growth.iter().map(|&g| block(g)).collect();
            e.pooling = POOLING_SCHEDULE[..growth.len()].to_vec();
        }
        for d in &mut cfg.decoders {
            d.blocks = growth.iter().rev().map(|&g| block(g)).collect();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Variant name derived from the encoder inputs and decoder targets.
    pub fn canonical_name(&self) -> String {
        let mut s = String::new();
        for e in &self.encoders {
            let items: Vec<_> = e.inputs.iter().map(|m| modality_token(*m)).collect();
            let _ = write!(s, "E^{{{}}}", items.join(","));
        }
        s.push('-');
        for d in &self.decoders {
            let t = match d.target {
                DecoderTarget::T2 => "t2",
                DecoderTarget::PET => "pet",
                DecoderTarget::SHARED => "t2,pet",
            };
            let _ = write!(s, "D^{{{t}}}");
        }
        s
    }

    /// All modalities the model consumes, encoder by encoder.
    pub fn input_modalities(&self) -> Vec<Vec<Modality>> {
        self.encoders.iter().map(|e| e.inputs.clone()).collect()
    }

    /// Targets produced by the model, in head order.
    pub fn targets(&self) -> Vec<Target> {
        self.decoders.iter().flat_map(|d| d.target.targets()).collect()
    }

    /// Cumulative pooling factor per axis; patch extents must be multiples.
    pub fn divisibility(&self) -> [usize; 3] {
        self.encoders.first().map_or([1, 1, 1], |e| e.total_pooling())
    }

    /// Index of the encoder that supplies skips to a single-target decoder.
    pub fn encoder_for(&self, target: Target) -> Option<usize> {
        self.encoders.iter().position(|e| e.inputs.contains(&target.modality()))
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let invalid = |m: String| Err(ModelError::InvalidConfig(m));
        if self.encoders.is_empty() || self.encoders.len() > 2 {
            return invalid(format!("expected 1 or 2 encoders, got {}", self.encoders.len()));
        }
        if self.decoders.is_empty() || self.decoders.len() > 2 {
            return invalid(format!("expected 1 or 2 decoders, got {}", self.decoders.len()));
        }
        let first = &self.encoders[0];
        for e in &self.encoders {
            if e.inputs.is_empty() {
                return invalid("encoder without input modalities".into());
            }
            if e.inputs.contains(&Modality::PROB) {
                return invalid("PROB is not an input modality".into());
            }
            let mut sorted = e.inputs.clone();
            sorted.sort();
            sorted.dedup();
            if sorted.len() != e.inputs.len() {
                return invalid("duplicate modality within an encoder".into());
            }
            if e.initial_filters == 0 {
                return invalid("initial_filters must be positive".into());
            }
            if e.blocks.len() != e.pooling.len() {
                return invalid(format!(
                    "pooling schedule length {} differs from {} encoder levels",
                    e.pooling.len(),
                    e.blocks.len()
                ));
            }
            if e.blocks.is_empty() {
                return invalid("encoder needs at least one dense block".into());
            }
            if e.pooling.iter().flatten().any(|&p| p != 1 && p != 2) {
                return invalid("pooling factors must be 1 or 2".into());
            }
            for b in &e.blocks {
                b.validate()?;
            }
            if e.pooling != first.pooling || e.skip_channels() != first.skip_channels() {
                return invalid("encoders must share levels, widths and pooling".into());
            }
        }
        let mut seen = Vec::new();
        for d in &self.decoders {
            if d.blocks.len() != first.blocks.len() {
                return invalid(format!(
                    "decoder has {} levels, encoders have {}",
                    d.blocks.len(),
                    first.blocks.len()
                ));
            }
            for b in &d.blocks {
                b.validate()?;
            }
            for t in d.target.targets() {
                if self.encoder_for(t).is_none() {
                    return Err(ModelError::MissingEncoderFor(t));
                }
                if seen.contains(&t) {
                    return invalid(format!("target {t} produced by more than one decoder"));
                }
                seen.push(t);
            }
            if d.skip_fusion == SkipFusion::MultiplyExceptFirst && d.target != DecoderTarget::SHARED {
                return invalid("multiplicative skip fusion is only defined for the shared decoder".into());
            }
        }
        Ok(())
    }

    /// Parses either a `{"variant_name": ...}` shortcut or a full explicit
    /// configuration.
    pub fn from_json(value: &serde_json::Value) -> Result<Self, ModelError> {
        let obj = value
            .as_object()
            .ok_or_else(|| ModelError::InvalidConfig("model config must be a JSON object".into()))?;
        if obj.contains_key("encoders") || obj.contains_key("decoders") {
            #[derive(Deserialize)]
            struct Explicit {
                variant_name: Option<String>,
                encoders: Vec<EncoderSpec>,
                decoders: Vec<DecoderSpec>,
            }
            let e: Explicit = serde_json::from_value(value.clone())
                .map_err(|err| ModelError::InvalidConfig(err.to_string()))?;
            let mut cfg = ModelConfig {
                variant_name: String::new(),
                encoders: e.encoders,
                decoders: e.decoders,
            };
            cfg.variant_name = e.variant_name.unwrap_or_else(|| cfg.canonical_name());
            cfg.validate()?;
            Ok(cfg)
        } else {
            let name = obj
                .get("variant_name")
                .and_then(|v| v.as_str())
                .ok_or_else(|| ModelError::InvalidConfig("missing variant_name".into()))?;
            ModelConfig::from_variant(name)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_table_variants_parse_and_roundtrip() {
        for name in TABLE_VARIANTS {
            let cfg = ModelConfig::from_variant(name).unwrap();
            assert_eq!(cfg.variant_name, name);
            assert_eq!(cfg.canonical_name(), name);
        }
    }

    #[test]
    fn proposed_variant_structure() {
        let cfg = ModelConfig::from_variant("E^{t1,t2}E^{pet}-D^{t2}D^{pet}").unwrap();
        assert_eq!(cfg.encoders[0].inputs, vec![Modality::T1, Modality::T2]);
        assert_eq!(cfg.encoders[1].inputs, vec![Modality::PET]);
        assert_eq!(cfg.targets(), vec![Target::T2, Target::PET]);
        assert_eq!(cfg.divisibility(), [16, 16, 8]);
        assert_eq!(cfg.encoder_for(Target::PET), Some(1));
    }

    #[test]
    fn decoder_without_supplying_encoder_is_rejected() {
        assert!(matches!(
            ModelConfig::from_variant("E^{t1,t2}-D^{pet}"),
            Err(ModelError::MissingEncoderFor(Target::PET))
        ));
        assert!(matches!(
            ModelConfig::from_variant("E^{pet}-D^{t2,pet}"),
            Err(ModelError::MissingEncoderFor(Target::T2))
        ));
    }

    #[test]
    fn malformed_names() {
        for bad in ["", "E^{t2}", "E^{t2}-X^{t2}", "E^{mr}-D^{t2}", "E^{t2}-D^{ct}", "E^{}-D^{t2}"] {
            assert!(ModelConfig::from_variant(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn dense_block_compression_rounds_down() {
        assert_eq!(DenseBlockSpec::with_growth(12).out_channels(), 18);
        assert_eq!(DenseBlockSpec::with_growth(60).out_channels(), 90);
        let odd = DenseBlockSpec {
            growth: 5,
            ..DenseBlockSpec::with_growth(5)
        };
        assert_eq!(odd.out_channels(), 7);
    }

    #[test]
    fn json_shortcut_and_explicit_forms() {
        let short = serde_json::json!({"variant_name": "E^{t2}-D^{t2}"});
        let cfg = ModelConfig::from_json(&short).unwrap();
        let explicit = serde_json::to_value(&cfg).unwrap();
        assert_eq!(ModelConfig::from_json(&explicit).unwrap(), cfg);
        let bad_pool = serde_json::json!({
            "encoders": [{"inputs": ["T2"], "pooling": [[3,2,2],[2,2,1],[2,2,2],[2,2,2]]}],
            "decoders": [{"target": "T2", "skip_fusion": "concat"}]
        });
        assert!(ModelConfig::from_json(&bad_pool).is_err());
    }
}
