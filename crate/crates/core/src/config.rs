//! Architecture and training hyperparameters.
//!
//! Both configs serialize to a flat `key = value` text format, one entry per
//! line, keys equal to the field names. Lists are comma separated
//! (`stage_depths = 12,6,3`). Lines starting with `#` are comments.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SvfapError};

/// The two encoder presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    Small,
    Base,
}

impl FromStr for Preset {
    type Err = SvfapError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "TPSBT-S" | "S" | "SMALL" => Ok(Preset::Small),
            "TPSBT-B" | "B" | "BASE" => Ok(Preset::Base),
            _ => Err(SvfapError::InvalidArgument(format!(
                "unknown preset '{s}' (expected TPSBT-S or TPSBT-B)"
            ))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Small => "TPSBT-S",
            Preset::Base => "TPSBT-B",
        })
    }
}

/// Encoder variants of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Temporal pyramid plus spatial bottleneck stages.
    Full,
    /// Plain ViT: no downsampling, standard blocks everywhere.
    VitBaseline,
    /// Temporal downsampling with standard blocks in stages 2 and 3.
    TpOnly,
    /// Spatial bottleneck stages without temporal downsampling.
    SbtOnly,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::VitBaseline,
        Variant::TpOnly,
        Variant::SbtOnly,
        Variant::Full,
    ];

    pub fn has_temporal_pyramid(self) -> bool {
        matches!(self, Variant::Full | Variant::TpOnly)
    }

    pub fn has_bottleneck(self) -> bool {
        matches!(self, Variant::Full | Variant::SbtOnly)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::VitBaseline => "vit_baseline",
            Variant::TpOnly => "tp_only",
            Variant::SbtOnly => "sbt_only",
        }
    }
}

impl FromStr for Variant {
    type Err = SvfapError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "vit_baseline" | "vit" => Ok(Variant::VitBaseline),
            "tp_only" | "tp" => Ok(Variant::TpOnly),
            "sbt_only" | "sbt" => Ok(Variant::SbtOnly),
            _ => Err(SvfapError::InvalidArgument(format!("unknown variant '{s}'"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Temporal downsampling operator between stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Downsample {
    Conv,
    Avg,
    Max,
}

impl FromStr for Downsample {
    type Err = SvfapError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv" => Ok(Downsample::Conv),
            "avg" => Ok(Downsample::Avg),
            "max" => Ok(Downsample::Max),
            _ => Err(SvfapError::InvalidArgument(format!(
                "unknown downsample kind '{s}'"
            ))),
        }
    }
}

impl fmt::Display for Downsample {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Downsample::Conv => "conv",
            Downsample::Avg => "avg",
            Downsample::Max => "max",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub embed_dim: usize,
    pub stage_depths: [usize; 3],
    pub bottleneck_tokens: usize,
    pub temporal_stride: usize,
    pub masking_ratio: f64,
    /// (pt, ph, pw)
    pub patch: [usize; 3],
    /// (T, H, W)
    pub input: [usize; 3],
    pub heads: usize,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    /// Hidden width of the spatial-attention MLP that scores tokens
    /// against bottleneck slots.
    pub spatial_hidden: usize,
    /// Normalize spatial-attention scores with a softmax over tokens.
    pub spatial_softmax: bool,
    pub downsample: Downsample,
    pub variant: Variant,
    /// Sum all three stage outputs before the decoder.
    pub fusion_pretrain: bool,
    /// Pool the fused multi-scale feature instead of the last stage.
    pub fusion_finetune: bool,
}

/// A single failed invariant.
#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub field: &'static str,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({})", self.message, self.field)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConfigViolations(pub Vec<Violation>);

impl fmt::Display for ConfigViolations {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigViolations {}

impl ArchConfig {
    pub fn preset(preset: Preset) -> Self {
        let (embed_dim, stage_depths) = match preset {
            Preset::Small => (384, [8, 4, 2]),
            Preset::Base => (512, [12, 6, 3]),
        };
        ArchConfig {
            embed_dim,
            stage_depths,
            bottleneck_tokens: 8,
            temporal_stride: 2,
            masking_ratio: 0.9,
            patch: [2, 16, 16],
            input: [16, 160, 160],
            heads: embed_dim / 64,
            decoder_dim: 384,
            decoder_depth: 4,
            decoder_heads: 6,
            spatial_hidden: embed_dim,
            spatial_softmax: false,
            downsample: Downsample::Conv,
            variant: Variant::Full,
            fusion_pretrain: true,
            fusion_finetune: false,
        }
    }

    /// Tiny geometry for gradient checks and desk-scale training.
    pub fn tiny() -> Self {
        ArchConfig {
            embed_dim: 16,
            stage_depths: [1, 1, 1],
            bottleneck_tokens: 2,
            temporal_stride: 2,
            masking_ratio: 0.5,
            patch: [2, 4, 4],
            input: [8, 8, 8],
            heads: 2,
            decoder_dim: 16,
            decoder_depth: 1,
            decoder_heads: 2,
            spatial_hidden: 16,
            spatial_softmax: false,
            downsample: Downsample::Conv,
            variant: Variant::Full,
            fusion_pretrain: true,
            fusion_finetune: false,
        }
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        ArchConfig {
            variant,
            ..self.clone()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// Token lattice (t, h, w) after patch embedding.
    pub fn grid(&self) -> Grid {
        Grid {
            t: self.input[0] / self.patch[0],
            h: self.input[1] / self.patch[1],
            w: self.input[2] / self.patch[2],
        }
    }

    /// Flattened length of one patch: pt·ph·pw·3.
    pub fn patch_dim(&self) -> usize {
        self.patch.iter().product::<usize>() * 3
    }

    /// Spatial tokens per slice kept visible at the configured masking ratio.
    pub fn visible_spatial(&self) -> usize {
        visible_count(self.grid().spatial(), self.masking_ratio)
    }

    /// Temporal length of each stage, honoring the variant's pyramid.
    pub fn stage_lengths(&self) -> [usize; 3] {
        let t1 = self.grid().t;
        if self.variant.has_temporal_pyramid() {
            let k = self.temporal_stride;
            [t1, t1 / k, t1 / (k * k)]
        } else {
            [t1; 3]
        }
    }

    /// Standard blocks substituted for an `m`-block bottleneck stage in the
    /// variants without bottlenecks, so that parameter counts stay comparable.
    pub fn standard_blocks_for_stage(m: usize) -> usize {
        // An SBT block carries 16C² weights against 12C² for a standard block.
        (m * 4 + 1) / 3
    }

    pub fn validate(&self) -> std::result::Result<(), ConfigViolations> {
        let mut out = Vec::new();
        let mut bad = |field: &'static str, message: String| {
            out.push(Violation { field, message })
        };
        let positives: [(&'static str, usize); 11] = [
            ("embed_dim", self.embed_dim),
            ("stage_depths", self.stage_depths.iter().copied().min().unwrap_or(0)),
            ("bottleneck_tokens", self.bottleneck_tokens),
            ("temporal_stride", self.temporal_stride),
            ("patch", self.patch.iter().copied().min().unwrap_or(0)),
            ("input", self.input.iter().copied().min().unwrap_or(0)),
            ("heads", self.heads),
            ("decoder_dim", self.decoder_dim),
            ("decoder_depth", self.decoder_depth),
            ("decoder_heads", self.decoder_heads),
            ("spatial_hidden", self.spatial_hidden),
        ];
        for (field, v) in positives {
            if v == 0 {
                bad(field, format!("{field} must be positive"));
            }
        }
        if !out.is_empty() {
            return Err(ConfigViolations(out));
        }
        let mut bad = |field: &'static str, message: String| {
            out.push(Violation { field, message })
        };
        let [t, h, w] = self.input;
        let [pt, ph, pw] = self.patch;
        if t % pt != 0 {
            bad("input", format!("T not divisible by pt ({t} % {pt} != 0)"));
        }
        if h % ph != 0 {
            bad("input", format!("H not divisible by ph ({h} % {ph} != 0)"));
        }
        if w % pw != 0 {
            bad("input", format!("W not divisible by pw ({w} % {pw} != 0)"));
        }
        if self.variant.has_temporal_pyramid() {
            let k = self.temporal_stride;
            let t1 = t / pt;
            if t1 < k * k {
                bad(
                    "temporal_stride",
                    format!(
                        "stage-3 temporal length < 1 (T/(pt·k²) = {})",
                        t as f64 / (pt * k * k) as f64
                    ),
                );
            } else if t1 % (k * k) != 0 {
                bad(
                    "temporal_stride",
                    format!("stage temporal lengths not divisible by k ({t1} frames-slices, k = {k})"),
                );
            }
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            bad("heads", "embed_dim not divisible by heads".into());
        }
        if !self.decoder_dim.is_multiple_of(self.decoder_heads) {
            bad("decoder_heads", "decoder_dim not divisible by decoder_heads".into());
        }
        if !self.embed_dim.is_multiple_of(2) {
            bad("embed_dim", "embed_dim must be even for sinusoidal positions".into());
        }
        if !self.decoder_dim.is_multiple_of(2) {
            bad("decoder_dim", "decoder_dim must be even for sinusoidal positions".into());
        }
        if !(0.0..1.0).contains(&self.masking_ratio) {
            bad(
                "masking_ratio",
                format!("masking_ratio {} outside [0, 1)", self.masking_ratio),
            );
        } else if h % ph == 0 && w % pw == 0 && self.visible_spatial() < 1 {
            bad(
                "masking_ratio",
                "masking_ratio leaves no visible spatial token".into(),
            );
        }
        if out.is_empty() {
            Ok(())
        } else {
            Err(ConfigViolations(out))
        }
    }
}

/// round(S·(1−ρ)), the per-slice visible token count.
pub fn visible_count(spatial: usize, masking_ratio: f64) -> usize {
    (spatial as f64 * (1.0 - masking_ratio)).round() as usize
}

/// Token lattice shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Grid {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Grid {
    pub fn new(t: usize, h: usize, w: usize) -> Self {
        Grid { t, h, w }
    }

    pub fn spatial(&self) -> usize {
        self.h * self.w
    }

    pub fn len(&self) -> usize {
        self.t * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub seed: u64,
    /// Temporal stride used when sampling frames into a clip.
    pub sample_stride: usize,
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        TrainConfig {
            base_lr: 3e-4,
            batch_size: 256,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            epochs: 100,
            warmup_epochs: 5,
            seed: 0,
            sample_stride: 4,
        }
    }

    pub fn finetune() -> Self {
        TrainConfig {
            base_lr: 1e-3,
            batch_size: 96,
            beta2: 0.999,
            ..Self::pretrain()
        }
    }

    pub fn validate(&self) -> std::result::Result<(), ConfigViolations> {
        let mut out = Vec::new();
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            out.push(Violation {
                field: "base_lr",
                message: "base_lr must be positive".into(),
            });
        }
        if self.batch_size == 0 {
            out.push(Violation {
                field: "batch_size",
                message: "batch_size must be positive".into(),
            });
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            out.push(Violation {
                field: "weight_decay",
                message: "weight_decay must be finite and non-negative".into(),
            });
        }
        for (field, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                out.push(Violation {
                    field,
                    message: format!("{field} must lie in (0, 1)"),
                });
            }
        }
        if self.epochs == 0 {
            out.push(Violation {
                field: "epochs",
                message: "epochs must be positive".into(),
            });
        }
        if self.warmup_epochs >= self.epochs {
            out.push(Violation {
                field: "warmup_epochs",
                message: "warmup_epochs must be smaller than epochs".into(),
            });
        }
        if self.sample_stride == 0 {
            out.push(Violation {
                field: "sample_stride",
                message: "sample_stride must be positive".into(),
            });
        }
        if out.is_empty() {
            Ok(())
        } else {
            Err(ConfigViolations(out))
        }
    }
}

/// Architecture plus training settings, as stored in a config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub arch: ArchConfig,
    pub train: TrainConfig,
}

fn join<T: fmt::Display>(xs: &[T]) -> String {
    xs.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_scalar<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| SvfapError::ConfigParse(format!("bad value for {key}: '{value}'")))
}

fn parse_triple(key: &str, value: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = value
        .split(',')
        .map(|p| parse_scalar(key, p))
        .collect::<Result<_>>()?;
    parts
        .try_into()
        .map_err(|_| SvfapError::ConfigParse(format!("{key} expects three comma-separated integers")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(SvfapError::ConfigParse(format!("bad value for {key}: '{value}'"))),
    }
}

impl RunConfig {
    pub fn new(arch: ArchConfig, train: TrainConfig) -> Self {
        RunConfig { arch, train }
    }

    pub fn to_text(&self) -> String {
        let a = &self.arch;
        let t = &self.train;
        let lines = [
            ("embed_dim", a.embed_dim.to_string()),
            ("stage_depths", join(&a.stage_depths)),
            ("bottleneck_tokens", a.bottleneck_tokens.to_string()),
            ("temporal_stride", a.temporal_stride.to_string()),
            ("masking_ratio", a.masking_ratio.to_string()),
            ("patch", join(&a.patch)),
            ("input", join(&a.input)),
            ("heads", a.heads.to_string()),
            ("decoder_dim", a.decoder_dim.to_string()),
            ("decoder_depth", a.decoder_depth.to_string()),
            ("decoder_heads", a.decoder_heads.to_string()),
            ("spatial_hidden", a.spatial_hidden.to_string()),
            ("spatial_softmax", a.spatial_softmax.to_string()),
            ("downsample", a.downsample.to_string()),
            ("variant", a.variant.to_string()),
            ("fusion_pretrain", a.fusion_pretrain.to_string()),
            ("fusion_finetune", a.fusion_finetune.to_string()),
            ("base_lr", t.base_lr.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("beta1", t.beta1.to_string()),
            ("beta2", t.beta2.to_string()),
            ("epochs", t.epochs.to_string()),
            ("warmup_epochs", t.warmup_epochs.to_string()),
            ("seed", t.seed.to_string()),
            ("sample_stride", t.sample_stride.to_string()),
        ];
        let mut s = String::new();
        for (k, v) in lines {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        }
        s
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        let a = &mut self.arch;
        let t = &mut self.train;
        match key {
            "embed_dim" => a.embed_dim = parse_scalar(key, value)?,
            "stage_depths" => a.stage_depths = parse_triple(key, value)?,
            "bottleneck_tokens" => a.bottleneck_tokens = parse_scalar(key, value)?,
            "temporal_stride" => a.temporal_stride = parse_scalar(key, value)?,
            "masking_ratio" => a.masking_ratio = parse_scalar(key, value)?,
            "patch" => a.patch = parse_triple(key, value)?,
            "input" => a.input = parse_triple(key, value)?,
            "heads" => a.heads = parse_scalar(key, value)?,
            "decoder_dim" => a.decoder_dim = parse_scalar(key, value)?,
            "decoder_depth" => a.decoder_depth = parse_scalar(key, value)?,
            "decoder_heads" => a.decoder_heads = parse_scalar(key, value)?,
            "spatial_hidden" => a.spatial_hidden = parse_scalar(key, value)?,
            "spatial_softmax" => a.spatial_softmax = parse_bool(key, value)?,
            "downsample" => a.downsample = value.trim().parse()?,
            "variant" => a.variant = value.trim().parse()?,
            "fusion_pretrain" => a.fusion_pretrain = parse_bool(key, value)?,
            "fusion_finetune" => a.fusion_finetune = parse_bool(key, value)?,
            "base_lr" => t.base_lr = parse_scalar(key, value)?,
            "batch_size" => t.batch_size = parse_scalar(key, value)?,
            "weight_decay" => t.weight_decay = parse_scalar(key, value)?,
            "beta1" => t.beta1 = parse_scalar(key, value)?,
            "beta2" => t.beta2 = parse_scalar(key, value)?,
            "epochs" => t.epochs = parse_scalar(key, value)?,
            "warmup_epochs" => t.warmup_epochs = parse_scalar(key, value)?,
            "seed" => t.seed = parse_scalar(key, value)?,
            "sample_stride" => t.sample_stride = parse_scalar(key, value)?,
            _ => return Err(SvfapError::ConfigParse(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment.split_once('=').ok_or_else(|| {
            SvfapError::ConfigParse(format!("override '{assignment}' is not key=value"))
        })?;
        self.set(k, v)
    }

    /// Parses config text on top of `base`; later lines win.
    pub fn parse_onto(base: RunConfig, text: &str) -> Result<Self> {
        let mut cfg = base;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                SvfapError::ConfigParse(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            cfg.set(k, v)
                .map_err(|e| SvfapError::ConfigParse(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(cfg)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::parse_onto(
            RunConfig::new(ArchConfig::preset(Preset::Base), TrainConfig::pretrain()),
            text,
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SvfapError::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| SvfapError::io(path, e))
    }

    pub fn validate(&self) -> std::result::Result<(), ConfigViolations> {
        let mut all = Vec::new();
        if let Err(ConfigViolations(v)) = self.arch.validate() {
            all.extend(v);
        }
        if let Err(ConfigViolations(v)) = self.train.validate() {
            all.extend(v);
        }
        if all.is_empty() {
            Ok(())
        } else {
            Err(ConfigViolations(all))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_published_shapes() {
        let s = ArchConfig::preset(Preset::Small);
        assert_eq!(s.embed_dim, 384);
        assert_eq!(s.stage_depths, [8, 4, 2]);
        let b = ArchConfig::preset(Preset::Base);
        assert_eq!(b.embed_dim, 512);
        assert_eq!(b.stage_depths, [12, 6, 3]);
        for c in [&s, &b] {
            assert_eq!(c.bottleneck_tokens, 8);
            assert_eq!(c.temporal_stride, 2);
            assert_eq!(c.masking_ratio, 0.9);
            assert_eq!(c.patch, [2, 16, 16]);
            assert_eq!(c.input, [16, 160, 160]);
            assert_eq!(c.decoder_depth, 4);
            assert_eq!(c.head_dim(), 64);
            assert!(c.validate().is_ok());
        }
        assert_eq!(b.grid(), Grid::new(8, 10, 10));
        assert_eq!(b.visible_spatial(), 10);
    }

    #[test]
    fn stage3_too_short_is_rejected() {
        let mut cfg = ArchConfig::preset(Preset::Base);
        cfg.temporal_stride = 4;
        let err = cfg.validate().unwrap_err();
        assert_eq!(err.0.len(), 1);
        assert!(err.to_string().contains("stage-3 temporal length < 1"), "{err}");
        assert!(err.to_string().contains("0.5"));
    }

    #[test]
    fn indivisible_height_is_rejected() {
        let mut cfg = ArchConfig::preset(Preset::Base);
        cfg.input[1] = 150;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("H not divisible by ph"), "{err}");
    }

    #[test]
    fn each_violation_is_reported() {
        let mut cfg = ArchConfig::preset(Preset::Base);
        cfg.input[1] = 150;
        cfg.heads = 7;
        cfg.masking_ratio = 1.0;
        let err = cfg.validate().unwrap_err();
        let fields: Vec<_> = err.0.iter().map(|v| v.field).collect();
        assert!(fields.contains(&"input"));
        assert!(fields.contains(&"heads"));
        assert!(fields.contains(&"masking_ratio"));
    }

    #[test]
    fn zero_field_is_named() {
        let mut cfg = ArchConfig::preset(Preset::Small);
        cfg.bottleneck_tokens = 0;
        let err = cfg.validate().unwrap_err();
        assert_eq!(err.0[0].field, "bottleneck_tokens");
    }

    #[test]
    fn variants_without_pyramid_skip_stride_check() {
        let mut cfg = ArchConfig::preset(Preset::Base).with_variant(Variant::SbtOnly);
        cfg.temporal_stride = 4;
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.stage_lengths(), [8, 8, 8]);
    }

    #[test]
    fn overrides_apply_last_writer_wins() {
        let text = "embed_dim = 64\nheads = 2\n# comment\nembed_dim = 128\n";
        let mut cfg = RunConfig::from_text(text).unwrap();
        assert_eq!(cfg.arch.embed_dim, 128);
        cfg.apply_override("masking_ratio=0.75").unwrap();
        assert_eq!(cfg.arch.masking_ratio, 0.75);
        assert!(cfg.apply_override("nope=1").is_err());
        assert!(cfg.apply_override("patch=1,2").is_err());
    }

    #[test]
    fn train_presets_validate() {
        assert!(TrainConfig::pretrain().validate().is_ok());
        let ft = TrainConfig::finetune();
        assert_eq!(ft.beta2, 0.999);
        assert!(ft.validate().is_ok());
        let bad = TrainConfig {
            warmup_epochs: 100,
            ..TrainConfig::pretrain()
        };
        assert_eq!(bad.validate().unwrap_err().0[0].field, "warmup_epochs");
    }
}
