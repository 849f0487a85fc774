//! Analytic parameter and FLOP accounting.
//!
//! FLOPs are multiply-adds: a linear map m×n over N tokens costs N·m·n and
//! the attention score and value products cost N_q·N_kv·C each. Softmax,
//! layer norm, GELU, residual and bias additions are not counted. The patch
//! embedding is charged on the full token lattice in both regimes.

use std::fmt::Write as _;

use crate::config::{ArchConfig, Downsample, Variant};
use crate::error::{Result, SvfapError};
use crate::masking::TubeMask;
use crate::model::{finetune_graph, finetune_specs, pretrain_graph, pretrain_specs};
use crate::tape::Tape;

/// Head width used when none is given (seven emotion classes).
pub const DEFAULT_HEAD_OUTPUTS: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    Finetune,
    Pretrain,
}

impl std::str::FromStr for Regime {
    type Err = SvfapError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "finetune" => Ok(Regime::Finetune),
            "pretrain" => Ok(Regime::Pretrain),
            _ => Err(SvfapError::InvalidArgument(format!("unknown regime {s:?}"))),
        }
    }
}

fn ln_params(c: u64) -> u64 {
    2 * c
}

fn ffn_params(c: u64, h: u64, o: u64) -> u64 {
    c * h + h + h * o + o
}

fn attn_params(c: u64) -> u64 {
    4 * c * c
}

fn block_params(c: u64) -> u64 {
    2 * ln_params(c) + attn_params(c) + ffn_params(c, 4 * c, c)
}

fn sbt_params(c: u64) -> u64 {
    4 * ln_params(c) + 2 * attn_params(c) + ffn_params(c, 4 * c, c)
}

fn cross_flops(nq: u64, nkv: u64, c: u64) -> u64 {
    2 * nq * c * c + 2 * nkv * c * c + 2 * nq * nkv * c
}

fn block_flops(n: u64, c: u64) -> u64 {
    cross_flops(n, n, c) + 8 * n * c * c
}

/// Bottleneck block with `nb` bottleneck queries over `nx` stage tokens.
fn sbt_flops(nb: u64, nx: u64, c: u64) -> u64 {
    cross_flops(nb, nx, c) + block_flops(nb, c)
}

/// Reverse block: `nx` token queries over `nb` bottlenecks.
fn reverse_flops(nx: u64, nb: u64, c: u64) -> u64 {
    cross_flops(nx, nb, c) + block_flops(nx, c)
}

/// Cost of one named part of the model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartCost {
    pub name: &'static str,
    pub params: u64,
    pub flops_finetune: u64,
    pub flops_pretrain: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub variant: Variant,
    pub masking_ratio: f64,
    pub input: [usize; 3],
    pub patch: [usize; 3],
    pub head_outputs: usize,
    /// Patch embedding, the three stages, the head (fine-tune) and the
    /// decoder (pretraining).
    pub parts: Vec<PartCost>,
}

impl CostReport {
    fn part(&self, name: &str) -> u64 {
        self.parts.iter().find(|p| p.name == name).map_or(0, |p| p.params)
    }

    /// Parameters trained when fine-tuning: embedding, encoder, head.
    pub fn params_total(&self) -> u64 {
        self.parts.iter().filter(|p| p.name != "decoder").map(|p| p.params).sum()
    }

    pub fn params_encoder(&self) -> u64 {
        self.params_total() - self.part("head")
    }

    pub fn params_decoder(&self) -> u64 {
        self.part("decoder")
    }

    /// Parameters trained when pretraining: embedding, encoder, decoder.
    pub fn params_pretrain(&self) -> u64 {
        self.params_encoder() + self.params_decoder()
    }

    pub fn flops_finetune(&self) -> u64 {
        self.parts.iter().map(|p| p.flops_finetune).sum()
    }

    pub fn flops_pretrain(&self) -> u64 {
        self.parts.iter().map(|p| p.flops_pretrain).sum()
    }

    pub fn to_text(&self, regime: Option<Regime>) -> String {
        let [t, h, w] = self.input;
        let [pt, ph, pw] = self.patch;
        let mut s = format!(
            "variant {}  input {t}x{h}x{w}  patch {pt}x{ph}x{pw}  masking {:.2}\n",
            self.variant, self.masking_ratio
        );
        let _ = writeln!(s, "{:<12} {:>12} {:>14} {:>14}", "part", "params", "flops", "flops_p");
        for p in &self.parts {
            let _ = writeln!(
                s,
                "{:<12} {:>12} {:>14} {:>14}",
                p.name, p.params, p.flops_finetune, p.flops_pretrain
            );
        }
        let (params, show_f, show_p) = match regime {
            Some(Regime::Finetune) => (self.params_total(), true, false),
            Some(Regime::Pretrain) => (self.params_pretrain(), false, true),
            None => (self.params_total(), true, true),
        };
        let _ = writeln!(s, "params {:.2}M", params as f64 / 1e6);
        if show_f {
            let _ = writeln!(s, "flops {:.2}G", self.flops_finetune() as f64 / 1e9);
        }
        if show_p {
            let _ = writeln!(s, "flops_p {:.2}G", self.flops_pretrain() as f64 / 1e9);
        }
        s
    }

    pub fn csv_header() -> &'static str {
        "variant,params,params_decoder,flops,flops_p"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.variant,
            self.params_total(),
            self.params_decoder(),
            self.flops_finetune(),
            self.flops_pretrain()
        )
    }
}

/// Analytic tally for `cfg` built as `variant`.
pub fn count(cfg: &ArchConfig, variant: Variant) -> Result<CostReport> {
    count_with_head(cfg, variant, DEFAULT_HEAD_OUTPUTS)
}

pub fn count_with_head(cfg: &ArchConfig, variant: Variant, head_outputs: usize) -> Result<CostReport> {
    let cfg = cfg.with_variant(variant);
    cfg.validate()?;
    if head_outputs == 0 {
        return Err(SvfapError::InvalidArgument("head needs at least one output".into()));
    }
    let c = cfg.embed_dim as u64;
    let g = cfg.bottleneck_tokens as u64;
    let k = cfg.temporal_stride as u64;
    let grid = cfg.grid();
    let n_full = grid.len() as u64;
    let t1 = grid.t as u64;
    let s_full = grid.spatial() as u64;
    let s_vis = cfg.visible_spatial() as u64;
    let p = cfg.patch_dim() as u64;

    let mut parts = vec![PartCost {
        name: "patch_embed",
        params: p * c + c,
        flops_finetune: n_full * p * c,
        flops_pretrain: n_full * p * c,
    }];

    let m1 = cfg.stage_depths[0] as u64;
    parts.push(PartCost {
        name: "stage1",
        params: m1 * block_params(c),
        flops_finetune: m1 * block_flops(t1 * s_full, c),
        flops_pretrain: m1 * block_flops(t1 * s_vis, c),
    });

    let mut slices = t1;
    for (i, name) in [(1usize, "stage2"), (2, "stage3")] {
        let m = cfg.stage_depths[i] as u64;
        let pyramid = variant.has_temporal_pyramid();
        if pyramid {
            slices /= k;
        }
        let conv = pyramid && cfg.downsample == Downsample::Conv;
        let hdim = cfg.spatial_hidden as u64;
        let blocks = ArchConfig::standard_blocks_for_stage(m as usize) as u64;
        let mut params = if conv { k * c * c + c } else { 0 };
        params += if variant.has_bottleneck() {
            ffn_params(c, hdim, g) + m * sbt_params(c)
        } else {
            blocks * block_params(c)
        };
        let flops = |s: u64| {
            let n = slices * s;
            let down = if conv { n * k * c * c } else { 0 };
            let body = if variant.has_bottleneck() {
                let nb = slices * g;
                n * (c * hdim + hdim * g) + n * g * c + (m - 1) * sbt_flops(nb, n, c) + reverse_flops(n, nb, c)
            } else {
                blocks * block_flops(n, c)
            };
            down + body
        };
        parts.push(PartCost {
            name,
            params,
            flops_finetune: flops(s_full),
            flops_pretrain: flops(s_vis),
        });
    }

    let kh = head_outputs as u64;
    parts.push(PartCost {
        name: "head",
        params: c * kh + kh,
        flops_finetune: c * kh,
        flops_pretrain: 0,
    });

    let d = cfg.decoder_dim as u64;
    let n_vis = t1 * s_vis;
    parts.push(PartCost {
        name: "decoder",
        params: c * d + d + d + cfg.decoder_depth as u64 * block_params(d) + d * p + p,
        flops_finetune: 0,
        flops_pretrain: n_vis * c * d + cfg.decoder_depth as u64 * block_flops(n_full, d) + n_full * d * p,
    });

    Ok(CostReport {
        variant,
        masking_ratio: cfg.masking_ratio,
        input: cfg.input,
        patch: cfg.patch,
        head_outputs,
        parts,
    })
}

/// Relative savings of `full` over `baseline`, as fractions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Reduction {
    pub params: f64,
    pub flops_finetune: f64,
    pub flops_pretrain: f64,
}

pub fn reduction(full: &CostReport, baseline: &CostReport) -> Result<Reduction> {
    if full.input != baseline.input || full.patch != baseline.patch {
        return Err(SvfapError::InvalidArgument("reports use different geometries".into()));
    }
    let r = |a: u64, b: u64| {
        if b == 0 {
            Err(SvfapError::InvalidArgument("zero baseline cost".into()))
        } else {
            Ok(1.0 - a as f64 / b as f64)
        }
    };
    Ok(Reduction {
        params: r(full.params_total(), baseline.params_total())?,
        flops_finetune: r(full.flops_finetune(), baseline.flops_finetune())?,
        flops_pretrain: r(full.flops_pretrain(), baseline.flops_pretrain())?,
    })
}

/// Multiply-adds recorded by a shape-only forward pass of the real graph.
/// The pretraining mask keeps the first visible positions of each slice;
/// cost does not depend on which ones.
pub fn traced_flops(cfg: &ArchConfig, regime: Regime, head_outputs: usize) -> Result<u64> {
    cfg.validate()?;
    let grid = cfg.grid();
    let n = grid.len();
    Ok(match regime {
        Regime::Finetune => {
            let mut t = Tape::tracing(&finetune_specs(cfg, head_outputs));
            let p = t.placeholder(n, cfg.patch_dim());
            finetune_graph(&mut t, cfg, p);
            t.flops()
        }
        Regime::Pretrain => {
            let mask = TubeMask::from_visible(grid, cfg.masking_ratio, (0..cfg.visible_spatial()).collect())?;
            let mut t = Tape::tracing(&pretrain_specs(cfg));
            let p = t.placeholder(n, cfg.patch_dim());
            pretrain_graph(&mut t, cfg, p, &mask);
            t.flops()
        }
    })
}

/// The four-variant ablation grid for one configuration.
pub fn variant_grid(cfg: &ArchConfig) -> Result<Vec<CostReport>> {
    Variant::ALL.iter().map(|&v| count(cfg, v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Preset;
    use crate::params::count_params;

    #[test]
    fn parts_sum_to_totals() {
        let r = count(&ArchConfig::preset(Preset::Base), Variant::Full).unwrap();
        let sum: u64 = r.parts.iter().filter(|p| p.name != "decoder").map(|p| p.params).sum();
        assert_eq!(sum, r.params_total());
        assert_eq!(r.params_encoder() + r.params_decoder(), r.params_pretrain());
    }

    #[test]
    fn analytic_params_match_declared_specs() {
        for preset in [Preset::Small, Preset::Base] {
            for v in Variant::ALL {
                let cfg = ArchConfig::preset(preset).with_variant(v);
                let r = count_with_head(&cfg, v, 5).unwrap();
                assert_eq!(r.params_total(), count_params(&finetune_specs(&cfg, 5)), "{preset:?} {v}");
                assert_eq!(r.params_pretrain(), count_params(&pretrain_specs(&cfg)), "{preset:?} {v}");
            }
        }
    }

    #[test]
    fn analytic_flops_match_trace_on_tiny_configs() {
        let base = ArchConfig {
            stage_depths: [2, 2, 2],
            input: [8, 16, 16],
            masking_ratio: 0.75,
            ..ArchConfig::tiny()
        };
        for v in Variant::ALL {
            for ds in [Downsample::Conv, Downsample::Avg] {
                let cfg = ArchConfig { downsample: ds, ..base.with_variant(v) };
                let r = count_with_head(&cfg, v, 3).unwrap();
                let f = traced_flops(&cfg, Regime::Finetune, 3).unwrap();
                let p = traced_flops(&cfg, Regime::Pretrain, 3).unwrap();
                assert_eq!(r.flops_finetune(), f, "{v} {ds:?}");
                assert_eq!(r.flops_pretrain(), p, "{v} {ds:?}");
            }
        }
    }

    #[test]
    fn identical_reports_reduce_by_zero() {
        let r = count(&ArchConfig::preset(Preset::Base), Variant::Full).unwrap();
        let red = reduction(&r, &r).unwrap();
        assert_eq!((red.params, red.flops_finetune, red.flops_pretrain), (0.0, 0.0, 0.0));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let cfg = ArchConfig {
            temporal_stride: 4,
            ..ArchConfig::preset(Preset::Base)
        };
        assert!(count(&cfg, Variant::Full).is_err());
        // without a pyramid the stride no longer matters
        assert!(count(&cfg, Variant::SbtOnly).is_ok());
    }

    #[test]
    fn text_and_csv_render() {
        let r = count(&ArchConfig::preset(Preset::Base), Variant::Full).unwrap();
        let text = r.to_text(Some(Regime::Finetune));
        assert!(text.contains("stage3") && text.contains("params 7"));
        assert_eq!(r.csv_row().split(',').count(), CostReport::csv_header().split(',').count());
    }
}
