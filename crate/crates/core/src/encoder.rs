//! Three-stage encoder.
//!
//! Stage 1 is a stack of standard pre-LN blocks over all (visible) tokens.
//! Stages 2 and 3 each start with a strided temporal downsampling, compress
//! every temporal slice into `G` bottleneck tokens with spatial attention,
//! run `M_i − 1` bottleneck blocks (cross attention from the stage input,
//! global self attention, FFN) and end with one reverse block that lets the
//! stage-input tokens query the final bottlenecks.
//!
//! Tokens are laid out slice-major: row `t·S + s` is spatial token `s` of
//! slice `t`, where `S` is the per-slice token count (all positions when
//! fine-tuning, the visible positions of the tube mask when pretraining).

use crate::attention::{
    attention_specs, ffn, ffn_specs, layer_norm, ln_specs, mhca, mhsa, standard_block,
    standard_block_specs,
};
use crate::config::{ArchConfig, Downsample};
use crate::error::{Result, SvfapError};
use crate::params::{ParamSpec, ParamStore};
use crate::tape::{Mat, Tape, Var};

/// Tokens of one stage on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageVar {
    pub tokens: Var,
    pub slices: usize,
    pub spatial: usize,
}

/// Stage outputs of one encoder pass, plus the bottleneck states of stages
/// 2 and 3 (empty for variants without bottlenecks).
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub stages: [StageVar; 3],
    pub bottlenecks: Vec<Var>,
}

fn stage_prefix(i: usize) -> String {
    format!("encoder.stage{i}")
}

pub fn sbt_block_specs(prefix: &str, dim: usize) -> Vec<ParamSpec> {
    let mut v = ln_specs(&format!("{prefix}.ln_q"), dim);
    v.extend(ln_specs(&format!("{prefix}.ln_kv"), dim));
    v.extend(attention_specs(&format!("{prefix}.cross"), dim));
    v.extend(ln_specs(&format!("{prefix}.ln_self"), dim));
    v.extend(attention_specs(&format!("{prefix}.attn"), dim));
    v.extend(ln_specs(&format!("{prefix}.ln_ffn"), dim));
    v.extend(ffn_specs(&format!("{prefix}.ffn"), dim, 4 * dim, dim));
    v
}

/// Parameters of the encoder (without patch embedding).
pub fn encoder_specs(cfg: &ArchConfig) -> Vec<ParamSpec> {
    let c = cfg.embed_dim;
    let mut v = Vec::new();
    for j in 0..cfg.stage_depths[0] {
        v.extend(standard_block_specs(&format!("{}.block{j}", stage_prefix(1)), c));
    }
    for i in 2..=3 {
        let p = stage_prefix(i);
        let m = cfg.stage_depths[i - 1];
        if cfg.variant.has_temporal_pyramid() && cfg.downsample == Downsample::Conv {
            let k = cfg.temporal_stride;
            v.push(ParamSpec::dense(format!("{p}.down.weight"), k * c, c));
            v.push(ParamSpec::bias(format!("{p}.down.bias"), c));
        }
        if cfg.variant.has_bottleneck() {
            v.extend(ffn_specs(
                &format!("{p}.spatial"),
                c,
                cfg.spatial_hidden,
                cfg.bottleneck_tokens,
            ));
            for j in 0..m - 1 {
                v.extend(sbt_block_specs(&format!("{p}.sbt{j}"), c));
            }
            v.extend(sbt_block_specs(&format!("{p}.reverse"), c));
        } else {
            for j in 0..ArchConfig::standard_blocks_for_stage(m) {
                v.extend(standard_block_specs(&format!("{p}.block{j}"), c));
            }
        }
    }
    v
}

pub fn stage1_node(t: &mut Tape, cfg: &ArchConfig, x: StageVar) -> StageVar {
    let mut tokens = x.tokens;
    for j in 0..cfg.stage_depths[0] {
        tokens = standard_block(t, &format!("{}.block{j}", stage_prefix(1)), tokens, cfg.heads);
    }
    StageVar { tokens, ..x }
}

/// Merges each run of `k` consecutive slices into one, per spatial index.
pub fn temporal_downsample_node(
    t: &mut Tape,
    prefix: &str,
    kind: Downsample,
    x: StageVar,
    k: usize,
) -> StageVar {
    assert_eq!(x.slices % k, 0, "temporal length not divisible by stride");
    let out_slices = x.slices / k;
    let taps: Vec<Var> = (0..k)
        .map(|j| {
            let idx: Vec<usize> = (0..out_slices)
                .flat_map(|o| (0..x.spatial).map(move |s| (o * k + j) * x.spatial + s))
                .collect();
            t.gather_rows(x.tokens, &idx)
        })
        .collect();
    let tokens = match kind {
        Downsample::Conv => {
            let w = t.param(&format!("{prefix}.down.weight"));
            let b = t.param(&format!("{prefix}.down.bias"));
            let cat = if k == 1 { taps[0] } else { t.concat_cols(&taps) };
            let y = t.matmul(cat, w);
            t.add_row(y, b)
        }
        Downsample::Avg => {
            let mut acc = taps[0];
            for &tap in &taps[1..] {
                acc = t.add(acc, tap);
            }
            t.scale(acc, 1.0 / k as f64)
        }
        Downsample::Max => {
            let mut acc = taps[0];
            for &tap in &taps[1..] {
                acc = t.maximum(acc, tap);
            }
            acc
        }
    };
    StageVar {
        tokens,
        slices: out_slices,
        spatial: x.spatial,
    }
}

/// Per slice: scores Y = GELU(X·W1 + b1)·W2 + b2 (S×G), bottlenecks Yᵀ·X (G×C).
/// Returns a (slices·G)×C matrix.
pub fn spatial_attention_node(t: &mut Tape, prefix: &str, x: StageVar, softmax: bool) -> Var {
    let scores = ffn(t, &format!("{prefix}.spatial"), x.tokens);
    let mut parts = Vec::with_capacity(x.slices);
    for s in 0..x.slices {
        let ys = t.slice_rows(scores, s * x.spatial, x.spatial);
        let xs = t.slice_rows(x.tokens, s * x.spatial, x.spatial);
        let mut yt = t.transpose(ys);
        if softmax {
            yt = t.softmax_rows(yt);
        }
        parts.push(t.matmul(yt, xs));
    }
    if parts.len() == 1 {
        parts[0]
    } else {
        t.concat_rows(&parts)
    }
}

/// Bottleneck block: bottlenecks query the stage input, then attend to each
/// other globally, then pass through the FFN.
pub fn sbt_block_node(t: &mut Tape, prefix: &str, b: Var, x: Var, heads: usize) -> Var {
    let q = layer_norm(t, &format!("{prefix}.ln_q"), b);
    let kv = layer_norm(t, &format!("{prefix}.ln_kv"), x);
    let c = mhca(t, &format!("{prefix}.cross"), q, kv, heads);
    let y = t.add(c, b);
    let n = layer_norm(t, &format!("{prefix}.ln_self"), y);
    let a = mhsa(t, &format!("{prefix}.attn"), n, heads);
    let z = t.add(a, y);
    let n = layer_norm(t, &format!("{prefix}.ln_ffn"), z);
    let f = ffn(t, &format!("{prefix}.ffn"), n);
    t.add(f, z)
}

/// Reverse block: stage-input tokens query the final bottlenecks.
pub fn reverse_sbt_block_node(t: &mut Tape, prefix: &str, x: Var, b: Var, heads: usize) -> Var {
    sbt_block_node(t, prefix, x, b, heads)
}

/// Nearest-neighbour repetition of every slice `factor` times.
pub fn temporal_upsample_node(t: &mut Tape, x: StageVar, factor: usize) -> StageVar {
    if factor == 1 {
        return x;
    }
    let idx: Vec<usize> = (0..x.slices * factor)
        .flat_map(|o| (0..x.spatial).map(move |s| (o / factor) * x.spatial + s))
        .collect();
    StageVar {
        tokens: t.gather_rows(x.tokens, &idx),
        slices: x.slices * factor,
        spatial: x.spatial,
    }
}

/// Runs all three stages on `x` (already embedded and, when pretraining,
/// reduced to the visible tokens).
pub fn encode_node(t: &mut Tape, cfg: &ArchConfig, x: StageVar) -> EncoderOutput {
    let heads = cfg.heads;
    let x1 = stage1_node(t, cfg, x);
    let mut stages = [x1; 3];
    let mut bottlenecks = Vec::new();
    let mut cur = x1;
    for i in 2..=3 {
        let p = stage_prefix(i);
        let input = if cfg.variant.has_temporal_pyramid() {
            temporal_downsample_node(t, &p, cfg.downsample, cur, cfg.temporal_stride)
        } else {
            cur
        };
        let out = if cfg.variant.has_bottleneck() {
            let mut b = spatial_attention_node(t, &p, input, cfg.spatial_softmax);
            for j in 0..cfg.stage_depths[i - 1] - 1 {
                b = sbt_block_node(t, &format!("{p}.sbt{j}"), b, input.tokens, heads);
            }
            bottlenecks.push(b);
            reverse_sbt_block_node(t, &format!("{p}.reverse"), input.tokens, b, heads)
        } else {
            let mut h = input.tokens;
            for j in 0..ArchConfig::standard_blocks_for_stage(cfg.stage_depths[i - 1]) {
                h = standard_block(t, &format!("{p}.block{j}"), h, heads);
            }
            h
        };
        cur = StageVar {
            tokens: out,
            ..input
        };
        stages[i - 1] = cur;
    }
    EncoderOutput {
        stages,
        bottlenecks,
    }
}

/// X₁ + T↑(X₂) + T↑(X₃), all at stage-1 temporal length.
pub fn fuse_node(t: &mut Tape, out: &EncoderOutput) -> Var {
    let [x1, x2, x3] = out.stages;
    let u2 = temporal_upsample_node(t, x2, x1.slices / x2.slices);
    let u3 = temporal_upsample_node(t, x3, x1.slices / x3.slices);
    let s = t.add(x1.tokens, u2.tokens);
    t.add(s, u3.tokens)
}

/// Last-stage output brought back to stage-1 length.
pub fn last_stage_upsampled_node(t: &mut Tape, out: &EncoderOutput) -> Var {
    let [x1, _, x3] = out.stages;
    temporal_upsample_node(t, x3, x1.slices / x3.slices).tokens
}

// Array-level entry points. Weights are read from a parameter store by
// module path; inputs are validated before the tape is built.

/// Stage tokens as a plain matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct StageOutput {
    pub tokens: Mat,
    pub slices: usize,
    pub spatial: usize,
}

impl StageOutput {
    pub fn new(tokens: Mat, slices: usize, spatial: usize) -> Result<Self> {
        if tokens.nrows() != slices * spatial {
            return Err(SvfapError::shape(format!(
                "{} tokens for {slices} slices × {spatial} positions",
                tokens.nrows()
            )));
        }
        Ok(StageOutput {
            tokens,
            slices,
            spatial,
        })
    }
}

fn check_stage(cfg: &ArchConfig, x: &StageOutput) -> Result<()> {
    if x.tokens.nrows() != x.slices * x.spatial || x.tokens.ncols() != cfg.embed_dim {
        return Err(SvfapError::shape(format!(
            "stage tokens {:?} for {}×{} positions at width {}",
            x.tokens.dim(),
            x.slices,
            x.spatial,
            cfg.embed_dim
        )));
    }
    if !x.tokens.iter().all(|v| v.is_finite()) {
        return Err(SvfapError::NonFinite("stage tokens".into()));
    }
    Ok(())
}

fn bind<'p>(t: &mut Tape<'p>, x: &StageOutput) -> StageVar {
    StageVar {
        tokens: t.constant(x.tokens.clone()),
        slices: x.slices,
        spatial: x.spatial,
    }
}

fn unbind(t: &Tape, v: StageVar) -> StageOutput {
    StageOutput {
        tokens: t.value(v.tokens).to_owned(),
        slices: v.slices,
        spatial: v.spatial,
    }
}

pub fn stage1(params: &ParamStore, cfg: &ArchConfig, x: &StageOutput) -> Result<StageOutput> {
    check_stage(cfg, x)?;
    let mut t = Tape::new(params);
    let xv = bind(&mut t, x);
    let out = stage1_node(&mut t, cfg, xv);
    Ok(unbind(&t, out))
}

/// Downsampling into stage `stage` (2 or 3).
pub fn temporal_downsample(
    params: &ParamStore,
    cfg: &ArchConfig,
    stage: usize,
    x: &StageOutput,
) -> Result<StageOutput> {
    check_stage(cfg, x)?;
    if !x.slices.is_multiple_of(cfg.temporal_stride) {
        return Err(SvfapError::shape(format!(
            "{} slices not divisible by stride {}",
            x.slices, cfg.temporal_stride
        )));
    }
    let mut t = Tape::new(params);
    let xv = bind(&mut t, x);
    let out = temporal_downsample_node(&mut t, &stage_prefix(stage), cfg.downsample, xv, cfg.temporal_stride);
    Ok(unbind(&t, out))
}

/// Bottleneck tokens of stage `stage`, (slices·G)×C.
pub fn spatial_attention(params: &ParamStore, cfg: &ArchConfig, stage: usize, x: &StageOutput) -> Result<Mat> {
    check_stage(cfg, x)?;
    let mut t = Tape::new(params);
    let xv = bind(&mut t, x);
    let b = spatial_attention_node(&mut t, &stage_prefix(stage), xv, cfg.spatial_softmax);
    Ok(t.value(b).to_owned())
}

pub fn temporal_upsample(x: &StageOutput, factor: usize) -> Result<StageOutput> {
    if factor == 0 {
        return Err(SvfapError::InvalidArgument("upsampling factor must be positive".into()));
    }
    if x.tokens.nrows() != x.slices * x.spatial {
        return Err(SvfapError::shape("stage tokens do not match slices × spatial"));
    }
    let store = ParamStore::default();
    let mut t = Tape::new(&store);
    let xv = bind(&mut t, x);
    let out = temporal_upsample_node(&mut t, xv, factor);
    Ok(unbind(&t, out))
}
