//! Whole-model graphs: masked-autoencoding pretraining and fine-tuning.

use ndarray::ArrayView4;

use crate::config::ArchConfig;
use crate::data::Label;
use crate::decoder::{decode_node, decoder_specs, reconstruction_loss_node};
use crate::encoder::{encode_node, encoder_specs, fuse_node, last_stage_upsampled_node, EncoderOutput, StageVar};
use crate::error::{Result, SvfapError};
use crate::finetune::{head_specs, pool_and_predict_node, Task};
use crate::masking::TubeMask;
use crate::params::{ParamSpec, ParamStore};
use crate::tape::{Grads, Mat, Tape, Var};
use crate::tokenizer::{embed_node, embed_specs, patchify};

pub fn pretrain_specs(cfg: &ArchConfig) -> Vec<ParamSpec> {
    let mut v = embed_specs(cfg.patch_dim(), cfg.embed_dim);
    v.extend(encoder_specs(cfg));
    v.extend(decoder_specs(cfg));
    v
}

pub fn finetune_specs(cfg: &ArchConfig, outputs: usize) -> Vec<ParamSpec> {
    let mut v = embed_specs(cfg.patch_dim(), cfg.embed_dim);
    v.extend(encoder_specs(cfg));
    v.extend(head_specs(cfg.embed_dim, outputs));
    v
}

/// Pretraining graph nodes.
pub struct PretrainGraph {
    pub encoder: EncoderOutput,
    pub fused: Var,
    pub pred: Var,
}

/// Embeds the full lattice, keeps the visible tubes, encodes, fuses and
/// decodes back to every lattice position.
pub fn pretrain_graph(t: &mut Tape, cfg: &ArchConfig, patches: Var, mask: &TubeMask) -> PretrainGraph {
    let grid = mask.grid();
    let x = embed_node(t, patches);
    let visible = t.gather_rows(x, &mask.visible_rows());
    let encoder = encode_node(
        t,
        cfg,
        StageVar {
            tokens: visible,
            slices: grid.t,
            spatial: mask.visible_per_slice(),
        },
    );
    let fused = if cfg.fusion_pretrain {
        fuse_node(t, &encoder)
    } else {
        last_stage_upsampled_node(t, &encoder)
    };
    let pred = decode_node(t, cfg, fused, mask);
    PretrainGraph { encoder, fused, pred }
}

/// Fine-tuning graph: all tokens, pooled features of the last stage (or of
/// the fused stages when `fusion_finetune` is set), affine head. 1×K.
pub fn finetune_graph(t: &mut Tape, cfg: &ArchConfig, patches: Var) -> (EncoderOutput, Var) {
    let grid = cfg.grid();
    let x = embed_node(t, patches);
    let encoder = encode_node(
        t,
        cfg,
        StageVar {
            tokens: x,
            slices: grid.t,
            spatial: grid.spatial(),
        },
    );
    let features = if cfg.fusion_finetune {
        fuse_node(t, &encoder)
    } else {
        encoder.stages[2].tokens
    };
    let logits = pool_and_predict_node(t, features);
    (encoder, logits)
}

fn clip_patches(cfg: &ArchConfig, clip: ArrayView4<'_, f64>) -> Result<Mat> {
    let [tt, h, w] = cfg.input;
    if clip.dim() != (tt, h, w, 3) {
        return Err(SvfapError::shape(format!(
            "clip {:?} does not match input {tt}×{h}×{w}×3",
            clip.dim()
        )));
    }
    if !clip.iter().all(|v| v.is_finite()) {
        return Err(SvfapError::NonFinite("clip".into()));
    }
    Ok(patchify(clip, cfg.patch)?.0)
}

fn check_mask(cfg: &ArchConfig, mask: &TubeMask) -> Result<()> {
    if mask.grid() != cfg.grid() {
        return Err(SvfapError::shape(format!("mask grid {:?} vs model grid {:?}", mask.grid(), cfg.grid())));
    }
    if mask.num_masked() == 0 {
        return Err(SvfapError::InvalidArgument("pretraining mask hides nothing".into()));
    }
    Ok(())
}

/// Reconstruction loss and parameter gradients for one clip.
pub fn pretrain_step(params: &ParamStore, cfg: &ArchConfig, clip: ArrayView4<'_, f64>, mask: &TubeMask) -> Result<(f64, Grads)> {
    check_mask(cfg, mask)?;
    let target = clip_patches(cfg, clip)?;
    let mut t = Tape::new(params);
    let patches = t.constant(target.clone());
    let g = pretrain_graph(&mut t, cfg, patches, mask);
    let loss = reconstruction_loss_node(&mut t, g.pred, &target, mask);
    Ok((t.scalar(loss), t.backward(loss)))
}

/// Patch predictions over the full lattice.
pub fn reconstruct(params: &ParamStore, cfg: &ArchConfig, clip: ArrayView4<'_, f64>, mask: &TubeMask) -> Result<Mat> {
    check_mask(cfg, mask)?;
    let patches = clip_patches(cfg, clip)?;
    let mut t = Tape::new(params);
    let p = t.constant(patches);
    let g = pretrain_graph(&mut t, cfg, p, mask);
    Ok(t.value(g.pred).to_owned())
}

/// Raw head outputs for one clip.
pub fn predict(params: &ParamStore, cfg: &ArchConfig, clip: ArrayView4<'_, f64>) -> Result<Vec<f64>> {
    let patches = clip_patches(cfg, clip)?;
    let mut t = Tape::new(params);
    let p = t.constant(patches);
    let (_, logits) = finetune_graph(&mut t, cfg, p);
    Ok(t.value(logits).iter().copied().collect())
}

/// Task loss, gradients and raw outputs for one labeled clip.
pub fn finetune_step(
    params: &ParamStore,
    cfg: &ArchConfig,
    clip: ArrayView4<'_, f64>,
    label: &Label,
    task: Task,
) -> Result<(f64, Grads, Vec<f64>)> {
    let patches = clip_patches(cfg, clip)?;
    let mut t = Tape::new(params);
    let p = t.constant(patches);
    let (_, logits) = finetune_graph(&mut t, cfg, p);
    let k = t.cols(logits);
    let loss = match (task, label) {
        (Task::Classification, Label::Class(c)) if *c < k => t.cross_entropy(logits, *c),
        (Task::Regression, Label::Scores(v)) if v.len() == k => {
            t.mse(logits, Mat::from_shape_vec((1, k), v.clone()).expect("row"))
        }
        _ => {
            return Err(SvfapError::InvalidArgument(format!(
                "label {label:?} does not fit a {task:?} head with {k} outputs"
            )))
        }
    };
    let out = t.value(logits).iter().copied().collect();
    Ok((t.scalar(loss), t.backward(loss), out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Preset;
    use crate::masking::make_tube_mask;
    use ndarray::Array4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn base_preset_shape_ledger() {
        let cfg = ArchConfig::preset(Preset::Base);
        let mask = make_tube_mask(cfg.grid(), 0.9, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut t = Tape::tracing(&pretrain_specs(&cfg));
        let p = t.placeholder(800, 1536);
        let g = pretrain_graph(&mut t, &cfg, p, &mask);
        let rows: Vec<_> = g.encoder.stages.iter().map(|s| t.rows(s.tokens)).collect();
        assert_eq!(rows, vec![80, 40, 20]);
        assert_eq!(t.shape(g.fused), (80, 512));
        assert_eq!(t.shape(g.pred), (800, 1536));

        let mut t = Tape::tracing(&finetune_specs(&cfg, 7));
        let p = t.placeholder(800, 1536);
        let (enc, logits) = finetune_graph(&mut t, &cfg, p);
        let rows: Vec<_> = enc.stages.iter().map(|s| t.rows(s.tokens)).collect();
        assert_eq!(rows, vec![800, 400, 200]);
        let b: Vec<_> = enc.bottlenecks.iter().map(|&b| t.rows(b)).collect();
        assert_eq!(b, vec![4 * 8, 2 * 8]);
        assert_eq!(t.shape(logits), (1, 7));
    }

    #[test]
    fn finetune_never_touches_decoder() {
        let cfg = ArchConfig::tiny();
        let mut specs = pretrain_specs(&cfg);
        specs.extend(head_specs(cfg.embed_dim, 3));
        let params = ParamStore::init(&specs, &mut ChaCha8Rng::seed_from_u64(1));
        let clip = Array4::from_shape_fn((8, 8, 8, 3), |(a, b, c, d)| ((a + b * c + d) % 7) as f64 / 7.0);
        let (_, grads, _) = finetune_step(&params, &cfg, clip.view(), &Label::Class(1), Task::Classification).unwrap();
        assert!(grads.params().keys().all(|k| !k.starts_with("decoder.")));
        assert!(grads.params().contains_key("head.weight"));
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let cfg = ArchConfig::tiny();
        let params = ParamStore::init(&finetune_specs(&cfg, 2), &mut ChaCha8Rng::seed_from_u64(2));
        let clip = Array4::zeros((8, 8, 8, 3));
        assert!(predict(&params, &cfg, Array4::zeros((4, 8, 8, 3)).view()).is_err());
        assert!(finetune_step(&params, &cfg, clip.view(), &Label::Class(2), Task::Classification).is_err());
        assert!(finetune_step(&params, &cfg, clip.view(), &Label::Scores(vec![0.1]), Task::Regression).is_err());
        assert_eq!(predict(&params, &cfg, clip.view()).unwrap().len(), 2);
    }
}
