//! Reconstruction decoder and the masked pixel loss.

use crate::attention::{standard_block, standard_block_specs};
use crate::config::ArchConfig;
use crate::error::{Result, SvfapError};
use crate::masking::TubeMask;
use crate::params::{Init, ParamSpec, ParamStore};
use crate::tape::{Mat, Tape, Var};
use crate::tokenizer::positions;

pub const MASK_TOKEN: &str = "decoder.mask_token";

pub fn decoder_specs(cfg: &ArchConfig) -> Vec<ParamSpec> {
    let d = cfg.decoder_dim;
    let mut v = vec![
        ParamSpec::dense("decoder.proj.weight", cfg.embed_dim, d),
        ParamSpec::bias("decoder.proj.bias", d),
        ParamSpec {
            name: MASK_TOKEN.into(),
            rows: 1,
            cols: d,
            init: Init::TruncNormal(0.02),
            decay: false,
        },
    ];
    for j in 0..cfg.decoder_depth {
        v.extend(standard_block_specs(&format!("decoder.block{j}"), d));
    }
    v.push(ParamSpec::dense("decoder.head.weight", d, cfg.patch_dim()));
    v.push(ParamSpec::bias("decoder.head.bias", cfg.patch_dim()));
    v
}

/// Visible encoder features (N_vis×C, slice-major) to patch predictions
/// over the full lattice (N×patch_dim).
pub fn decode_node(t: &mut Tape, cfg: &ArchConfig, fused_visible: Var, mask: &TubeMask) -> Var {
    let n = mask.grid().len();
    let w = t.param("decoder.proj.weight");
    let b = t.param("decoder.proj.bias");
    let x = t.matmul(fused_visible, w);
    let x = t.add_row(x, b);
    let token = t.param(MASK_TOKEN);
    let mut x = t.scatter_rows(x, token, &mask.visible_rows(), n);
    let pos = if t.is_tracing() {
        t.placeholder(n, cfg.decoder_dim)
    } else {
        t.constant(positions(n, cfg.decoder_dim).expect("even decoder width"))
    };
    x = t.add(x, pos);
    for j in 0..cfg.decoder_depth {
        x = standard_block(t, &format!("decoder.block{j}"), x, cfg.decoder_heads);
    }
    let w = t.param("decoder.head.weight");
    let b = t.param("decoder.head.bias");
    let y = t.matmul(x, w);
    t.add_row(y, b)
}

pub fn reconstruction_loss_node(t: &mut Tape, pred: Var, target: &Mat, mask: &TubeMask) -> Var {
    t.masked_mse(pred, target.clone(), &mask.masked_rows())
}

pub fn decode(params: &ParamStore, cfg: &ArchConfig, fused_visible: &Mat, mask: &TubeMask) -> Result<Mat> {
    if fused_visible.dim() != (mask.num_visible(), cfg.embed_dim) {
        return Err(SvfapError::shape(format!(
            "decoder input {:?}, expected {}×{}",
            fused_visible.dim(),
            mask.num_visible(),
            cfg.embed_dim
        )));
    }
    if !fused_visible.iter().all(|v| v.is_finite()) {
        return Err(SvfapError::NonFinite("decoder input".into()));
    }
    let mut t = Tape::new(params);
    let x = t.constant(fused_visible.clone());
    let y = decode_node(&mut t, cfg, x, mask);
    Ok(t.value(y).to_owned())
}

/// Mean over masked positions of the per-patch mean squared error.
pub fn reconstruction_loss(pred: &Mat, target: &Mat, mask: &TubeMask) -> Result<f64> {
    if pred.dim() != target.dim() || pred.nrows() != mask.grid().len() {
        return Err(SvfapError::shape(format!(
            "prediction {:?} vs target {:?} on {} positions",
            pred.dim(),
            target.dim(),
            mask.grid().len()
        )));
    }
    let rows = mask.masked_rows();
    if rows.is_empty() {
        return Err(SvfapError::InvalidArgument("mask hides no position".into()));
    }
    let width = pred.ncols() as f64;
    let total: f64 = rows
        .iter()
        .map(|&r| {
            pred.row(r)
                .iter()
                .zip(target.row(r))
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                / width
        })
        .sum();
    Ok(total / rows.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Grid;
    use crate::masking::make_tube_mask;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_shape_simple_fn((rows, cols), || StandardNormal.sample(&mut rng))
    }

    fn small() -> ArchConfig {
        ArchConfig {
            decoder_dim: 8,
            decoder_heads: 2,
            decoder_depth: 2,
            ..ArchConfig::tiny()
        }
    }

    #[test]
    fn output_covers_full_lattice() {
        let cfg = small();
        let p = ParamStore::init(&decoder_specs(&cfg), &mut ChaCha8Rng::seed_from_u64(0));
        let g = cfg.grid();
        let mask = make_tube_mask(g, 0.5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let out = decode(&p, &cfg, &randn(mask.num_visible(), cfg.embed_dim, 2), &mask).unwrap();
        assert_eq!(out.dim(), (g.len(), cfg.patch_dim()));
        assert!(decode(&p, &cfg, &randn(3, cfg.embed_dim, 2), &mask).is_err());
    }

    #[test]
    fn dfew_geometry_shapes_in_trace_mode() {
        let cfg = ArchConfig::preset(crate::config::Preset::Base);
        let mask = TubeMask::from_visible(cfg.grid(), 0.9, (0..10).collect()).unwrap();
        let mut t = Tape::tracing(&decoder_specs(&cfg));
        let x = t.placeholder(80, 512);
        let y = decode_node(&mut t, &cfg, x, &mask);
        assert_eq!(t.shape(y), (800, 1536));
    }

    #[test]
    fn zero_blocks_give_head_of_projection() {
        let cfg = small();
        let mut p = ParamStore::init(&decoder_specs(&cfg), &mut ChaCha8Rng::seed_from_u64(3));
        for (name, m) in p.iter_mut() {
            if name.starts_with("decoder.block") && !name.contains(".ln") {
                m.fill(0.0);
            }
        }
        let g = cfg.grid();
        let mask = TubeMask::all_visible(g);
        let x = randn(g.len(), cfg.embed_dim, 4);
        let out = decode(&p, &cfg, &x, &mask).unwrap();
        let get = |n: &str| p.get(n).unwrap();
        let h = x.dot(get("decoder.proj.weight")) + get("decoder.proj.bias") + positions(g.len(), 8).unwrap();
        let expect = h.dot(get("decoder.head.weight")) + get("decoder.head.bias");
        for (a, b) in out.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_sites_differ_only_by_position() {
        // With zero blocks and zero head bias, two masked rows differ by
        // exactly the head applied to their position difference.
        let cfg = small();
        let mut p = ParamStore::init(&decoder_specs(&cfg), &mut ChaCha8Rng::seed_from_u64(5));
        for (name, m) in p.iter_mut() {
            if name.starts_with("decoder.block") && !name.contains(".ln") {
                m.fill(0.0);
            }
        }
        let g = cfg.grid();
        let mask = TubeMask::from_visible(g, 0.5, vec![0, 3]).unwrap();
        let out = decode(&p, &cfg, &randn(mask.num_visible(), cfg.embed_dim, 6), &mask).unwrap();
        let pos = positions(g.len(), 8).unwrap();
        let (a, b) = (1, 2);
        let dpos = (&pos.row(a) - &pos.row(b)).insert_axis(ndarray::Axis(0));
        let expect = dpos.dot(p.get("decoder.head.weight").unwrap());
        let got = &out.row(a) - &out.row(b);
        for (x, y) in got.iter().zip(expect.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_examples() {
        let g = Grid::new(8, 10, 10);
        let mask = TubeMask::from_visible(g, 0.9, (0..10).collect()).unwrap();
        let target = randn(800, 6, 7);
        assert_eq!(reconstruction_loss(&target, &target, &mask).unwrap(), 0.0);

        let mut pred = target.clone();
        for r in mask.visible_rows() {
            pred.row_mut(r).fill(100.0);
        }
        assert_eq!(reconstruction_loss(&pred, &target, &mask).unwrap(), 0.0);

        let mut pred = target.clone();
        let m = mask.masked_rows()[17];
        pred.row_mut(m).mapv_inplace(|v| v + 2.0);
        let l = reconstruction_loss(&pred, &target, &mask).unwrap();
        assert!((l - 4.0 / 720.0).abs() < 1e-15);
    }

    #[test]
    fn loss_needs_masked_positions() {
        let g = Grid::new(1, 2, 2);
        let m = TubeMask::all_visible(g);
        assert!(reconstruction_loss(&Mat::zeros((4, 3)), &Mat::zeros((4, 3)), &m).is_err());
    }

    #[test]
    fn loss_gradient_vanishes_on_visible_rows() {
        let g = Grid::new(2, 3, 3);
        let mask = make_tube_mask(g, 0.6, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let store = ParamStore::default();
        let mut t = Tape::new(&store);
        let pred = t.input(randn(18, 4, 9));
        let l = reconstruction_loss_node(&mut t, pred, &randn(18, 4, 10), &mask);
        let g = t.backward(l);
        let gp = g.of(pred).unwrap();
        for r in 0..18 {
            let zero = gp.row(r).iter().all(|&v| v == 0.0);
            assert_eq!(zero, mask.is_visible(r), "row {r}");
        }
    }
}
