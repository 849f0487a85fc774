//! Clips on disk and in memory: face-region crop, strided temporal
//! sampling, a synthetic facial-motion generator and the manifest format.
//!
//! On disk a dataset is a directory holding one subdirectory per clip with
//! frames `f00000.ppm`, `f00001.ppm`, ... and a `manifest.csv`:
//!
//! ```text
//! # mean=0.1,0.1,0.1 std=0.2,0.2,0.2
//! path,label_kind,payload
//! clip_0000,class,2
//! clip_0001,scores,0.25;0.5
//! ```

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, Rgb, RgbImage};
use ndarray::{s, Array3, Array4, ArrayView3, ArrayView4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SvfapError};

#[derive(Clone, Debug, PartialEq)]
pub enum Label {
    Class(usize),
    Scores(Vec<f64>),
    None,
}

impl Label {
    pub fn kind(&self) -> &'static str {
        match self {
            Label::Class(_) => "class",
            Label::Scores(_) => "scores",
            Label::None => "none",
        }
    }

    fn payload(&self) -> String {
        match self {
            Label::Class(c) => c.to_string(),
            Label::Scores(v) => v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";"),
            Label::None => String::new(),
        }
    }

    fn parse(kind: &str, payload: &str) -> Result<Self> {
        match kind {
            "class" => payload
                .trim()
                .parse()
                .map(Label::Class)
                .map_err(|_| SvfapError::Data(format!("bad class payload {payload:?}"))),
            "scores" => payload
                .split(';')
                .map(|x| x.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(Label::Scores)
                .map_err(|_| SvfapError::Data(format!("bad score payload {payload:?}"))),
            "none" => Ok(Label::None),
            other => Err(SvfapError::Data(format!("unknown label kind {other:?}"))),
        }
    }
}

/// Frames T×H×W×3 plus provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub pixels: Array4<f64>,
    pub source_id: String,
    pub label: Label,
}

impl VideoClip {
    pub fn new(pixels: Array4<f64>, source_id: impl Into<String>, label: Label) -> Result<Self> {
        if pixels.shape()[3] != 3 {
            return Err(SvfapError::shape("clip must have 3 channels"));
        }
        if !pixels.iter().all(|v| v.is_finite()) {
            return Err(SvfapError::NonFinite("clip pixels".into()));
        }
        Ok(VideoClip {
            pixels,
            source_id: source_id.into(),
            label,
        })
    }

    pub fn frames(&self) -> usize {
        self.pixels.shape()[0]
    }
}

/// Window of `out_h × out_w` anchored at the top row and centered horizontally.
pub fn crop_face_region(frame: ArrayView3<'_, f64>, out_h: usize, out_w: usize) -> Result<Array3<f64>> {
    let (h, w, _) = frame.dim();
    if out_h > h || out_w > w || out_h == 0 || out_w == 0 {
        return Err(SvfapError::shape(format!(
            "crop {out_h}×{out_w} does not fit a {h}×{w} frame"
        )));
    }
    let left = (w - out_w) / 2;
    Ok(frame.slice(s![0..out_h, left..left + out_w, ..]).to_owned())
}

/// Frame indices start, start+stride, ... wrapping modulo `frames`.
pub fn clip_indices(frames: usize, len: usize, stride: usize, start: usize) -> Vec<usize> {
    (0..len).map(|i| (start + i * stride) % frames).collect()
}

pub fn sample_clip(video: ArrayView4<'_, f64>, len: usize, stride: usize, start: usize) -> Result<Array4<f64>> {
    let frames = video.shape()[0];
    if frames == 0 {
        return Err(SvfapError::InvalidArgument("empty video".into()));
    }
    Ok(video.select(Axis(0), &clip_indices(frames, len, stride, start)))
}

/// Uniform training-mode start among the positions that fit a whole clip.
pub fn random_start<R: Rng + ?Sized>(frames: usize, len: usize, stride: usize, rng: &mut R) -> usize {
    let span = (len.max(1) - 1) * stride + 1;
    rng.random_range(0..=frames.saturating_sub(span))
}

/// Per-channel standardization applied after scaling pixels to [0, 1].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalization {
    pub fn identity() -> Self {
        Normalization {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    pub fn fit<'a>(clips: impl IntoIterator<Item = &'a Array4<f64>>) -> Self {
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        let mut n = 0usize;
        for clip in clips {
            for px in clip.lanes(Axis(3)) {
                for c in 0..3 {
                    sum[c] += px[c];
                    sq[c] += px[c] * px[c];
                }
                n += 1;
            }
        }
        let n = n.max(1) as f64;
        let mean = sum.map(|s| s / n);
        let mut std = [1.0; 3];
        for c in 0..3 {
            let var = sq[c] / n - mean[c] * mean[c];
            std[c] = if var > 1e-12 { var.sqrt() } else { 1.0 };
        }
        Normalization { mean, std }
    }

    pub fn apply(&self, clip: &mut Array4<f64>) {
        for mut px in clip.lanes_mut(Axis(3)) {
            for c in 0..3 {
                px[c] = (px[c] - self.mean[c]) / self.std[c];
            }
        }
    }

    pub fn invert(&self, clip: &mut Array4<f64>) {
        for mut px in clip.lanes_mut(Axis(3)) {
            for c in 0..3 {
                px[c] = px[c] * self.std[c] + self.mean[c];
            }
        }
    }

    fn header(&self) -> String {
        let j = |v: [f64; 3]| v.map(|x| x.to_string()).join(",");
        format!("# mean={} std={}", j(self.mean), j(self.std))
    }

    fn parse_header(line: &str) -> Option<Self> {
        let body = line.strip_prefix('#')?.trim();
        let mut mean = None;
        let mut std = None;
        for part in body.split_whitespace() {
            let (key, val) = part.split_once('=')?;
            let v: Vec<f64> = val.split(',').map(|x| x.parse().ok()).collect::<Option<_>>()?;
            let arr: [f64; 3] = v.try_into().ok()?;
            match key {
                "mean" => mean = Some(arr),
                "std" => std = Some(arr),
                _ => {}
            }
        }
        Some(Normalization {
            mean: mean?,
            std: std?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ManifestRecord {
    path: String,
    label_kind: String,
    payload: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub path: String,
    pub label: Label,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
    pub normalization: Normalization,
}

impl Manifest {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(ManifestRecord {
                path: row.path.clone(),
                label_kind: row.label.kind().into(),
                payload: row.label.payload(),
            })
            .map_err(|e| SvfapError::Data(e.to_string()))?;
        }
        let body = w.into_inner().map_err(|e| SvfapError::Data(e.to_string()))?;
        Ok(format!("{}\n{}", self.normalization.header(), String::from_utf8_lossy(&body)))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let normalization = text
            .lines()
            .next()
            .and_then(Normalization::parse_header)
            .unwrap_or_else(Normalization::identity);
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let mut rows = Vec::new();
        for (i, rec) in rdr.deserialize::<ManifestRecord>().enumerate() {
            let rec = rec.map_err(|e| SvfapError::Data(format!("manifest row {}: {e}", i + 1)))?;
            rows.push(ManifestRow {
                label: Label::parse(&rec.label_kind, &rec.payload)?,
                path: rec.path,
            });
        }
        let m = Manifest { rows, normalization };
        m.check_labels()?;
        Ok(m)
    }

    fn check_labels(&self) -> Result<()> {
        let mut width = None;
        for row in &self.rows {
            if let Label::Scores(v) = &row.label {
                if *width.get_or_insert(v.len()) != v.len() {
                    return Err(SvfapError::Data(format!("{}: score vector length differs", row.path)));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| SvfapError::io(path, e))?;
        let m = Self::parse(&text)?;
        let root = path.parent().unwrap_or(Path::new("."));
        for row in &m.rows {
            if !root.join(&row.path).is_dir() {
                return Err(SvfapError::Data(format!("missing clip directory {}", root.join(&row.path).display())));
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()?).map_err(|e| SvfapError::io(path, e))
    }

    /// Number of classes implied by the class labels (max + 1).
    pub fn num_classes(&self) -> usize {
        self.rows
            .iter()
            .filter_map(|r| match r.label {
                Label::Class(c) => Some(c + 1),
                _ => None,
            })
            .max()
            .unwrap_or(0)
    }
}

pub fn frame_name(i: usize) -> String {
    format!("f{i:05}.ppm")
}

pub fn write_frames(dir: &Path, pixels: &Array4<f64>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| SvfapError::io(dir, e))?;
    for (i, frame) in pixels.outer_iter().enumerate() {
        let path = dir.join(frame_name(i));
        save_ppm(&to_rgb(frame), &path)?;
    }
    Ok(())
}

/// Writes a binary (P6) PPM.
pub fn save_ppm(img: &RgbImage, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| SvfapError::io(path, e))?;
    let enc = PnmEncoder::new(std::io::BufWriter::new(file)).with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary));
    enc.write_image(img.as_raw(), img.width(), img.height(), ExtendedColorType::Rgb8)
        .map_err(|e| SvfapError::Data(format!("{}: {e}", path.display())))
}

/// Clamps [0, 1] values and quantizes to 8 bits.
pub fn to_rgb(frame: ArrayView3<'_, f64>) -> RgbImage {
    let (h, w, _) = frame.dim();
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([q(frame[[y, x, 0]]), q(frame[[y, x, 1]]), q(frame[[y, x, 2]])])
    })
}

/// Tiles videos into one image: one row per video, frames left to right,
/// separated by a one-pixel white gutter.
pub fn video_grid(rows: &[&Array4<f64>]) -> Result<RgbImage> {
    let Some(first) = rows.first() else {
        return Err(SvfapError::InvalidArgument("no videos to tile".into()));
    };
    let (t, h, w, _) = first.dim();
    if rows.iter().any(|r| r.dim() != first.dim()) {
        return Err(SvfapError::shape("videos in a grid must share a shape"));
    }
    let (cw, ch) = ((w + 1) * t - 1, (h + 1) * rows.len() - 1);
    let mut img = RgbImage::from_pixel(cw as u32, ch as u32, Rgb([255, 255, 255]));
    for (r, video) in rows.iter().enumerate() {
        for (f, frame) in video.outer_iter().enumerate() {
            let tile = to_rgb(frame);
            image::imageops::replace(&mut img, &tile, (f * (w + 1)) as i64, (r * (h + 1)) as i64);
        }
    }
    Ok(img)
}

/// Reads `f*.ppm` frames in name order, scaled to [0, 1].
pub fn read_frames(dir: &Path) -> Result<Array4<f64>> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| SvfapError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(SvfapError::Data(format!("no frames in {}", dir.display())));
    }
    let mut frames = Vec::with_capacity(names.len());
    for p in &names {
        let img = image::open(p)
            .map_err(|e| SvfapError::Data(format!("{}: {e}", p.display())))?
            .to_rgb8();
        frames.push(img);
    }
    let (w, h) = frames[0].dimensions();
    if frames.iter().any(|f| f.dimensions() != (w, h)) {
        return Err(SvfapError::Data(format!("frame sizes differ in {}", dir.display())));
    }
    Ok(Array4::from_shape_fn((frames.len(), h as usize, w as usize, 3), |(t, y, x, c)| {
        frames[t].get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    }))
}

/// Loads every clip of a manifest (in manifest order), crops frames to
/// `size` when larger, and applies the manifest normalization.
pub fn load_dataset(manifest_path: &Path, size: Option<(usize, usize)>) -> Result<(Manifest, Vec<VideoClip>)> {
    let manifest = Manifest::load(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let norm = manifest.normalization;
    let clips = manifest
        .rows
        .par_iter()
        .map(|row| {
            let mut px = read_frames(&root.join(&row.path))?;
            if let Some((h, w)) = size {
                if (px.shape()[1], px.shape()[2]) != (h, w) {
                    let cropped = px
                        .outer_iter()
                        .map(|f| crop_face_region(f, h, w))
                        .collect::<Result<Vec<_>>>()?;
                    let views: Vec<_> = cropped.iter().map(|f| f.view()).collect();
                    px = ndarray::stack(Axis(0), &views).map_err(|e| SvfapError::shape(e.to_string()))?;
                }
            }
            norm.apply(&mut px);
            VideoClip::new(px, row.path.clone(), row.label.clone())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, clips))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub clips_per_class: usize,
    /// Frames, height, width of every generated video.
    pub geometry: [usize; 3],
    pub noise_std: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(SvfapError::InvalidArgument("synthetic data needs at least 2 classes".into()));
        }
        if self.clips_per_class == 0 || self.geometry.contains(&0) {
            return Err(SvfapError::InvalidArgument("clip count and geometry must be positive".into()));
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(SvfapError::InvalidArgument("noise_std must be finite and ≥ 0".into()));
        }
        Ok(())
    }
}

/// Motion parameters of class `c` out of `k`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Trajectory {
    /// Blinks per video (integer, so the motion is periodic over the video).
    pub blinks: usize,
    /// Relative mouth-radius oscillation amplitude.
    pub mouth_amplitude: f64,
}

impl Trajectory {
    pub fn for_class(c: usize, k: usize) -> Self {
        Trajectory {
            blinks: c + 1,
            mouth_amplitude: 0.1 + 0.8 * c as f64 / (k - 1).max(1) as f64,
        }
    }

    pub fn scores(&self, k: usize) -> Vec<f64> {
        vec![self.mouth_amplitude, self.blinks as f64 / k as f64]
    }
}

/// Renders a blob face: skin ellipse, two blinking eyes and an oscillating
/// mouth. `phase` is an integer frame offset into the periodic motion.
pub fn render_face(traj: Trajectory, frames: usize, h: usize, w: usize, phase: usize) -> Array4<f64> {
    let (hf, wf) = (h as f64, w as f64);
    let gauss = |y: f64, x: f64, cy: f64, cx: f64, ry: f64, rx: f64| {
        (-((y - cy) / ry).powi(2) / 2.0 - ((x - cx) / rx).powi(2) / 2.0).exp()
    };
    let mut out = Array4::zeros((frames, h, w, 3));
    for t in 0..frames {
        let u = ((t + phase) % frames) as f64 / frames as f64;
        let open = 0.5 + 0.5 * (2.0 * PI * traj.blinks as f64 * u).cos();
        let mouth = 1.0 + traj.mouth_amplitude * (2.0 * PI * u).sin();
        for y in 0..h {
            for x in 0..w {
                let (yf, xf) = (y as f64 + 0.5, x as f64 + 0.5);
                let face = gauss(yf, xf, 0.5 * hf, 0.5 * wf, 0.32 * hf, 0.26 * wf);
                let eyes = gauss(yf, xf, 0.38 * hf, 0.34 * wf, 0.05 * hf, 0.07 * wf)
                    + gauss(yf, xf, 0.38 * hf, 0.66 * wf, 0.05 * hf, 0.07 * wf);
                let m = gauss(yf, xf, 0.7 * hf, 0.5 * wf, 0.05 * hf * mouth, 0.12 * wf * mouth);
                let skin = 0.15 + 0.6 * face;
                let v = [
                    skin - 0.5 * eyes * open + 0.3 * m,
                    skin - 0.5 * eyes * open - 0.3 * m,
                    0.8 * skin - 0.4 * eyes * open - 0.2 * m,
                ];
                for c in 0..3 {
                    out[[t, y, x, c]] = v[c].clamp(0.0, 1.0);
                }
            }
        }
    }
    out
}

/// One synthetic clip before quantization.
#[derive(Clone, Debug)]
pub struct SynthClip {
    pub id: String,
    pub class: usize,
    pub scores: Vec<f64>,
    pub phase: usize,
    pub pixels: Array4<f64>,
}

/// Generates clips in class-major order. Each clip gets its own RNG stream
/// so generation parallelizes without changing the output.
pub fn synth_clips(spec: &SynthSpec) -> Result<Vec<SynthClip>> {
    spec.validate()?;
    let [frames, h, w] = spec.geometry;
    let k = spec.num_classes;
    let noise = Normal::new(0.0, spec.noise_std.max(0.0)).map_err(|e| SvfapError::InvalidArgument(e.to_string()))?;
    (0..k * spec.clips_per_class)
        .into_par_iter()
        .map(|i| {
            let class = i / spec.clips_per_class;
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64 + 1);
            let phase = rng.random_range(0..frames);
            let traj = Trajectory::for_class(class, k);
            let mut pixels = render_face(traj, frames, h, w, phase);
            if spec.noise_std > 0.0 {
                pixels.mapv_inplace(|v| (v + noise.sample(&mut rng)).clamp(0.0, 1.0));
            }
            Ok(SynthClip {
                id: format!("clip_{i:04}"),
                class,
                scores: traj.scores(k),
                phase,
                pixels,
            })
        })
        .collect()
}

/// Writes a synthetic dataset under `out`: clip frames, `manifest.csv` with
/// class labels and `scores.csv` with the trajectory score vectors.
pub fn synth_generate(spec: &SynthSpec, out: &Path) -> Result<Manifest> {
    let clips = synth_clips(spec)?;
    fs::create_dir_all(out).map_err(|e| SvfapError::io(out, e))?;
    clips
        .par_iter()
        .map(|c| write_frames(&out.join(&c.id), &c.pixels))
        .collect::<Result<Vec<_>>>()?;
    // statistics of what is actually stored (8-bit)
    let quantized: Vec<Array4<f64>> = clips
        .iter()
        .map(|c| c.pixels.mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0))
        .collect();
    let normalization = Normalization::fit(quantized.iter());
    let classes = Manifest {
        rows: clips
            .iter()
            .map(|c| ManifestRow {
                path: c.id.clone(),
                label: Label::Class(c.class),
            })
            .collect(),
        normalization,
    };
    let scores = Manifest {
        rows: clips
            .iter()
            .map(|c| ManifestRow {
                path: c.id.clone(),
                label: Label::Scores(c.scores.clone()),
            })
            .collect(),
        normalization,
    };
    classes.save(&out.join("manifest.csv"))?;
    scores.save(&out.join("scores.csv"))?;
    Ok(classes)
}
