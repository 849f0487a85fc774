//! AdamW, the learning-rate schedule and the shared training loop.
//!
//! Every optimizer step draws its clip starts and masks from the state RNG
//! before any parallel work, so results do not depend on thread count. The
//! clip order of epoch `e` is a fixed function of the seed and `e`, which
//! makes any step a valid resume point.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{ArchConfig, TrainConfig};
use crate::data::{random_start, sample_clip, Label, VideoClip};
use crate::error::{Result, SvfapError};
use crate::finetune::{two_clip_inference, Task};
use crate::masking::{make_tube_mask, TubeMask};
use crate::model::{finetune_specs, finetune_step, predict, pretrain_specs, pretrain_step};
use crate::params::{ParamSpec, ParamStore};
use crate::tape::Mat;

pub const ADAM_EPS: f64 = 1e-8;

/// Environment flag forcing ordered gradient reduction.
pub const DETERMINISTIC_ENV: &str = "SVFAP_DETERMINISTIC";

pub fn deterministic_from_env() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v == "1")
}

/// Linear scaling of the base rate to the batch size (reference batch 256).
pub fn scaled_lr(base_lr: f64, batch_size: usize) -> f64 {
    base_lr * batch_size as f64 / 256.0
}

/// Linear warmup from 0 to `peak` over `warmup` steps, then cosine decay
/// to 0 over the remaining steps.
pub fn lr_at(step: u64, total: u64, warmup: u64, peak: f64) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    peak * (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

/// AdamW moments. Parameters listed in `no_decay` skip weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub m: BTreeMap<String, Mat>,
    pub v: BTreeMap<String, Mat>,
    pub t: u64,
    pub no_decay: BTreeSet<String>,
}

impl AdamW {
    pub fn new(specs: &[ParamSpec]) -> Self {
        AdamW {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
            no_decay: specs.iter().filter(|s| !s.decay).map(|s| s.name.clone()).collect(),
        }
    }

    /// One update. Parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Mat>, h: &AdamWHyper) -> Result<()> {
        for (name, g) in grads {
            if !g.iter().all(|v| v.is_finite()) {
                return Err(SvfapError::NonFinite(format!(
                    "gradient of {name} at optimizer step {}",
                    self.t + 1
                )));
            }
            let Some(w) = params.get(name) else {
                return Err(SvfapError::InvalidArgument(format!("gradient for unknown parameter {name}")));
            };
            if w.dim() != g.dim() {
                return Err(SvfapError::shape(format!("{name}: weight {:?} vs gradient {:?}", w.dim(), g.dim())));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - h.beta1.powi(self.t as i32);
        let bc2 = 1.0 - h.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let w = params.get_mut(name).expect("checked above");
            let m = self.m.entry(name.clone()).or_insert_with(|| Mat::zeros(g.dim()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Mat::zeros(g.dim()));
            let decay = if self.no_decay.contains(name) { 0.0 } else { h.weight_decay };
            ndarray::Zip::from(w).and(m).and(v).and(g).for_each(|w, m, v, &g| {
                *m = h.beta1 * *m + (1.0 - h.beta1) * g;
                *v = h.beta2 * *v + (1.0 - h.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w -= h.lr * (mhat / (vhat.sqrt() + h.eps) + decay * *w);
            });
        }
        Ok(())
    }
}

/// What the loop optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Pretrain,
    Classify { classes: usize },
    Regress { dims: usize },
}

impl Objective {
    pub fn task(&self) -> Option<Task> {
        match self {
            Objective::Pretrain => None,
            Objective::Classify { .. } => Some(Task::Classification),
            Objective::Regress { .. } => Some(Task::Regression),
        }
    }

    pub fn outputs(&self) -> usize {
        match *self {
            Objective::Pretrain => 0,
            Objective::Classify { classes } => classes,
            Objective::Regress { dims } => dims,
        }
    }

    pub fn specs(&self, cfg: &ArchConfig) -> Vec<ParamSpec> {
        match self {
            Objective::Pretrain => pretrain_specs(cfg),
            _ => finetune_specs(cfg, self.outputs()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Objective::Pretrain => "pretrain",
            Objective::Classify { .. } => "classify",
            Objective::Regress { .. } => "regress",
        }
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParamStore,
    pub opt: AdamW,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss: f64,
}

/// Fresh parameters for `objective`, with every tensor of `init` whose
/// name and shape match copied in. Returns (params, loaded, fresh).
pub fn init_params(
    cfg: &ArchConfig,
    objective: Objective,
    init: Option<&ParamStore>,
    seed: u64,
) -> (ParamStore, usize, usize) {
    let specs = objective.specs(cfg);
    let mut params = ParamStore::init(&specs, &mut ChaCha8Rng::seed_from_u64(seed));
    let mut loaded = 0;
    if let Some(src) = init {
        for s in &specs {
            if let Some(m) = src.get(&s.name) {
                if m.dim() == (s.rows, s.cols) {
                    params.insert(s.name.clone(), m.clone());
                    loaded += 1;
                }
            }
        }
    }
    let fresh = specs.len() - loaded;
    (params, loaded, fresh)
}

pub struct Trainer<'a> {
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub objective: Objective,
    pub clips: &'a [VideoClip],
    pub deterministic: bool,
}

impl<'a> Trainer<'a> {
    pub fn new(arch: ArchConfig, train: TrainConfig, objective: Objective, clips: &'a [VideoClip]) -> Result<Self> {
        arch.validate()?;
        train.validate()?;
        if clips.is_empty() {
            return Err(SvfapError::Data("no training clips".into()));
        }
        let [_, h, w] = arch.input;
        for c in clips {
            let d = c.pixels.dim();
            if (d.1, d.2) != (h, w) {
                return Err(SvfapError::shape(format!(
                    "{}: frames {}×{} but the model expects {h}×{w}",
                    c.source_id, d.1, d.2
                )));
            }
            let ok = match (objective, &c.label) {
                (Objective::Pretrain, _) => true,
                (Objective::Classify { classes }, Label::Class(k)) => *k < classes,
                (Objective::Regress { dims }, Label::Scores(v)) => v.len() == dims,
                _ => false,
            };
            if !ok {
                return Err(SvfapError::Data(format!(
                    "{}: label {:?} unusable for {}",
                    c.source_id,
                    c.label,
                    objective.name()
                )));
            }
        }
        Ok(Trainer {
            arch,
            train,
            objective,
            clips,
            deterministic: deterministic_from_env(),
        })
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.clips.len().div_ceil(self.train.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch() * self.train.epochs as u64
    }

    pub fn warmup_steps(&self) -> u64 {
        self.steps_per_epoch() * self.train.warmup_epochs as u64
    }

    pub fn peak_lr(&self) -> f64 {
        scaled_lr(self.train.base_lr, self.train.batch_size)
    }

    pub fn init_state(&self, params: ParamStore) -> TrainState {
        TrainState {
            opt: AdamW::new(&self.objective.specs(&self.arch)),
            params,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(self.train.seed),
        }
    }

    fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.train.seed);
        rng.set_stream(epoch + 1);
        let mut order: Vec<usize> = (0..self.clips.len()).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Loss and gradients of one clip.
    fn item(&self, params: &ParamStore, clip: &VideoClip, start: usize, mask: Option<&TubeMask>) -> Result<(f64, BTreeMap<String, Mat>)> {
        let frames = sample_clip(clip.pixels.view(), self.arch.input[0], self.train.sample_stride, start)?;
        let (loss, grads) = match (self.objective.task(), mask) {
            (None, Some(mask)) => pretrain_step(params, &self.arch, frames.view(), mask)?,
            (Some(task), _) => {
                let (l, g, _) = finetune_step(params, &self.arch, frames.view(), &clip.label, task)?;
                (l, g)
            }
            (None, None) => unreachable!("pretraining items carry a mask"),
        };
        if !loss.is_finite() {
            return Err(SvfapError::NonFinite(format!("loss of {}", clip.source_id)));
        }
        Ok((loss, grads.into_params()))
    }

    /// One optimizer step at `state.step`.
    pub fn step(&self, state: &mut TrainState) -> Result<StepLog> {
        let spe = self.steps_per_epoch();
        let epoch = state.step / spe;
        let b = (state.step % spe) as usize;
        let order = self.epoch_order(epoch);
        let bs = self.train.batch_size;
        let batch = &order[b * bs..((b + 1) * bs).min(order.len())];

        // all randomness is drawn here, in batch order
        let mut plan = Vec::with_capacity(batch.len());
        for &i in batch {
            let clip = &self.clips[i];
            let start = random_start(clip.frames(), self.arch.input[0], self.train.sample_stride, &mut state.rng);
            let mask = match self.objective {
                Objective::Pretrain => Some(make_tube_mask(self.arch.grid(), self.arch.masking_ratio, &mut state.rng)?),
                _ => None,
            };
            plan.push((i, start, mask));
        }

        let params = &state.params;
        let results: Vec<(f64, BTreeMap<String, Mat>)> = plan
            .par_iter()
            .map(|(i, start, mask)| self.item(params, &self.clips[*i], *start, mask.as_ref()))
            .collect::<Result<_>>()?;

        let scale = 1.0 / results.len() as f64;
        let merge = |mut a: (f64, BTreeMap<String, Mat>), b: (f64, BTreeMap<String, Mat>)| {
            a.0 += b.0;
            for (k, g) in b.1 {
                match a.1.get_mut(&k) {
                    Some(acc) => *acc += &g,
                    None => {
                        a.1.insert(k, g);
                    }
                }
            }
            a
        };
        let (loss_sum, mut grads) = if self.deterministic {
            results.into_iter().fold((0.0, BTreeMap::new()), merge)
        } else {
            results.into_par_iter().reduce(|| (0.0, BTreeMap::new()), merge)
        };
        for g in grads.values_mut() {
            *g *= scale;
        }
        let loss = loss_sum * scale;

        let lr = lr_at(state.step, self.total_steps(), self.warmup_steps(), self.peak_lr());
        let hyper = AdamWHyper {
            lr,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            weight_decay: self.train.weight_decay,
            eps: ADAM_EPS,
        };
        state.opt.step(&mut state.params, &grads, &hyper)?;
        let log = StepLog {
            step: state.step,
            epoch,
            lr,
            loss,
        };
        state.step += 1;
        Ok(log)
    }

    /// Steps until `until` (default: the end of training), calling
    /// `on_step` after each.
    pub fn run(&self, state: &mut TrainState, until: Option<u64>, mut on_step: impl FnMut(&StepLog)) -> Result<Vec<StepLog>> {
        let end = until.unwrap_or(self.total_steps()).min(self.total_steps());
        let mut logs = Vec::new();
        while state.step < end {
            let log = self.step(state)?;
            on_step(&log);
            logs.push(log);
        }
        Ok(logs)
    }
}

/// Mean loss per epoch from step logs.
pub fn epoch_means(logs: &[StepLog]) -> Vec<(u64, f64)> {
    let mut out: Vec<(u64, f64, usize)> = Vec::new();
    for l in logs {
        match out.last_mut() {
            Some((e, s, n)) if *e == l.epoch => {
                *s += l.loss;
                *n += 1;
            }
            _ => out.push((l.epoch, l.loss, 1)),
        }
    }
    out.into_iter().map(|(e, s, n)| (e, s / n as f64)).collect()
}

/// Two-clip predictions for every clip, in input order.
pub fn evaluate(params: &ParamStore, cfg: &ArchConfig, clips: &[VideoClip], task: Task, stride: usize) -> Result<Vec<Vec<f64>>> {
    clips
        .par_iter()
        .map(|c| two_clip_inference(c.pixels.view(), cfg.input[0], stride, task, |clip| predict(params, cfg, clip)))
        .collect()
}

/// Index of the largest score.
pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(0, |best, (i, &x)| if x > v[best] { i } else { best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;

    #[test]
    fn lr_scaling_examples() {
        assert!((scaled_lr(3e-4, 256) - 3e-4).abs() < 1e-18);
        assert!((scaled_lr(3e-4, 128) - 1.5e-4).abs() < 1e-18);
        assert!((scaled_lr(3e-4, 512) - 6e-4).abs() < 1e-18);
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(lr_at(0, 100, 10, 1.0), 0.0);
        assert_eq!(lr_at(10, 100, 10, 1.0), 1.0);
        assert!((lr_at(55, 100, 10, 1.0) - 0.5).abs() < 1e-12);
        assert!(lr_at(99, 100, 10, 1.0) < 1e-2);
        assert_eq!(lr_at(0, 10, 0, 2.0), 2.0);
    }

    fn scalar_store(w: f64) -> (ParamStore, Vec<ParamSpec>) {
        let specs = vec![ParamSpec {
            name: "w".into(),
            rows: 1,
            cols: 1,
            init: Init::Zeros,
            decay: true,
        }];
        let mut s = ParamStore::default();
        s.insert("w", Mat::from_elem((1, 1), w));
        (s, specs)
    }

    fn hyper(lr: f64, wd: f64) -> AdamWHyper {
        AdamWHyper {
            lr,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: wd,
            eps: ADAM_EPS,
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let (mut s, specs) = scalar_store(0.7);
        let mut opt = AdamW::new(&specs);
        let g = BTreeMap::from([("w".to_string(), Mat::zeros((1, 1)))]);
        opt.step(&mut s, &g, &hyper(0.1, 0.0)).unwrap();
        assert_eq!(s.get("w").unwrap()[[0, 0]], 0.7);
    }

    #[test]
    fn first_step_closed_form() {
        for g in [0.3, -2.5, 1e-4] {
            let (mut s, specs) = scalar_store(1.0);
            let mut opt = AdamW::new(&specs);
            let grads = BTreeMap::from([("w".to_string(), Mat::from_elem((1, 1), g))]);
            opt.step(&mut s, &grads, &hyper(0.01, 0.0)).unwrap();
            let expect = 1.0 - 0.01 * g / (g.abs() + ADAM_EPS);
            assert!((s.get("w").unwrap()[[0, 0]] - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn decay_only_step_shrinks_weights() {
        let (mut s, specs) = scalar_store(2.0);
        let mut opt = AdamW::new(&specs);
        let g = BTreeMap::from([("w".to_string(), Mat::zeros((1, 1)))]);
        opt.step(&mut s, &g, &hyper(0.1, 0.05)).unwrap();
        assert!((s.get("w").unwrap()[[0, 0]] - 2.0 * (1.0 - 0.1 * 0.05)).abs() < 1e-15);
    }

    #[test]
    fn excluded_parameters_are_not_decayed() {
        let cfg = ArchConfig::tiny();
        let specs = pretrain_specs(&cfg);
        let opt = AdamW::new(&specs);
        assert!(opt.no_decay.contains("decoder.mask_token"));
        assert!(opt.no_decay.contains("encoder.stage1.block0.ln1.gain"));
        assert!(opt.no_decay.contains("encoder.stage2.sbt0.ln_kv.bias") || cfg.stage_depths[1] == 1);
        assert!(!opt.no_decay.contains("encoder.stage1.block0.attn.wq"));
        assert!(opt.no_decay.iter().all(|n| n.contains(".ln") || n == "decoder.mask_token"));
    }

    #[test]
    fn non_finite_gradients_abort() {
        let (mut s, specs) = scalar_store(1.0);
        let mut opt = AdamW::new(&specs);
        let g = BTreeMap::from([("w".to_string(), Mat::from_elem((1, 1), f64::NAN))]);
        let err = opt.step(&mut s, &g, &hyper(0.1, 0.0)).unwrap_err();
        assert!(err.to_string().contains("gradient of w"));
        assert_eq!(s.get("w").unwrap()[[0, 0]], 1.0);
    }

    #[test]
    fn init_params_copies_matching_tensors() {
        let cfg = ArchConfig::tiny();
        let (pre, _, fresh) = init_params(&cfg, Objective::Pretrain, None, 1);
        assert_eq!(fresh, pretrain_specs(&cfg).len());
        let (ft, loaded, fresh) = init_params(&cfg, Objective::Classify { classes: 3 }, Some(&pre), 2);
        assert_eq!(fresh, 2);
        assert_eq!(loaded + fresh, ft.len());
        assert_eq!(ft.get("patch_embed.weight"), pre.get("patch_embed.weight"));
    }

    #[test]
    fn epoch_means_group_steps() {
        let l = |step, epoch, loss| StepLog { step, epoch, lr: 0.0, loss };
        let m = epoch_means(&[l(0, 0, 1.0), l(1, 0, 3.0), l(2, 1, 5.0)]);
        assert_eq!(m, vec![(0, 2.0), (1, 5.0)]);
    }
}
