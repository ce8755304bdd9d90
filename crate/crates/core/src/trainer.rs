//! End-to-end optimization: pair sampling, ray batches, the four-term loss,
//! Adam with per-epoch decay, logging and checkpoints.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::body::BodyState;
use crate::config::Config;
use crate::diffcore::{ParamStore, Tape, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{PixelRect, Ray};
use crate::losses::{mask_loss, photometric, ssim_loss, LossReport, LossTerms, LossWeights, PerceptualDistance, RandomFilterDistance};
use crate::model::{AdamMoments, Checkpoint, Model};
use crate::synthcap::{Dataset, Frame, FramePair, Split};

pub const LOG_HEADER: &str = "step\tL_color\tL_mask\tL_ssim\tL_perc\ttotal\tlr";

/// Bias-corrected Adam with per-parameter moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: ParamStore,
    pub v: ParamStore,
}

fn zeros_like(store: &ParamStore) -> ParamStore {
    let mut out = ParamStore::new();
    for id in store.ids() {
        out.add(store.name(id), Tensor::zeros(store.get(id).shape()));
    }
    out
}

impl AdamState {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            t: 0,
            beta1,
            beta2,
            eps,
            m: zeros_like(store),
            v: zeros_like(store),
        }
    }

    pub fn from_config(store: &ParamStore, cfg: &Config) -> Self {
        Self::new(store, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    }

    pub fn moments(&self) -> AdamMoments {
        AdamMoments {
            t: self.t,
            m: self.m.clone(),
            v: self.v.clone(),
        }
    }

    /// Restores saved moments; shapes and names must match `store`.
    pub fn restore(&mut self, store: &ParamStore, saved: &AdamMoments) -> Result<()> {
        let mut m = zeros_like(store);
        let mut v = zeros_like(store);
        m.load_from(&saved.m)?;
        v.load_from(&saved.v)?;
        if saved.m.len() != store.len() || saved.v.len() != store.len() {
            return Err(Error::Checkpoint("optimizer state does not match the model".into()));
        }
        self.t = saved.t;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// One update of every parameter in `store`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Dimension {
                what: "gradient count",
                got: (grads.len(), 1),
                want: (store.len(), 1),
            });
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (id, g) in store.ids().zip(grads) {
            if g.shape() != store.get(id).shape() {
                return Err(Error::Data(format!(
                    "gradient of {} has shape {:?}, parameter has {:?}",
                    store.name(id),
                    g.shape(),
                    store.get(id).shape()
                )));
            }
            let m = self.m.get_mut(id).data_mut();
            let v = self.v.get_mut(id).data_mut();
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Learning rate `lr · decay^epoch`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub lr: f64,
    pub decay: f64,
    pub epochs: usize,
}

impl Schedule {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            lr: cfg.lr,
            decay: cfg.lr_decay,
            epochs: cfg.epochs,
        }
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        self.lr * self.decay.powi(epoch as i32)
    }
}

/// Uniform subject among `subjects`, then uniform input and target frames
/// of that subject (which may coincide).
pub fn sample_pair<'a, R: Rng + ?Sized>(data: &'a Dataset, subjects: &[usize], rng: &mut R) -> Result<FramePair<'a>> {
    if subjects.is_empty() {
        return Err(Error::Data("no subjects to sample from".into()));
    }
    let s = subjects[rng.random_range(0..subjects.len())];
    let sf = &data.subjects[s];
    if sf.frames.is_empty() {
        return Err(Error::Data(format!("subject {} has no frames", sf.subject.id)));
    }
    let n = sf.frames.len();
    let input = &sf.frames[rng.random_range(0..n)];
    let target = &sf.frames[rng.random_range(0..n)];
    Ok(FramePair {
        subject: &sf.subject,
        input,
        target,
    })
}

/// Pixels of one training step. The first `patch²` entries form a square
/// patch in row-major order; the rest are scattered.
#[derive(Clone, Debug, PartialEq)]
pub struct RayBatch {
    pub pixels: Vec<(usize, usize)>,
    pub patch: usize,
}

impl RayBatch {
    pub fn rays(&self, frame: &Frame) -> Result<Vec<Ray>> {
        self.pixels
            .iter()
            .map(|&(c, r)| Ok(frame.cam.pixel_ray(c, r)?))
            .collect()
    }

    /// Target colours `[R, 3]` and mask values `[R]`.
    pub fn targets(&self, frame: &Frame) -> Result<(Tensor, Tensor)> {
        let mut rgb = Vec::with_capacity(self.pixels.len() * 3);
        let mut m = Vec::with_capacity(self.pixels.len());
        for &(c, r) in &self.pixels {
            rgb.extend(frame.image.get(c, r));
            m.push(if frame.mask.get(c, r) { 1.0 } else { 0.0 });
        }
        Ok((Tensor::new(vec![self.pixels.len(), 3], rgb)?, Tensor::new(vec![self.pixels.len()], m)?))
    }
}

/// A `patch × patch` square placed inside `rect` (shifted to fit the image
/// when the rectangle is smaller), then `total − patch²` scattered pixels:
/// a `interior` fraction drawn from the mask, the rest uniform in `rect`.
pub fn sample_rays<R: Rng + ?Sized>(
    frame: &Frame,
    rect: &PixelRect,
    total: usize,
    patch: usize,
    interior: f64,
    rng: &mut R,
) -> RayBatch {
    let (w, h) = (frame.image.width, frame.image.height);
    let rect = if rect.area() == 0 {
        PixelRect {
            x0: 0,
            y0: 0,
            x1: w,
            y1: h,
        }
    } else {
        *rect
    };
    let corner = |lo: usize, hi: usize, size: usize, rng: &mut R| {
        let start = if hi >= lo + patch { rng.random_range(lo..=hi - patch) } else { lo };
        start.min(size - patch)
    };
    let px = corner(rect.x0, rect.x1, w, rng);
    let py = corner(rect.y0, rect.y1, h, rng);
    let mut pixels = Vec::with_capacity(total);
    for r in py..py + patch {
        for c in px..px + patch {
            pixels.push((c, r));
        }
    }
    let scatter = total.saturating_sub(patch * patch);
    let inside: Vec<(usize, usize)> = (0..h)
        .flat_map(|r| (0..w).map(move |c| (c, r)))
        .filter(|&(c, r)| frame.mask.get(c, r))
        .collect();
    let n_in = if inside.is_empty() { 0 } else { (interior * scatter as f64).round() as usize };
    for _ in 0..n_in {
        pixels.push(inside[rng.random_range(0..inside.len())]);
    }
    for _ in n_in..scatter {
        pixels.push((rng.random_range(rect.x0..rect.x1), rng.random_range(rect.y0..rect.y1)));
    }
    RayBatch { pixels, patch }
}

/// Poses of every frame, indexed like `Dataset::subjects[s].frames[f]`.
pub fn frame_states(model: &Model, data: &Dataset) -> Result<Vec<Vec<BodyState>>> {
    data.subjects
        .iter()
        .map(|sf| {
            sf.frames
                .iter()
                .map(|f| Ok(f.state(&model.template)?))
                .collect::<Result<Vec<_>>>()
        })
        .collect()
}

/// Loss of one pair on a given ray batch. Returns the tape, the loss terms
/// and the parameter bindings so the caller can differentiate.
#[allow(clippy::too_many_arguments)]
pub fn pair_loss<R: Rng + ?Sized>(
    model: &Model,
    perc: &dyn PerceptualDistance,
    weights: &LossWeights,
    pair: (&Frame, &BodyState, &Frame, &BodyState),
    batch: &RayBatch,
    requires_grad: bool,
    jitter: Option<&mut R>,
) -> Result<(Tape, LossTerms, crate::diffcore::BoundParams)> {
    let (input, input_state, target, target_state) = pair;
    let mut tape = Tape::new();
    let bp = model.bind(&mut tape, requires_grad);
    let bank = model.build_bank(&mut tape, &bp, input, input_state)?;
    let rays = batch.rays(target)?;
    let out = model.render_rays(&mut tape, &bp, &bank, target_state, &rays, jitter)?;
    let (rgb, m) = batch.targets(target)?;
    let rgb = tape.constant(rgb);
    let m = tape.constant(m);
    let color = photometric(&mut tape, out.color, rgb)?;
    let mask = mask_loss(&mut tape, out.opacity, m)?;
    let np = batch.patch * batch.patch;
    let pred_patch = tape.narrow(out.color, 0, 0, np)?;
    let gt_patch = tape.narrow(rgb, 0, 0, np)?;
    let hw = (batch.patch, batch.patch);
    let ssim = ssim_loss(&mut tape, pred_patch, gt_patch, hw)?;
    let p = perc.distance(&mut tape, pred_patch, gt_patch, hw)?;
    let terms = LossTerms::assemble(&mut tape, weights, color, mask, ssim, p)?;
    Ok((tape, terms, bp))
}

pub fn check_finite(report: &LossReport, step: u64) -> Result<()> {
    for (term, v) in [
        ("L_color", report.color),
        ("L_mask", report.mask),
        ("L_ssim", report.ssim),
        ("L_perc", report.perc),
        ("total", report.total),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite { term: term.into(), step });
        }
    }
    Ok(())
}

/// Random stream of one training step; independent of how the run was
/// split into invocations.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7472_6169_6e5f_7374);
    rng.set_stream(step);
    rng
}

/// Per-step record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub report: LossReport,
    pub lr: f64,
}

impl StepLog {
    pub fn to_line(&self) -> String {
        let r = &self.report;
        format!(
            "{}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}",
            self.step, r.color, r.mask, r.ssim, r.perc, r.total, self.lr
        )
    }
}

/// Outcome of a training run.
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub model: Model,
    pub adam: AdamState,
    pub logs: Vec<StepLog>,
    pub steps_per_epoch: u64,
    pub last_checkpoint: PathBuf,
}

impl TrainSummary {
    /// Mean total loss of each epoch present in the logs.
    pub fn epoch_means(&self) -> Vec<f64> {
        let mut sums: Vec<(f64, usize)> = Vec::new();
        for l in &self.logs {
            let e = (l.step / self.steps_per_epoch) as usize;
            if sums.len() <= e {
                sums.resize(e + 1, (0.0, 0));
            }
            sums[e].0 += l.report.total;
            sums[e].1 += 1;
        }
        sums.into_iter().filter(|s| s.1 > 0).map(|(s, n)| s / n as f64).collect()
    }
}

pub fn steps_per_epoch(data: &Dataset) -> u64 {
    let n = data.split(Split::Train).len();
    (n * data.poses * data.views).max(1) as u64
}

/// Trains on the train split, writing `train_log.tsv`, `init.ckpt`,
/// `epoch_<e>.ckpt` and `last.ckpt` into `out`. With `resume`, training
/// continues from the checkpoint's step, parameters and optimizer state.
pub fn train(cfg: &Config, data: &Dataset, out: &Path, resume: Option<&Checkpoint>) -> Result<TrainSummary> {
    cfg.validate()?;
    let subjects = data.split(Split::Train);
    if subjects.is_empty() || data.poses * data.views == 0 {
        return Err(Error::Data("training split is empty".into()));
    }
    if data.resolution != cfg.resolution {
        return Err(Error::Data(format!(
            "dataset resolution {} differs from config resolution {}",
            data.resolution, cfg.resolution
        )));
    }
    std::fs::create_dir_all(out).map_err(Error::io(out))?;
    let mut model = Model::new(cfg)?;
    let mut adam = AdamState::from_config(&model.store, cfg);
    let mut start = 0u64;
    if let Some(ck) = resume {
        model.store.load_from(&ck.params)?;
        if let Some(a) = &ck.adam {
            adam.restore(&model.store, a)?;
        }
        start = ck.step;
    } else {
        Checkpoint::new(&model, 0, 0, None).save(&out.join("init.ckpt"))?;
    }
    let spe = steps_per_epoch(data);
    let mut total = spe * cfg.epochs as u64;
    if cfg.max_steps > 0 {
        total = total.min(cfg.max_steps as u64);
    }
    let schedule = Schedule::from_config(cfg);
    let weights = LossWeights::from_config(cfg);
    let perc = RandomFilterDistance::from_config(cfg);
    let states = frame_states(&model, data)?;

    let log_path = out.join("train_log.tsv");
    let mut log = if resume.is_some() && log_path.exists() {
        std::fs::OpenOptions::new()
            .append(true)
            .open(&log_path)
            .map_err(Error::io(&log_path))?
    } else {
        let mut f = std::fs::File::create(&log_path).map_err(Error::io(&log_path))?;
        writeln!(f, "# config_hash {}", cfg.hash()).map_err(Error::io(&log_path))?;
        writeln!(f, "{LOG_HEADER}").map_err(Error::io(&log_path))?;
        f
    };

    let mut logs = Vec::new();
    let mut last = out.join("last.ckpt");
    for step in start..total {
        let epoch = (step / spe) as usize;
        let lr = schedule.lr(epoch);
        let mut rng = step_rng(cfg.seed, step);
        let pair = sample_pair(data, &subjects, &mut rng)?;
        let (si, fi, ti) = locate(data, &pair);
        let target_state = &states[si][ti];
        let rect = model.bounds(target_state).project_rect(&pair.target.cam);
        let batch = sample_rays(
            pair.target,
            &rect,
            cfg.rays_per_batch,
            cfg.patch_size,
            cfg.interior_fraction,
            &mut rng,
        );
        let jitter = if cfg.jitter { Some(&mut rng) } else { None };
        let (tape, terms, bp) = pair_loss(
            &model,
            &perc,
            &weights,
            (pair.input, &states[si][fi], pair.target, target_state),
            &batch,
            true,
            jitter,
        )?;
        let report = terms.report(&tape);
        check_finite(&report, step)?;
        let grads = tape.backward(terms.total)?;
        let grads = model.store.collect_grads(&bp, &grads);
        if let Some(bad) = grads.iter().position(|g| g.data().iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite {
                term: format!("gradient of {}", model.store.name(model.store.ids().nth(bad).expect("index"))),
                step,
            });
        }
        drop(tape);
        adam.step(&mut model.store, &grads, lr)?;
        let entry = StepLog { step, report, lr };
        writeln!(log, "{}", entry.to_line()).map_err(Error::io(&log_path))?;
        logs.push(entry);
        let done = step + 1;
        if done % spe == 0 || done == total {
            let ck = Checkpoint::new(&model, done / spe, done, Some(adam.moments()));
            if done % spe == 0 {
                ck.save(&out.join(format!("epoch_{}.ckpt", done / spe)))?;
            }
            last = out.join("last.ckpt");
            ck.save(&last)?;
        }
    }
    log.flush().map_err(Error::io(&log_path))?;
    if start >= total && !last.exists() {
        Checkpoint::new(&model, start / spe, start, Some(adam.moments())).save(&last)?;
    }
    Ok(TrainSummary {
        model,
        adam,
        logs,
        steps_per_epoch: spe,
        last_checkpoint: last,
    })
}

/// Subject index and frame indices of a sampled pair.
fn locate(data: &Dataset, pair: &FramePair) -> (usize, usize, usize) {
    let s = data
        .subjects
        .iter()
        .position(|sf| std::ptr::eq(&sf.subject, pair.subject))
        .expect("pair subject belongs to the dataset");
    let frames = &data.subjects[s].frames;
    let idx = |f: &Frame| frames.iter().position(|g| std::ptr::eq(g, f)).expect("frame belongs to subject");
    (s, idx(pair.input), idx(pair.target))
}
