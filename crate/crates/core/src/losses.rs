//! Training losses (photometric, mask, SSIM, perceptual) and evaluation
//! metrics (PSNR, SSIM).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{im2col_plan, leaky_gain, uniform_init, LEAK};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub mask: f64,
    pub ssim: f64,
    pub perc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mask: 0.1,
            ssim: 0.01,
            perc: 0.01,
        }
    }
}

impl LossWeights {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            mask: cfg.lambda_mask,
            ssim: cfg.lambda_ssim,
            perc: cfg.lambda_perc,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub color: f64,
    pub mask: f64,
    pub ssim: f64,
    pub perc: f64,
    pub total: f64,
}

/// Loss terms on the tape plus their weighted sum.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub color: Var,
    pub mask: Var,
    pub ssim: Var,
    pub perc: Var,
    pub total: Var,
}

impl LossTerms {
    pub fn assemble(tape: &mut Tape, w: &LossWeights, color: Var, mask: Var, ssim: Var, perc: Var) -> Result<Self> {
        let m = tape.scale(mask, w.mask);
        let s = tape.scale(ssim, w.ssim);
        let p = tape.scale(perc, w.perc);
        let total = tape.add(color, m)?;
        let total = tape.add(total, s)?;
        let total = tape.add(total, p)?;
        Ok(Self {
            color,
            mask,
            ssim,
            perc,
            total,
        })
    }

    pub fn report(&self, tape: &Tape) -> LossReport {
        let v = |x: Var| tape.value(x).item();
        LossReport {
            color: v(self.color),
            mask: v(self.mask),
            ssim: v(self.ssim),
            perc: v(self.perc),
            total: v(self.total),
        }
    }
}

fn empty_check(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Data("loss over an empty ray set".into()));
    }
    Ok(())
}

/// `(1/|R|) Σ ‖Ĉ − C‖²` for `[R, 3]` colours.
pub fn photometric(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let r = tape.shape(pred)[0];
    empty_check(r)?;
    let d = tape.sub(pred, target)?;
    let sq = tape.square(d);
    let s = tape.sum(sq);
    Ok(tape.scale(s, 1.0 / r as f64))
}

/// Mean squared error between accumulated opacity and the binary mask.
pub fn mask_loss(tape: &mut Tape, opacity: Var, mask: Var) -> Result<Var> {
    empty_check(tape.value(opacity).numel())?;
    let d = tape.sub(opacity, mask)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

/// Normalized 1D Gaussian of the SSIM window.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

fn ssim_formula(ma: f64, mb: f64, saa: f64, sbb: f64, sab: f64) -> f64 {
    let va = saa - ma * ma;
    let vb = sbb - mb * mb;
    let cov = sab - ma * mb;
    ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
}

/// Windowed SSIM over valid windows of two `h×w×c` row-major arrays,
/// averaged over windows and channels.
pub fn ssim_raw(a: &[f64], b: &[f64], (h, w, c): (usize, usize, usize)) -> Result<f64> {
    if a.len() != h * w * c || b.len() != a.len() {
        return Err(Error::Data("ssim inputs differ in size".into()));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Dimension {
            what: "ssim patch",
            got: (w, h),
            want: (SSIM_WINDOW, SSIM_WINDOW),
        });
    }
    let g = gaussian_window();
    let (ho, wo) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for oy in 0..ho {
        for ox in 0..wo {
            for ch in 0..c {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let wt = g[dy] * g[dx];
                        let i = ((oy + dy) * w + ox + dx) * c + ch;
                        let (x, y) = (a[i], b[i]);
                        ma += wt * x;
                        mb += wt * y;
                        saa += wt * (x * x);
                        sbb += wt * (y * y);
                        sab += wt * (x * y);
                    }
                }
                total += ssim_formula(ma, mb, saa, sbb, sab);
            }
        }
    }
    Ok(total / (ho * wo * c) as f64)
}

pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::Dimension {
            what: "ssim image",
            got: (b.width, b.height),
            want: (a.width, a.height),
        });
    }
    ssim_raw(&a.data, &b.data, (a.height, a.width, 3))
}

/// Differentiable SSIM of `[h·w, c]` maps; returns a scalar.
pub fn ssim_tape(tape: &mut Tape, a: Var, b: Var, (h, w): (usize, usize)) -> Result<Var> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Dimension {
            what: "ssim patch",
            got: (w, h),
            want: (SSIM_WINDOW, SSIM_WINDOW),
        });
    }
    let g = gaussian_window();
    let (ho, wo) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let k = SSIM_WINDOW * SSIM_WINDOW;
    let mut idx = Vec::with_capacity(ho * wo * k);
    let mut wt = Vec::with_capacity(ho * wo * k);
    for oy in 0..ho {
        for ox in 0..wo {
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    idx.push(((oy + dy) * w + ox + dx) as u32);
                    wt.push(g[dy] * g[dx]);
                }
            }
        }
    }
    let idx: std::rc::Rc<[u32]> = idx.into();
    let wt: std::rc::Rc<[f64]> = wt.into();
    let blur = |tape: &mut Tape, x: Var| tape.gather(x, idx.clone(), wt.clone(), k);
    let ma = blur(tape, a)?;
    let mb = blur(tape, b)?;
    let aa = tape.mul(a, a)?;
    let bb = tape.mul(b, b)?;
    let ab = tape.mul(a, b)?;
    let saa = blur(tape, aa)?;
    let sbb = blur(tape, bb)?;
    let sab = blur(tape, ab)?;
    let mamb = tape.mul(ma, mb)?;
    let ma2 = tape.mul(ma, ma)?;
    let mb2 = tape.mul(mb, mb)?;
    let va = tape.sub(saa, ma2)?;
    let vb = tape.sub(sbb, mb2)?;
    let cov = tape.sub(sab, mamb)?;
    let n1 = tape.scale(mamb, 2.0);
    let n1 = tape.add_scalar(n1, SSIM_C1);
    let n2 = tape.scale(cov, 2.0);
    let n2 = tape.add_scalar(n2, SSIM_C2);
    let d1 = tape.add(ma2, mb2)?;
    let d1 = tape.add_scalar(d1, SSIM_C1);
    let d2 = tape.add(va, vb)?;
    let d2 = tape.add_scalar(d2, SSIM_C2);
    let num = tape.mul(n1, n2)?;
    let den = tape.mul(d1, d2)?;
    let map = tape.div(num, den)?;
    Ok(tape.mean(map))
}

/// `1 − SSIM`.
pub fn ssim_loss(tape: &mut Tape, a: Var, b: Var, hw: (usize, usize)) -> Result<Var> {
    let s = ssim_tape(tape, a, b, hw)?;
    let n = tape.neg(s);
    Ok(tape.add_scalar(n, 1.0))
}

/// Perceptual distance between two images of the same size.
pub trait PerceptualDistance {
    /// Differentiable distance between `[h·w, 3]` maps.
    fn distance(&self, tape: &mut Tape, a: Var, b: Var, hw: (usize, usize)) -> Result<Var>;
}

/// Fixed random filter stack: per scale a `3×3` same-padded convolution
/// and leaky ReLU, followed by `2×2` average pooling into the next scale.
/// Responses are unit-normalized per pixel across channels; the distance
/// is the mean squared difference, averaged over scales.
#[derive(Clone, Debug)]
pub struct RandomFilterDistance {
    pub filters: Vec<Tensor>,
}

impl RandomFilterDistance {
    pub fn new(seed: u64, filters: usize, scales: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c_in = 3;
        let filters = (0..scales)
            .map(|_| {
                let t = uniform_init(&[9 * c_in, filters], 9 * c_in, leaky_gain(), &mut rng);
                c_in = filters;
                t
            })
            .collect();
        Self { filters }
    }

    pub fn from_config(cfg: &Config) -> Self {
        Self::new(cfg.perc_seed, cfg.perc_filters, cfg.perc_scales)
    }

    fn responses(&self, tape: &mut Tape, x: Var, (mut h, mut w): (usize, usize)) -> Result<Vec<Var>> {
        let mut x = x;
        let mut out = Vec::with_capacity(self.filters.len());
        for (s, f) in self.filters.iter().enumerate() {
            let c_in = tape.shape(x)[1];
            let (idx, wt, _, _) = im2col_plan(h, w, 3, 1, 1);
            let cols = tape.gather(x, idx, wt, 1)?;
            let cols = tape.reshape(cols, &[h * w, 9 * c_in])?;
            let fv = tape.constant(f.clone());
            let y = tape.matmul(cols, fv)?;
            let y = tape.leaky_relu(y, LEAK);
            let sq = tape.square(y);
            let norm = tape.sum_axis(sq, 1)?;
            let norm = tape.add_scalar(norm, 1e-10);
            let inv = tape.powf(norm, -0.5);
            let inv = tape.reshape(inv, &[h * w, 1])?;
            out.push(tape.mul(y, inv)?);
            if s + 1 < self.filters.len() {
                let (ho, wo) = (h / 2, w / 2);
                if ho == 0 || wo == 0 {
                    break;
                }
                let mut idx = Vec::with_capacity(ho * wo * 4);
                for r in 0..ho {
                    for c in 0..wo {
                        for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            idx.push(((2 * r + dr) * w + 2 * c + dc) as u32);
                        }
                    }
                }
                x = tape.gather(y, idx, vec![0.25; ho * wo * 4], 4)?;
                (h, w) = (ho, wo);
            }
        }
        Ok(out)
    }
}

impl PerceptualDistance for RandomFilterDistance {
    fn distance(&self, tape: &mut Tape, a: Var, b: Var, hw: (usize, usize)) -> Result<Var> {
        if tape.shape(a) != tape.shape(b) {
            return Err(Error::Data(format!(
                "perceptual inputs differ: {:?} vs {:?}",
                tape.shape(a),
                tape.shape(b)
            )));
        }
        let ra = self.responses(tape, a, hw)?;
        let rb = self.responses(tape, b, hw)?;
        let n = ra.len() as f64;
        let mut total: Option<Var> = None;
        for (x, y) in ra.into_iter().zip(rb) {
            let d = tape.sub(x, y)?;
            let sq = tape.square(d);
            let m = tape.mean(sq);
            total = Some(match total {
                None => m,
                Some(t) => tape.add(t, m)?,
            });
        }
        let total = total.expect("at least one scale");
        Ok(tape.scale(total, 1.0 / n))
    }
}

/// `10·log10(1 / MSE)` over pixels where `mask` is set (all pixels when
/// `None`); `+∞` when the images agree exactly.
pub fn psnr(a: &Image, b: &Image, mask: Option<&[bool]>) -> f64 {
    let mut se = 0.0;
    let mut n = 0usize;
    for (i, (pa, pb)) in a.data.chunks(3).zip(b.data.chunks(3)).enumerate() {
        if mask.is_none_or(|m| m[i]) {
            for (x, y) in pa.iter().zip(pb) {
                se += (x - y) * (x - y);
            }
            n += 3;
        }
    }
    if n == 0 || se == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (n as f64 / se).log10()
}
