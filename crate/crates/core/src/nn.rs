//! Layer helpers on top of the tape: dense layers, 2D convolution by
//! im2col gather, bilinear resampling.
//!
//! Feature maps are stored as `[H·W, C]` tables (row-major pixels), which
//! is also the layout the gather op reads from.

use rand::Rng;

use crate::diffcore::{BoundParams, DiffError, ParamId, ParamStore, Tape, Tensor, Var};

type Result<T> = std::result::Result<T, DiffError>;

/// Negative slope of every leaky ReLU in the model.
pub const LEAK: f64 = 0.2;

/// Fan-in scaled uniform initializer: `U(-g·√(3/fan_in), g·√(3/fan_in))`.
pub fn uniform_init<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut R) -> Tensor {
    let bound = gain * (3.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// Gain for layers followed by a leaky ReLU.
pub fn leaky_gain() -> f64 {
    (2.0 / (1.0 + LEAK * LEAK)).sqrt()
}

/// Affine layer `y = x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.w"), uniform_init(&[fan_in, fan_out], fan_in, gain, rng));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[fan_out])));
        Self {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bp: &BoundParams, x: Var) -> Result<Var> {
        let y = tape.matmul(x, bp.var(self.w))?;
        match self.b {
            Some(b) => tape.add(y, bp.var(b)),
            None => Ok(y),
        }
    }
}

/// Stack of linear layers with leaky ReLU between them (not after the
/// last one).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut R) -> Self {
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let gain = if i + 1 < n { leaky_gain() } else { 1.0 };
                Linear::new(store, &format!("{name}.{i}"), dims[i], dims[i + 1], true, gain, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn forward(&self, tape: &mut Tape, bp: &BoundParams, mut x: Var) -> Result<Var> {
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(tape, bp, x)?;
            if i + 1 < n {
                x = tape.leaky_relu(x, LEAK);
            }
        }
        Ok(x)
    }
}

/// Gather plan for a `k×k` convolution: per output pixel, one row index
/// per tap (weight 0 on padding).
pub fn im2col_plan(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> (Vec<u32>, Vec<f64>, usize, usize) {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut idx = Vec::with_capacity(ho * wo * k * k);
    let mut wt = Vec::with_capacity(ho * wo * k * k);
    for oy in 0..ho {
        for ox in 0..wo {
            for dy in 0..k {
                for dx in 0..k {
                    let y = (oy * stride + dy) as isize - pad as isize;
                    let x = (ox * stride + dx) as isize - pad as isize;
                    if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                        idx.push((y as usize * w + x as usize) as u32);
                        wt.push(1.0);
                    } else {
                        idx.push(0);
                        wt.push(0.0);
                    }
                }
            }
        }
    }
    (idx, wt, ho, wo)
}

/// 2D convolution of an `[h·w, c_in]` map; `layer` holds `[k·k·c_in, c_out]`
/// weights with taps ordered (dy, dx, c_in).
pub fn conv2d(
    tape: &mut Tape,
    bp: &BoundParams,
    x: Var,
    (h, w): (usize, usize),
    layer: &Linear,
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<(Var, usize, usize)> {
    let c_in = tape.shape(x)[1];
    let (idx, wt, ho, wo) = im2col_plan(h, w, k, stride, pad);
    let cols = tape.gather(x, idx, wt, 1)?;
    let cols = tape.reshape(cols, &[ho * wo, k * k * c_in])?;
    Ok((layer.forward(tape, bp, cols)?, ho, wo))
}

/// Bilinear taps at continuous pixel coordinates `(u, v)` (pixel centers at
/// half-integers); taps outside the `w×h` grid carry weight 0.
pub fn bilinear_taps(u: f64, v: f64, w: usize, h: usize) -> [(u32, f64); 4] {
    let x = u - 0.5;
    let y = v - 0.5;
    let x0 = x.floor();
    let y0 = y.floor();
    let (fx, fy) = (x - x0, y - y0);
    let mut out = [(0u32, 0.0); 4];
    let corners = [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x0 + 1.0, y0, fx * (1.0 - fy)),
        (x0, y0 + 1.0, (1.0 - fx) * fy),
        (x0 + 1.0, y0 + 1.0, fx * fy),
    ];
    for (slot, (cx, cy, wgt)) in out.iter_mut().zip(corners) {
        if cx >= 0.0 && cy >= 0.0 && cx < w as f64 && cy < h as f64 {
            *slot = ((cy as usize * w + cx as usize) as u32, wgt);
        }
    }
    out
}

/// Bilinear resize with half-pixel alignment and edge clamping.
pub fn resize_bilinear(tape: &mut Tape, x: Var, (h, w): (usize, usize), (h2, w2): (usize, usize)) -> Result<Var> {
    let mut idx = Vec::with_capacity(h2 * w2 * 4);
    let mut wt = Vec::with_capacity(h2 * w2 * 4);
    let sy = h as f64 / h2 as f64;
    let sx = w as f64 / w2 as f64;
    for r in 0..h2 {
        for c in 0..w2 {
            let v = ((r as f64 + 0.5) * sy).clamp(0.5, h as f64 - 0.5);
            let u = ((c as f64 + 0.5) * sx).clamp(0.5, w as f64 - 0.5);
            for (i, wgt) in bilinear_taps(u, v, w, h) {
                idx.push(i);
                wt.push(wgt);
            }
        }
    }
    tape.gather(x, idx, wt, 4)
}
