use rand::Rng;

use crate::config::Config;
use crate::diffcore::{BoundParams, ParamId, ParamStore, Tape, Var};
use crate::error::Result;
use crate::geometry::Vec3;
use crate::nn::{conv2d, leaky_gain, resize_bilinear, uniform_init, Linear, Mlp, LEAK};

/// Coordinate pairs of the xy, xz and yz planes.
pub const PLANE_AXES: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

/// Three `R×R` planes of `F` channels stored as one `[R·R·3, F]` table:
/// row `(j·R + i)·3 + k` holds node `(i, j)` of plane `k`.
#[derive(Clone, Copy, Debug)]
pub struct TriPlane {
    pub table: Var,
    pub res: usize,
    pub channels: usize,
}

/// Latent → style MLP → style-modulated upsampling decoder → planes.
#[derive(Clone, Debug)]
pub struct TriplaneGenerator {
    pub mapping: Mlp,
    pub constant: ParamId,
    pub modulations: Vec<Linear>,
    pub convs: Vec<Linear>,
    pub to_planes: Linear,
    pub res: usize,
    pub channels: usize,
    pub width: usize,
}

impl TriplaneGenerator {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &Config, rng: &mut R) -> Self {
        let latent = cfg.encoder_widths.iter().sum::<usize>();
        let mut dims = vec![latent];
        dims.extend(std::iter::repeat_n(cfg.style_dim, cfg.mapping_layers));
        let mapping = Mlp::new(store, "tp.map", &dims, rng);
        let w = cfg.plane_width;
        let constant = store.add("tp.const", uniform_init(&[16, w], 3, 1.0, rng));
        let blocks = (cfg.plane_res / 4).trailing_zeros() as usize;
        let modulations = (0..=blocks)
            .map(|i| Linear::new(store, &format!("tp.mod.{i}"), cfg.style_dim, w, true, 0.5, rng))
            .collect();
        let convs = (0..blocks)
            .map(|i| Linear::new(store, &format!("tp.conv.{i}"), 9 * w, w, true, leaky_gain(), rng))
            .collect();
        let to_planes = Linear::new(store, "tp.out", w, 3 * cfg.plane_channels, true, 1.0, rng);
        Self {
            mapping,
            constant,
            modulations,
            convs,
            to_planes,
            res: cfg.plane_res,
            channels: cfg.plane_channels,
            width: w,
        }
    }

    /// Returns the planes and the style vector `[1, style_dim]`.
    pub fn build(&self, tape: &mut Tape, bp: &BoundParams, latent: Var) -> Result<(TriPlane, Var)> {
        let style = self.mapping.forward(tape, bp, latent)?;
        let mut x = bp.var(self.constant);
        let mut side = 4;
        for (conv, modl) in self.convs.iter().zip(&self.modulations) {
            x = resize_bilinear(tape, x, (side, side), (2 * side, 2 * side))?;
            side *= 2;
            x = self.modulate(tape, bp, x, style, modl)?;
            let (y, _, _) = conv2d(tape, bp, x, (side, side), conv, 3, 1, 1)?;
            x = tape.leaky_relu(y, LEAK);
        }
        let last = self.modulations.last().expect("at least one modulation");
        x = self.modulate(tape, bp, x, style, last)?;
        let planes = self.to_planes.forward(tape, bp, x)?;
        let table = tape.reshape(planes, &[side * side * 3, self.channels])?;
        Ok((
            TriPlane {
                table,
                res: side,
                channels: self.channels,
            },
            style,
        ))
    }

    fn modulate(&self, tape: &mut Tape, bp: &BoundParams, x: Var, style: Var, m: &Linear) -> Result<Var> {
        let s = m.forward(tape, bp, style)?;
        let s = tape.add_scalar(s, 1.0);
        Ok(tape.mul(x, s)?)
    }
}

/// Bilinear taps (4 per plane, align-corners nodes) for a normalized
/// canonical point, clamped to `[-1, 1]³`.
pub fn triplane_taps(x: &Vec3, res: usize) -> [(u32, f64); 12] {
    let mut out = [(0u32, 0.0); 12];
    let node = |c: f64| {
        let g = (c.clamp(-1.0, 1.0) + 1.0) * 0.5 * (res - 1) as f64;
        let i0 = (g.floor() as usize).min(res - 2);
        (i0, g - i0 as f64)
    };
    for (k, &(a, b)) in PLANE_AXES.iter().enumerate() {
        let (i0, fi) = node(x[a]);
        let (j0, fj) = node(x[b]);
        let corners = [
            (i0, j0, (1.0 - fi) * (1.0 - fj)),
            (i0 + 1, j0, fi * (1.0 - fj)),
            (i0, j0 + 1, (1.0 - fi) * fj),
            (i0 + 1, j0 + 1, fi * fj),
        ];
        for (slot, (i, j, w)) in out[k * 4..k * 4 + 4].iter_mut().zip(corners) {
            *slot = (((j * res + i) * 3 + k) as u32, w);
        }
    }
    out
}

/// Summed plane features `[P, F]` at normalized canonical points.
pub fn query_triplane(tape: &mut Tape, tp: &TriPlane, points: &[Vec3]) -> Result<Var> {
    let mut idx = Vec::with_capacity(points.len() * 12);
    let mut wt = Vec::with_capacity(points.len() * 12);
    for p in points {
        for (i, w) in triplane_taps(p, tp.res) {
            idx.push(i);
            wt.push(w);
        }
    }
    Ok(tape.gather(tp.table, idx, wt, 12)?)
}
