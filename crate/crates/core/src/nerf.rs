//! Radiance decoder, alpha compositing and the full per-ray pipeline:
//! samples → inverse skinning → feature queries → gate → fusion →
//! decoder → compositing.

use rand::Rng;

use crate::body::{BodyState, BodyTemplate};
use crate::config::Config;
use crate::diffcore::{BoundParams, ParamStore, Tape, Tensor, Var};
use crate::error::Result;
use crate::featbank::{FeatureBank, PixelQuery};
use crate::fusion::Fusion;
use crate::geometry::{posenc_into, stratified_samples, Aabb, Ray, Vec3};
use crate::nn::Mlp;

/// MLP on `[posenc(x_c), f_trans]` producing raw density and colour.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub mlp: Mlp,
    pub freqs: usize,
    pub sigma_scale: f64,
}

impl Decoder {
    pub fn with_dims<R: Rng + ?Sized>(
        store: &mut ParamStore,
        feature_dim: usize,
        freqs: usize,
        width: usize,
        depth: usize,
        sigma_scale: f64,
        rng: &mut R,
    ) -> Self {
        let mut dims = vec![6 * freqs + feature_dim];
        dims.extend(std::iter::repeat_n(width, depth));
        dims.push(4);
        Self {
            mlp: Mlp::new(store, "dec", &dims, rng),
            freqs,
            sigma_scale,
        }
    }

    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &Config, feature_dim: usize, rng: &mut R) -> Self {
        Self::with_dims(
            store,
            feature_dim,
            cfg.pe_points,
            cfg.decoder_width,
            cfg.decoder_depth,
            cfg.sigma_scale,
            rng,
        )
    }

    /// `[P, 4]`: raw density, then colour through a sigmoid.
    pub fn decode(&self, tape: &mut Tape, bp: &BoundParams, points: &[Vec3], f_trans: Var) -> Result<Var> {
        let mut enc = Vec::with_capacity(points.len() * 6 * self.freqs);
        for p in points {
            posenc_into(p.as_slice(), self.freqs, &mut enc);
        }
        let enc = tape.constant(Tensor::new(vec![points.len(), 6 * self.freqs], enc)?);
        let x = tape.concat(&[enc, f_trans], 1)?;
        let y = self.mlp.forward(tape, bp, x)?;
        let sigma = tape.narrow(y, 1, 0, 1)?;
        let sigma = tape.scale(sigma, self.sigma_scale);
        let rgb = tape.narrow(y, 1, 1, 3)?;
        let rgb = tape.sigmoid(rgb);
        Ok(tape.concat(&[sigma, rgb], 1)?)
    }
}

/// Composited colour `[R, 3]`, opacity `[R]` and final transmittance `[R]`.
#[derive(Clone, Copy, Debug)]
pub struct Composite {
    pub color: Var,
    pub opacity: Var,
    pub transmittance: Var,
    /// Per-sample weights `T_i·α_i`, `[R, N]`.
    pub weights: Var,
}

/// Alpha compositing of `[R·N, 4]` raw samples (raw density, rgb) with
/// spacings `deltas` (`R·N`). Density is activated with softplus; the
/// background is black.
pub fn composite(tape: &mut Tape, raw: Var, deltas: &[f64], n: usize) -> Result<Composite> {
    let r = deltas.len() / n;
    let sigma = tape.narrow(raw, 1, 0, 1)?;
    let sigma = tape.softplus(sigma);
    let sigma = tape.reshape(sigma, &[r, n])?;
    let delta = tape.constant(Tensor::new(vec![r, n], deltas.to_vec())?);
    let sd = tape.mul(sigma, delta)?;
    let cum = tape.cumsum(sd, 1, true)?;
    let neg = tape.neg(cum);
    let trans = tape.exp(neg);
    let neg_sd = tape.neg(sd);
    let keep = tape.exp(neg_sd);
    let neg_keep = tape.neg(keep);
    let alpha = tape.add_scalar(neg_keep, 1.0);
    let weights = tape.mul(trans, alpha)?;
    let opacity = tape.sum_axis(weights, 1)?;
    let total = tape.sum_axis(sd, 1)?;
    let neg_total = tape.neg(total);
    let transmittance = tape.exp(neg_total);
    let rgb = tape.narrow(raw, 1, 1, 3)?;
    let w = tape.reshape(weights, &[r * n, 1])?;
    let wc = tape.mul(w, rgb)?;
    let wc = tape.reshape(wc, &[r, n, 3])?;
    let color = tape.sum_axis(wc, 1)?;
    Ok(Composite {
        color,
        opacity,
        transmittance,
        weights,
    })
}

/// Spacings `t_{i+1} − t_i`, the last one reaching `t_far`.
pub fn ray_deltas(ts: &[f64], t_far: f64) -> Vec<f64> {
    ts.iter()
        .enumerate()
        .map(|(i, &t)| ts.get(i + 1).copied().unwrap_or(t_far) - t)
        .collect()
}

/// Sample layout of a ray batch, resolved without the tape.
#[derive(Clone, Debug, Default)]
pub struct SamplePlan {
    pub n_rays: usize,
    pub n_samples: usize,
    /// Canonical positions (meters) of the ungated samples.
    pub points: Vec<Vec3>,
    pub queries: Vec<PixelQuery>,
    /// Per sample, row in the decoded table; `points.len()` means gated.
    pub slots: Vec<u32>,
    pub deltas: Vec<f64>,
    pub t: Vec<f64>,
    /// Gate distance of every sample (infinite on rays that miss the box).
    pub gate_distance: Vec<f64>,
    pub hit: Vec<bool>,
}

impl SamplePlan {
    pub fn gated_count(&self) -> usize {
        self.slots.iter().filter(|&&s| s as usize == self.points.len()).count()
    }
}

/// Samples each ray inside `bounds`, maps samples to canonical space with
/// the target body and resolves gates and pixel lookups against the bank.
#[allow(clippy::too_many_arguments)]
pub fn plan_samples<R: Rng + ?Sized>(
    rays: &[Ray],
    bounds: &Aabb,
    target: &BodyState,
    bank: &FeatureBank,
    tmpl: &BodyTemplate,
    n: usize,
    mut jitter: Option<&mut R>,
) -> Result<SamplePlan> {
    let mut plan = SamplePlan {
        n_rays: rays.len(),
        n_samples: n,
        ..Default::default()
    };
    let total = rays.len() * n;
    plan.slots.reserve(total);
    plan.deltas.reserve(total);
    let mut gated = Vec::with_capacity(total);
    for ray in rays {
        let Some((t0, t1)) = bounds.intersect(ray) else {
            plan.hit.push(false);
            for _ in 0..n {
                plan.t.push(0.0);
                plan.deltas.push(0.0);
                plan.gate_distance.push(f64::INFINITY);
                gated.push(true);
            }
            continue;
        };
        plan.hit.push(true);
        let ts = stratified_samples(t0, t1, n, jitter.as_deref_mut())?;
        plan.deltas.extend(ray_deltas(&ts, t1));
        for &t in &ts {
            plan.t.push(t);
            let x_c = target.inverse_lbs(&ray.at(t));
            let q = bank.pixel_query(&x_c, tmpl);
            plan.gate_distance.push(q.gate_distance);
            gated.push(q.gated);
            if !q.gated {
                plan.points.push(x_c);
                plan.queries.push(q);
            }
        }
    }
    let gate_row = plan.points.len() as u32;
    let mut next = 0u32;
    for g in gated {
        if g {
            plan.slots.push(gate_row);
        } else {
            plan.slots.push(next);
            next += 1;
        }
    }
    Ok(plan)
}

/// Decoded `[R·N, 4]` raw samples: ungated samples go through the feature
/// bank, fusion and decoder, gated ones receive `(gate_sigma, 0, 0, 0)`.
pub fn decode_plan(
    tape: &mut Tape,
    bp: &BoundParams,
    bank: &FeatureBank,
    fusion: &Fusion,
    decoder: &Decoder,
    plan: &SamplePlan,
    gate_sigma: f64,
) -> Result<Var> {
    let gate = tape.constant(Tensor::new(vec![1, 4], vec![gate_sigma, 0.0, 0.0, 0.0])?);
    let table = if plan.points.is_empty() {
        gate
    } else {
        let pf = bank.query(tape, &plan.points, &plan.queries)?;
        let f = fusion.forward(tape, bp, &pf)?;
        let normalized: Vec<Vec3> = plan.points.iter().map(|p| bank.state.normalize_canonical(p)).collect();
        let dec = decoder.decode(tape, bp, &normalized, f)?;
        tape.concat(&[dec, gate], 0)?
    };
    let ones = vec![1.0; plan.slots.len()];
    Ok(tape.gather(table, plan.slots.clone(), ones, 1)?)
}

/// Full pipeline for a ray batch.
#[allow(clippy::too_many_arguments)]
pub fn render_rays<R: Rng + ?Sized>(
    tape: &mut Tape,
    bp: &BoundParams,
    bank: &FeatureBank,
    fusion: &Fusion,
    decoder: &Decoder,
    target: &BodyState,
    tmpl: &BodyTemplate,
    rays: &[Ray],
    bounds: &Aabb,
    n: usize,
    gate_sigma: f64,
    jitter: Option<&mut R>,
) -> Result<(Composite, SamplePlan)> {
    let plan = plan_samples(rays, bounds, target, bank, tmpl, n, jitter)?;
    let raw = decode_plan(tape, bp, bank, fusion, decoder, &plan, gate_sigma)?;
    Ok((composite(tape, raw, &plan.deltas, n)?, plan))
}
