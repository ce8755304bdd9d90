//! Feature fusion: per-path projection to tokens, one multi-head
//! self-attention layer over the (global, point, pixel) tokens with a
//! residual connection, then concatenation or mean of the attended tokens.

use rand::Rng;

use crate::config::Config;
use crate::diffcore::{BoundParams, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::featbank::PointFeatures;
use crate::nn::Linear;

pub const NUM_TOKENS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Concat,
    Mean,
}

#[derive(Clone, Debug)]
pub struct Fusion {
    /// Projections of the global, point and pixel features.
    pub proj: [Linear; NUM_TOKENS],
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub channels: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub reduce: Reduce,
}

/// Attention output of one batch of points.
#[derive(Clone, Debug)]
pub struct Attended {
    /// Tokens after output projection and residual, each `[P, C]`.
    pub tokens: Vec<Var>,
    /// Concatenated heads before the output projection, each `[P, H·d]`.
    pub heads: Vec<Var>,
    /// Attention weights per query token, each `[P·H, 3]`.
    pub weights: Vec<Var>,
}

impl Fusion {
    #[allow(clippy::too_many_arguments)]
    pub fn with_dims<R: Rng + ?Sized>(
        store: &mut ParamStore,
        inputs: [usize; NUM_TOKENS],
        channels: usize,
        heads: usize,
        head_dim: usize,
        reduce: Reduce,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || head_dim == 0 {
            return Err(Error::Data("attention needs at least one head of positive width".into()));
        }
        let names = ["fuse.global", "fuse.point", "fuse.pixel"];
        let proj = std::array::from_fn(|i| Linear::new(store, names[i], inputs[i], channels, true, 1.0, rng));
        let hd = heads * head_dim;
        Ok(Self {
            proj,
            q: Linear::new(store, "fuse.q", channels, hd, false, 1.0, rng),
            k: Linear::new(store, "fuse.k", channels, hd, false, 1.0, rng),
            v: Linear::new(store, "fuse.v", channels, hd, false, 1.0, rng),
            out: Linear::new(store, "fuse.out", hd, channels, true, 1.0, rng),
            channels,
            heads,
            head_dim,
            reduce,
        })
    }

    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &Config, rng: &mut R) -> Result<Self> {
        if cfg.head_dim == 0 && cfg.token_channels % cfg.heads != 0 {
            return Err(Error::Data(format!(
                "{} token channels are not divisible by {} heads",
                cfg.token_channels, cfg.heads
            )));
        }
        let reduce = if cfg.fusion_reduce == "mean" { Reduce::Mean } else { Reduce::Concat };
        Self::with_dims(
            store,
            [cfg.plane_channels, cfg.point_dim, cfg.map_channels()],
            cfg.token_channels,
            cfg.heads,
            cfg.resolved_head_dim(),
            reduce,
            rng,
        )
    }

    pub fn output_dim(&self) -> usize {
        match self.reduce {
            Reduce::Concat => NUM_TOKENS * self.channels,
            Reduce::Mean => self.channels,
        }
    }

    /// Tokens `[P, C]` in (global, point, pixel) order.
    pub fn make_tokens(&self, tape: &mut Tape, bp: &BoundParams, pf: &PointFeatures) -> Result<Vec<Var>> {
        [pf.global, pf.point, pf.pixel]
            .iter()
            .zip(&self.proj)
            .map(|(&f, p)| Ok(p.forward(tape, bp, f)?))
            .collect()
    }

    pub fn attend(&self, tape: &mut Tape, bp: &BoundParams, tokens: &[Var]) -> Result<Attended> {
        let p = tape.shape(tokens[0])[0];
        let (h, d) = (self.heads, self.head_dim);
        let split = |tape: &mut Tape, x: Var| tape.reshape(x, &[p * h, d]);
        let mut qs = Vec::with_capacity(NUM_TOKENS);
        let mut ks = Vec::with_capacity(NUM_TOKENS);
        let mut vs = Vec::with_capacity(NUM_TOKENS);
        for &t in tokens {
            let q = self.q.forward(tape, bp, t)?;
            qs.push(split(tape, q)?);
            let k = self.k.forward(tape, bp, t)?;
            ks.push(split(tape, k)?);
            let v = self.v.forward(tape, bp, t)?;
            vs.push(split(tape, v)?);
        }
        let scale = 1.0 / (d as f64).sqrt();
        let mut out = Attended {
            tokens: Vec::with_capacity(NUM_TOKENS),
            heads: Vec::with_capacity(NUM_TOKENS),
            weights: Vec::with_capacity(NUM_TOKENS),
        };
        for (i, &q) in qs.iter().enumerate() {
            let mut logits = Vec::with_capacity(NUM_TOKENS);
            for &k in &ks {
                let qk = tape.mul(q, k)?;
                let s = tape.sum_axis(qk, 1)?;
                let s = tape.scale(s, scale);
                logits.push(tape.reshape(s, &[p * h, 1])?);
            }
            let logits = tape.concat(&logits, 1)?;
            let w = tape.softmax(logits, 1)?;
            let mut acc: Option<Var> = None;
            for (j, &v) in vs.iter().enumerate() {
                let wj = tape.narrow(w, 1, j, 1)?;
                let term = tape.mul(wj, v)?;
                acc = Some(match acc {
                    None => term,
                    Some(a) => tape.add(a, term)?,
                });
            }
            let heads = tape.reshape(acc.expect("three tokens"), &[p, h * d])?;
            let projected = self.out.forward(tape, bp, heads)?;
            out.tokens.push(tape.add(projected, tokens[i])?);
            out.heads.push(heads);
            out.weights.push(w);
        }
        Ok(out)
    }

    /// Fused per-point feature `[P, 3C]` (concat) or `[P, C]` (mean).
    pub fn fuse(&self, tape: &mut Tape, attended: &Attended) -> Result<Var> {
        match self.reduce {
            Reduce::Concat => Ok(tape.concat(&attended.tokens, 1)?),
            Reduce::Mean => {
                let a = tape.add(attended.tokens[0], attended.tokens[1])?;
                let a = tape.add(a, attended.tokens[2])?;
                Ok(tape.scale(a, 1.0 / NUM_TOKENS as f64))
            }
        }
    }

    pub fn forward(&self, tape: &mut Tape, bp: &BoundParams, pf: &PointFeatures) -> Result<Var> {
        let tokens = self.make_tokens(tape, bp, pf)?;
        let att = self.attend(tape, bp, &tokens)?;
        self.fuse(tape, &att)
    }
}
