//! Central finite-difference checks of reverse-mode gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{BoundParams, DiffError, ParamStore, Tape, Tensor, Var};

/// Step of the central difference.
pub const FD_STEP: f64 = 1e-5;

/// Lower bound of the relative-error denominator, so coordinates whose
/// gradient is numerically zero are compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

/// One checked coordinate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradPoint {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub points: Vec<GradPoint>,
}

impl GradCheck {
    pub fn max_rel_err(&self) -> f64 {
        self.points.iter().map(|p| p.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradPoint> {
        self.points.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }

    /// Points whose analytic gradient is not negligible.
    pub fn nonzero(&self) -> usize {
        self.points.iter().filter(|p| p.analytic.abs() > 1e-10).count()
    }
}

fn eval<E, F>(inputs: &[Tensor], f: &F) -> Result<f64, E>
where
    E: From<DiffError>,
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let y = f(&mut tape, &vars)?;
    Ok(tape.value(y).item())
}

/// Compares the gradient of the scalar `f(inputs)` with central
/// differences at `points` coordinates drawn with `seed`. Coordinates with
/// a nonzero analytic gradient are preferred.
pub fn check_gradients<E, F>(inputs: &[Tensor], points: usize, seed: u64, f: F) -> Result<GradCheck, E>
where
    E: From<DiffError>,
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let y = f(&mut tape, &vars)?;
    let grads = tape.backward(y)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    drop(tape);

    let mut coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    coords.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (mut chosen, rest): (Vec<_>, Vec<_>) = coords
        .into_iter()
        .partition(|&(i, j)| analytic[i].data()[j].abs() > 1e-10);
    chosen.truncate(points);
    chosen.extend(rest.into_iter().take(points - chosen.len()));

    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(chosen.len());
    for (i, j) in chosen {
        let x0 = work[i].data()[j];
        work[i].data_mut()[j] = x0 + FD_STEP;
        let fp = eval(&work, &f)?;
        work[i].data_mut()[j] = x0 - FD_STEP;
        let fm = eval(&work, &f)?;
        work[i].data_mut()[j] = x0;
        let numeric = (fp - fm) / (2.0 * FD_STEP);
        let a = analytic[i].data()[j];
        let rel_err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        out.push(GradPoint {
            input: i,
            index: j,
            analytic: a,
            numeric,
            rel_err,
        });
    }
    Ok(GradCheck { points: out })
}

/// [`check_gradients`] over every parameter of `store`.
pub fn check_params<E, F>(store: &ParamStore, points: usize, seed: u64, f: F) -> Result<GradCheck, E>
where
    E: From<DiffError>,
    F: Fn(&mut Tape, &BoundParams) -> Result<Var, E>,
{
    let values: Vec<Tensor> = store.ids().map(|id| store.get(id).clone()).collect();
    check_gradients(&values, points, seed, |tape, vars| f(tape, &BoundParams::from_vars(vars.to_vec())))
}
