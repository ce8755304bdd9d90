use rand::Rng;

use crate::body::BodyState;
use crate::config::Config;
use crate::diffcore::{BoundParams, ParamStore, Tape, Tensor, Var};
use crate::error::Result;
use crate::geometry::{CameraView, Vec3};
use crate::nn::{bilinear_taps, leaky_gain, Linear, LEAK};

use super::ImageFeatures;

/// Features on the active cells of a `G³` grid over `[-1, 1]³`.
#[derive(Clone, Debug)]
pub struct SparseVolume {
    pub grid: usize,
    /// Sorted linear cell indices `(z·G + y)·G + x`.
    pub active: Vec<u32>,
    /// `[A + 1, D]`; the last row is zero and stands for inactive cells.
    pub features: Var,
}

impl SparseVolume {
    pub fn lookup(&self, cell: u32) -> Option<usize> {
        self.active.binary_search(&cell).ok()
    }

    pub fn zero_row(&self) -> u32 {
        self.active.len() as u32
    }
}

/// Cell containing a normalized coordinate.
pub fn voxel_of(x: &Vec3, grid: usize) -> [usize; 3] {
    let g = grid as f64;
    let f = |c: f64| (((c + 1.0) * 0.5 * g).floor().max(0.0) as usize).min(grid - 1);
    [f(x.x), f(x.y), f(x.z)]
}

pub fn linear_cell(c: [usize; 3], grid: usize) -> u32 {
    ((c[2] * grid + c[1]) * grid + c[0]) as u32
}

/// Submanifold `3³` convolutions over the active cells.
#[derive(Clone, Debug)]
pub struct SparseConvNet {
    pub layers: Vec<Linear>,
    pub grid: usize,
    pub dim: usize,
}

impl SparseConvNet {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &Config, rng: &mut R) -> Self {
        let mut c_in = cfg.map_channels();
        let layers = (0..cfg.sparse_layers)
            .map(|i| {
                let last = i + 1 == cfg.sparse_layers;
                let gain = if last { 1.0 } else { leaky_gain() };
                let l = Linear::new(store, &format!("vol.{i}"), 27 * c_in, cfg.point_dim, true, gain, rng);
                c_in = cfg.point_dim;
                l
            })
            .collect();
        Self {
            layers,
            grid: cfg.voxel_grid,
            dim: cfg.point_dim,
        }
    }

    /// Samples the 2D map at every visible vertex, averages per cell in
    /// normalized canonical space and runs the sparse convolutions.
    pub fn build(
        &self,
        tape: &mut Tape,
        bp: &BoundParams,
        feats: &ImageFeatures,
        state: &BodyState,
        cam: &CameraView,
        visible: &[bool],
    ) -> Result<SparseVolume> {
        let (verts, per_vertex) = vertex_features(tape, feats, state, cam, visible)?;
        let mut cells: Vec<(u32, usize)> = verts
            .iter()
            .enumerate()
            .map(|(row, &v)| {
                let c = voxel_of(&state.normalize_canonical(&state.canonical[v]), self.grid);
                (linear_cell(c, self.grid), row)
            })
            .collect();
        cells.sort_unstable();
        let mut active: Vec<u32> = cells.iter().map(|c| c.0).collect();
        active.dedup();
        if active.is_empty() {
            let features = tape.constant(Tensor::zeros(&[1, self.dim]));
            return Ok(SparseVolume {
                grid: self.grid,
                active,
                features,
            });
        }
        // cell averages
        let groups: Vec<&[(u32, usize)]> = cells.chunk_by(|a, b| a.0 == b.0).collect();
        let k = groups.iter().map(|g| g.len()).max().unwrap_or(1);
        let mut idx = Vec::with_capacity(groups.len() * k);
        let mut wt = Vec::with_capacity(groups.len() * k);
        for g in &groups {
            let w = 1.0 / g.len() as f64;
            for j in 0..k {
                match g.get(j) {
                    Some(&(_, row)) => {
                        idx.push(row as u32);
                        wt.push(w);
                    }
                    None => {
                        idx.push(0);
                        wt.push(0.0);
                    }
                }
            }
        }
        let mut x = tape.gather(per_vertex, idx, wt, k)?;
        let plan = neighbour_plan(&active, self.grid);
        let a = active.len();
        for (i, layer) in self.layers.iter().enumerate() {
            let c = tape.shape(x)[1];
            let zero = tape.constant(Tensor::zeros(&[1, c]));
            let table = tape.concat(&[x, zero], 0)?;
            let cols = tape.gather(table, plan.0.clone(), plan.1.clone(), 1)?;
            let cols = tape.reshape(cols, &[a, 27 * c])?;
            x = layer.forward(tape, bp, cols)?;
            if i + 1 < self.layers.len() {
                x = tape.leaky_relu(x, LEAK);
            }
        }
        let zero = tape.constant(Tensor::zeros(&[1, self.dim]));
        let features = tape.concat(&[x, zero], 0)?;
        Ok(SparseVolume {
            grid: self.grid,
            active,
            features,
        })
    }
}

/// Bilinear samples `[V, C]` of the 2D map at the projections of the
/// visible posed vertices, with their vertex indices.
pub fn vertex_features(
    tape: &mut Tape,
    feats: &ImageFeatures,
    state: &BodyState,
    cam: &CameraView,
    visible: &[bool],
) -> Result<(Vec<usize>, Var)> {
    let mut verts = Vec::new();
    let mut idx = Vec::new();
    let mut wt = Vec::new();
    for (v, _) in visible.iter().enumerate().filter(|(_, &vis)| vis) {
        let Ok((u, vv, _)) = cam.project(&state.posed[v]) else {
            continue;
        };
        verts.push(v);
        for (i, w) in bilinear_taps(u, vv, feats.width, feats.height) {
            idx.push(i);
            wt.push(w);
        }
    }
    let out = if verts.is_empty() {
        let c = tape.shape(feats.map2d)[1];
        tape.constant(Tensor::zeros(&[0, c]))
    } else {
        tape.gather(feats.map2d, idx, wt, 4)?
    };
    Ok((verts, out))
}

/// For each active cell and each of the 27 offsets (z, y, x order), the
/// row of the neighbour, or the zero row `A` when inactive.
fn neighbour_plan(active: &[u32], grid: usize) -> (std::rc::Rc<[u32]>, std::rc::Rc<[f64]>) {
    let g = grid as isize;
    let zero = active.len() as u32;
    let mut idx = Vec::with_capacity(active.len() * 27);
    let mut wt = Vec::with_capacity(active.len() * 27);
    for &cell in active {
        let c = cell as isize;
        let (x, y, z) = (c % g, (c / g) % g, c / (g * g));
        for dz in -1..=1 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny, nz) = (x + dx, y + dy, z + dz);
                    let inside = (0..g).contains(&nx) && (0..g).contains(&ny) && (0..g).contains(&nz);
                    let hit = inside
                        .then(|| active.binary_search(&(((nz * g + ny) * g + nx) as u32)).ok())
                        .flatten();
                    match hit {
                        Some(j) => {
                            idx.push(j as u32);
                            wt.push(1.0);
                        }
                        None => {
                            idx.push(zero);
                            wt.push(0.0);
                        }
                    }
                }
            }
        }
    }
    (idx.into(), wt.into())
}

/// Trilinear taps over cell centers; inactive or out-of-grid corners get
/// the zero row with weight 0.
pub fn volume_taps(vol: &SparseVolume, x: &Vec3) -> [(u32, f64); 8] {
    let g = vol.grid;
    let mut out = [(vol.zero_row(), 0.0); 8];
    let coord = |c: f64| {
        let t = (c + 1.0) * 0.5 * g as f64 - 0.5;
        let i0 = t.floor();
        (i0 as isize, t - i0)
    };
    let (cx, cy, cz) = (coord(x.x), coord(x.y), coord(x.z));
    let mut n = 0;
    for dz in 0..2 {
        for dy in 0..2 {
            for dx in 0..2 {
                let w = [1.0 - cx.1, cx.1][dx] * [1.0 - cy.1, cy.1][dy] * [1.0 - cz.1, cz.1][dz];
                let (ix, iy, iz) = (cx.0 + dx as isize, cy.0 + dy as isize, cz.0 + dz as isize);
                let inside = [ix, iy, iz].iter().all(|&i| (0..g as isize).contains(&i));
                if inside {
                    let cell = linear_cell([ix as usize, iy as usize, iz as usize], g);
                    if let Some(row) = vol.lookup(cell) {
                        out[n] = (row as u32, w);
                    }
                }
                n += 1;
            }
        }
    }
    out
}

/// Trilinear point features `[P, D]` at normalized canonical points.
pub fn query_point_volume(tape: &mut Tape, vol: &SparseVolume, points: &[Vec3]) -> Result<Var> {
    let mut idx = Vec::with_capacity(points.len() * 8);
    let mut wt = Vec::with_capacity(points.len() * 8);
    for p in points {
        for (i, w) in volume_taps(vol, p) {
            idx.push(i);
            wt.push(w);
        }
    }
    Ok(tape.gather(vol.features, idx, wt, 8)?)
}
