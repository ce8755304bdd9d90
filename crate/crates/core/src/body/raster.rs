use crate::geometry::{CameraView, Vec3};

use super::BodyState;

/// Visibility tolerance in meters.
pub const VISIBILITY_EPS: f64 = 0.01;

/// Per-pixel nearest camera depth; `f64::INFINITY` where nothing covers
/// the pixel center.
#[derive(Clone, Debug)]
pub struct DepthBuffer {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
}

impl DepthBuffer {
    pub fn at(&self, col: usize, row: usize) -> f64 {
        self.depth[row * self.width + col]
    }

    /// Coverage mask, row-major.
    pub fn mask(&self) -> Vec<bool> {
        self.depth.iter().map(|d| d.is_finite()).collect()
    }
}

fn edge(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> f64 {
    (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
}

/// Z-buffers `triangles` over `vertices` at the camera's resolution,
/// sampling at pixel centers with perspective-correct depth. Triangles
/// touching or behind the camera plane are skipped.
pub fn rasterize_depth(vertices: &[Vec3], triangles: &[[u32; 3]], cam: &CameraView) -> DepthBuffer {
    let (w, h) = (cam.width, cam.height);
    let mut depth = vec![f64::INFINITY; w * h];
    let proj: Vec<Option<(f64, f64, f64)>> = vertices.iter().map(|v| cam.project(v).ok()).collect();
    for tri in triangles {
        let (Some(p0), Some(p1), Some(p2)) = (
            proj[tri[0] as usize],
            proj[tri[1] as usize],
            proj[tri[2] as usize],
        ) else {
            continue;
        };
        let (a, b, c) = ((p0.0, p0.1), (p1.0, p1.1), (p2.0, p2.1));
        let area = edge(a, b, c);
        if area.abs() < 1e-12 {
            continue;
        }
        let umin = a.0.min(b.0).min(c.0);
        let umax = a.0.max(b.0).max(c.0);
        let vmin = a.1.min(b.1).min(c.1);
        let vmax = a.1.max(b.1).max(c.1);
        // pixel centers at col + 0.5 inside [umin, umax]
        let c0 = (umin - 0.5).ceil().max(0.0) as usize;
        let r0 = (vmin - 0.5).ceil().max(0.0) as usize;
        if umax < 0.5 || vmax < 0.5 {
            continue;
        }
        let c1 = ((umax - 0.5).floor() as usize).min(w.saturating_sub(1));
        let r1 = ((vmax - 0.5).floor() as usize).min(h.saturating_sub(1));
        for row in r0..=r1 {
            for col in c0..=c1 {
                let p = (col as f64 + 0.5, row as f64 + 0.5);
                let b0 = edge(b, c, p) / area;
                let b1 = edge(c, a, p) / area;
                let b2 = edge(a, b, p) / area;
                if b0 < 0.0 || b1 < 0.0 || b2 < 0.0 {
                    continue;
                }
                let z = 1.0 / (b0 / p0.2 + b1 / p1.2 + b2 / p2.2);
                let slot = &mut depth[row * w + col];
                if z < *slot {
                    *slot = z;
                }
            }
        }
    }
    DepthBuffer {
        width: w,
        height: h,
        depth,
    }
}

/// A vertex is visible when it projects inside the image and its camera
/// depth is within [`VISIBILITY_EPS`] of the depth buffer at its pixel.
pub fn visible_vertices(state: &BodyState, cam: &CameraView, triangles: &[[u32; 3]]) -> Vec<bool> {
    let zbuf = rasterize_depth(&state.posed, triangles, cam);
    state
        .posed
        .iter()
        .map(|v| match cam.project(v) {
            Ok((u, vv, z)) if cam.contains(u, vv) => {
                z <= zbuf.at(u as usize, vv as usize) + VISIBILITY_EPS
            }
            _ => false,
        })
        .collect()
}
