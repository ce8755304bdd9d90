//! Bundled five-joint capsule body.
//!
//! Joints: root (pelvis), waist, neck, left shoulder, right shoulder.
//! Seven capsules are rigidly bound to them; mesh vertices lie on the
//! capsule surfaces at roughly 5 cm spacing. Shape coefficient 0 stretches
//! the body vertically, coefficient 1 scales capsule radii.

use std::f64::consts::PI;

use nalgebra::Matrix4;

use super::{BodyState, BodyTemplate};
use crate::geometry::Vec3;

pub const NUM_JOINTS: usize = 5;
pub const JOINT_NAMES: [&str; NUM_JOINTS] = ["root", "waist", "neck", "l_shoulder", "r_shoulder"];
pub const PARENTS: [Option<usize>; NUM_JOINTS] = [None, Some(0), Some(1), Some(1), Some(1)];
pub const NUM_BETAS: usize = 2;

const SPACING: f64 = 0.05;
const MIN_AROUND: usize = 12;
const WEIGHT_EPS: f64 = 0.002;
const BURIED_DEPTH: f64 = 0.01;
const HEIGHT_GAIN: f64 = 0.1;
const GIRTH_GAIN: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Material {
    Skin,
    Shirt,
    Pants,
}

/// Segment `a → b` swept by a sphere of `radius`, bound to `joint`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Capsule {
    pub a: Vec3,
    pub b: Vec3,
    pub radius: f64,
    pub joint: usize,
    pub material: Material,
}

impl Capsule {
    pub fn closest_axis_point(&self, p: &Vec3) -> Vec3 {
        let ab = self.b - self.a;
        let s = ((p - self.a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
        self.a + ab * s
    }

    /// Signed distance to the surface (negative inside).
    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        (p - self.closest_axis_point(p)).norm() - self.radius
    }

    pub fn transformed(&self, m: &Matrix4<f64>) -> Capsule {
        let f = |x: &Vec3| (m * x.push(1.0)).xyz();
        Capsule {
            a: f(&self.a),
            b: f(&self.b),
            ..*self
        }
    }

    /// Smallest `t > 0` where `o + t·d` enters the capsule, for unit `d`.
    pub fn intersect(&self, o: &Vec3, d: &Vec3) -> Option<f64> {
        let mut best: Option<f64> = None;
        let mut keep = |t: f64| {
            if t > 1e-9 && best.is_none_or(|b| t < b) {
                best = Some(t);
            }
        };
        let ab = self.b - self.a;
        let len = ab.norm();
        let e = ab / len;
        // infinite cylinder restricted to the segment span
        let oa = o - self.a;
        let dp = d - e * d.dot(&e);
        let op = oa - e * oa.dot(&e);
        let qa = dp.norm_squared();
        if qa > 1e-15 {
            let qb = 2.0 * dp.dot(&op);
            let qc = op.norm_squared() - self.radius * self.radius;
            let disc = qb * qb - 4.0 * qa * qc;
            if disc >= 0.0 {
                let sq = disc.sqrt();
                for t in [(-qb - sq) / (2.0 * qa), (-qb + sq) / (2.0 * qa)] {
                    let s = (oa + d * t).dot(&e);
                    if (0.0..=len).contains(&s) {
                        keep(t);
                    }
                }
            }
        }
        for c in [self.a, self.b] {
            let oc = o - c;
            let b = oc.dot(d);
            let cc = oc.norm_squared() - self.radius * self.radius;
            let disc = b * b - cc;
            if disc >= 0.0 {
                let sq = disc.sqrt();
                keep(-b - sq);
                keep(-b + sq);
            }
        }
        best
    }
}

/// Canonical joint positions at zero shape.
pub fn rest_joints() -> [Vec3; NUM_JOINTS] {
    [
        Vec3::new(0.0, 0.0, 0.0),
        Vec3::new(0.0, 0.22, 0.0),
        Vec3::new(0.0, 0.62, 0.0),
        Vec3::new(0.22, 0.52, 0.0),
        Vec3::new(-0.22, 0.52, 0.0),
    ]
}

/// Canonical capsules at zero shape.
pub fn rest_capsules() -> Vec<Capsule> {
    let cap = |a: [f64; 3], b: [f64; 3], radius, joint, material| Capsule {
        a: Vec3::from(a),
        b: Vec3::from(b),
        radius,
        joint,
        material,
    };
    vec![
        cap([0.0, -0.05, 0.0], [0.0, 0.16, 0.0], 0.18, 0, Material::Pants),
        cap([0.0, 0.30, 0.0], [0.0, 0.44, 0.0], 0.19, 1, Material::Shirt),
        cap([0.0, 0.76, 0.0], [0.0, 0.82, 0.0], 0.12, 2, Material::Skin),
        cap([0.26, 0.52, 0.0], [0.70, 0.52, 0.0], 0.07, 3, Material::Skin),
        cap([-0.26, 0.52, 0.0], [-0.70, 0.52, 0.0], 0.07, 4, Material::Skin),
        cap([0.10, -0.14, 0.0], [0.10, -0.80, 0.0], 0.09, 0, Material::Pants),
        cap([-0.10, -0.14, 0.0], [-0.10, -0.80, 0.0], 0.09, 0, Material::Pants),
    ]
}

fn stretch(p: &Vec3, beta0: f64) -> Vec3 {
    Vec3::new(p.x, p.y * (1.0 + HEIGHT_GAIN * beta0), p.z)
}

/// Canonical capsules for shape coefficients `beta`.
pub fn shaped_capsules(beta: &[f64]) -> Vec<Capsule> {
    let b0 = beta.first().copied().unwrap_or(0.0);
    let b1 = beta.get(1).copied().unwrap_or(0.0);
    rest_capsules()
        .into_iter()
        .map(|c| Capsule {
            a: stretch(&c.a, b0),
            b: stretch(&c.b, b0),
            radius: c.radius * (1.0 + GIRTH_GAIN * b1),
            ..c
        })
        .collect()
}

/// Capsules moved rigidly by their joints' transforms.
pub fn posed_capsules(state: &BodyState) -> Vec<Capsule> {
    shaped_capsules(&state.beta)
        .iter()
        .map(|c| c.transformed(&state.transforms[c.joint]))
        .collect()
}

struct SurfacePoint {
    pos: Vec3,
    axis: Vec3,
}

fn perpendicular_basis(e: &Vec3) -> (Vec3, Vec3) {
    let helper = if e.z.abs() < 0.9 { Vec3::z() } else { Vec3::x() };
    let p = e.cross(&helper).normalize();
    (p, e.cross(&p))
}

/// Ring-structured capsule mesh: vertex positions with their axis points,
/// plus triangles indexed from `base`.
fn capsule_mesh(c: &Capsule, base: u32) -> (Vec<SurfacePoint>, Vec<[u32; 3]>) {
    let ab = c.b - c.a;
    let len = ab.norm();
    let e = ab / len;
    let (p, q) = perpendicular_basis(&e);
    let r = c.radius;
    let around = MIN_AROUND.max((2.0 * PI * r / SPACING).ceil() as usize);
    let n_cap = 2usize.max((0.5 * PI * r / SPACING).ceil() as usize);
    let n_cyl = 1usize.max((len / SPACING).ceil() as usize);

    // (axis point, polar angle) per ring, bottom to top
    let mut rings: Vec<(Vec3, f64)> = Vec::new();
    for i in 1..n_cap {
        rings.push((c.a, -0.5 * PI + 0.5 * PI * i as f64 / n_cap as f64));
    }
    for j in 0..=n_cyl {
        rings.push((c.a + ab * (j as f64 / n_cyl as f64), 0.0));
    }
    for i in 1..n_cap {
        rings.push((c.b, 0.5 * PI * i as f64 / n_cap as f64));
    }

    let mut pts = vec![SurfacePoint {
        pos: c.a - e * r,
        axis: c.a,
    }];
    for (center, phi) in &rings {
        for k in 0..around {
            // half-step offset keeps vertices off the axis-aligned silhouettes
            let a = 2.0 * PI * (k as f64 + 0.5) / around as f64;
            let radial = (p * a.cos() + q * a.sin()) * phi.cos() + e * phi.sin();
            pts.push(SurfacePoint {
                pos: center + radial * r,
                axis: *center,
            });
        }
    }
    pts.push(SurfacePoint {
        pos: c.b + e * r,
        axis: c.b,
    });

    let ring = |i: usize, k: usize| base + 1 + (i * around + k % around) as u32;
    let top = base + pts.len() as u32 - 1;
    let mut tris = Vec::new();
    for k in 0..around {
        tris.push([base, ring(0, k + 1), ring(0, k)]);
    }
    for i in 0..rings.len() - 1 {
        for k in 0..around {
            tris.push([ring(i, k), ring(i, k + 1), ring(i + 1, k + 1)]);
            tris.push([ring(i, k), ring(i + 1, k + 1), ring(i + 1, k)]);
        }
    }
    let last = rings.len() - 1;
    for k in 0..around {
        tris.push([top, ring(last, k), ring(last, k + 1)]);
    }
    (pts, tris)
}

/// Normalized inverse distances to the two nearest joints' capsules.
fn blend_weights(x: &Vec3, capsules: &[Capsule]) -> [f64; NUM_JOINTS] {
    let mut dist = [f64::INFINITY; NUM_JOINTS];
    for c in capsules {
        let d = c.signed_distance(x).max(0.0);
        dist[c.joint] = dist[c.joint].min(d);
    }
    let mut order: Vec<usize> = (0..NUM_JOINTS).collect();
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
    let mut w = [0.0; NUM_JOINTS];
    let (i, j) = (order[0], order[1]);
    let (wi, wj) = (1.0 / (dist[i] + WEIGHT_EPS), 1.0 / (dist[j] + WEIGHT_EPS));
    w[i] = wi / (wi + wj);
    w[j] = 1.0 - w[i];
    w
}

/// The bundled template.
pub fn template() -> BodyTemplate {
    let capsules = rest_capsules();
    let mut vertices = Vec::new();
    let mut axes = Vec::new();
    let mut triangles = Vec::new();
    for (ci, c) in capsules.iter().enumerate() {
        let (pts, tris) = capsule_mesh(c, 0);
        // drop vertices buried inside another capsule, with their triangles
        let mut remap = vec![u32::MAX; pts.len()];
        for (i, sp) in pts.iter().enumerate() {
            let buried = capsules
                .iter()
                .enumerate()
                .any(|(cj, o)| cj != ci && o.signed_distance(&sp.pos) < -BURIED_DEPTH);
            if !buried {
                remap[i] = vertices.len() as u32;
                vertices.push(sp.pos);
                axes.push(sp.axis);
            }
        }
        triangles.extend(tris.iter().filter_map(|t| {
            let m = t.map(|i| remap[i as usize]);
            m.iter().all(|&i| i != u32::MAX).then_some(m)
        }));
    }
    let weights = vertices
        .iter()
        .flat_map(|v| blend_weights(v, &capsules))
        .collect();
    let joints = rest_joints().to_vec();
    let height: Vec<Vec3> = axes
        .iter()
        .map(|a| Vec3::new(0.0, HEIGHT_GAIN * a.y, 0.0))
        .collect();
    let girth: Vec<Vec3> = vertices
        .iter()
        .zip(&axes)
        .map(|(v, a)| (v - a) * GIRTH_GAIN)
        .collect();
    let joint_height = joints
        .iter()
        .map(|j| Vec3::new(0.0, HEIGHT_GAIN * j.y, 0.0))
        .collect();
    BodyTemplate {
        vertices,
        weights,
        parents: PARENTS.to_vec(),
        joints,
        triangles,
        shape_dirs: vec![height, girth],
        joint_shape_dirs: vec![joint_height, vec![Vec3::zeros(); NUM_JOINTS]],
    }
}
