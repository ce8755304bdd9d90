//! Parametric skinned body: shape and pose parameters to joints, per-joint
//! rigid transforms, forward and inverse linear blend skinning,
//! nearest-vertex queries and camera visibility.

mod io;
mod kdtree;
pub mod procedural;
mod raster;

pub use kdtree::{nearest_linear, KdTree};
pub use raster::{rasterize_depth, visible_vertices, DepthBuffer};

use nalgebra::{Matrix3, Matrix4, Rotation3, Vector3};
use thiserror::Error;

use crate::geometry::{Aabb, Vec3};

#[derive(Debug, Error)]
pub enum BodyError {
    #[error("{what}: expected {expected} values, got {got}")]
    Arity {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("blend weights sum to zero")]
    DegenerateWeights,
    #[error("invalid template: {0}")]
    Template(String),
    #[error("template file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Rest-pose body: vertices, skinning weights, joint tree, triangles and
/// a linear shape basis.
#[derive(Clone, Debug, PartialEq)]
pub struct BodyTemplate {
    pub vertices: Vec<Vec3>,
    /// Row-major `N × K`.
    pub weights: Vec<f64>,
    pub parents: Vec<Option<usize>>,
    pub joints: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
    /// Per shape coefficient, one offset per vertex.
    pub shape_dirs: Vec<Vec<Vec3>>,
    /// Per shape coefficient, one offset per joint.
    pub joint_shape_dirs: Vec<Vec<Vec3>>,
}

impl BodyTemplate {
    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn num_betas(&self) -> usize {
        self.shape_dirs.len()
    }

    pub fn weights_of(&self, v: usize) -> &[f64] {
        let k = self.num_joints();
        &self.weights[v * k..(v + 1) * k]
    }

    pub fn validate(&self) -> Result<(), BodyError> {
        let (n, k) = (self.num_vertices(), self.num_joints());
        let bad = |m: String| Err(BodyError::Template(m));
        if n == 0 || k == 0 {
            return bad("empty template".into());
        }
        if self.weights.len() != n * k {
            return bad(format!("weights hold {} values, need {}", self.weights.len(), n * k));
        }
        for v in 0..n {
            let w = self.weights_of(v);
            if w.iter().any(|&x| x < 0.0) {
                return bad(format!("vertex {v} has a negative weight"));
            }
            let s: f64 = w.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return bad(format!("vertex {v} weights sum to {s}"));
            }
        }
        if self.parents.len() != k || self.parents[0].is_some() {
            return bad("joint 0 must be the root".into());
        }
        for (j, p) in self.parents.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < j => {}
                _ => return bad(format!("joint {j} needs a parent with a lower index")),
            }
        }
        if self.triangles.iter().flatten().any(|&i| i as usize >= n) {
            return bad("triangle index out of range".into());
        }
        if self.joint_shape_dirs.len() != self.shape_dirs.len()
            || self.shape_dirs.iter().any(|d| d.len() != n)
            || self.joint_shape_dirs.iter().any(|d| d.len() != k)
        {
            return bad("shape basis extents do not match".into());
        }
        Ok(())
    }

    /// Canonical vertices and joints for shape coefficients `beta`.
    pub fn shaped(&self, beta: &[f64]) -> Result<(Vec<Vec3>, Vec<Vec3>), BodyError> {
        if beta.len() > self.num_betas() {
            return Err(BodyError::Arity {
                what: "shape coefficients",
                expected: self.num_betas(),
                got: beta.len(),
            });
        }
        let mut verts = self.vertices.clone();
        let mut joints = self.joints.clone();
        for (b, (vd, jd)) in beta
            .iter()
            .zip(self.shape_dirs.iter().zip(&self.joint_shape_dirs))
        {
            for (v, d) in verts.iter_mut().zip(vd) {
                *v += d * *b;
            }
            for (j, d) in joints.iter_mut().zip(jd) {
                *j += d * *b;
            }
        }
        Ok((verts, joints))
    }
}

/// Posed body. Immutable once built.
#[derive(Clone, Debug)]
pub struct BodyState {
    pub theta: Vec<f64>,
    pub beta: Vec<f64>,
    /// Canonical joint positions for `beta`.
    pub joints: Vec<Vec3>,
    /// Per-joint canonical-to-posed rigid transforms.
    pub transforms: Vec<Matrix4<f64>>,
    pub canonical: Vec<Vec3>,
    pub posed: Vec<Vec3>,
    /// Per-vertex inverse of the blended skinning matrix.
    inverse_blend: Vec<Matrix4<f64>>,
    canonical_tree: KdTree,
    posed_tree: KdTree,
    canonical_box: Aabb,
}

/// Axis-angle vector to rotation matrix.
pub fn rodrigues(aa: &Vec3) -> Matrix3<f64> {
    Rotation3::new(*aa).into_inner()
}

fn rigid(r: &Matrix3<f64>, t: &Vec3) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(t);
    m
}

/// Forward kinematics: canonical-to-posed transform `G_k` for each joint.
pub fn joint_transforms(
    parents: &[Option<usize>],
    joints: &[Vec3],
    theta: &[f64],
) -> Result<Vec<Matrix4<f64>>, BodyError> {
    let k = joints.len();
    if theta.len() != 3 * k {
        return Err(BodyError::Arity {
            what: "pose",
            expected: 3 * k,
            got: theta.len(),
        });
    }
    let mut world: Vec<Matrix4<f64>> = Vec::with_capacity(k);
    for j in 0..k {
        let r = rodrigues(&Vec3::new(theta[3 * j], theta[3 * j + 1], theta[3 * j + 2]));
        let local = match parents[j] {
            None => rigid(&r, &joints[j]),
            Some(p) => world[p] * rigid(&r, &(joints[j] - joints[p])),
        };
        world.push(local);
    }
    Ok(world
        .iter()
        .zip(joints)
        .map(|(a, j)| a * rigid(&Matrix3::identity(), &-j))
        .collect())
}

/// Weighted sum of the joint transforms.
pub fn blend_matrix(weights: &[f64], g: &[Matrix4<f64>]) -> Matrix4<f64> {
    let mut m = Matrix4::zeros();
    for (w, gk) in weights.iter().zip(g) {
        if *w != 0.0 {
            m += gk * *w;
        }
    }
    m
}

/// `x_o = Σ_k w_k G_k x_c` on homogeneous coordinates.
pub fn lbs(x_c: &Vec3, weights: &[f64], g: &[Matrix4<f64>]) -> Result<Vec3, BodyError> {
    if weights.len() != g.len() {
        return Err(BodyError::Arity {
            what: "blend weights",
            expected: g.len(),
            got: weights.len(),
        });
    }
    if weights.iter().sum::<f64>().abs() < 1e-12 {
        return Err(BodyError::DegenerateWeights);
    }
    Ok(apply(&blend_matrix(weights, g), x_c))
}

fn apply(m: &Matrix4<f64>, x: &Vec3) -> Vec3 {
    m.fixed_view::<3, 3>(0, 0) * x + m.fixed_view::<3, 1>(0, 3)
}

fn inverse_affine(m: &Matrix4<f64>, fallback: &Matrix4<f64>) -> Matrix4<f64> {
    let a: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into();
    let t: Vec3 = m.fixed_view::<3, 1>(0, 3).into();
    match a.try_inverse() {
        Some(ai) if a.determinant().abs() > 1e-9 => rigid(&ai, &-(ai * t)),
        _ => {
            let r: Matrix3<f64> = fallback.fixed_view::<3, 3>(0, 0).into();
            let t: Vec3 = fallback.fixed_view::<3, 1>(0, 3).into();
            rigid(&r.transpose(), &-(r.transpose() * t))
        }
    }
}

/// Poses `tmpl` with axis-angle `theta` (`K × 3`) and shape `beta`.
pub fn pose_body(tmpl: &BodyTemplate, theta: &[f64], beta: &[f64]) -> Result<BodyState, BodyError> {
    let (canonical, joints) = tmpl.shaped(beta)?;
    let transforms = joint_transforms(&tmpl.parents, &joints, theta)?;
    let k = tmpl.num_joints();
    let mut posed = Vec::with_capacity(canonical.len());
    let mut inverse_blend = Vec::with_capacity(canonical.len());
    for (v, xc) in canonical.iter().enumerate() {
        let w = tmpl.weights_of(v);
        let m = blend_matrix(w, &transforms);
        posed.push(apply(&m, xc));
        let dominant = (0..k)
            .max_by(|&a, &b| w[a].total_cmp(&w[b]).then(b.cmp(&a)))
            .unwrap_or(0);
        inverse_blend.push(inverse_affine(&m, &transforms[dominant]));
    }
    Ok(BodyState {
        theta: theta.to_vec(),
        beta: beta.to_vec(),
        joints,
        transforms,
        canonical_tree: KdTree::build(&canonical),
        posed_tree: KdTree::build(&posed),
        canonical_box: Aabb::from_points(&canonical),
        canonical,
        posed,
        inverse_blend,
    })
}

impl BodyState {
    /// Nearest posed vertex to `x_t` and its distance.
    pub fn nearest_posed(&self, x_t: &Vec3) -> (usize, f64) {
        self.posed_tree.nearest(x_t)
    }

    /// Nearest canonical vertex to `x_c` and its distance.
    pub fn nearest_canonical(&self, x_c: &Vec3) -> (usize, f64) {
        self.canonical_tree.nearest(x_c)
    }

    /// Maps a posed-space point to canonical space with the inverse
    /// blended matrix of its nearest posed vertex.
    pub fn inverse_lbs(&self, x_t: &Vec3) -> Vec3 {
        let (v, _) = self.nearest_posed(x_t);
        apply(&self.inverse_blend[v], x_t)
    }

    pub fn vertex_lbs(&self, tmpl: &BodyTemplate, v: usize, x_c: &Vec3) -> Vec3 {
        apply(&blend_matrix(tmpl.weights_of(v), &self.transforms), x_c)
    }

    pub fn posed_aabb(&self) -> Aabb {
        Aabb::from_points(&self.posed)
    }

    pub fn canonical_aabb(&self) -> Aabb {
        self.canonical_box
    }

    /// Per-axis affine map of the canonical AABB onto `[-0.9, 0.9]³`.
    pub fn normalize_canonical(&self, x_c: &Vec3) -> Vec3 {
        let b = &self.canonical_box;
        let c = b.center();
        let half = (b.max - b.min) * 0.5;
        Vec3::from_fn(|i, _| {
            if half[i] > 0.0 {
                0.9 * (x_c[i] - c[i]) / half[i]
            } else {
                0.0
            }
        })
    }
}

/// Nearest point of `vertices` to `x` by linear scan; lowest index on ties.
pub fn nearest_vertex(x: &Vec3, vertices: &[Vector3<f64>]) -> (usize, f64) {
    nearest_linear(vertices, x)
}
