//! Pinhole cameras, rays, boxes, stratified sampling and positional
//! encoding.
//!
//! Pixel convention: `(u, v)` is measured from the top-left image corner,
//! `u` to the right and `v` downwards. Pixel `(col, row)` covers
//! `[col, col+1) × [row, row+1)` and its center is `(col + 0.5, row + 0.5)`.
//! Cameras follow the computer-vision frame: `x` right, `y` down, `z`
//! forward.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("pixel ({u}, {v}) outside {width}x{height} image")]
    PixelOutOfBounds {
        u: f64,
        v: f64,
        width: usize,
        height: usize,
    },
    #[error("point is behind the camera (depth {0})")]
    BehindCamera(f64),
    #[error("sample count must be at least 1")]
    NoSamples,
    #[error("camera record: {0}")]
    Parse(String),
}

/// Calibrated pinhole camera with world-to-camera extrinsics.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraView {
    pub k: Matrix3<f64>,
    pub r: Matrix3<f64>,
    pub t: Vec3,
    pub width: usize,
    pub height: usize,
}

impl CameraView {
    pub fn new(
        k: Matrix3<f64>,
        r: Matrix3<f64>,
        t: Vec3,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let bad = |m: &str| Err(GeometryError::InvalidCamera(m.to_string()));
        if width == 0 || height == 0 {
            return bad("empty image");
        }
        if (r.transpose() * r - Matrix3::identity()).abs().max() > 1e-10 {
            return bad("rotation is not orthonormal");
        }
        if r.determinant() < 0.0 {
            return bad("rotation has negative determinant");
        }
        if k[(0, 0)] <= 0.0 || k[(1, 1)] <= 0.0 {
            return bad("focal lengths must be positive");
        }
        if k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 || k[(2, 2)] != 1.0 {
            return bad("intrinsics last row must be (0, 0, 1)");
        }
        let (cx, cy) = (k[(0, 2)], k[(1, 2)]);
        if !(0.0..=width as f64).contains(&cx) || !(0.0..=height as f64).contains(&cy) {
            return bad("principal point outside the image");
        }
        Ok(Self {
            k,
            r,
            t,
            width,
            height,
        })
    }

    /// Camera at `eye` looking at `target` with world `up` roughly upward
    /// in the image.
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let fwd = (target - eye).normalize();
        let right = fwd.cross(&up);
        if right.norm() < 1e-12 {
            return Err(GeometryError::InvalidCamera(
                "view direction parallel to up".into(),
            ));
        }
        let right = right.normalize();
        let down = fwd.cross(&right);
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), fwd.transpose()]);
        let t = -(r * eye);
        let k = Matrix3::new(
            focal,
            0.0,
            width as f64 / 2.0,
            0.0,
            focal,
            height as f64 / 2.0,
            0.0,
            0.0,
            1.0,
        );
        Self::new(k, r, t, width, height)
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        -(self.r.transpose() * self.t)
    }

    /// Forward (optical) axis in world coordinates.
    pub fn forward(&self) -> Vec3 {
        self.r.row(2).transpose()
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
    }

    /// Ray through continuous pixel coordinates `(u, v)`.
    pub fn cast_ray(&self, u: f64, v: f64) -> Result<Ray, GeometryError> {
        if !self.contains(u, v) {
            return Err(GeometryError::PixelOutOfBounds {
                u,
                v,
                width: self.width,
                height: self.height,
            });
        }
        let (fx, fy, s) = (self.k[(0, 0)], self.k[(1, 1)], self.k[(0, 1)]);
        let (cx, cy) = (self.k[(0, 2)], self.k[(1, 2)]);
        let y = (v - cy) / fy;
        let x = (u - cx - s * y) / fx;
        let d_cam = Vec3::new(x, y, 1.0);
        let dir = (self.r.transpose() * d_cam).normalize();
        Ok(Ray {
            origin: self.center(),
            dir,
            t_near: 0.0,
            t_far: f64::INFINITY,
            pixel: (u, v),
        })
    }

    /// Ray through the center of pixel `(col, row)`.
    pub fn pixel_ray(&self, col: usize, row: usize) -> Result<Ray, GeometryError> {
        self.cast_ray(col as f64 + 0.5, row as f64 + 0.5)
    }

    /// Projects a world point to `(u, v, depth)`.
    pub fn project(&self, x: &Vec3) -> Result<(f64, f64, f64), GeometryError> {
        let pc = self.r * x + self.t;
        if pc.z <= 0.0 {
            return Err(GeometryError::BehindCamera(pc.z));
        }
        let h = self.k * pc;
        Ok((h.x / h.z, h.y / h.z, pc.z))
    }

    /// Camera-frame depth of a world point (may be negative).
    pub fn depth(&self, x: &Vec3) -> f64 {
        (self.r * x + self.t).z
    }

    /// One text record: 9 intrinsic values (row-major K), 12 extrinsic
    /// values (row-major 3×4 `[R | t]`), width, height.
    pub fn to_record(&self) -> String {
        let mut parts: Vec<String> = Vec::with_capacity(23);
        for i in 0..3 {
            for j in 0..3 {
                parts.push(format!("{}", self.k[(i, j)]));
            }
        }
        for i in 0..3 {
            for j in 0..3 {
                parts.push(format!("{}", self.r[(i, j)]));
            }
            parts.push(format!("{}", self.t[i]));
        }
        parts.push(self.width.to_string());
        parts.push(self.height.to_string());
        parts.join(" ")
    }

    pub fn from_record(line: &str) -> Result<Self, GeometryError> {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 23 {
            return Err(GeometryError::Parse(format!(
                "expected 23 fields, got {}",
                toks.len()
            )));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| GeometryError::Parse(format!("bad number {s:?}")))
        };
        let mut v = [0.0; 21];
        for (slot, tok) in v.iter_mut().zip(&toks) {
            *slot = num(tok)?;
        }
        let k = Matrix3::from_row_slice(&v[0..9]);
        let e = &v[9..21];
        let r = Matrix3::new(e[0], e[1], e[2], e[4], e[5], e[6], e[8], e[9], e[10]);
        let t = Vec3::new(e[3], e[7], e[11]);
        let dim = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| GeometryError::Parse(format!("bad image extent {s:?}")))
        };
        Self::new(k, r, t, dim(toks[21])?, dim(toks[22])?)
    }
}

/// Camera ray `o + t·d` restricted to `[t_near, t_far]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
    pub t_near: f64,
    pub t_far: f64,
    pub pixel: (f64, f64),
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.dir * t
    }
}

/// Axis-aligned box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        debug_assert!(min.iter().zip(max.iter()).all(|(a, b)| a <= b));
        Self { min, max }
    }

    pub fn from_points<'a>(pts: impl IntoIterator<Item = &'a Vec3>) -> Self {
        let mut min = Vec3::repeat(f64::INFINITY);
        let mut max = Vec3::repeat(f64::NEG_INFINITY);
        for p in pts {
            min = min.inf(p);
            max = max.sup(p);
        }
        Self { min, max }
    }

    pub fn inflate(&self, margin: f64) -> Self {
        Self {
            min: self.min - Vec3::repeat(margin),
            max: self.max + Vec3::repeat(margin),
        }
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn corners(&self) -> [Vec3; 8] {
        let mut out = [Vec3::zeros(); 8];
        for (i, c) in out.iter_mut().enumerate() {
            *c = Vec3::new(
                if i & 1 == 0 { self.min.x } else { self.max.x },
                if i & 2 == 0 { self.min.y } else { self.max.y },
                if i & 4 == 0 { self.min.z } else { self.max.z },
            );
        }
        out
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    /// Slab-method entry/exit distances clipped to `t ≥ 0`; `None` on a
    /// miss.
    pub fn intersect(&self, ray: &Ray) -> Option<(f64, f64)> {
        let mut t0 = 0.0f64;
        let mut t1 = f64::INFINITY;
        for i in 0..3 {
            let (o, d) = (ray.origin[i], ray.dir[i]);
            if d == 0.0 {
                if o < self.min[i] || o > self.max[i] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d;
            let (mut a, mut b) = ((self.min[i] - o) * inv, (self.max[i] - o) * inv);
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
            if t0 > t1 {
                return None;
            }
        }
        (t1 > t0).then_some((t0, t1))
    }

    /// Bounding pixel rectangle of the projected box, clipped to the
    /// image. Covers the whole image when any corner is behind the camera.
    pub fn project_rect(&self, cam: &CameraView) -> PixelRect {
        let full = PixelRect {
            x0: 0,
            y0: 0,
            x1: cam.width,
            y1: cam.height,
        };
        let mut umin = f64::INFINITY;
        let mut umax = f64::NEG_INFINITY;
        let mut vmin = f64::INFINITY;
        let mut vmax = f64::NEG_INFINITY;
        for c in self.corners() {
            match cam.project(&c) {
                Ok((u, v, _)) => {
                    umin = umin.min(u);
                    umax = umax.max(u);
                    vmin = vmin.min(v);
                    vmax = vmax.max(v);
                }
                Err(_) => return full,
            }
        }
        let clip = |x: f64, hi: usize| x.clamp(0.0, hi as f64) as usize;
        PixelRect {
            x0: clip(umin.floor(), cam.width),
            y0: clip(vmin.floor(), cam.height),
            x1: clip(umax.ceil(), cam.width),
            y1: clip(vmax.ceil(), cam.height),
        }
    }
}

/// Half-open pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelRect {
    pub fn width(&self) -> usize {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> usize {
        self.y1.saturating_sub(self.y0)
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, col: usize, row: usize) -> bool {
        col >= self.x0 && col < self.x1 && row >= self.y0 && row < self.y1
    }

    /// Row-major mask of an `width × height` image.
    pub fn mask(&self, width: usize, height: usize) -> Vec<bool> {
        (0..height)
            .flat_map(|r| (0..width).map(move |c| (c, r)))
            .map(|(c, r)| self.contains(c, r))
            .collect()
    }
}

/// `n` sample distances, one per equal sub-interval of `[t_near, t_far]`:
/// bin midpoints without jitter, uniform within each bin with jitter.
pub fn stratified_samples<R: Rng + ?Sized>(
    t_near: f64,
    t_far: f64,
    n: usize,
    jitter: Option<&mut R>,
) -> Result<Vec<f64>, GeometryError> {
    if n == 0 {
        return Err(GeometryError::NoSamples);
    }
    let w = (t_far - t_near) / n as f64;
    Ok(match jitter {
        None => (0..n).map(|i| t_near + (i as f64 + 0.5) * w).collect(),
        Some(rng) => (0..n)
            .map(|i| t_near + (i as f64 + rng.random::<f64>()) * w)
            .collect(),
    })
}

/// [`stratified_samples`] with an explicit seed for the jitter.
pub fn stratified_samples_seeded(
    t_near: f64,
    t_far: f64,
    n: usize,
    jitter: bool,
    seed: u64,
) -> Result<Vec<f64>, GeometryError> {
    if jitter {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        stratified_samples(t_near, t_far, n, Some(&mut rng))
    } else {
        stratified_samples::<ChaCha8Rng>(t_near, t_far, n, None)
    }
}

/// Sinusoidal encoding: per coordinate `x`, emits
/// `sin(2^0 πx), cos(2^0 πx), …, sin(2^(L-1) πx), cos(2^(L-1) πx)`.
pub fn posenc(x: &[f64], freqs: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * freqs * x.len());
    posenc_into(x, freqs, &mut out);
    out
}

pub fn posenc_into(x: &[f64], freqs: usize, out: &mut Vec<f64>) {
    for &xi in x {
        let mut f = PI;
        for _ in 0..freqs {
            let (s, c) = (f * xi).sin_cos();
            out.push(s);
            out.push(c);
            f *= 2.0;
        }
    }
}
