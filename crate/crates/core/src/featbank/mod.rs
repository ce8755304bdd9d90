//! Hierarchical feature bank built from one input view: global tri-plane,
//! point-level sparse volume and pixel-aligned 2D map, each queried at
//! canonical points.

mod encoder;
mod triplane;
mod volume;

pub use encoder::{Encoder, ImageFeatures};
pub use triplane::{query_triplane, triplane_taps, TriPlane, TriplaneGenerator, PLANE_AXES};
pub use volume::{
    linear_cell, query_point_volume, vertex_features, volume_taps, voxel_of, SparseConvNet, SparseVolume,
};

use crate::body::{visible_vertices, BodyState, BodyTemplate};
use crate::diffcore::{Tape, Var};
use crate::error::Result;
use crate::geometry::{CameraView, Vec3};
use crate::nn::bilinear_taps;

/// Pixel-aligned lookup of one canonical point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelQuery {
    pub taps: [(u32, f64); 4],
    /// Meters to the nearest canonical vertex.
    pub gate_distance: f64,
    pub gated: bool,
}

/// Skins `x_c` with the weights of its nearest canonical vertex into the
/// input pose, projects it with the input camera and returns the bilinear
/// taps. Points farther than `threshold` from the body, or behind the
/// camera, are gated.
pub fn pixel_query(
    x_c: &Vec3,
    state: &BodyState,
    tmpl: &BodyTemplate,
    cam: &CameraView,
    threshold: f64,
) -> PixelQuery {
    let (v, dist) = state.nearest_canonical(x_c);
    let x_o = state.vertex_lbs(tmpl, v, x_c);
    match cam.project(&x_o) {
        Ok((u, vv, _)) => PixelQuery {
            taps: bilinear_taps(u, vv, cam.width, cam.height),
            gate_distance: dist,
            gated: dist > threshold,
        },
        Err(_) => PixelQuery {
            taps: [(0, 0.0); 4],
            gate_distance: dist,
            gated: true,
        },
    }
}

/// Pixel-aligned features `[P, C]` for precomputed queries.
pub fn query_pixel_aligned(tape: &mut Tape, feats: &ImageFeatures, queries: &[PixelQuery]) -> Result<Var> {
    let mut idx = Vec::with_capacity(queries.len() * 4);
    let mut wt = Vec::with_capacity(queries.len() * 4);
    for q in queries {
        for (i, w) in q.taps {
            idx.push(i);
            wt.push(if q.gated { 0.0 } else { w });
        }
    }
    Ok(tape.gather(feats.map2d, idx, wt, 4)?)
}

/// Per-point outputs of the three paths.
#[derive(Clone, Copy, Debug)]
pub struct PointFeatures {
    pub global: Var,
    pub point: Var,
    pub pixel: Var,
}

/// Everything built from the input view, living on one tape.
#[derive(Clone, Debug)]
pub struct FeatureBank<'a> {
    pub image: ImageFeatures,
    pub planes: TriPlane,
    pub style: Var,
    pub volume: SparseVolume,
    pub state: &'a BodyState,
    pub cam: CameraView,
    pub gate_threshold: f64,
}

/// Networks that build a [`FeatureBank`].
#[derive(Clone, Debug)]
pub struct BankBuilder {
    pub encoder: Encoder,
    pub triplane: TriplaneGenerator,
    pub volume: SparseConvNet,
    pub gate_threshold: f64,
}

impl BankBuilder {
    #[allow(clippy::too_many_arguments)]
    pub fn build<'a>(
        &self,
        tape: &mut Tape,
        bp: &crate::diffcore::BoundParams,
        img: &crate::image::Image,
        mask: &crate::image::Mask,
        state: &'a BodyState,
        tmpl: &BodyTemplate,
        cam: &CameraView,
    ) -> Result<FeatureBank<'a>> {
        let image = self.encoder.encode(tape, bp, img, mask)?;
        let (planes, style) = self.triplane.build(tape, bp, image.latent)?;
        let visible = visible_vertices(state, cam, &tmpl.triangles);
        let volume = self.volume.build(tape, bp, &image, state, cam, &visible)?;
        Ok(FeatureBank {
            image,
            planes,
            style,
            volume,
            state,
            cam: cam.clone(),
            gate_threshold: self.gate_threshold,
        })
    }
}

impl FeatureBank<'_> {
    pub fn pixel_query(&self, x_c: &Vec3, tmpl: &BodyTemplate) -> PixelQuery {
        pixel_query(x_c, self.state, tmpl, &self.cam, self.gate_threshold)
    }

    /// Queries the three paths at canonical points (meters) whose pixel
    /// lookups are already resolved.
    pub fn query(&self, tape: &mut Tape, points: &[Vec3], queries: &[PixelQuery]) -> Result<PointFeatures> {
        let normalized: Vec<Vec3> = points.iter().map(|p| self.state.normalize_canonical(p)).collect();
        Ok(PointFeatures {
            global: query_triplane(tape, &self.planes, &normalized)?,
            point: query_point_volume(tape, &self.volume, &normalized)?,
            pixel: query_pixel_aligned(tape, &self.image, queries)?,
        })
    }
}

impl<'a> FeatureBank<'a> {
    /// Copy of the bank whose tensors are constants on `dst`.
    pub fn detach(&self, src: &Tape, dst: &mut Tape) -> FeatureBank<'a> {
        let mut copy = |v: Var| dst.constant(src.value(v).clone());
        FeatureBank {
            image: ImageFeatures {
                latent: copy(self.image.latent),
                map2d: copy(self.image.map2d),
                ..self.image
            },
            planes: TriPlane {
                table: copy(self.planes.table),
                ..self.planes
            },
            style: copy(self.style),
            volume: SparseVolume {
                features: copy(self.volume.features),
                ..self.volume.clone()
            },
            state: self.state,
            cam: self.cam.clone(),
            gate_threshold: self.gate_threshold,
        }
    }
}
