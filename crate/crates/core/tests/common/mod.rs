#![allow(dead_code)]

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use humanrf::body::{pose_body, procedural, BodyState, BodyTemplate};
use humanrf::config::Config;
use humanrf::diffcore::{check_gradients, BoundParams, GradCheck, ParamStore, Tape, Tensor, Var};
use humanrf::featbank::{
    pixel_query, query_pixel_aligned, query_point_volume, query_triplane, Encoder, ImageFeatures, SparseConvNet,
    TriPlane, TriplaneGenerator,
};
use humanrf::fusion::{Fusion, Reduce};
use humanrf::geometry::{CameraView, Vec3};
use humanrf::losses::{mask_loss, photometric, ssim_loss, PerceptualDistance, RandomFilterDistance};
use humanrf::model::Model;
use humanrf::nerf::{composite, Decoder};
use humanrf::synthcap::{render_analytic, ring_camera, sample_pose, sample_subject, Frame, Split};
use humanrf::trainer::sample_rays;
use humanrf::{Error, Result};

pub const GRAD_POINTS: usize = 20;
pub const GRAD_TOL: f64 = 1e-4;

/// Small network sizes that keep finite-difference checks fast.
pub fn tiny_config() -> Config {
    Config::from_text(
        "resolution = 32
encoder_widths = 4,4
style_dim = 8
mapping_layers = 1
plane_channels = 4
plane_res = 8
plane_width = 4
voxel_grid = 9
point_dim = 4
sparse_layers = 2
token_channels = 8
heads = 2
head_dim = 4
decoder_width = 16
decoder_depth = 2
pe_points = 3
pe_rgb = 2
samples_per_ray = 8
patch_size = 11
rays_per_batch = 160
",
    )
    .expect("tiny config parses")
}

pub struct Scene {
    pub tmpl: BodyTemplate,
    pub state: BodyState,
    pub cam: CameraView,
    pub frame: Frame,
}

/// One posed subject seen by ring camera `view` of `views`.
pub fn scene(cfg: &Config, seed: u64, view: usize, views: usize) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let subject = sample_subject(0, Split::Train, &mut rng);
    let theta = sample_pose(&mut rng);
    let tmpl = procedural::template();
    let state = pose_body(&tmpl, &theta, &subject.beta).expect("pose");
    let cam = ring_camera(cfg, view, views).expect("camera");
    let (image, mask) = render_analytic(&subject, &state, &cam);
    let frame = Frame {
        image,
        mask,
        cam: cam.clone(),
        theta,
        beta: subject.beta.clone(),
    };
    Scene { tmpl, state, cam, frame }
}

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// `Σ r ⊙ y` with a fixed random `r`, so every output element matters.
pub fn probe(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let r = tape.constant(random_tensor(tape.shape(y), -1.0, 1.0, seed));
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

fn store_values(store: &ParamStore) -> Vec<Tensor> {
    store.ids().map(|id| store.get(id).clone()).collect()
}

/// Points spread over the body: canonical vertices nudged by a few mm.
pub fn body_points(state: &BodyState, n: usize, seed: u64) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let v = state.canonical[rng.random_range(0..state.canonical.len())];
            v + Vec3::new(
                rng.random_range(-0.005..0.005),
                rng.random_range(-0.005..0.005),
                rng.random_range(-0.005..0.005),
            )
        })
        .collect()
}

/// One named gradient check with its runtime.
pub struct GradEntry {
    pub name: &'static str,
    pub check: GradCheck,
    pub elapsed: Duration,
}

impl GradEntry {
    pub fn passed(&self) -> bool {
        self.check.points.len() >= GRAD_POINTS && self.check.max_rel_err() <= GRAD_TOL
    }
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<GradCheck>) -> Result<GradEntry> {
    let t = Instant::now();
    let check = f()?;
    Ok(GradEntry {
        name,
        check,
        elapsed: t.elapsed(),
    })
}

pub fn grad_encoder(cfg: &Config, sc: &Scene) -> Result<GradCheck> {
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, cfg, &mut ChaCha8Rng::seed_from_u64(1));
    humanrf::diffcore::check_params(&store, GRAD_POINTS, 11, |tape, bp| {
        let f = enc.encode(tape, bp, &sc.frame.image, &sc.frame.mask)?;
        let a = probe(tape, f.map2d, 12)?;
        let b = probe(tape, f.latent, 13)?;
        Ok::<_, Error>(tape.add(a, b)?)
    })
}

pub fn grad_triplane_build(cfg: &Config) -> Result<GradCheck> {
    let mut store = ParamStore::new();
    let gen = TriplaneGenerator::new(&mut store, cfg, &mut ChaCha8Rng::seed_from_u64(2));
    let latent_dim: usize = cfg.encoder_widths.iter().sum();
    let mut inputs = store_values(&store);
    inputs.push(random_tensor(&[1, latent_dim], -1.0, 1.0, 21));
    let n = store.len();
    check_gradients(&inputs, GRAD_POINTS, 22, |tape, v| {
        let bp = BoundParams::from_vars(v[..n].to_vec());
        let (tp, style) = gen.build(tape, &bp, v[n])?;
        let a = probe(tape, tp.table, 23)?;
        let b = probe(tape, style, 24)?;
        Ok::<_, Error>(tape.add(a, b)?)
    })
}

pub fn grad_triplane_query() -> Result<GradCheck> {
    let (res, ch) = (8, 4);
    let table = random_tensor(&[res * res * 3, ch], -1.0, 1.0, 31);
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let pts: Vec<Vec3> = (0..40)
        .map(|_| Vec3::new(rng.random_range(-0.95..0.95), rng.random_range(-0.95..0.95), rng.random_range(-0.95..0.95)))
        .collect();
    check_gradients(&[table], GRAD_POINTS, 33, |tape, v| {
        let tp = TriPlane {
            table: v[0],
            res,
            channels: ch,
        };
        let y = query_triplane(tape, &tp, &pts)?;
        probe(tape, y, 34)
    })
}

fn map_features(v: Var, cfg: &Config) -> ImageFeatures {
    ImageFeatures {
        latent: v,
        map2d: v,
        width: cfg.resolution,
        height: cfg.resolution,
    }
}

pub fn grad_sparse_conv(cfg: &Config, sc: &Scene) -> Result<GradCheck> {
    let mut store = ParamStore::new();
    let net = SparseConvNet::new(&mut store, cfg, &mut ChaCha8Rng::seed_from_u64(4));
    let visible = humanrf::body::visible_vertices(&sc.state, &sc.cam, &sc.tmpl.triangles);
    let hw = cfg.resolution * cfg.resolution;
    let mut inputs = store_values(&store);
    inputs.push(random_tensor(&[hw, cfg.map_channels()], -1.0, 1.0, 41));
    let n = store.len();
    check_gradients(&inputs, GRAD_POINTS, 42, |tape, v| {
        let bp = BoundParams::from_vars(v[..n].to_vec());
        let vol = net.build(tape, &bp, &map_features(v[n], cfg), &sc.state, &sc.cam, &visible)?;
        probe(tape, vol.features, 43)
    })
}

pub fn grad_volume_query(cfg: &Config, sc: &Scene) -> Result<GradCheck> {
    let mut store = ParamStore::new();
    let net = SparseConvNet::new(&mut store, cfg, &mut ChaCha8Rng::seed_from_u64(5));
    let visible = humanrf::body::visible_vertices(&sc.state, &sc.cam, &sc.tmpl.triangles);
    let hw = cfg.resolution * cfg.resolution;
    let map = random_tensor(&[hw, cfg.map_channels()], -1.0, 1.0, 51);
    let mut tape = Tape::new();
    let bp = store.bind(&mut tape, false);
    let m = tape.constant(map);
    let vol = net.build(&mut tape, &bp, &map_features(m, cfg), &sc.state, &sc.cam, &visible)?;
    let feats = tape.value(vol.features).clone();
    let pts: Vec<Vec3> = body_points(&sc.state, 60, 52)
        .iter()
        .map(|p| sc.state.normalize_canonical(p))
        .collect();
    check_gradients(&[feats], GRAD_POINTS, 53, |tape, v| {
        let local = humanrf::featbank::SparseVolume {
            features: v[0],
            ..vol.clone()
        };
        let y = query_point_volume(tape, &local, &pts)?;
        probe(tape, y, 54)
    })
}

pub fn grad_pixel_sampling(cfg: &Config, sc: &Scene) -> Result<GradCheck> {
    let hw = cfg.resolution * cfg.resolution;
    let map = random_tensor(&[hw, 6], -1.0, 1.0, 61);
    let queries: Vec<_> = body_points(&sc.state, 40, 62)
        .iter()
        .map(|p| pixel_query(p, &sc.state, &sc.tmpl, &sc.cam, cfg.gate_threshold))
        .collect();
    check_gradients(&[map], GRAD_POINTS, 63, |tape, v| {
        let y = query_pixel_aligned(tape, &map_features(v[0], cfg), &queries)?;
        probe(tape, y, 64)
    })
}

pub fn grad_attention() -> Result<GradCheck> {
    let mut store = ParamStore::new();
    let dims = [5, 6, 7];
    let fusion = Fusion::with_dims(&mut store, dims, 8, 2, 4, Reduce::Concat, &mut ChaCha8Rng::seed_from_u64(7))?;
    let p = 6;
    let mut inputs = store_values(&store);
    for (i, &d) in dims.iter().enumerate() {
        inputs.push(random_tensor(&[p, d], -1.0, 1.0, 70 + i as u64));
    }
    let n = store.len();
    check_gradients(&inputs, GRAD_POINTS, 74, |tape, v| {
        let bp = BoundParams::from_vars(v[..n].to_vec());
        let pf = humanrf::featbank::PointFeatures {
            global: v[n],
            point: v[n + 1],
            pixel: v[n + 2],
        };
        let y = fusion.forward(tape, &bp, &pf)?;
        probe(tape, y, 75)
    })
}

pub fn grad_decoder() -> Result<GradCheck> {
    let mut store = ParamStore::new();
    let dec = Decoder::with_dims(&mut store, 6, 3, 12, 2, 10.0, &mut ChaCha8Rng::seed_from_u64(8));
    let mut rng = ChaCha8Rng::seed_from_u64(81);
    let pts: Vec<Vec3> = (0..10)
        .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect();
    let mut inputs = store_values(&store);
    inputs.push(random_tensor(&[pts.len(), 6], -1.0, 1.0, 82));
    let n = store.len();
    check_gradients(&inputs, GRAD_POINTS, 83, |tape, v| {
        let bp = BoundParams::from_vars(v[..n].to_vec());
        let y = dec.decode(tape, &bp, &pts, v[n])?;
        probe(tape, y, 84)
    })
}

pub fn grad_composite() -> Result<GradCheck> {
    let (r, n) = (5, 8);
    let raw = random_tensor(&[r * n, 4], -2.0, 2.0, 91);
    let deltas: Vec<f64> = random_tensor(&[r * n], 0.01, 0.2, 92).data().to_vec();
    check_gradients(&[raw], GRAD_POINTS, 93, |tape, v| {
        let c = composite(tape, v[0], &deltas, n)?;
        let a = probe(tape, c.color, 94)?;
        let b = probe(tape, c.opacity, 95)?;
        let t = probe(tape, c.transmittance, 96)?;
        let s = tape.add(a, b)?;
        Ok::<_, Error>(tape.add(s, t)?)
    })
}

pub fn grad_photometric() -> Result<GradCheck> {
    let pred = random_tensor(&[12, 3], 0.0, 1.0, 101);
    let gt = random_tensor(&[12, 3], 0.0, 1.0, 102);
    check_gradients(&[pred], GRAD_POINTS, 103, |tape, v| {
        let g = tape.constant(gt.clone());
        photometric(tape, v[0], g)
    })
}

pub fn grad_mask() -> Result<GradCheck> {
    let op = random_tensor(&[24], 0.0, 1.0, 111);
    let m: Vec<f64> = (0..24).map(|i| (i % 3 == 0) as u8 as f64).collect();
    check_gradients(&[op], GRAD_POINTS, 112, |tape, v| {
        let mk = tape.constant(Tensor::new(vec![24], m.clone())?);
        mask_loss(tape, v[0], mk)
    })
}

pub fn grad_ssim() -> Result<GradCheck> {
    let (h, w) = (13, 12);
    let a = random_tensor(&[h * w, 3], 0.0, 1.0, 121);
    let b = random_tensor(&[h * w, 3], 0.0, 1.0, 122);
    check_gradients(&[a], GRAD_POINTS, 123, |tape, v| {
        let bb = tape.constant(b.clone());
        ssim_loss(tape, v[0], bb, (h, w))
    })
}

pub fn grad_perceptual() -> Result<GradCheck> {
    let (h, w) = (12, 12);
    let perc = RandomFilterDistance::new(1234, 6, 3);
    let a = random_tensor(&[h * w, 3], 0.0, 1.0, 131);
    let b = random_tensor(&[h * w, 3], 0.0, 1.0, 132);
    check_gradients(&[a], GRAD_POINTS, 133, |tape, v| {
        let bb = tape.constant(b.clone());
        perc.distance(tape, v[0], bb, (h, w))
    })
}

/// Full training loss of the tiny model w.r.t. all parameters.
pub fn grad_full_loss(cfg: &Config) -> Result<GradCheck> {
    let model = Model::new(cfg)?;
    let input = scene(cfg, 5, 0, 8);
    let target = scene(cfg, 5, 3, 8);
    let rect = model.bounds(&target.state).project_rect(&target.cam);
    let batch = sample_rays(
        &target.frame,
        &rect,
        cfg.rays_per_batch,
        cfg.patch_size,
        0.25,
        &mut ChaCha8Rng::seed_from_u64(141),
    );
    let perc = RandomFilterDistance::from_config(cfg);
    let weights = humanrf::losses::LossWeights::from_config(cfg);
    humanrf::diffcore::check_params(&model.store, GRAD_POINTS, 142, |tape, bp| {
        full_loss_on(tape, bp, &model, &perc, &weights, &input, &target, &batch)
    })
}

#[allow(clippy::too_many_arguments)]
fn full_loss_on(
    tape: &mut Tape,
    bp: &BoundParams,
    model: &Model,
    perc: &RandomFilterDistance,
    weights: &humanrf::losses::LossWeights,
    input: &Scene,
    target: &Scene,
    batch: &humanrf::trainer::RayBatch,
) -> Result<Var> {
    let bank = model.build_bank(tape, bp, &input.frame, &input.state)?;
    let rays = batch.rays(&target.frame)?;
    let out = model.render_rays::<ChaCha8Rng>(tape, bp, &bank, &target.state, &rays, None)?;
    let (rgb, m) = batch.targets(&target.frame)?;
    let rgb = tape.constant(rgb);
    let m = tape.constant(m);
    let color = photometric(tape, out.color, rgb)?;
    let mask = mask_loss(tape, out.opacity, m)?;
    let np = batch.patch * batch.patch;
    let pp = tape.narrow(out.color, 0, 0, np)?;
    let gp = tape.narrow(rgb, 0, 0, np)?;
    let s = ssim_loss(tape, pp, gp, (batch.patch, batch.patch))?;
    let p = perc.distance(tape, pp, gp, (batch.patch, batch.patch))?;
    Ok(humanrf::losses::LossTerms::assemble(tape, weights, color, mask, s, p)?.total)
}

/// Every differentiable stage, each at `GRAD_POINTS` coordinates.
pub fn gradient_suite() -> Result<Vec<GradEntry>> {
    let cfg = tiny_config();
    let sc = scene(&cfg, 3, 1, 8);
    Ok(vec![
        timed("encoder", || grad_encoder(&cfg, &sc))?,
        timed("triplane_build", || grad_triplane_build(&cfg))?,
        timed("triplane_query", grad_triplane_query)?,
        timed("sparse_conv", || grad_sparse_conv(&cfg, &sc))?,
        timed("volume_query", || grad_volume_query(&cfg, &sc))?,
        timed("pixel_sampling", || grad_pixel_sampling(&cfg, &sc))?,
        timed("attention", grad_attention)?,
        timed("decoder", grad_decoder)?,
        timed("composite", grad_composite)?,
        timed("loss_photometric", grad_photometric)?,
        timed("loss_mask", grad_mask)?,
        timed("loss_ssim", grad_ssim)?,
        timed("loss_perceptual", grad_perceptual)?,
        timed("full_loss", || grad_full_loss(&cfg))?,
    ])
}
