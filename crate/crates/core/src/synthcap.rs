//! Synthetic captures of the procedural body: an analytic ray–capsule
//! renderer and an on-disk dataset of posed, multi-view frames.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! dataset.txt              header: resolution, poses, views, subjects
//! manifest.tsv             relative path <TAB> sha256, one line per file
//! subject_SS/subject.txt   split, beta, albedos (skin, shirt, pants)
//! subject_SS/pP_vV.png     RGB frame
//! subject_SS/pP_vV_mask.png
//! subject_SS/pP_vV.txt     camera record, theta, beta
//! ```

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::body::procedural::{self, Capsule, Material, NUM_BETAS, NUM_JOINTS};
use crate::body::{pose_body, BodyError, BodyState, BodyTemplate};
use crate::config::Config;
use crate::geometry::{CameraView, GeometryError, Vec3};
use crate::image::{Image, ImageError, Mask};

pub const AMBIENT: f64 = 0.35;

/// Fixed directional light (unit vector pointing towards the light).
pub fn light_dir() -> Vec3 {
    Vec3::new(0.3, 0.5, 0.8).normalize()
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Body(#[from] BodyError),
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
    #[error("{path}: checksum mismatch")]
    Checksum { path: String },
    #[error("dataset has no {0}")]
    Empty(&'static str),
}

type Result<T> = std::result::Result<T, SynthError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn format_err(path: &Path, msg: impl Into<String>) -> SynthError {
    SynthError::Format {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Subject {
    pub id: usize,
    pub split: Split,
    pub beta: Vec<f64>,
    /// Albedo per material: skin, shirt, pants.
    pub albedo: [[f64; 3]; 3],
}

impl Subject {
    pub fn albedo_of(&self, m: Material) -> [f64; 3] {
        match m {
            Material::Skin => self.albedo[0],
            Material::Shirt => self.albedo[1],
            Material::Pants => self.albedo[2],
        }
    }

    fn to_text(&self) -> String {
        let mut s = String::new();
        let split = match self.split {
            Split::Train => "train",
            Split::Test => "test",
        };
        let _ = writeln!(s, "split {split}");
        let _ = writeln!(s, "beta {}", join(&self.beta));
        for (name, a) in ["skin", "shirt", "pants"].iter().zip(&self.albedo) {
            let _ = writeln!(s, "albedo {name} {}", join(a));
        }
        s
    }

    fn from_text(id: usize, text: &str, path: &Path) -> Result<Self> {
        let mut split = None;
        let mut beta = None;
        let mut albedo = [[0.0; 3]; 3];
        let mut seen = 0;
        for line in text.lines() {
            let toks: Vec<&str> = line.split_whitespace().collect();
            match toks.as_slice() {
                ["split", "train"] => split = Some(Split::Train),
                ["split", "test"] => split = Some(Split::Test),
                ["beta", rest @ ..] => beta = Some(parse_floats(rest, path)?),
                ["albedo", name, rest @ ..] => {
                    let slot = match *name {
                        "skin" => 0,
                        "shirt" => 1,
                        "pants" => 2,
                        _ => return Err(format_err(path, format!("unknown material {name}"))),
                    };
                    let v = parse_floats(rest, path)?;
                    if v.len() != 3 {
                        return Err(format_err(path, "albedo needs 3 values"));
                    }
                    albedo[slot].copy_from_slice(&v);
                    seen |= 1 << slot;
                }
                [] => {}
                _ => return Err(format_err(path, format!("unexpected line {line:?}"))),
            }
        }
        match (split, beta) {
            (Some(split), Some(beta)) if seen == 7 => Ok(Self {
                id,
                split,
                beta,
                albedo,
            }),
            _ => Err(format_err(path, "incomplete subject record")),
        }
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

fn parse_floats(toks: &[&str], path: &Path) -> Result<Vec<f64>> {
    toks.iter()
        .map(|t| t.parse().map_err(|_| format_err(path, format!("bad number {t:?}"))))
        .collect()
}

/// Shaded colour and hit mask from analytic ray–capsule intersection;
/// Lambert shading with [`AMBIENT`] and the fixed [`light_dir`].
pub fn render_capsules(capsules: &[Capsule], albedo: impl Fn(Material) -> [f64; 3], cam: &CameraView) -> (Image, Mask) {
    let (w, h) = (cam.width, cam.height);
    let mut img = Image::new(w, h);
    let mut mask = Mask::new(w, h);
    let light = light_dir();
    for row in 0..h {
        for col in 0..w {
            let ray = cam.pixel_ray(col, row).expect("pixel inside image");
            let mut best: Option<(f64, &Capsule)> = None;
            for c in capsules {
                if let Some(t) = c.intersect(&ray.origin, &ray.dir) {
                    if best.is_none_or(|(bt, _)| t < bt) {
                        best = Some((t, c));
                    }
                }
            }
            if let Some((t, c)) = best {
                let p = ray.at(t);
                let n = (p - c.closest_axis_point(&p)).normalize();
                let shade = AMBIENT + (1.0 - AMBIENT) * n.dot(&light).max(0.0);
                let a = albedo(c.material);
                img.set(col, row, [a[0] * shade, a[1] * shade, a[2] * shade]);
                mask.data[row * w + col] = true;
            }
        }
    }
    (img, mask)
}

/// Renders `subject` posed as `state` from `cam`.
pub fn render_analytic(subject: &Subject, state: &BodyState, cam: &CameraView) -> (Image, Mask) {
    let caps = procedural::posed_capsules(state);
    render_capsules(&caps, |m| subject.albedo_of(m), cam)
}

/// Camera `v` of `n` on the yaw ring, looking at the origin.
pub fn ring_camera(cfg: &Config, v: usize, n: usize) -> Result<CameraView> {
    let yaw = 2.0 * PI * v as f64 / n as f64;
    let eye = Vec3::new(cfg.ring_radius * yaw.sin(), cfg.ring_height, cfg.ring_radius * yaw.cos());
    Ok(CameraView::look_at(
        eye,
        Vec3::zeros(),
        Vec3::y(),
        cfg.focal(),
        cfg.resolution,
        cfg.resolution,
    )?)
}

/// Per-joint bounds (radians) of the axis-angle components.
pub const POSE_RANGE: [[f64; 3]; NUM_JOINTS] = [
    [0.15, 0.5, 0.1],
    [0.25, 0.3, 0.15],
    [0.3, 0.4, 0.2],
    [0.4, 0.4, 0.7],
    [0.4, 0.4, 0.7],
];

pub fn sample_pose<R: Rng + ?Sized>(rng: &mut R) -> Vec<f64> {
    POSE_RANGE
        .iter()
        .flat_map(|r| *r)
        .map(|b| rng.random_range(-b..=b))
        .collect()
}

pub fn sample_subject<R: Rng + ?Sized>(id: usize, split: Split, rng: &mut R) -> Subject {
    let beta = vec![rng.random_range(-0.3..=0.2), rng.random_range(-0.3..=0.3)];
    debug_assert_eq!(beta.len(), NUM_BETAS);
    let mut albedo = [[0.0; 3]; 3];
    for a in albedo.iter_mut() {
        for c in a.iter_mut() {
            *c = rng.random_range(0.15..=0.95);
        }
    }
    Subject {
        id,
        split,
        beta,
        albedo,
    }
}

/// One captured view: image, mask, camera, pose and shape.
#[derive(Clone, Debug)]
pub struct Frame {
    pub image: Image,
    pub mask: Mask,
    pub cam: CameraView,
    pub theta: Vec<f64>,
    pub beta: Vec<f64>,
}

impl Frame {
    pub fn state(&self, tmpl: &BodyTemplate) -> std::result::Result<BodyState, BodyError> {
        pose_body(tmpl, &self.theta, &self.beta)
    }

    fn sidecar(&self) -> String {
        format!(
            "camera {}\ntheta {}\nbeta {}\n",
            self.cam.to_record(),
            join(&self.theta),
            join(&self.beta)
        )
    }
}

#[derive(Clone, Debug)]
pub struct SubjectFrames {
    pub subject: Subject,
    /// Indexed `pose · views + view`.
    pub frames: Vec<Frame>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub resolution: usize,
    pub poses: usize,
    pub views: usize,
    pub subjects: Vec<SubjectFrames>,
}

/// Input and target views of one subject.
#[derive(Clone, Copy, Debug)]
pub struct FramePair<'a> {
    pub subject: &'a Subject,
    pub input: &'a Frame,
    pub target: &'a Frame,
}

impl Dataset {
    pub fn frame(&self, s: usize, p: usize, v: usize) -> &Frame {
        &self.subjects[s].frames[p * self.views + v]
    }

    pub fn split(&self, split: Split) -> Vec<usize> {
        (0..self.subjects.len())
            .filter(|&i| self.subjects[i].subject.split == split)
            .collect()
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let head_path = dir.join("dataset.txt");
        let head = fs::read_to_string(&head_path).map_err(io_err(&head_path))?;
        let mut fields = std::collections::HashMap::new();
        for line in head.lines().skip(1) {
            if let Some((k, v)) = line.split_once(' ') {
                let n: usize = v
                    .trim()
                    .parse()
                    .map_err(|_| format_err(&head_path, format!("bad count in {line:?}")))?;
                fields.insert(k.to_string(), n);
            }
        }
        if !head.starts_with("humanrf-dataset 1") {
            return Err(format_err(&head_path, "missing header"));
        }
        let get = |k: &str| {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| format_err(&head_path, format!("missing {k}")))
        };
        let (resolution, poses, views, n_subjects) = (get("resolution")?, get("poses")?, get("views")?, get("subjects")?);
        if n_subjects == 0 {
            return Err(SynthError::Empty("subjects"));
        }
        if poses == 0 || views == 0 {
            return Err(SynthError::Empty("frames"));
        }
        let mut subjects = Vec::with_capacity(n_subjects);
        for s in 0..n_subjects {
            let sdir = dir.join(subject_dir(s));
            let sp = sdir.join("subject.txt");
            let subject = Subject::from_text(s, &fs::read_to_string(&sp).map_err(io_err(&sp))?, &sp)?;
            let mut frames = Vec::with_capacity(poses * views);
            for p in 0..poses {
                for v in 0..views {
                    frames.push(load_frame(&sdir, p, v, resolution)?);
                }
            }
            subjects.push(SubjectFrames { subject, frames });
        }
        Ok(Self {
            resolution,
            poses,
            views,
            subjects,
        })
    }
}

fn subject_dir(s: usize) -> String {
    format!("subject_{s:02}")
}

fn frame_stem(p: usize, v: usize) -> String {
    format!("p{p}_v{v}")
}

fn load_frame(sdir: &Path, p: usize, v: usize, res: usize) -> Result<Frame> {
    let stem = frame_stem(p, v);
    let image = Image::load_png(&sdir.join(format!("{stem}.png")))?;
    let mask = Mask::load_png(&sdir.join(format!("{stem}_mask.png")))?;
    for got in [(image.width, image.height), (mask.width, mask.height)] {
        if got != (res, res) {
            return Err(ImageError::Size { got, want: (res, res) }.into());
        }
    }
    let side = sdir.join(format!("{stem}.txt"));
    let text = fs::read_to_string(&side).map_err(io_err(&side))?;
    let (mut cam, mut theta, mut beta) = (None, None, None);
    for line in text.lines() {
        match line.split_once(' ') {
            Some(("camera", rest)) => cam = Some(CameraView::from_record(rest)?),
            Some(("theta", rest)) => theta = Some(parse_floats(&rest.split_whitespace().collect::<Vec<_>>(), &side)?),
            Some(("beta", rest)) => beta = Some(parse_floats(&rest.split_whitespace().collect::<Vec<_>>(), &side)?),
            _ if line.trim().is_empty() => {}
            _ => return Err(format_err(&side, format!("unexpected line {line:?}"))),
        }
    }
    match (cam, theta, beta) {
        (Some(cam), Some(theta), Some(beta)) => Ok(Frame {
            image,
            mask,
            cam,
            theta,
            beta,
        }),
        _ => Err(format_err(&side, "incomplete sidecar")),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Relative path and SHA-256 of every dataset file.
pub type Manifest = Vec<(String, String)>;

/// Writes `cfg.train_subjects + cfg.test_subjects` subjects, each with
/// `cfg.poses` random poses seen from `cfg.views` ring cameras. Output is
/// a pure function of the config.
pub fn generate_dataset(cfg: &Config, dir: &Path) -> Result<Manifest> {
    let n_subjects = cfg.train_subjects + cfg.test_subjects;
    if n_subjects == 0 {
        return Err(SynthError::Empty("subjects"));
    }
    if cfg.poses == 0 || cfg.views == 0 {
        return Err(SynthError::Empty("frames"));
    }
    let tmpl = procedural::template();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut manifest = Manifest::new();
    let write = |rel: String, bytes: &[u8], manifest: &mut Manifest| -> Result<()> {
        let path = dir.join(&rel);
        fs::write(&path, bytes).map_err(io_err(&path))?;
        manifest.push((rel, sha256_hex(bytes)));
        Ok(())
    };
    write(
        "dataset.txt".into(),
        format!(
            "humanrf-dataset 1\nresolution {}\nposes {}\nviews {}\nsubjects {}\n",
            cfg.resolution, cfg.poses, cfg.views, n_subjects
        )
        .as_bytes(),
        &mut manifest,
    )?;
    let cams: Vec<CameraView> = (0..cfg.views)
        .map(|v| ring_camera(cfg, v, cfg.views))
        .collect::<Result<_>>()?;
    for s in 0..n_subjects {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(s as u64 + 1);
        let split = if s < cfg.train_subjects { Split::Train } else { Split::Test };
        let subject = sample_subject(s, split, &mut rng);
        let sd = subject_dir(s);
        let sdir = dir.join(&sd);
        fs::create_dir_all(&sdir).map_err(io_err(&sdir))?;
        write(format!("{sd}/subject.txt"), subject.to_text().as_bytes(), &mut manifest)?;
        for p in 0..cfg.poses {
            let theta = sample_pose(&mut rng);
            let state = pose_body(&tmpl, &theta, &subject.beta)?;
            for (v, cam) in cams.iter().enumerate() {
                let (image, mask) = render_analytic(&subject, &state, cam);
                let frame = Frame {
                    image,
                    mask,
                    cam: cam.clone(),
                    theta: theta.clone(),
                    beta: subject.beta.clone(),
                };
                let stem = frame_stem(p, v);
                write(format!("{sd}/{stem}.png"), &frame.image.to_png(), &mut manifest)?;
                write(format!("{sd}/{stem}_mask.png"), &frame.mask.to_png(), &mut manifest)?;
                write(format!("{sd}/{stem}.txt"), frame.sidecar().as_bytes(), &mut manifest)?;
            }
        }
    }
    let mut text = String::new();
    for (rel, sum) in &manifest {
        let _ = writeln!(text, "{rel}\t{sum}");
    }
    let mpath = dir.join("manifest.tsv");
    fs::write(&mpath, text).map_err(io_err(&mpath))?;
    Ok(manifest)
}

/// Re-hashes every file listed in `manifest.tsv`.
pub fn verify_manifest(dir: &Path) -> Result<usize> {
    let mpath = dir.join("manifest.tsv");
    let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let mut n = 0;
    for line in text.lines() {
        let (rel, sum) = line
            .split_once('\t')
            .ok_or_else(|| format_err(&mpath, format!("bad line {line:?}")))?;
        let path: PathBuf = dir.join(rel);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        if sha256_hex(&bytes) != sum {
            return Err(SynthError::Checksum {
                path: path.display().to_string(),
            });
        }
        n += 1;
    }
    Ok(n)
}
