//! The full network with its parameters, image rendering and checkpoint
//! files.
//!
//! Checkpoint layout (little-endian): magic `HRFCKPT1`, config text
//! (`u32` length + UTF-8), config hash (16 ASCII bytes), epoch (`u64`),
//! step (`u64`), parameter block, then a flag byte and, when set, the Adam
//! step count (`u64`) and the first and second moment blocks.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::body::{procedural, BodyState, BodyTemplate};
use crate::config::Config;
use crate::diffcore::{BoundParams, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::featbank::{BankBuilder, Encoder, FeatureBank, SparseConvNet, TriplaneGenerator};
use crate::fusion::Fusion;
use crate::geometry::{Aabb, CameraView, PixelRect, Ray};
use crate::image::Image;
use crate::nerf::{render_rays, Composite, Decoder};
use crate::synthcap::Frame;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HRFCKPT1";

/// Rays per tape when rendering whole images.
pub const RENDER_CHUNK: usize = 512;

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: Config,
    pub store: ParamStore,
    pub bank: BankBuilder,
    pub fusion: Fusion,
    pub decoder: Decoder,
    pub template: BodyTemplate,
}

/// A rendered view: colour, per-pixel opacity and the rendered rectangle
/// (pixels outside it miss the ray bounds and are background).
#[derive(Clone, Debug)]
pub struct Rendered {
    pub image: Image,
    pub opacity: Vec<f64>,
    pub rect: PixelRect,
}

impl Model {
    /// Fresh parameters drawn from the config seed.
    pub fn new(cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(0x6d6f64656c);
        let mut store = ParamStore::new();
        let bank = BankBuilder {
            encoder: Encoder::new(&mut store, cfg, &mut rng),
            triplane: TriplaneGenerator::new(&mut store, cfg, &mut rng),
            volume: SparseConvNet::new(&mut store, cfg, &mut rng),
            gate_threshold: cfg.gate_threshold,
        };
        let fusion = Fusion::new(&mut store, cfg, &mut rng)?;
        let decoder = Decoder::new(&mut store, cfg, fusion.output_dim(), &mut rng);
        Ok(Self {
            cfg: cfg.clone(),
            store,
            bank,
            fusion,
            decoder,
            template: procedural::template(),
        })
    }

    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> BoundParams {
        self.store.bind(tape, requires_grad)
    }

    pub fn build_bank<'a>(
        &self,
        tape: &mut Tape,
        bp: &BoundParams,
        input: &Frame,
        state: &'a BodyState,
    ) -> Result<FeatureBank<'a>> {
        self.bank
            .build(tape, bp, &input.image, &input.mask, state, &self.template, &input.cam)
    }

    /// Ray bounds around a posed body.
    pub fn bounds(&self, state: &BodyState) -> Aabb {
        state.posed_aabb().inflate(self.cfg.aabb_margin)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn render_rays<R: rand::Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bp: &BoundParams,
        bank: &FeatureBank,
        target: &BodyState,
        rays: &[Ray],
        jitter: Option<&mut R>,
    ) -> Result<Composite> {
        let bounds = self.bounds(target);
        let (c, _) = render_rays(
            tape,
            bp,
            bank,
            &self.fusion,
            &self.decoder,
            target,
            &self.template,
            rays,
            &bounds,
            self.cfg.samples_per_ray,
            self.cfg.gate_sigma,
            jitter,
        )?;
        Ok(c)
    }

    /// Renders `cam` with the body posed as `target`, conditioned on
    /// `input`. Only pixels inside the projected ray bounds are evaluated;
    /// samples sit at bin midpoints.
    pub fn render_view(&self, input: &Frame, input_state: &BodyState, cam: &CameraView, target: &BodyState) -> Result<Rendered> {
        let mut base = Tape::new();
        let bp = self.bind(&mut base, false);
        let bank = self.build_bank(&mut base, &bp, input, input_state)?;
        let rect = self.bounds(target).project_rect(cam);
        let pixels: Vec<(usize, usize)> = (rect.y0..rect.y1)
            .flat_map(|r| (rect.x0..rect.x1).map(move |c| (c, r)))
            .collect();
        let mut image = Image::new(cam.width, cam.height);
        let mut opacity = vec![0.0; cam.width * cam.height];
        for chunk in pixels.chunks(RENDER_CHUNK) {
            let mut tape = Tape::new();
            let bp = self.bind(&mut tape, false);
            let local = bank.detach(&base, &mut tape);
            let rays: Vec<Ray> = chunk
                .iter()
                .map(|&(c, r)| cam.pixel_ray(c, r))
                .collect::<std::result::Result<_, _>>()?;
            let out = self.render_rays::<ChaCha8Rng>(&mut tape, &bp, &local, target, &rays, None)?;
            let col = tape.value(out.color).data();
            let op = tape.value(out.opacity).data();
            for (i, &(c, r)) in chunk.iter().enumerate() {
                image.set(c, r, [col[3 * i], col[3 * i + 1], col[3 * i + 2]]);
                opacity[r * cam.width + c] = op[i];
            }
        }
        Ok(Rendered { image, opacity, rect })
    }
}

/// Adam moments stored alongside the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamMoments {
    pub t: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config_text: String,
    pub config_hash: String,
    pub epoch: u64,
    pub step: u64,
    pub params: ParamStore,
    pub adam: Option<AdamMoments>,
}

fn ck(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new(model: &Model, epoch: u64, step: u64, adam: Option<AdamMoments>) -> Self {
        Self {
            config_text: model.cfg.canonical_text(),
            config_hash: model.cfg.hash(),
            epoch,
            step,
            params: model.store.clone(),
            adam,
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(self.config_text.len() as u32).to_le_bytes())?;
        w.write_all(self.config_text.as_bytes())?;
        w.write_all(self.config_hash.as_bytes())?;
        w.write_all(&self.epoch.to_le_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        self.params.write_to(w)?;
        match &self.adam {
            None => w.write_all(&[0]),
            Some(a) => {
                w.write_all(&[1])?;
                w.write_all(&a.t.to_le_bytes())?;
                a.m.write_to(w)?;
                a.v.write_to(w)
            }
        }
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| ck(e.to_string()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(ck("bad magic"));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4).map_err(|e| ck(e.to_string()))?;
        let len = u32::from_le_bytes(b4) as usize;
        if len > 1 << 20 {
            return Err(ck("config text too long"));
        }
        let mut text = vec![0u8; len];
        r.read_exact(&mut text).map_err(|e| ck(e.to_string()))?;
        let config_text = String::from_utf8(text).map_err(|_| ck("config text is not UTF-8"))?;
        let mut hash = [0u8; 16];
        r.read_exact(&mut hash).map_err(|e| ck(e.to_string()))?;
        let config_hash = String::from_utf8(hash.to_vec()).map_err(|_| ck("bad hash"))?;
        r.read_exact(&mut b8).map_err(|e| ck(e.to_string()))?;
        let epoch = u64::from_le_bytes(b8);
        r.read_exact(&mut b8).map_err(|e| ck(e.to_string()))?;
        let step = u64::from_le_bytes(b8);
        let params = ParamStore::read_from(r)?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag).map_err(|e| ck(e.to_string()))?;
        let adam = match flag[0] {
            0 => None,
            1 => {
                r.read_exact(&mut b8).map_err(|e| ck(e.to_string()))?;
                Some(AdamMoments {
                    t: u64::from_le_bytes(b8),
                    m: ParamStore::read_from(r)?,
                    v: ParamStore::read_from(r)?,
                })
            }
            f => return Err(ck(format!("bad optimizer flag {f}"))),
        };
        Ok(Self {
            config_text,
            config_hash,
            epoch,
            step,
            params,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).map_err(Error::io(path))?;
        std::fs::write(path, buf).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(Error::io(path))?;
        Self::read_from(&mut bytes.as_slice())
    }

    pub fn config(&self) -> Result<Config> {
        let cfg = Config::from_text(&self.config_text)?;
        if cfg.hash() != self.config_hash {
            return Err(ck("config hash does not match config text"));
        }
        Ok(cfg)
    }

    /// Model with this checkpoint's config and parameters.
    pub fn model(&self) -> Result<Model> {
        let mut model = Model::new(&self.config()?)?;
        model.store.load_from(&self.params)?;
        if model.store.len() != self.params.len() {
            return Err(ck("parameter count differs from the model"));
        }
        Ok(model)
    }
}
