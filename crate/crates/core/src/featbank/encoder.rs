use rand::Rng;

use crate::config::Config;
use crate::diffcore::{BoundParams, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::posenc_into;
use crate::image::{Image, Mask};
use crate::nn::{conv2d, leaky_gain, resize_bilinear, Linear, LEAK};

/// Global code and 2D feature map of one input image.
#[derive(Clone, Copy, Debug)]
pub struct ImageFeatures {
    /// `[1, Σ widths]`.
    pub latent: Var,
    /// `[H·W, C]`, row-major pixels; zero outside the mask.
    pub map2d: Var,
    pub width: usize,
    pub height: usize,
}

/// Stride-2 convolutional encoder over masked RGB plus the mask.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub blocks: Vec<Linear>,
    pub resolution: usize,
    pub rgb_freqs: usize,
    pub rgb_channels: usize,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &Config, rng: &mut R) -> Self {
        let mut c_in = 4;
        let blocks = cfg
            .encoder_widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let l = Linear::new(store, &format!("enc.{i}"), 9 * c_in, w, true, leaky_gain(), rng);
                c_in = w;
                l
            })
            .collect();
        Self {
            blocks,
            resolution: cfg.resolution,
            rgb_freqs: cfg.pe_rgb,
            rgb_channels: cfg.rgb_channels(),
        }
    }

    /// Channels of the encoded input and of the appended RGB block.
    pub fn input_tensors(&self, img: &Image, mask: &Mask) -> (Tensor, Tensor) {
        let n = img.width * img.height;
        let mut input = Vec::with_capacity(n * 4);
        let mut rgb = Vec::with_capacity(n * self.rgb_channels);
        for (i, &m) in mask.data.iter().enumerate() {
            let px = &img.data[i * 3..i * 3 + 3];
            let start = rgb.len();
            if m {
                input.extend_from_slice(px);
                input.push(1.0);
                posenc_into(px, self.rgb_freqs, &mut rgb);
                rgb.extend_from_slice(px);
                rgb.resize(start + self.rgb_channels, 1.0);
            } else {
                input.extend_from_slice(&[0.0; 4]);
                rgb.resize(start + self.rgb_channels, 0.0);
            }
        }
        (
            Tensor::new(vec![n, 4], input).expect("sizes agree"),
            Tensor::new(vec![n, self.rgb_channels], rgb).expect("sizes agree"),
        )
    }

    pub fn encode(&self, tape: &mut Tape, bp: &BoundParams, img: &Image, mask: &Mask) -> Result<ImageFeatures> {
        let want = (self.resolution, self.resolution);
        for (what, got) in [("image", (img.width, img.height)), ("mask", (mask.width, mask.height))] {
            if got != want {
                return Err(Error::Dimension { what, got, want });
            }
        }
        let (h, w) = (img.height, img.width);
        let (input, rgb) = self.input_tensors(img, mask);
        let keep: Vec<f64> = mask.data.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        let keep = tape.constant(Tensor::new(vec![h * w, 1], keep)?);
        let mut x = tape.constant(input);
        let (mut hh, mut ww) = (h, w);
        let mut pooled = Vec::with_capacity(self.blocks.len());
        let mut maps = Vec::with_capacity(self.blocks.len() + 1);
        for block in &self.blocks {
            let (y, ho, wo) = conv2d(tape, bp, x, (hh, ww), block, 3, 2, 1)?;
            x = tape.leaky_relu(y, LEAK);
            (hh, ww) = (ho, wo);
            let gap = tape.reduce(crate::diffcore::Reduce::Mean, x, Some(0))?;
            let c = tape.shape(gap)[0];
            pooled.push(tape.reshape(gap, &[1, c])?);
            let up = resize_bilinear(tape, x, (hh, ww), (h, w))?;
            maps.push(tape.mul(up, keep)?);
        }
        maps.push(tape.constant(rgb));
        let latent = tape.concat(&pooled, 1)?;
        let map2d = tape.concat(&maps, 1)?;
        Ok(ImageFeatures {
            latent,
            map2d,
            width: w,
            height: h,
        })
    }
}
