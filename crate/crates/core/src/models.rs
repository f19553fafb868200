//! Generator variants (late, early and no fusion), the WGAN critics, hole
//! compositing and local-patch extraction.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Layer, LayerSpec, ParamStore, Stage};
use crate::tensor::{Activation, Element, Tensor};

const HIDDEN: Activation = Activation::Elu(1.0);
const CRITIC_ACT: Activation = Activation::LeakyRelu(0.2);

/// RNG stream ids used to initialize the networks of one training run.
pub const GENERATOR_STREAM: u64 = 1;
pub const GLOBAL_CRITIC_STREAM: u64 = 2;
pub const LOCAL_CRITIC_STREAM: u64 = 3;

pub fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionVariant {
    LateFusion,
    EarlyFusion,
    NoFusion,
}

impl FusionVariant {
    pub const ALL: [FusionVariant; 3] = [FusionVariant::LateFusion, FusionVariant::EarlyFusion, FusionVariant::NoFusion];

    pub fn short_name(self) -> &'static str {
        match self {
            FusionVariant::LateFusion => "late",
            FusionVariant::EarlyFusion => "early",
            FusionVariant::NoFusion => "none",
        }
    }
}

impl fmt::Display for FusionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionVariant::LateFusion => "late_fusion",
            FusionVariant::EarlyFusion => "early_fusion",
            FusionVariant::NoFusion => "no_fusion",
        })
    }
}

impl FromStr for FusionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "late" | "late_fusion" => Ok(FusionVariant::LateFusion),
            "early" | "early_fusion" => Ok(FusionVariant::EarlyFusion),
            "none" | "no_fusion" => Ok(FusionVariant::NoFusion),
            other => Err(Error::invalid(format!("unknown fusion variant {other:?}"))),
        }
    }
}

/// Axis-aligned hole rectangle in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MaskRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl MaskRect {
    pub fn full(size: usize) -> Self {
        MaskRect {
            top: 0,
            left: 0,
            height: size,
            width: size,
        }
    }

    pub fn fits(&self, size: usize) -> bool {
        self.top + self.height <= size && self.left + self.width <= size
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.height && x >= self.left && x < self.left + self.width
    }

    /// Square window of side `max(height, width)` centred on the rectangle,
    /// shifted to lie inside a `size x size` image: `(top, left, side)`.
    pub fn square_window(&self, size: usize) -> (usize, usize, usize) {
        let side = self.height.max(self.width).min(size);
        let place = |start: usize, extent: usize| -> usize {
            let centred = (2 * start + extent) as isize / 2 - side as isize / 2;
            centred.clamp(0, (size - side) as isize) as usize
        };
        (place(self.top, self.height), place(self.left, self.width), side)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub variant: FusionVariant,
    pub image_size: usize,
    pub base_channels: usize,
    pub fusion_dilations: [usize; 4],
    pub seed: u64,
}

impl GeneratorConfig {
    pub fn new(variant: FusionVariant, image_size: usize, base_channels: usize, seed: u64) -> Self {
        GeneratorConfig {
            variant,
            image_size,
            base_channels,
            fusion_dilations: [2, 4, 8, 16],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 4 != 0 {
            return Err(Error::invalid(format!(
                "image_size must be a positive multiple of 4, got {}",
                self.image_size
            )));
        }
        if self.base_channels == 0 {
            return Err(Error::invalid("base_channels must be positive"));
        }
        if self.fusion_dilations.contains(&0) {
            return Err(Error::invalid("fusion dilations must be >= 1"));
        }
        Ok(())
    }
}

fn encoder(prefix: &str, in_ch: usize, base: usize) -> Stage {
    Stage::new(
        prefix,
        vec![
            Layer::new("conv1", LayerSpec::conv(in_ch, base, 5, 1, 1).with_activation(HIDDEN)),
            Layer::new("conv2", LayerSpec::conv(base, 2 * base, 3, 2, 1).with_activation(HIDDEN)),
            Layer::new("conv3", LayerSpec::conv(2 * base, 4 * base, 3, 2, 1).with_activation(HIDDEN)),
        ],
    )
}

/// Bottleneck at 1/4 resolution: one conv, four dilated convs, one conv.
fn dilated_stack(prefix: &str, in_ch: usize, base: usize, dilations: [usize; 4]) -> Stage {
    let width = 8 * base;
    let mut layers = vec![Layer::new("conv_in", LayerSpec::conv(in_ch, width, 3, 1, 1).with_activation(HIDDEN))];
    for (i, &d) in dilations.iter().enumerate() {
        layers.push(Layer::new(
            format!("dilated{}", i + 1),
            LayerSpec::conv(width, width, 3, 1, d).with_activation(HIDDEN),
        ));
    }
    layers.push(Layer::new("conv_out", LayerSpec::conv(width, width, 3, 1, 1).with_activation(HIDDEN)));
    Stage::new(prefix, layers)
}

fn decoder(prefix: &str, base: usize, out_ch: usize) -> Stage {
    Stage::new(
        prefix,
        vec![
            Layer::new("up1", LayerSpec::deconv_block(8 * base, 2 * base, 3, 2).with_activation(HIDDEN)),
            Layer::new("up2", LayerSpec::deconv_block(2 * base, base, 3, 2).with_activation(HIDDEN)),
            Layer::new("head", LayerSpec::conv(base, out_ch, 3, 1, 1).with_activation(Activation::Tanh)),
        ],
    )
}

#[derive(Clone, Debug)]
enum Wiring {
    Late {
        rgb_encoder: Stage,
        depth_encoder: Stage,
        fusion: Stage,
        rgb_decoder: Stage,
        depth_decoder: Stage,
    },
    Early {
        encoder: Stage,
        middle: Stage,
        decoder: Stage,
    },
    Separate {
        rgb: [Stage; 3],
        depth: [Stage; 3],
    },
}

impl Wiring {
    fn stages(&self) -> Vec<&Stage> {
        match self {
            Wiring::Late {
                rgb_encoder,
                depth_encoder,
                fusion,
                rgb_decoder,
                depth_decoder,
            } => vec![rgb_encoder, depth_encoder, fusion, rgb_decoder, depth_decoder],
            Wiring::Early { encoder, middle, decoder } => vec![encoder, middle, decoder],
            Wiring::Separate { rgb, depth } => rgb.iter().chain(depth.iter()).collect(),
        }
    }
}

/// The inpainting network `G(z_c, z_d, m)`.
#[derive(Clone, Debug)]
pub struct GeneratorModel<T: Element> {
    pub config: GeneratorConfig,
    pub params: ParamStore<T>,
    wiring: Wiring,
}

/// Builds a generator with freshly initialized parameters. Initialization is
/// a pure function of `config.seed`.
pub fn build_generator<T: Element>(config: &GeneratorConfig) -> Result<GeneratorModel<T>> {
    config.validate()?;
    let b = config.base_channels;
    let dil = config.fusion_dilations;
    let wiring = match config.variant {
        FusionVariant::LateFusion => Wiring::Late {
            rgb_encoder: encoder("rgb_encoder", 4, b),
            depth_encoder: encoder("depth_encoder", 2, b),
            fusion: dilated_stack("fusion", 8 * b, b, dil),
            rgb_decoder: decoder("rgb_decoder", b, 3),
            depth_decoder: decoder("depth_decoder", b, 1),
        },
        FusionVariant::EarlyFusion => Wiring::Early {
            encoder: encoder("encoder", 5, b),
            middle: dilated_stack("middle", 4 * b, b, dil),
            decoder: decoder("decoder", b, 4),
        },
        FusionVariant::NoFusion => Wiring::Separate {
            rgb: [
                encoder("rgb_net.encoder", 4, b),
                dilated_stack("rgb_net.middle", 4 * b, b, dil),
                decoder("rgb_net.decoder", b, 3),
            ],
            depth: [
                encoder("depth_net.encoder", 2, b),
                dilated_stack("depth_net.middle", 4 * b, b, dil),
                decoder("depth_net.decoder", b, 1),
            ],
        },
    };
    let mut params = ParamStore::new();
    let mut rng = seeded(config.seed, GENERATOR_STREAM);
    for stage in wiring.stages() {
        stage.init(&mut params, &mut rng)?;
    }
    Ok(GeneratorModel {
        config: config.clone(),
        params,
        wiring,
    })
}

impl<T: Element> GeneratorModel<T> {
    /// Raw generator output: `(B, 3, S, S)` RGB and `(B, 1, S, S)` depth in
    /// `(-1, 1)`. Inputs are the masked images and the mask (1 = known pixel).
    pub fn forward(&self, z_c: &Tensor<T>, z_d: &Tensor<T>, m: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let s = self.config.image_size;
        let batch = z_c.shape().first().copied().unwrap_or(0);
        for (t, ch) in [(z_c, 3), (z_d, 1), (m, 1)] {
            if t.shape() != [batch, ch, s, s] {
                return Err(Error::shape("generator_forward", t.shape(), &[batch, ch, s, s]));
            }
        }
        let p = &self.params;
        let chain = |stages: &[&Stage], x: Tensor<T>| -> Result<Tensor<T>> {
            stages.iter().try_fold(x, |h, st| st.forward(p, &h))
        };
        match &self.wiring {
            Wiring::Late {
                rgb_encoder,
                depth_encoder,
                fusion,
                rgb_decoder,
                depth_decoder,
            } => {
                let f_rgb = rgb_encoder.forward(p, &Tensor::cat(&[z_c, m], 1)?)?;
                let f_depth = depth_encoder.forward(p, &Tensor::cat(&[z_d, m], 1)?)?;
                let fused = fusion.forward(p, &Tensor::cat(&[&f_rgb, &f_depth], 1)?)?;
                Ok((rgb_decoder.forward(p, &fused)?, depth_decoder.forward(p, &fused)?))
            }
            Wiring::Early { encoder, middle, decoder } => {
                let out = chain(&[encoder, middle, decoder], Tensor::cat(&[z_c, z_d, m], 1)?)?;
                Ok((out.narrow(1, 0, 3)?, out.narrow(1, 3, 1)?))
            }
            Wiring::Separate { rgb, depth } => {
                let [re, rm, rd] = rgb;
                let [de, dm, dd] = depth;
                Ok((
                    chain(&[re, rm, rd], Tensor::cat(&[z_c, m], 1)?)?,
                    chain(&[de, dm, dd], Tensor::cat(&[z_d, m], 1)?)?,
                ))
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.total_elements()
    }
}

/// `z + raw * (1 - m)`: known pixels (m = 1) pass through untouched, holes
/// take the generator output. `m` broadcasts over channels.
pub fn composite<T: Element>(raw: &Tensor<T>, z: &Tensor<T>, m: &Tensor<T>) -> Result<Tensor<T>> {
    if raw.shape() != z.shape() {
        return Err(Error::shape("composite", raw.shape(), z.shape()));
    }
    let hole = m.neg().add_scalar(T::one());
    z.add(&raw.mul(&hole)?)
}

/// Crops, for each batch element, the square window around its hole
/// rectangle and resizes it to `patch x patch` by nearest neighbour.
pub fn extract_local_patches<T: Element>(x: &Tensor<T>, rects: &[MaskRect], patch: usize) -> Result<Tensor<T>> {
    if x.rank() != 4 || x.shape()[2] != x.shape()[3] || rects.len() != x.shape()[0] {
        return Err(Error::shape("extract_local_patch", x.shape(), &[rects.len()]));
    }
    if patch == 0 {
        return Err(Error::invalid("patch size must be positive"));
    }
    let (batch, ch, size) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut indices = Vec::with_capacity(batch * ch * patch * patch);
    for (b, rect) in rects.iter().enumerate() {
        if rect.height == 0 || rect.width == 0 {
            return Err(Error::invalid(format!("degenerate hole rectangle {rect:?}")));
        }
        if !rect.fits(size) {
            return Err(Error::invalid(format!("hole rectangle {rect:?} outside a {size}x{size} image")));
        }
        let (top, left, side) = rect.square_window(size);
        let src = |i: usize| (2 * i + 1) * side / (2 * patch);
        for c in 0..ch {
            let plane = (b * ch + c) * size * size;
            for py in 0..patch {
                let row = plane + (top + src(py)) * size + left;
                indices.extend((0..patch).map(|px| row + src(px)));
            }
        }
    }
    x.gather(Rc::new(indices), &[batch, ch, patch, patch])
}

/// Single-rectangle form of [`extract_local_patches`] applied to every sample.
pub fn extract_local_patch<T: Element>(x: &Tensor<T>, rect: MaskRect, patch: usize) -> Result<Tensor<T>> {
    let batch = x.shape().first().copied().unwrap_or(0);
    extract_local_patches(x, &vec![rect; batch], patch)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticScope {
    Global,
    Local,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticConfig {
    pub scope: CriticScope,
    pub input_size: usize,
    pub base_channels: usize,
    pub seed: u64,
}

/// A WGAN critic: maps a `(B, ...)` input to one unbounded score per sample.
pub trait Critic<T: Element> {
    fn score(&self, x: &Tensor<T>) -> Result<Tensor<T>>;
}

impl<T: Element, F> Critic<T> for F
where
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    fn score(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self(x)
    }
}

/// Convolutional RGB-D critic: 5x5 stride-2 convolutions down to 4x4, then a
/// linear head without output nonlinearity.
#[derive(Clone, Debug)]
pub struct CriticModel<T: Element> {
    pub config: CriticConfig,
    pub params: ParamStore<T>,
    body: Stage,
}

pub fn build_critic<T: Element>(config: &CriticConfig) -> Result<CriticModel<T>> {
    if config.input_size == 0 || config.base_channels == 0 {
        return Err(Error::invalid("critic input size and base channels must be positive"));
    }
    let b = config.base_channels;
    let mut layers = Vec::new();
    let (mut size, mut ch, mut i) = (config.input_size, 4, 0);
    while size > 4 {
        let out = (b << i.min(3)).min(8 * b);
        layers.push(Layer::new(
            format!("conv{}", i + 1),
            LayerSpec::conv(ch, out, 5, 2, 1).with_activation(CRITIC_ACT),
        ));
        size = size.div_ceil(2);
        ch = out;
        i += 1;
    }
    layers.push(Layer::new("fc", LayerSpec::fc(ch * size * size, 1)));
    let body = Stage::new("critic", layers);
    let stream = match config.scope {
        CriticScope::Global => GLOBAL_CRITIC_STREAM,
        CriticScope::Local => LOCAL_CRITIC_STREAM,
    };
    let mut params = ParamStore::new();
    body.init(&mut params, &mut seeded(config.seed, stream))?;
    Ok(CriticModel {
        config: config.clone(),
        params,
        body,
    })
}

impl<T: Element> CriticModel<T> {
    /// Scores a `(B, 4, H, W)` RGB-D batch; returns shape `(B,)`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = self.config.input_size;
        if x.rank() != 4 || x.shape()[1] != 4 || x.shape()[2] != s || x.shape()[3] != s {
            return Err(Error::shape("critic_forward", x.shape(), &[x.shape().first().copied().unwrap_or(0), 4, s, s]));
        }
        let out = self.body.forward(&self.params, x)?;
        out.reshape(&[x.shape()[0]])
    }

    pub fn param_count(&self) -> usize {
        self.params.total_elements()
    }

    /// The same critic evaluated with a different parameter store.
    pub fn with_params(&self, params: ParamStore<T>) -> Self {
        CriticModel {
            config: self.config.clone(),
            params,
            body: self.body.clone(),
        }
    }
}

impl<T: Element> Critic<T> for CriticModel<T> {
    fn score(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward(x)
    }
}
