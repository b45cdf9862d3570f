//! Generators and critic.
//!
//! `GeneratorB` turns NIR into an HSV prediction and exposes its decoder
//! features coarse to fine. `GeneratorA` reconstructs RGB with a
//! state-space encoder, a decoder modulated by those features, and a fusion
//! head that merges the texture-enriched color map through cross-attention.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::blocks::{CrossAttentionFuse, MixerKind, SpadeResBlock, Vssb, VssbConfig, LEAKY_SLOPE, NORM_EPS};
use crate::color::{Sfe, SfeOutput};
use crate::error::{Error, Result};
use crate::nn::Conv2d;
use crate::params::{Bound, ParamStore};
use crate::scalar::Scalar;
use crate::ssm::ScanKernel;

/// Component toggles of the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ablation {
    /// Selective-scan mixer; when off a depthwise-conv chain stands in.
    pub mamba: bool,
    /// Agent attention in every VSSB.
    pub attention: bool,
    /// Learnable border tokens around the scanned grid.
    pub padding_tokens: bool,
}

impl Ablation {
    pub const PRESETS: [(&'static str, Ablation); 4] = [
        ("wo-mamba", Ablation::new(false, false, false)),
        ("mamba", Ablation::new(true, false, false)),
        ("mamba-att", Ablation::new(true, true, false)),
        ("mamba-att-padding", Ablation::new(true, true, true)),
    ];

    pub const fn new(mamba: bool, attention: bool, padding_tokens: bool) -> Self {
        Self {
            mamba,
            attention,
            padding_tokens,
        }
    }

    pub fn full() -> Self {
        Self::new(true, true, true)
    }

    pub fn preset(name: &str) -> Result<Self> {
        Self::PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, a)| *a)
            .ok_or_else(|| {
                let names: Vec<_> = Self::PRESETS.iter().map(|(n, _)| *n).collect();
                Error::Config(format!("unknown preset {name:?}, expected one of {names:?}"))
            })
    }

    pub fn name(&self) -> Option<&'static str> {
        Self::PRESETS.iter().find(|(_, a)| a == self).map(|(n, _)| *n)
    }
}

impl Default for Ablation {
    fn default() -> Self {
        Self::full()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Number of U-Net levels; the input side must be divisible by `2^depth`.
    pub depth: usize,
    /// Channel width per level, fine to coarse.
    pub widths: Vec<usize>,
    pub state_size: usize,
    pub expand: usize,
    pub agent_count: usize,
    pub conv_kernel: usize,
    pub tex_channels: usize,
    /// Start every SPADE modulation at `γ = β = 0`.
    pub spade_zero_init: bool,
    /// Channel widths of the three strided critic stages.
    pub disc_widths: [usize; 3],
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            widths: vec![16, 32, 64],
            state_size: 8,
            expand: 2,
            agent_count: 16,
            conv_kernel: 3,
            tex_channels: 8,
            spade_zero_init: true,
            disc_widths: [16, 32, 64],
            ablation: Ablation::full(),
        }
    }
}

impl ModelConfig {
    /// Smallest configuration with every component present, for gradient
    /// checks and fast tests.
    pub fn tiny() -> Self {
        Self {
            depth: 2,
            widths: vec![4, 4],
            state_size: 2,
            expand: 1,
            agent_count: 4,
            conv_kernel: 3,
            tex_channels: 2,
            spade_zero_init: false,
            disc_widths: [2, 2, 2],
            ablation: Ablation::full(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.widths.len() != self.depth {
            return Err(Error::Config(format!(
                "depth {} needs exactly that many widths, got {:?}",
                self.depth, self.widths
            )));
        }
        if self.widths.iter().chain(&self.disc_widths).any(|&w| w == 0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.state_size == 0 || self.expand == 0 || self.tex_channels == 0 {
            return Err(Error::Config(
                "state size, expand and texture width must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Rejects spatial sizes the U-Net cannot halve exactly.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let m = 1usize << self.depth;
        if h == 0 || w == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) {
            return Err(Error::shape(
                "generator",
                format!("input {h}x{w} is not divisible by 2^{} = {m}", self.depth),
            ));
        }
        Ok(())
    }

    fn vssb(&self, channels: usize) -> VssbConfig {
        let mut c = VssbConfig::new(channels, self.state_size);
        c.vssm.expand = self.expand;
        c.vssm.mixer = if self.ablation.mamba {
            MixerKind::Scan
        } else {
            MixerKind::Conv
        };
        c.vssm.padding_tokens = self.ablation.padding_tokens;
        c.agent_count = self.agent_count;
        c.conv_kernel = self.conv_kernel;
        c.attention = self.ablation.attention;
        c
    }
}

/// `out = shortcut(x) + Conv₂(LReLU(Conv₁(LReLU(x))))`.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub shortcut: Option<Conv2d>,
}

impl ResBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(store, &format!("{prefix}.conv1"), cin, cout, 3, 1, true, rng)?,
            conv2: Conv2d::new(store, &format!("{prefix}.conv2"), cout, cout, 3, 1, true, rng)?,
            shortcut: if cin != cout {
                Some(Conv2d::new(
                    store,
                    &format!("{prefix}.shortcut"),
                    cin,
                    cout,
                    1,
                    1,
                    false,
                    rng,
                )?)
            } else {
                None
            },
        })
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let slope = T::of(LEAKY_SLOPE);
        let h = g.leaky_relu(x, slope)?;
        let h = self.conv1.forward(g, p, h)?;
        let h = g.leaky_relu(h, slope)?;
        let h = self.conv2.forward(g, p, h)?;
        let s = match &self.shortcut {
            Some(c) => c.forward(g, p, x)?,
            None => x,
        };
        g.add(s, h)
    }
}

/// Stem or strided conv followed by a VSSB, one per level.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub convs: Vec<Conv2d>,
    pub blocks: Vec<Vssb>,
}

impl Encoder {
    fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &ModelConfig,
        cin: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut convs = Vec::new();
        let mut blocks = Vec::new();
        let mut prev = cin;
        for (i, &w) in cfg.widths.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            convs.push(Conv2d::new(
                store,
                &format!("{prefix}.down{i}"),
                prev,
                w,
                3,
                stride,
                true,
                rng,
            )?);
            blocks.push(Vssb::new(store, &format!("{prefix}.vssb{i}"), &cfg.vssb(w), rng)?);
            prev = w;
        }
        Ok(Self { convs, blocks })
    }

    /// Encoder features fine to coarse.
    fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Result<Vec<Var>> {
        let mut feats = Vec::with_capacity(self.blocks.len());
        let mut h = x;
        for (conv, block) in self.convs.iter().zip(&self.blocks) {
            h = conv.forward(g, p, h)?;
            h = block.forward(g, p, h)?;
            feats.push(h);
        }
        Ok(feats)
    }

    fn set_kernel(&mut self, kernel: ScanKernel) {
        for b in &mut self.blocks {
            b.set_kernel(kernel);
        }
    }
}

/// Nearest upsampling followed by a 3×3 conv.
fn up<T: Scalar>(g: &Graph<T>, p: &Bound, conv: &Conv2d, x: Var) -> Result<Var> {
    let u = g.upsample2(x)?;
    conv.forward(g, p, u)
}

/// Output of the HSV sub-network.
#[derive(Clone, Debug)]
pub struct GeneratorBOutput {
    pub y_hsv: Var,
    /// Decoder features coarse to fine, one per level.
    pub feats: Vec<Var>,
    pub sfe: SfeOutput,
}

#[derive(Clone, Debug)]
pub struct GeneratorB {
    pub cfg: ModelConfig,
    pub sfe: Sfe,
    pub encoder: Encoder,
    pub bottleneck: ResBlock,
    /// `ups[i]` brings level `i+1` up to level `i`.
    pub ups: Vec<Conv2d>,
    /// `decoders[i]` merges the upsampled path with the level-`i` skip.
    pub decoders: Vec<ResBlock>,
    pub head: Conv2d,
}

impl GeneratorB {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let w = &cfg.widths;
        let sfe = Sfe::new(store, &format!("{prefix}.sfe"), w[0], cfg.tex_channels, rng)?;
        let encoder = Encoder::new(store, &format!("{prefix}.enc"), cfg, w[0], rng)?;
        let d = cfg.depth;
        let bottleneck = ResBlock::new(store, &format!("{prefix}.dec{}", d - 1), w[d - 1], w[d - 1], rng)?;
        let mut ups = Vec::new();
        let mut decoders = Vec::new();
        for i in 0..d - 1 {
            ups.push(Conv2d::new(
                store,
                &format!("{prefix}.up{i}"),
                w[i + 1],
                w[i],
                3,
                1,
                true,
                rng,
            )?);
            decoders.push(ResBlock::new(store, &format!("{prefix}.dec{i}"), 2 * w[i], w[i], rng)?);
        }
        let head = Conv2d::new(store, &format!("{prefix}.head"), w[0], 3, 3, 1, true, rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            sfe,
            encoder,
            bottleneck,
            ups,
            decoders,
            head,
        })
    }

    /// `nir`: `(B,H,W,1)`.
    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound, nir: Var) -> Result<GeneratorBOutput> {
        let [_, h, w, c] = g.value(nir).dims4()?;
        if c != 1 {
            return Err(Error::shape("generator_b", format!("expected 1 NIR channel, got {c}")));
        }
        self.cfg.check_input(h, w)?;
        let sfe = self.sfe.forward(g, p, nir)?;
        let skips = self.encoder.forward(g, p, sfe.x_nir_hsv)?;
        let d = self.cfg.depth;
        let mut x = self.bottleneck.forward(g, p, skips[d - 1])?;
        let mut feats = vec![x];
        for i in (0..d - 1).rev() {
            let u = up(g, p, &self.ups[i], x)?;
            let cat = g.concat_last(&[u, skips[i]])?;
            x = self.decoders[i].forward(g, p, cat)?;
            feats.push(x);
        }
        let y_hsv = g.sigmoid(self.head.forward(g, p, x)?)?;
        Ok(GeneratorBOutput { y_hsv, feats, sfe })
    }

    pub fn set_kernel(&mut self, kernel: ScanKernel) {
        self.encoder.set_kernel(kernel);
    }
}

/// RGB reconstruction network with feature-conditioned decoder and fusion
/// head.
#[derive(Clone, Debug)]
pub struct GeneratorA {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub bottleneck: SpadeResBlock,
    pub ups: Vec<Conv2d>,
    pub decoders: Vec<SpadeResBlock>,
    /// Embeds the HSV prediction as the color map.
    pub color_in: Conv2d,
    /// Enriches the color map with texture.
    pub color_spade: SpadeResBlock,
    pub fuse: CrossAttentionFuse,
    pub head: Conv2d,
}

impl GeneratorA {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let w = &cfg.widths;
        let d = cfg.depth;
        let z = cfg.spade_zero_init;
        let encoder = Encoder::new(store, &format!("{prefix}.enc"), cfg, 1, rng)?;
        let bottleneck = SpadeResBlock::new(
            store,
            &format!("{prefix}.dec{}", d - 1),
            w[d - 1],
            w[d - 1],
            w[d - 1],
            z,
            rng,
        )?;
        let mut ups = Vec::new();
        let mut decoders = Vec::new();
        for i in 0..d - 1 {
            ups.push(Conv2d::new(
                store,
                &format!("{prefix}.up{i}"),
                w[i + 1],
                w[i],
                3,
                1,
                true,
                rng,
            )?);
            decoders.push(SpadeResBlock::new(
                store,
                &format!("{prefix}.dec{i}"),
                2 * w[i],
                w[i],
                w[i],
                z,
                rng,
            )?);
        }
        let color_in = Conv2d::new(store, &format!("{prefix}.color_in"), 3, w[0], 3, 1, true, rng)?;
        let color_spade = SpadeResBlock::new(
            store,
            &format!("{prefix}.color_spade"),
            w[0],
            w[0],
            cfg.tex_channels,
            z,
            rng,
        )?;
        let fuse = CrossAttentionFuse::new(store, &format!("{prefix}.fuse"), w[0], w[0], rng)?;
        let head = Conv2d::new(store, &format!("{prefix}.head"), w[0], 3, 3, 1, true, rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            bottleneck,
            ups,
            decoders,
            color_in,
            color_spade,
            fuse,
            head,
        })
    }

    /// `feats` coarse to fine as produced by [`GeneratorB::forward`];
    /// `y_hsv` is the color map the fusion head enriches with `x_tex`.
    pub fn forward<T: Scalar>(
        &self,
        g: &Graph<T>,
        p: &Bound,
        nir: Var,
        feats: &[Var],
        x_tex: Var,
        y_hsv: Var,
    ) -> Result<Var> {
        let [b, h, w, c] = g.value(nir).dims4()?;
        if c != 1 {
            return Err(Error::shape("generator_a", format!("expected 1 NIR channel, got {c}")));
        }
        self.cfg.check_input(h, w)?;
        let d = self.cfg.depth;
        if feats.len() != d {
            return Err(Error::Config(format!(
                "expected {d} conditioning features, got {}",
                feats.len()
            )));
        }
        for (k, &f) in feats.iter().enumerate() {
            let level = d - 1 - k;
            let expect = [b, h >> level, w >> level, self.cfg.widths[level]];
            let got = g.value(f).dims4()?;
            if got != expect {
                return Err(Error::Config(format!(
                    "conditioning feature {k} has shape {got:?}, expected {expect:?}"
                )));
            }
        }
        for (name, v, ch) in [("x_tex", x_tex, self.cfg.tex_channels), ("y_hsv", y_hsv, 3)] {
            let got = g.value(v).dims4()?;
            if got != [b, h, w, ch] {
                return Err(Error::Config(format!(
                    "{name} has shape {got:?}, expected {:?}",
                    [b, h, w, ch]
                )));
            }
        }

        let skips = self.encoder.forward(g, p, nir)?;
        let mut x = self.bottleneck.forward(g, p, skips[d - 1], feats[0])?;
        for i in (0..d - 1).rev() {
            let u = up(g, p, &self.ups[i], x)?;
            let cat = g.concat_last(&[u, skips[i]])?;
            x = self.decoders[i].forward(g, p, cat, feats[d - 1 - i])?;
        }
        let color = self.color_in.forward(g, p, y_hsv)?;
        let color = self.color_spade.forward(g, p, color, x_tex)?;
        let fused = self.fuse.forward(g, p, x, color)?;
        g.sigmoid(self.head.forward(g, p, fused)?)
    }

    pub fn set_kernel(&mut self, kernel: ScanKernel) {
        self.encoder.set_kernel(kernel);
    }
}

/// Both generators wired end to end.
#[derive(Clone, Debug)]
pub struct Colorizer {
    pub cfg: ModelConfig,
    pub gen_b: GeneratorB,
    pub gen_a: GeneratorA,
}

#[derive(Clone, Debug)]
pub struct ColorizerOutput {
    pub y_rgb: Var,
    pub b: GeneratorBOutput,
}

impl Colorizer {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        Ok(Self {
            cfg: cfg.clone(),
            gen_b: GeneratorB::new(store, "gen_b", cfg, rng)?,
            gen_a: GeneratorA::new(store, "gen_a", cfg, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound, nir: Var) -> Result<ColorizerOutput> {
        let b = self.gen_b.forward(g, p, nir)?;
        let y_rgb = self.gen_a.forward(g, p, nir, &b.feats, b.sfe.x_tex, b.y_hsv)?;
        Ok(ColorizerOutput { y_rgb, b })
    }

    pub fn set_kernel(&mut self, kernel: ScanKernel) {
        self.gen_a.set_kernel(kernel);
        self.gen_b.set_kernel(kernel);
    }
}

/// Patch critic: three stride-2 3×3 convs with leaky ReLU (instance norm on
/// all but the first), then a 3×3 conv to one logit per patch.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub stages: Vec<Conv2d>,
    pub out: Conv2d,
}

impl Discriminator {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        widths: [usize; 3],
        rng: &mut R,
    ) -> Result<Self> {
        let mut stages = Vec::new();
        let mut prev = 3;
        for (i, &w) in widths.iter().enumerate() {
            stages.push(Conv2d::new(
                store,
                &format!("{prefix}.conv{i}"),
                prev,
                w,
                3,
                2,
                true,
                rng,
            )?);
            prev = w;
        }
        let out = Conv2d::new(store, &format!("{prefix}.out"), prev, 1, 3, 1, true, rng)?;
        Ok(Self { stages, out })
    }

    /// `(B,H,W,3)` → `(B,H/8,W/8,1)` logits.
    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound, img: Var) -> Result<Var> {
        let [_, h, w, c] = g.value(img).dims4()?;
        if c != 3 || h % 8 != 0 || w % 8 != 0 {
            return Err(Error::shape(
                "discriminator",
                format!("expected (B, 8k, 8m, 3), got {:?}", g.shape(img)),
            ));
        }
        let slope = T::of(LEAKY_SLOPE);
        let mut x = img;
        for (i, s) in self.stages.iter().enumerate() {
            x = s.forward(g, p, x)?;
            if i > 0 {
                x = g.instance_norm(x, T::of(NORM_EPS))?;
            }
            x = g.leaky_relu(x, slope)?;
        }
        self.out.forward(g, p, x)
    }
}
