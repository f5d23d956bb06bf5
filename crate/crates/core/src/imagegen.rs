//! Try-on image generator: segmentation-conditioned residual generator with
//! spatially-adaptive normalization, plus the multi-scale patch
//! discriminators used by both training stages.

use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::nn::{dropout_mask, Binding, Conv2d, Init, ParamStore};
use crate::tape::{NodeId, Tape};
use crate::tensor::Scalar;

#[derive(Debug, Error)]
pub enum ImageGenError {
    #[error("output resolution {0}x{1} must be divisible by 8")]
    ResolutionNotDivisible(usize, usize),
}

/// Spatially-adaptive normalization: instance-normalize, then modulate with
/// per-site scale and shift inferred from the (resized) segmentation map.
pub struct SpadeNorm {
    shared: Conv2d,
    gamma: Conv2d,
    beta: Conv2d,
}

impl SpadeNorm {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha12Rng,
        name: &str,
        seg_channels: usize,
        feat_channels: usize,
        hidden: usize,
    ) -> Self {
        Self {
            shared: Conv2d::new(
                store,
                rng,
                &format!("{name}.shared"),
                seg_channels,
                hidden,
                3,
                1,
                1,
                Init::HeNormal,
            ),
            gamma: Conv2d::new(
                store,
                rng,
                &format!("{name}.gamma"),
                hidden,
                feat_channels,
                3,
                1,
                1,
                Init::Normal(0.02),
            ),
            beta: Conv2d::new(
                store,
                rng,
                &format!("{name}.beta"),
                hidden,
                feat_channels,
                3,
                1,
                1,
                Init::Normal(0.02),
            ),
        }
    }

    /// `out = normalize(x) * (1 + gamma(seg)) + beta(seg)`; the seg map is
    /// bilinearly resized to `x`'s spatial size.
    pub fn apply<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: &mut Binding,
        store: &ParamStore<T>,
        x: NodeId,
        seg: NodeId,
    ) -> NodeId {
        let (_, h, w) = tape.value(x).chw();
        let seg_r = tape.resize_bilinear(seg, h, w);
        let hid = self.shared.apply(tape, bind, store, seg_r);
        let hid = tape.relu(hid);
        let gamma = self.gamma.apply(tape, bind, store, hid);
        let beta = self.beta.apply(tape, bind, store, hid);
        let xn = tape.instance_norm(x, 1e-5);
        let scale = tape.add_const(gamma, 1.0);
        let modulated = tape.mul(xn, scale);
        tape.add(modulated, beta)
    }
}

struct SpadeResBlock {
    norm1: SpadeNorm,
    conv1: Conv2d,
    norm2: SpadeNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl SpadeResBlock {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha12Rng,
        name: &str,
        seg_channels: usize,
        cin: usize,
        cout: usize,
    ) -> Self {
        let hidden = 16;
        Self {
            norm1: SpadeNorm::new(store, rng, &format!("{name}.norm1"), seg_channels, cin, hidden),
            conv1: Conv2d::new(store, rng, &format!("{name}.conv1"), cin, cout, 3, 1, 1, Init::HeNormal),
            norm2: SpadeNorm::new(store, rng, &format!("{name}.norm2"), seg_channels, cout, hidden),
            conv2: Conv2d::new(store, rng, &format!("{name}.conv2"), cout, cout, 3, 1, 1, Init::HeNormal),
            skip: Some(Conv2d::new(store, rng, &format!("{name}.skip"), cin, cout, 1, 1, 0, Init::HeNormal)),
        }
    }

    fn apply<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: &mut Binding,
        store: &ParamStore<T>,
        x: NodeId,
        seg: NodeId,
    ) -> NodeId {
        let h = self.norm1.apply(tape, bind, store, x, seg);
        let h = tape.leaky_relu(h, 0.2);
        let h = self.conv1.apply(tape, bind, store, h);
        let h = self.norm2.apply(tape, bind, store, h, seg);
        let h = tape.leaky_relu(h, 0.2);
        let h = self.conv2.apply(tape, bind, store, h);
        let s = match &self.skip {
            Some(sk) => sk.apply(tape, bind, store, x),
            None => x,
        };
        tape.add(h, s)
    }
}

#[derive(Clone, Debug)]
pub struct ImageGenConfig {
    pub resolution: (usize, usize),
    /// Widths of the four SPADE residual blocks, coarse to fine.
    pub widths: [usize; 4],
    pub seg_channels: usize,
    /// Channels of the resized conditioning stack (`I_a`, warped clothes, `P`).
    pub cond_channels: usize,
}

impl ImageGenConfig {
    pub fn desk(seg_channels: usize) -> Self {
        Self {
            resolution: (128, 96),
            widths: [128, 64, 32, 16],
            seg_channels,
            cond_channels: 9,
        }
    }

    pub fn validate(&self) -> Result<(), ImageGenError> {
        let (h, w) = self.resolution;
        if h % 8 != 0 || w % 8 != 0 {
            return Err(ImageGenError::ResolutionNotDivisible(h, w));
        }
        Ok(())
    }
}

/// Coarse-to-fine SPADE generator with x2 upsampling between blocks; the
/// conditioning stack is resized and concatenated before each block.
pub struct ImageGenerator {
    pub config: ImageGenConfig,
    stem: Conv2d,
    blocks: Vec<SpadeResBlock>,
    out_conv: Conv2d,
}

impl ImageGenerator {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha12Rng,
        config: ImageGenConfig,
    ) -> Result<Self, ImageGenError> {
        config.validate()?;
        let cseg = config.seg_channels;
        let cc = config.cond_channels;
        let stem = Conv2d::new(
            store,
            rng,
            "toig.stem",
            cc,
            config.widths[0],
            3,
            1,
            1,
            Init::HeNormal,
        );
        let mut blocks = Vec::new();
        let mut prev = config.widths[0];
        for (i, &wd) in config.widths.iter().enumerate() {
            blocks.push(SpadeResBlock::new(
                store,
                rng,
                &format!("toig.block{i}"),
                cseg,
                prev + cc,
                wd,
            ));
            prev = wd;
        }
        let out_conv = Conv2d::new(
            store,
            rng,
            "toig.out",
            prev,
            3,
            3,
            1,
            1,
            Init::HeNormal,
        );
        Ok(Self {
            config,
            stem,
            blocks,
            out_conv,
        })
    }

    /// Forward pass over tape nodes. `cond` is the `[9, H, W]` stack of
    /// `(I_a, warped clothes, P)` at output resolution, `seg` the (upscaled)
    /// soft segmentation. Output is a tanh-bounded `[3, H, W]` image.
    pub fn forward_on_tape<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: &mut Binding,
        store: &ParamStore<T>,
        cond: NodeId,
        seg: NodeId,
    ) -> NodeId {
        let (h, w) = self.config.resolution;
        let nblocks = self.blocks.len();
        let coarse = (h >> (nblocks - 1), w >> (nblocks - 1));
        let cond0 = tape.resize_bilinear(cond, coarse.0, coarse.1);
        let mut x = self.stem.apply(tape, bind, store, cond0);
        for (i, block) in self.blocks.iter().enumerate() {
            let (_, xh, xw) = tape.value(x).chw();
            let c = tape.resize_bilinear(cond, xh, xw);
            let cat = tape.concat(&[x, c]);
            x = block.apply(tape, bind, store, cat, seg);
            if i + 1 < nblocks {
                let (_, xh, xw) = tape.value(x).chw();
                x = tape.resize_bilinear(x, xh * 2, xw * 2);
            }
        }
        let x = tape.leaky_relu(x, 0.2);
        let x = self.out_conv.apply(tape, bind, store, x);
        tape.tanh(x)
    }
}

#[derive(Clone, Debug)]
pub struct DiscriminatorConfig {
    pub in_channels: usize,
    pub widths: [usize; 3],
    /// Downsample the input by 2 before both scales (condition stage).
    pub input_downsample: bool,
    /// Dropout rate on intermediate activations; 0 disables.
    pub dropout: f64,
}

struct PatchDiscriminator {
    convs: Vec<Conv2d>,
    score: Conv2d,
}

impl PatchDiscriminator {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha12Rng,
        name: &str,
        cfg: &DiscriminatorConfig,
    ) -> Self {
        let mut convs = Vec::new();
        let mut prev = cfg.in_channels;
        for (i, &wd) in cfg.widths.iter().enumerate() {
            convs.push(Conv2d::new_spectral(
                store,
                rng,
                &format!("{name}.conv{i}"),
                prev,
                wd,
                3,
                2,
                1,
            ));
            prev = wd;
        }
        let score = Conv2d::new_spectral(store, rng, &format!("{name}.score"), prev, 1, 3, 1, 1);
        Self { convs, score }
    }

    fn apply<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: &mut Binding,
        store: &ParamStore<T>,
        x: NodeId,
        dropout: f64,
        rng: Option<&mut ChaCha12Rng>,
    ) -> (NodeId, Vec<NodeId>) {
        let mut feats = Vec::new();
        let mut cur = x;
        let mut rng = rng;
        for conv in &self.convs {
            cur = conv.apply(tape, bind, store, cur);
            cur = tape.leaky_relu(cur, 0.2);
            if dropout > 0.0 {
                if let Some(r) = rng.as_deref_mut() {
                    let mask = dropout_mask(r, tape.value(cur).dims(), dropout);
                    cur = tape.dropout(cur, mask);
                }
            }
            feats.push(cur);
        }
        let score = self.score.apply(tape, bind, store, cur);
        (score, feats)
    }
}

/// Two patch discriminators at full and half input scale, spectral norm on
/// every conv, intermediate features exposed for feature matching.
pub struct DiscriminatorBank {
    pub config: DiscriminatorConfig,
    scales: Vec<PatchDiscriminator>,
}

impl DiscriminatorBank {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha12Rng,
        name: &str,
        config: DiscriminatorConfig,
    ) -> Self {
        let scales = (0..2)
            .map(|i| PatchDiscriminator::new(store, rng, &format!("{name}.scale{i}"), &config))
            .collect();
        Self { config, scales }
    }

    /// One power-iteration step on every spectrally normalized conv; call
    /// once per optimizer step, before the batch forward passes.
    pub fn power_iterate_all<T: Scalar>(&self, store: &mut ParamStore<T>) {
        for d in &self.scales {
            for c in &d.convs {
                c.power_iterate(store);
            }
            d.score.power_iterate(store);
        }
    }

    pub fn spectral_convs(&self) -> Vec<&Conv2d> {
        let mut out = Vec::new();
        for d in &self.scales {
            out.extend(d.convs.iter());
            out.push(&d.score);
        }
        out
    }

    /// Patch score maps plus per-layer features per scale. Dropout is active
    /// only when an RNG is supplied (training mode); evaluation is
    /// deterministic.
    pub fn discriminate<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: &mut Binding,
        store: &ParamStore<T>,
        x: NodeId,
        mut rng: Option<&mut ChaCha12Rng>,
    ) -> (Vec<NodeId>, Vec<Vec<NodeId>>) {
        let (_, h, w) = tape.value(x).chw();
        let input = if self.config.input_downsample {
            tape.resize_bilinear(x, h / 2, w / 2)
        } else {
            x
        };
        let mut scores = Vec::new();
        let mut features = Vec::new();
        for (i, d) in self.scales.iter().enumerate() {
            let xi = if i == 0 {
                input
            } else {
                let (_, ih, iw) = tape.value(input).chw();
                tape.resize_bilinear(input, ih / 2, iw / 2)
            };
            let dropout = if rng.is_some() { self.config.dropout } else { 0.0 };
            let (score, feats) = d.apply(tape, bind, store, xi, dropout, rng.as_deref_mut());
            scores.push(score);
            features.push(feats);
        }
        (scores, features)
    }
}
