//! Try-on condition generator: two pyramid encoders, four feature fusion
//! blocks with flow and seg pathways, condition aligning, and body-part
//! occlusion handling.
//!
//! The structural guarantees live here: the clothing channel of the
//! predicted segmentation is multiplied by the warped clothing mask before
//! the softmax, so clothing can never dominate where no warped cloth
//! exists, and warped outputs are zeroed exactly on body-part pixels.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fields::{ImageField, LogitField, MaskField, SampleRecord, SegMap};
use crate::nn::{Binding, Conv2d, Init, ParamStore, ResBlock};
use crate::palette::LabelPalette;
use crate::tape::{NodeId, Tape};
use crate::tensor::{Scalar, Tensor};
use crate::warp::AppearanceFlow;
use rand_chacha::ChaCha12Rng;

#[derive(Debug, Error)]
pub enum CondGenError {
    #[error("condition resolution {0}x{1} must be divisible by 16")]
    ResolutionNotDivisible(usize, usize),
    #[error("pyramid levels have mismatched sizes: {0:?} vs {1:?}")]
    PyramidMismatch(Vec<(usize, usize)>, Vec<(usize, usize)>),
}

/// Ablation switches mirroring the runnable experiment toggles.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    /// Remove the information exchange between flow and seg pathways.
    pub no_fusion_exchange: bool,
    /// Skip the clothing-channel mask multiply before the softmax.
    pub no_condition_align: bool,
    /// Skip body-part removal from the warped clothes/mask.
    pub no_occlusion_handling: bool,
    /// Apply losses only at the finest scale (consumed by the trainer).
    pub no_multiscale_losses: bool,
}

#[derive(Clone, Debug)]
pub struct CondGenConfig {
    pub resolution: (usize, usize),
    /// Encoder channel widths per pyramid level, coarse last.
    pub widths: [usize; 5],
    pub seg_channels: usize,
}

impl CondGenConfig {
    pub fn desk(seg_channels: usize) -> Self {
        Self {
            resolution: (64, 48),
            widths: [16, 32, 64, 128, 128],
            seg_channels,
        }
    }

    pub fn validate(&self) -> Result<(), CondGenError> {
        let (h, w) = self.resolution;
        if h % 16 != 0 || w % 16 != 0 {
            return Err(CondGenError::ResolutionNotDivisible(h, w));
        }
        Ok(())
    }
}

/// Five-level feature pyramid, spatial size halving per level after the
/// full-resolution stem.
pub struct FeaturePyramid {
    pub levels: Vec<NodeId>,
}

/// Joint state of the two decoder pathways at one scale.
pub struct FusionState {
    pub flow: NodeId,
    pub seg_feature: NodeId,
}

/// Everything the condition generator produces for one sample.
#[derive(Clone, Debug)]
pub struct CondGenOutput {
    pub warped_clothes: ImageField,
    pub warped_mask: MaskField,
    pub seg: SegMap,
    pub seg_logits: LogitField,
    pub flow_pyramid: Vec<AppearanceFlow<f32>>,
    pub raw_warped_clothes: ImageField,
    pub raw_warped_mask: MaskField,
}

/// Tape-level handles to the forward pass, used by the training loop.
pub struct CondGenNodes {
    pub flows: Vec<NodeId>,
    pub seg_raw: NodeId,
    pub seg_logits: NodeId,
    pub seg: NodeId,
    pub raw_warped_clothes: NodeId,
    pub raw_warped_mask: NodeId,
    pub warped_clothes: NodeId,
    pub warped_mask: NodeId,
}

struct Encoder {
    blocks: Vec<ResBlock>,
}

impl Encoder {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha12Rng,
        name: &str,
        cin: usize,
        widths: &[usize; 5],
    ) -> Self {
        let mut blocks = Vec::new();
        let mut prev = cin;
        for (i, &wd) in widths.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            blocks.push(ResBlock::new(
                store,
                rng,
                &format!("{name}.block{i}"),
                prev,
                wd,
                stride,
            ));
            prev = wd;
        }
        Self { blocks }
    }

    fn apply<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: &mut Binding,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> FeaturePyramid {
        let mut levels = Vec::with_capacity(5);
        let mut cur = x;
        for b in &self.blocks {
            cur = b.apply(tape, bind, store, cur);
            levels.push(cur);
        }
        FeaturePyramid { levels }
    }
}

struct PathwayConvs {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl PathwayConvs {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha12Rng,
        name: &str,
        cin: usize,
        hidden: usize,
        cout: usize,
    ) -> Self {
        Self {
            conv1: Conv2d::new(store, rng, &format!("{name}.c1"), cin, hidden, 3, 1, 1, Init::HeNormal),
            conv2: Conv2d::new(store, rng, &format!("{name}.c2"), hidden, cout, 3, 1, 1, Init::HeNormal),
        }
    }

    fn apply<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: &mut Binding,
        store: &ParamStore<T>,
        x: NodeId,
        final_activation: bool,
    ) -> NodeId {
        let h = self.conv1.apply(tape, bind, store, x);
        let h = tape.leaky_relu(h, 0.2);
        let h = self.conv2.apply(tape, bind, store, h);
        if final_activation {
            tape.leaky_relu(h, 0.2)
        } else {
            h
        }
    }
}

struct FusionBlock {
    flow_convs: PathwayConvs,
    flow_delta: Conv2d,
    seg_convs: PathwayConvs,
    /// Reduced-input variants used when the exchange is ablated; same
    /// hidden/output widths, fewer input channels.
    flow_convs_noex: PathwayConvs,
    seg_convs_noex: PathwayConvs,
    last: bool,
}

pub struct CondGenerator {
    pub config: CondGenConfig,
    cloth_encoder: Encoder,
    seg_encoder: Encoder,
    init_flow_conv: Conv2d,
    init_seg_blocks: [ResBlock; 2],
    fusion: Vec<FusionBlock>,
}

impl CondGenerator {
    /// Construct with deterministic parameter initialization; the flow
    /// prediction convs start at zero so the initial flows are identically
    /// zero and refinement starts from the identity warp.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha12Rng,
        config: CondGenConfig,
    ) -> Result<Self, CondGenError> {
        config.validate()?;
        let widths = config.widths;
        let cseg = config.seg_channels;
        let cloth_encoder = Encoder::new(store, rng, "tocg.cloth_enc", 4, &widths);
        let seg_encoder = Encoder::new(store, rng, "tocg.seg_enc", cseg + 3, &widths);
        let init_flow_conv = Conv2d::new(
            store,
            rng,
            "tocg.init_flow",
            widths[4] * 2,
            2,
            3,
            1,
            1,
            Init::Zeros,
        );
        let init_seg_blocks = [
            ResBlock::new(store, rng, "tocg.init_seg0", widths[4], widths[4], 1),
            ResBlock::new(store, rng, "tocg.init_seg1", widths[4], widths[4], 1),
        ];

        // block i consumes encoder level 4-i; output widths shrink with scale
        let mut fusion = Vec::new();
        let mut seg_prev = widths[4];
        for i in 1..=4usize {
            let level = 4 - i;
            let ec = widths[level];
            let hidden = widths[level];
            let seg_out = if i == 4 { cseg } else { widths[level] };
            let name = format!("tocg.fuse{i}");
            let flow_convs = PathwayConvs::new(
                store,
                rng,
                &format!("{name}.flow"),
                ec + seg_prev,
                hidden,
                hidden,
            );
            let flow_delta = Conv2d::new(
                store,
                rng,
                &format!("{name}.flow_delta"),
                hidden,
                2,
                3,
                1,
                1,
                Init::Zeros,
            );
            let seg_convs = PathwayConvs::new(
                store,
                rng,
                &format!("{name}.seg"),
                ec + seg_prev + ec,
                hidden,
                seg_out,
            );
            let flow_convs_noex = PathwayConvs::new(
                store,
                rng,
                &format!("{name}.flow_noex"),
                ec,
                hidden,
                hidden,
            );
            let seg_convs_noex = PathwayConvs::new(
                store,
                rng,
                &format!("{name}.seg_noex"),
                seg_prev + ec,
                hidden,
                seg_out,
            );
            fusion.push(FusionBlock {
                flow_convs,
                flow_delta,
                seg_convs,
                flow_convs_noex,
                seg_convs_noex,
                last: i == 4,
            });
            seg_prev = seg_out;
        }

        Ok(Self {
            config,
            cloth_encoder,
            seg_encoder,
            init_flow_conv,
            init_seg_blocks,
            fusion,
        })
    }

    /// Extract the clothing feature pyramid from stacked `(c, c_m)`.
    pub fn encode_clothing<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: &mut Binding,
        store: &ParamStore<T>,
        cloth_input: NodeId,
    ) -> FeaturePyramid {
        self.cloth_encoder.apply(tape, bind, store, cloth_input)
    }

    /// Extract the segmentation feature pyramid from stacked `(S_a, P)`.
    pub fn encode_segmentation<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: &mut Binding,
        store: &ParamStore<T>,
        seg_input: NodeId,
    ) -> FeaturePyramid {
        self.seg_encoder.apply(tape, bind, store, seg_input)
    }

    /// First flow map from the concatenated coarsest features; first seg
    /// feature from two residual blocks over the seg encoder's last level.
    pub fn init_fusion<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: &mut Binding,
        store: &ParamStore<T>,
        e_c: &FeaturePyramid,
        e_s: &FeaturePyramid,
    ) -> FusionState {
        let c4 = e_c.levels[4];
        let s4 = e_s.levels[4];
        let (_, ch, cw) = tape.value(c4).chw();
        let (_, sh, sw) = tape.value(s4).chw();
        assert_eq!((ch, cw), (sh, sw), "pyramid scales must match");
        let cat = tape.concat(&[c4, s4]);
        let flow = self.init_flow_conv.apply(tape, bind, store, cat);
        let mut seg = s4;
        for b in &self.init_seg_blocks {
            seg = b.apply(tape, bind, store, seg);
        }
        FusionState {
            flow,
            seg_feature: seg,
        }
    }

    /// One feature fusion block: refine the flow residually at the next
    /// finer scale and produce the next seg feature.
    #[allow(clippy::too_many_arguments)]
    pub fn fusion_block<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: &mut Binding,
        store: &ParamStore<T>,
        state: &FusionState,
        e_c_level: NodeId,
        e_s_level: NodeId,
        block_index: usize,
        ablation: AblationFlags,
    ) -> FusionState {
        assert!((1..=4).contains(&block_index));
        let block = &self.fusion[block_index - 1];
        let (_, th, tw) = tape.value(e_c_level).chw();
        let (_, sh, sw) = tape.value(state.flow).chw();
        assert_eq!((sh * 2, sw * 2), (th, tw), "fusion block must double scale");

        // upsample flow x2 and rescale displacements to the finer pixel grid
        let up = tape.resize_bilinear(state.flow, th, tw);
        let flow_up = tape.scale(up, 2.0);
        let seg_up = tape.resize_bilinear(state.seg_feature, th, tw);

        // blue arrow: previous seg feature guides the flow refinement
        let warped_guide = tape.grid_sample(e_c_level, flow_up);
        let delta = if ablation.no_fusion_exchange {
            let h = block.flow_convs_noex.apply(tape, bind, store, warped_guide, true);
            block.flow_delta.apply(tape, bind, store, h)
        } else {
            let cat = tape.concat(&[warped_guide, seg_up]);
            let h = block.flow_convs.apply(tape, bind, store, cat, true);
            block.flow_delta.apply(tape, bind, store, h)
        };
        let flow = tape.add(flow_up, delta);

        // green arrow: the refined flow deforms the clothing feature which
        // joins the seg pathway
        let final_act = !block.last;
        let seg = if ablation.no_fusion_exchange {
            let cat = tape.concat(&[seg_up, e_s_level]);
            block.seg_convs_noex.apply(tape, bind, store, cat, final_act)
        } else {
            let warped = tape.grid_sample(e_c_level, flow);
            let cat = tape.concat(&[warped, seg_up, e_s_level]);
            block.seg_convs.apply(tape, bind, store, cat, final_act)
        };
        FusionState {
            flow,
            seg_feature: seg,
        }
    }

    /// Full forward pass over tape nodes.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_on_tape<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bind: &mut Binding,
        store: &ParamStore<T>,
        cloth_input: NodeId,
        seg_input: NodeId,
        cloth: NodeId,
        cloth_mask: NodeId,
        palette: &LabelPalette,
        ablation: AblationFlags,
    ) -> CondGenNodes {
        let e_c = self.encode_clothing(tape, bind, store, cloth_input);
        let e_s = self.encode_segmentation(tape, bind, store, seg_input);
        let mut state = self.init_fusion(tape, bind, store, &e_c, &e_s);
        let mut flows = vec![state.flow];
        for i in 1..=4usize {
            state = self.fusion_block(
                tape,
                bind,
                store,
                &state,
                e_c.levels[4 - i],
                e_s.levels[4 - i],
                i,
                ablation,
            );
            flows.push(state.flow);
        }
        let seg_raw = state.seg_feature;
        let final_flow = state.flow;
        let raw_warped_clothes = tape.grid_sample(cloth, final_flow);
        let raw_warped_mask = tape.grid_sample(cloth_mask, final_flow);

        let (seg_logits, seg) =
            condition_align_on_tape(tape, seg_raw, raw_warped_mask, palette, ablation);

        // occlusion handling: hard mask from the current seg values; the
        // gradient flows only through the warped clothes/mask factor
        let (warped_clothes, warped_mask) = if ablation.no_occlusion_handling {
            (raw_warped_clothes, raw_warped_mask)
        } else {
            let keep = occlusion_keep_mask(tape.value(seg), palette);
            let keep_node = tape.constant(keep);
            let wc = tape.mul(raw_warped_clothes, keep_node);
            let wm = tape.mul(raw_warped_mask, keep_node);
            (wc, wm)
        };

        CondGenNodes {
            flows,
            seg_raw,
            seg_logits,
            seg,
            raw_warped_clothes,
            raw_warped_mask,
            warped_clothes,
            warped_mask,
        }
    }

    /// Evaluation entry point building its own tape and returning typed
    /// fields. Deterministic in `(sample, params)`.
    pub fn forward(
        &self,
        store: &ParamStore<f32>,
        sample: &SampleRecord,
        palette: &LabelPalette,
        ablation: AblationFlags,
    ) -> CondGenOutput {
        let mut tape = Tape::<f32>::new();
        let mut bind = Binding::new(store, false);
        let cloth_in = tape.constant(stack_cloth_input(sample));
        let seg_in = tape.constant(stack_seg_input(sample));
        let cloth = tape.constant(sample.clothes.data.clone());
        let mask = tape.constant(sample.clothes_mask.data.clone());
        let nodes = self.forward_on_tape(
            &mut tape, &mut bind, store, cloth_in, seg_in, cloth, mask, palette, ablation,
        );
        self.collect_output(&tape, &nodes, palette)
    }

    pub fn collect_output(
        &self,
        tape: &Tape<f32>,
        nodes: &CondGenNodes,
        palette: &LabelPalette,
    ) -> CondGenOutput {
        let clamp_mask = |t: &Tensor<f32>| {
            // bilinear warping of a [0,1] mask stays in [0,1]; clamp only
            // guards float round-off at the boundary
            MaskField::new(t.map(|v| v.clamp(0.0, 1.0))).expect("mask in range")
        };
        CondGenOutput {
            warped_clothes: ImageField::new(tape.value(nodes.warped_clothes).clone())
                .expect("warped clothes finite"),
            warped_mask: clamp_mask(tape.value(nodes.warped_mask)),
            seg: SegMap::new(tape.value(nodes.seg).clone(), palette.clone())
                .expect("seg shape"),
            seg_logits: LogitField::new(tape.value(nodes.seg_logits).clone()),
            flow_pyramid: nodes
                .flows
                .iter()
                .map(|&f| AppearanceFlow::new(tape.value(f).clone()).expect("flow shape"))
                .collect(),
            raw_warped_clothes: ImageField::new(tape.value(nodes.raw_warped_clothes).clone())
                .expect("raw warped clothes finite"),
            raw_warped_mask: clamp_mask(tape.value(nodes.raw_warped_mask)),
        }
    }
}

/// Condition aligning: rectify the raw logits, multiply the clothing channel
/// by the warped clothing mask, then depth-wise softmax.
pub fn condition_align_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    seg_raw: NodeId,
    raw_warped_mask: NodeId,
    palette: &LabelPalette,
    ablation: AblationFlags,
) -> (NodeId, NodeId) {
    let rect = tape.relu(seg_raw);
    let logits = if ablation.no_condition_align {
        rect
    } else {
        tape.mul_channel(rect, raw_warped_mask, palette.clothing_channel)
    };
    let seg = tape.channel_softmax(logits);
    (logits, seg)
}

/// Pure variant for callers outside a training tape.
pub fn condition_align(
    seg_raw: &LogitField,
    raw_warped_mask: &MaskField,
    palette: &LabelPalette,
) -> (SegMap, LogitField) {
    let mut tape = Tape::<f32>::new();
    let s = tape.constant(seg_raw.data.clone());
    let m = tape.constant(raw_warped_mask.data.clone());
    let (logits, seg) =
        condition_align_on_tape(&mut tape, s, m, palette, AblationFlags::default());
    (
        SegMap::new(tape.value(seg).clone(), palette.clone()).expect("seg shape"),
        LogitField::new(tape.value(logits).clone()),
    )
}

/// `1 - body_mask` where `body_mask` marks pixels whose seg argmax lands on
/// a body-part channel. Ties break to the lowest channel index.
pub fn occlusion_keep_mask<T: Scalar>(seg: &Tensor<T>, palette: &LabelPalette) -> Tensor<T> {
    let (c, h, w) = seg.chw();
    let n = h * w;
    let d = seg.data();
    let mut keep = Tensor::full(&[1, h, w], T::ONE);
    for p in 0..n {
        let mut best = 0usize;
        let mut bv = d[p];
        for ch in 1..c {
            let v = d[ch * n + p];
            if v > bv {
                bv = v;
                best = ch;
            }
        }
        if palette.body_part_channels.contains(&best) {
            keep.data_mut()[p] = T::ZERO;
        }
    }
    keep
}

/// Pure occlusion handling on typed fields.
pub fn occlusion_handle(
    raw_warped_clothes: &ImageField,
    raw_warped_mask: &MaskField,
    seg: &SegMap,
    palette: &LabelPalette,
) -> (ImageField, MaskField) {
    let keep = occlusion_keep_mask(&seg.data, palette);
    let n = keep.numel();
    let mut img = raw_warped_clothes.data.clone();
    for ch in 0..3 {
        for p in 0..n {
            img.data_mut()[ch * n + p] *= keep.data()[p];
        }
    }
    let mut mask = raw_warped_mask.data.clone();
    for p in 0..n {
        mask.data_mut()[p] *= keep.data()[p];
    }
    (
        ImageField::new(img).expect("occluded clothes finite"),
        MaskField::new(mask).expect("occluded mask in range"),
    )
}

/// Stack `(c, c_m)` into the 4-channel clothing encoder input.
pub fn stack_cloth_input(sample: &SampleRecord) -> Tensor<f32> {
    let (h, w) = sample.clothes.hw();
    let mut data = Vec::with_capacity(4 * h * w);
    data.extend_from_slice(sample.clothes.data.data());
    data.extend_from_slice(sample.clothes_mask.data.data());
    Tensor::from_vec(&[4, h, w], data)
}

/// Stack `(S_a, P)` into the segmentation encoder input.
pub fn stack_seg_input(sample: &SampleRecord) -> Tensor<f32> {
    let (h, w) = sample.pose.hw();
    let cseg = sample.agnostic_parse.data.chw().0;
    let mut data = Vec::with_capacity((cseg + 3) * h * w);
    data.extend_from_slice(sample.agnostic_parse.data.data());
    data.extend_from_slice(sample.pose.data.data());
    Tensor::from_vec(&[cseg + 3, h, w], data)
}
