//! Stage assembly: network bundles, checkpoint save/load, dataset
//! preparation at both resolutions, condition upscaling, inference, and the
//! paired/unpaired evaluation protocol.

use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::condgen::{AblationFlags, CondGenConfig, CondGenOutput, CondGenerator};
use crate::data::synth::{generate_synthetic_dataset_with, SceneInfo, SynthConfig};
use crate::data::{load_dataset, DataError};
use crate::fields::{ImageField, MaskField, SampleRecord, SegMap};
use crate::harness::checkpoint::{self, Checkpoint, CheckpointError};
use crate::harness::config::{ConfigError, DatasetSource, RunConfig};
use crate::harness::metrics::ssim;
use crate::imagegen::{DiscriminatorBank, DiscriminatorConfig, ImageGenConfig, ImageGenerator};
use crate::nn::{stream_rng, Adam, ParamStore};
use crate::palette::LabelPalette;
use crate::rejection::{
    build_rejection_input, d_scalar, estimate_l, gate, GateDecision, RejectionCalibration,
    RejectionError,
};
use crate::tensor::Tensor;
use crate::warp::{upsample_flow, warp, AppearanceFlow};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error("rejection: {0}")]
    Rejection(#[from] RejectionError),
    #[error("checkpoint was trained at {expected:?} but inputs are {got:?}")]
    ResolutionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("{0}")]
    Invalid(String),
}

/// Condition generator plus its discriminator and parameters.
pub struct TocgBundle {
    pub gen: CondGenerator,
    pub disc: DiscriminatorBank,
    pub store: ParamStore<f32>,
    pub palette: LabelPalette,
    pub init_seed: u64,
    pub cond_res: (usize, usize),
    pub out_res: (usize, usize),
    pub cond_widths: [usize; 5],
    pub toig_widths: [usize; 4],
}

/// Image generator plus its discriminator and parameters.
pub struct ToigBundle {
    pub gen: ImageGenerator,
    pub disc: DiscriminatorBank,
    pub store: ParamStore<f32>,
    pub palette: LabelPalette,
    pub init_seed: u64,
    pub cond_res: (usize, usize),
    pub out_res: (usize, usize),
    pub cond_widths: [usize; 5],
    pub toig_widths: [usize; 4],
}

pub fn build_tocg(palette: &LabelPalette, cfg: &RunConfig) -> Result<TocgBundle, PipelineError> {
    cfg.validate()?;
    let cseg = palette.num_channels();
    let mut store = ParamStore::new();
    let mut rng = stream_rng(cfg.seed, "init-tocg", 0, 0);
    let gen = CondGenerator::new(
        &mut store,
        &mut rng,
        CondGenConfig {
            resolution: cfg.condition_resolution,
            widths: cfg.cond_widths,
            seg_channels: cseg,
        },
    )
    .map_err(|e| PipelineError::Invalid(e.to_string()))?;
    let disc = DiscriminatorBank::new(
        &mut store,
        &mut rng,
        "tocg_d",
        DiscriminatorConfig {
            in_channels: 2 * cseg + 7,
            widths: [48, 96, 160],
            input_downsample: true,
            dropout: 0.25,
        },
    );
    Ok(TocgBundle {
        gen,
        disc,
        store,
        palette: palette.clone(),
        init_seed: cfg.seed,
        cond_res: cfg.condition_resolution,
        out_res: cfg.output_resolution,
        cond_widths: cfg.cond_widths,
        toig_widths: cfg.toig_widths,
    })
}

pub fn build_toig(palette: &LabelPalette, cfg: &RunConfig) -> Result<ToigBundle, PipelineError> {
    cfg.validate()?;
    let cseg = palette.num_channels();
    let mut store = ParamStore::new();
    let mut rng = stream_rng(cfg.seed, "init-toig", 0, 0);
    let gen = ImageGenerator::new(
        &mut store,
        &mut rng,
        ImageGenConfig {
            resolution: cfg.output_resolution,
            widths: cfg.toig_widths,
            seg_channels: cseg,
            cond_channels: 9,
        },
    )
    .map_err(|e| PipelineError::Invalid(e.to_string()))?;
    let disc = DiscriminatorBank::new(
        &mut store,
        &mut rng,
        "toig_d",
        DiscriminatorConfig {
            in_channels: cseg + 9 + 3,
            widths: [32, 64, 128],
            input_downsample: false,
            dropout: 0.0,
        },
    );
    Ok(ToigBundle {
        gen,
        disc,
        store,
        palette: palette.clone(),
        init_seed: cfg.seed,
        cond_res: cfg.condition_resolution,
        out_res: cfg.output_resolution,
        cond_widths: cfg.cond_widths,
        toig_widths: cfg.toig_widths,
    })
}

#[allow(clippy::too_many_arguments)]
pub fn save_tocg(
    path: &Path,
    b: &TocgBundle,
    iteration: u64,
    adam_gen: Option<&Adam>,
    adam_disc: Option<&Adam>,
) -> Result<(), PipelineError> {
    checkpoint::save(
        path,
        "tocg",
        iteration,
        b.init_seed,
        &b.palette,
        b.cond_res,
        b.out_res,
        b.cond_widths,
        b.toig_widths,
        &b.store,
        adam_gen,
        adam_disc,
    )?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn save_toig(
    path: &Path,
    b: &ToigBundle,
    iteration: u64,
    adam_gen: Option<&Adam>,
    adam_disc: Option<&Adam>,
) -> Result<(), PipelineError> {
    checkpoint::save(
        path,
        "toig",
        iteration,
        b.init_seed,
        &b.palette,
        b.cond_res,
        b.out_res,
        b.cond_widths,
        b.toig_widths,
        &b.store,
        adam_gen,
        adam_disc,
    )?;
    Ok(())
}

fn config_from_header(h: &checkpoint::CheckpointHeader) -> RunConfig {
    RunConfig {
        condition_resolution: h.condition_resolution,
        output_resolution: h.output_resolution,
        seed: h.init_seed,
        cond_widths: h.cond_widths,
        toig_widths: h.toig_widths,
        ..RunConfig::default()
    }
}

/// Rebuild the architecture recorded in a checkpoint and load its values.
pub fn load_tocg(path: &Path) -> Result<(TocgBundle, Checkpoint), PipelineError> {
    let ck = checkpoint::load(path)?;
    if ck.header.kind != "tocg" {
        return Err(PipelineError::Invalid(format!(
            "expected a tocg checkpoint, found {:?}",
            ck.header.kind
        )));
    }
    let cfg = config_from_header(&ck.header);
    let mut b = build_tocg(&ck.header.palette, &cfg)?;
    b.store.load_values(&ck.store);
    Ok((b, ck))
}

pub fn load_toig(path: &Path) -> Result<(ToigBundle, Checkpoint), PipelineError> {
    let ck = checkpoint::load(path)?;
    if ck.header.kind != "toig" {
        return Err(PipelineError::Invalid(format!(
            "expected a toig checkpoint, found {:?}",
            ck.header.kind
        )));
    }
    let cfg = config_from_header(&ck.header);
    let mut b = build_toig(&ck.header.palette, &cfg)?;
    b.store.load_values(&ck.store);
    Ok((b, ck))
}

/// Training/eval dataset materialized at both pipeline resolutions.
/// Synthetic scenes are resolution-parametric, so the condition-scale and
/// output-scale records describe the same scene.
pub struct PreparedDataset {
    pub cond: Vec<SampleRecord>,
    pub out: Vec<SampleRecord>,
    pub infos: Vec<Option<SceneInfo>>,
}

impl PreparedDataset {
    pub fn len(&self) -> usize {
        self.cond.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cond.is_empty()
    }
}

pub fn prepare_dataset(
    cfg: &RunConfig,
    palette: &LabelPalette,
) -> Result<PreparedDataset, PipelineError> {
    match cfg.dataset {
        DatasetSource::Synthetic => Ok(synth_dataset(
            cfg.seed,
            cfg.synth_n,
            cfg,
            palette,
            cfg.occlusion_prob,
        )),
        DatasetSource::Directory => {
            let root = cfg.data_root.clone().ok_or_else(|| {
                PipelineError::Invalid("directory dataset requires data_root".into())
            })?;
            let pairs = cfg
                .pairs_file
                .clone()
                .unwrap_or_else(|| root.join("pairs.txt"));
            let load = |res: (usize, usize)| -> Result<Vec<SampleRecord>, PipelineError> {
                let recs = load_dataset(&root, &pairs, palette, res)?;
                let mut out = Vec::with_capacity(recs.len());
                for r in recs {
                    out.push(r?);
                }
                Ok(out)
            };
            let cond = load(cfg.condition_resolution)?;
            let out = load(cfg.output_resolution)?;
            let infos = vec![None; cond.len()];
            Ok(PreparedDataset { cond, out, infos })
        }
    }
}

/// Synthetic dataset at both resolutions with scene ground truth attached.
pub fn synth_dataset(
    seed: u64,
    n: usize,
    cfg: &RunConfig,
    palette: &LabelPalette,
    occlusion_prob: f64,
) -> PreparedDataset {
    let synth_cfg = SynthConfig {
        occlusion_prob,
        ..SynthConfig::default()
    };
    let cond: Vec<(SampleRecord, SceneInfo)> = generate_synthetic_dataset_with(
        seed,
        n,
        cfg.condition_resolution,
        palette,
        &synth_cfg,
    );
    let out: Vec<(SampleRecord, SceneInfo)> =
        generate_synthetic_dataset_with(seed, n, cfg.output_resolution, palette, &synth_cfg);
    let infos = out.iter().map(|(_, i)| Some(i.clone())).collect();
    PreparedDataset {
        cond: cond.into_iter().map(|(r, _)| r).collect(),
        out: out.into_iter().map(|(r, _)| r).collect(),
        infos,
    }
}

/// Bilinear upsample of a soft segmentation with per-pixel renormalization
/// (bilinear mixing preserves channel sums only approximately at borders).
pub fn upsample_seg(seg: &SegMap, oh: usize, ow: usize) -> SegMap {
    let (c, h, w) = seg.data.chw();
    let mut up = Tensor::zeros(&[c, oh, ow]);
    crate::kernels::bilinear_resize_forward(seg.data.data(), c, h, w, oh, ow, up.data_mut());
    let n = oh * ow;
    for p in 0..n {
        let mut s = 0.0f32;
        for ch in 0..c {
            s += up.data()[ch * n + p];
        }
        if s > 0.0 {
            for ch in 0..c {
                up.data_mut()[ch * n + p] /= s;
            }
        }
    }
    SegMap::new(up, seg.palette.clone()).expect("upsampled seg shape")
}

/// Conditions for the image generator at output resolution.
#[derive(Clone, Debug)]
pub struct ToigConditions {
    /// `(I_a, warped clothes, P)` stacked, `[9, H, W]`.
    pub cond_stack: Tensor<f32>,
    pub seg_up: SegMap,
    pub warped_clothes: ImageField,
    pub warped_mask: MaskField,
}

/// Upscale the condition generator's outputs and warp the full-resolution
/// clothes: seg bilinear+renormalized, flow upsampled with value scaling,
/// occlusion handling reapplied at output resolution.
pub fn produce_conditions(
    tocg: &TocgBundle,
    cond_out: &CondGenOutput,
    out_rec: &SampleRecord,
    ablation: AblationFlags,
) -> ToigConditions {
    let (oh, ow) = out_rec.person.hw();
    let (chh, _) = cond_out.seg.hw();
    let factor = oh / chh;
    let seg_up = upsample_seg(&cond_out.seg, oh, ow);
    let flow_up: AppearanceFlow<f32> = upsample_flow(&cond_out.flow_pyramid[4], factor);
    let raw_wc = warp(&out_rec.clothes.data, &flow_up).expect("sizes match");
    let raw_wm = warp(&out_rec.clothes_mask.data, &flow_up).expect("sizes match");
    let (wc, wm) = if ablation.no_occlusion_handling {
        (raw_wc, raw_wm)
    } else {
        let keep = crate::condgen::occlusion_keep_mask(&seg_up.data, &tocg.palette);
        let n = oh * ow;
        let mut wc = raw_wc;
        for ch in 0..3 {
            for p in 0..n {
                wc.data_mut()[ch * n + p] *= keep.data()[p];
            }
        }
        let mut wm = raw_wm;
        for p in 0..n {
            wm.data_mut()[p] *= keep.data()[p];
        }
        (wc, wm)
    };
    let warped_clothes = ImageField::new(wc.map(|v| v.clamp(-1.0, 1.0))).expect("warped clothes");
    let warped_mask = MaskField::new(wm.map(|v| v.clamp(0.0, 1.0))).expect("warped mask");
    let mut cond = Vec::with_capacity(9 * oh * ow);
    cond.extend_from_slice(out_rec.agnostic_image.data.data());
    cond.extend_from_slice(warped_clothes.data.data());
    cond.extend_from_slice(out_rec.pose.data.data());
    ToigConditions {
        cond_stack: Tensor::from_vec(&[9, oh, ow], cond),
        seg_up,
        warped_clothes,
        warped_mask,
    }
}

/// Run the image generator on prepared conditions.
pub fn toig_forward(toig: &ToigBundle, cond: &ToigConditions) -> ImageField {
    use crate::nn::Binding;
    use crate::tape::Tape;
    let mut tape = Tape::<f32>::new();
    let mut bind = Binding::new(&toig.store, false);
    let c = tape.constant(cond.cond_stack.clone());
    let s = tape.constant(cond.seg_up.data.clone());
    let img = toig.gen.forward_on_tape(&mut tape, &mut bind, &toig.store, c, s);
    ImageField::new(tape.value(img).clone()).expect("generator output finite")
}

/// Swap the garment of a person record for another record's garment.
pub fn mix_records(person: &SampleRecord, cloth: &SampleRecord) -> SampleRecord {
    let mut rec = person.clone();
    rec.clothes = cloth.clothes.clone();
    rec.clothes_mask = cloth.clothes_mask.clone();
    rec.pair_id = format!("{}+{}", person.pair_id, cloth.pair_id);
    rec
}

#[derive(Clone, Debug)]
pub struct InferResult {
    pub image: Option<ImageField>,
    pub accepted: bool,
    pub p_accept: Option<f64>,
    pub cond: CondGenOutput,
    pub conditions: ToigConditions,
}

/// Full pipeline: condition generation, optional rejection gate, image
/// generation. On rejection the image stage is skipped.
#[allow(clippy::too_many_arguments)]
pub fn infer(
    tocg: &TocgBundle,
    toig: &ToigBundle,
    person_cond: &SampleRecord,
    person_out: &SampleRecord,
    cloth_cond: &SampleRecord,
    cloth_out: &SampleRecord,
    calibration: Option<&RejectionCalibration>,
    ablation: AblationFlags,
) -> Result<InferResult, PipelineError> {
    if person_cond.hw() != tocg.cond_res {
        return Err(PipelineError::ResolutionMismatch {
            expected: tocg.cond_res,
            got: person_cond.hw(),
        });
    }
    if person_out.hw() != toig.gen.config.resolution {
        return Err(PipelineError::ResolutionMismatch {
            expected: toig.gen.config.resolution,
            got: person_out.hw(),
        });
    }
    let mixed_cond = mix_records(person_cond, cloth_cond);
    let mixed_out = mix_records(person_out, cloth_out);
    let cond = tocg.gen.forward(&tocg.store, &mixed_cond, &tocg.palette, ablation);

    let (accepted, p) = match calibration {
        None => (true, None),
        Some(cal) => {
            let x = build_rejection_input(
                &cond.seg,
                &mixed_cond.pose,
                &mixed_cond.agnostic_parse,
                &mixed_cond.clothes,
                &mixed_cond.clothes_mask,
            )?;
            let d = d_scalar(&tocg.disc, &tocg.store, &x);
            match gate(d, cal) {
                GateDecision::Accept => (true, Some(crate::rejection::p_accept(d, cal))),
                GateDecision::Reject(p) => (false, Some(p)),
            }
        }
    };

    let conditions = produce_conditions(tocg, &cond, &mixed_out, ablation);
    let image = if accepted {
        Some(toig_forward(toig, &conditions))
    } else {
        None
    };
    Ok(InferResult {
        image,
        accepted,
        p_accept: p,
        cond,
        conditions,
    })
}

/// Discriminator-score calibration over a dataset using predicted
/// segmentation maps (the generator-side construction of the input stack).
pub fn calibrate_rejection(
    tocg: &TocgBundle,
    data: &PreparedDataset,
    tau: f64,
    ablation: AblationFlags,
) -> Result<RejectionCalibration, PipelineError> {
    let scores: Vec<f64> = data
        .cond
        .par_iter()
        .map(|rec| {
            let out = tocg.gen.forward(&tocg.store, rec, &tocg.palette, ablation);
            let x = build_rejection_input(
                &out.seg,
                &rec.pose,
                &rec.agnostic_parse,
                &rec.clothes,
                &rec.clothes_mask,
            )
            .expect("record shapes agree");
            d_scalar(&tocg.disc, &tocg.store, &x)
        })
        .collect();
    Ok(estimate_l(&scores, tau)?)
}

/// Paired-setting evaluation: reconstruct each person with their own
/// garment and average SSIM against the reference image.
pub fn eval_paired(
    tocg: &TocgBundle,
    toig: &ToigBundle,
    data: &PreparedDataset,
    ablation: AblationFlags,
) -> Result<(f64, Vec<f64>), PipelineError> {
    let scores: Vec<f64> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let res = infer(
                tocg,
                toig,
                &data.cond[i],
                &data.out[i],
                &data.cond[i],
                &data.out[i],
                None,
                ablation,
            )
            .expect("matching resolutions");
            ssim(res.image.as_ref().expect("no gate"), &data.out[i].person)
        })
        .collect();
    let mean = scores.iter().sum::<f64>() / scores.len().max(1) as f64;
    Ok((mean, scores))
}

/// Deterministic unpaired garment assignment by seeded permutation.
pub fn unpaired_permutation(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = stream_rng(seed, "unpaired", 0, 0);
    idx.shuffle(&mut rng);
    idx
}
