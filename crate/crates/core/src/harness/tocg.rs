//! Condition-generator training: alternating least-squares GAN updates with
//! the Eq-style composite objective, deterministic under any thread count.

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::condgen::stack_cloth_input;
use crate::condgen::stack_seg_input;
use crate::fields::SampleRecord;
use crate::harness::config::RunConfig;
use crate::harness::metrics::TocgRow;
use crate::harness::pipeline::{PreparedDataset, TocgBundle};
use crate::losses::{
    self, loss_ce, loss_l1_multiscale, loss_lsgan, loss_perceptual_multiscale, loss_tocg_total,
    GanRole, RandomConvExtractor,
};
use crate::nn::{reduce_grads, stream_rng, Adam, Binding};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at iteration {iter} ({component}); diagnostic snapshot: {snapshot}")]
    NonFinite {
        iter: u64,
        component: &'static str,
        snapshot: String,
    },
    #[error("training needs a nonempty dataset")]
    EmptyDataset,
}

/// Per-record constants reused every iteration.
struct Prepared {
    cloth_input: Tensor<f32>,
    seg_input: Tensor<f32>,
    cloth: Tensor<f32>,
    cloth_mask: Tensor<f32>,
    parse: Tensor<f32>,
    /// Ground-truth clothing region mask (clothing channel of S).
    s_c: Tensor<f32>,
    /// Ground-truth clothing pixels of the person image.
    i_c: Tensor<f32>,
    /// Discriminator input built from the ground-truth parse.
    real_x: Tensor<f32>,
}

fn prepare(rec: &SampleRecord, clothing_channel: usize) -> Prepared {
    let (h, w) = rec.person.hw();
    let n = h * w;
    let s_c = rec.parse.channel_mask(clothing_channel).data;
    let mut i_c = rec.person.data.clone();
    for ch in 0..3 {
        for p in 0..n {
            i_c.data_mut()[ch * n + p] *= s_c.data()[p];
        }
    }
    let real_x = crate::rejection::build_rejection_input(
        &rec.parse,
        &rec.pose,
        &rec.agnostic_parse,
        &rec.clothes,
        &rec.clothes_mask,
    )
    .expect("record shapes agree");
    Prepared {
        cloth_input: stack_cloth_input(rec),
        seg_input: stack_seg_input(rec),
        cloth: rec.clothes.data.clone(),
        cloth_mask: rec.clothes_mask.data.clone(),
        parse: rec.parse.data.clone(),
        s_c,
        i_c,
        real_x,
    }
}

struct SampleResult {
    g_grads: Vec<Option<Tensor<f32>>>,
    d_grads: Vec<Option<Tensor<f32>>>,
    parts: [f32; 7], // total, ce, gan, l1, vgg, tv, d
}

pub struct TocgTrainOutcome {
    pub rows: Vec<TocgRow>,
}

/// Train for `cfg.iterations` total iterations, starting at `start_iter`
/// (resume keeps batch and dropout streams aligned by deriving them from
/// the absolute iteration index).
pub fn train_tocg(
    bundle: &mut TocgBundle,
    adam_gen: &mut Adam,
    adam_disc: &mut Adam,
    data: &PreparedDataset,
    cfg: &RunConfig,
    start_iter: u64,
    mut on_row: impl FnMut(TocgRow),
) -> Result<TocgTrainOutcome, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let clothing = bundle.palette.clothing_channel;
    let prepared: Vec<Prepared> = data.cond.iter().map(|r| prepare(r, clothing)).collect();
    let extractor = RandomConvExtractor::<f32>::new(cfg.seed ^ 0x5eed_f00d, 3);
    let (fh, fw) = cfg.condition_resolution;
    let tv_norm = 1.0 / losses::tv_diff_count(2, fh, fw) as f64;
    let multiscale = !cfg.ablation.no_multiscale_losses;
    let mut rows = Vec::new();

    for iter in start_iter..cfg.iterations {
        // one power-iteration step per optimizer step, shared by the batch
        bundle.disc.power_iterate_all(&mut bundle.store);

        let mut batch_rng = stream_rng(cfg.seed, "batch-tocg", iter, 0);
        let batch: Vec<usize> = (0..cfg.batch_tocg)
            .map(|_| batch_rng.random_range(0..prepared.len()))
            .collect();

        let store = &bundle.store;
        let gen = &bundle.gen;
        let disc = &bundle.disc;
        let palette = &bundle.palette;
        let ablation = cfg.ablation;
        let weights = &cfg.weights;

        let results: Vec<SampleResult> = batch
            .par_iter()
            .enumerate()
            .map(|(bi, &idx)| {
                let ps = &prepared[idx];
                // generator pass
                let mut tape = Tape::<f32>::new();
                let mut bind_g = Binding::new(store, true);
                let mut bind_d = Binding::new(store, false);
                let cloth_in = tape.constant(ps.cloth_input.clone());
                let seg_in = tape.constant(ps.seg_input.clone());
                let cloth = tape.constant(ps.cloth.clone());
                let mask = tape.constant(ps.cloth_mask.clone());
                let nodes = gen.forward_on_tape(
                    &mut tape, &mut bind_g, store, cloth_in, seg_in, cloth, mask, palette,
                    ablation,
                );
                let ce = loss_ce(&mut tape, nodes.seg, ps.parse.clone());
                let l1 = loss_l1_multiscale(
                    &mut tape,
                    &nodes.flows[0..4],
                    nodes.warped_mask,
                    &ps.cloth_mask,
                    &ps.s_c,
                    &weights.w,
                    multiscale,
                );
                let vgg = loss_perceptual_multiscale(
                    &mut tape,
                    &extractor,
                    &nodes.flows[0..4],
                    nodes.warped_clothes,
                    &ps.cloth,
                    &ps.i_c,
                    &weights.w,
                    multiscale,
                );
                let tv_raw = tape.tv_sum(nodes.flows[4]);
                let tv = tape.scale(tv_raw, tv_norm);
                // conditional adversarial term on the predicted segmentation
                let pose_n = tape.constant(seg_slice(&ps.real_x, palette.num_channels(), fh, fw));
                let fake_x = tape.concat(&[nodes.seg, pose_n]);
                let mut rng_g = stream_rng(cfg.seed, "tocg-drop-g", iter, bi as u64);
                let (fake_scores, _) =
                    disc.discriminate(&mut tape, &mut bind_d, store, fake_x, Some(&mut rng_g));
                let gan_g = loss_lsgan(&mut tape, &[], &fake_scores, GanRole::Generator);
                let total = loss_tocg_total(&mut tape, ce, gan_g, l1, vgg, tv, weights);
                let mut grads = tape.backward(total);
                let g_grads = bind_g.collect_grads(&mut grads);
                let parts_g = [
                    tape.value(total).item(),
                    tape.value(ce).item(),
                    tape.value(gan_g).item(),
                    tape.value(l1).item(),
                    tape.value(vgg).item(),
                    tape.value(tv).item(),
                ];
                let fake_seg_value = tape.value(nodes.seg).clone();

                // discriminator pass on detached fake
                let mut tape_d = Tape::<f32>::new();
                let mut bind_dd = Binding::new(store, true);
                let real_x = tape_d.constant(ps.real_x.clone());
                let fake_seg = tape_d.constant(fake_seg_value);
                let cond_rest =
                    tape_d.constant(seg_slice(&ps.real_x, palette.num_channels(), fh, fw));
                let fake_x = tape_d.concat(&[fake_seg, cond_rest]);
                let mut rng_dr = stream_rng(cfg.seed, "tocg-drop-d-real", iter, bi as u64);
                let mut rng_df = stream_rng(cfg.seed, "tocg-drop-d-fake", iter, bi as u64);
                let (real_scores, _) =
                    disc.discriminate(&mut tape_d, &mut bind_dd, store, real_x, Some(&mut rng_dr));
                let (fake_scores, _) =
                    disc.discriminate(&mut tape_d, &mut bind_dd, store, fake_x, Some(&mut rng_df));
                let d_loss = loss_lsgan(
                    &mut tape_d,
                    &real_scores,
                    &fake_scores,
                    GanRole::Discriminator,
                );
                let mut grads_d = tape_d.backward(d_loss);
                let d_grads = bind_dd.collect_grads(&mut grads_d);
                SampleResult {
                    g_grads,
                    d_grads,
                    parts: [
                        parts_g[0],
                        parts_g[1],
                        parts_g[2],
                        parts_g[3],
                        parts_g[4],
                        parts_g[5],
                        tape_d.value(d_loss).item(),
                    ],
                }
            })
            .collect();

        // ordered reduction keeps the update bit-exact for any thread count
        let inv_b = 1.0f32 / cfg.batch_tocg as f32;
        let mut g_acc: Vec<Option<Tensor<f32>>> = Vec::new();
        let mut d_acc: Vec<Option<Tensor<f32>>> = Vec::new();
        let mut parts = [0.0f32; 7];
        for r in results {
            g_acc = reduce_grads(g_acc, r.g_grads);
            d_acc = reduce_grads(d_acc, r.d_grads);
            for (a, p) in parts.iter_mut().zip(r.parts) {
                *a += p;
            }
        }
        for g in g_acc.iter_mut().chain(d_acc.iter_mut()).flatten() {
            g.scale_assign(inv_b);
        }
        for p in parts.iter_mut() {
            *p *= inv_b;
        }

        let row = TocgRow {
            iter,
            total: parts[0],
            ce: parts[1],
            gan: parts[2],
            l1: parts[3],
            vgg: parts[4],
            tv: parts[5],
            d: parts[6],
        };
        if !parts.iter().all(|p| p.is_finite()) {
            let comp = ["total", "ce", "gan", "l1", "vgg", "tv", "d"]
                [parts.iter().position(|p| !p.is_finite()).unwrap()];
            return Err(TrainError::NonFinite {
                iter,
                component: comp,
                snapshot: format!("{row:?}"),
            });
        }
        adam_gen.step(&mut bundle.store, &g_acc);
        adam_disc.step(&mut bundle.store, &d_acc);
        on_row(row);
        rows.push(row);
    }
    Ok(TocgTrainOutcome { rows })
}

/// The conditioning channels of the discriminator input: everything after
/// the leading segmentation block of the precomputed real stack.
fn seg_slice(real_x: &Tensor<f32>, cseg: usize, h: usize, w: usize) -> Tensor<f32> {
    let total = real_x.dims()[0];
    let n = h * w;
    let data = real_x.data()[cseg * n..total * n].to_vec();
    Tensor::from_vec(&[total - cseg, h, w], data)
}
