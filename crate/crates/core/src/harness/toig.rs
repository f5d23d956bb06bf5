//! Image-generator training: hinge adversarial loss, perceptual loss, and
//! discriminator feature matching over conditions produced by a frozen
//! condition generator.

use rand::Rng;
use rayon::prelude::*;

use crate::harness::config::RunConfig;
use crate::harness::metrics::ToigRow;
use crate::harness::pipeline::{produce_conditions, PreparedDataset, TocgBundle, ToigBundle};
use crate::harness::tocg::TrainError;
use crate::losses::{
    loss_feature_matching, loss_hinge, phi_distance_to_targets, GanRole, RandomConvExtractor,
};
use crate::nn::{reduce_grads, stream_rng, Adam, Binding};
use crate::tape::Tape;
use crate::tensor::Tensor;

struct Prepared {
    cond_stack: Tensor<f32>,
    seg_up: Tensor<f32>,
    person: Tensor<f32>,
    phi_targets: Vec<Tensor<f32>>,
}

pub struct ToigTrainOutcome {
    pub rows: Vec<ToigRow>,
}

/// Train the image generator against conditions from the frozen condition
/// generator; deterministic under any thread count.
#[allow(clippy::too_many_arguments)]
pub fn train_toig(
    bundle: &mut ToigBundle,
    tocg: &TocgBundle,
    adam_gen: &mut Adam,
    adam_disc: &mut Adam,
    data: &PreparedDataset,
    cfg: &RunConfig,
    start_iter: u64,
    mut on_row: impl FnMut(ToigRow),
) -> Result<ToigTrainOutcome, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let extractor = RandomConvExtractor::<f32>::new(cfg.seed ^ 0x0be5_7fea, 3);
    // conditions are produced once; the condition generator stays frozen
    let prepared: Vec<Prepared> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let cond_out = tocg.gen.forward(
                &tocg.store,
                &data.cond[i],
                &tocg.palette,
                cfg.ablation,
            );
            let conds = produce_conditions(tocg, &cond_out, &data.out[i], cfg.ablation);
            let person = data.out[i].person.data.clone();
            let phi_targets = extractor.features_const(&person);
            Prepared {
                cond_stack: conds.cond_stack,
                seg_up: conds.seg_up.data,
                person,
                phi_targets,
            }
        })
        .collect();

    let mut rows = Vec::new();
    for iter in start_iter..cfg.iterations {
        bundle.disc.power_iterate_all(&mut bundle.store);
        let mut batch_rng = stream_rng(cfg.seed, "batch-toig", iter, 0);
        let batch: Vec<usize> = (0..cfg.batch_toig)
            .map(|_| batch_rng.random_range(0..prepared.len()))
            .collect();

        let store = &bundle.store;
        let gen = &bundle.gen;
        let disc = &bundle.disc;
        let weights = &cfg.weights;

        struct SampleResult {
            g_grads: Vec<Option<Tensor<f32>>>,
            d_grads: Vec<Option<Tensor<f32>>>,
            parts: [f32; 5], // total, adv, vgg, fm, d
        }

        let results: Vec<SampleResult> = batch
            .par_iter()
            .map(|&idx| {
                let ps = &prepared[idx];
                // generator pass
                let mut tape = Tape::<f32>::new();
                let mut bind_g = Binding::new(store, true);
                let mut bind_d = Binding::new(store, false);
                let cond = tape.constant(ps.cond_stack.clone());
                let seg = tape.constant(ps.seg_up.clone());
                let img = gen.forward_on_tape(&mut tape, &mut bind_g, store, cond, seg);
                let fake_in = tape.concat(&[seg, cond, img]);
                let (fake_scores, fake_feats) =
                    disc.discriminate(&mut tape, &mut bind_d, store, fake_in, None);
                let adv = loss_hinge(&mut tape, &[], &fake_scores, GanRole::Generator);
                // real features for matching, detached
                let person = tape.constant(ps.person.clone());
                let real_in = tape.concat(&[seg, cond, person]);
                let (_, real_feat_nodes) =
                    disc.discriminate(&mut tape, &mut bind_d, store, real_in, None);
                let real_feats: Vec<Vec<Tensor<f32>>> = real_feat_nodes
                    .iter()
                    .map(|layer| layer.iter().map(|&n| tape.value(n).clone()).collect())
                    .collect();
                let fm = loss_feature_matching(&mut tape, &real_feats, &fake_feats);
                let vgg = phi_distance_to_targets(&mut tape, &extractor, img, &ps.phi_targets);
                let vgg_s = tape.scale(vgg, weights.lambda_vgg_toig);
                let fm_s = tape.scale(fm, weights.lambda_fm_toig);
                let t1 = tape.add(adv, vgg_s);
                let total = tape.add(t1, fm_s);
                let mut grads = tape.backward(total);
                let g_grads = bind_g.collect_grads(&mut grads);
                let parts_g = [
                    tape.value(total).item(),
                    tape.value(adv).item(),
                    tape.value(vgg).item(),
                    tape.value(fm).item(),
                ];
                let fake_img = tape.value(img).clone();

                // discriminator pass
                let mut tape_d = Tape::<f32>::new();
                let mut bind_dd = Binding::new(store, true);
                let seg_d = tape_d.constant(ps.seg_up.clone());
                let cond_d = tape_d.constant(ps.cond_stack.clone());
                let person_d = tape_d.constant(ps.person.clone());
                let fake_d = tape_d.constant(fake_img);
                let real_in = tape_d.concat(&[seg_d, cond_d, person_d]);
                let fake_in = tape_d.concat(&[seg_d, cond_d, fake_d]);
                let (real_scores, _) =
                    disc.discriminate(&mut tape_d, &mut bind_dd, store, real_in, None);
                let (fake_scores, _) =
                    disc.discriminate(&mut tape_d, &mut bind_dd, store, fake_in, None);
                let d_loss = loss_hinge(
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
                        tape_d.value(d_loss).item(),
                    ],
                }
            })
            .collect();

        let inv_b = 1.0f32 / cfg.batch_toig as f32;
        let mut g_acc: Vec<Option<Tensor<f32>>> = Vec::new();
        let mut d_acc: Vec<Option<Tensor<f32>>> = Vec::new();
        let mut parts = [0.0f32; 5];
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
        let row = ToigRow {
            iter,
            total: parts[0],
            adv: parts[1],
            vgg: parts[2],
            fm: parts[3],
            d: parts[4],
        };
        if !parts.iter().all(|p| p.is_finite()) {
            let comp = ["total", "adv", "vgg", "fm", "d"]
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
    Ok(ToigTrainOutcome { rows })
}
