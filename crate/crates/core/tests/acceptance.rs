//! Acceptance suite: one test per criterion, each printing a PASS line with
//! its measured values. Training fixtures are shared across criteria
//! through lazily initialized statics so expensive runs happen once per
//! test-binary invocation.

use std::sync::OnceLock;

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use tryon_core::condgen::{occlusion_keep_mask, AblationFlags, CondGenConfig, CondGenerator};
use tryon_core::fields::{MaskField, SampleRecord};
use tryon_core::gradcheck;
use tryon_core::harness::config::RunConfig;
use tryon_core::harness::metrics::{dominant_period, ssim, tocg_log_text, TocgRow};
use tryon_core::harness::pipeline::{
    build_tocg, build_toig, calibrate_rejection, eval_paired, infer, synth_dataset,
    PreparedDataset, TocgBundle, ToigBundle,
};
use tryon_core::harness::tocg::train_tocg;
use tryon_core::harness::toig::train_toig;
use tryon_core::imagegen::SpadeNorm;
use tryon_core::losses::{
    loss_hinge, loss_l1_multiscale, loss_lsgan, loss_perceptual_multiscale, GanRole,
    IdentityExtractor, RandomConvExtractor,
};
use tryon_core::nn::{stream_rng, Adam, Binding, ParamStore};
use tryon_core::palette::LabelPalette;
use tryon_core::rejection::{build_rejection_input, d_scalar, estimate_l, p_accept};
use tryon_core::tape::Tape;
use tryon_core::tensor::{Scalar, Tensor};
use tryon_core::warp::{warp, AppearanceFlow};

fn palette() -> LabelPalette {
    LabelPalette::default_tryon()
}

/// Overwrite every trainable parameter with scaled normal noise so the
/// structural invariants are exercised at arbitrary (not just freshly
/// initialized) parameter points.
fn randomize_store<T: Scalar>(store: &mut ParamStore<T>, seed: u64, scale: f64) {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = stream_rng(seed, "randomize", 0, 0);
    for i in 0..store.len() {
        let id = tryon_core::nn::ParamId(i);
        if !store.entries()[i].trainable {
            continue;
        }
        let dims = store.get(id).dims().to_vec();
        let t = Tensor::from_fn(&dims, |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            T::from_f64(z * scale)
        });
        *store.get_mut(id) = t;
    }
}

fn random_cond_generator(seed: u64) -> (CondGenerator, ParamStore<f32>) {
    let mut store = ParamStore::new();
    let mut rng = stream_rng(seed, "accept-init", 0, 0);
    let gen = CondGenerator::new(&mut store, &mut rng, CondGenConfig::desk(7)).unwrap();
    randomize_store(&mut store, seed ^ 0xabcd, 0.08);
    (gen, store)
}

// ---------------------------------------------------------------- criterion 1

#[test]
fn criterion_01_misalignment_free_invariant() {
    let palette = palette();
    let data = tryon_core::data::synth::generate_synthetic_dataset(900, 40, (64, 48), &palette);
    let clothing = palette.clothing_channel;
    let mut checked_zero_pixels = 0usize;
    for run in 0..200u64 {
        let (gen, store) = random_cond_generator(run);
        let rec = &data[(run as usize) % data.len()];
        let out = gen.forward(&store, rec, &palette, AblationFlags::default());
        let (c, h, w) = out.seg.data.chw();
        let n = h * w;
        for p in 0..n {
            if out.raw_warped_mask.data.data()[p] == 0.0 {
                checked_zero_pixels += 1;
                let logit = out.seg_logits.data.data()[clothing * n + p];
                assert_eq!(
                    logit, 0.0,
                    "run {run}: clothing logit nonzero where warped mask is zero"
                );
                let cloth_prob = out.seg.data.data()[clothing * n + p];
                for k in 0..c {
                    if k != clothing {
                        assert!(
                            cloth_prob <= out.seg.data.data()[k * n + p],
                            "run {run}: clothing strictly dominates channel {k} at pixel {p}"
                        );
                    }
                }
            }
        }
    }
    assert!(
        checked_zero_pixels > 100_000,
        "zero-mask region too small to be meaningful ({checked_zero_pixels} pixels)"
    );
    println!(
        "PASS criterion 1: misalignment-free invariant held on {checked_zero_pixels} zero-mask pixels over 200 random parameterizations"
    );
}

// ---------------------------------------------------------------- criterion 2

#[test]
fn criterion_02_occlusion_invariant() {
    let palette = palette();
    let data = tryon_core::data::synth::generate_synthetic_dataset(901, 40, (64, 48), &palette);
    let mut body_pixels = 0usize;
    for run in 0..200u64 {
        let (gen, store) = random_cond_generator(run + 1000);
        let rec = &data[(run as usize) % data.len()];
        let out = gen.forward(&store, rec, &palette, AblationFlags::default());
        let (_, h, w) = out.seg.data.chw();
        let n = h * w;
        let keep = occlusion_keep_mask(&out.seg.data, &palette);
        for p in 0..n {
            if keep.data()[p] == 0.0 {
                body_pixels += 1;
                for ch in 0..3 {
                    assert_eq!(
                        out.warped_clothes.data.data()[ch * n + p],
                        0.0,
                        "run {run}: warped clothes support intersects a body-part pixel"
                    );
                }
                assert_eq!(out.warped_mask.data.data()[p], 0.0);
            }
        }
    }
    assert!(
        body_pixels > 1_000,
        "body-argmax region too small to be meaningful ({body_pixels} pixels)"
    );
    println!(
        "PASS criterion 2: occlusion invariant held on {body_pixels} body-part pixels over 200 random parameterizations"
    );
}

// ---------------------------------------------------------------- criterion 3

/// Independent per-pixel bilinear oracle written from the definition.
fn bilinear_oracle(x: &Tensor<f64>, flow: &Tensor<f64>) -> Tensor<f64> {
    let (c, h, w) = x.chw();
    let n = h * w;
    let mut out = Tensor::zeros(&[c, h, w]);
    for i in 0..h {
        for j in 0..w {
            let sx = j as f64 + flow.data()[i * w + j];
            let sy = i as f64 + flow.data()[n + i * w + j];
            let (x0, y0) = (sx.floor() as i64, sy.floor() as i64);
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            let at = |ch: usize, yy: i64, xx: i64| -> f64 {
                if yy < 0 || yy >= h as i64 || xx < 0 || xx >= w as i64 {
                    0.0
                } else {
                    x.data()[ch * n + yy as usize * w + xx as usize]
                }
            };
            for ch in 0..c {
                out.data_mut()[ch * n + i * w + j] = at(ch, y0, x0) * (1.0 - fx) * (1.0 - fy)
                    + at(ch, y0, x0 + 1) * fx * (1.0 - fy)
                    + at(ch, y0 + 1, x0) * (1.0 - fx) * fy
                    + at(ch, y0 + 1, x0 + 1) * fx * fy;
            }
        }
    }
    out
}

#[test]
fn criterion_03_warp_oracle_equivalence() {
    let mut rng = stream_rng(77, "warp-accept", 0, 0);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let x = Tensor::<f64>::from_fn(&[2, 8, 8], |_| rng.random_range(-1.0..1.0));
        let f = Tensor::<f64>::from_fn(&[2, 8, 8], |_| rng.random_range(-3.0..3.0));
        let got = warp(&x, &AppearanceFlow { data: f.clone() }).unwrap();
        let want = bilinear_oracle(&x, &f);
        worst = worst.max(got.max_abs_diff(&want));
    }
    assert!(worst < 1e-6, "worst deviation {worst}");
    println!("PASS criterion 3: warp matches the bilinear oracle on 1000 cases (worst |diff| = {worst:.2e})");
}

// ---------------------------------------------------------------- criterion 4

#[test]
fn criterion_04_gradient_suite() {
    let mut rng = stream_rng(4242, "grad-suite", 0, 0);

    // warp with respect to input and flow (fractional offsets keep the
    // bilinear surface smooth at the sample points)
    let x = Tensor::<f64>::from_fn(&[2, 6, 6], |_| rng.random_range(-1.0..1.0));
    let flow = Tensor::<f64>::from_fn(&[2, 6, 6], |_| {
        let base: f64 = rng.random_range(-2.0..2.0);
        let frac = base.fract().abs();
        if (0.05..=0.95).contains(&frac) {
            base
        } else {
            base + 0.3
        }
    });
    gradcheck::check(
        &[x, flow],
        |t, ids| {
            let y = t.grid_sample(ids[0], ids[1]);
            let sq = t.square(y);
            t.sum_all(sq)
        },
        1e-4,
        1e-3,
        None,
    )
    .expect("warp gradients");

    // spade_norm with respect to input and all modulation parameters
    {
        let mut store = ParamStore::<f64>::new();
        let mut srng = stream_rng(4243, "spade-grad", 0, 0);
        let sp = SpadeNorm::new(&mut store, &mut srng, "sp", 4, 3, 6);
        let x = Tensor::<f64>::from_fn(&[3, 5, 5], |_| rng.random_range(-1.0..1.0));
        let seg = Tensor::<f64>::from_fn(&[4, 5, 5], |_| rng.random_range(0.0..1.0));
        let analytic = {
            let mut tape = Tape::new();
            let mut bind = Binding::new(&store, true);
            let xn = tape.param(x.clone());
            let sn = tape.constant(seg.clone());
            let out = sp.apply(&mut tape, &mut bind, &store, xn, sn);
            let sq = tape.square(out);
            let loss = tape.sum_all(sq);
            let mut grads = tape.backward(loss);
            let gx = grads.take(xn).unwrap();
            let gp = bind.collect_grads(&mut grads);
            (gx, gp)
        };
        let eval = |store: &ParamStore<f64>, x: &Tensor<f64>| -> f64 {
            let mut tape = Tape::new();
            let mut bind = Binding::new(store, false);
            let xn = tape.constant(x.clone());
            let sn = tape.constant(seg.clone());
            let out = sp.apply(&mut tape, &mut bind, store, xn, sn);
            let sq = tape.square(out);
            let loss = tape.sum_all(sq);
            tape.value(loss).item()
        };
        let step = 1e-4;
        // input coordinates
        let mut xm = x.clone();
        for c in 0..x.numel() {
            let orig = xm.data()[c];
            xm.data_mut()[c] = orig + step;
            let fp = eval(&store, &xm);
            xm.data_mut()[c] = orig - step;
            let fm = eval(&store, &xm);
            xm.data_mut()[c] = orig;
            let num = (fp - fm) / (2.0 * step);
            let a = analytic.0.data()[c];
            let denom = 1.0f64.max(a.abs()).max(num.abs());
            assert!(
                (a - num).abs() / denom <= 1e-3,
                "spade_norm input grad mismatch at {c}: {a} vs {num}"
            );
        }
        // a sample of parameter coordinates from every tensor
        let mut store_m = store.clone();
        for (pi, g) in analytic.1.iter().enumerate() {
            let Some(g) = g else { continue };
            let n = g.numel();
            for c in [0, n / 2, n - 1] {
                let id = tryon_core::nn::ParamId(pi);
                let orig = store_m.get(id).data()[c];
                store_m.get_mut(id).data_mut()[c] = orig + step;
                let fp = eval(&store_m, &x);
                store_m.get_mut(id).data_mut()[c] = orig - step;
                let fm = eval(&store_m, &x);
                store_m.get_mut(id).data_mut()[c] = orig;
                let num = (fp - fm) / (2.0 * step);
                let a = g.data()[c];
                let denom = 1.0f64.max(a.abs()).max(num.abs());
                assert!(
                    (a - num).abs() / denom <= 1e-3,
                    "spade_norm param grad mismatch ({pi},{c}): {a} vs {num}"
                );
            }
        }
    }

    // cross entropy
    let pred = Tensor::<f64>::from_fn(&[4, 4, 4], |_| rng.random_range(0.05..1.0));
    let mut target = Tensor::<f64>::zeros(&[4, 4, 4]);
    for p in 0..16 {
        let ch = rng.random_range(0..4);
        target.data_mut()[ch * 16 + p] = 1.0;
    }
    gradcheck::check(
        &[pred],
        |t, ids| t.ce_mean(ids[0], target.clone(), 1e-8),
        1e-5,
        1e-3,
        None,
    )
    .expect("loss_ce gradients");

    // total variation away from tied neighbors
    let tv_in = Tensor::<f64>::from_fn(&[2, 5, 5], |i| (i as f64 * 0.619).sin() * 2.0);
    gradcheck::check(&[tv_in], |t, ids| t.tv_sum(ids[0]), 1e-5, 1e-3, None)
        .expect("loss_tv gradients");

    // multi-scale L1 with respect to the intermediate flows and the final mask
    let cm = Tensor::<f64>::from_fn(&[1, 16, 16], |i| if i % 5 < 2 { 1.0 } else { 0.0 });
    let sc = Tensor::<f64>::from_fn(&[1, 16, 16], |i| if (i + 2) % 5 < 2 { 1.0 } else { 0.0 });
    let flow_sizes = [(2usize, 2usize), (4, 4), (8, 8), (16, 16)];
    let mut l1_inputs: Vec<Tensor<f64>> = flow_sizes
        .iter()
        .map(|&(h, w)| Tensor::from_fn(&[2, h, w], |i| 0.37 + (i as f64 * 0.71).sin()))
        .collect();
    l1_inputs.push(Tensor::from_fn(&[1, 16, 16], |_| rng.random_range(0.0..1.0)));
    gradcheck::check(
        &l1_inputs,
        |t, ids| {
            loss_l1_multiscale(t, &ids[0..4], ids[4], &cm, &sc, &[0.25; 4], true)
        },
        1e-4,
        1e-3,
        Some(24),
    )
    .expect("loss_l1_multiscale gradients");

    // multi-scale perceptual with the identity extractor and the frozen
    // random extractor
    let cloth = Tensor::<f64>::from_fn(&[3, 16, 16], |i| ((i as f64) * 0.13).sin());
    let ic = Tensor::<f64>::from_fn(&[3, 16, 16], |i| ((i as f64) * 0.29).cos() * 0.5);
    let mut perc_inputs = l1_inputs[0..4].to_vec();
    perc_inputs.push(Tensor::from_fn(&[3, 16, 16], |_| {
        rng.random_range(-1.0..1.0)
    }));
    gradcheck::check(
        &perc_inputs,
        |t, ids| {
            loss_perceptual_multiscale(
                t,
                &IdentityExtractor,
                &ids[0..4],
                ids[4],
                &cloth,
                &ic,
                &[0.25; 4],
                true,
            )
        },
        1e-4,
        1e-3,
        Some(24),
    )
    .expect("loss_perceptual_multiscale gradients (identity extractor)");
    let ext = RandomConvExtractor::<f64>::new(55, 3);
    gradcheck::check(
        &perc_inputs,
        |t, ids| {
            loss_perceptual_multiscale(
                t,
                &ext,
                &ids[0..4],
                ids[4],
                &cloth,
                &ic,
                &[0.25; 4],
                true,
            )
        },
        1e-4,
        1e-3,
        Some(16),
    )
    .expect("loss_perceptual_multiscale gradients (random extractor)");

    // adversarial losses with scores away from hinge kinks
    let dr = Tensor::<f64>::from_fn(&[1, 4, 4], |_| rng.random_range(-0.7..0.7));
    let df = Tensor::<f64>::from_fn(&[1, 4, 4], |_| rng.random_range(-0.7..0.7));
    for role in [GanRole::Discriminator, GanRole::Generator] {
        gradcheck::check(
            &[dr.clone(), df.clone()],
            |t, ids| loss_lsgan(t, &[ids[0]], &[ids[1]], role),
            1e-5,
            1e-3,
            None,
        )
        .expect("loss_lsgan gradients");
        gradcheck::check(
            &[dr.clone(), df.clone()],
            |t, ids| loss_hinge(t, &[ids[0]], &[ids[1]], role),
            1e-5,
            1e-3,
            None,
        )
        .expect("loss_hinge gradients");
    }

    // full condition-generator composite at argmax-stable points
    composite_cond_gen_gradcheck();

    println!("PASS criterion 4: gradient suite matched finite differences (rtol 1e-3; composite 1e-2)");
}

fn composite_cond_gen_gradcheck() {
    let palette = palette();
    let mut store = ParamStore::<f64>::new();
    let mut rng = stream_rng(888, "composite", 0, 0);
    let cfg = CondGenConfig {
        resolution: (32, 32),
        widths: [4, 6, 8, 8, 8],
        seg_channels: 7,
    };
    let gen = CondGenerator::new(&mut store, &mut rng, cfg).unwrap();
    randomize_store(&mut store, 999, 0.08);
    let rec = &tryon_core::data::synth::generate_synthetic_dataset(42, 1, (32, 32), &palette)[0];
    let cloth_in: Tensor<f64> = tryon_core::condgen::stack_cloth_input(rec).cast();
    let seg_in: Tensor<f64> = tryon_core::condgen::stack_seg_input(rec).cast();
    let cloth: Tensor<f64> = rec.clothes.data.cast();
    let mask: Tensor<f64> = rec.clothes_mask.data.cast();

    let eval = |store: &ParamStore<f64>, with_grads: bool| -> (f64, Option<Vec<Option<Tensor<f64>>>>, Tensor<f64>) {
        let mut tape = Tape::<f64>::new();
        let mut bind = Binding::new(store, with_grads);
        let ci = tape.constant(cloth_in.clone());
        let si = tape.constant(seg_in.clone());
        let cl = tape.constant(cloth.clone());
        let mk = tape.constant(mask.clone());
        let nodes = gen.forward_on_tape(
            &mut tape,
            &mut bind,
            store,
            ci,
            si,
            cl,
            mk,
            &palette,
            AblationFlags::default(),
        );
        let s1 = tape.square(nodes.seg);
        let m1 = tape.mean_all(s1);
        let s2 = tape.square(nodes.warped_clothes);
        let m2 = tape.mean_all(s2);
        let s3 = tape.square(nodes.flows[4]);
        let m3 = tape.mean_all(s3);
        let t1 = tape.add(m1, m2);
        let loss = tape.add(t1, m3);
        let keep = occlusion_keep_mask(tape.value(nodes.seg), &palette);
        if with_grads {
            let mut grads = tape.backward(loss);
            let g = bind.collect_grads(&mut grads);
            (tape.value(loss).item(), Some(g), keep)
        } else {
            (tape.value(loss).item(), None, keep)
        }
    };

    let (_, grads, _) = eval(&store, true);
    let grads = grads.unwrap();
    let step = 1e-4;
    let mut checked = 0usize;
    let mut skipped = 0usize;
    let mut srng = stream_rng(5150, "composite-coords", 0, 0);
    let mut store_m = store.clone();
    // sampled subset across all parameter tensors
    for (pi, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        if srng.random::<f64>() > 0.25 {
            continue;
        }
        let n = g.numel();
        let coord = srng.random_range(0..n);
        let id = tryon_core::nn::ParamId(pi);
        let orig = store_m.get(id).data()[coord];
        store_m.get_mut(id).data_mut()[coord] = orig + step;
        let (fp, _, keep_p) = eval(&store_m, false);
        store_m.get_mut(id).data_mut()[coord] = orig - step;
        let (fm, _, keep_m) = eval(&store_m, false);
        store_m.get_mut(id).data_mut()[coord] = orig;
        // the occlusion mask is piecewise constant; only coordinates where
        // the body-part argmax is locally stable are differentiable
        if keep_p != keep_m {
            skipped += 1;
            continue;
        }
        let num = (fp - fm) / (2.0 * step);
        let a = g.data()[coord];
        let denom = 1.0f64.max(a.abs()).max(num.abs());
        assert!(
            (a - num).abs() / denom <= 1e-2,
            "composite grad mismatch param {pi} coord {coord}: {a} vs {num}"
        );
        checked += 1;
    }
    assert!(
        checked >= 20,
        "too few stable coordinates checked ({checked}, {skipped} skipped)"
    );
}

// ---------------------------------------------------------------- criterion 5

#[test]
fn criterion_05_rejection_math() {
    // analytic example values (one-ulp slack from evaluating 1-d in floats)
    let cal = estimate_l(&[0.2, 0.5, 0.8], 0.3).unwrap();
    assert!((cal.l - 4.0).abs() <= 1e-12);
    assert_eq!(p_accept(0.8, &cal), 1.0);
    assert!((p_accept(0.2, &cal) - 0.0625).abs() <= 1e-12);
    let cal1 = estimate_l(&[0.5, 0.5], 0.3).unwrap();
    assert_eq!(cal1.l, 1.0);
    assert_eq!(p_accept(0.5, &cal1), 1.0);
    let cal9 = estimate_l(&[0.9], 0.3).unwrap();
    assert!((cal9.l - 9.0).abs() <= 1e-12);

    // discrete toy oracle for the original psi-sampling acceptance rule
    let p_d = [0.4f64, 0.3, 0.2, 0.1];
    let p_g = [0.1f64, 0.2, 0.3, 0.4];
    let d: Vec<f64> = p_d
        .iter()
        .zip(&p_g)
        .map(|(&pd, &pg)| pd / (pd + pg))
        .collect();
    let cal = estimate_l(&d, 0.3).unwrap();
    let mut rng = stream_rng(314, "toy-accept", 0, 0);
    let draws = 10_000usize;
    let mut accepted = [0usize; 4];
    let mut total = 0usize;
    for _ in 0..draws {
        let u: f64 = rng.random();
        let mut x = 3;
        let mut acc = 0.0;
        for (i, &pg) in p_g.iter().enumerate() {
            acc += pg;
            if u < acc {
                x = i;
                break;
            }
        }
        let psi: f64 = rng.random();
        if psi <= p_accept(d[x], &cal) {
            accepted[x] += 1;
            total += 1;
        }
    }
    for k in 0..4 {
        let freq = accepted[k] as f64 / total as f64;
        let sigma = (p_d[k] * (1.0 - p_d[k]) / total as f64).sqrt();
        assert!(
            (freq - p_d[k]).abs() <= 3.0 * sigma,
            "bin {k}: {freq} vs {} (3-sigma {})",
            p_d[k],
            3.0 * sigma
        );
    }
    println!(
        "PASS criterion 5: rejection math exact on examples; toy sampler reproduced p_d within 3 sigma over {draws} draws ({total} accepted)"
    );
}

// ------------------------------------------------- shared training fixtures

struct FullRun {
    bundle: TocgBundle,
    rows: Vec<TocgRow>,
    cfg: RunConfig,
    data: PreparedDataset,
}

fn desk_cfg(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        iterations: 2000,
        synth_n: 256,
        ..RunConfig::default()
    }
}

fn train_tocg_run(cfg: &RunConfig) -> FullRun {
    let palette = palette();
    let mut bundle = build_tocg(&palette, cfg).expect("build tocg");
    let data = synth_dataset(cfg.seed, cfg.synth_n, cfg, &palette, cfg.occlusion_prob);
    let mut ag = Adam::new(cfg.lr_tocg, cfg.beta1, cfg.beta2, bundle.store.len());
    let mut ad = Adam::new(cfg.lr_tocg, cfg.beta1, cfg.beta2, bundle.store.len());
    let out = train_tocg(&mut bundle, &mut ag, &mut ad, &data, cfg, 0, |_| {})
        .expect("training stays finite");
    FullRun {
        bundle,
        rows: out.rows,
        cfg: cfg.clone(),
        data,
    }
}

/// The criterion-6 run: desk defaults, seed 0, 2000 iterations, n = 256.
fn full_run() -> &'static FullRun {
    static RUN: OnceLock<FullRun> = OnceLock::new();
    RUN.get_or_init(|| train_tocg_run(&desk_cfg(0)))
}

/// Same configuration with occlusion handling ablated (criterion 8).
fn no_occl_run() -> &'static FullRun {
    static RUN: OnceLock<FullRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let mut cfg = desk_cfg(0);
        cfg.ablation.no_occlusion_handling = true;
        train_tocg_run(&cfg)
    })
}

// ---------------------------------------------------------------- criterion 6

#[test]
fn criterion_06_desk_convergence() {
    let run = full_run();
    let rows = &run.rows;
    assert_eq!(rows.len(), 2000);
    let mean = |sel: &[TocgRow], f: fn(&TocgRow) -> f32| -> f64 {
        sel.iter().map(|r| f(r) as f64).sum::<f64>() / sel.len() as f64
    };
    let ce_first = mean(&rows[..100], |r| r.ce);
    let ce_last = mean(&rows[1900..], |r| r.ce);
    let l1_first = mean(&rows[..100], |r| r.l1);
    let l1_last = mean(&rows[1900..], |r| r.l1);
    assert!(
        ce_last < 0.5 * ce_first,
        "cross-entropy did not halve: first-100 mean {ce_first}, final-100 mean {ce_last}"
    );
    assert!(
        l1_last <= 0.7 * l1_first,
        "L1 term decreased less than 30%: first-100 mean {l1_first}, final-100 mean {l1_last}"
    );
    println!(
        "PASS criterion 6: desk convergence (CE {ce_first:.4} -> {ce_last:.4}, L1 {l1_first:.4} -> {l1_last:.4})"
    );
}

// --------------------------------------------------------------- criterion 10

#[test]
fn criterion_10_determinism() {
    let reference = full_run();
    let ref_log = tocg_log_text(&reference.rows);
    // repeat the same run in single-threaded deterministic mode
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .expect("single-thread pool");
    let repeat = pool.install(|| train_tocg_run(&desk_cfg(0)));
    let rep_log = tocg_log_text(&repeat.rows);
    assert_eq!(
        ref_log, rep_log,
        "metrics logs differ between runs with the same seed"
    );
    println!(
        "PASS criterion 10: repeated run is bit-identical ({} log lines)",
        reference.rows.len()
    );
}

// ---------------------------------------------------------------- criterion 7

struct AblationStudy {
    /// Mean paired SSIM per configuration: [full, no_fusion, no_align, both].
    ssim: [f64; 4],
}

fn ablation_cfg(seed: u64, flags: AblationFlags) -> RunConfig {
    RunConfig {
        seed,
        iterations: 500,
        synth_n: 96,
        ablation: flags,
        ..RunConfig::default()
    }
}

fn ablation_study() -> &'static AblationStudy {
    static STUDY: OnceLock<AblationStudy> = OnceLock::new();
    STUDY.get_or_init(|| {
        let palette = palette();
        let seeds = [11u64, 12, 13];
        let configs = [
            AblationFlags::default(),
            AblationFlags {
                no_fusion_exchange: true,
                ..Default::default()
            },
            AblationFlags {
                no_condition_align: true,
                ..Default::default()
            },
            AblationFlags {
                no_fusion_exchange: true,
                no_condition_align: true,
                ..Default::default()
            },
        ];
        let mut sums = [0.0f64; 4];
        for &seed in &seeds {
            // one image generator per seed, trained on the full model's
            // conditions, shared across that seed's ablation evaluations
            let full_cfg = ablation_cfg(seed, AblationFlags::default());
            let full = train_tocg_run(&full_cfg);
            let toig = {
                let mut toig_cfg = full_cfg.clone();
                toig_cfg.iterations = 500;
                let mut b = build_toig(&palette, &toig_cfg).expect("build toig");
                let mut ag = Adam::new(
                    toig_cfg.lr_toig_gen,
                    toig_cfg.beta1,
                    toig_cfg.beta2,
                    b.store.len(),
                );
                let mut ad = Adam::new(
                    toig_cfg.lr_toig_disc,
                    toig_cfg.beta1,
                    toig_cfg.beta2,
                    b.store.len(),
                );
                train_toig(
                    &mut b,
                    &full.bundle,
                    &mut ag,
                    &mut ad,
                    &full.data,
                    &toig_cfg,
                    0,
                    |_| {},
                )
                .expect("toig training stays finite");
                b
            };
            let test = synth_dataset(seed + 10_000, 24, &full_cfg, &palette, 0.5);
            for (ci, &flags) in configs.iter().enumerate() {
                let tocg = if ci == 0 {
                    // reuse the already trained full model
                    None
                } else {
                    Some(train_tocg_run(&ablation_cfg(seed, flags)))
                };
                let bundle = tocg.as_ref().map(|r| &r.bundle).unwrap_or(&full.bundle);
                let (mean, _) =
                    eval_paired_with(bundle, &toig, &test, flags).expect("evaluation");
                sums[ci] += mean;
            }
        }
        for s in &mut sums {
            *s /= seeds.len() as f64;
        }
        AblationStudy { ssim: sums }
    })
}

fn eval_paired_with(
    tocg: &TocgBundle,
    toig: &ToigBundle,
    data: &PreparedDataset,
    flags: AblationFlags,
) -> Result<(f64, Vec<f64>), tryon_core::harness::pipeline::PipelineError> {
    // paired evaluation but with explicit ablation flags on the TOCG
    let mut scores = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let res = infer(
            tocg,
            toig,
            &data.cond[i],
            &data.out[i],
            &data.cond[i],
            &data.out[i],
            None,
            flags,
        )?;
        scores.push(ssim(
            res.image.as_ref().expect("ungated"),
            &data.out[i].person,
        ));
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    Ok((mean, scores))
}

#[test]
fn criterion_07_ablation_ordering() {
    let study = ablation_study();
    let [full, no_fusion, no_align, both] = study.ssim;
    assert!(
        full >= no_fusion && full >= no_align,
        "full model must beat each single ablation: full {full:.4}, no_fusion {no_fusion:.4}, no_align {no_align:.4}"
    );
    assert!(
        no_fusion >= both && no_align >= both,
        "each single ablation must beat the double ablation: no_fusion {no_fusion:.4}, no_align {no_align:.4}, both {both:.4}"
    );
    println!(
        "PASS criterion 7: ablation ordering holds (full {full:.4} >= no_fusion {no_fusion:.4}, no_align {no_align:.4} >= both {both:.4}; 3-seed averages)"
    );
}

// ---------------------------------------------------------------- criterion 8

/// Relative stripe-period deviation of a model's warped clothes against
/// the true worn period, measured on a garment band adjacent to the
/// occluding arm. Rows are restricted to ground-truth clothing pixels; the
/// lag window matches the generator's stripe-cycle range.
fn squeezing_deviation(
    run: &FullRun,
    sample: &SampleRecord,
    info: &tryon_core::data::synth::SceneInfo,
) -> Option<f64> {
    let (bx0, bx1, _by0, _by1) = info.occluder_bbox?;
    let (gx0, gx1, gy0, gy1) = info.garment_bbox;
    let out = run.bundle.gen.forward(
        &run.bundle.store,
        sample,
        &run.bundle.palette,
        run.cfg.ablation,
    );
    let (h, w) = sample.person.hw();
    let n = h * w;
    let sc = sample
        .parse
        .channel_mask(run.bundle.palette.clothing_channel);
    let mut gt = sample.person.data.clone();
    for ch in 0..3 {
        for p in 0..n {
            gt.data_mut()[ch * n + p] *= sc.data.data()[p];
        }
    }
    // band of columns adjacent to the occluder, on the roomier side
    let band_w = 5usize;
    let left_room = bx0.saturating_sub(gx0);
    let right_room = gx1.saturating_sub(bx1);
    let cols: Vec<usize> = if left_room >= right_room {
        (gx0.max(bx0.saturating_sub(band_w))..bx0.max(gx0 + 1)).collect()
    } else {
        ((bx1 + 1).min(gx1)..=(bx1 + band_w).min(gx1)).collect()
    };
    if cols.is_empty() {
        return None;
    }
    // rows where at least half the band lies on ground-truth clothing
    let rows: Vec<usize> = (gy0..=gy1)
        .filter(|&y| {
            let inside = cols
                .iter()
                .filter(|&&x| sc.data.data()[y * w + x] > 0.5)
                .count();
            inside * 2 >= cols.len()
        })
        .collect();
    if rows.len() < 16 {
        return None;
    }
    let profile = |img: &Tensor<f32>| -> Vec<f64> {
        rows.iter()
            .map(|&y| {
                let mut acc = 0.0f64;
                let mut cnt = 0usize;
                for &x in &cols {
                    if sc.data.data()[y * w + x] > 0.5 {
                        let r = img.data()[y * w + x] as f64;
                        let g = img.data()[n + y * w + x] as f64;
                        let b = img.data()[2 * n + y * w + x] as f64;
                        acc += 0.299 * r + 0.587 * g + 0.114 * b;
                        cnt += 1;
                    }
                }
                acc / cnt.max(1) as f64
            })
            .collect()
    };
    // full stripe cycle: twice the band height drawn by the generator,
    // scaled by the worn affine
    let lags = 5..=((0.22 * h as f64) as usize);
    let tp = dominant_period(&profile(&gt), lags.clone())?;
    if rows.len() as f64 / tp < 1.8 {
        return None;
    }
    let ep = dominant_period(&profile(&out.warped_clothes.data), lags)?;
    Some((ep - tp).abs() / tp)
}

#[test]
fn criterion_08_pixel_squeezing_regression() {
    let with = full_run();
    let without = no_occl_run();
    let palette = palette();
    let cfg = desk_cfg(0);
    // arm-over-torso samples only
    let samples = tryon_core::data::synth::generate_synthetic_dataset_with(
        77_000,
        40,
        cfg.condition_resolution,
        &palette,
        &tryon_core::data::synth::SynthConfig {
            occlusion_prob: 1.0,
            ..Default::default()
        },
    );
    let mut dev_with = Vec::new();
    let mut dev_without = Vec::new();
    for (rec, info) in &samples {
        if dev_with.len() >= 20 {
            break;
        }
        let (Some(a), Some(b)) = (
            squeezing_deviation(with, rec, info),
            squeezing_deviation(without, rec, info),
        ) else {
            continue;
        };
        dev_with.push(a);
        dev_without.push(b);
    }
    assert!(
        dev_with.len() >= 20,
        "not enough measurable occluded samples ({})",
        dev_with.len()
    );
    let mean_with = dev_with.iter().sum::<f64>() / dev_with.len() as f64;
    let mean_without = dev_without.iter().sum::<f64>() / dev_without.len() as f64;
    assert!(
        mean_with < 0.15,
        "stripe-period deviation with occlusion handling too large: {mean_with:.4}"
    );
    assert!(
        mean_without > mean_with,
        "ablation must deviate strictly more: with {mean_with:.4} vs without {mean_without:.4}"
    );
    println!(
        "PASS criterion 8: stripe-period deviation {mean_with:.4} with occlusion handling vs {mean_without:.4} without (20 samples)"
    );
}

// ---------------------------------------------------------------- criterion 9

fn erode_mask(mask: &MaskField, rng: &mut ChaCha12Rng) -> MaskField {
    let (_, h, w) = mask.data.chw();
    let radius = rng.random_range(2..=4usize);
    let mut out = Tensor::zeros(&[1, h, w]);
    for y in 0..h {
        for x in 0..w {
            let mut m = 1.0f32;
            for dy in -(radius as isize)..=radius as isize {
                for dx in -(radius as isize)..=radius as isize {
                    let yy = y as isize + dy;
                    let xx = x as isize + dx;
                    let v = if yy < 0 || yy >= h as isize || xx < 0 || xx >= w as isize {
                        0.0
                    } else {
                        mask.data.data()[yy as usize * w + xx as usize]
                    };
                    m = m.min(v);
                }
            }
            out.data_mut()[y * w + x] = m;
        }
    }
    MaskField::new(out).expect("eroded mask")
}

fn shift_mask(mask: &MaskField, rng: &mut ChaCha12Rng) -> MaskField {
    let (_, h, w) = mask.data.chw();
    let dx = rng.random_range(6..=12i64) as isize * if rng.random::<bool>() { 1 } else { -1 };
    let dy = rng.random_range(4..=8i64) as isize * if rng.random::<bool>() { 1 } else { -1 };
    let mut out = Tensor::zeros(&[1, h, w]);
    for y in 0..h {
        for x in 0..w {
            let sy = y as isize - dy;
            let sx = x as isize - dx;
            if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                out.data_mut()[y * w + x] = mask.data.data()[sy as usize * w + sx as usize];
            }
        }
    }
    MaskField::new(out).expect("shifted mask")
}

#[test]
fn criterion_09_rejection_separation() {
    let run = full_run();
    let cal = calibrate_rejection(&run.bundle, &run.data, 0.3, run.cfg.ablation)
        .expect("calibration over the training dataset");
    let palette = palette();
    let test = synth_dataset(50_000, 100, &run.cfg, &palette, 0.5);
    let mut lower = 0usize;
    for i in 0..100 {
        let clean = &test.cond[i];
        let mut rng = stream_rng(600, "corrupt", i as u64, 0);
        let corrupted_mask = if rng.random::<bool>() {
            erode_mask(&clean.clothes_mask, &mut rng)
        } else {
            shift_mask(&clean.clothes_mask, &mut rng)
        };
        let mut corrupted = clean.clone();
        corrupted.clothes_mask = corrupted_mask;

        let p_of = |rec: &SampleRecord| -> f64 {
            let out = run
                .bundle
                .gen
                .forward(&run.bundle.store, rec, &run.bundle.palette, run.cfg.ablation);
            let x = build_rejection_input(
                &out.seg,
                &rec.pose,
                &rec.agnostic_parse,
                &rec.clothes,
                &rec.clothes_mask,
            )
            .expect("shapes agree");
            let d = d_scalar(&run.bundle.disc, &run.bundle.store, &x);
            p_accept(d, &cal)
        };
        if p_of(&corrupted) < p_of(clean) {
            lower += 1;
        }
    }
    assert!(
        lower >= 90,
        "corrupted inputs scored lower in only {lower} of 100 pairs"
    );
    println!("PASS criterion 9: corrupted clothing masks scored lower p_accept in {lower} / 100 pairs");
}

// ------------------------------------------------------- paired-SSIM example

/// Paired reconstruction quality of the fully trained two-stage pipeline
/// (frozen threshold from the first oracle run of this artifact).
#[test]
fn paired_ssim_after_desk_training() {
    let run = full_run();
    let palette = palette();
    let toig = {
        static TOIG: OnceLock<ToigBundle> = OnceLock::new();
        TOIG.get_or_init(|| {
            let cfg = run.cfg.clone();
            let mut b = build_toig(&palette, &cfg).expect("build toig");
            let mut ag = Adam::new(cfg.lr_toig_gen, cfg.beta1, cfg.beta2, b.store.len());
            let mut ad = Adam::new(cfg.lr_toig_disc, cfg.beta1, cfg.beta2, b.store.len());
            train_toig(
                &mut b,
                &run.bundle,
                &mut ag,
                &mut ad,
                &run.data,
                &cfg,
                0,
                |_| {},
            )
            .expect("toig training stays finite");
            b
        })
    };
    let test = synth_dataset(60_000, 24, &run.cfg, &palette, 0.5);
    let (mean, _) = eval_paired(&run.bundle, toig, &test, AblationFlags::default())
        .expect("paired evaluation");
    assert!(
        mean >= 0.75,
        "paired SSIM {mean:.4} below the frozen 0.75 threshold"
    );
    println!("PASS paired-SSIM example: test-split mean SSIM = {mean:.4} (threshold 0.75)");
}
