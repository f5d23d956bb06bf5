//! Training objectives for both stages: pixel-wise cross-entropy, the
//! multi-scale L1 and perceptual warping losses, total variation, LSGAN and
//! hinge adversarial losses, and discriminator feature matching.

use serde::{Deserialize, Serialize};

use crate::kernels;
use crate::nn::{Conv2d, Init, ParamStore};
use crate::tape::{NodeId, Tape};
use crate::tensor::{Scalar, Tensor};

/// Loss weights; every field is overridable from the run config.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_ce: f64,
    pub lambda_l1: f64,
    pub lambda_vgg: f64,
    pub lambda_tv: f64,
    /// Relative importance of the four intermediate flow scales.
    pub w: [f64; 4],
    pub lambda_vgg_toig: f64,
    pub lambda_fm_toig: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ce: 10.0,
            lambda_l1: 10.0,
            lambda_vgg: 1.0,
            lambda_tv: 2.0,
            w: [0.25; 4],
            lambda_vgg_toig: 10.0,
            lambda_fm_toig: 10.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GanRole {
    Discriminator,
    Generator,
}

/// Pixel-wise cross-entropy between a soft prediction and a one-hot target,
/// averaged over pixels: `mean_px(-sum_k t[k] ln(p[k] + 1e-8))`.
pub fn loss_ce<T: Scalar>(tape: &mut Tape<T>, pred: NodeId, target: Tensor<T>) -> NodeId {
    tape.ce_mean(pred, target, 1e-8)
}

/// Mean absolute error between two nodes.
pub fn l1_mean<T: Scalar>(tape: &mut Tape<T>, a: NodeId, b: NodeId) -> NodeId {
    let d = tape.sub(a, b);
    let ad = tape.abs(d);
    tape.mean_all(ad)
}

/// Bicubic downsample of a constant grid, clamped to keep mask semantics.
fn downsample_clamped<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize, lo: f64, hi: f64) -> Tensor<T> {
    let (c, h, w) = x.chw();
    if (h, w) == (oh, ow) {
        return x.clone();
    }
    let data = kernels::bicubic_resize(x.data(), c, h, w, oh, ow);
    let (lo, hi) = (T::from_f64(lo), T::from_f64(hi));
    Tensor::from_vec(
        &[c, oh, ow],
        data.into_iter().map(|v| v.maxv(lo).minv(hi)).collect(),
    )
}

/// Multi-scale L1 loss: each intermediate flow warps the clothing mask
/// (downsampled to that flow's native scale) toward the downsampled
/// ground-truth clothing region; the finest term compares the occlusion-
/// handled warped mask at full scale.
///
/// `flows` are the four intermediate flows (coarse to fine). With
/// `multiscale` off only the finest term remains.
#[allow(clippy::too_many_arguments)]
pub fn loss_l1_multiscale<T: Scalar>(
    tape: &mut Tape<T>,
    flows: &[NodeId],
    warped_mask_final: NodeId,
    cloth_mask: &Tensor<T>,
    gt_cloth_region: &Tensor<T>,
    w: &[f64; 4],
    multiscale: bool,
) -> NodeId {
    let s_c_full = tape.constant(gt_cloth_region.clone());
    let mut total = l1_mean(tape, warped_mask_final, s_c_full);
    if multiscale {
        assert_eq!(flows.len(), 4, "expected the four intermediate flows");
        for (i, &flow) in flows.iter().enumerate() {
            let (_, fh, fw) = tape.value(flow).chw();
            let cm = downsample_clamped(cloth_mask, fh, fw, 0.0, 1.0);
            let sc = downsample_clamped(gt_cloth_region, fh, fw, 0.0, 1.0);
            let cm = tape.constant(cm);
            let sc = tape.constant(sc);
            let warped = tape.grid_sample(cm, flow);
            let term = l1_mean(tape, warped, sc);
            let scaled = tape.scale(term, w[i]);
            total = tape.add(total, scaled);
        }
    }
    total
}

/// Pluggable frozen feature extractor for the perceptual distance.
pub trait FeatureExtractor<T: Scalar> {
    fn features(&self, tape: &mut Tape<T>, x: NodeId) -> Vec<NodeId>;
}

/// Identity extractor: reduces the perceptual distance to plain L1.
pub struct IdentityExtractor;

impl<T: Scalar> FeatureExtractor<T> for IdentityExtractor {
    fn features(&self, _tape: &mut Tape<T>, x: NodeId) -> Vec<NodeId> {
        vec![x]
    }
}

/// Seed-deterministic frozen 3-layer strided conv stack; a random-feature
/// perceptual distance standing in for a pretrained backbone.
pub struct RandomConvExtractor<T: Scalar> {
    store: ParamStore<T>,
    convs: Vec<Conv2d>,
}

impl<T: Scalar> RandomConvExtractor<T> {
    pub fn new(seed: u64, in_channels: usize) -> Self {
        let mut store = ParamStore::new();
        let mut rng = crate::nn::stream_rng(seed, "perceptual-extractor", 0, 0);
        let widths = [8usize, 16, 32];
        let mut convs = Vec::new();
        let mut prev = in_channels;
        for (i, &wd) in widths.iter().enumerate() {
            convs.push(Conv2d::new(
                &mut store,
                &mut rng,
                &format!("phi.conv{i}"),
                prev,
                wd,
                3,
                2,
                1,
                Init::HeNormal,
            ));
            prev = wd;
        }
        Self { store, convs }
    }

    /// Feature tensors for a constant input, for caching targets.
    pub fn features_const(&self, x: &Tensor<T>) -> Vec<Tensor<T>> {
        let mut tape = Tape::new();
        let xi = tape.constant(x.clone());
        let feats = self.features(&mut tape, xi);
        feats.into_iter().map(|f| tape.value(f).clone()).collect()
    }
}

impl<T: Scalar> FeatureExtractor<T> for RandomConvExtractor<T> {
    fn features(&self, tape: &mut Tape<T>, x: NodeId) -> Vec<NodeId> {
        let mut bind = crate::nn::Binding::new(&self.store, false);
        let mut feats = Vec::new();
        let mut cur = x;
        for conv in &self.convs {
            cur = conv.apply(tape, &mut bind, &self.store, cur);
            cur = tape.leaky_relu(cur, 0.2);
            feats.push(cur);
        }
        feats
    }
}

/// Sum over layers of mean absolute feature differences.
pub fn phi_distance<T: Scalar, E: FeatureExtractor<T>>(
    tape: &mut Tape<T>,
    extractor: &E,
    a: NodeId,
    b: NodeId,
) -> NodeId {
    let fa = extractor.features(tape, a);
    let fb = extractor.features(tape, b);
    assert_eq!(fa.len(), fb.len());
    let mut total: Option<NodeId> = None;
    for (x, y) in fa.into_iter().zip(fb) {
        let term = l1_mean(tape, x, y);
        total = Some(match total {
            Some(t) => tape.add(t, term),
            None => term,
        });
    }
    total.expect("extractor produced no layers")
}

/// Same distance against precomputed target features (targets detached).
pub fn phi_distance_to_targets<T: Scalar, E: FeatureExtractor<T>>(
    tape: &mut Tape<T>,
    extractor: &E,
    a: NodeId,
    targets: &[Tensor<T>],
) -> NodeId {
    let fa = extractor.features(tape, a);
    assert_eq!(fa.len(), targets.len());
    let mut total: Option<NodeId> = None;
    for (x, t) in fa.into_iter().zip(targets) {
        let tc = tape.constant(t.clone());
        let term = l1_mean(tape, x, tc);
        total = Some(match total {
            Some(acc) => tape.add(acc, term),
            None => term,
        });
    }
    total.expect("extractor produced no layers")
}

/// Multi-scale perceptual loss: intermediate flows warp the (downsampled)
/// product clothes toward the ground-truth worn clothing region, plus the
/// finest occlusion-handled term.
#[allow(clippy::too_many_arguments)]
pub fn loss_perceptual_multiscale<T: Scalar, E: FeatureExtractor<T>>(
    tape: &mut Tape<T>,
    extractor: &E,
    flows: &[NodeId],
    warped_clothes_final: NodeId,
    cloth: &Tensor<T>,
    gt_clothes_region: &Tensor<T>,
    w: &[f64; 4],
    multiscale: bool,
) -> NodeId {
    let ic_full = tape.constant(gt_clothes_region.clone());
    let mut total = phi_distance(tape, extractor, warped_clothes_final, ic_full);
    if multiscale {
        assert_eq!(flows.len(), 4);
        for (i, &flow) in flows.iter().enumerate() {
            let (_, fh, fw) = tape.value(flow).chw();
            let c_dn = downsample_clamped(cloth, fh, fw, -1.0, 1.0);
            let ic_dn = downsample_clamped(gt_clothes_region, fh, fw, -1.0, 1.0);
            let c_dn = tape.constant(c_dn);
            let ic_dn = tape.constant(ic_dn);
            let warped = tape.grid_sample(c_dn, flow);
            let term = phi_distance(tape, extractor, warped, ic_dn);
            let scaled = tape.scale(term, w[i]);
            total = tape.add(total, scaled);
        }
    }
    total
}

/// Least-squares GAN loss over per-scale patch score maps.
pub fn loss_lsgan<T: Scalar>(
    tape: &mut Tape<T>,
    d_real: &[NodeId],
    d_fake: &[NodeId],
    role: GanRole,
) -> NodeId {
    let mean_sq_dist = |tape: &mut Tape<T>, scores: &[NodeId], target: f64| -> NodeId {
        let mut acc: Option<NodeId> = None;
        for &s in scores {
            let shifted = tape.add_const(s, -target);
            let sq = tape.square(shifted);
            let m = tape.mean_all(sq);
            acc = Some(match acc {
                Some(a) => tape.add(a, m),
                None => m,
            });
        }
        let total = acc.expect("no score maps");
        tape.scale(total, 1.0 / scores.len() as f64)
    };
    match role {
        GanRole::Discriminator => {
            let real_term = mean_sq_dist(tape, d_real, 1.0);
            let fake_term = mean_sq_dist(tape, d_fake, 0.0);
            tape.add(real_term, fake_term)
        }
        GanRole::Generator => mean_sq_dist(tape, d_fake, 1.0),
    }
}

/// Hinge GAN loss over per-scale patch score maps.
pub fn loss_hinge<T: Scalar>(
    tape: &mut Tape<T>,
    d_real: &[NodeId],
    d_fake: &[NodeId],
    role: GanRole,
) -> NodeId {
    let mean_over_scales = |tape: &mut Tape<T>, terms: Vec<NodeId>| -> NodeId {
        let n = terms.len();
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = tape.add(acc, t);
        }
        tape.scale(acc, 1.0 / n as f64)
    };
    match role {
        GanRole::Discriminator => {
            // mean(relu(1 - d_real)) + mean(relu(1 + d_fake))
            let real_terms: Vec<NodeId> = d_real
                .iter()
                .map(|&d| {
                    let neg = tape.scale(d, -1.0);
                    let sh = tape.add_const(neg, 1.0);
                    let r = tape.relu(sh);
                    tape.mean_all(r)
                })
                .collect();
            let fake_terms: Vec<NodeId> = d_fake
                .iter()
                .map(|&d| {
                    let sh = tape.add_const(d, 1.0);
                    let r = tape.relu(sh);
                    tape.mean_all(r)
                })
                .collect();
            let rt = mean_over_scales(tape, real_terms);
            let ft = mean_over_scales(tape, fake_terms);
            tape.add(rt, ft)
        }
        GanRole::Generator => {
            let terms: Vec<NodeId> = d_fake
                .iter()
                .map(|&d| {
                    let m = tape.mean_all(d);
                    tape.scale(m, -1.0)
                })
                .collect();
            mean_over_scales(tape, terms)
        }
    }
}

/// Feature matching: summed mean-abs differences between discriminator
/// features on real and fake, over layers and scales. Real features enter
/// as detached constants.
pub fn loss_feature_matching<T: Scalar>(
    tape: &mut Tape<T>,
    real_feats: &[Vec<Tensor<T>>],
    fake_feats: &[Vec<NodeId>],
) -> NodeId {
    assert_eq!(real_feats.len(), fake_feats.len(), "scale count mismatch");
    let mut total: Option<NodeId> = None;
    for (scale_real, scale_fake) in real_feats.iter().zip(fake_feats) {
        assert_eq!(scale_real.len(), scale_fake.len(), "layer count mismatch");
        for (r, &f) in scale_real.iter().zip(scale_fake) {
            let rc = tape.constant(r.clone());
            let term = l1_mean(tape, f, rc);
            total = Some(match total {
                Some(t) => tape.add(t, term),
                None => term,
            });
        }
    }
    total.expect("no features")
}

/// Condition-generator objective: `l_ce*CE + cGAN + l_l1*L1 + l_vgg*VGG + l_tv*TV`.
pub fn loss_tocg_total<T: Scalar>(
    tape: &mut Tape<T>,
    ce: NodeId,
    gan: NodeId,
    l1: NodeId,
    vgg: NodeId,
    tv: NodeId,
    w: &LossWeights,
) -> NodeId {
    let ce = tape.scale(ce, w.lambda_ce);
    let l1 = tape.scale(l1, w.lambda_l1);
    let vgg = tape.scale(vgg, w.lambda_vgg);
    let tv = tape.scale(tv, w.lambda_tv);
    let a = tape.add(ce, gan);
    let b = tape.add(a, l1);
    let c = tape.add(b, vgg);
    tape.add(c, tv)
}

/// Scalar form of the total for logs and tests.
pub fn tocg_total_value(ce: f64, gan: f64, l1: f64, vgg: f64, tv: f64, w: &LossWeights) -> f64 {
    w.lambda_ce * ce + gan + w.lambda_l1 * l1 + w.lambda_vgg * vgg + w.lambda_tv * tv
}

/// Number of forward-difference terms in the TV sum of a `[c,h,w]` grid;
/// the trainer divides the TV sum by this so the smoothness weight is
/// resolution independent.
pub fn tv_diff_count(c: usize, h: usize, w: usize) -> usize {
    c * (h * (w - 1) + (h - 1) * w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::nn::stream_rng;
    use rand::Rng;

    fn scalar_of<T: Scalar>(tape: &Tape<T>, id: NodeId) -> f64 {
        tape.value(id).item().to_f64()
    }

    #[test]
    fn ce_examples() {
        let mut tape = Tape::<f64>::new();
        // identical one-hot prediction: ce ~ 0
        let mut t = Tensor::zeros(&[7, 2, 2]);
        for p in 0..4 {
            t.data_mut()[(p % 7) * 4 + p] = 1.0;
        }
        let pred = tape.constant(t.clone());
        let ce = loss_ce(&mut tape, pred, t.clone());
        assert!(scalar_of(&tape, ce) <= 1e-7);
        // uniform prediction over 7 channels: ln 7
        let uni = Tensor::full(&[7, 2, 2], 1.0 / 7.0);
        let pred = tape.constant(uni);
        let ce = loss_ce(&mut tape, pred, t);
        assert!((scalar_of(&tape, ce) - 7.0f64.ln()).abs() < 1e-4);
    }

    #[test]
    fn ce_mean_is_size_invariant() {
        let mut tape = Tape::<f64>::new();
        let mk = |h: usize, w: usize| {
            let mut t = Tensor::zeros(&[3, h, w]);
            for p in 0..h * w {
                t.data_mut()[p] = 1.0; // all channel 0
            }
            let mut p = Tensor::full(&[3, h, w], 0.2);
            for i in 0..h * w {
                p.data_mut()[i] = 0.6;
            }
            (p, t)
        };
        let (p1, t1) = mk(2, 2);
        let (p2, t2) = mk(4, 4);
        let a = tape.constant(p1);
        let ca = loss_ce(&mut tape, a, t1);
        let b = tape.constant(p2);
        let cb = loss_ce(&mut tape, b, t2);
        assert!((scalar_of(&tape, ca) - scalar_of(&tape, cb)).abs() < 1e-12);
    }

    #[test]
    fn ce_decreases_toward_target() {
        let mut rng = stream_rng(3, "ce-dir", 0, 0);
        let (c, h, w) = (4usize, 3usize, 3usize);
        let mut target = Tensor::<f64>::zeros(&[c, h, w]);
        for p in 0..h * w {
            let ch = rng.random_range(0..c);
            target.data_mut()[ch * h * w + p] = 1.0;
        }
        // random soft start
        let mut soft = Tensor::<f64>::from_fn(&[c, h, w], |_| rng.random_range(0.1..1.0));
        for p in 0..h * w {
            let mut s = 0.0;
            for ch in 0..c {
                s += soft.data()[ch * h * w + p];
            }
            for ch in 0..c {
                soft.data_mut()[ch * h * w + p] /= s;
            }
        }
        let eval = |x: &Tensor<f64>| {
            let mut tape = Tape::new();
            let p = tape.constant(x.clone());
            let l = loss_ce(&mut tape, p, target.clone());
            scalar_of(&tape, l)
        };
        let base = eval(&soft);
        for step in [0.1, 0.3, 0.7] {
            let towards = Tensor::from_vec(
                soft.dims(),
                soft.data()
                    .iter()
                    .zip(target.data())
                    .map(|(&s, &t)| s + step * (t - s))
                    .collect(),
            );
            assert!(eval(&towards) < base, "ce must decrease along the simplex");
        }
    }

    #[test]
    fn l1_multiscale_examples() {
        let mut tape = Tape::<f64>::new();
        let (h, w) = (8, 8);
        let mask = Tensor::<f64>::from_fn(&[1, h, w], |i| if i % 3 == 0 { 1.0 } else { 0.0 });
        // zero flows at exactly the mask's own scale make every intermediate
        // term |mask - mask| = 0
        let flows: Vec<NodeId> = (0..4)
            .map(|_| tape.constant(Tensor::zeros(&[2, h, w])))
            .collect();
        let final_mask = tape.constant(mask.clone());
        let total = loss_l1_multiscale(
            &mut tape,
            &flows,
            final_mask,
            &mask,
            &mask,
            &[0.25; 4],
            true,
        );
        assert_eq!(scalar_of(&tape, total), 0.0);

        // one differing pixel out of N in the final term only
        let mut off = mask.clone();
        off.data_mut()[0] += 1.0;
        let off_node = tape.constant(off);
        let total = loss_l1_multiscale(
            &mut tape,
            &flows,
            off_node,
            &mask,
            &mask,
            &[0.25; 4],
            false,
        );
        assert!((scalar_of(&tape, total) - 1.0 / (h * w) as f64).abs() < 1e-12);
    }

    #[test]
    fn l1_multiscale_weights_scale_intermediate_terms() {
        let mut rng = stream_rng(8, "l1w", 0, 0);
        let (h, w) = (16, 16);
        let mask = Tensor::<f64>::from_fn(&[1, h, w], |_| {
            if rng.random::<f64>() < 0.3 {
                1.0
            } else {
                0.0
            }
        });
        let gt = Tensor::<f64>::from_fn(&[1, h, w], |_| {
            if rng.random::<f64>() < 0.3 {
                1.0
            } else {
                0.0
            }
        });
        let run = |wts: [f64; 4]| {
            let mut tape = Tape::<f64>::new();
            let flows: Vec<NodeId> = [2usize, 4, 8, 16]
                .iter()
                .map(|&s| {
                    tape.constant(Tensor::from_fn(&[2, s, s], |i| ((i % 5) as f64 - 2.0) * 0.3))
                })
                .collect();
            let fm = tape.constant(gt.clone());
            let t = loss_l1_multiscale(&mut tape, &flows, fm, &mask, &gt, &wts, true);
            scalar_of(&tape, t)
        };
        let base = run([0.25; 4]);
        let scaled = run([0.5; 4]);
        // final term is 0 (fm == gt), so doubling w doubles the whole sum
        assert!((scaled - 2.0 * base).abs() < 1e-9);
    }

    #[test]
    fn perceptual_identity_extractor_reduces_to_l1() {
        let mut rng = stream_rng(9, "perc", 0, 0);
        let (h, w) = (8, 8);
        let a = Tensor::<f64>::from_fn(&[3, h, w], |_| rng.random_range(-1.0..1.0));
        let b = Tensor::<f64>::from_fn(&[3, h, w], |_| rng.random_range(-1.0..1.0));
        let mut tape = Tape::<f64>::new();
        let an = tape.constant(a.clone());
        let bn = tape.constant(b.clone());
        let phi = phi_distance(&mut tape, &IdentityExtractor, an, bn);
        let l1 = l1_mean(&mut tape, an, bn);
        assert_eq!(scalar_of(&tape, phi), scalar_of(&tape, l1));
        // identical inputs at every scale give zero
        let same = phi_distance(&mut tape, &IdentityExtractor, an, an);
        assert_eq!(scalar_of(&tape, same), 0.0);
    }

    #[test]
    fn perceptual_random_extractor_is_deterministic_and_zero_on_equal() {
        let ext = RandomConvExtractor::<f64>::new(77, 3);
        let x = Tensor::<f64>::from_fn(&[3, 16, 16], |i| (i as f64 * 0.05).sin());
        let f1 = ext.features_const(&x);
        let f2 = ext.features_const(&x);
        for (a, b) in f1.iter().zip(&f2) {
            assert_eq!(a, b);
        }
        let mut tape = Tape::<f64>::new();
        let xn = tape.constant(x);
        let d = phi_distance(&mut tape, &ext, xn, xn);
        assert_eq!(scalar_of(&tape, d), 0.0);
    }

    #[test]
    fn lsgan_examples() {
        let mut tape = Tape::<f64>::new();
        let ones = tape.constant(Tensor::full(&[1, 2, 2], 1.0));
        let zeros = tape.constant(Tensor::zeros(&[1, 2, 2]));
        let halves = tape.constant(Tensor::full(&[1, 2, 2], 0.5));
        let d0 = loss_lsgan(&mut tape, &[ones], &[zeros], GanRole::Discriminator);
        assert_eq!(scalar_of(&tape, d0), 0.0);
        let g0 = loss_lsgan(&mut tape, &[zeros], &[ones], GanRole::Generator);
        assert_eq!(scalar_of(&tape, g0), 0.0);
        let dh = loss_lsgan(&mut tape, &[halves], &[halves], GanRole::Discriminator);
        assert!((scalar_of(&tape, dh) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn hinge_examples() {
        let mut tape = Tape::<f64>::new();
        let twos = tape.constant(Tensor::full(&[1, 2, 2], 2.0));
        let neg_twos = tape.constant(Tensor::full(&[1, 2, 2], -2.0));
        let zeros = tape.constant(Tensor::zeros(&[1, 2, 2]));
        let threes = tape.constant(Tensor::full(&[1, 2, 2], 3.0));
        let d0 = loss_hinge(&mut tape, &[twos], &[neg_twos], GanRole::Discriminator);
        assert_eq!(scalar_of(&tape, d0), 0.0);
        let d2 = loss_hinge(&mut tape, &[zeros], &[zeros], GanRole::Discriminator);
        assert_eq!(scalar_of(&tape, d2), 2.0);
        let g = loss_hinge(&mut tape, &[zeros], &[threes], GanRole::Generator);
        assert_eq!(scalar_of(&tape, g), -3.0);
    }

    #[test]
    fn feature_matching_examples() {
        let mut tape = Tape::<f64>::new();
        let a = Tensor::<f64>::from_fn(&[2, 2, 2], |i| i as f64);
        let an = tape.constant(a.clone());
        // identical features: zero
        let fm = loss_feature_matching(&mut tape, &[vec![a.clone()]], &[vec![an]]);
        assert_eq!(scalar_of(&tape, fm), 0.0);
        // single scalar features 3 vs 1 -> 2
        let three = Tensor::<f64>::scalar(3.0);
        let one = tape.constant(Tensor::<f64>::scalar(1.0));
        let fm = loss_feature_matching(&mut tape, &[vec![three.clone()]], &[vec![one]]);
        assert_eq!(scalar_of(&tape, fm), 2.0);
        // adding an equal-feature layer changes nothing
        let fm2 = loss_feature_matching(
            &mut tape,
            &[vec![three, a.clone()]],
            &[vec![one, an]],
        );
        assert_eq!(scalar_of(&tape, fm2), 2.0);
    }

    #[test]
    fn tocg_total_arithmetic() {
        let w = LossWeights::default();
        assert_eq!(tocg_total_value(0.0, 0.0, 0.0, 0.0, 0.0, &w), 0.0);
        assert_eq!(tocg_total_value(1.0, 1.0, 1.0, 1.0, 1.0, &w), 24.0);
        let only_tv = LossWeights {
            lambda_ce: 0.0,
            lambda_l1: 0.0,
            lambda_vgg: 0.0,
            ..Default::default()
        };
        let tv = 0.37;
        assert_eq!(
            tocg_total_value(5.0, 0.0, 5.0, 5.0, tv, &only_tv),
            only_tv.lambda_tv * tv
        );
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = stream_rng(21, "loss-grad", 0, 0);
        // cross entropy wrt the soft prediction (kept strictly positive)
        let pred = Tensor::<f64>::from_fn(&[3, 3, 3], |_| rng.random_range(0.05..1.0));
        let mut target = Tensor::<f64>::zeros(&[3, 3, 3]);
        for p in 0..9 {
            let ch = rng.random_range(0..3);
            target.data_mut()[ch * 9 + p] = 1.0;
        }
        gradcheck::check(
            &[pred],
            |tape, ids| loss_ce(tape, ids[0], target.clone()),
            1e-5,
            1e-3,
            None,
        )
        .unwrap();

        // lsgan and hinge wrt scores (offsets keep hinge away from kinks)
        let scores = Tensor::<f64>::from_fn(&[1, 3, 3], |_| rng.random_range(-0.8..0.8));
        gradcheck::check(
            &[scores.clone(), scores.map(|v| v + 0.11)],
            |tape, ids| loss_lsgan(tape, &[ids[0]], &[ids[1]], GanRole::Discriminator),
            1e-5,
            1e-3,
            None,
        )
        .unwrap();
        gradcheck::check(
            &[scores.map(|v| v * 0.5 - 0.3), scores.map(|v| v * 0.5 + 0.27)],
            |tape, ids| loss_hinge(tape, &[ids[0]], &[ids[1]], GanRole::Discriminator),
            1e-5,
            1e-3,
            None,
        )
        .unwrap();
    }
}
