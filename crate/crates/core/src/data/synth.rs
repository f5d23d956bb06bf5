//! Deterministic procedural person/garment scenes.
//!
//! Each record is a textured torso garment placed by a random affine map,
//! two arm capsules (optionally crossing the chest to occlude the garment),
//! a head, a bottom region, and the matching flat product view of the same
//! garment. The worn texture is exactly `product(A^-1 p)`, so an appearance
//! flow can reproduce it.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::fields::{ImageField, MaskField, PoseMap, SampleRecord, SegMap};
use crate::nn::stream_rng;
use crate::palette::LabelPalette;
use crate::tensor::Tensor;

use super::make_agnostic;

/// Knobs for the synthetic scene generator.
#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub occlusion_prob: f64,
    pub logo_prob: f64,
    /// Stripe period bounds as a fraction of image height.
    pub stripe_period_frac: (f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            occlusion_prob: 0.5,
            logo_prob: 0.7,
            stripe_period_frac: (0.06, 0.085),
        }
    }
}

/// 2x3 affine map (row major): `p_person = M * [x, y, 1]^T`.
#[derive(Clone, Copy, Debug)]
pub struct Affine {
    pub m: [[f64; 3]; 2],
}

impl Affine {
    fn compose(center: (f64, f64), theta: f64, sx: f64, sy: f64, canon_center: (f64, f64)) -> Self {
        let (ct, st) = (theta.cos(), theta.sin());
        // T(center) * R(theta) * S(sx, sy) * T(-canon_center)
        let a = ct * sx;
        let b = -st * sy;
        let c = st * sx;
        let d = ct * sy;
        let tx = center.0 - a * canon_center.0 - b * canon_center.1;
        let ty = center.1 - c * canon_center.0 - d * canon_center.1;
        Self {
            m: [[a, b, tx], [c, d, ty]],
        }
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.m[0][0] * x + self.m[0][1] * y + self.m[0][2],
            self.m[1][0] * x + self.m[1][1] * y + self.m[1][2],
        )
    }

    pub fn invert(&self) -> Self {
        let [[a, b, tx], [c, d, ty]] = self.m;
        let det = a * d - b * c;
        let (ia, ib, ic, id) = (d / det, -b / det, -c / det, a / det);
        Self {
            m: [
                [ia, ib, -(ia * tx + ib * ty)],
                [ic, id, -(ic * tx + id * ty)],
            ],
        }
    }

    /// Length of the image of the unit y vector (stripe direction scale).
    pub fn y_scale(&self) -> f64 {
        (self.m[0][1] * self.m[0][1] + self.m[1][1] * self.m[1][1]).sqrt()
    }
}

/// Generation-side ground truth that tests and diagnostics can consume.
#[derive(Clone, Debug)]
pub struct SceneInfo {
    pub affine: Affine,
    /// Stripe period in the product view, pixels.
    pub canon_stripe_period: f64,
    /// Stripe period as worn (canonical period scaled by the affine).
    pub worn_stripe_period: f64,
    pub occluded: bool,
    /// Bounding box (x0, x1, y0, y1) of arm pixels inside the worn garment
    /// polygon, when an occlusion exists.
    pub occluder_bbox: Option<(usize, usize, usize, usize)>,
    /// Bounding box of the worn garment region.
    pub garment_bbox: (usize, usize, usize, usize),
}

struct Garment {
    canon_center: (f64, f64),
    shoulder_y: f64,
    waist_y: f64,
    shoulder_hw: f64,
    waist_hw: f64,
    stripe_period: f64,
    base: [f32; 3],
    stripe: [f32; 3],
    logo: Option<(f64, f64, f64, f64, [f32; 3])>,
}

impl Garment {
    fn contains(&self, x: f64, y: f64) -> bool {
        if y < self.shoulder_y || y > self.waist_y {
            return false;
        }
        let t = (y - self.shoulder_y) / (self.waist_y - self.shoulder_y);
        let hw = self.shoulder_hw * (1.0 - t) + self.waist_hw * t;
        (x - self.canon_center.0).abs() <= hw
    }

    fn color(&self, x: f64, y: f64) -> [f32; 3] {
        if let Some((lx0, lx1, ly0, ly1, c)) = self.logo {
            if x >= lx0 && x <= lx1 && y >= ly0 && y <= ly1 {
                return c;
            }
        }
        let band = ((y - self.shoulder_y) / self.stripe_period).floor() as i64;
        if band.rem_euclid(2) == 0 {
            self.base
        } else {
            self.stripe
        }
    }
}

struct Capsule {
    p0: (f64, f64),
    p1: (f64, f64),
    r: f64,
}

impl Capsule {
    /// Signed (t, d): normalized position along the axis and distance.
    fn project(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (self.p1.0 - self.p0.0, self.p1.1 - self.p0.1);
        let len2 = dx * dx + dy * dy;
        let t = ((x - self.p0.0) * dx + (y - self.p0.1) * dy) / len2;
        let tc = t.clamp(0.0, 1.0);
        let (px, py) = (self.p0.0 + tc * dx, self.p0.1 + tc * dy);
        let d = ((x - px) * (x - px) + (y - py) * (y - py)).sqrt();
        (t, d)
    }
}

fn rand_color(rng: &mut ChaCha12Rng, lo: f32, hi: f32) -> [f32; 3] {
    [
        rng.random_range(lo..hi),
        rng.random_range(lo..hi),
        rng.random_range(lo..hi),
    ]
}

fn luminance(c: [f32; 3]) -> f32 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

/// Generate one record plus its scene ground truth.
pub fn generate_scene(
    seed: u64,
    index: u64,
    resolution: (usize, usize),
    palette: &LabelPalette,
    cfg: &SynthConfig,
) -> (SampleRecord, SceneInfo) {
    let (h, w) = resolution;
    let (hf, wf) = (h as f64, w as f64);
    let mut rng = stream_rng(seed, "synth", index, 0);

    // canonical garment in the product frame
    let canon_center = (0.5 * wf, 0.5 * hf);
    let stripe_period = rng.random_range(cfg.stripe_period_frac.0..cfg.stripe_period_frac.1) * hf;
    let base = rand_color(&mut rng, -0.8, 0.8);
    // force a strong luminance contrast so stripes survive warping
    let stripe = {
        let mut c = rand_color(&mut rng, -0.8, 0.8);
        let mut guard = 0;
        while (luminance(c) - luminance(base)).abs() < 0.6 && guard < 64 {
            c = rand_color(&mut rng, -0.9, 0.9);
            guard += 1;
        }
        if (luminance(c) - luminance(base)).abs() < 0.6 {
            // deterministic fallback
            c = if luminance(base) > 0.0 {
                [-0.85, -0.85, -0.85]
            } else {
                [0.85, 0.85, 0.85]
            };
        }
        c
    };
    let shoulder_y = 0.28 * hf;
    let waist_y = 0.72 * hf;
    let shoulder_hw = 0.26 * wf;
    let waist_hw = 0.20 * wf;
    let logo = if rng.random::<f64>() < cfg.logo_prob {
        let lcx = canon_center.0 + rng.random_range(-0.05..0.05) * wf;
        let lcy = 0.45 * hf + rng.random_range(-0.04..0.04) * hf;
        let (lw, lh) = (0.07 * wf, 0.05 * hf);
        Some((
            lcx - lw,
            lcx + lw,
            lcy - lh,
            lcy + lh,
            rand_color(&mut rng, -0.9, 0.9),
        ))
    } else {
        None
    };
    let garment = Garment {
        canon_center,
        shoulder_y,
        waist_y,
        shoulder_hw,
        waist_hw,
        stripe_period,
        base,
        stripe,
        logo,
    };

    // pose of the worn garment
    let theta = rng.random_range(-0.20..0.20);
    let sx = rng.random_range(0.85..1.15);
    let sy = rng.random_range(0.85..1.15);
    let center = (
        0.5 * wf + rng.random_range(-0.08..0.08) * wf,
        0.47 * hf + rng.random_range(-0.05..0.05) * hf,
    );
    let affine = Affine::compose(center, theta, sx, sy, canon_center);
    let inv = affine.invert();

    // body pieces in the person frame
    let head_center = affine.apply(canon_center.0, shoulder_y - 0.12 * hf);
    let head_r = 0.085 * hf * 0.5 * (sx + sy);
    let lsh = affine.apply(canon_center.0 - shoulder_hw * 0.92, shoulder_y + 0.02 * hf);
    let rsh = affine.apply(canon_center.0 + shoulder_hw * 0.92, shoulder_y + 0.02 * hf);
    let arm_r = 0.048 * wf * 0.5 * (sx + sy);
    let arm_len = rng.random_range(0.30..0.38) * hf;

    let occluded = rng.random::<f64>() < cfg.occlusion_prob;
    let occluding_left = rng.random::<bool>();
    let make_arm = |rng: &mut ChaCha12Rng, shoulder: (f64, f64), left: bool, crossing: bool| {
        if crossing {
            // aim the forearm at the torso center so it must cross the garment
            let target = (
                center.0 + rng.random_range(-0.05..0.05) * wf,
                center.1 + rng.random_range(0.0..0.10) * hf,
            );
            let (dx, dy) = (target.0 - shoulder.0, target.1 - shoulder.1);
            let len = (dx * dx + dy * dy).sqrt();
            let stretch = rng.random_range(1.15..1.35);
            Capsule {
                p0: shoulder,
                p1: (
                    shoulder.0 + dx / len * len * stretch,
                    shoulder.1 + dy / len * len * stretch,
                ),
                r: arm_r,
            }
        } else {
            let outward = if left { -1.0 } else { 1.0 };
            let ang: f64 = rng.random_range(-0.25..0.25);
            let dir = (outward * (0.18 + ang.abs() * 0.3), 1.0);
            let norm = (dir.0 * dir.0 + dir.1 * dir.1).sqrt();
            Capsule {
                p0: shoulder,
                p1: (
                    shoulder.0 + dir.0 / norm * arm_len,
                    shoulder.1 + dir.1 / norm * arm_len,
                ),
                r: arm_r,
            }
        }
    };
    let left_arm = make_arm(&mut rng, lsh, true, occluded && occluding_left);
    let right_arm = make_arm(&mut rng, rsh, false, occluded && !occluding_left);

    // bottom region below the waist
    let wl = affine.apply(canon_center.0 - waist_hw, waist_y);
    let wr = affine.apply(canon_center.0 + waist_hw, waist_y);
    let bottom_y1 = 0.95 * hf;

    let skin = [
        0.55 + rng.random_range(-0.15..0.15),
        0.25 + rng.random_range(-0.15..0.15),
        0.05 + rng.random_range(-0.15..0.15),
    ];
    let pants = rand_color(&mut rng, -0.9, -0.3);
    let bg = rand_color(&mut rng, -0.35, 0.35);
    let product_bg = [0.88f32, 0.88, 0.88];

    let clothing = palette.clothing_channel;
    let n = h * w;

    let mut person = Tensor::zeros(&[3, h, w]);
    let mut cloth = Tensor::zeros(&[3, h, w]);
    let mut cloth_mask = Tensor::zeros(&[1, h, w]);
    let mut pose = Tensor::zeros(&[3, h, w]);
    let mut labels = vec![0u8; n];

    // part-index encoding in [-1, 1]
    let part_code = [-1.0f32, -0.6, -0.2, 0.2, 0.6, 1.0]; // bg, bottom, torso, head, larm, rarm

    let mut garment_bbox = (w, 0usize, h, 0usize);
    let mut occluder_bbox: Option<(usize, usize, usize, usize)> = None;

    for iy in 0..h {
        for ix in 0..w {
            let (x, y) = (ix as f64 + 0.5, iy as f64 + 0.5);
            let p = iy * w + ix;

            // product view in the canonical frame
            if garment.contains(x, y) {
                let col = garment.color(x, y);
                for ch in 0..3 {
                    cloth.data_mut()[ch * n + p] = col[ch];
                }
                cloth_mask.data_mut()[p] = 1.0;
            } else {
                for ch in 0..3 {
                    cloth.data_mut()[ch * n + p] = product_bg[ch];
                }
            }

            // person: paint by priority (arms > head > garment > bottom > bg)
            let (qx, qy) = inv.apply(x, y);
            let in_garment = garment.contains(qx, qy);
            let in_bottom = {
                let t = ((y - wl.1) / (bottom_y1 - wl.1)).clamp(0.0, 1.0);
                let xl = wl.0 + t * 0.06 * wf;
                let xr = wr.0 - t * 0.06 * wf;
                y >= wl.1.min(wr.1) && y <= bottom_y1 && x >= xl && x <= xr
            };
            let dh = ((x - head_center.0).powi(2) + (y - head_center.1).powi(2)).sqrt();
            let in_head = dh <= head_r;
            let (lt, ld) = left_arm.project(x, y);
            let (rt, rd) = right_arm.project(x, y);
            let in_larm = ld <= left_arm.r;
            let in_rarm = rd <= right_arm.r;

            let (label, color, part, uv): (u8, [f32; 3], f32, (f32, f32)) = if in_larm {
                (
                    4,
                    skin,
                    part_code[4],
                    ((lt.clamp(0.0, 1.0) * 2.0 - 1.0) as f32, (ld / left_arm.r) as f32),
                )
            } else if in_rarm {
                (
                    5,
                    skin,
                    part_code[5],
                    ((rt.clamp(0.0, 1.0) * 2.0 - 1.0) as f32, (rd / right_arm.r) as f32),
                )
            } else if in_head {
                (
                    1,
                    skin,
                    part_code[3],
                    (
                        ((x - head_center.0) / head_r) as f32,
                        ((y - head_center.1) / head_r) as f32,
                    ),
                )
            } else if in_garment {
                let col = garment.color(qx, qy);
                (
                    clothing as u8,
                    col,
                    part_code[2],
                    (
                        (((qx - canon_center.0) / (0.5 * wf)).clamp(-1.0, 1.0)) as f32,
                        (((qy - canon_center.1) / (0.5 * hf)).clamp(-1.0, 1.0)) as f32,
                    ),
                )
            } else if in_bottom {
                (
                    3,
                    pants,
                    part_code[1],
                    (
                        ((x / wf) * 2.0 - 1.0) as f32,
                        (((y - wl.1) / (bottom_y1 - wl.1)).clamp(0.0, 1.0) * 2.0 - 1.0) as f32,
                    ),
                )
            } else {
                (0, bg, part_code[0], (0.0, 0.0))
            };

            labels[p] = label;
            for ch in 0..3 {
                person.data_mut()[ch * n + p] = color[ch];
            }
            pose.data_mut()[p] = part;
            pose.data_mut()[n + p] = uv.0.clamp(-1.0, 1.0);
            pose.data_mut()[2 * n + p] = uv.1.clamp(-1.0, 1.0);

            if in_garment {
                garment_bbox.0 = garment_bbox.0.min(ix);
                garment_bbox.1 = garment_bbox.1.max(ix);
                garment_bbox.2 = garment_bbox.2.min(iy);
                garment_bbox.3 = garment_bbox.3.max(iy);
                if in_larm || in_rarm {
                    let bb = occluder_bbox.get_or_insert((ix, ix, iy, iy));
                    bb.0 = bb.0.min(ix);
                    bb.1 = bb.1.max(ix);
                    bb.2 = bb.2.min(iy);
                    bb.3 = bb.3.max(iy);
                }
            }
        }
    }

    let person = ImageField::new(person).expect("person field");
    let clothes = ImageField::new(cloth).expect("cloth field");
    let clothes_mask = MaskField::new(cloth_mask).expect("cloth mask");
    let pose = PoseMap::new(pose).expect("pose map");
    let parse = SegMap::from_labels(&labels, h, w, palette).expect("parse map");
    let (agnostic_image, agnostic_parse) = make_agnostic(&person, &parse, palette);

    let record = SampleRecord {
        person,
        clothes,
        clothes_mask,
        pose,
        parse,
        agnostic_image,
        agnostic_parse,
        pair_id: format!("synth-{seed}-{index:05}"),
    };
    let info = SceneInfo {
        affine,
        canon_stripe_period: stripe_period,
        worn_stripe_period: stripe_period * affine.y_scale(),
        occluded: occluder_bbox.is_some(),
        occluder_bbox,
        garment_bbox,
    };
    (record, info)
}

/// Deterministic synthetic dataset: same seed, same bytes.
pub fn generate_synthetic_dataset(
    seed: u64,
    n: usize,
    resolution: (usize, usize),
    palette: &LabelPalette,
) -> Vec<SampleRecord> {
    generate_synthetic_dataset_with(seed, n, resolution, palette, &SynthConfig::default())
        .into_iter()
        .map(|(r, _)| r)
        .collect()
}

pub fn generate_synthetic_dataset_with(
    seed: u64,
    n: usize,
    resolution: (usize, usize),
    palette: &LabelPalette,
    cfg: &SynthConfig,
) -> Vec<(SampleRecord, SceneInfo)> {
    (0..n as u64)
        .map(|i| generate_scene(seed, i, resolution, palette, cfg))
        .collect()
}
