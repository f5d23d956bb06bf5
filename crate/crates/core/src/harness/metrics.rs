//! Structural similarity and the append-only metrics log.

use crate::fields::ImageField;
use crate::tensor::Tensor;

/// Windowed SSIM: 11x11 Gaussian window (sigma 1.5), k1=0.01, k2=0.03,
/// inputs mapped from `[-1,1]` to `[0,1]` internally, averaged over valid
/// window positions and channels.
pub fn ssim(a: &ImageField, b: &ImageField) -> f64 {
    assert_eq!(a.data.dims(), b.data.dims(), "ssim needs equal shapes");
    let (c, h, w) = a.data.chw();
    let win = 11usize;
    assert!(h >= win && w >= win, "image smaller than the SSIM window");
    let kernel = gaussian_kernel(win, 1.5);
    const K1: f64 = 0.01;
    const K2: f64 = 0.03;
    let c1 = (K1 * 1.0f64).powi(2);
    let c2 = (K2 * 1.0f64).powi(2);

    let to_unit = |t: &Tensor<f32>| -> Vec<f64> {
        t.data().iter().map(|&v| (v as f64 + 1.0) / 2.0).collect()
    };
    let xa = to_unit(&a.data);
    let xb = to_unit(&b.data);

    let mut total = 0.0f64;
    let mut count = 0usize;
    let n = h * w;
    for ch in 0..c {
        let pa = &xa[ch * n..(ch + 1) * n];
        let pb = &xb[ch * n..(ch + 1) * n];
        for wy in 0..=(h - win) {
            for wx in 0..=(w - win) {
                let mut mx = 0.0;
                let mut my = 0.0;
                let mut mxx = 0.0;
                let mut myy = 0.0;
                let mut mxy = 0.0;
                for ky in 0..win {
                    for kx in 0..win {
                        let g = kernel[ky * win + kx];
                        let va = pa[(wy + ky) * w + wx + kx];
                        let vb = pb[(wy + ky) * w + wx + kx];
                        mx += g * va;
                        my += g * vb;
                        mxx += g * va * va;
                        myy += g * vb * vb;
                        mxy += g * va * vb;
                    }
                }
                let vx = mxx - mx * mx;
                let vy = myy - my * my;
                let cov = mxy - mx * my;
                let s = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                total += s;
                count += 1;
            }
        }
    }
    total / count as f64
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size as f64 - 1.0) / 2.0;
    let mut k = vec![0.0; size * size];
    let mut sum = 0.0;
    for y in 0..size {
        for x in 0..size {
            let dy = y as f64 - half;
            let dx = x as f64 - half;
            let v = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            k[y * size + x] = v;
            sum += v;
        }
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Dominant period of a 1-d signal by autocorrelation peak, searched over
/// `lags` (inclusive). Returns `None` when no positive autocorrelation peak
/// exists in the range. Used to measure stripe periods on garment bands.
pub fn dominant_period(signal: &[f64], lags: std::ops::RangeInclusive<usize>) -> Option<f64> {
    let n = signal.len();
    let mean = signal.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = signal.iter().map(|v| v - mean).collect();
    let denom: f64 = centered.iter().map(|v| v * v).sum();
    if denom <= 1e-12 {
        return None;
    }
    let corr_at = |lag: usize| -> Option<f64> {
        if lag == 0 || lag >= n {
            return None;
        }
        let mut acc = 0.0;
        for i in 0..n - lag {
            acc += centered[i] * centered[i + lag];
        }
        Some(acc / denom)
    };
    let mut rs: Vec<(usize, f64)> = Vec::new();
    for lag in lags {
        if let Some(r) = corr_at(lag) {
            rs.push((lag, r));
        }
    }
    let r_max = rs.iter().map(|&(_, r)| r).fold(f64::MIN, f64::max);
    if r_max <= 0.0 {
        return None;
    }
    // integer lags favor harmonics of non-integer periods; take the smallest
    // lag close to the peak instead of the absolute argmax
    let best = rs
        .iter()
        .find(|&&(_, r)| r >= 0.85 * r_max)
        .copied();
    let (lag, r) = best?;
    // parabolic refinement around the peak for sub-pixel periods
    let (Some(ym), Some(yp)) = (corr_at(lag.saturating_sub(1)), corr_at(lag + 1)) else {
        return Some(lag as f64);
    };
    let y0 = r;
    let denom2 = ym - 2.0 * y0 + yp;
    if denom2.abs() < 1e-12 {
        return Some(lag as f64);
    }
    let shift = 0.5 * (ym - yp) / denom2;
    Some(lag as f64 + shift.clamp(-0.5, 0.5))
}

/// One CSV row per condition-generator iteration; floats print in Rust's
/// shortest round-trip form so the log parses back to the exact values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TocgRow {
    pub iter: u64,
    pub total: f32,
    pub ce: f32,
    pub gan: f32,
    pub l1: f32,
    pub vgg: f32,
    pub tv: f32,
    pub d: f32,
}

impl TocgRow {
    pub fn to_line(self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.iter, self.total, self.ce, self.gan, self.l1, self.vgg, self.tv, self.d
        )
    }

    pub fn parse(line: &str) -> Option<Self> {
        let mut it = line.split(',');
        Some(Self {
            iter: it.next()?.parse().ok()?,
            total: it.next()?.parse().ok()?,
            ce: it.next()?.parse().ok()?,
            gan: it.next()?.parse().ok()?,
            l1: it.next()?.parse().ok()?,
            vgg: it.next()?.parse().ok()?,
            tv: it.next()?.parse().ok()?,
            d: it.next()?.parse().ok()?,
        })
    }
}

pub const TOCG_LOG_HEADER: &str = "iter,total,ce,gan,l1,vgg,tv,d";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToigRow {
    pub iter: u64,
    pub total: f32,
    pub adv: f32,
    pub vgg: f32,
    pub fm: f32,
    pub d: f32,
}

impl ToigRow {
    pub fn to_line(self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.iter, self.total, self.adv, self.vgg, self.fm, self.d
        )
    }

    pub fn parse(line: &str) -> Option<Self> {
        let mut it = line.split(',');
        Some(Self {
            iter: it.next()?.parse().ok()?,
            total: it.next()?.parse().ok()?,
            adv: it.next()?.parse().ok()?,
            vgg: it.next()?.parse().ok()?,
            fm: it.next()?.parse().ok()?,
            d: it.next()?.parse().ok()?,
        })
    }
}

pub const TOIG_LOG_HEADER: &str = "iter,total,adv,vgg,fm,d";

/// Render a metrics log (header + rows) as one string.
pub fn tocg_log_text(rows: &[TocgRow]) -> String {
    let mut s = String::from(TOCG_LOG_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_line());
        s.push('\n');
    }
    s
}

pub fn parse_tocg_log(text: &str) -> Vec<TocgRow> {
    text.lines().skip(1).filter_map(TocgRow::parse).collect()
}

pub fn toig_log_text(rows: &[ToigRow]) -> String {
    let mut s = String::from(TOIG_LOG_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_line());
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn const_image(v: f32, h: usize, w: usize) -> ImageField {
        ImageField::new(Tensor::full(&[3, h, w], v)).unwrap()
    }

    #[test]
    fn ssim_self_is_one() {
        let x = ImageField::new(Tensor::from_fn(&[3, 16, 16], |i| ((i as f32 * 0.37).sin())))
            .unwrap();
        assert!((ssim(&x, &x) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_is_symmetric() {
        let a = ImageField::new(Tensor::from_fn(&[3, 16, 16], |i| ((i as f32 * 0.21).sin())))
            .unwrap();
        let b = ImageField::new(Tensor::from_fn(&[3, 16, 16], |i| ((i as f32 * 0.13).cos())))
            .unwrap();
        assert!((ssim(&a, &b) - ssim(&b, &a)).abs() < 1e-12);
    }

    #[test]
    fn ssim_of_black_vs_white_matches_closed_form() {
        // constants 0 and 1 in the internal [0,1] domain (-1 and +1 on the
        // field scale): every window has means 0 and 1 and zero variances,
        // so SSIM = (C1 * C2) / ((1 + C1) * C2) = C1 / (1 + C1).
        let a = const_image(-1.0, 16, 16);
        let b = const_image(1.0, 16, 16);
        let c1 = 0.01f64.powi(2);
        let expect = c1 / (1.0 + c1);
        let got = ssim(&a, &b);
        assert!(
            (got - expect).abs() < 1e-9,
            "got {got}, closed form {expect}"
        );
    }

    #[test]
    fn dominant_period_recovers_known_frequency() {
        for true_period in [4.0f64, 5.5, 8.0] {
            let signal: Vec<f64> = (0..64)
                .map(|i| (i as f64 * std::f64::consts::TAU / true_period).sin())
                .collect();
            let got = dominant_period(&signal, 2..=16).unwrap();
            assert!(
                (got - true_period).abs() / true_period < 0.10,
                "period {true_period}: got {got}"
            );
        }
        // constant signal has no period
        assert!(dominant_period(&[1.0; 32], 2..=8).is_none());
    }

    #[test]
    fn log_roundtrip_is_exact() {
        let rows = vec![
            TocgRow {
                iter: 0,
                total: 24.062_345,
                ce: 1.945_910_1,
                gan: 0.333_333_34,
                l1: 0.125,
                vgg: 0.007_812_5,
                tv: 1e-7,
                d: 0.499_999_97,
            },
            TocgRow {
                iter: 1,
                total: f32::MIN_POSITIVE,
                ce: 1.1e-10,
                gan: 3.0,
                l1: 0.1,
                vgg: 0.2,
                tv: 0.3,
                d: 0.4,
            },
        ];
        let text = tocg_log_text(&rows);
        let parsed = parse_tocg_log(&text);
        assert_eq!(rows, parsed);
    }
}
