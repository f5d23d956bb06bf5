//! Appearance-flow warping, flow pyramid utilities, and the
//! total-variation regularizer.
//!
//! A flow field is `[2, h, w]` in pixel units at its own scale: channel 0 is
//! the horizontal displacement, channel 1 the vertical. Warping samples the
//! input bilinearly at the displaced position with zero padding outside the
//! grid, so warped clothing masks fall to zero beyond the garment.

use thiserror::Error;

use crate::kernels;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Error)]
pub enum WarpError {
    #[error("flow size {flow:?} does not match input size {input:?}")]
    SizeMismatch {
        flow: (usize, usize),
        input: (usize, usize),
    },
    #[error("flow must have 2 channels, got {0}")]
    BadFlowChannels(usize),
}

/// Dense 2-channel pixel-displacement field.
#[derive(Clone, Debug, PartialEq)]
pub struct AppearanceFlow<T: Scalar = f32> {
    pub data: Tensor<T>,
}

impl<T: Scalar> AppearanceFlow<T> {
    pub fn new(data: Tensor<T>) -> Result<Self, WarpError> {
        let (c, _, _) = data.chw();
        if c != 2 {
            return Err(WarpError::BadFlowChannels(c));
        }
        Ok(Self { data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            data: Tensor::zeros(&[2, h, w]),
        }
    }

    pub fn hw(&self) -> (usize, usize) {
        let (_, h, w) = self.data.chw();
        (h, w)
    }
}

/// Bilinear warp `W(x, F)`: `out[c,i,j] = x(j + F_x[i,j], i + F_y[i,j])`.
///
/// The flow must already be at the input's spatial size; callers upsample
/// first. Differentiable in both arguments away from grid lines (the tape
/// op shares this kernel).
pub fn warp<T: Scalar>(x: &Tensor<T>, flow: &AppearanceFlow<T>) -> Result<Tensor<T>, WarpError> {
    let (c, h, w) = x.chw();
    let (fh, fw) = flow.hw();
    if (fh, fw) != (h, w) {
        return Err(WarpError::SizeMismatch {
            flow: (fh, fw),
            input: (h, w),
        });
    }
    let mut out = Tensor::zeros(&[c, h, w]);
    kernels::grid_sample_forward(x.data(), c, h, w, flow.data.data(), out.data_mut());
    Ok(out)
}

/// Upsample a flow by an integer factor, scaling displacement values by the
/// same factor so they stay in pixel units at the new scale.
pub fn upsample_flow<T: Scalar>(flow: &AppearanceFlow<T>, factor: usize) -> AppearanceFlow<T> {
    assert!(factor >= 1, "factor must be >= 1");
    if factor == 1 {
        return flow.clone();
    }
    let (h, w) = flow.hw();
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Tensor::zeros(&[2, oh, ow]);
    kernels::bilinear_resize_forward(flow.data.data(), 2, h, w, oh, ow, out.data_mut());
    let f = T::from_f64(factor as f64);
    for v in out.data_mut() {
        *v *= f;
    }
    AppearanceFlow { data: out }
}

/// Total variation of a flow: sum over both channels of absolute forward
/// differences along both axes, no boundary wraparound.
pub fn loss_tv<T: Scalar>(flow: &AppearanceFlow<T>) -> T {
    let (c, h, w) = flow.data.chw();
    let d = flow.data.data();
    let mut s = T::ZERO;
    for ch in 0..c {
        let base = ch * h * w;
        for i in 0..h {
            for j in 0..w.saturating_sub(1) {
                s += (d[base + i * w + j + 1] - d[base + i * w + j]).abs();
            }
        }
        for i in 0..h.saturating_sub(1) {
            for j in 0..w {
                s += (d[base + (i + 1) * w + j] - d[base + i * w + j]).abs();
            }
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Independent per-pixel bilinear oracle, written directly from the
    /// sampling definition rather than the production kernel.
    fn warp_oracle(x: &Tensor<f64>, flow: &Tensor<f64>) -> Tensor<f64> {
        let (c, h, w) = x.chw();
        let n = h * w;
        let mut out = Tensor::zeros(&[c, h, w]);
        for i in 0..h {
            for j in 0..w {
                let sx = j as f64 + flow.data()[i * w + j];
                let sy = i as f64 + flow.data()[n + i * w + j];
                let x0 = sx.floor() as i64;
                let y0 = sy.floor() as i64;
                let fx = sx - x0 as f64;
                let fy = sy - y0 as f64;
                let fetch = |ch: usize, yy: i64, xx: i64| -> f64 {
                    if yy < 0 || yy >= h as i64 || xx < 0 || xx >= w as i64 {
                        0.0
                    } else {
                        x.data()[ch * n + yy as usize * w + xx as usize]
                    }
                };
                for ch in 0..c {
                    let v = fetch(ch, y0, x0) * (1.0 - fx) * (1.0 - fy)
                        + fetch(ch, y0, x0 + 1) * fx * (1.0 - fy)
                        + fetch(ch, y0 + 1, x0) * (1.0 - fx) * fy
                        + fetch(ch, y0 + 1, x0 + 1) * fx * fy;
                    out.data_mut()[ch * n + i * w + j] = v;
                }
            }
        }
        out
    }

    #[test]
    fn zero_flow_is_identity() {
        let x = Tensor::<f64>::from_fn(&[2, 5, 7], |i| (i as f64 * 0.3).sin());
        let f = AppearanceFlow::zeros(5, 7);
        let y = warp(&x, &f).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn unit_shift_on_ramp_matches_hand_values() {
        // x[c,i,j] = j on an 8-wide grid; shifting by +1 gives j+1 and the
        // last column reads zero padding
        let (h, w) = (4, 8);
        let x = Tensor::<f64>::from_fn(&[1, h, w], |i| (i % w) as f64);
        let mut fdata = Tensor::zeros(&[2, h, w]);
        for p in 0..h * w {
            fdata.data_mut()[p] = 1.0;
        }
        let y = warp(&x, &AppearanceFlow { data: fdata }).unwrap();
        for i in 0..h {
            for j in 0..w {
                let expect = if j <= 6 { (j + 1) as f64 } else { 0.0 };
                assert_eq!(y.at3(0, i, j), expect, "at ({i},{j})");
            }
        }
    }

    #[test]
    fn half_shift_on_ramp_interpolates() {
        let (h, w) = (3, 8);
        let x = Tensor::<f64>::from_fn(&[1, h, w], |i| (i % w) as f64);
        let mut fdata = Tensor::zeros(&[2, h, w]);
        for p in 0..h * w {
            fdata.data_mut()[p] = 0.5;
        }
        let y = warp(&x, &AppearanceFlow { data: fdata }).unwrap();
        for i in 0..h {
            for j in 0..=6 {
                assert!((y.at3(0, i, j) - (j as f64 + 0.5)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn warp_matches_oracle_on_random_inputs() {
        let mut rng = crate::nn::stream_rng(123, "warp-oracle", 0, 0);
        for case in 0..1000 {
            let x = Tensor::<f64>::from_fn(&[2, 8, 8], |_| rng.random_range(-1.0..1.0));
            let f = Tensor::<f64>::from_fn(&[2, 8, 8], |_| rng.random_range(-3.0..3.0));
            let got = warp(
                &x,
                &AppearanceFlow {
                    data: f.clone(),
                },
            )
            .unwrap();
            let want = warp_oracle(&x, &f);
            assert!(
                got.max_abs_diff(&want) < 1e-6,
                "case {case} deviates from the bilinear oracle"
            );
        }
    }

    #[test]
    fn warp_is_linear_in_input() {
        let mut rng = crate::nn::stream_rng(5, "warp-linear", 0, 0);
        let x = Tensor::<f64>::from_fn(&[1, 6, 6], |_| rng.random_range(-1.0..1.0));
        let y = Tensor::<f64>::from_fn(&[1, 6, 6], |_| rng.random_range(-1.0..1.0));
        let f = AppearanceFlow {
            data: Tensor::<f64>::from_fn(&[2, 6, 6], |_| rng.random_range(-2.0..2.0)),
        };
        let (a, b) = (0.7, -1.3);
        let mut lin = x.clone();
        for (l, (&xv, &yv)) in lin.data_mut().iter_mut().zip(x.data().iter().zip(y.data())) {
            *l = a * xv + b * yv;
        }
        let w1 = warp(&lin, &f).unwrap();
        let wx = warp(&x, &f).unwrap();
        let wy = warp(&y, &f).unwrap();
        for i in 0..w1.numel() {
            let combo = a * wx.data()[i] + b * wy.data()[i];
            assert!((w1.data()[i] - combo).abs() < 1e-9);
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let x = Tensor::<f64>::zeros(&[1, 4, 4]);
        let f = AppearanceFlow::<f64>::zeros(2, 2);
        assert!(warp(&x, &f).is_err());
    }

    #[test]
    fn upsample_factor_one_is_identity() {
        let f = AppearanceFlow {
            data: Tensor::<f64>::from_fn(&[2, 3, 3], |i| i as f64),
        };
        assert_eq!(upsample_flow(&f, 1), f);
    }

    #[test]
    fn upsample_scales_displacements() {
        // 1x1 flow (2,3) with factor 4 becomes a constant 4x4 field (8,12)
        let f = AppearanceFlow {
            data: Tensor::<f64>::from_vec(&[2, 1, 1], vec![2.0, 3.0]),
        };
        let up = upsample_flow(&f, 4);
        assert_eq!(up.hw(), (4, 4));
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(up.data.at3(0, i, j), 8.0);
                assert_eq!(up.data.at3(1, i, j), 12.0);
            }
        }
    }

    #[test]
    fn upsample_preserves_constant_fields() {
        let f = AppearanceFlow {
            data: Tensor::<f64>::from_fn(&[2, 3, 4], |i| if i < 12 { -1.5 } else { 0.25 }),
        };
        for factor in [2usize, 3, 5] {
            let up = upsample_flow(&f, factor);
            let n = up.data.numel() / 2;
            for p in 0..n {
                assert!((up.data.data()[p] - -1.5 * factor as f64).abs() < 1e-12);
                assert!((up.data.data()[n + p] - 0.25 * factor as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tv_of_constant_flow_is_zero() {
        let f = AppearanceFlow {
            data: Tensor::<f64>::full(&[2, 5, 5], 3.7),
        };
        assert_eq!(loss_tv(&f), 0.0);
    }

    #[test]
    fn tv_hand_computed_cases() {
        // 1x2 flow with channel-0 values (0, 1), channel-1 zeros -> 1
        let f = AppearanceFlow {
            data: Tensor::<f64>::from_vec(&[2, 1, 2], vec![0.0, 1.0, 0.0, 0.0]),
        };
        assert_eq!(loss_tv(&f), 1.0);
        // 2x2 flow, channel-0 = [[0,1],[0,1]] -> horizontal diffs 1+1
        let f = Tensor::<f64>::from_vec(&[2, 2, 2], vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(loss_tv(&AppearanceFlow { data: f }), 2.0);
    }

    #[test]
    fn tv_invariant_to_constant_offset_and_zero_iff_constant() {
        let mut rng = crate::nn::stream_rng(17, "tv", 0, 0);
        let f = Tensor::<f64>::from_fn(&[2, 4, 5], |_| rng.random_range(-2.0..2.0));
        let tv = loss_tv(&AppearanceFlow { data: f.clone() });
        assert!(tv > 0.0);
        let shifted = f.map(|v| v + 11.25);
        let tv2 = loss_tv(&AppearanceFlow { data: shifted });
        assert!((tv - tv2).abs() < 1e-9);
    }

    #[test]
    fn tape_warp_matches_pure_warp() {
        use crate::tape::Tape;
        let mut rng = crate::nn::stream_rng(31, "tape-warp", 0, 0);
        let x = Tensor::<f64>::from_fn(&[3, 6, 5], |_| rng.random_range(-1.0..1.0));
        let f = Tensor::<f64>::from_fn(&[2, 6, 5], |_| rng.random_range(-2.0..2.0));
        let pure = warp(&x, &AppearanceFlow { data: f.clone() }).unwrap();
        let mut t = Tape::new();
        let xi = t.constant(x);
        let fi = t.constant(f);
        let y = t.grid_sample(xi, fi);
        assert_eq!(t.value(y), &pure);
    }
}
