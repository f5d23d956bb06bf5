//! Pipeline data types: images, masks, segmentation maps, logits, pose maps.

use thiserror::Error;

use crate::palette::LabelPalette;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("expected shape {expected}, got {got:?}")]
    Shape { expected: String, got: Vec<usize> },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("mask value {value} at index {index} outside [0,1]")]
    MaskRange { index: usize, value: f32 },
    #[error("segmentation map not one-hot at pixel {0}")]
    NotOneHot(usize),
    #[error("segmentation map channel sums deviate from 1 at pixel {0}")]
    NotNormalized(usize),
    #[error("label id {id} not present in palette of {num} labels")]
    UnknownLabel { id: usize, num: usize },
}

/// RGB image in `[-1, 1]`, shape `[3, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageField {
    pub data: Tensor<f32>,
}

impl ImageField {
    pub fn new(data: Tensor<f32>) -> Result<Self, FieldError> {
        if data.dims().len() != 3 || data.dims()[0] != 3 {
            return Err(FieldError::Shape {
                expected: "[3, H, W]".into(),
                got: data.dims().to_vec(),
            });
        }
        if let Some(i) = data.data().iter().position(|v| !v.is_finite()) {
            return Err(FieldError::NonFinite(i));
        }
        Ok(Self { data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            data: Tensor::zeros(&[3, h, w]),
        }
    }

    pub fn hw(&self) -> (usize, usize) {
        let (_, h, w) = self.data.chw();
        (h, w)
    }
}

/// Single-channel mask in `[0, 1]`, shape `[1, H, W]`. Binary when loaded
/// from disk; warping can make it fractional.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskField {
    pub data: Tensor<f32>,
}

impl MaskField {
    pub fn new(data: Tensor<f32>) -> Result<Self, FieldError> {
        if data.dims().len() != 3 || data.dims()[0] != 1 {
            return Err(FieldError::Shape {
                expected: "[1, H, W]".into(),
                got: data.dims().to_vec(),
            });
        }
        for (i, &v) in data.data().iter().enumerate() {
            if !v.is_finite() {
                return Err(FieldError::NonFinite(i));
            }
            if !(0.0..=1.0).contains(&v) {
                return Err(FieldError::MaskRange { index: i, value: v });
            }
        }
        Ok(Self { data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            data: Tensor::zeros(&[1, h, w]),
        }
    }

    pub fn hw(&self) -> (usize, usize) {
        let (_, h, w) = self.data.chw();
        (h, w)
    }

    pub fn is_binary(&self) -> bool {
        self.data.data().iter().all(|&v| v == 0.0 || v == 1.0)
    }
}

/// One-hot or soft per-pixel label distribution, shape `[C_seg, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegMap {
    pub data: Tensor<f32>,
    pub palette: LabelPalette,
}

impl SegMap {
    pub fn new(data: Tensor<f32>, palette: LabelPalette) -> Result<Self, FieldError> {
        if data.dims().len() != 3 || data.dims()[0] != palette.num_channels() {
            return Err(FieldError::Shape {
                expected: format!("[{}, H, W]", palette.num_channels()),
                got: data.dims().to_vec(),
            });
        }
        Ok(Self { data, palette })
    }

    pub fn hw(&self) -> (usize, usize) {
        let (_, h, w) = self.data.chw();
        (h, w)
    }

    /// Build a one-hot map from per-pixel label ids.
    pub fn from_labels(
        labels: &[u8],
        h: usize,
        w: usize,
        palette: &LabelPalette,
    ) -> Result<Self, FieldError> {
        assert_eq!(labels.len(), h * w);
        let c = palette.num_channels();
        let mut data = Tensor::zeros(&[c, h, w]);
        for (p, &id) in labels.iter().enumerate() {
            let id = id as usize;
            if id >= c {
                return Err(FieldError::UnknownLabel { id, num: c });
            }
            data.data_mut()[id * h * w + p] = 1.0;
        }
        Ok(Self {
            data,
            palette: palette.clone(),
        })
    }

    /// Per-pixel argmax label ids (ties break to the lowest channel).
    pub fn to_labels(&self) -> Vec<u8> {
        let (c, h, w) = self.data.chw();
        let n = h * w;
        let d = self.data.data();
        (0..n)
            .map(|p| {
                let mut best = 0usize;
                let mut bv = d[p];
                for ch in 1..c {
                    let v = d[ch * n + p];
                    if v > bv {
                        bv = v;
                        best = ch;
                    }
                }
                best as u8
            })
            .collect()
    }

    pub fn check_one_hot(&self) -> Result<(), FieldError> {
        let (c, h, w) = self.data.chw();
        let n = h * w;
        let d = self.data.data();
        for p in 0..n {
            let mut ones = 0;
            let mut sum = 0.0f32;
            for ch in 0..c {
                let v = d[ch * n + p];
                if v == 1.0 {
                    ones += 1;
                } else if v != 0.0 {
                    return Err(FieldError::NotOneHot(p));
                }
                sum += v;
            }
            if ones != 1 || sum != 1.0 {
                return Err(FieldError::NotOneHot(p));
            }
        }
        Ok(())
    }

    pub fn check_soft(&self, tol: f32) -> Result<(), FieldError> {
        let (c, h, w) = self.data.chw();
        let n = h * w;
        let d = self.data.data();
        for p in 0..n {
            let mut sum = 0.0f32;
            for ch in 0..c {
                let v = d[ch * n + p];
                if v < 0.0 {
                    return Err(FieldError::NotNormalized(p));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > tol {
                return Err(FieldError::NotNormalized(p));
            }
        }
        Ok(())
    }

    /// Extract one channel as a mask (the ground-truth clothing region
    /// `S_c` is the clothing channel of `S`).
    pub fn channel_mask(&self, channel: usize) -> MaskField {
        let (_, h, w) = self.data.chw();
        let n = h * w;
        let data = self.data.data()[channel * n..(channel + 1) * n].to_vec();
        MaskField {
            data: Tensor::from_vec(&[1, h, w], data),
        }
    }
}

/// Raw or rectified segmentation logits, shape `[C_seg, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitField {
    pub data: Tensor<f32>,
}

impl LogitField {
    pub fn new(data: Tensor<f32>) -> Self {
        Self { data }
    }

    pub fn all_non_negative(&self) -> bool {
        self.data.data().iter().all(|&v| v >= 0.0)
    }
}

/// Dense-pose stand-in: `[3, H, W]` in `[-1, 1]` encoding
/// (part index, local u, local v).
#[derive(Clone, Debug, PartialEq)]
pub struct PoseMap {
    pub data: Tensor<f32>,
}

impl PoseMap {
    pub fn new(data: Tensor<f32>) -> Result<Self, FieldError> {
        if data.dims().len() != 3 || data.dims()[0] != 3 {
            return Err(FieldError::Shape {
                expected: "[3, H, W]".into(),
                got: data.dims().to_vec(),
            });
        }
        if let Some(i) = data.data().iter().position(|v| !v.is_finite()) {
            return Err(FieldError::NonFinite(i));
        }
        Ok(Self { data })
    }

    pub fn hw(&self) -> (usize, usize) {
        let (_, h, w) = self.data.chw();
        (h, w)
    }
}

/// One training example with its derived clothing-agnostic pair.
#[derive(Clone, Debug)]
pub struct SampleRecord {
    pub person: ImageField,
    pub clothes: ImageField,
    pub clothes_mask: MaskField,
    pub pose: PoseMap,
    pub parse: SegMap,
    pub agnostic_image: ImageField,
    pub agnostic_parse: SegMap,
    pub pair_id: String,
}

impl SampleRecord {
    pub fn hw(&self) -> (usize, usize) {
        self.person.hw()
    }

    /// All fields must agree on H and W; the agnostic parse must be one-hot.
    pub fn validate(&self) -> Result<(), FieldError> {
        let hw = self.person.hw();
        for (name, got) in [
            ("clothes", self.clothes.hw()),
            ("clothes_mask", self.clothes_mask.hw()),
            ("pose", self.pose.hw()),
            ("parse", self.parse.hw()),
            ("agnostic_image", self.agnostic_image.hw()),
            ("agnostic_parse", self.agnostic_parse.hw()),
        ] {
            if got != hw {
                return Err(FieldError::Shape {
                    expected: format!("{name} at {hw:?}"),
                    got: vec![got.0, got.1],
                });
            }
        }
        self.parse.check_one_hot()?;
        self.agnostic_parse.check_one_hot()?;
        Ok(())
    }
}
