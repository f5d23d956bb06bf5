//! Tiled PNG panels: person, cloth, colorized segmentation, warped clothes,
//! final image — one row per record.

use std::path::Path;

use thiserror::Error;

use crate::fields::{ImageField, SampleRecord, SegMap};
use crate::harness::pipeline::InferResult;
use crate::kernels;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("emit_grid needs at least one record")]
    Empty,
    #[error("records and outputs must align: {records} records vs {outputs} outputs")]
    LengthMismatch { records: usize, outputs: usize },
    #[error("encode {0}: {1}")]
    Encode(String, String),
}

fn to_rgb(t: &Tensor<f32>, h: usize, w: usize) -> Vec<u8> {
    let (c, th, tw) = t.chw();
    assert_eq!(c, 3);
    let data = if (th, tw) != (h, w) {
        kernels::bicubic_resize(t.data(), 3, th, tw, h, w)
    } else {
        t.data().to_vec()
    };
    let n = h * w;
    let mut out = vec![0u8; n * 3];
    for p in 0..n {
        for ch in 0..3 {
            let v = ((data[ch * n + p] + 1.0) / 2.0).clamp(0.0, 1.0);
            out[p * 3 + ch] = (v * 255.0).round() as u8;
        }
    }
    out
}

fn seg_to_rgb(seg: &SegMap, h: usize, w: usize) -> Vec<u8> {
    let labels = seg.to_labels();
    let (sh, sw) = seg.hw();
    let labels = if (sh, sw) != (h, w) {
        kernels::nearest_resize_u8(&labels, sh, sw, h, w)
    } else {
        labels
    };
    let mut out = vec![0u8; h * w * 3];
    for (p, &l) in labels.iter().enumerate() {
        let c = seg.palette.display_color(l as usize);
        out[p * 3..p * 3 + 3].copy_from_slice(&c);
    }
    out
}

/// Write an n-rows x 5-columns tile image. Rejected samples render a black
/// final cell.
pub fn emit_grid(
    records: &[SampleRecord],
    outputs: &[InferResult],
    path: &Path,
) -> Result<(), GridError> {
    if records.is_empty() {
        return Err(GridError::Empty);
    }
    if records.len() != outputs.len() {
        return Err(GridError::LengthMismatch {
            records: records.len(),
            outputs: outputs.len(),
        });
    }
    let (h, w) = records[0].person.hw();
    let cols = 5usize;
    let margin = 2usize;
    let tile_w = cols * w + (cols + 1) * margin;
    let tile_h = records.len() * h + (records.len() + 1) * margin;
    let mut canvas = vec![16u8; tile_w * tile_h * 3];

    let mut blit = |cell: &[u8], row: usize, col: usize| {
        let y0 = margin + row * (h + margin);
        let x0 = margin + col * (w + margin);
        for y in 0..h {
            for x in 0..w {
                let src = (y * w + x) * 3;
                let dst = ((y0 + y) * tile_w + x0 + x) * 3;
                canvas[dst..dst + 3].copy_from_slice(&cell[src..src + 3]);
            }
        }
    };

    let black_image =
        ImageField::new(Tensor::full(&[3, h, w], -1.0)).expect("constant image field");
    for (row, (rec, out)) in records.iter().zip(outputs).enumerate() {
        blit(&to_rgb(&rec.person.data, h, w), row, 0);
        blit(&to_rgb(&rec.clothes.data, h, w), row, 1);
        blit(&seg_to_rgb(&out.cond.seg, h, w), row, 2);
        blit(&to_rgb(&out.conditions.warped_clothes.data, h, w), row, 3);
        let final_img = out.image.as_ref().unwrap_or(&black_image);
        blit(&to_rgb(&final_img.data, h, w), row, 4);
    }

    image::RgbImage::from_raw(tile_w as u32, tile_h as u32, canvas)
        .expect("canvas buffer sized")
        .save(path)
        .map_err(|e| GridError::Encode(path.display().to_string(), e.to_string()))
}
