//! Dataset ingestion, the clothing-agnostic construction, and on-disk layout.
//!
//! Directory layout: `root/{person,cloth,cloth_mask,parse,pose}/<name>.{png,jpg}`
//! with a whitespace-separated two-column pairs file. Parse maps are PNGs
//! whose pixel values are label ids.

pub mod synth;

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::fields::{FieldError, ImageField, MaskField, PoseMap, SampleRecord, SegMap};
use crate::kernels;
use crate::palette::LabelPalette;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("failed to decode {path}: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("{path}: label id {id} not present in the {num}-label palette")]
    UnknownLabel { path: PathBuf, id: usize, num: usize },
    #[error("pairs file line {line}: expected 'person cloth', got {got:?}")]
    BadPairLine { line: usize, got: String },
    #[error("field invariant violated for {path}: {source}")]
    Field { path: PathBuf, source: FieldError },
}

/// Replace clothing and adjacent body-part pixels with neutral gray and
/// relabel them to the dedicated agnostic label. Pixels outside that set are
/// untouched, which makes the operation idempotent.
pub fn make_agnostic(
    person: &ImageField,
    parse: &SegMap,
    palette: &LabelPalette,
) -> (ImageField, SegMap) {
    let (c, h, w) = parse.data.chw();
    let n = h * w;
    let labels = parse.to_labels();
    let mut img = person.data.clone();
    let mut seg = parse.data.clone();
    let agn = palette.agnostic_channel;
    for p in 0..n {
        let l = labels[p] as usize;
        if l == palette.clothing_channel || palette.body_part_channels.contains(&l) {
            for ch in 0..3 {
                img.data_mut()[ch * n + p] = 0.0;
            }
            for ch in 0..c {
                seg.data_mut()[ch * n + p] = if ch == agn { 1.0 } else { 0.0 };
            }
        }
    }
    (
        ImageField::new(img).expect("agnostic image"),
        SegMap::new(seg, palette.clone()).expect("agnostic parse"),
    )
}

fn rgb8_to_field(px: &[u8], h: usize, w: usize) -> Tensor<f32> {
    let n = h * w;
    let mut t = Tensor::zeros(&[3, h, w]);
    for p in 0..n {
        for ch in 0..3 {
            t.data_mut()[ch * n + p] = px[p * 3 + ch] as f32 / 255.0 * 2.0 - 1.0;
        }
    }
    t
}

fn field_to_rgb8(t: &Tensor<f32>) -> Vec<u8> {
    let (c, h, w) = t.chw();
    assert_eq!(c, 3);
    let n = h * w;
    let mut out = vec![0u8; n * 3];
    for p in 0..n {
        for ch in 0..3 {
            let v = ((t.data()[ch * n + p] + 1.0) / 2.0).clamp(0.0, 1.0);
            out[p * 3 + ch] = (v * 255.0).round() as u8;
        }
    }
    out
}

fn load_rgb(path: &Path, res: (usize, usize)) -> Result<Tensor<f32>, DataError> {
    if !path.exists() {
        return Err(DataError::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path)
        .map_err(|e| DataError::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let t = rgb8_to_field(img.as_raw(), h, w);
    let (oh, ow) = res;
    if (h, w) == (oh, ow) {
        return Ok(t);
    }
    let resized = kernels::bicubic_resize(t.data(), 3, h, w, oh, ow);
    let mut t = Tensor::from_vec(&[3, oh, ow], resized);
    for v in t.data_mut() {
        *v = v.clamp(-1.0, 1.0);
    }
    Ok(t)
}

fn load_mask(path: &Path, res: (usize, usize)) -> Result<MaskField, DataError> {
    if !path.exists() {
        return Err(DataError::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path)
        .map_err(|e| DataError::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let f: Vec<f32> = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    let (oh, ow) = res;
    let resized = if (h, w) == (oh, ow) {
        f
    } else {
        kernels::bicubic_resize(&f, 1, h, w, oh, ow)
    };
    // binary on disk stays binary after resize
    let bin: Vec<f32> = resized
        .into_iter()
        .map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
        .collect();
    MaskField::new(Tensor::from_vec(&[1, oh, ow], bin)).map_err(|e| DataError::Field {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Read a parse PNG as raw label ids (indexed or grayscale, 8-bit).
fn load_parse(
    path: &Path,
    res: (usize, usize),
    palette: &LabelPalette,
) -> Result<SegMap, DataError> {
    if !path.exists() {
        return Err(DataError::MissingFile(path.to_path_buf()));
    }
    let file = std::fs::File::open(path).map_err(|e| DataError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| DataError::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(|e| DataError::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let (w, h) = (info.width as usize, info.height as usize);
    if info.bit_depth != png::BitDepth::Eight {
        return Err(DataError::Decode {
            path: path.to_path_buf(),
            message: format!("parse map must be 8-bit, got {:?}", info.bit_depth),
        });
    }
    let ids: Vec<u8> = match info.color_type {
        png::ColorType::Indexed | png::ColorType::Grayscale => buf[..w * h].to_vec(),
        other => {
            return Err(DataError::Decode {
                path: path.to_path_buf(),
                message: format!("parse map must be indexed or grayscale, got {other:?}"),
            })
        }
    };
    let (oh, ow) = res;
    let ids = if (h, w) == (oh, ow) {
        ids
    } else {
        kernels::nearest_resize_u8(&ids, h, w, oh, ow)
    };
    SegMap::from_labels(&ids, oh, ow, palette).map_err(|e| match e {
        FieldError::UnknownLabel { id, num } => DataError::UnknownLabel {
            path: path.to_path_buf(),
            id,
            num,
        },
        other => DataError::Field {
            path: path.to_path_buf(),
            source: other,
        },
    })
}

fn with_png_ext(name: &str) -> String {
    match name.rsplit_once('.') {
        Some((stem, _)) => format!("{stem}.png"),
        None => format!("{name}.png"),
    }
}

fn find_named(dir: &Path, name: &str) -> PathBuf {
    let direct = dir.join(name);
    if direct.exists() {
        return direct;
    }
    dir.join(with_png_ext(name))
}

/// Parse the two-column pairs file.
pub fn read_pairs(path: &Path) -> Result<Vec<(String, String)>, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| DataError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        match (it.next(), it.next()) {
            (Some(a), Some(b)) => pairs.push((a.to_string(), b.to_string())),
            _ => {
                return Err(DataError::BadPairLine {
                    line: i + 1,
                    got: line.to_string(),
                })
            }
        }
    }
    Ok(pairs)
}

fn load_record(
    root: &Path,
    person_name: &str,
    cloth_name: &str,
    palette: &LabelPalette,
    res: (usize, usize),
) -> Result<SampleRecord, DataError> {
    let person = ImageField::new(load_rgb(&find_named(&root.join("person"), person_name), res)?)
        .expect("rgb loader output is a valid image field");
    let clothes = ImageField::new(load_rgb(&find_named(&root.join("cloth"), cloth_name), res)?)
        .expect("rgb loader output is a valid image field");
    let clothes_mask = load_mask(&find_named(&root.join("cloth_mask"), cloth_name), res)?;
    let parse = load_parse(
        &root.join("parse").join(with_png_ext(person_name)),
        res,
        palette,
    )?;
    let pose = PoseMap::new(load_rgb(&find_named(&root.join("pose"), person_name), res)?)
        .expect("rgb loader output is a valid pose map");
    let (agnostic_image, agnostic_parse) = make_agnostic(&person, &parse, palette);
    Ok(SampleRecord {
        person,
        clothes,
        clothes_mask,
        pose,
        parse,
        agnostic_image,
        agnostic_parse,
        pair_id: format!("{person_name} {cloth_name}"),
    })
}

/// Load every pair, yielding per-record results in pairs-file order.
/// Records are fetched concurrently; ordering is restored on collection.
pub fn load_dataset(
    root: &Path,
    pairs_file: &Path,
    palette: &LabelPalette,
    resolution: (usize, usize),
) -> Result<Vec<Result<SampleRecord, DataError>>, DataError> {
    let pairs = read_pairs(pairs_file)?;
    Ok(pairs
        .par_iter()
        .map(|(p, c)| load_record(root, p, c, palette, resolution))
        .collect())
}

/// Write records to the on-disk layout (used by `make-synth`).
pub fn save_dataset(
    records: &[SampleRecord],
    root: &Path,
    palette: &LabelPalette,
) -> Result<PathBuf, DataError> {
    for sub in ["person", "cloth", "cloth_mask", "parse", "pose"] {
        std::fs::create_dir_all(root.join(sub)).map_err(|e| DataError::Io {
            path: root.join(sub),
            source: e,
        })?;
    }
    let mut pairs = String::new();
    for (i, rec) in records.iter().enumerate() {
        let name = format!("{i:05}.png");
        let (h, w) = rec.person.hw();
        save_rgb(&root.join("person").join(&name), &rec.person.data)?;
        save_rgb(&root.join("cloth").join(&name), &rec.clothes.data)?;
        save_gray(
            &root.join("cloth_mask").join(&name),
            rec.clothes_mask.data.data(),
            h,
            w,
        )?;
        save_parse_png(
            &root.join("parse").join(&name),
            &rec.parse.to_labels(),
            h,
            w,
            palette,
        )?;
        save_rgb(&root.join("pose").join(&name), &rec.pose.data)?;
        pairs.push_str(&format!("{name} {name}\n"));
    }
    let pairs_path = root.join("pairs.txt");
    std::fs::write(&pairs_path, pairs).map_err(|e| DataError::Io {
        path: pairs_path.clone(),
        source: e,
    })?;
    std::fs::write(root.join("palette.txt"), palette.to_config()).map_err(|e| DataError::Io {
        path: root.join("palette.txt"),
        source: e,
    })?;
    Ok(pairs_path)
}

pub fn save_rgb(path: &Path, t: &Tensor<f32>) -> Result<(), DataError> {
    let (_, h, w) = t.chw();
    let raw = field_to_rgb8(t);
    image::RgbImage::from_raw(w as u32, h as u32, raw)
        .expect("buffer size matches")
        .save(path)
        .map_err(|e| DataError::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

fn save_gray(path: &Path, data: &[f32], h: usize, w: usize) -> Result<(), DataError> {
    let raw: Vec<u8> = data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    image::GrayImage::from_raw(w as u32, h as u32, raw)
        .expect("buffer size matches")
        .save(path)
        .map_err(|e| DataError::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

/// Indexed PNG whose pixel values are the label ids; the embedded palette
/// is only for viewing.
fn save_parse_png(
    path: &Path,
    labels: &[u8],
    h: usize,
    w: usize,
    palette: &LabelPalette,
) -> Result<(), DataError> {
    let file = std::fs::File::create(path).map_err(|e| DataError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    let mut plte = Vec::with_capacity(palette.num_channels() * 3);
    for (id, _) in palette.labels() {
        plte.extend_from_slice(&palette.display_color(*id));
    }
    enc.set_palette(plte);
    let mut writer = enc.write_header().map_err(|e| DataError::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    writer
        .write_image_data(labels)
        .map_err(|e| DataError::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::ImageField;

    fn palette() -> LabelPalette {
        LabelPalette::default_tryon()
    }

    #[test]
    fn agnostic_identity_when_no_clothing_or_body() {
        let p = palette();
        let (h, w) = (4, 4);
        // everything background or bottom
        let labels: Vec<u8> = (0..16).map(|i| if i % 2 == 0 { 0 } else { 3 }).collect();
        let parse = SegMap::from_labels(&labels, h, w, &p).unwrap();
        let person = ImageField::new(Tensor::full(&[3, h, w], 0.5)).unwrap();
        let (ia, sa) = make_agnostic(&person, &parse, &p);
        assert_eq!(ia.data, person.data);
        assert_eq!(sa.data, parse.data);
    }

    #[test]
    fn agnostic_saturates_on_all_clothing() {
        let p = palette();
        let labels = vec![2u8; 12];
        let parse = SegMap::from_labels(&labels, 3, 4, &p).unwrap();
        let person = ImageField::new(Tensor::full(&[3, 3, 4], -0.3)).unwrap();
        let (ia, sa) = make_agnostic(&person, &parse, &p);
        assert!(ia.data.data().iter().all(|&v| v == 0.0));
        assert!(sa.to_labels().iter().all(|&l| l == p.agnostic_channel as u8));
    }

    #[test]
    fn agnostic_gray_pixel_count_matches_block() {
        let p = palette();
        let (h, w) = (16, 16);
        let mut labels = vec![0u8; h * w];
        for y in 3..13 {
            for x in 2..12 {
                labels[y * w + x] = 2; // 10x10 clothing block
            }
        }
        let parse = SegMap::from_labels(&labels, h, w, &p).unwrap();
        let person = ImageField::new(Tensor::full(&[3, h, w], 0.7)).unwrap();
        let (ia, _) = make_agnostic(&person, &parse, &p);
        let n = h * w;
        let gray = (0..n)
            .filter(|&pix| (0..3).all(|c| ia.data.data()[c * n + pix] == 0.0))
            .count();
        assert_eq!(gray, 100);
    }

    #[test]
    fn agnostic_is_idempotent() {
        let p = palette();
        let recs = synth::generate_synthetic_dataset(3, 2, (32, 32), &p);
        for rec in recs {
            let (i1, s1) = make_agnostic(&rec.person, &rec.parse, &p);
            let (i2, s2) = make_agnostic(&i1, &s1, &p);
            assert_eq!(i1.data, i2.data);
            assert_eq!(s1.data, s2.data);
        }
    }

    #[test]
    fn dataset_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = palette();
        let recs = synth::generate_synthetic_dataset(7, 4, (32, 32), &p);
        let pairs = save_dataset(&recs, dir.path(), &p).unwrap();

        let loaded = load_dataset(dir.path(), &pairs, &p, (32, 32)).unwrap();
        assert_eq!(loaded.len(), 4);
        for r in &loaded {
            let rec = r.as_ref().unwrap();
            rec.validate().unwrap();
        }
        // parse maps round-trip exactly (ids, not colors)
        for (orig, got) in recs.iter().zip(&loaded) {
            assert_eq!(
                orig.parse.to_labels(),
                got.as_ref().unwrap().parse.to_labels()
            );
        }

        // removing one cloth image yields 3 records + 1 error naming the path
        std::fs::remove_file(dir.path().join("cloth/00002.png")).unwrap();
        let loaded = load_dataset(dir.path(), &pairs, &p, (32, 32)).unwrap();
        let ok = loaded.iter().filter(|r| r.is_ok()).count();
        assert_eq!(ok, 3);
        let err = loaded[2].as_ref().unwrap_err();
        assert!(err.to_string().contains("00002.png"), "got: {err}");
    }

    #[test]
    fn empty_pairs_file_gives_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = dir.path().join("pairs.txt");
        std::fs::write(&pairs, "").unwrap();
        let out = load_dataset(dir.path(), &pairs, &palette(), (32, 32)).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn unknown_parse_label_names_the_id() {
        let dir = tempfile::tempdir().unwrap();
        let p = palette();
        let recs = synth::generate_synthetic_dataset(7, 1, (16, 16), &p);
        let pairs = save_dataset(&recs, dir.path(), &p).unwrap();
        // overwrite the parse with a bogus label id 99
        let labels = vec![99u8; 16 * 16];
        save_parse_png(&dir.path().join("parse/00000.png"), &labels, 16, 16, &p).unwrap();
        let out = load_dataset(dir.path(), &pairs, &p, (16, 16)).unwrap();
        match out[0].as_ref().unwrap_err() {
            DataError::UnknownLabel { id, .. } => assert_eq!(*id, 99),
            other => panic!("unexpected error {other}"),
        }
    }
}
