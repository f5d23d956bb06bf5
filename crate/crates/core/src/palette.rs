//! Semantic label palette for segmentation maps.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PaletteError {
    #[error("label ids must be unique and contiguous from 0, got {0:?}")]
    NonContiguousIds(Vec<usize>),
    #[error("clothing channel {0} out of range (num channels {1})")]
    ClothingOutOfRange(usize, usize),
    #[error("body part channel {0} out of range (num channels {1})")]
    BodyPartOutOfRange(usize, usize),
    #[error("clothing channel {0} cannot also be a body part channel")]
    ClothingIsBodyPart(usize),
    #[error("agnostic channel {0} out of range (num channels {1})")]
    AgnosticOutOfRange(usize, usize),
    #[error("palette config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Ordered label set plus the channel roles the pipeline needs: the clothing
/// channel, the body-part channels used for occlusion handling, and the
/// label that clothing-agnostic pixels are rewritten to.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelPalette {
    labels: Vec<(usize, String)>,
    pub clothing_channel: usize,
    pub body_part_channels: BTreeSet<usize>,
    pub agnostic_channel: usize,
}

impl LabelPalette {
    pub fn new(
        labels: Vec<(usize, String)>,
        clothing_channel: usize,
        body_part_channels: BTreeSet<usize>,
        agnostic_channel: usize,
    ) -> Result<Self, PaletteError> {
        let mut ids: Vec<usize> = labels.iter().map(|(id, _)| *id).collect();
        ids.sort_unstable();
        if ids.iter().enumerate().any(|(i, &id)| i != id) {
            return Err(PaletteError::NonContiguousIds(ids));
        }
        let n = labels.len();
        if clothing_channel >= n {
            return Err(PaletteError::ClothingOutOfRange(clothing_channel, n));
        }
        for &b in &body_part_channels {
            if b >= n {
                return Err(PaletteError::BodyPartOutOfRange(b, n));
            }
        }
        if body_part_channels.contains(&clothing_channel) {
            return Err(PaletteError::ClothingIsBodyPart(clothing_channel));
        }
        if agnostic_channel >= n {
            return Err(PaletteError::AgnosticOutOfRange(agnostic_channel, n));
        }
        Ok(Self {
            labels,
            clothing_channel,
            body_part_channels,
            agnostic_channel,
        })
    }

    /// The 7-label palette used throughout: background, face/hair,
    /// torso clothes (clothing channel), bottom, both arms, agnostic.
    pub fn default_tryon() -> Self {
        Self::new(
            vec![
                (0, "background".into()),
                (1, "face_hair".into()),
                (2, "torso_clothes".into()),
                (3, "bottom".into()),
                (4, "left_arm".into()),
                (5, "right_arm".into()),
                (6, "agnostic".into()),
            ],
            2,
            BTreeSet::from([1, 4, 5]),
            6,
        )
        .expect("default palette is valid")
    }

    pub fn num_channels(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[(usize, String)] {
        &self.labels
    }

    pub fn label_name(&self, id: usize) -> Option<&str> {
        self.labels
            .iter()
            .find(|(lid, _)| *lid == id)
            .map(|(_, n)| n.as_str())
    }

    /// Parse the flat `name = id` config format. Reserved keys:
    /// `clothing_channel`, `body_part_channels`, `agnostic_channel`.
    pub fn parse_config(text: &str) -> Result<Self, PaletteError> {
        let mut labels = Vec::new();
        let mut clothing = None;
        let mut body: Option<BTreeSet<usize>> = None;
        let mut agnostic = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| PaletteError::Config(format!("line {}: missing '='", lineno + 1)))?;
            let key = key.trim();
            let value = value.trim();
            match key {
                "clothing_channel" => {
                    clothing = Some(value.parse().map_err(|_| {
                        PaletteError::Config(format!("bad clothing_channel {value:?}"))
                    })?)
                }
                "agnostic_channel" => {
                    agnostic = Some(value.parse().map_err(|_| {
                        PaletteError::Config(format!("bad agnostic_channel {value:?}"))
                    })?)
                }
                "body_part_channels" => {
                    let set = value
                        .split(',')
                        .map(|s| s.trim().parse::<usize>())
                        .collect::<Result<BTreeSet<_>, _>>()
                        .map_err(|_| {
                            PaletteError::Config(format!("bad body_part_channels {value:?}"))
                        })?;
                    body = Some(set);
                }
                name => {
                    let id = value.parse().map_err(|_| {
                        PaletteError::Config(format!("bad id {value:?} for label {name:?}"))
                    })?;
                    labels.push((id, name.to_string()));
                }
            }
        }
        labels.sort_by_key(|(id, _)| *id);
        let clothing =
            clothing.ok_or_else(|| PaletteError::Config("missing clothing_channel".into()))?;
        let body = body.ok_or_else(|| PaletteError::Config("missing body_part_channels".into()))?;
        let agnostic = match agnostic {
            Some(a) => a,
            None => {
                labels
                    .iter()
                    .find(|(_, n)| n == "agnostic")
                    .map(|(id, _)| *id)
                    .ok_or_else(|| {
                        PaletteError::Config(
                            "missing agnostic_channel and no label named 'agnostic'".into(),
                        )
                    })?
            }
        };
        Self::new(labels, clothing, body, agnostic)
    }

    pub fn load_config(path: &Path) -> Result<Self, PaletteError> {
        Self::parse_config(&std::fs::read_to_string(path)?)
    }

    pub fn to_config(&self) -> String {
        let mut s = String::new();
        for (id, name) in &self.labels {
            let _ = writeln!(s, "{name} = {id}");
        }
        let _ = writeln!(s, "clothing_channel = {}", self.clothing_channel);
        let body: Vec<String> = self
            .body_part_channels
            .iter()
            .map(|b| b.to_string())
            .collect();
        let _ = writeln!(s, "body_part_channels = {}", body.join(","));
        let _ = writeln!(s, "agnostic_channel = {}", self.agnostic_channel);
        s
    }

    /// Display colors for grid emission, one RGB triple per label.
    pub fn display_color(&self, id: usize) -> [u8; 3] {
        const COLORS: [[u8; 3]; 10] = [
            [40, 40, 40],
            [255, 220, 170],
            [200, 60, 60],
            [60, 90, 200],
            [90, 200, 90],
            [220, 200, 60],
            [140, 140, 140],
            [200, 60, 200],
            [60, 200, 200],
            [255, 128, 0],
        ];
        COLORS[id % COLORS.len()]
    }
}
