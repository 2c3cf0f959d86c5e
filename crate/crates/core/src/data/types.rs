use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Intensity of a padding ("black") slice after normalization to `[-1, 1]`.
pub const PADDING_VALUE: f64 = -1.0;

/// The four acquisition modalities of an mpMRI scan, in fusion order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "FLAIR")]
    Flair,
    #[serde(rename = "T1w")]
    T1w,
    #[serde(rename = "T1wCE")]
    T1wCe,
    #[serde(rename = "T2")]
    T2,
}

impl Modality {
    pub const ALL: [Modality; 4] = [
        Modality::Flair,
        Modality::T1w,
        Modality::T1wCe,
        Modality::T2,
    ];

    pub fn index(self) -> usize {
        match self {
            Modality::Flair => 0,
            Modality::T1w => 1,
            Modality::T1wCe => 2,
            Modality::T2 => 3,
        }
    }

    /// Directory name used in the on-disk dataset layout.
    pub fn dir_name(self) -> &'static str {
        match self {
            Modality::Flair => "FLAIR",
            Modality::T1w => "T1w",
            Modality::T1wCe => "T1wCE",
            Modality::T2 => "T2",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Modality::ALL
            .into_iter()
            .find(|m| m.dir_name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidParameter(format!("unknown modality '{s}'")))
    }
}

/// Volume-level binary label. Class 1 is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Label {
    Negative,
    Positive,
}

impl Label {
    pub fn class(self) -> usize {
        match self {
            Label::Negative => 0,
            Label::Positive => 1,
        }
    }

    pub fn from_class(class: usize) -> Label {
        if class == 0 {
            Label::Negative
        } else {
            Label::Positive
        }
    }

    pub fn one_hot(self) -> [f64; 2] {
        match self {
            Label::Negative => [1.0, 0.0],
            Label::Positive => [0.0, 1.0],
        }
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            0 => Ok(Label::Negative),
            1 => Ok(Label::Positive),
            other => Err(format!("label must be 0 or 1, got {other}")),
        }
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l.class() as u8
    }
}

/// One 2-D image, stored channel-first as `(channels, height, width)`.
///
/// Raw slices have a single channel of scanner intensities. Preprocessed
/// slices carry three identical channels with values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice {
    pixels: Array3<f64>,
}

impl Slice {
    pub fn new(pixels: Array3<f64>) -> Self {
        Slice { pixels }
    }

    pub fn from_gray(gray: Array2<f64>) -> Self {
        let (h, w) = gray.dim();
        Slice {
            pixels: gray
                .into_shape_with_order((1, h, w))
                .expect("contiguous gray image"),
        }
    }

    /// A constant slice, used for padding.
    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Slice {
            pixels: Array3::from_elem((channels, height, width), value),
        }
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut Array3<f64> {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Array3<f64> {
        self.pixels
    }

    pub fn channels(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().2
    }

    /// The first channel as a 2-D view.
    pub fn gray(&self) -> ArrayView2<'_, f64> {
        self.pixels.index_axis(ndarray::Axis(0), 0)
    }

    pub fn is_constant(&self, value: f64) -> bool {
        self.pixels.iter().all(|&v| v == value)
    }
}

/// One modality's ordered slice stack.
///
/// `slices[..true_length]` are real slices in acquisition order; anything
/// after that is padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub modality: Modality,
    pub slices: Vec<Slice>,
    true_length: usize,
}

impl Volume {
    /// An unpadded volume: every slice is real.
    pub fn new(modality: Modality, slices: Vec<Slice>) -> Self {
        let true_length = slices.len();
        Volume {
            modality,
            slices,
            true_length,
        }
    }

    pub fn with_true_length(
        modality: Modality,
        slices: Vec<Slice>,
        true_length: usize,
    ) -> Result<Self> {
        if true_length == 0 || true_length > slices.len() {
            return Err(Error::InvalidLength {
                length: true_length,
                max: slices.len(),
            });
        }
        Ok(Volume {
            modality,
            slices,
            true_length,
        })
    }

    pub fn true_length(&self) -> usize {
        self.true_length
    }

    pub fn padded_length(&self) -> usize {
        self.slices.len()
    }

    pub fn real_slices(&self) -> &[Slice] {
        &self.slices[..self.true_length]
    }

    pub fn padding_slices(&self) -> &[Slice] {
        &self.slices[self.true_length..]
    }

    /// Shape of a single slice, `(channels, height, width)`; `None` when empty.
    pub fn slice_dim(&self) -> Option<(usize, usize, usize)> {
        self.slices.first().map(|s| s.pixels.dim())
    }

    pub fn same_shape(&self, other: &Volume) -> bool {
        self.slices.len() == other.slices.len()
            && self
                .slices
                .iter()
                .zip(&other.slices)
                .all(|(a, b)| a.pixels.dim() == b.pixels.dim())
    }
}

/// A four-modality bundle with one volume-level label.
#[derive(Debug, Clone, PartialEq)]
pub struct Scan {
    pub scan_id: String,
    volumes: [Volume; 4],
    pub label: Label,
}

impl Scan {
    /// `volumes` must be given in [`Modality::ALL`] order.
    pub fn new(scan_id: impl Into<String>, volumes: [Volume; 4], label: Label) -> Result<Self> {
        for (v, m) in volumes.iter().zip(Modality::ALL) {
            if v.modality != m {
                return Err(Error::InvalidParameter(format!(
                    "volume in slot {m} has modality {}",
                    v.modality
                )));
            }
        }
        Ok(Scan {
            scan_id: scan_id.into(),
            volumes,
            label,
        })
    }

    pub fn volume(&self, m: Modality) -> &Volume {
        &self.volumes[m.index()]
    }

    pub fn volume_mut(&mut self, m: Modality) -> &mut Volume {
        &mut self.volumes[m.index()]
    }

    pub fn volumes(&self) -> &[Volume; 4] {
        &self.volumes
    }

    pub fn volumes_mut(&mut self) -> &mut [Volume; 4] {
        &mut self.volumes
    }

    pub fn into_volumes(self) -> [Volume; 4] {
        self.volumes
    }

    pub fn true_lengths(&self) -> [usize; 4] {
        [0, 1, 2, 3].map(|i| self.volumes[i].true_length())
    }
}
