use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Hard `{0,1}` mask of `height × width` pixels, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

/// Pixel box `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BinaryMask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, bits: vec![false; height * width] }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::dim("BinaryMask", &[height, width], &[bits.len()]));
        }
        Ok(Self { height, width, bits })
    }

    /// Parses rows of `.`/`#` characters; handy for fixtures.
    pub fn from_ascii(rows: &[&str]) -> Self {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        let bits = rows
            .iter()
            .flat_map(|r| {
                assert_eq!(r.len(), width, "ragged mask fixture");
                r.chars().map(|c| c == '#')
            })
            .collect();
        Self { height, width, bits }
    }

    /// Thresholds logits at 0 (probability 0.5): strictly positive is set.
    pub fn from_logits(logits: &[f64], height: usize, width: usize) -> Result<Self> {
        Self::from_bits(height, width, logits.iter().map(|&v| v > 0.0).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    fn check(&self, other: &Self) {
        assert_eq!(self.dims(), other.dims(), "mask dimensions differ");
    }

    fn zip(&self, other: &Self, f: impl Fn(bool, bool) -> bool) -> Self {
        self.check(other);
        let bits = self.bits.iter().zip(&other.bits).map(|(&a, &b)| f(a, b)).collect();
        Self { height: self.height, width: self.width, bits }
    }

    pub fn and(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a && b)
    }

    pub fn or(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a || b)
    }

    /// Pixels of `self` not in `other`.
    pub fn minus(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a && !b)
    }

    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.check(other);
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    pub fn intersects(&self, other: &Self) -> bool {
        self.check(other);
        self.bits.iter().zip(&other.bits).any(|(&a, &b)| a && b)
    }

    /// Tight bounding box of the set pixels.
    pub fn bounding_box(&self) -> Option<PixelBox> {
        let mut b: Option<PixelBox> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    let bb = b.get_or_insert(PixelBox { x0: x, y0: y, x1: x + 1, y1: y + 1 });
                    bb.x0 = bb.x0.min(x);
                    bb.y0 = bb.y0.min(y);
                    bb.x1 = bb.x1.max(x + 1);
                    bb.y1 = bb.y1.max(y + 1);
                }
            }
        }
        b
    }

    pub fn from_box(height: usize, width: usize, b: Option<PixelBox>) -> Self {
        let mut m = Self::empty(height, width);
        if let Some(b) = b {
            for y in b.y0..b.y1.min(height) {
                for x in b.x0..b.x1.min(width) {
                    m.set(y, x, true);
                }
            }
        }
        m
    }

    /// `{0,1}` values as a `[H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Tensor::new(&[self.height, self.width], data).expect("non-empty mask")
    }

    /// Storage form: 0 or 255 per pixel.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect()
    }

    /// Inverse of [`BinaryMask::to_bytes`]; any other byte value is a data error.
    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        let bits = bytes
            .iter()
            .map(|&v| match v {
                0 => Ok(false),
                255 => Ok(true),
                other => Err(Error::Data(format!("mask byte {other} is neither 0 nor 255"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_bits(height, width, bits)
    }
}
