//! Dense row-major buffers and the domain newtypes built on them.
//!
//! Every buffer is laid out as `(row, column, channel)` with the channel
//! index varying fastest. Scalars are `1×1×1` tensors and short parameter
//! vectors (such as a 6-DoF pose) are stored as `1×1×n`.

use std::fmt;
use std::ops::Deref;

use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub const SCALAR: Shape = Shape {
        height: 1,
        width: 1,
        channels: 1,
    };

    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    /// Single-channel `height × width` shape.
    pub const fn plane(height: usize, width: usize) -> Self {
        Self::new(height, width, 1)
    }

    /// A `1×1×n` parameter vector.
    pub const fn vector(n: usize) -> Self {
        Self::new(1, 1, n)
    }

    pub const fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub const fn with_channels(&self, channels: usize) -> Self {
        Self::new(self.height, self.width, channels)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return invalid(format!(
                "buffer of length {} does not match shape {shape}",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::filled(Shape::SCALAR, value)
    }

    pub fn vector(values: &[f64]) -> Self {
        Self {
            shape: Shape::vector(values.len()),
            data: values.to_vec(),
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for y in 0..shape.height {
            for x in 0..shape.width {
                for c in 0..shape.channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.shape.width + x) * self.shape.channels + c
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, value: f64) {
        let i = self.index(y, x, c);
        self.data[i] = value;
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Extracts one channel as a single-channel tensor.
    pub fn channel(&self, c: usize) -> Self {
        let s = self.shape;
        Self::from_fn(Shape::plane(s.height, s.width), |y, x, _| self.at(y, x, c))
    }

    /// Rows `y0..y1` and columns `x0..x1`, all channels.
    pub fn crop(&self, y0: usize, y1: usize, x0: usize, x1: usize) -> Self {
        let c = self.shape.channels;
        Self::from_fn(Shape::new(y1 - y0, x1 - x0, c), |y, x, ch| {
            self.at(y + y0, x + x0, ch)
        })
    }
}

/// An `H×W×C` image with intensities normalized to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image(Tensor);

impl Image {
    pub fn new(tensor: Tensor) -> Result<Self> {
        let s = tensor.shape();
        if s.height < 3 || s.width < 3 {
            return invalid(format!("image {s} is smaller than 3x3"));
        }
        if s.channels != 1 && s.channels != 3 {
            return invalid(format!("image must have 1 or 3 channels, got {}", s.channels));
        }
        if let Some(v) = tensor
            .data()
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return invalid(format!("image intensity {v} outside [0, 1]"));
        }
        Ok(Self(tensor))
    }

    /// Converts 8-bit gray values to the normalized range.
    pub fn from_u8(shape: Shape, bytes: &[u8]) -> Result<Self> {
        let data = bytes.iter().map(|&b| f64::from(b) / 255.0).collect();
        Self::new(Tensor::from_vec(shape, data)?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.shape().height
    }

    pub fn width(&self) -> usize {
        self.0.shape().width
    }

    pub fn channels(&self) -> usize {
        self.0.shape().channels
    }
}

impl Deref for Image {
    type Target = Tensor;
    fn deref(&self) -> &Tensor {
        &self.0
    }
}

/// A single-channel real field (error maps, SSIM maps, logits).
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField(Tensor);

impl ScalarField {
    pub fn new(tensor: Tensor) -> Result<Self> {
        if tensor.shape().channels != 1 {
            return invalid(format!("scalar field must be single-channel, got {}", tensor.shape()));
        }
        if !tensor.all_finite() {
            return invalid("scalar field contains non-finite values");
        }
        Ok(Self(tensor))
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self(Tensor::filled(Shape::plane(height, width), value))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

impl Deref for ScalarField {
    type Target = Tensor;
    fn deref(&self) -> &Tensor {
        &self.0
    }
}

/// Per-pixel metric depth, strictly positive.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap(Tensor);

impl DepthMap {
    pub fn new(tensor: Tensor) -> Result<Self> {
        if tensor.shape().channels != 1 {
            return invalid(format!("depth map must be single-channel, got {}", tensor.shape()));
        }
        if let Some(v) = tensor.data().iter().find(|v| !v.is_finite() || **v <= 0.0) {
            return invalid(format!("depth value {v} is not positive and finite"));
        }
        Ok(Self(tensor))
    }

    pub fn constant(height: usize, width: usize, depth: f64) -> Result<Self> {
        Self::new(Tensor::filled(Shape::plane(height, width), depth))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.shape().height
    }

    pub fn width(&self) -> usize {
        self.0.shape().width
    }
}

impl Deref for DepthMap {
    type Target = Tensor;
    fn deref(&self) -> &Tensor {
        &self.0
    }
}

/// Per-pixel class IDs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegMask {
    height: usize,
    width: usize,
    ids: Vec<u8>,
}

impl SegMask {
    pub fn new(height: usize, width: usize, ids: Vec<u8>) -> Result<Self> {
        if ids.len() != height * width {
            return invalid(format!(
                "segmentation buffer of length {} does not match {height}x{width}",
                ids.len()
            ));
        }
        Ok(Self { height, width, ids })
    }

    pub fn filled(height: usize, width: usize, id: u8) -> Self {
        Self {
            height,
            width,
            ids: vec![id; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn ids(&self) -> &[u8] {
        &self.ids
    }

    pub fn ids_mut(&mut self) -> &mut [u8] {
        &mut self.ids
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.ids[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, id: u8) {
        self.ids[y * self.width + x] = id;
    }

    pub fn same_size(&self, height: usize, width: usize) -> bool {
        self.height == height && self.width == width
    }
}

/// A binary per-pixel field; used for the DC mask, auto-mask and validity masks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return invalid(format!(
                "mask buffer of length {} does not match {height}x{width}",
                bits.len()
            ));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            bits: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask> {
        if self.height != other.height || self.width != other.width {
            return invalid("mask sizes differ");
        }
        Ok(Self {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a && *b).collect(),
        })
    }

    pub fn not(&self) -> BinaryMask {
        Self {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    /// 0/1 single-channel tensor.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Tensor::from_vec(Shape::plane(self.height, self.width), data)
            .expect("mask shape is consistent")
    }
}

/// The pixel lattice `u = (x, y, 1)` with `x` along the width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelGrid {
    pub height: usize,
    pub width: usize,
}

impl PixelGrid {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    #[inline]
    pub fn homogeneous(&self, y: usize, x: usize) -> [f64; 3] {
        [x as f64, y as f64, 1.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        (0..self.height).flat_map(move |y| (0..self.width).map(move |x| self.homogeneous(y, x)))
    }

    /// The identity coordinate field.
    pub fn coordinates(&self) -> CoordinateField {
        let t = Tensor::from_fn(Shape::new(self.height, self.width, 2), |y, x, c| {
            if c == 0 {
                x as f64
            } else {
                y as f64
            }
        });
        CoordinateField::new(t, vec![true; self.height * self.width])
            .expect("grid coordinates are finite")
    }
}

/// Per-pixel `(x, y)` sampling positions, possibly outside the image.
///
/// `in_view` is false for pixels whose transformed point landed at or behind
/// the camera plane; their coordinates carry no meaning.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateField {
    xy: Tensor,
    in_view: Vec<bool>,
}

impl CoordinateField {
    pub fn new(xy: Tensor, in_view: Vec<bool>) -> Result<Self> {
        let s = xy.shape();
        if s.channels != 2 {
            return invalid(format!("coordinate field needs 2 channels, got {s}"));
        }
        if in_view.len() != s.pixels() {
            return Err(Error::Invalid("in-view flags do not match the field size".into()));
        }
        if !xy.all_finite() {
            return invalid("coordinate field contains non-finite values");
        }
        Ok(Self { xy, in_view })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.xy
    }

    pub fn in_view(&self) -> &[bool] {
        &self.in_view
    }

    pub fn height(&self) -> usize {
        self.xy.shape().height
    }

    pub fn width(&self) -> usize {
        self.xy.shape().width
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> (f64, f64) {
        (self.xy.at(y, x, 0), self.xy.at(y, x, 1))
    }

    /// Adds a constant offset to every coordinate.
    pub fn shifted(&self, dx: f64, dy: f64) -> Self {
        let xy = Tensor::from_fn(self.xy.shape(), |y, x, c| {
            self.xy.at(y, x, c) + if c == 0 { dx } else { dy }
        });
        Self {
            xy,
            in_view: self.in_view.clone(),
        }
    }
}
