//! Dense f64 tensors in row-major layout, plus the integer label masks
//! used for segmentation targets.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A dense, row-major array of f64 values. Rank and extents are dynamic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; len] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; len] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape: shape.to_vec(), data }
    }

    /// A single-element tensor holding `value`.
    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// The value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// self += c * other, elementwise.
    pub fn add_scaled(&mut self, other: &Tensor, c: f64) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += c * b;
        }
    }

    pub fn scale_in_place(&mut self, c: f64) {
        self.data.iter_mut().for_each(|v| *v *= c);
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// C[m,n] += A[m,k] * B[k,n] (row-major); `beta` scales the existing C first.
pub(crate) fn mm_nn(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize, beta: f64) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// C[m,n] += A[m,k] * Bt[n,k]ᵀ, where `bt` is row-major [n,k].
pub(crate) fn mm_nt(c: &mut [f64], a: &[f64], bt: &[f64], m: usize, k: usize, n: usize, beta: f64) {
    assert_eq!(a.len(), m * k);
    assert_eq!(bt.len(), n * k);
    assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            bt.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// C[m,n] += At[k,m]ᵀ * B[k,n], where `at` is row-major [k,m].
pub(crate) fn mm_tn(c: &mut [f64], at: &[f64], b: &[f64], m: usize, k: usize, n: usize, beta: f64) {
    assert_eq!(at.len(), k * m);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            at.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// An H×W map of integer class labels. 0 is background everywhere in this
/// crate; binary masks are the special case with values in {0, 1}.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    h: usize,
    w: usize,
    data: Vec<u16>,
}

impl Mask {
    pub fn zeros(h: usize, w: usize) -> Self {
        Mask { h, w, data: vec![0; h * w] }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<u16>) -> Self {
        assert_eq!(h * w, data.len());
        Mask { h, w, data }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u16] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u16 {
        self.data[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u16) {
        self.data[y * self.w + x] = v;
    }

    /// Number of pixels equal to `label`.
    pub fn count(&self, label: u16) -> usize {
        self.data.iter().filter(|&&v| v == label).count()
    }

    /// Binary mask (values {0,1}) selecting pixels equal to `label`.
    pub fn binarize(&self, label: u16) -> Mask {
        Mask {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| u16::from(v == label)).collect(),
        }
    }

    /// Binary complement of a binary mask: 1 where self is 0.
    pub fn complement(&self) -> Mask {
        Mask {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| u16::from(v == 0)).collect(),
        }
    }

    /// Pixelwise union of two binary masks.
    pub fn union(&self, other: &Mask) -> Mask {
        assert_eq!((self.h, self.w), (other.h, other.w));
        Mask {
            h: self.h,
            w: self.w,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| u16::from(a != 0 || b != 0))
                .collect(),
        }
    }

    /// Keep only labels in `keep`; everything else becomes background.
    pub fn retain_labels(&self, keep: &[u16]) -> Mask {
        Mask {
            h: self.h,
            w: self.w,
            data: self
                .data
                .iter()
                .map(|&v| if v != 0 && keep.contains(&v) { v } else { 0 })
                .collect(),
        }
    }

    /// Nearest-neighbor downsampling to `oh`×`ow`. Source pixel for output
    /// (i, j) is the one containing the output pixel's center, i.e. index
    /// floor((i + 0.5) * h / oh). Requires exact divisibility.
    pub fn downsample_nearest(&self, oh: usize, ow: usize) -> Result<Mask> {
        if oh == 0 || ow == 0 || self.h % oh != 0 || self.w % ow != 0 {
            return Err(Error::Shape(format!(
                "mask {}x{} not divisible by target {}x{}",
                self.h, self.w, oh, ow
            )));
        }
        let fy = self.h / oh;
        let fx = self.w / ow;
        let mut out = Mask::zeros(oh, ow);
        for i in 0..oh {
            let sy = i * fy + fy / 2;
            for j in 0..ow {
                let sx = j * fx + fx / 2;
                out.data[i * ow + j] = self.data[sy * self.w + sx];
            }
        }
        Ok(out)
    }

    /// Nearest-neighbor upsampling by integer factor to `oh`×`ow`.
    pub fn upsample_nearest(&self, oh: usize, ow: usize) -> Result<Mask> {
        if self.h == 0 || oh % self.h != 0 || ow % self.w != 0 {
            return Err(Error::Shape(format!(
                "target {}x{} not a multiple of mask {}x{}",
                oh, ow, self.h, self.w
            )));
        }
        let fy = oh / self.h;
        let fx = ow / self.w;
        let mut out = Mask::zeros(oh, ow);
        for i in 0..oh {
            for j in 0..ow {
                out.data[i * ow + j] = self.data[(i / fy) * self.w + (j / fx)];
            }
        }
        Ok(out)
    }

    pub fn flip_horizontal(&self) -> Mask {
        let mut out = self.clone();
        for y in 0..self.h {
            for x in 0..self.w {
                out.data[y * self.w + x] = self.data[y * self.w + (self.w - 1 - x)];
            }
        }
        out
    }

    /// Labels present, excluding background.
    pub fn foreground_labels(&self) -> Vec<u16> {
        let mut labels: Vec<u16> = self.data.iter().copied().filter(|&v| v != 0).collect();
        labels.sort_unstable();
        labels.dedup();
        labels
    }
}
