use crate::error::{Error, Result};
use crate::volume::SliceImage;

/// Dense `N × C × H × W` batch, row-major with `W` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor4 {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(Error::shape(format!(
                "tensor data length {} does not match {n}x{c}x{h}x{w}",
                data.len()
            )));
        }
        Ok(Tensor4 { n, c, h, w, data })
    }

    /// Stack equally sized slices into a batch.
    pub fn from_slices(slices: &[&SliceImage]) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| Error::shape("cannot build a batch from no slices"))?;
        let (c, h, w) = (first.channels, first.height, first.width);
        let mut data = Vec::with_capacity(slices.len() * c * h * w);
        for s in slices {
            if (s.channels, s.height, s.width) != (c, h, w) {
                return Err(Error::shape("slices in a batch must share their shape"));
            }
            data.extend_from_slice(&s.data);
        }
        Ok(Tensor4 {
            n: slices.len(),
            c,
            h,
            w,
            data,
        })
    }

    pub fn item_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn item(&self, i: usize) -> &[f64] {
        let l = self.item_len();
        &self.data[i * l..(i + 1) * l]
    }

    pub fn item_mut(&mut self, i: usize) -> &mut [f64] {
        let l = self.item_len();
        &mut self.data[i * l..(i + 1) * l]
    }

    pub fn to_slice(&self, i: usize) -> SliceImage {
        SliceImage {
            width: self.w,
            height: self.h,
            channels: self.c,
            data: self.item(i).to_vec(),
            norm_range: None,
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub(crate) fn same_shape(&self, other: &Tensor4) -> bool {
        self.shape() == other.shape()
    }
}
