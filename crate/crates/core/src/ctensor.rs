//! Rank-3 complex arrays indexed as (receive antenna, transmit antenna, frequency or delay).

use num_complex::Complex64;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexTensor3 {
    dims: [usize; 3],
    data: Vec<Complex64>,
}

impl ComplexTensor3 {
    pub fn zeros(dims: [usize; 3]) -> Self {
        Self { dims, data: vec![Complex64::new(0.0, 0.0); dims.iter().product()] }
    }

    pub fn from_vec(dims: [usize; 3], data: Vec<Complex64>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::shape("ComplexTensor3::from_vec", &dims, &[data.len()]));
        }
        Ok(Self { dims, data })
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> Complex64) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for r in 0..dims[0] {
            for t in 0..dims[1] {
                for k in 0..dims[2] {
                    data.push(f(r, t, k));
                }
            }
        }
        Self { dims, data }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Complex64> {
        self.data
    }

    #[inline]
    fn offset(&self, r: usize, t: usize, k: usize) -> usize {
        (r * self.dims[1] + t) * self.dims[2] + k
    }

    pub fn get(&self, r: usize, t: usize, k: usize) -> Complex64 {
        self.data[self.offset(r, t, k)]
    }

    pub fn set(&mut self, r: usize, t: usize, k: usize, v: Complex64) {
        let o = self.offset(r, t, k);
        self.data[o] = v;
    }

    /// The last-axis vector of one antenna pair.
    pub fn fiber(&self, r: usize, t: usize) -> &[Complex64] {
        let o = self.offset(r, t, 0);
        &self.data[o..o + self.dims[2]]
    }

    pub fn fibers(&self) -> impl Iterator<Item = &[Complex64]> {
        self.data.chunks(self.dims[2].max(1))
    }

    /// Keeps the listed positions of the last axis, in the given order.
    pub fn select_last(&self, idx: &[usize]) -> Result<Self> {
        let n = self.dims[2];
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Index { what: "last-axis selection", index: bad as i64, len: n });
        }
        let data = self.fibers().flat_map(|f| idx.iter().map(move |&i| f[i])).collect();
        Ok(Self { dims: [self.dims[0], self.dims[1], idx.len()], data })
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn scaled(&self, c: Complex64) -> Self {
        Self { dims: self.dims, data: self.data.iter().map(|z| z * c).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    /// `[Im, Re]` concatenated along the last axis.
    pub fn to_im_re(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.data.len() * 2);
        for f in self.fibers() {
            out.extend(f.iter().map(|z| z.im));
            out.extend(f.iter().map(|z| z.re));
        }
        out
    }

    /// Inverse of [`to_im_re`](Self::to_im_re).
    pub fn from_im_re(dims: [usize; 3], v: &[f64]) -> Result<Self> {
        let n = dims[2];
        if v.len() != dims.iter().product::<usize>() * 2 {
            return Err(Error::shape("ComplexTensor3::from_im_re", &dims, &[v.len()]));
        }
        let data = v
            .chunks(2 * n.max(1))
            .flat_map(|c| (0..n).map(move |k| Complex64::new(c[n + k], c[k])))
            .collect();
        Ok(Self { dims, data })
    }
}
