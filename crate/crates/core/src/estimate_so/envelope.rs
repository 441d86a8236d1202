//! Envelope (skyline) Cholesky factorisation `A = L L^T`.
//!
//! Row `i` of `L` is stored contiguously from its first structural non-zero
//! column `first[i]` up to the diagonal. The factorisation is row oriented, so
//! a leading block of rows depends only on the leading block of `A`; this is
//! what allows a factor to be recomputed from a given row onwards.

use std::ops::Range;

#[derive(Clone, Debug)]
pub(crate) struct Envelope {
    first: Vec<usize>,
    start: Vec<usize>,
    /// `work[i]`: multiply-adds needed to factor rows `i..n`.
    work: Vec<f64>,
}

impl Envelope {
    /// `first[i] <= i` is the first column of row `i`.
    pub(crate) fn new(first: Vec<usize>) -> Self {
        let n = first.len();
        let mut start = Vec::with_capacity(n + 1);
        let mut acc = 0;
        for (i, &f) in first.iter().enumerate() {
            debug_assert!(f <= i);
            start.push(acc);
            acc += i - f + 1;
        }
        start.push(acc);
        let mut work = vec![0.0; n + 1];
        for i in (0..n).rev() {
            let fi = first[i];
            let row: usize = (fi..i).map(|j| j - fi.max(first[j])).sum::<usize>() + (i - fi);
            work[i] = work[i + 1] + row as f64;
        }
        Envelope { first, start, work }
    }

    pub(crate) fn dim(&self) -> usize {
        self.first.len()
    }

    /// Number of stored entries.
    pub(crate) fn size(&self) -> usize {
        self.start[self.dim()]
    }

    #[cfg(test)]
    pub(crate) fn first(&self, i: usize) -> usize {
        self.first[i]
    }

    /// Storage range of row `i`.
    pub(crate) fn row(&self, i: usize) -> Range<usize> {
        self.start[i]..self.start[i + 1]
    }

    /// Storage index of entry `(i, j)`, `first[i] <= j <= i`.
    #[inline]
    pub(crate) fn index(&self, i: usize, j: usize) -> usize {
        self.start[i] + j - self.first[i]
    }

    /// Multiply-adds to factor rows `from..n`.
    pub(crate) fn work_from(&self, from: usize) -> f64 {
        self.work[from]
    }

    /// Overwrites rows `from..n` of `l`, which hold the lower triangle of `A`,
    /// with the factor; rows before `from` must already hold the factor.
    ///
    /// Returns the offending row when a pivot is not positive.
    pub(crate) fn factor_from(&self, l: &mut [f64], from: usize) -> Result<(), usize> {
        #[cfg(target_arch = "x86_64")]
        {
            if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
                // SAFETY: the required CPU features were detected above.
                return unsafe { self.factor_fma(l, from) };
            }
        }
        self.factor_with(l, from, dot_portable)
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2,fma")]
    unsafe fn factor_fma(&self, l: &mut [f64], from: usize) -> Result<(), usize> {
        self.factor_with(l, from, |a, b| unsafe { dot_fma(a, b) })
    }

    #[inline(always)]
    fn factor_with(&self, l: &mut [f64], from: usize, dot: impl Fn(&[f64], &[f64]) -> f64) -> Result<(), usize> {
        for i in from..self.dim() {
            let fi = self.first[i];
            let (done, rest) = l.split_at_mut(self.start[i]);
            let row = &mut rest[..self.start[i + 1] - self.start[i]];
            for j in fi..i {
                let fj = self.first[j];
                let k0 = fi.max(fj);
                let rj = &done[self.start[j]..self.start[j + 1]];
                let s = dot(&row[k0 - fi..j - fi], &rj[k0 - fj..j - fj]);
                row[j - fi] = (row[j - fi] - s) / rj[j - fj];
            }
            let d = i - fi;
            let pivot = row[d] - dot(&row[..d], &row[..d]);
            if !(pivot > 0.0 && pivot.is_finite()) {
                return Err(i);
            }
            row[d] = pivot.sqrt();
        }
        Ok(())
    }

    /// Forward substitution `L y = b` for rows `from..n` of the row-major
    /// `n x p` block `y`; earlier rows must already be solved.
    pub(crate) fn forward_from(&self, l: &[f64], y: &mut [f64], p: usize, from: usize) {
        for i in from..self.dim() {
            let fi = self.first[i];
            let row = &l[self.row(i)];
            let d = i - fi;
            let (solved, cur) = y.split_at_mut(i * p);
            let cur = &mut cur[..p];
            for (k, &lik) in row[..d].iter().enumerate() {
                let yk = &solved[(fi + k) * p..(fi + k + 1) * p];
                for c in 0..p {
                    cur[c] -= lik * yk[c];
                }
            }
            for v in cur.iter_mut() {
                *v /= row[d];
            }
        }
    }

    /// Back substitution `L^T z = y` in place.
    pub(crate) fn backward(&self, l: &[f64], y: &mut [f64], p: usize) {
        for i in (0..self.dim()).rev() {
            let fi = self.first[i];
            let row = &l[self.row(i)];
            let d = i - fi;
            let (head, cur) = y.split_at_mut(i * p);
            let cur = &mut cur[..p];
            for v in cur.iter_mut() {
                *v /= row[d];
            }
            for (k, &lik) in row[..d].iter().enumerate() {
                let yk = &mut head[(fi + k) * p..(fi + k + 1) * p];
                for c in 0..p {
                    yk[c] -= lik * cur[c];
                }
            }
        }
    }
}

#[inline]
fn dot_portable(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
#[inline]
unsafe fn dot_fma(a: &[f64], b: &[f64]) -> f64 {
    use std::arch::x86_64::*;
    let n = a.len().min(b.len());
    let (pa, pb) = (a.as_ptr(), b.as_ptr());
    let mut acc = [_mm256_setzero_pd(); 4];
    let mut i = 0;
    while i + 16 <= n {
        for (k, acc) in acc.iter_mut().enumerate() {
            let x = _mm256_loadu_pd(pa.add(i + 4 * k));
            let y = _mm256_loadu_pd(pb.add(i + 4 * k));
            *acc = _mm256_fmadd_pd(x, y, *acc);
        }
        i += 16;
    }
    while i + 4 <= n {
        acc[0] = _mm256_fmadd_pd(_mm256_loadu_pd(pa.add(i)), _mm256_loadu_pd(pb.add(i)), acc[0]);
        i += 4;
    }
    let sum = _mm256_add_pd(_mm256_add_pd(acc[0], acc[1]), _mm256_add_pd(acc[2], acc[3]));
    let mut lanes = [0.0; 4];
    _mm256_storeu_pd(lanes.as_mut_ptr(), sum);
    let mut s = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
    while i < n {
        s += a[i] * b[i];
        i += 1;
    }
    s
}
