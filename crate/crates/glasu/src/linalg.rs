//! Dense f64 matrix kernel and a splittable counter-based PRNG.
//!
//! Everything downstream leans on two guarantees made here:
//!
//! * matmul accumulates each output entry over `k` in ascending order, so the
//!   result is bit-identical no matter how rows are scheduled (sequential or
//!   rayon), which in turn makes whole training trajectories reproducible;
//! * an `RngState` is a pure function of (seed, stream label), so clients can
//!   derive disjoint streams without coordinating.

/// Row-major dense matrix of f64.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length must equal rows*cols");
        debug_assert!(data.iter().all(|v| v.is_finite()), "matrix entries must be finite");
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix::from_vec(r, c, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// True iff shapes and every bit pattern agree (distinguishes 0.0 / -0.0).
    pub fn bits_eq(&self, other: &Matrix) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &v| m.max(v.abs()))
    }
}

/// Standard product with a pinned association order: every output entry is
/// accumulated over k = 0..a.cols left to right. Rows fan out over rayon only
/// past the measured crossover (~128^3 multiply-adds); below that scheduling
/// overhead dominates.
pub fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let work = a.rows * a.cols * b.cols;
    matmul_impl(a, b, cfg!(feature = "parallel") && work >= (1 << 21))
}

/// Always-sequential variant.
pub fn matmul_seq(a: &Matrix, b: &Matrix) -> Matrix {
    matmul_impl(a, b, false)
}

/// Kernel with an explicit scheduling choice; both paths accumulate each row
/// in the same order and agree bit for bit.
pub fn matmul_impl(a: &Matrix, b: &Matrix, parallel: bool) -> Matrix {
    assert_eq!(
        a.cols, b.rows,
        "matmul dimension mismatch: {}x{} * {}x{}",
        a.rows, a.cols, b.rows, b.cols
    );
    let (n, k, p) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(n, p);

    let row_kernel = |i: usize, out_row: &mut [f64]| {
        for kk in 0..k {
            let aik = a.data[i * k + kk];
            let b_row = &b.data[kk * p..(kk + 1) * p];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    };

    #[cfg(feature = "parallel")]
    if parallel {
        use rayon::prelude::*;
        out.data
            .par_chunks_mut(p)
            .enumerate()
            .for_each(|(i, row)| row_kernel(i, row));
        return out;
    }
    let _ = parallel;
    for i in 0..n {
        row_kernel(i, &mut out.data[i * p..(i + 1) * p]);
    }
    out
}

/// Row selection; output row k is a copy of `a`'s row idx[k]. Duplicates allowed.
pub fn gather_rows(a: &Matrix, idx: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(idx.len(), a.cols);
    for (k, &i) in idx.iter().enumerate() {
        assert!(i < a.rows, "gather_rows: index {} out of range for {} rows", i, a.rows);
        out.data[k * a.cols..(k + 1) * a.cols].copy_from_slice(a.row(i));
    }
    out
}

pub fn add(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!((a.rows, a.cols), (b.rows, b.cols), "add shape mismatch");
    Matrix {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    }
}

pub fn sub(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!((a.rows, a.cols), (b.rows, b.cols), "sub shape mismatch");
    Matrix {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect(),
    }
}

pub fn scale(a: &Matrix, c: f64) -> Matrix {
    a.map(|v| v * c)
}

/// Glorot-uniform init: entries uniform in ±sqrt(6/(rows+cols)).
pub fn glorot_init(rows: usize, cols: usize, rng: &mut RngState) -> Matrix {
    assert!(rows >= 1 && cols >= 1, "glorot_init needs positive dims");
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| (2.0 * rng.next_f64() - 1.0) * bound)
        .collect();
    Matrix { rows, cols, data }
}

/// Splittable counter-based PRNG (splitmix64 core).
///
/// A stream is fully determined by (seed, stream id); child streams derive a
/// new id from the parent id and a label, so clients and rounds get disjoint,
/// order-independent sequences on every platform.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    seed: u64,
    stream: u64,
    ctr: u64,
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngState {
    pub fn new(seed: u64, stream: u64) -> Self {
        RngState { seed, stream, ctr: 0 }
    }

    /// Derive a disjoint child stream from this stream and a label.
    pub fn child(&self, label: u64) -> RngState {
        let id = splitmix64(self.stream ^ splitmix64(label.wrapping_add(GOLDEN)));
        RngState::new(self.seed, id)
    }

    /// Child stream addressed by a string label (stable FNV-1a hash).
    pub fn child_named(&self, label: &str) -> RngState {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in label.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
        self.child(h)
    }

    pub fn next_u64(&mut self) -> u64 {
        let x = self
            .seed
            .wrapping_add(splitmix64(self.stream))
            .wrapping_add(self.ctr.wrapping_mul(GOLDEN));
        self.ctr += 1;
        splitmix64(x)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n) via widening multiply (no modulo bias worth
    /// caring about at 64 bits; fully deterministic).
    pub fn next_below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        (((self.next_u64() as u128) * (n as u128)) >> 64) as usize
    }

    /// Standard normal via Box-Muller.
    pub fn next_gaussian(&mut self) -> f64 {
        let u1 = loop {
            let u = self.next_f64();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Uniform sample of `k` distinct items from 0..n (partial Fisher-Yates),
    /// returned sorted ascending.
    pub fn sample_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        let k = k.min(n);
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.next_below(n - i);
            pool.swap(i, j);
        }
        let mut out = pool[..k].to_vec();
        out.sort_unstable();
        out
    }
}
