//! Dense order-3 and order-4 coefficient tensors and the algebra used by the
//! model: mode-3 products, CP reconstruction and tube-fiber norms.
//!
//! Storage is row-major with the last index fastest, so the tube fiber
//! `B[i, j, ·]` of a [`Tensor3`] is a contiguous slice.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Order-3 tensor of shape `(n1, n2, k)`; `k` is the tube (basis) mode.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    dims: [usize; 3],
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(n1: usize, n2: usize, k: usize) -> Self {
        Self {
            dims: [n1, n2, k],
            data: vec![0.0; n1 * n2 * k],
        }
    }

    pub fn from_vec(dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        let expected = dims.iter().product::<usize>();
        if data.len() != expected {
            return shape_err(format!(
                "Tensor3 {:?} needs {} values, got {}",
                dims,
                expected,
                data.len()
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    fn offset(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.offset(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let o = self.offset(i, j, k);
        self.data[o] = v;
    }

    /// Tube fiber `B[i, j, ·]`.
    pub fn fiber(&self, i: usize, j: usize) -> &[f64] {
        let o = self.offset(i, j, 0);
        &self.data[o..o + self.dims[2]]
    }

    pub fn fiber_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let o = self.offset(i, j, 0);
        let k = self.dims[2];
        &mut self.data[o..o + k]
    }

    /// Writes `fiber` to both `(i, j)` and `(j, i)`.
    pub fn set_fiber_symmetric(&mut self, i: usize, j: usize, fiber: &[f64]) {
        self.fiber_mut(i, j).copy_from_slice(fiber);
        self.fiber_mut(j, i).copy_from_slice(fiber);
    }

    /// Frontal slice `B[·, ·, k]`.
    pub fn frontal_slice(&self, k: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.dims[0], self.dims[1], |i, j| self.get(i, j, k))
    }

    /// Exact symmetry in the first two modes.
    pub fn is_symmetric(&self) -> bool {
        self.max_asymmetry() == 0.0
    }

    pub fn max_asymmetry(&self) -> f64 {
        if self.dims[0] != self.dims[1] {
            return f64::INFINITY;
        }
        let n = self.dims[0];
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                for (a, b) in self.fiber(i, j).iter().zip(self.fiber(j, i)) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
        worst
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn distance(&self, other: &Tensor3) -> Result<f64> {
        if self.dims != other.dims {
            return shape_err(format!(
                "cannot compare {:?} with {:?}",
                self.dims, other.dims
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|v| **v != 0.0).count()
    }

    pub fn write_binary(&self, path: &Path) -> Result<()> {
        write_tensor_file(path, b"DNT3", self.dims, &self.data, self.is_symmetric())
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        let (dims, data) = read_tensor_file(path, b"DNT3")?;
        Self::from_vec(dims, data)
    }
}

/// Order-4 tensor of shape `(n, n, k, p)`, one symmetric [`Tensor3`] slice
/// per covariate.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    n: usize,
    k: usize,
    p: usize,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(n: usize, k: usize, p: usize) -> Self {
        Self {
            n,
            k,
            p,
            data: vec![0.0; n * n * k * p],
        }
    }

    pub fn from_vec(n: usize, k: usize, p: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n * k * p {
            return shape_err(format!(
                "Tensor4 ({n},{n},{k},{p}) needs {} values, got {}",
                n * n * k * p,
                data.len()
            ));
        }
        Ok(Self { n, k, p, data })
    }

    /// Stacks `p` order-3 slices of identical shape `(n, n, k)`.
    pub fn from_slices(slices: &[Tensor3], n: usize, k: usize) -> Result<Self> {
        let mut out = Self::zeros(n, k, slices.len());
        for (l, s) in slices.iter().enumerate() {
            out.set_slice(l, s)?;
        }
        Ok(out)
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.n, self.k, self.p]
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn basis_dim(&self) -> usize {
        self.k
    }

    pub fn covariates(&self) -> usize {
        self.p
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    fn offset(&self, i: usize, j: usize, k: usize, l: usize) -> usize {
        ((i * self.n + j) * self.k + k) * self.p + l
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        self.data[self.offset(i, j, k, l)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, l: usize, v: f64) {
        let o = self.offset(i, j, k, l);
        self.data[o] = v;
    }

    pub fn fiber(&self, i: usize, j: usize, l: usize) -> Vec<f64> {
        (0..self.k).map(|k| self.get(i, j, k, l)).collect()
    }

    pub fn fiber_norm(&self, i: usize, j: usize, l: usize) -> f64 {
        (0..self.k)
            .map(|k| {
                let v = self.get(i, j, k, l);
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn set_fiber(&mut self, i: usize, j: usize, l: usize, fiber: &[f64]) {
        for (k, v) in fiber.iter().enumerate() {
            self.set(i, j, k, l, *v);
        }
    }

    pub fn slice(&self, l: usize) -> Tensor3 {
        let mut out = Tensor3::zeros(self.n, self.n, self.k);
        for i in 0..self.n {
            for j in 0..self.n {
                for k in 0..self.k {
                    out.set(i, j, k, self.get(i, j, k, l));
                }
            }
        }
        out
    }

    pub fn set_slice(&mut self, l: usize, s: &Tensor3) -> Result<()> {
        if s.dims() != [self.n, self.n, self.k] || l >= self.p {
            return shape_err(format!(
                "slice {:?} at index {l} does not fit Tensor4 {:?}",
                s.dims(),
                self.dims()
            ));
        }
        for i in 0..self.n {
            for j in 0..self.n {
                for k in 0..self.k {
                    self.set(i, j, k, l, s.get(i, j, k));
                }
            }
        }
        Ok(())
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.p).all(|l| self.slice(l).is_symmetric())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|v| *v == 0.0)
    }

    pub fn write_binary(&self, path: &Path) -> Result<()> {
        // Header dims are (n, k, p); the first two modes share n.
        write_tensor_file(
            path,
            b"DNT4",
            [self.n, self.k, self.p],
            &self.data,
            self.is_symmetric(),
        )
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        let ([n, k, p], data) = read_tensor_file(path, b"DNT4")?;
        Self::from_vec(n, k, p, data)
    }
}

/// Rank-R symmetric CP factors `B0 = Σ_r w_r u1_r ∘ u1_r ∘ u3_r`.
#[derive(Debug, Clone, PartialEq)]
pub struct CpFactors {
    pub w: Vec<f64>,
    /// n × R, unit-norm columns.
    pub u1: DMatrix<f64>,
    /// K × R, unit-norm columns.
    pub u3: DMatrix<f64>,
}

impl CpFactors {
    pub fn new(w: Vec<f64>, u1: DMatrix<f64>, u3: DMatrix<f64>) -> Result<Self> {
        let f = Self { w, u1, u3 };
        f.validate()?;
        Ok(f)
    }

    /// Zero-weight factors with canonical unit columns.
    pub fn zeros(n: usize, k: usize, rank: usize) -> Self {
        let u1 = DMatrix::from_fn(n, rank, |i, r| if i == r % n { 1.0 } else { 0.0 });
        let u3 = DMatrix::from_fn(k, rank, |i, r| if i == r % k { 1.0 } else { 0.0 });
        Self {
            w: vec![0.0; rank],
            u1,
            u3,
        }
    }

    pub fn rank(&self) -> usize {
        self.w.len()
    }

    pub fn n(&self) -> usize {
        self.u1.nrows()
    }

    pub fn basis_dim(&self) -> usize {
        self.u3.nrows()
    }

    /// Checks shapes, unit columns (1e-10) and non-negative weights.
    ///
    /// A weight of exactly zero marks a frozen component; its columns still
    /// have to be unit vectors.
    pub fn validate(&self) -> Result<()> {
        let r = self.w.len();
        if self.u1.ncols() != r || self.u3.ncols() != r {
            return shape_err(format!(
                "CP factors disagree on rank: w {}, U1 {}, U3 {}",
                r,
                self.u1.ncols(),
                self.u3.ncols()
            ));
        }
        for (idx, w) in self.w.iter().enumerate() {
            if !(w.is_finite() && *w >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "weight {idx} is {w}, expected finite and non-negative"
                )));
            }
            for (name, m) in [("U1", &self.u1), ("U3", &self.u3)] {
                let norm = m.column(idx).norm();
                if (norm - 1.0).abs() > 1e-10 {
                    return Err(Error::InvalidArgument(format!(
                        "{name} column {idx} has norm {norm}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// `B ×₃ b`: contracts the tube mode against `b`.
pub fn mode3_product(b_tensor: &Tensor3, b: &[f64]) -> Result<DMatrix<f64>> {
    let [n1, n2, k] = b_tensor.dims();
    if b.len() != k {
        return shape_err(format!(
            "mode-3 product: vector of length {} against tube length {k}",
            b.len()
        ));
    }
    let mut out = DMatrix::zeros(n1, n2);
    for i in 0..n1 {
        for j in 0..n2 {
            out[(i, j)] = dot(b_tensor.fiber(i, j), b);
        }
    }
    Ok(out)
}

/// Expands CP factors into the dense symmetric `n × n × K` tensor.
pub fn cp_reconstruct(f: &CpFactors) -> Tensor3 {
    let n = f.n();
    let k = f.basis_dim();
    let mut out = Tensor3::zeros(n, n, k);
    for i in 0..n {
        for j in i..n {
            let mut fiber = vec![0.0; k];
            for r in 0..f.rank() {
                let c = f.w[r] * f.u1[(i, r)] * f.u1[(j, r)];
                if c == 0.0 {
                    continue;
                }
                for (kk, v) in fiber.iter_mut().enumerate() {
                    *v += c * f.u3[(kk, r)];
                }
            }
            out.set_fiber_symmetric(i, j, &fiber);
        }
    }
    out
}

/// Euclidean norms of every tube fiber, one `n × n` matrix per covariate.
pub fn fiber_group_norms(g: &Tensor4) -> Vec<DMatrix<f64>> {
    let n = g.n();
    (0..g.covariates())
        .map(|l| DMatrix::from_fn(n, n, |i, j| g.fiber_norm(i, j, l)))
        .collect()
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Serialize, Deserialize)]
struct TensorSidecar {
    kind: String,
    dims: Vec<usize>,
    symmetric: bool,
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    p.into()
}

fn write_tensor_file(
    path: &Path,
    magic: &[u8; 4],
    header: [usize; 3],
    data: &[f64],
    symmetric: bool,
) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + data.len() * 8);
    buf.extend_from_slice(magic);
    for d in header {
        let d = u32::try_from(d)
            .map_err(|_| Error::InvalidArgument(format!("dimension {d} exceeds u32")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))?;

    let kind = String::from_utf8_lossy(magic).into_owned();
    let dims = if magic == b"DNT4" {
        vec![header[0], header[0], header[1], header[2]]
    } else {
        header.to_vec()
    };
    let sidecar = TensorSidecar {
        kind,
        dims,
        symmetric,
    };
    let side = sidecar_path(path);
    fs::write(&side, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&side, e))?;
    Ok(())
}

fn read_tensor_file(path: &Path, magic: &[u8; 4]) -> Result<([usize; 3], Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fmt_err = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < 16 {
        return Err(fmt_err(format!(
            "header needs 16 bytes, file has {}",
            bytes.len()
        )));
    }
    if &bytes[..4] != magic {
        return Err(fmt_err(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[..4]),
            String::from_utf8_lossy(magic)
        )));
    }
    let mut header = [0usize; 3];
    for (i, h) in header.iter_mut().enumerate() {
        let raw: [u8; 4] = bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap();
        *h = u32::from_le_bytes(raw) as usize;
    }
    let count = if magic == b"DNT4" {
        header[0] * header[0] * header[1] * header[2]
    } else {
        header.iter().product()
    };
    let expected = 16 + 8 * count;
    if bytes.len() != expected {
        return Err(fmt_err(format!(
            "expected {expected} bytes for dims {header:?}, found {}",
            bytes.len()
        )));
    }
    let data = bytes[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, data))
}
