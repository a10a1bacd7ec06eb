//! Dense row-major `f64` tensors and the kernels the layers are built on.

use std::fmt;
use std::io::{Read, Write};

use rand_distr::{Distribution, Normal};

use crate::error::{bail, Error, Result};
use crate::rng;

/// Magic prefix of the binary tensor encoding.
pub const TENSOR_MAGIC: &[u8; 8] = b"TCNDS001";

/// Upper bound on the element count accepted by the decoder (2^32 values,
/// i.e. 32 GiB of `f64`).
const MAX_DECODE_ELEMS: usize = 1 << 32;

/// A dense N-dimensional array of `f64` in row-major order.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        bail!(Shape, "tensor rank must be at least 1");
    }
    let mut n: usize = 1;
    for &d in shape {
        if d == 0 {
            bail!(Shape, "zero extent in shape {shape:?}");
        }
        n = n
            .checked_mul(d)
            .ok_or_else(|| Error::Shape(format!("shape {shape:?} overflows")))?;
    }
    Ok(n)
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n = check_shape(&shape)?;
        if n != data.len() {
            bail!(
                Shape,
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            );
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        })
    }

    pub fn filled(shape: &[usize], value: f64) -> Result<Self> {
        let mut t = Self::zeros(shape)?;
        t.data.fill(value);
        Ok(t)
    }

    /// Builds a tensor whose flat element `i` is `f(i)`.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect(),
        })
    }

    /// I.i.d. draws from N(0, std^2) on a ChaCha8 stream seeded with `seed`.
    pub fn gaussian(shape: &[usize], std: f64, seed: u64) -> Result<Self> {
        if !(std > 0.0) || !std.is_finite() {
            bail!(Param, "gaussian std must be positive and finite, got {std}");
        }
        let n = check_shape(shape)?;
        let normal = Normal::new(0.0, std).map_err(|e| Error::Param(e.to_string()))?;
        let mut rng = rng::stream(seed);
        let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Identity matrix `[n, n]`.
    pub fn eye(n: usize) -> Result<Self> {
        let mut t = Self::zeros(&[n, n])?;
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            bail!(
                Shape,
                "cannot reshape {:?} into {shape:?}",
                self.shape
            );
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    /// `c[i] = a[i] + b[i]`; shapes must be identical.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            bail!(
                Shape,
                "elementwise add of {:?} and {:?}",
                self.shape,
                other.shape
            );
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            bail!(
                Shape,
                "elementwise add of {:?} and {:?}",
                self.shape,
                other.shape
            );
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `(1/n) * sum |t[i]|`.
    pub fn mean_abs(&self) -> Result<f64> {
        if self.data.is_empty() {
            bail!(Shape, "mean_abs of an empty tensor");
        }
        let s: f64 = self.data.iter().map(|v| v.abs()).sum();
        Ok(s / self.data.len() as f64)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            bail!(
                Shape,
                "matmul of {:?} and {:?}",
                self.shape,
                other.shape
            );
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        gemm(&self.data, &other.data, &mut out, m, k, n);
        Tensor::new(vec![m, n], out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(16 + 4 * self.rank() + 8 * self.len());
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    /// Decodes exactly one tensor; trailing bytes are rejected.
    pub fn from_bytes(bytes: &[u8]) -> Result<Tensor> {
        let mut cursor = bytes;
        let t = Self::read_from(&mut cursor)?;
        if !cursor.is_empty() {
            bail!(Decode, "{} trailing bytes after tensor", cursor.len());
        }
        Ok(t)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(TENSOR_MAGIC)?;
        w.write_all(&(self.rank() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Tensor> {
        let mut magic = [0u8; 8];
        read_exact(r, &mut magic)?;
        if &magic != TENSOR_MAGIC {
            bail!(Decode, "bad tensor magic {magic:?}");
        }
        let rank = read_u32(r)? as usize;
        if rank == 0 || rank > 8 {
            bail!(Decode, "unsupported tensor rank {rank}");
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(r)? as usize);
        }
        let n = check_shape(&shape).map_err(|e| Error::Decode(e.to_string()))?;
        if n > MAX_DECODE_ELEMS {
            bail!(Decode, "tensor of {n} elements exceeds decoder limit");
        }
        // Read in bounded chunks so a lying header cannot force a huge
        // allocation before the data is actually present.
        let mut data = Vec::new();
        let mut chunk = [0u8; 8 * 512];
        let mut remaining = n;
        while remaining > 0 {
            let take = remaining.min(512);
            read_exact(r, &mut chunk[..8 * take])?;
            data.extend(
                chunk[..8 * take]
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap())),
            );
            remaining -= take;
        }
        Ok(Tensor { shape, data })
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Decode("truncated tensor".into()),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOW: usize = 8;
        write!(f, "Tensor{:?} [", self.shape)?;
        for (i, v) in self.data.iter().take(SHOW).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.data.len() > SHOW {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

/// `c[m, n] += a[m, k] * b[k, n]`, all row-major. Fixed loop order, so the
/// result does not depend on anything but the inputs.
pub(crate) fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m, n] += a[k, m]^T * b[k, n]`.
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m, n] += a[m, k] * b[n, k]^T`.
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let dot: f64 = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            c[i * n + j] += dot;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn zeros_shapes() {
        let t = Tensor::zeros(&[2, 3]).unwrap();
        assert_eq!(t.len(), 6);
        assert!(t.data().iter().all(|&v| v == 0.0));
        assert_eq!(Tensor::zeros(&[1]).unwrap().data(), &[0.0]);
        assert!(matches!(Tensor::zeros(&[2, 0]), Err(Error::Shape(_))));
        assert!(matches!(Tensor::zeros(&[]), Err(Error::Shape(_))));
    }

    #[test]
    fn gaussian_is_reproducible() {
        let a = Tensor::gaussian(&[64], 0.01, 7).unwrap();
        let b = Tensor::gaussian(&[64], 0.01, 7).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(a, Tensor::gaussian(&[64], 0.01, 8).unwrap());
    }

    #[test]
    fn gaussian_sample_statistics() {
        let t = Tensor::gaussian(&[100_000], 0.01, 3).unwrap();
        let n = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 1e-3, "mean {mean}");
        assert!((var.sqrt() - 0.01).abs() < 0.001, "std {}", var.sqrt());
    }

    #[test]
    fn gaussian_rejects_bad_std() {
        assert!(matches!(Tensor::gaussian(&[4], 0.0, 1), Err(Error::Param(_))));
        assert!(matches!(Tensor::gaussian(&[4], -1.0, 1), Err(Error::Param(_))));
    }

    #[test]
    fn matmul_cases() {
        let b = Tensor::new(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(Tensor::eye(3).unwrap().matmul(&b).unwrap(), b);

        let a = Tensor::new(vec![2, 3], vec![1., -2., 3., 0., 4., -1.]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), naive_matmul(a.data(), b.data(), 2, 3, 2).as_slice());

        let bad = Tensor::zeros(&[2, 3]).unwrap();
        assert!(matches!(a.matmul(&bad), Err(Error::Shape(_))));
    }

    #[test]
    fn add_cases() {
        let a = Tensor::new(vec![2], vec![1., 2.]).unwrap();
        let b = Tensor::new(vec![2], vec![3., 4.]).unwrap();
        assert_eq!(a.add(&b).unwrap().data(), &[4., 6.]);
        assert_eq!(a.add(&Tensor::zeros(&[2]).unwrap()).unwrap(), a);
        let x = Tensor::zeros(&[1, 256, 8, 8]).unwrap();
        let y = Tensor::zeros(&[1, 128, 8, 8]).unwrap();
        assert!(matches!(x.add(&y), Err(Error::Shape(_))));
    }

    #[test]
    fn mean_abs_cases() {
        let t = Tensor::new(vec![2], vec![-2., 2.]).unwrap();
        assert_eq!(t.mean_abs().unwrap(), 2.0);
        assert_eq!(Tensor::zeros(&[5]).unwrap().mean_abs().unwrap(), 0.0);
        let small = Tensor::new(vec![2], vec![1e-8, 3e-8]).unwrap();
        assert!((small.mean_abs().unwrap() - 2e-8).abs() < 1e-22);
    }

    #[test]
    fn decode_rejects_garbage() {
        assert!(Tensor::from_bytes(b"").is_err());
        assert!(Tensor::from_bytes(b"TCNDS002\x01\0\0\0\x01\0\0\0").is_err());
        let mut bytes = Tensor::zeros(&[3]).unwrap().to_bytes();
        bytes.pop();
        assert!(matches!(Tensor::from_bytes(&bytes), Err(Error::Decode(_))));
        // header claims 2^31 elements but carries none
        let mut lying = TENSOR_MAGIC.to_vec();
        lying.extend(1u32.to_le_bytes());
        lying.extend((1u32 << 31).to_le_bytes());
        assert!(matches!(Tensor::from_bytes(&lying), Err(Error::Decode(_))));
    }

    #[test]
    fn encoding_layout() {
        let t = Tensor::new(vec![1, 2], vec![1.5, -0.25]).unwrap();
        let bytes = t.to_bytes();
        assert_eq!(&bytes[..8], b"TCNDS001");
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &1u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &2u32.to_le_bytes());
        assert_eq!(&bytes[20..28], &1.5f64.to_le_bytes());
        assert_eq!(bytes.len(), 36);
    }

    proptest! {
        #[test]
        fn add_commutes(v in prop::collection::vec(-1e6f64..1e6, 1..64)) {
            let n = v.len();
            let a = Tensor::new(vec![n], v.clone()).unwrap();
            let b = Tensor::new(vec![n], v.iter().rev().map(|x| x * 0.5 - 3.0).collect()).unwrap();
            prop_assert_eq!(a.add(&b).unwrap(), b.add(&a).unwrap());
        }

        #[test]
        fn matmul_matches_triple_loop(m in 1usize..=8, k in 1usize..=8, n in 1usize..=8, seed in any::<u64>()) {
            let a = Tensor::gaussian(&[m, k], 1.0, seed).unwrap();
            let b = Tensor::gaussian(&[k, n], 1.0, seed ^ 1).unwrap();
            let c = a.matmul(&b).unwrap();
            let oracle = naive_matmul(a.data(), b.data(), m, k, n);
            for (x, y) in c.data().iter().zip(&oracle) {
                let denom = y.abs().max(1e-300);
                prop_assert!((x - y).abs() / denom < 1e-12 || (x - y).abs() < 1e-14);
            }
        }

        #[test]
        fn mean_abs_sign_invariant(v in prop::collection::vec(-1e3f64..1e3, 1..64)) {
            let t = Tensor::new(vec![v.len()], v).unwrap();
            prop_assert_eq!(t.mean_abs().unwrap(), t.scale(-1.0).mean_abs().unwrap());
        }

        #[test]
        fn encoding_round_trips(shape in prop::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
            let t = Tensor::gaussian(&shape, 1.0, seed).unwrap();
            prop_assert_eq!(Tensor::from_bytes(&t.to_bytes()).unwrap(), t);
        }
    }
}
