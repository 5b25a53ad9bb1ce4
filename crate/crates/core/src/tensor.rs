//! Dense row-major `f64` tensors and the `CAVT` file format.
//!
//! Tensors are plain data carriers; differentiation happens on the
//! [`Tape`](crate::graph::Tape), which stores one tensor per node. A tensor
//! may carry an optional gradient buffer of the same shape — parameter
//! tensors receive theirs after a backward pass.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};

/// Magic bytes of the tensor file format.
pub const CAVT_MAGIC: &[u8; 4] = b"CAVT";

/// Dense n-dimensional array of `f64` values in row-major order.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        // gradient buffers are scratch state, not part of the value
        self.shape == other.shape && self.data == other.data
    }
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if shape.is_empty() || shape.iter().any(|&e| e == 0) {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("extents must be positive, got {shape:?}"),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("shape {shape:?} implies {numel} values, got {}", data.len()),
            });
        }
        Ok(Tensor { shape, data, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], grad: None }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Tensor {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel], grad: None }
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor { shape: vec![1, 1], data: vec![value], grad: None }
    }

    /// A 1×n row vector.
    pub fn row(values: Vec<f64>) -> Tensor {
        Tensor { shape: vec![1, values.len()], data: values, grad: None }
    }

    /// Normal(0, std) initialization from a seeded stream.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut ChaCha20Rng) -> Tensor {
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        // Box-Muller on the raw uniform stream keeps the draw order stable.
        let mut i = 0;
        while i < numel {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen::<f64>();
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            data.push(r * theta.cos() * std);
            i += 1;
            if i < numel {
                data.push(r * theta.sin() * std);
                i += 1;
            }
        }
        Tensor { shape, data, grad: None }
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_2d(&self) -> bool {
        self.shape.len() == 2
    }

    /// Rows of a 2-d tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Columns of a 2-d tensor.
    pub fn cols(&self) -> usize {
        self.shape[self.shape.len() - 1]
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Option<Vec<f64>>) {
        if let Some(g) = &grad {
            debug_assert_eq!(g.len(), self.data.len());
        }
        self.grad = grad;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    /// Reinterpret as 2-d by flattening all leading axes into rows.
    pub fn as_2d(&self) -> Tensor {
        let cols = self.cols();
        let rows = self.numel() / cols;
        Tensor { shape: vec![rows, cols], data: self.data.clone(), grad: None }
    }

    pub fn write_cavt<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CAVT_MAGIC)?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &e in &self.shape {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for &v in &self.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_cavt<R: Read>(r: &mut R) -> Result<Tensor> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CAVT_MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                magic, CAVT_MAGIC
            )));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        let rank = u32::from_le_bytes(u32buf) as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Format(format!("unsupported rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut u32buf)?;
            let e = u32::from_le_bytes(u32buf) as usize;
            if e == 0 {
                return Err(Error::Format("zero extent".into()));
            }
            shape.push(e);
        }
        let numel: usize = shape.iter().product();
        let mut payload = vec![0u8; numel * 4];
        r.read_exact(&mut payload)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Ok(Tensor { shape, data, grad: None })
    }

    pub fn save_cavt<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        self.write_cavt(&mut f)
    }

    pub fn load_cavt<P: AsRef<Path>>(path: P) -> Result<Tensor> {
        let mut f = std::fs::File::open(path.as_ref()).map_err(|e| {
            Error::Format(format!("{}: {e}", path.as_ref().display()))
        })?;
        Tensor::read_cavt(&mut f)
    }
}
