//! Parameter storage and the layers the networks are built from.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use defectgan_autograd::{grad, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named tensors owned by one network.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Wraps every parameter as a graph node: leaves when `trainable`, constants otherwise.
    pub fn bind(&self, trainable: bool) -> Bound {
        let vars = self
            .values
            .iter()
            .map(|t| if trainable { Var::leaf(t.clone()) } else { Var::constant(t.clone()) })
            .collect();
        Bound { vars }
    }

    /// SHA-256 over names, shapes and the exact bit patterns of every value.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.names.iter().zip(&self.values) {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_tensors(path, &self.names, &self.values)
    }

    /// Replaces values from a blob written by [`ParamStore::save`]; names and
    /// shapes must match this store's layout.
    pub fn load_into(&mut self, path: &Path) -> Result<()> {
        let (names, values) = read_tensors(path)?;
        if names != self.names {
            return Err(Error::Invalid(format!(
                "{}: parameter layout differs ({} stored vs {} expected)",
                path.display(),
                names.len(),
                self.names.len()
            )));
        }
        for ((name, new), old) in names.iter().zip(&values).zip(&self.values) {
            if new.shape() != old.shape() {
                return Err(Error::Shape(format!(
                    "{}: parameter '{name}' is {:?}, expected {:?}",
                    path.display(),
                    new.shape(),
                    old.shape()
                )));
            }
        }
        self.values = values;
        Ok(())
    }
}

/// A [`ParamStore`] lifted into the autograd graph for one forward pass.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// First-order gradients of a scalar with respect to every bound parameter.
    pub fn gradients(&self, output: &Var) -> Vec<Tensor> {
        grad(output, &self.vars, false).into_iter().map(|g| g.value().clone()).collect()
    }
}

const BLOB_MAGIC: &[u8; 4] = b"DGTB";
const BLOB_VERSION: u32 = 1;

/// Little-endian tensor list: magic, version, count, then per tensor the
/// name, rank, dims and `f64` values.
pub fn write_tensors(path: &Path, names: &[String], values: &[Tensor]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(BLOB_MAGIC);
    buf.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    buf.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for (name, t) in names.iter().zip(values) {
        buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.ndim() as u64).to_le_bytes());
        for d in t.shape() {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_tensors(path: &Path) -> Result<(Vec<String>, Vec<Tensor>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let corrupt = |what: &str| Error::Invalid(format!("{}: corrupt tensor blob ({what})", path.display()));
    let mut r = ByteReader { bytes: &bytes, pos: 0 };
    if r.take(4).ok_or_else(|| corrupt("header"))? != BLOB_MAGIC {
        return Err(corrupt("magic"));
    }
    let version = u32::from_le_bytes(r.take(4).ok_or_else(|| corrupt("header"))?.try_into().unwrap());
    if version != BLOB_VERSION {
        return Err(corrupt(&format!("version {version}")));
    }
    let count = r.u64().ok_or_else(|| corrupt("count"))? as usize;
    let mut names = Vec::with_capacity(count);
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u64().ok_or_else(|| corrupt("name"))? as usize;
        let name = r.take(len).ok_or_else(|| corrupt("name"))?;
        names.push(String::from_utf8(name.to_vec()).map_err(|_| corrupt("name"))?);
        let rank = r.u64().ok_or_else(|| corrupt("rank"))? as usize;
        let shape: Vec<usize> = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Option<_>>()
            .ok_or_else(|| corrupt("shape"))?;
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| r.take(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())))
            .collect::<Option<_>>()
            .ok_or_else(|| corrupt("values"))?;
        values.push(Tensor::new(&shape, data));
    }
    if r.pos != bytes.len() {
        return Err(corrupt("trailing bytes"));
    }
    Ok((names, values))
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound))
}

/// 2-D convolution with `[out, in, k, k]` weights.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(rng, &[cout, cin, k, k], bound));
        let bias = bias.then(|| store.add(format!("{name}.bias"), uniform(rng, &[1, cout, 1, 1], bound)));
        Conv2d { weight, bias, stride, pad }
    }

    pub fn forward(&self, b: &Bound, x: &Var) -> Var {
        let y = x.conv2d(b.var(self.weight), self.stride, self.pad);
        match self.bias {
            Some(id) => y.add(b.var(id)),
            None => y,
        }
    }
}

/// Transposed convolution with `[in, out, k, k]` weights.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub k: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let bound = 1.0 / ((cout * k * k) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(rng, &[cin, cout, k, k], bound));
        let bias = bias.then(|| store.add(format!("{name}.bias"), uniform(rng, &[1, cout, 1, 1], bound)));
        ConvTranspose2d { weight, bias, stride, pad, k }
    }

    pub fn forward(&self, b: &Bound, x: &Var) -> Var {
        let s = x.shape();
        let out = |n: usize| (n - 1) * self.stride + self.k - 2 * self.pad;
        let y = x.conv_transpose2d(b.var(self.weight), self.stride, self.pad, (out(s[2]), out(s[3])));
        match self.bias {
            Some(id) => y.add(b.var(id)),
            None => y,
        }
    }
}

/// Per-sample, per-channel normalization over spatial positions.
pub fn instance_norm(x: &Var, eps: f64) -> Var {
    let mean = x.mean_axes_keepdim(&[2, 3]);
    let centered = x.sub(&mean);
    let var = centered.square().mean_axes_keepdim(&[2, 3]);
    centered.div(&var.add_scalar(eps).sqrt())
}

pub const IN_EPS: f64 = 1e-5;

/// Instance norm with a learned per-channel scale and shift.
#[derive(Debug, Clone)]
pub struct AffineInstanceNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl AffineInstanceNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones(&[1, channels, 1, 1]));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[1, channels, 1, 1]));
        AffineInstanceNorm { gamma, beta }
    }

    pub fn forward(&self, b: &Bound, x: &Var) -> Var {
        instance_norm(x, IN_EPS).mul(b.var(self.gamma)).add(b.var(self.beta))
    }
}

/// `x · W + b` with `[in, out]` weights on `[N, in]` inputs.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize) -> Self {
        let bound = 1.0 / (cin as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(rng, &[cin, cout], bound));
        let bias = store.add(format!("{name}.bias"), uniform(rng, &[cout], bound));
        Linear { weight, bias }
    }

    pub fn forward(&self, b: &Bound, x: &Var) -> Var {
        x.matmul(b.var(self.weight)).add(b.var(self.bias))
    }
}
