//! The alignment model: a personalized offset adapter followed by a chain of
//! Householder reflections for each language.
//!
//! A word vector `x` with contextual vector `x̄` is calibrated as
//! `x̃ = normalize(x + σ(W x̄))` and then mapped into the shared space as
//! `x̂ = H(v_1) H(v_2) ... H(v_n) x̃`, where `H(v) = I - 2 v vᵀ` for the unit
//! vector `v = w / ‖w‖`. The raw vectors `w` are unconstrained, so every
//! parameter value yields an exactly orthogonal projection.
//!
//! Reflections are applied right to left: `H(v_n)` touches the input first.
//! Each application costs `O(d)`, so a chain costs `O(nd)` instead of the
//! `O(nd²)` of multiplying by explicit matrices.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embio::{ContextualTable, EmbeddingTable};
use crate::error::{Error, Result};

/// Smallest admissible norm for a raw reflector or a calibrated vector.
pub const EPS_V: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[serde(alias = "none")]
    Linear,
    #[default]
    Tanh,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Linear => z,
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
        }
    }

    /// Derivative at pre-activation `z`.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Sigmoid => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 - s)
            }
        }
    }

    fn code(self) -> u8 {
        match self {
            Activation::Linear => 0,
            Activation::Tanh => 1,
            Activation::Sigmoid => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Activation::Linear),
            1 => Ok(Activation::Tanh),
            2 => Ok(Activation::Sigmoid),
            other => Err(Error::Version(format!("activation code {other}"))),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" | "none" => Ok(Activation::Linear),
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }
}

/// Single-layer offset network `σ(W x̄)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    pub weight: Array2<f64>,
    pub activation: Activation,
}

/// Intermediate values of one calibration, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct CalibrationTrace {
    /// `W x̄` before the activation.
    pub pre: Array1<f64>,
    /// `‖x + σ(W x̄)‖`.
    pub raw_norm: f64,
    /// The unit-norm calibrated vector.
    pub out: Array1<f64>,
}

impl Adapter {
    pub fn zeros(dim: usize, activation: Activation) -> Self {
        Self {
            weight: Array2::zeros((dim, dim)),
            activation,
        }
    }

    pub fn dim(&self) -> usize {
        self.weight.nrows()
    }

    /// `normalize(x + σ(W x̄))`.
    pub fn calibrate(&self, x: ArrayView1<'_, f64>, x_bar: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        Ok(self.calibrate_traced(x, x_bar)?.out)
    }

    pub fn calibrate_traced(
        &self,
        x: ArrayView1<'_, f64>,
        x_bar: ArrayView1<'_, f64>,
    ) -> Result<CalibrationTrace> {
        let pre = self.weight.dot(&x_bar);
        let mut out = Array1::zeros(x.len());
        Zip::from(&mut out)
            .and(&x)
            .and(&pre)
            .for_each(|o, &xi, &p| *o = xi + self.activation.apply(p));
        let raw_norm = out.dot(&out).sqrt();
        if !(raw_norm > EPS_V) {
            return Err(Error::Numeric(format!(
                "calibrated vector norm {raw_norm:e} is degenerate"
            )));
        }
        out /= raw_norm;
        Ok(CalibrationTrace { pre, raw_norm, out })
    }
}

/// Reflect `z` about the hyperplane orthogonal to `v_raw`.
pub fn householder_reflect(v_raw: ArrayView1<'_, f64>, z: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    let norm = v_raw.dot(&v_raw).sqrt();
    if !(norm > EPS_V) {
        return Err(Error::Numeric(format!("reflector norm {norm:e} is degenerate")));
    }
    let v = &v_raw / norm;
    let mut out = z.to_owned();
    reflect_in_place(v.view(), out.as_slice_mut().expect("owned vector is contiguous"));
    Ok(out)
}

#[inline]
pub(crate) fn reflect_in_place(v: ArrayView1<'_, f64>, z: &mut [f64]) {
    let v = v.as_slice().expect("unit reflectors are stored contiguously");
    let dot: f64 = v.iter().zip(z.iter()).map(|(a, b)| a * b).sum();
    let scale = 2.0 * dot;
    for (zi, vi) in z.iter_mut().zip(v) {
        *zi -= scale * vi;
    }
}

/// Product of Householder reflections, stored as unconstrained raw vectors
/// (one per row).
#[derive(Debug, Clone, PartialEq)]
pub struct HouseholderChain {
    raw: Array2<f64>,
}

impl HouseholderChain {
    pub fn new(raw: Array2<f64>) -> Result<Self> {
        for (i, row) in raw.rows().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if !(norm > EPS_V) || !norm.is_finite() {
                return Err(Error::Numeric(format!(
                    "reflector {i} has degenerate norm {norm:e}"
                )));
            }
        }
        Ok(Self { raw })
    }

    /// `n` raw vectors with entries drawn from `N(0, 1/dim)`.
    pub fn random(n: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, (1.0 / dim as f64).sqrt()).expect("valid normal");
        let mut raw = Array2::zeros((n, dim));
        for mut row in raw.rows_mut() {
            loop {
                row.iter_mut().for_each(|v| *v = normal.sample(rng));
                if row.dot(&row).sqrt() > EPS_V {
                    break;
                }
            }
        }
        Self { raw }
    }

    pub fn len(&self) -> usize {
        self.raw.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.raw.ncols()
    }

    pub fn raw(&self) -> ArrayView2<'_, f64> {
        self.raw.view()
    }

    #[cfg(test)]
    pub(crate) fn raw_mut(&mut self) -> &mut Array2<f64> {
        &mut self.raw
    }

    /// Normalized reflectors `v_i = w_i / ‖w_i‖`, one per row, with the norms.
    pub fn unit_vectors(&self) -> (Array2<f64>, Array1<f64>) {
        let norms = self.raw.map_axis(Axis(1), |r| r.dot(&r).sqrt());
        let mut units = self.raw.clone();
        for (mut row, &n) in units.rows_mut().into_iter().zip(&norms) {
            row /= n;
        }
        (units, norms)
    }

    /// `H(v_1) ... H(v_n) z`.
    pub fn apply(&self, z: ArrayView1<'_, f64>) -> Array1<f64> {
        let (units, _) = self.unit_vectors();
        let mut out = z.to_owned();
        apply_units(units.view(), out.as_slice_mut().unwrap());
        out
    }

    /// Explicit `d × d` matrix of the chain.
    pub fn matrix(&self) -> Array2<f64> {
        let d = self.dim();
        let (units, _) = self.unit_vectors();
        // Columns of the identity pushed through the chain; stored as rows.
        let mut rows = Array2::<f64>::eye(d);
        for mut r in rows.rows_mut() {
            apply_units(units.view(), r.as_slice_mut().unwrap());
        }
        rows.reversed_axes()
    }
}

/// Apply unit reflectors in chain order: last row first.
pub(crate) fn apply_units(units: ArrayView2<'_, f64>, z: &mut [f64]) {
    for v in units.rows().into_iter().rev() {
        reflect_in_place(v, z);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Source,
    Target,
}

/// Adapters and Householder chains for both languages.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentModel {
    pub src_adapter: Adapter,
    pub tgt_adapter: Adapter,
    pub src_chain: HouseholderChain,
    pub tgt_chain: HouseholderChain,
}

impl AlignmentModel {
    /// Zero adapters and random chains of `n` reflectors per side.
    pub fn init(dim: usize, n: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        let src_chain = HouseholderChain::random(n, dim, rng);
        let tgt_chain = HouseholderChain::random(n, dim, rng);
        Self {
            src_adapter: Adapter::zeros(dim, activation),
            tgt_adapter: Adapter::zeros(dim, activation),
            src_chain,
            tgt_chain,
        }
    }

    pub fn new(
        src_adapter: Adapter,
        tgt_adapter: Adapter,
        src_chain: HouseholderChain,
        tgt_chain: HouseholderChain,
    ) -> Result<Self> {
        let d = src_adapter.dim();
        let dims = [
            src_adapter.weight.ncols(),
            tgt_adapter.dim(),
            tgt_adapter.weight.ncols(),
            src_chain.dim(),
            tgt_chain.dim(),
        ];
        if dims.iter().any(|&x| x != d) {
            return Err(Error::Shape(format!(
                "model blocks disagree on dimension: {d} vs {dims:?}"
            )));
        }
        Ok(Self {
            src_adapter,
            tgt_adapter,
            src_chain,
            tgt_chain,
        })
    }

    pub fn dim(&self) -> usize {
        self.src_adapter.dim()
    }

    pub fn adapter(&self, side: Side) -> &Adapter {
        match side {
            Side::Source => &self.src_adapter,
            Side::Target => &self.tgt_adapter,
        }
    }

    pub fn chain(&self, side: Side) -> &HouseholderChain {
        match side {
            Side::Source => &self.src_chain,
            Side::Target => &self.tgt_chain,
        }
    }

    /// Parameter blocks in fixed order: `W_s`, `W_t`, source raw reflectors,
    /// target raw reflectors.
    pub fn blocks(&self) -> [ArrayView2<'_, f64>; 4] {
        [
            self.src_adapter.weight.view(),
            self.tgt_adapter.weight.view(),
            self.src_chain.raw.view(),
            self.tgt_chain.raw.view(),
        ]
    }

    pub(crate) fn blocks_mut(&mut self) -> [&mut Array2<f64>; 4] {
        [
            &mut self.src_adapter.weight,
            &mut self.tgt_adapter.weight,
            &mut self.src_chain.raw,
            &mut self.tgt_chain.raw,
        ]
    }

    /// Map the given rows of `emb` into the shared space. Output rows are unit norm.
    pub fn forward_map(
        &self,
        side: Side,
        indices: &[usize],
        emb: &EmbeddingTable,
        ctx: &ContextualTable,
    ) -> Result<Array2<f64>> {
        if ctx.len() != emb.len() {
            return Err(Error::Shape(format!(
                "contextual table has {} rows, embeddings {}",
                ctx.len(),
                emb.len()
            )));
        }
        if emb.dim() != self.dim() {
            return Err(Error::Shape(format!(
                "embedding dim {} but model dim {}",
                emb.dim(),
                self.dim()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= emb.len()) {
            return Err(Error::Shape(format!(
                "index {bad} out of range for {} words",
                emb.len()
            )));
        }
        let adapter = self.adapter(side);
        let (units, _) = self.chain(side).unit_vectors();
        let d = self.dim();
        let mut out = Array2::zeros((indices.len(), d));
        out.axis_chunks_iter_mut(Axis(0), 64)
            .into_par_iter()
            .zip(indices.par_chunks(64))
            .try_for_each(|(mut block, idx)| -> Result<()> {
                for (mut row, &i) in block.rows_mut().into_iter().zip(idx) {
                    let mut z = adapter.calibrate(emb.row(i), ctx.row(i)).map_err(|e| {
                        Error::Numeric(format!("word {:?}: {e}", emb.words()[i]))
                    })?;
                    apply_units(units.view(), z.as_slice_mut().unwrap());
                    row.assign(&z);
                }
                Ok(())
            })?;
        Ok(out)
    }

    /// Map every word of a table.
    pub fn map_all(&self, side: Side, emb: &EmbeddingTable, ctx: &ContextualTable) -> Result<Array2<f64>> {
        let all: Vec<usize> = (0..emb.len()).collect();
        self.forward_map(side, &all, emb, ctx)
    }
}

/// Preprocessing settings stored with a checkpoint so that evaluation can
/// rebuild the same inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preprocessing {
    pub tau_src: f64,
    pub tau_tgt: f64,
    pub max_neighbors: Option<usize>,
    pub max_vocab: usize,
}

/// Checkpoint container, little-endian:
///
/// ```text
/// magic "RPCK" | version u32 = 1 | width u8 = 8 | src act u8 | tgt act u8 | reserved u8
/// d u64 | n_src u64 | n_tgt u64
/// tau_src f64 | tau_tgt f64 | max_neighbors u64 (0 = unlimited) | max_vocab u64
/// W_s (d*d f64) | W_t (d*d f64) | source reflectors (n_src*d f64) | target reflectors (n_tgt*d f64)
/// ```
///
/// Activation codes: 0 linear, 1 tanh, 2 sigmoid. Matrices are row-major.
pub fn write_checkpoint(model: &AlignmentModel, pre: &Preprocessing, mut out: impl Write) -> std::io::Result<()> {
    out.write_all(CKPT_MAGIC)?;
    out.write_all(&CKPT_VERSION.to_le_bytes())?;
    out.write_all(&[
        8,
        model.src_adapter.activation.code(),
        model.tgt_adapter.activation.code(),
        0,
    ])?;
    for v in [model.dim(), model.src_chain.len(), model.tgt_chain.len()] {
        out.write_all(&(v as u64).to_le_bytes())?;
    }
    out.write_all(&pre.tau_src.to_le_bytes())?;
    out.write_all(&pre.tau_tgt.to_le_bytes())?;
    out.write_all(&(pre.max_neighbors.unwrap_or(0) as u64).to_le_bytes())?;
    out.write_all(&(pre.max_vocab as u64).to_le_bytes())?;
    for block in model.blocks() {
        for &v in block.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

const CKPT_MAGIC: &[u8; 4] = b"RPCK";
const CKPT_VERSION: u32 = 1;

pub fn read_checkpoint(mut input: impl Read) -> Result<(AlignmentModel, Preprocessing)> {
    let mut head = [0u8; 12 + 24 + 32];
    input
        .read_exact(&mut head)
        .map_err(|_| Error::Version("truncated checkpoint header".into()))?;
    if &head[0..4] != CKPT_MAGIC {
        return Err(Error::Version("bad checkpoint magic".into()));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(Error::Version(format!("checkpoint version {version}")));
    }
    if head[8] != 8 {
        return Err(Error::Version(format!("checkpoint width {}", head[8])));
    }
    let src_act = Activation::from_code(head[9])?;
    let tgt_act = Activation::from_code(head[10])?;
    let word = |i: usize| u64::from_le_bytes(head[12 + 8 * i..20 + 8 * i].try_into().unwrap());
    let (d, n_src, n_tgt) = (word(0) as usize, word(1) as usize, word(2) as usize);
    let pre = Preprocessing {
        tau_src: f64::from_bits(word(3)),
        tau_tgt: f64::from_bits(word(4)),
        max_neighbors: match word(5) {
            0 => None,
            k => Some(k as usize),
        },
        max_vocab: word(6) as usize,
    };
    let mut rest = Vec::new();
    input
        .read_to_end(&mut rest)
        .map_err(|e| Error::io("<checkpoint>", e))?;
    let sizes = [d * d, d * d, n_src * d, n_tgt * d];
    let total: usize = sizes.iter().sum();
    if rest.len() != total * 8 {
        return Err(Error::Shape(format!(
            "checkpoint payload has {} bytes, expected {}",
            rest.len(),
            total * 8
        )));
    }
    let mut values = rest
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut take = |rows: usize| -> Array2<f64> {
        let v: Vec<f64> = values.by_ref().take(rows * d).collect();
        Array2::from_shape_vec((rows, d), v).expect("sizes checked")
    };
    let w_s = take(d);
    let w_t = take(d);
    let v_s = take(n_src);
    let u_t = take(n_tgt);
    let model = AlignmentModel::new(
        Adapter {
            weight: w_s,
            activation: src_act,
        },
        Adapter {
            weight: w_t,
            activation: tgt_act,
        },
        HouseholderChain::new(v_s)?,
        HouseholderChain::new(u_t)?,
    )?;
    Ok((model, pre))
}

pub fn save_checkpoint(model: &AlignmentModel, pre: &Preprocessing, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(model, pre, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(AlignmentModel, Preprocessing)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(file))
}
