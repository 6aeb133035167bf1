//! LSTM and GRU cells, an optional bidirectional wrapper and a linear output
//! layer, with exact per-example gradients by backpropagation through time.

mod cell;
pub(crate) mod model;
mod store;

pub use cell::{gru_step, lstm_step};
pub use model::{backward, forward, mae_loss, predict, ForwardTape};
pub use store::{read_named_tensors, write_named_tensors};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::numeric::{RngStream, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Lstm,
    Gru,
}

/// Activation used for the candidate state (and the LSTM cell-output
/// squash). Gates are always sigmoid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative given the pre-activation and the activation output.
    #[inline]
    pub(crate) fn derivative(self, pre: f64, post: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - post * post,
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Architecture of a single-hidden-layer recurrent regressor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub cell: CellKind,
    pub bidirectional: bool,
    /// Units per direction.
    pub hidden: usize,
    /// Features per time step.
    pub input: usize,
    /// Regression outputs (one per region).
    pub output: usize,
    pub activation: Activation,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.input == 0 || self.output == 0 {
            return Err(invalid(format!(
                "hidden, input and output sizes must be >= 1 (got {}, {}, {})",
                self.hidden, self.input, self.output
            )));
        }
        Ok(())
    }

    /// Width of the dense layer's input: directions are concatenated.
    pub fn dense_inputs(&self) -> usize {
        if self.bidirectional {
            2 * self.hidden
        } else {
            self.hidden
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    pub w_xi: Tensor,
    pub w_xf: Tensor,
    pub w_xo: Tensor,
    pub w_xg: Tensor,
    pub w_hi: Tensor,
    pub w_hf: Tensor,
    pub w_ho: Tensor,
    pub w_hg: Tensor,
    pub b_i: Tensor,
    pub b_f: Tensor,
    pub b_o: Tensor,
    pub b_g: Tensor,
}

impl LstmParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        let wx = || Tensor::zeros(&[input, hidden]);
        let wh = || Tensor::zeros(&[hidden, hidden]);
        let b = || Tensor::zeros(&[hidden]);
        Self {
            w_xi: wx(),
            w_xf: wx(),
            w_xo: wx(),
            w_xg: wx(),
            w_hi: wh(),
            w_hf: wh(),
            w_ho: wh(),
            w_hg: wh(),
            b_i: b(),
            b_f: b(),
            b_o: b(),
            b_g: b(),
        }
    }

    /// `(input, hidden)` sizes, after checking all twelve tensors agree.
    pub fn dims(&self) -> Result<(usize, usize)> {
        let (d, h) = self.w_xi.dims2()?;
        for t in [&self.w_xf, &self.w_xo, &self.w_xg] {
            check_shape(t, &[d, h])?;
        }
        for t in [&self.w_hi, &self.w_hf, &self.w_ho, &self.w_hg] {
            check_shape(t, &[h, h])?;
        }
        for t in [&self.b_i, &self.b_f, &self.b_o, &self.b_g] {
            check_shape(t, &[h])?;
        }
        Ok((d, h))
    }

    fn named(&self) -> [(&'static str, &Tensor); 12] {
        [
            ("w_xi", &self.w_xi),
            ("w_xf", &self.w_xf),
            ("w_xo", &self.w_xo),
            ("w_xg", &self.w_xg),
            ("w_hi", &self.w_hi),
            ("w_hf", &self.w_hf),
            ("w_ho", &self.w_ho),
            ("w_hg", &self.w_hg),
            ("b_i", &self.b_i),
            ("b_f", &self.b_f),
            ("b_o", &self.b_o),
            ("b_g", &self.b_g),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.w_xi,
            &mut self.w_xf,
            &mut self.w_xo,
            &mut self.w_xg,
            &mut self.w_hi,
            &mut self.w_hf,
            &mut self.w_ho,
            &mut self.w_hg,
            &mut self.b_i,
            &mut self.b_f,
            &mut self.b_o,
            &mut self.b_g,
        ]
    }
}

/// GRU weights. `w_c`, `u_c` and `b_c` belong to the candidate state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruParams {
    pub w_z: Tensor,
    pub w_r: Tensor,
    pub w_c: Tensor,
    pub u_z: Tensor,
    pub u_r: Tensor,
    pub u_c: Tensor,
    pub b_z: Tensor,
    pub b_r: Tensor,
    pub b_c: Tensor,
}

impl GruParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        let wx = || Tensor::zeros(&[input, hidden]);
        let wh = || Tensor::zeros(&[hidden, hidden]);
        let b = || Tensor::zeros(&[hidden]);
        Self {
            w_z: wx(),
            w_r: wx(),
            w_c: wx(),
            u_z: wh(),
            u_r: wh(),
            u_c: wh(),
            b_z: b(),
            b_r: b(),
            b_c: b(),
        }
    }

    pub fn dims(&self) -> Result<(usize, usize)> {
        let (d, h) = self.w_z.dims2()?;
        for t in [&self.w_r, &self.w_c] {
            check_shape(t, &[d, h])?;
        }
        for t in [&self.u_z, &self.u_r, &self.u_c] {
            check_shape(t, &[h, h])?;
        }
        for t in [&self.b_z, &self.b_r, &self.b_c] {
            check_shape(t, &[h])?;
        }
        Ok((d, h))
    }

    fn named(&self) -> [(&'static str, &Tensor); 9] {
        [
            ("w_z", &self.w_z),
            ("w_r", &self.w_r),
            ("w_c", &self.w_c),
            ("u_z", &self.u_z),
            ("u_r", &self.u_r),
            ("u_c", &self.u_c),
            ("b_z", &self.b_z),
            ("b_r", &self.b_r),
            ("b_c", &self.b_c),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 9] {
        [
            &mut self.w_z,
            &mut self.w_r,
            &mut self.w_c,
            &mut self.u_z,
            &mut self.u_r,
            &mut self.u_c,
            &mut self.b_z,
            &mut self.b_r,
            &mut self.b_c,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CellParams {
    Lstm(LstmParams),
    Gru(GruParams),
}

impl CellParams {
    fn zeros(kind: CellKind, input: usize, hidden: usize) -> Self {
        match kind {
            CellKind::Lstm => CellParams::Lstm(LstmParams::zeros(input, hidden)),
            CellKind::Gru => CellParams::Gru(GruParams::zeros(input, hidden)),
        }
    }

    pub fn kind(&self) -> CellKind {
        match self {
            CellParams::Lstm(_) => CellKind::Lstm,
            CellParams::Gru(_) => CellKind::Gru,
        }
    }

    fn named(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            CellParams::Lstm(p) => p.named().to_vec(),
            CellParams::Gru(p) => p.named().to_vec(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            CellParams::Lstm(p) => p.tensors_mut().into_iter().collect(),
            CellParams::Gru(p) => p.tensors_mut().into_iter().collect(),
        }
    }
}

/// Trainable weights of a model: one cell parameter set per direction plus
/// the dense output layer (`dense_w` is `dense_inputs × output`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub forward: CellParams,
    pub backward: Option<CellParams>,
    pub dense_w: Tensor,
    pub dense_b: Tensor,
}

/// Gradients share the layout of the parameters they belong to.
pub type GradientSet = ModelParams;

impl ModelParams {
    pub fn zeros(spec: &ModelSpec) -> Self {
        Self {
            forward: CellParams::zeros(spec.cell, spec.input, spec.hidden),
            backward: spec
                .bidirectional
                .then(|| CellParams::zeros(spec.cell, spec.input, spec.hidden)),
            dense_w: Tensor::zeros(&[spec.dense_inputs(), spec.output]),
            dense_b: Tensor::zeros(&[spec.output]),
        }
    }

    /// Zeroed set with the same layout as `self`.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Tensors with stable, unique names (`fwd.w_xi`, `bwd.u_c`, `dense.w`).
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self
            .forward
            .named()
            .into_iter()
            .map(|(n, t)| (format!("fwd.{n}"), t))
            .collect();
        if let Some(b) = &self.backward {
            out.extend(b.named().into_iter().map(|(n, t)| (format!("bwd.{n}"), t)));
        }
        out.push(("dense.w".into(), &self.dense_w));
        out.push(("dense.b".into(), &self.dense_b));
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    /// Mutable tensors in the same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.forward.tensors_mut();
        if let Some(b) = &mut self.backward {
            out.extend(b.tensors_mut());
        }
        out.push(&mut self.dense_w);
        out.push(&mut self.dense_b);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// L2 norm over every entry of every tensor.
    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .map(|t| t.sum_squares())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.scale(factor);
        }
    }

    /// `self += factor * other`.
    pub fn add_scaled(&mut self, other: &ModelParams, factor: f64) -> Result<()> {
        let src = other.tensors();
        let mut dst = self.tensors_mut();
        if src.len() != dst.len() {
            return Err(shape("parameter sets have different layouts"));
        }
        for (d, s) in dst.iter_mut().zip(src) {
            d.add_scaled(s, factor)?;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    /// Checks every tensor against `spec`.
    pub fn check(&self, spec: &ModelSpec) -> Result<()> {
        let expected = ModelParams::zeros(spec);
        let have = self.named_tensors();
        let want = expected.named_tensors();
        if have.len() != want.len() {
            return Err(shape(format!(
                "expected {} parameter tensors, found {}",
                want.len(),
                have.len()
            )));
        }
        for ((hn, ht), (wn, wt)) in have.iter().zip(&want) {
            if hn != wn || ht.shape() != wt.shape() {
                return Err(shape(format!(
                    "parameter {hn} {:?} does not match {wn} {:?}",
                    ht.shape(),
                    wt.shape()
                )));
            }
        }
        Ok(())
    }

    /// Hash of the exact bit patterns of all parameters. Used to detect a
    /// forward tape being replayed against modified weights.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in self.tensors() {
            for v in t.values() {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
            h = h.rotate_left(17) ^ t.len() as u64;
        }
        h
    }

    /// Writes the parameters as a named-tensor file.
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        write_named_tensors(&mut w, &self.named_tensors())?;
        Ok(())
    }

    /// Reads a named-tensor file written by [`ModelParams::save`]; names and
    /// shapes must match `spec` exactly.
    pub fn load(path: impl AsRef<std::path::Path>, spec: &ModelSpec) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let named = read_named_tensors(&mut std::io::BufReader::new(file))?;
        Self::from_named(spec, named)
    }

    pub fn from_named(spec: &ModelSpec, named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut params = ModelParams::zeros(spec);
        let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
        if names.len() != named.len() {
            return Err(shape(format!(
                "file holds {} tensors, model needs {}",
                named.len(),
                names.len()
            )));
        }
        for ((slot, want), (name, tensor)) in params.tensors_mut().into_iter().zip(&names).zip(named) {
            if *want != name || slot.shape() != tensor.shape() {
                return Err(shape(format!(
                    "tensor {name} {:?} does not fit slot {want} {:?}",
                    tensor.shape(),
                    slot.shape()
                )));
            }
            *slot = tensor;
        }
        Ok(params)
    }
}

fn check_shape(t: &Tensor, dims: &[usize]) -> Result<()> {
    if t.shape() != dims {
        return Err(shape(format!("expected {dims:?}, got {:?}", t.shape())));
    }
    Ok(())
}

/// Glorot-uniform bound for one gate matrix.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Weights uniform in `±sqrt(6 / (fan_in + fan_out))` per gate matrix,
/// biases zero.
pub fn init_params(spec: &ModelSpec, rng: &mut RngStream) -> Result<ModelParams> {
    spec.validate()?;
    let mut params = ModelParams::zeros(spec);
    for t in params.tensors_mut() {
        // Rank-1 tensors are biases.
        if let [fan_in, fan_out] = *t.shape() {
            let bound = glorot_bound(fan_in, fan_out);
            for v in t.values_mut() {
                *v = (2.0 * rng.uniform() - 1.0) * bound;
            }
        }
    }
    Ok(params)
}
