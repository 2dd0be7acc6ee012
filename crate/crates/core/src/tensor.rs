//! Dense tensors and reverse-mode gradients for the fixed encoder layer set.
//!
//! Activations flowing through a layer chain are `(batch, channels, time)`
//! tensors. Every layer records its input on a [`GradTape`]; the tape borrows
//! the parameters it was run with and replays the chain backwards exactly once.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};

use crate::error::{shape_err, Error, Result};
use crate::matrix::{gemm_nn, gemm_nt, gemm_tn};
use crate::rng::SeededRng;

/// Contiguous row-major `f64` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "Tensor::new",
                format!("{n} entries for shape {shape:?}"),
                format!("{} entries", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
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

    fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match *self.shape.as_slice() {
            [b, c, l] => Ok((b, c, l)),
            _ => Err(shape_err(op, "(batch, channels, time)", format!("{:?}", self.shape))),
        }
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Linear,
    Conv1d,
    Gelu,
    SkipAdd,
    L2Normalize,
    DownsampleConv,
}

/// One layer of an encoder chain.
///
/// For [`LayerKind::SkipAdd`] the `skip_span` field names how many layers back
/// the residual branch started: the layer adds the input of layer
/// `index - skip_span` (center-cropped in time) to its own input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub kernel_size: usize,
    pub stride: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pub skip_span: usize,
}

impl LayerSpec {
    fn with(kind: LayerKind, kernel_size: usize, stride: usize, in_dim: usize, out_dim: usize) -> Self {
        Self {
            kind,
            kernel_size,
            stride,
            in_dim,
            out_dim,
            skip_span: 0,
        }
    }

    pub fn linear(in_dim: usize, out_dim: usize) -> Self {
        Self::with(LayerKind::Linear, 1, 1, in_dim, out_dim)
    }

    pub fn conv1d(in_dim: usize, out_dim: usize, kernel_size: usize) -> Self {
        Self::with(LayerKind::Conv1d, kernel_size, 1, in_dim, out_dim)
    }

    pub fn downsample_conv(in_dim: usize, out_dim: usize, kernel_size: usize, stride: usize) -> Self {
        Self::with(LayerKind::DownsampleConv, kernel_size, stride, in_dim, out_dim)
    }

    pub fn gelu(dim: usize) -> Self {
        Self::with(LayerKind::Gelu, 1, 1, dim, dim)
    }

    pub fn skip_add(dim: usize, span: usize) -> Self {
        Self {
            skip_span: span,
            ..Self::with(LayerKind::SkipAdd, 1, 1, dim, dim)
        }
    }

    pub fn l2_normalize(dim: usize) -> Self {
        Self::with(LayerKind::L2Normalize, 1, 1, dim, dim)
    }

    pub fn has_params(&self) -> bool {
        matches!(
            self.kind,
            LayerKind::Linear | LayerKind::Conv1d | LayerKind::DownsampleConv
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size == 0 || self.stride == 0 || self.in_dim == 0 || self.out_dim == 0 {
            return Err(Error::InvalidConfig(format!(
                "layer {:?} needs positive kernel size, stride and dimensions",
                self.kind
            )));
        }
        if self.kind == LayerKind::Linear && (self.kernel_size != 1 || self.stride != 1) {
            return Err(Error::InvalidConfig("linear layers have kernel size and stride 1".into()));
        }
        if !self.has_params() && self.in_dim != self.out_dim {
            return Err(Error::InvalidConfig(format!(
                "{:?} cannot change the channel count",
                self.kind
            )));
        }
        if self.kind == LayerKind::SkipAdd && self.skip_span == 0 {
            return Err(Error::InvalidConfig("skip connection must span at least one layer".into()));
        }
        Ok(())
    }

    /// Output time length for an input of length `len`, if any output remains.
    pub fn output_len(&self, len: usize) -> Option<usize> {
        if self.has_params() {
            len.checked_sub(self.kernel_size).map(|r| r / self.stride + 1)
        } else {
            Some(len)
        }
    }

    /// Freshly initialized `[weight (out, in, k), bias (out)]`, uniform in `±1/sqrt(fan_in)`.
    pub fn init_params<R: Rng>(&self, rng: &mut R) -> Vec<Tensor> {
        if !self.has_params() {
            return Vec::new();
        }
        let fan_in = self.in_dim * self.kernel_size;
        let bound = 1.0 / libm::sqrt(fan_in as f64);
        let w: Vec<f64> = (0..self.out_dim * fan_in)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let b: Vec<f64> = (0..self.out_dim).map(|_| rng.random_range(-bound..bound)).collect();
        vec![
            Tensor {
                shape: vec![self.out_dim, self.in_dim, self.kernel_size],
                data: w,
            },
            Tensor {
                shape: vec![self.out_dim],
                data: b,
            },
        ]
    }

    fn check_params(&self, params: &[Tensor]) -> Result<()> {
        if !self.has_params() {
            if !params.is_empty() {
                return Err(shape_err("layer params", "no parameters", format!("{}", params.len())));
            }
            return Ok(());
        }
        let want_w = [self.out_dim, self.in_dim, self.kernel_size];
        match params {
            [w, b] if w.shape == want_w && b.shape == [self.out_dim] => Ok(()),
            _ => Err(shape_err(
                "layer params",
                format!("weight {want_w:?} and bias [{}]", self.out_dim),
                format!("{:?}", params.iter().map(|p| p.shape.clone()).collect::<Vec<_>>()),
            )),
        }
    }
}

/// Receptive field (in input samples) and total stride of a layer chain.
pub fn chain_receptive_field(layers: &[LayerSpec]) -> (usize, usize) {
    let mut rf = 1;
    let mut jump = 1;
    for l in layers.iter().filter(|l| l.has_params()) {
        rf += (l.kernel_size - 1) * jump;
        jump *= l.stride;
    }
    (rf, jump)
}

const INV_SQRT2: f64 = core::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x * Phi(x)`.
pub fn gelu(x: f64) -> f64 {
    x * 0.5 * (1.0 + libm::erf(x * INV_SQRT2))
}

pub fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * INV_SQRT2)) + x * INV_SQRT_2PI * libm::exp(-0.5 * x * x)
}

struct Record<'p> {
    spec: LayerSpec,
    params: &'p [Tensor],
    input: Tensor,
    /// Per-(batch, time) norms for `L2Normalize`.
    norms: Vec<f64>,
}

/// Ordered record of executed layers, replayed in reverse by [`GradTape::backward`].
#[derive(Default)]
pub struct GradTape<'p> {
    records: Vec<Record<'p>>,
    consumed: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    /// One entry per recorded layer; empty for parameter-free layers.
    pub params: Vec<Vec<Tensor>>,
    /// Gradient with respect to the chain input.
    pub input: Tensor,
}

impl<'p> GradTape<'p> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Runs the recorded chain backwards from `output_grad`.
    ///
    /// The tape is single use; a second call fails with [`Error::TapeConsumed`].
    pub fn backward(&mut self, output_grad: Tensor) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = true;
        let records = core::mem::take(&mut self.records);
        let n = records.len();
        let mut pending: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        let mut param_grads: Vec<Vec<Tensor>> = (0..n).map(|_| Vec::new()).collect();
        let mut grad = output_grad;

        if let Some(last) = records.last() {
            let want = output_shape(last)?;
            if grad.shape != want {
                return Err(shape_err(
                    "GradTape::backward",
                    format!("{want:?}"),
                    format!("{:?}", grad.shape),
                ));
            }
        }

        for i in (0..n).rev() {
            let rec = &records[i];
            let mut grad_in = match rec.spec.kind {
                LayerKind::Linear | LayerKind::Conv1d | LayerKind::DownsampleConv => {
                    let (gi, gw, gb) = conv_backward(&rec.spec, rec.params, &rec.input, &grad);
                    param_grads[i] = vec![gw, gb];
                    gi
                }
                LayerKind::Gelu => {
                    let mut g = grad;
                    for (gv, &x) in g.data.iter_mut().zip(&rec.input.data) {
                        *gv *= gelu_grad(x);
                    }
                    g
                }
                LayerKind::L2Normalize => l2_backward(&rec.input, &rec.norms, &grad),
                LayerKind::SkipAdd => {
                    let src = i - rec.spec.skip_span;
                    let src_shape = records[src].input.shape.clone();
                    let routed = uncrop(&grad, &src_shape);
                    match &mut pending[src] {
                        Some(p) => p.add_assign(&routed),
                        slot => *slot = Some(routed),
                    }
                    grad
                }
            };
            if let Some(extra) = pending[i].take() {
                grad_in.add_assign(&extra);
            }
            grad = grad_in;
        }
        Ok(Gradients {
            params: param_grads,
            input: grad,
        })
    }
}

fn output_shape(rec: &Record<'_>) -> Result<Vec<usize>> {
    let (b, _, l) = rec.input.dims3("output_shape")?;
    let lout = rec.spec.output_len(l).unwrap_or(0);
    Ok(vec![b, rec.spec.out_dim, lout])
}

/// Evaluates one layer and records it on `tape`.
pub fn layer_forward<'p>(
    spec: &LayerSpec,
    params: &'p [Tensor],
    input: Tensor,
    tape: &mut GradTape<'p>,
) -> Result<Tensor> {
    if tape.consumed {
        return Err(Error::TapeConsumed);
    }
    spec.validate()?;
    spec.check_params(params)?;
    let (b, c, l) = input.dims3("layer_forward")?;
    if c != spec.in_dim {
        return Err(shape_err(
            "layer_forward",
            format!("{} input channels for {:?}", spec.in_dim, spec.kind),
            format!("{c} channels"),
        ));
    }
    let mut norms = Vec::new();
    let out = match spec.kind {
        LayerKind::Linear | LayerKind::Conv1d | LayerKind::DownsampleConv => {
            let lout = spec.output_len(l).filter(|&n| n > 0).ok_or_else(|| {
                shape_err(
                    "layer_forward",
                    format!("time length >= kernel size {}", spec.kernel_size),
                    format!("{l}"),
                )
            })?;
            conv_forward(spec, params, &input, b, l, lout)
        }
        LayerKind::Gelu => Tensor {
            shape: input.shape.clone(),
            data: input.data.iter().map(|&x| gelu(x)).collect(),
        },
        LayerKind::L2Normalize => {
            let mut out = input.clone();
            norms = Vec::with_capacity(b * l);
            for bi in 0..b {
                for t in 0..l {
                    let mut s = 0.0;
                    for ch in 0..c {
                        let v = input.data[(bi * c + ch) * l + t];
                        s += v * v;
                    }
                    let nrm = libm::sqrt(s);
                    if nrm == 0.0 {
                        return Err(Error::DegenerateNormalization);
                    }
                    for ch in 0..c {
                        out.data[(bi * c + ch) * l + t] /= nrm;
                    }
                    norms.push(nrm);
                }
            }
            out
        }
        LayerKind::SkipAdd => {
            let idx = tape.records.len();
            let src = idx.checked_sub(spec.skip_span).ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "skip connection spans {} layers but only {idx} were recorded",
                    spec.skip_span
                ))
            })?;
            let source = &tape.records[src].input;
            let (sb, sc, sl) = source.dims3("skip_add")?;
            if sb != b || sc != c || sl < l {
                return Err(shape_err(
                    "skip_add",
                    format!("source ({b}, {c}, >= {l})"),
                    format!("{:?}", source.shape),
                ));
            }
            let off = (sl - l) / 2;
            let mut out = input.clone();
            for bi in 0..b {
                for ch in 0..c {
                    let o = &mut out.data[(bi * c + ch) * l..(bi * c + ch + 1) * l];
                    let s = &source.data[(bi * c + ch) * sl + off..(bi * c + ch) * sl + off + l];
                    for (ov, sv) in o.iter_mut().zip(s) {
                        *ov += sv;
                    }
                }
            }
            out
        }
    };
    tape.records.push(Record {
        spec: *spec,
        params,
        input,
        norms,
    });
    Ok(out)
}

/// Runs a whole chain, recording every layer.
pub fn forward_chain<'p>(
    layers: &[LayerSpec],
    params: &'p [Vec<Tensor>],
    input: Tensor,
    tape: &mut GradTape<'p>,
) -> Result<Tensor> {
    if layers.len() != params.len() {
        return Err(shape_err(
            "forward_chain",
            format!("{} parameter groups", layers.len()),
            format!("{}", params.len()),
        ));
    }
    let mut x = input;
    for (spec, p) in layers.iter().zip(params) {
        x = layer_forward(spec, p, x, tape)?;
    }
    Ok(x)
}

/// A kernel spanning the whole input with one output step reads each
/// (batch, channel, tap) exactly once in input order, so im2col is the identity.
fn covers_window(spec: &LayerSpec, l: usize, lout: usize) -> bool {
    lout == 1 && spec.kernel_size == l
}

fn im2col(spec: &LayerSpec, input: &Tensor, b: usize, l: usize, lout: usize) -> Vec<f64> {
    let c = spec.in_dim;
    let k = spec.kernel_size;
    let s = spec.stride;
    let ck = c * k;
    let mut cols = vec![0.0; b * lout * ck];
    for bi in 0..b {
        for j in 0..lout {
            let row = &mut cols[(bi * lout + j) * ck..(bi * lout + j + 1) * ck];
            for ch in 0..c {
                let base = (bi * c + ch) * l + j * s;
                row[ch * k..(ch + 1) * k].copy_from_slice(&input.data[base..base + k]);
            }
        }
    }
    cols
}

fn conv_forward(spec: &LayerSpec, params: &[Tensor], input: &Tensor, b: usize, l: usize, lout: usize) -> Tensor {
    let (w, bias) = (&params[0], &params[1]);
    let co = spec.out_dim;
    let ck = spec.in_dim * spec.kernel_size;
    let whole = covers_window(spec, l, lout);
    let owned;
    let cols: &[f64] = if whole {
        &input.data
    } else {
        owned = im2col(spec, input, b, l, lout);
        &owned
    };
    // rows: (batch, time), columns: output channel
    let mut flat = Vec::with_capacity(b * lout * co);
    for _ in 0..b * lout {
        flat.extend_from_slice(&bias.data);
    }
    gemm_nt(cols, &w.data, &mut flat, b * lout, ck, co);
    if lout == 1 {
        return Tensor {
            shape: vec![b, co, 1],
            data: flat,
        };
    }
    let mut out = vec![0.0; b * co * lout];
    for bi in 0..b {
        for j in 0..lout {
            let src = &flat[(bi * lout + j) * co..(bi * lout + j + 1) * co];
            for (o, &v) in src.iter().enumerate() {
                out[(bi * co + o) * lout + j] = v;
            }
        }
    }
    Tensor {
        shape: vec![b, co, lout],
        data: out,
    }
}

fn conv_backward(spec: &LayerSpec, params: &[Tensor], input: &Tensor, grad: &Tensor) -> (Tensor, Tensor, Tensor) {
    let w = &params[0];
    let (b, c, l) = (input.shape[0], input.shape[1], input.shape[2]);
    let co = spec.out_dim;
    let k = spec.kernel_size;
    let s = spec.stride;
    let ck = c * k;
    let lout = grad.shape[2];
    let whole = covers_window(spec, l, lout);
    let owned_cols;
    let cols: &[f64] = if whole {
        &input.data
    } else {
        owned_cols = im2col(spec, input, b, l, lout);
        &owned_cols
    };

    // with one output step the (batch, channel, time) gradient is already (batch, channel)
    let owned_grad;
    let gflat: &[f64] = if lout == 1 {
        &grad.data
    } else {
        let mut g = vec![0.0; b * lout * co];
        for bi in 0..b {
            for o in 0..co {
                for j in 0..lout {
                    g[(bi * lout + j) * co + o] = grad.data[(bi * co + o) * lout + j];
                }
            }
        }
        owned_grad = g;
        &owned_grad
    };
    let mut gw = vec![0.0; co * ck];
    gemm_tn(gflat, cols, &mut gw, b * lout, co, ck);
    let mut gb = vec![0.0; co];
    for row in gflat.chunks_exact(co) {
        for (g, &v) in gb.iter_mut().zip(row) {
            *g += v;
        }
    }
    let mut gcols = vec![0.0; b * lout * ck];
    gemm_nn(gflat, &w.data, &mut gcols, b * lout, co, ck);
    if whole {
        return (
            Tensor {
                shape: vec![b, c, l],
                data: gcols,
            },
            Tensor {
                shape: vec![co, c, k],
                data: gw,
            },
            Tensor {
                shape: vec![co],
                data: gb,
            },
        );
    }
    let mut gin = vec![0.0; b * c * l];
    for bi in 0..b {
        for j in 0..lout {
            let row = &gcols[(bi * lout + j) * ck..(bi * lout + j + 1) * ck];
            for ch in 0..c {
                let base = (bi * c + ch) * l + j * s;
                for (dst, &v) in gin[base..base + k].iter_mut().zip(&row[ch * k..(ch + 1) * k]) {
                    *dst += v;
                }
            }
        }
    }
    (
        Tensor {
            shape: vec![b, c, l],
            data: gin,
        },
        Tensor {
            shape: vec![co, c, k],
            data: gw,
        },
        Tensor {
            shape: vec![co],
            data: gb,
        },
    )
}

fn l2_backward(input: &Tensor, norms: &[f64], grad: &Tensor) -> Tensor {
    let (b, c, l) = (input.shape[0], input.shape[1], input.shape[2]);
    let mut out = vec![0.0; input.len()];
    for bi in 0..b {
        for t in 0..l {
            let nrm = norms[bi * l + t];
            let mut yg = 0.0;
            for ch in 0..c {
                let i = (bi * c + ch) * l + t;
                yg += input.data[i] / nrm * grad.data[i];
            }
            for ch in 0..c {
                let i = (bi * c + ch) * l + t;
                let y = input.data[i] / nrm;
                out[i] = (grad.data[i] - y * yg) / nrm;
            }
        }
    }
    Tensor {
        shape: input.shape.clone(),
        data: out,
    }
}

/// Zero-pads a center-cropped gradient back to the source shape.
fn uncrop(grad: &Tensor, src_shape: &[usize]) -> Tensor {
    let (b, c, l) = (grad.shape[0], grad.shape[1], grad.shape[2]);
    let sl = src_shape[2];
    let off = (sl - l) / 2;
    let mut out = vec![0.0; b * c * sl];
    for bc in 0..b * c {
        out[bc * sl + off..bc * sl + off + l].copy_from_slice(&grad.data[bc * l..(bc + 1) * l]);
    }
    Tensor {
        shape: src_shape.to_vec(),
        data: out,
    }
}

/// Compares analytic parameter gradients of a layer chain with central differences.
///
/// Parameters and the input batch are drawn from `seed`; the scalar probed is
/// `sum(r * chain(x))` for a random upstream weight `r`. Returns the maximum over
/// all parameter entries of `|a - cd| / (|a| + |cd| + 1e-12)`.
pub fn grad_check(layers: &[LayerSpec], seed: u64) -> Result<f64> {
    if layers.is_empty() {
        return Ok(0.0);
    }
    let mut rng = SeededRng::seed_from_u64(seed);
    let mut params: Vec<Vec<Tensor>> = layers.iter().map(|l| l.init_params(&mut rng)).collect();
    let (rf, jump) = chain_receptive_field(layers);
    let (batch, len) = (2, rf + 2 * jump);
    let in_dim = layers[0].in_dim;
    let input = Tensor {
        shape: vec![batch, in_dim, len],
        data: (0..batch * in_dim * len).map(|_| rng.random_range(-1.0..1.0)).collect(),
    };

    let probe = |params: &[Vec<Tensor>]| -> Result<Tensor> {
        let mut tape = GradTape::new();
        forward_chain(layers, params, input.clone(), &mut tape)
    };
    let out = probe(&params)?;
    let upstream = Tensor {
        shape: out.shape.clone(),
        data: (0..out.len()).map(|_| rng.random_range(-1.0..1.0)).collect(),
    };
    let analytic = {
        let mut tape = GradTape::new();
        forward_chain(layers, &params, input.clone(), &mut tape)?;
        tape.backward(upstream.clone())?
    };

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for li in 0..params.len() {
        for pi in 0..params[li].len() {
            for e in 0..params[li][pi].len() {
                let orig = params[li][pi].data[e];
                params[li][pi].data[e] = orig + h;
                let plus = crate::matrix::dot(probe(&params)?.data(), upstream.data());
                params[li][pi].data[e] = orig - h;
                let minus = crate::matrix::dot(probe(&params)?.data(), upstream.data());
                params[li][pi].data[e] = orig;
                let cd = (plus - minus) / (2.0 * h);
                let a = analytic.params[li][pi].data[e];
                worst = worst.max((a - cd).abs() / (a.abs() + cd.abs() + 1e-12));
            }
        }
    }
    Ok(worst)
}
