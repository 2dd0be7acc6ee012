//! The three encoder families (receptive field 1, 10 and 40 samples) and
//! whole-session embedding.
//!
//! A window is `receptive_field` consecutive rows of a session's signal. Row
//! `t` of an embedding is the encoder output for the window ending at `t`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::matrix::Matrix;
use crate::rng::{stream, SeededRng};
use crate::tensor::{chain_receptive_field, forward_chain, GradTape, LayerSpec, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Architecture {
    /// Four-layer MLP on single samples.
    Rf1,
    /// Five convolutional layers, kernels 2,3,3,3,3.
    Rf10,
    /// Two strided convolutions followed by the RF10-style body.
    Rf40,
}

impl Architecture {
    pub fn receptive_field(self) -> usize {
        match self {
            Architecture::Rf1 => 1,
            Architecture::Rf10 => 10,
            Architecture::Rf40 => 40,
        }
    }

    pub fn from_receptive_field(rf: usize) -> Result<Self> {
        match rf {
            1 => Ok(Architecture::Rf1),
            10 => Ok(Architecture::Rf10),
            40 => Ok(Architecture::Rf40),
            _ => Err(Error::InvalidConfig(format!(
                "receptive field must be 1, 10 or 40, got {rf}"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Rf1 => "offset1-model",
            Architecture::Rf10 => "offset10-model",
            Architecture::Rf40 => "offset40-model",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        [Architecture::Rf1, Architecture::Rf10, Architecture::Rf40]
            .into_iter()
            .find(|a| a.name() == name)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown architecture '{name}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchSpec {
    pub architecture: Architecture,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub normalize_output: bool,
}

impl ArchSpec {
    pub fn new(architecture: Architecture, input_dim: usize) -> Self {
        Self {
            architecture,
            input_dim,
            hidden_dim: 32,
            output_dim: 8,
            normalize_output: true,
        }
    }

    pub fn receptive_field(&self) -> usize {
        self.architecture.receptive_field()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.output_dim == 0 {
            return Err(Error::InvalidConfig("encoder dimensions must be positive".into()));
        }
        if self.architecture == Architecture::Rf1 && self.hidden_dim % 2 == 1 {
            return Err(Error::InvalidConfig(format!(
                "the RF1 bottleneck halves the hidden dimension, which must be even (got {})",
                self.hidden_dim
            )));
        }
        Ok(())
    }

    /// Layer chain for this architecture.
    pub fn layers(&self) -> Result<Vec<LayerSpec>> {
        self.validate()?;
        let (n, h, d) = (self.input_dim, self.hidden_dim, self.output_dim);
        let mut layers = Vec::new();
        let residual_body = |layers: &mut Vec<LayerSpec>| {
            for _ in 0..3 {
                layers.push(LayerSpec::conv1d(h, h, 3));
                layers.push(LayerSpec::gelu(h));
                layers.push(LayerSpec::skip_add(h, 2));
            }
            layers.push(LayerSpec::conv1d(h, d, 3));
        };
        match self.architecture {
            Architecture::Rf1 => {
                layers.extend([
                    LayerSpec::linear(n, h),
                    LayerSpec::gelu(h),
                    LayerSpec::linear(h, h),
                    LayerSpec::gelu(h),
                    LayerSpec::linear(h, h / 2),
                    LayerSpec::gelu(h / 2),
                    LayerSpec::linear(h / 2, d),
                ]);
            }
            Architecture::Rf10 => {
                layers.push(LayerSpec::conv1d(n, h, 2));
                layers.push(LayerSpec::gelu(h));
                residual_body(&mut layers);
            }
            Architecture::Rf40 => {
                layers.push(LayerSpec::downsample_conv(n, h, 4, 2));
                layers.push(LayerSpec::downsample_conv(h, h, 3, 2));
                layers.push(LayerSpec::gelu(h));
                residual_body(&mut layers);
            }
        }
        if self.normalize_output {
            layers.push(LayerSpec::l2_normalize(d));
        }
        Ok(layers)
    }
}

/// An encoder with its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    arch: ArchSpec,
    layers: Vec<LayerSpec>,
    params: Vec<Vec<Tensor>>,
    seed: u64,
}

/// Builds an encoder with weights drawn from `seed`.
pub fn build_encoder(arch: ArchSpec, seed: u64) -> Result<EncoderModel> {
    EncoderModel::init(arch, seed, 1)
}

impl EncoderModel {
    /// Initializes weights from RNG stream `stream_id` of `seed`, so several
    /// encoders built from one seed get independent weights.
    pub fn init(arch: ArchSpec, seed: u64, stream_id: u64) -> Result<Self> {
        let layers = arch.layers()?;
        let mut rng = stream(seed, stream_id);
        let params = layers.iter().map(|l| l.init_params(&mut rng)).collect();
        Ok(Self {
            arch,
            layers,
            params,
            seed,
        })
    }

    /// Reassembles a model from stored parameters, checking every shape.
    pub fn from_parts(arch: ArchSpec, seed: u64, params: Vec<Vec<Tensor>>) -> Result<Self> {
        let layers = arch.layers()?;
        let model = Self {
            arch,
            layers,
            params,
            seed,
        };
        model.check()?;
        Ok(model)
    }

    fn check(&self) -> Result<()> {
        if self.params.len() != self.layers.len() {
            return Err(shape_err(
                "EncoderModel",
                format!("{} parameter groups", self.layers.len()),
                format!("{}", self.params.len()),
            ));
        }
        let probe: Vec<f64> = vec![0.0; self.arch.receptive_field() * self.arch.input_dim];
        let window = Matrix::from_vec(self.arch.receptive_field(), self.arch.input_dim, probe)?;
        match self.forward_windows(&window, &[0]) {
            Ok(_) | Err(Error::DegenerateNormalization) => Ok(()),
            Err(e) => Err(e),
        }
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[Vec<Tensor>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Vec<Tensor>] {
        &mut self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.arch.output_dim
    }

    pub fn receptive_field(&self) -> usize {
        self.arch.receptive_field()
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().flatten().map(Tensor::len).sum()
    }

    /// Copy of the model whose first layer reads `input_dim` channels, freshly
    /// initialized from `rng`. All other weights are kept.
    pub fn with_input_dim(&self, input_dim: usize, rng: &mut SeededRng) -> Result<Self> {
        let arch = ArchSpec { input_dim, ..self.arch };
        let layers = arch.layers()?;
        let mut params = self.params.clone();
        params[0] = layers[0].init_params(rng);
        Ok(Self {
            arch,
            layers,
            params,
            seed: self.seed,
        })
    }

    /// Runs the chain on a `(batch, input_dim, time)` tensor.
    pub fn forward<'p>(&'p self, input: Tensor, tape: &mut GradTape<'p>) -> Result<Tensor> {
        forward_chain(&self.layers, &self.params, input, tape)
    }

    /// Embeds one window given as `receptive_field x input_dim` (time by channel).
    pub fn embed(&self, window: &Matrix) -> Result<Vec<f64>> {
        if window.rows() != self.receptive_field() || window.cols() != self.input_dim() {
            return Err(shape_err(
                "embed",
                format!("{}x{} window", self.receptive_field(), self.input_dim()),
                format!("{}x{}", window.rows(), window.cols()),
            ));
        }
        Ok(self.forward_windows(window, &[0])?.into_vec())
    }

    /// Embeddings of the windows starting at `starts` in `signal` (`T x n`),
    /// one row per start.
    pub fn forward_windows(&self, signal: &Matrix, starts: &[usize]) -> Result<Matrix> {
        let x = gather_windows(signal, starts, self.receptive_field())?;
        let mut tape = GradTape::new();
        let y = self.forward(x, &mut tape)?;
        Ok(column_output(y))
    }

    /// Embeds every window of a `T x n` signal; row `i` belongs to the window
    /// ending at time `i + receptive_field - 1`.
    pub fn transform_series(&self, signal: &Matrix) -> Result<Matrix> {
        let windows = self.num_windows(signal)?;
        self.transform_range(signal, 0..windows)
    }

    /// Number of full windows in `signal`, validating its channel count.
    pub fn num_windows(&self, signal: &Matrix) -> Result<usize> {
        if signal.cols() != self.input_dim() {
            return Err(shape_err(
                "transform_series",
                format!("{} signal channels", self.input_dim()),
                format!("{}", signal.cols()),
            ));
        }
        let rf = self.receptive_field();
        if signal.rows() < rf {
            return Err(Error::EmptyRange(format!(
                "series of length {} is shorter than the receptive field {rf}",
                signal.rows()
            )));
        }
        Ok(signal.rows() - rf + 1)
    }

    /// Embeddings of the windows whose start index lies in `range`.
    pub fn transform_range(&self, signal: &Matrix, range: core::ops::Range<usize>) -> Result<Matrix> {
        const CHUNK: usize = 512;
        let d = self.output_dim();
        let mut out = Vec::with_capacity(range.len() * d);
        let starts: Vec<usize> = range.collect();
        for chunk in starts.chunks(CHUNK) {
            out.extend_from_slice(self.forward_windows(signal, chunk)?.as_slice());
        }
        Matrix::from_vec(starts.len(), d, out)
    }
}

/// Stacks windows of `rf` rows into a `(batch, channels, rf)` tensor.
pub fn gather_windows(signal: &Matrix, starts: &[usize], rf: usize) -> Result<Tensor> {
    let n = signal.cols();
    let mut data = vec![0.0; starts.len() * n * rf];
    for (b, &s) in starts.iter().enumerate() {
        if s + rf > signal.rows() {
            return Err(Error::OutOfRange {
                index: s,
                len: (signal.rows() + 1).saturating_sub(rf),
            });
        }
        let block = &mut data[b * n * rf..(b + 1) * n * rf];
        for t in 0..rf {
            for (c, &v) in signal.row(s + t).iter().enumerate() {
                block[c * rf + t] = v;
            }
        }
    }
    Tensor::new(vec![starts.len(), n, rf], data)
}

/// `(batch, d, 1)` encoder output as a `batch x d` matrix.
pub fn column_output(y: Tensor) -> Matrix {
    let (b, d) = (y.shape()[0], y.shape()[1]);
    debug_assert_eq!(y.shape()[2], 1);
    Matrix::from_vec(b, d, y.into_data()).expect("shape checked above")
}

/// Inverse of [`column_output`], for feeding gradients back.
pub fn column_grad(g: &Matrix) -> Tensor {
    Tensor::new(vec![g.rows(), g.cols(), 1], g.as_slice().to_vec()).expect("sizes agree")
}

/// Receptive field and output stride of an architecture's layer chain.
pub fn chain_geometry(arch: &ArchSpec) -> Result<(usize, usize)> {
    Ok(chain_receptive_field(&arch.layers()?))
}
