//! Training loop: sampler + encoders + InfoNCE, optimized with Adam.
//!
//! Every session gets its own encoder; sessions are coupled only through the
//! shared loss. A single session is the one-element case of the same code path.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::data::Session;
use crate::encoder::{column_grad, column_output, gather_windows, ArchSpec, Architecture, EncoderModel};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::objective::{hybrid_loss, HybridSplit, InfoNce, LossReport, SimilarityKind};
use crate::rng::stream;
use crate::sampling::{BatchTriplet, ContextDistance, Sampler, SamplerConfig, SamplingMode, WindowRef};
use crate::tensor::{GradTape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// `None` picks the mode from the contexts present.
    pub mode: Option<SamplingMode>,
    pub time_offsets: Vec<usize>,
    pub uniform_over_discrete: bool,
    /// Defaults to the batch size.
    pub num_negatives: Option<usize>,
    pub distance: ContextDistance,
    pub max_offset_pool: usize,
    pub architecture: Architecture,
    pub output_dimension: usize,
    pub num_hidden_units: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_iterations: usize,
    pub temperature: f64,
    pub similarity: SimilarityKind,
    pub positive_in_negatives: bool,
    /// Leading embedding coordinates trained with behavior positives in hybrid mode.
    pub hybrid_behavior_dims: usize,
    /// `None` uses every reference each step when they fit in one batch.
    pub full_batch: Option<bool>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let s = SamplerConfig::default();
        Self {
            mode: None,
            time_offsets: s.time_offsets,
            uniform_over_discrete: false,
            num_negatives: None,
            distance: s.distance,
            max_offset_pool: s.max_offset_pool,
            architecture: Architecture::Rf1,
            output_dimension: 8,
            num_hidden_units: 32,
            batch_size: 1024,
            learning_rate: 3e-4,
            max_iterations: 1000,
            temperature: 1.0,
            similarity: SimilarityKind::Dot,
            positive_in_negatives: false,
            hybrid_behavior_dims: 3,
            full_batch: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.num_negatives == Some(0) {
            return bad("num_negatives must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.output_dimension == 0 || self.num_hidden_units == 0 {
            return bad("output_dimension and num_hidden_units must be positive".into());
        }
        if self.mode == Some(SamplingMode::Hybrid) && self.hybrid_behavior_dims > self.output_dimension {
            return bad(format!(
                "hybrid_behavior_dims {} exceeds output_dimension {}",
                self.hybrid_behavior_dims, self.output_dimension
            ));
        }
        self.criterion().validate()
    }

    pub fn criterion(&self) -> InfoNce {
        InfoNce {
            similarity: self.similarity,
            temperature: self.temperature,
            positive_in_negatives: self.positive_in_negatives,
        }
    }

    pub fn sampler_config(&self, mode: SamplingMode) -> SamplerConfig {
        SamplerConfig {
            mode,
            time_offsets: self.time_offsets.clone(),
            uniform_over_discrete: self.uniform_over_discrete,
            num_negatives: self.num_negatives.unwrap_or(self.batch_size),
            distance: self.distance,
            max_offset_pool: self.max_offset_pool,
        }
    }

    pub fn arch_for(&self, input_dim: usize) -> ArchSpec {
        ArchSpec {
            architecture: self.architecture,
            input_dim,
            hidden_dim: self.num_hidden_units,
            output_dim: self.output_dimension,
            normalize_output: self.similarity == SimilarityKind::Dot,
        }
    }

    fn objective(&self, mode: SamplingMode) -> Objective {
        Objective {
            criterion: self.criterion(),
            hybrid: (mode == SamplingMode::Hybrid).then_some(HybridSplit {
                behavior: self.hybrid_behavior_dims,
                time: self.output_dimension - self.hybrid_behavior_dims,
            }),
        }
    }
}

/// Mode implied by the contexts present: none is time-contrastive, discrete
/// and/or continuous select the matching behavior mode, and several sessions
/// with a continuous context select multi-session matching.
pub fn infer_mode(sessions: &[Session]) -> SamplingMode {
    let first = match sessions.first() {
        Some(s) => s,
        None => return SamplingMode::Time,
    };
    match (first.continuous().is_some(), first.discrete().is_some()) {
        (false, false) => SamplingMode::Time,
        (false, true) => SamplingMode::Discrete,
        (true, false) if sessions.len() > 1 => SamplingMode::MultiSession,
        (true, false) => SamplingMode::Continuous,
        (true, true) => SamplingMode::Mixed,
    }
}

/// Loss curve and bookkeeping of one training run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainRecord {
    pub curve: Vec<LossReport>,
    /// Filled in by callers that can read a clock.
    pub wall_clock_seconds: Option<f64>,
    pub model_id: String,
    pub mode: Option<SamplingMode>,
    pub full_batch: bool,
}

#[derive(Debug, Clone)]
pub struct Fitted {
    pub encoders: Vec<EncoderModel>,
    pub record: TrainRecord,
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    fn begin_step(&mut self) {
        self.step += 1;
    }

    fn update(&mut self, slot: usize, param: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        if param.len() != grad.len() {
            return Err(crate::error::shape_err(
                "adam_step",
                format!("{} gradient entries", param.len()),
                format!("{}", grad.len()),
            ));
        }
        while self.m.len() <= slot {
            self.m.push(Vec::new());
            self.v.push(Vec::new());
        }
        if self.m[slot].is_empty() {
            self.m[slot] = vec![0.0; param.len()];
            self.v[slot] = vec![0.0; param.len()];
        } else if self.m[slot].len() != param.len() {
            return Err(crate::error::shape_err(
                "adam_step",
                format!("{} optimizer entries", self.m[slot].len()),
                format!("{}", param.len()),
            ));
        }
        let t = self.step as f64;
        let c1 = 1.0 - libm::pow(self.beta1, t);
        let c2 = 1.0 - libm::pow(self.beta2, t);
        let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
        for i in 0..param.len() {
            let g = grad[i];
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            param[i] -= lr * mhat / (libm::sqrt(vhat) + self.eps);
        }
        Ok(())
    }
}

/// One Adam update of `params` with `grads`.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(crate::error::shape_err(
            "adam_step",
            format!("{} gradients", params.len()),
            format!("{}", grads.len()),
        ));
    }
    state.begin_step();
    for (slot, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        state.update(slot, p.data_mut(), g.data(), lr)?;
    }
    Ok(())
}

/// The loss evaluated on encoder outputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub criterion: InfoNce,
    pub hybrid: Option<HybridSplit>,
}

/// Per-encoder, per-layer parameter gradients.
pub type ParamGrads = Vec<Vec<Vec<Tensor>>>;

/// Loss of one batch and, when asked, its gradients for every encoder.
pub fn batch_loss(
    encoders: &[EncoderModel],
    sessions: &[Session],
    batch: &BatchTriplet,
    objective: &Objective,
    want_grads: bool,
) -> Result<(LossReport, Option<ParamGrads>)> {
    if encoders.len() != sessions.len() {
        return Err(Error::InvalidConfig(format!(
            "{} encoders for {} sessions",
            encoders.len(),
            sessions.len()
        )));
    }
    let all: Vec<WindowRef> = batch
        .reference
        .iter()
        .chain(&batch.positive)
        .chain(&batch.positive_time)
        .chain(&batch.negative)
        .copied()
        .collect();
    let d = encoders[0].output_dim();
    let mut z = Matrix::zeros(all.len(), d);
    let mut rows_of: Vec<Vec<usize>> = vec![Vec::new(); sessions.len()];
    for (row, w) in all.iter().enumerate() {
        rows_of[w.session].push(row);
    }
    let mut tapes = Vec::with_capacity(sessions.len());
    for (s, rows) in rows_of.iter().enumerate() {
        let mut tape = GradTape::new();
        if !rows.is_empty() {
            let starts: Vec<usize> = rows.iter().map(|&r| all[r].index).collect();
            let x = gather_windows(sessions[s].signal(), &starts, encoders[s].receptive_field())?;
            let y = column_output(encoders[s].forward(x, &mut tape)?);
            if y.cols() != d {
                return Err(Error::InvalidConfig("encoders disagree on the output dimension".into()));
            }
            for (i, &r) in rows.iter().enumerate() {
                z.row_mut(r).copy_from_slice(y.row(i));
            }
        }
        tapes.push(tape);
    }
    let b = batch.reference.len();
    let nt = batch.positive_time.len();
    let refs = z.slice_rows(0, b);
    let pos = z.slice_rows(b, 2 * b);
    let neg = z.slice_rows(2 * b + nt, all.len());
    let (report, grads) = match objective.hybrid {
        Some(split) => {
            let pos_t = z.slice_rows(2 * b, 2 * b + nt);
            let h = hybrid_loss(&objective.criterion, &refs, &pos, &pos_t, &neg, split)?;
            let g = Matrix::vstack(&[&h.reference, &h.positive_behavior, &h.positive_time, &h.negative])?;
            (h.report, g)
        }
        None => {
            let l = objective.criterion.loss(&refs, &pos, &neg)?;
            let g = Matrix::vstack(&[&l.reference, &l.positive, &l.negative])?;
            (l.report, g)
        }
    };
    if !report.total.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    if !want_grads {
        return Ok((report, None));
    }
    let mut out = Vec::with_capacity(sessions.len());
    for (s, mut tape) in tapes.into_iter().enumerate() {
        if rows_of[s].is_empty() {
            out.push(
                encoders[s]
                    .params()
                    .iter()
                    .map(|p| p.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect())
                    .collect(),
            );
            continue;
        }
        let g = grads.select_rows(&rows_of[s]);
        out.push(tape.backward(column_grad(&g))?.params);
    }
    Ok((report, Some(out)))
}

/// Trains one encoder per session from scratch.
pub fn fit(sessions: &[Session], config: &TrainConfig) -> Result<Fitted> {
    config.validate()?;
    let mode = config.mode.unwrap_or_else(|| infer_mode(sessions));
    let encoders = sessions
        .iter()
        .enumerate()
        .map(|(i, s)| EncoderModel::init(config.arch_for(s.signal_dim()), config.seed, 1 + i as u64))
        .collect::<Result<Vec<_>>>()?;
    let trainable = vec![vec![true; encoders[0].layers().len()]; encoders.len()];
    train(encoders, &trainable, sessions, config, mode)
}

/// Trains `encoders` in place on `sessions`, updating only layers flagged in `trainable`.
fn train(
    mut encoders: Vec<EncoderModel>,
    trainable: &[Vec<bool>],
    sessions: &[Session],
    config: &TrainConfig,
    mode: SamplingMode,
) -> Result<Fitted> {
    let rf = encoders[0].receptive_field();
    let mut sampler = Sampler::new(sessions, rf, config.sampler_config(mode), config.seed)?;
    let objective = config.objective(mode);
    let references = sampler.all_references();
    let full_batch = config.full_batch.unwrap_or(references.len() <= config.batch_size);
    let mut adam = AdamState::new();
    let mut curve = Vec::with_capacity(config.max_iterations);
    for step in 0..config.max_iterations {
        let batch = if full_batch {
            sampler.complete_batch(references.clone())?
        } else {
            sampler.sample_batch(config.batch_size)?
        };
        let (report, grads) = match batch_loss(&encoders, sessions, &batch, &objective, true) {
            Ok(r) => r,
            Err(Error::NonFinite(_)) => return Err(Error::Divergence { step }),
            Err(e) => return Err(e),
        };
        let grads = grads.expect("gradients requested");
        adam.begin_step();
        let mut slot = 0;
        for (e, enc) in encoders.iter_mut().enumerate() {
            for (l, layer) in enc.params_mut().iter_mut().enumerate() {
                for (p, g) in layer.iter_mut().zip(&grads[e][l]) {
                    if trainable[e][l] {
                        adam.update(slot, p.data_mut(), g.data(), config.learning_rate)?;
                    }
                    slot += 1;
                }
            }
        }
        curve.push(report);
    }
    let record = TrainRecord {
        curve,
        wall_clock_seconds: None,
        model_id: model_id(&encoders),
        mode: Some(mode),
        full_batch,
    };
    Ok(Fitted { encoders, record })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdaptMode {
    /// Fresh first layer sized for the new session; everything else frozen.
    InputOnly,
    /// First layer resized if needed, all parameters trained.
    Full,
}

/// Fine-tunes a trained encoder on a new session.
pub fn adapt(model: &EncoderModel, session: &Session, mode: AdaptMode, config: &TrainConfig) -> Result<Fitted> {
    config.validate()?;
    if config.architecture.receptive_field() != model.receptive_field() {
        return Err(Error::InvalidConfig(format!(
            "model has receptive field {} but the configuration asks for {}",
            model.receptive_field(),
            config.architecture.receptive_field()
        )));
    }
    let sessions = core::slice::from_ref(session);
    let sampling = config.mode.unwrap_or_else(|| infer_mode(sessions));
    let n = session.signal_dim();
    let mut rng = stream(config.seed, 1);
    let adapted = match mode {
        AdaptMode::InputOnly => model.with_input_dim(n, &mut rng)?,
        AdaptMode::Full if n != model.input_dim() => model.with_input_dim(n, &mut rng)?,
        AdaptMode::Full => model.clone(),
    };
    let layers = adapted.layers().len();
    let trainable: Vec<bool> = match mode {
        AdaptMode::InputOnly => (0..layers).map(|l| l == 0).collect(),
        AdaptMode::Full => vec![true; layers],
    };
    let inner = TrainConfig {
        output_dimension: model.output_dim(),
        num_hidden_units: model.arch().hidden_dim,
        ..config.clone()
    };
    train(vec![adapted], &[trainable], sessions, &inner, sampling)
}

/// Mean loss over `batches` batches drawn with `seed` (independent of any
/// training RNG), used to compare models on held-out data.
pub fn validation_loss(
    encoders: &[EncoderModel],
    sessions: &[Session],
    config: &TrainConfig,
    seed: u64,
    batches: usize,
) -> Result<f64> {
    let mode = config.mode.unwrap_or_else(|| infer_mode(sessions));
    let mut sampler = Sampler::new(sessions, encoders[0].receptive_field(), config.sampler_config(mode), seed)?;
    let objective = config.objective(mode);
    let mut total = 0.0;
    for _ in 0..batches.max(1) {
        let batch = sampler.sample_batch(config.batch_size)?;
        total += batch_loss(encoders, sessions, &batch, &objective, false)?.0.total;
    }
    Ok(total / batches.max(1) as f64)
}

/// Stable identifier of a set of weights (FNV-1a over the parameter bits).
pub fn model_id(encoders: &[EncoderModel]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for e in encoders {
        for t in e.params().iter().flatten() {
            for v in t.data() {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= u64::from(byte);
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
    }
    format!("{h:016x}")
}

/// Gradient check of the whole pipeline (encoder, then InfoNCE on a sampled
/// batch) against central differences over every parameter. Returns the
/// largest `|a - cd| / (|a| + |cd| + 1e-12)`.
///
/// Composite gradients reach ~1e-7 where a two-point quotient at `h = 1e-5`
/// is limited by loss rounding (~2e-11), so this uses the fourth-order
/// central stencil at `h = 1e-3`.
pub fn grad_check_infonce(architecture: Architecture, seed: u64) -> Result<f64> {
    let mut rng = stream(seed, 7);
    let arch = ArchSpec {
        architecture,
        input_dim: 3,
        hidden_dim: 4,
        output_dim: 3,
        normalize_output: true,
    };
    let t = architecture.receptive_field() + 24;
    let signal = Matrix::from_vec(t, 3, (0..t * 3).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let context = Matrix::from_vec(t, 1, (0..t).map(|i| libm::sin(i as f64 * 0.3)).collect())?;
    let session = Session::new(signal, Some(context), None)?;
    let sessions = [session];
    let config = TrainConfig {
        batch_size: 4,
        num_negatives: Some(5),
        time_offsets: vec![1, 2, 3],
        temperature: 0.5,
        ..TrainConfig::default()
    };
    let mut sampler = Sampler::new(
        &sessions,
        arch.receptive_field(),
        config.sampler_config(SamplingMode::Continuous),
        seed,
    )?;
    let batch = sampler.sample_batch(4)?;
    let objective = config.objective(SamplingMode::Continuous);
    let mut model = EncoderModel::init(arch, seed, 1)?;
    let analytic = batch_loss(core::slice::from_ref(&model), &sessions, &batch, &objective, true)?
        .1
        .expect("gradients requested");
    let h = 1e-3;
    let mut worst: f64 = 0.0;
    for l in 0..model.params().len() {
        for p in 0..model.params()[l].len() {
            for e in 0..model.params()[l][p].len() {
                let orig = model.params()[l][p].data()[e];
                let mut eval = |v: f64| -> Result<f64> {
                    model.params_mut()[l][p].data_mut()[e] = v;
                    Ok(batch_loss(core::slice::from_ref(&model), &sessions, &batch, &objective, false)?
                        .0
                        .total)
                };
                let cd = (8.0 * (eval(orig + h)? - eval(orig - h)?) - (eval(orig + 2.0 * h)? - eval(orig - 2.0 * h)?)) / (12.0 * h);
                model.params_mut()[l][p].data_mut()[e] = orig;
                let a = analytic[0][l][p].data()[e];
                worst = worst.max((a - cd).abs() / (a.abs() + cd.abs() + 1e-12));
            }
        }
    }
    Ok(worst)
}
