//! Reference, positive and negative sampling for every training mode.
//!
//! Indices are window starts: window `i` covers samples `[i, i + rf)` and takes
//! its context labels from its last sample `i + rf - 1`. A session of length
//! `T` therefore has `T - rf + 1` windows.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::data::Session;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{stream, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMode {
    /// Positives are the reference shifted forward by an offset in `time_offsets`.
    Time,
    /// Positives share the reference's discrete label.
    Discrete,
    /// Positives match the reference's continuous context moved by an empirical offset.
    Continuous,
    /// Continuous matching restricted to the reference's discrete label.
    Mixed,
    /// A continuous positive for the behavior part and a time positive for the rest.
    Hybrid,
    /// Continuous matching with positives drawn from any session.
    MultiSession,
}

impl SamplingMode {
    pub fn name(self) -> &'static str {
        match self {
            SamplingMode::Time => "time",
            SamplingMode::Discrete => "discrete",
            SamplingMode::Continuous => "continuous",
            SamplingMode::Mixed => "mixed",
            SamplingMode::Hybrid => "hybrid",
            SamplingMode::MultiSession => "multisession",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        use SamplingMode::*;
        [Time, Discrete, Continuous, Mixed, Hybrid, MultiSession]
            .into_iter()
            .find(|m| m.name() == name)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown sampling mode '{name}'")))
    }

    fn needs_continuous(self) -> bool {
        matches!(
            self,
            SamplingMode::Continuous | SamplingMode::Mixed | SamplingMode::Hybrid | SamplingMode::MultiSession
        )
    }

    fn needs_discrete(self) -> bool {
        matches!(self, SamplingMode::Discrete | SamplingMode::Mixed)
    }

    fn uses_offsets(self) -> bool {
        self != SamplingMode::Discrete
    }

    /// Modes whose references must leave room for a forward time offset.
    fn shifts_in_time(self) -> bool {
        matches!(self, SamplingMode::Time | SamplingMode::Hybrid)
    }
}

/// Metric used to match continuous targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ContextDistance {
    #[default]
    Euclidean,
    Manhattan,
}

impl ContextDistance {
    fn eval(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            // squared distance orders candidates the same way
            ContextDistance::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
            ContextDistance::Manhattan => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub mode: SamplingMode,
    pub time_offsets: Vec<usize>,
    pub uniform_over_discrete: bool,
    pub num_negatives: usize,
    pub distance: ContextDistance,
    /// Largest number of context differences kept for continuous matching;
    /// beyond this the difference set is uniformly subsampled.
    pub max_offset_pool: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            mode: SamplingMode::Continuous,
            time_offsets: (1..=10).collect(),
            uniform_over_discrete: false,
            num_negatives: 1024,
            distance: ContextDistance::Euclidean,
            max_offset_pool: 1_000_000,
        }
    }
}

/// A window start inside a given session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct WindowRef {
    pub session: usize,
    pub index: usize,
}

/// One batch of index triplets. Negatives are shared by every reference.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchTriplet {
    pub reference: Vec<WindowRef>,
    pub positive: Vec<WindowRef>,
    /// Time positives of the hybrid mode; empty otherwise.
    pub positive_time: Vec<WindowRef>,
    pub negative: Vec<WindowRef>,
}

/// Scalar contexts sorted by value (then index), with the extent of each run
/// of equal values.
#[derive(Debug, Clone)]
struct Sorted1d {
    entries: Vec<(f64, usize)>,
    run_start: Vec<usize>,
    run_end: Vec<usize>,
}

impl Sorted1d {
    fn new(ctx: &Matrix, members: impl Iterator<Item = usize>) -> Self {
        let mut entries: Vec<(f64, usize)> = members.map(|i| (ctx.get(i, 0), i)).collect();
        entries.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let n = entries.len();
        let mut run_start = vec![0; n];
        let mut run_end = vec![n; n];
        for i in 1..n {
            run_start[i] = if entries[i].0 == entries[i - 1].0 { run_start[i - 1] } else { i };
        }
        for i in (0..n.saturating_sub(1)).rev() {
            run_end[i] = if entries[i].0 == entries[i + 1].0 { run_end[i + 1] } else { i + 1 };
        }
        Self {
            entries,
            run_start,
            run_end,
        }
    }

    /// Index nearest to `target`, smallest index among ties, never `exclude`.
    fn nearest(&self, target: f64, exclude: Option<usize>) -> Option<usize> {
        let n = self.entries.len();
        let p = self.entries.partition_point(|e| e.0 < target);
        // `lo` is the last entry of the next run below, `hi` the first of the next run above
        let (mut lo, mut hi) = (p.checked_sub(1), p);
        let first_allowed = |range: core::ops::Range<usize>| {
            self.entries[range].iter().map(|e| e.1).find(|&i| Some(i) != exclude)
        };
        loop {
            let dlo = lo.map_or(f64::INFINITY, |l| target - self.entries[l].0);
            let dhi = if hi < n { self.entries[hi].0 - target } else { f64::INFINITY };
            if dlo == f64::INFINITY && dhi == f64::INFINITY {
                return None;
            }
            let d = dlo.min(dhi);
            let mut best: Option<usize> = None;
            if dlo == d {
                let l = lo.unwrap();
                let s = self.run_start[l];
                best = first_allowed(s..l + 1);
                lo = s.checked_sub(1);
            }
            if dhi == d {
                let e = self.run_end[hi];
                if let Some(c) = first_allowed(hi..e) {
                    best = Some(best.map_or(c, |b| b.min(c)));
                }
                hi = e;
            }
            if best.is_some() {
                return best;
            }
        }
    }
}

#[derive(Debug, Clone)]
struct SessionIndex {
    windows: usize,
    reference_end: usize,
    /// Continuous context per window, `windows x m`.
    context: Option<Matrix>,
    labels: Option<Vec<u32>>,
    /// Window indices grouped by label, ascending inside each group.
    by_class: Vec<usize>,
    /// `class_start[k]..class_start[k + 1]` spans class `k` in `by_class`.
    class_start: Vec<usize>,
    sorted_all: Option<Sorted1d>,
    sorted_by_class: Vec<Sorted1d>,
}

impl SessionIndex {
    fn class_members(&self, k: u32) -> &[usize] {
        let k = k as usize;
        if k + 1 >= self.class_start.len() {
            return &[];
        }
        &self.by_class[self.class_start[k]..self.class_start[k + 1]]
    }

    /// Number of candidates of class `k`, leaving out `exclude`.
    fn class_count_excluding(&self, k: u32, exclude: Option<usize>) -> usize {
        let m = self.class_members(k);
        m.len() - usize::from(exclude.is_some_and(|e| m.binary_search(&e).is_ok()))
    }
}

/// Draws batches of index triplets from one or more sessions. Owns its RNG.
#[derive(Debug, Clone)]
pub struct Sampler {
    config: SamplerConfig,
    receptive_field: usize,
    sessions: Vec<SessionIndex>,
    context_dim: usize,
    /// Rows of the empirical difference set `c(t) - c(t + tau)`.
    offsets: Matrix,
    rng: SeededRng,
}

impl Sampler {
    /// Indexes `sessions` for windows of `receptive_field` samples. The RNG is
    /// stream 0 of `seed`.
    pub fn new(sessions: &[Session], receptive_field: usize, config: SamplerConfig, seed: u64) -> Result<Self> {
        let mut rng = stream(seed, 0);
        validate(sessions, receptive_field, &config)?;
        let max_offset = config.time_offsets.iter().copied().max().unwrap_or(0);
        let context_dim = sessions[0].context_dim();
        let keep_context = config.mode.needs_continuous();
        let mut index = Vec::with_capacity(sessions.len());
        for s in sessions {
            let windows = s.len() + 1 - receptive_field;
            let reference_end = if config.mode.shifts_in_time() {
                s.len() - receptive_field - max_offset
            } else {
                windows
            };
            let context = s
                .continuous()
                .filter(|_| keep_context)
                .map(|c| c.slice_rows(receptive_field - 1, s.len()));
            let labels: Option<Vec<u32>> = s.discrete().map(|d| d[receptive_field - 1..].to_vec());
            let (by_class, class_start) = match &labels {
                Some(l) => group_by_class(l, s.num_classes()),
                None => (Vec::new(), Vec::new()),
            };
            let one_d = context.as_ref().filter(|c| c.cols() == 1);
            let sorted_all = one_d.map(|c| Sorted1d::new(c, 0..windows));
            let sorted_by_class = match (one_d, config.mode) {
                (Some(c), SamplingMode::Mixed) => (0..class_start.len().saturating_sub(1))
                    .map(|k| Sorted1d::new(c, by_class[class_start[k]..class_start[k + 1]].iter().copied()))
                    .collect(),
                _ => Vec::new(),
            };
            index.push(SessionIndex {
                windows,
                reference_end,
                context,
                labels,
                by_class,
                class_start,
                sorted_all,
                sorted_by_class,
            });
        }
        let offsets = if keep_context {
            offset_pool(&index, &config, context_dim, &mut rng)?
        } else {
            Matrix::zeros(0, context_dim)
        };
        Ok(Self {
            config,
            receptive_field,
            sessions: index,
            context_dim,
            offsets,
            rng,
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn receptive_field(&self) -> usize {
        self.receptive_field
    }

    pub fn num_sessions(&self) -> usize {
        self.sessions.len()
    }

    /// Number of windows in `session`.
    pub fn num_windows(&self, session: usize) -> usize {
        self.sessions[session].windows
    }

    /// End of the reference range `[0, end)` in `session`.
    pub fn reference_end(&self, session: usize) -> usize {
        self.sessions[session].reference_end
    }

    /// The empirical context-difference set used for continuous matching.
    pub fn offset_pool(&self) -> &Matrix {
        &self.offsets
    }

    /// Context of a window, if the sampler keeps continuous contexts.
    pub fn window_context(&self, w: WindowRef) -> Option<&[f64]> {
        self.sessions[w.session].context.as_ref().map(|c| c.row(w.index))
    }

    fn pick_session(&mut self) -> usize {
        let s = self.sessions.len();
        if s == 1 {
            0
        } else {
            self.rng.random_range(0..s)
        }
    }

    /// References, uniform over each session's valid range. Multi-session batches
    /// draw the same number of references from every session (`i % S`).
    pub fn sample_reference(&mut self, batch: usize) -> Result<Vec<WindowRef>> {
        if batch == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        let s = self.sessions.len();
        (0..batch)
            .map(|i| {
                let session = i % s;
                let end = self.sessions[session].reference_end;
                if end == 0 {
                    return Err(Error::EmptyRange(format!("session {session} has no reference positions")));
                }
                Ok(WindowRef {
                    session,
                    index: self.rng.random_range(0..end),
                })
            })
            .collect()
    }

    /// Every valid reference, in session then index order.
    pub fn all_references(&self) -> Vec<WindowRef> {
        self.sessions
            .iter()
            .enumerate()
            .flat_map(|(session, s)| (0..s.reference_end).map(move |index| WindowRef { session, index }))
            .collect()
    }

    /// `reference + tau` with `tau` uniform over the configured offsets.
    pub fn sample_positive_time(&mut self, reference: WindowRef) -> Result<WindowRef> {
        let offsets = &self.config.time_offsets;
        let tau = offsets[self.rng.random_range(0..offsets.len())];
        let windows = self.sessions[reference.session].windows;
        let index = reference.index + tau;
        if index >= windows {
            return Err(Error::OutOfRange { index, len: windows });
        }
        Ok(WindowRef { index, ..reference })
    }

    fn label(&self, w: WindowRef) -> Result<u32> {
        self.sessions[w.session]
            .labels
            .as_ref()
            .map(|l| l[w.index])
            .ok_or_else(|| Error::InvalidConfig("sampling mode needs a discrete context".into()))
    }

    /// Sessions holding at least one candidate of class `k` other than `reference`.
    fn sessions_with_class(&self, k: u32, reference: WindowRef) -> Vec<usize> {
        (0..self.sessions.len())
            .filter(|&s| {
                let ex = (s == reference.session).then_some(reference.index);
                self.sessions[s].class_count_excluding(k, ex) > 0
            })
            .collect()
    }

    fn pick_from(&mut self, candidates: &[usize], k: u32) -> Result<usize> {
        match candidates.len() {
            0 => Err(Error::SingletonClass { class: k }),
            1 => Ok(candidates[0]),
            n => Ok(candidates[self.rng.random_range(0..n)]),
        }
    }

    /// Uniform over other windows sharing the reference's label.
    pub fn sample_positive_discrete(&mut self, reference: WindowRef) -> Result<WindowRef> {
        let k = self.label(reference)?;
        let session = if self.sessions.len() == 1 {
            0
        } else {
            let candidates = self.sessions_with_class(k, reference);
            self.pick_from(&candidates, k)?
        };
        let si = &self.sessions[session];
        let members = si.class_members(k);
        let excluded = (session == reference.session)
            .then(|| members.binary_search(&reference.index).ok())
            .flatten();
        let count = members.len() - usize::from(excluded.is_some());
        if count == 0 {
            return Err(Error::SingletonClass { class: k });
        }
        let mut j = self.rng.random_range(0..count);
        if excluded.is_some_and(|e| j >= e) {
            j += 1;
        }
        Ok(WindowRef {
            session,
            index: members[j],
        })
    }

    fn draw_target(&mut self, reference: WindowRef) -> Result<Vec<f64>> {
        let c = self
            .window_context(reference)
            .ok_or_else(|| Error::InvalidConfig("sampling mode needs a continuous context".into()))?
            .to_vec();
        let d = self.offsets.row(self.rng.random_range(0..self.offsets.rows()));
        Ok(c.iter().zip(d).map(|(a, b)| a - b).collect())
    }

    /// Nearest window to `target` in `session`, optionally restricted to class `k`.
    fn nearest(&self, session: usize, target: &[f64], class: Option<u32>, exclude: Option<usize>) -> Option<usize> {
        let si = &self.sessions[session];
        if self.context_dim == 1 {
            let sorted = match class {
                Some(k) => si.sorted_by_class.get(k as usize)?,
                None => si.sorted_all.as_ref()?,
            };
            return sorted.nearest(target[0], exclude);
        }
        let ctx = si.context.as_ref()?;
        let mut best: Option<(f64, usize)> = None;
        let mut consider = |i: usize| {
            if Some(i) == exclude {
                return;
            }
            let d = self.config.distance.eval(ctx.row(i), target);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, i));
            }
        };
        match class {
            Some(k) => si.class_members(k).iter().for_each(|&i| consider(i)),
            None => (0..si.windows).for_each(&mut consider),
        }
        best.map(|(_, i)| i)
    }

    /// Window whose context is closest to `c(ref) - d`, `d` drawn from the
    /// empirical difference set. Ties go to the smallest index; the reference
    /// itself is never returned.
    pub fn sample_positive_continuous(&mut self, reference: WindowRef) -> Result<WindowRef> {
        let target = self.draw_target(reference)?;
        let session = self.pick_session();
        let exclude = (session == reference.session).then_some(reference.index);
        let index = self
            .nearest(session, &target, None, exclude)
            .ok_or_else(|| Error::EmptyRange("no candidate positive windows".into()))?;
        Ok(WindowRef { session, index })
    }

    /// Continuous matching among windows sharing the reference's label.
    pub fn sample_positive_mixed(&mut self, reference: WindowRef) -> Result<WindowRef> {
        let k = self.label(reference)?;
        let target = self.draw_target(reference)?;
        let session = if self.sessions.len() == 1 {
            0
        } else {
            let candidates = self.sessions_with_class(k, reference);
            self.pick_from(&candidates, k)?
        };
        let exclude = (session == reference.session).then_some(reference.index);
        let index = self
            .nearest(session, &target, Some(k), exclude)
            .ok_or(Error::SingletonClass { class: k })?;
        Ok(WindowRef { session, index })
    }

    /// `n` negatives, uniform over all windows (with replacement), or uniform over
    /// classes then within the class when `uniform_over_discrete` is set.
    pub fn sample_negatives(&mut self, n: usize) -> Vec<WindowRef> {
        (0..n)
            .map(|_| {
                let session = self.pick_session();
                let si = &self.sessions[session];
                let index = if self.config.uniform_over_discrete {
                    let present: Vec<usize> = (0..si.class_start.len() - 1)
                        .filter(|&k| si.class_start[k + 1] > si.class_start[k])
                        .collect();
                    let k = present[self.rng.random_range(0..present.len())];
                    let (a, b) = (si.class_start[k], si.class_start[k + 1]);
                    si.by_class[a + self.rng.random_range(0..b - a)]
                } else {
                    self.rng.random_range(0..si.windows)
                };
                WindowRef { session, index }
            })
            .collect()
    }

    fn positive_for(&mut self, reference: WindowRef) -> Result<WindowRef> {
        match self.config.mode {
            SamplingMode::Time => self.sample_positive_time(reference),
            SamplingMode::Discrete => self.sample_positive_discrete(reference),
            SamplingMode::Continuous | SamplingMode::Hybrid | SamplingMode::MultiSession => {
                self.sample_positive_continuous(reference)
            }
            SamplingMode::Mixed => self.sample_positive_mixed(reference),
        }
    }

    /// A full batch of `batch` references with their positives and the shared negatives.
    pub fn sample_batch(&mut self, batch: usize) -> Result<BatchTriplet> {
        let reference = self.sample_reference(batch)?;
        self.complete_batch(reference)
    }

    /// Draws positives and negatives for the given references. A time positive
    /// that would leave the session triggers a fresh reference.
    pub fn complete_batch(&mut self, mut reference: Vec<WindowRef>) -> Result<BatchTriplet> {
        let mut positive = Vec::with_capacity(reference.len());
        let mut positive_time = Vec::new();
        for r in reference.iter_mut() {
            if self.config.mode.shifts_in_time() {
                let pt = loop {
                    match self.sample_positive_time(*r) {
                        Ok(p) => break p,
                        Err(Error::OutOfRange { .. }) => {
                            let end = self.sessions[r.session].reference_end;
                            r.index = self.rng.random_range(0..end);
                        }
                        Err(e) => return Err(e),
                    }
                };
                if self.config.mode == SamplingMode::Time {
                    positive.push(pt);
                    continue;
                }
                positive_time.push(pt);
            }
            positive.push(self.positive_for(*r)?);
        }
        let negative = self.sample_negatives(self.config.num_negatives);
        Ok(BatchTriplet {
            reference,
            positive,
            positive_time,
            negative,
        })
    }
}

fn validate(sessions: &[Session], rf: usize, config: &SamplerConfig) -> Result<()> {
    let first = sessions
        .first()
        .ok_or_else(|| Error::InvalidConfig("sampler needs at least one session".into()))?;
    if rf == 0 {
        return Err(Error::InvalidConfig("receptive field must be positive".into()));
    }
    if config.num_negatives == 0 {
        return Err(Error::InvalidConfig("at least one negative is required".into()));
    }
    if config.max_offset_pool == 0 {
        return Err(Error::InvalidConfig("offset pool size must be positive".into()));
    }
    if config.mode.uses_offsets() && (config.time_offsets.is_empty() || config.time_offsets.contains(&0)) {
        return Err(Error::InvalidConfig("time offsets must be a non-empty set of positive integers".into()));
    }
    for (i, s) in sessions.iter().enumerate() {
        if s.context_dim() != first.context_dim() || s.discrete().is_some() != first.discrete().is_some() {
            return Err(Error::InvalidSession(format!(
                "session {i} has context dimension {} but session 0 has {}",
                s.context_dim(),
                first.context_dim()
            )));
        }
        if config.mode.needs_continuous() && s.continuous().is_none() {
            return Err(Error::InvalidConfig(format!(
                "{} sampling needs a continuous context",
                config.mode.name()
            )));
        }
        if (config.mode.needs_discrete() || config.uniform_over_discrete) && s.discrete().is_none() {
            return Err(Error::InvalidConfig(format!(
                "{} sampling needs a discrete context",
                if config.uniform_over_discrete { "uniform-over-discrete" } else { config.mode.name() }
            )));
        }
        if s.len() < rf {
            return Err(Error::EmptyRange(format!(
                "session {i} has {} samples, fewer than the receptive field {rf}",
                s.len()
            )));
        }
        if config.mode.uses_offsets() {
            let max = config.time_offsets.iter().copied().max().unwrap_or(0);
            if max >= s.len() - rf {
                return Err(Error::EmptyRange(format!(
                    "session {i}: largest time offset {max} leaves no valid reference in {} samples with receptive field {rf}",
                    s.len()
                )));
            }
        }
    }
    Ok(())
}

fn group_by_class(labels: &[u32], num_classes: u32) -> (Vec<usize>, Vec<usize>) {
    let k = num_classes as usize;
    let mut counts = vec![0usize; k + 1];
    for &l in labels {
        counts[l as usize + 1] += 1;
    }
    for i in 1..=k {
        counts[i] += counts[i - 1];
    }
    let start = counts.clone();
    let mut fill = counts;
    let mut by_class = vec![0; labels.len()];
    for (i, &l) in labels.iter().enumerate() {
        by_class[fill[l as usize]] = i;
        fill[l as usize] += 1;
    }
    (by_class, start)
}

/// Materializes `{c(t) - c(t + tau)}` over all sessions, or a uniform
/// subsample of `max_offset_pool` of its entries when larger.
fn offset_pool(sessions: &[SessionIndex], config: &SamplerConfig, m: usize, rng: &mut SeededRng) -> Result<Matrix> {
    // blocks of (session, tau, count)
    let mut blocks = Vec::new();
    let mut total = 0usize;
    for (s, si) in sessions.iter().enumerate() {
        for &tau in &config.time_offsets {
            let count = si.windows.saturating_sub(tau);
            if count > 0 {
                blocks.push((s, tau, total));
                total += count;
            }
        }
    }
    if total == 0 {
        return Err(Error::EmptyRange("no context pairs at the configured time offsets".into()));
    }
    let diff = |s: usize, tau: usize, t: usize, out: &mut Vec<f64>| {
        let c = sessions[s].context.as_ref().expect("continuous context checked");
        out.extend(c.row(t).iter().zip(c.row(t + tau)).map(|(a, b)| a - b));
    };
    let mut data = Vec::with_capacity(total.min(config.max_offset_pool) * m);
    if total <= config.max_offset_pool {
        for &(s, tau, _) in &blocks {
            for t in 0..sessions[s].windows - tau {
                diff(s, tau, t, &mut data);
            }
        }
    } else {
        for _ in 0..config.max_offset_pool {
            let flat = rng.random_range(0..total);
            let b = blocks.partition_point(|blk| blk.2 <= flat) - 1;
            let (s, tau, start) = blocks[b];
            diff(s, tau, flat - start, &mut data);
        }
    }
    let rows = data.len() / m;
    Matrix::from_vec(rows, m, data)
}
