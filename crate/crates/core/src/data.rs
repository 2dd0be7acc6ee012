//! Session data model, validation and train/validation/test splitting.

use alloc::format;
use alloc::vec::Vec;
use core::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// One recording: a `T x n` signal with optional continuous (`T x m`) and
/// discrete (length `T`, values in `[0, K)`) context series.
#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    signal: Matrix,
    continuous: Option<Matrix>,
    discrete: Option<Vec<u32>>,
    num_classes: u32,
}

impl Session {
    /// Validates and assembles a session. `K` is taken as `max(k) + 1`.
    pub fn new(signal: Matrix, continuous: Option<Matrix>, discrete: Option<Vec<u32>>) -> Result<Self> {
        let k = discrete
            .as_ref()
            .and_then(|d| d.iter().max().copied())
            .map_or(0, |m| m + 1);
        Self::with_num_classes(signal, continuous, discrete, k)
    }

    /// Like [`Session::new`] but with an explicit class count `K`.
    pub fn with_num_classes(
        signal: Matrix,
        continuous: Option<Matrix>,
        discrete: Option<Vec<u32>>,
        num_classes: u32,
    ) -> Result<Self> {
        let t = signal.rows();
        if t == 0 || signal.cols() == 0 {
            return Err(Error::InvalidSession("signal must have at least one sample and one channel".into()));
        }
        if let Some(row) = first_non_finite(&signal) {
            return Err(Error::InvalidSession(format!("non-finite signal value in row {row}")));
        }
        let continuous = continuous.filter(|c| c.cols() > 0);
        if let Some(c) = &continuous {
            if c.rows() != t {
                return Err(Error::InvalidSession(format!(
                    "continuous context has {} rows, signal has {t}",
                    c.rows()
                )));
            }
            if let Some(row) = first_non_finite(c) {
                return Err(Error::InvalidSession(format!("non-finite context value in row {row}")));
            }
        }
        let num_classes = if discrete.is_some() { num_classes } else { 0 };
        if let Some(d) = &discrete {
            if d.len() != t {
                return Err(Error::InvalidSession(format!(
                    "discrete context has {} entries, signal has {t}",
                    d.len()
                )));
            }
            if let Some((row, &v)) = d.iter().enumerate().find(|(_, &v)| v >= num_classes) {
                return Err(Error::InvalidSession(format!(
                    "discrete value {v} in row {row} outside [0, {num_classes})"
                )));
            }
        }
        Ok(Self {
            signal,
            continuous,
            discrete,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.signal.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn signal(&self) -> &Matrix {
        &self.signal
    }

    pub fn signal_dim(&self) -> usize {
        self.signal.cols()
    }

    pub fn continuous(&self) -> Option<&Matrix> {
        self.continuous.as_ref()
    }

    /// Width `m` of the continuous context, 0 when absent.
    pub fn context_dim(&self) -> usize {
        self.continuous.as_ref().map_or(0, Matrix::cols)
    }

    pub fn discrete(&self) -> Option<&[u32]> {
        self.discrete.as_deref()
    }

    pub fn num_classes(&self) -> u32 {
        self.num_classes
    }

    /// Samples `[start, end)` as a new session.
    pub fn slice(&self, range: Range<usize>) -> Session {
        Session {
            signal: self.signal.slice_rows(range.start, range.end),
            continuous: self.continuous.as_ref().map(|c| c.slice_rows(range.start, range.end)),
            discrete: self.discrete.as_ref().map(|d| d[range].to_vec()),
            num_classes: self.num_classes,
        }
    }

    /// Joins sessions end to end; they must agree on every dimension.
    pub fn concat(parts: &[Session]) -> Result<Session> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidSession("nothing to concatenate".into()))?;
        for p in parts {
            if p.signal_dim() != first.signal_dim()
                || p.context_dim() != first.context_dim()
                || p.discrete.is_some() != first.discrete.is_some()
            {
                return Err(Error::InvalidSession("concatenated sessions differ in layout".into()));
            }
        }
        let signals: Vec<&Matrix> = parts.iter().map(|p| &p.signal).collect();
        let continuous = match first.continuous {
            Some(_) => {
                let cs: Vec<&Matrix> = parts.iter().filter_map(|p| p.continuous.as_ref()).collect();
                Some(Matrix::vstack(&cs)?)
            }
            None => None,
        };
        let discrete = first
            .discrete
            .as_ref()
            .map(|_| parts.iter().flat_map(|p| p.discrete.iter().flatten().copied()).collect());
        Ok(Session {
            signal: Matrix::vstack(&signals)?,
            continuous,
            discrete,
            num_classes: parts.iter().map(|p| p.num_classes).max().unwrap_or(0),
        })
    }

    /// Same signal, with both context series permuted over time by one shared
    /// random permutation. This is the label-shuffled control.
    pub fn with_shuffled_labels<R: Rng>(&self, rng: &mut R) -> Session {
        let mut perm: Vec<usize> = (0..self.len()).collect();
        perm.shuffle(rng);
        Session {
            signal: self.signal.clone(),
            continuous: self.continuous.as_ref().map(|c| c.select_rows(&perm)),
            discrete: self.discrete.as_ref().map(|d| perm.iter().map(|&i| d[i]).collect()),
            num_classes: self.num_classes,
        }
    }

    /// Drops the continuous context.
    pub fn without_continuous(&self) -> Session {
        Session {
            continuous: None,
            ..self.clone()
        }
    }

    /// Drops the discrete context.
    pub fn without_discrete(&self) -> Session {
        Session {
            discrete: None,
            num_classes: 0,
            ..self.clone()
        }
    }
}

fn first_non_finite(m: &Matrix) -> Option<usize> {
    m.iter_rows().position(|r| r.iter().any(|v| !v.is_finite()))
}

/// Ordered sessions sharing the continuous context dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiSessionDataset {
    sessions: Vec<Session>,
}

impl MultiSessionDataset {
    pub fn new(sessions: Vec<Session>) -> Result<Self> {
        let first = sessions
            .first()
            .ok_or_else(|| Error::InvalidSession("a dataset needs at least one session".into()))?;
        let m = first.context_dim();
        let has_k = first.discrete().is_some();
        for (i, s) in sessions.iter().enumerate() {
            if s.context_dim() != m {
                return Err(Error::InvalidSession(format!(
                    "session {i} has context dimension {} but session 0 has {m}",
                    s.context_dim()
                )));
            }
            if s.discrete().is_some() != has_k {
                return Err(Error::InvalidSession(format!(
                    "session {i} disagrees with session 0 on the presence of a discrete context"
                )));
            }
        }
        Ok(Self { sessions })
    }

    pub fn sessions(&self) -> &[Session] {
        &self.sessions
    }

    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }

    pub fn context_dim(&self) -> usize {
        self.sessions[0].context_dim()
    }

    pub fn into_sessions(self) -> Vec<Session> {
        self.sessions
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub range: Range<usize>,
    pub part: Part,
}

/// Assignment of contiguous, trial-aligned sample ranges to train/validation/test.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    pub segments: Vec<Segment>,
    pub fold: usize,
}

impl SplitPlan {
    /// Leading `train_fraction` of the samples for training, the rest for validation.
    pub fn train_validation(len: usize, train_fraction: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&train_fraction) {
            return Err(Error::InvalidConfig(format!("train fraction {train_fraction} outside [0, 1]")));
        }
        let cut = libm::round(len as f64 * train_fraction) as usize;
        let mut segments = Vec::new();
        if cut > 0 {
            segments.push(Segment {
                range: 0..cut,
                part: Part::Train,
            });
        }
        if cut < len {
            segments.push(Segment {
                range: cut..len,
                part: Part::Validation,
            });
        }
        Ok(Self { segments, fold: 0 })
    }

    /// Everything in one part.
    pub fn single(len: usize, part: Part) -> Self {
        Self {
            segments: alloc::vec![Segment { range: 0..len, part }],
            fold: 0,
        }
    }

    /// Outer fold `fold` of a `k`-fold nested cross-validation over trials.
    ///
    /// Trials are maximal runs of equal `trial_ids`. They are grouped into `k`
    /// contiguous chunks; chunk `fold` is the test set. Of the remaining trials
    /// the last fifth (at least one when two or more remain) is validation.
    pub fn nested_folds(trial_ids: &[i64], k: usize, fold: usize) -> Result<Self> {
        if k < 2 || fold >= k {
            return Err(Error::InvalidConfig(format!("fold {fold} invalid for k = {k}")));
        }
        let trials = trial_ranges(trial_ids);
        if trials.len() < k {
            return Err(Error::InvalidConfig(format!(
                "{} trials cannot be split into {k} folds",
                trials.len()
            )));
        }
        let chunk_start = |c: usize| c * trials.len() / k;
        let test = chunk_start(fold)..chunk_start(fold + 1);
        let rest: Vec<usize> = (0..trials.len()).filter(|i| !test.contains(i)).collect();
        let n_val = if rest.len() >= 2 { (rest.len() / 5).max(1) } else { 0 };
        let val: Vec<usize> = rest[rest.len() - n_val..].to_vec();

        let mut segments: Vec<Segment> = Vec::new();
        for (i, r) in trials.into_iter().enumerate() {
            let part = if test.contains(&i) {
                Part::Test
            } else if val.contains(&i) {
                Part::Validation
            } else {
                Part::Train
            };
            match segments.last_mut() {
                Some(last) if last.part == part && last.range.end == r.start => last.range.end = r.end,
                _ => segments.push(Segment { range: r, part }),
            }
        }
        Ok(Self { segments, fold })
    }

    /// Checks the segments are disjoint, ordered and cover `[0, len)`.
    pub fn validate(&self, len: usize) -> Result<()> {
        let mut sorted: Vec<&Segment> = self.segments.iter().collect();
        sorted.sort_by_key(|s| (s.range.start, s.range.end));
        let mut cursor = 0;
        for s in sorted {
            if s.range.start < cursor {
                return Err(Error::InvalidConfig(format!(
                    "split segment {:?} overlaps the previous one",
                    s.range
                )));
            }
            if s.range.start > cursor {
                return Err(Error::InvalidConfig(format!("samples {cursor}..{} are not assigned", s.range.start)));
            }
            if s.range.end <= s.range.start {
                return Err(Error::InvalidConfig(format!("empty split segment {:?}", s.range)));
            }
            cursor = s.range.end;
        }
        if cursor != len {
            return Err(Error::InvalidConfig(format!("split covers {cursor} of {len} samples")));
        }
        Ok(())
    }
}

fn trial_ranges(ids: &[i64]) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=ids.len() {
        if i == ids.len() || ids[i] != ids[i - 1] {
            out.push(start..i);
            start = i;
        }
    }
    out
}

/// The three parts of a split; a part with no samples is `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitSessions {
    pub train: Option<Session>,
    pub validation: Option<Session>,
    pub test: Option<Session>,
}

/// Cuts `session` along `plan`. Each part concatenates its segments in plan order.
pub fn split(session: &Session, plan: &SplitPlan) -> Result<SplitSessions> {
    plan.validate(session.len())?;
    let gather = |part: Part| -> Result<Option<Session>> {
        let pieces: Vec<Session> = plan
            .segments
            .iter()
            .filter(|s| s.part == part)
            .map(|s| session.slice(s.range.clone()))
            .collect();
        if pieces.is_empty() {
            Ok(None)
        } else {
            Session::concat(&pieces).map(Some)
        }
    };
    Ok(SplitSessions {
        train: gather(Part::Train)?,
        validation: gather(Part::Validation)?,
        test: gather(Part::Test)?,
    })
}
