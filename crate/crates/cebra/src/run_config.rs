//! Plain-text `key=value` run configurations.
//!
//! Each subcommand has a fixed key table with defaults. Values come from the
//! defaults, then an optional config file, then command-line flags (the flag
//! for `num_hidden_units` is `--num-hidden-units`). Unknown keys are
//! rejected, and [`RunConfig::to_text`] renders every key so a run can be
//! repeated from its resolved copy.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use cebra_core::objective::SimilarityKind;
use cebra_core::sampling::ContextDistance;
use cebra_core::synth::SynthConfig;
use cebra_core::{Architecture, TrainConfig};

use crate::error::{Error, Result};

/// One configurable key: name, default (`""` for unset) and help text.
pub struct Key {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

const fn key(name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key { name, default, help }
}

const TRAIN: &[Key] = &[
    key("architecture", "offset1-model", "encoder: offset1-model, offset10-model or offset40-model"),
    key("output_dimension", "8", "embedding dimension"),
    key("num_hidden_units", "32", "hidden width"),
    key("batch_size", "1024", "references per step"),
    key("learning_rate", "0.0003", "Adam step size"),
    key("max_iterations", "1000", "optimizer steps"),
    key("temperature", "1", "InfoNCE temperature"),
    key("similarity", "dot", "dot (unit-norm output) or neg_mse"),
    key("num_negatives", "batch", "negatives per step, or `batch` for the batch size"),
    key("positive_in_negatives", "false", "include the positive in the normalizer"),
    key("time_offsets", "1,2,3,4,5,6,7,8,9,10", "comma-separated positive time offsets"),
    key("uniform_over_discrete", "false", "draw negatives uniformly over classes"),
    key("distance", "euclidean", "context distance: euclidean or manhattan"),
    key("max_offset_pool", "1000000", "cap on stored empirical context offsets"),
    key("hybrid_behavior_dims", "3", "behavior-guided coordinates in hybrid mode"),
    key("full_batch", "auto", "auto, true or false"),
    key("seed", "0", "random seed"),
];

const SYNTH: &[Key] = &[
    key("out", "", "output session (.cbrs or .csv); the latent goes to <stem>.latent.<ext>"),
    key("seed", "0", "random seed"),
    key("n_samples", "15000", "time steps"),
    key("latent_dim", "2", "latent dimension (only 2 is supported)"),
    key("n_neurons", "100", "neurons"),
    key("n_coupling_blocks", "4", "coupling blocks in the mixing flow"),
    key("coupling_hidden", "16", "hidden width of the coupling networks"),
    key("walk_step", "0.1", "step size of the behavior walk (radians)"),
    key("train_fraction", "0.8", "leading fraction marked as training data"),
];

const FIT: &[Key] = &[
    key("data", "", "session file(s), comma-separated for multi-session training"),
    key("out", "", "model file to write"),
    key("mode", "auto", "auto, time, behavior or hybrid"),
    key("discrete", "false", "use the discrete context `k` as behavior label"),
    key("adapt", "", "pretrained model to adapt to the (single) session"),
    key("adapt_mode", "input_only", "input_only or full"),
    key("adapt_encoder", "0", "which encoder of the pretrained model to adapt"),
];

const TRANSFORM: &[Key] = &[
    key("model", "", "model file"),
    key("data", "", "session file"),
    key("out", "", "embedding output (.cbrs or .csv)"),
    key("encoder", "0", "encoder index for multi-session models"),
];

const CONSISTENCY: &[Key] = &[
    key("embeddings", "", "comma-separated embedding files (at least two)"),
    key("out", "", "JSON report"),
    key("labels", "", "session whose c0 (position) and k (direction) drive bin alignment"),
    key("bins", "100", "bins per direction for alignment"),
    key("range", "", "lo,hi position range for binning (default: data min/max)"),
];

const DECODE: &[Key] = &[
    key("embedding", "", "embedding file"),
    key("data", "", "session holding the decoding targets"),
    key("out", "", "JSON report; the per-sample trace goes to <out>.trace.csv"),
    key("task", "auto", "regress, classify or auto"),
    key("k_grid", "square", "square ({1,4,9,16,25}), exp, or a comma-separated list"),
    key("split", "0.8,0.1,0.1", "train,validation,test fractions (contiguous)"),
    key("folds", "3", "outer folds when the data has a trial column"),
    key("fold", "0", "outer fold used as test set"),
    key("sample_rate", "", "samples per second, for the within-one-second accuracy"),
];

const RECONSTRUCTION: &[Key] = &[
    key("embedding", "", "embedding file"),
    key("latent", "", "ground-truth latent file"),
    key("out", "", "JSON report"),
];

const TOPOLOGY: &[Key] = &[
    key("embedding", "", "embedding file"),
    key("out", "", "persistence diagram CSV; thresholds and Betti numbers go to <out>.json"),
    key("shuffles", "0", "label-shuffled training runs for the null thresholds"),
    key("data", "", "session to retrain on with shuffled labels (needed when shuffles > 0)"),
    key("points", "500", "points subsampled from each embedding"),
    key("max_dim", "2", "highest homology dimension"),
    key("jobs", "0", "worker threads for null runs (0: all cores, capped by CEBRA_ENGINE_THREADS)"),
];

/// Key table of a subcommand (`eval` subcommands are `eval-consistency` and so on).
pub fn schema(command: &str) -> Vec<&'static Key> {
    let own: &[Key] = match command {
        "synth" => SYNTH,
        "fit" => FIT,
        "transform" => TRANSFORM,
        "eval-consistency" => CONSISTENCY,
        "eval-decode" => DECODE,
        "eval-reconstruction" => RECONSTRUCTION,
        "topology" => TOPOLOGY,
        _ => &[],
    };
    let mut keys: Vec<&Key> = own.iter().collect();
    if matches!(command, "fit" | "topology") {
        keys.extend(TRAIN.iter().filter(|k| !own.iter().any(|o| o.name == k.name)));
    }
    keys
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    command: String,
    values: BTreeMap<&'static str, String>,
    order: Vec<&'static str>,
}

impl RunConfig {
    pub fn new(command: &str) -> Self {
        let keys = schema(command);
        Self {
            command: command.into(),
            values: keys.iter().map(|k| (k.name, k.default.to_string())).collect(),
            order: keys.iter().map(|k| k.name).collect(),
        }
    }

    pub fn command(&self) -> &str {
        &self.command
    }

    pub fn set(&mut self, name: &str, value: &str) -> Result<()> {
        match self.order.iter().find(|k| **k == name) {
            Some(k) => {
                self.values.insert(k, value.trim().to_string());
                Ok(())
            }
            None => Err(Error::Validation(format!("unknown key `{name}` for `{}`", self.command))),
        }
    }

    /// Applies a `key=value` file. Blank lines and lines starting with `#` are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(origin, format!("line {}: expected key=value", i + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::format(origin, format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("# cebra {}\n", self.command.replace('-', " "));
        for k in &self.order {
            out.push_str(&format!("{k}={}\n", self.values[k]));
        }
        out
    }

    pub fn raw(&self, name: &str) -> &str {
        self.values.get(name).map(String::as_str).unwrap_or("")
    }

    pub fn is_set(&self, name: &str) -> bool {
        !self.raw(name).is_empty()
    }

    pub fn get<T: FromStr>(&self, name: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(name);
        raw.parse()
            .map_err(|e| Error::Validation(format!("`{name}`: cannot parse `{raw}`: {e}")))
    }

    pub fn required(&self, name: &str) -> Result<&str> {
        match self.raw(name) {
            "" => Err(Error::Validation(format!(
                "missing required `--{}` (config key `{name}`)",
                name.replace('_', "-")
            ))),
            v => Ok(v),
        }
    }

    pub fn path(&self, name: &str) -> Result<PathBuf> {
        self.required(name).map(PathBuf::from)
    }

    pub fn paths(&self, name: &str) -> Result<Vec<PathBuf>> {
        Ok(self.required(name)?.split(',').map(|p| PathBuf::from(p.trim())).collect())
    }

    pub fn flag(&self, name: &str) -> Result<bool> {
        match self.raw(name) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            v => Err(Error::Validation(format!("`{name}`: expected true or false, got `{v}`"))),
        }
    }

    pub fn list<T: FromStr>(&self, name: &str) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.required(name)?
            .split(',')
            .map(|v| {
                v.trim()
                    .parse()
                    .map_err(|e| Error::Validation(format!("`{name}`: cannot parse `{v}`: {e}")))
            })
            .collect()
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let architecture = Architecture::from_name(self.raw("architecture"))
            .map_err(|_| Error::Validation(format!("`architecture`: unknown model `{}`", self.raw("architecture"))))?;
        let similarity = match self.raw("similarity") {
            "dot" => SimilarityKind::Dot,
            "neg_mse" => SimilarityKind::NegMse,
            v => return Err(Error::Validation(format!("`similarity`: expected dot or neg_mse, got `{v}`"))),
        };
        let distance = match self.raw("distance") {
            "euclidean" => ContextDistance::Euclidean,
            "manhattan" => ContextDistance::Manhattan,
            v => return Err(Error::Validation(format!("`distance`: expected euclidean or manhattan, got `{v}`"))),
        };
        let num_negatives = match self.raw("num_negatives") {
            "batch" => None,
            _ => Some(self.get("num_negatives")?),
        };
        let full_batch = match self.raw("full_batch") {
            "auto" => None,
            _ => Some(self.flag("full_batch")?),
        };
        let config = TrainConfig {
            mode: None,
            time_offsets: self.list("time_offsets")?,
            uniform_over_discrete: self.flag("uniform_over_discrete")?,
            num_negatives,
            distance,
            max_offset_pool: self.get("max_offset_pool")?,
            architecture,
            output_dimension: self.get("output_dimension")?,
            num_hidden_units: self.get("num_hidden_units")?,
            batch_size: self.get("batch_size")?,
            learning_rate: self.get("learning_rate")?,
            max_iterations: self.get("max_iterations")?,
            temperature: self.get("temperature")?,
            similarity,
            positive_in_negatives: self.flag("positive_in_negatives")?,
            hybrid_behavior_dims: self.get("hybrid_behavior_dims")?,
            full_batch,
            seed: self.get("seed")?,
        };
        config.validate().map_err(|e| Error::Validation(e.to_string()))?;
        Ok(config)
    }

    pub fn synth_config(&self) -> Result<SynthConfig> {
        let config = SynthConfig {
            n_samples: self.get("n_samples")?,
            latent_dim: self.get("latent_dim")?,
            n_neurons: self.get("n_neurons")?,
            n_coupling_blocks: self.get("n_coupling_blocks")?,
            hidden: self.get("coupling_hidden")?,
            walk_step: self.get("walk_step")?,
            train_fraction: self.get("train_fraction")?,
            seed: self.get("seed")?,
        };
        config.validate()?;
        Ok(config)
    }
}
