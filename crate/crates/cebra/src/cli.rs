//! The `cebra` command line.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cebra_core::data::{Part, Segment};
use cebra_core::eval::{
    bin_align, consistency_matrix, exponential_k_grid, knn_decode, median_abs_error, accuracy_within,
    prediction_score, reconstruction_score, square_k_grid, Predictions, Targets,
};
use cebra_core::rng::stream;
use cebra_core::stats::median;
use cebra_core::topology::{
    betti_numbers, merge_thresholds, null_lifespans, shuffled_training_null, subsample, vr_persistence,
    PersistenceDiagram,
};
use cebra_core::trainer::infer_mode;
use cebra_core::{adapt, fit, AdaptMode, Matrix, SamplingMode, Session, SplitPlan, TrainConfig, TrainRecord};
use clap::parser::ValueSource;
use clap::{Arg, ArgMatches, Command};
use serde_json::json;

use crate::error::{Error, Result};
use crate::run_config::{schema, RunConfig};
use crate::{cbrs, csv_io, model_file, parallel};

fn subcommand(name: &'static str, about: &'static str, schema_name: &str) -> Command {
    let mut cmd = Command::new(name).about(about).arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("key=value file; flags given on the command line take precedence"),
    );
    for key in schema(schema_name) {
        let help = if key.default.is_empty() {
            key.help.to_string()
        } else {
            format!("{} [default: {}]", key.help, key.default)
        };
        let mut arg = Arg::new(key.name)
            .long(key.name.replace('_', "-"))
            .value_name("VALUE")
            .help(help);
        if matches!(key.default, "true" | "false") {
            arg = arg.num_args(0..=1).default_missing_value("true");
        }
        cmd = cmd.arg(arg);
    }
    cmd
}

pub fn command() -> Command {
    Command::new("cebra")
        .about("Contrastive embeddings of time series with behavioral labels")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(subcommand("synth", "Generate the synthetic spiking benchmark", "synth"))
        .subcommand(subcommand("fit", "Train encoders (or adapt a trained one)", "fit"))
        .subcommand(subcommand("transform", "Embed a session with a trained encoder", "transform"))
        .subcommand(
            Command::new("eval")
                .about("Evaluate embeddings")
                .subcommand_required(true)
                .subcommand(subcommand("consistency", "Pairwise R² between embeddings", "eval-consistency"))
                .subcommand(subcommand("decode", "kNN decoding of behavior from an embedding", "eval-decode"))
                .subcommand(subcommand(
                    "reconstruction",
                    "R² of an affine map from an embedding to a known latent",
                    "eval-reconstruction",
                )),
        )
        .subcommand(subcommand(
            "topology",
            "Persistent homology of an embedding with shuffle-null thresholds",
            "topology",
        ))
}

fn resolve(schema_name: &str, m: &ArgMatches) -> Result<RunConfig> {
    let mut config = RunConfig::new(schema_name);
    if let Some(file) = m.get_one::<String>("config") {
        let path = Path::new(file);
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        config.apply_text(&text, path)?;
    }
    for key in schema(schema_name) {
        if m.value_source(key.name) == Some(ValueSource::CommandLine) {
            if let Some(v) = m.get_one::<String>(key.name) {
                config.set(key.name, v)?;
            }
        }
    }
    Ok(config)
}

/// Runs the command line and returns the process exit code: 0 on success,
/// 2 for invalid input or configuration, 1 when the run itself fails.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let mut stdout = std::io::stdout().lock();
    match dispatch(&matches, &mut stdout) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(m: &ArgMatches, out: &mut dyn Write) -> Result<()> {
    let (name, sub) = m.subcommand().expect("subcommand required");
    let (schema_name, sub) = match (name, sub.subcommand()) {
        ("eval", Some((inner, args))) => (format!("eval-{inner}"), args),
        _ => (name.to_string(), sub),
    };
    let config = resolve(&schema_name, sub)?;
    let report = match schema_name.as_str() {
        "synth" => synth_cmd(&config)?,
        "fit" => fit_cmd(&config)?,
        "transform" => transform_cmd(&config)?,
        "eval-consistency" => consistency_cmd(&config)?,
        "eval-decode" => decode_cmd(&config)?,
        "eval-reconstruction" => reconstruction_cmd(&config)?,
        "topology" => topology_cmd(&config)?,
        other => unreachable!("no handler for {other}"),
    };
    writeln!(out, "{report}").map_err(|e| Error::Runtime(e.to_string()))
}

/// `dir/name.ext` with `suffix` appended to the file name.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(OsString::from).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_resolved(config: &RunConfig, primary: &Path) -> Result<()> {
    write_file(&sidecar(primary, ".cfg"), config.to_text().as_bytes())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("json value serializes");
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub fn load_session(path: &Path) -> Result<(Session, Option<Vec<i64>>)> {
    if is_csv(path) {
        let c = csv_io::read_session(path)?;
        Ok((c.session, c.trials))
    } else {
        Ok((cbrs::read_session(path)?, None))
    }
}

pub fn save_session(session: &Session, path: &Path) -> Result<()> {
    if is_csv(path) {
        write_file(path, csv_io::format_session(session, None).as_bytes())
    } else {
        cbrs::write_session(session, path)
    }
}

pub fn load_matrix(path: &Path) -> Result<Matrix> {
    if is_csv(path) {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        csv_io::parse_matrix(&text, path)
    } else {
        cbrs::read_matrix(path)
    }
}

pub fn save_matrix(m: &Matrix, path: &Path, prefix: &str) -> Result<()> {
    if is_csv(path) {
        write_file(path, csv_io::format_matrix(m, prefix).as_bytes())
    } else {
        cbrs::write_matrix(m, path)
    }
}

/// Path of the latent written next to a synthetic session: `d.cbrs` -> `d.latent.cbrs`.
pub fn latent_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(OsString::from).unwrap_or_default();
    let mut name = stem;
    name.push(".latent");
    if let Some(ext) = out.extension() {
        name.push(".");
        name.push(ext);
    }
    out.with_file_name(name)
}

fn synth_cmd(config: &RunConfig) -> Result<String> {
    let out = config.path("out")?;
    let synth = config.synth_config()?;
    let data = cebra_core::synth::generate(&synth)?;
    save_session(&data.session, &out)?;
    let latent = latent_path(&out);
    save_matrix(&data.latent, &latent, "z")?;
    let mut split = String::from("start,end,part\n");
    for Segment { range, part } in &data.split.segments {
        split.push_str(&format!("{},{},{}\n", range.start, range.end, part_name(*part)));
    }
    write_file(&sidecar(&out, ".split.csv"), split.as_bytes())?;
    write_resolved(config, &out)?;
    Ok(format!(
        "wrote {} ({} samples, {} neurons) and latent {}",
        out.display(),
        data.session.len(),
        data.session.signal_dim(),
        latent.display()
    ))
}

fn part_name(p: Part) -> &'static str {
    match p {
        Part::Train => "train",
        Part::Validation => "validation",
        Part::Test => "test",
    }
}

/// Applies the `mode`/`discrete` keys: drops contexts the mode does not use and
/// checks the ones it needs are present.
pub fn select_mode(mode: &str, discrete: bool, sessions: Vec<Session>, paths: &[PathBuf]) -> Result<(Vec<Session>, SamplingMode)> {
    let missing = |what: &str, mode: &str| -> Result<()> {
        let which: Vec<String> = sessions
            .iter()
            .zip(paths)
            .filter(|(s, _)| match what {
                "continuous_context" => s.continuous().is_none(),
                _ => s.discrete().is_none(),
            })
            .map(|(_, p)| p.display().to_string())
            .collect();
        if which.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(format!(
                "{mode} mode requires a {what} ({} columns) in {}",
                if what == "continuous_context" { "c0, c1, ..." } else { "k" },
                which.join(", ")
            )))
        }
    };
    match (mode, discrete) {
        ("auto", false) => {
            let m = infer_mode(&sessions);
            Ok((sessions, m))
        }
        ("time", _) => Ok((
            sessions.iter().map(|s| s.without_continuous().without_discrete()).collect(),
            SamplingMode::Time,
        )),
        ("behavior" | "auto", true) => {
            missing("discrete_context", "discrete behavior")?;
            let with_c = sessions.iter().all(|s| s.continuous().is_some());
            let m = if with_c { SamplingMode::Mixed } else { SamplingMode::Discrete };
            if sessions.len() > 1 {
                return Err(Error::Validation("discrete labels are supported for single-session training only".into()));
            }
            Ok((sessions, m))
        }
        ("behavior", false) => {
            missing("continuous_context", "behavior")?;
            let m = if sessions.len() > 1 { SamplingMode::MultiSession } else { SamplingMode::Continuous };
            Ok((sessions.iter().map(Session::without_discrete).collect(), m))
        }
        ("hybrid", _) => {
            missing("continuous_context", "hybrid")?;
            if sessions.len() > 1 {
                return Err(Error::Validation("hybrid mode takes a single session".into()));
            }
            Ok((sessions.iter().map(Session::without_discrete).collect(), SamplingMode::Hybrid))
        }
        (other, _) => Err(Error::Validation(format!(
            "`mode`: expected auto, time, behavior or hybrid, got `{other}`"
        ))),
    }
}

pub fn loss_csv(record: &TrainRecord) -> String {
    let mut s = String::from("step,total,pos_term,neg_term\n");
    for (i, r) in record.curve.iter().enumerate() {
        s.push_str(&format!("{i},{},{},{}\n", r.total, r.positive_term, r.negative_term));
    }
    s
}

fn fit_cmd(config: &RunConfig) -> Result<String> {
    let out = config.path("out")?;
    let paths = config.paths("data")?;
    let sessions = paths
        .iter()
        .map(|p| load_session(p).map(|s| s.0))
        .collect::<Result<Vec<_>>>()?;
    let mut train = config.train_config()?;
    let (sessions, mode) = select_mode(config.raw("mode"), config.flag("discrete")?, sessions, &paths)?;
    train.mode = Some(mode);
    let started = Instant::now();
    let fitted = if config.is_set("adapt") {
        if sessions.len() != 1 {
            return Err(Error::Validation("`adapt` takes exactly one session in `data`".into()));
        }
        let models = model_file::read_model(&config.path("adapt")?)?;
        let index: usize = config.get("adapt_encoder")?;
        let base = models.get(index).ok_or_else(|| {
            Error::Validation(format!("`adapt_encoder`: model has {} encoders, asked for {index}", models.len()))
        })?;
        let how = match config.raw("adapt_mode") {
            "input_only" => AdaptMode::InputOnly,
            "full" => AdaptMode::Full,
            v => return Err(Error::Validation(format!("`adapt_mode`: expected input_only or full, got `{v}`"))),
        };
        train.architecture = base.arch().architecture;
        adapt(base, &sessions[0], how, &train)?
    } else {
        fit(&sessions, &train)?
    };
    let seconds = started.elapsed().as_secs_f64();
    model_file::write_model(&fitted.encoders, &out)?;
    write_file(&sidecar(&out, ".loss.csv"), loss_csv(&fitted.record).as_bytes())?;
    write_resolved(config, &out)?;
    let last = fitted.record.curve.last().map_or(f64::NAN, |r| r.total);
    Ok(format!(
        "model {} ({} encoder(s), mode {:?}, {} steps, final loss {last:.6}, {seconds:.1} s) -> {}",
        fitted.record.model_id,
        fitted.encoders.len(),
        mode,
        fitted.record.curve.len(),
        out.display()
    ))
}

fn transform_cmd(config: &RunConfig) -> Result<String> {
    let out = config.path("out")?;
    let models = model_file::read_model(&config.path("model")?)?;
    let index: usize = config.get("encoder")?;
    let model = models
        .get(index)
        .ok_or_else(|| Error::Validation(format!("`encoder`: model has {} encoders, asked for {index}", models.len())))?;
    let (session, _) = load_session(&config.path("data")?)?;
    let z = model.transform_series(session.signal())?;
    save_matrix(&z, &out, "z")?;
    write_resolved(config, &out)?;
    Ok(format!("embedded {} windows into {} dimensions -> {}", z.rows(), z.cols(), out.display()))
}

/// First row of the label series matching row 0 of an embedding with `rows`
/// rows (windows end at their label, so the first `T - rows` labels have none).
fn label_offset(labels_len: usize, rows: usize, what: &Path) -> Result<usize> {
    labels_len.checked_sub(rows).ok_or_else(|| {
        Error::Validation(format!(
            "{} has {labels_len} samples, fewer than the {rows} embedding rows",
            what.display()
        ))
    })
}

fn consistency_cmd(config: &RunConfig) -> Result<String> {
    let out = config.path("out")?;
    let paths = config.paths("embeddings")?;
    if paths.len() < 2 {
        return Err(Error::Validation("`embeddings` needs at least two files".into()));
    }
    let embeddings = paths.iter().map(|p| load_matrix(p)).collect::<Result<Vec<_>>>()?;
    let (aligned, alignment) = if config.is_set("labels") {
        let label_path = config.path("labels")?;
        let (labels, _) = load_session(&label_path)?;
        let position = labels.continuous().ok_or_else(|| {
            Error::Validation(format!("{} has no continuous_context for the position", label_path.display()))
        })?;
        let range = if config.is_set("range") {
            match config.list::<f64>("range")?[..] {
                [lo, hi] => Some((lo, hi)),
                _ => return Err(Error::Validation("`range`: expected lo,hi".into())),
            }
        } else {
            None
        };
        let bins: usize = config.get("bins")?;
        let mut rows = Vec::new();
        for z in &embeddings {
            let off = label_offset(labels.len(), z.rows(), &label_path)?;
            let pos: Vec<f64> = (off..labels.len()).map(|t| position.get(t, 0)).collect();
            let dir = labels.discrete().map(|d| &d[off..]);
            rows.push(bin_align(z, &pos, dir, bins, range)?.rows);
        }
        (rows, "bins")
    } else {
        if embeddings.iter().any(|z| z.rows() != embeddings[0].rows()) {
            return Err(Error::Validation(
                "embeddings differ in length; pass `labels` to align them by behavior bins".into(),
            ));
        }
        (embeddings, "time")
    };
    let report = consistency_matrix(&aligned)?;
    let off = report.off_diagonal();
    let med = median(&off)?;
    let matrix: Vec<Vec<f64>> = report.r2.iter_rows().map(<[f64]>::to_vec).collect();
    write_json(
        &out,
        &json!({
            "alignment": alignment,
            "embeddings": paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
            "r2": matrix,
            "median_off_diagonal_r2": med,
            "rank_deficient_pairs": report.rank_deficient,
        }),
    )?;
    write_resolved(config, &out)?;
    Ok(format!("consistency median R2 {med:.6} over {} pairs -> {}", off.len(), out.display()))
}

fn k_grid(spec: &str, train_rows: usize) -> Result<Vec<usize>> {
    let grid: Vec<usize> = match spec {
        "square" => square_k_grid(),
        "exp" => exponential_k_grid(train_rows.min(900)),
        list => list
            .split(',')
            .map(|v| v.trim().parse().map_err(|_| Error::Validation(format!("`k_grid`: bad entry `{v}`"))))
            .collect::<Result<_>>()?,
    };
    Ok(grid.into_iter().filter(|&k| k <= train_rows).collect())
}

fn contiguous_plan(len: usize, fractions: &[f64]) -> Result<SplitPlan> {
    let [tr, va, te] = fractions[..] else {
        return Err(Error::Validation("`split`: expected train,validation,test fractions".into()));
    };
    if [tr, va, te].iter().any(|f| !(0.0..=1.0).contains(f)) || (tr + va + te - 1.0).abs() > 1e-9 {
        return Err(Error::Validation("`split`: fractions must lie in [0, 1] and sum to 1".into()));
    }
    let a = (len as f64 * tr).round() as usize;
    let b = ((len as f64 * (tr + va)).round() as usize).max(a);
    let segments = [(0..a, Part::Train), (a..b, Part::Validation), (b..len, Part::Test)]
        .into_iter()
        .filter(|(r, _)| !r.is_empty())
        .map(|(range, part)| Segment { range, part })
        .collect();
    Ok(SplitPlan { segments, fold: 0 })
}

fn part_rows(plan: &SplitPlan, part: Part) -> Vec<usize> {
    plan.segments
        .iter()
        .filter(|s| s.part == part)
        .flat_map(|s| s.range.clone())
        .collect()
}

fn decode_cmd(config: &RunConfig) -> Result<String> {
    let out = config.path("out")?;
    let z = load_matrix(&config.path("embedding")?)?;
    let data_path = config.path("data")?;
    let (session, trials) = load_session(&data_path)?;
    let off = label_offset(session.len(), z.rows(), &data_path)?;
    let n = z.rows();
    let task = match config.raw("task") {
        "auto" if session.continuous().is_some() => "regress",
        "auto" if session.discrete().is_some() => "classify",
        "auto" => return Err(Error::Validation(format!("{} has no context to decode", data_path.display()))),
        t @ ("regress" | "classify") => t,
        other => return Err(Error::Validation(format!("`task`: expected regress, classify or auto, got `{other}`"))),
    };
    let plan = match &trials {
        Some(ids) => SplitPlan::nested_folds(&ids[off..], config.get("folds")?, config.get("fold")?)?,
        None => contiguous_plan(n, &config.list::<f64>("split")?)?,
    };
    plan.validate(n)?;
    let [tr, va, te] = [Part::Train, Part::Validation, Part::Test].map(|p| part_rows(&plan, p));
    if tr.is_empty() || va.is_empty() || te.is_empty() {
        return Err(Error::Validation("decoding needs non-empty train, validation and test parts".into()));
    }
    let grid = k_grid(config.raw("k_grid"), tr.len())?;
    if grid.is_empty() {
        return Err(Error::Validation("`k_grid`: no k fits the training set".into()));
    }
    let (zt, zv, zs) = (z.select_rows(&tr), z.select_rows(&va), z.select_rows(&te));
    let shift = |rows: &[usize]| rows.iter().map(|r| r + off).collect::<Vec<_>>();
    let mut trace = String::new();
    let mut report = json!({ "task": task, "train": tr.len(), "validation": va.len(), "test": te.len(), "fold": plan.fold });
    let summary;
    if task == "regress" {
        let y = session.continuous().ok_or_else(|| {
            Error::Validation(format!("regression needs a continuous_context in {}", data_path.display()))
        })?;
        let (yt, yv, ys) = (y.select_rows(&shift(&tr)), y.select_rows(&shift(&va)), y.select_rows(&shift(&te)));
        let d = knn_decode(&zt, Targets::Continuous(&yt), &zv, Targets::Continuous(&yv), &zs, &grid)?;
        let Predictions::Continuous(p) = &d.predictions else { unreachable!("regression predicts values") };
        let r2 = prediction_score(&d.predictions, Targets::Continuous(&ys))?;
        let first = |m: &Matrix| (0..m.rows()).map(|i| m.get(i, 0)).collect::<Vec<f64>>();
        let mae = median_abs_error(&first(p), &first(&ys))?;
        report["k"] = json!(d.k);
        report["validation_scores"] = json!(d.validation_scores);
        report["r2"] = json!(r2);
        report["median_abs_error"] = json!(mae);
        let cols = ys.cols();
        trace.push_str("row");
        (0..cols).for_each(|c| trace.push_str(&format!(",truth{c}")));
        (0..cols).for_each(|c| trace.push_str(&format!(",pred{c}")));
        trace.push('\n');
        for (i, &row) in te.iter().enumerate() {
            trace.push_str(&(row + off).to_string());
            ys.row(i).iter().chain(p.row(i)).for_each(|v| trace.push_str(&format!(",{v}")));
            trace.push('\n');
        }
        summary = format!("decode k={} R2 {r2:.6} median abs error {mae:.6}", d.k);
    } else {
        let k = session.discrete().ok_or_else(|| {
            Error::Validation(format!("classification needs a discrete_context (k column) in {}", data_path.display()))
        })?;
        let pick = |rows: &[usize]| rows.iter().map(|r| k[r + off]).collect::<Vec<u32>>();
        let (kt, kv, ks) = (pick(&tr), pick(&va), pick(&te));
        let d = knn_decode(&zt, Targets::Classes(&kt), &zv, Targets::Classes(&kv), &zs, &grid)?;
        let Predictions::Classes(p) = &d.predictions else { unreachable!("classification predicts labels") };
        let acc = prediction_score(&d.predictions, Targets::Classes(&ks))?;
        report["k"] = json!(d.k);
        report["validation_scores"] = json!(d.validation_scores);
        report["accuracy"] = json!(acc);
        let mut line = format!("decode k={} accuracy {acc:.6}", d.k);
        if config.is_set("sample_rate") {
            let rate: f64 = config.get("sample_rate")?;
            if !(rate > 0.0 && rate.is_finite()) {
                return Err(Error::Validation("`sample_rate` must be positive".into()));
            }
            let as_f = |v: &[u32]| v.iter().map(|&x| f64::from(x)).collect::<Vec<f64>>();
            let within = accuracy_within(&as_f(p), &as_f(&ks), rate)?;
            report["accuracy_within_1s"] = json!(within);
            report["sample_rate_hz"] = json!(rate);
            line.push_str(&format!(" within 1 s {within:.6}"));
        }
        trace.push_str("row,truth,pred\n");
        for (i, &row) in te.iter().enumerate() {
            trace.push_str(&format!("{},{},{}\n", row + off, ks[i], p[i]));
        }
        summary = line;
    }
    write_json(&out, &report)?;
    write_file(&sidecar(&out, ".trace.csv"), trace.as_bytes())?;
    write_resolved(config, &out)?;
    Ok(format!("{summary} -> {}", out.display()))
}

fn reconstruction_cmd(config: &RunConfig) -> Result<String> {
    let out = config.path("out")?;
    let z = load_matrix(&config.path("embedding")?)?;
    let latent_path = config.path("latent")?;
    let latent = load_matrix(&latent_path)?;
    let off = label_offset(latent.rows(), z.rows(), &latent_path)?;
    let r2 = reconstruction_score(&latent.slice_rows(off, latent.rows()), &z)?;
    write_json(&out, &json!({ "reconstruction_r2": r2, "rows": z.rows() }))?;
    write_resolved(config, &out)?;
    Ok(format!("reconstruction R2 {r2:.6} -> {}", out.display()))
}

pub fn diagram_csv(d: &PersistenceDiagram) -> String {
    let mut s = String::from("dim,birth,death\n");
    for h in 0..=d.max_dim() {
        for bar in d.dimension(h) {
            s.push_str(&format!("{h},{},{}\n", bar.birth, bar.death));
        }
    }
    s
}

fn topology_cmd(config: &RunConfig) -> Result<String> {
    let out = config.path("out")?;
    let z = load_matrix(&config.path("embedding")?)?;
    let points: usize = config.get("points")?;
    let max_dim: usize = config.get("max_dim")?;
    let shuffles: usize = config.get("shuffles")?;
    let train: TrainConfig = config.train_config()?;
    let mut rng = stream(train.seed, 0);
    let sample = subsample(&z, points, &mut rng);
    let diagram = vr_persistence(&sample, max_dim, f64::INFINITY)?.sorted();
    let mut thresholds = vec![0.0; max_dim + 1];
    if shuffles > 0 {
        let data_path = config.path("data")?;
        let (session, _) = load_session(&data_path)?;
        let jobs = parallel::worker_count(config.get("jobs")?)?;
        let runs = parallel::map_indexed(shuffles, jobs, |i| {
            let mut pipeline = shuffled_training_null(&session, &train, points);
            null_lifespans(i, train.seed, max_dim, &mut pipeline)
        });
        for run in runs {
            merge_thresholds(&mut thresholds, &run?);
        }
    }
    let betti = betti_numbers(&diagram, &thresholds)?;
    write_file(&out, diagram_csv(&diagram).as_bytes())?;
    write_json(
        &sidecar(&out, ".json"),
        &json!({ "points": sample.rows(), "shuffles": shuffles, "thresholds": thresholds, "betti": betti }),
    )?;
    write_resolved(config, &out)?;
    let shown: Vec<String> = betti.iter().map(usize::to_string).collect();
    Ok(format!("betti ({}) from {shuffles} shuffles -> {}", shown.join(", "), out.display()))
}
