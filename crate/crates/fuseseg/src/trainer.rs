//! Training runs on disk: checkpoints, resume, CSV reports, benchmark tables
//! and attention export.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use fuseseg_core::model::{Model, ModelSpec, StreamKind, Variant};
use fuseseg_core::objectives::{aggregate, MetricsRecord, MetricsSummary};
use fuseseg_core::optim::OptimizerState;
use fuseseg_core::synth::{kfold_split, SegmentationSample};
use fuseseg_core::train::{evaluate, EpochRecord, Split, TrainConfig, TrainSession};
use fuseseg_core::Tensor;

use crate::config::RunConfig;
use crate::dataset::write_pgm;
use crate::error::{Error, Result};
use crate::format::{model_container, model_from_container, spec_hash, Container};

pub const MODEL_FILE: &str = "model.fckp";
pub const STATE_FILE: &str = "train_state.fckp";
pub const HISTORY_FILE: &str = "history.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const RESULTS_FILE: &str = "results.csv";

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// `epoch,train_loss,val_dice` with 1-based epochs and round-trip floats.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,val_dice\n");
    for r in history {
        let _ = writeln!(s, "{},{},{}", r.epoch + 1, r.train_loss, r.val_dice);
    }
    s
}

pub fn metrics_csv(metrics: &[(String, MetricsRecord)]) -> String {
    let mut s = String::from("sample_id,dice,sensitivity,rad\n");
    for (id, m) in metrics {
        let _ = writeln!(s, "{id},{},{},{}", m.dice, m.sensitivity, m.relative_area_difference);
    }
    s
}

/// The held-out split used by `train`, and by `benchmark` unless `full_cv`.
pub fn split_for(config: &RunConfig, n_samples: usize, test_fold: usize) -> Result<Split> {
    let folds = kfold_split(n_samples, config.train.folds, config.split_seed)?;
    Ok(Split::from_folds(&folds, test_fold)?)
}

fn state_container(session: &TrainSession) -> Container {
    let names = session.model.params().names();
    let mut tensors = Vec::with_capacity(3 * names.len() + 2);
    for (prefix, moments) in [
        ("m", &session.optimizer.m),
        ("v", &session.optimizer.v),
        ("v_max", &session.optimizer.v_max),
    ] {
        for ((name, values), p) in names.iter().zip(moments).zip(session.model.params().tensors()) {
            let t = Tensor::new(p.shape().to_vec(), values.clone()).expect("moments mirror parameters");
            tensors.push((format!("{prefix}/{name}"), t));
        }
    }
    let counters = vec![session.optimizer.t as f64, session.epoch as f64, session.run_seed as f64];
    tensors.push(("counters".into(), Tensor::new([3], counters).expect("3 values")));
    let rows: Vec<f64> = session
        .history
        .iter()
        .flat_map(|r| [r.epoch as f64, r.train_loss, r.val_dice])
        .collect();
    tensors.push((
        "history".into(),
        Tensor::new([session.history.len(), 3], rows).expect("3 columns"),
    ));
    Container {
        spec_hash: spec_hash(session.model.spec()),
        param_count: session.model.count_params(),
        tensors,
    }
}

/// Writes the model checkpoint, the optimizer state and history.csv.
pub fn save_session(dir: &Path, session: &TrainSession) -> Result<()> {
    write_file(&dir.join(MODEL_FILE), &model_container(&session.model).encode())?;
    write_file(&dir.join(STATE_FILE), &state_container(session).encode())?;
    write_file(&dir.join(HISTORY_FILE), history_csv(&session.history).as_bytes())
}

fn exact_u64(v: f64, what: &str) -> Result<u64> {
    if v >= 0.0 && v.fract() == 0.0 && v < 2f64.powi(53) {
        Ok(v as u64)
    } else {
        Err(Error::Format(format!("train state {what} {v} is not a counter")))
    }
}

/// Restores a session saved by [`save_session`] for training under `config`.
pub fn load_session(dir: &Path, spec: &ModelSpec, config: &TrainConfig) -> Result<TrainSession> {
    let model = model_from_container(spec, Container::read(&dir.join(MODEL_FILE))?)?;
    let state = Container::read(&dir.join(STATE_FILE))?;
    state.check_spec(spec)?;
    let mut lookup: std::collections::HashMap<String, Tensor> = state.tensors.into_iter().collect();
    let mut take = |name: &str| {
        lookup
            .remove(name)
            .ok_or_else(|| Error::Format(format!("train state lacks {name}")))
    };
    let mut moments = [Vec::new(), Vec::new(), Vec::new()];
    for (slot, prefix) in moments.iter_mut().zip(["m", "v", "v_max"]) {
        for (name, p) in model.params().iter() {
            let t = take(&format!("{prefix}/{name}"))?;
            if t.shape() != p.shape() {
                return Err(Error::Format(format!("{prefix}/{name} has shape {:?}", t.shape())));
            }
            slot.push(t.into_data());
        }
    }
    let counters = take("counters")?;
    let [t, epoch, run_seed] = counters.data() else {
        return Err(Error::Format("counters must hold 3 values".into()));
    };
    let history_t = take("history")?;
    let history: Vec<EpochRecord> = history_t
        .data()
        .chunks_exact(3)
        .map(|c| {
            Ok(EpochRecord {
                epoch: exact_u64(c[0], "history epoch")? as usize,
                train_loss: c[1],
                val_dice: c[2],
            })
        })
        .collect::<Result<_>>()?;
    let epoch = exact_u64(*epoch, "epoch")? as usize;
    if history.len() != epoch {
        return Err(Error::Format(format!("history has {} rows for epoch {epoch}", history.len())));
    }
    config.validate()?;
    let [m, v, v_max] = moments;
    Ok(TrainSession {
        model,
        optimizer: OptimizerState {
            m,
            v,
            v_max,
            t: exact_u64(*t, "step")?,
        },
        config: config.clone(),
        run_seed: exact_u64(*run_seed, "run seed")?,
        epoch,
        history,
    })
}

pub struct TrainReport {
    pub session: TrainSession,
    /// Present once every epoch has run.
    pub metrics: Option<Vec<(String, MetricsRecord)>>,
}

fn log_epoch(log: &mut dyn Write, session: &TrainSession, r: &EpochRecord) -> Result<()> {
    writeln!(
        log,
        "epoch {}/{} lr {:.3e} train_loss {:.5} val_dice {:.4}",
        r.epoch + 1,
        session.config.epochs,
        session.config.lr_at_epoch(r.epoch),
        r.train_loss,
        r.val_dice
    )
    .map_err(|e| Error::io("<log>", e))
}

/// Trains `config.variant` into `dir`, resuming from its saved state when
/// `resume` is set and a state file exists. Stops early after
/// `config.stop_after` epochs when that is nonzero.
pub fn train_to_dir(
    config: &RunConfig,
    data: &[SegmentationSample],
    dir: &Path,
    resume: bool,
    log: &mut dyn Write,
) -> Result<TrainReport> {
    let spec = config.spec(config.variant)?;
    let split = split_for(config, data.len(), config.test_fold)?;
    let mut session = if resume && dir.join(STATE_FILE).exists() {
        let s = load_session(dir, &spec, &config.train)?;
        if s.run_seed != config.train.seed {
            return Err(Error::Validation(format!(
                "saved run used seed {}, config asks for {}",
                s.run_seed, config.train.seed
            )));
        }
        s
    } else {
        TrainSession::new(&spec, config.train.clone(), config.train.seed)?
    };
    let mut ran = 0;
    while !session.finished() && (config.stop_after == 0 || ran < config.stop_after) {
        let record = session.run_epoch(data, &split)?;
        ran += 1;
        log_epoch(log, &session, &record)?;
        let boundary = session.epoch % config.checkpoint_every == 0;
        let last = session.finished() || ran == config.stop_after;
        if boundary || last {
            save_session(dir, &session)?;
        }
    }
    if ran == 0 {
        save_session(dir, &session)?;
    }
    let metrics = if session.finished() {
        let m = evaluate(&session.model, data, &split.test, config.train.batch_size)?;
        write_file(&dir.join(METRICS_FILE), metrics_csv(&m).as_bytes())?;
        Some(m)
    } else {
        None
    };
    Ok(TrainReport { session, metrics })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkRow {
    pub variant: Variant,
    pub params: u64,
    pub summary: MetricsSummary,
    /// Held-out mean Dice of each run.
    pub run_dice: Vec<f64>,
}

/// Trains `config.runs` seeds of every variant in `config.variants`, in
/// order, and writes per-run artifacts under `dir/<variant>/run<r>` plus
/// `dir/results.csv`.
pub fn benchmark(
    config: &RunConfig,
    data: &[SegmentationSample],
    dir: &Path,
    log: &mut dyn Write,
) -> Result<Vec<BenchmarkRow>> {
    let folds: Vec<usize> = if config.full_cv {
        (0..config.train.folds).collect()
    } else {
        vec![config.test_fold]
    };
    let splits = folds
        .iter()
        .map(|&f| split_for(config, data.len(), f))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(config.variants.len());
    for &variant in &config.variants {
        let spec = config.spec(variant)?;
        let mut runs = Vec::with_capacity(config.train.runs);
        let mut params = 0;
        for r in 0..config.train.runs {
            let run_seed = config.train.seed + r as u64;
            let mut run_metrics = Vec::new();
            for (&fold, split) in folds.iter().zip(&splits) {
                let mut run_dir = dir.join(variant.name()).join(format!("run{r}"));
                if config.full_cv {
                    run_dir = run_dir.join(format!("fold{}", fold + 1));
                }
                let mut session = TrainSession::new(&spec, config.train.clone(), run_seed)?;
                params = session.model.count_params();
                while !session.finished() {
                    let record = session.run_epoch(data, split)?;
                    if record.epoch + 1 == session.config.epochs || (record.epoch + 1) % 10 == 0 {
                        write!(log, "{variant} run {r} fold {}: ", fold + 1).map_err(|e| Error::io("<log>", e))?;
                        log_epoch(log, &session, &record)?;
                    }
                }
                let metrics = evaluate(&session.model, data, &split.test, config.train.batch_size)?;
                write_file(&run_dir.join(MODEL_FILE), &model_container(&session.model).encode())?;
                write_file(&run_dir.join(HISTORY_FILE), history_csv(&session.history).as_bytes())?;
                write_file(&run_dir.join(METRICS_FILE), metrics_csv(&metrics).as_bytes())?;
                run_metrics.extend(metrics.into_iter().map(|(_, m)| m));
            }
            runs.push(run_metrics);
        }
        let run_dice = runs
            .iter()
            .map(|r| r.iter().map(|m| m.dice).sum::<f64>() / r.len() as f64)
            .collect();
        rows.push(BenchmarkRow {
            variant,
            params,
            summary: aggregate(&runs)?,
            run_dice,
        });
    }
    write_file(&dir.join(RESULTS_FILE), results_csv(&rows).as_bytes())?;
    Ok(rows)
}

/// Percentages with one decimal.
pub fn results_csv(rows: &[BenchmarkRow]) -> String {
    let mut s = String::from("variant,params,dice_mean,dice_sd,sens_mean,sens_sd,rad_mean,rad_sd\n");
    for row in rows {
        let m = &row.summary;
        let _ = write!(s, "{},{}", row.variant, row.params);
        for ms in [m.dice, m.sensitivity, m.relative_area_difference] {
            let _ = write!(s, ",{:.1},{:.1}", 100.0 * ms.mean, 100.0 * ms.sd);
        }
        s.push('\n');
    }
    s
}

pub fn results_table(rows: &[BenchmarkRow]) -> String {
    let mut s = format!(
        "{:<14} {:>12} {:>14} {:>14} {:>14}\n",
        "variant", "params", "Dice (%)", "Sens (%)", "RAD (%)"
    );
    for row in rows {
        let m = &row.summary;
        let _ = writeln!(
            s,
            "{:<14} {:>12} {:>14} {:>14} {:>14}",
            row.variant.name(),
            row.params,
            m.dice.to_string(),
            m.sensitivity.to_string(),
            m.relative_area_difference.to_string()
        );
    }
    s
}

#[derive(Debug, Clone)]
pub struct ExportedMap {
    pub block: usize,
    pub stream: StreamKind,
    pub path: PathBuf,
    /// Unscaled `(1, 1, h, w)` attention values.
    pub map: Tensor,
}

/// Writes `block{i}.pgm` for each attention site of `model` on `sample`;
/// assistant-stream maps are named `block{i}_assistant.pgm`.
pub fn export_attention(model: &Model, sample: &SegmentationSample, dir: &Path) -> Result<Vec<ExportedMap>> {
    let variant = model.spec().variant;
    if !variant.has_attention() {
        let with: Vec<&str> = Variant::ALL
            .iter()
            .filter(|v| v.has_attention())
            .map(|v| v.name())
            .collect();
        return Err(Error::Validation(format!(
            "{variant} has no spatial attention; attention export needs one of {}",
            with.join(", ")
        )));
    }
    let lift = |t: &Tensor| {
        let mut shape = vec![1];
        shape.extend_from_slice(t.shape());
        t.clone().reshape(shape)
    };
    let master = lift(&sample.master)?;
    let assistant = lift(&sample.assistant)?;
    let (_, maps) = model.predict(&master, variant.uses_assistant().then_some(&assistant))?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    maps.into_iter()
        .map(|(block, stream, map)| {
            let name = match stream {
                StreamKind::Master => format!("block{block}.pgm"),
                StreamKind::Assistant => format!("block{block}_assistant.pgm"),
            };
            let path = dir.join(name);
            write_pgm(&path, &map)?;
            Ok(ExportedMap {
                block,
                stream,
                path,
                map,
            })
        })
        .collect()
}
