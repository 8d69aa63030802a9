//! One function per subcommand. Result lines go to `out`; per-epoch
//! progress goes to stderr.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ctdense::data::{load_reference, split, synth_generate, DatasetSplit, ImageCache, StudyRecord};
use ctdense::mha::read_mha;
use ctdense::model::{count_connections, feature_map_plan, load_checkpoint, save_checkpoint, weighted_layer_count, Layout};
use ctdense::preprocess::preprocess;
use ctdense::train::{evaluate, predict, train, EpochMetrics, MetricsLog, MetricsWriter};
use ctdense::{DenseNetConfig, DenseNetModel};

use crate::config::RunConfig;
use crate::{io_error, CliError};

pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const RUN_CONFIG_FILE: &str = "run.conf";
pub const LOSS_SERIES_FILE: &str = "loss.csv";
pub const ACCURACY_SERIES_FILE: &str = "accuracy.csv";

pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch-{epoch:03}.ckpt")
}

fn emit(out: &mut dyn Write, line: &str) -> Result<(), CliError> {
    writeln!(out, "{line}").map_err(io_error("writing output"))
}

fn metrics_line(m: &EpochMetrics) -> String {
    format!(
        "epoch={} train_loss={:.6} val_loss={:.6} val_accuracy={:.4}",
        m.epoch, m.train_loss, m.val_loss, m.val_accuracy
    )
}

fn read_records(cfg: &RunConfig) -> Result<Vec<StudyRecord>, CliError> {
    let (data_dir, reference) = cfg.data_paths()?;
    let bytes = fs::read(&reference).map_err(io_error(format!("reading {}", reference.display())))?;
    Ok(load_reference(&bytes, &data_dir)?)
}

fn cache(cfg: &RunConfig) -> Result<Option<ImageCache>, CliError> {
    Ok(cfg.cache_dir.as_ref().map(ImageCache::new).transpose()?)
}

fn load_model(path: &Path) -> Result<DenseNetModel, CliError> {
    load_checkpoint(path).map_err(|e| CliError::Data(format!("checkpoint {}: {e}", path.display())))
}

/// Trains from scratch, writing `metrics.csv`, periodic and final
/// checkpoints and the effective `run.conf` under `output_dir`.
pub fn cmd_train(cfg: &RunConfig, out: &mut dyn Write) -> Result<EpochMetrics, CliError> {
    let model_cfg = cfg.model_config()?;
    let train_cfg = cfg.train_config(model_cfg.input_size)?;
    let records = read_records(cfg)?;
    let split = if cfg.validate_on_train {
        if records.is_empty() {
            return Err(CliError::Data("reference file lists no studies".into()));
        }
        DatasetSplit {
            train: records.clone(),
            validation: records,
            seed: cfg.seed,
        }
    } else {
        split(&records, cfg.validation_count, cfg.seed)?
    };
    let cache = cache(cfg)?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(io_error(format!("creating {}", dir.display())))?;
    fs::write(dir.join(RUN_CONFIG_FILE), cfg.to_text()).map_err(io_error(format!("writing {RUN_CONFIG_FILE}")))?;
    let mut writer = MetricsWriter::create(&dir.join(METRICS_FILE))?;

    let mut model = DenseNetModel::build(&model_cfg, cfg.seed)?;
    eprintln!(
        "training {} ({} params) on {} studies, validating on {}",
        model_cfg.label(),
        model.count_params(),
        split.train.len(),
        split.validation.len()
    );
    let every = cfg.checkpoint_every;
    let log = train(&mut model, &split, &train_cfg, cache.as_ref(), |m, model| {
        writer.append(m)?;
        eprintln!("{}", metrics_line(m));
        if every > 0 && m.epoch % every == 0 {
            save_checkpoint(model, &dir.join(checkpoint_name(m.epoch)))?;
        }
        Ok(())
    })?;
    save_checkpoint(&model, &dir.join(FINAL_CHECKPOINT))?;
    let last = *log.epochs.last().expect("epochs validated to be at least 1");
    emit(out, &metrics_line(&last))?;
    Ok(last)
}

/// Evaluates a checkpoint over every record and writes the per-patient table.
pub fn cmd_evaluate(cfg: &RunConfig, checkpoint: &Path, table: &Path, out: &mut dyn Write) -> Result<(f64, f64), CliError> {
    let model = load_model(checkpoint)?;
    let pre = cfg.preprocess_config(model.config().input_size)?;
    let records = read_records(cfg)?;
    let cache = cache(cfg)?;
    let eval = evaluate(&model, &records, &pre, cfg.threshold, cfg.batch_size, cache.as_ref())?;
    fs::write(table, eval.to_csv()).map_err(io_error(format!("writing {}", table.display())))?;
    emit(
        out,
        &format!("loss={:.6} accuracy={:.4} patients={}", eval.loss, eval.accuracy, eval.patients.len()),
    )?;
    Ok((eval.loss, eval.accuracy))
}

/// Classifies one volume.
pub fn cmd_predict(cfg: &RunConfig, checkpoint: &Path, volume: &Path, out: &mut dyn Write) -> Result<[u8; 2], CliError> {
    let model = load_model(checkpoint)?;
    let pre = cfg.preprocess_config(model.config().input_size)?;
    let bytes = fs::read(volume).map_err(io_error(format!("reading {}", volume.display())))?;
    let vol = read_mha(&bytes).map_err(|e| CliError::Data(format!("{}: {e}", volume.display())))?;
    let id = volume.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    let image = preprocess(&vol, &id, &pre).map_err(|e| CliError::Data(format!("{}: {e}", volume.display())))?;
    let p = predict(&model, &image.image, cfg.threshold)?;
    emit(
        out,
        &format!(
            "prob_covid={:.4} prob_severe={:.4} covid={} severe={}",
            p.probabilities[0], p.probabilities[1], p.labels[0], p.labels[1]
        ),
    )?;
    Ok(p.labels)
}

#[derive(Debug, Clone, Default)]
pub struct DescribeOptions {
    pub num_outputs: Option<usize>,
    pub input_channels: Option<usize>,
}

/// Architecture table for a preset name or a checkpoint file.
pub fn cmd_describe(target: &str, opts: &DescribeOptions, out: &mut dyn Write) -> Result<DenseNetConfig, CliError> {
    let mut cfg = match DenseNetConfig::preset(target) {
        Some(cfg) => cfg,
        None if Path::new(target).is_file() => load_model(Path::new(target))?.config().clone(),
        None => {
            return Err(CliError::Usage(format!(
                "{target:?} is neither a preset (densenet121, densenet169, reduced) nor a checkpoint file"
            )))
        }
    };
    if let Some(n) = opts.num_outputs {
        cfg.num_outputs = n;
    }
    if let Some(c) = opts.input_channels {
        cfg.input_channels = c;
    }
    cfg.validate()?;
    let plan = feature_map_plan(&cfg)?;
    let params = Layout::new(&cfg)?.param_count();
    let layers = weighted_layer_count(&cfg);

    let mut text = format!(
        "{}: growth rate {}, initial features {}, blocks {:?}, compression {}\ninput: {}x{}x{}\n",
        cfg.label(),
        cfg.growth_rate,
        cfg.init_features,
        cfg.block_layers,
        cfg.compression,
        cfg.input_channels,
        cfg.input_size,
        cfg.input_size
    );
    text += &format!("{:<18}{:<10}{:<10}{}\n", "stage", "output", "channels", "layer");
    for s in &plan {
        let size = format!("{0}x{0}", s.spatial);
        text += &format!("{:<18}{:<10}{:<10}{}\n", s.name, size, s.channels, s.layer);
    }
    text += &format!("params: {params}\nlayers: {layers}\nconnections: {}", count_connections(layers as u64));
    emit(out, &text)?;
    Ok(cfg)
}

/// Writes a synthetic dataset: `out_dir/data/*.mha` plus `out_dir/reference.csv`.
pub fn cmd_synth(n: usize, seed: u64, image_size: usize, out_dir: &Path, out: &mut dyn Write) -> Result<Vec<StudyRecord>, CliError> {
    if n == 0 {
        return Err(CliError::Config("n must be at least 1".into()));
    }
    if image_size < ctdense::preprocess::MIN_TARGET {
        return Err(CliError::Config(format!(
            "image size must be at least {}",
            ctdense::preprocess::MIN_TARGET
        )));
    }
    let records = synth_generate(n, seed, image_size, out_dir)?;
    let covid = records.iter().filter(|r| r.label_covid == 1).count();
    let severe = records.iter().filter(|r| r.label_severe == 1).count();
    emit(
        out,
        &format!("wrote {n} studies to {} (covid={covid} severe={severe})", out_dir.display()),
    )?;
    Ok(records)
}

#[derive(Debug, Clone)]
pub struct CurveOptions {
    /// Trailing moving-average window; 1 leaves the series unchanged.
    pub window: usize,
    /// Keep every `stride`-th point (and always the last).
    pub stride: usize,
    pub out_dir: PathBuf,
}

/// Mean of `values[max(0, i - window + 1)..=i]` for every `i`.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

/// Writes `loss.csv` and `accuracy.csv` series from a metrics file.
pub fn cmd_curves(metrics: &Path, opts: &CurveOptions, out: &mut dyn Write) -> Result<usize, CliError> {
    if opts.window == 0 || opts.stride == 0 {
        return Err(CliError::Config("window and stride must be at least 1".into()));
    }
    let text = fs::read_to_string(metrics).map_err(io_error(format!("reading {}", metrics.display())))?;
    let log = MetricsLog::parse_csv(&text).map_err(|e| CliError::Data(format!("{}: {e}", metrics.display())))?;
    let column = |f: fn(&EpochMetrics) -> f64| moving_average(&log.epochs.iter().map(f).collect::<Vec<_>>(), opts.window);
    let (train, val, acc) = (column(|m| m.train_loss), column(|m| m.val_loss), column(|m| m.val_accuracy));
    let n = log.epochs.len();
    let keep: Vec<usize> = (0..n).filter(|&i| i % opts.stride == 0 || i + 1 == n).collect();

    let mut loss = String::from("epoch,train_loss,val_loss\n");
    let mut accuracy = String::from("epoch,val_accuracy\n");
    for &i in &keep {
        let epoch = log.epochs[i].epoch;
        loss += &format!("{epoch},{},{}\n", train[i], val[i]);
        accuracy += &format!("{epoch},{}\n", acc[i]);
    }
    fs::create_dir_all(&opts.out_dir).map_err(io_error(format!("creating {}", opts.out_dir.display())))?;
    for (name, body) in [(LOSS_SERIES_FILE, loss), (ACCURACY_SERIES_FILE, accuracy)] {
        let path = opts.out_dir.join(name);
        fs::write(&path, body).map_err(io_error(format!("writing {}", path.display())))?;
    }
    emit(
        out,
        &format!("wrote {} points per series to {}", keep.len(), opts.out_dir.display()),
    )?;
    Ok(keep.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moving_average_definition() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(moving_average(&v, 1), v);
        assert_eq!(moving_average(&v, 3), [1.0, 1.5, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(moving_average(&v, 100), [1.0, 1.5, 2.0, 2.5, 3.0, 3.5]);
    }

    #[test]
    fn checkpoint_names_sort_by_epoch() {
        assert_eq!(checkpoint_name(10), "epoch-010.ckpt");
        assert!(checkpoint_name(90) < checkpoint_name(100));
    }
}
