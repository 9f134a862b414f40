//! The `train`, `eval` and `embed` commands, independent of argument parsing.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::config::{DataSource, RunConfig};
use crate::data::{generate_synthetic_pairs, load_png, ChannelStats, Dataset};
use crate::error::{Error, Result};
use crate::eval::{recall_curve, RecallReport};
use crate::model::{Descriptors, Model};
use crate::tensor::Tensor;
use crate::train::{EpochMetrics, Trainer};
use crate::Branch;

/// Directory that relative data paths in a config file resolve against.
fn config_base(config_path: Option<&Path>) -> PathBuf {
    config_path
        .and_then(Path::parent)
        .map(Path::to_path_buf)
        .unwrap_or_default()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn loss_log_path(config: &RunConfig, checkpoint: &Path) -> PathBuf {
    config
        .output
        .loss_log
        .clone()
        .unwrap_or_else(|| checkpoint.with_extension("loss.csv"))
}

fn check_input_size(config: &RunConfig, data: &Dataset) -> Result<()> {
    let want = config.model.backbone.input_size;
    if data.image_hw() != want {
        let [h, w] = data.image_hw();
        return Err(Error::dim(format!(
            "images are {h}x{w}, the model expects {}x{}",
            want[0], want[1]
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochMetrics>,
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
}

/// Train for `config.train.epochs` epochs (further epochs when resuming),
/// then write the checkpoint and the per-epoch loss log.
pub fn run_train(
    config: &RunConfig,
    config_path: Option<&Path>,
    out: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let (mut train, _) = config.data.load_split(&config_base(config_path))?;
    check_input_size(config, &train)?;
    let stats = ChannelStats::compute(&train);
    train.standardize(&stats);
    if train.len() < config.train.batch_size {
        return Err(Error::Data(format!(
            "training split has {} locations, fewer than one batch of {}",
            train.len(),
            config.train.batch_size
        )));
    }

    let mut trainer = match resume {
        None => Trainer::new(Model::new(&config.model)?, config.train.clone(), config.loss)?,
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            ckpt.check_config(&config.model)?;
            let model = ckpt.restore_model()?;
            let mut t = Trainer::new(model, config.train.clone(), config.loss)?;
            if let Some(adam) = ckpt.restore_adam(&t.model)? {
                t.adam = adam;
            }
            t.epoch = ckpt.epoch as usize;
            t
        }
    };

    let log_path = loss_log_path(config, out);
    let fresh_log = resume.is_none() || !log_path.exists();
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh_log)
        .truncate(fresh_log)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    if fresh_log {
        writeln!(log, "epoch,mean_loss,batches").map_err(|e| Error::io(&log_path, e))?;
    }

    let mut epochs = Vec::with_capacity(config.train.epochs);
    for _ in 0..config.train.epochs {
        let m = trainer.train_epoch(&train)?;
        writeln!(log, "{},{:.9e},{}", m.epoch, m.mean_loss, m.batches).map_err(|e| Error::io(&log_path, e))?;
        epochs.push(m);
    }
    Checkpoint::from_trainer(&trainer, &config.data, &stats).save(out)?;
    Ok(TrainOutcome {
        epochs,
        checkpoint: out.to_path_buf(),
        loss_log: log_path,
    })
}

/// Descriptors for one branch of a standardised dataset.
pub fn embed_dataset(model: &mut Model<f32>, data: &Dataset, branch: Branch, chunk: usize) -> Result<Descriptors<f32>> {
    model.embed_all(&data.images(branch), branch, chunk)
}

/// Embed the held-out split with a trained checkpoint and report recall.
pub fn evaluate(config: &RunConfig, config_path: Option<&Path>, checkpoint: &Path) -> Result<RecallReport> {
    config.validate()?;
    let ckpt = Checkpoint::load(checkpoint)?;
    ckpt.check_config(&config.model)?;
    let mut model = ckpt.restore_model()?;
    let (_, mut test) = config.data.load_split(&config_base(config_path))?;
    check_input_size(config, &test)?;
    test.standardize(&ckpt.stats()?);
    let chunk = config.eval.embed_batch;
    let g = embed_dataset(&mut model, &test, Branch::Ground, chunk)?;
    let s = embed_dataset(&mut model, &test, Branch::Satellite, chunk)?;
    recall_curve(&g.values, &s.values, &config.eval.k_list, &config.eval.percent_list)
}

/// `metric,K_or_percent,value` rows.
pub fn report_csv(report: &RecallReport) -> String {
    let mut out = String::from("metric,K_or_percent,value\n");
    for &(k, r) in &report.recall_at_k {
        out.push_str(&format!("recall_at_k,{k},{r:.6}\n"));
    }
    for &(p, r) in &report.recall_at_top_percent {
        out.push_str(&format!("recall_at_top_percent,{p},{r:.6}\n"));
    }
    out
}

pub fn run_eval(config: &RunConfig, config_path: Option<&Path>, checkpoint: &Path, report: &Path) -> Result<RecallReport> {
    let r = evaluate(config, config_path, checkpoint)?;
    write_file(report, report_csv(&r).as_bytes())?;
    Ok(r)
}

/// What `embed` reads: a directory of PNGs, or the checkpoint's own
/// synthetic source.
#[derive(Debug, Clone, PartialEq)]
pub enum EmbedInput {
    Synthetic,
    Directory(PathBuf),
}

impl EmbedInput {
    pub fn parse(s: &str) -> Self {
        if s == "synthetic" {
            EmbedInput::Synthetic
        } else {
            EmbedInput::Directory(PathBuf::from(s))
        }
    }
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Data(format!("no PNG images found in {}", dir.display())));
    }
    Ok(files)
}

/// Images to embed, as `(id, image)` in a stable order, already
/// standardised with the checkpoint's statistics.
fn embed_images(ckpt: &Checkpoint, input: &EmbedInput, branch: Branch) -> Result<Vec<(String, Tensor<f32>)>> {
    let moments = *ckpt.stats()?.branch(branch);
    let mut items = match input {
        EmbedInput::Synthetic => {
            let DataSource::Synthetic(spec) = ckpt.data.source()? else {
                return Err(Error::Config(
                    "this checkpoint was trained on a directory; pass that directory as --input".into(),
                ));
            };
            generate_synthetic_pairs(&spec)?
                .pairs()
                .iter()
                .map(|p| (p.name.clone(), p.image(branch).clone()))
                .collect::<Vec<_>>()
        }
        EmbedInput::Directory(dir) => {
            let sub = dir.join(branch.name());
            let dir = if sub.is_dir() { sub } else { dir.clone() };
            png_files(&dir)?
                .iter()
                .map(|p| {
                    let id = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
                    load_png(p).map(|t| (id, t))
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    for (_, img) in &mut items {
        moments.apply(img);
    }
    Ok(items)
}

/// `id,d0,...` with nine significant digits per component.
pub fn descriptors_csv(ids: &[String], d: &Descriptors<f32>) -> String {
    let mut out = String::from("id");
    for j in 0..d.dim() {
        out.push_str(&format!(",d{j}"));
    }
    out.push('\n');
    for (i, id) in ids.iter().enumerate() {
        out.push_str(id);
        for v in d.row(i) {
            out.push_str(&format!(",{v:.8e}"));
        }
        out.push('\n');
    }
    out
}

pub fn run_embed(checkpoint: &Path, input: &EmbedInput, branch: Branch, out: &Path, chunk: usize) -> Result<Descriptors<f32>> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let mut model = ckpt.restore_model()?;
    let items = embed_images(&ckpt, input, branch)?;
    let want = model.config().backbone.input_size;
    if let Some((id, img)) = items.iter().find(|(_, t)| t.shape()[1..] != want) {
        return Err(Error::dim(format!(
            "image {id:?} is {}x{}, the model expects {}x{}",
            img.shape()[1],
            img.shape()[2],
            want[0],
            want[1]
        )));
    }
    let ids: Vec<String> = items.iter().map(|(id, _)| id.clone()).collect();
    let images: Vec<&Tensor<f32>> = items.iter().map(|(_, t)| t).collect();
    let d = model.embed_all(&images, branch, chunk)?;
    write_file(out, descriptors_csv(&ids, &d).as_bytes())?;
    Ok(d)
}
