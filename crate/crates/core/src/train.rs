//! Training loop, inference and evaluation over directories of images.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use image::{imageops, ImageBuffer, Luma};
use log::{info, warn};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{self, DatasetSpec, SamplePaths};
use crate::error::{Error, Result};
use crate::metrics::{self, Accumulator, Aggregate, ImageScores};
use crate::model::Model;
use crate::nn::{Ctx, ParamStore};
use crate::optim::AdamW;
use crate::tensor::Tensor;

/// Decoded samples are kept in memory when they fit in this many bytes.
const CACHE_BYTES: usize = 512 << 20;
pub const CONFIG_FILE: &str = "config.txt";
pub const LOSS_LOG: &str = "loss.csv";
pub const LAST_CHECKPOINT: &str = "last.gcrp";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// 1-based index of the update just applied.
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub model: Model,
    pub params: ParamStore<f32>,
    pub optim: AdamW<f32>,
    pub data: DatasetSpec,
    cache: Option<Vec<(Vec<f32>, Vec<f32>)>>,
}

impl Trainer {
    pub fn new(cfg: RunConfig, data: DatasetSpec) -> Result<Self> {
        cfg.validate()?;
        let (model, params) = Model::build::<f32>(&cfg.model)?;
        let optim = AdamW::new(cfg.train.optim, &params);
        let s = cfg.model.input_size;
        let cache = if data.len() * s * s * 16 <= CACHE_BYTES {
            let size = cfg.model.input_size;
            Some(data.samples.iter().map(|p| data::load_planes(p, size)).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        Ok(Trainer { cfg, model, params, optim, data, cache })
    }

    /// Continues from a checkpoint with optimizer state; the batch schedule picks up at its step.
    pub fn resume(cfg: RunConfig, data: DatasetSpec, ckpt: &Checkpoint<f32>) -> Result<Self> {
        let mut t = Self::new(cfg, data)?;
        ckpt.restore(&t.cfg.model, &mut t.params, Some(&mut t.optim))?;
        Ok(t)
    }

    pub fn batches_per_epoch(&self) -> u64 {
        self.data.len().div_ceil(self.cfg.train.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        let full = self.cfg.train.epochs as u64 * self.batches_per_epoch();
        self.cfg.train.max_steps.map_or(full, |m| m.min(full))
    }

    pub fn steps_done(&self) -> u64 {
        self.optim.step
    }

    /// Sample order of an epoch.
    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(data::sample_seed(self.cfg.train.seed, epoch, u64::MAX));
        order.shuffle(&mut rng);
        order
    }

    /// `(epoch, dataset indices)` of the batch for 0-based update `step`.
    pub fn batch_at(&self, step: u64) -> (u64, Vec<usize>) {
        let bpe = self.batches_per_epoch();
        let (epoch, b) = (step / bpe, (step % bpe) as usize);
        let order = self.epoch_order(epoch);
        let bs = self.cfg.train.batch_size;
        (epoch, order[b * bs..((b + 1) * bs).min(order.len())].to_vec())
    }

    fn planes(&self, i: usize) -> Result<std::borrow::Cow<'_, (Vec<f32>, Vec<f32>)>> {
        Ok(match &self.cache {
            Some(c) => std::borrow::Cow::Borrowed(&c[i]),
            None => std::borrow::Cow::Owned(data::load_planes(&self.data.samples[i], self.cfg.model.input_size)?),
        })
    }

    /// Stacked `[B, 3, S, S]` images and `[B, 1, S, S]` masks, augmented when enabled.
    pub fn load_batch(&self, epoch: u64, indices: &[usize], augment: bool) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let s = self.cfg.model.input_size;
        let mut xs = Vec::with_capacity(indices.len() * 3 * s * s);
        let mut ms = Vec::with_capacity(indices.len() * s * s);
        for &i in indices {
            let p = self.planes(i)?;
            match (&self.cfg.train.augment, augment) {
                (Some(a), true) => {
                    let seed = data::sample_seed(self.cfg.train.seed, epoch, i as u64);
                    let (x, m) = data::augment_planes(&p.0, &p.1, s, a, seed);
                    xs.extend(x);
                    ms.extend(m);
                }
                _ => {
                    xs.extend_from_slice(&p.0);
                    ms.extend_from_slice(&p.1);
                }
            }
        }
        let n = indices.len();
        Ok((Tensor::new(&[n, 3, s, s], xs)?, Tensor::new(&[n, 1, s, s], ms)?))
    }

    /// Loss on a batch without updating anything.
    pub fn batch_loss(&self, images: &Tensor<f32>, masks: &Tensor<f32>) -> Result<f64> {
        let mut cx = Ctx::new(&self.params, false);
        let x = cx.input(images.clone());
        let g = cx.input(masks.clone());
        let out = self.model.forward(&mut cx, x)?;
        let loss = cx.g.total_loss(&out.maps, g, &self.cfg.train.loss)?;
        Ok(cx.g.value(loss).data()[0] as f64)
    }

    /// One optimizer update on the next scheduled batch.
    pub fn step(&mut self) -> Result<StepStats> {
        let step = self.optim.step;
        let (epoch, idx) = self.batch_at(step);
        let (images, masks) = self.load_batch(epoch, &idx, true)?;
        let mut cx = Ctx::new(&self.params, true);
        let x = cx.input(images);
        let g = cx.input(masks);
        let out = self.model.forward(&mut cx, x)?;
        let loss = cx.g.total_loss(&out.maps, g, &self.cfg.train.loss)?;
        let value = cx.g.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::Diverged {
                step: step as usize + 1,
                loss: value,
            });
        }
        cx.g.backward(loss)?;
        let grads = cx.grads();
        drop(cx);
        self.optim.update(&mut self.params, &grads)?;
        Ok(StepStats {
            step: step + 1,
            epoch,
            loss: value,
        })
    }

    /// Mean absolute error of the final map over the whole (unaugmented) training set.
    pub fn train_mae(&self) -> Result<f64> {
        let idx: Vec<usize> = (0..self.data.len()).collect();
        let mut total = 0.0;
        for chunk in idx.chunks(self.cfg.train.batch_size) {
            let (x, m) = self.load_batch(0, chunk, false)?;
            let p = self.model.predict(&self.params, &x)?;
            total += p.data().iter().zip(m.data()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>();
        }
        let s = self.cfg.model.input_size;
        Ok(total / (self.data.len() * s * s) as f64)
    }

    pub fn checkpoint(&self) -> Checkpoint<f32> {
        Checkpoint::capture(&self.cfg.model, &self.params, Some(&self.optim))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub steps: u64,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
    pub checkpoint: PathBuf,
}

/// Trains to completion, writing the config, a loss log, periodic checkpoints
/// and `last.gcrp` under `out`. On divergence the error is returned and the
/// checkpoints already written are left untouched.
pub fn train(cfg: RunConfig, data: DatasetSpec, out: &Path, resume: Option<&Path>) -> Result<TrainSummary> {
    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_FILE), cfg.to_text())?;
    let mut trainer = match resume {
        Some(p) => Trainer::resume(cfg, data, &Checkpoint::load(p)?)?,
        None => Trainer::new(cfg, data)?,
    };
    let log_path = out.join(LOSS_LOG);
    let mut log = fs::OpenOptions::new().create(true).append(true).open(&log_path)?;
    if log.metadata()?.len() == 0 {
        writeln!(log, "step,epoch,loss")?;
    }
    let total = trainer.total_steps();
    let every = trainer.cfg.train.checkpoint_every;
    info!(
        "training {} parameters on {} samples for {} steps",
        trainer.params.numel(),
        trainer.data.len(),
        total
    );
    let (mut first, mut last) = (None, None);
    while trainer.steps_done() < total {
        let s = trainer.step()?;
        writeln!(log, "{},{},{:?}", s.step, s.epoch, s.loss)?;
        first.get_or_insert(s.loss);
        last = Some(s.loss);
        if s.step % every == 0 {
            trainer.checkpoint().save(out.join(format!("step{:06}.gcrp", s.step)))?;
            info!("step {} loss {:.5}", s.step, s.loss);
        }
    }
    log.flush()?;
    let path = out.join(LAST_CHECKPOINT);
    trainer.checkpoint().save(&path)?;
    Ok(TrainSummary {
        steps: trainer.steps_done(),
        first_loss: first,
        last_loss: last,
        checkpoint: path,
    })
}

/// Config for a checkpoint: the explicit file, else `config.txt` beside it.
pub fn config_for_checkpoint(ckpt: &Path, explicit: Option<&Path>) -> Result<RunConfig> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => ckpt.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE),
    };
    RunConfig::load(&path)
}

fn image_files(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push((stem.to_string(), path.clone()));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Writes an 8-bit PNG of the final map for every image in `images`, at the image's own size.
pub fn infer(cfg: &RunConfig, ckpt: &Checkpoint<f32>, images: &Path, out: &Path) -> Result<usize> {
    let (model, mut params) = Model::build::<f32>(&cfg.model)?;
    ckpt.restore(&cfg.model, &mut params, None)?;
    fs::create_dir_all(out)?;
    let s = cfg.model.input_size;
    let files = image_files(images)?;
    if files.is_empty() {
        return Err(Error::Ingestion(vec![format!("no images in {}", images.display())]));
    }
    for (stem, path) in &files {
        let img = data::read_rgb(path)?;
        let x = Tensor::new(&[1, 3, s, s], data::image_planes(&img, s))?;
        let p = model.predict(&params, &x)?;
        let map: ImageBuffer<Luma<f32>, Vec<f32>> =
            ImageBuffer::from_raw(s as u32, s as u32, p.into_data()).expect("map buffer matches its size");
        let (w, h) = img.dimensions();
        let map = if (w, h) == (s as u32, s as u32) {
            map
        } else {
            imageops::resize(&map, w, h, imageops::FilterType::Triangle)
        };
        let gray: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_fn(w, h, |x, y| {
            Luma([(map.get_pixel(x, y).0[0].clamp(0.0, 1.0) * 255.0).round() as u8])
        });
        let dst = out.join(format!("{stem}.png"));
        gray.save(&dst).map_err(|source| Error::Image { path: dst, source })?;
    }
    Ok(files.len())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub aggregate: Aggregate,
    /// `(stem, MAE)` per image.
    pub per_image: Vec<(String, f64)>,
}

impl EvalReport {
    pub const COLUMNS: [&'static str; 9] = [
        "images", "mae", "s_alpha", "f_max", "f_mean", "f_adp", "e_max", "e_mean", "e_adp",
    ];

    fn values(&self) -> [String; 9] {
        let a = &self.aggregate;
        let f = |v: f64| format!("{v:.6}");
        [
            a.images.to_string(),
            f(a.mae),
            f(a.s_alpha),
            f(a.f_max),
            f(a.f_mean),
            f(a.f_adp),
            f(a.e_max),
            f(a.e_mean),
            f(a.e_adp),
        ]
    }

    pub fn key_values(&self) -> String {
        let mut s = String::new();
        for (k, v) in Self::COLUMNS.iter().zip(self.values()) {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn csv(&self) -> String {
        format!("{}\n{}\n", Self::COLUMNS.join(","), self.values().join(","))
    }

    pub fn curves_csv(&self) -> String {
        let mut s = String::from("threshold,precision,recall,f\n");
        for (k, c) in self.aggregate.curve.iter().enumerate() {
            let _ = writeln!(s, "{:.6},{:.6},{:.6},{:.6}", metrics::threshold(k), c.precision, c.recall, c.f);
        }
        s
    }

    /// Writes `report` (key=value) plus `.csv` and `_curves.csv` siblings.
    pub fn write(&self, report: &Path) -> Result<()> {
        if let Some(dir) = report.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(report, self.key_values())?;
        fs::write(report.with_extension("csv"), self.csv())?;
        let stem = report.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
        fs::write(report.with_file_name(format!("{stem}_curves.csv")), self.curves_csv())?;
        Ok(())
    }
}

fn load_pair(p: &SamplePaths) -> Result<(Vec<f64>, Vec<bool>, usize, usize)> {
    let gt = data::read_gray(&p.mask)?;
    let (w, h) = gt.dimensions();
    let mut pred = data::read_gray(&p.image)?;
    if pred.dimensions() != (w, h) {
        warn!("{}: prediction resized to ground-truth size {w}x{h}", p.stem);
        pred = imageops::resize(&pred, w, h, imageops::FilterType::Triangle);
    }
    let pv = pred.pixels().map(|px| px.0[0] as f64 / 255.0).collect();
    let gv = gt.pixels().map(|px| px.0[0] >= data::MASK_THRESHOLD).collect();
    Ok((pv, gv, h as usize, w as usize))
}

/// Scores every prediction PNG against the ground-truth PNG of the same stem.
pub fn evaluate(pred: &Path, gt: &Path) -> Result<EvalReport> {
    let pairs = data::pair_by_stem(pred, &["png"], gt, &["png"])?;
    if pairs.is_empty() {
        return Err(Error::Ingestion(vec![format!("no prediction/ground-truth pairs in {}", pred.display())]));
    }
    let scores: Vec<ImageScores> = pairs
        .par_iter()
        .map(|p| {
            let (pv, gv, h, w) = load_pair(p)?;
            metrics::score_image(&pv, &gv, h, w)
        })
        .collect::<Result<_>>()?;
    let mut acc = Accumulator::new();
    for s in &scores {
        acc.push(s);
    }
    let per_image = pairs.iter().zip(&scores).map(|(p, s)| (p.stem.clone(), s.mae)).collect();
    Ok(EvalReport {
        aggregate: acc.finish()?,
        per_image,
    })
}
