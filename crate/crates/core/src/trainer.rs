//! Training loop: dual-branch forward (I and T(I)), four-term objective,
//! step-decayed AdamW, JSONL logging and checkpointing.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::STRIDE;
use crate::checkpoint::{Checkpoint, RngState};
use crate::dataio::{apply_transform, AugmentKind, AugmentationSpec, Interp, Sample, TriStateMask};
use crate::discriminator::{Discriminator, PriorPair};
use crate::error::{Error, Result};
use crate::losses::{self, LossConfig, LossReport, ScribbleTargets};
use crate::model::{priors_to_tensors, ModelConfig, Scaf};
use crate::nn::{self, scalar};
use crate::optim::{AdamW, AdamWConfig, Moments};
use crate::raster;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Side length images are resized to; a multiple of 32.
    pub image_size: usize,
    pub batch_size: usize,
    pub epochs: u32,
    pub lr_init: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: u32,
    pub optimizer: AdamWConfig,
    /// Transform families sampled (uniformly) for the consistency branch.
    pub augment: Vec<AugmentKind>,
    pub shuffle: bool,
    /// Write an intermediate checkpoint every this many epochs (0 = final only).
    pub checkpoint_every: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            image_size: 512,
            batch_size: 32,
            epochs: 70,
            lr_init: 1e-4,
            lr_decay_factor: 0.1,
            lr_decay_every: 50,
            optimizer: AdamWConfig::default(),
            augment: vec![
                AugmentKind::Rotation,
                AugmentKind::Scaling,
                AugmentKind::HorizontalFlip,
            ],
            shuffle: true,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % STRIDE != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of {STRIDE}",
                self.image_size
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.lr_decay_every == 0 {
            return Err(Error::Config(
                "epochs, batch_size and lr_decay_every must be positive".into(),
            ));
        }
        if !(self.lr_init > 0.0) || !(self.lr_decay_factor > 0.0) {
            return Err(Error::Config("learning rate settings must be positive".into()));
        }
        if self.augment.is_empty() {
            return Err(Error::Config("at least one augmentation kind is required".into()));
        }
        Ok(())
    }

    /// Step-decayed learning rate at a 0-based epoch.
    pub fn lr_at(&self, epoch: u32) -> f64 {
        self.lr_init * self.lr_decay_factor.powi((epoch / self.lr_decay_every) as i32)
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u32,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: LossReport,
}

/// A training sample at training resolution with its cached priors.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub sample: Sample,
    pub priors: PriorPair,
}

fn resize_labels(m: &TriStateMask, size: usize) -> Result<TriStateMask> {
    let (h, w) = m.dim();
    let raw = m.encoded();
    let out = Array2::from_shape_fn((size, size), |(r, c)| {
        raw[[(r * h / size).min(h - 1), (c * w / size).min(w - 1)]]
    });
    TriStateMask::from_encoded("resized", out)
}

fn resize_sample(s: Sample, size: usize) -> Result<Sample> {
    if s.dim() == (size, size) {
        return Ok(s);
    }
    let image = raster::resize_bilinear(&s.image, size, size);
    let scribble = resize_labels(&s.scribble, size)?;
    let dense = s.dense_mask.map(|m| {
        let (h, w) = m.dim();
        Array2::from_shape_fn((size, size), |(r, c)| {
            m[[(r * h / size).min(h - 1), (c * w / size).min(w - 1)]]
        })
    });
    Sample::new(s.id, image, scribble, dense)
}

fn check_finite(report: &LossReport) -> Result<()> {
    for (term, value) in [
        ("pce", report.pce),
        ("ca", report.ca),
        ("sc", report.sc),
        ("cem_un", report.cem_un),
        ("cem_la", report.cem_la),
        ("total", report.total),
    ] {
        if !value.is_finite() {
            return Err(Error::NonFinite { term, value });
        }
    }
    Ok(())
}

pub struct Trainer {
    model: Scaf,
    md: Discriminator,
    opt: AdamW,
    cfg: TrainConfig,
    losses: LossConfig,
    rng: ChaCha8Rng,
    epoch: u32,
    step: u64,
    config_hash: String,
    aug_priors: HashMap<(String, String), PriorPair>,
}

impl Trainer {
    pub fn new(
        model_cfg: &ModelConfig,
        cfg: &TrainConfig,
        losses: &LossConfig,
        md: Discriminator,
        seed: u64,
        config_hash: impl Into<String>,
    ) -> Result<Self> {
        cfg.validate()?;
        losses.validate()?;
        let model = Scaf::new(model_cfg, DType::F32, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Ok(Self {
            model,
            md,
            opt: AdamW::new(cfg.optimizer.clone()),
            cfg: cfg.clone(),
            losses: losses.clone(),
            rng,
            epoch: 0,
            step: 0,
            config_hash: config_hash.into(),
            aug_priors: HashMap::new(),
        })
    }

    /// Continue from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(
        ckpt: &Checkpoint,
        cfg: &TrainConfig,
        losses: &LossConfig,
        config_hash: impl Into<String>,
    ) -> Result<Self> {
        let config_hash = config_hash.into();
        if ckpt.config_hash != config_hash {
            return Err(Error::Config(format!(
                "checkpoint config hash {} does not match the current configuration {}",
                ckpt.config_hash, config_hash
            )));
        }
        let md = ckpt
            .discriminator()?
            .ok_or_else(|| Error::Config("checkpoint carries no memory banks".into()))?;
        let mut t = Self::new(&ckpt.model, cfg, losses, md, 0, config_hash)?;
        load_into(&t.model, ckpt)?;
        let mut state = BTreeMap::new();
        for (k, m) in &ckpt.adam_m {
            let v = ckpt
                .adam_v
                .get(k)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks second moment for `{k}`")))?;
            state.insert(
                k.clone(),
                Moments {
                    m: m.to_dtype(DType::F32)?,
                    v: v.to_dtype(DType::F32)?,
                },
            );
        }
        t.opt.restore(ckpt.adam_steps, state);
        t.rng = ckpt.rng.restore()?;
        t.epoch = ckpt.epoch;
        t.step = ckpt.step;
        Ok(t)
    }

    pub fn model(&self) -> &Scaf {
        &self.model
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.md
    }

    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Resize to training resolution and compute the priors of each sample.
    pub fn prepare(&self, samples: Vec<Sample>) -> Result<Vec<Prepared>> {
        if samples.is_empty() {
            return Err(Error::Empty("training set has no samples".into()));
        }
        samples
            .into_iter()
            .map(|s| {
                let sample = resize_sample(s, self.cfg.image_size)?;
                let priors = self.md.prior_map(&sample.image)?;
                Ok(Prepared { sample, priors })
            })
            .collect()
    }

    fn augmented_priors(&mut self, id: &str, spec: &AugmentationSpec, image: &ndarray::Array3<f32>) -> Result<PriorPair> {
        let key = (id.to_string(), spec.to_string());
        if let Some(p) = self.aug_priors.get(&key) {
            return Ok(p.clone());
        }
        let p = self.md.prior_map(image)?;
        self.aug_priors.insert(key, p.clone());
        Ok(p)
    }

    /// One optimizer update on `data[batch]`.
    pub fn train_step(&mut self, data: &[Prepared], batch: &[usize]) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(Error::Empty("empty batch".into()));
        }
        let dtype = self.model.store().dtype();
        let items: Vec<&Prepared> = batch.iter().map(|&i| &data[i]).collect();
        let images: Vec<_> = items.iter().map(|p| &p.sample.image).collect();
        let x = raster::images_to_tensor(&images, dtype)?;
        let priors: Vec<_> = items.iter().map(|p| &p.priors).collect();
        let (mp, ap) = priors_to_tensors(&priors, dtype)?;
        let scribbles: Vec<_> = items.iter().map(|p| &p.sample.scribble).collect();
        let targets = ScribbleTargets::from_masks(&scribbles, dtype)?;

        let out = self.model.forward(&x, &mp, &ap, true)?;
        let mut pce = Tensor::zeros((), dtype, x.device())?;
        let mut ca = Tensor::zeros((), dtype, x.device())?;
        for head in out.heads() {
            pce = (pce + losses::pce(head, &targets)?)?;
            ca = (ca + losses::ca(&nn::sigmoid(head)?, &x, &self.losses.affinity)?)?;
        }
        let p1 = nn::sigmoid(&out.m1)?;

        let (_, _, h, w) = x.dims4()?;
        let mut sc = Tensor::zeros((), dtype, x.device())?;
        for (b, item) in items.iter().enumerate() {
            let kind = self.cfg.augment[self.rng.random_range(0..self.cfg.augment.len())];
            let spec = AugmentationSpec::sample(kind, (h, w), STRIDE, &mut self.rng);
            let aug_image = apply_transform(&item.sample.image, &spec, Interp::Bilinear)?;
            let aug_priors = self.augmented_priors(&item.sample.id, &spec, &aug_image)?;
            let xa = raster::images_to_tensor(&[&aug_image], dtype)?;
            let (mpa, apa) = priors_to_tensors(&[&aug_priors], dtype)?;
            let m1_aug = nn::sigmoid(&self.model.forward(&xa, &mpa, &apa, true)?.m1)?;
            let term = losses::sc(&p1.narrow(0, b, 1)?, &m1_aug, &spec, &self.losses.consistency)?;
            sc = (sc + term)?;
        }
        let sc = (sc / items.len() as f64)?;

        let cem = losses::cem(&p1, &targets, &self.losses.cem, self.epoch)?;
        let total = (((&pce + &ca)? + &sc)? + ((&cem.un + &cem.la)? * cem.lambda_t)?)?;

        let mut report = LossReport {
            pce: scalar(&pce)?,
            ca: scalar(&ca)?,
            sc: scalar(&sc)?,
            cem_un: scalar(&cem.un)?,
            cem_la: scalar(&cem.la)?,
            lambda_t: cem.lambda_t,
            total: 0.0,
        };
        report.recompute_total();
        check_finite(&report)?;

        let grads = total.backward()?;
        let params = self.model.store().trainable();
        self.opt.step(&params, &grads, self.cfg.lr_at(self.epoch))?;
        self.model.project_constraints()?;
        self.step += 1;
        Ok(report)
    }

    /// One pass over `data`; `on_step` sees each record as it is produced.
    pub fn run_epoch(
        &mut self,
        data: &[Prepared],
        on_step: &mut dyn FnMut(&StepRecord) -> Result<()>,
    ) -> Result<Vec<StepRecord>> {
        if data.is_empty() {
            return Err(Error::Empty("training set has no samples".into()));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        if self.cfg.shuffle {
            order.shuffle(&mut self.rng);
        }
        let lr = self.cfg.lr_at(self.epoch);
        let mut records = Vec::new();
        for batch in order.chunks(self.cfg.batch_size) {
            let losses = self.train_step(data, batch)?;
            let rec = StepRecord {
                step: self.step,
                epoch: self.epoch,
                lr,
                losses,
            };
            on_step(&rec)?;
            records.push(rec);
        }
        self.epoch += 1;
        Ok(records)
    }

    /// Run the remaining epochs. Checkpoints go to `out_dir` (`final.ckpt` plus
    /// periodic `epoch_NNNN.ckpt`), log records to `out_dir/train_log.jsonl`.
    pub fn fit(&mut self, data: &[Prepared], out_dir: Option<&Path>) -> Result<Checkpoint> {
        let mut log = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join("train_log.jsonl");
                let file = fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                Some((path, std::io::BufWriter::new(file)))
            }
            None => None,
        };
        while self.epoch < self.cfg.epochs {
            self.run_epoch(data, &mut |rec| {
                log::debug!("epoch {} step {} total {:.5}", rec.epoch, rec.step, rec.losses.total);
                if let Some((path, w)) = log.as_mut() {
                    let line = serde_json::to_string(rec).expect("record serializes");
                    writeln!(w, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
                }
                Ok(())
            })?;
            if let Some((path, w)) = log.as_mut() {
                w.flush().map_err(|e| Error::io(path.as_path(), e))?;
            }
            if let Some(dir) = out_dir {
                let every = self.cfg.checkpoint_every;
                if every > 0 && self.epoch % every == 0 && self.epoch < self.cfg.epochs {
                    self.checkpoint()?
                        .save(&dir.join(format!("epoch_{:04}.ckpt", self.epoch)), DType::F32)?;
                }
            }
            log::info!("epoch {}/{} done", self.epoch, self.cfg.epochs);
        }
        let ckpt = self.checkpoint()?;
        if let Some(dir) = out_dir {
            ckpt.save(&final_checkpoint_path(dir), DType::F32)?;
        }
        Ok(ckpt)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let store = self.model.store();
        let collect = |vars: Vec<(String, candle_core::Var)>| {
            vars.into_iter()
                .map(|(k, v)| (k, v.as_tensor().clone()))
                .collect::<BTreeMap<_, _>>()
        };
        let mut adam_m = BTreeMap::new();
        let mut adam_v = BTreeMap::new();
        for (k, s) in self.opt.state() {
            adam_m.insert(k.clone(), s.m.clone());
            adam_v.insert(k.clone(), s.v.clone());
        }
        Ok(Checkpoint {
            config_hash: self.config_hash.clone(),
            epoch: self.epoch,
            step: self.step,
            adam_steps: self.opt.steps(),
            rng: RngState::capture(&self.rng),
            model: self.model.config().clone(),
            params: collect(store.params()),
            buffers: collect(store.buffers()),
            adam_m,
            adam_v,
            banks: Some((
                self.md.backbone_config().clone(),
                self.md.config().clone(),
                self.md.authentic.clone(),
                self.md.manipulated.clone(),
            )),
        })
    }
}

pub fn final_checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("final.ckpt")
}

/// Copy checkpoint parameters and buffers into a freshly built model.
pub fn load_into(model: &Scaf, ckpt: &Checkpoint) -> Result<()> {
    let store = model.store();
    for (name, _) in store.params().into_iter().chain(store.buffers()) {
        let t = ckpt
            .params
            .get(&name)
            .or_else(|| ckpt.buffers.get(&name))
            .ok_or_else(|| Error::Config(format!("checkpoint lacks `{name}`")))?;
        store.set(&name, t)?;
    }
    Ok(())
}

/// Rebuild an inference model and its discriminator from a checkpoint.
pub fn restore_model(ckpt: &Checkpoint) -> Result<(Scaf, Discriminator)> {
    let model = Scaf::new(&ckpt.model, DType::F32, 0)?;
    load_into(&model, ckpt)?;
    let md = ckpt
        .discriminator()?
        .ok_or_else(|| Error::Config("checkpoint carries no memory banks".into()))?;
    Ok((model, md))
}
