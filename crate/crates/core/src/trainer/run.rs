//! Training loop, test-split evaluation and run reports.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::model::{similarity, BatchItem, Model};
use crate::encoders::patchify;
use crate::error::{Error, Result};
use crate::evalmetrics::{evaluate, RetrievalResult, DEFAULT_KS};
use crate::losses::LossBundle;
use crate::numkernel::{adam_step, checkpoint, lr_at, Graph, ParamStore, Tensor};
use crate::patchlabel::label_patches;
use crate::synthdata::{flip_for_epoch, Dataset};

/// Image in both orientations, cut into patches, with patch labels.
#[derive(Clone, Debug)]
pub struct PreparedImage {
    pub patches: [Tensor; 2],
    pub patch_labels: [Vec<u8>; 2],
    pub identity: usize,
}

#[derive(Clone, Debug)]
pub struct PreparedSplit {
    pub images: Vec<PreparedImage>,
    pub token_ids: Vec<Vec<usize>>,
    /// Image index of each caption.
    pub caption_image: Vec<usize>,
    pub caption_identity: Vec<usize>,
}

pub fn prepare(ds: &Dataset, cfg: &TrainConfig) -> Result<PreparedSplit> {
    let p = cfg.patch_size;
    let mut images = Vec::with_capacity(ds.images.len());
    for img in &ds.images {
        if (img.image.height, img.image.width) != (cfg.input_image_height, cfg.input_image_width) {
            return Err(Error::Config(format!(
                "dataset images are {}x{}, config expects {}x{}",
                img.image.height, img.image.width, cfg.input_image_height, cfg.input_image_width
            )));
        }
        let flipped = img.image.flip_horizontal();
        let flipped_parse = img.parse.flip_horizontal();
        let (h, w) = (img.image.height, img.image.width);
        images.push(PreparedImage {
            patches: [
                patchify(&img.image.to_unit(), h, w, p)?,
                patchify(&flipped.to_unit(), h, w, p)?,
            ],
            patch_labels: [
                label_patches(&img.parse, p, ds.scheme.num_classes)?.labels,
                label_patches(&flipped_parse, p, ds.scheme.num_classes)?.labels,
            ],
            identity: img.identity(),
        });
    }
    Ok(PreparedSplit {
        images,
        token_ids: ds.token_ids(cfg.textual_token_sequence)?,
        caption_image: ds.captions.iter().map(|c| c.image_index).collect(),
        caption_identity: ds.captions.iter().map(|c| c.identity).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub losses: LossBundle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// The configuration text exactly as supplied.
    pub config_echo: String,
    /// Every effective setting.
    pub resolved: BTreeMap<String, String>,
    pub config_hash: String,
    pub num_parameters: usize,
    pub train_identities: usize,
    pub test_identities: usize,
    pub epochs: Vec<EpochLog>,
    pub test: RetrievalResult,
    /// Cross-modal encoder invocations during training.
    pub cme_calls: usize,
    /// Seconds spent; kept out of the serialized report so that reports of
    /// identical runs are byte-identical.
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn first_total(&self) -> f64 {
        self.epochs.first().map_or(f64::NAN, |e| e.losses.total)
    }

    pub fn final_total(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.losses.total)
    }

    /// Per-epoch loss table.
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("epoch,lr,id,sdm,mlm,mim,total\n");
        for e in &self.epochs {
            let l = &e.losses;
            s.push_str(&format!(
                "{},{:e},{},{},{},{},{}\n",
                e.epoch, e.lr, l.id, l.sdm, l.mlm, l.mim, l.total
            ));
        }
        s
    }
}

/// Trained parameters together with the model layout.
pub struct TrainedRun {
    pub model: Model,
    pub store: ParamStore,
    pub report: RunReport,
}

/// Seeds for the independent random streams of a run.
mod stream {
    pub const INIT: u64 = 0;
    pub const SHUFFLE: u64 = 1;
    pub const MASK: u64 = 2;
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Trains on the identity-disjoint training part of `ds` and evaluates on
/// the held-out part. `config_echo` is stored verbatim in the report.
pub fn train(cfg: &TrainConfig, ds: &Dataset, config_echo: &str) -> Result<TrainedRun> {
    cfg.validate()?;
    let started = Instant::now();
    let (train_ds, test_ds) = ds.split_by_identity(cfg.num_test_identities)?;
    let train_set = prepare(&train_ds, cfg)?;
    let test_set = prepare(&test_ds, cfg)?;

    let train_ids: Vec<usize> = train_ds.identities().into_iter().collect();
    let class_of: BTreeMap<usize, usize> = train_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();

    let mut init_rng = rng_for(cfg.seed, stream::INIT);
    let (model, mut store) = Model::new(cfg, &ds.vocab, ds.scheme.num_classes, train_ids.len(), &mut init_rng)?;
    let mut adam = cfg.adam(&store);

    let n = train_set.token_ids.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let sched = cfg.schedule(steps_per_epoch);
    let mut shuffle_rng = rng_for(cfg.seed, stream::SHUFFLE);
    let mut mask_rng = rng_for(cfg.seed, stream::MASK);
    let mut order: Vec<usize> = (0..n).collect();
    let mut epochs = Vec::with_capacity(cfg.epoch);
    let mut step = 0;

    for epoch in 0..cfg.epoch {
        order.shuffle(&mut shuffle_rng);
        let mut bundles = Vec::with_capacity(steps_per_epoch);
        let mut lr = 0.0;
        for (batch_no, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let items: Vec<BatchItem> = chunk
                .iter()
                .map(|&c| {
                    let img_index = train_set.caption_image[c];
                    let img = &train_set.images[img_index];
                    let o = usize::from(cfg.flip_augmentation && flip_for_epoch(cfg.seed, epoch, img_index));
                    BatchItem {
                        patches: &img.patches[o],
                        patch_labels: &img.patch_labels[o],
                        token_ids: &train_set.token_ids[c],
                        class: class_of[&img.identity],
                    }
                })
                .collect();
            let plans = items
                .iter()
                .map(|it| model.draw_plan(cfg, it, &mut mask_rng))
                .collect::<Result<Vec<_>>>()?;

            let g = Graph::with_params(&store);
            let (loss, bundle) = model.batch_loss(&g, cfg, &items, &plans, false)?;
            if !bundle.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_no,
                });
            }
            g.backward(loss).map_err(|e| match e {
                Error::NonFinite(_) => Error::NonFiniteLoss {
                    epoch,
                    batch: batch_no,
                },
                other => other,
            })?;
            let grads = g.param_grads();
            drop(g);
            lr = lr_at(step, &sched)?;
            adam_step(&mut store, &grads, &mut adam, lr)?;
            step += 1;
            bundles.push(bundle);
        }
        epochs.push(EpochLog {
            epoch: epoch + 1,
            lr,
            losses: LossBundle::average(&bundles),
        });
    }

    let test = evaluate_split(&model, &store, &test_set)?;
    let report = RunReport {
        config_echo: config_echo.to_string(),
        resolved: cfg
            .entries()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
        config_hash: cfg.hash(),
        num_parameters: store.num_scalars(),
        train_identities: train_ids.len(),
        test_identities: test_ds.identities().len(),
        epochs,
        test,
        cme_calls: model.cme.as_ref().map_or(0, |c| c.calls()),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    Ok(TrainedRun { model, store, report })
}

/// Caption-to-image similarity over a split, without the cross-modal encoder.
pub fn split_similarity(model: &Model, store: &ParamStore, split: &PreparedSplit) -> Result<Vec<Vec<f64>>> {
    let patches: Vec<Tensor> = split.images.iter().map(|i| i.patches[0].clone()).collect();
    let v = model.image_features(store, &patches)?;
    let t = model.text_features(store, &split.token_ids)?;
    Ok(similarity(&t, &v))
}

pub fn evaluate_split(model: &Model, store: &ParamStore, split: &PreparedSplit) -> Result<RetrievalResult> {
    let sim = split_similarity(model, store, split)?;
    let gallery: Vec<usize> = split.images.iter().map(|i| i.identity).collect();
    evaluate(&sim, &split.caption_identity, &gallery, &DEFAULT_KS)
}

/// Rebuilds the model described by `cfg` for `ds`, loads the checkpoint at
/// `path` and evaluates it on the held-out identities.
pub fn evaluate_checkpoint(cfg: &TrainConfig, ds: &Dataset, path: &Path) -> Result<RetrievalResult> {
    cfg.validate()?;
    let (train_ds, test_ds) = ds.split_by_identity(cfg.num_test_identities)?;
    let mut rng = rng_for(cfg.seed, stream::INIT);
    let (model, mut store) = Model::new(
        cfg,
        &ds.vocab,
        ds.scheme.num_classes,
        train_ds.identities().len(),
        &mut rng,
    )?;
    checkpoint::load_into(&mut store, path)?;
    evaluate_split(&model, &store, &prepare(&test_ds, cfg)?)
}
