//! The trainable model and the per-batch objective.

use rand::Rng;

use super::config::TrainConfig;
use crate::crossmodal::{
    apply_image_mask, apply_text_mask, draw_image_mask, draw_text_mask, CrossModal, ImageMask,
    MaskPlan, MimMethod, TextMask,
};
use crate::encoders::layers::INIT_STD;
use crate::encoders::{image_global, text_global, DualEncoder, EncoderOutput, TextGlobal};
use crate::error::{Error, Result};
use crate::losses::{
    feature_mim_loss, id_loss, mlm_loss, patch_mim_loss, pixel_mim_loss, sdm_loss, semmim_loss,
    total_loss, LossBundle,
};
use crate::numkernel::{Graph, Init, ParamId, ParamStore, Tensor, Var};
use crate::synthdata::Vocab;

/// Parameter-name prefix of the identity classifier.
pub const ID_PREFIX: &str = "id_classifier";

/// One image–caption pair ready for the model.
#[derive(Clone, Copy, Debug)]
pub struct BatchItem<'a> {
    /// `[N_v, 3P²]` pixel patches.
    pub patches: &'a Tensor,
    /// Patch class grid in raster order.
    pub patch_labels: &'a [u8],
    /// Full-length token ids.
    pub token_ids: &'a [usize],
    /// Dense identity index among the training identities.
    pub class: usize,
}

#[derive(Debug)]
pub struct Model {
    pub enc: DualEncoder,
    pub cme: Option<CrossModal>,
    pub w_id: ParamId,
    pub vocab: Vocab,
    pub num_classes: usize,
    pub text_global: TextGlobal,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(
        cfg: &TrainConfig,
        vocab: &Vocab,
        num_classes: usize,
        num_identities: usize,
        rng: &mut R,
    ) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let enc_cfg = cfg.encoder(vocab.len());
        let enc = DualEncoder::new(&mut store, &enc_cfg, rng)?;
        let cme = if cfg.uses_cme() {
            Some(CrossModal::new(&mut store, &cfg.cme(), &enc_cfg, num_classes, rng)?)
        } else {
            None
        };
        if num_identities == 0 {
            return Err(Error::InvalidArgument("no training identities".into()));
        }
        let w_id = store.register(
            format!("{ID_PREFIX}.weight"),
            &[num_identities, cfg.hidden_size],
            Init::TruncNormal(INIT_STD),
            rng,
        );
        Ok((
            Self {
                enc,
                cme,
                w_id,
                vocab: vocab.clone(),
                num_classes,
                text_global: cfg.text_global,
            },
            store,
        ))
    }

    fn cme(&self) -> Result<&CrossModal> {
        self.cme
            .as_ref()
            .ok_or_else(|| Error::Config("cross-modal encoder not built".into()))
    }

    /// Draws the masks of one sample: text first, then image.
    pub fn draw_plan<R: Rng + ?Sized>(
        &self,
        cfg: &TrainConfig,
        item: &BatchItem,
        rng: &mut R,
    ) -> Result<MaskPlan> {
        let text = if cfg.mlm_enabled {
            Some(draw_text_mask(item.token_ids, &self.vocab, cfg.token_mask_rate, rng)?)
        } else {
            None
        };
        let image = if cfg.mim_method != MimMethod::None {
            let n = self.enc.image.cfg.image_tokens();
            Some(draw_image_mask(n, cfg.patch_mask_rate, rng)?)
        } else {
            None
        };
        Ok(MaskPlan {
            text,
            image,
            m_t: cfg.token_mask_rate,
            m_p: cfg.patch_mask_rate,
        })
    }

    /// Masked-language logits of one sample.
    fn mlm_pass(&self, g: &Graph, img: &EncoderOutput, item: &BatchItem, mask: &TextMask) -> Result<Var> {
        let cme = self.cme()?;
        let masked = apply_text_mask(item.token_ids, &self.vocab, mask);
        let masked_out = self.enc.text.encode(g, &masked, &self.vocab)?;
        let (out, offset) = cme.mlm_pass(g, img, &masked_out)?;
        cme.mlm_logits(g, out, offset, mask)
    }

    /// Masked-image head output of one sample.
    fn mim_pass(
        &self,
        g: &Graph,
        img: &EncoderOutput,
        txt: &EncoderOutput,
        mask: &ImageMask,
    ) -> Result<Var> {
        let cme = self.cme()?;
        let token = g.param(cme.mask_token);
        let masked = apply_image_mask(g, img.tokens, token, mask)?;
        let masked = cme.position_masked(g, masked, mask, g.param(self.enc.image.pos))?;
        let (out, offset) = cme.mim_pass(g, txt, masked)?;
        cme.mim_logits(g, out, offset, mask)
    }

    /// Builds the full objective of a batch on `g`. With `mim_first` the
    /// image-side pass of every sample is built before the text-side pass.
    pub fn batch_loss(
        &self,
        g: &Graph,
        cfg: &TrainConfig,
        items: &[BatchItem],
        plans: &[MaskPlan],
        mim_first: bool,
    ) -> Result<(Var, LossBundle)> {
        if items.is_empty() || items.len() != plans.len() {
            return Err(Error::InvalidArgument("batch and mask plans disagree".into()));
        }
        let mut v_globals = Vec::with_capacity(items.len());
        let mut t_globals = Vec::with_capacity(items.len());
        let mut mlm_logits = Vec::new();
        let mut mlm_labels = Vec::new();
        let mut mim_preds = Vec::new();
        let mut mim_classes = Vec::new();
        let mut mim_targets: Vec<f64> = Vec::new();
        let mut mim_feature_targets = Vec::new();

        for (item, plan) in items.iter().zip(plans) {
            let img = self.enc.image.encode_patches(g, g.constant(item.patches.clone()))?;
            let txt = self.enc.text.encode(g, item.token_ids, &self.vocab)?;
            v_globals.push(image_global(g, &img)?);
            t_globals.push(text_global(g, &txt, self.text_global)?);

            let mut mlm_step = |g: &Graph| -> Result<()> {
                if let Some(mask) = &plan.text {
                    mlm_logits.push(self.mlm_pass(g, &img, item, mask)?);
                    mlm_labels.extend_from_slice(&mask.labels);
                }
                Ok(())
            };
            let mut mim_step = |g: &Graph| -> Result<()> {
                if let Some(mask) = &plan.image {
                    mim_preds.push(self.mim_pass(g, &img, &txt, mask)?);
                    match cfg.mim_method {
                        MimMethod::Semantic => mim_classes.extend(mask.labels(item.patch_labels)?),
                        MimMethod::Pixel => {
                            for p in mask.patches() {
                                mim_targets.extend_from_slice(item.patches.row(p));
                            }
                        }
                        MimMethod::Patch => {
                            for p in mask.patches() {
                                let row = item.patches.row(p);
                                mim_targets.push(row.iter().sum::<f64>() / row.len() as f64);
                            }
                        }
                        MimMethod::Feature => {
                            mim_feature_targets.push(g.gather_rows(img.tokens, &mask.positions)?);
                        }
                        MimMethod::None => {}
                    }
                }
                Ok(())
            };
            if mim_first {
                mim_step(g)?;
                mlm_step(g)?;
            } else {
                mlm_step(g)?;
                mim_step(g)?;
            }
        }

        let classes: Vec<usize> = items.iter().map(|i| i.class).collect();
        let v = g.concat_rows(&v_globals)?;
        let t = g.concat_rows(&t_globals)?;
        let id = id_loss(g, v, t, &classes, g.param(self.w_id))?;
        let sdm = sdm_loss(g, v, t, &classes, &cfg.sdm())?;

        let mlm = if mlm_logits.is_empty() {
            None
        } else {
            let logits = g.concat_rows(&mlm_logits)?;
            Some(mlm_loss(g, logits, &mlm_labels, self.vocab.len(), cfg.per_class_normalization)?)
        };
        let mim = if mim_preds.is_empty() {
            None
        } else {
            let pred = g.concat_rows(&mim_preds)?;
            let rows = g.shape(pred)[0];
            Some(match cfg.mim_method {
                MimMethod::Semantic => semmim_loss(
                    g,
                    pred,
                    &mim_classes,
                    self.num_classes,
                    cfg.per_class_normalization,
                )?,
                MimMethod::Pixel => {
                    let cols = mim_targets.len() / rows;
                    pixel_mim_loss(g, pred, &Tensor::matrix(rows, cols, mim_targets)?)?
                }
                MimMethod::Patch => patch_mim_loss(g, pred, &Tensor::matrix(rows, 1, mim_targets)?)?,
                MimMethod::Feature => {
                    let target = g.concat_rows(&mim_feature_targets)?;
                    feature_mim_loss(g, pred, target)?
                }
                MimMethod::None => unreachable!("no masked-image plan without a method"),
            })
        };
        total_loss(g, id, sdm, mlm, mim, cfg.mlm_loss_weight, cfg.semmim_loss_weight)
    }

    /// Unit-norm image globals, one row per entry.
    pub fn image_features(&self, store: &ParamStore, patches: &[Tensor]) -> Result<Vec<Vec<f64>>> {
        patches
            .iter()
            .map(|p| {
                let g = Graph::with_params(store);
                let out = self.enc.image.encode_patches(&g, g.constant(p.clone()))?;
                let v = image_global(&g, &out)?;
                let row = g.value(v).data().to_vec();
                Ok(row)
            })
            .collect()
    }

    /// Unit-norm caption globals, one row per entry.
    pub fn text_features(&self, store: &ParamStore, token_ids: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        token_ids
            .iter()
            .map(|ids| {
                let g = Graph::with_params(store);
                let out = self.enc.text.encode(&g, ids, &self.vocab)?;
                let t = text_global(&g, &out, self.text_global)?;
                let row = g.value(t).data().to_vec();
                Ok(row)
            })
            .collect()
    }
}

/// `sim[q][j] = <text_q, image_j>`.
pub fn similarity(text: &[Vec<f64>], images: &[Vec<f64>]) -> Vec<Vec<f64>> {
    text.iter()
        .map(|t| {
            images
                .iter()
                .map(|v| t.iter().zip(v).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect()
}
