//! Token masking and the cross-modal encoder used only during training.
//!
//! Two passes share the same blocks: `[image ‖ masked text]` feeds the
//! masked-language head and `[text ‖ masked image]` feeds the masked-image
//! head.

use std::cell::Cell;
use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::encoders::layers::{key_mask_bias, Block, Head, LayerNorm, INIT_STD};
use crate::encoders::{EncoderConfig, EncoderOutput};
use crate::error::{Error, Result};
use crate::numkernel::{Graph, Init, ParamId, ParamStore, Tensor, Var};
use crate::synthdata::{validate_sequence, Vocab};

/// What the masked-image head predicts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MimMethod {
    None,
    /// Semantic part class of the patch.
    Semantic,
    /// All `3P²` pixel values of the patch.
    Pixel,
    /// Mean value of the patch over pixels and channels.
    Patch,
    /// Encoder embedding of the unmasked patch.
    Feature,
}

impl MimMethod {
    pub const ALL: [MimMethod; 5] = [
        MimMethod::None,
        MimMethod::Pixel,
        MimMethod::Patch,
        MimMethod::Feature,
        MimMethod::Semantic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MimMethod::None => "none",
            MimMethod::Semantic => "semantic",
            MimMethod::Pixel => "pixel",
            MimMethod::Patch => "patch",
            MimMethod::Feature => "feature",
        }
    }

    /// Width of the head output for this method.
    pub fn output_dim(self, enc: &EncoderConfig, num_classes: usize) -> usize {
        match self {
            MimMethod::None => 0,
            MimMethod::Semantic => num_classes,
            MimMethod::Pixel => enc.patch_dim(),
            MimMethod::Patch => 1,
            MimMethod::Feature => enc.hidden_dim,
        }
    }
}

impl fmt::Display for MimMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MimMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MimMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mim_method `{s}`")))
    }
}

/// Masked caption positions and the word ids they held.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextMask {
    pub positions: Vec<usize>,
    pub labels: Vec<usize>,
}

/// Masked image token rows (CLS is row 0 and never masked).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageMask {
    pub positions: Vec<usize>,
}

impl ImageMask {
    /// Patch indices (row minus one) of the masked tokens.
    pub fn patches(&self) -> impl Iterator<Item = usize> + '_ {
        self.positions.iter().map(|p| p - 1)
    }

    /// Ground-truth classes of the masked patches from a raster-order grid.
    pub fn labels(&self, grid: &[u8]) -> Result<Vec<usize>> {
        self.patches()
            .map(|p| {
                grid.get(p)
                    .map(|&l| l as usize)
                    .ok_or(Error::IndexOutOfRange {
                        index: p,
                        len: grid.len(),
                    })
            })
            .collect()
    }
}

/// Both halves of one sample's masking.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub text: Option<TextMask>,
    pub image: Option<ImageMask>,
    pub m_t: f64,
    pub m_p: f64,
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("mask rate {rate} outside [0, 1]")));
    }
    Ok(())
}

/// Independently masks each candidate with probability `rate`, forcing one
/// uniformly chosen candidate when the draw masks nothing.
fn draw_positions<R: Rng + ?Sized>(candidates: &[usize], rate: f64, rng: &mut R) -> Vec<usize> {
    let mut chosen: Vec<usize> = candidates
        .iter()
        .copied()
        .filter(|_| rng.random_bool(rate))
        .collect();
    if chosen.is_empty() {
        chosen.push(*candidates.choose(rng).expect("candidates are non-empty"));
    }
    chosen
}

/// Chooses caption positions to mask. `[SOS]`, `[EOS]` and padding are
/// never chosen.
pub fn draw_text_mask<R: Rng + ?Sized>(
    ids: &[usize],
    vocab: &Vocab,
    m_t: f64,
    rng: &mut R,
) -> Result<TextMask> {
    check_rate(m_t)?;
    let eos = validate_sequence(ids, vocab)?;
    let candidates: Vec<usize> = (1..eos).filter(|&i| ids[i] != vocab.mask()).collect();
    if candidates.is_empty() {
        return Err(Error::NothingToMask);
    }
    let positions = draw_positions(&candidates, m_t, rng);
    let labels = positions.iter().map(|&p| ids[p]).collect();
    Ok(TextMask { positions, labels })
}

pub fn apply_text_mask(ids: &[usize], vocab: &Vocab, mask: &TextMask) -> Vec<usize> {
    let mut masked = ids.to_vec();
    for &p in &mask.positions {
        masked[p] = vocab.mask();
    }
    masked
}

/// Replaces caption words by `[MASK]`.
pub fn mask_text<R: Rng + ?Sized>(
    ids: &[usize],
    vocab: &Vocab,
    m_t: f64,
    rng: &mut R,
) -> Result<(Vec<usize>, TextMask)> {
    let mask = draw_text_mask(ids, vocab, m_t, rng)?;
    Ok((apply_text_mask(ids, vocab, &mask), mask))
}

/// Chooses image token rows to mask among `1..n_tokens`.
pub fn draw_image_mask<R: Rng + ?Sized>(n_tokens: usize, m_p: f64, rng: &mut R) -> Result<ImageMask> {
    check_rate(m_p)?;
    if n_tokens < 2 {
        return Err(Error::NothingToMask);
    }
    let candidates: Vec<usize> = (1..n_tokens).collect();
    Ok(ImageMask {
        positions: draw_positions(&candidates, m_p, rng),
    })
}

pub fn apply_image_mask(g: &Graph, h_v: Var, mask_token: Var, mask: &ImageMask) -> Result<Var> {
    if mask.positions.contains(&0) {
        return Err(Error::InvalidArgument("the CLS row cannot be masked".into()));
    }
    g.replace_rows(h_v, mask_token, &mask.positions)
}

/// Replaces non-CLS rows of `h_v` by the shared mask embedding `mask_token`.
pub fn mask_image<R: Rng + ?Sized>(
    g: &Graph,
    h_v: Var,
    mask_token: Var,
    m_p: f64,
    rng: &mut R,
) -> Result<(Var, ImageMask)> {
    let mask = draw_image_mask(g.shape(h_v)[0], m_p, rng)?;
    Ok((apply_image_mask(g, h_v, mask_token, &mask)?, mask))
}

/// Writes the stored labels back into a masked caption.
pub fn unmask_text(masked: &[usize], mask: &TextMask) -> Vec<usize> {
    let mut ids = masked.to_vec();
    for (&p, &l) in mask.positions.iter().zip(&mask.labels) {
        ids[p] = l;
    }
    ids
}

#[derive(Clone, Debug, PartialEq)]
pub struct CmeConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub mim_method: MimMethod,
    pub mlm_head: bool,
}

/// Cross-modal encoder with its prediction heads.
#[derive(Debug)]
pub struct CrossModal {
    pub blocks: Vec<Block>,
    pub ln_final: LayerNorm,
    pub mask_token: ParamId,
    pub mlm_head: Option<Head>,
    pub mim_head: Option<Head>,
    pub mim_method: MimMethod,
    pub max_len: usize,
    calls: Cell<usize>,
}

/// Parameter-name prefix of everything registered by [`CrossModal::new`].
pub const CME_PREFIX: &str = "cme.";

impl CrossModal {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &CmeConfig,
        enc: &EncoderConfig,
        num_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let d = enc.hidden_dim;
        if cfg.num_heads == 0 || !d.is_multiple_of(cfg.num_heads) {
            return Err(Error::Config(format!(
                "hidden_dim {d} must be a multiple of cme_heads {}",
                cfg.num_heads
            )));
        }
        let blocks = (0..cfg.num_layers)
            .map(|i| Block::new(store, &format!("cme.block{i}"), d, cfg.num_heads, rng))
            .collect();
        let ln_final = LayerNorm::new(store, "cme.ln_final", d, rng);
        let mask_token = store.register("cme.mask_token", &[1, d], Init::TruncNormal(INIT_STD), rng);
        let mlm_head = cfg
            .mlm_head
            .then(|| Head::new(store, "cme.mlm_head", d, enc.vocab_size, rng));
        let mim_head = (cfg.mim_method != MimMethod::None).then(|| {
            let out = cfg.mim_method.output_dim(enc, num_classes);
            Head::new(store, "cme.mim_head", d, out, rng)
        });
        Ok(Self {
            blocks,
            ln_final,
            mask_token,
            mlm_head,
            mim_head,
            mim_method: cfg.mim_method,
            max_len: enc.image_tokens() + enc.max_text_len,
            calls: Cell::new(0),
        })
    }

    /// Number of [`CrossModal::forward`] invocations so far.
    pub fn calls(&self) -> usize {
        self.calls.get()
    }

    /// Runs the shared blocks over a concatenated `[len, d]` sequence; keys
    /// whose `keep` flag is false are hidden.
    pub fn forward(&self, g: &Graph, seq: Var, keep: &[bool]) -> Result<Var> {
        let len = g.shape(seq)[0];
        if len > self.max_len {
            return Err(Error::InvalidArgument(format!(
                "sequence of {len} tokens exceeds the cross-modal maximum {}",
                self.max_len
            )));
        }
        if keep.len() != len {
            return Err(Error::ShapeMismatch {
                op: "cme_forward",
                lhs: vec![len],
                rhs: vec![keep.len()],
            });
        }
        self.calls.set(self.calls.get() + 1);
        let bias = if keep.iter().all(|&k| k) {
            None
        } else {
            Some(g.constant(key_mask_bias(len, keep)?))
        };
        let mut x = seq;
        for b in &self.blocks {
            x = b.forward(g, x, bias)?;
        }
        self.ln_final.forward(g, x)
    }

    /// `[image ‖ masked text]` pass. Text rows start at the returned offset.
    pub fn mlm_pass(
        &self,
        g: &Graph,
        image: &EncoderOutput,
        masked_text: &EncoderOutput,
    ) -> Result<(Var, usize)> {
        let n_img = g.shape(image.tokens)[0];
        let n_txt = g.shape(masked_text.tokens)[0];
        let mut keep = image.key_visibility(n_img);
        keep.extend(masked_text.key_visibility(n_txt));
        let seq = g.concat_rows(&[image.tokens, masked_text.tokens])?;
        Ok((self.forward(g, seq, &keep)?, n_img))
    }

    /// Adds the image position table to the masked rows so that the cross
    /// encoder can tell masked patches apart.
    pub fn position_masked(
        &self,
        g: &Graph,
        masked_image: Var,
        mask: &ImageMask,
        image_pos: Var,
    ) -> Result<Var> {
        let shape = g.shape(masked_image);
        let (n, d) = (shape[0], shape[1]);
        let mut sel = vec![0.0; n * d];
        for &p in &mask.positions {
            sel[p * d..(p + 1) * d].iter_mut().for_each(|v| *v = 1.0);
        }
        let sel = g.constant(Tensor::matrix(n, d, sel)?);
        g.add(masked_image, g.mul(image_pos, sel)?)
    }

    /// `[text ‖ masked image]` pass. Image rows start at the returned offset.
    pub fn mim_pass(&self, g: &Graph, text: &EncoderOutput, masked_image: Var) -> Result<(Var, usize)> {
        let n_txt = g.shape(text.tokens)[0];
        let n_img = g.shape(masked_image)[0];
        let mut keep = text.key_visibility(n_txt);
        keep.extend(std::iter::repeat_n(true, n_img));
        let seq = g.concat_rows(&[text.tokens, masked_image])?;
        Ok((self.forward(g, seq, &keep)?, n_txt))
    }

    /// `[|M_t|, |V|]` logits at the masked caption positions.
    pub fn mlm_logits(&self, g: &Graph, cme_out: Var, offset: usize, mask: &TextMask) -> Result<Var> {
        let head = self
            .mlm_head
            .as_ref()
            .ok_or_else(|| Error::Config("masked-language head disabled".into()))?;
        if mask.positions.is_empty() {
            return Err(Error::EmptyMask);
        }
        let rows: Vec<usize> = mask.positions.iter().map(|p| p + offset).collect();
        head.forward(g, g.gather_rows(cme_out, &rows)?)
    }

    /// Head outputs at the masked image positions.
    pub fn mim_logits(&self, g: &Graph, cme_out: Var, offset: usize, mask: &ImageMask) -> Result<Var> {
        let head = self
            .mim_head
            .as_ref()
            .ok_or_else(|| Error::Config("masked-image head disabled".into()))?;
        if mask.positions.is_empty() {
            return Err(Error::EmptyMask);
        }
        let rows: Vec<usize> = mask.positions.iter().map(|p| p + offset).collect();
        head.forward(g, g.gather_rows(cme_out, &rows)?)
    }
}
