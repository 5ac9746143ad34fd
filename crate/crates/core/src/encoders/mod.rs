//! Dual transformer encoders: a patch-embedding ViT for images and a token
//! transformer for captions.

pub mod layers;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numkernel::{Graph, Init, ParamId, ParamStore, Tensor, Var};
use crate::synthdata::{validate_sequence, Vocab};
use layers::{key_mask_bias, Block, LayerNorm, Linear, INIT_STD};

/// Which text position provides the caption's global feature.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TextGlobal {
    #[default]
    Sos,
    Eos,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub patch_size: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub max_text_len: usize,
    pub vocab_size: usize,
}

impl EncoderConfig {
    pub fn num_image_patches(&self) -> usize {
        (self.image_height / self.patch_size) * (self.image_width / self.patch_size)
    }

    /// Length of the image token sequence, CLS included.
    pub fn image_tokens(&self) -> usize {
        self.num_image_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hidden_dim == 0 || self.num_heads == 0 || !self.hidden_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "hidden_dim {} must be a positive multiple of num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if self.patch_size == 0
            || !self.image_height.is_multiple_of(self.patch_size)
            || !self.image_width.is_multiple_of(self.patch_size)
            || self.image_height == 0
            || self.image_width == 0
        {
            return bad(format!(
                "{}x{} images are not divisible into {p}x{p} patches",
                self.image_height,
                self.image_width,
                p = self.patch_size
            ));
        }
        if self.max_text_len < 2 {
            return bad("max_text_len must leave room for [SOS] and [EOS]".into());
        }
        if self.vocab_size == 0 {
            return bad("empty vocabulary".into());
        }
        Ok(())
    }
}

/// Token sequence produced by an encoder.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    /// `[len, d]`
    pub tokens: Var,
    pub kind: Special,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Special {
    /// CLS at row 0.
    Image,
    /// SOS at row 0; rows after `eos` are padding.
    Text { eos: usize },
}

impl EncoderOutput {
    /// Attention-key visibility of each row (padding is hidden).
    pub fn key_visibility(&self, len: usize) -> Vec<bool> {
        match self.kind {
            Special::Image => vec![true; len],
            Special::Text { eos } => (0..len).map(|i| i <= eos).collect(),
        }
    }
}

/// Cuts an `h × w × 3` row-major image into `P×P` patches, one row per patch,
/// patches in raster order, values ordered (y, x, channel) within a patch.
pub fn patchify(pixels: &[f64], height: usize, width: usize, p: usize) -> Result<Tensor> {
    if pixels.len() != height * width * 3 {
        return Err(Error::InvalidShape {
            shape: vec![height, width, 3],
            len: pixels.len(),
        });
    }
    if p == 0 || !height.is_multiple_of(p) || !width.is_multiple_of(p) {
        return Err(Error::InvalidArgument(format!(
            "{height}x{width} image is not divisible into {p}x{p} patches"
        )));
    }
    let (gr, gc) = (height / p, width / p);
    let mut data = Vec::with_capacity(pixels.len());
    for r in 0..gr {
        for c in 0..gc {
            for y in r * p..(r + 1) * p {
                let start = (y * width + c * p) * 3;
                data.extend_from_slice(&pixels[start..start + p * 3]);
            }
        }
    }
    Tensor::matrix(gr * gc, 3 * p * p, data)
}

#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub cfg: EncoderConfig,
    pub patch_embed: Linear,
    pub cls: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub ln_final: LayerNorm,
}

impl ImageEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.hidden_dim;
        Ok(Self {
            cfg: cfg.clone(),
            patch_embed: Linear::new(store, "image.patch_embed", cfg.patch_dim(), d, rng),
            cls: store.register("image.cls", &[1, d], Init::TruncNormal(INIT_STD), rng),
            pos: store.register("image.pos", &[cfg.image_tokens(), d], Init::TruncNormal(INIT_STD), rng),
            blocks: (0..cfg.num_layers)
                .map(|i| Block::new(store, &format!("image.block{i}"), d, cfg.num_heads, rng))
                .collect(),
            ln_final: LayerNorm::new(store, "image.ln_final", d, rng),
        })
    }

    /// Encodes pre-cut patches (`[N_v, 3P²]`).
    pub fn encode_patches(&self, g: &Graph, patches: Var) -> Result<EncoderOutput> {
        let shape = g.shape(patches);
        if shape != [self.cfg.num_image_patches(), self.cfg.patch_dim()] {
            return Err(Error::ShapeMismatch {
                op: "encode_image",
                lhs: shape,
                rhs: vec![self.cfg.num_image_patches(), self.cfg.patch_dim()],
            });
        }
        let emb = self.patch_embed.forward(g, patches)?;
        let x = g.concat_rows(&[g.param(self.cls), emb])?;
        let mut x = g.add(x, g.param(self.pos))?;
        for b in &self.blocks {
            x = b.forward(g, x, None)?;
        }
        Ok(EncoderOutput {
            tokens: self.ln_final.forward(g, x)?,
            kind: Special::Image,
        })
    }

    /// `pixels` is `H × W × 3` in `[0, 1]`, row-major.
    pub fn encode(&self, g: &Graph, pixels: &[f64]) -> Result<EncoderOutput> {
        let c = &self.cfg;
        let patches = patchify(pixels, c.image_height, c.image_width, c.patch_size)?;
        self.encode_patches(g, g.constant(patches))
    }
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub cfg: EncoderConfig,
    pub token_embed: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub ln_final: LayerNorm,
}

impl TextEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.hidden_dim;
        Ok(Self {
            cfg: cfg.clone(),
            token_embed: store.register(
                "text.token_embed",
                &[cfg.vocab_size, d],
                Init::TruncNormal(INIT_STD),
                rng,
            ),
            pos: store.register("text.pos", &[cfg.max_text_len, d], Init::TruncNormal(INIT_STD), rng),
            blocks: (0..cfg.num_layers)
                .map(|i| Block::new(store, &format!("text.block{i}"), d, cfg.num_heads, rng))
                .collect(),
            ln_final: LayerNorm::new(store, "text.ln_final", d, rng),
        })
    }

    /// Encodes a well-formed `[SOS] … [EOS] [PAD]…` sequence. Sequences
    /// shorter than `max_text_len` are padded first.
    pub fn encode(&self, g: &Graph, ids: &[usize], vocab: &Vocab) -> Result<EncoderOutput> {
        if ids.len() > self.cfg.max_text_len {
            return Err(Error::MalformedSequence(format!(
                "{} tokens exceed max_text_len {}",
                ids.len(),
                self.cfg.max_text_len
            )));
        }
        let eos = validate_sequence(ids, vocab)?;
        let mut padded = ids.to_vec();
        padded.resize(self.cfg.max_text_len, vocab.pad());
        self.encode_raw(g, &padded, eos + 1)
    }

    /// Encodes `ids` with keys at positions `>= visible` hidden from attention.
    /// Performs no grammar check.
    pub fn encode_raw(&self, g: &Graph, ids: &[usize], visible: usize) -> Result<EncoderOutput> {
        if ids.len() != self.cfg.max_text_len || visible == 0 || visible > ids.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} ids with 1..={} visible, got {} with {visible}",
                self.cfg.max_text_len,
                self.cfg.max_text_len,
                ids.len()
            )));
        }
        let n = ids.len();
        let emb = g.gather_rows(g.param(self.token_embed), ids)?;
        let mut x = g.add(emb, g.param(self.pos))?;
        let keep: Vec<bool> = (0..n).map(|i| i < visible).collect();
        let bias = if visible < n {
            Some(g.constant(key_mask_bias(n, &keep)?))
        } else {
            None
        };
        for b in &self.blocks {
            x = b.forward(g, x, bias)?;
        }
        Ok(EncoderOutput {
            tokens: self.ln_final.forward(g, x)?,
            kind: Special::Text { eos: visible - 1 },
        })
    }
}

/// Unit-norm global features `[1, d]` of an image and a caption.
pub fn global_features(
    g: &Graph,
    img: &EncoderOutput,
    txt: &EncoderOutput,
    which: TextGlobal,
) -> Result<(Var, Var)> {
    Ok((image_global(g, img)?, text_global(g, txt, which)?))
}

pub fn image_global(g: &Graph, img: &EncoderOutput) -> Result<Var> {
    if img.kind != Special::Image {
        return Err(Error::InvalidArgument("expected an image encoding".into()));
    }
    g.l2_normalize_rows(g.gather_rows(img.tokens, &[0])?)
}

pub fn text_global(g: &Graph, txt: &EncoderOutput, which: TextGlobal) -> Result<Var> {
    let Special::Text { eos } = txt.kind else {
        return Err(Error::InvalidArgument("expected a text encoding".into()));
    };
    let row = match which {
        TextGlobal::Sos => 0,
        TextGlobal::Eos => eos,
    };
    g.l2_normalize_rows(g.gather_rows(txt.tokens, &[row])?)
}

/// Both encoders registered in one store.
#[derive(Clone, Debug)]
pub struct DualEncoder {
    pub image: ImageEncoder,
    pub text: TextEncoder,
}

impl DualEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        Ok(Self {
            image: ImageEncoder::new(store, cfg, rng)?,
            text: TextEncoder::new(store, cfg, rng)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> EncoderConfig {
        EncoderConfig {
            hidden_dim: 16,
            num_layers: 2,
            num_heads: 4,
            patch_size: 8,
            image_height: 64,
            image_width: 32,
            max_text_len: 32,
            vocab_size: Vocab::captions().len(),
        }
    }

    #[test]
    fn image_output_length() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = ImageEncoder::new(&mut store, &cfg(), &mut rng).unwrap();
        let g = Graph::with_params(&store);
        let img: Vec<f64> = (0..64 * 32 * 3).map(|_| rng.random()).collect();
        let out = enc.encode(&g, &img).unwrap();
        assert_eq!(g.shape(out.tokens), vec![33, 16]);
        assert!(g.value(out.tokens).is_finite());
        assert!(enc.encode(&g, &img[..100]).is_err());
    }

    #[test]
    fn patchify_layout() {
        // 2x4 image, P=2: two patches side by side
        let px: Vec<f64> = (0..24).map(f64::from).collect();
        let t = patchify(&px, 2, 4, 2).unwrap();
        assert_eq!(t.shape(), &[2, 12]);
        assert_eq!(t.row(0), &[0., 1., 2., 3., 4., 5., 12., 13., 14., 15., 16., 17.]);
    }

    #[test]
    fn text_output_length_and_padding() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = Vocab::captions();
        let enc = TextEncoder::new(&mut store, &cfg(), &mut rng).unwrap();
        let g = Graph::with_params(&store);
        let short = crate::synthdata::tokenize("red hair", &v, 6).unwrap();
        let full = crate::synthdata::tokenize("red hair", &v, 32).unwrap();
        let a = enc.encode(&g, &short, &v).unwrap();
        let b = enc.encode(&g, &full, &v).unwrap();
        assert_eq!(g.shape(a.tokens), vec![32, 16]);
        assert_eq!(*g.value(a.tokens), *g.value(b.tokens));
        assert!(matches!(a.kind, Special::Text { eos: 3 }));
    }
}
