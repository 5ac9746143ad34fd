//! Procedural sprite-person dataset: images, exact part masks, templated
//! captions and a word-level vocabulary.

mod attributes;
mod io;
pub mod pnm;
mod render;
mod vocab;

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use attributes::{caption_words, Attribute, Color, Part, PersonSpec, Style, NUM_TEMPLATES};
pub use io::{read_dataset, write_dataset};
pub use render::{
    render, visible_parts, ClassScheme, Jitter, ParseMap, RgbImage, BACKGROUND, BASE_HEIGHT,
    BASE_WIDTH, FACE,
};
pub use vocab::{detokenize, tokenize, validate_sequence, Vocab, EOS, MASK, PAD, SOS};

use crate::error::{Error, Result};

/// Generation parameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GenConfig {
    pub seed: u64,
    pub num_identities: usize,
    pub images_per_identity: usize,
    pub captions_per_image: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_identities: 64,
            images_per_identity: 4,
            captions_per_image: 2,
            height: BASE_HEIGHT,
            width: BASE_WIDTH,
            num_classes: ClassScheme::default().num_classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PersonImage {
    pub image: RgbImage,
    pub parse: ParseMap,
    pub person: PersonSpec,
}

impl PersonImage {
    pub fn identity(&self) -> usize {
        self.person.identity_id
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaptionRecord {
    /// Index into [`Dataset::images`].
    pub image_index: usize,
    pub text: String,
    pub identity: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub images: Vec<PersonImage>,
    pub captions: Vec<CaptionRecord>,
    pub vocab: Vocab,
    pub scheme: ClassScheme,
}

/// Sub-stream of the generator: stream 0 draws identities, stream `1 + i`
/// renders image `i`.
fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn generate_dataset(cfg: &GenConfig) -> Result<(Dataset, Vocab)> {
    if cfg.num_identities == 0 || cfg.images_per_identity == 0 || cfg.captions_per_image == 0 {
        return Err(Error::InvalidArgument("dataset counts must be positive".into()));
    }
    if (cfg.num_identities as u128) > PersonSpec::attribute_space() {
        return Err(Error::InvalidArgument(format!(
            "attribute space of {} cannot hold {} identities",
            PersonSpec::attribute_space(),
            cfg.num_identities
        )));
    }
    let scheme = ClassScheme::new(cfg.num_classes)?;
    let vocab = Vocab::captions();

    let mut id_rng = substream(cfg.seed, 0);
    let mut seen = BTreeSet::new();
    let mut people = Vec::with_capacity(cfg.num_identities);
    while people.len() < cfg.num_identities {
        let p = PersonSpec::sample(people.len(), &mut id_rng);
        if seen.insert(p.attributes.clone()) {
            people.push(p);
        }
    }

    let mut images = Vec::new();
    let mut captions = Vec::new();
    for person in &people {
        for _ in 0..cfg.images_per_identity {
            let index = images.len();
            let mut rng = substream(cfg.seed, 1 + index as u64);
            let jitter = Jitter::sample(&mut rng);
            let (image, parse) = render(person, jitter, scheme, cfg.height, cfg.width, &mut rng);
            let first_template = rng.random_range(0..NUM_TEMPLATES);
            for c in 0..cfg.captions_per_image {
                captions.push(CaptionRecord {
                    image_index: index,
                    text: person.caption(first_template + c),
                    identity: person.identity_id,
                });
            }
            images.push(PersonImage {
                image,
                parse,
                person: person.clone(),
            });
        }
    }
    let ds = Dataset {
        images,
        captions,
        vocab: vocab.clone(),
        scheme,
    };
    Ok((ds, vocab))
}

impl Dataset {
    pub fn identities(&self) -> BTreeSet<usize> {
        self.images.iter().map(PersonImage::identity).collect()
    }

    /// Splits by identity: the `num_test` largest identity ids form the test
    /// part. Image indices inside each part are renumbered.
    pub fn split_by_identity(&self, num_test: usize) -> Result<(Dataset, Dataset)> {
        let ids: Vec<usize> = self.identities().into_iter().collect();
        if num_test == 0 || num_test >= ids.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot hold out {num_test} of {} identities",
                ids.len()
            )));
        }
        let test_ids: BTreeSet<usize> = ids[ids.len() - num_test..].iter().copied().collect();
        Ok((
            self.subset(|id| !test_ids.contains(&id)),
            self.subset(|id| test_ids.contains(&id)),
        ))
    }

    fn subset(&self, keep: impl Fn(usize) -> bool) -> Dataset {
        let mut remap = BTreeMap::new();
        let mut images = Vec::new();
        for (i, img) in self.images.iter().enumerate() {
            if keep(img.identity()) {
                remap.insert(i, images.len());
                images.push(img.clone());
            }
        }
        let captions = self
            .captions
            .iter()
            .filter_map(|c| {
                remap.get(&c.image_index).map(|&image_index| CaptionRecord {
                    image_index,
                    ..c.clone()
                })
            })
            .collect();
        Dataset {
            images,
            captions,
            vocab: self.vocab.clone(),
            scheme: self.scheme,
        }
    }

    /// Token ids of every caption.
    pub fn token_ids(&self, max_len: usize) -> Result<Vec<Vec<usize>>> {
        self.captions
            .iter()
            .map(|c| tokenize(&c.text, &self.vocab, max_len))
            .collect()
    }
}

/// Whether image `index` is mirrored in `epoch`. A pure function of its inputs.
pub fn flip_for_epoch(seed: u64, epoch: usize, index: usize) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f11b);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng.random_bool(0.5)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GenConfig {
        GenConfig {
            num_identities: 12,
            images_per_identity: 2,
            ..GenConfig::default()
        }
    }

    #[test]
    fn counts() {
        let (d, _) = generate_dataset(&GenConfig::default()).unwrap();
        assert_eq!(d.images.len(), 256);
        assert_eq!(d.captions.len(), 512);
    }

    #[test]
    fn deterministic() {
        let (a, _) = generate_dataset(&small()).unwrap();
        let (b, _) = generate_dataset(&small()).unwrap();
        assert_eq!(a, b);
        let (c, _) = generate_dataset(&GenConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn identity_iff_attributes() {
        let (d, _) = generate_dataset(&GenConfig::default()).unwrap();
        for a in &d.images {
            for b in &d.images {
                assert_eq!(
                    a.identity() == b.identity(),
                    a.person.attributes == b.person.attributes
                );
            }
        }
    }

    #[test]
    fn renders_of_one_identity_differ() {
        let (d, _) = generate_dataset(&small()).unwrap();
        assert_ne!(d.images[0].image, d.images[1].image);
    }

    #[test]
    fn caption_words_match_parse_classes() {
        let (d, _) = generate_dataset(&GenConfig::default()).unwrap();
        for img in &d.images {
            let visible = visible_parts(&img.parse, d.scheme);
            for part in Part::ALL {
                assert_eq!(visible.contains(&part), img.person.get(part).is_some());
            }
        }
        for c in &d.captions {
            let img = &d.images[c.image_index];
            let words: BTreeSet<&str> = c.text.split(' ').collect();
            let visible = visible_parts(&img.parse, d.scheme);
            for part in Part::ALL {
                let named = match img.person.get(part) {
                    Some(a) => words.contains(a.style.word()) && words.contains(a.color.word()),
                    None => false,
                };
                assert_eq!(named, visible.contains(&part), "{part:?} in `{}`", c.text);
            }
            let labels: BTreeSet<u8> = img.parse.labels.iter().copied().collect();
            for l in labels {
                let named = l == BACKGROUND
                    || (l == FACE && words.contains("face"))
                    || Part::ALL.iter().any(|&p| {
                        d.scheme.label(p) == l
                            && img.person.get(p).is_some_and(|a| {
                                words.contains(a.style.word()) && words.contains(a.color.word())
                            })
                    });
                assert!(named, "class {l} not named in `{}`", c.text);
            }
        }
    }

    #[test]
    fn tokenize_round_trip() {
        let (d, v) = generate_dataset(&GenConfig::default()).unwrap();
        for c in d.captions.iter().take(100) {
            let ids = tokenize(&c.text, &v, 32).unwrap();
            assert_eq!(detokenize(&ids, &v).unwrap(), c.text);
            assert!(!ids.contains(&v.mask()));
        }
    }

    #[test]
    fn split_is_identity_disjoint() {
        let (d, _) = generate_dataset(&GenConfig::default()).unwrap();
        let (train, test) = d.split_by_identity(16).unwrap();
        assert!(train.identities().is_disjoint(&test.identities()));
        assert_eq!(test.identities().len(), 16);
        assert_eq!(train.images.len() + test.images.len(), d.images.len());
        for c in &test.captions {
            assert_eq!(test.images[c.image_index].identity(), c.identity);
        }
    }

    #[test]
    fn too_many_identities() {
        let n = PersonSpec::attribute_space() as usize + 1;
        let cfg = GenConfig {
            num_identities: n,
            ..GenConfig::default()
        };
        assert!(generate_dataset(&cfg).is_err());
    }

    #[test]
    fn flip_schedule_is_pure() {
        let a: Vec<bool> = (0..64).map(|i| flip_for_epoch(3, 2, i)).collect();
        let b: Vec<bool> = (0..64).map(|i| flip_for_epoch(3, 2, i)).collect();
        assert_eq!(a, b);
        assert!(a.iter().any(|&f| f) && a.iter().any(|&f| !f));
    }
}
