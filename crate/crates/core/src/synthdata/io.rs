//! On-disk layout: `images/NNNN.ppm`, `parse/NNNN.pgm`, `meta.jsonl` (one
//! record per caption) and `vocab.json`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::attributes::{Attribute, Part, PersonSpec};
use super::pnm::{decode_pgm, decode_ppm, encode_pgm, encode_ppm};
use super::render::ClassScheme;
use super::vocab::Vocab;
use super::{CaptionRecord, Dataset, PersonImage};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct MetaRecord {
    image: String,
    parse: String,
    text: String,
    identity: usize,
    attributes: BTreeMap<Part, Attribute>,
    height: usize,
    width: usize,
    num_classes: usize,
}

fn image_name(i: usize) -> String {
    format!("images/{i:04}.ppm")
}

fn parse_name(i: usize) -> String {
    format!("parse/{i:04}.pgm")
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("parse"))?;
    for (i, img) in ds.images.iter().enumerate() {
        fs::write(dir.join(image_name(i)), encode_ppm(&img.image))?;
        fs::write(dir.join(parse_name(i)), encode_pgm(&img.parse))?;
    }
    let mut meta = Vec::new();
    for c in &ds.captions {
        let img = &ds.images[c.image_index];
        let rec = MetaRecord {
            image: image_name(c.image_index),
            parse: parse_name(c.image_index),
            text: c.text.clone(),
            identity: c.identity,
            attributes: img.person.attributes.clone(),
            height: img.image.height,
            width: img.image.width,
            num_classes: ds.scheme.num_classes,
        };
        serde_json::to_writer(&mut meta, &rec)?;
        meta.push(b'\n');
    }
    fs::File::create(dir.join("meta.jsonl"))?.write_all(&meta)?;
    fs::write(dir.join("vocab.json"), ds.vocab.to_json()?)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let vocab = Vocab::from_json(&fs::read_to_string(dir.join("vocab.json"))?)?;
    let meta_path = dir.join("meta.jsonl");
    let meta = fs::read_to_string(&meta_path)?;

    let mut images: Vec<PersonImage> = Vec::new();
    let mut index_of: BTreeMap<String, usize> = BTreeMap::new();
    let mut captions = Vec::new();
    let mut scheme: Option<ClassScheme> = None;

    for (line_no, line) in meta.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let at = |reason: String| Error::corrupt(&meta_path, format!("line {}: {reason}", line_no + 1));
        let rec: MetaRecord = serde_json::from_str(line).map_err(|e| at(e.to_string()))?;
        let s = match scheme {
            Some(s) if s.num_classes != rec.num_classes => {
                return Err(at("num_classes differs between records".into()))
            }
            Some(s) => s,
            None => *scheme.insert(ClassScheme::new(rec.num_classes)?),
        };

        let image_index = match index_of.get(&rec.image) {
            Some(&i) => {
                let img = &images[i];
                if img.identity() != rec.identity || img.person.attributes != rec.attributes {
                    return Err(at(format!("conflicting metadata for {}", rec.image)));
                }
                i
            }
            None => {
                let ppm_path = dir.join(&rec.image);
                let pgm_path = dir.join(&rec.parse);
                let image = decode_ppm(&fs::read(&ppm_path)?, &ppm_path)?;
                let parse = decode_pgm(&fs::read(&pgm_path)?, s.num_classes, &pgm_path)?;
                if (image.height, image.width) != (rec.height, rec.width) {
                    return Err(Error::corrupt(
                        &ppm_path,
                        format!(
                            "image is {}x{}, metadata says {}x{}",
                            image.height, image.width, rec.height, rec.width
                        ),
                    ));
                }
                if (parse.height, parse.width) != (rec.height, rec.width) {
                    return Err(Error::corrupt(
                        &pgm_path,
                        format!(
                            "parse map is {}x{}, metadata says {}x{}",
                            parse.height, parse.width, rec.height, rec.width
                        ),
                    ));
                }
                index_of.insert(rec.image.clone(), images.len());
                images.push(PersonImage {
                    image,
                    parse,
                    person: PersonSpec {
                        identity_id: rec.identity,
                        attributes: rec.attributes.clone(),
                    },
                });
                images.len() - 1
            }
        };
        captions.push(CaptionRecord {
            image_index,
            text: rec.text,
            identity: rec.identity,
        });
    }
    let scheme = scheme.ok_or_else(|| Error::corrupt(&meta_path, "no records"))?;
    Ok(Dataset {
        images,
        captions,
        vocab,
        scheme,
    })
}
