//! Sprite rasterizer. Parts are painted back to front onto a 64×32 base
//! canvas; the parse map records which part owns each pixel. Other output
//! sizes sample the base canvas with nearest-neighbour lookup.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::attributes::{Part, PersonSpec, Style};
use crate::error::{Error, Result};

pub const BASE_HEIGHT: usize = 64;
pub const BASE_WIDTH: usize = 32;

/// 8-bit RGB image, row-major, channels interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    /// Channel values scaled to `[0, 1]`, layout `H×W×3`.
    pub fn to_unit(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64 / 255.0).collect()
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                data.extend_from_slice(&self.pixel(y, x));
            }
        }
        Self {
            height: self.height,
            width: self.width,
            data,
        }
    }
}

/// Per-pixel class labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParseMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl ParseMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::InvalidShape {
                shape: vec![height, width],
                len: labels.len(),
            });
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l as usize >= num_classes) {
            Some(&l) => Err(Error::ClassRange {
                label: l as usize,
                num_classes,
            }),
            None => Ok(()),
        }
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut labels = Vec::with_capacity(self.labels.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                labels.push(self.get(y, x));
            }
        }
        Self {
            height: self.height,
            width: self.width,
            labels,
        }
    }
}

/// Semantic label set for parse maps. Class 0 is background.
///
/// Eight or more classes give every part its own label; seven merges the
/// hat into the hair class. Larger sets leave the extra ids unused, which
/// mirrors training with a finer-grained parser's label space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassScheme {
    pub num_classes: usize,
}

pub const BACKGROUND: u8 = 0;
pub const FACE: u8 = 2;

impl Default for ClassScheme {
    fn default() -> Self {
        Self { num_classes: 8 }
    }
}

impl ClassScheme {
    pub fn new(num_classes: usize) -> Result<Self> {
        if !(7..=255).contains(&num_classes) {
            return Err(Error::InvalidArgument(format!(
                "class set of {num_classes} labels; need 7..=255"
            )));
        }
        Ok(Self { num_classes })
    }

    pub fn label(&self, part: Part) -> u8 {
        match part {
            Part::Hair => 1,
            Part::Top => 3,
            Part::Bottom => 4,
            Part::Shoes => 5,
            Part::Bag => 6,
            Part::Hat if self.num_classes >= 8 => 7,
            Part::Hat => 1,
        }
    }

    pub fn class_name(&self, label: u8) -> &'static str {
        match label {
            0 => "background",
            1 if self.num_classes < 8 => "hair/hat",
            1 => "hair",
            2 => "face",
            3 => "top",
            4 => "bottom",
            5 => "shoes",
            6 => "bag",
            7 => "hat",
            _ => "unused",
        }
    }
}

/// Per-image pose variation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Jitter {
    /// Horizontal offset of the body centre, in base pixels.
    pub x_offset: i32,
    /// Outward swing of the forearms, 0..=2.
    pub arm_pose: i32,
    /// Outward spread of the legs, 0..=2.
    pub leg_pose: i32,
}

impl Jitter {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            x_offset: rng.random_range(-3..=3),
            arm_pose: rng.random_range(0..=2),
            leg_pose: rng.random_range(0..=2),
        }
    }
}

const BACKGROUND_RGB: [u8; 3] = [90, 140, 140];
const SKIN_RGB: [u8; 3] = [232, 190, 160];
const NOISE: i32 = 8;

struct Canvas {
    rgb: Vec<[u8; 3]>,
    labels: Vec<u8>,
}

impl Canvas {
    fn new() -> Self {
        Self {
            rgb: vec![BACKGROUND_RGB; BASE_HEIGHT * BASE_WIDTH],
            labels: vec![BACKGROUND; BASE_HEIGHT * BASE_WIDTH],
        }
    }

    /// Fills rows `y0..y1`, columns `x0..x1`, clipped to the canvas.
    fn rect(&mut self, y0: i32, y1: i32, x0: i32, x1: i32, rgb: [u8; 3], label: u8) {
        for y in y0.max(0)..y1.min(BASE_HEIGHT as i32) {
            for x in x0.max(0)..x1.min(BASE_WIDTH as i32) {
                let i = y as usize * BASE_WIDTH + x as usize;
                self.rgb[i] = rgb;
                self.labels[i] = label;
            }
        }
    }
}

/// Draws one sprite at `height × width`.
pub fn render<R: Rng + ?Sized>(
    person: &PersonSpec,
    jitter: Jitter,
    scheme: ClassScheme,
    height: usize,
    width: usize,
    rng: &mut R,
) -> (RgbImage, ParseMap) {
    let mut c = Canvas::new();
    let cx = BASE_WIDTH as i32 / 2 + jitter.x_offset;
    let lab = |part: Part| scheme.label(part);

    // legs / lower garment
    if let Some(bottom) = person.get(Part::Bottom) {
        let col = bottom.color.rgb();
        let spread = jitter.leg_pose;
        match bottom.style {
            Style::Skirt => {
                for (i, y) in (36..48).enumerate() {
                    let half = 7 + i as i32 / 3;
                    c.rect(y, y + 1, cx - half, cx + half, col, lab(Part::Bottom));
                }
            }
            style => {
                let end = if style == Style::Shorts { 46 } else { 55 };
                c.rect(36, 42, cx - 6, cx + 6, col, lab(Part::Bottom));
                c.rect(42, end, cx - 6 - spread, cx - 1 - spread, col, lab(Part::Bottom));
                c.rect(42, end, cx + 1 + spread, cx + 6 + spread, col, lab(Part::Bottom));
            }
        }
    }

    // torso and arms
    if let Some(top) = person.get(Part::Top) {
        let col = top.color.rgb();
        c.rect(17, 37, cx - 7, cx + 7, col, lab(Part::Top));
        let sleeve_end = if top.style == Style::Jacket { 35 } else { 27 };
        let swing = jitter.arm_pose;
        c.rect(18, 27, cx - 10, cx - 7, col, lab(Part::Top));
        c.rect(18, 27, cx + 7, cx + 10, col, lab(Part::Top));
        c.rect(27, sleeve_end, cx - 10 - swing, cx - 7 - swing, col, lab(Part::Top));
        c.rect(27, sleeve_end, cx + 7 + swing, cx + 10 + swing, col, lab(Part::Top));
    }

    if let Some(shoes) = person.get(Part::Shoes) {
        let col = shoes.color.rgb();
        let top = if shoes.style == Style::Boots { 51 } else { 55 };
        let s = jitter.leg_pose;
        c.rect(top, 60, cx - 7 - s, cx - 1 - s, col, lab(Part::Shoes));
        c.rect(top, 60, cx + 1 + s, cx + 7 + s, col, lab(Part::Shoes));
    }

    c.rect(7, 17, cx - 4, cx + 4, SKIN_RGB, FACE);

    if let Some(hair) = person.get(Part::Hair) {
        let col = hair.color.rgb();
        c.rect(3, 8, cx - 5, cx + 5, col, lab(Part::Hair));
        if hair.style == Style::Long {
            c.rect(8, 20, cx - 6, cx - 4, col, lab(Part::Hair));
            c.rect(8, 20, cx + 4, cx + 6, col, lab(Part::Hair));
        }
    }

    if let Some(hat) = person.get(Part::Hat) {
        let col = hat.color.rgb();
        match hat.style {
            Style::Cap => {
                c.rect(1, 5, cx - 5, cx + 5, col, lab(Part::Hat));
                c.rect(5, 6, cx - 5, cx + 8, col, lab(Part::Hat));
            }
            _ => {
                c.rect(0, 5, cx - 4, cx + 4, col, lab(Part::Hat));
                c.rect(5, 6, cx - 7, cx + 7, col, lab(Part::Hat));
            }
        }
    }

    if let Some(bag) = person.get(Part::Bag) {
        let col = bag.color.rgb();
        match bag.style {
            Style::Backpack => c.rect(19, 35, cx + 7, cx + 12, col, lab(Part::Bag)),
            _ => c.rect(31, 39, cx - 14 - jitter.arm_pose, cx - 9 - jitter.arm_pose, col, lab(Part::Bag)),
        }
    }

    let mut data = Vec::with_capacity(height * width * 3);
    let mut labels = Vec::with_capacity(height * width);
    for y in 0..height {
        let by = y * BASE_HEIGHT / height;
        for x in 0..width {
            let bx = x * BASE_WIDTH / width;
            let i = by * BASE_WIDTH + bx;
            for ch in c.rgb[i] {
                let n = rng.random_range(-NOISE..=NOISE);
                data.push((ch as i32 + n).clamp(0, 255) as u8);
            }
            labels.push(c.labels[i]);
        }
    }
    (
        RgbImage {
            height,
            width,
            data,
        },
        ParseMap {
            height,
            width,
            labels,
        },
    )
}

/// Parts whose pixels appear in the map.
pub fn visible_parts(map: &ParseMap, scheme: ClassScheme) -> Vec<Part> {
    let mut present = [false; 256];
    for &l in &map.labels {
        present[l as usize] = true;
    }
    Part::ALL
        .into_iter()
        .filter(|&p| present[scheme.label(p) as usize])
        .collect()
}
