use std::collections::BTreeMap;
use std::fmt;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Hair,
    Top,
    Bottom,
    Shoes,
    Bag,
    Hat,
}

impl Part {
    pub const ALL: [Part; 6] = [
        Part::Hair,
        Part::Top,
        Part::Bottom,
        Part::Shoes,
        Part::Bag,
        Part::Hat,
    ];

    pub fn is_optional(self) -> bool {
        matches!(self, Part::Bag | Part::Hat)
    }

    pub fn styles(self) -> &'static [Style] {
        match self {
            Part::Hair => &[Style::Short, Style::Long],
            Part::Top => &[Style::Shirt, Style::Jacket],
            Part::Bottom => &[Style::Pants, Style::Shorts, Style::Skirt],
            Part::Shoes => &[Style::Shoes, Style::Boots],
            Part::Bag => &[Style::Backpack, Style::Handbag],
            Part::Hat => &[Style::Cap, Style::Hat],
        }
    }

    pub fn colors(self) -> &'static [Color] {
        use Color::*;
        match self {
            Part::Hair => &[Black, Brown, Yellow, Red, Gray],
            Part::Shoes => &[Black, White, Brown, Red],
            _ => &Color::ALL,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Blue,
    Green,
    Yellow,
    Black,
    White,
    Gray,
    Purple,
    Brown,
}

impl Color {
    pub const ALL: [Color; 9] = [
        Color::Red,
        Color::Blue,
        Color::Green,
        Color::Yellow,
        Color::Black,
        Color::White,
        Color::Gray,
        Color::Purple,
        Color::Brown,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Blue => "blue",
            Color::Green => "green",
            Color::Yellow => "yellow",
            Color::Black => "black",
            Color::White => "white",
            Color::Gray => "gray",
            Color::Purple => "purple",
            Color::Brown => "brown",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [200, 30, 30],
            Color::Blue => [30, 60, 200],
            Color::Green => [30, 150, 50],
            Color::Yellow => [230, 210, 40],
            Color::Black => [25, 25, 25],
            Color::White => [240, 240, 240],
            Color::Gray => [128, 128, 128],
            Color::Purple => [130, 40, 160],
            Color::Brown => [120, 70, 30],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Style {
    Short,
    Long,
    Shirt,
    Jacket,
    Pants,
    Shorts,
    Skirt,
    Shoes,
    Boots,
    Backpack,
    Handbag,
    Cap,
    Hat,
}

impl Style {
    pub fn word(self) -> &'static str {
        match self {
            Style::Short => "short",
            Style::Long => "long",
            Style::Shirt => "shirt",
            Style::Jacket => "jacket",
            Style::Pants => "pants",
            Style::Shorts => "shorts",
            Style::Skirt => "skirt",
            Style::Shoes => "shoes",
            Style::Boots => "boots",
            Style::Backpack => "backpack",
            Style::Handbag => "handbag",
            Style::Cap => "cap",
            Style::Hat => "hat",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Attribute {
    pub color: Color,
    pub style: Style,
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.color.word(), self.style.word())
    }
}

/// The look of one identity. Absent optional parts are missing from the map.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonSpec {
    pub identity_id: usize,
    pub attributes: BTreeMap<Part, Attribute>,
}

/// Probability that an optional part is present.
const OPTIONAL_PRESENT: f64 = 0.4;

impl PersonSpec {
    pub fn sample<R: Rng + ?Sized>(identity_id: usize, rng: &mut R) -> Self {
        let mut attributes = BTreeMap::new();
        for part in Part::ALL {
            if part.is_optional() && !rng.random_bool(OPTIONAL_PRESENT) {
                continue;
            }
            let color = *part.colors().choose(rng).expect("non-empty palette");
            let style = *part.styles().choose(rng).expect("non-empty styles");
            attributes.insert(part, Attribute { color, style });
        }
        Self {
            identity_id,
            attributes,
        }
    }

    pub fn get(&self, part: Part) -> Option<Attribute> {
        self.attributes.get(&part).copied()
    }

    /// Number of distinct attribute maps the generator can produce.
    pub fn attribute_space() -> u128 {
        Part::ALL
            .iter()
            .map(|p| {
                let n = (p.colors().len() * p.styles().len()) as u128;
                if p.is_optional() {
                    n + 1
                } else {
                    n
                }
            })
            .product()
    }

    fn phrase(&self, part: Part) -> Option<String> {
        let a = self.get(part)?;
        Some(match (part, a.style) {
            (Part::Hair, _) => format!("{a} hair"),
            (Part::Bottom, Style::Pants | Style::Shorts) | (Part::Shoes, _) => a.to_string(),
            _ => format!("a {a}"),
        })
    }

    /// Realizes caption template `template` (0, 1 or 2).
    pub fn caption(&self, template: usize) -> String {
        let hair = self.phrase(Part::Hair).expect("hair is mandatory");
        let top = self.phrase(Part::Top).expect("top is mandatory");
        let bottom = self.phrase(Part::Bottom).expect("bottom is mandatory");
        let shoes = self.phrase(Part::Shoes).expect("shoes are mandatory");
        let bag = self.phrase(Part::Bag);
        let hat = self.phrase(Part::Hat);

        let mut s = match template % NUM_TEMPLATES {
            0 => format!("a person with {hair} and a pale face wearing {top} {bottom} and {shoes}"),
            1 => format!("{hair} and a pale face with {top} and {bottom} and {shoes}"),
            _ => format!("the pedestrian wears {top} {bottom} and {shoes} and has {hair} and a pale face"),
        };
        let (bag_lead, hat_lead) = match template % NUM_TEMPLATES {
            0 => ("with", "and"),
            _ => ("carrying", "wearing"),
        };
        if let Some(b) = bag {
            s.push_str(&format!(" {bag_lead} {b}"));
        }
        if let Some(h) = hat {
            s.push_str(&format!(" {hat_lead} {h}"));
        }
        s
    }
}

pub const NUM_TEMPLATES: usize = 3;

/// Every word any caption can contain, in a fixed order.
pub fn caption_words() -> Vec<&'static str> {
    let mut words = vec![
        "a",
        "person",
        "with",
        "and",
        "pale",
        "face",
        "wearing",
        "the",
        "pedestrian",
        "wears",
        "has",
        "carrying",
        "hair",
    ];
    words.extend(Color::ALL.iter().map(|c| c.word()));
    for part in Part::ALL {
        for s in part.styles() {
            if !words.contains(&s.word()) {
                words.push(s.word());
            }
        }
    }
    words
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn captions_fit_in_thirty_words() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut longest = 0;
        for i in 0..500 {
            let p = PersonSpec::sample(i, &mut rng);
            for t in 0..NUM_TEMPLATES {
                longest = longest.max(p.caption(t).split(' ').count());
            }
        }
        assert!(longest <= 30, "{longest}");
    }

    #[test]
    fn caption_uses_known_words_only() {
        let words = caption_words();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for i in 0..200 {
            let p = PersonSpec::sample(i, &mut rng);
            for t in 0..NUM_TEMPLATES {
                for w in p.caption(t).split(' ') {
                    assert!(words.contains(&w), "{w}");
                }
            }
        }
    }

    #[test]
    fn example_caption() {
        let mut attributes = BTreeMap::new();
        let at = |color, style| Attribute { color, style };
        attributes.insert(Part::Hair, at(Color::Red, Style::Long));
        attributes.insert(Part::Top, at(Color::Blue, Style::Shirt));
        attributes.insert(Part::Bottom, at(Color::Black, Style::Pants));
        attributes.insert(Part::Shoes, at(Color::White, Style::Boots));
        attributes.insert(Part::Bag, at(Color::White, Style::Backpack));
        let p = PersonSpec {
            identity_id: 0,
            attributes,
        };
        assert_eq!(
            p.caption(0),
            "a person with red long hair and a pale face wearing a blue shirt black pants \
             and white boots with a white backpack"
        );
    }
}
