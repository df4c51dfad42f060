use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Inner,
    Outer,
}

/// Attribute names and their inner/outer face partition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub names: Vec<String>,
    pub region: BTreeMap<String, Region>,
}

const OUTER: [&str; 17] = [
    "Bald",
    "Bangs",
    "Black_Hair",
    "Blond_Hair",
    "Brown_Hair",
    "Double_Chin",
    "Gray_Hair",
    "Receding_Hairline",
    "Sideburns",
    "Straight_Hair",
    "Wavy_Hair",
    "Wearing_Earrings",
    "Wearing_Hat",
    "Wearing_Necklace",
    "Wearing_Necktie",
    "Oval_Face",
    "Chubby",
];

const INNER: [&str; 23] = [
    "5_o_Clock_Shadow",
    "Arched_Eyebrows",
    "Attractive",
    "Bags_Under_Eyes",
    "Big_Lips",
    "Big_Nose",
    "Blurry",
    "Bushy_Eyebrows",
    "Eyeglasses",
    "Goatee",
    "Heavy_Makeup",
    "High_Cheekbones",
    "Male",
    "Mouth_Slightly_Open",
    "Mustache",
    "Narrow_Eyes",
    "No_Beard",
    "Pale_Skin",
    "Pointy_Nose",
    "Rosy_Cheeks",
    "Smiling",
    "Wearing_Lipstick",
    "Young",
];

impl AttributeSpec {
    pub fn new(names: Vec<String>, region: BTreeMap<String, Region>) -> Result<Self> {
        let spec = Self { names, region };
        spec.validate()?;
        Ok(spec)
    }

    /// The 40 CelebA attributes: 17 outer-face, 23 inner-face.
    pub fn celeba() -> Self {
        let mut names = Vec::with_capacity(40);
        let mut region = BTreeMap::new();
        for n in OUTER {
            names.push(n.to_string());
            region.insert(n.to_string(), Region::Outer);
        }
        for n in INNER {
            names.push(n.to_string());
            region.insert(n.to_string(), Region::Inner);
        }
        Self { names, region }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for n in &self.names {
            if !seen.insert(n) {
                return Err(Error::Label(format!("attribute `{n}` listed twice")));
            }
            if !self.region.contains_key(n) {
                return Err(Error::Label(format!("attribute `{n}` has no region")));
            }
        }
        if let Some(extra) = self.region.keys().find(|k| !seen.contains(k)) {
            return Err(Error::Label(format!("region given for unknown attribute `{extra}`")));
        }
        Ok(())
    }

    pub fn region_of(&self, index: usize) -> Region {
        self.region[&self.names[index]]
    }

    pub fn count(&self, region: Region) -> usize {
        (0..self.names.len()).filter(|&i| self.region_of(i) == region).count()
    }
}
