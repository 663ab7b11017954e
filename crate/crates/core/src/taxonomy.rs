use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Class set with its thing/stuff split. Class 0 is always "empty".
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Taxonomy {
    pub num_classes: u16,
    pub thing: BTreeSet<u16>,
    pub stuff: BTreeSet<u16>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub names: Vec<String>,
    /// Classes averaged by mIoU; defaults to things plus stuff.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_classes: Option<BTreeSet<u16>>,
}

const NUSCENES_NAMES: [&str; 16] = [
    "barrier",
    "bicycle",
    "bus",
    "car",
    "construction_vehicle",
    "motorcycle",
    "pedestrian",
    "traffic_cone",
    "trailer",
    "truck",
    "driveable_surface",
    "other_flat",
    "sidewalk",
    "terrain",
    "manmade",
    "vegetation",
];

impl Taxonomy {
    pub fn new(num_classes: u16, thing: BTreeSet<u16>, stuff: BTreeSet<u16>) -> Result<Self> {
        let t = Self {
            num_classes,
            thing,
            stuff,
            names: Vec::new(),
            eval_classes: None,
        };
        t.validate()?;
        Ok(t)
    }

    /// nuScenes lidarseg: 10 thing classes (1..=10), 6 stuff classes (11..=16).
    pub fn nuscenes() -> Self {
        Self {
            num_classes: 16,
            thing: (1..=10).collect(),
            stuff: (11..=16).collect(),
            names: NUSCENES_NAMES.iter().map(|s| s.to_string()).collect(),
            eval_classes: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(invalid("num_classes", "taxonomy needs at least one class"));
        }
        if let Some(c) = self.thing.intersection(&self.stuff).next() {
            return Err(invalid("taxonomy", format!("class {c} is both thing and stuff")));
        }
        let all = self.thing.iter().chain(&self.stuff).chain(self.eval_classes.iter().flatten());
        for &c in all {
            if c == 0 || c > self.num_classes {
                return Err(invalid("taxonomy", format!("class {c} outside 1..={}", self.num_classes)));
            }
        }
        Ok(())
    }

    pub fn is_thing(&self, class: u16) -> bool {
        self.thing.contains(&class)
    }

    pub fn eval_classes(&self) -> BTreeSet<u16> {
        self.eval_classes
            .clone()
            .unwrap_or_else(|| self.thing.union(&self.stuff).copied().collect())
    }
}
