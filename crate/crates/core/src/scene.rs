//! Explicit scene codes: what the heads predict, what the renderer draws and
//! what the labels store.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameter groups a world or a set of heads can enable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Position,
    Color,
    Rotation,
    Confidence,
    Light,
}

impl Group {
    pub const ALL: [Group; 5] = [Group::Position, Group::Color, Group::Rotation, Group::Confidence, Group::Light];

    pub fn name(self) -> &'static str {
        match self {
            Group::Position => "position",
            Group::Color => "color",
            Group::Rotation => "rotation",
            Group::Confidence => "confidence",
            Group::Light => "light",
        }
    }

    pub fn parse(s: &str) -> Result<Group> {
        Group::ALL
            .into_iter()
            .find(|g| g.name() == s || (s == "center" && *g == Group::Position) || (s == "rgb" && *g == Group::Color))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown parameter group '{s}'")))
    }

    fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Small set of [`Group`]s.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct GroupSet(u8);

impl GroupSet {
    pub fn of(groups: &[Group]) -> Self {
        let mut s = Self::default();
        for &g in groups {
            s.insert(g);
        }
        s
    }

    pub fn contains(self, g: Group) -> bool {
        self.0 & g.bit() != 0
    }

    pub fn insert(&mut self, g: Group) {
        self.0 |= g.bit();
    }

    pub fn iter(self) -> impl Iterator<Item = Group> {
        Group::ALL.into_iter().filter(move |g| self.contains(*g))
    }

    /// Comma-separated names, e.g. `position,color`.
    pub fn to_list(self) -> String {
        self.iter().map(Group::name).collect::<Vec<_>>().join(",")
    }

    pub fn parse_list(s: &str) -> Result<Self> {
        let mut set = Self::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            set.insert(Group::parse(part)?);
        }
        Ok(set)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    /// World units; two entries for planar worlds, three otherwise.
    pub center: Vec<f64>,
    pub rgb: Option<[f64; 3]>,
    /// Radians in `(-pi, pi]`.
    pub rotation: Option<f64>,
    pub confidence: Option<f64>,
}

impl SceneObject {
    pub fn at(center: Vec<f64>) -> Self {
        Self {
            center,
            rgb: None,
            rotation: None,
            confidence: None,
        }
    }
}

/// Per-object attributes plus the global light direction
/// `(azimuth, elevation)` in radians.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SceneCode {
    pub objects: Vec<SceneObject>,
    pub light: Option<[f64; 2]>,
}

/// One line of `labels.jsonl`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub centers: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub colors: Option<Vec<[f64; 3]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotations: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidences: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub light: Option<[f64; 2]>,
}

impl SceneCode {
    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn to_record(&self) -> LabelRecord {
        let all = |f: &dyn Fn(&SceneObject) -> bool| !self.objects.is_empty() && self.objects.iter().all(f);
        LabelRecord {
            centers: self.objects.iter().map(|o| o.center.clone()).collect(),
            colors: all(&|o| o.rgb.is_some()).then(|| self.objects.iter().map(|o| o.rgb.unwrap()).collect()),
            rotations: all(&|o| o.rotation.is_some())
                .then(|| self.objects.iter().map(|o| o.rotation.unwrap()).collect()),
            confidences: all(&|o| o.confidence.is_some())
                .then(|| self.objects.iter().map(|o| o.confidence.unwrap()).collect()),
            light: self.light,
        }
    }

    pub fn from_record(r: &LabelRecord) -> Result<Self> {
        let n = r.centers.len();
        let check = |what: &str, len: Option<usize>| match len {
            Some(l) if l != n => Err(Error::ShapeMismatch(format!("{l} {what} for {n} objects"))),
            _ => Ok(()),
        };
        check("colors", r.colors.as_ref().map(Vec::len))?;
        check("rotations", r.rotations.as_ref().map(Vec::len))?;
        check("confidences", r.confidences.as_ref().map(Vec::len))?;
        let objects = (0..n)
            .map(|i| SceneObject {
                center: r.centers[i].clone(),
                rgb: r.colors.as_ref().map(|c| c[i]),
                rotation: r.rotations.as_ref().map(|c| c[i]),
                confidence: r.confidences.as_ref().map(|c| c[i]),
            })
            .collect();
        Ok(SceneCode {
            objects,
            light: r.light,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_record()).expect("label records always serialize")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let rec: LabelRecord = serde_json::from_str(s)
            .map_err(|e| Error::format("scene json", 0, format!("line {} column {}: {e}", e.line(), e.column())))?;
        Self::from_record(&rec)
    }
}
