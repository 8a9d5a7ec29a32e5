//! Line-oriented dataset manifest.
//!
//! ```text
//! attrsim-manifest 1
//! side 64
//! attribute 0 glyph 3
//! attribute 1 stripe 3
//! image 0 images/00000.ppm train - 0:2 1:0
//! image 7 images/00007.ppm test query 0:1 1:1
//! ```
//! Blank lines and lines starting with `#` are ignored.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.txt";
const MAGIC: &str = "attrsim-manifest";

pub type ImageId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Query,
    Candidate,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Query => "query",
            Role::Candidate => "candidate",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttributeSchema {
    pub name: String,
    pub value_count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageRecord {
    pub id: ImageId,
    /// Relative to the dataset directory.
    pub path: String,
    pub split: Split,
    /// Set for val/test images only.
    pub role: Option<Role>,
    /// attribute id → value id; may be partial.
    pub labels: BTreeMap<usize, usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub side: usize,
    pub attributes: Vec<AttributeSchema>,
    pub records: Vec<ImageRecord>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for r in &self.records {
            if !ids.insert(r.id) {
                return Err(Error::Data(format!("duplicate image id {}", r.id)));
            }
            match (r.split, r.role) {
                (Split::Train, Some(_)) => {
                    return Err(Error::Data(format!("train image {} carries a role", r.id)))
                }
                (Split::Val | Split::Test, None) => {
                    return Err(Error::Data(format!(
                        "{} image {} needs a query/candidate role",
                        r.split.as_str(),
                        r.id
                    )))
                }
                _ => {}
            }
            for (&a, &v) in &r.labels {
                let schema = self.attributes.get(a).ok_or_else(|| {
                    Error::Data(format!("image {} labels unknown attribute {a}", r.id))
                })?;
                if v >= schema.value_count {
                    return Err(Error::Data(format!(
                        "image {}: value {v} outside attribute {a} ({} values)",
                        r.id, schema.value_count
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn record(&self, id: ImageId) -> Option<&ImageRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{MAGIC} 1\nside {}\n", self.side);
        for (i, a) in self.attributes.iter().enumerate() {
            writeln!(out, "attribute {i} {} {}", a.name, a.value_count).unwrap();
        }
        for r in &self.records {
            let role = r.role.map_or("-", Role::as_str);
            write!(out, "image {} {} {} {role}", r.id, r.path, r.split.as_str()).unwrap();
            for (a, v) in &r.labels {
                write!(out, " {a}:{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let bad = |n: usize, msg: &str| Error::Data(format!("manifest line {n}: {msg}"));
        match lines.next() {
            Some((_, l)) if l == format!("{MAGIC} 1") => {}
            Some((n, _)) => return Err(bad(n, "expected `attrsim-manifest 1` header")),
            None => return Err(Error::Data("empty manifest".into())),
        }
        let mut side = None;
        let mut attributes = Vec::new();
        let mut records = Vec::new();
        for (n, line) in lines {
            let fields: Vec<&str> = line.split_whitespace().collect();
            let num = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| bad(n, &format!("bad number {s:?}")))
            };
            match fields[0] {
                "side" if fields.len() == 2 => side = Some(num(fields[1])?),
                "attribute" if fields.len() == 4 => {
                    if num(fields[1])? != attributes.len() {
                        return Err(bad(n, "attribute ids must be 0, 1, 2, … in order"));
                    }
                    attributes.push(AttributeSchema {
                        name: fields[2].to_string(),
                        value_count: num(fields[3])?,
                    });
                }
                "image" if fields.len() >= 5 => {
                    let role = match fields[4] {
                        "-" => None,
                        "query" => Some(Role::Query),
                        "candidate" => Some(Role::Candidate),
                        other => return Err(bad(n, &format!("unknown role {other:?}"))),
                    };
                    let mut labels = BTreeMap::new();
                    for pair in &fields[5..] {
                        let (a, v) = pair
                            .split_once(':')
                            .ok_or_else(|| bad(n, &format!("label {pair:?} is not attr:value")))?;
                        labels.insert(num(a)?, num(v)?);
                    }
                    records.push(ImageRecord {
                        id: num(fields[1])? as ImageId,
                        path: fields[2].to_string(),
                        split: Split::parse(fields[3]).map_err(|_| bad(n, "unknown split"))?,
                        role,
                        labels,
                    });
                }
                _ => return Err(bad(n, &format!("unrecognised line {line:?}"))),
            }
        }
        let manifest = DatasetManifest {
            side: side.ok_or_else(|| Error::Data("manifest lacks a `side` line".into()))?,
            attributes,
            records,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
