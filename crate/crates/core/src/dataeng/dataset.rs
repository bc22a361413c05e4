use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::mmgt::{read_tensor, write_tensor};
use crate::encoders::ModalitySample;
use crate::error::{Error, Result};
use crate::modality::{Modality, ModalityMask};
use crate::numcore::Tensor;

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "base-train")]
    BaseTrain,
    #[serde(rename = "base-test")]
    BaseTest,
    #[serde(rename = "novel")]
    Novel,
    #[serde(rename = "unlabeled")]
    Unlabeled,
}

impl Split {
    pub fn is_base(self) -> bool {
        matches!(self, Split::BaseTrain | Split::BaseTest)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::BaseTrain => "base-train",
            Split::BaseTest => "base-test",
            Split::Novel => "novel",
            Split::Unlabeled => "unlabeled",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleFiles {
    pub video: String,
    pub audio: String,
    pub imu: String,
}

impl ExampleFiles {
    pub fn for_id(id: &str) -> Self {
        ExampleFiles {
            video: format!("{id}/video.mmgt"),
            audio: format!("{id}/audio.mmgt"),
            imu: format!("{id}/imu.mmgt"),
        }
    }

    pub fn get(&self, m: Modality) -> &str {
        match m {
            Modality::Video => &self.video,
            Modality::Audio => &self.audio,
            Modality::Imu => &self.imu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub id: String,
    pub clip_id: String,
    pub label: Option<usize>,
    pub split: Split,
    pub files: ExampleFiles,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub base_classes: Vec<usize>,
    pub novel_classes: Vec<usize>,
    pub examples: Vec<ExampleRecord>,
}

impl DatasetManifest {
    /// Writes `manifest.json` via a temporary file and a rename.
    pub fn write_atomic(&self, dir: &Path) -> Result<()> {
        let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
        let dst = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &dst).map_err(|e| Error::io(&dst, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    /// Structural checks: unique ids and labels drawn from the split's class table.
    pub fn check(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Data(format!(
                "unsupported schema_version {}",
                self.schema_version
            )));
        }
        let base: HashSet<_> = self.base_classes.iter().collect();
        let novel: HashSet<_> = self.novel_classes.iter().collect();
        let mut ids = HashSet::new();
        for r in &self.examples {
            if !ids.insert(r.id.as_str()) {
                return Err(Error::Data(format!("duplicate example id '{}'", r.id)));
            }
            let ok = match (r.split, r.label) {
                (Split::Unlabeled, None) => true,
                (Split::Unlabeled, Some(_)) | (_, None) => false,
                (Split::Novel, Some(l)) => novel.contains(&l),
                (_, Some(l)) => base.contains(&l),
            };
            if !ok {
                return Err(Error::Data(format!(
                    "example '{}': label {:?} not valid for split {}",
                    r.id, r.label, r.split
                )));
            }
        }
        Ok(())
    }
}

/// One example with all three modalities materialized (`[tokens × width]` each).
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalExample {
    pub id: String,
    pub clip_id: String,
    pub label: Option<usize>,
    pub split: Split,
    pub tokens: [Tensor; 3],
}

impl MultimodalExample {
    pub fn tokens(&self, m: Modality) -> &Tensor {
        &self.tokens[m.index()]
    }

    pub fn sample(&self, m: Modality) -> ModalitySample {
        ModalitySample {
            modality: m,
            tokens: self.tokens(m).clone(),
            source_example_id: self.id.clone(),
        }
    }

    /// Samples for the modalities in `mask` only.
    pub fn restricted(&self, mask: ModalityMask) -> Vec<ModalitySample> {
        mask.iter().map(|m| self.sample(m)).collect()
    }

    pub fn record(&self) -> ExampleRecord {
        ExampleRecord {
            id: self.id.clone(),
            clip_id: self.clip_id.clone(),
            label: self.label,
            split: self.split,
            files: ExampleFiles::for_id(&self.id),
        }
    }
}

/// A fully materialized dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub base_classes: Vec<usize>,
    pub novel_classes: Vec<usize>,
    pub examples: Vec<MultimodalExample>,
}

impl Dataset {
    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            schema_version: SCHEMA_VERSION,
            base_classes: self.base_classes.clone(),
            novel_classes: self.novel_classes.clone(),
            examples: self
                .examples
                .iter()
                .map(MultimodalExample::record)
                .collect(),
        }
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.examples.len())
            .filter(|&i| self.examples[i].split == split)
            .collect()
    }

    /// Example indices of `split`, grouped by label.
    pub fn by_class(&self, split: Split) -> BTreeMap<usize, Vec<usize>> {
        let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for i in self.indices(split) {
            if let Some(l) = self.examples[i].label {
                out.entry(l).or_default().push(i);
            }
        }
        out
    }

    /// Position of a base label in the base class table (the classifier output index).
    pub fn base_class_index(&self, label: usize) -> Option<usize> {
        self.base_classes.iter().position(|&c| c == label)
    }

    /// Token shape `(tokens, width)` of modality `m`, taken from the first example.
    pub fn token_shape(&self, m: Modality) -> Result<(usize, usize)> {
        self.examples
            .first()
            .ok_or_else(|| Error::Data("dataset has no examples".into()))?
            .tokens(m)
            .shape2()
    }

    /// Writes every tensor, then the manifest.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let manifest = self.manifest();
        manifest.check()?;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (ex, rec) in self.examples.iter().zip(&manifest.examples) {
            let sub = dir.join(&ex.id);
            fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
            for m in Modality::ALL {
                write_tensor(&dir.join(rec.files.get(m)), ex.tokens(m))?;
            }
        }
        manifest.write_atomic(dir)
    }
}

/// Dataset on disk; tensors are read on demand.
#[derive(Debug, Clone)]
pub struct DatasetHandle {
    root: PathBuf,
    manifest: DatasetManifest,
}

impl DatasetHandle {
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.manifest.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.examples.is_empty()
    }

    pub fn load_example(&self, i: usize) -> Result<MultimodalExample> {
        let r = self
            .manifest
            .examples
            .get(i)
            .ok_or_else(|| Error::Invalid(format!("example index {i} out of range")))?;
        let read = |m: Modality| read_tensor(&self.root.join(r.files.get(m)));
        Ok(MultimodalExample {
            id: r.id.clone(),
            clip_id: r.clip_id.clone(),
            label: r.label,
            split: r.split,
            tokens: [
                read(Modality::Video)?,
                read(Modality::Audio)?,
                read(Modality::Imu)?,
            ],
        })
    }

    /// Examples in manifest order.
    pub fn iter(&self) -> impl Iterator<Item = Result<MultimodalExample>> + '_ {
        (0..self.len()).map(|i| self.load_example(i))
    }

    pub fn materialize(&self) -> Result<Dataset> {
        Ok(Dataset {
            base_classes: self.manifest.base_classes.clone(),
            novel_classes: self.manifest.novel_classes.clone(),
            examples: self.iter().collect::<Result<_>>()?,
        })
    }
}

/// Parses and checks the manifest and confirms every referenced file exists.
pub fn load_dataset(path: &Path) -> Result<DatasetHandle> {
    let manifest = DatasetManifest::read(path)?;
    manifest.check()?;
    for r in &manifest.examples {
        for m in Modality::ALL {
            let f = path.join(r.files.get(m));
            if !f.is_file() {
                return Err(Error::Data(format!("missing tensor file {}", f.display())));
            }
        }
    }
    Ok(DatasetHandle {
        root: path.to_path_buf(),
        manifest,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Violation {
    ClassOverlap { class: usize },
    ClipOverlap { clip_id: String },
    ExampleOverlap { id: String },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitReport {
    pub violations: Vec<Violation>,
}

impl SplitReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks class-table disjointness, base/novel clip disjointness and
/// base-train/base-test example disjointness; lists every violation.
pub fn validate_splits(manifest: &DatasetManifest) -> SplitReport {
    let mut violations = Vec::new();
    let base: BTreeSet<_> = manifest.base_classes.iter().copied().collect();
    let novel: BTreeSet<_> = manifest.novel_classes.iter().copied().collect();
    for &class in base.intersection(&novel) {
        violations.push(Violation::ClassOverlap { class });
    }
    let clips_in = |pred: fn(Split) -> bool| -> BTreeSet<&str> {
        manifest
            .examples
            .iter()
            .filter(|r| pred(r.split))
            .map(|r| r.clip_id.as_str())
            .collect()
    };
    let base_clips = clips_in(Split::is_base);
    let novel_clips = clips_in(|s| s == Split::Novel);
    for clip in base_clips.intersection(&novel_clips) {
        violations.push(Violation::ClipOverlap {
            clip_id: clip.to_string(),
        });
    }
    let ids_in = |split: Split| -> BTreeSet<&str> {
        manifest
            .examples
            .iter()
            .filter(|r| r.split == split)
            .map(|r| r.id.as_str())
            .collect()
    };
    for id in ids_in(Split::BaseTrain).intersection(&ids_in(Split::BaseTest)) {
        violations.push(Violation::ExampleOverlap { id: id.to_string() });
    }
    SplitReport { violations }
}
