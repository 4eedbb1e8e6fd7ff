//! Subjects, ordered pairs and the on-disk dataset manifest.
//!
//! The manifest is a flat key=value file; paths are relative to it:
//!
//! ```text
//! dims=16,16,16
//! subjects=s00,s01
//! image.s00=images/s00.frv
//! label.s00=labels/s00.frv
//! field.s00=fields/s00.frv
//! ```

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::kv::{parse_list, KeyValues};
use crate::volume::{load_field, load_labels, load_volume, save_field, save_volume, Dims, DisplacementField, Volume};

pub const MANIFEST_NAME: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct Subject {
    pub id: String,
    /// Normalized intensity volume.
    pub image: Volume,
    pub labels: Option<Volume>,
    /// Ground-truth displacement, when known.
    pub field: Option<DisplacementField>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub subjects: Vec<Subject>,
}

impl Dataset {
    /// Common dims of all images, labels and fields.
    pub fn dims(&self) -> Result<Dims> {
        let first = self
            .subjects
            .first()
            .ok_or_else(|| Error::invalid("empty dataset"))?
            .image
            .dims();
        for s in &self.subjects {
            let mut all = vec![s.image.dims()];
            all.extend(s.labels.as_ref().map(|l| l.dims()));
            all.extend(s.field.as_ref().map(|f| f.dims()));
            if let Some(d) = all.into_iter().find(|&d| d != first) {
                return Err(Error::DimsMismatch(format!("subject {} has {d}, expected {first}", s.id)));
            }
        }
        Ok(first)
    }

    pub fn ids(&self) -> Vec<&str> {
        self.subjects.iter().map(|s| s.id.as_str()).collect()
    }

    pub fn get(&self, id: &str) -> Option<&Subject> {
        self.subjects.iter().find(|s| s.id == id)
    }

    pub fn is_labeled(&self) -> bool {
        !self.subjects.is_empty() && self.subjects.iter().all(|s| s.labels.is_some())
    }

    /// Center-crops every volume and field to `target`.
    pub fn center_crop(&self, target: Dims) -> Result<Dataset> {
        let subjects = self
            .subjects
            .iter()
            .map(|s| {
                Ok(Subject {
                    id: s.id.clone(),
                    image: s.image.center_crop(target)?,
                    labels: s.labels.as_ref().map(|l| l.center_crop(target)).transpose()?,
                    field: s.field.as_ref().map(|f| f.center_crop(target)).transpose()?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Dataset { subjects })
    }
}

/// Every ordered `(source, target)` pair of distinct ids, sorted
/// lexicographically by source then target.
pub fn make_pairs<S: AsRef<str>>(ids: &[S]) -> Result<Vec<(String, String)>> {
    let mut sorted: Vec<&str> = ids.iter().map(|s| s.as_ref()).collect();
    sorted.sort_unstable();
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::invalid(format!("duplicate id {:?}", w[0])));
    }
    let mut pairs = Vec::with_capacity(sorted.len() * sorted.len().saturating_sub(1));
    for s in &sorted {
        for t in &sorted {
            if s != t {
                pairs.push((s.to_string(), t.to_string()));
            }
        }
    }
    Ok(pairs)
}

fn check_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(format!("subject id {id:?} must be alphanumeric, '_', '-' or '.'")))
    }
}

/// Writes volumes under `dir` and returns the manifest path.
pub fn save_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let dims = ds.dims()?;
    let mut kv = KeyValues::new();
    kv.insert("dims", format!("{},{},{}", dims.nx, dims.ny, dims.nz));
    kv.insert("subjects", ds.ids().join(","));
    for sub in ["images", "labels", "fields"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    for s in &ds.subjects {
        check_id(&s.id)?;
        let rel = format!("images/{}.frv", s.id);
        save_volume(&s.image, dir.join(&rel))?;
        kv.insert(format!("image.{}", s.id), rel);
        if let Some(l) = &s.labels {
            let rel = format!("labels/{}.frv", s.id);
            save_volume(l, dir.join(&rel))?;
            kv.insert(format!("label.{}", s.id), rel);
        }
        if let Some(f) = &s.field {
            let rel = format!("fields/{}.frv", s.id);
            save_field(f, dir.join(&rel))?;
            kv.insert(format!("field.{}", s.id), rel);
        }
    }
    let path = dir.join(MANIFEST_NAME);
    std::fs::write(&path, kv.to_text()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Loads a dataset from a manifest file or a directory containing one.
/// Images are normalized by their maximum on load.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let manifest = if path.is_dir() { path.join(MANIFEST_NAME) } else { path.to_path_buf() };
    let base = manifest.parent().unwrap_or(Path::new("."));
    let kv = KeyValues::load(&manifest)?;
    let ids: Vec<String> = match kv.get("subjects") {
        Some(list) => parse_list(list, "subjects")?,
        None => {
            return Err(Error::Parse {
                what: "dataset manifest",
                detail: "missing subjects key".into(),
            })
        }
    };
    let mut seen = HashSet::new();
    for id in &ids {
        check_id(id)?;
        if !seen.insert(id.as_str()) {
            return Err(Error::invalid(format!("duplicate subject {id}")));
        }
    }
    for k in kv.keys() {
        let known = k == "dims"
            || k == "subjects"
            || ["image.", "label.", "field."]
                .iter()
                .any(|p| k.strip_prefix(p).is_some_and(|id| seen.contains(id)));
        if !known {
            return Err(Error::Parse {
                what: "dataset manifest",
                detail: format!("unexpected key {k}"),
            });
        }
    }
    let mut subjects = Vec::with_capacity(ids.len());
    for id in ids {
        let image_rel = kv.get(&format!("image.{id}")).ok_or_else(|| Error::Parse {
            what: "dataset manifest",
            detail: format!("no image for subject {id}"),
        })?;
        let image = load_volume(base.join(image_rel))?.normalize_intensity()?;
        let labels = kv.get(&format!("label.{id}")).map(|p| load_labels(base.join(p))).transpose()?;
        let field = kv.get(&format!("field.{id}")).map(|p| load_field(base.join(p))).transpose()?;
        subjects.push(Subject { id, image, labels, field });
    }
    let ds = Dataset { subjects };
    let dims = ds.dims()?;
    if let Some(list) = kv.get("dims") {
        let declared: Vec<usize> = parse_list(list, "dims")?;
        if declared.len() != 3 || Dims::from_array([declared[0], declared[1], declared[2]]) != dims {
            return Err(Error::DimsMismatch(format!("manifest declares {list}, volumes are {dims}")));
        }
    }
    Ok(ds)
}
