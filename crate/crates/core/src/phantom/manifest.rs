//! On-disk dataset layout: one JSON manifest plus `.vol`/`.xry` files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClassLabel, ClassMix, StyleShiftParams};
use crate::error::{Error, Result};
use crate::volume::{
    load_volume, load_xray, save_volume, save_xray, PairedDataset, PairedSample, UnpairedXraySet,
};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Paired,
    Unpaired,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub xray: String,
    /// Paired: the training CT. Unpaired: the sealed generating volume.
    pub volume: String,
    pub label: ClassLabel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub kind: DatasetKind,
    pub master_seed: u64,
    pub dims: [usize; 3],
    pub class_mix: ClassMix,
    pub shift: Option<StyleShiftParams>,
    pub files: Vec<ManifestEntry>,
}

fn write_manifest(dir: &Path, m: &DatasetManifest) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(m)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format("manifest", e.to_string()))
}

fn write_files<'a>(
    dir: &Path,
    items: impl Iterator<Item = (&'a crate::volume::XrayImage, &'a crate::volume::Volume, ClassLabel)>,
) -> Result<Vec<ManifestEntry>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for (i, (x, v, label)) in items.enumerate() {
        let entry = ManifestEntry {
            xray: format!("sample_{i:05}.xry"),
            volume: format!("sample_{i:05}.vol"),
            label,
        };
        save_xray(x, dir.join(&entry.xray))?;
        save_volume(v, dir.join(&entry.volume))?;
        files.push(entry);
    }
    Ok(files)
}

pub fn save_paired_dataset(ds: &PairedDataset, mix: &ClassMix, dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    let dims = ds.samples.first().map(|s| s.ct.dims()).unwrap_or([0; 3]);
    let files = write_files(dir, ds.samples.iter().map(|s| (&s.xray, &s.ct, s.label)))?;
    let m = DatasetManifest {
        kind: DatasetKind::Paired,
        master_seed: ds.master_seed,
        dims,
        class_mix: *mix,
        shift: None,
        files,
    };
    write_manifest(dir, &m)?;
    Ok(m)
}

pub fn save_unpaired_set(
    set: &UnpairedXraySet,
    mix: &ClassMix,
    shift: &StyleShiftParams,
    dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    let hidden = set.hidden_ct();
    let labels = set.hidden_labels();
    let dims = hidden.first().map(|v| v.dims()).unwrap_or([0; 3]);
    let files = write_files(
        dir,
        set.xrays().iter().zip(hidden).zip(labels).map(|((x, v), &l)| (x, v, l)),
    )?;
    let m = DatasetManifest {
        kind: DatasetKind::Unpaired,
        master_seed: set.master_seed(),
        dims,
        class_mix: *mix,
        shift: Some(*shift),
        files,
    };
    write_manifest(dir, &m)?;
    Ok(m)
}

fn expect_kind(m: &DatasetManifest, kind: DatasetKind) -> Result<()> {
    if m.kind != kind {
        return Err(Error::format(
            "kind",
            format!("expected a {kind:?} dataset, found {:?}", m.kind),
        ));
    }
    Ok(())
}

fn check_dims(m: &DatasetManifest, v: &crate::volume::Volume, name: &str) -> Result<()> {
    if v.dims() != m.dims {
        return Err(Error::format(
            "dims",
            format!("{name} has dims {:?}, manifest says {:?}", v.dims(), m.dims),
        ));
    }
    Ok(())
}

pub fn load_paired_dataset(dir: impl AsRef<Path>) -> Result<(PairedDataset, DatasetManifest)> {
    let dir = dir.as_ref();
    let m = read_manifest(dir)?;
    expect_kind(&m, DatasetKind::Paired)?;
    let mut samples = Vec::with_capacity(m.files.len());
    for e in &m.files {
        let ct = load_volume(dir.join(&e.volume))?;
        check_dims(&m, &ct, &e.volume)?;
        samples.push(PairedSample {
            xray: load_xray(dir.join(&e.xray))?,
            ct,
            label: e.label,
        });
    }
    let ds = PairedDataset {
        samples,
        master_seed: m.master_seed,
    };
    Ok((ds, m))
}

pub fn load_unpaired_set(dir: impl AsRef<Path>) -> Result<(UnpairedXraySet, DatasetManifest)> {
    let dir = dir.as_ref();
    let m = read_manifest(dir)?;
    expect_kind(&m, DatasetKind::Unpaired)?;
    let mut xrays = Vec::with_capacity(m.files.len());
    let mut hidden = Vec::with_capacity(m.files.len());
    let mut labels = Vec::with_capacity(m.files.len());
    for e in &m.files {
        xrays.push(load_xray(dir.join(&e.xray))?);
        let v = load_volume(dir.join(&e.volume))?;
        check_dims(&m, &v, &e.volume)?;
        hidden.push(v);
        labels.push(e.label);
    }
    let set = UnpairedXraySet::new(xrays, hidden, labels, m.master_seed)?;
    Ok((set, m))
}
