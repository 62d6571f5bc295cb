//! Image folders laid out as `root/{train,test}/<class>/<image>`.

use std::fs;
use std::path::{Path, PathBuf};

use super::{Dataset, LabeledImage, RgbImage};
use crate::error::{Error, Result};

pub const SPLITS: [&str; 2] = ["train", "test"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: usize,
    pub id: String,
}

/// Files found under a dataset root, not yet decoded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub class_names: Vec<String>,
    pub train: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
}

fn sorted_entries(dir: &Path, want_dirs: bool) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let hidden = path
            .file_name()
            .and_then(|n| n.to_str())
            .is_none_or(|n| n.starts_with('.'));
        if !hidden && path.is_dir() == want_dirs {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Scans a dataset root. Class names are the sorted subdirectory names of
/// `train`; `test` must have the same classes. Every class directory in
/// both splits must contain at least one file.
pub fn load_image_dir(root: &Path) -> Result<DatasetManifest> {
    let mut class_names: Option<Vec<String>> = None;
    let mut splits = Vec::new();
    for split in SPLITS {
        let dir = root.join(split);
        if !dir.is_dir() {
            return Err(Error::Data(format!(
                "missing {split} split: {} is not a directory",
                dir.display()
            )));
        }
        let classes: Vec<String> = sorted_entries(&dir, true)?.iter().map(|p| file_name(p)).collect();
        if classes.is_empty() {
            return Err(Error::Data(format!("{split} split has no class directories")));
        }
        match &class_names {
            None => class_names = Some(classes.clone()),
            Some(known) if *known != classes => {
                return Err(Error::Data(format!(
                    "{split} split classes {classes:?} differ from train classes {known:?}"
                )))
            }
            Some(_) => {}
        }
        let mut entries = Vec::new();
        for (label, class) in classes.iter().enumerate() {
            let files = sorted_entries(&dir.join(class), false)?;
            if files.is_empty() {
                return Err(Error::Data(format!("class {class} in {split} split has no images")));
            }
            entries.extend(files.into_iter().map(|path| ManifestEntry {
                id: format!("{split}/{class}/{}", file_name(&path)),
                path,
                label,
            }));
        }
        splits.push(entries);
    }
    let test = splits.pop().expect("two splits");
    let train = splits.pop().expect("two splits");
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        class_names: class_names.expect("train split scanned"),
        train,
        test,
    })
}

fn decode(entry: &ManifestEntry) -> Result<LabeledImage> {
    let img = image::open(&entry.path)
        .map_err(|e| Error::Data(format!("cannot decode {}: {e}", entry.path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect();
    Ok(LabeledImage {
        pixels: RgbImage::new(h as usize, w as usize, data)?,
        label: entry.label,
        id: entry.id.clone(),
    })
}

impl DatasetManifest {
    pub fn load_images(&self) -> Result<Dataset> {
        Ok(Dataset {
            class_names: self.class_names.clone(),
            train: self.train.iter().map(decode).collect::<Result<_>>()?,
            test: self.test.iter().map(decode).collect::<Result<_>>()?,
        })
    }
}

pub(crate) fn export(dataset: &Dataset, root: &Path) -> Result<()> {
    for (split, samples) in SPLITS.iter().zip([&dataset.train, &dataset.test]) {
        for class in &dataset.class_names {
            let dir = root.join(split).join(class);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        for s in samples {
            let class = dataset
                .class_names
                .get(s.label)
                .ok_or_else(|| Error::Data(format!("label {} of {} has no class name", s.label, s.id)))?;
            let name: String = s.id.chars().map(|c| if c == '/' { '_' } else { c }).collect();
            let path = root.join(split).join(class).join(format!("{name}.png"));
            let bytes = s.pixels.data().iter().map(|v| (v * 255.0).round() as u8).collect();
            let buf = image::RgbImage::from_raw(s.pixels.width() as u32, s.pixels.height() as u32, bytes)
                .expect("buffer sized from the image");
            buf.save(&path)
                .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))?;
        }
    }
    Ok(())
}
