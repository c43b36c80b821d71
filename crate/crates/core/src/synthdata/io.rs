//! On-disk corpus layout:
//!
//! ```text
//! <dir>/manifest.json        categories + per-image records
//! <dir>/heldout_boxes.json   target-train boxes, read only by evaluation
//! <dir>/images/<id>.png      8-bit RGB, losslessly compressed
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::BufWriter;
use std::path::Path;
#[cfg(test)]
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AnnotatedImage, Category, CategorySplit, Corpus, HeldOutBoxes, Image, LabeledBox, WeakImage};
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

pub const SCHEMA_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const HELD_OUT: &str = "heldout_boxes.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub categories: Vec<Category>,
    pub images: Vec<ManifestImage>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestImage {
    pub image_id: String,
    pub file: String,
    pub width: usize,
    pub height: usize,
    pub split: String,
    pub image_labels: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boxes: Option<Vec<ManifestBox>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub category: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mining_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
}

impl ManifestBox {
    pub fn from_labeled(b: &LabeledBox) -> Self {
        ManifestBox {
            x_min: b.bbox.x_min,
            y_min: b.bbox.y_min,
            x_max: b.bbox.x_max,
            y_max: b.bbox.y_max,
            category: b.category,
            pseudo: None,
            mining_score: None,
            weight: None,
        }
    }

    pub fn bbox(&self) -> BoundingBox {
        BoundingBox { x_min: self.x_min, y_min: self.y_min, x_max: self.x_max, y_max: self.y_max }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct HeldOutFile {
    schema_version: u32,
    images: Vec<HeldOutRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct HeldOutRecord {
    image_id: String,
    boxes: Vec<ManifestBox>,
}

pub(crate) const SPLIT_SOURCE: &str = "source";
pub(crate) const SPLIT_SOURCE_VAL: &str = "source_val";
pub(crate) const SPLIT_TARGET_TRAIN: &str = "target_train";
pub(crate) const SPLIT_TARGET_TEST: &str = "target_test";

fn manifest_of(corpus: &Corpus) -> Manifest {
    let mut images = Vec::new();
    let annotated = |a: &AnnotatedImage, split: &str| ManifestImage {
        image_id: a.image_id.clone(),
        file: format!("images/{}.png", a.image_id),
        width: a.image.width,
        height: a.image.height,
        split: split.to_string(),
        image_labels: a.image_labels.iter().copied().collect(),
        boxes: Some(a.boxes.iter().map(ManifestBox::from_labeled).collect()),
    };
    images.extend(corpus.source.iter().map(|a| annotated(a, SPLIT_SOURCE)));
    images.extend(corpus.source_val.iter().map(|a| annotated(a, SPLIT_SOURCE_VAL)));
    images.extend(corpus.target_train.iter().map(|w| ManifestImage {
        image_id: w.image_id.clone(),
        file: format!("images/{}.png", w.image_id),
        width: w.image.width,
        height: w.image.height,
        split: SPLIT_TARGET_TRAIN.to_string(),
        image_labels: w.image_labels.iter().copied().collect(),
        boxes: None,
    }));
    images.extend(corpus.target_test.iter().map(|a| annotated(a, SPLIT_TARGET_TEST)));
    Manifest { schema_version: SCHEMA_VERSION, categories: corpus.categories.clone(), images }
}

fn held_out_file(held: &HeldOutBoxes) -> HeldOutFile {
    HeldOutFile {
        schema_version: SCHEMA_VERSION,
        images: held
            .images
            .iter()
            .map(|(id, boxes)| HeldOutRecord { image_id: id.clone(), boxes: boxes.iter().map(ManifestBox::from_labeled).collect() })
            .collect(),
    }
}

fn images_in_order(corpus: &Corpus) -> impl Iterator<Item = (&str, &Image)> {
    corpus
        .source
        .iter()
        .chain(&corpus.source_val)
        .map(|a| (a.image_id.as_str(), &a.image))
        .chain(corpus.target_train.iter().map(|w| (w.image_id.as_str(), &w.image)))
        .chain(corpus.target_test.iter().map(|a| (a.image_id.as_str(), &a.image)))
}

/// SHA-256 over the canonical manifest, raw pixel bytes and held-out boxes.
/// Independent of PNG encoder settings.
pub fn corpus_hash(corpus: &Corpus, held: &HeldOutBoxes) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&manifest_of(corpus)).expect("manifest serializes"));
    for (id, img) in images_in_order(corpus) {
        h.update(id.as_bytes());
        h.update(&img.rgb);
    }
    h.update(serde_json::to_vec(&held_out_file(held)).expect("held-out serializes"));
    hex(&h.finalize())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_corpus(corpus: &Corpus, held: &HeldOutBoxes, dir: &Path) -> Result<()> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    for (id, img) in images_in_order(corpus) {
        write_png(&img_dir.join(format!("{id}.png")), img)?;
    }
    write_json(&dir.join(MANIFEST), &manifest_of(corpus))?;
    write_json(&dir.join(HELD_OUT), &held_out_file(held))?;
    Ok(())
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializable value");
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_png(path: &Path, img: &Image) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let to_err = |e: png::EncodingError| Error::Image { image_id: path.display().to_string(), msg: e.to_string() };
    let mut writer = enc.write_header().map_err(to_err)?;
    writer.write_image_data(&img.rgb).map_err(to_err)?;
    writer.finish().map_err(to_err)
}

fn read_png(path: &Path, image_id: &str) -> Result<Image> {
    let err = |msg: String| Error::Image { image_id: image_id.to_string(), msg };
    let file = fs::File::open(path).map_err(|e| err(format!("cannot open {}: {e}", path.display())))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| err(format!("bad png header: {e}")))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| err(format!("truncated or corrupt png: {e}")))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(err(format!("expected 8-bit RGB, got {:?}/{:?}", info.color_type, info.bit_depth)));
    }
    buf.truncate(info.buffer_size());
    Ok(Image { width: info.width as usize, height: info.height as usize, rgb: buf })
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let de = &mut serde_json::Deserializer::from_slice(&bytes);
    serde_path_to_error::deserialize(de).map_err(|e| Error::Manifest {
        file: path.to_path_buf(),
        field: e.path().to_string(),
        msg: e.inner().to_string(),
    })
}

/// Loads and validates a corpus directory written by [`save_corpus`].
pub fn load_corpus(dir: &Path) -> Result<(Corpus, HeldOutBoxes)> {
    let manifest_path = dir.join(MANIFEST);
    let manifest: Manifest = read_json(&manifest_path)?;
    let merr = |field: String, msg: String| Error::Manifest { file: manifest_path.clone(), field, msg };
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(merr(
            "schema_version".into(),
            format!("expected {SCHEMA_VERSION}, found {}", manifest.schema_version),
        ));
    }
    let splits = category_splits(&manifest.categories).map_err(|(f, m)| merr(f, m))?;

    let mut corpus = Corpus {
        categories: manifest.categories.clone(),
        source: Vec::new(),
        source_val: Vec::new(),
        target_train: Vec::new(),
        target_test: Vec::new(),
    };
    for (i, rec) in manifest.images.iter().enumerate() {
        let field = |f: &str| format!("images[{i}].{f}");
        let image = read_png(&dir.join(&rec.file), &rec.image_id)?;
        if image.width != rec.width || image.height != rec.height {
            return Err(Error::Image {
                image_id: rec.image_id.clone(),
                msg: format!("png is {}x{}, manifest says {}x{}", image.width, image.height, rec.width, rec.height),
            });
        }
        let labels: BTreeSet<usize> = rec.image_labels.iter().copied().collect();
        for &l in &labels {
            if !splits.contains_key(&l) {
                return Err(Error::UnknownCategory { id: l, context: format!("{} image_labels", rec.image_id) });
            }
        }
        let expected_split = match rec.split.as_str() {
            SPLIT_SOURCE | SPLIT_SOURCE_VAL => CategorySplit::Base,
            SPLIT_TARGET_TRAIN | SPLIT_TARGET_TEST => CategorySplit::Novel,
            other => return Err(merr(field("split"), format!("unknown split `{other}`"))),
        };
        if let Some(&bad) = labels.iter().find(|l| splits[l] != expected_split) {
            return Err(merr(field("image_labels"), format!("category {bad} not allowed in split {}", rec.split)));
        }
        if rec.split == SPLIT_TARGET_TRAIN {
            if rec.boxes.is_some() {
                return Err(merr(field("boxes"), "target_train records must not carry boxes".into()));
            }
            corpus.target_train.push(WeakImage { image_id: rec.image_id.clone(), image, image_labels: labels });
            continue;
        }
        let raw = rec.boxes.as_ref().ok_or_else(|| merr(field("boxes"), "missing boxes".into()))?;
        let boxes = convert_boxes(raw, &splits, expected_split, &rec.image_id, (rec.width, rec.height))
            .map_err(|e| match e {
                Error::InvalidBox(m) => merr(field("boxes"), m),
                other => other,
            })?;
        let box_cats: BTreeSet<usize> = boxes.iter().map(|b| b.category).collect();
        if box_cats != labels {
            return Err(merr(field("image_labels"), "labels differ from box categories".into()));
        }
        let a = AnnotatedImage { image_id: rec.image_id.clone(), image, boxes, image_labels: labels };
        match rec.split.as_str() {
            SPLIT_SOURCE => corpus.source.push(a),
            SPLIT_SOURCE_VAL => corpus.source_val.push(a),
            _ => corpus.target_test.push(a),
        }
    }

    let held_path = dir.join(HELD_OUT);
    let held_file: HeldOutFile = read_json(&held_path)?;
    if held_file.schema_version != SCHEMA_VERSION {
        return Err(Error::Manifest {
            file: held_path,
            field: "schema_version".into(),
            msg: format!("expected {SCHEMA_VERSION}, found {}", held_file.schema_version),
        });
    }
    let size = corpus.image_size();
    let mut held = HeldOutBoxes::default();
    for rec in held_file.images {
        let boxes = convert_boxes(&rec.boxes, &splits, CategorySplit::Novel, &rec.image_id, size)?;
        held.images.push((rec.image_id, boxes));
    }
    Ok((corpus, held))
}

/// Category id -> split, rejecting duplicate ids or names.
pub(crate) fn category_splits(cats: &[Category]) -> std::result::Result<BTreeMap<usize, CategorySplit>, (String, String)> {
    let mut splits = BTreeMap::new();
    let mut names = BTreeSet::new();
    for (i, c) in cats.iter().enumerate() {
        if splits.insert(c.id, c.split).is_some() {
            return Err((format!("categories[{i}].id"), format!("duplicate category id {}", c.id)));
        }
        if !names.insert(c.name.clone()) {
            return Err((format!("categories[{i}].name"), format!("duplicate category name {}", c.name)));
        }
    }
    Ok(splits)
}

fn convert_boxes(
    raw: &[ManifestBox],
    splits: &BTreeMap<usize, CategorySplit>,
    expected: CategorySplit,
    image_id: &str,
    (w, h): (usize, usize),
) -> Result<Vec<LabeledBox>> {
    raw.iter()
        .map(|b| {
            let split = splits
                .get(&b.category)
                .ok_or_else(|| Error::UnknownCategory { id: b.category, context: format!("box in {image_id}") })?;
            if *split != expected {
                return Err(Error::InvalidBox(format!("{image_id}: category {} has the wrong split", b.category)));
            }
            let bbox = b.bbox();
            bbox.validate()?;
            if !bbox.is_inside(w as f64, h as f64) {
                return Err(Error::InvalidBox(format!("{image_id}: box {bbox:?} leaves the image")));
            }
            Ok(LabeledBox { bbox, category: b.category })
        })
        .collect()
}

#[cfg(test)]
fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST)
}
