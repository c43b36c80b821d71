//! Deterministic synthetic shapes corpus.
//!
//! The source split carries box annotations for base categories only and
//! never contains a novel-category object. The target training split carries
//! image-level novel labels only; its boxes are written to a separate
//! held-out file read exclusively by evaluation (CorLoc). The target test
//! split keeps novel-category boxes for evaluation.
//!
//! Categories are combinations of a shape and a colour. Every default novel
//! category reuses a shape and a colour seen among the base categories except
//! the last one, whose shape and colour appear nowhere in the base set.

mod io;
mod render;

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

pub use io::{corpus_hash, load_corpus, save_corpus, Manifest, ManifestBox, ManifestImage, SCHEMA_VERSION};
pub(crate) use io::write_json;
pub use render::{Color, Shape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CategorySplit {
    Base,
    Novel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: usize,
    pub name: String,
    pub split: CategorySplit,
}

/// Appearance recipe for one category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub shape: Shape,
    pub color: Color,
}

impl CategorySpec {
    pub fn name(&self) -> String {
        format!("{}-{}", self.color.name(), self.shape.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Interleaved 8-bit RGB, row-major.
    pub rgb: Vec<u8>,
}

impl Image {
    /// Channel-major `[3, H, W]` floats in `[0, 1]`.
    pub fn to_chw(&self) -> Vec<f64> {
        let hw = self.width * self.height;
        let mut out = vec![0.0; 3 * hw];
        for (i, px) in self.rgb.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * hw + i] = px[c] as f64 / 255.0;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub bbox: BoundingBox,
    pub category: usize,
}

/// Fully annotated image (source, source validation and target test splits).
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub image_id: String,
    pub image: Image,
    pub boxes: Vec<LabeledBox>,
    pub image_labels: BTreeSet<usize>,
}

/// Target training record. Has no box field on purpose.
#[derive(Debug, Clone, PartialEq)]
pub struct WeakImage {
    pub image_id: String,
    pub image: Image,
    pub image_labels: BTreeSet<usize>,
}

/// Boxes of the target training split, kept out of [`Corpus`] so training
/// code cannot read them.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HeldOutBoxes {
    pub images: Vec<(String, Vec<LabeledBox>)>,
}

impl HeldOutBoxes {
    pub fn get(&self, image_id: &str) -> Option<&[LabeledBox]> {
        self.images.iter().find(|(id, _)| id == image_id).map(|(_, b)| b.as_slice())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub categories: Vec<Category>,
    pub source: Vec<AnnotatedImage>,
    pub source_val: Vec<AnnotatedImage>,
    pub target_train: Vec<WeakImage>,
    pub target_test: Vec<AnnotatedImage>,
}

impl Corpus {
    pub fn base_ids(&self) -> Vec<usize> {
        self.categories.iter().filter(|c| c.split == CategorySplit::Base).map(|c| c.id).collect()
    }

    pub fn novel_ids(&self) -> Vec<usize> {
        self.categories.iter().filter(|c| c.split == CategorySplit::Novel).map(|c| c.id).collect()
    }

    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn image_size(&self) -> (usize, usize) {
        let img = self
            .source
            .first()
            .map(|a| &a.image)
            .or_else(|| self.target_train.first().map(|w| &w.image))
            .or_else(|| self.target_test.first().map(|a| &a.image));
        img.map(|i| (i.width, i.height)).unwrap_or((0, 0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub seed: u64,
    pub n_source: usize,
    pub n_source_val: usize,
    pub n_target: usize,
    pub n_test: usize,
    pub image_size: usize,
    pub base_categories: Vec<CategorySpec>,
    pub novel_categories: Vec<CategorySpec>,
    /// Inclusive range of category objects per image.
    pub objects_per_image: (usize, usize),
    /// Inclusive range of object side lengths in pixels.
    pub object_size: (usize, usize),
    /// Probability that an image also holds an uncategorised clutter object.
    pub distractor_rate: f64,
    /// Probability that a target image also holds an unlabeled base object.
    pub target_base_rate: f64,
    /// Probability that clutter in a target image takes the colour paired
    /// with one of the image's novel categories (co-occurrence bias).
    pub cooccurrence_bias: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        use Color::*;
        use Shape::*;
        let spec = |shape, color| CategorySpec { shape, color };
        CorpusConfig {
            seed: 222,
            n_source: 500,
            n_source_val: 50,
            n_target: 200,
            n_test: 200,
            image_size: 64,
            base_categories: vec![
                spec(Circle, Red),
                spec(Circle, Blue),
                spec(Square, Green),
                spec(Square, Yellow),
                spec(Triangle, Blue),
                spec(Triangle, Cyan),
                spec(Diamond, Red),
                spec(Diamond, Yellow),
                spec(Cross, Green),
                spec(Cross, Cyan),
            ],
            novel_categories: vec![
                spec(Circle, Green),
                spec(Square, Red),
                spec(Triangle, Yellow),
                spec(Cross, Blue),
                spec(Star, Orange),
            ],
            objects_per_image: (1, 2),
            object_size: (14, 24),
            distractor_rate: 0.5,
            target_base_rate: 0.3,
            cooccurrence_bias: 0.7,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::config("image_size", "must be at least 16"));
        }
        if self.base_categories.is_empty() {
            return Err(Error::config("base_categories", "must not be empty"));
        }
        if self.novel_categories.is_empty() {
            return Err(Error::config("novel_categories", "must not be empty"));
        }
        for n in &self.novel_categories {
            if self.base_categories.contains(n) {
                return Err(Error::config("novel_categories", format!("{} is also a base category", n.name())));
            }
        }
        let mut seen = BTreeSet::new();
        for c in self.base_categories.iter().chain(&self.novel_categories) {
            if !seen.insert(c.name()) {
                return Err(Error::config("categories", format!("duplicate category {}", c.name())));
            }
        }
        let (lo, hi) = self.objects_per_image;
        if lo == 0 || lo > hi {
            return Err(Error::config("objects_per_image", "need 1 <= min <= max"));
        }
        let (smin, smax) = self.object_size;
        if smin < 4 || smin > smax || smax >= self.image_size {
            return Err(Error::config("object_size", "need 4 <= min <= max < image_size"));
        }
        for (field, p) in [
            ("distractor_rate", self.distractor_rate),
            ("target_base_rate", self.target_base_rate),
            ("cooccurrence_bias", self.cooccurrence_bias),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(field, "must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn categories(&self) -> Vec<Category> {
        let base = self.base_categories.iter().map(|s| (s, CategorySplit::Base));
        let novel = self.novel_categories.iter().map(|s| (s, CategorySplit::Novel));
        base.chain(novel)
            .enumerate()
            .map(|(id, (s, split))| Category { id, name: s.name(), split })
            .collect()
    }

    fn spec_of(&self, id: usize) -> CategorySpec {
        if id < self.base_categories.len() {
            self.base_categories[id]
        } else {
            self.novel_categories[id - self.base_categories.len()]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SplitTag {
    Source,
    SourceVal,
    Target,
    Test,
}

impl SplitTag {
    fn prefix(self) -> &'static str {
        match self {
            SplitTag::Source => "src",
            SplitTag::SourceVal => "srcval",
            SplitTag::Target => "tgt",
            SplitTag::Test => "test",
        }
    }

    fn code(self) -> u64 {
        self as u64 + 1
    }
}

/// SplitMix64 finaliser; derives an independent per-image seed.
fn mix_seed(seed: u64, split: u64, index: u64) -> u64 {
    let mut z = seed ^ split.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Placed {
    bbox: BoundingBox,
    kind: PlacedKind,
}

enum PlacedKind {
    Category(usize),
    Clutter(Color),
}

/// Generated corpus plus the held-out boxes of the target training split.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<(Corpus, HeldOutBoxes)> {
    cfg.validate()?;
    let nb = cfg.base_categories.len();
    let base_ids: Vec<usize> = (0..nb).collect();
    let novel_ids: Vec<usize> = (nb..nb + cfg.novel_categories.len()).collect();

    let mut source = Vec::with_capacity(cfg.n_source);
    for i in 0..cfg.n_source {
        source.push(make_annotated(cfg, SplitTag::Source, i, &base_ids, &[])?);
    }
    let mut source_val = Vec::with_capacity(cfg.n_source_val);
    for i in 0..cfg.n_source_val {
        source_val.push(make_annotated(cfg, SplitTag::SourceVal, i, &base_ids, &[])?);
    }
    let mut target_train = Vec::with_capacity(cfg.n_target);
    let mut held_out = HeldOutBoxes::default();
    for i in 0..cfg.n_target {
        let a = make_annotated(cfg, SplitTag::Target, i, &novel_ids, &base_ids)?;
        held_out.images.push((a.image_id.clone(), a.boxes));
        target_train.push(WeakImage { image_id: a.image_id, image: a.image, image_labels: a.image_labels });
    }
    let mut target_test = Vec::with_capacity(cfg.n_test);
    for i in 0..cfg.n_test {
        target_test.push(make_annotated(cfg, SplitTag::Test, i, &novel_ids, &base_ids)?);
    }
    Ok((Corpus { categories: cfg.categories(), source, source_val, target_train, target_test }, held_out))
}

/// Renders one image. `labeled` are the categories whose objects carry
/// annotations; `extras` may appear unlabeled (base objects in target images).
fn make_annotated(
    cfg: &CorpusConfig,
    split: SplitTag,
    index: usize,
    labeled: &[usize],
    extras: &[usize],
) -> Result<AnnotatedImage> {
    let image_id = format!("{}_{:05}", split.prefix(), index);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, split.code(), index as u64));
    let size = cfg.image_size;
    let mut placed: Vec<Placed> = Vec::new();

    let (lo, hi) = cfg.objects_per_image;
    let n_objects = rng.gen_range(lo..=hi);
    for _ in 0..n_objects {
        let cat = labeled[rng.gen_range(0..labeled.len())];
        let bbox = place(cfg, &mut rng, &placed).ok_or_else(|| Error::Generation {
            image_id: image_id.clone(),
            msg: format!("no room for {n_objects} objects in a {size}x{size} image"),
        })?;
        placed.push(Placed { bbox, kind: PlacedKind::Category(cat) });
    }
    let n_labeled = placed.len();

    if !extras.is_empty() && rng.gen_bool(cfg.target_base_rate) {
        let cat = extras[rng.gen_range(0..extras.len())];
        if let Some(bbox) = place(cfg, &mut rng, &placed) {
            placed.push(Placed { bbox, kind: PlacedKind::Category(cat) });
        }
    }
    if rng.gen_bool(cfg.distractor_rate) {
        // In target images the clutter colour follows a present novel
        // category most of the time; elsewhere it is random.
        let color = if !extras.is_empty() && rng.gen_bool(cfg.cooccurrence_bias) {
            let PlacedKind::Category(c) = placed[rng.gen_range(0..n_labeled)].kind else { unreachable!() };
            cfg.spec_of(c).color
        } else {
            Color::ALL[rng.gen_range(0..Color::ALL.len())]
        };
        if let Some(bbox) = place(cfg, &mut rng, &placed) {
            placed.push(Placed { bbox, kind: PlacedKind::Clutter(color) });
        }
    }

    let mut canvas = render::Canvas::background(size, size, &mut rng);
    for p in &placed {
        match p.kind {
            PlacedKind::Category(c) => {
                let spec = cfg.spec_of(c);
                canvas.draw_shape(&p.bbox, spec.shape, spec.color, &mut rng);
            }
            PlacedKind::Clutter(color) => canvas.draw_clutter(&p.bbox, color, &mut rng),
        }
    }
    canvas.add_noise(&mut rng);

    let boxes: Vec<LabeledBox> = placed[..n_labeled]
        .iter()
        .map(|p| match p.kind {
            PlacedKind::Category(c) => LabeledBox { bbox: p.bbox, category: c },
            PlacedKind::Clutter(_) => unreachable!("labeled objects come first"),
        })
        .collect();
    let image_labels = boxes.iter().map(|b| b.category).collect();
    Ok(AnnotatedImage { image_id, image: canvas.into_image(), boxes, image_labels })
}

/// Picks an integer-aligned box that keeps a one-pixel gap to every placed box.
fn place(cfg: &CorpusConfig, rng: &mut ChaCha8Rng, placed: &[Placed]) -> Option<BoundingBox> {
    let size = cfg.image_size as i64;
    let (smin, smax) = cfg.object_size;
    for _ in 0..200 {
        let side = rng.gen_range(smin..=smax) as i64;
        let aspect: f64 = rng.gen_range(0.75..1.33);
        let w = ((side as f64 * aspect.sqrt()).round() as i64).clamp(smin as i64 / 2, size - 2);
        let h = ((side as f64 / aspect.sqrt()).round() as i64).clamp(smin as i64 / 2, size - 2);
        let x = rng.gen_range(1..=(size - 1 - w));
        let y = rng.gen_range(1..=(size - 1 - h));
        let b = BoundingBox { x_min: x as f64, y_min: y as f64, x_max: (x + w) as f64, y_max: (y + h) as f64 };
        let clear = placed.iter().all(|p| {
            b.x_max + 1.0 <= p.bbox.x_min
                || p.bbox.x_max + 1.0 <= b.x_min
                || b.y_max + 1.0 <= p.bbox.y_min
                || p.bbox.y_max + 1.0 <= b.y_min
        });
        if clear {
            return Some(b);
        }
    }
    None
}
