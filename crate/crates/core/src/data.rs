//! Datasets: the synthetic glyph task with ground-truth patches,
//! folder-per-class ingestion, PNG I/O and label-preserving augmentation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::ImageTensor;
use crate::error::{Error, Result};

/// One labelled image held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub image: ImageTensor,
    pub label: usize,
    /// Grid cells covered by the class glyph, when known.
    pub gt_patches: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn images(&self) -> Vec<&ImageTensor> {
        self.samples.iter().map(|s| &s.image).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }
}

/// Parameters of the synthetic glyph task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    pub patch_side: usize,
    /// Glyph side in grid cells.
    pub glyph_cells: usize,
    /// Amplitude of the uniform background noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            train_per_class: 200,
            test_per_class: 50,
            image_size: 64,
            patch_side: 8,
            glyph_cells: 2,
            noise: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.patch_side == 0 || self.image_size % self.patch_side != 0 {
            return Err(Error::Config("image_size must be a multiple of patch_side".into()));
        }
        if self.glyph_cells == 0 || self.glyph_cells > self.image_size / self.patch_side {
            return Err(Error::Config("glyph does not fit inside the image".into()));
        }
        if self.num_classes == 0 || self.num_classes > SHAPES.len() * COLORS.len() {
            return Err(Error::Config(format!(
                "synthetic task supports 1..={} classes",
                SHAPES.len() * COLORS.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Square,
    Plus,
    Cross,
    Ring,
    Disc,
    Triangle,
    Bars,
    Checker,
}

const SHAPES: [Shape; 8] = [
    Shape::Square,
    Shape::Plus,
    Shape::Cross,
    Shape::Ring,
    Shape::Disc,
    Shape::Triangle,
    Shape::Bars,
    Shape::Checker,
];

const COLORS: [[f64; 3]; 8] = [
    [0.9, 0.1, 0.1],
    [0.1, 0.8, 0.1],
    [0.15, 0.25, 0.95],
    [0.95, 0.9, 0.1],
    [0.85, 0.1, 0.85],
    [0.1, 0.85, 0.85],
    [1.0, 0.55, 0.0],
    [0.98, 0.98, 0.98],
];

fn glyph_for(class: usize) -> (Shape, [f64; 3]) {
    let shape = SHAPES[class % SHAPES.len()];
    // walk colours at a different stride so shape and colour both vary
    let color = COLORS[(class + class / SHAPES.len()) % COLORS.len()];
    (shape, color)
}

/// Whether glyph-local pixel `(y, x)` of an `s×s` glyph is ink.
fn ink(shape: Shape, y: usize, x: usize, s: usize) -> bool {
    let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
    let c = s as f64 / 2.0;
    let t = (s / 8).max(1);
    match shape {
        Shape::Square => y >= t && y < s - t && x >= t && x < s - t,
        Shape::Plus => (y as isize - (s / 2) as isize).unsigned_abs() < t + 1 || (x as isize - (s / 2) as isize).unsigned_abs() < t + 1,
        Shape::Cross => y.abs_diff(x) <= t || (y + x + 1).abs_diff(s) <= t,
        Shape::Ring => {
            let r = ((fy - c).powi(2) + (fx - c).powi(2)).sqrt();
            r <= c && r >= c - 2.0 * t as f64
        }
        Shape::Disc => ((fy - c).powi(2) + (fx - c).powi(2)).sqrt() <= c * 0.85,
        Shape::Triangle => {
            // apex at top centre, base along the bottom
            let half = fy / s as f64 * c;
            (fx - c).abs() <= half
        }
        Shape::Bars => (y / (2 * t)) % 2 == 0,
        Shape::Checker => ((y / (2 * t)) + (x / (2 * t))) % 2 == 0,
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Render one synthetic sample: class glyph on a noisy background at a
/// random patch-aligned cell. Pixels are quantized to 8 bits so the image
/// survives a PNG round trip unchanged.
fn render(spec: &SyntheticSpec, class: usize, rng: &mut ChaCha8Rng) -> (ImageTensor, Vec<usize>) {
    let size = spec.image_size;
    let grid = size / spec.patch_side;
    let glyph_px = spec.glyph_cells * spec.patch_side;
    let base: f64 = rng.random_range(0.3..0.5);
    let mut img = ImageTensor::filled(size, size, 3, 0.0);
    for v in img.data_mut() {
        *v = quantize(base + spec.noise * rng.random_range(-1.0..1.0));
    }
    let cell_r = rng.random_range(0..=grid - spec.glyph_cells);
    let cell_c = rng.random_range(0..=grid - spec.glyph_cells);
    let (shape, color) = glyph_for(class);
    let (y0, x0) = (cell_r * spec.patch_side, cell_c * spec.patch_side);
    let mut covered = std::collections::BTreeSet::new();
    for y in 0..glyph_px {
        for x in 0..glyph_px {
            if ink(shape, y, x, glyph_px) {
                for (ch, &cv) in color.iter().enumerate() {
                    let jitter = 0.05 * rng.random_range(-1.0..1.0);
                    img.set(y0 + y, x0 + x, ch, quantize(cv + jitter));
                }
                covered.insert(((y0 + y) / spec.patch_side) * grid + (x0 + x) / spec.patch_side);
            }
        }
    }
    (img, covered.into_iter().collect())
}

/// Generate the train and test splits in memory. Each sample draws from its
/// own seed derived from the spec seed, split and index.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let names: Vec<String> = (0..spec.num_classes).map(|l| format!("class_{l:03}")).collect();
    let split = |tag: u64, per_class: usize| {
        let mut samples = Vec::with_capacity(per_class * spec.num_classes);
        for class in 0..spec.num_classes {
            for i in 0..per_class {
                let id = class * per_class + i;
                let seed = spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (tag << 48) ^ id as u64;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (image, gt_patches) = render(spec, class, &mut rng);
                samples.push(Sample { id, image, label: class, gt_patches });
            }
        }
        Dataset { samples, num_classes: spec.num_classes, class_names: names.clone() }
    };
    Ok((split(1, spec.train_per_class), split(2, spec.test_per_class)))
}

// ---------------------------------------------------------------------------
// On-disk layout

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    /// Path relative to the manifest root.
    pub path: PathBuf,
    pub label: usize,
    #[serde(default)]
    pub augmented: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub class_names: Vec<String>,
    pub splits: BTreeMap<String, Vec<ManifestItem>>,
}

/// Ground-truth sidecar entry for one synthetic image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthItem {
    pub path: PathBuf,
    pub split: String,
    pub label: usize,
    pub patches: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub patch_side: usize,
    pub items: Vec<GroundTruthItem>,
}

pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";
pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Scan `root/<split>/<class>/*.png`. Class folders and files are sorted
    /// by name, so the result does not depend on directory listing order.
    pub fn from_folder_tree(root: &Path, splits: &[&str]) -> Result<Self> {
        let mut class_names: Option<Vec<String>> = None;
        let mut out = BTreeMap::new();
        for &split in splits {
            let dir = root.join(split);
            let mut classes: Vec<String> = fs::read_dir(&dir)
                .map_err(|e| Error::io(&dir, e))?
                .filter_map(|e| e.ok())
                .filter(|e| e.path().is_dir())
                .map(|e| e.file_name().to_string_lossy().into_owned())
                .collect();
            classes.sort();
            match &class_names {
                None => class_names = Some(classes.clone()),
                Some(known) if *known != classes => {
                    return Err(Error::Config(format!("split {split} has a different class list")));
                }
                Some(_) => {}
            }
            let mut items = Vec::new();
            for (label, class) in classes.iter().enumerate() {
                let cdir = dir.join(class);
                let mut files: Vec<PathBuf> = fs::read_dir(&cdir)
                    .map_err(|e| Error::io(&cdir, e))?
                    .filter_map(|e| e.ok())
                    .map(|e| e.path())
                    .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
                    .collect();
                files.sort();
                for f in files {
                    let rel = f.strip_prefix(root).unwrap_or(&f).to_path_buf();
                    items.push(ManifestItem { path: rel, label, augmented: false });
                }
            }
            out.insert(split.to_string(), items);
        }
        Ok(Self { root: root.to_path_buf(), class_names: class_names.unwrap_or_default(), splits: out })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)?;
        if m.root.is_relative() {
            if let Some(parent) = path.parent() {
                m.root = parent.join(&m.root);
            }
        }
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.class_names.len();
        for (split, items) in &self.splits {
            let mut seen = std::collections::BTreeSet::new();
            for it in items {
                if it.label >= c {
                    return Err(Error::Config(format!("{split}: label {} outside [0, {c})", it.label)));
                }
                if !seen.insert(&it.path) {
                    return Err(Error::Config(format!("{split}: {} listed twice", it.path.display())));
                }
            }
        }
        Ok(())
    }

    /// Load one split into memory. Ground truth is attached when a sidecar
    /// file sits next to the manifest root.
    pub fn load_split(&self, split: &str) -> Result<Dataset> {
        let items = self
            .splits
            .get(split)
            .ok_or_else(|| Error::Config(format!("manifest has no split {split}")))?;
        let gt: BTreeMap<PathBuf, Vec<usize>> = match fs::read_to_string(self.root.join(GROUND_TRUTH_FILE)) {
            Ok(text) => {
                let gt: GroundTruth = serde_json::from_str(&text)?;
                gt.items.into_iter().map(|i| (i.path, i.patches)).collect()
            }
            Err(_) => BTreeMap::new(),
        };
        let mut samples = Vec::with_capacity(items.len());
        for (id, it) in items.iter().enumerate() {
            let image = read_png(&self.root.join(&it.path))?;
            let gt_patches = gt.get(&it.path).cloned().unwrap_or_default();
            samples.push(Sample { id, image, label: it.label, gt_patches });
        }
        Ok(Dataset { samples, num_classes: self.num_classes(), class_names: self.class_names.clone() })
    }
}

/// Write the synthetic task to `root` as PNG files in a folder-per-class
/// tree, plus `manifest.json` and the ground-truth sidecar.
pub fn write_synthetic(spec: &SyntheticSpec, root: &Path) -> Result<DatasetManifest> {
    let (train, test) = generate_synthetic(spec)?;
    let mut splits = BTreeMap::new();
    let mut gt_items = Vec::new();
    for (name, data) in [("train", &train), ("test", &test)] {
        let mut items = Vec::with_capacity(data.len());
        for s in &data.samples {
            let rel = PathBuf::from(name)
                .join(&data.class_names[s.label])
                .join(format!("img_{:05}.png", s.id));
            let full = root.join(&rel);
            if let Some(dir) = full.parent() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            write_png(&s.image, &full)?;
            gt_items.push(GroundTruthItem { path: rel.clone(), split: name.into(), label: s.label, patches: s.gt_patches.clone() });
            items.push(ManifestItem { path: rel, label: s.label, augmented: false });
        }
        splits.insert(name.to_string(), items);
    }
    let manifest = DatasetManifest { root: PathBuf::from("."), class_names: train.class_names.clone(), splits };
    let gt = GroundTruth { patch_side: spec.patch_side, items: gt_items };
    let write = |name: &str, text: String| {
        let p = root.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write(GROUND_TRUTH_FILE, serde_json::to_string_pretty(&gt)?)?;
    write(MANIFEST_FILE, serde_json::to_string_pretty(&manifest)?)?;
    Ok(DatasetManifest { root: root.to_path_buf(), ..manifest })
}

pub fn read_png(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|e| Error::Image { path: path.to_path_buf(), source: e })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
    ImageTensor::new(h as usize, w as usize, 3, data)
}

pub fn write_png(image: &ImageTensor, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = if image.channels() == 3 {
        image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    } else {
        // replicate the first channel
        (0..image.height() * image.width())
            .flat_map(|i| {
                let v = (image.data()[i * image.channels()].clamp(0.0, 1.0) * 255.0).round() as u8;
                [v, v, v]
            })
            .collect()
    };
    let buf = image::RgbImage::from_raw(image.width() as u32, image.height() as u32, bytes)
        .ok_or_else(|| Error::Dimension("pixel buffer does not match image size".into()))?;
    buf.save(path).map_err(|e| Error::Image { path: path.to_path_buf(), source: e })
}

// ---------------------------------------------------------------------------
// Augmentation

/// Label-preserving geometric transforms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AugmentOp {
    /// Left-right mirror (always applied when listed).
    Flip,
    /// Rotation by a uniform angle in `±max_degrees`.
    Rotate { max_degrees: f64 },
    /// Perspective skew moving one edge by up to `max_fraction` of the side.
    Skew { max_fraction: f64 },
    /// Horizontal shear by a uniform angle in `±max_degrees`.
    Shear { max_degrees: f64 },
}

impl AugmentOp {
    pub fn parse_list(text: &str) -> Result<Vec<AugmentOp>> {
        text.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty() && *s != "none")
            .map(|s| match s {
                "flip" => Ok(AugmentOp::Flip),
                "rotate" => Ok(AugmentOp::Rotate { max_degrees: 15.0 }),
                "skew" => Ok(AugmentOp::Skew { max_fraction: 0.1 }),
                "shear" => Ok(AugmentOp::Shear { max_degrees: 10.0 }),
                other => Err(Error::Config(format!("unknown augmentation {other}"))),
            })
            .collect()
    }

    pub fn name(&self) -> &'static str {
        match self {
            AugmentOp::Flip => "flip",
            AugmentOp::Rotate { .. } => "rotate",
            AugmentOp::Skew { .. } => "skew",
            AugmentOp::Shear { .. } => "shear",
        }
    }
}

fn bilinear(img: &ImageTensor, y: f64, x: f64, c: usize) -> f64 {
    let (h, w) = (img.height() as f64, img.width() as f64);
    let y = y.clamp(0.0, h - 1.0);
    let x = x.clamp(0.0, w - 1.0);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(img.height() - 1), (x0 + 1).min(img.width() - 1));
    let (dy, dx) = (y - y0 as f64, x - x0 as f64);
    let top = img.get(y0, x0, c) * (1.0 - dx) + img.get(y0, x1, c) * dx;
    let bottom = img.get(y1, x0, c) * (1.0 - dx) + img.get(y1, x1, c) * dx;
    top * (1.0 - dy) + bottom * dy
}

/// Resample `img` through an inverse map from output to input coordinates
/// (pixel centres, origin at the image centre). Borders clamp.
fn warp(img: &ImageTensor, inverse: impl Fn(f64, f64) -> (f64, f64)) -> ImageTensor {
    let (h, w) = (img.height(), img.width());
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = inverse(y as f64 - cy, x as f64 - cx);
            for c in 0..img.channels() {
                out.set(y, x, c, bilinear(img, sy + cy, sx + cx, c));
            }
        }
    }
    out
}

/// Apply `ops` in order. Random magnitudes come from `seed`, so the result
/// is a pure function of its inputs.
pub fn augment(image: &ImageTensor, ops: &[AugmentOp], seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = image.clone();
    for op in ops {
        img = match *op {
            AugmentOp::Flip => {
                let mut out = img.clone();
                let w = img.width();
                for y in 0..img.height() {
                    for x in 0..w {
                        for c in 0..img.channels() {
                            out.set(y, x, c, img.get(y, w - 1 - x, c));
                        }
                    }
                }
                out
            }
            AugmentOp::Rotate { max_degrees } => {
                let a = rng.random_range(-max_degrees..=max_degrees).to_radians();
                let (s, c) = a.sin_cos();
                warp(&img, |y, x| (c * y - s * x, s * y + c * x))
            }
            AugmentOp::Shear { max_degrees } => {
                let t = rng.random_range(-max_degrees..=max_degrees).to_radians().tan();
                warp(&img, |y, x| (y, x + t * y))
            }
            AugmentOp::Skew { max_fraction } => {
                // horizontal scale varies linearly from top to bottom
                let k = rng.random_range(-max_fraction..=max_fraction);
                let half = img.height() as f64 / 2.0;
                warp(&img, |y, x| (y, x / (1.0 + k * y / half)))
            }
        };
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec { train_per_class: 3, test_per_class: 2, ..Default::default() }
    }

    #[test]
    fn synthetic_is_deterministic_and_sized() {
        let (a, b) = generate_synthetic(&small_spec()).unwrap();
        let (a2, b2) = generate_synthetic(&small_spec()).unwrap();
        assert_eq!(a, a2);
        assert_eq!(b, b2);
        assert_eq!((a.len(), b.len()), (12, 8));
        let spec = SyntheticSpec { train_per_class: 200, test_per_class: 50, ..small_spec() };
        let (tr, te) = generate_synthetic(&spec).unwrap();
        assert_eq!((tr.len(), te.len()), (800, 200));
    }

    #[test]
    fn ground_truth_is_patch_aligned_block() {
        let spec = small_spec();
        let (train, _) = generate_synthetic(&spec).unwrap();
        let grid = spec.image_size / spec.patch_side;
        for s in &train.samples {
            assert!(!s.gt_patches.is_empty() && s.gt_patches.len() <= 4);
            let rows: Vec<usize> = s.gt_patches.iter().map(|p| p / grid).collect();
            let cols: Vec<usize> = s.gt_patches.iter().map(|p| p % grid).collect();
            assert!(rows.iter().max().unwrap() - rows.iter().min().unwrap() < spec.glyph_cells);
            assert!(cols.iter().max().unwrap() - cols.iter().min().unwrap() < spec.glyph_cells);
        }
    }

    #[test]
    fn glyphs_differ_between_classes() {
        let mut seen = std::collections::BTreeSet::new();
        for c in 0..16 {
            let (shape, color) = glyph_for(c);
            let key = format!("{shape:?}{color:?}");
            assert!(seen.insert(key), "class {c} reuses a glyph");
        }
    }

    #[test]
    fn empty_augmentation_is_identity() {
        let (train, _) = generate_synthetic(&small_spec()).unwrap();
        let img = &train.samples[0].image;
        assert_eq!(&augment(img, &[], 5), img);
        assert_eq!(&augment(img, &[AugmentOp::Flip, AugmentOp::Flip], 5), img);
        assert_ne!(&augment(img, &[AugmentOp::Flip], 5), img);
    }

    #[test]
    fn augmentation_is_seeded() {
        let (train, _) = generate_synthetic(&small_spec()).unwrap();
        let img = &train.samples[1].image;
        let ops = AugmentOp::parse_list("flip,rotate,skew,shear").unwrap();
        assert_eq!(augment(img, &ops, 9), augment(img, &ops, 9));
        assert_ne!(augment(img, &ops, 9), augment(img, &ops, 10));
    }

    #[test]
    fn png_round_trip_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec { num_classes: 2, train_per_class: 2, test_per_class: 1, ..Default::default() };
        let m = write_synthetic(&spec, dir.path()).unwrap();
        assert_eq!(m.splits["train"].len(), 4);
        let loaded = DatasetManifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
        let train = loaded.load_split("train").unwrap();
        let (mem, _) = generate_synthetic(&spec).unwrap();
        for (a, b) in train.samples.iter().zip(&mem.samples) {
            assert_eq!(a.image, b.image);
            assert_eq!(a.gt_patches, b.gt_patches);
            assert_eq!(a.label, b.label);
        }
        let scanned = DatasetManifest::from_folder_tree(dir.path(), &["train", "test"]).unwrap();
        assert_eq!(scanned.splits["train"], loaded.splits["train"]);
        assert_eq!(scanned.class_names, loaded.class_names);
    }

    #[test]
    fn duplicate_manifest_entries_are_rejected() {
        let item = ManifestItem { path: "a.png".into(), label: 0, augmented: false };
        let m = DatasetManifest {
            root: ".".into(),
            class_names: vec!["x".into()],
            splits: BTreeMap::from([("train".to_string(), vec![item.clone(), item])]),
        };
        assert!(m.validate().is_err());
    }
}
