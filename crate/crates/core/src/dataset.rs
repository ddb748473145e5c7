//! Labeled temporal image stacks on disk.
//!
//! Layout:
//!
//! ```text
//! <root>/<split>/<location_id>/t0.png .. t{M-1}.png
//! manifest.csv   (location_id,split,label)
//! ```
//!
//! `split` is `dev` or `test`; `label` is `positive`, `negative` or `unlabeled`.
//! Images may be PNG (`.png`) or JPEG (`.jpg`/`.jpeg`); chronology is the
//! filename index, oldest first.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_IMAGES_PER_LOCATION: usize = 6;

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];
const MANIFEST_HEADER: [&str; 3] = ["location_id", "split", "label"];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("location `{location}` is missing image {}", path.display())]
    MissingImage { location: String, path: PathBuf },
    #[error("location id `{0}` appears more than once in the manifest")]
    DuplicateId(String),
    #[error("manifest line {line}: unknown label token `{token}`")]
    UnknownLabelToken { line: u64, token: String },
    #[error("manifest line {line}: unknown split `{token}`")]
    UnknownSplit { line: u64, token: String },
    #[error("location `{location}`: image {index} is {found:?}, expected {expected:?}")]
    DimensionMismatch {
        location: String,
        index: usize,
        expected: (u32, u32),
        found: (u32, u32),
    },
    #[error("manifest header must be `location_id,split,label`, found `{0}`")]
    BadHeader(String),
    #[error("manifest line {line}: {reason}")]
    BadRow { line: u64, reason: String },
    #[error("dataset root {} does not exist", .0.display())]
    MissingRoot(PathBuf),
    #[error("cannot read image {}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Dev,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dev" | "valid" | "validation" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(other.to_string()),
        }
    }
}

/// Expert label. `GullyPositive` is the positive class throughout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    GullyPositive,
    GullyNegative,
}

impl Label {
    pub fn is_positive(self) -> bool {
        self == Label::GullyPositive
    }

    pub fn from_bool(positive: bool) -> Self {
        if positive {
            Label::GullyPositive
        } else {
            Label::GullyNegative
        }
    }
}

/// Parse a manifest label token. `Ok(None)` means unlabeled.
pub fn parse_label_token(token: &str) -> Option<Option<Label>> {
    match token.trim() {
        "positive" => Some(Some(Label::GullyPositive)),
        "negative" => Some(Some(Label::GullyNegative)),
        "unlabeled" => Some(None),
        _ => None,
    }
}

pub fn label_token(label: Option<Label>) -> &'static str {
    match label {
        Some(Label::GullyPositive) => "positive",
        Some(Label::GullyNegative) => "negative",
        None => "unlabeled",
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Location {
    pub id: String,
    pub split: Split,
    /// Chronological, oldest first.
    pub images: Vec<PathBuf>,
    pub label: Option<Label>,
    /// Shared (width, height) of every image.
    pub dimensions: (u32, u32),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub locations: Vec<Location>,
    pub manifest_path: PathBuf,
    pub images_per_location: usize,
}

impl Dataset {
    pub fn get(&self, id: &str) -> Option<&Location> {
        self.locations.iter().find(|l| l.id == id)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Location> {
        self.locations.iter().filter(move |l| l.split == split)
    }

    /// Label of every location, keyed by id.
    pub fn labels(&self) -> BTreeMap<String, Option<Label>> {
        self.locations.iter().map(|l| (l.id.clone(), l.label)).collect()
    }
}

/// One parsed manifest row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub location_id: String,
    pub split: Split,
    pub label: Option<Label>,
}

/// Parse the manifest only, without touching images.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>, DatasetError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let header = reader.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(DatasetError::BadHeader(header.iter().collect::<Vec<_>>().join(",")));
    }
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 3 {
            return Err(DatasetError::BadRow {
                line,
                reason: format!("expected 3 fields, found {}", record.len()),
            });
        }
        let id = record[0].to_string();
        if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
            return Err(DatasetError::BadRow {
                line,
                reason: format!("invalid location id `{id}`"),
            });
        }
        let split = record[1].parse::<Split>().map_err(|token| DatasetError::UnknownSplit { line, token })?;
        let label = parse_label_token(&record[2]).ok_or_else(|| DatasetError::UnknownLabelToken {
            line,
            token: record[2].to_string(),
        })?;
        if !seen.insert(id.clone()) {
            return Err(DatasetError::DuplicateId(id));
        }
        rows.push(ManifestRow {
            location_id: id,
            split,
            label,
        });
    }
    Ok(rows)
}

fn find_image(dir: &Path, t: usize) -> Option<PathBuf> {
    IMAGE_EXTENSIONS
        .iter()
        .map(|ext| dir.join(format!("t{t}.{ext}")))
        .find(|p| p.is_file())
}

/// Load and validate a dataset. Locations keep manifest order.
pub fn ingest(root: &Path, manifest: &Path, images_per_location: usize) -> Result<Dataset, DatasetError> {
    if !root.is_dir() {
        return Err(DatasetError::MissingRoot(root.to_path_buf()));
    }
    let rows = read_manifest(manifest)?;
    let mut locations = Vec::with_capacity(rows.len());
    for row in rows {
        let dir = root.join(row.split.dir_name()).join(&row.location_id);
        let mut images = Vec::with_capacity(images_per_location);
        let mut dimensions = None;
        for t in 0..images_per_location {
            let path = find_image(&dir, t).ok_or_else(|| DatasetError::MissingImage {
                location: row.location_id.clone(),
                path: dir.join(format!("t{t}.png")),
            })?;
            let found = image::image_dimensions(&path).map_err(|source| DatasetError::Image {
                path: path.clone(),
                source,
            })?;
            match dimensions {
                None => dimensions = Some(found),
                Some(expected) if expected != found => {
                    return Err(DatasetError::DimensionMismatch {
                        location: row.location_id.clone(),
                        index: t,
                        expected,
                        found,
                    })
                }
                Some(_) => {}
            }
            images.push(path);
        }
        locations.push(Location {
            id: row.location_id,
            split: row.split,
            images,
            label: row.label,
            dimensions: dimensions.unwrap_or((0, 0)),
        });
    }
    Ok(Dataset {
        locations,
        manifest_path: manifest.to_path_buf(),
        images_per_location,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub total: usize,
    pub positive: usize,
    pub negative: usize,
    pub unlabeled: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub dev: Counts,
    pub test: Counts,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> Counts {
        match split {
            Split::Dev => self.dev,
            Split::Test => self.test,
        }
    }
}

pub fn split_counts(dataset: &Dataset) -> SplitCounts {
    let mut out = SplitCounts::default();
    for loc in &dataset.locations {
        let c = match loc.split {
            Split::Dev => &mut out.dev,
            Split::Test => &mut out.test,
        };
        c.total += 1;
        match loc.label {
            Some(Label::GullyPositive) => c.positive += 1,
            Some(Label::GullyNegative) => c.negative += 1,
            None => c.unlabeled += 1,
        }
    }
    out
}

impl fmt::Display for SplitCounts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "split\ttotal\tpositive\tnegative\tunlabeled")?;
        for (name, c) in [("dev", self.dev), ("test", self.test)] {
            writeln!(f, "{name}\t{}\t{}\t{}\t{}", c.total, c.positive, c.negative, c.unlabeled)?;
        }
        Ok(())
    }
}

/// Seeded synthetic datasets in the on-disk layout, for tests and offline demos.
pub mod synthetic {
    use super::*;
    use image::{Rgb, RgbImage};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::io::Write;

    #[derive(Debug, Clone)]
    pub struct SyntheticLayout {
        pub dev_positive: usize,
        pub dev_negative: usize,
        pub test_positive: usize,
        pub test_negative: usize,
        pub images_per_location: usize,
        pub tile: u32,
        pub seed: u64,
    }

    impl Default for SyntheticLayout {
        fn default() -> Self {
            Self {
                dev_positive: 177,
                dev_negative: 133,
                test_positive: 177,
                test_negative: 134,
                images_per_location: DEFAULT_IMAGES_PER_LOCATION,
                tile: 16,
                seed: 17,
            }
        }
    }

    /// Noise texture; positive tiles also carry a darker diagonal channel.
    pub fn synth_image(rng: &mut ChaCha8Rng, tile: u32, positive: bool) -> RgbImage {
        let mut img = RgbImage::new(tile, tile);
        for (x, y, px) in img.enumerate_pixels_mut() {
            let base: u8 = rng.gen_range(90..170);
            let channel = positive && x.abs_diff(y) <= tile / 16;
            let v = if channel { base / 2 } else { base };
            *px = Rgb([v, v.saturating_add(20), v / 2 + 30]);
        }
        img
    }

    /// Write images and a manifest under `root`; returns the manifest path.
    /// Location ids are `dev-0000`, `test-0000`, ...; positives come first in each split.
    pub fn write(root: &Path, layout: &SyntheticLayout) -> Result<PathBuf, DatasetError> {
        let mut rng = ChaCha8Rng::seed_from_u64(layout.seed);
        std::fs::create_dir_all(root)?;
        let manifest = root.join("manifest.csv");
        let mut out = std::fs::File::create(&manifest)?;
        writeln!(out, "location_id,split,label")?;
        let plan = [
            (Split::Dev, layout.dev_positive, layout.dev_negative),
            (Split::Test, layout.test_positive, layout.test_negative),
        ];
        for (split, pos, neg) in plan {
            for i in 0..pos + neg {
                let positive = i < pos;
                let id = format!("{}-{i:04}", split.dir_name());
                let dir = root.join(split.dir_name()).join(&id);
                std::fs::create_dir_all(&dir)?;
                for t in 0..layout.images_per_location {
                    let path = dir.join(format!("t{t}.png"));
                    synth_image(&mut rng, layout.tile, positive)
                        .save(&path)
                        .map_err(|source| DatasetError::Image { path, source })?;
                }
                writeln!(out, "{id},{split},{}", label_token(Some(Label::from_bool(positive))))?;
            }
        }
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::synthetic::{write, SyntheticLayout};
    use super::*;

    fn small_layout() -> SyntheticLayout {
        SyntheticLayout {
            dev_positive: 2,
            dev_negative: 1,
            test_positive: 1,
            test_negative: 2,
            images_per_location: 3,
            tile: 8,
            seed: 1,
        }
    }

    #[test]
    fn ingest_counts_synthetic_tree() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write(dir.path(), &small_layout()).unwrap();
        let ds = ingest(dir.path(), &manifest, 3).unwrap();
        let counts = split_counts(&ds);
        assert_eq!((counts.dev.total, counts.dev.positive, counts.dev.negative), (3, 2, 1));
        assert_eq!((counts.test.total, counts.test.positive, counts.test.negative), (3, 1, 2));
        assert!(ds.locations.iter().all(|l| l.images.len() == 3 && l.dimensions == (8, 8)));
    }

    #[test]
    fn empty_root_reports_first_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("m.csv");
        std::fs::write(&manifest, "location_id,split,label\nloc-a,dev,positive\n").unwrap();
        let root = dir.path().join("root");
        std::fs::create_dir(&root).unwrap();
        match ingest(&root, &manifest, 6) {
            Err(DatasetError::MissingImage { location, path }) => {
                assert_eq!(location, "loc-a");
                assert!(path.ends_with("dev/loc-a/t0.png"), "{}", path.display());
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn split_counts_trivial_cases() {
        let empty = Dataset {
            locations: vec![],
            manifest_path: PathBuf::new(),
            images_per_location: 6,
        };
        assert_eq!(split_counts(&empty), SplitCounts::default());
        let one = Dataset {
            locations: vec![Location {
                id: "a".into(),
                split: Split::Dev,
                images: vec![],
                label: Some(Label::GullyPositive),
                dimensions: (1, 1),
            }],
            ..empty
        };
        let c = split_counts(&one).dev;
        assert_eq!((c.total, c.positive, c.negative), (1, 1, 0));
    }

    #[test]
    fn manifest_errors() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.csv");
        std::fs::write(&m, "location_id,split,label\na,dev,maybe\n").unwrap();
        assert!(matches!(read_manifest(&m), Err(DatasetError::UnknownLabelToken { token, .. }) if token == "maybe"));
        std::fs::write(&m, "location_id,split,label\na,dev,positive\na,test,negative\n").unwrap();
        assert!(matches!(read_manifest(&m), Err(DatasetError::DuplicateId(id)) if id == "a"));
        std::fs::write(&m, "id,split,label\n").unwrap();
        assert!(matches!(read_manifest(&m), Err(DatasetError::BadHeader(_))));
        std::fs::write(&m, "location_id,split,label\na,train,positive\n").unwrap();
        assert!(matches!(read_manifest(&m), Err(DatasetError::UnknownSplit { .. })));
        std::fs::write(&m, "location_id,split,label\n../x,dev,positive\n").unwrap();
        assert!(matches!(read_manifest(&m), Err(DatasetError::BadRow { .. })));
    }

    #[test]
    fn unlabeled_rows_are_admitted() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.csv");
        std::fs::write(&m, "location_id,split,label\na,test,unlabeled\n").unwrap();
        assert_eq!(read_manifest(&m).unwrap()[0].label, None);
    }
}
