//! Samples, weak labels, on-disk dataset layout, scribble synthesis and the
//! geometric augmentations used by the consistency branch.
//!
//! Layout under a dataset root:
//!
//! ```text
//! <root>/<split>/images/<id>.png      RGB
//! <root>/<split>/scribbles/<id>.png   8-bit: 0 authentic, 1 manipulated, 255 unlabeled
//! <root>/<split>/masks/<id>.png       8-bit: 0 authentic, 255 manipulated (optional)
//! ```

mod augment;
pub mod fixture;
mod scribble;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster;

pub use augment::{
    apply_transform, apply_to_map, transport_tensor, AugmentKind, AugmentationSpec, Interp,
};
pub use scribble::synthesize_scribble;

/// Per-pixel weak label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Label {
    Authentic = 0,
    Manipulated = 1,
    Unlabeled = 255,
}

impl Label {
    pub fn encode(self) -> u8 {
        self as u8
    }

    pub fn decode(v: u8) -> Option<Label> {
        match v {
            0 => Some(Label::Authentic),
            1 => Some(Label::Manipulated),
            255 => Some(Label::Unlabeled),
            _ => None,
        }
    }
}

/// H×W grid of [`Label`]s; the labeled set is every pixel that is not `Unlabeled`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TriStateMask {
    labels: Array2<u8>,
}

impl TriStateMask {
    pub fn unlabeled(h: usize, w: usize) -> Self {
        Self {
            labels: Array2::from_elem((h, w), Label::Unlabeled.encode()),
        }
    }

    /// Decode the on-disk byte encoding, rejecting any value outside {0, 1, 255}.
    pub fn from_encoded(id: &str, raw: Array2<u8>) -> Result<Self> {
        if let Some(((row, col), &value)) = raw
            .indexed_iter()
            .find(|(_, &v)| Label::decode(v).is_none())
        {
            return Err(Error::BadLabel {
                id: id.to_string(),
                value,
                row,
                col,
            });
        }
        Ok(Self { labels: raw })
    }

    pub fn encoded(&self) -> &Array2<u8> {
        &self.labels
    }

    pub fn dim(&self) -> (usize, usize) {
        self.labels.dim()
    }

    pub fn get(&self, r: usize, c: usize) -> Label {
        Label::decode(self.labels[[r, c]]).expect("validated on construction")
    }

    pub fn set(&mut self, r: usize, c: usize, label: Label) {
        self.labels[[r, c]] = label.encode();
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|&&v| v == label.encode()).count()
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.len() - self.count(Label::Unlabeled)
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), Label)> + '_ {
        self.labels
            .indexed_iter()
            .map(|(p, &v)| (p, Label::decode(v).expect("validated")))
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    /// (H, W, 3), values in [0, 1].
    pub image: Array3<f32>,
    pub scribble: TriStateMask,
    /// Ground-truth manipulation mask; evaluation only.
    pub dense_mask: Option<Array2<bool>>,
}

impl Sample {
    pub fn new(
        id: impl Into<String>,
        image: Array3<f32>,
        scribble: TriStateMask,
        dense_mask: Option<Array2<bool>>,
    ) -> Result<Self> {
        let id = id.into();
        let (h, w, c) = image.dim();
        if c != 3 {
            return Err(Error::Shape(format!("sample `{id}`: image has {c} channels")));
        }
        if scribble.dim() != (h, w) {
            return Err(Error::Shape(format!(
                "sample `{id}`: scribble {:?} vs image {:?}",
                scribble.dim(),
                (h, w)
            )));
        }
        if let Some(m) = &dense_mask {
            if m.dim() != (h, w) {
                return Err(Error::Shape(format!(
                    "sample `{id}`: mask {:?} vs image {:?}",
                    m.dim(),
                    (h, w)
                )));
            }
        }
        Ok(Self {
            id,
            image,
            scribble,
            dense_mask,
        })
    }

    pub fn dim(&self) -> (usize, usize) {
        self.scribble.dim()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
    /// Pristine images used only to build the authentic memory banks.
    Authentic,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Authentic => "authentic",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "authentic" => Ok(Split::Authentic),
            other => Err(Error::Invalid(format!("unknown split `{other}`"))),
        }
    }
}

pub struct SplitPaths {
    pub images: PathBuf,
    pub scribbles: PathBuf,
    pub masks: PathBuf,
}

impl SplitPaths {
    pub fn new(root: &Path, split: Split) -> Self {
        let base = root.join(split.dir_name());
        Self {
            images: base.join("images"),
            scribbles: base.join("scribbles"),
            masks: base.join("masks"),
        }
    }
}

fn image_ids(dir: &Path) -> Result<Vec<String>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// Load every sample of a split, sorted by id. Masks are optional per sample.
pub fn load_dataset(root: &Path, split: Split) -> Result<Vec<Sample>> {
    let paths = SplitPaths::new(root, split);
    let mut samples = Vec::new();
    for id in image_ids(&paths.images)? {
        let image = raster::read_rgb(&paths.images.join(format!("{id}.png")))?;
        let scribble_path = paths.scribbles.join(format!("{id}.png"));
        if !scribble_path.is_file() {
            return Err(Error::MissingFile {
                id,
                what: "scribble",
                path: scribble_path,
            });
        }
        let scribble = TriStateMask::from_encoded(&id, raster::read_gray(&scribble_path)?)?;
        let mask_path = paths.masks.join(format!("{id}.png"));
        let dense_mask = if mask_path.is_file() {
            Some(raster::read_gray(&mask_path)?.mapv(|v| v >= 128))
        } else {
            None
        };
        samples.push(Sample::new(id, image, scribble, dense_mask)?);
    }
    Ok(samples)
}

/// Load only the images of a split (e.g. the pristine split used for banks).
pub fn load_images(root: &Path, split: Split) -> Result<Vec<(String, Array3<f32>)>> {
    let paths = SplitPaths::new(root, split);
    image_ids(&paths.images)?
        .into_iter()
        .map(|id| {
            let img = raster::read_rgb(&paths.images.join(format!("{id}.png")))?;
            Ok((id, img))
        })
        .collect()
}

/// Load the dense masks of a split, keyed by id order.
pub fn load_masks(root: &Path, split: Split) -> Result<Vec<(String, Array2<bool>)>> {
    let paths = SplitPaths::new(root, split);
    image_ids(&paths.masks)?
        .into_iter()
        .map(|id| {
            let m = raster::read_gray(&paths.masks.join(format!("{id}.png")))?;
            Ok((id, m.mapv(|v| v >= 128)))
        })
        .collect()
}

pub fn write_scribble(path: &Path, mask: &TriStateMask) -> Result<()> {
    raster::write_gray(path, mask.encoded())
}

pub fn write_dense_mask(path: &Path, mask: &Array2<bool>) -> Result<()> {
    raster::write_gray(path, &mask.mapv(|b| if b { 255 } else { 0 }))
}

/// Write a full sample (image, scribble, optional mask) into the split layout.
pub fn write_sample(root: &Path, split: Split, sample: &Sample) -> Result<()> {
    let paths = SplitPaths::new(root, split);
    for dir in [&paths.images, &paths.scribbles, &paths.masks] {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = format!("{}.png", sample.id);
    raster::write_rgb(&paths.images.join(&file), &sample.image)?;
    write_scribble(&paths.scribbles.join(&file), &sample.scribble)?;
    if let Some(m) = &sample.dense_mask {
        write_dense_mask(&paths.masks.join(&file), m)?;
    }
    Ok(())
}

/// Synthesize and write scribbles for every dense mask of a split. Existing
/// scribbles are only replaced with `force`. Returns the number written.
pub fn write_scribbles(root: &Path, split: Split, coverage: f64, seed: u64, force: bool) -> Result<usize> {
    let paths = SplitPaths::new(root, split);
    let masks = load_masks(root, split)?;
    if masks.is_empty() {
        return Err(Error::Empty(format!("no dense masks under {}", paths.masks.display())));
    }
    if !force && paths.scribbles.is_dir() && !image_ids(&paths.scribbles)?.is_empty() {
        return Err(Error::Invalid(format!(
            "{} already holds scribbles (use --force to overwrite)",
            paths.scribbles.display()
        )));
    }
    std::fs::create_dir_all(&paths.scribbles).map_err(|e| Error::io(&paths.scribbles, e))?;
    for (i, (id, mask)) in masks.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream((3 << 32) | i as u64);
        let scribble = synthesize_scribble(mask, coverage, rng.random())?;
        write_scribble(&paths.scribbles.join(format!("{id}.png")), &scribble)?;
    }
    Ok(masks.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_sample(id: &str, seed: u64) -> Sample {
        let mut mask = Array2::from_elem((8, 8), false);
        mask.slice_mut(ndarray::s![2..6, 2..6]).fill(true);
        let scribble = synthesize_scribble(&mask, 0.5, seed).unwrap();
        let image = Array3::from_shape_fn((8, 8, 3), |(r, c, k)| ((r + c + k) % 5) as f32 / 4.0);
        Sample::new(id, image, scribble, Some(mask)).unwrap()
    }

    #[test]
    fn loads_sorted_samples() {
        let dir = tempfile::tempdir().unwrap();
        for (i, id) in ["c", "a", "b"].iter().enumerate() {
            write_sample(dir.path(), Split::Train, &toy_sample(id, i as u64)).unwrap();
        }
        let got = load_dataset(dir.path(), Split::Train).unwrap();
        let ids: Vec<_> = got.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        let original = toy_sample("a", 1);
        assert_eq!(got[0].scribble, original.scribble);
        assert_eq!(got[0].dense_mask, original.dense_mask);
    }

    #[test]
    fn missing_scribble_names_the_id() {
        let dir = tempfile::tempdir().unwrap();
        write_sample(dir.path(), Split::Train, &toy_sample("s01", 0)).unwrap();
        write_sample(dir.path(), Split::Train, &toy_sample("s02", 0)).unwrap();
        std::fs::remove_file(dir.path().join("train/scribbles/s02.png")).unwrap();
        let err = load_dataset(dir.path(), Split::Train).unwrap_err();
        assert!(matches!(&err, Error::MissingFile { id, .. } if id == "s02"));
        assert!(err.to_string().contains("s02"));
    }

    #[test]
    fn bad_label_value_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        write_sample(dir.path(), Split::Train, &toy_sample("x", 0)).unwrap();
        let mut raw = Array2::from_elem((8, 8), 255u8);
        raw[[3, 4]] = 7;
        raster::write_gray(&dir.path().join("train/scribbles/x.png"), &raw).unwrap();
        let err = load_dataset(dir.path(), Split::Train).unwrap_err();
        assert!(matches!(err, Error::BadLabel { value: 7, row: 3, col: 4, .. }));
        assert!(err.to_string().contains("value 7"));
    }

    #[test]
    fn rescribbling_needs_force_and_is_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        write_sample(dir.path(), Split::Train, &toy_sample("a", 0)).unwrap();
        let path = dir.path().join("train/scribbles/a.png");
        assert!(write_scribbles(dir.path(), Split::Train, 0.25, 9, false).is_err());
        assert_eq!(write_scribbles(dir.path(), Split::Train, 0.25, 9, true).unwrap(), 1);
        let first = std::fs::read(&path).unwrap();
        write_scribbles(dir.path(), Split::Train, 0.25, 9, true).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
        let s = &load_dataset(dir.path(), Split::Train).unwrap()[0];
        assert_eq!(s.scribble.count(Label::Manipulated), 4);
    }

    #[test]
    fn mismatched_dims_rejected() {
        let img = Array3::zeros((4, 4, 3));
        assert!(Sample::new("x", img.clone(), TriStateMask::unlabeled(4, 5), None).is_err());
        let m = Some(Array2::from_elem((3, 4), false));
        assert!(Sample::new("x", img, TriStateMask::unlabeled(4, 4), m).is_err());
    }

    #[test]
    fn labeled_and_unlabeled_partition() {
        let s = toy_sample("p", 3);
        let g = s.scribble.labeled_count();
        let u = s.scribble.count(Label::Unlabeled);
        assert_eq!(g + u, 64);
    }

    proptest::proptest! {
        #[test]
        fn scribble_encoding_round_trips(cells in proptest::collection::vec(0u8..3, 30)) {
            let raw = Array2::from_shape_vec((5, 6), cells.iter().map(|&c| [0u8, 1, 255][c as usize]).collect()).unwrap();
            let mask = TriStateMask::from_encoded("p", raw).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("m.png");
            write_scribble(&path, &mask).unwrap();
            let back = TriStateMask::from_encoded("p", raster::read_gray(&path).unwrap()).unwrap();
            proptest::prop_assert_eq!(back, mask);
        }
    }
}
