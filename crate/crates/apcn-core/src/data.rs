//! Dataset ingestion: big-endian IDX containers, the Omniglot alphabet tree,
//! and the deterministic transfer split.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::glimpse;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    Transfer,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "transfer" => Ok(Split::Transfer),
            other => Err(Error::Dataset(format!("unknown split `{other}`"))),
        }
    }
}

/// Images in `[0,1]` with integer class labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<u32>,
    pub side: usize,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

// ---- IDX ----

struct IdxReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> IdxReader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Idx {
                offset: self.pos as u64,
                message: format!(
                    "truncated while reading {what}: need {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32_be(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_be_bytes(b.try_into().expect("4 bytes")))
    }
}

/// Parse an IDX image file (magic `0x00000803`), normalizing bytes to `[0,1]`.
pub fn load_idx_images(path: &Path) -> Result<Vec<Tensor>> {
    let bytes = std::fs::read(path)?;
    let mut r = IdxReader {
        bytes: &bytes,
        pos: 0,
    };
    let magic = r.u32_be("magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Idx {
            offset: 0,
            message: format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let count = r.u32_be("image count")? as usize;
    let rows = r.u32_be("row count")? as usize;
    let cols = r.u32_be("column count")? as usize;
    let expected = count * rows * cols;
    let data = r.take(expected, "pixel data")?;
    if r.pos != bytes.len() {
        return Err(Error::Idx {
            offset: r.pos as u64,
            message: format!("{} trailing bytes after pixel data", bytes.len() - r.pos),
        });
    }
    Ok(data
        .chunks_exact(rows * cols)
        .map(|px| {
            Tensor::new(
                vec![rows, cols],
                px.iter().map(|&b| b as f64 / 255.0).collect(),
            )
        })
        .collect())
}

/// Parse an IDX label file (magic `0x00000801`).
pub fn load_idx_labels(path: &Path) -> Result<Vec<u32>> {
    let bytes = std::fs::read(path)?;
    let mut r = IdxReader {
        bytes: &bytes,
        pos: 0,
    };
    let magic = r.u32_be("magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Idx {
            offset: 0,
            message: format!("bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let count = r.u32_be("label count")? as usize;
    let data = r.take(count, "label data")?;
    Ok(data.iter().map(|&b| b as u32).collect())
}

/// Load a standard MNIST-layout directory (`train-images-idx3-ubyte` etc.).
pub fn load_idx_dir(dir: &Path, split: Split) -> Result<Dataset> {
    let (img_name, lbl_name) = match split {
        Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
        Split::Transfer => {
            return Err(Error::Dataset(
                "IDX datasets have no transfer split; use omniglot".into(),
            ))
        }
    };
    let images = load_idx_images(&dir.join(img_name))?;
    let labels = load_idx_labels(&dir.join(lbl_name))?;
    if images.len() != labels.len() {
        return Err(Error::Dataset(format!(
            "{} images but {} labels in {}",
            images.len(),
            labels.len(),
            dir.display()
        )));
    }
    let side = images.first().map(|t| t.shape()[0]).unwrap_or(0);
    Ok(Dataset {
        images,
        labels,
        side,
        split,
    })
}

// ---- Omniglot ----

/// One character class: all its sample images, preprocessed.
#[derive(Debug, Clone)]
pub struct OmniglotClass {
    pub alphabet: String,
    pub character: String,
    /// Sorted sample file names, aligned with `images`.
    pub files: Vec<String>,
    pub images: Vec<Tensor>,
}

impl OmniglotClass {
    pub fn key(&self) -> String {
        format!("{}/{}", self.alphabet, self.character)
    }
}

/// Load the `alphabet/character/sample.png` tree. Strokes come out bright on
/// a dark background (inverted when the source is mostly bright), resized to
/// `side × side` by bilinear interpolation. Unreadable images are skipped and
/// counted; an alphabet with no characters is an error.
pub fn load_omniglot(dir: &Path, side: usize) -> Result<(Vec<OmniglotClass>, usize)> {
    let mut classes = Vec::new();
    let mut skipped = 0usize;
    let mut alphabets: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    alphabets.sort();
    if alphabets.is_empty() {
        return Err(Error::Dataset(format!(
            "no alphabet directories under {}",
            dir.display()
        )));
    }
    for alphabet in alphabets {
        let alphabet_name = leaf_name(&alphabet);
        let mut chars: Vec<PathBuf> = std::fs::read_dir(&alphabet)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        chars.sort();
        if chars.is_empty() {
            return Err(Error::Dataset(format!(
                "alphabet {alphabet_name} has no character directories"
            )));
        }
        for ch in chars {
            let character = leaf_name(&ch);
            let mut files: Vec<PathBuf> = std::fs::read_dir(&ch)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e == "png"))
                .collect();
            files.sort();
            let mut names = Vec::new();
            let mut images = Vec::new();
            for f in files {
                match load_png_gray(&f, side) {
                    Ok(t) => {
                        names.push(leaf_name(&f));
                        images.push(t);
                    }
                    Err(_) => skipped += 1,
                }
            }
            classes.push(OmniglotClass {
                alphabet: alphabet_name.clone(),
                character,
                files: names,
                images,
            });
        }
    }
    Ok((classes, skipped))
}

fn leaf_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Load any grayscale-able image, normalize to `[0,1]` with strokes bright on
/// dark (inverted when the source is mostly bright), and resize.
pub fn load_png_gray(path: &Path, side: usize) -> Result<Tensor> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = img.dimensions();
    let mut vals: Vec<f64> = img.pixels().map(|p| p.0[0] as f64 / 255.0).collect();
    // match digit polarity: strokes bright on dark
    let mean = vals.iter().sum::<f64>() / vals.len().max(1) as f64;
    if mean >= 0.5 {
        for v in &mut vals {
            *v = 1.0 - *v;
        }
    }
    let t = Tensor::new(vec![h as usize, w as usize], vals);
    glimpse::resize_data(&t, side)
}

/// Class-level membership of the transfer split, serializable as the split
/// manifest.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct OmniglotSplit {
    pub seed: u64,
    /// Class paths (`alphabet/character`) trained on.
    pub train_classes: Vec<String>,
    /// Class paths held out entirely for transfer evaluation.
    pub transfer_classes: Vec<String>,
    /// Per training class: sample file names reserved for the test split.
    pub test_examples: BTreeMap<String, Vec<String>>,
}

/// Per alphabet, keep 85% of character classes (rounded down, at least one)
/// for training and the rest for transfer; inside each training class hold
/// out 3 samples as the test set. Deterministic in (class order, seed).
pub fn make_transfer_split(classes: &[OmniglotClass], seed: u64) -> OmniglotSplit {
    let mut by_alphabet: BTreeMap<&str, Vec<&OmniglotClass>> = BTreeMap::new();
    for c in classes {
        by_alphabet.entry(&c.alphabet).or_default().push(c);
    }
    let mut split = OmniglotSplit {
        seed,
        train_classes: Vec::new(),
        transfer_classes: Vec::new(),
        test_examples: BTreeMap::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, mut list) in by_alphabet {
        list.sort_by(|a, b| a.character.cmp(&b.character));
        list.shuffle(&mut rng);
        let keep = ((list.len() as f64 * 0.85).floor() as usize).max(1);
        for (i, c) in list.iter().enumerate() {
            if i < keep {
                split.train_classes.push(c.key());
                let mut order: Vec<usize> = (0..c.files.len()).collect();
                order.shuffle(&mut rng);
                let held: Vec<String> = order
                    .into_iter()
                    .take(3)
                    .map(|i| c.files[i].clone())
                    .collect();
                split.test_examples.insert(c.key(), held);
            } else {
                split.transfer_classes.push(c.key());
            }
        }
    }
    split.train_classes.sort();
    split.transfer_classes.sort();
    split
}

/// Materialize train/test/transfer datasets from loaded classes and a split.
pub fn apply_split(classes: &[OmniglotClass], split: &OmniglotSplit) -> Result<[Dataset; 3]> {
    let side = classes
        .iter()
        .flat_map(|c| c.images.first())
        .map(|t| t.shape()[0])
        .next()
        .ok_or_else(|| Error::Dataset("no omniglot images loaded".into()))?;
    let empty = |split| Dataset {
        images: Vec::new(),
        labels: Vec::new(),
        side,
        split,
    };
    let mut train = empty(Split::Train);
    let mut test = empty(Split::Test);
    let mut transfer = empty(Split::Transfer);
    for (label, c) in classes.iter().enumerate() {
        let key = c.key();
        if let Some(held) = split.test_examples.get(&key) {
            for (f, img) in c.files.iter().zip(&c.images) {
                let dst = if held.contains(f) { &mut test } else { &mut train };
                dst.images.push(img.clone());
                dst.labels.push(label as u32);
            }
        } else if split.transfer_classes.contains(&key) {
            for img in &c.images {
                transfer.images.push(img.clone());
                transfer.labels.push(label as u32);
            }
        }
        // classes absent from the manifest are ignored
    }
    Ok([train, test, transfer])
}

pub fn save_split(path: &Path, split: &OmniglotSplit) -> Result<()> {
    let text = serde_json::to_string_pretty(split)
        .map_err(|e| Error::Dataset(format!("split serialization failed: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_split(path: &Path) -> Result<OmniglotSplit> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Dataset(format!("bad split manifest: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_image_bytes(count: usize, side: usize) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        b.extend_from_slice(&(count as u32).to_be_bytes());
        b.extend_from_slice(&(side as u32).to_be_bytes());
        b.extend_from_slice(&(side as u32).to_be_bytes());
        for i in 0..count * side * side {
            b.push((i % 256) as u8);
        }
        b
    }

    #[test]
    fn idx_parse_and_normalization() {
        let dir = std::env::temp_dir().join("apcn-idx-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("imgs");
        let mut bytes = idx_image_bytes(3, 4);
        let len = bytes.len();
        bytes[len - 1] = 255;
        std::fs::write(&path, &bytes).unwrap();
        let images = load_idx_images(&path).unwrap();
        assert_eq!(images.len(), 3);
        assert_eq!(images[0].shape(), &[4, 4]);
        assert_eq!(*images[2].vals().last().unwrap(), 1.0);
    }

    #[test]
    fn truncated_idx_names_byte_counts() {
        let dir = std::env::temp_dir().join("apcn-idx-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("trunc");
        let mut bytes = idx_image_bytes(2, 4);
        bytes.truncate(bytes.len() - 5);
        std::fs::write(&path, &bytes).unwrap();
        let err = load_idx_images(&path).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("need 32 bytes") && msg.contains("27 remain"),
            "{msg}"
        );
    }

    #[test]
    fn bad_magic_is_reported() {
        let dir = std::env::temp_dir().join("apcn-idx-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("magic");
        let mut bytes = idx_image_bytes(1, 2);
        bytes[3] = 0x99;
        std::fs::write(&path, &bytes).unwrap();
        let err = load_idx_images(&path).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
    }

    fn fake_classes(alphabets: usize, chars: usize, samples: usize) -> Vec<OmniglotClass> {
        let mut out = Vec::new();
        for a in 0..alphabets {
            for c in 0..chars {
                out.push(OmniglotClass {
                    alphabet: format!("alpha{a}"),
                    character: format!("char{c:02}"),
                    files: (0..samples).map(|s| format!("{s:04}.png")).collect(),
                    images: (0..samples)
                        .map(|s| Tensor::new(vec![2, 2], vec![s as f64; 4]))
                        .collect(),
                });
            }
        }
        out
    }

    #[test]
    fn split_keeps_85_percent_rounded_down() {
        let classes = fake_classes(1, 20, 20);
        let split = make_transfer_split(&classes, 7);
        assert_eq!(split.train_classes.len(), 17);
        assert_eq!(split.transfer_classes.len(), 3);
        for held in split.test_examples.values() {
            assert_eq!(held.len(), 3);
        }
    }

    #[test]
    fn split_is_deterministic_in_seed() {
        let classes = fake_classes(3, 10, 20);
        let a = make_transfer_split(&classes, 42);
        let b = make_transfer_split(&classes, 42);
        let c = make_transfer_split(&classes, 43);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn split_manifest_round_trips() {
        let classes = fake_classes(2, 8, 20);
        let split = make_transfer_split(&classes, 5);
        let dir = std::env::temp_dir().join("apcn-split-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("split.json");
        save_split(&path, &split).unwrap();
        assert_eq!(load_split(&path).unwrap(), split);
    }

    #[test]
    fn splits_are_disjoint_and_cover_everything() {
        let classes = fake_classes(2, 10, 20);
        let split = make_transfer_split(&classes, 11);
        let [train, test, transfer] = apply_split(&classes, &split).unwrap();
        assert_eq!(train.len() + test.len() + transfer.len(), 2 * 10 * 20);
        assert_eq!(test.len(), split.train_classes.len() * 3);
        for ds in [&train, &test] {
            for l in &ds.labels {
                assert!(split.train_classes.contains(&classes[*l as usize].key()));
            }
        }
        for l in &transfer.labels {
            assert!(split
                .transfer_classes
                .contains(&classes[*l as usize].key()));
        }
    }
}
