//! Sequences on disk in the DAVIS-style layout:
//!
//! ```text
//! root/JPEGImages/<seq>/00000.pgm   frames (P5 or P6)
//! root/Annotations/<seq>/00000.pgm  masks (P5, foreground >= 128)
//! root/ImageSets/train.txt          sequence names, one per line
//! root/ImageSets/val.txt
//! ```

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::netpbm::{read_image, write_frame, write_mask};
use crate::error::{Error, Result};
use crate::tensor::{fmt_shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Label {
    Benign,
    Malignant,
    Synthetic,
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "benign" => Ok(Self::Benign),
            "malignant" => Ok(Self::Malignant),
            "synthetic" => Ok(Self::Synthetic),
            other => Err(Error::validation(format!("unknown label {other:?}"))),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Benign => "benign",
            Label::Malignant => "malignant",
            Label::Synthetic => "synthetic",
        })
    }
}

/// Zero border added around every frame of a sequence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    /// Centred padding that brings `h×w` up to multiples of `stride`.
    pub fn to_multiple(h: usize, w: usize, stride: usize) -> Self {
        let extra = |n: usize| n.div_ceil(stride) * stride - n;
        let (eh, ew) = (extra(h), extra(w));
        Self {
            top: eh / 2,
            bottom: eh - eh / 2,
            left: ew / 2,
            right: ew - ew / 2,
        }
    }

    pub fn is_zero(&self) -> bool {
        *self == Self::default()
    }

    pub fn apply(&self, t: &Tensor) -> Result<Tensor> {
        let [c, h, w] = dims3(t)?;
        if self.is_zero() {
            return Ok(t.clone());
        }
        let (ph, pw) = (h + self.top + self.bottom, w + self.left + self.right);
        let mut out = vec![0.0; c * ph * pw];
        for ch in 0..c {
            for y in 0..h {
                let src = &t.data()[(ch * h + y) * w..][..w];
                out[(ch * ph + y + self.top) * pw + self.left..][..w].copy_from_slice(src);
            }
        }
        Ok(Tensor::from_parts(vec![c, ph, pw], out))
    }

    /// Inverse of [`apply`](Self::apply).
    pub fn remove(&self, t: &Tensor) -> Result<Tensor> {
        let [c, ph, pw] = dims3(t)?;
        if self.is_zero() {
            return Ok(t.clone());
        }
        if ph < self.top + self.bottom || pw < self.left + self.right {
            return Err(Error::shape(format!("cannot remove {self:?} from {}", fmt_shape(t.shape()))));
        }
        let (h, w) = (ph - self.top - self.bottom, pw - self.left - self.right);
        let mut out = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                out.extend_from_slice(&t.data()[(ch * ph + y + self.top) * pw + self.left..][..w]);
            }
        }
        Ok(Tensor::from_parts(vec![c, h, w], out))
    }
}

fn dims3(t: &Tensor) -> Result<[usize; 3]> {
    match t.shape() {
        &[c, h, w] => Ok([c, h, w]),
        s => Err(Error::shape(format!("expected [CxHxW], got {}", fmt_shape(s)))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoSequence {
    pub name: String,
    /// `[1×H×W]` in `[0, 1]`, already padded.
    pub frames: Vec<Tensor>,
    /// Binary `[1×H×W]`, aligned with `frames`.
    pub masks: Option<Vec<Tensor>>,
    pub label: Option<Label>,
    pub padding: Padding,
}

impl VideoSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Padded `(H, W)`.
    pub fn resolution(&self) -> (usize, usize) {
        let s = self.frames[0].shape();
        (s[1], s[2])
    }

    /// `(H₀, W₀)` before padding.
    pub fn original_resolution(&self) -> (usize, usize) {
        let (h, w) = self.resolution();
        let p = self.padding;
        (h - p.top - p.bottom, w - p.left - p.right)
    }

    /// Pads every frame and mask to multiples of `stride`. A no-op when the
    /// resolution already divides.
    pub fn pad_to(mut self, stride: usize) -> Result<Self> {
        let (h, w) = self.original_resolution();
        let extra = Padding::to_multiple(h, w, stride);
        if extra.is_zero() {
            return Ok(self);
        }
        if !self.padding.is_zero() {
            return Err(Error::State(format!("sequence {} is already padded", self.name)));
        }
        self.frames = self.frames.iter().map(|f| extra.apply(f)).collect::<Result<_>>()?;
        if let Some(masks) = &self.masks {
            self.masks = Some(masks.iter().map(|m| extra.apply(m)).collect::<Result<_>>()?);
        }
        self.padding = extra;
        Ok(self)
    }

    /// Restores the original resolution of a prediction made on padded frames.
    pub fn unpad(&self, t: &Tensor) -> Result<Tensor> {
        self.padding.remove(t)
    }

    /// Masks at original resolution.
    pub fn original_masks(&self) -> Option<Result<Vec<Tensor>>> {
        self.masks.as_ref().map(|ms| ms.iter().map(|m| self.unpad(m)).collect())
    }
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    /// In lexicographic name order.
    pub sequences: Vec<VideoSequence>,
    pub train: Vec<String>,
    pub val: Vec<String>,
    /// Non-fatal problems found while loading.
    pub warnings: Vec<String>,
}

impl Dataset {
    pub fn get(&self, name: &str) -> Option<&VideoSequence> {
        self.sequences.iter().find(|s| s.name == name)
    }

    /// Sequences named in `names`, in that order. Unknown names are skipped.
    pub fn subset(&self, names: &[String]) -> Vec<&VideoSequence> {
        names.iter().filter_map(|n| self.get(n)).collect()
    }
}

fn sorted_entries(dir: &Path, want_dirs: bool) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() == want_dirs {
            out.push((entry.file_name().to_string_lossy().into_owned(), path));
        }
    }
    out.sort();
    Ok(out)
}

fn is_image(name: &str) -> bool {
    name.ends_with(".pgm") || name.ends_with(".ppm")
}

fn read_list(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

/// Loads every sequence under `root/JPEGImages`, padding to multiples of
/// `stride`.
pub fn load_dataset(root: &Path, stride: usize) -> Result<Dataset> {
    let frames_root = root.join("JPEGImages");
    let masks_root = root.join("Annotations");
    let sets = root.join("ImageSets");
    let mut warnings = Vec::new();

    let mut labels = std::collections::BTreeMap::new();
    let labels_path = sets.join("labels.txt");
    if labels_path.exists() {
        for line in read_list(&labels_path)? {
            let mut parts = line.split_whitespace();
            if let (Some(name), Some(label), None) = (parts.next(), parts.next(), parts.next()) {
                labels.insert(name.to_string(), label.parse::<Label>()?);
            } else {
                warnings.push(format!("{}: ignoring line {line:?}", labels_path.display()));
            }
        }
    }

    let mut sequences = Vec::new();
    for (name, dir) in sorted_entries(&frames_root, true)? {
        let seq = load_sequence(&name, &dir, &masks_root.join(&name), &mut warnings)?;
        let seq = VideoSequence {
            label: labels.get(&name).copied(),
            ..seq
        };
        sequences.push(seq.pad_to(stride)?);
    }

    let known: BTreeSet<&str> = sequences.iter().map(|s| s.name.as_str()).collect();
    let mut split = |file: &str| -> Result<Vec<String>> {
        let path = sets.join(file);
        if !path.exists() {
            warnings.push(format!("{} missing", path.display()));
            return Ok(Vec::new());
        }
        let names = read_list(&path)?;
        for n in names.iter().filter(|n| !known.contains(n.as_str())) {
            warnings.push(format!("{}: unknown sequence {n}", path.display()));
        }
        Ok(names.into_iter().filter(|n| known.contains(n.as_str())).collect())
    };
    let train = split("train.txt")?;
    let val = split("val.txt")?;
    for name in &known {
        if !train.iter().chain(&val).any(|n| n == name) {
            warnings.push(format!("sequence {name} is in neither split"));
        }
    }

    Ok(Dataset {
        sequences,
        train,
        val,
        warnings,
    })
}

fn load_sequence(name: &str, dir: &Path, mask_dir: &Path, warnings: &mut Vec<String>) -> Result<VideoSequence> {
    let mut frames = Vec::new();
    let mut masks = Vec::new();
    let has_masks = mask_dir.is_dir();
    let files = sorted_entries(dir, false)?;
    for (file, path) in &files {
        if !is_image(file) {
            warnings.push(format!("{}: ignoring non-netpbm file", path.display()));
            continue;
        }
        let frame = read_image(path)?.to_gray_tensor();
        if let Some(first) = frames.first().map(Tensor::shape) {
            if first != frame.shape() {
                return Err(Error::validation(format!(
                    "{}: resolution {} differs from the sequence's {}",
                    path.display(),
                    fmt_shape(frame.shape()),
                    fmt_shape(first)
                )));
            }
        }
        if has_masks {
            let stem = Path::new(file).with_extension("pgm");
            let mask_path = mask_dir.join(stem);
            if !mask_path.exists() {
                return Err(Error::io(
                    &mask_path,
                    std::io::Error::new(std::io::ErrorKind::NotFound, format!("annotation for frame {file} of {name} not found")),
                ));
            }
            let mask = read_image(&mask_path)?.to_mask();
            if mask.shape() != frame.shape() {
                return Err(Error::validation(format!(
                    "{}: mask {} does not match frame {}",
                    mask_path.display(),
                    fmt_shape(mask.shape()),
                    fmt_shape(frame.shape())
                )));
            }
            masks.push(mask);
        }
        frames.push(frame);
    }
    if frames.is_empty() {
        return Err(Error::format(dir, "sequence has no frames"));
    }
    if has_masks {
        for (file, path) in sorted_entries(mask_dir, false)? {
            if !files.iter().any(|(f, _)| Path::new(f).with_extension("pgm").to_string_lossy() == file) {
                warnings.push(format!("{}: annotation without a frame", path.display()));
            }
        }
    }
    Ok(VideoSequence {
        name: name.to_string(),
        frames,
        masks: has_masks.then_some(masks),
        label: None,
        padding: Padding::default(),
    })
}

/// Frame file name for index `i`.
pub fn frame_name(i: usize) -> String {
    format!("{i:05}.pgm")
}

/// Writes sequences (at original resolution) and the split lists under `root`.
pub fn write_dataset(root: &Path, sequences: &[VideoSequence], train: &[String], val: &[String]) -> Result<()> {
    let sets = root.join("ImageSets");
    let mkdir = |p: &Path| fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    mkdir(&sets)?;
    let mut labels = String::new();
    for seq in sequences {
        let fdir = root.join("JPEGImages").join(&seq.name);
        mkdir(&fdir)?;
        for (i, f) in seq.frames.iter().enumerate() {
            write_frame(&seq.unpad(f)?, &fdir.join(frame_name(i)))?;
        }
        if let Some(masks) = &seq.masks {
            let mdir = root.join("Annotations").join(&seq.name);
            mkdir(&mdir)?;
            for (i, m) in masks.iter().enumerate() {
                write_mask(&seq.unpad(m)?, &mdir.join(frame_name(i)))?;
            }
        }
        if let Some(label) = seq.label {
            labels.push_str(&format!("{} {label}\n", seq.name));
        }
    }
    let write = |file: &str, body: String| {
        let p = sets.join(file);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))
    };
    let list = |names: &[String]| names.iter().map(|n| format!("{n}\n")).collect::<String>();
    write("train.txt", list(train))?;
    write("val.txt", list(val))?;
    if !labels.is_empty() {
        write("labels.txt", labels)?;
    }
    Ok(())
}

/// Seeded shuffle of `names` into `(train, test)` with `round(ratio·n)`
/// training sequences, keeping at least one on each side when `n >= 2`.
pub fn split_sequences(names: &[String], ratio: f64, seed: u64) -> Result<(Vec<String>, Vec<String>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::validation(format!("split ratio {ratio} must lie in (0, 1)")));
    }
    let mut shuffled = names.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = shuffled.len();
    let n_train = if n < 2 { n } else { ((ratio * n as f64).round() as usize).clamp(1, n - 1) };
    let test = shuffled.split_off(n_train);
    Ok((shuffled, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn padding_arithmetic() {
        let p = Padding::to_multiple(100, 100, 8);
        assert_eq!(p, Padding { top: 2, bottom: 2, left: 2, right: 2 });
        let p = Padding::to_multiple(97, 64, 8);
        assert_eq!((p.top, p.bottom, p.left, p.right), (3, 4, 0, 0));
    }

    #[test]
    fn pad_then_remove_is_identity() {
        let t = Tensor::new([1, 3, 5], (0..15).map(f64::from).collect()).unwrap();
        let p = Padding::to_multiple(3, 5, 4);
        let padded = p.apply(&t).unwrap();
        assert_eq!(padded.shape(), &[1, 4, 8]);
        assert_eq!(padded.sum(), t.sum());
        assert!(p.remove(&padded).unwrap().bitwise_eq(&t));
    }

    #[test]
    fn split_is_seeded_and_partitions() {
        let names: Vec<String> = (0..20).map(|i| format!("s{i:02}")).collect();
        let (a, b) = split_sequences(&names, 0.9, 5).unwrap();
        assert_eq!((a.len(), b.len()), (18, 2));
        assert_eq!(split_sequences(&names, 0.9, 5).unwrap(), (a.clone(), b.clone()));
        let mut all: Vec<_> = a.into_iter().chain(b).collect();
        all.sort();
        assert_eq!(all, names);
        assert!(split_sequences(&names, 1.0, 0).is_err());
        let two = vec!["x".to_string(), "y".to_string()];
        let (a, b) = split_sequences(&two, 0.9, 0).unwrap();
        assert_eq!((a.len(), b.len()), (1, 1));
    }
}
