//! Dataset ingestion, manifest persistence, stratified splitting, batch
//! iteration, and the synthetic five-class benchmark generator.
//!
//! A dataset on disk is one directory per class (`root/<class_name>/*.ppm`,
//! `*.pgm`); class indices are the rank of the class name in lexicographic
//! order. Bookkeeping lives in a manifest CSV with header
//! `path,class_name,class_index,split`, where the split field is empty until
//! [`stratified_split`] assigns `train`/`val`/`test` tags.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{read_pnm, write_pnm, Image};
use crate::rng::{mix64, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(text: &str) -> Result<Option<Self>> {
        match text {
            "" => Ok(None),
            "train" => Ok(Some(Split::Train)),
            "val" => Ok(Some(Split::Val)),
            "test" => Ok(Some(Split::Test)),
            other => Err(Error::format(format!("manifest: unknown split tag \"{other}\""))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// One sample's bookkeeping: where it lives, what class it is, and which
/// split it belongs to (if assigned yet).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub path: String,
    pub class_name: String,
    pub class_index: usize,
    pub split: Option<Split>,
}

/// Train/val/test fractions. Must be non-negative and sum to 1 within 1e-9.
#[derive(Clone, Copy, Debug)]
pub struct SplitSpec {
    pub f_train: f64,
    pub f_val: f64,
    pub f_test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { f_train: 0.8, f_val: 0.1, f_test: 0.1 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        for f in [self.f_train, self.f_val, self.f_test] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::invalid(format!("split fraction {f} out of [0, 1]")));
            }
        }
        let sum = self.f_train + self.f_val + self.f_test;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("split fractions sum to {sum}, expected 1")));
        }
        Ok(())
    }
}

/// A stacked minibatch: inputs `[B×C×H×W]` plus one label per row.
#[derive(Clone, Debug)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

/// Scans `root/<class>/<file>.ppm|pgm` into records. Class names are the
/// subdirectory names in lexicographic order; files sort by name within each
/// class. Requires at least two classes, each with at least one readable
/// image.
pub fn scan_directory(root: &Path) -> Result<Vec<ManifestRecord>> {
    let mut class_dirs: Vec<String> = Vec::new();
    let entries = fs::read_dir(root)
        .map_err(|e| Error::data(format!("cannot read dataset root {}: {e}", root.display())))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::data(format!("cannot list {}: {e}", root.display())))?;
        if entry.path().is_dir() {
            let name = entry.file_name().to_string_lossy().into_owned();
            class_dirs.push(name);
        }
    }
    class_dirs.sort();
    if class_dirs.len() < 2 {
        return Err(Error::data(format!(
            "need >= 2 class directories under {}, found {}",
            root.display(),
            class_dirs.len()
        )));
    }

    let mut records = Vec::new();
    for (class_index, class_name) in class_dirs.iter().enumerate() {
        let dir = root.join(class_name);
        let mut files: Vec<String> = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| Error::data(format!("cannot read {}: {e}", dir.display())))? {
            let entry = entry.map_err(|e| Error::data(format!("cannot list {}: {e}", dir.display())))?;
            let path = entry.path();
            let is_image = path
                .extension()
                .map(|e| e == "ppm" || e == "pgm")
                .unwrap_or(false);
            if path.is_file() && is_image {
                // Readability is part of the ingestion contract.
                fs::File::open(&path)
                    .map_err(|e| Error::data(format!("unreadable file {}: {e}", path.display())))?;
                files.push(path.to_string_lossy().into_owned());
            }
        }
        if files.is_empty() {
            return Err(Error::data(format!("class directory {} has no images", dir.display())));
        }
        files.sort();
        for path in files {
            records.push(ManifestRecord {
                path,
                class_name: class_name.clone(),
                class_index,
                split: None,
            });
        }
    }
    Ok(records)
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Tags every record with a split. Each class is shuffled independently by a
/// seed-derived key of the record *path* (not its position), so the
/// assignment is invariant to input order. Counts are
/// `floor(n·f_train)` / `floor(n·f_val)` / remainder; if val or test comes out
/// empty, one record moves over from train so early stopping and final
/// evaluation always have data.
pub fn stratified_split(
    records: &[ManifestRecord],
    spec: &SplitSpec,
    seed: u64,
) -> Result<Vec<ManifestRecord>> {
    spec.validate()?;
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_class.entry(r.class_index).or_default().push(i);
    }

    let mut out = records.to_vec();
    for (class_index, idxs) in by_class {
        let n = idxs.len();
        if n < 3 {
            let name = &records[idxs[0]].class_name;
            return Err(Error::data(format!(
                "class \"{name}\" has {n} records, need >= 3 to populate every split"
            )));
        }
        // Deterministic, order-invariant shuffle: sort by a keyed hash of the
        // path, with the path itself as tiebreak.
        let mut keyed: Vec<(u64, &str, usize)> = idxs
            .iter()
            .map(|&i| {
                let path = records[i].path.as_str();
                (mix64(mix64(seed) ^ fnv1a64(path.as_bytes()) ^ class_index as u64), path, i)
            })
            .collect();
        keyed.sort();

        let mut n_train = (n as f64 * spec.f_train).floor() as usize;
        let mut n_val = (n as f64 * spec.f_val).floor() as usize;
        let mut n_test = n - n_train - n_val;
        for empty in ["val", "test"] {
            let needs = (empty == "val" && n_val == 0) || (empty == "test" && n_test == 0);
            if needs {
                if n_train == 0 {
                    return Err(Error::invalid(format!(
                        "cannot repair empty {empty} split: train split is empty too"
                    )));
                }
                n_train -= 1;
                if empty == "val" {
                    n_val += 1;
                } else {
                    n_test += 1;
                }
            }
        }

        for (pos, &(_, _, i)) in keyed.iter().enumerate() {
            out[i].split = Some(if pos < n_train {
                Split::Train
            } else if pos < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            });
        }
    }
    Ok(out)
}

fn field_ok(field: &str) -> bool {
    !field.contains(',') && !field.contains('\n') && !field.contains('\r')
}

/// Serializes records as CSV. Fields may not contain commas or newlines;
/// `read_manifest ∘ write_manifest` is the identity.
pub fn write_manifest(records: &[ManifestRecord]) -> Result<Vec<u8>> {
    let mut out = String::from("path,class_name,class_index,split\n");
    for r in records {
        if !field_ok(&r.path) || !field_ok(&r.class_name) {
            return Err(Error::format(format!(
                "manifest: fields may not contain commas or newlines: {} / {}",
                r.path, r.class_name
            )));
        }
        let split = r.split.map(|s| s.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", r.path, r.class_name, r.class_index, split));
    }
    Ok(out.into_bytes())
}

/// Parses and validates a manifest: 4 fields per row, known split tags, class
/// indices contiguous and equal to the rank of the class name in sorted order.
pub fn read_manifest(bytes: &[u8]) -> Result<Vec<ManifestRecord>> {
    let text = std::str::from_utf8(bytes).map_err(|_| Error::format("manifest: not valid UTF-8"))?;
    let mut lines = text.lines();
    match lines.next() {
        Some("path,class_name,class_index,split") => {}
        other => {
            return Err(Error::format(format!(
                "manifest: bad header {:?}",
                other.unwrap_or("<empty>")
            )))
        }
    }
    let mut records = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::format(format!(
                "manifest line {}: expected 4 fields, got {}",
                lineno + 2,
                fields.len()
            )));
        }
        let class_index = fields[2].parse::<usize>().map_err(|_| {
            Error::format(format!("manifest line {}: bad class index \"{}\"", lineno + 2, fields[2]))
        })?;
        let split = Split::parse(fields[3])?;
        records.push(ManifestRecord {
            path: fields[0].to_string(),
            class_name: fields[1].to_string(),
            class_index,
            split,
        });
    }

    // Class indices must be the rank of each distinct name in sorted order.
    let mut names: Vec<&str> = records.iter().map(|r| r.class_name.as_str()).collect();
    names.sort();
    names.dedup();
    for r in &records {
        let rank = names.binary_search(&r.class_name.as_str()).unwrap();
        if rank != r.class_index {
            return Err(Error::format(format!(
                "manifest: class \"{}\" has index {}, expected {} (non-contiguous or inconsistent indices)",
                r.class_name, r.class_index, rank
            )));
        }
    }
    Ok(records)
}

/// Number of distinct classes among the records.
pub fn class_count(records: &[ManifestRecord]) -> usize {
    records.iter().map(|r| r.class_index).max().map_or(0, |m| m + 1)
}

/// Class names indexed by class index.
pub fn class_names(records: &[ManifestRecord]) -> Vec<String> {
    let k = class_count(records);
    let mut names = vec![String::new(); k];
    for r in records {
        names[r.class_index] = r.class_name.clone();
    }
    names
}

/// Reads and decodes a record's image file.
pub fn load_record_image(record: &ManifestRecord) -> Result<Image> {
    let bytes = fs::read(&record.path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", record.path)))?;
    read_pnm(&bytes).map_err(|e| Error::data(format!("{}: {e}", record.path)))
}

/// Iterates the chosen split in batches. The train split is shuffled with
/// `epoch_seed`; val/test keep manifest order. `loader` maps a record and its
/// position within the epoch to an input tensor, so callers can hook
/// preprocessing and per-sample augmentation in between; the final partial
/// batch is emitted.
pub fn batch_iterator<'a, F>(
    records: &'a [ManifestRecord],
    split: Split,
    batch_size: usize,
    epoch_seed: u64,
    loader: F,
) -> Result<BatchIter<'a, F>>
where
    F: FnMut(&ManifestRecord, usize) -> Result<Tensor>,
{
    if batch_size == 0 {
        return Err(Error::invalid("batch_iterator: batch_size must be >= 1"));
    }
    let mut order: Vec<usize> = records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.split == Some(split))
        .map(|(i, _)| i)
        .collect();
    if order.is_empty() {
        return Err(Error::data(format!("batch_iterator: split {split} is empty")));
    }
    if split == Split::Train {
        Rng::new(epoch_seed).shuffle(&mut order);
    }
    Ok(BatchIter { records, order, batch_size, cursor: 0, loader })
}

pub struct BatchIter<'a, F> {
    records: &'a [ManifestRecord],
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
    loader: F,
}

impl<'a, F> Iterator for BatchIter<'a, F>
where
    F: FnMut(&ManifestRecord, usize) -> Result<Tensor>,
{
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let mut labels = Vec::with_capacity(end - self.cursor);
        let mut data: Vec<f32> = Vec::new();
        let mut sample_shape: Option<Vec<usize>> = None;
        for pos in self.cursor..end {
            let rec = &self.records[self.order[pos]];
            let tensor = match (self.loader)(rec, pos) {
                Ok(t) => t,
                Err(e) => {
                    self.cursor = self.order.len();
                    return Some(Err(e));
                }
            };
            match &sample_shape {
                None => sample_shape = Some(tensor.shape().to_vec()),
                Some(s) if s.as_slice() != tensor.shape() => {
                    self.cursor = self.order.len();
                    return Some(Err(Error::shape(format!(
                        "batch_iterator: sample {} has shape {:?}, batch expects {s:?}",
                        rec.path,
                        tensor.shape()
                    ))));
                }
                _ => {}
            }
            labels.push(rec.class_index);
            data.extend_from_slice(tensor.data());
        }
        self.cursor = end;
        let shape = sample_shape.expect("at least one sample");
        let mut full_shape = vec![labels.len()];
        full_shape.extend_from_slice(&shape);
        match Tensor::new(full_shape, data) {
            Ok(inputs) => Some(Ok(Batch { inputs, labels })),
            Err(e) => Some(Err(e)),
        }
    }
}

/// Class names of the synthetic benchmark, in class-index (lexicographic)
/// order.
pub const SYNTHETIC_CLASSES: [&str; 5] = ["cross", "ellipse", "rectangle", "ring", "triangle"];

/// Pre-noise luma gap between shape fill and background fill.
const SYNTH_MIN_FILL_GAP: f64 = 60.0;
/// Noise deltas are clamped to ±3σ so the gap guarantee survives noise.
const SYNTH_NOISE_SIGMA: f64 = 8.0;
const SYNTH_NOISE_CLAMP: f64 = 24.0;

fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn inside_shape(class: usize, x: f64, y: f64, cx: f64, cy: f64, r: f64) -> bool {
    let dx = x - cx;
    let dy = y - cy;
    match class {
        // cross: two overlapping bars
        0 => (dx.abs() <= 0.28 * r && dy.abs() <= r) || (dy.abs() <= 0.28 * r && dx.abs() <= r),
        // ellipse
        1 => {
            let a = r;
            let b = 0.68 * r;
            (dx / a) * (dx / a) + (dy / b) * (dy / b) <= 1.0
        }
        // rectangle
        2 => dx.abs() <= 0.92 * r && dy.abs() <= 0.62 * r,
        // ring: annulus between 0.55r and r
        3 => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
        }
        // triangle: isoceles, apex up, via three half-plane tests
        4 => {
            let (ax, ay) = (0.0, -r);
            let (bx, by) = (-0.9 * r, 0.75 * r);
            let (cx2, cy2) = (0.9 * r, 0.75 * r);
            let sign = |x1: f64, y1: f64, x2: f64, y2: f64| (dx - x2) * (y1 - y2) - (x1 - x2) * (dy - y2);
            let d1 = sign(ax, ay, bx, by);
            let d2 = sign(bx, by, cx2, cy2);
            let d3 = sign(cx2, cy2, ax, ay);
            let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
            let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
            !(has_neg && has_pos)
        }
        _ => unreachable!("synthetic class index"),
    }
}

fn render_synthetic(class: usize, size: usize, rng: &mut Rng) -> Result<Image> {
    // Draw order is fixed: background shade, raw color, target luma, center
    // jitter, scale jitter, then per-pixel noise.
    let bg = rng.uniform_int(170, 220) as f64;
    let raw = [
        rng.uniform_int(30, 255) as f64,
        rng.uniform_int(30, 255) as f64,
        rng.uniform_int(30, 255) as f64,
    ];
    let target = rng.uniform_int(30, (bg - SYNTH_MIN_FILL_GAP) as i64) as f64;
    let jitter = 0.10 * size as f64;
    let cx = size as f64 / 2.0 + rng.uniform(-jitter, jitter);
    let cy = size as f64 / 2.0 + rng.uniform(-jitter, jitter);
    let r = 0.30 * size as f64 * rng.uniform(0.8, 1.2);

    // Scale the raw color to the target luma. Clamping at 255 only darkens,
    // so the fill gap can only grow.
    let scale = target / luma(raw[0], raw[1], raw[2]);
    let fill: Vec<f64> = raw.iter().map(|&v| (v * scale).min(255.0)).collect();

    let mut pixels = vec![0u8; size * size * 3];
    let mut min_gap = f64::INFINITY;
    for y in 0..size {
        for x in 0..size {
            let shape = inside_shape(class, x as f64, y as f64, cx, cy, r);
            let base = if shape { &fill[..] } else { &[bg, bg, bg][..] };
            let mut px = [0f64; 3];
            for c in 0..3 {
                let noise = rng.normal(0.0, SYNTH_NOISE_SIGMA).clamp(-SYNTH_NOISE_CLAMP, SYNTH_NOISE_CLAMP);
                px[c] = (base[c] + noise).round().clamp(0.0, 255.0);
                pixels[(y * size + x) * 3 + c] = px[c] as u8;
            }
            if shape {
                min_gap = min_gap.min((luma(px[0], px[1], px[2]) - bg).abs());
            }
        }
    }
    // Segmentability guarantee: every shape pixel stays well away from the
    // background level even after noise.
    if min_gap < 30.0 {
        return Err(Error::numeric(format!(
            "synthetic render: shape/background gap {min_gap:.1} below 30 gray levels"
        )));
    }
    Image::new(size, size, 3, pixels)
}

/// Generates the five-class synthetic benchmark under `root`: colored shapes
/// on a lighter plain background with seeded jitter of position (±10%), scale
/// (±20%), colors, and pixel noise (σ=8, clamped at 3σ). Writes P6 files under
/// class subdirectories plus `manifest.csv`, and returns the records.
/// Byte-deterministic for a given seed.
pub fn generate_synthetic(
    root: &Path,
    n_per_class: usize,
    image_size: usize,
    seed: u64,
) -> Result<Vec<ManifestRecord>> {
    if n_per_class < 3 {
        return Err(Error::invalid("generate_synthetic: need n_per_class >= 3"));
    }
    if image_size < 32 {
        return Err(Error::invalid("generate_synthetic: image_size must be >= 32"));
    }
    fs::create_dir_all(root).map_err(|e| Error::data(format!("cannot create {}: {e}", root.display())))?;
    let mut records = Vec::with_capacity(5 * n_per_class);
    for (class_index, class_name) in SYNTHETIC_CLASSES.iter().enumerate() {
        let dir = root.join(class_name);
        fs::create_dir_all(&dir).map_err(|e| Error::data(format!("cannot create {}: {e}", dir.display())))?;
        for i in 0..n_per_class {
            let mut rng = Rng::derive(seed, &[class_index as u64, i as u64]);
            let img = render_synthetic(class_index, image_size, &mut rng)?;
            let path = dir.join(format!("img_{i:04}.ppm"));
            fs::write(&path, write_pnm(&img))
                .map_err(|e| Error::data(format!("cannot write {}: {e}", path.display())))?;
            records.push(ManifestRecord {
                path: path.to_string_lossy().into_owned(),
                class_name: class_name.to_string(),
                class_index,
                split: None,
            });
        }
    }
    let manifest = write_manifest(&records)?;
    fs::write(root.join("manifest.csv"), manifest)
        .map_err(|e| Error::data(format!("cannot write manifest: {e}")))?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(path: &str, class_name: &str, class_index: usize) -> ManifestRecord {
        ManifestRecord { path: path.into(), class_name: class_name.into(), class_index, split: None }
    }

    fn synthetic_records(per_class: usize, classes: &[&str]) -> Vec<ManifestRecord> {
        let mut out = Vec::new();
        for (ci, name) in classes.iter().enumerate() {
            for i in 0..per_class {
                out.push(record(&format!("{name}/img_{i:04}.ppm"), name, ci));
            }
        }
        out
    }

    #[test]
    fn split_fractions_validated() {
        assert!(SplitSpec::default().validate().is_ok());
        assert!(SplitSpec { f_train: 0.5, f_val: 0.2, f_test: 0.2 }.validate().is_err());
        assert!(SplitSpec { f_train: 1.2, f_val: -0.1, f_test: -0.1 }.validate().is_err());
    }

    #[test]
    fn split_counts_exact_fractions() {
        let recs = synthetic_records(10, &["a", "b"]);
        let out = stratified_split(&recs, &SplitSpec::default(), 1).unwrap();
        for ci in 0..2 {
            let count = |s| out.iter().filter(|r| r.class_index == ci && r.split == Some(s)).count();
            assert_eq!(count(Split::Train), 8);
            assert_eq!(count(Split::Val), 1);
            assert_eq!(count(Split::Test), 1);
        }
    }

    #[test]
    fn split_repair_rule_for_seven() {
        let recs = synthetic_records(7, &["a", "b"]);
        let out = stratified_split(&recs, &SplitSpec::default(), 9).unwrap();
        for ci in 0..2 {
            let count = |s| out.iter().filter(|r| r.class_index == ci && r.split == Some(s)).count();
            assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (4, 1, 2));
        }
    }

    #[test]
    fn split_of_three_populates_every_split() {
        let recs = synthetic_records(3, &["a", "b"]);
        let out = stratified_split(&recs, &SplitSpec::default(), 5).unwrap();
        for ci in 0..2 {
            let count = |s| out.iter().filter(|r| r.class_index == ci && r.split == Some(s)).count();
            assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (1, 1, 1));
        }
    }

    #[test]
    fn split_rejects_tiny_classes() {
        let recs = synthetic_records(2, &["a", "b"]);
        assert!(stratified_split(&recs, &SplitSpec::default(), 0).is_err());
    }

    #[test]
    fn split_preserves_multiset_and_ignores_input_order() {
        let recs = synthetic_records(11, &["a", "b", "c"]);
        let tagged = stratified_split(&recs, &SplitSpec::default(), 77).unwrap();

        let mut shuffled = recs.clone();
        Rng::new(4).shuffle(&mut shuffled);
        let tagged_shuffled = stratified_split(&shuffled, &SplitSpec::default(), 77).unwrap();

        // Same path → same split, regardless of record order.
        let lookup: std::collections::HashMap<&str, Split> =
            tagged.iter().map(|r| (r.path.as_str(), r.split.unwrap())).collect();
        for r in &tagged_shuffled {
            assert_eq!(lookup[r.path.as_str()], r.split.unwrap(), "path {}", r.path);
        }
        // No records lost or duplicated.
        assert_eq!(tagged.len(), recs.len());
        let mut a: Vec<&str> = tagged.iter().map(|r| r.path.as_str()).collect();
        let mut b: Vec<&str> = recs.iter().map(|r| r.path.as_str()).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn split_differs_across_seeds() {
        let recs = synthetic_records(40, &["a", "b"]);
        let s1 = stratified_split(&recs, &SplitSpec::default(), 1).unwrap();
        let s2 = stratified_split(&recs, &SplitSpec::default(), 2).unwrap();
        assert_ne!(
            s1.iter().map(|r| r.split).collect::<Vec<_>>(),
            s2.iter().map(|r| r.split).collect::<Vec<_>>()
        );
    }

    #[test]
    fn manifest_round_trip() {
        let mut recs = synthetic_records(4, &["gemlik", "memecik"]);
        recs = stratified_split(&recs, &SplitSpec { f_train: 0.5, f_val: 0.25, f_test: 0.25 }, 3).unwrap();
        let bytes = write_manifest(&recs).unwrap();
        assert_eq!(read_manifest(&bytes).unwrap(), recs);
    }

    #[test]
    fn manifest_empty_is_header_only() {
        let bytes = write_manifest(&[]).unwrap();
        assert_eq!(bytes, b"path,class_name,class_index,split\n");
        assert_eq!(read_manifest(&bytes).unwrap(), vec![]);
    }

    #[test]
    fn manifest_rejects_unknown_split() {
        let bytes = b"path,class_name,class_index,split\nx.ppm,a,0,holdout\n";
        let err = read_manifest(bytes).unwrap_err();
        assert!(err.to_string().contains("unknown split tag"), "{err}");
    }

    #[test]
    fn manifest_rejects_bad_rows_and_indices() {
        assert!(read_manifest(b"path,class_name,class_index,split\nonly,three,fields\n").is_err());
        // b sorts after a but carries index 0: inconsistent.
        let bad = b"path,class_name,class_index,split\nx.ppm,b,0,train\ny.ppm,a,1,train\n";
        assert!(read_manifest(bad).is_err());
        // Non-contiguous indices.
        let gap = b"path,class_name,class_index,split\nx.ppm,a,0,train\ny.ppm,b,2,train\n";
        assert!(read_manifest(gap).is_err());
    }

    #[test]
    fn manifest_rejects_commas_in_fields() {
        let recs = vec![record("a,b.ppm", "x", 0)];
        assert!(write_manifest(&recs).is_err());
    }

    fn tagged_records(n: usize) -> Vec<ManifestRecord> {
        let mut recs = synthetic_records(n, &["a", "b"]);
        for (i, r) in recs.iter_mut().enumerate() {
            r.split = Some(if i % 2 == 0 { Split::Train } else { Split::Val });
        }
        recs
    }

    fn dummy_loader(_: &ManifestRecord, _: usize) -> Result<Tensor> {
        Ok(Tensor::zeros(vec![1, 2, 2]))
    }

    #[test]
    fn batch_sizes_cover_split_once() {
        let recs = tagged_records(10); // 10 train, 10 val
        let batches: Vec<Batch> = batch_iterator(&recs, Split::Train, 4, 0, dummy_loader)
            .unwrap()
            .collect::<Result<_>>()
            .unwrap();
        assert_eq!(batches.iter().map(|b| b.labels.len()).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert_eq!(batches[0].inputs.shape(), &[4, 1, 2, 2]);
        let total: usize = batches.iter().map(|b| b.labels.len()).sum();
        assert_eq!(total, 10);
    }

    #[test]
    fn train_order_deterministic_per_seed() {
        let recs = tagged_records(16);
        let order = |seed| -> Vec<String> {
            let mut seen = Vec::new();
            let it = batch_iterator(&recs, Split::Train, 5, seed, |r, _| {
                seen.push(r.path.clone());
                dummy_loader(r, 0)
            })
            .unwrap();
            for b in it {
                b.unwrap();
            }
            seen
        };
        assert_eq!(order(3), order(3));
        assert_ne!(order(3), order(4));
    }

    #[test]
    fn val_order_is_manifest_order_regardless_of_seed() {
        let recs = tagged_records(12);
        for seed in [0u64, 9] {
            let mut paths = Vec::new();
            let it = batch_iterator(&recs, Split::Val, 3, seed, |r, _| {
                paths.push(r.path.clone());
                dummy_loader(r, 0)
            })
            .unwrap();
            for b in it {
                b.unwrap();
            }
            let expect: Vec<String> =
                recs.iter().filter(|r| r.split == Some(Split::Val)).map(|r| r.path.clone()).collect();
            assert_eq!(paths, expect);
        }
    }

    #[test]
    fn empty_split_errors() {
        let recs = synthetic_records(4, &["a", "b"]); // no split tags at all
        assert!(batch_iterator(&recs, Split::Test, 2, 0, dummy_loader).is_err());
    }

    #[test]
    fn synthetic_classes_are_sorted() {
        let mut sorted = SYNTHETIC_CLASSES;
        sorted.sort();
        assert_eq!(sorted, SYNTHETIC_CLASSES);
    }

    #[test]
    fn synthetic_render_is_deterministic_and_segmentable() {
        for class in 0..5 {
            let a = render_synthetic(class, 64, &mut Rng::derive(7, &[class as u64, 0])).unwrap();
            let b = render_synthetic(class, 64, &mut Rng::derive(7, &[class as u64, 0])).unwrap();
            assert_eq!(a, b);
        }
    }
}
