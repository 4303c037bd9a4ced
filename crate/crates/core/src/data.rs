//! Dataset ingestion: IDX files, a synthetic fallback, normalization and
//! deterministic splits.
//!
//! Raw byte intensities 0..=255 are mapped to `[-0.5, 0.5]` with
//! `x/255 - 0.5` at ingestion; every tensor a `Dataset` holds is already
//! normalized.

use std::fs;
use std::path::Path;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

use crate::{Error, Result, Tensor, PIXEL_MAX, PIXEL_MIN};

/// IDX magic for unsigned-byte rank-3 image files.
pub const IDX_IMAGES_MAGIC: u32 = 2051;
/// IDX magic for unsigned-byte rank-1 label files.
pub const IDX_LABELS_MAGIC: u32 = 2049;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    /// Index of each sample in its source dataset, for disjointness audits.
    pub ids: Vec<u64>,
    pub name: String,
    pub source_checksum: u64,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.images.first().map_or(0, Tensor::len)
    }

    fn check_invariants(&self) -> Result<()> {
        if self.images.len() != self.labels.len() {
            return Err(Error::Argument(format!(
                "{} images but {} labels",
                self.images.len(),
                self.labels.len()
            )));
        }
        for (i, img) in self.images.iter().enumerate() {
            if img.data().iter().any(|&p| p < PIXEL_MIN || p > PIXEL_MAX) {
                return Err(Error::Domain(format!(
                    "image {i} has pixels outside [{PIXEL_MIN}, {PIXEL_MAX}]"
                )));
            }
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::Argument(format!(
                "label {bad} out of range for {} classes",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Deterministic split into parts sized by largest-remainder rounding.
    pub fn split(&self, fractions: &[f64], seed: u64) -> Result<Vec<Dataset>> {
        if fractions.is_empty() {
            return Err(Error::Argument("no fractions given".into()));
        }
        if fractions.iter().any(|&f| f < 0.0) {
            return Err(Error::Argument("fractions must be non-negative".into()));
        }
        let total: f64 = fractions.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Argument(format!(
                "fractions sum to {total}, expected 1"
            )));
        }

        let n = self.len();
        let mut sizes: Vec<usize> = fractions.iter().map(|f| (f * n as f64) as usize).collect();
        let assigned: usize = sizes.iter().sum();
        // Largest remainder first; ties broken by part index.
        let mut remainders: Vec<(usize, f64)> = fractions
            .iter()
            .enumerate()
            .map(|(i, f)| (i, f * n as f64 - sizes[i] as f64))
            .collect();
        remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        for k in 0..n - assigned {
            sizes[remainders[k % remainders.len()].0] += 1;
        }

        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut StdRng::seed_from_u64(seed));

        let mut parts = Vec::with_capacity(fractions.len());
        let mut cursor = 0;
        for (p, &size) in sizes.iter().enumerate() {
            let take = &order[cursor..cursor + size];
            cursor += size;
            parts.push(Dataset {
                images: take.iter().map(|&i| self.images[i].clone()).collect(),
                labels: take.iter().map(|&i| self.labels[i]).collect(),
                ids: take.iter().map(|&i| self.ids[i]).collect(),
                name: format!("{}/part{}", self.name, p),
                source_checksum: self.source_checksum,
                num_classes: self.num_classes,
            });
        }
        Ok(parts)
    }
}

/// FNV-1a, used for file provenance checksums and config hashes.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

struct BeReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> BeReader<'a> {
    fn u32(&mut self, what: &str) -> Result<u32> {
        if self.pos + 4 > self.bytes.len() {
            return Err(Error::Parse {
                offset: self.bytes.len(),
                message: format!("truncated while reading {what}"),
            });
        }
        let v = u32::from_be_bytes(self.bytes[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        Ok(v)
    }

    fn payload(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Parse {
                offset: self.bytes.len(),
                message: format!(
                    "truncated payload: {what} needs {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

fn normalize(byte: u8) -> f64 {
    byte as f64 / 255.0 - 0.5
}

/// Loads an IDX image/label file pair (big-endian headers, as published).
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let image_bytes = fs::read(&images_path)?;
    let label_bytes = fs::read(&labels_path)?;

    let mut ir = BeReader {
        bytes: &image_bytes,
        pos: 0,
    };
    let magic = ir.u32("image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: format!("image magic {magic}, expected {IDX_IMAGES_MAGIC}"),
        });
    }
    let count = ir.u32("image count")? as usize;
    let rows = ir.u32("rows")? as usize;
    let cols = ir.u32("cols")? as usize;
    let pixels = ir.payload(count * rows * cols, "image pixels")?;
    if ir.pos != image_bytes.len() {
        return Err(Error::Parse {
            offset: ir.pos,
            message: "trailing bytes after image payload".into(),
        });
    }

    let mut lr = BeReader {
        bytes: &label_bytes,
        pos: 0,
    };
    let magic = lr.u32("label magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: format!("label magic {magic}, expected {IDX_LABELS_MAGIC}"),
        });
    }
    let label_count = lr.u32("label count")? as usize;
    if label_count != count {
        return Err(Error::Parse {
            offset: 4,
            message: format!("{count} images but {label_count} labels"),
        });
    }
    let raw_labels = lr.payload(label_count, "labels")?;
    if lr.pos != label_bytes.len() {
        return Err(Error::Parse {
            offset: lr.pos,
            message: "trailing bytes after label payload".into(),
        });
    }

    let dim = rows * cols;
    let images = (0..count)
        .map(|i| {
            Tensor::from_vec(
                pixels[i * dim..(i + 1) * dim]
                    .iter()
                    .map(|&b| normalize(b))
                    .collect(),
            )
        })
        .collect();
    let labels: Vec<usize> = raw_labels.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);

    let mut checksum_input = image_bytes.clone();
    checksum_input.extend_from_slice(&label_bytes);

    let ds = Dataset {
        ids: (0..count as u64).collect(),
        images,
        labels,
        name: images_path.as_ref().display().to_string(),
        source_checksum: fnv1a(&checksum_input),
        num_classes,
    };
    ds.check_invariants()?;
    Ok(ds)
}

/// Writes a dataset back out in the IDX layout (one row of `dim` columns
/// per image). Pixels are quantized to the 0..=255 grid.
pub fn write_idx(
    dataset: &Dataset,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    let dim = dataset.input_dim();
    let mut images = Vec::with_capacity(16 + dataset.len() * dim);
    images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    images.extend_from_slice(&(dataset.len() as u32).to_be_bytes());
    images.extend_from_slice(&1u32.to_be_bytes());
    images.extend_from_slice(&(dim as u32).to_be_bytes());
    for img in &dataset.images {
        for &p in img.data() {
            images.push(((p + 0.5) * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }

    let mut labels = Vec::with_capacity(8 + dataset.len());
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(dataset.len() as u32).to_be_bytes());
    for &l in &dataset.labels {
        labels.push(l as u8);
    }

    fs::write(images_path, images)?;
    fs::write(labels_path, labels)?;
    Ok(())
}

/// Gaussian class blobs quantized onto the pixel grid: a deterministic,
/// dataset-free stand-in that a dense victim separates at 99%+.
pub fn synth_dataset(classes: usize, per_class: usize, dims: usize, seed: u64) -> Result<Dataset> {
    synth_dataset_with_spread(classes, per_class, dims, seed, 0.1)
}

/// [`synth_dataset`] with an explicit blob standard deviation. Wider
/// blobs keep training gradients alive longer, which grows the victim's
/// logit scale.
pub fn synth_dataset_with_spread(
    classes: usize,
    per_class: usize,
    dims: usize,
    seed: u64,
    std: f64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Argument("need at least 2 classes".into()));
    }
    if dims == 0 {
        return Err(Error::Argument("dims must be positive".into()));
    }
    if !(std > 0.0) {
        return Err(Error::Argument("blob std must be positive".into()));
    }
    let mut rng = StdRng::seed_from_u64(seed);

    // Draw class means until they are pairwise well separated relative to
    // the blob spread, keeping the best candidate set if the budget runs
    // out (low-dimensional configs cannot always reach the target).
    let min_dist = 8.0 * std;
    let draw_means = |rng: &mut StdRng| -> Vec<Vec<f64>> {
        (0..classes)
            .map(|_| (0..dims).map(|_| rng.gen_range(-0.3..0.3)).collect())
            .collect()
    };
    let min_pairwise = |means: &[Vec<f64>]| -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..means.len() {
            for j in i + 1..means.len() {
                let d: f64 = means[i]
                    .iter()
                    .zip(&means[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                best = best.min(d);
            }
        }
        best
    };
    let mut means = draw_means(&mut rng);
    let mut best_sep = min_pairwise(&means);
    for _ in 0..1000 {
        if best_sep >= min_dist {
            break;
        }
        let candidate = draw_means(&mut rng);
        let sep = min_pairwise(&candidate);
        if sep > best_sep {
            means = candidate;
            best_sep = sep;
        }
    }
    let mut images = Vec::with_capacity(classes * per_class);
    let mut labels = Vec::with_capacity(classes * per_class);
    for (class, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            let data: Vec<f64> = mean
                .iter()
                .map(|&m| {
                    // Box-Muller; one normal draw per pixel.
                    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                    let u2: f64 = rng.gen::<f64>();
                    let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                    let raw = (m + std * z).clamp(PIXEL_MIN, PIXEL_MAX);
                    // Quantize to the byte grid so IDX round-trips are exact.
                    normalize(((raw + 0.5) * 255.0).round() as u8)
                })
                .collect();
            images.push(Tensor::from_vec(data));
            labels.push(class);
        }
    }

    let mut checksum_input = Vec::with_capacity(images.len() * dims);
    for img in &images {
        for &p in img.data() {
            checksum_input.push(((p + 0.5) * 255.0).round() as u8);
        }
    }

    let ds = Dataset {
        ids: (0..(classes * per_class) as u64).collect(),
        images,
        labels,
        name: format!("synth-k{classes}-m{dims}-n{per_class}-s{std}"),
        source_checksum: fnv1a(&checksum_input),
        num_classes: classes,
    };
    ds.check_invariants()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    /// Hand-built IDX byte pair for a 2x2-pixel, 3-image set.
    fn reference_idx_bytes() -> (Vec<u8>, Vec<u8>) {
        let mut images = Vec::new();
        images.extend_from_slice(&2051u32.to_be_bytes());
        images.extend_from_slice(&3u32.to_be_bytes());
        images.extend_from_slice(&2u32.to_be_bytes());
        images.extend_from_slice(&2u32.to_be_bytes());
        images.extend_from_slice(&[0, 255, 128, 64, 1, 2, 3, 4, 250, 251, 252, 253]);
        let mut labels = Vec::new();
        labels.extend_from_slice(&2049u32.to_be_bytes());
        labels.extend_from_slice(&3u32.to_be_bytes());
        labels.extend_from_slice(&[7, 0, 3]);
        (images, labels)
    }

    fn write_pair(
        dir: &Path,
        images: &[u8],
        labels: &[u8],
    ) -> (std::path::PathBuf, std::path::PathBuf) {
        let ip = dir.join("imgs.idx");
        let lp = dir.join("lbls.idx");
        fs::write(&ip, images).unwrap();
        fs::write(&lp, labels).unwrap();
        (ip, lp)
    }

    fn tmpdir(tag: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("holmes_data_{tag}"));
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn loads_reference_idx_bytes() {
        let dir = tmpdir("load");
        let (images, labels) = reference_idx_bytes();
        let (ip, lp) = write_pair(&dir, &images, &labels);
        let ds = load_idx(&ip, &lp).unwrap();

        // Byte-level reference read of the same buffers.
        assert_eq!(u32::from_be_bytes(images[0..4].try_into().unwrap()), 2051);
        assert_eq!(u32::from_be_bytes(labels[0..4].try_into().unwrap()), 2049);
        let expected_first_pixel = images[16] as f64 / 255.0 - 0.5;

        assert_eq!(ds.len(), 3);
        assert_eq!(ds.labels, vec![7, 0, 3]);
        assert_eq!(ds.images[0].data()[0], expected_first_pixel);
        assert_eq!(ds.images[0].data()[1], 0.5); // byte 255
        assert!(ds
            .images
            .iter()
            .all(|i| i.data().iter().all(|&p| (-0.5..=0.5).contains(&p))));
    }

    #[test]
    fn rejects_wrong_magics() {
        let dir = tmpdir("magic");
        let (mut images, labels) = reference_idx_bytes();
        images[3] = 0x01; // magic 2049 in the image slot
        let (ip, lp) = write_pair(&dir, &images, &labels);
        assert!(matches!(
            load_idx(&ip, &lp),
            Err(Error::Parse { offset: 0, .. })
        ));

        let (images, mut labels) = reference_idx_bytes();
        labels[3] = 0x03;
        let (ip, lp) = write_pair(&dir, &images, &labels);
        assert!(matches!(
            load_idx(&ip, &lp),
            Err(Error::Parse { offset: 0, .. })
        ));
    }

    #[test]
    fn rejects_count_mismatch() {
        let dir = tmpdir("count");
        let (images, mut labels) = reference_idx_bytes();
        labels[7] = 2;
        labels.pop();
        let (ip, lp) = write_pair(&dir, &images, &labels);
        let err = load_idx(&ip, &lp).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
        assert!(err.to_string().contains("labels"));
    }

    #[test]
    fn rejects_truncated_payload() {
        let dir = tmpdir("trunc");
        let (mut images, labels) = reference_idx_bytes();
        images.truncate(images.len() - 3);
        let (ip, lp) = write_pair(&dir, &images, &labels);
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Parse { .. })));
    }

    #[test]
    fn load_is_byte_deterministic() {
        let dir = tmpdir("det");
        let (images, labels) = reference_idx_bytes();
        let (ip, lp) = write_pair(&dir, &images, &labels);
        let a = load_idx(&ip, &lp).unwrap();
        let b = load_idx(&ip, &lp).unwrap();
        assert_eq!(a.source_checksum, b.source_checksum);
        assert_eq!(a.labels, b.labels);
        assert!(a.images.iter().zip(&b.images).all(|(x, y)| x == y));
    }

    #[test]
    fn synth_is_deterministic_and_in_box() {
        let a = synth_dataset(4, 10, 8, 99).unwrap();
        let b = synth_dataset(4, 10, 8, 99).unwrap();
        assert_eq!(a.len(), 40);
        assert_eq!(a.source_checksum, b.source_checksum);
        assert!(a.images.iter().zip(&b.images).all(|(x, y)| x == y));
        assert!(a
            .images
            .iter()
            .all(|i| i.data().iter().all(|&p| (-0.5..=0.5).contains(&p))));
    }

    #[test]
    fn synth_idx_round_trip_is_exact() {
        let dir = tmpdir("rt");
        let ds = synth_dataset(3, 5, 6, 7).unwrap();
        let ip = dir.join("synth.images.idx");
        let lp = dir.join("synth.labels.idx");
        write_idx(&ds, &ip, &lp).unwrap();
        let back = load_idx(&ip, &lp).unwrap();
        assert_eq!(back.labels, ds.labels);
        for (a, b) in back.images.iter().zip(&ds.images) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn synth_rejects_degenerate_configs() {
        assert!(matches!(synth_dataset(1, 5, 4, 0), Err(Error::Argument(_))));
        // Zero per-class builds an empty dataset; training rejects it later.
        let empty = synth_dataset(3, 0, 4, 0).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn split_is_a_deterministic_partition() {
        let ds = synth_dataset(5, 200, 4, 3).unwrap();
        let parts = ds.split(&[0.8, 0.1, 0.1], 42).unwrap();
        assert_eq!(parts[0].len(), 800);
        assert_eq!(parts[1].len(), 100);
        assert_eq!(parts[2].len(), 100);

        let mut seen = BTreeSet::new();
        for part in &parts {
            for &id in &part.ids {
                assert!(seen.insert(id), "id {id} appears twice");
            }
        }
        assert_eq!(seen.len(), ds.len());

        let again = ds.split(&[0.8, 0.1, 0.1], 42).unwrap();
        for (a, b) in parts.iter().zip(&again) {
            assert_eq!(a.ids, b.ids);
        }
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let ds = synth_dataset(2, 10, 4, 3).unwrap();
        assert!(matches!(ds.split(&[0.5, 0.2], 1), Err(Error::Argument(_))));
        assert!(matches!(
            ds.split(&[1.2, -0.2], 1),
            Err(Error::Argument(_))
        ));
    }
}
