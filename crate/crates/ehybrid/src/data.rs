//! Dataset handling: folder ingestion of binary PGM/PPM images, a seeded
//! synthetic texture generator, and batch assembly.
//!
//! The synthetic task exists so the scattering stream has signal to find at
//! desk scale: each class is band-limited noise at a class-specific
//! orientation and scale, and every sample is circularly shifted at random.
//! Orientation and scale are exactly what first-order scattering measures,
//! while the shifts punish representations without translation stability.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};
use crate::wavelets::{build_filter_bank, MorletParams};

/// Which half of a train/test split a dataset holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn tag(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// A labelled image collection. Every image is a `(1, C, H, W)` tensor with
/// values in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Shape shared by all images, if any image exists.
    pub fn image_shape(&self) -> Option<Shape> {
        self.images.first().map(|t| t.shape())
    }

    /// Checks the container invariants: uniform image shape, labels in
    /// range, one label per image.
    pub fn validate(&self) -> Result<()> {
        if self.images.len() != self.labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                self.images.len(),
                self.labels.len()
            )));
        }
        if let Some(first) = self.image_shape() {
            for (i, img) in self.images.iter().enumerate() {
                if img.shape() != first {
                    return Err(Error::Data(format!(
                        "image {i} has shape {} but the dataset uses {first}",
                        img.shape()
                    )));
                }
            }
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.class_names.len()) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {} classes",
                self.class_names.len()
            )));
        }
        Ok(())
    }

    /// Stacks the given samples into one `(B, C, H, W)` tensor.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let first = self.image_shape().ok_or_else(|| {
            Error::Usage("cannot batch an empty dataset".into())
        })?;
        let per = first.c * first.h * first.w;
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            let img = self.images.get(i).ok_or_else(|| {
                Error::Usage(format!("sample index {i} out of range ({})", self.len()))
            })?;
            data.extend_from_slice(img.data());
        }
        Tensor::from_vec(
            Shape::new(indices.len(), first.c, first.h, first.w),
            data,
        )
    }

    /// Labels of the given samples, in order.
    pub fn label_batch(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }
}

/// Mirrors an image along the horizontal axis.
pub fn flip_horizontal(img: &Tensor) -> Tensor {
    let s = img.shape();
    Tensor::from_fn(s, |n, c, y, x| img.get(n, c, y, s.w - 1 - x))
}

// ---------------------------------------------------------------------------
// Binary PGM (P5) / PPM (P6) decoding.

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn fail(&self, what: &str) -> Error {
        Error::Data(format!(
            "{}: {what} at byte {}",
            self.path.display(),
            self.pos
        ))
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    /// Skips whitespace and `#` comments (which run to end of line).
    fn skip_separators(&mut self) {
        while let Some(b) = self.peek() {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while let Some(c) = self.peek() {
                    self.pos += 1;
                    if c == b'\n' {
                        break;
                    }
                }
            } else {
                break;
            }
        }
    }

    /// Reads one ASCII decimal token.
    fn read_number(&mut self, what: &str) -> Result<usize> {
        self.skip_separators();
        let start = self.pos;
        while self.peek().is_some_and(|b| b.is_ascii_digit()) {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.fail(&format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.fail(&format!("unreadable {what}")))
    }
}

/// Decodes binary PGM/PPM bytes into `(channels, width, height, values)`
/// with values scaled to `[0, 1]`.
fn decode_netpbm(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<f64>)> {
    let mut cur = Cursor { bytes, pos: 0, path };
    let channels = match bytes.get(0..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(cur.fail("expected binary PGM/PPM magic P5 or P6")),
    };
    cur.pos = 2;
    let width = cur.read_number("width")?;
    let height = cur.read_number("height")?;
    let maxval = cur.read_number("maxval")?;
    if width == 0 || height == 0 {
        return Err(cur.fail("zero image dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(cur.fail("maxval must be in 1..=255"));
    }
    // Exactly one separator byte between the header and the raster.
    if !cur.peek().is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(cur.fail("expected single whitespace before pixel data"));
    }
    cur.pos += 1;
    let need = width * height * channels;
    let raster = bytes.get(cur.pos..cur.pos + need).ok_or_else(|| {
        Error::Data(format!(
            "{}: truncated pixel data at byte {} (need {need} bytes, file has {})",
            path.display(),
            cur.pos,
            bytes.len().saturating_sub(cur.pos)
        ))
    })?;
    let scale = 1.0 / maxval as f64;
    // Interleaved RGB (or plain gray) to channel-major planes.
    let mut values = vec![0.0; need];
    for (i, &b) in raster.iter().enumerate() {
        let c = i % channels;
        let pixel = i / channels;
        values[c * width * height + pixel] = b as f64 * scale;
    }
    Ok((channels, width, height, values))
}

/// Nearest-neighbour resize of one channel-major plane set.
fn resize_nearest(
    values: &[f64],
    channels: usize,
    width: usize,
    height: usize,
    target: usize,
) -> Vec<f64> {
    if width == target && height == target {
        return values.to_vec();
    }
    let mut out = vec![0.0; channels * target * target];
    for c in 0..channels {
        let src = &values[c * width * height..(c + 1) * width * height];
        let dst = &mut out[c * target * target..(c + 1) * target * target];
        for y in 0..target {
            let sy = y * height / target;
            for x in 0..target {
                let sx = x * width / target;
                dst[y * target + x] = src[sy * width + sx];
            }
        }
    }
    out
}

fn is_netpbm_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm") || e.eq_ignore_ascii_case("ppm"))
}

/// Loads a folder of per-class subdirectories of binary PGM/PPM images.
///
/// Classes and files are both enumerated in lexicographic order; every
/// image is scaled to `[0, 1]` and resized (nearest-neighbour) to
/// `resolution` x `resolution`.
pub fn load_image_folder(root: &Path, resolution: usize, split: Split) -> Result<Dataset> {
    if resolution == 0 {
        return Err(Error::Config("resolution must be positive".into()));
    }
    let mut class_dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", root.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::Data(format!(
            "no class directories under {}",
            root.display()
        )));
    }
    let mut dataset = Dataset {
        images: Vec::new(),
        labels: Vec::new(),
        class_names: Vec::new(),
        split,
    };
    let mut channels = None;
    for (label, dir) in class_dirs.iter().enumerate() {
        let class_name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", dir.display())))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_netpbm_file(p))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Data(format!(
                "class directory {} holds no PGM/PPM images",
                dir.display()
            )));
        }
        for file in files {
            let bytes = fs::read(&file)
                .map_err(|e| Error::Data(format!("cannot read {}: {e}", file.display())))?;
            let (c, w, h, values) = decode_netpbm(&bytes, &file)?;
            match channels {
                None => channels = Some(c),
                Some(expect) if expect != c => {
                    return Err(Error::Data(format!(
                        "{} has {c} channels but the dataset uses {expect}",
                        file.display()
                    )))
                }
                _ => {}
            }
            let resized = resize_nearest(&values, c, w, h, resolution);
            dataset.images.push(Tensor::from_vec(
                Shape::new(1, c, resolution, resolution),
                resized,
            )?);
            dataset.labels.push(label);
        }
        dataset.class_names.push(class_name);
    }
    dataset.validate()?;
    Ok(dataset)
}

// ---------------------------------------------------------------------------
// Synthetic oriented textures.

/// Circular cross-correlation of one plane with a small kernel.
fn circular_filter(plane: &[f64], side: usize, kernel: &[f64], support: usize) -> Vec<f64> {
    let half = (support / 2) as isize;
    let n = side as isize;
    let mut out = vec![0.0; side * side];
    for y in 0..side {
        for x in 0..side {
            let mut acc = 0.0;
            for ky in 0..support {
                let iy = (y as isize + ky as isize - half).rem_euclid(n) as usize;
                let row = &kernel[ky * support..(ky + 1) * support];
                for (kx, &kv) in row.iter().enumerate() {
                    let ix = (x as isize + kx as isize - half).rem_euclid(n) as usize;
                    acc += kv * plane[iy * side + ix];
                }
            }
            out[y * side + x] = acc;
        }
    }
    out
}

/// Generates the oriented-texture task: class `k` is white noise band-pass
/// filtered at orientation `k*pi/K` and a class-specific dyadic scale, with
/// a random circular shift per sample. Returns an 80/20 train/test split.
pub fn generate_texture_dataset(
    classes: usize,
    per_class: usize,
    resolution: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if classes == 0 || classes > 16 {
        return Err(Error::Config(format!(
            "texture class count must be in 1..=16, got {classes}"
        )));
    }
    if resolution == 0 || resolution % 32 != 0 {
        return Err(Error::Config(format!(
            "texture resolution must be a positive multiple of 32, got {resolution}"
        )));
    }
    if per_class == 0 {
        return Err(Error::Config("per_class must be positive".into()));
    }
    // Oriented band-pass kernels: the real parts of a Morlet bank whose
    // angle grid is exactly k*pi/K.
    let params = MorletParams {
        support: resolution - 1,
        ..MorletParams::default()
    };
    let bank = build_filter_bank(3, classes, 1, &params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train_per_class = (per_class * 4) / 5;
    let mut train = Dataset {
        images: Vec::new(),
        labels: Vec::new(),
        class_names: (0..classes).map(|k| format!("texture{k:02}")).collect(),
        split: Split::Train,
    };
    let mut test = Dataset {
        images: Vec::new(),
        labels: Vec::new(),
        class_names: train.class_names.clone(),
        split: Split::Test,
    };
    for k in 0..classes {
        // Scale stays away from j=0, which aliases at these parameters.
        let j = rng.random_range(1..=2usize);
        let filter = bank.psi(j, k);
        let kernel: Vec<f64> = filter.re().to_vec();
        let support = filter.support();
        for s in 0..per_class {
            let noise: Vec<f64> = (0..resolution * resolution)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let response = circular_filter(&noise, resolution, &kernel, support);
            let dy = rng.random_range(0..resolution);
            let dx = rng.random_range(0..resolution);
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for &v in &response {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            let span = (hi - lo).max(1e-12);
            let img = Tensor::from_fn(Shape::new(1, 1, resolution, resolution), |_, _, y, x| {
                let sy = (y + dy) % resolution;
                let sx = (x + dx) % resolution;
                (response[sy * resolution + sx] - lo) / span
            });
            if s < train_per_class {
                train.images.push(img);
                train.labels.push(k);
            } else {
                test.images.push(img);
                test.labels.push(k);
            }
        }
    }
    train.validate()?;
    test.validate()?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scattering::{scatter, PadMode, ScatteringConfig};
    use std::io::Write;

    fn ppm_bytes(width: usize, height: usize, pixels: &[(u8, u8, u8)]) -> Vec<u8> {
        let mut bytes = format!("P6\n{width} {height}\n255\n").into_bytes();
        for &(r, g, b) in pixels {
            bytes.extend([r, g, b]);
        }
        bytes
    }

    fn pgm_bytes(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
        let mut bytes = format!("P5\n# comment\n{width} {height}\n255\n").into_bytes();
        bytes.extend(pixels);
        bytes
    }

    fn scratch_dir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!(
            "ehybrid-data-{tag}-{}",
            std::process::id()
        ));
        if dir.exists() {
            fs::remove_dir_all(&dir).unwrap();
        }
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn p6_scales_pixels_to_unit_range() {
        let bytes = ppm_bytes(2, 1, &[(255, 0, 0), (0, 128, 255)]);
        let (c, w, h, values) = decode_netpbm(&bytes, Path::new("mem.ppm")).unwrap();
        assert_eq!((c, w, h), (3, 2, 1));
        // Channel-major planes: R = [1, 0], G = [0, 128/255], B = [0, 1].
        assert_eq!(values[0], 1.0);
        assert_eq!(values[1], 0.0);
        assert_eq!(values[2], 0.0);
        assert!((values[3] - 128.0 / 255.0).abs() < 1e-12);
        assert_eq!(values[5], 1.0);
    }

    #[test]
    fn p5_reads_comments_and_gray_planes() {
        let bytes = pgm_bytes(2, 2, &[0, 51, 102, 255]);
        let (c, w, h, values) = decode_netpbm(&bytes, Path::new("mem.pgm")).unwrap();
        assert_eq!((c, w, h), (1, 2, 2));
        assert!((values[1] - 0.2).abs() < 1e-12);
        assert_eq!(values[3], 1.0);
    }

    #[test]
    fn corrupt_headers_cite_the_byte_offset() {
        let err = decode_netpbm(b"P7 2 2 255 ", Path::new("bad.pgm")).unwrap_err();
        assert!(err.to_string().contains("byte 0"), "{err}");

        let err = decode_netpbm(b"P5\n2 x", Path::new("bad.pgm")).unwrap_err();
        assert!(err.to_string().contains("byte 5"), "{err}");

        let mut short = pgm_bytes(4, 4, &[7; 16]);
        short.truncate(short.len() - 3);
        let err = decode_netpbm(&short, Path::new("short.pgm")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("truncated"), "{msg}");
        assert!(msg.contains("short.pgm"), "{msg}");
    }

    #[test]
    fn nearest_resize_repeats_blocks() {
        let values = vec![1.0, 2.0, 3.0, 4.0];
        let out = resize_nearest(&values, 1, 2, 2, 4);
        assert_eq!(
            out,
            vec![
                1.0, 1.0, 2.0, 2.0, //
                1.0, 1.0, 2.0, 2.0, //
                3.0, 3.0, 4.0, 4.0, //
                3.0, 3.0, 4.0, 4.0,
            ]
        );
    }

    #[test]
    fn folder_loading_orders_classes_and_files_lexicographically() {
        let root = scratch_dir("folder");
        for class in ["beta", "alpha"] {
            let dir = root.join(class);
            fs::create_dir_all(&dir).unwrap();
            for i in 0..3 {
                let level = if class == "alpha" { 0 } else { 255 };
                let bytes = ppm_bytes(2, 2, &[(level, level, level); 4]);
                let mut f = fs::File::create(dir.join(format!("img{i}.ppm"))).unwrap();
                f.write_all(&bytes).unwrap();
            }
        }
        let dataset = load_image_folder(&root, 4, Split::Train).unwrap();
        assert_eq!(dataset.len(), 6);
        assert_eq!(dataset.labels, vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(dataset.class_names, vec!["alpha", "beta"]);
        assert_eq!(dataset.image_shape().unwrap(), Shape::new(1, 3, 4, 4));
        // alpha images are black, beta images white.
        assert_eq!(dataset.images[0].get(0, 0, 0, 0), 0.0);
        assert_eq!(dataset.images[3].get(0, 0, 0, 0), 1.0);
        fs::remove_dir_all(&root).unwrap();
    }

    #[test]
    fn empty_class_directories_are_rejected() {
        let root = scratch_dir("empty");
        fs::create_dir_all(root.join("vacant")).unwrap();
        let err = load_image_folder(&root, 4, Split::Train).unwrap_err();
        assert!(err.to_string().contains("vacant"), "{err}");
        fs::remove_dir_all(&root).unwrap();
    }

    #[test]
    fn flip_is_an_involution_and_reverses_rows() {
        let img = Tensor::from_fn(Shape::new(1, 1, 2, 3), |_, _, y, x| {
            (y * 3 + x) as f64
        });
        let flipped = flip_horizontal(&img);
        assert_eq!(flipped.get(0, 0, 0, 0), 2.0);
        assert_eq!(flipped.get(0, 0, 0, 2), 0.0);
        assert_eq!(flip_horizontal(&flipped).data(), img.data());
    }

    #[test]
    fn batches_stack_samples_in_index_order() {
        let (train, _) = generate_texture_dataset(2, 5, 32, 9).unwrap();
        let batch = train.batch(&[3, 0]).unwrap();
        assert_eq!(batch.shape(), Shape::new(2, 1, 32, 32));
        assert_eq!(batch.get(0, 0, 7, 7), train.images[3].get(0, 0, 7, 7));
        assert_eq!(batch.get(1, 0, 7, 7), train.images[0].get(0, 0, 7, 7));
        assert_eq!(train.label_batch(&[3, 0]), vec![train.labels[3], train.labels[0]]);
    }

    #[test]
    fn texture_split_sizes_follow_the_80_20_rule() {
        let (train, test) = generate_texture_dataset(8, 250, 32, 0).unwrap();
        assert_eq!(train.len(), 1600);
        assert_eq!(test.len(), 400);
        assert_eq!(train.split, Split::Train);
        assert_eq!(test.split, Split::Test);
        assert_eq!(train.image_shape().unwrap(), Shape::new(1, 1, 32, 32));
        for ds in [&train, &test] {
            ds.validate().unwrap();
            for img in &ds.images {
                let (lo, hi) = img
                    .data()
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| {
                        (l.min(v), h.max(v))
                    });
                assert!(lo >= 0.0 && hi <= 1.0, "values in [{lo}, {hi}]");
            }
        }
    }

    #[test]
    fn same_seed_regenerates_identical_datasets() {
        let (a_train, a_test) = generate_texture_dataset(3, 10, 32, 42).unwrap();
        let (b_train, b_test) = generate_texture_dataset(3, 10, 32, 42).unwrap();
        assert_eq!(a_train.labels, b_train.labels);
        assert_eq!(a_test.labels, b_test.labels);
        for (a, b) in a_train.images.iter().zip(&b_train.images) {
            assert_eq!(a.data(), b.data());
        }
        let (c_train, _) = generate_texture_dataset(3, 10, 32, 43).unwrap();
        assert_ne!(a_train.images[0].data(), c_train.images[0].data());
    }

    #[test]
    fn texture_arguments_are_validated() {
        assert!(generate_texture_dataset(0, 10, 32, 0).is_err());
        assert!(generate_texture_dataset(17, 10, 32, 0).is_err());
        assert!(generate_texture_dataset(4, 10, 33, 0).is_err());
        assert!(generate_texture_dataset(4, 0, 32, 0).is_err());
    }

    #[test]
    fn same_class_pairs_scatter_closer_than_cross_class_pairs() {
        let (train, _) = generate_texture_dataset(4, 10, 32, 7).unwrap();
        let cfg = ScatteringConfig {
            scales: 3,
            angles: 8,
            phases: 4,
            order: 1,
            include_order0: true,
            pad: PadMode::Reflect,
        };
        let params = MorletParams {
            support: 31,
            ..MorletParams::default()
        };
        let bank = build_filter_bank(3, 8, 4, &params).unwrap();
        let coeffs: Vec<Vec<f64>> = train
            .images
            .iter()
            .map(|img| {
                scatter(img, &bank, &cfg)
                    .unwrap()
                    .coefficients
                    .data()
                    .to_vec()
            })
            .collect();
        let l2 = |a: &[f64], b: &[f64]| {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut same_total = 0.0;
        let mut cross_total = 0.0;
        for _ in 0..100 {
            // An anchor, a same-class partner, and a cross-class partner.
            let a = rng.random_range(0..train.len());
            let same = loop {
                let j = rng.random_range(0..train.len());
                if j != a && train.labels[j] == train.labels[a] {
                    break j;
                }
            };
            let cross = loop {
                let j = rng.random_range(0..train.len());
                if train.labels[j] != train.labels[a] {
                    break j;
                }
            };
            same_total += l2(&coeffs[a], &coeffs[same]);
            cross_total += l2(&coeffs[a], &coeffs[cross]);
        }
        assert!(
            same_total < cross_total,
            "mean same-class distance {} should undercut cross-class {}",
            same_total / 100.0,
            cross_total / 100.0
        );
    }
}
