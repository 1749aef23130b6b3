use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::image::load_image;
use crate::error::{Error, Result};
use crate::measure::SignalVector;
use crate::rng::{self, Rng};
use crate::tensor::Tensor4;
use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Augment {
    /// Random horizontal and vertical flips.
    pub flip: bool,
    /// Random 90° rotation.
    pub rotate: bool,
    /// Extra copies of each image at 3/4 and 1/2 scale.
    pub rescale: bool,
}

impl Augment {
    pub fn all() -> Self {
        Self { flip: true, rotate: true, rescale: true }
    }

    pub fn any(&self) -> bool {
        self.flip || self.rotate || self.rescale
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub patch_size: usize,
    pub stride: usize,
    /// Applied to the training split only.
    pub augment: Augment,
    /// Fractions of images for train / val / test.
    pub split: [f64; 3],
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { patch_size: 40, stride: 40, augment: Augment::default(), split: [0.8, 0.1, 0.1], seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchDataset {
    /// `(N, s, s, 1)` in `[0, 1]`, ordered train, val, test.
    pub patches: Tensor4<Real>,
    /// Split of every patch.
    pub splits: Vec<Split>,
    /// Index into `images` of every patch's source.
    pub sources: Vec<usize>,
    pub images: Vec<String>,
    pub config: DatasetConfig,
}

impl PatchDataset {
    pub fn count(&self, split: Split) -> usize {
        self.splits.iter().filter(|s| **s == split).count()
    }

    pub fn split(&self, split: Split) -> Tensor4<Real> {
        let idx: Vec<usize> = (0..self.splits.len()).filter(|&i| self.splits[i] == split).collect();
        self.patches.gather(&idx)
    }

    /// Source images of a split, in order of first appearance.
    pub fn split_images(&self, split: Split) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for (s, src) in self.splits.iter().zip(&self.sources) {
            let name = self.images[*src].as_str();
            if *s == split && !out.contains(&name) {
                out.push(name);
            }
        }
        out
    }
}

/// Every `s x s` window at multiples of `stride` that fits in the image.
pub fn extract_patches(img: &SignalVector<f64>, s: usize, stride: usize) -> Vec<Vec<f64>> {
    let (h, w) = img.shape();
    let mut out = Vec::new();
    if s == 0 || stride == 0 || s > h || s > w {
        return out;
    }
    let v = img.values();
    for y in (0..=h - s).step_by(stride) {
        for x in (0..=w - s).step_by(stride) {
            out.push((0..s).flat_map(|i| v[(y + i) * w + x..(y + i) * w + x + s].iter().copied()).collect());
        }
    }
    out
}

/// Bilinear resize by `factor`.
fn rescale(img: &SignalVector<f64>, factor: f64) -> SignalVector<f64> {
    let (h, w) = img.shape();
    let (nh, nw) = (((h as f64) * factor).round().max(1.0) as usize, ((w as f64) * factor).round().max(1.0) as usize);
    let v = img.values();
    let at = |y: usize, x: usize| v[y.min(h - 1) * w + x.min(w - 1)];
    let mut out = Vec::with_capacity(nh * nw);
    for i in 0..nh {
        let sy = ((i as f64 + 0.5) / factor - 0.5).max(0.0);
        let (y0, fy) = (sy.floor() as usize, sy.fract());
        for j in 0..nw {
            let sx = ((j as f64 + 0.5) / factor - 0.5).max(0.0);
            let (x0, fx) = (sx.floor() as usize, sx.fract());
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
            let bottom = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    SignalVector::new(nh, nw, out).expect("length matches shape")
}

/// Flips each axis and rotates by 90° independently with probability 1/2.
fn augment_patch(p: &[f64], s: usize, aug: Augment, r: &mut Rng) -> Vec<f64> {
    let mut out = p.to_vec();
    if aug.flip {
        if r.random_bool(0.5) {
            out = (0..s * s).map(|k| out[(k / s) * s + (s - 1 - k % s)]).collect();
        }
        if r.random_bool(0.5) {
            out = (0..s * s).map(|k| out[(s - 1 - k / s) * s + k % s]).collect();
        }
    }
    if aug.rotate && r.random_bool(0.5) {
        // (i, j) <- (j, s - 1 - i)
        out = (0..s * s).map(|k| out[(k % s) * s + (s - 1 - k / s)]).collect();
    }
    out
}

/// Assigns whole images to splits. With fewer than three images everything
/// goes to the training split.
fn assign_splits(count: usize, ratios: [f64; 3], r: &mut Rng) -> Result<Vec<Split>> {
    if ratios.iter().any(|v| !(*v >= 0.0)) || ratios.iter().sum::<f64>() <= 0.0 {
        return Err(Error::Config(format!("bad split ratios {ratios:?}")));
    }
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(r);
    let mut out = vec![Split::Train; count];
    if count < 3 {
        return Ok(out);
    }
    let total: f64 = ratios.iter().sum();
    let take = |f: f64| if f > 0.0 { ((f / total * count as f64).round() as usize).max(1) } else { 0 };
    let n_val = take(ratios[1]);
    let n_test = take(ratios[2]).min(count - 1 - n_val.min(count - 1));
    let n_val = n_val.min(count - 1 - n_test);
    for &i in &order[..n_val] {
        out[i] = Split::Val;
    }
    for &i in &order[n_val..n_val + n_test] {
        out[i] = Split::Test;
    }
    Ok(out)
}

/// Builds patches from named in-memory images.
pub fn build_dataset_from_images(images: &[(String, SignalVector<f64>)], cfg: &DatasetConfig) -> Result<PatchDataset> {
    if cfg.patch_size == 0 || cfg.stride == 0 {
        return Err(Error::Config("patch size and stride must be positive".into()));
    }
    if images.is_empty() {
        return Err(Error::Argument("no images".into()));
    }
    let s = cfg.patch_size;
    let assigned = assign_splits(images.len(), cfg.split, &mut rng::stream(cfg.seed, "dataset-split"))?;
    let mut aug_rng = rng::stream(cfg.seed, "dataset-augment");
    let mut buckets: [Vec<(usize, Vec<f64>)>; 3] = Default::default();
    for (i, (_, img)) in images.iter().enumerate() {
        let split = assigned[i];
        let train_aug = split == Split::Train && cfg.augment.any();
        let mut versions = vec![img.clone()];
        if train_aug && cfg.augment.rescale {
            versions.push(rescale(img, 0.75));
            versions.push(rescale(img, 0.5));
        }
        for v in &versions {
            for p in extract_patches(v, s, cfg.stride) {
                let p = if train_aug { augment_patch(&p, s, cfg.augment, &mut aug_rng) } else { p };
                buckets[split as usize].push((i, p));
            }
        }
    }
    let total: usize = buckets.iter().map(Vec::len).sum();
    let mut data = Vec::with_capacity(total * s * s);
    let mut splits = Vec::with_capacity(total);
    let mut sources = Vec::with_capacity(total);
    for (k, split) in [Split::Train, Split::Val, Split::Test].into_iter().enumerate() {
        for (src, p) in &buckets[k] {
            data.extend(p.iter().map(|v| *v as Real));
            splits.push(split);
            sources.push(*src);
        }
    }
    Ok(PatchDataset {
        patches: Tensor4::new([total, s, s, 1], data)?,
        splits,
        sources,
        images: images.iter().map(|(n, _)| n.clone()).collect(),
        config: cfg.clone(),
    })
}

/// Reads every `.pgm`, `.raw` and `.f32` file of `dir` (sorted by name).
pub fn build_dataset(dir: impl AsRef<Path>, cfg: &DatasetConfig) -> Result<PatchDataset> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(), Some("pgm" | "raw" | "f32"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Argument(format!("{} holds no .pgm/.raw/.f32 images", dir.display())));
    }
    let images = paths
        .iter()
        .map(|p| Ok((p.file_name().unwrap_or_default().to_string_lossy().into_owned(), load_image(p)?)))
        .collect::<Result<Vec<_>>>()?;
    build_dataset_from_images(&images, cfg)
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    patch_size: usize,
    count: usize,
    counts: Counts,
    config: DatasetConfig,
    images: Vec<String>,
    splits: Vec<Split>,
    sources: Vec<usize>,
    data: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
struct Counts {
    train: usize,
    val: usize,
    test: usize,
}

/// Writes `patches.bin` (f32 LE) and `dataset.json` into `dir`; returns the
/// manifest path.
pub fn save_dataset(ds: &PatchDataset, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let blob = dir.join("patches.bin");
    let bytes: Vec<u8> = ds.patches.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(&blob, bytes).map_err(|e| Error::io(&blob, e))?;
    let manifest = Manifest {
        patch_size: ds.config.patch_size,
        count: ds.splits.len(),
        counts: Counts { train: ds.count(Split::Train), val: ds.count(Split::Val), test: ds.count(Split::Test) },
        config: ds.config.clone(),
        images: ds.images.clone(),
        splits: ds.splits.clone(),
        sources: ds.sources.clone(),
        data: "patches.bin".into(),
    };
    let path = dir.join("dataset.json");
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    writeln!(f, "{text}").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn load_dataset(manifest: impl AsRef<Path>) -> Result<PatchDataset> {
    let path = manifest.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    let blob = path.parent().unwrap_or(Path::new(".")).join(&m.data);
    let bytes = fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
    let s = m.patch_size;
    if bytes.len() != m.count * s * s * 4 || m.splits.len() != m.count || m.sources.len() != m.count {
        return Err(Error::format(path, "patch count does not match the data"));
    }
    if m.sources.iter().any(|&i| i >= m.images.len()) {
        return Err(Error::format(path, "patch source index out of range"));
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok(PatchDataset {
        patches: Tensor4::new([m.count, s, s, 1], data)?,
        splits: m.splits,
        sources: m.sources,
        images: m.images,
        config: m.config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::synth::synthetic_image;

    fn images(count: usize, h: usize, w: usize) -> Vec<(String, SignalVector<f64>)> {
        (0..count).map(|i| (format!("img{i}"), synthetic_image(h, w, i as u64))).collect()
    }

    #[test]
    fn non_overlapping_count() {
        let imgs = vec![
            ("a".to_string(), synthetic_image(80, 80, 1)),
            ("b".to_string(), synthetic_image(90, 130, 2)),
            ("c".to_string(), synthetic_image(41, 39, 3)),
        ];
        let cfg = DatasetConfig { split: [1.0, 0.0, 0.0], ..Default::default() };
        let ds = build_dataset_from_images(&imgs, &cfg).unwrap();
        assert_eq!(ds.splits.len(), 4 + 2 * 3);
        let one = build_dataset_from_images(&imgs[..1], &cfg).unwrap();
        assert_eq!(one.splits.len(), 4);
    }

    #[test]
    fn patches_copy_the_right_pixels() {
        let img = SignalVector::new(4, 4, (0..16).map(|v| v as f64).collect()).unwrap();
        let p = extract_patches(&img, 2, 2);
        assert_eq!(p, vec![vec![0.0, 1.0, 4.0, 5.0], vec![2.0, 3.0, 6.0, 7.0], vec![8.0, 9.0, 12.0, 13.0], vec![
            10.0, 11.0, 14.0, 15.0
        ]]);
        assert_eq!(extract_patches(&img, 3, 1).len(), 4);
    }

    #[test]
    fn splits_are_disjoint_by_image() {
        let ds = build_dataset_from_images(&images(10, 48, 48), &DatasetConfig { stride: 8, ..Default::default() }).unwrap();
        let train = ds.split_images(Split::Train);
        let val = ds.split_images(Split::Val);
        let test = ds.split_images(Split::Test);
        assert_eq!((train.len(), val.len(), test.len()), (8, 1, 1));
        for v in &val {
            assert!(!train.contains(v) && !test.contains(v));
        }
        assert!(!train.contains(&test[0]));
    }

    #[test]
    fn augmentation_keeps_pixel_multiset_and_is_seeded() {
        let imgs = images(3, 40, 40);
        let cfg = DatasetConfig { augment: Augment { flip: true, rotate: true, rescale: false }, split: [1.0, 0.0, 0.0], ..Default::default() };
        let a = build_dataset_from_images(&imgs, &cfg).unwrap();
        let plain = build_dataset_from_images(&imgs, &DatasetConfig { augment: Augment::default(), ..cfg.clone() }).unwrap();
        assert_eq!(a, build_dataset_from_images(&imgs, &cfg).unwrap());
        for i in 0..3 {
            let mut x = a.patches.sample(i).to_vec();
            let mut y = plain.patches.sample(i).to_vec();
            x.sort_by(f32::total_cmp);
            y.sort_by(f32::total_cmp);
            assert_eq!(x, y);
        }
        assert_ne!(a.patches, plain.patches);
        let big = images(3, 80, 80);
        let r = build_dataset_from_images(&big, &DatasetConfig { augment: Augment::all(), ..cfg }).unwrap();
        // 4 + 1 (at 60x60) + 1 (at 40x40) per image
        assert_eq!(r.splits.len(), 3 * 6);
    }

    #[test]
    fn rotation_and_flips_are_exact_permutations() {
        let p: Vec<f64> = (0..9).map(|v| v as f64).collect();
        let rot = augment_patch(&p, 3, Augment { flip: false, rotate: true, rescale: false }, &mut rng::from_seed(0));
        let flips = augment_patch(&p, 3, Augment { flip: true, rotate: false, rescale: false }, &mut rng::from_seed(0));
        for out in [rot, flips] {
            let mut s = out.clone();
            s.sort_by(f64::total_cmp);
            assert_eq!(s, p);
        }
    }

    #[test]
    fn save_load_roundtrip_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = images(4, 40, 40);
        let cfg = DatasetConfig { stride: 20, ..Default::default() };
        let ds = build_dataset_from_images(&imgs, &cfg).unwrap();
        let p1 = save_dataset(&ds, dir.path().join("a")).unwrap();
        let p2 = save_dataset(&build_dataset_from_images(&imgs, &cfg).unwrap(), dir.path().join("b")).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        assert_eq!(fs::read(dir.path().join("a/patches.bin")).unwrap(), fs::read(dir.path().join("b/patches.bin")).unwrap());
        assert_eq!(load_dataset(&p1).unwrap(), ds);
    }

    #[test]
    fn unreadable_image_is_named() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("broken.pgm"), b"P5\n2 2\n255\n").unwrap();
        let e = build_dataset(dir.path(), &DatasetConfig::default()).unwrap_err().to_string();
        assert!(e.contains("broken.pgm"), "{e}");
    }
}
