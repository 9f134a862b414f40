//! Location pairs: a procedural synthetic source, PNG directory loading,
//! standardisation and batch construction.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Branch;

/// Matching ground and satellite images of one location, each `[3, H, W]`.
#[derive(Debug, Clone)]
pub struct LocationPair {
    pub location_id: usize,
    pub name: String,
    pub ground: Tensor<f32>,
    pub satellite: Tensor<f32>,
}

impl LocationPair {
    pub fn image(&self, branch: Branch) -> &Tensor<f32> {
        match branch {
            Branch::Ground => &self.ground,
            Branch::Satellite => &self.satellite,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pairs: Vec<LocationPair>,
    image_hw: [usize; 2],
}

impl Dataset {
    pub fn new(pairs: Vec<LocationPair>) -> Result<Self> {
        let first = pairs.first().ok_or_else(|| Error::Data("no pairs found".into()))?;
        let shape = first.ground.shape().to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::Data(format!("images must be [3, H, W], got {shape:?}")));
        }
        let mut ids = BTreeSet::new();
        for p in &pairs {
            if p.ground.shape() != shape.as_slice() || p.satellite.shape() != shape.as_slice() {
                return Err(Error::Data(format!(
                    "location {:?}: image shapes {:?} / {:?} differ from {shape:?}",
                    p.name,
                    p.ground.shape(),
                    p.satellite.shape()
                )));
            }
            if !ids.insert(p.location_id) {
                return Err(Error::Data(format!("duplicate location id {}", p.location_id)));
            }
        }
        Ok(Dataset {
            pairs,
            image_hw: [shape[1], shape[2]],
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[LocationPair] {
        &self.pairs
    }

    pub fn image_hw(&self) -> [usize; 2] {
        self.image_hw
    }

    pub fn images(&self, branch: Branch) -> Vec<&Tensor<f32>> {
        self.pairs.iter().map(|p| p.image(branch)).collect()
    }

    /// First `n_train` locations for training, the rest held out.
    pub fn split(self, n_train: usize) -> Result<(Dataset, Dataset)> {
        if n_train == 0 || n_train >= self.pairs.len() {
            return Err(Error::Data(format!(
                "cannot split {} locations with {n_train} for training",
                self.pairs.len()
            )));
        }
        let mut pairs = self.pairs;
        let test = pairs.split_off(n_train);
        Ok((Dataset::new(pairs)?, Dataset::new(test)?))
    }

    /// Stack the pairs at `indices` into a batch. Location ids must be distinct.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        if indices.is_empty() {
            return Err(Error::Batch("empty batch".into()));
        }
        let mut seen = BTreeSet::new();
        let mut ids = Vec::with_capacity(indices.len());
        for &i in indices {
            let p = self
                .pairs
                .get(i)
                .ok_or_else(|| Error::Batch(format!("pair index {i} out of range for {} pairs", self.len())))?;
            if !seen.insert(p.location_id) {
                return Err(Error::Batch(format!("location {} appears twice in one batch", p.location_id)));
            }
            ids.push(p.location_id);
        }
        let g: Vec<_> = indices.iter().map(|&i| &self.pairs[i].ground).collect();
        let s: Vec<_> = indices.iter().map(|&i| &self.pairs[i].satellite).collect();
        Ok(Batch {
            ground: Tensor::stack(&g)?,
            satellite: Tensor::stack(&s)?,
            ids,
        })
    }

    pub fn standardize(&mut self, stats: &ChannelStats) {
        for p in &mut self.pairs {
            stats.ground.apply(&mut p.ground);
            stats.satellite.apply(&mut p.satellite);
        }
    }
}

/// `M` matched pairs: row `i` of both tensors shows location `ids[i]`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ground: Tensor<f32>,
    pub satellite: Tensor<f32>,
    pub ids: Vec<usize>,
}

/// `m` distinct pairs drawn without replacement.
pub fn sample_batch<R: Rng>(dataset: &Dataset, m: usize, rng: &mut R) -> Result<Batch> {
    if m > dataset.len() || m == 0 {
        return Err(Error::Batch(format!(
            "cannot draw a batch of {m} from {} pairs",
            dataset.len()
        )));
    }
    let idx = rand::seq::index::sample(rng, dataset.len(), m).into_vec();
    dataset.batch(&idx)
}

/// Index lists for one epoch: a seeded shuffle cut into `floor(n / m)` full
/// batches.
pub fn epoch_batches(n: usize, m: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if m < 2 || m > n {
        return Err(Error::Batch(format!("batch size {m} does not fit {n} pairs")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    Ok(order.chunks_exact(m).map(<[usize]>::to_vec).collect())
}

/// Per-channel mean and standard deviation of one branch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Moments {
    fn default() -> Self {
        Moments {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

impl Moments {
    fn of<'a>(images: impl Iterator<Item = &'a Tensor<f32>>) -> Self {
        let mut sum = [0f64; 3];
        let mut sq = [0f64; 3];
        let mut count = 0usize;
        for img in images {
            let plane = img.len() / 3;
            for (c, chunk) in img.data().chunks_exact(plane).enumerate() {
                for &v in chunk {
                    sum[c] += v as f64;
                    sq[c] += (v as f64) * (v as f64);
                }
            }
            count += plane;
        }
        let n = count.max(1) as f64;
        let mut m = Moments::default();
        for c in 0..3 {
            let mean = sum[c] / n;
            let var = (sq[c] / n - mean * mean).max(0.0);
            m.mean[c] = mean as f32;
            m.std[c] = if var > 1e-12 { var.sqrt() as f32 } else { 1.0 };
        }
        m
    }

    pub fn apply(&self, img: &mut Tensor<f32>) {
        let plane = img.len() / 3;
        for (c, chunk) in img.data_mut().chunks_exact_mut(plane).enumerate() {
            for v in chunk {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
    }
}

/// Standardisation statistics, computed on a training split.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ChannelStats {
    pub ground: Moments,
    pub satellite: Moments,
}

impl ChannelStats {
    pub fn compute(train: &Dataset) -> Self {
        ChannelStats {
            ground: Moments::of(train.pairs.iter().map(|p| &p.ground)),
            satellite: Moments::of(train.pairs.iter().map(|p| &p.satellite)),
        }
    }

    pub fn branch(&self, branch: Branch) -> &Moments {
        match branch {
            Branch::Ground => &self.ground,
            Branch::Satellite => &self.satellite,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_locations: usize,
    pub image_size: usize,
    pub latent_dim: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_locations: 640,
            image_size: 64,
            latent_dim: 4,
            noise_std: 0.01,
            seed: 0,
        }
    }
}

/// Smallest canvas the renderers accept.
pub const MIN_IMAGE_SIZE: usize = 16;
const N_BLOBS: usize = 4;
const BLOB_PARAMS: usize = 6;
const WORLD_SEED: u64 = 0x0067_656f_6361_7073;

/// Fixed projection from latents to blob attributes, shared by both views.
struct World {
    mix: Vec<f64>,
    latent_dim: usize,
}

struct Blob {
    color: [f64; 3],
    /// Horizontal position on the panorama / bearing on the overhead view.
    bearing: f64,
    /// Height on the panorama / distance from the centre overhead.
    range: f64,
    size: f64,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl World {
    fn new(latent_dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(WORLD_SEED);
        let n = N_BLOBS * BLOB_PARAMS * latent_dim;
        World {
            mix: (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
            latent_dim,
        }
    }

    fn blobs(&self, z: &[f64]) -> Vec<Blob> {
        let l = self.latent_dim;
        let norm = (l as f64).sqrt();
        (0..N_BLOBS)
            .map(|k| {
                let p: Vec<f64> = (0..BLOB_PARAMS)
                    .map(|q| {
                        let row = &self.mix[(k * BLOB_PARAMS + q) * l..(k * BLOB_PARAMS + q + 1) * l];
                        row.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() / norm
                    })
                    .collect();
                Blob {
                    color: [sigmoid(2.0 * p[0]), sigmoid(2.0 * p[1]), sigmoid(2.0 * p[2])],
                    bearing: (k as f64 + sigmoid(1.5 * p[3])) / N_BLOBS as f64,
                    range: sigmoid(1.5 * p[4]),
                    size: 0.07 + 0.06 * sigmoid(p[5]),
                }
            })
            .collect()
    }
}

fn blend(img: &mut [f64], size: usize, color: [f64; 3], alpha: impl Fn(usize, usize) -> f64) {
    let plane = size * size;
    for r in 0..size {
        for c in 0..size {
            let a = alpha(r, c);
            if a < 1e-4 {
                continue;
            }
            for (ch, &col) in color.iter().enumerate() {
                let px = &mut img[ch * plane + r * size + c];
                *px = *px * (1.0 - a) + col * a;
            }
        }
    }
}

/// Street-level panorama: sky over ground, blobs along the horizon band.
fn render_ground(blobs: &[Blob], size: usize) -> Vec<f64> {
    let plane = size * size;
    let mut img = vec![0.0; 3 * plane];
    let sky = [0.62, 0.72, 0.9];
    let soil = [0.36, 0.31, 0.25];
    for r in 0..size {
        let col = if r < size / 2 { sky } else { soil };
        for c in 0..size {
            for ch in 0..3 {
                img[ch * plane + r * size + c] = col[ch];
            }
        }
    }
    let s = size as f64;
    for b in blobs {
        let (cy, cx) = (s * (0.3 + 0.4 * b.range), s * b.bearing);
        let sigma = b.size * s;
        blend(&mut img, size, b.color, |r, c| {
            let dy = r as f64 + 0.5 - cy;
            let mut dx = (c as f64 + 0.5 - cx).abs();
            dx = dx.min(s - dx);
            (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
        });
    }
    img
}

/// Overhead view: blobs placed by bearing and range around the centre.
fn render_satellite(blobs: &[Blob], size: usize) -> Vec<f64> {
    let plane = size * size;
    let mut img = vec![0.0; 3 * plane];
    let base = [0.42, 0.47, 0.38];
    for ch in 0..3 {
        img[ch * plane..(ch + 1) * plane].fill(base[ch]);
    }
    let s = size as f64;
    for b in blobs {
        let theta = 2.0 * std::f64::consts::PI * b.bearing;
        let radius = s * (0.12 + 0.26 * b.range);
        let (cy, cx) = (s / 2.0 - radius * theta.cos(), s / 2.0 + radius * theta.sin());
        let sigma = 0.8 * b.size * s;
        blend(&mut img, size, b.color, |r, c| {
            let dy = r as f64 + 0.5 - cy;
            let dx = c as f64 + 0.5 - cx;
            (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
        });
    }
    img
}

/// Render `n_locations` matched pairs. Pixel values are in `[0, 1]` before
/// noise.
pub fn generate_synthetic_pairs(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.n_locations < 2 {
        return Err(Error::Config("synthetic data needs at least 2 locations".into()));
    }
    if spec.image_size < MIN_IMAGE_SIZE {
        return Err(Error::Config(format!(
            "synthetic image_size {} is below the renderer footprint of {MIN_IMAGE_SIZE}",
            spec.image_size
        )));
    }
    if spec.latent_dim == 0 {
        return Err(Error::Config("latent_dim must be >= 1".into()));
    }
    if !(spec.noise_std >= 0.0) || !spec.noise_std.is_finite() {
        return Err(Error::Config(format!("noise_std must be >= 0, got {}", spec.noise_std)));
    }
    let world = World::new(spec.latent_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.image_size;
    let shape = [3, n, n];
    let mut pairs = Vec::with_capacity(spec.n_locations);
    for id in 0..spec.n_locations {
        let z: Vec<f64> = (0..spec.latent_dim).map(|_| rng.sample(StandardNormal)).collect();
        let blobs = world.blobs(&z);
        let mut views = [render_ground(&blobs, n), render_satellite(&blobs, n)];
        for view in &mut views {
            for px in view.iter_mut() {
                let e: f64 = rng.sample(StandardNormal);
                *px += spec.noise_std * e;
            }
        }
        let [g, s] = views.map(|v| Tensor::new(&shape, v.into_iter().map(|x| x as f32).collect()));
        pairs.push(LocationPair {
            location_id: id,
            name: format!("{id:05}"),
            ground: g?,
            satellite: s?,
        });
    }
    Dataset::new(pairs)
}

fn png_names(dir: &Path) -> Result<BTreeMap<String, std::path::PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if path.is_file() && is_png {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                out.insert(name.to_string(), path);
            }
        }
    }
    Ok(out)
}

pub(crate) fn load_png(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("cannot decode {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Pairs from `<root>/ground/*.png` and `<root>/satellite/*.png`, matched by
/// file name, pixels scaled to `[0, 1]`. Location ids follow sorted name
/// order.
pub fn load_image_directory(root: &Path) -> Result<Dataset> {
    let ground = png_names(&root.join("ground"))?;
    let satellite = png_names(&root.join("satellite"))?;
    let orphans: Vec<String> = ground
        .keys()
        .filter(|k| !satellite.contains_key(*k))
        .map(|k| format!("ground/{k}"))
        .chain(
            satellite
                .keys()
                .filter(|k| !ground.contains_key(*k))
                .map(|k| format!("satellite/{k}")),
        )
        .collect();
    if !orphans.is_empty() {
        return Err(Error::Data(format!("unmatched image files: {}", orphans.join(", "))));
    }
    if ground.is_empty() {
        return Err(Error::Data(format!("no pairs found in {}", root.display())));
    }
    let pairs = ground
        .iter()
        .enumerate()
        .map(|(id, (name, gpath))| {
            Ok(LocationPair {
                location_id: id,
                name: name.trim_end_matches(".png").trim_end_matches(".PNG").to_string(),
                ground: load_png(gpath)?,
                satellite: load_png(&satellite[name])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(pairs)
}
