//! Procedural class-conditional image dataset.
//!
//! Class `k` is a soft-edged shape (`k mod 4`: disk, square, triangle, ring)
//! filled with palette color `k`, drawn at a jittered position and size over
//! a dim background with a gentle linear gradient and faint Gaussian noise.
//! Images are `[3, hw, hw]` in `[-1, 1]`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::{Error, Result};

const PALETTE: [[f32; 3]; 8] = [
    [0.9, -0.6, -0.6],
    [-0.6, 0.9, -0.6],
    [-0.6, -0.6, 0.9],
    [0.9, 0.9, -0.6],
    [-0.6, 0.9, 0.9],
    [0.9, -0.6, 0.9],
    [0.9, 0.9, 0.9],
    [0.9, 0.3, -0.6],
];
const CONTRAST: f32 = 0.75;
const EDGE_SOFTNESS: f64 = 1.0;
const NOISE_STD: f64 = 0.02;
const BACKGROUND: f64 = -0.4;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub image_hw: usize,
    pub count_per_class: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_classes: 8,
            image_hw: 32,
            count_per_class: 512,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=PALETTE.len()).contains(&self.num_classes) {
            return Err(Error::Config(format!(
                "data.num_classes ({}) must be in [2, {}]",
                self.num_classes,
                PALETTE.len()
            )));
        }
        if self.count_per_class == 0 {
            return Err(Error::Config("data.count_per_class must be positive".into()));
        }
        if self.image_hw < 8 {
            return Err(Error::Config(format!("data.image_hw ({}) must be at least 8", self.image_hw)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.num_classes * self.count_per_class
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    /// `[3, hw, hw]`, values in `[-1, 1]`.
    pub pixels: Tensor<f32>,
    pub label: usize,
}

/// Signed distance (negative inside) of archetype `shape` centred at the origin.
fn signed_distance(shape: usize, dx: f64, dy: f64, r: f64) -> f64 {
    match shape {
        0 => dx.hypot(dy) - r,
        1 => dx.abs().max(dy.abs()) - 0.85 * r,
        2 => {
            let s = 0.55 * r;
            let (c, h) = (0.5f64, 3f64.sqrt() / 2.0);
            (-dy - s).max(h * dx + c * dy - s).max(-h * dx + c * dy - s)
        }
        _ => (dx.hypot(dy) - 0.8 * r).abs() - 0.28 * r,
    }
}

/// Render one image of class `label`. Consumes a fixed number of draws
/// from `rng` before the per-pixel noise.
pub fn generate_image(label: usize, rng: &mut Rng, image_hw: usize) -> Result<LabeledImage> {
    if label >= PALETTE.len() {
        return Err(Error::invalid(format!("label {label} has no archetype")));
    }
    if image_hw < 8 {
        return Err(Error::invalid(format!("image side {image_hw} below 8")));
    }
    let hw = image_hw as f64;
    let unit = hw / 32.0;
    let r = (7.0 + 3.0 * rng.uniform()) * unit;
    let cx = hw / 2.0 + (rng.uniform() * 6.0 - 3.0) * unit;
    let cy = hw / 2.0 + (rng.uniform() * 6.0 - 3.0) * unit;
    let slope = rng.uniform() * 0.6 - 0.3;
    let angle = rng.uniform() * std::f64::consts::TAU;
    let (ca, sa) = (angle.cos(), angle.sin());
    let color = PALETTE[label].map(|v| (v * CONTRAST) as f64);

    let plane = image_hw * image_hw;
    let mut data = vec![0f32; 3 * plane];
    for y in 0..image_hw {
        for x in 0..image_hw {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let cover = 1.0 / (1.0 + (signed_distance(label % 4, px - cx, py - cy, r) / (EDGE_SOFTNESS * unit)).exp());
            let bg = BACKGROUND + slope * ((px - hw / 2.0) * ca + (py - hw / 2.0) * sa) / (hw / 2.0);
            for (ch, &c) in color.iter().enumerate() {
                data[ch * plane + y * image_hw + x] = (bg * (1.0 - cover) + c * cover) as f32;
            }
        }
    }
    for v in &mut data {
        *v = (*v as f64 + NOISE_STD * rng.normal()).clamp(-1.0, 1.0) as f32;
    }
    Ok(LabeledImage {
        pixels: Tensor::from_vec(&[3, image_hw, image_hw], data)?,
        label,
    })
}

/// `K · count` images ordered by (class, index). Image `i` in that order
/// draws from stream `i` of the spec's seed.
pub fn make_dataset(spec: &DatasetSpec) -> Result<Vec<LabeledImage>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.len());
    for label in 0..spec.num_classes {
        for j in 0..spec.count_per_class {
            let mut rng = Rng::stream(spec.seed, (label * spec.count_per_class + j) as u64);
            out.push(generate_image(label, &mut rng, spec.image_hw)?);
        }
    }
    Ok(out)
}

/// Stack images into `[b, 3, hw, hw]` with their labels.
pub fn stack(images: &[&LabeledImage]) -> Result<(Tensor<f32>, Vec<usize>)> {
    let first = images.first().ok_or_else(|| Error::invalid("cannot stack zero images"))?;
    let mut shape = vec![images.len()];
    shape.extend_from_slice(first.pixels.shape());
    let mut data = Vec::with_capacity(images.len() * first.pixels.len());
    for im in images {
        if im.pixels.shape() != first.pixels.shape() {
            return Err(Error::shape("stack", format!("{:?} vs {:?}", im.pixels.shape(), first.pixels.shape())));
        }
        data.extend_from_slice(im.pixels.data());
    }
    Ok((Tensor::from_vec(&shape, data)?, images.iter().map(|im| im.label).collect()))
}

/// One epoch of shuffled minibatches; the last batch may be short.
pub struct Batches<'a> {
    dataset: &'a [LabeledImage],
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

pub fn batches(dataset: &[LabeledImage], batch_size: usize, epoch_seed: u64) -> Result<Batches<'_>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    Ok(Batches {
        dataset,
        order: Rng::new(epoch_seed).permutation(dataset.len()),
        batch_size,
        pos: 0,
    })
}

impl Iterator for Batches<'_> {
    type Item = (Tensor<f32>, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let picked: Vec<&LabeledImage> = self.order[self.pos..end].iter().map(|&i| &self.dataset[i]).collect();
        self.pos = end;
        Some(stack(&picked).expect("dataset images share one shape"))
    }
}

const DUMP_MAGIC: &[u8; 4] = b"LDTD";
const DUMP_VERSION: u32 = 1;

/// Write the flat dump: `"LDTD"`, version, K, image side, record count (u32
/// little-endian), then per record a u16 label and `hw·hw·3` f32 pixels in
/// row-major height, width, channel order.
pub fn write_dump(path: &Path, num_classes: usize, images: &[LabeledImage]) -> Result<()> {
    let hw = images.first().map_or(0, |im| im.pixels.shape()[1]);
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    let mut bytes = Vec::with_capacity(20);
    bytes.extend_from_slice(DUMP_MAGIC);
    for v in [DUMP_VERSION, num_classes as u32, hw as u32, images.len() as u32] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    let plane = hw * hw;
    for im in images {
        if im.pixels.shape() != [3, hw, hw] {
            return Err(Error::shape("write_dump", format!("{:?}", im.pixels.shape())));
        }
        let mut rec = Vec::with_capacity(2 + 12 * plane);
        rec.extend_from_slice(&(im.label as u16).to_le_bytes());
        let d = im.pixels.data();
        for i in 0..plane {
            for ch in 0..3 {
                rec.extend_from_slice(&d[ch * plane + i].to_le_bytes());
            }
        }
        w.write_all(&rec).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read a dump written by [`write_dump`]; returns `(K, images)`.
pub fn read_dump(path: &Path) -> Result<(usize, Vec<LabeledImage>)> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut header = [0u8; 20];
    r.read_exact(&mut header).map_err(|_| Error::Corrupt("dataset dump header truncated".into()))?;
    if &header[..4] != DUMP_MAGIC {
        return Err(Error::Version("not a dataset dump".into()));
    }
    let word = |i: usize| u32::from_le_bytes(header[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    if word(0) != DUMP_VERSION as usize {
        return Err(Error::Version(format!("dataset dump version {}", word(0))));
    }
    let (k, hw, count) = (word(1), word(2), word(3));
    let plane = hw * hw;
    let mut images = Vec::with_capacity(count);
    let mut rec = vec![0u8; 2 + 12 * plane];
    for _ in 0..count {
        r.read_exact(&mut rec).map_err(|_| Error::Corrupt("dataset dump truncated".into()))?;
        let label = u16::from_le_bytes([rec[0], rec[1]]) as usize;
        let mut data = vec![0f32; 3 * plane];
        for (j, chunk) in rec[2..].chunks_exact(4).enumerate() {
            let (i, ch) = (j / 3, j % 3);
            data[ch * plane + i] = f32::from_le_bytes(chunk.try_into().unwrap());
        }
        images.push(LabeledImage {
            pixels: Tensor::from_vec(&[3, hw, hw], data)?,
            label,
        });
    }
    Ok((k, images))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> DatasetSpec {
        DatasetSpec {
            num_classes: 8,
            image_hw: 32,
            count_per_class: 4,
            seed,
        }
    }

    #[test]
    fn dataset_is_balanced_and_ordered() {
        let ds = make_dataset(&small(0)).unwrap();
        assert_eq!(ds.len(), 32);
        for (i, im) in ds.iter().enumerate() {
            assert_eq!(im.label, i / 4);
            assert_eq!(im.pixels.shape(), &[3, 32, 32]);
            assert!(im.pixels.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn dataset_is_reproducible_and_seeded() {
        let a = make_dataset(&small(0)).unwrap();
        let b = make_dataset(&small(0)).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.pixels.bit_eq(&y.pixels)));
        let c = make_dataset(&small(1)).unwrap();
        assert!(a[0].pixels.max_abs_diff(&c[0].pixels) > 0.0);
    }

    #[test]
    fn invalid_specs_rejected() {
        for spec in [
            DatasetSpec { num_classes: 1, ..small(0) },
            DatasetSpec { num_classes: 9, ..small(0) },
            DatasetSpec { count_per_class: 0, ..small(0) },
            DatasetSpec { image_hw: 4, ..small(0) },
        ] {
            assert!(make_dataset(&spec).is_err());
        }
        assert!(generate_image(8, &mut Rng::new(0), 32).is_err());
    }

    #[test]
    fn single_batch_is_a_permutation() {
        let ds = make_dataset(&small(2)).unwrap();
        let all: Vec<_> = batches(&ds, ds.len(), 5).unwrap().collect();
        assert_eq!(all.len(), 1);
        let mut labels = all[0].1.clone();
        assert_ne!(labels, ds.iter().map(|im| im.label).collect::<Vec<_>>());
        labels.sort();
        assert_eq!(labels, ds.iter().map(|im| im.label).collect::<Vec<_>>());
    }

    #[test]
    fn epoch_covers_dataset_once() {
        let ds = make_dataset(&small(3)).unwrap();
        let plane = 3 * 32 * 32;
        let mut seen = vec![0usize; ds.len()];
        let mut sizes = Vec::new();
        for (pixels, labels) in batches(&ds, 5, 9).unwrap() {
            sizes.push(labels.len());
            for row in pixels.data().chunks(plane) {
                let i = ds.iter().position(|im| im.pixels.data() == row).unwrap();
                seen[i] += 1;
            }
        }
        assert_eq!(sizes, vec![5, 5, 5, 5, 5, 5, 2]);
        assert!(seen.iter().all(|&c| c == 1));
        let again: Vec<Vec<usize>> = batches(&ds, 5, 9).unwrap().map(|b| b.1).collect();
        let first: Vec<Vec<usize>> = batches(&ds, 5, 9).unwrap().map(|b| b.1).collect();
        assert_eq!(again, first);
    }
}
