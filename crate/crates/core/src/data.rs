//! Synthetic shapes dataset and its on-disk format.
//!
//! Scenes hold 1–8 non-overlapping filled shapes on a noisy background.
//! Class identity is carried by shape alone: intensities are drawn from
//! the same range for every class. Sticks are thin axis-aligned bars whose
//! aspect ratio is at least 8:1, so ordinary anchors overlap them poorly.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

pub const CLASS_NAMES: [&str; 4] = ["rectangle", "ellipse", "triangle", "stick"];
pub const STICK_CLASS: usize = 3;

const MAGIC: &[u8; 4] = b"SMDS";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub train_images: usize,
    pub val_images: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Range of the longer box side, in pixels.
    pub min_size: f64,
    pub max_size: f64,
    pub stick_fraction: f64,
    pub noise_std: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            train_images: 500,
            val_images: 100,
            width: 128,
            height: 128,
            seed: 0,
            min_objects: 1,
            max_objects: 8,
            min_size: 10.0,
            max_size: 48.0,
            stick_fraction: 0.1,
            noise_std: 0.03,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.width >= 16
            && self.height >= 16
            && self.min_objects >= 1
            && self.min_objects <= self.max_objects
            && self.min_size >= 4.0
            && self.min_size <= self.max_size
            && self.max_size < self.width.min(self.height) as f64
            && (0.0..=1.0).contains(&self.stick_fraction)
            && self.noise_std >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid dataset config {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub class_id: usize,
    /// Tight bounding box of `mask`.
    pub bbox: BBox,
    /// Full-image binary mask, row-major.
    pub mask: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub width: usize,
    pub height: usize,
    /// Single-channel intensities, row-major.
    pub image: Vec<f32>,
    pub objects: Vec<SceneObject>,
}

impl Scene {
    pub fn boxes(&self) -> Vec<BBox> {
        self.objects.iter().map(|o| o.bbox).collect()
    }

    pub fn classes(&self) -> Vec<usize> {
        self.objects.iter().map(|o| o.class_id).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub width: usize,
    pub height: usize,
    pub scenes: Vec<Scene>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    fn stream_base(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1 << 32,
        }
    }
}

/// Generates both splits. Every scene draws from its own ChaCha stream, so
/// a scene depends only on the seed, split and index.
pub fn generate_dataset(config: &DatasetConfig) -> Result<(Dataset, Dataset)> {
    Ok((
        generate_split(config, Split::Train, config.train_images)?,
        generate_split(config, Split::Val, config.val_images)?,
    ))
}

pub fn generate_split(config: &DatasetConfig, split: Split, count: usize) -> Result<Dataset> {
    config.validate()?;
    let scenes = (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(split.stream_base() + i as u64);
            generate_scene(config, &mut rng)
        })
        .collect();
    Ok(Dataset {
        width: config.width,
        height: config.height,
        scenes,
    })
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Rect,
    Ellipse,
    /// Triangle with apex on the top edge at fraction `apex` and the other
    /// two vertices at the bottom corners, optionally flipped vertically.
    Triangle { apex: f64, flip: bool },
}

fn inside(shape: Shape, b: &BBox, x: f64, y: f64) -> bool {
    if x < b.x1 || x >= b.x2 || y < b.y1 || y >= b.y2 {
        return false;
    }
    let u = (x - b.x1) / b.width();
    let v = (y - b.y1) / b.height();
    match shape {
        Shape::Rect => true,
        Shape::Ellipse => {
            let (du, dv) = (2.0 * u - 1.0, 2.0 * v - 1.0);
            du * du + dv * dv <= 1.0
        }
        Shape::Triangle { apex, flip } => {
            let v = if flip { 1.0 - v } else { v };
            // edges from (apex, 0) to (0, 1) and (1, 1)
            u >= apex * (1.0 - v) && u <= apex + (1.0 - apex) * v
        }
    }
}

fn generate_scene(c: &DatasetConfig, rng: &mut ChaCha8Rng) -> Scene {
    let (w, h) = (c.width, c.height);
    let background = rng.random_range(0.05..0.3);
    let mut image = vec![background as f32; w * h];
    let target = rng.random_range(c.min_objects..=c.max_objects);
    let mut objects: Vec<SceneObject> = Vec::new();
    let mut attempts = 0;
    // The class is drawn once per object and kept across placement retries;
    // redrawing it would favour thin sticks, which fit more easily.
    let mut pending: Option<(usize, usize)> = None;
    while objects.len() < target && attempts < 200 {
        attempts += 1;
        let (class_id, tries) = match pending {
            Some((k, t)) if t < 25 => (k, t + 1),
            _ => {
                let k = if rng.random_bool(c.stick_fraction) {
                    STICK_CLASS
                } else {
                    rng.random_range(0..3)
                };
                (k, 1)
            }
        };
        pending = Some((class_id, tries));
        let long = rng.random_range(c.min_size..=c.max_size);
        let (bw, bh, shape) = match class_id {
            STICK_CLASS => {
                // integer extents on an integer origin keep the 8:1 ratio exact
                let thick = rng.random_range(2.0..=(long / 8.0).max(2.0)).floor();
                let long = long.max(8.0 * thick).ceil();
                let (bw, bh) = if rng.random_bool(0.5) { (long, thick) } else { (thick, long) };
                (bw, bh, Shape::Rect)
            }
            k => {
                let short = long * rng.random_range(0.4..=1.0);
                let (bw, bh) = if rng.random_bool(0.5) { (long, short) } else { (short, long) };
                let shape = match k {
                    0 => Shape::Rect,
                    1 => Shape::Ellipse,
                    _ => Shape::Triangle {
                        apex: rng.random_range(0.2..0.8),
                        flip: rng.random_bool(0.5),
                    },
                };
                (bw, bh, shape)
            }
        };
        if bw >= w as f64 - 2.0 || bh >= h as f64 - 2.0 {
            continue;
        }
        let mut x1 = rng.random_range(1.0..(w as f64 - bw - 1.0));
        let mut y1 = rng.random_range(1.0..(h as f64 - bh - 1.0));
        if class_id == STICK_CLASS {
            x1 = x1.floor();
            y1 = y1.floor();
        }
        let shape_box = BBox::new(x1, y1, x1 + bw, y1 + bh);
        let clear = objects.iter().all(|o| {
            let d = BBox::new(o.bbox.x1 - 2.0, o.bbox.y1 - 2.0, o.bbox.x2 + 2.0, o.bbox.y2 + 2.0);
            d.intersection(&shape_box) == 0.0
        });
        if !clear {
            continue;
        }
        let mut mask = vec![0u8; w * h];
        let (mut mx1, mut my1, mut mx2, mut my2) = (usize::MAX, usize::MAX, 0, 0);
        for py in (y1.floor() as usize)..((y1 + bh).ceil() as usize).min(h) {
            for px in (x1.floor() as usize)..((x1 + bw).ceil() as usize).min(w) {
                if inside(shape, &shape_box, px as f64 + 0.5, py as f64 + 0.5) {
                    mask[py * w + px] = 1;
                    mx1 = mx1.min(px);
                    my1 = my1.min(py);
                    mx2 = mx2.max(px + 1);
                    my2 = my2.max(py + 1);
                }
            }
        }
        if mx1 == usize::MAX || mx2 - mx1 < 2 || my2 - my1 < 2 {
            continue;
        }
        let intensity = rng.random_range(0.55..1.0) as f32;
        for (px, &m) in image.iter_mut().zip(&mask) {
            if m == 1 {
                *px = intensity;
            }
        }
        objects.push(SceneObject {
            class_id,
            bbox: BBox::new(mx1 as f64, my1 as f64, mx2 as f64, my2 as f64),
            mask,
        });
        pending = None;
    }
    if c.noise_std > 0.0 {
        let noise = Normal::new(0.0, c.noise_std).expect("finite std");
        for px in &mut image {
            *px += noise.sample(rng) as f32;
        }
    }
    Scene {
        width: w,
        height: h,
        image,
        objects,
    }
}

/// Run lengths of a binary mask, starting with a (possibly empty) run of
/// zeros and alternating.
pub fn rle_encode(mask: &[u8]) -> Vec<u32> {
    let mut runs = Vec::new();
    let mut current = 0u8;
    let mut len = 0u32;
    for &m in mask {
        let m = u8::from(m != 0);
        if m != current {
            runs.push(len);
            len = 0;
            current = m;
        }
        len += 1;
    }
    runs.push(len);
    runs
}

pub fn rle_decode(runs: &[u32], len: usize) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(len);
    for (i, &r) in runs.iter().enumerate() {
        out.extend(std::iter::repeat_n((i % 2) as u8, r as usize));
    }
    if out.len() != len {
        return Err(Error::Format(format!("mask runs cover {} pixels, expected {len}", out.len())));
    }
    Ok(out)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        w.write_u32::<LittleEndian>(self.width as u32)?;
        w.write_u32::<LittleEndian>(self.height as u32)?;
        w.write_u32::<LittleEndian>(1)?; // channels
        w.write_u32::<LittleEndian>(self.scenes.len() as u32)?;
        for s in &self.scenes {
            for &v in &s.image {
                w.write_f32::<LittleEndian>(v)?;
            }
            w.write_u32::<LittleEndian>(s.objects.len() as u32)?;
            for o in &s.objects {
                w.write_u32::<LittleEndian>(o.class_id as u32)?;
                for v in [o.bbox.x1, o.bbox.y1, o.bbox.x2, o.bbox.y2] {
                    w.write_f64::<LittleEndian>(v)?;
                }
                let runs = rle_encode(&o.mask);
                w.write_u32::<LittleEndian>(runs.len() as u32)?;
                for r in runs {
                    w.write_u32::<LittleEndian>(r)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a dataset file".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let width = r.read_u32::<LittleEndian>()? as usize;
        let height = r.read_u32::<LittleEndian>()? as usize;
        let channels = r.read_u32::<LittleEndian>()?;
        if channels != 1 {
            return Err(Error::Format(format!("unsupported channel count {channels}")));
        }
        let n = r.read_u32::<LittleEndian>()? as usize;
        let mut scenes = Vec::with_capacity(n);
        for _ in 0..n {
            let mut image = vec![0f32; width * height];
            r.read_f32_into::<LittleEndian>(&mut image)?;
            let k = r.read_u32::<LittleEndian>()? as usize;
            let mut objects = Vec::with_capacity(k);
            for _ in 0..k {
                let class_id = r.read_u32::<LittleEndian>()? as usize;
                let mut c = [0f64; 4];
                r.read_f64_into::<LittleEndian>(&mut c)?;
                let nruns = r.read_u32::<LittleEndian>()? as usize;
                let mut runs = vec![0u32; nruns];
                r.read_u32_into::<LittleEndian>(&mut runs)?;
                objects.push(SceneObject {
                    class_id,
                    bbox: BBox::try_new(c[0], c[1], c[2], c[3])?,
                    mask: rle_decode(&runs, width * height)?,
                });
            }
            scenes.push(Scene {
                width,
                height,
                image,
                objects,
            });
        }
        Ok(Dataset { width, height, scenes })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}
