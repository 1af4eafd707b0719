//! Synthetic glass scenes, dataset manifests and the training batch stream.
//!
//! A scene is a smooth textured background with a few opaque shapes. Each
//! glass pane is a (possibly slightly rotated) rectangle whose interior shows
//! the same background, blurred and tinted, optionally crossed by a specular
//! streak, and surrounded by a solid frame. The mask is the union of pane
//! interiors.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::{self, RgbImage};
use crate::labelkit::{decouple, DecoupledLabels};
use crate::maps::BinaryMask;
use crate::par;

/// Named sub-streams derived from one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RngStream {
    Init = 1,
    Shuffle = 2,
    Augment = 3,
}

pub fn substream(seed: u64, stream: RngStream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub size: usize,
    pub glass_count_range: (usize, usize),
    pub frame_width_range: (usize, usize),
    pub tint_alpha_range: (f32, f32),
    pub blur_radius_range: (usize, usize),
    pub highlight_probability: f32,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            size: 64,
            glass_count_range: (1, 2),
            frame_width_range: (1, 3),
            tint_alpha_range: (0.15, 0.4),
            blur_radius_range: (1, 2),
            highlight_probability: 0.5,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.size < 16 {
            return bad("data.size must be at least 16");
        }
        if self.glass_count_range.0 > self.glass_count_range.1 {
            return bad("data.glass_count range is not ordered");
        }
        if self.frame_width_range.0 > self.frame_width_range.1 {
            return bad("data.frame_width range is not ordered");
        }
        if self.blur_radius_range.0 > self.blur_radius_range.1 {
            return bad("data.blur_radius range is not ordered");
        }
        let (a0, a1) = self.tint_alpha_range;
        if !(0.0..=1.0).contains(&a0) || !(0.0..=1.0).contains(&a1) || a0 > a1 {
            return bad("data.tint_alpha range must be ordered within [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.highlight_probability) {
            return bad("data.highlight_probability must lie in [0, 1]");
        }
        Ok(())
    }
}

type Rgb = [f32; 3];

fn random_colour(rng: &mut ChaCha8Rng) -> Rgb {
    [rng.gen(), rng.gen(), rng.gen()]
}

/// Background: bilinear value noise over a coarse colour lattice, a few
/// opaque discs and boxes, and fine per-pixel grain.
fn render_background(rng: &mut ChaCha8Rng, size: usize) -> Vec<Rgb> {
    let cells = 4;
    let lattice: Vec<Rgb> = (0..(cells + 1) * (cells + 1)).map(|_| random_colour(rng)).collect();
    let mut px = vec![[0.0f32; 3]; size * size];
    for y in 0..size {
        for x in 0..size {
            let fy = y as f32 / size as f32 * cells as f32;
            let fx = x as f32 / size as f32 * cells as f32;
            let (iy, ix) = (fy as usize, fx as usize);
            let (ty, tx) = (fy - iy as f32, fx - ix as f32);
            let at = |yy: usize, xx: usize| lattice[yy * (cells + 1) + xx];
            for c in 0..3 {
                let top = at(iy, ix)[c] * (1.0 - tx) + at(iy, ix + 1)[c] * tx;
                let bot = at(iy + 1, ix)[c] * (1.0 - tx) + at(iy + 1, ix + 1)[c] * tx;
                px[y * size + x][c] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    let s = size as f32;
    for _ in 0..rng.gen_range(3..=6) {
        let colour = random_colour(rng);
        let (cy, cx) = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
        let r = rng.gen_range(0.05 * s..0.2 * s);
        let disc = rng.gen_bool(0.5);
        for y in 0..size {
            for x in 0..size {
                let (dy, dx) = (y as f32 + 0.5 - cy, x as f32 + 0.5 - cx);
                let inside = if disc {
                    dy * dy + dx * dx <= r * r
                } else {
                    dy.abs() <= r && dx.abs() <= 0.6 * r
                };
                if inside {
                    px[y * size + x] = colour;
                }
            }
        }
    }
    for p in &mut px {
        let grain: f32 = rng.gen_range(-0.08..0.08);
        p.iter_mut().for_each(|v| *v = (*v + grain).clamp(0.0, 1.0));
    }
    px
}

fn box_blur(px: &[Rgb], size: usize, radius: usize) -> Vec<Rgb> {
    if radius == 0 {
        return px.to_vec();
    }
    let pass = |src: &[Rgb], horizontal: bool| -> Vec<Rgb> {
        let mut out = vec![[0.0f32; 3]; src.len()];
        for y in 0..size {
            for x in 0..size {
                let mut acc = [0.0f32; 3];
                let mut n = 0.0;
                let centre = if horizontal { x } else { y };
                for k in centre.saturating_sub(radius)..=(centre + radius).min(size - 1) {
                    let p = if horizontal { src[y * size + k] } else { src[k * size + x] };
                    (0..3).for_each(|c| acc[c] += p[c]);
                    n += 1.0;
                }
                out[y * size + x] = acc.map(|v| v / n);
            }
        }
        out
    };
    pass(&pass(px, true), false)
}

struct Pane {
    cy: f32,
    cx: f32,
    half_h: f32,
    half_w: f32,
    cos: f32,
    sin: f32,
    frame: f32,
}

impl Pane {
    /// Pixel centre in pane coordinates.
    fn local(&self, y: usize, x: usize) -> (f32, f32) {
        let (dy, dx) = (y as f32 + 0.5 - self.cy, x as f32 + 0.5 - self.cx);
        (self.cos * dx + self.sin * dy, -self.sin * dx + self.cos * dy)
    }

    fn outer_radius(&self) -> f32 {
        (self.half_h + self.frame).hypot(self.half_w + self.frame)
    }
}

/// Renders scene `index` of the set described by `cfg`.
pub fn synth_scene(cfg: &SceneConfig, index: u64) -> (RgbImage, BinaryMask) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index + 16);
    let size = cfg.size;
    let s = size as f32;
    let background = render_background(&mut rng, size);

    let mut image = background.clone();
    let mut mask = vec![0u8; size * size];
    let count = rng.gen_range(cfg.glass_count_range.0..=cfg.glass_count_range.1);
    let mut panes: Vec<Pane> = Vec::new();
    for _ in 0..count {
        let frame = rng.gen_range(cfg.frame_width_range.0..=cfg.frame_width_range.1) as f32;
        // Rejection sampling keeps panes inside the image and apart.
        let placed = (0..64).find_map(|_| {
            let angle: f32 = if rng.gen_bool(0.5) { 0.0 } else { rng.gen_range(-0.2..0.2) };
            let pane = Pane {
                half_h: rng.gen_range(0.1 * s..0.28 * s),
                half_w: rng.gen_range(0.1 * s..0.28 * s),
                cy: rng.gen_range(0.0..s),
                cx: rng.gen_range(0.0..s),
                cos: angle.cos(),
                sin: angle.sin(),
                frame,
            };
            let r = pane.outer_radius();
            let fits = pane.cy - r >= 0.0 && pane.cy + r <= s && pane.cx - r >= 0.0 && pane.cx + r <= s;
            let apart = panes
                .iter()
                .all(|q| (q.cy - pane.cy).hypot(q.cx - pane.cx) > q.outer_radius() + r);
            (fits && apart).then_some(pane)
        });
        let Some(pane) = placed else { continue };

        let alpha = rng.gen_range(cfg.tint_alpha_range.0..=cfg.tint_alpha_range.1);
        let tint = random_colour(&mut rng);
        let blur = rng.gen_range(cfg.blur_radius_range.0..=cfg.blur_radius_range.1);
        let frame_colour = if rng.gen_bool(0.5) {
            [rng.gen_range(0.0..0.2); 3]
        } else {
            [rng.gen_range(0.8..1.0); 3]
        };
        let highlight = rng.gen_bool(f64::from(cfg.highlight_probability)).then(|| {
            let offset = rng.gen_range(-0.5..0.5) * pane.half_w;
            let width = rng.gen_range(0.08..0.2) * pane.half_w.min(pane.half_h);
            (offset, width)
        });
        let blurred = box_blur(&background, size, blur);
        for y in 0..size {
            for x in 0..size {
                let (u, v) = pane.local(y, x);
                let i = y * size + x;
                if u.abs() <= pane.half_w && v.abs() <= pane.half_h {
                    let mut p = [0.0f32; 3];
                    for c in 0..3 {
                        p[c] = (1.0 - alpha) * blurred[i][c] + alpha * tint[c];
                    }
                    if let Some((offset, width)) = highlight {
                        if (u + 0.7 * v - offset).abs() <= width {
                            p.iter_mut().for_each(|c| *c = 0.6 * *c + 0.4);
                        }
                    }
                    image[i] = p;
                    mask[i] = 1;
                } else if u.abs() <= pane.half_w + pane.frame && v.abs() <= pane.half_h + pane.frame {
                    image[i] = frame_colour;
                }
            }
        }
        panes.push(pane);
    }

    let plane = size * size;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, p) in image.iter().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = p[c].clamp(0.0, 1.0);
        }
    }
    (
        RgbImage::new(size, size, data).expect("generated image is valid"),
        BinaryMask::new(size, size, mask).expect("generated mask is valid"),
    )
}

/// Bilinear for the image, nearest neighbour for the mask.
pub fn resize_pair(image: &RgbImage, mask: &BinaryMask, size: usize) -> Result<(RgbImage, BinaryMask)> {
    Ok((image.resize(size, size)?, resize_mask(mask, size, size)?))
}

pub fn resize_mask(mask: &BinaryMask, height: usize, width: usize) -> Result<BinaryMask> {
    if (height, width) == (mask.height(), mask.width()) {
        return Ok(mask.clone());
    }
    let src = |o: usize, out: usize, inp: usize| (((o as f64 + 0.5) * inp as f64 / out as f64) as usize).min(inp - 1);
    BinaryMask::from_fn(height, width, |y, x| {
        mask.get(src(y, height, mask.height()), src(x, width, mask.width()))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    All,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    /// Paths relative to `root`.
    pub entries: Vec<(PathBuf, PathBuf)>,
    pub split: Split,
}

pub const MANIFEST_FILE: &str = "manifest.txt";

impl DatasetManifest {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let [img, mask] = parts[..] else {
                return Err(Error::format(&path, format!("line {}: expected two paths", n + 1)));
            };
            for p in [img, mask] {
                if !root.join(p).is_file() {
                    return Err(Error::format(&path, format!("line {}: {p} does not exist", n + 1)));
                }
            }
            entries.push((PathBuf::from(img), PathBuf::from(mask)));
        }
        if entries.is_empty() {
            return Err(Error::format(&path, "manifest has no entries"));
        }
        Ok(Self {
            root: root.to_path_buf(),
            entries,
            split: Split::All,
        })
    }

    pub fn save(&self) -> Result<()> {
        let path = self.root.join(MANIFEST_FILE);
        let text: String = self
            .entries
            .iter()
            .map(|(i, m)| format!("{} {}\n", i.display(), m.display()))
            .collect();
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The last `round(len · val_fraction)` entries (at least one, and
    /// leaving at least one) form the validation split.
    pub fn split(&self, val_fraction: f64) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&val_fraction) || val_fraction == 0.0 {
            return Err(Error::Config(format!("data.val_fraction {val_fraction} must lie in (0, 1)")));
        }
        if self.len() < 2 {
            return Err(Error::invalid("need at least two entries to split"));
        }
        let n_val = ((self.len() as f64 * val_fraction).round() as usize).clamp(1, self.len() - 1);
        let cut = self.len() - n_val;
        let part = |entries: &[(PathBuf, PathBuf)], split| Self {
            root: self.root.clone(),
            entries: entries.to_vec(),
            split,
        };
        Ok((part(&self.entries[..cut], Split::Train), part(&self.entries[cut..], Split::Val)))
    }
}

/// Writes `count` scenes under `root` in the dataset layout.
pub fn generate_dataset(root: &Path, count: usize, cfg: &SceneConfig) -> Result<DatasetManifest> {
    cfg.validate()?;
    for dir in ["images", "masks"] {
        let p = root.join(dir);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let results = par::map_range(count, |i| -> Result<(PathBuf, PathBuf)> {
        let (image, mask) = synth_scene(cfg, i as u64);
        let rel_img = PathBuf::from(format!("images/{i:05}.png"));
        let rel_mask = PathBuf::from(format!("masks/{i:05}.png"));
        io::save_image(&root.join(&rel_img), &image)?;
        io::save_mask(&root.join(&rel_mask), &mask)?;
        Ok((rel_img, rel_mask))
    });
    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        entries: results.into_iter().collect::<Result<_>>()?,
        split: Split::All,
    };
    manifest.save()?;
    Ok(manifest)
}

/// One training item at working resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: RgbImage,
    pub mask: BinaryMask,
    pub labels: DecoupledLabels,
}

impl Sample {
    pub fn from_pair(image: RgbImage, mask: BinaryMask) -> Self {
        let labels = decouple(&mask);
        Self { image, mask, labels }
    }

    pub fn flip_horizontal(&self) -> Self {
        Self {
            image: self.image.flip_horizontal(),
            mask: self.mask.flip_horizontal(),
            labels: self.labels.flip_horizontal(),
        }
    }
}

pub const FLIP_PROBABILITY: f64 = 0.5;

/// Horizontal flip with probability one half, applied to every map.
pub fn augment(sample: &Sample, rng: &mut impl Rng) -> Sample {
    if rng.gen_bool(FLIP_PROBABILITY) {
        sample.flip_horizontal()
    } else {
        sample.clone()
    }
}

fn cache_paths(root: &Path, image_rel: &Path, size: usize) -> (PathBuf, PathBuf) {
    let stem = image_rel
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let dir = root.join("cache");
    (
        dir.join(format!("{stem}.s{size}.bl.gldt")),
        dir.join(format!("{stem}.s{size}.dl.gldt")),
    )
}

/// Decoupled labels for `mask`, read from the sidecar cache when present and
/// written to it otherwise.
pub fn cached_labels(root: &Path, image_rel: &Path, mask: &BinaryMask) -> Result<DecoupledLabels> {
    let (bl, dl) = cache_paths(root, image_rel, mask.height());
    if bl.is_file() && dl.is_file() {
        let interior = io::read_gldt(&bl)?;
        let boundary = io::read_gldt(&dl)?;
        if (interior.height(), interior.width()) == (mask.height(), mask.width())
            && (boundary.height(), boundary.width()) == (mask.height(), mask.width())
        {
            return Ok(DecoupledLabels { interior, boundary });
        }
    }
    let labels = decouple(mask);
    let dir = root.join("cache");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    io::write_gldt(&bl, &labels.interior)?;
    io::write_gldt(&dl, &labels.boundary)?;
    Ok(labels)
}

/// Every entry of a manifest loaded at `size × size`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub size: usize,
}

impl Dataset {
    pub fn load(manifest: &DatasetManifest, size: usize, use_cache: bool) -> Result<Self> {
        if manifest.is_empty() {
            return Err(Error::invalid("empty manifest"));
        }
        let samples = par::map_range(manifest.len(), |i| -> Result<Sample> {
            let (img_rel, mask_rel) = &manifest.entries[i];
            let (image, mask) = io::load_pair(&manifest.root.join(img_rel), &manifest.root.join(mask_rel))?;
            let (image, mask) = resize_pair(&image, &mask, size)?;
            let labels = if use_cache {
                cached_labels(&manifest.root, img_rel, &mask)?
            } else {
                decouple(&mask)
            };
            Ok(Sample { image, mask, labels })
        });
        Ok(Self {
            samples: samples.into_iter().collect::<Result<_>>()?,
            size,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// A stacked batch in `f32`, channel-planar.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub size: usize,
    /// `[B, 3, H, W]`
    pub images: Vec<f32>,
    /// `[B, 1, H, W]` each.
    pub masks: Vec<f32>,
    pub interior: Vec<f32>,
    pub boundary: Vec<f32>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn stack(samples: &[Sample], indices: Vec<usize>) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::invalid("empty batch"))?;
        let size = first.mask.height();
        let mut b = Self {
            indices,
            size,
            images: Vec::new(),
            masks: Vec::new(),
            interior: Vec::new(),
            boundary: Vec::new(),
        };
        for s in samples {
            if s.mask.height() != size || s.mask.width() != size {
                return Err(Error::invalid("batch items differ in size"));
            }
            b.images.extend_from_slice(s.image.data());
            b.masks.extend(s.mask.data().iter().map(|&v| f32::from(v)));
            b.interior.extend_from_slice(s.labels.interior.values());
            b.boundary.extend_from_slice(s.labels.boundary.values());
        }
        Ok(b)
    }
}

/// Endless stream of shuffled batches. Each epoch is a fresh permutation;
/// a batch that runs past the end of an epoch continues into the next one.
pub struct BatchStream {
    batch_size: usize,
    augment: bool,
    order: Vec<usize>,
    pos: usize,
    shuffle_rng: ChaCha8Rng,
    augment_rng: ChaCha8Rng,
    epoch: usize,
}

impl BatchStream {
    pub fn new(len: usize, batch_size: usize, seed: u64, augment: bool) -> Result<Self> {
        if len == 0 {
            return Err(Error::invalid("cannot batch an empty dataset"));
        }
        if batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        Ok(Self {
            batch_size,
            augment,
            order: (0..len).collect(),
            pos: len,
            shuffle_rng: substream(seed, RngStream::Shuffle),
            augment_rng: substream(seed, RngStream::Augment),
            epoch: 0,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch_size);
        while out.len() < self.batch_size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.shuffle_rng);
                self.pos = 0;
                self.epoch += 1;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }

    pub fn next_batch(&mut self, data: &Dataset) -> Result<Batch> {
        if data.len() != self.order.len() {
            return Err(Error::invalid("dataset size changed under the batch stream"));
        }
        let idx = self.next_indices();
        let samples: Vec<Sample> = idx
            .iter()
            .map(|&i| {
                if self.augment {
                    augment(&data.samples[i], &mut self.augment_rng)
                } else {
                    data.samples[i].clone()
                }
            })
            .collect();
        Batch::stack(&samples, idx)
    }
}
