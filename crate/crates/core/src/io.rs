//! PNG images, masks and grey maps, plus the `GLDT` float sidecar.
//!
//! Masks read as foreground where the grey level is at least 128. Float maps
//! in `[0, 1]` are written as 8-bit grey with round-half-up quantization.
//!
//! `GLDT` layout (little endian): magic `GLDT`, `u32` height, `u32` width,
//! then `height · width` `f32` values in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::maps::{BinaryMask, FloatMap};

pub const GLDT_MAGIC: &[u8; 4] = b"GLDT";
pub const MASK_THRESHOLD: u8 = 128;

/// RGB image with channel-planar `[3, H, W]` values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("image must be non-empty"));
        }
        if data.len() != 3 * height * width {
            return Err(Error::invalid(format!(
                "image data has {} values, expected 3x{height}x{width}",
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("image values must lie in [0, 1]"));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = self.data.clone();
        data.chunks_mut(self.width).for_each(<[f32]>::reverse);
        Self { data, ..*self }
    }

    /// Bilinear resize with half-pixel centres.
    pub fn resize(&self, height: usize, width: usize) -> Result<Self> {
        let plane = self.height * self.width;
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            data.extend(resize_plane(
                &self.data[c * plane..(c + 1) * plane],
                (self.height, self.width),
                (height, width),
            )?);
        }
        Ok(Self { height, width, data })
    }
}

/// Bilinear resize of one row-major plane, half-pixel centres, clamped to [0, 1].
pub fn resize_plane(values: &[f32], from: (usize, usize), to: (usize, usize)) -> Result<Vec<f32>> {
    let ((h, w), (height, width)) = (from, to);
    if height == 0 || width == 0 || h == 0 || w == 0 || values.len() != h * w {
        return Err(Error::invalid("resize needs non-empty planes of matching length"));
    }
    if from == to {
        return Ok(values.to_vec());
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let s = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * s - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(inp - 1);
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, (src - i0 as f64) as f32)
            })
            .collect()
    };
    let (ty, tx) = (taps(height, h), taps(width, w));
    let at = |y: usize, x: usize| values[y * w + x];
    let mut out = Vec::with_capacity(height * width);
    for &(y0, y1, fy) in &ty {
        for &(x0, x1, fx) in &tx {
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
            let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
            out.push((top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0));
        }
    }
    Ok(out)
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

struct Decoded {
    height: usize,
    width: usize,
    channels: usize,
    bytes: Vec<u8>,
}

fn decode(path: &Path) -> Result<Decoded> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| Error::format(path, e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::format(path, e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(path, "expected 8-bit samples"));
    }
    let channels = info.color_type.samples();
    let (height, width) = (info.height as usize, info.width as usize);
    buf.truncate(info.buffer_size());
    // Rows are tightly packed for 8-bit output.
    if buf.len() != height * width * channels {
        return Err(Error::format(path, "unexpected row layout"));
    }
    Ok(Decoded {
        height,
        width,
        channels,
        bytes: buf,
    })
}

fn encode(path: &Path, width: usize, height: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::format(path, e.to_string()))?;
    writer.write_image_data(bytes).map_err(|e| Error::format(path, e.to_string()))?;
    writer.finish().map_err(|e| Error::format(path, e.to_string()))
}

/// Grey level of every pixel: the first sample for grey or RGB(A) input.
fn grey_levels(d: &Decoded) -> Vec<u8> {
    d.bytes.chunks(d.channels).map(|px| px[0]).collect()
}

pub fn load_image(path: &Path) -> Result<RgbImage> {
    let d = decode(path)?;
    let plane = d.height * d.width;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in d.bytes.chunks(d.channels).enumerate() {
        for c in 0..3 {
            let v = if d.channels >= 3 { px[c] } else { px[0] };
            data[c * plane + i] = f32::from(v) / 255.0;
        }
    }
    RgbImage::new(d.height, d.width, data)
}

pub fn save_image(path: &Path, image: &RgbImage) -> Result<()> {
    let plane = image.height * image.width;
    let bytes: Vec<u8> = (0..plane)
        .flat_map(|i| (0..3).map(move |c| (c, i)))
        .map(|(c, i)| quantize(image.data[c * plane + i]))
        .collect();
    encode(path, image.width, image.height, png::ColorType::Rgb, &bytes)
}

pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    let d = decode(path)?;
    let data = grey_levels(&d).into_iter().map(|v| u8::from(v >= MASK_THRESHOLD)).collect();
    BinaryMask::new(d.height, d.width, data)
}

pub fn save_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    let bytes: Vec<u8> = mask.data().iter().map(|&v| v * 255).collect();
    encode(path, mask.width(), mask.height(), png::ColorType::Grayscale, &bytes)
}

/// Grey PNG as values `level / 255`.
pub fn load_grey(path: &Path) -> Result<FloatMap> {
    let d = decode(path)?;
    let values = grey_levels(&d).into_iter().map(|v| f32::from(v) / 255.0).collect();
    FloatMap::new(d.height, d.width, values)
}

pub fn save_grey(path: &Path, map: &FloatMap) -> Result<()> {
    let bytes: Vec<u8> = map.values().iter().map(|&v| quantize(v)).collect();
    encode(path, map.width(), map.height(), png::ColorType::Grayscale, &bytes)
}

/// Loads an image and its mask, which must share dimensions.
pub fn load_pair(image: &Path, mask: &Path) -> Result<(RgbImage, BinaryMask)> {
    let img = load_image(image)?;
    let m = load_mask(mask)?;
    if (img.height, img.width) != (m.height(), m.width()) {
        return Err(Error::format(
            mask,
            format!(
                "mask is {}x{} but image {} is {}x{}",
                m.height(),
                m.width(),
                image.display(),
                img.height,
                img.width
            ),
        ));
    }
    Ok((img, m))
}

pub fn gldt_to_bytes(map: &FloatMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * map.values().len());
    out.extend_from_slice(GLDT_MAGIC);
    out.extend_from_slice(&(map.height() as u32).to_le_bytes());
    out.extend_from_slice(&(map.width() as u32).to_le_bytes());
    for v in map.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn gldt_from_bytes(bytes: &[u8], path: &Path) -> Result<FloatMap> {
    if bytes.len() < 12 || &bytes[..4] != GLDT_MAGIC {
        return Err(Error::format(path, "missing GLDT header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (h, w) = (word(4), word(8));
    let expected = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(12));
    if expected != Some(bytes.len()) {
        return Err(Error::format(path, format!("GLDT payload does not match {h}x{w}")));
    }
    let values = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    FloatMap::new(h, w, values).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_gldt(path: &Path, map: &FloatMap) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&gldt_to_bytes(map)).map_err(|e| Error::io(path, e))
}

pub fn read_gldt(path: &Path) -> Result<FloatMap> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    gldt_from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_rounds_half_up() {
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(-3.0), 0);
        assert_eq!(quantize(127.0 / 255.0), 127);
    }

    #[test]
    fn mask_threshold() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        encode(&p, 4, 1, png::ColorType::Grayscale, &[0, 127, 128, 255]).unwrap();
        assert_eq!(load_mask(&p).unwrap().data(), &[0, 0, 1, 1]);
        let g = load_grey(&p).unwrap();
        assert_eq!(g.values()[3], 1.0);
    }

    #[test]
    fn image_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i.png");
        let data: Vec<f32> = (0..3 * 5 * 7).map(|i| ((i * 53) % 256) as f32 / 255.0).collect();
        let img = RgbImage::new(5, 7, data).unwrap();
        save_image(&p, &img).unwrap();
        assert_eq!(load_image(&p).unwrap(), img);
    }

    #[test]
    fn gldt_round_trip_and_rejects_garbage() {
        let m = FloatMap::new(2, 3, vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.125]).unwrap();
        let bytes = gldt_to_bytes(&m);
        assert_eq!(&bytes[..4], b"GLDT");
        assert_eq!(bytes.len(), 12 + 24);
        let p = Path::new("x.gldt");
        assert_eq!(gldt_from_bytes(&bytes, p).unwrap(), m);
        assert!(gldt_from_bytes(&bytes[..20], p).is_err());
        assert!(gldt_from_bytes(b"NOPE00000000", p).is_err());
    }

    #[test]
    fn missing_and_malformed_files() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_image(&dir.path().join("none.png")), Err(Error::Io { .. })));
        let bad = dir.path().join("bad.png");
        std::fs::write(&bad, b"not a png").unwrap();
        assert!(matches!(load_mask(&bad), Err(Error::Format { .. })));
    }

    #[test]
    fn pair_dimension_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (pi, pm) = (dir.path().join("i.png"), dir.path().join("m.png"));
        save_image(&pi, &RgbImage::new(2, 2, vec![0.5; 12]).unwrap()).unwrap();
        save_mask(&pm, &BinaryMask::zeros(2, 3).unwrap()).unwrap();
        assert!(load_pair(&pi, &pm).is_err());
    }

    #[test]
    fn resize_identity_and_flip() {
        let img = RgbImage::new(2, 3, (0..18).map(|v| v as f32 / 17.0).collect()).unwrap();
        assert_eq!(img.resize(2, 3).unwrap(), img);
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
        assert_eq!(img.flip_horizontal().get(1, 0, 0), img.get(1, 0, 2));
        let up = img.resize(8, 8).unwrap();
        assert!(up.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
