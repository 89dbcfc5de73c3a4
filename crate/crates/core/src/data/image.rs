//! 8-bit RGB images on disk and their `[-1, 1]` tensor form.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use asymgan_autograd::{Scalar, Tensor};

use crate::error::{Error, Result};

/// Interleaved 8-bit RGB raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// `1×3×H×W` tensor with `v / 127.5 − 1`.
    pub fn to_tensor<S: Scalar>(&self) -> Tensor<S> {
        let plane = self.width * self.height;
        let mut out = vec![S::zero(); 3 * plane];
        for (p, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + p] = S::lit(px[c] as f64 / 127.5 - 1.0);
            }
        }
        Tensor::new([1, 3, self.height, self.width], out).expect("consistent size")
    }

    /// Inverse of [`RgbImage::to_tensor`] for one batch item, with clamping.
    pub fn from_tensor<S: Scalar>(t: &Tensor<S>, index: usize) -> Result<Self> {
        let (b, c, h, w) = t.dims4()?;
        if c != 3 || index >= b {
            return Err(Error::Argument(format!(
                "cannot take RGB image {index} from shape {:?}",
                t.shape()
            )));
        }
        let plane = h * w;
        let base = index * 3 * plane;
        let mut img = Self::new(w, h);
        for p in 0..plane {
            for ch in 0..3 {
                let v = t.data()[base + ch * plane + p].to_f64_lossy();
                img.data[p * 3 + ch] = ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
            }
        }
        Ok(img)
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        let mut enc = png::Encoder::new(&mut buf, self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let map = |e: png::EncodingError| Error::Image {
            path: "<memory>".into(),
            message: e.to_string(),
        };
        let mut writer = enc.write_header().map_err(map)?;
        writer.write_image_data(&self.data).map_err(map)?;
        writer.finish().map_err(map)?;
        Ok(buf)
    }

    pub fn decode_png(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut dec = png::Decoder::new(Cursor::new(bytes));
        dec.set_transformations(png::Transformations::normalize_to_color8());
        let mut reader = dec.read_info().map_err(|e| e.to_string())?;
        let size = reader.output_buffer_size().ok_or("image too large")?;
        let mut buf = vec![0; size];
        let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
        let (w, h) = (info.width as usize, info.height as usize);
        let channels = info.color_type.samples();
        let mut img = Self::new(w, h);
        for p in 0..w * h {
            let src = &buf[p * channels..(p + 1) * channels];
            let rgb = match channels {
                1 | 2 => [src[0]; 3],
                _ => [src[0], src[1], src[2]],
            };
            img.data[p * 3..p * 3 + 3].copy_from_slice(&rgb);
        }
        Ok(img)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode_png().map_err(|e| match e {
            Error::Image { message, .. } => Error::Image {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_png(&bytes).map_err(|message| Error::Image {
            path: path.to_path_buf(),
            message,
        })
    }
}

/// Tiles equally sized `1×3×H×W` (or batched) images into a grid, one row
/// per inner vector, and writes it as PNG.
pub fn save_grid<S: Scalar>(path: &Path, rows: &[Vec<Tensor<S>>]) -> Result<()> {
    let mut tiles: Vec<Vec<RgbImage>> = Vec::new();
    for row in rows {
        let mut r = Vec::new();
        for t in row {
            let (b, ..) = t.dims4()?;
            for i in 0..b {
                r.push(RgbImage::from_tensor(t, i)?);
            }
        }
        tiles.push(r);
    }
    let first = tiles
        .iter()
        .flatten()
        .next()
        .ok_or_else(|| Error::Argument("empty image grid".into()))?;
    let (tw, th) = (first.width, first.height);
    let cols = tiles.iter().map(Vec::len).max().unwrap_or(0);
    let mut grid = RgbImage::new(tw * cols, th * tiles.len());
    for (ri, row) in tiles.iter().enumerate() {
        for (ci, tile) in row.iter().enumerate() {
            if tile.width != tw || tile.height != th {
                return Err(Error::Argument("grid tiles differ in size".into()));
            }
            for y in 0..th {
                for x in 0..tw {
                    grid.set_pixel(ci * tw + x, ri * th + y, tile.pixel(x, y));
                }
            }
        }
    }
    grid.save(path)
}
