//! 2-D real images and their file containers.
//!
//! Image file layout (little-endian): `"MPIMG" | version: u32 | H: u64 | W: u64 | H*W f64`,
//! row-major. Masks use the same container with values in {0, 1}.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::checkpoint::{read_f64s, read_u32, read_u64};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: &[u8; 5] = b"MPIMG";
pub const IMAGE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Modality {
    /// The modality being reconstructed.
    Target,
    /// The co-registered auxiliary contrast.
    Aux,
    /// Binary mask.
    Mask,
    #[default]
    Other,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
    pub modality: Modality,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>, modality: Modality) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch {
                op: "image",
                lhs: vec![height, width],
                rhs: vec![data.len()],
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "image" });
        }
        Ok(Image {
            height,
            width,
            data,
            modality,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64, modality: Modality) -> Self {
        Image {
            height,
            width,
            data: vec![value; height * width],
            modality,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn with_modality(mut self, m: Modality) -> Self {
        self.modality = m;
        self
    }

    /// `[1, 1, H, W]` tensor view for the network code.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![1, 1, self.height, self.width], self.data.clone())
    }

    /// Accepts any tensor with `H * W` elements.
    pub fn from_tensor(t: &Tensor, height: usize, width: usize, modality: Modality) -> Result<Self> {
        Image::new(height, width, t.data().to_vec(), modality)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn sq_dist(&self, other: &Image) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    pub fn rmse(&self, other: &Image) -> f64 {
        (self.sq_dist(other) / self.data.len() as f64).sqrt()
    }

    pub fn clamp01(&self) -> Image {
        Image {
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            ..self.clone()
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(IMAGE_MAGIC)?;
        w.write_all(&IMAGE_VERSION.to_le_bytes())?;
        w.write_all(&(self.height as u64).to_le_bytes())?;
        w.write_all(&(self.width as u64).to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Image> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != IMAGE_MAGIC {
            return Err(Error::Format("not an MPIMG file".into()));
        }
        let version = read_u32(r)?;
        if version != IMAGE_VERSION {
            return Err(Error::Format(format!("unsupported image version {version}")));
        }
        let h = read_u64(r)? as usize;
        let w = read_u64(r)? as usize;
        let data = read_f64s(r, h * w)?;
        Image::new(h, w, data, Modality::Other)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Image> {
        Image::read_from(&mut BufReader::new(File::open(path)?))
    }

    /// 8-bit binary PGM, `[0, 1]` mapped linearly to `[0, 255]` after clamping.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }

    pub fn save_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_pgm())?;
        Ok(())
    }
}

/// Lays images out left to right with a one-pixel dark gutter.
pub fn side_by_side(images: &[&Image]) -> Result<Image> {
    let h = images.first().map(|i| i.height).unwrap_or(0);
    if images.iter().any(|i| i.height != h) {
        return Err(Error::invalid("side_by_side: heights differ"));
    }
    let w: usize = images.iter().map(|i| i.width).sum::<usize>() + images.len().saturating_sub(1);
    let mut out = Image::filled(h, w, 0.0, Modality::Other);
    let mut x0 = 0;
    for img in images {
        for y in 0..h {
            for x in 0..img.width {
                out.set(y, x0 + x, img.get(y, x));
            }
        }
        x0 += img.width + 1;
    }
    Ok(out)
}
