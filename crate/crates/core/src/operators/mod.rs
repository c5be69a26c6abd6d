//! Degradation operators `y = F(x) + noise`, their exact adjoints, and the
//! k-space sampling masks.
//!
//! Complex measurements are stored as two real planes `[re, im]` so the
//! rest of the pipeline stays real-valued; adjoints are taken with respect
//! to the real inner product on the stacked planes.

mod fft;
mod mask;

pub use fft::{dft2, idft2, Dft2};
pub use mask::{frequency_index, make_mask};

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;

use crate::autodiff::LinearMap;
use crate::checkpoint::{read_f64s, read_u32, read_u64};
use crate::error::{Error, Result};
use crate::image::{Image, Modality};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub enum Degradation {
    /// Block average over `factor x factor` tiles.
    Downsample { factor: usize },
    /// Normalized Gaussian kernel of half-width `radius`, reflect padding.
    GaussianBlur { sigma: f64, radius: usize },
    /// `mask * DFT2(x)` with a binary mask in unshifted frequency layout.
    KSpaceMask { mask: Image },
    /// Dense `m x (H*W)` matrix on the flattened image. Used by the
    /// closed-form verification problems.
    Matrix { matrix: Tensor },
}

#[derive(Clone, Debug)]
pub struct ForwardOperator {
    kind: Degradation,
    height: usize,
    width: usize,
    kernel: Vec<f64>,
    dft: Option<Dft2>,
}

/// Observed data. `planes` is 1 for real measurements, 2 for `[re, im]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    pub planes: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
    pub noise_sigma: f64,
}

fn check_canvas(h: usize, w: usize) -> Result<()> {
    let ok = |n: usize| n.is_power_of_two() && (16..=128).contains(&n);
    if ok(h) && ok(w) {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "image operators need power-of-two sizes in 16..=128, got {h}x{w}"
        )))
    }
}

impl ForwardOperator {
    pub fn downsample(height: usize, width: usize, factor: usize) -> Result<Self> {
        check_canvas(height, width)?;
        if factor == 0 || height % factor != 0 || width % factor != 0 {
            return Err(Error::invalid(format!(
                "downsample factor {factor} must divide {height}x{width}"
            )));
        }
        Ok(Self::bare(Degradation::Downsample { factor }, height, width))
    }

    pub fn gaussian_blur(height: usize, width: usize, sigma: f64, radius: usize) -> Result<Self> {
        check_canvas(height, width)?;
        if sigma <= 0.0 || radius == 0 || radius >= height.min(width) {
            return Err(Error::invalid(format!("blur needs sigma > 0 and 0 < radius < size, got {sigma}, {radius}")));
        }
        let mut kernel: Vec<f64> = (-(radius as isize)..=radius as isize)
            .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
            .collect();
        let total: f64 = kernel.iter().sum();
        kernel.iter_mut().for_each(|v| *v /= total);
        let mut op = Self::bare(Degradation::GaussianBlur { sigma, radius }, height, width);
        op.kernel = kernel;
        Ok(op)
    }

    pub fn kspace(mask: Image) -> Result<Self> {
        let (h, w) = mask.shape();
        check_canvas(h, w)?;
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid("k-space mask must be binary"));
        }
        let mut op = Self::bare(Degradation::KSpaceMask { mask: mask.with_modality(Modality::Mask) }, h, w);
        op.dft = Some(Dft2::new(h, w)?);
        Ok(op)
    }

    pub fn matrix(height: usize, width: usize, matrix: Tensor) -> Result<Self> {
        if matrix.rank() != 2 || matrix.shape()[1] != height * width {
            return Err(Error::ShapeMismatch {
                op: "matrix operator",
                lhs: matrix.shape().to_vec(),
                rhs: vec![height * width],
            });
        }
        Ok(Self::bare(Degradation::Matrix { matrix }, height, width))
    }

    fn bare(kind: Degradation, height: usize, width: usize) -> Self {
        ForwardOperator {
            kind,
            height,
            width,
            kernel: Vec::new(),
            dft: None,
        }
    }

    pub fn kind(&self) -> &Degradation {
        &self.kind
    }

    pub fn input_shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// `(planes, rows, cols)` of the measurement.
    pub fn measurement_shape(&self) -> (usize, usize, usize) {
        match &self.kind {
            Degradation::Downsample { factor } => (1, self.height / factor, self.width / factor),
            Degradation::GaussianBlur { .. } => (1, self.height, self.width),
            Degradation::KSpaceMask { .. } => (2, self.height, self.width),
            Degradation::Matrix { matrix } => (1, 1, matrix.shape()[0]),
        }
    }

    fn measurement_len(&self) -> usize {
        let (p, h, w) = self.measurement_shape();
        p * h * w
    }

    pub fn apply(&self, x: &Image) -> Result<Measurement> {
        if x.shape() != (self.height, self.width) {
            return Err(Error::ShapeMismatch {
                op: "operator apply",
                lhs: vec![self.height, self.width],
                rhs: vec![x.height(), x.width()],
            });
        }
        let mut out = vec![0.0; self.measurement_len()];
        self.forward_raw(x.data(), &mut out);
        let (planes, height, width) = self.measurement_shape();
        Ok(Measurement {
            planes,
            height,
            width,
            data: out,
            noise_sigma: 0.0,
        })
    }

    pub fn adjoint(&self, m: &Measurement) -> Result<Image> {
        let expect = self.measurement_shape();
        if (m.planes, m.height, m.width) != expect || m.data.len() != self.measurement_len() {
            return Err(Error::ShapeMismatch {
                op: "operator adjoint",
                lhs: vec![expect.0, expect.1, expect.2],
                rhs: vec![m.planes, m.height, m.width],
            });
        }
        let mut out = vec![0.0; self.height * self.width];
        self.adjoint_raw(&m.data, &mut out);
        Image::new(self.height, self.width, out, Modality::Other)
    }

    fn forward_raw(&self, x: &[f64], out: &mut [f64]) {
        let (h, w) = (self.height, self.width);
        match &self.kind {
            Degradation::Downsample { factor: k } => {
                let wo = w / k;
                out.fill(0.0);
                let s = 1.0 / (k * k) as f64;
                for i in 0..h {
                    for j in 0..w {
                        out[(i / k) * wo + j / k] += s * x[i * w + j];
                    }
                }
            }
            Degradation::GaussianBlur { .. } => {
                let tmp = self.blur_rows(x, false);
                out.copy_from_slice(&self.blur_cols(&tmp, false));
            }
            Degradation::KSpaceMask { mask } => {
                let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
                self.dft.as_ref().unwrap().forward(&mut buf);
                let (re, im) = out.split_at_mut(h * w);
                for (k, z) in buf.iter().enumerate() {
                    let m = mask.data()[k];
                    re[k] = m * z.re;
                    im[k] = m * z.im;
                }
            }
            Degradation::Matrix { matrix } => {
                let d = h * w;
                for (r, o) in out.iter_mut().enumerate() {
                    *o = matrix.data()[r * d..(r + 1) * d].iter().zip(x).map(|(a, b)| a * b).sum();
                }
            }
        }
    }

    fn adjoint_raw(&self, y: &[f64], out: &mut [f64]) {
        let (h, w) = (self.height, self.width);
        match &self.kind {
            Degradation::Downsample { factor: k } => {
                let wo = w / k;
                let s = 1.0 / (k * k) as f64;
                for i in 0..h {
                    for j in 0..w {
                        out[i * w + j] = s * y[(i / k) * wo + j / k];
                    }
                }
            }
            Degradation::GaussianBlur { .. } => {
                let tmp = self.blur_cols(y, true);
                out.copy_from_slice(&self.blur_rows(&tmp, true));
            }
            Degradation::KSpaceMask { mask } => {
                let (re, im) = y.split_at(h * w);
                let mut buf: Vec<Complex64> = (0..h * w)
                    .map(|k| Complex64::new(mask.data()[k] * re[k], mask.data()[k] * im[k]))
                    .collect();
                self.dft.as_ref().unwrap().inverse(&mut buf);
                for (o, z) in out.iter_mut().zip(&buf) {
                    *o = z.re;
                }
            }
            Degradation::Matrix { matrix } => {
                let d = h * w;
                out.fill(0.0);
                for (r, &yr) in y.iter().enumerate() {
                    for (o, a) in out.iter_mut().zip(&matrix.data()[r * d..(r + 1) * d]) {
                        *o += a * yr;
                    }
                }
            }
        }
    }

    /// 1-D reflect-padded correlation along each row, or its transpose.
    fn blur_rows(&self, x: &[f64], transpose: bool) -> Vec<f64> {
        let (h, w) = (self.height, self.width);
        let mut out = vec![0.0; h * w];
        for i in 0..h {
            blur_line(&x[i * w..(i + 1) * w], &mut out[i * w..(i + 1) * w], &self.kernel, transpose);
        }
        out
    }

    fn blur_cols(&self, x: &[f64], transpose: bool) -> Vec<f64> {
        let (h, w) = (self.height, self.width);
        let mut out = vec![0.0; h * w];
        let (mut src, mut dst) = (vec![0.0; h], vec![0.0; h]);
        for j in 0..w {
            for i in 0..h {
                src[i] = x[i * w + j];
            }
            blur_line(&src, &mut dst, &self.kernel, transpose);
            for i in 0..h {
                out[i * w + j] = dst[i];
            }
        }
        out
    }

    /// A nonzero image with `apply(x) = 0`, when the operator has a
    /// nontrivial null space (downsampling and partial k-space).
    pub fn null_space_witness(&self, seed: u64) -> Option<Image> {
        let scale = match &self.kind {
            Degradation::Downsample { factor } if *factor > 1 => (factor * factor) as f64,
            Degradation::KSpaceMask { mask } if mask.data().iter().any(|&v| v == 0.0) => 1.0,
            _ => return None,
        };
        // A A^T = I / scale on the range, so x - scale * A^T A x is in the null space.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..self.height * self.width)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let x = Image::new(self.height, self.width, x, Modality::Other).ok()?;
        let back = self.adjoint(&self.apply(&x).ok()?).ok()?;
        let data = x.data().iter().zip(back.data()).map(|(a, b)| a - scale * b).collect();
        Image::new(self.height, self.width, data, Modality::Other).ok()
    }

    /// Adjoint reconstruction rescaled so a constant image maps back to
    /// itself: nearest upsampling for downsampling, zero filling for k-space.
    pub fn baseline(&self, y: &Measurement) -> Result<Image> {
        let ones = Image::filled(self.height, self.width, 1.0, Modality::Other);
        let gain = self.adjoint(&self.apply(&ones)?)?.mean();
        if !(gain.abs() > 1e-12) {
            return Err(Error::invalid("baseline: operator annihilates constant images"));
        }
        let back = self.adjoint(y)?;
        let data = back.data().iter().map(|v| v / gain).collect();
        Image::new(self.height, self.width, data, Modality::Target)
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    // Mirror without repeating the edge sample: -1 -> 1, n -> n - 2.
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

fn blur_line(src: &[f64], dst: &mut [f64], kernel: &[f64], transpose: bool) {
    let n = src.len();
    let r = (kernel.len() / 2) as isize;
    dst.fill(0.0);
    for i in 0..n {
        for (t, &g) in kernel.iter().enumerate() {
            let j = reflect(i as isize + t as isize - r, n);
            if transpose {
                dst[j] += g * src[i];
            } else {
                dst[i] += g * src[j];
            }
        }
    }
}

impl LinearMap for ForwardOperator {
    fn name(&self) -> &'static str {
        match self.kind {
            Degradation::Downsample { .. } => "downsample",
            Degradation::GaussianBlur { .. } => "gaussian_blur",
            Degradation::KSpaceMask { .. } => "kspace_mask",
            Degradation::Matrix { .. } => "matrix",
        }
    }

    fn input_shape(&self) -> Vec<usize> {
        vec![1, self.height, self.width]
    }

    fn output_shape(&self) -> Vec<usize> {
        let (p, h, w) = self.measurement_shape();
        vec![p, h, w]
    }

    fn forward(&self, x: &[f64], out: &mut [f64]) {
        self.forward_raw(x, out)
    }

    fn adjoint(&self, y: &[f64], out: &mut [f64]) {
        self.adjoint_raw(y, out)
    }
}

pub const MEASUREMENT_MAGIC: &[u8; 5] = b"MPMSR";
pub const MEASUREMENT_VERSION: u32 = 1;

impl Measurement {
    pub fn zeros_like(&self) -> Measurement {
        Measurement {
            data: vec![0.0; self.data.len()],
            ..self.clone()
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn dot(&self, other: &Measurement) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    /// `[planes, rows, cols]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.planes, self.height, self.width], self.data.clone())
    }

    /// Layout: `"MPMSR" | version: u32 | planes, rows, cols: u64 | noise_sigma: f64 | data: f64...`
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MEASUREMENT_MAGIC)?;
        w.write_all(&MEASUREMENT_VERSION.to_le_bytes())?;
        for d in [self.planes, self.height, self.width] {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        w.write_all(&self.noise_sigma.to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Measurement> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != MEASUREMENT_MAGIC {
            return Err(Error::Format("not an MPMSR file".into()));
        }
        let version = read_u32(r)?;
        if version != MEASUREMENT_VERSION {
            return Err(Error::Format(format!("unsupported measurement version {version}")));
        }
        let planes = read_u64(r)? as usize;
        let height = read_u64(r)? as usize;
        let width = read_u64(r)? as usize;
        let noise_sigma = read_f64s(r, 1)?[0];
        let data = read_f64s(r, planes * height * width)?;
        Ok(Measurement {
            planes,
            height,
            width,
            data,
            noise_sigma,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Measurement> {
        Measurement::read_from(&mut BufReader::new(File::open(path)?))
    }
}

/// Adds i.i.d. `N(0, sigma^2)` to every real component. Deterministic in `seed`.
pub fn add_noise(m: &Measurement, sigma: f64, seed: u64) -> Result<Measurement> {
    if !(sigma >= 0.0) {
        return Err(Error::invalid(format!("noise sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(m.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = m
        .data
        .iter()
        .map(|v| {
            let z: f64 = StandardNormal.sample(&mut rng);
            v + sigma * z
        })
        .collect();
    Ok(Measurement {
        data,
        noise_sigma: sigma,
        ..m.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::randn(&[h * w], 1.0, &mut rng);
        Image::new(h, w, t.into_data(), Modality::Other).unwrap()
    }

    #[test]
    fn baseline_inverts_downsampling_of_blocks() {
        let op = ForwardOperator::downsample(16, 16, 4).unwrap();
        let x = Image::new(16, 16, (0..256).map(|i| ((i / 16 / 4) * 4 + (i % 16) / 4) as f64).collect(), Modality::Target).unwrap();
        assert_eq!(op.baseline(&op.apply(&x).unwrap()).unwrap().data(), x.data());
        let k = ForwardOperator::kspace(Image::filled(16, 16, 1.0, Modality::Mask)).unwrap();
        let back = k.baseline(&k.apply(&x).unwrap()).unwrap();
        assert!(back.data().iter().zip(x.data()).all(|(a, b)| (a - b).abs() < 1e-10));
    }

    #[test]
    fn downsample_preserves_constants() {
        let op = ForwardOperator::downsample(32, 32, 2).unwrap();
        let m = op.apply(&Image::filled(32, 32, 0.7, Modality::Target)).unwrap();
        assert_eq!((m.height, m.width), (16, 16));
        assert!(m.data.iter().all(|v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn downsample_adjoint_replicates() {
        let op = ForwardOperator::downsample(16, 16, 4).unwrap();
        let mut m = op.apply(&Image::filled(16, 16, 0.0, Modality::Other)).unwrap();
        m.data[5] = 3.2;
        let back = op.adjoint(&m).unwrap();
        // cell 5 is block row 1, block col 1
        for i in 0..16 {
            for j in 0..16 {
                let expect = if i / 4 == 1 && j / 4 == 1 { 3.2 / 16.0 } else { 0.0 };
                assert_eq!(back.get(i, j), expect);
            }
        }
    }

    #[test]
    fn blur_preserves_constants() {
        let op = ForwardOperator::gaussian_blur(16, 32, 1.3, 4).unwrap();
        let m = op.apply(&Image::filled(16, 32, 0.4, Modality::Target)).unwrap();
        assert!(m.data.iter().all(|v| (v - 0.4).abs() < 1e-14));
    }

    #[test]
    fn full_mask_round_trips() {
        let x = rand_image(16, 16, 3);
        let op = ForwardOperator::kspace(Image::filled(16, 16, 1.0, Modality::Mask)).unwrap();
        let m = op.apply(&x).unwrap();
        let (re, _im) = idft2(&m.data[..256], &m.data[256..], 16, 16).unwrap();
        for (a, b) in re.iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-10);
        }
        let back = op.adjoint(&m).unwrap();
        assert!(back.rmse(&x) < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let op = ForwardOperator::downsample(32, 32, 2).unwrap();
        assert!(op.apply(&Image::filled(16, 16, 0.0, Modality::Other)).is_err());
        assert!(ForwardOperator::downsample(32, 32, 3).is_err());
        assert!(ForwardOperator::downsample(24, 24, 2).is_err());
    }

    #[test]
    fn downsample_null_space_witness() {
        let op = ForwardOperator::downsample(64, 64, 4).unwrap();
        let x = op.null_space_witness(1).unwrap();
        assert!(x.data().iter().map(|v| v * v).sum::<f64>() > 1.0);
        assert!(op.apply(&x).unwrap().sq_norm() < 1e-20);
    }

    #[test]
    fn noise_statistics() {
        let op = ForwardOperator::blur_free_identity();
        let clean = op.apply(&Image::filled(64, 64, 0.5, Modality::Other)).unwrap();
        assert_eq!(add_noise(&clean, 0.0, 9).unwrap(), clean);
        let noisy = add_noise(&clean, 0.05, 9).unwrap();
        let n = noisy.data.len() as f64;
        let diffs: Vec<f64> = noisy.data.iter().zip(&clean.data).map(|(a, b)| a - b).collect();
        let mean = diffs.iter().sum::<f64>() / n;
        let std = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((std - 0.05).abs() / 0.05 < 0.05, "std {std}");
        assert_eq!(add_noise(&clean, 0.05, 9).unwrap(), noisy);
    }

    #[test]
    fn complex_noise_hits_both_planes_independently() {
        let op = ForwardOperator::kspace(Image::filled(16, 16, 1.0, Modality::Mask)).unwrap();
        let clean = op.apply(&Image::filled(16, 16, 0.0, Modality::Other)).unwrap();
        let noisy = add_noise(&clean, 0.1, 4).unwrap();
        let (re, im) = noisy.data.split_at(256);
        assert!(re.iter().all(|v| *v != 0.0) && im.iter().all(|v| *v != 0.0));
        let corr: f64 = re.iter().zip(im).map(|(a, b)| a * b).sum::<f64>() / 256.0 / 0.01;
        assert!(corr.abs() < 0.25, "re/im correlation {corr}");
        let other = add_noise(&clean, 0.1, 5).unwrap();
        assert_ne!(other.data, noisy.data);
    }

    #[test]
    fn measurement_file_round_trip() {
        let op = ForwardOperator::kspace(Image::filled(16, 16, 1.0, Modality::Mask)).unwrap();
        let m = add_noise(&op.apply(&rand_image(16, 16, 1)).unwrap(), 0.01, 2).unwrap();
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..5], b"MPMSR");
        assert_eq!(Measurement::read_from(&mut buf.as_slice()).unwrap(), m);
    }

    impl ForwardOperator {
        fn blur_free_identity() -> ForwardOperator {
            ForwardOperator::downsample(64, 64, 1).unwrap()
        }
    }
}
