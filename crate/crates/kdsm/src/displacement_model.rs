//! Image-space displacement representation and the pose regressor.
//!
//! Displacement fields are resampled onto two 128x128 pixel grids via
//! the cloth's UV atlas — channels 0-2 hold the front side, 3-5 the
//! back — and a per-pixel ridge regressor maps a flat pose feature
//! vector to the masked pixels. Unmasked pixels (no cloth texel) are
//! exactly zero everywhere: in rasterized images, through training,
//! and in predictions.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, Vector2, Vector3};

use crate::embedding::read_header_line;
use crate::skinning::Pose;
use crate::KdsmError;

/// Pixels per image side.
pub const IMAGE_SIZE: usize = 128;
/// Displacement channels per pixel: front xyz then back xyz.
pub const IMAGE_CHANNELS: usize = 6;
/// Default ridge penalty.
pub const DEFAULT_RIDGE_LAMBDA: f64 = 1e-3;

const PIXELS: usize = IMAGE_SIZE * IMAGE_SIZE;
const IMAGE_MAGIC: &[u8; 4] = b"CIMG";

/// Which side of the cloth a vertex is rasterized to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Front,
    Back,
}

impl Side {
    fn channel_base(self) -> usize {
        match self {
            Side::Front => 0,
            Side::Back => 3,
        }
    }

    fn mask_bit(self) -> u8 {
        match self {
            Side::Front => 1,
            Side::Back => 2,
        }
    }
}

/// A 128x128x6 displacement image plus its coverage mask. `data` is
/// row-major and channel-last; `mask` holds one byte per pixel with
/// bit 0 set when the front side is covered and bit 1 for the back.
#[derive(Debug, Clone, PartialEq)]
pub struct ClothImage {
    pub data: Vec<f64>,
    pub mask: Vec<u8>,
}

impl ClothImage {
    pub fn zeros() -> ClothImage {
        ClothImage {
            data: vec![0.0; PIXELS * IMAGE_CHANNELS],
            mask: vec![0; PIXELS],
        }
    }

    pub fn pixel(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * IMAGE_SIZE + x) * IMAGE_CHANNELS + c]
    }

    fn pixel_mut(&mut self, x: usize, y: usize, c: usize) -> &mut f64 {
        &mut self.data[(y * IMAGE_SIZE + x) * IMAGE_CHANNELS + c]
    }

    pub fn masked(&self, x: usize, y: usize, side: Side) -> bool {
        self.mask[y * IMAGE_SIZE + x] & side.mask_bit() != 0
    }
}

/// Bilinear footprint of a UV coordinate on the pixel grid: the 2x2
/// pixel block and its weights. The grid puts pixel (i, j) at
/// uv = (i, j) / IMAGE_SIZE, so uv 0.5 lands exactly on pixel 64;
/// coordinates past the last pixel clamp onto it.
fn bilinear_footprint(uv: &Vector2<f64>) -> [(usize, usize, f64); 4] {
    let mut coords = [0usize; 2];
    let mut fracs = [0.0f64; 2];
    for a in 0..2 {
        let x = (uv[a] * IMAGE_SIZE as f64).clamp(0.0, (IMAGE_SIZE - 1) as f64);
        let mut p = x.floor() as usize;
        if p > IMAGE_SIZE - 2 {
            p = IMAGE_SIZE - 2;
        }
        coords[a] = p;
        fracs[a] = x - p as f64;
    }
    let (px, py) = (coords[0], coords[1]);
    let (fx, fy) = (fracs[0], fracs[1]);
    [
        (px, py, (1.0 - fx) * (1.0 - fy)),
        (px + 1, py, fx * (1.0 - fy)),
        (px, py + 1, (1.0 - fx) * fy),
        (px + 1, py + 1, fx * fy),
    ]
}

fn check_atlas(
    count: usize,
    uvs: &[Vector2<f64>],
    sides: &[Side],
) -> Result<(), KdsmError> {
    if uvs.len() != count || sides.len() != count {
        return Err(KdsmError::ShapeMismatch(format!(
            "{count} vertices with {} uvs and {} side labels",
            uvs.len(),
            sides.len()
        )));
    }
    Ok(())
}

/// Scatters a per-vertex displacement field into a cloth image: each
/// vertex adds its displacement to the 4 pixels under its UV with
/// bilinear weights, and every touched pixel is normalized by its
/// accumulated weight and marked in the mask.
pub fn rasterize(
    field: &[Vector3<f64>],
    uvs: &[Vector2<f64>],
    sides: &[Side],
) -> Result<ClothImage, KdsmError> {
    check_atlas(field.len(), uvs, sides)?;
    let mut image = ClothImage::zeros();
    let mut weight = vec![0.0f64; PIXELS * 2];
    for ((d, uv), &side) in field.iter().zip(uvs).zip(sides) {
        let base = side.channel_base();
        for (px, py, w) in bilinear_footprint(uv) {
            for a in 0..3 {
                *image.pixel_mut(px, py, base + a) += w * d[a];
            }
            weight[(py * IMAGE_SIZE + px) * 2 + base / 3] += w;
        }
    }
    for p in 0..PIXELS {
        for (half, side) in [(0, Side::Front), (1, Side::Back)] {
            let w = weight[p * 2 + half];
            if w > 0.0 {
                for a in 0..3 {
                    image.data[p * IMAGE_CHANNELS + half * 3 + a] /= w;
                }
                image.mask[p] |= side.mask_bit();
            }
        }
    }
    Ok(image)
}

/// Samples a cloth image back to per-vertex displacements by masked
/// bilinear interpolation: unmasked pixels are excluded and the weights
/// renormalized, so coverage gaps do not bleed zeros into the field.
/// A vertex whose whole footprint is unmasked reads 0.
pub fn gather(
    image: &ClothImage,
    uvs: &[Vector2<f64>],
    sides: &[Side],
) -> Result<Vec<Vector3<f64>>, KdsmError> {
    check_atlas(uvs.len(), uvs, sides)?;
    let mut out = Vec::with_capacity(uvs.len());
    for (uv, &side) in uvs.iter().zip(sides) {
        let base = side.channel_base();
        let mut value = Vector3::zeros();
        let mut total = 0.0;
        for (px, py, w) in bilinear_footprint(uv) {
            if image.masked(px, py, side) {
                for a in 0..3 {
                    value[a] += w * image.pixel(px, py, base + a);
                }
                total += w;
            }
        }
        if total > 0.0 {
            value /= total;
        }
        out.push(value);
    }
    Ok(out)
}

/// Flat pose feature: six numbers per joint (rotation angles, then the
/// local translation), concatenated in joint order.
pub fn pose_feature(pose: &Pose) -> Vec<f64> {
    let mut out = Vec::with_capacity(pose.angles.len() * 6);
    for (angles, translation) in pose.angles.iter().zip(&pose.translations) {
        out.extend_from_slice(&[
            angles.x,
            angles.y,
            angles.z,
            translation.x,
            translation.y,
            translation.z,
        ]);
    }
    out
}

/// Per-pixel ridge regressor from pose features to masked image
/// channels. Features are standardized with the recorded mean and
/// deviation; each masked channel gets a weight vector and intercept.
pub struct Regressor {
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub lambda: f64,
    pub mask: Vec<u8>,
    /// Flat data indices of the trained channels, ascending.
    channels: Vec<u32>,
    /// One column of feature weights per trained channel.
    weights: DMatrix<f64>,
    intercepts: Vec<f64>,
}

const STD_FLOOR: f64 = 1e-12;

fn standardize(feature: &[f64], mean: &[f64], std: &[f64]) -> DVector<f64> {
    DVector::from_iterator(
        feature.len(),
        feature
            .iter()
            .zip(mean)
            .zip(std)
            .map(|((f, m), s)| if *s <= STD_FLOOR { 0.0 } else { (f - m) / s }),
    )
}

/// Flat data indices of every masked channel of `mask`, ascending.
fn masked_channels(mask: &[u8]) -> Vec<u32> {
    let mut out = Vec::new();
    for (p, &bits) in mask.iter().enumerate() {
        for (half, side) in [(0usize, Side::Front), (1, Side::Back)] {
            if bits & side.mask_bit() != 0 {
                for a in 0..3 {
                    out.push((p * IMAGE_CHANNELS + half * 3 + a) as u32);
                }
            }
        }
    }
    out
}

/// Trains one ridge system per masked channel, all sharing the same
/// standardized feature matrix: w = (Z'Z + lambda I)^-1 Z' (y - mean y),
/// intercept = mean y. Requires at least two examples with identical
/// masks and feature lengths.
pub fn train(
    features: &[Vec<f64>],
    images: &[ClothImage],
    lambda: f64,
) -> Result<Regressor, KdsmError> {
    let n = features.len();
    if n < 2 || images.len() != n {
        return Err(KdsmError::ShapeMismatch(format!(
            "need >= 2 training examples, got {} features and {} images",
            n,
            images.len()
        )));
    }
    let f = features[0].len();
    if features.iter().any(|row| row.len() != f) {
        return Err(KdsmError::ShapeMismatch(
            "inconsistent feature lengths".into(),
        ));
    }
    let mask = images[0].mask.clone();
    if images.iter().any(|img| img.mask != mask) {
        return Err(KdsmError::ShapeMismatch(
            "training images have different masks".into(),
        ));
    }

    let mut feature_mean = vec![0.0; f];
    for row in features {
        for (m, v) in feature_mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut feature_mean {
        *m /= n as f64;
    }
    let mut feature_std = vec![0.0; f];
    for row in features {
        for ((s, v), m) in feature_std.iter_mut().zip(row).zip(&feature_mean) {
            *s += (v - m) * (v - m);
        }
    }
    for s in &mut feature_std {
        *s = (*s / n as f64).sqrt();
    }

    let z = DMatrix::from_fn(n, f, |r, c| {
        let s = feature_std[c];
        if s <= STD_FLOOR {
            0.0
        } else {
            (features[r][c] - feature_mean[c]) / s
        }
    });
    let mut gram = z.transpose() * &z;
    for i in 0..f {
        gram[(i, i)] += lambda;
    }
    let chol = gram.cholesky().ok_or_else(|| {
        KdsmError::ShapeMismatch("ridge system is not positive definite".into())
    })?;

    let channels = masked_channels(&mask);
    let p = channels.len();
    let mut intercepts = vec![0.0; p];
    let mut targets = DMatrix::<f64>::zeros(n, p);
    for (col, &ch) in channels.iter().enumerate() {
        let mut mean = 0.0;
        for img in images {
            mean += img.data[ch as usize];
        }
        mean /= n as f64;
        intercepts[col] = mean;
        for (row, img) in images.iter().enumerate() {
            targets[(row, col)] = img.data[ch as usize] - mean;
        }
    }
    let weights = chol.solve(&(z.transpose() * targets));
    Ok(Regressor {
        feature_mean,
        feature_std,
        lambda,
        mask,
        channels,
        weights,
        intercepts,
    })
}

/// Predicts the cloth image for one pose feature. Unmasked pixels are 0
/// and the mask is the training mask.
pub fn infer(model: &Regressor, feature: &[f64]) -> Result<ClothImage, KdsmError> {
    if feature.len() != model.feature_mean.len() {
        return Err(KdsmError::ShapeMismatch(format!(
            "feature length {} does not match the model's {}",
            feature.len(),
            model.feature_mean.len()
        )));
    }
    let z = standardize(feature, &model.feature_mean, &model.feature_std);
    let predictions = model.weights.transpose() * z;
    let mut image = ClothImage::zeros();
    image.mask = model.mask.clone();
    for (col, &ch) in model.channels.iter().enumerate() {
        image.data[ch as usize] = model.intercepts[col] + predictions[col];
    }
    Ok(image)
}

fn mask_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".mask");
    path.with_file_name(name)
}

/// Writes the image doubles after a 16-byte header (magic + width +
/// height + channels), and the mask next to it as `<name>.mask`.
pub fn write_cloth_image(path: &Path, image: &ClothImage) -> Result<(), KdsmError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(IMAGE_MAGIC)?;
    for dim in [IMAGE_SIZE as u32, IMAGE_SIZE as u32, IMAGE_CHANNELS as u32] {
        w.write_all(&dim.to_le_bytes())?;
    }
    for v in &image.data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    std::fs::write(mask_path(path), &image.mask)?;
    Ok(())
}

pub fn read_cloth_image(path: &Path) -> Result<ClothImage, KdsmError> {
    let parse_err = |message: String| KdsmError::Parse {
        path: path.display().to_string(),
        line: 0,
        message,
    };
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != IMAGE_MAGIC {
        return Err(parse_err("bad image magic".into()));
    }
    let mut dim = [0u8; 4];
    for expected in [IMAGE_SIZE, IMAGE_SIZE, IMAGE_CHANNELS] {
        r.read_exact(&mut dim)?;
        let got = u32::from_le_bytes(dim) as usize;
        if got != expected {
            return Err(parse_err(format!("dimension {got}, expected {expected}")));
        }
    }
    let mut image = ClothImage::zeros();
    let mut buf = [0u8; 8];
    for v in &mut image.data {
        r.read_exact(&mut buf)?;
        *v = f64::from_le_bytes(buf);
    }
    let mask = std::fs::read(mask_path(path))?;
    if mask.len() != PIXELS {
        return Err(parse_err(format!("mask has {} bytes", mask.len())));
    }
    image.mask = mask;
    Ok(image)
}

/// Model file: a text header with shapes and the ridge penalty, then
/// the mask bytes, channel indices, and the standardization and weight
/// tables as little-endian doubles.
pub fn write_regressor(path: &Path, model: &Regressor) -> Result<(), KdsmError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(
        w,
        "ridge {} {} {}",
        model.feature_mean.len(),
        model.channels.len(),
        model.lambda
    )?;
    w.write_all(&model.mask)?;
    for &c in &model.channels {
        w.write_all(&c.to_le_bytes())?;
    }
    for table in [&model.feature_mean, &model.feature_std, &model.intercepts] {
        for &v in table {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    for v in model.weights.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_regressor(path: &Path) -> Result<Regressor, KdsmError> {
    let mut r = BufReader::new(File::open(path)?);
    let header = read_header_line(&mut r, path)?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    let parse_err = |message: &str| KdsmError::Parse {
        path: path.display().to_string(),
        line: 1,
        message: message.into(),
    };
    if parts.len() != 4 || parts[0] != "ridge" {
        return Err(parse_err("expected header: ridge <F> <P> <lambda>"));
    }
    let f: usize = parts[1].parse().map_err(|_| parse_err("bad feature count"))?;
    let p: usize = parts[2].parse().map_err(|_| parse_err("bad channel count"))?;
    let lambda: f64 = parts[3].parse().map_err(|_| parse_err("bad lambda"))?;
    let mut mask = vec![0u8; PIXELS];
    r.read_exact(&mut mask)?;
    let mut channels = Vec::with_capacity(p);
    let mut buf4 = [0u8; 4];
    for _ in 0..p {
        r.read_exact(&mut buf4)?;
        channels.push(u32::from_le_bytes(buf4));
    }
    let mut buf = [0u8; 8];
    let mut read_table = |len: usize| -> Result<Vec<f64>, KdsmError> {
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            r.read_exact(&mut buf)?;
            out.push(f64::from_le_bytes(buf));
        }
        Ok(out)
    };
    let feature_mean = read_table(f)?;
    let feature_std = read_table(f)?;
    let intercepts = read_table(p)?;
    let weights = DMatrix::from_vec(f, p, read_table(f * p)?);
    Ok(Regressor {
        feature_mean,
        feature_std,
        lambda,
        mask,
        channels,
        weights,
        intercepts,
    })
}
