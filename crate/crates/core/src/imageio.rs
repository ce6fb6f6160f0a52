//! Raster container, image codecs, color conversion and RGBP patches.
//!
//! Every other stage of the pipeline exchanges data through [`Raster`]:
//! 8-bit rasters for decoded RGB input and masks, `f64` rasters for CIELAB
//! images, filter responses, prior maps and probability maps. Data is stored
//! row-major with channels interleaved per pixel.

use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};

/// Side length of the square CNN input window.
pub const PATCH_SIZE: usize = 32;
/// R, G, B and the prior channel P.
pub const PATCH_CHANNELS: usize = 4;
/// Number of values in one RGBP patch.
pub const PATCH_LEN: usize = PATCH_SIZE * PATCH_SIZE * PATCH_CHANNELS;

#[derive(Debug, Clone, PartialEq)]
pub struct Raster<T> {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<T>,
}

/// 3-channel 8-bit sRGB image.
pub type RgbImage = Raster<u8>;

impl<T: Copy + Default> Raster<T> {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, T::default())
    }
}

impl<T: Copy> Raster<T> {
    pub fn filled(width: usize, height: usize, channels: usize, value: T) -> Self {
        Raster {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidArgument(
                "raster needs at least one channel".into(),
            ));
        }
        let expected = width * height * channels;
        if data.len() != expected {
            return Err(Error::dims(
                format!("{expected} values ({width}x{height}x{channels})"),
                data.len(),
            ));
        }
        Ok(Raster {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> T {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: T) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Channel values of the pixel at linear index `idx = y * width + x`.
    #[inline]
    pub fn pixel(&self, idx: usize) -> &[T] {
        &self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, idx: usize) -> &mut [T] {
        &mut self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    pub fn same_size<U>(&self, other: &Raster<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub(crate) fn check_size<U>(&self, other: &Raster<U>) -> Result<()> {
        if self.same_size(other) {
            Ok(())
        } else {
            Err(Error::dims(
                format!("{}x{}", self.width, self.height),
                format!("{}x{}", other.width, other.height),
            ))
        }
    }
}

impl Raster<f64> {
    /// True when every value lies in `[0, 1]`.
    pub fn is_unit_interval(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }
}

/// Binary per-pixel mask; `true` marks shadow.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::dims(width * height, data.len()));
        }
        Ok(Mask {
            width,
            height,
            data,
        })
    }

    /// Binarizes a single-channel 8-bit raster at 128.
    pub fn from_gray(gray: &Raster<u8>) -> Result<Self> {
        if gray.channels() != 1 {
            return Err(Error::dims("1 channel", gray.channels()));
        }
        Ok(Mask {
            width: gray.width(),
            height: gray.height(),
            data: gray.data().iter().map(|&v| v >= 128).collect(),
        })
    }

    /// Any-channel raster to mask; multi-channel input uses the first channel.
    pub fn from_raster(r: &Raster<u8>) -> Self {
        Mask {
            width: r.width(),
            height: r.height(),
            data: (0..r.pixel_count()).map(|i| r.pixel(i)[0] >= 128).collect(),
        }
    }

    /// {0, 255} grayscale raster.
    pub fn to_gray(&self) -> Raster<u8> {
        let data = self.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
        Raster::from_vec(self.width, self.height, 1, data).expect("mask dimensions are consistent")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [bool] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn check_size(&self, width: usize, height: usize) -> Result<()> {
        if self.width == width && self.height == height {
            Ok(())
        } else {
            Err(Error::dims(
                format!("{width}x{height}"),
                format!("{}x{}", self.width, self.height),
            ))
        }
    }
}

// ---------------------------------------------------------------------------
// Codecs

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', b'\r', b'\n', 0x1a, b'\n'];

/// Decodes a PNG or binary PPM (P6) stream into an RGB raster. Gray input is
/// replicated to three channels and alpha is dropped.
pub fn decode_image(bytes: &[u8]) -> Result<RgbImage> {
    if bytes.starts_with(&PNG_SIGNATURE) {
        decode_png(bytes)
    } else if bytes.starts_with(b"P6") {
        decode_ppm(bytes)
    } else {
        Err(Error::Decode {
            offset: 0,
            cause: "unrecognized signature (expected PNG or P6 PPM)".into(),
        })
    }
}

fn decode_png(bytes: &[u8]) -> Result<RgbImage> {
    let png_err = |e: png::DecodingError| Error::Decode {
        offset: 0,
        cause: format!("png: {e}"),
    };
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(png_err)?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::Decode {
        offset: 0,
        cause: "png: image too large".into(),
    })?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    buf.truncate(info.buffer_size());

    let (w, h) = (info.width as usize, info.height as usize);
    let src_channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => {
            return Err(Error::Decode {
                offset: 0,
                cause: "png: palette was not expanded".into(),
            })
        }
    };
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Decode {
            offset: 0,
            cause: format!("png: unsupported bit depth {:?}", info.bit_depth),
        });
    }
    let mut rgb = Vec::with_capacity(w * h * 3);
    for px in buf.chunks_exact(src_channels).take(w * h) {
        match src_channels {
            1 | 2 => rgb.extend_from_slice(&[px[0], px[0], px[0]]),
            _ => rgb.extend_from_slice(&px[..3]),
        }
    }
    Raster::from_vec(w, h, 3, rgb)
}

fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // whitespace and comments before each header field
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => {
                    return Err(Error::Decode {
                        offset: pos,
                        cause: "ppm: truncated header".into(),
                    })
                }
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Decode {
                offset: pos,
                cause: format!(
                    "ppm: expected header field {}",
                    ["width", "height", "maxval"][i]
                ),
            });
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Decode {
                offset: start,
                cause: "ppm: header field out of range".into(),
            })?;
    }
    let [w, h, maxval] = fields;
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(Error::Decode {
            offset: pos,
            cause: "ppm: missing whitespace after maxval".into(),
        });
    }
    pos += 1;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Decode {
            offset: pos,
            cause: format!("ppm: unsupported maxval {maxval}"),
        });
    }
    let n = w * h * 3;
    let payload = bytes.get(pos..pos + n).ok_or_else(|| Error::Decode {
        offset: bytes.len(),
        cause: format!("ppm: truncated raster, need {n} bytes after offset {pos}"),
    })?;
    let data = if maxval == 255 {
        payload.to_vec()
    } else {
        payload
            .iter()
            .map(|&v| ((v.min(maxval as u8) as usize * 255 + maxval / 2) / maxval) as u8)
            .collect()
    };
    Raster::from_vec(w, h, 3, data)
}

/// Encodes a 1- or 3-channel 8-bit raster as PNG.
pub fn encode_image(r: &Raster<u8>) -> Result<Vec<u8>> {
    let color = match r.channels() {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(Error::Encode(format!("unsupported channel count {c}"))),
    };
    write_png(r.width(), r.height(), color, png::BitDepth::Eight, r.data())
}

/// Encodes 16-bit grayscale samples, e.g. a segmentation label map.
pub fn encode_gray16(width: usize, height: usize, values: &[u16]) -> Result<Vec<u8>> {
    if values.len() != width * height {
        return Err(Error::dims(width * height, values.len()));
    }
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_be_bytes()).collect();
    write_png(
        width,
        height,
        png::ColorType::Grayscale,
        png::BitDepth::Sixteen,
        &bytes,
    )
}

fn write_png(
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    data: &[u8],
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(depth);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Encode(e.to_string()))?;
        writer
            .write_image_data(data)
            .map_err(|e| Error::Encode(e.to_string()))?;
    }
    Ok(out)
}

pub fn read_image(path: &Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes)
}

/// Reads a ground-truth mask, binarized at 128 on the first channel.
pub fn read_mask(path: &Path) -> Result<Mask> {
    Ok(Mask::from_raster(&read_image(path)?))
}

pub fn write_png_file(path: &Path, r: &Raster<u8>) -> Result<()> {
    let bytes = encode_image(r)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Width and height from the file header without decoding pixel data.
pub fn probe_dimensions(path: &Path) -> Result<(usize, usize)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(&PNG_SIGNATURE) {
        let reader = png::Decoder::new(Cursor::new(&bytes[..]))
            .read_info()
            .map_err(|e| Error::Decode {
                offset: 0,
                cause: format!("png: {e}"),
            })?;
        let info = reader.info();
        Ok((info.width as usize, info.height as usize))
    } else {
        let img = decode_image(&bytes)?;
        Ok((img.width(), img.height()))
    }
}

/// 8-bit grayscale rendering of a probability map, `round(255 p)`.
pub fn probability_to_gray(map: &Raster<f64>) -> Raster<u8> {
    let data = (0..map.pixel_count())
        .map(|i| (map.pixel(i)[0].clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Raster::from_vec(map.width(), map.height(), 1, data).expect("same dimensions")
}

// ---------------------------------------------------------------------------
// Color

/// CIELAB color under the D65 white point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabPixel {
    pub l: f64,
    pub a: f64,
    pub b: f64,
}

// sRGB primaries to CIEXYZ (D65). The white point is the row sums so that
// sRGB white lands exactly on L=100, a=b=0.
const SRGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

fn srgb_to_linear(v: u8) -> f64 {
    let c = v as f64 / 255.0;
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

pub fn srgb_to_lab(rgb: [u8; 3]) -> LabPixel {
    linear_to_lab(rgb.map(srgb_to_linear))
}

fn linear_to_lab(lin: [f64; 3]) -> LabPixel {
    let mut f = [0.0; 3];
    for (k, row) in SRGB_TO_XYZ.iter().enumerate() {
        let white: f64 = row.iter().sum();
        let xyz = row[0] * lin[0] + row[1] * lin[1] + row[2] * lin[2];
        f[k] = lab_f(xyz / white);
    }
    LabPixel {
        l: (116.0 * f[1] - 16.0).clamp(0.0, 100.0),
        a: 500.0 * (f[0] - f[1]),
        b: 200.0 * (f[1] - f[2]),
    }
}

/// Per-pixel sRGB to CIELAB; output channels are L, a, b.
pub fn rgb_to_lab(img: &RgbImage) -> Raster<f64> {
    assert_eq!(img.channels(), 3, "rgb_to_lab expects a 3-channel raster");
    // 256-entry table for the gamma curve, the rest is per pixel
    let lut: Vec<f64> = (0..=255u8).map(srgb_to_linear).collect();
    let mut out = Raster::new(img.width(), img.height(), 3);
    for i in 0..img.pixel_count() {
        let p = img.pixel(i);
        let lab = linear_to_lab([lut[p[0] as usize], lut[p[1] as usize], lut[p[2] as usize]]);
        out.pixel_mut(i).copy_from_slice(&[lab.l, lab.a, lab.b]);
    }
    out
}

// ---------------------------------------------------------------------------
// Patches

/// A 32×32 RGBP window stored channel-major (`c * 1024 + y * 32 + x`),
/// every value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub origin: (usize, usize),
    data: Vec<f64>,
}

impl Patch {
    pub fn from_vec(origin: (usize, usize), data: Vec<f64>) -> Result<Self> {
        if data.len() != PATCH_LEN {
            return Err(Error::dims(PATCH_LEN, data.len()));
        }
        Ok(Patch { origin, data })
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * PATCH_SIZE + y) * PATCH_SIZE + x]
    }
}

/// Top-left corner of the patch centered on `center`, shifted inward so the
/// window lies inside a `width × height` image.
pub fn patch_origin(width: usize, height: usize, center: (usize, usize)) -> (usize, usize) {
    let half = PATCH_SIZE / 2;
    let clamp = |c: usize, extent: usize| c.saturating_sub(half).min(extent - PATCH_SIZE);
    (clamp(center.0, width), clamp(center.1, height))
}

pub fn extract_patch(img: &RgbImage, prior: &Raster<f64>, center: (usize, usize)) -> Result<Patch> {
    if img.width() < PATCH_SIZE || img.height() < PATCH_SIZE {
        return Err(Error::InvalidArgument(format!(
            "image {}x{} is smaller than the {PATCH_SIZE}x{PATCH_SIZE} patch",
            img.width(),
            img.height()
        )));
    }
    img.check_size(prior)?;
    if img.channels() != 3 || prior.channels() != 1 {
        return Err(Error::dims(
            "RGB image and 1-channel prior",
            format!("{} and {} channels", img.channels(), prior.channels()),
        ));
    }
    if center.0 >= img.width() || center.1 >= img.height() {
        return Err(Error::InvalidArgument(format!(
            "patch center {center:?} outside {}x{} image",
            img.width(),
            img.height()
        )));
    }
    let (ox, oy) = patch_origin(img.width(), img.height(), center);
    let plane = PATCH_SIZE * PATCH_SIZE;
    let mut data = vec![0.0; PATCH_LEN];
    for y in 0..PATCH_SIZE {
        for x in 0..PATCH_SIZE {
            let idx = (oy + y) * img.width() + ox + x;
            let px = img.pixel(idx);
            let cell = y * PATCH_SIZE + x;
            for c in 0..3 {
                data[c * plane + cell] = px[c] as f64 / 255.0;
            }
            data[3 * plane + cell] = prior.pixel(idx)[0];
        }
    }
    Ok(Patch {
        origin: (ox, oy),
        data,
    })
}
