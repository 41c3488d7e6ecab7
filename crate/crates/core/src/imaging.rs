//! Grayscale raster primitives.
//!
//! Every raster is held as row-major `f64` intensities in `[0, 1]`. Files are
//! quantized only when written.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};

/// Normalized grayscale raster.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    /// Builds an image, checking dimensions and the `[0, 1]` range.
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(arg(format!("image dimensions must be positive, got {width}x{height}")));
        }
        if data.len() != width * height {
            return Err(arg(format!(
                "image {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(arg(format!("intensity {v} outside [0, 1]")));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    /// Builds an image from a per-pixel function of `(x, y)`.
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Full-image box anchored at the origin.
    pub fn bounds(&self) -> BBox {
        BBox {
            x: 0,
            y: 0,
            w: self.width as i64,
            h: self.height as i64,
        }
    }
}

/// Axis-aligned integer box; `(x, y)` is the top-left pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x: i64,
    pub y: i64,
    pub w: i64,
    pub h: i64,
}

impl BBox {
    pub fn new(x: i64, y: i64, w: i64, h: i64) -> Result<Self> {
        if w <= 0 || h <= 0 {
            return Err(arg(format!("box size must be positive, got {w}x{h}")));
        }
        Ok(Self { x, y, w, h })
    }

    /// `size`×`size` box whose center is `(cx, cy)`; for even sizes the center
    /// sits between the two middle pixels.
    pub fn centered(cx: i64, cy: i64, size: i64) -> Self {
        Self {
            x: cx - size / 2,
            y: cy - size / 2,
            w: size,
            h: size,
        }
    }

    pub fn area(&self) -> i64 {
        self.w * self.h
    }

    pub fn right(&self) -> i64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> i64 {
        self.y + self.h
    }

    /// Center rounded toward the top-left, the inverse of [`BBox::centered`].
    pub fn center(&self) -> (i64, i64) {
        (self.x + self.w / 2, self.y + self.h / 2)
    }

    pub fn contains_box(&self, other: &BBox) -> bool {
        other.x >= self.x && other.y >= self.y && other.right() <= self.right() && other.bottom() <= self.bottom()
    }

    pub fn intersection_area(&self, other: &BBox) -> i64 {
        let w = self.right().min(other.right()) - self.x.max(other.x);
        let h = self.bottom().min(other.bottom()) - self.y.max(other.y);
        if w <= 0 || h <= 0 {
            0
        } else {
            w * h
        }
    }

    pub fn translate(&self, dx: i64, dy: i64) -> Self {
        Self {
            x: self.x + dx,
            y: self.y + dy,
            ..*self
        }
    }
}

/// Signed gradient response, same dimensions as its source image.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl GradientMap {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// Loads an 8- or 16-bit grayscale PNG or binary PGM; color input is
/// luma-converted. Intensities are mapped linearly onto `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let decode = |reason: String| Error::Decode {
        path: path.to_path_buf(),
        reason,
    };
    let reader = image::ImageReader::open(path)
        .map_err(|e| decode(e.to_string()))?
        .with_guessed_format()
        .map_err(|e| decode(e.to_string()))?;
    let img = reader.decode().map_err(|e| decode(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let sixteen_bit = matches!(
        img,
        DynamicImage::ImageLuma16(_)
            | DynamicImage::ImageLumaA16(_)
            | DynamicImage::ImageRgb16(_)
            | DynamicImage::ImageRgba16(_)
    );
    let data: Vec<f64> = if sixteen_bit {
        img.into_luma16()
            .into_raw()
            .into_iter()
            .map(|v| v as f64 / 65535.0)
            .collect()
    } else {
        img.into_luma8()
            .into_raw()
            .into_iter()
            .map(|v| v as f64 / 255.0)
            .collect()
    };
    GrayImage::new(w, h, data).map_err(|e| decode(e.to_string()))
}

/// Quantizes to 8 bits; `round(v · 255)`.
pub fn to_luma8(img: &GrayImage) -> Vec<u8> {
    img.data.iter().map(|v| (v * 255.0).round() as u8).collect()
}

/// Writes an 8-bit grayscale PNG.
pub fn save_png(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(img.width as u32, img.height as u32, to_luma8(img)).expect("buffer length matches");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
}

/// Encodes as an in-memory 8-bit PNG.
pub fn encode_png(img: &GrayImage) -> Vec<u8> {
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(img.width as u32, img.height as u32, to_luma8(img)).expect("buffer length matches");
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)
        .expect("png encoding to memory");
    out.into_inner()
}

/// Rounds an 8-bit quantization back onto the `k / 255` grid.
pub fn quantize8(img: &GrayImage) -> GrayImage {
    let data = img.data.iter().map(|v| (v * 255.0).round() / 255.0).collect();
    GrayImage {
        width: img.width,
        height: img.height,
        data,
    }
}

/// Output length for a resample of `dim` by `factor`, tolerant of the
/// representation error in decimal factors such as 0.1.
pub fn scaled_len(dim: usize, factor: f64) -> usize {
    (dim as f64 * factor + 1e-9).floor() as usize
}

/// Source taps of a 1-D box filter: for each output sample, `(index, weight)`
/// pairs whose weights sum to one.
fn area_taps(src_len: usize, dst_len: usize, factor: f64) -> Vec<Vec<(usize, f64)>> {
    let span = 1.0 / factor;
    (0..dst_len)
        .map(|i| {
            let lo = i as f64 * span;
            let hi = ((i + 1) as f64 * span).min(src_len as f64);
            let mut taps = Vec::new();
            let mut s = lo.floor() as usize;
            while (s as f64) < hi && s < src_len {
                let overlap = (hi.min((s + 1) as f64) - lo.max(s as f64)).max(0.0);
                if overlap > 0.0 {
                    taps.push((s, overlap));
                }
                s += 1;
            }
            let total: f64 = taps.iter().map(|t| t.1).sum();
            for t in &mut taps {
                t.1 /= total;
            }
            taps
        })
        .collect()
}

/// Area-averaging resample by `factor` in `(0, 1]`.
pub fn downscale(img: &GrayImage, factor: f64) -> Result<GrayImage> {
    if !(factor > 0.0 && factor <= 1.0) {
        return Err(arg(format!("downscale factor must lie in (0, 1], got {factor}")));
    }
    if factor == 1.0 {
        return Ok(img.clone());
    }
    let (ow, oh) = (scaled_len(img.width, factor), scaled_len(img.height, factor));
    if ow == 0 || oh == 0 {
        return Err(arg(format!(
            "factor {factor} collapses {}x{} to an empty image",
            img.width, img.height
        )));
    }
    let xt = area_taps(img.width, ow, factor);
    let yt = area_taps(img.height, oh, factor);

    // horizontal pass over the rows the vertical taps touch
    let mut rows = vec![0.0; img.height * ow];
    for y in 0..img.height {
        let src = &img.data[y * img.width..(y + 1) * img.width];
        for (ox, taps) in xt.iter().enumerate() {
            rows[y * ow + ox] = taps.iter().map(|&(s, w)| src[s] * w).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for (oy, taps) in yt.iter().enumerate() {
        for ox in 0..ow {
            let v: f64 = taps.iter().map(|&(s, w)| rows[s * ow + ox] * w).sum();
            out[oy * ow + ox] = v.clamp(0.0, 1.0);
        }
    }
    GrayImage::new(ow, oh, out)
}

/// 256-level histogram equalization.
///
/// Level `v` maps to `(cdf(v) - cdf_min) / (1 - cdf_min)`; a single-level
/// image is returned unchanged.
pub fn equalize_hist(img: &GrayImage) -> GrayImage {
    let level = |v: f64| (v * 255.0).round() as usize;
    let mut hist = [0usize; 256];
    for &v in &img.data {
        hist[level(v)] += 1;
    }
    let n = img.data.len() as f64;
    let mut cdf = [0.0; 256];
    let mut acc = 0usize;
    for (l, &c) in hist.iter().enumerate() {
        acc += c;
        cdf[l] = acc as f64 / n;
    }
    let first = hist.iter().position(|&c| c > 0).unwrap_or(0);
    let cdf_min = cdf[first];
    if cdf_min >= 1.0 {
        return img.clone();
    }
    let map: Vec<f64> = cdf
        .iter()
        .map(|&c| ((c - cdf_min) / (1.0 - cdf_min)).clamp(0.0, 1.0))
        .collect();
    GrayImage {
        width: img.width,
        height: img.height,
        data: img.data.iter().map(|&v| map[level(v)]).collect(),
    }
}

/// Horizontal-edge Sobel response (vertical intensity derivative), kernel rows
/// `[-1 -2 -1] / [0 0 0] / [1 2 1]`, replicate borders.
pub fn sobel_horizontal(img: &GrayImage) -> Result<GradientMap> {
    if img.width < 3 || img.height < 3 {
        return Err(arg(format!(
            "sobel needs at least 3x3 pixels, got {}x{}",
            img.width, img.height
        )));
    }
    let mut values = vec![0.0; img.width * img.height];
    sobel_rows(&img.data, img.width, img.height, &mut values);
    Ok(GradientMap {
        width: img.width,
        height: img.height,
        values,
    })
}

/// Sobel kernel over a `w`×`h` row-major buffer into `out`.
pub(crate) fn sobel_rows(src: &[f64], w: usize, h: usize, out: &mut [f64]) {
    for y in 0..h {
        let up = &src[y.saturating_sub(1) * w..][..w];
        let down = &src[(y + 1).min(h - 1) * w..][..w];
        let dst = &mut out[y * w..(y + 1) * w];
        for x in 0..w {
            let l = x.saturating_sub(1);
            let r = (x + 1).min(w - 1);
            dst[x] = (down[l] - up[l]) + 2.0 * (down[x] - up[x]) + (down[r] - up[r]);
        }
    }
}

/// Copies the pixels under `b`, which must lie inside the image.
pub fn extract_patch(img: &GrayImage, b: &BBox) -> Result<GrayImage> {
    if !img.bounds().contains_box(b) {
        return Err(arg(format!(
            "box {b:?} exceeds image bounds {}x{}",
            img.width, img.height
        )));
    }
    let (w, h) = (b.w as usize, b.h as usize);
    let mut data = Vec::with_capacity(w * h);
    for y in b.y as usize..b.y as usize + h {
        let start = y * img.width + b.x as usize;
        data.extend_from_slice(&img.data[start..start + w]);
    }
    Ok(GrayImage {
        width: w,
        height: h,
        data,
    })
}

/// Writes `patch` into `img` with its top-left corner at `(x, y)`.
pub fn paste(img: &mut GrayImage, patch: &GrayImage, x: usize, y: usize) -> Result<()> {
    let target = BBox {
        x: x as i64,
        y: y as i64,
        w: patch.width as i64,
        h: patch.height as i64,
    };
    if !img.bounds().contains_box(&target) {
        return Err(arg(format!("paste target {target:?} exceeds image bounds")));
    }
    for row in 0..patch.height {
        let dst = (y + row) * img.width + x;
        img.data[dst..dst + patch.width].copy_from_slice(&patch.data[row * patch.width..(row + 1) * patch.width]);
    }
    Ok(())
}

pub fn flip_horizontal(img: &GrayImage) -> GrayImage {
    let mut data = img.data.clone();
    for row in data.chunks_mut(img.width) {
        row.reverse();
    }
    GrayImage {
        width: img.width,
        height: img.height,
        data,
    }
}

/// Left and right halves of a bilateral image.
#[derive(Debug, Clone)]
pub struct Halves {
    pub left: GrayImage,
    pub right: GrayImage,
    /// Column of the parent at which `right` starts; `left` starts at 0.
    pub right_offset: usize,
}

/// Splits at column `floor(w / 2)`.
pub fn split_halves(img: &GrayImage) -> Result<Halves> {
    if img.width < 2 {
        return Err(arg(format!("cannot split an image of width {}", img.width)));
    }
    let mid = img.width / 2;
    let h = img.height as i64;
    let left = extract_patch(img, &BBox::new(0, 0, mid as i64, h)?)?;
    let right = extract_patch(img, &BBox::new(mid as i64, 0, (img.width - mid) as i64, h)?)?;
    Ok(Halves {
        left,
        right,
        right_offset: mid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(w: usize, h: usize, data: &[f64]) -> GrayImage {
        GrayImage::new(w, h, data.to_vec()).unwrap()
    }

    #[test]
    fn rejects_out_of_range_and_bad_lengths() {
        assert!(GrayImage::new(2, 2, vec![0.0, 1.0, 1.5, 0.0]).is_err());
        assert!(GrayImage::new(2, 2, vec![0.0; 3]).is_err());
        assert!(GrayImage::new(0, 2, vec![]).is_err());
    }

    #[test]
    fn downscale_constant_and_identity() {
        let c = GrayImage::filled(2, 2, 0.5).unwrap();
        let d = downscale(&c, 0.5).unwrap();
        assert_eq!((d.width(), d.height()), (1, 1));
        assert_eq!(d.get(0, 0), 0.5);

        let r = GrayImage::from_fn(7, 5, |x, y| ((x * 3 + y * 5) % 11) as f64 / 10.0).unwrap();
        assert_eq!(downscale(&r, 1.0).unwrap(), r);
    }

    #[test]
    fn downscale_checkerboard_block_average() {
        let cb = GrayImage::from_fn(4, 4, |x, y| ((x + y) % 2) as f64).unwrap();
        let d = downscale(&cb, 0.5).unwrap();
        assert_eq!((d.width(), d.height()), (2, 2));
        assert!(d.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn downscale_rejects_bad_factor() {
        let c = GrayImage::filled(4, 4, 0.1).unwrap();
        assert!(downscale(&c, 0.0).is_err());
        assert!(downscale(&c, 1.5).is_err());
        assert!(downscale(&c, 0.2).is_err());
    }

    #[test]
    fn downscale_tenth_of_thousand() {
        assert_eq!(scaled_len(1000, 0.1), 100);
        assert_eq!(scaled_len(600, 0.1), 60);
        assert_eq!(scaled_len(300, 64.0 / 300.0), 64);
    }

    #[test]
    fn equalize_constant_is_identity() {
        let c = GrayImage::filled(3, 3, 0.4).unwrap();
        assert_eq!(equalize_hist(&c), c);
    }

    #[test]
    fn equalize_uniform_histogram_is_fixed_point() {
        let u = GrayImage::from_fn(16, 16, |x, y| (y * 16 + x) as f64 / 255.0).unwrap();
        let e = equalize_hist(&u);
        for (a, b) in u.data().iter().zip(e.data()) {
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn equalize_two_level_histogram() {
        // 25% at level 0, 75% at level 128: cdf(0) = 0.25 = cdf_min, cdf(128) = 1
        let v = 128.0 / 255.0;
        let i = img(4, 1, &[0.0, v, v, v]);
        let e = equalize_hist(&i);
        assert_eq!(e.data(), &[0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn sobel_constant_and_ramps() {
        let c = GrayImage::filled(5, 5, 0.3).unwrap();
        assert!(sobel_horizontal(&c).unwrap().values.iter().all(|&v| v == 0.0));

        let c_step = 0.05;
        let vramp = GrayImage::from_fn(6, 6, |_, y| c_step * y as f64).unwrap();
        let g = sobel_horizontal(&vramp).unwrap();
        for y in 1..5 {
            for x in 1..5 {
                assert!((g.get(x, y) - 8.0 * c_step).abs() < 1e-12);
            }
        }

        let hramp = GrayImage::from_fn(6, 6, |x, _| c_step * x as f64).unwrap();
        let g = sobel_horizontal(&hramp).unwrap();
        assert!(g.values.iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn sobel_rejects_small() {
        let i = GrayImage::filled(2, 5, 0.0).unwrap();
        assert!(sobel_horizontal(&i).is_err());
    }

    #[test]
    fn patch_extraction() {
        let i = GrayImage::from_fn(4, 3, |x, y| (x + 4 * y) as f64 / 11.0).unwrap();
        assert_eq!(extract_patch(&i, &i.bounds()).unwrap(), i);
        let p = extract_patch(&i, &BBox::new(0, 0, 1, 1).unwrap()).unwrap();
        assert_eq!(p.data(), &[0.0]);
        assert!(extract_patch(&i, &BBox::new(3, 0, 2, 2).unwrap()).is_err());
    }

    #[test]
    fn flip_cases() {
        let i = img(3, 1, &[0.1, 0.2, 0.3]);
        assert_eq!(flip_horizontal(&i).data(), &[0.3, 0.2, 0.1]);
        let sym = img(3, 2, &[0.1, 0.5, 0.1, 0.7, 0.2, 0.7]);
        assert_eq!(flip_horizontal(&sym), sym);
    }

    #[test]
    fn halves_floor_rule_and_reassembly() {
        let i = GrayImage::from_fn(5, 2, |x, y| (x + 5 * y) as f64 / 9.0).unwrap();
        let h = split_halves(&i).unwrap();
        assert_eq!(h.left.width(), 2);
        assert_eq!(h.right.width(), 3);
        assert_eq!(h.right_offset, 2);
        let mut back = GrayImage::filled(5, 2, 0.0).unwrap();
        paste(&mut back, &h.left, 0, 0).unwrap();
        paste(&mut back, &h.right, h.right_offset, 0).unwrap();
        assert_eq!(back, i);

        let even = GrayImage::filled(4, 1, 0.0).unwrap();
        let h = split_halves(&even).unwrap();
        assert_eq!((h.left.width(), h.right.width()), (2, 2));
        assert!(split_halves(&GrayImage::filled(1, 3, 0.0).unwrap()).is_err());
    }

    #[test]
    fn png_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let i = img(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        save_png(&i, &p).unwrap();
        assert_eq!(load_image(&p).unwrap(), i);
        assert!(matches!(
            load_image(dir.path().join("missing.png")),
            Err(Error::Decode { .. })
        ));
    }

    #[test]
    fn sixteen_bit_png_maps_linearly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.png");
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(2, 1, vec![32768, 65535]).unwrap();
        buf.save(&p).unwrap();
        let i = load_image(&p).unwrap();
        assert_eq!(i.get(0, 0), 32768.0 / 65535.0);
        assert_eq!(i.get(1, 0), 1.0);
    }

    #[test]
    fn binary_pgm_loads() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.pgm");
        let mut bytes = b"P5\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255, 255, 0]);
        std::fs::write(&p, bytes).unwrap();
        assert_eq!(load_image(&p).unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);
    }
}
