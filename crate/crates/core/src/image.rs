//! RGB images, the pixel/tensor boundary, and bilinear resampling.
//!
//! Pixels are 8-bit interleaved RGB. Networks never see raw pixels: every
//! patch is normalized to `(v - 127.5) / 128`, about [-1, 1], on its way
//! into a tensor. Resampling pads with *normalized* zero outside the image
//! so fully out-of-bounds output pixels are exactly 0.0.

use std::path::Path;

use crate::error::{Error, Result};
use crate::sampler::BoundingBox;
use crate::tensor::{Scalar, Tensor};

/// Maps a raw pixel value into the network input range.
pub fn normalize_pixel<T: Scalar>(v: u8) -> T {
    T::from_f64_lossy((v as f64 - 127.5) / 128.0)
}

/// 8-bit RGB image, rows top to bottom.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image { width, height, data: vec![0; width * height * 3] }
    }

    pub fn from_rgb(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Format(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Image { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn rgb_bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        if x < self.width && y < self.height {
            let i = (y * self.width + x) * 3;
            self.data[i..i + 3].copy_from_slice(&rgb);
        }
    }

    /// Decodes PNG or binary PPM, by content.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Format(format!("cannot decode {}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        Image::from_rgb(w, h, img.into_raw())
    }

    /// Encodes by file extension: `.png` or `.ppm`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let buf: image::RgbImage = image::ImageBuffer::from_raw(
            self.width as u32,
            self.height as u32,
            self.data.clone(),
        )
        .ok_or_else(|| Error::Format("pixel buffer does not match dimensions".into()))?;
        buf.save(path)
            .map_err(|e| Error::Format(format!("cannot encode {}: {e}", path.display())))
    }

    /// Whole image as a normalized `[3, H, W]` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let (w, h) = (self.width, self.height);
        let mut out = vec![T::zero(); 3 * w * h];
        for c in 0..3 {
            let plane = &mut out[c * w * h..(c + 1) * w * h];
            for y in 0..h {
                for x in 0..w {
                    plane[y * w + x] = normalize_pixel(self.data[(y * w + x) * 3 + c]);
                }
            }
        }
        Tensor::from_vec(&[3, h, w], out).expect("sizes consistent")
    }

    /// Normalized sample at real coordinates with bilinear filtering;
    /// outside the image the (normalized) value is exactly zero.
    fn sample_bilinear(&self, c: usize, sx: f64, sy: f64) -> f64 {
        let x0 = sx.floor();
        let y0 = sy.floor();
        let fx = sx - x0;
        let fy = sy - y0;
        let mut acc = 0.0;
        for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
            for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
                let px = x0 as i64 + dx;
                let py = y0 as i64 + dy;
                let w = wx * wy;
                if w == 0.0 {
                    continue;
                }
                if px >= 0 && py >= 0 && (px as usize) < self.width && (py as usize) < self.height
                {
                    let v = self.data[((py as usize) * self.width + px as usize) * 3 + c];
                    acc += w * ((v as f64 - 127.5) / 128.0);
                }
            }
        }
        acc
    }

    /// Resamples an arbitrary rectangular region to `out_w` x `out_h`.
    /// Output pixel centers map to `region.x + (u + 0.5) / out_w * region.w
    /// - 0.5` so a whole-image native-size resample is the identity.
    pub fn resample_region<T: Scalar>(
        &self,
        region: &BoundingBox,
        out_w: usize,
        out_h: usize,
    ) -> Result<Tensor<T>> {
        region.validate()?;
        if out_w == 0 || out_h == 0 {
            return Err(Error::Contract("resample output must be non-empty".into()));
        }
        let mut out = vec![T::zero(); 3 * out_w * out_h];
        for c in 0..3 {
            let plane = &mut out[c * out_w * out_h..(c + 1) * out_w * out_h];
            for v in 0..out_h {
                let sy = region.y + (v as f64 + 0.5) / out_h as f64 * region.h - 0.5;
                for u in 0..out_w {
                    let sx = region.x + (u as f64 + 0.5) / out_w as f64 * region.w - 0.5;
                    plane[v * out_w + u] = T::from_f64_lossy(self.sample_bilinear(c, sx, sy));
                }
            }
        }
        Tensor::from_vec(&[3, out_h, out_w], out)
    }

    /// Draws the outline of a box (for detection overlays).
    pub fn draw_box_outline(&mut self, b: &BoundingBox, rgb: [u8; 3]) {
        let x0 = b.x.round() as i64;
        let y0 = b.y.round() as i64;
        let x1 = (b.x + b.w).round() as i64;
        let y1 = (b.y + b.h).round() as i64;
        for x in x0..=x1 {
            self.put_clipped(x, y0, rgb);
            self.put_clipped(x, y1, rgb);
        }
        for y in y0..=y1 {
            self.put_clipped(x0, y, rgb);
            self.put_clipped(x1, y, rgb);
        }
    }

    /// Draws a small plus marker (for landmark overlays).
    pub fn draw_marker(&mut self, cx: f64, cy: f64, rgb: [u8; 3]) {
        let x = cx.round() as i64;
        let y = cy.round() as i64;
        for d in -2..=2 {
            self.put_clipped(x + d, y, rgb);
            self.put_clipped(x, y + d, rgb);
        }
    }

    /// Fills an axis-aligned ellipse.
    pub fn fill_ellipse(&mut self, cx: f64, cy: f64, rx: f64, ry: f64, rgb: [u8; 3]) {
        let y0 = (cy - ry).floor().max(0.0) as usize;
        let y1 = ((cy + ry).ceil() as usize).min(self.height.saturating_sub(1));
        let x0 = (cx - rx).floor().max(0.0) as usize;
        let x1 = ((cx + rx).ceil() as usize).min(self.width.saturating_sub(1));
        for y in y0..=y1.max(y0) {
            for x in x0..=x1.max(x0) {
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dy = (y as f64 + 0.5 - cy) / ry;
                if dx * dx + dy * dy <= 1.0 {
                    self.put(x, y, rgb);
                }
            }
        }
    }

    /// Fills an axis-aligned rectangle given in real pixel coordinates.
    pub fn fill_rect(&mut self, x: f64, y: f64, w: f64, h: f64, rgb: [u8; 3]) {
        let x0 = x.floor().max(0.0) as usize;
        let y0 = y.floor().max(0.0) as usize;
        let x1 = ((x + w).ceil().max(0.0) as usize).min(self.width);
        let y1 = ((y + h).ceil().max(0.0) as usize).min(self.height);
        for yy in y0..y1 {
            for xx in x0..x1 {
                self.put(xx, yy, rgb);
            }
        }
    }

    fn put_clipped(&mut self, x: i64, y: i64, rgb: [u8; 3]) {
        if x >= 0 && y >= 0 {
            self.put(x as usize, y as usize, rgb);
        }
    }
}

/// Crops `bx` out of the image as a normalized square tensor.
///
/// The box is squared first (shorter side grown about the center) so the
/// resize never distorts aspect; regions outside the image come back as
/// exactly 0.0. A box with no overlap at all is an error the caller counts
/// and skips.
pub fn crop_resize<T: Scalar>(image: &Image, bx: &BoundingBox, out_size: usize) -> Result<Tensor<T>> {
    let sq = bx.squared();
    if sq.x >= image.width as f64
        || sq.y >= image.height as f64
        || sq.x + sq.w <= 0.0
        || sq.y + sq.h <= 0.0
    {
        return Err(Error::Sampling(format!(
            "window ({:.1},{:.1},{:.1},{:.1}) lies outside the {}x{} image",
            sq.x, sq.y, sq.w, sq.h, image.width, image.height
        )));
    }
    image.resample_region(&sq, out_size, out_size)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checkerboard2x2() -> Image {
        // white black / black white
        let w = 255u8;
        Image::from_rgb(
            2,
            2,
            vec![w, w, w, 0, 0, 0, 0, 0, 0, w, w, w],
        )
        .unwrap()
    }

    #[test]
    fn tensor_normalization_hits_exact_values() {
        let img = Image::from_rgb(2, 1, vec![0, 0, 0, 255, 255, 255]).unwrap();
        let t: Tensor<f64> = img.to_tensor();
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert_eq!(t.data()[0], -0.99609375);
        assert_eq!(t.data()[1], 0.99609375);
    }

    #[test]
    fn whole_image_native_resample_is_identity() {
        let img = checkerboard2x2();
        let full = BoundingBox::new(0.0, 0.0, 2.0, 2.0);
        let t: Tensor<f64> = img.resample_region(&full, 2, 2).unwrap();
        assert_eq!(t.data(), img.to_tensor::<f64>().data());
    }

    #[test]
    fn double_upscale_matches_closed_form_bilinear() {
        let img = checkerboard2x2();
        let full = BoundingBox::new(0.0, 0.0, 2.0, 2.0);
        let t: Tensor<f64> = img.resample_region(&full, 4, 4).unwrap();
        let white = 0.99609375;
        let black = -0.99609375;
        // Corner (0,0): source (-0.25,-0.25) blends 0.5625*white with
        // zero padding.
        assert!((t.data()[0] - 0.5625 * white).abs() < 1e-12);
        // (1,1): source (0.25,0.25), interior blend of the four pixels:
        // 0.5625 w + 0.1875 b + 0.1875 b + 0.0625 w.
        let expect = 0.5625 * white + 0.375 * black + 0.0625 * white;
        assert!((t.data()[4 + 1] - expect).abs() < 1e-12);
        // (2,1): source (0.75,0.25): 0.1875 w + 0.5625 b + 0.0625 b + 0.1875 w.
        let expect = 0.375 * white + 0.625 * black;
        assert!((t.data()[4 + 2] - expect).abs() < 1e-12);
    }

    #[test]
    fn half_outside_crop_pads_exact_zero() {
        let mut img = Image::new(20, 20);
        img.fill_rect(0.0, 0.0, 20.0, 20.0, [200, 200, 200]);
        let bx = BoundingBox::new(-10.0, 0.0, 20.0, 20.0);
        let t: Tensor<f64> = crop_resize(&img, &bx, 4).unwrap();
        // Left half samples entirely outside the image.
        for v in 0..4 {
            assert_eq!(t.data()[v * 4], 0.0);
            assert_eq!(t.data()[v * 4 + 1], 0.0);
            assert!(t.data()[v * 4 + 2] != 0.0);
        }
    }

    #[test]
    fn fully_outside_crop_is_a_sampling_error() {
        let img = Image::new(10, 10);
        let bx = BoundingBox::new(100.0, 100.0, 5.0, 5.0);
        assert!(crop_resize::<f64>(&img, &bx, 4).is_err());
    }

    #[test]
    fn crop_squares_the_box_first() {
        let mut img = Image::new(40, 40);
        for y in 0..40 {
            for x in 0..40 {
                img.put(x, y, [(x * 6) as u8, (y * 6) as u8, 0]);
            }
        }
        let tall = BoundingBox::new(15.0, 10.0, 10.0, 20.0);
        let direct: Tensor<f64> = crop_resize(&img, &tall, 8).unwrap();
        let squared: Tensor<f64> = img.resample_region(&tall.squared(), 8, 8).unwrap();
        assert_eq!(direct.data(), squared.data());
        assert_eq!(tall.squared().w, 20.0);
        assert_eq!(tall.squared().x, 10.0);
    }

    #[test]
    fn png_and_ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = checkerboard2x2();
        for name in ["rt.png", "rt.ppm"] {
            let p = dir.path().join(name);
            img.save(&p).unwrap();
            let back = Image::load(&p).unwrap();
            assert_eq!(back, img, "{name}");
        }
    }
}
