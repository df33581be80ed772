//! RGB frames as `3 × H × W` tensors in `[0, 1]`, plus PNG IO and resampling.

use std::path::Path;

use image::{GrayImage, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A `C × H × W` image tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameTensor {
    data: Tensor,
}

impl FrameTensor {
    pub fn new(data: Tensor) -> Result<Self> {
        let (c, h, w) = data.dims3()?;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::shape("empty frame"));
        }
        if !data.is_finite() {
            return Err(Error::shape("frame contains non-finite values"));
        }
        Ok(Self { data })
    }

    pub fn filled(c: usize, h: usize, w: usize, value: f64) -> Self {
        Self {
            data: Tensor::full(&[c, h, w], value),
        }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data.at3(c, y, x)
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0; 3 * h * w];
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = px.0[c] as f64 / 255.0;
            }
        }
        Self {
            data: Tensor::new(&[3, h, w], data).expect("sized"),
        }
    }

    /// Converts to 8-bit RGB; single-channel frames become gray.
    pub fn to_rgb8(&self) -> RgbImage {
        let (h, w) = (self.height(), self.width());
        let c = self.channels();
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |ch: usize| {
                let v = self.at(ch.min(c - 1), y as usize, x as usize);
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            };
            Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
            .to_rgb8();
        Ok(Self::from_rgb8(&img))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save(path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }

    /// Bilinear sample of channel `c` at continuous pixel coordinates (pixel `i`
    /// covers `[i, i+1)`), clamped to the border.
    pub fn sample(&self, c: usize, u: f64, v: f64) -> f64 {
        let (h, w) = (self.height(), self.width());
        let x = (u - 0.5).clamp(0.0, (w - 1) as f64);
        let y = (v - 0.5).clamp(0.0, (h - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let top = self.at(c, y0, x0) * (1.0 - fx) + self.at(c, y0, x1) * fx;
        let bot = self.at(c, y1, x0) * (1.0 - fx) + self.at(c, y1, x1) * fx;
        top * (1.0 - fy) + bot * fy
    }
}

/// Area-average resampling of an `h × w` map to `out_h × out_w`; each output
/// cell is the mean of the source area it covers, with fractional overlap.
pub fn area_resize(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let weights = |n: usize, out: usize| -> Vec<Vec<(usize, f64)>> {
        let scale = n as f64 / out as f64;
        (0..out)
            .map(|o| {
                let lo = o as f64 * scale;
                let hi = (o + 1) as f64 * scale;
                let mut ws = Vec::new();
                let mut i = lo.floor() as usize;
                while (i as f64) < hi && i < n {
                    let overlap = (hi.min((i + 1) as f64) - lo.max(i as f64)).max(0.0);
                    if overlap > 0.0 {
                        ws.push((i, overlap / scale));
                    }
                    i += 1;
                }
                ws
            })
            .collect()
    };
    let wy = weights(h, out_h);
    let wx = weights(w, out_w);
    let mut out = vec![0.0; out_h * out_w];
    for (oy, ys) in wy.iter().enumerate() {
        for (ox, xs) in wx.iter().enumerate() {
            let mut acc = 0.0;
            for &(y, a) in ys {
                for &(x, b) in xs {
                    acc += a * b * src[y * w + x];
                }
            }
            out[oy * out_w + ox] = acc;
        }
    }
    out
}

/// Nearest-neighbour upsampling of a `[0,1]` map into an 8-bit gray image.
pub fn heatmap_gray(map: &[f64], h: usize, w: usize, out_h: u32, out_w: u32) -> GrayImage {
    GrayImage::from_fn(out_w, out_h, |x, y| {
        let sx = (x as usize * w / out_w as usize).min(w - 1);
        let sy = (y as usize * h / out_h as usize).min(h - 1);
        image::Luma([(map[sy * w + sx].clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}

/// Row-normalized confusion matrix as a gray image with `cell`-pixel squares
/// (white = all of the row's samples).
pub fn confusion_image(confusion: &[Vec<usize>], cell: u32) -> GrayImage {
    let k = confusion.len() as u32;
    GrayImage::from_fn(k * cell, k * cell, |x, y| {
        let row = &confusion[(y / cell) as usize];
        let total: usize = row.iter().sum();
        let v = if total == 0 {
            0.0
        } else {
            row[(x / cell) as usize] as f64 / total as f64
        };
        image::Luma([(v * 255.0).round() as u8])
    })
}

/// Blends a red heat overlay onto `frame` with per-pixel opacity from `heat`.
pub fn overlay(frame: &RgbImage, heat: &GrayImage, alpha: f64) -> RgbImage {
    RgbImage::from_fn(frame.width(), frame.height(), |x, y| {
        let p = frame.get_pixel(x, y).0;
        let a = alpha * heat.get_pixel(x, y).0[0] as f64 / 255.0;
        let mix = |base: u8, target: f64| ((1.0 - a) * base as f64 + a * target).round() as u8;
        Rgb([mix(p[0], 255.0), mix(p[1], 0.0), mix(p[2], 0.0)])
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn area_resize_block_average() {
        let src: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let out = area_resize(&src, 4, 4, 2, 2);
        assert_eq!(out, vec![2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn area_resize_preserves_mean_for_fractional_ratios() {
        let src: Vec<f64> = (0..35).map(|i| ((i * 7) % 5) as f64).collect();
        let out = area_resize(&src, 5, 7, 3, 2);
        let m_in = src.iter().sum::<f64>() / 35.0;
        let m_out = out.iter().sum::<f64>() / 6.0;
        assert!((m_in - m_out).abs() < 1e-12);
    }

    #[test]
    fn rgb8_round_trip() {
        let img = RgbImage::from_fn(3, 2, |x, y| Rgb([x as u8 * 50, y as u8 * 100, 7]));
        let f = FrameTensor::from_rgb8(&img);
        assert_eq!(f.to_rgb8(), img);
    }

    #[test]
    fn bilinear_sample_hits_pixel_centers() {
        let t = Tensor::from_fn(&[1, 2, 2], |i| i as f64);
        let f = FrameTensor::new(t).unwrap();
        assert_eq!(f.sample(0, 0.5, 0.5), 0.0);
        assert_eq!(f.sample(0, 1.5, 1.5), 3.0);
        assert_eq!(f.sample(0, 1.0, 0.5), 0.5);
    }
}
