//! Planar RGB images in [0,1] with binary PPM (P6) persistence and the
//! sampling primitives the cropping pipeline needs.

use std::io::{Read as _, Write as _};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `[3, H, W]` float image, values in [0,1].
#[derive(Debug, Clone)]
pub struct Image {
    pub pixels: Tensor,
}

impl Image {
    pub fn new(pixels: Tensor) -> Result<Self> {
        let s = pixels.shape();
        if s.len() != 3 || s[0] != 3 || s[1] == 0 || s[2] == 0 {
            return Err(Error::shape("image", format!("{s:?}")));
        }
        Ok(Image { pixels })
    }

    pub fn blank(h: usize, w: usize, color: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * h * w);
        for c in color {
            data.extend(std::iter::repeat_n(c, h * w));
        }
        Image {
            pixels: Tensor::new(vec![3, h, w], data).unwrap(),
        }
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels.data()[(c * self.height() + y) * self.width() + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let (h, w) = (self.height(), self.width());
        self.pixels.data_mut()[(c * h + y) * w + x] = v;
    }

    pub fn channel_means(&self) -> [f64; 3] {
        let (h, w) = (self.height(), self.width());
        let n = (h * w) as f64;
        let d = self.pixels.data();
        let mut m = [0.0; 3];
        for (c, slot) in m.iter_mut().enumerate() {
            *slot = d[c * h * w..(c + 1) * h * w].iter().sum::<f64>() / n;
        }
        m
    }

    /// Bilinear sample at continuous coordinates (x right, y down), pixel
    /// centers at integers. Outside the frame the pad color takes over.
    pub fn sample(&self, x: f64, y: f64, pad: [f64; 3]) -> [f64; 3] {
        let (h, w) = (self.height() as isize, self.width() as isize);
        let x0 = x.floor() as isize;
        let y0 = y.floor() as isize;
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let mut out = [0.0; 3];
        for c in 0..3 {
            let at = |yy: isize, xx: isize| -> f64 {
                if yy < 0 || yy >= h || xx < 0 || xx >= w {
                    pad[c]
                } else {
                    self.get(c, yy as usize, xx as usize)
                }
            };
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
            let bot = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
            out[c] = top * (1.0 - fy) + bot * fy;
        }
        out
    }

    /// Plain bilinear resize (align-corners-false convention).
    pub fn resize(&self, oh: usize, ow: usize) -> Result<Image> {
        if oh == 0 || ow == 0 {
            return Err(Error::Config("resize to zero size".into()));
        }
        let sy = self.height() as f64 / oh as f64;
        let sx = self.width() as f64 / ow as f64;
        let mut out = Image::blank(oh, ow, [0.0; 3]);
        let pad = [0.0; 3];
        for y in 0..oh {
            for x in 0..ow {
                let src_y = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, self.height() as f64 - 1.0);
                let src_x = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, self.width() as f64 - 1.0);
                let px = self.sample(src_x, src_y, pad);
                for c in 0..3 {
                    out.set(c, y, x, px[c]);
                }
            }
        }
        Ok(out)
    }

    /// Snap every value to the nearest 8-bit level so PPM round trips are
    /// bit-exact.
    pub fn quantize(&mut self) {
        for v in self.pixels.data_mut() {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }

    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        let mut buf = Vec::with_capacity(3 * h * w + 32);
        buf.extend_from_slice(format!("P6\n{w} {h}\n255\n").as_bytes());
        let d = self.pixels.data();
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let v = (d[(c * h + y) * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
                    buf.push(v);
                }
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load_ppm(path: &Path) -> Result<Image> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let mut field = |bytes: &[u8]| -> Result<String> {
            while pos < bytes.len() && (bytes[pos] as char).is_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                while pos < bytes.len() && (bytes[pos] as char).is_whitespace() {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !(bytes[pos] as char).is_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Data("truncated ppm header".into()));
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        let magic = field(&bytes)?;
        if magic != "P6" {
            return Err(Error::Data(format!("not a P6 ppm (magic {magic})")));
        }
        let w: usize = field(&bytes)?
            .parse()
            .map_err(|_| Error::Data("bad ppm width".into()))?;
        let h: usize = field(&bytes)?
            .parse()
            .map_err(|_| Error::Data("bad ppm height".into()))?;
        let maxv: usize = field(&bytes)?
            .parse()
            .map_err(|_| Error::Data("bad ppm maxval".into()))?;
        if maxv != 255 {
            return Err(Error::Data(format!("unsupported ppm maxval {maxv}")));
        }
        pos += 1; // single whitespace byte after maxval
        if bytes.len() < pos + 3 * h * w {
            return Err(Error::Data("truncated ppm payload".into()));
        }
        let mut data = vec![0.0; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    data[(c * h + y) * w + x] = bytes[pos + (y * w + x) * 3 + c] as f64 / 255.0;
                }
            }
        }
        Ok(Image {
            pixels: Tensor::new(vec![3, h, w], data)?,
        })
    }
}
