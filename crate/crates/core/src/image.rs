//! 8-bit RGB images, binary PPM (P6) I/O, resampling and the procedural
//! class images used by the synthetic dataset and toy providers.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("malformed PPM: {0}")]
    Malformed(String),
    #[error("pixel buffer has {got} bytes, expected {expected} for {width}x{height}")]
    BufferSize { width: u32, height: u32, expected: usize, got: usize },
    #[error("image dimensions must be positive")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RgbImage {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::Empty);
        }
        let expected = width as usize * height as usize * 3;
        if pixels.len() != expected {
            return Err(ImageError::BufferSize { width, height, expected, got: pixels.len() });
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        let pixels = rgb.iter().copied().cycle().take(width as usize * height as usize * 3).collect();
        Self { width, height, pixels }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Area-averaging resample to `(width, height)`.
    pub fn resize(&self, width: u32, height: u32) -> RgbImage {
        assert!(width > 0 && height > 0);
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut out = Vec::with_capacity(width as usize * height as usize * 3);
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        for oy in 0..height {
            let y0 = oy as f64 * sy;
            let y1 = y0 + sy;
            for ox in 0..width {
                let x0 = ox as f64 * sx;
                let x1 = x0 + sx;
                let mut acc = [0.0f64; 3];
                let mut area = 0.0;
                let mut iy = y0.floor() as u32;
                while (iy as f64) < y1 && iy < self.height {
                    let wy = (y1.min(iy as f64 + 1.0) - y0.max(iy as f64)).max(0.0);
                    let mut ix = x0.floor() as u32;
                    while (ix as f64) < x1 && ix < self.width {
                        let wx = (x1.min(ix as f64 + 1.0) - x0.max(ix as f64)).max(0.0);
                        let w = wx * wy;
                        let p = self.get(ix, iy);
                        for c in 0..3 {
                            acc[c] += w * p[c] as f64;
                        }
                        area += w;
                        ix += 1;
                    }
                    iy += 1;
                }
                for a in acc {
                    out.push((a / area).round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        RgbImage { width, height, pixels: out }
    }

    /// Pixel values mapped affinely from [0, 255] to [-1, 1], row-major RGB.
    pub fn to_signed_unit(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| p as f64 / 127.5 - 1.0).collect()
    }

    /// Inverse of [`RgbImage::to_signed_unit`]; values are clamped to [-1, 1].
    pub fn from_signed_unit(width: u32, height: u32, values: &[f64]) -> Result<Self, ImageError> {
        let pixels = values.iter().map(|v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8).collect();
        Self::new(width, height, pixels)
    }

    pub fn mean_brightness(&self) -> f64 {
        self.pixels.iter().map(|&p| p as f64).sum::<f64>() / (self.pixels.len() as f64 * 255.0)
    }

    pub fn to_ppm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_ppm_bytes(bytes: &[u8]) -> Result<Self, ImageError> {
        let mut pos = 0usize;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            // skip whitespace and comments
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
                    _ => break,
                }
            }
            let start = pos;
            while let Some(b) = bytes.get(pos) {
                if b.is_ascii_whitespace() {
                    break;
                }
                pos += 1;
            }
            if start == pos {
                return Err(ImageError::Malformed("truncated header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P6" {
            return Err(ImageError::Malformed(format!("bad magic {:?}", fields[0])));
        }
        let parse = |s: &str| s.parse::<u32>().map_err(|_| ImageError::Malformed(format!("bad header field {s:?}")));
        let width = parse(&fields[1])?;
        let height = parse(&fields[2])?;
        let maxval = parse(&fields[3])?;
        if maxval != 255 {
            return Err(ImageError::Malformed(format!("unsupported maxval {maxval}")));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let data = bytes.get(pos..).unwrap_or(&[]);
        let expected = width as usize * height as usize * 3;
        if data.len() < expected {
            return Err(ImageError::Malformed(format!("raster has {} bytes, expected {expected}", data.len())));
        }
        Self::new(width, height, data[..expected].to_vec())
    }

    pub fn write_ppm(&self, path: &Path) -> Result<(), ImageError> {
        fs::write(path, self.to_ppm_bytes())
            .map_err(|source| ImageError::Io { path: path.display().to_string(), source })
    }

    pub fn read_ppm(path: &Path) -> Result<Self, ImageError> {
        let bytes = fs::read(path).map_err(|source| ImageError::Io { path: path.display().to_string(), source })?;
        Self::from_ppm_bytes(&bytes)
    }
}

/// HSV (all components in [0, 1]) to 8-bit RGB.
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    let (r, g, b) = match i as i32 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [(r * 255.0).round() as u8, (g * 255.0).round() as u8, (b * 255.0).round() as u8]
}

/// Hue in [0, 1) and saturation of an RGB triple.
pub fn rgb_to_hue_sat(rgb: [u8; 3]) -> (f64, f64) {
    let [r, g, b] = rgb.map(|c| c as f64 / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    if delta == 0.0 {
        return (0.0, 0.0);
    }
    let h = if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    (h / 6.0, delta / max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Glyph {
    Disc,
    Square,
    Triangle,
    Cross,
    Ring,
}

impl Glyph {
    pub const ALL: [Glyph; 5] = [Glyph::Disc, Glyph::Square, Glyph::Triangle, Glyph::Cross, Glyph::Ring];

    /// Whether normalized coordinates `(u, v)` in [-1, 1]² fall inside the glyph.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            Glyph::Disc => u * u + v * v <= 0.42,
            Glyph::Square => u.abs() <= 0.55 && v.abs() <= 0.55,
            Glyph::Triangle => (-0.65..=0.6).contains(&v) && u.abs() <= (v + 0.65) * 0.55,
            Glyph::Cross => (u.abs() <= 0.2 && v.abs() <= 0.7) || (v.abs() <= 0.2 && u.abs() <= 0.7),
            Glyph::Ring => {
                let r2 = u * u + v * v;
                (0.2..=0.5).contains(&r2)
            }
        }
    }
}

/// Hue assigned to a class index (golden-ratio spacing keeps any prefix of
/// classes well separated).
pub fn class_hue(class: usize) -> f64 {
    (class as f64 * 0.618_033_988_749_895).rem_euclid(1.0)
}

pub fn class_glyph(class: usize) -> Glyph {
    Glyph::ALL[class % Glyph::ALL.len()]
}

/// Procedural stimulus for `class`: a saturated hue field with a dark glyph.
pub fn class_image(class: usize, side: u32) -> RgbImage {
    let hue = class_hue(class);
    let background = hsv_to_rgb(hue, 0.85, 0.95);
    let foreground = hsv_to_rgb(hue, 0.9, 0.35);
    let glyph = class_glyph(class);
    let mut img = RgbImage::filled(side, side, background);
    for y in 0..side {
        for x in 0..side {
            let u = (x as f64 + 0.5) / side as f64 * 2.0 - 1.0;
            let v = 1.0 - (y as f64 + 0.5) / side as f64 * 2.0;
            if glyph.contains(u, v) {
                img.set(x, y, foreground);
            }
        }
    }
    img
}
