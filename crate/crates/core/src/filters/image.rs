use std::fmt::Write as _;
use std::path::Path;

use crate::error::{contract, Error, Result};
use crate::rng::{normal_vec, stream_rng};

/// Grayscale image with real-valued pixels, nominally in `[0, 1]`.
///
/// Values may leave that range during processing; they are clamped and
/// quantized only when written out.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(contract("image dimensions must be positive"));
        }
        if pixels.len() != width * height {
            return Err(Error::Shape {
                op: "image",
                lhs: vec![height, width],
                rhs: vec![pixels.len()],
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    /// Pixel at `(row, col)` with out-of-range coordinates reflected back
    /// into the image (`−1 → 1`, `h → h − 2`).
    pub fn get_mirrored(&self, row: isize, col: isize) -> f64 {
        self.get(reflect(row, self.height), reflect(col, self.width))
    }

    /// Parses a plain-text (P2) portable graymap.
    pub fn from_pgm_str(text: &str) -> Result<Self> {
        let mut tokens = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or(""))
            .flat_map(str::split_whitespace);
        let magic = tokens
            .next()
            .ok_or_else(|| Error::Parse("empty graymap".into()))?;
        if magic != "P2" {
            return Err(Error::Parse(format!(
                "expected P2 graymap, found '{magic}'"
            )));
        }
        let mut number = |what: &str| -> Result<usize> {
            let tok = tokens
                .next()
                .ok_or_else(|| Error::Parse(format!("missing {what}")))?;
            tok.parse()
                .map_err(|_| Error::Parse(format!("bad {what} '{tok}'")))
        };
        let width = number("width")?;
        let height = number("height")?;
        let maxval = number("maxval")?;
        if maxval == 0 || maxval > 65535 {
            return Err(Error::Parse(format!("maxval {maxval} out of range")));
        }
        let mut pixels = Vec::with_capacity(width * height);
        for _ in 0..width * height {
            let v = number("pixel")?;
            if v > maxval {
                return Err(Error::Parse(format!("pixel {v} exceeds maxval {maxval}")));
            }
            pixels.push(v as f64 / maxval as f64);
        }
        Self::new(width, height, pixels)
    }

    /// Serializes as an 8-bit P2 graymap, clamping to `[0, 1]`.
    pub fn to_pgm_string(&self) -> String {
        let mut out = format!("P2\n{} {}\n255\n", self.width, self.height);
        for row in self.pixels.chunks(self.width) {
            let line: Vec<String> = row
                .iter()
                .map(|v| ((v.clamp(0.0, 1.0) * 255.0).round() as u8).to_string())
                .collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        Self::from_pgm_str(&std::fs::read_to_string(path)?)
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_pgm_string())?;
        Ok(())
    }
}

pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut k = i.rem_euclid(period);
    if k >= n {
        k = period - k;
    }
    k as usize
}

/// `img + N(0, σ²)` per pixel, reproducible under `seed`. No clamping.
pub fn add_gaussian_noise(img: &Image, sigma: f64, seed: u64) -> Image {
    let mut rng = stream_rng(seed, "image-noise", 0);
    let noise = normal_vec(&mut rng, img.pixels.len(), sigma);
    let pixels = img.pixels.iter().zip(noise).map(|(p, n)| p + n).collect();
    Image {
        width: img.width,
        height: img.height,
        pixels,
    }
}

/// Peak signal-to-noise ratio in dB for unit peak. Identical images give
/// `f64::INFINITY`.
pub fn psnr(reference: &Image, test: &Image) -> Result<f64> {
    if reference.width != test.width || reference.height != test.height {
        return Err(Error::Shape {
            op: "psnr",
            lhs: vec![reference.height, reference.width],
            rhs: vec![test.height, test.width],
        });
    }
    let mse = reference
        .pixels
        .iter()
        .zip(&test.pixels)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / reference.pixels.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}

/// `‖u‖ / ‖η‖`, with an explicit flag when the noise is exactly zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Snr {
    pub value: f64,
    pub noise_free: bool,
}

pub fn snr_of(u: &[f64], eta: &[f64]) -> Result<Snr> {
    if u.len() != eta.len() {
        return Err(Error::Shape {
            op: "snr",
            lhs: vec![u.len()],
            rhs: vec![eta.len()],
        });
    }
    let nu = crate::tensor::norm(u);
    let ne = crate::tensor::norm(eta);
    if ne == 0.0 {
        return Ok(Snr {
            value: f64::INFINITY,
            noise_free: true,
        });
    }
    Ok(Snr {
        value: nu / ne,
        noise_free: false,
    })
}

/// Side length of the synthetic card used for the denoising pilot.
pub const PILOT_SIZE: usize = 64;
/// Noise level of the denoising pilot.
pub const PILOT_SIGMA: f64 = 0.1;

/// Synthetic test card: flat background, two rectangles, a disc and a thin
/// bar, all at distinct gray levels.
pub fn piecewise_constant(width: usize, height: usize) -> Image {
    let (w, h) = (width as f64, height as f64);
    let mut pixels = Vec::with_capacity(width * height);
    for r in 0..height {
        for c in 0..width {
            let (x, y) = (c as f64 / w, r as f64 / h);
            let dx = x - 0.68;
            let dy = y - 0.68;
            let v = if dx * dx + dy * dy < 0.04 {
                0.85
            } else if (0.1..0.45).contains(&x) && (0.15..0.5).contains(&y) {
                0.7
            } else if (0.55..0.9).contains(&x) && (0.1..0.3).contains(&y) {
                0.45
            } else if (0.15..0.35).contains(&x) && (0.6..0.9).contains(&y) {
                0.1
            } else {
                0.3
            };
            pixels.push(v);
        }
    }
    Image {
        width,
        height,
        pixels,
    }
}
