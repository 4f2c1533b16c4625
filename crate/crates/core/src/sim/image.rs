use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 8-bit RGB raster, row-major, interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0; width * height * 3] }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn is_background(&self, x: usize, y: usize) -> bool {
        self.get(x, y) == [0, 0, 0]
    }

    pub fn write_ppm<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.data)
    }

    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.data.len() + 20);
        self.write_ppm(&mut bytes).expect("writing to a Vec cannot fail");
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Binary PPM with maxval 255. Comments in the header are accepted.
    pub fn read_ppm<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| ppm_err(format!("read failed: {e}")))?;
        let mut pos = 0;
        let mut fields = Vec::new();
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(ppm_err("truncated header"));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        pos += 1;
        if fields[0] != "P6" {
            return Err(ppm_err(format!("magic {:?}, expected P6", fields[0])));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| ppm_err(format!("bad header field {s:?}")));
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval != 255 {
            return Err(ppm_err(format!("maxval {maxval} unsupported")));
        }
        let n = width * height * 3;
        if bytes.len() < pos + n {
            return Err(ppm_err(format!("expected {n} pixel bytes, found {}", bytes.len().saturating_sub(pos))));
        }
        Ok(Self { width, height, data: bytes[pos..pos + n].to_vec() })
    }

    pub fn load_ppm(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_ppm(std::io::BufReader::new(f))
    }

    /// `[1, 3, H, W]` tensor scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[1, 3, self.height, self.width], self.planar()).expect("consistent extents")
    }

    /// Channel-planar values in `[0, 1]`.
    pub fn planar(&self) -> Vec<f64> {
        let hw = self.width * self.height;
        let mut out = vec![0.0; 3 * hw];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * hw + i] = px[c] as f64 / 255.0;
            }
        }
        out
    }
}

fn ppm_err(detail: impl Into<String>) -> Error {
    Error::Format { what: "PPM image", detail: detail.into() }
}
