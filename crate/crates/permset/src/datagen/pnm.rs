//! Binary portable pixmaps: P5 (grayscale) and P6 (RGB), 8-bit, the only
//! image format this crate reads or writes.

use super::DataError;
use crate::nn::Tensor;
use std::fs;
use std::io::Write;
use std::path::Path;

/// Interleaved 8-bit image, 1 (gray) or 3 (RGB) channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        assert!(channels == 1 || channels == 3, "1 or 3 channels");
        Image { width, height, channels, pixels: vec![0; width * height * channels] }
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: u8) {
        self.pixels[(y * self.width + x) * self.channels + c] = v;
    }

    /// Channels-first float tensor scaled to [0, 1].
    pub fn to_tensor(&self) -> Tensor {
        let (w, h, c) = (self.width, self.height, self.channels);
        let mut data = vec![0.0; c * h * w];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data[(ch * h + y) * w + x] = self.pixels[(y * w + x) * c + ch] as f64 / 255.0;
                }
            }
        }
        Tensor::from_vec(&[c, h, w], data)
    }

    pub fn encode_pnm(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn write_pnm(&self, path: &Path) -> Result<(), DataError> {
        let mut f = fs::File::create(path).map_err(DataError::Io)?;
        f.write_all(&self.encode_pnm()).map_err(DataError::Io)?;
        Ok(())
    }
}

fn format_err(path: &Path, message: impl Into<String>) -> DataError {
    DataError::Format { path: path.display().to_string(), message: message.into() }
}

pub fn decode_pnm(bytes: &[u8], path: &Path) -> Result<Image, DataError> {
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String, DataError> {
        // skip whitespace and '#' comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(path, "unexpected end of header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    let magic = token(bytes)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(format_err(path, format!("unsupported magic {other:?}"))),
    };
    let width: usize = token(bytes)?.parse().map_err(|_| format_err(path, "bad width"))?;
    let height: usize = token(bytes)?.parse().map_err(|_| format_err(path, "bad height"))?;
    let maxval: usize = token(bytes)?.parse().map_err(|_| format_err(path, "bad maxval"))?;
    if maxval != 255 {
        return Err(format_err(path, format!("unsupported maxval {maxval}")));
    }
    let data_start = pos + 1; // single whitespace after maxval
    let expected = width * height * channels;
    if bytes.len() < data_start + expected {
        return Err(format_err(path, "truncated pixel data"));
    }
    Ok(Image {
        width,
        height,
        channels,
        pixels: bytes[data_start..data_start + expected].to_vec(),
    })
}

pub fn read_pnm(path: &Path) -> Result<Image, DataError> {
    let bytes = fs::read(path).map_err(DataError::Io)?;
    decode_pnm(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_rgb_and_gray() {
        for channels in [1, 3] {
            let mut img = Image::new(5, 4, channels);
            for (i, p) in img.pixels.iter_mut().enumerate() {
                *p = (i * 7 % 256) as u8;
            }
            let bytes = img.encode_pnm();
            let back = decode_pnm(&bytes, Path::new("mem")).unwrap();
            assert_eq!(back, img);
        }
    }

    #[test]
    fn rejects_unknown_magic() {
        assert!(decode_pnm(b"P3\n1 1\n255\n0 0 0\n", Path::new("mem")).is_err());
    }

    #[test]
    fn tensor_is_channel_planar_and_scaled() {
        let mut img = Image::new(2, 1, 3);
        img.set(0, 0, 0, 255);
        img.set(1, 0, 2, 51);
        let t = img.to_tensor();
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert_eq!(t.data()[0], 1.0); // channel 0, x 0
        assert!((t.data()[5] - 0.2).abs() < 1e-12); // channel 2, x 1
    }
}
