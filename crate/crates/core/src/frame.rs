//! RGB frames and frame-directory ingestion.

use std::fs;
use std::path::{Path, PathBuf};

use image::{imageops, ImageBuffer, Rgb, Rgb32FImage, RgbImage};

use crate::error::{Error, Result};

/// One RGB frame with channel values in `[0, 1]`, stored `H x W x 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<f32>,
    /// Temporal position within its video.
    pub index: usize,
}

impl Frame {
    pub fn new(width: usize, height: usize, rgb: Vec<f32>, index: usize) -> Result<Self> {
        if rgb.len() != width * height * 3 {
            return Err(Error::Shape {
                op: "frame",
                lhs: vec![height, width, 3],
                rhs: vec![rgb.len()],
            });
        }
        if rgb.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::contract("frame channel values must lie in [0, 1]"));
        }
        Ok(Self {
            width,
            height,
            rgb,
            index,
        })
    }

    pub fn filled(width: usize, height: usize, color: [f32; 3], index: usize) -> Self {
        let rgb = (0..width * height).flat_map(|_| color).collect();
        Self {
            width,
            height,
            rgb,
            index,
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let o = (y * self.width + x) * 3;
        [self.rgb[o], self.rgb[o + 1], self.rgb[o + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, c: [f32; 3]) {
        let o = (y * self.width + x) * 3;
        self.rgb[o..o + 3].copy_from_slice(&c);
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f32; 3]> + '_ {
        self.rgb.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    /// Bilinear resize to a `size x size` square. A frame that already has
    /// that size is returned unchanged.
    pub fn resized(&self, size: usize) -> Frame {
        if self.width == size && self.height == size {
            return self.clone();
        }
        let buf: Rgb32FImage =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, self.rgb.clone())
                .expect("buffer matches dimensions");
        let out = imageops::resize(&buf, size as u32, size as u32, imageops::FilterType::Triangle);
        Frame {
            width: size,
            height: size,
            rgb: out.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            index: self.index,
        }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            let p = self.pixel(x as usize, y as usize);
            Rgb(p.map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8))
        })
    }

    /// Writes the frame; the format follows the extension (`.ppm` or `.png`).
    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path).map_err(|e| Error::Ingest {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

fn is_frame_file(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
        Some(ref e) if e == "png" || e == "ppm"
    )
}

/// Loads every numerically named `.png` / `.ppm` file in `dir`, sorted by
/// number. The number becomes the frame index. Other files are ignored.
pub fn load_frames(dir: &Path) -> Result<Vec<Frame>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<(usize, PathBuf)> = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if !is_frame_file(&path) {
            continue;
        }
        let number = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| Error::Ingest {
                path: path.clone(),
                reason: "frame file name is not a number".into(),
            })?;
        files.push((number, path));
    }
    files.sort();

    let mut frames: Vec<Frame> = Vec::with_capacity(files.len());
    for (number, path) in files {
        let img = image::open(&path).map_err(|e| Error::Ingest {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        let rgb = img.to_rgb32f();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        if let Some(first) = frames.first() {
            if (first.width, first.height) != (w, h) {
                return Err(Error::Ingest {
                    path,
                    reason: format!(
                        "frame is {w}x{h} but earlier frames are {}x{}",
                        first.width, first.height
                    ),
                });
            }
        }
        let data = rgb.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        frames.push(Frame::new(w, h, data, number)?);
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_directory_gives_no_frames() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_frames(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn frames_sorted_by_number() {
        let dir = tempfile::tempdir().unwrap();
        for i in [3usize, 0, 2, 1] {
            let f = Frame::filled(4, 4, [i as f32 / 4.0, 0.0, 0.0], i);
            f.save(&dir.path().join(format!("{i:03}.png"))).unwrap();
        }
        let frames = load_frames(dir.path()).unwrap();
        let idx: Vec<usize> = frames.iter().map(|f| f.index).collect();
        assert_eq!(idx, vec![0, 1, 2, 3]);
    }

    #[test]
    fn white_ppm_scales_to_one() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("0.ppm"), b"P3\n2 2\n255\n255 255 255 255 255 255 255 255 255 255 255 255\n").unwrap();
        let frames = load_frames(dir.path()).unwrap();
        assert_eq!(frames.len(), 1);
        assert!(frames[0].rgb.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn inconsistent_sizes_name_the_file() {
        let dir = tempfile::tempdir().unwrap();
        Frame::filled(4, 4, [0.0; 3], 0).save(&dir.path().join("0.png")).unwrap();
        Frame::filled(2, 2, [0.0; 3], 1).save(&dir.path().join("1.png")).unwrap();
        let err = load_frames(dir.path()).unwrap_err().to_string();
        assert!(err.contains("1.png"), "{err}");
    }

    #[test]
    fn non_numeric_name_is_an_ingest_error() {
        let dir = tempfile::tempdir().unwrap();
        Frame::filled(2, 2, [0.0; 3], 0).save(&dir.path().join("cover.png")).unwrap();
        assert!(matches!(load_frames(dir.path()), Err(Error::Ingest { .. })));
    }

    #[test]
    fn resize_keeps_constant_color() {
        let f = Frame::filled(8, 8, [0.25, 0.5, 1.0], 3).resized(4);
        assert_eq!((f.width, f.height, f.index), (4, 4, 3));
        for p in f.pixels() {
            assert!((p[0] - 0.25).abs() < 1e-6 && (p[2] - 1.0).abs() < 1e-6);
        }
    }
}
