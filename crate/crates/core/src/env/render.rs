use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Result, SfbcError};

use super::State;

pub const DEFAULT_FRAME_SIZE: u32 = 256;
const MIN_FRAME_SIZE: u32 = 64;

const WHITE: [u8; 3] = [255, 255, 255];
const RED: [u8; 3] = [204, 32, 32];
const BLACK: [u8; 3] = [0, 0, 0];

/// Row-major RGB8 image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
}

impl Frame {
    fn filled(width: u32, height: u32, color: [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width as usize * height as usize * 3);
        for _ in 0..width as usize * height as usize {
            pixels.extend_from_slice(&color);
        }
        Frame {
            width,
            height,
            pixels,
        }
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    fn put(&mut self, x: u32, y: u32, color: [u8; 3]) {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        self.pixels[i..i + 3].copy_from_slice(&color);
    }

    /// Paints every pixel whose center satisfies `inside`.
    fn fill_where(&mut self, color: [u8; 3], inside: impl Fn(f64, f64) -> bool) {
        for y in 0..self.height {
            for x in 0..self.width {
                if inside(x as f64 + 0.5, y as f64 + 0.5) {
                    self.put(x, y, color);
                }
            }
        }
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut encoder = png::Encoder::new(&mut out, self.width, self.height);
            encoder.set_color(png::ColorType::Rgb);
            encoder.set_depth(png::BitDepth::Eight);
            let mut writer = encoder
                .write_header()
                .map_err(|e| SfbcError::InvalidArgument(format!("png header: {e}")))?;
            writer
                .write_image_data(&self.pixels)
                .map_err(|e| SfbcError::InvalidArgument(format!("png data: {e}")))?;
        }
        Ok(out)
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    /// Writes the frame, choosing PPM for a `.ppm` extension and PNG otherwise.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = match path.extension().and_then(|e| e.to_str()) {
            Some("ppm") => self.encode_ppm(),
            _ => self.encode_png()?,
        };
        let file = std::fs::File::create(path).map_err(|e| SfbcError::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&bytes).map_err(|e| SfbcError::io(path, e))?;
        w.flush().map_err(|e| SfbcError::io(path, e))
    }
}

/// Draws the pendulum as a red stick pivoting at the image center with a black
/// dot on its free end. `theta = 0` points straight up; positive angles swing
/// the free end to the left.
pub fn render(s: &State, width: u32, height: u32) -> Result<Frame> {
    if width < MIN_FRAME_SIZE || height < MIN_FRAME_SIZE {
        return Err(SfbcError::InvalidArgument(format!(
            "frame must be at least {MIN_FRAME_SIZE}x{MIN_FRAME_SIZE}, got {width}x{height}"
        )));
    }
    let mut frame = Frame::filled(width, height, WHITE);
    let scale = width.min(height) as f64;
    let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
    let length = 0.4 * scale;
    let half_width = 0.04 * scale;
    let dot_radius = 0.05 * scale;

    // Unit vector from pivot to free end in image coordinates (y grows downward).
    let (dx, dy) = (-s.theta.sin(), -s.theta.cos());
    frame.fill_where(RED, |px, py| {
        let (rx, ry) = (px - cx, py - cy);
        let along = rx * dx + ry * dy;
        let across = (rx * dy - ry * dx).abs();
        (0.0..=length).contains(&along) && across <= half_width
    });

    let (ex, ey) = (cx + length * dx, cy + length * dy);
    frame.fill_where(BLACK, |px, py| {
        let (rx, ry) = (px - ex, py - ey);
        rx * rx + ry * ry <= dot_radius * dot_radius
    });
    Ok(frame)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn dot_centroid(f: &Frame) -> (f64, f64) {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
        for y in 0..f.height {
            for x in 0..f.width {
                if f.pixel(x, y) == BLACK {
                    sx += x as f64;
                    sy += y as f64;
                    n += 1.0;
                }
            }
        }
        assert!(n > 0.0, "no dot pixels");
        (sx / n, sy / n)
    }

    #[test]
    fn buffer_length_matches_dimensions() {
        let f = render(&State::new(0.7, 0.0), 80, 120).unwrap();
        assert_eq!(f.pixels.len(), 80 * 120 * 3);
    }

    #[test]
    fn upright_dot_in_top_half() {
        let f = render(&State::UPRIGHT, 256, 256).unwrap();
        let (x, y) = dot_centroid(&f);
        assert!(y < 128.0);
        assert!((x - 128.0).abs() < 2.0);
        // stick body is red just above the pivot
        assert_eq!(f.pixel(128, 100), RED);
        assert_eq!(f.pixel(5, 5), WHITE);
    }

    #[test]
    fn hanging_dot_in_bottom_half() {
        let f = render(&State::HANGING, 256, 256).unwrap();
        assert!(dot_centroid(&f).1 > 128.0);
    }

    #[test]
    fn quarter_turns_are_mirrored() {
        let left = render(&State::new(PI / 2.0, 0.0), 128, 128).unwrap();
        let right = render(&State::new(-PI / 2.0, 0.0), 128, 128).unwrap();
        let (lx, _) = dot_centroid(&left);
        let (rx, _) = dot_centroid(&right);
        assert!(lx < 64.0 && rx > 64.0);
        assert!((lx + rx - 128.0).abs() < 2.0);
    }

    #[test]
    fn rendering_is_pure() {
        let s = State::new(1.234, -3.0);
        assert_eq!(render(&s, 96, 64).unwrap(), render(&s, 96, 64).unwrap());
    }

    #[test]
    fn too_small_is_rejected() {
        assert!(render(&State::UPRIGHT, 32, 256).is_err());
    }

    #[test]
    fn png_roundtrip_header() {
        let f = render(&State::UPRIGHT, 64, 64).unwrap();
        let png = f.encode_png().unwrap();
        assert_eq!(&png[..8], b"\x89PNG\r\n\x1a\n");
        let ppm = f.encode_ppm();
        assert!(ppm.starts_with(b"P6\n64 64\n255\n"));
        assert_eq!(ppm.len(), 13 + 64 * 64 * 3);
    }
}
