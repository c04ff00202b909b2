//! Static PNG plots without external imaging dependencies: a minimal PNG
//! encoder (stored-mode deflate) plus line and bar rendering into an RGB
//! buffer. Good enough for loss curves and accuracy bars.

use std::io::Write;
use std::path::Path;

use crate::train::EpochRecord;

fn crc32(bytes: &[u8]) -> u32 {
    let mut table = [0u32; 256];
    for (n, slot) in table.iter_mut().enumerate() {
        let mut c = n as u32;
        for _ in 0..8 {
            c = if c & 1 == 1 { 0xEDB88320 ^ (c >> 1) } else { c >> 1 };
        }
        *slot = c;
    }
    let mut c = 0xFFFF_FFFFu32;
    for &b in bytes {
        c = table[((c ^ b as u32) & 0xFF) as usize] ^ (c >> 8);
    }
    c ^ 0xFFFF_FFFF
}

fn adler32(bytes: &[u8]) -> u32 {
    let (mut a, mut b) = (1u32, 0u32);
    for &x in bytes {
        a = (a + x as u32) % 65521;
        b = (b + a) % 65521;
    }
    (b << 16) | a
}

fn chunk(out: &mut Vec<u8>, tag: &[u8; 4], data: &[u8]) {
    out.extend_from_slice(&(data.len() as u32).to_be_bytes());
    out.extend_from_slice(tag);
    out.extend_from_slice(data);
    let mut crc_input = tag.to_vec();
    crc_input.extend_from_slice(data);
    out.extend_from_slice(&crc32(&crc_input).to_be_bytes());
}

/// Writes an 8-bit RGB PNG. `rgb` is row-major, 3 bytes per pixel.
pub fn write_png(path: &Path, width: usize, height: usize, rgb: &[u8]) -> std::io::Result<()> {
    assert_eq!(rgb.len(), width * height * 3);
    let mut png = Vec::new();
    png.extend_from_slice(&[0x89, b'P', b'N', b'G', 0x0D, 0x0A, 0x1A, 0x0A]);
    let mut ihdr = Vec::new();
    ihdr.extend_from_slice(&(width as u32).to_be_bytes());
    ihdr.extend_from_slice(&(height as u32).to_be_bytes());
    ihdr.extend_from_slice(&[8, 2, 0, 0, 0]); // 8-bit RGB, no interlace
    chunk(&mut png, b"IHDR", &ihdr);

    // Raw scanlines with filter byte 0.
    let mut raw = Vec::with_capacity(height * (1 + width * 3));
    for y in 0..height {
        raw.push(0);
        raw.extend_from_slice(&rgb[y * width * 3..(y + 1) * width * 3]);
    }
    // zlib stream with stored (uncompressed) deflate blocks.
    let mut z = vec![0x78, 0x01];
    for (i, block) in raw.chunks(65_535).enumerate() {
        let last = (i + 1) * 65_535 >= raw.len();
        z.push(last as u8);
        z.extend_from_slice(&(block.len() as u16).to_le_bytes());
        z.extend_from_slice(&(!(block.len() as u16)).to_le_bytes());
        z.extend_from_slice(block);
    }
    z.extend_from_slice(&adler32(&raw).to_be_bytes());
    chunk(&mut png, b"IDAT", &z);
    chunk(&mut png, b"IEND", &[]);
    let mut file = std::fs::File::create(path)?;
    file.write_all(&png)
}

pub struct Canvas {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Canvas {
    pub fn white(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            rgb: vec![255; width * height * 3],
        }
    }

    pub fn set(&mut self, x: i64, y: i64, color: [u8; 3]) {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            return;
        }
        let idx = (y as usize * self.width + x as usize) * 3;
        self.rgb[idx..idx + 3].copy_from_slice(&color);
    }

    pub fn line(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, color: [u8; 3]) {
        let (mut x, mut y) = (x0, y0);
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            self.set(x, y, color);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    pub fn fill_rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, color: [u8; 3]) {
        for y in y0.min(y1)..=y0.max(y1) {
            for x in x0.min(x1)..=x0.max(x1) {
                self.set(x, y, color);
            }
        }
    }
}

const SERIES_COLORS: [[u8; 3]; 4] = [
    [204, 51, 51],
    [51, 102, 204],
    [51, 153, 51],
    [153, 51, 153],
];

/// Total-loss and validation-accuracy curves from a fit history.
pub fn plot_loss_curves(history: &[EpochRecord], path: &Path) -> std::io::Result<()> {
    let (w, h) = (640usize, 360usize);
    let mut canvas = Canvas::white(w, h);
    let margin = 32i64;
    canvas.line(margin, h as i64 - margin, w as i64 - margin, h as i64 - margin, [0, 0, 0]);
    canvas.line(margin, margin, margin, h as i64 - margin, [0, 0, 0]);
    if history.is_empty() {
        return write_png(path, w, h, &canvas.rgb);
    }
    let max_loss = history
        .iter()
        .map(|r| r.losses.total)
        .fold(f64::MIN, f64::max)
        .max(1e-9);
    let n = history.len().max(2);
    let px = |i: usize| margin + ((w as i64 - 2 * margin) * i as i64) / (n as i64 - 1).max(1);
    let py = |v: f64, vmax: f64| {
        let frac = (v / vmax).clamp(0.0, 1.0);
        h as i64 - margin - ((h as i64 - 2 * margin) as f64 * frac) as i64
    };
    for i in 1..history.len() {
        canvas.line(
            px(i - 1),
            py(history[i - 1].losses.total, max_loss),
            px(i),
            py(history[i].losses.total, max_loss),
            SERIES_COLORS[0],
        );
        canvas.line(
            px(i - 1),
            py(history[i - 1].val_accuracy, 1.0),
            px(i),
            py(history[i].val_accuracy, 1.0),
            SERIES_COLORS[1],
        );
    }
    write_png(path, w, h, &canvas.rgb)
}

/// Horizontal layout of labeled accuracy bars in [0, 1].
pub fn plot_accuracy_bars(bars: &[(String, f64)], path: &Path) -> std::io::Result<()> {
    let (w, h) = (640usize, 360usize);
    let mut canvas = Canvas::white(w, h);
    let margin = 32i64;
    canvas.line(margin, h as i64 - margin, w as i64 - margin, h as i64 - margin, [0, 0, 0]);
    canvas.line(margin, margin, margin, h as i64 - margin, [0, 0, 0]);
    if bars.is_empty() {
        return write_png(path, w, h, &canvas.rgb);
    }
    let span = w as i64 - 2 * margin;
    let slot = span / bars.len() as i64;
    for (i, (_, acc)) in bars.iter().enumerate() {
        let x0 = margin + slot * i as i64 + slot / 6;
        let x1 = margin + slot * (i as i64 + 1) - slot / 6;
        let top = h as i64
            - margin
            - ((h as i64 - 2 * margin) as f64 * acc.clamp(0.0, 1.0)) as i64;
        canvas.fill_rect(x0, top, x1, h as i64 - margin - 1, SERIES_COLORS[i % 4]);
    }
    write_png(path, w, h, &canvas.rgb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_has_valid_signature_and_chunks() {
        let dir = std::env::temp_dir().join(format!("crossfeat-png-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.png");
        let mut canvas = Canvas::white(20, 10);
        canvas.line(0, 0, 19, 9, [255, 0, 0]);
        write_png(&path, 20, 10, &canvas.rgb).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], &[0x89, b'P', b'N', b'G', 0x0D, 0x0A, 0x1A, 0x0A]);
        assert_eq!(&bytes[12..16], b"IHDR");
        assert!(bytes.windows(4).any(|w| w == b"IEND"));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn crc_known_vector() {
        // CRC-32 of "123456789" is 0xCBF43926.
        assert_eq!(crc32(b"123456789"), 0xCBF43926);
    }
}
