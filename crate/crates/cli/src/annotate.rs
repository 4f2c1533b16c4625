//! Box outlines and confidence labels drawn onto frames.

use sod_core::metrics::Detection;
use sod_core::sim::RgbImage;

const BOX_COLOR: [u8; 3] = [0, 255, 0];
const TEXT_COLOR: [u8; 3] = [255, 255, 255];

/// 3x5 glyphs for `0-9` and `.`, one row per entry, high bit on the left.
fn glyph(c: char) -> Option<[u8; 5]> {
    Some(match c {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        _ => return None,
    })
}

fn put(img: &mut RgbImage, x: i64, y: i64, rgb: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as usize) < img.width && (y as usize) < img.height {
        img.put(x as usize, y as usize, rgb);
    }
}

pub fn draw_rect(img: &mut RgbImage, b: [f64; 4], rgb: [u8; 3]) {
    let x1 = b[0].floor() as i64;
    let y1 = b[1].floor() as i64;
    let x2 = (b[2].ceil() as i64 - 1).max(x1);
    let y2 = (b[3].ceil() as i64 - 1).max(y1);
    for x in x1..=x2 {
        put(img, x, y1, rgb);
        put(img, x, y2, rgb);
    }
    for y in y1..=y2 {
        put(img, x1, y, rgb);
        put(img, x2, y, rgb);
    }
}

/// Text with its top-left corner at `(x, y)`; unsupported characters are skipped.
pub fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, rgb: [u8; 3]) {
    let mut cx = x;
    for c in text.chars() {
        if let Some(rows) = glyph(c) {
            for (dy, row) in rows.iter().enumerate() {
                for dx in 0..3 {
                    if row & (0b100 >> dx) != 0 {
                        put(img, cx + dx, y + dy as i64, rgb);
                    }
                }
            }
        }
        cx += 4;
    }
}

/// Outline plus two-decimal confidence above each box (below it at the top edge).
pub fn annotate(img: &mut RgbImage, dets: &[Detection]) {
    for d in dets {
        draw_rect(img, d.bbox, BOX_COLOR);
        let label = format!("{:.2}", d.confidence);
        let x = d.bbox[0].floor() as i64;
        let y = if d.bbox[1] >= 6.0 { d.bbox[1].floor() as i64 - 6 } else { d.bbox[3].ceil() as i64 + 1 };
        draw_text(img, x, y, &label, TEXT_COLOR);
    }
}
