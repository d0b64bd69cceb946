//! Built-in digit glyphs rendered from a 5x7 bitmap font, used as a
//! drop-in replacement for MNIST digits when no IDX files are available.

use super::pnm::Image;

// 5-bit rows, top to bottom
const FONT: [[u8; 7]; 10] = [
    [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110], // 0
    [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110], // 1
    [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111], // 2
    [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110], // 3
    [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010], // 4
    [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110], // 5
    [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110], // 6
    [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000], // 7
    [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110], // 8
    [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100], // 9
];

/// White-on-black 28x28 rendering of one digit (4x upscaled font, centered
/// horizontally), matching the MNIST layout.
pub fn render_glyph(digit: u8) -> Image {
    assert!(digit <= 9);
    let mut img = Image::new(28, 28, 1);
    let rows = &FONT[digit as usize];
    for (fy, row) in rows.iter().enumerate() {
        for fx in 0..5 {
            if row & (1 << (4 - fx)) == 0 {
                continue;
            }
            for dy in 0..4 {
                for dx in 0..4 {
                    img.set(4 + fx * 4 + dx, fy * 4 + dy, 0, 255);
                }
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glyphs_are_distinct_and_nonempty() {
        let rendered: Vec<Image> = (0u8..10).map(render_glyph).collect();
        for (i, img) in rendered.iter().enumerate() {
            assert!(img.pixels.iter().any(|&p| p > 0), "digit {i} is blank");
        }
        for i in 0..10 {
            for j in i + 1..10 {
                assert_ne!(rendered[i].pixels, rendered[j].pixels, "{i} == {j}");
            }
        }
    }
}
