use rand::Rng;

use super::{DataError, TrainSpec, WagonKind, WagonSpec};
use crate::nn::Tensor;
use crate::seeds;

/// Minimum canvas width per car.
pub const SLOT_WIDTH: usize = 32;
pub const MIN_HEIGHT: usize = 24;

const LOCO_WIDTH: usize = 14;
const SHORT_WIDTH: usize = 19;
const LONG_WIDTH: usize = 25;
const GAP: usize = 3;
/// Roof-to-floor distance.
const BODY_RISE: usize = 13;
const INK: u8 = 255;

/// 8-bit grayscale raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, pixels: vec![0; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    fn set(&mut self, x: usize, y: usize) {
        self.pixels[y * self.width + x] = INK;
    }

    fn hline(&mut self, x0: usize, x1: usize, y: usize) {
        (x0..=x1).for_each(|x| self.set(x, y));
    }

    fn vline(&mut self, x: usize, y0: usize, y1: usize) {
        (y0..=y1).for_each(|y| self.set(x, y));
    }

    fn fill(&mut self, x0: usize, x1: usize, y0: usize, y1: usize) {
        (y0..=y1).for_each(|y| self.hline(x0, x1, y));
    }

    /// `[1, height, width]` tensor scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.pixels.iter().map(|&p| p as f64 / 255.0).collect();
        Tensor::new(vec![1, self.height, self.width], data).expect("image dimensions are positive")
    }

    /// Binary PGM (`P5`, maxval 255).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self, DataError> {
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(DataError::Parse("truncated PGM header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        pos += 1;
        if fields[0] != "P5" {
            return Err(DataError::Parse(format!("expected P5, found {}", fields[0])));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| DataError::Parse(format!("bad PGM field '{s}'")));
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval != 255 {
            return Err(DataError::Parse(format!("unsupported maxval {maxval}")));
        }
        let pixels =
            bytes.get(pos..pos + width * height).ok_or_else(|| DataError::Parse("PGM payload shorter than header".into()))?.to_vec();
        Ok(Self { width, height, pixels })
    }
}

/// Inclusive pixel bounds of one wagon glyph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GlyphBox {
    pub wagon: usize,
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

fn wagon_width(w: &WagonSpec) -> usize {
    match (w.kind, w.long) {
        (WagonKind::Locomotive, _) => LOCO_WIDTH,
        (_, true) => LONG_WIDTH,
        (_, false) => SHORT_WIDTH,
    }
}

/// Glyph placement for `train` on a `width × height` canvas. The horizontal
/// and vertical offsets are jittered from the train's seed.
pub fn layout(train: &TrainSpec, width: usize, height: usize) -> Result<Vec<GlyphBox>, DataError> {
    train.validate()?;
    let cars = train.cars().len();
    if width < SLOT_WIDTH * cars {
        return Err(DataError::Dimension(format!("width {width} < {SLOT_WIDTH} x {cars} cars")));
    }
    if height < MIN_HEIGHT {
        return Err(DataError::Dimension(format!("height {height} < {MIN_HEIGHT}")));
    }
    let needed: usize = train.wagons.iter().map(wagon_width).sum::<usize>() + GAP * cars;
    if needed + 2 > width {
        return Err(DataError::Dimension(format!("train needs {} columns, canvas has {width}", needed + 2)));
    }
    let mut rng = seeds::rng(seeds::derive_named(train.seed, "render"));
    let mut x = rng.gen_range(1..=width - needed - 1);
    let base = (height + BODY_RISE).div_ceil(2);
    let lo = BODY_RISE + 1;
    let hi = height - 3;
    let floor = (base as isize + rng.gen_range(-3isize..=3)).clamp(lo as isize, hi as isize) as usize;
    let mut boxes = Vec::with_capacity(train.wagons.len());
    for (i, w) in train.wagons.iter().enumerate() {
        let ww = wagon_width(w);
        let top = if w.kind == WagonKind::Locomotive { floor - 12 } else { floor - BODY_RISE };
        boxes.push(GlyphBox { wagon: i, x0: x, y0: top, x1: x + ww - 1, y1: floor + 2 });
        x += ww + GAP;
    }
    Ok(boxes)
}

/// Rasterises `train`. Glyphs: windows for passenger cars, a filled block for
/// loaded freight, an empty outline for empty wagons, doubled walls for
/// reinforced cars, a wider body for long cars and a gap in the roof line
/// for open roofs.
pub fn render(train: &TrainSpec, width: usize, height: usize) -> Result<GrayImage, DataError> {
    let boxes = layout(train, width, height)?;
    let mut img = GrayImage::new(width, height);
    for (w, b) in train.wagons.iter().zip(&boxes) {
        let floor = b.y1 - 2;
        if w.kind == WagonKind::Locomotive {
            draw_locomotive(&mut img, b.x0, floor);
        } else {
            draw_car(&mut img, w, b.x0, b.x1 - b.x0 + 1, floor);
        }
    }
    Ok(img)
}

fn draw_wheels(img: &mut GrayImage, x0: usize, w: usize, floor: usize) {
    img.fill(x0 + 2, x0 + 3, floor + 1, floor + 2);
    img.fill(x0 + w - 4, x0 + w - 3, floor + 1, floor + 2);
}

fn draw_locomotive(img: &mut GrayImage, x0: usize, floor: usize) {
    let w = LOCO_WIDTH;
    img.fill(x0, x0 + w - 1, floor - 6, floor);
    // cab
    img.vline(x0 + 8, floor - 12, floor - 7);
    img.vline(x0 + w - 1, floor - 12, floor - 7);
    img.hline(x0 + 8, x0 + w - 1, floor - 12);
    // chimney
    img.fill(x0 + 2, x0 + 3, floor - 10, floor - 7);
    draw_wheels(img, x0, w, floor);
}

fn draw_car(img: &mut GrayImage, spec: &WagonSpec, x0: usize, w: usize, floor: usize) {
    let top = floor - BODY_RISE;
    let x1 = x0 + w - 1;
    img.hline(x0, x1, floor);
    img.vline(x0, top, floor);
    img.vline(x1, top, floor);
    if spec.open_roof {
        let (g0, g1) = (x0 + w / 3, x1 - w / 3);
        (x0..=x1).filter(|&x| x < g0 || x > g1).for_each(|x| img.set(x, top));
    } else {
        img.hline(x0, x1, top);
    }
    if spec.reinforced {
        img.vline(x0 + 2, top, floor);
        img.vline(x1 - 2, top, floor);
    }
    match spec.kind {
        WagonKind::Passenger => {
            let count = if spec.long { 3 } else { 2 };
            let interior = w - 4;
            let free = interior - 3 * count;
            for i in 0..count {
                let left = x0 + 2 + (free * (i + 1)) / (count + 1) + 3 * i;
                img.fill(left, left + 2, top + 3, top + 5);
            }
        }
        WagonKind::FreightLoaded => img.fill(x0 + 3, x1 - 3, top + 5, floor - 2),
        _ => {}
    }
    draw_wheels(img, x0, w, floor);
}
