//! PNG panel rendering: parse panels (input with frame boxes, per-frame
//! parts, predicted vs actual glimpses, rolling reconstruction), pattern
//! completions and vector-swap compositions.

use crate::autodiff::{Tape, Tensor};
use crate::error::Result;
use crate::glimpse;
use crate::model::EpisodeTrace;
use image::{Rgb, RgbImage};

const FRAME_COLORS: [[u8; 3]; 6] = [
    [228, 52, 52],   // red
    [64, 168, 70],   // green
    [66, 102, 235],  // blue
    [240, 150, 40],  // orange
    [70, 190, 190],  // teal
    [200, 80, 200],  // magenta
];
const INIT_COLOR: [u8; 3] = [150, 70, 210]; // purple
const BACKGROUND: [u8; 3] = [24, 24, 24];

fn frame_color(t: usize) -> [u8; 3] {
    FRAME_COLORS[t % FRAME_COLORS.len()]
}

/// A grayscale tile upscaled by an integer factor.
pub struct Tile {
    pub pixels: RgbImage,
}

impl Tile {
    pub fn from_vals(vals: &[f64], side: usize, upscale: u32) -> Tile {
        let mut img = RgbImage::new(side as u32 * upscale, side as u32 * upscale);
        for (y, x, p) in img.enumerate_pixels_mut().map(|(x, y, p)| (y, x, p)) {
            let sy = (y / upscale) as usize;
            let sx = (x / upscale) as usize;
            let v = (vals[sy * side + sx].clamp(0.0, 1.0) * 255.0).round() as u8;
            *p = Rgb([v, v, v]);
        }
        Tile { pixels: img }
    }

    pub fn blank(side: usize, upscale: u32) -> Tile {
        let mut img = RgbImage::new(side as u32 * upscale, side as u32 * upscale);
        for p in img.pixels_mut() {
            *p = Rgb(BACKGROUND);
        }
        Tile { pixels: img }
    }

    /// Draw a square outline centered at a normalized location of the tile's
    /// source image.
    pub fn draw_box(&mut self, loc: (f64, f64), box_side: usize, src_side: usize, color: [u8; 3]) {
        let upscale = self.pixels.width() / src_side as u32;
        let u = upscale as f64;
        let cx = (glimpse::to_pixel(loc.0, src_side) + 0.5) * u;
        let cy = (glimpse::to_pixel(loc.1, src_side) + 0.5) * u;
        let half = box_side as f64 / 2.0 * u;
        let (x0, x1) = ((cx - half) as i64, (cx + half) as i64);
        let (y0, y1) = ((cy - half) as i64, (cy + half) as i64);
        let (w, h) = (self.pixels.width() as i64, self.pixels.height() as i64);
        let mut put = |x: i64, y: i64| {
            if x >= 0 && y >= 0 && x < w && y < h {
                self.pixels.put_pixel(x as u32, y as u32, Rgb(color));
            }
        };
        for x in x0..=x1 {
            put(x, y0);
            put(x, y0 + 1);
            put(x, y1);
            put(x, y1 - 1);
        }
        for y in y0..=y1 {
            put(x0, y);
            put(x0 + 1, y);
            put(x1, y);
            put(x1 - 1, y);
        }
    }
}

/// Lay tile rows out on one canvas with uniform padding.
pub fn compose_rows(rows: &[Vec<Tile>], pad: u32) -> RgbImage {
    let row_height = |row: &Vec<Tile>| row.iter().map(|t| t.pixels.height()).max().unwrap_or(0);
    let row_width = |row: &Vec<Tile>| {
        row.iter().map(|t| t.pixels.width() + pad).sum::<u32>() + pad
    };
    let width = rows.iter().map(row_width).max().unwrap_or(pad);
    let height = rows.iter().map(|r| row_height(r) + pad).sum::<u32>() + pad;
    let mut canvas = RgbImage::from_pixel(width, height, Rgb(BACKGROUND));
    let mut y = pad;
    for row in rows {
        let mut x = pad;
        for tile in row {
            image::imageops::overlay(&mut canvas, &tile.pixels, x as i64, y as i64);
            x += tile.pixels.width() + pad;
        }
        y += row_height(row) + pad;
    }
    canvas
}

/// Five-row episode panel: input with frame boxes, frames with part boxes,
/// predicted glimpses, actual glimpses, and the reconstruction over time.
pub fn parse_panel(tape: &Tape, trace: &EpisodeTrace, upscale: u32) -> Result<RgbImage> {
    let n = tape.shape(trace.image)[0];
    let image_vals = tape.vals(trace.image);

    let mut input_tile = Tile::from_vals(image_vals, n, upscale);
    if let Some(init) = &trace.init {
        let side = (tape.numel(init.glimpse) as f64).sqrt() as usize;
        input_tile.draw_box((init.loc[0], init.loc[1]), side, n, INIT_COLOR);
    }
    for (t, m) in trace.macros.iter().enumerate() {
        if let (Some(loc), Some(frame)) = (m.loc, m.frame) {
            let side = tape.shape(frame)[0];
            input_tile.draw_box((loc[0], loc[1]), side, n, frame_color(t));
        } else if !trace.two_level {
            for u in &m.micros {
                let side = (tape.numel(u.pred) as f64).sqrt() as usize;
                input_tile.draw_box((u.loc[0], u.loc[1]), side, n, frame_color(t));
            }
        }
    }

    let mut frames_row = Vec::new();
    let mut pred_row = Vec::new();
    let mut actual_row = Vec::new();
    let mut recon_row = Vec::new();
    for (t, m) in trace.macros.iter().enumerate() {
        let frame_side = m.frame.map(|f| tape.shape(f)[0]).unwrap_or(n);
        let mut frame_tile = match m.frame {
            Some(f) => Tile::from_vals(tape.vals(f), frame_side, upscale),
            None => Tile::blank(frame_side, upscale),
        };
        for u in &m.micros {
            let side = (tape.numel(u.pred) as f64).sqrt() as usize;
            if trace.two_level {
                frame_tile.draw_box((u.loc[0], u.loc[1]), side, frame_side, frame_color(t));
            }
        }
        frames_row.push(frame_tile);

        for u in &m.micros {
            let side = (tape.numel(u.pred) as f64).sqrt() as usize;
            pred_row.push(Tile::from_vals(tape.vals(u.pred), side, upscale));
            actual_row.push(match u.glimpse {
                Some(g) => Tile::from_vals(tape.vals(g), side, upscale),
                None => Tile::blank(side, upscale),
            });
            recon_row.push(Tile::from_vals(tape.vals(u.recon), n, upscale / 2 + 1));
        }
    }

    Ok(compose_rows(
        &[
            vec![input_tile],
            frames_row,
            pred_row,
            actual_row,
            recon_row,
        ],
        upscale.max(2),
    ))
}

/// Completion panel: the input with its initialization glimpse, then the
/// final reconstruction of a normal episode next to the hallucinated one.
pub fn hallucination_panel(
    normal: (&Tape, &EpisodeTrace),
    hallucinated: (&Tape, &EpisodeTrace),
    upscale: u32,
) -> Result<RgbImage> {
    let n = normal.0.shape(normal.1.image)[0];
    let mut input_tile = Tile::from_vals(normal.0.vals(normal.1.image), n, upscale);
    if let Some(init) = &hallucinated.1.init {
        let side = (hallucinated.0.numel(init.glimpse) as f64).sqrt() as usize;
        input_tile.draw_box((init.loc[0], init.loc[1]), side, n, INIT_COLOR);
    }
    let normal_recon = Tile::from_vals(normal.0.vals(normal.1.final_recon()), n, upscale);
    let halluc_recon = Tile::from_vals(
        hallucinated.0.vals(hallucinated.1.final_recon()),
        n,
        upscale,
    );
    let mut pred_row = Vec::new();
    for m in &hallucinated.1.macros {
        for u in &m.micros {
            let side = (hallucinated.0.numel(u.pred) as f64).sqrt() as usize;
            pred_row.push(Tile::from_vals(hallucinated.0.vals(u.pred), side, upscale));
        }
    }
    Ok(compose_rows(
        &[vec![input_tile, normal_recon, halluc_recon], pred_row],
        upscale.max(2),
    ))
}

/// Composition panel: two inputs on top, their swapped-vector completions on
/// the bottom.
pub fn compose_panel(
    input_a: (&Tape, &EpisodeTrace),
    input_b: (&Tape, &EpisodeTrace),
    hybrid_a: (&Tape, &EpisodeTrace),
    hybrid_b: (&Tape, &EpisodeTrace),
    upscale: u32,
) -> Result<RgbImage> {
    let n = input_a.0.shape(input_a.1.image)[0];
    let tile = |pair: (&Tape, &EpisodeTrace), of_final: bool| {
        if of_final {
            Tile::from_vals(pair.0.vals(pair.1.final_recon()), n, upscale)
        } else {
            Tile::from_vals(pair.0.vals(pair.1.image), n, upscale)
        }
    };
    Ok(compose_rows(
        &[
            vec![tile(input_a, false), tile(input_b, false)],
            vec![tile(hybrid_a, true), tile(hybrid_b, true)],
        ],
        upscale.max(2),
    ))
}

/// Write a tensor as a grayscale PNG (debugging aid).
pub fn save_gray(path: &std::path::Path, t: &Tensor, upscale: u32) -> Result<()> {
    let side = t.shape()[0];
    let tile = Tile::from_vals(t.vals(), side, upscale);
    tile.pixels
        .save(path)
        .map_err(crate::error::Error::Image)?;
    Ok(())
}
