//! Differentiable glimpse sensor: bilinear square-patch extraction around a
//! continuous location, plus whole-image bilinear downsampling.
//!
//! # Coordinate convention
//!
//! This is the single place the mapping is defined; every consumer (episode
//! loop, parse trees, renderers) goes through the helpers here.
//!
//! - A location is `(x, y)` with `x` along columns (left to right) and `y`
//!   along rows (top to bottom), both normalized to `[-1, 1]`.
//! - An `n × n` image occupies the continuous square `[-0.5, n-0.5]²` in
//!   pixel units, pixel `k`'s center sitting at `k`. Normalized coordinates
//!   map corner-to-corner: `px(t) = (t + 1)/2 · n - 0.5`, so `(-1,-1)` is
//!   the image's top-left corner and `(1,1)` its bottom-right corner.
//! - A patch of side `s` centered at `c` samples source coordinates
//!   `c + (u - (s-1)/2)` for `u = 0..s`, i.e. at unit source spacing. With
//!   `l = (0,0)` and scale 1 this reproduces the image exactly.
//! - Samples outside the image read as zero, so the sensor is total: any
//!   location is legal and the output is everywhere continuous in `l`.
//! - Patch sides round as `floor(scale · n + 0.5)`.
//!
//! Under this convention reference frames compose exactly: a frame of side
//! `s₁` at location `L` in an `n`-image, holding a patch at location `l`,
//! puts that patch's center at normalized absolute `L + (s₁/n) · l`.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// One differentiable crop: which image, where, and at what scale.
#[derive(Debug, Clone, Copy)]
pub struct GlimpseRequest {
    pub image: Var,
    /// Normalized center `(x, y) ∈ [-1,1]²`.
    pub location: Var,
    /// Side fraction in `(0, 1]`.
    pub scale: f64,
}

/// Patch side in pixels for a scale fraction of an `n`-pixel image.
pub fn patch_side(n: usize, scale: f64) -> usize {
    (scale * n as f64 + 0.5).floor() as usize
}

/// Largest `|l|` for which a patch of side `side` stays inside the image.
pub fn fits_threshold(n: usize, side: usize) -> f64 {
    1.0 - side as f64 / n as f64
}

/// Normalized coordinate to continuous pixel coordinate.
pub fn to_pixel(t: f64, n: usize) -> f64 {
    (t + 1.0) / 2.0 * n as f64 - 0.5
}

/// Continuous pixel coordinate to normalized coordinate.
pub fn to_norm(p: f64, n: usize) -> f64 {
    (p + 0.5) * 2.0 / n as f64 - 1.0
}

/// Absolute normalized center of a child located at `l` inside a frame of
/// `frame_side` pixels centered at `frame_loc` in an `n`-pixel image.
pub fn compose(frame_loc: (f64, f64), frame_side: usize, n: usize, l: (f64, f64)) -> (f64, f64) {
    let s = frame_side as f64 / n as f64;
    (frame_loc.0 + s * l.0, frame_loc.1 + s * l.1)
}

/// Extract a square patch of side `round(scale · n)` centered at `req.location`.
/// Gradients flow to both the image values and the location.
pub fn extract(tape: &mut Tape, req: GlimpseRequest) -> Result<Var> {
    if !(req.scale > 0.0 && req.scale <= 1.0) {
        return Err(Error::invalid(
            "glimpse",
            format!("scale {} outside (0, 1]", req.scale),
        ));
    }
    let n = tape.shape(req.image)[0];
    let side = patch_side(n, req.scale);
    tape.extract_patch(req.image, req.location, side)
}

/// Bilinear whole-image resize to `target_side × target_side`.
pub fn downsample(tape: &mut Tape, image: Var, target_side: usize) -> Result<Var> {
    tape.downsample(image, target_side)
}

/// Non-taped patch extraction, for inputs that never need gradients.
pub fn extract_data(image: &Tensor, loc: (f64, f64), scale: f64) -> Result<Tensor> {
    let shape = image.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::invalid(
            "glimpse",
            format!("image must be square rank-2, got {shape:?}"),
        ));
    }
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(Error::invalid(
            "glimpse",
            format!("scale {scale} outside (0, 1]"),
        ));
    }
    let n = shape[0];
    let side = patch_side(n, scale);
    let vals = kernel::patch_forward(image.vals(), n, loc.0, loc.1, side);
    Ok(Tensor::new(vec![side, side], vals))
}

/// Non-taped bilinear resize. Unlike the taped op this accepts rectangular
/// sources and upscaling, which dataset preparation needs.
pub fn resize_data(image: &Tensor, target_side: usize) -> Result<Tensor> {
    let shape = image.shape();
    if shape.len() != 2 {
        return Err(Error::invalid(
            "downsample",
            format!("image must be rank-2, got {shape:?}"),
        ));
    }
    if target_side == 0 {
        return Err(Error::invalid("downsample", "target side must be positive"));
    }
    let vals = kernel::resize_rect(image.vals(), shape[0], shape[1], target_side);
    Ok(Tensor::new(vec![target_side, target_side], vals))
}

/// Raw sampling math shared by the tape ops and the pure helpers.
pub(crate) mod kernel {
    #[inline]
    fn get(img: &[f64], h: usize, w: usize, iy: isize, ix: isize) -> f64 {
        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
            0.0
        } else {
            img[iy as usize * w + ix as usize]
        }
    }

    /// Bilinear read at continuous (sy, sx), zero outside the image.
    #[inline]
    pub fn sample(img: &[f64], h: usize, w: usize, sy: f64, sx: f64) -> f64 {
        let iy = sy.floor();
        let ix = sx.floor();
        let fy = sy - iy;
        let fx = sx - ix;
        let (iy, ix) = (iy as isize, ix as isize);
        (1.0 - fy) * (1.0 - fx) * get(img, h, w, iy, ix)
            + (1.0 - fy) * fx * get(img, h, w, iy, ix + 1)
            + fy * (1.0 - fx) * get(img, h, w, iy + 1, ix)
            + fy * fx * get(img, h, w, iy + 1, ix + 1)
    }

    #[inline]
    fn center(l: f64, n: usize) -> f64 {
        (l + 1.0) / 2.0 * n as f64 - 0.5
    }

    pub fn patch_forward(img: &[f64], n: usize, lx: f64, ly: f64, side: usize) -> Vec<f64> {
        let cy = center(ly, n);
        let cx = center(lx, n);
        let half = (side as f64 - 1.0) / 2.0;
        let mut out = vec![0.0; side * side];
        for u in 0..side {
            let sy = cy + u as f64 - half;
            for v in 0..side {
                let sx = cx + v as f64 - half;
                out[u * side + v] = sample(img, n, n, sy, sx);
            }
        }
        out
    }

    pub fn patch_backward_img(
        go: &[f64],
        n: usize,
        lx: f64,
        ly: f64,
        side: usize,
        gimg: &mut [f64],
    ) {
        let cy = center(ly, n);
        let cx = center(lx, n);
        let half = (side as f64 - 1.0) / 2.0;
        let mut scatter = |iy: isize, ix: isize, w: f64, g: f64| {
            if iy >= 0 && ix >= 0 && iy < n as isize && ix < n as isize {
                gimg[iy as usize * n + ix as usize] += w * g;
            }
        };
        for u in 0..side {
            let sy = cy + u as f64 - half;
            let iy = sy.floor();
            let fy = sy - iy;
            let iy = iy as isize;
            for v in 0..side {
                let g = go[u * side + v];
                if g == 0.0 {
                    continue;
                }
                let sx = cx + v as f64 - half;
                let ix = sx.floor();
                let fx = sx - ix;
                let ix = ix as isize;
                scatter(iy, ix, (1.0 - fy) * (1.0 - fx), g);
                scatter(iy, ix + 1, (1.0 - fy) * fx, g);
                scatter(iy + 1, ix, fy * (1.0 - fx), g);
                scatter(iy + 1, ix + 1, fy * fx, g);
            }
        }
    }

    /// Gradient of the patch w.r.t. the normalized location (dlx, dly).
    pub fn patch_backward_loc(
        go: &[f64],
        img: &[f64],
        n: usize,
        lx: f64,
        ly: f64,
        side: usize,
    ) -> (f64, f64) {
        let cy = center(ly, n);
        let cx = center(lx, n);
        let half = (side as f64 - 1.0) / 2.0;
        let mut dcx = 0.0;
        let mut dcy = 0.0;
        for u in 0..side {
            let sy = cy + u as f64 - half;
            let iy = sy.floor();
            let fy = sy - iy;
            let iy = iy as isize;
            for v in 0..side {
                let g = go[u * side + v];
                if g == 0.0 {
                    continue;
                }
                let sx = cx + v as f64 - half;
                let ix = sx.floor();
                let fx = sx - ix;
                let ix = ix as isize;
                let i00 = get(img, n, n, iy, ix);
                let i01 = get(img, n, n, iy, ix + 1);
                let i10 = get(img, n, n, iy + 1, ix);
                let i11 = get(img, n, n, iy + 1, ix + 1);
                dcx += g * ((1.0 - fy) * (i01 - i00) + fy * (i11 - i10));
                dcy += g * ((1.0 - fx) * (i10 - i00) + fx * (i11 - i01));
            }
        }
        // d(center)/d(l) = n/2 per axis
        let scale = n as f64 / 2.0;
        (dcx * scale, dcy * scale)
    }

    /// Corner-aligned source grid position for resizing `src` to `dst` pixels.
    #[inline]
    fn resize_coord(u: usize, src: usize, dst: usize) -> f64 {
        if dst == 1 {
            (src as f64 - 1.0) / 2.0
        } else {
            u as f64 * (src as f64 - 1.0) / (dst as f64 - 1.0)
        }
    }

    pub fn resize_forward(img: &[f64], n: usize, side: usize) -> Vec<f64> {
        resize_rect(img, n, n, side)
    }

    pub fn resize_rect(img: &[f64], h: usize, w: usize, side: usize) -> Vec<f64> {
        let mut out = vec![0.0; side * side];
        for u in 0..side {
            let sy = resize_coord(u, h, side);
            for v in 0..side {
                let sx = resize_coord(v, w, side);
                out[u * side + v] = sample(img, h, w, sy, sx);
            }
        }
        out
    }

    pub fn resize_backward(go: &[f64], n: usize, side: usize, gimg: &mut [f64]) {
        let mut scatter = |iy: isize, ix: isize, w: f64, g: f64| {
            if iy >= 0 && ix >= 0 && iy < n as isize && ix < n as isize {
                gimg[iy as usize * n + ix as usize] += w * g;
            }
        };
        for u in 0..side {
            let sy = resize_coord(u, n, side);
            let iy = sy.floor();
            let fy = sy - iy;
            let iy = iy as isize;
            for v in 0..side {
                let g = go[u * side + v];
                if g == 0.0 {
                    continue;
                }
                let sx = resize_coord(v, n, side);
                let ix = sx.floor();
                let fx = sx - ix;
                let ix = ix as isize;
                scatter(iy, ix, (1.0 - fy) * (1.0 - fx), g);
                scatter(iy, ix + 1, (1.0 - fy) * fx, g);
                scatter(iy + 1, ix, fy * (1.0 - fx), g);
                scatter(iy + 1, ix + 1, fy * fx, g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(n: usize, f: impl Fn(usize, usize) -> f64) -> Tensor {
        let mut vals = Vec::with_capacity(n * n);
        for y in 0..n {
            for x in 0..n {
                vals.push(f(y, x));
            }
        }
        Tensor::new(vec![n, n], vals)
    }

    #[test]
    fn rounded_patch_sides() {
        assert_eq!(patch_side(28, 0.5), 14);
        assert_eq!(patch_side(14, 0.5), 7);
        assert_eq!(patch_side(28, 0.25), 7);
        assert_eq!(patch_side(32, 0.5), 16);
    }

    #[test]
    fn full_scale_center_glimpse_is_identity() {
        let img = image(5, |y, x| (y * 5 + x) as f64);
        let mut tape = Tape::new();
        let iv = tape.constant(img.clone());
        let loc = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let g = extract(
            &mut tape,
            GlimpseRequest {
                image: iv,
                location: loc,
                scale: 1.0,
            },
        )
        .unwrap();
        assert_eq!(tape.vals(g), img.vals());
    }

    #[test]
    fn grid_aligned_half_scale_is_exact_subblock() {
        // 4x4 with distinct values; l = 0 centers a 2x2 patch on rows/cols 1..3
        let img = image(4, |y, x| (y * 4 + x) as f64);
        let t = extract_data(&img, (0.0, 0.0), 0.5).unwrap();
        assert_eq!(t.vals(), &[5.0, 6.0, 9.0, 10.0]);
        // l = (-0.5, -0.5) lands on the top-left 2x2 block
        let t = extract_data(&img, (-0.5, -0.5), 0.5).unwrap();
        assert_eq!(t.vals(), &[0.0, 1.0, 4.0, 5.0]);
    }

    #[test]
    fn out_of_frame_reads_zero() {
        let img = image(4, |_, _| 1.0);
        let t = extract_data(&img, (-2.0, -2.0), 0.5).unwrap();
        assert!(t.vals().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn downsample_constant_stays_constant() {
        let img = image(8, |_, _| 0.7);
        let t = resize_data(&img, 3).unwrap();
        assert!(t.vals().iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn downsample_checkerboard_to_single_pixel_averages() {
        let img = image(2, |y, x| ((y + x) % 2) as f64);
        let t = resize_data(&img, 1).unwrap();
        assert!((t.vals()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn downsample_half_of_fourteen_is_seven() {
        let img = image(14, |y, x| (y * x) as f64 / 169.0);
        let t = resize_data(&img, 7).unwrap();
        assert_eq!(t.shape(), &[7, 7]);
    }

    #[test]
    fn translation_consistency_on_grid_aligned_shift() {
        // shifting the image one pixel right and the location by 2/n gives
        // the same patch wherever both reads stay in-frame
        let n = 8;
        let base = image(n, |y, x| ((y * 31 + x * 17) % 11) as f64);
        let shifted = image(n, |y, x| {
            if x == 0 {
                0.0
            } else {
                ((y * 31 + (x - 1) * 17) % 11) as f64
            }
        });
        let l = (-0.25, 0.25);
        let l_shift = (l.0 + 2.0 / n as f64, l.1);
        let a = extract_data(&base, l, 0.5).unwrap();
        let b = extract_data(&shifted, l_shift, 0.5).unwrap();
        for (x, y) in a.vals().iter().zip(b.vals()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn continuity_in_location() {
        let img = image(9, |y, x| ((y * 13 + x * 7) % 5) as f64);
        let eps = 1e-9;
        for &l in &[-0.73, -0.2501, 0.0, 0.33, 0.99] {
            let a = extract_data(&img, (l, 0.1), 0.5).unwrap();
            let b = extract_data(&img, (l + eps, 0.1), 0.5).unwrap();
            for (x, y) in a.vals().iter().zip(b.vals()) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn location_gradient_nonzero_on_varying_content() {
        let img = image(8, |y, x| (y + x) as f64 / 14.0);
        let mut tape = Tape::new();
        let iv = tape.constant(img);
        let loc = tape.leaf(Tensor::vector(vec![0.1, -0.2]));
        let g = extract(
            &mut tape,
            GlimpseRequest {
                image: iv,
                location: loc,
                scale: 0.5,
            },
        )
        .unwrap();
        let m = tape.mean(g);
        tape.backward(m).unwrap();
        let lg = tape.grad(loc).unwrap();
        assert!(lg[0].abs() > 1e-9 && lg[1].abs() > 1e-9);
    }

    #[test]
    fn frame_composition_matches_direct_pixel_mapping() {
        let n = 28;
        let frame_side = 14;
        let frame_loc = (0.31, -0.17);
        let leaf = (-0.62, 0.44);
        let (ax, ay) = compose(frame_loc, frame_side, n, leaf);
        // sensor path: frame center in root pixels, leaf center inside frame
        let cfx = to_pixel(frame_loc.0, n);
        let clx = to_pixel(leaf.0, frame_side);
        let px_direct = cfx - (frame_side as f64 - 1.0) / 2.0 + clx;
        assert!((to_pixel(ax, n) - px_direct).abs() < 1e-12);
        let cfy = to_pixel(frame_loc.1, n);
        let cly = to_pixel(leaf.1, frame_side);
        let py_direct = cfy - (frame_side as f64 - 1.0) / 2.0 + cly;
        assert!((to_pixel(ay, n) - py_direct).abs() < 1e-12);
    }
}
