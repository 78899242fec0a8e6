//! Bilinear and nearest-neighbour resampling.
//!
//! Two coordinate conventions are in use. General resizing maps pixel
//! centres onto pixel centres (`src = (dst + 0.5) * in / out - 0.5`). The
//! 2× patch pipeline uses a grid-aligned convention (`src = dst / 2` going
//! up, `src = 2 * dst` going down) so every native pixel survives an
//! up/down round trip at exactly its original value.

use crate::tensor::{Map, Tensor};

#[inline]
fn lerp_axis(src: f64, len: usize) -> (usize, usize, f64) {
    let s = src.clamp(0.0, (len - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, s - i0 as f64)
}

fn bilinear_with(
    src: &Tensor,
    out_h: usize,
    out_w: usize,
    map_y: impl Fn(usize) -> f64,
    map_x: impl Fn(usize) -> f64,
) -> Tensor {
    let ys: Vec<_> = (0..out_h).map(|y| lerp_axis(map_y(y), src.height)).collect();
    let xs: Vec<_> = (0..out_w).map(|x| lerp_axis(map_x(x), src.width)).collect();
    let mut out = Tensor::zeros(src.channels, out_h, out_w);
    for c in 0..src.channels {
        let plane = src.plane(c);
        let w = src.width;
        let dst = out.plane_mut(c);
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                dst[oy * out_w + ox] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

/// Pixel-centre bilinear resize to `out_h × out_w`.
pub fn resize_bilinear(src: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let sy = src.height as f64 / out_h as f64;
    let sx = src.width as f64 / out_w as f64;
    bilinear_with(
        src,
        out_h,
        out_w,
        |y| (y as f64 + 0.5) * sy - 0.5,
        |x| (x as f64 + 0.5) * sx - 0.5,
    )
}

/// Pixel-centre nearest-neighbour resize.
pub fn resize_nearest<T: Clone>(src: &Map<T>, out_h: usize, out_w: usize) -> Map<T> {
    let sy = src.height as f64 / out_h as f64;
    let sx = src.width as f64 / out_w as f64;
    Map::from_fn(out_h, out_w, |y, x| {
        let iy = (((y as f64 + 0.5) * sy) as usize).min(src.height - 1);
        let ix = (((x as f64 + 0.5) * sx) as usize).min(src.width - 1);
        src.get(iy, ix)
    })
}

/// Grid-aligned 2× bilinear upsampling: output `(2H, 2W)`, even output
/// pixels coincide with input pixels, odd ones interpolate their neighbours.
pub fn upsample2(src: &Tensor) -> Tensor {
    bilinear_with(
        src,
        src.height * 2,
        src.width * 2,
        |y| y as f64 / 2.0,
        |x| x as f64 / 2.0,
    )
}

/// Inverse of [`upsample2`]'s grid: output pixel `i` samples input `2i`.
pub fn downsample2(src: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    bilinear_with(src, out_h, out_w, |y| 2.0 * y as f64, |x| 2.0 * x as f64)
}

/// Grid-aligned 2× nearest upsampling for label maps.
pub fn upsample2_nearest<T: Clone>(src: &Map<T>) -> Map<T> {
    Map::from_fn(src.height * 2, src.width * 2, |y, x| src.get(y / 2, x / 2))
}
