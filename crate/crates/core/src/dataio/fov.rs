use crate::error::{Error, Result};
use crate::tensor::{BinaryMap, Map, Tensor};

/// Relative threshold used when a dataset ships no FOV masks.
pub const DEFAULT_FOV_THRESHOLD: f64 = 0.04;

/// Derives a field-of-view mask from image intensities.
///
/// Pixels whose channel-mean intensity exceeds `threshold × max` are kept,
/// the largest 4-connected component is selected and its holes are filled.
/// Fails when that component is empty or smaller than `min_component`.
pub fn derive_fov(image: &Tensor, threshold: f64, min_component: usize) -> Result<BinaryMap> {
    let mean = image.channel_mean();
    let peak = mean.data.iter().cloned().fold(0.0, f64::max);
    let cut = threshold * peak;
    let bright = mean.map(|&v| v > cut);

    let (labels, sizes) = components(&bright, true);
    let best = sizes
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, &n)| (i, n));
    let (label, size) = match best {
        Some(b) if b.1 > 0 && b.1 >= min_component => b,
        _ => return Err(Error::EmptyFov { threshold }),
    };
    debug_assert!(size > 0);
    let mask = labels.map(|&l| l == Some(label));
    Ok(fill_holes(&mask))
}

/// 4-connected components of pixels equal to `value`, labelled in raster
/// order of their first pixel.
fn components(map: &BinaryMap, value: bool) -> (Map<Option<usize>>, Vec<usize>) {
    let (h, w) = map.dims();
    let mut labels: Map<Option<usize>> = Map::filled(h, w, None);
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if map.data[start] != value || labels.data[start].is_some() {
            continue;
        }
        let label = sizes.len();
        let mut size = 0;
        labels.data[start] = Some(label);
        stack.push(start);
        while let Some(i) = stack.pop() {
            size += 1;
            let (y, x) = (i / w, i % w);
            let mut visit = |j: usize| {
                if map.data[j] == value && labels.data[j].is_none() {
                    labels.data[j] = Some(label);
                    stack.push(j);
                }
            };
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

/// Sets every background component that does not touch the image border.
fn fill_holes(mask: &BinaryMap) -> BinaryMap {
    let (h, w) = mask.dims();
    let (labels, sizes) = components(mask, false);
    let mut touches = vec![false; sizes.len()];
    for y in 0..h {
        for x in 0..w {
            if y == 0 || x == 0 || y + 1 == h || x + 1 == w {
                if let Some(l) = labels.get(y, x) {
                    touches[l] = true;
                }
            }
        }
    }
    Map::from_fn(h, w, |y, x| match labels.get(y, x) {
        Some(l) => !touches[l],
        None => true,
    })
}
