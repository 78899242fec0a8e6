//! Final vessel maps: image-level prediction, the 9-patch pipeline and
//! binarisation.

use rayon::prelude::*;

use crate::dataio::FundusSample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, ModelGraph, Params};
use crate::resample::{downsample2, upsample2, upsample2_nearest};
use crate::tensor::{BinaryMap, Map, ProbMap, Tensor};

/// Anything that maps an image to a same-sized probability map.
pub trait Predictor: Sync {
    fn predict(&self, image: &Tensor) -> Result<ProbMap>;
}

impl<F> Predictor for F
where
    F: Fn(&Tensor) -> Result<ProbMap> + Sync,
{
    fn predict(&self, image: &Tensor) -> Result<ProbMap> {
        self(image)
    }
}

/// Image-level or 9-patch prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Image,
    Patch,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Image => "image",
            Mode::Patch => "patch",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "image" => Ok(Mode::Image),
            "patch" => Ok(Mode::Patch),
            _ => Err(Error::Config(format!("unknown mode {s:?} (expected image or patch)"))),
        }
    }
}

/// Prediction in the given mode.
pub fn predict<P: Predictor + ?Sized>(predictor: &P, image: &Tensor, mode: Mode) -> Result<ProbMap> {
    match mode {
        Mode::Image => predictor.predict(image),
        Mode::Patch => predict_patchwise(predictor, image),
    }
}

/// A graph with its parameters.
#[derive(Clone, Copy)]
pub struct Network<'a> {
    pub graph: &'a ModelGraph,
    pub params: &'a Params,
}

impl Predictor for Network<'_> {
    fn predict(&self, image: &Tensor) -> Result<ProbMap> {
        predict_image(self.graph, self.params, image)
    }
}

/// The fused map, taken as the network's final output.
pub fn predict_image(graph: &ModelGraph, params: &Params, image: &Tensor) -> Result<ProbMap> {
    Ok(forward(graph, params, image)?.fuse_prob)
}

/// `p ≥ threshold`.
pub fn binarize(prob: &ProbMap, threshold: f64) -> BinaryMap {
    prob.map(|&p| p >= threshold)
}

/// 3×3 grid of half-size patches.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchLayout {
    pub image_size: (usize, usize),
    pub patch_size: (usize, usize),
    /// The nine `(row, col)` anchors, row-major.
    pub anchors: Vec<(usize, usize)>,
    pub scale_up: usize,
}

impl PatchLayout {
    pub fn row_anchors(&self) -> [usize; 3] {
        [self.anchors[0].0, self.anchors[3].0, self.anchors[6].0]
    }

    pub fn col_anchors(&self) -> [usize; 3] {
        [self.anchors[0].1, self.anchors[1].1, self.anchors[2].1]
    }

    /// Distinct anchors with their multiplicity, in first-seen order.
    pub fn tiles(&self) -> Vec<((usize, usize), usize)> {
        let mut out: Vec<((usize, usize), usize)> = Vec::new();
        for &a in &self.anchors {
            match out.iter_mut().find(|(b, _)| *b == a) {
                Some((_, n)) => *n += 1,
                None => out.push((a, 1)),
            }
        }
        out
    }

    /// Per-pixel sum of the normalised stitching weights.
    pub fn stitch_weight_sums(&self) -> Map<f64> {
        let (h, w) = self.image_size;
        let (ph, pw) = self.patch_size;
        let tiles = self.tiles();
        let mut count = Map::filled(h, w, 0usize);
        for &((r, c), n) in &tiles {
            for y in r..r + ph {
                for x in c..c + pw {
                    count.data[y * w + x] += n;
                }
            }
        }
        let mut sums = Map::filled(h, w, 0.0);
        for &((r, c), n) in &tiles {
            for y in r..r + ph {
                for x in c..c + pw {
                    let i = y * w + x;
                    sums.data[i] += n as f64 / count.data[i] as f64;
                }
            }
        }
        sums
    }
}

/// Patch size `(⌈H/2⌉, ⌈W/2⌉)`; anchors `{0, ⌊(H−h)/2⌋, H−h}` per axis.
pub fn make_layout(height: usize, width: usize) -> PatchLayout {
    let (ph, pw) = (height.div_ceil(2), width.div_ceil(2));
    let rows = [0, (height - ph) / 2, height - ph];
    let cols = [0, (width - pw) / 2, width - pw];
    let anchors = rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c))).collect();
    PatchLayout {
        image_size: (height, width),
        patch_size: (ph, pw),
        anchors,
        scale_up: 2,
    }
}

/// Predicts each patch at 2× scale, brings it back to patch size and
/// stitches by uniform averaging over covering patches.
pub fn predict_patchwise<P: Predictor + ?Sized>(predictor: &P, image: &Tensor) -> Result<ProbMap> {
    let layout = make_layout(image.height, image.width);
    let (ph, pw) = layout.patch_size;
    let tiles = layout.tiles();
    let predictions: Vec<ProbMap> = tiles
        .par_iter()
        .map(|&((r, c), _)| {
            let patch = image.crop(r, c, ph, pw);
            let pred = predictor.predict(&upsample2(&patch))?;
            let back = downsample2(&Tensor::from(pred), ph, pw);
            Ok(back.channel_map(0))
        })
        .collect::<Result<_>>()?;

    let (h, w) = (image.height, image.width);
    let mut mean = Map::filled(h, w, 0.0);
    let mut weight = Map::filled(h, w, 0usize);
    for (&((r, c), n), pred) in tiles.iter().zip(&predictions) {
        for y in 0..ph {
            for x in 0..pw {
                let i = (r + y) * w + c + x;
                weight.data[i] += n;
                // running weighted mean keeps constant inputs exact
                let v = pred.data[y * pw + x];
                mean.data[i] += (n as f64 / weight.data[i] as f64) * (v - mean.data[i]);
            }
        }
    }
    Ok(mean)
}

/// The 9-patch training view of a sample: each patch cropped and
/// upsampled 2× (bilinear image, nearest-neighbour labels).
pub fn patch_samples(sample: &FundusSample) -> Vec<FundusSample> {
    let layout = make_layout(sample.height(), sample.width());
    let (ph, pw) = layout.patch_size;
    layout
        .tiles()
        .into_iter()
        .enumerate()
        .map(|(k, ((r, c), _))| FundusSample {
            id: format!("{}_p{k}", sample.id),
            image: upsample2(&sample.image.crop(r, c, ph, pw)),
            truth: upsample2_nearest(&sample.truth.crop(r, c, ph, pw)),
            fov: upsample2_nearest(&sample.fov.crop(r, c, ph, pw)),
            source: sample.source,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binarize_conventions() {
        let p = Map::from_vec(1, 3, vec![0.0, 0.5, 1.0]).unwrap();
        assert_eq!(binarize(&p, 0.0).count_ones(), 3);
        assert_eq!(binarize(&p, 1.0).data, vec![false, false, true]);
        assert!(binarize(&Map::filled(2, 2, 0.5), 0.5).data.iter().all(|&b| b));
    }

    #[test]
    fn drive_layout() {
        let l = make_layout(584, 565);
        assert_eq!(l.patch_size, (292, 283));
        assert_eq!(l.row_anchors(), [0, 146, 292]);
        assert_eq!(l.col_anchors(), [0, 141, 282]);
        assert_eq!(l.anchors.len(), 9);
    }

    #[test]
    fn four_by_four_covers_everything() {
        let l = make_layout(4, 4);
        assert_eq!(l.patch_size, (2, 2));
        assert_eq!(l.row_anchors(), [0, 1, 2]);
        let mut covered = [[false; 4]; 4];
        for &(r, c) in &l.anchors {
            for y in r..r + 2 {
                for x in c..c + 2 {
                    covered[y][x] = true;
                }
            }
        }
        assert!(covered.iter().flatten().all(|&b| b));
    }

    #[test]
    fn tiny_layout_dedups() {
        let l = make_layout(2, 2);
        assert_eq!(l.patch_size, (1, 1));
        assert_eq!(l.row_anchors(), [0, 0, 1]);
        let tiles = l.tiles();
        assert_eq!(tiles.iter().map(|t| t.1).sum::<usize>(), 9);
        assert_eq!(tiles.len(), 4);
        for s in l.stitch_weight_sums().data {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_predictor_survives_stitching() {
        let img = Tensor::filled(3, 13, 10, 0.2);
        let constant = |im: &Tensor| -> Result<ProbMap> { Ok(Map::filled(im.height, im.width, 0.3)) };
        let out = predict_patchwise(&constant, &img).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.3));
    }

    #[test]
    fn patch_samples_are_double_size() {
        let s = FundusSample {
            id: "x".into(),
            image: Tensor::filled(1, 10, 7, 0.5),
            truth: Map::filled(10, 7, false),
            fov: Map::filled(10, 7, true),
            source: crate::dataio::Dataset::Synthetic,
        };
        let patches = patch_samples(&s);
        assert_eq!(patches.len(), 9);
        assert_eq!((patches[0].height(), patches[0].width()), (10, 8));
        patches.iter().for_each(|p| p.validate().unwrap());
    }
}
