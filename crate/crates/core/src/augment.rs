//! Geometric training-set augmentation with fixed, per-dataset plans.
//!
//! Images are resampled bilinearly; truth and FOV masks use nearest
//! neighbour so they stay binary. Output frames keep the input size, with
//! anything mapped from outside the source frame set to zero.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, FundusSample};
use crate::error::{Error, Result};
use crate::tensor::{BinaryMap, Map, Tensor};

/// Version stamp of the plan composition below.
pub const PLAN_VERSION: &str = "v1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Primitive {
    FlipH,
    FlipV,
    /// Clockwise rotation about the image centre, degrees in `(0, 360)`.
    Rotate(f64),
    /// Zoom about the image centre; `> 1` enlarges.
    Scale(f64),
}

impl Primitive {
    fn kind(&self) -> &'static str {
        match self {
            Primitive::FlipH => "flip_h",
            Primitive::FlipV => "flip_v",
            Primitive::Rotate(_) => "rotate",
            Primitive::Scale(_) => "scale",
        }
    }
}

/// A transform: primitives applied left to right. Empty means identity.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TransformSpec {
    pub steps: Vec<Primitive>,
}

impl TransformSpec {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn rotate(deg: f64) -> Self {
        Self {
            steps: vec![Primitive::Rotate(deg)],
        }
    }

    pub fn flip_h() -> Self {
        Self {
            steps: vec![Primitive::FlipH],
        }
    }

    pub fn flip_v() -> Self {
        Self {
            steps: vec![Primitive::FlipV],
        }
    }

    pub fn scale(factor: f64) -> Self {
        Self {
            steps: vec![Primitive::Scale(factor)],
        }
    }

    /// `self` followed by `next`.
    pub fn then(mut self, next: TransformSpec) -> Self {
        self.steps.extend(next.steps);
        self
    }

    pub fn is_identity(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn kind(&self) -> String {
        if self.steps.is_empty() {
            "identity".into()
        } else {
            self.steps.iter().map(Primitive::kind).collect::<Vec<_>>().join("+")
        }
    }

    pub fn angle(&self) -> Option<f64> {
        self.steps.iter().find_map(|p| match p {
            Primitive::Rotate(a) => Some(*a),
            _ => None,
        })
    }

    pub fn factor(&self) -> Option<f64> {
        self.steps.iter().find_map(|p| match p {
            Primitive::Scale(f) => Some(*f),
            _ => None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        for p in &self.steps {
            match *p {
                Primitive::Rotate(a) if !(a > 0.0 && a < 360.0) => {
                    return Err(Error::Config(format!("rotation angle {a} outside (0, 360)")))
                }
                Primitive::Scale(f) if !(f > 0.0 && f.is_finite()) => {
                    return Err(Error::Config(format!("scale factor {f} must be positive")))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

impl fmt::Display for TransformSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.steps.is_empty() {
            return f.write_str("identity");
        }
        for (i, p) in self.steps.iter().enumerate() {
            if i > 0 {
                f.write_str("+")?;
            }
            match p {
                Primitive::Rotate(a) => write!(f, "rotate({a})")?,
                Primitive::Scale(s) => write!(f, "scale({s})")?,
                other => f.write_str(other.kind())?,
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentPlan {
    pub dataset: Dataset,
    pub version: String,
    pub transforms: Vec<TransformSpec>,
}

impl AugmentPlan {
    pub fn len(&self) -> usize {
        self.transforms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transforms.is_empty()
    }

    /// Plan containing only the identity.
    pub fn identity(dataset: Dataset) -> Self {
        Self {
            dataset,
            version: PLAN_VERSION.into(),
            transforms: vec![TransformSpec::identity()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let identities = self.transforms.iter().filter(|t| t.is_identity()).count();
        if identities != 1 {
            return Err(Error::Config(format!(
                "plan must contain exactly one identity, found {identities}"
            )));
        }
        self.transforms.iter().try_for_each(TransformSpec::validate)
    }

    /// CSV listing (`index,kind,angle,factor`).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,kind,angle,factor\n");
        for (i, t) in self.transforms.iter().enumerate() {
            let angle = t.angle().map(|a| a.to_string()).unwrap_or_default();
            let factor = t.factor().map(|f| f.to_string()).unwrap_or_default();
            out.push_str(&format!("{i},{},{angle},{factor}\n", t.kind()));
        }
        out
    }
}

fn core_plan() -> Vec<TransformSpec> {
    use TransformSpec as T;
    vec![
        T::identity(),
        T::rotate(90.0),
        T::rotate(180.0),
        T::rotate(270.0),
        T::flip_h(),
        T::flip_v(),
        T::scale(0.8),
        T::scale(1.2),
        T::flip_h().then(T::rotate(90.0)),
        T::flip_h().then(T::rotate(270.0)),
        T::flip_h().then(T::rotate(45.0)),
        T::flip_h().then(T::rotate(135.0)),
    ]
}

/// The fixed augmentation plan for `dataset`.
///
/// * DRIVE (13): identity, rotations 90/180/270, both flips, scales
///   0.8/1.2, and five flip-then-rotate pairs (90, 270, 45, 135, 225).
/// * CHASE_DB1 (16): the first twelve DRIVE transforms plus rotations by
///   45, 135, 225 and 315 degrees.
/// * STARE (40): identity and rotations every 18 degrees, each also
///   composed with a horizontal flip.
/// * SYNTHETIC (8): the eight symmetries of the square.
pub fn default_plan(dataset: Dataset) -> Result<AugmentPlan> {
    use TransformSpec as T;
    let transforms = match dataset {
        Dataset::Drive => {
            let mut t = core_plan();
            t.push(T::flip_h().then(T::rotate(225.0)));
            t
        }
        Dataset::ChaseDb1 => {
            let mut t = core_plan();
            t.extend([45.0, 135.0, 225.0, 315.0].map(T::rotate));
            t
        }
        Dataset::Stare => {
            let rotations: Vec<T> = (0..20)
                .map(|k| if k == 0 { T::identity() } else { T::rotate(18.0 * k as f64) })
                .collect();
            let flipped: Vec<T> = rotations.iter().map(|r| T::flip_h().then(r.clone())).collect();
            rotations.into_iter().chain(flipped).collect()
        }
        Dataset::Synthetic => vec![
            T::identity(),
            T::rotate(90.0),
            T::rotate(180.0),
            T::rotate(270.0),
            T::flip_h(),
            T::flip_v(),
            T::flip_h().then(T::rotate(90.0)),
            T::flip_h().then(T::rotate(270.0)),
        ],
    };
    Ok(AugmentPlan {
        dataset,
        version: PLAN_VERSION.into(),
        transforms,
    })
}

fn flip_tensor(t: &Tensor, horizontal: bool) -> Tensor {
    Tensor::from_fn(t.channels, t.height, t.width, |c, y, x| {
        if horizontal {
            t.get(c, y, t.width - 1 - x)
        } else {
            t.get(c, t.height - 1 - y, x)
        }
    })
}

fn flip_map(m: &BinaryMap, horizontal: bool) -> BinaryMap {
    Map::from_fn(m.height, m.width, |y, x| {
        if horizontal {
            m.get(y, m.width - 1 - x)
        } else {
            m.get(m.height - 1 - y, x)
        }
    })
}

/// Cosine and sine with exact values at multiples of 90 degrees.
fn exact_trig(deg: f64) -> (f64, f64) {
    let r = deg.rem_euclid(360.0);
    match r {
        r if r == 0.0 => (1.0, 0.0),
        r if r == 90.0 => (0.0, 1.0),
        r if r == 180.0 => (-1.0, 0.0),
        r if r == 270.0 => (0.0, -1.0),
        _ => {
            let rad = r.to_radians();
            (rad.cos(), rad.sin())
        }
    }
}

/// Resamples every plane through `source(y, x) -> (sy, sx)`.
fn warp(sample: &FundusSample, source: impl Fn(f64, f64) -> (f64, f64)) -> FundusSample {
    let (h, w) = (sample.height(), sample.width());
    let coords: Vec<(f64, f64)> = (0..h * w)
        .map(|i| source((i / w) as f64, (i % w) as f64))
        .collect();

    let img = &sample.image;
    let fetch = |c: usize, y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            img.get(c, y as usize, x as usize)
        }
    };
    let mut image = Tensor::zeros(img.channels, h, w);
    for c in 0..img.channels {
        for (i, &(sy, sx)) in coords.iter().enumerate() {
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = (sy - y0, sx - x0);
            let (y0, x0) = (y0 as isize, x0 as isize);
            let v = fetch(c, y0, x0) * (1.0 - fy) * (1.0 - fx)
                + fetch(c, y0, x0 + 1) * (1.0 - fy) * fx
                + fetch(c, y0 + 1, x0) * fy * (1.0 - fx)
                + fetch(c, y0 + 1, x0 + 1) * fy * fx;
            image.data[c * h * w + i] = v.clamp(0.0, 1.0);
        }
    }

    let nearest = |m: &BinaryMap| -> BinaryMap {
        Map::from_vec(
            h,
            w,
            coords
                .iter()
                .map(|&(sy, sx)| {
                    let (y, x) = ((sy + 0.5).floor(), (sx + 0.5).floor());
                    y >= 0.0 && x >= 0.0 && (y as usize) < h && (x as usize) < w && m.get(y as usize, x as usize)
                })
                .collect(),
        )
        .expect("warp preserves size")
    };

    FundusSample {
        id: sample.id.clone(),
        image,
        truth: nearest(&sample.truth),
        fov: nearest(&sample.fov),
        source: sample.source,
    }
}

fn apply_primitive(sample: &FundusSample, p: Primitive) -> FundusSample {
    let (h, w) = (sample.height(), sample.width());
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    match p {
        Primitive::FlipH | Primitive::FlipV => {
            let horizontal = p == Primitive::FlipH;
            FundusSample {
                id: sample.id.clone(),
                image: flip_tensor(&sample.image, horizontal),
                truth: flip_map(&sample.truth, horizontal),
                fov: flip_map(&sample.fov, horizontal),
                source: sample.source,
            }
        }
        Primitive::Rotate(deg) => {
            let (cos, sin) = exact_trig(deg);
            warp(sample, |y, x| {
                let (dy, dx) = (y - cy, x - cx);
                (cy + dy * cos - dx * sin, cx + dy * sin + dx * cos)
            })
        }
        Primitive::Scale(f) => warp(sample, |y, x| (cy + (y - cy) / f, cx + (x - cx) / f)),
    }
}

/// Applies `t` to image, truth and FOV with the same geometric map.
pub fn apply_transform(sample: &FundusSample, t: &TransformSpec) -> FundusSample {
    t.steps
        .iter()
        .fold(sample.clone(), |s, &p| apply_primitive(&s, p))
}

/// Expands `split` by `plan`: sample-major, transform-minor, ids suffixed
/// with `_t<index>`.
pub fn augment_set(split: &[FundusSample], plan: &AugmentPlan) -> Result<Vec<FundusSample>> {
    plan.validate()?;
    let n = plan.len();
    Ok((0..split.len() * n)
        .into_par_iter()
        .map(|k| {
            let (s, t) = (k / n, k % n);
            let mut out = apply_transform(&split[s], &plan.transforms[t]);
            out.id = format!("{}_t{:02}", split[s].id, t);
            out
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(h: usize, w: usize, vessels: &[(usize, usize)]) -> FundusSample {
        let mut truth = Map::filled(h, w, false);
        for &(y, x) in vessels {
            truth.set(y, x, true);
        }
        FundusSample {
            id: "s".into(),
            image: Tensor::from_fn(3, h, w, |c, y, x| ((c + 2 * y + 3 * x) % 17) as f64 / 16.0),
            truth,
            fov: Map::filled(h, w, true),
            source: Dataset::Synthetic,
        }
    }

    #[test]
    fn plan_lengths() {
        assert_eq!(default_plan(Dataset::Drive).unwrap().len(), 13);
        assert_eq!(default_plan(Dataset::Stare).unwrap().len(), 40);
        assert_eq!(default_plan(Dataset::ChaseDb1).unwrap().len(), 16);
        for d in Dataset::ALL {
            default_plan(d).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn plans_have_no_duplicates() {
        for d in Dataset::ALL {
            let plan = default_plan(d).unwrap();
            for (i, a) in plan.transforms.iter().enumerate() {
                for b in &plan.transforms[i + 1..] {
                    assert_ne!(a, b, "{d}: duplicate {a}");
                }
            }
        }
    }

    #[test]
    fn identity_is_bitwise() {
        let s = sample(9, 7, &[(2, 3)]);
        assert_eq!(apply_transform(&s, &TransformSpec::identity()), s);
    }

    #[test]
    fn double_flip_is_identity() {
        let s = sample(9, 7, &[(2, 3), (8, 0)]);
        let twice = TransformSpec::flip_h().then(TransformSpec::flip_h());
        assert_eq!(apply_transform(&s, &twice), s);
    }

    #[test]
    fn rotate_90_index_arithmetic() {
        let side = 11;
        for &(r, c) in &[(0, 0), (2, 7), (10, 3), (5, 5)] {
            let s = sample(side, side, &[(r, c)]);
            let out = apply_transform(&s, &TransformSpec::rotate(90.0));
            let hits: Vec<_> = (0..side * side).filter(|&i| out.truth.data[i]).collect();
            assert_eq!(hits, vec![c * side + (side - 1 - r)]);
            assert_eq!(out.image.get(1, c, side - 1 - r), s.image.get(1, r, c));
        }
    }

    #[test]
    fn right_angle_rotations_preserve_vessel_count() {
        let s = sample(12, 12, &[(1, 2), (3, 9), (11, 11), (6, 0)]);
        for deg in [90.0, 180.0, 270.0] {
            let out = apply_transform(&s, &TransformSpec::rotate(deg));
            assert_eq!(out.truth.count_ones(), 4);
            assert_eq!(out.fov.count_ones(), 144);
        }
    }

    #[test]
    fn oblique_rotation_blanks_corners() {
        let s = sample(16, 16, &[]);
        let out = apply_transform(&s, &TransformSpec::rotate(45.0));
        assert!(!out.fov.get(0, 0));
        assert_eq!(out.image.get(0, 0, 0), 0.0);
        assert!(out.fov.get(8, 8));
    }

    #[test]
    fn augment_set_order_and_ids() {
        let a = FundusSample { id: "a".into(), ..sample(6, 6, &[]) };
        let b = FundusSample { id: "b".into(), ..sample(6, 6, &[]) };
        let plan = default_plan(Dataset::Drive).unwrap();
        let out = augment_set(&[a, b], &plan).unwrap();
        assert_eq!(out.len(), 26);
        assert_eq!(out[0].id, "a_t00");
        assert_eq!(out[12].id, "a_t12");
        assert_eq!(out[13].id, "b_t00");
        assert!(augment_set(&[], &plan).unwrap().is_empty());
    }

    #[test]
    fn plan_csv_dump() {
        let csv = default_plan(Dataset::Drive).unwrap().to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines.len(), 14);
        assert_eq!(lines[0], "index,kind,angle,factor");
        assert_eq!(lines[1], "0,identity,,");
        assert_eq!(lines[9], "8,flip_h+rotate,90,");
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(TransformSpec::rotate(0.0).validate().is_err());
        assert!(TransformSpec::rotate(360.0).validate().is_err());
        assert!(TransformSpec::scale(0.0).validate().is_err());
        let mut plan = default_plan(Dataset::Drive).unwrap();
        plan.transforms.push(TransformSpec::identity());
        assert!(plan.validate().is_err());
    }
}
