use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{BinaryMap, Map, ProbMap};

fn write_gray8(path: &Path, height: usize, width: usize, pixels: &[u8], meta: &[(&str, &str)]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let as_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    for (key, value) in meta {
        encoder
            .add_text_chunk((*key).to_string(), (*value).to_string())
            .map_err(as_io)?;
    }
    let mut writer = encoder.write_header().map_err(as_io)?;
    writer.write_image_data(pixels).map_err(as_io)?;
    writer.finish().map_err(as_io)
}

/// Writes `p ∈ [0, 1]` as 8-bit grayscale, `round(255 p)`. `meta` entries
/// become PNG text chunks.
pub fn save_probability_map(map: &ProbMap, path: &Path, meta: &[(&str, &str)]) -> Result<()> {
    let pixels: Vec<u8> = map
        .data
        .iter()
        .map(|&p| (255.0 * p.clamp(0.0, 1.0)).round() as u8)
        .collect();
    write_gray8(path, map.height, map.width, &pixels, meta)
}

/// Writes a binary map as 0/255 grayscale.
pub fn save_binary_map(map: &BinaryMap, path: &Path, meta: &[(&str, &str)]) -> Result<()> {
    let pixels: Vec<u8> = map.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
    write_gray8(path, map.height, map.width, &pixels, meta)
}

/// Reads an 8-bit map back as `v / 255`.
pub fn load_probability_map(path: &Path) -> Result<ProbMap> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let luma = img.to_luma8();
    Map::from_vec(
        luma.height() as usize,
        luma.width() as usize,
        luma.as_raw().iter().map(|&v| v as f64 / 255.0).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn round_trip(map: &ProbMap) -> ProbMap {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.png");
        save_probability_map(map, &path, &[("config", "k=v")]).unwrap();
        load_probability_map(&path).unwrap()
    }

    #[test]
    fn extremes_and_midpoint() {
        let zeros = Map::filled(3, 4, 0.0);
        assert_eq!(round_trip(&zeros), zeros);
        let ones = Map::filled(3, 4, 1.0);
        assert_eq!(round_trip(&ones), ones);
        let half = round_trip(&Map::filled(2, 2, 0.5));
        assert!(half.data.iter().all(|&v| v == 128.0 / 255.0));
        assert!((half.data[0] - 0.50196).abs() < 1e-5);
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let err = save_probability_map(&Map::filled(1, 1, 0.0), Path::new("/nonexistent/dir/p.png"), &[])
            .unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn quantization_error_bounded(values in proptest::collection::vec(0.0f64..=1.0, 12)) {
            let map = Map::from_vec(3, 4, values).unwrap();
            let back = round_trip(&map);
            for (a, b) in map.data.iter().zip(&back.data) {
                prop_assert!((a - b).abs() <= 1.0 / 510.0 + 1e-15);
            }
        }
    }
}
