//! Synthetic face corpora for the mock world: band-structured faces plus
//! per-part annotation masks laid out like a real mask-annotation set.

use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backends::mock::{band_of_row, SyntheticFace};
use crate::dataset::{write_corpus, CorpusEntry, DatasetError};
use crate::imaging::{self, RegionMask};
use crate::instructions::{AttributeKind, Lexicon};

pub const CORPUS_FILE: &str = "corpus.jsonl";

fn default_widths() -> Vec<u32> {
    vec![512]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_faces: usize,
    /// Each face is square with a side drawn from this list.
    #[serde(default = "default_widths")]
    pub widths: Vec<u32>,
    #[serde(default)]
    pub seed: u64,
    /// Probability that a face gets one corrupted band.
    #[serde(default)]
    pub corrupted_fraction: f64,
}

impl CorpusSpec {
    pub fn new(n_faces: usize, seed: u64) -> Self {
        Self {
            n_faces,
            widths: default_widths(),
            seed,
            corrupted_fraction: 0.0,
        }
    }
}

/// Rows of the band belonging to `kind`.
pub fn band_mask(width: u32, height: u32, kind: AttributeKind) -> Result<RegionMask, imaging::ImagingError> {
    Ok(RegionMask::from_fn(width, height, |_, y| band_of_row(y, height) == kind.index())?.with_attribute(kind))
}

/// Annotation parts of a synthetic face. The eye band is split into left
/// and right halves; the expression band doubles as a "mouth" part that
/// no attribute uses.
pub fn part_masks(width: u32, height: u32) -> Result<Vec<(&'static str, RegionMask)>, imaging::ImagingError> {
    use AttributeKind::*;
    let eyes = |y: u32| band_of_row(y, height) == Eyes.index();
    let half = width / 2;
    Ok(vec![
        ("hair", band_mask(width, height, Hair)?),
        ("skin", band_mask(width, height, Skin)?),
        ("l_eye", RegionMask::from_fn(width, height, |x, y| x < half && eyes(y))?),
        (
            "r_eye",
            RegionMask::from_fn(width, height, |x, y| x >= half && eyes(y))?,
        ),
        ("eye_g", band_mask(width, height, Glasses)?),
        ("beard", band_mask(width, height, Beard)?),
        ("mouth", band_mask(width, height, Expression)?),
    ])
}

/// Writes `images/`, `annotations/` and `corpus.jsonl` under `out_dir`.
pub fn generate_corpus(spec: &CorpusSpec, out_dir: &Path) -> Result<Vec<CorpusEntry>, DatasetError> {
    if spec.widths.is_empty() || spec.widths.iter().any(|&w| w < crate::backends::mock::MIN_FACE_HEIGHT) {
        return Err(DatasetError::Plan("widths must be non-empty and at least 18".into()));
    }
    let images = out_dir.join("images");
    let annotations = out_dir.join("annotations");
    for dir in [&images, &annotations] {
        fs::create_dir_all(dir).map_err(|source| DatasetError::Io {
            path: dir.clone(),
            source,
        })?;
    }
    let lex = Lexicon::default_ref();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut entries = Vec::with_capacity(spec.n_faces);
    for i in 0..spec.n_faces {
        let face_id = format!("synth_{i:05}");
        let side = *spec.widths.choose(&mut rng).expect("widths checked non-empty");
        let states: Vec<(AttributeKind, &str)> = AttributeKind::ALL
            .iter()
            .map(|&k| {
                (
                    k,
                    lex.changes(k)
                        .choose(&mut rng)
                        .expect("every kind has changes")
                        .as_str(),
                )
            })
            .collect();
        let mut face = SyntheticFace::new(side, side, &states)?;
        if rng.random_bool(spec.corrupted_fraction.clamp(0.0, 1.0)) {
            face.corrupt(AttributeKind::ALL[rng.random_range(0..AttributeKind::ALL.len())]);
        }
        let image_path = images.join(format!("{face_id}.png"));
        imaging::save_png(&face.render(), &image_path)?;
        for (part, mask) in part_masks(side, side)? {
            imaging::save_mask(&mask, annotations.join(format!("{face_id}_{part}.png")))?;
        }
        entries.push(CorpusEntry {
            face_id,
            image_path,
            annotation_dir: annotations.clone(),
        });
    }
    write_corpus(&out_dir.join(CORPUS_FILE), &entries)?;
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ingest_masks, read_corpus};

    #[test]
    fn corpus_is_deterministic_and_round_trips() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let mut spec = CorpusSpec::new(4, 9);
        spec.widths = vec![64, 128];
        generate_corpus(&spec, a.path()).unwrap();
        generate_corpus(&spec, b.path()).unwrap();
        for i in 0..4 {
            let name = format!("images/synth_{i:05}.png");
            assert_eq!(
                fs::read(a.path().join(&name)).unwrap(),
                fs::read(b.path().join(&name)).unwrap()
            );
        }
        let corpus = read_corpus(&a.path().join(CORPUS_FILE)).unwrap();
        assert_eq!(corpus.len(), 4);
        assert!(corpus[0].image_path.starts_with(a.path()));
        let masks = ingest_masks(&corpus[0].annotation_dir).unwrap();
        assert_eq!(masks.len(), 4);
    }

    #[test]
    fn eye_halves_cover_the_band() {
        let parts = part_masks(20, 36).unwrap();
        let get = |name: &str| parts.iter().find(|(p, _)| *p == name).unwrap().1.clone();
        let both = imaging::union_masks(&[get("l_eye"), get("r_eye")]).unwrap();
        assert_eq!(both.bits(), band_mask(20, 36, AttributeKind::Eyes).unwrap().bits());
        assert_eq!(get("l_eye").count_selected(), 10 * 4);
    }
}
