use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{build_composite, Manifest, ManifestRecord, Split};
use crate::error::{invalid, Error, Result};
use crate::imaging::{load_mask_png, save_mask_png, ImageTensor};

/// Options for [`build_manifest`].
#[derive(Debug, Clone)]
pub struct BuildOptions {
    pub seed: u64,
    /// Fraction of accepted records tagged as test.
    pub test_fraction: f64,
    /// Also write each built composite, background and mask under
    /// `out/composites/`.
    pub write_previews: bool,
}

/// Outcome of [`build_manifest`].
#[derive(Debug, Clone)]
pub struct BuildSummary {
    pub manifest_path: PathBuf,
    pub accepted: usize,
    pub rejected: Vec<(PathBuf, String)>,
}

fn sorted_pngs(dir: &Path, keep: impl Fn(&str) -> bool) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if name.ends_with(".png") && keep(name) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn relative_to(path: &Path, base: &Path) -> PathBuf {
    let abs = |p: &Path| p.canonicalize().unwrap_or_else(|_| p.to_path_buf());
    let (p, b) = (abs(path), abs(base));
    p.strip_prefix(&b).map(Path::to_path_buf).unwrap_or(p)
}

/// Pairs every photo `X.png` (with instance mask `X.mask.png`) in `photos`
/// with a seeded random painting, keeps the pairs that build a valid
/// composite, and writes `manifest.jsonl` into `out`.
pub fn build_manifest(photos: &Path, paintings: &Path, out: &Path, opts: &BuildOptions) -> Result<BuildSummary> {
    let photo_files = sorted_pngs(photos, |n| !n.ends_with(".mask.png"))?;
    let painting_files = sorted_pngs(paintings, |_| true)?;
    if photo_files.is_empty() {
        return Err(invalid!("no photos found in {}", photos.display()));
    }
    if painting_files.is_empty() {
        return Err(invalid!("no paintings found in {}", paintings.display()));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let previews = out.join("composites");
    if opts.write_previews {
        fs::create_dir_all(&previews).map_err(|e| Error::io(&previews, e))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut records = Vec::new();
    let mut rejected = Vec::new();
    for photo_path in &photo_files {
        let mask_path = photo_path.with_extension("mask.png");
        let painting_path = &painting_files[rng.random_range(0..painting_files.len())];
        let seed: u64 = rng.random();
        let is_test = rng.random_bool(opts.test_fraction.clamp(0.0, 1.0));
        let built = (|| {
            let photo = ImageTensor::load_png(photo_path)?;
            let mask = load_mask_png(&mask_path)?;
            let painting = ImageTensor::load_png(painting_path)?;
            build_composite(&photo, &mask, &painting, seed)
        })();
        match built {
            Ok(sample) => {
                if opts.write_previews {
                    let stem = photo_path.file_stem().and_then(|s| s.to_str()).unwrap_or("sample");
                    sample.composite.save_png(previews.join(format!("{stem}.composite.png")))?;
                    sample.background.save_png(previews.join(format!("{stem}.background.png")))?;
                    save_mask_png(&sample.mask, previews.join(format!("{stem}.mask.png")))?;
                }
                records.push(ManifestRecord {
                    photo: relative_to(photo_path, out),
                    mask: relative_to(&mask_path, out),
                    painting: relative_to(painting_path, out),
                    split: if is_test { Split::Test } else { Split::Train },
                    seed,
                });
            }
            Err(e) => {
                log::warn!("{}: {e}", photo_path.display());
                rejected.push((photo_path.clone(), e.to_string()));
            }
        }
    }
    let manifest_path = out.join("manifest.jsonl");
    let accepted = records.len();
    Manifest::new(out, records).save(&manifest_path)?;
    Ok(BuildSummary {
        manifest_path,
        accepted,
        rejected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth, Dataset, EpochSampler};

    #[test]
    fn synthetic_corpus_builds_a_loadable_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let layout = synth::write_corpus(dir.path(), 6, 2, 64, 5).unwrap();
        let opts = BuildOptions {
            seed: 1,
            test_fraction: 0.0,
            write_previews: true,
        };
        let summary = build_manifest(&layout.photos, &layout.paintings, dir.path(), &opts).unwrap();
        assert_eq!(summary.accepted, 6, "{:?}", summary.rejected);
        let manifest = Manifest::load(&summary.manifest_path).unwrap();
        assert!(manifest.records[0].photo.is_relative());
        let mut ds = Dataset::new(manifest, 32).unwrap();
        let mut sampler = EpochSampler::new(ds.len(), 0);
        let batch = ds.next_batch(&mut sampler, 4).unwrap();
        assert_eq!(batch.composite.shape(), &[4, 3, 32, 32]);
        assert!(batch.mask.iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn unreadable_records_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let layout = synth::write_corpus(dir.path(), 2, 1, 32, 2).unwrap();
        let opts = BuildOptions {
            seed: 0,
            test_fraction: 0.0,
            write_previews: false,
        };
        let summary = build_manifest(&layout.photos, &layout.paintings, dir.path(), &opts).unwrap();
        let mut manifest = Manifest::load(&summary.manifest_path).unwrap();
        manifest.records[0].photo = "missing.png".into();
        let mut ds = Dataset::new(manifest.clone(), 32).unwrap();
        let mut sampler = EpochSampler::new(ds.len(), 0);
        for _ in 0..3 {
            assert_eq!(ds.next_batch(&mut sampler, 2).unwrap().len(), 1);
        }
        manifest.records[1].photo = "missing.png".into();
        let mut ds = Dataset::new(manifest, 32).unwrap();
        assert!(ds.next_batch(&mut sampler, 2).is_err());
    }
}
