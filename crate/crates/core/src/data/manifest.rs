//! Scene-set manifests: one `image labels seed` row per scene, paths
//! relative to the manifest's directory.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::sampler::Scene;
use crate::data::synth::{split_seed, synth_generate, SynthSpec};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub image: String,
    pub labels: String,
    pub seed: u64,
}

pub fn manifest_path(dir: &Path, split: &str) -> std::path::PathBuf {
    dir.join(format!("{split}.manifest"))
}

/// Generates `count` scenes of split number `split` into `dir` and writes
/// the manifest. Returns the rows written.
pub fn write_split(dir: &Path, spec: &SynthSpec, base: u64, split: usize, name: &str, count: usize) -> Result<Vec<ManifestRow>> {
    fs::create_dir_all(dir.join("scenes"))?;
    let mut text = format!("# split={name} count={count}\n");
    let mut rows = Vec::with_capacity(count);
    for i in 0..count {
        let seed = split_seed(base, split, i);
        let scene = synth_generate(spec, seed)?.scene;
        let row = ManifestRow {
            image: format!("scenes/{name}_{i:04}.ppm"),
            labels: format!("scenes/{name}_{i:04}.pgm"),
            seed,
        };
        scene.save(&dir.join(&row.image), &dir.join(&row.labels))?;
        writeln!(text, "{} {} {}", row.image, row.labels, row.seed).unwrap();
        rows.push(row);
    }
    fs::write(manifest_path(dir, name), text)?;
    Ok(rows)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("manifest {}: {e}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|l| {
            let f: Vec<&str> = l.split_whitespace().collect();
            let bad = || Error::Format(format!("manifest row {l:?}"));
            let [image, labels, seed] = f[..] else { return Err(bad()) };
            Ok(ManifestRow {
                image: image.to_string(),
                labels: labels.to_string(),
                seed: seed.parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Loads every scene listed in a split's manifest under `dir`.
pub fn load_split(dir: &Path, split: &str) -> Result<Vec<Scene>> {
    read_manifest(&manifest_path(dir, split))?
        .iter()
        .map(|r| Scene::load(&dir.join(&r.image), &dir.join(&r.labels)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec { size: 128, beacon_spacing: 128, beacon_offset: 64, beacon_half: 16, margin: 32, ..Default::default() };
        let rows = write_split(dir.path(), &spec, 3, 1, "val", 2).unwrap();
        assert_eq!(read_manifest(&manifest_path(dir.path(), "val")).unwrap(), rows);
        let scenes = load_split(dir.path(), "val").unwrap();
        assert_eq!(scenes.len(), 2);
        let direct = synth_generate(&spec, rows[1].seed).unwrap().scene;
        assert_eq!(scenes[1].image, direct.image);
        assert_eq!(scenes[1].labels, direct.labels);
    }

    #[test]
    fn malformed_rows_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.manifest");
        fs::write(&p, "a.ppm b.pgm\n").unwrap();
        assert!(read_manifest(&p).is_err());
        assert!(read_manifest(&dir.path().join("none")).is_err());
    }
}
