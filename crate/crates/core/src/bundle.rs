//! On-disk stego bundles: `NNNN.mid` files plus `manifest.json`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codec::StegoBundle;
use crate::midi::{self, MelodySequence, MidiError, QuantizationConfig};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BUNDLE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Midi { path: PathBuf, source: MidiError },
    #[error("bad manifest: {0}")]
    Manifest(String),
    #[error("invalid bundle: {0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BundleError + '_ {
    move |source| BundleError::Io { path: path.to_path_buf(), source }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub events: usize,
    pub embedded_bits: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub cps: usize,
    pub max_events_per_melody: usize,
    pub steps_per_quarter: u32,
    pub tempo_bpm: f64,
    pub program: u8,
    pub model_sha256: String,
    pub melodies: Vec<ManifestEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOptions {
    pub tempo_bpm: f64,
    pub program: u8,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self { tempo_bpm: midi::DEFAULT_TEMPO_BPM, program: midi::DEFAULT_PROGRAM }
    }
}

/// Lowercase hex SHA-256 of a model file.
pub fn model_digest(model_bytes: &[u8]) -> String {
    Sha256::digest(model_bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn melody_file_name(index: usize) -> String {
    format!("{index:04}.mid")
}

/// Builds a directory in a sibling staging location and renames it into
/// place only if `fill` succeeds. An existing directory at `out` is replaced.
pub fn write_dir_atomically<E>(
    out: &Path,
    fill: impl FnOnce(&Path) -> Result<(), E>,
) -> Result<(), E>
where
    E: From<BundleError>,
{
    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(io_err(&parent)).map_err(E::from)?;
    if out.exists() && !out.is_dir() {
        return Err(E::from(BundleError::Invalid(format!("{} exists and is not a directory", out.display()))));
    }
    let staging = tempfile::Builder::new()
        .prefix(".staging-")
        .tempdir_in(&parent)
        .map_err(io_err(&parent))
        .map_err(E::from)?;
    fill(staging.path())?;
    if out.exists() {
        fs::remove_dir_all(out).map_err(io_err(out)).map_err(E::from)?;
    }
    let staged = staging.keep();
    fs::rename(&staged, out).map_err(io_err(out)).map_err(E::from)?;
    Ok(())
}

/// Writes a file through a temporary sibling and an atomic rename.
pub fn write_file_atomically(out: &Path, bytes: &[u8]) -> Result<(), BundleError> {
    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(io_err(&parent))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&parent).map_err(io_err(&parent))?;
    tmp.write_all(bytes).map_err(io_err(out))?;
    tmp.persist(out).map_err(|e| BundleError::Io { path: out.to_path_buf(), source: e.error })?;
    Ok(())
}

pub fn write_bundle(
    out: &Path,
    bundle: &StegoBundle,
    model_sha256: &str,
    render: RenderOptions,
) -> Result<Manifest, BundleError> {
    let steps_per_quarter = bundle.melodies.first().map_or(4, MelodySequence::steps_per_quarter);
    let mut manifest = Manifest {
        format_version: BUNDLE_FORMAT_VERSION,
        cps: bundle.cps,
        max_events_per_melody: bundle.max_events_per_melody,
        steps_per_quarter,
        tempo_bpm: render.tempo_bpm,
        program: render.program,
        model_sha256: model_sha256.to_string(),
        melodies: Vec::new(),
    };
    write_dir_atomically(out, |dir| {
        for (i, (melody, stats)) in bundle.melodies.iter().zip(&bundle.stats).enumerate() {
            let name = melody_file_name(i);
            let path = dir.join(&name);
            fs::write(&path, midi::render_midi(melody, render.tempo_bpm, render.program))
                .map_err(io_err(&path))?;
            manifest.melodies.push(ManifestEntry {
                file: name,
                events: melody.len(),
                embedded_bits: stats.embedded_bits,
            });
        }
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| BundleError::Manifest(e.to_string()))?;
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, text + "\n").map_err(io_err(&path))
    })?;
    Ok(manifest)
}

#[derive(Clone, Debug)]
pub struct LoadedMelody {
    pub path: PathBuf,
    pub melody: MelodySequence,
    pub file_bytes: usize,
}

#[derive(Clone, Debug)]
pub struct LoadedBundle {
    pub melodies: Vec<LoadedMelody>,
    pub manifest: Option<Manifest>,
}

impl LoadedBundle {
    pub fn sequences(&self) -> Vec<MelodySequence> {
        self.melodies.iter().map(|m| m.melody.clone()).collect()
    }
}

pub fn read_manifest(dir: &Path) -> Result<Option<Manifest>, BundleError> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| BundleError::Manifest(e.to_string()))?;
    if manifest.format_version != BUNDLE_FORMAT_VERSION {
        return Err(BundleError::Manifest(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    Ok(Some(manifest))
}

/// Reads exactly one melody from a MIDI file written by [`write_bundle`].
pub fn read_melody_file(path: &Path, steps_per_quarter: u32) -> Result<LoadedMelody, BundleError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let cfg = QuantizationConfig { steps_per_quarter, min_melody_events: 1, pitch_range: (0, 127) };
    let mut melodies = midi::parse_and_extract(&bytes, &cfg)
        .map_err(|source| BundleError::Midi { path: path.to_path_buf(), source })?;
    if melodies.len() != 1 {
        return Err(BundleError::Invalid(format!(
            "{}: expected one melody, found {}",
            path.display(),
            melodies.len()
        )));
    }
    Ok(LoadedMelody { path: path.to_path_buf(), melody: melodies.remove(0), file_bytes: bytes.len() })
}

/// Numbered `.mid` files of a bundle directory in numeric order.
pub fn bundle_files(dir: &Path) -> Result<Vec<PathBuf>, BundleError> {
    let mut numbered = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        let index = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_suffix(".mid"))
            .filter(|stem| !stem.is_empty() && stem.chars().all(|c| c.is_ascii_digit()))
            .and_then(|stem| stem.parse::<u64>().ok());
        if let Some(index) = index {
            numbered.push((index, path));
        }
    }
    numbered.sort();
    Ok(numbered.into_iter().map(|(_, p)| p).collect())
}

pub fn read_bundle_dir(dir: &Path) -> Result<LoadedBundle, BundleError> {
    if !dir.is_dir() {
        return Err(BundleError::Invalid(format!("{} is not a directory", dir.display())));
    }
    let manifest = read_manifest(dir)?;
    let spq = manifest.as_ref().map_or(4, |m| m.steps_per_quarter);
    let files = bundle_files(dir)?;
    if files.is_empty() {
        return Err(BundleError::Invalid(format!("no melody files in {}", dir.display())));
    }
    let melodies = files.iter().map(|p| read_melody_file(p, spq)).collect::<Result<_, _>>()?;
    Ok(LoadedBundle { melodies, manifest })
}

/// Melody files given explicitly, in the order given.
pub fn read_bundle_files(paths: &[PathBuf], steps_per_quarter: u32) -> Result<LoadedBundle, BundleError> {
    if paths.is_empty() {
        return Err(BundleError::Invalid("no melody files given".into()));
    }
    let melodies = paths.iter().map(|p| read_melody_file(p, steps_per_quarter)).collect::<Result<_, _>>()?;
    Ok(LoadedBundle { melodies, manifest: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::MelodyStats;

    fn sample_bundle() -> StegoBundle {
        let melodies = vec![
            MelodySequence::from_symbols(&[62, 0, 64, 1], 4).unwrap(),
            MelodySequence::from_symbols(&[70, 70, 0, 0, 1, 1], 4).unwrap(),
        ];
        let stats = vec![
            MelodyStats { embedded_bits: 3, data_notes: 3 },
            MelodyStats { embedded_bits: 5, data_notes: 5 },
        ];
        StegoBundle { melodies, cps: 2, max_events_per_melody: 160, stats }
    }

    #[test]
    fn write_then_read() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("bundle");
        let bundle = sample_bundle();
        let manifest = write_bundle(&out, &bundle, &model_digest(b"model"), RenderOptions::default()).unwrap();
        assert_eq!(manifest.melodies.len(), 2);
        let loaded = read_bundle_dir(&out).unwrap();
        assert_eq!(loaded.sequences(), bundle.melodies);
        assert_eq!(loaded.manifest.unwrap(), manifest);
        let names: Vec<_> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names.len(), 3);

        // Files only, no manifest.
        let files = bundle_files(&out).unwrap();
        assert_eq!(read_bundle_files(&files, 4).unwrap().sequences(), bundle.melodies);
    }

    #[test]
    fn rewrite_replaces_directory() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("bundle");
        fs::create_dir_all(&out).unwrap();
        fs::write(out.join("stale.txt"), b"x").unwrap();
        write_bundle(&out, &sample_bundle(), "00", RenderOptions::default()).unwrap();
        assert!(!out.join("stale.txt").exists());
        // No staging directories left behind.
        assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 1);
    }

    #[test]
    fn failed_fill_leaves_nothing() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("never");
        let result: Result<(), BundleError> = write_dir_atomically(&out, |dir| {
            fs::write(dir.join("partial"), b"x").unwrap();
            Err(BundleError::Invalid("boom".into()))
        });
        assert!(result.is_err());
        assert!(!out.exists());
        assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 0);
    }

    #[test]
    fn numeric_file_order() {
        let tmp = tempfile::tempdir().unwrap();
        for name in ["0010.mid", "0002.mid", "manifest.json", "notes.mid", "0001.mid"] {
            fs::write(tmp.path().join(name), b"").unwrap();
        }
        let names: Vec<_> = bundle_files(tmp.path())
            .unwrap()
            .iter()
            .map(|p| p.file_name().unwrap().to_str().unwrap().to_string())
            .collect();
        assert_eq!(names, vec!["0001.mid", "0002.mid", "0010.mid"]);
    }

    #[test]
    fn digest_is_sha256_hex() {
        assert_eq!(
            model_digest(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
