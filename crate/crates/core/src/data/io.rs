//! Annotation and feature file formats.
//!
//! Annotations are UTF-8 text, one event per line:
//!
//! ```text
//! video_id<TAB>subject_id<TAB>N<TAB>onset<TAB>offset<TAB>apex<TAB>category
//! ```
//!
//! A video without events is written as a single line whose four event fields
//! are `-`. Blank lines and lines starting with `#` are ignored.
//!
//! Feature files hold one video each: the 8-byte magic `TEDSFEAT`, then `N`
//! and `d` as little-endian `u32`, then `N * d` little-endian `f32` values.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{Dataset, ExpressionEvent, FrameFeatureSequence, VideoAnnotation};
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 8] = b"TEDSFEAT";
pub const ANNOTATIONS_FILE: &str = "annotations.tsv";
pub const FEATURES_DIR: &str = "features";

const HEADER_LEN: usize = 16;

pub fn write_annotations<W: Write>(mut out: W, annotations: &[VideoAnnotation]) -> Result<()> {
    for a in annotations {
        if a.events.is_empty() {
            writeln!(out, "{}\t{}\t{}\t-\t-\t-\t-", a.video_id, a.subject_id, a.num_frames)?;
        }
        for e in &a.events {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                a.video_id, a.subject_id, a.num_frames, e.onset, e.offset, e.apex, e.category
            )?;
        }
    }
    Ok(())
}

pub fn save_annotations(path: &Path, annotations: &[VideoAnnotation]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    write_annotations(&mut out, annotations)?;
    out.flush()?;
    Ok(())
}

pub fn load_annotations(path: &Path) -> Result<Vec<VideoAnnotation>> {
    let text = fs::read_to_string(path)?;
    parse_annotations(&text, path)
}

/// Parses annotation text; `origin` is only used in error messages.
pub fn parse_annotations(text: &str, origin: &Path) -> Result<Vec<VideoAnnotation>> {
    let mut videos: Vec<VideoAnnotation> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let err = |message: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            message,
        };
        let raw = raw.trim_end_matches('\r');
        if raw.trim().is_empty() || raw.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != 7 {
            return Err(err(format!("expected 7 tab-separated fields, found {}", fields.len())));
        }
        let num = |idx: usize, name: &str| -> Result<usize> {
            fields[idx]
                .parse::<usize>()
                .map_err(|_| err(format!("{name} `{}` is not a nonnegative integer", fields[idx])))
        };
        let num_frames = num(2, "N")?;
        if num_frames == 0 {
            return Err(err("N must be positive".into()));
        }
        let event = if fields[3..].iter().all(|f| *f == "-") {
            None
        } else {
            let e = ExpressionEvent {
                onset: num(3, "onset")?,
                offset: num(4, "offset")?,
                apex: num(5, "apex")?,
                category: num(6, "category")?,
            };
            if e.offset <= e.onset {
                return Err(err(format!("offset {} must exceed onset {}", e.offset, e.onset)));
            }
            if !(e.onset < e.apex && e.apex < e.offset) {
                return Err(err(format!("apex {} must lie strictly inside the event", e.apex)));
            }
            if e.offset > num_frames {
                return Err(err(format!("offset {} exceeds N = {num_frames}", e.offset)));
            }
            Some(e)
        };
        let video = match videos.iter_mut().find(|v| v.video_id == fields[0]) {
            Some(v) => {
                if v.subject_id != fields[1] || v.num_frames != num_frames {
                    return Err(err(format!("video {} changes subject or frame count", fields[0])));
                }
                v
            }
            None => {
                videos.push(VideoAnnotation {
                    video_id: fields[0].to_string(),
                    subject_id: fields[1].to_string(),
                    num_frames,
                    events: Vec::new(),
                });
                videos.last_mut().unwrap()
            }
        };
        if let Some(e) = event {
            video.events.push(e);
        }
    }
    for v in &mut videos {
        v.events.sort_by_key(|e| e.onset);
        v.validate().map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })?;
    }
    Ok(videos)
}

pub fn save_features(path: &Path, features: &FrameFeatureSequence) -> Result<()> {
    let n = u32::try_from(features.num_frames).map_err(|_| Error::FeatureFile {
        path: path.to_path_buf(),
        message: "too many frames".into(),
    })?;
    let d = u32::try_from(features.dim).map_err(|_| Error::FeatureFile {
        path: path.to_path_buf(),
        message: "feature dimension too large".into(),
    })?;
    let mut bytes = Vec::with_capacity(HEADER_LEN + 4 * features.data.len());
    bytes.extend_from_slice(FEATURE_MAGIC);
    bytes.extend_from_slice(&n.to_le_bytes());
    bytes.extend_from_slice(&d.to_le_bytes());
    for v in &features.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a feature file; the video id is taken from the file stem.
pub fn load_features(path: &Path) -> Result<FrameFeatureSequence> {
    let bytes = fs::read(path)?;
    let bad = |message: &str| Error::FeatureFile {
        path: path.to_path_buf(),
        message: message.to_string(),
    };
    if bytes.len() < HEADER_LEN || &bytes[..8] != FEATURE_MAGIC {
        return Err(bad("missing TEDSFEAT header"));
    }
    let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if bytes.len() != HEADER_LEN + 4 * n * d {
        return Err(bad("payload length does not match header"));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let video_id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| bad("file name is not valid UTF-8"))?
        .to_string();
    Ok(FrameFeatureSequence {
        video_id,
        num_frames: n,
        dim: d,
        data,
    })
}

fn feature_path(dir: &Path, video_id: &str) -> PathBuf {
    dir.join(FEATURES_DIR).join(format!("{video_id}.feat"))
}

/// Writes `annotations.tsv` and `features/<video_id>.feat` under `dir`.
pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    fs::create_dir_all(dir.join(FEATURES_DIR))?;
    save_annotations(&dir.join(ANNOTATIONS_FILE), &dataset.annotations)?;
    for f in &dataset.features {
        save_features(&feature_path(dir, &f.video_id), f)?;
    }
    Ok(())
}

/// Loads a corpus written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let annotations = load_annotations(&dir.join(ANNOTATIONS_FILE))?;
    let mut features = Vec::with_capacity(annotations.len());
    for a in &annotations {
        let path = feature_path(dir, &a.video_id);
        let f = load_features(&path)?;
        if f.num_frames != a.num_frames {
            return Err(Error::FeatureFile {
                path,
                message: format!("{} frames on disk but {} annotated", f.num_frames, a.num_frames),
            });
        }
        features.push(f);
    }
    Ok(Dataset { annotations, features })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, DatasetConfig};

    #[test]
    fn annotation_roundtrip() {
        let cfg = DatasetConfig {
            num_subjects: 2,
            ..DatasetConfig::default()
        };
        let mut ds = generate_dataset(&cfg).unwrap();
        ds.annotations[1].events.clear();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.tsv");
        save_annotations(&path, &ds.annotations).unwrap();
        assert_eq!(load_annotations(&path).unwrap(), ds.annotations);
    }

    #[test]
    fn empty_file_is_empty() {
        assert!(parse_annotations("", Path::new("x")).unwrap().is_empty());
    }

    #[test]
    fn inverted_event_names_its_line() {
        let text = "v\ts\t100\t10\t20\t15\t0\nv\ts\t100\t50\t40\t45\t1\n";
        match parse_annotations(text, Path::new("ann.tsv")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_field_count_is_rejected() {
        assert!(matches!(
            parse_annotations("v\ts\t100\t1\t2\n", Path::new("x")),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn feature_roundtrip_and_header() {
        let f = FrameFeatureSequence {
            video_id: "s00_v00".into(),
            num_frames: 3,
            dim: 2,
            data: vec![0.5, -1.0, 2.0, 3.25, 0.0, 1e-3],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s00_v00.feat");
        save_features(&path, &f).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], b"TEDSFEAT");
        assert_eq!(&bytes[8..16], &[3, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(bytes.len(), 16 + 4 * 6);
        assert_eq!(load_features(&path).unwrap(), f);

        fs::write(&path, &bytes[..20]).unwrap();
        assert!(matches!(load_features(&path), Err(Error::FeatureFile { .. })));
    }
}
