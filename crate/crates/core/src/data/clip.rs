//! Clip files: one JSON header line, then the `T × J × 3` body either as a
//! single base64 line of little-endian `f64`s or as `T` CSV rows.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::Skeleton;
use crate::error::{Error, Result};
use crate::model::PoseSequence;

pub const CLIP_FORMAT: &str = "hitdvae-clip";
pub const CLIP_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BodyEncoding {
    Base64,
    Csv,
}

/// A labelled motion recording. Coordinates are stored as given; see
/// [`preprocess`] for root-centring.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionClip {
    pub id: String,
    pub skeleton: Skeleton,
    pub label: String,
    pub fps: f64,
    pub frames: usize,
    pub joints: usize,
    pub coords: Vec<f64>,
    pub source: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    id: String,
    skeleton: Skeleton,
    label: String,
    fps: f64,
    frames: usize,
    joints: usize,
    source: String,
    encoding: BodyEncoding,
}

impl MotionClip {
    pub fn to_bytes(&self, encoding: BodyEncoding) -> Vec<u8> {
        let header = Header {
            format: CLIP_FORMAT.into(),
            version: CLIP_VERSION,
            id: self.id.clone(),
            skeleton: self.skeleton.clone(),
            label: self.label.clone(),
            fps: self.fps,
            frames: self.frames,
            joints: self.joints,
            source: self.source.clone(),
            encoding,
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        match encoding {
            BodyEncoding::Base64 => {
                let raw: Vec<u8> = self.coords.iter().flat_map(|v| v.to_le_bytes()).collect();
                out.extend_from_slice(STANDARD.encode(raw).as_bytes());
                out.push(b'\n');
            }
            BodyEncoding::Csv => {
                let width = self.joints * 3;
                for row in self.coords.chunks(width) {
                    let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
                    out.extend_from_slice(line.join(",").as_bytes());
                    out.push(b'\n');
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| Error::Parse {
            offset: bytes.len(),
            message: "missing header line".into(),
        })?;
        let header: Header = serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::Parse {
            offset: e.column().saturating_sub(1),
            message: format!("header: {e}"),
        })?;
        if header.format != CLIP_FORMAT {
            return Err(Error::Parse {
                offset: 0,
                message: format!("unknown format `{}`", header.format),
            });
        }
        if header.version != CLIP_VERSION {
            return Err(Error::VersionMismatch {
                expected: CLIP_VERSION,
                found: header.version,
            });
        }
        let body_start = nl + 1;
        let body = &bytes[body_start..];
        let n = header.frames * header.joints * 3;
        let coords = match header.encoding {
            BodyEncoding::Base64 => decode_base64(body, body_start, n)?,
            BodyEncoding::Csv => decode_csv(body, body_start, header.frames, header.joints * 3)?,
        };
        if let Some(i) = coords.iter().position(|v| !v.is_finite()) {
            let w = header.joints * 3;
            return Err(Error::NonFinite {
                index: i,
                context: format!("frame {} coordinate {}", i / w, i % w),
            });
        }
        Ok(Self {
            id: header.id,
            skeleton: header.skeleton,
            label: header.label,
            fps: header.fps,
            frames: header.frames,
            joints: header.joints,
            coords,
            source: header.source,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>, encoding: BodyEncoding) -> Result<()> {
        std::fs::write(path, self.to_bytes(encoding))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn decode_base64(body: &[u8], base: usize, n: usize) -> Result<Vec<f64>> {
    let line_end = body.iter().position(|&b| b == b'\n').unwrap_or(body.len());
    let text = &body[..line_end];
    let raw = STANDARD.decode(text).map_err(|e| Error::Parse {
        offset: base
            + match e {
                base64::DecodeError::InvalidByte(i, _) => i,
                base64::DecodeError::InvalidLastSymbol(i, _) => i,
                _ => text.len(),
            },
        message: format!("base64 body: {e}"),
    })?;
    if raw.len() != 8 * n {
        return Err(Error::Parse {
            offset: base + line_end,
            message: format!("body holds {} bytes, expected {}", raw.len(), 8 * n),
        });
    }
    Ok(raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn decode_csv(body: &[u8], base: usize, frames: usize, width: usize) -> Result<Vec<f64>> {
    let text = std::str::from_utf8(body).map_err(|e| Error::Parse {
        offset: base + e.valid_up_to(),
        message: "body is not UTF-8".into(),
    })?;
    let mut out = Vec::with_capacity(frames * width);
    let mut offset = base;
    let mut rows = 0;
    for line in text.split_inclusive('\n') {
        let content = line.trim_end_matches('\n');
        if content.is_empty() {
            offset += line.len();
            continue;
        }
        if rows == frames {
            return Err(Error::RowShape {
                row: rows,
                message: format!("more than the declared {frames} rows"),
            });
        }
        let cells: Vec<&str> = content.split(',').collect();
        if cells.len() != width {
            return Err(Error::RowShape {
                row: rows,
                message: format!("{} columns, expected {width}", cells.len()),
            });
        }
        let mut col_offset = offset;
        for cell in cells {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                offset: col_offset,
                message: format!("row {rows}: `{cell}` is not a number"),
            })?;
            out.push(v);
            col_offset += cell.len() + 1;
        }
        offset += line.len();
        rows += 1;
    }
    if rows != frames {
        return Err(Error::Parse {
            offset,
            message: format!("body ends after {rows} of {frames} rows"),
        });
    }
    Ok(out)
}

/// Removes the global translation: the root joint is subtracted from every
/// joint of its frame.
pub fn preprocess(clip: &MotionClip, observed: usize) -> Result<PoseSequence> {
    let w = clip.joints * 3;
    let mut coords = clip.coords.clone();
    for frame in coords.chunks_mut(w) {
        let root = [frame[0], frame[1], frame[2]];
        for j in 0..clip.joints {
            for c in 0..3 {
                frame[3 * j + c] -= root[c];
            }
        }
    }
    PoseSequence::new(clip.frames, clip.joints, observed, coords)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip() -> MotionClip {
        let mut coords: Vec<f64> = (0..2 * 9 * 3).map(|i| (i as f64 * 0.37).sin() / 3.0).collect();
        coords[5] = -0.0;
        coords[7] = 1e-300;
        MotionClip {
            id: "c0".into(),
            skeleton: Skeleton::synthetic(),
            label: "walk".into(),
            fps: 25.0,
            frames: 2,
            joints: 9,
            coords,
            source: "test".into(),
        }
    }

    fn bits(v: &[f64]) -> Vec<u64> {
        v.iter().map(|x| x.to_bits()).collect()
    }

    #[test]
    fn round_trips_bit_exact() {
        let c = clip();
        for enc in [BodyEncoding::Base64, BodyEncoding::Csv] {
            let back = MotionClip::from_bytes(&c.to_bytes(enc)).unwrap();
            assert_eq!(bits(&back.coords), bits(&c.coords));
            assert_eq!(back.label, c.label);
        }
    }

    #[test]
    fn truncated_body_names_offset() {
        let bytes = clip().to_bytes(BodyEncoding::Base64);
        let cut = bytes.len() - 20;
        match MotionClip::from_bytes(&bytes[..cut]) {
            Err(Error::Parse { offset, .. }) => assert!(offset > 0 && offset <= cut),
            other => panic!("{other:?}"),
        }
        let csv = clip().to_bytes(BodyEncoding::Csv);
        let nl = csv.iter().rposition(|&b| b == b'\n').unwrap();
        let prev = csv[..nl].iter().rposition(|&b| b == b'\n').unwrap();
        assert!(matches!(
            MotionClip::from_bytes(&csv[..prev + 1]),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn extra_csv_column_names_row() {
        let text = String::from_utf8(clip().to_bytes(BodyEncoding::Csv)).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[2].push_str(",0.5");
        let bad = lines.join("\n") + "\n";
        assert!(matches!(
            MotionClip::from_bytes(bad.as_bytes()),
            Err(Error::RowShape { row: 1, .. })
        ));
    }

    #[test]
    fn version_checked() {
        let text = String::from_utf8(clip().to_bytes(BodyEncoding::Csv)).unwrap();
        let bad = text.replacen("\"version\":1", "\"version\":7", 1);
        assert!(matches!(
            MotionClip::from_bytes(bad.as_bytes()),
            Err(Error::VersionMismatch { found: 7, .. })
        ));
    }

    #[test]
    fn non_finite_rejected() {
        let mut c = clip();
        c.coords[10] = f64::NAN;
        assert!(matches!(
            MotionClip::from_bytes(&c.to_bytes(BodyEncoding::Base64)),
            Err(Error::NonFinite { index: 10, .. })
        ));
    }

    #[test]
    fn preprocess_removes_offset() {
        let mut c = clip();
        for f in c.coords.chunks_mut(27) {
            f[0] = 0.0;
            f[1] = 0.0;
            f[2] = 0.0;
        }
        let centred = preprocess(&c, 1).unwrap();
        assert_eq!(centred.coords(), c.coords.as_slice());
        let mut shifted = c.clone();
        for f in shifted.coords.chunks_mut(3) {
            f[0] += 1.0;
            f[1] += 2.0;
            f[2] += 3.0;
        }
        let back = preprocess(&shifted, 1).unwrap();
        for (a, b) in back.coords().iter().zip(centred.coords()) {
            assert!((a - b).abs() < 1e-12);
        }
        let again = MotionClip { coords: back.coords().to_vec(), ..c };
        assert_eq!(preprocess(&again, 1).unwrap(), back);
    }
}
