use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

pub const MANIFEST_COLUMNS: [&str; 6] = ["left_path", "right_path", "score", "scene_id", "distortion", "level"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Distortion {
    Blur,
    /// White Gaussian noise.
    Wn,
    Jpeg,
    Jp2k,
    /// Fast fading.
    Ff,
    None,
}

impl Distortion {
    pub fn name(self) -> &'static str {
        match self {
            Distortion::Blur => "blur",
            Distortion::Wn => "wn",
            Distortion::Jpeg => "jpeg",
            Distortion::Jp2k => "jp2k",
            Distortion::Ff => "ff",
            Distortion::None => "none",
        }
    }
}

impl fmt::Display for Distortion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Distortion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "blur" | "gblur" => Distortion::Blur,
            "wn" | "noise" => Distortion::Wn,
            "jpeg" => Distortion::Jpeg,
            "jp2k" => Distortion::Jp2k,
            "ff" | "fastfading" => Distortion::Ff,
            "none" | "pristine" | "ref" => Distortion::None,
            other => return Err(Error::data(format!("unknown distortion '{other}'"))),
        })
    }
}

/// One stereo pair and its subjective score.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub left_path: PathBuf,
    pub right_path: PathBuf,
    /// MOS or DMOS as given; never normalized.
    pub score: f64,
    pub scene_id: String,
    pub distortion: Distortion,
    pub level: u32,
}

/// Loads a manifest CSV. Relative image paths resolve against the
/// manifest's directory and must exist.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    parse_manifest(file, base).map_err(|e| e.at_path(path))
}

fn line_error(line: usize, msg: String) -> Error {
    Error::Data { path: None, line: Some(line), msg }
}

/// Parses manifest CSV text from any reader, resolving paths against `base`.
pub fn parse_manifest<R: std::io::Read>(reader: R, base: &Path) -> Result<Vec<ManifestRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| line_error(1, format!("unreadable header: {e}")))?
        .clone();
    let mut cols = [0usize; 6];
    for (slot, name) in cols.iter_mut().zip(MANIFEST_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| line_error(1, format!("header is missing column '{name}'")))?;
    }
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            line_error(line, format!("malformed row: {e}"))
        })?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        let field = |i: usize| row.get(cols[i]).unwrap_or("");
        let resolve = |i: usize| -> Result<PathBuf> {
            let p = Path::new(field(i));
            let full = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
            if !full.exists() {
                return Err(line_error(line, format!("{} '{}' does not exist", MANIFEST_COLUMNS[i], full.display())));
            }
            Ok(full)
        };
        let score: f64 = field(2)
            .parse()
            .ok()
            .filter(|s: &f64| s.is_finite())
            .ok_or_else(|| line_error(line, format!("unparsable score '{}'", field(2))))?;
        let distortion = field(4).parse().map_err(|e: Error| match e {
            Error::Data { msg, .. } => line_error(line, msg),
            other => other,
        })?;
        let level = field(5)
            .parse()
            .map_err(|_| line_error(line, format!("unparsable level '{}'", field(5))))?;
        out.push(ManifestRecord {
            left_path: resolve(0)?,
            right_path: resolve(1)?,
            score,
            scene_id: field(3).to_string(),
            distortion,
            level,
        });
    }
    Ok(out)
}

/// Writes a manifest; paths under `base` are stored relative to it.
pub fn write_manifest(path: &Path, records: &[ManifestRecord], base: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let io = |e: csv::Error| Error::io(path, e.into());
    w.write_record(MANIFEST_COLUMNS).map_err(io)?;
    for r in records {
        let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).to_string_lossy().into_owned();
        w.write_record([
            rel(&r.left_path),
            rel(&r.right_path),
            r.score.to_string(),
            r.scene_id.clone(),
            r.distortion.to_string(),
            r.level.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dir_with_images() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        for name in ["a.ppm", "b.ppm"] {
            std::fs::write(dir.path().join(name), b"").unwrap();
        }
        dir
    }

    #[test]
    fn two_rows() {
        let dir = dir_with_images();
        let text = "left_path,right_path,score,scene_id,distortion,level\n\
                    a.ppm,b.ppm,37.25,s1,jp2k,2\n\
                    b.ppm,a.ppm,0,s2,none,0\n";
        let recs = parse_manifest(text.as_bytes(), dir.path()).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].score, 37.25);
        assert_eq!(recs[0].distortion, Distortion::Jp2k);
        assert_eq!(recs[1].left_path, dir.path().join("b.ppm"));
    }

    #[test]
    fn missing_column_named() {
        let err = parse_manifest("left_path,right_path,scene_id,distortion,level\n".as_bytes(), Path::new("."))
            .unwrap_err();
        assert!(err.to_string().contains("'score'"), "{err}");
    }

    #[test]
    fn bad_rows_report_line() {
        let dir = dir_with_images();
        let head = "left_path,right_path,score,scene_id,distortion,level\n";
        let err = parse_manifest(format!("{head}a.ppm,b.ppm,x,s,blur,1\n").as_bytes(), dir.path()).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        let err = parse_manifest(format!("{head}a.ppm,b.ppm,1,s,blur,1\nq.ppm,b.ppm,1,s,blur,1\n").as_bytes(), dir.path())
            .unwrap_err();
        assert!(err.to_string().contains("line 3") && err.to_string().contains("q.ppm"), "{err}");
    }

    #[test]
    fn write_then_load() {
        let dir = dir_with_images();
        let rec = ManifestRecord {
            left_path: dir.path().join("a.ppm"),
            right_path: dir.path().join("b.ppm"),
            score: 61.5,
            scene_id: "x".into(),
            distortion: Distortion::Wn,
            level: 3,
        };
        let m = dir.path().join("m.csv");
        write_manifest(&m, std::slice::from_ref(&rec), dir.path()).unwrap();
        assert!(std::fs::read_to_string(&m).unwrap().contains("\na.ppm,b.ppm,"));
        assert_eq!(load_manifest(&m).unwrap(), vec![rec]);
    }
}
