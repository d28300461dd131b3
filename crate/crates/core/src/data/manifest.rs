use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sphere::{Scanpath, ViewingCondition};

pub const MANIFEST_SCHEMA: u32 = 1;

/// First line of a manifest, as JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub schema: u32,
    /// `[min, max]` of the opinion score scale.
    pub mos_scale: [f64; 2],
    pub conditions: Vec<ViewingCondition>,
}

/// A scanpath with its own opinion score, when the database provides one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledScanpath {
    #[serde(flatten)]
    pub scanpath: Scanpath,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mos: Option<f64>,
}

/// Sidecar JSON holding an image's scanpaths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanpathFile {
    pub image_id: String,
    pub scanpaths: Vec<LabeledScanpath>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub image_id: String,
    /// Source content; distorted versions of one scene share it.
    pub scene_id: String,
    pub erp_path: PathBuf,
    pub mos: f64,
    pub distortion_tag: String,
    pub scanpaths: Vec<LabeledScanpath>,
}

#[derive(Debug, Deserialize, Serialize)]
struct Row {
    image_id: String,
    scene_id: String,
    erp_path: String,
    mos: f64,
    distortion_tag: String,
    #[serde(default)]
    scanpath_path: String,
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { path: path.into(), line, msg: msg.into() }
}

/// Parses manifest text; relative paths resolve against `base`.
/// Scanpath sidecars are read through `read_sidecar`.
pub fn parse_manifest(
    text: &str,
    path: &Path,
    base: &Path,
    mut read_sidecar: impl FnMut(&Path) -> Result<String>,
) -> Result<(ManifestHeader, Vec<ManifestEntry>)> {
    let (first, body) = text.split_once('\n').unwrap_or((text, ""));
    let header: ManifestHeader =
        serde_json::from_str(first.trim_end_matches('\r')).map_err(|e| parse_err(path, 1, format!("header: {e}")))?;
    if header.schema != MANIFEST_SCHEMA {
        return Err(parse_err(path, 1, format!("unsupported schema {}", header.schema)));
    }
    let [lo, hi] = header.mos_scale;
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(parse_err(path, 1, format!("invalid mos_scale {:?}", header.mos_scale)));
    }
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(body.as_bytes());
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for rec in rdr.deserialize::<Row>() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize + 1);
            parse_err(path, line, e.to_string())
        })?;
        let line = entries.len() + 3;
        if rec.image_id.is_empty() {
            return Err(parse_err(path, line, "empty image_id"));
        }
        if !rec.mos.is_finite() {
            return Err(parse_err(path, line, format!("non-finite mos for `{}`", rec.image_id)));
        }
        if !seen.insert(rec.image_id.clone()) {
            return Err(parse_err(path, line, format!("duplicate image_id `{}`", rec.image_id)));
        }
        let scanpaths = if rec.scanpath_path.is_empty() {
            Vec::new()
        } else {
            let sp_path = base.join(&rec.scanpath_path);
            let file: ScanpathFile = serde_json::from_str(&read_sidecar(&sp_path)?)
                .map_err(|e| parse_err(&sp_path, e.line(), e.to_string()))?;
            if file.image_id != rec.image_id {
                return Err(parse_err(&sp_path, 1, format!("sidecar is for `{}`, not `{}`", file.image_id, rec.image_id)));
            }
            let mut conds = HashSet::new();
            for sp in &file.scanpaths {
                if sp.scanpath.points.is_empty() {
                    return Err(parse_err(&sp_path, 1, format!("empty {} scanpath", sp.scanpath.condition)));
                }
                if !conds.insert(sp.scanpath.condition) {
                    return Err(parse_err(&sp_path, 1, format!("duplicate {} scanpath", sp.scanpath.condition)));
                }
                if sp.mos.is_some_and(|m| !m.is_finite()) {
                    return Err(parse_err(&sp_path, 1, "non-finite scanpath mos"));
                }
            }
            if file.scanpaths.len() > 4 {
                return Err(parse_err(&sp_path, 1, "more than four scanpaths"));
            }
            file.scanpaths
        };
        entries.push(ManifestEntry {
            image_id: rec.image_id,
            scene_id: rec.scene_id,
            erp_path: base.join(rec.erp_path),
            mos: rec.mos,
            distortion_tag: rec.distortion_tag,
            scanpaths,
        });
    }
    Ok((header, entries))
}

/// Reads a manifest and its scanpath sidecars.
pub fn load_manifest(path: &Path) -> Result<(ManifestHeader, Vec<ManifestEntry>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&text, path, base, |p| std::fs::read_to_string(p).map_err(|e| Error::io(p, e)))
}

/// `p` relative to `base` when inside it; otherwise absolute, so the
/// written manifest resolves from any directory.
fn relative(p: &Path, base: &Path) -> String {
    match p.strip_prefix(base) {
        Ok(r) => r.to_string_lossy().into_owned(),
        Err(_) => std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf()).to_string_lossy().into_owned(),
    }
}

/// Writes `manifest.csv`-style text plus one sidecar per entry with
/// scanpaths (`scanpaths/<image_id>.json`), all atomically.
pub fn write_manifest(dir: &Path, file_name: &str, header: &ManifestHeader, entries: &[ManifestEntry]) -> Result<PathBuf> {
    let sp_dir = dir.join("scanpaths");
    let mut wtr = csv::Writer::from_writer(Vec::new());
    for e in entries {
        let scanpath_path = if e.scanpaths.is_empty() {
            String::new()
        } else {
            std::fs::create_dir_all(&sp_dir).map_err(|err| Error::io(&sp_dir, err))?;
            let p = sp_dir.join(format!("{}.json", e.image_id));
            let file = ScanpathFile { image_id: e.image_id.clone(), scanpaths: e.scanpaths.clone() };
            write_atomic(&p, serde_json::to_string(&file)?.as_bytes())?;
            relative(&p, dir)
        };
        wtr.serialize(Row {
            image_id: e.image_id.clone(),
            scene_id: e.scene_id.clone(),
            erp_path: relative(&e.erp_path, dir),
            mos: e.mos,
            distortion_tag: e.distortion_tag.clone(),
            scanpath_path,
        })
        .map_err(|err| Error::Config(err.to_string()))?;
    }
    if entries.is_empty() {
        wtr.write_record(["image_id", "scene_id", "erp_path", "mos", "distortion_tag", "scanpath_path"])
            .map_err(|err| Error::Config(err.to_string()))?;
    }
    let body = wtr.into_inner().map_err(|err| Error::Config(err.to_string()))?;
    let mut text = serde_json::to_string(header)?.into_bytes();
    text.push(b'\n');
    text.extend_from_slice(&body);
    let path = dir.join(file_name);
    write_atomic(&path, &text)?;
    Ok(path)
}

/// Write to a temporary file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    use std::io::Write;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}
