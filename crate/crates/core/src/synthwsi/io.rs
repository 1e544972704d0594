//! Slide and manifest persistence.
//!
//! Slide file layout (all integers little-endian):
//! magic "HWSI" | version u16 | grid_w u32 | grid_h u32 | patch_px u16 |
//! channels u8 | label u8 | pixel payload (patch-major, as in [`SlideGrid`]).
//!
//! A dataset directory holds `slides/*.hwsi`, `manifest.csv` with header
//! `slide_id,path,label,split`, and `dataset.meta` with flat `key=value`
//! generation facts.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{DatasetManifest, ManifestEntry, Profile, SlideGrid, Split, SynthError};

pub const MAGIC: &[u8; 4] = b"HWSI";
pub const FORMAT_VERSION: u16 = 1;

fn io_err(op: &'static str, path: &Path, source: std::io::Error) -> SynthError {
    SynthError::Io {
        op,
        path: path.display().to_string(),
        source,
    }
}

pub fn save_slide(slide: &SlideGrid, path: &Path) -> Result<(), SynthError> {
    let mut buf = Vec::with_capacity(18 + slide.pixels.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(slide.grid_w as u32).to_le_bytes());
    buf.extend_from_slice(&(slide.grid_h as u32).to_le_bytes());
    buf.extend_from_slice(&(slide.patch_px as u16).to_le_bytes());
    buf.push(slide.channels as u8);
    buf.push(slide.label);
    buf.extend_from_slice(&slide.pixels);
    let mut f = fs::File::create(path).map_err(|e| io_err("create", path, e))?;
    f.write_all(&buf).map_err(|e| io_err("write", path, e))?;
    f.sync_all().map_err(|e| io_err("sync", path, e))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], SynthError> {
        if self.pos + n > self.buf.len() {
            return Err(SynthError::Truncated {
                path: self.path.display().to_string(),
                offset: self.buf.len(),
                needed: self.pos + n - self.buf.len(),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16, SynthError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, SynthError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8, SynthError> {
        Ok(self.take(1)?[0])
    }
}

/// Loads a slide; the slide id is the file stem. The non-empty mask is not
/// stored in the file — callers re-derive it with
/// [`super::filter_empty_patches`] and the manifest's threshold.
pub fn load_slide(path: &Path) -> Result<SlideGrid, SynthError> {
    let buf = fs::read(path).map_err(|e| io_err("read", path, e))?;
    let mut r = Reader {
        buf: &buf,
        pos: 0,
        path,
    };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(SynthError::BadMagic {
            path: path.display().to_string(),
            found: magic.try_into().unwrap(),
        });
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(SynthError::BadVersion {
            path: path.display().to_string(),
            version,
        });
    }
    let grid_w = r.u32()? as usize;
    let grid_h = r.u32()? as usize;
    let patch_px = r.u16()? as usize;
    let channels = r.u8()? as usize;
    let label = r.u8()?;
    let header_err = |offset: usize, detail: String| SynthError::BadHeader {
        path: path.display().to_string(),
        offset,
        detail,
    };
    if grid_w == 0 || grid_h == 0 {
        return Err(header_err(6, format!("zero grid dimension {grid_w}x{grid_h}")));
    }
    if patch_px == 0 {
        return Err(header_err(14, "zero patch size".into()));
    }
    if channels == 0 {
        return Err(header_err(16, "zero channel count".into()));
    }
    if label > 1 {
        return Err(header_err(17, format!("label {label} not in {{0,1}}")));
    }
    let payload = grid_w * grid_h * patch_px * patch_px * channels;
    let pixels = r.take(payload)?.to_vec();
    if r.pos != buf.len() {
        return Err(header_err(
            r.pos,
            format!("{} trailing bytes after pixel payload", buf.len() - r.pos),
        ));
    }
    let slide_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    SlideGrid::new(slide_id, grid_w, grid_h, patch_px, channels, label, pixels)
}

pub fn save_manifest(manifest: &DatasetManifest, dir: &Path) -> Result<(), SynthError> {
    let mut csv = String::from("slide_id,path,label,split\n");
    for e in &manifest.entries {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            e.slide_id,
            e.path,
            e.label,
            e.split.as_str()
        ));
    }
    let csv_path = dir.join("manifest.csv");
    fs::write(&csv_path, csv).map_err(|e| io_err("write", &csv_path, e))?;

    let meta = format!(
        "name={}\nprofile={}\nseed={}\ngenerator_version={}\ngrid_w={}\ngrid_h={}\npatch_px={}\nthreshold={}\n",
        manifest.name,
        manifest.profile.as_str(),
        manifest.seed,
        manifest.generator_version,
        manifest.grid_w,
        manifest.grid_h,
        manifest.patch_px,
        manifest.threshold,
    );
    let meta_path = dir.join("dataset.meta");
    fs::write(&meta_path, meta).map_err(|e| io_err("write", &meta_path, e))?;
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest, SynthError> {
    let meta_path = dir.join("dataset.meta");
    let meta_text = fs::read_to_string(&meta_path).map_err(|e| io_err("read", &meta_path, e))?;
    let mut kv = std::collections::HashMap::new();
    for (i, line) in meta_text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| SynthError::BadManifest {
            path: meta_path.display().to_string(),
            line: i + 1,
            detail: "expected key=value".into(),
        })?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    let field = |k: &str| -> Result<String, SynthError> {
        kv.get(k).cloned().ok_or_else(|| SynthError::BadManifest {
            path: meta_path.display().to_string(),
            line: 0,
            detail: format!("missing key {k}"),
        })
    };
    let parse_num = |k: &str| -> Result<u64, SynthError> {
        field(k)?.parse().map_err(|_| SynthError::BadManifest {
            path: meta_path.display().to_string(),
            line: 0,
            detail: format!("key {k} is not an integer"),
        })
    };
    let profile_s = field("profile")?;
    let profile = Profile::parse(&profile_s).ok_or_else(|| SynthError::BadManifest {
        path: meta_path.display().to_string(),
        line: 0,
        detail: format!("unknown profile {profile_s}"),
    })?;

    let csv_path = dir.join("manifest.csv");
    let csv_text = fs::read_to_string(&csv_path).map_err(|e| io_err("read", &csv_path, e))?;
    let bad = |line: usize, detail: String| SynthError::BadManifest {
        path: csv_path.display().to_string(),
        line,
        detail,
    };
    let mut lines = csv_text.lines().enumerate();
    match lines.next() {
        Some((_, "slide_id,path,label,split")) => {}
        Some((_, other)) => return Err(bad(1, format!("bad header {other:?}"))),
        None => return Err(bad(1, "empty manifest".into())),
    }
    let mut entries = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(bad(i + 1, format!("expected 4 fields, got {}", parts.len())));
        }
        let label: u8 = parts[2]
            .parse()
            .ok()
            .filter(|l| *l <= 1)
            .ok_or_else(|| bad(i + 1, format!("label {:?} not in {{0,1}}", parts[2])))?;
        let split = Split::parse(parts[3])
            .ok_or_else(|| bad(i + 1, format!("unknown split {:?}", parts[3])))?;
        entries.push(ManifestEntry {
            slide_id: parts[0].to_string(),
            path: parts[1].to_string(),
            label,
            split,
        });
    }
    Ok(DatasetManifest {
        name: field("name")?,
        profile,
        seed: parse_num("seed")?,
        generator_version: parse_num("generator_version")? as u32,
        grid_w: parse_num("grid_w")? as usize,
        grid_h: parse_num("grid_h")? as usize,
        patch_px: parse_num("patch_px")? as usize,
        threshold: parse_num("threshold")? as u8,
        entries,
    })
}
