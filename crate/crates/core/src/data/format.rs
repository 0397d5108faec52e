//! `PSET` blob plus text manifest.
//!
//! The blob is `"PSET"`, a `u32` version, then one record per parcel:
//!
//! ```text
//! u64 id  u32 label  u32 T  u32 C  u32 N  f64 geo[4]  u32 days[T]  f32 pixels[T][C][N]
//! ```
//!
//! all little-endian. The manifest lists every record with its byte offset.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use crate::pse::GeometricFeatures;

use super::{DataError, Dataset, ParcelRecord};

pub const BLOB_MAGIC: &[u8; 4] = b"PSET";
pub const BLOB_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const BLOB_FILE: &str = "dataset.pset";
const NORMALIZATION: &str = "per_date_channel_train_fold";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub parcel_id: u64,
    pub label: usize,
    pub pixels: usize,
    pub offset: u64,
    pub block: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub format_version: u32,
    pub blob: String,
    pub classes: usize,
    pub dates: usize,
    pub channels: usize,
    pub folds: usize,
    pub fold_seed: u64,
    /// How normalization statistics are derived; they are not stored here
    /// because they depend on the fold.
    pub normalization: String,
    pub entries: Vec<ManifestEntry>,
}

fn record_header_len(dates: usize) -> u64 {
    (8 + 4 * 4 + 8 * 4 + 4 * dates) as u64
}

fn record_len(dates: usize, channels: usize, n: usize) -> u64 {
    record_header_len(dates) + (4 * dates * channels * n) as u64
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "# PSET dataset manifest").unwrap();
        writeln!(s, "format_version={}", self.format_version).unwrap();
        writeln!(s, "blob={}", self.blob).unwrap();
        writeln!(s, "classes={}", self.classes).unwrap();
        writeln!(s, "dates={}", self.dates).unwrap();
        writeln!(s, "channels={}", self.channels).unwrap();
        writeln!(s, "parcels={}", self.entries.len()).unwrap();
        writeln!(s, "folds={}", self.folds).unwrap();
        writeln!(s, "fold_seed={}", self.fold_seed).unwrap();
        writeln!(s, "normalization={}", self.normalization).unwrap();
        writeln!(s, "[parcels]").unwrap();
        writeln!(s, "parcel_id,label,pixels,offset,block").unwrap();
        for e in &self.entries {
            writeln!(
                s,
                "{},{},{},{},{}",
                e.parcel_id, e.label, e.pixels, e.offset, e.block
            )
            .unwrap();
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self, DataError> {
        let err = |line: usize, msg: String| DataError::Manifest {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut kv = std::collections::BTreeMap::new();
        let mut entries = Vec::new();
        let mut in_table = false;
        let mut saw_header = false;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line == "[parcels]" {
                in_table = true;
                continue;
            }
            if !in_table {
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| err(line_no, format!("expected key=value, got '{line}'")))?;
                let k = k.trim();
                const KEYS: [&str; 9] = [
                    "format_version",
                    "blob",
                    "classes",
                    "dates",
                    "channels",
                    "parcels",
                    "folds",
                    "fold_seed",
                    "normalization",
                ];
                if !KEYS.contains(&k) {
                    return Err(err(line_no, format!("unknown key '{k}'")));
                }
                if kv
                    .insert(k.to_string(), (line_no, v.trim().to_string()))
                    .is_some()
                {
                    return Err(err(line_no, format!("duplicate key '{k}'")));
                }
                continue;
            }
            if !saw_header {
                if line != "parcel_id,label,pixels,offset,block" {
                    return Err(err(line_no, format!("unexpected table header '{line}'")));
                }
                saw_header = true;
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 5 {
                return Err(err(
                    line_no,
                    format!("expected 5 columns, got {}", cols.len()),
                ));
            }
            let num = |j: usize| -> Result<u64, DataError> {
                cols[j]
                    .trim()
                    .parse::<u64>()
                    .map_err(|_| err(line_no, format!("bad number '{}'", cols[j])))
            };
            entries.push((
                line_no,
                ManifestEntry {
                    parcel_id: num(0)?,
                    label: num(1)? as usize,
                    pixels: num(2)? as usize,
                    offset: num(3)?,
                    block: num(4)? as usize,
                },
            ));
        }
        let get = |k: &str| -> Result<(usize, String), DataError> {
            kv.get(k)
                .cloned()
                .ok_or_else(|| err(0, format!("missing key '{k}'")))
        };
        let num = |k: &str| -> Result<u64, DataError> {
            let (line, v) = get(k)?;
            v.parse::<u64>()
                .map_err(|_| err(line, format!("{k}: bad number '{v}'")))
        };
        let m = Manifest {
            format_version: num("format_version")? as u32,
            blob: get("blob")?.1,
            classes: num("classes")? as usize,
            dates: num("dates")? as usize,
            channels: num("channels")? as usize,
            folds: num("folds")? as usize,
            fold_seed: num("fold_seed")?,
            normalization: get("normalization")?.1,
            entries: entries.iter().map(|(_, e)| e.clone()).collect(),
        };
        if m.format_version != BLOB_VERSION {
            return Err(err(
                get("format_version")?.0,
                format!("unsupported format version {}", m.format_version),
            ));
        }
        let declared = num("parcels")? as usize;
        if declared != m.entries.len() {
            return Err(err(
                get("parcels")?.0,
                format!("declares {declared} parcels, table has {}", m.entries.len()),
            ));
        }
        let mut prev: Option<u64> = None;
        let mut ids = std::collections::HashSet::new();
        for (line, e) in &entries {
            if !ids.insert(e.parcel_id) {
                return Err(err(*line, format!("duplicate parcel id {}", e.parcel_id)));
            }
            if prev.is_some_and(|p| e.offset <= p) {
                return Err(err(
                    *line,
                    format!("offset {} is not strictly increasing", e.offset),
                ));
            }
            prev = Some(e.offset);
            if e.label >= m.classes {
                return Err(err(
                    *line,
                    format!("label {} out of range for {} classes", e.label, m.classes),
                ));
            }
            if e.block >= m.folds {
                return Err(err(
                    *line,
                    format!("block {} out of range for {} folds", e.block, m.folds),
                ));
            }
            if e.pixels == 0 {
                return Err(err(*line, "parcel has no pixels".into()));
            }
        }
        Ok(m)
    }
}

/// Accepts either a dataset directory or its manifest file.
fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

fn load_manifest(path: &Path) -> Result<(Manifest, PathBuf), DataError> {
    let mpath = manifest_path(path);
    let text = std::fs::read_to_string(&mpath).map_err(|e| DataError::io(&mpath, e))?;
    let manifest = Manifest::parse(&text, &mpath)?;
    let blob = mpath
        .parent()
        .unwrap_or(Path::new("."))
        .join(&manifest.blob);
    Ok((manifest, blob))
}

/// Writes `manifest.txt` and `dataset.pset` into `dir`.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<Manifest, DataError> {
    std::fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    let blob_path = dir.join(BLOB_FILE);
    let file = File::create(&blob_path).map_err(|e| DataError::io(&blob_path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| DataError::io(&blob_path, e);
    w.write_all(BLOB_MAGIC).map_err(io)?;
    w.write_all(&BLOB_VERSION.to_le_bytes()).map_err(io)?;
    let mut offset = 8u64;
    let mut entries = Vec::with_capacity(ds.records.len());
    let mut buf = Vec::new();
    for (r, &block) in ds.records.iter().zip(&ds.blocks) {
        r.validate()?;
        if r.dates != ds.dates || r.channels != ds.channels {
            return Err(DataError::Record {
                id: r.id,
                msg: format!(
                    "{}x{} does not match dataset {}x{}",
                    r.dates, r.channels, ds.dates, ds.channels
                ),
            });
        }
        buf.clear();
        buf.extend_from_slice(&r.id.to_le_bytes());
        buf.extend_from_slice(&(r.label as u32).to_le_bytes());
        buf.extend_from_slice(&(r.dates as u32).to_le_bytes());
        buf.extend_from_slice(&(r.channels as u32).to_le_bytes());
        buf.extend_from_slice(&(r.pixel_count as u32).to_le_bytes());
        for g in r.geo.to_array() {
            buf.extend_from_slice(&g.to_le_bytes());
        }
        for d in &r.days {
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for v in &r.pixels {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(io)?;
        entries.push(ManifestEntry {
            parcel_id: r.id,
            label: r.label,
            pixels: r.pixel_count,
            offset,
            block,
        });
        offset += buf.len() as u64;
    }
    w.flush().map_err(io)?;
    let manifest = Manifest {
        format_version: BLOB_VERSION,
        blob: BLOB_FILE.into(),
        classes: ds.classes,
        dates: ds.dates,
        channels: ds.channels,
        folds: ds.folds,
        fold_seed: ds.fold_seed,
        normalization: NORMALIZATION.into(),
        entries,
    };
    let mpath = dir.join(MANIFEST_FILE);
    std::fs::write(&mpath, manifest.to_text()).map_err(|e| DataError::io(&mpath, e))?;
    Ok(manifest)
}

struct RecordHeader {
    id: u64,
    label: usize,
    dates: usize,
    channels: usize,
    n: usize,
    geo: [f64; 4],
    days: Vec<u32>,
}

fn read_exact<R: Read>(
    r: &mut R,
    buf: &mut [u8],
    path: &Path,
    what: &str,
) -> Result<(), DataError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            DataError::format(path, format!("truncated blob while reading {what}"))
        } else {
            DataError::io(path, e)
        }
    })
}

fn read_preamble<R: Read>(r: &mut R, path: &Path) -> Result<(), DataError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b[..4], path, "magic")
        .map_err(|_| DataError::format(path, "not a PSET blob (bad magic bytes)"))?;
    if &b[..4] != BLOB_MAGIC {
        return Err(DataError::format(path, "not a PSET blob (bad magic bytes)"));
    }
    read_exact(r, &mut b[4..], path, "version")?;
    let version = u32::from_le_bytes(b[4..8].try_into().unwrap());
    if version != BLOB_VERSION {
        return Err(DataError::format(
            path,
            format!("unsupported PSET version {version}"),
        ));
    }
    Ok(())
}

fn read_header<R: Read>(r: &mut R, path: &Path) -> Result<RecordHeader, DataError> {
    let mut b = [0u8; 56];
    read_exact(r, &mut b, path, "record header")?;
    let u32_at = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().unwrap()) as usize;
    let dates = u32_at(12);
    let mut geo = [0.0; 4];
    for (i, g) in geo.iter_mut().enumerate() {
        *g = f64::from_le_bytes(b[24 + 8 * i..32 + 8 * i].try_into().unwrap());
    }
    let mut db = vec![0u8; 4 * dates];
    read_exact(r, &mut db, path, "day stamps")?;
    Ok(RecordHeader {
        id: u64::from_le_bytes(b[..8].try_into().unwrap()),
        label: u32_at(8),
        dates,
        channels: u32_at(16),
        n: u32_at(20),
        geo,
        days: db
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    })
}

fn check_header(
    h: &RecordHeader,
    e: &ManifestEntry,
    m: &Manifest,
    offset: u64,
    path: &Path,
) -> Result<(), DataError> {
    if offset != e.offset {
        return Err(DataError::format(
            path,
            format!(
                "parcel {} found at byte {offset}, manifest says {}",
                e.parcel_id, e.offset
            ),
        ));
    }
    if (h.id, h.label, h.n) != (e.parcel_id, e.label, e.pixels) {
        return Err(DataError::format(
            path,
            format!(
                "record at byte {offset} is parcel {} (label {}, {} pixels), manifest says {} ({}, {})",
                h.id, h.label, h.n, e.parcel_id, e.label, e.pixels
            ),
        ));
    }
    if (h.dates, h.channels) != (m.dates, m.channels) {
        return Err(DataError::format(
            path,
            format!(
                "parcel {} is {}x{}, manifest says {}x{}",
                h.id, h.dates, h.channels, m.dates, m.channels
            ),
        ));
    }
    Ok(())
}

fn check_end<R: Read>(r: &mut R, path: &Path) -> Result<(), DataError> {
    let mut extra = [0u8; 1];
    match r.read(&mut extra) {
        Ok(0) => Ok(()),
        Ok(_) => Err(DataError::format(
            path,
            "trailing bytes after the last listed record",
        )),
        Err(e) => Err(DataError::io(path, e)),
    }
}

/// Reads and validates every record.
pub fn read_dataset(path: &Path) -> Result<Dataset, DataError> {
    let (m, blob) = load_manifest(path)?;
    let file = File::open(&blob).map_err(|e| DataError::io(&blob, e))?;
    let mut r = BufReader::new(file);
    read_preamble(&mut r, &blob)?;
    let mut offset = 8u64;
    let mut records = Vec::with_capacity(m.entries.len());
    for e in &m.entries {
        let h = read_header(&mut r, &blob)?;
        check_header(&h, e, &m, offset, &blob)?;
        let mut raw = vec![0u8; 4 * h.dates * h.channels * h.n];
        read_exact(&mut r, &mut raw, &blob, "pixel values")?;
        let record = ParcelRecord {
            id: h.id,
            label: h.label,
            dates: h.dates,
            channels: h.channels,
            pixel_count: h.n,
            days: h.days,
            geo: GeometricFeatures::from_array(h.geo),
            pixels: raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        record.validate()?;
        offset += record_len(h.dates, h.channels, h.n);
        records.push(record);
    }
    check_end(&mut r, &blob)?;
    Ok(Dataset {
        classes: m.classes,
        dates: m.dates,
        channels: m.channels,
        folds: m.folds,
        fold_seed: m.fold_seed,
        blocks: m.entries.iter().map(|e| e.block).collect(),
        records,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FormatReport {
    pub manifest: PathBuf,
    pub blob: PathBuf,
    pub parcels: usize,
    pub classes: usize,
    pub dates: usize,
    pub channels: usize,
    pub total_pixels: u64,
    pub blob_bytes: u64,
    pub class_counts: Vec<usize>,
}

/// Validates manifest and blob structure, seeking past pixel payloads
/// instead of reading them.
pub fn format_check(path: &Path) -> Result<FormatReport, DataError> {
    let (m, blob) = load_manifest(path)?;
    let file = File::open(&blob).map_err(|e| DataError::io(&blob, e))?;
    let len = file.metadata().map_err(|e| DataError::io(&blob, e))?.len();
    let mut r = BufReader::new(file);
    read_preamble(&mut r, &blob)?;
    let mut offset = 8u64;
    let mut total = 0u64;
    let mut class_counts = vec![0; m.classes];
    for e in &m.entries {
        let h = read_header(&mut r, &blob)?;
        check_header(&h, e, &m, offset, &blob)?;
        let payload = (4 * h.dates * h.channels * h.n) as u64;
        offset += record_len(h.dates, h.channels, h.n);
        if offset > len {
            return Err(DataError::format(
                &blob,
                format!("truncated blob: parcel {} ends past the end of file", h.id),
            ));
        }
        r.seek(SeekFrom::Current(payload as i64))
            .map_err(|e| DataError::io(&blob, e))?;
        total += h.n as u64;
        class_counts[h.label] += 1;
    }
    if offset != len {
        return Err(DataError::format(
            &blob,
            format!(
                "{} trailing bytes after the last listed record",
                len - offset
            ),
        ));
    }
    Ok(FormatReport {
        manifest: manifest_path(path),
        blob,
        parcels: m.entries.len(),
        classes: m.classes,
        dates: m.dates,
        channels: m.channels,
        total_pixels: total,
        blob_bytes: len,
        class_counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        let records = (0..6u64)
            .map(|id| {
                let n = 1 + id as usize;
                ParcelRecord {
                    id: 100 + id,
                    label: (id % 2) as usize,
                    dates: 2,
                    channels: 3,
                    pixel_count: n,
                    days: vec![0, 7],
                    geo: GeometricFeatures::from_array([4.0, n as f64, 0.5, 4.0 / n as f64]),
                    pixels: (0..2 * 3 * n)
                        .map(|k| k as f32 * 0.37 - id as f32)
                        .collect(),
                }
            })
            .collect();
        Dataset {
            classes: 2,
            dates: 2,
            channels: 3,
            folds: 3,
            fold_seed: 1,
            blocks: vec![0, 1, 2, 0, 1, 2],
            records,
        }
    }

    #[test]
    fn round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny();
        let m = write_dataset(dir.path(), &ds).unwrap();
        assert_eq!(m.entries.len(), 6);
        assert_eq!(m.entries[0].offset, 8);
        assert_eq!(read_dataset(dir.path()).unwrap(), ds);
        let report = format_check(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(report.parcels, 6);
        assert_eq!(report.total_pixels, 21);
    }

    #[test]
    fn corrupt_magic_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &tiny()).unwrap();
        let blob = dir.path().join(BLOB_FILE);
        let mut bytes = std::fs::read(&blob).unwrap();
        bytes[0] = b'X';
        std::fs::write(&blob, bytes).unwrap();
        let msg = read_dataset(dir.path()).unwrap_err().to_string();
        assert!(
            msg.contains("dataset.pset") && msg.contains("magic"),
            "{msg}"
        );
        assert!(format_check(dir.path()).is_err());
    }

    #[test]
    fn truncation_and_offset_errors() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &tiny()).unwrap();
        let blob = dir.path().join(BLOB_FILE);
        let bytes = std::fs::read(&blob).unwrap();
        std::fs::write(&blob, &bytes[..bytes.len() - 3]).unwrap();
        assert!(read_dataset(dir.path())
            .unwrap_err()
            .to_string()
            .contains("truncated"));
        assert!(format_check(dir.path())
            .unwrap_err()
            .to_string()
            .contains("truncated"));
        std::fs::write(&blob, &bytes).unwrap();

        let mpath = dir.path().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&mpath).unwrap();
        let bad = text.replacen("105,1,6,", "105,1,6,1", 1);
        std::fs::write(&mpath, bad).unwrap();
        let e = read_dataset(dir.path()).unwrap_err().to_string();
        assert!(e.contains("manifest says"), "{e}");
    }

    #[test]
    fn manifest_rejects_unknown_keys_and_bad_offsets() {
        let m = write_dataset(tempfile::tempdir().unwrap().path(), &tiny()).unwrap();
        let text = m.to_text();
        let p = Path::new("m.txt");
        assert_eq!(Manifest::parse(&text, p).unwrap(), m);
        assert!(Manifest::parse(&text.replace("folds=3", "folds=3\nextra=1"), p).is_err());
        let swapped = text.replace(",8,0", ",99999,0");
        assert!(Manifest::parse(&swapped, p)
            .unwrap_err()
            .to_string()
            .contains("strictly increasing"));
        let twice = text.replacen("101,", "100,", 1);
        assert!(Manifest::parse(&twice, p)
            .unwrap_err()
            .to_string()
            .contains("duplicate parcel id 100"));
    }
}
