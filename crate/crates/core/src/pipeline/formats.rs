//! On-disk formats: MetaImage subset, annotation and candidate CSVs, JSON and JSON lines.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::geometry::VolumeGeometry;
use crate::phantom::GroundTruthNodule;
use crate::tracks::Candidate3D;
use crate::volume::{Volume, VoxelData};
use crate::{Error, Result};

pub const ANNOTATIONS_HEADER: &str = "seriesuid,coordX,coordY,coordZ,diameter_mm";
pub const CANDIDATES_HEADER: &str = "seriesuid,coordX,coordY,coordZ,probability";
pub const CANDIDATES_HEADER_WITH_DIAMETER: &str = "seriesuid,coordX,coordY,coordZ,probability,diameter_mm";

const MHD_KEYS: [&str; 7] = [
    "ObjectType",
    "NDims",
    "DimSize",
    "ElementSpacing",
    "Offset",
    "ElementType",
    "ElementDataFile",
];

fn join3<T: std::fmt::Display>(v: &[T; 3]) -> String {
    format!("{} {} {}", v[0], v[1], v[2])
}

/// Writes `<path>` (header) and a sibling `.raw` payload.
pub fn write_mhd(path: &Path, volume: &Volume) -> Result<()> {
    let raw_path = path.with_extension("raw");
    let raw_name = raw_path
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::invalid(format!("bad volume path {}", path.display())))?
        .to_string();
    let (etype, bytes): (&str, Vec<u8>) = match &volume.data {
        VoxelData::I16(v) => ("MET_SHORT", v.iter().flat_map(|x| x.to_le_bytes()).collect()),
        VoxelData::F32(v) => ("MET_FLOAT", v.iter().flat_map(|x| x.to_le_bytes()).collect()),
    };
    let g = &volume.geom;
    let header = format!(
        "ObjectType = Image\nNDims = 3\nDimSize = {}\nElementSpacing = {}\nOffset = {}\nElementType = {etype}\nElementDataFile = {raw_name}\n",
        join3(&g.dims),
        join3(&g.spacing),
        join3(&g.origin),
    );
    fs::write(path, header).map_err(|e| Error::io(path, e))?;
    fs::write(&raw_path, bytes).map_err(|e| Error::io(&raw_path, e))
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn parse_triple<T: std::str::FromStr>(path: &Path, line: usize, key: &str, v: &str) -> Result<[T; 3]> {
    let parts: Vec<&str> = v.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(parse_err(path, line, format!("{key} needs 3 values, got {}", parts.len())));
    }
    let mut out = Vec::with_capacity(3);
    for p in parts {
        out.push(
            p.parse::<T>()
                .map_err(|_| parse_err(path, line, format!("{key}: cannot parse {p:?}")))?,
        );
    }
    out.try_into()
        .map_err(|_| parse_err(path, line, format!("{key} needs 3 values")))
}

/// Reads a header written by [`write_mhd`] or any header restricted to the same keys.
pub fn read_mhd(path: &Path) -> Result<Volume> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut values: [Option<(usize, String)>; 7] = Default::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let l = raw.trim();
        if l.is_empty() {
            continue;
        }
        let (k, v) = l
            .split_once('=')
            .ok_or_else(|| parse_err(path, line, format!("expected `key = value`, got {l:?}")))?;
        let (k, v) = (k.trim(), v.trim());
        let slot = MHD_KEYS
            .iter()
            .position(|&known| known == k)
            .ok_or_else(|| parse_err(path, line, format!("unsupported header key `{k}`")))?;
        if values[slot].is_some() {
            return Err(parse_err(path, line, format!("duplicate header key `{k}`")));
        }
        values[slot] = Some((line, v.to_string()));
    }
    let get = |i: usize| -> Result<(usize, &str)> {
        values[i]
            .as_ref()
            .map(|(l, v)| (*l, v.as_str()))
            .ok_or(Error::MissingKey {
                path: path.to_path_buf(),
                key: MHD_KEYS[i],
            })
    };

    let (l, v) = get(0)?;
    if v != "Image" {
        return Err(parse_err(path, l, format!("ObjectType must be Image, got {v:?}")));
    }
    let (l, v) = get(1)?;
    if v != "3" {
        return Err(parse_err(path, l, format!("NDims must be 3, got {v:?}")));
    }
    let (l, v) = get(2)?;
    let dims: [usize; 3] = parse_triple(path, l, "DimSize", v)?;
    let (l, v) = get(3)?;
    let spacing: [f64; 3] = parse_triple(path, l, "ElementSpacing", v)?;
    let (l, v) = get(4)?;
    let origin: [f64; 3] = parse_triple(path, l, "Offset", v)?;
    let (l, etype) = get(5)?;
    let width = match etype {
        "MET_SHORT" => 2,
        "MET_FLOAT" => 4,
        _ => return Err(parse_err(path, l, format!("unsupported ElementType {etype:?}"))),
    };
    let (_, file) = get(6)?;
    let geom = VolumeGeometry::new(dims, spacing, origin)?;

    let raw_path: PathBuf = path.parent().unwrap_or(Path::new(".")).join(file);
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let expected = (geom.n_voxels() * width) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::PayloadSize {
            path: raw_path,
            expected,
            actual: bytes.len() as u64,
        });
    }
    let data = if width == 2 {
        VoxelData::I16(bytes.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]])).collect())
    } else {
        VoxelData::F32(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        )
    };
    Volume::new(geom, data)
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(false).from_reader(f))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    parse_err(path, line, e.to_string())
}

fn float_field(path: &Path, line: usize, rec: &csv::StringRecord, i: usize, name: &str) -> Result<f64> {
    let s = rec.get(i).unwrap_or("");
    s.trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| parse_err(path, line, format!("row {}: {name} is not a finite number: {s:?}", line - 1)))
}

/// Reads records after checking the header against the accepted variants;
/// returns the index of the matched variant and the records with their line numbers.
fn read_table(path: &Path, headers: &[&str]) -> Result<(usize, Vec<(usize, csv::StringRecord)>)> {
    let mut rdr = csv_reader(path)?;
    let mut records = rdr.records();
    let header = match records.next() {
        Some(r) => r.map_err(|e| csv_error(path, e))?,
        None => return Err(parse_err(path, 1, "empty file, expected a header")),
    };
    let joined = header.iter().collect::<Vec<_>>().join(",");
    let variant = headers.iter().position(|h| *h == joined).ok_or_else(|| {
        parse_err(path, 1, format!("unexpected header {joined:?}, expected {:?}", headers[0]))
    })?;
    let mut out = Vec::new();
    for r in records {
        let r = r.map_err(|e| csv_error(path, e))?;
        let line = r.position().map_or(0, |p| p.line() as usize);
        out.push((line, r));
    }
    Ok((variant, out))
}

fn write_rows(path: &Path, header: &str, rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(f));
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    w.write_record(header.split(',')).map_err(io)?;
    for r in rows {
        w.write_record(&r).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_annotations(path: &Path, truths: &[GroundTruthNodule]) -> Result<()> {
    write_rows(
        path,
        ANNOTATIONS_HEADER,
        truths.iter().map(|t| {
            vec![
                t.series_id.clone(),
                t.x.to_string(),
                t.y.to_string(),
                t.z.to_string(),
                t.diameter.to_string(),
            ]
        }),
    )
}

pub fn read_annotations(path: &Path) -> Result<Vec<GroundTruthNodule>> {
    let (_, rows) = read_table(path, &[ANNOTATIONS_HEADER])?;
    rows.iter()
        .map(|(line, r)| {
            let t = GroundTruthNodule {
                series_id: r.get(0).unwrap_or("").to_string(),
                x: float_field(path, *line, r, 1, "coordX")?,
                y: float_field(path, *line, r, 2, "coordY")?,
                z: float_field(path, *line, r, 3, "coordZ")?,
                diameter: float_field(path, *line, r, 4, "diameter_mm")?,
            };
            if !(t.diameter > 0.0) {
                return Err(parse_err(path, *line, format!("row {}: diameter_mm must be > 0", line - 1)));
            }
            Ok(t)
        })
        .collect()
}

/// Always writes the diameter sidecar column.
pub fn write_candidates(path: &Path, cands: &[Candidate3D]) -> Result<()> {
    write_rows(
        path,
        CANDIDATES_HEADER_WITH_DIAMETER,
        cands.iter().map(|c| {
            vec![
                c.series_id.clone(),
                c.x.to_string(),
                c.y.to_string(),
                c.z.to_string(),
                c.s.to_string(),
                c.d.to_string(),
            ]
        }),
    )
}

/// Accepts both header variants; without the sidecar column `d` is 0 (unknown).
pub fn read_candidates(path: &Path) -> Result<Vec<Candidate3D>> {
    let (variant, rows) = read_table(path, &[CANDIDATES_HEADER, CANDIDATES_HEADER_WITH_DIAMETER])?;
    rows.iter()
        .map(|(line, r)| {
            let s = float_field(path, *line, r, 4, "probability")?;
            if !(0.0..=1.0).contains(&s) {
                return Err(parse_err(path, *line, format!("row {}: probability {s} outside [0, 1]", line - 1)));
            }
            let d = if variant == 1 {
                float_field(path, *line, r, 5, "diameter_mm")?
            } else {
                0.0
            };
            Ok(Candidate3D {
                series_id: r.get(0).unwrap_or("").to_string(),
                x: float_field(path, *line, r, 1, "coordX")?,
                y: float_field(path, *line, r, 2, "coordY")?,
                z: float_field(path, *line, r, 3, "coordZ")?,
                d,
                s,
            })
        })
        .collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| parse_err(path, e.line(), e.to_string()))
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line_text = line.map_err(|e| Error::io(path, e))?;
        if line_text.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line_text).map_err(|e| parse_err(path, i + 1, e.to_string()))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_written_header_parses() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.mhd");
        fs::write(
            &p,
            "ObjectType = Image\nNDims = 3\nDimSize = 2 2 2\nElementSpacing = 0.7 0.7 2.5\nOffset = -100 -100 -50\nElementType = MET_SHORT\nElementDataFile = v.raw\n",
        )
        .unwrap();
        let vals: Vec<i16> = (0..8).map(|i| i * 100 - 300).collect();
        fs::write(dir.path().join("v.raw"), vals.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>()).unwrap();
        let v = read_mhd(&p).unwrap();
        assert_eq!(v.geom.dims, [2, 2, 2]);
        assert_eq!(v.geom.spacing, [0.7, 0.7, 2.5]);
        assert_eq!(v.geom.origin, [-100.0, -100.0, -50.0]);
        assert_eq!(v.data, VoxelData::I16(vals));
        assert_eq!(v.value(1, 1, 1), 400.0);
    }

    #[test]
    fn missing_and_unknown_keys_are_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.mhd");
        fs::write(&p, "ObjectType = Image\nNDims = 3\nElementSpacing = 1 1 1\nOffset = 0 0 0\nElementType = MET_FLOAT\nElementDataFile = v.raw\n").unwrap();
        let e = read_mhd(&p).unwrap_err();
        assert!(matches!(e, Error::MissingKey { key: "DimSize", .. }), "{e}");
        fs::write(&p, "ObjectType = Image\nNDims = 3\nCompressedData = True\n").unwrap();
        let e = read_mhd(&p).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, .. }) && e.to_string().contains("CompressedData"), "{e}");
    }

    #[test]
    fn payload_size_mismatch_reports_counts() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.mhd");
        fs::write(&p, "ObjectType = Image\nNDims = 3\nDimSize = 2 2 2\nElementSpacing = 1 1 1\nOffset = 0 0 0\nElementType = MET_FLOAT\nElementDataFile = v.raw\n").unwrap();
        fs::write(dir.path().join("v.raw"), [0u8; 30]).unwrap();
        match read_mhd(&p).unwrap_err() {
            Error::PayloadSize { expected, actual, .. } => assert_eq!((expected, actual), (32, 30)),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn annotation_fixture_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        fs::write(&p, "seriesuid,coordX,coordY,coordZ,diameter_mm\ns1,1.5,-2,3.25,6\ns1,0,0,0,4.5\ns2,-10,20,-30,12\n").unwrap();
        let a = read_annotations(&p).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a[0], GroundTruthNodule { series_id: "s1".into(), x: 1.5, y: -2.0, z: 3.25, diameter: 6.0 });
        assert_eq!(a[2].series_id, "s2");
        fs::write(&p, "seriesuid,coordX,coordY,coordZ,diameter_mm\ns1,1.5,abc,3.25,6\n").unwrap();
        let e = read_annotations(&p).unwrap_err().to_string();
        assert!(e.contains("line 2") && e.contains("row 1") && e.contains("coordY"), "{e}");
        fs::write(&p, "uid,x,y,z,d\n").unwrap();
        let e = read_annotations(&p).unwrap_err().to_string();
        assert!(e.contains("uid,x,y,z,d"), "{e}");
    }

    #[test]
    fn candidate_probability_is_validated() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        fs::write(&p, "seriesuid,coordX,coordY,coordZ,probability\ns1,0,0,0,1.2\n").unwrap();
        assert!(read_candidates(&p).unwrap_err().to_string().contains("outside [0, 1]"));
        fs::write(&p, "seriesuid,coordX,coordY,coordZ,probability\ns1,0.1,0.2,0.3,0.9\n").unwrap();
        let c = read_candidates(&p).unwrap();
        assert_eq!((c[0].x, c[0].s, c[0].d), (0.1, 0.9, 0.0));
    }

    #[test]
    fn awkward_floats_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        let cands = vec![Candidate3D {
            series_id: "s,1".into(),
            x: 0.1 + 0.2,
            y: -1e-300,
            z: 123456789.123456789,
            d: f64::MIN_POSITIVE,
            s: 1.0 / 3.0,
        }];
        write_candidates(&p, &cands).unwrap();
        assert_eq!(read_candidates(&p).unwrap(), cands);
    }
}
