//! Binary little-endian PLY in the usual 3DGS vertex layout.
//!
//! Values are stored the way splat viewers expect them: log scales, logit
//! opacity, and DC spherical-harmonic coefficients for color.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::Vector3;

use super::{logit, sigmoid, GaussianPrimitive};
use crate::error::{Error, Result};
use crate::geometry::Rotation;

pub const PLY_PROPERTIES: [&str; 14] = [
    "x", "y", "z", "rot_0", "rot_1", "rot_2", "rot_3", "scale_0", "scale_1", "scale_2", "opacity",
    "f_dc_0", "f_dc_1", "f_dc_2",
];

/// Zeroth-order real spherical harmonic.
const SH_C0: f64 = 0.282_094_791_773_878_14;

/// One vertex, channels in [`PLY_PROPERTIES`] order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlyRecord(pub [f32; 14]);

impl From<&GaussianPrimitive> for PlyRecord {
    fn from(g: &GaussianPrimitive) -> Self {
        let mut v = [0f32; 14];
        v[0] = g.mu.x as f32;
        v[1] = g.mu.y as f32;
        v[2] = g.mu.z as f32;
        for a in 0..4 {
            v[3 + a] = g.rotation.q[a] as f32;
        }
        for a in 0..3 {
            v[7 + a] = g.scale[a].ln() as f32;
        }
        v[10] = logit(g.opacity) as f32;
        for c in 0..3 {
            v[11 + c] = ((g.color[c] - 0.5) / SH_C0) as f32;
        }
        PlyRecord(v)
    }
}

impl From<&PlyRecord> for GaussianPrimitive {
    fn from(r: &PlyRecord) -> Self {
        let v = r.0.map(f64::from);
        GaussianPrimitive {
            mu: Vector3::new(v[0], v[1], v[2]),
            rotation: Rotation::normalized([v[3], v[4], v[5], v[6]]),
            scale: Vector3::new(v[7].exp(), v[8].exp(), v[9].exp()),
            opacity: sigmoid(v[10]),
            color: [
                (0.5 + SH_C0 * v[11]).clamp(0.0, 1.0),
                (0.5 + SH_C0 * v[12]).clamp(0.0, 1.0),
                (0.5 + SH_C0 * v[13]).clamp(0.0, 1.0),
            ],
        }
    }
}

pub fn write_ply_records<W: Write>(mut w: W, records: &[PlyRecord]) -> std::io::Result<()> {
    writeln!(w, "ply")?;
    writeln!(w, "format binary_little_endian 1.0")?;
    writeln!(w, "element vertex {}", records.len())?;
    for name in PLY_PROPERTIES {
        writeln!(w, "property float {name}")?;
    }
    writeln!(w, "end_header")?;
    for r in records {
        for v in r.0 {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

const KIND: &str = "PLY";

fn header_line<R: BufRead>(r: &mut R) -> Result<String> {
    let mut line = String::new();
    let n = r
        .read_line(&mut line)
        .map_err(|e| Error::format(KIND, format!("unreadable header: {e}")))?;
    if n == 0 {
        return Err(Error::format(KIND, "header ended before end_header"));
    }
    Ok(line.trim_end_matches(['\n', '\r']).to_string())
}

pub fn read_ply_records<R: BufRead>(mut r: R) -> Result<Vec<PlyRecord>> {
    if header_line(&mut r)? != "ply" {
        return Err(Error::format(KIND, "missing 'ply' magic"));
    }
    let mut count: Option<usize> = None;
    let mut order: Vec<usize> = Vec::new();
    let mut saw_format = false;
    loop {
        let line = header_line(&mut r)?;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            ["end_header"] => break,
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", "binary_little_endian", "1.0"] => saw_format = true,
            ["format", other, ..] => {
                return Err(Error::format(KIND, format!("unsupported format '{other}'")))
            }
            ["element", "vertex", n] => {
                if count.is_some() {
                    return Err(Error::format(KIND, "duplicate vertex element"));
                }
                count = Some(
                    n.parse()
                        .map_err(|_| Error::format(KIND, format!("bad vertex count '{n}'")))?,
                );
            }
            ["element", other, ..] => {
                return Err(Error::format(KIND, format!("unsupported element '{other}'")))
            }
            ["property", ty, name] => {
                if count.is_none() {
                    return Err(Error::format(KIND, "property before element"));
                }
                let idx = PLY_PROPERTIES
                    .iter()
                    .position(|p| p == name)
                    .ok_or_else(|| Error::format(KIND, format!("unknown property '{name}'")))?;
                if !matches!(*ty, "float" | "float32") {
                    return Err(Error::format(
                        KIND,
                        format!("property '{name}' has type '{ty}', expected float"),
                    ));
                }
                if order.contains(&idx) {
                    return Err(Error::format(KIND, format!("duplicate property '{name}'")));
                }
                order.push(idx);
            }
            _ => return Err(Error::format(KIND, format!("unexpected header line '{line}'"))),
        }
    }
    if !saw_format {
        return Err(Error::format(KIND, "missing format line"));
    }
    let count = count.ok_or_else(|| Error::format(KIND, "missing vertex element"))?;
    if let Some(missing) = PLY_PROPERTIES
        .iter()
        .enumerate()
        .find(|(i, _)| !order.contains(i))
    {
        return Err(Error::format(
            KIND,
            format!("missing property '{}'", missing.1),
        ));
    }

    let mut buf = vec![0u8; 14 * 4];
    let mut records = Vec::with_capacity(count);
    for k in 0..count {
        r.read_exact(&mut buf).map_err(|_| {
            Error::format(KIND, format!("truncated payload at vertex {k} of {count}"))
        })?;
        let mut v = [0f32; 14];
        for (slot, chunk) in order.iter().zip(buf.chunks_exact(4)) {
            v[*slot] = f32::from_le_bytes(chunk.try_into().unwrap());
        }
        records.push(PlyRecord(v));
    }
    Ok(records)
}

pub fn write_ply(path: impl AsRef<Path>, prims: &[GaussianPrimitive]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let records: Vec<PlyRecord> = prims.iter().map(PlyRecord::from).collect();
    write_ply_records(BufWriter::new(file), &records).map_err(|e| Error::io(path, e))
}

pub fn read_ply(path: impl AsRef<Path>) -> Result<Vec<GaussianPrimitive>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let records = read_ply_records(BufReader::new(file))?;
    Ok(records.iter().map(GaussianPrimitive::from).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_records(n: usize, seed: u64) -> Vec<PlyRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| PlyRecord(std::array::from_fn(|_| rng.random_range(-10.0f32..10.0))))
            .collect()
    }

    #[test]
    fn thousand_records_round_trip_bitwise() {
        let recs = random_records(1000, 5);
        let mut bytes = Vec::new();
        write_ply_records(&mut bytes, &recs).unwrap();
        let back = read_ply_records(&bytes[..]).unwrap();
        assert_eq!(back.len(), 1000);
        for (a, b) in recs.iter().zip(&back) {
            for (x, y) in a.0.iter().zip(&b.0) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn empty_list_is_valid() {
        let mut bytes = Vec::new();
        write_ply_records(&mut bytes, &[]).unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.contains("element vertex 0\n"));
        assert!(read_ply_records(&bytes[..]).unwrap().is_empty());
    }

    fn header_with(extra: &str) -> Vec<u8> {
        let mut h = String::from("ply\nformat binary_little_endian 1.0\nelement vertex 1\n");
        for p in PLY_PROPERTIES {
            h.push_str(&format!("property float {p}\n"));
        }
        h.push_str(extra);
        h.push_str("end_header\n");
        let mut bytes = h.into_bytes();
        bytes.extend(std::iter::repeat_n(0u8, 15 * 4));
        bytes
    }

    #[test]
    fn unknown_property_is_named() {
        let err = read_ply_records(&header_with("property float nx\n")[..]).unwrap_err();
        assert!(err.to_string().contains("'nx'"), "{err}");
    }

    #[test]
    fn truncated_payload_and_bad_header() {
        let mut bytes = Vec::new();
        write_ply_records(&mut bytes, &random_records(3, 1)).unwrap();
        bytes.truncate(bytes.len() - 5);
        let err = read_ply_records(&bytes[..]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");

        assert!(read_ply_records(&b"plx\n"[..]).is_err());
        assert!(read_ply_records(&b"ply\nformat ascii 1.0\nend_header\n"[..]).is_err());
        // Missing channels.
        let h = b"ply\nformat binary_little_endian 1.0\nelement vertex 0\nproperty float x\nend_header\n";
        let err = read_ply_records(&h[..]).unwrap_err();
        assert!(err.to_string().contains("missing property 'y'"), "{err}");
    }

    #[test]
    fn primitive_conversion_is_close() {
        let g = GaussianPrimitive {
            mu: Vector3::new(0.5, -1.25, 2.0),
            rotation: Rotation::from_axis_angle(Vector3::new(1.0, 0.0, 1.0), 0.3),
            scale: Vector3::new(0.01, 0.2, 0.05),
            opacity: 0.7,
            color: [0.2, 0.9, 0.5],
        };
        let back = GaussianPrimitive::from(&PlyRecord::from(&g));
        assert!((back.mu - g.mu).norm() < 1e-6);
        assert!((back.scale - g.scale).norm() < 1e-6);
        assert!((back.opacity - g.opacity).abs() < 1e-6);
        for c in 0..3 {
            assert!((back.color[c] - g.color[c]).abs() < 1e-6);
        }
    }
}
