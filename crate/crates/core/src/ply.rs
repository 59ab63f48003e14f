//! Binary little-endian PLY storage for Gaussian mixtures.
//!
//! One `vertex` element per primitive with `float` properties
//! `x y z opacity scale_0..2 rot_0..3 f_dc_0..2 f_rest_*`. Higher-order
//! coefficients are stored channel-major (all red coefficients first). The
//! spherical-harmonics degree is recorded in a JSON sidecar next to the file
//! (`scene.ply` -> `scene.ply.json`); without a sidecar it is inferred from the
//! number of `f_rest_*` properties.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{FieldError, GaussianMixture, GaussianPrimitive};
use crate::scalar::Real;
use crate::sh;

#[derive(Debug, Error)]
pub enum PlyError {
    #[error("ply io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed ply header: {0}")]
    Header(String),
    #[error("missing vertex property `{0}`")]
    MissingProperty(String),
    #[error("ply body truncated")]
    Truncated,
    #[error("sidecar: {0}")]
    Sidecar(#[from] serde_json::Error),
    #[error(transparent)]
    Field(#[from] FieldError),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct PlySidecar {
    pub sh_degree: usize,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn property_names(degree: usize) -> Vec<String> {
    let mut names: Vec<String> = ["x", "y", "z", "opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    names.extend((0..3).map(|i| format!("f_dc_{i}")));
    let rest = sh::coeff_count(degree) - 1;
    names.extend((0..3 * rest).map(|i| format!("f_rest_{i}")));
    names
}

pub fn write_ply<T: Real, W: Write>(mix: &GaussianMixture<T>, mut w: W) -> Result<(), PlyError> {
    let names = property_names(mix.sh_degree);
    let mut header = format!("ply\nformat binary_little_endian 1.0\nelement vertex {}\n", mix.len());
    for n in &names {
        header.push_str(&format!("property float {n}\n"));
    }
    header.push_str("end_header\n");
    w.write_all(header.as_bytes())?;
    let rest = sh::coeff_count(mix.sh_degree) - 1;
    let mut buf = Vec::with_capacity(mix.len() * names.len() * 4);
    for p in &mix.primitives {
        let mut row: Vec<T> = Vec::with_capacity(names.len());
        row.extend(p.mean.iter());
        row.push(p.opacity);
        row.extend(p.scale.iter());
        row.extend(p.rotation.iter());
        row.extend(p.sh[0].iter());
        for ch in 0..3 {
            row.extend((1..=rest).map(|k| p.sh[k][ch]));
        }
        for v in row {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

struct Header {
    count: usize,
    props: Vec<(String, usize)>,
}

fn read_header<R: BufRead>(r: &mut R) -> Result<Header, PlyError> {
    let mut line = String::new();
    let mut next = |line: &mut String| -> Result<String, PlyError> {
        line.clear();
        if r.read_line(line)? == 0 {
            return Err(PlyError::Header("unexpected end of header".into()));
        }
        Ok(line.trim_end().to_string())
    };
    if next(&mut line)? != "ply" {
        return Err(PlyError::Header("missing `ply` magic".into()));
    }
    let mut count = None;
    let mut props = Vec::new();
    let mut in_vertex = false;
    loop {
        let l = next(&mut line)?;
        let toks: Vec<&str> = l.split_whitespace().collect();
        match toks.as_slice() {
            ["end_header"] => break,
            ["format", fmt, _] => {
                if *fmt != "binary_little_endian" {
                    return Err(PlyError::Header(format!("unsupported format {fmt}")));
                }
            }
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", name, n] => {
                in_vertex = *name == "vertex";
                if in_vertex {
                    count = Some(n.parse().map_err(|_| PlyError::Header(format!("bad count {n}")))?);
                } else if count.is_none() || (n.parse::<usize>() != Ok(0)) {
                    return Err(PlyError::Header(format!("unsupported element {name}")));
                }
            }
            ["property", ty, name] if in_vertex => {
                let size = match *ty {
                    "float" | "float32" => 4,
                    "double" | "float64" => 8,
                    other => return Err(PlyError::Header(format!("unsupported property type {other}"))),
                };
                props.push((name.to_string(), size));
            }
            _ => return Err(PlyError::Header(format!("unrecognized line `{l}`"))),
        }
    }
    let count = count.ok_or_else(|| PlyError::Header("no vertex element".into()))?;
    Ok(Header { count, props })
}

/// Reads a mixture. Quaternions are renormalized in the target precision
/// because 32-bit storage cannot hold a unit norm to 64-bit tolerance.
pub fn read_ply<T: Real, R: Read>(r: R, sh_degree: Option<usize>) -> Result<GaussianMixture<T>, PlyError> {
    let mut r = BufReader::new(r);
    let header = read_header(&mut r)?;
    let rest_count = header.props.iter().filter(|(n, _)| n.starts_with("f_rest_")).count();
    let degree = match sh_degree {
        Some(d) => d,
        None => (0..=sh::MAX_DEGREE)
            .find(|&d| 3 * (sh::coeff_count(d) - 1) == rest_count)
            .ok_or(FieldError::UnsupportedDegree(rest_count))?,
    };
    if degree > sh::MAX_DEGREE {
        return Err(FieldError::UnsupportedDegree(degree).into());
    }
    let names = property_names(degree);
    let mut offsets = Vec::with_capacity(names.len());
    let mut layout = Vec::with_capacity(header.props.len());
    let mut stride = 0;
    for (name, size) in &header.props {
        layout.push((name.clone(), stride, *size));
        stride += size;
    }
    for n in &names {
        let (_, off, size) = layout
            .iter()
            .find(|(name, _, _)| name == n)
            .ok_or_else(|| PlyError::MissingProperty(n.clone()))?;
        offsets.push((*off, *size));
    }
    let mut body = vec![0u8; header.count * stride];
    r.read_exact(&mut body).map_err(|_| PlyError::Truncated)?;
    let rest = sh::coeff_count(degree) - 1;
    let mut prims = Vec::with_capacity(header.count);
    for row in body.chunks_exact(stride.max(1)).take(header.count) {
        let v: Vec<T> = offsets
            .iter()
            .map(|&(off, size)| {
                let b = &row[off..off + size];
                let x = if size == 4 {
                    f32::from_le_bytes(b.try_into().unwrap()) as f64
                } else {
                    f64::from_le_bytes(b.try_into().unwrap())
                };
                T::lit(x)
            })
            .collect();
        let mut coeffs = vec![Vector3::new(v[11], v[12], v[13])];
        for k in 0..rest {
            coeffs.push(Vector3::new(v[14 + k], v[14 + rest + k], v[14 + 2 * rest + k]));
        }
        let q = Vector4::new(v[7], v[8], v[9], v[10]);
        let n = q.norm();
        prims.push(GaussianPrimitive {
            opacity: v[3],
            mean: Vector3::new(v[0], v[1], v[2]),
            scale: Vector3::new(v[4], v[5], v[6]),
            rotation: if n > T::zero() { q / n } else { q },
            sh: coeffs,
        });
    }
    Ok(GaussianMixture::new(prims, degree)?)
}

/// Writes `path` and its sidecar.
pub fn save_mixture<T: Real>(path: &Path, mix: &GaussianMixture<T>) -> Result<(), PlyError> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_ply(mix, &mut w)?;
    w.flush()?;
    let side = serde_json::to_string_pretty(&PlySidecar { sh_degree: mix.sh_degree })?;
    std::fs::write(sidecar_path(path), side)?;
    Ok(())
}

pub fn load_mixture<T: Real>(path: &Path) -> Result<GaussianMixture<T>, PlyError> {
    let side = sidecar_path(path);
    let degree = if side.exists() {
        let s: PlySidecar = serde_json::from_str(&std::fs::read_to_string(side)?)?;
        Some(s.sh_degree)
    } else {
        None
    };
    read_ply(std::fs::File::open(path)?, degree)
}
