//! Field files, legacy VTK export and the convergence history.
//!
//! Field layout, all little-endian: magic `SRCF`, `u32` version, `u32`
//! component count, `u64` nx, `u64` ny, `u32` level, `f64` lx, `f64` ly,
//! then the nodal values of each component in node order (x fastest).

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{ScalarField, StructuredGrid, VectorField};
use crate::relax::NewtonRecord;
use crate::shapeopt::ShapeRecord;

const MAGIC: &[u8; 4] = b"SRCF";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 8 + 8 + 4 + 8 + 8;

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn encode(grid: &StructuredGrid, components: &[&ScalarField]) -> Vec<u8> {
    let n = grid.num_nodes();
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * n * components.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(components.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(grid.nx() as u64).to_le_bytes());
    buf.extend_from_slice(&(grid.ny() as u64).to_le_bytes());
    buf.extend_from_slice(&grid.level().to_le_bytes());
    buf.extend_from_slice(&grid.lx().to_le_bytes());
    buf.extend_from_slice(&grid.ly().to_le_bytes());
    for c in components {
        for v in c.coeffs() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_scalar(path: &Path, field: &ScalarField) -> Result<()> {
    write_bytes(path, &encode(field.grid(), &[field]))
}

pub fn write_vector(path: &Path, field: &VectorField) -> Result<()> {
    let [x, y] = field.components();
    write_bytes(path, &encode(field.grid(), &[x, y]))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let out = self.bytes[self.pos..self.pos + N].try_into().expect("length checked");
        self.pos += N;
        out
    }
}

fn decode(path: &Path, bytes: &[u8]) -> Result<Vec<ScalarField>> {
    let bad = |reason: String| Error::Format {
        path: path.display().to_string(),
        reason,
    };
    if bytes.len() < HEADER_LEN {
        return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
    }
    let mut c = Cursor { bytes, pos: 0 };
    if &c.take::<4>() != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = u32::from_le_bytes(c.take());
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let ncomp = u32::from_le_bytes(c.take()) as usize;
    let nx = u64::from_le_bytes(c.take()) as usize;
    let ny = u64::from_le_bytes(c.take()) as usize;
    let level = u32::from_le_bytes(c.take());
    let lx = f64::from_le_bytes(c.take());
    let ly = f64::from_le_bytes(c.take());
    let grid = StructuredGrid::new(lx, ly, nx, ny)
        .map_err(|e| bad(e.to_string()))?
        .with_level(level);
    let n = grid.num_nodes();
    let expected = HEADER_LEN + 8 * n * ncomp;
    if bytes.len() != expected {
        return Err(bad(format!("expected {expected} bytes, found {}", bytes.len())));
    }
    (0..ncomp)
        .map(|_| {
            let coeffs = (0..n).map(|_| f64::from_le_bytes(c.take())).collect();
            ScalarField::new(grid, coeffs)
        })
        .collect()
}

fn read_all(path: &Path) -> Result<Vec<ScalarField>> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(path, &bytes)
}

pub fn read_scalar(path: &Path) -> Result<ScalarField> {
    let mut comps = read_all(path)?;
    if comps.len() != 1 {
        return Err(Error::Format {
            path: path.display().to_string(),
            reason: format!("expected a scalar field, found {} components", comps.len()),
        });
    }
    Ok(comps.remove(0))
}

pub fn read_vector(path: &Path) -> Result<VectorField> {
    let comps = read_all(path)?;
    match <[ScalarField; 2]>::try_from(comps) {
        Ok([x, y]) => VectorField::new(x, y),
        Err(c) => Err(Error::Format {
            path: path.display().to_string(),
            reason: format!("expected a vector field, found {} components", c.len()),
        }),
    }
}

/// Named nodal data for a VTK file.
pub enum VtkData<'a> {
    Scalar(&'a str, &'a ScalarField),
    Vector(&'a str, &'a VectorField),
}

/// Legacy ASCII structured-points export of fields sharing one grid.
pub fn write_vtk(path: &Path, grid: &StructuredGrid, data: &[VtkData<'_>]) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(
        w,
        "# vtk DataFile Version 3.0\nsrcid fields\nASCII\nDATASET STRUCTURED_POINTS"
    )
    .map_err(io)?;
    writeln!(w, "DIMENSIONS {} {} 1", grid.nx() + 1, grid.ny() + 1).map_err(io)?;
    writeln!(w, "ORIGIN 0 0 0\nSPACING {:e} {:e} 1", grid.hx(), grid.hy()).map_err(io)?;
    writeln!(w, "POINT_DATA {}", grid.num_nodes()).map_err(io)?;
    for d in data {
        match d {
            VtkData::Scalar(name, f) => {
                if !f.grid().same_lattice(grid) {
                    return Err(Error::invalid(format!("field {name} lives on another grid")));
                }
                writeln!(w, "SCALARS {name} double 1\nLOOKUP_TABLE default").map_err(io)?;
                for v in f.coeffs() {
                    writeln!(w, "{v:e}").map_err(io)?;
                }
            }
            VtkData::Vector(name, f) => {
                if !f.grid().same_lattice(grid) {
                    return Err(Error::invalid(format!("field {name} lives on another grid")));
                }
                writeln!(w, "VECTORS {name} double").map_err(io)?;
                for n in 0..grid.num_nodes() {
                    let [x, y] = f.node_value(n);
                    writeln!(w, "{x:e} {y:e} 0").map_err(io)?;
                }
            }
        }
    }
    w.flush().map_err(io)
}

/// One row of the convergence CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistoryRow {
    pub stage: &'static str,
    pub iter: usize,
    pub objective: f64,
    pub residual_or_psi_norm: f64,
    pub inner_iters: usize,
    pub components: usize,
    pub pde_solves: usize,
}

impl From<&NewtonRecord> for HistoryRow {
    fn from(r: &NewtonRecord) -> Self {
        Self {
            stage: "relax",
            iter: r.iteration,
            objective: r.objective,
            residual_or_psi_norm: r.step_norm,
            inner_iters: r.minres_iterations,
            components: 0,
            pde_solves: r.pde_solves,
        }
    }
}

impl From<&ShapeRecord> for HistoryRow {
    fn from(r: &ShapeRecord) -> Self {
        Self {
            stage: "shape",
            iter: r.iteration,
            objective: r.objective,
            residual_or_psi_norm: r.psi_norm,
            inner_iters: 0,
            components: r.components,
            pde_solves: r.pde_solves,
        }
    }
}

pub fn write_history(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}
