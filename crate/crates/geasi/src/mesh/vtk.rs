//! Legacy ASCII VTK I/O: unstructured grids with point/cell data, and
//! polyline export for traced geodesics.

use super::SimplicialMesh;
use crate::error::{GeasiError, Result};
use crate::linalg::Point;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone)]
pub enum FieldData {
    Scalars(Vec<f64>),
    IntScalars(Vec<i64>),
    Vectors(Vec<Point>),
}

impl FieldData {
    pub fn len(&self) -> usize {
        match self {
            FieldData::Scalars(v) => v.len(),
            FieldData::IntScalars(v) => v.len(),
            FieldData::Vectors(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Default)]
pub struct VtkFields {
    pub point_data: Vec<(String, FieldData)>,
    pub cell_data: Vec<(String, FieldData)>,
}

pub fn write_vtk(path: &Path, mesh: &SimplicialMesh, fields: &VtkFields) -> Result<()> {
    for (name, data) in &fields.point_data {
        if data.len() != mesh.node_count() {
            return Err(GeasiError::Vtk(format!(
                "point data '{name}' has length {} but mesh has {} nodes",
                data.len(),
                mesh.node_count()
            )));
        }
    }
    for (name, data) in &fields.cell_data {
        if data.len() != mesh.cell_count() {
            return Err(GeasiError::Vtk(format!(
                "cell data '{name}' has length {} but mesh has {} cells",
                data.len(),
                mesh.cell_count()
            )));
        }
    }

    let mut out = String::new();
    out.push_str("# vtk DataFile Version 3.0\ngeasi mesh\nASCII\nDATASET UNSTRUCTURED_GRID\n");
    writeln!(out, "POINTS {} double", mesh.node_count()).unwrap();
    for p in &mesh.nodes {
        writeln!(out, "{:.17e} {:.17e} {:.17e}", p[0], p[1], p[2]).unwrap();
    }
    let nv = mesh.dim + 1;
    writeln!(out, "CELLS {} {}", mesh.cell_count(), mesh.cell_count() * (nv + 1)).unwrap();
    for c in 0..mesh.cell_count() {
        write!(out, "{nv}").unwrap();
        for &n in mesh.cell(c) {
            write!(out, " {n}").unwrap();
        }
        out.push('\n');
    }
    writeln!(out, "CELL_TYPES {}", mesh.cell_count()).unwrap();
    let vtk_type = if mesh.dim == 2 { 5 } else { 10 };
    for _ in 0..mesh.cell_count() {
        writeln!(out, "{vtk_type}").unwrap();
    }
    write_data_section(&mut out, "POINT_DATA", mesh.node_count(), &fields.point_data);
    write_data_section(&mut out, "CELL_DATA", mesh.cell_count(), &fields.cell_data);
    std::fs::write(path, out)?;
    Ok(())
}

fn write_data_section(out: &mut String, header: &str, n: usize, data: &[(String, FieldData)]) {
    if data.is_empty() {
        return;
    }
    writeln!(out, "{header} {n}").unwrap();
    for (name, field) in data {
        match field {
            FieldData::Scalars(values) => {
                writeln!(out, "SCALARS {name} double 1\nLOOKUP_TABLE default").unwrap();
                for v in values {
                    writeln!(out, "{v:.17e}").unwrap();
                }
            }
            FieldData::IntScalars(values) => {
                writeln!(out, "SCALARS {name} int 1\nLOOKUP_TABLE default").unwrap();
                for v in values {
                    writeln!(out, "{v}").unwrap();
                }
            }
            FieldData::Vectors(values) => {
                writeln!(out, "VECTORS {name} double").unwrap();
                for v in values {
                    writeln!(out, "{:.17e} {:.17e} {:.17e}", v[0], v[1], v[2]).unwrap();
                }
            }
        }
    }
}

struct Tokens {
    toks: Vec<String>,
    pos: usize,
}

impl Tokens {
    fn next(&mut self) -> Result<&str> {
        let t = self
            .toks
            .get(self.pos)
            .ok_or_else(|| GeasiError::Vtk("unexpected end of file".into()))?;
        self.pos += 1;
        Ok(t)
    }

    fn next_usize(&mut self) -> Result<usize> {
        let t = self.next()?;
        t.parse()
            .map_err(|_| GeasiError::Vtk(format!("expected integer, got '{t}'")))
    }

    fn next_f64(&mut self) -> Result<f64> {
        let t = self.next()?;
        t.parse()
            .map_err(|_| GeasiError::Vtk(format!("expected number, got '{t}'")))
    }

    fn peek(&self) -> Option<&str> {
        self.toks.get(self.pos).map(|s| s.as_str())
    }
}

pub fn read_vtk(path: &Path) -> Result<(SimplicialMesh, VtkFields)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    if !header.starts_with("# vtk") {
        return Err(GeasiError::Vtk("missing '# vtk' header".into()));
    }
    lines.next(); // title
    let fmt = lines.next().unwrap_or("").trim();
    if fmt != "ASCII" {
        return Err(GeasiError::Vtk(format!("unsupported format '{fmt}'")));
    }
    let dataset = lines.next().unwrap_or("").trim();
    if dataset != "DATASET UNSTRUCTURED_GRID" {
        return Err(GeasiError::Vtk(format!("unsupported dataset '{dataset}'")));
    }
    let mut t = Tokens {
        toks: lines
            .flat_map(|l| l.split_whitespace().map(|s| s.to_string()))
            .collect(),
        pos: 0,
    };

    if t.next()? != "POINTS" {
        return Err(GeasiError::Vtk("expected POINTS".into()));
    }
    let npoints = t.next_usize()?;
    t.next()?; // data type
    let mut nodes = Vec::with_capacity(npoints);
    for _ in 0..npoints {
        nodes.push([t.next_f64()?, t.next_f64()?, t.next_f64()?]);
    }

    if t.next()? != "CELLS" {
        return Err(GeasiError::Vtk("expected CELLS".into()));
    }
    let ncells = t.next_usize()?;
    t.next_usize()?; // total size
    let mut arity: Option<usize> = None;
    let mut cells_flat = Vec::new();
    for _ in 0..ncells {
        let nv = t.next_usize()?;
        match arity {
            None => arity = Some(nv),
            Some(a) if a != nv => {
                return Err(GeasiError::Vtk("mixed cell arities are not supported".into()))
            }
            _ => {}
        }
        for _ in 0..nv {
            cells_flat.push(t.next_usize()?);
        }
    }
    let arity = arity.ok_or_else(|| GeasiError::Vtk("empty CELLS section".into()))?;
    let dim = match arity {
        3 => 2,
        4 => 3,
        other => {
            return Err(GeasiError::Vtk(format!(
                "unsupported cell arity {other} (expected 3 or 4)"
            )))
        }
    };

    if t.next()? != "CELL_TYPES" {
        return Err(GeasiError::Vtk("expected CELL_TYPES".into()));
    }
    let ntypes = t.next_usize()?;
    let expected_type = if dim == 2 { 5 } else { 10 };
    for _ in 0..ntypes {
        if t.next_usize()? != expected_type {
            return Err(GeasiError::Vtk("inconsistent CELL_TYPES".into()));
        }
    }

    let mesh = SimplicialMesh::new(dim, nodes, cells_flat)
        .map_err(|e| GeasiError::Vtk(format!("invalid mesh in file: {e}")))?;

    let mut fields = VtkFields::default();
    while let Some(section) = t.peek().map(|s| s.to_string()) {
        let expected = match section.as_str() {
            "POINT_DATA" => mesh.node_count(),
            "CELL_DATA" => mesh.cell_count(),
            other => return Err(GeasiError::Vtk(format!("unexpected section '{other}'"))),
        };
        t.next()?;
        let n = t.next_usize()?;
        if n != expected {
            return Err(GeasiError::Vtk(format!(
                "{section} length {n} does not match mesh ({expected})"
            )));
        }
        let target = if section == "POINT_DATA" {
            &mut fields.point_data
        } else {
            &mut fields.cell_data
        };
        while matches!(t.peek(), Some("SCALARS") | Some("VECTORS")) {
            let kind = t.next()?.to_string();
            let name = t.next()?.to_string();
            let dtype = t.next()?.to_string();
            if kind == "SCALARS" {
                t.next_usize()?; // components
                if t.next()? != "LOOKUP_TABLE" {
                    return Err(GeasiError::Vtk("expected LOOKUP_TABLE".into()));
                }
                t.next()?; // table name
                if dtype == "int" || dtype == "long" {
                    let mut values = Vec::with_capacity(n);
                    for _ in 0..n {
                        let tok = t.next()?;
                        values.push(tok.parse::<i64>().map_err(|_| {
                            GeasiError::Vtk(format!("expected integer, got '{tok}'"))
                        })?);
                    }
                    target.push((name, FieldData::IntScalars(values)));
                } else {
                    let mut values = Vec::with_capacity(n);
                    for _ in 0..n {
                        values.push(t.next_f64()?);
                    }
                    target.push((name, FieldData::Scalars(values)));
                }
            } else {
                let mut values = Vec::with_capacity(n);
                for _ in 0..n {
                    values.push([t.next_f64()?, t.next_f64()?, t.next_f64()?]);
                }
                target.push((name, FieldData::Vectors(values)));
            }
        }
    }
    Ok((mesh, fields))
}

/// Writes a set of polylines (e.g. traced geodesics) as VTK POLYDATA.
pub fn write_vtk_polylines(path: &Path, lines: &[Vec<Point>]) -> Result<()> {
    let total: usize = lines.iter().map(|l| l.len()).sum();
    let mut out = String::new();
    out.push_str("# vtk DataFile Version 3.0\ngeasi geodesics\nASCII\nDATASET POLYDATA\n");
    writeln!(out, "POINTS {total} double").unwrap();
    for line in lines {
        for p in line {
            writeln!(out, "{:.17e} {:.17e} {:.17e}", p[0], p[1], p[2]).unwrap();
        }
    }
    let nlines = lines.iter().filter(|l| l.len() >= 2).count();
    let size: usize = lines
        .iter()
        .filter(|l| l.len() >= 2)
        .map(|l| l.len() + 1)
        .sum();
    writeln!(out, "LINES {nlines} {size}").unwrap();
    let mut offset = 0;
    for line in lines {
        if line.len() >= 2 {
            write!(out, "{}", line.len()).unwrap();
            for k in 0..line.len() {
                write!(out, " {}", offset + k).unwrap();
            }
            out.push('\n');
        }
        offset += line.len();
    }
    std::fs::write(path, out)?;
    Ok(())
}
