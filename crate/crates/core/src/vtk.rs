//! Legacy ASCII VTK output (unstructured triangles with point scalars) and
//! a reader for files of the same shape.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mesh::{FineMesh, MeshPair};
use crate::scalar::{to_f64, Real};
use crate::spectral::PatchSpectrum;

#[derive(Clone, Debug, PartialEq)]
pub struct VtkData {
    pub points: Vec<[f64; 2]>,
    pub triangles: Vec<[usize; 3]>,
    /// `(name, values)` per point field, in file order.
    pub fields: Vec<(String, Vec<f64>)>,
}

impl VtkData {
    pub fn field(&self, name: &str) -> Option<&[f64]> {
        self.fields.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }
}

pub fn render<T: Real>(mesh: &FineMesh<T>, title: &str, fields: &[(&str, &[T])]) -> Result<String> {
    let n = mesh.node_count();
    let mut s = String::new();
    let title = title.replace('\n', " ");
    writeln!(s, "# vtk DataFile Version 3.0").unwrap();
    writeln!(s, "{title}").unwrap();
    writeln!(s, "ASCII\nDATASET UNSTRUCTURED_GRID").unwrap();
    writeln!(s, "POINTS {n} double").unwrap();
    for p in &mesh.nodes {
        writeln!(s, "{:e} {:e} 0", to_f64(p[0]), to_f64(p[1])).unwrap();
    }
    let ne = mesh.element_count();
    writeln!(s, "CELLS {ne} {}", 4 * ne).unwrap();
    for t in &mesh.triangles {
        writeln!(s, "3 {} {} {}", t[0], t[1], t[2]).unwrap();
    }
    writeln!(s, "CELL_TYPES {ne}").unwrap();
    for _ in 0..ne {
        writeln!(s, "5").unwrap();
    }
    writeln!(s, "POINT_DATA {n}").unwrap();
    for (name, values) in fields {
        if values.len() != n {
            return Err(Error::DimensionMismatch {
                what: "vtk point field",
                expected: n,
                found: values.len(),
            });
        }
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::Unsupported(format!("invalid vtk field name {name:?}")));
        }
        writeln!(s, "SCALARS {name} double 1\nLOOKUP_TABLE default").unwrap();
        for &v in *values {
            writeln!(s, "{:e}", to_f64(v)).unwrap();
        }
    }
    Ok(s)
}

/// Writes `u1`, `u2`, `theta` of a state `[u₁ | u₂ | θ]`.
pub fn write_state<T: Real>(path: &Path, mesh: &FineMesh<T>, title: &str, w: &[T]) -> Result<()> {
    let n = mesh.node_count();
    if w.len() != 3 * n {
        return Err(Error::DimensionMismatch {
            what: "state",
            expected: 3 * n,
            found: w.len(),
        });
    }
    let text = render(
        mesh,
        title,
        &[("u1", &w[..n]), ("u2", &w[n..2 * n]), ("theta", &w[2 * n..])],
    )?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Mode `k` of a patch spectrum on the whole fine mesh, zero outside the
/// patch: fields `psi_u1`, `psi_u2`, `psi_theta`.
pub fn write_eigenfunction<T: Real>(
    path: &Path,
    pair: &MeshPair<T>,
    spectrum: &PatchSpectrum<T>,
    k: usize,
) -> Result<()> {
    let patch = &pair.coarse.patches[spectrum.patch];
    let nl = patch.nodes.len();
    if k >= spectrum.vectors.ncols() {
        return Err(Error::SpectrumMismatch(format!(
            "patch {} stores {} modes, mode {k} requested",
            spectrum.patch,
            spectrum.vectors.ncols()
        )));
    }
    let n = pair.fine.node_count();
    let mut f = vec![vec![T::zero(); n]; 3];
    for (c, field) in f.iter_mut().enumerate() {
        for (q, &p) in patch.nodes.iter().enumerate() {
            field[p] = spectrum.vectors[(c * nl + q, k)];
        }
    }
    let mu = spectrum.vector_eigenvalues[k];
    let title = format!("patch {} mode {} eigenvalue {:e} {:+e}i", spectrum.patch, k + 1, to_f64(mu.re), to_f64(mu.im));
    let text = render(
        &pair.fine,
        &title,
        &[("psi_u1", &f[0]), ("psi_u2", &f[1]), ("psi_theta", &f[2])],
    )?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn parse(text: &str) -> std::result::Result<VtkData, String> {
    let mut tokens = text
        .lines()
        .skip(2)
        .flat_map(str::split_whitespace)
        .peekable();
    let mut next = |what: &str| tokens.next().ok_or_else(|| format!("unexpected end of file reading {what}"));
    let expect = |got: &str, want: &str| {
        if got.eq_ignore_ascii_case(want) {
            Ok(())
        } else {
            Err(format!("expected {want}, found {got}"))
        }
    };
    let num = |s: &str| s.parse::<f64>().map_err(|e| format!("bad number {s:?}: {e}"));
    let int = |s: &str| s.parse::<usize>().map_err(|e| format!("bad integer {s:?}: {e}"));

    expect(next("format")?, "ASCII")?;
    expect(next("DATASET")?, "DATASET")?;
    expect(next("grid type")?, "UNSTRUCTURED_GRID")?;
    expect(next("POINTS")?, "POINTS")?;
    let np = int(next("point count")?)?;
    next("point type")?;
    let mut points = Vec::with_capacity(np);
    for _ in 0..np {
        let x = num(next("x")?)?;
        let y = num(next("y")?)?;
        num(next("z")?)?;
        points.push([x, y]);
    }
    expect(next("CELLS")?, "CELLS")?;
    let nc = int(next("cell count")?)?;
    next("cell list size")?;
    let mut triangles = Vec::with_capacity(nc);
    for _ in 0..nc {
        if int(next("cell size")?)? != 3 {
            return Err("only triangles are supported".into());
        }
        let t = [int(next("vertex")?)?, int(next("vertex")?)?, int(next("vertex")?)?];
        if t.iter().any(|&v| v >= np) {
            return Err(format!("cell vertex out of range in {t:?}"));
        }
        triangles.push(t);
    }
    expect(next("CELL_TYPES")?, "CELL_TYPES")?;
    int(next("cell type count")?)?;
    for _ in 0..nc {
        if int(next("cell type")?)? != 5 {
            return Err("only VTK_TRIANGLE cells are supported".into());
        }
    }
    let mut fields = Vec::new();
    if let Ok(tok) = next("POINT_DATA") {
        expect(tok, "POINT_DATA")?;
        let count = int(next("point data count")?)?;
        if count != np {
            return Err(format!("POINT_DATA {count} does not match {np} points"));
        }
        while let Ok(tok) = next("SCALARS") {
            expect(tok, "SCALARS")?;
            let name = next("field name")?.to_string();
            next("field type")?;
            let mut tok = next("LOOKUP_TABLE")?;
            if tok.parse::<usize>().is_ok() {
                tok = next("LOOKUP_TABLE")?;
            }
            expect(tok, "LOOKUP_TABLE")?;
            next("table name")?;
            let values = (0..np).map(|_| num(next("value")?)).collect::<std::result::Result<Vec<_>, _>>()?;
            fields.push((name, values));
        }
    }
    Ok(VtkData {
        points,
        triangles,
        fields,
    })
}

pub fn read(path: &Path) -> Result<VtkData> {
    let text = std::fs::read_to_string(path)?;
    parse(&text).map_err(|message| Error::Parse {
        file: path.to_path_buf(),
        message,
    })
}
