//! Legacy ASCII VTK output of high-order fields sampled on linear sub-cells.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::femcore::FeModel;
use crate::meshdof::{Mesh, MeshError};

#[derive(Debug, Error)]
pub enum VtkError {
    #[error("resolution must be at least 1")]
    Resolution,
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("field has {got} values, expected {expected}")]
    FieldLength { got: usize, expected: usize },
    #[error("cannot write {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, VtkError>;

pub const VTK_HEADER: &str = "# vtk DataFile Version 3.0";
pub const VTK_QUAD: u8 = 9;
pub const VTK_HEXAHEDRON: u8 = 12;

/// Sub-cell corner offsets in VTK vertex order.
const HEX_CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

/// Writes `mesh` subdivided `resolution` times per direction per element,
/// with `sample(e, ξ)` giving the displacement at reference point `ξ`.
/// Points are not shared between elements.
pub fn vtk_text(
    mesh: &Mesh,
    resolution: usize,
    title: &str,
    sample: impl Fn(usize, [f64; 3]) -> [f64; 3],
) -> Result<String> {
    if resolution == 0 {
        return Err(VtkError::Resolution);
    }
    let dim = mesh.dim();
    let m = resolution + 1;
    let per_elem = m.pow(dim as u32);
    let ne = mesh.num_elements();
    let mut points = Vec::with_capacity(ne * per_elem);
    let mut values = Vec::with_capacity(ne * per_elem);
    for e in 0..ne {
        for idx in 0..per_elem {
            let mut xi = [0.0; 3];
            let mut rem = idx;
            for x in xi.iter_mut().take(dim) {
                *x = -1.0 + 2.0 * (rem % m) as f64 / resolution as f64;
                rem /= m;
            }
            let (x, _, _) = mesh.isoparametric_map(e, xi)?;
            points.push(x);
            values.push(sample(e, xi));
        }
    }
    let corners: Vec<[usize; 3]> = if dim == 3 {
        HEX_CORNERS.to_vec()
    } else {
        HEX_CORNERS[..4].to_vec()
    };
    let cell_type = if dim == 3 { VTK_HEXAHEDRON } else { VTK_QUAD };
    let cells_per_elem = resolution.pow(dim as u32);
    let nc = ne * cells_per_elem;

    let mut s = String::new();
    let _ = writeln!(s, "{VTK_HEADER}");
    let _ = writeln!(s, "{}", title.lines().next().unwrap_or("").chars().take(255).collect::<String>());
    let _ = writeln!(s, "ASCII\nDATASET UNSTRUCTURED_GRID");
    let _ = writeln!(s, "POINTS {} double", points.len());
    for p in &points {
        let _ = writeln!(s, "{:.10e} {:.10e} {:.10e}", p[0], p[1], p[2]);
    }
    let _ = writeln!(s, "CELLS {nc} {}", nc * (corners.len() + 1));
    for e in 0..ne {
        for c in 0..cells_per_elem {
            let base = [c % resolution, (c / resolution) % resolution, c / (resolution * resolution)];
            let _ = write!(s, "{}", corners.len());
            for off in &corners {
                let mut id = 0;
                for d in (0..dim).rev() {
                    id = id * m + base[d] + off[d];
                }
                let _ = write!(s, " {}", e * per_elem + id);
            }
            s.push('\n');
        }
    }
    let _ = writeln!(s, "CELL_TYPES {nc}");
    for _ in 0..nc {
        let _ = writeln!(s, "{cell_type}");
    }
    let _ = writeln!(s, "POINT_DATA {}", points.len());
    let _ = writeln!(s, "VECTORS displacement double");
    for v in &values {
        let _ = writeln!(s, "{:.10e} {:.10e} {:.10e}", v[0], v[1], v[2]);
    }
    Ok(s)
}

/// VTK text of the displacement `u` of a finite element model.
pub fn model_vtk(model: &FeModel, u: &[f64], resolution: usize, title: &str) -> Result<String> {
    if u.len() != model.num_free() {
        return Err(VtkError::FieldLength {
            got: u.len(),
            expected: model.num_free(),
        });
    }
    vtk_text(model.mesh(), resolution, title, |e, xi| model.evaluate(u, e, xi))
}

/// Writes [`model_vtk`] to `path`.
pub fn write_vtk(model: &FeModel, u: &[f64], resolution: usize, path: &Path) -> Result<()> {
    let text = model_vtk(model, u, resolution, "sdmefem displacement")?;
    std::fs::write(path, text).map_err(|source| VtkError::Io {
        path: path.display().to_string(),
        source,
    })
}
