//! Structured mesh generation, the mesh text format, isoparametric geometry
//! and continuous global numbering of modal coefficients.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use thiserror::Error;

use crate::basis1d::Basis1D;
use crate::tensorelem::{ref_boundary_facets, ref_edges, ref_faces, EntityClass, TensorElement};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("element {elem} is inverted or degenerate at {xi:?} (detJ = {det_j})")]
    Inverted {
        elem: usize,
        xi: [f64; 3],
        det_j: f64,
    },
    #[error("unknown boundary tag '{0}'")]
    UnknownTag(String),
    #[error("boundary facet {facet:?} of tag '{tag}' is not an element facet")]
    DanglingFacet { tag: String, facet: Vec<usize> },
    #[error("mesh is not conforming: {0}")]
    NonConforming(String),
    #[error("the basis has no reflection symmetry but element {elem} needs a flipped {entity}")]
    NoReversal { elem: usize, entity: &'static str },
    #[error("invalid mesh: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, MeshError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    dim: usize,
    coords: Vec<[f64; 3]>,
    elements: Vec<Vec<usize>>,
    /// Tagged boundary facets as vertex lists (faces in 3D, edges in 2D).
    boundary: BTreeMap<String, Vec<Vec<usize>>>,
    edges: Vec<[usize; 2]>,
    faces: Vec<[usize; 4]>,
    elem_edges: Vec<Vec<usize>>,
    elem_faces: Vec<Vec<usize>>,
    /// Tag → (element, local facet) pairs.
    tagged: BTreeMap<String, Vec<(usize, usize)>>,
}

fn sorted<const N: usize>(mut a: [usize; N]) -> [usize; N] {
    a.sort_unstable();
    a
}

impl Mesh {
    /// Builds a mesh from raw tables and derives edge, face and tag tables.
    pub fn new(
        dim: usize,
        coords: Vec<[f64; 3]>,
        elements: Vec<Vec<usize>>,
        boundary: BTreeMap<String, Vec<Vec<usize>>>,
    ) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(MeshError::Invalid(format!("dimension {dim} unsupported")));
        }
        let nv = 1usize << dim;
        for (e, conn) in elements.iter().enumerate() {
            if conn.len() != nv {
                return Err(MeshError::Invalid(format!(
                    "element {e} has {} vertices, expected {nv}",
                    conn.len()
                )));
            }
            if let Some(v) = conn.iter().find(|&&v| v >= coords.len()) {
                return Err(MeshError::Invalid(format!(
                    "element {e} references missing vertex {v}"
                )));
            }
            let mut s = conn.clone();
            s.sort_unstable();
            s.dedup();
            if s.len() != nv {
                return Err(MeshError::Invalid(format!("element {e} repeats a vertex")));
            }
        }
        if coords.iter().any(|c| c.iter().any(|x| !x.is_finite())) {
            return Err(MeshError::Invalid("non-finite coordinate".into()));
        }
        let redges = ref_edges(dim);
        let mut edge_ids: HashMap<[usize; 2], usize> = HashMap::new();
        let mut edges = Vec::new();
        let mut elem_edges = Vec::with_capacity(elements.len());
        for conn in &elements {
            let mut ids = Vec::with_capacity(redges.len());
            for re in &redges {
                let key = sorted([conn[re.ends[0]], conn[re.ends[1]]]);
                let id = *edge_ids.entry(key).or_insert_with(|| {
                    edges.push(key);
                    edges.len() - 1
                });
                ids.push(id);
            }
            elem_edges.push(ids);
        }
        let mut faces = Vec::new();
        let mut elem_faces = Vec::with_capacity(elements.len());
        let mut face_cycles: Vec<[usize; 4]> = Vec::new();
        if dim == 3 {
            let rfaces = ref_faces(3);
            let mut face_ids: HashMap<[usize; 4], usize> = HashMap::new();
            for (e, conn) in elements.iter().enumerate() {
                let mut ids = Vec::with_capacity(6);
                for rf in &rfaces {
                    let cyc = rf.corners.map(|c| conn[c]);
                    let key = sorted(cyc);
                    let id = match face_ids.get(&key) {
                        Some(&id) => {
                            if !same_cycle(&face_cycles[id], &cyc) {
                                return Err(MeshError::NonConforming(format!(
                                    "element {e} shares vertices {key:?} with a face of different connectivity"
                                )));
                            }
                            id
                        }
                        None => {
                            faces.push(key);
                            face_cycles.push(cyc);
                            face_ids.insert(key, faces.len() - 1);
                            faces.len() - 1
                        }
                    };
                    ids.push(id);
                }
                elem_faces.push(ids);
            }
            // A face shared by more than two elements is non-manifold.
            let mut count = vec![0usize; faces.len()];
            for ids in &elem_faces {
                for &f in ids {
                    count[f] += 1;
                }
            }
            if let Some(f) = count.iter().position(|&c| c > 2) {
                return Err(MeshError::NonConforming(format!(
                    "face {:?} belongs to more than two elements",
                    faces[f]
                )));
            }
        } else {
            for _ in &elements {
                elem_faces.push(Vec::new());
            }
        }
        let facet_lists = ref_boundary_facets(dim);
        let mut facet_owner: HashMap<Vec<usize>, (usize, usize)> = HashMap::new();
        for (e, conn) in elements.iter().enumerate() {
            for (lf, f) in facet_lists.iter().enumerate() {
                let mut key: Vec<usize> = f.iter().map(|&c| conn[c]).collect();
                key.sort_unstable();
                facet_owner.entry(key).or_insert((e, lf));
            }
        }
        let mut tagged = BTreeMap::new();
        for (tag, list) in &boundary {
            let mut pairs = Vec::with_capacity(list.len());
            for facet in list {
                let mut key = facet.clone();
                key.sort_unstable();
                match facet_owner.get(&key) {
                    Some(&p) => pairs.push(p),
                    None => {
                        return Err(MeshError::DanglingFacet {
                            tag: tag.clone(),
                            facet: facet.clone(),
                        })
                    }
                }
            }
            tagged.insert(tag.clone(), pairs);
        }
        Ok(Mesh {
            dim,
            coords,
            elements,
            boundary,
            edges,
            faces,
            elem_edges,
            elem_faces,
            tagged,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn coords(&self) -> &[[f64; 3]] {
        &self.coords
    }

    pub fn elements(&self) -> &[Vec<usize>] {
        &self.elements
    }

    pub fn num_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn num_vertices(&self) -> usize {
        self.coords.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn edges(&self) -> &[[usize; 2]] {
        &self.edges
    }

    pub fn elem_edges(&self, e: usize) -> &[usize] {
        &self.elem_edges[e]
    }

    pub fn elem_faces(&self, e: usize) -> &[usize] {
        &self.elem_faces[e]
    }

    pub fn boundary(&self) -> &BTreeMap<String, Vec<Vec<usize>>> {
        &self.boundary
    }

    pub fn tags(&self) -> impl Iterator<Item = &str> {
        self.tagged.keys().map(|s| s.as_str())
    }

    /// `(element, local facet)` pairs carrying `tag`.
    pub fn tagged_facets(&self, tag: &str) -> Result<&[(usize, usize)]> {
        self.tagged
            .get(tag)
            .map(|v| v.as_slice())
            .ok_or_else(|| MeshError::UnknownTag(tag.to_string()))
    }

    /// Smallest edge length over all elements.
    pub fn min_edge_length(&self) -> f64 {
        self.edges
            .iter()
            .map(|[a, b]| dist(self.coords[*a], self.coords[*b]))
            .fold(f64::INFINITY, f64::min)
    }

    /// Multilinear geometry: material point, Jacobian `∂X/∂ξ` (row = X
    /// component, column = ξ direction) and its determinant.
    pub fn isoparametric_map(&self, e: usize, xi: [f64; 3]) -> Result<([f64; 3], [[f64; 3]; 3], f64)> {
        let conn = &self.elements[e];
        let mut x = [0.0; 3];
        let mut j = [[0.0; 3]; 3];
        for (v, &gid) in conn.iter().enumerate() {
            let bits = crate::tensorelem::bits_of_vertex(v);
            let mut n = 1.0;
            let mut dn = [1.0; 3];
            for d in 0..self.dim {
                let s = if bits[d] == 1 { 1.0 } else { -1.0 };
                let f = 0.5 * (1.0 + s * xi[d]);
                n *= f;
                for (k, dk) in dn.iter_mut().enumerate().take(self.dim) {
                    *dk *= if k == d { 0.5 * s } else { f };
                }
            }
            let xv = self.coords[gid];
            for a in 0..3 {
                x[a] += n * xv[a];
                for d in 0..self.dim {
                    j[a][d] += dn[d] * xv[a];
                }
            }
        }
        let det_j = if self.dim == 3 {
            det3(&j)
        } else {
            j[0][0] * j[1][1] - j[0][1] * j[1][0]
        };
        if !(det_j > 0.0) {
            return Err(MeshError::Inverted { elem: e, xi, det_j });
        }
        Ok((x, j, det_j))
    }

    /// Reference coordinates of material point `x` in element `e`, by Newton
    /// iteration on the multilinear map.
    pub fn locate(&self, e: usize, x: [f64; 3]) -> Result<[f64; 3]> {
        let mut xi = [0.0; 3];
        for _ in 0..50 {
            let (xc, j, _) = self.isoparametric_map(e, xi)?;
            let r = [x[0] - xc[0], x[1] - xc[1], x[2] - xc[2]];
            let dxi = if self.dim == 3 {
                solve3(&j, r)
            } else {
                let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
                [
                    (j[1][1] * r[0] - j[0][1] * r[1]) / det,
                    (-j[1][0] * r[0] + j[0][0] * r[1]) / det,
                    0.0,
                ]
            };
            for d in 0..3 {
                xi[d] += dxi[d];
            }
            if dxi.iter().map(|v| v.abs()).fold(0.0, f64::max) < 1e-15 {
                break;
            }
        }
        Ok(xi)
    }

    /// Serializes to the mesh text format.
    pub fn to_text(&self) -> String {
        let mut s = String::from("VERTICES\n");
        for (i, c) in self.coords.iter().enumerate() {
            let _ = writeln!(s, "{i} {:?} {:?} {:?}", c[0], c[1], c[2]);
        }
        s.push_str("ELEMENTS\n");
        for (i, conn) in self.elements.iter().enumerate() {
            let _ = write!(s, "{i}");
            for v in conn {
                let _ = write!(s, " {v}");
            }
            s.push('\n');
        }
        s.push_str("BOUNDARY\n");
        for (tag, list) in &self.boundary {
            for f in list {
                let _ = write!(s, "{tag}");
                for v in f {
                    let _ = write!(s, " {v}");
                }
                s.push('\n');
            }
        }
        s
    }
}

fn same_cycle(a: &[usize; 4], b: &[usize; 4]) -> bool {
    (0..4).any(|s| {
        (0..4).all(|k| a[k] == b[(k + s) % 4]) || (0..4).all(|k| a[k] == b[(4 + s - k) % 4])
    })
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

pub(crate) fn det3(j: &[[f64; 3]; 3]) -> f64 {
    j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1]) - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
        + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0])
}

fn solve3(j: &[[f64; 3]; 3], r: [f64; 3]) -> [f64; 3] {
    let d = det3(j);
    let mut out = [0.0; 3];
    for c in 0..3 {
        let mut m = *j;
        for row in 0..3 {
            m[row][c] = r[row];
        }
        out[c] = det3(&m) / d;
    }
    out
}

/// Axis-aligned box of `n[0]×n[1]×n[2]` hexahedra with boundary tags
/// `xmin`, `xmax`, `ymin`, `ymax`, `zmin`, `zmax`.
pub fn gen_box_mesh(n: [usize; 3], lengths: [f64; 3], origin: [f64; 3]) -> Result<Mesh> {
    if n.iter().any(|&k| k == 0) {
        return Err(MeshError::Invalid("subdivisions must be >= 1".into()));
    }
    let vid = |i: usize, j: usize, k: usize| i + (n[0] + 1) * (j + (n[1] + 1) * k);
    let mut coords = Vec::new();
    for k in 0..=n[2] {
        for j in 0..=n[1] {
            for i in 0..=n[0] {
                coords.push([
                    origin[0] + lengths[0] * i as f64 / n[0] as f64,
                    origin[1] + lengths[1] * j as f64 / n[1] as f64,
                    origin[2] + lengths[2] * k as f64 / n[2] as f64,
                ]);
            }
        }
    }
    let mut elements = Vec::new();
    for k in 0..n[2] {
        for j in 0..n[1] {
            for i in 0..n[0] {
                elements.push(vec![
                    vid(i, j, k),
                    vid(i + 1, j, k),
                    vid(i + 1, j + 1, k),
                    vid(i, j + 1, k),
                    vid(i, j, k + 1),
                    vid(i + 1, j, k + 1),
                    vid(i + 1, j + 1, k + 1),
                    vid(i, j + 1, k + 1),
                ]);
            }
        }
    }
    let mut boundary: BTreeMap<String, Vec<Vec<usize>>> = BTreeMap::new();
    let names = [["xmin", "xmax"], ["ymin", "ymax"], ["zmin", "zmax"]];
    for axis in 0..3 {
        let (a1, a2) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for side in 0..2 {
            let fixed = if side == 0 { 0 } else { n[axis] };
            let mut list = Vec::new();
            for t in 0..n[a2] {
                for s in 0..n[a1] {
                    let corner = |ds: usize, dt: usize| {
                        let mut ijk = [0usize; 3];
                        ijk[axis] = fixed;
                        ijk[a1] = s + ds;
                        ijk[a2] = t + dt;
                        vid(ijk[0], ijk[1], ijk[2])
                    };
                    list.push(vec![corner(0, 0), corner(1, 0), corner(1, 1), corner(0, 1)]);
                }
            }
            boundary.insert(names[axis][side].to_string(), list);
        }
    }
    Mesh::new(3, coords, elements, boundary)
}

/// Cube `[0, length]³` split into `n³` hexahedra.
pub fn gen_cube_mesh(n: usize, length: f64) -> Result<Mesh> {
    gen_box_mesh([n; 3], [length; 3], [0.0; 3])
}

/// Rectangle of `n[0]×n[1]` quadrilaterals with edge tags `xmin`..`ymax`.
pub fn gen_rect_mesh(n: [usize; 2], lengths: [f64; 2]) -> Result<Mesh> {
    if n.iter().any(|&k| k == 0) {
        return Err(MeshError::Invalid("subdivisions must be >= 1".into()));
    }
    let vid = |i: usize, j: usize| i + (n[0] + 1) * j;
    let mut coords = Vec::new();
    for j in 0..=n[1] {
        for i in 0..=n[0] {
            coords.push([
                lengths[0] * i as f64 / n[0] as f64,
                lengths[1] * j as f64 / n[1] as f64,
                0.0,
            ]);
        }
    }
    let mut elements = Vec::new();
    for j in 0..n[1] {
        for i in 0..n[0] {
            elements.push(vec![vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)]);
        }
    }
    let mut boundary = BTreeMap::new();
    boundary.insert("xmin".into(), (0..n[1]).map(|j| vec![vid(0, j), vid(0, j + 1)]).collect());
    boundary.insert("xmax".into(), (0..n[1]).map(|j| vec![vid(n[0], j), vid(n[0], j + 1)]).collect());
    boundary.insert("ymin".into(), (0..n[0]).map(|i| vec![vid(i, 0), vid(i + 1, 0)]).collect());
    boundary.insert("ymax".into(), (0..n[0]).map(|i| vec![vid(i, n[1]), vid(i + 1, n[1])]).collect());
    Mesh::new(2, coords, elements, boundary)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Section {
    None,
    Vertices,
    Elements,
    Boundary,
}

/// Parses the mesh text format:
///
/// ```text
/// # comment
/// VERTICES
/// <id> <x> <y> <z>
/// ELEMENTS
/// <id> <v1> ... <v8>        (4 ids for quadrilaterals)
/// BOUNDARY
/// <tag> <v1> ... <v4>       (2 ids for quadrilateral meshes)
/// ```
///
/// Ids are arbitrary unique non-negative integers; elements refer to vertex
/// ids and boundary facets to vertex ids.
pub fn parse_mesh(text: &str) -> Result<Mesh> {
    let mut section = Section::None;
    let mut vertex_index: HashMap<u64, usize> = HashMap::new();
    let mut coords = Vec::new();
    let mut element_ids: HashMap<u64, usize> = HashMap::new();
    let mut elements: Vec<Vec<usize>> = Vec::new();
    let mut raw_boundary: Vec<(usize, String, Vec<u64>)> = Vec::new();
    let mut dim: Option<usize> = None;
    let err = |line: usize, msg: String| MeshError::Parse { line, msg };
    for (ln, raw) in text.lines().enumerate() {
        let line_no = ln + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        match line {
            "VERTICES" => {
                section = Section::Vertices;
                continue;
            }
            "ELEMENTS" => {
                section = Section::Elements;
                continue;
            }
            "BOUNDARY" => {
                section = Section::Boundary;
                continue;
            }
            _ => {}
        }
        let tok: Vec<&str> = line.split_whitespace().collect();
        let int = |s: &str| -> Result<u64> {
            s.parse::<u64>()
                .map_err(|_| err(line_no, format!("expected a non-negative integer, got '{s}'")))
        };
        match section {
            Section::None => return Err(err(line_no, format!("data before any section header: '{line}'"))),
            Section::Vertices => {
                if tok.len() != 4 {
                    return Err(err(line_no, format!("vertex line needs 4 fields, got {}", tok.len())));
                }
                let id = int(tok[0])?;
                let mut c = [0.0; 3];
                for d in 0..3 {
                    c[d] = tok[d + 1]
                        .parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| err(line_no, format!("bad coordinate '{}'", tok[d + 1])))?;
                }
                if vertex_index.insert(id, coords.len()).is_some() {
                    return Err(err(line_no, format!("duplicate vertex id {id}")));
                }
                coords.push(c);
            }
            Section::Elements => {
                let nv = tok.len().saturating_sub(1);
                let d = match nv {
                    8 => 3,
                    4 => 2,
                    _ => return Err(err(line_no, format!("element needs 4 or 8 vertex ids, got {nv}"))),
                };
                if *dim.get_or_insert(d) != d {
                    return Err(err(line_no, "mixed quadrilateral and hexahedral elements".into()));
                }
                let id = int(tok[0])?;
                let mut conn = Vec::with_capacity(nv);
                for t in &tok[1..] {
                    let v = int(t)?;
                    let idx = *vertex_index
                        .get(&v)
                        .ok_or_else(|| err(line_no, format!("unknown vertex id {v}")))?;
                    conn.push(idx);
                }
                if element_ids.insert(id, elements.len()).is_some() {
                    return Err(err(line_no, format!("duplicate element id {id}")));
                }
                elements.push(conn);
            }
            Section::Boundary => {
                if tok.len() < 2 {
                    return Err(err(line_no, "boundary line needs a tag and vertex ids".into()));
                }
                let ids = tok[1..].iter().map(|t| int(t)).collect::<Result<Vec<_>>>()?;
                raw_boundary.push((line_no, tok[0].to_string(), ids));
            }
        }
    }
    let dim = dim.ok_or_else(|| err(text.lines().count().max(1), "no elements".into()))?;
    let facet_len = if dim == 3 { 4 } else { 2 };
    let mut boundary: BTreeMap<String, Vec<Vec<usize>>> = BTreeMap::new();
    for (line_no, tag, ids) in raw_boundary {
        if ids.len() != facet_len {
            return Err(err(
                line_no,
                format!("boundary facet needs {facet_len} vertex ids, got {}", ids.len()),
            ));
        }
        let facet = ids
            .iter()
            .map(|v| {
                vertex_index
                    .get(v)
                    .copied()
                    .ok_or_else(|| err(line_no, format!("unknown vertex id {v}")))
            })
            .collect::<Result<Vec<_>>>()?;
        boundary.entry(tag).or_default().push(facet);
    }
    Mesh::new(dim, coords, elements, boundary)
}

/// Homogeneous Dirichlet condition on the components flagged in `components`
/// over every facet carrying `tag`.
#[derive(Debug, Clone, PartialEq)]
pub struct DirichletSpec {
    pub tag: String,
    pub components: [bool; 3],
}

impl DirichletSpec {
    pub fn all(tag: &str) -> Self {
        DirichletSpec {
            tag: tag.to_string(),
            components: [true; 3],
        }
    }
}

/// Global numbering of vector-valued modal coefficients.
///
/// Free DOFs are ordered with all non-body (boundary) modes first, components
/// interleaved per scalar mode, followed by each element's body modes as a
/// contiguous block. Element-local DOF vectors are component-major:
/// local index `c·n + i` for component `c` and local function `i`.
#[derive(Debug, Clone)]
pub struct DofMap {
    ncomp: usize,
    n_local: usize,
    num_scalar_modes: usize,
    num_free: usize,
    num_boundary_free: usize,
    /// Per element: global scalar mode and sign of each local function.
    elem_modes: Vec<Vec<(usize, f64)>>,
    /// Per scalar mode and component: free DOF index.
    mode_dofs: Vec<[Option<usize>; 3]>,
    body_ranges: Vec<std::ops::Range<usize>>,
}

impl DofMap {
    pub fn build(mesh: &Mesh, elem: &TensorElement, dirichlet: &[DirichletSpec]) -> Result<Self> {
        Self::build_with_components(mesh, elem, dirichlet, mesh.dim())
    }

    pub fn build_with_components(
        mesh: &Mesh,
        elem: &TensorElement,
        dirichlet: &[DirichletSpec],
        ncomp: usize,
    ) -> Result<Self> {
        if elem.dim() != mesh.dim() {
            return Err(MeshError::Invalid(format!(
                "{}D element on a {}D mesh",
                elem.dim(),
                mesh.dim()
            )));
        }
        if !(1..=3).contains(&ncomp) {
            return Err(MeshError::Invalid(format!("{ncomp} components unsupported")));
        }
        let dim = mesh.dim();
        let p = elem.order();
        let pm1 = p.saturating_sub(1);
        let basis: &Basis1D = elem.basis();
        let reversal = basis.reversal();
        let n_v = mesh.num_vertices();
        let n_e = mesh.num_edges();
        let n_f = if dim == 3 { mesh.num_faces() } else { 0 };
        let edge_base = n_v;
        let face_base = edge_base + n_e * pm1;
        let body_base = face_base + n_f * pm1 * pm1;
        let body_per_elem = pm1.pow(dim as u32);
        let num_scalar_modes = body_base + mesh.num_elements() * body_per_elem;
        let redges = ref_edges(dim);
        let rfaces = ref_faces(dim);

        let mut elem_modes = Vec::with_capacity(mesh.num_elements());
        for (e, conn) in mesh.elements().iter().enumerate() {
            let mut modes = Vec::with_capacity(elem.len());
            for i in 0..elem.len() {
                let entry = match elem.entity(i) {
                    EntityClass::Vertex(v) => (conn[v], 1.0),
                    EntityClass::Edge { edge, mode } => {
                        let re = redges[edge];
                        let forward = conn[re.ends[0]] < conn[re.ends[1]];
                        let (gm, s) = if forward {
                            (mode, 1.0)
                        } else {
                            let r = reversal.as_ref().ok_or(MeshError::NoReversal { elem: e, entity: "edge" })?;
                            r[mode]
                        };
                        (edge_base + mesh.elem_edges(e)[edge] * pm1 + (gm - 2), s)
                    }
                    EntityClass::Face { face, modes: (m, n) } if dim == 3 => {
                        let rf = rfaces[face];
                        let gids = rf.corners.map(|c| conn[c]);
                        let (gs, gt, sign) = face_orientation(&gids, m, n, reversal.as_deref())
                            .ok_or(MeshError::NoReversal { elem: e, entity: "face" })?;
                        let f = mesh.elem_faces(e)[face];
                        (face_base + f * pm1 * pm1 + (gs - 2) + pm1 * (gt - 2), sign)
                    }
                    EntityClass::Face { modes: (m, n), .. } => {
                        (body_base + e * body_per_elem + (m - 2) + pm1 * (n - 2), 1.0)
                    }
                    EntityClass::Body((a, b, c)) => (
                        body_base + e * body_per_elem + (a - 2) + pm1 * ((b - 2) + pm1 * (c - 2)),
                        1.0,
                    ),
                };
                modes.push(entry);
            }
            elem_modes.push(modes);
        }

        let mut fixed = vec![[false; 3]; num_scalar_modes];
        let facets = ref_boundary_facets(dim);
        for spec in dirichlet {
            for &(e, lf) in mesh.tagged_facets(&spec.tag)? {
                let facet = &facets[lf];
                for (i, &(g, _)) in elem_modes[e].iter().enumerate() {
                    if on_facet(elem, i, facet) {
                        for c in 0..ncomp {
                            fixed[g][c] |= spec.components[c];
                        }
                    }
                }
            }
        }

        let mut mode_dofs = vec![[None; 3]; num_scalar_modes];
        let mut next = 0;
        for g in 0..body_base {
            for c in 0..ncomp {
                if !fixed[g][c] {
                    mode_dofs[g][c] = Some(next);
                    next += 1;
                }
            }
        }
        let num_boundary_free = next;
        let mut body_ranges = Vec::with_capacity(mesh.num_elements());
        for e in 0..mesh.num_elements() {
            let start = next;
            for g in body_base + e * body_per_elem..body_base + (e + 1) * body_per_elem {
                for c in 0..ncomp {
                    mode_dofs[g][c] = Some(next);
                    next += 1;
                }
            }
            body_ranges.push(start..next);
        }
        Ok(DofMap {
            ncomp,
            n_local: elem.len(),
            num_scalar_modes,
            num_free: next,
            num_boundary_free,
            elem_modes,
            mode_dofs,
            body_ranges,
        })
    }

    pub fn ncomp(&self) -> usize {
        self.ncomp
    }

    pub fn num_free(&self) -> usize {
        self.num_free
    }

    pub fn num_scalar_modes(&self) -> usize {
        self.num_scalar_modes
    }

    /// Number of free DOFs not owned by an element interior.
    pub fn num_boundary_free(&self) -> usize {
        self.num_boundary_free
    }

    pub fn body_range(&self, e: usize) -> std::ops::Range<usize> {
        self.body_ranges[e].clone()
    }

    pub fn num_elements(&self) -> usize {
        self.elem_modes.len()
    }

    pub fn elem_modes(&self, e: usize) -> &[(usize, f64)] {
        &self.elem_modes[e]
    }

    pub fn mode_dof(&self, mode: usize, comp: usize) -> Option<usize> {
        self.mode_dofs[mode][comp]
    }

    /// Free DOF index and sign of each element-local DOF (component-major).
    pub fn local_dofs(&self, e: usize) -> Vec<(Option<usize>, f64)> {
        let mut out = Vec::with_capacity(self.ncomp * self.n_local);
        for c in 0..self.ncomp {
            for &(g, s) in &self.elem_modes[e] {
                out.push((self.mode_dofs[g][c], s));
            }
        }
        out
    }

    /// Element coefficient vector (component-major) from a global free vector.
    pub fn gather(&self, e: usize, global: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.ncomp * self.n_local);
        for c in 0..self.ncomp {
            for &(g, s) in &self.elem_modes[e] {
                out.push(self.mode_dofs[g][c].map_or(0.0, |d| s * global[d]));
            }
        }
        out
    }

    /// Adds an element vector into a global free vector.
    pub fn scatter_add(&self, e: usize, local: &[f64], global: &mut [f64]) {
        let n = self.n_local;
        for c in 0..self.ncomp {
            for (i, &(g, s)) in self.elem_modes[e].iter().enumerate() {
                if let Some(d) = self.mode_dofs[g][c] {
                    global[d] += s * local[c * n + i];
                }
            }
        }
    }

    /// Element coefficients of a scalar field given per global scalar mode.
    pub fn gather_scalar(&self, e: usize, modes: &[f64]) -> Vec<f64> {
        self.elem_modes[e].iter().map(|&(g, s)| s * modes[g]).collect()
    }
}

/// Whether local function `i` has nonzero trace on the facet with the given
/// reference corners.
fn on_facet(elem: &TensorElement, i: usize, facet: &[usize]) -> bool {
    let dim = elem.dim();
    match elem.entity(i) {
        EntityClass::Vertex(v) => facet.contains(&v),
        EntityClass::Edge { edge, .. } => {
            let re = ref_edges(dim)[edge];
            facet.contains(&re.ends[0]) && facet.contains(&re.ends[1])
        }
        EntityClass::Face { face, .. } if dim == 3 => {
            let rf = ref_faces(3)[face];
            rf.corners.iter().all(|c| facet.contains(c))
        }
        _ => false,
    }
}

/// Maps a local face mode `(m, n)` (along the face's first and second
/// in-plane axes, corners `gids` in local cycle order) to the global face
/// mode `(σ, τ)` and sign. The global frame has its origin at the corner
/// with the smallest id and its σ axis towards the smaller-id neighbour.
fn face_orientation(
    gids: &[usize; 4],
    m: usize,
    n: usize,
    reversal: Option<&[(usize, f64)]>,
) -> Option<(usize, usize, f64)> {
    // Local in-plane coordinates of the cycle corners.
    const ST: [(f64, f64); 4] = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)];
    let k0 = (0..4).min_by_key(|&k| gids[k]).unwrap();
    let prev = (k0 + 3) % 4;
    let next = (k0 + 1) % 4;
    let sigma_corner = if gids[prev] < gids[next] { prev } else { next };
    let (s0, t0) = ST[k0];
    // σ runs along the local axis in which the origin and σ-neighbour differ.
    let sigma_along_s = ST[sigma_corner].0 != s0;
    let flip = |idx: usize, origin: f64| -> Option<(usize, f64)> {
        if origin < 0.0 {
            Some((idx, 1.0))
        } else {
            reversal.map(|r| r[idx])
        }
    };
    let (ms, ss) = flip(m, s0)?;
    let (nt, st) = flip(n, t0)?;
    let sign = ss * st;
    if sigma_along_s {
        Some((ms, nt, sign))
    } else {
        Some((nt, ms, sign))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis1d::{basis, BasisKind, BasisTag};
    use rand::{Rng, SeedableRng};
    use std::sync::Arc;

    fn elem(dim: usize, p: usize, tag: BasisTag) -> TensorElement {
        TensorElement::new(dim, Arc::new(basis(p, BasisKind::new(tag)).unwrap()))
    }

    #[test]
    fn cube_mesh_counts() {
        let m = gen_cube_mesh(2, 1.0).unwrap();
        assert_eq!((m.num_elements(), m.num_vertices()), (8, 27));
        assert_eq!((m.num_edges(), m.num_faces()), (54, 36));
        let m = gen_cube_mesh(1, 1.0).unwrap();
        assert_eq!((m.num_elements(), m.num_edges(), m.num_faces()), (1, 12, 6));
        assert_eq!(gen_cube_mesh(3, 1.0).unwrap().num_elements(), 27);
        assert_eq!(m.tags().count(), 6);
    }

    #[test]
    fn dof_counts() {
        let m = gen_cube_mesh(2, 1.0).unwrap();
        let d = DofMap::build(&m, &elem(3, 2, BasisTag::ModalJacobi), &[DirichletSpec::all("xmin")]).unwrap();
        assert_eq!(d.num_free(), 300);
        let d = DofMap::build(&m, &elem(3, 4, BasisTag::ModalJacobi), &[]).unwrap();
        assert_eq!(d.num_scalar_modes(), 729);
        assert_eq!(d.num_scalar_modes(), 27 + 54 * 3 + 36 * 9 + 8 * 27);
        let m1 = gen_cube_mesh(1, 1.0).unwrap();
        let d = DofMap::build(&m1, &elem(3, 1, BasisTag::ModalJacobi), &[]).unwrap();
        assert_eq!(d.num_free(), 24);
    }

    #[test]
    fn dof_count_identity() {
        for n in 1..=3 {
            let m = gen_cube_mesh(n, 1.0).unwrap();
            for p in 1..=5 {
                let d = DofMap::build(&m, &elem(3, p, BasisTag::ModalJacobi), &[]).unwrap();
                let expect = (n * p + 1).pow(3);
                assert_eq!(d.num_scalar_modes(), expect);
                assert_eq!(d.num_free(), 3 * expect);
                let body: usize = (0..m.num_elements()).map(|e| d.body_range(e).len()).sum();
                assert_eq!(d.num_boundary_free() + body, d.num_free());
            }
        }
    }

    #[test]
    fn unknown_dirichlet_tag() {
        let m = gen_cube_mesh(1, 1.0).unwrap();
        let r = DofMap::build(&m, &elem(3, 2, BasisTag::ModalJacobi), &[DirichletSpec::all("nope")]);
        assert_eq!(r.unwrap_err(), MeshError::UnknownTag("nope".into()));
    }

    #[test]
    fn isoparametric_examples() {
        let m = gen_cube_mesh(1, 1.0).unwrap();
        let (x, _, det) = m.isoparametric_map(0, [0.0; 3]).unwrap();
        assert_eq!(x, [0.5, 0.5, 0.5]);
        assert!((det - 0.125).abs() < 1e-15);
        let (_, _, det) = m.isoparametric_map(0, [0.3, -0.9, 0.1]).unwrap();
        assert!((det - 0.125).abs() < 1e-15);
        let m = gen_box_mesh([1, 1, 1], [2.0, 1.0, 1.0], [0.0; 3]).unwrap();
        let (_, _, det) = m.isoparametric_map(0, [0.1, 0.2, 0.3]).unwrap();
        assert!((det - 0.25).abs() < 1e-15);
    }

    #[test]
    fn inverted_element_detected() {
        let m = gen_cube_mesh(1, 1.0).unwrap();
        let mut conn = m.elements()[0].clone();
        conn.swap(0, 1);
        conn.swap(3, 2);
        conn.swap(4, 5);
        conn.swap(7, 6);
        let bad = Mesh::new(3, m.coords().to_vec(), vec![conn], BTreeMap::new()).unwrap();
        assert!(matches!(bad.isoparametric_map(0, [0.0; 3]), Err(MeshError::Inverted { .. })));
    }

    #[test]
    fn mesh_text_round_trip() {
        let m = gen_box_mesh([2, 1, 1], [1.0, 0.5, 0.25], [0.0; 3]).unwrap();
        let back = parse_mesh(&m.to_text()).unwrap();
        assert_eq!(back, m);
        let q = gen_rect_mesh([2, 2], [1.0, 1.0]).unwrap();
        assert_eq!(parse_mesh(&q.to_text()).unwrap(), q);
    }

    #[test]
    fn mesh_parse_errors_carry_lines() {
        let text = "# header\nVERTICES\n0 0 0 0\n1 1 0 x\n";
        assert_eq!(
            parse_mesh(text).unwrap_err(),
            MeshError::Parse {
                line: 4,
                msg: "bad coordinate 'x'".into()
            }
        );
        assert!(matches!(parse_mesh("1 2 3\n"), Err(MeshError::Parse { line: 1, .. })));
        assert!(matches!(parse_mesh("VERTICES\n"), Err(MeshError::Parse { .. })));
        let text = "VERTICES\n0 0 0 0\nELEMENTS\n0 0 1 2 3\n";
        assert!(matches!(parse_mesh(text), Err(MeshError::Parse { line: 4, .. })));
    }

    #[test]
    fn dangling_boundary_facet() {
        let m = gen_cube_mesh(1, 1.0).unwrap();
        let mut text = m.to_text();
        text.push_str("bad 0 1 2 6\n");
        assert!(matches!(parse_mesh(&text), Err(MeshError::DanglingFacet { .. })));
    }

    /// Two unit hexes sharing the face x = 1, with element 1 given a
    /// rotated/reflected local frame and scrambled global vertex ids.
    fn twisted_pair(rot: usize, relabel_seed: u64) -> Mesh {
        let base = gen_box_mesh([2, 1, 1], [2.0, 1.0, 1.0], [0.0; 3]).unwrap();
        let mut conn1 = base.elements()[1].clone();
        // Proper rotations of the reference cube expressed as vertex
        // permutations: cycle about each axis.
        let rx = [3, 2, 6, 7, 0, 1, 5, 4];
        let ry = [1, 5, 6, 2, 0, 4, 7, 3];
        let rz = [1, 2, 3, 0, 5, 6, 7, 4];
        let gens = [rx, ry, rz];
        let mut r = rot;
        for _ in 0..4 {
            let g = gens[r % 3];
            r /= 3;
            conn1 = g.iter().map(|&k| conn1[k]).collect();
        }
        let mut rng = rand::rngs::StdRng::seed_from_u64(relabel_seed);
        let nv = base.num_vertices();
        let mut perm: Vec<usize> = (0..nv).collect();
        for i in (1..nv).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let mut coords = vec![[0.0; 3]; nv];
        for (old, &new) in perm.iter().enumerate() {
            coords[new] = base.coords()[old];
        }
        let elems = vec![
            base.elements()[0].iter().map(|&v| perm[v]).collect(),
            conn1.iter().map(|&v| perm[v]).collect(),
        ];
        Mesh::new(3, coords, elems, BTreeMap::new()).unwrap()
    }

    fn field_at(mesh: &Mesh, el: &TensorElement, d: &DofMap, modes: &[f64], e: usize, x: [f64; 3]) -> f64 {
        let xi = mesh.locate(e, x).unwrap();
        let (v, _) = el.shape_eval(xi);
        let c = d.gather_scalar(e, modes);
        v.iter().zip(&c).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn continuity_across_twisted_faces() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(7);
        for tag in BasisTag::ALL {
            for p in 1..=6 {
                if tag.is_sdme() && p < 2 {
                    continue;
                }
                let el = elem(3, p, tag);
                for rot in [0, 1, 5, 13, 40, 77] {
                    let mesh = twisted_pair(rot, rot as u64 + 3);
                    assert!(mesh.isoparametric_map(1, [0.0; 3]).is_ok());
                    let d = DofMap::build_with_components(&mesh, &el, &[], 1).unwrap();
                    let modes: Vec<f64> = (0..d.num_scalar_modes()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    for a in 0..5 {
                        for b in 0..5 {
                            let x = [1.0, 0.05 + 0.9 * a as f64 / 4.0, 0.05 + 0.9 * b as f64 / 4.0];
                            let f0 = field_at(&mesh, &el, &d, &modes, 0, x);
                            let f1 = field_at(&mesh, &el, &d, &modes, 1, x);
                            assert!((f0 - f1).abs() < 1e-10, "{tag} p={p} rot={rot}: {f0} vs {f1}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn continuity_across_structured_cube_edges() {
        let mesh = gen_cube_mesh(2, 1.0).unwrap();
        let mut rng = rand::rngs::StdRng::seed_from_u64(11);
        for tag in BasisTag::ALL {
            let el = elem(3, 4, tag);
            let d = DofMap::build_with_components(&mesh, &el, &[], 1).unwrap();
            let modes: Vec<f64> = (0..d.num_scalar_modes()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            // Points on the central vertical edge x = y = 0.5, shared by four elements.
            for k in 0..5 {
                let z = 0.02 + 0.45 * k as f64 / 4.0;
                let x = [0.5, 0.5, z];
                let vals: Vec<f64> = [0usize, 1, 2, 3]
                    .iter()
                    .map(|&e| field_at(&mesh, &el, &d, &modes, e, x))
                    .collect();
                for v in &vals {
                    assert!((v - vals[0]).abs() < 1e-10, "{tag}");
                }
            }
        }
    }

    #[test]
    fn quad_mesh_continuity() {
        let mesh = gen_rect_mesh([2, 1], [2.0, 1.0]).unwrap();
        let mut rng = rand::rngs::StdRng::seed_from_u64(5);
        for tag in BasisTag::ALL {
            let el = elem(2, 5, tag);
            let d = DofMap::build_with_components(&mesh, &el, &[], 1).unwrap();
            let modes: Vec<f64> = (0..d.num_scalar_modes()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for k in 0..5 {
                let x = [1.0, 0.1 + 0.2 * k as f64, 0.0];
                let f0 = field_at(&mesh, &el, &d, &modes, 0, x);
                let f1 = field_at(&mesh, &el, &d, &modes, 1, x);
                assert!((f0 - f1).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn asymmetric_weights_need_no_flip_only_when_aligned() {
        let mesh = gen_cube_mesh(2, 1.0).unwrap();
        let el = TensorElement::new(
            3,
            Arc::new(basis(3, BasisKind::new(BasisTag::ModalJacobi).with_jacobi(1.0, 0.0)).unwrap()),
        );
        // Structured numbering aligns every edge and face with its global frame.
        assert!(DofMap::build(&mesh, &el, &[]).is_ok());
        let twisted = twisted_pair(1, 9);
        assert!(matches!(
            DofMap::build(&twisted, &el, &[]),
            Err(MeshError::NoReversal { .. })
        ));
    }

    #[test]
    fn dirichlet_fixes_face_closure() {
        let m = gen_cube_mesh(1, 1.0).unwrap();
        let el = elem(3, 3, BasisTag::SdmeM);
        let spec = DirichletSpec {
            tag: "zmin".into(),
            components: [false, false, true],
        };
        let d = DofMap::build(&m, &el, &[spec]).unwrap();
        // A face at P=3 carries 4 + 4·2 + 4 = 16 modes.
        assert_eq!(d.num_free(), 3 * 64 - 16);
    }
}
