//! Tensor-product shape functions on quadrilaterals and hexahedra.
//!
//! Local function `i` has 1D indices `(p, q, r)` with `i = p + m·q + m²·r`,
//! `m = P + 1`. Reference vertices follow the VTK ordering: the bottom face
//! counter-clockwise from (−,−,−), then the top face.

use std::sync::Arc;

use crate::basis1d::Basis1D;

/// Topological owner of a local shape function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EntityClass {
    Vertex(usize),
    /// Local edge and the 1D index along the edge direction.
    Edge { edge: usize, mode: usize },
    /// Local face and the 1D indices along its two in-plane axes (ascending
    /// axis order). In 2D the whole element interior is face 0.
    Face { face: usize, modes: (usize, usize) },
    Body((usize, usize, usize)),
}

/// Reference vertex id for corner bits (0 = −1, 1 = +1 per axis).
pub fn vertex_of_bits(dim: usize, bits: [usize; 3]) -> usize {
    let base = match (bits[0], bits[1]) {
        (0, 0) => 0,
        (1, 0) => 1,
        (1, 1) => 2,
        _ => 3,
    };
    if dim == 3 {
        base + 4 * bits[2]
    } else {
        base
    }
}

/// Corner bits of a reference vertex.
pub fn bits_of_vertex(v: usize) -> [usize; 3] {
    let b = match v % 4 {
        0 => [0, 0],
        1 => [1, 0],
        2 => [1, 1],
        _ => [0, 1],
    };
    [b[0], b[1], v / 4]
}

/// Reference edge: the axis it runs along and the bits of the fixed axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RefEdge {
    pub axis: usize,
    /// Local vertices at the −1 and +1 ends along `axis`.
    pub ends: [usize; 2],
}

/// Reference face: normal axis, side, in-plane axes and corner cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RefFace {
    pub normal_axis: usize,
    pub side: usize,
    pub axes: [usize; 2],
    /// Corners at in-plane coordinates (−,−), (+,−), (+,+), (−,+).
    pub corners: [usize; 4],
}

pub fn ref_edges(dim: usize) -> Vec<RefEdge> {
    let mut out = Vec::new();
    for axis in 0..dim {
        let others: Vec<usize> = (0..dim).filter(|&a| a != axis).collect();
        for combo in 0..(1usize << (dim - 1)) {
            let mut bits = [0usize; 3];
            for (k, &o) in others.iter().enumerate() {
                bits[o] = (combo >> k) & 1;
            }
            let mut lo = bits;
            lo[axis] = 0;
            let mut hi = bits;
            hi[axis] = 1;
            out.push(RefEdge {
                axis,
                ends: [vertex_of_bits(dim, lo), vertex_of_bits(dim, hi)],
            });
        }
    }
    out
}

pub fn ref_faces(dim: usize) -> Vec<RefFace> {
    if dim == 2 {
        return vec![RefFace {
            normal_axis: 2,
            side: 0,
            axes: [0, 1],
            corners: [0, 1, 2, 3],
        }];
    }
    let mut out = Vec::new();
    for normal_axis in 0..3 {
        let axes: Vec<usize> = (0..3).filter(|&a| a != normal_axis).collect();
        for side in 0..2 {
            let mut corners = [0; 4];
            for (k, (s, t)) in [(0, 0), (1, 0), (1, 1), (0, 1)].into_iter().enumerate() {
                let mut bits = [0usize; 3];
                bits[normal_axis] = side;
                bits[axes[0]] = s;
                bits[axes[1]] = t;
                corners[k] = vertex_of_bits(3, bits);
            }
            out.push(RefFace {
                normal_axis,
                side,
                axes: [axes[0], axes[1]],
                corners,
            });
        }
    }
    out
}

/// Boundary faces (3D) or edges (2D) of the reference element, as the
/// entities a Neumann/Dirichlet tag refers to.
pub fn ref_boundary_facets(dim: usize) -> Vec<Vec<usize>> {
    if dim == 3 {
        ref_faces(3).iter().map(|f| f.corners.to_vec()).collect()
    } else {
        ref_edges(2).iter().map(|e| e.ends.to_vec()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct TensorElement {
    dim: usize,
    basis: Arc<Basis1D>,
    index_map: Vec<[usize; 3]>,
    entity: Vec<EntityClass>,
}

impl TensorElement {
    pub fn new(dim: usize, basis: Arc<Basis1D>) -> Self {
        assert!(dim == 2 || dim == 3, "tensor elements are 2D or 3D");
        let m = basis.order() + 1;
        let n = m.pow(dim as u32);
        let edges = ref_edges(dim);
        let faces = ref_faces(dim);
        let mut index_map = Vec::with_capacity(n);
        let mut entity = Vec::with_capacity(n);
        for i in 0..n {
            let idx = [i % m, (i / m) % m, if dim == 3 { i / (m * m) } else { 0 }];
            index_map.push(idx);
            entity.push(classify(dim, idx, &edges, &faces));
        }
        TensorElement {
            dim,
            basis,
            index_map,
            entity,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn order(&self) -> usize {
        self.basis.order()
    }

    pub fn basis(&self) -> &Arc<Basis1D> {
        &self.basis
    }

    pub fn len(&self) -> usize {
        self.index_map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index_map.is_empty()
    }

    pub fn index_map(&self) -> &[[usize; 3]] {
        &self.index_map
    }

    pub fn entity(&self, i: usize) -> EntityClass {
        self.entity[i]
    }

    pub fn entities(&self) -> &[EntityClass] {
        &self.entity
    }

    /// Whether function `i` is internal (every 1D factor is a bubble).
    pub fn is_internal(&self, i: usize) -> bool {
        self.index_map[i][..self.dim].iter().all(|&p| p >= 2)
    }

    /// Boundary and internal local function ids.
    pub fn classify_dofs(&self) -> (Vec<usize>, Vec<usize>) {
        (0..self.len()).partition(|&i| !self.is_internal(i))
    }

    /// Values and reference gradients of all shape functions at `xi`.
    pub fn shape_eval(&self, xi: [f64; 3]) -> (Vec<f64>, Vec<[f64; 3]>) {
        let mut v1 = Vec::with_capacity(3);
        let mut d1 = Vec::with_capacity(3);
        for &x in xi.iter().take(self.dim) {
            let (v, d) = self.basis.eval(x);
            v1.push(v);
            d1.push(d);
        }
        let n = self.len();
        let mut values = Vec::with_capacity(n);
        let mut grads = Vec::with_capacity(n);
        for idx in &self.index_map {
            let mut val = 1.0;
            let mut g = [1.0, 1.0, if self.dim == 3 { 1.0 } else { 0.0 }];
            for d in 0..self.dim {
                val *= v1[d][idx[d]];
                for (e, ge) in g.iter_mut().enumerate().take(self.dim) {
                    *ge *= if e == d { d1[d][idx[d]] } else { v1[d][idx[d]] };
                }
            }
            values.push(val);
            grads.push(g);
        }
        (values, grads)
    }
}

fn classify(dim: usize, idx: [usize; 3], edges: &[RefEdge], faces: &[RefFace]) -> EntityClass {
    let internal: Vec<usize> = (0..dim).filter(|&d| idx[d] >= 2).collect();
    match internal.len() {
        0 => EntityClass::Vertex(vertex_of_bits(dim, idx)),
        1 => {
            let axis = internal[0];
            let mut bits = idx;
            bits[axis] = 0;
            let lo = vertex_of_bits(dim, bits);
            let edge = edges
                .iter()
                .position(|e| e.axis == axis && e.ends[0] == lo)
                .expect("edge table covers every axis/corner pair");
            EntityClass::Edge {
                edge,
                mode: idx[axis],
            }
        }
        2 if dim == 2 => EntityClass::Face {
            face: 0,
            modes: (idx[0], idx[1]),
        },
        2 => {
            let normal = (0..3).find(|d| idx[*d] < 2).unwrap();
            let side = idx[normal];
            let face = faces
                .iter()
                .position(|f| f.normal_axis == normal && f.side == side)
                .unwrap();
            let axes = faces[face].axes;
            EntityClass::Face {
                face,
                modes: (idx[axes[0]], idx[axes[1]]),
            }
        }
        _ => EntityClass::Body((idx[0], idx[1], idx[2])),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis1d::{basis, BasisKind, BasisTag};

    fn elem(dim: usize, p: usize, tag: BasisTag) -> TensorElement {
        TensorElement::new(dim, Arc::new(basis(p, BasisKind::new(tag)).unwrap()))
    }

    #[test]
    fn reference_topology() {
        assert_eq!(ref_edges(3).len(), 12);
        assert_eq!(ref_faces(3).len(), 6);
        assert_eq!(ref_edges(2).len(), 4);
        for v in 0..8 {
            assert_eq!(vertex_of_bits(3, bits_of_vertex(v)), v);
        }
        // Each face corner cycle is a closed loop of reference edges.
        let edges = ref_edges(3);
        for f in ref_faces(3) {
            for k in 0..4 {
                let (a, b) = (f.corners[k], f.corners[(k + 1) % 4]);
                assert!(edges
                    .iter()
                    .any(|e| (e.ends == [a, b]) || (e.ends == [b, a])));
            }
        }
    }

    #[test]
    fn lagrange_quad_partition_of_unity() {
        let e = elem(2, 4, BasisTag::LagrangeGll);
        for xi in [[0.1, -0.7, 0.0], [0.93, 0.2, 0.0]] {
            let (v, g) = e.shape_eval(xi);
            assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-13);
            assert!(g.iter().map(|g| g[0]).sum::<f64>().abs() < 1e-11);
        }
    }

    #[test]
    fn modal_quad_vertex_trace() {
        let e = elem(2, 2, BasisTag::ModalJacobi);
        let (v, _) = e.shape_eval([-1.0, -1.0, 0.0]);
        for (i, vi) in v.iter().enumerate() {
            let expect = if e.entity(i) == EntityClass::Vertex(0) { 1.0 } else { 0.0 };
            assert!((vi - expect).abs() < 1e-14);
        }
        let (v, _) = e.shape_eval([1.0, -1.0, 0.0]);
        let i1 = e.entities().iter().position(|c| *c == EntityClass::Vertex(1)).unwrap();
        assert!((v[i1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn partition_counts() {
        let e = elem(3, 3, BasisTag::ModalJacobi);
        let body = e.entities().iter().filter(|c| matches!(c, EntityClass::Body(_))).count();
        assert_eq!(body, 8);
        let (b, i) = elem(2, 2, BasisTag::ModalJacobi).classify_dofs();
        assert_eq!((b.len(), i.len()), (8, 1));
        let (_, i) = elem(3, 4, BasisTag::SdmeM).classify_dofs();
        assert_eq!(i.len(), 27);
        let (b, _) = elem(2, 10, BasisTag::ModalJacobi).classify_dofs();
        assert_eq!(b.len(), 40);
        for p in 1..=10 {
            for dim in [2, 3] {
                let e = elem(dim, p, BasisTag::ModalJacobi);
                let (b, i) = e.classify_dofs();
                assert_eq!(b.len() + i.len(), (p + 1).pow(dim as u32));
                assert_eq!(i.len(), (p - 1).pow(dim as u32));
                let verts = e.entities().iter().filter(|c| matches!(c, EntityClass::Vertex(_))).count();
                assert_eq!(verts, 1 << dim);
            }
        }
    }

    #[test]
    fn entity_counts_per_hex() {
        let p = 4;
        let e = elem(3, p, BasisTag::ModalJacobi);
        let mut edge_counts = [0; 12];
        let mut face_counts = [0; 6];
        for c in e.entities() {
            match c {
                EntityClass::Edge { edge, .. } => edge_counts[*edge] += 1,
                EntityClass::Face { face, .. } => face_counts[*face] += 1,
                _ => {}
            }
        }
        assert!(edge_counts.iter().all(|&c| c == p - 1));
        assert!(face_counts.iter().all(|&c| c == (p - 1) * (p - 1)));
    }

    #[test]
    fn functions_vanish_off_their_closure() {
        // A face function vanishes on every reference face it is not part of.
        let e = elem(3, 3, BasisTag::SdmeH);
        let faces = ref_faces(3);
        for (i, c) in e.entities().iter().enumerate() {
            if let EntityClass::Face { face, .. } = c {
                for (f, rf) in faces.iter().enumerate() {
                    if f == *face {
                        continue;
                    }
                    let mut xi = [0.3, -0.2, 0.55];
                    xi[rf.normal_axis] = if rf.side == 0 { -1.0 } else { 1.0 };
                    let (v, _) = e.shape_eval(xi);
                    assert!(v[i].abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn multilinear_interpolation_exact() {
        let f = |x: [f64; 3]| 1.0 + 2.0 * x[0] - x[1] + 0.5 * x[2] + 0.25 * x[0] * x[1] * x[2];
        for tag in BasisTag::ALL {
            let e = elem(3, 3, tag);
            // Multilinear fields live in the vertex-mode span only for bases
            // whose vertex modes are the standard hat functions; solve for
            // coefficients at generic points instead.
            let pts: Vec<[f64; 3]> = (0..e.len())
                .map(|k| {
                    let t = k as f64 + 0.5;
                    [(t * 0.618).fract() * 2.0 - 1.0, (t * 0.414).fract() * 2.0 - 1.0, (t * 0.732).fract() * 2.0 - 1.0]
                })
                .collect();
            let n = e.len();
            let mut a = crate::densela::DenseMatrix::zeros(n, n);
            let mut rhs = crate::densela::DenseMatrix::zeros(n, 1);
            for (r, x) in pts.iter().enumerate() {
                let (v, _) = e.shape_eval(*x);
                for c in 0..n {
                    a[(r, c)] = v[c];
                }
                rhs[(r, 0)] = f(*x);
            }
            let c = crate::densela::lu_solve(&a, &rhs).unwrap();
            for x in [[0.11, -0.52, 0.9], [-0.99, 0.0, 0.37]] {
                let (v, _) = e.shape_eval(x);
                let s: f64 = (0..n).map(|i| v[i] * c[(i, 0)]).sum();
                assert!((s - f(x)).abs() < 1e-10, "{tag}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let h = 1e-6;
        for tag in BasisTag::ALL {
            let e = elem(3, 4, tag);
            let x = [0.21, -0.43, 0.67];
            let (_, g) = e.shape_eval(x);
            for d in 0..3 {
                let mut xp = x;
                let mut xm = x;
                xp[d] += h;
                xm[d] -= h;
                let (vp, _) = e.shape_eval(xp);
                let (vm, _) = e.shape_eval(xm);
                for i in 0..e.len() {
                    let fd = (vp[i] - vm[i]) / (2.0 * h);
                    assert!((g[i][d] - fd).abs() <= 1e-6 * fd.abs().max(1.0), "{tag} i={i} d={d}");
                }
            }
        }
    }
}
