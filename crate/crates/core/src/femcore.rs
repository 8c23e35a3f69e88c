//! Element kernels for total-Lagrangian neo-Hookean elastodynamics on
//! hexahedra, global assembly, manufactured-solution loads and error norms.
//!
//! Volume integrals use sum factorization: a field given by its `m³`
//! coefficients (`m = P + 1`) is evaluated at the `Q³` tensor quadrature
//! points through three successive contractions with 1D tables, and element
//! matrices are built from per-point coefficients by three GEMM stages of
//! sizes `m²Q³`, `m⁴Q²` and `m⁶Q`.

use std::sync::Arc;

use nalgebra::Matrix3;
use rayon::prelude::*;
use thiserror::Error;

use crate::basis1d::{Basis1D, BasisTag};
use crate::densela::DenseMatrix;
use crate::material::{MaterialError, NeoHookean};
use crate::meshdof::{DirichletSpec, DofMap, Mesh, MeshError};
use crate::quadrature::{gauss_rule, gll_rule, QuadratureError, QuadratureRule};
use crate::solver::{CondensedSystem, CsrMatrix, LocalBlock, PcgConfig, SolveStats, SolverError};
use crate::tensorelem::{ref_faces, TensorElement};

#[derive(Debug, Error)]
pub enum FemError {
    #[error("element {elem} inverted at quadrature point {qp} (det F = {det_f:e})")]
    ElementInversion { elem: usize, qp: usize, det_f: f64 },
    #[error("finite element kernels support 3D hexahedral meshes only")]
    Unsupported,
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Material(#[from] MaterialError),
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

pub type Result<T> = std::result::Result<T, FemError>;

/// Volume integration mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Integration {
    /// `P + 2` Gauss points per direction.
    #[default]
    Consistent,
    /// `P + 1` Gauss points per direction, the smallest Gauss rule that
    /// integrates the mass matrix of affine elements exactly.
    Minimal,
    /// `P + 1` GLL points per direction; with the Lagrange-GLL basis the mass
    /// matrix becomes diagonal.
    Collocation,
}

impl Integration {
    pub fn label(self) -> &'static str {
        match self {
            Integration::Consistent => "consistent",
            Integration::Minimal => "minimal",
            Integration::Collocation => "collocation",
        }
    }
}

impl std::str::FromStr for Integration {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "consistent" => Ok(Integration::Consistent),
            "minimal" => Ok(Integration::Minimal),
            "collocation" => Ok(Integration::Collocation),
            _ => Err(format!("unknown integration mode '{s}' (expected consistent, minimal or collocation)")),
        }
    }
}

/// Optional additional element matrix (same local layout as the tangent),
/// used for contact stiffness.
pub type ExtraBlocks = dyn Fn(usize) -> Option<DenseMatrix> + Sync;

/// Raw strided GEMM `C ← A·B + β·C`.
#[allow(clippy::too_many_arguments)]
fn mm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= (m - 1) * rsa + (k.max(1) - 1) * csa + 1 || k == 0);
    assert!(b.len() >= (k.max(1) - 1) * rsb + (n - 1) * csb + 1 || k == 0);
    assert!(c.len() >= (m - 1) * rsc + n);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

/// 1D tables on a quadrature rule, row = function, column = point.
#[derive(Debug, Clone)]
pub struct Tables {
    pub m: usize,
    pub q: usize,
    pub values: Vec<f64>,
    pub derivs: Vec<f64>,
}

impl Tables {
    fn new(basis: &Basis1D, rule: &QuadratureRule) -> Self {
        let tab = basis.tabulate(&rule.points);
        Tables {
            m: basis.len(),
            q: rule.len(),
            values: tab.values.as_slice().to_vec(),
            derivs: tab.derivs.as_slice().to_vec(),
        }
    }

    fn pick(&self, deriv: bool) -> &[f64] {
        if deriv {
            &self.derivs
        } else {
            &self.values
        }
    }

    /// Coefficients (`m³`, first index fastest) to point values (`Q³`).
    pub fn interp(&self, u: &[f64], d: [bool; 3]) -> Vec<f64> {
        let (m, q) = (self.m, self.q);
        let (tx, ty, tz) = (self.pick(d[0]), self.pick(d[1]), self.pick(d[2]));
        let mut a = vec![0.0; m * m * q];
        mm(m * m, m, q, u, (m, 1), tx, (q, 1), 0.0, &mut a, q);
        let mut b = vec![0.0; m * q * q];
        for r in 0..m {
            mm(q, m, q, ty, (1, q), &a[r * m * q..], (q, 1), 0.0, &mut b[r * q * q..], q);
        }
        let mut c = vec![0.0; q * q * q];
        mm(q, m, q * q, tz, (1, q), &b, (q * q, 1), 0.0, &mut c, q * q);
        c
    }

    /// Transpose of [`Tables::interp`]: point values to coefficient moments.
    pub fn project(&self, v: &[f64], d: [bool; 3]) -> Vec<f64> {
        let (m, q) = (self.m, self.q);
        let (tx, ty, tz) = (self.pick(d[0]), self.pick(d[1]), self.pick(d[2]));
        let mut a1 = vec![0.0; q * q * m];
        mm(q * q, q, m, v, (q, 1), tx, (1, q), 0.0, &mut a1, m);
        let mut a2 = vec![0.0; m * m * q];
        for k3 in 0..q {
            mm(m, q, m, ty, (q, 1), &a1[k3 * q * m..], (m, 1), 0.0, &mut a2[k3 * m * m..], m);
        }
        let mut out = vec![0.0; m * m * m];
        mm(m, q, m * m, tz, (q, 1), &a2, (m * m, 1), 0.0, &mut out, m * m);
        out
    }

    /// `W[(p,s), k] = X_i[p,k]·X_j[s,k]` for one direction.
    fn pair_table(&self, di: bool, dj: bool) -> Vec<f64> {
        let (m, q) = (self.m, self.q);
        let (ti, tj) = (self.pick(di), self.pick(dj));
        let mut w = vec![0.0; m * m * q];
        for p in 0..m {
            for s in 0..m {
                for k in 0..q {
                    w[(p * m + s) * q + k] = ti[p * q + k] * tj[s * q + k];
                }
            }
        }
        w
    }
}

/// Sum-factorized bilinear form: accumulates
/// `K[i][j] += Σ_q Φ_i(q) c(q) Ψ_j(q)` into `kbuf` laid out as
/// `[(p3,s3)][(p2,s2)][(p1,s1)]`.
struct MatrixKernel {
    m: usize,
    q: usize,
    /// `pairs[di][dj]` per direction (identical across directions).
    pairs: [[Vec<f64>; 2]; 2],
    t1: Vec<f64>,
    t2: Vec<f64>,
}

impl MatrixKernel {
    fn new(t: &Tables) -> Self {
        let (m, q) = (t.m, t.q);
        MatrixKernel {
            m,
            q,
            pairs: [
                [t.pair_table(false, false), t.pair_table(false, true)],
                [t.pair_table(true, false), t.pair_table(true, true)],
            ],
            t1: vec![0.0; q * q * m * m],
            t2: vec![0.0; q * m * m * m * m],
        }
    }

    fn accumulate(&mut self, c: &[f64], di: [bool; 3], dj: [bool; 3], kbuf: &mut [f64]) {
        let (m, q) = (self.m, self.q);
        let m2 = m * m;
        let w = |d: usize| -> &[f64] { &self.pairs[di[d] as usize][dj[d] as usize] };
        let w1 = w(0).to_vec();
        let w2 = w(1).to_vec();
        let w3 = w(2).to_vec();
        // T1[(k2,k3)][ps1] = Σ_k1 C[(k2,k3)][k1] W1[ps1][k1]
        mm(q * q, q, m2, c, (q, 1), &w1, (1, q), 0.0, &mut self.t1, m2);
        // T2[k3][ps2][ps1] = Σ_k2 W2[ps2][k2] T1[(k2,k3)][ps1]
        for k3 in 0..q {
            mm(
                m2,
                q,
                m2,
                &w2,
                (q, 1),
                &self.t1[k3 * q * m2..],
                (m2, 1),
                0.0,
                &mut self.t2[k3 * m2 * m2..],
                m2,
            );
        }
        // K[ps3][(ps2,ps1)] += Σ_k3 W3[ps3][k3] T2[k3][(ps2,ps1)]
        mm(m2, q, m2 * m2, &w3, (q, 1), &self.t2, (m2 * m2, 1), 1.0, kbuf, m2 * m2);
    }

    /// Copies `kbuf` into the dense block at `(row0, col0)` of `out`.
    fn scatter(&self, kbuf: &[f64], out: &mut DenseMatrix, row0: usize, col0: usize) {
        let m = self.m;
        let m2 = m * m;
        for p3 in 0..m {
            for s3 in 0..m {
                let o3 = (p3 * m + s3) * m2 * m2;
                for p2 in 0..m {
                    for s2 in 0..m {
                        let o2 = o3 + (p2 * m + s2) * m2;
                        for p1 in 0..m {
                            let i = p1 + m * (p2 + m * p3);
                            let row = out.row_mut(row0 + i);
                            for s1 in 0..m {
                                let j = s1 + m * (s2 + m * s3);
                                row[col0 + j] += kbuf[o2 + p1 * m + s1];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Geometry at the volume quadrature points of one element.
#[derive(Debug, Clone)]
pub struct ElementGeometry {
    pub x: Vec<[f64; 3]>,
    /// `∂ξ_d/∂X_I` stored as `[d][I]`.
    pub jinv: Vec<[[f64; 3]; 3]>,
    /// Quadrature weight times `det J`.
    pub wdet: Vec<f64>,
}

/// Point on an element face used for surface integrals.
#[derive(Debug, Clone)]
pub struct FacePoint {
    pub x: [f64; 3],
    /// Outward unit normal in the reference configuration.
    pub normal: [f64; 3],
    /// Quadrature weight times surface Jacobian.
    pub weight: f64,
    /// All element shape function values at the point.
    pub values: Vec<f64>,
}

const DIRS: [[bool; 3]; 3] = [[true, false, false], [false, true, false], [false, false, true]];
const NODIR: [bool; 3] = [false, false, false];

/// Gradients and stresses at the quadrature points of an element.
struct PointStates {
    f: Vec<Matrix3<f64>>,
    s: Vec<Matrix3<f64>>,
    c: Vec<Matrix3<f64>>,
    psi: Vec<f64>,
}

/// Discrete problem: mesh, element space, numbering and material.
#[derive(Debug, Clone)]
pub struct FeModel {
    mesh: Arc<Mesh>,
    elem: TensorElement,
    rule: QuadratureRule,
    tables: Tables,
    dofmap: DofMap,
    material: NeoHookean,
    geometry: Vec<ElementGeometry>,
    integration: Integration,
}

impl FeModel {
    pub fn new(
        mesh: Arc<Mesh>,
        basis: Arc<Basis1D>,
        integration: Integration,
        material: NeoHookean,
        dirichlet: &[DirichletSpec],
    ) -> Result<Self> {
        if mesh.dim() != 3 {
            return Err(FemError::Unsupported);
        }
        let p = basis.order();
        let rule = match integration {
            Integration::Consistent => gauss_rule(p + 2)?,
            Integration::Minimal => gauss_rule(p + 1)?,
            Integration::Collocation => {
                if basis.kind().tag != BasisTag::LagrangeGll {
                    log::warn!("collocation integration with a non-nodal basis under-integrates the mass matrix");
                }
                gll_rule(p + 1)?
            }
        };
        let elem = TensorElement::new(3, basis.clone());
        let dofmap = DofMap::build(&mesh, &elem, dirichlet)?;
        let tables = Tables::new(&basis, &rule);
        let pts = crate::quadrature::tensor_points(&rule, 3);
        let geometry = (0..mesh.num_elements())
            .map(|e| {
                let mut g = ElementGeometry {
                    x: Vec::with_capacity(pts.len()),
                    jinv: Vec::with_capacity(pts.len()),
                    wdet: Vec::with_capacity(pts.len()),
                };
                for (xi, w) in &pts {
                    let (x, j, det) = mesh.isoparametric_map(e, *xi)?;
                    let jm = Matrix3::from_fn(|r, c| j[r][c]);
                    let inv = jm.try_inverse().ok_or(MeshError::Inverted {
                        elem: e,
                        xi: *xi,
                        det_j: det,
                    })?;
                    g.x.push(x);
                    g.jinv.push(std::array::from_fn(|d| std::array::from_fn(|i| inv[(d, i)])));
                    g.wdet.push(w * det);
                }
                Ok(g)
            })
            .collect::<std::result::Result<Vec<_>, MeshError>>()?;
        Ok(FeModel {
            mesh,
            elem,
            rule,
            tables,
            dofmap,
            material,
            geometry,
            integration,
        })
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn element(&self) -> &TensorElement {
        &self.elem
    }

    pub fn dofmap(&self) -> &DofMap {
        &self.dofmap
    }

    pub fn material(&self) -> &NeoHookean {
        &self.material
    }

    pub fn rule(&self) -> &QuadratureRule {
        &self.rule
    }

    pub fn integration(&self) -> Integration {
        self.integration
    }

    pub fn geometry(&self, e: usize) -> &ElementGeometry {
        &self.geometry[e]
    }

    pub fn num_free(&self) -> usize {
        self.dofmap.num_free()
    }

    pub fn num_elements(&self) -> usize {
        self.mesh.num_elements()
    }

    /// Local functions per element (scalar).
    pub fn n_local(&self) -> usize {
        self.elem.len()
    }

    fn point_states(&self, e: usize, u_elem: &[f64]) -> Result<PointStates> {
        let n = self.n_local();
        let g = &self.geometry[e];
        let nq = g.wdet.len();
        // du[a][d][qp] = ∂u_a/∂ξ_d
        let mut du = Vec::with_capacity(9);
        for a in 0..3 {
            for dir in DIRS {
                du.push(self.tables.interp(&u_elem[a * n..(a + 1) * n], dir));
            }
        }
        let mut st = PointStates {
            f: Vec::with_capacity(nq),
            s: Vec::with_capacity(nq),
            c: Vec::with_capacity(nq),
            psi: Vec::with_capacity(nq),
        };
        for qp in 0..nq {
            let ji = &g.jinv[qp];
            let f = Matrix3::from_fn(|a, i| {
                let mut h = 0.0;
                for d in 0..3 {
                    h += du[a * 3 + d][qp] * ji[d][i];
                }
                h + if a == i { 1.0 } else { 0.0 }
            });
            let det_f = f.determinant();
            if !(det_f > 0.0) {
                return Err(FemError::ElementInversion { elem: e, qp, det_f });
            }
            let c = f.transpose() * f;
            let (s, psi) = self.material.pk2_stress(&c)?;
            st.f.push(f);
            st.s.push(s);
            st.c.push(c);
            st.psi.push(psi);
        }
        Ok(st)
    }

    /// Element internal force `∫ (F S) : ∇N` (component-major layout).
    pub fn element_internal_force(&self, e: usize, u_elem: &[f64]) -> Result<Vec<f64>> {
        let st = self.point_states(e, u_elem)?;
        Ok(self.internal_force_from_states(e, &st))
    }

    fn internal_force_from_states(&self, e: usize, st: &PointStates) -> Vec<f64> {
        let n = self.n_local();
        let g = &self.geometry[e];
        let nq = g.wdet.len();
        let mut r = vec![0.0; 3 * n];
        let mut gad = vec![0.0; nq];
        for a in 0..3 {
            for (d, dir) in DIRS.iter().enumerate() {
                for qp in 0..nq {
                    let p = st.f[qp] * st.s[qp];
                    let ji = &g.jinv[qp];
                    gad[qp] = g.wdet[qp] * (0..3).map(|i| p[(a, i)] * ji[d][i]).sum::<f64>();
                }
                let part = self.tables.project(&gad, *dir);
                for (ri, pi) in r[a * n..(a + 1) * n].iter_mut().zip(&part) {
                    *ri += pi;
                }
            }
        }
        r
    }

    /// Global stored energy `∫ Ψ(C) dΩ0`.
    pub fn strain_energy(&self, u: &[f64]) -> Result<f64> {
        let parts: Vec<f64> = (0..self.num_elements())
            .into_par_iter()
            .map(|e| {
                let st = self.point_states(e, &self.dofmap.gather(e, u))?;
                Ok(st.psi.iter().zip(&self.geometry[e].wdet).map(|(p, w)| p * w).sum())
            })
            .collect::<Result<_>>()?;
        Ok(parts.iter().sum())
    }

    /// Linear momentum `∫ ρ0 v dΩ0` of a velocity field.
    pub fn momentum(&self, v: &[f64]) -> [f64; 3] {
        std::array::from_fn(|a| {
            let w = self.body_load(|_| std::array::from_fn(|b| if a == b { 1.0 } else { 0.0 }));
            w.iter().zip(v).map(|(x, y)| x * y).sum()
        })
    }

    /// Element tangent stiffness (material plus geometric part).
    pub fn element_tangent(&self, e: usize, u_elem: &[f64]) -> Result<DenseMatrix> {
        let st = self.point_states(e, u_elem)?;
        self.tangent_from_states(e, &st)
    }

    fn tangent_from_states(&self, e: usize, st: &PointStates) -> Result<DenseMatrix> {
        let n = self.n_local();
        let g = &self.geometry[e];
        let nq = g.wdet.len();
        // chat[(a,d,b,e)][qp] for a <= b.
        let mut chat = vec![vec![0.0; nq]; 81];
        for qp in 0..nq {
            let t = self.material.tangent_tensor(&st.c[qp])?;
            let f = &st.f[qp];
            let s = &st.s[qp];
            // A[a][I][b][J] = δ_ab S_IJ + Σ F_aK ℂ_KIMJ F_bM
            let mut fc = [[[[0.0; 3]; 3]; 3]; 3]; // fc[a][I][M][J] = Σ_K F_aK ℂ_KIMJ
            for a in 0..3 {
                for i in 0..3 {
                    for mm_ in 0..3 {
                        for j in 0..3 {
                            fc[a][i][mm_][j] = (0..3).map(|k| f[(a, k)] * t[k][i][mm_][j]).sum();
                        }
                    }
                }
            }
            let ji = &g.jinv[qp];
            for a in 0..3 {
                for b in a..3 {
                    let mut amat = [[0.0; 3]; 3];
                    for i in 0..3 {
                        for j in 0..3 {
                            let mut v: f64 = (0..3).map(|mm_| fc[a][i][mm_][j] * f[(b, mm_)]).sum();
                            if a == b {
                                v += s[(i, j)];
                            }
                            amat[i][j] = v;
                        }
                    }
                    for d in 0..3 {
                        for ee in 0..3 {
                            let mut v = 0.0;
                            for i in 0..3 {
                                for j in 0..3 {
                                    v += ji[d][i] * amat[i][j] * ji[ee][j];
                                }
                            }
                            chat[((a * 3 + d) * 3 + b) * 3 + ee][qp] = g.wdet[qp] * v;
                        }
                    }
                }
            }
        }
        let m = self.tables.m;
        let mut kernel = MatrixKernel::new(&self.tables);
        let mut out = DenseMatrix::zeros(3 * n, 3 * n);
        let mut kbuf = vec![0.0; m.pow(6)];
        for a in 0..3 {
            for b in a..3 {
                kbuf.iter_mut().for_each(|v| *v = 0.0);
                for d in 0..3 {
                    for ee in 0..3 {
                        kernel.accumulate(&chat[((a * 3 + d) * 3 + b) * 3 + ee], DIRS[d], DIRS[ee], &mut kbuf);
                    }
                }
                kernel.scatter(&kbuf, &mut out, a * n, b * n);
            }
        }
        // Mirror the lower block triangle.
        for a in 0..3 {
            for b in 0..a {
                for i in 0..n {
                    for j in 0..n {
                        let v = out[(b * n + j, a * n + i)];
                        out[(a * n + i, b * n + j)] = v;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Internal force and tangent from one evaluation of the point states.
    pub fn element_force_and_tangent(&self, e: usize, u_elem: &[f64]) -> Result<(Vec<f64>, DenseMatrix)> {
        let st = self.point_states(e, u_elem)?;
        Ok((self.internal_force_from_states(e, &st), self.tangent_from_states(e, &st)?))
    }

    /// Scalar element mass `∫ ρ0 N_i N_j` (identical for every component).
    pub fn element_mass_scalar(&self, e: usize) -> DenseMatrix {
        let n = self.n_local();
        let g = &self.geometry[e];
        let c: Vec<f64> = g.wdet.iter().map(|w| self.material.rho0 * w).collect();
        let mut kernel = MatrixKernel::new(&self.tables);
        let mut kbuf = vec![0.0; self.tables.m.pow(6)];
        kernel.accumulate(&c, NODIR, NODIR, &mut kbuf);
        let mut out = DenseMatrix::zeros(n, n);
        kernel.scatter(&kbuf, &mut out, 0, 0);
        out
    }

    /// Vector element mass, block-diagonal over components.
    pub fn element_mass(&self, e: usize) -> DenseMatrix {
        let n = self.n_local();
        let ms = self.element_mass_scalar(e);
        let mut out = DenseMatrix::zeros(3 * n, 3 * n);
        for a in 0..3 {
            for i in 0..n {
                out.row_mut(a * n + i)[a * n..(a + 1) * n].copy_from_slice(ms.row(i));
            }
        }
        out
    }

    pub fn local_block(&self, e: usize, matrix: DenseMatrix) -> LocalBlock {
        let (dofs, signs): (Vec<_>, Vec<_>) = self.dofmap.local_dofs(e).into_iter().unzip();
        LocalBlock { dofs, signs, matrix }
    }

    /// Global internal force vector.
    pub fn internal_force(&self, u: &[f64]) -> Result<Vec<f64>> {
        let parts: Vec<Vec<f64>> = (0..self.num_elements())
            .into_par_iter()
            .map(|e| self.element_internal_force(e, &self.dofmap.gather(e, u)))
            .collect::<Result<_>>()?;
        let mut r = vec![0.0; self.num_free()];
        for (e, p) in parts.iter().enumerate() {
            self.dofmap.scatter_add(e, p, &mut r);
        }
        Ok(r)
    }

    /// Condensed system of `Σ_e (s_m M_e + s_k K_e(u))` together with the
    /// global internal force; `s_k = 0` skips the tangent computation.
    pub fn condensed_operator(
        &self,
        u: &[f64],
        mass_scale: f64,
        tangent_scale: f64,
        extra: Option<&ExtraBlocks>,
    ) -> Result<(Vec<f64>, CondensedSystem)> {
        let nb = self.dofmap.num_boundary_free();
        let mut forces: Vec<Option<Vec<f64>>> = vec![None; self.num_elements()];
        let force_slots = std::sync::Mutex::new(&mut forces);
        let system = CondensedSystem::from_block_fn(nb, self.num_free(), self.num_elements(), |e| {
            let (mat, f) = self.element_operator(e, u, mass_scale, tangent_scale, extra)?;
            force_slots.lock().unwrap()[e] = f;
            Ok::<_, FemError>(self.local_block(e, mat))
        })?;
        let mut r = vec![0.0; self.num_free()];
        for (e, f) in forces.iter().enumerate() {
            if let Some(f) = f {
                self.dofmap.scatter_add(e, f, &mut r);
            }
        }
        Ok((r, system))
    }

    fn element_operator(
        &self,
        e: usize,
        u: &[f64],
        mass_scale: f64,
        tangent_scale: f64,
        extra: Option<&ExtraBlocks>,
    ) -> Result<(DenseMatrix, Option<Vec<f64>>)> {
        let n = self.n_local();
        let (mut mat, force) = if tangent_scale != 0.0 {
            let (f, mut k) = self.element_force_and_tangent(e, &self.dofmap.gather(e, u))?;
            k.scale(tangent_scale);
            (k, Some(f))
        } else {
            (DenseMatrix::zeros(3 * n, 3 * n), None)
        };
        if mass_scale != 0.0 {
            let ms = self.element_mass_scalar(e);
            for a in 0..3 {
                for i in 0..n {
                    let row = &mut mat.row_mut(a * n + i)[a * n..(a + 1) * n];
                    for (x, y) in row.iter_mut().zip(ms.row(i)) {
                        *x += mass_scale * y;
                    }
                }
            }
        }
        if let Some(extra) = extra {
            if let Some(add) = extra(e) {
                mat.add_scaled(1.0, &add);
            }
        }
        Ok((mat, force))
    }

    /// Assembled global matrix `Σ_e (s_m M_e + s_k K_e(u))` in CSR form.
    pub fn assemble_operator(
        &self,
        u: &[f64],
        mass_scale: f64,
        tangent_scale: f64,
        extra: Option<&ExtraBlocks>,
    ) -> Result<CsrMatrix> {
        let blocks: Vec<LocalBlock> = (0..self.num_elements())
            .into_par_iter()
            .map(|e| {
                let (m, _) = self.element_operator(e, u, mass_scale, tangent_scale, extra)?;
                Ok(self.local_block(e, m))
            })
            .collect::<Result<_>>()?;
        Ok(assemble_blocks(self.num_free(), &blocks))
    }

    /// Load vector `∫ ρ0 b · N` for a body force per unit mass.
    pub fn body_load(&self, b: impl Fn([f64; 3]) -> [f64; 3] + Sync) -> Vec<f64> {
        let n = self.n_local();
        let parts: Vec<Vec<f64>> = (0..self.num_elements())
            .into_par_iter()
            .map(|e| {
                let g = &self.geometry[e];
                let vals: Vec<[f64; 3]> = g.x.iter().map(|x| b(*x)).collect();
                let mut out = vec![0.0; 3 * n];
                for a in 0..3 {
                    let v: Vec<f64> = vals
                        .iter()
                        .zip(&g.wdet)
                        .map(|(f, w)| self.material.rho0 * w * f[a])
                        .collect();
                    out[a * n..(a + 1) * n].copy_from_slice(&self.tables.project(&v, NODIR));
                }
                out
            })
            .collect();
        let mut r = vec![0.0; self.num_free()];
        for (e, p) in parts.iter().enumerate() {
            self.dofmap.scatter_add(e, p, &mut r);
        }
        r
    }

    /// Quadrature points on local face `lf` of element `e`, using `npts`
    /// Gauss points per in-plane direction.
    pub fn face_points(&self, e: usize, lf: usize, npts: usize) -> Result<Vec<FacePoint>> {
        let rf = ref_faces(3)[lf];
        let rule = gauss_rule(npts)?;
        let basis = self.elem.basis();
        let side_x = if rf.side == 0 { -1.0 } else { 1.0 };
        let (vn, _) = basis.eval(side_x);
        let mut out = Vec::with_capacity(npts * npts);
        for (k2, &t) in rule.points.iter().enumerate() {
            for (k1, &s) in rule.points.iter().enumerate() {
                let mut xi = [0.0; 3];
                xi[rf.normal_axis] = side_x;
                xi[rf.axes[0]] = s;
                xi[rf.axes[1]] = t;
                let (x, j, _) = self.mesh.isoparametric_map(e, xi)?;
                let t1 = [j[0][rf.axes[0]], j[1][rf.axes[0]], j[2][rf.axes[0]]];
                let t2 = [j[0][rf.axes[1]], j[1][rf.axes[1]], j[2][rf.axes[1]]];
                let mut nrm = cross(t1, t2);
                let area = norm(nrm);
                // Orient along J⁻ᵀ e_k, the outward reference normal.
                let jm = Matrix3::from_fn(|r, c| j[r][c]);
                let jit = jm.try_inverse().unwrap_or_else(Matrix3::identity).transpose();
                let refn = jit.column(rf.normal_axis) * side_x;
                if nrm[0] * refn[0] + nrm[1] * refn[1] + nrm[2] * refn[2] < 0.0 {
                    nrm = [-nrm[0], -nrm[1], -nrm[2]];
                }
                let normal = [nrm[0] / area, nrm[1] / area, nrm[2] / area];
                let (va, _) = basis.eval(s);
                let (vb, _) = basis.eval(t);
                let values = self
                    .elem
                    .index_map()
                    .iter()
                    .map(|idx| {
                        let mut v = vn[idx[rf.normal_axis]];
                        v *= va[idx[rf.axes[0]]];
                        v *= vb[idx[rf.axes[1]]];
                        v
                    })
                    .collect();
                out.push(FacePoint {
                    x,
                    normal,
                    weight: rule.weights[k1] * rule.weights[k2] * area,
                    values,
                });
            }
        }
        Ok(out)
    }

    /// Load vector `∫ t̄ · N dΓ` over the facets carrying any of `tags`,
    /// with `t̄ = traction(X, N)` in the reference configuration.
    pub fn traction_load(
        &self,
        tags: &[&str],
        traction: impl Fn([f64; 3], [f64; 3]) -> [f64; 3] + Sync,
    ) -> Result<Vec<f64>> {
        let n = self.n_local();
        let mut facets = Vec::new();
        for tag in tags {
            facets.extend_from_slice(self.mesh.tagged_facets(tag)?);
        }
        let npts = self.rule.len();
        let parts: Vec<(usize, Vec<f64>)> = facets
            .par_iter()
            .map(|&(e, lf)| {
                let mut out = vec![0.0; 3 * n];
                for fp in self.face_points(e, lf, npts)? {
                    let t = traction(fp.x, fp.normal);
                    for a in 0..3 {
                        let wa = fp.weight * t[a];
                        if wa == 0.0 {
                            continue;
                        }
                        for (o, v) in out[a * n..(a + 1) * n].iter_mut().zip(&fp.values) {
                            *o += wa * v;
                        }
                    }
                }
                Ok((e, out))
            })
            .collect::<Result<_>>()?;
        let mut r = vec![0.0; self.num_free()];
        for (e, p) in &parts {
            self.dofmap.scatter_add(*e, p, &mut r);
        }
        Ok(r)
    }

    /// Displacement at reference point `xi` of element `e`.
    pub fn evaluate(&self, u: &[f64], e: usize, xi: [f64; 3]) -> [f64; 3] {
        let n = self.n_local();
        let ue = self.dofmap.gather(e, u);
        let (v, _) = self.elem.shape_eval(xi);
        std::array::from_fn(|a| v.iter().zip(&ue[a * n..(a + 1) * n]).map(|(x, y)| x * y).sum())
    }

    /// Displacement at every volume quadrature point of element `e`.
    pub fn displacement_at_points(&self, u: &[f64], e: usize) -> [Vec<f64>; 3] {
        let n = self.n_local();
        let ue = self.dofmap.gather(e, u);
        std::array::from_fn(|a| self.tables.interp(&ue[a * n..(a + 1) * n], NODIR))
    }

    /// Per-component `L2(Ω0)` norm of `u_h − u_exact`.
    pub fn l2_error(&self, u: &[f64], exact: impl Fn([f64; 3]) -> [f64; 3] + Sync) -> [f64; 3] {
        let sums: Vec<[f64; 3]> = (0..self.num_elements())
            .into_par_iter()
            .map(|e| {
                let uh = self.displacement_at_points(u, e);
                let g = &self.geometry[e];
                let mut s = [0.0; 3];
                for qp in 0..g.wdet.len() {
                    let ue = exact(g.x[qp]);
                    for a in 0..3 {
                        s[a] += g.wdet[qp] * (uh[a][qp] - ue[a]).powi(2);
                    }
                }
                s
            })
            .collect();
        let mut tot = [0.0; 3];
        for s in sums {
            for a in 0..3 {
                tot[a] += s[a];
            }
        }
        tot.map(f64::sqrt)
    }

    /// Condensed consistent mass matrix.
    pub fn condensed_mass(&self) -> Result<CondensedSystem> {
        Ok(self.condensed_operator(&vec![0.0; self.num_free()], 1.0, 0.0, None)?.1)
    }

    /// `L2` projection of a vector field onto the free DOFs.
    pub fn l2_project(
        &self,
        mass: &CondensedSystem,
        f: impl Fn([f64; 3]) -> [f64; 3] + Sync,
        cfg: &PcgConfig,
    ) -> Result<(Vec<f64>, SolveStats)> {
        let rho = self.material.rho0;
        let rhs = self.body_load(|x| {
            let v = f(x);
            [v[0] / rho, v[1] / rho, v[2] / rho]
        });
        Ok(mass.solve(&rhs, cfg)?)
    }

    /// Reference-configuration mass `∫ ρ₀ dV`.
    pub fn total_mass(&self) -> f64 {
        self.material.rho0 * self.geometry.iter().flat_map(|g| g.wdet.iter()).sum::<f64>()
    }
}

/// Assembles element blocks into a CSR matrix of size `n`.
pub fn assemble_blocks(n: usize, blocks: &[LocalBlock]) -> CsrMatrix {
    let groups: Vec<Vec<usize>> = blocks
        .iter()
        .map(|b| b.dofs.iter().filter_map(|d| *d).collect())
        .collect();
    let mut a = CsrMatrix::from_groups(n, groups.iter().map(|g| g.as_slice()));
    for b in blocks {
        a.add_block(&b.dofs, &b.signs, &b.matrix);
    }
    a
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

/// Closed-form displacement field with its time derivatives and gradient.
pub trait DisplacementField: Sync {
    fn displacement(&self, x: [f64; 3], t: f64) -> [f64; 3];
    fn velocity(&self, x: [f64; 3], t: f64) -> [f64; 3];
    fn acceleration(&self, x: [f64; 3], t: f64) -> [f64; 3];
    /// `∂u_a/∂X_I`.
    fn gradient(&self, x: [f64; 3], t: f64) -> Matrix3<f64>;
}

/// Manufactured displacement fields, all of the form `u = (u_x(X, t), 0, 0)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnalyticField {
    /// `u_x = 1.9 sin X − X`, time independent.
    StaticSine,
    /// `u_x = sin(πX/2) sin(2πt)`.
    SineSine,
    /// `u_x = X⁴ sin(2πt)`.
    QuarticSine,
}

impl AnalyticField {
    pub const REGISTRY: [(&'static str, AnalyticField); 3] = [
        ("static-sine", AnalyticField::StaticSine),
        ("sine-sine", AnalyticField::SineSine),
        ("quartic-sine", AnalyticField::QuarticSine),
    ];

    pub fn from_name(name: &str) -> Option<Self> {
        Self::REGISTRY.iter().find(|(n, _)| *n == name).map(|(_, f)| *f)
    }

    pub fn name(self) -> &'static str {
        Self::REGISTRY.iter().find(|(_, f)| *f == self).unwrap().0
    }

    pub fn is_static(self) -> bool {
        self == AnalyticField::StaticSine
    }

    /// `(g(X), g'(X))` spatial profile and `(h, ḣ, ḧ)` time factor.
    fn parts(self, x: f64, t: f64) -> ((f64, f64), (f64, f64, f64)) {
        use std::f64::consts::PI;
        let w = 2.0 * PI;
        let sine_time = ((w * t).sin(), w * (w * t).cos(), -w * w * (w * t).sin());
        match self {
            AnalyticField::StaticSine => ((1.9 * x.sin() - x, 1.9 * x.cos() - 1.0), (1.0, 0.0, 0.0)),
            AnalyticField::SineSine => (
                ((0.5 * PI * x).sin(), 0.5 * PI * (0.5 * PI * x).cos()),
                sine_time,
            ),
            AnalyticField::QuarticSine => ((x.powi(4), 4.0 * x.powi(3)), sine_time),
        }
    }
}

impl DisplacementField for AnalyticField {
    fn displacement(&self, x: [f64; 3], t: f64) -> [f64; 3] {
        let ((g, _), (h, _, _)) = self.parts(x[0], t);
        [g * h, 0.0, 0.0]
    }

    fn velocity(&self, x: [f64; 3], t: f64) -> [f64; 3] {
        let ((g, _), (_, hd, _)) = self.parts(x[0], t);
        [g * hd, 0.0, 0.0]
    }

    fn acceleration(&self, x: [f64; 3], t: f64) -> [f64; 3] {
        let ((g, _), (_, _, hdd)) = self.parts(x[0], t);
        [g * hdd, 0.0, 0.0]
    }

    fn gradient(&self, x: [f64; 3], t: f64) -> Matrix3<f64> {
        let ((_, dg), (h, _, _)) = self.parts(x[0], t);
        let mut m = Matrix3::zeros();
        m[(0, 0)] = dg * h;
        m
    }
}

/// Finite-difference step used for the divergence of the stress.
pub const MMS_FD_STEP: f64 = 1e-5;

fn pk1_of_field(field: &dyn DisplacementField, mat: &NeoHookean, x: [f64; 3], t: f64) -> Result<Matrix3<f64>> {
    let f = Matrix3::identity() + field.gradient(x, t);
    Ok(mat.pk1_stress(&f)?)
}

/// Body force per unit mass `ü − Div P / ρ0` reproducing `field`, with the
/// divergence taken by central differences of step `h`.
pub fn mms_body_force(
    field: &dyn DisplacementField,
    mat: &NeoHookean,
    x: [f64; 3],
    t: f64,
    h: f64,
) -> Result<[f64; 3]> {
    let acc = field.acceleration(x, t);
    let mut div = [0.0; 3];
    for i in 0..3 {
        let mut xp = x;
        let mut xm = x;
        xp[i] += h;
        xm[i] -= h;
        let pp = pk1_of_field(field, mat, xp, t)?;
        let pm = pk1_of_field(field, mat, xm, t)?;
        for a in 0..3 {
            div[a] += (pp[(a, i)] - pm[(a, i)]) / (2.0 * h);
        }
    }
    Ok(std::array::from_fn(|a| acc[a] - div[a] / mat.rho0))
}

/// Reference traction `P·N` of the exact field.
pub fn mms_traction(
    field: &dyn DisplacementField,
    mat: &NeoHookean,
    x: [f64; 3],
    normal: [f64; 3],
    t: f64,
) -> Result<[f64; 3]> {
    let p = pk1_of_field(field, mat, x, t)?;
    Ok(std::array::from_fn(|a| (0..3).map(|i| p[(a, i)] * normal[i]).sum()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis1d::{basis, BasisKind};
    use crate::meshdof::{gen_box_mesh, gen_cube_mesh};
    use rand::{Rng, SeedableRng};

    fn model(n: usize, p: usize, tag: BasisTag, dirichlet: &[DirichletSpec]) -> FeModel {
        let mesh = Arc::new(gen_cube_mesh(n, 1.0).unwrap());
        let b = Arc::new(basis(p, BasisKind::new(tag)).unwrap());
        let mat = NeoHookean::from_engineering(1000.0, 0.3, 1.0).unwrap();
        FeModel::new(mesh, b, Integration::Consistent, mat, dirichlet).unwrap()
    }

    #[test]
    fn interp_and_project_are_adjoint() {
        let m = model(1, 3, BasisTag::SdmeM, &[]);
        let t = &m.tables;
        let mut rng = rand::rngs::StdRng::seed_from_u64(1);
        let u: Vec<f64> = (0..t.m.pow(3)).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..t.q.pow(3)).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for d in [NODIR, DIRS[0], DIRS[2]] {
            let iu = t.interp(&u, d);
            let pv = t.project(&v, d);
            let a: f64 = iu.iter().zip(&v).map(|(x, y)| x * y).sum();
            let b: f64 = u.iter().zip(&pv).map(|(x, y)| x * y).sum();
            assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
        }
        // Interpolation agrees with direct shape-function evaluation.
        let pts = crate::quadrature::tensor_points(&m.rule, 3);
        let iu = t.interp(&u, NODIR);
        for (k, (xi, _)) in pts.iter().enumerate().step_by(7) {
            let (vals, _) = m.elem.shape_eval(*xi);
            let direct: f64 = vals.iter().zip(&u).map(|(x, y)| x * y).sum();
            assert!((direct - iu[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_and_translation_give_no_force() {
        let m = model(1, 3, BasisTag::ModalJacobi, &[]);
        let n = m.n_local();
        let r = m.element_internal_force(0, &vec![0.0; 3 * n]).unwrap();
        assert!(r.iter().all(|v| v.abs() < 1e-13));
        // Translation: vertex modes of the standard basis sum to one.
        let mut u = vec![0.0; 3 * n];
        for i in 0..n {
            if matches!(m.elem.entity(i), crate::tensorelem::EntityClass::Vertex(_)) {
                u[i] = 0.3;
                u[n + i] = -0.2;
                u[2 * n + i] = 0.7;
            }
        }
        let r = m.element_internal_force(0, &u).unwrap();
        assert!(r.iter().all(|v| v.abs() < 1e-11));
    }

    fn project_field(m: &FeModel, f: impl Fn([f64; 3]) -> [f64; 3] + Sync) -> Vec<f64> {
        let mass = m.condensed_mass().unwrap();
        let cfg = PcgConfig {
            tol: 1e-14,
            ..PcgConfig::default()
        };
        m.l2_project(&mass, f, &cfg).unwrap().0
    }

    #[test]
    fn homogeneous_stretch_matches_surface_forces() {
        for tag in [BasisTag::ModalJacobi, BasisTag::SdmeH, BasisTag::LagrangeGll] {
            let m = model(1, 2, tag, &[]);
            let u = project_field(&m, |x| [0.1 * x[0], 0.0, 0.0]);
            let r = m.internal_force(&u).unwrap();
            let f = Matrix3::from_diagonal(&nalgebra::Vector3::new(1.1, 1.0, 1.0));
            let p = m.material().pk1_stress(&f).unwrap();
            let tags = ["xmin", "xmax", "ymin", "ymax", "zmin", "zmax"];
            let load = m
                .traction_load(&tags, |_, nrm| std::array::from_fn(|a| (0..3).map(|i| p[(a, i)] * nrm[i]).sum()))
                .unwrap();
            let scale = load.iter().fold(0.0f64, |s, v| s.max(v.abs()));
            for (a, b) in r.iter().zip(&load) {
                assert!((a - b).abs() < 1e-8 * scale, "{tag}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn tangent_at_zero_is_linear_elasticity_and_symmetric() {
        let m = model(1, 2, BasisTag::SdmeM, &[]);
        let n = m.n_local();
        let k = m.element_tangent(0, &vec![0.0; 3 * n]).unwrap();
        assert!(k.is_symmetric(1e-10));
        // Energy of a random field against λ(div u)² + 2μ ε:ε.
        let mut rng = rand::rngs::StdRng::seed_from_u64(3);
        let u: Vec<f64> = (0..3 * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ku = k.matvec(&u);
        let energy: f64 = u.iter().zip(&ku).map(|(a, b)| a * b).sum();
        let mat = m.material();
        let g = &m.geometry[0];
        let mut grads = Vec::new();
        for a in 0..3 {
            for dir in DIRS {
                grads.push(m.tables.interp(&u[a * n..(a + 1) * n], dir));
            }
        }
        let mut e2 = 0.0;
        for qp in 0..g.wdet.len() {
            let h = Matrix3::from_fn(|a, i| (0..3).map(|d| grads[a * 3 + d][qp] * g.jinv[qp][d][i]).sum());
            let eps = (h + h.transpose()) * 0.5;
            e2 += g.wdet[qp] * (mat.lambda_lame * eps.trace().powi(2) + 2.0 * mat.mu * eps.component_mul(&eps).sum());
        }
        assert!((energy - e2).abs() < 1e-10 * e2);
    }

    #[test]
    fn element_tangent_matches_finite_differences() {
        for tag in BasisTag::ALL {
            let m = model(1, 3, tag, &[]);
            let n = m.n_local();
            let mut rng = rand::rngs::StdRng::seed_from_u64(11);
            let u: Vec<f64> = (0..3 * n).map(|_| rng.gen_range(-0.01..0.01)).collect();
            let k = m.element_tangent(0, &u).unwrap();
            let dir: Vec<f64> = (0..3 * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let h = 1e-6;
            let up: Vec<f64> = u.iter().zip(&dir).map(|(a, b)| a + h * b).collect();
            let um: Vec<f64> = u.iter().zip(&dir).map(|(a, b)| a - h * b).collect();
            let rp = m.element_internal_force(0, &up).unwrap();
            let rm = m.element_internal_force(0, &um).unwrap();
            let fd: Vec<f64> = rp.iter().zip(&rm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
            let kd = k.matvec(&dir);
            let num: f64 = fd.iter().zip(&kd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let den: f64 = kd.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!(num <= 1e-5 * den, "{tag}: {}", num / den);
            assert!(k.is_symmetric(1e-10));
        }
    }

    #[test]
    fn mass_totals_and_lumping() {
        for tag in BasisTag::ALL {
            let m = model(2, 3, tag, &[]);
            // Constants are projected since SDME vertex modes are not hats.
            let ones = project_field(&m, |_| [1.0, 1.0, 1.0]);
            let mm = m.assemble_operator(&vec![0.0; m.num_free()], 1.0, 0.0, None).unwrap();
            let mut y = vec![0.0; ones.len()];
            mm.matvec(&ones, &mut y);
            let tot: f64 = (0..ones.len()).map(|i| ones[i] * y[i]).sum();
            assert!((tot - 3.0).abs() < 1e-10, "{tag}: {tot}");
        }
        let m = model(1, 2, BasisTag::SdmeM, &[]);
        assert!((m.total_mass() - 1.0).abs() < 1e-14);

        let mesh = Arc::new(gen_cube_mesh(1, 1.0).unwrap());
        let b = Arc::new(basis(4, BasisKind::new(BasisTag::LagrangeGll)).unwrap());
        let mat = NeoHookean::from_engineering(1000.0, 0.3, 1.0).unwrap();
        let lm = FeModel::new(mesh, b, Integration::Collocation, mat, &[]).unwrap();
        let ms = lm.element_mass_scalar(0);
        for i in 0..ms.rows() {
            for j in 0..ms.cols() {
                if i != j {
                    assert_eq!(ms[(i, j)], 0.0);
                }
            }
        }
        assert!((lm.total_mass() - 1.0).abs() < 1e-13);
    }

    #[test]
    fn modal_mass_is_spd() {
        let m = model(1, 2, BasisTag::ModalJacobi, &[]);
        let c = crate::densela::cond2_spd(&m.element_mass_scalar(0)).unwrap();
        assert!(c.is_finite() && c > 1.0);
    }

    #[test]
    fn traction_examples() {
        let m = model(1, 2, BasisTag::SdmeM, &[]);
        let ones = project_field(&m, |_| [0.0, 0.0, 1.0]);
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let load = m.traction_load(&["zmax"], |_, _| [0.0, 0.0, 2.5]).unwrap();
        assert!((dot(&load, &ones) - 2.5).abs() < 1e-10);
        let zero = m.traction_load(&["zmax"], |_, _| [0.0; 3]).unwrap();
        assert!(zero.iter().all(|v| *v == 0.0));
        // Linear traction t_z = x + 2y over the unit face: total 1.5.
        let load = m.traction_load(&["zmax"], |x, _| [0.0, 0.0, x[0] + 2.0 * x[1]]).unwrap();
        assert!((dot(&load, &ones) - 1.5).abs() < 1e-10);
        // Outward normals.
        let fp = m.face_points(0, 0, 2).unwrap();
        assert!((fp[0].normal[0] + 1.0).abs() < 1e-14);
        assert!(matches!(m.traction_load(&["nope"], |_, _| [0.0; 3]), Err(FemError::Mesh(_))));
    }

    struct Custom<F: Fn([f64; 3], f64) -> ([f64; 3], Matrix3<f64>) + Sync>(F);
    impl<F: Fn([f64; 3], f64) -> ([f64; 3], Matrix3<f64>) + Sync> DisplacementField for Custom<F> {
        fn displacement(&self, x: [f64; 3], t: f64) -> [f64; 3] {
            (self.0)(x, t).0
        }
        fn velocity(&self, _: [f64; 3], _: f64) -> [f64; 3] {
            [0.0; 3]
        }
        fn acceleration(&self, _: [f64; 3], t: f64) -> [f64; 3] {
            [-(t.sin()), 0.0, 0.0]
        }
        fn gradient(&self, x: [f64; 3], t: f64) -> Matrix3<f64> {
            (self.0)(x, t).1
        }
    }

    #[test]
    fn body_force_examples() {
        let mat = NeoHookean::from_engineering(1000.0, 0.3, 1.0).unwrap();
        // Spatially constant u = (sin t, 0, 0): f = ü.
        let c = Custom(|_, t: f64| ([t.sin(), 0.0, 0.0], Matrix3::zeros()));
        let f = mms_body_force(&c, &mat, [0.3, 0.2, 0.1], 0.7, MMS_FD_STEP).unwrap();
        assert!((f[0] + 0.7f64.sin()).abs() < 1e-12 && f[1] == 0.0);
        // Homogeneous static stretch: zero body force apart from ü.
        let h = Custom(|x: [f64; 3], _| {
            let mut g = Matrix3::zeros();
            g[(0, 0)] = 0.2;
            ([0.2 * x[0], 0.0, 0.0], g)
        });
        let f = mms_body_force(&h, &mat, [0.3, 0.2, 0.1], 0.0, MMS_FD_STEP).unwrap();
        assert!(f.iter().all(|v| v.abs() < 1e-6));
        // Registry fields.
        assert_eq!(AnalyticField::from_name("quartic-sine"), Some(AnalyticField::QuarticSine));
        assert!(AnalyticField::from_name("zero").is_none());
        let u = AnalyticField::SineSine.displacement([1.0, 0.0, 0.0], 0.25);
        assert!((u[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn body_force_of_static_sine_matches_closed_form() {
        // 1D state: F = diag(1 + g', 1, 1); P_xx = μ(F − 1/F) + λ ln F / F.
        let mat = NeoHookean::from_engineering(1000.0, 0.3, 1.0).unwrap();
        let x = 0.4f64;
        let fx = |x: f64| 1.9 * x.cos();
        let dfx = |x: f64| -1.9 * x.sin();
        let dp = |f: f64| mat.mu * (1.0 + 1.0 / (f * f)) + mat.lambda_lame * (1.0 - f.ln()) / (f * f);
        let expect = -dp(fx(x)) * dfx(x);
        let f = mms_body_force(&AnalyticField::StaticSine, &mat, [x, 0.5, 0.5], 0.0, MMS_FD_STEP).unwrap();
        assert!((f[0] - expect).abs() < 1e-4 * expect.abs(), "{} vs {expect}", f[0]);
        assert!(f[1].abs() < 1e-6 && f[2].abs() < 1e-6);
    }

    #[test]
    fn interpolant_error_of_exact_fields_vanishes() {
        let m = model(2, 2, BasisTag::SdmeH, &[]);
        let exact = |x: [f64; 3]| [x[0] - 2.0 * x[1], 0.5 * x[2], 1.0 + x[0] * x[1] * x[2]];
        let u = project_field(&m, exact);
        let e = m.l2_error(&u, exact);
        assert!(e.iter().all(|v| *v < 1e-12), "{e:?}");
    }

    #[test]
    fn global_tangent_consistency() {
        for tag in BasisTag::ALL {
            let mesh = Arc::new(gen_box_mesh([2, 1, 1], [1.0, 0.5, 0.5], [0.0; 3]).unwrap());
            let b = Arc::new(basis(3, BasisKind::new(tag)).unwrap());
            let mat = NeoHookean::from_engineering(1000.0, 0.3, 1.0).unwrap();
            let m = FeModel::new(mesh, b, Integration::Consistent, mat, &[DirichletSpec::all("xmin")]).unwrap();
            let mut rng = rand::rngs::StdRng::seed_from_u64(21);
            let u: Vec<f64> = (0..m.num_free()).map(|_| rng.gen_range(-0.01..0.01)).collect();
            let du: Vec<f64> = (0..m.num_free()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let k = m.assemble_operator(&u, 0.0, 1.0, None).unwrap();
            assert!(k.is_symmetric(1e-10));
            let mut kd = vec![0.0; du.len()];
            k.matvec(&du, &mut kd);
            let h = 1e-6;
            let up: Vec<f64> = u.iter().zip(&du).map(|(a, b)| a + h * b).collect();
            let um: Vec<f64> = u.iter().zip(&du).map(|(a, b)| a - h * b).collect();
            let rp = m.internal_force(&up).unwrap();
            let rm = m.internal_force(&um).unwrap();
            let num: f64 = (0..du.len()).map(|i| ((rp[i] - rm[i]) / (2.0 * h) - kd[i]).powi(2)).sum::<f64>().sqrt();
            let den: f64 = kd.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(num <= 1e-5 * den, "{tag}: {}", num / den);
        }
    }

    #[test]
    fn condensed_operator_matches_assembled() {
        let m = model(2, 3, BasisTag::ModalJacobi, &[DirichletSpec::all("xmin")]);
        let mut rng = rand::rngs::StdRng::seed_from_u64(5);
        let u: Vec<f64> = (0..m.num_free()).map(|_| rng.gen_range(-0.01..0.01)).collect();
        let full = m.assemble_operator(&u, 2.0, 1.0, None).unwrap();
        let (r, cond) = m.condensed_operator(&u, 2.0, 1.0, None).unwrap();
        let r2 = m.internal_force(&u).unwrap();
        assert!(r.iter().zip(&r2).all(|(a, b)| (a - b).abs() < 1e-12));
        let b: Vec<f64> = (0..m.num_free()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cfg = PcgConfig {
            tol: 1e-13,
            ..PcgConfig::default()
        };
        let (x1, _) = cond.solve(&b, &cfg).unwrap();
        let (x2, _) = crate::solver::pcg(&full, &b, &cfg).unwrap();
        let scale = x2.iter().fold(0.0f64, |s, v| s.max(v.abs()));
        assert!(x1.iter().zip(&x2).all(|(a, b)| (a - b).abs() < 1e-8 * scale));
    }

    #[test]
    fn two_element_assembly_by_hand() {
        let mesh = Arc::new(gen_box_mesh([2, 1, 1], [2.0, 1.0, 1.0], [0.0; 3]).unwrap());
        let b = Arc::new(basis(1, BasisKind::new(BasisTag::ModalJacobi)).unwrap());
        let mat = NeoHookean::from_engineering(1000.0, 0.3, 1.0).unwrap();
        let m = FeModel::new(mesh, b, Integration::Consistent, mat, &[]).unwrap();
        let zero = vec![0.0; m.num_free()];
        let k = m.assemble_operator(&zero, 0.0, 1.0, None).unwrap().to_dense();
        let mut hand = DenseMatrix::zeros(m.num_free(), m.num_free());
        for e in 0..2 {
            let ke = m.element_tangent(e, &vec![0.0; 24]).unwrap();
            let dofs = m.dofmap().local_dofs(e);
            for (i, (di, si)) in dofs.iter().enumerate() {
                for (j, (dj, sj)) in dofs.iter().enumerate() {
                    hand[(di.unwrap(), dj.unwrap())] += si * sj * ke[(i, j)];
                }
            }
        }
        assert!(k.as_slice().iter().zip(hand.as_slice()).all(|(a, b)| (a - b).abs() < 1e-12));
        crate::densela::Cholesky::factor(&{
            let mm = m.assemble_operator(&zero, 1.0, 0.0, None).unwrap();
            mm.to_dense()
        })
        .unwrap();
    }

    #[test]
    fn all_dirichlet_gives_empty_system() {
        let tags: Vec<DirichletSpec> = ["xmin", "xmax", "ymin", "ymax", "zmin", "zmax"]
            .iter()
            .map(|t| DirichletSpec::all(t))
            .collect();
        let m = model(1, 1, BasisTag::ModalJacobi, &tags);
        assert_eq!(m.num_free(), 0);
        assert_eq!(m.assemble_operator(&[], 1.0, 1.0, None).unwrap().n(), 0);
    }

    #[test]
    fn inversion_reported() {
        let m = model(1, 1, BasisTag::ModalJacobi, &[]);
        let n = m.n_local();
        let mut u = vec![0.0; 3 * n];
        for i in 0..n {
            let bits = crate::tensorelem::bits_of_vertex(match m.elem.entity(i) {
                crate::tensorelem::EntityClass::Vertex(v) => v,
                _ => unreachable!(),
            });
            // Map x to −x: F_xx = −1.
            u[i] = if bits[0] == 1 { -2.0 } else { 0.0 };
        }
        assert!(matches!(
            m.element_internal_force(0, &u),
            Err(FemError::ElementInversion { elem: 0, .. })
        ));
    }
}
