//! Frictionless penalty contact of the deformable body against rigid planes.
//!
//! The penalty pressure `t_N = ε⟨−g⟩` is evaluated at surface quadrature
//! points, so the active set is a set of points rather than of nodes.

use std::collections::BTreeMap;

use rayon::prelude::*;
use thiserror::Error;

use crate::densela::DenseMatrix;
use crate::femcore::{FacePoint, FeModel, FemError};

#[derive(Debug, Error)]
pub enum ContactError {
    #[error("invalid obstacle: {0}")]
    InvalidObstacle(String),
    #[error("invalid contact parameter: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Fem(#[from] FemError),
}

pub type Result<T> = std::result::Result<T, ContactError>;

/// Rigid half-space bounded by a plane; the normal points into the
/// admissible region.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidObstacle {
    pub point: [f64; 3],
    pub normal: [f64; 3],
}

impl RigidObstacle {
    /// Normalizes `normal`; fails for a zero or non-finite direction.
    pub fn new(point: [f64; 3], normal: [f64; 3]) -> Result<Self> {
        let len = normal.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(len > 0.0) || !len.is_finite() || point.iter().any(|v| !v.is_finite()) {
            return Err(ContactError::InvalidObstacle(format!(
                "point {point:?} and normal {normal:?} do not define a plane"
            )));
        }
        Ok(RigidObstacle {
            point,
            normal: normal.map(|v| v / len),
        })
    }

    /// Signed distance; negative values mean penetration.
    pub fn gap(&self, x: [f64; 3]) -> f64 {
        (0..3).map(|i| (x[i] - self.point[i]) * self.normal[i]).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactParams {
    /// Penalty stiffness.
    pub eps_n: f64,
    /// Penalty increment applied when a converged step still penetrates
    /// more than `gap_tol`.
    pub deps_n: f64,
    pub gap_tol: f64,
    /// Relative change of the pressure field allowed between the last two
    /// Newton iterates.
    pub stress_tol: f64,
    /// Gauss points per surface direction; `None` selects `P + 1`.
    pub quad_points: Option<usize>,
    /// Maximum number of penalty increments within one step.
    pub max_increments: usize,
}

impl Default for ContactParams {
    fn default() -> Self {
        ContactParams {
            eps_n: 1e4,
            deps_n: 1e3,
            gap_tol: 1e-3,
            stress_tol: 1e-2,
            quad_points: None,
            max_increments: 200,
        }
    }
}

impl ContactParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| ContactError::InvalidParams(format!("{what} must be positive, got {v}"));
        if !(self.eps_n > 0.0) {
            return Err(bad("eps_n", self.eps_n));
        }
        if !(self.deps_n >= 0.0) {
            return Err(ContactError::InvalidParams(format!(
                "deps_n must be non-negative, got {}",
                self.deps_n
            )));
        }
        if !(self.gap_tol > 0.0) {
            return Err(bad("gap_tol", self.gap_tol));
        }
        if !(self.stress_tol > 0.0) {
            return Err(bad("stress_tol", self.stress_tol));
        }
        if self.quad_points == Some(0) {
            return Err(ContactError::InvalidParams("quad_points must be at least 1".into()));
        }
        Ok(())
    }
}

/// Quadrature points of the candidate contact surface.
#[derive(Debug, Clone)]
pub struct ContactSurface {
    facets: Vec<(usize, Vec<FacePoint>)>,
}

impl ContactSurface {
    pub fn new(model: &FeModel, tags: &[&str], params: &ContactParams) -> Result<Self> {
        params.validate()?;
        let npts = params.quad_points.unwrap_or(model.element().order() + 1);
        let mut list = Vec::new();
        for tag in tags {
            list.extend_from_slice(model.mesh().tagged_facets(tag).map_err(FemError::from)?);
        }
        let facets = list
            .iter()
            .map(|&(e, lf)| Ok((e, model.face_points(e, lf, npts)?)))
            .collect::<std::result::Result<_, FemError>>()?;
        Ok(ContactSurface { facets })
    }

    pub fn num_points(&self) -> usize {
        self.facets.iter().map(|(_, p)| p.len()).sum()
    }

    /// Reference positions of the surface points, in evaluation order.
    pub fn reference_points(&self) -> Vec<[f64; 3]> {
        self.facets.iter().flat_map(|(_, p)| p.iter().map(|q| q.x)).collect()
    }

    pub fn total_area(&self) -> f64 {
        self.facets.iter().flat_map(|(_, p)| p.iter().map(|q| q.weight)).sum()
    }
}

/// Contact forces, stiffness and point data at one displacement state.
#[derive(Debug, Clone)]
pub struct ContactState {
    /// Global force pushing the body out of the obstacle.
    pub force: Vec<f64>,
    /// Element-local stiffness blocks keyed by element.
    pub matrices: BTreeMap<usize, DenseMatrix>,
    pub gaps: Vec<f64>,
    pub pressures: Vec<f64>,
    /// Largest penetration `max(−g, 0)`.
    pub max_penetration: f64,
    /// Stored penalty energy `½ε∫⟨−g⟩² dΓ`.
    pub energy: f64,
    /// Resultant normal force `∫ t_N dΓ`.
    pub total_force: f64,
    pub num_active: usize,
}

impl ContactState {
    pub fn is_active(&self) -> bool {
        self.num_active > 0
    }

    /// Relative change of the pressure field against a previous state.
    pub fn pressure_change(&self, prev: &ContactState) -> f64 {
        let diff = self
            .pressures
            .iter()
            .zip(&prev.pressures)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let scale = self.pressures.iter().fold(0.0f64, |m, p| m.max(p.abs()));
        if diff == 0.0 {
            0.0
        } else {
            diff / scale.max(f64::MIN_POSITIVE)
        }
    }
}

/// Penalty force and stiffness at displacement `u` (free-DOF vector).
pub fn contact_contribution(
    model: &FeModel,
    surface: &ContactSurface,
    obstacle: &RigidObstacle,
    eps_n: f64,
    u: &[f64],
) -> ContactState {
    let n = model.n_local();
    let nrm = obstacle.normal;
    struct Part {
        elem: usize,
        force: Vec<f64>,
        matrix: Option<DenseMatrix>,
        gaps: Vec<f64>,
        pressures: Vec<f64>,
        energy: f64,
        total: f64,
    }
    let parts: Vec<Part> = surface
        .facets
        .par_iter()
        .map(|(e, pts)| {
            let ue = model.dofmap().gather(*e, u);
            let mut force = vec![0.0; 3 * n];
            let mut matrix: Option<DenseMatrix> = None;
            let mut gaps = Vec::with_capacity(pts.len());
            let mut pressures = Vec::with_capacity(pts.len());
            let (mut energy, mut total) = (0.0, 0.0);
            for fp in pts {
                let disp: [f64; 3] =
                    std::array::from_fn(|a| fp.values.iter().zip(&ue[a * n..(a + 1) * n]).map(|(x, y)| x * y).sum());
                let x = std::array::from_fn(|a| fp.x[a] + disp[a]);
                let g = obstacle.gap(x);
                gaps.push(g);
                if g >= 0.0 {
                    pressures.push(0.0);
                    continue;
                }
                let t_n = eps_n * (-g);
                pressures.push(t_n);
                energy += 0.5 * eps_n * g * g * fp.weight;
                total += t_n * fp.weight;
                for a in 0..3 {
                    let wa = fp.weight * t_n * nrm[a];
                    for (f, v) in force[a * n..(a + 1) * n].iter_mut().zip(&fp.values) {
                        *f += wa * v;
                    }
                }
                let k = matrix.get_or_insert_with(|| DenseMatrix::zeros(3 * n, 3 * n));
                for a in 0..3 {
                    for b in 0..3 {
                        let s = fp.weight * eps_n * nrm[a] * nrm[b];
                        if s == 0.0 {
                            continue;
                        }
                        for i in 0..n {
                            let si = s * fp.values[i];
                            if si == 0.0 {
                                continue;
                            }
                            let row = &mut k.row_mut(a * n + i)[b * n..(b + 1) * n];
                            for (r, v) in row.iter_mut().zip(&fp.values) {
                                *r += si * v;
                            }
                        }
                    }
                }
            }
            Part {
                elem: *e,
                force,
                matrix,
                gaps,
                pressures,
                energy,
                total,
            }
        })
        .collect();
    let mut out = ContactState {
        force: vec![0.0; model.num_free()],
        matrices: BTreeMap::new(),
        gaps: Vec::new(),
        pressures: Vec::new(),
        max_penetration: 0.0,
        energy: 0.0,
        total_force: 0.0,
        num_active: 0,
    };
    for p in parts {
        model.dofmap().scatter_add(p.elem, &p.force, &mut out.force);
        if let Some(m) = p.matrix {
            match out.matrices.get_mut(&p.elem) {
                Some(k) => k.add_scaled(1.0, &m),
                None => {
                    out.matrices.insert(p.elem, m);
                }
            }
        }
        for (&g, &t) in p.gaps.iter().zip(&p.pressures) {
            out.max_penetration = out.max_penetration.max(-g);
            if t > 0.0 {
                out.num_active += 1;
            }
        }
        out.gaps.extend(p.gaps);
        out.pressures.extend(p.pressures);
        out.energy += p.energy;
        out.total_force += p.total;
    }
    out
}

/// CSV header of the contact pressure profile.
pub const PRESSURE_CSV_HEADER: &str = "s,x,y,z,t_N";

/// Pressure at every surface point, ordered by the coordinate `s` along the
/// in-plane axis least aligned with the obstacle normal.
pub fn pressure_profile_csv(surface: &ContactSurface, obstacle: &RigidObstacle, state: &ContactState) -> String {
    let pts = surface.reference_points();
    let axis = (0..3)
        .min_by(|&a, &b| obstacle.normal[a].abs().total_cmp(&obstacle.normal[b].abs()))
        .unwrap_or(0);
    let mut t = [0.0; 3];
    t[axis] = 1.0;
    let dn: f64 = obstacle.normal[axis];
    let t: [f64; 3] = std::array::from_fn(|i| t[i] - dn * obstacle.normal[i]);
    let tl = t.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut rows: Vec<(f64, [f64; 3], f64)> = pts
        .iter()
        .zip(&state.pressures)
        .map(|(x, p)| ((0..3).map(|i| x[i] * t[i] / tl).sum(), *x, *p))
        .collect();
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out = String::from(PRESSURE_CSV_HEADER);
    out.push('\n');
    for (s, x, p) in rows {
        out.push_str(&format!("{s:.5e},{:.5e},{:.5e},{:.5e},{p:.5e}\n", x[0], x[1], x[2]));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis1d::{basis, BasisKind, BasisTag};
    use crate::femcore::Integration;
    use crate::material::NeoHookean;
    use crate::meshdof::gen_cube_mesh;
    use std::sync::Arc;

    fn cube_model(p: usize, tag: BasisTag) -> FeModel {
        let mesh = Arc::new(gen_cube_mesh(1, 1.0).unwrap());
        let b = Arc::new(basis(p, BasisKind::new(tag)).unwrap());
        let mat = NeoHookean::from_engineering(1000.0, 0.3, 1.0).unwrap();
        FeModel::new(mesh, b, Integration::Consistent, mat, &[]).unwrap()
    }

    #[test]
    fn gap_examples() {
        let o = RigidObstacle::new([0.0, 1.0, 0.0], [0.0, 2.0, 0.0]).unwrap();
        assert_eq!(o.gap([3.0, 1.0, -2.0]), 0.0);
        assert!((o.gap([0.0, 1.1, 0.0]) - 0.1).abs() < 1e-15);
        assert!((o.gap([0.0, 0.95, 0.0]) + 0.05).abs() < 1e-15);
        assert!(RigidObstacle::new([0.0; 3], [0.0; 3]).is_err());
    }

    #[test]
    fn params_validation() {
        assert!(ContactParams::default().validate().is_ok());
        let p = ContactParams {
            eps_n: 0.0,
            ..ContactParams::default()
        };
        assert!(p.validate().is_err());
    }

    #[test]
    fn separated_body_has_no_contact() {
        let m = cube_model(2, BasisTag::SdmeM);
        let params = ContactParams::default();
        let s = ContactSurface::new(&m, &["ymin"], &params).unwrap();
        let o = RigidObstacle::new([0.0, -0.01, 0.0], [0.0, 1.0, 0.0]).unwrap();
        let c = contact_contribution(&m, &s, &o, 1e4, &vec![0.0; m.num_free()]);
        assert!(c.force.iter().all(|v| *v == 0.0));
        assert!(c.matrices.is_empty() && !c.is_active());
        assert_eq!(s.num_points(), 9);
    }

    #[test]
    fn uniform_penetration_force() {
        for tag in [BasisTag::ModalJacobi, BasisTag::SdmeH] {
            let m = cube_model(2, tag);
            let params = ContactParams::default();
            let s = ContactSurface::new(&m, &["ymin"], &params).unwrap();
            let d = 0.003;
            let o = RigidObstacle::new([0.0, d, 0.0], [0.0, 1.0, 0.0]).unwrap();
            let c = contact_contribution(&m, &s, &o, 1e4, &vec![0.0; m.num_free()]);
            assert!((c.total_force - 1e4 * d).abs() < 1e-10);
            assert!((c.max_penetration - d).abs() < 1e-15);
            assert!(c.pressures.iter().all(|p| *p >= 0.0));
            // Sum of y forces against the coefficients of the constant field.
            let mass = m.condensed_mass().unwrap();
            let ones = m
                .l2_project(&mass, |_| [0.0, 1.0, 0.0], &crate::solver::PcgConfig::default())
                .unwrap()
                .0;
            let fy: f64 = c.force.iter().zip(&ones).map(|(a, b)| a * b).sum();
            assert!((fy - 1e4 * d).abs() < 1e-8);
            // Stiffness is a sum of rank-one normal terms: PSD.
            let k = &c.matrices[&0];
            assert!(k.is_symmetric(1e-14));
            let eig = crate::densela::sym_eig(k).unwrap();
            assert!(eig.values[0] > -1e-9 * eig.values.last().unwrap());
        }
    }

    #[test]
    fn contact_stiffness_matches_force_derivative() {
        let m = cube_model(2, BasisTag::SdmeK);
        let params = ContactParams::default();
        let s = ContactSurface::new(&m, &["ymin"], &params).unwrap();
        let o = RigidObstacle::new([0.0, 0.1, 0.0], [0.1, 1.0, 0.05]).unwrap();
        let nf = m.num_free();
        let u: Vec<f64> = (0..nf).map(|i| 1e-3 * ((i as f64) * 0.37).sin()).collect();
        let du: Vec<f64> = (0..nf).map(|i| ((i as f64) * 1.3).cos()).collect();
        let h = 1e-7;
        let up: Vec<f64> = u.iter().zip(&du).map(|(a, b)| a + h * b).collect();
        let um: Vec<f64> = u.iter().zip(&du).map(|(a, b)| a - h * b).collect();
        let c = contact_contribution(&m, &s, &o, 1e4, &u);
        let fp = contact_contribution(&m, &s, &o, 1e4, &up).force;
        let fm = contact_contribution(&m, &s, &o, 1e4, &um).force;
        let k = &c.matrices[&0];
        let kd = k.matvec(&m.dofmap().gather(0, &du));
        let mut kg = vec![0.0; nf];
        m.dofmap().scatter_add(0, &kd, &mut kg);
        let err: f64 = (0..nf).map(|i| ((fm[i] - fp[i]) / (2.0 * h) - kg[i]).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = kg.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(err < 1e-5 * scale, "{}", err / scale);
    }

    #[test]
    fn pressure_profile_is_sorted_csv() {
        let m = cube_model(1, BasisTag::ModalJacobi);
        let params = ContactParams::default();
        let s = ContactSurface::new(&m, &["ymin"], &params).unwrap();
        let o = RigidObstacle::new([0.0, 0.001, 0.0], [0.0, 1.0, 0.0]).unwrap();
        let c = contact_contribution(&m, &s, &o, 1e4, &vec![0.0; m.num_free()]);
        let csv = pressure_profile_csv(&s, &o, &c);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], PRESSURE_CSV_HEADER);
        assert_eq!(lines.len(), 1 + 4);
        let svals: Vec<f64> = lines[1..].iter().map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
        assert!(svals.windows(2).all(|w| w[0] <= w[1]));
    }
}
