//! Quad-sphere head template and its identity deformation basis.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::geometry::linalg::{add, dist2, normalize, scale, Vec3};
use crate::geometry::Mesh;

/// Ellipsoid semi-axes of the template head in millimetres (x, y, z).
const HEAD_AXES: Vec3 = [75.0, 100.0, 92.0];

/// Number of identity dimensions.
pub const IDENTITY_DIMS: usize = 16;

/// Coefficient bound.
pub const COEFF_LIMIT: f64 = 3.0;

/// Canonical head on a cube-sphere grid: vertices, faces and the mirror map.
#[derive(Clone, Debug)]
pub struct Template {
    pub mesh: Mesh,
    /// Unit-sphere direction of every vertex.
    pub dirs: Vec<Vec3>,
    /// `mirror[i]` is the vertex at the x-reflected position of vertex `i`.
    pub mirror: Vec<usize>,
}

/// Grid vertex on the surface of the cube `[-n, n]³` (even coordinates only
/// on the cube faces), stored as integer lattice coordinates.
fn cube_sphere(n: usize) -> (Vec<[i64; 3]>, Vec<[u32; 3]>) {
    use std::collections::HashMap;
    let n = n as i64;
    let mut index: HashMap<[i64; 3], u32> = HashMap::new();
    let mut pts: Vec<[i64; 3]> = Vec::new();
    let mut id = |p: [i64; 3], pts: &mut Vec<[i64; 3]>| -> u32 {
        *index.entry(p).or_insert_with(|| {
            pts.push(p);
            (pts.len() - 1) as u32
        })
    };
    let mut faces = Vec::new();
    // each cube face: fixed axis a at ±n, the other two axes swept over [-n, n] in steps of 2
    for axis in 0..3 {
        for sign in [-1i64, 1] {
            let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
            let at = |i: i64, j: i64| {
                let mut p = [0i64; 3];
                p[axis] = sign * n;
                p[u] = -n + 2 * i;
                p[v] = -n + 2 * j;
                p
            };
            for i in 0..n {
                for j in 0..n {
                    let q = [at(i, j), at(i + 1, j), at(i + 1, j + 1), at(i, j + 1)];
                    let ids: Vec<u32> = q.iter().map(|p| id(*p, &mut pts)).collect();
                    // split through the corner maximizing (|x|, y, z) so the
                    // triangulation is symmetric under x → −x
                    let key = |p: &[i64; 3]| (p[0].abs(), p[1], p[2]);
                    let c = (0..4).max_by_key(|k| key(&q[*k])).expect("four corners");
                    let (a, b, cc, d) = (ids[c], ids[(c + 1) % 4], ids[(c + 2) % 4], ids[(c + 3) % 4]);
                    for tri in [[a, b, cc], [a, cc, d]] {
                        faces.push(orient_outward(tri, &pts));
                    }
                }
            }
        }
    }
    (pts, faces)
}

fn orient_outward(t: [u32; 3], pts: &[[i64; 3]]) -> [u32; 3] {
    let p = |i: u32| {
        let q = pts[i as usize];
        [q[0] as f64, q[1] as f64, q[2] as f64]
    };
    let (a, b, c) = (p(t[0]), p(t[1]), p(t[2]));
    let nrm = crate::geometry::linalg::cross(
        crate::geometry::linalg::sub(b, a),
        crate::geometry::linalg::sub(c, a),
    );
    let centroid = scale(add(add(a, b), c), 1.0 / 3.0);
    if crate::geometry::linalg::dot(nrm, centroid) >= 0.0 {
        t
    } else {
        [t[0], t[2], t[1]]
    }
}

fn bump(d: Vec3, center: Vec3, width: f64) -> f64 {
    (-dist2(d, normalize(center)) / (2.0 * width * width)).exp()
}

/// Radial offset (mm) adding facial relief to the ellipsoid.
fn relief(d: Vec3) -> f64 {
    let front = d[2].max(0.0);
    22.0 * bump(d, [0.0, -0.08, 1.0], 0.13)
        + 6.0 * (-(d[0] / 0.45).powi(2) - ((d[1] - 0.33) / 0.1).powi(2)).exp() * front
        + 8.0 * bump(d, [0.0, -0.72, 0.7], 0.2)
        - 7.0 * (bump(d, [0.33, 0.16, 0.93], 0.11) + bump(d, [-0.33, 0.16, 0.93], 0.11))
        + 4.0 * (bump(d, [0.55, -0.2, 0.8], 0.22) + bump(d, [-0.55, -0.2, 0.8], 0.22))
        + 5.0 * bump(d, [0.0, -0.42, 0.9], 0.12)
}

impl Template {
    /// Head template with `n × n` quads per cube face (`6n² + 2` vertices).
    pub fn new(n: usize) -> Result<Self> {
        if n < 2 || n % 2 != 0 {
            return Err(Error::Invalid(format!("template resolution must be even and ≥ 2, got {n}")));
        }
        let (lattice, faces) = cube_sphere(n);
        let dirs: Vec<Vec3> = lattice
            .iter()
            .map(|p| normalize([p[0] as f64, p[1] as f64, p[2] as f64]))
            .collect();
        let vertices = dirs
            .iter()
            .map(|d| {
                let e = 1.0 / ((d[0] / HEAD_AXES[0]).powi(2) + (d[1] / HEAD_AXES[1]).powi(2) + (d[2] / HEAD_AXES[2]).powi(2)).sqrt();
                scale(*d, e + relief(*d))
            })
            .collect();
        let mirror = lattice
            .iter()
            .map(|p| {
                let q = [-p[0], p[1], p[2]];
                lattice.iter().position(|r| *r == q).expect("lattice is x-symmetric")
            })
            .collect();
        Ok(Template {
            mesh: Mesh::new(vertices, faces)?,
            dirs,
            mirror,
        })
    }

    /// Default desk-scale template: 602 vertices, 1200 faces.
    pub fn standard() -> Self {
        Template::new(10).expect("valid resolution")
    }
}

/// Identity deformation bank: `D` per-vertex displacement fields (mm).
#[derive(Clone, Debug)]
pub struct IdentityBasis {
    /// `fields[d][i]` is the displacement of vertex `i` per unit coefficient `d`.
    pub fields: Vec<Vec<Vec3>>,
}

impl IdentityBasis {
    pub fn new(t: &Template) -> Self {
        let radial = |amp: f64, centers: &[Vec3], w: f64| -> Vec<Vec3> {
            t.dirs
                .iter()
                .map(|d| scale(*d, amp * centers.iter().map(|c| bump(*d, *c, w)).sum::<f64>()))
                .collect()
        };
        let per_vertex = |f: &dyn Fn(Vec3, Vec3) -> Vec3| -> Vec<Vec3> {
            t.mesh.vertices.iter().zip(&t.dirs).map(|(p, d)| f(*p, *d)).collect()
        };
        let fields = vec![
            per_vertex(&|p, _| [0.10 * p[0], 0.0, 0.0]),
            per_vertex(&|p, _| [0.0, 0.08 * p[1], 0.0]),
            per_vertex(&|p, _| [0.0, 0.0, 0.08 * p[2]]),
            radial(8.0, &[[0.0, -0.08, 1.0]], 0.16),
            per_vertex(&|p, d| [0.12 * p[0] * (-((d[1] + 0.6) / 0.3).powi(2)).exp(), 0.0, 0.0]),
            radial(5.0, &[[0.0, 0.33, 0.94]], 0.18),
            radial(6.0, &[[0.55, -0.2, 0.8], [-0.55, -0.2, 0.8]], 0.22),
            per_vertex(&|_, d| scale([0.0, -0.5, 1.0], 7.0 * bump(d, [0.0, -0.72, 0.7], 0.22))),
            per_vertex(&|p, _| [0.06 * p[1], 0.0, 0.0]),
            radial(8.0, &[[0.0, 0.7, 0.7]], 0.3),
            radial(-4.0, &[[0.33, 0.16, 0.93], [-0.33, 0.16, 0.93]], 0.12),
            radial(4.0, &[[0.0, 0.15, 1.0]], 0.12),
            radial(5.0, &[[0.0, -0.42, 0.9]], 0.14),
            radial(10.0, &[[0.0, 0.2, -1.0]], 0.5),
            radial(6.0, &[[0.55, -0.2, 0.8]], 0.22),
            radial(10.0, &[[0.0, 1.0, 0.0]], 0.45),
        ];
        debug_assert_eq!(fields.len(), IDENTITY_DIMS);
        IdentityBasis { fields }
    }

    pub fn dims(&self) -> usize {
        self.fields.len()
    }

    /// Largest displacement norm of field `d` over all vertices.
    pub fn max_magnitude(&self, d: usize) -> f64 {
        self.fields[d]
            .iter()
            .map(|v| crate::geometry::linalg::norm(*v))
            .fold(0.0, f64::max)
    }
}

/// Identity coefficients, each in `[−3, 3]`.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityParams {
    pub coeffs: Vec<f64>,
}

impl IdentityParams {
    pub fn zeros(d: usize) -> Self {
        IdentityParams { coeffs: vec![0.0; d] }
    }

    /// Standard normal coefficients clipped to the bound.
    pub fn sample<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        IdentityParams {
            coeffs: (0..d)
                .map(|_| {
                    let x: f64 = StandardNormal.sample(rng);
                    x.clamp(-COEFF_LIMIT, COEFF_LIMIT)
                })
                .collect(),
        }
    }
}

/// Template plus the coefficient-weighted basis, in millimetres.
///
/// The result is not rescaled; scenes are brought into the normalized cube by
/// [`crate::geometry::normalize_scene`], which records the transform.
pub fn generate_identity(params: &IdentityParams, template: &Template, basis: &IdentityBasis) -> Result<Mesh> {
    if params.coeffs.len() != basis.dims() {
        return Err(Error::Invalid(format!(
            "{} coefficients for a {}-dimensional basis",
            params.coeffs.len(),
            basis.dims()
        )));
    }
    if let Some(c) = params.coeffs.iter().find(|c| !(c.abs() <= COEFF_LIMIT)) {
        return Err(Error::Invalid(format!("coefficient {c} outside [−3, 3]")));
    }
    let mut v = template.mesh.vertices.clone();
    for (c, field) in params.coeffs.iter().zip(&basis.fields) {
        if *c == 0.0 {
            continue;
        }
        for (p, f) in v.iter_mut().zip(field) {
            *p = add(*p, scale(*f, *c));
        }
    }
    Ok(template.mesh.with_vertices(v))
}
