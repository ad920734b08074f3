//! Structured tetrahedral block meshes and surface super-sampling.
//!
//! Vertices sit on an `nx × ny × nz` lattice with `x` varying fastest, so
//! vertex `(i, j, k)` has id `i + nx * (j + ny * k)`. Every hexahedral cell is
//! split into the same six tetrahedra around its `(0,0,0)–(1,1,1)` diagonal.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{io_err, parse_err, Error, Result};
use crate::pointcloud::PointCloud;
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct GridMeshSpec<T: Real> {
    pub node_counts: [usize; 3],
    pub extents: Vector3<T>,
    pub origin: Vector3<T>,
}

impl<T: Real> GridMeshSpec<T> {
    pub fn new(node_counts: [usize; 3], extents: Vector3<T>) -> Self {
        Self {
            node_counts,
            extents,
            origin: Vector3::zeros(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if self.node_counts[a] < 2 {
                return Err(Error::Config(format!("node count along axis {a} must be at least 2")));
            }
            if !(self.extents[a] > T::zero()) {
                return Err(Error::Config(format!("extent along axis {a} must be positive")));
            }
        }
        Ok(())
    }

    /// Lattice spacing per axis.
    pub fn spacing(&self) -> Vector3<T> {
        Vector3::from_fn(|a, _| self.extents[a] / T::from_usize_lossy(self.node_counts[a] - 1))
    }
}

impl GridMeshSpec<f64> {
    /// The 13×5×5 lattice over the 68.7 × 35.8 × 39.3 mm phantom block.
    pub fn phantom() -> Self {
        Self::new([13, 5, 5], Vector3::new(68.7, 35.8, 39.3))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TetMesh<T: Real> {
    dims: [usize; 3],
    spacing: Vector3<T>,
    vertices: Vec<Vector3<T>>,
    tets: Vec<[usize; 4]>,
    fixed: Vec<usize>,
    top: Vec<usize>,
    surface_quads: Vec<[usize; 4]>,
}

/// Cube corner offsets of the six tetrahedra, each walking from corner 000 to
/// 111 along one axis permutation.
const KUHN_PATHS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

fn signed_volume<T: Real>(p: [&Vector3<T>; 4]) -> T {
    (p[1] - p[0]).dot(&(p[2] - p[0]).cross(&(p[3] - p[0]))) / T::lit(6.0)
}

/// Build the lattice mesh described by `spec`.
pub fn build_grid_mesh<T: Real>(spec: &GridMeshSpec<T>) -> Result<TetMesh<T>> {
    spec.validate()?;
    let dims = spec.node_counts;
    let spacing = spec.spacing();
    let [nx, ny, nz] = dims;
    let mut vertices = Vec::with_capacity(nx * ny * nz);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let g = Vector3::new(T::from_usize_lossy(i), T::from_usize_lossy(j), T::from_usize_lossy(k));
                vertices.push(spec.origin + g.component_mul(&spacing));
            }
        }
    }
    let id = |i: usize, j: usize, k: usize| i + nx * (j + ny * k);

    // Corner lists per tetrahedron, oriented once on the unit cube; every cell
    // is a translate of a scaled unit cube so orientation carries over.
    let mut pattern: Vec<[[usize; 3]; 4]> = Vec::with_capacity(6);
    for perm in KUHN_PATHS {
        let mut corner = [0usize; 3];
        let mut tet = [[0usize; 3]; 4];
        for (step, &axis) in perm.iter().enumerate() {
            corner[axis] = 1;
            tet[step + 1] = corner;
        }
        let unit = tet.map(|c| Vector3::new(c[0] as f64, c[1] as f64, c[2] as f64));
        if signed_volume([&unit[0], &unit[1], &unit[2], &unit[3]]) < 0.0 {
            tet.swap(2, 3);
        }
        pattern.push(tet);
    }

    let mut tets = Vec::with_capacity(6 * (nx - 1) * (ny - 1) * (nz - 1));
    for k in 0..nz - 1 {
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                for t in &pattern {
                    tets.push(t.map(|c| id(i + c[0], j + c[1], k + c[2])));
                }
            }
        }
    }

    let fixed = (0..ny).flat_map(|j| (0..nx).map(move |i| id(i, j, 0))).collect();
    let top = (0..ny).flat_map(|j| (0..nx).map(move |i| id(i, j, nz - 1))).collect();
    let mesh = TetMesh {
        dims,
        spacing,
        vertices,
        tets,
        fixed,
        top,
        surface_quads: boundary_quads(dims),
    };
    for (t, tet) in mesh.tets.iter().enumerate() {
        if !(mesh.rest_tet_volume(t) > T::zero()) {
            return Err(Error::Geometry(format!("tetrahedron {t} {tet:?} is not positively oriented")));
        }
    }
    Ok(mesh)
}

/// Boundary faces of the lattice as corner quads `[a, b, c, d]` in cyclic
/// order, with `a→b` and `a→d` along lattice axes.
fn boundary_quads(dims: [usize; 3]) -> Vec<[usize; 4]> {
    let [nx, ny, _] = dims;
    let id = |g: [usize; 3]| g[0] + nx * (g[1] + ny * g[2]);
    let mut quads = Vec::new();
    // (normal axis, u axis, v axis); faces at both ends of the normal axis.
    for (n, u, v) in [(2usize, 0usize, 1usize), (1, 0, 2), (0, 1, 2)] {
        for side in [0, dims[n] - 1] {
            for b in 0..dims[v] - 1 {
                for a in 0..dims[u] - 1 {
                    let mut g = [0usize; 3];
                    g[n] = side;
                    let corner = |da: usize, db: usize| {
                        let mut c = g;
                        c[u] = a + da;
                        c[v] = b + db;
                        id(c)
                    };
                    quads.push([corner(0, 0), corner(1, 0), corner(1, 1), corner(0, 1)]);
                }
            }
        }
    }
    quads
}

impl<T: Real> TetMesh<T> {
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> Vector3<T> {
        self.spacing
    }

    pub fn vertices(&self) -> &[Vector3<T>] {
        &self.vertices
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn tets(&self) -> &[[usize; 4]] {
        &self.tets
    }

    /// Bottom layer (`k = 0`), held in place during simulation.
    pub fn fixed_set(&self) -> &[usize] {
        &self.fixed
    }

    /// Top layer (`k = nz - 1`), the only layer the camera constrains.
    pub fn top_set(&self) -> &[usize] {
        &self.top
    }

    pub fn surface_quads(&self) -> &[[usize; 4]] {
        &self.surface_quads
    }

    /// Boundary quads lying in the top layer.
    pub fn top_quads(&self) -> Vec<[usize; 4]> {
        let nz = self.dims[2];
        self.surface_quads
            .iter()
            .filter(|q| q.iter().all(|&v| self.grid_coords(v)[2] == nz - 1))
            .copied()
            .collect()
    }

    pub fn vertex_id(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn grid_coords(&self, id: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [id % nx, (id / nx) % ny, id / (nx * ny)]
    }

    pub fn is_fixed(&self, id: usize) -> bool {
        self.grid_coords(id)[2] == 0
    }

    pub fn is_top(&self, id: usize) -> bool {
        self.grid_coords(id)[2] == self.dims[2] - 1
    }

    pub fn rest_tet_volume(&self, t: usize) -> T {
        let [a, b, c, d] = self.tets[t];
        signed_volume([&self.vertices[a], &self.vertices[b], &self.vertices[c], &self.vertices[d]])
    }

    pub fn rest_volume(&self) -> T {
        (0..self.tets.len()).fold(T::zero(), |acc, t| acc + self.rest_tet_volume(t))
    }

    /// Axis-aligned bounds of the rest configuration.
    pub fn bounds(&self) -> (Vector3<T>, Vector3<T>) {
        let mut lo = self.vertices[0];
        let mut hi = self.vertices[0];
        for v in &self.vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        (lo, hi)
    }

    /// Write the `tetmesh v1` text format.
    pub fn write_text(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        let [nx, ny, nz] = self.dims;
        writeln!(s, "tetmesh v1 {nx} {ny} {nz}").unwrap();
        for v in &self.vertices {
            writeln!(s, "v {} {} {}", sig9(v.x), sig9(v.y), sig9(v.z)).unwrap();
        }
        for [a, b, c, d] in &self.tets {
            writeln!(s, "t {a} {b} {c} {d}").unwrap();
        }
        std::fs::write(path, s).map_err(io_err(path))
    }

    /// Read the `tetmesh v1` text format; fixed and top sets are recomputed
    /// from the lattice dimensions.
    pub fn read_text(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<&str> = lines.next().unwrap_or("").split_whitespace().collect();
        if header.len() != 5 || header[0] != "tetmesh" || header[1] != "v1" {
            return Err(parse_err(path, "expected header `tetmesh v1 nx ny nz`"));
        }
        let mut dims = [0usize; 3];
        for a in 0..3 {
            dims[a] = header[a + 2]
                .parse()
                .map_err(|_| parse_err(path, format!("bad node count `{}`", header[a + 2])))?;
            if dims[a] < 2 {
                return Err(parse_err(path, "node counts must be at least 2"));
            }
        }
        let mut vertices = Vec::new();
        let mut tets = Vec::new();
        for (n, line) in lines.enumerate() {
            let f: Vec<&str> = line.split_whitespace().collect();
            let bad = || parse_err(path, format!("line {}: `{line}`", n + 2));
            match f.first() {
                Some(&"v") if f.len() == 4 => {
                    let p: Vec<f64> = f[1..].iter().map(|x| x.parse()).collect::<std::result::Result<_, _>>().map_err(|_| bad())?;
                    vertices.push(Vector3::new(T::lit(p[0]), T::lit(p[1]), T::lit(p[2])));
                }
                Some(&"t") if f.len() == 5 => {
                    let mut t = [0usize; 4];
                    for c in 0..4 {
                        t[c] = f[c + 1].parse().map_err(|_| bad())?;
                    }
                    tets.push(t);
                }
                _ => return Err(bad()),
            }
        }
        let [nx, ny, nz] = dims;
        if vertices.len() != nx * ny * nz {
            return Err(parse_err(path, format!("expected {} vertices, found {}", nx * ny * nz, vertices.len())));
        }
        if tets.iter().flatten().any(|&v| v >= vertices.len()) {
            return Err(parse_err(path, "tetrahedron references a missing vertex"));
        }
        let id = |i: usize, j: usize, k: usize| i + nx * (j + ny * k);
        let origin = vertices[0];
        let far = vertices[id(nx - 1, ny - 1, nz - 1)];
        let spacing = Vector3::from_fn(|a, _| (far[a] - origin[a]) / T::from_usize_lossy(dims[a] - 1));
        let mesh = TetMesh {
            dims,
            spacing,
            vertices,
            tets,
            fixed: (0..ny).flat_map(|j| (0..nx).map(move |i| id(i, j, 0))).collect(),
            top: (0..ny).flat_map(|j| (0..nx).map(move |i| id(i, j, nz - 1))).collect(),
            surface_quads: boundary_quads(dims),
        };
        for t in 0..mesh.tets.len() {
            if !(mesh.rest_tet_volume(t) > T::zero()) {
                return Err(parse_err(path, format!("tetrahedron {t} has non-positive volume")));
            }
        }
        Ok(mesh)
    }
}

pub(crate) fn sig9<T: Real>(v: T) -> String {
    format!("{:.8e}", v.as_f64())
}

/// Bilinear weights of the corners `[a, b, c, d]` at `(u, v)`.
fn bilinear<T: Real>(u: T, v: T) -> [T; 4] {
    let one = T::one();
    [(one - u) * (one - v), u * (one - v), u * v, (one - u) * v]
}

/// Points interpolated on mesh surface quads, with the corner weights that
/// produced each one.
#[derive(Clone, Debug)]
pub struct SurfaceSamples<T: Real> {
    pub points: Vec<Vector3<T>>,
    /// `(vertex id, weight)` for the four quad corners behind each point.
    pub weights: Vec<[(usize, T); 4]>,
}

impl<T: Real> SurfaceSamples<T> {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn cloud(&self) -> PointCloud<T> {
        PointCloud::new_unchecked(self.points.clone())
    }

    /// Re-evaluate the samples for a different set of vertex positions.
    pub fn reposition(&mut self, positions: &[Vector3<T>]) {
        for (p, w) in self.points.iter_mut().zip(&self.weights) {
            *p = w.iter().fold(Vector3::zeros(), |acc, &(v, wt)| acc + positions[v] * wt);
        }
    }
}

/// Subdivide every boundary quad into `factor × factor` cells and emit the
/// bilinear samples at the cell corners, deduplicated across shared edges.
pub fn supersample_surface<T: Real>(mesh: &TetMesh<T>, positions: &[Vector3<T>], factor: usize) -> Result<SurfaceSamples<T>> {
    supersample_quads(mesh, mesh.surface_quads(), positions, factor)
}

/// As [`supersample_surface`], restricted to the given lattice quads.
pub fn supersample_quads<T: Real>(
    mesh: &TetMesh<T>,
    quads: &[[usize; 4]],
    positions: &[Vector3<T>],
    factor: usize,
) -> Result<SurfaceSamples<T>> {
    if factor < 1 {
        return Err(Error::Argument("super-sampling factor must be at least 1".into()));
    }
    if positions.len() != mesh.vertex_count() {
        return Err(Error::Argument(format!(
            "{} positions for a mesh of {} vertices",
            positions.len(),
            mesh.vertex_count()
        )));
    }
    let f = T::from_usize_lossy(factor);
    let mut seen: HashSet<[usize; 3]> = HashSet::new();
    let mut out = SurfaceSamples {
        points: Vec::new(),
        weights: Vec::new(),
    };
    for q in quads {
        let g0 = mesh.grid_coords(q[0]);
        let g1 = mesh.grid_coords(q[1]);
        let g3 = mesh.grid_coords(q[3]);
        for b in 0..=factor {
            for a in 0..=factor {
                // Refined-lattice coordinate: exact integer key shared by
                // neighbouring quads along common edges.
                let key = [0, 1, 2].map(|ax| factor * g0[ax] + a * (g1[ax] - g0[ax]) + b * (g3[ax] - g0[ax]));
                if !seen.insert(key) {
                    continue;
                }
                let w = bilinear(T::from_usize_lossy(a) / f, T::from_usize_lossy(b) / f);
                let weights = [(q[0], w[0]), (q[1], w[1]), (q[2], w[2]), (q[3], w[3])];
                let p = weights.iter().fold(Vector3::zeros(), |acc, &(v, wt)| acc + positions[v] * wt);
                out.points.push(p);
                out.weights.push(weights);
            }
        }
    }
    Ok(out)
}
