//! Tetrahedral meshes of box domains.
//!
//! Provides the structured Kuhn-subdivision generator, an ASCII import/export
//! pair, oriented face connectivity, per-cell affine geometry, and the cell
//! patch tables (vertex/edge/face patches and their closures) required by the
//! a posteriori error estimator weights.

use nalgebra::{Matrix3, Vector3};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

/// A point or vector in physical space.
pub type Point = Vector3<f64>;

/// Errors raised while importing or validating a mesh.
#[derive(Debug, Error)]
pub enum MeshError {
    #[error("failed to read '{path}': {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("duplicate cell: cell {second} repeats the vertex set of cell {first}")]
    DuplicateCell { first: usize, second: usize },
    #[error("inverted cell {cell}: signed volume {volume:.6e} is not positive")]
    InvertedCell { cell: usize, volume: f64 },
    #[error("face ({v0}, {v1}, {v2}) is shared by more than two cells")]
    NonManifoldFace { v0: usize, v1: usize, v2: usize },
    #[error("vertex index {vertex} out of range in cell {cell} ({n_vertices} vertices)")]
    VertexOutOfRange {
        cell: usize,
        vertex: usize,
        n_vertices: usize,
    },
}

/// Connectivity and geometry of one triangular face.
#[derive(Clone, Debug)]
pub struct FaceTopology {
    /// Vertex indices of the face, sorted ascending.
    pub vertices: [usize; 3],
    /// Adjacent cell of smaller index; owns the face orientation.
    pub left: usize,
    /// Adjacent cell of larger index; `None` on boundary faces.
    pub right: Option<usize>,
    /// Unit normal pointing from `left` toward `right` (outward on the boundary).
    pub normal: Vector3<f64>,
    pub area: f64,
    /// Face diameter `h_F`: the longest edge of the triangle.
    pub diameter: f64,
    pub centroid: Point,
}

impl FaceTopology {
    pub fn is_boundary(&self) -> bool {
        self.right.is_none()
    }
}

/// Affine geometry of one tetrahedral cell. The reference-to-physical map is
/// `F_K(x) = v0 + J x` with the reference tetrahedron `{x, y, z >= 0, x+y+z <= 1}`.
#[derive(Clone, Debug)]
pub struct CellGeometry {
    pub volume: f64,
    /// Cell diameter `h_K`: the longest edge.
    pub diameter: f64,
    /// Inradius `rho_K = 3 V / (surface area)`.
    pub inradius: f64,
    pub centroid: Point,
    /// First cell vertex, the image of the reference origin.
    pub v0: Point,
    pub jacobian: Matrix3<f64>,
    pub jacobian_inv: Matrix3<f64>,
    /// Outward unit normals of the four cell faces, aligned with
    /// [`Mesh::cell_faces`] (face `i` is opposite local vertex `i`).
    pub outward_normals: [Vector3<f64>; 4],
}

/// An affine tetrahedral mesh with oriented face topology.
///
/// Invariants established by construction:
/// - every interior face is referenced by exactly two cells, every boundary
///   face by exactly one,
/// - face normals point from the smaller-index cell `K_l` toward `K_r`, and
///   outward on the boundary,
/// - all cell volumes are strictly positive.
#[derive(Debug)]
pub struct Mesh {
    pub vertices: Vec<Point>,
    /// Vertex indices per cell, ordered so the signed volume is positive.
    pub cells: Vec<[usize; 4]>,
    pub faces: Vec<FaceTopology>,
    /// Global face index of the face opposite local vertex `i`, per cell.
    pub cell_faces: Vec<[usize; 4]>,
    pub cell_geometry: Vec<CellGeometry>,
}

/// Cell patches used by the estimator weights. For each cell `K`, a patch
/// collects the cells sharing at least one vertex (vertex patch), at least two
/// vertices (edge patch), or at least three vertices (face patch) with `K`;
/// the extended patches iterate the vertex-patch closure. All lists are sorted.
pub struct PatchTable {
    /// `K^f`: cells sharing a face (three vertices) with `K`, including `K`.
    pub face_patch: Vec<Vec<usize>>,
    /// Edge patch: cells sharing an edge (two vertices) with `K`.
    pub edge_patch: Vec<Vec<usize>>,
    /// Vertex patch: cells sharing a vertex with `K`.
    pub vertex_patch: Vec<Vec<usize>>,
    /// Second vertex-patch closure.
    pub vertex_patch2: Vec<Vec<usize>>,
    /// Third vertex-patch closure.
    pub vertex_patch3: Vec<Vec<usize>>,
    /// Per face: the one or two adjacent cells.
    pub face_cells: Vec<Vec<usize>>,
}

impl Mesh {
    /// Builds a mesh from raw vertices and cells, validating orientation and
    /// establishing the face topology. Cells must be positively oriented.
    pub fn from_raw(vertices: Vec<Point>, cells: Vec<[usize; 4]>) -> Result<Self, MeshError> {
        let nv = vertices.len();
        let mut seen: BTreeMap<[usize; 4], usize> = BTreeMap::new();
        for (c, cell) in cells.iter().enumerate() {
            for &v in cell {
                if v >= nv {
                    return Err(MeshError::VertexOutOfRange {
                        cell: c,
                        vertex: v,
                        n_vertices: nv,
                    });
                }
            }
            let mut key = *cell;
            key.sort_unstable();
            if let Some(&first) = seen.get(&key) {
                return Err(MeshError::DuplicateCell { first, second: c });
            }
            seen.insert(key, c);
            let vol = signed_volume(&vertices, cell);
            if vol <= 0.0 {
                return Err(MeshError::InvertedCell {
                    cell: c,
                    volume: vol,
                });
            }
        }

        // Face extraction keyed by the sorted vertex triple; BTreeMap iteration
        // gives a deterministic face numbering.
        let mut face_map: BTreeMap<[usize; 3], Vec<usize>> = BTreeMap::new();
        for (c, cell) in cells.iter().enumerate() {
            for local in 0..4 {
                let mut tri = local_face(cell, local);
                tri.sort_unstable();
                face_map.entry(tri).or_default().push(c);
            }
        }

        let mut faces = Vec::with_capacity(face_map.len());
        let mut face_index: BTreeMap<[usize; 3], usize> = BTreeMap::new();
        for (tri, adj) in &face_map {
            if adj.len() > 2 {
                return Err(MeshError::NonManifoldFace {
                    v0: tri[0],
                    v1: tri[1],
                    v2: tri[2],
                });
            }
            let left = *adj.iter().min().unwrap();
            let right = if adj.len() == 2 {
                Some(*adj.iter().max().unwrap())
            } else {
                None
            };
            let (a, b, c) = (vertices[tri[0]], vertices[tri[1]], vertices[tri[2]]);
            let cross = (b - a).cross(&(c - a));
            let area = 0.5 * cross.norm();
            let centroid = (a + b + c) / 3.0;
            let left_centroid = cell_centroid(&vertices, &cells[left]);
            let mut normal = cross.normalize();
            if normal.dot(&(centroid - left_centroid)) < 0.0 {
                normal = -normal;
            }
            let diameter = (b - a).norm().max((c - b).norm()).max((a - c).norm());
            face_index.insert(*tri, faces.len());
            faces.push(FaceTopology {
                vertices: *tri,
                left,
                right,
                normal,
                area,
                diameter,
                centroid,
            });
        }

        let mut cell_faces = Vec::with_capacity(cells.len());
        for cell in &cells {
            let mut ids = [0usize; 4];
            for local in 0..4 {
                let mut tri = local_face(cell, local);
                tri.sort_unstable();
                ids[local] = face_index[&tri];
            }
            cell_faces.push(ids);
        }

        let mut cell_geometry = Vec::with_capacity(cells.len());
        for (c, cell) in cells.iter().enumerate() {
            let v0 = vertices[cell[0]];
            let jacobian = Matrix3::from_columns(&[
                vertices[cell[1]] - v0,
                vertices[cell[2]] - v0,
                vertices[cell[3]] - v0,
            ]);
            let volume = jacobian.determinant() / 6.0;
            let jacobian_inv = jacobian
                .try_inverse()
                .expect("positive cell volume implies an invertible Jacobian");
            let mut diameter: f64 = 0.0;
            for i in 0..4 {
                for j in (i + 1)..4 {
                    diameter = diameter.max((vertices[cell[i]] - vertices[cell[j]]).norm());
                }
            }
            let surface: f64 = cell_faces[c].iter().map(|&f| faces[f].area).sum();
            let inradius = 3.0 * volume / surface;
            let centroid = cell_centroid(&vertices, cell);
            let mut outward_normals = [Vector3::zeros(); 4];
            for local in 0..4 {
                let face = &faces[cell_faces[c][local]];
                outward_normals[local] = if face.left == c {
                    face.normal
                } else {
                    -face.normal
                };
            }
            cell_geometry.push(CellGeometry {
                volume,
                diameter,
                inradius,
                centroid,
                v0,
                jacobian,
                jacobian_inv,
                outward_normals,
            });
        }

        Ok(Mesh {
            vertices,
            cells,
            faces,
            cell_faces,
            cell_geometry,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn n_faces(&self) -> usize {
        self.faces.len()
    }

    /// Maps a reference point of `cell` to physical coordinates.
    pub fn ref_to_phys(&self, cell: usize, p: &Point) -> Point {
        let g = &self.cell_geometry[cell];
        g.v0 + g.jacobian * p
    }

    /// Maps a physical point to the reference coordinates of `cell`.
    pub fn phys_to_ref(&self, cell: usize, x: &Point) -> Point {
        let g = &self.cell_geometry[cell];
        g.jacobian_inv * (x - g.v0)
    }

    pub fn total_volume(&self) -> f64 {
        self.cell_geometry.iter().map(|g| g.volume).sum()
    }
}

fn local_face(cell: &[usize; 4], opposite: usize) -> [usize; 3] {
    match opposite {
        0 => [cell[1], cell[2], cell[3]],
        1 => [cell[0], cell[2], cell[3]],
        2 => [cell[0], cell[1], cell[3]],
        _ => [cell[0], cell[1], cell[2]],
    }
}

fn signed_volume(vertices: &[Point], cell: &[usize; 4]) -> f64 {
    let v0 = vertices[cell[0]];
    Matrix3::from_columns(&[
        vertices[cell[1]] - v0,
        vertices[cell[2]] - v0,
        vertices[cell[3]] - v0,
    ])
    .determinant()
        / 6.0
}

fn cell_centroid(vertices: &[Point], cell: &[usize; 4]) -> Point {
    (vertices[cell[0]] + vertices[cell[1]] + vertices[cell[2]] + vertices[cell[3]]) / 4.0
}

/// Builds a structured mesh of the box `[0, extent]^3` with `n` subdivisions
/// per axis, splitting each of the `n^3` cubes into six tetrahedra that share
/// the cube's main diagonal (Kuhn subdivision). Uniform refinement of this
/// mesh preserves shape regularity because all cells are affine copies of the
/// six reference Kuhn tetrahedra.
pub fn build_structured_mesh(n: usize, extent: f64) -> Mesh {
    assert!(n >= 1, "subdivision count must be at least 1");
    assert!(extent > 0.0, "box extent must be positive");
    let np = n + 1;
    let h = extent / n as f64;
    let mut vertices = Vec::with_capacity(np * np * np);
    for iz in 0..np {
        for iy in 0..np {
            for ix in 0..np {
                vertices.push(Point::new(ix as f64 * h, iy as f64 * h, iz as f64 * h));
            }
        }
    }
    let gid = |ix: usize, iy: usize, iz: usize| ix + np * (iy + np * iz);

    // The six permutations of the axes, in lexicographic order. Each yields the
    // tetrahedron (p, p+e_a, p+e_a+e_b, p+e_a+e_b+e_c); odd permutations are
    // reordered to keep the signed volume positive.
    const PERMS: [[usize; 3]; 6] = [
        [0, 1, 2],
        [0, 2, 1],
        [1, 0, 2],
        [1, 2, 0],
        [2, 0, 1],
        [2, 1, 0],
    ];
    const PERM_EVEN: [bool; 6] = [true, false, false, true, true, false];

    let mut cells = Vec::with_capacity(6 * n * n * n);
    for iz in 0..n {
        for iy in 0..n {
            for ix in 0..n {
                for (perm, even) in PERMS.iter().zip(PERM_EVEN) {
                    let mut corner = [ix, iy, iz];
                    let v0 = gid(corner[0], corner[1], corner[2]);
                    corner[perm[0]] += 1;
                    let v1 = gid(corner[0], corner[1], corner[2]);
                    corner[perm[1]] += 1;
                    let v2 = gid(corner[0], corner[1], corner[2]);
                    corner[perm[2]] += 1;
                    let v3 = gid(corner[0], corner[1], corner[2]);
                    if even {
                        cells.push([v0, v1, v2, v3]);
                    } else {
                        cells.push([v0, v2, v1, v3]);
                    }
                }
            }
        }
    }
    Mesh::from_raw(vertices, cells).expect("structured generator produces a valid mesh")
}

/// Imports an ASCII tetrahedral mesh. Format: a header line `tetmesh <nv> <nc>`,
/// then `nv` lines `x y z`, then `nc` lines `v0 v1 v2 v3` of 0-based vertex
/// indices.
pub fn import_mesh(path: &Path) -> Result<Mesh, MeshError> {
    let text = std::fs::read_to_string(path).map_err(|source| MeshError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut lines = text.lines().enumerate();
    let (line_no, header) = lines
        .next()
        .ok_or_else(|| MeshError::Parse {
            line: 1,
            msg: "empty file".into(),
        })
        .map(|(i, l)| (i + 1, l))?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some("tetmesh") {
        return Err(MeshError::Parse {
            line: line_no,
            msg: "expected header 'tetmesh <nv> <nc>'".into(),
        });
    }
    let nv: usize = parse_field(parts.next(), line_no, "vertex count")?;
    let nc: usize = parse_field(parts.next(), line_no, "cell count")?;

    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (i, line) = next_content_line(&mut lines, nv, "vertex")?;
        let mut f = line.split_whitespace();
        let x: f64 = parse_field(f.next(), i, "x coordinate")?;
        let y: f64 = parse_field(f.next(), i, "y coordinate")?;
        let z: f64 = parse_field(f.next(), i, "z coordinate")?;
        if f.next().is_some() {
            return Err(MeshError::Parse {
                line: i,
                msg: "expected exactly three coordinates".into(),
            });
        }
        vertices.push(Point::new(x, y, z));
    }
    let mut cells = Vec::with_capacity(nc);
    for _ in 0..nc {
        let (i, line) = next_content_line(&mut lines, nc, "cell")?;
        let mut f = line.split_whitespace();
        let a: usize = parse_field(f.next(), i, "vertex index")?;
        let b: usize = parse_field(f.next(), i, "vertex index")?;
        let c: usize = parse_field(f.next(), i, "vertex index")?;
        let d: usize = parse_field(f.next(), i, "vertex index")?;
        if f.next().is_some() {
            return Err(MeshError::Parse {
                line: i,
                msg: "only tetrahedral cells (four vertex indices) are supported".into(),
            });
        }
        cells.push([a, b, c, d]);
    }
    Mesh::from_raw(vertices, cells)
}

fn next_content_line<'a>(
    lines: &mut impl Iterator<Item = (usize, &'a str)>,
    _expected: usize,
    what: &str,
) -> Result<(usize, &'a str), MeshError> {
    for (i, line) in lines.by_ref() {
        if !line.trim().is_empty() {
            return Ok((i + 1, line));
        }
    }
    Err(MeshError::Parse {
        line: 0,
        msg: format!("unexpected end of file while reading {what} records"),
    })
}

fn parse_field<T: std::str::FromStr>(
    field: Option<&str>,
    line: usize,
    what: &str,
) -> Result<T, MeshError> {
    field
        .ok_or_else(|| MeshError::Parse {
            line,
            msg: format!("missing {what}"),
        })?
        .parse()
        .map_err(|_| MeshError::Parse {
            line,
            msg: format!("invalid {what}"),
        })
}

/// Writes a mesh in the ASCII format accepted by [`import_mesh`]. Coordinates
/// use the shortest round-trip decimal representation, so an export/import
/// cycle reproduces the mesh exactly.
pub fn export_mesh(mesh: &Mesh, path: &Path) -> Result<(), MeshError> {
    let mut out = String::new();
    let _ = writeln!(out, "tetmesh {} {}", mesh.vertices.len(), mesh.cells.len());
    for v in &mesh.vertices {
        let _ = writeln!(out, "{} {} {}", v.x, v.y, v.z);
    }
    for c in &mesh.cells {
        let _ = writeln!(out, "{} {} {} {}", c[0], c[1], c[2], c[3]);
    }
    std::fs::write(path, out).map_err(|source| MeshError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Computes the patch tables. The vertex patch of `K` collects cells sharing at
/// least one vertex with `K`; the edge and face patches require at least two and
/// three shared vertices. The extended patches apply the vertex-patch closure
/// two and three times.
pub fn compute_patches(mesh: &Mesh) -> PatchTable {
    let n_cells = mesh.n_cells();
    let mut vertex_stars: Vec<Vec<usize>> = vec![Vec::new(); mesh.vertices.len()];
    for (c, cell) in mesh.cells.iter().enumerate() {
        for &v in cell {
            vertex_stars[v].push(c);
        }
    }

    let mut face_patch = Vec::with_capacity(n_cells);
    let mut edge_patch = Vec::with_capacity(n_cells);
    let mut vertex_patch = Vec::with_capacity(n_cells);
    for (c, cell) in mesh.cells.iter().enumerate() {
        let mut candidates: Vec<usize> = cell
            .iter()
            .flat_map(|&v| vertex_stars[v].iter().copied())
            .collect();
        candidates.sort_unstable();
        candidates.dedup();
        let mut vp = Vec::new();
        let mut ep = Vec::new();
        let mut fp = Vec::new();
        for &other in &candidates {
            let shared = cell
                .iter()
                .filter(|v| mesh.cells[other].contains(v))
                .count();
            if shared >= 1 {
                vp.push(other);
            }
            if shared >= 2 {
                ep.push(other);
            }
            if shared >= 3 {
                fp.push(other);
            }
        }
        debug_assert!(vp.contains(&c));
        vertex_patch.push(vp);
        edge_patch.push(ep);
        face_patch.push(fp);
    }

    let closure = |patches: &[Vec<usize>]| -> Vec<Vec<usize>> {
        patches
            .iter()
            .map(|patch| {
                let mut grown: Vec<usize> = patch
                    .iter()
                    .flat_map(|&c| vertex_patch[c].iter().copied())
                    .collect();
                grown.sort_unstable();
                grown.dedup();
                grown
            })
            .collect()
    };
    let vertex_patch2 = closure(&vertex_patch);
    let vertex_patch3 = closure(&vertex_patch2);

    let face_cells = mesh
        .faces
        .iter()
        .map(|f| match f.right {
            Some(r) => vec![f.left, r],
            None => vec![f.left],
        })
        .collect();

    PatchTable {
        face_patch,
        edge_patch,
        vertex_patch,
        vertex_patch2,
        vertex_patch3,
        face_cells,
    }
}

/// Shape-regularity parameter: the maximum over cells of diameter/inradius.
pub fn shape_regularity(mesh: &Mesh) -> f64 {
    mesh.cell_geometry
        .iter()
        .map(|g| g.diameter / g.inradius)
        .fold(0.0, f64::max)
}
