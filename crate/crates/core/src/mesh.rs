//! Structured triangulations of the unit square with Stokes/Darcy subdomain
//! structure.
//!
//! The mesh is an n-by-n grid of squares, each split into two triangles along
//! the bottom-left to top-right diagonal. The subdivision count must be even
//! so that the interface line x2 = 0.5 is a mesh line; elements never
//! straddle the interface. All triangles are translates of exactly two
//! congruence classes (lower / upper), which downstream assembly exploits to
//! share basis tables.
//!
//! Facet conventions:
//! - facet vertices are stored (lo, hi) by global vertex index; the facet
//!   parametrization runs from lo to hi,
//! - `elems[0]` is the element whose outward normal equals the stored facet
//!   normal; on the interface this is always the Stokes-side element, so the
//!   stored normal points from the Stokes into the Darcy region,
//! - the tangent is the normal rotated by +90 degrees.

use crate::{Error, Result};
use std::collections::BTreeMap;

/// Geometric tolerance for classifying facets from coordinates.
pub const GEOM_TOL: f64 = 1e-12;

/// Subdomain tag of an element.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    /// Free-flow region, x2 > 0.5.
    Stokes,
    /// Porous region, x2 < 0.5.
    Darcy,
}

/// Congruence class of a triangle in the structured split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TriClass {
    /// (A, B, C): bottom-right half of the square.
    Lower,
    /// (A, C, D): top-left half of the square.
    Upper,
}

/// Facet classification. Boundary labels follow the usual partition of the
/// unit-square boundary into the Stokes sides (left, right, top) and the
/// Darcy sides (lateral, bottom).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FacetKind {
    InteriorS,
    InteriorD,
    /// Facet on the line x2 = 0.5.
    Interface,
    /// x1 = 0, x2 > 0.5.
    GammaS1,
    /// x1 = 1, x2 > 0.5.
    GammaS2,
    /// x2 = 1.
    GammaS3,
    /// x1 = 0 or x1 = 1, x2 < 0.5.
    GammaD1,
    /// x2 = 0.
    GammaD2,
}

impl FacetKind {
    pub fn is_boundary(self) -> bool {
        matches!(
            self,
            FacetKind::GammaS1
                | FacetKind::GammaS2
                | FacetKind::GammaS3
                | FacetKind::GammaD1
                | FacetKind::GammaD2
        )
    }

    pub fn is_interior(self) -> bool {
        matches!(self, FacetKind::InteriorS | FacetKind::InteriorD)
    }

    /// Facets that carry Stokes-side facet unknowns (the velocity trace space
    /// lives on interior-s, interface and Stokes-boundary facets).
    pub fn in_f_s(self) -> bool {
        matches!(
            self,
            FacetKind::InteriorS
                | FacetKind::Interface
                | FacetKind::GammaS1
                | FacetKind::GammaS2
                | FacetKind::GammaS3
        )
    }

    /// Facets of the Darcy sub-mesh (interior-d, interface, Darcy boundary).
    pub fn in_f_d(self) -> bool {
        matches!(
            self,
            FacetKind::InteriorD | FacetKind::Interface | FacetKind::GammaD1 | FacetKind::GammaD2
        )
    }
}

/// One mesh facet (edge).
#[derive(Debug, Clone)]
pub struct Facet {
    /// Endpoint vertex indices, lo < hi. The parametrization x(t) =
    /// v[0] + t (v[1] - v[0]), t in [0,1], is shared by both adjacent
    /// elements.
    pub verts: [usize; 2],
    /// Adjacent elements; `elems[1] == usize::MAX` on boundary facets.
    /// `elems[0]` is the element whose outward normal equals `normal`.
    pub elems: [usize; 2],
    /// Local edge index of this facet within each adjacent element.
    pub local_edge: [usize; 2],
    pub kind: FacetKind,
    /// Unit normal; outward for boundary facets, from Stokes to Darcy for
    /// interface facets, outward of `elems[0]` otherwise.
    pub normal: [f64; 2],
    /// Unit tangent, the normal rotated by +90 degrees.
    pub tangent: [f64; 2],
    pub length: f64,
}

impl Facet {
    pub fn is_boundary(&self) -> bool {
        self.elems[1] == usize::MAX
    }
}

/// One triangle.
#[derive(Debug, Clone)]
pub struct Tri {
    /// Vertex indices, counter-clockwise.
    pub verts: [usize; 3],
    pub region: Region,
    pub class: TriClass,
    /// Global facet index for local edges (v0,v1), (v1,v2), (v2,v0).
    pub facets: [usize; 3],
    /// Whether the local edge direction matches the facet parametrization.
    pub facet_oriented: [bool; 3],
}

/// Affine geometry of one element.
#[derive(Debug, Clone)]
pub struct ElementGeometry {
    /// Coordinates of the three vertices.
    pub coords: [[f64; 2]; 3],
    /// Jacobian of the map from the reference triangle, columns (v1-v0, v2-v0).
    pub jac: [[f64; 2]; 2],
    pub det_jac: f64,
    pub inv_jac: [[f64; 2]; 2],
    pub area: f64,
    /// Element diameter (longest edge).
    pub h: f64,
    /// Outward unit normals of the local edges.
    pub normals: [[f64; 2]; 3],
    /// Lengths of the local edges.
    pub edge_len: [f64; 3],
}

impl ElementGeometry {
    pub fn from_coords(coords: [[f64; 2]; 3]) -> Result<Self> {
        let [a, b, c] = coords;
        let jac = [[b[0] - a[0], c[0] - a[0]], [b[1] - a[1], c[1] - a[1]]];
        let det_jac = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
        if det_jac <= 0.0 {
            return Err(Error::Mesh(format!(
                "degenerate or inverted triangle (signed area {})",
                0.5 * det_jac
            )));
        }
        let inv_jac = [
            [jac[1][1] / det_jac, -jac[0][1] / det_jac],
            [-jac[1][0] / det_jac, jac[0][0] / det_jac],
        ];
        let edges = [[a, b], [b, c], [c, a]];
        let mut edge_len = [0.0; 3];
        let mut normals = [[0.0; 2]; 3];
        for (i, [p, q]) in edges.iter().enumerate() {
            let dx = q[0] - p[0];
            let dy = q[1] - p[1];
            let len = dx.hypot(dy);
            edge_len[i] = len;
            // Outward normal of a CCW triangle: edge direction rotated by -90.
            normals[i] = [dy / len, -dx / len];
        }
        let h = edge_len.iter().cloned().fold(0.0, f64::max);
        Ok(ElementGeometry {
            coords,
            jac,
            det_jac,
            inv_jac,
            area: 0.5 * det_jac,
            h,
            normals,
            edge_len,
        })
    }

    /// Map a reference point to physical coordinates.
    pub fn to_physical(&self, xi: [f64; 2]) -> [f64; 2] {
        let a = self.coords[0];
        [
            a[0] + self.jac[0][0] * xi[0] + self.jac[0][1] * xi[1],
            a[1] + self.jac[1][0] * xi[0] + self.jac[1][1] * xi[1],
        ]
    }

    /// Map a physical point to reference coordinates.
    pub fn to_reference(&self, x: [f64; 2]) -> [f64; 2] {
        let a = self.coords[0];
        let dx = [x[0] - a[0], x[1] - a[1]];
        [
            self.inv_jac[0][0] * dx[0] + self.inv_jac[0][1] * dx[1],
            self.inv_jac[1][0] * dx[0] + self.inv_jac[1][1] * dx[1],
        ]
    }
}

/// Conforming triangulation of the unit square with Stokes/Darcy structure.
#[derive(Debug, Clone)]
pub struct Mesh {
    /// Subdivision count per direction (even).
    pub n: usize,
    pub vertices: Vec<[f64; 2]>,
    pub tris: Vec<Tri>,
    pub facets: Vec<Facet>,
    /// Maximum element diameter, sqrt(2)/n.
    pub h_max: f64,
    /// Indices of interface facets, ordered by facet index.
    pub interface_facets: Vec<usize>,
}

impl Mesh {
    /// Build the structured mesh. `n` must be even and at least 2, so that
    /// the interface x2 = 0.5 is a mesh line.
    pub fn structured(n: usize) -> Result<Mesh> {
        if n < 2 {
            return Err(Error::Mesh(format!("subdivision count must be >= 2, got {n}")));
        }
        if n % 2 != 0 {
            return Err(Error::Mesh(format!(
                "subdivision count must be even so the interface x2 = 0.5 is a mesh line, got {n}"
            )));
        }
        let nv = n + 1;
        let mut vertices = Vec::with_capacity(nv * nv);
        for j in 0..nv {
            for i in 0..nv {
                vertices.push([i as f64 / n as f64, j as f64 / n as f64]);
            }
        }
        let vid = |i: usize, j: usize| j * nv + i;

        let mut tris = Vec::with_capacity(2 * n * n);
        for j in 0..n {
            for i in 0..n {
                let a = vid(i, j);
                let b = vid(i + 1, j);
                let c = vid(i + 1, j + 1);
                let d = vid(i, j + 1);
                let region = if j >= n / 2 { Region::Stokes } else { Region::Darcy };
                tris.push(Tri {
                    verts: [a, b, c],
                    region,
                    class: TriClass::Lower,
                    facets: [usize::MAX; 3],
                    facet_oriented: [true; 3],
                });
                tris.push(Tri {
                    verts: [a, c, d],
                    region,
                    class: TriClass::Upper,
                    facets: [usize::MAX; 3],
                    facet_oriented: [true; 3],
                });
            }
        }

        // Collect edges; BTreeMap keyed on sorted vertex pairs gives a
        // deterministic facet ordering independent of insertion order.
        let mut edge_map: BTreeMap<(usize, usize), Vec<(usize, usize)>> = BTreeMap::new();
        for (t, tri) in tris.iter().enumerate() {
            let v = tri.verts;
            for (le, (p, q)) in [(v[0], v[1]), (v[1], v[2]), (v[2], v[0])].into_iter().enumerate() {
                let key = (p.min(q), p.max(q));
                edge_map.entry(key).or_default().push((t, le));
            }
        }

        let mut facets = Vec::with_capacity(edge_map.len());
        let mut interface_facets = Vec::new();
        for (&(lo, hi), adj) in &edge_map {
            if adj.len() > 2 {
                return Err(Error::Mesh(format!(
                    "non-manifold edge ({lo}, {hi}) shared by {} triangles",
                    adj.len()
                )));
            }
            let p0 = vertices[lo];
            let p1 = vertices[hi];
            let dx = p1[0] - p0[0];
            let dy = p1[1] - p0[1];
            let length = dx.hypot(dy);

            let on = |v: f64, target: f64| (v - target).abs() <= GEOM_TOL;
            let both = |f: &dyn Fn(&[f64; 2]) -> bool| f(&p0) && f(&p1);
            let mid_y = 0.5 * (p0[1] + p1[1]);

            let kind = if adj.len() == 1 {
                if both(&|p| on(p[1], 0.0)) {
                    FacetKind::GammaD2
                } else if both(&|p| on(p[1], 1.0)) {
                    FacetKind::GammaS3
                } else if both(&|p| on(p[0], 0.0)) {
                    if mid_y > 0.5 { FacetKind::GammaS1 } else { FacetKind::GammaD1 }
                } else if both(&|p| on(p[0], 1.0)) {
                    if mid_y > 0.5 { FacetKind::GammaS2 } else { FacetKind::GammaD1 }
                } else {
                    return Err(Error::Mesh(format!(
                        "boundary facet ({lo}, {hi}) not on the domain boundary"
                    )));
                }
            } else if both(&|p| on(p[1], 0.5)) {
                FacetKind::Interface
            } else {
                match tris[adj[0].0].region {
                    Region::Stokes => FacetKind::InteriorS,
                    Region::Darcy => FacetKind::InteriorD,
                }
            };

            // Order adjacency: Stokes element first on the interface,
            // ascending element index otherwise.
            let mut adj = adj.clone();
            if adj.len() == 2 {
                let swap = if kind == FacetKind::Interface {
                    tris[adj[0].0].region != Region::Stokes
                } else {
                    adj[0].0 > adj[1].0
                };
                if swap {
                    adj.swap(0, 1);
                }
                if kind == FacetKind::Interface {
                    debug_assert_eq!(tris[adj[0].0].region, Region::Stokes);
                    debug_assert_eq!(tris[adj[1].0].region, Region::Darcy);
                }
            }

            // Normal: rotate the facet direction so it points away from
            // elems[0]'s centroid.
            let mut normal = [dy / length, -dx / length];
            let t0 = &tris[adj[0].0];
            let cen = centroid(&vertices, t0.verts);
            let to_cen = [cen[0] - 0.5 * (p0[0] + p1[0]), cen[1] - 0.5 * (p0[1] + p1[1])];
            if normal[0] * to_cen[0] + normal[1] * to_cen[1] > 0.0 {
                normal = [-normal[0], -normal[1]];
            }
            let tangent = [-normal[1], normal[0]];

            let fid = facets.len();
            if kind == FacetKind::Interface {
                interface_facets.push(fid);
            }
            let mut elems = [adj[0].0, usize::MAX];
            let mut local_edge = [adj[0].1, usize::MAX];
            if adj.len() == 2 {
                elems[1] = adj[1].0;
                local_edge[1] = adj[1].1;
            }
            facets.push(Facet {
                verts: [lo, hi],
                elems,
                local_edge,
                kind,
                normal,
                tangent,
                length,
            });
        }

        // Back-link facets into the triangles.
        for (fid, f) in facets.iter().enumerate() {
            for side in 0..2 {
                if f.elems[side] == usize::MAX {
                    continue;
                }
                let tri = &mut tris[f.elems[side]];
                let le = f.local_edge[side];
                let (p, _q) = local_edge_verts(tri.verts, le);
                tri.facets[le] = fid;
                tri.facet_oriented[le] = p == f.verts[0];
            }
        }
        for (t, tri) in tris.iter().enumerate() {
            for le in 0..3 {
                if tri.facets[le] == usize::MAX {
                    return Err(Error::Mesh(format!("element {t} local edge {le} has no facet")));
                }
            }
        }

        let h_max = std::f64::consts::SQRT_2 / n as f64;
        Ok(Mesh {
            n,
            vertices,
            tris,
            facets,
            h_max,
            interface_facets,
        })
    }

    pub fn n_elements(&self) -> usize {
        self.tris.len()
    }

    pub fn n_facets(&self) -> usize {
        self.facets.len()
    }

    /// Affine geometry of element `k`.
    pub fn element_geometry(&self, k: usize) -> Result<ElementGeometry> {
        let tri = self
            .tris
            .get(k)
            .ok_or_else(|| Error::Mesh(format!("element index {k} out of range")))?;
        ElementGeometry::from_coords([
            self.vertices[tri.verts[0]],
            self.vertices[tri.verts[1]],
            self.vertices[tri.verts[2]],
        ])
    }

    /// Element diameter; identical for all elements of the structured mesh.
    pub fn h_k(&self, _k: usize) -> f64 {
        self.h_max
    }

    pub fn region(&self, k: usize) -> Region {
        self.tris[k].region
    }

    /// Endpoints of a facet, in parametrization order.
    pub fn facet_points(&self, fid: usize) -> ([f64; 2], [f64; 2]) {
        let f = &self.facets[fid];
        (self.vertices[f.verts[0]], self.vertices[f.verts[1]])
    }

    /// Physical point on facet `fid` at parameter t in [0,1].
    pub fn facet_point(&self, fid: usize, t: f64) -> [f64; 2] {
        let (p0, p1) = self.facet_points(fid);
        [p0[0] + t * (p1[0] - p0[0]), p0[1] + t * (p1[1] - p0[1])]
    }

    /// Count facets of a given kind.
    pub fn count_kind(&self, kind: FacetKind) -> usize {
        self.facets.iter().filter(|f| f.kind == kind).count()
    }
}

fn centroid(vertices: &[[f64; 2]], v: [usize; 3]) -> [f64; 2] {
    let mut c = [0.0, 0.0];
    for &i in &v {
        c[0] += vertices[i][0] / 3.0;
        c[1] += vertices[i][1] / 3.0;
    }
    c
}

/// Vertex pair of local edge `le` of a triangle with vertices `v`.
pub fn local_edge_verts(v: [usize; 3], le: usize) -> (usize, usize) {
    match le {
        0 => (v[0], v[1]),
        1 => (v[1], v[2]),
        2 => (v[2], v[0]),
        _ => unreachable!(),
    }
}

/// Reference-triangle coordinates of the endpoints of local edge `le`.
pub fn ref_edge_endpoints(le: usize) -> ([f64; 2], [f64; 2]) {
    match le {
        0 => ([0.0, 0.0], [1.0, 0.0]),
        1 => ([1.0, 0.0], [0.0, 1.0]),
        2 => ([0.0, 1.0], [0.0, 0.0]),
        _ => unreachable!(),
    }
}
