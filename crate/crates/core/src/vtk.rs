//! Legacy-ASCII VTK output.
//!
//! Snapshots write each triangle with its own three corner points, so the
//! discontinuous fields keep their element-wise values (higher-order modes
//! are sampled at the corners only; the rendering is linear per cell).
//! Cell data carries the subdomain tag, the element pressure mean and the
//! permeability at the centroid.

use crate::fem::dofmap::FlowDofs;
use crate::fem::tables::MeshTables;
use crate::flow::{dot, FlowState};
use crate::mesh::{Mesh, Region};
use crate::problem::ProblemConfig;
use crate::transport::ConcState;
use crate::Result;
use std::fmt::Write as _;
use std::path::Path;

/// Dump the bare mesh (shared vertices, subdomain tags) for inspection.
pub fn write_mesh(path: &Path, mesh: &Mesh) -> Result<()> {
    let mut s = String::new();
    s.push_str("# vtk DataFile Version 3.0\nmesh\nASCII\nDATASET UNSTRUCTURED_GRID\n");
    let _ = writeln!(s, "POINTS {} double", mesh.vertices.len());
    for v in &mesh.vertices {
        let _ = writeln!(s, "{:.16e} {:.16e} 0", v[0], v[1]);
    }
    let nt = mesh.n_elements();
    let _ = writeln!(s, "CELLS {} {}", nt, 4 * nt);
    for tri in &mesh.tris {
        let _ = writeln!(s, "3 {} {} {}", tri.verts[0], tri.verts[1], tri.verts[2]);
    }
    let _ = writeln!(s, "CELL_TYPES {nt}");
    for _ in 0..nt {
        s.push_str("5\n");
    }
    let _ = writeln!(s, "CELL_DATA {nt}");
    s.push_str("SCALARS subdomain int 1\nLOOKUP_TABLE default\n");
    for tri in &mesh.tris {
        s.push_str(if tri.region == Region::Stokes { "1\n" } else { "0\n" });
    }
    std::fs::write(path, s).map_err(|e| crate::Error::Config(format!("writing {path:?}: {e}")))
}

/// Write one coupled-state snapshot.
pub fn write_snapshot(
    path: &Path,
    mesh: &Mesh,
    tables: &MeshTables,
    flow_dofs: &FlowDofs,
    problem: &ProblemConfig,
    flow: &FlowState,
    conc: &ConcState,
    title: &str,
) -> Result<()> {
    let nt = mesh.n_elements();
    let su = tables.cell_space(flow_dofs.k);
    let scs = tables.cell_space(conc.k);

    // Corner values of the reference bases.
    let corners = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
    let mut u_corner = vec![0.0; 3 * su.dim];
    let mut c_corner = vec![0.0; 3 * scs.dim];
    for (k, xi) in corners.iter().enumerate() {
        su.basis.eval(*xi, &mut u_corner[k * su.dim..(k + 1) * su.dim]);
        scs.basis.eval(*xi, &mut c_corner[k * scs.dim..(k + 1) * scs.dim]);
    }

    let mut s = String::new();
    let _ = writeln!(s, "# vtk DataFile Version 3.0\n{title}\nASCII\nDATASET UNSTRUCTURED_GRID");
    let _ = writeln!(s, "POINTS {} double", 3 * nt);
    for tri in &mesh.tris {
        for &v in &tri.verts {
            let p = mesh.vertices[v];
            let _ = writeln!(s, "{:.16e} {:.16e} 0", p[0], p[1]);
        }
    }
    let _ = writeln!(s, "CELLS {} {}", nt, 4 * nt);
    for e in 0..nt {
        let _ = writeln!(s, "3 {} {} {}", 3 * e, 3 * e + 1, 3 * e + 2);
    }
    let _ = writeln!(s, "CELL_TYPES {nt}");
    for _ in 0..nt {
        s.push_str("5\n");
    }

    let _ = writeln!(s, "CELL_DATA {nt}");
    s.push_str("SCALARS subdomain int 1\nLOOKUP_TABLE default\n");
    for tri in &mesh.tris {
        s.push_str(if tri.region == Region::Stokes { "1\n" } else { "0\n" });
    }
    s.push_str("SCALARS pressure_mean double 1\nLOOKUP_TABLE default\n");
    for e in 0..nt {
        // The constant basis mode has value sqrt(2) on the reference cell,
        // so the element mean of p is p0 sqrt(2).
        let p0 = flow.p_coeffs(flow_dofs, e)[0];
        let _ = writeln!(s, "{:.16e}", p0 * std::f64::consts::SQRT_2);
    }
    s.push_str("SCALARS permeability double 1\nLOOKUP_TABLE default\n");
    for tri in &mesh.tris {
        let c = centroid(mesh, tri.verts);
        let _ = writeln!(s, "{:.16e}", problem.kappa.eval(c));
    }

    let _ = writeln!(s, "POINT_DATA {}", 3 * nt);
    s.push_str("SCALARS concentration double 1\nLOOKUP_TABLE default\n");
    for e in 0..nt {
        let cc = conc.c_coeffs(e);
        for k in 0..3 {
            let v = dot(cc, &c_corner[k * scs.dim..(k + 1) * scs.dim]);
            let _ = writeln!(s, "{v:.16e}");
        }
    }
    s.push_str("VECTORS velocity double\n");
    for e in 0..nt {
        let (ux, uy) = flow.u_coeffs(flow_dofs, e);
        for k in 0..3 {
            let vals = &u_corner[k * su.dim..(k + 1) * su.dim];
            let _ = writeln!(s, "{:.16e} {:.16e} 0", dot(ux, vals), dot(uy, vals));
        }
    }

    std::fs::write(path, s).map_err(|e| crate::Error::Config(format!("writing {path:?}: {e}")))
}

fn centroid(mesh: &Mesh, v: [usize; 3]) -> [f64; 2] {
    let mut c = [0.0, 0.0];
    for &i in &v {
        c[0] += mesh.vertices[i][0] / 3.0;
        c[1] += mesh.vertices[i][1] / 3.0;
    }
    c
}
