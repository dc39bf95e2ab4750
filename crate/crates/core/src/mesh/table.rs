//! Marching-cubes case table built from per-face contour rules.
//!
//! Corner `i` sits at `(i & 1, (i >> 1) & 1, (i >> 2) & 1)`. On every cube
//! face the crossing points are joined so that inside corners lie to the left
//! when the face is viewed from outside, and ambiguous faces separate the
//! inside corners. Because the rule only looks at the four corner signs of a
//! face, neighboring cells always agree on shared faces.

use std::sync::OnceLock;

/// Corner pairs of the 12 cube edges; the first corner has the lower index.
pub const EDGES: [(usize, usize); 12] = [
    (0, 1),
    (2, 3),
    (4, 5),
    (6, 7),
    (0, 2),
    (1, 3),
    (4, 6),
    (5, 7),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

pub fn corner_offset(i: usize) -> [usize; 3] {
    [i & 1, (i >> 1) & 1, (i >> 2) & 1]
}

fn edge_between(a: usize, b: usize) -> usize {
    let key = (a.min(b), a.max(b));
    EDGES.iter().position(|&e| e == key).expect("corners share an edge")
}

/// Corners of each face in counter-clockwise order seen from outside.
fn faces() -> Vec<[usize; 4]> {
    let mut out = Vec::new();
    for axis in 0..3 {
        for side in 0..2 {
            let mut corners: Vec<usize> = (0..8).filter(|&c| corner_offset(c)[axis] == side).collect();
            let pos = |c: usize| corner_offset(c).map(|v| v as f64 - 0.5);
            let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
            // Angle in the (u, v) plane; the orientation of (u, v, axis) is
            // right-handed, so ascending angle is CCW about +axis.
            corners.sort_by(|&a, &b| {
                let ang = |c: usize| pos(c)[v].atan2(pos(c)[u]);
                ang(a).partial_cmp(&ang(b)).unwrap()
            });
            if side == 0 {
                corners.reverse();
            }
            out.push([corners[0], corners[1], corners[2], corners[3]]);
        }
    }
    out
}

/// Closed loops of crossed edges for every corner-sign case. Bit `i` of the
/// case index is set when corner `i` is inside (below the iso level).
pub fn loops() -> &'static [Vec<Vec<usize>>; 256] {
    static TABLE: OnceLock<[Vec<Vec<usize>>; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let faces = faces();
        std::array::from_fn(|case| {
            let inside = |c: usize| case >> c & 1 == 1;
            let mut next = [usize::MAX; 12];
            for f in &faces {
                for k in 0..4 {
                    let c = f[k];
                    let prev = f[(k + 3) % 4];
                    if !inside(c) || inside(prev) {
                        continue;
                    }
                    // Inside run starting at corner k: entry on (prev, c).
                    let entry = edge_between(prev, c);
                    let mut j = k;
                    while inside(f[(j + 1) % 4]) {
                        j = (j + 1) % 4;
                    }
                    let exit = edge_between(f[j], f[(j + 1) % 4]);
                    next[exit] = entry;
                }
            }
            let mut seen = [false; 12];
            let mut out = Vec::new();
            for start in 0..12 {
                if next[start] == usize::MAX || seen[start] {
                    continue;
                }
                let mut lp = Vec::new();
                let mut e = start;
                while !seen[e] {
                    seen[e] = true;
                    lp.push(e);
                    e = next[e];
                }
                out.push(lp);
            }
            out
        })
    })
}

/// Triangles (as edge triples) for a case, wound so that normals point
/// from inside to outside.
pub fn triangles(case: usize) -> impl Iterator<Item = [usize; 3]> {
    loops()[case]
        .iter()
        .flat_map(|lp| (1..lp.len() - 1).map(move |k| [lp[0], lp[k + 1], lp[k]]))
}
