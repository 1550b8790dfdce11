//! Incremental Bowyer–Watson Delaunay triangulation in two and three
//! dimensions, with exact orientation and in-sphere predicates.
//!
//! Co-spherical ties are resolved by running the predicates on coordinates
//! mapped through a fixed, slightly sheared linear map `x + s T x`. A linear map
//! sends congruent lattice cells to congruent cells, so a regular grid is split
//! the same way everywhere.

use std::collections::HashMap;

use robust::{Coord, Coord3D};

use crate::error::{DtqError, Result};

const NONE: usize = usize::MAX;
const SHEAR: f64 = 1e-9;
const SHEAR_T: [[f64; 3]; 3] = [
    [0.0, 0.613, 0.271],
    [0.389, 0.0, 0.757],
    [0.127, 0.541, 0.0],
];
const SUPER_SCALE: f64 = 1e5;

/// Delaunay triangulation of a point set. Simplices index into the input
/// point list.
#[derive(Debug, Clone)]
pub struct Triangulation {
    dim: usize,
    n: usize,
    coords: Vec<f64>,
    work: Vec<f64>,
    verts: Vec<usize>,
    nbrs: Vec<usize>,
    alive: Vec<bool>,
    vertex_simplex: Vec<usize>,
    finite: Vec<usize>,
    radii: Vec<f64>,
}

fn shear(dim: usize, x: &[f64], out: &mut [f64]) {
    for r in 0..dim {
        let mut v = x[r];
        for c in 0..dim {
            v += SHEAR * SHEAR_T[r][c] * x[c];
        }
        out[r] = v;
    }
}

fn orient(dim: usize, p: &[&[f64]]) -> f64 {
    if dim == 2 {
        robust::orient2d(c2(p[0]), c2(p[1]), c2(p[2]))
    } else {
        // robust's orient3d is positive for the opposite handedness
        -robust::orient3d(c3(p[0]), c3(p[1]), c3(p[2]), c3(p[3]))
    }
}

/// Positive iff `q` is strictly inside the circumsphere of the positively
/// oriented simplex `p`.
fn insphere(dim: usize, p: &[&[f64]], q: &[f64]) -> f64 {
    if dim == 2 {
        robust::incircle(c2(p[0]), c2(p[1]), c2(p[2]), c2(q))
    } else {
        // with our orientation sign flipped, swap two vertices for robust
        robust::insphere(c3(p[1]), c3(p[0]), c3(p[2]), c3(p[3]), c3(q))
    }
}

fn c2(p: &[f64]) -> Coord<f64> {
    Coord { x: p[0], y: p[1] }
}

fn c3(p: &[f64]) -> Coord3D<f64> {
    Coord3D {
        x: p[0],
        y: p[1],
        z: p[2],
    }
}

/// Radius of the sphere through the `N + 1` vertices of a simplex.
pub fn circumsphere_radius(vertices: &[&[f64]]) -> Result<f64> {
    let dim = vertices.len().saturating_sub(1);
    if dim == 0 || vertices.iter().any(|v| v.len() != dim) {
        return Err(DtqError::DegenerateGeometry(
            "simplex needs N + 1 points in N dimensions",
        ));
    }
    let v0 = vertices[0];
    // rows: v_i - v_0, rhs: |v_i - v_0|^2 / 2
    let mut a = vec![0.0; dim * dim];
    let mut b = vec![0.0; dim];
    let mut scale: f64 = 0.0;
    for i in 0..dim {
        for c in 0..dim {
            let e = vertices[i + 1][c] - v0[c];
            a[i * dim + c] = e;
            b[i] += 0.5 * e * e;
            scale = scale.max(e.abs());
        }
    }
    let center = solve_dense(&mut a, &mut b, dim, scale)
        .ok_or(DtqError::DegenerateGeometry("degenerate simplex"))?;
    Ok(center.iter().map(|x| x * x).sum::<f64>().sqrt())
}

/// Gaussian elimination with partial pivoting on a small row-major system.
fn solve_dense(a: &mut [f64], b: &mut [f64], n: usize, scale: f64) -> Option<Vec<f64>> {
    for k in 0..n {
        let p = (k..n).max_by(|&i, &j| a[i * n + k].abs().total_cmp(&a[j * n + k].abs()))?;
        if a[p * n + k].abs() <= 1e-12 * scale.max(f64::MIN_POSITIVE) {
            return None;
        }
        if p != k {
            for c in 0..n {
                a.swap(p * n + c, k * n + c);
            }
            b.swap(p, k);
        }
        for r in k + 1..n {
            let l = a[r * n + k] / a[k * n + k];
            for c in k..n {
                a[r * n + c] -= l * a[k * n + c];
            }
            b[r] -= l * b[k];
        }
    }
    let mut x = vec![0.0; n];
    for k in (0..n).rev() {
        let s: f64 = (k + 1..n).map(|c| a[k * n + c] * x[c]).sum();
        x[k] = (b[k] - s) / a[k * n + k];
    }
    Some(x)
}

fn morton_key(q: &[u32]) -> u64 {
    let dim = q.len();
    let bits = 63 / dim as u32;
    let mut key = 0u64;
    for b in (0..bits).rev() {
        for &v in q {
            key = (key << 1) | ((v >> b) & 1) as u64;
        }
    }
    key
}

/// Delaunay triangulation of `points` (flattened, `dim` coordinates each).
pub fn delaunay(points: &[f64], dim: usize) -> Result<Triangulation> {
    if !(2..=3).contains(&dim) {
        return Err(DtqError::Unsupported(format!(
            "Delaunay triangulation in {dim} dimensions"
        )));
    }
    let n = points.len() / dim;
    if n < dim + 1 {
        return Err(DtqError::DegenerateGeometry("too few points"));
    }
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for p in points.chunks_exact(dim) {
        for c in 0..dim {
            lo[c] = lo[c].min(p[c]);
            hi[c] = hi[c].max(p[c]);
        }
    }
    if lo.iter().chain(&hi).any(|v| !v.is_finite()) {
        return Err(DtqError::DegenerateGeometry("non-finite coordinates"));
    }

    let mut work = vec![0.0; (n + dim + 1) * dim];
    for (i, p) in points.chunks_exact(dim).enumerate() {
        shear(dim, p, &mut work[i * dim..(i + 1) * dim]);
    }
    // super simplex containing the bounding ball with a wide margin
    let center: Vec<f64> = (0..dim).map(|c| 0.5 * (lo[c] + hi[c])).collect();
    let radius = (0..dim)
        .map(|c| (hi[c] - lo[c]).powi(2))
        .sum::<f64>()
        .sqrt()
        .max(1e-3);
    let big = SUPER_SCALE * radius;
    for k in 0..=dim {
        let slot = &mut work[(n + k) * dim..(n + k + 1) * dim];
        for c in 0..dim {
            slot[c] = center[c] - big;
        }
        if k > 0 {
            slot[k - 1] += big * (dim as f64 + 2.0);
        }
    }

    let mut tri = Triangulation {
        dim,
        n,
        coords: points.to_vec(),
        work,
        verts: Vec::new(),
        nbrs: Vec::new(),
        alive: Vec::new(),
        vertex_simplex: vec![NONE; n + dim + 1],
        finite: Vec::new(),
        radii: Vec::new(),
    };
    let mut root: Vec<usize> = (n..=n + dim).collect();
    if tri.orient_of(&root) < 0.0 {
        root.swap(0, 1);
    }
    tri.push_simplex(&root, &vec![NONE; dim + 1]);

    // Morton order keeps successive insertions close together
    let span: Vec<f64> = (0..dim).map(|c| (hi[c] - lo[c]).max(1e-300)).collect();
    let levels = ((1u64 << (63 / dim)) - 1) as f64;
    let mut order: Vec<(u64, usize)> = points
        .chunks_exact(dim)
        .enumerate()
        .map(|(i, p)| {
            let q: Vec<u32> = (0..dim)
                .map(|c| (((p[c] - lo[c]) / span[c]) * levels) as u32)
                .collect();
            (morton_key(&q), i)
        })
        .collect();
    order.sort_unstable();

    let mut scratch = Scratch::default();
    let mut last = 0;
    for &(_, v) in &order {
        if let Some(s) = tri.insert(v, last, &mut scratch)? {
            last = s;
        }
    }

    for s in 0..tri.alive.len() {
        if tri.alive[s] && tri.simplex(s).iter().all(|&v| v < n) {
            tri.finite.push(s);
        }
    }
    if tri.finite.is_empty() {
        return Err(DtqError::DegenerateGeometry(
            "points are affinely dependent",
        ));
    }
    let mut radii = Vec::with_capacity(tri.finite.len());
    for &s in &tri.finite {
        let vs: Vec<&[f64]> = tri.simplex(s).iter().map(|&v| tri.point(v)).collect();
        radii.push(circumsphere_radius(&vs).unwrap_or(f64::INFINITY));
    }
    tri.radii = radii;
    Ok(tri)
}

#[derive(Default)]
struct Scratch {
    stamp: Vec<u32>,
    excluded: Vec<u32>,
    epoch: u32,
    cavity: Vec<usize>,
    stack: Vec<usize>,
    free: Vec<usize>,
}

impl Triangulation {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_points(&self) -> usize {
        self.n
    }

    /// Input coordinates of point `i`.
    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    /// Number of finite simplices.
    pub fn len(&self) -> usize {
        self.finite.len()
    }

    pub fn is_empty(&self) -> bool {
        self.finite.is_empty()
    }

    /// Finite simplices as `N + 1` point indices.
    pub fn simplices(&self) -> impl Iterator<Item = &[usize]> + '_ {
        self.finite.iter().map(|&s| self.simplex(s))
    }

    /// Circumradius of each finite simplex, aligned with [`Self::simplices`].
    pub fn circumradii(&self) -> &[f64] {
        &self.radii
    }

    /// Volume of each finite simplex, aligned with [`Self::simplices`].
    pub fn volumes(&self) -> Vec<f64> {
        let fact = if self.dim == 2 { 2.0 } else { 6.0 };
        self.simplices()
            .map(|s| {
                let v: Vec<&[f64]> = s.iter().map(|&i| self.point(i)).collect();
                let mut m = [[0.0; 3]; 3];
                for r in 0..self.dim {
                    for c in 0..self.dim {
                        m[r][c] = v[r + 1][c] - v[0][c];
                    }
                }
                let det = if self.dim == 2 {
                    m[0][0] * m[1][1] - m[0][1] * m[1][0]
                } else {
                    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
                };
                det.abs() / fact
            })
            .collect()
    }

    fn simplex(&self, s: usize) -> &[usize] {
        &self.verts[s * (self.dim + 1)..(s + 1) * (self.dim + 1)]
    }

    fn wpoint(&self, v: usize) -> &[f64] {
        &self.work[v * self.dim..(v + 1) * self.dim]
    }

    fn orient_of(&self, vs: &[usize]) -> f64 {
        let p: Vec<&[f64]> = vs.iter().map(|&v| self.wpoint(v)).collect();
        orient(self.dim, &p)
    }

    /// Orientation of simplex `s` with vertex `i` replaced by `x`.
    fn orient_replaced(&self, s: usize, i: usize, x: &[f64]) -> f64 {
        let mut p: [&[f64]; 4] = [&[]; 4];
        for (k, &v) in self.simplex(s).iter().enumerate() {
            p[k] = if k == i { x } else { self.wpoint(v) };
        }
        orient(self.dim, &p[..=self.dim])
    }

    fn inside_circumsphere(&self, s: usize, x: &[f64]) -> bool {
        let mut p: [&[f64]; 4] = [&[]; 4];
        for (k, &v) in self.simplex(s).iter().enumerate() {
            p[k] = self.wpoint(v);
        }
        insphere(self.dim, &p[..=self.dim], x) > 0.0
    }

    fn push_simplex(&mut self, vs: &[usize], nb: &[usize]) -> usize {
        let s = self.alive.len();
        self.verts.extend_from_slice(vs);
        self.nbrs.extend_from_slice(nb);
        self.alive.push(true);
        s
    }

    /// Visibility walk towards `x` (working coordinates). Returns a simplex
    /// whose closure contains `x`, or `None` if `x` is outside the super simplex.
    fn walk(&self, x: &[f64], start: usize) -> Option<usize> {
        let d1 = self.dim + 1;
        let mut s = start;
        let mut prev = NONE;
        let limit = 4 * self.alive.len() + 100;
        for step in 0..limit {
            let mut next = None;
            for k in 0..d1 {
                let i = (k + step) % d1;
                let t = self.nbrs[s * d1 + i];
                if t == prev {
                    continue;
                }
                if self.orient_replaced(s, i, x) < 0.0 {
                    next = Some((i, t));
                    break;
                }
            }
            match next {
                None => {
                    // `prev` face was skipped; confirm containment on it too
                    if prev != NONE {
                        let i = (0..d1).find(|&i| self.nbrs[s * d1 + i] == prev).unwrap();
                        if self.orient_replaced(s, i, x) < 0.0 {
                            return self.walk_brute(x);
                        }
                    }
                    return Some(s);
                }
                Some((_, t)) if t == NONE => return None,
                Some((_, t)) => {
                    prev = s;
                    s = t;
                }
            }
        }
        self.walk_brute(x)
    }

    fn walk_brute(&self, x: &[f64]) -> Option<usize> {
        (0..self.alive.len()).find(|&s| {
            self.alive[s] && (0..=self.dim).all(|i| self.orient_replaced(s, i, x) >= 0.0)
        })
    }

    fn insert(&mut self, v: usize, start: usize, sc: &mut Scratch) -> Result<Option<usize>> {
        let d = self.dim;
        let d1 = d + 1;
        let x: Vec<f64> = self.wpoint(v).to_vec();
        let seed = self.walk(&x, start).ok_or(DtqError::DegenerateGeometry(
            "point outside the super simplex",
        ))?;
        if self
            .simplex(seed)
            .iter()
            .any(|&u| self.wpoint(u) == x.as_slice())
        {
            // duplicate point: leave it out
            return Ok(None);
        }
        if sc.stamp.len() < self.alive.len() {
            sc.stamp.resize(self.alive.len(), 0);
            sc.excluded.resize(self.alive.len(), 0);
        }
        sc.epoch = sc.epoch.wrapping_add(1);
        if sc.epoch == 0 {
            sc.stamp.iter_mut().for_each(|s| *s = 0);
            sc.excluded.iter_mut().for_each(|s| *s = 0);
            sc.epoch = 1;
        }
        let exclude_epoch = sc.epoch;
        let mut boundary: Vec<(usize, usize, usize)>;
        loop {
            // BFS over simplices whose circumsphere strictly contains x
            sc.epoch = sc.epoch.wrapping_add(1);
            let epoch = sc.epoch;
            sc.cavity.clear();
            sc.stack.clear();
            sc.stack.push(seed);
            sc.stamp[seed] = epoch;
            while let Some(s) = sc.stack.pop() {
                sc.cavity.push(s);
                for i in 0..d1 {
                    let t = self.nbrs[s * d1 + i];
                    if t == NONE || sc.stamp[t] == epoch || sc.excluded[t] == exclude_epoch {
                        continue;
                    }
                    if self.inside_circumsphere(t, &x) {
                        sc.stamp[t] = epoch;
                        sc.stack.push(t);
                    }
                }
            }
            boundary = Vec::new();
            let mut bad = Vec::new();
            for &s in &sc.cavity {
                for i in 0..d1 {
                    let t = self.nbrs[s * d1 + i];
                    if t != NONE && sc.stamp[t] == epoch {
                        continue;
                    }
                    if self.orient_replaced(s, i, &x) <= 0.0 {
                        bad.push(s);
                    } else {
                        boundary.push((s, i, t));
                    }
                }
            }
            if bad.is_empty() {
                break;
            }
            if bad.contains(&seed) {
                return Err(DtqError::DegenerateGeometry(
                    "cannot form a star-shaped cavity",
                ));
            }
            for s in bad {
                sc.excluded[s] = exclude_epoch;
            }
        }
        // after the loop the cavity is stamped with the current epoch
        sc.epoch = sc.epoch.wrapping_add(1);

        let mut ridges: HashMap<[usize; 2], (usize, usize)> =
            HashMap::with_capacity(boundary.len() * d);
        let mut created = Vec::with_capacity(boundary.len());
        for &(s, i, t) in &boundary {
            let mut vs = [0usize; 4];
            vs[..d1].copy_from_slice(self.simplex(s));
            vs[i] = v;
            let mut nb = [NONE; 4];
            nb[i] = t;
            let id = if let Some(slot) = sc.free.pop() {
                self.verts[slot * d1..(slot + 1) * d1].copy_from_slice(&vs[..d1]);
                self.nbrs[slot * d1..(slot + 1) * d1].copy_from_slice(&nb[..d1]);
                self.alive[slot] = true;
                slot
            } else {
                self.push_simplex(&vs[..d1], &nb[..d1])
            };
            if t != NONE {
                let j = (0..d1)
                    .find(|&j| self.nbrs[t * d1 + j] == s)
                    .expect("adjacency is symmetric");
                self.nbrs[t * d1 + j] = id;
            }
            for k in 0..d1 {
                if k == i {
                    continue;
                }
                let mut key = [NONE; 2];
                let mut m = 0;
                for (l, &u) in vs[..d1].iter().enumerate() {
                    if l != k && l != i {
                        key[m] = u;
                        m += 1;
                    }
                }
                key[..m].sort_unstable();
                match ridges.remove(&key) {
                    Some((other, ok)) => {
                        self.nbrs[id * d1 + k] = other;
                        self.nbrs[other * d1 + ok] = id;
                    }
                    None => {
                        ridges.insert(key, (id, k));
                    }
                }
            }
            created.push(id);
        }
        debug_assert!(ridges.is_empty(), "cavity boundary is not closed");
        for &s in &sc.cavity {
            self.alive[s] = false;
            sc.free.push(s);
        }
        // freed slots may be reused; make sure stale stamps cannot collide
        if sc.stamp.len() < self.alive.len() {
            sc.stamp.resize(self.alive.len(), 0);
            sc.excluded.resize(self.alive.len(), 0);
        }
        for &id in &created {
            for k in 0..d1 {
                let u = self.verts[id * d1 + k];
                self.vertex_simplex[u] = id;
            }
        }
        Ok(created.first().copied())
    }

    /// Locates `x` and returns the containing finite simplex with barycentric
    /// coordinates, or `None` when `x` is outside the convex hull.
    /// `hint` is a point index near `x` used to start the walk.
    pub fn locate(&self, x: &[f64], hint: Option<usize>) -> Option<(Vec<usize>, Vec<f64>)> {
        let d = self.dim;
        let mut xs = [0.0; 3];
        shear(d, x, &mut xs);
        let start = hint
            .and_then(|h| self.vertex_simplex.get(h).copied())
            .filter(|&s| s != NONE && self.alive[s])
            .or_else(|| self.finite.first().copied())?;
        let s = self.walk(&xs[..d], start)?;
        let vs = self.simplex(s).to_vec();
        if vs.iter().any(|&v| v >= self.n) {
            return None;
        }
        let v0 = self.point(vs[0]);
        // x - v0 = sum_{i>0} lambda_i (v_i - v0), solved column-wise
        let mut a = vec![0.0; d * d];
        let mut b = vec![0.0; d];
        let mut scale: f64 = 0.0;
        for r in 0..d {
            for c in 0..d {
                a[r * d + c] = self.point(vs[c + 1])[r] - v0[r];
                scale = scale.max(a[r * d + c].abs());
            }
            b[r] = x[r] - v0[r];
        }
        let lam = solve_dense(&mut a, &mut b, d, scale)?;
        let mut bary = Vec::with_capacity(d + 1);
        bary.push(1.0 - lam.iter().sum::<f64>());
        bary.extend(lam);
        Some((vs, bary))
    }
}
