//! k-nearest-neighbor adjacency graphs and the unnormalized Laplacian `L = D - W`.

use std::io::{BufRead, Write};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{median, sq_dist, Bandwidth};

/// Largest graph whose Laplacian is materialized densely by default.
pub const DEFAULT_DENSE_CAP: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    #[default]
    Heat,
    Binary,
}

impl std::str::FromStr for WeightScheme {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "heat" => Ok(WeightScheme::Heat),
            "binary" => Ok(WeightScheme::Binary),
            other => Err(format!("unknown weight scheme `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphSpec {
    pub k_neighbors: usize,
    pub weight_scheme: WeightScheme,
    pub bandwidth: Bandwidth,
    pub max_dense_n: usize,
}

impl Default for GraphSpec {
    fn default() -> Self {
        Self {
            k_neighbors: 10,
            weight_scheme: WeightScheme::Heat,
            bandwidth: Bandwidth::Auto,
            max_dense_n: DEFAULT_DENSE_CAP,
        }
    }
}

/// Symmetric, nonnegative, zero-diagonal sparse adjacency in CSR form. Every
/// undirected edge is stored in both rows, with columns ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    n: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
    degrees: Vec<f64>,
    /// Resolved heat bandwidth, when one was used.
    bandwidth: Option<f64>,
}

impl Graph {
    /// Builds a graph from undirected edges `(i, j, w)`. Duplicate pairs are
    /// rejected, as are self-loops and negative weights.
    pub fn from_edges(n: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for &(i, j, w) in edges {
            if i >= n || j >= n {
                return Err(Error::invalid(format!("edge ({i}, {j}) outside {n} nodes")));
            }
            if i == j {
                return Err(Error::invalid(format!("self-loop at node {i}")));
            }
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::invalid(format!("edge ({i}, {j}) has weight {w}")));
            }
            rows[i].push((j, w));
            rows[j].push((i, w));
        }
        for (i, row) in rows.iter_mut().enumerate() {
            row.sort_by_key(|&(j, _)| j);
            if row.windows(2).any(|p| p[0].0 == p[1].0) {
                return Err(Error::invalid(format!("duplicate edge at node {i}")));
            }
        }
        Ok(Self::from_rows(rows, None))
    }

    fn from_rows(rows: Vec<Vec<(usize, f64)>>, bandwidth: Option<f64>) -> Self {
        let n = rows.len();
        let mut indptr = Vec::with_capacity(n + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        let mut degrees = Vec::with_capacity(n);
        indptr.push(0);
        for row in rows {
            let mut d = 0.0;
            for (j, w) in row {
                indices.push(j);
                values.push(w);
                d += w;
            }
            degrees.push(d);
            indptr.push(indices.len());
        }
        Self {
            n,
            indptr,
            indices,
            values,
            degrees,
            bandwidth,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn degrees(&self) -> &[f64] {
        &self.degrees
    }

    pub fn bandwidth(&self) -> Option<f64> {
        self.bandwidth
    }

    /// Neighbors of node `i` with their weights.
    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.indptr[i]..self.indptr[i + 1];
        self.indices[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    /// Undirected edge count.
    pub fn n_edges(&self) -> usize {
        self.indices.len() / 2
    }

    /// Undirected edges `(i, j, w)` with `i < j`, in row-major order.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        (0..self.n)
            .flat_map(|i| {
                self.neighbors(i)
                    .filter(move |&(j, _)| j > i)
                    .map(move |(j, w)| (i, j, w))
            })
            .collect()
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        let range = self.indptr[i]..self.indptr[i + 1];
        match self.indices[range.clone()].binary_search(&j) {
            Ok(pos) => self.values[range.start + pos],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut w = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for (j, v) in self.neighbors(i) {
                w[(i, j)] = v;
            }
        }
        w
    }

    pub fn is_connected(&self) -> bool {
        if self.n == 0 {
            return true;
        }
        let mut seen = vec![false; self.n];
        let mut stack = vec![0];
        seen[0] = true;
        let mut count = 1;
        while let Some(i) = stack.pop() {
            for (j, w) in self.neighbors(i) {
                if w > 0.0 && !seen[j] {
                    seen[j] = true;
                    count += 1;
                    stack.push(j);
                }
            }
        }
        count == self.n
    }

    /// SHA-256 over `n` and every undirected edge `(i, j, w)` in canonical order.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update((self.n as u64).to_le_bytes());
        for (i, j, w) in self.edges() {
            h.update((i as u64).to_le_bytes());
            h.update((j as u64).to_le_bytes());
            h.update(w.to_bits().to_le_bytes());
        }
        h.finalize().into()
    }

    pub fn digest_hex(&self) -> String {
        hex::encode(self.digest())
    }

    /// Coordinate-list dump: header `n m`, then one `i j w` line per undirected edge.
    pub fn write_coo<W: Write>(&self, mut out: W) -> Result<()> {
        let edges = self.edges();
        writeln!(out, "{} {}", self.n, edges.len())?;
        for (i, j, w) in edges {
            writeln!(out, "{i} {j} {w}")?;
        }
        Ok(())
    }

    pub fn read_coo<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::invalid("empty graph file"))??;
        let mut parts = header.split_whitespace();
        let parse_usize = |s: Option<&str>, what: &str| -> Result<usize> {
            s.and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::invalid(format!("graph file: bad {what}")))
        };
        let n = parse_usize(parts.next(), "node count")?;
        let m = parse_usize(parts.next(), "edge count")?;
        let mut edges = Vec::with_capacity(m);
        for (k, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 3 {
                return Err(Error::invalid(format!("graph file line {}: expected `i j w`", k + 2)));
            }
            let i = parse_usize(Some(f[0]), "source")?;
            let j = parse_usize(Some(f[1]), "target")?;
            let w: f64 = f[2]
                .parse()
                .map_err(|_| Error::invalid(format!("graph file line {}: bad weight", k + 2)))?;
            edges.push((i, j, w));
        }
        if edges.len() != m {
            return Err(Error::invalid(format!("graph file declares {m} edges, has {}", edges.len())));
        }
        Self::from_edges(n, &edges)
    }
}

/// Union-symmetrized kNN graph over Euclidean distance. Ties among
/// equidistant neighbors go to the lower sample index.
pub fn build_knn_graph(features: &DMatrix<f64>, spec: &GraphSpec) -> Result<Graph> {
    let n = features.nrows();
    if n < 2 {
        return Err(Error::invalid(format!("graph needs at least 2 points, got {n}")));
    }
    if spec.k_neighbors == 0 || spec.k_neighbors >= n {
        return Err(Error::invalid(format!(
            "k_neighbors must lie in [1, {}), got {}",
            n, spec.k_neighbors
        )));
    }
    if n > spec.max_dense_n {
        return Err(Error::invalid(format!(
            "{n} points exceed the dense Laplacian cap of {}",
            spec.max_dense_n
        )));
    }
    if let Bandwidth::Fixed(s) = spec.bandwidth {
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::invalid(format!("bandwidth must be > 0, got {s}")));
        }
    }
    let k = spec.k_neighbors;
    let knn: Vec<Vec<(usize, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut cand: Vec<(usize, f64)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (j, sq_dist(features, i, features, j)))
                .collect();
            cand.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            cand.truncate(k);
            cand
        })
        .collect();

    // Union symmetrization keyed on (min, max).
    let mut pairs: Vec<(usize, usize, f64)> = knn
        .iter()
        .enumerate()
        .flat_map(|(i, row)| row.iter().map(move |&(j, d2)| (i.min(j), i.max(j), d2)))
        .collect();
    pairs.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    pairs.dedup_by(|a, b| a.0 == b.0 && a.1 == b.1);

    let sigma = match (spec.weight_scheme, spec.bandwidth) {
        (WeightScheme::Binary, _) => None,
        (WeightScheme::Heat, Bandwidth::Fixed(s)) => Some(s),
        (WeightScheme::Heat, Bandwidth::Auto) => {
            let mut d: Vec<f64> = pairs.iter().map(|p| p.2.sqrt()).collect();
            let s = median(&mut d);
            if !(s > 0.0) {
                return Err(Error::ZeroBandwidth("median neighbor distance"));
            }
            Some(s)
        }
    };

    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for &(i, j, d2) in &pairs {
        let w = match sigma {
            None => 1.0,
            Some(s) => (-d2 / (2.0 * s * s)).exp(),
        };
        rows[i].push((j, w));
        rows[j].push((i, w));
    }
    for row in &mut rows {
        row.sort_by_key(|&(j, _)| j);
    }
    Ok(Graph::from_rows(rows, sigma))
}

/// Dense `L = diag(d) - W`.
pub fn laplacian(g: &Graph) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(g.n, g.n);
    for i in 0..g.n {
        l[(i, i)] = g.degrees[i];
        for (j, w) in g.neighbors(i) {
            l[(i, j)] -= w;
        }
    }
    l
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{min_eigenvalue, sym_eigen_ascending};
    use nalgebra::DVector;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn coincident_points_get_unit_heat_weight() {
        let x = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, 0.5]);
        let spec = GraphSpec {
            k_neighbors: 1,
            bandwidth: Bandwidth::Fixed(0.3),
            ..Default::default()
        };
        let g = build_knn_graph(&x, &spec).unwrap();
        assert_eq!(g.weight(0, 1), 1.0);
    }

    #[test]
    fn coincident_points_reject_auto_bandwidth() {
        let x = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        let spec = GraphSpec {
            k_neighbors: 1,
            ..Default::default()
        };
        assert!(matches!(build_knn_graph(&x, &spec), Err(Error::ZeroBandwidth(_))));
    }

    #[test]
    fn collinear_binary_knn() {
        let x = DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 3.0]);
        let spec = GraphSpec {
            k_neighbors: 1,
            weight_scheme: WeightScheme::Binary,
            ..Default::default()
        };
        let g = build_knn_graph(&x, &spec).unwrap();
        let w = g.to_dense();
        let expected = DMatrix::from_row_slice(3, 3, &[0., 1., 0., 1., 0., 1., 0., 1., 0.]);
        assert_eq!(w, expected);
        assert_eq!(g.degrees(), &[1.0, 2.0, 1.0]);
    }

    #[test]
    fn ties_prefer_lower_index() {
        // Node 1 is equidistant from 0 and 2.
        let x = DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 2.0]);
        let spec = GraphSpec {
            k_neighbors: 1,
            weight_scheme: WeightScheme::Binary,
            ..Default::default()
        };
        let g = build_knn_graph(&x, &spec).unwrap();
        // 0 -> 1, 1 -> 0 (tie), 2 -> 1.
        assert_eq!(g.n_edges(), 2);
        assert_eq!(g.weight(0, 1), 1.0);
        assert_eq!(g.weight(1, 2), 1.0);
    }

    #[test]
    fn rejects_bad_k() {
        let x = random_points(5, 2, 0);
        for k in [0, 5, 6] {
            let spec = GraphSpec {
                k_neighbors: k,
                ..Default::default()
            };
            assert!(build_knn_graph(&x, &spec).is_err());
        }
    }

    #[test]
    fn two_node_laplacian() {
        let g = Graph::from_edges(2, &[(0, 1, 1.0)]).unwrap();
        let l = laplacian(&g);
        assert_eq!(l, DMatrix::from_row_slice(2, 2, &[1., -1., -1., 1.]));
        let (vals, _) = sym_eigen_ascending(&l);
        assert!(vals[0].abs() < 1e-14);
        assert!((vals[1] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn random_laplacian_is_psd_with_constant_null_vector() {
        let x = random_points(10, 3, 42);
        let g = build_knn_graph(&x, &GraphSpec { k_neighbors: 3, ..Default::default() }).unwrap();
        let l = laplacian(&g);
        let ones = DVector::from_element(10, 1.0);
        assert!((&l * ones).amax() < 1e-12);
        assert!(min_eigenvalue(&l) >= -1e-10);
        if g.is_connected() {
            let (vals, _) = sym_eigen_ascending(&l);
            assert!(vals[1] > 1e-10);
        }
    }

    #[test]
    fn coo_roundtrip() {
        let x = random_points(12, 2, 3);
        let g = build_knn_graph(&x, &GraphSpec { k_neighbors: 3, ..Default::default() }).unwrap();
        let mut buf = Vec::new();
        g.write_coo(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(&format!("12 {}\n", g.n_edges())));
        let back = Graph::read_coo(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(back.to_dense(), g.to_dense());
        assert_eq!(back.digest(), g.digest());
    }

    proptest! {
        #[test]
        fn knn_graph_invariants(seed in 0u64..1000, n in 3usize..16, k in 1usize..4, binary in any::<bool>()) {
            prop_assume!(k < n);
            let x = random_points(n, 2, seed);
            let spec = GraphSpec {
                k_neighbors: k,
                weight_scheme: if binary { WeightScheme::Binary } else { WeightScheme::Heat },
                ..Default::default()
            };
            let g = build_knn_graph(&x, &spec).unwrap();
            let w = g.to_dense();
            prop_assert_eq!(&w, &w.transpose());
            for i in 0..n {
                prop_assert_eq!(w[(i, i)], 0.0);
                prop_assert!(w.row(i).iter().all(|&v| v >= 0.0));
                prop_assert_eq!(g.degrees()[i], g.neighbors(i).map(|(_, v)| v).sum::<f64>());
                // every node keeps at least its own k nearest neighbors
                prop_assert!(g.neighbors(i).count() >= k);
            }
        }

        #[test]
        fn laplacian_quadratic_form(seed in 0u64..1000, n in 3usize..12) {
            let x = random_points(n, 2, seed);
            let g = build_knn_graph(&x, &GraphSpec { k_neighbors: 2, ..Default::default() }).unwrap();
            let l = laplacian(&g);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let f = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
            let quad = f.dot(&(&l * &f));
            let w = g.to_dense();
            let mut direct = 0.0;
            for i in 0..n {
                for j in 0..n {
                    direct += 0.5 * w[(i, j)] * (f[i] - f[j]).powi(2);
                }
            }
            prop_assert!((quad - direct).abs() <= 1e-10 * direct.abs().max(1.0));
            prop_assert!(quad >= -1e-12);
        }
    }
}
