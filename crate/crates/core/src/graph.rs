//! Exact cosine kNN graphs in biomarker space.
//!
//! Distances are `1 - cos(a, b)`, mapped to similarities `w = exp(-d^2 / sigma^2)` and
//! row-normalized over each node's neighbor list into transition weights `p`. Neighbor
//! search is exhaustive; distance ties go to the lower index.

use std::io::{BufRead, Write};
use std::sync::Once;

use crate::error::{Error, Result};
use crate::matrix::{self, Matrix};

static ZERO_VECTOR_WARNING: Once = Once::new();

/// `1 - cos(a, b)`, in `[0, 2]`. A zero vector is treated as orthogonal to everything.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let na = matrix::norm(a);
    let nb = matrix::norm(b);
    if na == 0.0 || nb == 0.0 {
        ZERO_VECTOR_WARNING.call_once(|| {
            log::warn!("zero biomarker vector in cosine distance; using distance 1");
        });
        return 1.0;
    }
    let cos = (matrix::dot(a, b) / (na * nb)).clamp(-1.0, 1.0);
    1.0 - cos
}

pub fn gaussian_weight(d: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
    }
    Ok((-(d * d) / (sigma * sigma)).exp())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub target: usize,
    /// Cosine distance between the endpoints.
    pub distance: f64,
    /// Gaussian similarity before normalization.
    pub raw_weight: f64,
    /// Row-normalized weight.
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnGraph {
    pub n_nodes: usize,
    /// Size of the target set; equals `n_nodes` unless the graph is bipartite.
    pub n_targets: usize,
    pub k: usize,
    pub sigma: f64,
    pub directed: bool,
    pub bipartite: bool,
    pub neighbors: Vec<Vec<Edge>>,
}

impl KnnGraph {
    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum()
    }

    /// Writes the header line `n,k,sigma,directed` then one `src,dst,weight` line per edge.
    pub fn write_text<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{},{},{},{}", self.n_nodes, self.k, self.sigma, self.directed)?;
        for (src, edges) in self.neighbors.iter().enumerate() {
            for e in edges {
                writeln!(out, "{src},{},{}", e.target, sig9(e.weight))?;
            }
        }
        Ok(())
    }
}

/// Scientific notation with nine significant digits.
pub fn sig9(x: f64) -> String {
    format!("{x:.8e}")
}

/// Parsed form of the text export: header fields and `(src, dst, weight)` triples.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphExport {
    pub n_nodes: usize,
    pub k: usize,
    pub sigma: f64,
    pub directed: bool,
    pub edges: Vec<(usize, usize, f64)>,
}

pub fn read_graph_text<R: BufRead>(input: R) -> Result<GraphExport> {
    let mut lines = input.lines().enumerate();
    let bad = |line: usize, message: String| Error::Parse {
        line: line as u64 + 1,
        message,
    };
    let (_, header) = lines
        .next()
        .ok_or_else(|| bad(0, "missing header".into()))?;
    let header = header.map_err(|e| bad(0, e.to_string()))?;
    let h: Vec<&str> = header.trim().split(',').collect();
    if h.len() != 4 {
        return Err(bad(0, format!("header must be n,k,sigma,directed: {header:?}")));
    }
    let parse_err = |i: usize, s: &str| bad(i, format!("cannot parse {s:?}"));
    let n_nodes = h[0].parse().map_err(|_| parse_err(0, h[0]))?;
    let k = h[1].parse().map_err(|_| parse_err(0, h[1]))?;
    let sigma = h[2].parse().map_err(|_| parse_err(0, h[2]))?;
    let directed = h[3].parse().map_err(|_| parse_err(0, h[3]))?;
    let mut edges = Vec::new();
    for (i, line) in lines {
        let line = line.map_err(|e| bad(i, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 3 {
            return Err(bad(i, format!("expected src,dst,weight: {line:?}")));
        }
        edges.push((
            f[0].parse().map_err(|_| parse_err(i, f[0]))?,
            f[1].parse().map_err(|_| parse_err(i, f[1]))?,
            f[2].parse().map_err(|_| parse_err(i, f[2]))?,
        ));
    }
    Ok(GraphExport {
        n_nodes,
        k,
        sigma,
        directed,
        edges,
    })
}

/// Indices of the `k` smallest distances, ties to the lower index.
fn k_smallest(mut candidates: Vec<(f64, usize)>, k: usize) -> Vec<(f64, usize)> {
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    candidates.truncate(k);
    candidates
}

fn weighted_edges(nearest: Vec<(f64, usize)>, sigma: f64) -> Result<Vec<Edge>> {
    let raw = nearest
        .iter()
        .map(|&(d, _)| gaussian_weight(d, sigma))
        .collect::<Result<Vec<_>>>()?;
    let total: f64 = raw.iter().sum();
    Ok(nearest
        .into_iter()
        .zip(raw)
        .map(|((distance, target), w)| Edge {
            target,
            distance,
            raw_weight: w,
            weight: w / total,
        })
        .collect())
}

pub fn build_knn_graph(points: &Matrix, k: usize, sigma: f64) -> Result<KnnGraph> {
    let n = points.rows();
    gaussian_weight(0.0, sigma)?;
    if n < 2 {
        return Err(Error::Config(format!("kNN graph needs at least 2 nodes, got {n}")));
    }
    if k == 0 || k >= n {
        return Err(Error::Config(format!("k must be in 1..={} for {n} nodes, got {k}", n - 1)));
    }
    let neighbors = (0..n)
        .map(|i| {
            let candidates = (0..n)
                .filter(|&j| j != i)
                .map(|j| (cosine_distance(points.row(i), points.row(j)), j))
                .collect();
            weighted_edges(k_smallest(candidates, k), sigma)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(KnnGraph {
        n_nodes: n,
        n_targets: n,
        k,
        sigma,
        directed: true,
        bipartite: false,
        neighbors,
    })
}

/// Links every query row to its `k` nearest reference rows.
pub fn build_cross_knn(queries: &Matrix, refs: &Matrix, k: usize, sigma: f64) -> Result<KnnGraph> {
    gaussian_weight(0.0, sigma)?;
    if queries.cols() != refs.cols() {
        return Err(Error::Shape(format!(
            "query width {} differs from reference width {}",
            queries.cols(),
            refs.cols()
        )));
    }
    let r = refs.rows();
    if k == 0 || k > r {
        return Err(Error::Config(format!(
            "k must be in 1..={r} for {r} reference rows, got {k}"
        )));
    }
    let neighbors = queries
        .iter_rows()
        .map(|q| {
            let candidates = refs
                .iter_rows()
                .enumerate()
                .map(|(j, row)| (cosine_distance(q, row), j))
                .collect();
            weighted_edges(k_smallest(candidates, k), sigma)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(KnnGraph {
        n_nodes: queries.rows(),
        n_targets: r,
        k,
        sigma,
        directed: true,
        bipartite: true,
        neighbors,
    })
}

/// Which directed weight feeds the undirected edge weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Deserialize, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeWeightSource {
    /// Gaussian similarity `w`, symmetric in the endpoints.
    #[default]
    Raw,
    /// Row-normalized `p`.
    Normalized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricGraph {
    pub n_nodes: usize,
    /// `(u, v, weight)` with `u < v`, sorted.
    pub edges: Vec<(usize, usize, f64)>,
}

/// Union of the directed edges; each unordered pair gets the larger available weight.
pub fn symmetrize(g: &KnnGraph, source: EdgeWeightSource) -> Result<SymmetricGraph> {
    if g.bipartite {
        return Err(Error::Validation("cannot symmetrize a bipartite graph".into()));
    }
    let mut pairs: Vec<(usize, usize, f64)> = g
        .neighbors
        .iter()
        .enumerate()
        .flat_map(|(src, edges)| {
            edges.iter().map(move |e| {
                let w = match source {
                    EdgeWeightSource::Raw => e.raw_weight,
                    EdgeWeightSource::Normalized => e.weight,
                };
                (src.min(e.target), src.max(e.target), w)
            })
        })
        .collect();
    pairs.sort_by_key(|p| (p.0, p.1));
    let mut edges: Vec<(usize, usize, f64)> = Vec::with_capacity(pairs.len());
    for (u, v, w) in pairs {
        match edges.last_mut() {
            Some(last) if last.0 == u && last.1 == v => last.2 = last.2.max(w),
            _ => edges.push((u, v, w)),
        }
    }
    Ok(SymmetricGraph {
        n_nodes: g.n_nodes,
        edges,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn cosine_distance_cases() {
        assert_eq!(cosine_distance(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[0.0, 1.0]), 1.0);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[-1.0, 0.0]), 2.0);
        assert_eq!(cosine_distance(&[0.0, 0.0], &[1.0, 2.0]), 1.0);
    }

    #[test]
    fn gaussian_weight_cases() {
        assert_eq!(gaussian_weight(0.0, 1.0).unwrap(), 1.0);
        assert!((gaussian_weight(1.0, 1.0).unwrap() - 0.367879441171).abs() < 1e-12);
        assert!((gaussian_weight(2.0, 2.0).unwrap() - 0.367879441171).abs() < 1e-12);
        assert!(matches!(gaussian_weight(1.0, 0.0), Err(Error::Config(_))));
        assert!(matches!(gaussian_weight(1.0, -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn identical_points_tie_to_lowest_index() {
        let g = build_knn_graph(&m(&[&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0]]), 1, 1.0).unwrap();
        let targets: Vec<usize> = g.neighbors.iter().map(|e| e[0].target).collect();
        assert_eq!(targets, vec![1, 0, 0]);
        assert!(g.neighbors.iter().all(|e| e.len() == 1 && e[0].weight == 1.0));
    }

    #[test]
    fn nearest_by_enumeration() {
        let pts = m(&[&[1.0, 0.0], &[0.9, 0.1], &[0.0, 1.0]]);
        // d(0,1) = 1 - 0.9/sqrt(0.82) ≈ 0.00612, d(0,2) = 1.
        let g = build_knn_graph(&pts, 1, 1.0).unwrap();
        assert_eq!(g.neighbors[0][0].target, 1);
    }

    #[test]
    fn k_bounds() {
        let pts = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!(build_knn_graph(&pts, 2, 1.0).is_err());
        assert!(build_knn_graph(&pts, 0, 1.0).is_err());
        assert!(build_cross_knn(&pts, &pts, 3, 1.0).is_err());
    }

    #[test]
    fn cross_knn_exact_match_and_saturation() {
        let refs = m(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 2.0]]);
        let q = m(&[&[1.0, 2.0]]);
        let g = build_cross_knn(&q, &refs, 1, 1.0).unwrap();
        assert_eq!(g.neighbors[0].len(), 1);
        assert_eq!(g.neighbors[0][0].target, 2);
        assert_eq!(g.neighbors[0][0].weight, 1.0);
        let g = build_cross_knn(&q, &refs, 3, 1.0).unwrap();
        let mut t: Vec<usize> = g.neighbors[0].iter().map(|e| e.target).collect();
        t.sort();
        assert_eq!(t, vec![0, 1, 2]);
    }

    #[test]
    fn cross_knn_hand_weights() {
        // Unit vectors at angles giving cosine distances 0.1 and 0.3 from the query.
        let at = |d: f64| {
            let c: f64 = 1.0 - d;
            [c, (1.0 - c * c).sqrt()]
        };
        let refs = m(&[&at(0.3), &at(0.1)]);
        let g = build_cross_knn(&m(&[&[1.0, 0.0]]), &refs, 2, 1.0).unwrap();
        let (a, b) = ((-0.01f64).exp(), (-0.09f64).exp());
        let e = &g.neighbors[0];
        assert_eq!(e[0].target, 1);
        assert!((e[0].weight - a / (a + b)).abs() < 1e-12);
        assert!((e[1].weight - b / (a + b)).abs() < 1e-12);
    }

    fn directed(n: usize, edges: &[(usize, usize, f64)]) -> KnnGraph {
        let mut neighbors = vec![Vec::new(); n];
        for &(s, t, w) in edges {
            neighbors[s].push(Edge {
                target: t,
                distance: 0.0,
                raw_weight: w,
                weight: 1.0,
            });
        }
        KnnGraph {
            n_nodes: n,
            n_targets: n,
            k: 1,
            sigma: 1.0,
            directed: true,
            bipartite: false,
            neighbors,
        }
    }

    #[test]
    fn symmetrize_cases() {
        let s = symmetrize(&directed(2, &[(0, 1, 0.5), (1, 0, 0.5)]), EdgeWeightSource::Raw).unwrap();
        assert_eq!(s.edges, vec![(0, 1, 0.5)]);
        let s = symmetrize(&directed(3, &[(0, 1, 0.4)]), EdgeWeightSource::Raw).unwrap();
        assert_eq!(s.edges, vec![(0, 1, 0.4)]);
        assert!(s.edges.iter().all(|&(u, v, _)| u != 2 && v != 2));
        let mut bip = directed(2, &[(0, 1, 0.5)]);
        bip.bipartite = true;
        assert!(symmetrize(&bip, EdgeWeightSource::Raw).is_err());
    }

    #[test]
    fn text_export() {
        let g = build_knn_graph(&m(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]), 1, 1.0).unwrap();
        let mut buf = Vec::new();
        g.write_text(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("3,1,1,true\n"));
        assert!(text.contains("0,2,1.00000000e0\n"));
        let back = read_graph_text(buf.as_slice()).unwrap();
        assert_eq!(back.edges.len(), 3);
        assert_eq!((back.n_nodes, back.k, back.directed), (3, 1, true));
    }

    fn points(n: usize, m: usize) -> impl Strategy<Value = Matrix> {
        proptest::collection::vec(-5.0f64..5.0, n * m)
            .prop_map(move |v| Matrix::from_vec(n, m, v).unwrap())
    }

    proptest! {
        #[test]
        fn rows_are_stochastic(pts in points(12, 4), k in 1usize..11, sigma in 0.1f64..3.0) {
            let g = build_knn_graph(&pts, k, sigma).unwrap();
            for (i, edges) in g.neighbors.iter().enumerate() {
                prop_assert_eq!(edges.len(), k);
                let s: f64 = edges.iter().map(|e| e.weight).sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
                prop_assert!(edges.iter().all(|e| e.target != i && e.weight >= 0.0));
                let mut t: Vec<usize> = edges.iter().map(|e| e.target).collect();
                t.sort();
                t.dedup();
                prop_assert_eq!(t.len(), k);
            }
        }

        #[test]
        fn positive_rescaling_leaves_graph_unchanged(pts in points(10, 3), scale in 0.5f64..4.0) {
            let scaled = Matrix::from_vec(10, 3, pts.as_slice().iter().map(|v| v * scale).collect()).unwrap();
            let a = build_knn_graph(&pts, 3, 1.0).unwrap();
            let b = build_knn_graph(&scaled, 3, 1.0).unwrap();
            for (ea, eb) in a.neighbors.iter().zip(&b.neighbors) {
                let ta: Vec<usize> = ea.iter().map(|e| e.target).collect();
                let tb: Vec<usize> = eb.iter().map(|e| e.target).collect();
                prop_assert_eq!(ta, tb);
                for (x, y) in ea.iter().zip(eb) {
                    prop_assert!((x.weight - y.weight).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn permutation_relabels_consistently(pts in points(9, 3), seed in 0u64..1000) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut perm: Vec<usize> = (0..9).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            // Row i of `permuted` is row perm[i] of `pts`.
            let permuted = pts.select_rows(&perm);
            let a = build_knn_graph(&pts, 2, 1.0).unwrap();
            let b = build_knn_graph(&permuted, 2, 1.0).unwrap();
            for (i, &orig) in perm.iter().enumerate() {
                let mut ta: Vec<usize> = a.neighbors[orig].iter().map(|e| e.target).collect();
                let mut tb: Vec<usize> = b.neighbors[i].iter().map(|e| perm[e.target]).collect();
                ta.sort();
                tb.sort();
                // Random continuous data has no exact distance ties, so the sets agree.
                prop_assert_eq!(ta, tb);
            }
        }
    }
}
