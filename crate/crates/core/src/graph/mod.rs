//! Landmark pathway: fixed facial graph, per-frame graph-attention
//! embedding, shot-level pooling, and LSTM→GRU temporal aggregation.

pub mod gat;
pub mod recurrent;

use crate::error::{Error, Result};

/// Number of landmark points per frame.
pub const LANDMARK_COUNT: usize = 68;

/// Landmark index groups (iBUG 68-point layout, 0-indexed).
pub const JAW: std::ops::RangeInclusive<usize> = 0..=16;
pub const RIGHT_BROW: std::ops::RangeInclusive<usize> = 17..=21;
pub const LEFT_BROW: std::ops::RangeInclusive<usize> = 22..=26;
pub const NOSE_BRIDGE: std::ops::RangeInclusive<usize> = 27..=30;
pub const NOSE_BASE: std::ops::RangeInclusive<usize> = 31..=35;
pub const RIGHT_EYE: std::ops::RangeInclusive<usize> = 36..=41;
pub const LEFT_EYE: std::ops::RangeInclusive<usize> = 42..=47;
pub const OUTER_LIP: std::ops::RangeInclusive<usize> = 48..=59;
pub const INNER_LIP: std::ops::RangeInclusive<usize> = 60..=67;

/// Undirected graph over landmark nodes with self-loops on every node.
#[derive(Debug, Clone)]
pub struct FacialGraph {
    pub node_count: usize,
    /// Undirected edge list including self-loops, each pair stored once
    /// with u <= v.
    pub edges: Vec<(usize, usize)>,
    /// Sorted neighbor lists including the node itself.
    pub adjacency: Vec<Vec<usize>>,
}

impl FacialGraph {
    /// Builds a graph from undirected edges; self-loops are added on all
    /// nodes automatically.
    pub fn from_edges(node_count: usize, raw_edges: &[(usize, usize)]) -> Self {
        let mut seen = vec![vec![false; node_count]; node_count];
        let mut edges = Vec::new();
        let add = |seen: &mut Vec<Vec<bool>>, edges: &mut Vec<(usize, usize)>, u: usize, v: usize| {
            let (a, b) = if u <= v { (u, v) } else { (v, u) };
            if !seen[a][b] {
                seen[a][b] = true;
                edges.push((a, b));
            }
        };
        for n in 0..node_count {
            add(&mut seen, &mut edges, n, n);
        }
        for &(u, v) in raw_edges {
            assert!(u < node_count && v < node_count, "edge out of range");
            add(&mut seen, &mut edges, u, v);
        }
        let mut adjacency = vec![Vec::new(); node_count];
        for &(u, v) in &edges {
            adjacency[u].push(v);
            if u != v {
                adjacency[v].push(u);
            }
        }
        for adj in &mut adjacency {
            adj.sort_unstable();
        }
        FacialGraph {
            node_count,
            edges,
            adjacency,
        }
    }

    /// Additive attention mask: 0 where j is a neighbor of i (including
    /// i itself), a large negative constant elsewhere so masked entries
    /// underflow to exactly zero weight after softmax.
    pub fn attention_mask(&self) -> Vec<f64> {
        let n = self.node_count;
        let mut mask = vec![-1e30; n * n];
        for (i, adj) in self.adjacency.iter().enumerate() {
            for &j in adj {
                mask[i * n + j] = 0.0;
            }
        }
        mask
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.adjacency[node]
    }

    pub fn is_connected(&self) -> bool {
        if self.node_count == 0 {
            return true;
        }
        let mut visited = vec![false; self.node_count];
        let mut stack = vec![0usize];
        visited[0] = true;
        let mut count = 1;
        while let Some(u) = stack.pop() {
            for &v in &self.adjacency[u] {
                if !visited[v] {
                    visited[v] = true;
                    count += 1;
                    stack.push(v);
                }
            }
        }
        count == self.node_count
    }
}

/// The fixed 68-node facial topology: chains along the jaw, brows and
/// nose, cycles around the eyes and lips, eight bridge edges tying the
/// regions together, and self-loops everywhere.
pub fn build_facial_graph() -> FacialGraph {
    let mut edges = Vec::new();
    let chain = |edges: &mut Vec<(usize, usize)>, range: std::ops::RangeInclusive<usize>| {
        let (lo, hi) = (*range.start(), *range.end());
        for i in lo..hi {
            edges.push((i, i + 1));
        }
    };
    let cycle = |edges: &mut Vec<(usize, usize)>, range: std::ops::RangeInclusive<usize>| {
        let (lo, hi) = (*range.start(), *range.end());
        for i in lo..hi {
            edges.push((i, i + 1));
        }
        edges.push((hi, lo));
    };
    chain(&mut edges, JAW);
    chain(&mut edges, RIGHT_BROW);
    chain(&mut edges, LEFT_BROW);
    chain(&mut edges, NOSE_BRIDGE);
    chain(&mut edges, NOSE_BASE);
    cycle(&mut edges, RIGHT_EYE);
    cycle(&mut edges, LEFT_EYE);
    cycle(&mut edges, OUTER_LIP);
    cycle(&mut edges, INNER_LIP);
    // bridges between regions; beyond the eight listed region bridges,
    // the inner lip ties to the outer lip at the mouth corners (points
    // 60/64 coincide with 48/54 anatomically) and the nose base meets the
    // upper lip at the philtrum (33-51), which keeps the graph connected
    edges.extend_from_slice(&[
        (21, 27),
        (22, 27),
        (30, 33),
        (36, 17),
        (45, 26),
        (48, 3),
        (54, 13),
        (62, 66),
        (48, 60),
        (54, 64),
        (33, 51),
    ]);
    FacialGraph::from_edges(LANDMARK_COUNT, &edges)
}

/// One frame of 68 (x, y) landmark coordinates. `valid == false` marks
/// frames without a detected face; those are excluded upstream.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkFrame {
    pub coords: Vec<[f64; 2]>,
    pub valid: bool,
}

impl LandmarkFrame {
    pub fn new(coords: Vec<[f64; 2]>) -> Result<Self> {
        if coords.len() != LANDMARK_COUNT {
            return Err(Error::Contract(format!(
                "landmark frame needs {LANDMARK_COUNT} points, got {}",
                coords.len()
            )));
        }
        if coords.iter().any(|c| !c[0].is_finite() || !c[1].is_finite()) {
            return Err(Error::Contract("non-finite landmark coordinate".into()));
        }
        Ok(LandmarkFrame {
            coords,
            valid: true,
        })
    }

    pub fn flat_coords(&self) -> Vec<f64> {
        self.coords.iter().flat_map(|c| [c[0], c[1]]).collect()
    }
}

/// One shot's nonempty sequence of valid landmark frames.
#[derive(Debug, Clone)]
pub struct LandmarkShot {
    pub frames: Vec<LandmarkFrame>,
    pub shot_id: String,
}

impl LandmarkShot {
    pub fn new(shot_id: String, frames: Vec<LandmarkFrame>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::Contract(format!(
                "shot {shot_id} has no valid landmark frames"
            )));
        }
        Ok(LandmarkShot { frames, shot_id })
    }
}

fn centroid(coords: &[[f64; 2]]) -> [f64; 2] {
    let n = coords.len() as f64;
    let (sx, sy) = coords
        .iter()
        .fold((0.0, 0.0), |(sx, sy), c| (sx + c[0], sy + c[1]));
    [sx / n, sy / n]
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn region_mean(coords: &[[f64; 2]], range: std::ops::RangeInclusive<usize>) -> [f64; 2] {
    let pts: Vec<[f64; 2]> = range.map(|i| coords[i]).collect();
    centroid(&pts)
}

/// Centers coordinates at their centroid and scales so the inter-ocular
/// distance (right-eye center to left-eye center) equals 1. Degenerate
/// eye geometry falls back to bounding-box diagonal scaling; a frame of
/// identical points is an error.
pub fn normalize_landmarks(frame: &LandmarkFrame) -> Result<LandmarkFrame> {
    let c = centroid(&frame.coords);
    let right_eye = region_mean(&frame.coords, RIGHT_EYE);
    let left_eye = region_mean(&frame.coords, LEFT_EYE);
    let mut scale = dist(right_eye, left_eye);
    if scale < 1e-12 {
        let (mut min_x, mut min_y, mut max_x, mut max_y) =
            (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in &frame.coords {
            min_x = min_x.min(p[0]);
            min_y = min_y.min(p[1]);
            max_x = max_x.max(p[0]);
            max_y = max_y.max(p[1]);
        }
        scale = ((max_x - min_x).powi(2) + (max_y - min_y).powi(2)).sqrt();
        if scale < 1e-12 {
            return Err(Error::DegenerateGeometry(
                "all landmark coordinates coincide".into(),
            ));
        }
    }
    let coords = frame
        .coords
        .iter()
        .map(|p| [(p[0] - c[0]) / scale, (p[1] - c[1]) / scale])
        .collect();
    Ok(LandmarkFrame {
        coords,
        valid: frame.valid,
    })
}

/// Frame-wise mean of per-frame embeddings: the shot-level landmark
/// feature.
pub fn shot_pool(
    tape: &mut crate::tensor::Tape,
    zs: &[crate::tensor::Var],
) -> crate::error::Result<crate::tensor::Var> {
    crate::nn::mean_pool(tape, zs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Eye {
    Right,
    Left,
}

/// Six-point aspect ratio over a cyclic point list p1..p6:
/// (|p2-p6| + |p3-p5|) / (2 |p1-p4|).
fn aspect_ratio(p: &[[f64; 2]; 6], what: &str) -> Result<f64> {
    let horizontal = dist(p[0], p[3]);
    if horizontal < 1e-12 {
        return Err(Error::DegenerateGeometry(format!(
            "{what}: zero horizontal span"
        )));
    }
    Ok((dist(p[1], p[5]) + dist(p[2], p[4])) / (2.0 * horizontal))
}

/// Eye aspect ratio over the eye's six-point cycle (right eye nodes
/// 36-41, left 42-47).
pub fn compute_ear(frame: &LandmarkFrame, eye: Eye) -> Result<f64> {
    let base = match eye {
        Eye::Right => 36,
        Eye::Left => 42,
    };
    let p: [[f64; 2]; 6] = std::array::from_fn(|i| frame.coords[base + i]);
    aspect_ratio(&p, "ear")
}

/// Mouth aspect ratio over outer-lip landmarks:
/// (|p50-p58| + |p52-p56|) / (2 |p48-p54|), 0-indexed.
pub fn compute_mar(frame: &LandmarkFrame) -> Result<f64> {
    let p: [[f64; 2]; 6] = [
        frame.coords[48],
        frame.coords[50],
        frame.coords[52],
        frame.coords[54],
        frame.coords[56],
        frame.coords[58],
    ];
    aspect_ratio(&p, "mar")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic_frame() -> LandmarkFrame {
        // an arbitrary non-degenerate layout: points on a spiral
        let coords: Vec<[f64; 2]> = (0..LANDMARK_COUNT)
            .map(|i| {
                let a = i as f64 * 0.37;
                [3.0 + a.cos() * (1.0 + 0.02 * i as f64), -1.0 + a.sin() * (1.0 + 0.02 * i as f64)]
            })
            .collect();
        LandmarkFrame::new(coords).unwrap()
    }

    #[test]
    fn facial_graph_is_symmetric_with_self_loops() {
        let g = build_facial_graph();
        assert_eq!(g.node_count, 68);
        for n in 0..68 {
            assert!(g.neighbors(n).contains(&n), "node {n} missing self-loop");
        }
        // symmetry: adjacency derived from undirected edges
        for (i, adj) in g.adjacency.iter().enumerate() {
            for &j in adj {
                assert!(g.adjacency[j].contains(&i));
            }
        }
    }

    #[test]
    fn facial_graph_node0_neighbors_enumerated() {
        let g = build_facial_graph();
        // node 0 is the jaw tip: self-loop plus jaw chain neighbor 1 only
        assert_eq!(g.neighbors(0), &[0, 1]);
    }

    #[test]
    fn facial_graph_every_node_has_degree_at_least_two() {
        let g = build_facial_graph();
        for n in 0..68 {
            assert!(
                g.neighbors(n).len() >= 2,
                "node {n} degree {}",
                g.neighbors(n).len()
            );
        }
    }

    #[test]
    fn facial_graph_is_connected() {
        assert!(build_facial_graph().is_connected());
    }

    #[test]
    fn facial_graph_bridges_present() {
        let g = build_facial_graph();
        for (u, v) in [(21, 27), (22, 27), (30, 33), (36, 17), (45, 26), (48, 3), (54, 13), (62, 66)] {
            assert!(g.neighbors(u).contains(&v), "missing bridge {u}-{v}");
        }
    }

    #[test]
    fn normalize_is_idempotent() {
        let f = synthetic_frame();
        let n1 = normalize_landmarks(&f).unwrap();
        let n2 = normalize_landmarks(&n1).unwrap();
        for (a, b) in n1.coords.iter().zip(&n2.coords) {
            assert!((a[0] - b[0]).abs() < 1e-12);
            assert!((a[1] - b[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_is_translation_invariant() {
        let f = synthetic_frame();
        let mut shifted = f.clone();
        for p in &mut shifted.coords {
            p[0] += 5.0;
            p[1] -= 3.0;
        }
        let a = normalize_landmarks(&f).unwrap();
        let b = normalize_landmarks(&shifted).unwrap();
        for (x, y) in a.coords.iter().zip(&b.coords) {
            assert!((x[0] - y[0]).abs() < 1e-12);
            assert!((x[1] - y[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_is_scale_invariant() {
        let f = synthetic_frame();
        let mut scaled = f.clone();
        for p in &mut scaled.coords {
            p[0] *= 2.0;
            p[1] *= 2.0;
        }
        let a = normalize_landmarks(&f).unwrap();
        let b = normalize_landmarks(&scaled).unwrap();
        for (x, y) in a.coords.iter().zip(&b.coords) {
            assert!((x[0] - y[0]).abs() < 1e-12);
            assert!((x[1] - y[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_rejects_coincident_points() {
        let f = LandmarkFrame::new(vec![[1.0, 1.0]; LANDMARK_COUNT]).unwrap();
        assert!(matches!(
            normalize_landmarks(&f),
            Err(Error::DegenerateGeometry(_))
        ));
    }

    /// Plugs hexagon coordinates into the aspect-ratio definition
    /// independently of `aspect_ratio`.
    fn oracle_ratio(p: &[[f64; 2]; 6]) -> f64 {
        let d = |a: [f64; 2], b: [f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        (d(p[1], p[5]) + d(p[2], p[4])) / (2.0 * d(p[0], p[3]))
    }

    fn put_eye(frame: &mut LandmarkFrame, base: usize, p: &[[f64; 2]; 6]) {
        for (i, q) in p.iter().enumerate() {
            frame.coords[base + i] = *q;
        }
    }

    #[test]
    fn ear_of_regular_hexagon_matches_oracle() {
        // regular hexagon, p1/p4 horizontal: oracle gives sqrt(3)/2
        let hex: [[f64; 2]; 6] = std::array::from_fn(|i| {
            let a = std::f64::consts::PI / 3.0 * i as f64;
            [a.cos(), a.sin()]
        });
        let expected = oracle_ratio(&hex);
        assert!((expected - 3f64.sqrt() / 2.0).abs() < 1e-12);
        let mut f = synthetic_frame();
        put_eye(&mut f, 36, &hex);
        let ear = compute_ear(&f, Eye::Right).unwrap();
        assert!((ear - expected).abs() < 1e-12);
    }

    #[test]
    fn ear_of_unit_tall_hexagon_is_one() {
        // vertical pairs spanning 2h with horizontal span 2 give EAR = h
        let hex: [[f64; 2]; 6] = [
            [-1.0, 0.0],
            [-0.5, 1.0],
            [0.5, 1.0],
            [1.0, 0.0],
            [0.5, -1.0],
            [-0.5, -1.0],
        ];
        assert_eq!(oracle_ratio(&hex), 1.0);
        let mut f = synthetic_frame();
        put_eye(&mut f, 42, &hex);
        assert_eq!(compute_ear(&f, Eye::Left).unwrap(), 1.0);
    }

    #[test]
    fn ear_collinear_points_error() {
        let mut f = synthetic_frame();
        let flat: [[f64; 2]; 6] = std::array::from_fn(|i| [0.0, i as f64]);
        // p1 and p4 coincide horizontally and vertically? make them equal
        let degenerate: [[f64; 2]; 6] = [
            [0.0, 0.0],
            flat[1],
            flat[2],
            [0.0, 0.0],
            flat[4],
            flat[5],
        ];
        put_eye(&mut f, 36, &degenerate);
        assert!(matches!(
            compute_ear(&f, Eye::Right),
            Err(Error::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn ear_scales_linearly_with_vertical_compression() {
        let hex: [[f64; 2]; 6] = [
            [-1.0, 0.0],
            [-0.5, 0.8],
            [0.5, 0.8],
            [1.0, 0.0],
            [0.5, -0.8],
            [-0.5, -0.8],
        ];
        let mut f = synthetic_frame();
        put_eye(&mut f, 36, &hex);
        let base = compute_ear(&f, Eye::Right).unwrap();
        let c = 0.35;
        let squashed: [[f64; 2]; 6] = std::array::from_fn(|i| [hex[i][0], hex[i][1] * c]);
        put_eye(&mut f, 36, &squashed);
        let compressed = compute_ear(&f, Eye::Right).unwrap();
        assert!((compressed - base * c).abs() < 1e-12);
    }

    #[test]
    fn mar_fixed_synthetic_mouth() {
        let mut f = synthetic_frame();
        // mouth points used by the formula: 48, 50, 52, 54, 56, 58
        f.coords[48] = [-2.0, 0.0];
        f.coords[50] = [-0.7, 0.6];
        f.coords[52] = [0.7, 0.6];
        f.coords[54] = [2.0, 0.0];
        f.coords[56] = [0.7, -0.6];
        f.coords[58] = [-0.7, -0.6];
        let oracle = {
            let p: [[f64; 2]; 6] = [
                f.coords[48],
                f.coords[50],
                f.coords[52],
                f.coords[54],
                f.coords[56],
                f.coords[58],
            ];
            oracle_ratio(&p)
        };
        let mar = compute_mar(&f).unwrap();
        assert!((mar - oracle).abs() < 1e-12);
        assert!((mar - 0.3).abs() < 1e-12); // (1.2 + 1.2) / (2*4)
    }

    #[test]
    fn mar_homogeneity_and_degenerate() {
        let mut f = synthetic_frame();
        f.coords[48] = [-1.0, 0.0];
        f.coords[50] = [-0.3, 0.5];
        f.coords[52] = [0.3, 0.5];
        f.coords[54] = [1.0, 0.0];
        f.coords[56] = [0.3, -0.5];
        f.coords[58] = [-0.3, -0.5];
        let base = compute_mar(&f).unwrap();
        for i in [50, 52, 56, 58] {
            f.coords[i][1] *= 0.5;
        }
        assert!((compute_mar(&f).unwrap() - base * 0.5).abs() < 1e-12);
        f.coords[54] = f.coords[48];
        assert!(compute_mar(&f).is_err());
    }

    #[test]
    fn landmark_shot_must_be_nonempty() {
        assert!(LandmarkShot::new("s0".into(), vec![]).is_err());
    }
}
