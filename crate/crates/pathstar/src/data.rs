//! Path-star graphs and their serialized form. A graph is one star: a
//! center node with `d` disjoint arms of `l - 1` nodes each, labels drawn
//! without replacement from a fixed pool, edges oriented away from the
//! center and presented in shuffled order. The task pairs the shuffled edge
//! list and a (start, goal) query with the unique center-to-goal path.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{stream, Domain};

pub const DEDUP_MAX_RETRIES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    /// Arm count (degree of the center).
    pub d: usize,
    /// Path length in nodes, center included; each arm has `l - 1` nodes.
    pub l: usize,
    /// Label pool size; node labels are drawn from `0..n_labels`.
    pub n_labels: usize,
}

impl Topology {
    pub fn new(d: usize, l: usize, n_labels: usize) -> Result<Self> {
        let t = Topology { d, l, n_labels };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(Error::BadTopology {
                reason: format!("need at least 2 arms, got {}", self.d),
            });
        }
        if self.l < 2 {
            return Err(Error::BadTopology {
                reason: format!("paths need at least 2 nodes, got l={}", self.l),
            });
        }
        let needed = self.n_nodes();
        if self.n_labels < needed {
            return Err(Error::LabelPoolTooSmall {
                d: self.d,
                l: self.l,
                needed,
                n_labels: self.n_labels,
            });
        }
        // labels must leave room for the four marker tokens in a u16 vocab
        if self.n_labels > (u16::MAX as usize) - 3 {
            return Err(Error::BadTopology {
                reason: format!("label pool {} overflows the token range", self.n_labels),
            });
        }
        Ok(())
    }

    /// Distinct nodes per graph: the center plus `d` arms of `l - 1`.
    pub fn n_nodes(&self) -> usize {
        self.d * (self.l - 1) + 1
    }

    /// Edges per graph; every node except the center has exactly one parent.
    pub fn n_edges(&self) -> usize {
        self.d * (self.l - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathStarGraph {
    pub topology: Topology,
    pub center: u16,
    /// Arms ordered by the first appearance of their center edge in `edges`,
    /// each listing its nodes outward from the center.
    pub arms: Vec<Vec<u16>>,
    pub goal_arm: usize,
    /// Shuffled edge list, every edge pointing away from the center.
    pub edges: Vec<(u16, u16)>,
}

impl PathStarGraph {
    /// The goal node: the far end of the goal arm.
    pub fn goal(&self) -> u16 {
        *self.arms[self.goal_arm].last().unwrap()
    }

    /// The unique center-to-goal path, `l` nodes starting at the center.
    pub fn oracle_path(&self) -> Vec<u16> {
        let mut path = Vec::with_capacity(self.topology.l);
        path.push(self.center);
        path.extend_from_slice(&self.arms[self.goal_arm]);
        path
    }

    /// Which arm starts with `first_hop`, if any.
    pub fn arm_of(&self, first_hop: u16) -> Option<usize> {
        self.arms.iter().position(|arm| arm[0] == first_hop)
    }

    /// The full path down the arm that starts with `first_hop`.
    pub fn path_from(&self, first_hop: u16) -> Option<Vec<u16>> {
        let arm = self.arm_of(first_hop)?;
        let mut path = Vec::with_capacity(self.topology.l);
        path.push(self.center);
        path.extend_from_slice(&self.arms[arm]);
        Some(path)
    }
}

/// Draws one graph from the given rng: distinct labels via a partial
/// Fisher-Yates over the pool, a uniform goal arm, and a full shuffle of the
/// outward edge list. Arm order is then normalized to match the shuffled
/// edge list so that serialization round-trips exactly.
pub fn sample_graph<R: Rng>(topology: &Topology, rng: &mut R) -> PathStarGraph {
    let needed = topology.n_nodes();
    let mut pool: Vec<u16> = (0..topology.n_labels as u16).collect();
    for i in 0..needed {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
    }
    let center = pool[0];
    let arm_len = topology.l - 1;
    let mut arms: Vec<Vec<u16>> = (0..topology.d)
        .map(|a| pool[1 + a * arm_len..1 + (a + 1) * arm_len].to_vec())
        .collect();
    let mut goal_arm = rng.gen_range(0..topology.d);

    let mut edges = Vec::with_capacity(topology.n_edges());
    for arm in &arms {
        edges.push((center, arm[0]));
        for w in arm.windows(2) {
            edges.push((w[0], w[1]));
        }
    }
    edges.shuffle(rng);

    // reorder arms by when their center edge shows up in the shuffled list
    let mut order = Vec::with_capacity(topology.d);
    for &(v, v2) in &edges {
        if v == center {
            order.push(arms.iter().position(|a| a[0] == v2).unwrap());
        }
    }
    debug_assert_eq!(order.len(), topology.d);
    let arms_in_order: Vec<Vec<u16>> = order.iter().map(|&i| std::mem::take(&mut arms[i])).collect();
    goal_arm = order.iter().position(|&i| i == goal_arm).unwrap();

    PathStarGraph {
        topology: *topology,
        center,
        arms: arms_in_order,
        goal_arm,
        edges,
    }
}

// ── text form ───────────────────────────────────────────────────────────

/// One graph per line: each edge as `|v v'`, then `/ start goal =`, then the
/// path. Example for a two-arm star of two-node paths:
/// `|7 3|7 9/ 7 9 = 7 9`.
pub fn serialize_line(g: &PathStarGraph) -> String {
    let mut s = String::with_capacity(g.edges.len() * 8 + g.topology.l * 4 + 12);
    for &(v, v2) in &g.edges {
        let _ = write!(s, "|{v} {v2}");
    }
    let _ = write!(s, "/ {} {} =", g.center, g.goal());
    for &n in &g.oracle_path() {
        let _ = write!(s, " {n}");
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tok {
    Bar,
    Slash,
    Eq,
    Num(u16),
}

fn lex_line(line: &str) -> Result<Vec<Tok>> {
    let mut toks = Vec::new();
    let bytes = line.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b' ' | b'\t' => i += 1,
            b'|' => {
                toks.push(Tok::Bar);
                i += 1;
            }
            b'/' => {
                toks.push(Tok::Slash);
                i += 1;
            }
            b'=' => {
                toks.push(Tok::Eq);
                i += 1;
            }
            b'0'..=b'9' => {
                let start = i;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
                let num: u16 = line[start..i].parse().map_err(|_| {
                    Error::MalformedSequence(format!(
                        "label '{}' out of the token range",
                        &line[start..i]
                    ))
                })?;
                toks.push(Tok::Num(num));
            }
            c => {
                return Err(Error::MalformedSequence(format!(
                    "unexpected character '{}'",
                    c as char
                )))
            }
        }
    }
    Ok(toks)
}

/// Parses and fully validates one serialized graph: edge structure, label
/// range, arm shape, query consistency, and the path against the edges.
pub fn parse_line(line: &str, topology: &Topology) -> Result<PathStarGraph> {
    let toks = lex_line(line)?;
    let mut i = 0;

    let mut edges = Vec::new();
    while i < toks.len() && toks[i] == Tok::Bar {
        match (toks.get(i + 1), toks.get(i + 2)) {
            (Some(&Tok::Num(v)), Some(&Tok::Num(v2))) => edges.push((v, v2)),
            _ => {
                return Err(Error::MalformedSequence(
                    "edge needs two labels after '|'".into(),
                ))
            }
        }
        i += 3;
    }
    if edges.len() != topology.n_edges() {
        return Err(Error::MalformedSequence(format!(
            "expected {} edges, found {}",
            topology.n_edges(),
            edges.len()
        )));
    }

    if toks.get(i) != Some(&Tok::Slash) {
        return Err(Error::MalformedSequence("missing '/' query marker".into()));
    }
    let (start, goal) = match (toks.get(i + 1), toks.get(i + 2)) {
        (Some(&Tok::Num(s)), Some(&Tok::Num(g))) => (s, g),
        _ => {
            return Err(Error::MalformedSequence(
                "query needs start and goal labels".into(),
            ))
        }
    };
    i += 3;
    if toks.get(i) != Some(&Tok::Eq) {
        return Err(Error::MalformedSequence("missing '=' before the path".into()));
    }
    i += 1;

    let mut path = Vec::new();
    for t in &toks[i..] {
        match *t {
            Tok::Num(n) => path.push(n),
            _ => return Err(Error::MalformedSequence("marker inside the path".into())),
        }
    }

    assemble_graph(topology, edges, start, goal, &path)
}

/// Validates raw parts (from text or token ids) and rebuilds the star:
/// every node has at most one outgoing edge except the center with its `d`,
/// arms come out in first-center-edge order, and the stated path must match
/// the unique center-to-goal walk.
pub(crate) fn assemble_graph(
    topology: &Topology,
    edges: Vec<(u16, u16)>,
    start: u16,
    goal: u16,
    path: &[u16],
) -> Result<PathStarGraph> {
    if edges.len() != topology.n_edges() {
        return Err(Error::MalformedSequence(format!(
            "expected {} edges, found {}",
            topology.n_edges(),
            edges.len()
        )));
    }
    if path.len() != topology.l {
        return Err(Error::MalformedSequence(format!(
            "expected a {}-node path, found {}",
            topology.l,
            path.len()
        )));
    }

    for &(v, v2) in &edges {
        for lbl in [v, v2] {
            if lbl as usize >= topology.n_labels {
                return Err(Error::LabelOutOfRange {
                    label: lbl,
                    n_labels: topology.n_labels,
                });
            }
        }
    }

    let mut out: HashMap<u16, Vec<u16>> = HashMap::new();
    let mut seen_target: HashMap<u16, ()> = HashMap::new();
    for &(v, v2) in &edges {
        out.entry(v).or_default().push(v2);
        if seen_target.insert(v2, ()).is_some() {
            return Err(Error::BrokenPath { node: v2 });
        }
    }
    if seen_target.contains_key(&start) {
        return Err(Error::BrokenPath { node: start });
    }
    let center = start;
    let n_first_hops = out.get(&center).map_or(0, |v| v.len());
    if n_first_hops != topology.d {
        return Err(Error::MalformedSequence(format!(
            "start node has {n_first_hops} outgoing edges, expected {}",
            topology.d
        )));
    }

    // arms in first-center-edge order, walking each chain outward
    let mut arms = Vec::with_capacity(topology.d);
    for &(v, v2) in &edges {
        if v != center {
            continue;
        }
        let mut arm = vec![v2];
        let mut cur = v2;
        while let Some(next) = out.get(&cur) {
            if next.len() != 1 {
                return Err(Error::BrokenPath { node: cur });
            }
            cur = next[0];
            arm.push(cur);
            if arm.len() > topology.l - 1 {
                return Err(Error::MalformedSequence(format!(
                    "arm from node {v2} exceeds {} nodes",
                    topology.l - 1
                )));
            }
        }
        if arm.len() != topology.l - 1 {
            return Err(Error::MalformedSequence(format!(
                "arm from node {v2} has {} nodes, expected {}",
                arm.len(),
                topology.l - 1
            )));
        }
        arms.push(arm);
    }

    let goal_arm = arms
        .iter()
        .position(|a| *a.last().unwrap() == goal)
        .ok_or(Error::BrokenPath { node: goal })?;

    let g = PathStarGraph {
        topology: *topology,
        center,
        arms,
        goal_arm,
        edges,
    };
    if g.oracle_path() != path {
        return Err(Error::MalformedSequence(
            "path does not match the edges and query".into(),
        ));
    }
    Ok(g)
}

// ── datasets ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub topology: Topology,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl DatasetSpec {
    /// Short stable identifier binding checkpoints and metrics to the data
    /// they were produced from.
    pub fn fingerprint(&self) -> String {
        let tag = format!(
            "pathstar-dataset-v1 d={} l={} n_labels={} n_train={} n_test={} seed={}",
            self.topology.d,
            self.topology.l,
            self.topology.n_labels,
            self.n_train,
            self.n_test,
            self.seed
        );
        let digest = Sha256::digest(tag.as_bytes());
        let mut hex = String::with_capacity(16);
        for b in &digest[..8] {
            let _ = write!(hex, "{b:02x}");
        }
        hex
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Vec<PathStarGraph>,
    pub test: Vec<PathStarGraph>,
}

/// Samples train and test sets with no duplicate graph anywhere in the
/// union. Sample `i` draws from its own rng stream; on a collision it keeps
/// drawing from that stream, giving up after `DEDUP_MAX_RETRIES` redraws.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.topology.validate()?;
    let total = spec.n_train + spec.n_test;
    let mut seen: HashMap<String, ()> = HashMap::with_capacity(total);
    let mut graphs = Vec::with_capacity(total);
    for i in 0..total {
        let mut rng = stream(spec.seed, Domain::Instance, i as u64);
        let mut retries = 0;
        loop {
            let g = sample_graph(&spec.topology, &mut rng);
            let line = serialize_line(&g);
            if seen.insert(line, ()).is_none() {
                graphs.push(g);
                break;
            }
            retries += 1;
            if retries > DEDUP_MAX_RETRIES {
                return Err(Error::DedupSaturated {
                    index: i,
                    retries: DEDUP_MAX_RETRIES,
                });
            }
        }
    }
    let test = graphs.split_off(spec.n_train);
    Ok(Dataset {
        spec: *spec,
        train: graphs,
        test,
    })
}

pub fn write_lines(path: &Path, graphs: &[PathStarGraph]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for g in graphs {
        writeln!(f, "{}", serialize_line(g))?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_lines(path: &Path, topology: &Topology) -> Result<Vec<PathStarGraph>> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut graphs = Vec::new();
    for (idx, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let g = parse_line(&line, topology).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: idx + 1,
            reason: e.to_string(),
        })?;
        graphs.push(g);
    }
    Ok(graphs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Domain};

    fn tiny_graph() -> PathStarGraph {
        PathStarGraph {
            topology: Topology { d: 2, l: 2, n_labels: 10 },
            center: 7,
            arms: vec![vec![3], vec![9]],
            goal_arm: 1,
            edges: vec![(7, 3), (7, 9)],
        }
    }

    #[test]
    fn serialize_tiny_fixture_exactly() {
        assert_eq!(serialize_line(&tiny_graph()), "|7 3|7 9/ 7 9 = 7 9");
    }

    #[test]
    fn parse_inverts_serialize_on_fixture() {
        let topo = Topology { d: 2, l: 2, n_labels: 10 };
        let g = parse_line("|7 3|7 9/ 7 9 = 7 9", &topo).unwrap();
        assert_eq!(g, tiny_graph());
    }

    #[test]
    fn parse_accepts_extra_whitespace() {
        let topo = Topology { d: 2, l: 2, n_labels: 10 };
        let g = parse_line(" | 7 3 | 7 9 /  7 9 =  7 9 ", &topo).unwrap();
        assert_eq!(g, tiny_graph());
    }

    #[test]
    fn roundtrip_on_sampled_graphs() {
        let topo = Topology { d: 5, l: 5, n_labels: 100 };
        for i in 0..50 {
            let mut rng = stream(11, Domain::Instance, i);
            let g = sample_graph(&topo, &mut rng);
            let back = parse_line(&serialize_line(&g), &topo).unwrap();
            assert_eq!(back, g, "sample {i}");
        }
    }

    #[test]
    fn sampled_graphs_have_distinct_in_range_labels() {
        let topo = Topology { d: 3, l: 4, n_labels: 20 };
        for i in 0..30 {
            let mut rng = stream(5, Domain::Instance, i);
            let g = sample_graph(&topo, &mut rng);
            let mut all = vec![g.center];
            for arm in &g.arms {
                assert_eq!(arm.len(), topo.l - 1);
                all.extend_from_slice(arm);
            }
            assert_eq!(all.len(), topo.n_nodes());
            for &lbl in &all {
                assert!((lbl as usize) < topo.n_labels);
            }
            all.sort_unstable();
            all.dedup();
            assert_eq!(all.len(), topo.n_nodes(), "labels repeat in sample {i}");
        }
    }

    #[test]
    fn oracle_path_runs_center_to_goal() {
        let topo = Topology { d: 4, l: 3, n_labels: 30 };
        let mut rng = stream(2, Domain::Instance, 0);
        let g = sample_graph(&topo, &mut rng);
        let p = g.oracle_path();
        assert_eq!(p.len(), 3);
        assert_eq!(p[0], g.center);
        assert_eq!(*p.last().unwrap(), g.goal());
    }

    #[test]
    fn arm_order_matches_edge_appearance() {
        let topo = Topology { d: 4, l: 4, n_labels: 40 };
        for i in 0..20 {
            let mut rng = stream(9, Domain::Instance, i);
            let g = sample_graph(&topo, &mut rng);
            let first_hops: Vec<u16> = g
                .edges
                .iter()
                .filter(|&&(v, _)| v == g.center)
                .map(|&(_, v2)| v2)
                .collect();
            let arm_heads: Vec<u16> = g.arms.iter().map(|a| a[0]).collect();
            assert_eq!(first_hops, arm_heads);
        }
    }

    #[test]
    fn same_stream_same_graph() {
        let topo = Topology { d: 2, l: 5, n_labels: 50 };
        let g1 = sample_graph(&topo, &mut stream(42, Domain::Instance, 7));
        let g2 = sample_graph(&topo, &mut stream(42, Domain::Instance, 7));
        assert_eq!(g1, g2);
        let g3 = sample_graph(&topo, &mut stream(42, Domain::Instance, 8));
        assert_ne!(g1, g3);
    }

    #[test]
    fn generate_dedups_across_the_split() {
        let spec = DatasetSpec {
            topology: Topology { d: 2, l: 2, n_labels: 4 },
            n_train: 10,
            n_test: 5,
            seed: 3,
        };
        let ds = generate(&spec).unwrap();
        assert_eq!(ds.train.len(), 10);
        assert_eq!(ds.test.len(), 5);
        let mut lines: Vec<String> = ds
            .train
            .iter()
            .chain(&ds.test)
            .map(serialize_line)
            .collect();
        lines.sort();
        let before = lines.len();
        lines.dedup();
        assert_eq!(lines.len(), before, "duplicate graph crossed the split");
    }

    #[test]
    fn generate_fails_honestly_when_the_space_is_exhausted() {
        // d=2, l=2, n_labels=3 admits exactly 12 distinct serialized graphs
        let spec = DatasetSpec {
            topology: Topology { d: 2, l: 2, n_labels: 3 },
            n_train: 13,
            n_test: 0,
            seed: 0,
        };
        let err = generate(&spec).unwrap_err();
        assert!(matches!(err, Error::DedupSaturated { .. }), "got {err:?}");
    }

    #[test]
    fn pool_smaller_than_graph_is_rejected() {
        let err = Topology::new(2, 3, 4).unwrap_err();
        assert!(matches!(
            err,
            Error::LabelPoolTooSmall { d: 2, l: 3, needed: 5, n_labels: 4 }
        ));
    }

    #[test]
    fn parse_rejects_wrong_edge_count() {
        let topo = Topology { d: 2, l: 2, n_labels: 10 };
        let err = parse_line("|7 3/ 7 3 = 7 3", &topo).unwrap_err();
        assert!(err.to_string().contains("expected 2 edges"));
    }

    #[test]
    fn parse_rejects_path_disagreeing_with_edges() {
        let topo = Topology { d: 2, l: 2, n_labels: 10 };
        let err = parse_line("|7 3|7 9/ 7 9 = 7 3", &topo).unwrap_err();
        assert!(matches!(err, Error::MalformedSequence(_)));
    }

    #[test]
    fn parse_rejects_node_with_two_parents() {
        let topo = Topology { d: 2, l: 3, n_labels: 10 };
        // 4 edges, but node 5 has two incoming edges
        let err = parse_line("|7 3|7 9|3 5|9 5/ 7 5 = 7 9 5", &topo).unwrap_err();
        assert!(matches!(err, Error::BrokenPath { node: 5 }));
    }

    #[test]
    fn parse_rejects_out_of_range_label() {
        let topo = Topology { d: 2, l: 2, n_labels: 8 };
        let err = parse_line("|7 3|7 9/ 7 9 = 7 9", &topo).unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange { label: 9, n_labels: 8 }));
    }

    #[test]
    fn fingerprint_tracks_every_field() {
        let base = DatasetSpec {
            topology: Topology { d: 2, l: 5, n_labels: 50 },
            n_train: 100,
            n_test: 10,
            seed: 1,
        };
        let fp = base.fingerprint();
        assert_eq!(fp.len(), 16);
        let mut other = base;
        other.seed = 2;
        assert_ne!(fp, other.fingerprint());
        let mut other = base;
        other.topology.l = 4;
        assert_ne!(fp, other.fingerprint());
    }

    #[test]
    fn file_roundtrip_preserves_graphs() {
        let spec = DatasetSpec {
            topology: Topology { d: 2, l: 5, n_labels: 50 },
            n_train: 8,
            n_test: 0,
            seed: 77,
        };
        let ds = generate(&spec).unwrap();
        let dir = std::env::temp_dir().join("pathstar-data-roundtrip");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("train.txt");
        write_lines(&path, &ds.train).unwrap();
        let back = read_lines(&path, &spec.topology).unwrap();
        assert_eq!(back, ds.train);
    }

    #[test]
    fn read_reports_path_and_line_number() {
        let dir = std::env::temp_dir().join("pathstar-data-badline");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.txt");
        std::fs::write(&path, "|7 3|7 9/ 7 9 = 7 9\n|broken\n").unwrap();
        let topo = Topology { d: 2, l: 2, n_labels: 10 };
        let err = read_lines(&path, &topo).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bad.txt:2:"), "got: {msg}");
    }
}
