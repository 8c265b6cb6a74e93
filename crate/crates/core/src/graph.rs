//! Discrete-time dynamic graphs: snapshots over a shared node universe,
//! labels for the two supported tasks, validation, and the `EVG1` text
//! serialization format.
//!
//! Snapshots are undirected and unweighted. Edges are kept as a sorted,
//! deduplicated list of `(u, v)` pairs with `u <= v`; nodes inactive at a
//! timestamp simply have no incident edges. Timestamps are 1-based
//! (`1..=T`) throughout the public API.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::tensor::Mat;
use crate::{Error, Result};

/// Which prediction task a dataset's labels describe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    /// Future link occurrence: positives are edges observed at t.
    Link,
    /// Per-node classification with classes `1..=C`.
    NodeClass,
}

impl TaskKind {
    fn token(self) -> &'static str {
        match self {
            TaskKind::Link => "link",
            TaskKind::NodeClass => "node",
        }
    }

    fn from_token(tok: &str, line: usize) -> Result<Self> {
        match tok {
            "link" => Ok(TaskKind::Link),
            "node" => Ok(TaskKind::NodeClass),
            other => Err(Error::Parse {
                line,
                msg: format!("unknown task kind {other:?} (expected `link` or `node`)"),
            }),
        }
    }
}

/// Positive link `(u, v)` labeled at timestamp `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct LinkLabel {
    pub u: usize,
    pub v: usize,
    pub t: usize,
}

/// Class assignment for node `v` at timestamp `t`; classes are `1..=C`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ClassLabel {
    pub v: usize,
    pub t: usize,
    pub class: usize,
}

/// Task labels attached to a dynamic graph.
#[derive(Debug, Clone, PartialEq)]
pub enum LabelSet {
    Link(Vec<LinkLabel>),
    NodeClass(Vec<ClassLabel>),
}

impl LabelSet {
    pub fn kind(&self) -> TaskKind {
        match self {
            LabelSet::Link(_) => TaskKind::Link,
            LabelSet::NodeClass(_) => TaskKind::NodeClass,
        }
    }

    pub fn is_empty(&self) -> bool {
        match self {
            LabelSet::Link(l) => l.is_empty(),
            LabelSet::NodeClass(l) => l.is_empty(),
        }
    }

    /// Number of distinct classes, from the largest label.
    pub fn num_classes(&self) -> usize {
        match self {
            LabelSet::Link(_) => 0,
            LabelSet::NodeClass(l) => l.iter().map(|c| c.class).max().unwrap_or(0),
        }
    }

    /// Positive links labeled at `t` (link task only).
    pub fn links_at(&self, t: usize) -> Vec<(usize, usize)> {
        match self {
            LabelSet::Link(l) => l
                .iter()
                .filter(|e| e.t == t)
                .map(|e| (e.u, e.v))
                .collect(),
            LabelSet::NodeClass(_) => Vec::new(),
        }
    }

    /// Class labels at `t` (node task only).
    pub fn classes_at(&self, t: usize) -> Vec<(usize, usize)> {
        match self {
            LabelSet::Link(_) => Vec::new(),
            LabelSet::NodeClass(l) => l
                .iter()
                .filter(|c| c.t == t)
                .map(|c| (c.v, c.class))
                .collect(),
        }
    }
}

/// One graph snapshot: edges plus node features at a single timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    timestamp: usize,
    node_count: usize,
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
    features: Mat,
}

impl Snapshot {
    /// Build a snapshot. Edge pairs are canonicalized to `u <= v`, sorted
    /// and deduplicated; everything else is checked by [`DynamicGraph::validate`].
    pub fn new(
        timestamp: usize,
        node_count: usize,
        mut edges: Vec<(usize, usize)>,
        features: Mat,
    ) -> Self {
        for e in &mut edges {
            if e.0 > e.1 {
                *e = (e.1, e.0);
            }
        }
        edges.sort_unstable();
        edges.dedup();
        let mut neighbors = vec![Vec::new(); node_count];
        for &(u, v) in &edges {
            if u < node_count && v < node_count && u != v {
                neighbors[u].push(v);
                neighbors[v].push(u);
            }
        }
        for n in &mut neighbors {
            n.sort_unstable();
        }
        Self {
            timestamp,
            node_count,
            edges,
            neighbors,
            features,
        }
    }

    pub fn timestamp(&self) -> usize {
        self.timestamp
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    /// Canonicalized edge list (`u <= v`, sorted).
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbors[v]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.neighbors[v].len()
    }

    /// Sum of all degrees, i.e. `2 |E|`.
    pub fn volume(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum()
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        let (a, b) = if u <= v { (u, v) } else { (v, u) };
        self.edges.binary_search(&(a, b)).is_ok()
    }

    /// `N x d` feature matrix.
    pub fn features(&self) -> &Mat {
        &self.features
    }
}

/// Ordered snapshot sequence over a fixed node universe, with labels.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicGraph {
    node_count: usize,
    feature_dim: usize,
    snapshots: Vec<Snapshot>,
    labels: Option<LabelSet>,
    kind: TaskKind,
}

impl DynamicGraph {
    pub fn new(
        node_count: usize,
        feature_dim: usize,
        snapshots: Vec<Snapshot>,
        kind: TaskKind,
        labels: Option<LabelSet>,
    ) -> Self {
        Self {
            node_count,
            feature_dim,
            snapshots,
            labels,
            kind,
        }
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Number of snapshots T.
    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    pub fn labels(&self) -> Option<&LabelSet> {
        self.labels.as_ref()
    }

    pub fn snapshots(&self) -> &[Snapshot] {
        &self.snapshots
    }

    /// Snapshot at 1-based timestamp `t`.
    pub fn snapshot(&self, t: usize) -> Result<&Snapshot> {
        if t < 1 || t > self.snapshots.len() {
            return Err(Error::Index(format!(
                "timestamp {t} out of range 1..={}",
                self.snapshots.len()
            )));
        }
        Ok(&self.snapshots[t - 1])
    }

    /// Degree of node `v` at timestamp `t`.
    pub fn degree(&self, v: usize, t: usize) -> Result<usize> {
        let snap = self.snapshot(t)?;
        if v >= self.node_count {
            return Err(Error::Index(format!(
                "node {v} out of range 0..{}",
                self.node_count
            )));
        }
        Ok(snap.degree(v))
    }

    /// Sum of all degrees at timestamp `t`.
    pub fn volume(&self, t: usize) -> Result<usize> {
        Ok(self.snapshot(t)?.volume())
    }

    /// Copy restricted to the first `t` snapshots. Labels beyond the kept
    /// range (past `t + 1`, the one-step-ahead slot the validator allows)
    /// are dropped so the prefix is itself a valid graph.
    pub fn prefix(&self, t: usize) -> Self {
        let cut = t.min(self.snapshots.len());
        let labels = self.labels.clone().map(|l| match l {
            LabelSet::Link(links) => {
                LabelSet::Link(links.into_iter().filter(|l| l.t <= cut + 1).collect())
            }
            LabelSet::NodeClass(classes) => {
                LabelSet::NodeClass(classes.into_iter().filter(|c| c.t <= cut + 1).collect())
            }
        });
        Self {
            node_count: self.node_count,
            feature_dim: self.feature_dim,
            snapshots: self.snapshots[..cut].to_vec(),
            labels,
            kind: self.kind,
        }
    }

    /// Structural checks. Returns one message per broken invariant; an
    /// empty list means the graph is well-formed.
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (i, snap) in self.snapshots.iter().enumerate() {
            let t = i + 1;
            if snap.timestamp != t {
                v.push(format!(
                    "snapshot {i}: timestamp {} is not consecutive (expected {t})",
                    snap.timestamp
                ));
            }
            if snap.node_count != self.node_count {
                v.push(format!(
                    "t={t}: node count {} differs from graph universe {}",
                    snap.node_count, self.node_count
                ));
            }
            for &(a, b) in &snap.edges {
                if a == b {
                    v.push(format!("t={t}: self-loop at node {a}"));
                }
                if a >= self.node_count || b >= self.node_count {
                    v.push(format!("t={t}: edge ({a}, {b}) references a missing node"));
                }
            }
            if snap.features.nrows() != self.node_count {
                v.push(format!(
                    "t={t}: feature matrix has {} rows, expected {}",
                    snap.features.nrows(),
                    self.node_count
                ));
            }
            if snap.features.ncols() != self.feature_dim {
                v.push(format!(
                    "t={t}: feature matrix has {} columns, expected {}",
                    snap.features.ncols(),
                    self.feature_dim
                ));
            }
            if snap.features.iter().any(|x| !x.is_finite()) {
                v.push(format!("t={t}: non-finite feature entry"));
            }
        }
        if let Some(labels) = &self.labels {
            if labels.kind() != self.kind {
                v.push("label kind differs from declared task kind".to_string());
            }
            let t_max = self.snapshots.len() + 1;
            match labels {
                LabelSet::Link(links) => {
                    for l in links {
                        if l.u >= self.node_count || l.v >= self.node_count {
                            v.push(format!(
                                "link label ({}, {}, t={}) references a missing node",
                                l.u, l.v, l.t
                            ));
                        }
                        if l.t < 1 || l.t > t_max {
                            v.push(format!(
                                "link label ({}, {}, t={}) outside 1..={t_max}",
                                l.u, l.v, l.t
                            ));
                        }
                    }
                }
                LabelSet::NodeClass(classes) => {
                    let c_max = labels.num_classes();
                    for c in classes {
                        if c.v >= self.node_count {
                            v.push(format!(
                                "class label (v={}, t={}) references a missing node",
                                c.v, c.t
                            ));
                        }
                        if c.t < 1 || c.t > t_max {
                            v.push(format!("class label (v={}, t={}) outside 1..={t_max}", c.v, c.t));
                        }
                        if c.class < 1 || c.class > c_max {
                            v.push(format!(
                                "class label (v={}, t={}) class {} outside 1..={c_max}",
                                c.v, c.t, c.class
                            ));
                        }
                    }
                }
            }
        }
        v
    }

    /// Validate and convert the first violation into an error.
    pub fn ensure_valid(&self) -> Result<()> {
        let violations = self.validate();
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::Contract(format!(
                "invalid dynamic graph: {}",
                violations.join("; ")
            )))
        }
    }

    /// Serialize in the `EVG1` text format (deterministic ordering,
    /// shortest-round-trip float formatting — repeated writes are
    /// byte-identical).
    pub fn to_evg1(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "EVG1 {} {} {} {}",
            self.node_count,
            self.snapshots.len(),
            self.feature_dim,
            self.kind.token()
        );
        for snap in &self.snapshots {
            let _ = writeln!(out, "#t {}", snap.timestamp);
            for &(u, v) in &snap.edges {
                let _ = writeln!(out, "E {u} {v}");
            }
            for v in 0..snap.features.nrows() {
                let _ = write!(out, "X {v}");
                for x in snap.features.row(v) {
                    let _ = write!(out, " {x:?}");
                }
                out.push('\n');
            }
        }
        if let Some(labels) = &self.labels {
            let _ = writeln!(out, "#labels");
            match labels {
                LabelSet::Link(links) => {
                    let mut links = links.clone();
                    links.sort_unstable();
                    links.dedup();
                    for l in links {
                        let _ = writeln!(out, "L {} {} {}", l.u, l.v, l.t);
                    }
                }
                LabelSet::NodeClass(classes) => {
                    let mut classes = classes.clone();
                    classes.sort_unstable();
                    classes.dedup();
                    for c in classes {
                        let _ = writeln!(out, "Y {} {} {}", c.v, c.t, c.class);
                    }
                }
            }
        }
        out
    }

    pub fn write_evg1<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(self.to_evg1().as_bytes())?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_evg1(std::io::BufWriter::new(file))
    }

    /// Parse the `EVG1` text format.
    pub fn read_evg1<R: Read>(r: R) -> Result<Self> {
        let reader = BufReader::new(r);
        let mut lines = reader.lines().enumerate();

        let (lno, header) = match lines.next() {
            Some((i, l)) => (i + 1, l?),
            None => {
                return Err(Error::Parse {
                    line: 1,
                    msg: "empty file, expected EVG1 header".to_string(),
                })
            }
        };
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 5 || fields[0] != "EVG1" {
            return Err(Error::Parse {
                line: lno,
                msg: "header must be `EVG1 N T d kind`".to_string(),
            });
        }
        let n: usize = parse_field(fields[1], lno, "N")?;
        let t_count: usize = parse_field(fields[2], lno, "T")?;
        let d: usize = parse_field(fields[3], lno, "d")?;
        let kind = TaskKind::from_token(fields[4], lno)?;

        struct Pending {
            timestamp: usize,
            edges: Vec<(usize, usize)>,
            features: Mat,
        }
        let mut snaps: Vec<Pending> = Vec::with_capacity(t_count);
        let mut links = Vec::new();
        let mut classes = Vec::new();
        let mut in_labels = false;

        for (i, line) in lines {
            let lno = i + 1;
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if line == "#labels" {
                in_labels = true;
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields[0] {
                "#t" => {
                    if fields.len() != 2 {
                        return Err(Error::Parse {
                            line: lno,
                            msg: "snapshot marker must be `#t <t>`".to_string(),
                        });
                    }
                    let ts: usize = parse_field(fields[1], lno, "t")?;
                    snaps.push(Pending {
                        timestamp: ts,
                        edges: Vec::new(),
                        features: Mat::zeros((n, d)),
                    });
                }
                "E" => {
                    let snap = snaps.last_mut().ok_or_else(|| Error::Parse {
                        line: lno,
                        msg: "edge line before any `#t` marker".to_string(),
                    })?;
                    if fields.len() != 3 {
                        return Err(Error::Parse {
                            line: lno,
                            msg: "edge line must be `E u v`".to_string(),
                        });
                    }
                    let u: usize = parse_field(fields[1], lno, "u")?;
                    let v: usize = parse_field(fields[2], lno, "v")?;
                    snap.edges.push((u, v));
                }
                "X" => {
                    let snap = snaps.last_mut().ok_or_else(|| Error::Parse {
                        line: lno,
                        msg: "feature line before any `#t` marker".to_string(),
                    })?;
                    if fields.len() != d + 2 {
                        return Err(Error::Parse {
                            line: lno,
                            msg: format!(
                                "feature line must be `X v` followed by {d} values, got {}",
                                fields.len().saturating_sub(2)
                            ),
                        });
                    }
                    let v: usize = parse_field(fields[1], lno, "v")?;
                    if v >= n {
                        return Err(Error::Parse {
                            line: lno,
                            msg: format!("feature row for node {v} outside universe of {n}"),
                        });
                    }
                    for (j, tok) in fields[2..].iter().enumerate() {
                        snap.features[(v, j)] = parse_field(tok, lno, "feature value")?;
                    }
                }
                "L" if in_labels => {
                    if fields.len() != 4 {
                        return Err(Error::Parse {
                            line: lno,
                            msg: "link label must be `L u v t`".to_string(),
                        });
                    }
                    links.push(LinkLabel {
                        u: parse_field(fields[1], lno, "u")?,
                        v: parse_field(fields[2], lno, "v")?,
                        t: parse_field(fields[3], lno, "t")?,
                    });
                }
                "Y" if in_labels => {
                    if fields.len() != 4 {
                        return Err(Error::Parse {
                            line: lno,
                            msg: "class label must be `Y v t c`".to_string(),
                        });
                    }
                    classes.push(ClassLabel {
                        v: parse_field(fields[1], lno, "v")?,
                        t: parse_field(fields[2], lno, "t")?,
                        class: parse_field(fields[3], lno, "c")?,
                    });
                }
                other => {
                    return Err(Error::Parse {
                        line: lno,
                        msg: format!("unrecognized line tag {other:?}"),
                    });
                }
            }
        }

        if snaps.len() != t_count {
            return Err(Error::Parse {
                line: 1,
                msg: format!("header declares T={t_count} but found {} snapshots", snaps.len()),
            });
        }
        let snapshots = snaps
            .into_iter()
            .map(|p| Snapshot::new(p.timestamp, n, p.edges, p.features))
            .collect();
        let labels = match kind {
            TaskKind::Link if !links.is_empty() => Some(LabelSet::Link(links)),
            TaskKind::NodeClass if !classes.is_empty() => Some(LabelSet::NodeClass(classes)),
            _ => None,
        };
        Ok(Self::new(n, d, snapshots, kind, labels))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_evg1(file)
    }
}

fn parse_field<T: std::str::FromStr>(tok: &str, line: usize, what: &str) -> Result<T> {
    tok.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("invalid {what}: {tok:?}"),
    })
}

/// Contiguous, disjoint timestamp ranges for train/validation/test.
///
/// Ranges are inclusive and 1-based, mirroring snapshot timestamps. For
/// link prediction a timestamp t in a range means "predict the labels
/// attached at t from history up to t".
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TemporalSplit {
    pub train: (usize, usize),
    pub val: (usize, usize),
    pub test: (usize, usize),
}

impl TemporalSplit {
    /// Checks ordering and disjointness.
    pub fn validate(&self) -> Result<()> {
        let ranges = [self.train, self.val, self.test];
        for (lo, hi) in ranges {
            if lo < 1 || lo > hi {
                return Err(Error::Config(format!("malformed split range ({lo}, {hi})")));
            }
        }
        if self.train.1 >= self.val.0 || self.val.1 >= self.test.0 {
            return Err(Error::Config(format!(
                "split ranges must be ordered and disjoint: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn train_timestamps(&self) -> impl Iterator<Item = usize> {
        self.train.0..=self.train.1
    }

    pub fn val_timestamps(&self) -> impl Iterator<Item = usize> {
        self.val.0..=self.val.1
    }

    pub fn test_timestamps(&self) -> impl Iterator<Item = usize> {
        self.test.0..=self.test.1
    }
}
