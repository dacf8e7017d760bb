//! Directed silo graphs and their text format.
//!
//! ```text
//! # comment
//! silos 3
//! strict        # optional: keep edges exactly as listed
//! 0 1
//! 1 2
//! ```
//! Without `strict` the symmetric closure of the listed edges is used.

use std::collections::BTreeSet;
use std::path::Path;

use super::{FedError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    pub name: String,
    pub n_silos: usize,
    /// Directed `(src, dst)` pairs; `dst` reads from `src` when averaging.
    pub edges: BTreeSet<(usize, usize)>,
    pub strict: bool,
}

impl Topology {
    pub fn new(
        name: impl Into<String>,
        n_silos: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let t = Self { name: name.into(), n_silos, edges: edges.into_iter().collect(), strict: true };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_silos == 0 {
            return Err(FedError::Topology("silo count must be positive".into()));
        }
        for &(s, d) in &self.edges {
            if s == d {
                return Err(FedError::Topology(format!("self-loop on silo {s}")));
            }
            if s >= self.n_silos || d >= self.n_silos {
                return Err(FedError::Topology(format!("edge {s} -> {d} out of range for {} silos", self.n_silos)));
            }
        }
        Ok(())
    }

    pub fn ring(n: usize) -> Result<Self> {
        Self::new(format!("ring-{n}"), n, (0..n).filter(|_| n > 1).map(|i| (i, (i + 1) % n)))
    }

    pub fn path(n: usize) -> Result<Self> {
        Self::new(format!("path-{n}"), n, (1..n).flat_map(|i| [(i - 1, i), (i, i - 1)]))
    }

    pub fn complete(n: usize) -> Result<Self> {
        Self::new(format!("complete-{n}"), n, (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))))
    }

    /// Hub `0` linked both ways to every other silo.
    pub fn star(n: usize) -> Result<Self> {
        Self::new(format!("star-{n}"), n, (1..n).flat_map(|i| [(0, i), (i, 0)]))
    }

    pub fn in_neighbors(&self, i: usize) -> Vec<usize> {
        self.edges.iter().filter(|&&(_, d)| d == i).map(|&(s, _)| s).collect()
    }

    pub fn in_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n_silos];
        for &(_, d) in &self.edges {
            deg[d] += 1;
        }
        deg
    }

    pub fn is_symmetric(&self) -> bool {
        self.edges.iter().all(|&(s, d)| self.edges.contains(&(d, s)))
    }

    pub fn symmetrized(&self) -> Self {
        let edges = self.edges.iter().flat_map(|&(s, d)| [(s, d), (d, s)]).collect();
        Self { name: self.name.clone(), n_silos: self.n_silos, edges, strict: self.strict }
    }

    fn reaches_all(&self, forward: bool) -> bool {
        let mut seen = vec![false; self.n_silos];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for &(s, d) in &self.edges {
                let (from, to) = if forward { (s, d) } else { (d, s) };
                if from == v && !seen[to] {
                    seen[to] = true;
                    stack.push(to);
                }
            }
        }
        seen.into_iter().all(|x| x)
    }

    pub fn is_strongly_connected(&self) -> bool {
        self.reaches_all(true) && self.reaches_all(false)
    }

    /// The file form; parsing it gives back an equal topology.
    pub fn to_text(&self) -> String {
        let mut out = format!("silos {}\n", self.n_silos);
        if self.strict {
            out.push_str("strict\n");
        }
        for (s, d) in &self.edges {
            out.push_str(&format!("{s} {d}\n"));
        }
        out
    }

    /// `(in-degree, silo count)` pairs in ascending degree order.
    pub fn in_degree_histogram(&self) -> Vec<(usize, usize)> {
        let mut hist = std::collections::BTreeMap::new();
        for d in self.in_degrees() {
            *hist.entry(d).or_insert(0) += 1;
        }
        hist.into_iter().collect()
    }
}

pub fn parse_topology(text: &str, name: &str) -> Result<Topology> {
    let mut n_silos = None;
    let mut strict = false;
    let mut edges = BTreeSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| FedError::Parse { line: idx + 1, msg };
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            ["silos", n] => {
                if n_silos.is_some() {
                    return Err(err("duplicate silos header".into()));
                }
                n_silos = Some(n.parse::<usize>().map_err(|e| err(format!("silo count: {e}")))?);
            }
            ["strict"] => strict = true,
            [s, d] => {
                if n_silos.is_none() {
                    return Err(err("edge before `silos N` header".into()));
                }
                let s = s.parse::<usize>().map_err(|e| err(format!("edge source: {e}")))?;
                let d = d.parse::<usize>().map_err(|e| err(format!("edge target: {e}")))?;
                edges.insert((s, d));
            }
            _ => return Err(err(format!("unrecognized line {line:?}"))),
        }
    }
    let n_silos = n_silos.ok_or(FedError::Parse { line: 0, msg: "missing `silos N` header".into() })?;
    let mut t = Topology { name: name.to_string(), n_silos, edges, strict };
    t.validate()?;
    if !strict {
        t = t.symmetrized();
    }
    Ok(t)
}

/// The topology files shipped in `topologies/`, as `(name, text)`.
pub const BUNDLED: [(&str, &str); 3] = [
    ("gaia", include_str!("../../../../topologies/gaia.topo")),
    ("nws", include_str!("../../../../topologies/nws.topo")),
    ("exodus", include_str!("../../../../topologies/exodus.topo")),
];

pub fn bundled_topologies() -> Result<Vec<Topology>> {
    BUNDLED.iter().map(|(name, text)| parse_topology(text, name)).collect()
}

pub fn load_topology(path: &Path) -> Result<Topology> {
    let text = std::fs::read_to_string(path).map_err(|e| FedError::Io(format!("{}: {e}", path.display())))?;
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("topology");
    parse_topology(&text, name)
}
