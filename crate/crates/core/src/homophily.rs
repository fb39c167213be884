//! Overlapping modularity of SDG memberships on patent graphs.
//!
//! With the power affinity `f(a, b) = a^p * b^p` the average affinities
//! factor as `beta_i = w_i^p * A` where `A` is the mean of `w_u^p`, so a
//! community costs one pass over nodes and one over arcs.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{float_cell, PatentRecord, SdgVector, SDG_COUNT};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphKind {
    Citation,
    Inventor,
    Applicant,
}

impl GraphKind {
    pub const ALL: [GraphKind; 3] = [GraphKind::Citation, GraphKind::Inventor, GraphKind::Applicant];

    pub fn name(self) -> &'static str {
        match self {
            GraphKind::Citation => "citation",
            GraphKind::Inventor => "inventor",
            GraphKind::Applicant => "applicant",
        }
    }
}

impl fmt::Display for GraphKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GraphKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GraphKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown graph kind `{s}`")))
    }
}

/// Directed graph over a dense node index. Arcs are sorted, unique and
/// loop-free.
#[derive(Clone, Debug)]
pub struct Graph {
    kind: GraphKind,
    ids: Vec<String>,
    arcs: Vec<(u32, u32)>,
}

impl Graph {
    /// Drops self-loops and duplicate arcs.
    pub fn from_arcs(kind: GraphKind, ids: Vec<String>, mut arcs: Vec<(u32, u32)>) -> Result<Self> {
        let n = ids.len();
        if n > u32::MAX as usize {
            return Err(Error::invalid("too many nodes"));
        }
        if let Some(&(s, d)) = arcs.iter().find(|&&(s, d)| s as usize >= n || d as usize >= n) {
            return Err(Error::invalid(format!("arc ({s}, {d}) out of range for {n} nodes")));
        }
        arcs.retain(|&(s, d)| s != d);
        arcs.sort_unstable();
        arcs.dedup();
        Ok(Graph { kind, ids, arcs })
    }

    pub fn kind(&self) -> GraphKind {
        self.kind
    }

    pub fn node_count(&self) -> usize {
        self.ids.len()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn arcs(&self) -> &[(u32, u32)] {
        &self.arcs
    }

    pub fn arc_count(&self) -> usize {
        self.arcs.len()
    }

    pub fn out_degrees(&self) -> Vec<u32> {
        let mut k = vec![0; self.ids.len()];
        for &(s, _) in &self.arcs {
            k[s as usize] += 1;
        }
        k
    }

    pub fn in_degrees(&self) -> Vec<u32> {
        let mut k = vec![0; self.ids.len()];
        for &(_, d) in &self.arcs {
            k[d as usize] += 1;
        }
        k
    }
}

/// Reads a `src_id,dst_id` citation edge list (citing, cited).
pub fn load_edges(path: &Path) -> Result<Vec<(String, String)>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.len() < 2 || &headers[0] != "src_id" || &headers[1] != "dst_id" {
        return Err(Error::Schema {
            path: path.to_path_buf(),
            line: 1,
            message: "expected header `src_id,dst_id`".into(),
        });
    }
    let mut edges = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        if row.len() < 2 {
            return Err(Error::Schema {
                path: path.to_path_buf(),
                line: i + 2,
                message: "expected two columns".into(),
            });
        }
        edges.push((row[0].trim().to_string(), row[1].trim().to_string()));
    }
    Ok(edges)
}

fn node_index(records: &[PatentRecord]) -> (Vec<String>, HashMap<&str, u32>) {
    let ids: Vec<String> = records.iter().map(|r| r.patent_id.clone()).collect();
    let index = records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.patent_id.as_str(), i as u32))
        .collect();
    (ids, index)
}

/// Citation graph, one arc per `(citing, cited)` row.
pub fn citation_graph(records: &[PatentRecord], edges: &[(String, String)]) -> Result<Graph> {
    let (ids, index) = node_index(records);
    let lookup = |id: &str| {
        index
            .get(id)
            .copied()
            .ok_or_else(|| Error::invalid(format!("edge references unknown patent `{id}`")))
    };
    let arcs = edges
        .iter()
        .map(|(s, d)| Ok((lookup(s)?, lookup(d)?)))
        .collect::<Result<Vec<_>>>()?;
    Graph::from_arcs(GraphKind::Citation, ids, arcs)
}

/// Links patents sharing an inventor (or applicant); each link is two arcs.
pub fn shared_party_graph(records: &[PatentRecord], kind: GraphKind) -> Result<Graph> {
    let mut groups: BTreeMap<&str, Vec<u32>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        let parties = match kind {
            GraphKind::Inventor => &r.inventor_ids,
            GraphKind::Applicant => &r.applicant_ids,
            GraphKind::Citation => {
                return Err(Error::invalid("citation graphs need an edge list"));
            }
        };
        let distinct: BTreeSet<&str> = parties.iter().map(String::as_str).collect();
        for party in distinct {
            groups.entry(party).or_default().push(i as u32);
        }
    }
    let mut arcs = Vec::new();
    for members in groups.values() {
        for (k, &a) in members.iter().enumerate() {
            for &b in &members[k + 1..] {
                arcs.push((a, b));
                arcs.push((b, a));
            }
        }
    }
    let (ids, _) = node_index(records);
    Graph::from_arcs(kind, ids, arcs)
}

/// Builds the graph of `kind`; citation graphs read `edge_file`.
pub fn build_graph(records: &[PatentRecord], kind: GraphKind, edge_file: Option<&Path>) -> Result<Graph> {
    match kind {
        GraphKind::Citation => {
            let path = edge_file.ok_or_else(|| Error::invalid("citation graph needs an edge file"))?;
            citation_graph(records, &load_edges(path)?)
        }
        _ => shared_party_graph(records, kind),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MembershipMode {
    Raw,
    Binary,
    RowNorm,
}

impl FromStr for MembershipMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(MembershipMode::Raw),
            "binary" => Ok(MembershipMode::Binary),
            "row_norm" => Ok(MembershipMode::RowNorm),
            _ => Err(Error::invalid(format!("unknown membership mode `{s}`"))),
        }
    }
}

/// Node-by-community belonging factors in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MembershipMatrix {
    communities: usize,
    values: Vec<f64>,
}

impl MembershipMatrix {
    pub fn new(communities: usize, values: Vec<f64>) -> Result<Self> {
        if communities == 0 || values.len() % communities != 0 {
            return Err(Error::invalid("membership values do not form whole rows"));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("membership {v} outside [0, 1]")));
        }
        Ok(MembershipMatrix { communities, values })
    }

    pub fn uniform(nodes: usize, communities: usize, value: f64) -> Result<Self> {
        Self::new(communities, vec![value; nodes * communities])
    }

    pub fn nodes(&self) -> usize {
        self.values.len() / self.communities
    }

    pub fn communities(&self) -> usize {
        self.communities
    }

    pub fn row(&self, node: usize) -> &[f64] {
        &self.values[node * self.communities..(node + 1) * self.communities]
    }

    pub fn get(&self, node: usize, community: usize) -> f64 {
        self.values[node * self.communities + community]
    }

    /// Multiplies one community's column by `lambda`.
    pub fn scale_community(&mut self, community: usize, lambda: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::invalid("scale factor must lie in [0, 1]"));
        }
        let c = self.communities;
        self.values[community..].iter_mut().step_by(c).for_each(|v| *v *= lambda);
        Ok(())
    }
}

/// SDG memberships aligned with the graph's nodes. Patents without a vector
/// get an all-zero row.
pub fn memberships(
    graph: &Graph,
    vectors: &HashMap<String, SdgVector>,
    mode: MembershipMode,
) -> MembershipMatrix {
    let mut values = Vec::with_capacity(graph.node_count() * SDG_COUNT);
    for id in graph.ids() {
        let mut row = vectors
            .get(id)
            .map(|v| *v.components())
            .unwrap_or([0.0; SDG_COUNT]);
        match mode {
            MembershipMode::Raw => row.iter_mut().for_each(|x| *x = x.clamp(0.0, 1.0)),
            MembershipMode::Binary => row.iter_mut().for_each(|x| *x = if *x > 0.0 { 1.0 } else { 0.0 }),
            MembershipMode::RowNorm => {
                row.iter_mut().for_each(|x| *x = x.max(0.0));
                let sum: f64 = row.iter().sum();
                if sum > 0.0 {
                    row.iter_mut().for_each(|x| *x /= sum);
                }
            }
        }
        values.extend_from_slice(&row);
    }
    MembershipMatrix {
        communities: SDG_COUNT,
        values,
    }
}

/// Binary membership in each distinct CPC3 code, the lexical-class baseline.
pub fn cpc_memberships(graph: &Graph, records: &[PatentRecord]) -> Result<MembershipMatrix> {
    let by_id: HashMap<&str, &PatentRecord> =
        records.iter().map(|r| (r.patent_id.as_str(), r)).collect();
    let codes: BTreeSet<&str> = records.iter().flat_map(|r| r.cpc3.iter().map(String::as_str)).collect();
    if codes.is_empty() {
        return Err(Error::invalid("no CPC codes in records"));
    }
    let col: HashMap<&str, usize> = codes.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let mut values = vec![0.0; graph.node_count() * codes.len()];
    for (n, id) in graph.ids().iter().enumerate() {
        if let Some(r) = by_id.get(id.as_str()) {
            for code in &r.cpc3 {
                values[n * codes.len() + col[code.as_str()]] = 1.0;
            }
        }
    }
    MembershipMatrix::new(codes.len(), values)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModularityParams {
    pub p: f64,
}

impl ModularityParams {
    pub fn new(p: f64) -> Result<Self> {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::invalid(format!("affinity exponent p = {p} outside (0, 1]")));
        }
        Ok(ModularityParams { p })
    }
}

/// Observed and expected terms of one community's modularity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CommunityTerms {
    pub observed: f64,
    pub expected: f64,
}

impl CommunityTerms {
    pub fn q(&self) -> f64 {
        self.observed - self.expected
    }
}

fn check(g: &Graph, w: &MembershipMatrix, p: f64) -> Result<()> {
    ModularityParams::new(p)?;
    if g.arc_count() == 0 {
        return Err(Error::invalid("modularity needs at least one arc"));
    }
    if w.nodes() != g.node_count() {
        return Err(Error::DimensionMismatch {
            expected: g.node_count(),
            actual: w.nodes(),
        });
    }
    Ok(())
}

fn powed(x: f64, p: f64) -> f64 {
    if p == 1.0 { x } else { x.powf(p) }
}

/// Terms of every community in one pass over nodes and one over arcs.
pub fn community_terms(g: &Graph, w: &MembershipMatrix, p: f64) -> Result<Vec<CommunityTerms>> {
    check(g, w, p)?;
    let c = w.communities();
    let wp: Vec<f64> = w.values.iter().map(|&x| powed(x, p)).collect();
    let k_out = g.out_degrees();
    let k_in = g.in_degrees();

    let mut mean = vec![0.0; c];
    let mut out_sum = vec![0.0; c];
    let mut in_sum = vec![0.0; c];
    for (i, row) in wp.chunks_exact(c).enumerate() {
        let (ko, ki) = (k_out[i] as f64, k_in[i] as f64);
        for (k, &x) in row.iter().enumerate() {
            mean[k] += x;
            out_sum[k] += ko * x;
            in_sum[k] += ki * x;
        }
    }
    let n = g.node_count() as f64;

    let mut observed = vec![0.0; c];
    for &(s, d) in g.arcs() {
        let a = &wp[s as usize * c..(s as usize + 1) * c];
        let b = &wp[d as usize * c..(d as usize + 1) * c];
        for k in 0..c {
            observed[k] += a[k] * b[k];
        }
    }

    let m = g.arc_count() as f64;
    Ok((0..c)
        .map(|k| {
            let a = mean[k] / n;
            CommunityTerms {
                observed: observed[k] / m,
                expected: (out_sum[k] * a) * (in_sum[k] * a) / (m * m),
            }
        })
        .collect())
}

/// `Q_c` for one community.
pub fn q_community(g: &Graph, w: &MembershipMatrix, community: usize, p: f64) -> Result<f64> {
    if community >= w.communities() {
        return Err(Error::invalid(format!("community {community} out of range")));
    }
    Ok(community_terms(g, w, p)?[community].q())
}

/// `Q = sum_c Q_c`.
pub fn overlapping_modularity(g: &Graph, w: &MembershipMatrix, p: f64) -> Result<f64> {
    Ok(community_terms(g, w, p)?.iter().map(CommunityTerms::q).sum())
}

/// `(p, Q)` for each exponent, in input order.
pub fn modularity_sweep(g: &Graph, w: &MembershipMatrix, ps: &[f64]) -> Result<Vec<(f64, f64)>> {
    ps.par_iter()
        .map(|&p| Ok((p, overlapping_modularity(g, w, p)?)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModularityRow {
    pub kind: GraphKind,
    pub method: String,
    pub p: f64,
    pub q: f64,
}

pub fn write_modularity_csv(path: &Path, rows: &[ModularityRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["kind", "method", "p", "Q"])?;
    for r in rows {
        w.write_record([r.kind.name(), &r.method, &float_cell(r.p), &float_cell(r.q)])?;
    }
    w.flush().map_err(|e| Error::io("writing modularity table", e))
}
