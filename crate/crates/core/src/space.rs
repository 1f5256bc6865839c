//! Cell search spaces: operation pools, canonical cell encodings, exhaustive
//! enumeration, uniform sampling and single-edge mutation.
//!
//! A cell is a DAG whose edges carry operations. Two spaces are supported:
//!
//! * `nb201`: one input node (0) and nodes 1..=3, complete DAG (six edges),
//!   output is node 3.
//! * `darts-lite`: two input nodes (0 = the cell before last, 1 = the
//!   previous cell) and intermediate nodes 2..=5, each selecting exactly two
//!   distinct predecessors; output is the sum of the intermediate nodes.
//!
//! Encodings list each non-input node's incoming edges as `op~source`,
//! grouped by target node and separated by `+`, sources in descending order:
//! `|skip~0|+|skip~1|skip~0|+|skip~2|skip~1|skip~0|`.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::Primitive;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SpaceKind {
    #[serde(rename = "nb201")]
    Nb201,
    #[serde(rename = "darts-lite")]
    DartsLite,
}

impl SpaceKind {
    pub fn pool(self) -> &'static [OperationKind] {
        use OperationKind::*;
        match self {
            SpaceKind::Nb201 => &[Conv1x1, Conv3x3, AvgPool3x3, Skip, Zero],
            SpaceKind::DartsLite => &[
                Conv3x3, DilConv3x3, Conv5x5, DilConv5x5, Conv7x7, MaxPool3x3, AvgPool3x3, Skip,
                Zero,
            ],
        }
    }

    pub fn num_input_nodes(self) -> usize {
        match self {
            SpaceKind::Nb201 => 1,
            SpaceKind::DartsLite => 2,
        }
    }

    /// Total node count including inputs.
    pub fn num_nodes(self) -> usize {
        match self {
            SpaceKind::Nb201 => 4,
            SpaceKind::DartsLite => 6,
        }
    }

    pub fn num_edges(self) -> usize {
        match self {
            SpaceKind::Nb201 => 6,
            SpaceKind::DartsLite => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SpaceKind::Nb201 => "nb201",
            SpaceKind::DartsLite => "darts-lite",
        }
    }
}

impl fmt::Display for SpaceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SpaceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nb201" => Ok(SpaceKind::Nb201),
            "darts-lite" | "darts" => Ok(SpaceKind::DartsLite),
            other => Err(Error::Config(format!("unknown search space \"{other}\""))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OperationKind {
    Conv1x1,
    Conv3x3,
    Conv5x5,
    Conv7x7,
    DilConv3x3,
    DilConv5x5,
    AvgPool3x3,
    MaxPool3x3,
    Skip,
    Zero,
}

impl OperationKind {
    pub const ALL: [OperationKind; 10] = [
        OperationKind::Conv1x1,
        OperationKind::Conv3x3,
        OperationKind::Conv5x5,
        OperationKind::Conv7x7,
        OperationKind::DilConv3x3,
        OperationKind::DilConv5x5,
        OperationKind::AvgPool3x3,
        OperationKind::MaxPool3x3,
        OperationKind::Skip,
        OperationKind::Zero,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OperationKind::Conv1x1 => "conv1x1",
            OperationKind::Conv3x3 => "conv3x3",
            OperationKind::Conv5x5 => "conv5x5",
            OperationKind::Conv7x7 => "conv7x7",
            OperationKind::DilConv3x3 => "dilconv3x3",
            OperationKind::DilConv5x5 => "dilconv5x5",
            OperationKind::AvgPool3x3 => "avgpool3x3",
            OperationKind::MaxPool3x3 => "maxpool3x3",
            OperationKind::Skip => "skip",
            OperationKind::Zero => "zero",
        }
    }

    /// Accepts the canonical names plus the NAS-Bench-201 spellings.
    pub fn from_name(s: &str) -> Option<Self> {
        let canonical = Self::ALL.iter().copied().find(|op| op.name() == s);
        canonical.or(match s {
            "nor_conv_1x1" => Some(OperationKind::Conv1x1),
            "nor_conv_3x3" => Some(OperationKind::Conv3x3),
            "avg_pool_3x3" => Some(OperationKind::AvgPool3x3),
            "max_pool_3x3" => Some(OperationKind::MaxPool3x3),
            "skip_connect" => Some(OperationKind::Skip),
            "none" => Some(OperationKind::Zero),
            _ => None,
        })
    }

    pub fn primitive(self) -> Primitive {
        match self {
            OperationKind::Conv1x1 => Primitive::Conv { kernel: 1, dilation: 1 },
            OperationKind::Conv3x3 => Primitive::Conv { kernel: 3, dilation: 1 },
            OperationKind::Conv5x5 => Primitive::Conv { kernel: 5, dilation: 1 },
            OperationKind::Conv7x7 => Primitive::Conv { kernel: 7, dilation: 1 },
            OperationKind::DilConv3x3 => Primitive::Conv { kernel: 3, dilation: 2 },
            OperationKind::DilConv5x5 => Primitive::Conv { kernel: 5, dilation: 2 },
            OperationKind::AvgPool3x3 => Primitive::AvgPool3,
            OperationKind::MaxPool3x3 => Primitive::MaxPool3,
            OperationKind::Skip => Primitive::Skip,
            OperationKind::Zero => Primitive::Zero,
        }
    }

    pub fn has_params(self) -> bool {
        self.primitive().has_params()
    }
}

impl fmt::Display for OperationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub op: OperationKind,
}

/// A validated cell. Edges are kept in canonical order: target ascending,
/// source descending, which is also the order they appear in the encoding.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellSpec {
    space: SpaceKind,
    edges: Vec<Edge>,
}

impl CellSpec {
    pub fn new(space: SpaceKind, mut edges: Vec<Edge>) -> Result<Self> {
        edges.sort_by(|a, b| a.to.cmp(&b.to).then(b.from.cmp(&a.from)));
        let pool = space.pool();
        for e in &edges {
            if e.from >= e.to || e.to >= space.num_nodes() || e.to < space.num_input_nodes() {
                return Err(Error::Config(format!(
                    "edge {}->{} is not valid in {space}",
                    e.from, e.to
                )));
            }
            if !pool.contains(&e.op) {
                return Err(Error::Config(format!(
                    "operation {} is not in the {space} pool",
                    e.op
                )));
            }
        }
        for to in space.num_input_nodes()..space.num_nodes() {
            let sources: Vec<usize> = edges.iter().filter(|e| e.to == to).map(|e| e.from).collect();
            let ok = match space {
                SpaceKind::Nb201 => sources.iter().copied().eq((0..to).rev()),
                SpaceKind::DartsLite => sources.len() == 2 && sources[0] != sources[1],
            };
            if !ok {
                return Err(Error::Config(format!(
                    "node {to} has incoming sources {sources:?}, invalid for {space}"
                )));
            }
        }
        Ok(Self { space, edges })
    }

    /// NB201 cell from its six ops in canonical edge order.
    pub fn nb201(ops: [OperationKind; 6]) -> Result<Self> {
        let edges = nb201_slots()
            .iter()
            .zip(ops)
            .map(|(&(from, to), op)| Edge { from, to, op })
            .collect();
        Self::new(SpaceKind::Nb201, edges)
    }

    pub fn space(&self) -> SpaceKind {
        self.space
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn ops(&self) -> Vec<OperationKind> {
        self.edges.iter().map(|e| e.op).collect()
    }

    /// Number of edge slots whose (source, op) differ. Cells from different
    /// spaces are maximally distant.
    pub fn hamming(&self, other: &CellSpec) -> usize {
        if self.space != other.space {
            return self.edges.len().max(other.edges.len());
        }
        self.edges
            .iter()
            .zip(&other.edges)
            .filter(|(a, b)| a != b)
            .count()
    }

    pub fn encode(&self) -> String {
        encode(self)
    }
}

impl fmt::Display for CellSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&encode(self))
    }
}

impl FromStr for CellSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        decode(s)
    }
}

/// (source, target) of the six NB201 edges in canonical order.
pub fn nb201_slots() -> [(usize, usize); 6] {
    [(0, 1), (1, 2), (0, 2), (2, 3), (1, 3), (0, 3)]
}

pub fn encode(cell: &CellSpec) -> String {
    let mut out = String::from("|");
    let mut current = None;
    for e in &cell.edges {
        if current.is_some_and(|t| t != e.to) {
            out.push_str("+|");
        }
        current = Some(e.to);
        out.push_str(e.op.name());
        out.push('~');
        out.push_str(&e.from.to_string());
        out.push('|');
    }
    out
}

/// Parses an encoding in either space. Within a group, edges may appear in
/// any order; the result is canonical.
pub fn decode(s: &str) -> Result<CellSpec> {
    let parse_err = |pos: usize, msg: &str| Error::Parse {
        pos,
        msg: msg.to_string(),
    };
    if s.is_empty() {
        return Err(parse_err(0, "empty encoding"));
    }
    let mut groups: Vec<Vec<(OperationKind, usize)>> = Vec::new();
    let mut offset = 0;
    for group in s.split('+') {
        let start = offset;
        offset += group.len() + 1;
        if group.len() < 2 || !group.starts_with('|') || !group.ends_with('|') {
            return Err(parse_err(start, "group must be delimited by '|'"));
        }
        let mut edges = Vec::new();
        let mut tok_pos = start + 1;
        for token in group[1..group.len() - 1].split('|') {
            let (name, src) = token
                .split_once('~')
                .ok_or_else(|| parse_err(tok_pos, "expected op~source"))?;
            let op = OperationKind::from_name(name).ok_or_else(|| Error::UnknownOp {
                name: name.to_string(),
                pos: tok_pos,
            })?;
            if src.is_empty() || !src.bytes().all(|b| b.is_ascii_digit()) || src.len() > 2 {
                return Err(parse_err(tok_pos + name.len() + 1, "bad source index"));
            }
            let from: usize = src.parse().map_err(|_| parse_err(tok_pos, "bad source index"))?;
            edges.push((op, from));
            tok_pos += token.len() + 1;
        }
        groups.push(edges);
    }
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    let space = match sizes.as_slice() {
        [1, 2, 3] => SpaceKind::Nb201,
        [2, 2, 2, 2] => SpaceKind::DartsLite,
        _ => {
            return Err(parse_err(
                0,
                &format!("group sizes {sizes:?} match no known search space"),
            ))
        }
    };
    let first_target = space.num_input_nodes();
    let edges = groups
        .iter()
        .enumerate()
        .flat_map(|(g, list)| {
            list.iter().map(move |&(op, from)| Edge {
                from,
                to: first_target + g,
                op,
            })
        })
        .collect();
    CellSpec::new(space, edges).map_err(|e| match e {
        Error::Config(msg) => parse_err(0, &msg),
        other => other,
    })
}

/// All NB201 cells in lexicographic pool-index order, first edge slot most
/// significant.
pub fn enumerate_space(space: SpaceKind) -> Result<Vec<CellSpec>> {
    if space != SpaceKind::Nb201 {
        return Err(Error::Unsupported(format!(
            "{space} can only be sampled: DARTS-style spaces hold on the order of 10^19 architectures"
        )));
    }
    let pool = space.pool();
    let n = pool.len();
    let total = n.pow(6);
    let mut out = Vec::with_capacity(total);
    for idx in 0..total {
        let mut ops = [OperationKind::Zero; 6];
        let mut rem = idx;
        for slot in (0..6).rev() {
            ops[slot] = pool[rem % n];
            rem /= n;
        }
        out.push(CellSpec::nb201(ops)?);
    }
    Ok(out)
}

pub fn sample_uniform<R: Rng + ?Sized>(space: SpaceKind, rng: &mut R) -> CellSpec {
    let pool = space.pool();
    let edges = match space {
        SpaceKind::Nb201 => nb201_slots()
            .iter()
            .map(|&(from, to)| Edge {
                from,
                to,
                op: pool[rng.random_range(0..pool.len())],
            })
            .collect(),
        SpaceKind::DartsLite => {
            let mut edges = Vec::with_capacity(8);
            for to in 2..6 {
                for from in sample(rng, to, 2).into_iter() {
                    edges.push(Edge {
                        from,
                        to,
                        op: pool[rng.random_range(0..pool.len())],
                    });
                }
            }
            edges
        }
    };
    CellSpec::new(space, edges).expect("sampled cell is valid by construction")
}

/// Replaces the op on one uniformly chosen edge with a uniformly chosen
/// different op from the same pool.
pub fn mutate<R: Rng + ?Sized>(cell: &CellSpec, rng: &mut R) -> CellSpec {
    let pool = cell.space.pool();
    let slot = rng.random_range(0..cell.edges.len());
    let current = cell.edges[slot].op;
    let others: Vec<OperationKind> = pool.iter().copied().filter(|&op| op != current).collect();
    let mut child = cell.clone();
    child.edges[slot].op = others[rng.random_range(0..others.len())];
    child
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn all_skip_encoding() {
        let cell = CellSpec::nb201([OperationKind::Skip; 6]).unwrap();
        assert_eq!(
            cell.encode(),
            "|skip~0|+|skip~1|skip~0|+|skip~2|skip~1|skip~0|"
        );
    }

    #[test]
    fn decode_accepts_ascending_nb201_spelling() {
        let s = "|nor_conv_3x3~0|+|nor_conv_3x3~0|avg_pool_3x3~1|+|skip_connect~0|nor_conv_3x3~1|none~2|";
        let cell = decode(s).unwrap();
        assert_eq!(
            cell.encode(),
            "|conv3x3~0|+|avgpool3x3~1|conv3x3~0|+|zero~2|conv3x3~1|skip~0|"
        );
    }

    #[test]
    fn unknown_op_is_named() {
        let err = decode("|bogus~0|+|skip~1|skip~0|+|skip~2|skip~1|skip~0|").unwrap_err();
        match err {
            Error::UnknownOp { name, pos } => {
                assert_eq!(name, "bogus");
                assert_eq!(pos, 1);
            }
            e => panic!("unexpected {e:?}"),
        }
        assert!(err_string("|bogus~0|+").contains("bogus"));
    }

    fn err_string(s: &str) -> String {
        decode(s).unwrap_err().to_string()
    }

    #[test]
    fn malformed_structures_rejected() {
        for bad in [
            "",
            "|",
            "||",
            "skip~0",
            "|skip~0|+|skip~1|",
            "|skip~0|+|skip~1|skip~1|+|skip~2|skip~1|skip~0|",
            "|skip~1|+|skip~1|skip~0|+|skip~2|skip~1|skip~0|",
            "|skip~0|+|skip~1|skip~0|+|skip~2|skip~1|skip0|",
            "|skip~0|+|skip~1|skip~0|+|skip~2|skip~1|skip~|",
            "|conv7x7~0|+|skip~1|skip~0|+|skip~2|skip~1|skip~0|",
        ] {
            assert!(decode(bad).is_err(), "accepted {bad:?}");
        }
    }

    #[test]
    fn enumeration_order_and_size() {
        let all = enumerate_space(SpaceKind::Nb201).unwrap();
        assert_eq!(all.len(), 15625);
        assert!(all[0].ops().iter().all(|&op| op == OperationKind::Conv1x1));
        assert!(all[15624].ops().iter().all(|&op| op == OperationKind::Zero));
        let unique: std::collections::HashSet<String> = all.iter().map(|c| c.encode()).collect();
        assert_eq!(unique.len(), 15625);
    }

    #[test]
    fn darts_lite_enumeration_unsupported() {
        let err = enumerate_space(SpaceKind::DartsLite).unwrap_err();
        assert!(err.to_string().contains("10^19"));
    }

    #[test]
    fn sampling_is_seeded() {
        for space in [SpaceKind::Nb201, SpaceKind::DartsLite] {
            let a = sample_uniform(space, &mut ChaCha8Rng::seed_from_u64(3));
            let b = sample_uniform(space, &mut ChaCha8Rng::seed_from_u64(3));
            assert_eq!(a, b);
        }
    }

    #[test]
    fn sampled_edge_marginals_are_uniform() {
        // Pearson chi-square on each edge's op marginal, 4 dof; the 0.99
        // quantile of chi2(4) is 13.277.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 50_000;
        let mut counts = [[0usize; 5]; 6];
        let pool = SpaceKind::Nb201.pool();
        for _ in 0..n {
            let cell = sample_uniform(SpaceKind::Nb201, &mut rng);
            for (slot, op) in cell.ops().into_iter().enumerate() {
                counts[slot][pool.iter().position(|&p| p == op).unwrap()] += 1;
            }
        }
        let expected = n as f64 / 5.0;
        for row in counts {
            let chi2: f64 = row
                .iter()
                .map(|&c| (c as f64 - expected).powi(2) / expected)
                .sum();
            assert!(chi2 < 13.277, "chi2 = {chi2}");
        }
    }

    #[test]
    fn mutation_edge_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let parent = CellSpec::nb201([OperationKind::Conv3x3; 6]).unwrap();
        let mut hits = [0usize; 6];
        let n = 10_000;
        for _ in 0..n {
            let child = mutate(&parent, &mut rng);
            let slot = (0..6)
                .find(|&i| child.edges()[i] != parent.edges()[i])
                .unwrap();
            hits[slot] += 1;
        }
        for h in hits {
            assert!((h as f64 / n as f64 - 1.0 / 6.0).abs() < 0.02);
        }
    }

    #[test]
    fn darts_lite_roundtrip_and_mutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let cell = sample_uniform(SpaceKind::DartsLite, &mut rng);
            assert_eq!(decode(&cell.encode()).unwrap(), cell);
            let child = mutate(&cell, &mut rng);
            assert_eq!(cell.hamming(&child), 1);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn encode_decode_roundtrip(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cell = sample_uniform(SpaceKind::Nb201, &mut rng);
            let s = cell.encode();
            prop_assert_eq!(decode(&s).unwrap(), cell.clone());
            prop_assert_eq!(decode(&s).unwrap().encode(), s);
            let child = mutate(&cell, &mut rng);
            prop_assert_eq!(cell.hamming(&child), 1);
            prop_assert!(decode(&child.encode()).is_ok());
        }
    }
}
