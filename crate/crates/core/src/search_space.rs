//! Discrete two-level search space: the cell vocabulary, the resolution
//! trellis, path validation, exact counting and enumeration.
//!
//! Layers are numbered `1..=L` in every public API. Layer 0 is the stem,
//! which always sits at downsample factor 4.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spatial reduction of a feature map relative to the input image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Downsample {
    X4,
    X8,
    X16,
    X32,
}

impl Downsample {
    pub const ALL: [Downsample; 4] = [
        Downsample::X4,
        Downsample::X8,
        Downsample::X16,
        Downsample::X32,
    ];

    pub fn factor(self) -> usize {
        4 << self.index()
    }

    /// Position in `ALL` (0 for factor 4, 3 for factor 32).
    pub fn index(self) -> usize {
        match self {
            Downsample::X4 => 0,
            Downsample::X8 => 1,
            Downsample::X16 => 2,
            Downsample::X32 => 3,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn from_factor(f: usize) -> Option<Self> {
        match f {
            4 => Some(Downsample::X4),
            8 => Some(Downsample::X8),
            16 => Some(Downsample::X16),
            32 => Some(Downsample::X32),
            _ => None,
        }
    }

    /// One step toward higher resolution (s/2), if it stays within range.
    pub fn finer(self) -> Option<Self> {
        self.index().checked_sub(1).and_then(Self::from_index)
    }

    /// One step toward lower resolution (2s), if it stays within range.
    pub fn coarser(self) -> Option<Self> {
        Self::from_index(self.index() + 1)
    }

    pub fn step(self, dir: Direction) -> Option<Self> {
        match dir {
            Direction::Finer => self.finer(),
            Direction::Same => Some(self),
            Direction::Coarser => self.coarser(),
        }
    }
}

impl fmt::Display for Downsample {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.factor())
    }
}

impl Serialize for Downsample {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u64(self.factor() as u64)
    }
}

impl<'de> Deserialize<'de> for Downsample {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let f = u64::deserialize(d)?;
        Downsample::from_factor(f as usize).ok_or_else(|| {
            serde::de::Error::custom(format!("downsample factor {f} is not one of 4, 8, 16, 32"))
        })
    }
}

/// Transition direction between adjacent layers, seen from the source node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    /// s -> s/2
    Finer,
    /// s -> s
    Same,
    /// s -> 2s
    Coarser,
}

impl Direction {
    pub const ALL: [Direction; 3] = [Direction::Finer, Direction::Same, Direction::Coarser];

    pub fn index(self) -> usize {
        match self {
            Direction::Finer => 0,
            Direction::Same => 1,
            Direction::Coarser => 2,
        }
    }

    /// Direction that takes `from` to `to`, if they are neighbours.
    pub fn between(from: Downsample, to: Downsample) -> Option<Self> {
        match to.index() as isize - from.index() as isize {
            -1 => Some(Direction::Finer),
            0 => Some(Direction::Same),
            1 => Some(Direction::Coarser),
            _ => None,
        }
    }
}

/// The candidate layer types of a block branch, in their canonical order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OperatorKind {
    SepConv3x3,
    SepConv5x5,
    AtrousConv3x3,
    AtrousConv5x5,
    AvgPool3x3,
    MaxPool3x3,
    SkipConnect,
    /// No connection.
    Zero,
}

pub const NUM_OPS: usize = 8;

impl OperatorKind {
    pub const ALL: [OperatorKind; NUM_OPS] = [
        OperatorKind::SepConv3x3,
        OperatorKind::SepConv5x5,
        OperatorKind::AtrousConv3x3,
        OperatorKind::AtrousConv5x5,
        OperatorKind::AvgPool3x3,
        OperatorKind::MaxPool3x3,
        OperatorKind::SkipConnect,
        OperatorKind::Zero,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&k| k == self).unwrap()
    }

    pub fn name(self) -> &'static str {
        match self {
            OperatorKind::SepConv3x3 => "sep_conv_3x3",
            OperatorKind::SepConv5x5 => "sep_conv_5x5",
            OperatorKind::AtrousConv3x3 => "atrous_conv_3x3_rate2",
            OperatorKind::AtrousConv5x5 => "atrous_conv_5x5_rate2",
            OperatorKind::AvgPool3x3 => "avg_pool_3x3",
            OperatorKind::MaxPool3x3 => "max_pool_3x3",
            OperatorKind::SkipConnect => "skip_connect",
            OperatorKind::Zero => "zero",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|k| k.name() == name)
    }

    /// Kernel size and dilation for the convolutional operators.
    pub fn conv_geometry(self) -> Option<(usize, usize)> {
        match self {
            OperatorKind::SepConv3x3 => Some((3, 1)),
            OperatorKind::SepConv5x5 => Some((5, 1)),
            OperatorKind::AtrousConv3x3 => Some((3, 2)),
            OperatorKind::AtrousConv5x5 => Some((5, 2)),
            _ => None,
        }
    }
}

impl fmt::Display for OperatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for OperatorKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for OperatorKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let name = String::deserialize(d)?;
        OperatorKind::from_name(&name)
            .ok_or_else(|| serde::de::Error::custom(format!("unknown operator `{name}`")))
    }
}

/// One block: two (input, operator) branches summed.
///
/// Input indices: 0 is the previous-previous cell output, 1 the previous
/// cell output, and `2 + k` the output of block `k` of the same cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockGenotype {
    #[serde(rename = "i1")]
    pub input1: usize,
    #[serde(rename = "i2")]
    pub input2: usize,
    #[serde(rename = "o1")]
    pub op1: OperatorKind,
    #[serde(rename = "o2")]
    pub op2: OperatorKind,
}

impl BlockGenotype {
    /// Checks the block at 0-based `position` inside a cell.
    pub fn validate(&self, position: usize) -> Result<()> {
        let limit = position + 2;
        for input in [self.input1, self.input2] {
            if input >= limit {
                return Err(Error::validation(format!(
                    "block {position}: input index {input} out of range (must be < {limit})"
                )));
            }
        }
        if self.op1 == OperatorKind::Zero || self.op2 == OperatorKind::Zero {
            return Err(Error::validation(format!(
                "block {position}: `zero` operator in a discrete genotype"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CellGenotype {
    pub blocks: Vec<BlockGenotype>,
}

impl CellGenotype {
    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn validate(&self, num_blocks: usize) -> Result<()> {
        if self.blocks.len() != num_blocks {
            return Err(Error::validation(format!(
                "cell has {} blocks, expected {num_blocks}",
                self.blocks.len()
            )));
        }
        self.blocks
            .iter()
            .enumerate()
            .try_for_each(|(i, b)| b.validate(i))
    }

    /// Decoded-genotype form: every block also draws on two distinct inputs.
    pub fn validate_decoded(&self, num_blocks: usize) -> Result<()> {
        self.validate(num_blocks)?;
        for (i, b) in self.blocks.iter().enumerate() {
            if b.input1 == b.input2 {
                return Err(Error::validation(format!(
                    "block {i}: both branches read input {}",
                    b.input1
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NetworkPath {
    pub resolutions: Vec<Downsample>,
}

impl NetworkPath {
    pub fn new(resolutions: Vec<Downsample>) -> Self {
        Self { resolutions }
    }

    pub fn from_factors(factors: &[usize]) -> Result<Self> {
        factors
            .iter()
            .map(|&f| {
                Downsample::from_factor(f)
                    .ok_or_else(|| Error::validation(format!("invalid downsample factor {f}")))
            })
            .collect::<Result<Vec<_>>>()
            .map(Self::new)
    }

    pub fn factors(&self) -> Vec<usize> {
        self.resolutions.iter().map(|d| d.factor()).collect()
    }

    pub fn len(&self) -> usize {
        self.resolutions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.resolutions.is_empty()
    }
}

impl fmt::Display for NetworkPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.resolutions.iter().map(|d| d.to_string()).collect();
        write!(f, "[{}]", parts.join(","))
    }
}

/// Which factors the first layer after the stem may take.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartConvention {
    /// Layer 1 at factor 4 or 8 (one step from the stem).
    #[default]
    FirstLayer4Or8,
    /// Layer 1 fixed at factor 4.
    FirstLayer4,
}

impl StartConvention {
    pub fn first_layer(self) -> &'static [Downsample] {
        match self {
            StartConvention::FirstLayer4Or8 => &[Downsample::X4, Downsample::X8],
            StartConvention::FirstLayer4 => &[Downsample::X4],
        }
    }
}

/// Feasible (layer, factor) nodes of an L-layer network and the edges
/// between adjacent layers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trellis {
    num_layers: usize,
    convention: StartConvention,
    /// `nodes[l - 1]` holds the feasible factors of layer `l`, ascending.
    nodes: Vec<Vec<Downsample>>,
}

pub fn build_trellis(num_layers: usize) -> Result<Trellis> {
    Trellis::new(num_layers, StartConvention::FirstLayer4Or8)
}

impl Trellis {
    pub fn new(num_layers: usize, convention: StartConvention) -> Result<Self> {
        if num_layers == 0 {
            return Err(Error::invalid("trellis needs at least one layer"));
        }
        let mut nodes: Vec<Vec<Downsample>> = Vec::with_capacity(num_layers);
        nodes.push(convention.first_layer().to_vec());
        for _ in 1..num_layers {
            let prev = nodes.last().unwrap();
            let next: Vec<Downsample> = Downsample::ALL
                .into_iter()
                .filter(|&s| prev.iter().any(|&p| Direction::between(p, s).is_some()))
                .collect();
            nodes.push(next);
        }
        Ok(Self {
            num_layers,
            convention,
            nodes,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn convention(&self) -> StartConvention {
        self.convention
    }

    /// Feasible factors at layer `layer` (1-based).
    pub fn layer_nodes(&self, layer: usize) -> &[Downsample] {
        &self.nodes[layer - 1]
    }

    pub fn contains(&self, layer: usize, s: Downsample) -> bool {
        layer >= 1 && layer <= self.num_layers && self.nodes[layer - 1].contains(&s)
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.iter().map(Vec::len).sum()
    }

    /// All `(layer, factor)` nodes in layer-major, ascending-factor order.
    pub fn nodes(&self) -> impl Iterator<Item = (usize, Downsample)> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .flat_map(|(i, layer)| layer.iter().map(move |&s| (i + 1, s)))
    }

    /// Feasible successors of node `(layer, s)` in layer `layer + 1`.
    pub fn successors(&self, layer: usize, s: Downsample) -> Vec<Downsample> {
        if layer >= self.num_layers {
            return Vec::new();
        }
        self.nodes[layer]
            .iter()
            .copied()
            .filter(|&t| Direction::between(s, t).is_some())
            .collect()
    }

    /// Edges `(layer, from, to)` with `from` in `layer` and `to` in `layer + 1`.
    pub fn edges(&self) -> Vec<(usize, Downsample, Downsample)> {
        let mut out = Vec::new();
        for layer in 1..self.num_layers {
            for &s in self.layer_nodes(layer) {
                for t in self.successors(layer, s) {
                    out.push((layer, s, t));
                }
            }
        }
        out
    }

    /// `completions[l - 1][s.index()]`: number of valid suffixes starting at node `(l, s)`.
    fn completion_counts(&self) -> Result<Vec<[u128; 4]>> {
        let mut counts = vec![[0u128; 4]; self.num_layers];
        for &s in self.layer_nodes(self.num_layers) {
            counts[self.num_layers - 1][s.index()] = 1;
        }
        for layer in (1..self.num_layers).rev() {
            for &s in self.layer_nodes(layer) {
                let mut total: u128 = 0;
                for t in self.successors(layer, s) {
                    total = total
                        .checked_add(counts[layer][t.index()])
                        .ok_or_else(|| Error::invalid("path count exceeds 128-bit range"))?;
                }
                counts[layer - 1][s.index()] = total;
            }
        }
        Ok(counts)
    }

    pub fn path_count(&self) -> Result<u128> {
        let counts = self.completion_counts()?;
        self.layer_nodes(1)
            .iter()
            .try_fold(0u128, |acc, s| acc.checked_add(counts[0][s.index()]))
            .ok_or_else(|| Error::invalid("path count exceeds 128-bit range"))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PathViolation {
    Length {
        expected: usize,
        actual: usize,
    },
    FirstLayer {
        factor: Downsample,
        convention: StartConvention,
    },
    IllegalJump {
        layer: usize,
        from: Downsample,
        to: Downsample,
    },
}

impl fmt::Display for PathViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PathViolation::Length { expected, actual } => {
                write!(f, "path has {actual} layers, trellis has {expected}")
            }
            PathViolation::FirstLayer { factor, convention } => match convention {
                StartConvention::FirstLayer4Or8 => {
                    write!(f, "first layer must be 4 or 8 (got {factor})")
                }
                StartConvention::FirstLayer4 => write!(f, "first layer must be 4 (got {factor})"),
            },
            PathViolation::IllegalJump { layer, from, to } => {
                write!(
                    f,
                    "illegal jump {from}→{to} between layers {layer} and {}",
                    layer + 1
                )
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<PathViolation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            let msgs: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
            Err(Error::validation(msgs.join("; ")))
        }
    }
}

pub fn validate_path(path: &NetworkPath, trellis: &Trellis) -> ValidationReport {
    let mut violations = Vec::new();
    if path.len() != trellis.num_layers() {
        violations.push(PathViolation::Length {
            expected: trellis.num_layers(),
            actual: path.len(),
        });
    }
    if let Some(&first) = path.resolutions.first() {
        if !trellis.convention().first_layer().contains(&first) {
            violations.push(PathViolation::FirstLayer {
                factor: first,
                convention: trellis.convention(),
            });
        }
    }
    for (i, pair) in path.resolutions.windows(2).enumerate() {
        if Direction::between(pair[0], pair[1]).is_none() {
            violations.push(PathViolation::IllegalJump {
                layer: i + 1,
                from: pair[0],
                to: pair[1],
            });
        }
    }
    ValidationReport { violations }
}

pub fn count_paths(num_layers: usize, convention: StartConvention) -> Result<u128> {
    Trellis::new(num_layers, convention)?.path_count()
}

/// Number of distinct cells with `num_blocks` blocks over `num_ops`
/// operators: the product over blocks `i = 1..=B` of `(i + 1)^2 * num_ops^2`.
/// Ordered branches count as distinct.
pub fn count_cell_genotypes(num_blocks: usize, num_ops: usize) -> Result<u128> {
    if num_blocks == 0 || num_ops == 0 {
        return Err(Error::invalid(
            "block count and operator count must be positive",
        ));
    }
    let overflow = || Error::invalid("cell count exceeds 128-bit range");
    let ops2 = (num_ops as u128)
        .checked_mul(num_ops as u128)
        .ok_or_else(overflow)?;
    (1..=num_blocks as u128).try_fold(1u128, |acc, i| {
        acc.checked_mul((i + 1) * (i + 1))
            .and_then(|v| v.checked_mul(ops2))
            .ok_or_else(overflow)
    })
}

pub const DEFAULT_ENUMERATION_CAP: u128 = 1_000_000;

/// Lexicographic depth-first stream over every valid path of a trellis.
pub struct PathEnumerator<'a> {
    trellis: &'a Trellis,
    current: Vec<Downsample>,
    /// Per depth: candidate factors and the index currently in use.
    frames: Vec<(Vec<Downsample>, usize)>,
    started: bool,
}

pub fn enumerate_paths(trellis: &Trellis) -> Result<PathEnumerator<'_>> {
    enumerate_paths_capped(trellis, DEFAULT_ENUMERATION_CAP)
}

pub fn enumerate_paths_capped(trellis: &Trellis, cap: u128) -> Result<PathEnumerator<'_>> {
    let total = trellis.path_count()?;
    if total > cap {
        return Err(Error::ResourceLimit(format!(
            "{total} paths exceed the enumeration cap of {cap}"
        )));
    }
    Ok(PathEnumerator {
        trellis,
        current: Vec::new(),
        frames: Vec::new(),
        started: false,
    })
}

impl PathEnumerator<'_> {
    fn descend(&mut self) {
        while self.current.len() < self.trellis.num_layers() {
            let options = match self.current.last() {
                None => self.trellis.layer_nodes(1).to_vec(),
                Some(&s) => self.trellis.successors(self.current.len(), s),
            };
            self.current.push(options[0]);
            self.frames.push((options, 0));
        }
    }
}

impl Iterator for PathEnumerator<'_> {
    type Item = NetworkPath;

    fn next(&mut self) -> Option<NetworkPath> {
        if !self.started {
            self.started = true;
            self.descend();
            return Some(NetworkPath::new(self.current.clone()));
        }
        loop {
            let (options, idx) = self.frames.last_mut()?;
            if *idx + 1 < options.len() {
                *idx += 1;
                let next = options[*idx];
                *self.current.last_mut().unwrap() = next;
                self.descend();
                return Some(NetworkPath::new(self.current.clone()));
            }
            self.frames.pop();
            self.current.pop();
        }
    }
}

/// Uniformly random decoded-style genotype and path, deterministic per seed.
///
/// Paths are drawn uniformly over all trellis paths; each block draws two
/// distinct inputs and two non-`zero` operators uniformly.
pub fn random_genotype(
    num_blocks: usize,
    trellis: &Trellis,
    seed: u64,
) -> Result<(CellGenotype, NetworkPath)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cell = random_cell(num_blocks, &mut rng);
    let path = random_path(trellis, &mut rng)?;
    Ok((cell, path))
}

pub fn random_cell<R: Rng>(num_blocks: usize, rng: &mut R) -> CellGenotype {
    let nonzero = &OperatorKind::ALL[..NUM_OPS - 1];
    let blocks = (0..num_blocks)
        .map(|b| {
            let n = b + 2;
            let a = rng.gen_range(0..n);
            let mut c = rng.gen_range(0..n - 1);
            if c >= a {
                c += 1;
            }
            let (input1, input2) = (a.min(c), a.max(c));
            BlockGenotype {
                input1,
                input2,
                op1: nonzero[rng.gen_range(0..nonzero.len())],
                op2: nonzero[rng.gen_range(0..nonzero.len())],
            }
        })
        .collect();
    CellGenotype { blocks }
}

pub fn random_path<R: Rng>(trellis: &Trellis, rng: &mut R) -> Result<NetworkPath> {
    let counts = trellis.completion_counts()?;
    let pick = |rng: &mut R, layer: usize, options: &[Downsample]| -> Downsample {
        let total: u128 = options.iter().map(|s| counts[layer - 1][s.index()]).sum();
        let mut r = rng.gen_range(0..total);
        for &s in options {
            let c = counts[layer - 1][s.index()];
            if r < c {
                return s;
            }
            r -= c;
        }
        unreachable!("weights sum to total")
    };
    let mut resolutions = Vec::with_capacity(trellis.num_layers());
    resolutions.push(pick(rng, 1, trellis.layer_nodes(1)));
    for layer in 2..=trellis.num_layers() {
        let prev = *resolutions.last().unwrap();
        let options = trellis.successors(layer - 1, prev);
        resolutions.push(pick(rng, layer, &options));
    }
    Ok(NetworkPath::new(resolutions))
}

/// Discrete architecture as stored in genotype files.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenotypeFile {
    #[serde(rename = "B")]
    pub num_blocks: usize,
    pub blocks: Vec<BlockGenotype>,
    pub path: NetworkPath,
}

impl GenotypeFile {
    pub fn new(cell: &CellGenotype, path: &NetworkPath) -> Self {
        Self {
            num_blocks: cell.num_blocks(),
            blocks: cell.blocks.clone(),
            path: path.clone(),
        }
    }

    pub fn cell(&self) -> CellGenotype {
        CellGenotype {
            blocks: self.blocks.clone(),
        }
    }

    /// Checks cell and path against their invariants for a 4-or-8 trellis.
    pub fn validate(&self) -> Result<Trellis> {
        self.cell().validate_decoded(self.num_blocks)?;
        let trellis = build_trellis(self.path.len().max(1))?;
        validate_path(&self.path, &trellis).into_result()?;
        Ok(trellis)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force_paths(layers: usize, convention: StartConvention) -> Vec<Vec<usize>> {
        // Independent of the trellis: filter all 4^L factor sequences by the rules.
        let mut out = Vec::new();
        let total = 4usize.pow(layers as u32);
        for code in 0..total {
            let seq: Vec<usize> = (0..layers)
                .map(|i| (code / 4usize.pow((layers - 1 - i) as u32)) % 4)
                .collect();
            let first_ok = match convention {
                StartConvention::FirstLayer4Or8 => seq[0] <= 1,
                StartConvention::FirstLayer4 => seq[0] == 0,
            };
            let steps_ok = seq
                .windows(2)
                .all(|w| (w[0] as isize - w[1] as isize).abs() <= 1);
            if first_ok && steps_ok {
                out.push(seq.iter().map(|&i| 4 << i).collect());
            }
        }
        out
    }

    #[test]
    fn trellis_shapes() {
        let t = build_trellis(1).unwrap();
        assert_eq!(t.layer_nodes(1), &[Downsample::X4, Downsample::X8]);
        assert!(t.edges().is_empty());

        let t = build_trellis(3).unwrap();
        assert_eq!(
            t.layer_nodes(2),
            &[Downsample::X4, Downsample::X8, Downsample::X16]
        );
        assert_eq!(t.layer_nodes(3), &Downsample::ALL);

        let t = build_trellis(12).unwrap();
        assert_eq!(t.num_nodes(), 45);
        for (_, from, to) in t.edges() {
            assert!(Direction::between(from, to).is_some());
        }
        assert!(build_trellis(0).is_err());
    }

    #[test]
    fn path_counts_match_brute_force() {
        for conv in [
            StartConvention::FirstLayer4Or8,
            StartConvention::FirstLayer4,
        ] {
            for layers in 1..=8 {
                let expected = brute_force_paths(layers, conv).len() as u128;
                assert_eq!(
                    count_paths(layers, conv).unwrap(),
                    expected,
                    "L={layers} {conv:?}"
                );
            }
        }
        assert_eq!(count_paths(1, StartConvention::FirstLayer4Or8).unwrap(), 2);
        assert_eq!(count_paths(2, StartConvention::FirstLayer4Or8).unwrap(), 5);
        assert_eq!(
            count_paths(12, StartConvention::FirstLayer4).unwrap(),
            28657
        );
        assert_eq!(
            count_paths(12, StartConvention::FirstLayer4Or8).unwrap(),
            75025
        );
        assert!(count_paths(0, StartConvention::FirstLayer4).is_err());
    }

    #[test]
    fn enumeration_is_lexicographic_and_complete() {
        for conv in [
            StartConvention::FirstLayer4Or8,
            StartConvention::FirstLayer4,
        ] {
            for layers in 1..=7 {
                let t = Trellis::new(layers, conv).unwrap();
                let got: Vec<Vec<usize>> =
                    enumerate_paths(&t).unwrap().map(|p| p.factors()).collect();
                assert_eq!(got, brute_force_paths(layers, conv));
            }
        }
        let t = build_trellis(1).unwrap();
        let got: Vec<Vec<usize>> = enumerate_paths(&t).unwrap().map(|p| p.factors()).collect();
        assert_eq!(got, vec![vec![4], vec![8]]);
    }

    #[test]
    fn enumeration_cap() {
        let t = build_trellis(12).unwrap();
        assert!(matches!(
            enumerate_paths_capped(&t, 1000),
            Err(Error::ResourceLimit(_))
        ));
        assert_eq!(enumerate_paths(&t).unwrap().count(), 75025);
    }

    #[test]
    fn cell_counts() {
        assert_eq!(count_cell_genotypes(1, 8).unwrap(), 256);
        assert_eq!(count_cell_genotypes(2, 1).unwrap(), 36);
        assert_eq!(count_cell_genotypes(5, 8).unwrap(), 556_627_761_561_600);
        assert!(count_cell_genotypes(0, 8).is_err());
        assert!(count_cell_genotypes(3, 0).is_err());
    }

    #[test]
    fn cell_counts_match_enumeration() {
        for blocks in 1..=2 {
            for ops in 1..=3 {
                // Each block independently picks (I1, I2, O1, O2).
                let mut total = 1u128;
                for b in 0..blocks {
                    let inputs = b + 2;
                    let mut n = 0u128;
                    for _i1 in 0..inputs {
                        for _i2 in 0..inputs {
                            for _o1 in 0..ops {
                                for _o2 in 0..ops {
                                    n += 1;
                                }
                            }
                        }
                    }
                    total *= n;
                }
                assert_eq!(count_cell_genotypes(blocks, ops).unwrap(), total);
            }
        }
    }

    #[test]
    fn validation_messages() {
        let t = build_trellis(4).unwrap();
        let ok = NetworkPath::from_factors(&[4, 4, 4, 4]).unwrap();
        assert!(validate_path(&ok, &t).is_valid());

        let jump = NetworkPath::from_factors(&[4, 16, 16, 16]).unwrap();
        let report = validate_path(&jump, &t);
        assert_eq!(report.violations.len(), 1);
        assert!(report.violations[0]
            .to_string()
            .contains("illegal jump 4→16"));

        let bad_start = NetworkPath::from_factors(&[16, 16, 8, 4]).unwrap();
        let report = validate_path(&bad_start, &t);
        assert!(report.violations[0]
            .to_string()
            .contains("first layer must be 4 or 8"));

        let short = NetworkPath::from_factors(&[4, 8]).unwrap();
        assert!(!validate_path(&short, &t).is_valid());
        assert!(NetworkPath::from_factors(&[4, 12]).is_err());
    }

    #[test]
    fn random_genotype_is_deterministic_and_valid() {
        let t = build_trellis(6).unwrap();
        let a = random_genotype(4, &t, 11).unwrap();
        let b = random_genotype(4, &t, 11).unwrap();
        assert_eq!(a, b);
        for seed in 0..200 {
            let (cell, path) = random_genotype(3, &t, seed).unwrap();
            assert!(validate_path(&path, &t).is_valid());
            cell.validate_decoded(3).unwrap();
        }
    }

    #[test]
    fn random_paths_are_uniform() {
        let t = build_trellis(3).unwrap();
        let all: Vec<NetworkPath> = enumerate_paths(&t).unwrap().collect();
        let mut counts = vec![0usize; all.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 10_000;
        for _ in 0..n {
            let p = random_path(&t, &mut rng).unwrap();
            counts[all.iter().position(|q| *q == p).unwrap()] += 1;
        }
        let expected = n as f64 / all.len() as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 13 paths -> 12 degrees of freedom; 0.999 quantile is 32.91.
        assert_eq!(all.len(), 13);
        assert!(chi2 < 32.91, "chi2 = {chi2}");
        for &c in &counts {
            let sigma = (n as f64 * (1.0 / 13.0) * (12.0 / 13.0)).sqrt();
            assert!(
                (c as f64 - expected).abs() <= 3.0 * sigma,
                "count {c} vs {expected}"
            );
        }
    }

    #[test]
    fn genotype_json_field_order() {
        let cell = CellGenotype {
            blocks: vec![BlockGenotype {
                input1: 0,
                input2: 1,
                op1: OperatorKind::SepConv3x3,
                op2: OperatorKind::SkipConnect,
            }],
        };
        let path = NetworkPath::from_factors(&[4, 8]).unwrap();
        let json = serde_json::to_string(&GenotypeFile::new(&cell, &path)).unwrap();
        assert_eq!(
            json,
            r#"{"B":1,"blocks":[{"i1":0,"i2":1,"o1":"sep_conv_3x3","o2":"skip_connect"}],"path":[4,8]}"#
        );
        let back = GenotypeFile::from_json(&json).unwrap();
        assert_eq!(back.cell(), cell);
        assert!(GenotypeFile::from_json(r#"{"B":1,"blocks":[],"path":[5]}"#).is_err());
    }
}
