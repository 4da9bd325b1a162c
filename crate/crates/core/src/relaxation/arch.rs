//! Architecture parameters: α over cell operators, β over trellis moves.

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::microtensor::{Shape4, Tensor4};
use crate::search_space::{
    CellGenotype, Direction, Downsample, NetworkPath, OperatorKind, StartConvention, Trellis,
    NUM_OPS,
};

/// Number of (block, input) groups in a cell of `num_blocks` blocks.
pub fn num_alpha_groups(num_blocks: usize) -> usize {
    (0..num_blocks).map(|b| b + 2).sum()
}

/// Flat group index of input `input` of block `block` (both 0-based).
pub fn alpha_group(block: usize, input: usize) -> usize {
    num_alpha_groups(block) + input
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Numeric(format!(
            "{what} logit {i} is not finite ({})",
            values[i]
        ))),
        None => Ok(()),
    }
}

/// Softmax over the entries whose mask is set; masked entries come out 0.
fn masked_softmax(logits: &[f64], mask: &[bool]) -> Vec<f64> {
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(&v, &m)| if m { (v - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Values laid out as `[block][input][operator]`; one copy shared by every
/// cell of the network. Used both for logits and for probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaLogits {
    num_blocks: usize,
    groups: Vec<[f64; NUM_OPS]>,
}

pub type AlphaProbs = AlphaLogits;

impl AlphaLogits {
    pub fn zeros(num_blocks: usize) -> Self {
        Self {
            num_blocks,
            groups: vec![[0.0; NUM_OPS]; num_alpha_groups(num_blocks)],
        }
    }

    pub fn random<R: Rng>(num_blocks: usize, scale: f64, rng: &mut R) -> Self {
        let mut a = Self::zeros(num_blocks);
        for g in &mut a.groups {
            for v in g.iter_mut() {
                *v = scale * rng.sample::<f64, _>(StandardNormal);
            }
        }
        a
    }

    pub fn num_blocks(&self) -> usize {
        self.num_blocks
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn get(&self, block: usize, input: usize) -> &[f64; NUM_OPS] {
        &self.groups[alpha_group(block, input)]
    }

    pub fn get_mut(&mut self, block: usize, input: usize) -> &mut [f64; NUM_OPS] {
        &mut self.groups[alpha_group(block, input)]
    }

    pub fn groups(&self) -> &[[f64; NUM_OPS]] {
        &self.groups
    }

    /// `(groups, 8, 1, 1)` tensor, the layout used on the graph.
    pub fn to_tensor(&self) -> Tensor4 {
        let data = self.groups.iter().flatten().copied().collect();
        Tensor4::from_vec(Shape4::new(self.groups.len(), NUM_OPS, 1, 1), data)
            .expect("layout matches")
    }

    pub fn from_tensor(num_blocks: usize, t: &Tensor4) -> Result<Self> {
        let want = Shape4::new(num_alpha_groups(num_blocks), NUM_OPS, 1, 1);
        if t.shape() != want {
            return Err(Error::validation(format!(
                "alpha tensor has shape {}, expected {want}",
                t.shape()
            )));
        }
        let groups = t
            .data()
            .chunks_exact(NUM_OPS)
            .map(|c| c.try_into().unwrap())
            .collect();
        Ok(Self { num_blocks, groups })
    }
}

/// Per (i, j) softmax over the eight operators.
pub fn normalize_alpha(logits: &AlphaLogits) -> Result<AlphaProbs> {
    let mut out = logits.clone();
    for (gi, g) in out.groups.iter_mut().enumerate() {
        check_finite(g, &format!("alpha group {gi}"))?;
        let p = masked_softmax(g, &[true; NUM_OPS]);
        g.copy_from_slice(&p);
    }
    Ok(out)
}

/// Which β directions exist, `[source layer][factor][direction]`.
///
/// Source layer 0 is the stem node (factor 4 only); layer `l ≥ 1` holds the
/// feasible trellis nodes. A direction is open when its target is a
/// feasible node of the next layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BetaMask {
    open: Vec<[[bool; 3]; 4]>,
}

impl BetaMask {
    pub fn from_trellis(trellis: &Trellis) -> Self {
        let open = (0..trellis.num_layers())
            .map(|l| {
                let mut row = [[false; 3]; 4];
                for s in Downsample::ALL {
                    if !source_feasible(trellis, l, s) {
                        continue;
                    }
                    for d in Direction::ALL {
                        row[s.index()][d.index()] =
                            s.step(d).is_some_and(|t| trellis.contains(l + 1, t));
                    }
                }
                row
            })
            .collect();
        Self { open }
    }

    pub fn num_layers(&self) -> usize {
        self.open.len()
    }

    pub fn is_open(&self, layer: usize, s: Downsample, d: Direction) -> bool {
        self.open[layer][s.index()][d.index()]
    }

    pub fn group(&self, layer: usize, s: Downsample) -> [bool; 3] {
        self.open[layer][s.index()]
    }

    /// Flattened over the `(layers, 3, 4, 1)` graph layout.
    pub fn to_graph_mask(&self) -> Vec<bool> {
        let mut m = Vec::with_capacity(self.open.len() * 12);
        for row in &self.open {
            for d in 0..3 {
                for s in 0..4 {
                    m.push(row[s][d]);
                }
            }
        }
        m
    }
}

/// Whether `(layer, s)` is a β source: the stem for layer 0, otherwise a
/// feasible trellis node.
pub fn source_feasible(trellis: &Trellis, layer: usize, s: Downsample) -> bool {
    if layer == 0 {
        s == Downsample::X4
    } else {
        trellis.contains(layer, s)
    }
}

/// Outgoing-move values laid out as `[source layer][factor][direction]`.
/// Used both for logits and for probabilities; closed entries are 0.
#[derive(Clone, Debug, PartialEq)]
pub struct BetaLogits {
    trellis: Trellis,
    values: Vec<[[f64; 3]; 4]>,
}

pub type BetaProbs = BetaLogits;

/// Graph flat index of `(layer, s, d)` in the `(layers, 3, 4, 1)` layout.
pub fn beta_flat_index(layer: usize, s: Downsample, d: Direction) -> usize {
    (layer * 3 + d.index()) * 4 + s.index()
}

impl BetaLogits {
    pub fn zeros(trellis: &Trellis) -> Self {
        Self {
            trellis: trellis.clone(),
            values: vec![[[0.0; 3]; 4]; trellis.num_layers()],
        }
    }

    /// Gaussian entries on open directions, zero elsewhere.
    pub fn random<R: Rng>(trellis: &Trellis, scale: f64, rng: &mut R) -> Self {
        let mut b = Self::zeros(trellis);
        let mask = b.mask();
        for (l, row) in b.values.iter_mut().enumerate() {
            for s in Downsample::ALL {
                for d in Direction::ALL {
                    if mask.is_open(l, s, d) {
                        row[s.index()][d.index()] = scale * rng.sample::<f64, _>(StandardNormal);
                    }
                }
            }
        }
        b
    }

    pub fn trellis(&self) -> &Trellis {
        &self.trellis
    }

    pub fn mask(&self) -> BetaMask {
        BetaMask::from_trellis(&self.trellis)
    }

    pub fn get(&self, layer: usize, s: Downsample) -> [f64; 3] {
        self.values[layer][s.index()]
    }

    pub fn set(&mut self, layer: usize, s: Downsample, v: [f64; 3]) {
        self.values[layer][s.index()] = v;
    }

    pub fn value(&self, layer: usize, s: Downsample, d: Direction) -> f64 {
        self.values[layer][s.index()][d.index()]
    }

    pub fn to_tensor(&self) -> Tensor4 {
        let l = self.values.len();
        let mut t = Tensor4::zeros(Shape4::new(l, 3, 4, 1));
        for (li, row) in self.values.iter().enumerate() {
            for s in Downsample::ALL {
                for d in Direction::ALL {
                    t.data_mut()[beta_flat_index(li, s, d)] = row[s.index()][d.index()];
                }
            }
        }
        t
    }

    /// Reads a `(layers, 3, 4, 1)` tensor; closed entries are dropped.
    pub fn from_tensor(trellis: &Trellis, t: &Tensor4) -> Result<Self> {
        let want = Shape4::new(trellis.num_layers(), 3, 4, 1);
        if t.shape() != want {
            return Err(Error::validation(format!(
                "beta tensor has shape {}, expected {want}",
                t.shape()
            )));
        }
        let mut b = Self::zeros(trellis);
        let mask = b.mask();
        for l in 0..trellis.num_layers() {
            for s in Downsample::ALL {
                for d in Direction::ALL {
                    if mask.is_open(l, s, d) {
                        b.values[l][s.index()][d.index()] = t.data()[beta_flat_index(l, s, d)];
                    }
                }
            }
        }
        Ok(b)
    }
}

/// Per source node softmax over its open directions; closed directions
/// are exactly 0.
pub fn normalize_beta(logits: &BetaLogits) -> Result<BetaProbs> {
    normalize_beta_with_mask(logits, &logits.mask())
}

pub(crate) fn normalize_beta_with_mask(logits: &BetaLogits, mask: &BetaMask) -> Result<BetaProbs> {
    let mut out = BetaLogits::zeros(&logits.trellis);
    for l in 0..logits.trellis.num_layers() {
        for s in Downsample::ALL {
            if !source_feasible(&logits.trellis, l, s) {
                continue;
            }
            let open = mask.group(l, s);
            if !open.iter().any(|&o| o) {
                return Err(Error::Internal(format!(
                    "beta[{l}][{}] has every direction masked",
                    s.factor()
                )));
            }
            let v = logits.get(l, s);
            let live: Vec<f64> = (0..3).filter(|&d| open[d]).map(|d| v[d]).collect();
            check_finite(&live, &format!("beta[{l}][{}]", s.factor()))?;
            let p = masked_softmax(&v, &open);
            out.set(l, s, [p[0], p[1], p[2]]);
        }
    }
    Ok(out)
}

/// Shannon entropy (nats) of one distribution, ignoring zero entries.
pub fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum()
}

/// Mean entropy over α groups.
pub fn alpha_entropy(probs: &AlphaProbs) -> f64 {
    probs.groups.iter().map(|g| entropy(g)).sum::<f64>() / probs.groups.len().max(1) as f64
}

/// Mean entropy over feasible β sources.
pub fn beta_entropy(probs: &BetaProbs) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for l in 0..probs.trellis.num_layers() {
        for s in Downsample::ALL {
            if source_feasible(&probs.trellis, l, s) {
                total += entropy(&probs.get(l, s));
                n += 1;
            }
        }
    }
    total / n.max(1) as f64
}

const SNAPSHOT_FORMAT: &str = "hiernas-arch-v1";

#[derive(Serialize, Deserialize)]
struct SnapshotFile {
    format: String,
    num_layers: usize,
    num_blocks: usize,
    convention: StartConvention,
    operators: Vec<String>,
    directions: Vec<String>,
    /// Feasible factors per layer, stem (layer 0) first.
    trellis: Vec<Vec<Downsample>>,
    alpha: IndexMap<String, Vec<f64>>,
    beta: IndexMap<String, Vec<Option<f64>>>,
}

/// α and β logits together with the trellis they live on.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchSnapshot {
    pub alpha: AlphaLogits,
    pub beta: BetaLogits,
}

impl ArchSnapshot {
    pub fn trellis(&self) -> &Trellis {
        self.beta.trellis()
    }

    pub fn to_json(&self) -> Result<String> {
        let trellis = self.trellis();
        let mut layers = vec![vec![Downsample::X4]];
        layers.extend((1..=trellis.num_layers()).map(|l| trellis.layer_nodes(l).to_vec()));
        let mut alpha = IndexMap::new();
        for b in 0..self.alpha.num_blocks() {
            for j in 0..b + 2 {
                alpha.insert(format!("alpha[{b}][{j}]"), self.alpha.get(b, j).to_vec());
            }
        }
        let mask = self.beta.mask();
        let mut beta = IndexMap::new();
        for l in 0..trellis.num_layers() {
            for s in Downsample::ALL {
                if source_feasible(trellis, l, s) {
                    let v = self.beta.get(l, s);
                    let row = Direction::ALL
                        .iter()
                        .map(|&d| mask.is_open(l, s, d).then_some(v[d.index()]))
                        .collect();
                    beta.insert(format!("beta[{l}][{}]", s.factor()), row);
                }
            }
        }
        let file = SnapshotFile {
            format: SNAPSHOT_FORMAT.into(),
            num_layers: trellis.num_layers(),
            num_blocks: self.alpha.num_blocks(),
            convention: trellis.convention(),
            operators: OperatorKind::ALL
                .iter()
                .map(|k| k.name().to_string())
                .collect(),
            directions: vec!["to_s/2".into(), "to_s".into(), "to_2s".into()],
            trellis: layers,
            alpha,
            beta,
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: SnapshotFile = serde_json::from_str(text)?;
        if f.format != SNAPSHOT_FORMAT {
            return Err(Error::validation(format!(
                "unknown snapshot format `{}`",
                f.format
            )));
        }
        let names: Vec<&str> = OperatorKind::ALL.iter().map(|k| k.name()).collect();
        if f.operators != names {
            return Err(Error::validation(
                "snapshot operator list does not match this build",
            ));
        }
        if f.num_blocks == 0 {
            return Err(Error::validation("snapshot has zero blocks"));
        }
        let trellis = Trellis::new(f.num_layers, f.convention)?;
        let mut expected = vec![vec![Downsample::X4]];
        expected.extend((1..=trellis.num_layers()).map(|l| trellis.layer_nodes(l).to_vec()));
        if f.trellis != expected {
            return Err(Error::validation(
                "snapshot trellis metadata disagrees with its layer count and convention",
            ));
        }
        let mut alpha = AlphaLogits::zeros(f.num_blocks);
        if f.alpha.len() != alpha.num_groups() {
            return Err(Error::validation(format!(
                "snapshot has {} alpha groups, expected {}",
                f.alpha.len(),
                alpha.num_groups()
            )));
        }
        for b in 0..f.num_blocks {
            for j in 0..b + 2 {
                let key = format!("alpha[{b}][{j}]");
                let v = f
                    .alpha
                    .get(&key)
                    .ok_or_else(|| Error::validation(format!("snapshot lacks `{key}`")))?;
                let row: [f64; NUM_OPS] = v.as_slice().try_into().map_err(|_| {
                    Error::validation(format!(
                        "`{key}` has {} entries, expected {NUM_OPS}",
                        v.len()
                    ))
                })?;
                *alpha.get_mut(b, j) = row;
            }
        }
        let mut beta = BetaLogits::zeros(&trellis);
        let mask = beta.mask();
        let mut seen = 0;
        for l in 0..trellis.num_layers() {
            for s in Downsample::ALL {
                if !source_feasible(&trellis, l, s) {
                    continue;
                }
                seen += 1;
                let key = format!("beta[{l}][{}]", s.factor());
                let v = f
                    .beta
                    .get(&key)
                    .ok_or_else(|| Error::validation(format!("snapshot lacks `{key}`")))?;
                if v.len() != 3 {
                    return Err(Error::validation(format!(
                        "`{key}` has {} entries, expected 3",
                        v.len()
                    )));
                }
                let mut row = [0.0; 3];
                for d in Direction::ALL {
                    match (mask.is_open(l, s, d), v[d.index()]) {
                        (true, Some(x)) => row[d.index()] = x,
                        (false, None) => {}
                        (true, None) => {
                            return Err(Error::validation(format!(
                                "`{key}` lacks an open direction"
                            )))
                        }
                        (false, Some(_)) => {
                            return Err(Error::validation(format!(
                                "`{key}` sets a direction that leaves the trellis"
                            )))
                        }
                    }
                }
                beta.set(l, s, row);
            }
        }
        if seen != f.beta.len() {
            return Err(Error::validation(
                "snapshot has beta entries for infeasible nodes",
            ));
        }
        Ok(Self { alpha, beta })
    }
}

/// Logit gap that makes a softmax exactly one-hot in double precision.
pub const ONE_HOT_GAP: f64 = 1e4;

impl ArchSnapshot {
    /// Logits whose softmax is exactly one-hot on `cell` and `path`.
    ///
    /// Unselected cell edges put their mass on `zero`; sources off the path
    /// keep to their own factor when they can.
    pub fn one_hot(cell: &CellGenotype, path: &NetworkPath) -> Result<Self> {
        let trellis = crate::search_space::build_trellis(path.len().max(1))?;
        crate::search_space::validate_path(path, &trellis).into_result()?;
        cell.validate(cell.num_blocks())?;
        let mut alpha = AlphaLogits::zeros(cell.num_blocks());
        for (b, blk) in cell.blocks.iter().enumerate() {
            for j in 0..b + 2 {
                let k = if j == blk.input1 {
                    blk.op1
                } else if j == blk.input2 {
                    blk.op2
                } else {
                    OperatorKind::Zero
                };
                let row = alpha.get_mut(b, j);
                row.iter_mut().for_each(|v| *v = -ONE_HOT_GAP);
                row[k.index()] = 0.0;
            }
        }
        let mut beta = BetaLogits::zeros(&trellis);
        let mask = beta.mask();
        for l in 0..trellis.num_layers() {
            for s in Downsample::ALL {
                if !source_feasible(&trellis, l, s) {
                    continue;
                }
                let on_path = if l == 0 {
                    true
                } else {
                    path.resolutions[l - 1] == s
                };
                let pick = if on_path {
                    Direction::between(s, path.resolutions[l]).expect("validated path")
                } else if mask.is_open(l, s, Direction::Same) {
                    Direction::Same
                } else {
                    *Direction::ALL
                        .iter()
                        .find(|&&d| mask.is_open(l, s, d))
                        .expect("feasible source has a move")
                };
                let mut row = [0.0; 3];
                for d in Direction::ALL {
                    if mask.is_open(l, s, d) {
                        row[d.index()] = if d == pick { 0.0 } else { -ONE_HOT_GAP };
                    }
                }
                beta.set(l, s, row);
            }
        }
        Ok(Self { alpha, beta })
    }
}
