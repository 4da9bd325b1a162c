//! Discretisation of α and β: greedy top-2 cell decoding and Viterbi path
//! decoding, plus an exhaustive path oracle.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::relaxation::{
    normalize_alpha, normalize_beta, source_feasible, AlphaProbs, ArchSnapshot, BetaProbs,
};
use crate::search_space::{
    enumerate_paths, BlockGenotype, CellGenotype, Direction, Downsample, GenotypeFile, NetworkPath,
    OperatorKind, Trellis, NUM_OPS,
};

const SUM_TOLERANCE: f64 = 1e-9;

/// Description of the decoding rules, recorded with every decoded result.
pub const DECODE_SETTINGS: &str =
    "cell: top-2 distinct inputs by max non-zero weight, ties to lower input then operator order; \
     path: Viterbi over log beta from a factor-4 stem, ties to the lower factor";

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
        return Err(Error::validation(format!(
            "{what} has entries outside [0, 1]"
        )));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::validation(format!("{what} sums to {sum}, not 1")));
    }
    Ok(())
}

/// Index and value of the first maximum among non-`zero` operators.
fn best_nonzero_op(p: &[f64; NUM_OPS]) -> (OperatorKind, f64) {
    let mut best = (OperatorKind::ALL[0], f64::NEG_INFINITY);
    for k in OperatorKind::ALL {
        if k != OperatorKind::Zero && p[k.index()] > best.1 {
            best = (k, p[k.index()]);
        }
    }
    best
}

/// Keeps, per block, the two inputs with the largest strength (the maximum
/// weight over non-`zero` operators) and each input's strongest non-`zero`
/// operator. Inputs are reported in ascending order.
pub fn decode_cell(alpha: &AlphaProbs, num_blocks: usize) -> Result<CellGenotype> {
    if num_blocks == 0 {
        return Err(Error::validation("a cell needs at least one block"));
    }
    if alpha.num_blocks() != num_blocks {
        return Err(Error::validation(format!(
            "alpha covers {} blocks, expected {num_blocks}",
            alpha.num_blocks()
        )));
    }
    let mut blocks = Vec::with_capacity(num_blocks);
    for b in 0..num_blocks {
        let mut edges: Vec<(usize, OperatorKind, f64)> = (0..b + 2)
            .map(|j| {
                let p = alpha.get(b, j);
                check_distribution(p, &format!("alpha[{b}][{j}]"))?;
                let (k, strength) = best_nonzero_op(p);
                Ok((j, k, strength))
            })
            .collect::<Result<_>>()?;
        // stable sort keeps lower inputs first among equal strengths
        edges.sort_by(|a, b| b.2.total_cmp(&a.2));
        let mut kept = [edges[0], edges[1]];
        kept.sort_by_key(|e| e.0);
        blocks.push(BlockGenotype {
            input1: kept[0].0,
            input2: kept[1].0,
            op1: kept[0].1,
            op2: kept[1].1,
        });
    }
    Ok(CellGenotype { blocks })
}

fn check_beta(beta: &BetaProbs) -> Result<()> {
    let trellis = beta.trellis();
    let mask = beta.mask();
    for l in 0..trellis.num_layers() {
        for s in Downsample::ALL {
            let v = beta.get(l, s);
            if !source_feasible(trellis, l, s) {
                continue;
            }
            for d in Direction::ALL {
                if !mask.is_open(l, s, d) && v[d.index()] != 0.0 {
                    return Err(Error::validation(format!(
                        "beta[{l}][{}] puts mass on a closed direction",
                        s.factor()
                    )));
                }
            }
            check_distribution(&v, &format!("beta[{l}][{}]", s.factor()))?;
        }
    }
    Ok(())
}

fn move_log_prob(beta: &BetaProbs, layer: usize, from: Downsample, to: Downsample) -> f64 {
    let d = Direction::between(from, to).expect("successors are neighbours");
    beta.value(layer, from, d).ln()
}

/// Successors of the state at `layer` (0 is the stem).
fn next_nodes(trellis: &Trellis, layer: usize, s: Downsample) -> Vec<Downsample> {
    if layer == 0 {
        trellis.layer_nodes(1).to_vec()
    } else {
        trellis.successors(layer, s)
    }
}

/// Highest-probability path, where a path's probability is the product of
/// the outgoing β of each node it leaves, starting from the factor-4 stem.
/// Among equal scores the lexicographically smallest factor sequence wins.
pub fn decode_path_viterbi(beta: &BetaProbs) -> Result<NetworkPath> {
    check_beta(beta)?;
    let trellis = beta.trellis();
    let layers = trellis.num_layers();
    // best[l][s]: best log-probability of a suffix leaving (l, s)
    let mut best = vec![[f64::NEG_INFINITY; 4]; layers + 1];
    for &s in trellis.layer_nodes(layers) {
        best[layers][s.index()] = 0.0;
    }
    for l in (0..layers).rev() {
        let sources: Vec<Downsample> = if l == 0 {
            vec![Downsample::X4]
        } else {
            trellis.layer_nodes(l).to_vec()
        };
        for s in sources {
            best[l][s.index()] = next_nodes(trellis, l, s)
                .into_iter()
                .map(|t| move_log_prob(beta, l, s, t) + best[l + 1][t.index()])
                .fold(f64::NEG_INFINITY, f64::max);
        }
    }
    let mut cur = Downsample::X4;
    let mut path = Vec::with_capacity(layers);
    for l in 0..layers {
        let target = best[l][cur.index()];
        let next = next_nodes(trellis, l, cur)
            .into_iter()
            .find(|&t| move_log_prob(beta, l, cur, t) + best[l + 1][t.index()] == target)
            .ok_or_else(|| Error::Internal("Viterbi backtrace lost the optimum".into()))?;
        path.push(next);
        cur = next;
    }
    Ok(NetworkPath::new(path))
}

/// Log-probability of `path` summed from the last move backwards, the same
/// association order the Viterbi recursion uses.
pub fn path_log_prob(beta: &BetaProbs, path: &NetworkPath) -> f64 {
    let mut total = 0.0;
    for l in (0..path.len()).rev() {
        let from = if l == 0 {
            Downsample::X4
        } else {
            path.resolutions[l - 1]
        };
        let to = path.resolutions[l];
        total += match Direction::between(from, to) {
            Some(d) => beta.value(l, from, d).ln(),
            None => f64::NEG_INFINITY,
        };
    }
    total
}

/// Exhaustive argmax over every path of the trellis; the first path in
/// lexicographic order wins ties.
pub fn brute_force_best_path(beta: &BetaProbs) -> Result<NetworkPath> {
    check_beta(beta)?;
    let mut best: Option<(f64, NetworkPath)> = None;
    for p in enumerate_paths(beta.trellis())? {
        let score = path_log_prob(beta, &p);
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, p));
        }
    }
    best.map(|(_, p)| p)
        .ok_or_else(|| Error::Internal("trellis has no paths".into()))
}

/// Where a decoded architecture came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// SHA-256 of the canonical snapshot JSON.
    pub snapshot_sha256: String,
    pub settings: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodedArchitecture {
    pub cell: CellGenotype,
    pub path: NetworkPath,
    pub provenance: Provenance,
}

impl DecodedArchitecture {
    pub fn genotype_file(&self) -> GenotypeFile {
        GenotypeFile::new(&self.cell, &self.path)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Normalises and decodes a snapshot.
pub fn decode(snapshot: &ArchSnapshot) -> Result<DecodedArchitecture> {
    let alpha = normalize_alpha(&snapshot.alpha)?;
    let beta = normalize_beta(&snapshot.beta)?;
    let cell = decode_cell(&alpha, snapshot.alpha.num_blocks())?;
    let path = decode_path_viterbi(&beta)?;
    Ok(DecodedArchitecture {
        cell,
        path,
        provenance: Provenance {
            snapshot_sha256: sha256_hex(snapshot.to_json()?.as_bytes()),
            settings: DECODE_SETTINGS.into(),
        },
    })
}
