use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Shape4, Tensor4};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which optimizer owns a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Weights,
    Architecture,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub steps: u64,
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    group: ParamGroup,
    value: Tensor4,
    grad: Vec<f64>,
    momentum: Option<Vec<f64>>,
    adam: Option<AdamState>,
}

/// Named parameters with their gradients and optimizer state.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    params: Vec<CheckpointEntry>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    group: ParamGroup,
    shape: [usize; 4],
    offset: usize,
}

const CHECKPOINT_FORMAT: &str = "hiernas-params-v1";

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        value: Tensor4,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("parameter `{name}` already exists")));
        }
        let id = self.entries.len();
        let numel = value.shape().numel();
        self.index.insert(name.clone(), id);
        self.entries.push(Entry {
            name,
            group,
            value,
            grad: vec![0.0; numel],
            momentum: None,
            adam: None,
        });
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn expect_id(&self, name: &str) -> Result<ParamId> {
        self.id(name)
            .ok_or_else(|| Error::Internal(format!("missing parameter `{name}`")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn ids_in(&self, group: ParamGroup) -> impl Iterator<Item = ParamId> + '_ {
        self.entries
            .iter()
            .enumerate()
            .filter(move |(_, e)| e.group == group)
            .map(|(i, _)| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.entries[id.0].group
    }

    pub fn value(&self, id: ParamId) -> &Tensor4 {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor4 {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.entries[id.0].grad
    }

    /// Value, gradient and the momentum buffer (created on first use).
    pub(crate) fn momentum_parts(&mut self, id: ParamId) -> (&mut [f64], &[f64], &mut Vec<f64>) {
        let e = &mut self.entries[id.0];
        let n = e.grad.len();
        let buf = e.momentum.get_or_insert_with(|| vec![0.0; n]);
        (e.value.data_mut(), &e.grad, buf)
    }

    pub(crate) fn adam_parts(&mut self, id: ParamId) -> (&mut [f64], &[f64], &mut AdamState) {
        let e = &mut self.entries[id.0];
        let n = e.grad.len();
        let st = e.adam.get_or_insert_with(|| AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            steps: 0,
        });
        (e.value.data_mut(), &e.grad, st)
    }

    pub fn momentum(&self, id: ParamId) -> Option<&[f64]> {
        self.entries[id.0].momentum.as_deref()
    }

    pub fn adam_state(&self, id: ParamId) -> Option<&AdamState> {
        self.entries[id.0].adam.as_ref()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn numel(&self, group: Option<ParamGroup>) -> usize {
        self.entries
            .iter()
            .filter(|e| group.is_none_or(|g| e.group == g))
            .map(|e| e.value.shape().numel())
            .sum()
    }

    /// Global L2 norm of the gradients in `group`.
    pub fn grad_norm(&self, group: ParamGroup) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.group == group)
            .flat_map(|e| e.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<()> {
        let mut offset = 0;
        let params = self
            .entries
            .iter()
            .map(|e| {
                let entry = CheckpointEntry {
                    name: e.name.clone(),
                    group: e.group,
                    shape: e.value.shape().to_array(),
                    offset,
                };
                offset += e.value.shape().numel();
                entry
            })
            .collect();
        let header = serde_json::to_vec(&CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            params,
        })?;
        out.write_all(&(header.len() as u64).to_le_bytes())?;
        out.write_all(&header)?;
        for e in &self.entries {
            for v in e.value.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads a checkpoint into a fresh store; optimizer state is not persisted.
    pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Self> {
        let mut len = [0u8; 8];
        input.read_exact(&mut len)?;
        let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
        input.read_exact(&mut header)?;
        let header: CheckpointHeader = serde_json::from_slice(&header)?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::validation(format!(
                "unknown checkpoint format `{}`",
                header.format
            )));
        }
        let mut raw = Vec::new();
        input.read_to_end(&mut raw)?;
        if raw.len() % 8 != 0 {
            return Err(Error::validation(
                "checkpoint payload is not a whole number of doubles",
            ));
        }
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut store = ParamStore::new();
        for p in header.params {
            let [n, c, h, w] = p.shape;
            let shape = Shape4::new(n, c, h, w);
            let end = p.offset + shape.numel();
            let slice = values.get(p.offset..end).ok_or_else(|| {
                Error::validation(format!("parameter `{}` runs past the payload", p.name))
            })?;
            store.insert(p.name, p.group, Tensor4::from_vec(shape, slice.to_vec())?)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_checkpoint(std::io::BufWriter::new(file))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_checkpoint(std::io::BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.insert("a", ParamGroup::Weights, Tensor4::zeros(Shape4::scalar()))
            .unwrap();
        assert!(s
            .insert("a", ParamGroup::Weights, Tensor4::zeros(Shape4::scalar()))
            .is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut s = ParamStore::new();
        s.insert(
            "w",
            ParamGroup::Weights,
            Tensor4::from_vec(Shape4::new(1, 2, 1, 2), vec![1.0, -2.5, 3.25, 1e-300]).unwrap(),
        )
        .unwrap();
        s.insert("alpha", ParamGroup::Architecture, Tensor4::scalar(0.125))
            .unwrap();
        let mut buf = Vec::new();
        s.write_checkpoint(&mut buf).unwrap();
        let back = ParamStore::read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back.len(), 2);
        for id in s.ids() {
            let other = back.expect_id(s.name(id)).unwrap();
            assert_eq!(back.value(other), s.value(id));
            assert_eq!(back.group(other), s.group(id));
        }
        // header length prefix, then JSON, then 5 doubles
        let hlen = u64::from_le_bytes(buf[..8].try_into().unwrap()) as usize;
        assert_eq!(buf.len(), 8 + hlen + 5 * 8);
    }
}
