use std::collections::HashMap;
use std::io::{Read, Write};

use crate::tensor::{read_checkpoint, write_checkpoint, DType, Tape, Tensor, Var};
use crate::{Error, Result};

/// Named parameter tensors in creation order.
///
/// Trainable tensors are the optimizer's concern; the rest (batch-norm running
/// statistics) are updated from batch statistics and saved alongside.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    trainable: Vec<bool>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor, trainable: bool) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let i = self.names.len();
        self.index.insert(name.clone(), i);
        self.names.push(name);
        self.tensors.push(t);
        self.trainable.push(trainable);
        i
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|i| &self.tensors[i])
    }

    pub fn is_trainable(&self, i: usize) -> bool {
        self.trainable[i]
    }

    /// Indices of trainable tensors, in creation order.
    pub fn trainable_ids(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.trainable[i]).collect()
    }

    /// Mutable buffers of the trainable tensors, in [`Self::trainable_ids`] order.
    pub fn trainable_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.tensors
            .iter_mut()
            .zip(&self.trainable)
            .filter(|(_, &t)| t)
            .map(|(t, _)| t.data_mut())
            .collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.tensors
            .iter()
            .zip(&self.trainable)
            .filter(|(_, &t)| t)
            .map(|(t, _)| t.numel())
            .sum()
    }

    /// Puts every tensor on `tape`: trainable ones as leaves when `track` is
    /// set, everything else as constants.
    pub fn bind(&self, tape: &mut Tape, track: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .zip(&self.trainable)
            .map(|(t, &tr)| {
                if tr && track {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }

    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        let entries: Vec<(&str, &Tensor)> = self.names.iter().map(String::as_str).zip(&self.tensors).collect();
        write_checkpoint(w, &entries, DType::F64)
    }

    /// Loads values into an already-shaped store; names and shapes must match.
    pub fn load<R: Read>(&mut self, r: R) -> Result<()> {
        let entries = read_checkpoint(r)?;
        if entries.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model expects {}",
                entries.len(),
                self.len()
            )));
        }
        for (name, t) in entries {
            let i = self
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name:?}")))?;
            if t.shape() != self.tensors[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    self.tensors[i].shape()
                )));
            }
            self.tensors[i] = t;
        }
        Ok(())
    }
}
