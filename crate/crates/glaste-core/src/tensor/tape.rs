//! Operation tape and reverse traversal.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

use super::{Node, Scalar, Tensor};

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Backward rule: given the gradient flowing into an output, produce the
/// gradient contribution for each parent (None for untracked parents).
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T]) -> Vec<Option<Vec<T>>> + Send>;

pub(crate) struct Record<T> {
    pub(crate) parents: Vec<Option<usize>>,
    pub(crate) backward: BackwardFn<T>,
}

/// Ordered list of operation records. Ids are assigned in creation order, so
/// every parent precedes its children and one reverse sweep visits each
/// record exactly once. A tape is confined to a single training thread.
pub struct Tape<T> {
    id: u64,
    recording: bool,
    records: Vec<Record<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            recording: true,
            records: Vec::new(),
        }
    }

    /// A tape that never records; forwards still compute normally.
    pub fn inference() -> Self {
        let mut t = Tape::new();
        t.recording = false;
        t
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Register a tensor as a tracked leaf (parameter or input that should
    /// receive a gradient). Shares the underlying buffer.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Tensor<T> {
        if !self.recording {
            return t.detach();
        }
        let id = self.push(Record {
            parents: vec![],
            backward: Box::new(|_| vec![]),
        });
        Tensor::share(t, Some(Node { tape: self.id, id }))
    }

    /// Register a tensor as an untracked constant on this tape.
    pub fn constant(&self, t: &Tensor<T>) -> Tensor<T> {
        t.detach()
    }

    pub(crate) fn push(&mut self, record: Record<T>) -> usize {
        self.records.push(record);
        self.records.len() - 1
    }

    pub(crate) fn parent_id(&self, t: &Tensor<T>) -> Option<usize> {
        match t.node() {
            Some(node) => {
                assert_eq!(node.tape, self.id, "tensor belongs to a different tape");
                Some(node.id)
            }
            None => None,
        }
    }

    /// Wrap freshly computed output data in a tensor, recording `backward`
    /// when the tape is live and at least one parent is tracked.
    pub(crate) fn emit(
        &mut self,
        data: Vec<T>,
        shape: Vec<usize>,
        parents: Vec<Option<usize>>,
        backward: BackwardFn<T>,
    ) -> Tensor<T> {
        let out = Tensor::from_vec(data, shape);
        if self.recording && parents.iter().any(Option::is_some) {
            let id = self.push(Record { parents, backward });
            out.with_node(Some(Node { tape: self.id, id }))
        } else {
            out
        }
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate by summation
    /// across fan-out. The tape is left intact, so several backward passes
    /// (e.g. discriminator then generator) may run on one tape.
    pub fn backward(&self, loss: &Tensor<T>) -> Result<Gradients<T>> {
        if !loss.is_scalar() {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let node = loss.node().ok_or_else(|| {
            Error::contract("backward on a tensor with no graph node".to_string())
        })?;
        assert_eq!(node.tape, self.id, "loss belongs to a different tape");

        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.records.len()];
        grads[node.id] = Some(vec![T::one()]);

        for id in (0..=node.id).rev() {
            let Some(dy) = grads[id].take() else { continue };
            let record = &self.records[id];
            let parent_grads = (record.backward)(&dy);
            debug_assert_eq!(parent_grads.len(), record.parents.len());
            for (slot, pg) in record.parents.iter().zip(parent_grads) {
                let (Some(pid), Some(pg)) = (slot, pg) else { continue };
                match &mut grads[*pid] {
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(pg.iter()) {
                            *a += *g;
                        }
                    }
                    slot_ref => *slot_ref = Some(pg),
                }
            }
            // Keep leaf gradients retrievable after the sweep.
            if record.parents.is_empty() {
                grads[id] = Some(dy);
            }
        }

        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Tape::new()
    }
}

/// Result of one backward sweep: gradient buffers keyed by node id.
pub struct Gradients<T> {
    tape: u64,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the swept loss with respect to `t`, if `t` is tracked and
    /// was reached.
    pub fn get(&self, t: &Tensor<T>) -> Option<Tensor<T>> {
        let node = t.node()?;
        assert_eq!(node.tape, self.tape, "tensor belongs to a different tape");
        self.grads
            .get(node.id)?
            .as_ref()
            .map(|g| Tensor::from_vec(g.clone(), t.shape().to_vec()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fan_out_accumulates_by_summation() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::from_vec(vec![3.0], vec![1]));
        let y = tape.add(&x, &x).unwrap();
        let grads = tape.backward(&y).unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::from_vec(vec![1.0, 2.0], vec![2]));
        let y = tape.scale(&x, 2.0);
        assert!(tape.backward(&y).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::from_vec(vec![2.0], vec![1]));
        let c = Tensor::from_vec(vec![5.0], vec![1]);
        let y = tape.mul(&x, &c).unwrap();
        let loss = tape.sum_all(&y);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[5.0]);
        assert!(grads.get(&c).is_none());
    }

    #[test]
    fn inference_tape_records_nothing() {
        let mut tape = Tape::<f32>::inference();
        let x = tape.leaf(&Tensor::from_vec(vec![1.0, -1.0], vec![2]));
        let y = tape.relu(&x);
        assert!(y.node().is_none());
        assert!(tape.is_empty());
    }
}
