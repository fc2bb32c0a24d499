use std::cell::RefCell;

use candle_core::Tensor;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TapeMode {
    Record,
    Replay,
}

#[derive(Debug)]
struct SelectionTape {
    mode: TapeMode,
    entries: Vec<Tensor>,
    cursor: usize,
}

/// Per-call forward context: train/eval mode plus an optional selection tape.
///
/// The tape records the outcome of every piecewise selection (ReLU masks,
/// channel argmax) during one forward pass and can replay those outcomes in
/// later passes. Replaying turns the network into a smooth function of its
/// parameters around the recorded point, which is what a finite-difference
/// gradient check needs.
#[derive(Debug)]
pub struct Pass {
    train: bool,
    tape: Option<RefCell<SelectionTape>>,
}

impl Pass {
    pub fn train() -> Self {
        Self {
            train: true,
            tape: None,
        }
    }

    pub fn eval() -> Self {
        Self {
            train: false,
            tape: None,
        }
    }

    pub fn recording(train: bool) -> Self {
        Self {
            train,
            tape: Some(RefCell::new(SelectionTape {
                mode: TapeMode::Record,
                entries: Vec::new(),
                cursor: 0,
            })),
        }
    }

    /// A pass that replays the selections captured by a recording pass.
    pub fn replay_of(recorded: &Pass) -> Result<Self> {
        let tape = recorded
            .tape
            .as_ref()
            .ok_or_else(|| Error::Contract("pass has no selection tape".into()))?
            .borrow();
        Ok(Self {
            train: recorded.train,
            tape: Some(RefCell::new(SelectionTape {
                mode: TapeMode::Replay,
                entries: tape.entries.clone(),
                cursor: 0,
            })),
        })
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    /// Number of selections recorded (or still to replay) on the tape.
    pub fn selections(&self) -> usize {
        self.tape.as_ref().map_or(0, |t| t.borrow().entries.len())
    }

    /// Rewinds a replay tape so the same pass can drive another forward.
    pub fn rewind(&self) {
        if let Some(tape) = &self.tape {
            tape.borrow_mut().cursor = 0;
        }
    }

    fn next_replay(&self, tape: &mut SelectionTape, like: &Tensor) -> Result<Tensor> {
        let entry = tape
            .entries
            .get(tape.cursor)
            .ok_or_else(|| Error::Contract("selection tape exhausted".into()))?
            .clone();
        tape.cursor += 1;
        if entry.dims()[0] != like.dims()[0] {
            return Err(Error::Contract("selection tape out of sync".into()));
        }
        Ok(entry)
    }

    pub fn relu(&self, x: &Tensor) -> Result<Tensor> {
        match &self.tape {
            None => Ok(x.relu()?),
            Some(cell) => {
                let mut tape = cell.borrow_mut();
                match tape.mode {
                    TapeMode::Record => {
                        tape.entries.push(x.gt(0.0)?.to_dtype(x.dtype())?);
                        Ok(x.relu()?)
                    }
                    TapeMode::Replay => {
                        let mask = self.next_replay(&mut tape, x)?;
                        Ok((x * mask)?)
                    }
                }
            }
        }
    }

    /// Max over `dim`, keeping the dimension. The gradient reaches exactly one
    /// element per reduced slice; candle's own `max` backward credits every tied
    /// element, which double counts on upsampled maps.
    pub fn max_keepdim(&self, x: &Tensor, dim: usize) -> Result<Tensor> {
        let x = x.contiguous()?;
        let idx = match &self.tape {
            None => x.argmax_keepdim(dim)?,
            Some(cell) => {
                let mut tape = cell.borrow_mut();
                match tape.mode {
                    TapeMode::Record => {
                        let idx = x.argmax_keepdim(dim)?;
                        tape.entries.push(idx.clone());
                        idx
                    }
                    TapeMode::Replay => self.next_replay(&mut tape, &x)?,
                }
            }
        };
        Ok(x.gather(&idx, dim)?)
    }
}
