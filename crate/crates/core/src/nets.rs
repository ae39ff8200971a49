//! Small building blocks shared by the retrieval encoders and the classifier.

use choreo_tensor::{Bound, Conv1d, Dense, Graph, Init, ParamStore, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};

/// Two "same"-padded temporal convolutions with GELU, a mean over time and
/// a dense projection: `[B, T, C] → [B, D]`.
#[derive(Clone, Debug)]
pub struct TemporalEncoder {
    pub conv: [Conv1d; 2],
    pub proj: Dense,
}

impl TemporalEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        width: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(TemporalEncoder {
            conv: [
                Conv1d::new(store, &format!("{name}.conv0"), 5, input, width, Init::LeCun, rng)?,
                Conv1d::new(store, &format!("{name}.conv1"), 5, width, width, Init::LeCun, rng)?,
            ],
            proj: Dense::new(store, &format!("{name}.proj"), width, output, Init::LeCun, rng)?,
        })
    }

    pub fn load(store: &ParamStore, name: &str) -> Result<Self> {
        Ok(TemporalEncoder {
            conv: [
                Conv1d::load(store, &format!("{name}.conv0"))?,
                Conv1d::load(store, &format!("{name}.conv1"))?,
            ],
            proj: Dense::load(store, &format!("{name}.proj"))?,
        })
    }

    pub fn input(&self) -> usize {
        self.conv[0].input
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for c in &self.conv {
            h = c.forward(g, p, h)?;
            h = g.gelu(h)?;
        }
        let pooled = g.mean_axis(h, 1)?;
        Ok(self.proj.forward(g, p, pooled)?)
    }
}

/// Stacks equally shaped tensors along a new leading axis.
pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
    let first = items
        .first()
        .ok_or_else(|| Error::contract("cannot stack an empty list"))?;
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    Ok(Tensor::concat(items, 0)?.reshape(shape)?)
}
