use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    None,
    /// Query `i` may attend to memory positions `j <= i`.
    Causal,
    /// Causal, further restricted to the `window` most recent positions
    /// `i - window + 1 ..= i`.
    Local {
        window: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskShape {
    pub kind: MaskKind,
    pub batch: usize,
    pub heads: usize,
    pub queries: usize,
    pub memory: usize,
}

impl MaskShape {
    pub fn new(kind: MaskKind, batch: usize, heads: usize, queries: usize, memory: usize) -> Self {
        MaskShape {
            kind,
            batch,
            heads,
            queries,
            memory,
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.batch, self.heads, self.queries, self.memory]
    }

    pub fn validate(&self) -> Result<()> {
        if let MaskKind::Local { window: 0 } = self.kind {
            return Err(Error::Config(
                "local attention window must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Whether query `i` may attend to memory position `j`.
    pub fn allows(&self, i: usize, j: usize) -> bool {
        match self.kind {
            MaskKind::None => true,
            MaskKind::Causal => j <= i,
            MaskKind::Local { window } => j <= i && j + window > i,
        }
    }
}

/// Materializes the additive mask at its full `[b, h, n, m]` shape: `0`
/// where attention is legal and `-inf` elsewhere.
pub fn build_mask(sig: &MaskShape) -> Result<Tensor> {
    sig.validate()?;
    let (n, m) = (sig.queries, sig.memory);
    let mut plane = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            plane.push(if sig.allows(i, j) {
                0.0
            } else {
                f64::NEG_INFINITY
            });
        }
    }
    let copies = sig.batch * sig.heads;
    let mut data = Vec::with_capacity(copies * plane.len());
    for _ in 0..copies {
        data.extend_from_slice(&plane);
    }
    Tensor::new(sig.shape().to_vec(), data)
}
