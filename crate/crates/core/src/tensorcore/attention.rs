use serde::{Deserialize, Serialize};

use super::tape::{Segment, Tape, Var};
use super::tensor::Real;
use super::TensorError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub num_heads: usize,
}

impl AttentionConfig {
    pub fn new(model_dim: usize, num_heads: usize) -> Result<Self, TensorError> {
        let cfg = Self {
            model_dim,
            num_heads,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        if self.model_dim == 0 || self.num_heads == 0 || !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(TensorError::HeadsMismatch {
                model_dim: self.model_dim,
                num_heads: self.num_heads,
            });
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

/// Query/key/value/output projections of one attention block. All weights are
/// `[model_dim, model_dim]`, biases `[1, model_dim]`; heads are column slices.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Cross-attention: each row of `q_in` attends over the rows of `kv_in`
/// selected by its segment. Returns the output-projected heads, `[nq, d]`,
/// and the raw attention node (for reading weights back).
pub fn multi_head_attention<T: Real>(
    tape: &mut Tape<T>,
    q_in: Var,
    kv_in: Var,
    kv_segments: &[Segment],
    params: &AttentionParams,
    cfg: &AttentionConfig,
) -> Result<(Var, Var), TensorError> {
    cfg.validate()?;
    for x in [q_in, kv_in] {
        let s = tape.value(x).shape();
        if s[1] != cfg.model_dim {
            return Err(TensorError::ShapeMismatch {
                op: "multi_head_attention",
                left: s,
                right: [s[0], cfg.model_dim],
            });
        }
    }
    let q = tape.linear(q_in, params.wq, params.bq)?;
    let k = tape.linear(kv_in, params.wk, params.bk)?;
    let v = tape.linear(kv_in, params.wv, params.bv)?;
    let attn = tape.attention(q, k, v, kv_segments, cfg.num_heads)?;
    let out = tape.linear(attn, params.wo, params.bo)?;
    Ok((out, attn))
}

/// One segment per query row covering all of `kv`'s rows.
pub fn full_segments(n_queries: usize, n_keys: usize) -> Vec<Segment> {
    vec![Segment::new(0, n_keys); n_queries]
}
