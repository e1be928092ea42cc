//! Pre-norm transformer blocks shared by the vision encoder and the
//! language decoder. Parameters are fetched from the store by prefix so the
//! same code serves both components.

use crate::error::Result;
use crate::params::{seeded_uniform, ParamGroup, ParameterStore};
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// MLP hidden width multiplier inside every block.
pub const MLP_RATIO: usize = 4;

/// Multi-head attention over `x_norm [T×D]`, heads splitting D evenly.
fn attention_sublayer(
    tape: &Tape,
    x_norm: &Tensor,
    store: &ParameterStore,
    prefix: &str,
    heads: usize,
    causal: bool,
) -> Result<Tensor> {
    let (_, d) = x_norm.dims2()?;
    let dh = d / heads;
    let q = tape.add_bias(
        &tape.matmul(x_norm, &store.get(&format!("{prefix}.attn.wq"))?)?,
        &store.get(&format!("{prefix}.attn.bq"))?,
    )?;
    let k = tape.add_bias(
        &tape.matmul(x_norm, &store.get(&format!("{prefix}.attn.wk"))?)?,
        &store.get(&format!("{prefix}.attn.bk"))?,
    )?;
    let v = tape.add_bias(
        &tape.matmul(x_norm, &store.get(&format!("{prefix}.attn.wv"))?)?,
        &store.get(&format!("{prefix}.attn.bv"))?,
    )?;
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(&q, h * dh, dh)?;
        let kh = tape.slice_cols(&k, h * dh, dh)?;
        let vh = tape.slice_cols(&v, h * dh, dh)?;
        head_outs.push(tape.attention(&qh, &kh, &vh, causal)?);
    }
    let merged = if heads == 1 {
        head_outs.pop().expect("one head")
    } else {
        let refs: Vec<&Tensor> = head_outs.iter().collect();
        tape.concat_cols(&refs)?
    };
    tape.add_bias(
        &tape.matmul(&merged, &store.get(&format!("{prefix}.attn.wo"))?)?,
        &store.get(&format!("{prefix}.attn.bo"))?,
    )
}

fn mlp_sublayer(tape: &Tape, x_norm: &Tensor, store: &ParameterStore, prefix: &str) -> Result<Tensor> {
    let h = tape.add_bias(
        &tape.matmul(x_norm, &store.get(&format!("{prefix}.mlp.w1"))?)?,
        &store.get(&format!("{prefix}.mlp.b1"))?,
    )?;
    let h = tape.gelu(&h)?;
    tape.add_bias(
        &tape.matmul(&h, &store.get(&format!("{prefix}.mlp.w2"))?)?,
        &store.get(&format!("{prefix}.mlp.b2"))?,
    )
}

/// One pre-norm block: `x + attn(ln1(x))`, then `x + mlp(ln2(x))`.
pub fn block_forward(
    tape: &Tape,
    x: &Tensor,
    store: &ParameterStore,
    prefix: &str,
    heads: usize,
    causal: bool,
) -> Result<Tensor> {
    let a = tape.layer_norm(
        x,
        &store.get(&format!("{prefix}.ln1.gamma"))?,
        &store.get(&format!("{prefix}.ln1.beta"))?,
        LAYER_NORM_EPS,
    )?;
    let attn = attention_sublayer(tape, &a, store, prefix, heads, causal)?;
    let x = tape.add(x, &attn)?;
    let b = tape.layer_norm(
        &x,
        &store.get(&format!("{prefix}.ln2.gamma"))?,
        &store.get(&format!("{prefix}.ln2.beta"))?,
        LAYER_NORM_EPS,
    )?;
    let mlp = mlp_sublayer(tape, &b, store, prefix)?;
    tape.add(&x, &mlp)
}

/// Insert all parameters of one block under `prefix`.
pub fn init_block(
    store: &mut ParameterStore,
    prefix: &str,
    group: ParamGroup,
    dim: usize,
    seed: u64,
) -> Result<()> {
    let hidden = MLP_RATIO * dim;
    for proj in ["wq", "wk", "wv", "wo"] {
        let name = format!("{prefix}.attn.{proj}");
        store.insert(&name, group, vec![dim, dim], seeded_uniform(seed, &name, dim * dim, dim))?;
    }
    for bias in ["bq", "bk", "bv", "bo"] {
        store.insert(&format!("{prefix}.attn.{bias}"), group, vec![dim], vec![0.0; dim])?;
    }
    for ln in ["ln1", "ln2"] {
        store.insert(&format!("{prefix}.{ln}.gamma"), group, vec![dim], vec![1.0; dim])?;
        store.insert(&format!("{prefix}.{ln}.beta"), group, vec![dim], vec![0.0; dim])?;
    }
    let w1 = format!("{prefix}.mlp.w1");
    store.insert(&w1, group, vec![dim, hidden], seeded_uniform(seed, &w1, dim * hidden, dim))?;
    store.insert(&format!("{prefix}.mlp.b1"), group, vec![hidden], vec![0.0; hidden])?;
    let w2 = format!("{prefix}.mlp.w2");
    store.insert(&w2, group, vec![hidden, dim], seeded_uniform(seed, &w2, hidden * dim, hidden))?;
    store.insert(&format!("{prefix}.mlp.b2"), group, vec![dim], vec![0.0; dim])?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Precision;

    #[test]
    fn block_preserves_shape_and_is_deterministic() {
        let mut store = ParameterStore::new(Precision::F64);
        init_block(&mut store, "vision.block0", ParamGroup::Vision, 8, 3).unwrap();
        let tape = Tape::new(Precision::F64);
        let x = Tensor::new(vec![5, 8], (0..40).map(|i| (i as f64) * 0.01 - 0.2).collect()).unwrap();
        let y1 = block_forward(&tape, &x, &store, "vision.block0", 2, false).unwrap();
        let y2 = block_forward(&tape, &x, &store, "vision.block0", 2, false).unwrap();
        assert_eq!(y1.shape(), &[5, 8]);
        assert_eq!(y1.data(), y2.data());
    }
}
