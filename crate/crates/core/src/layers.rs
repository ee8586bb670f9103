//! Transformer building blocks over the tape.
//!
//! Parameters live in a [`ParamStore`] under dotted names; a [`Binder`]
//! decides whether a forward pass treats them as trainable or frozen.

use crate::error::Result;
use crate::numerics::{AttnDims, Graph, ParamStore, Scalar, Var};

#[derive(Clone, Copy)]
pub struct Binder<'a, T> {
    pub store: &'a ParamStore<T>,
    pub trainable: bool,
}

impl<'a, T: Scalar> Binder<'a, T> {
    pub fn trainable(store: &'a ParamStore<T>) -> Self {
        Self { store, trainable: true }
    }

    pub fn frozen(store: &'a ParamStore<T>) -> Self {
        Self { store, trainable: false }
    }

    pub fn get(&self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        g.param(self.store, name, self.trainable)
    }
}

pub fn init_linear<T: Scalar>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, std: f64) -> Result<()> {
    if std == 0.0 {
        store.init_const(&format!("{name}.w"), &[fan_in, fan_out], 0.0)?;
    } else {
        store.init_normal(&format!("{name}.w"), &[fan_in, fan_out], std)?;
    }
    store.init_const(&format!("{name}.b"), &[fan_out], 0.0)
}

pub fn init_linear_default<T: Scalar>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
    init_linear(store, name, fan_in, fan_out, 1.0 / (fan_in as f64).sqrt())
}

pub fn linear<T: Scalar>(g: &mut Graph<T>, p: &Binder<T>, name: &str, x: Var) -> Result<Var> {
    let w = p.get(g, &format!("{name}.w"))?;
    let b = p.get(g, &format!("{name}.b"))?;
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

pub fn init_layer_norm<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) -> Result<()> {
    store.init_const(&format!("{name}.gamma"), &[width], 1.0)?;
    store.init_const(&format!("{name}.beta"), &[width], 0.0)
}

pub fn layer_norm<T: Scalar>(g: &mut Graph<T>, p: &Binder<T>, name: &str, x: Var) -> Result<Var> {
    let gamma = p.get(g, &format!("{name}.gamma"))?;
    let beta = p.get(g, &format!("{name}.beta"))?;
    g.layer_norm(x, gamma, beta, T::c(1e-5))
}

/// Row indices `[0, len)` repeated `batch` times, for positional lookups.
pub fn position_index(batch: usize, len: usize) -> Vec<usize> {
    (0..batch).flat_map(|_| 0..len).collect()
}

#[derive(Clone, Copy, Debug)]
pub struct BlockSpec {
    pub width: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    /// Cross-attention over a memory sequence.
    pub cross: bool,
    /// Depthwise convolution kernel size.
    pub conv: Option<usize>,
}

pub fn init_block<T: Scalar>(store: &mut ParamStore<T>, name: &str, spec: &BlockSpec) -> Result<()> {
    let w = spec.width;
    let out_std = 0.5 / (w as f64).sqrt();
    init_layer_norm(store, &format!("{name}.ln_sa"), w)?;
    for proj in ["q", "k", "v"] {
        init_linear_default(store, &format!("{name}.sa.{proj}"), w, w)?;
    }
    init_linear(store, &format!("{name}.sa.o"), w, w, out_std)?;
    if spec.cross {
        init_layer_norm(store, &format!("{name}.ln_ca"), w)?;
        for proj in ["q", "k", "v"] {
            init_linear_default(store, &format!("{name}.ca.{proj}"), w, w)?;
        }
        init_linear(store, &format!("{name}.ca.o"), w, w, out_std)?;
    }
    if let Some(k) = spec.conv {
        init_layer_norm(store, &format!("{name}.ln_conv"), w)?;
        store.init_normal(&format!("{name}.conv.w"), &[k, w], 1.0 / (k as f64).sqrt())?;
    }
    init_layer_norm(store, &format!("{name}.ln_ff"), w)?;
    init_linear_default(store, &format!("{name}.ff.in"), w, spec.ffn_hidden)?;
    init_linear(store, &format!("{name}.ff.out"), spec.ffn_hidden, w, 0.5 / (spec.ffn_hidden as f64).sqrt())
}

fn attend<T: Scalar>(g: &mut Graph<T>, p: &Binder<T>, name: &str, xq: Var, xkv: Var, dims: AttnDims) -> Result<Var> {
    let q = linear(g, p, &format!("{name}.q"), xq)?;
    let k = linear(g, p, &format!("{name}.k"), xkv)?;
    let v = linear(g, p, &format!("{name}.v"), xkv)?;
    let a = g.attention(q, k, v, dims)?;
    linear(g, p, &format!("{name}.o"), a)
}

/// One pre-norm residual block over `x` (`[batch·len × width]`). `memory`
/// is `(values, memory_len)` for cross-attention.
#[allow(clippy::too_many_arguments)]
pub fn block<T: Scalar>(
    g: &mut Graph<T>,
    p: &Binder<T>,
    name: &str,
    spec: &BlockSpec,
    x: Var,
    batch: usize,
    len: usize,
    memory: Option<(Var, usize)>,
) -> Result<Var> {
    let h = layer_norm(g, p, &format!("{name}.ln_sa"), x)?;
    let dims = AttnDims { batch, q_len: len, kv_len: len, heads: spec.heads };
    let a = attend(g, p, &format!("{name}.sa"), h, h, dims)?;
    let mut x = g.add(x, a)?;
    if spec.cross {
        let (mem, mem_len) = memory.ok_or_else(|| crate::error::Error::Shape(format!("{name}: cross-attention needs memory")))?;
        let h = layer_norm(g, p, &format!("{name}.ln_ca"), x)?;
        let dims = AttnDims { batch, q_len: len, kv_len: mem_len, heads: spec.heads };
        let a = attend(g, p, &format!("{name}.ca"), h, mem, dims)?;
        x = g.add(x, a)?;
    }
    if spec.conv.is_some() {
        let h = layer_norm(g, p, &format!("{name}.ln_conv"), x)?;
        let w = p.get(g, &format!("{name}.conv.w"))?;
        let c = g.dwconv(h, w, batch, len)?;
        let c = g.gelu(c);
        x = g.add(x, c)?;
    }
    let h = layer_norm(g, p, &format!("{name}.ln_ff"), x)?;
    let f = linear(g, p, &format!("{name}.ff.in"), h)?;
    let f = g.gelu(f);
    let f = linear(g, p, &format!("{name}.ff.out"), f)?;
    g.add(x, f)
}
