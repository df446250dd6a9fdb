use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let w = store.add_uniform(format!("{name}.w"), &[fan_in, fan_out], fan_in, rng);
        let b = store.add_uniform(format!("{name}.b"), &[fan_out], fan_in, rng);
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.dense(x, w, Some(b))
    }

    /// Graph-free forward on a row-major `(rows, fan_in)` buffer.
    pub fn apply(&self, store: &ParamStore, x: &[f64], rows: usize, out: &mut Vec<f64>) {
        out.clear();
        let b = store.get(self.b).data();
        for _ in 0..rows {
            out.extend_from_slice(b);
        }
        crate::kernels::gemm(rows, self.fan_in, self.fan_out, 1.0, x, false, store.get(self.w).data(), false, 1.0, out);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub pad: usize,
    pub dil: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        pad: usize,
        dil: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = c_in * k;
        let w = store.add_uniform(format!("{name}.w"), &[c_out, c_in, k], fan_in, rng);
        let b = store.add_uniform(format!("{name}.b"), &[c_out], fan_in, rng);
        Self { w, b, pad, dil }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv1d(x, w, Some(b), self.pad, self.dil)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvTranspose1d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
}

impl ConvTranspose1d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = c_out * k;
        let w = store.add_uniform(format!("{name}.w"), &[c_in, c_out, k], fan_in, rng);
        let b = store.add_uniform(format!("{name}.b"), &[c_out], fan_in, rng);
        Self { w, b, stride }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv_transpose1d(x, w, Some(b), self.stride)
    }
}
