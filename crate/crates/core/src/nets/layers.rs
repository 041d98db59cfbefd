use rand::Rng as _;

use crate::rng::Rng;
use crate::tensor::{Graph, ParamGroup, ParamId, ParamStore, Result, Tensor, Var};

fn uniform(rng: &mut Rng, shape: Vec<usize>, bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("uniform init shape")
}

/// Affine layer `x·W + b` on row-batched input.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = store.add(format!("{name}.w"), group, uniform(rng, vec![in_dim, out_dim], bound));
        let b = store.add(format!("{name}.b"), group, uniform(rng, vec![1, out_dim], bound));
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

/// Stack of linear layers with ReLU between them. `final_relu` also applies
/// ReLU to the output.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub final_relu: bool,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        in_dim: usize,
        widths: &[usize],
        final_relu: bool,
        rng: &mut Rng,
    ) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut d = in_dim;
        for (i, &w) in widths.iter().enumerate() {
            layers.push(Linear::new(store, &format!("{name}.{i}"), group, d, w, rng));
            d = w;
        }
        Self { layers, final_relu }
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn forward(&self, g: &mut Graph, mut x: Var) -> Result<Var> {
        let last = self.layers.len().saturating_sub(1);
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(g, x)?;
            if i < last || self.final_relu {
                x = g.relu(x)?;
            }
        }
        Ok(x)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }
}

/// Convolution layer with kernel `[out, in, k, k]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut Rng,
    ) -> Self {
        let bound = 1.0 / ((in_ch * k * k) as f64).sqrt();
        let kernel = store.add(format!("{name}.k"), group, uniform(rng, vec![out_ch, in_ch, k, k], bound));
        let bias = store.add(format!("{name}.b"), group, uniform(rng, vec![out_ch], bound));
        Self { kernel, bias, stride, pad }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let k = g.param(self.kernel);
        let b = g.param(self.bias);
        g.conv2d(x, k, Some(b), self.stride, self.pad)
    }
}

/// Output extent of a convolution along one axis.
pub fn conv_out(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// LSTM cell with gates ordered input, forget, cell, output.
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, in_dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_x = store.add(format!("{name}.wx"), group, uniform(rng, vec![in_dim, 4 * hidden], bound));
        let w_h = store.add(format!("{name}.wh"), group, uniform(rng, vec![hidden, 4 * hidden], bound));
        let b = store.add(format!("{name}.b"), group, uniform(rng, vec![1, 4 * hidden], bound));
        Self { w_x, w_h, b, in_dim, hidden }
    }

    /// One step; returns `(h', c')`.
    pub fn forward(&self, g: &mut Graph, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let hd = self.hidden;
        let wx = g.param(self.w_x);
        let wh = g.param(self.w_h);
        let b = g.param(self.b);
        let zx = g.matmul(x, wx)?;
        let zh = g.matmul(h, wh)?;
        let z = g.add(zx, zh)?;
        let z = g.add_row(z, b)?;
        let i = g.slice_cols(z, 0, hd)?;
        let f = g.slice_cols(z, hd, 2 * hd)?;
        let gg = g.slice_cols(z, 2 * hd, 3 * hd)?;
        let o = g.slice_cols(z, 3 * hd, 4 * hd)?;
        let i = g.sigmoid(i)?;
        let f = g.sigmoid(f)?;
        let gg = g.tanh(gg)?;
        let o = g.sigmoid(o)?;
        let fc = g.mul(f, c)?;
        let ig = g.mul(i, gg)?;
        let c_new = g.add(fc, ig)?;
        let tc = g.tanh(c_new)?;
        let h_new = g.mul(o, tc)?;
        Ok((h_new, c_new))
    }
}
