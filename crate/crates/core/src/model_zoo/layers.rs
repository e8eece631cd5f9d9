//! Parameterised building blocks over the autodiff [`Graph`].

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::params::{ones, uniform, zeros};
use crate::tensor::{Graph, ParamId, ParamStore, Var};

const BN_EPS: f64 = 1e-5;

/// Registers parameters under a hierarchical name prefix.
pub struct Builder<'s> {
    pub store: &'s mut ParamStore,
    pub rng: &'s mut ChaCha8Rng,
    prefix: Vec<String>,
}

impl<'s> Builder<'s> {
    pub fn new(store: &'s mut ParamStore, rng: &'s mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: Vec::new(),
        }
    }

    pub fn scoped<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        self.prefix.push(name.to_string());
        let out = f(self);
        self.prefix.pop();
        out
    }

    fn name(&self, leaf: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(leaf.to_string());
        parts.join(".")
    }

    pub fn uniform(&mut self, leaf: &str, shape: &[usize], bound: f64) -> ParamId {
        let v = uniform(self.rng, shape, bound);
        let name = self.name(leaf);
        self.store.add(name, v, true)
    }

    pub fn constant(
        &mut self,
        leaf: &str,
        shape: &[usize],
        value: f64,
        trainable: bool,
    ) -> ParamId {
        let v = if value == 0.0 {
            zeros(shape)
        } else if value == 1.0 {
            ones(shape)
        } else {
            zeros(shape).mapv(|_| value)
        };
        let name = self.name(leaf);
        self.store.add(name, v, trainable)
    }
}

/// Forward-pass context: the tape plus, in training mode, the dropout rng.
pub struct Ctx<'a, 'p> {
    pub g: &'a mut Graph<'p>,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a, 'p> Ctx<'a, 'p> {
    pub fn eval(g: &'a mut Graph<'p>) -> Self {
        Self { g, rng: None }
    }

    pub fn train(g: &'a mut Graph<'p>, rng: &'a mut ChaCha8Rng) -> Self {
        Self { g, rng: Some(rng) }
    }

    pub fn is_train(&self) -> bool {
        self.rng.is_some()
    }

    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) if p > 0.0 => self.g.dropout(x, p, rng),
            _ => Ok(x),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(bd: &mut Builder, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        bd.scoped(name, |bd| Self {
            w: bd.uniform("w", &[in_dim, out_dim], bound),
            b: bd.uniform("b", &[out_dim], bound),
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let w = cx.g.param(self.w);
        let b = cx.g.param(self.b);
        let y = cx.g.matmul(x, w)?;
        cx.g.add_bias(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
}

impl Conv {
    pub fn new(
        bd: &mut Builder,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let bound = 1.0 / ((in_ch * k * k).max(1) as f64).sqrt();
        bd.scoped(name, |bd| Self {
            w: bd.uniform("w", &[out_ch, in_ch, k, k], bound),
            b: bias.then(|| bd.uniform("b", &[out_ch], bound)),
            stride,
            pad,
            in_ch,
            out_ch,
            k,
        })
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let w = cx.g.param(self.w);
        let b = self.b.map(|b| cx.g.param(b));
        cx.g.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(bd: &mut Builder, name: &str, channels: usize) -> Self {
        bd.scoped(name, |bd| Self {
            gamma: bd.constant("gamma", &[channels], 1.0, true),
            beta: bd.constant("beta", &[channels], 0.0, true),
            running_mean: bd.constant("running_mean", &[channels], 0.0, false),
            running_var: bd.constant("running_var", &[channels], 1.0, false),
        })
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let train = cx.is_train();
        cx.g.batch_norm(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            BN_EPS,
            train,
        )
    }
}

/// Single-layer LSTM, gate order (input, forget, cell, output).
#[derive(Clone, Debug)]
pub struct Lstm {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(bd: &mut Builder, name: &str, in_dim: usize, hidden: usize) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        bd.scoped(name, |bd| Self {
            w_ih: bd.uniform("w_ih", &[in_dim, 4 * hidden], bound),
            w_hh: bd.uniform("w_hh", &[hidden, 4 * hidden], bound),
            b: bd.uniform("b", &[4 * hidden], bound),
            hidden,
        })
    }

    /// Runs over `steps` (each B×in, oldest first) from zero state and
    /// returns the final hidden state.
    pub fn forward(&self, cx: &mut Ctx, steps: &[Var]) -> Result<Var> {
        let hd = self.hidden;
        let batch = cx.g.shape(steps[0])[0];
        let (w_ih, w_hh, b) = (
            cx.g.param(self.w_ih),
            cx.g.param(self.w_hh),
            cx.g.param(self.b),
        );
        let mut h = cx.g.input(zeros(&[batch, hd]));
        let mut c = cx.g.input(zeros(&[batch, hd]));
        for &x in steps {
            let xi = cx.g.matmul(x, w_ih)?;
            let hh = cx.g.matmul(h, w_hh)?;
            let gates = cx.g.add(xi, hh)?;
            let gates = cx.g.add_bias(gates, b)?;
            let i = cx.g.slice(gates, 1, 0, hd)?;
            let f = cx.g.slice(gates, 1, hd, 2 * hd)?;
            let gg = cx.g.slice(gates, 1, 2 * hd, 3 * hd)?;
            let o = cx.g.slice(gates, 1, 3 * hd, 4 * hd)?;
            let (i, f, gg, o) = (
                cx.g.sigmoid(i),
                cx.g.sigmoid(f),
                cx.g.tanh(gg),
                cx.g.sigmoid(o),
            );
            let fc = cx.g.mul(f, c)?;
            let ig = cx.g.mul(i, gg)?;
            c = cx.g.add(fc, ig)?;
            let tc = cx.g.tanh(c);
            h = cx.g.mul(o, tc)?;
        }
        Ok(h)
    }
}

/// Single-direction GRU cell, gate order (reset, update, new).
#[derive(Clone, Debug)]
pub struct Gru {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub hidden: usize,
}

impl Gru {
    pub fn new(bd: &mut Builder, name: &str, in_dim: usize, hidden: usize) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        bd.scoped(name, |bd| Self {
            w_ih: bd.uniform("w_ih", &[in_dim, 3 * hidden], bound),
            w_hh: bd.uniform("w_hh", &[hidden, 3 * hidden], bound),
            b_ih: bd.uniform("b_ih", &[3 * hidden], bound),
            b_hh: bd.uniform("b_hh", &[3 * hidden], bound),
            hidden,
        })
    }

    /// Hidden state after every step, in input order.
    pub fn forward(&self, cx: &mut Ctx, steps: &[Var]) -> Result<Vec<Var>> {
        let hd = self.hidden;
        let batch = cx.g.shape(steps[0])[0];
        let w_ih = cx.g.param(self.w_ih);
        let w_hh = cx.g.param(self.w_hh);
        let b_ih = cx.g.param(self.b_ih);
        let b_hh = cx.g.param(self.b_hh);
        let mut h = cx.g.input(zeros(&[batch, hd]));
        let mut out = Vec::with_capacity(steps.len());
        for &x in steps {
            let gi = cx.g.matmul(x, w_ih)?;
            let gi = cx.g.add_bias(gi, b_ih)?;
            let gh = cx.g.matmul(h, w_hh)?;
            let gh = cx.g.add_bias(gh, b_hh)?;
            let ir = cx.g.slice(gi, 1, 0, 2 * hd)?;
            let hr = cx.g.slice(gh, 1, 0, 2 * hd)?;
            let rz = cx.g.add(ir, hr)?;
            let rz = cx.g.sigmoid(rz);
            let r = cx.g.slice(rz, 1, 0, hd)?;
            let z = cx.g.slice(rz, 1, hd, 2 * hd)?;
            let i_n = cx.g.slice(gi, 1, 2 * hd, 3 * hd)?;
            let h_n = cx.g.slice(gh, 1, 2 * hd, 3 * hd)?;
            let rh = cx.g.mul(r, h_n)?;
            let n = cx.g.add(i_n, rh)?;
            let n = cx.g.tanh(n);
            // h' = n + z * (h - n)
            let d = cx.g.sub(h, n)?;
            let zd = cx.g.mul(z, d)?;
            h = cx.g.add(n, zd)?;
            out.push(h);
        }
        Ok(out)
    }
}

/// Stacked bidirectional GRU.
#[derive(Clone, Debug)]
pub struct BiGru {
    pub layers: Vec<(Gru, Gru)>,
}

impl BiGru {
    pub fn new(
        bd: &mut Builder,
        name: &str,
        in_dim: usize,
        hidden: usize,
        n_layers: usize,
    ) -> Self {
        bd.scoped(name, |bd| Self {
            layers: (0..n_layers)
                .map(|l| {
                    let d = if l == 0 { in_dim } else { 2 * hidden };
                    (
                        Gru::new(bd, &format!("l{l}_fwd"), d, hidden),
                        Gru::new(bd, &format!("l{l}_bwd"), d, hidden),
                    )
                })
                .collect(),
        })
    }

    /// Per-step outputs (B×2H), forward and backward halves concatenated.
    pub fn forward(&self, cx: &mut Ctx, steps: &[Var]) -> Result<Vec<Var>> {
        let mut xs = steps.to_vec();
        for (fwd, bwd) in &self.layers {
            let f = fwd.forward(cx, &xs)?;
            let rev: Vec<Var> = xs.iter().rev().copied().collect();
            let mut b = bwd.forward(cx, &rev)?;
            b.reverse();
            xs = f
                .iter()
                .zip(&b)
                .map(|(f, b)| cx.g.concat(&[*f, *b], 1))
                .collect::<Result<_>>()?;
        }
        Ok(xs)
    }
}

/// Regression tower: hidden blocks of (linear, [batch norm], relu, [dropout])
/// followed by a final linear layer to one output.
#[derive(Clone, Debug)]
pub struct Head {
    pub hidden: Vec<(Linear, Option<BatchNorm>)>,
    pub out: Linear,
    pub dropout: f64,
}

impl Head {
    pub fn new(
        bd: &mut Builder,
        name: &str,
        in_dim: usize,
        dims: &[usize],
        batch_norm: bool,
        dropout: f64,
    ) -> Self {
        bd.scoped(name, |bd| {
            let mut d = in_dim;
            let hidden = dims
                .iter()
                .enumerate()
                .map(|(i, &h)| {
                    let lin = Linear::new(bd, &format!("fc{i}"), d, h);
                    let bn = batch_norm.then(|| BatchNorm::new(bd, &format!("bn{i}"), h));
                    d = h;
                    (lin, bn)
                })
                .collect();
            Self {
                hidden,
                out: Linear::new(bd, "out", d, 1),
                dropout,
            }
        })
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let mut h = x;
        for (lin, bn) in &self.hidden {
            h = lin.forward(cx, h)?;
            if let Some(bn) = bn {
                h = bn.forward(cx, h)?;
            }
            h = cx.g.relu(h);
            h = cx.dropout(h, self.dropout)?;
        }
        self.out.forward(cx, h)
    }
}

/// Stack of (linear, relu, dropout) blocks.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub dropout: f64,
}

impl Mlp {
    pub fn new(bd: &mut Builder, name: &str, in_dim: usize, dims: &[usize], dropout: f64) -> Self {
        bd.scoped(name, |bd| {
            let mut d = in_dim;
            let layers = dims
                .iter()
                .enumerate()
                .map(|(i, &h)| {
                    let l = Linear::new(bd, &format!("fc{i}"), d, h);
                    d = h;
                    l
                })
                .collect();
            Self { layers, dropout }
        })
    }

    pub fn out_dim(&self, in_dim: usize) -> usize {
        self.layers.last().map_or(in_dim, |l| l.out_dim)
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let mut h = x;
        for l in &self.layers {
            h = l.forward(cx, h)?;
            h = cx.g.relu(h);
            h = cx.dropout(h, self.dropout)?;
        }
        Ok(h)
    }
}
