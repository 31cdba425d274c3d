//! Parameterized layers built on the tape.
//!
//! Layers own [`ParamId`]s into a [`ParamStore`]. A forward pass first binds
//! the store onto a tape ([`ParamStore::bind`]) and then threads the
//! resulting [`Binding`] through every layer call.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in registration order.
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameters in registration order. The order is the checkpoint
/// layout, so it must not depend on anything but the architecture.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names.iter().map(String::as_str).zip(self.values.iter_mut())
    }

    /// Records every parameter as a differentiable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        Binding {
            vars: self.values.iter().map(|t| tape.leaf(t.clone())).collect(),
        }
    }

    /// Gradients of the bound leaves, zero-filled where nothing flowed.
    pub fn gradients(&self, tape: &Tape, binding: &Binding) -> Vec<Vec<f64>> {
        self.values
            .iter()
            .zip(&binding.vars)
            .map(|(t, &v)| {
                tape.grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; t.numel()])
            })
            .collect()
    }
}

/// Parameters of one [`ParamStore`] recorded on one tape.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum InitScheme {
    /// Uniform in ±√(6 / (fan_in + fan_out)), zero biases.
    #[default]
    XavierUniform,
    /// All zeros; used by tests that need a degenerate layer.
    Zeros,
}

fn init_weight(rows: usize, cols: usize, scheme: InitScheme, rng: &mut impl Rng) -> Tensor {
    let data = match scheme {
        InitScheme::XavierUniform => {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect()
        }
        InitScheme::Zeros => vec![0.0; rows * cols],
    };
    Tensor::matrix(rows, cols, data).expect("weight shape")
}

#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        scheme: InitScheme,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.register(format!("{name}.weight"), init_weight(out_dim, in_dim, scheme, rng));
        let b = store.register(format!("{name}.bias"), Tensor::zeros([out_dim]));
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Binding, x: Var) -> Result<Var> {
        tape.linear(x, p.var(self.w), p.var(self.b))
    }

    pub fn param_count(in_dim: usize, out_dim: usize) -> usize {
        in_dim * out_dim + out_dim
    }
}

/// MLP with an input projection, two tanh residual blocks, and an output
/// projection. The encoder squashes its output with tanh; the decoder
/// (the mirrored stack) leaves it linear.
#[derive(Clone, Debug)]
pub struct ResidualMlp {
    input: LinearLayer,
    blocks: Vec<(LinearLayer, LinearLayer)>,
    output: LinearLayer,
    tanh_output: bool,
}

pub const RESIDUAL_BLOCKS: usize = 2;

impl ResidualMlp {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        tanh_output: bool,
        scheme: InitScheme,
        rng: &mut impl Rng,
    ) -> Self {
        let input = LinearLayer::new(store, &format!("{name}.in"), in_dim, hidden, scheme, rng);
        let blocks = (0..RESIDUAL_BLOCKS)
            .map(|i| {
                (
                    LinearLayer::new(store, &format!("{name}.res{i}.a"), hidden, hidden, scheme, rng),
                    LinearLayer::new(store, &format!("{name}.res{i}.b"), hidden, hidden, scheme, rng),
                )
            })
            .collect();
        let output = LinearLayer::new(store, &format!("{name}.out"), hidden, out_dim, scheme, rng);
        Self {
            input,
            blocks,
            output,
            tanh_output,
        }
    }

    pub fn encoder(
        store: &mut ParamStore,
        frame_dim: usize,
        hidden: usize,
        feat_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self::new(
            store,
            "enc",
            frame_dim,
            hidden,
            feat_dim,
            true,
            InitScheme::default(),
            rng,
        )
    }

    pub fn decoder(
        store: &mut ParamStore,
        feat_dim: usize,
        hidden: usize,
        frame_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self::new(
            store,
            "dec",
            feat_dim,
            hidden,
            frame_dim,
            false,
            InitScheme::default(),
            rng,
        )
    }

    pub fn in_dim(&self) -> usize {
        self.input.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.output.out_dim
    }

    /// `x: [batch × in_dim]` → `[batch × out_dim]`.
    pub fn forward(&self, tape: &mut Tape, p: &Binding, x: Var) -> Result<Var> {
        check_width(tape, x, self.in_dim(), "mlp")?;
        let pre = self.input.forward(tape, p, x)?;
        let mut a = tape.tanh(pre)?;
        for (first, second) in &self.blocks {
            let u = first.forward(tape, p, a)?;
            let u = tape.tanh(u)?;
            let r = second.forward(tape, p, u)?;
            a = tape.add(a, r)?;
        }
        let out = self.output.forward(tape, p, a)?;
        if self.tanh_output {
            tape.tanh(out)
        } else {
            Ok(out)
        }
    }

    pub fn param_count(in_dim: usize, hidden: usize, out_dim: usize) -> usize {
        LinearLayer::param_count(in_dim, hidden)
            + RESIDUAL_BLOCKS * 2 * LinearLayer::param_count(hidden, hidden)
            + LinearLayer::param_count(hidden, out_dim)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

/// LSTM cell with gates `[input, forget, candidate, output]` computed by one
/// affine map over the concatenated `(x, h)`.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub gates: LinearLayer,
    pub input: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        scheme: InitScheme,
        rng: &mut impl Rng,
    ) -> Self {
        let gates = LinearLayer::new(store, name, input + hidden, 4 * hidden, scheme, rng);
        // Forget-gate bias starts at 1.
        if scheme != InitScheme::Zeros {
            store.get_mut(gates.b).data_mut()[hidden..2 * hidden].fill(1.0);
        }
        Self { gates, input, hidden }
    }

    pub fn zero_state(&self, tape: &mut Tape, batch: usize) -> LstmState {
        LstmState {
            h: tape.constant(Tensor::zeros([batch, self.hidden])),
            c: tape.constant(Tensor::zeros([batch, self.hidden])),
        }
    }

    pub fn step(&self, tape: &mut Tape, p: &Binding, x: Var, state: LstmState) -> Result<LstmState> {
        check_width(tape, x, self.input, "lstm_step")?;
        let hsz = self.hidden;
        let xh = tape.concat(&[x, state.h], 1)?;
        let pre = self.gates.forward(tape, p, xh)?;
        let i = tape.slice(pre, 1, 0..hsz)?;
        let f = tape.slice(pre, 1, hsz..2 * hsz)?;
        let g = tape.slice(pre, 1, 2 * hsz..3 * hsz)?;
        let o = tape.slice(pre, 1, 3 * hsz..4 * hsz)?;
        let i = tape.sigmoid(i)?;
        let f = tape.sigmoid(f)?;
        let g = tape.tanh(g)?;
        let o = tape.sigmoid(o)?;
        let keep = tape.mul(f, state.c)?;
        let write = tape.mul(i, g)?;
        let c = tape.add(keep, write)?;
        let tc = tape.tanh(c)?;
        let h = tape.mul(o, tc)?;
        Ok(LstmState { h, c })
    }

    pub fn param_count(input: usize, hidden: usize) -> usize {
        LinearLayer::param_count(input + hidden, 4 * hidden)
    }
}

/// Input projection followed by a stack of LSTM cells.
#[derive(Clone, Debug)]
pub struct LstmStack {
    pub embed: LinearLayer,
    pub cells: Vec<LstmCell>,
}

impl LstmStack {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        layers: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let embed = LinearLayer::new(
            store,
            &format!("{name}.embed"),
            input,
            hidden,
            InitScheme::default(),
            rng,
        );
        let cells = (0..layers)
            .map(|l| {
                LstmCell::new(
                    store,
                    &format!("{name}.lstm{l}"),
                    hidden,
                    hidden,
                    InitScheme::default(),
                    rng,
                )
            })
            .collect();
        Self { embed, cells }
    }

    pub fn input_width(&self) -> usize {
        self.embed.in_dim
    }

    pub fn hidden(&self) -> usize {
        self.embed.out_dim
    }

    pub fn zero_state(&self, tape: &mut Tape, batch: usize) -> Vec<LstmState> {
        self.cells.iter().map(|c| c.zero_state(tape, batch)).collect()
    }

    /// Advances every layer; returns the top layer's hidden output.
    pub fn step(&self, tape: &mut Tape, p: &Binding, x: Var, state: &[LstmState]) -> Result<(Var, Vec<LstmState>)> {
        check_width(tape, x, self.input_width(), "lstm_stack")?;
        let mut inp = self.embed.forward(tape, p, x)?;
        let mut next = Vec::with_capacity(self.cells.len());
        for (cell, s) in self.cells.iter().zip(state) {
            let ns = cell.step(tape, p, inp, *s)?;
            inp = ns.h;
            next.push(ns);
        }
        Ok((inp, next))
    }

    pub fn param_count(input: usize, hidden: usize, layers: usize) -> usize {
        LinearLayer::param_count(input, hidden) + layers * LstmCell::param_count(hidden, hidden)
    }
}

/// Affine map from a hidden state to `(μ, log σ²)`.
#[derive(Clone, Debug)]
pub struct GaussianHead {
    pub proj: LinearLayer,
    pub latent: usize,
}

impl GaussianHead {
    pub fn new(store: &mut ParamStore, name: &str, hidden: usize, latent: usize, rng: &mut impl Rng) -> Self {
        Self {
            proj: LinearLayer::new(store, name, hidden, 2 * latent, InitScheme::default(), rng),
            latent,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Binding, h: Var) -> Result<(Var, Var)> {
        let out = self.proj.forward(tape, p, h)?;
        let mu = tape.slice(out, 1, 0..self.latent)?;
        let logvar = tape.slice(out, 1, self.latent..2 * self.latent)?;
        Ok((mu, logvar))
    }

    pub fn param_count(hidden: usize, latent: usize) -> usize {
        LinearLayer::param_count(hidden, 2 * latent)
    }
}

/// `z = μ + exp(logvar / 2) · ε` for a fixed noise tensor `ε`.
pub fn reparam_with_noise(tape: &mut Tape, mu: Var, logvar: Var, eps: Tensor) -> Result<Var> {
    if tape.shape(mu) != tape.shape(logvar) || tape.shape(mu) != eps.shape() {
        return Err(Error::Shape {
            op: "reparam_sample",
            expected: tape.shape(mu).to_vec(),
            got: tape.shape(logvar).to_vec(),
        });
    }
    let half = tape.scale(logvar, 0.5)?;
    let sigma = tape.exp(half)?;
    let eps = tape.constant(eps);
    let noise = tape.mul(sigma, eps)?;
    tape.add(mu, noise)
}

/// Draws `ε ~ N(0, I)` from `rng` and applies [`reparam_with_noise`].
pub fn reparam_sample(tape: &mut Tape, mu: Var, logvar: Var, rng: &mut impl Rng) -> Result<Var> {
    let shape = tape.shape(mu).to_vec();
    let eps = standard_normal(&shape, rng);
    reparam_with_noise(tape, mu, logvar, eps)
}

pub fn standard_normal(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("noise shape")
}

fn check_width(tape: &Tape, x: Var, width: usize, op: &'static str) -> Result<()> {
    let shape = tape.shape(x);
    if shape.len() != 2 || shape[1] != width {
        return Err(Error::Shape {
            op,
            expected: vec![shape.first().copied().unwrap_or(0), width],
            got: shape.to_vec(),
        });
    }
    Ok(())
}
