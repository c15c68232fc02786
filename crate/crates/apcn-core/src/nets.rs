//! Parameterized building blocks: dense layers, vanilla recurrent cells,
//! hypernetworks, and the flattened-parameter layouts that let a hypernetwork
//! output be reinterpreted as the weights of a generated recurrent network.
//!
//! Weights initialize uniformly in `[-1/√fan_in, +1/√fan_in]`. A hypernetwork's
//! final layer uses a tenth of that scale so generated networks start near
//! neutral; generated-parameter variance compounds through two networks.

use crate::autodiff::{ParamId, ParamStore, System, Tape, Tensor, Var};
use crate::error::{Error, Result};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    fn apply(self, tape: &mut Tape, v: Var) -> Var {
        match self {
            Activation::Linear => v,
            Activation::Relu => tape.relu(v),
            Activation::Sigmoid => tape.sigmoid(v),
            Activation::Tanh => tape.tanh(v),
        }
    }
}

fn uniform_init(rng: &mut impl Rng, rows: usize, cols: usize, scale_mul: f64) -> Tensor {
    if scale_mul == 0.0 {
        return Tensor::zeros(vec![rows, cols]);
    }
    let bound = scale_mul / (cols as f64).sqrt();
    let vals = (0..rows * cols)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor::matrix(rows, cols, vals)
}

fn identity_init(n: usize) -> Tensor {
    let mut t = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        t.vals_mut()[i * n + i] = 1.0;
    }
    t
}

/// Fully connected layer `act(W·x + b)`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub activation: Activation,
    pub in_size: usize,
    pub out_size: usize,
}

impl Dense {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        system: System,
        in_size: usize,
        out_size: usize,
        activation: Activation,
    ) -> Dense {
        Dense::scaled(store, rng, name, system, in_size, out_size, activation, 1.0)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn scaled(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        system: System,
        in_size: usize,
        out_size: usize,
        activation: Activation,
        init_mul: f64,
    ) -> Dense {
        let w = store.register(
            format!("{name}.w"),
            system,
            uniform_init(rng, out_size, in_size, init_mul),
        );
        let b = store.register(format!("{name}.b"), system, Tensor::zeros(vec![out_size]));
        Dense {
            w,
            b,
            activation,
            in_size,
            out_size,
        }
    }

    pub fn param_count(&self) -> usize {
        self.out_size * self.in_size + self.out_size
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        if tape.numel(x) != self.in_size {
            return Err(Error::invalid(
                "dense",
                format!("input size {} != layer input {}", tape.numel(x), self.in_size),
            ));
        }
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let wx = tape.matmul(w, x)?;
        let pre = tape.add(wx, b)?;
        Ok(self.activation.apply(tape, pre))
    }
}

/// Stack of dense layers.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// `sizes` lists the input width then every layer width; `activations`
    /// has one entry per layer. `last_mul` scales the final layer's
    /// initialization.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        system: System,
        sizes: &[usize],
        activations: &[Activation],
        last_mul: f64,
    ) -> Mlp {
        assert_eq!(sizes.len(), activations.len() + 1);
        let layers = activations
            .iter()
            .enumerate()
            .map(|(i, &act)| {
                let mul = if i + 1 == activations.len() { last_mul } else { 1.0 };
                Dense::scaled(
                    store,
                    rng,
                    &format!("{name}.{i}"),
                    system,
                    sizes[i],
                    sizes[i + 1],
                    act,
                    mul,
                )
            })
            .collect();
        Mlp { layers }
    }

    pub fn in_size(&self) -> usize {
        self.layers[0].in_size
    }

    pub fn out_size(&self) -> usize {
        self.layers.last().expect("non-empty mlp").out_size
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(tape, h)?;
        }
        Ok(h)
    }
}

/// Vanilla recurrent cell `h' = relu(W_h·h + W_x·x + b)` with owned weights.
#[derive(Debug, Clone)]
pub struct RnnCell {
    pub w_h: ParamId,
    pub w_x: ParamId,
    pub b: ParamId,
    pub hidden: usize,
    pub input: usize,
}

impl RnnCell {
    /// The recurrent matrix starts at the identity: with ReLU units a random
    /// recurrence has spectral radius well above one and activations blow up
    /// within a few steps.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        system: System,
        hidden: usize,
        input: usize,
    ) -> RnnCell {
        let w_h = store.register(format!("{name}.w_h"), system, identity_init(hidden));
        let w_x = store.register(
            format!("{name}.w_x"),
            system,
            uniform_init(rng, hidden, input, 1.0),
        );
        let b = store.register(format!("{name}.b"), system, Tensor::zeros(vec![hidden]));
        RnnCell {
            w_h,
            w_x,
            b,
            hidden,
            input,
        }
    }

    pub fn param_count(&self) -> usize {
        self.hidden * self.hidden + self.hidden * self.input + self.hidden
    }

    pub fn step(&self, tape: &mut Tape, h: Var, x: Var) -> Result<Var> {
        let w_h = tape.param(self.w_h);
        let w_x = tape.param(self.w_x);
        let b = tape.param(self.b);
        let hh = tape.matmul(w_h, h)?;
        let xx = tape.matmul(w_x, x)?;
        let s = tape.add(hh, xx)?;
        let pre = tape.add(s, b)?;
        Ok(tape.relu(pre))
    }
}

/// Ordered (name, shape, offset) records covering every weight of a generated
/// network, defining how a flat parameter vector is carved up.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub entries: Vec<LayoutEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamLayout {
    pub fn new(fields: &[(&str, Vec<usize>)]) -> ParamLayout {
        let mut entries = Vec::with_capacity(fields.len());
        let mut offset = 0;
        for (name, shape) in fields {
            let numel: usize = shape.iter().product();
            entries.push(LayoutEntry {
                name: (*name).to_string(),
                shape: shape.clone(),
                offset,
            });
            offset += numel;
        }
        ParamLayout { entries }
    }

    /// Layout of a vanilla recurrent cell: `w_h`, `w_x`, `b`.
    pub fn rnn(hidden: usize, input: usize) -> ParamLayout {
        ParamLayout::new(&[
            ("w_h", vec![hidden, hidden]),
            ("w_x", vec![hidden, input]),
            ("b", vec![hidden]),
        ])
    }

    pub fn total_len(&self) -> usize {
        self.entries
            .last()
            .map(|e| e.offset + e.shape.iter().product::<usize>())
            .unwrap_or(0)
    }

    /// Slice a flat parameter vector into shaped tensors, in layout order.
    pub fn split(&self, tape: &mut Tape, theta: Var) -> Result<Vec<Var>> {
        if tape.numel(theta) != self.total_len() {
            return Err(Error::invalid(
                "param_layout",
                format!(
                    "flat parameter length {} != layout length {}",
                    tape.numel(theta),
                    self.total_len()
                ),
            ));
        }
        self.entries
            .iter()
            .map(|e| {
                let numel = e.shape.iter().product();
                let flat = tape.slice(theta, e.offset, numel)?;
                tape.reshape(flat, e.shape.clone())
            })
            .collect()
    }
}

/// Four dense layers (widths 256, 256, 64, |θ|); the first two ReLU, the last
/// two linear, making the 64-wide layer a bottleneck before the parameter
/// output.
#[derive(Debug, Clone)]
pub struct Hypernet {
    pub net: Mlp,
}

impl Hypernet {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        system: System,
        in_size: usize,
        out_len: usize,
    ) -> Hypernet {
        let net = Mlp::new(
            store,
            rng,
            name,
            system,
            &[in_size, 256, 256, 64, out_len],
            &[
                Activation::Relu,
                Activation::Relu,
                Activation::Linear,
                Activation::Linear,
            ],
            0.1,
        );
        Hypernet { net }
    }

    pub fn in_size(&self) -> usize {
        self.net.in_size()
    }

    pub fn out_len(&self) -> usize {
        self.net.out_size()
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    /// Map an embedding to a flat parameter vector; differentiable in both
    /// the hypernetwork weights and the embedding.
    pub fn forward(&self, tape: &mut Tape, embedding: Var) -> Result<Var> {
        if tape.numel(embedding) != self.in_size() {
            return Err(Error::invalid(
                "hypernet",
                format!(
                    "embedding size {} != expected {}",
                    tape.numel(embedding),
                    self.in_size()
                ),
            ));
        }
        self.net.forward(tape, embedding)
    }
}

/// A recurrent cell whose weights were produced by a hypernetwork this
/// episode. Holds the already-sliced tape views, so stepping is cheap and
/// gradients flow through the flat parameter vector into the hypernetwork.
#[derive(Debug, Clone, Copy)]
pub struct GeneratedRnn {
    pub hidden: usize,
    pub input: usize,
    w_h: Var,
    w_x: Var,
    b: Var,
}

impl GeneratedRnn {
    pub fn bind(tape: &mut Tape, hidden: usize, input: usize, theta: Var) -> Result<GeneratedRnn> {
        let layout = ParamLayout::rnn(hidden, input);
        let parts = layout.split(tape, theta)?;
        Ok(GeneratedRnn {
            hidden,
            input,
            w_h: parts[0],
            w_x: parts[1],
            b: parts[2],
        })
    }

    pub fn step(&self, tape: &mut Tape, h: Var, x: Var) -> Result<Var> {
        if tape.numel(h) != self.hidden || tape.numel(x) != self.input {
            return Err(Error::invalid(
                "generated_rnn",
                format!(
                    "state/input sizes ({}, {}) != layout ({}, {})",
                    tape.numel(h),
                    tape.numel(x),
                    self.hidden,
                    self.input
                ),
            ));
        }
        let hh = tape.matmul(self.w_h, h)?;
        let xx = tape.matmul(self.w_x, x)?;
        let s = tape.add(hh, xx)?;
        let pre = tape.add(s, self.b)?;
        Ok(tape.relu(pre))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rnn_layout_matches_analytic_count() {
        // bottom state cell for a 28px image: hidden 32, error 7*7 + location 2
        let layout = ParamLayout::rnn(32, 51);
        assert_eq!(layout.total_len(), 32 * 32 + 32 * 51 + 32);
        assert_eq!(layout.total_len(), 2688);
        let offsets: Vec<usize> = layout.entries.iter().map(|e| e.offset).collect();
        assert_eq!(offsets, vec![0, 1024, 1024 + 32 * 51]);
    }

    #[test]
    fn hypernet_output_length_matches_layout() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layout = ParamLayout::rnn(32, 51);
        let h = Hypernet::new(
            &mut store,
            &mut rng,
            "hs",
            System::State,
            258,
            layout.total_len(),
        );
        assert_eq!(h.out_len(), layout.total_len());
        let expected =
            (256 * 258 + 256) + (256 * 256 + 256) + (64 * 256 + 64) + (2688 * 64 + 2688);
        assert_eq!(h.param_count(), expected);
        assert_eq!(store.total_len(), expected);
    }

    #[test]
    fn zero_embedding_with_zero_final_layer_yields_bias() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = Hypernet::new(&mut store, &mut rng, "ha", System::Action, 32, 100);
        // zero the final weight matrix; bias is already zero-initialized
        let last = h.net.layers.last().unwrap();
        store.value_mut(last.w).vals_mut().fill(0.0);
        let bias_vals: Vec<f64> = (0..100).map(|i| i as f64 * 0.01).collect();
        *store.value_mut(last.b) = Tensor::vector(bias_vals.clone());

        let mut tape = Tape::with_params(&store);
        let z = tape.constant(Tensor::zeros(vec![32]));
        let theta = h.forward(&mut tape, z).unwrap();
        assert_eq!(tape.vals(theta), bias_vals.as_slice());
    }

    #[test]
    fn generated_step_with_zero_params_is_zero_state() {
        let mut tape = Tape::new();
        let theta = tape.constant(Tensor::zeros(vec![ParamLayout::rnn(4, 3).total_len()]));
        let cell = GeneratedRnn::bind(&mut tape, 4, 3, theta).unwrap();
        let h = tape.constant(Tensor::vector(vec![0.3, -0.1, 0.2, 0.9]));
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let h2 = cell.step(&mut tape, h, x).unwrap();
        assert!(tape.vals(h2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn generated_step_gradient_reaches_flat_parameters() {
        let mut tape = Tape::new();
        let n = ParamLayout::rnn(3, 2).total_len();
        let theta = tape.leaf(Tensor::vector((0..n).map(|i| 0.01 * i as f64).collect()));
        let cell = GeneratedRnn::bind(&mut tape, 3, 2, theta).unwrap();
        let mut h = tape.constant(Tensor::vector(vec![0.1, 0.2, 0.3]));
        let x = tape.constant(Tensor::vector(vec![0.5, -0.5]));
        for _ in 0..2 {
            h = cell.step(&mut tape, h, x).unwrap();
        }
        let loss = tape.sum_squares(h);
        tape.backward(loss).unwrap();
        let g = tape.grad(theta).expect("gradient reaches theta");
        assert!(g.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn hypernet_rejects_wrong_embedding_size() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = Hypernet::new(&mut store, &mut rng, "h", System::Action, 32, 10);
        let mut tape = Tape::with_params(&store);
        let z = tape.constant(Tensor::zeros(vec![31]));
        assert!(h.forward(&mut tape, z).is_err());
    }

    #[test]
    fn dense_forward_is_deterministic() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = Dense::new(
            &mut store,
            &mut rng,
            "d",
            System::State,
            4,
            3,
            Activation::Tanh,
        );
        let x = Tensor::vector(vec![0.1, -0.2, 0.3, 0.4]);
        let mut out = Vec::new();
        for _ in 0..2 {
            let mut tape = Tape::with_params(&store);
            let xv = tape.constant(x.clone());
            let y = d.forward(&mut tape, xv).unwrap();
            out.push(tape.vals(y).to_vec());
        }
        assert_eq!(out[0], out[1]);
    }
}
