//! Multi-layer graph convolution over the token graph:
//! `H_l = f(Â_norm · H_{l-1} · W_l)` with `H_0` the contextual text embeddings.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamGroup, ParamStore, Session, Tape, Var};
use crate::error::{CoreError, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => libm::tanh(x),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the pre-activation `x`.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = libm::tanh(x);
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn on_tape(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Identity => x,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GcnConfig {
    pub layers: usize,
    pub width: usize,
    pub activation: Activation,
}

impl GcnConfig {
    pub fn new(width: usize) -> Self {
        Self {
            layers: 2,
            width,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.width == 0 {
            return Err(CoreError::Config(format!(
                "gcn needs at least one layer and positive width, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn weight_name(layer: usize) -> alloc::string::String {
        format!("gcn.w{}", layer + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcnParams {
    pub weights: Vec<Matrix>,
}

impl GcnParams {
    /// Uniform in `±sqrt(6 / (2·width))`.
    pub fn init<R: Rng + ?Sized>(config: &GcnConfig, rng: &mut R) -> Self {
        let bound = libm::sqrt(6.0 / (2.0 * config.width as f64));
        Self {
            weights: (0..config.layers)
                .map(|_| Matrix::random_uniform(config.width, config.width, bound, rng))
                .collect(),
        }
    }

    pub fn identity(config: &GcnConfig) -> Self {
        Self {
            weights: (0..config.layers).map(|_| Matrix::identity(config.width)).collect(),
        }
    }

    pub fn store_into(&self, store: &mut ParamStore) {
        for (l, w) in self.weights.iter().enumerate() {
            store.insert(&GcnConfig::weight_name(l), ParamGroup::Head, w.clone());
        }
    }

    pub fn from_store(store: &ParamStore, config: &GcnConfig) -> Result<Self> {
        Ok(Self {
            weights: (0..config.layers)
                .map(|l| store.get(&GcnConfig::weight_name(l)).cloned())
                .collect::<Result<_>>()?,
        })
    }
}

/// Cached forward pass. `hidden[0]` is `H_0`, `hidden[L]` is `H_L`.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnState {
    pub hidden: Vec<Matrix>,
    /// `Â_norm · H_{l-1}` per layer.
    pub propagated: Vec<Matrix>,
    /// Pre-activations `Â_norm · H_{l-1} · W_l` per layer.
    pub pre_activation: Vec<Matrix>,
}

impl GcnState {
    pub fn output(&self) -> &Matrix {
        self.hidden.last().expect("at least H_0")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcnGradients {
    pub weights: Vec<Matrix>,
    pub input: Matrix,
}

fn check_shapes(h0: &Matrix, norm_adj: &Matrix, params: &GcnParams, config: &GcnConfig) -> Result<()> {
    config.validate()?;
    let n = h0.rows();
    if norm_adj.shape() != (n, n) {
        return Err(CoreError::Shape {
            op: "gcn adjacency",
            lhs: h0.shape(),
            rhs: norm_adj.shape(),
        });
    }
    if h0.cols() != config.width {
        return Err(CoreError::Shape {
            op: "gcn input",
            lhs: h0.shape(),
            rhs: (n, config.width),
        });
    }
    if params.weights.len() != config.layers
        || params.weights.iter().any(|w| w.shape() != (config.width, config.width))
    {
        return Err(CoreError::Shape {
            op: "gcn weights",
            lhs: (config.width, config.width),
            rhs: params.weights.first().map_or((0, 0), Matrix::shape),
        });
    }
    Ok(())
}

pub fn gcn_forward(h0: &Matrix, norm_adj: &Matrix, params: &GcnParams, config: &GcnConfig) -> Result<GcnState> {
    check_shapes(h0, norm_adj, params, config)?;
    let mut state = GcnState {
        hidden: Vec::with_capacity(config.layers + 1),
        propagated: Vec::with_capacity(config.layers),
        pre_activation: Vec::with_capacity(config.layers),
    };
    state.hidden.push(h0.clone());
    for (l, w) in params.weights.iter().enumerate() {
        let prev = state.hidden.last().expect("H_0 pushed");
        let propagated = norm_adj.matmul(prev)?;
        let pre = propagated.matmul(w)?;
        let out = pre.map(|x| config.activation.apply(x));
        if !out.is_finite() {
            return Err(CoreError::NonFinite(format!("gcn layer {}", l + 1)));
        }
        state.propagated.push(propagated);
        state.pre_activation.push(pre);
        state.hidden.push(out);
    }
    Ok(state)
}

/// Backpropagates `upstream = dLoss/dH_L` through a cached forward pass.
pub fn gcn_gradients(
    upstream: &Matrix,
    state: Option<&GcnState>,
    norm_adj: &Matrix,
    params: &GcnParams,
    config: &GcnConfig,
) -> Result<GcnGradients> {
    let state = state.ok_or(CoreError::MissingCache)?;
    if state.pre_activation.len() != config.layers {
        return Err(CoreError::MissingCache);
    }
    if upstream.shape() != state.output().shape() {
        return Err(CoreError::Shape {
            op: "gcn upstream",
            lhs: state.output().shape(),
            rhs: upstream.shape(),
        });
    }
    let mut weights = alloc::vec![Matrix::zeros(0, 0); config.layers];
    let mut grad = upstream.clone();
    for l in (0..config.layers).rev() {
        let d_pre = grad.zip_map(&state.pre_activation[l], "gcn activation", |g, x| {
            g * config.activation.derivative(x)
        })?;
        weights[l] = state.propagated[l].t_matmul(&d_pre)?;
        let d_propagated = d_pre.matmul_t(&params.weights[l])?;
        grad = norm_adj.t_matmul(&d_propagated)?;
    }
    Ok(GcnGradients { weights, input: grad })
}

/// Records the same recurrence on an autodiff tape, reading `gcn.w*` from the session.
pub fn gcn_on_tape(session: &mut Session<'_>, h0: Var, norm_adj: Var, config: &GcnConfig) -> Result<Var> {
    config.validate()?;
    let mut h = h0;
    for l in 0..config.layers {
        let w = session.param(&GcnConfig::weight_name(l))?;
        let propagated = session.tape.matmul(norm_adj, h)?;
        let pre = session.tape.matmul(propagated, w)?;
        h = config.activation.on_tape(&mut session.tape, pre);
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{normalized_adjacency, Edge, WeightedGraph};
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config(width: usize, layers: usize, activation: Activation) -> GcnConfig {
        GcnConfig {
            layers,
            width,
            activation,
        }
    }

    #[test]
    fn single_node_identity_propagation() {
        let cfg = config(3, 1, Activation::Identity);
        let h0 = Matrix::from_rows(&[&[1.0, -2.0, 0.5]]);
        let adj = Matrix::from_rows(&[&[1.0]]);
        let st = gcn_forward(&h0, &adj, &GcnParams::identity(&cfg), &cfg).unwrap();
        assert_eq!(st.output(), &h0);
    }

    #[test]
    fn two_node_hand_multiply() {
        let cfg = config(2, 1, Activation::Identity);
        let g = WeightedGraph {
            node_count: 2,
            edges: vec![Edge::new(0, 1, 1.0)],
        };
        let adj = normalized_adjacency(&g, 2).unwrap();
        let h0 = Matrix::identity(2);
        let st = gcn_forward(&h0, &adj, &GcnParams::identity(&cfg), &cfg).unwrap();
        for v in st.output().as_slice() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn linear_single_layer_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = config(3, 1, Activation::Identity);
        let params = GcnParams::init(&cfg, &mut rng);
        let h0 = Matrix::random_uniform(4, 3, 1.0, &mut rng);
        let adj = Matrix::random_uniform(4, 4, 1.0, &mut rng);
        let up = Matrix::random_uniform(4, 3, 1.0, &mut rng);
        let st = gcn_forward(&h0, &adj, &params, &cfg).unwrap();
        let g = gcn_gradients(&up, Some(&st), &adj, &params, &cfg).unwrap();
        let closed = adj.matmul(&h0).unwrap().transpose().matmul(&up).unwrap();
        assert!(g.weights[0].max_abs_diff(&closed) < 1e-14);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = config(4, 2, Activation::Tanh);
        let params = GcnParams::init(&cfg, &mut rng);
        let h0 = Matrix::random_uniform(3, 4, 1.0, &mut rng);
        let adj = Matrix::identity(3);
        let st = gcn_forward(&h0, &adj, &params, &cfg).unwrap();
        let g = gcn_gradients(&Matrix::zeros(3, 4), Some(&st), &adj, &params, &cfg).unwrap();
        assert!(g.weights.iter().chain([&g.input]).all(|m| m.as_slice().iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn missing_cache_and_bad_shapes() {
        let cfg = config(2, 1, Activation::Relu);
        let p = GcnParams::identity(&cfg);
        let adj = Matrix::identity(2);
        assert_eq!(
            gcn_gradients(&Matrix::zeros(2, 2), None, &adj, &p, &cfg),
            Err(CoreError::MissingCache)
        );
        assert!(gcn_forward(&Matrix::zeros(3, 2), &adj, &p, &cfg).is_err());
        assert!(gcn_forward(&Matrix::zeros(2, 2), &adj, &p, &config(2, 0, Activation::Relu)).is_err());
    }

    #[test]
    fn non_finite_layer_is_named() {
        let cfg = config(1, 2, Activation::Identity);
        let p = GcnParams {
            weights: vec![Matrix::filled(1, 1, 1e300), Matrix::filled(1, 1, 1e300)],
        };
        let err = gcn_forward(&Matrix::filled(1, 1, 1.0), &Matrix::identity(1), &p, &cfg).unwrap_err();
        assert_eq!(err, CoreError::NonFinite("gcn layer 2".into()));
    }

    #[test]
    fn tape_matches_explicit_forward_and_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for act in [Activation::Relu, Activation::Tanh, Activation::Identity] {
            let cfg = config(5, 2, act);
            let params = GcnParams::init(&cfg, &mut rng);
            let mut store = ParamStore::default();
            params.store_into(&mut store);
            let h0 = Matrix::random_uniform(4, 5, 1.0, &mut rng);
            let adj = normalized_adjacency(
                &WeightedGraph {
                    node_count: 4,
                    edges: vec![Edge::new(0, 1, 1.0), Edge::new(1, 3, 2.0)],
                },
                4,
            )
            .unwrap();
            let up = Matrix::random_uniform(4, 5, 1.0, &mut rng);

            let st = gcn_forward(&h0, &adj, &params, &cfg).unwrap();
            let explicit = gcn_gradients(&up, Some(&st), &adj, &params, &cfg).unwrap();

            let mut s = Session::new(&store);
            let h = s.tape.leaf(h0.clone());
            let a = s.tape.leaf(adj.clone());
            let out = gcn_on_tape(&mut s, h, a, &cfg).unwrap();
            assert!(s.tape.value(out).max_abs_diff(st.output()) < 1e-14);
            let grads = s.tape.backward(out, up.clone()).unwrap();
            assert!(grads.get(h).unwrap().max_abs_diff(&explicit.input) < 1e-12);
            let w0 = s.param(&GcnConfig::weight_name(0)).unwrap();
            assert!(grads.get(w0).unwrap().max_abs_diff(&explicit.weights[0]) < 1e-12);
        }
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = config(3, 2, Activation::Tanh);
        let params = GcnParams::init(&cfg, &mut rng);
        let g = WeightedGraph {
            node_count: 5,
            edges: vec![Edge::new(0, 1, 1.0), Edge::new(1, 2, 0.5), Edge::new(3, 4, 2.0), Edge::new(0, 4, 1.5)],
        };
        let adj = normalized_adjacency(&g, 5).unwrap();
        let h0 = Matrix::random_uniform(5, 3, 1.0, &mut rng);
        let perm = [3, 0, 4, 1, 2];
        let p_adj = Matrix::from_fn(5, 5, |i, j| adj[(perm[i], perm[j])]);
        let base = gcn_forward(&h0, &adj, &params, &cfg).unwrap();
        let permuted = gcn_forward(&h0.permute_rows(&perm), &p_adj, &params, &cfg).unwrap();
        assert!(permuted.output().max_abs_diff(&base.output().permute_rows(&perm)) < 1e-12);
    }
}
