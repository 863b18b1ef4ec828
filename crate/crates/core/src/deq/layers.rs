//! Concrete layer families.
//!
//! Batches are stored row-wise: `z` is `[batch, d_z]` and `x` is `[batch, d_x]`.

use rand::Rng;
use rand_distr::StandardNormal;

use super::params::ParamSet;
use super::EquilibriumModel;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn gaussian(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// `f(z; x) = W₂ᵀ ReLU(W₁ z + U x + b)` with scalar `z` and `x`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticBlock {
    params: ParamSet,
    hidden: usize,
}

impl SyntheticBlock {
    pub const KIND: &'static str = "synthetic-block";
    pub const HIDDEN: usize = 50;

    pub fn zeros(hidden: usize) -> Self {
        let mut params = ParamSet::new();
        params.insert("W1", Tensor::zeros(&[hidden, 1]));
        params.insert("W2", Tensor::zeros(&[hidden, 1]));
        params.insert("U", Tensor::zeros(&[hidden, 1]));
        params.insert("b", Tensor::zeros(&[hidden]));
        SyntheticBlock { params, hidden }
    }

    /// All parameters drawn i.i.d. from `N(0, std²)`.
    pub fn init(hidden: usize, std: f64, rng: &mut impl Rng) -> Self {
        let mut params = ParamSet::new();
        params.insert("W1", gaussian(rng, &[hidden, 1], std));
        params.insert("W2", gaussian(rng, &[hidden, 1], std));
        params.insert("U", gaussian(rng, &[hidden, 1], std));
        params.insert("b", gaussian(rng, &[hidden], std));
        SyntheticBlock { params, hidden }
    }

    pub fn from_params(params: ParamSet) -> Result<Self> {
        let w1 = params
            .get("W1")
            .ok_or_else(|| Error::shape("synthetic block: missing W1", &[], &[]))?;
        let hidden = w1.rows();
        let expect: [(&str, Vec<usize>); 4] = [
            ("W1", vec![hidden, 1]),
            ("W2", vec![hidden, 1]),
            ("U", vec![hidden, 1]),
            ("b", vec![hidden]),
        ];
        let names: Vec<&str> = params.names().collect();
        if names != ["W1", "W2", "U", "b"] {
            return Err(Error::InvalidConfig(vec![format!(
                "synthetic block expects parameters [W1, W2, U, b], found {names:?}"
            )]));
        }
        for (name, shape) in &expect {
            let t = params.get(name).expect("checked above");
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("synthetic block parameter", shape, t.shape()));
            }
        }
        Ok(SyntheticBlock { params, hidden })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Closed-form `∂f/∂z = Σⱼ W₂ⱼ · 1[pre-activationⱼ > 0] · W₁ⱼ` at a single `(z, x)`.
    pub fn analytic_jacobian(&self, z: f64, x: f64) -> f64 {
        let p = |n| self.params.get(n).expect("parameter present").data();
        let (w1, w2, u, b) = (p("W1"), p("W2"), p("U"), p("b"));
        (0..self.hidden)
            .filter(|&j| w1[j] * z + u[j] * x + b[j] > 0.0)
            .map(|j| w2[j] * w1[j])
            .sum()
    }
}

impl EquilibriumModel for SyntheticBlock {
    fn kind(&self) -> &'static str {
        Self::KIND
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn dims(&self) -> (usize, usize) {
        (1, 1)
    }

    fn apply<'g>(&self, z: Var<'g>, x: Var<'g>, p: &[Var<'g>]) -> Result<Var<'g>> {
        let (w1, w2, u, b) = (&p[0], &p[1], &p[2], &p[3]);
        let pre = z
            .matmul(&w1.transpose()?)?
            .add(&x.matmul(&u.transpose()?)?)?
            .add_bias(b)?;
        pre.relu()?.matmul(w2)
    }

    fn eval(&self, z: &Tensor, x: &Tensor) -> Result<Tensor> {
        if z.shape().len() != 2 || z.cols() != 1 || x.shape() != z.shape() {
            return Err(Error::shape("synthetic block", z.shape(), x.shape()));
        }
        let p = |n| self.params.get(n).expect("parameter present").data();
        let (w1, w2, u, b) = (p("W1"), p("W2"), p("U"), p("b"));
        let out: Vec<f64> = z
            .data()
            .iter()
            .zip(x.data())
            .map(|(&zi, &xi)| {
                (0..self.hidden)
                    .map(|j| w2[j] * (w1[j] * zi + u[j] * xi + b[j]).max(0.0))
                    .sum()
            })
            .collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "synthetic block" });
        }
        Tensor::matrix(z.rows(), 1, out)
    }
}

/// `f(z; x) = A z + x`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer {
    params: ParamSet,
}

impl LinearLayer {
    pub const KIND: &'static str = "linear";

    pub fn new(a: Tensor) -> Self {
        assert_eq!(a.shape().len(), 2);
        assert_eq!(a.rows(), a.cols(), "A must be square");
        let mut params = ParamSet::new();
        params.insert("A", a);
        LinearLayer { params }
    }
}

impl EquilibriumModel for LinearLayer {
    fn kind(&self) -> &'static str {
        Self::KIND
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn dims(&self) -> (usize, usize) {
        let d = self.params.get("A").expect("A present").rows();
        (d, d)
    }

    fn apply<'g>(&self, z: Var<'g>, x: Var<'g>, p: &[Var<'g>]) -> Result<Var<'g>> {
        z.matmul(&p[0].transpose()?)?.add(&x)
    }
}

/// `f(z; x) = tanh(W z + x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TanhLayer {
    params: ParamSet,
}

impl TanhLayer {
    pub const KIND: &'static str = "tanh";

    pub fn new(w: Tensor) -> Self {
        assert_eq!(w.shape().len(), 2);
        assert_eq!(w.rows(), w.cols(), "W must be square");
        let mut params = ParamSet::new();
        params.insert("W", w);
        TanhLayer { params }
    }
}

impl EquilibriumModel for TanhLayer {
    fn kind(&self) -> &'static str {
        Self::KIND
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn dims(&self) -> (usize, usize) {
        let d = self.params.get("W").expect("W present").rows();
        (d, d)
    }

    fn apply<'g>(&self, z: Var<'g>, x: Var<'g>, p: &[Var<'g>]) -> Result<Var<'g>> {
        z.matmul(&p[0].transpose()?)?.add(&x)?.tanh()
    }
}

/// Applies a model with every parameter recorded as a differentiable leaf.
pub fn apply_with_leaves<'g, M: EquilibriumModel + ?Sized>(
    model: &M,
    graph: &'g Graph,
    z: Var<'g>,
    x: Var<'g>,
) -> Result<(Var<'g>, Vec<Var<'g>>)> {
    let params: Vec<Var<'g>> = model.params().tensors().map(|t| graph.leaf(t.clone())).collect();
    let out = model.apply(z, x, &params)?;
    Ok((out, params))
}
