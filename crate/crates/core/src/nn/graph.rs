//! Reverse-mode automatic differentiation over whole tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its output
//! value, its parent indices and a backward closure. [`Graph::backward`]
//! walks the tape in reverse from a scalar root and accumulates gradients
//! into every node that requires one. Each primitive supplies a hand-written
//! backward rule; `nn::gradcheck` verifies them against finite differences.

use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Inputs handed to a backward closure.
pub struct BackwardCtx<'a, T> {
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    pub grad: &'a Tensor<T>,
    /// `needs[i]` is false when parent `i` does not require a gradient.
    pub needs: Vec<bool>,
}

pub type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    record: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// A recording graph.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// A graph that stores values only. `backward` on it yields no gradients.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let requires_grad = self.record;
        self.push(value, Vec::new(), None, requires_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Vec::new(), None, false)
    }

    /// Copies `v` into a new constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    /// Appends an operation node. `backward` is dropped when no parent needs a
    /// gradient or the graph does not record.
    pub fn apply(&mut self, value: Tensor<T>, parents: &[Var], backward: BackwardFn<T>) -> Var {
        let requires_grad = self.record && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let parents: Vec<usize> = parents.iter().map(|p| p.0).collect();
        if requires_grad {
            self.push(value, parents, Some(backward), true)
        } else {
            self.push(value, parents, None, false)
        }
    }

    fn push(
        &mut self,
        value: Tensor<T>,
        parents: Vec<usize>,
        backward: Option<BackwardFn<T>>,
        requires_grad: bool,
    ) -> Var {
        self.nodes.push(Node {
            value,
            parents,
            backward,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Gradients of the scalar `root` with respect to every leaf created by
    /// [`Graph::leaf`].
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.nodes[root.0].value.len() != 1 {
            return dim_err(format!(
                "backward root must be a scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        let root_shape = self.nodes[root.0].value.shape().to_vec();
        grads[root.0] = Some(Tensor::full(&root_shape, T::one()));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                output: &node.value,
                grad: &grad,
                needs: node
                    .parents
                    .iter()
                    .map(|&p| self.nodes[p].requires_grad)
                    .collect(),
            };
            let parent_grads = backward(&ctx)?;
            if parent_grads.len() != node.parents.len() {
                return Err(Error::Dimension(format!(
                    "backward of node {i} returned {} gradients for {} parents",
                    parent_grads.len(),
                    node.parents.len()
                )));
            }
            for (&p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                if g.shape() != self.nodes[p].value.shape() {
                    return dim_err(format!(
                        "gradient shape {:?} does not match node shape {:?}",
                        g.shape(),
                        self.nodes[p].value.shape()
                    ));
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        // Intermediate gradients were consumed above; only leaves remain.
        Ok(Gradients { grads })
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn unary<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    f: impl Fn(T) -> T,
    df: impl Fn(T, T) -> T + 'static,
) -> Var {
    // df(input, output) is the local derivative.
    let value = g.value(x).map(f);
    g.apply(
        value,
        &[x],
        Box::new(move |ctx| {
            let input = ctx.inputs[0].data();
            let out = ctx.output.data();
            let data = ctx
                .grad
                .data()
                .iter()
                .zip(input.iter().zip(out))
                .map(|(&gr, (&i, &o))| gr * df(i, o))
                .collect();
            Ok(vec![Some(Tensor::new(ctx.grad.shape().to_vec(), data)?)])
        }),
    )
}

/// Elementwise and structural primitives.
impl<T: Scalar> Graph<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.apply(
            value,
            &[a, b],
            Box::new(|ctx| {
                let g = ctx.grad.clone();
                Ok(vec![
                    ctx.needs[0].then(|| g.clone()),
                    ctx.needs[1].then_some(g),
                ])
            }),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.apply(
            value,
            &[a, b],
            Box::new(|ctx| {
                Ok(vec![
                    ctx.needs[0].then(|| ctx.grad.clone()),
                    ctx.needs[1].then(|| ctx.grad.scale(-T::one())),
                ])
            }),
        ))
    }

    /// Sum of scalar nodes with per-term weights.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut total = T::zero();
        for &(v, w) in terms {
            if self.value(v).len() != 1 {
                return dim_err("weighted_sum expects scalar terms");
            }
            total = total + w * self.scalar(v);
        }
        let parents: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let weights: Vec<T> = terms.iter().map(|t| t.1).collect();
        Ok(self.apply(
            Tensor::scalar(total),
            &parents,
            Box::new(move |ctx| {
                let g = ctx.grad.data()[0];
                Ok(weights
                    .iter()
                    .zip(&ctx.needs)
                    .map(|(&w, &need)| need.then(|| Tensor::scalar(g * w)))
                    .collect())
            }),
        ))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        unary(self, x, move |v| v * s, move |_, _| s)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        unary(
            self,
            x,
            |v| if v > T::zero() { v } else { T::zero() },
            |i, _| if i > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        unary(
            self,
            x,
            move |v| if v > T::zero() { v } else { v * slope },
            move |i, _| if i > T::zero() { T::one() } else { slope },
        )
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        unary(self, x, |v| v.tanh(), |_, o| T::one() - o * o)
    }

    /// Clamp to `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        unary(
            self,
            x,
            move |v| v.max(lo).min(hi),
            move |i, _| {
                if i >= lo && i <= hi {
                    T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let in_shape = self.shape(x).to_vec();
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.apply(
            value,
            &[x],
            Box::new(move |ctx| Ok(vec![Some(ctx.grad.clone().reshape(in_shape.clone())?)])),
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        let shape = self.shape(x).to_vec();
        self.apply(
            Tensor::scalar(total),
            &[x],
            Box::new(move |ctx| Ok(vec![Some(Tensor::full(&shape, ctx.grad.data()[0]))])),
        )
    }

    /// `Σ x ⊙ w` against a constant weight tensor; handy for gradient checks.
    pub fn dot_const(&mut self, x: Var, w: &Tensor<T>) -> Result<Var> {
        self.value(x).expect_same_shape(w)?;
        let total: T = self
            .value(x)
            .data()
            .iter()
            .zip(w.data())
            .map(|(&a, &b)| a * b)
            .sum();
        let w = w.clone();
        Ok(self.apply(
            Tensor::scalar(total),
            &[x],
            Box::new(move |ctx| Ok(vec![Some(w.scale(ctx.grad.data()[0]))])),
        ))
    }

    /// `mu + exp(logvar / 2) ⊙ eps` with `eps` fixed.
    pub fn reparameterize(&mut self, mu: Var, logvar: Var, eps: &Tensor<T>) -> Result<Var> {
        self.value(mu).expect_same_shape(self.value(logvar))?;
        self.value(mu).expect_same_shape(eps)?;
        let half = T::from_f64_lossy(0.5);
        let value = Tensor::new(
            self.shape(mu).to_vec(),
            self.value(mu)
                .data()
                .iter()
                .zip(self.value(logvar).data())
                .zip(eps.data())
                .map(|((&m, &lv), &e)| m + (lv * half).exp() * e)
                .collect(),
        )?;
        let eps = eps.clone();
        Ok(self.apply(
            value,
            &[mu, logvar],
            Box::new(move |ctx| {
                let dmu = ctx.needs[0].then(|| ctx.grad.clone());
                let dlv = if ctx.needs[1] {
                    let data = ctx
                        .grad
                        .data()
                        .iter()
                        .zip(ctx.inputs[1].data())
                        .zip(eps.data())
                        .map(|((&g, &lv), &e)| g * e * half * (lv * half).exp())
                        .collect();
                    Some(Tensor::new(ctx.grad.shape().to_vec(), data)?)
                } else {
                    None
                };
                Ok(vec![dmu, dlv])
            }),
        ))
    }

    /// Concatenates along the batch axis.
    pub fn concat_batch(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Tensor::stack(&tensors)?;
        let sizes: Vec<usize> = tensors.iter().map(|t| t.shape()[0]).collect();
        Ok(self.apply(
            value,
            parts,
            Box::new(move |ctx| {
                let mut start = 0;
                let mut out = Vec::with_capacity(sizes.len());
                for (&n, &need) in sizes.iter().zip(&ctx.needs) {
                    out.push(if need {
                        Some(ctx.grad.batch_slice(start, n)?)
                    } else {
                        None
                    });
                    start += n;
                }
                Ok(out)
            }),
        ))
    }

    /// Fails with a located error when `v` holds a non-finite value.
    pub fn ensure_finite(&self, v: Var, what: &str) -> Result<()> {
        self.value(v).ensure_finite(what)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_leaf_accumulates_gradients() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64(vec![2], &[1.0, -2.0]).unwrap());
        let y = g.add(x, x).unwrap();
        let s = g.sum_all(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64(vec![1], &[3.0]).unwrap());
        let d = g.detach(x);
        let y = g.add(x, d).unwrap();
        let s = g.sum_all(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0]);
        assert!(grads.get(d).is_none());
    }

    #[test]
    fn inference_graph_records_no_gradients() {
        let mut g = Graph::<f64>::inference();
        let x = g.leaf(Tensor::from_f64(vec![1], &[3.0]).unwrap());
        let s = g.sum_all(x);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn backward_needs_scalar_root() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64(vec![2], &[1.0, 2.0]).unwrap());
        assert!(g.backward(x).is_err());
    }
}
