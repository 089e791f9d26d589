//! Reverse-mode automatic differentiation on dynamically shaped arrays.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles during a
//! forward pass. Calling [`Tape::backward`] on a scalar output replays the
//! recorded steps in reverse and accumulates gradients for every node,
//! including the leaves that hold model parameters.
//!
//! The engine is deliberately small: it supports exactly the operations the
//! codec, loss, and channel stack need, each with a hand-written adjoint.
//! Everything is generic over [`Scalar`] so the same graph code runs in `f32`
//! for training and in `f64` for finite-difference gradient verification.

mod fused;
mod matrix;
mod scalar;

pub use scalar::Scalar;

use ndarray::{ArrayD, IxDyn};
use num_traits::Float;
use std::cell::{Ref, RefCell};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

/// Adjoint callback: receives all forward values, the gradient flowing into
/// the step's output, and a sink that accumulates contributions into parents.
type BackFn<T> = Box<dyn Fn(&[ArrayD<T>], &ArrayD<T>, &mut dyn FnMut(usize, ArrayD<T>))>;

struct Step<T> {
    out: usize,
    back: BackFn<T>,
}

struct TapeInner<T> {
    values: Vec<ArrayD<T>>,
    steps: Vec<Step<T>>,
}

/// Records a forward computation and differentiates it in reverse.
pub struct Tape<T: Scalar> {
    inner: RefCell<TapeInner<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(TapeInner {
                values: Vec::new(),
                steps: Vec::new(),
            }),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Introduces an input node. Gradients are accumulated for leaves like any
    /// other node; callers decide which leaf gradients they care about.
    pub fn leaf(&self, value: ArrayD<T>) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.values.push(value);
        Var(inner.values.len() - 1)
    }

    /// Convenience leaf for a 0-dimensional scalar node.
    pub fn scalar(&self, value: T) -> Var {
        self.leaf(ndarray::arr0(value).into_dyn())
    }

    /// Borrows the forward value of a node.
    pub fn value(&self, v: Var) -> Ref<'_, ArrayD<T>> {
        Ref::map(self.inner.borrow(), |inner| &inner.values[v.0])
    }

    /// Clones the forward value of a node.
    pub fn value_owned(&self, v: Var) -> ArrayD<T> {
        self.inner.borrow().values[v.0].clone()
    }

    /// Forward value of a 0-dimensional node as a plain scalar.
    pub fn scalar_value(&self, v: Var) -> T {
        let inner = self.inner.borrow();
        let arr = &inner.values[v.0];
        assert_eq!(arr.ndim(), 0, "scalar_value called on non-scalar node");
        arr.iter().copied().next().expect("empty scalar node")
    }

    pub(crate) fn shape_of(&self, v: Var) -> Vec<usize> {
        self.inner.borrow().values[v.0].shape().to_vec()
    }

    /// Records `value` as the output of a differentiable step.
    pub(crate) fn push(&self, value: ArrayD<T>, back: BackFn<T>) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.values.push(value);
        let out = inner.values.len() - 1;
        inner.steps.push(Step { out, back });
        Var(out)
    }

    /// Runs the adjoint pass from a scalar root and returns all gradients.
    ///
    /// Gradients of nodes that do not influence the root are `None`.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let inner = self.inner.borrow();
        assert_eq!(
            inner.values[root.0].ndim(),
            0,
            "backward root must be a scalar node"
        );
        let mut grads: Vec<Option<ArrayD<T>>> = vec![None; inner.values.len()];
        grads[root.0] = Some(ndarray::arr0(T::one()).into_dyn());
        for step in inner.steps.iter().rev() {
            let Some(g) = grads[step.out].take() else {
                continue;
            };
            if step.out == root.0 {
                // Keep the seed so the root's own gradient remains queryable.
                grads[step.out] = Some(g.clone());
            }
            let mut sink = |parent: usize, contrib: ArrayD<T>| {
                debug_assert_eq!(
                    inner.values[parent].shape(),
                    contrib.shape(),
                    "gradient shape mismatch for node {parent}"
                );
                match &mut grads[parent] {
                    Some(acc) => *acc += &contrib,
                    slot @ None => *slot = Some(contrib),
                }
            };
            (step.back)(&inner.values, &g, &mut sink);
        }
        Gradients { grads }
    }
}

/// Result of a [`Tape::backward`] pass.
pub struct Gradients<T> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the root with respect to `v`, if `v` influenced the root.
    pub fn get(&self, v: Var) -> Option<&ArrayD<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Removes and returns the gradient for `v`.
    pub fn take(&mut self, v: Var) -> Option<ArrayD<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

// ---------------------------------------------------------------------------
// Elementwise and reduction operations.
// ---------------------------------------------------------------------------

impl<T: Scalar> Tape<T> {
    fn binary_elementwise(
        &self,
        a: Var,
        b: Var,
        forward: impl Fn(&ArrayD<T>, &ArrayD<T>) -> ArrayD<T>,
        back: impl Fn(&ArrayD<T>, &ArrayD<T>, &ArrayD<T>) -> (ArrayD<T>, ArrayD<T>) + 'static,
    ) -> Var {
        let (value, ai, bi) = {
            let inner = self.inner.borrow();
            let va = &inner.values[a.0];
            let vb = &inner.values[b.0];
            assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
            (forward(va, vb), a.0, b.0)
        };
        self.push(
            value,
            Box::new(move |values, g, sink| {
                let (da, db) = back(&values[ai], &values[bi], g);
                sink(ai, da);
                sink(bi, db);
            }),
        )
    }

    fn unary_elementwise(
        &self,
        a: Var,
        forward: impl Fn(&ArrayD<T>) -> ArrayD<T>,
        back: impl Fn(&ArrayD<T>, &ArrayD<T>) -> ArrayD<T> + 'static,
    ) -> Var {
        let value = forward(&self.inner.borrow().values[a.0]);
        let ai = a.0;
        self.push(
            value,
            Box::new(move |values, g, sink| sink(ai, back(&values[ai], g))),
        )
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary_elementwise(a, b, |x, y| x + y, |_, _, g| (g.clone(), g.clone()))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary_elementwise(
            a,
            b,
            |x, y| x - y,
            |_, _, g| (g.clone(), g.mapv(|v| -v)),
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary_elementwise(a, b, |x, y| x * y, |x, y, g| (g * y, g * x))
    }

    /// Elementwise division `a / b`.
    pub fn div(&self, a: Var, b: Var) -> Var {
        self.binary_elementwise(
            a,
            b,
            |x, y| x / y,
            |x, y, g| {
                let da = g / y;
                let db = ndarray::Zip::from(g)
                    .and(x)
                    .and(y)
                    .map_collect(|&g, &x, &y| -g * x / (y * y));
                (da, db)
            },
        )
    }

    pub fn add_scalar(&self, a: Var, c: T) -> Var {
        self.unary_elementwise(a, |x| x.mapv(|v| v + c), |_, g| g.clone())
    }

    pub fn mul_scalar(&self, a: Var, c: T) -> Var {
        self.unary_elementwise(a, move |x| x.mapv(|v| v * c), move |_, g| g.mapv(|v| v * c))
    }

    /// Adds an untracked constant array (for example a channel noise draw).
    pub fn add_const(&self, a: Var, c: &ArrayD<T>) -> Var {
        assert_eq!(self.shape_of(a), c.shape(), "add_const shape mismatch");
        self.unary_elementwise(a, |x| x + c, |_, g| g.clone())
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary_elementwise(
            a,
            |x| x.mapv(|v| v * v),
            |x, g| {
                let two = T::from_f64(2.0);
                ndarray::Zip::from(g).and(x).map_collect(|&g, &x| g * two * x)
            },
        )
    }

    /// Elementwise square root. Inputs must be strictly positive for a finite
    /// gradient.
    pub fn sqrt(&self, a: Var) -> Var {
        self.unary_elementwise(
            a,
            |x| x.mapv(Float::sqrt),
            |x, g| {
                let half = T::from_f64(0.5);
                ndarray::Zip::from(g)
                    .and(x)
                    .map_collect(|&g, &x| g * half / x.sqrt())
            },
        )
    }

    /// Elementwise absolute value; the subgradient at zero is taken as zero.
    pub fn abs(&self, a: Var) -> Var {
        self.unary_elementwise(
            a,
            |x| x.mapv(Float::abs),
            |x, g| {
                ndarray::Zip::from(g).and(x).map_collect(|&g, &x| {
                    if x > T::zero() {
                        g
                    } else if x < T::zero() {
                        -g
                    } else {
                        T::zero()
                    }
                })
            },
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        fn sig<T: Scalar>(v: T) -> T {
            T::one() / (T::one() + (-v).exp())
        }
        self.unary_elementwise(
            a,
            |x| x.mapv(sig),
            |x, g| {
                ndarray::Zip::from(g).and(x).map_collect(|&g, &x| {
                    let s = sig(x);
                    g * s * (T::one() - s)
                })
            },
        )
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary_elementwise(
            a,
            |x| x.mapv(|v| if v > T::zero() { v } else { T::zero() }),
            |x, g| {
                ndarray::Zip::from(g)
                    .and(x)
                    .map_collect(|&g, &x| if x > T::zero() { g } else { T::zero() })
            },
        )
    }

    /// Gaussian error linear unit in its tanh approximation.
    pub fn gelu(&self, a: Var) -> Var {
        let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
        let k = T::from_f64(0.044715);
        let half = T::from_f64(0.5);
        self.unary_elementwise(
            a,
            move |x| {
                x.mapv(|v| {
                    let u = c * (v + k * v * v * v);
                    half * v * (T::one() + u.tanh())
                })
            },
            move |x, g| {
                ndarray::Zip::from(g).and(x).map_collect(|&g, &v| {
                    let u = c * (v + k * v * v * v);
                    let t = u.tanh();
                    let sech2 = T::one() - t * t;
                    let du = c * (T::one() + T::from_f64(3.0) * k * v * v);
                    g * (half * (T::one() + t) + half * v * sech2 * du)
                })
            },
        )
    }

    /// Sum of all elements, producing a 0-dimensional node.
    pub fn sum(&self, a: Var) -> Var {
        let (value, shape) = {
            let inner = self.inner.borrow();
            let x = &inner.values[a.0];
            (x.sum(), x.raw_dim())
        };
        let ai = a.0;
        self.push(
            ndarray::arr0(value).into_dyn(),
            Box::new(move |_, g, sink| {
                let gv = g.iter().copied().next().expect("scalar gradient");
                sink(ai, ArrayD::from_elem(shape.clone(), gv));
            }),
        )
    }

    /// Mean of all elements, producing a 0-dimensional node.
    pub fn mean(&self, a: Var) -> Var {
        let n = self.inner.borrow().values[a.0].len();
        assert!(n > 0, "mean of empty array");
        let total = self.sum(a);
        self.mul_scalar(total, T::one() / T::from_f64(n as f64))
    }

    /// Broadcast-multiplies an array by a 0-dimensional scalar node.
    pub fn mul_scalar_var(&self, a: Var, s: Var) -> Var {
        let (value, ai, si) = {
            let inner = self.inner.borrow();
            let sv = &inner.values[s.0];
            assert_eq!(sv.ndim(), 0, "mul_scalar_var expects a scalar node");
            let sc = sv.iter().copied().next().expect("scalar node");
            (inner.values[a.0].mapv(|v| v * sc), a.0, s.0)
        };
        self.push(
            value,
            Box::new(move |values, g, sink| {
                let sc = values[si].iter().copied().next().expect("scalar node");
                sink(ai, g.mapv(|v| v * sc));
                let ds = (g * &values[ai]).sum();
                sink(si, ndarray::arr0(ds).into_dyn());
            }),
        )
    }

    /// Reinterprets the elements of `a` under a new shape (row-major order).
    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let (value, old_shape) = {
            let inner = self.inner.borrow();
            let x = &inner.values[a.0];
            let old = x.raw_dim();
            let v = x
                .clone()
                .into_shape_with_order(IxDyn(shape))
                .expect("reshape: element count mismatch");
            (v, old)
        };
        let ai = a.0;
        self.push(
            value,
            Box::new(move |_, g, sink| {
                let back = g
                    .clone()
                    .into_shape_with_order(old_shape.clone())
                    .expect("reshape backward");
                sink(ai, back);
            }),
        )
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;

    /// Central-difference gradient check for a scalar-valued graph builder.
    ///
    /// `build` must construct the same graph each call from the provided leaf
    /// values. Returns the maximum relative error over all tested elements.
    pub fn check_gradients(
        inputs: &[ArrayD<f64>],
        eps: f64,
        build: impl Fn(&Tape<f64>, &[Var]) -> Var,
    ) -> f64 {
        let all: Vec<Vec<usize>> = inputs.iter().map(|x| (0..x.len()).collect()).collect();
        check_gradients_at(inputs, eps, &all, build)
    }

    /// [`check_gradients`] restricted to chosen flat element indices per
    /// input, for graphs too expensive to probe exhaustively.
    pub fn check_gradients_at(
        inputs: &[ArrayD<f64>],
        eps: f64,
        indices: &[Vec<usize>],
        build: impl Fn(&Tape<f64>, &[Var]) -> Var,
    ) -> f64 {
        let tape = Tape::<f64>::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let root = build(&tape, &vars);
        let grads = tape.backward(root);

        let mut worst = 0.0f64;
        for (i, input) in inputs.iter().enumerate() {
            let analytic = grads
                .get(vars[i])
                .cloned()
                .unwrap_or_else(|| ArrayD::zeros(input.raw_dim()));
            for &idx in &indices[i] {
                let mut plus = inputs.to_vec();
                plus[i].as_slice_mut().unwrap()[idx] += eps;
                let mut minus = inputs.to_vec();
                minus[i].as_slice_mut().unwrap()[idx] -= eps;
                let f = |ins: &[ArrayD<f64>]| {
                    let t = Tape::<f64>::new();
                    let vs: Vec<Var> = ins.iter().map(|x| t.leaf(x.clone())).collect();
                    let r = build(&t, &vs);
                    t.scalar_value(r)
                };
                let numeric = (f(&plus) - f(&minus)) / (2.0 * eps);
                let a = analytic.as_slice().unwrap()[idx];
                let denom = a.abs().max(numeric.abs()).max(1e-8);
                worst = worst.max((a - numeric).abs() / denom);
            }
        }
        worst
    }

    pub fn rand_array(shape: &[usize], seed: u64, lo: f64, hi: f64) -> ArrayD<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(lo..hi))
    }
}

#[cfg(test)]
mod tests {
    use super::testutil::{check_gradients, rand_array};
    use super::*;

    #[test]
    fn forward_values_match_direct_evaluation() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(ndarray::arr1(&[1.0, -2.0, 3.0]).into_dyn());
        let b = tape.leaf(ndarray::arr1(&[0.5, 4.0, -1.0]).into_dyn());
        let sum = tape.add(a, b);
        let prod = tape.mul(sum, b);
        let out = tape.sum(prod);
        // (1.5)(0.5) + (2)(4) + (2)(-1) = 0.75 + 8 - 2
        assert!((tape.scalar_value(out) - 6.75).abs() < 1e-12);
    }

    #[test]
    fn mean_of_constant_is_constant() {
        let tape = Tape::<f32>::new();
        let a = tape.leaf(ArrayD::from_elem(IxDyn(&[4, 5]), 3.0f32));
        let m = tape.mean(a);
        assert!((tape.scalar_value(m) - 3.0).abs() < 1e-6);
    }

    #[test]
    fn gradient_of_sum_is_ones() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(rand_array(&[3, 4], 7, -1.0, 1.0));
        let s = tape.sum(a);
        let grads = tape.backward(s);
        let g = grads.get(a).unwrap();
        assert!(g.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn unused_leaf_has_no_gradient() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(rand_array(&[2, 2], 1, -1.0, 1.0));
        let b = tape.leaf(rand_array(&[2, 2], 2, -1.0, 1.0));
        let s = tape.sum(a);
        let grads = tape.backward(s);
        assert!(grads.get(b).is_none());
    }

    #[test]
    fn elementwise_gradients_match_central_differences() {
        let a = rand_array(&[3, 4], 11, 0.3, 1.7);
        let b = rand_array(&[3, 4], 13, 0.3, 1.7);
        let err = check_gradients(&[a, b], 1e-6, |t, v| {
            let x = t.mul(v[0], v[1]);
            let y = t.div(v[0], v[1]);
            let z = t.sub(x, y);
            let w = t.add(z, v[1]);
            t.mean(w)
        });
        assert!(err < 1e-7, "max relative error {err}");
    }

    #[test]
    fn nonlinearity_gradients_match_central_differences() {
        let a = rand_array(&[4, 3], 17, -2.0, 2.0);
        let err = check_gradients(&[a], 1e-6, |t, v| {
            let g = t.gelu(v[0]);
            let s = t.sigmoid(v[0]);
            let q = t.square(v[0]);
            let sum = t.add(g, s);
            let sum = t.add(sum, q);
            t.mean(sum)
        });
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn abs_and_relu_gradients_away_from_zero() {
        let mut a = rand_array(&[5, 5], 23, 0.2, 2.0);
        // Mix in strictly negative entries so both branches are exercised.
        for (i, v) in a.iter_mut().enumerate() {
            if i % 2 == 0 {
                *v = -*v;
            }
        }
        let err = check_gradients(&[a], 1e-6, |t, v| {
            let x = t.abs(v[0]);
            let y = t.relu(v[0]);
            let s = t.add(x, y);
            t.sum(s)
        });
        assert!(err < 1e-7, "max relative error {err}");
    }

    #[test]
    fn sqrt_gradient_matches_central_differences() {
        let a = rand_array(&[6], 29, 0.5, 3.0);
        let err = check_gradients(&[a], 1e-7, |t, v| {
            let r = t.sqrt(v[0]);
            t.sum(r)
        });
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn scalar_broadcast_gradients() {
        let a = rand_array(&[3, 3], 31, -1.0, 1.0);
        let s = rand_array(&[], 37, 0.5, 1.5);
        let err = check_gradients(&[a, s], 1e-6, |t, v| {
            let y = t.mul_scalar_var(v[0], v[1]);
            let y = t.square(y);
            t.mean(y)
        });
        assert!(err < 1e-7, "max relative error {err}");
    }

    #[test]
    fn reshape_preserves_values_and_gradients() {
        let a = rand_array(&[2, 6], 41, -1.0, 1.0);
        let err = check_gradients(&[a.clone()], 1e-6, |t, v| {
            let r = t.reshape(v[0], &[3, 4]);
            let sq = t.square(r);
            t.sum(sq)
        });
        assert!(err < 1e-7, "max relative error {err}");

        let tape = Tape::<f64>::new();
        let v = tape.leaf(a.clone());
        let r = tape.reshape(v, &[12]);
        assert_eq!(tape.value(r).shape(), &[12]);
        assert_eq!(
            tape.value(r).as_slice().unwrap(),
            a.as_slice().unwrap(),
            "reshape must preserve row-major element order"
        );
    }

    #[test]
    fn add_const_shifts_values_but_passes_gradient_through() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(ndarray::arr1(&[1.0, 2.0]).into_dyn());
        let c = ndarray::arr1(&[10.0, 20.0]).into_dyn();
        let y = tape.add_const(a, &c);
        assert_eq!(tape.value(y).as_slice().unwrap(), &[11.0, 22.0]);
        let s = tape.sum(y);
        let grads = tape.backward(s);
        assert!(grads.get(a).unwrap().iter().all(|&g| (g - 1.0).abs() < 1e-12));
    }

    #[test]
    fn gradient_accumulates_over_reused_nodes() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(ndarray::arr0(3.0).into_dyn());
        let y = tape.mul(a, a); // y = a^2, dy/da = 2a = 6
        let grads = tape.backward(y);
        let g = grads.get(a).unwrap().iter().copied().next().unwrap();
        assert!((g - 6.0).abs() < 1e-12);
    }
}
