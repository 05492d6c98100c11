//! Dense layers, initialization and named-parameter traversal.

use ndarray::Array2;
use rand::Rng;

use crate::scalar::Scalar;
use crate::tape::{Param, Tape, Var};

/// Walks every learnable matrix under a stable dotted name.
pub trait Parameters<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Uniform samples in `[-bound, bound]`.
pub fn uniform<T: Scalar>(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Array2<T> {
    Array2::from_shape_simple_fn((rows, cols), || T::c(rng.gen_range(-bound..=bound)))
}

/// Glorot bound for a `fan_in → fan_out` map.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// He bound for a ReLU layer with `fan_in` inputs.
pub fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// `y = x·W + b` with `W` stored `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(weight: Array2<T>, bias: Array2<T>) -> Self {
        debug_assert_eq!(bias.dim(), (1, weight.ncols()));
        Self {
            weight: Param::new(weight),
            bias: Param::new(bias),
        }
    }

    pub fn init(fan_in: usize, fan_out: usize, bound: f64, rng: &mut impl Rng) -> Self {
        Self::new(uniform(fan_in, fan_out, bound, rng), Array2::zeros((1, fan_out)))
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn forward<'a>(&'a self, tape: &mut Tape<'a, T>, x: Var) -> Var {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        let h = tape.matmul(x, w);
        tape.add_row(h, b)
    }
}

impl<T> Parameters<T> for Linear<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// ReLU multilayer perceptron; the last layer is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<Linear<T>>,
}

impl<T: Scalar> Mlp<T> {
    /// `widths` lists every layer size including input and output.
    pub fn init(widths: &[usize], rng: &mut impl Rng) -> Self {
        let n = widths.len() - 1;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let bound = if i + 1 == n {
                    xavier_bound(w[0], w[1])
                } else {
                    he_bound(w[0])
                };
                Linear::init(w[0], w[1], bound, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn forward<'a>(&'a self, tape: &mut Tape<'a, T>, mut x: Var) -> Var {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, x);
            if i != last {
                x = tape.relu(x);
            }
        }
        x
    }

    /// Zeroes the output layer, making the MLP the constant-zero map.
    pub fn zero_output(&mut self) {
        let last = self.layers.last_mut().expect("at least one layer");
        last.weight.value.fill(T::zero());
        last.bias.value.fill(T::zero());
    }
}

impl<T> Parameters<T> for Mlp<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("l{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("l{i}")), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mlp_names_are_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::<f32>::init(&[4, 3, 1], &mut rng);
        let mut names = Vec::new();
        mlp.visit("head.score", &mut |n, _| names.push(n));
        assert_eq!(
            names,
            vec![
                "head.score.l0.weight",
                "head.score.l0.bias",
                "head.score.l1.weight",
                "head.score.l1.bias"
            ]
        );
    }

    #[test]
    fn zeroed_output_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut mlp = Mlp::<f64>::init(&[4, 8, 1], &mut rng);
        mlp.zero_output();
        let mut t = Tape::new();
        let x = t.constant(Array2::from_elem((2, 4), 3.0));
        let y = mlp.forward(&mut t, x);
        assert!(t.value(y).iter().all(|&v| v == 0.0));
    }
}
