//! Parameterised layers built from the primitives in `ops`.

use rand::Rng;

use super::tensor::{Scalar, Tensor};
use super::var::Var;

/// Visits every parameter of a layer or model in a fixed order.
pub trait Parameters<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Var<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Var<T>));

    fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, v| n += v.value().len());
        n
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Uniform `±sqrt(6 / fan_in)` initialisation (He, for ReLU stacks).
pub fn he_uniform<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape, data)
}

/// Uniform `±sqrt(1 / fan_in)` initialisation for gate and output layers.
pub fn lecun_uniform<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape, data)
}

/// Fully connected layer applied to every row.
#[derive(Clone, Debug)]
pub struct Linear<T: Scalar> {
    pub weight: Var<T>,
    pub bias: Var<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng>(rng: &mut R, inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Var::leaf(he_uniform(rng, &[inputs, outputs], inputs)),
            bias: Var::leaf(Tensor::zeros(&[outputs])),
        }
    }

    pub fn from_tensors(weight: Tensor<T>, bias: Tensor<T>) -> Self {
        Self {
            weight: Var::leaf(weight),
            bias: Var::leaf(bias),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Var<T>) -> Var<T> {
        x.matmul(&self.weight).add_row(&self.bias)
    }
}

impl<T: Scalar> Parameters<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Var<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Var<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Square convolution with stride 1 and "same" zero padding on `[B, H, W, C]`
/// maps, lowered to unfold + matrix product.
#[derive(Clone, Debug)]
pub struct Conv2d<T: Scalar> {
    pub kernel: usize,
    pub weight: Var<T>,
    pub bias: Var<T>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng>(rng: &mut R, kernel: usize, inputs: usize, outputs: usize) -> Self {
        let fan_in = kernel * kernel * inputs;
        Self {
            kernel,
            weight: Var::leaf(he_uniform(rng, &[fan_in, outputs], fan_in)),
            bias: Var::leaf(Tensor::zeros(&[outputs])),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0] / (self.kernel * self.kernel)
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Var<T>) -> Var<T> {
        assert_eq!(x.cols(), self.inputs(), "conv input channels");
        if self.kernel == 1 {
            x.matmul(&self.weight).add_row(&self.bias)
        } else {
            x.conv2d_same(&self.weight, &self.bias, self.kernel)
        }
    }
}

impl<T: Scalar> Parameters<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Var<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Var<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// LSTM cell shared across rows; gate order is input, forget, cell, output.
#[derive(Clone, Debug)]
pub struct LstmCell<T: Scalar> {
    pub hidden: usize,
    pub gates: Linear<T>,
}

impl<T: Scalar> LstmCell<T> {
    pub fn new<R: Rng>(rng: &mut R, inputs: usize, hidden: usize) -> Self {
        let fan_in = inputs + hidden;
        let weight = lecun_uniform(rng, &[fan_in, 4 * hidden], fan_in);
        let mut bias = Tensor::zeros(&[4 * hidden]);
        // Forget gate starts open.
        for v in &mut bias.data_mut()[hidden..2 * hidden] {
            *v = T::one();
        }
        Self {
            hidden,
            gates: Linear::from_tensors(weight, bias),
        }
    }

    /// Returns the new `(hidden, cell)` for inputs `[N, I]` and states `[N, hidden]`.
    pub fn forward(&self, x: &Var<T>, h: &Var<T>, c: &Var<T>) -> (Var<T>, Var<T>) {
        let n = self.hidden;
        let z = self.gates.forward(&Var::concat_cols(&[x, h]));
        let hc = z.lstm_gates(c);
        (hc.slice_cols(0, n), hc.slice_cols(n, n))
    }
}

impl<T: Scalar> Parameters<T> for LstmCell<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Var<T>)) {
        self.gates.visit(&join(prefix, "gates"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Var<T>)) {
        self.gates.visit_mut(&join(prefix, "gates"), f);
    }
}

pub(crate) fn join_prefix(prefix: &str, name: &str) -> String {
    join(prefix, name)
}
