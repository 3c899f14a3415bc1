use rand::Rng;
use rand_distr::StandardNormal;

use super::graph::{Graph, ParamKey, Var};
use super::{SubstrateError, Tensor};

/// Weight init standard deviation; samples beyond two deviations are redrawn.
pub const INIT_STD: f32 = 0.02;

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    /// Set once a backward pass has written into `grad` since the last step.
    pub has_grad: bool,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        Self {
            name: name.into(),
            value,
            grad,
            has_grad: false,
            trainable: true,
        }
    }

    pub fn accumulate(&mut self, g: &Tensor) {
        self.grad.add_assign(g);
        self.has_grad = true;
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
        self.has_grad = false;
    }
}

fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f32 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break z * INIT_STD;
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape product matches")
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense { in_dim: usize, out_dim: usize },
    /// Square kernel (3 or 5), stride 1 or 2, zero padding `kernel / 2`.
    Conv2d { in_c: usize, out_c: usize, kernel: usize, stride: usize },
    Relu,
    Sigmoid,
    Tanh,
    Softmax,
    /// NHWC image batch to `[n, h*w*c]`.
    Flatten,
    /// `[n, *]` to `[n, dims...]`.
    Reshape(Vec<usize>),
    Upsample2x,
    GradReversal { lambda: f32 },
}

impl Layer {
    fn param_count(&self) -> usize {
        match self {
            Layer::Dense { .. } | Layer::Conv2d { .. } => 2,
            _ => 0,
        }
    }

    fn validate(&self) -> Result<(), SubstrateError> {
        match *self {
            Layer::Conv2d { kernel, stride, .. } => {
                if !matches!(kernel, 3 | 5) || !matches!(stride, 1 | 2) {
                    return Err(SubstrateError::UnsupportedConv { kernel, stride });
                }
                Ok(())
            }
            Layer::GradReversal { lambda } if !(lambda >= 0.0) => {
                Err(SubstrateError::NegativeLambda(lambda))
            }
            _ => Ok(()),
        }
    }
}

/// A feed-forward stack of layers owning its parameters.
#[derive(Clone, Debug)]
pub struct Sequential {
    layers: Vec<Layer>,
    params: Vec<Parameter>,
}

impl Sequential {
    pub fn new<R: Rng + ?Sized>(
        prefix: &str,
        layers: Vec<Layer>,
        rng: &mut R,
    ) -> Result<Self, SubstrateError> {
        let mut params = Vec::new();
        for (i, layer) in layers.iter().enumerate() {
            layer.validate()?;
            match *layer {
                Layer::Dense { in_dim, out_dim } => {
                    params.push(Parameter::new(
                        format!("{prefix}.{i}.weight"),
                        truncated_normal(rng, vec![in_dim, out_dim]),
                    ));
                    params.push(Parameter::new(
                        format!("{prefix}.{i}.bias"),
                        Tensor::zeros(vec![out_dim]),
                    ));
                }
                Layer::Conv2d {
                    in_c,
                    out_c,
                    kernel,
                    ..
                } => {
                    params.push(Parameter::new(
                        format!("{prefix}.{i}.weight"),
                        truncated_normal(rng, vec![kernel * kernel * in_c, out_c]),
                    ));
                    params.push(Parameter::new(
                        format!("{prefix}.{i}.bias"),
                        Tensor::zeros(vec![out_c]),
                    ));
                }
                _ => {}
            }
        }
        Ok(Self { layers, params })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    /// Records the forward pass on `g`. Parameters are registered under `group`.
    pub fn forward(&self, g: &mut Graph, x: Var, group: u16) -> Result<Var, SubstrateError> {
        let mut h = x;
        let mut p = 0usize;
        for layer in &self.layers {
            h = layer_forward(layer, g, h, &self.params[p..p + layer.param_count()], group, p)?;
            p += layer.param_count();
        }
        Ok(h)
    }

    /// Forward pass with no gradient bookkeeping.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor, SubstrateError> {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let mut h = xv;
        let mut p = 0usize;
        for layer in &self.layers {
            let n = layer.param_count();
            h = layer_forward_const(layer, &mut g, h, &self.params[p..p + n])?;
            p += n;
        }
        Ok(g.value(h).clone())
    }

    /// Adds gradients recorded on `g` for this module's `group` into the parameters.
    pub fn accumulate_grads(&mut self, g: &Graph, group: u16) {
        for (key, grad) in g.param_grads() {
            if key.group == group {
                self.params[key.index as usize].accumulate(grad);
            }
        }
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }
}

fn layer_forward(
    layer: &Layer,
    g: &mut Graph,
    x: Var,
    params: &[Parameter],
    group: u16,
    first_index: usize,
) -> Result<Var, SubstrateError> {
    let register = |g: &mut Graph, k: usize| {
        let p = &params[k];
        g.param(
            p.value.clone(),
            ParamKey {
                group,
                index: (first_index + k) as u32,
            },
            p.trainable,
        )
    };
    match layer {
        Layer::Dense { in_dim, .. } => {
            check_dense_input(g, x, *in_dim)?;
            let w = register(g, 0);
            let b = register(g, 1);
            g.linear(x, w, b)
        }
        Layer::Conv2d {
            in_c,
            kernel,
            stride,
            ..
        } => {
            check_conv_input(g, x, *in_c)?;
            let w = register(g, 0);
            let b = register(g, 1);
            g.conv2d(x, w, b, *kernel, *stride)
        }
        other => shapeless_forward(other, g, x),
    }
}

fn layer_forward_const(
    layer: &Layer,
    g: &mut Graph,
    x: Var,
    params: &[Parameter],
) -> Result<Var, SubstrateError> {
    match layer {
        Layer::Dense { in_dim, .. } => {
            check_dense_input(g, x, *in_dim)?;
            let w = g.input(params[0].value.clone());
            let b = g.input(params[1].value.clone());
            g.linear(x, w, b)
        }
        Layer::Conv2d {
            in_c,
            kernel,
            stride,
            ..
        } => {
            check_conv_input(g, x, *in_c)?;
            let w = g.input(params[0].value.clone());
            let b = g.input(params[1].value.clone());
            g.conv2d(x, w, b, *kernel, *stride)
        }
        other => shapeless_forward(other, g, x),
    }
}

fn shapeless_forward(layer: &Layer, g: &mut Graph, x: Var) -> Result<Var, SubstrateError> {
    match layer {
        Layer::Relu => Ok(g.relu(x)),
        Layer::Sigmoid => Ok(g.sigmoid(x)),
        Layer::Tanh => Ok(g.tanh(x)),
        Layer::Softmax => g.softmax(x),
        Layer::Flatten => {
            let t = g.value(x);
            let shape = vec![t.rows(), t.row_len()];
            g.reshape(x, shape)
        }
        Layer::Reshape(dims) => {
            let mut shape = vec![g.value(x).rows()];
            shape.extend_from_slice(dims);
            g.reshape(x, shape)
        }
        Layer::Upsample2x => g.upsample2x(x),
        Layer::GradReversal { lambda } => g.gradient_reversal(x, *lambda),
        Layer::Dense { .. } | Layer::Conv2d { .. } => unreachable!("parametric layer"),
    }
}

fn check_dense_input(g: &Graph, x: Var, in_dim: usize) -> Result<(), SubstrateError> {
    let s = g.value(x).shape();
    if s.len() != 2 || s[1] != in_dim {
        return Err(SubstrateError::ShapeMismatch {
            op: "dense",
            left: s.to_vec(),
            right: vec![s.first().copied().unwrap_or(0), in_dim],
        });
    }
    Ok(())
}

fn check_conv_input(g: &Graph, x: Var, in_c: usize) -> Result<(), SubstrateError> {
    let s = g.value(x).shape();
    if s.len() != 4 || s[3] != in_c {
        return Err(SubstrateError::ShapeMismatch {
            op: "conv2d",
            left: s.to_vec(),
            right: vec![s.first().copied().unwrap_or(0), 0, 0, in_c],
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn stack(seed: u64) -> Sequential {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Sequential::new(
            "net",
            vec![
                Layer::Conv2d { in_c: 3, out_c: 4, kernel: 3, stride: 2 },
                Layer::Relu,
                Layer::Flatten,
                Layer::Dense { in_dim: 4 * 4 * 4, out_dim: 5 },
                Layer::Softmax,
            ],
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn init_is_deterministic_and_truncated() {
        let a = stack(3);
        let b = stack(3);
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert_eq!(pa.value, pb.value);
            assert!(pa.value.data().iter().all(|v| v.abs() <= 2.0 * INIT_STD));
        }
        assert!(a.params()[1].value.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn infer_matches_recorded_forward() {
        let net = stack(1);
        let x = Tensor::new(vec![2, 8, 8, 3], (0..384).map(|i| (i % 7) as f32 / 7.0).collect()).unwrap();
        let y1 = net.infer(&x).unwrap();
        let mut g = Graph::new();
        let xv = g.input(x);
        let y2 = net.forward(&mut g, xv, 0).unwrap();
        assert_eq!(&y1, g.value(y2));
        for i in 0..2 {
            let s: f32 = y1.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn unsupported_conv_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = Sequential::new(
            "bad",
            vec![Layer::Conv2d { in_c: 1, out_c: 1, kernel: 4, stride: 1 }],
            &mut rng,
        );
        assert!(matches!(r, Err(SubstrateError::UnsupportedConv { .. })));
    }

    #[test]
    fn wrong_input_shape_reports_shapes() {
        let net = stack(0);
        let x = Tensor::zeros(vec![1, 8, 8, 1]);
        assert!(matches!(net.infer(&x), Err(SubstrateError::ShapeMismatch { .. })));
    }
}
