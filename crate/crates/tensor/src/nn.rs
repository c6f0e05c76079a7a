//! Convolution stacks with named, seeded parameters.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::kernels::ConvGeom;
use crate::{Graph, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Layer {
    /// Square convolution with bias.
    Conv(ConvGeom),
    LeakyRelu(f64),
    Tanh,
    /// Spatial standardisation per sample and channel, no affine terms.
    InstanceNorm,
}

impl Layer {
    /// `kernel x kernel` convolution with "same" zero padding.
    pub fn conv(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Layer::Conv(ConvGeom {
            in_ch,
            out_ch,
            kernel,
            stride: 1,
            padding: kernel / 2,
        })
    }

    pub fn conv_strided(in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        Layer::Conv(ConvGeom {
            in_ch,
            out_ch,
            kernel,
            stride,
            padding: kernel / 2,
        })
    }
}

/// A chain of layers and the tensors that parameterise it
/// (weight then bias for every convolution, in order).
#[derive(Clone, Debug, PartialEq)]
pub struct Sequential<T> {
    layers: Vec<Layer>,
    params: Vec<Tensor<T>>,
}

impl<T: Scalar> Sequential<T> {
    /// He-uniform weights for the leaky activations used here, zero biases.
    pub fn new(layers: Vec<Layer>, rng: &mut ChaCha8Rng) -> Self {
        let mut params = Vec::new();
        for layer in &layers {
            if let Layer::Conv(g) = layer {
                let fan_in = (g.in_ch * g.kernel * g.kernel) as f64;
                let bound = (6.0 / fan_in).sqrt();
                params.push(Tensor::from_fn(&[g.out_ch, g.in_ch, g.kernel, g.kernel], |_| {
                    T::lit(rng.gen_range(-bound..bound))
                }));
                params.push(Tensor::zeros(&[g.out_ch]));
            }
        }
        Sequential { layers, params }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    /// Replaces all parameters; shapes must match the current ones.
    pub fn set_params(&mut self, params: Vec<Tensor<T>>) -> Result<(), String> {
        if params.len() != self.params.len() {
            return Err(format!("expected {} tensors, got {}", self.params.len(), params.len()));
        }
        for (i, (old, new)) in self.params.iter().zip(&params).enumerate() {
            if old.shape() != new.shape() {
                return Err(format!("tensor {i}: expected {:?}, got {:?}", old.shape(), new.shape()));
            }
        }
        self.params = params;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Sequential<U> {
        Sequential {
            layers: self.layers.clone(),
            params: self.params.iter().map(|p| p.cast()).collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Puts the parameters on the graph; `mask == 0` makes them constants.
    pub fn bind(&self, g: &mut Graph<T>, mask: u8) -> Vec<Var> {
        self.params.iter().map(|p| g.leaf(p.clone(), mask)).collect()
    }

    pub fn forward(&self, g: &mut Graph<T>, bound: &[Var], x: Var) -> Var {
        let mut h = x;
        let mut p = 0;
        for layer in &self.layers {
            h = match *layer {
                Layer::Conv(geom) => {
                    let y = g.conv2d(h, bound[p], Some(bound[p + 1]), geom);
                    p += 2;
                    y
                }
                Layer::LeakyRelu(s) => g.leaky_relu(h, s),
                Layer::Tanh => g.tanh(h),
                Layer::InstanceNorm => g.instance_norm(h, 1e-5),
            };
        }
        h
    }

    /// Forward pass on a scratch graph.
    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, 0);
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, &bound, xv);
        g.value(y).clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn seeded_init_is_reproducible() {
        let layers = vec![Layer::conv(3, 4, 3), Layer::LeakyRelu(0.2), Layer::conv(4, 2, 3)];
        let a: Sequential<f32> = Sequential::new(layers.clone(), &mut ChaCha8Rng::seed_from_u64(9));
        let b: Sequential<f32> = Sequential::new(layers, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert_eq!(a.param_count(), 4 * 3 * 9 + 4 + 2 * 4 * 9 + 2);
        let y = a.infer(&Tensor::zeros(&[1, 3, 5, 5]));
        assert_eq!(y.shape(), [1, 2, 5, 5]);
    }

    #[test]
    fn set_params_checks_shapes() {
        let mut a: Sequential<f32> = Sequential::new(vec![Layer::conv(1, 1, 3)], &mut ChaCha8Rng::seed_from_u64(1));
        assert!(a.set_params(vec![Tensor::zeros(&[1, 1, 3, 3])]).is_err());
        assert!(a.set_params(vec![Tensor::zeros(&[1, 1, 3, 3]), Tensor::zeros(&[2])]).is_err());
        assert!(a.set_params(vec![Tensor::zeros(&[1, 1, 3, 3]), Tensor::zeros(&[1])]).is_ok());
    }
}
