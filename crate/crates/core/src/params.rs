//! Parameter containers shared by the student and the adapter.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Tape, Tensor, Var};

/// A model component whose tensors can be enumerated in a fixed order.
pub trait Parameters {
    fn named(&self) -> Vec<(&'static str, &Tensor)>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    /// Places every tensor on `tape`, trainable or not, in `named()` order.
    fn register<'t>(&self, tape: &'t Tape, trainable: bool) -> Vec<Var<'t>> {
        self.named()
            .into_iter()
            .map(|(_, t)| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }

    fn tensors(&self) -> Vec<&Tensor> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    fn num_parameters(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

/// `uniform(−1/√fan_in, 1/√fan_in)` scaled by `scale`.
pub fn init_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize, scale: f64) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| scale * rng.random_range(-bound..=bound))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Weight `[d_in × d_out]` and bias `[d_out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn init(rng: &mut impl Rng, d_in: usize, d_out: usize, scale: f64) -> Self {
        Self {
            weight: init_uniform(rng, &[d_in, d_out], d_in, scale),
            bias: Tensor::zeros(&[d_out]),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

impl Parameters for Linear {
    fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("weight", &self.weight), ("bias", &self.bias)]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn uniform_init_respects_bound() {
        let mut rng = stream(0, Stream::Init);
        let t = init_uniform(&mut rng, &[16, 8], 16, 1.0);
        assert!(t.data().iter().all(|x| x.abs() <= 0.25));
        let l = Linear::init(&mut rng, 4, 3, 0.1);
        assert!(l.weight.data().iter().all(|x| x.abs() <= 0.05));
        assert_eq!(l.bias.data(), &[0.0; 3]);
        assert_eq!(l.num_parameters(), 15);
    }
}
