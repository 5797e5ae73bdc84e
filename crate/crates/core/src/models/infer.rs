//! Tape-free forward pass.
//!
//! Produces the same bits as recording the network on an inference tape: the
//! kernels are shared, and activation plus dropout run in one pass that draws
//! dropout factors in the same order as [`Tape::dropout`](crate::tensor::Tape::dropout).

use super::{Activation, LayerSpec, Model};
use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{self, ConvGeom, Scalar, Tensor, LEAKY_SLOPE};

impl<T: Scalar> Model<T> {
    /// Logits `[n·C]` for a batch, with dropout active when `dropout` is set.
    pub(crate) fn logits(&self, batch: &Tensor<T>, dropout: bool, rng: &mut Rng) -> Result<Vec<T>> {
        let n = self.check_batch(batch)?;
        let mut shape: Vec<usize> = self.spec.input_shape.clone();
        let mut cur: Vec<T> = Vec::new();
        let mut p = 0;
        for layer in &self.spec.layers {
            let src = if cur.is_empty() { batch.data() } else { &cur };
            match *layer {
                LayerSpec::Conv3x3 {
                    activation, dropout: rate, ..
                } => {
                    let (k, b) = (&self.params[p].value, &self.params[p + 1].value);
                    p += 2;
                    let g = ConvGeom {
                        n,
                        h: shape[0],
                        w: shape[1],
                        cin: shape[2],
                        cout: k.shape()[3],
                    };
                    let mut out = tensor::conv3x3_forward(&g, src, k.data(), b.data());
                    shape[2] = g.cout;
                    activate_dropout(&mut out, activation, rate, dropout, rng);
                    cur = out;
                }
                LayerSpec::MaxPool2x2 => {
                    let (h, w, c) = (shape[0], shape[1], shape[2]);
                    cur = tensor::maxpool2x2_forward(n, h, w, c, src, false).0;
                    shape = vec![h.div_ceil(2), w.div_ceil(2), c];
                }
                LayerSpec::Flatten => {
                    if cur.is_empty() {
                        cur = src.to_vec();
                    }
                    shape = vec![shape.iter().product()];
                }
                LayerSpec::Dense {
                    activation, dropout: rate, ..
                } => {
                    let (k, b) = (&self.params[p].value, &self.params[p + 1].value);
                    p += 2;
                    let (fan_in, units) = (k.shape()[0], k.shape()[1]);
                    let mut out = vec![T::zero(); n * units];
                    tensor::gemm(n, fan_in, units, src, false, k.data(), false, T::zero(), &mut out);
                    for row in out.chunks_exact_mut(units) {
                        for (v, &bb) in row.iter_mut().zip(b.data()) {
                            *v = *v + bb;
                        }
                    }
                    activate_dropout(&mut out, activation, rate, dropout, rng);
                    shape = vec![units];
                    cur = out;
                }
            }
        }
        Ok(cur)
    }
}

fn activate_dropout<T: Scalar>(data: &mut [T], activation: Activation, rate: f64, dropout: bool, rng: &mut Rng) {
    let slope = T::lit(LEAKY_SLOPE);
    let act = |v: T| match activation {
        Activation::LeakyRelu => tensor::leaky(v, slope),
        Activation::Linear => v,
    };
    if dropout && rate > 0.0 {
        tensor::map_dropout_in_place(data, rate, rng, false, act);
    } else if activation != Activation::Linear {
        for v in data.iter_mut() {
            *v = act(*v);
        }
    }
}
