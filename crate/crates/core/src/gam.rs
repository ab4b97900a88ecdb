//! Global attention: a per-position channel MLP gate followed by a
//! convolutional spatial gate, both multiplied into the features.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::cost::ConvSpec;
use crate::nn::{Act, ConvBnAct, LayerCost, Linear, ParamStore};
use crate::tensor::{Float, Graph, Var};

pub const GAM_REDUCTION: usize = 4;
pub const GAM_KERNEL: usize = 7;

#[derive(Debug, Clone)]
pub struct Gam {
    pub channels: usize,
    fc1: Linear,
    fc2: Linear,
    act: Act,
    sp1: ConvBnAct,
    sp2: ConvBnAct,
}

/// The gates and outputs of one pass.
pub struct GamTrace {
    pub channel_gate: Var,
    pub spatial_gate: Var,
    pub out: Var,
}

impl Gam {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, channels: usize, act: Act, rng: &mut impl Rng) -> Result<Self> {
        if channels % GAM_REDUCTION != 0 {
            return Err(Error::Config(format!("attention width {channels} not divisible by {GAM_REDUCTION}")));
        }
        let hidden = channels / GAM_REDUCTION;
        Ok(Self {
            channels,
            fc1: Linear::new(store, &format!("{name}.fc1"), channels, hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, channels, true, rng),
            act,
            sp1: ConvBnAct::new(
                store,
                &format!("{name}.sp1"),
                ConvSpec::new(channels, hidden, GAM_KERNEL, 1, act),
                rng,
            )?,
            sp2: ConvBnAct::new(store, &format!("{name}.sp2"), ConvSpec::plain(hidden, channels, GAM_KERNEL), rng)?,
        })
    }

    /// Sigmoid gate in (0, 1) from a two-layer MLP over the channels at each position.
    pub fn channel_gate<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let t = g.permute(x, &[0, 2, 3, 1])?;
        let t = self.fc1.forward(g, store, t)?;
        let t = g.activation(t, self.act);
        let t = self.fc2.forward(g, store, t)?;
        let t = g.permute(t, &[0, 3, 1, 2])?;
        Ok(g.sigmoid(t))
    }

    pub fn spatial_gate<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let t = self.sp1.forward(g, store, x)?;
        let t = self.sp2.forward(g, store, t)?;
        Ok(g.sigmoid(t))
    }

    pub fn trace<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<GamTrace> {
        let mc = self.channel_gate(g, store, x)?;
        let f2 = g.mul(mc, x)?;
        let ms = self.spatial_gate(g, store, f2)?;
        let out = g.mul(ms, f2)?;
        Ok(GamTrace {
            channel_gate: mc,
            spatial_gate: ms,
            out,
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        Ok(self.trace(g, store, x)?.out)
    }

    pub fn cost(&self, h: usize, w: usize) -> LayerCost {
        let mut c = self.fc1.cost(h * w) + self.fc2.cost(h * w);
        c += self.sp1.cost(h, w).0 + self.sp2.cost(h, w).0;
        c.activations = (self.channels * h * w) as u64;
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check_inputs, ParamId, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
    }

    fn setup(c: usize, seed: u64) -> (ParamStore<f64>, Gam, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let gam = Gam::new(&mut store, "gam", c, Act::Mish, &mut rng).unwrap();
        (store, gam, rng)
    }

    fn fill(store: &mut ParamStore<f64>, name: &str, v: f64) {
        let id = store.find(name).unwrap();
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = Tensor::full(&shape, v);
    }

    #[test]
    fn zero_weights_give_half_gates() {
        let (mut store, gam, mut rng) = setup(8, 1);
        for n in ["gam.fc2.weight", "gam.fc2.bias", "gam.sp2.conv.weight", "gam.sp2.conv.bias"] {
            fill(&mut store, n, 0.0);
        }
        let x = random(&[2, 8, 5, 5], &mut rng, 2.0);
        let mut g = Graph::new();
        let v = g.constant(x);
        let tr = gam.trace(&mut g, &store, v).unwrap();
        assert!(g.value(tr.channel_gate).data().iter().all(|&v| v == 0.5));
        assert!(g.value(tr.spatial_gate).data().iter().all(|&v| v == 0.5));
        assert_eq!(g.shape(tr.out), &[2, 8, 5, 5]);
    }

    #[test]
    fn channel_gate_matches_loop_oracle() {
        let (store, gam, mut rng) = setup(8, 2);
        let x = random(&[1, 8, 3, 2], &mut rng, 2.0);
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let mc = gam.channel_gate(&mut g, &store, v).unwrap();
        let val = |n: &str| store.value(store.find(n).unwrap()).data().to_vec();
        let (w1, b1, w2, b2) = (val("gam.fc1.weight"), val("gam.fc1.bias"), val("gam.fc2.weight"), val("gam.fc2.bias"));
        for p in 0..6 {
            let xin: Vec<f64> = (0..8).map(|c| x.data()[c * 6 + p]).collect();
            let hid: Vec<f64> = (0..2)
                .map(|j| Act::Mish.eval(b1[j] + (0..8).map(|i| xin[i] * w1[i * 2 + j]).sum::<f64>()))
                .collect();
            for o in 0..8 {
                let z = b2[o] + (0..2).map(|j| hid[j] * w2[j * 8 + o]).sum::<f64>();
                let want = 1.0 / (1.0 + (-z).exp());
                let got = g.value(mc).data()[o * 6 + p];
                assert!((got - want).abs() < 1e-6);
                assert!(got > 0.0 && got < 1.0);
            }
        }
    }

    #[test]
    fn output_is_bounded_and_zero_preserving() {
        let (store, gam, mut rng) = setup(8, 3);
        for _ in 0..100 {
            let x = random(&[1, 8, 4, 4], &mut rng, 5.0);
            let mut g = Graph::inference();
            let v = g.constant(x.clone());
            let y = gam.forward(&mut g, &store, v).unwrap();
            for (a, b) in g.value(y).data().iter().zip(x.data()) {
                assert!(a.abs() <= b.abs());
            }
        }
        let mut g = Graph::inference();
        let v = g.constant(Tensor::zeros(&[1, 8, 4, 4]));
        let y = gam.forward(&mut g, &store, v).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_gates_pass_features_through() {
        let (mut store, gam, mut rng) = setup(8, 4);
        fill(&mut store, "gam.fc2.weight", 0.0);
        fill(&mut store, "gam.fc2.bias", 30.0);
        fill(&mut store, "gam.sp2.conv.weight", 0.0);
        fill(&mut store, "gam.sp2.conv.bias", 30.0);
        let x = random(&[1, 8, 4, 4], &mut rng, 3.0);
        let mut g = Graph::inference();
        let v = g.constant(x.clone());
        let y = gam.forward(&mut g, &store, v).unwrap();
        assert!(g.value(y).max_abs_diff(&x) < 1e-3);
    }

    #[test]
    fn gradients() {
        let (store, gam, mut rng) = setup(8, 5);
        let x = random(&[2, 8, 4, 4], &mut rng, 1.0);
        // Batch statistics in the spatial branch make this the harder case.
        let r = grad_check_inputs(
            |g, v| {
                g.set_training(true);
                gam.spatial_gate(g, &store, v[0])
            },
            &[x.clone()],
            1e-5,
            1e-4,
            None,
        );
        assert!(r.passed(), "spatial gate: {r:?}");
        let ids: Vec<ParamId> = store.iter().filter(|(_, p)| p.role != crate::nn::ParamRole::Buffer).map(|(id, _)| id).collect();
        let vals: Vec<Tensor<f64>> = std::iter::once(x).chain(ids.iter().map(|&id| store.value(id).clone())).collect();
        let r = grad_check_inputs(
            |g, vs| {
                for (&id, &v) in ids.iter().zip(&vs[1..]) {
                    g.bind_param(id, v);
                }
                gam.forward(g, &store, vs[0])
            },
            &vals,
            1e-5,
            1e-4,
            Some(8),
        );
        assert!(r.passed(), "gam: {r:?}");
    }
}
