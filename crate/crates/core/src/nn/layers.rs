//! Parameterized building blocks that read their weights from a [`ParamStore`].

use rand::Rng;

use crate::error::Result;
use crate::nn::cost::{layer_cost, linear_cost, norm_cost, ConvSpec, LayerCost};
use crate::nn::norm::{BN_EPS, BN_MOMENTUM, LN_EPS};
use crate::nn::{ConvGeom, ParamRole, ParamStore};
use crate::tensor::{Float, Graph, ParamId, Tensor, Var};

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub channels: usize,
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            channels,
            gamma: store.add(format!("{name}.weight"), Tensor::ones(&[channels]), ParamRole::Bias),
            beta: store.add(format!("{name}.bias"), Tensor::zeros(&[channels]), ParamRole::Bias),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), ParamRole::Buffer),
            running_var: store.add(format!("{name}.running_var"), Tensor::ones(&[channels]), ParamRole::Buffer),
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (gamma, beta) = (store.var(g, self.gamma), store.var(g, self.beta));
        let (rm, rv) = (store.value(self.running_mean).data(), store.value(self.running_var).data());
        if g.training() {
            let (y, stats) = g.batch_norm_train(x, gamma, beta, BN_EPS)?;
            let (m, v) = stats.blend(rm, rv, BN_MOMENTUM);
            g.push_stat_update(self.running_mean, Tensor::new(&[self.channels], m)?);
            g.push_stat_update(self.running_var, Tensor::new(&[self.channels], v)?);
            Ok(y)
        } else {
            g.batch_norm_eval(x, gamma, beta, rm, rv, BN_EPS)
        }
    }

    pub fn cost(&self) -> LayerCost {
        norm_cost(self.channels)
    }
}

/// Convolution followed by optional batch norm and an activation.
#[derive(Debug, Clone)]
pub struct ConvBnAct {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub bn: Option<BatchNorm2d>,
}

impl ConvBnAct {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, spec: ConvSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let [co, cg, k, _] = spec.weight_shape();
        let fan_in = cg * k * k;
        let weight = store.add_uniform(format!("{name}.conv.weight"), &spec.weight_shape(), fan_in, ParamRole::Weight, rng);
        let bias = spec
            .has_bias
            .then(|| store.add_uniform(format!("{name}.conv.bias"), &[co], fan_in, ParamRole::Bias, rng));
        let bn = spec.with_batchnorm.then(|| BatchNorm2d::new(store, &format!("{name}.bn"), co));
        Ok(Self { spec, weight, bias, bn })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = store.var(g, self.weight);
        let b = self.bias.map(|b| store.var(g, b));
        let s = &self.spec;
        let mut y = g.conv2d(x, w, b, ConvGeom::new(s.stride, s.padding, s.groups))?;
        if let Some(bn) = &self.bn {
            y = bn.forward(g, store, y)?;
        }
        Ok(g.activation(y, s.activation))
    }

    pub fn cost(&self, h: usize, w: usize) -> (LayerCost, (usize, usize)) {
        (layer_cost(&self.spec, h, w), self.spec.out_hw(h, w))
    }
}

/// Dense layer on the last axis; weight stored as `[d_in, d_out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub d_in: usize,
    pub d_out: usize,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), &[d_in, d_out], d_in, ParamRole::Weight, rng);
        let bias = bias.then(|| store.add_uniform(format!("{name}.bias"), &[d_out], d_in, ParamRole::Bias, rng));
        Self { d_in, d_out, weight, bias }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = store.var(g, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = store.var(g, b);
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn cost(&self, tokens: usize) -> LayerCost {
        linear_cost(tokens, self.d_in, self.d_out, self.bias.is_some())
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub dim: usize,
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            dim,
            gamma: store.add(format!("{name}.weight"), Tensor::ones(&[dim]), ParamRole::Bias),
            beta: store.add(format!("{name}.bias"), Tensor::zeros(&[dim]), ParamRole::Bias),
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (gamma, beta) = (store.var(g, self.gamma), store.var(g, self.beta));
        g.layer_norm(x, gamma, beta, LN_EPS)
    }

    pub fn cost(&self) -> LayerCost {
        norm_cost(self.dim)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Act;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random<T: Float>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| T::from_f64_lossy(rng.gen_range(-1.0..1.0))).collect()).unwrap()
    }

    fn pointwise(store: &mut ParamStore<f64>, c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> ConvBnAct {
        let spec = ConvSpec {
            with_batchnorm: false,
            ..ConvSpec::new(c_in, c_out, 1, 1, Act::Identity)
        };
        ConvBnAct::new(store, "pw", spec, rng).unwrap()
    }

    fn run(store: &ParamStore<f64>, layer: &ConvBnAct, x: &Tensor<f64>) -> Tensor<f64> {
        let mut g = Graph::inference();
        let v = g.constant(x.clone());
        let y = layer.forward(&mut g, store, v).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn pointwise_identity_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let layer = pointwise(&mut store, 3, 3, &mut rng);
        let x = random::<f64>(&[2, 3, 4, 4], &mut rng);
        let mut eye = vec![0.0; 9];
        (0..3).for_each(|i| eye[i * 4] = 1.0);
        *store.value_mut(layer.weight) = Tensor::new(&[3, 3, 1, 1], eye).unwrap();
        assert_eq!(run(&store, &layer, &x), x);
        *store.value_mut(layer.weight) = Tensor::zeros(&[3, 3, 1, 1]);
        assert!(run(&store, &layer, &x).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pointwise_is_a_matmul_over_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let layer = pointwise(&mut store, 5, 7, &mut rng);
        let x = random::<f64>(&[2, 5, 3, 4], &mut rng);
        let y = run(&store, &layer, &x);
        let w = store.value(layer.weight).data();
        for b in 0..2 {
            for o in 0..7 {
                for p in 0..12 {
                    let want: f64 = (0..5).map(|c| w[o * 5 + c] * x.data()[(b * 5 + c) * 12 + p]).sum();
                    assert!((y.data()[(b * 7 + o) * 12 + p] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn depthwise_equals_masked_full_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (c, k, s) in [(4, 3, 1), (6, 3, 2), (3, 5, 1)] {
            let x = random::<f32>(&[2, c, 9, 8], &mut rng);
            let wd = random::<f32>(&[c, 1, k, k], &mut rng);
            let mut full = vec![0.0f32; c * c * k * k];
            for ch in 0..c {
                full[(ch * c + ch) * k * k..][..k * k].copy_from_slice(&wd.data()[ch * k * k..][..k * k]);
            }
            let full = Tensor::new(&[c, c, k, k], full).unwrap();
            let mut g = Graph::<f32>::inference();
            let (vx, vd, vf) = (g.constant(x), g.constant(wd), g.constant(full));
            let a = g.conv2d(vx, vd, None, ConvGeom::new(s, k / 2, c)).unwrap();
            let b = g.conv2d(vx, vf, None, ConvGeom::new(s, k / 2, 1)).unwrap();
            assert!(g.value(a).max_abs_diff(g.value(b)) <= 1e-6);
        }
    }

    #[test]
    fn batch_norm_updates_running_stats_only_in_training() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let layer = ConvBnAct::new(&mut store, "c", ConvSpec::new(3, 4, 3, 1, Act::Mish), &mut rng).unwrap();
        let x = random::<f64>(&[2, 3, 5, 5], &mut rng);
        let mut g = Graph::inference();
        let v = g.constant(x.clone());
        layer.forward(&mut g, &store, v).unwrap();
        assert!(g.take_stat_updates().is_empty());
        let mut g = Graph::new().with_training(true);
        let v = g.constant(x);
        layer.forward(&mut g, &store, v).unwrap();
        let updates = g.take_stat_updates();
        assert_eq!(updates.len(), 2);
        store.apply_stat_updates(updates);
        let rm = store.value(store.find("c.bn.running_mean").unwrap());
        assert!(rm.data().iter().any(|&v| v != 0.0));
        assert_eq!(store.num_trainable(), 4 * 3 * 9 + 8);
    }

    #[test]
    fn linear_matches_manual() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let lin = Linear::new(&mut store, "fc", 3, 2, true, &mut rng);
        let x = random::<f64>(&[4, 3], &mut rng);
        let mut g = Graph::inference();
        let v = g.constant(x.clone());
        let y = lin.forward(&mut g, &store, v).unwrap();
        let (w, b) = (store.value(lin.weight).data(), store.value(lin.bias.unwrap()).data());
        for r in 0..4 {
            for o in 0..2 {
                let want = b[o] + (0..3).map(|i| x.data()[r * 3 + i] * w[i * 2 + o]).sum::<f64>();
                assert!((g.value(y).data()[r * 2 + o] - want).abs() < 1e-12);
            }
        }
        assert_eq!(lin.cost(4).params, 8);
    }
}
