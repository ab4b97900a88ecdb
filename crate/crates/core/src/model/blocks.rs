//! Plain CSP blocks of the baseline detector.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::cost::ConvSpec;
use crate::nn::{Act, ConvBnAct, LayerCost, ParamStore};
use crate::tensor::{Float, Graph, Var};

pub const SPPF_KERNEL: usize = 5;

/// 1×1 then 3×3 conv with an optional residual.
#[derive(Debug, Clone)]
pub struct Bottleneck {
    cv1: ConvBnAct,
    cv2: ConvBnAct,
    shortcut: bool,
}

impl Bottleneck {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        shortcut: bool,
        act: Act,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            cv1: ConvBnAct::new(store, &format!("{name}.cv1"), ConvSpec::new(c, c, 1, 1, act), rng)?,
            cv2: ConvBnAct::new(store, &format!("{name}.cv2"), ConvSpec::new(c, c, 3, 1, act), rng)?,
            shortcut,
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.cv1.forward(g, store, x)?;
        let y = self.cv2.forward(g, store, y)?;
        if self.shortcut {
            g.add(y, x)
        } else {
            Ok(y)
        }
    }

    pub fn cost(&self, h: usize, w: usize) -> LayerCost {
        self.cv1.cost(h, w).0 + self.cv2.cost(h, w).0
    }
}

/// Two 1×1 branches, a bottleneck stack on one, concatenation and a 1×1 fuse.
#[derive(Debug, Clone)]
pub struct C3 {
    cv1: ConvBnAct,
    cv2: ConvBnAct,
    cv3: ConvBnAct,
    m: Vec<Bottleneck>,
}

impl C3 {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        n: usize,
        shortcut: bool,
        act: Act,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config(format!("{name}: needs at least one bottleneck")));
        }
        let h = c_out / 2;
        let cv1 = ConvBnAct::new(store, &format!("{name}.cv1"), ConvSpec::new(c_in, h, 1, 1, act), rng)?;
        let cv2 = ConvBnAct::new(store, &format!("{name}.cv2"), ConvSpec::new(c_in, h, 1, 1, act), rng)?;
        let m = (0..n)
            .map(|i| Bottleneck::new(store, &format!("{name}.m.{i}"), h, shortcut, act, rng))
            .collect::<Result<_>>()?;
        let cv3 = ConvBnAct::new(store, &format!("{name}.cv3"), ConvSpec::new(2 * h, c_out, 1, 1, act), rng)?;
        Ok(Self { cv1, cv2, cv3, m })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut a = self.cv1.forward(g, store, x)?;
        for b in &self.m {
            a = b.forward(g, store, a)?;
        }
        let b = self.cv2.forward(g, store, x)?;
        let y = g.concat(&[a, b], 1)?;
        self.cv3.forward(g, store, y)
    }

    pub fn cost(&self, h: usize, w: usize) -> LayerCost {
        let mut c = self.cv1.cost(h, w).0 + self.cv2.cost(h, w).0 + self.cv3.cost(h, w).0;
        for b in &self.m {
            c += b.cost(h, w);
        }
        c
    }
}

/// Fast spatial pyramid pooling: three chained 5×5 max pools, concatenated.
#[derive(Debug, Clone)]
pub struct Sppf {
    cv1: ConvBnAct,
    cv2: ConvBnAct,
}

impl Sppf {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        act: Act,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let h = c_in / 2;
        Ok(Self {
            cv1: ConvBnAct::new(store, &format!("{name}.cv1"), ConvSpec::new(c_in, h, 1, 1, act), rng)?,
            cv2: ConvBnAct::new(store, &format!("{name}.cv2"), ConvSpec::new(4 * h, c_out, 1, 1, act), rng)?,
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let p = SPPF_KERNEL / 2;
        let a = self.cv1.forward(g, store, x)?;
        let b = g.max_pool2d(a, SPPF_KERNEL, 1, p)?;
        let c = g.max_pool2d(b, SPPF_KERNEL, 1, p)?;
        let d = g.max_pool2d(c, SPPF_KERNEL, 1, p)?;
        let y = g.concat(&[a, b, c, d], 1)?;
        self.cv2.forward(g, store, y)
    }

    pub fn cost(&self, h: usize, w: usize) -> LayerCost {
        self.cv1.cost(h, w).0 + self.cv2.cost(h, w).0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check_inputs, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn shapes_and_costs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let c3 = C3::new(&mut store, "c3", 8, 12, 2, true, Act::Silu, &mut rng).unwrap();
        let sppf = Sppf::new(&mut store, "sppf", 12, 6, Act::Silu, &mut rng).unwrap();
        let x = random(&[2, 8, 6, 5], &mut rng);
        let mut g = Graph::inference();
        let v = g.constant(x);
        let y = c3.forward(&mut g, &store, v).unwrap();
        assert_eq!(g.shape(y), &[2, 12, 6, 5]);
        let y = sppf.forward(&mut g, &store, y).unwrap();
        assert_eq!(g.shape(y), &[2, 6, 6, 5]);
        let total = c3.cost(6, 5) + sppf.cost(6, 5);
        assert_eq!(total.params as usize, store.num_trainable());
    }

    #[test]
    fn sppf_on_constant_map_is_pointwise() {
        // Pooling a constant map changes nothing, so the block reduces to 1×1 convs.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let sppf = Sppf::new(&mut store, "s", 4, 4, Act::Identity, &mut rng).unwrap();
        let mut g = Graph::inference();
        let v = g.constant(Tensor::full(&[1, 4, 7, 7], 0.3));
        let y = sppf.forward(&mut g, &store, v).unwrap();
        let d = g.value(y).data();
        for c in 0..4 {
            let first = d[c * 49];
            assert!(d[c * 49..(c + 1) * 49].iter().all(|&v| (v - first).abs() < 1e-12));
        }
    }

    #[test]
    fn gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let c3 = C3::new(&mut store, "c3", 4, 4, 1, true, Act::Mish, &mut rng).unwrap();
        let sppf = Sppf::new(&mut store, "s", 4, 4, Act::Mish, &mut rng).unwrap();
        let x = random(&[2, 4, 5, 5], &mut rng);
        let r = grad_check_inputs(
            |g, v| {
                let y = c3.forward(g, &store, v[0])?;
                sppf.forward(g, &store, y)
            },
            &[x],
            1e-5,
            1e-4,
            None,
        );
        assert!(r.passed(), "{r:?}");
    }
}
