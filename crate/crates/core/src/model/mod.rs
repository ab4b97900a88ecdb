//! Detector assembly: an ordered layer list whose entries name their inputs,
//! the baseline and light variants, inference and the cost report.

pub mod blocks;
pub mod checkpoint;
pub mod head;
pub mod loss;
pub mod nms;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bifpn::{GamPlacement, LightBiFpn, NeckWidths};
use crate::error::{Error, Result};
use crate::nn::cost::ConvSpec;
use crate::nn::{Act, ConvBnAct, LayerCost, ParamRole, ParamStore};
use crate::sepvit::C3SepVit;
use crate::tensor::{Float, Graph, Tensor, Var};

pub use blocks::{Bottleneck, Sppf, C3};
pub use head::{AnchorSet, Detect, Detection, STRIDES};
pub use loss::{training_loss, LossConfig, LossOutput, Target};
pub use nms::nms;

/// Largest stride of the network; inputs must be multiples of it.
pub const MAX_STRIDE: usize = 32;
/// Input side used for the parameter/FLOP comparison.
pub const COST_REF_SIZE: usize = 640;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Baseline,
    Light,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Baseline => "baseline",
            Arch::Light => "light",
        })
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" => Ok(Arch::Baseline),
            "light" => Ok(Arch::Light),
            _ => Err(Error::Config(format!("unknown model {s:?} (baseline|light)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub arch: Arch,
    pub nc: usize,
    pub depth_multiple: f64,
    pub width_multiple: f64,
    pub act: Act,
    /// Attention window side in the light backbone.
    pub ws: usize,
    /// Training input side; anchors are scaled to it.
    pub img: usize,
    pub gam: GamPlacement,
}

impl ModelConfig {
    pub fn new(arch: Arch, nc: usize) -> Self {
        Self {
            arch,
            nc,
            depth_multiple: 0.33,
            width_multiple: 0.25,
            act: Act::Mish,
            ws: 7,
            img: 448,
            gam: GamPlacement { p4: true, p5: false },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nc == 0 || self.ws == 0 || self.img == 0 || self.img % MAX_STRIDE != 0 {
            return Err(Error::Config(format!("bad model config {self:?}")));
        }
        if !(self.depth_multiple > 0.0 && self.width_multiple > 0.0) {
            return Err(Error::Config("depth and width multiples must be positive".into()));
        }
        Ok(())
    }

    /// Scaled channel count, rounded up to a multiple of 8.
    pub fn width(&self, c: usize) -> usize {
        ((c as f64 * self.width_multiple / 8.0).ceil() as usize * 8).max(8)
    }

    pub fn depth(&self, n: usize) -> usize {
        ((n as f64 * self.depth_multiple).round() as usize).max(1)
    }
}

/// Where a layer reads from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Src {
    Input,
    Layer(usize),
}

#[derive(Debug, Clone)]
pub enum Module {
    Conv(ConvBnAct),
    C3(C3),
    Sppf(Sppf),
    SepVit(C3SepVit),
    Upsample,
    Concat,
    Neck(LightBiFpn),
    Detect(Detect),
}

impl Module {
    fn kind(&self) -> &'static str {
        match self {
            Module::Conv(_) => "Conv",
            Module::C3(_) => "C3",
            Module::Sppf(_) => "SPPF",
            Module::SepVit(_) => "C3SepViT",
            Module::Upsample => "Upsample",
            Module::Concat => "Concat",
            Module::Neck(_) => "LightBiFPN",
            Module::Detect(_) => "Detect",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub name: String,
    pub from: Vec<Src>,
    pub module: Module,
}

/// A built detector and its parameters.
#[derive(Debug, Clone)]
pub struct Detector<T: Float> {
    pub config: ModelConfig,
    pub layers: Vec<Layer>,
    pub store: ParamStore<T>,
}

/// One row of the cost table.
#[derive(Debug, Clone, PartialEq)]
pub struct CostRow {
    pub name: String,
    pub kind: &'static str,
    pub cost: LayerCost,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub input: (usize, usize),
    pub rows: Vec<CostRow>,
    pub total: LayerCost,
}

struct Builder<'a, T: Float> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
    layers: Vec<Layer>,
}

impl<T: Float> Builder<'_, T> {
    /// Appends a layer; `from` are absolute indices, or the previous layer when empty.
    fn push(&mut self, name: &str, from: &[usize], module: Module) -> usize {
        let from = if from.is_empty() {
            vec![self.layers.len().checked_sub(1).map_or(Src::Input, Src::Layer)]
        } else {
            from.iter().map(|&i| Src::Layer(i)).collect()
        };
        self.layers.push(Layer {
            name: name.to_string(),
            from,
            module,
        });
        self.layers.len() - 1
    }

    fn conv(&mut self, name: &str, spec: ConvSpec) -> Result<Module> {
        Ok(Module::Conv(ConvBnAct::new(self.store, name, spec, &mut self.rng)?))
    }
}

impl<T: Float> Detector<T> {
    /// Builds either variant with parameters drawn from `seed`.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut b = Builder {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            layers: Vec::new(),
        };
        let c = &config;
        let act = c.act;
        let (c1, c2, c3, c4, c5) = (c.width(64), c.width(128), c.width(256), c.width(512), c.width(1024));

        let stem = ConvSpec {
            padding: 2,
            ..ConvSpec::new(3, c1, 6, 2, act)
        };
        let m = b.conv("stem", stem)?;
        b.push("stem", &[], m);
        let m = b.conv("down1", ConvSpec::new(c1, c2, 3, 2, act))?;
        b.push("down1", &[], m);
        let m = Module::C3(C3::new(b.store, "stage1", c2, c2, c.depth(3), true, act, &mut b.rng)?);
        b.push("stage1", &[], m);
        let m = b.conv("down2", ConvSpec::new(c2, c3, 3, 2, act))?;
        b.push("down2", &[], m);
        let m = Module::C3(C3::new(b.store, "stage2", c3, c3, c.depth(6), true, act, &mut b.rng)?);
        let p3 = b.push("stage2", &[], m);
        let m = b.conv("down3", ConvSpec::new(c3, c4, 3, 2, act))?;
        b.push("down3", &[], m);
        let m = Module::C3(C3::new(b.store, "stage3", c4, c4, c.depth(9), true, act, &mut b.rng)?);
        let p4 = b.push("stage3", &[], m);
        let m = b.conv("down4", ConvSpec::new(c4, c5, 3, 2, act))?;
        b.push("down4", &[], m);
        let m = match c.arch {
            Arch::Baseline => Module::C3(C3::new(b.store, "stage4", c5, c5, c.depth(3), true, act, &mut b.rng)?),
            Arch::Light => Module::SepVit(C3SepVit::new(b.store, "stage4", c5, c5, c.ws, act, &mut b.rng)?),
        };
        b.push("stage4", &[], m);
        let m = Module::Sppf(Sppf::new(b.store, "sppf", c5, c5, act, &mut b.rng)?);
        let p5 = b.push("sppf", &[], m);

        let anchors = AnchorSet::for_input(c.img);
        match c.arch {
            Arch::Baseline => {
                let n = c.depth(3);
                let m = b.conv("lat5", ConvSpec::new(c5, c4, 1, 1, act))?;
                let lat5 = b.push("lat5", &[], m);
                b.push("up5", &[], Module::Upsample);
                b.push("cat4", &[lat5 + 1, p4], Module::Concat);
                let m = Module::C3(C3::new(b.store, "td4", 2 * c4, c4, n, false, act, &mut b.rng)?);
                b.push("td4", &[], m);
                let m = b.conv("lat4", ConvSpec::new(c4, c3, 1, 1, act))?;
                let lat4 = b.push("lat4", &[], m);
                b.push("up4", &[], Module::Upsample);
                b.push("cat3", &[lat4 + 1, p3], Module::Concat);
                let m = Module::C3(C3::new(b.store, "out3", 2 * c3, c3, n, false, act, &mut b.rng)?);
                let out3 = b.push("out3", &[], m);
                let m = b.conv("down_p3", ConvSpec::new(c3, c3, 3, 2, act))?;
                let d3 = b.push("down_p3", &[], m);
                b.push("cat_p4", &[d3, lat4], Module::Concat);
                let m = Module::C3(C3::new(b.store, "out4", 2 * c3, c4, n, false, act, &mut b.rng)?);
                let out4 = b.push("out4", &[], m);
                let m = b.conv("down_p4", ConvSpec::new(c4, c4, 3, 2, act))?;
                let d4 = b.push("down_p4", &[], m);
                b.push("cat_p5", &[d4, lat5], Module::Concat);
                let m = Module::C3(C3::new(b.store, "out5", 2 * c4, c5, n, false, act, &mut b.rng)?);
                let out5 = b.push("out5", &[], m);
                let m = Module::Detect(Detect::new(b.store, "detect", [c3, c4, c5], c.nc, anchors, &mut b.rng)?);
                b.push("detect", &[out3, out4, out5], m);
            }
            Arch::Light => {
                let widths = NeckWidths {
                    inputs: [c3, c4, c5],
                    outputs: [c3, c3, c4],
                    lateral: [c4, c3],
                };
                let neck = LightBiFpn::new(b.store, "neck", widths, c.depth(3), c.gam, act, &mut b.rng)?;
                let n = b.push("neck", &[p3, p4, p5], Module::Neck(neck));
                let m = Module::Detect(Detect::new(b.store, "detect", widths.outputs, c.nc, anchors, &mut b.rng)?);
                b.push("detect", &[n], m);
            }
        }
        let layers = b.layers;
        let model = Self { config, layers, store };
        model.validate()?;
        Ok(model)
    }

    /// Topological order and unique parameter names.
    pub fn validate(&self) -> Result<()> {
        for (i, l) in self.layers.iter().enumerate() {
            if l.from.iter().any(|s| matches!(s, Src::Layer(j) if *j >= i)) {
                return Err(Error::Config(format!("layer {i} ({}) reads from a later layer", l.name)));
            }
        }
        let mut names: Vec<&str> = self.store.iter().map(|(_, p)| p.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("duplicate parameter {}", w[0])));
        }
        if !matches!(self.layers.last().map(|l| &l.module), Some(Module::Detect(_))) {
            return Err(Error::Config("last layer must be the detection head".into()));
        }
        Ok(())
    }

    pub fn head(&self) -> &Detect {
        match self.layers.last().map(|l| &l.module) {
            Some(Module::Detect(d)) => d,
            _ => unreachable!("validated at build"),
        }
    }

    /// Raw head maps for an `[N, 3, H, W]` batch, H and W multiples of 32.
    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Vec<Var>> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != 3 || s[2] == 0 || s[3] == 0 || s[2] % MAX_STRIDE != 0 || s[3] % MAX_STRIDE != 0 {
            return Err(Error::InvalidShape {
                shape: s,
                reason: format!("input must be [N, 3, H, W] with H, W multiples of {MAX_STRIDE}"),
            });
        }
        let store = &self.store;
        let mut outs: Vec<Vec<Var>> = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let inputs: Vec<Var> = l
                .from
                .iter()
                .flat_map(|s| match *s {
                    Src::Input => vec![x],
                    Src::Layer(i) => outs[i].clone(),
                })
                .collect();
            let one = || -> Result<Var> {
                match inputs[..] {
                    [v] => Ok(v),
                    _ => Err(Error::Config(format!("{} takes one input, got {}", l.name, inputs.len()))),
                }
            };
            let y = match &l.module {
                Module::Conv(m) => vec![m.forward(g, store, one()?)?],
                Module::C3(m) => vec![m.forward(g, store, one()?)?],
                Module::Sppf(m) => vec![m.forward(g, store, one()?)?],
                Module::SepVit(m) => vec![m.forward(g, store, one()?)?],
                Module::Upsample => vec![g.upsample_nearest2(one()?)?],
                Module::Concat => vec![g.concat(&inputs, 1)?],
                Module::Neck(m) => m.fuse(g, store, &inputs)?,
                Module::Detect(m) => m.forward(g, store, &inputs)?,
            };
            outs.push(y);
        }
        Ok(outs.pop().unwrap_or_default())
    }

    /// Inference on a batch: decode, then per-image NMS.
    pub fn detect(&self, images: &Tensor<T>, conf_thresh: f64, iou_thresh: f64) -> Result<Vec<Vec<Detection>>> {
        let mut g = Graph::inference();
        let x = g.constant(images.clone());
        let heads = self.forward(&mut g, x)?;
        let maps: Vec<Tensor<T>> = heads.iter().map(|&h| g.value(h).clone()).collect();
        let s = images.shape();
        let raw = self.head().decode(&maps, s[2], s[3], conf_thresh)?;
        Ok(raw.iter().map(|d| nms(d, iou_thresh, conf_thresh)).collect())
    }

    /// Per-layer parameters and FLOPs for an `h × w` input.
    pub fn cost(&self, h: usize, w: usize) -> CostReport {
        let mut hw: Vec<Vec<(usize, usize)>> = Vec::new();
        let mut rows = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            let ins: Vec<(usize, usize)> = l
                .from
                .iter()
                .flat_map(|s| match *s {
                    Src::Input => vec![(h, w)],
                    Src::Layer(j) => hw[j].clone(),
                })
                .collect();
            let (ih, iw) = ins[0];
            let name = format!("{i}.{}", l.name);
            let kind = l.module.kind();
            let mut row = |name: String, cost: LayerCost| rows.push(CostRow { name, kind, cost });
            let out = match &l.module {
                Module::Conv(m) => {
                    let (c, o) = m.cost(ih, iw);
                    row(name, c);
                    vec![o]
                }
                Module::C3(m) => {
                    row(name, m.cost(ih, iw));
                    vec![(ih, iw)]
                }
                Module::Sppf(m) => {
                    row(name, m.cost(ih, iw));
                    vec![(ih, iw)]
                }
                Module::SepVit(m) => {
                    row(name, m.cost(ih, iw));
                    vec![(ih, iw)]
                }
                Module::Upsample => {
                    row(name, LayerCost::default());
                    vec![(2 * ih, 2 * iw)]
                }
                Module::Concat => {
                    row(name, LayerCost::default());
                    vec![(ih, iw)]
                }
                Module::Neck(m) => {
                    for (sub, c) in m.costs(ih, iw) {
                        row(format!("{name}.{sub}"), c);
                    }
                    ins.clone()
                }
                Module::Detect(m) => {
                    for (k, c) in m.costs(&ins).into_iter().enumerate() {
                        row(format!("{name}.p{}", k + 3), c);
                    }
                    vec![]
                }
            };
            hw.push(out);
        }
        let total = rows.iter().map(|r| r.cost).sum();
        CostReport { input: (h, w), rows, total }
    }

    /// Number of trainable scalars.
    pub fn num_params(&self) -> usize {
        self.store.num_trainable()
    }

    /// Human-readable layer table with per-layer cost.
    pub fn describe(&self, h: usize, w: usize) -> String {
        let report = self.cost(h, w);
        let mut s = format!("{:<4} {:<10} {:<12} {:>10} {:>14}\n", "idx", "from", "module", "params", "flops");
        for (i, l) in self.layers.iter().enumerate() {
            let from: Vec<String> = l
                .from
                .iter()
                .map(|f| match f {
                    Src::Input => "in".to_string(),
                    Src::Layer(j) => j.to_string(),
                })
                .collect();
            let prefix = format!("{i}.");
            let c: LayerCost = report
                .rows
                .iter()
                .filter(|r| r.name.strip_prefix(&prefix).is_some_and(|rest| rest.starts_with(l.name.as_str())))
                .map(|r| r.cost)
                .sum();
            s += &format!("{:<4} {:<10} {:<12} {:>10} {:>14}\n", i, from.join(","), l.module.kind(), c.params, c.flops);
        }
        s += &format!("total {} params, {:.3} GFLOPs at {}x{}\n", report.total.params, report.total.flops as f64 / 1e9, h, w);
        s
    }

    /// Trainable tensors, in store order.
    pub fn trainable(&self) -> impl Iterator<Item = crate::tensor::ParamId> + '_ {
        self.store.iter().filter(|(_, p)| p.role != ParamRole::Buffer).map(|(id, _)| id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(arch: Arch) -> ModelConfig {
        ModelConfig {
            width_multiple: 0.125,
            ws: 2,
            img: 64,
            ..ModelConfig::new(arch, 2)
        }
    }

    #[test]
    fn width_and_depth_rounding() {
        let c = ModelConfig::new(Arch::Baseline, 2);
        assert_eq!([64, 128, 256, 512, 1024].map(|v| c.width(v)), [16, 32, 64, 128, 256]);
        assert_eq!([3, 6, 9].map(|n| c.depth(n)), [1, 2, 3]);
        assert_eq!("LIGHT".parse::<Arch>().unwrap(), Arch::Light);
        assert!("tiny".parse::<Arch>().is_err());
    }

    #[test]
    fn cost_totals_match_store() {
        for arch in [Arch::Baseline, Arch::Light] {
            let m = Detector::<f32>::build(ModelConfig::new(arch, 2), 0).unwrap();
            let r = m.cost(COST_REF_SIZE, COST_REF_SIZE);
            assert_eq!(r.total.params as usize, m.num_params(), "{arch}");
            assert_eq!(r.total, r.rows.iter().map(|r| r.cost).sum());
            // Params do not depend on the input; conv FLOPs scale with its area.
            let half = m.cost(320, 320);
            assert_eq!(half.total.params, r.total.params);
            if arch == Arch::Baseline {
                assert!((r.total.flops as f64 / half.total.flops as f64 - 4.0).abs() < 0.05);
            }
        }
    }

    #[test]
    fn light_is_lighter() {
        let b = Detector::<f32>::build(ModelConfig::new(Arch::Baseline, 2), 0).unwrap();
        let l = Detector::<f32>::build(ModelConfig::new(Arch::Light, 2), 0).unwrap();
        let (cb, cl) = (b.cost(640, 640).total, l.cost(640, 640).total);
        assert!(cl.params < cb.params && cl.flops < cb.flops);
    }

    #[test]
    fn head_strides() {
        for arch in [Arch::Baseline, Arch::Light] {
            let m = Detector::<f32>::build(toy(arch), 1).unwrap();
            let mut g = Graph::inference();
            let x = g.constant(Tensor::zeros(&[1, 3, 64, 128]));
            let heads = m.forward(&mut g, x).unwrap();
            let shapes: Vec<Vec<usize>> = heads.iter().map(|&h| g.shape(h).to_vec()).collect();
            assert_eq!(shapes, vec![vec![1, 21, 8, 16], vec![1, 21, 4, 8], vec![1, 21, 2, 4]]);
            let bad = g.constant(Tensor::zeros(&[1, 3, 60, 64]));
            assert!(m.forward(&mut g, bad).is_err());
        }
    }

    #[test]
    fn topology_is_validated() {
        let mut m = Detector::<f32>::build(toy(Arch::Baseline), 1).unwrap();
        m.layers[3].from = vec![Src::Layer(5)];
        assert!(m.validate().is_err());
    }

    #[test]
    fn describe_lists_every_layer() {
        let m = Detector::<f32>::build(toy(Arch::Light), 1).unwrap();
        let d = m.describe(64, 64);
        assert_eq!(d.lines().count(), m.layers.len() + 2);
        assert!(d.contains("C3SepViT") && d.contains("LightBiFPN"));
    }
}
