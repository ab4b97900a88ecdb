//! Depthwise-separable shuffle blocks and the bidirectional pyramid neck built
//! from them. Fusion is plain channel concatenation.

use rand::Rng;

use crate::error::{Error, Result};
use crate::gam::Gam;
use crate::nn::cost::ConvSpec;
use crate::nn::{Act, ConvBnAct, LayerCost, ParamStore};
use crate::tensor::{Float, Graph, Var};

pub const SHUFFLE_GROUPS: usize = 2;

/// Depthwise k×k conv, pointwise conv, then a two-group channel shuffle.
#[derive(Debug, Clone)]
pub struct DssConv {
    dw: ConvBnAct,
    pw: ConvBnAct,
}

impl DssConv {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        act: Act,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if c_out % SHUFFLE_GROUPS != 0 {
            return Err(Error::Config(format!("{name}: {c_out} output channels cannot be shuffled in pairs")));
        }
        Ok(Self {
            dw: ConvBnAct::new(store, &format!("{name}.dw"), ConvSpec::depthwise(c_in, k, stride, act), rng)?,
            pw: ConvBnAct::new(store, &format!("{name}.pw"), ConvSpec::new(c_in, c_out, 1, 1, act), rng)?,
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.dw.forward(g, store, x)?;
        let y = self.pw.forward(g, store, y)?;
        g.channel_shuffle(y, SHUFFLE_GROUPS)
    }

    pub fn cost(&self, h: usize, w: usize) -> (LayerCost, (usize, usize)) {
        let (a, hw) = self.dw.cost(h, w);
        let (b, hw) = self.pw.cost(hw.0, hw.1);
        (a + b, hw)
    }

    pub fn out_channels(&self) -> usize {
        self.pw.spec.out_channels
    }
}

/// 1×1 conv then a 3×3 [`DssConv`], optionally followed by global attention
/// and a residual connection.
#[derive(Debug, Clone)]
pub struct DssBottleneck {
    cv1: ConvBnAct,
    cv2: DssConv,
    gam: Option<Gam>,
    shortcut: bool,
}

impl DssBottleneck {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        shortcut: bool,
        with_gam: bool,
        act: Act,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if shortcut && c_in != c_out {
            return Err(Error::Config(format!("{name}: residual needs equal widths, got {c_in} → {c_out}")));
        }
        Ok(Self {
            cv1: ConvBnAct::new(store, &format!("{name}.cv1"), ConvSpec::new(c_in, c_out, 1, 1, act), rng)?,
            cv2: DssConv::new(store, &format!("{name}.cv2"), c_out, c_out, 3, 1, act, rng)?,
            gam: if with_gam {
                Some(Gam::new(store, &format!("{name}.gam"), c_out, act, rng)?)
            } else {
                None
            },
            shortcut,
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.cv1.forward(g, store, x)?;
        let mut y = self.cv2.forward(g, store, y)?;
        if let Some(gam) = &self.gam {
            y = gam.forward(g, store, y)?;
        }
        if self.shortcut {
            y = g.add(y, x)?;
        }
        Ok(y)
    }

    pub fn cost(&self, h: usize, w: usize) -> LayerCost {
        let mut c = self.cv1.cost(h, w).0 + self.cv2.cost(h, w).0;
        if let Some(gam) = &self.gam {
            c += gam.cost(h, w);
        }
        c
    }
}

/// CSP block whose bottlenecks are [`DssBottleneck`]s.
#[derive(Debug, Clone)]
pub struct DssC3 {
    pub c_out: usize,
    cv1: ConvBnAct,
    cv2: ConvBnAct,
    cv3: ConvBnAct,
    m: Vec<DssBottleneck>,
}

/// Hidden width: half the output, rounded up to an even count.
pub fn dss_hidden(c_out: usize) -> usize {
    (c_out / 2).div_ceil(2) * 2
}

impl DssC3 {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        n: usize,
        shortcut: bool,
        gam: bool,
        act: Act,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config(format!("{name}: needs at least one bottleneck")));
        }
        let h = dss_hidden(c_out);
        let cv1 = ConvBnAct::new(store, &format!("{name}.cv1"), ConvSpec::new(c_in, h, 1, 1, act), rng)?;
        let cv2 = ConvBnAct::new(store, &format!("{name}.cv2"), ConvSpec::new(c_in, h, 1, 1, act), rng)?;
        let m = (0..n)
            .map(|i| DssBottleneck::new(store, &format!("{name}.m.{i}"), h, h, shortcut, gam, act, rng))
            .collect::<Result<_>>()?;
        let cv3 = ConvBnAct::new(store, &format!("{name}.cv3"), ConvSpec::new(2 * h, c_out, 1, 1, act), rng)?;
        Ok(Self { c_out, cv1, cv2, cv3, m })
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

/// Channel widths of the neck.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NeckWidths {
    /// Input widths of P3, P4, P5.
    pub inputs: [usize; 3],
    /// Output widths of P3, P4, P5.
    pub outputs: [usize; 3],
    /// Lateral 1×1 widths taken from P5 and from the top-down P4 node.
    pub lateral: [usize; 2],
}

/// Where global attention is inserted in the bottom-up outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GamPlacement {
    pub p4: bool,
    pub p5: bool,
}

/// Bidirectional neck over three pyramid levels, with the same-level edge from
/// the P4 input straight into the P4 output node.
#[derive(Debug, Clone)]
pub struct LightBiFpn {
    pub widths: NeckWidths,
    lat5: ConvBnAct,
    td4: DssC3,
    lat4: ConvBnAct,
    out3: DssC3,
    down3: DssConv,
    out4: DssC3,
    down4: DssConv,
    out5: DssC3,
}

/// Names and costs of the neck's nodes, in evaluation order.
pub type NamedCost = (String, LayerCost);

impl LightBiFpn {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        widths: NeckWidths,
        depth: usize,
        gam: GamPlacement,
        act: Act,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let [c3, c4, c5] = widths.inputs;
        let [w3, w4, w5] = widths.outputs;
        let [l5, l4] = widths.lateral;
        let p = |s: &str| format!("{name}.{s}");
        let lat5 = ConvBnAct::new(store, &p("lat5"), ConvSpec::new(c5, l5, 1, 1, act), rng)?;
        let td4 = DssC3::new(store, &p("td4"), l5 + c4, w4, depth, false, false, act, rng)?;
        let lat4 = ConvBnAct::new(store, &p("lat4"), ConvSpec::new(w4, l4, 1, 1, act), rng)?;
        let out3 = DssC3::new(store, &p("out3"), l4 + c3, w3, depth, false, false, act, rng)?;
        let down3 = DssConv::new(store, &p("down3"), w3, w3, 3, 2, act, rng)?;
        let out4 = DssC3::new(store, &p("out4"), w3 + l4 + c4, w4, depth, false, gam.p4, act, rng)?;
        let down4 = DssConv::new(store, &p("down4"), w4, w4, 3, 2, act, rng)?;
        let out5 = DssC3::new(store, &p("out5"), w4 + l5, w5, depth, false, gam.p5, act, rng)?;
        Ok(Self {
            widths,
            lat5,
            td4,
            lat4,
            out3,
            down3,
            out4,
            down4,
            out5,
        })
    }

    /// Fuses `[P3, P4, P5]` into three output levels of the same spatial sizes.
    pub fn fuse<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, levels: &[Var]) -> Result<Vec<Var>> {
        let &[in3, in4, in5] = levels else {
            return Err(Error::Config(format!("neck expects 3 pyramid levels, got {}", levels.len())));
        };
        let lat5 = self.lat5.forward(g, store, in5)?;
        let up5 = g.upsample_nearest2(lat5)?;
        let cat = g.concat(&[up5, in4], 1)?;
        let td4 = self.td4.forward(g, store, cat)?;
        let lat4 = self.lat4.forward(g, store, td4)?;
        let up4 = g.upsample_nearest2(lat4)?;
        let cat = g.concat(&[up4, in3], 1)?;
        let out3 = self.out3.forward(g, store, cat)?;
        let d3 = self.down3.forward(g, store, out3)?;
        let cat = g.concat(&[d3, lat4, in4], 1)?;
        let out4 = self.out4.forward(g, store, cat)?;
        let d4 = self.down4.forward(g, store, out4)?;
        let cat = g.concat(&[d4, lat5], 1)?;
        let out5 = self.out5.forward(g, store, cat)?;
        Ok(vec![out3, out4, out5])
    }

    /// Per-node costs given the spatial size of P3.
    pub fn costs(&self, h3: usize, w3: usize) -> Vec<NamedCost> {
        let (h4, w4, h5, w5) = (h3.div_ceil(2), w3.div_ceil(2), h3.div_ceil(4), w3.div_ceil(4));
        vec![
            ("lat5".into(), self.lat5.cost(h5, w5).0),
            ("td4".into(), self.td4.cost(h4, w4)),
            ("lat4".into(), self.lat4.cost(h4, w4).0),
            ("out3".into(), self.out3.cost(h3, w3)),
            ("down3".into(), self.down3.cost(h3, w3).0),
            ("out4".into(), self.out4.cost(h4, w4)),
            ("down4".into(), self.down4.cost(h4, w4).0),
            ("out5".into(), self.out5.cost(h5, w5)),
        ]
    }
}
