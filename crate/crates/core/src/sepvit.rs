//! Separable vision transformer block: attention inside each window, then
//! attention between windows driven by one learned summary token per window.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::cost::{linear_cost, matmul_cost, norm_cost, ConvSpec};
use crate::nn::{Act, ConvBnAct, LayerCost, LayerNorm, Linear, ParamRole, ParamStore};
use crate::tensor::{Float, Graph, ParamId, Tensor, Var};

/// Geometry of a window grid over an `h × w` map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowGrid {
    pub ws: usize,
    pub windows_h: usize,
    pub windows_w: usize,
}

impl WindowGrid {
    pub fn new(h: usize, w: usize, ws: usize) -> Result<Self> {
        if ws == 0 || h % ws != 0 || w % ws != 0 {
            return Err(Error::InvalidShape {
                shape: vec![h, w],
                reason: format!("window size {ws} must divide the feature map"),
            });
        }
        Ok(Self {
            ws,
            windows_h: h / ws,
            windows_w: w / ws,
        })
    }

    pub fn windows(&self) -> usize {
        self.windows_h * self.windows_w
    }

    pub fn tokens(&self) -> usize {
        self.ws * self.ws
    }

    /// For each element of the `[N, nW, ws², C]` layout, its flat index in `[N, C, H, W]`.
    fn index_map(&self, n: usize, c: usize) -> Vec<usize> {
        let (h, w) = (self.windows_h * self.ws, self.windows_w * self.ws);
        let mut map = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for wy in 0..self.windows_h {
                for wx in 0..self.windows_w {
                    for py in 0..self.ws {
                        for px in 0..self.ws {
                            let (y, x) = (wy * self.ws + py, wx * self.ws + px);
                            map.extend((0..c).map(|ch| ((b * c + ch) * h + y) * w + x));
                        }
                    }
                }
            }
        }
        map
    }
}

fn nchw<T: Float>(g: &Graph<T>, x: Var) -> Result<[usize; 4]> {
    g.shape(x).try_into().map_err(|_| Error::InvalidShape {
        shape: g.shape(x).to_vec(),
        reason: "expected [N, C, H, W]".into(),
    })
}

/// `[N, C, H, W]` → `[N, windows, ws², C]`.
pub fn window_partition<T: Float>(g: &mut Graph<T>, x: Var, ws: usize) -> Result<(Var, WindowGrid)> {
    let [n, c, h, w] = nchw(g, x)?;
    let grid = WindowGrid::new(h, w, ws)?;
    let map = grid.index_map(n, c);
    let y = g.gather(x, map, &[n, grid.windows(), grid.tokens(), c])?;
    Ok((y, grid))
}

/// Inverse of [`window_partition`].
pub fn window_merge<T: Float>(g: &mut Graph<T>, t: Var, grid: WindowGrid) -> Result<Var> {
    let s = g.shape(t).to_vec();
    if s.len() != 4 || s[1] != grid.windows() || s[2] != grid.tokens() {
        return Err(Error::InvalidShape {
            shape: s,
            reason: format!("does not match window grid {grid:?}"),
        });
    }
    let (n, c) = (s[0], s[3]);
    let map = grid.index_map(n, c);
    let mut inv = vec![0; map.len()];
    for (i, &src) in map.iter().enumerate() {
        inv[src] = i;
    }
    g.gather(t, inv, &[n, c, grid.windows_h * grid.ws, grid.windows_w * grid.ws])
}

/// Scaled dot-product attention over axis 2 of `[N, B, T, D]` tensors.
/// Returns the output and the row-stochastic weight matrix.
pub fn attention<T: Float>(g: &mut Graph<T>, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let d = *g.shape(q).last().expect("rank 4");
    let rank = g.shape(k).len();
    let mut perm: Vec<usize> = (0..rank).collect();
    perm.swap(rank - 2, rank - 1);
    let kt = g.permute(k, &perm)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
    let attn = g.softmax(scores, rank - 1)?;
    Ok((g.matmul(attn, v)?, attn))
}

/// Intermediate values of one block pass, for inspection in tests.
pub struct SepVitTrace {
    pub out: Var,
    pub window_attn: Var,
    pub global_attn: Var,
}

#[derive(Debug, Clone)]
pub struct SepVitBlock {
    pub dim: usize,
    pub ws: usize,
    window_token: ParamId,
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    ln_token: LayerNorm,
    token_q: Linear,
    token_k: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

pub const MLP_RATIO: usize = 4;

impl SepVitBlock {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, dim: usize, ws: usize, rng: &mut impl Rng) -> Self {
        Self {
            dim,
            ws,
            window_token: store.add(format!("{name}.window_token"), Tensor::zeros(&[dim]), ParamRole::Bias),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, true, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, true, rng),
            ln_token: LayerNorm::new(store, &format!("{name}.ln_token"), dim),
            token_q: Linear::new(store, &format!("{name}.token_q"), dim, dim, true, rng),
            token_k: Linear::new(store, &format!("{name}.token_k"), dim, dim, true, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, MLP_RATIO * dim, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), MLP_RATIO * dim, dim, true, rng),
        }
    }

    /// Window attention on `[N, nW, T, C]` tokens (pixels plus window token).
    pub fn dwa<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, f: Var) -> Result<(Var, Var)> {
        let q = self.q.forward(g, store, f)?;
        let k = self.k.forward(g, store, f)?;
        let v = self.v.forward(g, store, f)?;
        attention(g, q, k, v)
    }

    /// Inter-window attention: queries and keys from the window tokens `[N, nW, C]`,
    /// values are the pixel tokens `[N, nW, P, C]` of each window.
    pub fn pwa<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, f: Var, wt: Var) -> Result<(Var, Var)> {
        let s = g.shape(f).to_vec();
        let (n, nw, p, c) = (s[0], s[1], s[2], s[3]);
        let t = self.ln_token.forward(g, store, wt)?;
        let t = g.activation(t, Act::Gelu);
        let q = self.token_q.forward(g, store, t)?;
        let k = self.token_k.forward(g, store, t)?;
        let v = g.reshape(f, &[n, nw, p * c])?;
        // Keep the scale of the query/key dimension rather than of the flattened values.
        let kt = g.permute(k, &[0, 2, 1])?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (c as f64).sqrt());
        let attn = g.softmax(scores, 2)?;
        let out = g.matmul(attn, v)?;
        Ok((g.reshape(out, &[n, nw, p, c])?, attn))
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        Ok(self.trace(g, store, x)?.out)
    }

    pub fn trace<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<SepVitTrace> {
        let [n, c, h, w] = nchw(g, x)?;
        if c != self.dim {
            return Err(crate::error::shape_err("sepvit", &[n, self.dim, h, w], &[n, c, h, w]));
        }
        let (pix, grid) = window_partition(g, x, self.ws)?;
        let (nw, p) = (grid.windows(), grid.tokens());
        let token = store.var(g, self.window_token);
        let tokens = g.gather(token, (0..n * nw * c).map(|i| i % c).collect(), &[n, nw, 1, c])?;
        let f = g.concat(&[pix, tokens], 2)?;
        let f = self.ln1.forward(g, store, f)?;
        let (f, window_attn) = self.dwa(g, store, f)?;
        let pix = g.slice(f, 2, 0, p)?;
        let wt = g.slice(f, 2, p, 1)?;
        let wt = g.reshape(wt, &[n, nw, c])?;
        let (y, global_attn) = self.pwa(g, store, pix, wt)?;
        let y = window_merge(g, y, grid)?;
        let x1 = g.add(y, x)?;
        // Token MLP over channel-last positions.
        let t = g.permute(x1, &[0, 2, 3, 1])?;
        let t = self.ln2.forward(g, store, t)?;
        let t = self.fc1.forward(g, store, t)?;
        let t = g.activation(t, Act::Gelu);
        let t = self.fc2.forward(g, store, t)?;
        let t = g.permute(t, &[0, 3, 1, 2])?;
        let out = g.add(t, x1)?;
        Ok(SepVitTrace {
            out,
            window_attn,
            global_attn,
        })
    }

    /// Cost per image on an `h × w` map; sizes that the window does not divide
    /// are costed as if padded up to the next multiple.
    pub fn cost(&self, h: usize, w: usize) -> LayerCost {
        let (ws, c) = (self.ws, self.dim);
        let (hp, wp) = (h.div_ceil(ws) * ws, w.div_ceil(ws) * ws);
        let nw = (hp / ws) * (wp / ws);
        let p = ws * ws;
        let t = p + 1;
        let tokens = nw * t;
        let mut cost = LayerCost {
            params: c as u64,
            ..LayerCost::default()
        };
        cost += norm_cost(c) * 3;
        cost += linear_cost(tokens, c, c, true) * 3;
        cost += matmul_cost(nw, t, c, t) + matmul_cost(nw, t, t, c);
        cost += linear_cost(nw, c, c, true) * 2;
        cost += matmul_cost(1, nw, c, nw) + matmul_cost(1, nw, nw, p * c);
        cost += linear_cost(h * w, c, MLP_RATIO * c, true) + linear_cost(h * w, MLP_RATIO * c, c, true);
        cost.activations = (c * h * w) as u64;
        cost
    }
}

/// CSP-style wrapper: two 1×1 branches, the transformer block on one of them,
/// concatenation and a 1×1 fuse.
#[derive(Debug, Clone)]
pub struct C3SepVit {
    cv1: ConvBnAct,
    cv2: ConvBnAct,
    cv3: ConvBnAct,
    block: SepVitBlock,
}

impl C3SepVit {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        ws: usize,
        act: Act,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let hidden = c_out / 2;
        Ok(Self {
            cv1: ConvBnAct::new(store, &format!("{name}.cv1"), ConvSpec::new(c_in, hidden, 1, 1, act), rng)?,
            cv2: ConvBnAct::new(store, &format!("{name}.cv2"), ConvSpec::new(c_in, hidden, 1, 1, act), rng)?,
            block: SepVitBlock::new(store, &format!("{name}.m"), hidden, ws, rng),
            cv3: ConvBnAct::new(store, &format!("{name}.cv3"), ConvSpec::new(2 * hidden, c_out, 1, 1, act), rng)?,
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let a = self.cv1.forward(g, store, x)?;
        let a = self.block.forward(g, store, a)?;
        let b = self.cv2.forward(g, store, x)?;
        let y = g.concat(&[a, b], 1)?;
        self.cv3.forward(g, store, y)
    }

    pub fn cost(&self, h: usize, w: usize) -> LayerCost {
        self.cv1.cost(h, w).0 + self.cv2.cost(h, w).0 + self.block.cost(h, w) + self.cv3.cost(h, w).0
    }

    pub fn out_channels(&self) -> usize {
        self.cv3.spec.out_channels
    }
}
