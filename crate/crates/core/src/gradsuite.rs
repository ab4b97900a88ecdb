//! Finite-difference checks for every layer type at toy shapes, in f64.
//! Shared by the `gradcheck` command and the test suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bifpn::{DssBottleneck, DssC3, DssConv};
use crate::boxes::{BBox, BoxKind, LossOptions};
use crate::error::Result;
use crate::gam::Gam;
use crate::model::{training_loss, AnchorSet, LossConfig, Target};
use crate::nn::{Act, ConvGeom, ParamRole, ParamStore, BN_EPS, LN_EPS};
use crate::sepvit::{window_partition, SepVitBlock};
use crate::tensor::{grad_check_inputs, GradCheckReport, Graph, ParamId, Tensor, Var};

pub const SUITE_TOL: f64 = 1e-4;
const H: f64 = 1e-5;
/// Elements perturbed per input tensor in the larger checks.
const PROBES: usize = 8;

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng, r: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-r..r)).collect()).expect("shape")
}

/// Values away from the activation kinks (0 and ±3).
fn off_kinks(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = rng.gen_range(-4.0..4.0);
            if v.abs() > 0.05 && (v.abs() - 3.0).abs() > 0.05 {
                break v;
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape")
}

/// Checks a parameterized layer against its inputs and every trainable
/// tensor of `store`, in training mode.
fn with_params<F>(store: &ParamStore<f64>, inputs: Vec<Tensor<f64>>, f: F) -> GradCheckReport
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let ids: Vec<ParamId> = store.iter().filter(|(_, p)| p.role != ParamRole::Buffer).map(|(id, _)| id).collect();
    let k = inputs.len();
    let mut vals = inputs;
    vals.extend(ids.iter().map(|&id| store.value(id).clone()));
    grad_check_inputs(
        |g, vs| {
            g.set_training(true);
            for (&id, &v) in ids.iter().zip(&vs[k..]) {
                g.bind_param(id, v);
            }
            f(g, &vs[..k])
        },
        &vals,
        H,
        SUITE_TOL,
        Some(PROBES),
    )
}

/// Randomizes every trainable tensor so norm affine terms and tokens are
/// not at their trivial initial values.
fn jitter(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let ids: Vec<ParamId> = store.iter().filter(|(_, p)| p.role != ParamRole::Buffer).map(|(id, _)| id).collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v += rng.gen_range(-0.2..0.2);
        }
    }
}

/// Runs every check. Deterministic for a given seed.
pub fn run_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut push = |name: &str, report: GradCheckReport| {
        out.push(SuiteEntry {
            name: name.to_string(),
            report,
        })
    };

    let ins = vec![random(&[2, 3, 5, 5], &mut rng, 1.0), random(&[4, 3, 3, 3], &mut rng, 0.5), random(&[4], &mut rng, 0.5)];
    push(
        "conv2d",
        grad_check_inputs(|g, v| g.conv2d(v[0], v[1], Some(v[2]), ConvGeom::new(2, 1, 1)), &ins, H, SUITE_TOL, None),
    );
    let ins = vec![random(&[1, 4, 5, 5], &mut rng, 1.0), random(&[4, 1, 3, 3], &mut rng, 0.5)];
    push(
        "depthwise_conv",
        grad_check_inputs(|g, v| g.conv2d(v[0], v[1], None, ConvGeom::new(1, 1, 4)), &ins, H, SUITE_TOL, None),
    );
    let ins = vec![random(&[2, 3, 3, 3], &mut rng, 1.0), random(&[3], &mut rng, 1.0), random(&[3], &mut rng, 1.0)];
    push(
        "batchnorm",
        grad_check_inputs(|g, v| Ok(g.batch_norm_train(v[0], v[1], v[2], BN_EPS)?.0), &ins, H, SUITE_TOL, None),
    );
    let ins = vec![random(&[3, 5], &mut rng, 1.0), random(&[5], &mut rng, 1.0), random(&[5], &mut rng, 1.0)];
    push("layernorm", grad_check_inputs(|g, v| g.layer_norm(v[0], v[1], v[2], LN_EPS), &ins, H, SUITE_TOL, None));
    for (name, act) in [("mish", Act::Mish), ("hswish", Act::HSwish), ("leakyrelu", Act::leaky()), ("gelu", Act::Gelu)] {
        let x = off_kinks(&[24], &mut rng);
        push(name, grad_check_inputs(|g, v| Ok(g.activation(v[0], act)), &[x], H, SUITE_TOL, None));
    }

    let mut store = ParamStore::new();
    let block = SepVitBlock::new(&mut store, "sv", 8, 2, &mut rng);
    jitter(&mut store, &mut rng);
    let f = random(&[1, 4, 5, 8], &mut rng, 1.0);
    push("dwa", with_params(&store, vec![f], |g, v| Ok(block.dwa(g, &store, v[0])?.0)));
    let (f, wt) = (random(&[1, 4, 4, 8], &mut rng, 1.0), random(&[1, 4, 8], &mut rng, 1.0));
    push("pwa", with_params(&store, vec![f, wt], |g, v| Ok(block.pwa(g, &store, v[0], v[1])?.0)));
    let x = random(&[1, 8, 4, 4], &mut rng, 1.0);
    push("sepvit_block", with_params(&store, vec![x.clone()], |g, v| block.forward(g, &store, v[0])));
    push(
        "window_partition",
        grad_check_inputs(|g, v| Ok(window_partition(g, v[0], 2)?.0), &[x], H, SUITE_TOL, None),
    );

    let mut store = ParamStore::new();
    let conv = DssConv::new(&mut store, "dss", 4, 8, 3, 2, Act::Mish, &mut rng)?;
    jitter(&mut store, &mut rng);
    let x = random(&[2, 4, 6, 6], &mut rng, 1.0);
    push("dssconv", with_params(&store, vec![x], |g, v| conv.forward(g, &store, v[0])));

    let mut store = ParamStore::new();
    let c3 = DssC3::new(&mut store, "c3", 8, 8, 1, true, false, Act::Mish, &mut rng)?;
    jitter(&mut store, &mut rng);
    let x = random(&[2, 8, 4, 4], &mut rng, 1.0);
    push("dssc3", with_params(&store, vec![x], |g, v| c3.forward(g, &store, v[0])));

    let mut store = ParamStore::new();
    let gam = Gam::new(&mut store, "gam", 8, Act::Mish, &mut rng)?;
    jitter(&mut store, &mut rng);
    let x = random(&[2, 8, 4, 4], &mut rng, 1.0);
    push("gam", with_params(&store, vec![x], |g, v| gam.forward(g, &store, v[0])));

    let mut store = ParamStore::new();
    let gb = DssBottleneck::new(&mut store, "gb", 8, 8, true, true, Act::Mish, &mut rng)?;
    jitter(&mut store, &mut rng);
    let x = random(&[2, 8, 4, 4], &mut rng, 1.0);
    push("gam_bottleneck", with_params(&store, vec![x], |g, v| gb.forward(g, &store, v[0])));

    let x = Tensor::from_f64(&[2, 4], &[0.5, 0.45, 0.3, 0.2, 0.3, 0.6, 0.25, 0.4])?;
    let targets = [BBox::new(0.55, 0.5, 0.35, 0.25), BBox::new(0.25, 0.7, 0.2, 0.3)];
    for kind in BoxKind::ALL {
        let r = grad_check_inputs(|g, v| g.box_loss(v[0], &targets, kind, LossOptions::default()), &[x.clone()], 1e-6, SUITE_TOL, None);
        push(&format!("{kind}_loss"), r);
    }

    let (img, nc) = (64, 2);
    let anchors = AnchorSet::for_input(img);
    let no = 5 + nc;
    let maps: Vec<Tensor<f64>> = [8, 4, 2].iter().map(|&s| random(&[2, 3 * no, s, s], &mut rng, 1.5)).collect();
    let ts = [
        Target { image: 0, class_id: 0, bbox: BBox::new(20.3, 30.7, 12.0, 9.0) },
        Target { image: 1, class_id: 1, bbox: BBox::new(40.2, 18.9, 30.0, 40.0) },
    ];
    let cfg = LossConfig {
        iou_obj_target: false,
        ..LossConfig::default()
    };
    push(
        "training_loss",
        grad_check_inputs(|g, hs| Ok(training_loss(g, hs, &ts, &anchors, nc, &cfg)?.total), &maps, H, SUITE_TOL, Some(60)),
    );

    Ok(out)
}

/// A cube whose backward claims the derivative is x². The suite must reject it.
pub fn negative_control(seed: u64) -> SuiteEntry {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(&[8], &mut rng, 2.0);
    let report = grad_check_inputs(|g, v| Ok(g.unary(v[0], |a| a * a * a, |a, _| a * a)), &[x], H, SUITE_TOL, None);
    SuiteEntry {
        name: "wrong_gradient_stub".into(),
        report,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn negative_control_fails() {
        assert!(!negative_control(0).passed());
    }
}
