//! The gradient-integrity suite: central finite-difference checks (64-bit,
//! `h = 1e-5`) of every differentiable operation, the losses, one attention
//! block and the whole tiny-profile network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{AttentionVars, SwinBlock, WindowConfig, register_attention, msa_forward};
use crate::error::Result;
use crate::loss::{combo_loss, dice_loss, focal_loss, LossConfig};
use crate::network::{ModelConfig, SstDUNet};
use crate::tensor::{concat, finite_diff_check_many, Bindings, ConvGeometry, GradCheckReport, ParamInit, ParamStore, Tensor, Var};

/// Finite-difference step.
pub const GRADCHECK_STEP: f64 = 1e-5;
/// Tolerance on the max relative error of single operations.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Tolerance for composite graphs (attention block, full network).
pub const MODEL_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Serialize)]
pub struct GradCase {
    pub name: String,
    /// `true` for the composite checks judged against [`MODEL_TOLERANCE`].
    pub composite: bool,
    pub report: GradCheckReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradSuite {
    pub cases: Vec<GradCase>,
}

impl GradSuite {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.report.passed())
    }

    /// Worst relative error over the single-operation cases.
    pub fn max_op_error(&self) -> f64 {
        self.cases.iter().filter(|c| !c.composite).map(|c| c.report.max_rel_error).fold(0.0, f64::max)
    }

    /// Worst relative error over the composite cases.
    pub fn max_composite_error(&self) -> f64 {
        self.cases.iter().filter(|c| c.composite).map(|c| c.report.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&GradCase> {
        self.cases.iter().filter(|c| !c.report.passed()).collect()
    }
}

struct Builder {
    rng: ChaCha8Rng,
    cases: Vec<GradCase>,
}

fn c(t: &Tensor<f64>) -> Var<f64> {
    Var::constant(t.clone())
}

/// Every coordinate of every input.
fn all_coords(inputs: &[Tensor<f64>]) -> Vec<(usize, usize)> {
    inputs
        .iter()
        .enumerate()
        .flat_map(|(k, t)| (0..t.numel()).map(move |i| (k, i)))
        .collect()
}

/// About `per` evenly spread coordinates of every input.
fn spread_coords(inputs: &[Tensor<f64>], per: usize) -> Vec<(usize, usize)> {
    inputs
        .iter()
        .enumerate()
        .flat_map(|(k, t)| (0..t.numel()).step_by((t.numel() / per).max(1)).map(move |i| (k, i)))
        .collect()
}

impl Builder {
    fn rand(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
    }

    fn randomize(&mut self, store: &mut ParamStore<f64>, scale: f64) {
        for (_, t) in store.iter_mut() {
            for v in t.data_mut() {
                *v = self.rng.gen_range(-scale..scale);
            }
        }
    }

    fn case(
        &mut self,
        name: &str,
        inputs: Vec<Tensor<f64>>,
        f: impl Fn(&[Var<f64>]) -> Result<Var<f64>>,
    ) -> Result<()> {
        let coords = all_coords(&inputs);
        let report = finite_diff_check_many(f, &inputs, &coords, GRADCHECK_STEP, OP_TOLERANCE)?;
        self.cases.push(GradCase {
            name: name.to_owned(),
            composite: false,
            report,
        });
        Ok(())
    }

    fn composite(
        &mut self,
        name: &str,
        inputs: Vec<Tensor<f64>>,
        per: usize,
        f: impl Fn(&[Var<f64>]) -> Result<Var<f64>>,
    ) -> Result<()> {
        let coords = spread_coords(&inputs, per);
        let report = finite_diff_check_many(f, &inputs, &coords, GRADCHECK_STEP, MODEL_TOLERANCE)?;
        self.cases.push(GradCase {
            name: name.to_owned(),
            composite: true,
            report,
        });
        Ok(())
    }
}

/// Weighted sum reducing any output to a scalar with non-uniform weights.
fn probe(y: &Var<f64>) -> Result<Var<f64>> {
    let w = Tensor::from_fn(y.shape(), |i| ((i % 7) as f64 - 3.0) / 3.0);
    Ok(y.mul(&Var::constant(w))?.sum())
}

fn bind(names: &[String], vars: &[Var<f64>]) -> Bindings<f64> {
    Bindings::from_vars(names.iter().cloned().zip(vars.iter().cloned()))
}

/// Runs every check; deterministic in `seed`.
pub fn gradcheck_suite(seed: u64) -> Result<GradSuite> {
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(seed),
        cases: Vec::new(),
    };

    // Elementwise arithmetic with broadcasting.
    let (x, y, col) = (b.rand(&[2, 3], -2.0, 2.0), b.rand(&[3], -2.0, 2.0), b.rand(&[2, 1], 0.5, 2.0));
    b.case("add_sub_mul", vec![x.clone(), y.clone()], |v| {
        probe(&v[0].add(&v[1])?.mul(&v[0].sub(&v[1])?)?)
    })?;
    b.case("div", vec![x.clone(), col.clone()], |v| probe(&v[0].div(&v[1])?))?;
    b.case("scalar_ops", vec![x.clone()], |v| {
        probe(&v[0].one_minus().neg().add_scalar(0.3).mul_scalar(1.7).mul(&v[0])?)
    })?;

    // Unary functions.
    let pos = b.rand(&[2, 3], 0.5, 2.0);
    b.case("log", vec![pos.clone()], |v| probe(&v[0].log()))?;
    b.case("exp", vec![x.clone()], |v| probe(&v[0].exp()))?;
    b.case("powf", vec![pos.clone()], |v| probe(&v[0].powf(1.7)))?;
    b.case("clamp", vec![x.clone()], |v| probe(&v[0].clamp(-1.0, 1.0).mul(&v[0])?))?;
    b.case("leaky_relu", vec![x.clone()], |v| probe(&v[0].leaky_relu(0.01).mul(&v[0])?))?;
    b.case("sigmoid", vec![x.clone()], |v| probe(&v[0].sigmoid()))?;
    b.case("gelu", vec![x.clone()], |v| probe(&v[0].gelu()))?;

    // Reductions and layout.
    let t3 = b.rand(&[2, 3, 4], -2.0, 2.0);
    let other = b.rand(&[2, 2, 4], -2.0, 2.0);
    b.case("sum_mean", vec![t3.clone()], |v| v[0].sum().add(&v[0].mul(&v[0])?.mean()))?;
    b.case("sum_axis", vec![t3.clone()], |v| probe(&v[0].sum_axis(1)?.gelu()))?;
    b.case("reshape_permute", vec![t3.clone()], |v| probe(&v[0].reshape(&[4, 6])?.permute(&[1, 0])?.gelu()))?;
    b.case("transpose_last", vec![t3.clone()], |v| probe(&v[0].matmul(&v[0].transpose_last()?)?))?;
    b.case("roll", vec![t3.clone()], |v| probe(&v[0].roll(&[1, -2, 3])?.mul(&v[0])?))?;
    b.case("concat", vec![t3.clone(), other], |v| probe(&concat(&[v[0].clone(), v[1].clone()], 1)?.gelu()))?;

    // Linear algebra and normalisation.
    let w = b.rand(&[4, 5], -1.0, 1.0);
    b.case("matmul", vec![t3.clone(), w], |v| probe(&v[0].matmul(&v[1])?))?;
    let logits = b.rand(&[3, 5], -2.0, 2.0);
    b.case("softmax", vec![logits.clone()], |v| probe(&v[0].softmax(1)?))?;
    let mut mask = Tensor::zeros(&[3, 5]);
    for i in [1, 6, 7, 13] {
        mask.data_mut()[i] = f64::NEG_INFINITY;
    }
    b.case("softmax_masked", vec![logits.clone()], |v| probe(&v[0].add(&c(&mask))?.softmax(1)?))?;
    let (gamma, beta) = (b.rand(&[5], 0.5, 1.5), b.rand(&[5], -0.5, 0.5));
    b.case("layer_norm", vec![logits, gamma, beta], |v| probe(&v[0].layer_norm(&v[1], &v[2], 1e-5)?))?;

    // Volumetric operators.
    let g = ConvGeometry {
        kernel: [3, 3, 2],
        stride: [2, 1, 2],
        padding: [1, 1, 0],
    };
    let (cx, cw, cb) = (b.rand(&[1, 2, 4, 3, 4], -1.0, 1.0), b.rand(&[2, 2, 3, 3, 2], -1.0, 1.0), b.rand(&[2], -1.0, 1.0));
    b.case("conv3d", vec![cx, cw, cb], |v| probe(&v[0].conv3d(&v[1], Some(&v[2]), g)?))?;
    let tg = ConvGeometry::cube(2, 2, 0);
    let (tx, tw, tb) = (b.rand(&[1, 2, 2, 2, 2], -1.0, 1.0), b.rand(&[2, 2, 2, 2, 2], -1.0, 1.0), b.rand(&[2], -1.0, 1.0));
    b.case("conv_transpose3d", vec![tx, tw, tb], |v| {
        probe(&v[0].conv_transpose3d(&v[1], Some(&v[2]), tg)?)
    })?;
    let px = b.rand(&[1, 2, 4, 4, 2], -1.0, 1.0);
    b.case("maxpool3d", vec![px], |v| probe(&v[0].maxpool3d([2, 2, 2])?))?;

    // Losses (predictions strictly inside (0, 1)).
    let pred = b.rand(&[2, 1, 2, 2, 3], 0.05, 0.95);
    let target = Tensor::from_fn(&[2, 1, 2, 2, 3], |i| ((i * 7 + 3) % 5 < 2) as u8 as f64);
    let cfg = LossConfig::default();
    b.case("dice_loss", vec![pred.clone()], |v| dice_loss(&v[0], &target, cfg.eps))?;
    b.case("focal_loss", vec![pred.clone()], |v| focal_loss(&v[0], &target, 2.0))?;
    b.case("combo_loss", vec![pred], |v| combo_loss(&v[0], &target, &cfg))?;

    // Windowed attention with an additive mask, every operand.
    let mut store = ParamStore::<f64>::new();
    register_attention(&mut store, &mut ParamInit::new(seed), "attn", 4)?;
    b.randomize(&mut store, 0.5);
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_owned()).collect();
    let tokens = b.rand(&[2, 8, 4], -1.0, 1.0);
    let bias = b.rand(&[2, 2, 8, 8], -0.5, 0.5);
    let mut inputs = vec![tokens, bias];
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    b.case("msa_forward", inputs, |v| {
        let p = AttentionVars::from_bindings(&bind(&names, &v[2..]), "attn", 2)?;
        probe(&msa_forward(&v[0], &p, Some(&v[1]))?)
    })?;

    // One smart shifted-window block.
    let blk = SwinBlock::new("blk", &WindowConfig::new(2, 2, 2), [4, 4, 4], 2)?;
    let mut store = ParamStore::<f64>::new();
    blk.register(&mut store, &mut ParamInit::new(seed))?;
    b.randomize(&mut store, 0.5);
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_owned()).collect();
    let mut inputs = vec![b.rand(&[1, 4, 4, 4, 4], -2.0, 2.0)];
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    b.composite("swin_block", inputs, 4, |v| probe(&blk.forward(&bind(&names, &v[1..]), &v[0])?))?;

    // The whole network at the tiny profile.
    let net = SstDUNet::new(ModelConfig::tiny())?;
    let mut store = net.init_weights::<f64>(seed)?;
    b.randomize(&mut store, 0.4);
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_owned()).collect();
    let mut inputs = vec![b.rand(&[1, 1, 16, 16, 16], 0.0, 1.0)];
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    b.composite("sst_dunet_tiny", inputs, 6, |v| probe(&net.forward(&bind(&names, &v[1..]), &v[0])?))?;

    Ok(GradSuite { cases: b.cases })
}
