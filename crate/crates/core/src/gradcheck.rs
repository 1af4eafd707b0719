//! Central finite-difference checks of the autodiff engine.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::labelkit::decouple;
use crate::losses::{bce_loss, iou_loss, total_loss, SupervisionSet};
use crate::maps::BinaryMask;
use crate::network::{Bfm, GlassNet, Mid, NetworkConfig, SeBlock};
use crate::neural::{
    add, batch_norm, concat_channels, conv2d, global_avg_pool, linear, mean, mul, no_grad, relu,
    resize_bilinear, sigmoid, sum, BnStats, Conv2dSpec, NormMode, ParamStore, Tensor,
};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator so that vanishing
    /// gradients are compared absolutely.
    pub floor: f64,
    /// The floor is raised to cover `roundoff · ε · |loss| / step`, the
    /// cancellation noise of the difference quotient.
    pub roundoff: f64,
    /// Entries checked per tensor; larger tensors are subsampled.
    pub max_entries: usize,
    /// Share of entries allowed to sit within one step of a kink.
    pub max_nonsmooth_fraction: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            roundoff: 64.0,
            max_entries: 16,
            max_nonsmooth_fraction: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub checked: usize,
    /// Entries resolved only at the refined step.
    pub refined: usize,
    /// Entries skipped because the difference quotient never converged.
    pub nonsmooth: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<28} entries {:>5} refined {:>3} nonsmooth {:>3} max_rel_err {:.3e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.checked,
            self.refined,
            self.nonsmooth,
            self.max_rel_error
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the backward pass of the scalar `loss` against central
/// differences with respect to every tensor in `inputs`.
pub fn check_gradients(
    name: &str,
    inputs: &[Tensor<f64>],
    loss: impl Fn() -> Result<Tensor<f64>>,
    opts: &GradCheckOptions,
    rng: &mut ChaCha8Rng,
) -> Result<CheckResult> {
    inputs.iter().for_each(Tensor::zero_grad);
    let out = loss()?;
    if out.numel() != 1 {
        return Err(Error::invalid(format!("{name}: loss is not a scalar")));
    }
    out.backward()?;
    let scale = out.item().abs();
    let floor = |h: f64| opts.floor.max(opts.roundoff * f64::EPSILON * scale / (h * opts.tolerance));
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.take_grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = || -> Result<f64> { Ok(no_grad(&loss)?.item()) };
    let central = |t: &Tensor<f64>, i: usize, h: f64| -> Result<f64> {
        let orig = t.data()[i];
        t.data_mut()[i] = orig + h;
        let plus = eval();
        t.data_mut()[i] = orig - h;
        let minus = eval();
        t.data_mut()[i] = orig;
        Ok((plus? - minus?) / (2.0 * h))
    };
    let (h, fine_h) = (opts.step, opts.step / 100.0);
    let mut checked = 0;
    let mut refined = 0;
    let mut nonsmooth = 0;
    let mut worst = 0.0f64;
    for (t, grad) in inputs.iter().zip(&analytic) {
        let n = t.numel();
        let mut idx: Vec<usize> = if n <= opts.max_entries {
            (0..n).collect()
        } else {
            sample(rng, n, opts.max_entries).into_vec()
        };
        idx.sort_unstable();
        for i in idx {
            checked += 1;
            let a = grad[i];
            let numeric = central(t, i, h)?;
            let err = relative_error(a, numeric, floor(h));
            if err <= opts.tolerance {
                worst = worst.max(err);
                continue;
            }
            // Step-halved extrapolation removes the O(h²) term.
            let half = central(t, i, h / 2.0)?;
            let err_ex = relative_error(a, (4.0 * half - numeric) / 3.0, floor(h));
            if err_ex <= opts.tolerance {
                worst = worst.max(err_ex);
                continue;
            }
            // A ReLU kink within one step: a much smaller step usually clears it.
            let fine = central(t, i, fine_h)?;
            let err_fine = relative_error(a, fine, floor(fine_h));
            if err_fine <= opts.tolerance {
                refined += 1;
                worst = worst.max(err_fine);
                continue;
            }
            let unconverged = relative_error(numeric, half, floor(fine_h)) > opts.tolerance
                || relative_error(half, fine, floor(fine_h)) > opts.tolerance;
            if unconverged {
                nonsmooth += 1;
            } else {
                worst = worst.max(err);
            }
        }
    }
    let passed = worst <= opts.tolerance && (nonsmooth as f64) <= opts.max_nonsmooth_fraction * checked as f64;
    Ok(CheckResult {
        name: name.to_string(),
        checked,
        refined,
        nonsmooth,
        max_rel_error: worst,
        passed,
    })
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64, leaf: bool) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    if leaf {
        Tensor::parameter(shape, data).expect("shape matches")
    } else {
        Tensor::new(shape, data).expect("shape matches")
    }
}

fn param(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    random(rng, shape, -1.0, 1.0, true)
}

/// Fixed random weighting so that every output entry reaches the loss with
/// a distinct coefficient.
fn probe(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    random(rng, shape, -1.0, 1.0, false)
}

fn weighted(out: &Tensor<f64>, w: &Tensor<f64>) -> Result<Tensor<f64>> {
    Ok(sum(&mul(out, w)?))
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> BinaryMask {
    let (y0, x0) = (rng.gen_range(0..h / 2), rng.gen_range(0..w / 2));
    let (y1, x1) = (rng.gen_range(h / 2 + 1..=h), rng.gen_range(w / 2 + 1..=w));
    BinaryMask::from_fn(h, w, |y, x| (y0..y1).contains(&y) && (x0..x1).contains(&x)).expect("non-empty")
}

fn mask_tensor(masks: &[BinaryMask], pick: impl Fn(&BinaryMask) -> Vec<f32>) -> Tensor<f64> {
    let (h, w) = (masks[0].height(), masks[0].width());
    let data: Vec<f64> = masks.iter().flat_map(pick).map(f64::from).collect();
    Tensor::new(&[masks.len(), 1, h, w], data).expect("shape matches")
}

/// Supervision for `b` items of size `h×w`, derived from random rectangles.
pub fn random_supervision(rng: &mut ChaCha8Rng, b: usize, h: usize, w: usize) -> SupervisionSet<f64> {
    let masks: Vec<BinaryMask> = (0..b).map(|_| random_mask(rng, h, w)).collect();
    SupervisionSet {
        glass: mask_tensor(&masks, |m| m.to_float().into_values()),
        inner: mask_tensor(&masks, |m| decouple(m).interior.into_values()),
        boundary: mask_tensor(&masks, |m| decouple(m).boundary.into_values()),
    }
}

/// Toy network for end-to-end checks: 8 channels throughout.
pub fn toy_network_config() -> NetworkConfig {
    NetworkConfig {
        input_size: 16,
        encoder_channels: [8; 5],
        decoder_width: 8,
        ..NetworkConfig::default()
    }
}

/// Runs every layer check plus the end-to-end network check.
pub fn run_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let opts = GradCheckOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    macro_rules! check {
        ($name:expr, $inputs:expr, $loss:expr) => {{
            let r = check_gradients($name, &$inputs, $loss, &opts, &mut rng)?;
            results.push(r);
        }};
    }

    // Elementwise and shape ops.
    let a = param(&mut rng, &[2, 3, 4, 4]);
    let b = param(&mut rng, &[1, 3, 1, 4]);
    let w = probe(&mut rng, &[2, 3, 4, 4]);
    check!("add_broadcast", [a.clone(), b.clone()], || weighted(&add(&a, &b)?, &w));
    check!("mul_broadcast", [a.clone(), b.clone()], || weighted(&mul(&a, &b)?, &w));
    check!("sigmoid", [a.clone()], || weighted(&sigmoid(&a), &w));
    check!("relu", [a.clone()], || weighted(&relu(&a), &w));
    check!("mean", [a.clone()], || Ok(mean(&mul(&a, &a)?)));
    let c = param(&mut rng, &[2, 2, 4, 4]);
    let wc = probe(&mut rng, &[2, 5, 4, 4]);
    check!("concat_channels", [a.clone(), c.clone()], || weighted(&concat_channels(&[&a, &c])?, &wc));
    let wp = probe(&mut rng, &[2, 3, 1, 1]);
    check!("global_avg_pool", [a.clone()], || weighted(&global_avg_pool(&a)?, &wp));
    let x = param(&mut rng, &[3, 4]);
    let lw = param(&mut rng, &[4, 2]);
    let lb = param(&mut rng, &[2]);
    let wl = probe(&mut rng, &[3, 2]);
    check!("linear", [x.clone(), lw.clone(), lb.clone()], || weighted(&linear(&x, &lw, &lb)?, &wl));

    for (h, w_) in [(8, 8), (2, 3), (5, 7)] {
        let wr = probe(&mut rng, &[2, 3, h, w_]);
        check!(&format!("resize_bilinear_{h}x{w_}"), [a.clone()], || {
            weighted(&resize_bilinear(&a, h, w_)?, &wr)
        });
    }

    // Convolutions.
    let convs = [
        ("conv3x3", 3, Conv2dSpec::same(3, 1), 8),
        ("conv1x1", 1, Conv2dSpec::default(), 8),
        ("conv3x3_stride2", 3, Conv2dSpec { stride: 2, padding: 1, dilation: 1 }, 8),
        ("conv3x3_dil2", 3, Conv2dSpec::same(3, 2), 8),
        ("conv3x3_dil4", 3, Conv2dSpec::same(3, 4), 10),
        ("conv3x3_dil8", 3, Conv2dSpec::same(3, 8), 18),
        ("conv3x3_dil16", 3, Conv2dSpec::same(3, 16), 34),
    ];
    for (name, k, spec, size) in convs {
        let x = param(&mut rng, &[2, 2, size, size]);
        let wt = param(&mut rng, &[3, 2, k, k]);
        let bias = param(&mut rng, &[3]);
        let out = crate::neural::conv_output_extent(size, k, spec).expect("valid geometry");
        let wo = probe(&mut rng, &[2, 3, out, out]);
        check!(name, [x.clone(), wt.clone(), bias.clone()], || {
            weighted(&conv2d(&x, &wt, Some(&bias), spec)?, &wo)
        });
    }

    // Batch norm in both modes.
    let x = param(&mut rng, &[3, 2, 3, 3]);
    let gamma = param(&mut rng, &[2]);
    let beta = param(&mut rng, &[2]);
    let wb = probe(&mut rng, &[3, 2, 3, 3]);
    for (name, mode) in [("batch_norm_train", NormMode::Train), ("batch_norm_eval", NormMode::Eval)] {
        let stats = std::cell::RefCell::new(BnStats { mean: vec![0.2, -0.1], var: vec![0.7, 1.3], momentum: 0.1 });
        check!(name, [x.clone(), gamma.clone(), beta.clone()], || {
            weighted(&batch_norm(&x, &gamma, &beta, &mut stats.borrow_mut(), mode, 1e-5)?, &wb)
        });
    }

    // Network blocks.
    let mut store = ParamStore::<f64>::new(seed ^ 0x5e);
    let se = SeBlock::new(&mut store, "se", 4, 4)?;
    let x = param(&mut rng, &[2, 4, 3, 3]);
    let ws = probe(&mut rng, &[2, 4, 3, 3]);
    let mut inputs = vec![x.clone()];
    inputs.extend(store.params().iter().map(|p| p.tensor.clone()));
    check!("se_block", inputs, || weighted(&se.forward(&x)?, &ws));

    let mut store = ParamStore::<f64>::new(seed ^ 0x31d);
    let mid = Mid::new(&mut store, "mid", 2, &[2, 4, 8, 16], true)?;
    let x = param(&mut rng, &[2, 2, 6, 6]);
    let wm = probe(&mut rng, &[2, 2, 6, 6]);
    let mut inputs = vec![x.clone()];
    inputs.extend(store.params().iter().map(|p| p.tensor.clone()));
    check!("mid", inputs, || weighted(&mid.forward(&x, NormMode::Train)?, &wm));

    let mut store = ParamStore::<f64>::new(seed ^ 0xbf);
    let bfm = Bfm::new(&mut store, "bfm", 4, 4)?;
    let feat = param(&mut rng, &[2, 4, 4, 4]);
    let pb = random(&mut rng, &[2, 1, 4, 4], 0.0, 1.0, true);
    let pi = random(&mut rng, &[2, 1, 4, 4], 0.0, 1.0, true);
    let wf = probe(&mut rng, &[2, 4, 4, 4]);
    let mut inputs = vec![feat.clone(), pb.clone(), pi.clone()];
    inputs.extend(store.params().iter().map(|p| p.tensor.clone()));
    check!("bfm", inputs, || weighted(&bfm.forward(&pb, &pi, &feat, NormMode::Train)?, &wf));

    // Losses.
    let logits = param(&mut rng, &[2, 1, 4, 4]);
    let target = random(&mut rng, &[2, 1, 4, 4], 0.0, 1.0, true);
    check!("bce_loss", [logits.clone(), target.clone()], || bce_loss(&logits, &target));
    let probs = random(&mut rng, &[2, 1, 4, 4], 0.05, 0.95, true);
    check!("iou_loss", [probs.clone(), target.clone()], || iou_loss(&probs, &target));

    // End to end.
    let net = GlassNet::<f64>::new(toy_network_config(), seed)?;
    // Zero shifts put dead channels exactly on the ReLU kink; move off it.
    for p in net.store().params().iter().filter(|p| p.name.ends_with(".beta")) {
        p.tensor.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
    }
    let image = random(&mut rng, &[2, 3, 16, 16], 0.0, 1.0, true);
    let sup = random_supervision(&mut rng, 2, 16, 16);
    let cfg = net.config().clone();
    let mut inputs = vec![image.clone()];
    inputs.extend(net.store().params().iter().map(|p| p.tensor.clone()));
    let net_opts = GradCheckOptions { max_entries: 3, ..opts };
    let r = check_gradients(
        "network_16x16",
        &inputs,
        || {
            let bundle = net.forward(&image, NormMode::Train)?;
            Ok(total_loss(&bundle, &sup, cfg.glass_branches(), cfg.boundary_branches())?.total)
        },
        &net_opts,
        &mut rng,
    )?;
    results.push(r);
    Ok(results)
}
