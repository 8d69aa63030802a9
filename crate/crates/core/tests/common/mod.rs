//! Independent oracles and the end-to-end checks built on them.
//!
//! Each `check_*` returns a one-line summary on success and a diagnostic on
//! failure, so the same code backs the per-crate tests and the acceptance run.

#![allow(dead_code)]

use std::panic::{catch_unwind, AssertUnwindSafe};

use ctdense::autograd::{Tape, Var};
use ctdense::data::synth_generate;
use ctdense::gradcheck::{grad_check, numeric_check, GradCheckOptions};
use ctdense::mha::{read_mha, write_mha, ElementType, MhaHeader, VoxelData, Volume};
use ctdense::model::{count_connections, probe_matches_plan, weighted_layer_count, Layout};
use ctdense::ops::{self, BatchNormParams, PoolMode, PoolSpec, RunningStats};
use ctdense::preprocess::{preprocess, PreprocessConfig};
use ctdense::{DenseNetConfig, DenseNetModel, Tensor, TensorError};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<String, String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero, for ops with a kink there.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.05..1.5);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// A random permutation of `0.1, 0.2, …`: every window has a unique maximum
/// that a small perturbation cannot change.
pub fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut values: Vec<f64> = (0..n).map(|i| 0.1 * (i as f64 + 1.0)).collect();
    for i in (1..n).rev() {
        values.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape.to_vec(), values).unwrap()
}

pub fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, stride: usize, pad: usize) -> Tensor<f64> {
    let [n, c, h, wd] = *x.shape() else { panic!() };
    let [o, _, kh, kw] = *w.shape() else { panic!() };
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let xi = |a: usize, ch: usize, y: isize, xx: isize| {
        if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
            0.0
        } else {
            x.data()[((a * c + ch) * h + y as usize) * wd + xx as usize]
        }
    };
    let mut out = vec![0.0; n * o * oh * ow];
    for a in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = b.map_or(0.0, |b| b.data()[oc]);
                    for ch in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * stride + i) as isize - pad as isize;
                                let ix = (xx * stride + j) as isize - pad as isize;
                                s += xi(a, ch, iy, ix) * w.data()[((oc * c + ch) * kh + i) * kw + j];
                            }
                        }
                    }
                    out[((a * o + oc) * oh + y) * ow + xx] = s;
                }
            }
        }
    }
    Tensor::new([n, o, oh, ow], out).unwrap()
}

pub fn pool_oracle(x: &Tensor<f64>, spec: PoolSpec) -> Tensor<f64> {
    let [n, c, h, w] = *x.shape() else { panic!() };
    if spec.mode == PoolMode::GlobalAverage {
        let out = x.data().chunks(h * w).map(|p| p.iter().sum::<f64>() / (h * w) as f64).collect();
        return Tensor::new([n, c, 1, 1], out).unwrap();
    }
    let (k, s, p) = (spec.kernel, spec.stride, spec.padding);
    let oh = (h + 2 * p - k) / s + 1;
    let ow = (w + 2 * p - k) / s + 1;
    let mut out = Vec::new();
    for plane in x.data().chunks(h * w) {
        for y in 0..oh {
            for xx in 0..ow {
                let mut vals = Vec::new();
                for i in 0..k {
                    for j in 0..k {
                        let iy = (y * s + i) as isize - p as isize;
                        let ix = (xx * s + j) as isize - p as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            vals.push(plane[iy as usize * w + ix as usize]);
                        }
                    }
                }
                out.push(match spec.mode {
                    PoolMode::Max => vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                    _ => vals.iter().sum::<f64>() / vals.len() as f64,
                });
            }
        }
    }
    Tensor::new([n, c, oh, ow], out).unwrap()
}

pub fn linear_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let [n, f] = *x.shape() else { panic!() };
    let d = w.shape()[0];
    let out = (0..n * d)
        .map(|i| {
            let (r, o) = (i / d, i % d);
            b.data()[o] + (0..f).map(|j| x.data()[r * f + j] * w.data()[o * f + j]).sum::<f64>()
        })
        .collect();
    Tensor::new([n, d], out).unwrap()
}

/// `−[y·ln σ(x) + (1−y)·ln(1−σ(x))]`, evaluated directly.
pub fn bce_naive(x: f64, y: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    -(y * s.ln() + (1.0 - y) * (1.0 - s).ln())
}

/// Closed-form parameter count of a DenseNet-BC, summed per stage.
pub fn densenet_param_oracle(c: &DenseNetConfig) -> usize {
    let k = c.growth_rate;
    let bottleneck = c.bottleneck_width * k;
    // stem conv + its normalization
    let mut total = c.init_features * c.input_channels * 49 + 2 * c.init_features;
    let mut w = c.init_features;
    for (b, &n) in c.block_layers.iter().enumerate() {
        // Σ over layers of the input width w + l·k, times the per-input-channel
        // cost (2 for the norm, `bottleneck` for the 1×1 conv), plus the
        // width-independent part of each layer.
        let input_sum = n * w + k * n * (n - 1) / 2;
        total += input_sum * (2 + bottleneck) + n * (2 * bottleneck + 9 * bottleneck * k);
        w += n * k;
        if b < 3 {
            let out = (c.compression * w as f64).floor() as usize;
            total += 2 * w + w * out;
            w = out;
        }
    }
    total + 2 * w + w * c.num_outputs + c.num_outputs
}

/// The same network with every dense layer fed only its predecessor.
pub fn chain_param_oracle(c: &DenseNetConfig) -> usize {
    let k = c.growth_rate;
    let bottleneck = c.bottleneck_width * k;
    let mut total = c.init_features * c.input_channels * 49 + 2 * c.init_features;
    let mut w = c.init_features;
    for (b, &n) in c.block_layers.iter().enumerate() {
        for l in 0..n {
            let input = if l == 0 { w } else { k };
            total += 2 * input + input * bottleneck + 2 * bottleneck + 9 * bottleneck * k;
        }
        w = k;
        if b < 3 {
            let out = (c.compression * w as f64).floor() as usize;
            total += 2 * w + w * out;
            w = out;
        }
    }
    total + 2 * w + w * c.num_outputs + c.num_outputs
}

fn weighted_sum(tape: &mut Tape<f64>, v: Var, weights: &Tensor<f64>) -> Result<Var, TensorError> {
    let m = tape.mul_const(v, weights.clone())?;
    tape.sum(m)
}

type OpCase = fn(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>>);

fn op_cases() -> Vec<(&'static str, OpCase)> {
    vec![
        ("conv2d", |r| {
            let stride = r.random_range(1..=2);
            let pad = r.random_range(0..=1);
            let inputs = vec![uniform(r, &[2, 3, 5, 5], -1.0, 1.0), uniform(r, &[4, 3, 3, 3], -1.0, 1.0), uniform(r, &[4], -1.0, 1.0)];
            let out = conv_oracle(&inputs[0], &inputs[1], None, stride, pad);
            let wts = uniform(r, out.shape(), -1.0, 1.0);
            (inputs, Box::new(move |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
                weighted_sum(t, y, &wts)
            }))
        }),
        ("batchnorm2d", |r| {
            let inputs = vec![uniform(r, &[3, 2, 3, 3], -2.0, 2.0), uniform(r, &[2], 0.5, 1.5), uniform(r, &[2], -0.5, 0.5)];
            let wts = uniform(r, &[3, 2, 3, 3], -1.0, 1.0);
            (inputs, Box::new(move |t, v| {
                let mut stats = RunningStats::new(2);
                let y = t.batchnorm2d(v[0], v[1], v[2], &mut stats, BatchNormParams::default())?;
                weighted_sum(t, y, &wts)
            }))
        }),
        ("batchnorm2d-eval", |r| {
            let inputs = vec![uniform(r, &[2, 3, 2, 2], -2.0, 2.0), uniform(r, &[3], 0.5, 1.5), uniform(r, &[3], -0.5, 0.5)];
            let stats = RunningStats {
                mean: uniform(r, &[3], -0.5, 0.5),
                var: uniform(r, &[3], 0.5, 2.0),
            };
            let wts = uniform(r, &[2, 3, 2, 2], -1.0, 1.0);
            (inputs, Box::new(move |t, v| {
                let mut s = stats.clone();
                let p = BatchNormParams { training: false, ..Default::default() };
                let y = t.batchnorm2d(v[0], v[1], v[2], &mut s, p)?;
                weighted_sum(t, y, &wts)
            }))
        }),
        ("relu", |r| {
            let inputs = vec![away_from_zero(r, &[2, 3, 4])];
            let wts = uniform(r, &[2, 3, 4], -1.0, 1.0);
            (inputs, Box::new(move |t, v| {
                let y = t.relu(v[0])?;
                weighted_sum(t, y, &wts)
            }))
        }),
        ("sigmoid", |r| {
            let inputs = vec![uniform(r, &[3, 5], -6.0, 6.0)];
            let wts = uniform(r, &[3, 5], -1.0, 1.0);
            (inputs, Box::new(move |t, v| {
                let y = t.sigmoid(v[0])?;
                weighted_sum(t, y, &wts)
            }))
        }),
        ("max_pool", |r| {
            let inputs = vec![distinct(r, &[2, 2, 5, 5])];
            let spec = if r.random_bool(0.5) { PoolSpec::max(3, 2, 1) } else { PoolSpec::max(2, 2, 0) };
            let shape = pool_oracle(&inputs[0], spec).shape().to_vec();
            let wts = uniform(r, &shape, -1.0, 1.0);
            (inputs, Box::new(move |t, v| {
                let y = t.pool2d(v[0], spec)?;
                weighted_sum(t, y, &wts)
            }))
        }),
        ("avg_pool", |r| {
            let inputs = vec![uniform(r, &[2, 2, 5, 5], -1.0, 1.0)];
            let spec = PoolSpec { mode: PoolMode::Average, kernel: 3, stride: 2, padding: r.random_range(0..=1) };
            let shape = pool_oracle(&inputs[0], spec).shape().to_vec();
            let wts = uniform(r, &shape, -1.0, 1.0);
            (inputs, Box::new(move |t, v| {
                let y = t.pool2d(v[0], spec)?;
                weighted_sum(t, y, &wts)
            }))
        }),
        ("global_avg_pool", |r| {
            let inputs = vec![uniform(r, &[2, 3, 4, 4], -1.0, 1.0)];
            let wts = uniform(r, &[2, 3, 1, 1], -1.0, 1.0);
            (inputs, Box::new(move |t, v| {
                let y = t.pool2d(v[0], PoolSpec::global_average())?;
                weighted_sum(t, y, &wts)
            }))
        }),
        ("concat_channels", |r| {
            let inputs = vec![uniform(r, &[2, 2, 3, 3], -1.0, 1.0), uniform(r, &[2, 3, 3, 3], -1.0, 1.0)];
            let wts = uniform(r, &[2, 5, 3, 3], -1.0, 1.0);
            (inputs, Box::new(move |t, v| {
                let y = t.concat_channels(v)?;
                weighted_sum(t, y, &wts)
            }))
        }),
        ("linear", |r| {
            let inputs = vec![uniform(r, &[3, 6], -1.0, 1.0), uniform(r, &[4, 6], -1.0, 1.0), uniform(r, &[4], -1.0, 1.0)];
            let wts = uniform(r, &[3, 4], -1.0, 1.0);
            (inputs, Box::new(move |t, v| {
                let y = t.linear(v[0], v[1], v[2])?;
                weighted_sum(t, y, &wts)
            }))
        }),
        ("reshape+square", |r| {
            let inputs = vec![uniform(r, &[2, 3, 2, 2], -1.0, 1.0)];
            let wts = uniform(r, &[2, 12], -1.0, 1.0);
            (inputs, Box::new(move |t, v| {
                let y = t.reshape(v[0], &[2, 12])?;
                let y = t.square(y)?;
                weighted_sum(t, y, &wts)
            }))
        }),
        ("bce_with_logits", |r| {
            let inputs = vec![uniform(r, &[4, 2], -8.0, 8.0)];
            let targets = Tensor::from_fn([4, 2], |_| if r.random_bool(0.5) { 1.0 } else { 0.0 });
            (inputs, Box::new(move |t, v| t.bce_with_logits(v[0], targets.clone())))
        }),
    ]
}

/// Finite-difference checks of every differentiable op over `seeds` seeds.
pub fn check_op_gradients(seeds: u64) -> Check {
    let opts = GradCheckOptions::default();
    let mut worst = (0.0f64, "");
    let mut count = 0;
    for (name, case) in op_cases() {
        for seed in 0..seeds {
            let mut r = rng(1000 + seed);
            let (inputs, f) = case(&mut r);
            let report = grad_check(|t, v| f(t, v), &inputs, opts).map_err(|e| format!("{name} seed {seed}: {e}"))?;
            if !report.passed() {
                return Err(format!("{name} seed {seed}: {:?}", report.failures().next()));
            }
            if report.max_error() >= worst.0 {
                worst = (report.max_error(), name);
            }
            count += 1;
        }
    }
    Ok(format!("{count} op checks, worst relative error {:.2e} ({})", worst.0, worst.1))
}

/// Low-frequency random images in [0, 1], closer to CT slices than white
/// noise: whole pooling windows fall below the per-channel mean, so no
/// parameter gradient vanishes by normalization symmetry.
pub fn smooth_images(r: &mut ChaCha8Rng, n: usize, size: usize) -> Tensor<f64> {
    let mut data = Vec::with_capacity(n * size * size);
    for _ in 0..n {
        let waves: Vec<(f64, f64, f64, f64)> = (0..4)
            .map(|_| (r.random_range(0.5..3.0), r.random_range(0.5..3.0), r.random_range(0.0..6.3), r.random_range(0.2..1.0)))
            .collect();
        for i in 0..size * size {
            let (y, x) = ((i / size) as f64 / size as f64, (i % size) as f64 / size as f64);
            let v: f64 = waves.iter().map(|&(fy, fx, ph, a)| a * (6.3 * (fy * y + fx * x) + ph).sin()).sum();
            data.push(0.5 + 0.2 * v + r.random_range(-0.01..0.01));
        }
    }
    Tensor::new([n, 1, size, size], data).unwrap()
}

/// Checks every parameter tensor of the REDUCED network on sampled entries.
///
/// Normalization runs on randomized running statistics. With batch
/// statistics most scale and shift parameters cancel in the next
/// normalization layer, leaving gradients at the finite-difference noise
/// floor; the batch-statistics backward is covered by the op-level check.
pub fn check_model_gradients(seeds: u64, entries_per_tensor: usize) -> Check {
    let config = DenseNetConfig::reduced();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for seed in 0..seeds {
        let mut r = rng(77 + seed);
        let mut model = DenseNetModel::<f64>::build(&config, seed).map_err(|e| e.to_string())?;
        for p in model.params_mut() {
            if p.name.contains("norm") {
                let jitter = uniform(&mut r, p.value.shape(), -0.2, 0.2);
                for (v, j) in p.value.data_mut().iter_mut().zip(jitter.data()) {
                    *v += j;
                }
            }
        }
        for s in model.running_stats_mut() {
            let c = s.mean.numel();
            s.mean = uniform(&mut r, &[c], -0.3, 0.3);
            s.var = uniform(&mut r, &[c], 0.5, 2.0);
        }
        let x = smooth_images(&mut r, 2, 32);
        let y = Tensor::from_fn([2, 2], |_| if r.random_bool(0.5) { 1.0 } else { 0.0 });

        let mut tape = Tape::new();
        let logits = model.forward_eval_on(&mut tape, x.clone()).map_err(|e| e.to_string())?;
        let loss = tape.bce_with_logits(logits, y.clone()).map_err(|e| e.to_string())?;
        tape.backward(loss).map_err(|e| e.to_string())?;
        model.zero_grads();
        model.accumulate_grads(&tape);

        let values: Vec<Tensor<f64>> = model.params().iter().map(|p| p.value.clone()).collect();
        let analytic: Vec<Tensor<f64>> = model
            .params()
            .iter()
            .map(|p| p.grad.clone().ok_or_else(|| format!("{} has no gradient", p.name)))
            .collect::<Result<_, _>>()?;
        let base = model.clone();
        let eval = |vals: &[Tensor<f64>]| {
            let mut m = base.clone();
            for (p, v) in m.params_mut().iter_mut().zip(vals) {
                p.value = v.clone();
            }
            let logits = m.forward_eval(x.clone()).map_err(|e| TensorError::NoGraph(e.to_string()))?;
            ops::bce_with_logits(&logits, &y)
        };
        let opts = GradCheckOptions {
            max_entries: Some(entries_per_tensor),
            seed,
            ..Default::default()
        };
        let report = numeric_check(eval, &analytic, &values, opts).map_err(|e| e.to_string())?;
        if let Some(f) = report.failures().next() {
            return Err(format!("seed {seed}: {} {f:?}", model.params()[f.input].name));
        }
        worst = worst.max(report.max_error());
        checked += report.inputs.iter().map(|i| i.checked).sum::<usize>();
    }
    Ok(format!("{seeds} seeds, {checked} parameter entries, worst relative error {worst:.2e}"))
}

const TORCHVISION_DENSENET121_PARAMS: usize = 7_978_856;

pub fn check_accounting() -> Check {
    let d121 = DenseNetConfig::densenet121();
    let d169 = DenseNetConfig::densenet169();
    let expect = |ok: bool, what: String| if ok { Ok(()) } else { Err(what) };
    expect(weighted_layer_count(&d121) == 121, format!("121 preset has {} layers", weighted_layer_count(&d121)))?;
    expect(weighted_layer_count(&d169) == 169, format!("169 preset has {} layers", weighted_layer_count(&d169)))?;
    expect(count_connections(121) == 7381, format!("connections(121) = {}", count_connections(121)))?;

    let head1000 = d121.clone().with_outputs(1000);
    let built = DenseNetModel::<f32>::build(&head1000, 0).map_err(|e| e.to_string())?.count_params();
    let oracle = densenet_param_oracle(&head1000);
    expect(built == oracle, format!("count_params {built} != oracle {oracle}"))?;
    expect(
        (built as f64 - 7.98e6).abs() / 7.98e6 < 0.005,
        format!("count_params {built} is not ≈ 7.98e6"),
    )?;
    let mut rgb = head1000.clone();
    rgb.input_channels = 3;
    let rgb_count = Layout::new(&rgb).map_err(|e| e.to_string())?.param_count();
    expect(
        rgb_count == TORCHVISION_DENSENET121_PARAMS,
        format!("3-channel count {rgb_count} != {TORCHVISION_DENSENET121_PARAMS}"),
    )?;
    let c121 = Layout::new(&d121).map_err(|e| e.to_string())?.param_count();
    let c169 = Layout::new(&d169).map_err(|e| e.to_string())?.param_count();
    expect(c169 > c121, format!("169 count {c169} not above 121 count {c121}"))?;
    expect(c169 == densenet_param_oracle(&d169), "169 count disagrees with the oracle".into())?;
    expect(chain_param_oracle(&d121) != c121, "dense count equals the chain count".into())?;
    Ok(format!("layers 121/169, connections 7381, params {built} (1000-way), 169 > 121 ({c169} > {c121})"))
}

pub const MAIN_SPATIAL: [usize; 7] = [112, 56, 56, 28, 14, 7, 1];

pub fn check_shape_plan() -> Check {
    let mut summary = Vec::new();
    for config in [DenseNetConfig::densenet121(), DenseNetConfig::densenet169()] {
        let mut model = DenseNetModel::<f32>::build(&config, 0).map_err(|e| e.to_string())?;
        let (logits, probe) = model
            .forward_probed(Tensor::zeros([1, 1, 224, 224]), false)
            .map_err(|e| e.to_string())?;
        if !probe_matches_plan(&config, &probe).map_err(|e| e.to_string())? {
            return Err(format!("{}: probed shapes differ from the plan: {:?}", config.label(), probe.stages));
        }
        let main = ["conv", "pool", "block1", "transition1.pool", "transition2.pool", "transition3.pool", "global_pool"];
        let spatial: Vec<usize> = main
            .iter()
            .map(|name| {
                let (_, shape) = probe.stages.iter().find(|(n, _)| n == name).expect("stage recorded");
                shape[2]
            })
            .collect();
        if spatial != MAIN_SPATIAL {
            return Err(format!("{}: spatial sizes {spatial:?}", config.label()));
        }
        if logits.shape() != [1, 2] {
            return Err(format!("{}: logits shape {:?}", config.label(), logits.shape()));
        }
        summary.push(format!("{} {spatial:?}", config.label()));
    }
    Ok(summary.join("; "))
}

fn max_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    if a.shape() != b.shape() {
        return f64::INFINITY;
    }
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn check_oracle_equivalence(instances: u64) -> Check {
    const TOL: f64 = 1e-5;
    let mut worst = [0.0f64; 3];
    for seed in 0..instances {
        let mut r = rng(5000 + seed);
        let dims = |r: &mut ChaCha8Rng| r.random_range(1..=6usize);
        // conv2d
        let (n, c, o) = (dims(&mut r), dims(&mut r), dims(&mut r));
        let (kh, kw) = (dims(&mut r), dims(&mut r));
        let pad = r.random_range(0..=2usize);
        let stride = r.random_range(1..=3usize);
        let h = r.random_range(kh.saturating_sub(2 * pad).max(1)..=6);
        let w = r.random_range(kw.saturating_sub(2 * pad).max(1)..=6);
        let x = uniform(&mut r, &[n, c, h, w], -1.0, 1.0);
        let wt = uniform(&mut r, &[o, c, kh, kw], -1.0, 1.0);
        let b = r.random_bool(0.5).then(|| uniform(&mut r, &[o], -1.0, 1.0));
        let got = ops::conv2d(&x, &wt, b.as_ref(), stride, pad).map_err(|e| format!("conv seed {seed}: {e}"))?;
        worst[0] = worst[0].max(max_diff(&got, &conv_oracle(&x, &wt, b.as_ref(), stride, pad)));

        // pool2d
        let (n, c) = (dims(&mut r), dims(&mut r));
        let (h, w) = (dims(&mut r), dims(&mut r));
        let k = r.random_range(1..=h.min(w));
        let spec = match r.random_range(0..3) {
            0 => PoolSpec::max(k, r.random_range(1..=3), r.random_range(0..=k / 2)),
            1 => PoolSpec { mode: PoolMode::Average, kernel: k, stride: r.random_range(1..=3), padding: r.random_range(0..=k / 2) },
            _ => PoolSpec::global_average(),
        };
        let x = uniform(&mut r, &[n, c, h, w], -1.0, 1.0);
        let got = ops::pool2d(&x, spec).map_err(|e| format!("pool seed {seed}: {e}"))?;
        worst[1] = worst[1].max(max_diff(&got, &pool_oracle(&x, spec)));

        // linear
        let (n, f, d) = (dims(&mut r), dims(&mut r), dims(&mut r));
        let x = uniform(&mut r, &[n, f], -1.0, 1.0);
        let wt = uniform(&mut r, &[d, f], -1.0, 1.0);
        let b = uniform(&mut r, &[d], -1.0, 1.0);
        let got = ops::linear(&x, &wt, &b).map_err(|e| format!("linear seed {seed}: {e}"))?;
        worst[2] = worst[2].max(max_diff(&got, &linear_oracle(&x, &wt, &b)));
    }
    if worst.iter().any(|&e| e > TOL) {
        return Err(format!("max deviations conv/pool/linear = {worst:?}"));
    }
    Ok(format!(
        "{instances} instances each; max deviation conv {:.1e}, pool {:.1e}, linear {:.1e}",
        worst[0], worst[1], worst[2]
    ))
}

pub fn check_loss_stability() -> Check {
    let bce = |x: f64, y: f64| ops::bce_with_logits(&Tensor::scalar(x), &Tensor::scalar(y)).unwrap();
    if bce(-100.0, 1.0) != 100.0 {
        return Err(format!("bce(-100, 1) = {}", bce(-100.0, 1.0)));
    }
    if bce(100.0, 0.0) != 100.0 {
        return Err(format!("bce(100, 0) = {}", bce(100.0, 0.0)));
    }
    for &x in &[-1e6, -100.0, 100.0, 1e6] {
        for y in [0.0, 1.0] {
            if !bce(x, y).is_finite() {
                return Err(format!("bce({x}, {y}) is not finite"));
            }
        }
    }
    let mut r = rng(31);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let x = r.random_range(-10.0..=10.0);
        let y = if r.random_bool(0.5) { 1.0 } else { 0.0 };
        worst = worst.max((bce(x, y) - bce_naive(x, y)).abs());
    }
    let logits = uniform(&mut r, &[64, 2], -10.0, 10.0);
    let targets = Tensor::from_fn([64, 2], |_| if r.random_bool(0.5) { 1.0 } else { 0.0 });
    let mean = ops::bce_with_logits(&logits, &targets).unwrap();
    let naive = logits.data().iter().zip(targets.data()).map(|(&x, &y)| bce_naive(x, y)).sum::<f64>() / 128.0;
    worst = worst.max((mean - naive).abs());
    if worst > 1e-10 {
        return Err(format!("deviation from the naive formula {worst:.3e}"));
    }
    Ok(format!("±100 exact, ±1e6 finite, naive deviation {worst:.1e}"))
}

pub fn random_volume(r: &mut ChaCha8Rng) -> Volume {
    let ty = ElementType::ALL[r.random_range(0..ElementType::ALL.len())];
    let ndims = r.random_range(1..=4);
    let dims: Vec<usize> = (0..ndims).map(|_| r.random_range(1..=6)).collect();
    let mut h = MhaHeader::new(dims.clone(), ty);
    h.element_spacing = (0..ndims).map(|_| r.random_range(0.1..3.0)).collect();
    h.offset = (0..ndims).map(|_| r.random_range(-500.0..500.0)).collect();
    h.transform_matrix = (0..ndims * ndims).map(|_| r.random_range(-1.0..1.0)).collect();
    h.byte_order_msb = r.random_bool(0.3);
    for i in 0..r.random_range(0..3) {
        h.raw_fields.push((format!("Custom{i}"), format!("value {}", r.random::<u32>())));
    }
    let n: usize = dims.iter().product();
    let voxels = match ty {
        ElementType::UChar => VoxelData::UChar((0..n).map(|_| r.random()).collect()),
        ElementType::Char => VoxelData::Char((0..n).map(|_| r.random()).collect()),
        ElementType::Short => VoxelData::Short((0..n).map(|_| r.random()).collect()),
        ElementType::UShort => VoxelData::UShort((0..n).map(|_| r.random()).collect()),
        ElementType::Int => VoxelData::Int((0..n).map(|_| r.random()).collect()),
        // Arbitrary bit patterns, NaN payloads included.
        ElementType::Float => VoxelData::Float((0..n).map(|_| f32::from_bits(r.next_u32())).collect()),
        ElementType::Double => VoxelData::Double((0..n).map(|_| f64::from_bits(r.next_u64())).collect()),
    };
    Volume::new(h, voxels).unwrap()
}

fn same_volume(a: &Volume, b: &Volume) -> bool {
    a.header == b.header && a.voxels.element_type() == b.voxels.element_type() && a.voxels.to_bytes(false) == b.voxels.to_bytes(false)
}

pub fn check_mha_roundtrip(volumes: u64) -> Check {
    let mut types = std::collections::HashSet::new();
    for seed in 0..volumes {
        let mut r = rng(9000 + seed);
        let v = random_volume(&mut r);
        types.insert(v.header.element_type);
        for compress in [false, true] {
            let back = read_mha(&write_mha(&v, compress)).map_err(|e| format!("seed {seed}: {e}"))?;
            let mut expected = v.clone();
            expected.header.compressed = compress;
            if !same_volume(&expected, &back) {
                return Err(format!("seed {seed} (compress {compress}) did not round-trip"));
            }
        }
        if write_mha(&v, false) != write_mha(&v, false) {
            return Err(format!("seed {seed}: uncompressed output not reproducible"));
        }
    }
    for ty in ElementType::ALL {
        let mut r = rng(ty as u64);
        let mut v = random_volume(&mut r);
        while v.header.element_type != ty {
            v = random_volume(&mut r);
        }
        for compress in [false, true] {
            let back = read_mha(&write_mha(&v, compress)).map_err(|e| e.to_string())?;
            let mut expected = v.clone();
            expected.header.compressed = compress;
            if !same_volume(&expected, &back) {
                return Err(format!("{} (compress {compress}) did not round-trip", ty.name()));
            }
        }
    }
    Ok(format!("{volumes} random volumes + all {} element types, both encodings", ElementType::ALL.len()))
}

fn mutate(r: &mut ChaCha8Rng, seed: &[u8]) -> Vec<u8> {
    let mut b = seed.to_vec();
    for _ in 0..r.random_range(1..=4) {
        match r.random_range(0..8) {
            0 if !b.is_empty() => {
                let i = r.random_range(0..b.len());
                b[i] = r.random();
            }
            1 if !b.is_empty() => {
                let i = r.random_range(0..b.len());
                b[i] ^= 1 << r.random_range(0..8);
            }
            2 => {
                let i = r.random_range(0..=b.len());
                b.truncate(i);
            }
            3 => {
                let i = r.random_range(0..=b.len());
                let junk: Vec<u8> = (0..r.random_range(1..16)).map(|_| r.random()).collect();
                b.splice(i..i, junk);
            }
            4 if !b.is_empty() => {
                let i = r.random_range(0..b.len());
                let j = r.random_range(i..=b.len().min(i + 16));
                b.drain(i..j);
            }
            5 => {
                let text = String::from_utf8_lossy(&b).into_owned();
                let pick = ["NDims = 99999999999", "DimSize = 4294967295 4294967295 4294967295", "NDims = 0", "DimSize = -1 2", "ElementType = MET_BOGUS", "CompressedData = True", "TransformMatrix = 1", "ElementDataFile = other.raw", "ElementNumberOfChannels = 3", "BinaryDataByteOrderMSB = maybe"];
                let line = pick[r.random_range(0..pick.len())];
                let key = line.split(" = ").next().unwrap();
                if let Some(pos) = text.find(key) {
                    let end = text[pos..].find('\n').map_or(text.len(), |e| pos + e);
                    let mut out = text[..pos].as_bytes().to_vec();
                    out.extend_from_slice(line.as_bytes());
                    out.extend_from_slice(&b[end.min(b.len())..]);
                    b = out;
                }
            }
            6 => {
                let i = r.random_range(0..=b.len());
                b.splice(i..i, b"\n=\r\n".iter().copied());
            }
            _ => {
                if let Some(p) = b.iter().position(|&c| c == b'=') {
                    b.remove(p);
                }
            }
        }
    }
    b
}

pub fn check_mha_fuzz(count: u64) -> Check {
    let mut r = rng(4242);
    let seeds: Vec<Vec<u8>> = (0..8)
        .map(|i| {
            let v = random_volume(&mut r);
            write_mha(&v, i % 2 == 1)
        })
        .collect();
    let mut parsed = 0;
    for i in 0..count {
        let input = mutate(&mut r, &seeds[(i % seeds.len() as u64) as usize]);
        match catch_unwind(AssertUnwindSafe(|| read_mha(&input))) {
            Ok(Ok(_)) => parsed += 1,
            Ok(Err(_)) => {}
            Err(_) => return Err(format!("reader panicked on mutated input #{i}: {:?}", String::from_utf8_lossy(&input))),
        }
    }
    Ok(format!("{count} mutated inputs, no panics ({parsed} still parsed, {} rejected)", count - parsed))
}

/// A 512×512×D synthetic volume through the default pipeline.
pub fn check_ct_preprocess() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let records = synth_generate(2, 3, 512, dir.path()).map_err(|e| e.to_string())?;
    for rec in &records {
        let vol = read_mha(&std::fs::read(&rec.volume_path).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let (x, y, _) = vol.extent3().ok_or("not a volume")?;
        if (x, y) != (512, 512) {
            return Err(format!("synthetic slice extent {x}×{y}"));
        }
        let out = preprocess(&vol, &rec.patient_id, &PreprocessConfig::default()).map_err(|e| e.to_string())?;
        if (out.image.height, out.image.width) != (224, 224) {
            return Err(format!("output {}×{}", out.image.height, out.image.width));
        }
        if !out.image.pixels.iter().all(|p| (0.0..=1.0).contains(p)) {
            return Err("pixel outside [0, 1]".into());
        }
    }
    Ok("512×512×3 → 224×224 in [0, 1]".into())
}

/// REDUCED network trained with train = validation on 32 synthetic studies.
pub fn check_overfit() -> Check {
    use ctdense::data::DatasetSplit;
    use ctdense::train::{evaluate, train, TrainConfig};

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let records = synth_generate(32, 7, 32, dir.path()).map_err(|e| e.to_string())?;
    let split = DatasetSplit {
        train: records.clone(),
        validation: records.clone(),
        seed: 0,
    };
    let config = TrainConfig {
        epochs: 200,
        batch_size: 8,
        seed: 1,
        preprocess: PreprocessConfig {
            target_size: 32,
            ..Default::default()
        },
        ..Default::default()
    };
    let run = |config: &TrainConfig| -> Result<_, String> {
        let mut model = DenseNetModel::<f32>::build(&DenseNetConfig::reduced(), config.seed).map_err(|e| e.to_string())?;
        let mut first = None;
        let log = train(&mut model, &split, config, None, |m, model| {
            if first.is_none() && m.val_accuracy == 1.0 {
                first = Some((m.epoch, model.clone()));
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
        Ok((log, model, first))
    };
    let (log, model, first) = run(&config)?;
    let Some((epoch, at_best)) = first else {
        return Err(format!("joint accuracy never reached 1.0; last epoch {:?}", log.epochs.last()));
    };
    let eval = evaluate(&at_best, &records, &config.preprocess, 0.5, 8, None).map_err(|e| e.to_string())?;
    if eval.accuracy != 1.0 {
        return Err(format!("re-evaluating the epoch-{epoch} model gave {}", eval.accuracy));
    }
    let (again, model2, _) = run(&config)?;
    if again.to_csv() != log.to_csv() || !model.params().iter().zip(model2.params()).all(|(a, b)| a.value.bit_eq(&b.value)) {
        return Err("two runs with the same seed differ".into());
    }
    Ok(format!("accuracy 1.0 first at epoch {epoch} of 200; rerun bit-identical"))
}
