//! Shared test oracles: finite-difference gradient harness, loop-based
//! convolution, brute-force Lloyd iterations and small data builders.
#![allow(dead_code)]

use eeg_dcvit::model::{build_model, ModelConfig};
use eeg_dcvit::tensor::{finite_diff_grad, max_relative_error, BatchNormStats};
use eeg_dcvit::{Conv2dSpec, Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
pub const GRAD_FLOOR: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub type Builder = dyn for<'g> Fn(&mut Graph<'g>, &[Var]) -> Result<Var>;

/// Scalar probe `Σ out ⊙ w` with fixed random weights, so every output
/// element contributes a distinct amount to the gradient.
fn probe<'g>(g: &mut Graph<'g>, out: Var, weights: &[f64]) -> Result<Var> {
    let w = g.constant(g.shape(out).to_vec(), weights.to_vec())?;
    let m = g.mul(out, w)?;
    g.sum(m)
}

fn evaluate(inputs: &[Tensor], build: &Builder, weights: Option<&[f64]>) -> Result<(f64, Vec<Vec<f64>>, usize)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone().with_grad())).collect();
    let out = build(&mut g, &vars)?;
    let n_out = g.value(out).len();
    let loss = match weights {
        Some(w) => probe(&mut g, out, w)?,
        None => out,
    };
    let value = g.scalar_value(loss)?;
    let grads = g.backward(loss)?;
    let per_input = vars
        .iter()
        .map(|&v| grads.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(v).len()]))
        .collect();
    Ok((value, per_input, n_out))
}

/// Largest relative disagreement between the reverse-mode gradient and a
/// central finite difference, over every element of every input.
pub fn grad_error(inputs: &[Tensor], build: &Builder, seed: u64) -> Result<f64> {
    let n_out = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        g.value(out).len()
    };
    let mut r = rng(seed ^ 0x5eed);
    let weights: Option<Vec<f64>> = (n_out > 1).then(|| (0..n_out).map(|_| r.gen_range(-1.0..1.0)).collect());
    let (_, analytic, _) = evaluate(inputs, build, weights.as_deref())?;
    let mut worst: f64 = 0.0;
    for i in 0..inputs.len() {
        let numeric = finite_diff_grad(
            |t| {
                let mut probe_inputs = inputs.to_vec();
                probe_inputs[i] = t.clone();
                Ok(evaluate(&probe_inputs, build, weights.as_deref())?.0)
            },
            &inputs[i],
            FD_STEP,
        )?;
        worst = worst.max(max_relative_error(&analytic[i], numeric.data(), GRAD_FLOOR));
    }
    Ok(worst)
}

pub struct OpCase {
    pub op: &'static str,
    pub inputs: Vec<Tensor>,
    pub build: Box<Builder>,
}

fn case(op: &'static str, inputs: Vec<Tensor>, build: impl for<'g> Fn(&mut Graph<'g>, &[Var]) -> Result<Var> + 'static) -> OpCase {
    OpCase {
        op,
        inputs,
        build: Box::new(build),
    }
}

/// Five randomly shaped cases for every differentiable graph operation.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut r = rng(seed);
    let mut cases = Vec::new();
    for _ in 0..5 {
        let dim = |r: &mut ChaCha8Rng| r.gen_range(1..5usize);
        let shape: Vec<usize> = (0..r.gen_range(1..4)).map(|_| dim(&mut r)).collect();
        let a = random_tensor(&mut r, &shape);
        let b = random_tensor(&mut r, &shape);
        cases.push(case("add", vec![a.clone(), b.clone()], |g, v| g.add(v[0], v[1])));
        cases.push(case("sub", vec![a.clone(), b.clone()], |g, v| g.sub(v[0], v[1])));
        cases.push(case("mul", vec![a.clone(), b.clone()], |g, v| g.mul(v[0], v[1])));
        let c = r.gen_range(-3.0..3.0);
        cases.push(case("scale", vec![a.clone()], move |g, v| g.scale(v[0], c)));
        let tail = random_tensor(&mut r, &shape[shape.len() - 1..]);
        cases.push(case("add_tiled", vec![a.clone(), tail], |g, v| g.add_tiled(v[0], v[1])));
        cases.push(case("sum", vec![a.clone()], |g, v| g.sum(v[0])));
        cases.push(case("mean", vec![a.clone()], |g, v| g.mean(v[0])));
        let n = a.len();
        cases.push(case("reshape", vec![a.clone()], move |g, v| g.reshape(v[0], vec![n])));
        cases.push(case("gelu", vec![a.scale_by(3.0)], |g, v| g.gelu(v[0])));
        let dseed = r.gen();
        cases.push(case("dropout", vec![a.clone()], move |g, v| g.dropout(v[0], 0.3, true, dseed)));

        let s3: Vec<usize> = (0..3).map(|_| dim(&mut r)).collect();
        let x3 = random_tensor(&mut r, &s3);
        let mut perm = vec![0, 1, 2];
        perm.rotate_left(r.gen_range(0..3));
        perm.swap(0, r.gen_range(0..3));
        cases.push(case("permute", vec![x3.clone()], move |g, v| g.permute(v[0], &perm)));
        let axis = r.gen_range(0..3);
        cases.push(case("softmax", vec![x3.scale_by(2.0)], move |g, v| g.softmax(v[0], axis)));
        let d = s3[2] + 1;
        let xl = random_tensor(&mut r, &[s3[0], s3[1], d]);
        let gain = random_tensor(&mut r, &[d]);
        let off = random_tensor(&mut r, &[d]);
        cases.push(case("layer_norm", vec![xl.clone(), gain, off], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-6)));
        let tok = random_tensor(&mut r, &[d]);
        cases.push(case("prepend_token", vec![xl.clone(), tok], |g, v| g.prepend_token(v[0], v[1])));
        let idx = r.gen_range(0..s3[1]);
        cases.push(case("select_token", vec![xl.clone()], move |g, v| g.select_token(v[0], idx)));
        let sc: Vec<f64> = (0..d).map(|_| r.gen_range(-2.0..2.0)).collect();
        let sh: Vec<f64> = (0..d).map(|_| r.gen_range(-2.0..2.0)).collect();
        cases.push(case("affine_last_dim", vec![xl.clone()], move |g, v| g.affine_last_dim(v[0], &sc, &sh)));

        let (rows, din, dout) = (dim(&mut r), dim(&mut r), dim(&mut r));
        let x = random_tensor(&mut r, &[rows, din]);
        let w = random_tensor(&mut r, &[dout, din]);
        let bias = random_tensor(&mut r, &[dout]);
        cases.push(case("linear", vec![x.clone(), w, bias], |g, v| g.linear(v[0], v[1], Some(v[2]))));
        let (bt, m, k, n) = (dim(&mut r), dim(&mut r), dim(&mut r), dim(&mut r));
        let ma = random_tensor(&mut r, &[bt, m, k]);
        let mb = random_tensor(&mut r, &[bt, k, n]);
        cases.push(case("matmul", vec![ma, mb], |g, v| g.matmul(v[0], v[1])));

        let target: Vec<f64> = (0..x.len()).map(|_| r.gen_range(-1.0..1.0)).collect();
        cases.push(case("mse_loss", vec![x.clone()], move |g, v| g.mse_loss(v[0], &target)));
        let classes = din + 1;
        let logits = random_tensor(&mut r, &[rows, classes]);
        let labels: Vec<usize> = (0..rows).map(|_| r.gen_range(0..classes)).collect();
        cases.push(case("cross_entropy", vec![logits], move |g, v| g.cross_entropy(v[0], &labels)));

        let groups = r.gen_range(1..3);
        let in_c = groups * r.gen_range(1..3);
        let out_c = groups * r.gen_range(1..3);
        let kernel = (r.gen_range(1..4), r.gen_range(1..4));
        let stride = (r.gen_range(1..3), r.gen_range(1..3));
        let padding = (r.gen_range(0..2), r.gen_range(0..2));
        let spec = Conv2dSpec::new(in_c, out_c, kernel, stride, padding, groups).unwrap();
        let (h, w_) = (kernel.0 + r.gen_range(0..4), kernel.1 + r.gen_range(0..4));
        let nb = r.gen_range(1..3);
        let cx = random_tensor(&mut r, &[nb, in_c, h, w_]);
        let cw = random_tensor(&mut r, &spec.weight_shape());
        let cb = random_tensor(&mut r, &[out_c]);
        cases.push(case("conv2d", vec![cx, cw, cb], move |g, v| g.conv2d(v[0], v[1], Some(v[2]), &spec)));

        let bn_shape = [r.gen_range(2..4), dim(&mut r), dim(&mut r), dim(&mut r)];
        let bx = random_tensor(&mut r, &bn_shape);
        let gamma = random_tensor(&mut r, &[bn_shape[1]]);
        let beta = random_tensor(&mut r, &[bn_shape[1]]);
        cases.push(case("batch_norm", vec![bx.clone(), gamma.clone(), beta.clone()], |g, v| {
            Ok(g.batch_norm(v[0], v[1], v[2], 1e-5, BatchNormStats::Batch)?.0)
        }));
        let mean: Vec<f64> = (0..bn_shape[1]).map(|_| r.gen_range(-1.0..1.0)).collect();
        let var: Vec<f64> = (0..bn_shape[1]).map(|_| r.gen_range(0.5..2.0)).collect();
        cases.push(case("batch_norm_eval", vec![bx, gamma, beta], move |g, v| {
            Ok(g.batch_norm(v[0], v[1], v[2], 1e-5, BatchNormStats::Fixed { mean: &mean, var: &var })?.0)
        }));
    }
    cases
}

trait ScaleBy {
    fn scale_by(&self, c: f64) -> Tensor;
}

impl ScaleBy for Tensor {
    fn scale_by(&self, c: f64) -> Tensor {
        Tensor::new(self.shape().to_vec(), self.data().iter().map(|v| v * c).collect()).unwrap()
    }
}

/// Worst relative error per operation name across [`op_cases`].
pub fn op_suite(seed: u64) -> Vec<(&'static str, f64)> {
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    for (i, c) in op_cases(seed).into_iter().enumerate() {
        let e = grad_error(&c.inputs, &*c.build, seed + i as u64).unwrap_or_else(|err| panic!("{}: {err}", c.op));
        match worst.iter_mut().find(|(op, _)| *op == c.op) {
            Some(slot) => slot.1 = slot.1.max(e),
            None => worst.push((c.op, e)),
        }
    }
    worst
}

/// End-to-end check on the tiny model in training mode: MSE loss against
/// random targets, gradients of `samples` random entries of every
/// parameter compared with central differences.
pub fn tiny_model_grad_error(seed: u64, samples: usize) -> Result<f64> {
    let cfg = ModelConfig::tiny();
    let mut model = build_model(&cfg, seed)?;
    let mut r = rng(seed);
    let batch = 3;
    let x = random_tensor(&mut r, &[batch, 1, cfg.channels, cfg.timesteps]);
    let targets: Vec<f64> = (0..batch * 2).map(|_| r.gen_range(100.0..700.0)).collect();
    let loss_of = |m: &eeg_dcvit::model::Model| -> Result<(f64, Vec<(String, Vec<f64>)>)> {
        let mut g = Graph::new();
        let xv = g.input(&x);
        let pass = m.forward(&mut g, xv, true, seed)?;
        let out = g.scale(pass.output, 1.0 / 400.0)?;
        let scaled: Vec<f64> = targets.iter().map(|t| t / 400.0).collect();
        let loss = g.mse_loss(out, &scaled)?;
        let value = g.scalar_value(loss)?;
        let grads = g.backward(loss)?;
        let per = pass
            .params
            .iter()
            .map(|(n, v)| (n.clone(), grads.get(*v).map(<[f64]>::to_vec).unwrap_or_default()))
            .collect();
        Ok((value, per))
    };
    let (_, analytic) = loss_of(&model)?;
    let mut worst: f64 = 0.0;
    for (name, grad) in analytic {
        let len = model.params()[&name].len();
        let picks: Vec<usize> = if len <= samples {
            (0..len).collect()
        } else {
            (0..samples).map(|_| r.gen_range(0..len)).collect()
        };
        for i in picks {
            let orig = model.params()[&name].data()[i];
            model.params_mut()[&name].data_mut()[i] = orig + FD_STEP;
            let plus = loss_of(&model)?.0;
            model.params_mut()[&name].data_mut()[i] = orig - FD_STEP;
            let minus = loss_of(&model)?.0;
            model.params_mut()[&name].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(max_relative_error(&[grad[i]], &[numeric], GRAD_FLOOR));
        }
    }
    Ok(worst)
}

/// Direct seven-loop convolution used as an oracle.
pub fn conv_loops(x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: &Conv2dSpec) -> Tensor {
    let xs = x.shape();
    let (n, h, wd) = (xs[0], xs[2], xs[3]);
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let oh = (h + 2 * ph - kh) / sh + 1;
    let ow = (wd + 2 * pw - kw) / sw + 1;
    let cin_g = spec.in_channels / spec.groups;
    let cout_g = spec.out_channels / spec.groups;
    let mut out = vec![0.0; n * spec.out_channels * oh * ow];
    for bi in 0..n {
        for oc in 0..spec.out_channels {
            let grp = oc / cout_g;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[oc]);
                    for ic in 0..cin_g {
                        let c = grp * cin_g + ic;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * sh + ky) as isize - ph as isize;
                                let ix = (ox * sw + kx) as isize - pw as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((bi * spec.in_channels + c) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((oc * cin_g + ic) * kh + ky) * kw + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((bi * spec.out_channels + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, spec.out_channels, oh, ow], out).unwrap()
}

/// Textbook Lloyd iterations with the same conventions as the library:
/// lowest-index tie-break, empty clusters re-seeded at the farthest unused
/// point, stop when no centre moves more than `tol`.
pub fn brute_lloyd(points: &[[f64; 2]], init: &[[f64; 2]], max_iter: usize, tol: f64) -> (Vec<[f64; 2]>, Vec<usize>, Vec<f64>) {
    let d2 = |a: [f64; 2], b: [f64; 2]| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
    let assign = |c: &[[f64; 2]]| -> (Vec<usize>, Vec<f64>) {
        points
            .iter()
            .map(|&p| {
                let mut best = 0;
                for j in 1..c.len() {
                    if d2(p, c[j]) < d2(p, c[best]) {
                        best = j;
                    }
                }
                (best, d2(p, c[best]))
            })
            .unzip()
    };
    let mut c = init.to_vec();
    let mut trace = Vec::new();
    for _ in 0..max_iter {
        let (lab, dist) = assign(&c);
        trace.push(dist.iter().sum());
        let mut used = vec![false; points.len()];
        let mut shift: f64 = 0.0;
        for j in 0..c.len() {
            let members: Vec<[f64; 2]> = points.iter().zip(&lab).filter(|(_, &l)| l == j).map(|(p, _)| *p).collect();
            let next = if members.is_empty() {
                let mut far = usize::MAX;
                for i in 0..points.len() {
                    if !used[i] && (far == usize::MAX || dist[i] > dist[far]) {
                        far = i;
                    }
                }
                used[far] = true;
                points[far]
            } else {
                let m = members.len() as f64;
                [members.iter().map(|p| p[0]).sum::<f64>() / m, members.iter().map(|p| p[1]).sum::<f64>() / m]
            };
            shift = shift.max(d2(next, c[j]).sqrt());
            c[j] = next;
        }
        if shift <= tol {
            break;
        }
    }
    let (lab, dist) = assign(&c);
    trace.push(dist.iter().sum());
    (c, lab, trace)
}

/// Tiny regression model without dropout trained on 8 synthetic samples
/// (one batch per step) for `steps` steps; returns the evaluation-mode RMSE
/// on those samples in pixels.
pub fn overfit_rmse_px(seed: u64, steps: usize) -> Result<f64> {
    use eeg_dcvit::preprocess::{generate_synthetic, SynthConfig};
    use eeg_dcvit::train::{evaluate_rmse, train_loop_with, TrainConfig};
    let cfg = ModelConfig {
        dropout_p: 0.0,
        ..ModelConfig::tiny()
    };
    let synth = generate_synthetic(&SynthConfig {
        n_samples: 8,
        channels: cfg.channels,
        timesteps: cfg.timesteps,
        seed,
        ..SynthConfig::default()
    })?;
    let data = synth.dataset;
    let tc = TrainConfig {
        epochs: steps,
        batch_size: 8,
        learning_rate: 3e-3,
        seed,
        ..TrainConfig::default()
    };
    let run = train_loop_with(build_model(&cfg, seed)?, &data, &tc, |m, _| Ok(evaluate_rmse(m, &data, 2.0)?.rmse_px))?;
    Ok(evaluate_rmse(&run.best_model, &data, 2.0)?.rmse_px)
}

/// Test RMSE (mm, against the true targets) of a small model trained on
/// 2,000 synthetic samples with 40 px jitter: first with the jittered
/// labels, then with labels replaced by their k-means centres.
pub fn clustered_vs_raw(seed: u64) -> Result<(f64, f64)> {
    use eeg_dcvit::preprocess::{fit_label_clusters, generate_synthetic, relabel, split_dataset, SynthConfig};
    use eeg_dcvit::train::{train_loop, Splits, TrainConfig};
    let mcfg = ModelConfig {
        channels: 16,
        timesteps: 76,
        ..ModelConfig::tiny()
    };
    let scfg = SynthConfig {
        n_samples: 2000,
        channels: mcfg.channels,
        timesteps: mcfg.timesteps,
        jitter_radius_px: 40.0,
        noise_std: 2.0,
        seed: 100 + seed,
        ..SynthConfig::default()
    };
    let synth = generate_synthetic(&scfg)?;
    let fractions = [0.7, 0.15, 0.15];
    let [train, val, _] = split_dataset(&synth.dataset, fractions, seed)?;
    let [_, _, test] = split_dataset(&synth.with_true_labels(), fractions, seed)?;
    let centres = fit_label_clusters(&train, 25, Some(&scfg.grid_targets()), seed)?;
    let (ctrain, cval) = (relabel(&train, &centres), relabel(&val, &centres));
    let tc = TrainConfig {
        epochs: 15,
        batch_size: 8,
        learning_rate: 1e-3,
        seed,
        ..TrainConfig::default()
    };
    let raw = train_loop(build_model(&mcfg, seed)?, &Splits { train: &train, val: &val, test: &test }, &tc)?;
    let clustered = train_loop(build_model(&mcfg, seed)?, &Splits { train: &ctrain, val: &cval, test: &test }, &tc)?;
    Ok((raw.test.unwrap().rmse_mm, clustered.test.unwrap().rmse_mm))
}
