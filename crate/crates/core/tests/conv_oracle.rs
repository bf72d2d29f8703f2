mod common;

use common::{conv_loops, random_tensor, rng};
use eeg_dcvit::model::{build_model, ModelConfig};
use eeg_dcvit::{Conv2dSpec, Graph, Tensor};
use rand::Rng;

fn conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: &Conv2dSpec) -> Tensor {
    let mut g = Graph::new();
    let xv = g.input(x);
    let wv = g.input(w);
    let bv = b.map(|b| g.input(b));
    let out = g.conv2d(xv, wv, bv, spec).unwrap();
    g.to_tensor(out)
}

fn assert_close(a: &Tensor, b: &Tensor) {
    assert_eq!(a.shape(), b.shape());
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()), "{x} vs {y}");
    }
}

#[test]
fn matches_loop_oracle_on_random_specs() {
    let mut r = rng(21);
    for _ in 0..40 {
        let groups = r.gen_range(1..4);
        let in_c = groups * r.gen_range(1..3);
        let out_c = groups * r.gen_range(1..3);
        let kernel = (r.gen_range(1..5), r.gen_range(1..5));
        let stride = (r.gen_range(1..4), r.gen_range(1..4));
        let padding = (r.gen_range(0..3), r.gen_range(0..3));
        let spec = Conv2dSpec::new(in_c, out_c, kernel, stride, padding, groups).unwrap();
        let h = kernel.0 + r.gen_range(0..6);
        let w = kernel.1 + r.gen_range(0..6);
        let nb = r.gen_range(1..3);
        let x = random_tensor(&mut r, &[nb, in_c, h, w]);
        let wt = random_tensor(&mut r, &spec.weight_shape());
        let b = random_tensor(&mut r, &[out_c]);
        assert_close(&conv(&x, &wt, Some(&b), &spec), &conv_loops(&x, &wt, Some(&b), &spec));
        assert_eq!(spec.output_size(h, w).unwrap(), {
            let o = conv_loops(&x, &wt, None, &spec);
            (o.shape()[2], o.shape()[3])
        });
    }
}

#[test]
fn depthwise_equals_per_channel_convolutions() {
    let mut r = rng(4);
    let (c, h, w) = (5, 7, 9);
    let spec = Conv2dSpec::new(c, c, (3, 3), (1, 1), (1, 1), c).unwrap();
    let x = random_tensor(&mut r, &[2, c, h, w]);
    let wt = random_tensor(&mut r, &spec.weight_shape());
    let full = conv(&x, &wt, None, &spec);
    let single = Conv2dSpec::new(1, 1, (3, 3), (1, 1), (1, 1), 1).unwrap();
    for ch in 0..c {
        let mut xs = Vec::new();
        for b in 0..2 {
            xs.extend_from_slice(&x.data()[(b * c + ch) * h * w..(b * c + ch + 1) * h * w]);
        }
        let xc = Tensor::new(vec![2, 1, h, w], xs).unwrap();
        let wc = Tensor::new(vec![1, 1, 3, 3], wt.data()[ch * 9..(ch + 1) * 9].to_vec()).unwrap();
        let oc = conv(&xc, &wc, None, &single);
        for b in 0..2 {
            let got = &full.data()[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
            let want = &oc.data()[b * h * w..(b + 1) * h * w];
            for (g, e) in got.iter().zip(want) {
                assert!((g - e).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn default_stage_shapes() {
    let cfg = ModelConfig::default();
    assert_eq!(cfg.temporal_spec().unwrap().output_size(129, 500).unwrap(), (129, 14));
    assert_eq!(cfg.token_grid().unwrap(), (16, 14));
    assert_eq!(cfg.num_tokens().unwrap(), 224);
}

#[test]
fn tiny_model_stage_shapes_match_oracle() {
    let cfg = ModelConfig::tiny();
    let model = build_model(&cfg, 1).unwrap();
    let x = random_tensor(&mut rng(2), &[2, 1, cfg.channels, cfg.timesteps]);
    let mut g = Graph::new();
    let xv = g.input(&x);
    let pass = model.forward(&mut g, xv, false, 0).unwrap();
    let temporal = pass.stage("temporal").unwrap();
    let oracle = conv_loops(
        &x,
        model.param("temporal.weight").unwrap(),
        model.param("temporal.bias"),
        &cfg.temporal_spec().unwrap(),
    );
    assert_close(&g.to_tensor(temporal), &oracle);
    let (th, tw) = cfg.token_grid().unwrap();
    assert_eq!(g.shape(pass.stage("tokens").unwrap()), [2, th * tw, cfg.token_dim]);
    assert_eq!(g.shape(pass.output), [2, 2]);
}
