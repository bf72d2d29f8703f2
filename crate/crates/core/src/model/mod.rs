//! The EEG-DCViT network: convolutional patch embedding (temporal conv,
//! depthwise-separable block, electrode-wise depthwise conv), learned
//! positional embeddings, a pre-norm transformer encoder and an MLP head
//! read from the class token.

mod config;

pub use config::{ds_block_toggle, HeadMode, ModelConfig};

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{BatchNormStats, Conv2dSpec, Gradients, Graph, ObservedStats, Tensor, Var};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
const INIT_STD: f64 = 0.02;

/// Named trainable parameters plus non-trainable buffers (batch-norm
/// running statistics).
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: IndexMap<String, Tensor>,
    buffers: IndexMap<String, Tensor>,
}

/// Result of one forward pass recorded on a graph.
pub struct ForwardPass {
    pub output: Var,
    /// Graph leaf for every parameter, in model order.
    pub params: Vec<(String, Var)>,
    /// Named intermediate activations of the patch embedding.
    pub stages: Vec<(&'static str, Var)>,
    batch_stats: Vec<(String, ObservedStats)>,
}

impl ForwardPass {
    pub fn stage(&self, name: &str) -> Option<Var> {
        self.stages.iter().find(|(n, _)| *n == name).map(|(_, v)| *v)
    }
}

/// One entry of a model's parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Buffers are stored and checkpointed but not trained.
    pub buffer: bool,
    fill: Fill,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Fill {
    Const(f64),
    TruncNormal(f64),
    Uniform(f64),
}

#[derive(Default)]
struct Layout(Vec<ParamSpec>);

impl Layout {
    fn add(&mut self, name: String, shape: &[usize], fill: Fill) {
        self.0.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            buffer: false,
            fill,
        });
    }

    fn buffer(&mut self, name: String, shape: &[usize], value: f64) {
        self.0.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            buffer: true,
            fill: Fill::Const(value),
        });
    }

    fn conv(&mut self, prefix: &str, spec: &Conv2dSpec) {
        let shape = spec.weight_shape();
        let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
        let bound = 1.0 / fan_in.sqrt();
        self.add(format!("{prefix}.weight"), &shape, Fill::Uniform(bound));
        self.add(format!("{prefix}.bias"), &[spec.out_channels], Fill::Uniform(bound));
    }

    fn linear(&mut self, prefix: &str, din: usize, dout: usize) {
        self.add(format!("{prefix}.weight"), &[dout, din], Fill::TruncNormal(INIT_STD));
        self.add(format!("{prefix}.bias"), &[dout], Fill::Const(0.0));
    }

    fn batch_norm(&mut self, prefix: &str, c: usize) {
        self.add(format!("{prefix}.gamma"), &[c], Fill::Const(1.0));
        self.add(format!("{prefix}.beta"), &[c], Fill::Const(0.0));
        self.buffer(format!("{prefix}.running_mean"), &[c], 0.0);
        self.buffer(format!("{prefix}.running_var"), &[c], 1.0);
    }

    fn layer_norm(&mut self, prefix: &str, d: usize) {
        self.add(format!("{prefix}.gain"), &[d], Fill::Const(1.0));
        self.add(format!("{prefix}.offset"), &[d], Fill::Const(0.0));
    }
}

/// Mixes a forward seed with a per-call counter into an independent
/// dropout stream.
fn dropout_seed(seed: u64, counter: u64) -> u64 {
    let mut z = seed ^ counter.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Names and shapes of every parameter and buffer, in forward order.
pub fn parameter_layout(config: &ModelConfig) -> Result<Vec<ParamSpec>> {
    config.validate()?;
    let mut l = Layout::default();
    l.conv("temporal", &config.temporal_spec()?);
    l.batch_norm("temporal.bn", config.temporal_filters);
    if config.ds_block {
        l.conv("ds.depthwise", &config.ds_depthwise_spec()?);
        l.conv("ds.pointwise", &config.ds_pointwise_spec()?);
        l.batch_norm("ds.bn", config.ds_pointwise_out);
    }
    l.conv("patch", &config.channel_spec()?);
    l.linear("embed", config.token_dim, config.hidden_dim);
    let d = config.hidden_dim;
    l.add("cls_token".into(), &[d], Fill::TruncNormal(INIT_STD));
    let seq = config.num_tokens()? + 1;
    l.add("pos_embed".into(), &[seq, d], Fill::TruncNormal(INIT_STD));
    for i in 0..config.encoder_depth {
        let p = format!("blocks.{i}");
        l.layer_norm(&format!("{p}.ln1"), d);
        for proj in ["q", "k", "v", "out"] {
            l.linear(&format!("{p}.attn.{proj}"), d, d);
        }
        l.layer_norm(&format!("{p}.ln2"), d);
        l.linear(&format!("{p}.mlp.fc1"), d, config.mlp_dim);
        l.linear(&format!("{p}.mlp.fc2"), config.mlp_dim, d);
    }
    l.layer_norm("norm", d);
    l.linear("head.fc1", d, d);
    l.linear("head.fc2", d, config.head.outputs());
    Ok(l.0)
}

/// Deterministically initializes a model for `config`: truncated normal
/// (std 0.02) for projections and embeddings, fan-in scaled uniform for
/// convolutions. Every value is rounded to `f32`.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = IndexMap::new();
    let mut buffers = IndexMap::new();
    for spec in parameter_layout(config)? {
        let n: usize = spec.shape.iter().product();
        let data: Vec<f64> = match spec.fill {
            Fill::Const(v) => vec![v; n],
            Fill::TruncNormal(std) => {
                let normal = Normal::new(0.0, std).expect("positive std");
                (0..n)
                    .map(|_| loop {
                        let v: f64 = normal.sample(&mut rng);
                        if v.abs() <= 2.0 * std {
                            break v;
                        }
                    })
                    .collect()
            }
            Fill::Uniform(bound) => (0..n).map(|_| rng.gen_range(-bound..bound)).collect(),
        };
        let mut t = Tensor::new(spec.shape, data)?;
        t.round_to_f32();
        let target = if spec.buffer {
            &mut buffers
        } else {
            t.set_requires_grad(true);
            &mut params
        };
        if target.insert(spec.name.clone(), t).is_some() {
            return Err(Error::InvalidConfig(format!("duplicate parameter {}", spec.name)));
        }
    }
    Ok(Model {
        config: config.clone(),
        params,
        buffers,
    })
}

/// Total number of trainable scalars.
pub fn count_parameters(model: &Model) -> usize {
    model.params.values().map(Tensor::len).sum()
}

impl Model {
    /// Assembles a model from stored tensors, checking names and shapes
    /// against the layout `config` implies.
    pub fn from_parts(
        config: ModelConfig,
        mut params: IndexMap<String, Tensor>,
        buffers: IndexMap<String, Tensor>,
    ) -> Result<Self> {
        use crate::error::DataError;
        let conflict = |name: &str, detail: String| -> Error {
            DataError::ShapeConflict {
                name: name.to_string(),
                detail,
            }
            .into()
        };
        let layout = parameter_layout(&config)?;
        for spec in &layout {
            let store = if spec.buffer { &buffers } else { &params };
            match store.get(&spec.name) {
                None => return Err(conflict(&spec.name, "missing".into())),
                Some(t) if t.shape() != spec.shape => {
                    return Err(conflict(
                        &spec.name,
                        format!("stored {:?}, expected {:?}", t.shape(), spec.shape),
                    ))
                }
                Some(_) => {}
            }
        }
        if params.len() + buffers.len() != layout.len() {
            let extra = params
                .keys()
                .chain(buffers.keys())
                .find(|k| !layout.iter().any(|s| &s.name == *k))
                .cloned()
                .unwrap_or_default();
            return Err(conflict(&extra, "not part of the expected model".into()));
        }
        for t in params.values_mut() {
            t.set_requires_grad(true);
        }
        Ok(Self {
            config,
            params,
            buffers,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &IndexMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut IndexMap<String, Tensor> {
        &mut self.params
    }

    pub fn buffers(&self) -> &IndexMap<String, Tensor> {
        &self.buffers
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn zero_grad(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }

    /// Adds the gradients of a finished backward pass into every parameter's
    /// gradient buffer and folds observed batch statistics into the running
    /// estimates.
    pub fn absorb(&mut self, pass: ForwardPass, grads: &Gradients) -> Result<()> {
        for (name, var) in &pass.params {
            if let Some(g) = grads.get(*var) {
                self.params[name.as_str()].accumulate_grad(g)?;
            }
        }
        self.update_running_stats(pass.batch_stats);
        Ok(())
    }

    fn update_running_stats(&mut self, stats: Vec<(String, ObservedStats)>) {
        for (prefix, obs) in stats {
            let mean = &mut self.buffers[format!("{prefix}.running_mean").as_str()];
            for (m, o) in mean.data_mut().iter_mut().zip(&obs.mean) {
                *m = (1.0 - BN_MOMENTUM) * *m + BN_MOMENTUM * o;
            }
            mean.round_to_f32();
            let var = &mut self.buffers[format!("{prefix}.running_var").as_str()];
            for (v, o) in var.data_mut().iter_mut().zip(&obs.var) {
                *v = (1.0 - BN_MOMENTUM) * *v + BN_MOMENTUM * o;
            }
            var.round_to_f32();
        }
    }

    /// Records the network on `g`. `batch` must be shaped `[B, 1, C, T]`.
    ///
    /// In training mode batch norm uses batch statistics and dropout draws
    /// its masks from `seed`; evaluation mode is a pure function of the
    /// weights and input.
    pub fn forward<'a>(&'a self, g: &mut Graph<'a>, batch: Var, training: bool, seed: u64) -> Result<ForwardPass> {
        let cfg = &self.config;
        let shape = g.shape(batch).to_vec();
        if shape.len() != 4 || shape[1] != 1 || shape[2] != cfg.channels || shape[3] != cfg.timesteps {
            return Err(Error::shape(
                "forward",
                format!(
                    "batch {shape:?}, expected [B, 1, {}, {}]",
                    cfg.channels, cfg.timesteps
                ),
            ));
        }
        let b = shape[0];
        let mut cx = Ctx {
            model: self,
            params: Vec::with_capacity(self.params.len()),
            stages: Vec::new(),
            batch_stats: Vec::new(),
            training,
            seed,
            dropouts: 0,
        };

        g.set_scope("temporal");
        let mut x = cx.conv(g, batch, "temporal", &cfg.temporal_spec()?)?;
        cx.stages.push(("temporal", x));
        x = cx.batch_norm(g, x, "temporal.bn")?;
        x = g.gelu(x)?;
        if cfg.ds_block {
            g.set_scope("ds.depthwise");
            x = cx.conv(g, x, "ds.depthwise", &cfg.ds_depthwise_spec()?)?;
            g.set_scope("ds.pointwise");
            x = cx.conv(g, x, "ds.pointwise", &cfg.ds_pointwise_spec()?)?;
            g.set_scope("ds.bn");
            x = cx.batch_norm(g, x, "ds.bn")?;
            x = g.gelu(x)?;
            cx.stages.push(("ds", x));
        }
        g.set_scope("patch");
        x = cx.conv(g, x, "patch", &cfg.channel_spec()?)?;
        cx.stages.push(("patch", x));
        let (gh, gw) = (g.shape(x)[2], g.shape(x)[3]);
        let tokens = gh * gw;
        x = g.permute(x, &[0, 2, 3, 1])?;
        x = g.reshape(x, vec![b, tokens, cfg.token_dim])?;
        cx.stages.push(("tokens", x));

        g.set_scope("embed");
        x = cx.linear(g, x, "embed")?;
        let cls = cx.param(g, "cls_token");
        x = g.prepend_token(x, cls)?;
        let pos = cx.param(g, "pos_embed");
        x = g.add_tiled(x, pos)?;
        x = cx.dropout(g, x)?;

        let d = cfg.hidden_dim;
        let heads = cfg.heads;
        let dh = d / heads;
        let n = tokens + 1;
        for i in 0..cfg.encoder_depth {
            let p = format!("blocks.{i}");
            g.set_scope(format!("{p}.attn"));
            let h = cx.layer_norm(g, x, &format!("{p}.ln1"))?;
            let split = |g: &mut Graph<'a>, v: Var| -> Result<Var> {
                let v = g.reshape(v, vec![b, n, heads, dh])?;
                g.permute(v, &[0, 2, 1, 3])
            };
            let q = cx.linear(g, h, &format!("{p}.attn.q"))?;
            let q = split(g, q)?;
            let k = cx.linear(g, h, &format!("{p}.attn.k"))?;
            let k = g.reshape(k, vec![b, n, heads, dh])?;
            let kt = g.permute(k, &[0, 2, 3, 1])?;
            let v = cx.linear(g, h, &format!("{p}.attn.v"))?;
            let v = split(g, v)?;
            let scores = g.matmul(q, kt)?;
            let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
            let attn = g.softmax(scores, 3)?;
            let ctx = g.matmul(attn, v)?;
            let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
            let ctx = g.reshape(ctx, vec![b, n, d])?;
            let out = cx.linear(g, ctx, &format!("{p}.attn.out"))?;
            let out = cx.dropout(g, out)?;
            x = g.add(x, out)?;

            g.set_scope(format!("{p}.mlp"));
            let h = cx.layer_norm(g, x, &format!("{p}.ln2"))?;
            let h = cx.linear(g, h, &format!("{p}.mlp.fc1"))?;
            let h = g.gelu(h)?;
            let h = cx.dropout(g, h)?;
            let h = cx.linear(g, h, &format!("{p}.mlp.fc2"))?;
            let h = cx.dropout(g, h)?;
            x = g.add(x, h)?;
        }

        g.set_scope("head");
        x = cx.layer_norm(g, x, "norm")?;
        x = g.select_token(x, 0)?;
        x = cx.linear(g, x, "head.fc1")?;
        x = cx.dropout(g, x)?;
        x = cx.linear(g, x, "head.fc2")?;
        if cfg.head == HeadMode::Regression {
            x = g.affine_last_dim(x, &cfg.output_scale, &cfg.output_offset)?;
        }
        Ok(ForwardPass {
            output: x,
            params: cx.params,
            stages: cx.stages,
            batch_stats: cx.batch_stats,
        })
    }

    /// Evaluation-mode forward of a `[B, 1, C, T]` batch.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(batch);
        let pass = self.forward(&mut g, x, false, 0)?;
        Ok(g.to_tensor(pass.output))
    }
}

struct Ctx<'m> {
    model: &'m Model,
    params: Vec<(String, Var)>,
    stages: Vec<(&'static str, Var)>,
    batch_stats: Vec<(String, ObservedStats)>,
    training: bool,
    seed: u64,
    dropouts: u64,
}

impl<'m> Ctx<'m> {
    fn param(&mut self, g: &mut Graph<'m>, name: &str) -> Var {
        let t = &self.model.params[name];
        let v = g.input(t);
        self.params.push((name.to_string(), v));
        v
    }

    fn conv(&mut self, g: &mut Graph<'m>, x: Var, prefix: &str, spec: &Conv2dSpec) -> Result<Var> {
        let w = self.param(g, &format!("{prefix}.weight"));
        let b = self.param(g, &format!("{prefix}.bias"));
        g.conv2d(x, w, Some(b), spec)
    }

    fn linear(&mut self, g: &mut Graph<'m>, x: Var, prefix: &str) -> Result<Var> {
        let w = self.param(g, &format!("{prefix}.weight"));
        let b = self.param(g, &format!("{prefix}.bias"));
        g.linear(x, w, Some(b))
    }

    fn layer_norm(&mut self, g: &mut Graph<'m>, x: Var, prefix: &str) -> Result<Var> {
        let gain = self.param(g, &format!("{prefix}.gain"));
        let offset = self.param(g, &format!("{prefix}.offset"));
        g.layer_norm(x, gain, offset, self.model.config.norm_eps)
    }

    fn batch_norm(&mut self, g: &mut Graph<'m>, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.param(g, &format!("{prefix}.gamma"));
        let beta = self.param(g, &format!("{prefix}.beta"));
        let stats = if self.training {
            BatchNormStats::Batch
        } else {
            BatchNormStats::Fixed {
                mean: self.model.buffers[format!("{prefix}.running_mean").as_str()].data(),
                var: self.model.buffers[format!("{prefix}.running_var").as_str()].data(),
            }
        };
        let (y, observed) = g.batch_norm(x, gamma, beta, BN_EPS, stats)?;
        if let Some(obs) = observed {
            self.batch_stats.push((prefix.to_string(), obs));
        }
        Ok(y)
    }

    fn dropout(&mut self, g: &mut Graph<'m>, x: Var) -> Result<Var> {
        self.dropouts += 1;
        g.dropout(
            x,
            self.model.config.dropout_p,
            self.training,
            dropout_seed(self.seed, self.dropouts),
        )
    }
}
