//! The learnable model: a 3D encoder-decoder with skip connections and a
//! swappable bottleneck (stacked selective-scan blocks or a small
//! Transformer), plus task heads and output fusion.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::model::scan::{refold_perm, unfold_perm};
use crate::seed;
use crate::tape::{Tape, TapeError, Tensor, TensorId};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("bad model config: {0}")]
    BadConfig(String),
    #[error("patch dims {dims:?} not divisible by {required} (levels = {levels})")]
    IndivisibleDims {
        dims: (usize, usize, usize),
        required: usize,
        levels: usize,
    },
    #[error("transformer expects {expected} bottleneck tokens, got {got}")]
    TokenMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Numerical(#[from] TapeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bottleneck {
    Vss3d,
    Transformer,
}

impl Bottleneck {
    pub fn as_str(&self) -> &'static str {
        match self {
            Bottleneck::Vss3d => "vss3d",
            Bottleneck::Transformer => "transformer",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "vss3d" => Some(Bottleneck::Vss3d),
            "transformer" => Some(Bottleneck::Transformer),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransformerCfg {
    pub layers: usize,
    pub heads: usize,
}

impl Default for TransformerCfg {
    fn default() -> Self {
        TransformerCfg { layers: 2, heads: 4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub levels: usize,
    pub base_width: usize,
    pub bottleneck: Bottleneck,
    pub vss3d_blocks: usize,
    pub scan_directions: usize,
    /// Selective-scan state dimension N.
    pub state_dim: usize,
    pub droppath_rate: f64,
    pub transformer: TransformerCfg,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 2,
            levels: 4,
            base_width: 8,
            bottleneck: Bottleneck::Vss3d,
            vss3d_blocks: 2,
            scan_directions: 6,
            state_dim: 8,
            droppath_rate: 0.0,
            transformer: TransformerCfg::default(),
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.levels < 2 {
            return Err(ModelError::BadConfig(format!("levels {} < 2", self.levels)));
        }
        if self.base_width < 4 {
            return Err(ModelError::BadConfig(format!(
                "base_width {} < 4",
                self.base_width
            )));
        }
        if !matches!(self.scan_directions, 2 | 4 | 6) {
            return Err(ModelError::BadConfig(format!(
                "scan_directions {} not in {{2, 4, 6}}",
                self.scan_directions
            )));
        }
        if !(0.0..1.0).contains(&self.droppath_rate) {
            return Err(ModelError::BadConfig(format!(
                "droppath_rate {} not in [0, 1)",
                self.droppath_rate
            )));
        }
        if self.in_channels == 0 || self.vss3d_blocks == 0 || self.state_dim == 0 {
            return Err(ModelError::BadConfig(
                "in_channels, vss3d_blocks and state_dim must be positive".into(),
            ));
        }
        let bw = self.bottleneck_width();
        if self.transformer.layers == 0
            || self.transformer.heads == 0
            || bw % self.transformer.heads != 0
        {
            return Err(ModelError::BadConfig(format!(
                "transformer heads {} must divide bottleneck width {bw}",
                self.transformer.heads
            )));
        }
        Ok(())
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    pub fn bottleneck_width(&self) -> usize {
        self.width(self.levels - 1)
    }

    /// Spatial downsampling factor from input to bottleneck.
    pub fn reduction(&self) -> usize {
        1 << (self.levels - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskMode {
    SingleTask,
    Multitask,
}

impl TaskMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskMode::SingleTask => "single_task",
            TaskMode::Multitask => "multitask",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "single_task" => Some(TaskMode::SingleTask),
            "multitask" => Some(TaskMode::Multitask),
            _ => None,
        }
    }
}

/// Ordered, named parameter tensors; order is the canonical checkpoint and
/// optimizer-state order.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    fn insert(&mut self, name: &str, t: Tensor) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(t);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.tensors[self.index[name]]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self.tensors[self.index[name]]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn total_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn scalar_count_matching(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }
}

/// A full model: config, task mode, patch geometry, and parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: BackboneConfig,
    pub mode: TaskMode,
    pub patch: (usize, usize, usize),
    pub params: ParamSet,
}

fn check_divisible(
    dims: (usize, usize, usize),
    config: &BackboneConfig,
) -> Result<(), ModelError> {
    let r = config.reduction();
    if dims.0 % r != 0 || dims.1 % r != 0 || dims.2 % r != 0 {
        return Err(ModelError::IndivisibleDims {
            dims,
            required: r,
            levels: config.levels,
        });
    }
    Ok(())
}

impl Model {
    /// Deterministic seeded initialization. Convolution weights draw from a
    /// fan-in-scaled normal; normalization layers start at identity; the
    /// scan transition coefficients start strictly negative; the scan gate's
    /// second map and the transformer output/MLP projections start at zero,
    /// making every bottleneck block an exact identity at initialization.
    pub fn init(
        config: BackboneConfig,
        mode: TaskMode,
        patch: (usize, usize, usize),
        seed: u64,
    ) -> Result<Model, ModelError> {
        config.validate()?;
        check_divisible(patch, &config)?;
        let mut rng = seed::stream(seed, 0x4D4F44);
        let mut params = ParamSet::default();

        let normal = |rng: &mut ChaCha8Rng, std: f64, n: usize| -> Vec<f64> {
            let dist = Normal::new(0.0, std).unwrap();
            (0..n).map(|_| dist.sample(rng)).collect()
        };
        let conv_init = |rng: &mut ChaCha8Rng, cout: usize, cin: usize, k: usize| -> Tensor {
            let fan_in = (cin * k * k * k) as f64;
            let shape = if k == 1 {
                vec![cout, cin]
            } else {
                vec![cout, cin, k, k, k]
            };
            let n: usize = shape.iter().product();
            Tensor::new(shape, normal(rng, (2.0 / fan_in).sqrt(), n))
        };

        let add_conv = |params: &mut ParamSet,
                            rng: &mut ChaCha8Rng,
                            name: &str,
                            cout: usize,
                            cin: usize,
                            k: usize| {
            params.insert(&format!("{name}.w"), conv_init(rng, cout, cin, k));
            params.insert(&format!("{name}.b"), Tensor::zeros(vec![cout]));
        };
        let add_norm = |params: &mut ParamSet, name: &str, c: usize| {
            params.insert(&format!("{name}.g"), Tensor::new(vec![c], vec![1.0; c]));
            params.insert(&format!("{name}.b"), Tensor::zeros(vec![c]));
        };

        // Encoder.
        for l in 0..config.levels {
            let w = config.width(l);
            let cin = if l == 0 {
                config.in_channels
            } else {
                config.width(l)
            };
            add_conv(&mut params, &mut rng, &format!("backbone.enc{l}.conv1"), w, cin, 3);
            add_norm(&mut params, &format!("backbone.enc{l}.norm1"), w);
            add_conv(&mut params, &mut rng, &format!("backbone.enc{l}.conv2"), w, w, 3);
            add_norm(&mut params, &format!("backbone.enc{l}.norm2"), w);
            if l + 1 < config.levels {
                add_conv(
                    &mut params,
                    &mut rng,
                    &format!("backbone.down{l}"),
                    config.width(l + 1),
                    w,
                    2,
                );
            }
        }

        let bw = config.bottleneck_width();
        match config.bottleneck {
            Bottleneck::Vss3d => {
                let n = config.state_dim;
                for bi in 0..config.vss3d_blocks {
                    let pfx = format!("backbone.vss{bi}");
                    add_norm(&mut params, &format!("{pfx}.norm"), bw);
                    for d in 0..config.scan_directions {
                        let dp = format!("{pfx}.dir{d}");
                        // Negative-softplus initialization keeps exp(delta*a)
                        // strictly inside the unit interval.
                        let a: Vec<f64> = normal(&mut rng, 1.0, n)
                            .into_iter()
                            .map(|x| -((1.0f64 + x.exp()).ln()))
                            .collect();
                        params.insert(&format!("{dp}.a"), Tensor::new(vec![n], a));
                        params.insert(
                            &format!("{dp}.wd"),
                            Tensor::new(vec![bw], normal(&mut rng, 1.0 / (bw as f64).sqrt(), bw)),
                        );
                        // softplus(bd) starts near 0.5.
                        params.insert(
                            &format!("{dp}.bd"),
                            Tensor::new(vec![1], vec![(0.5f64.exp() - 1.0).ln()]),
                        );
                        params.insert(
                            &format!("{dp}.wb"),
                            Tensor::new(
                                vec![n, bw],
                                normal(&mut rng, 1.0 / (bw as f64).sqrt(), n * bw),
                            ),
                        );
                        params.insert(&format!("{dp}.bb"), Tensor::zeros(vec![n]));
                        params.insert(
                            &format!("{dp}.wc"),
                            Tensor::new(
                                vec![bw, n],
                                normal(&mut rng, 1.0 / (n as f64).sqrt(), bw * n),
                            ),
                        );
                        params.insert(&format!("{dp}.bc"), Tensor::zeros(vec![bw]));
                    }
                    add_conv(&mut params, &mut rng, &format!("{pfx}.gate1"), bw, bw, 1);
                    params.insert(&format!("{pfx}.gate2.w"), Tensor::zeros(vec![bw, bw]));
                    params.insert(&format!("{pfx}.gate2.b"), Tensor::zeros(vec![bw]));
                }
            }
            Bottleneck::Transformer => {
                let r = config.reduction();
                let tokens = (patch.0 / r) * (patch.1 / r) * (patch.2 / r);
                params.insert(
                    "backbone.tf.posenc",
                    Tensor::new(vec![bw, tokens], normal(&mut rng, 0.02, bw * tokens)),
                );
                for li in 0..config.transformer.layers {
                    let pfx = format!("backbone.tf{li}");
                    add_norm(&mut params, &format!("{pfx}.norm1"), bw);
                    for proj in ["wq", "wk", "wv"] {
                        params.insert(
                            &format!("{pfx}.{proj}"),
                            Tensor::new(
                                vec![bw, bw],
                                normal(&mut rng, 1.0 / (bw as f64).sqrt(), bw * bw),
                            ),
                        );
                        params.insert(
                            &format!("{pfx}.{}", proj.replace('w', "b")),
                            Tensor::zeros(vec![bw]),
                        );
                    }
                    params.insert(&format!("{pfx}.wo"), Tensor::zeros(vec![bw, bw]));
                    params.insert(&format!("{pfx}.bo"), Tensor::zeros(vec![bw]));
                    add_norm(&mut params, &format!("{pfx}.norm2"), bw);
                    add_conv(&mut params, &mut rng, &format!("{pfx}.mlp1"), bw, bw, 1);
                    params.insert(&format!("{pfx}.mlp2.w"), Tensor::zeros(vec![bw, bw]));
                    params.insert(&format!("{pfx}.mlp2.b"), Tensor::zeros(vec![bw]));
                }
            }
        }

        // Decoder.
        for l in (1..config.levels).rev() {
            let w_in = config.width(l);
            let w_out = config.width(l - 1);
            add_conv(
                &mut params,
                &mut rng,
                &format!("backbone.dec{l}.conv1"),
                w_out,
                w_in + w_out,
                3,
            );
            add_norm(&mut params, &format!("backbone.dec{l}.norm1"), w_out);
            add_conv(
                &mut params,
                &mut rng,
                &format!("backbone.dec{l}.conv2"),
                w_out,
                w_out,
                3,
            );
            add_norm(&mut params, &format!("backbone.dec{l}.norm2"), w_out);
        }

        let w0 = config.base_width;
        match mode {
            TaskMode::Multitask => {
                add_conv(&mut params, &mut rng, "head.seg", 1, w0, 1);
                add_conv(&mut params, &mut rng, "head.bone", 1, w0, 1);
                add_conv(&mut params, &mut rng, "head.soft", 1, w0, 1);
            }
            TaskMode::SingleTask => {
                add_conv(&mut params, &mut rng, "head.sct", 1, w0, 1);
            }
        }

        Ok(Model {
            config,
            mode,
            patch,
            params,
        })
    }

    pub fn total_scalars(&self) -> usize {
        self.params.total_scalars()
    }

    pub fn backbone_scalars(&self) -> usize {
        self.params.scalar_count_matching("backbone.")
    }
}

/// Tape-side handles of one forward pass.
pub struct ForwardPass {
    pub outputs: TapeOutputs,
    /// Leaf ids in `ParamSet` order, for gradient extraction.
    pub param_ids: Vec<TensorId>,
}

pub enum TapeOutputs {
    Multitask {
        seg_logits: TensorId,
        bone: TensorId,
        soft: TensorId,
    },
    SingleTask {
        sct: TensorId,
    },
}

/// Evaluated outputs of one patch.
#[derive(Debug, Clone)]
pub enum ModelOutputs {
    Multitask {
        seg_logits: Tensor,
        bone: Tensor,
        soft: Tensor,
    },
    SingleTask {
        sct: Tensor,
    },
}

struct ParamLeaves<'a> {
    ids: Vec<TensorId>,
    index: &'a HashMap<String, usize>,
}

impl ParamLeaves<'_> {
    fn id(&self, name: &str) -> TensorId {
        self.ids[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))]
    }
}

fn conv_norm_act(
    tape: &mut Tape,
    leaves: &ParamLeaves,
    x: TensorId,
    conv: &str,
    norm: &str,
) -> TensorId {
    let w = leaves.id(&format!("{conv}.w"));
    let b = leaves.id(&format!("{conv}.b"));
    let y = tape.conv3_same(x, w, b);
    let g = leaves.id(&format!("{norm}.g"));
    let bb = leaves.id(&format!("{norm}.b"));
    let y = tape.layer_norm_channels(y, g, bb);
    tape.silu(y)
}

fn vss3d_block(
    tape: &mut Tape,
    leaves: &ParamLeaves,
    model: &Model,
    block: usize,
    x: TensorId,
    dims: (usize, usize, usize),
    keep_scale: Option<f64>,
) -> Result<TensorId, ModelError> {
    let Some(scale) = keep_scale else {
        return Ok(x); // stochastic depth dropped the update path
    };
    let cfg = &model.config;
    let c = cfg.bottleneck_width();
    let pfx = format!("backbone.vss{block}");
    let g = leaves.id(&format!("{pfx}.norm.g"));
    let b = leaves.id(&format!("{pfx}.norm.b"));
    let h = tape.layer_norm_channels(x, g, b);

    let t = dims.0 * dims.1 * dims.2;
    let mut accum: Option<TensorId> = None;
    for d in 0..cfg.scan_directions {
        let dp = format!("{pfx}.dir{d}");
        let unfold = Arc::new(unfold_perm(c, (dims.0, dims.1, dims.2), d).expect("valid dir"));
        let tokens = tape.gather(h, unfold, vec![c, t]);
        let y = tape.ssm_scan(
            tokens,
            leaves.id(&format!("{dp}.a")),
            leaves.id(&format!("{dp}.wd")),
            leaves.id(&format!("{dp}.bd")),
            leaves.id(&format!("{dp}.wb")),
            leaves.id(&format!("{dp}.bb")),
            leaves.id(&format!("{dp}.wc")),
            leaves.id(&format!("{dp}.bc")),
        )?;
        let refold = Arc::new(refold_perm(c, (dims.0, dims.1, dims.2), d).expect("valid dir"));
        let back = tape.gather(y, refold, vec![c, dims.0, dims.1, dims.2]);
        accum = Some(match accum {
            None => back,
            Some(acc) => tape.add(acc, back),
        });
    }
    let mean = tape.scale(accum.unwrap(), 1.0 / cfg.scan_directions as f64);

    let g1 = tape.conv1x1(
        mean,
        leaves.id(&format!("{pfx}.gate1.w")),
        leaves.id(&format!("{pfx}.gate1.b")),
    );
    let g1 = tape.silu(g1);
    let update = tape.conv1x1(
        g1,
        leaves.id(&format!("{pfx}.gate2.w")),
        leaves.id(&format!("{pfx}.gate2.b")),
    );
    let update = if scale != 1.0 {
        tape.scale(update, scale)
    } else {
        update
    };
    Ok(tape.add(x, update))
}

fn transformer_bottleneck(
    tape: &mut Tape,
    leaves: &ParamLeaves,
    model: &Model,
    x: TensorId,
    dims: (usize, usize, usize),
) -> Result<TensorId, ModelError> {
    let cfg = &model.config;
    let c = cfg.bottleneck_width();
    let t = dims.0 * dims.1 * dims.2;
    let posenc = leaves.id("backbone.tf.posenc");
    let expected = tape.value(posenc).shape[1];
    if expected != t {
        return Err(ModelError::TokenMismatch { expected, got: t });
    }
    // [C, d, w, h] and [C, T] share the same flat layout.
    let ident: Arc<Vec<usize>> = Arc::new((0..c * t).collect());
    let mut u = tape.gather(x, ident.clone(), vec![c, t]);
    for li in 0..cfg.transformer.layers {
        let pfx = format!("backbone.tf{li}");
        let g = leaves.id(&format!("{pfx}.norm1.g"));
        let b = leaves.id(&format!("{pfx}.norm1.b"));
        let h = tape.layer_norm_channels(u, g, b);
        // Positions enter through the attention addresses only, so the
        // residual stream stays an exact identity at initialization.
        let hp = tape.add(h, posenc);
        let q = tape.conv1x1(hp, leaves.id(&format!("{pfx}.wq")), leaves.id(&format!("{pfx}.bq")));
        let k = tape.conv1x1(hp, leaves.id(&format!("{pfx}.wk")), leaves.id(&format!("{pfx}.bk")));
        let v = tape.conv1x1(h, leaves.id(&format!("{pfx}.wv")), leaves.id(&format!("{pfx}.bv")));
        let attn = tape.attention_core(q, k, v, cfg.transformer.heads);
        let o = tape.conv1x1(
            attn,
            leaves.id(&format!("{pfx}.wo")),
            leaves.id(&format!("{pfx}.bo")),
        );
        u = tape.add(u, o);
        let g2 = leaves.id(&format!("{pfx}.norm2.g"));
        let b2 = leaves.id(&format!("{pfx}.norm2.b"));
        let h2 = tape.layer_norm_channels(u, g2, b2);
        let m = tape.conv1x1(
            h2,
            leaves.id(&format!("{pfx}.mlp1.w")),
            leaves.id(&format!("{pfx}.mlp1.b")),
        );
        let m = tape.silu(m);
        let m = tape.conv1x1(
            m,
            leaves.id(&format!("{pfx}.mlp2.w")),
            leaves.id(&format!("{pfx}.mlp2.b")),
        );
        u = tape.add(u, m);
    }
    Ok(tape.gather(u, ident, vec![c, dims.0, dims.1, dims.2]))
}

/// Run the model on an input already on the tape. In training mode the
/// parameters are differentiable leaves and stochastic depth draws from
/// `droppath_rng`; in evaluation mode both are disabled.
pub fn forward_pass(
    model: &Model,
    tape: &mut Tape,
    input: TensorId,
    train: bool,
    mut droppath_rng: Option<&mut ChaCha8Rng>,
) -> Result<ForwardPass, ModelError> {
    let cfg = &model.config;
    let shape = tape.value(input).shape.clone();
    assert_eq!(shape.len(), 4, "input must be [C, D, W, H]");
    assert_eq!(shape[0], cfg.in_channels, "input channels");
    let dims = (shape[1], shape[2], shape[3]);
    check_divisible(dims, cfg)?;

    let param_ids: Vec<TensorId> = model
        .params
        .iter()
        .map(|(_, t)| tape.leaf(t.clone(), train))
        .collect();
    let leaves = ParamLeaves {
        ids: param_ids.clone(),
        index: &model.params.index,
    };

    // Encoder with skips.
    let mut skips = Vec::with_capacity(cfg.levels - 1);
    let mut x = input;
    for l in 0..cfg.levels {
        x = conv_norm_act(
            tape,
            &leaves,
            x,
            &format!("backbone.enc{l}.conv1"),
            &format!("backbone.enc{l}.norm1"),
        );
        x = conv_norm_act(
            tape,
            &leaves,
            x,
            &format!("backbone.enc{l}.conv2"),
            &format!("backbone.enc{l}.norm2"),
        );
        if l + 1 < cfg.levels {
            skips.push(x);
            let w = leaves.id(&format!("backbone.down{l}.w"));
            let b = leaves.id(&format!("backbone.down{l}.b"));
            x = tape.conv2_down(x, w, b);
        }
    }

    let r = cfg.reduction();
    let bdims = (dims.0 / r, dims.1 / r, dims.2 / r);
    match cfg.bottleneck {
        Bottleneck::Vss3d => {
            for bi in 0..cfg.vss3d_blocks {
                let keep_scale = if train && cfg.droppath_rate > 0.0 {
                    let rng = droppath_rng
                        .as_deref_mut()
                        .expect("droppath needs an rng in training mode");
                    if rng.gen_range(0.0..1.0) < cfg.droppath_rate {
                        None
                    } else {
                        Some(1.0 / (1.0 - cfg.droppath_rate))
                    }
                } else {
                    Some(1.0)
                };
                x = vss3d_block(tape, &leaves, model, bi, x, bdims, keep_scale)?;
            }
        }
        Bottleneck::Transformer => {
            x = transformer_bottleneck(tape, &leaves, model, x, bdims)?;
        }
    }

    // Decoder.
    for l in (1..cfg.levels).rev() {
        x = tape.upsample2(x);
        x = tape.concat_channels(x, skips[l - 1]);
        x = conv_norm_act(
            tape,
            &leaves,
            x,
            &format!("backbone.dec{l}.conv1"),
            &format!("backbone.dec{l}.norm1"),
        );
        x = conv_norm_act(
            tape,
            &leaves,
            x,
            &format!("backbone.dec{l}.conv2"),
            &format!("backbone.dec{l}.norm2"),
        );
    }

    let head = |tape: &mut Tape, name: &str| -> TensorId {
        tape.conv1x1(
            x,
            leaves.id(&format!("{name}.w")),
            leaves.id(&format!("{name}.b")),
        )
    };
    let outputs = match model.mode {
        TaskMode::Multitask => TapeOutputs::Multitask {
            seg_logits: head(tape, "head.seg"),
            bone: head(tape, "head.bone"),
            soft: head(tape, "head.soft"),
        },
        TaskMode::SingleTask => TapeOutputs::SingleTask {
            sct: head(tape, "head.sct"),
        },
    };
    Ok(ForwardPass { outputs, param_ids })
}

/// Evaluation-mode forward pass on a raw patch tensor.
pub fn forward(model: &Model, patch: &Tensor) -> Result<ModelOutputs, ModelError> {
    let mut tape = Tape::new();
    let input = tape.leaf(patch.clone(), false);
    let pass = forward_pass(model, &mut tape, input, false, None)?;
    Ok(match pass.outputs {
        TapeOutputs::Multitask {
            seg_logits,
            bone,
            soft,
        } => ModelOutputs::Multitask {
            seg_logits: tape.value(seg_logits).clone(),
            bone: tape.value(bone).clone(),
            soft: tape.value(soft).clone(),
        },
        TapeOutputs::SingleTask { sct } => ModelOutputs::SingleTask {
            sct: tape.value(sct).clone(),
        },
    })
}

/// Fuse the multitask branches: voxels whose predicted bone probability
/// exceeds `threshold` take the bone branch, all others the soft branch.
pub fn fuse_outputs(
    seg_logits: &[f64],
    bone: &[f64],
    soft: &[f64],
    threshold: f64,
) -> Vec<f64> {
    assert_eq!(seg_logits.len(), bone.len());
    assert_eq!(seg_logits.len(), soft.len());
    seg_logits
        .iter()
        .zip(bone.iter().zip(soft.iter()))
        .map(|(&l, (&b, &s))| {
            let p = 1.0 / (1.0 + (-l).exp());
            if p > threshold {
                b
            } else {
                s
            }
        })
        .collect()
}

/// Transition factor exp(delta * a); the identity at delta = 0.
pub fn transition_factor(delta: f64, a: f64) -> f64 {
    (delta * a).exp()
}
