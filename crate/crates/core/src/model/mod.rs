//! The ELNet classifier.
//!
//! Every slice of a volume runs through the same 2D feature extractor (the
//! slice axis plays the role of a batch), the per-slice feature vectors are
//! max-pooled across slices, and a two-way linear classifier follows:
//!
//! ```text
//! 7x7 conv 4K /2 -> norm -> relu -> pool
//! stage 1: block[5x5] x2 (4K)  -> 5x5 conv 8K  -> relu -> pool
//! stage 2: block[3x3] x2 (8K)  -> 3x3 conv 16K -> relu -> pool
//! stage 3: block[3x3]    (16K) -> 3x3 conv 16K -> relu -> pool
//! stage 4: block[3x3]    (16K) -> 3x3 conv 16K -> relu -> pool
//! global 2D max -> max over slices -> dropout -> linear(2) -> softmax
//! ```
//!
//! A block maps `x` to `x + relu(norm(conv(x)))` with same padding.

mod audit;
mod checkpoint;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::blurpool::{blurpool_out_dim, BlurPoolSpec, STAGES};
use crate::error::{Error, Result};
use crate::msnorm::{NormStats, NormVariant, DEFAULT_EPS};
use crate::nn::{conv_out_dim, Mode, RunningStats};
use crate::seed;
use crate::tensor::{Graph, Real, Tensor, Var};

pub use audit::{closed_form_param_count, param_audit, AuditRow};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

/// Number of stages after the stem.
pub const MAX_DEPTH: usize = STAGES - 1;

const STEM_KERNEL: usize = 7;
const STEM_STRIDE: usize = 2;
const STEM_WIDTH: usize = 4;

struct StageSpec {
    block_kernel: usize,
    blocks: usize,
    /// Channel multiples of K inside the blocks and after the expand conv.
    width: usize,
    out: usize,
}

const STAGE_SPECS: [StageSpec; MAX_DEPTH] = [
    StageSpec { block_kernel: 5, blocks: 2, width: 4, out: 8 },
    StageSpec { block_kernel: 3, blocks: 2, width: 8, out: 16 },
    StageSpec { block_kernel: 3, blocks: 1, width: 16, out: 16 },
    StageSpec { block_kernel: 3, blocks: 1, width: 16, out: 16 },
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolVariant {
    Blurpool,
    /// 2x2 max pooling with stride 2 (ablation baseline).
    Maxpool,
}

impl PoolVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            PoolVariant::Blurpool => "blurpool",
            PoolVariant::Maxpool => "maxpool",
        }
    }
}

impl FromStr for PoolVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blurpool" => Ok(PoolVariant::Blurpool),
            "maxpool" => Ok(PoolVariant::Maxpool),
            other => Err(Error::invalid(format!("unknown pooling variant {other:?}"))),
        }
    }
}

/// Everything needed to rebuild a network from scratch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Width factor: channel widths are 4K, 8K and 16K.
    pub k: usize,
    pub norm: NormVariant,
    pub pool: PoolVariant,
    /// Binomial kernel size per pooling stage (stem first).
    pub blur: BlurPoolSpec,
    pub dropout: f64,
    /// `(H, W)` of the network input.
    pub input: [usize; 2],
    /// Initialization seed.
    pub seed: u64,
    /// Stages after the stem, 1..=4. Anything below 4 is a reduced network
    /// for tests.
    pub depth: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            k: 4,
            norm: NormVariant::Layer,
            pool: PoolVariant::Blurpool,
            blur: BlurPoolSpec::default(),
            dropout: 0.5,
            input: [256, 256],
            seed: 0,
            depth: MAX_DEPTH,
        }
    }
}

impl ModelConfig {
    pub fn with_k(k: usize) -> Self {
        ModelConfig { k, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("width factor K must be at least 1"));
        }
        if !(1..=MAX_DEPTH).contains(&self.depth) {
            return Err(Error::invalid(format!("depth must be in 1..={MAX_DEPTH}, got {}", self.depth)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout rate {} outside [0, 1)", self.dropout)));
        }
        self.blur.validate()?;
        self.spatial_sizes().map(|_| ())
    }

    /// Spatial size after the stem convolution and after every pooling
    /// stage. Fails if any stage would shrink the image below one pixel.
    pub fn spatial_sizes(&self) -> Result<Vec<[usize; 2]>> {
        let collapse = || Error::invalid(format!("input {:?} collapses below 1 pixel", self.input));
        let stem = |d: usize| conv_out_dim(d, STEM_KERNEL, STEM_STRIDE, STEM_KERNEL / 2);
        let mut size = [
            stem(self.input[0]).ok_or_else(collapse)?,
            stem(self.input[1]).ok_or_else(collapse)?,
        ];
        let mut sizes = vec![size];
        for stage in 0..=self.depth {
            for d in &mut size {
                *d = match self.pool {
                    PoolVariant::Blurpool => blurpool_out_dim(*d, self.blur.kernels[stage]),
                    PoolVariant::Maxpool => (*d >= 2).then(|| (*d - 2) / 2 + 1),
                }
                .ok_or_else(collapse)?;
            }
            sizes.push(size);
        }
        Ok(sizes)
    }

    /// Width of the feature vector that reaches the classifier.
    pub fn feature_dim(&self) -> usize {
        STAGE_SPECS[self.depth - 1].out * self.k
    }

    /// `key=value` lines, one per field.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let blur: Vec<String> = self.blur.kernels.iter().map(|b| b.to_string()).collect();
        vec![
            ("k".into(), self.k.to_string()),
            ("norm".into(), self.norm.as_str().into()),
            ("pool".into(), self.pool.as_str().into()),
            ("blur".into(), blur.join(",")),
            ("dropout".into(), self.dropout.to_string()),
            ("input".into(), format!("{}x{}", self.input[0], self.input[1])),
            ("seed".into(), self.seed.to_string()),
            ("depth".into(), self.depth.to_string()),
        ]
    }

    /// Inverse of [`ModelConfig::to_kv`]; every field must be present.
    pub fn from_kv(map: &BTreeMap<String, String>) -> Result<Self> {
        fn get<'a>(map: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
            map.get(key)
                .map(String::as_str)
                .ok_or_else(|| Error::format(format!("model config is missing {key:?}")))
        }
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::format(format!("bad value {v:?} for {key:?}")))
        }
        let blur: Vec<usize> = get(map, "blur")?
            .split(',')
            .map(|v| num("blur", v))
            .collect::<Result<_>>()?;
        let blur = BlurPoolSpec {
            kernels: blur
                .try_into()
                .map_err(|_| Error::format(format!("blur needs {STAGES} kernel sizes")))?,
        };
        let input = get(map, "input")?;
        let (h, w) = input
            .split_once('x')
            .ok_or_else(|| Error::format(format!("bad input size {input:?}")))?;
        let cfg = ModelConfig {
            k: num("k", get(map, "k")?)?,
            norm: get(map, "norm")?.parse()?,
            pool: get(map, "pool")?.parse()?,
            blur,
            dropout: num("dropout", get(map, "dropout")?)?,
            input: [num("input", h)?, num("input", w)?],
            seed: num("seed", get(map, "seed")?)?,
            depth: num("depth", get(map, "depth")?)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.to_kv().into_iter().map(|(k, v)| format!("{k}={v}")).collect();
        f.write_str(&parts.join(" "))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ParamKind {
    Conv { fan_in: usize },
    Gamma,
    Beta,
    FcWeight { fan_in: usize },
    FcBias,
}

/// Name, shape and audit row of one trainable tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub dims: Vec<usize>,
    /// Index into the rows reported by [`param_audit`].
    pub row: usize,
    kind: ParamKind,
}

impl ParamInfo {
    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }
}

/// Trainable tensors in the order `forward` consumes them.
pub fn param_layout(cfg: &ModelConfig) -> Vec<ParamInfo> {
    let k = cfg.k;
    let mut out = Vec::new();
    let mut push = |name: String, dims: Vec<usize>, row: usize, kind: ParamKind| {
        out.push(ParamInfo { name, dims, row, kind });
    };
    let conv = |cout: usize, cin: usize, ks: usize| (vec![cout, cin, ks, ks], ParamKind::Conv { fan_in: cin * ks * ks });

    let (dims, kind) = conv(STEM_WIDTH * k, 1, STEM_KERNEL);
    push("stem.conv.weight".into(), dims, 0, kind);
    push("stem.norm.gamma".into(), vec![STEM_WIDTH * k], 1, ParamKind::Gamma);
    push("stem.norm.beta".into(), vec![STEM_WIDTH * k], 1, ParamKind::Beta);

    for (j, spec) in STAGE_SPECS.iter().enumerate().take(cfg.depth) {
        let (block_row, expand_row) = (2 + 2 * j, 3 + 2 * j);
        let width = spec.width * k;
        for b in 0..spec.blocks {
            let prefix = format!("stage{}.block{b}", j + 1);
            let (dims, kind) = conv(width, width, spec.block_kernel);
            push(format!("{prefix}.conv.weight"), dims, block_row, kind);
            push(format!("{prefix}.norm.gamma"), vec![width], block_row, ParamKind::Gamma);
            push(format!("{prefix}.norm.beta"), vec![width], block_row, ParamKind::Beta);
        }
        let (dims, kind) = conv(spec.out * k, width, spec.block_kernel);
        push(format!("stage{}.expand.weight", j + 1), dims, expand_row, kind);
    }

    let d = cfg.feature_dim();
    let fc_row = 2 + 2 * MAX_DEPTH;
    push("fc.weight".into(), vec![2, d], fc_row, ParamKind::FcWeight { fan_in: d });
    push("fc.bias".into(), vec![2], fc_row, ParamKind::FcBias);
    out
}

/// One normalization layer as seen by a forward pass.
#[derive(Clone, Debug)]
pub struct NormSite {
    /// Layer prefix, e.g. `stage1.block0.norm`.
    pub name: String,
    /// Output of the affine map, before the ReLU.
    pub output: Var,
    /// Parameter indices of γ and β.
    pub gamma: usize,
    pub beta: usize,
}

#[derive(Clone, Debug)]
pub struct ForwardOptions {
    pub mode: Mode,
    /// Seed of the dropout mask (train mode only).
    pub dropout_seed: u64,
    /// Differentiate with respect to the input volume.
    pub track_input: bool,
    /// Differentiate with respect to the parameters.
    pub track_params: bool,
    /// Record the shape after every stage.
    pub trace: bool,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        ForwardOptions {
            mode: Mode::Eval,
            dropout_seed: 0,
            track_input: false,
            track_params: false,
            trace: false,
        }
    }

    pub fn train(dropout_seed: u64) -> Self {
        ForwardOptions {
            mode: Mode::Train,
            dropout_seed,
            track_params: true,
            ..Self::eval()
        }
    }
}

/// Handles into the graph built by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub input: Var,
    pub params: Vec<Var>,
    /// Slice-pooled feature vector, before dropout.
    pub features: Var,
    pub logits: Var,
    pub probs: Var,
    pub norm_sites: Vec<NormSite>,
    /// Batch statistics per norm site (batch variant in train mode only).
    pub batch_stats: Vec<NormStats>,
    /// `(stage name, shape)` pairs when tracing was requested.
    pub trace: Vec<(String, Vec<usize>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ElNet {
    config: ModelConfig,
    layout: Vec<ParamInfo>,
    params: Vec<Tensor<f32>>,
    /// Running averages per norm site; only consulted by the batch variant.
    running: Vec<RunningStats<f32>>,
}

impl ElNet {
    /// Builds a freshly initialized network: He-uniform fan-in weights,
    /// γ = 1, β = 0 and a zero classifier bias.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = param_layout(&config);
        let params = layout
            .iter()
            .enumerate()
            .map(|(i, info)| match info.kind {
                ParamKind::Conv { fan_in } | ParamKind::FcWeight { fan_in } => {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    Tensor::seeded_uniform(info.dims.clone(), -bound, bound, seed::derive(config.seed, &[i as u64]))
                }
                ParamKind::Gamma => Tensor::full(info.dims.clone(), 1.0),
                ParamKind::Beta | ParamKind::FcBias => Tensor::zeros(info.dims.clone()),
            })
            .collect::<Result<Vec<_>>>()?;
        let running = layout
            .iter()
            .filter(|p| p.kind == ParamKind::Gamma)
            .map(|p| RunningStats::new(p.dims[0]))
            .collect();
        Ok(ElNet {
            config,
            layout,
            params,
            running,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &[ParamInfo] {
        &self.layout
    }

    pub fn params(&self) -> &[Tensor<f32>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<f32>> {
        self.layout.iter().position(|p| p.name == name).map(|i| &self.params[i])
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn running_stats(&self) -> &[RunningStats<f32>] {
        &self.running
    }

    /// Names of the normalization layers, in forward order.
    pub fn norm_names(&self) -> Vec<String> {
        self.layout
            .iter()
            .filter(|p| p.kind == ParamKind::Gamma)
            .map(|p| p.name.trim_end_matches(".gamma").to_string())
            .collect()
    }

    /// Folds the batch statistics of a train-mode forward pass into the
    /// running averages.
    pub fn update_running(&mut self, stats: &[NormStats]) {
        for (r, s) in self.running.iter_mut().zip(stats) {
            r.update(s);
        }
    }

    /// Runs `x: (S, 1, H, W)` through the network, registering the input and
    /// the parameters as leaves of `g`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Tensor<T>, opts: &ForwardOptions) -> Result<Forward> {
        let input = g.leaf(x.with_requires_grad(opts.track_input));
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| g.leaf(p.cast::<T>().with_requires_grad(opts.track_params)))
            .collect();
        self.forward_with(g, input, &params, opts)
    }

    /// Like [`ElNet::forward`] but with caller-supplied parameter leaves, in
    /// [`ElNet::layout`] order.
    pub fn forward_with<T: Real>(
        &self,
        g: &mut Graph<T>,
        input: Var,
        params: &[Var],
        opts: &ForwardOptions,
    ) -> Result<Forward> {
        let cfg = &self.config;
        if params.len() != self.layout.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, got {}",
                self.layout.len(),
                params.len()
            )));
        }
        let dims = g.value(input).dims().to_vec();
        if dims.len() != 4 || dims[1] != 1 || dims[2..] != cfg.input {
            return Err(Error::shape(
                "elnet",
                format!("expected (S, 1, {}, {}), got {dims:?}", cfg.input[0], cfg.input[1]),
            ));
        }

        let mut run = Run {
            g,
            params,
            next: 0,
            opts,
            net: self,
            sites: Vec::new(),
            stats: Vec::new(),
            trace: Vec::new(),
        };

        let w = run.take();
        let mut h = run.g.conv2d(input, w, STEM_STRIDE, STEM_KERNEL / 2)?;
        run.record("stem.conv", h);
        h = run.norm(h, "stem.norm")?;
        h = run.g.relu(h)?;
        h = run.pool(h, 0)?;
        run.record("stem.pool", h);

        for (j, spec) in STAGE_SPECS.iter().enumerate().take(cfg.depth) {
            for b in 0..spec.blocks {
                let w = run.take();
                let y = run.g.conv2d(h, w, 1, spec.block_kernel / 2)?;
                let y = run.norm(y, &format!("stage{}.block{b}.norm", j + 1))?;
                let y = run.g.relu(y)?;
                h = run.g.add(h, y)?;
            }
            run.record(&format!("stage{}.blocks", j + 1), h);
            let w = run.take();
            h = run.g.conv2d(h, w, 1, spec.block_kernel / 2)?;
            run.record(&format!("stage{}.expand", j + 1), h);
            h = run.g.relu(h)?;
            h = run.pool(h, j + 1)?;
            run.record(&format!("stage{}.pool", j + 1), h);
        }

        h = run.g.global_maxpool2d(h)?;
        run.record("global_pool", h);
        h = run.g.slice_maxpool(h)?;
        run.record("slice_pool", h);
        let features = h;
        h = run.g.dropout(h, cfg.dropout, opts.mode, opts.dropout_seed)?;
        let (fw, fb) = (run.take(), run.take());
        let logits = run.g.linear(h, fw, fb)?;
        run.record("logits", logits);
        let probs = run.g.softmax(logits)?;

        Ok(Forward {
            input,
            params: params.to_vec(),
            features,
            logits,
            probs,
            norm_sites: run.sites,
            batch_stats: run.stats,
            trace: run.trace,
        })
    }

    /// Class probabilities of one volume in eval mode.
    pub fn predict(&self, x: &Tensor<f32>) -> Result<[f32; 2]> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, x.clone(), &ForwardOptions::eval())?;
        let p = g.value(out.probs).data();
        Ok([p[0], p[1]])
    }

    /// Reassembles a network from stored tensors, checking every shape
    /// against the layout implied by `config`.
    pub(crate) fn from_parts(
        config: ModelConfig,
        params: Vec<Tensor<f32>>,
        running: Vec<RunningStats<f32>>,
    ) -> Result<Self> {
        let mut net = ElNet::new(config)?;
        if params.len() != net.params.len() || running.len() != net.running.len() {
            return Err(Error::format("parameter set does not match the model config"));
        }
        for ((info, p), slot) in net.layout.iter().zip(params).zip(net.params.iter_mut()) {
            if p.dims() != info.dims.as_slice() {
                return Err(Error::format(format!("{} has shape {}, expected {:?}", info.name, p.shape(), info.dims)));
            }
            *slot = p;
        }
        for (r, slot) in running.into_iter().zip(net.running.iter_mut()) {
            if r.mean.len() != slot.mean.len() || r.var.len() != slot.var.len() {
                return Err(Error::format("running statistics do not match the model config"));
            }
            *slot = r;
        }
        Ok(net)
    }
}

/// Mutable state threaded through one forward pass.
struct Run<'a, T: Real> {
    g: &'a mut Graph<T>,
    params: &'a [Var],
    next: usize,
    opts: &'a ForwardOptions,
    net: &'a ElNet,
    sites: Vec<NormSite>,
    stats: Vec<NormStats>,
    trace: Vec<(String, Vec<usize>)>,
}

impl<T: Real> Run<'_, T> {
    fn take(&mut self) -> Var {
        self.next += 1;
        self.params[self.next - 1]
    }

    fn record(&mut self, name: &str, v: Var) {
        if self.opts.trace {
            self.trace.push((name.to_string(), self.g.value(v).dims().to_vec()));
        }
    }

    fn norm(&mut self, x: Var, name: &str) -> Result<Var> {
        let (gi, bi) = (self.next, self.next + 1);
        let (gamma, beta) = (self.take(), self.take());
        let y = match self.net.config.norm {
            NormVariant::Layer => self.g.layer_norm_slices(x, gamma, beta, DEFAULT_EPS)?,
            NormVariant::Contrast => self.g.contrast_norm(x, gamma, beta, DEFAULT_EPS)?,
            NormVariant::Batch => {
                let r = &self.net.running[self.sites.len()];
                let running = RunningStats {
                    mean: r.mean.iter().map(|v| T::from_f64_lossy(*v as f64)).collect(),
                    var: r.var.iter().map(|v| T::from_f64_lossy(*v as f64)).collect(),
                    momentum: r.momentum,
                };
                let (y, stats) = self.g.batchnorm_slices(x, gamma, beta, &running, self.opts.mode, DEFAULT_EPS)?;
                self.stats.extend(stats);
                y
            }
        };
        self.sites.push(NormSite {
            name: name.to_string(),
            output: y,
            gamma: gi,
            beta: bi,
        });
        Ok(y)
    }

    fn pool(&mut self, x: Var, stage: usize) -> Result<Var> {
        match self.net.config.pool {
            PoolVariant::Blurpool => self.g.blurpool2d(x, self.net.config.blur.kernels[stage]),
            PoolVariant::Maxpool => self.g.maxpool2d(x, 2, 2),
        }
    }
}
