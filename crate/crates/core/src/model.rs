//! Small transformer with pluggable mixers, trained on synthetic tasks.
//!
//! Block layout (pre-norm):
//!
//! ```text
//! h = x + mixer(LN1(x))
//! y = h + W2·gelu(W1·LN2(h) + b1) + b2
//! ```
//!
//! Inputs are token ids or patch vectors, plus learned absolute positions
//! unless disabled. After the last block a final layer norm, pooling and a
//! linear head produce logits. Batches are processed one sequence at a time
//! with gradients accumulated in a fixed order, so a run is bit-reproducible
//! from its seed.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::circulant::{CatOptions, ExecPath, Orientation};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::serialize::{read_container, write_container};
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};
use crate::variants::{Mechanism, MixerParams};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Token,
    Avg,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    MaskedLm,
    CausalLm,
    Classification,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    Tokens { vocab: usize },
    Patches { dim: usize },
}

/// `[attention, cat, attention, ...]`.
pub fn build_cat_alter_schedule(n_layers: usize) -> Vec<Mechanism> {
    (0..n_layers)
        .map(|i| if i % 2 == 0 { Mechanism::Attention } else { Mechanism::Cat })
        .collect()
}

pub fn build_uniform_schedule(mechanism: Mechanism, n_layers: usize) -> Vec<Mechanism> {
    vec![mechanism; n_layers]
}

/// Schedule for a model-level mixer choice; `cat_alter` interleaves.
pub fn schedule_for(mixer: Mechanism, n_layers: usize) -> Vec<Mechanism> {
    match mixer {
        Mechanism::CatAlter => build_cat_alter_schedule(n_layers),
        m => build_uniform_schedule(m, n_layers),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d: usize,
    pub heads: usize,
    pub n_max: usize,
    pub schedule: Vec<Mechanism>,
    pub pooling: Pooling,
    pub objective: Objective,
    pub input: InputKind,
    /// Vocabulary size for the LM objectives, class count for classification.
    pub outputs: usize,
    pub mlp_mult: usize,
    pub mask_probability: f64,
    pub positions: bool,
    pub path: ExecPath,
    pub orientation: Orientation,
    pub scale_logits: bool,
}

impl ModelConfig {
    pub fn new(
        schedule: Vec<Mechanism>,
        d: usize,
        heads: usize,
        n_max: usize,
        objective: Objective,
        input: InputKind,
        outputs: usize,
    ) -> Self {
        Self {
            n_layers: schedule.len(),
            d,
            heads,
            n_max,
            schedule,
            pooling: match objective {
                Objective::Classification => Pooling::Avg,
                _ => Pooling::None,
            },
            objective,
            input,
            outputs,
            mlp_mult: 4,
            mask_probability: 0.15,
            positions: true,
            path: ExecPath::Fft,
            orientation: Orientation::ColShift,
            scale_logits: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.n_layers == 0 || self.schedule.len() != self.n_layers {
            return bad(format!(
                "schedule has {} entries for {} layers",
                self.schedule.len(),
                self.n_layers
            ));
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad(format!("D = {} is not divisible by H = {}", self.d, self.heads));
        }
        if let Some(m) = self.schedule.iter().find(|m| !m.is_layer()) {
            return bad(format!("'{m}' is not a layer mechanism"));
        }
        if self.n_max == 0 || self.outputs == 0 || self.mlp_mult == 0 {
            return bad("n_max, outputs and mlp_mult must be positive".into());
        }
        match self.input {
            InputKind::Tokens { vocab: 0 } | InputKind::Patches { dim: 0 } => {
                return bad("input vocabulary/patch size must be positive".into())
            }
            InputKind::Patches { .. } if self.objective != Objective::Classification => {
                return bad("patch inputs need the classification objective".into())
            }
            _ => {}
        }
        if self.objective == Objective::MaskedLm
            && !(self.mask_probability > 0.0 && self.mask_probability < 1.0)
        {
            return bad(format!("mask probability {} not in (0, 1)", self.mask_probability));
        }
        match (self.objective, self.pooling) {
            (Objective::Classification, Pooling::None) => bad("classification needs token or avg pooling".into()),
            (Objective::MaskedLm | Objective::CausalLm, Pooling::Token | Pooling::Avg) => {
                bad("language-model objectives need per-position outputs (pooling none)".into())
            }
            _ => Ok(()),
        }
    }

    pub fn causal(&self) -> bool {
        self.objective == Objective::CausalLm
    }

    pub fn mixer_options(&self) -> CatOptions {
        CatOptions {
            path: self.path,
            orientation: self.orientation,
            causal: self.causal(),
            scale_logits: self.scale_logits,
        }
    }

    /// Id of the mask token (one past the input vocabulary), if any.
    pub fn mask_token(&self) -> Option<usize> {
        match (self.objective, self.input) {
            (Objective::MaskedLm, InputKind::Tokens { vocab }) => Some(vocab),
            _ => None,
        }
    }

    fn embedding_rows(&self) -> usize {
        match self.input {
            InputKind::Tokens { vocab } => vocab + usize::from(self.mask_token().is_some()),
            InputKind::Patches { dim } => dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<P = Tensor> {
    pub ln1_g: P,
    pub ln1_b: P,
    pub mixer: MixerParams<P>,
    pub ln2_g: P,
    pub ln2_b: P,
    pub w1: P,
    pub b1: P,
    pub w2: P,
    pub b2: P,
}

impl<P> BlockParams<P> {
    fn map_named<'a, Q>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P) -> Q) -> BlockParams<Q> {
        let ln1_g = f(format!("{prefix}.ln1.gain"), &self.ln1_g);
        let ln1_b = f(format!("{prefix}.ln1.bias"), &self.ln1_b);
        let names: Vec<String> = self.mixer.named().into_iter().map(|(n, _)| n).collect();
        let mut i = 0;
        let mixer = self.mixer.map(|p| {
            let q = f(format!("{prefix}.mixer.{}", names[i]), p);
            i += 1;
            q
        });
        BlockParams {
            ln1_g,
            ln1_b,
            mixer,
            ln2_g: f(format!("{prefix}.ln2.gain"), &self.ln2_g),
            ln2_b: f(format!("{prefix}.ln2.bias"), &self.ln2_b),
            w1: f(format!("{prefix}.mlp.w1"), &self.w1),
            b1: f(format!("{prefix}.mlp.b1"), &self.b1),
            w2: f(format!("{prefix}.mlp.w2"), &self.w2),
            b2: f(format!("{prefix}.mlp.b2"), &self.b2),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<P = Tensor> {
    /// Token table (`rows × D`) or patch projection (`dim × D`).
    pub embed: P,
    /// Patch projection bias.
    pub embed_b: Option<P>,
    pub pos: Option<P>,
    pub blocks: Vec<BlockParams<P>>,
    pub lnf_g: P,
    pub lnf_b: P,
    pub head_w: P,
    pub head_b: P,
}

impl<P> ModelParams<P> {
    /// Maps every tensor with its name, in a fixed order.
    pub fn map_named<'a, Q>(&'a self, f: &mut dyn FnMut(String, &'a P) -> Q) -> ModelParams<Q> {
        let embed = f("embed".into(), &self.embed);
        let embed_b = self.embed_b.as_ref().map(|p| f("embed_b".into(), p));
        let pos = self.pos.as_ref().map(|p| f("pos".into(), p));
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| b.map_named(&format!("block{i}"), f))
            .collect();
        ModelParams {
            embed,
            embed_b,
            pos,
            blocks,
            lnf_g: f("final_ln.gain".into(), &self.lnf_g),
            lnf_b: f("final_ln.bias".into(), &self.lnf_b),
            head_w: f("head.w".into(), &self.head_w),
            head_b: f("head.b".into(), &self.head_b),
        }
    }

    pub fn named(&self) -> Vec<(String, &P)> {
        let mut out = Vec::new();
        self.map_named(&mut |n, p| out.push((n, p)));
        out
    }

    pub fn flat(&self) -> Vec<&P> {
        self.named().into_iter().map(|(_, p)| p).collect()
    }

    /// Same structure, filled from `items` in [`named`](Self::named) order.
    pub fn rebuild<Q>(&self, items: impl IntoIterator<Item = Q>) -> ModelParams<Q> {
        let mut it = items.into_iter();
        self.map_named(&mut |n, _| it.next().unwrap_or_else(|| panic!("missing tensor for {n}")))
    }
}

impl ModelParams<Tensor> {
    pub fn init(cfg: &ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        let hidden = cfg.mlp_mult * d;
        let m = |rng: &mut SeededRng, r: usize, c: usize, std: f64| -> Result<Tensor> {
            Ok(Tensor::randn(Shape::matrix(r, c)?, std, rng))
        };
        let ones = |c: usize| -> Result<Tensor> { Ok(Tensor::full(Shape::matrix(1, c)?, 1.0)) };
        let zeros = |c: usize| -> Result<Tensor> { Ok(Tensor::zeros(Shape::matrix(1, c)?)) };
        let (embed, embed_b) = match cfg.input {
            InputKind::Tokens { .. } => (m(rng, cfg.embedding_rows(), d, 0.5)?, None),
            InputKind::Patches { dim } => (m(rng, dim, d, 1.0 / (dim as f64).sqrt())?, Some(zeros(d)?)),
        };
        let pos = if cfg.positions { Some(m(rng, cfg.n_max, d, 0.5)?) } else { None };
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for &mech in &cfg.schedule {
            blocks.push(BlockParams {
                ln1_g: ones(d)?,
                ln1_b: zeros(d)?,
                mixer: MixerParams::init(mech, d, cfg.heads, cfg.n_max, rng)?,
                ln2_g: ones(d)?,
                ln2_b: zeros(d)?,
                w1: m(rng, d, hidden, 1.0 / (d as f64).sqrt())?,
                b1: zeros(hidden)?,
                w2: m(rng, hidden, d, 1.0 / (hidden as f64).sqrt())?,
                b2: zeros(d)?,
            });
        }
        Ok(ModelParams {
            embed,
            embed_b,
            pos,
            blocks,
            lnf_g: ones(d)?,
            lnf_b: zeros(d)?,
            head_w: m(rng, d, cfg.outputs, 0.02)?,
            head_b: zeros(cfg.outputs)?,
        })
    }

    pub fn num_scalars(&self) -> usize {
        self.flat().iter().map(|t| t.numel()).sum()
    }
}

/// A model input: token ids or an `N×dim` matrix of patch vectors.
#[derive(Clone, Debug, PartialEq)]
pub enum Input {
    Tokens(Vec<usize>),
    Patches(Tensor),
}

impl Input {
    pub fn len(&self) -> usize {
        match self {
            Input::Tokens(t) => t.len(),
            Input::Patches(p) => p.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One training pair. Targets are per output row; `None` rows are ignored.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub input: Input,
    pub targets: Vec<Option<usize>>,
}

/// Next-token targets: position `i < N-1` predicts token `i+1`.
pub fn causal_targets(tokens: &[usize]) -> Vec<Option<usize>> {
    (0..tokens.len())
        .map(|i| tokens.get(i + 1).copied())
        .collect()
}

/// Logits for one input, recorded on `tape`. When `trace` is given it
/// receives the mixer input (the first layer norm's output) of every block.
pub fn forward_tape(
    tape: &Tape,
    cfg: &ModelConfig,
    p: &ModelParams<Var>,
    input: &Input,
    mut trace: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let n = input.len();
    if n == 0 || n > cfg.n_max {
        return Err(Error::invalid(format!(
            "input length {n} outside 1..={}",
            cfg.n_max
        )));
    }
    let mut x = match (input, cfg.input) {
        (Input::Tokens(ids), InputKind::Tokens { .. }) => {
            let rows = cfg.embedding_rows();
            if let Some(&bad) = ids.iter().find(|&&t| t >= rows) {
                return Err(Error::invalid(format!("unknown token id {bad} (table has {rows})")));
            }
            tape.gather_rows(p.embed, ids)?
        }
        (Input::Patches(patches), InputKind::Patches { .. }) => {
            let xp = tape.constant(patches.clone());
            let e = tape.matmul(xp, p.embed)?;
            match p.embed_b {
                Some(b) => tape.add_row(e, b)?,
                None => e,
            }
        }
        _ => return Err(Error::invalid("input kind does not match the model")),
    };
    if let Some(pos) = p.pos {
        let ids: Vec<usize> = (0..n).collect();
        x = tape.add(x, tape.gather_rows(pos, &ids)?)?;
    }
    let opts = cfg.mixer_options();
    for b in &p.blocks {
        let a = tape.layer_norm(x, b.ln1_g, b.ln1_b, LN_EPS)?;
        if let Some(t) = trace.as_deref_mut() {
            t.push(a);
        }
        x = tape.add(x, tape.mixer(a, &b.mixer, &opts)?)?;
        let hdn = tape.layer_norm(x, b.ln2_g, b.ln2_b, LN_EPS)?;
        let hdn = tape.gelu(tape.add_row(tape.matmul(hdn, b.w1)?, b.b1)?)?;
        let hdn = tape.add_row(tape.matmul(hdn, b.w2)?, b.b2)?;
        x = tape.add(x, hdn)?;
    }
    let x = tape.layer_norm(x, p.lnf_g, p.lnf_b, LN_EPS)?;
    let pooled = match cfg.pooling {
        Pooling::Token => tape.gather_rows(x, &[0])?,
        Pooling::Avg => tape.mean_rows(x)?,
        Pooling::None => x,
    };
    tape.add_row(tape.matmul(pooled, p.head_w)?, p.head_b)
}

/// Mean cross-entropy over the rows that carry a target.
pub fn example_loss(tape: &Tape, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
    let count = targets.iter().flatten().count();
    if count == 0 {
        return Err(Error::invalid("loss: empty target set"));
    }
    tape.cross_entropy(logits, targets, 1.0 / count as f64)
}

/// Value-level mean cross-entropy.
pub fn loss(logits: &Tensor, targets: &[Option<usize>]) -> Result<f64> {
    let tape = Tape::new();
    let l = tape.constant(logits.clone());
    Ok(tape.value(example_loss(&tape, l, targets)?).item())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams<Tensor>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = SeededRng::new(seed);
        let params = ModelParams::init(&config, &mut rng)?;
        Ok(Self { config, params })
    }

    fn constants(&self, tape: &Tape) -> ModelParams<Var> {
        self.params.rebuild(self.params.flat().into_iter().map(|t| tape.constant(t.clone())))
    }

    pub fn forward(&self, input: &Input) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.constants(&tape);
        let out = forward_tape(&tape, &self.config, &p, input, None)?;
        Ok(tape.value(out))
    }

    pub fn loss(&self, ex: &Example) -> Result<f64> {
        loss(&self.forward(&ex.input)?, &ex.targets)
    }

    pub fn mean_loss(&self, examples: &[Example]) -> Result<f64> {
        if examples.is_empty() {
            return Err(Error::invalid("mean_loss: no examples"));
        }
        let mut total = 0.0;
        for ex in examples {
            total += self.loss(ex)?;
        }
        Ok(total / examples.len() as f64)
    }

    /// Loss and gradients for every parameter, in [`ModelParams::flat`] order.
    pub fn gradients(&self, ex: &Example) -> Result<(f64, Vec<Tensor>)> {
        let tape = Tape::new();
        let p = self.params.rebuild(self.params.flat().into_iter().map(|t| tape.leaf(t.clone())));
        let logits = forward_tape(&tape, &self.config, &p, &ex.input, None)?;
        let l = example_loss(&tape, logits, &ex.targets)?;
        let grads = tape.backward(l)?;
        let g = p.flat().into_iter().map(|v| grads.get(*v).clone()).collect();
        Ok((tape.value(l).item(), g))
    }

    /// Inputs to each block's mixer.
    pub fn mixer_inputs(&self, input: &Input) -> Result<Vec<Tensor>> {
        let tape = Tape::new();
        let p = self.constants(&tape);
        let mut trace = Vec::new();
        forward_tape(&tape, &self.config, &p, input, Some(&mut trace))?;
        Ok(trace.into_iter().map(|v| tape.value(v)).collect())
    }

    /// Mixing matrices, indexed `[layer][head]`.
    pub fn attention_maps(&self, input: &Input) -> Result<Vec<Vec<Tensor>>> {
        let opts = self.config.mixer_options();
        self.mixer_inputs(input)?
            .iter()
            .zip(&self.params.blocks)
            .map(|(x, b)| crate::variants::mixer_maps(x, &b.mixer, &opts))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            max_grad_norm: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptState {
    pub fn new(params: &[&Tensor]) -> Self {
        let z: Vec<Tensor> = params.iter().map(|t| t.zeros_like()).collect();
        Self {
            m: z.clone(),
            v: z,
            step: 0,
        }
    }
}

impl AdamW {
    /// One update in place. Returns the gradient norm before clipping.
    pub fn update(&self, state: &mut OptState, params: &mut [Tensor], grads: &[Tensor]) -> Result<f64> {
        if params.len() != grads.len() || params.len() != state.m.len() {
            return Err(Error::invalid("optimizer: parameter/gradient count mismatch"));
        }
        let norm = grads
            .iter()
            .flat_map(|g| g.data().iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite { op: "gradient norm" });
        }
        let clip = match self.max_grad_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let p = params[i].data();
            let g = grads[i].data();
            let (m, v) = (state.m[i].data(), state.v[i].data());
            let mut np = Vec::with_capacity(p.len());
            let mut nm = Vec::with_capacity(p.len());
            let mut nv = Vec::with_capacity(p.len());
            for k in 0..p.len() {
                let gk = g[k] * clip;
                let mk = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                let vk = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let step = (mk / bc1) / ((vk / bc2).sqrt() + self.eps);
                np.push(p[k] - self.lr * (step + self.weight_decay * p[k]));
                nm.push(mk);
                nv.push(vk);
            }
            let shape = params[i].shape().clone();
            params[i] = Tensor::new(shape.clone(), np)?;
            state.m[i] = Tensor::new(shape.clone(), nm)?;
            state.v[i] = Tensor::new(shape, nv)?;
        }
        Ok(norm)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub opt: OptState,
    pub seed: u64,
}

impl TrainState {
    pub fn new(model: Model, seed: u64) -> Self {
        let opt = OptState::new(&model.params.flat());
        Self { model, opt, seed }
    }

    pub fn step(&self) -> u64 {
        self.opt.step
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
}

/// Mean loss over `batch`, then one AdamW update. On a non-finite loss or
/// gradient the state is left untouched.
pub fn train_step(state: &mut TrainState, batch: &[Example], hp: &AdamW) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::invalid("train_step: empty batch"));
    }
    let mut total = 0.0;
    let mut acc: Option<Vec<Vec<f64>>> = None;
    for ex in batch {
        let (l, grads) = state.model.gradients(ex)?;
        if !l.is_finite() {
            return Err(Error::NonFinite { op: "loss" });
        }
        total += l;
        match &mut acc {
            None => acc = Some(grads.iter().map(|g| g.to_vec()).collect()),
            Some(a) => {
                for (dst, g) in a.iter_mut().zip(&grads) {
                    for (x, &y) in dst.iter_mut().zip(g.data()) {
                        *x += y;
                    }
                }
            }
        }
    }
    let inv = 1.0 / batch.len() as f64;
    let shapes: Vec<Shape> = state.model.params.flat().iter().map(|t| t.shape().clone()).collect();
    let grads = acc
        .expect("non-empty batch")
        .into_iter()
        .zip(shapes)
        .map(|(g, s)| Tensor::new(s, g.into_iter().map(|x| x * inv).collect()))
        .collect::<Result<Vec<_>>>()?;
    let mut params: Vec<Tensor> = state.model.params.flat().into_iter().cloned().collect();
    let mut opt = state.opt.clone();
    let grad_norm = hp.update(&mut opt, &mut params, &grads)?;
    state.model.params = state.model.params.rebuild(params);
    state.opt = opt;
    Ok(StepStats {
        loss: total * inv,
        grad_norm,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// A random string of length `ceil(N/2)` written twice; masked positions
    /// must be recovered from the other copy.
    MaskedCopy,
    /// A fixed random base pattern rolled by a random offset, with token
    /// noise; the label is the offset.
    CyclicShiftDetect,
    /// Sequences from a fixed sparse Markov chain; next-token prediction.
    CharLm,
    /// Patch vectors drawn around per-class means; the label is the class.
    SyntheticClassify,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::MaskedCopy => "masked_copy",
            TaskKind::CyclicShiftDetect => "cyclic_shift_detect",
            TaskKind::CharLm => "char_lm",
            TaskKind::SyntheticClassify => "synthetic_classify",
        })
    }
}

impl FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "masked_copy" => Ok(TaskKind::MaskedCopy),
            "cyclic_shift_detect" => Ok(TaskKind::CyclicShiftDetect),
            "char_lm" => Ok(TaskKind::CharLm),
            "synthetic_classify" => Ok(TaskKind::SyntheticClassify),
            _ => Err(Error::invalid(format!("unknown task '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub n: usize,
    /// Token vocabulary (token tasks).
    pub vocab: usize,
    /// Class count (`synthetic_classify`).
    pub classes: usize,
    /// Patch width (`synthetic_classify`).
    pub patch_dim: usize,
    pub mask_probability: f64,
    /// Token replacement rate, or patch noise std.
    pub noise: f64,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, n: usize, vocab: usize) -> Self {
        Self {
            kind,
            n,
            vocab,
            classes: 4,
            patch_dim: 8,
            mask_probability: 0.15,
            noise: match kind {
                TaskKind::SyntheticClassify => 1.0,
                _ => 0.1,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.vocab == 0 || self.classes == 0 || self.patch_dim == 0 {
            return Err(Error::invalid("task sizes must be positive"));
        }
        if !(self.mask_probability > 0.0 && self.mask_probability < 1.0) {
            return Err(Error::invalid("mask probability must be in (0, 1)"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::invalid("noise must be finite and nonnegative"));
        }
        Ok(())
    }

    pub fn objective(&self) -> Objective {
        match self.kind {
            TaskKind::MaskedCopy => Objective::MaskedLm,
            TaskKind::CharLm => Objective::CausalLm,
            _ => Objective::Classification,
        }
    }

    pub fn input_kind(&self) -> InputKind {
        match self.kind {
            TaskKind::SyntheticClassify => InputKind::Patches { dim: self.patch_dim },
            _ => InputKind::Tokens { vocab: self.vocab },
        }
    }

    pub fn outputs(&self) -> usize {
        match self.kind {
            TaskKind::MaskedCopy | TaskKind::CharLm => self.vocab,
            TaskKind::CyclicShiftDetect => self.n,
            TaskKind::SyntheticClassify => self.classes,
        }
    }

    pub fn model_config(&self, schedule: Vec<Mechanism>, d: usize, heads: usize) -> ModelConfig {
        let mut cfg = ModelConfig::new(schedule, d, heads, self.n, self.objective(), self.input_kind(), self.outputs());
        cfg.mask_probability = self.mask_probability;
        cfg
    }
}

#[derive(Clone, Debug)]
enum TaskAux {
    None,
    Base(Vec<usize>),
    /// Per state: successors and cumulative probabilities.
    Chain(Vec<[(usize, f64); 3]>),
    Means(Vec<Vec<f64>>),
}

/// Endless deterministic stream of examples. The task's fixed structure
/// (base pattern, chain, class means) comes from the task seed; the stream
/// can be re-seeded independently, e.g. for a held-out set.
#[derive(Clone, Debug)]
pub struct TaskSampler {
    spec: TaskSpec,
    aux: TaskAux,
    rng: SeededRng,
}

impl TaskSampler {
    pub fn new(spec: TaskSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = SeededRng::new(seed);
        let aux = match spec.kind {
            TaskKind::MaskedCopy => TaskAux::None,
            TaskKind::CyclicShiftDetect => TaskAux::Base((0..spec.n).map(|_| rng.below(spec.vocab)).collect()),
            TaskKind::CharLm => TaskAux::Chain(
                (0..spec.vocab)
                    .map(|_| {
                        let a = rng.below(spec.vocab);
                        let b = rng.below(spec.vocab);
                        let c = rng.below(spec.vocab);
                        [(a, 0.7), (b, 0.9), (c, 1.0)]
                    })
                    .collect(),
            ),
            TaskKind::SyntheticClassify => TaskAux::Means(
                (0..spec.classes)
                    .map(|_| (0..spec.patch_dim).map(|_| rng.normal()).collect())
                    .collect(),
            ),
        };
        let stream = rng.fork();
        Ok(Self { spec, aux, rng: stream })
    }

    /// Same task, independent example stream.
    pub fn with_stream(&self, seed: u64) -> Self {
        Self {
            spec: self.spec.clone(),
            aux: self.aux.clone(),
            rng: SeededRng::new(seed),
        }
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn sample(&mut self) -> Example {
        let s = &self.spec;
        let rng = &mut self.rng;
        match (&self.aux, s.kind) {
            (TaskAux::None, _) => {
                let half = s.n.div_ceil(2);
                let base: Vec<usize> = (0..half).map(|_| rng.below(s.vocab)).collect();
                let tokens: Vec<usize> = (0..s.n).map(|i| base[i % half]).collect();
                let mut masked: Vec<bool> = (0..s.n).map(|_| rng.bernoulli(s.mask_probability)).collect();
                if !masked.iter().any(|&m| m) {
                    masked[rng.below(s.n)] = true;
                }
                let input = tokens
                    .iter()
                    .zip(&masked)
                    .map(|(&t, &m)| if m { s.vocab } else { t })
                    .collect();
                let targets = tokens
                    .iter()
                    .zip(&masked)
                    .map(|(&t, &m)| m.then_some(t))
                    .collect();
                Example {
                    input: Input::Tokens(input),
                    targets,
                }
            }
            (TaskAux::Base(base), _) => {
                let shift = rng.below(s.n);
                let tokens = (0..s.n)
                    .map(|i| {
                        let t = base[(i + s.n - shift) % s.n];
                        if rng.bernoulli(s.noise) {
                            rng.below(s.vocab)
                        } else {
                            t
                        }
                    })
                    .collect();
                Example {
                    input: Input::Tokens(tokens),
                    targets: vec![Some(shift)],
                }
            }
            (TaskAux::Chain(chain), _) => {
                let mut tokens = Vec::with_capacity(s.n);
                let mut state = rng.below(s.vocab);
                tokens.push(state);
                for _ in 1..s.n {
                    let u = rng.uniform();
                    state = chain[state].iter().find(|(_, c)| u < *c).map_or(chain[state][2].0, |e| e.0);
                    tokens.push(state);
                }
                let targets = causal_targets(&tokens);
                Example {
                    input: Input::Tokens(tokens),
                    targets,
                }
            }
            (TaskAux::Means(means), _) => {
                let c = rng.below(s.classes);
                let data = (0..s.n)
                    .flat_map(|_| means[c].clone())
                    .map(|mu| mu + s.noise * rng.normal())
                    .collect();
                let patches = Tensor::matrix(s.n, s.patch_dim, data).expect("finite patches");
                Example {
                    input: Input::Patches(patches),
                    targets: vec![Some(c)],
                }
            }
        }
    }

    pub fn take(&mut self, count: usize) -> Vec<Example> {
        (0..count).map(|_| self.sample()).collect()
    }
}

pub fn make_toy_task(spec: &TaskSpec, seed: u64, count: usize) -> Result<Vec<Example>> {
    Ok(TaskSampler::new(spec.clone(), seed)?.take(count))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub task: TaskKind,
    /// `attention`, `cat`, `cat_alter`, or any other layer mechanism.
    pub mixer: Mechanism,
    pub layers: usize,
    pub d: usize,
    pub heads: usize,
    pub n: usize,
    pub vocab: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub max_grad_norm: Option<f64>,
    pub seed: u64,
    pub log_every: usize,
    pub eval_size: usize,
    pub path: ExecPath,
    pub orientation: Orientation,
    pub positions: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::MaskedCopy,
            mixer: Mechanism::Cat,
            layers: 2,
            d: 32,
            heads: 4,
            n: 32,
            vocab: 16,
            steps: 2000,
            batch: 8,
            lr: 3e-3,
            weight_decay: 0.0,
            max_grad_norm: Some(1.0),
            seed: 42,
            log_every: 100,
            eval_size: 64,
            path: ExecPath::Fft,
            orientation: Orientation::ColShift,
            positions: true,
        }
    }
}

impl TrainConfig {
    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec::new(self.task, self.n, self.vocab)
    }

    pub fn model_config(&self) -> ModelConfig {
        let mut cfg = self
            .task_spec()
            .model_config(schedule_for(self.mixer, self.layers), self.d, self.heads);
        cfg.path = self.path;
        cfg.orientation = self.orientation;
        cfg.positions = self.positions;
        cfg
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            lr: self.lr,
            weight_decay: self.weight_decay,
            max_grad_norm: self.max_grad_norm,
            ..AdamW::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TrainLog {
    pub step: u64,
    pub train_loss: f64,
    pub eval_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub initial_eval_loss: f64,
    pub final_eval_loss: f64,
    pub last_train_loss: Option<f64>,
    pub log: Vec<TrainLog>,
}

const EVAL_STREAM: u64 = 0x5eed_e7a1;

/// Trains a fresh model on a synthetic task. The held-out set uses its own
/// example stream. `on_log` sees every `log_every`-th step and the last one.
pub fn train_toy(cfg: &TrainConfig, mut on_log: impl FnMut(&TrainLog)) -> Result<TrainOutcome> {
    if cfg.batch == 0 || cfg.eval_size == 0 {
        return Err(Error::invalid("batch and eval_size must be positive"));
    }
    let model = Model::new(cfg.model_config(), cfg.seed)?;
    let mut sampler = TaskSampler::new(cfg.task_spec(), cfg.seed)?;
    let eval = sampler.with_stream(cfg.seed ^ EVAL_STREAM).take(cfg.eval_size);
    let hp = cfg.optimizer();
    let mut state = TrainState::new(model, cfg.seed);
    let initial_eval_loss = state.model.mean_loss(&eval)?;
    let mut log = Vec::new();
    let mut last = None;
    for step in 1..=cfg.steps {
        let batch = sampler.take(cfg.batch);
        let stats = train_step(&mut state, &batch, &hp).map_err(|e| match e {
            Error::NonFinite { .. } => Error::Invalid(format!(
                "training diverged at step {step}; last good step {}",
                step - 1
            )),
            other => other,
        })?;
        last = Some(stats.loss);
        let is_log = cfg.log_every > 0 && step % cfg.log_every == 0;
        if is_log || step == cfg.steps {
            let entry = TrainLog {
                step: step as u64,
                train_loss: stats.loss,
                eval_loss: Some(state.model.mean_loss(&eval)?),
            };
            on_log(&entry);
            log.push(entry);
        }
    }
    let final_eval_loss = match log.last() {
        Some(TrainLog { eval_loss: Some(l), .. }) => *l,
        _ => initial_eval_loss,
    };
    Ok(TrainOutcome {
        state,
        initial_eval_loss,
        final_eval_loss,
        last_train_loss: last,
        log,
    })
}

pub const STATE_FORMAT: &str = "circat-train-state";

/// Training-state sidecar stored next to a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub step: u64,
    pub seed: u64,
    pub config: ModelConfig,
    /// Names of the parameter tensors, in optimizer order.
    pub params: Vec<String>,
    /// Names of the first- and second-moment tensors.
    pub moments: Vec<String>,
    /// Free-form echo of the run settings.
    #[serde(default)]
    pub run: serde_json::Value,
}

pub fn state_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".state.json");
    PathBuf::from(s)
}

pub fn save_checkpoint(path: &Path, state: &TrainState, run: serde_json::Value) -> Result<()> {
    let named = state.model.params.named();
    let mut tensors = Vec::with_capacity(3 * named.len());
    let mut params = Vec::with_capacity(named.len());
    let mut moments = Vec::with_capacity(2 * named.len());
    for (name, t) in &named {
        tensors.push((format!("param.{name}"), (*t).clone()));
        params.push(format!("param.{name}"));
    }
    for (k, (name, _)) in named.iter().enumerate() {
        tensors.push((format!("adam.m.{name}"), state.opt.m[k].clone()));
        tensors.push((format!("adam.v.{name}"), state.opt.v[k].clone()));
        moments.push(format!("adam.m.{name}"));
        moments.push(format!("adam.v.{name}"));
    }
    write_container(path, &tensors)?;
    let meta = CheckpointMeta {
        format: STATE_FORMAT.to_string(),
        step: state.opt.step,
        seed: state.seed,
        config: state.model.config.clone(),
        params,
        moments,
        run,
    };
    let side = state_path(path);
    fs::write(&side, serde_json::to_string_pretty(&meta)? + "\n").map_err(|e| Error::io(&side, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(TrainState, CheckpointMeta)> {
    let side = state_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    if meta.format != STATE_FORMAT {
        return Err(Error::invalid(format!("{}: not a training state", side.display())));
    }
    let mut stored: std::collections::HashMap<String, Tensor> = read_container(path)?.into_iter().collect();
    let template = ModelParams::init(&meta.config, &mut SeededRng::new(0))?;
    let mut take = |name: String, like: &Tensor| -> Result<Tensor> {
        let t = stored
            .remove(&name)
            .ok_or_else(|| Error::invalid(format!("checkpoint is missing '{name}'")))?;
        if t.shape() != like.shape() {
            return Err(Error::ShapeMismatch {
                op: "load_checkpoint",
                lhs: like.shape().clone(),
                rhs: t.shape().clone(),
            });
        }
        Ok(t)
    };
    let named = template.named();
    let mut params = Vec::with_capacity(named.len());
    let mut m = Vec::with_capacity(named.len());
    let mut v = Vec::with_capacity(named.len());
    for (name, like) in &named {
        params.push(take(format!("param.{name}"), like)?);
        m.push(take(format!("adam.m.{name}"), like)?);
        v.push(take(format!("adam.v.{name}"), like)?);
    }
    let model = Model {
        config: meta.config.clone(),
        params: template.rebuild(params),
    };
    let state = TrainState {
        model,
        opt: OptState { m, v, step: meta.step },
        seed: meta.seed,
    };
    Ok((state, meta))
}
