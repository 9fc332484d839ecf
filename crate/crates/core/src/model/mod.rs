//! Hierarchical encoder and the four prediction heads.
//!
//! A word-level Bi-GRU (shared by context and history turns) turns each turn
//! into `h = [fwd_last; bwd_first]`. History turns feed a second Bi-GRU whose
//! final states initialize both directions of the target turn through
//! `tanh(W_0 h_hist + b_0)`. A conversation-level Bi-GRU yields `r_j`, which
//! attention pools into `r`. The main, SP and RT heads read `[r; h_m]`; the TA
//! head scores `sigmoid(h_j · h_m)` for every earlier turn.

mod checkpoint;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Instance, Vocabulary};
use crate::numerics::{GruCell, ParamId, ParamStore, Tape, Tensor, Var};
use crate::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader, ParamEntry};

/// What the attention layer scores and pools.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionOver {
    /// Raw turn vectors `h_j`.
    Turn,
    /// Conversation-encoder outputs `r_j`.
    #[default]
    Conv,
}

impl FromStr for AttentionOver {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "turn" => Ok(AttentionOver::Turn),
            "conv" => Ok(AttentionOver::Conv),
            other => Err(Error::Config(format!(
                "attention_over must be turn or conv, got {other:?}"
            ))),
        }
    }
}

impl fmt::Display for AttentionOver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionOver::Turn => "turn",
            AttentionOver::Conv => "conv",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Per direction.
    pub hidden_dim: usize,
    pub dropout: f64,
    pub history_cap: usize,
    pub use_history: bool,
    pub use_attention: bool,
    pub attention_over: AttentionOver,
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            embed_dim: 200,
            hidden_dim: 200,
            dropout: 0.2,
            history_cap: 10,
            use_history: true,
            use_attention: true,
            attention_over: AttentionOver::Conv,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config(format!(
                "model dims must be positive (vocab {}, embed {}, hidden {})",
                self.vocab_size, self.embed_dim, self.hidden_dim
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Width of a turn vector, `h_j` and `r_j` alike.
    pub fn turn_dim(&self) -> usize {
        2 * self.hidden_dim
    }
}

/// A forward and a backward GRU over the same sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BiGru {
    pub fwd: GruCell,
    pub bwd: GruCell,
}

impl BiGru {
    fn register(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        BiGru {
            fwd: GruCell::register(store, &format!("{prefix}.fwd"), input, hidden, rng),
            bwd: GruCell::register(store, &format!("{prefix}.bwd"), input, hidden, rng),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.fwd
            .params()
            .into_iter()
            .chain(self.bwd.params())
            .collect()
    }
}

/// Handles of every learnable tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelParams {
    pub embedding: ParamId,
    pub word: BiGru,
    pub history: BiGru,
    pub init_w: ParamId,
    pub init_b: ParamId,
    pub conv: BiGru,
    pub att_w: ParamId,
    pub att_b: ParamId,
    pub main_v: ParamId,
    pub main_b: ParamId,
    pub sp_v: ParamId,
    pub sp_b: ParamId,
    pub rt_v: ParamId,
    pub rt_b: ParamId,
}

impl ModelParams {
    /// Parameters of the main prediction layer.
    pub fn main_head(&self) -> [ParamId; 2] {
        [self.main_v, self.main_b]
    }

    pub fn sp_head(&self) -> [ParamId; 2] {
        [self.sp_v, self.sp_b]
    }

    pub fn rt_head(&self) -> [ParamId; 2] {
        [self.rt_v, self.rt_b]
    }

    /// Everything outside the three output layers.
    pub fn shared(&self) -> Vec<ParamId> {
        let mut out = vec![
            self.embedding,
            self.init_w,
            self.init_b,
            self.att_w,
            self.att_b,
        ];
        out.extend(self.word.params());
        out.extend(self.history.params());
        out.extend(self.conv.params());
        out
    }
}

/// An instance mapped to vocabulary indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedInstance {
    pub conv_id: String,
    pub position: usize,
    pub pattern: String,
    pub context: Vec<Vec<usize>>,
    pub history: Vec<Vec<usize>>,
    pub y_main: bool,
    pub y_sp: bool,
    pub y_rt: bool,
    pub y_ta: Vec<bool>,
}

impl EncodedInstance {
    pub fn new(inst: &Instance, vocab: &Vocabulary) -> Self {
        EncodedInstance {
            conv_id: inst.conv_id.clone(),
            position: inst.position,
            pattern: inst.pattern().as_str().to_string(),
            context: inst
                .context
                .iter()
                .map(|t| vocab.encode(&t.tokens))
                .collect(),
            history: inst
                .history
                .turns
                .iter()
                .map(|t| vocab.encode(&t.tokens))
                .collect(),
            y_main: inst.y_main,
            y_sp: inst.y_sp,
            y_rt: inst.y_rt,
            y_ta: inst.y_ta.clone(),
        }
    }

    pub fn num_turns(&self) -> usize {
        self.context.len()
    }
}

pub fn encode_instances(instances: &[Instance], vocab: &Vocabulary) -> Vec<EncodedInstance> {
    instances
        .iter()
        .map(|i| EncodedInstance::new(i, vocab))
        .collect()
}

/// Tape handles produced by [`Model::forward`].
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub turns: Vec<Var>,
    pub conv: Vec<Var>,
    pub attention: Var,
    pub pooled: Var,
    pub main: Var,
    pub sp: Var,
    pub rt: Var,
    pub ta: Vec<Var>,
}

/// Plain values of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutputs {
    pub y_main: f64,
    pub y_sp: f64,
    pub y_rt: f64,
    pub y_ta: Vec<f64>,
    pub attention: Vec<f64>,
    pub turn_vectors: Vec<Vec<f64>>,
    pub pooled: Vec<f64>,
}

impl ForwardOutputs {
    pub fn read(tape: &Tape<'_>, vars: &ForwardVars) -> Self {
        ForwardOutputs {
            y_main: tape.scalar(vars.main),
            y_sp: tape.scalar(vars.sp),
            y_rt: tape.scalar(vars.rt),
            y_ta: vars.ta.iter().map(|v| tape.scalar(*v)).collect(),
            attention: tape.value(vars.attention).to_vec(),
            turn_vectors: vars.turns.iter().map(|v| tape.value(*v).to_vec()).collect(),
            pooled: tape.value(vars.pooled).to_vec(),
        }
    }
}

/// Configuration, parameter handles and the parameter values.
///
/// The forward methods read values through the tape's store, so a tape over
/// a perturbed copy of `store` (same layout) evaluates the perturbed model.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub store: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (v, e, h) = (config.vocab_size, config.embed_dim, config.hidden_dim);
        let d = 2 * h;
        let linear = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();

        let mut emb = Tensor::uniform(&[v, e], 0.1, &mut rng);
        emb.row_mut(Vocabulary::PAD).fill(0.0);
        let embedding = store.add_row_sparse("embedding", emb);
        let word = BiGru::register(&mut store, "word", e, h, &mut rng);
        let history = BiGru::register(&mut store, "history", d, h, &mut rng);
        let init_w = store.add("init.w", Tensor::uniform(&[h, d], linear(d), &mut rng));
        let init_b = store.add("init.b", Tensor::zeros(&[h]));
        let conv = BiGru::register(&mut store, "conv", d, h, &mut rng);
        let att_w = store.add("att.w", Tensor::uniform(&[1, d], linear(d), &mut rng));
        let att_b = store.add("att.b", Tensor::zeros(&[1]));
        let mut head = |name: &str| {
            let w = store.add(
                format!("{name}.v"),
                Tensor::uniform(&[1, 2 * d], linear(2 * d), &mut rng),
            );
            let b = store.add(format!("{name}.b"), Tensor::zeros(&[1]));
            (w, b)
        };
        let (main_v, main_b) = head("main");
        let (sp_v, sp_b) = head("sp");
        let (rt_v, rt_b) = head("rt");

        Ok(Model {
            config,
            params: ModelParams {
                embedding,
                word,
                history,
                init_w,
                init_b,
                conv,
                att_w,
                att_b,
                main_v,
                main_b,
                sp_v,
                sp_b,
                rt_v,
                rt_b,
            },
            store,
        })
    }

    /// Word-level Bi-GRU over one turn. `init` seeds both directions.
    pub fn encode_turn(
        &self,
        tape: &mut Tape<'_>,
        tokens: &[usize],
        init: Option<Var>,
    ) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::InvalidInput("cannot encode an empty turn".into()));
        }
        let xs = tokens
            .iter()
            .map(|&t| tape.embed(self.params.embedding, t))
            .collect::<Result<Vec<_>>>()?;
        let (fwd, bwd) = run_bigru(tape, &self.params.word, &xs, init)?;
        Ok(tape.concat(&[*fwd.last().unwrap(), bwd[0]]))
    }

    /// `None` for an empty history (the zero vector).
    pub fn encode_history(
        &self,
        tape: &mut Tape<'_>,
        history: &[Vec<usize>],
    ) -> Result<Option<Var>> {
        if history.is_empty() {
            return Ok(None);
        }
        let turns = history
            .iter()
            .map(|t| self.encode_turn(tape, t, None))
            .collect::<Result<Vec<_>>>()?;
        let (fwd, bwd) = run_bigru(tape, &self.params.history, &turns, None)?;
        Ok(Some(tape.concat(&[*fwd.last().unwrap(), bwd[0]])))
    }

    /// `tanh(W_0 h_hist + b_0)`, with `h_hist = 0` when absent.
    pub fn init_target_turn(&self, tape: &mut Tape<'_>, h_hist: Option<Var>) -> Result<Var> {
        let h = match h_hist {
            Some(h) => h,
            None => tape.zeros(self.config.turn_dim()),
        };
        let a = tape.affine(self.params.init_w, Some(self.params.init_b), h)?;
        Ok(tape.tanh(a))
    }

    /// `r_j = [fwd_j; bwd_j]` over the turn vectors.
    pub fn encode_conversation(&self, tape: &mut Tape<'_>, turns: &[Var]) -> Result<Vec<Var>> {
        if turns.is_empty() {
            return Err(Error::InvalidInput("conversation has no turns".into()));
        }
        let (fwd, bwd) = run_bigru(tape, &self.params.conv, turns, None)?;
        Ok(fwd
            .into_iter()
            .zip(bwd)
            .map(|(f, b)| tape.concat(&[f, b]))
            .collect())
    }

    /// Softmax attention over `keys`, returning the weights and the weighted
    /// sum of `values`.
    pub fn attention_pool(
        &self,
        tape: &mut Tape<'_>,
        keys: &[Var],
        values: &[Var],
    ) -> Result<(Var, Var)> {
        if keys.is_empty() || keys.len() != values.len() {
            return Err(Error::Shape(format!(
                "attention over {} keys and {} values",
                keys.len(),
                values.len()
            )));
        }
        let weights = if self.config.use_attention {
            let scores = keys
                .iter()
                .map(|k| tape.affine(self.params.att_w, Some(self.params.att_b), *k))
                .collect::<Result<Vec<_>>>()?;
            let s = tape.concat(&scores);
            tape.softmax(s)?
        } else {
            tape.constant(vec![1.0 / keys.len() as f64; keys.len()])
        };
        let pooled = tape.weighted_sum(weights, values)?;
        Ok((weights, pooled))
    }

    /// Records the whole model for one instance. Dropout is active iff
    /// `dropout` carries a generator.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        inst: &EncodedInstance,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardVars> {
        let m = inst.num_turns();
        if m < 2 {
            return Err(Error::InvalidInput(format!(
                "instance {}@{} has {m} context turn(s); need at least 2",
                inst.conv_id, inst.position
            )));
        }
        let init = if self.config.use_history {
            let h_hist = self.encode_history(tape, &inst.history)?;
            Some(self.init_target_turn(tape, h_hist)?)
        } else {
            None
        };
        let mut turns = Vec::with_capacity(m);
        for (j, tokens) in inst.context.iter().enumerate() {
            let init = if j + 1 == m { init } else { None };
            turns.push(self.encode_turn(tape, tokens, init)?);
        }
        let h_m = turns[m - 1];

        let p = self.config.dropout;
        let dropped = turns
            .iter()
            .map(|t| apply_dropout(tape, *t, p, dropout.as_deref_mut()))
            .collect::<Result<Vec<_>>>()?;
        let conv = self.encode_conversation(tape, &dropped)?;
        let (attention, pooled) = match self.config.attention_over {
            AttentionOver::Conv => self.attention_pool(tape, &conv, &conv)?,
            AttentionOver::Turn => self.attention_pool(tape, &dropped, &dropped)?,
        };

        let feat = tape.concat(&[pooled, h_m]);
        let feat = apply_dropout(tape, feat, p, dropout)?;
        let mut head = |v: ParamId, b: ParamId| -> Result<Var> {
            let logit = tape.affine(v, Some(b), feat)?;
            Ok(tape.sigmoid(logit))
        };
        let main = head(self.params.main_v, self.params.main_b)?;
        let sp = head(self.params.sp_v, self.params.sp_b)?;
        let rt = head(self.params.rt_v, self.params.rt_b)?;
        let ta = turns[..m - 1]
            .iter()
            .map(|h_j| {
                let s = tape.dot(*h_j, h_m)?;
                Ok(tape.sigmoid(s))
            })
            .collect::<Result<Vec<_>>>()?;

        Ok(ForwardVars {
            turns,
            conv,
            attention,
            pooled,
            main,
            sp,
            rt,
            ta,
        })
    }

    /// Eval-mode forward pass.
    pub fn predict(&self, inst: &EncodedInstance) -> Result<ForwardOutputs> {
        let mut tape = Tape::new(&self.store);
        let vars = self.forward(&mut tape, inst, None)?;
        Ok(ForwardOutputs::read(&tape, &vars))
    }

    /// Eval-mode main-task probabilities, computed in parallel.
    pub fn predict_main(&self, instances: &[EncodedInstance]) -> Result<Vec<f64>> {
        use rayon::prelude::*;
        instances
            .par_iter()
            .map(|i| self.predict(i).map(|o| o.y_main))
            .collect()
    }
}

fn run_bigru(
    tape: &mut Tape<'_>,
    cells: &BiGru,
    xs: &[Var],
    init: Option<Var>,
) -> Result<(Vec<Var>, Vec<Var>)> {
    let h0 = |tape: &mut Tape<'_>| match init {
        Some(v) => v,
        None => tape.zeros(cells.fwd.hidden_dim),
    };
    let mut h = h0(tape);
    let mut fwd = Vec::with_capacity(xs.len());
    for x in xs {
        h = tape.gru(&cells.fwd, *x, h)?;
        fwd.push(h);
    }
    let mut h = h0(tape);
    let mut bwd = vec![h; xs.len()];
    for (i, x) in xs.iter().enumerate().rev() {
        h = tape.gru(&cells.bwd, *x, h)?;
        bwd[i] = h;
    }
    Ok((fwd, bwd))
}

/// Inverted dropout; identity without a generator or at rate 0.
fn apply_dropout(tape: &mut Tape<'_>, x: Var, p: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
    let Some(rng) = rng else { return Ok(x) };
    if p == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - p);
    let mask = (0..tape.value(x).len())
        .map(|_| if rng.gen_bool(1.0 - p) { keep } else { 0.0 })
        .collect();
    tape.mask(x, mask)
}
