//! Neural parameterization of factored grammars.
//!
//! Binary factors come from three two-layer heads over a shared symbol
//! embedding matrix `E_s` (`m x k`):
//!
//! ```text
//! Ũ = ReLU(E_s[0:n] M_u1 + b_u1) M_u2 + b_u2      softmax over each row
//! Ṽ = ReLU(E_s M_v1 + b_v1) M_v2 + b_v2            softmax over each column
//! W̃ = ReLU(E_s M_w1 + b_w1) M_w2 + b_w2            softmax over each column
//! ```
//!
//! Emissions and start rules score output embeddings against an encoded
//! query embedding: `Q[T, w] ∝ exp(u_w · f_t(w_T) + b_w)` and
//! `r[A] ∝ exp(u_A · f_s(w_S) + b_A)`, where `f_t` and `f_s` are residual
//! two-layer ReLU perceptrons `x + ReLU(ReLU(x A1 + a1) A2 + a2)`.
//! Preterminal and start embeddings are separate from `E_s` and from each
//! other.

use autodiff::{Array, Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::grammar::TdPcfg;
use crate::inside::taped::TapeGrammar;
use crate::{Error, Result};

/// Model dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub n: usize,
    pub p: usize,
    pub q: usize,
    pub d: usize,
    pub k: usize,
}

impl ModelConfig {
    /// `n = p / 2`, `d = p` above 200 preterminals and 200 otherwise,
    /// `k = 256`.
    pub fn with_defaults(p: usize, q: usize) -> Self {
        Self { n: (p / 2).max(1), p, q, d: default_rank(p), k: 256 }
    }

    pub fn m(&self) -> usize {
        self.n + self.p
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.p == 0 || self.q == 0 || self.d == 0 || self.k == 0 {
            return Err(Error::InvalidInput(format!("all model dimensions must be >= 1: {self:?}")));
        }
        Ok(())
    }

    pub fn shape(&self, id: ParamId) -> [usize; 2] {
        let (n, p, q, d, k, m) = (self.n, self.p, self.q, self.d, self.k, self.m());
        use ParamId::*;
        match id {
            SymbolEmbedding => [m, k],
            UHidden | VHidden | WHidden => [k, k],
            UHiddenBias | VHiddenBias | WHiddenBias => [1, k],
            UOut | VOut | WOut => [k, d],
            UOutBias | VOutBias | WOutBias => [1, d],
            PreterminalEmbedding => [p, k],
            TermEncoder1 | TermEncoder2 | StartEncoder1 | StartEncoder2 => [k, k],
            TermEncoderBias1 | TermEncoderBias2 | StartEncoderBias1 | StartEncoderBias2 => [1, k],
            WordEmbedding => [q, k],
            WordBias => [q, 1],
            StartEmbedding => [1, k],
            NonterminalEmbedding => [n, k],
            NonterminalBias => [n, 1],
        }
    }

    /// Exact number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        ParamId::ALL.iter().map(|&id| self.shape(id).iter().product::<usize>()).sum()
    }
}

/// Rank rule: `d = p` when there are more than 200 preterminals.
pub fn default_rank(p: usize) -> usize {
    if p > 200 {
        p
    } else {
        200
    }
}

/// Closed-form parameter count for dimensions `(n, p, q, d, k)`.
pub fn parameter_count(n: usize, p: usize, q: usize, d: usize, k: usize) -> usize {
    let m = n + p;
    let head = k * k + k + k * d + d;
    let encoder = 2 * (k * k + k);
    m * k + 3 * head + p * k + encoder + q * k + q + k + encoder + n * k + n
}

/// Only ReLU is supported as the hidden nonlinearity.
pub fn parse_activation(name: &str) -> Result<()> {
    if name.eq_ignore_ascii_case("relu") {
        Ok(())
    } else {
        log::warn!("activation {name:?} rejected: only relu is supported; other activations degrade induction");
        Err(Error::InvalidInput(format!("unsupported activation {name:?}: only \"relu\" is supported")))
    }
}

/// Parameter arrays, in checkpoint order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamId {
    SymbolEmbedding,
    UHidden,
    UHiddenBias,
    UOut,
    UOutBias,
    VHidden,
    VHiddenBias,
    VOut,
    VOutBias,
    WHidden,
    WHiddenBias,
    WOut,
    WOutBias,
    PreterminalEmbedding,
    TermEncoder1,
    TermEncoderBias1,
    TermEncoder2,
    TermEncoderBias2,
    WordEmbedding,
    WordBias,
    StartEmbedding,
    StartEncoder1,
    StartEncoderBias1,
    StartEncoder2,
    StartEncoderBias2,
    NonterminalEmbedding,
    NonterminalBias,
}

impl ParamId {
    pub const ALL: [ParamId; 27] = {
        use ParamId::*;
        [
            SymbolEmbedding,
            UHidden,
            UHiddenBias,
            UOut,
            UOutBias,
            VHidden,
            VHiddenBias,
            VOut,
            VOutBias,
            WHidden,
            WHiddenBias,
            WOut,
            WOutBias,
            PreterminalEmbedding,
            TermEncoder1,
            TermEncoderBias1,
            TermEncoder2,
            TermEncoderBias2,
            WordEmbedding,
            WordBias,
            StartEmbedding,
            StartEncoder1,
            StartEncoderBias1,
            StartEncoder2,
            StartEncoderBias2,
            NonterminalEmbedding,
            NonterminalBias,
        ]
    };

    /// Stable array name used in checkpoints.
    pub fn name(self) -> &'static str {
        use ParamId::*;
        match self {
            SymbolEmbedding => "E_s",
            UHidden => "M_u1",
            UHiddenBias => "b_u1",
            UOut => "M_u2",
            UOutBias => "b_u2",
            VHidden => "M_v1",
            VHiddenBias => "b_v1",
            VOut => "M_v2",
            VOutBias => "b_v2",
            WHidden => "M_w1",
            WHiddenBias => "b_w1",
            WOut => "M_w2",
            WOutBias => "b_w2",
            PreterminalEmbedding => "w_T",
            TermEncoder1 => "f_t.W1",
            TermEncoderBias1 => "f_t.b1",
            TermEncoder2 => "f_t.W2",
            TermEncoderBias2 => "f_t.b2",
            WordEmbedding => "u_w",
            WordBias => "b_w",
            StartEmbedding => "w_S",
            StartEncoder1 => "f_s.W1",
            StartEncoderBias1 => "f_s.b1",
            StartEncoder2 => "f_s.W2",
            StartEncoderBias2 => "f_s.b2",
            NonterminalEmbedding => "u_A",
            NonterminalBias => "b_A",
        }
    }

    pub fn from_name(name: &str) -> Option<ParamId> {
        Self::ALL.iter().copied().find(|id| id.name() == name)
    }

    fn index(self) -> usize {
        self as usize
    }

    fn is_embedding(self) -> bool {
        use ParamId::*;
        matches!(self, SymbolEmbedding | PreterminalEmbedding | WordEmbedding | StartEmbedding | NonterminalEmbedding)
    }

    fn is_bias(self) -> bool {
        use ParamId::*;
        matches!(
            self,
            UHiddenBias
                | UOutBias
                | VHiddenBias
                | VOutBias
                | WHiddenBias
                | WOutBias
                | TermEncoderBias1
                | TermEncoderBias2
                | WordBias
                | StartEncoderBias1
                | StartEncoderBias2
                | NonterminalBias
        )
    }
}

/// All trainable arrays of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralParams {
    config: ModelConfig,
    arrays: Vec<Array>,
}

impl NeuralParams {
    /// Embeddings from a unit Gaussian, weight matrices from a Gaussian with
    /// standard deviation `1/√fan_in`, biases zero.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arrays = ParamId::ALL
            .iter()
            .map(|&id| {
                let [r, c] = config.shape(id);
                if id.is_bias() {
                    return Array::zeros(r, c);
                }
                let std = if id.is_embedding() { 1.0 } else { 1.0 / (r as f64).sqrt() };
                let dist = Normal::new(0.0, std).expect("finite std");
                Array::from_fn(r, c, |_, _| dist.sample(&mut rng))
            })
            .collect();
        Ok(Self { config, arrays })
    }

    /// Every array zero.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let arrays = ParamId::ALL
            .iter()
            .map(|&id| {
                let [r, c] = config.shape(id);
                Array::zeros(r, c)
            })
            .collect();
        Ok(Self { config, arrays })
    }

    pub fn from_arrays(config: ModelConfig, arrays: Vec<Array>) -> Result<Self> {
        config.validate()?;
        if arrays.len() != ParamId::ALL.len() {
            return Err(Error::Structural(format!(
                "expected {} parameter arrays, got {}",
                ParamId::ALL.len(),
                arrays.len()
            )));
        }
        for (&id, a) in ParamId::ALL.iter().zip(&arrays) {
            if a.shape() != config.shape(id) {
                return Err(Error::Structural(format!(
                    "{} has shape {:?}, expected {:?}",
                    id.name(),
                    a.shape(),
                    config.shape(id)
                )));
            }
        }
        Ok(Self { config, arrays })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, id: ParamId) -> &Array {
        &self.arrays[id.index()]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.arrays[id.index()]
    }

    pub fn arrays(&self) -> &[Array] {
        &self.arrays
    }

    pub fn arrays_mut(&mut self) -> &mut [Array] {
        &mut self.arrays
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Array)> {
        ParamId::ALL.iter().copied().zip(&self.arrays)
    }

    pub fn parameter_count(&self) -> usize {
        self.arrays.iter().map(Array::len).sum()
    }

    /// Records all arrays on `tape`, as differentiable leaves when
    /// `trainable`.
    pub fn record(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        let vars = self
            .arrays
            .iter()
            .map(|a| if trainable { tape.param(a.clone()) } else { tape.constant(a.clone()) })
            .collect();
        ParamVars(vars)
    }

    /// `(U, V, W)` with `U` row-stochastic and `V`, `W` column-stochastic.
    pub fn emit_binary_factors(&self) -> Result<(Array, Array, Array)> {
        let mut tape = Tape::new();
        let vars = self.record(&mut tape, false);
        let e = emit_on_tape(&mut tape, &self.config, &vars)?;
        Ok((tape.value(e.u).clone(), tape.value(e.v).clone(), tape.value(e.w).clone()))
    }

    /// `Q`, `p x q`, row-stochastic.
    pub fn emit_preterminal_matrix(&self) -> Result<Array> {
        let mut tape = Tape::new();
        let vars = self.record(&mut tape, false);
        let e = emit_on_tape(&mut tape, &self.config, &vars)?;
        Ok(tape.value(e.emission_t).transpose())
    }

    /// `r`, `1 x n`, sums to one.
    pub fn emit_start_vector(&self) -> Result<Array> {
        let mut tape = Tape::new();
        let vars = self.record(&mut tape, false);
        let e = emit_on_tape(&mut tape, &self.config, &vars)?;
        Ok(tape.value(e.start).transpose())
    }

    pub fn emit_grammar(&self) -> Result<TdPcfg> {
        let mut tape = Tape::new();
        let vars = self.record(&mut tape, false);
        let e = emit_on_tape(&mut tape, &self.config, &vars)?;
        TdPcfg::new(
            tape.value(e.u).clone(),
            tape.value(e.v).clone(),
            tape.value(e.w).clone(),
            tape.value(e.emission_t).transpose(),
            tape.value(e.start).transpose(),
        )
    }
}

/// Tape handles for every parameter array, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct ParamVars(Vec<Var>);

impl ParamVars {
    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.index()]
    }

    pub fn all(&self) -> &[Var] {
        &self.0
    }

    /// Substitutes the handle of one parameter.
    pub fn with(mut self, id: ParamId, var: Var) -> Self {
        self.0[id.index()] = var;
        self
    }
}

/// Grammar arrays produced on a tape.
#[derive(Debug, Clone, Copy)]
pub struct EmittedGrammar {
    /// `n x d`.
    pub u: Var,
    /// `m x d`.
    pub v: Var,
    pub w: Var,
    /// `q x p` (transposed emission matrix).
    pub emission_t: Var,
    /// `n x 1`.
    pub start: Var,
}

impl EmittedGrammar {
    pub fn tape_grammar(&self, tape: &mut Tape) -> Result<TapeGrammar> {
        TapeGrammar::new(tape, self.u, self.v, self.w, self.emission_t, self.start)
    }
}

fn linear(tape: &mut Tape, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let h = tape.matmul(x, weight)?;
    Ok(tape.add(h, bias)?)
}

fn factor_head(tape: &mut Tape, x: Var, vars: &ParamVars, ids: [ParamId; 4], axis: usize) -> Result<Var> {
    let h = linear(tape, x, vars.get(ids[0]), vars.get(ids[1]))?;
    let h = tape.relu(h);
    let logits = linear(tape, h, vars.get(ids[2]), vars.get(ids[3]))?;
    Ok(tape.softmax(logits, axis)?)
}

fn residual_encoder(tape: &mut Tape, x: Var, vars: &ParamVars, ids: [ParamId; 4]) -> Result<Var> {
    let h = linear(tape, x, vars.get(ids[0]), vars.get(ids[1]))?;
    let h = tape.relu(h);
    let h = linear(tape, h, vars.get(ids[2]), vars.get(ids[3]))?;
    let h = tape.relu(h);
    Ok(tape.add(x, h)?)
}

/// Records the full grammar-emission forward pass.
pub fn emit_on_tape(tape: &mut Tape, config: &ModelConfig, vars: &ParamVars) -> Result<EmittedGrammar> {
    use ParamId::*;
    let symbols = vars.get(SymbolEmbedding);
    let nonterminals = tape.select_rows(symbols, 0..config.n)?;
    let u = factor_head(tape, nonterminals, vars, [UHidden, UHiddenBias, UOut, UOutBias], 1)?;
    let v = factor_head(tape, symbols, vars, [VHidden, VHiddenBias, VOut, VOutBias], 0)?;
    let w = factor_head(tape, symbols, vars, [WHidden, WHiddenBias, WOut, WOutBias], 0)?;

    let pre = residual_encoder(
        tape,
        vars.get(PreterminalEmbedding),
        vars,
        [TermEncoder1, TermEncoderBias1, TermEncoder2, TermEncoderBias2],
    )?;
    let scores = tape.matmul_transposed(vars.get(WordEmbedding), pre)?;
    let scores = tape.add(scores, vars.get(WordBias))?;
    let emission_t = tape.softmax(scores, 0)?;

    let query = residual_encoder(
        tape,
        vars.get(StartEmbedding),
        vars,
        [StartEncoder1, StartEncoderBias1, StartEncoder2, StartEncoderBias2],
    )?;
    let scores = tape.matmul_transposed(vars.get(NonterminalEmbedding), query)?;
    let scores = tape.add(scores, vars.get(NonterminalBias))?;
    let start = tape.softmax(scores, 0)?;

    Ok(EmittedGrammar { u, v, w, emission_t, start })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::{validate_factored, LEARNED_TOLERANCE};

    fn tiny() -> ModelConfig {
        ModelConfig { n: 2, p: 2, q: 5, d: 4, k: 8 }
    }

    #[test]
    fn defaults_follow_ratio_and_rank_rule() {
        let c = ModelConfig::with_defaults(60, 100);
        assert_eq!((c.n, c.d, c.k), (30, 200, 256));
        let c = ModelConfig::with_defaults(500, 10_000);
        assert_eq!((c.n, c.d), (250, 500));
        assert_eq!(default_rank(200), 200);
        assert_eq!(default_rank(201), 201);
    }

    #[test]
    fn zero_params_give_uniform_grammar() {
        let params = NeuralParams::zeros(ModelConfig { n: 3, p: 4, q: 6, d: 5, k: 4 }).unwrap();
        let (u, v, w) = params.emit_binary_factors().unwrap();
        assert!(u.data().iter().all(|&x| (x - 1.0 / 5.0).abs() < 1e-15));
        assert!(v.data().iter().all(|&x| (x - 1.0 / 7.0).abs() < 1e-15));
        assert!(w.data().iter().all(|&x| (x - 1.0 / 7.0).abs() < 1e-15));
        let q = params.emit_preterminal_matrix().unwrap();
        assert_eq!(q.shape(), [4, 6]);
        assert!(q.data().iter().all(|&x| (x - 1.0 / 6.0).abs() < 1e-15));
        let r = params.emit_start_vector().unwrap();
        assert!(r.data().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn single_word_and_single_nonterminal() {
        let params = NeuralParams::init(ModelConfig { n: 1, p: 2, q: 1, d: 3, k: 4 }, 2).unwrap();
        let q = params.emit_preterminal_matrix().unwrap();
        assert_eq!(q.data(), &[1.0, 1.0]);
        assert_eq!(params.emit_start_vector().unwrap().data(), &[1.0]);
    }

    #[test]
    fn emitted_grammars_are_valid() {
        for seed in 0..5 {
            let params = NeuralParams::init(tiny(), seed).unwrap();
            let (u, v, w) = params.emit_binary_factors().unwrap();
            assert!(validate_factored(&u, &v, &w).unwrap().is_empty());
            let g = params.emit_grammar().unwrap();
            assert!(g.validate(LEARNED_TOLERANCE).unwrap().is_empty());
        }
    }

    #[test]
    fn seed_nine_rows_sum_to_one() {
        let params = NeuralParams::init(ModelConfig { n: 3, p: 2, q: 5, d: 4, k: 8 }, 9).unwrap();
        let q = params.emit_preterminal_matrix().unwrap();
        for r in 0..2 {
            assert!((q.row_slice(r).iter().sum::<f64>() - 1.0).abs() < 1e-7);
        }
        let r = params.emit_start_vector().unwrap();
        assert_eq!(r.shape(), [1, 3]);
        assert!((r.sum() - 1.0).abs() < 1e-7);
    }

    #[test]
    fn parameter_count_formula_is_exact() {
        for c in [tiny(), ModelConfig { n: 7, p: 3, q: 11, d: 5, k: 6 }] {
            let params = NeuralParams::init(c, 0).unwrap();
            assert_eq!(params.parameter_count(), parameter_count(c.n, c.p, c.q, c.d, c.k));
            assert_eq!(params.parameter_count(), c.parameter_count());
        }
    }

    #[test]
    fn names_round_trip() {
        for id in ParamId::ALL {
            assert_eq!(ParamId::from_name(id.name()), Some(id));
        }
    }

    #[test]
    fn only_relu_is_accepted() {
        assert!(parse_activation("relu").is_ok());
        assert!(parse_activation("tanh").is_err());
    }

    #[test]
    fn preterminal_and_start_embeddings_are_separate() {
        let c = tiny();
        let params = NeuralParams::init(c, 1).unwrap();
        assert_eq!(params.get(ParamId::SymbolEmbedding).shape(), [c.m(), c.k]);
        assert_eq!(params.get(ParamId::PreterminalEmbedding).shape(), [c.p, c.k]);
        assert_eq!(params.get(ParamId::StartEmbedding).shape(), [1, c.k]);
    }
}
