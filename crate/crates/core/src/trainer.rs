//! Maximum-likelihood training with Adam and dev-set early stopping.
//!
//! Each step emits the grammar once on a shared tape, runs one taped inside
//! pass per sentence in parallel against leaf copies of the grammar, sums the
//! grammar gradients in batch order and pushes them back through the neural
//! parameterization with a single seeded backward pass.

use std::time::Instant;

use autodiff::{Array, Tape};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::grammar::TdPcfg;
use crate::inside::taped::{inside_on_tape, TapeGrammar};
use crate::inside::{batch_log_likelihood, Sentence};
use crate::model::{emit_on_tape, ModelConfig, NeuralParams};
use crate::{Error, Result};

/// Optimizer and schedule settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seeds: Vec<u64>,
    /// Sentences whose lengths fall in the same bucket of this width are
    /// batched together.
    pub bucket_width: usize,
    /// Rescale the gradient when its global L2 norm exceeds this value.
    pub max_grad_norm: Option<f64>,
    /// Training sentences longer than this are skipped.
    pub max_train_len: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.75,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 4,
            epochs: 10,
            seeds: vec![0, 1, 2, 3],
            bucket_width: 5,
            max_grad_norm: None,
            max_train_len: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidInput(msg.to_string()));
        if !(self.learning_rate >= 0.0) {
            return bad("learning_rate must be >= 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be > 0");
        }
        if self.batch_size == 0 || self.bucket_width == 0 {
            return bad("batch_size and bucket_width must be >= 1");
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        Ok(())
    }
}

/// First and second moment estimates for every parameter array.
#[derive(Debug, Clone)]
pub struct Adam {
    first: Vec<Array>,
    second: Vec<Array>,
    steps: u64,
}

impl Adam {
    pub fn new(params: &NeuralParams) -> Self {
        let zeros: Vec<Array> = params.arrays().iter().map(|a| Array::zeros(a.rows(), a.cols())).collect();
        Self { first: zeros.clone(), second: zeros, steps: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One bias-corrected Adam update.
    pub fn step(&mut self, cfg: &TrainConfig, params: &mut NeuralParams, grads: &[Array]) {
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let arrays = params.arrays_mut();
        for (idx, g) in grads.iter().enumerate() {
            let m = self.first[idx].data_mut();
            let v = self.second[idx].data_mut();
            let x = arrays[idx].data_mut();
            for (((x, m), v), &g) in x.iter_mut().zip(m).zip(v).zip(g.data()) {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                *x -= cfg.learning_rate * (*m / c1) / ((*v / c2).sqrt() + cfg.epsilon);
            }
        }
    }
}

/// Summed negative log-likelihood of `batch` and its gradient with respect
/// to every parameter array (in [`crate::model::ParamId`] order).
pub fn nll_and_gradient(params: &NeuralParams, batch: &[Sentence]) -> Result<(f64, Vec<Array>)> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let mut tape = Tape::new();
    let vars = params.record(&mut tape, true);
    let emitted = emit_on_tape(&mut tape, params.config(), &vars)?;
    let grammar = TdPcfg::new(
        tape.value(emitted.u).clone(),
        tape.value(emitted.v).clone(),
        tape.value(emitted.w).clone(),
        tape.value(emitted.emission_t).transpose(),
        tape.value(emitted.start).transpose(),
    )?;
    let emission_t = tape.value(emitted.emission_t);

    let per_sentence: Vec<Result<SentenceGrad>> =
        batch.par_iter().map(|s| sentence_gradient(&grammar, emission_t, s)).collect();

    let config = params.config();
    let mut loss = 0.0;
    let mut gu = Array::zeros(config.n, config.d);
    let mut gv = Array::zeros(config.m(), config.d);
    let mut gw = Array::zeros(config.m(), config.d);
    let mut ge = Array::zeros(config.q, config.p);
    let mut gr = Array::zeros(config.n, 1);
    for (index, item) in per_sentence.into_iter().enumerate() {
        let item = item.map_err(|e| match e {
            Error::ZeroProbability { .. } => Error::ZeroProbability { index },
            other => other,
        })?;
        loss -= item.log_likelihood;
        gu.add_assign(&item.u)?;
        gv.add_assign(&item.v)?;
        gw.add_assign(&item.w)?;
        gr.add_assign(&item.start)?;
        for (row, &word) in item.words.iter().enumerate() {
            for (acc, &x) in ge.row_slice_mut(word).iter_mut().zip(item.emission_rows.row_slice(row)) {
                *acc += x;
            }
        }
    }
    // d(loss) = -d(log-likelihood)
    let neg = |a: Array| a.map(|x| -x);
    let grads = tape.backward_seeded(&[
        (emitted.u, neg(gu)),
        (emitted.v, neg(gv)),
        (emitted.w, neg(gw)),
        (emitted.emission_t, neg(ge)),
        (emitted.start, neg(gr)),
    ])?;
    Ok((loss, vars.all().iter().map(|&v| grads.get(v)).collect()))
}

struct SentenceGrad {
    log_likelihood: f64,
    u: Array,
    v: Array,
    w: Array,
    start: Array,
    /// Distinct word ids of the sentence and their `Qᵀ` row gradients.
    words: Vec<usize>,
    emission_rows: Array,
}

fn sentence_gradient(g: &TdPcfg, emission_t: &Array, sentence: &Sentence) -> Result<SentenceGrad> {
    sentence.check_vocab(g.q())?;
    let mut words = sentence.ids().to_vec();
    words.sort_unstable();
    words.dedup();
    let local: Vec<usize> = sentence.ids().iter().map(|w| words.binary_search(w).expect("word present")).collect();
    let rows = Array::from_fn(words.len(), g.p(), |r, t| emission_t.get(words[r], t));

    let mut tape = Tape::new();
    let u = tape.param(g.u.clone());
    let v = tape.param(g.v.clone());
    let w = tape.param(g.w.clone());
    let e = tape.param(rows);
    let r = tape.param(g.start.transpose());
    let tg = TapeGrammar::new(&mut tape, u, v, w, e, r)?;
    let out = inside_on_tape(&mut tape, &tg, &Sentence::new(local), false)?;
    let grads = tape.backward(out.log_likelihood)?;
    Ok(SentenceGrad {
        log_likelihood: tape.value(out.log_likelihood).get(0, 0),
        u: grads.get(u),
        v: grads.get(v),
        w: grads.get(w),
        start: grads.get(r),
        words,
        emission_rows: grads.get(e),
    })
}

/// Per-token perplexity `exp(-Σ log p(w) / Σ |w|)` over sentences of
/// length >= 2 (shorter ones have probability zero by construction).
pub fn perplexity(g: &TdPcfg, corpus: &[Sentence]) -> Result<f64> {
    let usable: Vec<Sentence> = corpus.iter().filter(|s| s.len() >= 2).cloned().collect();
    if usable.is_empty() {
        return Err(Error::InvalidInput("perplexity needs a sentence of length >= 2".into()));
    }
    let tokens: usize = usable.iter().map(Sentence::len).sum();
    let total: f64 = batch_log_likelihood(g, &usable)?.iter().sum();
    Ok((-total / tokens as f64).exp())
}

/// One line of the training history. Epoch 0 is the initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub seed: u64,
    pub epoch: usize,
    /// Mean per-sentence negative log-likelihood over the epoch's updates
    /// (`NaN` for epoch 0).
    pub train_nll: f64,
    pub dev_perplexity: f64,
    pub seconds: f64,
}

/// Best parameters found for one seed.
#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub params: NeuralParams,
    pub best_epoch: usize,
    pub dev_perplexity: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub runs: Vec<SeedOutcome>,
    pub history: Vec<EpochRecord>,
}

impl TrainOutcome {
    /// The run with the lowest dev perplexity (first on ties).
    pub fn best(&self) -> &SeedOutcome {
        let mut best = &self.runs[0];
        for run in &self.runs[1..] {
            if run.dev_perplexity < best.dev_perplexity {
                best = run;
            }
        }
        best
    }
}

/// Groups sentence indices into batches of similar length, in a
/// deterministic order derived from `rng`.
pub fn make_batches(lengths: &[usize], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.shuffle(rng);
    order.sort_by_key(|&i| lengths[i] / cfg.bucket_width);
    let mut batches: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match batches.last_mut() {
            Some(b)
                if b.len() < cfg.batch_size && lengths[b[0]] / cfg.bucket_width == lengths[i] / cfg.bucket_width =>
            {
                b.push(i)
            }
            _ => batches.push(vec![i]),
        }
    }
    batches.shuffle(rng);
    batches
}

fn clip(grads: &mut [Array], max_norm: f64) {
    let norm = grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
}

/// Trains one model per seed, keeping each seed's parameters with the lowest
/// dev perplexity. If `dev` is empty the training corpus is used for early
/// stopping instead.
pub fn train(model: ModelConfig, cfg: &TrainConfig, train_set: &[Sentence], dev: &[Sentence]) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.validate()?;
    let train_set: Vec<Sentence> = train_set
        .iter()
        .filter(|s| s.len() >= 2 && cfg.max_train_len.is_none_or(|max| s.len() <= max))
        .cloned()
        .collect();
    if train_set.is_empty() {
        return Err(Error::InvalidInput("training corpus has no sentence of length >= 2".into()));
    }
    let dev: &[Sentence] = if dev.iter().any(|s| s.len() >= 2) {
        dev
    } else {
        log::warn!("no usable dev sentences; early stopping on the training corpus");
        &train_set
    };
    let lengths: Vec<usize> = train_set.iter().map(Sentence::len).collect();
    let mut history = Vec::new();
    let mut runs = Vec::new();

    for &seed in &cfg.seeds {
        let start = Instant::now();
        let mut params = NeuralParams::init(model, seed)?;
        let mut adam = Adam::new(&params);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ba7c);
        let init_ppl = perplexity(&params.emit_grammar()?, dev)?;
        log::info!("seed {seed} epoch 0 dev perplexity {init_ppl:.3}");
        history.push(EpochRecord {
            seed,
            epoch: 0,
            train_nll: f64::NAN,
            dev_perplexity: init_ppl,
            seconds: start.elapsed().as_secs_f64(),
        });
        let mut best = SeedOutcome { seed, params: params.clone(), best_epoch: 0, dev_perplexity: init_ppl };

        for epoch in 1..=cfg.epochs {
            let mut total = 0.0;
            for batch in make_batches(&lengths, cfg, &mut rng) {
                let sentences: Vec<Sentence> = batch.iter().map(|&i| train_set[i].clone()).collect();
                let (loss, mut grads) = nll_and_gradient(&params, &sentences)?;
                if let Some(max) = cfg.max_grad_norm {
                    clip(&mut grads, max);
                }
                adam.step(cfg, &mut params, &grads);
                total += loss;
            }
            let ppl = perplexity(&params.emit_grammar()?, dev)?;
            let record = EpochRecord {
                seed,
                epoch,
                train_nll: total / train_set.len() as f64,
                dev_perplexity: ppl,
                seconds: start.elapsed().as_secs_f64(),
            };
            log::info!("seed {seed} epoch {epoch} train nll {:.3} dev perplexity {ppl:.3}", record.train_nll);
            history.push(record);
            if ppl < best.dev_perplexity {
                best = SeedOutcome { seed, params: params.clone(), best_epoch: epoch, dev_perplexity: ppl };
            }
        }
        runs.push(best);
    }
    Ok(TrainOutcome { runs, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inside::inside_factored;

    fn tiny() -> ModelConfig {
        ModelConfig { n: 2, p: 3, q: 5, d: 4, k: 6 }
    }

    fn corpus() -> Vec<Sentence> {
        vec![
            Sentence::new(vec![0, 1, 2]),
            Sentence::new(vec![3, 4]),
            Sentence::new(vec![1, 1, 0, 4]),
            Sentence::new(vec![2, 3, 3]),
        ]
    }

    #[test]
    fn loss_matches_inside() {
        let params = NeuralParams::init(tiny(), 3).unwrap();
        let (loss, grads) = nll_and_gradient(&params, &corpus()).unwrap();
        let g = params.emit_grammar().unwrap();
        let direct: f64 = corpus().iter().map(|s| -inside_factored(&g, s).unwrap().log_likelihood).sum();
        assert!((loss - direct).abs() < 1e-10);
        assert_eq!(grads.len(), params.arrays().len());
    }

    #[test]
    fn zero_learning_rate_leaves_params() {
        let cfg = TrainConfig { learning_rate: 0.0, ..TrainConfig::default() };
        let mut params = NeuralParams::init(tiny(), 1).unwrap();
        let before = params.clone();
        let (_, grads) = nll_and_gradient(&params, &corpus()).unwrap();
        Adam::new(&params).step(&cfg, &mut params, &grads);
        assert_eq!(params, before);
    }

    #[test]
    fn batches_cover_every_sentence_once() {
        let lengths = vec![3, 9, 4, 12, 3, 5, 7, 2, 2, 30];
        let cfg = TrainConfig { batch_size: 3, ..TrainConfig::default() };
        let batches = make_batches(&lengths, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        let mut all: Vec<usize> = batches.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..lengths.len()).collect::<Vec<_>>());
        assert!(batches.iter().all(|b| b.len() <= 3));
        let again = make_batches(&lengths, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(batches, again);
    }

    #[test]
    fn training_lowers_perplexity_and_is_reproducible() {
        let cfg = TrainConfig { epochs: 3, seeds: vec![7], learning_rate: 0.05, ..TrainConfig::default() };
        let data = corpus();
        let a = train(tiny(), &cfg, &data, &data).unwrap();
        assert_eq!(a.history.len(), 4);
        assert!(a.best().dev_perplexity < a.history[0].dev_perplexity);
        let b = train(tiny(), &cfg, &data, &data).unwrap();
        assert_eq!(a.best().params, b.best().params);
    }

    #[test]
    fn rejects_empty_corpus() {
        let cfg = TrainConfig::default();
        assert!(train(tiny(), &cfg, &[Sentence::new(vec![1])], &[]).is_err());
        assert!(perplexity(&NeuralParams::init(tiny(), 0).unwrap().emit_grammar().unwrap(), &[]).is_err());
    }
}
