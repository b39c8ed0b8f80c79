//! Corpus loading: treebank files or a corpus sampled from a random grammar.

use std::path::Path;

use tdpcfg::corpus::{gold_spans, preprocess_all, read_treebank, sample_corpus, CorpusVocab, TreeNode};
use tdpcfg::evaluator::GoldSpan;
use tdpcfg::grammar::random_peaked_td_pcfg;
use tdpcfg::{Sentence, TdPcfg, Vocabulary};

use crate::config::{Config, SyntheticSection};
use crate::error::{CliError, Result};

/// Preprocessed trees with their encoded sentences.
#[derive(Debug, Clone, Default)]
pub struct Split {
    pub trees: Vec<TreeNode>,
    pub sentences: Vec<Sentence>,
}

impl Split {
    pub fn encode(trees: Vec<TreeNode>, vocab: &CorpusVocab) -> Self {
        let sentences = trees.iter().map(|t| vocab.encode(&t.words())).collect();
        Self { trees, sentences }
    }

    pub fn gold(&self) -> (Vec<Vec<GoldSpan>>, Vec<usize>) {
        (self.trees.iter().map(gold_spans).collect(), self.trees.iter().map(TreeNode::leaf_count).collect())
    }

    pub fn words(&self) -> Vec<Vec<String>> {
        self.trees.iter().map(|t| t.words().into_iter().map(str::to_string).collect()).collect()
    }

    pub fn len(&self) -> usize {
        self.trees.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trees.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub vocab: CorpusVocab,
    pub train: Split,
    pub dev: Split,
    pub test: Split,
    /// The generating grammar of a sampled corpus.
    pub truth: Option<TdPcfg>,
}

/// Reads and preprocesses a treebank file.
pub fn load_trees(path: &Path, punct: &[&str]) -> Result<Vec<TreeNode>> {
    let raw = read_treebank(path)?;
    let (kept, dropped) = preprocess_all(&raw, punct);
    if dropped > 0 {
        log::info!("{}: dropped {dropped} trees with fewer than 2 words", path.display());
    }
    Ok(kept)
}

/// Raw trees of a sampled corpus split into train, dev and test.
pub fn synthetic_trees(s: &SyntheticSection) -> Result<(TdPcfg, [Vec<TreeNode>; 3])> {
    let truth = random_peaked_td_pcfg(s.n, s.p, s.q, s.d, s.sharpness, s.seed)?;
    let corpus = sample_corpus(&truth, s.train + s.dev + s.test, s.max_length, s.seed)?;
    let mut trees = corpus.to_treebank(s.n, &Vocabulary::synthetic(s.q)).into_iter();
    let train = trees.by_ref().take(s.train).collect();
    let dev = trees.by_ref().take(s.dev).collect();
    let test = trees.collect();
    Ok((truth, [train, dev, test]))
}

pub fn load_dataset(config: &Config) -> Result<Dataset> {
    let punct = config.punct_tags();
    let (truth, [train, dev, test]) = match &config.data.train {
        Some(path) => {
            let read = |p: &Option<std::path::PathBuf>| p.as_deref().map_or(Ok(Vec::new()), |p| load_trees(p, &punct));
            (None, [load_trees(path, &punct)?, read(&config.data.dev)?, read(&config.data.test)?])
        }
        None => {
            let (truth, [train, dev, test]) = synthetic_trees(&config.synthetic)?;
            let clean = |t: Vec<TreeNode>| preprocess_all(&t, &punct).0;
            (Some(truth), [clean(train), clean(dev), clean(test)])
        }
    };
    if train.is_empty() {
        return Err(CliError::Usage("training corpus is empty after preprocessing".into()));
    }
    let vocab = CorpusVocab::build(train.iter().map(TreeNode::words), config.data.vocab_size)?;
    log::info!(
        "corpus: {} train, {} dev, {} test sentences; vocabulary {}",
        train.len(),
        dev.len(),
        test.len(),
        vocab.len()
    );
    Ok(Dataset {
        train: Split::encode(train, &vocab),
        dev: Split::encode(dev, &vocab),
        test: Split::encode(test, &vocab),
        vocab,
        truth,
    })
}
