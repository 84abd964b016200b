//! Pre-LN decoder-only transformer with learned positions and a tied output
//! head.

use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::{Scalar, Segment, Tape, Tensor, TensorError, Var};
use crate::tokenizer::{Vocab, NEWLINE};

pub const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub ff_dim: usize,
    pub ctx: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Default desk configuration: 4 layers, 8 heads, width 256, context 256.
    pub fn desk(vocab_size: usize) -> Self {
        Self::new(4, 8, 256, 256, vocab_size, 0)
    }

    /// Feed-forward width defaults to four times the model width.
    pub fn new(layers: usize, heads: usize, dim: usize, ctx: usize, vocab_size: usize, seed: u64) -> Self {
        Self { layers, heads, dim, ff_dim: 4 * dim, ctx, vocab_size, seed }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.layers == 0 || self.heads == 0 || self.dim == 0 || self.ff_dim == 0 {
            return bad("layers, heads, dim and ff_dim must be positive".into());
        }
        if !self.dim.is_multiple_of(self.heads) {
            return bad(format!("dim {} is not divisible by {} heads", self.dim, self.heads));
        }
        if self.ctx == 0 || self.vocab_size == 0 {
            return bad("context length and vocabulary size must be positive".into());
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let (d, f, l) = (self.dim, self.ff_dim, self.layers);
        self.vocab_size * d + self.ctx * d + l * (4 * d * d + 2 * d * f + 9 * d + f) + 2 * d
    }

    /// Name and shape of every parameter tensor, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.dim, self.ff_dim);
        let mut out =
            vec![("tok_emb".to_string(), vec![self.vocab_size, d]), ("pos_emb".to_string(), vec![self.ctx, d])];
        for l in 0..self.layers {
            let p = |s: &str| format!("layer{l}.{s}");
            out.extend([
                (p("ln1.g"), vec![d]),
                (p("ln1.b"), vec![d]),
                (p("attn.w_qkv"), vec![d, 3 * d]),
                (p("attn.b_qkv"), vec![3 * d]),
                (p("attn.w_o"), vec![d, d]),
                (p("attn.b_o"), vec![d]),
                (p("ln2.g"), vec![d]),
                (p("ln2.b"), vec![d]),
                (p("mlp.w_in"), vec![d, f]),
                (p("mlp.b_in"), vec![f]),
                (p("mlp.w_out"), vec![f, d]),
                (p("mlp.b_out"), vec![d]),
            ]);
        }
        out.push(("ln_f.g".to_string(), vec![d]));
        out.push(("ln_f.b".to_string(), vec![d]));
        out
    }
}

/// Weight decay applies to projection matrices only.
pub fn decays(name: &str) -> bool {
    name.contains(".w_")
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input of {len} tokens exceeds the context length {ctx}")]
    TooLong { len: usize, ctx: usize },
    #[error("empty input sequence")]
    Empty,
    #[error("token id {id} is outside the vocabulary of {vocab}")]
    BadToken { id: u32, vocab: usize },
    #[error("example has {weights} loss weights for {tokens} tokens (expected tokens - 1)")]
    WeightLength { tokens: usize, weights: usize },
    #[error("vocabulary has {actual} tokens but the config expects {expected}")]
    VocabMismatch { expected: usize, actual: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// How per-token losses in a batch are averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Weighted mean within each example, then mean over examples.
    ExampleMean,
    /// One weighted mean over every token of the batch.
    TokenMean,
}

/// One training or scoring sequence. `weights[t]` weights the prediction of
/// `tokens[t + 1]`.
#[derive(Debug, Clone, Copy)]
pub struct Scored<'a> {
    pub tokens: &'a [u32],
    pub weights: &'a [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T> {
    pub config: ModelConfig,
    pub vocab: Vocab,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
}

struct Graph {
    params: Vec<Var>,
    loss: Var,
}

impl<T: Scalar> ModelState<T> {
    pub fn init(config: ModelConfig, vocab: Vocab) -> Result<Self, ModelError> {
        config.validate()?;
        if vocab.len() != config.vocab_size {
            return Err(ModelError::VocabMismatch { expected: config.vocab_size, actual: vocab.len() });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).unwrap();
        let resid = 1.0 / ((2 * config.layers) as f64).sqrt();
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape) in config.layout() {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = if name.ends_with(".g") {
                vec![1.0; n]
            } else if name.contains(".b") {
                vec![0.0; n]
            } else {
                let s = if name.ends_with("w_o") || name.ends_with("w_out") { resid } else { 1.0 };
                (0..n).map(|_| normal.sample(&mut rng) * s).collect()
            };
            params.push(Tensor::from_f64(&shape, &data)?);
            names.push(name);
        }
        Ok(Self { config, vocab, names, params })
    }

    /// Rebuilds a model from stored tensors, checking names and shapes.
    pub fn from_params(config: ModelConfig, vocab: Vocab, named: Vec<(String, Tensor<T>)>) -> Result<Self, ModelError> {
        config.validate()?;
        if vocab.len() != config.vocab_size {
            return Err(ModelError::VocabMismatch { expected: config.vocab_size, actual: vocab.len() });
        }
        let layout = config.layout();
        if layout.len() != named.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameter tensors, found {}",
                layout.len(),
                named.len()
            )));
        }
        for ((name, shape), (got, t)) in layout.iter().zip(&named) {
            if name != got || shape.as_slice() != t.shape() {
                return Err(ModelError::Config(format!(
                    "parameter {got} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        let (names, params) = named.into_iter().unzip();
        Ok(Self { config, vocab, names, params })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelState<U> {
        ModelState {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<(), ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::Empty);
        }
        if tokens.len() > self.config.ctx {
            return Err(ModelError::TooLong { len: tokens.len(), ctx: self.config.ctx });
        }
        if let Some(&id) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(ModelError::BadToken { id, vocab: self.config.vocab_size });
        }
        Ok(())
    }

    /// Final hidden states of packed sequences, `[sum len, dim]`.
    fn hidden(&self, tape: &mut Tape<T>, seqs: &[&[u32]], grad: bool) -> Result<(Vec<Var>, Var), ModelError> {
        for s in seqs {
            self.check_tokens(s)?;
        }
        let c = &self.config;
        let p: Vec<Var> = self.params.iter().map(|t| tape.leaf(t.clone(), grad)).collect();
        let mut ids = Vec::new();
        let mut pos = Vec::new();
        let mut segments = Vec::with_capacity(seqs.len());
        for s in seqs {
            segments.push(Segment { start: ids.len(), len: s.len() });
            ids.extend(s.iter().map(|&t| t as usize));
            pos.extend(0..s.len());
        }
        let eps = T::c(LN_EPS);
        let te = tape.embedding(p[0], &ids)?;
        let pe = tape.embedding(p[1], &pos)?;
        let mut x = tape.add(te, pe)?;
        for l in 0..c.layers {
            let w = &p[2 + 12 * l..2 + 12 * (l + 1)];
            let h = tape.layer_norm(x, w[0], w[1], eps)?;
            let qkv = tape.matmul(h, w[2])?;
            let qkv = tape.add_row(qkv, w[3])?;
            let a = tape.attention(qkv, &segments, c.heads)?;
            let o = tape.matmul(a, w[4])?;
            let o = tape.add_row(o, w[5])?;
            x = tape.add(x, o)?;
            let h = tape.layer_norm(x, w[6], w[7], eps)?;
            let f = tape.matmul(h, w[8])?;
            let f = tape.add_row(f, w[9])?;
            let f = tape.gelu(f)?;
            let f = tape.matmul(f, w[10])?;
            let f = tape.add_row(f, w[11])?;
            x = tape.add(x, f)?;
        }
        let n = p.len();
        let x = tape.layer_norm(x, p[n - 2], p[n - 1], eps)?;
        Ok((p, x))
    }

    /// Logits for every position of one sequence, `[len, vocab]`.
    pub fn forward(&self, tokens: &[u32]) -> Result<Tensor<T>, ModelError> {
        let mut tape = Tape::new();
        let (p, x) = self.hidden(&mut tape, &[tokens], false)?;
        let logits = tape.matmul_bt(x, p[0])?;
        Ok(tape.value(logits)?.clone())
    }

    /// Next-token logits after each prefix.
    pub fn next_logits(&self, prefixes: &[&[u32]]) -> Result<Vec<Vec<T>>, ModelError> {
        let mut tape = Tape::new();
        let (p, x) = self.hidden(&mut tape, prefixes, false)?;
        let mut last = Vec::with_capacity(prefixes.len());
        let mut end = 0;
        for s in prefixes {
            end += s.len();
            last.push(end - 1);
        }
        let rows = tape.gather_rows(x, &last)?;
        let logits = tape.matmul_bt(rows, p[0])?;
        let t = tape.value(logits)?;
        Ok((0..prefixes.len()).map(|r| t.row(r).to_vec()).collect())
    }

    fn loss_graph(
        &self,
        tape: &mut Tape<T>,
        batch: &[Scored],
        reduction: Reduction,
        grad: bool,
    ) -> Result<Graph, ModelError> {
        let mut inputs = Vec::with_capacity(batch.len());
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        let mut weights = Vec::new();
        let mut offset = 0;
        let mut n_examples = 0usize;
        let mut totals = Vec::with_capacity(batch.len());
        for ex in batch {
            if ex.tokens.len() < 2 {
                return Err(ModelError::Empty);
            }
            if ex.weights.len() + 1 != ex.tokens.len() {
                return Err(ModelError::WeightLength { tokens: ex.tokens.len(), weights: ex.weights.len() });
            }
            let total: f64 = ex.weights.iter().sum();
            totals.push(total);
            if total > 0.0 {
                n_examples += 1;
            }
        }
        for (ex, &total) in batch.iter().zip(&totals) {
            let input = &ex.tokens[..ex.tokens.len() - 1];
            for (t, &w) in ex.weights.iter().enumerate() {
                if w != 0.0 {
                    rows.push(offset + t);
                    targets.push(ex.tokens[t + 1] as usize);
                    let w = match reduction {
                        Reduction::TokenMean => w,
                        Reduction::ExampleMean => w / (total * n_examples as f64),
                    };
                    weights.push(T::c(w));
                }
            }
            offset += input.len();
            inputs.push(input);
        }
        if rows.is_empty() {
            return Err(TensorError::NoLossBearingTokens.into());
        }
        let (params, x) = self.hidden(tape, &inputs, grad)?;
        let x = tape.gather_rows(x, &rows)?;
        let logits = tape.matmul_bt(x, params[0])?;
        let loss = tape.cross_entropy(logits, &targets, &weights)?;
        Ok(Graph { params, loss })
    }

    pub fn loss(&self, batch: &[Scored], reduction: Reduction) -> Result<f64, ModelError> {
        let mut tape = Tape::new();
        let g = self.loss_graph(&mut tape, batch, reduction, false)?;
        Ok(tape.value(g.loss)?.item().to_f64().unwrap())
    }

    /// Loss and gradient for every parameter tensor, in storage order.
    pub fn loss_and_grads(&self, batch: &[Scored], reduction: Reduction) -> Result<(f64, Vec<Tensor<T>>), ModelError> {
        let mut tape = Tape::new();
        let g = self.loss_graph(&mut tape, batch, reduction, true)?;
        tape.backward(g.loss)?;
        let loss = tape.value(g.loss)?.item().to_f64().unwrap();
        let grads = g.params.iter().map(|&v| tape.grad(v)).collect::<Result<_, _>>()?;
        Ok((loss, grads))
    }

    /// Greedy continuation of one prefix. The stop or newline token that ends
    /// decoding is included in the output.
    pub fn greedy_decode(&self, prefix: &[u32], max_new: usize, stop: &HashSet<u32>) -> Result<Vec<u32>, ModelError> {
        Ok(self.greedy_decode_batch(&[prefix.to_vec()], max_new, stop)?.remove(0))
    }

    /// Greedy decoding of several prefixes at once; each result equals what
    /// [`greedy_decode`](Self::greedy_decode) would return for that prefix.
    pub fn greedy_decode_batch(
        &self,
        prefixes: &[Vec<u32>],
        max_new: usize,
        stop: &HashSet<u32>,
    ) -> Result<Vec<Vec<u32>>, ModelError> {
        for p in prefixes {
            self.check_tokens(p)?;
        }
        let mut seqs: Vec<Vec<u32>> = prefixes.to_vec();
        let mut out: Vec<Vec<u32>> = vec![Vec::new(); prefixes.len()];
        let mut live: Vec<usize> = (0..prefixes.len()).collect();
        for _ in 0..max_new {
            if live.is_empty() {
                break;
            }
            let views: Vec<&[u32]> = live.iter().map(|&i| seqs[i].as_slice()).collect();
            let logits = self.next_logits(&views)?;
            let mut still = Vec::with_capacity(live.len());
            for (&i, row) in live.iter().zip(&logits) {
                let next = argmax(row) as u32;
                out[i].push(next);
                seqs[i].push(next);
                let done = next == NEWLINE || stop.contains(&next) || seqs[i].len() >= self.config.ctx;
                if !done {
                    still.push(i);
                }
            }
            live = still;
        }
        Ok(out)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(n: usize) -> Vocab {
        let words: Vec<String> = (0..n).map(|i| format!("w{i}")).collect();
        Vocab::from_texts(words.iter().map(String::as_str))
    }

    fn tiny(seed: u64) -> ModelState<f64> {
        let v = vocab(20);
        let mut c = ModelConfig::new(2, 2, 8, 16, v.len(), seed);
        c.ff_dim = 16;
        ModelState::init(c, v).unwrap()
    }

    #[test]
    fn desk_param_count_matches_layout() {
        let v = vocab(994);
        let c = ModelConfig::desk(v.len());
        let m = ModelState::<f32>::init(c.clone(), v).unwrap();
        assert_eq!(m.param_count(), c.param_count());
    }

    #[test]
    fn rejects_bad_configs() {
        let v = vocab(10);
        let c = ModelConfig::new(1, 7, 256, 16, v.len(), 0);
        assert!(matches!(ModelState::<f32>::init(c, v.clone()), Err(ModelError::Config(_))));
        let c = ModelConfig::new(1, 2, 8, 16, v.len() + 1, 0);
        assert!(matches!(ModelState::<f32>::init(c, v), Err(ModelError::VocabMismatch { .. })));
    }

    #[test]
    fn init_is_seeded() {
        assert_eq!(tiny(3), tiny(3));
        assert_ne!(tiny(3).params(), tiny(4).params());
    }

    #[test]
    fn forward_shapes_and_limits() {
        let m = tiny(1);
        assert_eq!(m.forward(&[7]).unwrap().shape(), &[1, m.config.vocab_size]);
        assert!(matches!(m.forward(&[7; 17]), Err(ModelError::TooLong { .. })));
        assert!(matches!(m.forward(&[]), Err(ModelError::Empty)));
        assert!(matches!(m.forward(&[99]), Err(ModelError::BadToken { .. })));
    }

    #[test]
    fn batched_decode_matches_single() {
        let m = tiny(2);
        let stop = HashSet::new();
        let prefixes = vec![vec![1, 6, 7], vec![1, 9], vec![1, 10, 11, 12, 13]];
        let batch = m.greedy_decode_batch(&prefixes, 5, &stop).unwrap();
        for (p, b) in prefixes.iter().zip(&batch) {
            assert_eq!(&m.greedy_decode(p, 5, &stop).unwrap(), b);
        }
        assert!(m.greedy_decode(&[1, 6], 0, &stop).unwrap().is_empty());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0f32]), 0);
    }
}
