//! Two from-scratch next-token predictors behind one forward contract, so
//! objectives and metrics never care which architecture they drive: a
//! decoder-only causal transformer and a stack of gated-linear recurrent
//! cells. Both map a B×T token grid to B×T×V logits where position t
//! parameterizes the distribution of token t+1.

mod recurrent;
mod transformer;

pub use recurrent::Recurrent;
pub use transformer::Transformer;

use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::Real;
use crate::rng::{stream, Domain};
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;

pub const DEFAULT_INIT_SCALE: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    #[serde(default = "default_mlp_expansion")]
    pub mlp_expansion: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
}

fn default_mlp_expansion() -> usize {
    4
}

fn default_init_scale() -> f64 {
    DEFAULT_INIT_SCALE
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 {
            return Err(Error::Config(
                "layers, width, and heads must all be positive".into(),
            ));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.mlp_expansion == 0 || self.max_seq_len == 0 || self.vocab_size == 0 {
            return Err(Error::Config(
                "mlp expansion, context length, and vocab must be positive".into(),
            ));
        }
        if !self.init_scale.is_finite() || self.init_scale < 0.0 {
            return Err(Error::Config(format!(
                "init scale {} must be finite and non-negative",
                self.init_scale
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecurrentConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub vocab_size: usize,
}

impl RecurrentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.vocab_size == 0 {
            return Err(Error::Config(
                "layers, width, and vocab must all be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case")]
pub enum ModelConfig {
    Transformer(TransformerConfig),
    Recurrent(RecurrentConfig),
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            ModelConfig::Transformer(c) => c.validate(),
            ModelConfig::Recurrent(c) => c.validate(),
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            ModelConfig::Transformer(c) => c.vocab_size,
            ModelConfig::Recurrent(c) => c.vocab_size,
        }
    }

    pub fn arch_name(&self) -> &'static str {
        match self {
            ModelConfig::Transformer(_) => "transformer",
            ModelConfig::Recurrent(_) => "recurrent",
        }
    }
}

/// Per-layer-norm parameter pair.
#[derive(Debug, Clone)]
pub struct NormParams<F: Real> {
    pub gain: Tensor<F>,
    pub shift: Tensor<F>,
}

impl<F: Real> NormParams<F> {
    fn unit(n: usize) -> Self {
        NormParams {
            gain: Tensor::full(&[n], F::ONE).param(),
            shift: Tensor::zeros(&[n]).param(),
        }
    }
}

/// Logits plus the tape ids of every parameter leaf, in `named_tensors`
/// order, so gradients can be pulled back into the matching tensors.
#[derive(Debug)]
pub struct ForwardPass {
    pub logits: ValueId,
    pub param_leaves: Vec<ValueId>,
}

#[derive(Debug, Clone)]
pub enum LanguageModel<F: Real> {
    Transformer(Transformer<F>),
    Recurrent(Recurrent<F>),
}

impl<F: Real> LanguageModel<F> {
    /// Fresh parameters: Gaussian weights at the configured scale, zero
    /// biases, unit norm gains; deterministic per seed.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, Domain::Init, 0);
        Ok(match config {
            ModelConfig::Transformer(c) => {
                LanguageModel::Transformer(Transformer::init(c, &mut rng))
            }
            ModelConfig::Recurrent(c) => LanguageModel::Recurrent(Recurrent::init(c, &mut rng)),
        })
    }

    pub fn config(&self) -> ModelConfig {
        match self {
            LanguageModel::Transformer(m) => ModelConfig::Transformer(m.config),
            LanguageModel::Recurrent(m) => ModelConfig::Recurrent(m.config),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.config().vocab_size()
    }

    /// Canonical (name, tensor) enumeration; initialization, checkpoints,
    /// and optimizer state all follow this order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<F>)> {
        match self {
            LanguageModel::Transformer(m) => m.named_tensors(),
            LanguageModel::Recurrent(m) => m.named_tensors(),
        }
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        match self {
            LanguageModel::Transformer(m) => m.named_tensors_mut(),
            LanguageModel::Recurrent(m) => m.named_tensors_mut(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Builds the full forward graph for a B×T grid of token ids.
    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        ids: &[u16],
        b: usize,
        t: usize,
    ) -> Result<ForwardPass> {
        match self {
            LanguageModel::Transformer(m) => m.forward(tape, ids, b, t),
            LanguageModel::Recurrent(m) => m.forward(tape, ids, b, t),
        }
    }

    /// Distribution over the next token after a single prefix: softmax of
    /// the final position's logits.
    pub fn next_token_distribution(&self, ids: &[u16]) -> Result<Vec<F>> {
        if ids.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, ids, 1, ids.len())?;
        let v = self.vocab_size();
        let logits = tape.value(pass.logits);
        let last = &logits[(ids.len() - 1) * v..];
        let max = last.iter().fold(last[0], |m, &x| m.maximum(x));
        let exps: Vec<F> = last.iter().map(|&x| (x - max).exp()).collect();
        let total: F = exps.iter().copied().sum();
        Ok(exps.into_iter().map(|e| e / total).collect())
    }

    /// Pulls the gradients of a backward pass into the parameter tensors'
    /// accumulators, matching leaves to tensors by position.
    pub fn accumulate_grads(&mut self, tape: &Tape<F>, pass: &ForwardPass) {
        let tensors = self.named_tensors_mut();
        debug_assert_eq!(tensors.len(), pass.param_leaves.len());
        for ((_, tensor), &leaf) in tensors.into_iter().zip(&pass.param_leaves) {
            if let Some(g) = tape.grad(leaf) {
                tensor.accumulate_grad(g);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.named_tensors_mut() {
            t.zero_grad();
        }
    }
}

pub(crate) fn randn_param<F: Real>(shape: &[usize], std: f64, rng: &mut ChaCha12Rng) -> Tensor<F> {
    Tensor::randn(shape, std, rng).param()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_transformer(vocab: usize) -> ModelConfig {
        ModelConfig::Transformer(TransformerConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            mlp_expansion: 4,
            max_seq_len: 12,
            vocab_size: vocab,
            init_scale: 0.02,
        })
    }

    fn small_recurrent(vocab: usize) -> ModelConfig {
        ModelConfig::Recurrent(RecurrentConfig {
            n_layers: 2,
            d_model: 12,
            vocab_size: vocab,
        })
    }

    #[test]
    fn same_seed_same_weights() {
        for config in [desk_transformer(11), small_recurrent(11)] {
            let a = LanguageModel::<f32>::init(&config, 5).unwrap();
            let b = LanguageModel::<f32>::init(&config, 5).unwrap();
            for ((_, ta), (_, tb)) in a.named_tensors().iter().zip(b.named_tensors()) {
                assert_eq!(ta.data, tb.data);
            }
            let c = LanguageModel::<f32>::init(&config, 6).unwrap();
            let differs = a
                .named_tensors()
                .iter()
                .zip(c.named_tensors())
                .any(|((_, ta), (_, tc))| ta.data != tc.data);
            assert!(differs, "{} ignores the seed", config.arch_name());
        }
    }

    #[test]
    fn transformer_param_count_matches_closed_form() {
        let (l, d, v, p, e) = (2usize, 16usize, 11usize, 12usize, 4usize);
        let model = LanguageModel::<f32>::init(&desk_transformer(v), 0).unwrap();
        let per_block = 2 * d // ln1
            + d * 3 * d + 3 * d // qkv
            + d * d + d // out projection
            + 2 * d // ln2
            + d * e * d + e * d // mlp up
            + e * d * d + d; // mlp down
        let expected = v * d + p * d + l * per_block + 2 * d + d * v + v;
        assert_eq!(model.param_count(), expected);
    }

    #[test]
    fn recurrent_param_count_matches_closed_form() {
        let (l, d, v, e) = (2usize, 12usize, 11usize, 4usize);
        let model = LanguageModel::<f32>::init(&small_recurrent(v), 0).unwrap();
        let per_block = 2 * d // ln1
            + d * d + d // gate
            + d * d + d // candidate
            + 2 * d // ln2
            + d * e * d + e * d // mlp up
            + e * d * d + d; // mlp down
        let expected = v * d + l * per_block + 2 * d + d * v + v;
        assert_eq!(model.param_count(), expected);
    }

    #[test]
    fn forward_shape_is_batch_by_time_by_vocab() {
        for config in [desk_transformer(11), small_recurrent(11)] {
            let model = LanguageModel::<f32>::init(&config, 1).unwrap();
            let mut tape = Tape::new();
            let ids = vec![0u16, 1, 2, 3, 4, 5, 6, 7];
            let pass = model.forward(&mut tape, &ids, 2, 4).unwrap();
            assert_eq!(tape.shape(pass.logits), &[2, 4, 11]);
        }
    }

    #[test]
    fn next_token_distribution_is_the_final_softmax() {
        for config in [desk_transformer(11), small_recurrent(11)] {
            let model = LanguageModel::<f64>::init(&config, 9).unwrap();
            let ids = vec![3u16, 1, 4, 1, 5];
            let probs = model.next_token_distribution(&ids).unwrap();
            assert_eq!(probs.len(), 11);
            let total: f64 = probs.iter().sum();
            assert!((total - 1.0).abs() < 1e-6, "sums to {total}");
            // cross-check against a forward pass softmaxed by the tape
            let mut tape = Tape::new();
            let pass = model.forward(&mut tape, &ids, 1, ids.len()).unwrap();
            let sm = tape.softmax(pass.logits).unwrap();
            let last = &tape.value(sm)[(ids.len() - 1) * 11..];
            for (a, b) in probs.iter().zip(last) {
                assert!((a - b).abs() < 1e-12);
            }
            let err = model.next_token_distribution(&[]).unwrap_err();
            assert!(matches!(err, Error::EmptyBatch));
        }
    }

    #[test]
    fn zero_scale_init_gives_uniform_predictions() {
        let mut config = desk_transformer(11);
        if let ModelConfig::Transformer(c) = &mut config {
            c.init_scale = 0.0;
        }
        let model = LanguageModel::<f64>::init(&config, 3).unwrap();
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, &[1, 2, 3], 1, 3).unwrap();
        let probs = tape.softmax(pass.logits).unwrap();
        for &p in tape.value(probs) {
            assert!((p - 1.0 / 11.0).abs() < 1e-12);
        }
    }

    #[test]
    fn transformer_rejects_sequences_beyond_context() {
        let model = LanguageModel::<f32>::init(&desk_transformer(11), 0).unwrap();
        let mut tape = Tape::new();
        let ids = vec![0u16; 13];
        let err = model.forward(&mut tape, &ids, 1, 13).unwrap_err();
        assert!(matches!(err, Error::ContextOverflow { max: 12, needed: 13 }));
    }

    #[test]
    fn recurrent_handles_any_length() {
        let model = LanguageModel::<f32>::init(&small_recurrent(11), 0).unwrap();
        let mut tape = Tape::new();
        let ids = vec![3u16; 40];
        let pass = model.forward(&mut tape, &ids, 1, 40).unwrap();
        assert_eq!(tape.shape(pass.logits), &[1, 40, 11]);
    }

    #[test]
    fn head_count_must_divide_width() {
        let config = ModelConfig::Transformer(TransformerConfig {
            n_layers: 1,
            d_model: 10,
            n_heads: 3,
            mlp_expansion: 4,
            max_seq_len: 8,
            vocab_size: 7,
            init_scale: 0.02,
        });
        assert!(matches!(
            LanguageModel::<f32>::init(&config, 0).unwrap_err(),
            Error::Config(_)
        ));
    }

    #[test]
    fn config_serializes_with_an_arch_tag() {
        let json = serde_json::to_string(&desk_transformer(11)).unwrap();
        assert!(json.contains("\"arch\":\"transformer\""), "got: {json}");
        let back: ModelConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, desk_transformer(11));
    }

    #[test]
    fn forward_is_deterministic() {
        for config in [desk_transformer(9), small_recurrent(9)] {
            let model = LanguageModel::<f32>::init(&config, 8).unwrap();
            let ids = vec![1u16, 8, 0, 5, 2, 7];
            let mut t1 = Tape::new();
            let p1 = model.forward(&mut t1, &ids, 2, 3).unwrap();
            let mut t2 = Tape::new();
            let p2 = model.forward(&mut t2, &ids, 2, 3).unwrap();
            assert_eq!(t1.value(p1.logits), t2.value(p2.logits));
        }
    }
}
