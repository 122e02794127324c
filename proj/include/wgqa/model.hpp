#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "wgqa/attention.hpp"
#include "wgqa/checkpoint.hpp"
#include "wgqa/tensor.hpp"

namespace wgqa {

// Token id conventions shared by the model, the tasks, and the trainer.
inline constexpr std::size_t kBosToken = 0;
inline constexpr std::size_t kEosToken = 1;
inline constexpr std::size_t kFirstPayloadToken = 2;

// Geometry plus the attention variant of the desk-scale encoder-decoder.
// The encoder always runs plain multi-head attention; grouping and the
// weighting scheme apply only to decoder self- and cross-attention.
struct ModelConfig {
    std::size_t d_model = 0;
    std::size_t n_heads = 0;
    std::size_t n_kv_groups = 0;
    std::size_t n_layers = 0;  // decoder layers; the encoder has one
    std::size_t vocab_size = 0;
    std::size_t max_seq = 0;
    Weighting weighting = Weighting::None;
    InitScheme init = InitScheme::MeanEquivalent;

    void validate() const;  // throws ConfigError
    AttentionConfig encoder_attention() const;
    AttentionConfig decoder_self_attention() const;
    AttentionConfig decoder_cross_attention() const;
    static ModelConfig from_checkpoint(const Checkpoint& ckpt);
};

// Position-wise feed-forward: gelu(x * w1) * w2, width 4 * d_model.
struct FeedForward {
    Tensor w1;  // [d x 4d]
    Tensor w2;  // [4d x d]
};

struct EncoderLayer {
    AttentionBlock attn;
    FeedForward ffn;
};

struct DecoderLayer {
    AttentionBlock self_attn;   // causal
    AttentionBlock cross_attn;  // keys/values from the encoder output
    FeedForward ffn;
};

// The toy encoder-decoder. Residual layout is pre-norm: every attention
// and feed-forward sublayer reads a normalized copy of the stream and adds
// its result back, and each stack ends with one final normalization. The
// normalizer is parameter-free root-mean-square scaling, so the checkpoint
// holds projection matrices, embeddings, and aggregation weights only.
// Token and position embeddings are shared between encoder and decoder.
struct ToyModel {
    ModelConfig config;
    Tensor embedding;  // [vocab x d]
    Tensor pos;        // [max_seq x d]
    EncoderLayer encoder;
    std::vector<DecoderLayer> decoder;
    Tensor out_proj;  // [d x vocab]

    void validate() const;
    std::size_t param_count() const;
};

ToyModel random_model(const ModelConfig& config, std::uint64_t seed);

// Same structure as `model`, every tensor zero: gradient and optimizer
// state containers.
ToyModel zeros_like(const ToyModel& model);

Checkpoint to_checkpoint(const ToyModel& model);
ToyModel model_from_checkpoint(const Checkpoint& ckpt);

// Named references to every learnable tensor, in checkpoint layout order.
// Structurally identical models (e.g. a model and its zeros_like) yield
// aligned lists.
struct ParamRef {
    std::string name;
    Tensor* tensor;
};
std::vector<ParamRef> parameter_refs(ToyModel& model);

// ---- forward/backward plumbing ----

// One normalization site: input, normalized output, and the per-row
// reciprocal root-mean-square factors the backward pass reuses.
struct NormTrace {
    Tensor x;
    Tensor y;
    std::vector<double> inv;
};

struct FfnTrace {
    NormTrace norm;
    Tensor pre;  // normed input times w1, before the nonlinearity
    Tensor act;  // gelu(pre)
};

struct EncoderTrace {
    std::vector<std::size_t> tokens;
    NormTrace attn_norm;
    ForwardCache attn;
    FfnTrace ffn;
    NormTrace out_norm;
    Tensor output;  // normalized encoder memory fed to cross-attention
};

struct DecoderLayerTrace {
    NormTrace self_norm;
    ForwardCache self_cache;
    NormTrace cross_norm;
    ForwardCache cross_cache;
    FfnTrace ffn;
};

struct DecoderTrace {
    std::vector<std::size_t> tokens;
    std::vector<DecoderLayerTrace> layers;
    NormTrace out_norm;
};

struct ModelTrace {
    EncoderTrace enc;
    DecoderTrace dec;
};

// Encoder memory for a source sequence; fills `trace` when non-null.
Tensor encode(const ToyModel& model, const std::vector<std::size_t>& src, EncoderTrace* trace);

// Next-token logits [len(tgt_in) x vocab] for a teacher-forced decoder
// input; fills `trace` when non-null.
Tensor decode_logits(const ToyModel& model, const std::vector<std::size_t>& tgt_in,
                     const Tensor& enc_out, DecoderTrace* trace);

std::pair<Tensor, ModelTrace> model_forward(const ToyModel& model,
                                            const std::vector<std::size_t>& src,
                                            const std::vector<std::size_t>& tgt_in);

// Accumulates parameter gradients for d(loss)/d(logits) into `grads`
// (a zeros_like-shaped model), walking decoder and encoder in reverse.
void model_backward(const ToyModel& model, const ModelTrace& trace, const Tensor& d_logits,
                    ToyModel& grads);

// Mean token negative log-likelihood pieces: summed loss, token count, and
// the unscaled logit gradient (softmax minus one-hot); divide by the
// global token count to get the mean-loss gradient.
struct TokenLoss {
    double loss_sum = 0.0;
    std::size_t count = 0;
    Tensor d_logits;
};
TokenLoss cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels);

// Argmax continuation from the start token until the end token or
// max_len emitted tokens; returns the emitted tokens (end token included
// when reached).
std::vector<std::size_t> greedy_decode(const ToyModel& model,
                                       const std::vector<std::size_t>& src, std::size_t max_len);

}  // namespace wgqa
