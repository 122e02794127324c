#include "wgqa/model.hpp"

#include <cmath>

#include "wgqa/autograd.hpp"
#include "wgqa/errors.hpp"
#include "wgqa/kernels.hpp"
#include "wgqa/rng.hpp"

namespace wgqa {

namespace {

constexpr double kRmsEps = 1e-6;

// Root-mean-square normalization without learnable gain: y = x / rms(x).
// One of the standard pre-norm placements; chosen here because it keeps
// every learnable parameter inside projection/embedding matrices.
NormTrace rms_norm(const Tensor& x) {
    NormTrace t;
    t.x = x;
    t.y = Tensor(x.shape());
    const std::size_t n = x.rows(), d = x.cols();
    t.inv.resize(n);
    for (std::size_t r = 0; r < n; ++r) {
        double ss = 0.0;
        for (std::size_t c = 0; c < d; ++c) ss += x.at(r, c) * x.at(r, c);
        const double inv = 1.0 / std::sqrt(ss / static_cast<double>(d) + kRmsEps);
        t.inv[r] = inv;
        for (std::size_t c = 0; c < d; ++c) t.y.at(r, c) = x.at(r, c) * inv;
    }
    return t;
}

// d(loss)/dx for y = x * inv(x): dx_j = inv*dy_j - inv^3 * x_j * (dy.x)/d.
Tensor rms_norm_backward(const NormTrace& t, const Tensor& dy) {
    if (!t.x.same_shape(dy)) {
        throw DimensionError("rms_norm_backward: gradient shape " + dy.shape_str() +
                             " does not match activation shape " + t.x.shape_str());
    }
    const std::size_t n = t.x.rows(), d = t.x.cols();
    Tensor dx(t.x.shape());
    for (std::size_t r = 0; r < n; ++r) {
        double dot = 0.0;
        for (std::size_t c = 0; c < d; ++c) dot += dy.at(r, c) * t.x.at(r, c);
        const double inv = t.inv[r];
        const double k = inv * inv * inv * dot / static_cast<double>(d);
        for (std::size_t c = 0; c < d; ++c) {
            dx.at(r, c) = inv * dy.at(r, c) - k * t.x.at(r, c);
        }
    }
    return dx;
}

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

Tensor gelu(const Tensor& x) {
    Tensor y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        y[i] = 0.5 * x[i] * (1.0 + std::erf(x[i] * kInvSqrt2));
    }
    return y;
}

Tensor gelu_prime(const Tensor& x) {
    Tensor y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        y[i] = 0.5 * (1.0 + std::erf(x[i] * kInvSqrt2)) +
               x[i] * kInvSqrt2Pi * std::exp(-0.5 * x[i] * x[i]);
    }
    return y;
}

Tensor embed(const ToyModel& model, const std::vector<std::size_t>& tokens) {
    const ModelConfig& cfg = model.config;
    if (tokens.empty()) {
        throw ConfigError("model input must hold at least one token");
    }
    if (tokens.size() > cfg.max_seq) {
        throw ConfigError("model input of " + std::to_string(tokens.size()) +
                          " tokens exceeds max_seq " + std::to_string(cfg.max_seq));
    }
    Tensor x({tokens.size(), cfg.d_model});
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] >= cfg.vocab_size) {
            throw ConfigError("token id " + std::to_string(tokens[i]) +
                              " is outside vocab_size " + std::to_string(cfg.vocab_size));
        }
        for (std::size_t c = 0; c < cfg.d_model; ++c) {
            x.at(i, c) = model.embedding.at(tokens[i], c) + model.pos.at(i, c);
        }
    }
    return x;
}

void embed_backward(const std::vector<std::size_t>& tokens, const Tensor& dx, ToyModel& grads) {
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        for (std::size_t c = 0; c < dx.cols(); ++c) {
            grads.embedding.at(tokens[i], c) += dx.at(i, c);
            grads.pos.at(i, c) += dx.at(i, c);
        }
    }
}

// result = result + gelu(norm(x) * w1) * w2, recording the pieces backward
// needs. Returns the updated stream.
Tensor ffn_forward(const Tensor& x, const FeedForward& ffn, FfnTrace& t) {
    t.norm = rms_norm(x);
    t.pre = matmul(t.norm.y, ffn.w1);
    t.act = gelu(t.pre);
    return add(x, matmul(t.act, ffn.w2));
}

// Pushes d(stream-after) back to d(stream-before), accumulating w1/w2 grads.
void ffn_backward(const FeedForward& ffn, const FfnTrace& t, Tensor& dy, FeedForward& gffn) {
    add_inplace(gffn.w2, matmul_at(t.act, dy));
    const Tensor d_act = matmul_bt(dy, ffn.w2);
    const Tensor d_pre = hadamard(d_act, gelu_prime(t.pre));
    add_inplace(gffn.w1, matmul_at(t.norm.y, d_pre));
    add_inplace(dy, rms_norm_backward(t.norm, matmul_bt(d_pre, ffn.w1)));
}

void accumulate_attention(AttentionBlock& g, const Gradients& src) {
    add_inplace(g.proj.w_q, src.d_w_q);
    add_inplace(g.proj.w_k, src.d_w_k);
    add_inplace(g.proj.w_v, src.d_w_v);
    add_inplace(g.proj.w_o, src.d_w_o);
    if (g.agg.has_value()) {
        if (!src.d_agg.has_value()) {
            throw DimensionError("attention gradients lack aggregation weights the block has");
        }
        add_inplace(g.agg->w_k_agg, src.d_agg->w_k_agg);
        add_inplace(g.agg->w_v_agg, src.d_agg->w_v_agg);
    }
}

AttentionBlock zero_block(const AttentionConfig& cfg) {
    const std::size_t d = cfg.d_model;
    const std::size_t kv_cols =
        (cfg.weighting != Weighting::None ? cfg.n_heads : cfg.n_kv_groups) * cfg.head_dim();
    AttentionBlock block{cfg,
                         ProjectionSet{Tensor({d, d}), Tensor({d, kv_cols}),
                                       Tensor({d, kv_cols}), Tensor({d, d})},
                         std::nullopt};
    if (cfg.weighting != Weighting::None) {
        switch (cfg.weighting) {
            case Weighting::Scalar:
                block.agg = AggregationWeights{Tensor({cfg.n_heads}), Tensor({cfg.n_heads})};
                break;
            case Weighting::Row:
                block.agg = AggregationWeights{Tensor({cfg.n_heads, d}),
                                               Tensor({cfg.n_heads, d})};
                break;
            case Weighting::Col:
                block.agg = AggregationWeights{Tensor({cfg.n_heads, cfg.head_dim()}),
                                               Tensor({cfg.n_heads, cfg.head_dim()})};
                break;
            case Weighting::None: break;
        }
    }
    return block;
}

ToyModel zero_model(const ModelConfig& cfg) {
    cfg.validate();
    ToyModel m;
    m.config = cfg;
    m.embedding = Tensor({cfg.vocab_size, cfg.d_model});
    m.pos = Tensor({cfg.max_seq, cfg.d_model});
    m.encoder.attn = zero_block(cfg.encoder_attention());
    m.encoder.ffn = FeedForward{Tensor({cfg.d_model, 4 * cfg.d_model}),
                                Tensor({4 * cfg.d_model, cfg.d_model})};
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        DecoderLayer layer;
        layer.self_attn = zero_block(cfg.decoder_self_attention());
        layer.cross_attn = zero_block(cfg.decoder_cross_attention());
        layer.ffn = FeedForward{Tensor({cfg.d_model, 4 * cfg.d_model}),
                                Tensor({4 * cfg.d_model, cfg.d_model})};
        m.decoder.push_back(std::move(layer));
    }
    m.out_proj = Tensor({cfg.d_model, cfg.vocab_size});
    return m;
}

void require_shape(const std::string& what, const Tensor& t,
                   const std::vector<std::size_t>& want) {
    if (t.shape() != want) {
        std::string want_str = "[";
        for (std::size_t i = 0; i < want.size(); ++i) {
            if (i) want_str += "x";
            want_str += std::to_string(want[i]);
        }
        want_str += "]";
        throw DimensionError("model tensor " + what + " has shape " + t.shape_str() +
                             ", expected " + want_str);
    }
}

}  // namespace

void ModelConfig::validate() const {
    if (vocab_size < kFirstPayloadToken + 1) {
        throw ConfigError("vocab_size must be at least " +
                          std::to_string(kFirstPayloadToken + 1) +
                          " (start token, end token, one payload token)");
    }
    if (max_seq < 2) {
        throw ConfigError("max_seq must be at least 2");
    }
    if (n_layers == 0) {
        throw ConfigError("the decoder needs at least one layer");
    }
    encoder_attention().validate();
    decoder_self_attention().validate();
    decoder_cross_attention().validate();
}

AttentionConfig ModelConfig::encoder_attention() const {
    return AttentionConfig{d_model, n_heads,  n_heads, Weighting::None,
                           init,    false,    false};
}

AttentionConfig ModelConfig::decoder_self_attention() const {
    return AttentionConfig{d_model, n_heads, n_kv_groups, weighting, init, true, false};
}

AttentionConfig ModelConfig::decoder_cross_attention() const {
    return AttentionConfig{d_model, n_heads, n_kv_groups, weighting, init, false, true};
}

ModelConfig ModelConfig::from_checkpoint(const Checkpoint& ckpt) {
    ModelConfig cfg;
    cfg.d_model = ckpt.metadata_uint("d_model");
    cfg.n_heads = ckpt.metadata_uint("n_heads");
    cfg.n_kv_groups = ckpt.metadata_uint("n_kv_groups");
    cfg.n_layers = ckpt.metadata_uint("n_layers");
    cfg.vocab_size = ckpt.metadata_uint("vocab_size");
    cfg.max_seq = ckpt.metadata_uint("max_seq");
    cfg.weighting = variant_spec(ckpt.metadata_at("variant")).weighting;
    cfg.init = init_from_string(ckpt.metadata_at("init"));
    cfg.validate();
    return cfg;
}

void ToyModel::validate() const {
    config.validate();
    require_shape("embedding", embedding, {config.vocab_size, config.d_model});
    require_shape("pos", pos, {config.max_seq, config.d_model});
    require_shape("out_proj", out_proj, {config.d_model, config.vocab_size});
    encoder.attn.validate();
    require_shape("encoder ffn w1", encoder.ffn.w1, {config.d_model, 4 * config.d_model});
    require_shape("encoder ffn w2", encoder.ffn.w2, {4 * config.d_model, config.d_model});
    if (decoder.size() != config.n_layers) {
        throw ConfigError("model has " + std::to_string(decoder.size()) +
                          " decoder layers, config says " + std::to_string(config.n_layers));
    }
    for (const DecoderLayer& layer : decoder) {
        layer.self_attn.validate();
        layer.cross_attn.validate();
        require_shape("decoder ffn w1", layer.ffn.w1, {config.d_model, 4 * config.d_model});
        require_shape("decoder ffn w2", layer.ffn.w2, {4 * config.d_model, config.d_model});
    }
}

std::size_t ToyModel::param_count() const {
    std::size_t total = 0;
    for (const ParamRef& ref : parameter_refs(*const_cast<ToyModel*>(this))) {
        total += ref.tensor->size();
    }
    return total;
}

ToyModel random_model(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    SeededRng rng(seed);
    const double emb_scale = 1.0 / std::sqrt(static_cast<double>(config.d_model));
    const double proj_scale = emb_scale;
    const double ffn_out_scale = 1.0 / std::sqrt(static_cast<double>(4 * config.d_model));

    ToyModel m;
    m.config = config;
    m.embedding = scale(rng.gaussian_tensor({config.vocab_size, config.d_model}), emb_scale);
    m.pos = scale(rng.gaussian_tensor({config.max_seq, config.d_model}), emb_scale);
    m.encoder.attn = make_random_block(config.encoder_attention(), rng, proj_scale);
    m.encoder.ffn.w1 =
        scale(rng.gaussian_tensor({config.d_model, 4 * config.d_model}), proj_scale);
    m.encoder.ffn.w2 =
        scale(rng.gaussian_tensor({4 * config.d_model, config.d_model}), ffn_out_scale);
    for (std::size_t l = 0; l < config.n_layers; ++l) {
        DecoderLayer layer;
        layer.self_attn = make_random_block(config.decoder_self_attention(), rng, proj_scale);
        layer.cross_attn = make_random_block(config.decoder_cross_attention(), rng, proj_scale);
        layer.ffn.w1 =
            scale(rng.gaussian_tensor({config.d_model, 4 * config.d_model}), proj_scale);
        layer.ffn.w2 =
            scale(rng.gaussian_tensor({4 * config.d_model, config.d_model}), ffn_out_scale);
        m.decoder.push_back(std::move(layer));
    }
    m.out_proj = scale(rng.gaussian_tensor({config.d_model, config.vocab_size}), proj_scale);
    m.validate();
    return m;
}

ToyModel zeros_like(const ToyModel& model) { return zero_model(model.config); }

std::vector<ParamRef> parameter_refs(ToyModel& m) {
    std::vector<ParamRef> refs;
    refs.push_back({"embedding", &m.embedding});
    refs.push_back({"pos", &m.pos});
    auto add_block = [&refs](const std::string& base, AttentionBlock& block) {
        refs.push_back({base + ".wq", &block.proj.w_q});
        refs.push_back({base + ".wk", &block.proj.w_k});
        refs.push_back({base + ".wv", &block.proj.w_v});
        refs.push_back({base + ".wo", &block.proj.w_o});
        if (block.agg.has_value()) {
            refs.push_back({base + ".agg_k", &block.agg->w_k_agg});
            refs.push_back({base + ".agg_v", &block.agg->w_v_agg});
        }
    };
    add_block("encoder.0.self", m.encoder.attn);
    refs.push_back({"encoder.0.ffn.w1", &m.encoder.ffn.w1});
    refs.push_back({"encoder.0.ffn.w2", &m.encoder.ffn.w2});
    for (std::size_t l = 0; l < m.decoder.size(); ++l) {
        const std::string base = "decoder." + std::to_string(l);
        add_block(base + ".self", m.decoder[l].self_attn);
        add_block(base + ".cross", m.decoder[l].cross_attn);
        refs.push_back({base + ".ffn.w1", &m.decoder[l].ffn.w1});
        refs.push_back({base + ".ffn.w2", &m.decoder[l].ffn.w2});
    }
    refs.push_back({"out_proj", &m.out_proj});
    return refs;
}

Checkpoint to_checkpoint(const ToyModel& model) {
    model.validate();
    Checkpoint ckpt;
    const ModelConfig& cfg = model.config;
    ckpt.set_metadata("format_version", std::to_string(Checkpoint::kFormatVersion));
    ckpt.set_metadata("d_model", std::to_string(cfg.d_model));
    ckpt.set_metadata("n_heads", std::to_string(cfg.n_heads));
    ckpt.set_metadata("n_kv_groups", std::to_string(cfg.n_kv_groups));
    ckpt.set_metadata("n_layers", std::to_string(cfg.n_layers));
    ckpt.set_metadata("vocab_size", std::to_string(cfg.vocab_size));
    ckpt.set_metadata("max_seq", std::to_string(cfg.max_seq));
    ckpt.set_metadata("variant", variant_name(cfg.weighting, cfg.n_kv_groups, cfg.n_heads));
    ckpt.set_metadata("init", to_string(cfg.init));
    for (const ParamRef& ref : parameter_refs(const_cast<ToyModel&>(model))) {
        ckpt.add_tensor(ref.name, *ref.tensor);
    }
    ckpt.validate();
    return ckpt;
}

ToyModel model_from_checkpoint(const Checkpoint& ckpt) {
    ckpt.validate();
    ToyModel m = zero_model(ModelConfig::from_checkpoint(ckpt));
    const std::vector<ParamRef> refs = parameter_refs(m);
    if (ckpt.tensors().size() != refs.size()) {
        throw FormatError(FormatFault::Inconsistent,
                          "checkpoint holds " + std::to_string(ckpt.tensors().size()) +
                              " tensors, the model layout needs " +
                              std::to_string(refs.size()));
    }
    for (const ParamRef& ref : refs) {
        const Tensor& src = ckpt.tensor(ref.name);  // throws if absent
        if (src.shape() != ref.tensor->shape()) {
            throw FormatError(FormatFault::Inconsistent,
                              "checkpoint tensor '" + ref.name + "' has shape " +
                                  src.shape_str() + ", the model needs " +
                                  ref.tensor->shape_str());
        }
        *ref.tensor = src;
    }
    m.validate();
    return m;
}

Tensor encode(const ToyModel& model, const std::vector<std::size_t>& src, EncoderTrace* trace) {
    const Tensor x0 = embed(model, src);
    NormTrace n1 = rms_norm(x0);
    ForwardResult attn = attention_forward(model.encoder.attn, n1.y, n1.y);
    const Tensor x1 = add(x0, attn.output);
    FfnTrace ffn;
    const Tensor x2 = ffn_forward(x1, model.encoder.ffn, ffn);
    NormTrace n3 = rms_norm(x2);
    Tensor out = n3.y;
    if (trace != nullptr) {
        trace->tokens = src;
        trace->attn_norm = std::move(n1);
        trace->attn = std::move(attn.cache);
        trace->ffn = std::move(ffn);
        trace->out_norm = std::move(n3);
        trace->output = out;
    }
    return out;
}

Tensor decode_logits(const ToyModel& model, const std::vector<std::size_t>& tgt_in,
                     const Tensor& enc_out, DecoderTrace* trace) {
    Tensor y = embed(model, tgt_in);
    if (trace != nullptr) {
        trace->tokens = tgt_in;
        trace->layers.clear();
    }
    for (const DecoderLayer& layer : model.decoder) {
        DecoderLayerTrace lt;
        NormTrace sn = rms_norm(y);
        ForwardResult self_r = attention_forward(layer.self_attn, sn.y, sn.y);
        y = add(y, self_r.output);
        NormTrace cn = rms_norm(y);
        ForwardResult cross_r = attention_forward(layer.cross_attn, cn.y, enc_out);
        y = add(y, cross_r.output);
        y = ffn_forward(y, layer.ffn, lt.ffn);
        if (trace != nullptr) {
            lt.self_norm = std::move(sn);
            lt.self_cache = std::move(self_r.cache);
            lt.cross_norm = std::move(cn);
            lt.cross_cache = std::move(cross_r.cache);
            trace->layers.push_back(std::move(lt));
        }
    }
    NormTrace on = rms_norm(y);
    Tensor logits = matmul(on.y, model.out_proj);
    if (trace != nullptr) {
        trace->out_norm = std::move(on);
    }
    return logits;
}

std::pair<Tensor, ModelTrace> model_forward(const ToyModel& model,
                                            const std::vector<std::size_t>& src,
                                            const std::vector<std::size_t>& tgt_in) {
    ModelTrace trace;
    const Tensor enc_out = encode(model, src, &trace.enc);
    Tensor logits = decode_logits(model, tgt_in, enc_out, &trace.dec);
    return {std::move(logits), std::move(trace)};
}

void model_backward(const ToyModel& model, const ModelTrace& trace, const Tensor& d_logits,
                    ToyModel& grads) {
    const DecoderTrace& dt = trace.dec;
    if (d_logits.rank() != 2 || d_logits.rows() != dt.tokens.size() ||
        d_logits.cols() != model.config.vocab_size) {
        throw DimensionError("model_backward: d_logits shape " + d_logits.shape_str() +
                             " does not match " + std::to_string(dt.tokens.size()) + "x" +
                             std::to_string(model.config.vocab_size) + " logits");
    }
    if (dt.layers.size() != model.decoder.size()) {
        throw DimensionError("model_backward: trace has " + std::to_string(dt.layers.size()) +
                             " decoder layers, the model " +
                             std::to_string(model.decoder.size()));
    }

    // Output head.
    add_inplace(grads.out_proj, matmul_at(dt.out_norm.y, d_logits));
    Tensor dy = rms_norm_backward(dt.out_norm, matmul_bt(d_logits, model.out_proj));

    // Decoder stack, reversed. `dy` always carries the residual-stream
    // gradient at the point the forward pass had just written.
    Tensor d_enc(trace.enc.output.shape());
    for (std::size_t i = model.decoder.size(); i-- > 0;) {
        const DecoderLayer& layer = model.decoder[i];
        const DecoderLayerTrace& lt = dt.layers[i];
        ffn_backward(layer.ffn, lt.ffn, dy, grads.decoder[i].ffn);
        const Gradients gc = attention_backward(layer.cross_attn, lt.cross_cache, dy);
        accumulate_attention(grads.decoder[i].cross_attn, gc);
        add_inplace(d_enc, gc.d_x_kv);
        add_inplace(dy, rms_norm_backward(lt.cross_norm, gc.d_x_q));
        const Gradients gs = attention_backward(layer.self_attn, lt.self_cache, dy);
        accumulate_attention(grads.decoder[i].self_attn, gs);
        add_inplace(dy, rms_norm_backward(lt.self_norm, add(gs.d_x_q, gs.d_x_kv)));
    }
    embed_backward(dt.tokens, dy, grads);

    // Encoder, fed by the cross-attention key/value gradients.
    const EncoderTrace& et = trace.enc;
    Tensor dx = rms_norm_backward(et.out_norm, d_enc);
    ffn_backward(model.encoder.ffn, et.ffn, dx, grads.encoder.ffn);
    const Gradients ge = attention_backward(model.encoder.attn, et.attn, dx);
    accumulate_attention(grads.encoder.attn, ge);
    add_inplace(dx, rms_norm_backward(et.attn_norm, add(ge.d_x_q, ge.d_x_kv)));
    embed_backward(et.tokens, dx, grads);
}

TokenLoss cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels) {
    if (logits.rank() != 2 || logits.rows() != labels.size()) {
        throw DimensionError("cross_entropy: logits " + logits.shape_str() + " vs " +
                             std::to_string(labels.size()) + " labels");
    }
    TokenLoss out;
    out.d_logits = softmax_rows(logits);
    out.count = labels.size();
    for (std::size_t r = 0; r < labels.size(); ++r) {
        if (labels[r] >= logits.cols()) {
            throw ConfigError("cross_entropy: label " + std::to_string(labels[r]) +
                              " outside vocab of " + std::to_string(logits.cols()));
        }
        const double p = out.d_logits.at(r, labels[r]);
        if (!(p > 0.0) || !std::isfinite(p)) {
            throw NumericError("cross_entropy: degenerate probability at row " +
                               std::to_string(r));
        }
        out.loss_sum += -std::log(p);
        out.d_logits.at(r, labels[r]) -= 1.0;
    }
    return out;
}

std::vector<std::size_t> greedy_decode(const ToyModel& model,
                                       const std::vector<std::size_t>& src,
                                       std::size_t max_len) {
    if (max_len == 0) {
        throw ConfigError("greedy_decode needs max_len >= 1");
    }
    const Tensor enc_out = encode(model, src, nullptr);
    std::vector<std::size_t> prefix = {kBosToken};
    std::vector<std::size_t> emitted;
    while (emitted.size() < max_len) {
        const Tensor logits = decode_logits(model, prefix, enc_out, nullptr);
        const std::size_t last = logits.rows() - 1;
        std::size_t best = 0;
        for (std::size_t t = 1; t < logits.cols(); ++t) {
            if (logits.at(last, t) > logits.at(last, best)) best = t;
        }
        emitted.push_back(best);
        if (best == kEosToken) break;
        if (prefix.size() == model.config.max_seq) break;  // cannot extend further
        prefix.push_back(best);
    }
    return emitted;
}

}  // namespace wgqa
