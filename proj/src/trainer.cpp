#include "wgqa/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "wgqa/errors.hpp"
#include "wgqa/kernels.hpp"

namespace wgqa {

double TrainConfig::lr_at(std::size_t t) const {
    if (t < 1 || t > total_steps()) {
        throw ConfigError("step " + std::to_string(t) + " outside schedule of " +
                          std::to_string(total_steps()) + " steps");
    }
    return initial_lr * (1.0 - static_cast<double>(t) / static_cast<double>(total_steps()));
}

void TrainConfig::validate() const {
    if (initial_lr < 0.0 || !std::isfinite(initial_lr)) {
        throw ConfigError("initial_lr must be finite and non-negative");
    }
    if (epochs == 0 || steps_per_epoch == 0 || batch_size == 0) {
        throw ConfigError("epochs, steps_per_epoch, and batch_size must all be >= 1");
    }
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
        throw ConfigError("adam betas must lie in [0, 1)");
    }
    if (adam_eps <= 0.0 || weight_decay < 0.0) {
        throw ConfigError("adam_eps must be positive and weight_decay non-negative");
    }
}

AdamWState make_adamw_state(const ToyModel& model) {
    return AdamWState{zeros_like(model), zeros_like(model)};
}

void adamw_update_tensor(Tensor& param, const Tensor& grad, Tensor& m, Tensor& v,
                         std::size_t t, double lr, const TrainConfig& cfg,
                         const std::string& name) {
    if (!param.same_shape(grad) || !param.same_shape(m) || !param.same_shape(v)) {
        throw DimensionError("adamw update for '" + name + "': parameter " + param.shape_str() +
                             ", gradient " + grad.shape_str() + ", state " + m.shape_str() + "/" +
                             v.shape_str() + " must share one shape");
    }
    if (t < 1) {
        throw ConfigError("adamw step index must be >= 1");
    }
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < param.size(); ++i) {
        const double g = grad[i];
        if (!std::isfinite(g)) {
            throw NumericError("non-finite gradient in parameter '" + name + "'");
        }
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        const double m_hat = m[i] / bc1;
        const double v_hat = v[i] / bc2;
        param[i] -= lr * (m_hat / (std::sqrt(v_hat) + cfg.adam_eps) +
                          cfg.weight_decay * param[i]);
    }
}

void adamw_step(ToyModel& params, const ToyModel& grads, AdamWState& state, std::size_t t,
                const TrainConfig& cfg) {
    cfg.validate();
    const double lr = cfg.lr_at(t);
    const std::vector<ParamRef> p = parameter_refs(params);
    const std::vector<ParamRef> g = parameter_refs(const_cast<ToyModel&>(grads));
    const std::vector<ParamRef> m = parameter_refs(state.m);
    const std::vector<ParamRef> v = parameter_refs(state.v);
    if (g.size() != p.size() || m.size() != p.size() || v.size() != p.size()) {
        throw DimensionError("optimizer state does not mirror the model's parameter list");
    }
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (g[i].name != p[i].name) {
            throw DimensionError("gradient list mismatch at '" + g[i].name + "' vs '" +
                                 p[i].name + "'");
        }
        adamw_update_tensor(*p[i].tensor, *g[i].tensor, *m[i].tensor, *v[i].tensor, t, lr, cfg,
                            p[i].name);
    }
}

std::string to_string(TaskKind kind) {
    switch (kind) {
        case TaskKind::Copy: return "copy";
        case TaskKind::Reverse: return "reverse";
        case TaskKind::TokenMap: return "tokenmap";
    }
    throw ConfigError("unknown task kind");
}

TaskKind task_from_string(const std::string& s) {
    if (s == "copy") return TaskKind::Copy;
    if (s == "reverse") return TaskKind::Reverse;
    if (s == "tokenmap") return TaskKind::TokenMap;
    throw ConfigError("unknown task '" + s + "' (expected copy/reverse/tokenmap)");
}

void ToyTask::validate() const {
    if (vocab_size < kFirstPayloadToken + 1) {
        throw ConfigError("task vocab_size must leave room for at least one payload token");
    }
    if (min_len == 0 || max_len < min_len) {
        throw ConfigError("task length range [" + std::to_string(min_len) + ", " +
                          std::to_string(max_len) + "] is empty or zero");
    }
    const std::size_t payload = vocab_size - kFirstPayloadToken;
    if (kind == TaskKind::TokenMap) {
        if (mapping.size() != payload) {
            throw ConfigError("tokenmap task needs a mapping over all " +
                              std::to_string(payload) + " payload tokens");
        }
        std::vector<bool> seen(payload, false);
        for (std::size_t target : mapping) {
            if (target >= payload || seen[target]) {
                throw ConfigError("tokenmap mapping must be a payload permutation");
            }
            seen[target] = true;
        }
    } else if (!mapping.empty()) {
        throw ConfigError("only tokenmap tasks carry a mapping");
    }
}

ToyTask make_task(TaskKind kind, std::size_t vocab_size, std::size_t min_len,
                  std::size_t max_len, std::uint64_t seed) {
    ToyTask task;
    task.kind = kind;
    task.vocab_size = vocab_size;
    task.min_len = min_len;
    task.max_len = max_len;
    task.seed = seed;
    if (kind == TaskKind::TokenMap) {
        const std::size_t payload = vocab_size >= kFirstPayloadToken
                                        ? vocab_size - kFirstPayloadToken
                                        : 0;
        task.mapping.resize(payload);
        std::iota(task.mapping.begin(), task.mapping.end(), std::size_t{0});
        SeededRng rng(seed);
        for (std::size_t i = payload; i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(rng.below(i));
            std::swap(task.mapping[i - 1], task.mapping[j]);
        }
    }
    task.validate();
    return task;
}

std::vector<std::size_t> task_transform(const ToyTask& task,
                                        const std::vector<std::size_t>& payload) {
    std::vector<std::size_t> out = payload;
    switch (task.kind) {
        case TaskKind::Copy: break;
        case TaskKind::Reverse: std::reverse(out.begin(), out.end()); break;
        case TaskKind::TokenMap:
            for (std::size_t& tok : out) {
                if (tok < kFirstPayloadToken || tok >= task.vocab_size) {
                    throw ConfigError("tokenmap transform saw non-payload token " +
                                      std::to_string(tok));
                }
                tok = task.mapping[tok - kFirstPayloadToken] + kFirstPayloadToken;
            }
            break;
    }
    return out;
}

Example draw_example(const ToyTask& task, SeededRng& rng) {
    task.validate();
    const std::size_t span = task.max_len - task.min_len + 1;
    const std::size_t len = task.min_len + static_cast<std::size_t>(rng.below(span));
    const std::size_t payload_count = task.vocab_size - kFirstPayloadToken;
    std::vector<std::size_t> payload(len);
    for (std::size_t& tok : payload) {
        tok = kFirstPayloadToken + static_cast<std::size_t>(rng.below(payload_count));
    }
    Example ex;
    ex.src = payload;
    ex.src.push_back(kEosToken);
    ex.target = task_transform(task, payload);
    ex.target.push_back(kEosToken);
    return ex;
}

namespace {

// Per-group mean aggregation weight over all decoder blocks: key groups
// first, then value groups.
std::vector<double> agg_group_means(const ToyModel& model) {
    if (model.config.weighting == Weighting::None) return {};
    const AttentionConfig cfg = model.config.decoder_self_attention();
    const std::size_t groups = cfg.n_kv_groups;
    std::vector<double> sums(2 * groups, 0.0);
    std::vector<std::size_t> counts(2 * groups, 0);
    for (const DecoderLayer& layer : model.decoder) {
        for (const AttentionBlock* block : {&layer.self_attn, &layer.cross_attn}) {
            const AggregationWeights& agg = block->agg.value();
            for (std::size_t side = 0; side < 2; ++side) {
                const Tensor& w = side == 0 ? agg.w_k_agg : agg.w_v_agg;
                const std::size_t per_head = w.size() / cfg.n_heads;
                for (std::size_t head = 0; head < cfg.n_heads; ++head) {
                    const std::size_t g = group_index(head, cfg);
                    for (std::size_t j = 0; j < per_head; ++j) {
                        sums[side * groups + g] += w[head * per_head + j];
                        counts[side * groups + g] += 1;
                    }
                }
            }
        }
    }
    for (std::size_t i = 0; i < sums.size(); ++i) {
        sums[i] /= static_cast<double>(counts[i]);
    }
    return sums;
}

std::vector<std::string> agg_column_names(const ToyModel& model) {
    if (model.config.weighting == Weighting::None) return {};
    std::vector<std::string> cols;
    for (const char* side : {"agg_k_g", "agg_v_g"}) {
        for (std::size_t g = 0; g < model.config.n_kv_groups; ++g) {
            cols.push_back(side + std::to_string(g));
        }
    }
    return cols;
}

}  // namespace

TrainLog train(ToyModel& model, const ToyTask& task, const TrainConfig& cfg) {
    cfg.validate();
    task.validate();
    model.validate();
    if (model.config.vocab_size != task.vocab_size) {
        throw ConfigError("model vocab_size " + std::to_string(model.config.vocab_size) +
                          " does not match task vocab_size " +
                          std::to_string(task.vocab_size));
    }
    if (task.max_len + 1 > model.config.max_seq) {
        throw ConfigError("task sequences up to " + std::to_string(task.max_len + 1) +
                          " tokens exceed the model's max_seq " +
                          std::to_string(model.config.max_seq));
    }

    const std::size_t total = cfg.total_steps();
    SeededRng rng(cfg.seed);
    AdamWState state = make_adamw_state(model);
    TrainLog log;
    log.agg_columns = agg_column_names(model);

    for (std::size_t t = 1; t <= total; ++t) {
        std::vector<Example> batch;
        batch.reserve(cfg.batch_size);
        std::size_t token_count = 0;
        for (std::size_t b = 0; b < cfg.batch_size; ++b) {
            batch.push_back(draw_example(task, rng));
            token_count += batch.back().target.size();
        }

        ToyModel grads = zeros_like(model);
        double loss_sum = 0.0;
        for (const Example& ex : batch) {
            std::vector<std::size_t> tgt_in;
            tgt_in.reserve(ex.target.size());
            tgt_in.push_back(kBosToken);
            tgt_in.insert(tgt_in.end(), ex.target.begin(), ex.target.end() - 1);
            auto [logits, trace] = model_forward(model, ex.src, tgt_in);
            TokenLoss ce = cross_entropy(logits, ex.target);
            loss_sum += ce.loss_sum;
            model_backward(model, trace,
                           scale(ce.d_logits, 1.0 / static_cast<double>(token_count)), grads);
        }
        const double loss = loss_sum / static_cast<double>(token_count);
        if (!std::isfinite(loss)) {
            throw NumericError("training diverged at step " + std::to_string(t));
        }
        adamw_step(model, grads, state, t, cfg);

        StepRecord rec;
        rec.step = t;
        rec.lr = cfg.lr_at(t);
        rec.loss = loss;
        rec.agg_means = agg_group_means(model);
        log.steps.push_back(std::move(rec));
    }
    return log;
}

std::string train_log_csv(const TrainLog& log) {
    std::ostringstream out;
    out << std::setprecision(17);
    out << "step,lr,loss";
    for (const std::string& col : log.agg_columns) out << "," << col;
    out << "\n";
    for (const StepRecord& rec : log.steps) {
        out << rec.step << "," << rec.lr << "," << rec.loss;
        for (double v : rec.agg_means) out << "," << v;
        out << "\n";
    }
    return out.str();
}

EvalResult evaluate(const ToyModel& model, const ToyTask& task, std::size_t n_examples) {
    if (n_examples == 0) {
        throw ConfigError("evaluate needs at least one example");
    }
    task.validate();
    model.validate();
    if (model.config.vocab_size != task.vocab_size) {
        throw ConfigError("model vocab_size " + std::to_string(model.config.vocab_size) +
                          " does not match task vocab_size " +
                          std::to_string(task.vocab_size));
    }
    // A distinct stream from training draws, still a pure function of the
    // task seed.
    SeededRng rng(task.seed ^ 0xA5A5A5A5A5A5A5A5ull);
    EvalResult result;
    result.n_examples = n_examples;
    std::size_t exact = 0, matched = 0, total_tokens = 0;
    for (std::size_t i = 0; i < n_examples; ++i) {
        const Example ex = draw_example(task, rng);
        const std::vector<std::size_t> decoded =
            greedy_decode(model, ex.src, model.config.max_seq);
        if (decoded == ex.target) ++exact;
        const std::size_t overlap = std::min(decoded.size(), ex.target.size());
        for (std::size_t j = 0; j < overlap; ++j) {
            if (decoded[j] == ex.target[j]) ++matched;
        }
        total_tokens += ex.target.size();
    }
    result.n_tokens = total_tokens;
    result.exact_match = static_cast<double>(exact) / static_cast<double>(n_examples);
    result.token_accuracy = static_cast<double>(matched) / static_cast<double>(total_tokens);
    return result;
}

}  // namespace wgqa
