#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "wgqa/model.hpp"
#include "wgqa/rng.hpp"

namespace wgqa {

// Optimization settings. The learning rate decays linearly to zero: step t
// (1-based) of T total steps runs at initial_lr * (1 - t/T), so the final
// step's rate is exactly zero.
struct TrainConfig {
    double initial_lr = 0.001;
    std::size_t epochs = 3;
    std::size_t steps_per_epoch = 100;
    std::size_t batch_size = 8;
    std::uint64_t seed = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.01;

    std::size_t total_steps() const { return epochs * steps_per_epoch; }
    double lr_at(std::size_t t) const;  // t in [1, total_steps]
    void validate() const;
};

// First/second moment accumulators, shaped like the model they update.
struct AdamWState {
    ToyModel m;
    ToyModel v;
};
AdamWState make_adamw_state(const ToyModel& model);

// One decoupled-weight-decay update on a single tensor; `t` is the 1-based
// step for bias correction and `lr` the already-scheduled rate. Non-finite
// gradients abort, naming the parameter.
void adamw_update_tensor(Tensor& param, const Tensor& grad, Tensor& m, Tensor& v,
                         std::size_t t, double lr, const TrainConfig& cfg,
                         const std::string& name);

// Applies adamw_update_tensor across all parameters at step t's scheduled
// learning rate.
void adamw_step(ToyModel& params, const ToyModel& grads, AdamWState& state, std::size_t t,
                const TrainConfig& cfg);

// Synthetic sequence-to-sequence tasks over the shared token conventions:
// payload symbols are kFirstPayloadToken..vocab-1; the encoder reads
// payload + end token; the decoder is teacher-forced from the start token
// and must emit transform(payload) + end token.
enum class TaskKind { Copy, Reverse, TokenMap };
std::string to_string(TaskKind kind);
TaskKind task_from_string(const std::string& s);

struct ToyTask {
    TaskKind kind = TaskKind::Copy;
    std::size_t vocab_size = 16;
    std::size_t min_len = 3;
    std::size_t max_len = 8;
    std::uint64_t seed = 0;
    // TokenMap's fixed payload bijection (index 0 <-> kFirstPayloadToken),
    // drawn from the task seed by make_task; empty for the other kinds.
    std::vector<std::size_t> mapping;

    void validate() const;
};
ToyTask make_task(TaskKind kind, std::size_t vocab_size, std::size_t min_len,
                  std::size_t max_len, std::uint64_t seed);

struct Example {
    std::vector<std::size_t> src;     // payload + end token
    std::vector<std::size_t> target;  // transform(payload) + end token
};

std::vector<std::size_t> task_transform(const ToyTask& task,
                                        const std::vector<std::size_t>& payload);
Example draw_example(const ToyTask& task, SeededRng& rng);

// One training step's log line. For weighted variants, agg_means holds the
// per-group mean aggregation weight after the step's update, averaged over
// all decoder blocks: key groups 0..G-1 first, then value groups.
struct StepRecord {
    std::size_t step = 0;
    double lr = 0.0;
    double loss = 0.0;
    std::vector<double> agg_means;
};

struct TrainLog {
    std::vector<std::string> agg_columns;  // empty for plain variants
    std::vector<StepRecord> steps;
};

// Teacher-forced cross-entropy training, deterministic in cfg.seed.
// Diverging loss aborts with the step number.
TrainLog train(ToyModel& model, const ToyTask& task, const TrainConfig& cfg);

// "step,lr,loss[,agg...]" rows at 17 significant digits.
std::string train_log_csv(const TrainLog& log);

struct EvalResult {
    double exact_match = 0.0;
    double token_accuracy = 0.0;
    std::size_t n_examples = 0;
    std::size_t n_tokens = 0;
};

// Greedy-decodes n_examples freshly drawn task examples. Exact match
// requires the full emitted sequence (end token included) to equal the
// target; token accuracy scores position-wise matches over target length.
EvalResult evaluate(const ToyModel& model, const ToyTask& task, std::size_t n_examples);

}  // namespace wgqa
