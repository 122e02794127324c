// Command-line surface for the weighted grouped-query attention toolkit:
// create, convert, train, evaluate, and analyze desk-scale checkpoints, and
// estimate what a variant costs in parameters and KV-cache memory.
//
// Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric or
// tolerance failure.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "wgqa/analysis.hpp"
#include "wgqa/attention.hpp"
#include "wgqa/autograd.hpp"
#include "wgqa/checkpoint.hpp"
#include "wgqa/errors.hpp"
#include "wgqa/model.hpp"
#include "wgqa/rng.hpp"
#include "wgqa/trainer.hpp"

namespace {

using namespace wgqa;

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw FormatError(FormatFault::Truncated,
                          "cannot open '" + path + "' for writing");
    }
    out << text;
    out.flush();
    if (!out) {
        throw FormatError(FormatFault::Truncated, "failed writing '" + path + "'");
    }
}

std::string describe_variant(const ModelConfig& cfg) {
    return variant_name(cfg.weighting, cfg.n_kv_groups, cfg.n_heads) + " (" +
           std::to_string(cfg.n_heads) + " query heads, " +
           std::to_string(cfg.n_kv_groups) + " key/value groups)";
}

// ---- init ----------------------------------------------------------------

struct InitArgs {
    std::size_t d = 32;
    std::size_t heads = 4;
    std::size_t layers = 2;
    std::size_t vocab = 16;
    std::size_t max_seq = 16;
    std::uint64_t seed = 0;
    std::string out;
};

void run_init(const InitArgs& a) {
    ModelConfig cfg;
    cfg.d_model = a.d;
    cfg.n_heads = a.heads;
    cfg.n_kv_groups = a.heads;  // ungrouped: one key/value head per query head
    cfg.n_layers = a.layers;
    cfg.vocab_size = a.vocab;
    cfg.max_seq = a.max_seq;
    cfg.weighting = Weighting::None;
    cfg.init = InitScheme::MeanEquivalent;

    const ToyModel model = random_model(cfg, a.seed);
    const Checkpoint ckpt = to_checkpoint(model);
    save(ckpt, a.out);

    std::cout << "initialized " << describe_variant(cfg) << " model, seed " << a.seed
              << "\n";
    for (const auto& [name, tensor] : ckpt.tensors()) {
        std::cout << "  " << name << "  " << tensor.shape_str() << "  " << tensor.size()
                  << "\n";
    }
    std::cout << "total parameters: " << model.param_count() << "\n";
    std::cout << "wrote " << a.out << "\n";
}

// ---- convert ---------------------------------------------------------------

struct ConvertArgs {
    std::string in;
    std::string out;
    std::string variant;
    std::optional<std::size_t> groups;
    std::string init = "mean";
    std::optional<std::uint64_t> seed;
};

void run_convert(const ConvertArgs& a) {
    const Checkpoint source = load(a.in);
    source.validate();
    const std::size_t d = source.metadata_uint("d_model");
    const std::size_t h = source.metadata_uint("n_heads");
    const std::size_t layers = source.metadata_uint("n_layers");

    const VariantSpec spec = variant_spec(a.variant);
    const std::size_t g = variant_group_count(spec, h, a.groups);
    const InitScheme init = init_from_string(a.init);
    if (init == InitScheme::Gaussian && !a.seed.has_value()) {
        throw ConfigError("--init rand draws random weights; pass an explicit --seed");
    }

    AttentionConfig target;
    target.d_model = d;
    target.n_heads = h;
    target.n_kv_groups = g;
    target.weighting = spec.weighting;
    target.init = init;
    target.validate();

    const Checkpoint converted = convert(source, target, a.seed.value_or(0));
    save(converted, a.out);

    const std::size_t blocks = 2 * layers;  // decoder self- plus cross-attention
    std::cout << "converted to " << variant_name(spec.weighting, g, h) << ": " << h
              << " query heads -> " << g << " key/value groups across " << blocks
              << " decoder attention blocks\n";
    std::cout << "+" << param_count_extra(target, blocks) << " parameters\n";
    std::cout << "wrote " << a.out << "\n";
}

// ---- train -----------------------------------------------------------------

struct TrainArgs {
    std::string in;
    std::string out;
    std::string task = "copy";
    std::uint64_t task_seed = 0;
    std::size_t min_len = 3;
    std::size_t max_len = 8;
    std::size_t epochs = 3;
    std::size_t steps = 100;
    std::size_t batch = 8;
    double lr = 0.001;
    double weight_decay = 0.01;
    std::uint64_t seed = 0;
    std::string csv;
};

void run_train(const TrainArgs& a) {
    ToyModel model = model_from_checkpoint(load(a.in));
    const ToyTask task = make_task(task_from_string(a.task), model.config.vocab_size,
                                   a.min_len, a.max_len, a.task_seed);
    TrainConfig cfg;
    cfg.initial_lr = a.lr;
    cfg.epochs = a.epochs;
    cfg.steps_per_epoch = a.steps;
    cfg.batch_size = a.batch;
    cfg.weight_decay = a.weight_decay;
    cfg.seed = a.seed;

    std::cout << "training " << describe_variant(model.config) << " model ("
              << model.param_count() << " parameters) on the " << a.task << " task\n";
    const TrainLog log = train(model, task, cfg);

    for (std::size_t e = 0; e < cfg.epochs; ++e) {
        double sum = 0.0;
        for (std::size_t s = 0; s < cfg.steps_per_epoch; ++s) {
            sum += log.steps[e * cfg.steps_per_epoch + s].loss;
        }
        std::cout << "epoch " << (e + 1) << "/" << cfg.epochs << "  mean loss "
                  << std::setprecision(6) << sum / static_cast<double>(cfg.steps_per_epoch)
                  << "\n";
    }
    if (!log.agg_columns.empty()) {
        std::cout << "final aggregation means:";
        for (std::size_t i = 0; i < log.agg_columns.size(); ++i) {
            std::cout << " " << log.agg_columns[i] << "="
                      << log.steps.back().agg_means[i];
        }
        std::cout << "\n";
    }

    save(to_checkpoint(model), a.out);
    std::cout << "wrote " << a.out << "\n";
    if (!a.csv.empty()) {
        write_text_file(a.csv, train_log_csv(log));
        std::cout << "wrote " << a.csv << "\n";
    }
}

// ---- eval ------------------------------------------------------------------

struct EvalArgs {
    std::string in;
    std::string task = "copy";
    std::uint64_t task_seed = 0;
    std::size_t min_len = 3;
    std::size_t max_len = 8;
    std::size_t examples = 100;
};

void run_eval(const EvalArgs& a) {
    const ToyModel model = model_from_checkpoint(load(a.in));
    const ToyTask task = make_task(task_from_string(a.task), model.config.vocab_size,
                                   a.min_len, a.max_len, a.task_seed);
    const EvalResult r = evaluate(model, task, a.examples);
    std::cout << std::setprecision(6);
    std::cout << "evaluated " << describe_variant(model.config) << " model on the "
              << a.task << " task\n";
    std::cout << "exact match:    " << r.exact_match << " over " << r.n_examples
              << " sequences\n";
    std::cout << "token accuracy: " << r.token_accuracy << " over " << r.n_tokens
              << " target tokens\n";
}

// ---- gradcheck ---------------------------------------------------------------

struct GradcheckArgs {
    std::string variant = "wgqa";
    std::optional<std::size_t> groups;
    std::size_t d = 8;
    std::size_t heads = 4;
    bool causal = false;
    bool cross = false;
    std::string init = "rand";
    std::uint64_t seed = 0;
    double eps = 1e-5;
    double tol = 1e-6;
    std::string csv;
};

int run_gradcheck(const GradcheckArgs& a) {
    const VariantSpec spec = variant_spec(a.variant);
    AttentionConfig cfg;
    cfg.d_model = a.d;
    cfg.n_heads = a.heads;
    cfg.n_kv_groups = variant_group_count(spec, a.heads, a.groups);
    cfg.weighting = spec.weighting;
    cfg.init = init_from_string(a.init);
    cfg.causal = a.causal;
    cfg.cross_attention = a.cross;
    cfg.validate();

    SeededRng rng(a.seed);
    // Small projections keep the finite-difference probe well inside the
    // regime where central differences resolve the analytic gradient.
    const AttentionBlock block = make_random_block(cfg, rng, 0.15);
    const GradCheckReport report = grad_check(block, a.seed, a.eps, a.tol);

    std::cout << "gradient check: " << variant_name(cfg.weighting, cfg.n_kv_groups, cfg.n_heads)
              << "  d=" << a.d << " heads=" << a.heads << " groups=" << cfg.n_kv_groups
              << (a.causal ? " causal" : "") << (a.cross ? " cross" : "") << "\n";
    std::cout << std::left;
    for (const GradCheckRow& row : report.rows) {
        std::cout << "  " << std::setw(10) << row.param << " max rel err "
                  << std::scientific << std::setprecision(3) << row.max_rel_error
                  << (row.pass ? "  ok" : "  FAIL") << std::defaultfloat << "\n";
    }
    if (!a.csv.empty()) {
        write_text_file(a.csv, grad_check_csv(report));
        std::cout << "wrote " << a.csv << "\n";
    }
    if (report.pass) {
        std::cout << "PASS (worst " << std::scientific << std::setprecision(3)
                  << report.max_rel_error << " within tolerance " << report.tol << ")\n";
        return 0;
    }
    std::cout << "FAIL (worst " << std::scientific << std::setprecision(3)
              << report.max_rel_error << " exceeds tolerance " << report.tol << ")\n";
    return 3;
}

// ---- analyze -----------------------------------------------------------------

struct AnalyzeArgs {
    std::string in;
    std::string csv;
    double alpha = 0.05;
};

void run_analyze(const AnalyzeArgs& a) {
    if (!(a.alpha > 0.0) || !(a.alpha < 1.0)) {
        throw ConfigError("--alpha must lie strictly between 0 and 1");
    }
    const Checkpoint ckpt = load(a.in);
    const DivergenceReport report = head_divergence(ckpt);

    std::cout << std::setprecision(6);
    std::cout << "aggregation-vs-mean divergence over " << report.sample_count
              << " (layer, block, side, group) slices\n";
    std::cout << "overall mean absolute difference: " << report.overall_mad << "\n";
    if (report.degenerate) {
        std::cout << "degenerate sample: every slice diverges identically "
                     "(mean-equivalent weights); no t-test performed\n";
    } else {
        std::cout << "t = " << report.t_stat << ", p = " << std::scientific
                  << std::setprecision(6) << report.p_value << std::defaultfloat
                  << std::setprecision(6) << " (" << (report.sample_count - 1)
                  << " degrees of freedom)\n";
        if (report.p_value < a.alpha) {
            std::cout << "reject zero mean divergence at alpha = " << a.alpha << "\n";
        } else {
            std::cout << "cannot reject zero mean divergence at alpha = " << a.alpha
                      << "\n";
        }
    }
    if (!a.csv.empty()) {
        write_text_file(a.csv, divergence_csv(report));
        std::cout << "wrote " << a.csv << "\n";
    }
}

// ---- params ------------------------------------------------------------------

struct ParamsArgs {
    std::size_t d = 0;
    std::size_t heads = 0;
    std::string variant = "wgqa";
    std::optional<std::size_t> groups;
    std::size_t blocks = 0;
};

void run_params(const ParamsArgs& a) {
    const VariantSpec spec = variant_spec(a.variant);
    AttentionConfig cfg;
    cfg.d_model = a.d;
    cfg.n_heads = a.heads;
    cfg.n_kv_groups = variant_group_count(spec, a.heads, a.groups);
    cfg.weighting = spec.weighting;
    cfg.validate();

    std::cout << variant_name(cfg.weighting, cfg.n_kv_groups, cfg.n_heads) << " at d="
              << a.d << ", heads=" << a.heads << ", groups=" << cfg.n_kv_groups
              << " over " << a.blocks << " attention blocks:\n";
    std::cout << "+" << param_count_extra(cfg, a.blocks) << " parameters\n";
}

// ---- kvcache -----------------------------------------------------------------

struct KvArgs {
    std::size_t d = 0;
    std::size_t heads = 0;
    std::size_t groups = 0;
    std::size_t seq = 0;
    std::size_t layers = 0;
    std::size_t blocks_per_layer = 2;
    std::size_t bytes_per_elem = 4;
};

void run_kvcache(const KvArgs& a) {
    AttentionConfig cfg;
    cfg.d_model = a.d;
    cfg.n_heads = a.heads;
    cfg.n_kv_groups = a.groups;
    cfg.validate();
    const std::size_t bytes =
        kv_cache_bytes(cfg, a.seq, a.layers, a.blocks_per_layer, a.bytes_per_elem);
    std::cout << "kv cache for seq " << a.seq << ", " << a.layers << " layers x "
              << a.blocks_per_layer << " blocks, " << a.groups
              << " key/value groups of width " << cfg.head_dim() << ", "
              << a.bytes_per_elem << " bytes per element:\n";
    std::cout << bytes << " bytes (" << std::setprecision(4)
              << static_cast<double>(bytes) / (1024.0 * 1024.0) << " MiB)\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"weighted grouped-query attention toolkit"};
    app.require_subcommand(1);
    int exit_code = 0;

    InitArgs init_args;
    CLI::App* cmd_init =
        app.add_subcommand("init", "create a seeded ungrouped-attention model checkpoint");
    cmd_init->add_option("--d", init_args.d, "model width (must be divisible by --heads)")
        ->required();
    cmd_init->add_option("--heads", init_args.heads, "number of attention heads")
        ->required();
    cmd_init->add_option("--layers", init_args.layers, "decoder layers")->required();
    cmd_init->add_option("--vocab", init_args.vocab, "vocabulary size")->required();
    cmd_init->add_option("--max-seq", init_args.max_seq, "maximum sequence length");
    cmd_init->add_option("--seed", init_args.seed, "RNG seed for the weights")->required();
    cmd_init->add_option("--out", init_args.out, "checkpoint path to write")->required();
    cmd_init->callback([&]() { run_init(init_args); });

    ConvertArgs conv_args;
    CLI::App* cmd_convert = app.add_subcommand(
        "convert", "re-group an ungrouped checkpoint into an attention variant");
    cmd_convert->add_option("--in", conv_args.in, "source checkpoint")->required();
    cmd_convert->add_option("--out", conv_args.out, "converted checkpoint path")
        ->required();
    cmd_convert
        ->add_option("--variant", conv_args.variant,
                     "mha, gqa, mqa, wgqa, wmqa, rowwgqa, colwgqa, rowwmqa, or colwmqa")
        ->required();
    cmd_convert->add_option("--groups", conv_args.groups,
                            "key/value groups (defaults per variant)");
    cmd_convert->add_option("--init", conv_args.init,
                            "aggregation weight start: mean or rand");
    cmd_convert->add_option("--seed", conv_args.seed, "RNG seed (required for rand)");
    cmd_convert->callback([&]() { run_convert(conv_args); });

    TrainArgs train_args;
    CLI::App* cmd_train =
        app.add_subcommand("train", "train a checkpoint on a synthetic task");
    cmd_train->add_option("--in", train_args.in, "starting checkpoint")->required();
    cmd_train->add_option("--out", train_args.out, "trained checkpoint path")->required();
    cmd_train->add_option("--task", train_args.task, "copy, reverse, or tokenmap");
    cmd_train->add_option("--task-seed", train_args.task_seed,
                          "seed defining the task (tokenmap mapping)")
        ->required();
    cmd_train->add_option("--min-len", train_args.min_len, "shortest payload length");
    cmd_train->add_option("--max-len", train_args.max_len, "longest payload length");
    cmd_train->add_option("--epochs", train_args.epochs, "training epochs");
    cmd_train->add_option("--steps", train_args.steps, "steps per epoch");
    cmd_train->add_option("--batch", train_args.batch, "examples per step");
    cmd_train->add_option("--lr", train_args.lr, "initial learning rate");
    cmd_train->add_option("--weight-decay", train_args.weight_decay,
                          "decoupled weight decay");
    cmd_train->add_option("--seed", train_args.seed, "training RNG seed")->required();
    cmd_train->add_option("--csv", train_args.csv, "write the step log as CSV");
    cmd_train->callback([&]() { run_train(train_args); });

    EvalArgs eval_args;
    CLI::App* cmd_eval =
        app.add_subcommand("eval", "greedy-decoding accuracy on a synthetic task");
    cmd_eval->add_option("--in", eval_args.in, "checkpoint to evaluate")->required();
    cmd_eval->add_option("--task", eval_args.task, "copy, reverse, or tokenmap");
    cmd_eval->add_option("--task-seed", eval_args.task_seed,
                         "seed defining the task and the drawn examples")
        ->required();
    cmd_eval->add_option("--min-len", eval_args.min_len, "shortest payload length");
    cmd_eval->add_option("--max-len", eval_args.max_len, "longest payload length");
    cmd_eval->add_option("--examples", eval_args.examples, "number of examples");
    cmd_eval->callback([&]() { run_eval(eval_args); });

    GradcheckArgs grad_args;
    CLI::App* cmd_gradcheck = app.add_subcommand(
        "gradcheck", "compare analytic attention gradients with finite differences");
    cmd_gradcheck->add_option("--variant", grad_args.variant, "attention variant");
    cmd_gradcheck->add_option("--groups", grad_args.groups, "key/value groups");
    cmd_gradcheck->add_option("--d", grad_args.d, "model width");
    cmd_gradcheck->add_option("--heads", grad_args.heads, "attention heads");
    cmd_gradcheck->add_flag("--causal", grad_args.causal, "apply the causal mask");
    cmd_gradcheck->add_flag("--cross", grad_args.cross,
                            "cross-attention (separate key/value input)");
    cmd_gradcheck->add_option("--init", grad_args.init,
                              "aggregation weight start: mean or rand");
    cmd_gradcheck->add_option("--seed", grad_args.seed, "fixture RNG seed")->required();
    cmd_gradcheck->add_option("--eps", grad_args.eps, "finite-difference step");
    cmd_gradcheck->add_option("--tol", grad_args.tol, "relative error tolerance");
    cmd_gradcheck->add_option("--csv", grad_args.csv, "write the per-parameter report");
    cmd_gradcheck->callback([&]() { exit_code = run_gradcheck(grad_args); });

    AnalyzeArgs analyze_args;
    CLI::App* cmd_analyze = app.add_subcommand(
        "analyze", "aggregation-vs-mean divergence statistics of a weighted checkpoint");
    cmd_analyze->add_option("--in", analyze_args.in, "weighted-variant checkpoint")
        ->required();
    cmd_analyze->add_option("--csv", analyze_args.csv, "write per-slice divergences");
    cmd_analyze->add_option("--alpha", analyze_args.alpha, "t-test significance level");
    cmd_analyze->callback([&]() { run_analyze(analyze_args); });

    ParamsArgs params_args;
    CLI::App* cmd_params = app.add_subcommand(
        "params", "learnable parameters a weighting scheme adds");
    cmd_params->add_option("--d", params_args.d, "model width")->required();
    cmd_params->add_option("--heads", params_args.heads, "attention heads")->required();
    cmd_params->add_option("--variant", params_args.variant, "attention variant");
    cmd_params->add_option("--groups", params_args.groups, "key/value groups");
    cmd_params->add_option("--blocks", params_args.blocks, "attention block count")
        ->required();
    cmd_params->callback([&]() { run_params(params_args); });

    KvArgs kv_args;
    CLI::App* cmd_kv = app.add_subcommand(
        "kvcache", "decoder key/value cache size for a geometry");
    cmd_kv->add_option("--d", kv_args.d, "model width")->required();
    cmd_kv->add_option("--heads", kv_args.heads, "attention heads")->required();
    cmd_kv->add_option("--groups", kv_args.groups, "key/value groups")->required();
    cmd_kv->add_option("--seq", kv_args.seq, "cached sequence length")->required();
    cmd_kv->add_option("--layers", kv_args.layers, "decoder layers")->required();
    cmd_kv->add_option("--blocks-per-layer", kv_args.blocks_per_layer,
                       "attention blocks per layer that cache keys/values");
    cmd_kv->add_option("--bytes-per-elem", kv_args.bytes_per_elem,
                       "bytes per cached element");
    cmd_kv->callback([&]() { run_kvcache(kv_args); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    } catch (const wgqa::FormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const wgqa::NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const wgqa::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return exit_code;
}
