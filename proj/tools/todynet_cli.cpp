// Command-line harness: train / eval / inspect-graph over the shared C API.

#include <chrono>
#include <cinttypes>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "todynet.h"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;  // data/runtime failure
constexpr int kExitUsage = 2;    // usage/config error

int exit_code_for(tody_status status) {
    return status == TODY_ERR_CONFIG ? kExitUsage : kExitFailure;
}

std::string iso8601_now() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t tt = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&tt, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::string hex_digest(uint64_t digest) {
    char buf[24];
    std::snprintf(buf, sizeof(buf), "%016" PRIx64, digest);
    return buf;
}

// <data-dir>/<Name>/<Name>_<SPLIT>.ts, falling back to the flat layout.
std::string find_split_file(const std::string& data_dir, const std::string& name,
                            const std::string& split) {
    namespace fs = std::filesystem;
    const std::string file = name + "_" + split + ".ts";
    const fs::path nested = fs::path(data_dir) / name / file;
    const fs::path flat = fs::path(data_dir) / file;
    std::error_code ec;
    if (fs::exists(nested, ec)) return nested.string();
    if (fs::exists(flat, ec)) return flat.string();
    return nested.string();  // canonical path for the error message
}

struct DatasetGuard {
    tody_dataset* ds = nullptr;
    ~DatasetGuard() { tody_dataset_free(ds); }
};
struct ModelGuard {
    tody_model* model = nullptr;
    ~ModelGuard() { tody_model_free(model); }
};
struct ReportGuard {
    tody_report* report = nullptr;
    ~ReportGuard() { tody_report_free(report); }
};

nlohmann::json config_json(const tody_config& cfg) {
    return nlohmann::json{
        {"num_graphs", cfg.num_graphs},
        {"top_k", cfg.top_k},
        {"pool_ratio", cfg.pool_ratio},
        {"tc_kernels", {cfg.tc_kernels[0], cfg.tc_kernels[1], cfg.tc_kernels[2]}},
        {"tc_channels", {cfg.tc_channels[0], cfg.tc_channels[1], cfg.tc_channels[2]}},
        {"batch_size", cfg.batch_size},
        {"learning_rate", cfg.learning_rate},
        {"epochs", cfg.epochs},
        {"seed", cfg.seed},
        {"precision", cfg.precision == TODY_PRECISION_F32 ? "f32" : "f64"},
        {"no_graph", cfg.no_graph != 0},
        {"no_dygraph", cfg.no_dygraph != 0},
        {"no_gpool", cfg.no_gpool != 0},
        {"znormalize", cfg.znormalize != 0},
    };
}

nlohmann::json make_manifest(const std::string& command, const tody_config& cfg,
                             const nlohmann::json& dataset, uint64_t seed,
                             const std::string& started_at) {
    return nlohmann::json{
        {"command", command},     {"config", config_json(cfg)}, {"dataset", dataset},
        {"seed", seed},           {"started_at", started_at},   {"finished_at", iso8601_now()},
        {"version", tody_version()},
    };
}

bool write_metrics(const std::string& path, const nlohmann::json& doc) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        std::cerr << "error: cannot write metrics file " << path << "\n";
        return false;
    }
    out << doc.dump(2) << "\n";
    return true;
}

struct CommonArgs {
    std::string dataset;
    std::string data_dir;
    std::string out;
    std::string format = "text";
};

void add_data_options(CLI::App* cmd, CommonArgs& args, bool dataset_required) {
    auto* d = cmd->add_option("--dataset", args.dataset,
                              "Dataset name; expects <Name>_TRAIN.ts / <Name>_TEST.ts");
    if (dataset_required) d->required();
    const char* env = std::getenv("TODYNET_DATA_DIR");
    args.data_dir = env ? env : ".";
    cmd->add_option("--data-dir", args.data_dir,
                    "Archive directory (falls back to $TODYNET_DATA_DIR)")
        ->capture_default_str();
}

int load_dataset_or_fail(const std::string& path, int znorm, DatasetGuard& guard) {
    const tody_status st = tody_dataset_load(path.c_str(), znorm, &guard.ds);
    if (st != TODY_OK) {
        std::cerr << "error: " << tody_last_error() << "\n";
        return exit_code_for(st);
    }
    return kExitOk;
}

int run_train(const CommonArgs& common, const tody_config& cfg, const std::string& checkpoint_out,
              bool quiet) {
    const std::string started_at = iso8601_now();
    const std::string train_path = find_split_file(common.data_dir, common.dataset, "TRAIN");
    const std::string test_path = find_split_file(common.data_dir, common.dataset, "TEST");

    DatasetGuard train, test;
    if (int rc = load_dataset_or_fail(train_path, cfg.znormalize, train)) return rc;
    if (int rc = load_dataset_or_fail(test_path, cfg.znormalize, test)) return rc;

    struct Progress {
        bool quiet;
        int32_t total;
    } progress{quiet, cfg.epochs};
    auto cb = [](int32_t epoch, double loss, void* user) {
        auto* p = static_cast<Progress*>(user);
        if (p->quiet) return;
        const int32_t every = p->total > 20 ? p->total / 20 : 1;
        if (epoch == 0 || (epoch + 1) % every == 0 || epoch + 1 == p->total) {
            std::fprintf(stderr, "epoch %d/%d loss=%.6f\n", epoch + 1, p->total, loss);
        }
    };

    ModelGuard model;
    ReportGuard report;
    tody_status st = tody_train(train.ds, &cfg, cb, &progress, &model.model, &report.report);
    if (st != TODY_OK) {
        std::cerr << "error: " << tody_last_error() << "\n";
        return exit_code_for(st);
    }

    double test_accuracy = 0.0;
    st = tody_evaluate(model.model, test.ds, &test_accuracy);
    if (st != TODY_OK) {
        std::cerr << "error: " << tody_last_error() << "\n";
        return exit_code_for(st);
    }

    const std::string ckpt_path =
        checkpoint_out.empty() ? common.dataset + ".tdyn" : checkpoint_out;
    st = tody_model_save(model.model, ckpt_path.c_str());
    if (st != TODY_OK) {
        std::cerr << "error: " << tody_last_error() << "\n";
        return exit_code_for(st);
    }

    std::vector<double> losses(static_cast<std::size_t>(tody_report_num_epochs(report.report)));
    for (std::size_t e = 0; e < losses.size(); ++e) {
        losses[e] = tody_report_epoch_loss(report.report, static_cast<int32_t>(e));
    }
    nlohmann::json dataset_info{
        {"name", common.dataset},
        {"train_digest", hex_digest(tody_dataset_digest(train.ds))},
        {"test_digest", hex_digest(tody_dataset_digest(test.ds))},
    };
    nlohmann::json doc{
        {"schema_version", 1},
        {"manifest", make_manifest("train", cfg, dataset_info, cfg.seed, started_at)},
        {"accuracy",
         {{"train", tody_report_train_accuracy(report.report)}, {"test", test_accuracy}}},
        {"loss_curve", losses},
        {"runtime_s", tody_report_wall_seconds(report.report)},
    };
    doc["checkpoint"] = ckpt_path;
    const std::string metrics_path =
        common.out.empty() ? common.dataset + "_train_metrics.json" : common.out;
    if (!write_metrics(metrics_path, doc)) return kExitFailure;

    if (common.format == "json") {
        nlohmann::json summary{{"accuracy", test_accuracy},
                               {"train_accuracy", tody_report_train_accuracy(report.report)},
                               {"checkpoint", ckpt_path},
                               {"metrics", metrics_path}};
        std::cout << summary.dump() << "\n";
    } else {
        std::cout << "accuracy=" << test_accuracy << "\n";
        std::cout << "checkpoint=" << ckpt_path << "\n";
        std::cout << "metrics=" << metrics_path << "\n";
    }
    return kExitOk;
}

int run_eval(const CommonArgs& common, const std::string& checkpoint) {
    const std::string started_at = iso8601_now();
    ModelGuard model;
    tody_status st = tody_model_load(checkpoint.c_str(), &model.model);
    if (st != TODY_OK) {
        std::cerr << "error: " << tody_last_error() << "\n";
        return exit_code_for(st);
    }
    tody_config cfg;
    tody_model_config(model.model, &cfg);

    const std::string dataset_name =
        common.dataset.empty() ? tody_model_dataset_name(model.model) : common.dataset;
    const std::string test_path = find_split_file(common.data_dir, dataset_name, "TEST");
    DatasetGuard test;
    if (int rc = load_dataset_or_fail(test_path, cfg.znormalize, test)) return rc;

    double accuracy = 0.0;
    st = tody_evaluate(model.model, test.ds, &accuracy);
    if (st != TODY_OK) {
        std::cerr << "error: " << tody_last_error() << "\n";
        return exit_code_for(st);
    }

    nlohmann::json dataset_info{
        {"name", dataset_name},
        {"test_digest", hex_digest(tody_dataset_digest(test.ds))},
        {"checkpoint", checkpoint},
    };
    nlohmann::json doc{
        {"schema_version", 1},
        {"manifest", make_manifest("eval", cfg, dataset_info, cfg.seed, started_at)},
        {"accuracy", {{"test", accuracy}}},
        {"loss_curve", nlohmann::json::array()},
        {"runtime_s", 0.0},
    };
    const std::string metrics_path =
        common.out.empty() ? dataset_name + "_eval_metrics.json" : common.out;
    if (!write_metrics(metrics_path, doc)) return kExitFailure;

    if (common.format == "json") {
        std::cout << nlohmann::json{{"accuracy", accuracy}}.dump() << "\n";
    } else {
        std::cout << "accuracy=" << accuracy << "\n";
    }
    return kExitOk;
}

int run_inspect(const std::string& checkpoint, int32_t layer, int32_t slot,
                const std::string& out) {
    ModelGuard model;
    tody_status st = tody_model_load(checkpoint.c_str(), &model.model);
    if (st != TODY_OK) {
        std::cerr << "error: " << tody_last_error() << "\n";
        return exit_code_for(st);
    }
    char* text = nullptr;
    st = tody_model_edge_list(model.model, layer, slot, &text);
    if (st != TODY_OK) {
        std::cerr << "error: " << tody_last_error() << "\n";
        return exit_code_for(st);
    }
    if (out.empty()) {
        std::cout << text;
    } else {
        std::ofstream f(out, std::ios::binary | std::ios::trunc);
        if (!f) {
            std::cerr << "error: cannot write " << out << "\n";
            tody_string_free(text);
            return kExitFailure;
        }
        f << text;
    }
    tody_string_free(text);
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"TodyNet: dynamic-graph neural network for multivariate time series "
                 "classification"};
    app.require_subcommand(1);
    app.failure_message(CLI::FailureMessage::help);

    tody_config cfg;
    tody_config_defaults(&cfg);

    // ---- train ----
    auto* train = app.add_subcommand("train", "Train on <Name>_TRAIN.ts, evaluate on "
                                              "<Name>_TEST.ts, write metrics and a checkpoint");
    CommonArgs train_args;
    add_data_options(train, train_args, true);
    train->add_option("--epochs", cfg.epochs, "Training epochs")->capture_default_str();
    train->add_option("--batch-size", cfg.batch_size, "Mini-batch size")->capture_default_str();
    train->add_option("--lr", cfg.learning_rate, "Adam learning rate")->capture_default_str();
    train->add_option("--num-graphs", cfg.num_graphs,
                      "Number of time slots (1 = static graph)")
        ->capture_default_str();
    train->add_option("--topk", cfg.top_k, "Edges kept per row of each learned adjacency")
        ->capture_default_str();
    train->add_option("--pool-ratio", cfg.pool_ratio, "Node pooling ratio in (0,1]")
        ->capture_default_str();
    train->add_option("--seed", cfg.seed, "Random seed")->capture_default_str();
    std::string precision = "f64";
    train->add_option("--precision", precision, "Numeric precision")
        ->check(CLI::IsMember({"f32", "f64"}))
        ->capture_default_str();
    train->add_flag("--no-graph", "Ablation: temporal convolutions only");
    train->add_flag("--no-dygraph", "Ablation: one static graph instead of per-slot graphs");
    train->add_flag("--no-gpool", "Ablation: disable temporal graph pooling");
    bool no_znorm = false;
    train->add_flag("--no-znormalize", no_znorm, "Skip per-series z-normalization");
    train->add_option("--out", train_args.out, "Metrics file (default <Name>_train_metrics.json)");
    std::string checkpoint_out;
    train->add_option("--checkpoint-out", checkpoint_out,
                      "Checkpoint file (default <Name>.tdyn)");
    train->add_option("--format", train_args.format, "Stdout summary format")
        ->check(CLI::IsMember({"text", "json"}))
        ->capture_default_str();
    bool quiet = false;
    train->add_flag("--quiet", quiet, "Suppress per-epoch progress on stderr");

    // ---- eval ----
    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on <Name>_TEST.ts");
    CommonArgs eval_args;
    std::string eval_checkpoint;
    eval->add_option("--checkpoint", eval_checkpoint, "Checkpoint file")->required();
    add_data_options(eval, eval_args, false);
    eval->add_option("--out", eval_args.out, "Metrics file (default <Name>_eval_metrics.json)");
    eval->add_option("--format", eval_args.format, "Stdout summary format")
        ->check(CLI::IsMember({"text", "json"}))
        ->capture_default_str();

    // ---- inspect-graph ----
    auto* inspect = app.add_subcommand(
        "inspect-graph", "Dump a layer/slot adjacency as a tab-separated edge list");
    std::string inspect_checkpoint, inspect_out;
    int32_t layer = 1, slot = 1;
    inspect->add_option("--checkpoint", inspect_checkpoint, "Checkpoint file")->required();
    inspect->add_option("--layer", layer, "Graph layer, 1-based")->capture_default_str();
    inspect->add_option("--slot", slot, "Time slot, 1-based")->capture_default_str();
    inspect->add_option("--out", inspect_out, "Write to file instead of stdout");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    cfg.precision = precision == "f32" ? TODY_PRECISION_F32 : TODY_PRECISION_F64;
    cfg.no_graph = train->count("--no-graph") > 0;
    cfg.no_dygraph = train->count("--no-dygraph") > 0;
    cfg.no_gpool = train->count("--no-gpool") > 0;
    cfg.znormalize = no_znorm ? 0 : 1;

    if (train->parsed()) return run_train(train_args, cfg, checkpoint_out, quiet);
    if (eval->parsed()) return run_eval(eval_args, eval_checkpoint);
    if (inspect->parsed()) return run_inspect(inspect_checkpoint, layer, slot, inspect_out);
    return kExitUsage;
}
