#include "todynet.h"

#include <cstring>
#include <sstream>
#include <string>
#include <variant>

#include "todynet/checkpoint.hpp"
#include "todynet/dataset.hpp"
#include "todynet/graph.hpp"
#include "todynet/model.hpp"

using todynet::CheckpointInfo;
using todynet::DenseArray;
using todynet::Error;
using todynet::ErrorKind;
using todynet::ModelConfig;
using todynet::TodyNetModel;
using todynet::TrainReport;
using todynet::TsDataset;

struct tody_dataset {
    TsDataset data;
};

struct tody_model {
    CheckpointInfo info;
    std::variant<TodyNetModel<float>, TodyNetModel<double>> impl;
};

struct tody_report {
    TrainReport report;
};

namespace {

thread_local std::string g_last_error;

tody_status status_of(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::kIo: return TODY_ERR_IO;
        case ErrorKind::kParse: return TODY_ERR_PARSE;
        case ErrorKind::kConfig: return TODY_ERR_CONFIG;
        case ErrorKind::kData: return TODY_ERR_DATA;
        case ErrorKind::kShape: return TODY_ERR_DATA;
        case ErrorKind::kContract: return TODY_ERR_DATA;
        case ErrorKind::kRuntime: return TODY_ERR_RUNTIME;
    }
    return TODY_ERR_RUNTIME;
}

template <typename F>
tody_status guarded(F&& fn) {
    try {
        return fn();
    } catch (const Error& e) {
        g_last_error = e.what();
        return status_of(e.kind());
    } catch (const std::exception& e) {
        g_last_error = e.what();
        return TODY_ERR_RUNTIME;
    }
}

ModelConfig to_model_config(const tody_config& c) {
    ModelConfig m;
    if (c.num_graphs < 1 || c.top_k < 1 || c.batch_size < 1 || c.epochs < 1) {
        todynet::throw_config("num-graphs, topk, batch-size and epochs must all be >= 1");
    }
    m.num_graphs = static_cast<std::size_t>(c.num_graphs);
    m.top_k = static_cast<std::size_t>(c.top_k);
    m.pool_ratio = c.pool_ratio;
    for (int i = 0; i < 3; ++i) {
        if (c.tc_kernels[i] < 1 || c.tc_channels[i] < 1) {
            todynet::throw_config("tc kernels and channels must be >= 1");
        }
        m.tc_kernels[static_cast<std::size_t>(i)] = static_cast<std::size_t>(c.tc_kernels[i]);
        m.tc_channels[static_cast<std::size_t>(i)] = static_cast<std::size_t>(c.tc_channels[i]);
    }
    m.batch_size = static_cast<std::size_t>(c.batch_size);
    m.learning_rate = c.learning_rate;
    m.epochs = static_cast<std::size_t>(c.epochs);
    m.seed = c.seed;
    m.no_graph = c.no_graph != 0;
    m.no_dygraph = c.no_dygraph != 0;
    m.no_gpool = c.no_gpool != 0;
    m.znormalize = c.znormalize != 0;
    m.validate();
    return m;
}

void from_model_config(const ModelConfig& m, tody_precision prec, tody_config* out) {
    out->num_graphs = static_cast<int32_t>(m.num_graphs);
    out->top_k = static_cast<int32_t>(m.top_k);
    out->pool_ratio = m.pool_ratio;
    for (std::size_t i = 0; i < 3; ++i) {
        out->tc_kernels[i] = static_cast<int32_t>(m.tc_kernels[i]);
        out->tc_channels[i] = static_cast<int32_t>(m.tc_channels[i]);
    }
    out->batch_size = static_cast<int32_t>(m.batch_size);
    out->learning_rate = m.learning_rate;
    out->epochs = static_cast<int32_t>(m.epochs);
    out->seed = m.seed;
    out->precision = prec;
    out->no_graph = m.no_graph ? 1 : 0;
    out->no_dygraph = m.no_dygraph ? 1 : 0;
    out->no_gpool = m.no_gpool ? 1 : 0;
    out->znormalize = m.znormalize ? 1 : 0;
}

template <typename R>
tody_model* run_training(const TsDataset& train, const ModelConfig& cfg, tody_epoch_callback cb,
                         void* user, TrainReport* out_report) {
    TodyNetModel<R> model(cfg, train.header.dimensions, train.header.series_length,
                          train.num_classes());
    TrainReport rep = train_model<R>(model, train, cb ? [cb, user](std::size_t e, double loss) {
        cb(static_cast<int32_t>(e), loss, user);
    } : std::function<void(std::size_t, double)>{});
    if (out_report) *out_report = rep;
    CheckpointInfo info;
    info.config = cfg;
    info.dims = model.dims();
    info.length = model.length();
    info.classes = model.classes();
    info.class_labels = train.header.class_labels;
    info.precision = sizeof(R) == 4 ? "f32" : "f64";
    info.dataset_name = train.header.problem_name;
    return new tody_model{std::move(info), std::move(model)};
}

}  // namespace

extern "C" {

const char* tody_version(void) { return "todynet 0.1.0"; }

const char* tody_last_error(void) { return g_last_error.c_str(); }

void tody_config_defaults(tody_config* cfg) {
    if (!cfg) return;
    const ModelConfig m;
    from_model_config(m, TODY_PRECISION_F64, cfg);
}

tody_status tody_dataset_load(const char* path, int32_t apply_znormalize, tody_dataset** out) {
    return guarded([&]() {
        if (!path || !out) todynet::throw_config("tody_dataset_load: null argument");
        TsDataset ds = todynet::parse_ts_file(path);
        if (apply_znormalize) ds = todynet::znormalize(std::move(ds));
        *out = new tody_dataset{std::move(ds)};
        return TODY_OK;
    });
}

void tody_dataset_free(tody_dataset* ds) { delete ds; }

int32_t tody_dataset_num_series(const tody_dataset* ds) {
    return static_cast<int32_t>(ds->data.size());
}
int32_t tody_dataset_dimensions(const tody_dataset* ds) {
    return static_cast<int32_t>(ds->data.header.dimensions);
}
int32_t tody_dataset_series_length(const tody_dataset* ds) {
    return static_cast<int32_t>(ds->data.header.series_length);
}
int32_t tody_dataset_num_classes(const tody_dataset* ds) {
    return static_cast<int32_t>(ds->data.num_classes());
}
const char* tody_dataset_problem_name(const tody_dataset* ds) {
    return ds->data.header.problem_name.c_str();
}
const char* tody_dataset_class_label(const tody_dataset* ds, int32_t index) {
    if (index < 0 || static_cast<std::size_t>(index) >= ds->data.num_classes()) return nullptr;
    return ds->data.header.class_labels[static_cast<std::size_t>(index)].c_str();
}
uint64_t tody_dataset_digest(const tody_dataset* ds) { return ds->data.source_digest; }

tody_status tody_train(const tody_dataset* train, const tody_config* cfg, tody_epoch_callback cb,
                       void* user, tody_model** out_model, tody_report** out_report) {
    return guarded([&]() {
        if (!train || !cfg) todynet::throw_config("tody_train: null argument");
        const ModelConfig mc = to_model_config(*cfg);
        TrainReport rep;
        tody_model* model = cfg->precision == TODY_PRECISION_F32
                                ? run_training<float>(train->data, mc, cb, user, &rep)
                                : run_training<double>(train->data, mc, cb, user, &rep);
        if (out_report) *out_report = new tody_report{std::move(rep)};
        if (out_model) *out_model = model;
        else tody_model_free(model);
        return TODY_OK;
    });
}

void tody_model_free(tody_model* model) { delete model; }
void tody_report_free(tody_report* report) { delete report; }

int32_t tody_report_num_epochs(const tody_report* report) {
    return static_cast<int32_t>(report->report.epoch_loss.size());
}
double tody_report_epoch_loss(const tody_report* report, int32_t epoch) {
    if (epoch < 0 || static_cast<std::size_t>(epoch) >= report->report.epoch_loss.size()) {
        return 0.0;
    }
    return report->report.epoch_loss[static_cast<std::size_t>(epoch)];
}
double tody_report_train_accuracy(const tody_report* report) {
    return report->report.train_accuracy;
}
double tody_report_wall_seconds(const tody_report* report) { return report->report.wall_seconds; }
int32_t tody_report_best_epoch(const tody_report* report) {
    return static_cast<int32_t>(report->report.best_epoch);
}

tody_status tody_evaluate(tody_model* model, const tody_dataset* ds, double* out_accuracy) {
    return guarded([&]() {
        if (!model || !ds || !out_accuracy) todynet::throw_config("tody_evaluate: null argument");
        *out_accuracy = std::visit(
            [&](auto& impl) { return todynet::evaluate_model(impl, ds->data); }, model->impl);
        return TODY_OK;
    });
}

tody_status tody_model_save(tody_model* model, const char* path) {
    return guarded([&]() {
        if (!model || !path) todynet::throw_config("tody_model_save: null argument");
        std::visit([&](auto& impl) { todynet::save_checkpoint(path, impl, model->info); },
                   model->impl);
        return TODY_OK;
    });
}

tody_status tody_model_load(const char* path, tody_model** out) {
    return guarded([&]() {
        if (!path || !out) todynet::throw_config("tody_model_load: null argument");
        CheckpointInfo info = todynet::read_checkpoint_info(path);
        if (info.precision == "f32") {
            TodyNetModel<float> impl = todynet::load_checkpoint<float>(path, &info);
            *out = new tody_model{std::move(info), std::move(impl)};
        } else {
            TodyNetModel<double> impl = todynet::load_checkpoint<double>(path, &info);
            *out = new tody_model{std::move(info), std::move(impl)};
        }
        return TODY_OK;
    });
}

tody_status tody_model_config(const tody_model* model, tody_config* out) {
    return guarded([&]() {
        if (!model || !out) todynet::throw_config("tody_model_config: null argument");
        from_model_config(model->info.config,
                          model->info.precision == "f32" ? TODY_PRECISION_F32
                                                         : TODY_PRECISION_F64,
                          out);
        return TODY_OK;
    });
}

int32_t tody_model_num_layers(const tody_model* model) {
    return static_cast<int32_t>(
        std::visit([](const auto& impl) { return impl.num_blocks(); }, model->impl));
}
int32_t tody_model_num_slots(const tody_model* model) {
    return static_cast<int32_t>(
        std::visit([](const auto& impl) { return impl.effective_slots(); }, model->impl));
}
int32_t tody_model_num_classes(const tody_model* model) {
    return static_cast<int32_t>(model->info.classes);
}
const char* tody_model_dataset_name(const tody_model* model) {
    return model->info.dataset_name.c_str();
}

tody_status tody_model_edge_list(tody_model* model, int32_t layer, int32_t slot,
                                 char** out_text) {
    return guarded([&]() {
        if (!model || !out_text) todynet::throw_config("tody_model_edge_list: null argument");
        const int32_t layers = tody_model_num_layers(model);
        const int32_t slots = tody_model_num_slots(model);
        if (layer < 1 || layer > layers) {
            todynet::throw_config("layer " + std::to_string(layer) + " out of range (1.." +
                                  std::to_string(layers) + ")");
        }
        if (slot < 1 || slot > slots) {
            todynet::throw_config("slot " + std::to_string(slot) + " out of range (1.." +
                                  std::to_string(slots) + ")");
        }
        const std::string text = std::visit(
            [&](auto& impl) {
                auto adj = impl.layer_adjacency(static_cast<std::size_t>(layer - 1));
                const std::size_t n = adj.dim(1);
                const std::size_t s = static_cast<std::size_t>(slot - 1);
                std::ostringstream os;
                os << "# slot\tsrc\tdst\tweight\n";
                os << std::setprecision(17);
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < n; ++j) {
                        const double w = static_cast<double>(adj[(s * n + i) * n + j]);
                        if (w != 0.0) os << slot << '\t' << i << '\t' << j << '\t' << w << '\n';
                    }
                return os.str();
            },
            model->impl);
        char* buf = new char[text.size() + 1];
        std::memcpy(buf, text.c_str(), text.size() + 1);
        *out_text = buf;
        return TODY_OK;
    });
}

void tody_string_free(char* text) { delete[] text; }

}  // extern "C"
