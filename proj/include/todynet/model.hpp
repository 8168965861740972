#pragma once

// Full network assembly, training loop, and evaluation.
//
// Per block b = 1..3: temporal conv -> slot features -> graph isomorphism
// layer (with the previous-slot connection) -> temporal graph pooling.
// Each block's output is mean-pooled (mask-aware) into a per-block vector;
// the three vectors are concatenated and mapped to class logits by one
// fully connected layer.

#include <array>
#include <chrono>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "todynet/adam.hpp"
#include "todynet/dataset.hpp"
#include "todynet/dygin.hpp"
#include "todynet/graph.hpp"
#include "todynet/temporal_conv.hpp"
#include "todynet/tgp.hpp"

namespace todynet {

struct ModelConfig {
    std::size_t num_graphs = 4;  // time slots S
    std::size_t top_k = 3;
    double pool_ratio = 0.2;
    std::array<std::size_t, 3> tc_kernels{11, 3, 3};
    std::array<std::size_t, 3> tc_channels{64, 128, 256};
    std::size_t batch_size = 16;
    double learning_rate = 1e-4;
    std::size_t epochs = 2000;
    std::uint64_t seed = 0;
    bool no_graph = false;
    bool no_dygraph = false;  // single static graph
    bool no_gpool = false;
    bool znormalize = true;

    void validate() const {
        if (num_graphs < 1) throw_config("num-graphs must be >= 1");
        if (top_k < 1) throw_config("topk must be >= 1");
        if (!(pool_ratio > 0.0) || pool_ratio > 1.0) {
            throw_config("pool-ratio must lie in (0, 1], got " + std::to_string(pool_ratio));
        }
        if (batch_size < 1) throw_config("batch-size must be >= 1");
        if (!(learning_rate > 0.0)) throw_config("lr must be positive");
        if (epochs < 1) throw_config("epochs must be >= 1");
        for (std::size_t k : tc_kernels)
            if (k % 2 == 0) throw_config("tc kernel sizes must be odd");
    }
};

template <typename R>
class TodyNetModel {
public:
    static constexpr std::size_t kBlocks = 3;

    TodyNetModel(ModelConfig cfg, std::size_t dims, std::size_t length, std::size_t classes)
        : cfg_(cfg), d_(dims), l_(length), classes_(classes) {
        cfg_.validate();
        if (classes_ < 2) throw_config("model needs at least 2 classes");
        s_eff_ = cfg_.no_dygraph ? 1 : cfg_.num_graphs;
        if (!cfg_.no_graph) {
            if (s_eff_ > l_) {
                throw_config("num-graphs " + std::to_string(s_eff_) +
                             " exceeds series length " + std::to_string(l_));
            }
            if (d_ < 2) {
                throw_config("graph construction needs at least 2 dimensions; "
                             "use the no-graph variant for univariate data");
            }
            part_ = partition_slots(l_, s_eff_);
            masks_[0] = SlotMask::from_partition(part_);
            k_eff_ = std::min(cfg_.top_k, d_ - 1);
        }

        Rng rng(mix_seed(cfg_.seed, 0xF00D));
        // Construction order is fixed and flag-independent so a given seed
        // always produces the same initialization.
        emb_ = NodeEmbeddingPair<R>::seeded(std::max<std::size_t>(s_eff_, 1), d_, rng, "graph");
        nodes_[0] = d_;
        std::size_t cin = 1;
        for (std::size_t b = 0; b < kBlocks; ++b) {
            const std::size_t cout = cfg_.tc_channels[b];
            tc_[b] = TcStage<R>::seeded(cin, cout, cfg_.tc_kernels[b], rng,
                                        "tc" + std::to_string(b + 1));
            gin_[b] = GinLayer<R>::seeded(cout, cout, rng, "gin" + std::to_string(b + 1));
            if (!cfg_.no_graph && !cfg_.no_gpool) {
                // Valid pooling convolution cannot exceed the within-slot
                // length, so the configured kernel is capped when needed.
                kappa_[b] = std::min(cfg_.tc_kernels[b], masks_[b].tau);
                nodes_[b + 1] = pooled_node_count(nodes_[b], cfg_.pool_ratio);
                tgp_[b] = TgpLayer<R>::seeded(nodes_[b], nodes_[b + 1], kappa_[b], rng,
                                              "tgp" + std::to_string(b + 1));
                masks_[b + 1] = masks_[b].cropped(kappa_[b]);
            } else {
                kappa_[b] = 1;
                nodes_[b + 1] = nodes_[b];
                tgp_[b] = TgpLayer<R>::seeded(nodes_[b], nodes_[b], 1, rng,
                                              "tgp" + std::to_string(b + 1));
                masks_[b + 1] = masks_[b];
            }
            cin = cout;
        }
        const std::size_t feat = cfg_.tc_channels[0] + cfg_.tc_channels[1] + cfg_.tc_channels[2];
        const double a = 1.0 / std::sqrt(static_cast<double>(feat));
        fc_w_ = Parameter<R>("fc.w", DenseArray<R>::uniform(Shape{feat, classes_}, rng, -a, a));
        fc_b_ = Parameter<R>("fc.b", DenseArray<R>::uniform(Shape{classes_}, rng, -a, a));
    }

    // x: [B, d, l] -> logits [B, classes]
    Var forward(Tape<R>& t, const DenseArray<R>& x, bool training) {
        if (x.rank() != 3 || x.dim(1) != d_ || x.dim(2) != l_) {
            throw_shape("forward: expected [B," + std::to_string(d_) + "," + std::to_string(l_) +
                        "], got " + shape_str(x.shape));
        }
        const std::size_t B = x.dim(0);
        Var input = t.leaf(x);
        std::vector<Var> readouts;

        if (cfg_.no_graph) {
            // Temporal path only: conv stages compose on the unslotted tensor.
            Var h = ops::reshape(t, input, Shape{B, d_, 1, l_});
            for (std::size_t b = 0; b < kBlocks; ++b) {
                h = tc_[b].forward_nodes(t, h);
                readouts.push_back(ops::mean_nodes_time(t, h));
            }
        } else {
            Var adj = ops::normalize_adjacency(
                t, ops::topk_sparsify(
                       t, ops::construct_adjacency(t, t.param(emb_.theta), t.param(emb_.psi)),
                       k_eff_));
            const bool use_dgt = s_eff_ > 1;
            Var h4 = tc_[0].forward_nodes(t, ops::reshape(t, input, Shape{B, d_, 1, l_}));
            Var h = ops::slot_split(t, h4, part_);
            for (std::size_t b = 0; b < kBlocks; ++b) {
                if (b > 0) h = tc_[b].forward_slots(t, h);
                h = gin_[b].forward(t, h, adj, use_dgt, training);
                if (!cfg_.no_gpool) {
                    auto pooled = tgp_[b].forward(t, h);
                    h = pooled.features;
                    readouts.push_back(ops::masked_mean(t, h, masks_[b + 1]));
                    if (b + 1 < kBlocks) {
                        adj = ops::sanitize_adjacency(
                            t, ops::pool_adjacency(t, pooled.assignment, adj));
                    }
                } else {
                    readouts.push_back(ops::masked_mean(t, h, masks_[0]));
                }
            }
        }
        Var feats = ops::concat_cols(t, readouts);
        return ops::row_bias_add(t, ops::matmul(t, feats, t.param(fc_w_)), t.param(fc_b_));
    }

    // Trainable parameters on the active paths.
    std::vector<Parameter<R>*> parameters() {
        std::vector<Parameter<R>*> out;
        if (!cfg_.no_graph) {
            out.push_back(&emb_.theta);
            out.push_back(&emb_.psi);
        }
        for (std::size_t b = 0; b < kBlocks; ++b) {
            for (auto* p : tc_[b].parameters()) out.push_back(p);
            if (!cfg_.no_graph) {
                for (auto* p : gin_[b].parameters()) out.push_back(p);
                if (!cfg_.no_gpool) {
                    for (auto* p : tgp_[b].parameters()) out.push_back(p);
                }
            }
        }
        out.push_back(&fc_w_);
        out.push_back(&fc_b_);
        return out;
    }

    struct NamedArray {
        std::string name;
        DenseArray<R>* array;
    };

    // Everything that defines the trained state: parameter values plus the
    // frozen normalization statistics.
    std::vector<NamedArray> named_state() {
        std::vector<NamedArray> out;
        for (auto* p : parameters()) out.push_back({p->name, &p->value});
        if (!cfg_.no_graph) {
            for (std::size_t b = 0; b < kBlocks; ++b) {
                out.push_back({"gin" + std::to_string(b + 1) + ".running_mean",
                               &gin_[b].running_mean});
                out.push_back({"gin" + std::to_string(b + 1) + ".running_var",
                               &gin_[b].running_var});
            }
        }
        return out;
    }

    // Normalized adjacency stack entering graph layer `layer` (0-based).
    DenseArray<R> layer_adjacency(std::size_t layer) {
        if (cfg_.no_graph) throw_config("the no-graph variant has no adjacency to inspect");
        if (layer >= kBlocks) {
            throw_config("layer " + std::to_string(layer + 1) + " out of range (1.." +
                         std::to_string(kBlocks) + ")");
        }
        Tape<R> t;
        Var adj = ops::normalize_adjacency(
            t, ops::topk_sparsify(
                   t, ops::construct_adjacency(t, t.param(emb_.theta), t.param(emb_.psi)),
                   k_eff_));
        if (!cfg_.no_gpool) {
            for (std::size_t b = 0; b < layer; ++b) {
                Var m = ops::contract_kernel(t, t.param(tgp_[b].w), t.param(tgp_[b].v));
                adj = ops::sanitize_adjacency(t, ops::pool_adjacency(t, m, adj));
            }
        }
        return t.value(adj);
    }

    NodeEmbeddingPair<R>& embeddings() { return emb_; }
    TcStage<R>& tc(std::size_t b) { return tc_.at(b); }
    GinLayer<R>& gin(std::size_t b) { return gin_.at(b); }
    TgpLayer<R>& tgp(std::size_t b) { return tgp_.at(b); }

    const ModelConfig& config() const { return cfg_; }
    std::size_t dims() const { return d_; }
    std::size_t length() const { return l_; }
    std::size_t classes() const { return classes_; }
    std::size_t effective_slots() const { return s_eff_; }
    std::size_t effective_top_k() const { return k_eff_; }
    std::size_t num_blocks() const { return kBlocks; }
    std::size_t nodes_at(std::size_t stage) const { return nodes_.at(stage); }
    const SlotMask& mask_at(std::size_t stage) const { return masks_.at(stage); }

private:
    ModelConfig cfg_;
    std::size_t d_, l_, classes_;
    std::size_t s_eff_ = 1;
    std::size_t k_eff_ = 1;
    SlotPartition part_;
    std::array<SlotMask, kBlocks + 1> masks_{};
    std::array<std::size_t, kBlocks + 1> nodes_{};
    std::array<std::size_t, kBlocks> kappa_{};
    NodeEmbeddingPair<R> emb_;
    std::array<TcStage<R>, kBlocks> tc_;
    std::array<GinLayer<R>, kBlocks> gin_;
    std::array<TgpLayer<R>, kBlocks> tgp_;
    Parameter<R> fc_w_, fc_b_;
};

struct TrainReport {
    std::vector<double> epoch_loss;
    double train_accuracy = 0.0;
    double wall_seconds = 0.0;
    std::size_t best_epoch = 0;
};

template <typename R>
std::vector<int> predict(TodyNetModel<R>& model, const TsDataset& ds) {
    if (ds.header.dimensions != model.dims() || ds.header.series_length != model.length()) {
        throw_data("dataset shape (" + std::to_string(ds.header.dimensions) + "," +
                   std::to_string(ds.header.series_length) + ") does not match the model (" +
                   std::to_string(model.dims()) + "," + std::to_string(model.length()) + ")");
    }
    if (ds.num_classes() != model.classes()) {
        throw_data("dataset declares " + std::to_string(ds.num_classes()) +
                   " classes, model has " + std::to_string(model.classes()));
    }
    std::vector<int> out;
    out.reserve(ds.size());
    const std::size_t batch = model.config().batch_size;
    for (std::size_t at = 0; at < ds.size(); at += batch) {
        std::vector<std::size_t> idx;
        for (std::size_t i = at; i < std::min(ds.size(), at + batch); ++i) idx.push_back(i);
        Tape<R> t;
        Var logits = model.forward(t, gather_batch<R>(ds, idx), false);
        const DenseArray<R>& lv = t.value(logits);
        const std::size_t C = lv.dim(1);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            int best = 0;
            for (std::size_t c = 1; c < C; ++c) {
                // strict comparison: ties resolve to the smaller class index
                if (lv[i * C + c] > lv[i * C + static_cast<std::size_t>(best)]) {
                    best = static_cast<int>(c);
                }
            }
            out.push_back(best);
        }
    }
    return out;
}

template <typename R>
double evaluate_model(TodyNetModel<R>& model, const TsDataset& ds) {
    const std::vector<int> pred = predict(model, ds);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < ds.size(); ++i)
        if (pred[i] == ds.labels[i]) ++correct;
    return static_cast<double>(correct) / static_cast<double>(ds.size());
}

// Seeded training with softmax cross-entropy and Adam. Keeps the state with
// the best epoch loss and restores it before returning.
template <typename R>
TrainReport train_model(TodyNetModel<R>& model, const TsDataset& train,
                        const std::function<void(std::size_t, double)>& on_epoch = {}) {
    const ModelConfig& cfg = model.config();
    if (train.size() == 0) throw_config("training dataset is empty");
    const auto t0 = std::chrono::steady_clock::now();

    BatchIterator batches(train, cfg.batch_size, cfg.seed);
    AdamOptimizer<R> adam(cfg.learning_rate);
    std::vector<Parameter<R>*> params = model.parameters();

    TrainReport report;
    double best_loss = 0.0;
    std::vector<DenseArray<R>> best_state;
    auto snapshot = [&] {
        best_state.clear();
        for (auto& item : model.named_state()) best_state.push_back(*item.array);
    };

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        double loss_sum = 0.0;
        std::size_t batch_index = 0;
        for (const auto& idx : batches.epoch_batches(epoch)) {
            Tape<R> t;
            Var logits = model.forward(t, gather_batch<R>(train, idx), true);
            Var loss = ops::softmax_cross_entropy(t, logits, gather_labels(train, idx));
            const double lval = static_cast<double>(t.value(loss)[0]);
            if (!std::isfinite(lval)) {
                throw_runtime("training loss became non-finite at epoch " +
                              std::to_string(epoch + 1) + ", batch " +
                              std::to_string(batch_index + 1));
            }
            adam.zero_grad(params);
            t.backward(loss);
            for (auto* p : params) {
                if (!p->grad.all_finite()) {
                    throw_runtime("gradient of " + p->name + " became non-finite at epoch " +
                                  std::to_string(epoch + 1) + ", batch " +
                                  std::to_string(batch_index + 1));
                }
            }
            adam.step(params);
            loss_sum += lval * static_cast<double>(idx.size());
            ++batch_index;
        }
        const double epoch_loss = loss_sum / static_cast<double>(train.size());
        report.epoch_loss.push_back(epoch_loss);
        if (epoch == 0 || epoch_loss < best_loss) {
            best_loss = epoch_loss;
            report.best_epoch = epoch;
            snapshot();
        }
        if (on_epoch) on_epoch(epoch, epoch_loss);
    }

    // restore the best-loss state
    {
        auto state = model.named_state();
        for (std::size_t i = 0; i < state.size(); ++i) *state[i].array = best_state[i];
    }
    report.train_accuracy = evaluate_model(model, train);
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

}  // namespace todynet
