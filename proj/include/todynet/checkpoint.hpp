#pragma once

// Versioned binary checkpoint: magic, JSON header (config echo, dataset
// shape, class labels, seed, precision), a name -> shape -> data table of
// the model state, and a trailing content hash. Loading refuses mismatched
// configs and truncated or corrupted files.

#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "todynet/dataset.hpp"
#include "todynet/model.hpp"

namespace todynet {

inline constexpr char kCheckpointMagic[4] = {'T', 'D', 'Y', 'N'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointInfo {
    ModelConfig config;
    std::size_t dims = 0;
    std::size_t length = 0;
    std::size_t classes = 0;
    std::vector<std::string> class_labels;
    std::string precision = "f64";
    std::string dataset_name;
};

inline nlohmann::json config_to_json(const ModelConfig& c) {
    return nlohmann::json{
        {"num_graphs", c.num_graphs},
        {"top_k", c.top_k},
        {"pool_ratio", c.pool_ratio},
        {"tc_kernels", c.tc_kernels},
        {"tc_channels", c.tc_channels},
        {"batch_size", c.batch_size},
        {"learning_rate", c.learning_rate},
        {"epochs", c.epochs},
        {"seed", c.seed},
        {"no_graph", c.no_graph},
        {"no_dygraph", c.no_dygraph},
        {"no_gpool", c.no_gpool},
        {"znormalize", c.znormalize},
    };
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.num_graphs = j.at("num_graphs").get<std::size_t>();
    c.top_k = j.at("top_k").get<std::size_t>();
    c.pool_ratio = j.at("pool_ratio").get<double>();
    c.tc_kernels = j.at("tc_kernels").get<std::array<std::size_t, 3>>();
    c.tc_channels = j.at("tc_channels").get<std::array<std::size_t, 3>>();
    c.batch_size = j.at("batch_size").get<std::size_t>();
    c.learning_rate = j.at("learning_rate").get<double>();
    c.epochs = j.at("epochs").get<std::size_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.no_graph = j.at("no_graph").get<bool>();
    c.no_dygraph = j.at("no_dygraph").get<bool>();
    c.no_gpool = j.at("no_gpool").get<bool>();
    c.znormalize = j.at("znormalize").get<bool>();
    return c;
}

namespace detail {

template <typename T>
void put(std::string& buf, const T& v) {
    buf.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

class Reader {
public:
    Reader(const std::string& buf, const std::string& path) : buf_(buf), path_(path) {}

    template <typename T>
    T get() {
        T v;
        raw(&v, sizeof(T));
        return v;
    }

    std::string str(std::size_t n) {
        std::string s(n, '\0');
        raw(s.data(), n);
        return s;
    }

    void raw(void* dst, std::size_t n) {
        if (at_ + n > buf_.size()) {
            throw_data("checkpoint integrity error: " + path_ + " is truncated");
        }
        std::memcpy(dst, buf_.data() + at_, n);
        at_ += n;
    }

    std::size_t at() const { return at_; }

private:
    const std::string& buf_;
    std::string path_;
    std::size_t at_ = 0;
};

}  // namespace detail

template <typename R>
void save_checkpoint(const std::string& path, TodyNetModel<R>& model,
                     const CheckpointInfo& info) {
    nlohmann::json header{
        {"config", config_to_json(model.config())},
        {"dims", model.dims()},
        {"length", model.length()},
        {"classes", model.classes()},
        {"class_labels", info.class_labels},
        {"precision", sizeof(R) == 4 ? "f32" : "f64"},
        {"dataset_name", info.dataset_name},
    };
    const std::string hjson = header.dump();

    std::string body;
    detail::put<std::uint32_t>(body, kCheckpointVersion);
    detail::put<std::uint64_t>(body, hjson.size());
    body.append(hjson);
    auto state = model.named_state();
    detail::put<std::uint64_t>(body, state.size());
    for (const auto& item : state) {
        detail::put<std::uint32_t>(body, static_cast<std::uint32_t>(item.name.size()));
        body.append(item.name);
        detail::put<std::uint8_t>(body, static_cast<std::uint8_t>(sizeof(R)));
        detail::put<std::uint32_t>(body, static_cast<std::uint32_t>(item.array->rank()));
        for (std::size_t dim : item.array->shape) detail::put<std::uint64_t>(body, dim);
        body.append(reinterpret_cast<const char*>(item.array->ptr()),
                    item.array->numel() * sizeof(R));
    }
    const std::uint64_t digest = fnv1a64(body.data(), body.size());

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw_io("cannot write checkpoint: " + path);
    out.write(kCheckpointMagic, 4);
    out.write(body.data(), static_cast<std::streamsize>(body.size()));
    out.write(reinterpret_cast<const char*>(&digest), sizeof(digest));
    if (!out) throw_io("write failure on checkpoint: " + path);
}

inline std::string read_checkpoint_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw_io("cannot open checkpoint: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    std::string bytes = buf.str();
    if (bytes.size() < 4 + sizeof(std::uint64_t) ||
        std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
        throw_data("not a checkpoint file: " + path);
    }
    const std::string body = bytes.substr(4, bytes.size() - 4 - sizeof(std::uint64_t));
    std::uint64_t stored;
    std::memcpy(&stored, bytes.data() + bytes.size() - sizeof(std::uint64_t), sizeof(stored));
    if (fnv1a64(body.data(), body.size()) != stored) {
        throw_data("checkpoint integrity error: " + path + " fails its content hash");
    }
    return body;
}

inline CheckpointInfo read_checkpoint_info(const std::string& path) {
    const std::string body = read_checkpoint_bytes(path);
    detail::Reader r(body, path);
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion) {
        throw_data("unsupported checkpoint version " + std::to_string(version));
    }
    const auto hlen = r.get<std::uint64_t>();
    nlohmann::json header = nlohmann::json::parse(r.str(hlen), nullptr, false);
    if (header.is_discarded()) throw_data("checkpoint header is not valid JSON: " + path);
    CheckpointInfo info;
    info.config = config_from_json(header.at("config"));
    info.dims = header.at("dims").get<std::size_t>();
    info.length = header.at("length").get<std::size_t>();
    info.classes = header.at("classes").get<std::size_t>();
    info.class_labels = header.at("class_labels").get<std::vector<std::string>>();
    info.precision = header.at("precision").get<std::string>();
    info.dataset_name = header.at("dataset_name").get<std::string>();
    return info;
}

template <typename R>
TodyNetModel<R> load_checkpoint(const std::string& path, CheckpointInfo* out_info = nullptr) {
    const std::string body = read_checkpoint_bytes(path);
    detail::Reader r(body, path);
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion) {
        throw_data("unsupported checkpoint version " + std::to_string(version));
    }
    const auto hlen = r.get<std::uint64_t>();
    nlohmann::json header = nlohmann::json::parse(r.str(hlen), nullptr, false);
    if (header.is_discarded()) throw_data("checkpoint header is not valid JSON: " + path);
    CheckpointInfo info;
    info.config = config_from_json(header.at("config"));
    info.dims = header.at("dims").get<std::size_t>();
    info.length = header.at("length").get<std::size_t>();
    info.classes = header.at("classes").get<std::size_t>();
    info.class_labels = header.at("class_labels").get<std::vector<std::string>>();
    info.precision = header.at("precision").get<std::string>();
    info.dataset_name = header.at("dataset_name").get<std::string>();
    const std::string want = sizeof(R) == 4 ? "f32" : "f64";
    if (info.precision != want) {
        throw_data("checkpoint precision is " + info.precision + ", expected " + want);
    }

    TodyNetModel<R> model(info.config, info.dims, info.length, info.classes);
    auto state = model.named_state();
    const auto count = r.get<std::uint64_t>();
    if (count != state.size()) {
        throw_data("checkpoint holds " + std::to_string(count) + " arrays, model wants " +
                   std::to_string(state.size()) + " (config mismatch)");
    }
    for (auto& item : state) {
        const auto name_len = r.get<std::uint32_t>();
        const std::string name = r.str(name_len);
        if (name != item.name) {
            throw_data("checkpoint entry '" + name + "' does not match expected '" + item.name +
                       "' (config mismatch)");
        }
        const auto dtype = r.get<std::uint8_t>();
        if (dtype != sizeof(R)) throw_data("checkpoint entry '" + name + "' has wrong dtype");
        const auto rank = r.get<std::uint32_t>();
        Shape shape(rank);
        for (auto& dim : shape) dim = r.get<std::uint64_t>();
        if (shape != item.array->shape) {
            throw_data("checkpoint entry '" + name + "' shape " + shape_str(shape) +
                       " does not match model shape " + shape_str(item.array->shape));
        }
        r.raw(item.array->ptr(), item.array->numel() * sizeof(R));
    }
    if (out_info) *out_info = info;
    return model;
}

}  // namespace todynet
