#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "todynet/array.hpp"
#include "todynet/rng.hpp"

namespace todynet {

struct TsHeader {
    std::string problem_name;
    std::size_t dimensions = 0;
    std::size_t series_length = 0;
    bool equal_length = true;
    std::vector<std::string> class_labels;
};

// A parsed multivariate time series collection. Every series is a [d, l]
// array; labels index into header.class_labels.
struct TsDataset {
    TsHeader header;
    std::vector<DenseArray<double>> series;
    std::vector<int> labels;
    std::string split;                  // informational tag: "train", "test", ""
    std::uint64_t source_digest = 0;    // FNV-1a 64 of the source bytes

    std::size_t size() const { return series.size(); }
    std::size_t num_classes() const { return header.class_labels.size(); }
};

std::uint64_t fnv1a64(const void* data, std::size_t n);

TsDataset parse_ts_file(const std::string& path);
TsDataset parse_ts_text(const std::string& text, const std::string& origin = "<memory>");

// Emits the sktime-style text form; doubles use max_digits10 so a reparse
// reproduces the exact values.
std::string serialize_ts(const TsDataset& ds);

// Per series, per dimension: subtract mean, divide by population std.
// Dimensions with std below 1e-8 are left at zero after mean subtraction.
TsDataset znormalize(TsDataset ds);

// Seeded batch scheduler: a fresh shuffle per epoch, short final batch
// emitted as-is. Identical (seed, epoch) pairs give identical order.
class BatchIterator {
public:
    BatchIterator(const TsDataset& ds, std::size_t batch_size, std::uint64_t seed);

    std::vector<std::vector<std::size_t>> epoch_batches(std::uint64_t epoch) const;

    std::size_t batches_per_epoch() const;

private:
    const TsDataset* ds_;
    std::size_t batch_size_;
    std::uint64_t seed_;
};

// Materializes series at `indices` into a [B, d, l] tensor.
template <typename R>
DenseArray<R> gather_batch(const TsDataset& ds, const std::vector<std::size_t>& indices) {
    const std::size_t d = ds.header.dimensions, l = ds.header.series_length;
    DenseArray<R> out(Shape{indices.size(), d, l});
    std::size_t at = 0;
    for (std::size_t idx : indices) {
        const DenseArray<double>& s = ds.series[idx];
        for (std::size_t i = 0; i < d * l; ++i) out[at * d * l + i] = static_cast<R>(s[i]);
        ++at;
    }
    return out;
}

std::vector<int> gather_labels(const TsDataset& ds, const std::vector<std::size_t>& indices);

}  // namespace todynet
