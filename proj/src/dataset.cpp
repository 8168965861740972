#include "todynet/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "todynet/error.hpp"

namespace todynet {

namespace {

std::string trim(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return s;
}

std::vector<std::string> split_ws(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream is(s);
    std::string tok;
    while (is >> tok) out.push_back(tok);
    return out;
}

std::vector<std::string> split_char(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        std::size_t pos = s.find(sep, start);
        if (pos == std::string::npos) {
            out.push_back(s.substr(start));
            break;
        }
        out.push_back(s.substr(start, pos - start));
        start = pos + 1;
    }
    return out;
}

bool parse_bool(const std::string& s) { return lower(trim(s)) == "true"; }

double parse_real(const std::string& tok, const std::string& origin, std::size_t lineno) {
    const std::string v = trim(tok);
    if (v.empty()) {
        throw_parse(origin + ":" + std::to_string(lineno) + ": empty value");
    }
    char* end = nullptr;
    const double x = std::strtod(v.c_str(), &end);
    if (end != v.c_str() + v.size()) {
        throw_parse(origin + ":" + std::to_string(lineno) + ": bad numeric value '" + v + "'");
    }
    return x;
}

}  // namespace

std::uint64_t fnv1a64(const void* data, std::size_t n) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = 1469598103934665603ULL;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

TsDataset parse_ts_text(const std::string& text, const std::string& origin) {
    TsDataset ds;
    ds.source_digest = fnv1a64(text.data(), text.size());

    TsHeader& h = ds.header;
    bool saw_problem = false, saw_dims = false, saw_len = false, saw_classes = false;
    bool in_data = false;

    std::istringstream is(text);
    std::string raw;
    std::size_t lineno = 0;
    while (std::getline(is, raw)) {
        ++lineno;
        if (!raw.empty() && raw.back() == '\r') raw.pop_back();
        const std::string line = trim(raw);
        if (line.empty() || line[0] == '#') continue;

        if (!in_data && line[0] == '@') {
            const std::size_t sp = line.find_first_of(" \t");
            const std::string key = lower(sp == std::string::npos ? line : line.substr(0, sp));
            const std::string rest = sp == std::string::npos ? "" : trim(line.substr(sp + 1));
            if (key == "@problemname") {
                h.problem_name = rest;
                saw_problem = true;
            } else if (key == "@dimensions") {
                h.dimensions = static_cast<std::size_t>(
                    parse_real(rest, origin, lineno));
                saw_dims = true;
            } else if (key == "@serieslength") {
                h.series_length = static_cast<std::size_t>(parse_real(rest, origin, lineno));
                saw_len = true;
            } else if (key == "@equallength") {
                h.equal_length = parse_bool(rest);
            } else if (key == "@classlabel") {
                std::vector<std::string> toks = split_ws(rest);
                if (toks.empty() || lower(toks[0]) != "true") {
                    throw_parse(origin + ":" + std::to_string(lineno) +
                                ": @classLabel must be 'true' with a label list");
                }
                h.class_labels.assign(toks.begin() + 1, toks.end());
                saw_classes = true;
            } else if (key == "@data") {
                in_data = true;
            }
            // other directives (@timeStamps, @missing, @univariate, ...) are ignored
            continue;
        }

        if (!in_data) {
            throw_parse(origin + ":" + std::to_string(lineno) +
                        ": data line before '@data' marker");
        }

        // One series per line: d ':'-separated value lists, then the label.
        std::vector<std::string> fields = split_char(line, ':');
        if (fields.size() < 2) {
            throw_parse(origin + ":" + std::to_string(lineno) +
                        ": expected '<dim>:...:<label>', found no ':' separator");
        }
        const std::size_t ndims = fields.size() - 1;
        if (saw_dims && ndims != h.dimensions) {
            throw_parse(origin + ":" + std::to_string(lineno) + ": series has " +
                        std::to_string(ndims) + " dimensions, header declares " +
                        std::to_string(h.dimensions));
        }
        if (!saw_dims) {
            h.dimensions = ndims;
            saw_dims = true;
        }

        std::vector<std::vector<double>> dims(ndims);
        for (std::size_t di = 0; di < ndims; ++di) {
            for (const std::string& tok : split_char(fields[di], ',')) {
                dims[di].push_back(parse_real(tok, origin, lineno));
            }
            if (dims[di].size() != dims[0].size()) {
                throw_parse(origin + ":" + std::to_string(lineno) + ": dimension " +
                            std::to_string(di + 1) + " has " + std::to_string(dims[di].size()) +
                            " values, dimension 1 has " + std::to_string(dims[0].size()));
            }
        }
        if (!saw_len) {
            h.series_length = dims[0].size();
            saw_len = true;
        }
        if (h.equal_length && dims[0].size() != h.series_length) {
            throw_parse(origin + ":" + std::to_string(lineno) + ": series length " +
                        std::to_string(dims[0].size()) + " does not match declared length " +
                        std::to_string(h.series_length));
        }

        const std::string label = trim(fields.back());
        if (!saw_classes) {
            throw_parse(origin + ":" + std::to_string(lineno) +
                        ": data line seen but no @classLabel declared");
        }
        const auto it = std::find(h.class_labels.begin(), h.class_labels.end(), label);
        if (it == h.class_labels.end()) {
            throw_parse(origin + ":" + std::to_string(lineno) + ": unknown class label '" +
                        label + "'");
        }
        ds.labels.push_back(static_cast<int>(it - h.class_labels.begin()));

        DenseArray<double> arr(Shape{ndims, h.series_length});
        for (std::size_t di = 0; di < ndims; ++di)
            for (std::size_t j = 0; j < h.series_length; ++j)
                arr[di * h.series_length + j] = dims[di][j];
        ds.series.push_back(std::move(arr));
    }

    if (!in_data) throw_parse(origin + ": missing '@data' section");
    if (!saw_problem) h.problem_name = "unnamed";
    if (ds.series.empty()) throw_parse(origin + ": no data lines after '@data'");
    if (h.dimensions < 1 || h.series_length < 1) {
        throw_parse(origin + ": header declares empty dimensions or length");
    }
    if (h.class_labels.empty()) throw_parse(origin + ": empty class label list");
    {
        std::vector<std::string> sorted = h.class_labels;
        std::sort(sorted.begin(), sorted.end());
        if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
            throw_parse(origin + ": duplicate class label in header");
        }
    }
    return ds;
}

TsDataset parse_ts_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw_io("cannot open dataset file: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_ts_text(buf.str(), path);
}

std::string serialize_ts(const TsDataset& ds) {
    std::ostringstream os;
    os.precision(17);
    os << "@problemName " << ds.header.problem_name << "\n";
    os << "@timeStamps false\n";
    os << "@missing false\n";
    os << "@univariate " << (ds.header.dimensions == 1 ? "true" : "false") << "\n";
    os << "@dimensions " << ds.header.dimensions << "\n";
    os << "@equalLength " << (ds.header.equal_length ? "true" : "false") << "\n";
    os << "@seriesLength " << ds.header.series_length << "\n";
    os << "@classLabel true";
    for (const std::string& c : ds.header.class_labels) os << ' ' << c;
    os << "\n@data\n";
    const std::size_t d = ds.header.dimensions, l = ds.header.series_length;
    for (std::size_t i = 0; i < ds.series.size(); ++i) {
        const DenseArray<double>& s = ds.series[i];
        for (std::size_t di = 0; di < d; ++di) {
            for (std::size_t j = 0; j < l; ++j) {
                if (j) os << ',';
                os << s[di * l + j];
            }
            os << ':';
        }
        os << ds.header.class_labels[static_cast<std::size_t>(ds.labels[i])] << "\n";
    }
    return os.str();
}

TsDataset znormalize(TsDataset ds) {
    const std::size_t d = ds.header.dimensions, l = ds.header.series_length;
    for (DenseArray<double>& s : ds.series) {
        for (std::size_t di = 0; di < d; ++di) {
            double* row = s.ptr() + di * l;
            double mean = 0;
            for (std::size_t j = 0; j < l; ++j) mean += row[j];
            mean /= static_cast<double>(l);
            double var = 0;
            for (std::size_t j = 0; j < l; ++j) {
                const double c = row[j] - mean;
                var += c * c;
            }
            var /= static_cast<double>(l);
            const double sd = std::sqrt(var);
            if (sd < 1e-8) {
                for (std::size_t j = 0; j < l; ++j) row[j] = 0.0;
            } else {
                for (std::size_t j = 0; j < l; ++j) row[j] = (row[j] - mean) / sd;
            }
        }
    }
    return ds;
}

BatchIterator::BatchIterator(const TsDataset& ds, std::size_t batch_size, std::uint64_t seed)
    : ds_(&ds), batch_size_(batch_size), seed_(seed) {
    if (batch_size < 1) throw_config("batch_iterator: batch size must be >= 1");
    if (ds.size() == 0) throw_config("batch_iterator: dataset is empty");
}

std::vector<std::vector<std::size_t>> BatchIterator::epoch_batches(std::uint64_t epoch) const {
    std::vector<std::size_t> perm(ds_->size());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    Rng rng(mix_seed(seed_, epoch));
    rng.shuffle(perm);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t at = 0; at < perm.size(); at += batch_size_) {
        const std::size_t end = std::min(perm.size(), at + batch_size_);
        out.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(at),
                         perm.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return out;
}

std::size_t BatchIterator::batches_per_epoch() const {
    return (ds_->size() + batch_size_ - 1) / batch_size_;
}

std::vector<int> gather_labels(const TsDataset& ds, const std::vector<std::size_t>& indices) {
    std::vector<int> out;
    out.reserve(indices.size());
    for (std::size_t i : indices) out.push_back(ds.labels[i]);
    return out;
}

}  // namespace todynet
