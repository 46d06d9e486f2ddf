#include "syrenets/params.hpp"

#include "syrenets/errors.hpp"
#include "syrenets/rng.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace syrenets {

size_t ParamStore::add_block(const std::string& name, size_t rows, size_t cols,
                             size_t fan_in) {
    if (index_.count(name)) throw UsageError("duplicate parameter block: " + name);
    ParamBlock b{name, values_.size(), rows, cols, fan_in};
    index_[name] = blocks_.size();
    blocks_.push_back(b);
    values_.resize(values_.size() + rows * cols, 0.0);
    return b.offset;
}

const ParamBlock& ParamStore::find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw UsageError("unknown parameter block: " + name);
    return blocks_[it->second];
}

std::span<double> ParamStore::block_values(const std::string& name) {
    const ParamBlock& b = find(name);
    return std::span<double>(values_).subspan(b.offset, b.count());
}

std::span<const double> ParamStore::block_values(const std::string& name) const {
    const ParamBlock& b = find(name);
    return std::span<const double>(values_).subspan(b.offset, b.count());
}

void ParamStore::init_uniform(uint64_t seed) {
    Rng rng(seed);
    for (const ParamBlock& b : blocks_) {
        double bound = b.fan_in > 0 ? 1.0 / std::sqrt(static_cast<double>(b.fan_in)) : 0.0;
        for (size_t i = 0; i < b.count(); ++i)
            values_[b.offset + i] = rng.uniform(-bound, bound);
    }
}

void ParamStore::fill(double v) {
    for (double& x : values_) x = v;
}

// ----------------------------------------------------------------------------

static constexpr const char* kCkptMagic = "syrenets-ckpt-v1";

void save_checkpoint(const std::string& path, const CheckpointMeta& meta,
                     const ParamStore& params) {
    std::ofstream out(path);
    if (!out) throw UsageError("cannot open for writing: " + path);
    out << kCkptMagic << '\n';
    for (const auto& [k, v] : meta.fields) out << k << ' ' << v << '\n';
    out << "blocks " << params.blocks().size() << '\n';
    char buf[32];
    std::string line;
    for (const ParamBlock& b : params.blocks()) {
        out << "block " << b.name << ' ' << b.rows << ' ' << b.cols << '\n';
        std::span<const double> v = params.values().subspan(b.offset, b.count());
        for (size_t r = 0; r < b.rows; ++r) {
            line.clear();
            for (size_t c = 0; c < b.cols; ++c) {
                if (c) line += ' ';
                std::snprintf(buf, sizeof buf, "%.17g", v[r * b.cols + c]);
                line += buf;
            }
            out << line << '\n';
        }
    }
    if (!out) throw UsageError("write failed: " + path);
}

CheckpointMeta load_checkpoint(const std::string& path, ParamStore& params) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open checkpoint: " + path);
    std::string line;
    size_t lineno = 0;
    auto next_line = [&]() {
        if (!std::getline(in, line)) throw ParseError("truncated checkpoint " + path, lineno);
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
    };

    next_line();
    if (line != kCkptMagic)
        throw ParseError("bad checkpoint magic in " + path + " (want " + kCkptMagic + ")", 1);

    CheckpointMeta meta;
    size_t n_blocks = 0;
    while (true) {
        next_line();
        std::istringstream ss(line);
        std::string key;
        ss >> key;
        if (key == "blocks") {
            ss >> n_blocks;
            break;
        }
        std::string value;
        std::getline(ss, value);
        if (!value.empty() && value[0] == ' ') value.erase(0, 1);
        meta.set(key, value);
    }

    if (n_blocks != params.blocks().size())
        throw ParseError("checkpoint has " + std::to_string(n_blocks) + " blocks, model has " +
                             std::to_string(params.blocks().size()),
                         lineno);

    for (const ParamBlock& b : params.blocks()) {
        next_line();
        std::istringstream ss(line);
        std::string tag, name;
        size_t rows = 0, cols = 0;
        ss >> tag >> name >> rows >> cols;
        if (tag != "block" || name != b.name || rows != b.rows || cols != b.cols)
            throw ParseError("checkpoint block mismatch: expected '" + b.name + " " +
                                 std::to_string(b.rows) + " " + std::to_string(b.cols) +
                                 "', got '" + line + "'",
                             lineno);
        std::span<double> v = params.values().subspan(b.offset, b.count());
        for (size_t r = 0; r < b.rows; ++r) {
            next_line();
            const char* p = line.c_str();
            for (size_t c = 0; c < b.cols; ++c) {
                char* end = nullptr;
                v[r * b.cols + c] = std::strtod(p, &end);
                if (end == p)
                    throw ParseError("corrupt values in block " + b.name, lineno);
                p = end;
            }
        }
    }
    return meta;
}

} // namespace syrenets
