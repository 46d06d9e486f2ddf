#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace syrenets {

// One named parameter block inside the flat value array. fan_in drives the
// uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) initialization; bias blocks use
// the fan_in of their weight.
struct ParamBlock {
    std::string name;
    size_t offset = 0;
    size_t rows = 0;
    size_t cols = 0;
    size_t fan_in = 0;

    size_t count() const { return rows * cols; }
};

// All learnable weights addressed by a stable flat index. The layout is fixed
// at construction; tape leaf ids coincide with these indices.
class ParamStore {
public:
    size_t add_block(const std::string& name, size_t rows, size_t cols, size_t fan_in);

    size_t size() const { return values_.size(); }
    std::span<double> values() { return values_; }
    std::span<const double> values() const { return values_; }
    double* data() { return values_.data(); }

    const std::vector<ParamBlock>& blocks() const { return blocks_; }
    const ParamBlock& find(const std::string& name) const;
    bool has(const std::string& name) const { return index_.count(name) > 0; }
    std::span<double> block_values(const std::string& name);
    std::span<const double> block_values(const std::string& name) const;

    void init_uniform(uint64_t seed);
    void fill(double v);

private:
    std::vector<double> values_;
    std::vector<ParamBlock> blocks_;
    std::map<std::string, size_t> index_;
};

// ----------------------------------------------------------------------------
// Checkpoints: self-describing text, version tag "syrenets-ckpt-v1".
// Header key/value lines, then shape-annotated parameter blocks as flat
// decimal arrays (17 significant digits, one row per line).
// ----------------------------------------------------------------------------
struct CheckpointMeta {
    std::map<std::string, std::string> fields;

    void set(const std::string& k, const std::string& v) { fields[k] = v; }
    std::string get(const std::string& k, const std::string& fallback = "") const {
        auto it = fields.find(k);
        return it == fields.end() ? fallback : it->second;
    }
};

void save_checkpoint(const std::string& path, const CheckpointMeta& meta,
                     const ParamStore& params);
// Validates block names and shapes against the provided store; throws
// ParseError naming the offending block on mismatch.
CheckpointMeta load_checkpoint(const std::string& path, ParamStore& params);

} // namespace syrenets
