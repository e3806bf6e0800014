#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace cnx {

enum class LayerKind { submanifold, strided, dense_conv, pointwise };

const char* layer_kind_name(LayerKind k);

// One multiply-accumulate counts as one FLOP. `macs` is what the executed
// path performed; `dense_macs` is what the dense layer would perform on the
// full grid. Sparse layers charge the full kernel per active output site.
struct MacRecord {
    std::string layer;
    LayerKind kind = LayerKind::dense_conv;
    std::uint64_t macs = 0;
    std::uint64_t dense_macs = 0;
    std::uint64_t active_sites = 0;
    std::uint64_t total_sites = 0;
};

class MacLog {
public:
    void record(MacRecord r) { records_.push_back(std::move(r)); }
    const std::vector<MacRecord>& records() const { return records_; }
    std::uint64_t total_macs() const;
    std::uint64_t total_dense_macs() const;
    void clear() { records_.clear(); }

private:
    std::vector<MacRecord> records_;
};

}  // namespace cnx
