#include "convnext/instrument.hpp"

namespace cnx {

const char* layer_kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::submanifold: return "submanifold";
        case LayerKind::strided: return "strided";
        case LayerKind::dense_conv: return "dense_conv";
        case LayerKind::pointwise: return "pointwise";
    }
    return "?";
}

std::uint64_t MacLog::total_macs() const {
    std::uint64_t s = 0;
    for (const auto& r : records_) s += r.macs;
    return s;
}

std::uint64_t MacLog::total_dense_macs() const {
    std::uint64_t s = 0;
    for (const auto& r : records_) s += r.dense_macs;
    return s;
}

}  // namespace cnx
