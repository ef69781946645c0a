#pragma once

// Array binary layout used by checkpoints and fixtures:
//   uint32 rank | uint32 extent[rank] | float32 data[product(extents)]
// all little-endian. Host is assumed little-endian (checked at startup of
// anything that writes files).

#include <cstdint>
#include <istream>
#include <ostream>
#include <string>

#include "loopvlm/errors.hpp"
#include "loopvlm/tensor.hpp"

namespace loopvlm {

inline bool host_little_endian() {
    const uint32_t probe = 1;
    return *reinterpret_cast<const uint8_t*>(&probe) == 1;
}

inline void write_u32(std::ostream& os, uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), 4);
}

inline uint32_t read_u32(std::istream& is) {
    uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 4);
    if (!is) throw DataError("array read: truncated header");
    return v;
}

inline void write_array(std::ostream& os, const Tensor<float>& t) {
    write_u32(os, static_cast<uint32_t>(t.shape().size()));
    for (int e : t.shape()) write_u32(os, static_cast<uint32_t>(e));
    os.write(reinterpret_cast<const char*>(t.values().data()),
             static_cast<std::streamsize>(t.values().size() * sizeof(float)));
}

inline Tensor<float> read_array(std::istream& is) {
    uint32_t rank = read_u32(is);
    if (rank > 8) throw DataError("array read: implausible rank " + std::to_string(rank));
    Shape shape(rank);
    for (uint32_t i = 0; i < rank; ++i) shape[i] = static_cast<int>(read_u32(is));
    int64_t n = shape_numel(shape);
    std::vector<float> data(static_cast<size_t>(n));
    is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n * sizeof(float)));
    if (!is) throw DataError("array read: truncated payload");
    return Tensor<float>(std::move(shape), std::move(data));
}

inline void write_string(std::ostream& os, const std::string& s) {
    write_u32(os, static_cast<uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is) {
    uint32_t n = read_u32(is);
    if (n > (1u << 20)) throw DataError("string read: implausible length");
    std::string s(n, '\0');
    is.read(s.data(), n);
    if (!is) throw DataError("string read: truncated");
    return s;
}

}  // namespace loopvlm
