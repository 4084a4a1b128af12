#pragma once

#include <string>

#include "longiseg/network.hpp"

namespace longiseg {

/// Binary weight file: "LSWT" magic, format version, a JSON manifest listing
/// every parameter (name, shape, payload offset, CRC-32), then one contiguous
/// little-endian f32 payload. save followed by load reproduces an f32
/// network bitwise; f64 networks round to f32 on save.
template <typename T>
void save_weights(const Network<T>& net, const std::string& path);

/// Rebuild a network for `config` and fill every parameter from the file.
/// Errors name the first offending parameter: FormatError for a missing or
/// unexpected manifest entry or a checksum mismatch, ShapeError for a shape
/// conflict — so mismatched configs fail loudly instead of half-loading.
template <typename T>
Network<T> load_weights(const std::string& path, const NetworkConfig& config);

}  // namespace longiseg
