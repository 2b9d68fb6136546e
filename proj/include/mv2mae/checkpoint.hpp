#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "mv2mae/tensor.hpp"

namespace mv2mae {

template <class T>
using TensorMap = std::map<std::string, Tensor<T>>;

/// Serializes tensors as: magic "MV2C", version u32, count u32, then per
/// entry a u16-length UTF-8 name, rank u8, u32 dims, dtype u8 (0=f32, 1=f64)
/// and the raw little-endian buffer.
template <class T>
std::vector<unsigned char> checkpoint_bytes(const TensorMap<T>& tensors);

template <class T>
void save_checkpoint(const std::filesystem::path& path, const TensorMap<T>& tensors);

/// Loads every entry, converting stored f32/f64 buffers to T.
template <class T>
TensorMap<T> load_checkpoint(const std::filesystem::path& path);

template <class T>
TensorMap<T> parse_checkpoint(std::vector<unsigned char> bytes, const std::string& name = "<memory>");

}  // namespace mv2mae
