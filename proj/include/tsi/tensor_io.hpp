#pragma once

// Binary tensor format (little-endian):
//   "TSIT" | u32 version=1 | u8 dtype (0=f32, 1=f64) | u8 ndim | ndim x u64 dims | payload

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <variant>

#include "tsi/tensor.hpp"

namespace tsi {

inline constexpr std::uint32_t kTensorFormatVersion = 1;

enum class DType : std::uint8_t { kFloat32 = 0, kFloat64 = 1 };

template <typename T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() { return DType::kFloat32; }
template <>
constexpr DType dtype_of<double>() { return DType::kFloat64; }

using AnyTensor = std::variant<Tensor<float>, Tensor<double>>;

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t);

AnyTensor read_any_tensor(std::istream& is);

/// Reads a tensor and requires its stored dtype to be T.
template <typename T>
Tensor<T> read_tensor(std::istream& is);

/// Reads a tensor of either dtype and converts it to T.
template <typename T>
Tensor<T> read_tensor_as(std::istream& is);

template <typename T>
void save_tensor(const std::filesystem::path& path, const Tensor<T>& t);

template <typename T>
Tensor<T> load_tensor(const std::filesystem::path& path);

template <typename T>
Tensor<T> load_tensor_as(const std::filesystem::path& path);

/// Serialized bytes of `t`, as written by write_tensor.
template <typename T>
std::string tensor_bytes(const Tensor<T>& t);

/// 64-bit FNV-1a digest rendered as 16 hex digits.
std::string fnv1a_hex(std::string_view bytes);

}  // namespace tsi
