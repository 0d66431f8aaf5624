#include "tsi/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace tsi {

namespace {

constexpr char kMagic[4] = {'T', 'S', 'I', 'T'};

template <typename U>
void put_le(std::ostream& os, U value) {
  static_assert(std::is_unsigned_v<U>);
  char buf[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<char>((value >> (8 * i)) & 0xFF);
  os.write(buf, sizeof(U));
}

template <typename U>
U get_le(std::istream& is) {
  unsigned char buf[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(buf), sizeof(U))) throw IoError("truncated tensor header");
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(buf[i]) << (8 * i);
  return value;
}

template <typename T>
using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;

template <typename T>
void write_payload(std::ostream& os, const Tensor<T>& t) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(t.raw()), static_cast<std::streamsize>(t.numel() * sizeof(T)));
  } else {
    for (T v : t.data()) put_le(os, std::bit_cast<Bits<T>>(v));
  }
}

template <typename T>
Tensor<T> read_body(std::istream& is, Shape shape) {
  Tensor<T> t(std::move(shape));
  if constexpr (std::endian::native == std::endian::little) {
    if (!is.read(reinterpret_cast<char*>(t.raw()), static_cast<std::streamsize>(t.numel() * sizeof(T)))) {
      throw IoError("truncated tensor payload");
    }
  } else {
    for (auto& v : t.data()) v = std::bit_cast<T>(get_le<Bits<T>>(is));
  }
  return t;
}

}  // namespace

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  os.write(kMagic, 4);
  put_le<std::uint32_t>(os, kTensorFormatVersion);
  put_le<std::uint8_t>(os, static_cast<std::uint8_t>(dtype_of<T>()));
  if (t.ndim() > 255) throw ShapeError("tensor rank exceeds 255");
  put_le<std::uint8_t>(os, static_cast<std::uint8_t>(t.ndim()));
  for (auto d : t.shape()) put_le<std::uint64_t>(os, static_cast<std::uint64_t>(d));
  write_payload(os, t);
  if (!os) throw IoError("tensor write failed");
}

AnyTensor read_any_tensor(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw IoError("bad tensor magic");
  const auto version = get_le<std::uint32_t>(is);
  if (version != kTensorFormatVersion) throw IoError("unsupported tensor format version " + std::to_string(version));
  const auto dtype = get_le<std::uint8_t>(is);
  const auto ndim = get_le<std::uint8_t>(is);
  Shape shape(ndim);
  for (auto& d : shape) d = static_cast<std::int64_t>(get_le<std::uint64_t>(is));
  switch (dtype) {
    case static_cast<std::uint8_t>(DType::kFloat32):
      return read_body<float>(is, std::move(shape));
    case static_cast<std::uint8_t>(DType::kFloat64):
      return read_body<double>(is, std::move(shape));
    default:
      throw IoError("unknown tensor dtype code " + std::to_string(dtype));
  }
}

template <typename T>
Tensor<T> read_tensor(std::istream& is) {
  auto any = read_any_tensor(is);
  if (auto* t = std::get_if<Tensor<T>>(&any)) return std::move(*t);
  throw IoError("tensor dtype does not match requested type");
}

template <typename T>
Tensor<T> read_tensor_as(std::istream& is) {
  return std::visit([](auto&& t) { return t.template cast<T>(); }, read_any_tensor(is));
}

template <typename T>
void save_tensor(const std::filesystem::path& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_tensor(os, t);
}

template <typename T>
Tensor<T> load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  try {
    return read_tensor<T>(is);
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

template <typename T>
Tensor<T> load_tensor_as(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  try {
    return read_tensor_as<T>(is);
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

template <typename T>
std::string tensor_bytes(const Tensor<T>& t) {
  std::ostringstream os(std::ios::binary);
  write_tensor(os, t);
  return std::move(os).str();
}

std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

#define TSI_INSTANTIATE_IO(T)                                                   \
  template void write_tensor<T>(std::ostream&, const Tensor<T>&);              \
  template Tensor<T> read_tensor<T>(std::istream&);                            \
  template Tensor<T> read_tensor_as<T>(std::istream&);                         \
  template void save_tensor<T>(const std::filesystem::path&, const Tensor<T>&); \
  template Tensor<T> load_tensor<T>(const std::filesystem::path&);             \
  template Tensor<T> load_tensor_as<T>(const std::filesystem::path&);          \
  template std::string tensor_bytes<T>(const Tensor<T>&);

TSI_INSTANTIATE_IO(float)
TSI_INSTANTIATE_IO(double)

}  // namespace tsi
