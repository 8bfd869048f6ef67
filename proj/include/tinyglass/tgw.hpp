// SPDX-License-Identifier: Apache-2.0
//
// TGW: little-endian named-tensor container.
//
//   magic "TGW1" | u32 count | count x {
//     u16 name_len | name (UTF-8) | u8 dtype | u8 ndim | ndim x u32 dim | payload }
//
// Payload length is product(dims) * sizeof(dtype). The same container is used
// for backbone weights, reference activations, training checkpoints and
// quantized models.
#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tinyglass/error.hpp"
#include "tinyglass/tensor.hpp"

namespace tinyglass {

enum class DType : std::uint8_t { f32 = 0, i8 = 1, i32 = 2, u32 = 3, u8 = 4 };

constexpr std::size_t dtype_size(DType t) {
  switch (t) {
    case DType::i8:
    case DType::u8:
      return 1;
    case DType::f32:
    case DType::i32:
    case DType::u32:
      return 4;
  }
  return 0;
}

enum class TgwErrc {
  bad_magic,
  truncated,
  bad_dtype,
  duplicate_tensor,
  missing_tensor,
  unexpected_tensor,
  shape_mismatch,
  dtype_mismatch,
  io,
};

class TgwError : public Error {
 public:
  TgwError(TgwErrc code, const std::string& what) : Error(what), code_(code) {}
  TgwErrc code() const { return code_; }

 private:
  TgwErrc code_;
};

struct TgwTensor {
  std::string name;
  DType dtype = DType::f32;
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> payload;

  std::size_t element_count() const {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }

  std::vector<double> to_f64() const {
    require_dtype(DType::f32);
    std::vector<double> out(element_count());
    for (std::size_t i = 0; i < out.size(); ++i) {
      std::uint32_t bits = 0;
      for (int b = 3; b >= 0; --b) bits = (bits << 8) | payload[i * 4 + static_cast<std::size_t>(b)];
      out[i] = static_cast<double>(std::bit_cast<float>(bits));
    }
    return out;
  }

  std::vector<std::int8_t> to_i8() const {
    require_dtype(DType::i8);
    std::vector<std::int8_t> out(payload.size());
    std::memcpy(out.data(), payload.data(), payload.size());
    return out;
  }

  std::vector<std::int32_t> to_i32() const {
    require_dtype(DType::i32);
    return read_words<std::int32_t>();
  }

  std::vector<std::uint32_t> to_u32() const {
    require_dtype(DType::u32);
    return read_words<std::uint32_t>();
  }

  std::string to_text() const {
    require_dtype(DType::u8);
    return std::string(payload.begin(), payload.end());
  }

  Tensor4 to_tensor4() const {
    detail::require(dims.size() <= 4, "tensor '" + name + "' has rank > 4");
    std::array<std::size_t, 4> d{1, 1, 1, 1};
    const std::size_t off = 4 - dims.size();
    for (std::size_t i = 0; i < dims.size(); ++i) d[off + i] = dims[i];
    return Tensor4(Shape4{d[0], d[1], d[2], d[3]}, to_f64());
  }

  void require_dtype(DType t) const {
    if (dtype != t) {
      throw TgwError(TgwErrc::dtype_mismatch, "tensor '" + name + "' has dtype code " +
                                                  std::to_string(static_cast<int>(dtype)) + ", expected " +
                                                  std::to_string(static_cast<int>(t)));
    }
  }

 private:
  template <typename W>
  std::vector<W> read_words() const {
    std::vector<W> out(element_count());
    for (std::size_t i = 0; i < out.size(); ++i) {
      std::uint32_t bits = 0;
      for (int b = 3; b >= 0; --b) bits = (bits << 8) | payload[i * 4 + static_cast<std::size_t>(b)];
      out[i] = static_cast<W>(bits);
    }
    return out;
  }
};

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

}  // namespace detail

class TgwFile {
 public:
  const std::vector<TgwTensor>& tensors() const { return tensors_; }
  std::size_t size() const { return tensors_.size(); }

  const TgwTensor* find(std::string_view name) const {
    auto it = std::find_if(tensors_.begin(), tensors_.end(), [&](const TgwTensor& t) { return t.name == name; });
    return it == tensors_.end() ? nullptr : &*it;
  }

  const TgwTensor& get(std::string_view name) const {
    const TgwTensor* t = find(name);
    if (!t) throw TgwError(TgwErrc::missing_tensor, "missing tensor '" + std::string(name) + "'");
    return *t;
  }

  void add(TgwTensor t) {
    if (find(t.name)) throw TgwError(TgwErrc::duplicate_tensor, "duplicate tensor '" + t.name + "'");
    detail::require(t.name.size() <= 0xFFFF, "tensor name too long");
    detail::require(t.dims.size() <= 0xFF, "tensor rank too large");
    detail::require(t.payload.size() == t.element_count() * dtype_size(t.dtype),
                    "payload size mismatch for tensor '" + t.name + "'");
    tensors_.push_back(std::move(t));
  }

  void add_f32(std::string name, std::vector<std::uint32_t> dims, std::span<const double> values) {
    TgwTensor t{std::move(name), DType::f32, std::move(dims), {}};
    t.payload.reserve(values.size() * 4);
    for (double v : values) detail::put_u32(t.payload, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    add(std::move(t));
  }

  void add_f32(std::string name, const Tensor4& t) {
    add_f32(std::move(name),
            {static_cast<std::uint32_t>(t.n()), static_cast<std::uint32_t>(t.c()), static_cast<std::uint32_t>(t.h()),
             static_cast<std::uint32_t>(t.w())},
            t.data());
  }

  void add_i8(std::string name, std::vector<std::uint32_t> dims, std::span<const std::int8_t> values) {
    TgwTensor t{std::move(name), DType::i8, std::move(dims), {}};
    t.payload.resize(values.size());
    std::memcpy(t.payload.data(), values.data(), values.size());
    add(std::move(t));
  }

  void add_i32(std::string name, std::vector<std::uint32_t> dims, std::span<const std::int32_t> values) {
    TgwTensor t{std::move(name), DType::i32, std::move(dims), {}};
    for (auto v : values) detail::put_u32(t.payload, static_cast<std::uint32_t>(v));
    add(std::move(t));
  }

  void add_u32(std::string name, std::span<const std::uint32_t> values) {
    TgwTensor t{std::move(name), DType::u32, {static_cast<std::uint32_t>(values.size())}, {}};
    for (auto v : values) detail::put_u32(t.payload, v);
    add(std::move(t));
  }

  void add_text(std::string name, std::string_view text) {
    TgwTensor t{std::move(name), DType::u8, {static_cast<std::uint32_t>(text.size())}, {}};
    t.payload.assign(text.begin(), text.end());
    add(std::move(t));
  }

  std::vector<std::uint8_t> serialize() const {
    std::vector<std::uint8_t> out{'T', 'G', 'W', '1'};
    detail::put_u32(out, static_cast<std::uint32_t>(tensors_.size()));
    for (const auto& t : tensors_) {
      out.push_back(static_cast<std::uint8_t>(t.name.size() & 0xFF));
      out.push_back(static_cast<std::uint8_t>(t.name.size() >> 8));
      out.insert(out.end(), t.name.begin(), t.name.end());
      out.push_back(static_cast<std::uint8_t>(t.dtype));
      out.push_back(static_cast<std::uint8_t>(t.dims.size()));
      for (auto d : t.dims) detail::put_u32(out, d);
      out.insert(out.end(), t.payload.begin(), t.payload.end());
    }
    return out;
  }

  static TgwFile parse(std::span<const std::uint8_t> bytes) {
    std::size_t pos = 0;
    auto need = [&](std::size_t n, const char* what) {
      if (bytes.size() - pos < n) {
        throw TgwError(TgwErrc::truncated, std::string("truncated TGW file while reading ") + what);
      }
    };
    auto u8 = [&](const char* what) {
      need(1, what);
      return bytes[pos++];
    };
    auto u16 = [&](const char* what) {
      need(2, what);
      const auto v = static_cast<std::uint16_t>(bytes[pos] | (bytes[pos + 1] << 8));
      pos += 2;
      return v;
    };
    auto u32 = [&](const char* what) {
      need(4, what);
      std::uint32_t v = 0;
      for (int i = 3; i >= 0; --i) v = (v << 8) | bytes[pos + static_cast<std::size_t>(i)];
      pos += 4;
      return v;
    };

    if (bytes.size() < 4 || !std::equal(bytes.begin(), bytes.begin() + 4, "TGW1")) {
      throw TgwError(TgwErrc::bad_magic, "bad magic: not a TGW1 container");
    }
    pos = 4;
    TgwFile file;
    const std::uint32_t count = u32("tensor count");
    for (std::uint32_t i = 0; i < count; ++i) {
      TgwTensor t;
      const std::uint16_t len = u16("name length");
      need(len, "name");
      t.name.assign(reinterpret_cast<const char*>(bytes.data() + pos), len);
      pos += len;
      const std::uint8_t code = u8("dtype");
      if (code > static_cast<std::uint8_t>(DType::u8)) {
        throw TgwError(TgwErrc::bad_dtype, "tensor '" + t.name + "' has unknown dtype code " + std::to_string(code));
      }
      t.dtype = static_cast<DType>(code);
      const std::uint8_t ndim = u8("ndim");
      for (std::uint8_t d = 0; d < ndim; ++d) t.dims.push_back(u32("dims"));
      const std::size_t bytes_needed = t.element_count() * dtype_size(t.dtype);
      need(bytes_needed, "payload");
      t.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                       bytes.begin() + static_cast<std::ptrdiff_t>(pos + bytes_needed));
      pos += bytes_needed;
      file.add(std::move(t));
    }
    return file;
  }

  static TgwFile read(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw TgwError(TgwErrc::io, "cannot open TGW file " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse(bytes);
  }

  void write(const std::filesystem::path& path) const {
    const auto bytes = serialize();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw TgwError(TgwErrc::io, "cannot write TGW file " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw TgwError(TgwErrc::io, "short write to " + path.string());
  }

 private:
  std::vector<TgwTensor> tensors_;
};

}  // namespace tinyglass
