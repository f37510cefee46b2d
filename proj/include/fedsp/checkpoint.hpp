#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedsp/tensor.hpp"

// FSPT tensor container, all integers little-endian:
//
//   "FSPT"            4 bytes magic
//   version           u32 (currently 1)
//   count             u64 number of tensors
//   count times:
//     name_len        u32
//     name            name_len bytes, UTF-8
//     rank            u32
//     dims            rank x u64
//     payload         prod(dims) x f64 (IEEE-754 bit pattern)
namespace fedsp {

inline constexpr std::uint32_t kTensorFormatVersion = 1;

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

std::vector<std::uint8_t> encode_tensors(std::span<const NamedTensor> tensors);
std::vector<NamedTensor> decode_tensors(std::span<const std::uint8_t> bytes);

/// Exact length of `encode_tensors(tensors)` without building the buffer.
std::size_t encoded_size(std::span<const NamedTensor> tensors);

void save_tensors(const std::filesystem::path& path, std::span<const NamedTensor> tensors);
std::vector<NamedTensor> load_tensors(const std::filesystem::path& path);

/// Little-endian primitives shared with the round-message envelope.
namespace wire {
void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v);
void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v);
void put_f64(std::vector<std::uint8_t>& out, double v);

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}
  std::uint8_t u8();
  std::uint32_t u32();
  std::uint64_t u64();
  double f64();
  std::span<const std::uint8_t> take(std::size_t n);
  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }
  std::size_t position() const noexcept { return pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};
}  // namespace wire

}  // namespace fedsp
