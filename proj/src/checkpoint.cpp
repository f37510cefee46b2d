#include "fedsp/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <fstream>
#include <iterator>

namespace fedsp {

namespace wire {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f64(std::vector<std::uint8_t>& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

std::span<const std::uint8_t> Reader::take(std::size_t n) {
  if (n > remaining()) {
    throw FormatError("truncated input: need " + std::to_string(n) + " bytes at offset " + std::to_string(pos_) +
                      ", have " + std::to_string(remaining()));
  }
  auto s = bytes_.subspan(pos_, n);
  pos_ += n;
  return s;
}

std::uint8_t Reader::u8() { return take(1)[0]; }

std::uint32_t Reader::u32() {
  auto s = take(4);
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | s[static_cast<std::size_t>(i)];
  return v;
}

std::uint64_t Reader::u64() {
  auto s = take(8);
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | s[static_cast<std::size_t>(i)];
  return v;
}

double Reader::f64() { return std::bit_cast<double>(u64()); }

}  // namespace wire

namespace {
constexpr char kMagic[4] = {'F', 'S', 'P', 'T'};
}

std::size_t encoded_size(std::span<const NamedTensor> tensors) {
  std::size_t n = 4 + 4 + 8;
  for (const auto& t : tensors) n += 4 + t.name.size() + 4 + 8 * t.tensor.rank() + 8 * t.tensor.numel();
  return n;
}

std::vector<std::uint8_t> encode_tensors(std::span<const NamedTensor> tensors) {
  std::vector<std::uint8_t> out;
  out.reserve(encoded_size(tensors));
  out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
  wire::put_u32(out, kTensorFormatVersion);
  wire::put_u64(out, tensors.size());
  for (const auto& nt : tensors) {
    wire::put_u32(out, static_cast<std::uint32_t>(nt.name.size()));
    out.insert(out.end(), nt.name.begin(), nt.name.end());
    wire::put_u32(out, static_cast<std::uint32_t>(nt.tensor.rank()));
    for (auto d : nt.tensor.shape()) wire::put_u64(out, d);
    for (double v : nt.tensor.data()) wire::put_f64(out, v);
  }
  return out;
}

std::vector<NamedTensor> decode_tensors(std::span<const std::uint8_t> bytes) {
  wire::Reader in(bytes);
  auto magic = in.take(4);
  if (!std::equal(magic.begin(), magic.end(), std::begin(kMagic))) throw FormatError("bad magic, expected FSPT");
  const auto version = in.u32();
  if (version != kTensorFormatVersion) throw FormatError("unsupported FSPT version " + std::to_string(version));
  const auto count = in.u64();
  std::vector<NamedTensor> out;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = in.u32();
    auto name_bytes = in.take(name_len);
    std::string name(name_bytes.begin(), name_bytes.end());
    const auto rank = in.u32();
    Shape shape(rank);
    std::size_t n = 1;
    for (auto& d : shape) {
      d = in.u64();
      n *= d;
    }
    if (n > in.remaining() / 8) throw FormatError("tensor '" + name + "' payload exceeds input");
    std::vector<double> values(n);
    for (auto& v : values) v = in.f64();
    out.push_back({std::move(name), Tensor::from(std::move(shape), std::move(values))});
    out.back().tensor.set_name(out.back().name);
  }
  if (in.remaining() != 0) throw FormatError(std::to_string(in.remaining()) + " trailing bytes after FSPT payload");
  return out;
}

void save_tensors(const std::filesystem::path& path, std::span<const NamedTensor> tensors) {
  auto bytes = encode_tensors(tensors);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

std::vector<NamedTensor> load_tensors(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_tensors(bytes);
}

}  // namespace fedsp
