#include "attnreg/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

namespace attnreg {
namespace {

constexpr char kMagic[4] = {'T', 'N', 'S', 'R'};
constexpr std::uint32_t kVersion = 1;

template <class U>
void put_le(std::string& out, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i)
    out.push_back(static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xFF));
}

template <class U>
U get_le(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(U) > in.size()) throw FormatError("TNSR: truncated header");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i)
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += sizeof(U);
  return static_cast<U>(v);
}

template <class T>
void put_payload(std::string& out, std::span<const T> values) {
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  for (T v : values) put_le<Bits>(out, std::bit_cast<Bits>(v));
}

template <class T>
std::vector<T> get_payload(const std::string& in, std::size_t pos, std::size_t count) {
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  if (in.size() - pos != count * sizeof(T))
    throw FormatError("TNSR: payload size " + std::to_string(in.size() - pos) +
                      " does not match header (" + std::to_string(count * sizeof(T)) + ")");
  std::vector<T> values(count);
  for (auto& v : values) v = std::bit_cast<T>(get_le<Bits>(in, pos));
  return values;
}

std::string read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

// Next whitespace-delimited PGM header token, skipping '#' comments.
std::string pgm_token(const std::string& in, std::size_t& pos) {
  while (pos < in.size()) {
    const char c = in[pos];
    if (c == '#') {
      while (pos < in.size() && in[pos] != '\n') ++pos;
    } else if (std::isspace(static_cast<unsigned char>(c))) {
      ++pos;
    } else {
      break;
    }
  }
  const auto start = pos;
  while (pos < in.size() && !std::isspace(static_cast<unsigned char>(in[pos])) && in[pos] != '#')
    ++pos;
  if (start == pos) throw FormatError("PGM: truncated header");
  return in.substr(start, pos - start);
}

std::size_t parse_header_int(const std::string& tok) {
  if (tok.empty() || !std::all_of(tok.begin(), tok.end(), [](char c) { return c >= '0' && c <= '9'; }))
    throw FormatError("PGM: bad header field '" + tok + "'");
  return std::stoul(tok);
}

}  // namespace

void write_tnsr(const std::filesystem::path& path, const Tensor& tensor) {
  if (tensor.ndim() > 255) throw FormatError("TNSR: too many dimensions");
  std::string out(kMagic, 4);
  put_le<std::uint32_t>(out, kVersion);
  put_le<std::uint8_t>(out, static_cast<std::uint8_t>(tensor.dtype()));
  put_le<std::uint8_t>(out, static_cast<std::uint8_t>(tensor.ndim()));
  for (auto e : tensor.shape()) put_le<std::uint64_t>(out, e);
  dispatch(tensor.dtype(), [&](auto tag) {
    using T = decltype(tag);
    put_payload<T>(out, tensor.data<T>());
  });
  write_bytes(path, out);
}

Tensor read_tnsr(const std::filesystem::path& path) {
  const std::string in = read_bytes(path);
  if (in.size() < 4 || std::memcmp(in.data(), kMagic, 4) != 0)
    throw FormatError("TNSR: bad magic in " + path.string());
  std::size_t pos = 4;
  const auto version = get_le<std::uint32_t>(in, pos);
  if (version != kVersion) throw FormatError("TNSR: unsupported version " + std::to_string(version));
  const auto code = get_le<std::uint8_t>(in, pos);
  if (code > 1) throw FormatError("TNSR: unknown dtype code " + std::to_string(code));
  const auto ndim = get_le<std::uint8_t>(in, pos);
  Shape shape(ndim);
  for (auto& e : shape) e = static_cast<std::size_t>(get_le<std::uint64_t>(in, pos));
  const auto count = shape_numel(shape);
  if (code == 0) return Tensor::from_vector(shape, get_payload<float>(in, pos, count));
  return Tensor::from_vector(shape, get_payload<double>(in, pos, count));
}

void write_pgm(const std::filesystem::path& path, const Tensor& image) {
  if (image.ndim() != 2) throw DimensionError("write_pgm: expected [H,W], got " + shape_str(image.shape()));
  const auto h = image.dim(0), w = image.dim(1);
  std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  out.reserve(out.size() + h * w);
  for (double v : image.to_doubles()) {
    const double c = std::clamp(v, 0.0, 1.0);
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(c * 255.0))));
  }
  write_bytes(path, out);
}

Tensor read_pgm(const std::filesystem::path& path) {
  const std::string in = read_bytes(path);
  std::size_t pos = 0;
  if (pgm_token(in, pos) != "P5") throw FormatError("PGM: not a binary P5 file: " + path.string());
  const auto w = parse_header_int(pgm_token(in, pos));
  const auto h = parse_header_int(pgm_token(in, pos));
  const auto maxval = parse_header_int(pgm_token(in, pos));
  if (maxval != 255) throw FormatError("PGM: maxval " + std::to_string(maxval) + " unsupported (need 255)");
  if (pos >= in.size() || !std::isspace(static_cast<unsigned char>(in[pos])))
    throw FormatError("PGM: missing separator before payload");
  ++pos;
  if (in.size() - pos < w * h) throw FormatError("PGM: truncated payload in " + path.string());
  std::vector<float> values(w * h);
  for (std::size_t i = 0; i < w * h; ++i)
    values[i] = static_cast<float>(static_cast<unsigned char>(in[pos + i])) / 255.0f;
  return Tensor::from_vector({h, w}, std::move(values));
}

void write_text(const std::filesystem::path& path, const std::string& text) { write_bytes(path, text); }

std::string read_text(const std::filesystem::path& path) { return read_bytes(path); }

}  // namespace attnreg
