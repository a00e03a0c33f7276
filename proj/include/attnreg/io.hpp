#pragma once

#include <filesystem>
#include <stdexcept>

#include "attnreg/tensor.hpp"

namespace attnreg {

// Malformed or unsupported file content.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// TNSR: "TNSR", u32 version (1), u8 dtype code (0=f32, 1=f64), u8 ndim,
// ndim x u64 extents, row-major little-endian payload.
void write_tnsr(const std::filesystem::path& path, const Tensor& tensor);
Tensor read_tnsr(const std::filesystem::path& path);

// 8-bit binary PGM (P5, maxval 255). Images are [H,W] in [0,1]; values are
// clamped and rounded to the nearest level on write.
void write_pgm(const std::filesystem::path& path, const Tensor& image);
Tensor read_pgm(const std::filesystem::path& path);

// Writes `text` verbatim, creating parent directories.
void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace attnreg
