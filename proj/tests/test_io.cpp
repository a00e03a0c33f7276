#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "attnreg/io.hpp"
#include "test_util.hpp"

using namespace attnreg;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / "attnreg_test_io";
  fs::create_directories(dir);
  return dir / name;
}

void write_raw(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary);
  out << bytes;
}

}  // namespace

TEST_CASE("TNSR round trips are bit-exact") {
  Rng rng(11);
  Tensor f32 = testutil::random_tensor(rng, {3, 5}, DType::f32, -1e3, 1e3);
  write_tnsr(scratch("a.tnsr"), f32);
  CHECK(read_tnsr(scratch("a.tnsr")).bit_equal(f32));

  Tensor f64 = testutil::random_tensor(rng, {2, 3, 4}, DType::f64);
  write_tnsr(scratch("b.tnsr"), f64);
  Tensor back = read_tnsr(scratch("b.tnsr"));
  CHECK(back.shape() == Shape{2, 3, 4});
  CHECK(back.bit_equal(f64));
  CHECK(read_text(scratch("b.tnsr")) == read_text(scratch("b.tnsr")));
}

TEST_CASE("TNSR header layout") {
  write_tnsr(scratch("h.tnsr"), Tensor::from_vector({2}, std::vector<double>{1.0, -2.0}));
  const std::string bytes = read_text(scratch("h.tnsr"));
  REQUIRE(bytes.size() == 4 + 4 + 1 + 1 + 8 + 16);
  CHECK(bytes.substr(0, 4) == "TNSR");
  CHECK(bytes[4] == 1);
  CHECK(bytes[5] == 0);
  CHECK(bytes[8] == 1);  // f64
  CHECK(bytes[9] == 1);  // ndim
  CHECK(bytes[10] == 2);
  // 1.0 little-endian: 00 .. 00 F0 3F
  CHECK(static_cast<unsigned char>(bytes[18 + 7]) == 0x3F);
  CHECK(static_cast<unsigned char>(bytes[18 + 6]) == 0xF0);
}

TEST_CASE("TNSR rejects bad input") {
  std::string good = read_text(scratch("h.tnsr"));
  std::string bad_magic = good;
  bad_magic[0] = 'X';
  write_raw(scratch("bad1.tnsr"), bad_magic);
  CHECK_THROWS_AS(read_tnsr(scratch("bad1.tnsr")), FormatError);
  std::string bad_version = good;
  bad_version[4] = 2;
  write_raw(scratch("bad2.tnsr"), bad_version);
  CHECK_THROWS_AS(read_tnsr(scratch("bad2.tnsr")), FormatError);
  std::string bad_dtype = good;
  bad_dtype[8] = 7;
  write_raw(scratch("bad3.tnsr"), bad_dtype);
  CHECK_THROWS_AS(read_tnsr(scratch("bad3.tnsr")), FormatError);
  write_raw(scratch("bad4.tnsr"), good.substr(0, good.size() - 3));
  CHECK_THROWS_AS(read_tnsr(scratch("bad4.tnsr")), FormatError);
}

TEST_CASE("PGM round trip is within one quantization level") {
  Rng rng(12);
  Tensor img = testutil::random_tensor(rng, {7, 9}, DType::f32, 0.0, 1.0);
  write_pgm(scratch("r.pgm"), img);
  Tensor back = read_pgm(scratch("r.pgm"));
  REQUIRE(back.shape() == Shape{7, 9});
  for (std::size_t i = 0; i < img.numel(); ++i) CHECK(std::abs(back.at(i) - img.at(i)) <= 1.0 / 255.0);
  // Quantized data round-trips exactly.
  write_pgm(scratch("r2.pgm"), back);
  CHECK(read_pgm(scratch("r2.pgm")).bit_equal(back));
}

TEST_CASE("PGM known bytes") {
  write_raw(scratch("k.pgm"), std::string("P5\n# comment\n2 2\n255\n") + std::string("\x00\x33\xcc\xff", 4));
  Tensor img = read_pgm(scratch("k.pgm"));
  CHECK(img.shape() == Shape{2, 2});
  CHECK(img.at(0) == 0.0);
  CHECK(img.at(1) == doctest::Approx(51.0 / 255.0));
  CHECK(img.at(2) == doctest::Approx(204.0 / 255.0));
  CHECK(img.at(3) == 1.0);
}

TEST_CASE("PGM rejects malformed files") {
  write_raw(scratch("m1.pgm"), std::string("P5\n2 2\n65535\n") + std::string(8, '\0'));
  CHECK_THROWS_AS(read_pgm(scratch("m1.pgm")), FormatError);
  write_raw(scratch("m2.pgm"), std::string("P5\n2 2\n255\n") + std::string(3, '\0'));
  CHECK_THROWS_AS(read_pgm(scratch("m2.pgm")), FormatError);
  write_raw(scratch("m3.pgm"), "P2\n2 2\n255\n0 0 0 0\n");
  CHECK_THROWS_AS(read_pgm(scratch("m3.pgm")), FormatError);
  CHECK_THROWS(read_pgm(scratch("does_not_exist.pgm")));
}
