// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "tinyglass/tgw.hpp"

using namespace tinyglass;

namespace {

TgwErrc parse_code(const std::vector<std::uint8_t>& bytes) {
  try {
    TgwFile::parse(bytes);
  } catch (const TgwError& e) {
    return e.code();
  }
  ADD_FAILURE() << "parse succeeded";
  return TgwErrc::io;
}

}  // namespace

TEST(Tgw, RoundTripAllDtypes) {
  TgwFile f;
  const std::vector<double> fv{1.5, -2.25, 3.0};
  const std::vector<std::int8_t> iv{-128, 0, 127};
  const std::vector<std::int32_t> i32{-7, 1 << 30};
  const std::vector<std::uint32_t> u32{0, 0xFFFFFFFFu};
  f.add_f32("a", {3}, fv);
  f.add_i8("b", {1, 3}, iv);
  f.add_i32("c", {2}, i32);
  f.add_u32("d", u32);
  f.add_text("e", "hello=1\n");
  const auto bytes = f.serialize();
  const TgwFile g = TgwFile::parse(bytes);
  EXPECT_EQ(g.get("a").to_f64(), fv);
  EXPECT_EQ(g.get("b").to_i8(), iv);
  EXPECT_EQ(g.get("c").to_i32(), i32);
  EXPECT_EQ(g.get("d").to_u32(), u32);
  EXPECT_EQ(g.get("e").to_text(), "hello=1\n");
  EXPECT_EQ(g.serialize(), bytes);
}

TEST(Tgw, LittleEndianLayout) {
  TgwFile f;
  const std::vector<std::uint32_t> v{0x01020304u};
  f.add_u32("x", v);
  const auto b = f.serialize();
  // magic, count=1, name_len=1, 'x', dtype, ndim, dim0=1, payload
  const std::vector<std::uint8_t> want{'T', 'G', 'W', '1', 1, 0, 0, 0, 1, 0, 'x', 3, 1, 1, 0, 0, 0, 4, 3, 2, 1};
  EXPECT_EQ(b, want);
}

TEST(Tgw, ErrorsAreDistinct) {
  EXPECT_EQ(parse_code({}), TgwErrc::bad_magic);
  EXPECT_EQ(parse_code({'T', 'G', 'W', '2', 0, 0, 0, 0}), TgwErrc::bad_magic);
  EXPECT_EQ(parse_code({'T', 'G', 'W', '1', 1, 0}), TgwErrc::truncated);

  TgwFile f;
  const std::vector<double> v{1, 2};
  f.add_f32("w", {2}, v);
  auto bytes = f.serialize();
  auto cut = bytes;
  cut.pop_back();
  EXPECT_EQ(parse_code(cut), TgwErrc::truncated);
  auto bad = bytes;
  bad[4 + 4 + 2 + 1] = 9;  // dtype byte
  EXPECT_EQ(parse_code(bad), TgwErrc::bad_dtype);

  TgwFile dup;
  dup.add_f32("w", {2}, v);
  EXPECT_THROW(dup.add_f32("w", {2}, v), TgwError);
  EXPECT_THROW(f.get("nope"), TgwError);
  EXPECT_THROW(f.get("w").to_i8(), TgwError);
}

TEST(Tgw, F32StorageRoundsToFloat) {
  TgwFile f;
  const std::vector<double> v{0.1};
  f.add_f32("x", {1}, v);
  EXPECT_EQ(f.get("x").to_f64()[0], static_cast<double>(0.1f));
}
