// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "refusion/errors.hpp"
#include "refusion/io/archive.hpp"
#include "refusion/io/config.hpp"
#include "refusion/io/image.hpp"
#include "refusion/io/table.hpp"
#include "refusion/rng.hpp"

namespace fs = std::filesystem;
namespace io = refusion::io;
using refusion::Rng;
using refusion::Tensor;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "refusion_io_tests";
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST(Png, RoundTripMatchesQuantisation) {
  Rng rng(1);
  Tensor img({1, 3, 7, 5});
  for (double& v : img.values()) v = rng.uniform(-0.1, 1.1);
  const auto path = scratch("rt.png");
  io::write_png(path, img);
  const Tensor back = io::read_png(path);
  EXPECT_EQ(back, io::quantize8(img));
  for (double v : back.values()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
    EXPECT_NEAR(v * 255.0, std::round(v * 255.0), 1e-9);
  }
}

TEST(Png, GreyImagesExpandToRgb) {
  Tensor grey({1, 1, 3, 3}, 0.5);
  const auto path = scratch("grey.png");
  io::write_png(path, grey);
  const Tensor back = io::read_png(path);
  EXPECT_EQ(back.shape(), (refusion::Shape{1, 3, 3, 3}));
  for (double v : back.values()) EXPECT_NEAR(v, 128.0 / 255.0, 1e-12);
}

TEST(Png, MissingFileThrowsMissingInput) {
  EXPECT_THROW(io::read_png(scratch("nope.png")), refusion::MissingInput);
}

TEST(Archive, RoundTripsTensorsAndManifest) {
  Rng rng(2);
  io::Archive ar;
  ar.manifest["kind"] = "test";
  ar.manifest["values"] = {1, 2, 3};
  ar.tensors.push_back({"a", refusion::normal_like({2, 3, 4, 5}, rng)});
  ar.tensors.push_back({"b", Tensor({1, 1, 1, 1}, std::numeric_limits<double>::denorm_min())});
  const auto path = scratch("ar.bin");
  io::save_archive(path, ar);
  const io::Archive back = io::load_archive(path);
  EXPECT_EQ(back.manifest, ar.manifest);
  ASSERT_EQ(back.tensors.size(), 2u);
  EXPECT_EQ(back.get("a"), ar.tensors[0].value);
  EXPECT_EQ(back.get("b"), ar.tensors[1].value);
  EXPECT_TRUE(back.contains("a"));
  EXPECT_FALSE(back.contains("c"));
  EXPECT_THROW((void)back.get("c"), refusion::ConfigError);
}

TEST(Archive, RejectsTruncatedAndForeignFiles) {
  io::Archive ar;
  ar.tensors.push_back({"a", Tensor({1, 2, 3, 4}, 1.0)});
  const auto path = scratch("trunc.bin");
  io::save_archive(path, ar);
  fs::resize_file(path, fs::file_size(path) - 9);
  EXPECT_THROW(io::load_archive(path), std::runtime_error);

  const auto foreign = scratch("foreign.bin");
  std::ofstream(foreign) << "definitely not an archive";
  EXPECT_THROW(io::load_archive(foreign), std::runtime_error);
  EXPECT_THROW(io::load_archive(scratch("absent.bin")), refusion::MissingInput);
}

TEST(Archive, DigestTracksContent) {
  const auto p = scratch("digest.txt");
  std::ofstream(p) << "abc";
  const std::string d1 = io::file_digest(p);
  EXPECT_EQ(d1.size(), 16u);
  EXPECT_EQ(io::file_digest(p), d1);
  std::ofstream(p) << "abd";
  EXPECT_NE(io::file_digest(p), d1);
  // FNV-1a 64 of the empty string is the offset basis.
  std::ofstream(p).close();
  EXPECT_EQ(io::file_digest(p), "cbf29ce484222325");
  EXPECT_EQ(io::bytes_digest(""), "cbf29ce484222325");
  // Published FNV-1a 64 test vector for "a".
  EXPECT_EQ(io::bytes_digest("a"), "af63dc4c8601ec8c");
  std::ofstream(p) << "abd";
  EXPECT_EQ(io::bytes_digest("abd"), io::file_digest(p));
}

TEST(Config, ParsesSectionsPrefixesAndComments) {
  const auto cfg = io::Config::parse(
      "top = 1\n"
      "# comment\n"
      "[train]\n"
      "iterations = 5000   # trailing comment\n"
      "lr=2e-4\n"
      "\n"
      "[net]\n"
      "enc_blocks = 1, 1, 2\n"
      "sde.steps = 100\n");
  EXPECT_EQ(cfg.integer("top"), 1);
  EXPECT_EQ(cfg.integer("train.iterations"), 5000);
  EXPECT_DOUBLE_EQ(cfg.real("train.lr"), 2e-4);
  EXPECT_EQ(cfg.int_list("net.enc_blocks"), (std::vector<int>{1, 1, 2}));
  EXPECT_EQ(cfg.integer("sde.steps"), 100);
  EXPECT_EQ(cfg.section("train").size(), 2u);
}

TEST(Config, SyntaxErrorsNameTheLine) {
  try {
    (void)io::Config::parse("a = 1\nnot an assignment\n", "demo.cfg");
    FAIL() << "expected ConfigError";
  } catch (const refusion::ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("demo.cfg:2"), std::string::npos) << e.what();
  }
}

TEST(Config, TypedAccessorsRejectBadValues) {
  const auto cfg = io::Config::parse("a = x\nb = 1.5\nc = maybe\n");
  EXPECT_THROW((void)cfg.integer("a"), refusion::ConfigError);
  EXPECT_THROW((void)cfg.integer("b"), refusion::ConfigError);
  EXPECT_THROW((void)cfg.boolean("c"), refusion::ConfigError);
  EXPECT_THROW((void)cfg.raw("missing"), refusion::ConfigError);
}

TEST(Config, OverridesRejectUnknownKeys) {
  auto cfg = io::Config::parse("[train]\nlr = 1\n");
  cfg.apply_override("train.lr=3");
  EXPECT_EQ(cfg.integer("train.lr"), 3);
  EXPECT_THROW(cfg.apply_override("train.lrr=3"), refusion::ConfigError);
  EXPECT_THROW(cfg.apply_override("novalue"), refusion::ConfigError);
}

TEST(Config, DumpAndJsonRoundTrip) {
  const auto cfg = io::Config::parse("x = 1\n[a]\nb = hello world\nc.d = 2\n[e]\nf = 1,2\n");
  EXPECT_EQ(io::Config::parse(cfg.dump()), cfg);
  EXPECT_EQ(io::Config::from_json(cfg.to_json()), cfg);
}

TEST(Csv, QuotesAndReadsBack) {
  io::CsvTable t({"name", "value"});
  t.add_row({"plain", "1"});
  t.add_row({"has,comma", "has \"quote\""});
  const auto path = scratch("t.csv");
  t.write(path);
  const auto rows = io::read_csv(path);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[2][0], "has,comma");
  EXPECT_EQ(rows[2][1], "has \"quote\"");
  EXPECT_THROW(t.add_row({"only one"}), std::invalid_argument);
}

TEST(Csv, FormatDoubleRoundTrips) {
  for (double v : {0.1, 1.0 / 3.0, -2.5e-300, 12345.678}) {
    EXPECT_EQ(std::stod(io::format_double(v)), v);
  }
  EXPECT_EQ(io::format_double(std::nan("")), "nan");
}

TEST(Plot, WritesCanvasOfRequestedSize) {
  const auto path = scratch("plot.png");
  io::write_line_plot(path, {{"a", {1, 2, 3}, {1, 4, 9}}, {"b", {1, 2, 3}, {2, std::nan(""), 1}}},
                      320, 200);
  const Tensor img = io::read_png(path);
  EXPECT_EQ(img.shape(), (refusion::Shape{1, 3, 200, 320}));
  EXPECT_NE(io::plot_color(0), io::plot_color(1));
}
