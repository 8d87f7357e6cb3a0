// SPDX-License-Identifier: Apache-2.0
#pragma once

// Synthetic paired-data generation: parametric degradations of clean images,
// random patch cropping, and dihedral augmentation.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "refusion/rng.hpp"
#include "refusion/tensor.hpp"

namespace refusion::degrade {

enum class Kind { blur_noise, haze, shadow, downsample, bokeh_blur };

std::string_view to_string(Kind k);
Kind parse_kind(std::string_view s);

/// Parameters per kind (all in [0,1] intensity units or pixels):
///   blur_noise: sigma (gaussian blur std, px), noise (additive gaussian std)
///   haze:       t_min, t_max (transmission range), airlight, smooth (field
///               correlation length as a fraction of the short side)
///   shadow:     opacity, gain_min, gain_max (per-channel light kept inside
///               the shadow), softness (mask blur std, px), vertices
///   downsample: scale (1, 2 or 4; area-average down, bicubic back up)
///   bokeh_blur: radius (disk blur, px), focus (radius of the sharp region as
///               a fraction of the short side)
/// Each kind has an identity setting (sigma=noise=0; t_min=t_max=1;
/// opacity=0; scale=1; radius=0) under which apply() returns the input.
struct DegradationSpec {
  Kind kind = Kind::blur_noise;
  std::map<std::string, double> params;
  std::uint64_t seed = 0;

  [[nodiscard]] double get(const std::string& key) const;
  [[nodiscard]] nlohmann::json to_json() const;
  static DegradationSpec from_json(const nlohmann::json& j);
};

/// Fills defaults for unspecified parameters and validates ranges.
/// Throws std::invalid_argument naming the offending parameter.
DegradationSpec make_spec(Kind kind, const std::map<std::string, double>& params = {},
                          std::uint64_t seed = 0);
void validate(const DegradationSpec& spec);

/// Degrades every sample; sample n draws from Rng::stream(spec.seed, n).
Tensor apply(const Tensor& hq, const DegradationSpec& spec);
/// Degrades a single-sample image with an explicit random source.
Tensor apply_one(const Tensor& hq, const DegradationSpec& spec, Rng& rng);

// ---- building blocks (exposed for tests) ----

/// Separable gaussian blur with reflected borders; sigma <= 0 copies.
Tensor gaussian_blur(const Tensor& img, double sigma);
/// Uniform disk blur of the given radius with reflected borders.
Tensor disk_blur(const Tensor& img, double radius);
/// Bicubic (a = -0.5) resampling to (h, w) with pixel-centre alignment.
Tensor resize_bicubic(const Tensor& img, int h, int w);
/// Mean over non-overlapping factor x factor blocks.
Tensor area_downsample(const Tensor& img, int factor);

// ---- augmentation ----

/// Element k of the dihedral group of order 8: k % 4 counter-clockwise
/// quarter turns, followed by a horizontal flip when k >= 4.
Tensor dihedral(const Tensor& img, int k);
int dihedral_inverse(int k);

// ---- paired patches ----

struct PairRecord {
  std::string source;
  int y = 0;
  int x = 0;
  int transform = 0;
};

struct PairSet {
  Tensor lq;  // [n, 3, patch, patch]
  Tensor hq;
  std::vector<PairRecord> records;
  std::vector<std::string> skipped;  // sources smaller than the patch
  DegradationSpec spec;
  std::uint64_t seed = 0;

  [[nodiscard]] int size() const { return lq.shape().n; }
};

/// Sorted list of PNG files in a directory. Throws MissingInput when absent.
std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir);

/// n random patch pairs from the corpus; pair i uses Rng::stream(seed, i) for
/// source choice, crop, degradation and (if `augment`) the dihedral transform.
PairSet make_pairs(const std::filesystem::path& corpus_dir, const DegradationSpec& spec,
                   int patch, int n, std::uint64_t seed, bool augment = true);
/// Same, from images already in memory (names used as sources).
PairSet make_pairs(const std::vector<std::pair<std::string, Tensor>>& images,
                   const DegradationSpec& spec, int patch, int n, std::uint64_t seed,
                   bool augment = true);

void save_pairs(const std::filesystem::path& path, const PairSet& set);
PairSet load_pairs(const std::filesystem::path& path);

// ---- synthetic corpus ----

/// Clean RGB test image: gradient background, random shapes and stripes.
Tensor synth_image(int h, int w, Rng& rng);
/// Writes `count` synthetic PNGs (image_000.png, ...) into `dir`.
std::vector<std::filesystem::path> write_synthetic_corpus(const std::filesystem::path& dir,
                                                          int count, int size,
                                                          std::uint64_t seed);

}  // namespace refusion::degrade
