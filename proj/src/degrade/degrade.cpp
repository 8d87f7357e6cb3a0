// SPDX-License-Identifier: Apache-2.0
#include "refusion/degrade.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>
#include <sstream>
#include <stdexcept>

#include "refusion/errors.hpp"
#include "refusion/io/archive.hpp"
#include "refusion/io/image.hpp"

namespace refusion::degrade {

std::string_view to_string(Kind k) {
  switch (k) {
    case Kind::blur_noise: return "blur_noise";
    case Kind::haze: return "haze";
    case Kind::shadow: return "shadow";
    case Kind::downsample: return "downsample";
    case Kind::bokeh_blur: return "bokeh_blur";
  }
  return "blur_noise";
}

Kind parse_kind(std::string_view s) {
  if (s == "blur_noise") return Kind::blur_noise;
  if (s == "haze") return Kind::haze;
  if (s == "shadow") return Kind::shadow;
  if (s == "downsample") return Kind::downsample;
  if (s == "bokeh_blur") return Kind::bokeh_blur;
  throw std::invalid_argument("unknown degradation kind '" + std::string(s) + "'");
}

namespace {

const std::map<std::string, double>& defaults(Kind k) {
  static const std::map<Kind, std::map<std::string, double>> table{
      {Kind::blur_noise, {{"sigma", 1.5}, {"noise", 0.03}}},
      {Kind::haze, {{"t_min", 0.3}, {"t_max", 0.8}, {"airlight", 0.9}, {"smooth", 0.35}}},
      {Kind::shadow,
       {{"opacity", 1.0}, {"gain_min", 0.35}, {"gain_max", 0.65}, {"softness", 2.0},
        {"vertices", 6.0}}},
      {Kind::downsample, {{"scale", 2.0}}},
      {Kind::bokeh_blur, {{"radius", 3.0}, {"focus", 0.3}}},
  };
  return table.at(k);
}

void require_range(const DegradationSpec& s, const std::string& key, double lo, double hi) {
  const double v = s.get(key);
  if (!(v >= lo && v <= hi)) {
    std::ostringstream msg;
    msg << to_string(s.kind) << ": parameter " << key << " = " << v << " outside [" << lo << ", "
        << hi << "]";
    throw std::invalid_argument(msg.str());
  }
}

int reflect(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i - 1;
    if (i >= n) i = 2 * n - i - 1;
  }
  return i;
}

void check_single(const Tensor& t, const char* what) {
  if (t.shape().n != 1) throw std::invalid_argument(std::string(what) + " expects one sample");
}

}  // namespace

double DegradationSpec::get(const std::string& key) const {
  auto it = params.find(key);
  if (it == params.end()) {
    throw std::invalid_argument(std::string(to_string(kind)) + ": missing parameter " + key);
  }
  return it->second;
}

nlohmann::json DegradationSpec::to_json() const {
  nlohmann::json j;
  j["kind"] = std::string(to_string(kind));
  j["params"] = params;
  j["seed"] = seed;
  return j;
}

DegradationSpec DegradationSpec::from_json(const nlohmann::json& j) {
  DegradationSpec s;
  s.kind = parse_kind(j.at("kind").get<std::string>());
  s.params = j.at("params").get<std::map<std::string, double>>();
  s.seed = j.at("seed").get<std::uint64_t>();
  validate(s);
  return s;
}

DegradationSpec make_spec(Kind kind, const std::map<std::string, double>& params,
                          std::uint64_t seed) {
  DegradationSpec s;
  s.kind = kind;
  s.params = defaults(kind);
  s.seed = seed;
  for (const auto& [k, v] : params) {
    if (!s.params.count(k)) {
      throw std::invalid_argument(std::string(to_string(kind)) + ": unknown parameter " + k);
    }
    s.params[k] = v;
  }
  validate(s);
  return s;
}

void validate(const DegradationSpec& s) {
  for (const auto& [k, v] : s.params) {
    if (!defaults(s.kind).count(k)) {
      throw std::invalid_argument(std::string(to_string(s.kind)) + ": unknown parameter " + k);
    }
    if (!std::isfinite(v)) throw std::invalid_argument("non-finite degradation parameter " + k);
  }
  switch (s.kind) {
    case Kind::blur_noise:
      require_range(s, "sigma", 0.0, 10.0);
      require_range(s, "noise", 0.0, 0.5);
      break;
    case Kind::haze:
      require_range(s, "t_min", 0.0, 1.0);
      require_range(s, "t_max", s.get("t_min"), 1.0);
      require_range(s, "airlight", 0.0, 1.0);
      require_range(s, "smooth", 1e-3, 1.0);
      break;
    case Kind::shadow:
      require_range(s, "opacity", 0.0, 1.0);
      require_range(s, "gain_min", 0.0, 1.0);
      require_range(s, "gain_max", s.get("gain_min"), 1.0);
      require_range(s, "softness", 0.0, 32.0);
      require_range(s, "vertices", 3.0, 16.0);
      break;
    case Kind::downsample: {
      const double sc = s.get("scale");
      if (sc != 1.0 && sc != 2.0 && sc != 4.0) {
        throw std::invalid_argument("downsample: scale must be 1, 2 or 4");
      }
      break;
    }
    case Kind::bokeh_blur:
      require_range(s, "radius", 0.0, 32.0);
      require_range(s, "focus", 0.0, 1.0);
      break;
  }
}

// ---- filters ----

Tensor gaussian_blur(const Tensor& img, double sigma) {
  if (sigma <= 0.0) return img;
  const int r = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
  double total = 0.0;
  for (int i = -r; i <= r; ++i) {
    k[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma));
    total += k[static_cast<std::size_t>(i + r)];
  }
  for (double& v : k) v /= total;
  const Shape& s = img.shape();
  Tensor tmp(s), out(s);
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const double* src = img.plane(n, c);
      double* t = tmp.plane(n, c);
      double* o = out.plane(n, c);
      for (int y = 0; y < s.h; ++y) {
        for (int x = 0; x < s.w; ++x) {
          double acc = 0.0;
          for (int i = -r; i <= r; ++i) {
            acc += k[static_cast<std::size_t>(i + r)] * src[y * s.w + reflect(x + i, s.w)];
          }
          t[y * s.w + x] = acc;
        }
      }
      for (int y = 0; y < s.h; ++y) {
        for (int x = 0; x < s.w; ++x) {
          double acc = 0.0;
          for (int i = -r; i <= r; ++i) {
            acc += k[static_cast<std::size_t>(i + r)] * t[reflect(y + i, s.h) * s.w + x];
          }
          o[y * s.w + x] = acc;
        }
      }
    }
  }
  return out;
}

Tensor disk_blur(const Tensor& img, double radius) {
  if (radius <= 0.0) return img;
  const int r = static_cast<int>(std::ceil(radius));
  std::vector<std::pair<int, int>> taps;
  for (int dy = -r; dy <= r; ++dy) {
    for (int dx = -r; dx <= r; ++dx) {
      if (dx * dx + dy * dy <= radius * radius + 1e-9) taps.emplace_back(dy, dx);
    }
  }
  const double wgt = 1.0 / static_cast<double>(taps.size());
  const Shape& s = img.shape();
  Tensor out(s);
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const double* src = img.plane(n, c);
      double* o = out.plane(n, c);
      for (int y = 0; y < s.h; ++y) {
        for (int x = 0; x < s.w; ++x) {
          double acc = 0.0;
          for (auto [dy, dx] : taps) acc += src[reflect(y + dy, s.h) * s.w + reflect(x + dx, s.w)];
          o[y * s.w + x] = acc * wgt;
        }
      }
    }
  }
  return out;
}

namespace {

double cubic_weight(double t) {
  constexpr double a = -0.5;
  t = std::abs(t);
  if (t <= 1.0) return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0;
  if (t < 2.0) return ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a;
  return 0.0;
}

struct Taps {
  std::array<int, 4> idx{};
  std::array<double, 4> w{};
};

std::vector<Taps> cubic_taps(int in, int out) {
  std::vector<Taps> taps(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    const double src = (o + 0.5) * scale - 0.5;
    const int base = static_cast<int>(std::floor(src));
    double total = 0.0;
    for (int k = 0; k < 4; ++k) {
      const int i = base - 1 + k;
      taps[static_cast<std::size_t>(o)].idx[static_cast<std::size_t>(k)] = std::clamp(i, 0, in - 1);
      const double w = cubic_weight(src - i);
      taps[static_cast<std::size_t>(o)].w[static_cast<std::size_t>(k)] = w;
      total += w;
    }
    for (double& w : taps[static_cast<std::size_t>(o)].w) w /= total;
  }
  return taps;
}

}  // namespace

Tensor resize_bicubic(const Tensor& img, int h, int w) {
  const Shape& s = img.shape();
  if (h < 1 || w < 1) throw std::invalid_argument("resize to an empty image");
  const auto tx = cubic_taps(s.w, w);
  const auto ty = cubic_taps(s.h, h);
  Tensor out({s.n, s.c, h, w});
  std::vector<double> tmp(static_cast<std::size_t>(s.h) * w);
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const double* src = img.plane(n, c);
      for (int y = 0; y < s.h; ++y) {
        for (int x = 0; x < w; ++x) {
          const Taps& t = tx[static_cast<std::size_t>(x)];
          double acc = 0.0;
          for (int k = 0; k < 4; ++k) {
            acc += t.w[static_cast<std::size_t>(k)] * src[y * s.w + t.idx[static_cast<std::size_t>(k)]];
          }
          tmp[static_cast<std::size_t>(y) * w + x] = acc;
        }
      }
      double* o = out.plane(n, c);
      for (int y = 0; y < h; ++y) {
        const Taps& t = ty[static_cast<std::size_t>(y)];
        for (int x = 0; x < w; ++x) {
          double acc = 0.0;
          for (int k = 0; k < 4; ++k) {
            acc += t.w[static_cast<std::size_t>(k)] *
                   tmp[static_cast<std::size_t>(t.idx[static_cast<std::size_t>(k)]) * w + x];
          }
          o[y * w + x] = acc;
        }
      }
    }
  }
  return out;
}

Tensor area_downsample(const Tensor& img, int factor) {
  const Shape& s = img.shape();
  if (factor < 1 || s.h % factor != 0 || s.w % factor != 0) {
    throw std::invalid_argument("area_downsample: " + s.str() + " not divisible by " +
                                std::to_string(factor));
  }
  const int h = s.h / factor, w = s.w / factor;
  Tensor out({s.n, s.c, h, w});
  const double inv = 1.0 / (factor * factor);
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          double acc = 0.0;
          for (int dy = 0; dy < factor; ++dy) {
            for (int dx = 0; dx < factor; ++dx) acc += img.at(n, c, y * factor + dy, x * factor + dx);
          }
          out.at(n, c, y, x) = acc * inv;
        }
      }
    }
  }
  return out;
}

// ---- degradations ----

namespace {

Tensor smooth_field(int h, int w, double smooth, Rng& rng) {
  const int g = std::max(2, static_cast<int>(std::lround(1.0 / smooth)));
  Tensor coarse({1, 1, g, g});
  for (double& v : coarse.values()) v = rng.uniform();
  Tensor f = resize_bicubic(coarse, h, w);
  const auto [lo, hi] = std::minmax_element(f.values().begin(), f.values().end());
  const double a = *lo, b = *hi;
  for (double& v : f.values()) v = b > a ? (v - a) / (b - a) : 0.5;
  return f;
}

Tensor polygon_mask(int h, int w, int vertices, Rng& rng) {
  const double cy = rng.uniform(0.0, h), cx = rng.uniform(0.0, w);
  const double r0 = rng.uniform(0.2, 0.45) * std::min(h, w);
  std::vector<double> angles(static_cast<std::size_t>(vertices));
  for (double& a : angles) a = rng.uniform(0.0, 2.0 * std::numbers::pi);
  std::sort(angles.begin(), angles.end());
  std::vector<std::pair<double, double>> poly;
  for (double a : angles) {
    const double r = r0 * rng.uniform(0.6, 1.2);
    poly.emplace_back(cy + r * std::sin(a), cx + r * std::cos(a));
  }
  Tensor mask({1, 1, h, w});
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double py = y + 0.5, px = x + 0.5;
      bool inside = false;
      for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
        const auto [yi, xi] = poly[i];
        const auto [yj, xj] = poly[j];
        if ((yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi) inside = !inside;
      }
      mask.at(0, 0, y, x) = inside ? 1.0 : 0.0;
    }
  }
  return mask;
}

Tensor disc_mask(int h, int w, double radius, Rng& rng) {
  const double cy = rng.uniform(0.25, 0.75) * h, cx = rng.uniform(0.25, 0.75) * w;
  Tensor mask({1, 1, h, w});
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
      mask.at(0, 0, y, x) = dy * dy + dx * dx <= radius * radius ? 1.0 : 0.0;
    }
  }
  return mask;
}

void clamp_inplace(Tensor& t) {
  for (double& v : t.values()) v = std::clamp(v, 0.0, 1.0);
}

}  // namespace

Tensor apply_one(const Tensor& hq, const DegradationSpec& spec, Rng& rng) {
  check_single(hq, "apply_one");
  const Shape& s = hq.shape();
  Tensor lq;
  switch (spec.kind) {
    case Kind::blur_noise: {
      lq = gaussian_blur(hq, spec.get("sigma"));
      const double noise = spec.get("noise");
      if (noise > 0.0) {
        for (double& v : lq.values()) v += noise * rng.normal();
      }
      break;
    }
    case Kind::haze: {
      const double t_min = spec.get("t_min"), t_max = spec.get("t_max");
      const double a = spec.get("airlight");
      Tensor t = smooth_field(s.h, s.w, spec.get("smooth"), rng);
      for (double& v : t.values()) v = t_min + (t_max - t_min) * v;
      lq = Tensor(s);
      for (int c = 0; c < s.c; ++c) {
        const double* src = hq.plane(0, c);
        const double* tt = t.plane(0, 0);
        double* o = lq.plane(0, c);
        for (std::size_t i = 0; i < s.plane(); ++i) o[i] = src[i] * tt[i] + a * (1.0 - tt[i]);
      }
      break;
    }
    case Kind::shadow: {
      const double opacity = spec.get("opacity");
      Tensor mask = polygon_mask(s.h, s.w, static_cast<int>(spec.get("vertices")), rng);
      mask = gaussian_blur(mask, spec.get("softness"));
      lq = Tensor(s);
      for (int c = 0; c < s.c; ++c) {
        const double gain = rng.uniform(spec.get("gain_min"), spec.get("gain_max"));
        const double* src = hq.plane(0, c);
        const double* m = mask.plane(0, 0);
        double* o = lq.plane(0, c);
        for (std::size_t i = 0; i < s.plane(); ++i) {
          o[i] = src[i] * (1.0 - opacity * m[i] * (1.0 - gain));
        }
      }
      break;
    }
    case Kind::downsample: {
      const int scale = static_cast<int>(spec.get("scale"));
      if (scale == 1) {
        lq = hq;
        break;
      }
      const Tensor small = s.h % scale == 0 && s.w % scale == 0
                               ? area_downsample(hq, scale)
                               : resize_bicubic(hq, std::max(1, s.h / scale), std::max(1, s.w / scale));
      lq = resize_bicubic(small, s.h, s.w);
      break;
    }
    case Kind::bokeh_blur: {
      const double radius = spec.get("radius");
      if (radius == 0.0) {
        lq = hq;
        break;
      }
      const Tensor blurred = disk_blur(hq, radius);
      const double focus_r = spec.get("focus") * std::min(s.h, s.w);
      Tensor mask = disc_mask(s.h, s.w, focus_r, rng);
      mask = gaussian_blur(mask, std::max(1.0, radius));
      lq = Tensor(s);
      for (int c = 0; c < s.c; ++c) {
        const double* sharp = hq.plane(0, c);
        const double* soft = blurred.plane(0, c);
        const double* m = mask.plane(0, 0);
        double* o = lq.plane(0, c);
        for (std::size_t i = 0; i < s.plane(); ++i) o[i] = m[i] * sharp[i] + (1.0 - m[i]) * soft[i];
      }
      break;
    }
  }
  clamp_inplace(lq);
  if (!lq.all_finite()) throw std::runtime_error("degradation produced non-finite values");
  return lq;
}

Tensor apply(const Tensor& hq, const DegradationSpec& spec) {
  validate(spec);
  Tensor out(hq.shape());
  for (int n = 0; n < hq.shape().n; ++n) {
    Rng rng = Rng::stream(spec.seed, static_cast<std::uint64_t>(n));
    out.set_sample(n, apply_one(hq.batch_slice(n, 1), spec, rng));
  }
  return out;
}

// ---- augmentation ----

namespace {

// One counter-clockwise quarter turn: out(y, x) = in(x, W - 1 - y).
Tensor rot90(const Tensor& img) {
  const Shape& s = img.shape();
  Tensor out({s.n, s.c, s.w, s.h});
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      for (int y = 0; y < s.w; ++y) {
        for (int x = 0; x < s.h; ++x) out.at(n, c, y, x) = img.at(n, c, x, s.w - 1 - y);
      }
    }
  }
  return out;
}

Tensor flip_h(const Tensor& img) {
  const Shape& s = img.shape();
  Tensor out(s);
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      for (int y = 0; y < s.h; ++y) {
        for (int x = 0; x < s.w; ++x) out.at(n, c, y, x) = img.at(n, c, y, s.w - 1 - x);
      }
    }
  }
  return out;
}

}  // namespace

Tensor dihedral(const Tensor& img, int k) {
  if (k < 0 || k > 7) throw std::invalid_argument("dihedral index must be in [0, 7]");
  Tensor out = img;
  for (int i = 0; i < k % 4; ++i) out = rot90(out);
  if (k >= 4) out = flip_h(out);
  return out;
}

int dihedral_inverse(int k) {
  if (k < 0 || k > 7) throw std::invalid_argument("dihedral index must be in [0, 7]");
  // Rotations invert to the opposite turn; every flip-rotation is an involution.
  return k < 4 ? (4 - k) % 4 : k;
}

// ---- paired patches ----

std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw MissingInput("no such directory: " + dir.string());
  std::vector<std::filesystem::path> out;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::string ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".png") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

PairSet make_pairs(const std::vector<std::pair<std::string, Tensor>>& images,
                   const DegradationSpec& spec, int patch, int n, std::uint64_t seed,
                   bool augment) {
  validate(spec);
  if (patch < 1 || n < 0) throw std::invalid_argument("make_pairs needs patch >= 1, n >= 0");
  PairSet set;
  set.spec = spec;
  set.seed = seed;
  std::vector<const std::pair<std::string, Tensor>*> usable;
  for (const auto& img : images) {
    if (img.second.shape().h >= patch && img.second.shape().w >= patch) {
      usable.push_back(&img);
    } else {
      set.skipped.push_back(img.first);
    }
  }
  if (usable.empty() && n > 0) {
    throw std::invalid_argument("no corpus image is at least " + std::to_string(patch) +
                                " pixels on each side");
  }
  set.lq = Tensor({n, 3, patch, patch});
  set.hq = Tensor({n, 3, patch, patch});
  for (int i = 0; i < n; ++i) {
    Rng rng = Rng::stream(seed, static_cast<std::uint64_t>(i));
    const auto& [name, img] = *usable[static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<int>(usable.size()) - 1))];
    const Shape& s = img.shape();
    const int y = rng.uniform_int(0, s.h - patch);
    const int x = rng.uniform_int(0, s.w - patch);
    Tensor hq({1, 3, patch, patch});
    for (int c = 0; c < 3; ++c) {
      for (int r = 0; r < patch; ++r) {
        std::copy_n(img.plane(0, c) + static_cast<std::size_t>(y + r) * s.w + x, patch,
                    hq.plane(0, c) + static_cast<std::size_t>(r) * patch);
      }
    }
    Tensor lq = apply_one(hq, spec, rng);
    const int k = augment ? rng.uniform_int(0, 7) : 0;
    set.hq.set_sample(i, dihedral(hq, k));
    set.lq.set_sample(i, dihedral(lq, k));
    set.records.push_back(PairRecord{name, y, x, k});
  }
  return set;
}

PairSet make_pairs(const std::filesystem::path& corpus_dir, const DegradationSpec& spec,
                   int patch, int n, std::uint64_t seed, bool augment) {
  std::vector<std::pair<std::string, Tensor>> images;
  for (const auto& p : list_images(corpus_dir)) images.emplace_back(p.filename().string(), io::read_png(p));
  if (images.empty()) throw MissingInput("no PNG images in " + corpus_dir.string());
  return make_pairs(images, spec, patch, n, seed, augment);
}

void save_pairs(const std::filesystem::path& path, const PairSet& set) {
  io::Archive ar;
  ar.manifest["type"] = "pairs";
  ar.manifest["spec"] = set.spec.to_json();
  ar.manifest["seed"] = set.seed;
  ar.manifest["count"] = set.size();
  ar.manifest["patch"] = set.hq.shape().h;
  nlohmann::json recs = nlohmann::json::array();
  for (const auto& r : set.records) {
    recs.push_back({{"source", r.source}, {"y", r.y}, {"x", r.x}, {"transform", r.transform}});
  }
  ar.manifest["records"] = recs;
  ar.manifest["skipped"] = set.skipped;
  ar.tensors.push_back({"lq", set.lq});
  ar.tensors.push_back({"hq", set.hq});
  io::save_archive(path, ar);
}

PairSet load_pairs(const std::filesystem::path& path) {
  const io::Archive ar = io::load_archive(path);
  if (ar.manifest.value("type", "") != "pairs") {
    throw ConfigError(path.string() + " is not a paired patch archive");
  }
  PairSet set;
  set.spec = DegradationSpec::from_json(ar.manifest.at("spec"));
  set.seed = ar.manifest.at("seed").get<std::uint64_t>();
  for (const auto& r : ar.manifest.at("records")) {
    set.records.push_back(PairRecord{r.at("source").get<std::string>(), r.at("y").get<int>(),
                                     r.at("x").get<int>(), r.at("transform").get<int>()});
  }
  set.skipped = ar.manifest.at("skipped").get<std::vector<std::string>>();
  set.lq = ar.get("lq");
  set.hq = ar.get("hq");
  return set;
}

// ---- synthetic corpus ----

Tensor synth_image(int h, int w, Rng& rng) {
  Tensor img({1, 3, h, w});
  double c0[3], c1[3];
  for (int c = 0; c < 3; ++c) {
    c0[c] = rng.uniform(0.1, 0.9);
    c1[c] = rng.uniform(0.1, 0.9);
  }
  const double ang = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double dy = std::sin(ang), dx = std::cos(ang);
  const double span = std::abs(dy) * h + std::abs(dx) * w;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double u = ((y - h / 2.0) * dy + (x - w / 2.0) * dx) / span + 0.5;
      u = std::clamp(u, 0.0, 1.0);
      for (int c = 0; c < 3; ++c) img.at(0, c, y, x) = c0[c] + (c1[c] - c0[c]) * u;
    }
  }
  const int shapes = rng.uniform_int(4, 9);
  for (int k = 0; k < shapes; ++k) {
    double col[3];
    for (double& v : col) v = rng.uniform();
    const double alpha = rng.uniform(0.6, 1.0);
    const int kind = rng.uniform_int(0, 2);
    const double cy = rng.uniform(0.0, h), cx = rng.uniform(0.0, w);
    const double ry = rng.uniform(0.05, 0.3) * h, rx = rng.uniform(0.05, 0.3) * w;
    const double freq = rng.uniform(0.08, 0.35), phase = rng.uniform(0.0, 6.3);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const double ny = (y + 0.5 - cy) / ry, nx = (x + 0.5 - cx) / rx;
        bool inside = false;
        double shade = 1.0;
        if (kind == 0) {
          inside = ny * ny + nx * nx <= 1.0;
        } else if (kind == 1) {
          inside = std::abs(ny) <= 1.0 && std::abs(nx) <= 1.0;
        } else {
          // Striped rectangle: adds fine texture.
          inside = std::abs(ny) <= 1.0 && std::abs(nx) <= 1.0;
          shade = 0.75 + 0.25 * std::sin(2.0 * std::numbers::pi * freq * (x + y) + phase);
        }
        if (!inside) continue;
        for (int c = 0; c < 3; ++c) {
          double& v = img.at(0, c, y, x);
          v = (1.0 - alpha) * v + alpha * col[c] * shade;
        }
      }
    }
  }
  clamp_inplace(img);
  return img;
}

std::vector<std::filesystem::path> write_synthetic_corpus(const std::filesystem::path& dir,
                                                          int count, int size,
                                                          std::uint64_t seed) {
  if (count < 1 || size < 1) throw std::invalid_argument("synthetic corpus needs count, size >= 1");
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> out;
  for (int i = 0; i < count; ++i) {
    Rng rng = Rng::stream(seed, static_cast<std::uint64_t>(i));
    char name[32];
    std::snprintf(name, sizeof(name), "image_%03d.png", i);
    const auto path = dir / name;
    io::write_png(path, synth_image(size, size, rng));
    out.push_back(path);
  }
  return out;
}

}  // namespace refusion::degrade
