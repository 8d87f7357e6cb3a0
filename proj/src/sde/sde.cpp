// SPDX-License-Identifier: Apache-2.0
#include "refusion/sde.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <map>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "refusion/errors.hpp"
#include "refusion/rng.hpp"
#include "refusion/simd/kernels.hpp"

namespace refusion::sde {

std::string_view to_string(ScheduleKind k) {
  switch (k) {
    case ScheduleKind::constant: return "constant";
    case ScheduleKind::linear: return "linear";
    case ScheduleKind::cosine: return "cosine";
  }
  return "constant";
}

ScheduleKind parse_schedule_kind(std::string_view s) {
  if (s == "constant") return ScheduleKind::constant;
  if (s == "linear") return ScheduleKind::linear;
  if (s == "cosine") return ScheduleKind::cosine;
  throw std::invalid_argument("unknown schedule kind '" + std::string(s) + "'");
}

double Schedule::mean_decay(int step) const {
  check_step(step);
  return std::exp(-theta_bar[static_cast<std::size_t>(step)]);
}

double Schedule::variance(int step) const {
  check_step(step);
  return lambda * lambda * (1.0 - std::exp(-2.0 * theta_bar[static_cast<std::size_t>(step)]));
}

void Schedule::check_step(int step) const {
  if (step < 0 || step > steps) {
    throw std::out_of_range("step " + std::to_string(step) + " outside [0, " +
                            std::to_string(steps) + "]");
  }
}

namespace {

void fill_derived(Schedule& s) {
  const double two_lambda2 = 2.0 * s.lambda * s.lambda;
  s.sigma2.resize(s.theta.size());
  s.theta_bar.assign(s.theta.size() + 1, 0.0);
  for (std::size_t i = 0; i < s.theta.size(); ++i) {
    s.sigma2[i] = two_lambda2 * s.theta[i];
    s.theta_bar[i + 1] = s.theta_bar[i] + s.theta[i] * s.dt;
  }
}

}  // namespace

Schedule build_schedule(int steps, double lambda, double theta_min, double theta_max,
                        ScheduleKind kind) {
  if (steps < 1) throw std::invalid_argument("schedule needs T >= 1");
  if (!(lambda > 0.0) || !std::isfinite(lambda)) {
    throw std::invalid_argument("schedule needs lambda > 0");
  }
  if (!(theta_min > 0.0) || !(theta_min <= theta_max) || !std::isfinite(theta_max)) {
    throw std::invalid_argument("schedule needs 0 < theta_min <= theta_max");
  }
  Schedule s;
  s.steps = steps;
  s.lambda = lambda;
  s.kind = kind;
  s.theta_min = theta_min;
  s.theta_max = theta_max;
  s.dt = 1.0 / steps;
  s.theta.resize(static_cast<std::size_t>(steps));
  const double span = theta_max - theta_min;
  for (int i = 0; i < steps; ++i) {
    // Position in [0,1] across the steps; a single step sits at the middle.
    const double u = steps == 1 ? 0.5 : static_cast<double>(i) / (steps - 1);
    double th = theta_max;
    switch (kind) {
      case ScheduleKind::constant: th = theta_max; break;
      case ScheduleKind::linear: th = theta_min + span * u; break;
      case ScheduleKind::cosine:
        th = theta_min + span * 0.5 * (1.0 - std::cos(std::numbers::pi * u));
        break;
    }
    s.theta[static_cast<std::size_t>(i)] = th;
  }
  fill_derived(s);
  const double decay = std::exp(-s.theta_bar.back());
  if (decay > kMaxTerminalDecay) {
    std::ostringstream msg;
    msg << "schedule does not reach the stationary state: exp(-theta_bar_T) = " << decay
        << " > " << kMaxTerminalDecay << " (theta_bar_T = " << s.theta_bar.back()
        << "); raise theta";
    throw std::invalid_argument(msg.str());
  }
  return s;
}

Schedule schedule_from_rates(double lambda, std::vector<double> theta) {
  if (theta.empty()) throw std::invalid_argument("schedule needs T >= 1");
  if (lambda < 0.0) throw std::invalid_argument("lambda must be non-negative");
  for (double t : theta) {
    if (!(t >= 0.0)) throw std::invalid_argument("rates must be non-negative");
  }
  Schedule s;
  s.steps = static_cast<int>(theta.size());
  s.lambda = lambda;
  s.kind = ScheduleKind::constant;
  s.theta_min = *std::min_element(theta.begin(), theta.end());
  s.theta_max = *std::max_element(theta.begin(), theta.end());
  s.dt = 1.0 / s.steps;
  s.theta = std::move(theta);
  fill_derived(s);
  return s;
}

Schedule default_schedule(int steps, double lambda, double target_theta_bar) {
  return build_schedule(steps, lambda, target_theta_bar, target_theta_bar,
                        ScheduleKind::constant);
}

std::string serialize(const Schedule& s) {
  char buf[64];
  std::ostringstream out;
  out << "T=" << s.steps << "\n";
  auto put = [&](const char* key, double v) {
    auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    out << key << "=" << std::string(buf, end) << "\n";
  };
  put("lambda", s.lambda);
  out << "kind=" << to_string(s.kind) << "\n";
  put("theta_min", s.theta_min);
  put("theta_max", s.theta_max);
  return out.str();
}

Schedule parse_schedule(std::string_view text) {
  std::map<std::string, std::string, std::less<>> kv;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto need = [&](const char* key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw std::invalid_argument(std::string("schedule block lacks ") + key);
    return it->second;
  };
  auto num = [&](const char* key) {
    const std::string& v = need(key);
    double out = 0.0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc()) throw std::invalid_argument(std::string("bad number for ") + key);
    return out;
  };
  return build_schedule(std::stoi(need("T")), num("lambda"), num("theta_min"), num("theta_max"),
                        parse_schedule_kind(need("kind")));
}

Marginal marginal(const Tensor& x0, const Tensor& mu, int step, const Schedule& s) {
  require_same_shape(x0, mu, "marginal");
  const double decay = s.mean_decay(step);
  // m_t = mu + (x0 - mu) e^{-theta_bar}, written so that step 0 gives x0 exactly.
  Marginal m{Tensor(x0.shape()), s.variance(step)};
  const double keep = 1.0 - decay;
  double* out = m.mean.data();
  for (std::size_t i = 0; i < x0.size(); ++i) out[i] = decay * x0[i] + keep * mu[i];
  return m;
}

Tensor forward_sample(const Tensor& x0, const Tensor& mu, int step, const Tensor& eps,
                      const Schedule& s) {
  require_same_shape(x0, eps, "forward_sample");
  Marginal m = marginal(x0, mu, step, s);
  simd::active().axpy(eps.size(), std::sqrt(m.variance), eps.data(), m.mean.data());
  return std::move(m.mean);
}

namespace {

void require_positive_step(int step, const Schedule& s, const char* what) {
  s.check_step(step);
  if (step == 0) {
    throw std::invalid_argument(std::string(what) +
                                ": score undefined at step 0 (zero variance)");
  }
}

}  // namespace

Tensor gt_score(const Tensor& x_t, const Tensor& x0, const Tensor& mu, int step,
                const Schedule& s) {
  require_positive_step(step, s, "gt_score");
  require_same_shape(x_t, x0, "gt_score");
  const Marginal m = marginal(x0, mu, step, s);
  const double v = std::max(m.variance, kVarianceFloor);
  Tensor out = x_t;
  out -= m.mean;
  out *= -1.0 / v;
  return out;
}

Tensor score_from_noise(const Tensor& eps_hat, int step, const Schedule& s) {
  require_positive_step(step, s, "score_from_noise");
  const double v = std::max(s.variance(step), kVarianceFloor);
  Tensor out = eps_hat;
  out *= -1.0 / std::sqrt(v);
  return out;
}

Tensor noise_from_state(const Tensor& x_t, const Tensor& x0, const Tensor& mu, int step,
                        const Schedule& s) {
  require_positive_step(step, s, "noise_from_state");
  const Marginal m = marginal(x0, mu, step, s);
  Tensor out = x_t;
  out -= m.mean;
  out *= 1.0 / std::sqrt(std::max(m.variance, kVarianceFloor));
  return out;
}

DiffusionState reverse_step(const DiffusionState& state, const Tensor& score, const Tensor& z,
                            const Schedule& s) {
  require_positive_step(state.step, s, "reverse_step");
  require_same_shape(state.x, state.mu, "reverse_step state");
  require_same_shape(state.x, score, "reverse_step score");
  const bool final_step = state.step == 1;
  if (!final_step) require_same_shape(state.x, z, "reverse_step noise");

  const auto i = static_cast<std::size_t>(state.step - 1);
  const double theta = s.theta[i];
  const double sigma2 = s.sigma2[i];
  const double dt = s.dt;
  const double noise_scale = final_step ? 0.0 : std::sqrt(sigma2 * dt);

  DiffusionState next{state.x, state.mu, state.step - 1};
  double* x = next.x.data();
  const double* mu = state.mu.data();
  const double* sc = score.data();
  const std::size_t n = next.x.size();
  for (std::size_t j = 0; j < n; ++j) {
    const double drift = theta * (mu[j] - x[j]) - sigma2 * sc[j];
    x[j] -= drift * dt;
  }
  if (noise_scale != 0.0) simd::active().axpy(n, noise_scale, z.data(), x);
  return next;
}

Tensor restore(const Tensor& lq, const NoisePredictor& predict, const Schedule& s,
               std::uint64_t seed, RestoreOptions opts) {
  if (!predict) throw std::invalid_argument("restore: no noise predictor");
  Rng rng(seed);
  DiffusionState state{lq, lq, s.steps};
  const Tensor init_noise = normal_like(lq.shape(), rng);
  simd::active().axpy(lq.size(), s.lambda, init_noise.data(), state.x.data());

  Tensor z(lq.shape());
  while (state.step > 0) {
    const Tensor eps_hat = predict(state.x, state.mu, state.step);
    require_same_shape(eps_hat, state.x, "restore predictor output");
    const Tensor score = score_from_noise(eps_hat, state.step, s);
    if (state.step > 1) rng.fill_normal(z);
    state = reverse_step(state, score, z, s);
    if (!state.x.all_finite()) {
      throw Divergence("restore: non-finite state at step " +
                               std::to_string(state.step) + " (divergent sampling)");
    }
  }
  return opts.clamp_output ? clamped(state.x) : std::move(state.x);
}

std::vector<MomentEstimate> forward_em_simulate(const Tensor& x0, const Tensor& mu,
                                                const Schedule& s, int n_paths,
                                                std::uint64_t seed,
                                                std::vector<int> checkpoints) {
  require_same_shape(x0, mu, "forward_em_simulate");
  if (n_paths < 1) throw std::invalid_argument("forward_em_simulate needs n_paths >= 1");
  if (checkpoints.empty()) checkpoints.push_back(s.steps);
  std::sort(checkpoints.begin(), checkpoints.end());
  for (int c : checkpoints) s.check_step(c);

  const std::size_t n = x0.size();
  const std::size_t nc = checkpoints.size();
  // Per-checkpoint running power sums; central moments are formed at the end.
  std::vector<std::vector<double>> s1(nc, std::vector<double>(n, 0.0));
  std::vector<std::vector<double>> s2 = s1, s3 = s1, s4 = s1;

  Rng rng(seed);
  std::vector<double> x(n);
  for (int p = 0; p < n_paths; ++p) {
    std::copy_n(x0.data(), n, x.begin());
    std::size_t next_cp = 0;
    for (int step = 0; step <= s.steps && next_cp < nc; ++step) {
      while (next_cp < nc && checkpoints[next_cp] == step) {
        for (std::size_t j = 0; j < n; ++j) {
          const double v = x[j];
          const double v2 = v * v;
          s1[next_cp][j] += v;
          s2[next_cp][j] += v2;
          s3[next_cp][j] += v2 * v;
          s4[next_cp][j] += v2 * v2;
        }
        ++next_cp;
      }
      if (step == s.steps || next_cp == nc) break;
      const auto i = static_cast<std::size_t>(step);
      const double theta = s.theta[i];
      const double diffusion = std::sqrt(s.sigma2[i] * s.dt);
      for (std::size_t j = 0; j < n; ++j) {
        x[j] += theta * (mu[j] - x[j]) * s.dt + diffusion * rng.normal();
      }
    }
  }

  std::vector<MomentEstimate> out;
  out.reserve(nc);
  const double np = n_paths;
  for (std::size_t c = 0; c < nc; ++c) {
    MomentEstimate e{checkpoints[c], Tensor(x0.shape()), Tensor(x0.shape()), Tensor(x0.shape())};
    for (std::size_t j = 0; j < n; ++j) {
      const double m = s1[c][j] / np;
      const double e2 = s2[c][j] / np;
      const double e3 = s3[c][j] / np;
      const double e4 = s4[c][j] / np;
      const double var_pop = std::max(0.0, e2 - m * m);
      e.mean[j] = m;
      e.var[j] = n_paths > 1 ? var_pop * np / (np - 1.0) : 0.0;
      e.m4[j] = std::max(0.0, e4 - 4.0 * m * e3 + 6.0 * m * m * e2 - 3.0 * m * m * m * m);
    }
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace refusion::sde
