// SPDX-License-Identifier: Apache-2.0
#pragma once

// Mean-reverting SDE  dx = theta_t (mu - x) dt + sigma_t dw  with
// sigma_t^2 / theta_t = 2 lambda^2, its closed-form marginals, the
// conditional score, and reverse-time Euler-Maruyama sampling.
//
// Time is discretised into T steps over a unit horizon (dt = 1/T). Step s
// refers to the state after s forward increments; the cumulative rate
// theta_bar[s] is the left-Riemann sum of theta over the first s steps.

#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "refusion/tensor.hpp"

namespace refusion::sde {

enum class ScheduleKind { constant, linear, cosine };

std::string_view to_string(ScheduleKind k);
ScheduleKind parse_schedule_kind(std::string_view s);

/// Largest admissible exp(-theta_bar[T]); above this the terminal state has
/// not reached N(mu, lambda^2).
inline constexpr double kMaxTerminalDecay = 0.005;
/// Lower bound on v_t in every division by the variance.
inline constexpr double kVarianceFloor = 1e-12;

struct Schedule {
  int steps = 0;  // T
  double lambda = 0.0;
  ScheduleKind kind = ScheduleKind::constant;
  double theta_min = 0.0;
  double theta_max = 0.0;
  double dt = 0.0;
  std::vector<double> theta;      // size T, rate on [s, s+1)
  std::vector<double> sigma2;     // size T, 2 lambda^2 theta
  std::vector<double> theta_bar;  // size T+1, theta_bar[0] = 0

  /// exp(-theta_bar[step]), the weight of x(0) in the marginal mean.
  [[nodiscard]] double mean_decay(int step) const;
  /// v_t = lambda^2 (1 - exp(-2 theta_bar[step])).
  [[nodiscard]] double variance(int step) const;
  void check_step(int step) const;
};

/// Builds a validated schedule. For kind=constant every theta equals
/// theta_max. Throws std::invalid_argument on bad parameters or when
/// exp(-theta_bar[T]) exceeds kMaxTerminalDecay.
Schedule build_schedule(int steps, double lambda, double theta_min, double theta_max,
                        ScheduleKind kind);

/// Schedule from explicit per-step rates, without the terminal-decay check.
/// Zero rates are allowed (frozen process); used for oracles and tests.
Schedule schedule_from_rates(double lambda, std::vector<double> theta);

/// Constant-rate schedule with theta_bar[T] == target_theta_bar.
Schedule default_schedule(int steps, double lambda, double target_theta_bar = 6.0);

/// Flat key=value block (T, lambda, kind, theta_min, theta_max).
std::string serialize(const Schedule& s);
/// Rebuilds a schedule from serialize() output through build_schedule.
Schedule parse_schedule(std::string_view text);

struct Marginal {
  Tensor mean;
  double variance = 0.0;
};

Marginal marginal(const Tensor& x0, const Tensor& mu, int step, const Schedule& s);

/// x(t) = m_t + sqrt(v_t) eps for caller-supplied eps.
Tensor forward_sample(const Tensor& x0, const Tensor& mu, int step, const Tensor& eps,
                      const Schedule& s);

/// -(x_t - m_t) / v_t. Rejects step 0.
Tensor gt_score(const Tensor& x_t, const Tensor& x0, const Tensor& mu, int step,
                const Schedule& s);

/// -eps_hat / sqrt(v_t). Rejects step 0.
Tensor score_from_noise(const Tensor& eps_hat, int step, const Schedule& s);

/// Noise that forward_sample would have used to produce x_t.
Tensor noise_from_state(const Tensor& x_t, const Tensor& x0, const Tensor& mu, int step,
                        const Schedule& s);

struct DiffusionState {
  Tensor x;
  Tensor mu;
  int step = 0;
};

/// One backward Euler-Maruyama step s -> s-1:
///   x <- x - [theta (mu - x) - sigma^2 score] dt + sigma sqrt(dt) z
/// using the coefficients of interval [s-1, s). z is ignored on the final
/// step (s == 1) so the result is the transition mean.
DiffusionState reverse_step(const DiffusionState& state, const Tensor& score, const Tensor& z,
                            const Schedule& s);

/// Predicts eps for (x_t, mu) at the given step of the sampling schedule.
using NoisePredictor = std::function<Tensor(const Tensor& x_t, const Tensor& mu, int step)>;

struct RestoreOptions {
  // Pixel-space restoration clamps to [0,1]; latent-space must not.
  bool clamp_output = true;
};

/// Runs the full reverse chain from x(T) = lq + lambda * eps. Deterministic
/// in `seed`. Throws std::runtime_error on a non-finite intermediate state.
Tensor restore(const Tensor& lq, const NoisePredictor& predict, const Schedule& s,
               std::uint64_t seed, RestoreOptions opts = {});

struct MomentEstimate {
  int step = 0;
  Tensor mean;
  Tensor var;  // unbiased sample variance
  Tensor m4;   // fourth central moment, for variance standard errors
};

/// Monte-Carlo Euler-Maruyama simulation of the forward SDE, per-pixel
/// moments at each requested checkpoint step (default: the terminal step).
std::vector<MomentEstimate> forward_em_simulate(const Tensor& x0, const Tensor& mu,
                                                const Schedule& s, int n_paths,
                                                std::uint64_t seed,
                                                std::vector<int> checkpoints = {});

}  // namespace refusion::sde
