#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <utility>
#include <vector>

namespace bilevel {

struct SinkhornOptions {
  /// Kernel sharpness: the kernel is exp(-lambda * cost), i.e. eps = 1/lambda.
  double lambda = 50.0;
  std::size_t max_iters = 100;
  /// Stop once the worst row/column marginal violation is at or below this.
  double tolerance = 1e-6;
  /// When false every one of `max_iters` iterations runs regardless of the
  /// marginal error. Finite-difference checks need a fixed iteration count.
  bool early_stop = true;
};

/// One ranking problem: select the k largest of N correlation scores.
/// Scores are clamped to [-1, 1] on construction.
class TopKProblem {
 public:
  TopKProblem(std::span<const double> scores, std::size_t k,
              SinkhornOptions options = {});

  std::size_t size() const noexcept { return scores_.size(); }
  std::size_t k() const noexcept { return k_; }
  const SinkhornOptions& options() const noexcept { return options_; }
  std::span<const double> scores() const noexcept { return scores_; }
  /// 1 where the input score was inside [-1, 1] and passes gradient.
  std::span<const unsigned char> unclamped() const noexcept { return unclamped_; }

 private:
  std::vector<double> scores_;
  std::vector<unsigned char> unclamped_;
  std::size_t k_;
  SinkhornOptions options_;
};

/// Squared-distance cost to the two supports {-1, +1}:
/// row i is ((a_i + 1)^2, (a_i - 1)^2).
std::vector<std::array<double, 2>> build_cost(std::span<const double> scores);

/// Exactly k entries set: the k largest scores, ties toward the lower index.
std::vector<bool> hard_topk_oracle(std::span<const double> scores, std::size_t k);

/// Iterations end on the column scaling, so columns always carry nu and any
/// residual violation sits in the row sums (gamma can exceed 1 before convergence).
struct TransportPlan {
  std::vector<std::array<double, 2>> plan;  // N x 2
  std::size_t iterations_used = 0;
  double marginal_error = 0.0;
  bool converged = false;
};

/// Everything needed to replay the normalization sequence forward or in
/// reverse. Column log-potentials are recorded after every iteration; the row
/// potentials are a function of them and the cost, so they are recomputed.
struct SinkhornTape {
  std::vector<double> scores;            // clamped
  std::vector<unsigned char> unclamped;
  std::size_t k = 0;
  double lambda = 0.0;
  /// col_log_potentials[m] = (g_1, g_2) after iteration m; entry 0 is (0, 0).
  std::vector<std::array<double, 2>> col_log_potentials;
  /// k == N: the plan is fixed (every element selected) and carries no gradient.
  bool saturated = false;

  std::size_t iterations() const noexcept {
    return col_log_potentials.empty() ? 0 : col_log_potentials.size() - 1;
  }
};

std::pair<TransportPlan, SinkhornTape> sinkhorn_solve(const TopKProblem& problem);

/// Rebuilds the final plan from the tape alone.
TransportPlan replay_plan(const SinkhornTape& tape);

struct SoftSelection {
  std::vector<double> gamma;  // N * T_i2, sums to k, in [0, 1] once converged
  std::vector<bool> hard;
  std::size_t iterations_used = 0;
  double marginal_error = 0.0;
  bool converged = false;
};

SoftSelection soft_topk(const TopKProblem& problem);
/// Same as soft_topk, also handing back the tape for a backward pass.
std::pair<SoftSelection, SinkhornTape> soft_topk_with_tape(const TopKProblem& problem);

/// Reverse-mode pass through every recorded iteration, the exponential kernel
/// and the cost construction. Returns d(loss)/d(score) given d(loss)/d(gamma).
std::vector<double> soft_topk_backward(const SinkhornTape& tape,
                                       std::span<const double> upstream);

/// Allocation-free gamma solve for hot loops. `gamma` and `scratch` must hold
/// N and 5N doubles; scores must already lie in [-1, 1].
struct GammaSolveResult {
  std::size_t iterations_used;
  double marginal_error;
  bool converged;
};
GammaSolveResult solve_gamma_into(std::span<const double> scores, std::size_t k,
                                  const SinkhornOptions& options,
                                  std::span<double> gamma, std::span<double> scratch);

}  // namespace bilevel
