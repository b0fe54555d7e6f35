#include "bilevel/sinkhorn_topk.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "bilevel/grid.hpp"

namespace bilevel {
namespace {

// Column sums below this are recomputed in log space.
constexpr double kTinySum = 1e-280;

// Column 0 of the plan transports to support -1 (rejected), column 1 to +1
// (selected).
constexpr std::size_t kRej = 0;
constexpr std::size_t kSel = 1;

struct RowBuffers {
  std::span<double> sel;    // sigma_i: selected share of row i after row scaling
  std::span<double> rej;    // 1 - sigma_i, computed directly for accuracy
  std::span<double> p_sel;  // sel_i / sum(sel)
  std::span<double> p_rej;  // rej_i / sum(rej)
};

struct LogColumnSums {
  double sel;
  double rej;
};

// Kernel logit difference between the two columns for each row:
// lambda * (C_i,rej - C_i,sel).
void build_drive(std::span<const double> scores, double lambda, std::span<double> drive) {
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const double a = scores[i];
    const double c_rej = (a + 1.0) * (a + 1.0);
    const double c_sel = (a - 1.0) * (a - 1.0);
    drive[i] = lambda * (c_rej - c_sel);
  }
}

double log_sigmoid(double x) {
  return x >= 0.0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
}

// Row normalization against column potentials whose difference is h, followed
// by the column sums the next column normalization needs. After this call the
// column-normalized plan is T_i,sel = nu_sel * p_sel_i, T_i,rej = nu_rej * p_rej_i.
LogColumnSums normalize_rows(std::span<const double> drive, double h, const RowBuffers& buf) {
  const std::size_t n = drive.size();
  double sum_sel = 0.0;
  double sum_rej = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = drive[i] + h;
    const double e = std::exp(-std::abs(x));
    const double hi = 1.0 / (1.0 + e);
    const double lo = e * hi;
    buf.sel[i] = x >= 0.0 ? hi : lo;
    buf.rej[i] = x >= 0.0 ? lo : hi;
    sum_sel += buf.sel[i];
    sum_rej += buf.rej[i];
  }
  if (sum_sel > kTinySum && sum_rej > kTinySum) {
    const double inv_sel = 1.0 / sum_sel;
    const double inv_rej = 1.0 / sum_rej;
    for (std::size_t i = 0; i < n; ++i) {
      buf.p_sel[i] = buf.sel[i] * inv_sel;
      buf.p_rej[i] = buf.rej[i] * inv_rej;
    }
    return {std::log(sum_sel), std::log(sum_rej)};
  }

  // A whole column underflowed; redo the sums in log space.
  double max_sel = -std::numeric_limits<double>::infinity();
  double max_rej = max_sel;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = drive[i] + h;
    buf.p_sel[i] = log_sigmoid(x);
    buf.p_rej[i] = log_sigmoid(-x);
    max_sel = std::max(max_sel, buf.p_sel[i]);
    max_rej = std::max(max_rej, buf.p_rej[i]);
  }
  double acc_sel = 0.0;
  double acc_rej = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    acc_sel += std::exp(buf.p_sel[i] - max_sel);
    acc_rej += std::exp(buf.p_rej[i] - max_rej);
  }
  const LogColumnSums lse{max_sel + std::log(acc_sel), max_rej + std::log(acc_rej)};
  for (std::size_t i = 0; i < n; ++i) {
    buf.p_sel[i] = std::exp(buf.p_sel[i] - lse.sel);
    buf.p_rej[i] = std::exp(buf.p_rej[i] - lse.rej);
  }
  return lse;
}

double marginal_error(const RowBuffers& buf, double mu, double nu_rej, double nu_sel) {
  double err = 0.0;
  double col_rej = 0.0;
  double col_sel = 0.0;
  for (std::size_t i = 0; i < buf.p_sel.size(); ++i) {
    const double t_rej = nu_rej * buf.p_rej[i];
    const double t_sel = nu_sel * buf.p_sel[i];
    err = std::max(err, std::abs(t_rej + t_sel - mu));
    col_rej += t_rej;
    col_sel += t_sel;
  }
  err = std::max(err, std::abs(col_rej - nu_rej));
  return std::max(err, std::abs(col_sel - nu_sel));
}

void validate_options(const SinkhornOptions& o) {
  if (!(o.lambda > 0.0) || !std::isfinite(o.lambda)) {
    throw Error(ErrorKind::InvalidArgument, "lambda must be positive and finite");
  }
  if (o.max_iters == 0) throw Error(ErrorKind::InvalidArgument, "max_iters must be positive");
  if (!(o.tolerance > 0.0)) throw Error(ErrorKind::InvalidArgument, "tolerance must be positive");
}

// Shared forward loop: row normalization then column normalization per
// iteration, leaving the column-normalized plan in `scratch`. `tape` may be null.
GammaSolveResult run_sinkhorn(std::span<const double> scores, std::size_t k,
                              const SinkhornOptions& options, std::span<double> scratch,
                              std::vector<std::array<double, 2>>* tape) {
  const std::size_t n = scores.size();
  auto drive = scratch.subspan(0, n);
  const RowBuffers buf{scratch.subspan(n, n), scratch.subspan(2 * n, n),
                       scratch.subspan(3 * n, n), scratch.subspan(4 * n, n)};
  build_drive(scores, options.lambda, drive);

  const double mu = 1.0 / static_cast<double>(n);
  const double nu_rej = static_cast<double>(n - k) / static_cast<double>(n);
  const double nu_sel = static_cast<double>(k) / static_cast<double>(n);
  const double log_mass_rej = std::log(static_cast<double>(n - k));
  const double log_mass_sel = std::log(static_cast<double>(k));

  std::array<double, 2> g{0.0, 0.0};
  if (tape) tape->push_back(g);
  GammaSolveResult result{0, std::numeric_limits<double>::infinity(), false};
  for (std::size_t m = 1; m <= options.max_iters; ++m) {
    const auto sums = normalize_rows(drive, g[kSel] - g[kRej], buf);
    // Column scaling to nu_j: log(nu_j) - log(mu * sum_j) = log(mass_j) - log(sum_j).
    g[kRej] += log_mass_rej - sums.rej;
    g[kSel] += log_mass_sel - sums.sel;
    if (tape) tape->push_back(g);
    result.iterations_used = m;
    result.marginal_error = marginal_error(buf, mu, nu_rej, nu_sel);
    if (options.early_stop && result.marginal_error <= options.tolerance) break;
  }
  result.converged = result.marginal_error <= options.tolerance;
  return result;
}

}  // namespace

TopKProblem::TopKProblem(std::span<const double> scores, std::size_t k,
                         SinkhornOptions options)
    : k_(k), options_(options) {
  if (scores.empty()) throw Error(ErrorKind::InvalidArgument, "top-k needs at least one score");
  if (k < 1 || k > scores.size()) {
    throw Error(ErrorKind::InvalidArgument, "k must lie in [1, N]");
  }
  validate_options(options_);
  scores_.reserve(scores.size());
  unclamped_.reserve(scores.size());
  for (double a : scores) {
    if (std::isnan(a)) throw Error(ErrorKind::NonFinite, "score is NaN");
    scores_.push_back(std::clamp(a, -1.0, 1.0));
    unclamped_.push_back(a >= -1.0 && a <= 1.0 ? 1 : 0);
  }
}

std::vector<std::array<double, 2>> build_cost(std::span<const double> scores) {
  std::vector<std::array<double, 2>> cost(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const double a = scores[i];
    cost[i] = {(a + 1.0) * (a + 1.0), (a - 1.0) * (a - 1.0)};
  }
  return cost;
}

std::vector<bool> hard_topk_oracle(std::span<const double> scores, std::size_t k) {
  if (k < 1 || k > scores.size()) {
    throw Error(ErrorKind::InvalidArgument, "k must lie in [1, N]");
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<bool> picked(scores.size(), false);
  for (std::size_t i = 0; i < k; ++i) picked[order[i]] = true;
  return picked;
}

GammaSolveResult solve_gamma_into(std::span<const double> scores, std::size_t k,
                                  const SinkhornOptions& options, std::span<double> gamma,
                                  std::span<double> scratch) {
  const std::size_t n = scores.size();
  if (k == n) {
    std::fill(gamma.begin(), gamma.end(), 1.0);
    return {0, 0.0, true};
  }
  const auto result = run_sinkhorn(scores, k, options, scratch, nullptr);
  const auto p_sel = scratch.subspan(3 * n, n);
  for (std::size_t i = 0; i < n; ++i) gamma[i] = static_cast<double>(k) * p_sel[i];
  return result;
}

TransportPlan replay_plan(const SinkhornTape& tape) {
  const std::size_t n = tape.scores.size();
  TransportPlan out;
  out.plan.resize(n);
  const double mu = 1.0 / static_cast<double>(n);
  if (tape.saturated) {
    for (auto& row : out.plan) row = {0.0, mu};
    out.converged = true;
    return out;
  }
  std::vector<double> scratch(5 * n);
  auto drive = std::span<double>(scratch).subspan(0, n);
  build_drive(tape.scores, tape.lambda, drive);
  const RowBuffers rows{std::span<double>(scratch).subspan(n, n),
                        std::span<double>(scratch).subspan(2 * n, n),
                        std::span<double>(scratch).subspan(3 * n, n),
                        std::span<double>(scratch).subspan(4 * n, n)};
  const std::size_t m = tape.iterations();
  const auto& g = tape.col_log_potentials[m - 1];
  normalize_rows(drive, g[kSel] - g[kRej], rows);
  const double nu_rej = static_cast<double>(n - tape.k) / static_cast<double>(n);
  const double nu_sel = static_cast<double>(tape.k) / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    out.plan[i] = {nu_rej * rows.p_rej[i], nu_sel * rows.p_sel[i]};
  }
  out.iterations_used = m;
  out.marginal_error = marginal_error(rows, mu, nu_rej, nu_sel);
  return out;
}

namespace {

// Solve recording the tape. gamma = k * p_sel, the same expression the
// allocation-free path uses, rather than N * T_i,sel.
std::pair<TransportPlan, SinkhornTape> solve_recorded(const TopKProblem& problem,
                                                      std::vector<double>& gamma) {
  const std::size_t n = problem.size();
  const std::size_t k = problem.k();
  SinkhornTape tape;
  tape.scores.assign(problem.scores().begin(), problem.scores().end());
  tape.unclamped.assign(problem.unclamped().begin(), problem.unclamped().end());
  tape.k = k;
  tape.lambda = problem.options().lambda;

  TransportPlan plan;
  if (k == n) {
    tape.saturated = true;
    tape.col_log_potentials.push_back({0.0, 0.0});
    plan = replay_plan(tape);
    gamma.assign(n, 1.0);
    return {std::move(plan), std::move(tape)};
  }

  std::vector<double> scratch(5 * n);
  tape.col_log_potentials.reserve(problem.options().max_iters + 1);
  const auto result =
      run_sinkhorn(tape.scores, k, problem.options(), scratch, &tape.col_log_potentials);

  const double nu_rej = static_cast<double>(n - k) / static_cast<double>(n);
  const double nu_sel = static_cast<double>(k) / static_cast<double>(n);
  plan.plan.resize(n);
  gamma.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    plan.plan[i] = {nu_rej * scratch[4 * n + i], nu_sel * scratch[3 * n + i]};
    gamma[i] = static_cast<double>(k) * scratch[3 * n + i];
  }
  plan.iterations_used = result.iterations_used;
  plan.marginal_error = result.marginal_error;
  plan.converged = result.converged;
  return {std::move(plan), std::move(tape)};
}

}  // namespace

std::pair<TransportPlan, SinkhornTape> sinkhorn_solve(const TopKProblem& problem) {
  std::vector<double> gamma;
  return solve_recorded(problem, gamma);
}

std::pair<SoftSelection, SinkhornTape> soft_topk_with_tape(const TopKProblem& problem) {
  SoftSelection sel;
  auto [plan, tape] = solve_recorded(problem, sel.gamma);
  sel.hard = hard_topk_oracle(problem.scores(), problem.k());
  sel.iterations_used = plan.iterations_used;
  sel.marginal_error = plan.marginal_error;
  sel.converged = plan.converged;
  return {std::move(sel), std::move(tape)};
}

SoftSelection soft_topk(const TopKProblem& problem) {
  return soft_topk_with_tape(problem).first;
}

std::vector<double> soft_topk_backward(const SinkhornTape& tape,
                                       std::span<const double> upstream) {
  const std::size_t n = tape.scores.size();
  if (upstream.size() != n) {
    throw Error(ErrorKind::Shape, "upstream gradient length does not match the tape");
  }
  if (tape.unclamped.size() != n || tape.col_log_potentials.empty()) {
    throw Error(ErrorKind::Shape, "malformed tape");
  }
  std::vector<double> grad(n, 0.0);
  if (tape.saturated) return grad;

  std::vector<double> scratch(5 * n);
  std::span<double> s(scratch);
  auto drive = s.subspan(0, n);
  const RowBuffers rows{s.subspan(n, n), s.subspan(2 * n, n), s.subspan(3 * n, n),
                        s.subspan(4 * n, n)};
  build_drive(tape.scores, tape.lambda, drive);

  const double k = static_cast<double>(tape.k);
  std::vector<double> drive_bar(n, 0.0);
  const std::size_t iters = tape.iterations();
  auto h_before = [&](std::size_t m) {
    const auto& g = tape.col_log_potentials[m - 1];
    return g[kSel] - g[kRej];
  };

  // Final iteration: gamma_i = k * p_sel_i with p_sel = sigma / sum(sigma).
  normalize_rows(drive, h_before(iters), rows);
  double w_mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) w_mean += upstream[i] * rows.p_sel[i];
  double h_bar = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double x_bar = k * rows.rej[i] * rows.p_sel[i] * (upstream[i] - w_mean);
    drive_bar[i] += x_bar;
    h_bar += x_bar;
  }

  // Earlier iterations: h_m = h_{m-1} + const - log sum(sigma) + log sum(1 - sigma),
  // so dh_m/dx_i = -((1 - sigma_i) p_sel_i + sigma_i p_rej_i).
  for (std::size_t m = iters - 1; m >= 1; --m) {
    normalize_rows(drive, h_before(m), rows);
    double carry = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double x_bar = -h_bar * (rows.rej[i] * rows.p_sel[i] + rows.sel[i] * rows.p_rej[i]);
      drive_bar[i] += x_bar;
      carry += x_bar;
    }
    h_bar += carry;
  }

  // drive = lambda * (C_rej - C_sel), C_rej = (a + 1)^2, C_sel = (a - 1)^2.
  for (std::size_t i = 0; i < n; ++i) {
    if (!tape.unclamped[i]) continue;
    const double a = tape.scores[i];
    const double cost_rej_bar = tape.lambda * drive_bar[i];
    const double cost_sel_bar = -tape.lambda * drive_bar[i];
    grad[i] = cost_rej_bar * 2.0 * (a + 1.0) + cost_sel_bar * 2.0 * (a - 1.0);
  }
  return grad;
}

}  // namespace bilevel
