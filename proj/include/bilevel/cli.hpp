#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>

namespace bilevel {

enum ExitCode : int {
  kExitOk = 0,
  kExitArgument = 2,
  kExitIo = 3,
  kExitValidation = 4,
  kExitCheckFailed = 5,
};

/// Knobs shared by the subcommands. Block side, k and the 128 x 128 working
/// size follow the reference configuration; the rest are local choices.
struct RunConfig {
  std::size_t block_side = 2;
  std::size_t k = 3;
  double lambda = 50.0;
  std::size_t max_iters = 100;
  double tolerance = 1e-6;
  double tau = 0.07;
  float spe_weight = 1.0f;
  std::uint64_t seed = 0;
  bool parallel = false;
};

struct GradcheckOptions {
  std::size_t n = 8;
  std::size_t k = 3;
  double lambda = 20.0;
  std::size_t trials = 50;
  std::uint64_t seed = 0;
  std::size_t max_iters = 100;
  double tolerance = 1e-6;
  double step = 1e-3;
  /// 2: (f(a+h) - f(a-h)) / 2h. 4: the five-point central stencil.
  int stencil = 4;
};

struct GradcheckReport {
  double max_relative_error = 0.0;
  double max_abs_gradient = 0.0;
  std::size_t compared = 0;  // components above the 1e-6 magnitude floor
  bool passed = false;
};

/// Reverse-mode gradients of a random linear loss of the soft selection
/// against central finite differences, each trial at the iteration count its
/// own forward solve used.
GradcheckReport run_gradcheck(const GradcheckOptions& options);

/// Entry point for the `bilevel` tool: warp, topk, gradcheck, spe, fuse, bench.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace bilevel
