#include "bilevel/cli.hpp"

#include <CLI11.hpp>

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "bilevel/bench.hpp"
#include "bilevel/confidence_fusion.hpp"
#include "bilevel/position_encoding.hpp"
#include "bilevel/ras_correspondence.hpp"
#include "bilevel/sinkhorn_topk.hpp"
#include "bilevel/tensor_io.hpp"

namespace bilevel {
namespace {

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Io: return kExitIo;
    case ErrorKind::InvalidArgument: return kExitArgument;
    default: return kExitValidation;
  }
}

std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::fixed, 6);
  return std::string(buf, end);
}

std::string format_general(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general, 6);
  return std::string(buf, end);
}

std::vector<double> parse_scores(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto first = item.find_first_not_of(" \t");
    const auto last = item.find_last_not_of(" \t");
    if (first == std::string::npos) throw Error(ErrorKind::InvalidArgument, "empty score entry");
    item = item.substr(first, last - first + 1);
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      throw Error(ErrorKind::InvalidArgument, "cannot parse score '" + item + "'");
    }
    if (used != item.size() || !std::isfinite(v)) {
      throw Error(ErrorKind::InvalidArgument, "cannot parse score '" + item + "'");
    }
    out.push_back(v);
  }
  if (out.empty()) throw Error(ErrorKind::InvalidArgument, "no scores given");
  return out;
}

std::vector<BenchSize> parse_sizes(const std::string& text) {
  std::vector<BenchSize> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    BenchSize s{};
    char x1 = 0, x2 = 0;
    std::istringstream is(item);
    if (!(is >> s.height >> x1 >> s.width >> x2 >> s.channels) || x1 != 'x' || x2 != 'x' ||
        !is.eof() || s.height == 0 || s.width == 0 || s.channels == 0) {
      throw Error(ErrorKind::InvalidArgument, "size '" + item + "' is not HxWxD");
    }
    out.push_back(s);
  }
  if (out.empty()) throw Error(ErrorKind::InvalidArgument, "no sizes given");
  return out;
}

void validate(const RunConfig& c) {
  if (c.block_side == 0 || c.k == 0 || c.max_iters == 0) {
    throw Error(ErrorKind::InvalidArgument, "block side, k and iterations must be positive");
  }
  if (!(c.lambda > 0.0) || !(c.tolerance > 0.0) || !(c.tau > 0.0)) {
    throw Error(ErrorKind::InvalidArgument, "lambda, tolerance and tau must be positive");
  }
}

SinkhornOptions sinkhorn_options(const RunConfig& c) {
  return SinkhornOptions{c.lambda, c.max_iters, c.tolerance, true};
}

void add_config_flags(CLI::App* cmd, RunConfig& c, bool spe) {
  cmd->add_option("--block-side", c.block_side, "Block side s (b = s*s)")->capture_default_str();
  cmd->add_option("--k", c.k, "Blocks retrieved per query block")->capture_default_str();
  cmd->add_option("--lambda", c.lambda, "Kernel sharpness")->capture_default_str();
  cmd->add_option("--iters", c.max_iters, "Sinkhorn iteration cap")->capture_default_str();
  cmd->add_option("--tol", c.tolerance, "Sinkhorn marginal tolerance")->capture_default_str();
  cmd->add_option("--tau", c.tau, "Attention temperature")->capture_default_str();
  if (spe) cmd->add_option("--spe-weight", c.spe_weight, "Position channel scale")->capture_default_str();
  cmd->add_flag("--parallel", c.parallel, "Data-parallel correspondence construction");
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

struct WarpArgs {
  std::string cond, exemplar, mask, exemplar_mask, warped, cmap, correspondence;
  bool raw_pixels = false;
};

int cmd_warp(const WarpArgs& a, const RunConfig& c, std::ostream& out) {
  validate(c);
  // Every input is read before anything is written.
  const FeatureGrid cond = read_feature_grid(a.cond);
  const FeatureGrid exemplar = read_feature_grid(a.exemplar);
  std::optional<LabelMask> cond_mask;
  std::optional<LabelMask> ex_mask;
  if (!a.mask.empty()) cond_mask = read_label_mask(a.mask);
  if (!a.exemplar_mask.empty()) ex_mask = read_label_mask(a.exemplar_mask);
  if (!cond_mask && ex_mask) {
    throw Error(ErrorKind::InvalidArgument, "--exemplar-mask requires --mask");
  }
  if (cond_mask && !ex_mask) ex_mask = cond_mask;

  FeatureGrid query = a.raw_pixels ? l2_normalize_features(cond) : cond;
  FeatureGrid key = a.raw_pixels ? l2_normalize_features(exemplar) : exemplar;
  if (cond_mask) {
    if (cond_mask->height() != cond.height() || cond_mask->width() != cond.width() ||
        ex_mask->height() != exemplar.height() || ex_mask->width() != exemplar.width()) {
      throw Error(ErrorKind::Shape, "mask dimensions do not match the feature grids");
    }
    query = append_position(query, semantic_pe(*cond_mask), c.spe_weight);
    key = append_position(key, semantic_pe(*ex_mask), c.spe_weight);
  }

  AlignOptions opt;
  opt.block_side = c.block_side;
  opt.tau = c.tau;
  opt.rank.k = c.k;
  opt.rank.sinkhorn = sinkhorn_options(c);
  opt.rank.parallel = c.parallel;
  const Alignment al = align_ras(query, key, opt);
  const FeatureGrid warped = warp(al.correspondence, exemplar);
  const FeatureGrid cmap = confidence_map(al.ranking, al.partition);

  write_tensor(warped, a.warped);
  write_tensor(cmap, a.cmap);
  write_correspondence_csv(al.correspondence, a.correspondence);
  out << "features " << al.correspondence.query_count() << ", blocks "
      << al.partition.block_count() << ", entries " << entry_count(al.correspondence)
      << ", ranking scores " << al.ranking.scored_pairs() << ", unconverged solves "
      << al.ranking.unconverged << "\n";
  return kExitOk;
}

int cmd_topk(const std::string& scores_text, const RunConfig& c, std::ostream& out) {
  validate(c);
  const auto scores = parse_scores(scores_text);
  const TopKProblem problem(scores, c.k, sinkhorn_options(c));
  const SoftSelection sel = soft_topk(problem);
  out << "gamma:";
  for (std::size_t i = 0; i < sel.gamma.size(); ++i) {
    out << (i ? "," : " ") << format_double(sel.gamma[i]);
  }
  out << "\nhard:";
  for (std::size_t i = 0; i < sel.hard.size(); ++i) out << (i ? "," : " ") << (sel.hard[i] ? 1 : 0);
  out << "\niterations: " << sel.iterations_used
      << "\nmarginal_error: " << format_general(sel.marginal_error)
      << "\nconverged: " << (sel.converged ? "yes" : "no") << "\n";
  return kExitOk;
}

int cmd_gradcheck(const GradcheckOptions& g, std::ostream& out) {
  if (g.n == 0 || g.k == 0 || g.k > g.n) throw Error(ErrorKind::InvalidArgument, "need N >= k >= 1");
  if (!(g.lambda > 0.0)) throw Error(ErrorKind::InvalidArgument, "lambda must be positive");
  if (g.trials == 0) throw Error(ErrorKind::InvalidArgument, "trials must be positive");
  if (g.stencil != 2 && g.stencil != 4) throw Error(ErrorKind::InvalidArgument, "stencil must be 2 or 4");
  if (!(g.step > 0.0)) throw Error(ErrorKind::InvalidArgument, "step must be positive");
  const GradcheckReport r = run_gradcheck(g);
  out << "gradcheck N=" << g.n << " k=" << g.k << " lambda=" << format_general(g.lambda)
      << " trials=" << g.trials << " step=" << format_general(g.step) << " stencil=" << g.stencil
      << "\ncompared components: " << r.compared
      << "\nmax |gradient|: " << format_general(r.max_abs_gradient)
      << "\nmax relative error: " << format_general(r.max_relative_error)
      << "\nresult: " << (r.passed ? "PASS" : "FAIL") << "\n";
  return r.passed ? kExitOk : kExitCheckFailed;
}

int cmd_spe(const std::string& mask_path, const std::string& out_path, bool vanilla,
            std::ostream& out) {
  const LabelMask mask = read_label_mask(mask_path);
  const FeatureGrid pe = vanilla ? vanilla_pe(mask.height(), mask.width()) : semantic_pe(mask);
  write_tensor(pe, out_path);
  out << "wrote " << pe.height() << "x" << pe.width() << "x2 position channels\n";
  return kExitOk;
}

int cmd_fuse(const std::string& cond_path, const std::string& warped_path,
             const std::string& cmap_path, const std::string& out_path, std::ostream& out) {
  const FeatureGrid cond = read_feature_grid(cond_path);
  const FeatureGrid warped = read_feature_grid(warped_path);
  const FeatureGrid cmap = read_feature_grid(cmap_path);
  const FeatureGrid fused =
      cmap.channels() == 1 ? fuse(cond, warped, cmap) : fuse_multichannel(cond, warped, cmap);
  write_tensor(fused, out_path);
  out << "fused " << fused.height() << "x" << fused.width() << "x" << fused.channels()
      << (cmap.channels() == 1 ? " (single-channel map)\n" : " (multi-channel map)\n");
  return kExitOk;
}

int cmd_bench(const std::string& sizes, const RunConfig& c, std::size_t reps, bool no_timing,
              const std::string& out_path, std::ostream& out) {
  validate(c);
  if (reps == 0) throw Error(ErrorKind::InvalidArgument, "repetitions must be positive");
  BenchOptions opt;
  opt.sizes = parse_sizes(sizes);
  opt.block_side = c.block_side;
  opt.k = c.k;
  opt.tau = c.tau;
  opt.sinkhorn = sinkhorn_options(c);
  opt.repetitions = reps;
  opt.seed = c.seed;
  opt.parallel = c.parallel;
  opt.timing = !no_timing;
  for (const auto& s : opt.sizes) {
    (void)BlockPartition(s.height, s.width, c.block_side);
  }
  const std::string csv = bench_csv(run_bench(opt));
  if (out_path.empty()) {
    out << csv;
  } else {
    write_text(out_path, csv);
  }
  return kExitOk;
}

}  // namespace

GradcheckReport run_gradcheck(const GradcheckOptions& g) {
  std::mt19937_64 rng(g.seed);
  auto uniform = [&](double lo, double hi) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    return lo + (hi - lo) * u;
  };
  // Keep every stencil point inside [-1, 1] so clamping never kicks in.
  const double margin = 1.0 - 2.0 * g.step;

  GradcheckReport report;
  for (std::size_t t = 0; t < g.trials; ++t) {
    std::vector<double> scores(g.n);
    std::vector<double> upstream(g.n);
    for (auto& a : scores) a = uniform(-margin, margin);
    for (auto& w : upstream) w = uniform(-1.0, 1.0);

    SinkhornOptions base{g.lambda, g.max_iters, g.tolerance, true};
    auto [sel, tape] = soft_topk_with_tape(TopKProblem(scores, g.k, base));
    const auto grad = soft_topk_backward(tape, upstream);

    SinkhornOptions fixed{g.lambda, std::max<std::size_t>(1, sel.iterations_used), g.tolerance, false};
    auto loss = [&](std::size_t i, double delta) {
      std::vector<double> s = scores;
      s[i] += delta;
      const auto gamma = soft_topk(TopKProblem(s, g.k, fixed)).gamma;
      double l = 0.0;
      for (std::size_t j = 0; j < g.n; ++j) l += upstream[j] * gamma[j];
      return l;
    };

    for (std::size_t i = 0; i < g.n; ++i) {
      const double h = g.step;
      double fd = 0.0;
      if (g.stencil == 2) {
        fd = (loss(i, h) - loss(i, -h)) / (2.0 * h);
      } else {
        fd = (-loss(i, 2 * h) + 8.0 * loss(i, h) - 8.0 * loss(i, -h) + loss(i, -2 * h)) / (12.0 * h);
      }
      const double mag = std::max(std::abs(fd), std::abs(grad[i]));
      report.max_abs_gradient = std::max(report.max_abs_gradient, std::abs(grad[i]));
      if (mag <= 1e-6) continue;
      ++report.compared;
      report.max_relative_error = std::max(report.max_relative_error, std::abs(grad[i] - fd) / mag);
    }
  }
  report.passed = report.max_relative_error < 1e-3;
  return report;
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Bi-level feature alignment: soft top-k ranking, block attention, warping"};
  app.require_subcommand(1);

  RunConfig config;
  WarpArgs warp_args;
  auto* warp_cmd = app.add_subcommand("warp", "Align an exemplar to a conditional input");
  warp_cmd->add_option("--cond", warp_args.cond, "Conditional features (.ftn)")->required();
  warp_cmd->add_option("--exemplar", warp_args.exemplar, "Exemplar features (.ftn)")->required();
  warp_cmd->add_option("--mask", warp_args.mask, "Label mask; appends semantic position channels");
  warp_cmd->add_option("--exemplar-mask", warp_args.exemplar_mask,
                       "Exemplar label mask (defaults to --mask)");
  warp_cmd->add_option("--warped", warp_args.warped, "Output warped exemplar (.ftn)")->required();
  warp_cmd->add_option("--cmap", warp_args.cmap, "Output confidence map (.ftn)")->required();
  warp_cmd->add_option("--correspondence", warp_args.correspondence, "Output correspondence CSV")
      ->required();
  warp_cmd->add_flag("--raw-pixels", warp_args.raw_pixels,
                     "L2-normalize input channels before matching");
  add_config_flags(warp_cmd, config, true);

  std::string scores;
  auto* topk_cmd = app.add_subcommand("topk", "Soft top-k selection of a score list");
  topk_cmd->add_option("--scores", scores, "Comma-separated scores in [-1, 1]")->required();
  topk_cmd->add_option("--k", config.k, "Elements to select")->capture_default_str();
  topk_cmd->add_option("--lambda", config.lambda, "Kernel sharpness")->capture_default_str();
  topk_cmd->add_option("--iters", config.max_iters, "Sinkhorn iteration cap")->capture_default_str();
  topk_cmd->add_option("--tol", config.tolerance, "Marginal tolerance")->capture_default_str();

  GradcheckOptions grad;
  auto* grad_cmd = app.add_subcommand("gradcheck", "Check soft top-k gradients numerically");
  grad_cmd->add_option("--n", grad.n, "Scores per instance")->capture_default_str();
  grad_cmd->add_option("--k", grad.k, "Elements to select")->capture_default_str();
  grad_cmd->add_option("--lambda", grad.lambda, "Kernel sharpness")->capture_default_str();
  grad_cmd->add_option("--trials", grad.trials, "Random instances")->capture_default_str();
  grad_cmd->add_option("--seed", grad.seed, "RNG seed")->capture_default_str();
  grad_cmd->add_option("--iters", grad.max_iters, "Sinkhorn iteration cap")->capture_default_str();
  grad_cmd->add_option("--step", grad.step, "Finite-difference step")->capture_default_str();
  grad_cmd->add_option("--stencil", grad.stencil, "Central stencil order (2 or 4)")
      ->capture_default_str();

  std::string spe_mask, spe_out;
  bool spe_vanilla = false;
  auto* spe_cmd = app.add_subcommand("spe", "Semantic position channels from a label mask");
  spe_cmd->add_option("--mask", spe_mask, "Label mask (.ftn)")->required();
  spe_cmd->add_option("--out", spe_out, "Output position channels (.ftn)")->required();
  spe_cmd->add_flag("--vanilla", spe_vanilla, "Single image-wide frame instead");

  std::string fuse_cond, fuse_warped, fuse_cmap, fuse_out;
  auto* fuse_cmd = app.add_subcommand("fuse", "Confidence-weighted feature fusion");
  fuse_cmd->add_option("--cond", fuse_cond, "Conditional features (.ftn)")->required();
  fuse_cmd->add_option("--warped", fuse_warped, "Warped exemplar features (.ftn)")->required();
  fuse_cmd->add_option("--cmap", fuse_cmap, "Confidence map, 1 or d channels (.ftn)")->required();
  fuse_cmd->add_option("--out", fuse_out, "Output fused features (.ftn)")->required();

  std::string bench_sizes = "32x32x8,64x64x8,128x128x8";
  std::string bench_out;
  std::size_t bench_reps = 1;
  bool bench_no_timing = false;
  auto* bench_cmd = app.add_subcommand("bench", "Dense vs RAS memory and time benchmark");
  bench_cmd->add_option("--sizes", bench_sizes, "Comma-separated HxWxD sizes")->capture_default_str();
  bench_cmd->add_option("--reps", bench_reps, "Timing repetitions")->capture_default_str();
  bench_cmd->add_option("--seed", config.seed, "Feature RNG seed")->capture_default_str();
  bench_cmd->add_option("--out", bench_out, "CSV path (stdout when omitted)");
  bench_cmd->add_flag("--no-timing", bench_no_timing, "Write 0 in the ms column");
  add_config_flags(bench_cmd, config, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitArgument;
  }

  try {
    if (*warp_cmd) return cmd_warp(warp_args, config, out);
    if (*topk_cmd) return cmd_topk(scores, config, out);
    if (*grad_cmd) return cmd_gradcheck(grad, out);
    if (*spe_cmd) return cmd_spe(spe_mask, spe_out, spe_vanilla, out);
    if (*fuse_cmd) return cmd_fuse(fuse_cond, fuse_warped, fuse_cmap, fuse_out, out);
    if (*bench_cmd) return cmd_bench(bench_sizes, config, bench_reps, bench_no_timing, bench_out, out);
  } catch (const Error& e) {
    err << "error (" << to_string(e.kind()) << "): " << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const std::bad_alloc&) {
    err << "error: out of memory\n";
    return kExitValidation;
  }
  return kExitArgument;
}

}  // namespace bilevel
