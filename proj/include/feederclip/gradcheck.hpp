#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace feederclip {

struct GradcheckRow {
  std::string op;
  std::size_t instances = 0;
  double max_relative_error = 0.0;
};

struct GradcheckOptions {
  std::size_t instances = 20;
  double step = 1e-5;
  std::uint64_t seed = 2024;
};

/// Compares tape gradients of every differentiable op against central finite
/// differences on random small instances. The error for one instance is
/// max|analytic - numeric| / max(|analytic|_inf, |numeric|_inf, 1e-6).
std::vector<GradcheckRow> run_gradcheck(const GradcheckOptions& options = {});

}  // namespace feederclip
