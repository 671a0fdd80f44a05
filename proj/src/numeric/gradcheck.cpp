#include "feederclip/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>

#include "feederclip/encoders.hpp"
#include "feederclip/ops.hpp"
#include "feederclip/random.hpp"

namespace feederclip {
namespace {

using Inputs = std::vector<Tensor>;
using Build = std::function<Var(Tape&, const std::vector<Var>&)>;
using Draw = std::function<Inputs(Rng&)>;

struct Case {
  std::string op;
  Draw draw;
  Build build;
};

Tensor uniform(std::size_t rows, std::size_t cols, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor t = Tensor::matrix(rows, cols);
  for (double& v : t.storage()) v = d(rng);
  return t;
}

// Entries bounded away from zero so that finite differences never straddle a
// kink.
Tensor away_from_zero(std::size_t rows, std::size_t cols, Rng& rng) {
  std::uniform_real_distribution<double> d(0.1, 1.0);
  std::bernoulli_distribution sign(0.5);
  Tensor t = Tensor::matrix(rows, cols);
  for (double& v : t.storage()) v = sign(rng) ? d(rng) : -d(rng);
  return t;
}

Tensor random_adjacency(std::size_t n, Rng& rng) {
  // Random tree plus nothing else: each node attaches to an earlier one.
  Tensor a = Tensor::matrix(n, n);
  for (std::size_t i = 1; i < n; ++i) {
    const std::size_t p = std::uniform_int_distribution<std::size_t>(0, i - 1)(rng);
    a(i, p) = a(p, i) = 1.0;
  }
  return a;
}

// <R, out> for a fixed random R, reducing any output to a scalar.
Var project(Var out, const Tensor& weights) {
  double acc = 0.0;
  const Tensor& y = out.value();
  for (std::size_t i = 0; i < y.size(); ++i) acc += weights[i] * y[i];
  return out.tape().record(Tensor::scalar(acc), {out},
                           [out, weights](Tape& t, const Tensor& g, const Tensor&) {
                             Tensor& go = t.grad(out);
                             for (std::size_t i = 0; i < go.size(); ++i) go[i] += g[0] * weights[i];
                           });
}

std::vector<Case> cases() {
  std::vector<Case> out;
  auto unary = [&](std::string name, std::function<Var(Var)> f, bool kinked = false) {
    out.push_back({std::move(name),
                   [kinked](Rng& r) {
                     return Inputs{kinked ? away_from_zero(3, 4, r) : uniform(3, 4, r)};
                   },
                   [f](Tape&, const std::vector<Var>& v) { return f(v[0]); }});
  };

  out.push_back({"matmul", [](Rng& r) { return Inputs{uniform(3, 4, r), uniform(4, 2, r)}; },
                 [](Tape&, const std::vector<Var>& v) { return matmul(v[0], v[1]); }});
  unary("transpose", [](Var a) { return transpose(a); });
  out.push_back({"add", [](Rng& r) { return Inputs{uniform(3, 4, r), uniform(3, 4, r)}; },
                 [](Tape&, const std::vector<Var>& v) { return add(v[0], v[1]); }});
  out.push_back({"add_row_broadcast",
                 [](Rng& r) { return Inputs{uniform(3, 4, r), uniform(1, 4, r)}; },
                 [](Tape&, const std::vector<Var>& v) { return add(v[0], v[1]); }});
  out.push_back({"sub", [](Rng& r) { return Inputs{uniform(3, 4, r), uniform(3, 4, r)}; },
                 [](Tape&, const std::vector<Var>& v) { return sub(v[0], v[1]); }});
  out.push_back({"mul", [](Rng& r) { return Inputs{uniform(3, 4, r), uniform(3, 4, r)}; },
                 [](Tape&, const std::vector<Var>& v) { return mul(v[0], v[1]); }});
  unary("scale", [](Var a) { return scale(a, -1.7); });
  out.push_back({"scale_by_variable",
                 [](Rng& r) { return Inputs{uniform(3, 4, r), Tensor::scalar(uniform(1, 1, r)[0])}; },
                 [](Tape&, const std::vector<Var>& v) { return scale(v[0], v[1]); }});
  unary("relu", [](Var a) { return relu(a); }, true);
  unary("tanh", [](Var a) { return tanh(a); });
  out.push_back({"sigmoid", [](Rng& r) { return Inputs{uniform(3, 4, r, -6.0, 6.0)}; },
                 [](Tape&, const std::vector<Var>& v) { return sigmoid(v[0]); }});
  unary("exp", [](Var a) { return exp(a); });
  out.push_back({"row_softmax", [](Rng& r) { return Inputs{uniform(3, 4, r, -3.0, 3.0)}; },
                 [](Tape&, const std::vector<Var>& v) { return row_softmax(v[0]); }});
  unary("l2_normalize_rows", [](Var a) { return l2_normalize_rows(a); }, true);
  unary("mean_pool_rows", [](Var a) { return mean_pool_rows(a); });
  out.push_back({"segment_mean_rows", [](Rng& r) { return Inputs{uniform(6, 3, r)}; },
                 [](Tape&, const std::vector<Var>& v) { return segment_mean_rows(v[0], 3); }});
  out.push_back({"block_propagate",
                 [](Rng& r) {
                   return Inputs{uniform(5, 3, r), normalize_adjacency(random_adjacency(2, r)),
                                 normalize_adjacency(random_adjacency(3, r))};
                 },
                 [](Tape& t, const std::vector<Var>& v) {
                   // Blocks live on the tape as constants.
                   std::vector<const Tensor*> blocks{&t.value(v[1]), &t.value(v[2])};
                   return block_propagate(blocks, v[0]);
                 }});
  out.push_back({"embedding_mean", [](Rng& r) { return Inputs{uniform(5, 3, r)}; },
                 [](Tape&, const std::vector<Var>& v) {
                   return embedding_mean(v[0], {{0, 2}, {4}, {1, 1, 3}});
                 }});
  out.push_back({"cross_entropy_with_logits",
                 [](Rng& r) { return Inputs{uniform(4, 4, r, -2.0, 2.0)}; },
                 [](Tape&, const std::vector<Var>& v) {
                   std::vector<unsigned char> mask(16, 0);
                   mask[0 * 4 + 2] = 1;
                   mask[3 * 4 + 1] = 1;
                   return cross_entropy_with_logits(v[0], {0, 1, 2, 3}, mask);
                 }});
  out.push_back({"binary_cross_entropy_with_logits",
                 [](Rng& r) {
                   Tensor targets = uniform(3, 4, r, 0.0, 1.0);
                   for (double& x : targets.storage()) x = x > 0.5 ? 1.0 : 0.0;
                   return Inputs{uniform(3, 4, r, -4.0, 4.0), targets, uniform(3, 4, r, 0.5, 2.0)};
                 },
                 [](Tape& t, const std::vector<Var>& v) {
                   return binary_cross_entropy_with_logits(v[0], t.value(v[1]), t.value(v[2]));
                 }});
  out.push_back({"mse", [](Rng& r) { return Inputs{uniform(3, 4, r), uniform(3, 4, r)}; },
                 [](Tape&, const std::vector<Var>& v) { return mse(v[0], v[1]); }});
  out.push_back({"gaussian_kl_to_standard",
                 [](Rng& r) { return Inputs{uniform(4, 3, r), uniform(4, 3, r)}; },
                 [](Tape&, const std::vector<Var>& v) {
                   return gaussian_kl_to_standard(v[0], v[1], 2);
                 }});
  out.push_back({"adjacency_reconstruction_loss",
                 [](Rng& r) {
                   return Inputs{uniform(7, 3, r), random_adjacency(3, r), random_adjacency(4, r)};
                 },
                 [](Tape& t, const std::vector<Var>& v) {
                   std::vector<const Tensor*> adj{&t.value(v[1]), &t.value(v[2])};
                   return adjacency_reconstruction_loss(v[0], adj);
                 }});
  return out;
}

// Inputs that are differentiated; the rest are passed as constants.
std::size_t differentiable_inputs(const std::string& op) {
  if (op == "block_propagate" || op == "binary_cross_entropy_with_logits" ||
      op == "adjacency_reconstruction_loss") {
    return 1;
  }
  return 0;  // 0 means all
}

double evaluate(const Case& c, const Inputs& inputs, const Tensor& weights) {
  Tape tape;
  std::vector<Var> vars;
  for (const Tensor& x : inputs) vars.push_back(tape.constant(x));
  Var y = c.build(tape, vars);
  return y.value().rank() == 0 ? y.value()[0] : project(y, weights).value()[0];
}

// FNV-1a, so case seeds do not depend on the standard library's std::hash.
std::uint64_t name_hash(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) h = (h ^ c) * 0x100000001b3ULL;
  return h;
}

}  // namespace

std::vector<GradcheckRow> run_gradcheck(const GradcheckOptions& options) {
  std::vector<GradcheckRow> rows;
  for (const Case& c : cases()) {
    GradcheckRow row{c.op, options.instances, 0.0};
    for (std::size_t k = 0; k < options.instances; ++k) {
      Rng rng(derive_seed(options.seed, {name_hash(c.op), k}));
      Inputs inputs = c.draw(rng);
      const std::size_t limit = differentiable_inputs(c.op);
      const std::size_t n_diff = limit == 0 ? inputs.size() : limit;

      Tape tape;
      std::vector<Var> vars;
      for (std::size_t i = 0; i < inputs.size(); ++i) {
        vars.push_back(i < n_diff ? tape.variable(inputs[i]) : tape.constant(inputs[i]));
      }
      Var y = c.build(tape, vars);
      Tensor weights = uniform(1, y.value().size(), rng);
      Var loss = y.value().rank() == 0 ? y : project(y, weights);
      tape.backward(loss);

      double max_diff = 0.0, max_analytic = 0.0, max_numeric = 0.0;
      for (std::size_t i = 0; i < n_diff; ++i) {
        const Tensor analytic = tape.grad(vars[i]);
        for (std::size_t e = 0; e < inputs[i].size(); ++e) {
          Inputs plus = inputs, minus = inputs;
          plus[i][e] += options.step;
          minus[i][e] -= options.step;
          const double numeric =
              (evaluate(c, plus, weights) - evaluate(c, minus, weights)) / (2.0 * options.step);
          max_diff = std::max(max_diff, std::abs(analytic[e] - numeric));
          max_analytic = std::max(max_analytic, std::abs(analytic[e]));
          max_numeric = std::max(max_numeric, std::abs(numeric));
        }
      }
      const double err = max_diff / std::max({max_analytic, max_numeric, 1e-6});
      row.max_relative_error = std::max(row.max_relative_error, err);
    }
    rows.push_back(row);
  }
  return rows;
}

}  // namespace feederclip
