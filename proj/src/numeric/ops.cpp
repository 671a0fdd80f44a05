#include "feederclip/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace feederclip {
namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstView = Eigen::Map<const RowMatrix>;
using View = Eigen::Map<RowMatrix>;

ConstView view(const Tensor& t) { return ConstView(t.storage().data(), t.rows(), t.cols()); }
View view(Tensor& t) { return View(t.storage().data(), t.rows(), t.cols()); }

[[noreturn]] void shape_error(const char* op, const Tensor& a, const Tensor& b) {
  throw std::invalid_argument(std::string(op) + ": incompatible shapes " +
                              shape_string(a.shape()) + " and " + shape_string(b.shape()));
}

void require_matrix(const char* op, const Tensor& a) {
  if (a.rank() != 2) {
    throw std::invalid_argument(std::string(op) + ": expected a matrix, got shape " +
                                shape_string(a.shape()));
  }
}

void require_scalar(const char* op, const Tensor& a) {
  if (a.size() != 1) {
    throw std::invalid_argument(std::string(op) + ": expected a scalar, got shape " +
                                shape_string(a.shape()));
  }
}

// Element-wise unary op; `derivative(x, y)` gives dy/dx from input and output.
template <typename F, typename D>
Var unary(Var a, F forward, D derivative) {
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = forward(x[i]);
  return a.tape().record(std::move(y), {a},
                         [a, derivative](Tape& t, const Tensor& g, const Tensor& y) {
                           const Tensor& x = t.value(a);
                           Tensor& ga = t.grad(a);
                           for (std::size_t i = 0; i < x.size(); ++i) {
                             ga[i] += g[i] * derivative(x[i], y[i]);
                           }
                         });
}

bool is_row_broadcast(const Tensor& a, const Tensor& b) {
  return a.rank() == 2 && b.rank() == 2 && b.rows() == 1 && b.cols() == a.cols() && a.rows() != 1;
}

}  // namespace

Var matmul(Var a, Var b) {
  const Tensor& x = a.value();
  const Tensor& w = b.value();
  require_matrix("matmul", x);
  require_matrix("matmul", w);
  if (x.cols() != w.rows()) shape_error("matmul", x, w);
  Tensor y = Tensor::matrix(x.rows(), w.cols());
  view(y).noalias() = view(x) * view(w);
  return a.tape().record(std::move(y), {a, b}, [a, b](Tape& t, const Tensor& g, const Tensor&) {
    if (t.requires_grad(a)) view(t.grad(a)).noalias() += view(g) * view(t.value(b)).transpose();
    if (t.requires_grad(b)) view(t.grad(b)).noalias() += view(t.value(a)).transpose() * view(g);
  });
}

Var transpose(Var a) {
  const Tensor& x = a.value();
  require_matrix("transpose", x);
  Tensor y = Tensor::matrix(x.cols(), x.rows());
  view(y) = view(x).transpose();
  return a.tape().record(std::move(y), {a}, [a](Tape& t, const Tensor& g, const Tensor&) {
    view(t.grad(a)) += view(g).transpose();
  });
}

Var add(Var a, Var b) {
  const Tensor& x = a.value();
  const Tensor& z = b.value();
  if (x.same_shape(z)) {
    Tensor y = x;
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += z[i];
    return a.tape().record(std::move(y), {a, b}, [a, b](Tape& t, const Tensor& g, const Tensor&) {
      if (t.requires_grad(a)) {
        Tensor& ga = t.grad(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (t.requires_grad(b)) {
        Tensor& gb = t.grad(b);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
  }
  if (!is_row_broadcast(x, z)) shape_error("add", x, z);
  Tensor y = x;
  const std::size_t cols = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t c = 0; c < cols; ++c) y(r, c) += z[c];
  }
  return a.tape().record(std::move(y), {a, b}, [a, b](Tape& t, const Tensor& g, const Tensor&) {
    if (t.requires_grad(a)) {
      Tensor& ga = t.grad(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(b)) {
      Tensor& gb = t.grad(b);
      const std::size_t cols = gb.cols();
      for (std::size_t r = 0; r < g.rows(); ++r) {
        for (std::size_t c = 0; c < cols; ++c) gb[c] += g(r, c);
      }
    }
  });
}

Var sub(Var a, Var b) { return add(a, scale(b, -1.0)); }

Var mul(Var a, Var b) {
  const Tensor& x = a.value();
  const Tensor& z = b.value();
  if (!x.same_shape(z)) shape_error("mul", x, z);
  Tensor y = x;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= z[i];
  return a.tape().record(std::move(y), {a, b}, [a, b](Tape& t, const Tensor& g, const Tensor&) {
    const Tensor& x = t.value(a);
    const Tensor& z = t.value(b);
    if (t.requires_grad(a)) {
      Tensor& ga = t.grad(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * z[i];
    }
    if (t.requires_grad(b)) {
      Tensor& gb = t.grad(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x[i];
    }
  });
}

Var scale(Var a, double factor) {
  Tensor y = a.value();
  for (double& v : y.storage()) v *= factor;
  return a.tape().record(std::move(y), {a}, [a, factor](Tape& t, const Tensor& g, const Tensor&) {
    Tensor& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += factor * g[i];
  });
}

Var scale(Var a, Var factor) {
  require_scalar("scale", factor.value());
  const double s = factor.value()[0];
  Tensor y = a.value();
  for (double& v : y.storage()) v *= s;
  return a.tape().record(std::move(y), {a, factor},
                         [a, factor](Tape& t, const Tensor& g, const Tensor&) {
                           const Tensor& x = t.value(a);
                           const double s = t.value(factor)[0];
                           if (t.requires_grad(a)) {
                             Tensor& ga = t.grad(a);
                             for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
                           }
                           if (t.requires_grad(factor)) {
                             double acc = 0.0;
                             for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * x[i];
                             t.grad(factor)[0] += acc;
                           }
                         });
}

Var relu(Var a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var tanh(Var a) {
  return unary(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var sigmoid(Var a) {
  return unary(
      a,
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Var exp(Var a) {
  return unary(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var row_softmax(Var a) {
  const Tensor& x = a.value();
  require_matrix("row_softmax", x);
  Tensor y(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row_span(r);
    auto out = y.row_span(r);
    const double peak = *std::max_element(in.begin(), in.end());
    double total = 0.0;
    for (std::size_t c = 0; c < in.size(); ++c) total += out[c] = std::exp(in[c] - peak);
    for (double& v : out) v /= total;
  }
  return a.tape().record(std::move(y), {a}, [a](Tape& t, const Tensor& g, const Tensor& y) {
    Tensor& ga = t.grad(a);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      auto yr = y.row_span(r);
      auto gr = g.row_span(r);
      double dot = 0.0;
      for (std::size_t c = 0; c < yr.size(); ++c) dot += gr[c] * yr[c];
      auto out = ga.row_span(r);
      for (std::size_t c = 0; c < yr.size(); ++c) out[c] += yr[c] * (gr[c] - dot);
    }
  });
}

Var l2_normalize_rows(Var a) {
  constexpr double kMinNorm = 1e-12;
  const Tensor& x = a.value();
  require_matrix("l2_normalize_rows", x);
  Tensor y(x.shape());
  std::vector<double> norms(x.rows());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row_span(r);
    double sq = 0.0;
    for (double v : in) sq += v * v;
    norms[r] = std::max(std::sqrt(sq), kMinNorm);
    auto out = y.row_span(r);
    for (std::size_t c = 0; c < in.size(); ++c) out[c] = in[c] / norms[r];
  }
  return a.tape().record(std::move(y), {a},
                         [a, norms = std::move(norms)](Tape& t, const Tensor& g, const Tensor& y) {
                           Tensor& ga = t.grad(a);
                           for (std::size_t r = 0; r < y.rows(); ++r) {
                             auto yr = y.row_span(r);
                             auto gr = g.row_span(r);
                             double dot = 0.0;
                             for (std::size_t c = 0; c < yr.size(); ++c) dot += gr[c] * yr[c];
                             auto out = ga.row_span(r);
                             for (std::size_t c = 0; c < yr.size(); ++c) {
                               out[c] += (gr[c] - yr[c] * dot) / norms[r];
                             }
                           }
                         });
}

Var mean_pool_rows(Var a) { return segment_mean_rows(a, a.value().rows()); }

Var segment_mean_rows(Var a, std::size_t rows_per_segment) {
  const Tensor& x = a.value();
  require_matrix("segment_mean_rows", x);
  if (rows_per_segment == 0 || x.rows() % rows_per_segment != 0) {
    throw std::invalid_argument("segment_mean_rows: " + std::to_string(x.rows()) +
                                " rows do not split into segments of " +
                                std::to_string(rows_per_segment));
  }
  const std::size_t segments = x.rows() / rows_per_segment;
  const std::size_t cols = x.cols();
  Tensor y = Tensor::matrix(segments, cols);
  const double inv = 1.0 / static_cast<double>(rows_per_segment);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row_span(r);
    auto out = y.row_span(r / rows_per_segment);
    for (std::size_t c = 0; c < cols; ++c) out[c] += in[c] * inv;
  }
  return a.tape().record(std::move(y), {a},
                         [a, rows_per_segment, inv](Tape& t, const Tensor& g, const Tensor&) {
                           Tensor& ga = t.grad(a);
                           for (std::size_t r = 0; r < ga.rows(); ++r) {
                             auto in = g.row_span(r / rows_per_segment);
                             auto out = ga.row_span(r);
                             for (std::size_t c = 0; c < out.size(); ++c) out[c] += in[c] * inv;
                           }
                         });
}

Var block_propagate(const std::vector<const Tensor*>& blocks, Var x) {
  const Tensor& in = x.value();
  require_matrix("block_propagate", in);
  std::size_t total = 0;
  for (const Tensor* b : blocks) {
    require_matrix("block_propagate", *b);
    if (b->rows() != b->cols()) shape_error("block_propagate", *b, in);
    total += b->rows();
  }
  if (total != in.rows()) {
    throw std::invalid_argument("block_propagate: blocks cover " + std::to_string(total) +
                                " rows, input has shape " + shape_string(in.shape()));
  }
  Tensor y(in.shape());
  const std::size_t cols = in.cols();
  std::size_t offset = 0;
  for (const Tensor* b : blocks) {
    const std::size_t n = b->rows();
    View(y.storage().data() + offset * cols, n, cols).noalias() =
        view(*b) * ConstView(in.storage().data() + offset * cols, n, cols);
    offset += n;
  }
  return x.tape().record(std::move(y), {x}, [blocks, x](Tape& t, const Tensor& g, const Tensor&) {
    Tensor& gx = t.grad(x);
    const std::size_t cols = gx.cols();
    std::size_t offset = 0;
    for (const Tensor* b : blocks) {
      const std::size_t n = b->rows();
      View(gx.storage().data() + offset * cols, n, cols).noalias() +=
          view(*b).transpose() * ConstView(g.storage().data() + offset * cols, n, cols);
      offset += n;
    }
  });
}

Var embedding_mean(Var table, const std::vector<std::vector<std::size_t>>& indices) {
  const Tensor& e = table.value();
  require_matrix("embedding_mean", e);
  Tensor y = Tensor::matrix(indices.size(), e.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto& idx = indices[i];
    if (idx.empty()) throw std::invalid_argument("embedding_mean: empty index list");
    auto out = y.row_span(i);
    const double inv = 1.0 / static_cast<double>(idx.size());
    for (std::size_t k : idx) {
      if (k >= e.rows()) {
        throw std::invalid_argument("embedding_mean: index " + std::to_string(k) +
                                    " outside table of shape " + shape_string(e.shape()));
      }
      auto in = e.row_span(k);
      for (std::size_t c = 0; c < out.size(); ++c) out[c] += in[c] * inv;
    }
  }
  return table.tape().record(std::move(y), {table},
                             [table, indices](Tape& t, const Tensor& g, const Tensor&) {
                               Tensor& ge = t.grad(table);
                               for (std::size_t i = 0; i < indices.size(); ++i) {
                                 auto in = g.row_span(i);
                                 const double inv = 1.0 / static_cast<double>(indices[i].size());
                                 for (std::size_t k : indices[i]) {
                                   auto out = ge.row_span(k);
                                   for (std::size_t c = 0; c < out.size(); ++c) {
                                     out[c] += in[c] * inv;
                                   }
                                 }
                               }
                             });
}

Var cross_entropy_with_logits(Var logits, const std::vector<std::size_t>& labels,
                              const std::vector<unsigned char>& excluded) {
  const Tensor& x = logits.value();
  require_matrix("cross_entropy_with_logits", x);
  const std::size_t rows = x.rows();
  const std::size_t cols = x.cols();
  if (labels.size() != rows) {
    throw std::invalid_argument("cross_entropy_with_logits: " + std::to_string(labels.size()) +
                                " labels for logits of shape " + shape_string(x.shape()));
  }
  if (!excluded.empty() && excluded.size() != x.size()) {
    throw std::invalid_argument("cross_entropy_with_logits: exclusion mask size mismatch for " +
                                shape_string(x.shape()));
  }
  auto is_excluded = [&](std::size_t r, std::size_t c) {
    return !excluded.empty() && excluded[r * cols + c] != 0;
  };
  Tensor probs(x.shape());
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (labels[r] >= cols) {
      throw std::invalid_argument("cross_entropy_with_logits: label " + std::to_string(labels[r]) +
                                  " out of range for shape " + shape_string(x.shape()));
    }
    if (is_excluded(r, labels[r])) {
      throw std::invalid_argument("cross_entropy_with_logits: target entry is excluded");
    }
    double peak = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < cols; ++c) {
      if (!is_excluded(r, c)) peak = std::max(peak, x(r, c));
    }
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      if (!is_excluded(r, c)) total += probs(r, c) = std::exp(x(r, c) - peak);
    }
    for (std::size_t c = 0; c < cols; ++c) probs(r, c) /= total;
    loss += peak + std::log(total) - x(r, labels[r]);
  }
  loss /= static_cast<double>(rows);
  return logits.tape().record(
      Tensor::scalar(loss), {logits},
      [logits, labels, probs = std::move(probs)](Tape& t, const Tensor& g, const Tensor&) {
        Tensor& gx = t.grad(logits);
        const double s = g[0] / static_cast<double>(probs.rows());
        for (std::size_t r = 0; r < probs.rows(); ++r) {
          for (std::size_t c = 0; c < probs.cols(); ++c) {
            gx(r, c) += s * (probs(r, c) - (c == labels[r] ? 1.0 : 0.0));
          }
        }
      });
}

Var binary_cross_entropy_with_logits(Var logits, const Tensor& targets, const Tensor& weights) {
  const Tensor& x = logits.value();
  if (!x.same_shape(targets)) shape_error("binary_cross_entropy_with_logits", x, targets);
  if (!weights.empty() && !weights.same_shape(x)) {
    shape_error("binary_cross_entropy_with_logits", x, weights);
  }
  // max(x, 0) - x t + log(1 + exp(-|x|)) never takes the log of zero.
  double loss = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double w = weights.empty() ? 1.0 : weights[i];
    loss += w * (std::max(x[i], 0.0) - x[i] * targets[i] + std::log1p(std::exp(-std::abs(x[i]))));
  }
  loss /= static_cast<double>(x.size());
  return logits.tape().record(
      Tensor::scalar(loss), {logits},
      [logits, targets, weights](Tape& t, const Tensor& g, const Tensor&) {
        const Tensor& x = t.value(logits);
        Tensor& gx = t.grad(logits);
        const double s = g[0] / static_cast<double>(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) {
          const double w = weights.empty() ? 1.0 : weights[i];
          const double p = x[i] >= 0.0 ? 1.0 / (1.0 + std::exp(-x[i]))
                                       : std::exp(x[i]) / (1.0 + std::exp(x[i]));
          gx[i] += s * w * (p - targets[i]);
        }
      });
}

Var mse(Var a, Var b) {
  const Tensor& x = a.value();
  const Tensor& z = b.value();
  if (!x.same_shape(z)) shape_error("mse", x, z);
  double loss = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) loss += (x[i] - z[i]) * (x[i] - z[i]);
  loss /= static_cast<double>(x.size());
  return a.tape().record(Tensor::scalar(loss), {a, b},
                         [a, b](Tape& t, const Tensor& g, const Tensor&) {
                           const Tensor& x = t.value(a);
                           const Tensor& z = t.value(b);
                           const double s = 2.0 * g[0] / static_cast<double>(x.size());
                           if (t.requires_grad(a)) {
                             Tensor& ga = t.grad(a);
                             for (std::size_t i = 0; i < x.size(); ++i) ga[i] += s * (x[i] - z[i]);
                           }
                           if (t.requires_grad(b)) {
                             Tensor& gb = t.grad(b);
                             for (std::size_t i = 0; i < x.size(); ++i) gb[i] -= s * (x[i] - z[i]);
                           }
                         });
}

Var gaussian_kl_to_standard(Var mu, Var logvar, std::size_t rows_per_sample) {
  const Tensor& m = mu.value();
  const Tensor& lv = logvar.value();
  if (!m.same_shape(lv)) shape_error("gaussian_kl_to_standard", m, lv);
  require_matrix("gaussian_kl_to_standard", m);
  if (rows_per_sample == 0 || m.rows() % rows_per_sample != 0) {
    throw std::invalid_argument("gaussian_kl_to_standard: " + std::to_string(m.rows()) +
                                " rows do not split into samples of " +
                                std::to_string(rows_per_sample));
  }
  const double samples = static_cast<double>(m.rows() / rows_per_sample);
  double kl = 0.0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    kl += m[i] * m[i] + std::exp(lv[i]) - lv[i] - 1.0;
  }
  kl *= 0.5 / samples;
  return mu.tape().record(Tensor::scalar(kl), {mu, logvar},
                          [mu, logvar, samples](Tape& t, const Tensor& g, const Tensor&) {
                            const Tensor& m = t.value(mu);
                            const Tensor& lv = t.value(logvar);
                            const double s = g[0] / samples;
                            if (t.requires_grad(mu)) {
                              Tensor& gm = t.grad(mu);
                              for (std::size_t i = 0; i < m.size(); ++i) gm[i] += s * m[i];
                            }
                            if (t.requires_grad(logvar)) {
                              Tensor& gl = t.grad(logvar);
                              for (std::size_t i = 0; i < lv.size(); ++i) {
                                gl[i] += s * 0.5 * (std::exp(lv[i]) - 1.0);
                              }
                            }
                          });
}

}  // namespace feederclip
