#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "atsg/tensor.hpp"

namespace atsg {

using NamedTensor = std::pair<std::string, Tensor>;

struct GradCheckEntry {
  std::string tensor;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  std::vector<GradCheckEntry> worst;  // sorted by decreasing rel_error

  bool passed(double tol) const { return max_rel_error < tol; }
};

/// |a − n| / max(|a|, |n|, 1e-8)
inline double gradient_rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences (f(θ+h·e_i) − f(θ−h·e_i)) / 2h for every coordinate of every
/// parameter.
///
/// `loss_fn` must build its graph on the tape it is given and return a scalar.
/// It is called once with a recording tape and 2·(#coordinates) times with a
/// disabled one. Parameter values are restored exactly afterwards.
inline GradCheckReport grad_check(const std::function<Tensor(Tape&)>& loss_fn, std::vector<NamedTensor> params,
                                  double h = 1e-3, std::size_t keep_worst = 8) {
  for (auto& [name, p] : params) {
    p.set_requires_grad(true);
    p.drop_grad();
  }
  {
    Tape tape;
    Tensor loss = loss_fn(tape);
    tape.backward(loss);
  }

  GradCheckReport report;
  std::vector<GradCheckEntry> entries;
  for (auto& [name, p] : params) {
    const std::vector<double> analytic =
        p.has_grad() ? std::vector<double>(p.grad().begin(), p.grad().end()) : std::vector<double>(p.size(), 0.0);
    auto values = p.data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      Tape off(false);
      values[i] = saved + h;
      const double up = loss_fn(off).item();
      values[i] = saved - h;
      const double down = loss_fn(off).item();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      GradCheckEntry e{name, i, analytic[i], numeric, gradient_rel_error(analytic[i], numeric)};
      report.max_rel_error = std::max(report.max_rel_error, e.rel_error);
      entries.push_back(std::move(e));
    }
    report.coordinates += values.size();
  }
  const std::size_t k = std::min(keep_worst, entries.size());
  std::partial_sort(entries.begin(), entries.begin() + static_cast<std::ptrdiff_t>(k), entries.end(),
                    [](const auto& a, const auto& b) { return a.rel_error > b.rel_error; });
  entries.resize(k);
  report.worst = std::move(entries);
  return report;
}

}  // namespace atsg
