#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "atsg/errors.hpp"
#include "atsg/tensor.hpp"

namespace atsg {

/// One-hot encoding of integer labels: [labels.size() × n_class].
inline Tensor one_hot(std::span<const std::uint8_t> labels, std::size_t n_class) {
  Tensor g(Shape{labels.size(), n_class});
  for (std::size_t v = 0; v < labels.size(); ++v) {
    if (labels[v] >= n_class)
      throw LabelRangeError("label " + std::to_string(labels[v]) + " outside [0, " + std::to_string(n_class) + ")");
    g[v * n_class + labels[v]] = 1.0;
  }
  return g;
}

/// Soft Dice loss over foreground classes 1..C−1 with the squared
/// denominator: d_c = 2Σpg / (Σp² + Σg² + eps), loss = 1 − mean_c d_c.
///
/// Both tensors are read as [V × C] with C the last extent. A class absent
/// from both argmax(probs) and the target is left out of the mean; if every
/// foreground class is left out the loss is 0. The inclusion decision is
/// treated as a constant for differentiation.
inline Tensor soft_dice_loss(Tape& tape, const Tensor& probs, const Tensor& target, double eps = 1e-5) {
  if (probs.shape() != target.shape())
    throw ContractError("soft_dice_loss: prediction " + shape_string(probs.shape()) + " vs target " +
                        shape_string(target.shape()));
  const std::size_t C = probs.shape().back();
  const std::size_t V = probs.size() / C;

  std::vector<bool> in_pred(C, false), in_target(C, false);
  for (std::size_t v = 0; v < V; ++v) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < C; ++c)
      if (probs[v * C + c] > probs[v * C + best]) best = c;
    in_pred[best] = true;
    for (std::size_t c = 0; c < C; ++c)
      if (target[v * C + c] > 0.5) in_target[c] = true;
  }

  struct ClassTerms {
    std::size_t cls;
    double inter, denom;
  };
  std::vector<ClassTerms> used;
  for (std::size_t c = 1; c < C; ++c) {
    if (!in_pred[c] && !in_target[c]) continue;
    double inter = 0.0, p2 = 0.0, g2 = 0.0;
    for (std::size_t v = 0; v < V; ++v) {
      const double p = probs[v * C + c], g = target[v * C + c];
      inter += p * g;
      p2 += p * p;
      g2 += g * g;
    }
    used.push_back({c, inter, p2 + g2 + eps});
  }

  double loss = 0.0;
  if (!used.empty()) {
    double mean_d = 0.0;
    for (const auto& u : used) mean_d += 2.0 * u.inter / u.denom;
    loss = 1.0 - mean_d / static_cast<double>(used.size());
  }
  Tensor out = Tensor::scalar(loss);
  if (!std::isfinite(loss)) throw NumericError("soft_dice_loss: non-finite loss");

  if (tape.needs_grad({&probs}) && !used.empty()) {
    tape.record({probs}, out, [probs, target, out, used, C, V]() mutable {
      const double g = out.grad()[0];
      auto gp = probs.grad_buffer();
      const double w = -g / static_cast<double>(used.size());
      for (const auto& u : used) {
        // ∂d/∂p = 2g/den − 4·I·p/den²
        const double a = 2.0 / u.denom;
        const double b = 4.0 * u.inter / (u.denom * u.denom);
        for (std::size_t v = 0; v < V; ++v) {
          const std::size_t i = v * C + u.cls;
          gp[i] += w * (a * target[i] - b * probs[i]);
        }
      }
    });
  }
  return out;
}

/// Mean squared error over all elements.
inline Tensor mse_loss(Tape& tape, const Tensor& pred, const Tensor& target) {
  if (pred.size() != target.size())
    throw ContractError("mse_loss: prediction " + shape_string(pred.shape()) + " vs target " +
                        shape_string(target.shape()));
  const double inv = 1.0 / static_cast<double>(pred.size());
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - target[i];
    s += d * d;
  }
  Tensor out = Tensor::scalar(s * inv);
  if (!std::isfinite(s)) throw NumericError("mse_loss: non-finite loss");
  if (tape.needs_grad({&pred})) {
    tape.record({pred}, out, [pred, target, out, inv]() mutable {
      const double g = out.grad()[0];
      auto gp = pred.grad_buffer();
      for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g * 2.0 * inv * (pred[i] - target[i]);
    });
  }
  return out;
}

}  // namespace atsg
