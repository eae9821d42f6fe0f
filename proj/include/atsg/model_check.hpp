#pragma once

#include <cstdint>
#include <vector>

#include "atsg/grad_check.hpp"
#include "atsg/losses.hpp"
#include "atsg/model.hpp"
#include "atsg/rng.hpp"

namespace atsg {

struct ModelGradCheck {
  GradCheckReport segmentation;  // soft Dice through the segmentation head
  GradCheckReport pretraining;   // ℓ2 through the reconstruction head
};

/// Finite-difference check of every parameter of a model built from `hp`,
/// on one random block with a random two-class target that contains both
/// classes.
inline ModelGradCheck model_grad_check(const Hyperparams& hp, std::uint64_t seed, double h = 1e-3) {
  hp.validate();
  Rng rng(seed);
  const std::size_t W = hp.W, w = hp.w(), c = hp.c, C = hp.n_class;
  Tensor block(Shape{W, W, W, c});
  for (auto& x : block.data()) x = rng.normal();

  ModelGradCheck out;
  {
    ModelWeights m = init_weights(hp, seed + 1);
    const std::size_t V = hp.head_mode == HeadMode::voxel ? w * w * w : hp.N();
    std::vector<std::uint8_t> labels(V);
    for (auto& l : labels) l = static_cast<std::uint8_t>(rng.uniform_int(C));
    labels[0] = 0;
    labels[V - 1] = static_cast<std::uint8_t>(C - 1);
    Tensor target = one_hot(labels, C);
    auto loss = [&](Tape& tape) {
      Tensor p = forward(tape, block, m).output;
      return soft_dice_loss(tape, reshape(tape, p, Shape{V, C}), target);
    };
    out.segmentation = grad_check(loss, m.named_parameters(), h);
  }
  {
    ModelWeights m = init_weights(hp, seed + 2);
    attach_pretraining_head(m, seed + 3);
    m.seg_head.reset();
    Tensor target(Shape{w * w * w, c});
    for (auto& x : target.data()) x = rng.normal();
    auto loss = [&](Tape& tape) {
      Tensor p = forward(tape, block, m, false, OutputKind::pretraining).output;
      return mse_loss(tape, reshape(tape, p, Shape{w * w * w, c}), target);
    };
    out.pretraining = grad_check(loss, m.named_parameters(), h);
  }
  return out;
}

}  // namespace atsg
