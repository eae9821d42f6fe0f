#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "atsg/checkpoint.hpp"
#include "atsg/dataset.hpp"
#include "atsg/errors.hpp"
#include "atsg/log.hpp"
#include "atsg/losses.hpp"
#include "atsg/model.hpp"
#include "atsg/rng.hpp"

namespace atsg {

enum class PretrainTask { none, denoising, inpainting };

NLOHMANN_JSON_SERIALIZE_ENUM(PretrainTask, {{PretrainTask::none, "none"},
                                            {PretrainTask::denoising, "denoising"},
                                            {PretrainTask::inpainting, "inpainting"}})

struct TrainConfig {
  std::size_t batch_size = 10;
  double lr = 1e-4;
  std::size_t max_epochs = 20;
  std::size_t blocks_per_epoch = 200;
  std::size_t val_blocks = 40;
  std::uint64_t seed = 0;
  double snr_db = 10.0;
  PretrainTask pretrain_task = PretrainTask::none;
  std::size_t pretrain_epochs = 0;  // 0: same as max_epochs
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double foreground_fraction = 0.5;
  double dice_eps = 1e-5;
  bool verbose = false;

  void validate() const {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("train: lr must be finite and >= 0");
    if (batch_size == 0) throw ConfigError("train: batch_size must be >= 1");
    if (blocks_per_epoch == 0) throw ConfigError("train: blocks_per_epoch must be >= 1");
    if (val_blocks == 0) throw ConfigError("train: val_blocks must be >= 1");
    if (std::isnan(snr_db) || snr_db == -std::numeric_limits<double>::infinity())
      throw ConfigError("train: snr_db must not be NaN or -inf");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0) || !(adam_eps > 0.0))
      throw ConfigError("train: invalid Adam constants");
    if (!(foreground_fraction >= 0.0 && foreground_fraction <= 1.0))
      throw ConfigError("train: foreground_fraction must lie in [0,1]");
  }

  std::size_t steps_per_epoch() const { return (blocks_per_epoch + batch_size - 1) / batch_size; }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"batch_size", c.batch_size},
                     {"lr", c.lr},
                     {"max_epochs", c.max_epochs},
                     {"blocks_per_epoch", c.blocks_per_epoch},
                     {"val_blocks", c.val_blocks},
                     {"seed", c.seed},
                     {"snr_db", c.snr_db},
                     {"pretrain_task", c.pretrain_task},
                     {"pretrain_epochs", c.pretrain_epochs},
                     {"beta1", c.beta1},
                     {"beta2", c.beta2},
                     {"adam_eps", c.adam_eps},
                     {"foreground_fraction", c.foreground_fraction},
                     {"dice_eps", c.dice_eps}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  static const char* known[] = {"batch_size", "lr",      "max_epochs", "blocks_per_epoch",    "val_blocks",
                                "seed",       "snr_db",  "pretrain_task", "pretrain_epochs", "beta1",
                                "beta2",      "adam_eps", "foreground_fraction", "dice_eps", "verbose"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (std::find(std::begin(known), std::end(known), it.key()) == std::end(known))
      throw ConfigError("train config: unknown key '" + it.key() + "'");
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("batch_size", c.batch_size);
  get("lr", c.lr);
  get("max_epochs", c.max_epochs);
  get("blocks_per_epoch", c.blocks_per_epoch);
  get("val_blocks", c.val_blocks);
  get("seed", c.seed);
  get("snr_db", c.snr_db);
  get("pretrain_task", c.pretrain_task);
  get("pretrain_epochs", c.pretrain_epochs);
  get("beta1", c.beta1);
  get("beta2", c.beta2);
  get("adam_eps", c.adam_eps);
  get("foreground_fraction", c.foreground_fraction);
  get("dice_eps", c.dice_eps);
  get("verbose", c.verbose);
}

// ---------------------------------------------------------------------------
// Adam and the plateau schedule
// ---------------------------------------------------------------------------

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t t = 0;
};

struct AdamConstants {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update of every parameter from its grad buffer
/// (a missing buffer counts as a zero gradient).
inline void adam_step(const std::vector<NamedTensor>& params, AdamState& state, double lr,
                      const AdamConstants& k = {}) {
  if (state.m.empty()) {
    for (const auto& [name, p] : params) {
      state.m.emplace_back(p.size(), 0.0);
      state.v.emplace_back(p.size(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw DimensionError("adam_step: state does not match parameter list");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, p] = params[i];
    if (state.m[i].size() != p.size()) throw DimensionError("adam_step: state shape mismatch for " + name);
    if (p.has_grad())
      for (double g : p.grad())
        if (!std::isfinite(g)) throw NumericError("adam_step: non-finite gradient in " + name);
  }
  state.t += 1;
  const double c1 = 1.0 - std::pow(k.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(k.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i].second;
    auto& m = state.m[i];
    auto& v = state.v[i];
    const bool has = p.has_grad();
    auto data = p.data();
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double g = has ? p.grad()[j] : 0.0;
      m[j] = k.beta1 * m[j] + (1.0 - k.beta1) * g;
      v[j] = k.beta2 * v[j] + (1.0 - k.beta2) * g * g;
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      data[j] -= lr * mhat / (std::sqrt(vhat) + k.eps);
    }
  }
}

/// Halves the learning rate after any epoch whose validation loss is not
/// strictly below the best seen so far.
class PlateauScheduler {
 public:
  explicit PlateauScheduler(double lr) : lr_(lr) {}

  /// Records one epoch's validation loss; returns the lr for the next epoch.
  double step(double val_loss) {
    if (!has_best_ || val_loss < best_) {
      best_ = val_loss;
      has_best_ = true;
    } else {
      lr_ *= 0.5;
    }
    return lr_;
  }

  double lr() const { return lr_; }
  double best() const { return best_; }

 private:
  double lr_;
  double best_ = 0.0;
  bool has_best_ = false;
};

/// Per-epoch lr multipliers (relative to the initial lr) after each entry of
/// a validation-loss history. The last element is the current multiplier.
inline std::vector<double> plateau_multipliers(const std::vector<double>& val_losses) {
  PlateauScheduler s(1.0);
  std::vector<double> out;
  for (double l : val_losses) out.push_back(s.step(l));
  return out;
}

inline double plateau_scheduler(const std::vector<double>& val_losses) {
  if (val_losses.empty()) throw ContractError("plateau_scheduler: needs at least one epoch");
  return plateau_multipliers(val_losses).back();
}

// ---------------------------------------------------------------------------
// Block sampling and self-supervised examples
// ---------------------------------------------------------------------------

/// Copies the W×W×W×c block at `origin` out of an image; the block must lie
/// inside the grid.
inline Tensor extract_block(const ImageGrid& img, const Dims3& origin, std::size_t W) {
  const std::size_t c = img.channels;
  for (std::size_t a = 0; a < 3; ++a)
    if (origin[a] + W > img.dims[a]) throw DataError("extract_block: block leaves the volume");
  Tensor block(Shape{W, W, W, c});
  for (std::size_t i = 0; i < W; ++i)
    for (std::size_t j = 0; j < W; ++j) {
      const std::size_t src = (((origin[0] + i) * img.dims[1] + origin[1] + j) * img.dims[2] + origin[2]) * c;
      const std::size_t dst = ((i * W + j) * W) * c;
      std::copy_n(img.data.begin() + static_cast<std::ptrdiff_t>(src), W * c,
                  block.data().begin() + static_cast<std::ptrdiff_t>(dst));
    }
  return block;
}

/// The w×w×w×c center patch of a block.
inline Tensor extract_center_patch(const Tensor& block, const Hyperparams& hp) {
  const std::size_t W = hp.W, w = hp.w(), c = hp.c, off = hp.center_offset();
  Tensor out(Shape{w, w, w, c});
  for (std::size_t i = 0; i < w; ++i)
    for (std::size_t j = 0; j < w; ++j)
      for (std::size_t k = 0; k < w; ++k)
        for (std::size_t ch = 0; ch < c; ++ch)
          out[((i * w + j) * w + k) * c + ch] = block[(((off + i) * W + off + j) * W + off + k) * c + ch];
  return out;
}

struct BlockSample {
  Dims3 origin{};
  Tensor block;                             // W×W×W×c
  std::vector<std::uint8_t> center_labels;  // w³, empty without a mask
  std::vector<std::uint8_t> block_labels;   // W³, empty without a mask
  bool center_has_foreground = false;
};

/// Draws training blocks from one volume. Block origins are uniform over all
/// positions that keep the block inside the volume; with probability
/// `foreground_fraction` the draw is restricted to origins whose center patch
/// contains foreground.
class BlockSampler {
 public:
  BlockSampler(const ImageGrid& image, const SegmentationMask* mask, const Hyperparams& hp)
      : image_(&image), mask_(mask), hp_(hp) {
    for (std::size_t a = 0; a < 3; ++a)
      if (image.dims[a] < hp.W)
        throw DataError("volume extent " + std::to_string(image.dims[a]) + " is smaller than the block size " +
                        std::to_string(hp.W));
    if (image.channels != hp.c) throw DataError("volume channel count does not match hyperparams");
    for (std::size_t a = 0; a < 3; ++a) range_[a] = image.dims[a] - hp.W + 1;
    if (mask) {
      if (mask->dims != image.dims) throw DataError("mask shape differs from image");
      index_foreground_origins();
    }
  }

  std::size_t origin_count() const { return range_[0] * range_[1] * range_[2]; }
  const std::vector<Dims3>& foreground_origins() const { return fg_origins_; }

  BlockSample sample(Rng& rng, double foreground_fraction) {
    Dims3 origin{};
    bool forced = false;
    if (mask_ && foreground_fraction > 0.0 && rng.uniform() < foreground_fraction) {
      if (fg_origins_.empty()) {
        if (!warned_) {
          log_warning("foreground-biased sampling requested but no block has foreground in its center patch; "
                      "falling back to uniform sampling");
          warned_ = true;
        }
      } else {
        origin = fg_origins_[rng.uniform_int(fg_origins_.size())];
        forced = true;
      }
    }
    if (!forced)
      for (std::size_t a = 0; a < 3; ++a) origin[a] = rng.uniform_int(range_[a]);
    return at(origin);
  }

  BlockSample at(const Dims3& origin) const {
    BlockSample s;
    s.origin = origin;
    s.block = extract_block(*image_, origin, hp_.W);
    if (mask_) {
      const std::size_t W = hp_.W, w = hp_.w(), off = hp_.center_offset();
      s.block_labels.resize(W * W * W);
      for (std::size_t i = 0; i < W; ++i)
        for (std::size_t j = 0; j < W; ++j)
          for (std::size_t k = 0; k < W; ++k)
            s.block_labels[(i * W + j) * W + k] = (*mask_)(origin[0] + i, origin[1] + j, origin[2] + k);
      s.center_labels.resize(w * w * w);
      for (std::size_t i = 0; i < w; ++i)
        for (std::size_t j = 0; j < w; ++j)
          for (std::size_t k = 0; k < w; ++k) {
            const auto l = s.block_labels[((off + i) * W + off + j) * W + off + k];
            s.center_labels[(i * w + j) * w + k] = l;
            s.center_has_foreground |= l != 0;
          }
    }
    return s;
  }

 private:
  void index_foreground_origins() {
    // 3D prefix sums of the foreground indicator for O(1) box counts.
    const auto [X, Y, Z] = image_->dims;
    const std::size_t PY = Y + 1, PZ = Z + 1;
    std::vector<std::uint32_t> ps((X + 1) * PY * PZ, 0);
    auto P = [&](std::size_t i, std::size_t j, std::size_t k) -> std::uint32_t& { return ps[(i * PY + j) * PZ + k]; };
    for (std::size_t i = 0; i < X; ++i)
      for (std::size_t j = 0; j < Y; ++j)
        for (std::size_t k = 0; k < Z; ++k)
          P(i + 1, j + 1, k + 1) = ((*mask_)(i, j, k) != 0) + P(i, j + 1, k + 1) + P(i + 1, j, k + 1) +
                                   P(i + 1, j + 1, k) - P(i, j, k + 1) - P(i, j + 1, k) - P(i + 1, j, k) + P(i, j, k);
    const std::size_t w = hp_.w(), off = hp_.center_offset();
    for (std::size_t i = 0; i < range_[0]; ++i)
      for (std::size_t j = 0; j < range_[1]; ++j)
        for (std::size_t k = 0; k < range_[2]; ++k) {
          const std::size_t a0 = i + off, b0 = j + off, c0 = k + off;
          const std::size_t a1 = a0 + w, b1 = b0 + w, c1 = c0 + w;
          const long count = static_cast<long>(P(a1, b1, c1)) - P(a0, b1, c1) - P(a1, b0, c1) - P(a1, b1, c0) +
                             P(a0, b0, c1) + P(a0, b1, c0) + P(a1, b0, c0) - P(a0, b0, c0);
          if (count > 0) fg_origins_.push_back({i, j, k});
        }
  }

  const ImageGrid* image_;
  const SegmentationMask* mask_;
  Hyperparams hp_;
  std::array<std::size_t, 3> range_{};
  std::vector<Dims3> fg_origins_;
  bool warned_ = false;
};

/// Convenience wrapper: one block and its center-patch ground truth.
inline BlockSample sample_training_block(const ImageGrid& image, const SegmentationMask& mask, const Hyperparams& hp,
                                         Rng& rng, double foreground_fraction = 0.5) {
  BlockSampler sampler(image, &mask, hp);
  return sampler.sample(rng, foreground_fraction);
}

struct SelfSupervisedExample {
  Tensor input;   // W×W×W×c
  Tensor target;  // w×w×w×c, clean center patch
};

/// Adds i.i.d. Gaussian noise with variance Var(block) / 10^(snr_db/10).
/// snr_db = +inf leaves the block unchanged; a constant block is passed
/// through with a warning.
inline SelfSupervisedExample make_denoising_example(const Tensor& block, const Hyperparams& hp, Rng& rng,
                                                    double snr_db = 10.0) {
  block.check_finite("denoising input block");
  SelfSupervisedExample ex{block.clone(), extract_center_patch(block, hp)};
  if (std::isinf(snr_db) && snr_db > 0) return ex;
  double mean = 0.0;
  for (double x : block.data()) mean += x;
  mean /= static_cast<double>(block.size());
  double var = 0.0;
  for (double x : block.data()) var += (x - mean) * (x - mean);
  var /= static_cast<double>(block.size());
  if (var <= 0.0) {
    log_warning("denoising example: block has zero variance, no noise added");
    return ex;
  }
  const double sigma = std::sqrt(var / std::pow(10.0, snr_db / 10.0));
  for (auto& x : ex.input.data()) x += sigma * rng.normal();
  return ex;
}

/// Zeroes the center patch (all channels); every other voxel is untouched.
inline SelfSupervisedExample make_inpainting_example(const Tensor& block, const Hyperparams& hp) {
  block.check_finite("inpainting input block");
  SelfSupervisedExample ex{block.clone(), extract_center_patch(block, hp)};
  const std::size_t W = hp.W, w = hp.w(), c = hp.c, off = hp.center_offset();
  for (std::size_t i = 0; i < w; ++i)
    for (std::size_t j = 0; j < w; ++j)
      for (std::size_t k = 0; k < w; ++k)
        for (std::size_t ch = 0; ch < c; ++ch) ex.input[(((off + i) * W + off + j) * W + off + k) * c + ch] = 0.0;
  return ex;
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

struct EpochStats {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;

  bool operator==(const EpochStats&) const = default;
};

/// Training diverged; the last good weights were written if a checkpoint path
/// was configured.
class DivergenceError : public NumericError {
 public:
  using NumericError::NumericError;
};

struct TrainOutputs {
  std::optional<std::filesystem::path> checkpoint;  // best-validation weights
  std::optional<std::filesystem::path> stats_csv;   // appended: epoch,train_loss,val_loss,lr
};

struct TrainResult {
  ModelWeights best;   // lowest validation loss
  ModelWeights final;  // weights after the last step
  std::vector<EpochStats> history;
  std::vector<double> step_losses;
  double initial_val_loss = 0.0;
};

/// Example used by the training loop: network input plus the target tensor
/// that the loss compares against the head output.
struct TrainingExample {
  Tensor input;
  Tensor target;
};

namespace detail {

inline std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline void append_stats_csv(const std::filesystem::path& path, const EpochStats& s) {
  const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  std::ofstream out(path, std::ios::app);
  if (!out) throw DataError("cannot append to '" + path.string() + "'");
  if (fresh) out << "epoch,train_loss,val_loss,lr\n";
  out << s.epoch << ',' << format_double(s.train_loss) << ',' << format_double(s.val_loss) << ','
      << format_double(s.lr) << '\n';
}

/// Segmentation target for one block: one-hot center-patch labels
/// (voxel head) or one-hot majority label per patch (patch head).
inline Tensor segmentation_target(const BlockSample& s, const Hyperparams& hp) {
  const std::size_t C = hp.n_class;
  Tape off(false);
  if (hp.head_mode == HeadMode::voxel) {
    const std::size_t w = hp.w();
    return reshape(off, one_hot(s.center_labels, C), Shape{w, w, w, C});
  }
  const std::size_t n = hp.n, w = hp.w(), W = hp.W;
  std::vector<std::uint8_t> patch_labels(hp.N());
  for (std::size_t p0 = 0; p0 < n; ++p0)
    for (std::size_t p1 = 0; p1 < n; ++p1)
      for (std::size_t p2 = 0; p2 < n; ++p2) {
        std::vector<std::size_t> votes(C, 0);
        for (std::size_t i = 0; i < w; ++i)
          for (std::size_t j = 0; j < w; ++j)
            for (std::size_t k = 0; k < w; ++k)
              ++votes[s.block_labels[((p0 * w + i) * W + p1 * w + j) * W + p2 * w + k]];
        patch_labels[(p0 * n + p1) * n + p2] =
            static_cast<std::uint8_t>(std::max_element(votes.begin(), votes.end()) - votes.begin());
      }
  return reshape(off, one_hot(patch_labels, C), Shape{n, n, n, C});
}

using ExampleSource = std::function<TrainingExample(Rng&)>;

inline Tensor rows_of(Tape& tape, const Tensor& t, std::size_t last) {
  return reshape(tape, t, Shape{t.size() / last, last});
}

/// Loss of one batch; builds the graph on `tape`.
inline Tensor batch_loss(Tape& tape, const ModelWeights& m, const std::vector<TrainingExample>& batch,
                         OutputKind kind, double dice_eps) {
  const std::size_t last = kind == OutputKind::segmentation ? m.hp.n_class : 1;
  std::vector<Tensor> preds, targets;
  Tape no_grad(false);
  for (const auto& ex : batch) {
    auto r = forward(tape, ex.input, m, false, kind);
    preds.push_back(rows_of(tape, r.output, last));
    targets.push_back(rows_of(no_grad, ex.target, last));
  }
  Tensor pred = concat_rows(tape, preds);
  Tensor target = concat_rows(no_grad, targets);
  return kind == OutputKind::segmentation ? soft_dice_loss(tape, pred, target, dice_eps) : mse_loss(tape, pred, target);
}

inline double evaluate_loss(const ModelWeights& m, const std::vector<TrainingExample>& examples,
                            std::size_t batch_size, OutputKind kind, double dice_eps) {
  double total = 0.0;
  std::size_t batches = 0;
  for (std::size_t start = 0; start < examples.size(); start += batch_size) {
    const auto end = std::min(examples.size(), start + batch_size);
    std::vector<TrainingExample> batch(examples.begin() + static_cast<std::ptrdiff_t>(start),
                                       examples.begin() + static_cast<std::ptrdiff_t>(end));
    Tape off(false);
    total += batch_loss(off, m, batch, kind, dice_eps).item();
    ++batches;
  }
  return total / static_cast<double>(batches);
}

/// Mini-batch Adam on `kind`'s loss with plateau halving after every epoch.
inline TrainResult run_training(ModelWeights model, const ExampleSource& train_source,
                                const std::vector<TrainingExample>& val_examples, std::size_t epochs,
                                OutputKind kind, const TrainConfig& cfg, const TrainOutputs& out, Rng& rng) {
  cfg.validate();
  TrainResult result;
  const auto params = model.named_parameters();
  for (const auto& [name, p] : params) {
    p.check_finite("initial parameter " + name);
    Tensor(p).set_requires_grad(true);
  }
  AdamState adam;
  const AdamConstants k{cfg.beta1, cfg.beta2, cfg.adam_eps};
  PlateauScheduler sched(cfg.lr);
  double lr = cfg.lr;

  result.initial_val_loss = evaluate_loss(model, val_examples, cfg.batch_size, kind, cfg.dice_eps);
  double best_val = std::numeric_limits<double>::infinity();
  result.best = model.clone();

  auto diverge = [&](const std::string& why) -> DivergenceError {
    if (out.checkpoint) save_checkpoint(*out.checkpoint, result.best);
    return DivergenceError("training diverged: " + why +
                           (out.checkpoint ? "; last good weights saved to " + out.checkpoint->string() : ""));
  };

  for (std::size_t epoch = 1; epoch <= epochs; ++epoch) {
    double epoch_loss = 0.0;
    std::size_t done = 0;
    for (std::size_t step = 0; step < cfg.steps_per_epoch(); ++step) {
      const std::size_t bs = std::min(cfg.batch_size, cfg.blocks_per_epoch - done);
      std::vector<TrainingExample> batch;
      for (std::size_t b = 0; b < bs; ++b) batch.push_back(train_source(rng));
      done += bs;
      model.zero_grad();
      Tape tape;
      double loss_value = 0.0;
      try {
        Tensor loss = batch_loss(tape, model, batch, kind, cfg.dice_eps);
        loss_value = loss.item();
        if (!std::isfinite(loss_value)) throw NumericError("loss is not finite");
        tape.backward(loss);
        adam_step(params, adam, lr, k);
      } catch (const NumericError& e) {
        throw diverge(e.what());
      }
      result.step_losses.push_back(loss_value);
      epoch_loss += loss_value;
    }
    EpochStats stats;
    stats.epoch = epoch;
    stats.train_loss = epoch_loss / static_cast<double>(cfg.steps_per_epoch());
    try {
      stats.val_loss = evaluate_loss(model, val_examples, cfg.batch_size, kind, cfg.dice_eps);
    } catch (const NumericError& e) {
      throw diverge(e.what());
    }
    stats.lr = lr;
    if (!std::isfinite(stats.val_loss)) throw diverge("validation loss is not finite");
    if (stats.val_loss < best_val) {
      best_val = stats.val_loss;
      result.best = model.clone();
      if (out.checkpoint) save_checkpoint(*out.checkpoint, result.best);
    }
    result.history.push_back(stats);
    if (out.stats_csv) append_stats_csv(*out.stats_csv, stats);
    if (cfg.verbose)
      log_info("epoch " + std::to_string(epoch) + " train " + format_double(stats.train_loss) + " val " +
               format_double(stats.val_loss) + " lr " + format_double(lr));
    lr = sched.step(stats.val_loss);
  }
  model.zero_grad();
  result.final = model;
  if (epochs == 0 && out.checkpoint) save_checkpoint(*out.checkpoint, result.best);
  return result;
}

inline std::vector<BlockSampler> make_samplers(const std::vector<LabeledVolume>& vols, const Hyperparams& hp) {
  std::vector<BlockSampler> s;
  s.reserve(vols.size());
  for (const auto& v : vols) s.emplace_back(v.image, &v.mask, hp);
  return s;
}

inline TrainingExample segmentation_example(std::vector<BlockSampler>& samplers, const Hyperparams& hp, Rng& rng,
                                            double fg_fraction) {
  auto& s = samplers[rng.uniform_int(samplers.size())];
  BlockSample b = s.sample(rng, fg_fraction);
  return {b.block, segmentation_target(b, hp)};
}

inline TrainingExample self_supervised_example(std::vector<BlockSampler>& samplers, const Hyperparams& hp, Rng& rng,
                                               const TrainConfig& cfg) {
  auto& s = samplers[rng.uniform_int(samplers.size())];
  BlockSample b = s.sample(rng, 0.0);
  auto ex = cfg.pretrain_task == PretrainTask::inpainting ? make_inpainting_example(b.block, hp)
                                                          : make_denoising_example(b.block, hp, rng, cfg.snr_db);
  return {ex.input, ex.target};
}

}  // namespace detail

/// Soft-Dice training with Adam and plateau halving. Validation loss is taken
/// over `cfg.val_blocks` blocks drawn once from the validation volumes.
/// Fully deterministic for a given (model, data, cfg).
inline TrainResult train(ModelWeights model, const std::vector<LabeledVolume>& train_set,
                         const std::vector<LabeledVolume>& val_set, const TrainConfig& cfg,
                         const TrainOutputs& out = {}) {
  cfg.validate();
  if (train_set.empty() || val_set.empty()) throw DataError("train: need at least one training and one validation volume");
  if (!model.seg_head) throw ContractError("train: model has no segmentation head");
  const auto hp = model.hp;
  for (const auto* set : {&train_set, &val_set})
    for (const auto& v : *set) v.mask.validate(hp.n_class);
  auto train_samplers = detail::make_samplers(train_set, hp);
  auto val_samplers = detail::make_samplers(val_set, hp);

  Rng val_rng(cfg.seed ^ 0xA5A5A5A5DEADBEEFULL);
  std::vector<TrainingExample> val_examples;
  for (std::size_t i = 0; i < cfg.val_blocks; ++i)
    val_examples.push_back(detail::segmentation_example(val_samplers, hp, val_rng, cfg.foreground_fraction));

  Rng rng(cfg.seed);
  const double fg = cfg.foreground_fraction;
  detail::ExampleSource source = [&](Rng& r) { return detail::segmentation_example(train_samplers, hp, r, fg); };
  return detail::run_training(std::move(model), source, val_examples, cfg.max_epochs, OutputKind::segmentation, cfg,
                              out, rng);
}

/// Phase 1 only: trains encoder + reconstruction head on the ℓ2 objective
/// (denoising or inpainting per cfg.pretrain_task). The last ceil(n/5)
/// unlabeled volumes (when n ≥ 2) provide the validation blocks.
inline TrainResult pretrain(ModelWeights model, const std::vector<ImageGrid>& unlabeled, const TrainConfig& cfg,
                            const TrainOutputs& out = {}) {
  cfg.validate();
  if (cfg.pretrain_task == PretrainTask::none) throw ConfigError("pretrain: pretrain_task must not be none");
  if (unlabeled.empty()) throw DataError("pretrain: no unlabeled volumes");
  const auto hp = model.hp;
  if (!model.pre_head) attach_pretraining_head(model, cfg.seed ^ 0x5EEDULL);
  model.seg_head.reset();

  const std::size_t n_val = unlabeled.size() >= 2 ? (unlabeled.size() + 4) / 5 : 0;
  std::vector<BlockSampler> train_samplers, val_samplers;
  for (std::size_t i = 0; i < unlabeled.size(); ++i) {
    auto& dst = (i >= unlabeled.size() - n_val) ? val_samplers : train_samplers;
    dst.emplace_back(unlabeled[i], nullptr, hp);
  }
  if (val_samplers.empty())
    for (const auto& u : unlabeled) val_samplers.emplace_back(u, nullptr, hp);

  Rng val_rng(cfg.seed ^ 0x0DDBA11CAFEF00DULL);
  std::vector<TrainingExample> val_examples;
  for (std::size_t i = 0; i < cfg.val_blocks; ++i)
    val_examples.push_back(detail::self_supervised_example(val_samplers, hp, val_rng, cfg));

  Rng rng(cfg.seed ^ 0x1234567ULL);
  detail::ExampleSource source = [&](Rng& r) { return detail::self_supervised_example(train_samplers, hp, r, cfg); };
  const std::size_t epochs = cfg.pretrain_epochs ? cfg.pretrain_epochs : cfg.max_epochs;
  return detail::run_training(std::move(model), source, val_examples, epochs, OutputKind::pretraining, cfg, out,
                              rng);
}

/// Phase 2: drops the reconstruction head, attaches a fresh softmax
/// segmentation head and trains every parameter on soft Dice.
inline TrainResult finetune(ModelWeights pretrained, const std::vector<LabeledVolume>& train_set,
                            const std::vector<LabeledVolume>& val_set, const TrainConfig& cfg,
                            const TrainOutputs& out = {}) {
  ModelWeights m = pretrained.clone();
  swap_to_segmentation_head(m, cfg.seed ^ 0xF1AE7BEULL);
  return train(std::move(m), train_set, val_set, cfg, out);
}

struct PretrainFinetuneResult {
  TrainResult pretraining;
  TrainResult finetuning;
};

inline PretrainFinetuneResult pretrain_then_finetune(ModelWeights model, const std::vector<ImageGrid>& unlabeled,
                                                     const std::vector<LabeledVolume>& train_set,
                                                     const std::vector<LabeledVolume>& val_set,
                                                     const TrainConfig& cfg, const TrainOutputs& out = {}) {
  PretrainFinetuneResult r;
  TrainOutputs phase1;  // only the final model goes to the configured outputs
  r.pretraining = pretrain(std::move(model), unlabeled, cfg, phase1);
  r.finetuning = finetune(r.pretraining.best, train_set, val_set, cfg, out);
  return r;
}

}  // namespace atsg
