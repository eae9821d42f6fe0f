#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "atsg/errors.hpp"
#include "atsg/grad_check.hpp"
#include "atsg/rng.hpp"
#include "atsg/tensor.hpp"

namespace atsg {

enum class PosMode { learned, fixed_sinusoidal, none };
enum class HeadMode { voxel, patch };
enum class NormMode { post, pre, off };

NLOHMANN_JSON_SERIALIZE_ENUM(PosMode, {{PosMode::learned, "learned"},
                                       {PosMode::fixed_sinusoidal, "fixed-sinusoidal"},
                                       {PosMode::none, "none"}})
NLOHMANN_JSON_SERIALIZE_ENUM(HeadMode, {{HeadMode::voxel, "voxel"}, {HeadMode::patch, "patch"}})
NLOHMANN_JSON_SERIALIZE_ENUM(NormMode, {{NormMode::post, "post"}, {NormMode::pre, "pre"}, {NormMode::off, "off"}})

/// Network shape. Field names follow the usual transformer notation:
/// block side W, n patches per axis (odd), c channels, K encoder stages,
/// embedding width D, per-head width D_h, n_h heads, FFN hidden width D_ff
/// (0 selects D).
struct Hyperparams {
  std::size_t W = 24;
  std::size_t n = 3;
  std::size_t c = 1;
  std::size_t K = 7;
  std::size_t D = 1024;
  std::size_t D_h = 256;
  std::size_t n_h = 4;
  std::size_t n_class = 2;
  std::size_t D_ff = 0;
  PosMode pos_mode = PosMode::learned;
  HeadMode head_mode = HeadMode::voxel;
  NormMode norm = NormMode::post;
  double ln_eps = 1e-5;

  std::size_t w() const { return W / n; }
  std::size_t N() const { return n * n * n; }
  std::size_t patch_voxels() const { return w() * w() * w(); }
  std::size_t patch_len() const { return patch_voxels() * c; }
  std::size_t ffn_width() const { return D_ff == 0 ? D : D_ff; }
  std::size_t center_index() const { return (N() - 1) / 2; }
  /// Voxel offset of the center patch inside a block along each axis.
  std::size_t center_offset() const { return (W - w()) / 2; }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("hyperparams: " + m); };
    if (W == 0 || n == 0 || c == 0 || K == 0 || D == 0 || D_h == 0 || n_h == 0 || n_class == 0)
      fail("all extents must be >= 1");
    if (n % 2 == 0) fail("n must be odd, got " + std::to_string(n));
    if (W % n != 0) fail("W=" + std::to_string(W) + " is not divisible by n=" + std::to_string(n));
    if (n_class < 2) fail("n_class must be >= 2");
    if (!(ln_eps > 0.0)) fail("ln_eps must be positive");
  }

  /// K=7, W=24, n=3, D=1024, D_h=256, n_h=4 (binary segmentation).
  static Hyperparams paper_defaults() { return Hyperparams{}; }

  /// W=6, n=3, c=1, D=8, D_h=4, n_h=2, K=2, n_class=2.
  static Hyperparams tiny() {
    Hyperparams hp;
    hp.W = 6;
    hp.n = 3;
    hp.c = 1;
    hp.K = 2;
    hp.D = 8;
    hp.D_h = 4;
    hp.n_h = 2;
    hp.n_class = 2;
    return hp;
  }

  bool operator==(const Hyperparams&) const = default;
};

inline void to_json(nlohmann::json& j, const Hyperparams& hp) {
  j = nlohmann::json{{"W", hp.W},       {"n", hp.n},           {"c", hp.c},
                     {"K", hp.K},       {"D", hp.D},           {"D_h", hp.D_h},
                     {"n_h", hp.n_h},   {"n_class", hp.n_class}, {"D_ff", hp.D_ff},
                     {"pos_mode", hp.pos_mode}, {"head_mode", hp.head_mode}, {"norm", hp.norm},
                     {"ln_eps", hp.ln_eps}};
}

/// Missing keys keep their current value, so partial overrides compose.
inline void from_json(const nlohmann::json& j, Hyperparams& hp) {
  static const char* known[] = {"W", "n", "c", "K", "D", "D_h", "n_h", "n_class", "D_ff", "pos_mode", "head_mode", "norm", "ln_eps"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(std::begin(known), std::end(known), it.key()) == std::end(known))
      throw ConfigError("hyperparams: unknown key '" + it.key() + "'");
  }
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("W", hp.W);
  get("n", hp.n);
  get("c", hp.c);
  get("K", hp.K);
  get("D", hp.D);
  get("D_h", hp.D_h);
  get("n_h", hp.n_h);
  get("n_class", hp.n_class);
  get("D_ff", hp.D_ff);
  get("pos_mode", hp.pos_mode);
  get("head_mode", hp.head_mode);
  get("norm", hp.norm);
  get("ln_eps", hp.ln_eps);
}

struct HeadProjection {
  Tensor E_Q, E_K, E_V;  // each D_h×D
};

struct StageWeights {
  std::vector<HeadProjection> heads;
  Tensor E_reproj;              // D×(D_h·n_h)
  Tensor msa_gamma, msa_beta;   // D, absent when norm=off
  Tensor E_1, b_1;              // D_ff×D, D_ff
  Tensor E_2, b_2;              // D×D_ff, D
  Tensor ffn_gamma, ffn_beta;   // D, absent when norm=off
};

/// Affine output layer. Voxel-style heads map the flattened D·N encoder output;
/// the patch-style segmentation head maps each token D → n_class.
struct OutputHead {
  Tensor weight;
  Tensor bias;
};

struct ModelWeights {
  Hyperparams hp;
  Tensor E;      // D×(w³c)
  Tensor E_pos;  // D×N; trainable when learned, constant when fixed-sinusoidal, undefined when none
  std::vector<StageWeights> stages;
  std::optional<OutputHead> seg_head;
  std::optional<OutputHead> pre_head;

  /// Every trainable tensor with its stable checkpoint name, in a fixed order.
  std::vector<NamedTensor> named_parameters() const {
    std::vector<NamedTensor> out;
    out.emplace_back("embed.E", E);
    if (hp.pos_mode == PosMode::learned) out.emplace_back("embed.E_pos", E_pos);
    for (std::size_t k = 0; k < stages.size(); ++k) {
      const auto& s = stages[k];
      const std::string pre = "stage" + std::to_string(k) + ".";
      for (std::size_t i = 0; i < s.heads.size(); ++i) {
        const std::string hpre = pre + "head" + std::to_string(i) + ".";
        out.emplace_back(hpre + "E_Q", s.heads[i].E_Q);
        out.emplace_back(hpre + "E_K", s.heads[i].E_K);
        out.emplace_back(hpre + "E_V", s.heads[i].E_V);
      }
      out.emplace_back(pre + "E_reproj", s.E_reproj);
      if (hp.norm != NormMode::off) {
        out.emplace_back(pre + "msa_norm.gamma", s.msa_gamma);
        out.emplace_back(pre + "msa_norm.beta", s.msa_beta);
      }
      out.emplace_back(pre + "ffn.E_1", s.E_1);
      out.emplace_back(pre + "ffn.b_1", s.b_1);
      out.emplace_back(pre + "ffn.E_2", s.E_2);
      out.emplace_back(pre + "ffn.b_2", s.b_2);
      if (hp.norm != NormMode::off) {
        out.emplace_back(pre + "ffn_norm.gamma", s.ffn_gamma);
        out.emplace_back(pre + "ffn_norm.beta", s.ffn_beta);
      }
    }
    if (seg_head) {
      out.emplace_back("seg_head.E_out", seg_head->weight);
      out.emplace_back("seg_head.b_out", seg_head->bias);
    }
    if (pre_head) {
      out.emplace_back("pre_head.E_pre", pre_head->weight);
      out.emplace_back("pre_head.b_pre", pre_head->bias);
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t total = 0;
    for (const auto& [name, t] : named_parameters()) total += t.size();
    return total;
  }

  /// Deep copy; the result shares no storage with *this.
  ModelWeights clone() const {
    ModelWeights m = *this;
    auto deep = [](Tensor& t) {
      if (t.defined()) t = t.clone();
    };
    deep(m.E);
    deep(m.E_pos);
    for (auto& s : m.stages) {
      for (auto& h : s.heads) {
        deep(h.E_Q);
        deep(h.E_K);
        deep(h.E_V);
      }
      for (Tensor* t : {&s.E_reproj, &s.msa_gamma, &s.msa_beta, &s.E_1, &s.b_1, &s.E_2, &s.b_2, &s.ffn_gamma,
                        &s.ffn_beta})
        deep(*t);
    }
    for (auto* head : {&m.seg_head, &m.pre_head}) {
      if (*head) {
        deep((*head)->weight);
        deep((*head)->bias);
      }
    }
    return m;
  }

  void zero_grad() const {
    for (auto [name, t] : named_parameters()) t.drop_grad();
  }
};

/// Raster-ordered patches of a block: patch j = (p0·n + p1)·n + p2 where p0
/// indexes the first (slowest) block axis. Each patch flattens its w×w×w×c
/// voxels in the same row-major order as the block.
struct PatchSequence {
  Tensor tokens;  // D×N
};

/// A[k][i] is the N×N row-stochastic attention matrix of stage k, head i.
struct AttentionRecord {
  std::vector<std::vector<Tensor>> A;
};

namespace detail {

inline Tensor glorot(Rng& rng, std::size_t rows, std::size_t cols) {
  const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
  Tensor t(Shape{rows, cols}, 0.0, true);
  for (auto& v : t.data()) v = rng.uniform(-limit, limit);
  return t;
}

inline Tensor zeros_param(Shape shape) { return Tensor(std::move(shape), 0.0, true); }
inline Tensor ones_param(Shape shape) { return Tensor(std::move(shape), 1.0, true); }

inline void check_block(const Tensor& block, const Hyperparams& hp) {
  const Shape expected{hp.W, hp.W, hp.W, hp.c};
  if (block.shape() != expected)
    throw DimensionError("block shape " + shape_string(block.shape()) + " does not match " + shape_string(expected));
}

}  // namespace detail

/// Standard 1D sinusoidal encoding over the raster patch index, D×N:
/// row 2i = sin(j / 10000^(2i/D)), row 2i+1 = cos(j / 10000^(2i/D)).
inline Tensor sinusoidal_encoding(std::size_t D, std::size_t N) {
  Tensor t(Shape{D, N});
  for (std::size_t r = 0; r < D; ++r) {
    const double freq = std::pow(10000.0, -static_cast<double>(r - r % 2) / static_cast<double>(D));
    for (std::size_t j = 0; j < N; ++j) {
      const double angle = static_cast<double>(j) * freq;
      t[r * N + j] = (r % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return t;
}

inline OutputHead make_segmentation_head(const Hyperparams& hp, Rng& rng) {
  if (hp.head_mode == HeadMode::voxel) {
    const std::size_t out = hp.patch_voxels() * hp.n_class;
    return {detail::glorot(rng, out, hp.D * hp.N()), detail::zeros_param(Shape{out})};
  }
  return {detail::glorot(rng, hp.n_class, hp.D), detail::zeros_param(Shape{hp.n_class})};
}

inline OutputHead make_pretraining_head(const Hyperparams& hp, Rng& rng) {
  const std::size_t out = hp.patch_len();
  return {detail::glorot(rng, out, hp.D * hp.N()), detail::zeros_param(Shape{out})};
}

/// Glorot-uniform matrices, zero biases and zero E_pos, unit norm gains.
/// Creates the segmentation head; the pre-training head is attached separately.
inline ModelWeights init_weights(const Hyperparams& hp, std::uint64_t seed) {
  hp.validate();
  Rng rng(seed);
  ModelWeights m;
  m.hp = hp;
  m.E = detail::glorot(rng, hp.D, hp.patch_len());
  if (hp.pos_mode == PosMode::learned) m.E_pos = detail::zeros_param(Shape{hp.D, hp.N()});
  if (hp.pos_mode == PosMode::fixed_sinusoidal) m.E_pos = sinusoidal_encoding(hp.D, hp.N());
  const std::size_t dff = hp.ffn_width();
  for (std::size_t k = 0; k < hp.K; ++k) {
    StageWeights s;
    for (std::size_t i = 0; i < hp.n_h; ++i)
      s.heads.push_back({detail::glorot(rng, hp.D_h, hp.D), detail::glorot(rng, hp.D_h, hp.D),
                         detail::glorot(rng, hp.D_h, hp.D)});
    s.E_reproj = detail::glorot(rng, hp.D, hp.D_h * hp.n_h);
    s.E_1 = detail::glorot(rng, dff, hp.D);
    s.b_1 = detail::zeros_param(Shape{dff});
    s.E_2 = detail::glorot(rng, hp.D, dff);
    s.b_2 = detail::zeros_param(Shape{hp.D});
    if (hp.norm != NormMode::off) {
      s.msa_gamma = detail::ones_param(Shape{hp.D});
      s.msa_beta = detail::zeros_param(Shape{hp.D});
      s.ffn_gamma = detail::ones_param(Shape{hp.D});
      s.ffn_beta = detail::zeros_param(Shape{hp.D});
    }
    m.stages.push_back(std::move(s));
  }
  m.seg_head = make_segmentation_head(hp, rng);
  return m;
}

/// Adds a freshly initialised pre-training (reconstruction) head.
inline void attach_pretraining_head(ModelWeights& m, std::uint64_t seed) {
  Rng rng(seed);
  m.pre_head = make_pretraining_head(m.hp, rng);
}

/// Drops the pre-training head and installs a fresh segmentation head.
inline void swap_to_segmentation_head(ModelWeights& m, std::uint64_t seed) {
  Rng rng(seed);
  m.pre_head.reset();
  m.seg_head = make_segmentation_head(m.hp, rng);
}

/// Closed-form trainable parameter count (segmentation head only).
inline std::size_t expected_parameter_count(const Hyperparams& hp) {
  const std::size_t D = hp.D, N = hp.N(), dff = hp.ffn_width();
  std::size_t total = D * hp.patch_len();
  if (hp.pos_mode == PosMode::learned) total += D * N;
  std::size_t stage = 3 * hp.n_h * hp.D_h * D + D * hp.D_h * hp.n_h + dff * D + dff + D * dff + D;
  if (hp.norm != NormMode::off) stage += 4 * D;
  total += hp.K * stage;
  if (hp.head_mode == HeadMode::voxel)
    total += hp.patch_voxels() * hp.n_class * (D * N + 1);
  else
    total += hp.n_class * (D + 1);
  return total;
}

// ---------------------------------------------------------------------------
// Forward pass pieces
// ---------------------------------------------------------------------------

/// Splits a W×W×W×c block into N = n³ flattened patches of length w³c.
inline std::vector<std::vector<double>> partition_block(const Tensor& block, const Hyperparams& hp) {
  hp.validate();
  detail::check_block(block, hp);
  const std::size_t n = hp.n, w = hp.w(), W = hp.W, c = hp.c;
  std::vector<std::vector<double>> patches(hp.N(), std::vector<double>(hp.patch_len()));
  for (std::size_t p0 = 0; p0 < n; ++p0)
    for (std::size_t p1 = 0; p1 < n; ++p1)
      for (std::size_t p2 = 0; p2 < n; ++p2) {
        auto& out = patches[(p0 * n + p1) * n + p2];
        std::size_t idx = 0;
        for (std::size_t u0 = 0; u0 < w; ++u0)
          for (std::size_t u1 = 0; u1 < w; ++u1) {
            const std::size_t base = (((p0 * w + u0) * W + (p1 * w + u1)) * W + p2 * w) * c;
            for (std::size_t k = 0; k < w * c; ++k) out[idx++] = block[base + k];
          }
      }
  return patches;
}

/// Inverse of partition_block.
inline Tensor unpartition_block(const std::vector<std::vector<double>>& patches, const Hyperparams& hp) {
  const std::size_t n = hp.n, w = hp.w(), W = hp.W, c = hp.c;
  if (patches.size() != hp.N()) throw DimensionError("unpartition_block: expected N patches");
  Tensor block(Shape{W, W, W, c});
  for (std::size_t p0 = 0; p0 < n; ++p0)
    for (std::size_t p1 = 0; p1 < n; ++p1)
      for (std::size_t p2 = 0; p2 < n; ++p2) {
        const auto& in = patches[(p0 * n + p1) * n + p2];
        if (in.size() != hp.patch_len()) throw DimensionError("unpartition_block: bad patch length");
        std::size_t idx = 0;
        for (std::size_t u0 = 0; u0 < w; ++u0)
          for (std::size_t u1 = 0; u1 < w; ++u1) {
            const std::size_t base = (((p0 * w + u0) * W + (p1 * w + u1)) * W + p2 * w) * c;
            for (std::size_t k = 0; k < w * c; ++k) block[base + k] = in[idx++];
          }
      }
  return block;
}

/// X⁰[:, j] = E·p_j + E_pos[:, j]  (E_pos omitted when pos_mode = none).
inline PatchSequence embed_sequence(Tape& tape, const std::vector<std::vector<double>>& patches,
                                    const ModelWeights& m) {
  const auto& hp = m.hp;
  const std::size_t len = hp.patch_len(), N = patches.size();
  if (m.E.shape() != Shape{hp.D, len}) throw ConfigError("embed_sequence: E has shape " + shape_string(m.E.shape()));
  Tensor P(Shape{len, N});
  for (std::size_t j = 0; j < N; ++j) {
    if (patches[j].size() != len)
      throw ConfigError("embed_sequence: patch " + std::to_string(j) + " has length " +
                        std::to_string(patches[j].size()) + ", expected " + std::to_string(len));
    for (std::size_t r = 0; r < len; ++r) P[r * N + j] = patches[j][r];
  }
  Tensor X = matmul(tape, m.E, P);
  if (hp.pos_mode != PosMode::none) {
    if (m.E_pos.shape() != Shape{hp.D, N})
      throw ConfigError("embed_sequence: E_pos has shape " + shape_string(m.E_pos.shape()));
    X = add(tape, X, m.E_pos);
  }
  return {X};
}

/// Multi-head self-attention sublayer with residual (and norm per hp.norm).
/// Per head: A = softmax(QᵀK/√D_h), output token j = Σ_m A[j,m]·V[:,m].
/// When `attention` is non-null the N×N matrices are appended to it.
inline Tensor msa(Tape& tape, const Tensor& X, const StageWeights& s, const Hyperparams& hp,
                  std::vector<Tensor>* attention = nullptr) {
  Tensor input = X;
  if (hp.norm == NormMode::pre) input = layer_norm(tape, X, s.msa_gamma, s.msa_beta, hp.ln_eps);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hp.D_h));
  std::vector<Tensor> heads;
  heads.reserve(s.heads.size());
  for (const auto& h : s.heads) {
    Tensor Q = matmul(tape, h.E_Q, input);
    Tensor Kt = matmul(tape, h.E_K, input);
    Tensor V = matmul(tape, h.E_V, input);
    Tensor logits = scale(tape, matmul(tape, transpose(tape, Q), Kt), inv_sqrt);
    Tensor A = softmax_rows(tape, logits);
    if (attention) attention->push_back(A);
    heads.push_back(matmul(tape, V, transpose(tape, A)));
  }
  Tensor stacked = concat_rows(tape, heads);
  Tensor out = add(tape, matmul(tape, s.E_reproj, stacked), X);
  if (hp.norm == NormMode::post) out = layer_norm(tape, out, s.msa_gamma, s.msa_beta, hp.ln_eps);
  return out;
}

/// X' = X + E_2·ReLU(E_1·X + b_1) + b_2 per column (norm per hp.norm).
inline Tensor ffn(Tape& tape, const Tensor& X, const StageWeights& s, const Hyperparams& hp) {
  Tensor input = X;
  if (hp.norm == NormMode::pre) input = layer_norm(tape, X, s.ffn_gamma, s.ffn_beta, hp.ln_eps);
  Tensor hidden = relu(tape, add_bias(tape, matmul(tape, s.E_1, input), s.b_1));
  Tensor out = add(tape, add_bias(tape, matmul(tape, s.E_2, hidden), s.b_2), X);
  if (hp.norm == NormMode::post) out = layer_norm(tape, out, s.ffn_gamma, s.ffn_beta, hp.ln_eps);
  return out;
}

/// Runs the K encoder stages on X⁰.
inline Tensor encode(Tape& tape, const Tensor& X0, const ModelWeights& m, AttentionRecord* record = nullptr) {
  Tensor X = X0;
  if (record) record->A.assign(m.stages.size(), {});
  for (std::size_t k = 0; k < m.stages.size(); ++k) {
    X = msa(tape, X, m.stages[k], m.hp, record ? &record->A[k] : nullptr);
    X = ffn(tape, X, m.stages[k], m.hp);
  }
  return X;
}

/// Voxel mode: w×w×w×n_class class probabilities for the center patch.
/// Patch mode: n×n×n×n_class, one distribution per patch.
inline Tensor segmentation_head(Tape& tape, const Tensor& XK, const ModelWeights& m) {
  const auto& hp = m.hp;
  if (!m.seg_head) throw ContractError("segmentation_head: model has no segmentation head");
  const auto& head = *m.seg_head;
  if (hp.head_mode == HeadMode::voxel) {
    Tensor flat = reshape(tape, XK, Shape{hp.D * hp.N(), 1});
    Tensor logits = add_bias(tape, matmul(tape, head.weight, flat), head.bias);
    Tensor probs = softmax_rows(tape, reshape(tape, logits, Shape{hp.patch_voxels(), hp.n_class}));
    const std::size_t w = hp.w();
    return reshape(tape, probs, Shape{w, w, w, hp.n_class});
  }
  Tensor logits = add_bias(tape, matmul(tape, head.weight, XK), head.bias);  // n_class×N
  Tensor probs = softmax_rows(tape, transpose(tape, logits));                 // N×n_class
  return reshape(tape, probs, Shape{hp.n, hp.n, hp.n, hp.n_class});
}

/// Linear reconstruction of the center patch, w×w×w×c, no softmax.
inline Tensor pretraining_head(Tape& tape, const Tensor& XK, const ModelWeights& m) {
  const auto& hp = m.hp;
  if (!m.pre_head) throw ContractError("pretraining_head: model has no pre-training head");
  Tensor flat = reshape(tape, XK, Shape{hp.D * hp.N(), 1});
  Tensor out = add_bias(tape, matmul(tape, m.pre_head->weight, flat), m.pre_head->bias);
  const std::size_t w = hp.w();
  return reshape(tape, out, Shape{w, w, w, hp.c});
}

enum class OutputKind { segmentation, pretraining };

struct ForwardResult {
  Tensor output;
  std::optional<AttentionRecord> attention;
};

/// partition → embed → K encoder stages → output head. Deterministic for fixed
/// weights and input.
inline ForwardResult forward(Tape& tape, const Tensor& block, const ModelWeights& m, bool capture_attention = false,
                             OutputKind kind = OutputKind::segmentation) {
  ForwardResult r;
  const auto patches = partition_block(block, m.hp);
  PatchSequence seq = embed_sequence(tape, patches, m);
  AttentionRecord record;
  Tensor XK = encode(tape, seq.tokens, m, capture_attention ? &record : nullptr);
  r.output = kind == OutputKind::segmentation ? segmentation_head(tape, XK, m) : pretraining_head(tape, XK, m);
  if (capture_attention) r.attention = std::move(record);
  return r;
}

}  // namespace atsg
