#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "atsg/dataset.hpp"
#include "atsg/errors.hpp"
#include "atsg/inference.hpp"
#include "atsg/log.hpp"
#include "atsg/metrics.hpp"
#include "atsg/model.hpp"
#include "atsg/stats.hpp"
#include "atsg/training.hpp"

namespace atsg {

/// Train/val/test volumes for one experiment.
struct ExperimentData {
  std::vector<LabeledVolume> train;
  std::vector<LabeledVolume> val;
  std::vector<LabeledVolume> test;
};

inline ExperimentData load_experiment_data(const DatasetManifest& m, std::size_t n_class) {
  return {load_split(m, Split::train, n_class), load_split(m, Split::val, n_class), load_split(m, Split::test, n_class)};
}

struct CaseScores {
  std::string name;
  double dsc = 0.0;
  double hd95_mm = std::numeric_limits<double>::quiet_NaN();
  double assd_mm = std::numeric_limits<double>::quiet_NaN();
};

/// Sliding-window segmentation of every volume, scored on foreground class 1.
/// HD95/ASSD are NaN when either mask has no foreground.
inline std::vector<CaseScores> evaluate_model(const ModelWeights& m, const std::vector<LabeledVolume>& cases,
                                              const InferenceOptions& opt = {}) {
  std::vector<CaseScores> out;
  for (const auto& c : cases) {
    const auto seg = segment_volume(c.image, m, opt);
    CaseScores s;
    s.name = c.name;
    s.dsc = dsc(seg.labels, c.mask, 1);
    try {
      const auto sd = surface_distance_stats(seg.labels, c.mask, 1);
      s.hd95_mm = sd.hd95_mm;
      s.assd_mm = sd.assd_mm;
    } catch (const UndefinedMetricError&) {
    }
    out.push_back(s);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Hyperparameter ablations
// ---------------------------------------------------------------------------

/// A named set of overrides applied on top of the base hyperparams/config.
struct GridEntry {
  std::string name;
  nlohmann::json hyperparams = nlohmann::json::object();
  nlohmann::json train = nlohmann::json::object();
};

struct ExperimentGrid {
  std::vector<GridEntry> entries;
  std::vector<std::uint64_t> seeds{0};
  std::filesystem::path output_dir;
};

/// The eight hyperparameter rows (baseline first) expressed as overrides of
/// `base`. Depth and head counts move relative to the base so the grid also
/// works at reduced scale: deeper = K + 3, shallower = max(1, K − 3) (K=7 gives
/// the 10/4 rows), more heads = 2·n_h, larger blocks use n = 5 with the same
/// patch size.
inline std::vector<GridEntry> hyperparameter_grid(const Hyperparams& base) {
  const std::size_t w = base.w();
  return {
      {"baseline", nlohmann::json::object(), nlohmann::json::object()},
      {"larger blocks, n=5", {{"n", 5}, {"W", 5 * w}}, nlohmann::json::object()},
      {"no positional encoding", {{"pos_mode", PosMode::none}}, nlohmann::json::object()},
      {"fixed positional encoding", {{"pos_mode", PosMode::fixed_sinusoidal}}, nlohmann::json::object()},
      {"deeper network", {{"K", base.K + 3}}, nlohmann::json::object()},
      {"shallower network", {{"K", base.K > 3 ? base.K - 3 : 1}}, nlohmann::json::object()},
      {"more heads", {{"n_h", base.n_h * 2}}, nlohmann::json::object()},
      {"single head", {{"n_h", 1}}, nlohmann::json::object()},
  };
}

struct AblationRow {
  std::string config;
  std::size_t cases = 0;
  MeanStd dsc, hd95, assd;
  std::string status = "ok";
};

namespace detail {

inline std::string slug(const std::string& name) {
  std::string s;
  for (char ch : name) {
    if (std::isalnum(static_cast<unsigned char>(ch)))
      s += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    else if (!s.empty() && s.back() != '_')
      s += '_';
  }
  while (!s.empty() && s.back() == '_') s.pop_back();
  return s.empty() ? "config" : s;
}

inline std::string csv_number(double v) {
  if (!std::isfinite(v)) return "nan";
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char ch : s) q += ch == '"' ? std::string("\"\"") : std::string(1, ch);
  return q + "\"";
}

inline nlohmann::json number_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(); }
inline double number_from(const nlohmann::json& j) {
  return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

inline nlohmann::json row_to_json(const AblationRow& r) {
  auto ms = [](const MeanStd& m) {
    return nlohmann::json{{"mean", number_or_null(m.mean)}, {"std", number_or_null(m.std)}, {"count", m.count}};
  };
  return {{"config", r.config}, {"cases", r.cases}, {"dsc", ms(r.dsc)},
          {"hd95", ms(r.hd95)},  {"assd", ms(r.assd)}, {"status", r.status}};
}

inline AblationRow row_from_json(const nlohmann::json& j) {
  auto ms = [](const nlohmann::json& m) {
    return MeanStd{number_from(m.at("mean")), number_from(m.at("std")), m.at("count").get<std::size_t>()};
  };
  AblationRow r;
  r.config = j.at("config").get<std::string>();
  r.cases = j.at("cases").get<std::size_t>();
  r.dsc = ms(j.at("dsc"));
  r.hd95 = ms(j.at("hd95"));
  r.assd = ms(j.at("assd"));
  r.status = j.at("status").get<std::string>();
  return r;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << text;
}

}  // namespace detail

/// Resolved (hyperparams, train config) of one grid entry.
struct ResolvedConfig {
  Hyperparams hp;
  TrainConfig cfg;
};

inline ResolvedConfig resolve_entry(const GridEntry& e, const Hyperparams& base_hp, const TrainConfig& base_cfg) {
  ResolvedConfig r{base_hp, base_cfg};
  try {
    e.hyperparams.get_to(r.hp);
    e.train.get_to(r.cfg);
  } catch (const nlohmann::json::exception& ex) {
    throw ConfigError("grid entry '" + e.name + "': " + ex.what());
  }
  r.hp.validate();
  r.cfg.validate();
  return r;
}

/// Validates the whole grid up front: unique names and valid overrides.
inline std::vector<ResolvedConfig> resolve_grid(const ExperimentGrid& grid, const Hyperparams& base_hp,
                                                const TrainConfig& base_cfg) {
  std::set<std::string> names, slugs;
  std::vector<ResolvedConfig> out;
  for (const auto& e : grid.entries) {
    if (!names.insert(e.name).second) throw ConfigError("duplicate grid entry name '" + e.name + "'");
    if (!slugs.insert(detail::slug(e.name)).second)
      throw ConfigError("grid entry '" + e.name + "' collides with another entry's file name");
    out.push_back(resolve_entry(e, base_hp, base_cfg));
  }
  if (grid.seeds.empty()) throw ConfigError("experiment grid needs at least one seed");
  return out;
}

inline void write_ablation_csv(const std::filesystem::path& path, const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "config,cases,dsc_mean,dsc_std,hd95_mean,hd95_std,assd_mean,assd_std,status\n";
  for (const auto& r : rows)
    os << detail::csv_field(r.config) << ',' << r.cases << ',' << detail::csv_number(r.dsc.mean) << ','
       << detail::csv_number(r.dsc.std) << ',' << detail::csv_number(r.hd95.mean) << ','
       << detail::csv_number(r.hd95.std) << ',' << detail::csv_number(r.assd.mean) << ','
       << detail::csv_number(r.assd.std) << ',' << detail::csv_field(r.status) << '\n';
  detail::write_text(path, os.str());
}

/// Trains and evaluates every grid entry (once per seed) and pools the test
/// scores into mean ± std rows. Each finished entry leaves
/// `<slug>.result.json`; entries with an existing result file are not rerun.
/// A failing entry is recorded in its row's status and the rest continue.
/// The table is written to `ablations.csv` in the output directory.
inline std::vector<AblationRow> run_ablations(const ExperimentGrid& grid, const ExperimentData& data,
                                              const Hyperparams& base_hp, const TrainConfig& base_cfg) {
  const auto resolved = resolve_grid(grid, base_hp, base_cfg);
  std::vector<AblationRow> rows;
  if (!grid.output_dir.empty()) std::filesystem::create_directories(grid.output_dir);
  for (std::size_t i = 0; i < grid.entries.size(); ++i) {
    const auto& entry = grid.entries[i];
    const auto& rc = resolved[i];
    const auto stem = detail::slug(entry.name);
    const auto result_path = grid.output_dir.empty() ? std::filesystem::path() : grid.output_dir / (stem + ".result.json");
    if (!result_path.empty() && std::filesystem::exists(result_path)) {
      std::ifstream in(result_path);
      rows.push_back(detail::row_from_json(nlohmann::json::parse(in)));
      continue;
    }
    AblationRow row;
    row.config = entry.name;
    try {
      if (!grid.output_dir.empty()) {
        nlohmann::json snap{{"name", entry.name}, {"hyperparams", rc.hp}, {"train", rc.cfg}, {"seeds", grid.seeds}};
        detail::write_text(grid.output_dir / (stem + ".config.json"), snap.dump(2) + "\n");
      }
      std::vector<double> d, h, a;
      for (auto seed : grid.seeds) {
        TrainConfig cfg = rc.cfg;
        cfg.seed = seed;
        auto result = train(init_weights(rc.hp, seed), data.train, data.val, cfg);
        for (const auto& s : evaluate_model(result.best, data.test)) {
          d.push_back(s.dsc);
          h.push_back(s.hd95_mm);
          a.push_back(s.assd_mm);
        }
      }
      row.cases = d.size();
      row.dsc = mean_std(d);
      row.hd95 = mean_std(h);
      row.assd = mean_std(a);
    } catch (const std::exception& e) {
      row.status = std::string("failed: ") + e.what();
      log_warning("ablation '" + entry.name + "' failed: " + e.what());
    }
    if (!result_path.empty() && row.status == "ok")
      detail::write_text(result_path, detail::row_to_json(row).dump(2) + "\n");
    rows.push_back(row);
  }
  if (!grid.output_dir.empty()) write_ablation_csv(grid.output_dir / "ablations.csv", rows);
  return rows;
}

// ---------------------------------------------------------------------------
// Reduced-label protocol
// ---------------------------------------------------------------------------

enum class InitOption { scratch, denoising, inpainting };

NLOHMANN_JSON_SERIALIZE_ENUM(InitOption, {{InitOption::scratch, "scratch"},
                                          {InitOption::denoising, "denoising"},
                                          {InitOption::inpainting, "inpainting"}})

inline std::string init_option_name(InitOption o) { return nlohmann::json(o).get<std::string>(); }

struct LowLabelCell {
  std::size_t n_train = 0;
  InitOption option = InitOption::scratch;
  std::vector<double> dsc_per_seed;  // mean test DSC of each seed's run
  double mean = 0.0;
  double min = 0.0;
  double max = 0.0;
};

/// Trains with only the first n labeled training volumes, from scratch or
/// after self-supervised pre-training on the remaining training images, and
/// records the mean test DSC for every (n_train, option, seed).
inline std::vector<LowLabelCell> run_low_label_protocol(const std::vector<std::size_t>& n_train,
                                                        const std::vector<InitOption>& options,
                                                        const std::vector<std::uint64_t>& seeds,
                                                        const ExperimentData& data, const Hyperparams& hp,
                                                        const TrainConfig& base_cfg,
                                                        const std::filesystem::path& output_dir = {}) {
  if (n_train.empty() || options.empty() || seeds.empty())
    throw ConfigError("low-label protocol: n_train, options and seeds must be non-empty");
  const std::size_t largest = *std::max_element(n_train.begin(), n_train.end());
  const bool pretraining =
      std::any_of(options.begin(), options.end(), [](InitOption o) { return o != InitOption::scratch; });
  if (std::find(n_train.begin(), n_train.end(), std::size_t{0}) != n_train.end())
    throw ConfigError("low-label protocol: n_train entries must be >= 1");
  if (data.train.size() < largest + (pretraining ? 1 : 0))
    throw DataError("low-label protocol: " + std::to_string(data.train.size()) +
                    " training volumes cannot cover n_train=" + std::to_string(largest) +
                    (pretraining ? " plus an unlabeled pool" : ""));
  if (data.val.empty() || data.test.empty())
    throw DataError("low-label protocol: needs validation and test volumes");
  hp.validate();
  base_cfg.validate();

  std::vector<LowLabelCell> cells;
  for (auto n : n_train) {
    const std::vector<LabeledVolume> labeled(data.train.begin(), data.train.begin() + static_cast<std::ptrdiff_t>(n));
    std::vector<ImageGrid> unlabeled;
    for (std::size_t i = n; i < data.train.size(); ++i) unlabeled.push_back(data.train[i].image);
    for (auto option : options) {
      LowLabelCell cell;
      cell.n_train = n;
      cell.option = option;
      for (auto seed : seeds) {
        TrainConfig cfg = base_cfg;
        cfg.seed = seed;
        ModelWeights init = init_weights(hp, seed);
        ModelWeights trained;
        if (option == InitOption::scratch) {
          trained = train(std::move(init), labeled, data.val, cfg).best;
        } else {
          cfg.pretrain_task = option == InitOption::denoising ? PretrainTask::denoising : PretrainTask::inpainting;
          trained = pretrain_then_finetune(std::move(init), unlabeled, labeled, data.val, cfg).finetuning.best;
        }
        const auto scores = evaluate_model(trained, data.test);
        double s = 0.0;
        for (const auto& c : scores) s += c.dsc;
        cell.dsc_per_seed.push_back(s / static_cast<double>(scores.size()));
      }
      cell.mean = mean_std(cell.dsc_per_seed).mean;
      cell.min = *std::min_element(cell.dsc_per_seed.begin(), cell.dsc_per_seed.end());
      cell.max = *std::max_element(cell.dsc_per_seed.begin(), cell.dsc_per_seed.end());
      cells.push_back(std::move(cell));
    }
  }

  if (!output_dir.empty()) {
    std::filesystem::create_directories(output_dir);
    std::ostringstream os;
    os << "n_train,option,seeds,dsc_mean,dsc_min,dsc_max\n";
    for (const auto& c : cells)
      os << c.n_train << ',' << init_option_name(c.option) << ',' << c.dsc_per_seed.size() << ','
         << detail::csv_number(c.mean) << ',' << detail::csv_number(c.min) << ',' << detail::csv_number(c.max) << '\n';
    detail::write_text(output_dir / "low_label.csv", os.str());
  }
  return cells;
}

}  // namespace atsg
