#pragma once

#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "atsg/checkpoint.hpp"
#include "atsg/dataset.hpp"
#include "atsg/errors.hpp"
#include "atsg/harness.hpp"
#include "atsg/inference.hpp"
#include "atsg/metrics.hpp"
#include "atsg/model.hpp"
#include "atsg/model_check.hpp"
#include "atsg/training.hpp"
#include "atsg/volume.hpp"

namespace atsg::cli {

namespace fs = std::filesystem;

enum ExitCode : int { ok = 0, usage = 1, data = 2, numeric = 3 };

inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const DataError*>(&e) || dynamic_cast<const UndefinedMetricError*>(&e)) return data;
  if (dynamic_cast<const NumericError*>(&e)) return numeric;
  if (dynamic_cast<const nlohmann::json::exception*>(&e)) return usage;
  if (dynamic_cast<const fs::filesystem_error*>(&e)) return data;
  return usage;
}

/// Hyperparams and training config after applying, in order, built-in
/// defaults, the run-config file and command-line flags.
struct RunConfig {
  Hyperparams hp = Hyperparams::paper_defaults();
  TrainConfig train;
  nlohmann::json extra = nlohmann::json::object();  // other top-level keys (e.g. "grid")
};

/// Run-config file: {"hyperparams": {...}, "train": {...}, ...}; both
/// sections are partial overrides.
inline void apply_run_config_file(RunConfig& rc, const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open run config '" + path.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
    if (!j.is_object()) throw ConfigError("run config '" + path.string() + "' must be an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
      if (it.key() == "hyperparams")
        it.value().get_to(rc.hp);
      else if (it.key() == "train")
        it.value().get_to(rc.train);
      else
        rc.extra[it.key()] = it.value();
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("run config '" + path.string() + "': " + e.what());
  }
}

/// Flags shared by every command that trains.
struct TrainFlags {
  std::string config;
  bool tiny = false;
  std::uint64_t seed = 0;
  std::size_t epochs = 0, batch_size = 0, blocks_per_epoch = 0, val_blocks = 0;
  double lr = 0.0;
  bool verbose = false;
  CLI::Option *o_seed = nullptr, *o_epochs = nullptr, *o_batch = nullptr, *o_blocks = nullptr, *o_val = nullptr,
              *o_lr = nullptr;

  void add_to(CLI::App& app) {
    app.add_option("--config", config, "Run-config JSON file ({\"hyperparams\":{..},\"train\":{..}})")
        ;
    app.add_flag("--tiny", tiny, "Start from the tiny preset instead of the full-size hyperparameters");
    o_seed = app.add_option("--seed", seed, "Seed for initialisation and sampling");
    o_epochs = app.add_option("--epochs", epochs, "Number of epochs");
    o_batch = app.add_option("--batch-size", batch_size, "Blocks per mini-batch");
    o_blocks = app.add_option("--blocks-per-epoch", blocks_per_epoch, "Training blocks drawn per epoch");
    o_val = app.add_option("--val-blocks", val_blocks, "Fixed validation blocks");
    o_lr = app.add_option("--lr", lr, "Initial learning rate");
    app.add_flag("--verbose", verbose, "Log one line per epoch");
  }

  RunConfig resolve() const {
    RunConfig rc;
    if (tiny) rc.hp = Hyperparams::tiny();
    if (!config.empty()) apply_run_config_file(rc, config);
    if (o_seed->count()) rc.train.seed = seed;
    if (o_epochs->count()) rc.train.max_epochs = epochs;
    if (o_batch->count()) rc.train.batch_size = batch_size;
    if (o_blocks->count()) rc.train.blocks_per_epoch = blocks_per_epoch;
    if (o_val->count()) rc.train.val_blocks = val_blocks;
    if (o_lr->count()) rc.train.lr = lr;
    if (verbose) rc.train.verbose = true;
    rc.hp.validate();
    rc.train.validate();
    return rc;
  }
};

inline void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << j.dump(2) << '\n';
}

inline void snapshot(const fs::path& dir, const RunConfig& rc) {
  write_json(dir / "run_config.json", {{"hyperparams", rc.hp}, {"train", rc.train}});
}

inline std::vector<ImageGrid> load_images(const DatasetManifest& m, Split s) {
  std::vector<ImageGrid> out;
  for (const auto& e : m.in_split(s)) out.push_back(prepare_image(read_volume(m.resolve(e.image))));
  return out;
}

inline PaddingMode parse_padding(const std::string& s) { return s == "zero" ? PaddingMode::zero : PaddingMode::mirror; }

inline nlohmann::json number_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(); }

/// Parses argv and runs one command. Diagnostics go to `err`, short
/// human-readable summaries to `out`, results to files.
inline int dispatch(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Convolution-free 3D transformer segmentation"};
  app.name("atsg");
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate synthetic volumes, masks and a split manifest");
  std::size_t g_count = 0;
  std::vector<std::size_t> g_shape{32};
  std::uint64_t g_seed = 0;
  std::string g_out;
  gen->add_option("--count", g_count, "Number of volumes")->required()->check(CLI::PositiveNumber);
  gen->add_option("--shape", g_shape, "Volume extent: one value (cube) or three")->expected(1, 3);
  gen->add_option("--seed", g_seed, "Generator and split seed");
  gen->add_option("--out", g_out, "Output directory")->required();

  // train / pretrain / finetune
  auto* tr = app.add_subcommand("train", "Train a segmentation model from scratch");
  TrainFlags t_flags;
  std::string t_data, t_out;
  tr->add_option("--data", t_data, "Dataset manifest")->required();
  tr->add_option("--out", t_out, "Output directory (model.atsg, stats.csv, run_config.json)")->required();
  t_flags.add_to(*tr);

  auto* pre = app.add_subcommand("pretrain", "Self-supervised pre-training on the training-split images");
  TrainFlags p_flags;
  std::string p_data, p_out, p_task = "denoising";
  double p_snr = 10.0;
  pre->add_option("--data", p_data, "Dataset manifest")->required();
  pre->add_option("--out", p_out, "Output directory")->required();
  pre->add_option("--task", p_task, "denoising or inpainting")->check(CLI::IsMember({"denoising", "inpainting"}));
  auto* o_snr = pre->add_option("--snr-db", p_snr, "Denoising SNR in dB");
  p_flags.add_to(*pre);

  auto* fin = app.add_subcommand("finetune", "Swap in a segmentation head and fine-tune a pre-trained model");
  TrainFlags f_flags;
  std::string f_ckpt, f_data, f_out;
  fin->add_option("--ckpt", f_ckpt, "Pre-trained checkpoint")->required();
  fin->add_option("--data", f_data, "Dataset manifest")->required();
  fin->add_option("--out", f_out, "Output directory")->required();
  f_flags.add_to(*fin);

  // segment / attention
  auto* seg = app.add_subcommand("segment", "Sliding-window segmentation of one volume");
  std::string s_ckpt, s_in, s_out, s_padding = "mirror";
  bool s_attention = false;
  seg->add_option("--ckpt", s_ckpt, "Model checkpoint")->required();
  seg->add_option("--in", s_in, "Input image volume")->required();
  seg->add_option("--out", s_out, "Output directory (prob.avol, labels.avol)")->required();
  seg->add_flag("--attention", s_attention, "Also write one attention volume per stage and head");
  seg->add_option("--padding", s_padding, "Border padding: mirror or zero")->check(CLI::IsMember({"mirror", "zero"}));

  auto* att = app.add_subcommand("attention", "Write aggregated attention maps for one volume");
  std::string a_ckpt, a_in, a_out, a_padding = "mirror";
  att->add_option("--ckpt", a_ckpt, "Model checkpoint")->required();
  att->add_option("--in", a_in, "Input image volume")->required();
  att->add_option("--out", a_out, "Output directory")->required();
  att->add_option("--padding", a_padding, "Border padding: mirror or zero")->check(CLI::IsMember({"mirror", "zero"}));

  // eval
  auto* ev = app.add_subcommand("eval", "DSC, HD95 and ASSD of a predicted mask against ground truth");
  std::string e_pred, e_gt, e_out;
  int e_class = 1;
  ev->add_option("--pred", e_pred, "Predicted label volume")->required();
  ev->add_option("--gt", e_gt, "Ground-truth label volume")->required();
  ev->add_option("--class", e_class, "Foreground class")->check(CLI::Range(1, 255));
  ev->add_option("--out", e_out, "Write the scores as JSON to this file");

  // ablate / lowlabel
  auto* abl = app.add_subcommand("ablate", "Train and evaluate the hyperparameter grid");
  TrainFlags b_flags;
  std::string b_data, b_out;
  std::vector<std::uint64_t> b_seeds{0};
  abl->add_option("--data", b_data, "Dataset manifest")->required();
  abl->add_option("--out", b_out, "Output directory (ablations.csv, per-config results)")->required();
  abl->add_option("--seeds", b_seeds, "Repetition seeds");
  b_flags.add_to(*abl);

  auto* low = app.add_subcommand("lowlabel", "Reduced-label comparison of scratch and pre-trained initialisation");
  TrainFlags l_flags;
  std::string l_data, l_out;
  std::vector<std::size_t> l_ntrain{5, 10, 15};
  std::vector<std::string> l_options{"scratch", "denoising", "inpainting"};
  std::vector<std::uint64_t> l_seeds{0};
  low->add_option("--data", l_data, "Dataset manifest")->required();
  low->add_option("--out", l_out, "Output directory (low_label.csv)")->required();
  low->add_option("--n-train", l_ntrain, "Labeled training volume counts");
  low->add_option("--options", l_options, "Initialisations: scratch, denoising, inpainting")
      ->check(CLI::IsMember({"scratch", "denoising", "inpainting"}));
  low->add_option("--seeds", l_seeds, "Repetition seeds");
  l_flags.add_to(*low);

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "Compare analytic gradients with central finite differences");
  bool c_tiny = false;
  std::string c_config;
  std::uint64_t c_seed = 0;
  double c_h = 1e-3, c_tol = 1e-4;
  gc->add_flag("--tiny", c_tiny, "Use the tiny preset");
  gc->add_option("--config", c_config, "Run-config JSON file (hyperparams section is used)")
      ;
  gc->add_option("--seed", c_seed, "Seed for weights and inputs");
  gc->add_option("--step", c_h, "Finite-difference step")->check(CLI::PositiveNumber);
  gc->add_option("--tol", c_tol, "Pass threshold on the max relative error")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? ok : usage;
  }

  try {
    if (*gen) {
      if (g_shape.size() != 1 && g_shape.size() != 3) throw ConfigError("--shape takes one or three values");
      const Dims3 dims = g_shape.size() == 1 ? Dims3{g_shape[0], g_shape[0], g_shape[0]}
                                             : Dims3{g_shape[0], g_shape[1], g_shape[2]};
      for (auto d : dims)
        if (d == 0) throw ConfigError("--shape must be positive");
      std::vector<std::pair<std::string, std::optional<std::string>>> paths;
      for (std::size_t i = 0; i < g_count; ++i) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%03zu", i);
        paths.push_back({std::string("img_") + buf + ".avol", std::string("mask_") + buf + ".avol"});
      }
      auto manifest = split_manifest(paths, SplitRatios{}, g_seed);  // validates before writing
      fs::create_directories(g_out);
      const auto cases = generate_synthetic_dataset(g_count, dims, g_seed);
      for (std::size_t i = 0; i < g_count; ++i) {
        write_volume(fs::path(g_out) / paths[i].first, cases[i].image);
        write_volume(fs::path(g_out) / *paths[i].second, cases[i].mask);
      }
      save_manifest(fs::path(g_out) / "manifest.json", manifest);
      out << "wrote " << g_count << " volumes to " << g_out << '\n';
      return ok;
    }

    if (*tr) {
      const auto rc = t_flags.resolve();
      const auto m = load_manifest(t_data);
      const auto trn = load_split(m, Split::train, rc.hp.n_class);
      const auto val = load_split(m, Split::val, rc.hp.n_class);
      fs::create_directories(t_out);
      snapshot(t_out, rc);
      const fs::path stats = fs::path(t_out) / "stats.csv";
      fs::remove(stats);
      auto r = train(init_weights(rc.hp, rc.train.seed), trn, val, rc.train,
                     {fs::path(t_out) / "model.atsg", stats});
      out << "best validation loss " << (r.history.empty() ? r.initial_val_loss : [&] {
        double b = r.history[0].val_loss;
        for (const auto& h : r.history) b = std::min(b, h.val_loss);
        return b;
      }()) << '\n';
      return ok;
    }

    if (*pre) {
      auto rc = p_flags.resolve();
      rc.train.pretrain_task = p_task == "inpainting" ? PretrainTask::inpainting : PretrainTask::denoising;
      if (o_snr->count()) rc.train.snr_db = p_snr;
      rc.train.validate();
      const auto m = load_manifest(p_data);
      const auto images = load_images(m, Split::train);
      fs::create_directories(p_out);
      snapshot(p_out, rc);
      const fs::path stats = fs::path(p_out) / "stats.csv";
      fs::remove(stats);
      pretrain(init_weights(rc.hp, rc.train.seed), images, rc.train, {fs::path(p_out) / "model.atsg", stats});
      out << "pre-trained on " << images.size() << " volumes\n";
      return ok;
    }

    if (*fin) {
      auto rc = f_flags.resolve();
      ModelWeights pretrained = load_checkpoint(f_ckpt);
      rc.hp = pretrained.hp;
      const auto m = load_manifest(f_data);
      const auto trn = load_split(m, Split::train, rc.hp.n_class);
      const auto val = load_split(m, Split::val, rc.hp.n_class);
      fs::create_directories(f_out);
      snapshot(f_out, rc);
      const fs::path stats = fs::path(f_out) / "stats.csv";
      fs::remove(stats);
      finetune(pretrained, trn, val, rc.train, {fs::path(f_out) / "model.atsg", stats});
      out << "fine-tuned on " << trn.size() << " volumes\n";
      return ok;
    }

    if (*seg || *att) {
      const bool segment = static_cast<bool>(*seg);
      const auto ckpt = load_checkpoint(segment ? s_ckpt : a_ckpt);
      const Volume vol = read_volume(segment ? s_in : a_in);
      const ImageGrid img = prepare_image(vol);
      const fs::path dir = segment ? s_out : a_out;
      InferenceOptions opt;
      opt.padding = parse_padding(segment ? s_padding : a_padding);
      fs::create_directories(dir);
      if (segment) {
        if (!ckpt.seg_head) throw DataError("checkpoint has no segmentation head");
        const auto s = segment_volume(img, ckpt, opt);
        write_volume(dir / "prob.avol", probabilities_to_volume(s, ckpt.hp.n_class));
        write_volume(dir / "labels.avol", mask_to_volume(s.labels));
      }
      if (!segment || s_attention) {
        for (const auto& a : aggregate_attention(img, ckpt, opt))
          write_volume(dir / (a.name() + ".avol"), attention_to_volume(a, img.dims, img.spacing));
      }
      out << "wrote results to " << dir.string() << '\n';
      return ok;
    }

    if (*ev) {
      const Volume pv = read_volume(e_pred), gv = read_volume(e_gt);
      const auto pm = mask_from_volume(pv, 256), gm = mask_from_volume(gv, 256);
      const auto cls = static_cast<std::uint8_t>(e_class);
      nlohmann::json j{{"class", e_class}, {"dsc", dsc(pm, gm, cls)}};
      try {
        const auto sd = surface_distance_stats(pm, gm, cls);
        j["hd95_mm"] = sd.hd95_mm;
        j["assd_mm"] = sd.assd_mm;
      } catch (const UndefinedMetricError& e) {
        j["hd95_mm"] = nullptr;
        j["assd_mm"] = nullptr;
        err << "warning: " << e.what() << '\n';
      }
      if (!e_out.empty()) write_json(e_out, j);
      out << j.dump() << '\n';
      return ok;
    }

    if (*abl) {
      const auto rc = b_flags.resolve();
      ExperimentGrid grid;
      grid.seeds = b_seeds;
      grid.output_dir = b_out;
      if (rc.extra.contains("grid")) {
        for (const auto& je : rc.extra.at("grid")) {
          GridEntry e;
          e.name = je.at("name").get<std::string>();
          e.hyperparams = je.value("hyperparams", nlohmann::json::object());
          e.train = je.value("train", nlohmann::json::object());
          grid.entries.push_back(std::move(e));
        }
      } else {
        grid.entries = hyperparameter_grid(rc.hp);
      }
      resolve_grid(grid, rc.hp, rc.train);  // config errors before loading anything
      const auto data = load_experiment_data(load_manifest(b_data), rc.hp.n_class);
      const auto rows = run_ablations(grid, data, rc.hp, rc.train);
      std::size_t failed = 0;
      for (const auto& r : rows) failed += r.status != "ok";
      out << rows.size() << " configurations, " << failed << " failed\n";
      return ok;
    }

    if (*low) {
      const auto rc = l_flags.resolve();
      std::vector<InitOption> options;
      for (const auto& s : l_options) options.push_back(nlohmann::json(s).get<InitOption>());
      const auto data = load_experiment_data(load_manifest(l_data), rc.hp.n_class);
      const auto cells = run_low_label_protocol(l_ntrain, options, l_seeds, data, rc.hp, rc.train, l_out);
      out << cells.size() << " cells written to " << (fs::path(l_out) / "low_label.csv").string() << '\n';
      return ok;
    }

    if (*gc) {
      RunConfig rc;
      if (c_tiny) rc.hp = Hyperparams::tiny();
      if (!c_config.empty()) apply_run_config_file(rc, c_config);
      const auto r = model_grad_check(rc.hp, c_seed, c_h);
      out.precision(6);
      out << std::scientific;
      out << "segmentation max_rel_error " << r.segmentation.max_rel_error << " over "
          << r.segmentation.coordinates << " coordinates\n";
      out << "pretraining max_rel_error " << r.pretraining.max_rel_error << " over " << r.pretraining.coordinates
          << " coordinates\n";
      const bool pass = r.segmentation.passed(c_tol) && r.pretraining.passed(c_tol);
      out << (pass ? "PASS" : "FAIL") << '\n';
      if (!pass) {
        for (const auto* rep : {&r.segmentation, &r.pretraining})
          for (const auto& w : rep->worst)
            err << w.tensor << '[' << w.index << "] analytic " << w.analytic << " numeric " << w.numeric << '\n';
      }
      return pass ? ok : numeric;
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return exit_code_for(e);
  }
  return usage;
}

}  // namespace atsg::cli
