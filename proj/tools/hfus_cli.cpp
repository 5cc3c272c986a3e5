// Copyright 2026 The HFUS Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// hfus: generate synthetic data, train, evaluate, predict and export ROC data.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "hfus/checkpoint.hpp"
#include "hfus/config.hpp"
#include "hfus/evaluation.hpp"
#include "hfus/io.hpp"
#include "hfus/synthetic.hpp"
#include "hfus/training.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace hfus;

namespace {

constexpr const char* kCheckpointFile = "checkpoint.hfus";
constexpr const char* kHistoryFile = "history.csv";
constexpr const char* kConfigFile = "config.ini";

int thread_cap() {
  const char* env = std::getenv("HFUS_THREADS");
  if (!env || !*env) return 1;
  const std::string s(env);
  if (s.find_first_not_of("0123456789") != std::string::npos || std::stoi(s) < 1) {
    throw DomainError("HFUS_THREADS must be a positive integer, got '" + s + "'");
  }
  return std::stoi(s);
}

// Flags that map onto config keys. Values stay strings until the config is
// assembled, so a flag overrides the config file only when given.
struct FlagSet {
  std::map<std::string, std::string> values;  // key -> raw value
  std::vector<std::pair<std::string, CLI::Option*>> options;

  void add(CLI::App* app, const std::string& flag, const std::string& key, const std::string& help) {
    options.emplace_back(key, app->add_option("--" + flag, values[key], help));
  }

  RunConfig build(const std::string& config_path, std::set<std::string>* seen = nullptr) const {
    RunConfig cfg;
    if (!config_path.empty()) apply_config_file(cfg, config_path, seen);
    for (const auto& [key, opt] : options) {
      if (opt->count() == 0) continue;
      try {
        set_config_value(cfg, key, values.at(key));
      } catch (const DomainError& e) {
        throw DomainError(std::string(e.what()) + " (flag " + opt->get_name() + ")");
      }
      if (seen) seen->insert(key);
    }
    return cfg;
  }
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

void echo_config(const fs::path& path, const RunConfig& cfg, const std::string& command) {
  write_text(path, "# hfus " + command + " effective configuration (HFUS_THREADS=" + std::to_string(thread_cap()) +
                       ")\n" + config_to_text(cfg));
}

fs::path sibling(const fs::path& file, const std::string& suffix) {
  return file.parent_path() / (file.stem().string() + suffix);
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory " + dir.string());
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const RunConfig& cfg) {
  if (cfg.out.empty()) throw DomainError("gen-data: --out is required");
  CorpusRequest req;
  req.studies = cfg.studies;
  req.seed = cfg.data_seed;
  req.min_images = cfg.min_images;
  req.max_images = cfg.max_images;
  req.confounder = cfg.confounder;
  req.params.size = cfg.train.input_rows;
  if (cfg.train.input_rows != cfg.train.input_cols) throw DomainError("gen-data: phantoms are square");
  const auto corpus = generate_corpus(req);
  ensure_dir(cfg.out);
  const fs::path manifest = save_dataset(corpus, cfg.out);
  RunConfig echo = cfg;
  echo.manifest = manifest.string();
  echo_config(fs::path(cfg.out) / kConfigFile, echo, "gen-data");

  std::size_t images = 0, positives = 0;
  std::array<std::size_t, kNumViews> per_view{};
  for (const auto& s : corpus) {
    images += s.size();
    positives += static_cast<std::size_t>(s.label);
    for (const auto& im : s.images) ++per_view[static_cast<std::size_t>(im.view - 1)];
  }
  std::printf("studies %zu (positive %zu, negative %zu), patients %zu, images %zu\n", corpus.size(), positives,
              corpus.size() - positives, patient_ids(corpus).size(), images);
  std::printf("images per view:");
  for (int v = 0; v < kNumViews; ++v) std::printf(" %d:%zu", v + 1, per_view[static_cast<std::size_t>(v)]);
  std::printf("\nmanifest %s\n", manifest.string().c_str());
  return 0;
}

FoldStudies load_fold(const std::string& manifest, std::size_t rows, std::size_t cols, int folds, int fold,
                      std::uint64_t split_seed) {
  if (manifest.empty()) throw DomainError("--manifest is required");
  if (fold < 0 || fold >= folds) {
    throw DomainError("fold " + std::to_string(fold) + " outside 0.." + std::to_string(folds - 1));
  }
  const auto studies = load_manifest(manifest, {rows, cols});
  const FoldSplit split = split_folds(patient_ids(studies), folds, split_seed);
  return partition_studies(studies, split.folds[static_cast<std::size_t>(fold)]);
}

int cmd_train(const RunConfig& cfg) {
  if (cfg.out.empty()) throw DomainError("train: --out is required");
  cfg.train.validate();
  if (cfg.train.variant == Variant::global_fusion && cfg.train.norm == NormKind::batch) {
    std::fprintf(stderr,
                 "warning: global_fusion with batch normalization mixes statistics across studies of varying "
                 "size; expect unstable training\n");
  }
  const FoldStudies data =
      load_fold(cfg.manifest, cfg.train.input_rows, cfg.train.input_cols, cfg.folds, cfg.fold, cfg.split_seed);
  std::printf("fold %d/%d: train %zu, val %zu, test %zu studies\n", cfg.fold, cfg.folds, data.train.size(),
              data.val.size(), data.test.size());
  ensure_dir(cfg.out);
  const TrainResult result = train(data.train, data.val, cfg.train, [&](const EpochRecord& r) {
    std::printf("epoch %d/%d train_loss %.6f val_auc %.4f\n", r.epoch, cfg.train.epochs, r.train_loss, r.val_auc);
    std::fflush(stdout);
  });

  const std::map<std::string, std::string> meta{
      {"fold", std::to_string(cfg.fold)},          {"folds", std::to_string(cfg.folds)},
      {"split_seed", std::to_string(cfg.split_seed)}, {"seed", std::to_string(cfg.train.seed)},
      {"epochs", std::to_string(cfg.train.epochs)}, {"best_epoch", std::to_string(result.best_epoch)},
      {"lr", detail::format_double(cfg.train.lr)},   {"batch_size", std::to_string(cfg.train.batch_size)}};
  const fs::path ck = fs::path(cfg.out) / kCheckpointFile;
  save_checkpoint(ck, result.model, meta);
  // Read back so a zero exit code means a loadable checkpoint.
  const Checkpoint check = load_checkpoint(ck);
  if (checkpoint_bytes(check.model, check.metadata) != checkpoint_bytes(result.model, meta)) {
    throw ConsistencyError("checkpoint " + ck.string() + " does not read back identically");
  }
  std::ostringstream history;
  write_history_csv(history, result.history);
  write_text(fs::path(cfg.out) / kHistoryFile, history.str());
  echo_config(fs::path(cfg.out) / kConfigFile, cfg, "train");
  std::printf("best epoch %d, checkpoint %s\n", result.best_epoch, ck.string().c_str());
  return 0;
}

int metadata_int(const Checkpoint& ck, const std::string& key) {
  auto it = ck.metadata.find(key);
  if (it == ck.metadata.end()) throw FormatError("checkpoint lacks '" + key + "' metadata");
  return detail::parse_int(key, it->second);
}

int cmd_eval(const RunConfig& cfg, const std::string& checkpoint, bool fold_given, std::optional<int> single_view) {
  if (checkpoint.empty()) throw DomainError("eval: --checkpoint is required");
  if (cfg.out.empty()) throw DomainError("eval: --out is required");
  Checkpoint ck = load_checkpoint(checkpoint);
  const int folds = metadata_int(ck, "folds");
  const int trained_fold = metadata_int(ck, "fold");
  const auto split_seed = detail::parse_unsigned<std::uint64_t>("split_seed", ck.metadata.at("split_seed"));
  if (fold_given && cfg.fold != trained_fold) {
    throw ConsistencyError("incompatible checkpoint: trained on fold " + std::to_string(trained_fold) +
                           ", asked to evaluate fold " + std::to_string(cfg.fold));
  }
  if (single_view) check_view(*single_view);
  const auto& bb = ck.model.config();
  const FoldStudies data = load_fold(cfg.manifest, bb.input_rows, bb.input_cols, folds, trained_fold, split_seed);
  if (data.test.empty()) throw DomainError("eval: empty test split");

  std::vector<double> scores;
  std::vector<int> labels;
  std::string predictions = "fold,study_id,patient_id,label,score\n";
  std::size_t skipped = 0;
  for (const auto& s : data.test) {
    std::vector<std::size_t> subset;
    for (std::size_t k = 0; k < s.size(); ++k)
      if (!single_view || s.images[k].view == *single_view) subset.push_back(k);
    if (subset.empty()) {
      ++skipped;
      continue;
    }
    const double p = predict_study(s, subset, ck.model);
    scores.push_back(p);
    labels.push_back(s.label);
    predictions += std::to_string(trained_fold) + "," + s.study_id + "," + s.patient_id + "," +
                   std::to_string(s.label) + "," + format_number(p) + "\n";
  }
  if (scores.empty()) throw DomainError("eval: no test study has an image of view " + std::to_string(*single_view));
  const MetricsReport m = compute_metrics(scores, labels);
  std::string variant = to_string(ck.model.variant());
  if (single_view) variant += ":view=" + std::to_string(*single_view);

  const fs::path out(cfg.out);
  if (out.has_parent_path()) ensure_dir(out.parent_path());
  write_text(out, std::string(kMetricsHeader) + "\n" +
                      metrics_row(std::to_string(trained_fold), variant, to_string(bb.norm), m) + "\n");
  write_text(sibling(out, "_predictions.csv"), predictions);
  RunConfig echo = cfg;
  echo.fold = trained_fold;
  echo.folds = folds;
  echo.split_seed = split_seed;
  echo_config(sibling(out, "_config.ini"), echo, "eval --checkpoint " + checkpoint);
  if (single_view) {
    nlohmann::ordered_json j;
    j["view"] = *single_view;
    j["evaluated"] = scores.size();
    j["skipped"] = skipped;
    write_text(sibling(out, "_single_view.json"), j.dump() + "\n");
    std::printf("view %d: evaluated %zu studies, skipped %zu lacking the view\n", *single_view, scores.size(), skipped);
  }
  std::printf("%s\n%s\n", kMetricsHeader, metrics_row(std::to_string(trained_fold), variant, to_string(bb.norm), m).c_str());
  return 0;
}

int cmd_predict(const std::string& checkpoint, const std::string& study_dir) {
  Checkpoint ck = load_checkpoint(checkpoint);
  const fs::path manifest = fs::path(study_dir) / "manifest.jsonl";
  if (!fs::exists(manifest)) throw IoError("no manifest.jsonl in " + study_dir);
  const auto& bb = ck.model.config();
  const auto studies = load_manifest(manifest, {bb.input_rows, bb.input_cols});
  if (studies.empty()) throw DomainError("predict: " + manifest.string() + " lists no images");
  const bool fusion = is_fusion(ck.model.variant());
  const std::size_t c = ck.model.channels();
  for (const auto& s : studies) {
    validate_study(s);
    std::vector<PreparedImage> images;
    for (const auto& im : s.images) images.push_back(prepare_image(im, ck.model));
    std::printf("study %s probability %.12g\n", s.study_id.c_str(), predict_study(s, ck.model));
    if (fusion) {
      // Share of the mean-slice logit and number of channels where the image
      // supplies the max.
      const std::vector<std::size_t> sizes{images.size()};
      const GroupOutputs out = forward_groups(ck.model, images, sizes, false);
      const auto w = ck.model.head_weight().values();
      for (std::size_t k = 0; k < images.size(); ++k) {
        double share = 0;
        std::size_t max_channels = 0;
        for (std::size_t ch = 0; ch < c; ++ch) {
          share += w[ch] * out.pooled[k][ch] / static_cast<double>(images.size());
          std::size_t arg = 0;
          for (std::size_t j = 1; j < images.size(); ++j)
            if (out.pooled[j][ch] > out.pooled[arg][ch]) arg = j;
          max_channels += arg == k;
        }
        std::printf("  image %zu view %d mean_logit_share %.6g max_channels %zu/%zu\n", k, s.images[k].view, share,
                    max_channels, c);
      }
    } else {
      for (std::size_t k = 0; k < images.size(); ++k) {
        std::printf("  image %zu view %d probability %.6g\n", k, s.images[k].view, predict_image(images[k], ck.model));
      }
    }
  }
  return 0;
}

struct FoldPredictions {
  std::vector<double> scores;
  std::vector<int> labels;
};

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(item);
  return out;
}

int cmd_export_roc(const std::string& metrics_dir, const std::string& out_path) {
  if (!fs::is_directory(metrics_dir)) throw IoError("no such directory " + metrics_dir);
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(metrics_dir)) {
    const std::string name = e.path().filename().string();
    if (e.is_regular_file() && name.size() > 16 && name.ends_with("_predictions.csv")) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw IoError("no *_predictions.csv files in " + metrics_dir + " (run eval first)");
  std::map<int, FoldPredictions> folds;
  for (const auto& f : files) {
    std::ifstream in(f);
    std::string line;
    std::getline(in, line);
    if (line != "fold,study_id,patient_id,label,score") throw FormatError(f.string() + ": unexpected header");
    std::set<int> seen;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto cols = split_csv(line);
      if (cols.size() != 5) throw FormatError(f.string() + ": malformed row '" + line + "'");
      const int fold = detail::parse_int("fold", cols[0]);
      if (seen.insert(fold).second && folds.count(fold)) {
        throw ConsistencyError("fold " + std::to_string(fold) + " appears in more than one file in " + metrics_dir);
      }
      folds[fold].labels.push_back(detail::parse_int("label", cols[3]));
      folds[fold].scores.push_back(detail::parse_double("score", cols[4]));
    }
  }
  const fs::path out(out_path);
  if (out.has_parent_path()) ensure_dir(out.parent_path());
  std::vector<RocCurve> curves;
  std::string legend = "curve,pauc30,auc\n";
  double pauc_sum = 0, auc_sum = 0;
  for (const auto& [fold, p] : folds) {
    const RocCurve curve = roc_curve(p.scores, p.labels);
    write_roc_csv(sibling(out, "_fold" + std::to_string(fold) + ".csv"), curve);
    const double pa = partial_auc(curve), a = auc(curve);
    legend += "fold" + std::to_string(fold) + "," + format_number(pa) + "," + format_number(a) + "\n";
    pauc_sum += pa;
    auc_sum += a;
    curves.push_back(curve);
  }
  const double n = static_cast<double>(curves.size());
  legend += "mean," + format_number(pauc_sum / n) + "," + format_number(auc_sum / n) + "\n";
  write_roc_csv(out, mean_roc(curves));
  write_text(sibling(out, "_legend.csv"), legend);
  std::printf("%zu fold curves, mean partial AUC %.4f\n", curves.size(), pauc_sum / n);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-view liver fibrosis classification with hetero-image fusion"};
  app.require_subcommand(1);
  std::string config_path;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic ultrasound corpus");
  FlagSet gen_flags;
  gen->add_option("--config", config_path, "Run configuration file")->check(CLI::ExistingFile);
  gen_flags.add(gen, "out", "out", "Output directory");
  gen_flags.add(gen, "studies", "studies", "Number of studies");
  gen_flags.add(gen, "seed", "data_seed", "Corpus seed");
  gen_flags.add(gen, "min-images", "min_images", "Minimum images per study");
  gen_flags.add(gen, "max-images", "max_images", "Maximum images per study");
  gen_flags.add(gen, "confounder", "confounder", "off|train|flipped");
  gen_flags.add(gen, "input-size", "input_size", "Image size, e.g. 64");

  auto* tr = app.add_subcommand("train", "Train one fold");
  FlagSet tr_flags;
  tr->add_option("--config", config_path, "Run configuration file")->check(CLI::ExistingFile);
  for (const auto& k : config_keys()) {
    const std::string key = k.key;
    if (key == "studies" || key == "min_images" || key == "max_images" || key == "confounder" || key == "data_seed") {
      continue;
    }
    std::string flag = key;
    std::replace(flag.begin(), flag.end(), '_', '-');
    tr_flags.add(tr, flag, key, std::string("[") + k.section + "] " + key);
  }

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on its fold's test split");
  FlagSet ev_flags;
  std::string ev_checkpoint;
  std::optional<int> single_view;
  ev->add_option("--config", config_path, "Run configuration file")->check(CLI::ExistingFile);
  ev->add_option("--checkpoint", ev_checkpoint, "Checkpoint file")->required();
  ev_flags.add(ev, "manifest", "manifest", "Dataset manifest");
  ev_flags.add(ev, "fold", "fold", "Fold index (must match the checkpoint)");
  ev_flags.add(ev, "out", "out", "Metrics CSV path");
  ev->add_option("--single-view", single_view, "Use only images of this view (1-6)");

  auto* pr = app.add_subcommand("predict", "Predict the studies in a directory");
  std::string pr_checkpoint, study_dir;
  pr->add_option("--checkpoint", pr_checkpoint, "Checkpoint file")->required();
  pr->add_option("--study-dir", study_dir, "Directory with manifest.jsonl, images and masks")->required();

  auto* ex = app.add_subcommand("export-roc", "Write per-fold and mean ROC curves from eval outputs");
  std::string metrics_dir, roc_out;
  ex->add_option("--metrics-dir", metrics_dir, "Directory holding eval outputs")->required();
  ex->add_option("--out", roc_out, "Mean ROC CSV path")->required();

  CLI11_PARSE(app, argc, argv);
  try {
    thread_cap();
    if (gen->parsed()) return cmd_gen_data(gen_flags.build(config_path));
    if (tr->parsed()) return cmd_train(tr_flags.build(config_path));
    if (ev->parsed()) {
      std::set<std::string> seen;
      const RunConfig cfg = ev_flags.build(config_path, &seen);
      return cmd_eval(cfg, ev_checkpoint, seen.count("fold") > 0, single_view);
    }
    if (pr->parsed()) return cmd_predict(pr_checkpoint, study_dir);
    if (ex->parsed()) return cmd_export_roc(metrics_dir, roc_out);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
