#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "csireid/csireid.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw csireid::ConfigError("cannot open config file '" + path + "'");
  json j;
  in >> j;
  return j;
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw csireid::DataError("cannot open '" + path + "' for writing");
  out << content;
}

std::string record_text(const csireid::TrainLogRecord& r) {
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "epoch=%d step=%d loss=%.6f cls=%.6f metric=%.6f wall=%.2fs seg/s=%.1f", r.epoch,
                r.step, r.total_loss, r.cls_loss, r.metric_loss, r.wall_seconds,
                r.segments_per_second);
  return buf;
}

json record_json(const csireid::TrainLogRecord& r) {
  return {{"epoch", r.epoch},
          {"step", r.step},
          {"loss", r.total_loss},
          {"cls_loss", r.cls_loss},
          {"metric_loss", r.metric_loss},
          {"wall_seconds", r.wall_seconds},
          {"segments_per_second", r.segments_per_second}};
}

void print_log(const std::vector<csireid::TrainLogRecord>& log, const std::string& format) {
  for (const auto& r : log) {
    if (format == "jsonl")
      std::cout << record_json(r).dump() << "\n";
    else
      std::cout << record_text(r) << "\n";
  }
}

void print_report(const std::string& label, const csireid::EvalReport& report,
                  const std::string& format) {
  if (format == "jsonl") {
    json ranks;
    for (const auto& [n, v] : report.rank_at) ranks["rank_" + std::to_string(n)] = v;
    std::cout << json{{"label", label},
                      {"mAP", report.map},
                      {"mINP", report.minp},
                      {"rank_at", ranks},
                      {"roc_auc", report.auc}}
                     .dump()
              << "\n";
    return;
  }
  std::cout << label << ": mAP=" << report.map << " mINP=" << report.minp;
  for (const auto& [n, v] : report.rank_at) std::cout << " Rank-" << n << "=" << v;
  std::cout << " AUC=" << report.auc << "\n";
}

json ablation_json(const std::vector<csireid::AblationRow>& rows) {
  json out = json::array();
  for (const auto& row : rows) {
    json ranks;
    for (const auto& [n, v] : row.report.rank_at) ranks["rank_" + std::to_string(n)] = v;
    out.push_back({{"label", row.label},
                   {"mAP", row.report.map},
                   {"mINP", row.report.minp},
                   {"rank_at", ranks},
                   {"roc_auc", row.report.auc}});
  }
  return out;
}

csireid::TrainConfig config_from_file(const std::string& path, std::optional<std::uint64_t> seed) {
  csireid::TrainConfig cfg = csireid::TrainConfig::from_json(load_json_file(path));
  if (seed) cfg.seed = *seed;
  return cfg;
}

std::vector<csireid::CalibratedSegment> load_dataset_for(const csireid::TrainConfig& cfg) {
  if (cfg.dataset_path.empty()) throw csireid::ConfigError("config: dataset.path is required");
  return csireid::load_calibrated(cfg.dataset_path, cfg.center_indices);
}

int run(int argc, char** argv) {
  CLI::App app{"WiFi CSI person re-identification toolkit"};
  app.require_subcommand(1);

  std::string config_path, in_path, out_path = "out", log_format = "text";
  std::string checkpoint_path, query_manifest, gallery_manifest;
  std::optional<std::uint64_t> seed;
  bool center_indices = false;
  int rounds = 0;

  auto* synth = app.add_subcommand("synth", "generate a synthetic multipath CSI dataset");
  synth->add_option("--config", config_path, "synth config JSON");
  synth->add_option("--out", out_path, "output dataset path")->required();
  synth->add_option("--seed", seed, "override master seed");

  auto* calibrate = app.add_subcommand("calibrate", "amplitude/phase calibration per segment");
  calibrate->add_option("--in", in_path, "input raw dataset")->required();
  calibrate->add_option("--out", out_path, "output calibrated dataset")->required();
  calibrate->add_flag("--center-indices", center_indices,
                      "subtract the index mean for non-symmetric layouts");

  auto* augment = app.add_subcommand("augment", "offline augmentation preview");
  augment->add_option("--in", in_path, "input dataset")->required();
  augment->add_option("--out", out_path, "output calibrated dataset")->required();
  augment->add_option("--config", config_path, "augment config JSON");
  augment->add_option("--seed", seed, "rng seed")->required();

  auto* train = app.add_subcommand("train", "train the two-stream model");
  train->add_option("--config", config_path, "train config JSON")->required();
  train->add_option("--seed", seed, "override train seed");
  train->add_option("--out", out_path, "output directory");
  train->add_option("--log-format", log_format, "text or jsonl")
      ->check(CLI::IsMember({"text", "jsonl"}));

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint with the query/gallery protocol");
  eval->add_option("--config", config_path, "config JSON")->required();
  eval->add_option("--checkpoint", checkpoint_path, "model checkpoint")->required();
  eval->add_option("--rounds", rounds, "query/gallery sampling rounds");
  eval->add_option("--query-manifest", query_manifest, "explicit query manifest JSON");
  eval->add_option("--gallery-manifest", gallery_manifest, "explicit gallery manifest JSON");
  eval->add_option("--out", out_path, "output directory");
  eval->add_option("--seed", seed, "override eval seed");
  eval->add_option("--log-format", log_format, "text or jsonl")
      ->check(CLI::IsMember({"text", "jsonl"}));

  auto* ablate_losses = app.add_subcommand("ablate-losses", "augmentation x loss ablation table");
  ablate_losses->add_option("--config", config_path, "train config JSON")->required();
  ablate_losses->add_option("--seed", seed, "override seed");
  ablate_losses->add_option("--out", out_path, "output directory");
  ablate_losses->add_option("--log-format", log_format, "text or jsonl")
      ->check(CLI::IsMember({"text", "jsonl"}));

  auto* ablate_fusion = app.add_subcommand("ablate-fusion", "early/late/cls fusion comparison");
  ablate_fusion->add_option("--config", config_path, "train config JSON")->required();
  ablate_fusion->add_option("--seed", seed, "override seed");
  ablate_fusion->add_option("--out", out_path, "output directory");
  ablate_fusion->add_option("--log-format", log_format, "text or jsonl")
      ->check(CLI::IsMember({"text", "jsonl"}));

  auto* export_emb = app.add_subcommand("export-embeddings", "embeddings TSV for external tools");
  export_emb->add_option("--config", config_path, "config JSON")->required();
  export_emb->add_option("--checkpoint", checkpoint_path, "model checkpoint")->required();
  export_emb->add_option("--out", out_path, "output TSV path")->required();

  CLI11_PARSE(app, argc, argv);

  if (synth->parsed()) {
    csireid::SynthConfig cfg;
    if (!config_path.empty()) {
      json j = load_json_file(config_path);
      cfg = csireid::SynthConfig::from_json(j.contains("synth") ? j.at("synth") : j);
    }
    if (seed) cfg.master_seed = *seed;
    const auto segments = csireid::generate_dataset(cfg);
    csireid::write_dataset(segments, out_path);
    std::cout << "wrote " << segments.size() << " segments (" << cfg.num_identities
              << " identities) to " << out_path << "\n";
    return 0;
  }

  if (calibrate->parsed()) {
    const auto dataset = csireid::read_dataset(in_path);
    std::vector<csireid::CalibratedSegment> calibrated;
    calibrated.reserve(dataset.segments.size());
    for (const auto& seg : dataset.segments)
      calibrated.push_back(csireid::calibrate_segment(seg, center_indices));
    csireid::write_calibrated_dataset(calibrated, out_path);
    std::cout << "calibrated " << calibrated.size() << " segments to " << out_path << "\n";
    return 0;
  }

  if (augment->parsed()) {
    csireid::AugmentConfig cfg;
    if (!config_path.empty()) {
      json j = load_json_file(config_path);
      cfg = csireid::AugmentConfig::from_json(j.contains("augment") ? j.at("augment") : j);
    }
    auto segments = csireid::load_calibrated(in_path, false);
    for (std::size_t i = 0; i < segments.size(); ++i) {
      csireid::Rng rng(csireid::derive_seed(*seed, 0xa06, i));
      segments[i] = csireid::augment_segment(segments[i], cfg, rng);
    }
    csireid::write_calibrated_dataset(segments, out_path);
    std::cout << "augmented " << segments.size() << " segments to " << out_path << "\n";
    return 0;
  }

  if (train->parsed()) {
    csireid::TrainConfig cfg = config_from_file(config_path, seed);
    fs::create_directories(out_path);
    const std::string ckpt = (fs::path(out_path) / "checkpoint.bin").string();
    if (cfg.checkpoint_path.empty()) cfg.checkpoint_path = ckpt;
    const auto segments = load_dataset_for(cfg);
    csireid::TrainOutcome outcome = csireid::train(cfg, segments);
    print_log(outcome.log, log_format);

    csireid::save_checkpoint(outcome.model, ckpt);
    csireid::write_manifest_json(outcome.split.train,
                                 (fs::path(out_path) / "train.manifest.json").string());
    csireid::write_manifest_json(outcome.split.query,
                                 (fs::path(out_path) / "query.manifest.json").string());
    csireid::write_manifest_json(outcome.split.gallery,
                                 (fs::path(out_path) / "gallery.manifest.json").string());
    std::string log_lines;
    for (const auto& r : outcome.log) log_lines += record_json(r).dump() + "\n";
    write_text_file((fs::path(out_path) / "train_log.jsonl").string(), log_lines);
    std::cout << "checkpoint: " << ckpt << "\n";
    return 0;
  }

  if (eval->parsed()) {
    csireid::TrainConfig cfg = config_from_file(config_path, seed);
    if (rounds > 0) cfg.eval_rounds = rounds;
    const auto segments = load_dataset_for(cfg);
    csireid::TwoStreamModel model = csireid::load_checkpoint(checkpoint_path);
    if (!segments.empty() && model.cfg.channels != segments.front().channels())
      throw csireid::ConfigError("checkpoint expects D=" + std::to_string(model.cfg.channels) +
                                 ", dataset has D=" +
                                 std::to_string(segments.front().channels()));

    csireid::EvalReport report;
    if (!query_manifest.empty() && !gallery_manifest.empty()) {
      report = csireid::evaluate_manifests(model, segments,
                                           csireid::read_manifest_json(query_manifest),
                                           csireid::read_manifest_json(gallery_manifest),
                                           cfg.eval_batch_size, cfg.cmc_ranks);
    } else {
      const auto split =
          csireid::split_identity_disjoint(segments, cfg.train_fraction, cfg.split_seed);
      std::set<std::string> test_ids;
      for (const auto& e : split.query.entries) test_ids.insert(e.segment_id);
      for (const auto& e : split.gallery.entries) test_ids.insert(e.segment_id);
      std::vector<csireid::CalibratedSegment> test_segments;
      for (const auto& s : segments)
        if (test_ids.count(s.segment_id)) test_segments.push_back(s);
      report = csireid::evaluate_rounds(model, test_segments, cfg.eval_rounds, cfg.seed,
                                        cfg.eval_batch_size, cfg.cmc_ranks);
    }
    report.config_echo = cfg.to_json();

    fs::create_directories(out_path);
    const std::string report_path = (fs::path(out_path) / "eval_report.json").string();
    write_text_file(report_path, report.to_json().dump(2) + "\n");
    write_text_file((fs::path(out_path) / "per_query.tsv").string(), report.per_query_tsv());
    print_report("eval", report, log_format);
    std::cout << "report: " << report_path << "\n";
    return 0;
  }

  if (ablate_losses->parsed() || ablate_fusion->parsed()) {
    csireid::TrainConfig cfg = config_from_file(config_path, seed);
    const auto segments = load_dataset_for(cfg);
    const bool losses_mode = ablate_losses->parsed();
    const auto rows = losses_mode ? csireid::ablation_matrix(cfg, segments)
                                  : csireid::fusion_ablation(cfg, segments);
    for (const auto& row : rows) print_report(row.label, row.report, log_format);
    fs::create_directories(out_path);
    const std::string name = losses_mode ? "ablation_losses.json" : "ablation_fusion.json";
    write_text_file((fs::path(out_path) / name).string(), ablation_json(rows).dump(2) + "\n");
    return 0;
  }

  if (export_emb->parsed()) {
    csireid::TrainConfig cfg = config_from_file(config_path, std::nullopt);
    const auto segments = load_dataset_for(cfg);
    csireid::TwoStreamModel model = csireid::load_checkpoint(checkpoint_path);
    csireid::export_embeddings_tsv(model, segments, cfg.eval_batch_size, out_path);
    std::cout << "wrote embeddings for " << segments.size() << " segments to " << out_path << "\n";
    return 0;
  }

  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const csireid::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  }
}
