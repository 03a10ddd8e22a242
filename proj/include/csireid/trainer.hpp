#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "csireid/augmentation.hpp"
#include "csireid/batching.hpp"
#include "csireid/calibration.hpp"
#include "csireid/checkpoint.hpp"
#include "csireid/io.hpp"
#include "csireid/losses.hpp"
#include "csireid/metrics.hpp"
#include "csireid/model.hpp"
#include "csireid/tensor.hpp"

namespace csireid {

struct OptimizerConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
  std::string lr_schedule = "constant";  // constant | cosine

  void validate() const {
    if (lr <= 0.0) throw ConfigError("optimizer: lr must be positive");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
      throw ConfigError("optimizer: betas must lie in [0, 1)");
    if (weight_decay < 0.0) throw ConfigError("optimizer: weight_decay must be nonnegative");
    if (lr_schedule != "constant" && lr_schedule != "cosine")
      throw ConfigError("optimizer: lr_schedule must be constant or cosine");
  }
};

/// Adam with decoupled weight decay.
class Adam {
 public:
  Adam(std::vector<Tensor> params, OptimizerConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    cfg_.validate();
    for (const auto& p : params_) {
      m_.emplace_back(p.numel(), 0.0);
      v_.emplace_back(p.numel(), 0.0);
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step(double lr_scale = 1.0) {
    ++t_;
    const double lr = cfg_.lr * lr_scale;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& value = params_[i].values_mut();
      const auto& grad = params_[i].grad();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < value.size(); ++j) {
        m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * grad[j];
        v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * grad[j] * grad[j];
        const double mhat = m[j] / bc1;
        const double vhat = v[j] / bc2;
        value[j] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * value[j]);
      }
    }
  }

 private:
  std::vector<Tensor> params_;
  OptimizerConfig cfg_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::int64_t t_ = 0;
};

/// Draws batches of P distinct identities x M segments each. Identities
/// cycle through seeded shuffles; an identity short on segments falls
/// back to sampling with replacement.
class BalancedSampler {
 public:
  BalancedSampler(std::vector<std::vector<std::size_t>> segments_by_identity, int p, int m,
                  std::uint64_t seed)
      : by_identity_(std::move(segments_by_identity)), p_(p), m_(m), rng_(seed) {
    if (static_cast<int>(by_identity_.size()) < p_)
      throw ConfigError("sampler: dataset has " + std::to_string(by_identity_.size()) +
                        " identities, need at least " + std::to_string(p_));
  }

  std::vector<std::size_t> next_batch() {
    std::vector<std::size_t> batch;
    batch.reserve(static_cast<std::size_t>(p_) * m_);
    std::set<std::size_t> chosen;
    for (int i = 0; i < p_; ++i) {
      // Pop the next identity not already in this batch; a refill can
      // re-offer one drawn earlier in the same batch.
      std::vector<std::size_t> skipped;
      std::size_t identity;
      while (true) {
        if (identity_queue_.empty()) {
          identity_queue_.resize(by_identity_.size());
          for (std::size_t k = 0; k < by_identity_.size(); ++k) identity_queue_[k] = k;
          rng_.shuffle(identity_queue_);
        }
        identity = identity_queue_.back();
        identity_queue_.pop_back();
        if (!chosen.count(identity)) break;
        skipped.push_back(identity);
      }
      identity_queue_.insert(identity_queue_.begin(), skipped.begin(), skipped.end());
      chosen.insert(identity);
      const auto& segs = by_identity_[identity];
      if (static_cast<int>(segs.size()) >= m_) {
        std::vector<std::size_t> pick(segs.begin(), segs.end());
        rng_.shuffle(pick);
        for (int j = 0; j < m_; ++j) batch.push_back(pick[static_cast<std::size_t>(j)]);
      } else {
        for (int j = 0; j < m_; ++j)
          batch.push_back(segs[static_cast<std::size_t>(
              rng_.uniform_int(0, static_cast<std::int64_t>(segs.size()) - 1))]);
      }
    }
    return batch;
  }

 private:
  std::vector<std::vector<std::size_t>> by_identity_;
  int p_;
  int m_;
  Rng rng_;
  std::vector<std::size_t> identity_queue_;
};

struct LossConfig {
  std::string cls_loss = "lmcl";          // lmcl | cross_entropy
  std::string metric_loss = "softtriple";  // softtriple | triplet | none
  double w_cls = 1.0;
  double w_metric = 1.0;
  LmclConfig lmcl;
  SoftTripleConfig softtriple;
  double triplet_margin = 0.3;

  void validate() const {
    if (cls_loss != "lmcl" && cls_loss != "cross_entropy")
      throw ConfigError("cls_loss must be lmcl or cross_entropy");
    if (metric_loss != "softtriple" && metric_loss != "triplet" && metric_loss != "none")
      throw ConfigError("metric_loss must be softtriple, triplet, or none");
    if (w_cls < 0.0 || w_metric < 0.0) throw ConfigError("loss weights must be nonnegative");
    lmcl.validate();
    softtriple.validate();
  }
};

struct TrainConfig {
  std::string dataset_path;
  double train_fraction = 0.625;
  std::uint64_t split_seed = 7;

  ModelConfig model;  // channels/num_classes filled from data when 0
  OptimizerConfig optimizer;
  LossConfig losses;
  AugmentConfig augment;
  bool augment_enabled = true;

  int epochs = 30;
  int batch_size = 16;
  int p_identities = 4;
  int m_segments = 4;
  std::uint64_t seed = 1;
  bool center_indices = false;
  std::string checkpoint_path;  // per-epoch checkpoint target; empty disables

  int eval_rounds = 10;
  std::vector<int> cmc_ranks = {1, 3, 5};
  int eval_batch_size = 16;

  void validate() const {
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (batch_size != p_identities * m_segments)
      throw ConfigError("train: batch_size must equal p_identities * m_segments");
    if (p_identities < 1 || m_segments < 1)
      throw ConfigError("train: sampler dimensions must be positive");
    if (eval_rounds < 1) throw ConfigError("eval: rounds must be >= 1");
    optimizer.validate();
    losses.validate();
    augment.validate();
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig cfg;
    if (j.contains("dataset")) {
      const auto& d = j.at("dataset");
      cfg.dataset_path = d.value("path", cfg.dataset_path);
      cfg.train_fraction = d.value("train_fraction", cfg.train_fraction);
      cfg.split_seed = d.value("split_seed", cfg.split_seed);
    }
    if (j.contains("model")) cfg.model = ModelConfig::from_json(j.at("model"));
    if (j.contains("train")) {
      const auto& t = j.at("train");
      cfg.epochs = t.value("epochs", cfg.epochs);
      cfg.batch_size = t.value("batch_size", cfg.batch_size);
      cfg.p_identities = t.value("p_identities", cfg.p_identities);
      cfg.m_segments = t.value("m_segments", cfg.m_segments);
      cfg.seed = t.value("seed", cfg.seed);
      cfg.center_indices = t.value("center_indices", cfg.center_indices);
      cfg.checkpoint_path = t.value("checkpoint_path", cfg.checkpoint_path);
      cfg.optimizer.lr = t.value("lr", cfg.optimizer.lr);
      cfg.optimizer.beta1 = t.value("beta1", cfg.optimizer.beta1);
      cfg.optimizer.beta2 = t.value("beta2", cfg.optimizer.beta2);
      cfg.optimizer.weight_decay = t.value("weight_decay", cfg.optimizer.weight_decay);
      cfg.optimizer.lr_schedule = t.value("lr_schedule", cfg.optimizer.lr_schedule);
    }
    if (j.contains("losses")) {
      const auto& l = j.at("losses");
      cfg.losses.cls_loss = l.value("cls_loss", cfg.losses.cls_loss);
      cfg.losses.metric_loss = l.value("metric_loss", cfg.losses.metric_loss);
      cfg.losses.w_cls = l.value("w_cls", cfg.losses.w_cls);
      cfg.losses.w_metric = l.value("w_metric", cfg.losses.w_metric);
      if (l.contains("lmcl")) {
        cfg.losses.lmcl.s = l.at("lmcl").value("s", cfg.losses.lmcl.s);
        cfg.losses.lmcl.m = l.at("lmcl").value("m", cfg.losses.lmcl.m);
      }
      if (l.contains("softtriple")) {
        const auto& st = l.at("softtriple");
        cfg.losses.softtriple.centers_per_class = st.value("K", cfg.losses.softtriple.centers_per_class);
        cfg.losses.softtriple.sigma = st.value("sigma", cfg.losses.softtriple.sigma);
        cfg.losses.softtriple.delta_margin = st.value("delta", cfg.losses.softtriple.delta_margin);
        cfg.losses.softtriple.lambda_sep = st.value("lambda", cfg.losses.softtriple.lambda_sep);
        cfg.losses.softtriple.variant = st.value("variant", cfg.losses.softtriple.variant);
      }
      cfg.losses.triplet_margin = l.value("triplet_margin", cfg.losses.triplet_margin);
    }
    if (j.contains("augment")) {
      cfg.augment = AugmentConfig::from_json(j.at("augment"));
      cfg.augment_enabled = j.at("augment").value("enabled", cfg.augment_enabled);
    }
    if (j.contains("eval")) {
      const auto& e = j.at("eval");
      cfg.eval_rounds = e.value("rounds", cfg.eval_rounds);
      cfg.eval_batch_size = e.value("batch_size", cfg.eval_batch_size);
      if (e.contains("cmc_ranks")) cfg.cmc_ranks = e.at("cmc_ranks").get<std::vector<int>>();
    }
    return cfg;
  }

  nlohmann::json to_json() const {
    nlohmann::json l = {{"cls_loss", losses.cls_loss},
                        {"metric_loss", losses.metric_loss},
                        {"w_cls", losses.w_cls},
                        {"w_metric", losses.w_metric},
                        {"lmcl", {{"s", losses.lmcl.s}, {"m", losses.lmcl.m}}},
                        {"softtriple",
                         {{"K", losses.softtriple.centers_per_class},
                          {"sigma", losses.softtriple.sigma},
                          {"delta", losses.softtriple.delta_margin},
                          {"lambda", losses.softtriple.lambda_sep},
                          {"variant", losses.softtriple.variant}}},
                        {"triplet_margin", losses.triplet_margin}};
    nlohmann::json aug = augment.to_json();
    aug["enabled"] = augment_enabled;
    return {{"dataset",
             {{"path", dataset_path},
              {"train_fraction", train_fraction},
              {"split_seed", split_seed}}},
            {"model", model.to_json()},
            {"train",
             {{"epochs", epochs},
              {"batch_size", batch_size},
              {"p_identities", p_identities},
              {"m_segments", m_segments},
              {"seed", seed},
              {"center_indices", center_indices},
              {"checkpoint_path", checkpoint_path},
              {"lr", optimizer.lr},
              {"beta1", optimizer.beta1},
              {"beta2", optimizer.beta2},
              {"weight_decay", optimizer.weight_decay},
              {"lr_schedule", optimizer.lr_schedule}}},
            {"losses", l},
            {"augment", aug},
            {"eval",
             {{"rounds", eval_rounds}, {"batch_size", eval_batch_size},
              {"cmc_ranks", cmc_ranks}}}};
  }
};

struct TrainLogRecord {
  int epoch = 0;
  int step = 0;
  double total_loss = 0.0;
  double cls_loss = 0.0;
  double metric_loss = 0.0;
  double wall_seconds = 0.0;
  double segments_per_second = 0.0;
};

struct TrainOutcome {
  TwoStreamModel model;
  Tensor softtriple_centers;  // defined only when metric_loss == softtriple
  SplitResult split;
  LabelMap label_map;
  std::vector<TrainLogRecord> log;
  std::vector<CalibratedSegment> train_segments;
  std::vector<CalibratedSegment> test_segments;
};

/// Loads a dataset file in either format; raw (version 1) segments are
/// calibrated on the fly.
inline std::vector<CalibratedSegment> load_calibrated(const std::string& path,
                                                      bool center_indices = false) {
  const auto version = dataset_file_version(path);
  if (version == kCalibratedDatasetVersion) return read_calibrated_dataset(path).segments;
  std::vector<CalibratedSegment> out;
  for (const auto& seg : read_dataset(path).segments)
    out.push_back(calibrate_segment(seg, center_indices));
  return out;
}

namespace detail {

inline std::vector<const CalibratedSegment*> select_by_manifest(
    const std::vector<CalibratedSegment>& segments, const DatasetManifest& manifest) {
  std::map<std::string, const CalibratedSegment*> by_id;
  for (const auto& s : segments) by_id[s.segment_id] = &s;
  std::vector<const CalibratedSegment*> out;
  for (const auto& e : manifest.entries) {
    auto it = by_id.find(e.segment_id);
    if (it == by_id.end())
      throw DataError("manifest entry '" + e.segment_id + "' not found in dataset");
    out.push_back(it->second);
  }
  return out;
}

}  // namespace detail

/// Embeds segments in eval mode, batched; returns one item per segment.
inline std::vector<EmbeddedItem> embed_segments(const TwoStreamModel& model,
                                                const std::vector<const CalibratedSegment*>& segs,
                                                int batch_size) {
  std::vector<EmbeddedItem> out;
  Rng rng(0);  // unused in eval mode
  LabelMap empty;
  for (std::size_t begin = 0; begin < segs.size(); begin += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(segs.size(), begin + static_cast<std::size_t>(batch_size));
    std::vector<const CalibratedSegment*> chunk(segs.begin() + begin, segs.begin() + end);
    PaddedBatch batch = make_batch(chunk, model.cfg.max_time, empty);
    ForwardResult fwd = model.forward(batch, false, rng);
    const auto& values = fwd.embedding.values();
    const auto d = static_cast<std::size_t>(model.cfg.d_embed);
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      EmbeddedItem item;
      item.segment_id = chunk[i]->segment_id;
      item.person_id = chunk[i]->person_id;
      item.embedding.assign(values.begin() + i * d, values.begin() + (i + 1) * d);
      out.push_back(std::move(item));
    }
  }
  return out;
}

/// Single-round evaluation against explicit query/gallery manifests.
inline EvalReport evaluate_manifests(const TwoStreamModel& model,
                                     const std::vector<CalibratedSegment>& segments,
                                     const DatasetManifest& query,
                                     const DatasetManifest& gallery, int eval_batch_size,
                                     const std::vector<int>& cmc_ranks) {
  auto query_items =
      embed_segments(model, detail::select_by_manifest(segments, query), eval_batch_size);
  auto gallery_items =
      embed_segments(model, detail::select_by_manifest(segments, gallery), eval_batch_size);
  return evaluate_rankings(rank_gallery(query_items, gallery_items), cmc_ranks);
}

/// Multi-round protocol on pre-embedded items: per round, one seeded query
/// per identity with the rest as gallery; scalar metrics averaged.
inline EvalReport evaluate_item_rounds(const std::vector<EmbeddedItem>& items, int rounds,
                                       std::uint64_t seed, const std::vector<int>& cmc_ranks) {
  std::map<std::string, std::vector<std::size_t>> by_person;
  for (std::size_t i = 0; i < items.size(); ++i) by_person[items[i].person_id].push_back(i);

  std::vector<EvalReport> reports;
  for (int r = 0; r < rounds; ++r) {
    Rng rng(derive_seed(seed, 0xe5a1, static_cast<std::uint64_t>(r)));
    std::vector<EmbeddedItem> queries, gallery;
    for (const auto& [person, indices] : by_person) {
      if (indices.size() < 2) {
        for (auto i : indices) gallery.push_back(items[i]);
        continue;
      }
      const auto qpos = static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<std::int64_t>(indices.size()) - 1));
      for (std::size_t j = 0; j < indices.size(); ++j)
        (j == qpos ? queries : gallery).push_back(items[indices[j]]);
    }
    if (queries.empty()) throw InsufficientDataError("evaluate_rounds: no queries available");
    reports.push_back(evaluate_rankings(rank_gallery(queries, gallery), cmc_ranks));
  }
  return average_reports(reports);
}

inline EvalReport evaluate_rounds(const TwoStreamModel& model,
                                  const std::vector<CalibratedSegment>& test_segments, int rounds,
                                  std::uint64_t seed, int eval_batch_size,
                                  const std::vector<int>& cmc_ranks) {
  std::vector<const CalibratedSegment*> all;
  for (const auto& s : test_segments) all.push_back(&s);
  return evaluate_item_rounds(embed_segments(model, all, eval_batch_size), rounds, seed,
                              cmc_ranks);
}

/// Full training loop: identity-balanced batches through augment ->
/// batch -> forward -> combined objective -> Adam.
inline TrainOutcome train(const TrainConfig& config,
                          const std::vector<CalibratedSegment>& all_segments) {
  config.validate();
  if (all_segments.empty()) throw InsufficientDataError("train: dataset is empty");

  TrainOutcome outcome;
  outcome.split = split_identity_disjoint(all_segments, config.train_fraction, config.split_seed);

  std::set<std::string> train_segment_ids;
  for (const auto& e : outcome.split.train.entries) train_segment_ids.insert(e.segment_id);
  std::vector<std::string> train_persons;
  for (const auto& s : all_segments) {
    if (train_segment_ids.count(s.segment_id)) {
      outcome.train_segments.push_back(s);
      train_persons.push_back(s.person_id);
    } else {
      outcome.test_segments.push_back(s);
    }
  }
  outcome.label_map = build_label_map(train_persons);

  const auto num_classes = static_cast<std::int64_t>(outcome.label_map.size());
  if (static_cast<int>(num_classes) < config.p_identities)
    throw ConfigError("train: split yields " + std::to_string(num_classes) +
                      " identities, sampler needs " + std::to_string(config.p_identities));

  ModelConfig mc = config.model;
  mc.channels = outcome.train_segments.front().channels();
  mc.num_classes = num_classes;
  outcome.model = TwoStreamModel::init(mc, config.seed);

  std::vector<Tensor> params;
  for (auto& [name, t] : outcome.model.parameters()) params.push_back(t);
  const bool use_softtriple = config.losses.metric_loss == "softtriple";
  if (use_softtriple) {
    outcome.softtriple_centers =
        init_softtriple_centers(num_classes, config.losses.softtriple.centers_per_class,
                                mc.d_embed, config.seed);
    params.push_back(outcome.softtriple_centers);
  }
  Adam optimizer(params, config.optimizer);

  std::vector<std::vector<std::size_t>> by_identity(static_cast<std::size_t>(num_classes));
  for (std::size_t i = 0; i < outcome.train_segments.size(); ++i)
    by_identity[static_cast<std::size_t>(
                    outcome.label_map.at(outcome.train_segments[i].person_id))]
        .push_back(i);
  BalancedSampler sampler(by_identity, config.p_identities, config.m_segments,
                          derive_seed(config.seed, 0x5a3b1e));

  const int steps_per_epoch = std::max<int>(
      1, static_cast<int>(outcome.train_segments.size()) / config.batch_size);
  const std::int64_t total_steps =
      static_cast<std::int64_t>(steps_per_epoch) * config.epochs;

  Rng dropout_rng(derive_seed(config.seed, 0xd20b));
  std::int64_t global_step = 0;
  const auto train_start = std::chrono::steady_clock::now();

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    for (int step = 0; step < steps_per_epoch; ++step) {
      const auto step_start = std::chrono::steady_clock::now();
      const auto indices = sampler.next_batch();

      std::vector<CalibratedSegment> chosen;
      chosen.reserve(indices.size());
      for (std::size_t slot = 0; slot < indices.size(); ++slot) {
        const auto& seg = outcome.train_segments[indices[slot]];
        if (config.augment_enabled) {
          Rng aug_rng(derive_seed(config.seed, 0xa06,
                                  static_cast<std::uint64_t>(global_step) * 1009 + slot));
          chosen.push_back(augment_segment(seg, config.augment, aug_rng));
        } else {
          chosen.push_back(seg);
        }
      }

      PaddedBatch batch = make_batch(chosen, mc.max_time, outcome.label_map);
      ForwardResult fwd = outcome.model.forward(batch, true, dropout_rng);

      Tensor cls = config.losses.cls_loss == "lmcl"
                       ? lmcl_loss(fwd.embedding, outcome.model.class_w, batch.labels,
                                   config.losses.lmcl)
                       : cross_entropy_loss(fwd.logits, batch.labels);
      Tensor metric;
      if (use_softtriple)
        metric = softtriple_loss(fwd.embedding, outcome.softtriple_centers, batch.labels,
                                 num_classes, config.losses.softtriple);
      else if (config.losses.metric_loss == "triplet")
        metric = triplet_loss(fwd.embedding, batch.labels, config.losses.triplet_margin);
      else
        metric = Tensor::scalar(0.0);
      Tensor total = combined_objective(cls, metric, config.losses.w_cls, config.losses.w_metric);

      if (!std::isfinite(total.item())) {
        std::string ids;
        for (const auto& id : batch.segment_ids) ids += id + " ";
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + " step " +
                           std::to_string(step) + "; batch segments: " + ids);
      }

      optimizer.zero_grad();
      total.backward();
      double lr_scale = 1.0;
      if (config.optimizer.lr_schedule == "cosine")
        lr_scale = 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(global_step) /
                                         static_cast<double>(total_steps)));
      optimizer.step(lr_scale);

      const auto step_end = std::chrono::steady_clock::now();
      TrainLogRecord rec;
      rec.epoch = epoch;
      rec.step = static_cast<int>(global_step);
      rec.total_loss = total.item();
      rec.cls_loss = cls.item();
      rec.metric_loss = metric.item();
      rec.wall_seconds = std::chrono::duration<double>(step_end - train_start).count();
      const double step_seconds = std::chrono::duration<double>(step_end - step_start).count();
      rec.segments_per_second =
          step_seconds > 0.0 ? static_cast<double>(config.batch_size) / step_seconds : 0.0;
      outcome.log.push_back(rec);
      ++global_step;
    }
    if (!config.checkpoint_path.empty()) save_checkpoint(outcome.model, config.checkpoint_path);
  }
  return outcome;
}

struct AblationRow {
  std::string label;
  TrainConfig config;
  EvalReport report;
};

inline AblationRow run_variant(const TrainConfig& cfg, const std::string& label,
                               const std::vector<CalibratedSegment>& segments) {
  TrainOutcome outcome = train(cfg, segments);
  AblationRow row;
  row.label = label;
  row.config = cfg;
  row.report = evaluate_rounds(outcome.model, outcome.test_segments, cfg.eval_rounds, cfg.seed,
                               cfg.eval_batch_size, cfg.cmc_ranks);
  return row;
}

/// The six loss/augmentation rows, trained and evaluated in table order.
inline std::vector<AblationRow> ablation_matrix(const TrainConfig& base,
                                                const std::vector<CalibratedSegment>& segments) {
  struct RowSpec {
    bool augment;
    const char* metric;
    const char* cls;
  };
  static constexpr RowSpec kRows[] = {
      {false, "triplet", "cross_entropy"}, {true, "triplet", "cross_entropy"},
      {true, "softtriple", "cross_entropy"}, {true, "triplet", "lmcl"},
      {false, "softtriple", "lmcl"},       {true, "softtriple", "lmcl"},
  };
  std::vector<AblationRow> out;
  for (const auto& spec : kRows) {
    TrainConfig cfg = base;
    cfg.augment_enabled = spec.augment;
    cfg.losses.metric_loss = spec.metric;
    cfg.losses.cls_loss = spec.cls;
    const std::string label = std::string(spec.augment ? "aug" : "noaug") + "+" +
                              (cfg.losses.metric_loss == "softtriple" ? "Sof" : "Tri") + "+" +
                              (cfg.losses.cls_loss == "lmcl" ? "LMCL" : "Cro");
    out.push_back(run_variant(cfg, label, segments));
  }
  return out;
}

/// Early fusion, late fusion, and continuous lateral connections.
inline std::vector<AblationRow> fusion_ablation(const TrainConfig& base,
                                                const std::vector<CalibratedSegment>& segments) {
  std::vector<AblationRow> out;
  for (const std::string fusion : {"early", "late", "cls"}) {
    TrainConfig cfg = base;
    cfg.model.fusion = fusion;
    out.push_back(run_variant(cfg, fusion, segments));
  }
  return out;
}

/// Writes one embedding per segment as "id \t label \t v1..vd" TSV.
inline void export_embeddings_tsv(const TwoStreamModel& model,
                                  const std::vector<CalibratedSegment>& segments, int batch_size,
                                  const std::string& path) {
  std::vector<const CalibratedSegment*> ptrs;
  for (const auto& s : segments) ptrs.push_back(&s);
  const auto items = embed_segments(model, ptrs, batch_size);
  std::string out;
  for (const auto& item : items) {
    out += item.segment_id + "\t" + item.person_id;
    for (double v : item.embedding) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "\t%.9g", v);
      out += buf;
    }
    out += "\n";
  }
  detail::write_file(path, out);
}

}  // namespace csireid
