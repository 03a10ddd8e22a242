#include <catch_amalgamated.hpp>

#include <filesystem>
#include <set>

#include "csireid/checkpoint.hpp"
#include "csireid/synthgen.hpp"
#include "csireid/trainer.hpp"

using namespace csireid;
using Catch::Matchers::WithinAbs;

namespace {

std::vector<CalibratedSegment> tiny_dataset(int identities, int segments_each, int frames,
                                            std::uint64_t seed) {
  SynthConfig cfg;
  cfg.num_identities = identities;
  cfg.segments_per_identity = segments_each;
  cfg.min_frames = frames;
  cfg.max_frames = frames + 8;
  cfg.antenna_count = 1;
  cfg.layout = SubcarrierLayout::symmetric(8);
  cfg.master_seed = seed;
  std::vector<CalibratedSegment> out;
  for (const auto& seg : generate_dataset(cfg)) out.push_back(calibrate_segment(seg));
  return out;
}

TrainConfig tiny_train_config() {
  TrainConfig cfg;
  cfg.model.d_model = 16;
  cfg.model.heads = 2;
  cfg.model.d_ff = 32;
  cfg.model.depth = 1;
  cfg.model.d_embed = 12;
  cfg.model.max_time = 40;
  cfg.model.dropout = 0.1;
  cfg.epochs = 1;
  cfg.batch_size = 4;
  cfg.p_identities = 2;
  cfg.m_segments = 2;
  cfg.train_fraction = 0.5;
  cfg.eval_rounds = 3;
  cfg.optimizer.lr = 1e-3;
  return cfg;
}

}  // namespace

TEST_CASE("balanced sampler yields P identities with M segments each", "[trainer]") {
  std::vector<std::vector<std::size_t>> by_identity{{0, 1, 2}, {3, 4, 5}, {6, 7, 8}, {9, 10, 11}};
  BalancedSampler sampler(by_identity, 2, 2, 42);
  for (int step = 0; step < 20; ++step) {
    const auto batch = sampler.next_batch();
    REQUIRE(batch.size() == 4);
    std::set<std::size_t> identities;
    for (std::size_t i = 0; i < batch.size(); ++i)
      identities.insert(batch[i] / 3);  // identity = index / 3 by construction
    CHECK(identities.size() == 2);
  }
}

TEST_CASE("sampler keeps identities distinct across refill boundaries", "[trainer]") {
  // identity counts not divisible by P, so the queue refills mid-batch
  for (std::size_t num_ids : {3, 5, 7}) {
    std::vector<std::vector<std::size_t>> by_identity;
    for (std::size_t id = 0; id < num_ids; ++id)
      by_identity.push_back({id * 10, id * 10 + 1, id * 10 + 2});
    BalancedSampler sampler(by_identity, 2, 3, 7 + num_ids);
    for (int step = 0; step < 50; ++step) {
      const auto batch = sampler.next_batch();
      REQUIRE(batch.size() == 6);
      std::set<std::size_t> identities;
      for (auto idx : batch) identities.insert(idx / 10);
      CHECK(identities.size() == 2);
    }
  }
}

TEST_CASE("sampler falls back to replacement for short identities", "[trainer]") {
  std::vector<std::vector<std::size_t>> by_identity{{0}, {1, 2, 3, 4}};
  BalancedSampler sampler(by_identity, 2, 3, 7);
  const auto batch = sampler.next_batch();
  REQUIRE(batch.size() == 6);
}

TEST_CASE("sampler rejects too few identities", "[trainer]") {
  std::vector<std::vector<std::size_t>> by_identity{{0, 1}};
  CHECK_THROWS_AS(BalancedSampler(by_identity, 2, 2, 7), ConfigError);
}

TEST_CASE("train produces a checkpoint that reloads", "[trainer]") {
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "csireid_trainer_tests";
  fs::create_directories(dir);

  const auto segments = tiny_dataset(4, 4, 16, 3);
  auto cfg = tiny_train_config();
  const auto outcome = train(cfg, segments);

  const auto path_a = (dir / "ckpt_a.bin").string();
  const auto path_b = (dir / "ckpt_b.bin").string();
  save_checkpoint(outcome.model, path_a);
  auto loaded = load_checkpoint(path_a);
  save_checkpoint(loaded, path_b);
  CHECK(csireid::detail::read_file(path_a) == csireid::detail::read_file(path_b));

  // reload agrees with the saved f32 payload to rounding
  const auto orig = outcome.model.parameters();
  const auto back = loaded.parameters();
  REQUIRE(orig.size() == back.size());
  for (std::size_t i = 0; i < orig.size(); ++i) {
    for (std::size_t j = 0; j < orig[i].second.values().size(); ++j) {
      const double a = orig[i].second.values()[j];
      const double b = back[i].second.values()[j];
      CHECK_THAT(b, WithinAbs(a, std::max(1e-6, std::abs(a) * 1e-6)));
    }
  }
}

TEST_CASE("training is deterministic under a fixed seed", "[trainer]") {
  const auto segments = tiny_dataset(4, 3, 12, 5);
  auto cfg = tiny_train_config();
  cfg.epochs = 2;
  const auto a = train(cfg, segments);
  const auto b = train(cfg, segments);
  REQUIRE(a.log.size() == b.log.size());
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    CHECK(a.log[i].total_loss == b.log[i].total_loss);
    CHECK(a.log[i].cls_loss == b.log[i].cls_loss);
    CHECK(a.log[i].metric_loss == b.log[i].metric_loss);
  }
  const auto pa = a.model.parameters();
  const auto pb = b.model.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i)
    CHECK(pa[i].second.values() == pb[i].second.values());
}

TEST_CASE("a tiny model overfits four segments to perfect rank-1", "[trainer]") {
  // 2 train identities x 2 segments after the identity-disjoint split
  const auto segments = tiny_dataset(4, 2, 10, 11);
  auto cfg = tiny_train_config();
  cfg.epochs = 120;
  cfg.batch_size = 4;
  cfg.p_identities = 2;
  cfg.m_segments = 2;
  cfg.model.dropout = 0.0;
  cfg.augment_enabled = false;
  cfg.optimizer.lr = 3e-3;
  cfg.eval_rounds = 4;
  const auto outcome = train(cfg, segments);
  REQUIRE(outcome.train_segments.size() == 4);

  const auto report = evaluate_rounds(outcome.model, outcome.train_segments, cfg.eval_rounds,
                                      cfg.seed, cfg.eval_batch_size, cfg.cmc_ranks);
  CHECK(report.rank_at.at(1) == 1.0);
}

TEST_CASE("random embeddings score at chance through the protocol", "[trainer]") {
  // 9 identities x 6 segments, embeddings drawn with no identity signal
  Rng rng(17);
  std::vector<EmbeddedItem> items;
  for (int person = 0; person < 9; ++person)
    for (int s = 0; s < 6; ++s) {
      EmbeddedItem item;
      item.segment_id = "P" + std::to_string(person) + "-" + std::to_string(s);
      item.person_id = "P" + std::to_string(person);
      for (int c = 0; c < 16; ++c) item.embedding.push_back(rng.normal());
      items.push_back(std::move(item));
    }
  const auto report = evaluate_item_rounds(items, 10, 1, {1, 3, 5});
  // chance: 5 of 45 gallery items match, so Rank-1 ~ 1/9; 90 query draws
  CHECK(report.rank_at.at(1) > 1.0 / 9.0 - 0.10);
  CHECK(report.rank_at.at(1) < 1.0 / 9.0 + 0.12);
}

TEST_CASE("a random-weights checkpoint on signal-free data scores near chance", "[trainer]") {
  // every identity shares one multipath profile, so labels are noise
  SynthConfig cfg;
  cfg.min_frames = 10;
  cfg.max_frames = 14;
  cfg.antenna_count = 1;
  cfg.layout = SubcarrierLayout::symmetric(8);
  IdentityProfile shared = make_identity_profile(cfg, 0);
  std::vector<CalibratedSegment> segments;
  for (int person = 0; person < 9; ++person)
    for (int s = 0; s < 4; ++s) {
      auto seg = render_segment(cfg, shared, 0, person * 31 + s);
      seg.person_id = "P" + std::to_string(person);
      seg.segment_id = seg.person_id + "-S" + std::to_string(s);
      segments.push_back(calibrate_segment(seg));
    }
  ModelConfig mc;
  mc.d_model = 16;
  mc.heads = 2;
  mc.d_ff = 32;
  mc.depth = 1;
  mc.d_embed = 8;
  mc.max_time = 16;
  mc.channels = segments.front().channels();
  mc.num_classes = 2;
  auto model = TwoStreamModel::init(mc, 23);
  const auto report = evaluate_rounds(model, segments, 10, 1, 16, {1, 3, 5});
  // 3 of 27 gallery items match per query
  CHECK(report.rank_at.at(1) < 1.0 / 9.0 + 0.15);
}

TEST_CASE("evaluating twice gives identical reports", "[trainer]") {
  const auto segments = tiny_dataset(4, 3, 10, 29);
  auto cfg = tiny_train_config();
  const auto outcome = train(cfg, segments);
  const auto a = evaluate_rounds(outcome.model, outcome.test_segments, 3, 9, 8, {1, 3, 5});
  const auto b = evaluate_rounds(outcome.model, outcome.test_segments, 3, 9, 8, {1, 3, 5});
  CHECK(a.map == b.map);
  CHECK(a.minp == b.minp);
  CHECK(a.rank_at == b.rank_at);
  CHECK(a.auc == b.auc);
}

TEST_CASE("report exposes the contracted fields", "[trainer]") {
  const auto segments = tiny_dataset(4, 3, 10, 31);
  auto cfg = tiny_train_config();
  const auto outcome = train(cfg, segments);
  const auto report = evaluate_rounds(outcome.model, outcome.test_segments, 2, 1, 8, {1, 3, 5});
  const auto j = report.to_json();
  CHECK(j.contains("mAP"));
  CHECK(j.contains("mINP"));
  CHECK(j.at("rank_at").contains("rank_1"));
  CHECK(j.at("rank_at").contains("rank_3"));
  CHECK(j.at("rank_at").contains("rank_5"));
  CHECK(j.contains("roc_auc"));
}

TEST_CASE("config validation catches sampler mismatches", "[trainer]") {
  auto cfg = tiny_train_config();
  cfg.batch_size = 5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("training with too few identities fails with ConfigError", "[trainer]") {
  const auto segments = tiny_dataset(2, 4, 10, 37);  // split leaves 1 train identity
  auto cfg = tiny_train_config();
  CHECK_THROWS_AS(train(cfg, segments), ConfigError);
}

TEST_CASE("exploding updates abort with a diagnostic", "[trainer]") {
  const auto segments = tiny_dataset(4, 3, 10, 41);
  auto cfg = tiny_train_config();
  cfg.epochs = 10;
  cfg.optimizer.lr = 1e80;
  cfg.optimizer.weight_decay = 0.0;
  cfg.losses.cls_loss = "cross_entropy";
  cfg.losses.metric_loss = "none";
  try {
    train(cfg, segments);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("batch segments") != std::string::npos);
  }
}

TEST_CASE("the loss ablation runs the six table rows in order", "[trainer]") {
  const auto segments = tiny_dataset(4, 3, 8, 43);
  auto cfg = tiny_train_config();
  cfg.epochs = 1;
  cfg.eval_rounds = 2;
  const auto rows = ablation_matrix(cfg, segments);
  REQUIRE(rows.size() == 6);
  CHECK(rows[0].label == "noaug+Tri+Cro");
  CHECK(rows[1].label == "aug+Tri+Cro");
  CHECK(rows[2].label == "aug+Sof+Cro");
  CHECK(rows[3].label == "aug+Tri+LMCL");
  CHECK(rows[4].label == "noaug+Sof+LMCL");
  CHECK(rows[5].label == "aug+Sof+LMCL");
  CHECK_FALSE(rows[0].config.augment_enabled);
  CHECK(rows[0].config.losses.metric_loss == "triplet");
  CHECK(rows[0].config.losses.cls_loss == "cross_entropy");
  CHECK(rows[5].config.augment_enabled);
  CHECK(rows[5].config.losses.metric_loss == "softtriple");
  CHECK(rows[5].config.losses.cls_loss == "lmcl");
  for (const auto& row : rows) {
    CHECK(row.report.map >= 0.0);
    CHECK(row.report.map <= 1.0);
  }
}

TEST_CASE("the fusion ablation emits early, late, and cls variants", "[trainer]") {
  const auto segments = tiny_dataset(4, 3, 8, 47);
  auto cfg = tiny_train_config();
  cfg.epochs = 1;
  cfg.eval_rounds = 2;
  const auto rows = fusion_ablation(cfg, segments);
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].label == "early");
  CHECK(rows[1].label == "late");
  CHECK(rows[2].label == "cls");
  CHECK(rows[2].config.model.fusion == "cls");
}

TEST_CASE("train config JSON round-trips through from_json", "[trainer]") {
  auto cfg = tiny_train_config();
  cfg.losses.cls_loss = "cross_entropy";
  cfg.losses.metric_loss = "triplet";
  cfg.augment_enabled = false;
  cfg.dataset_path = "somewhere.csi";
  const auto parsed = TrainConfig::from_json(cfg.to_json());
  CHECK(parsed.dataset_path == cfg.dataset_path);
  CHECK(parsed.losses.cls_loss == "cross_entropy");
  CHECK(parsed.losses.metric_loss == "triplet");
  CHECK(parsed.augment_enabled == false);
  CHECK(parsed.model.d_model == cfg.model.d_model);
  CHECK(parsed.batch_size == cfg.batch_size);
  CHECK(parsed.optimizer.lr == cfg.optimizer.lr);
}
