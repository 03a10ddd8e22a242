#include <catch_amalgamated.hpp>

#include <filesystem>

#include "csireid/checkpoint.hpp"
#include "csireid/model.hpp"
#include "test_support.hpp"

using namespace csireid;
using Catch::Matchers::WithinAbs;
using csireid::testing::random_tensor;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.d_model = 8;
  cfg.heads = 2;
  cfg.d_ff = 16;
  cfg.depth = 2;
  cfg.d_embed = 6;
  cfg.max_time = 16;
  cfg.channels = 5;
  cfg.num_classes = 3;
  cfg.dropout = 0.0;
  return cfg;
}

PaddedBatch random_batch(std::int64_t b, std::int64_t cap, std::int64_t d,
                         const std::vector<std::int64_t>& lengths, std::uint64_t seed) {
  PaddedBatch batch;
  batch.batch = b;
  batch.max_time = cap;
  batch.channels = d;
  batch.amp.assign(static_cast<std::size_t>(b * cap * d), 0.0);
  batch.phase.assign(static_cast<std::size_t>(b * d * cap), 0.0);
  batch.mask.assign(static_cast<std::size_t>(b * cap), 0.0);
  batch.lengths = lengths;
  Rng rng(seed);
  for (std::int64_t bi = 0; bi < b; ++bi) {
    batch.labels.push_back(static_cast<int>(bi % 3));
    batch.segment_ids.push_back("seg" + std::to_string(bi));
    for (std::int64_t t = 0; t < lengths[static_cast<std::size_t>(bi)]; ++t) {
      batch.mask[static_cast<std::size_t>(bi * cap + t)] = 1.0;
      for (std::int64_t c = 0; c < d; ++c) {
        const double amp = rng.normal(1.0, 0.4);
        const double phase = rng.normal(0.0, 0.8);
        batch.amp[static_cast<std::size_t>((bi * cap + t) * d + c)] = amp;
        batch.phase[static_cast<std::size_t>((bi * d + c) * cap + t)] = phase;
      }
    }
  }
  return batch;
}

/// Batch with the same payload re-padded to a larger cap.
PaddedBatch repad(const PaddedBatch& in, std::int64_t new_cap) {
  PaddedBatch out;
  out.batch = in.batch;
  out.max_time = new_cap;
  out.channels = in.channels;
  out.lengths = in.lengths;
  out.labels = in.labels;
  out.segment_ids = in.segment_ids;
  out.amp.assign(static_cast<std::size_t>(in.batch * new_cap * in.channels), 0.0);
  out.phase.assign(static_cast<std::size_t>(in.batch * in.channels * new_cap), 0.0);
  out.mask.assign(static_cast<std::size_t>(in.batch * new_cap), 0.0);
  for (std::int64_t b = 0; b < in.batch; ++b) {
    for (std::int64_t t = 0; t < in.max_time; ++t) {
      out.mask[static_cast<std::size_t>(b * new_cap + t)] =
          in.mask[static_cast<std::size_t>(b * in.max_time + t)];
      for (std::int64_t c = 0; c < in.channels; ++c) {
        out.amp[static_cast<std::size_t>((b * new_cap + t) * in.channels + c)] =
            in.amp[static_cast<std::size_t>((b * in.max_time + t) * in.channels + c)];
        out.phase[static_cast<std::size_t>((b * in.channels + c) * new_cap + t)] =
            in.phase[static_cast<std::size_t>((b * in.channels + c) * in.max_time + t)];
      }
    }
  }
  return out;
}

}  // namespace

TEST_CASE("all-ones mask equals unmasked attention", "[model]") {
  Rng rng(1);
  auto params = EncoderBlockParams::init(rng, 8, 16);
  auto x = random_tensor({2, 4, 8}, rng, false);
  std::vector<double> mask(8, 1.0);
  auto masked = masked_self_attention(x, {&mask, 2}, params, 2);
  auto open = masked_self_attention(x, {}, params, 2);
  REQUIRE(masked.values().size() == open.values().size());
  for (std::size_t i = 0; i < masked.values().size(); ++i)
    CHECK_THAT(masked.values()[i], WithinAbs(open.values()[i], 1e-12));
}

TEST_CASE("one valid key reduces attention to the value projection", "[model]") {
  Rng rng(2);
  auto params = EncoderBlockParams::init(rng, 6, 8);
  auto x = random_tensor({1, 2, 6}, rng, false);
  std::vector<double> mask{1.0, 0.0};
  auto out = masked_self_attention(x, {&mask, 1}, params, 2);

  // hand oracle: position 0 attends only to itself, so out = (x0 Wv) Wo
  std::vector<double> v0(6, 0.0), expected(6, 0.0);
  for (int j = 0; j < 6; ++j)
    for (int i = 0; i < 6; ++i)
      v0[static_cast<std::size_t>(j)] += x.values()[static_cast<std::size_t>(i)] *
                                          params.wv.values()[static_cast<std::size_t>(i * 6 + j)];
  for (int j = 0; j < 6; ++j)
    for (int i = 0; i < 6; ++i)
      expected[static_cast<std::size_t>(j)] +=
          v0[static_cast<std::size_t>(i)] * params.wo.values()[static_cast<std::size_t>(i * 6 + j)];
  for (int j = 0; j < 6; ++j)
    CHECK_THAT(out.values()[static_cast<std::size_t>(j)],
               WithinAbs(expected[static_cast<std::size_t>(j)], 1e-12));
}

TEST_CASE("appending masked padding leaves valid attention outputs unchanged", "[model]") {
  Rng rng(3);
  auto params = EncoderBlockParams::init(rng, 8, 16);
  auto x = random_tensor({2, 3, 8}, rng, false);
  std::vector<double> mask{1, 1, 1, 1, 1, 0};
  auto base = masked_self_attention(x, {&mask, 2}, params, 2);

  std::vector<double> padded_data(2 * 5 * 8, 0.37);  // arbitrary junk in the pad rows
  for (std::int64_t b = 0; b < 2; ++b)
    for (std::int64_t t = 0; t < 3; ++t)
      for (std::int64_t c = 0; c < 8; ++c)
        padded_data[static_cast<std::size_t>((b * 5 + t) * 8 + c)] =
            x.values()[static_cast<std::size_t>((b * 3 + t) * 8 + c)];
  auto x_pad = Tensor::from_data({2, 5, 8}, std::move(padded_data));
  std::vector<double> mask_pad{1, 1, 1, 0, 0, 1, 1, 0, 0, 0};
  auto padded = masked_self_attention(x_pad, {&mask_pad, 2}, params, 2);

  for (std::int64_t b = 0; b < 2; ++b)
    for (std::int64_t t = 0; t < 3; ++t) {
      if (mask[static_cast<std::size_t>(b * 3 + t)] == 0.0) continue;
      for (std::int64_t c = 0; c < 8; ++c)
        CHECK_THAT(padded.values()[static_cast<std::size_t>((b * 5 + t) * 8 + c)],
                   WithinAbs(base.values()[static_cast<std::size_t>((b * 3 + t) * 8 + c)], 1e-6));
    }
}

TEST_CASE("lateral connection with zero amplitude features is the identity", "[model]") {
  Rng rng(4);
  auto amp = Tensor::zeros({2, 4, 6});
  auto phase = random_tensor({2, 3, 6}, rng, false);
  auto proj = random_tensor({6, 6}, rng, false);
  std::vector<double> mask(8, 1.0);
  auto out = lateral_connect(amp, mask, phase, proj);
  CHECK(out.values() == phase.values());
}

TEST_CASE("lateral pooling over a single valid frame picks that frame", "[model]") {
  Rng rng(5);
  auto amp = random_tensor({1, 2, 4}, rng, false);
  auto phase = Tensor::zeros({1, 3, 4});
  std::vector<double> identity_flat(16, 0.0);
  for (int i = 0; i < 4; ++i) identity_flat[static_cast<std::size_t>(i * 4 + i)] = 1.0;
  auto proj = Tensor::from_data({4, 4}, std::move(identity_flat));
  std::vector<double> mask{0.0, 1.0};
  auto out = lateral_connect(amp, mask, phase, proj);
  for (int s = 0; s < 3; ++s)
    for (int c = 0; c < 4; ++c)
      CHECK_THAT(out.values()[static_cast<std::size_t>(s * 4 + c)],
                 WithinAbs(amp.values()[static_cast<std::size_t>(4 + c)], 1e-12));
}

TEST_CASE("lateral connection matches a direct pool-project-add oracle", "[model]") {
  Rng rng(6);
  auto amp = random_tensor({2, 4, 5}, rng, false);
  auto phase = random_tensor({2, 3, 5}, rng, false);
  auto proj = random_tensor({5, 5}, rng, false);
  std::vector<double> mask{1, 0, 1, 1, 1, 1, 0, 0};
  auto out = lateral_connect(amp, mask, phase, proj);

  for (std::int64_t b = 0; b < 2; ++b) {
    std::vector<double> pooled(5, 0.0);
    double count = 0.0;
    for (std::int64_t t = 0; t < 4; ++t) {
      if (mask[static_cast<std::size_t>(b * 4 + t)] == 0.0) continue;
      count += 1.0;
      for (std::int64_t c = 0; c < 5; ++c)
        pooled[static_cast<std::size_t>(c)] +=
            amp.values()[static_cast<std::size_t>((b * 4 + t) * 5 + c)];
    }
    for (auto& v : pooled) v /= count;
    std::vector<double> projected(5, 0.0);
    for (std::int64_t j = 0; j < 5; ++j)
      for (std::int64_t i = 0; i < 5; ++i)
        projected[static_cast<std::size_t>(j)] +=
            pooled[static_cast<std::size_t>(i)] * proj.values()[static_cast<std::size_t>(i * 5 + j)];
    for (std::int64_t s = 0; s < 3; ++s)
      for (std::int64_t c = 0; c < 5; ++c) {
        const auto idx = static_cast<std::size_t>((b * 3 + s) * 5 + c);
        CHECK_THAT(out.values()[idx],
                   WithinAbs(phase.values()[idx] + projected[static_cast<std::size_t>(c)], 1e-12));
      }
  }
}

TEST_CASE("forward emits the contracted shapes", "[model]") {
  const auto cfg = tiny_config();
  auto model = TwoStreamModel::init(cfg, 11);
  auto batch = random_batch(4, 12, cfg.channels, {12, 7, 3, 9}, 1);
  Rng rng(0);
  auto out = model.forward(batch, false, rng);
  CHECK(out.embedding.shape() == Shape{4, cfg.d_embed});
  CHECK(out.logits.shape() == Shape{4, cfg.num_classes});
}

TEST_CASE("permuting the batch permutes the outputs", "[model]") {
  const auto cfg = tiny_config();
  auto model = TwoStreamModel::init(cfg, 12);
  auto batch = random_batch(3, 10, cfg.channels, {10, 6, 4}, 2);

  PaddedBatch permuted;
  permuted.batch = 3;
  permuted.max_time = 10;
  permuted.channels = cfg.channels;
  const std::vector<std::int64_t> order{2, 0, 1};
  permuted.amp.resize(batch.amp.size());
  permuted.phase.resize(batch.phase.size());
  permuted.mask.resize(batch.mask.size());
  for (std::int64_t nb = 0; nb < 3; ++nb) {
    const std::int64_t ob = order[static_cast<std::size_t>(nb)];
    permuted.lengths.push_back(batch.lengths[static_cast<std::size_t>(ob)]);
    permuted.labels.push_back(batch.labels[static_cast<std::size_t>(ob)]);
    permuted.segment_ids.push_back(batch.segment_ids[static_cast<std::size_t>(ob)]);
    std::copy_n(batch.amp.begin() + ob * 10 * cfg.channels, 10 * cfg.channels,
                permuted.amp.begin() + nb * 10 * cfg.channels);
    std::copy_n(batch.phase.begin() + ob * cfg.channels * 10, cfg.channels * 10,
                permuted.phase.begin() + nb * cfg.channels * 10);
    std::copy_n(batch.mask.begin() + ob * 10, 10, permuted.mask.begin() + nb * 10);
  }

  Rng rng(0);
  auto base = model.forward(batch, false, rng);
  auto swapped = model.forward(permuted, false, rng);
  for (std::int64_t nb = 0; nb < 3; ++nb) {
    const std::int64_t ob = order[static_cast<std::size_t>(nb)];
    for (std::int64_t c = 0; c < cfg.d_embed; ++c)
      CHECK_THAT(swapped.embedding.values()[static_cast<std::size_t>(nb * cfg.d_embed + c)],
                 WithinAbs(base.embedding.values()[static_cast<std::size_t>(ob * cfg.d_embed + c)],
                           1e-9));
  }
}

TEST_CASE("padding extension does not move embeddings", "[model]") {
  const auto cfg = tiny_config();  // max_time 16
  auto model = TwoStreamModel::init(cfg, 13);
  auto batch = random_batch(3, 8, cfg.channels, {8, 5, 2}, 3);
  auto padded = repad(batch, 16);
  Rng rng(0);
  auto base = model.forward(batch, false, rng);
  auto wide = model.forward(padded, false, rng);
  for (std::size_t i = 0; i < base.embedding.values().size(); ++i)
    CHECK_THAT(wide.embedding.values()[i], WithinAbs(base.embedding.values()[i], 1e-5));
}

TEST_CASE("eval forward is deterministic", "[model]") {
  const auto cfg = tiny_config();
  auto model = TwoStreamModel::init(cfg, 14);
  auto batch = random_batch(2, 9, cfg.channels, {9, 4}, 4);
  Rng rng_a(1), rng_b(2);
  auto a = model.forward(batch, false, rng_a);
  auto b = model.forward(batch, false, rng_b);
  CHECK(a.embedding.values() == b.embedding.values());
  CHECK(a.logits.values() == b.logits.values());
}

TEST_CASE("zeroed lateral projections reduce to a pure phase stream", "[model]") {
  auto cfg = tiny_config();
  auto model = TwoStreamModel::init(cfg, 15);
  for (auto& proj : model.lateral_proj)
    for (auto& v : proj.values_mut()) v = 0.0;
  auto batch = random_batch(2, 8, cfg.channels, {8, 5}, 5);
  Rng rng(0);
  auto out = model.forward(batch, false, rng);

  // independent phase-only recomputation from the model's parameters
  Tensor phase_in = Tensor::from_data({2, cfg.channels, 8}, batch.phase);
  Tensor phase = ops::pad_lastdim(phase_in, cfg.max_time);
  phase = ops::add(ops::matmul(phase, model.phase_in_w), model.phase_in_b);
  phase = ops::add(phase, model.phase_pos);
  for (const auto& block : model.phase_blocks) {
    Tensor h = ops::layer_norm(phase, block.ln1_gain, block.ln1_bias);
    Tensor attn = masked_self_attention(h, {}, block, cfg.heads);
    phase = ops::add(phase, attn);
    Tensor h2 = ops::layer_norm(phase, block.ln2_gain, block.ln2_bias);
    Tensor ff = ops::add(ops::matmul(h2, block.ff1_w), block.ff1_b);
    ff = ops::add(ops::matmul(ops::gelu(ff), block.ff2_w), block.ff2_b);
    phase = ops::add(phase, ff);
  }
  Tensor pooled = ops::mean_axis(phase, 1);
  Tensor embedding = ops::add(ops::matmul(pooled, model.embed_w), model.embed_b);
  REQUIRE(embedding.values().size() == out.embedding.values().size());
  for (std::size_t i = 0; i < embedding.values().size(); ++i)
    CHECK_THAT(out.embedding.values()[i], WithinAbs(embedding.values()[i], 1e-9));
}

TEST_CASE("full-model gradients match finite differences", "[model]") {
  ModelConfig cfg;
  cfg.d_model = 8;
  cfg.heads = 2;
  cfg.d_ff = 12;
  cfg.depth = 2;
  cfg.d_embed = 5;
  cfg.max_time = 6;
  cfg.channels = 5;  // S = 5
  cfg.num_classes = 2;
  cfg.dropout = 0.0;
  auto model = TwoStreamModel::init(cfg, 16);
  auto batch = random_batch(2, 6, cfg.channels, {6, 4}, 6);
  batch.labels = {0, 1};

  std::vector<Tensor> leaves;
  for (auto& [name, t] : model.parameters()) leaves.push_back(t);
  auto build = [&] {
    Rng rng(0);
    auto fwd = model.forward(batch, false, rng);
    return ops::cross_entropy(fwd.logits, batch.labels);
  };
  CHECK(csireid::testing::max_grad_rel_error(leaves, build) < 1e-4);
}

TEST_CASE("forward geometry mismatches raise ShapeError", "[model]") {
  const auto cfg = tiny_config();
  auto model = TwoStreamModel::init(cfg, 17);
  auto bad_channels = random_batch(1, 8, cfg.channels + 1, {8}, 7);
  Rng rng(0);
  CHECK_THROWS_AS(model.forward(bad_channels, false, rng), ShapeError);
  auto too_long = random_batch(1, cfg.max_time + 4, cfg.channels, {cfg.max_time + 4}, 8);
  CHECK_THROWS_AS(model.forward(too_long, false, rng), ShapeError);
}

TEST_CASE("early and late fusion variants run and differ structurally", "[model]") {
  auto cfg = tiny_config();
  cfg.fusion = "early";
  auto early = TwoStreamModel::init(cfg, 18);
  CHECK(early.lateral_proj.empty());
  CHECK(early.phase_blocks.empty());

  cfg.fusion = "late";
  auto late = TwoStreamModel::init(cfg, 18);
  CHECK(late.lateral_proj.empty());
  CHECK(late.phase_blocks.size() == static_cast<std::size_t>(cfg.depth));

  auto batch = random_batch(2, 10, cfg.channels, {10, 6}, 9);
  Rng rng(0);
  for (auto* m : {&early, &late}) {
    auto out = m->forward(batch, false, rng);
    CHECK(out.embedding.shape() == Shape{2, cfg.d_embed});
  }
}

TEST_CASE("checkpoint round-trips byte-exactly", "[model]") {
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "csireid_model_tests";
  fs::create_directories(dir);
  const auto path_a = (dir / "model_a.ckpt").string();
  const auto path_b = (dir / "model_b.ckpt").string();

  const auto cfg = tiny_config();
  auto model = TwoStreamModel::init(cfg, 19);
  save_checkpoint(model, path_a);
  auto loaded = load_checkpoint(path_a);
  save_checkpoint(loaded, path_b);
  CHECK(csireid::detail::read_file(path_a) == csireid::detail::read_file(path_b));

  // reloaded parameters agree with the f32 payload exactly
  auto reloaded = load_checkpoint(path_b);
  const auto a = loaded.parameters();
  const auto b = reloaded.parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].second.values() == b[i].second.values());

  // and the loaded model computes the same function as the saved one
  auto batch = random_batch(2, 8, cfg.channels, {8, 6}, 10);
  Rng rng(0);
  auto out_orig = loaded.forward(batch, false, rng);
  auto out_loaded = reloaded.forward(batch, false, rng);
  CHECK(out_orig.embedding.values() == out_loaded.embedding.values());
}

TEST_CASE("checkpoints of all fusion variants reload", "[model]") {
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "csireid_model_tests";
  fs::create_directories(dir);
  for (const std::string fusion : {"early", "late", "cls"}) {
    auto cfg = tiny_config();
    cfg.fusion = fusion;
    auto model = TwoStreamModel::init(cfg, 20);
    const auto path = (dir / ("fusion_" + fusion + ".ckpt")).string();
    save_checkpoint(model, path);
    auto loaded = load_checkpoint(path);
    CHECK(loaded.cfg.fusion == fusion);
    CHECK(loaded.parameters().size() == model.parameters().size());
  }
}
