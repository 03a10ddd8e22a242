#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "csireid/batching.hpp"
#include "csireid/errors.hpp"
#include "csireid/rng.hpp"
#include "csireid/tensor.hpp"

namespace csireid {

struct ModelConfig {
  std::int64_t d_model = 128;
  std::int64_t heads = 4;
  std::int64_t d_ff = 256;
  std::int64_t depth = 4;  // encoder blocks per stream
  std::int64_t d_embed = 128;
  std::int64_t max_time = 500;
  std::int64_t channels = 0;  // D; also the phase sequence length S
  std::int64_t num_classes = 0;
  double dropout = 0.1;
  std::string fusion = "cls";  // cls | early | late

  void validate() const {
    if (d_model < 1 || heads < 1 || d_ff < 1 || depth < 1 || d_embed < 1)
      throw ConfigError("model dims must be positive");
    if (d_model % heads != 0) throw ConfigError("d_model must be divisible by heads");
    if (max_time < 1) throw ConfigError("max_time must be positive");
    if (channels < 1) throw ConfigError("model channels (D) must be positive");
    if (num_classes < 1) throw ConfigError("num_classes must be positive");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must lie in [0, 1)");
    if (fusion != "cls" && fusion != "early" && fusion != "late")
      throw ConfigError("fusion must be one of cls, early, late");
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    cfg.d_model = j.value("d_model", cfg.d_model);
    cfg.heads = j.value("heads", cfg.heads);
    cfg.d_ff = j.value("d_ff", cfg.d_ff);
    cfg.depth = j.value("depth", cfg.depth);
    cfg.d_embed = j.value("d_embed", cfg.d_embed);
    cfg.max_time = j.value("max_time", cfg.max_time);
    cfg.channels = j.value("channels", cfg.channels);
    cfg.num_classes = j.value("num_classes", cfg.num_classes);
    cfg.dropout = j.value("dropout", cfg.dropout);
    cfg.fusion = j.value("fusion", cfg.fusion);
    return cfg;
  }

  nlohmann::json to_json() const {
    return {{"d_model", d_model},   {"heads", heads},
            {"d_ff", d_ff},         {"depth", depth},
            {"d_embed", d_embed},   {"max_time", max_time},
            {"channels", channels}, {"num_classes", num_classes},
            {"dropout", dropout},   {"fusion", fusion}};
  }
};

namespace detail {

inline Tensor init_linear(Rng& rng, std::int64_t fan_in, std::int64_t fan_out) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<double> data(static_cast<std::size_t>(fan_in * fan_out));
  for (auto& v : data) v = rng.uniform(-bound, bound);
  return Tensor::from_data({fan_in, fan_out}, std::move(data), true);
}

inline Tensor init_pos_embed(Rng& rng, std::int64_t rows, std::int64_t cols) {
  std::vector<double> data(static_cast<std::size_t>(rows * cols));
  for (auto& v : data) v = rng.normal(0.0, 0.02);
  return Tensor::from_data({rows, cols}, std::move(data), true);
}

}  // namespace detail

struct EncoderBlockParams {
  Tensor wq, wk, wv, wo;        // (d_model, d_model)
  Tensor ln1_gain, ln1_bias;
  Tensor ff1_w, ff1_b;          // (d_model, d_ff), (d_ff)
  Tensor ff2_w, ff2_b;          // (d_ff, d_model), (d_model)
  Tensor ln2_gain, ln2_bias;

  static EncoderBlockParams init(Rng& rng, std::int64_t d_model, std::int64_t d_ff) {
    EncoderBlockParams p;
    p.wq = detail::init_linear(rng, d_model, d_model);
    p.wk = detail::init_linear(rng, d_model, d_model);
    p.wv = detail::init_linear(rng, d_model, d_model);
    p.wo = detail::init_linear(rng, d_model, d_model);
    p.ln1_gain = Tensor::filled({d_model}, 1.0, true);
    p.ln1_bias = Tensor::zeros({d_model}, true);
    p.ff1_w = detail::init_linear(rng, d_model, d_ff);
    p.ff1_b = Tensor::zeros({d_ff}, true);
    p.ff2_w = detail::init_linear(rng, d_ff, d_model);
    p.ff2_b = Tensor::zeros({d_model}, true);
    p.ln2_gain = Tensor::filled({d_model}, 1.0, true);
    p.ln2_bias = Tensor::zeros({d_model}, true);
    return p;
  }
};

/// Optional key-padding mask over a (B, T) grid; absent means every
/// position is valid.
struct AttentionMask {
  const std::vector<double>* mask = nullptr;
  std::int64_t batch = 0;
};

/// Multi-head self-attention with optional key-padding mask. Attention
/// weights at masked key positions are exactly zero.
inline Tensor masked_self_attention(const Tensor& x, const AttentionMask& mask,
                                    const EncoderBlockParams& p, std::int64_t heads) {
  const std::int64_t d_model = x.shape().back();
  const double head_dim = static_cast<double>(d_model / heads);

  Tensor q = ops::split_heads(ops::matmul(x, p.wq), heads);
  Tensor k = ops::split_heads(ops::matmul(x, p.wk), heads);
  Tensor v = ops::split_heads(ops::matmul(x, p.wv), heads);

  Tensor scores = ops::affine(ops::matmul(q, ops::transpose_last2(k)), 1.0 / std::sqrt(head_dim));
  if (mask.mask != nullptr)
    scores = ops::apply_key_padding_mask(scores, *mask.mask, mask.batch, heads);
  Tensor attn = ops::softmax_lastdim(scores);
  Tensor ctx = ops::merge_heads(ops::matmul(attn, v), heads);
  return ops::matmul(ctx, p.wo);
}

/// Pools the amplitude stream over valid time positions, projects it, and
/// adds the result to every phase token.
inline Tensor lateral_connect(const Tensor& amp_feats, const std::vector<double>& mask,
                              const Tensor& phase_feats, const Tensor& proj) {
  Tensor pooled = ops::masked_mean_time(amp_feats, mask);
  Tensor projected = ops::matmul(pooled, proj);
  return ops::add_broadcast_rows(phase_feats, projected);
}

struct ForwardResult {
  Tensor embedding;  // (B, d_embed)
  Tensor logits;     // (B, num_classes)
};

/// Two-stream transformer over time-domain amplitude tokens (masked) and
/// frequency-domain phase tokens (unmasked), with per-layer lateral
/// fusion from the amplitude branch into the phase branch.
class TwoStreamModel {
 public:
  ModelConfig cfg;
  Tensor amp_in_w, amp_in_b;      // (D, d_model), (d_model)
  Tensor phase_in_w, phase_in_b;  // (max_time, d_model), (d_model)
  Tensor amp_pos;                 // (max_time, d_model)
  Tensor phase_pos;               // (S = D, d_model)
  std::vector<EncoderBlockParams> amp_blocks;
  std::vector<EncoderBlockParams> phase_blocks;
  std::vector<Tensor> lateral_proj;  // depth x (d_model, d_model), cls fusion only
  Tensor embed_w, embed_b;           // (d_model, d_embed), (d_embed)
  Tensor class_w;                    // (num_classes, d_embed); rows are class directions

  static TwoStreamModel init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    TwoStreamModel m;
    m.cfg = cfg;
    Rng rng(derive_seed(seed, 0x30de1));
    m.amp_in_w = detail::init_linear(rng, cfg.channels, cfg.d_model);
    m.amp_in_b = Tensor::zeros({cfg.d_model}, true);
    m.phase_in_w = detail::init_linear(rng, cfg.max_time, cfg.d_model);
    m.phase_in_b = Tensor::zeros({cfg.d_model}, true);
    m.amp_pos = detail::init_pos_embed(rng, cfg.max_time, cfg.d_model);
    m.phase_pos = detail::init_pos_embed(rng, cfg.channels, cfg.d_model);
    for (std::int64_t l = 0; l < cfg.depth; ++l)
      m.amp_blocks.push_back(EncoderBlockParams::init(rng, cfg.d_model, cfg.d_ff));
    if (cfg.fusion != "early") {
      for (std::int64_t l = 0; l < cfg.depth; ++l)
        m.phase_blocks.push_back(EncoderBlockParams::init(rng, cfg.d_model, cfg.d_ff));
    }
    if (cfg.fusion == "cls") {
      for (std::int64_t l = 0; l < cfg.depth; ++l)
        m.lateral_proj.push_back(detail::init_linear(rng, cfg.d_model, cfg.d_model));
    }
    m.embed_w = detail::init_linear(rng, cfg.d_model, cfg.d_embed);
    m.embed_b = Tensor::zeros({cfg.d_embed}, true);
    {
      const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.d_embed));
      std::vector<double> data(static_cast<std::size_t>(cfg.num_classes * cfg.d_embed));
      for (auto& v : data) v = rng.uniform(-bound, bound);
      m.class_w = Tensor::from_data({cfg.num_classes, cfg.d_embed}, std::move(data), true);
    }
    return m;
  }

  /// Named parameters in a fixed order; the checkpoint writer and the
  /// optimizer both rely on this ordering.
  std::vector<std::pair<std::string, Tensor>> parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("amp_in.w", amp_in_w);
    out.emplace_back("amp_in.b", amp_in_b);
    out.emplace_back("phase_in.w", phase_in_w);
    out.emplace_back("phase_in.b", phase_in_b);
    out.emplace_back("amp_pos", amp_pos);
    out.emplace_back("phase_pos", phase_pos);
    auto add_block = [&out](const std::string& prefix, const EncoderBlockParams& b) {
      out.emplace_back(prefix + ".wq", b.wq);
      out.emplace_back(prefix + ".wk", b.wk);
      out.emplace_back(prefix + ".wv", b.wv);
      out.emplace_back(prefix + ".wo", b.wo);
      out.emplace_back(prefix + ".ln1.g", b.ln1_gain);
      out.emplace_back(prefix + ".ln1.b", b.ln1_bias);
      out.emplace_back(prefix + ".ff1.w", b.ff1_w);
      out.emplace_back(prefix + ".ff1.b", b.ff1_b);
      out.emplace_back(prefix + ".ff2.w", b.ff2_w);
      out.emplace_back(prefix + ".ff2.b", b.ff2_b);
      out.emplace_back(prefix + ".ln2.g", b.ln2_gain);
      out.emplace_back(prefix + ".ln2.b", b.ln2_bias);
    };
    for (std::size_t l = 0; l < amp_blocks.size(); ++l)
      add_block("amp." + std::to_string(l), amp_blocks[l]);
    for (std::size_t l = 0; l < phase_blocks.size(); ++l)
      add_block("phase." + std::to_string(l), phase_blocks[l]);
    for (std::size_t l = 0; l < lateral_proj.size(); ++l)
      out.emplace_back("lateral." + std::to_string(l), lateral_proj[l]);
    out.emplace_back("embed.w", embed_w);
    out.emplace_back("embed.b", embed_b);
    out.emplace_back("class.w", class_w);
    return out;
  }

  std::int64_t parameter_count() const {
    std::int64_t n = 0;
    for (const auto& [name, t] : parameters()) n += t.numel();
    return n;
  }

  ForwardResult forward(const PaddedBatch& batch, bool train, Rng& rng) const {
    if (batch.channels != cfg.channels)
      throw ShapeError("forward: batch has D=" + std::to_string(batch.channels) +
                       ", model expects " + std::to_string(cfg.channels));
    if (batch.max_time > cfg.max_time)
      throw ShapeError("forward: batch max_time " + std::to_string(batch.max_time) +
                       " exceeds model max_time " + std::to_string(cfg.max_time));

    const std::int64_t b = batch.batch;
    const std::int64_t cap = batch.max_time;
    Tensor amp_in = Tensor::from_data({b, cap, cfg.channels}, batch.amp);
    Tensor phase_in = Tensor::from_data({b, cfg.channels, cap}, batch.phase);

    // Amplitude: time tokens. Padded positions stay masked throughout.
    Tensor amp = ops::add(ops::matmul(amp_in, amp_in_w), amp_in_b);
    amp = ops::add(amp, ops::take_rows(amp_pos, cap));

    // Phase: channel tokens of width max_time; zero-padding the token
    // (time) dimension adds nothing through the linear projection, so no
    // mask is kept for this stream.
    Tensor phase = ops::pad_lastdim(phase_in, cfg.max_time);
    phase = ops::add(ops::matmul(phase, phase_in_w), phase_in_b);
    phase = ops::add(phase, phase_pos);

    AttentionMask amp_mask{&batch.mask, b};

    if (cfg.fusion == "early") {
      Tensor tokens = ops::concat_tokens(amp, phase);
      std::vector<double> joint_mask(static_cast<std::size_t>(b * (cap + cfg.channels)), 1.0);
      for (std::int64_t bi = 0; bi < b; ++bi)
        for (std::int64_t t = 0; t < cap; ++t)
          joint_mask[static_cast<std::size_t>(bi * (cap + cfg.channels) + t)] =
              batch.mask[static_cast<std::size_t>(bi * cap + t)];
      AttentionMask joint{&joint_mask, b};
      for (const auto& block : amp_blocks) tokens = encode(tokens, joint, block, train, rng);
      Tensor pooled = ops::masked_mean_time(tokens, joint_mask);
      return heads_from(pooled);
    }

    if (cfg.fusion == "late") {
      for (std::int64_t l = 0; l < cfg.depth; ++l) {
        amp = encode(amp, amp_mask, amp_blocks[static_cast<std::size_t>(l)], train, rng);
        phase = encode(phase, {}, phase_blocks[static_cast<std::size_t>(l)], train, rng);
      }
      Tensor amp_pooled = ops::masked_mean_time(amp, batch.mask);
      Tensor phase_pooled = ops::mean_axis(phase, 1);
      Tensor emb_a = ops::add(ops::matmul(amp_pooled, embed_w), embed_b);
      Tensor emb_p = ops::add(ops::matmul(phase_pooled, embed_w), embed_b);
      Tensor embedding = ops::affine(ops::add(emb_a, emb_p), 0.5);
      Tensor logits = ops::matmul(embedding, ops::transpose_last2(class_w));
      return {embedding, logits};
    }

    // cls: continuous lateral connections after each block pair.
    for (std::int64_t l = 0; l < cfg.depth; ++l) {
      amp = encode(amp, amp_mask, amp_blocks[static_cast<std::size_t>(l)], train, rng);
      phase = encode(phase, {}, phase_blocks[static_cast<std::size_t>(l)], train, rng);
      phase = lateral_connect(amp, batch.mask, phase, lateral_proj[static_cast<std::size_t>(l)]);
    }
    Tensor pooled = ops::mean_axis(phase, 1);
    return heads_from(pooled);
  }

 private:
  ForwardResult heads_from(const Tensor& pooled) const {
    Tensor embedding = ops::add(ops::matmul(pooled, embed_w), embed_b);
    Tensor logits = ops::matmul(embedding, ops::transpose_last2(class_w));
    return {embedding, logits};
  }

  Tensor encode(const Tensor& x, const AttentionMask& mask, const EncoderBlockParams& p,
                bool train, Rng& rng) const {
    Tensor h = ops::layer_norm(x, p.ln1_gain, p.ln1_bias);
    Tensor attn = masked_self_attention(h, mask, p, cfg.heads);
    Tensor y = ops::add(x, ops::dropout(attn, cfg.dropout, rng, train));
    Tensor h2 = ops::layer_norm(y, p.ln2_gain, p.ln2_bias);
    Tensor ff = ops::add(ops::matmul(h2, p.ff1_w), p.ff1_b);
    ff = ops::add(ops::matmul(ops::gelu(ff), p.ff2_w), p.ff2_b);
    return ops::add(y, ops::dropout(ff, cfg.dropout, rng, train));
  }
};

}  // namespace csireid
