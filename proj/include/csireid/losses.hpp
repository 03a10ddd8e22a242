#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "csireid/errors.hpp"
#include "csireid/log.hpp"
#include "csireid/tensor.hpp"

namespace csireid {

struct LmclConfig {
  double s = 30.0;  // logit scale
  double m = 0.35;  // cosine margin

  void validate() const {
    if (s <= 0.0) throw ConfigError("lmcl: scale s must be positive");
    if (m < 0.0 || m >= 1.0) throw ConfigError("lmcl: margin m must lie in [0, 1)");
  }
};

/// Large margin cosine loss: softmax cross-entropy over s * (cos(theta_j)
/// - m * [j == y]) with features and class weight rows L2-normalized.
inline Tensor lmcl_loss(const Tensor& features, const Tensor& class_weights,
                        const std::vector<int>& labels, const LmclConfig& cfg) {
  cfg.validate();
  if (features.rank() != 2 || class_weights.rank() != 2 ||
      features.shape()[1] != class_weights.shape()[1])
    throw ShapeError("lmcl_loss: features " + shape_str(features.shape()) + " vs weights " +
                     shape_str(class_weights.shape()));
  const std::int64_t num_classes = class_weights.shape()[0];

  Tensor cos = ops::matmul(ops::l2_normalize(features),
                           ops::transpose_last2(ops::l2_normalize(class_weights)));
  std::vector<double> margin(static_cast<std::size_t>(features.shape()[0] * num_classes), 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes)
      throw ConfigError("lmcl_loss: label out of range");
    margin[i * static_cast<std::size_t>(num_classes) + static_cast<std::size_t>(labels[i])] =
        cfg.m;
  }
  Tensor margin_t = Tensor::from_data({features.shape()[0], num_classes}, std::move(margin));
  Tensor logits = ops::affine(ops::sub(cos, margin_t), cfg.s);
  return ops::cross_entropy(logits, labels);
}

struct SoftTripleConfig {
  std::int64_t centers_per_class = 2;  // K
  double sigma = 20.0;                 // distance scaling
  double delta_margin = 0.01;          // delta
  double lambda_sep = 20.0;            // lambda
  std::string variant = "ratio";       // ratio | original

  void validate() const {
    if (centers_per_class < 1) throw ConfigError("softtriple: K must be >= 1");
    if (sigma <= 0.0) throw ConfigError("softtriple: sigma must be positive");
    if (delta_margin < 0.0) throw ConfigError("softtriple: delta must be nonnegative");
    if (variant != "ratio" && variant != "original")
      throw ConfigError("softtriple: variant must be 'ratio' or 'original'");
  }
};

/// Learnable centers for SoftTriple, (C * K, d_embed) with rows grouped by
/// class.
inline Tensor init_softtriple_centers(std::int64_t num_classes, std::int64_t k,
                                      std::int64_t d_embed, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0xce17e5));
  std::vector<double> data(static_cast<std::size_t>(num_classes * k * d_embed));
  for (auto& v : data) v = rng.normal(0.0, 1.0 / std::sqrt(static_cast<double>(d_embed)));
  return Tensor::from_data({num_classes * k, d_embed}, std::move(data), true);
}

/// SoftTriple with multiple centers per class. The default "ratio"
/// variant evaluates, with d the squared Euclidean distance between
/// L2-normalized vectors,
///   mean_i log [ (1 + sum_{j,k} e^{-sigma (d(x_i, c_jk) - delta)}) /
///                (e^lambda + sum_{j != y_i, k} e^{-sigma d(x_i, c_jk)}) ].
/// The "original" variant uses the relaxed soft-max similarity with an
/// outer softmax margin on the own-class entry instead.
inline Tensor softtriple_loss(const Tensor& features, const Tensor& centers,
                              const std::vector<int>& labels, std::int64_t num_classes,
                              const SoftTripleConfig& cfg) {
  cfg.validate();
  if (features.rank() != 2 || centers.rank() != 2 ||
      centers.shape()[0] != num_classes * cfg.centers_per_class ||
      centers.shape()[1] != features.shape()[1])
    throw ShapeError("softtriple_loss: features " + shape_str(features.shape()) + " vs centers " +
                     shape_str(centers.shape()));
  const std::int64_t b = features.shape()[0];
  const std::int64_t k = cfg.centers_per_class;
  const std::int64_t ck = num_classes * k;
  for (int y : labels)
    if (y < 0 || y >= num_classes) throw ConfigError("softtriple_loss: label out of range");

  Tensor fn = ops::l2_normalize(features);
  Tensor cn = ops::l2_normalize(centers);
  Tensor cos = ops::matmul(fn, ops::transpose_last2(cn));  // (B, C*K)

  if (cfg.variant == "original") {
    // Soft assignment over each class's K centers, then a softmax loss on
    // the relaxed similarities with margin delta on the own class.
    constexpr double assignment_gamma = 0.1;
    Tensor sim_groups = ops::reshape(cos, {b, num_classes, k});
    Tensor weights = ops::softmax_lastdim(ops::affine(sim_groups, 1.0 / assignment_gamma));
    Tensor relaxed = ops::sum_axis(ops::mul(weights, sim_groups), 2);  // (B, C)
    std::vector<double> margin(static_cast<std::size_t>(b * num_classes), 0.0);
    for (std::size_t i = 0; i < labels.size(); ++i)
      margin[i * static_cast<std::size_t>(num_classes) + static_cast<std::size_t>(labels[i])] =
          cfg.delta_margin;
    Tensor margin_t = Tensor::from_data({b, num_classes}, std::move(margin));
    Tensor logits = ops::affine(ops::sub(relaxed, margin_t), cfg.sigma);
    return ops::cross_entropy(logits, labels);
  }

  // d = ||x - c||^2 on normalized vectors = 2 - 2 cos.
  Tensor dist = ops::affine(cos, -2.0, 2.0);
  Tensor numer_terms = ops::exp_t(ops::affine(dist, -cfg.sigma, cfg.sigma * cfg.delta_margin));
  Tensor numer = ops::affine(ops::sum_axis(numer_terms, 1), 1.0, 1.0);  // (B,)

  std::vector<double> other_class(static_cast<std::size_t>(b * ck), 1.0);
  for (std::size_t i = 0; i < labels.size(); ++i)
    for (std::int64_t c = 0; c < k; ++c)
      other_class[i * static_cast<std::size_t>(ck) +
                  static_cast<std::size_t>(labels[i] * k + c)] = 0.0;
  Tensor other_mask = Tensor::from_data({b, ck}, std::move(other_class));
  Tensor denom_terms = ops::mul(ops::exp_t(ops::affine(dist, -cfg.sigma)), other_mask);
  Tensor denom = ops::affine(ops::sum_axis(denom_terms, 1), 1.0, std::exp(cfg.lambda_sep));

  Tensor per_sample = ops::sub(ops::log_t(numer), ops::log_t(denom));
  return ops::reduce_mean(per_sample);
}

/// Stabilized softmax cross-entropy on raw logits.
inline Tensor cross_entropy_loss(const Tensor& logits, const std::vector<int>& labels) {
  return ops::cross_entropy(logits, labels);
}

namespace detail {

/// Batch-hard triplet loss on L2-normalized embeddings with hand-written
/// backward; selection happens on the forward values.
inline Tensor batch_hard_triplet(const Tensor& normalized, const std::vector<int>& labels,
                                 double margin) {
  const std::int64_t b = normalized.shape()[0];
  const std::int64_t d = normalized.shape()[1];
  const auto& e = normalized.values();

  auto dist = [&](std::int64_t i, std::int64_t j) {
    double acc = 0.0;
    for (std::int64_t c = 0; c < d; ++c) {
      const double diff = e[static_cast<std::size_t>(i * d + c)] -
                          e[static_cast<std::size_t>(j * d + c)];
      acc += diff * diff;
    }
    return std::sqrt(acc);
  };

  struct Selection {
    std::int64_t anchor, pos, neg;
    double d_pos, d_neg;
  };
  auto selections = std::make_shared<std::vector<Selection>>();
  for (std::int64_t i = 0; i < b; ++i) {
    std::int64_t hardest_pos = -1, hardest_neg = -1;
    double max_pos = -1.0, min_neg = 0.0;
    for (std::int64_t j = 0; j < b; ++j) {
      if (j == i) continue;
      const double dij = dist(i, j);
      if (labels[static_cast<std::size_t>(j)] == labels[static_cast<std::size_t>(i)]) {
        if (dij > max_pos) {
          max_pos = dij;
          hardest_pos = j;
        }
      } else if (hardest_neg < 0 || dij < min_neg) {
        min_neg = dij;
        hardest_neg = j;
      }
    }
    if (hardest_pos >= 0 && hardest_neg >= 0)
      selections->push_back({i, hardest_pos, hardest_neg, max_pos, min_neg});
  }

  Tensor out = ops::make_result({1}, {normalized.node()});
  if (selections->empty()) {
    warn("triplet_loss: batch contains no (anchor, positive, negative) triple");
    out.values_mut()[0] = 0.0;
    return out;
  }

  double loss = 0.0;
  for (const auto& sel : *selections) loss += std::max(0.0, sel.d_pos - sel.d_neg + margin);
  loss /= static_cast<double>(selections->size());
  out.values_mut()[0] = loss;

  if (out.requires_grad()) {
    auto x_node = normalized.node();
    out.node()->backprop = [x_node, selections, margin, d](TensorNode& self) {
      const double g = self.grad[0] / static_cast<double>(selections->size());
      for (const auto& sel : *selections) {
        if (sel.d_pos - sel.d_neg + margin <= 0.0) continue;
        // d||a-b|| / da = (a-b)/||a-b||; zero subgradient at coincident points.
        auto accumulate = [&](std::int64_t a_i, std::int64_t b_i, double dist_ab, double sign) {
          if (dist_ab < 1e-12) return;
          for (std::int64_t c = 0; c < d; ++c) {
            const double diff = (x_node->value[static_cast<std::size_t>(a_i * d + c)] -
                                 x_node->value[static_cast<std::size_t>(b_i * d + c)]) /
                                dist_ab;
            x_node->grad[static_cast<std::size_t>(a_i * d + c)] += sign * g * diff;
            x_node->grad[static_cast<std::size_t>(b_i * d + c)] -= sign * g * diff;
          }
        };
        accumulate(sel.anchor, sel.pos, sel.d_pos, 1.0);
        accumulate(sel.anchor, sel.neg, sel.d_neg, -1.0);
      }
    };
  }
  return out;
}

}  // namespace detail

/// Batch-hard triplet loss (hardest positive, hardest negative per anchor
/// by Euclidean distance on L2-normalized embeddings).
inline Tensor triplet_loss(const Tensor& embeddings, const std::vector<int>& labels,
                           double margin = 0.3) {
  if (embeddings.rank() != 2) throw ShapeError("triplet_loss: embeddings must be 2D");
  if (static_cast<std::int64_t>(labels.size()) != embeddings.shape()[0])
    throw ShapeError("triplet_loss: label count mismatch");
  return detail::batch_hard_triplet(ops::l2_normalize(embeddings), labels, margin);
}

/// w_cls * classification + w_metric * metric objective.
inline Tensor combined_objective(const Tensor& cls_loss, const Tensor& metric_loss, double w_cls,
                                 double w_metric) {
  if (w_cls < 0.0 || w_metric < 0.0) throw ConfigError("objective weights must be nonnegative");
  return ops::add(ops::affine(cls_loss, w_cls), ops::affine(metric_loss, w_metric));
}

}  // namespace csireid
