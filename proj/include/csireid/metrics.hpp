#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "csireid/errors.hpp"
#include "csireid/log.hpp"

namespace csireid {

struct EmbeddedItem {
  std::string segment_id;
  std::string person_id;
  std::vector<double> embedding;
};

/// One ranked gallery for one query, ordered by descending cosine
/// similarity with ties broken by gallery segment id.
struct RankingResult {
  std::string query_id;
  std::string query_person;
  std::vector<std::string> gallery_ids;
  std::vector<int> relevance;  // 1 = same person
  std::vector<double> scores;
};

namespace detail {

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::sqrt(na) * std::sqrt(nb);
  if (denom < 1e-300) throw NormalizationError("cosine: zero-norm embedding");
  return dot / denom;
}

}  // namespace detail

inline std::vector<RankingResult> rank_gallery(const std::vector<EmbeddedItem>& queries,
                                               const std::vector<EmbeddedItem>& gallery) {
  if (gallery.empty()) throw EmptyGalleryError("rank_gallery: gallery is empty");
  std::vector<RankingResult> out;
  out.reserve(queries.size());
  for (const auto& q : queries) {
    std::vector<std::size_t> order(gallery.size());
    std::vector<double> scores(gallery.size());
    for (std::size_t g = 0; g < gallery.size(); ++g) {
      order[g] = g;
      scores[g] = detail::cosine(q.embedding, gallery[g].embedding);
    }
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      if (scores[a] != scores[b]) return scores[a] > scores[b];
      return gallery[a].segment_id < gallery[b].segment_id;
    });
    RankingResult r;
    r.query_id = q.segment_id;
    r.query_person = q.person_id;
    for (std::size_t g : order) {
      r.gallery_ids.push_back(gallery[g].segment_id);
      r.relevance.push_back(gallery[g].person_id == q.person_id ? 1 : 0);
      r.scores.push_back(scores[g]);
    }
    out.push_back(std::move(r));
  }
  return out;
}

/// AP = (1/|pos|) * sum over positive positions p of (positives in top p) / p.
/// Empty when the list has no positives.
inline std::optional<double> average_precision(const std::vector<int>& relevance) {
  int positives = 0;
  double acc = 0.0;
  for (std::size_t p = 0; p < relevance.size(); ++p) {
    if (relevance[p]) {
      ++positives;
      acc += static_cast<double>(positives) / static_cast<double>(p + 1);
    }
  }
  if (positives == 0) return std::nullopt;
  return acc / positives;
}

/// INP = |pos| / rank of the hardest (last) positive.
inline std::optional<double> inverse_negative_penalty(const std::vector<int>& relevance) {
  int positives = 0;
  std::size_t hardest_rank = 0;
  for (std::size_t p = 0; p < relevance.size(); ++p) {
    if (relevance[p]) {
      ++positives;
      hardest_rank = p + 1;
    }
  }
  if (positives == 0) return std::nullopt;
  return static_cast<double>(positives) / static_cast<double>(hardest_rank);
}

/// Fraction of queries with at least one positive in the top N.
inline double cmc_at(const std::vector<std::vector<int>>& relevance_lists, int n) {
  if (n < 1) throw ConfigError("cmc_at: N must be >= 1");
  if (relevance_lists.empty()) return 0.0;
  int hits = 0;
  for (const auto& rel : relevance_lists) {
    const std::size_t top = std::min<std::size_t>(rel.size(), static_cast<std::size_t>(n));
    for (std::size_t i = 0; i < top; ++i) {
      if (rel[i]) {
        ++hits;
        break;
      }
    }
  }
  return static_cast<double>(hits) / static_cast<double>(relevance_lists.size());
}

/// Exact AUC by rank statistics: P(pos > neg) + 0.5 * P(pos == neg).
inline double roc_auc(const std::vector<double>& positive_scores,
                      const std::vector<double>& negative_scores) {
  if (positive_scores.empty() || negative_scores.empty())
    throw InsufficientDataError("roc_auc: need at least one score on each side");
  struct Entry {
    double score;
    bool positive;
  };
  std::vector<Entry> all;
  all.reserve(positive_scores.size() + negative_scores.size());
  for (double s : positive_scores) all.push_back({s, true});
  for (double s : negative_scores) all.push_back({s, false});
  std::sort(all.begin(), all.end(), [](const Entry& a, const Entry& b) { return a.score < b.score; });

  // Rank sum for positives with average ranks over tied groups.
  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < all.size()) {
    std::size_t j = i;
    while (j < all.size() && all[j].score == all[i].score) ++j;
    const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t t = i; t < j; ++t)
      if (all[t].positive) rank_sum_pos += avg_rank;
    i = j;
  }
  const double np = static_cast<double>(positive_scores.size());
  const double nn = static_cast<double>(negative_scores.size());
  return (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn);
}

struct PerQueryRow {
  std::string query_id;
  std::string person_id;
  double ap = 0.0;
  double inp = 0.0;
  int first_hit_rank = 0;  // 0 when no positive exists
  bool skipped = false;
};

struct EvalReport {
  double map = 0.0;
  double minp = 0.0;
  double auc = 0.0;
  std::map<int, double> rank_at;
  int queries_skipped = 0;
  std::vector<PerQueryRow> per_query;
  nlohmann::json config_echo;

  nlohmann::json to_json() const {
    nlohmann::json ranks;
    for (const auto& [n, v] : rank_at) ranks["rank_" + std::to_string(n)] = v;
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : per_query)
      rows.push_back({{"query_id", r.query_id},
                      {"person_id", r.person_id},
                      {"ap", r.ap},
                      {"inp", r.inp},
                      {"first_hit_rank", r.first_hit_rank},
                      {"skipped", r.skipped}});
    return {{"mAP", map},
            {"mINP", minp},
            {"roc_auc", auc},
            {"rank_at", ranks},
            {"queries_skipped", queries_skipped},
            {"per_query", rows},
            {"config", config_echo}};
  }

  std::string per_query_tsv() const {
    std::string out = "query_id\tperson_id\tap\tinp\tfirst_hit_rank\tskipped\n";
    for (const auto& r : per_query) {
      out += r.query_id + "\t" + r.person_id + "\t" + std::to_string(r.ap) + "\t" +
             std::to_string(r.inp) + "\t" + std::to_string(r.first_hit_rank) + "\t" +
             (r.skipped ? "1" : "0") + "\n";
    }
    return out;
  }
};

/// Aggregates rankings into mAP/mINP/CMC/AUC. Queries without any gallery
/// positive are excluded from mAP and mINP and counted in queries_skipped.
inline EvalReport evaluate_rankings(const std::vector<RankingResult>& rankings,
                                    const std::vector<int>& cmc_ranks = {1, 3, 5}) {
  EvalReport report;
  std::vector<std::vector<int>> relevance_lists;
  std::vector<double> pos_scores, neg_scores;
  double ap_sum = 0.0, inp_sum = 0.0;
  int scored = 0;

  for (const auto& r : rankings) {
    relevance_lists.push_back(r.relevance);
    for (std::size_t i = 0; i < r.scores.size(); ++i)
      (r.relevance[i] ? pos_scores : neg_scores).push_back(r.scores[i]);

    PerQueryRow row;
    row.query_id = r.query_id;
    row.person_id = r.query_person;
    const auto ap = average_precision(r.relevance);
    const auto inp = inverse_negative_penalty(r.relevance);
    for (std::size_t i = 0; i < r.relevance.size(); ++i) {
      if (r.relevance[i]) {
        row.first_hit_rank = static_cast<int>(i + 1);
        break;
      }
    }
    if (ap && inp) {
      row.ap = *ap;
      row.inp = *inp;
      ap_sum += *ap;
      inp_sum += *inp;
      ++scored;
    } else {
      warn("query '" + r.query_id + "' has no gallery positives; excluded from mAP/mINP");
      row.skipped = true;
      ++report.queries_skipped;
    }
    report.per_query.push_back(std::move(row));
  }

  if (scored > 0) {
    report.map = ap_sum / scored;
    report.minp = inp_sum / scored;
  }
  for (int n : cmc_ranks) report.rank_at[n] = cmc_at(relevance_lists, n);
  if (!pos_scores.empty() && !neg_scores.empty()) report.auc = roc_auc(pos_scores, neg_scores);
  return report;
}

/// Mean of scalar metrics over rounds; per-query rows come from the first
/// round and queries_skipped is summed.
inline EvalReport average_reports(const std::vector<EvalReport>& reports) {
  if (reports.empty()) throw InsufficientDataError("average_reports: no reports");
  EvalReport avg = reports.front();
  if (reports.size() == 1) return avg;
  for (std::size_t i = 1; i < reports.size(); ++i) {
    avg.map += reports[i].map;
    avg.minp += reports[i].minp;
    avg.auc += reports[i].auc;
    avg.queries_skipped += reports[i].queries_skipped;
    for (const auto& [n, v] : reports[i].rank_at) avg.rank_at[n] += v;
  }
  const double inv = 1.0 / static_cast<double>(reports.size());
  avg.map *= inv;
  avg.minp *= inv;
  avg.auc *= inv;
  for (auto& [n, v] : avg.rank_at) v *= inv;
  return avg;
}

}  // namespace csireid
