// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <istream>
#include <limits>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "gerlab/errors.hpp"
#include "gerlab/routing.hpp"

namespace gerlab {

using WordSeq = std::vector<std::size_t>;

// Edit-distance word error rate. wer = (S + D + I) / reference length. An
// empty reference against a non-empty hypothesis has no finite rate and is
// flagged instead.
struct WerReport {
  std::size_t substitutions = 0;
  std::size_t deletions = 0;
  std::size_t insertions = 0;
  std::size_t reference_length = 0;
  double wer = 0.0;
  bool infinite = false;

  std::size_t errors() const { return substitutions + deletions + insertions; }

  void finalize() {
    if (reference_length == 0) {
      infinite = errors() > 0;
      wer = infinite ? std::numeric_limits<double>::infinity() : 0.0;
    } else {
      wer = static_cast<double>(errors()) /
            static_cast<double>(reference_length);
    }
  }

  WerReport& operator+=(const WerReport& other) {
    substitutions += other.substitutions;
    deletions += other.deletions;
    insertions += other.insertions;
    reference_length += other.reference_length;
    finalize();
    return *this;
  }
};

// Levenshtein alignment with unit costs. Backtrace prefers the diagonal
// (match/substitution) over a deletion+insertion pair on cost ties.
inline WerReport wer(std::span<const std::size_t> reference,
                     std::span<const std::size_t> hypothesis) {
  const std::size_t n = reference.size(), m = hypothesis.size();
  std::vector<std::size_t> dp((n + 1) * (m + 1));
  auto cost = [&](std::size_t i, std::size_t j) -> std::size_t& {
    return dp[i * (m + 1) + j];
  };
  for (std::size_t i = 0; i <= n; ++i) cost(i, 0) = i;
  for (std::size_t j = 0; j <= m; ++j) cost(0, j) = j;
  for (std::size_t i = 1; i <= n; ++i)
    for (std::size_t j = 1; j <= m; ++j) {
      const std::size_t sub =
          cost(i - 1, j - 1) + (reference[i - 1] == hypothesis[j - 1] ? 0 : 1);
      const std::size_t del = cost(i - 1, j) + 1;
      const std::size_t ins = cost(i, j - 1) + 1;
      cost(i, j) = std::min({sub, del, ins});
    }

  WerReport r;
  r.reference_length = n;
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 &&
        cost(i, j) == cost(i - 1, j - 1) +
                          (reference[i - 1] == hypothesis[j - 1] ? 0 : 1)) {
      if (reference[i - 1] != hypothesis[j - 1]) ++r.substitutions;
      --i;
      --j;
    } else if (i > 0 && cost(i, j) == cost(i - 1, j) + 1) {
      ++r.deletions;
      --i;
    } else {
      ++r.insertions;
      --j;
    }
  }
  r.finalize();
  return r;
}

inline WerReport wer_corpus(
    const std::vector<std::pair<WordSeq, WordSeq>>& pairs) {
  WerReport total;
  for (const auto& [ref, hyp] : pairs) total += wer(ref, hyp);
  total.finalize();
  return total;
}

// ---------------------------------------------------------------------------
// Evaluation grids (models x domains)
// ---------------------------------------------------------------------------

// The aggregate column follows the unweighted-average convention: mean of
// per-domain WERs, not pooled-token WER.
struct EvalGrid {
  std::vector<std::string> domains;
  struct Row {
    std::string model;
    std::vector<WerReport> per_domain;
    double average_wer = 0.0;
  };
  std::vector<Row> rows;

  void add_row(const std::string& model, std::vector<WerReport> reports) {
    if (reports.size() != domains.size())
      throw ConfigError("grid: row arity mismatch for " + model);
    Row row;
    row.model = model;
    row.per_domain = std::move(reports);
    double s = 0.0;
    for (const auto& r : row.per_domain) s += r.wer;
    row.average_wer = s / static_cast<double>(domains.size());
    rows.push_back(std::move(row));
  }

  const Row& find(const std::string& model) const {
    for (const auto& r : rows)
      if (r.model == model) return r;
    throw ConfigError("grid: no row named " + model);
  }
};

inline std::string grid_csv(const EvalGrid& grid) {
  std::ostringstream os;
  os << "model";
  for (const auto& d : grid.domains) os << "," << d;
  os << ",AVG\n";
  os.precision(6);
  os << std::fixed;
  for (const auto& row : grid.rows) {
    os << row.model;
    for (const auto& r : row.per_domain) os << "," << r.wer;
    os << "," << row.average_wer << "\n";
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Routing diagnostics reports
// ---------------------------------------------------------------------------

struct RoutingReport {
  struct SiteStats {
    std::size_t layer = 0;
    std::string site;
    std::size_t records = 0;
    double mean_selected = 0.0;      // avg #experts with P_a > 0
    std::vector<double> mean_usage;  // mean adapted weight per expert
    double usage_cv = 0.0;           // coefficient of variation of mean_usage
  };
  std::vector<SiteStats> sites;  // ordered by (layer, site)

  // Mean local weight vector per domain, averaged over records of all sites.
  std::vector<std::pair<std::string, std::vector<double>>> domain_mean_local;

  // Raw per-record local weight vectors for offline projection.
  std::vector<RoutingRecord> records;

  const std::vector<double>& mean_local(const std::string& domain) const {
    for (const auto& [d, v] : domain_mean_local)
      if (d == domain) return v;
    throw ReportError("routing report: no domain " + domain);
  }

  // L2 distance between two domains' mean local weight vectors.
  double local_weight_distance(const std::string& a,
                               const std::string& b) const {
    const auto& va = mean_local(a);
    const auto& vb = mean_local(b);
    double s = 0.0;
    for (std::size_t i = 0; i < va.size(); ++i)
      s += (va[i] - vb[i]) * (va[i] - vb[i]);
    return std::sqrt(s);
  }
};

inline RoutingReport routing_report(std::istream& dump) {
  RoutingReport rep;
  std::map<std::pair<std::size_t, std::string>, RoutingReport::SiteStats>
      sites;
  std::map<std::string, std::pair<std::vector<double>, std::size_t>> domains;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(dump, line)) {
    ++line_no;
    if (line.empty()) continue;
    RoutingRecord r;
    try {
      r = parse_routing_record(line);
    } catch (const ReportError&) {
      throw ReportError("routing report: malformed dump line " +
                        std::to_string(line_no));
    }
    auto& s = sites[{r.layer_index, r.site}];
    s.layer = r.layer_index;
    s.site = r.site;
    if (s.mean_usage.empty()) s.mean_usage.assign(r.p_adapted_mean.size(), 0.0);
    if (s.mean_usage.size() != r.p_adapted_mean.size())
      throw ReportError("routing report: arity change at dump line " +
                        std::to_string(line_no));
    ++s.records;
    s.mean_selected += r.mean_selected;
    for (std::size_t j = 0; j < r.p_adapted_mean.size(); ++j)
      s.mean_usage[j] += r.p_adapted_mean[j];

    auto& [vec, cnt] = domains[r.domain_tag];
    if (vec.empty()) vec.assign(r.p_local_mean.size(), 0.0);
    for (std::size_t j = 0; j < r.p_local_mean.size(); ++j)
      vec[j] += r.p_local_mean[j];
    ++cnt;

    rep.records.push_back(std::move(r));
  }
  for (auto& [key, s] : sites) {
    const double inv = 1.0 / static_cast<double>(s.records);
    s.mean_selected *= inv;
    double mean = 0.0;
    for (auto& u : s.mean_usage) {
      u *= inv;
      mean += u;
    }
    mean /= static_cast<double>(s.mean_usage.size());
    double var = 0.0;
    for (double u : s.mean_usage) var += (u - mean) * (u - mean);
    var /= static_cast<double>(s.mean_usage.size());
    s.usage_cv = mean > 0.0 ? std::sqrt(var) / mean : 0.0;
    rep.sites.push_back(s);
  }
  for (auto& [d, acc] : domains) {
    auto& [vec, cnt] = acc;
    for (auto& v : vec) v /= static_cast<double>(cnt);
    rep.domain_mean_local.emplace_back(d, vec);
  }
  return rep;
}

inline std::string selection_stats_csv(const RoutingReport& rep) {
  std::ostringstream os;
  os << "layer,site,mean_selected,usage_cv\n";
  for (const auto& s : rep.sites)
    os << s.layer << "," << s.site << "," << s.mean_selected << ","
       << s.usage_cv << "\n";
  return os.str();
}

inline std::string domain_local_csv(const RoutingReport& rep) {
  std::ostringstream os;
  os << "domain";
  if (!rep.domain_mean_local.empty())
    for (std::size_t j = 0; j < rep.domain_mean_local[0].second.size(); ++j)
      os << ",expert" << j;
  os << "\n";
  for (const auto& [d, v] : rep.domain_mean_local) {
    os << d;
    for (double x : v) os << "," << x;
    os << "\n";
  }
  return os.str();
}

// One line per record: the raw local weight vectors for offline projection.
inline std::string raw_local_weights_csv(const RoutingReport& rep) {
  std::ostringstream os;
  os << "utt,domain,layer,site";
  if (!rep.records.empty())
    for (std::size_t j = 0; j < rep.records[0].p_local_mean.size(); ++j)
      os << ",w" << j;
  os << "\n";
  for (const auto& r : rep.records) {
    os << r.utterance_id << "," << r.domain_tag << "," << r.layer_index << ","
       << r.site;
    for (double v : r.p_local_mean) os << "," << v;
    os << "\n";
  }
  return os.str();
}

}  // namespace gerlab
