// Copyright 2026 The flythinker Authors.
// SPDX-License-Identifier: Apache-2.0

#include "flythinker/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "flythinker/errors.hpp"
#include "flythinker/io.hpp"

namespace flythinker {

namespace {

void require_reference(std::span<const TokenId> reference, const char* metric) {
  if (reference.empty()) throw MetricError(std::string(metric) + ": empty reference");
}

double f1(double overlap, std::size_t c, std::size_t r) {
  if (overlap <= 0 || c == 0) return 0.0;
  const double p = overlap / static_cast<double>(c), rec = overlap / static_cast<double>(r);
  return 2 * p * rec / (p + rec);
}

using Gram = std::vector<TokenId>;

std::map<Gram, std::size_t> ngram_counts(std::span<const TokenId> s, std::size_t n) {
  std::map<Gram, std::size_t> out;
  for (std::size_t i = 0; i + n <= s.size(); ++i) ++out[Gram(s.begin() + i, s.begin() + i + n)];
  return out;
}

}  // namespace

double rouge1(std::span<const TokenId> candidate, std::span<const TokenId> reference) {
  require_reference(reference, "rouge1");
  const auto c = ngram_counts(candidate, 1), r = ngram_counts(reference, 1);
  std::size_t overlap = 0;
  for (const auto& [g, n] : c) {
    if (auto it = r.find(g); it != r.end()) overlap += std::min(n, it->second);
  }
  return f1(static_cast<double>(overlap), candidate.size(), reference.size());
}

std::size_t lcs_length(std::span<const TokenId> a, std::span<const TokenId> b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rougeL(std::span<const TokenId> candidate, std::span<const TokenId> reference) {
  require_reference(reference, "rougeL");
  return f1(static_cast<double>(lcs_length(candidate, reference)), candidate.size(), reference.size());
}

double bleu(std::span<const TokenId> candidate, std::span<const TokenId> reference, std::size_t max_n) {
  require_reference(reference, "bleu");
  if (candidate.empty()) throw MetricError("bleu: empty candidate");
  if (max_n < 1) throw MetricError("bleu: max_n must be >= 1");
  double log_sum = 0;
  for (std::size_t n = 1; n <= max_n; ++n) {
    const auto c = ngram_counts(candidate, n), r = ngram_counts(reference, n);
    const std::size_t total = candidate.size() >= n ? candidate.size() - n + 1 : 0;
    std::size_t matched = 0;
    for (const auto& [g, k] : c) {
      if (auto it = r.find(g); it != r.end()) matched += std::min(k, it->second);
    }
    const double p = matched > 0 ? static_cast<double>(matched) / static_cast<double>(total)
                                 : 1.0 / static_cast<double>(total + 1);
    log_sum += std::log(p);
  }
  const double c = static_cast<double>(candidate.size()), r = static_cast<double>(reference.size());
  const double bp = c < r ? std::exp(1.0 - r / c) : 1.0;
  return bp * std::exp(log_sum / static_cast<double>(max_n));
}

MetricScores score_pair(std::span<const TokenId> candidate, std::span<const TokenId> reference) {
  MetricScores s;
  s.rouge1 = rouge1(candidate, reference);
  s.rougeL = rougeL(candidate, reference);
  s.bleu = candidate.empty() ? 0.0 : bleu(candidate, reference);
  return s;
}

std::pair<std::size_t, std::size_t> segment_bounds(std::size_t n, std::size_t k, std::size_t i) {
  const std::size_t w = n / k;
  const std::size_t begin = i * w;
  return {begin, i + 1 == k ? n : begin + w};
}

SegmentedScores segment_eval(const std::vector<std::pair<Tokens, Tokens>>& pairs, std::size_t k) {
  if (k < 1) throw MetricError("segment_eval: k must be >= 1");
  if (pairs.empty()) throw MetricError("segment_eval: no pairs");
  SegmentedScores out;
  out.segments.assign(k, MetricScores{});
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    const auto& [cand, ref] = pairs[p];
    require_reference(ref, "segment_eval");
    const MetricScores whole = score_pair(cand, ref);
    out.overall.rouge1 += whole.rouge1;
    out.overall.rougeL += whole.rougeL;
    out.overall.bleu += whole.bleu;
    if (ref.size() < k) {
      out.warnings.push_back("pair " + std::to_string(p) + ": reference of " + std::to_string(ref.size()) +
                             " tokens is shorter than " + std::to_string(k) + " segments");
    }
    for (std::size_t i = 0; i < k; ++i) {
      const auto [b, e] = segment_bounds(ref.size(), k, i);
      const std::span<const TokenId> rs(ref.data() + b, e - b);
      const std::size_t cb = std::min(b, cand.size());
      const std::size_t ce = i + 1 == k ? cand.size() : std::min(e, cand.size());
      const std::span<const TokenId> cs(cand.data() + cb, ce - cb);
      MetricScores s;
      if (rs.empty()) {
        const double v = cs.empty() ? 1.0 : 0.0;
        s = {v, v, v};
        out.warnings.push_back("pair " + std::to_string(p) + " segment " + std::to_string(i + 1) +
                               ": empty reference bin");
      } else {
        s = score_pair(cs, rs);
      }
      out.segments[i].rouge1 += s.rouge1;
      out.segments[i].rougeL += s.rougeL;
      out.segments[i].bleu += s.bleu;
    }
  }
  const double n = static_cast<double>(pairs.size());
  auto avg = [n](MetricScores& m) {
    m.rouge1 /= n;
    m.rougeL /= n;
    m.bleu /= n;
  };
  avg(out.overall);
  for (auto& s : out.segments) avg(s);
  return out;
}

std::string segment_table_rows(const std::string& label, const SegmentedScores& s) {
  std::string out;
  auto row = [&](const std::string& seg, const MetricScores& m) {
    out += label + "," + seg + "," + format_double(m.rouge1) + "," + format_double(m.rougeL) + "," +
           format_double(m.bleu) + "\n";
  };
  for (std::size_t i = 0; i < s.segments.size(); ++i) row(std::to_string(i + 1), s.segments[i]);
  row("all", s.overall);
  return out;
}

}  // namespace flythinker
