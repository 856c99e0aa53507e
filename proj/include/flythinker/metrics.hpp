// Copyright 2026 The flythinker Authors.
// SPDX-License-Identifier: Apache-2.0

// Reference-based text metrics over token sequences.
//   rouge1: unigram F1 with clipped counts
//   rougeL: longest-common-subsequence F1
//   bleu:   BLEU-4, add-one smoothing of zero-match orders, brevity penalty

#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "flythinker/tensor.hpp"

namespace flythinker {

using Tokens = std::vector<TokenId>;

double rouge1(std::span<const TokenId> candidate, std::span<const TokenId> reference);
double rougeL(std::span<const TokenId> candidate, std::span<const TokenId> reference);
double bleu(std::span<const TokenId> candidate, std::span<const TokenId> reference, std::size_t max_n = 4);

std::size_t lcs_length(std::span<const TokenId> a, std::span<const TokenId> b);

struct MetricScores {
  double rouge1 = 0;
  double rougeL = 0;
  double bleu = 0;
};

MetricScores score_pair(std::span<const TokenId> candidate, std::span<const TokenId> reference);

struct SegmentedScores {
  std::vector<MetricScores> segments;  // k contiguous position bins
  MetricScores overall;
  std::vector<std::string> warnings;   // degenerate bins
};

// [begin, end) of bin `i` of `k` over a reference of length `n`; the last bin
// takes the remainder.
std::pair<std::size_t, std::size_t> segment_bounds(std::size_t n, std::size_t k, std::size_t i);

SegmentedScores segment_eval(const std::vector<std::pair<Tokens, Tokens>>& pairs, std::size_t k = 4);

inline constexpr const char* kSegmentCsvHeader = "model,segment,rouge1,rougeL,bleu";
// Rows "label,1..k,..." then "label,all,...".
std::string segment_table_rows(const std::string& label, const SegmentedScores& s);

}  // namespace flythinker
