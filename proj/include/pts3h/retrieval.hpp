#pragma once

// Bit-packed code store, popcount Hamming ranking and retrieval metrics.

#include <algorithm>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pts3h/binary_io.hpp"
#include "pts3h/encoder.hpp"

namespace pts3h {

// Codes packed little-endian: dimension k of an item lives in bit (k % 64) of
// word (k / 64); a set bit encodes +1. Padding bits are always zero.
class CodeSet {
 public:
  CodeSet() = default;
  explicit CodeSet(std::size_t bits) : bits_(bits), words_per_code_((bits + 63) / 64) {}

  std::size_t size() const { return ids_.size(); }
  std::size_t bits() const { return bits_; }
  std::size_t words_per_code() const { return words_per_code_; }

  std::span<const std::uint64_t> code(std::size_t i) const {
    return {words_.data() + i * words_per_code_, words_per_code_};
  }
  const std::vector<std::uint64_t>& words() const { return words_; }
  const std::vector<std::uint32_t>& ids() const { return ids_; }
  const std::optional<std::vector<std::int32_t>>& labels() const { return labels_; }

  void set_ids(std::vector<std::uint32_t> ids) {
    if (ids.size() != size()) throw std::invalid_argument("CodeSet: id count mismatch");
    ids_ = std::move(ids);
  }
  void set_labels(std::vector<std::int32_t> labels) {
    if (labels.size() != size()) throw std::invalid_argument("CodeSet: label count mismatch");
    labels_ = std::move(labels);
  }

  // Appends a packed code; rejects nonzero padding.
  void push_back(std::span<const std::uint64_t> code, std::uint32_t id) {
    if (code.size() != words_per_code_) throw std::invalid_argument("CodeSet: word count mismatch");
    if (bits_ % 64 != 0 && (code.back() >> (bits_ % 64)) != 0) {
      throw std::invalid_argument("CodeSet: padding bits must be zero");
    }
    words_.insert(words_.end(), code.begin(), code.end());
    ids_.push_back(id);
  }

 private:
  std::size_t bits_ = 0;
  std::size_t words_per_code_ = 0;
  std::vector<std::uint64_t> words_;
  std::vector<std::uint32_t> ids_;
  std::optional<std::vector<std::int32_t>> labels_;
};

// Ids default to 0..n-1.
inline CodeSet pack(const SignCodes& codes) {
  CodeSet set(codes.bits);
  std::vector<std::uint64_t> buffer(set.words_per_code());
  for (std::size_t i = 0; i < codes.count; ++i) {
    std::fill(buffer.begin(), buffer.end(), 0);
    auto row = codes.row(i);
    for (std::size_t k = 0; k < codes.bits; ++k) {
      if (row[k] == 1) {
        buffer[k / 64] |= std::uint64_t{1} << (k % 64);
      } else if (row[k] != -1) {
        throw std::invalid_argument("pack: code values must be +1 or -1");
      }
    }
    set.push_back(buffer, static_cast<std::uint32_t>(i));
  }
  return set;
}

inline SignCodes unpack(const CodeSet& set) {
  SignCodes codes{set.size(), set.bits(), {}};
  codes.values.reserve(set.size() * set.bits());
  for (std::size_t i = 0; i < set.size(); ++i) {
    auto words = set.code(i);
    for (std::size_t k = 0; k < set.bits(); ++k) {
      codes.values.push_back((words[k / 64] >> (k % 64)) & 1u ? std::int8_t{1} : std::int8_t{-1});
    }
  }
  return codes;
}

inline int hamming(std::span<const std::uint64_t> a, std::span<const std::uint64_t> b) {
  if (a.size() != b.size()) throw std::invalid_argument("hamming: code lengths differ");
  int d = 0;
  for (std::size_t w = 0; w < a.size(); ++w) d += std::popcount(a[w] ^ b[w]);
  return d;
}

namespace detail {

// Distances are bounded by the code length, so a counting sort is exact and stable.
inline std::vector<std::uint32_t> rank_by_distance(std::span<const std::uint64_t> query,
                                                   const CodeSet& db, std::vector<int>& dist) {
  if (query.size() != db.words_per_code()) throw std::invalid_argument("rank_database: code length mismatch");
  const std::size_t n = db.size();
  dist.assign(n, 0);
  std::vector<std::size_t> bucket(db.bits() + 2, 0);
  for (std::size_t i = 0; i < n; ++i) {
    dist[i] = hamming(query, db.code(i));
    ++bucket[static_cast<std::size_t>(dist[i]) + 1];
  }
  for (std::size_t d = 1; d < bucket.size(); ++d) bucket[d] += bucket[d - 1];
  std::vector<std::uint32_t> order(n);
  for (std::size_t i = 0; i < n; ++i) {
    order[bucket[static_cast<std::size_t>(dist[i])]++] = static_cast<std::uint32_t>(i);
  }
  return order;
}

}  // namespace detail

// Database indices by ascending Hamming distance, ties by ascending index.
inline std::vector<std::uint32_t> rank_database(std::span<const std::uint64_t> query,
                                                const CodeSet& db) {
  std::vector<int> dist;
  return detail::rank_by_distance(query, db, dist);
}

// AP@K = sum over relevant ranks k <= K of precision@k, divided by min(R, K),
// where R counts the relevant items in the whole ranked list. 0 when R = 0.
inline double average_precision(std::span<const std::uint8_t> ranked_relevance, std::size_t k) {
  if (k == 0) throw std::invalid_argument("average_precision: K must be >= 1");
  std::size_t total_relevant = 0;
  for (std::uint8_t r : ranked_relevance) total_relevant += r != 0 ? 1 : 0;
  if (total_relevant == 0) return 0.0;
  const std::size_t cutoff = std::min(k, ranked_relevance.size());
  double sum = 0.0;
  std::size_t hits = 0;
  for (std::size_t pos = 0; pos < cutoff; ++pos) {
    if (ranked_relevance[pos] != 0) {
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(pos + 1);
    }
  }
  return sum / static_cast<double>(std::min(total_relevant, k));
}

struct QueryDiagnostics {
  std::uint32_t id = 0;
  double average_precision = 0.0;
  std::size_t radius_retrieved = 0;
  std::size_t radius_relevant = 0;

  friend bool operator==(const QueryDiagnostics&, const QueryDiagnostics&) = default;
};

struct MetricsReport {
  double map_at_k = 0.0;
  double precision_hamming2 = 0.0;
  std::vector<std::pair<std::size_t, double>> topk_curve;
  std::vector<QueryDiagnostics> per_query;

  friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

struct EvalOptions {
  std::size_t map_k = 0;  // 0 means the whole database
  std::vector<std::size_t> topk{1, 10, 50, 100, 500, 1000};
  int radius = 2;
  bool exclude_same_id = true;
};

inline MetricsReport evaluate(const CodeSet& queries, const CodeSet& db, const EvalOptions& opts = {}) {
  if (!queries.labels() || !db.labels()) throw std::invalid_argument("evaluate: labels are required");
  if (queries.bits() != db.bits()) throw std::invalid_argument("evaluate: code lengths differ");
  std::vector<std::size_t> topk = opts.topk;
  std::sort(topk.begin(), topk.end());
  topk.erase(std::unique(topk.begin(), topk.end()), topk.end());
  topk.erase(std::remove(topk.begin(), topk.end(), std::size_t{0}), topk.end());

  const auto& qlabels = *queries.labels();
  const auto& dlabels = *db.labels();
  MetricsReport report;
  std::vector<double> topk_sum(topk.size(), 0.0);
  std::vector<std::uint8_t> relevance;
  std::vector<int> dist;
  for (std::size_t q = 0; q < queries.size(); ++q) {
    auto qcode = queries.code(q);
    const std::vector<std::uint32_t> order = detail::rank_by_distance(qcode, db, dist);
    relevance.clear();
    QueryDiagnostics diag{queries.ids()[q], 0.0, 0, 0};
    for (std::uint32_t idx : order) {
      if (opts.exclude_same_id && db.ids()[idx] == queries.ids()[q]) continue;
      const std::uint8_t rel = dlabels[idx] == qlabels[q] ? 1 : 0;
      relevance.push_back(rel);
      if (dist[idx] <= opts.radius) {
        ++diag.radius_retrieved;
        diag.radius_relevant += rel;
      }
    }
    const std::size_t k = opts.map_k == 0 ? std::max<std::size_t>(relevance.size(), 1) : opts.map_k;
    diag.average_precision = average_precision(relevance, k);
    report.map_at_k += diag.average_precision;
    if (diag.radius_retrieved > 0) {
      report.precision_hamming2 +=
          static_cast<double>(diag.radius_relevant) / static_cast<double>(diag.radius_retrieved);
    }
    for (std::size_t t = 0; t < topk.size(); ++t) {
      const std::size_t cutoff = std::min(topk[t], relevance.size());
      std::size_t hits = 0;
      for (std::size_t pos = 0; pos < cutoff; ++pos) hits += relevance[pos];
      topk_sum[t] += static_cast<double>(hits) / static_cast<double>(topk[t]);
    }
    report.per_query.push_back(diag);
  }
  if (queries.size() > 0) {
    const double nq = static_cast<double>(queries.size());
    report.map_at_k /= nq;
    report.precision_hamming2 /= nq;
    for (std::size_t t = 0; t < topk.size(); ++t) report.topk_curve.emplace_back(topk[t], topk_sum[t] / nq);
  } else {
    for (std::size_t k : topk) report.topk_curve.emplace_back(k, 0.0);
  }
  return report;
}

inline nlohmann::json to_json(const MetricsReport& report, bool with_per_query = false) {
  nlohmann::json j;
  j["map_at_k"] = report.map_at_k;
  j["precision_hamming2"] = report.precision_hamming2;
  nlohmann::json curve = nlohmann::json::array();
  for (const auto& [k, p] : report.topk_curve) curve.push_back({{"k", k}, {"precision", p}});
  j["topk_curve"] = curve;
  if (with_per_query) {
    nlohmann::json per = nlohmann::json::array();
    for (const auto& d : report.per_query) {
      per.push_back({{"id", d.id},
                     {"ap", d.average_precision},
                     {"radius_retrieved", d.radius_retrieved},
                     {"radius_relevant", d.radius_relevant}});
    }
    j["per_query"] = per;
  }
  return j;
}

// ---------------------------------------------------------------------------
// Code file: "PTSC", version, n, b (u32 LE), packed u64 LE words, then
// optionally n i32 LE labels. Ids are positional.

inline constexpr std::uint32_t kCodeFileVersion = 1;

inline void write_codes(std::ostream& out, const CodeSet& set) {
  io::write_magic(out, "PTSC");
  io::write_u32(out, kCodeFileVersion);
  io::write_u32(out, static_cast<std::uint32_t>(set.size()));
  io::write_u32(out, static_cast<std::uint32_t>(set.bits()));
  for (std::uint64_t w : set.words()) io::write_le(out, w);
  if (set.labels()) {
    for (std::int32_t l : *set.labels()) io::write_i32(out, l);
  }
}

inline CodeSet read_codes(std::istream& in) {
  io::expect_magic(in, "PTSC");
  io::expect_version(in, kCodeFileVersion);
  const std::uint32_t n = io::read_u32(in);
  const std::uint32_t bits = io::read_u32(in);
  if (bits == 0) throw io::FormatError("code file: zero code length");
  CodeSet set(bits);
  std::vector<std::uint64_t> buffer(set.words_per_code());
  for (std::uint32_t i = 0; i < n; ++i) {
    for (auto& w : buffer) w = io::read_le<std::uint64_t>(in);
    set.push_back(buffer, i);
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    std::vector<std::int32_t> labels(n);
    for (auto& l : labels) l = io::read_i32(in);
    set.set_labels(std::move(labels));
  }
  return set;
}

inline void save_codes(const std::string& path, const CodeSet& set) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  write_codes(out, set);
}

inline CodeSet load_codes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return read_codes(in);
}

}  // namespace pts3h
