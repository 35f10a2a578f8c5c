#pragma once

// Synthetic Gaussian-blob corpora, query/database/labelled splits and the
// label-firewalled view the trainer consumes.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "pts3h/binary_io.hpp"
#include "pts3h/matrix.hpp"

namespace pts3h {

enum class Role : std::uint8_t {
  kTrainLabeled = 0,
  kTrainUnlabeled = 1,
  kQuery = 2,
  kDatabase = 3,  // retrieval-only, never seen during training
};

struct GeneratorInfo {
  std::uint64_t seed = 0;
  std::size_t per_class = 0;
  double spread = 0.0;
};

struct Dataset {
  Matrix features;
  std::vector<std::int32_t> labels;
  std::vector<Role> roles;
  std::size_t num_classes = 0;
  GeneratorInfo generator;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return features.cols(); }

  std::vector<std::size_t> indices_with(Role role) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < roles.size(); ++i) {
      if (roles[i] == role) out.push_back(i);
    }
    return out;
  }

  // Retrieval database: every item that is not a query.
  std::vector<std::size_t> database_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < roles.size(); ++i) {
      if (roles[i] != Role::kQuery) out.push_back(i);
    }
    return out;
  }

  std::vector<std::int32_t> labels_of(const std::vector<std::size_t>& idx) const {
    std::vector<std::int32_t> out;
    out.reserve(idx.size());
    for (std::size_t i : idx) out.push_back(labels[i]);
    return out;
  }
};

// Class centres uniform on the unit sphere, points N(centre, spread^2 I).
// Items are stored class-major; every item starts with the database role.
inline Dataset generate_blobs(std::size_t classes, std::size_t per_class, std::size_t dim,
                              double spread, std::uint64_t seed) {
  if (classes < 2) throw std::invalid_argument("generate_blobs: need at least 2 classes");
  if (per_class < 10) throw std::invalid_argument("generate_blobs: need at least 10 items per class");
  if (dim == 0) throw std::invalid_argument("generate_blobs: dimension must be >= 1");
  if (!(spread >= 0.0)) throw std::invalid_argument("generate_blobs: spread must be >= 0");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix centers(classes, dim);
  for (std::size_t c = 0; c < classes; ++c) {
    auto row = centers.row(c);
    double norm = 0.0;
    while (norm < 1e-9) {
      for (double& v : row) v = normal(rng);
      norm = std::sqrt(dot(row, row));
    }
    for (double& v : row) v /= norm;
  }
  Dataset ds;
  ds.num_classes = classes;
  ds.generator = {seed, per_class, spread};
  ds.features = Matrix(classes * per_class, dim);
  ds.labels.resize(classes * per_class);
  ds.roles.assign(classes * per_class, Role::kDatabase);
  for (std::size_t c = 0; c < classes; ++c) {
    auto center = centers.row(c);
    for (std::size_t p = 0; p < per_class; ++p) {
      const std::size_t i = c * per_class + p;
      ds.labels[i] = static_cast<std::int32_t>(c);
      auto row = ds.features.row(i);
      for (std::size_t k = 0; k < dim; ++k) row[k] = center[k] + spread * normal(rng);
    }
  }
  return ds;
}

struct SplitOptions {
  double labeled_fraction = 0.1;
  std::size_t queries_per_class = 50;
  // Fraction of each class's non-query items used as the training pool.
  double train_fraction = 1.0;
  std::uint64_t seed = 0;
};

// Per class: `queries_per_class` queries, the rest is the database; the
// training pool is drawn from the database and `labeled_fraction` of it is
// labelled, the remainder unlabelled.
inline Dataset split(Dataset ds, const SplitOptions& opts) {
  if (!(opts.labeled_fraction > 0.0 && opts.labeled_fraction <= 1.0)) {
    throw std::invalid_argument("split: labeled_fraction must be in (0, 1]");
  }
  if (!(opts.train_fraction > 0.0 && opts.train_fraction <= 1.0)) {
    throw std::invalid_argument("split: train_fraction must be in (0, 1]");
  }
  if (opts.queries_per_class == 0) throw std::invalid_argument("split: need at least one query per class");
  std::map<std::int32_t, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[ds.labels[i]].push_back(i);
  std::mt19937_64 rng(opts.seed);
  for (auto& [label, items] : by_class) {
    if (items.size() <= opts.queries_per_class) {
      throw std::invalid_argument("split: class " + std::to_string(label) +
                                  " has too few items for the query count");
    }
    std::shuffle(items.begin(), items.end(), rng);
    const std::size_t rest = items.size() - opts.queries_per_class;
    const auto pool = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::llround(opts.train_fraction * static_cast<double>(rest))));
    const auto labeled = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::llround(opts.labeled_fraction * static_cast<double>(pool))));
    for (std::size_t p = 0; p < items.size(); ++p) {
      Role role = Role::kDatabase;
      if (p < opts.queries_per_class) {
        role = Role::kQuery;
      } else if (p < opts.queries_per_class + labeled) {
        role = Role::kTrainLabeled;
      } else if (p < opts.queries_per_class + pool) {
        role = Role::kTrainUnlabeled;
      }
      ds.roles[items[p]] = role;
    }
  }
  ds.num_classes = by_class.size();
  return ds;
}

inline int pair_label(std::int32_t a, std::int32_t b) { return a == b ? 1 : 0; }

// Multi-label rule: similar when the tag sets share at least one tag.
inline int pair_label(const std::set<std::int32_t>& a, const std::set<std::int32_t>& b) {
  for (std::int32_t t : a) {
    if (b.count(t) != 0) return 1;
  }
  return 0;
}

// Fraction of similar ordered pairs (i != j) among `labels`:
// sum_c n_c (n_c - 1) / (n (n - 1)).
inline double similar_pair_fraction(const std::vector<std::int32_t>& labels) {
  if (labels.size() < 2) return 0.0;
  std::map<std::int32_t, std::size_t> counts;
  for (std::int32_t l : labels) ++counts[l];
  double similar = 0.0;
  for (const auto& [label, n] : counts) similar += static_cast<double>(n) * static_cast<double>(n - 1);
  const double n = static_cast<double>(labels.size());
  return similar / (n * (n - 1.0));
}

// What the trainer may see: features of the training pool and labels of the
// labelled part only. Labels of unlabelled items are never copied in.
class TrainingView {
 public:
  static TrainingView from(const Dataset& ds) {
    TrainingView view;
    const auto labeled = ds.indices_with(Role::kTrainLabeled);
    const auto unlabeled = ds.indices_with(Role::kTrainUnlabeled);
    std::vector<std::size_t> order(labeled);
    order.insert(order.end(), unlabeled.begin(), unlabeled.end());
    view.features_ = gather_rows(ds.features, order);
    view.labels_ = ds.labels_of(labeled);
    view.num_unlabeled_ = unlabeled.size();
    return view;
  }

  // Keeps only the listed labelled items (positions in [0, num_labeled())) and all unlabelled ones.
  TrainingView with_labeled_subset(const std::vector<std::size_t>& keep) const {
    TrainingView view;
    std::vector<std::size_t> order(keep);
    for (std::size_t j = 0; j < num_unlabeled_; ++j) order.push_back(labels_.size() + j);
    view.features_ = gather_rows(features_, order);
    for (std::size_t i : keep) view.labels_.push_back(labels_.at(i));
    view.num_unlabeled_ = num_unlabeled_;
    return view;
  }

  std::size_t num_labeled() const { return labels_.size(); }
  std::size_t num_unlabeled() const { return num_unlabeled_; }
  std::size_t size() const { return features_.rows(); }
  std::size_t dim() const { return features_.cols(); }

  // Rows [0, num_labeled) are labelled, the rest unlabelled.
  const Matrix& features() const { return features_; }
  std::int32_t label(std::size_t labeled_index) const { return labels_.at(labeled_index); }
  const std::vector<std::int32_t>& labels() const { return labels_; }

  std::vector<double> feature_std() const {
    std::vector<double> mean(dim(), 0.0);
    std::vector<double> var(dim(), 0.0);
    const double n = static_cast<double>(size());
    if (size() == 0) return var;
    for (std::size_t i = 0; i < size(); ++i) {
      auto r = features_.row(i);
      for (std::size_t k = 0; k < dim(); ++k) mean[k] += r[k];
    }
    for (double& m : mean) m /= n;
    for (std::size_t i = 0; i < size(); ++i) {
      auto r = features_.row(i);
      for (std::size_t k = 0; k < dim(); ++k) var[k] += (r[k] - mean[k]) * (r[k] - mean[k]);
    }
    for (double& v : var) v = std::sqrt(v / n);
    return var;
  }

 private:
  Matrix features_;
  std::vector<std::int32_t> labels_;
  std::size_t num_unlabeled_ = 0;
};

// ---------------------------------------------------------------------------
// Dataset file: "PTSD", version, n, d, class count (u32 LE), f32 features
// row-major, i32 labels, one role byte per item.

inline constexpr std::uint32_t kDatasetVersion = 1;

inline void write_dataset(std::ostream& out, const Dataset& ds) {
  io::write_magic(out, "PTSD");
  io::write_u32(out, kDatasetVersion);
  io::write_u32(out, static_cast<std::uint32_t>(ds.size()));
  io::write_u32(out, static_cast<std::uint32_t>(ds.dim()));
  io::write_u32(out, static_cast<std::uint32_t>(ds.num_classes));
  for (double v : ds.features.values()) io::write_f32(out, v);
  for (std::int32_t l : ds.labels) io::write_i32(out, l);
  for (Role r : ds.roles) out.put(static_cast<char>(r));
}

inline Dataset read_dataset(std::istream& in) {
  io::expect_magic(in, "PTSD");
  io::expect_version(in, kDatasetVersion);
  const std::uint32_t n = io::read_u32(in);
  const std::uint32_t d = io::read_u32(in);
  Dataset ds;
  ds.num_classes = io::read_u32(in);
  ds.features = Matrix(n, d);
  for (double& v : ds.features.values()) v = io::read_f32(in);
  ds.labels.resize(n);
  for (auto& l : ds.labels) l = io::read_i32(in);
  ds.roles.resize(n);
  for (auto& r : ds.roles) {
    const int byte = in.get();
    if (byte == std::char_traits<char>::eof()) throw io::FormatError("dataset: truncated role bytes");
    if (byte > static_cast<int>(Role::kDatabase)) throw io::FormatError("dataset: invalid role byte");
    r = static_cast<Role>(byte);
  }
  return ds;
}

inline void save_dataset(const std::string& path, const Dataset& ds) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  write_dataset(out, ds);
}

inline Dataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return read_dataset(in);
}

// CSV with a header row, d feature columns and the integer label last.
inline Dataset read_csv_dataset(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw io::FormatError("csv: missing header");
  const std::size_t columns = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) + 1;
  if (columns < 2) throw io::FormatError("csv: need at least one feature column and a label");
  std::vector<double> values;
  std::vector<std::int32_t> labels;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    std::stringstream ss(line);
    std::string cell;
    std::size_t col = 0;
    while (std::getline(ss, cell, ',')) {
      try {
        if (col + 1 < columns) {
          values.push_back(std::stod(cell));
        } else {
          labels.push_back(static_cast<std::int32_t>(std::stol(cell)));
        }
      } catch (const std::exception&) {
        throw io::FormatError("csv: bad value '" + cell + "' on line " + std::to_string(line_no));
      }
      ++col;
    }
    if (col != columns) throw io::FormatError("csv: wrong column count on line " + std::to_string(line_no));
  }
  Dataset ds;
  ds.features = Matrix(labels.size(), columns - 1, std::move(values));
  ds.labels = std::move(labels);
  ds.roles.assign(ds.labels.size(), Role::kDatabase);
  ds.num_classes = std::set<std::int32_t>(ds.labels.begin(), ds.labels.end()).size();
  return ds;
}

inline Dataset load_csv_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  return read_csv_dataset(in);
}

}  // namespace pts3h
