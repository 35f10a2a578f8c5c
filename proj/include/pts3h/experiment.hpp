#pragma once

// Experiment runner: named method variants, flat key=value configuration,
// content-addressed run records, summaries with baseline gains, and curve export.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <tuple>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "pts3h/data.hpp"
#include "pts3h/retrieval.hpp"
#include "pts3h/trainer.hpp"

namespace pts3h {

enum class Variant { kBaselineDsh, kBaselineDpsh, kPts3hDsh, kPts3hDpsh, kPts3hP, kPts3hQ };
enum class CodeSource { kTeacher, kStudent };

inline constexpr std::array<Variant, 6> kAllVariants{Variant::kBaselineDsh, Variant::kBaselineDpsh,
                                                     Variant::kPts3hDsh,    Variant::kPts3hDpsh,
                                                     Variant::kPts3hP,      Variant::kPts3hQ};

inline std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::kBaselineDsh: return "baseline-DSH";
    case Variant::kBaselineDpsh: return "baseline-DPSH";
    case Variant::kPts3hDsh: return "PTS3H-DSH";
    case Variant::kPts3hDpsh: return "PTS3H-DPSH";
    case Variant::kPts3hP: return "PTS3H-P";
    case Variant::kPts3hQ: return "PTS3H-Q";
  }
  return "?";
}

inline Variant parse_variant(std::string_view name) {
  for (Variant v : kAllVariants) {
    if (to_string(v) == name) return v;
  }
  throw std::invalid_argument("unknown variant: " + std::string(name));
}

inline bool is_baseline(Variant v) { return v == Variant::kBaselineDsh || v == Variant::kBaselineDpsh; }

inline std::string_view to_string(CodeSource s) { return s == CodeSource::kTeacher ? "teacher" : "student"; }

inline CodeSource parse_code_source(std::string_view name) {
  if (name == "teacher") return CodeSource::kTeacher;
  if (name == "student") return CodeSource::kStudent;
  throw std::invalid_argument("unknown code source: " + std::string(name));
}

// Forces the loss weights a variant is defined by. Applied last, so the forced
// values win over any configuration.
inline TrainConfig apply_variant(TrainConfig cfg, Variant v) {
  switch (v) {
    case Variant::kBaselineDsh:
      cfg.hp.kind = PairLossKind::kDsh;
      cfg.hp.omega = 0.0;
      break;
    case Variant::kBaselineDpsh:
      cfg.hp.kind = PairLossKind::kDpsh;
      cfg.hp.omega = 0.0;
      break;
    case Variant::kPts3hDsh: cfg.hp.kind = PairLossKind::kDsh; break;
    case Variant::kPts3hDpsh: cfg.hp.kind = PairLossKind::kDpsh; break;
    case Variant::kPts3hP: cfg.hp.gamma = 0.0; break;
    case Variant::kPts3hQ: cfg.hp.consistency = false; break;
  }
  return cfg;
}

// Supervised reference for gain computation.
inline Variant baseline_for(Variant v, PairLossKind kind) {
  switch (v) {
    case Variant::kPts3hDsh: return Variant::kBaselineDsh;
    case Variant::kPts3hDpsh: return Variant::kBaselineDpsh;
    default: return kind == PairLossKind::kDpsh ? Variant::kBaselineDpsh : Variant::kBaselineDsh;
  }
}

struct DataSource {
  std::string path;  // .ptsd or .csv; empty generates blobs
  std::size_t classes = 10;
  std::size_t per_class = 600;
  std::size_t dim = 32;
  double spread = 0.3;
  std::uint64_t seed = 0;
  double labeled_fraction = 0.1;
  std::size_t queries_per_class = 50;
  double train_fraction = 1.0;
};

struct ExperimentSpec {
  DataSource data;
  TrainConfig train;
  std::vector<Variant> variants{Variant::kPts3hDsh};
  std::vector<std::uint64_t> seeds{1};
  std::vector<CodeSource> code_sources{CodeSource::kTeacher};
  std::string sweep_param;
  std::vector<std::string> sweep_values;
  EvalOptions eval;
  std::string out_dir = "pts3h_out";
  std::map<Variant, std::vector<std::pair<std::string, std::string>>> overrides;
};

inline ExperimentSpec default_spec() {
  ExperimentSpec spec;
  // The consistency-only ablation was tuned separately on validation MAP.
  spec.overrides[Variant::kPts3hP] = {{"omega", "32"}};
  return spec;
}

namespace detail {

inline std::vector<std::string> split_list(const std::string& text, char sep = ',') {
  std::vector<std::string> out;
  std::string item;
  std::stringstream ss(text);
  while (std::getline(ss, item, sep)) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t\r");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

inline double parse_double(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw std::invalid_argument("config: '" + key + "' expects a number, got '" + value + "'");
  }
}

inline std::size_t parse_count(const std::string& key, const std::string& value) {
  const double v = parse_double(key, value);
  if (v < 0 || v != std::floor(v)) {
    throw std::invalid_argument("config: '" + key + "' expects a nonnegative integer, got '" + value + "'");
  }
  return static_cast<std::size_t>(v);
}

inline std::string format_double(double v) {
  std::ostringstream ss;
  ss << std::setprecision(17) << v;
  return ss.str();
}

}  // namespace detail

// Keys that configure a single training run (also valid as sweep axes and
// inside "<variant>.<key>" overrides).
inline bool apply_train_key(TrainConfig& cfg, const std::string& key, const std::string& value) {
  using detail::parse_count;
  using detail::parse_double;
  if (key == "b") {
    cfg.hp.bits = parse_count(key, value);
  } else if (key == "omega") {
    cfg.hp.omega = parse_double(key, value);
  } else if (key == "gamma") {
    cfg.hp.gamma = parse_double(key, value);
  } else if (key == "eta") {
    cfg.hp.eta = parse_double(key, value);
  } else if (key == "alpha") {
    cfg.hp.alpha = parse_double(key, value);
  } else if (key == "rho") {
    cfg.hp.rho = value == "auto" ? std::numeric_limits<double>::quiet_NaN() : parse_double(key, value);
  } else if (key == "loss") {
    cfg.hp.kind = parse_pair_loss_kind(value);
  } else if (key == "quantized_form") {
    if (value == "hinge") {
      cfg.hp.quantized_form = QuantizedForm::kNormalizedHinge;
    } else if (value == "supervised") {
      cfg.hp.quantized_form = QuantizedForm::kSupervisedKind;
    } else {
      throw std::invalid_argument("config: quantized_form must be 'hinge' or 'supervised'");
    }
  } else if (key == "margin") {
    cfg.hp.quantized_margin = parse_double(key, value);
  } else if (key == "epochs") {
    cfg.epochs = parse_count(key, value);
  } else if (key == "batch") {
    cfg.batch = parse_count(key, value);
  } else if (key == "m_l") {
    cfg.labeled_per_batch = parse_count(key, value);
  } else if (key == "sigma") {
    cfg.sigma_scale = parse_double(key, value);
  } else if (key == "lr") {
    cfg.learning_rate = parse_double(key, value);
  } else if (key == "lower_lr_scale") {
    cfg.lower_lr_scale = parse_double(key, value);
  } else if (key == "momentum") {
    cfg.momentum = parse_double(key, value);
  } else if (key == "rampup") {
    cfg.rampup_epochs = value == "auto" ? -1 : static_cast<int>(parse_count(key, value));
  } else if (key == "lr_rampup") {
    cfg.rampup_learning_rate = value == "1" || value == "true" || value == "on";
  } else if (key == "hidden") {
    cfg.hidden.clear();
    for (const auto& h : detail::split_list(value)) cfg.hidden.push_back(parse_count(key, h));
  } else if (key == "val_fraction") {
    cfg.validation_fraction = parse_double(key, value);
  } else {
    return false;
  }
  return true;
}

// Applies one key=value setting; unknown keys are errors.
inline void apply_setting(ExperimentSpec& spec, const std::string& key, const std::string& value) {
  using detail::parse_count;
  using detail::parse_double;
  if (const auto dot_pos = key.find('.'); dot_pos != std::string::npos) {
    const Variant v = parse_variant(key.substr(0, dot_pos));
    const std::string inner = key.substr(dot_pos + 1);
    TrainConfig probe = spec.train;
    if (!apply_train_key(probe, inner, value)) throw std::invalid_argument("config: unknown key '" + key + "'");
    spec.overrides[v].emplace_back(inner, value);
    return;
  }
  if (apply_train_key(spec.train, key, value)) return;
  if (key == "dataset") {
    spec.data.path = value;
  } else if (key == "variant") {
    spec.variants.clear();
    for (const auto& v : detail::split_list(value)) spec.variants.push_back(parse_variant(v));
  } else if (key == "seeds" || key == "seed") {
    spec.seeds.clear();
    for (const auto& s : detail::split_list(value)) spec.seeds.push_back(parse_count(key, s));
  } else if (key == "code_source") {
    spec.code_sources.clear();
    for (const auto& s : detail::split_list(value)) spec.code_sources.push_back(parse_code_source(s));
  } else if (key == "sweep_param") {
    TrainConfig probe = spec.train;
    if (!value.empty() && !apply_train_key(probe, value, "0")) {
      throw std::invalid_argument("config: cannot sweep unknown key '" + value + "'");
    }
    spec.sweep_param = value;
  } else if (key == "sweep_values") {
    spec.sweep_values = detail::split_list(value);
  } else if (key == "map_k") {
    spec.eval.map_k = parse_count(key, value);
  } else if (key == "radius") {
    spec.eval.radius = static_cast<int>(parse_count(key, value));
  } else if (key == "topk") {
    spec.eval.topk.clear();
    for (const auto& k : detail::split_list(value)) spec.eval.topk.push_back(parse_count(key, k));
  } else if (key == "out") {
    spec.out_dir = value;
  } else if (key == "classes") {
    spec.data.classes = parse_count(key, value);
  } else if (key == "per_class") {
    spec.data.per_class = parse_count(key, value);
  } else if (key == "dim") {
    spec.data.dim = parse_count(key, value);
  } else if (key == "spread") {
    spec.data.spread = parse_double(key, value);
  } else if (key == "data_seed") {
    spec.data.seed = parse_count(key, value);
  } else if (key == "labeled_fraction") {
    spec.data.labeled_fraction = parse_double(key, value);
  } else if (key == "queries_per_class") {
    spec.data.queries_per_class = parse_count(key, value);
  } else if (key == "train_fraction") {
    spec.data.train_fraction = parse_double(key, value);
  } else {
    throw std::invalid_argument("config: unknown key '" + key + "'");
  }
}

// Flat "key = value" lines; '#' starts a comment.
inline void apply_config_text(ExperimentSpec& spec, const std::string& text) {
  std::stringstream ss(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(ss, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(line_no) + ": expected key = value");
    }
    auto trim = [](std::string s) {
      const auto first = s.find_first_not_of(" \t\r");
      const auto last = s.find_last_not_of(" \t\r");
      return first == std::string::npos ? std::string() : s.substr(first, last - first + 1);
    };
    apply_setting(spec, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

inline void load_config_file(ExperimentSpec& spec, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path);
  std::stringstream buffer;
  buffer << in.rdbuf();
  apply_config_text(spec, buffer.str());
}

// Canonical, seed-free serialization of a training configuration.
inline nlohmann::json to_json(const TrainConfig& cfg) {
  std::string hidden;
  for (std::size_t i = 0; i < cfg.hidden.size(); ++i) hidden += (i ? "," : "") + std::to_string(cfg.hidden[i]);
  return {{"b", cfg.hp.bits},
          {"omega", cfg.hp.omega},
          {"gamma", cfg.hp.gamma},
          {"eta", cfg.hp.eta},
          {"alpha", cfg.hp.alpha},
          {"rho", std::isnan(cfg.hp.rho) ? nlohmann::json("auto") : nlohmann::json(cfg.hp.rho)},
          {"loss", to_string(cfg.hp.kind)},
          {"consistency", cfg.hp.consistency},
          {"quantized_form", cfg.hp.quantized_form == QuantizedForm::kNormalizedHinge ? "hinge" : "supervised"},
          {"margin", cfg.hp.quantized_margin},
          {"epochs", cfg.epochs},
          {"batch", cfg.batch},
          {"m_l", cfg.labeled_per_batch},
          {"sigma", cfg.sigma_scale},
          {"lr", cfg.learning_rate},
          {"lower_lr_scale", cfg.lower_lr_scale},
          {"momentum", cfg.momentum},
          {"rampup", cfg.rampup_length()},
          {"lr_rampup", cfg.rampup_learning_rate},
          {"hidden", hidden},
          {"val_fraction", cfg.validation_fraction}};
}

inline nlohmann::json to_json(const DataSource& d) {
  if (!d.path.empty()) return {{"path", d.path}};
  return {{"classes", d.classes},
          {"per_class", d.per_class},
          {"dim", d.dim},
          {"spread", d.spread},
          {"data_seed", d.seed},
          {"labeled_fraction", d.labeled_fraction},
          {"queries_per_class", d.queries_per_class},
          {"train_fraction", d.train_fraction}};
}

inline nlohmann::json to_json(const EvalOptions& e) {
  return {{"map_k", e.map_k}, {"radius", e.radius}, {"topk", e.topk}};
}

// Effective configuration of one run: base -> variant overrides -> sweep point -> variant forcing.
inline TrainConfig effective_config(const ExperimentSpec& spec, Variant v,
                                    const std::optional<std::string>& sweep_value) {
  TrainConfig cfg = spec.train;
  if (auto it = spec.overrides.find(v); it != spec.overrides.end()) {
    for (const auto& [key, value] : it->second) apply_train_key(cfg, key, value);
  }
  if (sweep_value && !spec.sweep_param.empty()) apply_train_key(cfg, spec.sweep_param, *sweep_value);
  return apply_variant(cfg, v);
}

inline std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string run_hash(const ExperimentSpec& spec, Variant v, const std::optional<std::string>& sweep_value) {
  nlohmann::json key{{"variant", to_string(v)},
                     {"config", to_json(effective_config(spec, v, sweep_value))},
                     {"data", to_json(spec.data)},
                     {"eval", to_json(spec.eval)}};
  std::ostringstream ss;
  ss << std::hex << std::setw(16) << std::setfill('0') << fnv1a(key.dump());
  return ss.str();
}

inline Dataset load_experiment_dataset(const DataSource& src) {
  Dataset ds;
  if (src.path.empty()) {
    ds = generate_blobs(src.classes, src.per_class, src.dim, src.spread, src.seed);
  } else if (src.path.size() >= 4 && src.path.substr(src.path.size() - 4) == ".csv") {
    ds = load_csv_dataset(src.path);
  } else {
    ds = load_dataset(src.path);
  }
  const bool has_roles = std::any_of(ds.roles.begin(), ds.roles.end(), [](Role r) { return r == Role::kQuery; });
  if (!has_roles) {
    SplitOptions opts;
    opts.labeled_fraction = src.labeled_fraction;
    opts.queries_per_class = src.queries_per_class;
    opts.train_fraction = src.train_fraction;
    opts.seed = src.seed;
    ds = split(std::move(ds), opts);
  }
  return ds;
}

// Encodes queries and database with `params` and evaluates retrieval.
inline MetricsReport evaluate_params(const EncoderParams& params, const Dataset& ds, const EvalOptions& opts) {
  const auto q = ds.indices_with(Role::kQuery);
  const auto d = ds.database_indices();
  CodeSet queries = pack(encode(params, gather_rows(ds.features, q)));
  CodeSet db = pack(encode(params, gather_rows(ds.features, d)));
  queries.set_ids({q.begin(), q.end()});
  db.set_ids({d.begin(), d.end()});
  queries.set_labels(ds.labels_of(q));
  db.set_labels(ds.labels_of(d));
  return evaluate(queries, db, opts);
}

struct RunOutcome {
  nlohmann::json record;
  std::optional<TrainResult> result;  // absent when loaded from an existing record
};

inline std::filesystem::path runs_dir(const ExperimentSpec& spec) {
  return std::filesystem::path(spec.out_dir) / "runs";
}

inline std::string run_stem(const std::string& hash, std::uint64_t seed) {
  return hash + "-seed" + std::to_string(seed);
}

// Trains one (variant, sweep point, seed) and evaluates every requested code
// source. An existing record for the same hash and seed is reused as is.
inline RunOutcome run_one(const ExperimentSpec& spec, const Dataset& ds, Variant v,
                          const std::optional<std::string>& sweep_value, std::uint64_t seed,
                          bool write_files = true) {
  const std::string hash = run_hash(spec, v, sweep_value);
  const auto dir = runs_dir(spec);
  const auto record_path = dir / (run_stem(hash, seed) + ".json");
  if (write_files && std::filesystem::exists(record_path)) {
    std::ifstream in(record_path);
    return {nlohmann::json::parse(in), std::nullopt};
  }
  TrainConfig cfg = effective_config(spec, v, sweep_value);
  cfg.seed = seed;
  nlohmann::json record{{"spec_hash", hash},
                        {"variant", to_string(v)},
                        {"seed", seed},
                        {"config", to_json(cfg)},
                        {"data", to_json(spec.data)}};
  record["sweep"] = sweep_value ? nlohmann::json{{"param", spec.sweep_param}, {"value", *sweep_value}}
                                : nlohmann::json(nullptr);
  RunOutcome outcome;
  try {
    const auto start = std::chrono::steady_clock::now();
    const TrainingView view = TrainingView::from(ds);
    TrainResult result = is_baseline(v) ? train_supervised(view, cfg) : train(view, cfg);
    record["train_seconds"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    record["rho"] = result.log.rho;
    const auto& last = result.log.epochs.back();
    record["final_validation_map"] =
        last.validation_map ? nlohmann::json(*last.validation_map) : nlohmann::json(nullptr);
    nlohmann::json metrics = nlohmann::json::object();
    for (CodeSource src : spec.code_sources) {
      const EncoderParams& params = src == CodeSource::kTeacher ? result.teacher : result.student;
      metrics[std::string(to_string(src))] = to_json(evaluate_params(params, ds, spec.eval));
    }
    record["metrics"] = metrics;
    record["status"] = "ok";
    if (write_files) {
      std::filesystem::create_directories(dir);
      std::ofstream log(dir / (run_stem(hash, seed) + ".log.jsonl"));
      log << to_json_lines(result.log);
      if (!result.log.iterations.empty()) {
        std::ofstream thr(dir / (run_stem(hash, seed) + ".thr.csv"));
        thr << "step,epoch,threshold,pseudo_fraction\n" << std::setprecision(17);
        for (const auto& it : result.log.iterations) {
          thr << it.step << ',' << it.epoch << ',' << it.threshold << ','
              << static_cast<double>(it.pseudo_pairs) / static_cast<double>(it.batch_pairs) << '\n';
        }
      }
    }
    outcome.result = std::move(result);
  } catch (const std::exception& e) {
    record["status"] = "failed";
    record["error"] = e.what();
  }
  if (write_files) {
    std::filesystem::create_directories(dir);
    std::ofstream out(record_path);
    out << record.dump(2) << '\n';
  }
  outcome.record = std::move(record);
  return outcome;
}

struct SummaryRow {
  std::string variant;
  std::string code_source;
  std::string sweep_param;
  std::string sweep_value;
  std::size_t runs = 0;
  std::size_t failed = 0;
  double map_mean = 0.0;
  double map_std = 0.0;
  double p2_mean = 0.0;
  double p2_std = 0.0;
  std::optional<double> gain;  // map_mean minus the matching baseline's map_mean
};

inline std::pair<double, double> mean_std(const std::vector<double>& xs) {
  if (xs.empty()) return {0.0, 0.0};
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  if (xs.size() < 2) return {mean, 0.0};
  double var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  return {mean, std::sqrt(var / static_cast<double>(xs.size() - 1))};
}

// Aggregates stored run records over seeds. Depends only on the records.
inline std::vector<SummaryRow> summarize(const std::vector<nlohmann::json>& records) {
  struct Group {
    std::vector<double> map, p2;
    std::size_t failed = 0;
    std::string loss;
  };
  using Key = std::tuple<std::string, std::string, std::string, std::string>;
  std::map<Key, Group> groups;
  std::vector<Key> order;
  auto touch = [&](const Key& k) -> Group& {
    auto [it, inserted] = groups.try_emplace(k);
    if (inserted) order.push_back(k);
    return it->second;
  };
  for (const auto& r : records) {
    const std::string variant = r.at("variant");
    std::string param, value;
    if (r.contains("sweep") && !r.at("sweep").is_null()) {
      param = r.at("sweep").at("param");
      value = r.at("sweep").at("value");
    }
    if (r.value("status", "failed") != "ok") {
      touch({variant, "", param, value}).failed++;
      continue;
    }
    for (const auto& [source, m] : r.at("metrics").items()) {
      Group& g = touch({variant, source, param, value});
      g.map.push_back(m.at("map_at_k"));
      g.p2.push_back(m.at("precision_hamming2"));
      g.loss = r.at("config").at("loss");
    }
  }
  std::vector<SummaryRow> rows;
  for (const Key& k : order) {
    const Group& g = groups.at(k);
    if (std::get<1>(k).empty()) continue;
    SummaryRow row;
    row.variant = std::get<0>(k);
    row.code_source = std::get<1>(k);
    row.sweep_param = std::get<2>(k);
    row.sweep_value = std::get<3>(k);
    row.runs = g.map.size();
    row.failed = g.failed;
    std::tie(row.map_mean, row.map_std) = mean_std(g.map);
    std::tie(row.p2_mean, row.p2_std) = mean_std(g.p2);
    const Variant v = parse_variant(row.variant);
    if (!is_baseline(v)) {
      const std::string base(to_string(baseline_for(v, parse_pair_loss_kind(g.loss))));
      // Baselines have no teacher, so any of their code sources serves as reference.
      for (const Key& bk : order) {
        if (std::get<0>(bk) == base && std::get<2>(bk) == row.sweep_param && std::get<3>(bk) == row.sweep_value &&
            !std::get<1>(bk).empty() && (std::get<1>(bk) == row.code_source || !row.gain)) {
          row.gain = row.map_mean - mean_std(groups.at(bk).map).first;
        }
      }
    }
    rows.push_back(row);
  }
  for (const Key& k : order) {
    const Group& g = groups.at(k);
    if (!std::get<1>(k).empty() || g.failed == 0) continue;
    // Every code-source row of the run shares its failures.
    bool matched = false;
    for (auto& r : rows) {
      if (r.variant == std::get<0>(k) && r.sweep_param == std::get<2>(k) && r.sweep_value == std::get<3>(k) &&
          !r.code_source.empty()) {
        r.failed += g.failed;
        matched = true;
      }
    }
    if (!matched) {
      SummaryRow row;
      row.variant = std::get<0>(k);
      row.sweep_param = std::get<2>(k);
      row.sweep_value = std::get<3>(k);
      row.failed = g.failed;
      rows.push_back(row);
    }
  }
  return rows;
}

inline nlohmann::json to_json(const SummaryRow& r) {
  return {{"variant", r.variant},     {"code_source", r.code_source}, {"sweep_param", r.sweep_param},
          {"sweep_value", r.sweep_value}, {"runs", r.runs},           {"failed", r.failed},
          {"map_mean", r.map_mean},   {"map_std", r.map_std},         {"p2_mean", r.p2_mean},
          {"p2_std", r.p2_std},       {"gain", r.gain ? nlohmann::json(*r.gain) : nlohmann::json(nullptr)}};
}

inline std::string summary_csv(const std::vector<SummaryRow>& rows) {
  std::ostringstream out;
  out << std::setprecision(6) << std::fixed;
  out << "variant,code_source,sweep_param,sweep_value,runs,failed,map_mean,map_std,p2_mean,p2_std,gain\n";
  for (const auto& r : rows) {
    out << r.variant << ',' << r.code_source << ',' << r.sweep_param << ',' << r.sweep_value << ',' << r.runs
        << ',' << r.failed << ',' << r.map_mean << ',' << r.map_std << ',' << r.p2_mean << ',' << r.p2_std << ',';
    if (r.gain) out << *r.gain;
    out << '\n';
  }
  return out.str();
}

inline std::vector<nlohmann::json> load_run_records(const std::filesystem::path& out_dir) {
  std::vector<std::filesystem::path> files;
  const auto dir = out_dir / "runs";
  if (!std::filesystem::exists(dir)) return {};
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    const auto name = entry.path().filename().string();
    if (entry.path().extension() == ".json") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<nlohmann::json> records;
  for (const auto& f : files) {
    std::ifstream in(f);
    records.push_back(nlohmann::json::parse(in));
  }
  return records;
}

// Writes plot-ready CSVs: one sweep curve per (variant, code source) when the
// records carry a sweep axis, and the per-iteration threshold trace (mean and
// std over seeds) per (variant, sweep point). Returns warnings for curves
// that had to be omitted.
inline std::vector<std::string> export_curves(const std::vector<nlohmann::json>& records,
                                              const std::filesystem::path& out_dir) {
  std::vector<std::string> warnings;
  const auto curves = out_dir / "curves";
  std::filesystem::create_directories(curves);
  const std::vector<SummaryRow> rows = summarize(records);

  std::map<std::string, std::vector<const SummaryRow*>> sweeps;
  for (const auto& r : rows) {
    if (r.sweep_param.empty()) continue;
    if (r.runs == 0) {
      warnings.push_back("no completed runs for " + r.variant + " at " + r.sweep_param + "=" + r.sweep_value);
      continue;
    }
    sweeps["sweep_" + r.sweep_param + "_" + r.variant + "_" + r.code_source].push_back(&r);
  }
  for (auto& [name, points] : sweeps) {
    std::sort(points.begin(), points.end(), [](const SummaryRow* a, const SummaryRow* b) {
      return std::stod(a->sweep_value) < std::stod(b->sweep_value);
    });
    std::ofstream out(curves / (name + ".csv"));
    out << points.front()->sweep_param << ",map_mean,map_std,p2_mean,p2_std,runs\n" << std::setprecision(10);
    for (const SummaryRow* p : points) {
      out << p->sweep_value << ',' << p->map_mean << ',' << p->map_std << ',' << p->p2_mean << ',' << p->p2_std
          << ',' << p->runs << '\n';
    }
  }

  // Threshold traces, read back from the per-run files.
  std::map<std::string, std::vector<std::filesystem::path>> traces;
  for (const auto& r : records) {
    if (r.value("status", "failed") != "ok" || is_baseline(parse_variant(r.at("variant").get<std::string>()))) continue;
    std::string name = "thr_" + r.at("variant").get<std::string>();
    if (r.contains("sweep") && !r.at("sweep").is_null()) {
      name += "_" + r.at("sweep").at("param").get<std::string>() + "=" + r.at("sweep").at("value").get<std::string>();
    }
    const auto path = out_dir / "runs" /
                      (run_stem(r.at("spec_hash").get<std::string>(), r.at("seed").get<std::uint64_t>()) + ".thr.csv");
    if (!std::filesystem::exists(path)) {
      warnings.push_back("missing threshold trace " + path.string());
      continue;
    }
    traces[name].push_back(path);
  }
  for (const auto& [name, files] : traces) {
    std::vector<std::vector<double>> per_run;
    std::vector<std::size_t> epochs;
    for (const auto& f : files) {
      std::ifstream in(f);
      std::string line;
      std::getline(in, line);
      std::vector<double> thr;
      std::vector<std::size_t> ep;
      while (std::getline(in, line)) {
        const auto cells = detail::split_list(line);
        if (cells.size() < 3) continue;
        ep.push_back(std::stoul(cells[1]));
        thr.push_back(std::stod(cells[2]));
      }
      if (epochs.empty()) epochs = ep;
      per_run.push_back(std::move(thr));
    }
    std::size_t length = epochs.size();
    for (const auto& t : per_run) length = std::min(length, t.size());
    std::ofstream out(curves / (name + ".csv"));
    out << "step,epoch,thr_mean,thr_std,runs\n" << std::setprecision(10);
    for (std::size_t s = 0; s < length; ++s) {
      std::vector<double> xs;
      for (const auto& t : per_run) xs.push_back(t[s]);
      const auto [m, sd] = mean_std(xs);
      out << s << ',' << epochs[s] << ',' << m << ',' << sd << ',' << xs.size() << '\n';
    }
  }
  return warnings;
}

struct ExperimentResult {
  std::vector<nlohmann::json> records;
  std::vector<SummaryRow> summary;
  std::vector<std::string> warnings;
};

// Runs every (variant, sweep point, seed), then writes runs.jsonl,
// summary.json / summary.csv and the curve files under spec.out_dir.
inline ExperimentResult run_experiment(const ExperimentSpec& spec, std::ostream* progress = nullptr) {
  const Dataset ds = load_experiment_dataset(spec.data);
  std::vector<std::optional<std::string>> points;
  if (spec.sweep_param.empty() || spec.sweep_values.empty()) {
    points.emplace_back(std::nullopt);
  } else {
    for (const auto& v : spec.sweep_values) points.emplace_back(v);
  }
  ExperimentResult out;
  for (const auto& point : points) {
    for (Variant v : spec.variants) {
      for (std::uint64_t seed : spec.seeds) {
        RunOutcome run = run_one(spec, ds, v, point, seed);
        if (progress != nullptr) {
          *progress << to_string(v) << (point ? " " + spec.sweep_param + "=" + *point : "") << " seed " << seed
                    << ": " << run.record.value("status", "?");
          if (run.record.contains("metrics")) {
            for (const auto& [src, m] : run.record.at("metrics").items()) {
              *progress << " " << src << " MAP " << m.at("map_at_k").get<double>();
            }
          }
          *progress << '\n';
        }
        out.records.push_back(std::move(run.record));
      }
    }
  }
  out.summary = summarize(out.records);
  const std::filesystem::path dir(spec.out_dir);
  std::filesystem::create_directories(dir);
  {
    std::ofstream jsonl(dir / "runs.jsonl");
    for (const auto& r : out.records) jsonl << r.dump() << '\n';
  }
  {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : out.summary) rows.push_back(to_json(r));
    std::ofstream js(dir / "summary.json");
    js << rows.dump(2) << '\n';
    std::ofstream csv(dir / "summary.csv");
    csv << summary_csv(out.summary);
  }
  out.warnings = export_curves(out.records, dir);
  return out;
}

}  // namespace pts3h
