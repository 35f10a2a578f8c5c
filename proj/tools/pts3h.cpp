// Command line front end: dataset generation, training, encoding, evaluation
// and the multi-seed ablation / sweep runner.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pts3h/pts3h.hpp"

namespace {

using pts3h::ExperimentSpec;

// Config keys exposed as flags on the experiment subcommands.
const std::vector<std::pair<std::string, std::string>> kRunKeys = {
    {"dataset", "dataset file (.ptsd or .csv); empty generates blobs"},
    {"variant", "method variant(s), comma separated"},
    {"seeds", "training seeds, comma separated"},
    {"code_source", "teacher, student or both (comma separated)"},
    {"b", "code length in bits"},
    {"omega", "maximum unsupervised weight"},
    {"gamma", "weight of the pseudo-pair loss"},
    {"eta", "quantization penalty weight"},
    {"alpha", "teacher EMA decay"},
    {"rho", "pseudo-similar fraction, or 'auto'"},
    {"loss", "supervised pair loss: KSH, DSH or DPSH"},
    {"quantized_form", "pseudo-pair loss form: hinge or supervised"},
    {"margin", "hinge margin of the pseudo-pair loss"},
    {"epochs", "training epochs"},
    {"batch", "minibatch size"},
    {"m_l", "labelled items per minibatch"},
    {"sigma", "input noise std as a multiple of feature std"},
    {"lr", "learning rate of the last layer"},
    {"lower_lr_scale", "learning rate multiplier for lower layers"},
    {"momentum", "SGD momentum"},
    {"rampup", "ramp-up length in epochs, or 'auto'"},
    {"lr_rampup", "ramp the learning rate with the unsupervised weight (true/false)"},
    {"hidden", "hidden layer widths, comma separated"},
    {"val_fraction", "fraction of labelled items held out for validation"},
    {"map_k", "MAP cutoff, 0 for the whole database"},
    {"radius", "Hamming radius for precision"},
    {"topk", "cutoffs of the precision@k curve"},
    {"sweep_param", "config key to sweep"},
    {"sweep_values", "values of the swept key, comma separated"},
    {"out", "output directory"},
};

const std::vector<std::pair<std::string, std::string>> kDataKeys = {
    {"classes", "number of blob classes"},
    {"per_class", "items per class"},
    {"dim", "feature dimension"},
    {"spread", "blob standard deviation"},
    {"data_seed", "seed for generation and split"},
    {"labeled_fraction", "labelled fraction of the training pool"},
    {"queries_per_class", "query items per class"},
    {"train_fraction", "fraction of non-query items used for training"},
};

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::map<std::string, std::string> flags;
  std::vector<std::string> sets;
};

void add_common(CLI::App* app, Common& c, const std::vector<std::pair<std::string, std::string>>& keys) {
  app->add_option("--config", c.config, "flat key = value config file")->check(CLI::ExistingFile);
  app->add_option("--seed", c.seed, "seed (overrides 'seeds')");
  app->add_option("--set", c.sets, "extra key=value setting, e.g. PTS3H-P.omega=32");
  for (const auto& [key, help] : keys) app->add_option("--" + key, c.flags[key], help);
}

// Defaults, then the config file, then explicit flags.
ExperimentSpec build_spec(const Common& c, ExperimentSpec spec) {
  if (!c.config.empty()) pts3h::load_config_file(spec, c.config);
  for (const auto& [key, value] : c.flags) {
    if (!value.empty()) pts3h::apply_setting(spec, key, value);
  }
  for (const auto& kv : c.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("--set expects key=value, got '" + kv + "'");
    pts3h::apply_setting(spec, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (c.seed) spec.seeds = {*c.seed};
  return spec;
}

void print_summary(const std::vector<pts3h::SummaryRow>& rows) {
  std::cout << std::left << std::setw(15) << "variant" << std::setw(9) << "codes" << std::setw(16) << "sweep"
            << std::right << std::setw(5) << "runs" << std::setw(20) << "MAP" << std::setw(20) << "P@H<=2"
            << std::setw(10) << "gain" << '\n';
  std::cout << std::fixed << std::setprecision(4);
  for (const auto& r : rows) {
    std::ostringstream map, p2;
    map << std::fixed << std::setprecision(4) << r.map_mean << " +- " << r.map_std;
    p2 << std::fixed << std::setprecision(4) << r.p2_mean << " +- " << r.p2_std;
    std::cout << std::left << std::setw(15) << r.variant << std::setw(9) << r.code_source << std::setw(16)
              << (r.sweep_param.empty() ? "-" : r.sweep_param + "=" + r.sweep_value) << std::right << std::setw(5)
              << r.runs << std::setw(20) << map.str() << std::setw(20) << p2.str() << std::setw(10);
    if (r.gain) {
      std::cout << std::showpos << *r.gain << std::noshowpos;
    } else {
      std::cout << "-";
    }
    if (r.failed > 0) std::cout << "  (" << r.failed << " failed)";
    std::cout << '\n';
  }
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Semi-supervised deep hashing with a mean-teacher encoder"};
  app.require_subcommand(1);

  // gen-data
  Common gen;
  std::string gen_out = "data.ptsd";
  std::string gen_csv;
  auto* gen_cmd = app.add_subcommand("gen-data", "generate (or import) and split a dataset");
  add_common(gen_cmd, gen, kDataKeys);
  gen_cmd->add_option("--csv", gen_csv, "import features and labels from CSV instead of generating")
      ->check(CLI::ExistingFile);
  gen_cmd->add_option("-o,--output", gen_out, "output dataset file");

  // train
  Common tr;
  std::string tr_checkpoint = "model.pts3";
  std::string tr_log;
  auto* train_cmd = app.add_subcommand("train", "train one model and save a checkpoint");
  auto run_and_data_keys = kRunKeys;
  run_and_data_keys.insert(run_and_data_keys.end(), kDataKeys.begin(), kDataKeys.end());
  add_common(train_cmd, tr, run_and_data_keys);
  train_cmd->add_option("--checkpoint", tr_checkpoint, "checkpoint output path");
  train_cmd->add_option("--log", tr_log, "per-epoch JSON lines log path");

  // encode
  Common enc;
  std::string enc_checkpoint;
  std::string enc_source = "teacher";
  std::string enc_queries = "queries.ptsc";
  std::string enc_db = "database.ptsc";
  auto* encode_cmd = app.add_subcommand("encode", "encode the query and database items of a dataset");
  add_common(encode_cmd, enc, kDataKeys);
  encode_cmd->add_option("--dataset", enc.flags["dataset"], "dataset file; empty generates blobs");
  encode_cmd->add_option("--checkpoint", enc_checkpoint, "trained checkpoint")->required()->check(CLI::ExistingFile);
  encode_cmd->add_option("--code_source", enc_source, "teacher or student");
  encode_cmd->add_option("--queries", enc_queries, "query code output");
  encode_cmd->add_option("--db", enc_db, "database code output");

  // eval
  Common ev;
  std::string ev_queries;
  std::string ev_db;
  std::string ev_out;
  bool ev_per_query = false;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate retrieval between two code files");
  add_common(eval_cmd, ev, {{"map_k", "MAP cutoff, 0 for all"}, {"radius", "Hamming radius"}, {"topk", "curve cutoffs"}});
  eval_cmd->add_option("--queries", ev_queries, "query codes")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--db", ev_db, "database codes")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--report", ev_out, "write the JSON report here instead of stdout");
  eval_cmd->add_flag("--per-query", ev_per_query, "include per-query diagnostics");

  // ablate / sweep
  Common ab;
  auto* ablate_cmd = app.add_subcommand("ablate", "train and evaluate every variant over several seeds");
  add_common(ablate_cmd, ab, run_and_data_keys);
  Common sw;
  auto* sweep_cmd = app.add_subcommand("sweep", "sweep one hyperparameter over several seeds");
  add_common(sweep_cmd, sw, run_and_data_keys);

  // report
  Common rep;
  std::string rep_dir = "pts3h_out";
  auto* report_cmd = app.add_subcommand("report", "recompute summaries and curves from stored run records");
  add_common(report_cmd, rep, {});
  report_cmd->add_option("--out", rep_dir, "experiment output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen_cmd) {
      ExperimentSpec spec = build_spec(gen, pts3h::default_spec());
      if (gen.seed) spec.data.seed = *gen.seed;
      if (!gen_csv.empty()) spec.data.path = gen_csv;
      const pts3h::Dataset ds = pts3h::load_experiment_dataset(spec.data);
      pts3h::save_dataset(gen_out, ds);
      std::cout << "wrote " << gen_out << ": " << ds.size() << " items, dim " << ds.dim() << ", "
                << ds.num_classes << " classes; labelled " << ds.indices_with(pts3h::Role::kTrainLabeled).size()
                << ", unlabelled " << ds.indices_with(pts3h::Role::kTrainUnlabeled).size() << ", queries "
                << ds.indices_with(pts3h::Role::kQuery).size() << ", database " << ds.database_indices().size()
                << '\n';
    } else if (*train_cmd) {
      ExperimentSpec spec = build_spec(tr, pts3h::default_spec());
      if (spec.variants.size() != 1 || spec.seeds.size() != 1) {
        throw std::invalid_argument("train takes exactly one variant and one seed");
      }
      const pts3h::Dataset ds = pts3h::load_experiment_dataset(spec.data);
      const pts3h::Variant v = spec.variants.front();
      pts3h::TrainConfig cfg = pts3h::effective_config(spec, v, std::nullopt);
      cfg.seed = spec.seeds.front();
      const pts3h::TrainingView view = pts3h::TrainingView::from(ds);
      pts3h::TrainResult result = pts3h::is_baseline(v) ? pts3h::train_supervised(view, cfg) : pts3h::train(view, cfg);
      pts3h::save_checkpoint(tr_checkpoint, {result.student, result.teacher, result.optimizer});
      if (!tr_log.empty()) write_text(tr_log, pts3h::to_json_lines(result.log));
      nlohmann::json out{{"variant", pts3h::to_string(v)}, {"seed", cfg.seed}, {"config", pts3h::to_json(cfg)}};
      for (pts3h::CodeSource src : spec.code_sources) {
        const auto& params = src == pts3h::CodeSource::kTeacher ? result.teacher : result.student;
        out["metrics"][std::string(pts3h::to_string(src))] =
            pts3h::to_json(pts3h::evaluate_params(params, ds, spec.eval));
      }
      std::cout << out.dump(2) << '\n';
    } else if (*encode_cmd) {
      ExperimentSpec spec = build_spec(enc, pts3h::default_spec());
      if (enc.seed) spec.data.seed = *enc.seed;
      const pts3h::Dataset ds = pts3h::load_experiment_dataset(spec.data);
      const pts3h::Checkpoint ckpt = pts3h::load_checkpoint(enc_checkpoint);
      const auto& params = pts3h::parse_code_source(enc_source) == pts3h::CodeSource::kTeacher ? ckpt.teacher
                                                                                              : ckpt.student;
      auto write_role = [&](const std::vector<std::size_t>& idx, const std::string& path) {
        pts3h::CodeSet codes = pts3h::pack(pts3h::encode(params, pts3h::gather_rows(ds.features, idx)));
        codes.set_ids({idx.begin(), idx.end()});
        codes.set_labels(ds.labels_of(idx));
        pts3h::save_codes(path, codes);
        std::cout << "wrote " << path << ": " << codes.size() << " codes of " << codes.bits() << " bits\n";
      };
      write_role(ds.indices_with(pts3h::Role::kQuery), enc_queries);
      write_role(ds.database_indices(), enc_db);
    } else if (*eval_cmd) {
      ExperimentSpec spec = build_spec(ev, pts3h::default_spec());
      const pts3h::CodeSet queries = pts3h::load_codes(ev_queries);
      const pts3h::CodeSet db = pts3h::load_codes(ev_db);
      const auto report = pts3h::evaluate(queries, db, spec.eval);
      const std::string text = pts3h::to_json(report, ev_per_query).dump(2) + "\n";
      if (ev_out.empty()) {
        std::cout << text;
      } else {
        write_text(ev_out, text);
      }
    } else if (*ablate_cmd || *sweep_cmd) {
      const bool ablate = static_cast<bool>(*ablate_cmd);
      ExperimentSpec defaults = pts3h::default_spec();
      defaults.seeds = {1, 2, 3, 4, 5};
      defaults.code_sources = {pts3h::CodeSource::kTeacher, pts3h::CodeSource::kStudent};
      if (ablate) {
        defaults.variants = {pts3h::Variant::kBaselineDsh, pts3h::Variant::kPts3hDsh, pts3h::Variant::kPts3hP,
                             pts3h::Variant::kPts3hQ};
      } else {
        defaults.variants = {pts3h::Variant::kPts3hDsh};
        defaults.code_sources = {pts3h::CodeSource::kTeacher};
      }
      ExperimentSpec spec = build_spec(ablate ? ab : sw, defaults);
      if (!ablate && (spec.sweep_param.empty() || spec.sweep_values.empty())) {
        throw std::invalid_argument("sweep needs --sweep_param and --sweep_values");
      }
      const auto result = pts3h::run_experiment(spec, &std::cerr);
      print_summary(result.summary);
      for (const auto& w : result.warnings) std::cerr << "warning: " << w << '\n';
      std::cout << "records and curves in " << spec.out_dir << '\n';
    } else if (*report_cmd) {
      const auto records = pts3h::load_run_records(rep_dir);
      if (records.empty()) throw std::runtime_error("no run records under " + rep_dir);
      const auto rows = pts3h::summarize(records);
      nlohmann::json js = nlohmann::json::array();
      for (const auto& r : rows) js.push_back(pts3h::to_json(r));
      write_text(std::filesystem::path(rep_dir) / "summary.json", js.dump(2) + "\n");
      write_text(std::filesystem::path(rep_dir) / "summary.csv", pts3h::summary_csv(rows));
      for (const auto& w : pts3h::export_curves(records, rep_dir)) std::cerr << "warning: " << w << '\n';
      print_summary(rows);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
