#pragma once

#include <cstdlib>
#include <fstream>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "resist/report.hpp"

namespace resist {

namespace exit_code {
inline constexpr int ok = 0;
inline constexpr int schema = 2;
inline constexpr int divergence = 3;
inline constexpr int io = 4;
}  // namespace exit_code

struct schema_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DataConfig {
  std::string kind = "synthetic";  // synthetic | csv
  int n = 0;
  int dim = 0;
  LabelMode label_mode = LabelMode::teacher_net;
  int eval_n = 0;  // 0: evaluate on the training data
  std::string path;
  NormalizePolicy normalize = NormalizePolicy::normalize;
  double label_bound = 1.0;  // csv only: |y| clamp threshold
};

struct OutputConfig {
  std::string metrics_csv = "metrics.csv";
  std::string checkpoint = "model.ckpt";
  std::string compare_csv = "compare.csv";
  std::string sweep_csv = "sweep.csv";
};

struct ExperimentConfig {
  ModelConfig model;
  ProtocolConfig protocol;
  DataConfig data;
  OutputConfig output;
  std::vector<Method> methods;  // compare
  std::vector<int> ells;        // sweep
  bool has_method = false;
};

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& obj,
                                const std::set<std::string>& known,
                                const std::string& where) {
  for (const auto& item : obj.items())
    if (!known.count(item.key()))
      throw schema_error("unknown key '" + item.key() + "' in " + where);
}

inline Method parse_method(const std::string& s) {
  if (s == "resist") return Method::resist;
  if (s == "local_sgd") return Method::local_sgd;
  if (s == "data_parallel") return Method::data_parallel;
  if (s == "ensemble") return Method::ensemble;
  throw schema_error("unknown method '" + s + "'");
}

inline ModelConfig parse_model(const nlohmann::json& j) {
  reject_unknown_keys(j,
                      {"depth", "width", "input_dim", "c_res", "c_sigma",
                       "activation", "partition_lo", "partition_hi",
                       "min_depth"},
                      "model");
  ModelConfig cfg;
  cfg.depth = j.at("depth").get<int>();
  cfg.width = j.at("width").get<int>();
  cfg.input_dim = j.at("input_dim").get<int>();
  cfg.c_res = j.value("c_res", 0.5);
  cfg.c_sigma = j.value("c_sigma", 2.0);
  if (j.contains("activation")) {
    const std::string a = j.at("activation").get<std::string>();
    if (a == "relu") {
      cfg.activation = Activation::relu;
    } else if (a == "identity") {
      cfg.activation = Activation::identity;
    } else {
      throw schema_error("unknown activation '" + a + "'");
    }
  }
  cfg.partition_lo = j.value("partition_lo", 2);
  cfg.partition_hi = j.value("partition_hi", cfg.depth);
  cfg.min_depth = j.value("min_depth", 1);
  return cfg;
}

inline Codec parse_codec(const nlohmann::json& j) {
  reject_unknown_keys(j, {"kind", "bits", "keep_frac"}, "protocol.compression");
  Codec codec;
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "quantize") {
    codec.kind = CodecKind::quantize;
    codec.bits = j.at("bits").get<int>();
    if (codec.bits < 1 || codec.bits > 16)
      throw schema_error("compression bits must lie in [1, 16]");
  } else if (kind == "topk") {
    codec.kind = CodecKind::topk;
    codec.keep_frac = j.at("keep_frac").get<double>();
    if (!(codec.keep_frac > 0.0 && codec.keep_frac <= 1.0))
      throw schema_error("keep_frac must lie in (0, 1]");
  } else {
    throw schema_error("unknown compression kind '" + kind + "'");
  }
  return codec;
}

inline ProtocolConfig parse_protocol(const nlohmann::json& j,
                                     std::uint64_t seed) {
  reject_unknown_keys(j,
                      {"workers", "rounds", "local_iters", "eta", "batch_size",
                       "warmup_rounds", "shard_mode", "compression"},
                      "protocol");
  ProtocolConfig pcfg;
  pcfg.workers = j.at("workers").get<int>();
  pcfg.rounds = j.at("rounds").get<int>();
  pcfg.local_iters = j.value("local_iters", 50);
  pcfg.eta = j.at("eta").get<double>();
  pcfg.seed = seed;
  if (j.contains("batch_size")) {
    const auto& b = j.at("batch_size");
    if (b.is_string()) {
      if (b.get<std::string>() != "full")
        throw schema_error("batch_size must be an integer or \"full\"");
      pcfg.batch_size = 0;
    } else {
      pcfg.batch_size = b.get<int>();
      if (pcfg.batch_size < 1) throw schema_error("batch_size must be >= 1");
    }
  }
  pcfg.warmup_rounds = j.value("warmup_rounds", 0);
  if (j.contains("shard_mode")) {
    const std::string s = j.at("shard_mode").get<std::string>();
    if (s == "full_data") {
      pcfg.shard_mode = ShardMode::full_data;
    } else if (s == "disjoint_shards") {
      pcfg.shard_mode = ShardMode::disjoint_shards;
    } else {
      throw schema_error("unknown shard_mode '" + s + "'");
    }
  }
  if (j.contains("compression")) pcfg.codec = parse_codec(j.at("compression"));
  return pcfg;
}

inline DataConfig parse_data(const nlohmann::json& j) {
  reject_unknown_keys(j,
                      {"kind", "n", "dim", "label_mode", "eval_n", "path",
                       "normalize", "label_bound"},
                      "data");
  DataConfig d;
  d.kind = j.at("kind").get<std::string>();
  if (d.kind == "synthetic") {
    if (j.contains("label_bound"))
      throw schema_error("label_bound applies to csv data only");
    d.n = j.at("n").get<int>();
    d.dim = j.at("dim").get<int>();
    if (j.contains("label_mode")) {
      const std::string m = j.at("label_mode").get<std::string>();
      if (m == "teacher_net") {
        d.label_mode = LabelMode::teacher_net;
      } else if (m == "random_bounded") {
        d.label_mode = LabelMode::random_bounded;
      } else {
        throw schema_error("unknown label_mode '" + m + "'");
      }
    }
    d.eval_n = j.value("eval_n", 0);
    if (d.eval_n < 0) throw schema_error("eval_n must be >= 0");
  } else if (d.kind == "csv") {
    d.path = j.at("path").get<std::string>();
    if (j.contains("normalize"))
      d.normalize = j.at("normalize").get<bool>()
                        ? NormalizePolicy::normalize
                        : NormalizePolicy::reject_if_not_unit;
    d.label_bound = j.value("label_bound", 1.0);
    if (!(d.label_bound > 0.0))
      throw schema_error("label_bound must be > 0");
  } else {
    throw schema_error("unknown data kind '" + d.kind + "'");
  }
  return d;
}

inline OutputConfig parse_output(const nlohmann::json& j) {
  reject_unknown_keys(j, {"metrics_csv", "checkpoint", "compare_csv", "sweep_csv"},
                      "output");
  OutputConfig o;
  o.metrics_csv = j.value("metrics_csv", o.metrics_csv);
  o.checkpoint = j.value("checkpoint", o.checkpoint);
  o.compare_csv = j.value("compare_csv", o.compare_csv);
  o.sweep_csv = j.value("sweep_csv", o.sweep_csv);
  return o;
}

}  // namespace detail

/// Strict config parsing: unknown keys anywhere are errors.
inline ExperimentConfig parse_config(const nlohmann::json& j) {
  detail::reject_unknown_keys(j,
                              {"method", "methods", "ells", "model", "protocol",
                               "data", "seed", "output"},
                              "config");
  ExperimentConfig cfg;
  const std::uint64_t seed = j.value("seed", std::uint64_t{0});
  cfg.model = detail::parse_model(j.at("model"));
  cfg.protocol = detail::parse_protocol(j.at("protocol"), seed);
  cfg.data = detail::parse_data(j.at("data"));
  if (j.contains("output")) cfg.output = detail::parse_output(j.at("output"));
  if (j.contains("method")) {
    cfg.protocol.method = detail::parse_method(j.at("method").get<std::string>());
    cfg.has_method = true;
  }
  if (j.contains("methods"))
    for (const auto& m : j.at("methods"))
      cfg.methods.push_back(detail::parse_method(m.get<std::string>()));
  if (j.contains("ells")) {
    for (const auto& e : j.at("ells")) {
      const int ell = e.get<int>();
      if (ell < 1) throw schema_error("ells entries must be >= 1");
      cfg.ells.push_back(ell);
    }
  }

  try {
    cfg.model.validate();
    if (cfg.has_method) cfg.protocol.validate();
  } catch (const std::invalid_argument& e) {
    throw schema_error(e.what());
  }
  if (cfg.data.kind == "synthetic" && cfg.data.dim != cfg.model.input_dim)
    throw schema_error("data.dim must equal model.input_dim");
  return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config: " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw schema_error(std::string("config is not valid JSON: ") + e.what());
  }
  try {
    return parse_config(j);
  } catch (const nlohmann::json::exception& e) {
    throw schema_error(std::string("config schema violation: ") + e.what());
  }
}

struct LoadedData {
  Dataset train;
  Dataset eval;
};

inline LoadedData build_data(const ExperimentConfig& cfg, std::ostream& err) {
  LoadedData d;
  if (cfg.data.kind == "synthetic") {
    d.train = gen_synthetic(cfg.data.n, cfg.data.dim, cfg.protocol.seed,
                            cfg.data.label_mode);
    d.eval = cfg.data.eval_n > 0
                 ? gen_synthetic(cfg.data.eval_n, cfg.data.dim,
                                 stream_seed(cfg.protocol.seed, 0, 0,
                                             stream_tag::eval),
                                 cfg.data.label_mode)
                 : d.train;
  } else {
    d.train = load_csv(cfg.data.path, cfg.data.normalize, &err,
                       cfg.data.label_bound);
    d.eval = d.train;
    if (d.train.dim() != cfg.model.input_dim)
      throw schema_error("CSV feature dimension does not match model.input_dim");
  }
  return d;
}

inline int worker_threads_from_env(int workers) {
  const char* env = std::getenv("RESIST_THREADS");
  if (env != nullptr) {
    const int t = std::atoi(env);
    if (t >= 1) return std::min(t, workers);
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return std::min(workers, hw == 0 ? 1 : static_cast<int>(hw));
}

/// run <config.json>: executes the configured protocol, writes the metrics
/// CSV and final checkpoint, prints a one-line summary on stdout.
inline int cmd_run(const std::string& config_path, std::ostream& out,
                   std::ostream& err) {
  try {
    const ExperimentConfig cfg = load_config(config_path);
    if (!cfg.has_method) throw schema_error("run requires a 'method' key");
    const LoadedData data = build_data(cfg, err);
    const RunResult run =
        run_protocol(cfg.protocol, cfg.model, data.train, data.eval,
                     worker_threads_from_env(cfg.protocol.workers));

    std::ofstream csv(cfg.output.metrics_csv, std::ios::binary);
    if (!csv) throw std::runtime_error("cannot write " + cfg.output.metrics_csv);
    write_metrics_csv(csv, run);
    if (!csv) throw std::runtime_error("write failed: " + cfg.output.metrics_csv);

    if (cfg.protocol.method != Method::ensemble)
      save_checkpoint(cfg.output.checkpoint, cfg.model, run.final_params);

    char line[256];
    std::snprintf(line, sizeof(line),
                  "final_loss=%.6g cumulative_gb=%.6g wall_seconds=%.3f\n",
                  run.metrics.back().train_loss, run.ledger.cumulative() / 1e9,
                  run.wall_seconds);
    out << line;
    return exit_code::ok;
  } catch (const schema_error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code::schema;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return exit_code::schema;
  } catch (const divergence_error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code::divergence;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_code::io;
  }
}

/// compare <config.json>: one run per listed method with shared seed and
/// data; emits (method, round, loss, cumulative_bytes, seconds) rows.
inline int cmd_compare(const std::string& config_path, std::ostream& out,
                       std::ostream& err) {
  try {
    const ExperimentConfig cfg = load_config(config_path);
    if (cfg.methods.size() < 2)
      throw schema_error("compare requires a 'methods' list with >= 2 entries");
    const LoadedData data = build_data(cfg, err);

    std::ofstream csv(cfg.output.compare_csv, std::ios::binary);
    if (!csv) throw std::runtime_error("cannot write " + cfg.output.compare_csv);
    csv << "method,round,loss,cumulative_bytes,seconds\n";
    for (const Method m : cfg.methods) {
      ProtocolConfig pcfg = cfg.protocol;
      pcfg.method = m;
      if (m == Method::data_parallel) pcfg.local_iters = 1;
      if (m == Method::ensemble) pcfg.warmup_rounds = 0;
      const RunResult run =
          run_protocol(pcfg, cfg.model, data.train, data.eval,
                       worker_threads_from_env(pcfg.workers));
      for (const auto& row : run.metrics)
        csv << method_name(m) << ',' << row.round << ','
            << fmt_double(row.eval_loss) << ','
            << fmt_double(row.cumulative_bytes) << ','
            << fmt_double(row.seconds) << '\n';
      char line[256];
      std::snprintf(line, sizeof(line),
                    "%s: final_loss=%.6g cumulative_gb=%.6g\n", method_name(m),
                    run.metrics.back().eval_loss,
                    run.ledger.cumulative() / 1e9);
      out << line;
    }
    if (!csv) throw std::runtime_error("write failed: " + cfg.output.compare_csv);
    return exit_code::ok;
  } catch (const schema_error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code::schema;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return exit_code::schema;
  } catch (const divergence_error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code::divergence;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_code::io;
  }
}

/// sweep <config.json>: one run per requested ell; CSV rows
/// (ell, final_train_loss, final_eval_loss, cumulative_bytes).
inline int cmd_sweep(const std::string& config_path, std::ostream& out,
                     std::ostream& err) {
  try {
    const ExperimentConfig cfg = load_config(config_path);
    if (!cfg.has_method) throw schema_error("sweep requires a 'method' key");
    if (cfg.ells.empty())
      throw schema_error("sweep requires a non-empty 'ells' list");
    const LoadedData data = build_data(cfg, err);
    const std::vector<SweepRow> rows = sweep_local_iterations(
        cfg.protocol, cfg.model, data.train, data.eval, cfg.ells,
        worker_threads_from_env(cfg.protocol.workers));

    std::ofstream csv(cfg.output.sweep_csv, std::ios::binary);
    if (!csv) throw std::runtime_error("cannot write " + cfg.output.sweep_csv);
    csv << "ell,final_train_loss,final_eval_loss,cumulative_bytes\n";
    for (const auto& row : rows)
      csv << row.ell << ',' << fmt_double(row.final_train_loss) << ','
          << fmt_double(row.final_eval_loss) << ','
          << fmt_double(row.cumulative_bytes) << '\n';
    if (!csv) throw std::runtime_error("write failed: " + cfg.output.sweep_csv);
    out << "sweep: " << rows.size() << " rows -> " << cfg.output.sweep_csv
        << "\n";
    return exit_code::ok;
  } catch (const schema_error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code::schema;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return exit_code::schema;
  } catch (const divergence_error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code::divergence;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_code::io;
  }
}

/// fit <metrics.csv>: convergence-rate fit on the train_loss column.
inline int cmd_fit(const std::string& csv_path, std::ostream& out,
                   std::ostream& err) {
  std::ifstream in(csv_path);
  if (!in) {
    err << "error: cannot open " << csv_path << "\n";
    return exit_code::io;
  }
  try {
    const std::vector<double> losses = read_csv_column(in, "train_loss");
    const RateFit fit = fit_rate(losses);
    char line[160];
    std::snprintf(line, sizeof(line),
                  "rho=%.12g r2=%.12g window_start=%d window_len=%d\n", fit.rho,
                  fit.r2, fit.window_start, fit.window_len);
    out << line;
    return exit_code::ok;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return exit_code::schema;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_code::io;
  }
}

}  // namespace resist
