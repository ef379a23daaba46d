#include "icafs/bench/bench.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "icafs/data/generators.hpp"
#include "icafs/gates/gates.hpp"

namespace icafs::bench {

namespace {

namespace fs = std::filesystem;

template <typename T>
void read(const Json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void reject_unknown(const Json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [k, v] : j.items()) {
    if (std::none_of(keys.begin(), keys.end(), [&](const char* s) { return k == s; })) {
      throw ConfigError(where + ": unknown key \"" + k + "\"");
    }
  }
}

fs::path schema_for(const std::string& csv, const std::string& schema) {
  if (!schema.empty()) return schema;
  fs::path p(csv);
  return p.replace_extension(".json");
}

fs::path usps_path() {
  if (const char* env = std::getenv("ICAFS_USPS_CSV"); env && *env) return env;
  return "data/usps.csv";
}

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

std::string label_text(const Json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); }

// Rethrows with the stage name in front, keeping the error type.
template <typename F>
auto staged(const char* stage, F&& fn) -> decltype(fn()) {
  const std::string p = std::string(stage) + ": ";
  try {
    return fn();
  } catch (const ConfigError& e) {
    throw ConfigError(p + e.what());
  } catch (const DataError& e) {
    throw DataError(p + e.what());
  } catch (const ShapeError& e) {
    throw ShapeError(p + e.what());
  } catch (const NumericError& e) {
    throw NumericError(p + e.what());
  } catch (const InvariantError& e) {
    throw InvariantError(p + e.what());
  } catch (const ProtocolError& e) {
    throw ProtocolError(p + e.what());
  }
}

double log_add(double a, double b) {
  if (a == -std::numeric_limits<double>::infinity()) return b;
  if (b == -std::numeric_limits<double>::infinity()) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

std::string cell_tag(const Json& labels) {
  std::string tag;
  for (const auto& [k, v] : labels.items()) {
    if (!tag.empty()) tag += "_";
    tag += k + "-" + label_text(v);
  }
  return tag.empty() ? "run" : tag;
}

}  // namespace

// ---- config -----------------------------------------------------------------------

void ExperimentConfig::validate() const {
  if (K < 1) throw ConfigError("K must be >= 1");
  if (N < 1) throw ConfigError("N must be >= 1");
  if (beta < 0) throw ConfigError("beta must be >= 0");
  if (gamma <= 0) throw ConfigError("gamma must be > 0");
  if (T < 0 || batch < 1) throw ConfigError("T >= 0 and batch >= 1 required");
  if (repeats < 1) throw ConfigError("repeats must be >= 1");
  if (lr < 0) throw ConfigError("lr must be >= 0");
  if (noise_fraction < 0 || noise_fraction >= 1) throw ConfigError("noise_fraction must lie in [0, 1)");
  if (dataset.test_fraction <= 0 || dataset.test_fraction >= 1) throw ConfigError("test_fraction must lie in (0, 1)");
  if (partition.strategy != "equal_random" && partition.strategy != "explicit") {
    throw ConfigError("unknown partition strategy: " + partition.strategy);
  }
  if (partition.strategy == "explicit" && static_cast<int>(partition.ranges.size()) != K) {
    throw ConfigError("explicit partition needs K ranges");
  }
  if (dp.enabled && dp.clip <= 0) throw ConfigError("dp clip must be > 0");
  if (dp.target_epsilon && *dp.target_epsilon <= 0) throw ConfigError("dp target_epsilon must be > 0");
  if (dp.delta <= 0 || dp.delta >= 1) throw ConfigError("dp delta must lie in (0, 1)");
  vfl::variant_from_string(variant);
  vfl::mask_mode_from_string(mask_mode);
  nn::optimizer_from_string(optimizer);
  gates::clamp_gradient_from_string(clamp_gradient);
  synthgen::topology_from_string(stage1.topology);
  synthgen::local_cv_from_string(stage1.local_cv);
  synthgen::global_cv_from_string(stage1.global_cv);
  if (stage1.max_modes < 1) throw ConfigError("stage1 max_modes must be >= 1");

  const std::string& p = dataset.preset;
  if (p.empty()) {
    if (dataset.path.empty()) throw ConfigError("dataset: path or preset required");
    if (!fs::exists(dataset.path)) throw DataError("missing dataset file: " + dataset.path);
    const auto schema = schema_for(dataset.path, dataset.schema);
    if (!fs::exists(schema)) throw DataError("missing dataset schema: " + schema.string());
  } else if (p == "usps") {
    const auto csv = usps_path();
    if (!fs::exists(csv)) throw DataError("missing dataset file: " + csv.string() + " (set ICAFS_USPS_CSV)");
    if (!fs::exists(schema_for(csv.string(), ""))) throw DataError("missing dataset schema for " + csv.string());
  } else if (p != "tpr_benchmark" && p != "gaussian_mixture_toy" && p != "rendered_digits") {
    throw ConfigError("unknown dataset preset: " + p);
  }
  if (!stage1.synthetic_path.empty() && !fs::exists(fs::path(stage1.synthetic_path) / "labels.csv")) {
    throw DataError("missing synthetic data in " + stage1.synthetic_path);
  }
}

ExperimentConfig config_from_json(const Json& j) {
  reject_unknown(j,
                 {"dataset", "K", "partition", "N", "beta", "gamma", "T", "lr", "batch", "stage1", "variant", "encoder",
                  "optimizer", "clamp_gradient", "mask_mode", "strict", "dp", "noise_fraction", "seed", "repeats",
                  "workers"},
                 "config");
  ExperimentConfig c;
  try {
    if (j.contains("dataset")) {
      const auto& d = j.at("dataset");
      reject_unknown(d, {"path", "schema", "preset", "n", "d", "relevant", "seed", "test_fraction"}, "dataset");
      read(d, "path", c.dataset.path);
      read(d, "schema", c.dataset.schema);
      read(d, "preset", c.dataset.preset);
      read(d, "n", c.dataset.n);
      read(d, "d", c.dataset.d);
      read(d, "relevant", c.dataset.relevant);
      read(d, "seed", c.dataset.seed);
      read(d, "test_fraction", c.dataset.test_fraction);
    }
    read(j, "K", c.K);
    if (j.contains("partition")) {
      const auto& p = j.at("partition");
      reject_unknown(p, {"strategy", "seed", "ranges"}, "partition");
      read(p, "strategy", c.partition.strategy);
      read(p, "seed", c.partition.seed);
      if (p.contains("ranges")) {
        for (const auto& r : p.at("ranges")) {
          if (!r.is_array() || r.size() != 2) throw ConfigError("partition range must be [begin, end]");
          c.partition.ranges.push_back({r[0].get<int>(), r[1].get<int>()});
        }
      }
    }
    read(j, "N", c.N);
    read(j, "beta", c.beta);
    read(j, "gamma", c.gamma);
    read(j, "T", c.T);
    read(j, "lr", c.lr);
    read(j, "batch", c.batch);
    if (j.contains("stage1")) {
      const auto& s = j.at("stage1");
      reject_unknown(s,
                     {"T1", "lambda_gp", "n_synth", "synthetic_path", "batch", "topology", "lr", "n_critic", "noise_dim",
                      "hidden", "channels", "ema_decay", "local_cv", "global_cv", "max_modes", "select_modes"},
                     "stage1");
      read(s, "T1", c.stage1.T1);
      read(s, "lambda_gp", c.stage1.lambda_gp);
      read(s, "n_synth", c.stage1.n_synth);
      read(s, "synthetic_path", c.stage1.synthetic_path);
      read(s, "batch", c.stage1.batch);
      read(s, "topology", c.stage1.topology);
      read(s, "lr", c.stage1.lr);
      read(s, "n_critic", c.stage1.n_critic);
      read(s, "noise_dim", c.stage1.noise_dim);
      read(s, "hidden", c.stage1.hidden);
      read(s, "channels", c.stage1.channels);
      read(s, "ema_decay", c.stage1.ema_decay);
      read(s, "local_cv", c.stage1.local_cv);
      read(s, "global_cv", c.stage1.global_cv);
      read(s, "max_modes", c.stage1.max_modes);
      read(s, "select_modes", c.stage1.select_modes);
    }
    read(j, "variant", c.variant);
    if (j.contains("encoder")) {
      const auto& e = j.at("encoder");
      reject_unknown(e, {"kind", "hidden", "output"}, "encoder");
      if (e.contains("kind")) c.encoder.kind = vfl::encoder_kind_from_string(e.at("kind").get<std::string>());
      read(e, "hidden", c.encoder.hidden);
      read(e, "output", c.encoder.output);
    }
    read(j, "optimizer", c.optimizer);
    read(j, "clamp_gradient", c.clamp_gradient);
    read(j, "mask_mode", c.mask_mode);
    read(j, "strict", c.strict);
    if (j.contains("dp")) {
      const auto& d = j.at("dp");
      if (d.is_string() && d.get<std::string>() == "none") {
        c.dp.enabled = false;
      } else {
        reject_unknown(d, {"enabled", "clip", "noise_multiplier", "target_epsilon", "delta"}, "dp");
        c.dp.enabled = true;
        read(d, "enabled", c.dp.enabled);
        read(d, "clip", c.dp.clip);
        read(d, "noise_multiplier", c.dp.noise_multiplier);
        if (d.contains("target_epsilon") && !d.at("target_epsilon").is_null()) {
          c.dp.target_epsilon = d.at("target_epsilon").get<double>();
        }
        read(d, "delta", c.dp.delta);
      }
    }
    read(j, "noise_fraction", c.noise_fraction);
    read(j, "seed", c.seed);
    read(j, "repeats", c.repeats);
    read(j, "workers", c.workers);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return c;
}

Json to_json(const ExperimentConfig& c) {
  Json j;
  Json d;
  d["path"] = c.dataset.path;
  d["schema"] = c.dataset.schema;
  d["preset"] = c.dataset.preset;
  d["n"] = c.dataset.n;
  d["d"] = c.dataset.d;
  d["relevant"] = c.dataset.relevant;
  d["seed"] = c.dataset.seed;
  d["test_fraction"] = c.dataset.test_fraction;
  j["dataset"] = d;
  j["K"] = c.K;
  Json p;
  p["strategy"] = c.partition.strategy;
  p["seed"] = c.partition.seed;
  p["ranges"] = Json::array();
  for (const auto& r : c.partition.ranges) p["ranges"].push_back({r.begin, r.end});
  j["partition"] = p;
  j["N"] = c.N;
  j["beta"] = c.beta;
  j["gamma"] = c.gamma;
  j["T"] = c.T;
  j["lr"] = c.lr;
  j["batch"] = c.batch;
  Json s;
  s["T1"] = c.stage1.T1;
  s["lambda_gp"] = c.stage1.lambda_gp;
  s["n_synth"] = c.stage1.n_synth;
  s["synthetic_path"] = c.stage1.synthetic_path;
  s["batch"] = c.stage1.batch;
  s["topology"] = c.stage1.topology;
  s["lr"] = c.stage1.lr;
  s["n_critic"] = c.stage1.n_critic;
  s["noise_dim"] = c.stage1.noise_dim;
  s["hidden"] = c.stage1.hidden;
  s["channels"] = c.stage1.channels;
  s["ema_decay"] = c.stage1.ema_decay;
  s["local_cv"] = c.stage1.local_cv;
  s["global_cv"] = c.stage1.global_cv;
  s["max_modes"] = c.stage1.max_modes;
  s["select_modes"] = c.stage1.select_modes;
  j["stage1"] = s;
  j["variant"] = c.variant;
  j["encoder"] = {{"kind", vfl::to_string(c.encoder.kind)}, {"hidden", c.encoder.hidden}, {"output", c.encoder.output}};
  j["optimizer"] = c.optimizer;
  j["clamp_gradient"] = c.clamp_gradient;
  j["mask_mode"] = c.mask_mode;
  j["strict"] = c.strict;
  Json dp;
  dp["enabled"] = c.dp.enabled;
  dp["clip"] = c.dp.clip;
  dp["noise_multiplier"] = c.dp.noise_multiplier;
  dp["target_epsilon"] = c.dp.target_epsilon ? Json(*c.dp.target_epsilon) : Json(nullptr);
  dp["delta"] = c.dp.delta;
  j["dp"] = dp;
  j["noise_fraction"] = c.noise_fraction;
  j["seed"] = c.seed;
  j["repeats"] = c.repeats;
  j["workers"] = c.workers;
  return j;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read config: " + path.string());
  Json j;
  try {
    j = Json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

vfl::TrainConfig train_config(const ExperimentConfig& c, std::uint64_t seed) {
  vfl::TrainConfig t;
  t.epochs = c.T;
  t.batch = c.batch;
  t.selectors = c.N;
  t.beta = c.beta;
  t.gamma = c.gamma;
  t.lr = c.lr;
  t.optimizer = nn::optimizer_from_string(c.optimizer);
  t.variant = vfl::variant_from_string(c.variant);
  t.encoder = c.encoder;
  t.clamp = gates::clamp_gradient_from_string(c.clamp_gradient);
  t.strict = c.strict;
  t.mask_mode = vfl::mask_mode_from_string(c.mask_mode);
  t.dp.enabled = c.dp.enabled;
  t.dp.clip = c.dp.clip;
  t.dp.noise_multiplier = c.dp.noise_multiplier;
  t.seed = seed;
  t.workers = c.workers;
  return t;
}

synthgen::Stage1Config stage1_config(const ExperimentConfig& c, std::uint64_t seed) {
  synthgen::Stage1Config s;
  s.iterations = c.stage1.T1;
  s.batch = c.stage1.batch;
  s.n_synth = c.stage1.n_synth;
  s.gan.topology = synthgen::topology_from_string(c.stage1.topology);
  s.gan.lambda_gp = c.stage1.lambda_gp;
  s.gan.adam.lr = c.stage1.lr;
  s.gan.n_critic = c.stage1.n_critic;
  s.gan.noise_dim = c.stage1.noise_dim;
  s.gan.hidden = c.stage1.hidden;
  s.gan.channels = c.stage1.channels;
  s.gan.ema_decay = c.stage1.ema_decay;
  s.local_cv = synthgen::local_cv_from_string(c.stage1.local_cv);
  s.global_cv = synthgen::global_cv_from_string(c.stage1.global_cv);
  s.gmm.max_modes = c.stage1.max_modes;
  s.gmm.select_modes = c.stage1.select_modes;
  s.seed = seed;
  s.workers = c.workers;
  return s;
}

// ---- data -------------------------------------------------------------------------

PreparedData prepare_data(const ExperimentConfig& c) {
  c.validate();
  return staged("load", [&] {
    data::TabularDataset ds;
    PreparedData out;
    nn::Rng rng = nn::derive_rng(c.dataset.seed, {0x71});
    const std::string& p = c.dataset.preset;
    if (p.empty()) {
      ds = data::load_table(c.dataset.path, schema_for(c.dataset.path, c.dataset.schema));
    } else if (p == "usps") {
      const auto csv = usps_path();
      ds = data::load_table(csv, schema_for(csv.string(), ""));
    } else if (p == "tpr_benchmark") {
      std::vector<int> relevant = c.dataset.relevant;
      if (relevant.empty()) relevant = {0, 1, 2, 3};
      auto b = data::make_tpr_benchmark(c.dataset.n, c.dataset.d, relevant, rng);
      ds = std::move(b.ds);
      out.relevant = b.relevant;
    } else if (p == "gaussian_mixture_toy") {
      ds = data::gaussian_mixture_toy(c.dataset.n, rng);
    } else {
      ds = data::rendered_digits(c.dataset.n, rng);
    }
    if (c.noise_fraction > 0) {
      nn::Rng nrng = nn::derive_rng(c.dataset.seed, {0x72});
      ds = data::inject_noise_features(ds, c.noise_fraction, nrng);
    }
    for (const auto& col : ds.columns) out.column_names.push_back(col.name);
    auto tt = data::stratified_split(ds, c.dataset.test_fraction, c.dataset.seed);
    data::PartitionLayout layout = c.partition.strategy == "explicit"
                                       ? data::explicit_layout(static_cast<int>(ds.cols()), c.partition.ranges)
                                       : data::equal_random_layout(static_cast<int>(ds.cols()), c.K, c.partition.seed);
    out.train = data::vertical_partition(tt.train, layout);
    out.test = data::vertical_partition(tt.test, layout);
    return out;
  });
}

// ---- runs -------------------------------------------------------------------------

namespace {

RunRecord run_once(const ExperimentConfig& c, const PreparedData& d, std::uint64_t seed, const RunOptions& options,
                   const std::string& tag) {
  RunRecord rec;
  rec.seed = seed;
  vfl::MessageLog log(false);
  synthgen::SyntheticDataset synth = staged("stage1", [&] {
    if (!c.stage1.synthetic_path.empty()) return synthgen::load_synthetic(c.stage1.synthetic_path);
    if (c.T == 0) return synthgen::SyntheticDataset{};
    auto r = synthgen::run_stage1(d.train, stage1_config(c, seed), &log);
    rec.stage1_seconds = r.seconds;
    return r.synthetic;
  });
  const auto tc = train_config(c, seed);
  auto result = staged("train", [&] { return vfl::train(d.train, synth, tc, &log); });
  auto eval = staged("evaluate", [&] {
    return vfl::evaluate(result.model, d.test, d.relevant.empty() ? nullptr : &d.relevant, tc.mask_mode);
  });
  rec.accuracy = eval.accuracy;
  rec.tpr = eval.tpr;
  if (c.encoder.kind != vfl::EncoderKind::mlp) {
    int noise = 0, clean = 0, noise_sel = 0, clean_sel = 0;
    for (const auto& b : d.train.blocks) {
      for (std::size_t j = 0; j < b.columns.size(); ++j) {
        const bool sel = std::binary_search(eval.selected_columns.begin(), eval.selected_columns.end(),
                                            b.source_columns[j]);
        if (b.columns[j].noise) {
          ++noise;
          noise_sel += sel;
        } else {
          ++clean;
          clean_sel += sel;
        }
      }
    }
    if (noise > 0) rec.noise_selection_rate = static_cast<double>(noise_sel) / noise;
    if (clean > 0) rec.clean_selection_rate = static_cast<double>(clean_sel) / clean;
  }
  for (const auto& s : result.stage2) rec.loss_syn.push_back(s.loss);
  for (const auto& s : result.stage3) rec.loss_real.push_back(s.loss);
  rec.stage2_seconds = result.stage2_seconds;
  rec.stage3_seconds = result.stage3_seconds;
  rec.message_bytes = log.total_bytes();
  for (const auto& [k, v] : log.bytes_by_kind()) rec.bytes_by_kind.emplace_back(k, v);
  vfl::AuditOptions audit;
  audit.strict = c.strict;
  rec.violations = vfl::audit_messages(log, audit).size();
  if (!options.out_dir.empty()) {
    fs::create_directories(options.out_dir);
    const std::string stem = tag + "_seed" + std::to_string(seed);
    const auto sel_path = options.out_dir / (stem + "_selection.csv");
    gates::write_selection_csv(vfl::model_selection(result.model, d.train), result.model.server.slices, sel_path);
    rec.selection_csv = sel_path.string();
    if (options.keep_checkpoints) {
      const auto ck = options.out_dir / (stem + ".ckpt");
      result.model.save(ck);
      rec.checkpoint = ck.string();
      log.write_ndjson(options.out_dir / (stem + "_messages.ndjson"));
    }
  }
  return rec;
}

Cell run_cell(const ExperimentConfig& c, const PreparedData& d, Json labels, const RunOptions& options) {
  Cell cell;
  cell.labels = std::move(labels);
  const std::string tag = cell_tag(cell.labels);
  for (int r = 0; r < c.repeats; ++r) {
    cell.runs.push_back(run_once(c, d, c.seed + static_cast<std::uint64_t>(r), options, tag));
  }
  return cell;
}

Json base_fingerprint(const ExperimentConfig& c) {
  Json f;
  f["config"] = to_json(c);
  return f;
}

}  // namespace

double Cell::mean_accuracy() const {
  if (runs.empty()) throw DataError("no runs");
  double s = 0;
  for (const auto& r : runs) s += r.accuracy;
  return s / static_cast<double>(runs.size());
}

double Cell::std_accuracy() const {
  const double m = mean_accuracy();
  double s = 0;
  for (const auto& r : runs) s += (r.accuracy - m) * (r.accuracy - m);
  return std::sqrt(s / static_cast<double>(runs.size()));
}

std::optional<double> Cell::mean_tpr() const {
  double s = 0;
  int n = 0;
  for (const auto& r : runs) {
    if (r.tpr) {
      s += *r.tpr;
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return s / n;
}

Report run_experiment(const ExperimentConfig& config, const RunOptions& options) {
  const auto data = prepare_data(config);
  Report r;
  r.kind = "experiment";
  r.fingerprint = base_fingerprint(config);
  r.cells.push_back(run_cell(config, data, Json::object({{"variant", config.variant}}), options));
  return r;
}

Report run_ablation(const ExperimentConfig& base, const RunOptions& options) {
  const auto data = prepare_data(base);
  Report r;
  r.kind = "ablation";
  r.fingerprint = base_fingerprint(base);
  for (const char* v : {"icafs", "fixed-temp", "embedding-mlp", "no-fs"}) {
    ExperimentConfig c = base;
    c.variant = v;
    r.cells.push_back(run_cell(c, data, Json::object({{"variant", v}}), options));
  }
  return r;
}

Report run_sweep(const ExperimentConfig& config, const std::vector<int>& Ns, const std::vector<double>& betas,
                 const RunOptions& options) {
  if (Ns.empty() || betas.empty()) throw ConfigError("sweep grids must be non-empty");
  const auto data = prepare_data(config);
  Report r;
  r.kind = "sweep";
  r.fingerprint = base_fingerprint(config);
  for (int n : Ns) {
    for (double b : betas) {
      ExperimentConfig c = config;
      c.N = n;
      c.beta = b;
      c.validate();
      r.cells.push_back(run_cell(c, data, Json::object({{"N", n}, {"beta", b}}), options));
    }
  }
  return r;
}

Report run_noise_suite(const ExperimentConfig& config, const std::vector<double>& fractions,
                       const RunOptions& options) {
  if (fractions.empty()) throw ConfigError("noise suite needs at least one fraction");
  for (double f : fractions) {
    if (f <= 0 || f >= 1) throw ConfigError("noise fraction must lie in (0, 1)");
  }
  Report r;
  r.kind = "noise";
  r.fingerprint = base_fingerprint(config);
  for (double f : fractions) {
    ExperimentConfig c = config;
    c.noise_fraction = f;
    const auto data = prepare_data(c);
    Cell cell = run_cell(c, data, Json::object({{"noise_fraction", f}}), options);
    int columns = 0;
    for (const auto& b : data.train.blocks) columns += static_cast<int>(b.width());
    cell.extra["columns"] = columns;
    double ns = 0, cs = 0;
    int n = 0;
    for (const auto& run : cell.runs) {
      if (run.noise_selection_rate && run.clean_selection_rate) {
        ns += *run.noise_selection_rate;
        cs += *run.clean_selection_rate;
        ++n;
      }
    }
    if (n > 0) {
      cell.extra["noise_selection_rate"] = ns / n;
      cell.extra["clean_selection_rate"] = cs / n;
    }
    r.cells.push_back(std::move(cell));
  }
  return r;
}

double rdp_order(double q, double sigma, int alpha) {
  if (alpha < 2) throw ConfigError("rdp order must be >= 2");
  if (q == 0) return 0;
  if (q == 1) return alpha / (2 * sigma * sigma);
  double acc = -std::numeric_limits<double>::infinity();
  for (int k = 0; k <= alpha; ++k) {
    const double log_binom = std::lgamma(alpha + 1.0) - std::lgamma(k + 1.0) - std::lgamma(alpha - k + 1.0);
    const double term = log_binom + (alpha - k) * std::log1p(-q) + k * std::log(q) +
                        (static_cast<double>(k) * k - k) / (2 * sigma * sigma);
    acc = log_add(acc, term);
  }
  return acc / (alpha - 1);
}

double rdp_epsilon(double q, double sigma, long steps, double delta) {
  if (q < 0 || q > 1) throw ConfigError("sampling rate must lie in [0, 1]");
  if (sigma <= 0) return std::numeric_limits<double>::infinity();
  if (steps <= 0) return 0;
  double best = std::numeric_limits<double>::infinity();
  for (int alpha = 2; alpha <= 256; ++alpha) {
    const double eps = static_cast<double>(steps) * rdp_order(q, sigma, alpha) + std::log(1.0 / delta) / (alpha - 1);
    best = std::min(best, eps);
  }
  return best;
}

std::optional<double> calibrate_sigma(double q, long steps, double epsilon, double delta) {
  constexpr double kMaxSigma = 1e3;
  if (rdp_epsilon(q, kMaxSigma, steps, delta) > epsilon) return std::nullopt;
  double lo = 1e-3, hi = kMaxSigma;
  if (rdp_epsilon(q, lo, steps, delta) <= epsilon) return lo;
  for (int i = 0; i < 100 && hi - lo > 1e-6 * hi; ++i) {
    const double mid = 0.5 * (lo + hi);
    (rdp_epsilon(q, mid, steps, delta) > epsilon ? lo : hi) = mid;
  }
  return hi;
}

Report run_dp_suite(const ExperimentConfig& config, const std::vector<double>& epsilons, double delta,
                    const RunOptions& options) {
  if (epsilons.empty()) throw ConfigError("dp suite needs at least one budget");
  if (delta <= 0 || delta >= 1) throw ConfigError("dp delta must lie in (0, 1)");
  const auto data = prepare_data(config);
  const double n = static_cast<double>(data.train.rows());
  const double q = std::min(1.0, config.batch / n);
  const long steps = static_cast<long>(config.T) * static_cast<long>(std::ceil(n / config.batch));
  Report r;
  r.kind = "dp";
  r.fingerprint = base_fingerprint(config);
  r.fingerprint["sampling_rate"] = q;
  r.fingerprint["steps"] = steps;
  r.fingerprint["delta"] = delta;
  for (double eps : epsilons) {
    if (!(eps > 0)) throw ConfigError("dp budgets must be > 0");
    ExperimentConfig c = config;
    Json labels = Json::object({{"epsilon", std::isinf(eps) ? Json("inf") : Json(eps)}});
    Json extra = Json::object();
    if (std::isinf(eps)) {
      c.dp.enabled = false;
    } else {
      const auto sigma = calibrate_sigma(q, steps, eps, delta);
      if (!sigma) {
        Cell cell;
        cell.labels = labels;
        cell.extra["unreachable"] = true;
        cell.extra["detail"] = "epsilon not reachable within the sigma search bound for " + std::to_string(steps) +
                               " steps";
        r.cells.push_back(std::move(cell));
        continue;
      }
      c.dp.enabled = true;
      c.dp.noise_multiplier = *sigma;
      c.dp.target_epsilon = eps;
      c.dp.delta = delta;
      extra["sigma"] = *sigma;
      extra["epsilon_spent"] = rdp_epsilon(q, *sigma, steps, delta);
    }
    Cell cell = run_cell(c, data, labels, options);
    cell.extra = extra;
    r.cells.push_back(std::move(cell));
  }
  return r;
}

// ---- reports ----------------------------------------------------------------------

ReportFormat report_format_from_string(const std::string& s) {
  if (s == "json") return ReportFormat::json;
  if (s == "csv") return ReportFormat::csv;
  throw ConfigError("unknown report format: " + s);
}

Json report_json(const Report& r) {
  Json j;
  j["kind"] = r.kind;
  j["fingerprint"] = r.fingerprint;
  j["cells"] = Json::array();
  for (const auto& c : r.cells) {
    Json cj;
    cj["labels"] = c.labels;
    cj["extra"] = c.extra;
    if (!c.runs.empty()) {
      cj["mean_accuracy"] = c.mean_accuracy();
      cj["std_accuracy"] = c.std_accuracy();
      const auto tpr = c.mean_tpr();
      cj["mean_tpr"] = tpr ? Json(*tpr) : Json(nullptr);
    }
    cj["runs"] = Json::array();
    for (const auto& run : c.runs) {
      Json rj;
      rj["seed"] = run.seed;
      rj["accuracy"] = run.accuracy;
      rj["tpr"] = run.tpr ? Json(*run.tpr) : Json(nullptr);
      rj["noise_selection_rate"] = run.noise_selection_rate ? Json(*run.noise_selection_rate) : Json(nullptr);
      rj["clean_selection_rate"] = run.clean_selection_rate ? Json(*run.clean_selection_rate) : Json(nullptr);
      rj["loss_syn"] = run.loss_syn;
      rj["loss_real"] = run.loss_real;
      rj["seconds"] = {{"stage1", run.stage1_seconds}, {"stage2", run.stage2_seconds}, {"stage3", run.stage3_seconds}};
      rj["message_bytes"] = run.message_bytes;
      Json by_kind = Json::object();
      for (const auto& [k, v] : run.bytes_by_kind) by_kind[k] = v;
      rj["bytes_by_kind"] = by_kind;
      rj["violations"] = run.violations;
      rj["selection_csv"] = run.selection_csv;
      rj["checkpoint"] = run.checkpoint;
      cj["runs"].push_back(rj);
    }
    j["cells"].push_back(cj);
  }
  return j;
}

namespace {

std::optional<double> opt_double(const Json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

}  // namespace

Report report_from_json(const Json& j) {
  Report r;
  try {
    r.kind = j.at("kind").get<std::string>();
    r.fingerprint = j.at("fingerprint");
    for (const auto& cj : j.at("cells")) {
      Cell c;
      c.labels = cj.at("labels");
      c.extra = cj.at("extra");
      for (const auto& rj : cj.at("runs")) {
        RunRecord run;
        run.seed = rj.at("seed").get<std::uint64_t>();
        run.accuracy = rj.at("accuracy").get<double>();
        run.tpr = opt_double(rj, "tpr");
        run.noise_selection_rate = opt_double(rj, "noise_selection_rate");
        run.clean_selection_rate = opt_double(rj, "clean_selection_rate");
        run.loss_syn = rj.at("loss_syn").get<std::vector<double>>();
        run.loss_real = rj.at("loss_real").get<std::vector<double>>();
        run.stage1_seconds = rj.at("seconds").at("stage1").get<double>();
        run.stage2_seconds = rj.at("seconds").at("stage2").get<double>();
        run.stage3_seconds = rj.at("seconds").at("stage3").get<double>();
        run.message_bytes = rj.at("message_bytes").get<std::uint64_t>();
        for (const auto& [k, v] : rj.at("bytes_by_kind").items()) run.bytes_by_kind.emplace_back(k, v.get<std::uint64_t>());
        run.violations = rj.at("violations").get<std::size_t>();
        run.selection_csv = rj.at("selection_csv").get<std::string>();
        run.checkpoint = rj.at("checkpoint").get<std::string>();
        c.runs.push_back(std::move(run));
      }
      r.cells.push_back(std::move(c));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("report: ") + e.what());
  }
  return r;
}

AccuracyTable accuracy_table(const Report& r) {
  AccuracyTable t;
  if (r.cells.empty()) throw DataError("no runs");
  for (const auto& [k, v] : r.cells.front().labels.items()) t.label_columns.push_back(k);
  for (const auto& c : r.cells) {
    if (c.runs.empty() && !c.extra.contains("unreachable")) throw DataError("no runs");
    std::vector<std::string> row;
    for (const auto& k : t.label_columns) {
      if (!c.labels.contains(k)) throw DataError("report cells have different label columns");
      row.push_back(label_text(c.labels.at(k)));
    }
    t.labels.push_back(std::move(row));
    t.runs.push_back(static_cast<int>(c.runs.size()));
    t.mean.push_back(c.runs.empty() ? std::nan("") : c.mean_accuracy());
    t.std.push_back(c.runs.empty() ? std::nan("") : c.std_accuracy());
  }
  return t;
}

std::string report_csv(const Report& r) {
  const AccuracyTable t = accuracy_table(r);
  std::ostringstream os;
  for (const auto& k : t.label_columns) os << k << ",";
  os << "runs,mean_accuracy,std_accuracy,mean_tpr\n";
  for (std::size_t i = 0; i < t.labels.size(); ++i) {
    for (const auto& v : t.labels[i]) {
      if (v.find(',') != std::string::npos) throw DataError("label value contains a comma: " + v);
      os << v << ",";
    }
    const auto tpr = r.cells[i].mean_tpr();
    os << t.runs[i] << "," << (t.runs[i] ? format_double(t.mean[i]) : "") << ","
       << (t.runs[i] ? format_double(t.std[i]) : "") << "," << (tpr ? format_double(*tpr) : "") << "\n";
  }
  return os.str();
}

void emit_report(const Report& r, ReportFormat format, const fs::path& path) {
  for (const auto& c : r.cells) {
    if (c.runs.empty() && !c.extra.contains("unreachable")) throw DataError("no runs");
  }
  if (r.cells.empty()) throw DataError("no runs");
  const std::string text = format == ReportFormat::json ? report_json(r).dump(2) + "\n" : report_csv(r);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write report: " + path.string());
  out << text;
  if (!out) throw DataError("write failed: " + path.string());
}

AccuracyTable read_accuracy_table(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read report: " + path.string());
  AccuracyTable t;
  if (path.extension() == ".json") {
    Json j = Json::parse(in);
    const auto& cells = j.at("cells");
    if (cells.empty()) throw DataError("no runs");
    for (const auto& [k, v] : cells.front().at("labels").items()) t.label_columns.push_back(k);
    for (const auto& c : cells) {
      std::vector<std::string> row;
      for (const auto& k : t.label_columns) row.push_back(label_text(c.at("labels").at(k)));
      t.labels.push_back(std::move(row));
      t.runs.push_back(static_cast<int>(c.at("runs").size()));
      t.mean.push_back(c.contains("mean_accuracy") ? c.at("mean_accuracy").get<double>() : std::nan(""));
      t.std.push_back(c.contains("std_accuracy") ? c.at("std_accuracy").get<double>() : std::nan(""));
    }
    return t;
  }
  std::string line;
  if (!std::getline(in, line)) throw DataError("empty report: " + path.string());
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) header.push_back(f);
  }
  if (header.size() < 4) throw DataError("report csv: bad header");
  t.label_columns.assign(header.begin(), header.end() - 4);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string v;
    while (std::getline(ss, v, ',')) f.push_back(v);
    while (f.size() < header.size()) f.emplace_back();
    if (f.size() != header.size()) throw DataError("report csv: bad row");
    const std::size_t L = t.label_columns.size();
    t.labels.emplace_back(f.begin(), f.begin() + static_cast<std::ptrdiff_t>(L));
    t.runs.push_back(std::stoi(f[L]));
    t.mean.push_back(f[L + 1].empty() ? std::nan("") : std::stod(f[L + 1]));
    t.std.push_back(f[L + 2].empty() ? std::nan("") : std::stod(f[L + 2]));
  }
  return t;
}

}  // namespace icafs::bench
