#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "icafs/bench/bench.hpp"

namespace fs = std::filesystem;
using namespace icafs;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out_dir = "out";
  std::optional<int> workers;
};

bench::ExperimentConfig resolve(const Globals& g) {
  if (g.config.empty()) throw ConfigError("--config is required");
  auto c = bench::load_config(g.config);
  if (g.seed) c.seed = *g.seed;
  if (g.workers) c.workers = *g.workers;
  c.validate();
  return c;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

void emit_both(const bench::Report& r, const fs::path& dir, const std::string& stem) {
  bench::emit_report(r, bench::ReportFormat::json, dir / (stem + ".json"));
  bench::emit_report(r, bench::ReportFormat::csv, dir / (stem + ".csv"));
  std::cout << bench::report_csv(r);
}

std::vector<double> parse_budgets(const std::vector<std::string>& items) {
  std::vector<double> out;
  for (const auto& s : items) {
    if (s == "inf" || s == "none") {
      out.push_back(std::numeric_limits<double>::infinity());
    } else {
      out.push_back(std::stod(s));
    }
  }
  return out;
}

int cmd_synth(const Globals& g) {
  const auto c = resolve(g);
  const auto data = bench::prepare_data(c);
  vfl::MessageLog log(false);
  auto r = synthgen::run_stage1(data.train, bench::stage1_config(c, c.seed), &log);
  const fs::path out = g.out_dir;
  synthgen::save_synthetic(r.synthetic, out / "synthetic");
  write_text(out / "fidelity.json", r.fidelity.to_json().dump(2) + "\n");
  log.write_ndjson(out / "stage1_messages.ndjson");
  std::cout << r.fidelity.to_json().dump(2) << "\n";
  return 0;
}

int cmd_train(const Globals& g) {
  const auto c = resolve(g);
  bench::RunOptions o;
  o.out_dir = g.out_dir;
  o.keep_checkpoints = true;
  const auto r = bench::run_experiment(c, o);
  emit_both(r, g.out_dir, "report");
  for (const auto& run : r.cells.front().runs) {
    if (run.violations > 0) {
      std::cerr << "audit: " << run.violations << " violations in seed " << run.seed << "\n";
      return 1;
    }
  }
  return 0;
}

int cmd_eval(const Globals& g, const std::string& checkpoint) {
  const auto c = resolve(g);
  const auto data = bench::prepare_data(c);
  const auto tc = bench::train_config(c, c.seed);
  const auto model = vfl::load_model(checkpoint, data.train, tc);
  const auto e = vfl::evaluate(model, data.test, data.relevant.empty() ? nullptr : &data.relevant, tc.mask_mode);
  bench::Json j;
  j["checkpoint"] = checkpoint;
  j["accuracy"] = e.accuracy;
  j["per_class"] = e.per_class;
  j["tpr"] = e.tpr ? bench::Json(*e.tpr) : bench::Json(nullptr);
  j["selected_embeddings"] = e.selection.ensemble;
  j["selected_columns"] = e.selected_columns;
  write_text(fs::path(g.out_dir) / "eval.json", j.dump(2) + "\n");
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_report(const std::string& input, const std::string& format, const std::string& output) {
  std::ifstream in(input);
  if (!in) throw DataError("cannot read report: " + input);
  const auto r = bench::report_from_json(bench::Json::parse(in));
  bench::emit_report(r, bench::report_format_from_string(format), output);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Vertical federated feature selection with synthetic-data gates"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  std::uint64_t seed = 0;
  int workers = 1;
  app.add_option("--config", g.config, "Experiment config (JSON)");
  auto* seed_opt = app.add_option("--seed", seed, "Master seed, overrides the config");
  app.add_option("--out-dir", g.out_dir, "Output directory")->capture_default_str();
  auto* workers_opt = app.add_option("--workers", workers, "Worker threads for party rounds")->check(CLI::PositiveNumber);

  app.add_subcommand("synth", "Run Stage 1 and write synthetic client blocks");
  app.add_subcommand("train", "Train and evaluate over the configured repeats");
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
  std::string checkpoint;
  eval->add_option("--checkpoint", checkpoint, "Checkpoint written by train")->required();
  app.add_subcommand("ablate", "Compare the four selection variants");
  auto* sweep = app.add_subcommand("sweep", "Grid over N and beta");
  std::vector<int> Ns{1, 2, 5, 10, 20};
  std::vector<double> betas{0.0, 0.6, 1.2, 2.4};
  sweep->add_option("--N", Ns, "Selector counts")->delimiter(',')->capture_default_str();
  sweep->add_option("--beta", betas, "Penalty weights")->delimiter(',')->capture_default_str();
  auto* noise = app.add_subcommand("noise", "Accuracy under injected Gaussian noise features");
  std::vector<double> fractions{0.2, 0.33, 0.5};
  noise->add_option("--fractions", fractions, "Noise fractions of the final column count")->delimiter(',')->capture_default_str();
  auto* dp = app.add_subcommand("dp", "Accuracy at DP-SGD privacy budgets");
  std::vector<std::string> budgets{"inf", "10", "5"};
  double delta = 1e-5;
  dp->add_option("--epsilons", budgets, "Budgets; inf for the non-private run")->delimiter(',')->capture_default_str();
  dp->add_option("--delta", delta, "Target delta")->capture_default_str();
  auto* report = app.add_subcommand("report", "Re-emit a JSON report as json or csv");
  std::string input, format = "csv", output;
  report->add_option("--input", input, "Report JSON")->required();
  report->add_option("--format", format, "json or csv")->check(CLI::IsMember({"json", "csv"}))->capture_default_str();
  report->add_option("--output", output, "Destination path")->required();

  CLI11_PARSE(app, argc, argv);
  if (*seed_opt) g.seed = seed;
  if (*workers_opt) g.workers = workers;

  try {
    const auto* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();
    const fs::path out = g.out_dir;
    bench::RunOptions o;
    o.out_dir = out;
    if (name == "synth") return cmd_synth(g);
    if (name == "train") return cmd_train(g);
    if (name == "eval") return cmd_eval(g, checkpoint);
    if (name == "report") return cmd_report(input, format, output);
    const auto c = resolve(g);
    if (name == "ablate") emit_both(bench::run_ablation(c, o), out, "ablation");
    if (name == "sweep") emit_both(bench::run_sweep(c, Ns, betas, o), out, "sweep");
    if (name == "noise") emit_both(bench::run_noise_suite(c, fractions, o), out, "noise");
    if (name == "dp") {
      const auto r = bench::run_dp_suite(c, parse_budgets(budgets), delta, o);
      emit_both(r, out, "dp");
      for (const auto& cell : r.cells) {
        if (cell.extra.contains("unreachable")) std::cerr << "dp: " << cell.extra["detail"].get<std::string>() << "\n";
      }
    }
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
