// mtbd: command-line driver for the multi-turn backdoor experiments.
//
//   mtbd run --config configs/rare_5.json --out runs/rare_5
//   mtbd table --config configs/rare_5.json --out runs/rare_5
#include <filesystem>
#include <functional>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mtbd/pipeline.hpp"
#include "mtbd/report.hpp"

namespace fs = std::filesystem;
using namespace mtbd;

namespace {

std::string one_line(std::string s) {
  for (char& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

int fail(const std::string& kind, const std::string& msg) {
  std::cerr << "error kind=" << kind << " msg=\"" << one_line(msg) << "\"" << std::endl;
  return kind == "usage" ? 2 : 1;
}

void for_each_run(const std::string& config, const std::string& out, const std::function<void(Pipeline&)>& fn) {
  const auto cfgs = load_experiment_configs(config);
  for (auto& [cfg, dir] : run_dirs(cfgs, out)) {
    Pipeline p(cfg, dir);
    fn(p);
  }
}

void write_table(const std::string& config, const std::string& out) {
  std::vector<TableRow> rows;
  for (const auto& [cfg, dir] : run_dirs(load_experiment_configs(config), out))
    for (auto& r : Pipeline::table_rows_of(dir, cfg)) rows.push_back(std::move(r));
  const std::string table = emit_table(rows);
  fs::create_directories(out);
  write_text(fs::path(out) / "table.txt", table);
  std::cout << table;
}

void write_plotdata(const std::string& config, const std::string& out) {
  std::vector<TableRow> rows;
  std::vector<TraceRecord> traces;
  for (const auto& [cfg, dir] : run_dirs(load_experiment_configs(config), out)) {
    for (auto& r : Pipeline::table_rows_of(dir, cfg)) rows.push_back(std::move(r));
    for (auto& t : Pipeline::traces_of(dir)) traces.push_back(std::move(t));
  }
  for (const auto& p : emit_plotdata(traces, rows, fs::path(out) / "plots")) std::cout << p.string() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Distributed multi-turn backdoor experiments on a tiny transformer"};
  app.require_subcommand(1);

  std::string config, out;
  auto add = [&](const std::string& name, const std::string& help) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config, "Experiment config (JSON object, or a list for a grid)")
        ->required()
        ->check(CLI::ExistingFile);
    sub->add_option("--out", out, "Run directory")->required();
    return sub;
  };

  struct Command {
    CLI::App* sub;
    std::function<void()> action;
  };
  auto stage = [&](Stage s) { return [&, s] { for_each_run(config, out, [s](Pipeline& p) { p.ensure(s); }); }; };
  std::vector<Command> commands = {
      {add("gen-corpus", "Generate train/test/calibration corpora and the vocabulary"), stage(Stage::corpus)},
      {add("search-trigger", "Fix or search the distributed trigger"), stage(Stage::trigger)},
      {add("poison", "Plan and apply poisoning"), stage(Stage::poison)},
      {add("train", "Train the model on the poisoned corpus"), stage(Stage::train)},
      {add("eval", "Greedy evaluation over every test variant"), stage(Stage::eval)},
      {add("defend-eval", "Evaluate under the enabled defenses"), stage(Stage::defend)},
      {add("table", "Render the results table"), [&] { write_table(config, out); }},
      {add("plotdata", "Write plot-ready CSV files"), [&] { write_plotdata(config, out); }},
      {add("run", "Run every stage, then write the table and plot data"),
       [&] {
         for_each_run(config, out, [](Pipeline& p) { p.ensure(Stage::metrics); });
         write_table(config, out);
         write_plotdata(config, out);
       }},
  };

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what());
  }

  try {
    for (auto& c : commands)
      if (c.sub->parsed()) c.action();
  } catch (const Error& e) {
    return fail(e.kind(), e.what());
  } catch (const nlohmann::json::exception& e) {
    return fail("parse", e.what());
  } catch (const std::exception& e) {
    return fail("internal", e.what());
  }
  return 0;
}
