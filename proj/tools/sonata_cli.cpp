// sonata: generate traces, train query plans, replay them and compare baselines.
//
// Exit codes: 0 success, 2 no feasible plan, 1 any other error.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "sonata/runtime.hpp"
#include "sonata/tracegen.hpp"

namespace fs = std::filesystem;
using namespace sonata;

namespace {

constexpr int kOk = 0;
constexpr int kError = 1;
constexpr int kInfeasible = 2;

// Prefix parse errors with the file they came from.
template <typename F>
auto with_file(const std::string& path, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const ParseError& e) {
    throw Error(path + ": " + e.what());
  }
}

int gen_trace(const std::string& spec_path, const std::string& out, std::string truth) {
  auto spec = with_file(spec_path, [&] { return parse_tracegen_spec(read_file(spec_path)); });
  auto g = generate_trace(spec);
  std::ostringstream trace, t;
  write_trace(trace, g.trace);
  write_truth(t, g.truth);
  if (truth.empty()) truth = out + ".truth.csv";
  write_file(out, trace.str());
  write_file(truth, t.str());
  std::cout << "packets=" << g.trace.packets.size() << " anomalies=" << g.truth.size() << '\n';
  return kOk;
}

struct Inputs {
  Config config;
  QueryWorkload workload;
};

Inputs load_inputs(const std::string& queries, const std::string& trace_path, const std::string& config) {
  Inputs in;
  in.config = with_file(config, [&] { return parse_config(read_file(config)); });
  auto trace = with_file(trace_path, [&] { return load_trace(trace_path); });
  in.workload = with_file(queries, [&] { return load_workload(read_file(queries), trace, in.config.window); });
  return in;
}

int plan(const std::string& queries, const std::string& trace, const std::string& config, const std::string& out) {
  auto in = load_inputs(queries, trace, config);
  auto outcomes = plan_workload(in.workload, in.config);
  int rc = kOk;
  for (const auto& o : outcomes) {
    if (o.plan) {
      fs::path file = fs::path(out) / plan_file_name(o.query);
      write_file(file, plan_text(*o.plan));
      std::cout << o.query << ": " << o.plan->steps.size() << " interval(s), alpha=" << format_number(o.plan->alpha)
                << " -> " << file.string() << '\n';
    } else {
      std::cerr << o.query << ": infeasible, binding constraint " << o.binding << " (" << o.message << ")\n";
      rc = kInfeasible;
    }
  }
  return rc;
}

int run(const std::string& plans_dir, const std::string& trace_path, const std::string& out, std::size_t skip) {
  auto plans = read_plan_dir(plans_dir);
  auto trace = with_file(trace_path, [&] { return load_trace(trace_path); });
  auto exec = load_exec(plans, trace.schema);
  auto windows = trace_windows(trace, plans.front().config.window);
  if (skip >= windows.size()) throw ArgumentError("--skip leaves no windows to replay");
  windows.erase(windows.begin(), windows.begin() + static_cast<std::ptrdiff_t>(skip));
  std::size_t longest = 0;
  for (const auto& p : plans) longest = std::max(longest, p.steps.size());
  if (longest > windows.size())
    throw ArgumentError("plans need " + std::to_string(longest) + " windows, trace has " +
                        std::to_string(windows.size()));
  auto metrics = replay(exec, windows, plans.front().config.seed, skip);
  std::ostringstream csv;
  write_metrics_csv(csv, metrics);
  write_file(out, csv.str());
  write_summary(std::cout, metrics);
  return kOk;
}

int baselines(const std::string& queries, const std::string& trace, const std::string& config, const std::string& out) {
  auto in = load_inputs(queries, trace, config);
  auto runs = run_baselines(in.workload, in.config);
  std::ostringstream table;
  write_baseline_table(table, runs);
  if (out.empty()) {
    std::cout << table.str();
  } else {
    write_file(out, table.str());
    std::cout << table.str();
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Telemetry query planning and replay on a simulated programmable switch"};
  app.require_subcommand(1);

  std::string spec, out, truth, queries, trace, config, plans_dir;
  std::size_t skip = 0;

  auto* g = app.add_subcommand("gen-trace", "Generate a synthetic trace and its ground truth");
  g->add_option("spec", spec, "Trace spec (TOML subset)")->required()->check(CLI::ExistingFile);
  g->add_option("-o,--output", out, "Trace CSV to write")->required();
  g->add_option("--truth", truth, "Ground-truth CSV (default: <output>.truth.csv)");

  auto* p = app.add_subcommand("plan", "Train one plan per query");
  p->add_option("-q,--queries", queries, "Query file")->required()->check(CLI::ExistingFile);
  p->add_option("-t,--trace", trace, "Trace CSV")->required()->check(CLI::ExistingFile);
  p->add_option("-c,--config", config, "Config (TOML subset)")->required()->check(CLI::ExistingFile);
  p->add_option("-o,--output", out, "Plan directory")->required();

  auto* r = app.add_subcommand("run", "Replay a trace through trained plans");
  r->add_option("-p,--plans", plans_dir, "Plan directory")->required()->check(CLI::ExistingDirectory);
  r->add_option("-t,--trace", trace, "Trace CSV")->required()->check(CLI::ExistingFile);
  r->add_option("-o,--output", out, "Metrics CSV to write")->required();
  r->add_option("--skip", skip, "Windows to skip before replay (e.g. the training split)");

  auto* b = app.add_subcommand("baselines", "Compare the learned plan with the reference planners");
  b->add_option("-q,--queries", queries, "Query file")->required()->check(CLI::ExistingFile);
  b->add_option("-t,--trace", trace, "Trace CSV")->required()->check(CLI::ExistingFile);
  b->add_option("-c,--config", config, "Config (TOML subset)")->required()->check(CLI::ExistingFile);
  b->add_option("-o,--output", out, "Comparison CSV to write");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kError;
  }

  try {
    if (*g) return gen_trace(spec, out, truth);
    if (*p) return plan(queries, trace, config, out);
    if (*r) return run(plans_dir, trace, out, skip);
    if (*b) return baselines(queries, trace, config, out);
  } catch (const InfeasibleError& e) {
    std::cerr << "infeasible: " << e.what() << " (binding constraint " << e.binding() << ")\n";
    return kInfeasible;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kError;
  }
  return kError;
}
