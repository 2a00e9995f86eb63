// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <random>

#include <unistd.h>

#include "planner_oracle.hpp"
#include "scenario.hpp"
#include "sonata/partitioning.hpp"
#include "sonata/planner.hpp"
#include "sonata/refinement.hpp"
#include "sonata/runtime.hpp"
#include "sonata/sketch.hpp"
#include "support.hpp"

using namespace sonata;
using namespace sonata::testing;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = true;
  std::string detail;
};

int failures = 0;

void report(int id, const char* name, const std::function<Verdict()>& run) {
  auto t0 = std::chrono::steady_clock::now();
  Verdict v;
  try {
    v = run();
  } catch (const std::exception& e) {
    v = {false, std::string("exception: ") + e.what()};
  }
  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!v.pass) ++failures;
  std::printf("criterion %d %s: %s (%s; %.1fs)\n", id, name, v.pass ? "PASS" : "FAIL", v.detail.c_str(), secs);
  std::fflush(stdout);
}

std::string fmt(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3g", x);
  return buf;
}

// ---------------------------------------------------------------------------
// 1

Verdict partition_equivalence() {
  auto qs = make_queries(evaluation_queries());
  std::mt19937_64 rng(1);
  std::size_t checks = 0, mismatches = 0;
  auto t0 = std::chrono::steady_clock::now();
  for (int trial = 0; trial < 100; ++trial) {
    auto w = random_window(rng, 1000 + rng() % 9001);
    auto prev = random_window(rng, 2000);
    auto victims = execute_window(*qs[3], to_records(*qs[3], prev), SetBindings{}).outputs;
    SetBindings joined{{"pVictimIPs", make_key_set(victims)}};
    for (const auto& q : qs) {
      const SetBindings& sets = q->join_target ? joined : SetBindings{};
      auto truth = execute_window(*q, to_records(*q, w), sets).outputs;
      for (std::size_t p = 0; p <= q->operator_count(); ++p) {
        std::map<std::string, SetBindings, std::less<>> b;
        if (q->join_target) b[q->name()] = joined;
        auto got = run_partitioned_window({{q, {p, false}}}, w, b);
        ++checks;
        mismatches += got.queries[0].outputs != truth;
      }
    }
  }
  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {mismatches == 0 && secs < 60.0, std::to_string(checks) + " query/window/split checks, " +
                                              std::to_string(mismatches) + " mismatches, " + fmt(secs) +
                                              "s of 60s budget"};
}

// ---------------------------------------------------------------------------
// 2

Verdict zero_miss() {
  auto qs = make_queries(evaluation_queries());
  // refinable members of the evaluation set: key per query
  std::vector<std::pair<std::size_t, std::string>> targets;
  for (std::size_t i = 0; i < qs.size(); ++i)
    if (!qs[i]->join_target && !qs[i]->refinement_keys.empty() && find_threshold_filter(*qs[i]))
      targets.push_back({i, qs[i]->refinement_keys.front()});
  const std::vector<std::vector<int>> grids{{8, 32}, {4, 8, 12, 16, 20, 24, 28, 32}};
  std::mt19937_64 rng(2);
  std::size_t runs = 0, misses = 0, nonempty = 0;
  for (int trial = 0; trial < 50; ++trial) {
    auto [qi, key] = targets[trial % targets.size()];
    std::string text = print_query(qs[qi]->ast);
    int th = 2 + static_cast<int>(rng() % 40);
    auto pos = text.rfind("> ");
    text = text.substr(0, pos + 2) + std::to_string(th) + text.substr(text.find(')', pos));
    auto q = make_query(text);
    std::vector<std::vector<PacketTuple>> train{random_window(rng, 1000 + rng() % 4000),
                                                random_window(rng, 1000 + rng() % 4000)};
    for (const auto& levels : grids) {
      auto thresholds = backtrack_thresholds(q, RefinementSpec{key, levels}, train);
      std::vector<PartitionPlan> plans;
      for (std::size_t i = 0; i < levels.size(); ++i) plans.push_back({rng() % (q->operator_count() + 1), false});
      auto chain = build_chain(q, key, levels, plans, thresholds);
      for (const auto& w : train) {
        auto truth = execute_window(*q, to_records(*q, w), SetBindings{}).outputs;
        nonempty += !truth.empty();
        std::vector<std::vector<PacketTuple>> replay(levels.size() + 1, w);
        auto run = run_refined_chain(chain, replay);
        for (std::size_t t = levels.size() - 1; t < replay.size(); ++t) misses += run.detections[t] != truth;
        ++runs;
      }
    }
  }
  return {misses == 0, std::to_string(runs) + " stationary replays over 50 workloads and 2 grids (" +
                           std::to_string(nonempty) + " with satisfying keys), " + std::to_string(misses) +
                           " windows differing from the unrefined query"};
}

// ---------------------------------------------------------------------------
// 3

// Direct enumeration of every level subset and partition choice, with vertex ids looked
// up by (interval, level, partition) rather than through the graph's edges.
struct Enumerator {
  const QueryPlanGraph& g;
  std::map<std::tuple<std::size_t, std::size_t, std::size_t>, std::size_t> vid;
  std::map<std::tuple<int, std::size_t, std::size_t>, std::size_t> kid;
  double alpha;

  Enumerator(const QueryPlanGraph& graph, double a) : g(graph), alpha(a) {
    for (std::size_t v = 0; v < g.vertices.size(); ++v) {
      const auto& x = g.vertices[v];
      if (x.role != PlanVertex::Role::Inner) continue;
      std::size_t li = std::find(g.levels.begin(), g.levels.end(), x.level) - g.levels.begin();
      std::size_t pi = std::find(g.partitions.begin(), g.partitions.end(), x.plan) - g.partitions.begin();
      vid[{x.interval, li, pi}] = v;
    }
    for (std::size_t k = 0; k < g.cost_keys.size(); ++k)
      kid[{g.cost_keys[k].parent, g.cost_keys[k].level, g.cost_keys[k].partition}] = k;
  }

  // visit(vertices, per-window weight or NaN when an edge is infeasible)
  void each(const std::function<void(const std::vector<std::size_t>&, const std::vector<double>&)>& visit) {
    const std::size_t L = g.levels.size(), P = g.partitions.size(), M = g.windows();
    std::vector<std::size_t> verts{g.src()};
    std::vector<std::vector<double>> acc{std::vector<double>(M, 0.0)};
    std::function<void(int, std::size_t)> go = [&](int parent, std::size_t interval) {
      for (std::size_t li = static_cast<std::size_t>(parent + 1); li < L; ++li) {
        if (interval > g.max_intervals) return;
        // the last allowed interval only reaches Tgt from the finest level
        if (interval == g.max_intervals && li != L - 1) continue;
        for (std::size_t pi = 0; pi < P; ++pi) {
          const auto& cost = g.costs[kid.at({parent, li, pi})];
          std::vector<double> w = acc.back();
          for (std::size_t m = 0; m < M; ++m)
            w[m] = (cost[m].n > 1.0 || cost[m].b > 1.0) ? NAN : w[m] + (alpha * cost[m].n + (1 - alpha) * cost[m].b);
          verts.push_back(vid.at({interval, li, pi}));
          acc.push_back(std::move(w));
          if (li == L - 1) {
            verts.push_back(g.tgt());
            visit(verts, acc.back());
            verts.pop_back();
          } else {
            go(static_cast<int>(li), interval + 1);
          }
          verts.pop_back();
          acc.pop_back();
        }
      }
    };
    go(-1, 1);
  }
};

Verdict planner_oracle() {
  std::mt19937_64 rng(3);
  std::size_t shortest_checks = 0, shortest_bad = 0, select_bad = 0, largest = 0;
  for (int trial = 0; trial < 100; ++trial) {
    bool full = trial % 10 == 0;
    std::size_t L = full ? 8 : 1 + rng() % 8, P = full ? 4 : 1 + rng() % 4;
    std::size_t D = full ? 8 : 1 + rng() % L;
    auto g = random_graph(rng, L, P, D, 20, 1.2);  // some edges infeasible
    double alpha = std::uniform_real_distribution<double>(0, 1)(rng);
    largest = std::max(largest, count_paths(g));
    Enumerator en(g, alpha);
    const std::size_t M = 20;

    // per-window optimum under the tie-break
    std::vector<double> opt(M, INFINITY);
    std::vector<std::vector<std::size_t>> arg(M);
    en.each([&](const std::vector<std::size_t>& v, const std::vector<double>& w) {
      for (std::size_t m = 0; m < M; ++m)
        if (!std::isnan(w[m]) && (arg[m].empty() || oracle_before(w[m], v, opt[m], arg[m]))) {
          opt[m] = w[m];
          arg[m] = v;
        }
    });
    for (std::size_t m = 0; m < M; ++m) {
      ++shortest_checks;
      try {
        auto sp = shortest_plan(weight_graph(g, m, alpha));
        shortest_bad += arg[m].empty() || sp.vertices != arg[m] || sp.cost != opt[m];
      } catch (const InfeasibleError&) {
        shortest_bad += !arg[m].empty();
      }
    }

    // minimum RMSE against those optima over plans feasible in every window
    std::optional<std::vector<std::size_t>> best;
    double best_r = 0, best_mean = 0;
    en.each([&](const std::vector<std::size_t>& v, const std::vector<double>& w) {
      double acc = 0, mean = 0;
      for (std::size_t m = 0; m < M; ++m) {
        if (std::isnan(w[m])) return;
        acc += (w[m] - opt[m]) * (w[m] - opt[m]);
        mean += w[m];
      }
      double r = std::sqrt(acc / static_cast<double>(M));
      mean /= static_cast<double>(M);
      if (!best || r < best_r || (r == best_r && oracle_before(mean, v, best_mean, *best))) {
        best = v;
        best_r = r;
        best_mean = mean;
      }
    });
    try {
      auto sel = select_plan(g, alpha);
      select_bad += !best || sel.path.vertices != *best;
    } catch (const InfeasibleError&) {
      select_bad += best.has_value();
    }
  }
  return {shortest_bad == 0 && select_bad == 0,
          std::to_string(shortest_checks) + " shortest-path checks (" + std::to_string(shortest_bad) +
              " wrong), 100 selections (" + std::to_string(select_bad) + " wrong), up to " +
              std::to_string(largest) + " paths per graph"};
}

// ---------------------------------------------------------------------------
// 4

Verdict sketches() {
  std::mt19937_64 rng(4);
  const std::size_t n = 10000;
  const double eps = 0.01, delta = 0.01;
  std::size_t keys = 0, within = 0, under = 0, false_neg = 0;
  for (int trial = 0; trial < 100; ++trial) {
    CountMinSketch cm(count_min_dims(eps, delta), rng());
    BloomFilter bf(bloom_dims(eps, delta), rng());
    std::map<std::string, std::uint64_t> exact;
    // mix of heavy and light keys
    std::uniform_int_distribution<int> light(0, 1 + static_cast<int>(rng() % 5000));
    for (std::size_t i = 0; i < n; ++i) {
      std::string k = "k" + std::to_string(rng() % 10 == 0 ? static_cast<int>(rng() % 5) : light(rng));
      ++exact[k];
      cm.update(k);
      bf.insert(k);
    }
    for (const auto& [k, c] : exact) {
      auto e = cm.estimate(k);
      under += e < c;
      within += e >= c && static_cast<double>(e - c) <= eps * static_cast<double>(n);
      false_neg += !bf.query(k);
      ++keys;
    }
  }
  double frac = static_cast<double>(within) / static_cast<double>(keys);
  return {under == 0 && false_neg == 0 && frac >= 0.99,
          fmt(100 * frac) + "% of " + std::to_string(keys) + " keys within eps*N, " + std::to_string(under) +
              " underestimates, " + std::to_string(false_neg) + " bloom false negatives"};
}

// ---------------------------------------------------------------------------
// 5

Verdict trend() {
  const std::vector<std::string> names{"stream-only", "part-of", "part-pisa", "fixed-refinement", "learned"};
  std::map<std::string, double> n, b;
  bool fixed_ok = true, learned_ok = true;
  std::string delays;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    auto g = generate_trace(reflection_spec(seed, 40, 2000, 25));
    Config c = reflection_config(seed);
    c.levels.clear();  // the default /4 ... /32 grid
    auto w = workload(reflection_queries(), g.trace, c);
    auto runs = run_baselines(w, c);
    for (const auto& r : runs) {
      double rn = 0, rb = 0, rows = 0;
      for (const auto& row : r.metrics.rows)
        if (row.query == "__all__") {
          rn += static_cast<double>(row.n_raw);
          rb = std::max(rb, static_cast<double>(row.b_raw));
          ++rows;
        }
      n[r.name] += rn / rows / 10.0;
      b[r.name] += rb / 10.0;
      if (r.name == "fixed-refinement" || r.name == "learned") {
        for (std::size_t q = 0; q < r.metrics.queries.size(); ++q) {
          const auto& s = r.metrics.queries[q];
          bool independent = w.queries[q]->set_names.empty();
          if (r.name == "fixed-refinement" && independent) fixed_ok = fixed_ok && s.delay == std::size_t{8};
          if (r.name == "learned") learned_ok = learned_ok && s.delay && *s.delay <= 8;
          if (seed == 1)
            delays += " " + r.name + "/" + s.query + "=" + (s.delay ? std::to_string(*s.delay) : std::string("none"));
        }
      }
    }
  }
  double n_gain = n["part-of"] / n["learned"], b_gain = b["part-pisa"] / b["learned"];
  bool ok = n_gain >= 2.0 && b_gain >= 1.5 && fixed_ok && learned_ok;
  return {ok, "n part-of/learned " + fmt(n["part-of"]) + "/" + fmt(n["learned"]) + " = " + fmt(n_gain) +
                  "x, b part-pisa/learned " + fmt(b["part-pisa"]) + "/" + fmt(b["learned"]) + " = " + fmt(b_gain) +
                  "x, delays seed 1:" + delays};
}

// ---------------------------------------------------------------------------
// 6

Verdict injection() {
  TraceGenSpec spec;
  spec.seed = 6;
  spec.duration = 60;
  spec.rate = 1000;
  AnomalySpec a;
  a.kind = AnomalyKind::Reflection;
  a.key = static_cast<std::int64_t>(*parse_ipv4("66.1.2.3"));
  a.start = 20;
  a.duration = 10;
  a.rate = 300;
  a.sources = 100000;
  spec.anomalies.push_back(a);
  auto g = generate_trace(spec);
  auto w = workload(reflection_queries(40), g.trace, reflection_config());
  const auto& q = w.queries[0];
  std::size_t p = max_supported_split(*q);
  auto exec = std::vector<ExecQuery>{make_exec(q, std::nullopt, {{0, {p, false}}}, {}, w.catalog)};
  auto m = replay(exec, w.windows, 6);
  double inside = 0, outside = 0;
  std::optional<std::size_t> first;
  for (const auto& row : m.rows) {
    if (row.query == "__all__") (row.window >= 20 && row.window < 30 ? inside : outside) += static_cast<double>(row.reports);
    if (row.query == q->name() && row.detections && !first) first = row.window;
  }
  bool ok = inside > 0 && outside <= 0.01 * inside && first && *first >= 20 && *first <= 21;
  return {ok, "reports inside " + fmt(inside) + ", outside " + fmt(outside) + ", first detection window " +
                  (first ? std::to_string(*first) : std::string("none")) + " (injection at 20, p=" +
                  std::to_string(p) + ")"};
}

// ---------------------------------------------------------------------------
// 7

void add_totals(const QueryPlanGraph& g, const std::vector<std::size_t>& vertices, std::vector<double>& n,
                std::vector<double>& b) {
  // recompute from the cost table, independent of path_totals
  Enumerator en(g, 0.5);
  for (std::size_t i = 1; i + 1 < vertices.size(); ++i) {
    const auto& v = g.vertices[vertices[i]];
    std::size_t li = std::find(g.levels.begin(), g.levels.end(), v.level) - g.levels.begin();
    std::size_t pi = std::find(g.partitions.begin(), g.partitions.end(), v.plan) - g.partitions.begin();
    int parent = -1;
    if (i > 1) {
      const auto& u = g.vertices[vertices[i - 1]];
      parent = static_cast<int>(std::find(g.levels.begin(), g.levels.end(), u.level) - g.levels.begin());
    }
    const auto& c = g.costs[en.kid.at({parent, li, pi})];
    for (std::size_t m = 0; m < c.size(); ++m) {
      n[m] += c[m].n;
      b[m] += c[m].b;
    }
  }
}

bool fits(const std::vector<double>& n, const std::vector<double>& b) {
  for (std::size_t m = 0; m < n.size(); ++m)
    if (n[m] > 1.0 || b[m] > 1.0) return false;
  return true;
}

Verdict constraint_soundness() {
  std::mt19937_64 rng(7);
  std::size_t feasible = 0, infeasible = 0, violations = 0, wrong_verdicts = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const bool multi = trial % 2 == 1;
    std::uniform_real_distribution<double> s(0.2, 3.0);
    double sn = s(rng), sb = s(rng);  // tightening or relaxing N_max and B_max
    std::vector<QueryPlanGraph> gs;
    for (int k = 0; k < (multi ? 2 : 1); ++k) {
      std::size_t L = 2 + rng() % 2;
      gs.push_back(random_graph(rng, L, 2 + rng() % 2, 1 + rng() % L, 3, multi ? 0.6 : 0.9));
      for (auto& key : gs.back().costs)
        for (auto& c : key) {
          c.n *= sn;
          c.b *= sb;
        }
    }
    const std::size_t M = 3;
    std::vector<std::vector<OraclePlan>> plans;
    for (const auto& g : gs) plans.push_back(oracle_plans(g));
    bool exists = false;
    if (!multi) {
      for (const auto& p : plans[0]) exists = exists || fits(p.n, p.b);
    } else {
      for (const auto& p : plans[0])
        for (const auto& r : plans[1]) {
          std::vector<double> n(M), b(M);
          for (std::size_t m = 0; m < M; ++m) {
            n[m] = p.n[m] + r.n[m];
            b[m] = p.b[m] + r.b[m];
          }
          exists = exists || fits(n, b);
        }
    }
    try {
      std::vector<double> n(M, 0.0), b(M, 0.0);
      if (!multi) {
        auto tp = tune_alpha(gs[0]);
        add_totals(gs[0], tp.plan.path.vertices, n, b);
      } else {
        auto mp = plan_multi({&gs[0], &gs[1]});
        for (std::size_t q = 0; q < 2; ++q) add_totals(gs[q], mp.plans[q].path.vertices, n, b);
      }
      ++feasible;
      violations += !fits(n, b);
      wrong_verdicts += !exists;
    } catch (const InfeasibleError&) {
      ++infeasible;
      wrong_verdicts += exists;
    }
  }
  return {violations == 0 && wrong_verdicts == 0,
          std::to_string(feasible) + " plans returned (" + std::to_string(violations) + " violating), " +
              std::to_string(infeasible) + " infeasible verdicts, " + std::to_string(wrong_verdicts) +
              " contradicted by enumeration"};
}

// ---------------------------------------------------------------------------
// 8

std::string slurp_dir(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::string all;
  for (const auto& f : files) all += fs::relative(f, dir).string() + "\n" + read_file(f);
  return all;
}

Verdict determinism() {
  const fs::path root = fs::temp_directory_path() / ("sonata-accept-" + std::to_string(::getpid()));
  fs::remove_all(root);
  const std::string cli = SONATA_CLI;
  const std::string samples = SONATA_SAMPLES;
  std::vector<std::string> outputs;
  for (int run = 0; run < 2; ++run) {
    fs::path dir = root / ("run" + std::to_string(run));
    fs::create_directories(dir / "plans");
    std::string d = dir.string();
    std::string cmds[] = {
        cli + " gen-trace " + samples + "/trace.toml -o " + d + "/trace.csv",
        cli + " plan -q " + samples + "/queries.sq -t " + d + "/trace.csv -c " + samples + "/config.toml -o " + d +
            "/plans",
        cli + " run -p " + d + "/plans -t " + d + "/trace.csv -o " + d + "/metrics.csv --skip 20",
    };
    for (const auto& c : cmds)
      if (std::system((c + " > /dev/null").c_str()) != 0) return {false, "command failed: " + c};
    outputs.push_back(slurp_dir(dir));
  }
  fs::remove_all(root);
  bool same = outputs[0] == outputs[1];
  return {same, "trace, plan files and metrics CSV from two CLI runs " +
                    std::string(same ? "byte-identical" : "differ") + " (" + std::to_string(outputs[0].size()) +
                    " bytes)"};
}

}  // namespace

int main() {
  report(1, "partition-equivalence", partition_equivalence);
  report(2, "refinement-zero-miss", zero_miss);
  report(3, "planner-oracle-equivalence", planner_oracle);
  report(4, "count-min-bound-and-bloom", sketches);
  report(5, "evaluation-trend", trend);
  report(6, "anomaly-injection", injection);
  report(7, "constraint-soundness", constraint_soundness);
  report(8, "determinism", determinism);
  std::printf("%d of 8 criteria failed\n", failures);
  return failures ? 1 : 0;
}
