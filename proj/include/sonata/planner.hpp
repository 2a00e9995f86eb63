#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <queue>
#include <string>
#include <vector>

#include "sonata/error.hpp"
#include "sonata/partitioning.hpp"
#include "sonata/refinement.hpp"

namespace sonata {

// A (level, partition, interval) vertex. Level 0 stands for the unrefined query.
struct PlanVertex {
  enum class Role { Src, Inner, Tgt };
  Role role = Role::Inner;
  int level = 0;
  PartitionPlan plan;
  std::size_t interval = 0;  // 1-based for inner vertices
};

// Identifies the cost shared by every edge entering (level, partition) from `parent`.
struct CostKey {
  int parent = -1;  // level index of the zoom source, -1 when entering from Src
  std::size_t level = 0;
  std::size_t partition = 0;
  friend auto operator<=>(const CostKey&, const CostKey&) = default;
};

struct QueryPlanGraph {
  struct Edge {
    std::size_t from = 0, to = 0;
    std::optional<std::size_t> cost_key;  // empty for edges into Tgt
  };

  std::vector<int> levels;                 // coarse to fine
  std::vector<PartitionPlan> partitions;   // sorted
  std::size_t max_intervals = 1;
  std::vector<PlanVertex> vertices;        // Src first, Tgt last, inner by (interval, level, partition)
  std::vector<Edge> edges;
  std::vector<std::vector<std::size_t>> out;  // edge indices per vertex, ordered by target
  std::vector<CostKey> cost_keys;
  std::vector<std::vector<CostPair>> costs;   // [cost key][window], normalized

  std::size_t src() const { return 0; }
  std::size_t tgt() const { return vertices.size() - 1; }
  std::size_t windows() const { return costs.empty() ? 0 : costs.front().size(); }
};

inline std::size_t intervals_for_delay(double d_max, double window) {
  if (!(window > 0) || d_max < window) throw ArgumentError("max delay must be at least one window");
  return static_cast<std::size_t>(std::floor(d_max / window + 1e-9));
}

// Vertices for every level/partition/interval that lies on some Src->Tgt path of at
// most `max_intervals` intervals; edges run coarse to fine, one interval per hop.
inline QueryPlanGraph build_plan_graph(const std::vector<int>& levels, std::vector<PartitionPlan> partitions,
                                       std::size_t max_intervals) {
  if (levels.empty()) throw ArgumentError("plan graph needs at least one level");
  for (std::size_t i = 1; i < levels.size(); ++i)
    if (levels[i] <= levels[i - 1]) throw ArgumentError("levels must increase");
  if (partitions.empty()) throw ArgumentError("plan graph needs at least one partition");
  if (max_intervals < 1) throw ArgumentError("plan graph needs at least one interval");
  std::sort(partitions.begin(), partitions.end());
  partitions.erase(std::unique(partitions.begin(), partitions.end()), partitions.end());

  QueryPlanGraph g;
  g.levels = levels;
  g.partitions = partitions;
  g.max_intervals = max_intervals;
  const std::size_t n = levels.size();
  const std::size_t depth = std::min(max_intervals, n);

  g.vertices.push_back(PlanVertex{PlanVertex::Role::Src, 0, {}, 0});
  std::map<std::tuple<std::size_t, std::size_t, std::size_t>, std::size_t> id;  // (interval, level, part)
  for (std::size_t i = 1; i <= depth; ++i)
    for (std::size_t li = 0; li < n; ++li) {
      bool reachable = i - 1 <= li;
      bool continues = li == n - 1 || i < depth;
      if (!reachable || !continues) continue;
      for (std::size_t pi = 0; pi < partitions.size(); ++pi) {
        id[{i, li, pi}] = g.vertices.size();
        g.vertices.push_back(PlanVertex{PlanVertex::Role::Inner, levels[li], partitions[pi], i});
      }
    }
  g.vertices.push_back(PlanVertex{PlanVertex::Role::Tgt, 0, {}, depth + 1});
  g.out.resize(g.vertices.size());

  std::map<CostKey, std::size_t> keys;
  auto key_of = [&](CostKey k) {
    auto [it, fresh] = keys.emplace(k, g.cost_keys.size());
    if (fresh) g.cost_keys.push_back(k);
    return it->second;
  };
  auto add = [&](std::size_t from, std::size_t to, std::optional<std::size_t> key) {
    g.out[from].push_back(g.edges.size());
    g.edges.push_back({from, to, key});
  };
  for (const auto& [k, v] : id) {
    auto [i, li, pi] = k;
    if (i == 1) add(g.src(), v, key_of({-1, li, pi}));
  }
  for (const auto& [k, v] : id) {
    auto [i, li, pi] = k;
    if (li == n - 1) add(v, g.tgt(), std::nullopt);
    for (std::size_t lj = li + 1; lj < n; ++lj)
      for (std::size_t pj = 0; pj < partitions.size(); ++pj) {
        auto it = id.find({i + 1, lj, pj});
        if (it != id.end()) add(v, it->second, key_of({static_cast<int>(li), lj, pj}));
      }
  }
  for (auto& o : g.out)
    std::sort(o.begin(), o.end(), [&](std::size_t a, std::size_t b) { return g.edges[a].to < g.edges[b].to; });
  g.costs.assign(g.cost_keys.size(), {});
  return g;
}

// Number of Src->Tgt paths; saturates at SIZE_MAX.
inline std::size_t count_paths(const QueryPlanGraph& g) {
  std::vector<std::size_t> ways(g.vertices.size(), 0);
  ways[g.tgt()] = 1;
  for (std::size_t v = g.vertices.size(); v-- > 0;) {
    if (v == g.tgt()) continue;
    std::size_t total = 0;
    for (auto e : g.out[v]) {
      std::size_t w = ways[g.edges[e].to];
      total = w > SIZE_MAX - total ? SIZE_MAX : total + w;
    }
    ways[v] = total;
  }
  return ways[g.src()];
}

// ---------------------------------------------------------------------------
// Weights and paths

struct WeightedGraph {
  const QueryPlanGraph* graph = nullptr;
  std::size_t window = 0;
  double alpha = 0.5;
  std::vector<double> weight;   // per edge
  std::vector<char> feasible;   // per edge: n <= 1 and b <= 1
};

inline double edge_weight(const CostPair& c, double alpha) { return alpha * c.n + (1.0 - alpha) * c.b; }

inline WeightedGraph weight_graph(const QueryPlanGraph& g, std::size_t window, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ArgumentError("alpha must lie in [0, 1]");
  if (window >= g.windows()) throw ArgumentError("no costs measured for that window");
  WeightedGraph wg{&g, window, alpha, std::vector<double>(g.edges.size(), 0.0), std::vector<char>(g.edges.size(), 1)};
  for (std::size_t e = 0; e < g.edges.size(); ++e) {
    if (!g.edges[e].cost_key) continue;
    const CostPair& c = g.costs[*g.edges[e].cost_key][window];
    wg.weight[e] = edge_weight(c, alpha);
    wg.feasible[e] = c.feasible();
  }
  return wg;
}

struct PlanPath {
  std::vector<std::size_t> vertices;  // Src ... Tgt
  std::vector<std::size_t> edges;
  double cost = 0;

  std::size_t intervals() const { return vertices.size() - 2; }
};

// Tie-break shared by every selection: lower cost, then fewer intervals, then the
// lexicographically smaller vertex-id sequence.
inline bool path_before(double cost_a, const std::vector<std::size_t>& a, double cost_b,
                        const std::vector<std::size_t>& b) {
  if (cost_a != cost_b) return cost_a < cost_b;
  if (a.size() != b.size()) return a.size() < b.size();
  return a < b;
}

inline PlanPath shortest_plan(const WeightedGraph& wg) {
  const QueryPlanGraph& g = *wg.graph;
  struct Label {
    double cost;
    std::vector<std::size_t> vertices;
    std::vector<std::size_t> edges;
  };
  auto worse = [](const Label& a, const Label& b) { return path_before(b.cost, b.vertices, a.cost, a.vertices); };
  std::priority_queue<Label, std::vector<Label>, decltype(worse)> heap(worse);
  std::vector<char> settled(g.vertices.size(), 0);
  std::vector<std::optional<Label>> best(g.vertices.size());
  best[g.src()] = Label{0.0, {g.src()}, {}};
  heap.push(*best[g.src()]);
  while (!heap.empty()) {
    Label cur = heap.top();
    heap.pop();
    std::size_t v = cur.vertices.back();
    if (settled[v]) continue;
    settled[v] = 1;
    if (v == g.tgt()) return PlanPath{std::move(cur.vertices), std::move(cur.edges), cur.cost};
    for (auto e : g.out[v]) {
      if (!wg.feasible[e]) continue;
      std::size_t to = g.edges[e].to;
      if (settled[to]) continue;
      Label next{cur.cost + wg.weight[e], cur.vertices, cur.edges};
      next.vertices.push_back(to);
      next.edges.push_back(e);
      if (!best[to] || path_before(next.cost, next.vertices, best[to]->cost, best[to]->vertices)) {
        best[to] = next;
        heap.push(std::move(next));
      }
    }
  }
  throw InfeasibleError("no feasible solution exists: every plan uses an edge over a constraint", "edge");
}

// Depth-first walk over every Src->Tgt path in vertex-id order. `enter(e)` returns
// false to prune the edge; `leave(e)` undoes it; `at_target()` sees each full path.
template <typename Enter, typename Leave, typename AtTarget>
void walk_paths(const QueryPlanGraph& g, Enter&& enter, Leave&& leave, AtTarget&& at_target) {
  std::vector<std::size_t> vertices{g.src()}, edges;
  std::function<void(std::size_t)> rec = [&](std::size_t v) {
    if (v == g.tgt()) {
      at_target(vertices, edges);
      return;
    }
    for (auto e : g.out[v]) {
      if (!enter(e)) continue;
      vertices.push_back(g.edges[e].to);
      edges.push_back(e);
      rec(g.edges[e].to);
      vertices.pop_back();
      edges.pop_back();
      leave(e);
    }
  };
  rec(g.src());
}

// Normalized per-window totals of a path.
struct PathTotals {
  std::vector<double> n, b;  // per window

  bool n_ok() const { return std::all_of(n.begin(), n.end(), [](double x) { return x <= 1.0; }); }
  bool b_ok() const { return std::all_of(b.begin(), b.end(), [](double x) { return x <= 1.0; }); }
  bool ok() const { return n_ok() && b_ok(); }
};

inline PathTotals path_totals(const QueryPlanGraph& g, const std::vector<std::size_t>& edges) {
  PathTotals t{std::vector<double>(g.windows(), 0.0), std::vector<double>(g.windows(), 0.0)};
  for (auto e : edges) {
    if (!g.edges[e].cost_key) continue;
    const auto& c = g.costs[*g.edges[e].cost_key];
    for (std::size_t m = 0; m < g.windows(); ++m) {
      t.n[m] += c[m].n;
      t.b[m] += c[m].b;
    }
  }
  return t;
}

struct SelectOptions {
  std::size_t exhaustive_cap = 2'000'000;  // enumerate every path up to this many
  std::size_t k_best = 100;                // candidates kept beyond the cap
};

struct SelectedPlan {
  PlanPath path;
  double alpha = 0.5;
  double rmse = 0;
  double mean_cost = 0;
  std::vector<double> window_costs;  // weighted cost per training window
  bool exhaustive = true;
};

namespace detail {

struct Candidate {
  double rmse, mean;
  std::vector<std::size_t> vertices, edges;
  std::vector<double> costs;
};

inline bool candidate_before(const Candidate& a, const Candidate& b) {
  if (a.rmse != b.rmse) return a.rmse < b.rmse;
  return path_before(a.mean, a.vertices, b.mean, b.vertices);
}

inline double rmse_of(const std::vector<double>& costs, const std::vector<double>& optimal) {
  double acc = 0;
  for (std::size_t m = 0; m < costs.size(); ++m) acc += (costs[m] - optimal[m]) * (costs[m] - optimal[m]);
  return std::sqrt(acc / static_cast<double>(costs.size()));
}

inline double mean_of(const std::vector<double>& costs) {
  double acc = 0;
  for (double c : costs) acc += c;
  return acc / static_cast<double>(costs.size());
}

// The k cheapest paths by summed weight over all windows, skipping edges infeasible in
// any window. Dynamic programming over the DAG in reverse vertex order.
inline std::vector<std::vector<std::size_t>> k_best_paths(const QueryPlanGraph& g,
                                                          const std::vector<WeightedGraph>& wgs, std::size_t k) {
  struct Partial {
    double cost;
    std::vector<std::size_t> vertices, edges;  // from this vertex to Tgt
  };
  std::vector<std::vector<Partial>> best(g.vertices.size());
  best[g.tgt()].push_back({0.0, {g.tgt()}, {}});
  for (std::size_t v = g.vertices.size(); v-- > 0;) {
    if (v == g.tgt()) continue;
    std::vector<Partial> mine;
    for (auto e : g.out[v]) {
      bool ok = true;
      double w = 0;
      for (const auto& wg : wgs) {
        ok = ok && wg.feasible[e];
        w += wg.weight[e];
      }
      if (!ok) continue;
      for (const auto& tail : best[g.edges[e].to]) {
        Partial p{w + tail.cost, {v}, {e}};
        p.vertices.insert(p.vertices.end(), tail.vertices.begin(), tail.vertices.end());
        p.edges.insert(p.edges.end(), tail.edges.begin(), tail.edges.end());
        mine.push_back(std::move(p));
      }
    }
    std::sort(mine.begin(), mine.end(),
              [](const Partial& a, const Partial& b) { return path_before(a.cost, a.vertices, b.cost, b.vertices); });
    if (mine.size() > k) mine.resize(k);
    best[v] = std::move(mine);
  }
  std::vector<std::vector<std::size_t>> out;
  for (auto& p : best[g.src()]) out.push_back(std::move(p.edges));
  return out;
}

}  // namespace detail

// The plan closest, in root-mean-square terms, to each window's own optimum. Plans
// using an edge that is infeasible in any window are excluded.
inline SelectedPlan select_plan(const QueryPlanGraph& g, double alpha, const SelectOptions& opts = {}) {
  const std::size_t M = g.windows();
  if (M == 0) throw ArgumentError("plan selection needs at least one measured window");
  std::vector<WeightedGraph> wgs;
  std::vector<double> optimal;
  std::vector<PlanPath> optima;
  for (std::size_t m = 0; m < M; ++m) {
    wgs.push_back(weight_graph(g, m, alpha));
    optima.push_back(shortest_plan(wgs.back()));
    optimal.push_back(optima.back().cost);
  }

  std::optional<detail::Candidate> best;
  auto consider = [&](const std::vector<std::size_t>& vertices, const std::vector<std::size_t>& edges,
                      std::vector<double> costs) {
    detail::Candidate c{detail::rmse_of(costs, optimal), detail::mean_of(costs), vertices, edges, std::move(costs)};
    if (!best || detail::candidate_before(c, *best)) best = std::move(c);
  };
  auto evaluate = [&](const std::vector<std::size_t>& edges) -> std::optional<std::vector<double>> {
    std::vector<double> costs(M, 0.0);
    for (auto e : edges)
      for (std::size_t m = 0; m < M; ++m) {
        if (!wgs[m].feasible[e]) return std::nullopt;
        costs[m] += wgs[m].weight[e];
      }
    return costs;
  };

  const bool exhaustive = count_paths(g) <= opts.exhaustive_cap;
  if (exhaustive) {
    // running per-window sums along the current path
    std::vector<std::vector<double>> acc{std::vector<double>(M, 0.0)};
    walk_paths(
        g,
        [&](std::size_t e) {
          for (std::size_t m = 0; m < M; ++m)
            if (!wgs[m].feasible[e]) return false;
          std::vector<double> next = acc.back();
          for (std::size_t m = 0; m < M; ++m) next[m] += wgs[m].weight[e];
          acc.push_back(std::move(next));
          return true;
        },
        [&](std::size_t) { acc.pop_back(); },
        [&](const std::vector<std::size_t>& vertices, const std::vector<std::size_t>& edges) {
          consider(vertices, edges, acc.back());
        });
  } else {
    auto paths = detail::k_best_paths(g, wgs, opts.k_best);
    for (const auto& p : optima) paths.push_back(p.edges);
    for (const auto& edges : paths) {
      auto costs = evaluate(edges);
      if (!costs) continue;
      std::vector<std::size_t> vertices{g.src()};
      for (auto e : edges) vertices.push_back(g.edges[e].to);
      consider(vertices, edges, std::move(*costs));
    }
  }
  if (!best) throw InfeasibleError("no feasible solution exists: no plan is feasible in every window", "edge");

  SelectedPlan sp;
  sp.path = PlanPath{best->vertices, best->edges, best->mean};
  sp.alpha = alpha;
  sp.rmse = best->rmse;
  sp.mean_cost = best->mean;
  sp.window_costs = std::move(best->costs);
  sp.exhaustive = exhaustive;
  return sp;
}

// ---------------------------------------------------------------------------
// Constraint-driven search over alpha

inline constexpr double kAlphaResolution = 1.0 / 1024.0;

struct TunedPlan {
  SelectedPlan plan;
  PathTotals totals;
  double alpha = 0.5;
  std::size_t probes = 0;
  bool fallback = false;  // found by the exhaustive constrained search
};

namespace detail {

inline std::string binding_name(bool n_ok, bool b_ok) {
  if (!n_ok && !b_ok) return "N_max and B_max";
  if (!n_ok) return "N_max";
  if (!b_ok) return "B_max";
  return "N_max and B_max";  // each satisfiable alone, never together
}

template <typename Probe, typename Objective>
std::optional<double> search_alpha(Probe&& probe, Objective&& objective, std::size_t& probes) {
  // probe(a) -> optional<pair<n_ok, b_ok>>; objective(a) -> recorded feasible objective
  std::optional<std::pair<double, double>> best;  // (objective, alpha)
  auto record = [&](double a) {
    double o = objective(a);
    if (!best || o < best->first || (o == best->first && a < best->second)) best = {{o, a}};
  };
  auto feasible_at = [&](double a) -> std::optional<std::pair<bool, bool>> {
    ++probes;
    return probe(a);
  };
  // Moves only on violations: a violated load constraint shifts weight onto n (right), a
  // violated state one onto b (left). After a feasible probe the search steps back toward
  // 0.5, where neither cost dominates. A feasible start ends the search at once.
  double alpha = 0.5, step = 0.25;
  for (;;) {
    auto r = feasible_at(alpha);
    if (!r) break;
    auto [n_ok, b_ok] = *r;
    double dir = 0;
    if (n_ok && b_ok) {
      record(alpha);
      if (alpha == 0.5) break;
      dir = alpha < 0.5 ? 1.0 : -1.0;
    } else if (!n_ok && !b_ok) {
      break;
    } else {
      dir = n_ok ? -1.0 : 1.0;
    }
    if (step < kAlphaResolution) break;
    alpha += dir * step;
    step /= 2;
  }
  if (!best) return std::nullopt;
  return best->second;
}

}  // namespace detail

// Exhaustive search for any plan meeting both constraints, used once alpha search fails.
inline std::optional<TunedPlan> constrained_fallback(const QueryPlanGraph& g, const SelectOptions& opts,
                                                     bool& any_n_ok, bool& any_b_ok) {
  const std::size_t M = g.windows();
  const double alpha = 0.5;
  std::vector<WeightedGraph> wgs;
  for (std::size_t m = 0; m < M; ++m) wgs.push_back(weight_graph(g, m, alpha));
  std::optional<std::pair<std::vector<std::size_t>, std::vector<std::size_t>>> best;
  double best_cost = 0;
  auto consider = [&](const std::vector<std::size_t>& vertices, const std::vector<std::size_t>& edges) {
    PathTotals t = path_totals(g, edges);
    any_n_ok = any_n_ok || t.n_ok();
    any_b_ok = any_b_ok || t.b_ok();
    if (!t.ok()) return;
    double cost = 0;
    for (std::size_t m = 0; m < M; ++m)
      for (auto e : edges) cost += wgs[m].weight[e];
    cost /= static_cast<double>(M);
    if (!best || path_before(cost, vertices, best_cost, best->first)) {
      best = {{vertices, edges}};
      best_cost = cost;
    }
  };
  if (count_paths(g) <= opts.exhaustive_cap) {
    walk_paths(g, [](std::size_t) { return true; }, [](std::size_t) {}, consider);
  } else {
    for (const auto& edges : detail::k_best_paths(g, wgs, opts.k_best)) {
      std::vector<std::size_t> vertices{g.src()};
      for (auto e : edges) vertices.push_back(g.edges[e].to);
      consider(vertices, edges);
    }
  }
  if (!best) return std::nullopt;
  TunedPlan tp;
  tp.alpha = alpha;
  tp.fallback = true;
  tp.plan.path = PlanPath{best->first, best->second, best_cost};
  tp.plan.alpha = alpha;
  tp.plan.mean_cost = best_cost;
  for (std::size_t m = 0; m < M; ++m) {
    double c = 0;
    for (auto e : best->second) c += wgs[m].weight[e];
    tp.plan.window_costs.push_back(c);
  }
  tp.totals = path_totals(g, best->second);
  return tp;
}

// Search alpha for the lowest-cost selected plan whose per-window totals stay within
// both constraints.
inline TunedPlan tune_alpha(const QueryPlanGraph& g, const SelectOptions& opts = {}) {
  std::map<double, std::optional<SelectedPlan>> cache;
  auto select = [&](double a) -> const std::optional<SelectedPlan>& {
    auto it = cache.find(a);
    if (it != cache.end()) return it->second;
    std::optional<SelectedPlan> sp;
    try {
      sp = select_plan(g, a, opts);
    } catch (const InfeasibleError&) {
    }
    return cache.emplace(a, std::move(sp)).first->second;
  };
  std::size_t probes = 0;
  auto alpha = detail::search_alpha(
      [&](double a) -> std::optional<std::pair<bool, bool>> {
        const auto& sp = select(a);
        if (!sp) return std::nullopt;
        auto t = path_totals(g, sp->path.edges);
        return std::pair{t.n_ok(), t.b_ok()};
      },
      [&](double a) { return select(a)->mean_cost; }, probes);
  if (alpha) {
    TunedPlan tp;
    tp.plan = *select(*alpha);
    tp.totals = path_totals(g, tp.plan.path.edges);
    tp.alpha = *alpha;
    tp.probes = probes;
    return tp;
  }
  bool any_n = false, any_b = false;
  if (auto fb = constrained_fallback(g, opts, any_n, any_b)) {
    fb->probes = probes;
    return *fb;
  }
  throw InfeasibleError("no feasible solution exists for any alpha", detail::binding_name(any_n, any_b));
}

// ---------------------------------------------------------------------------
// Several queries sharing one switch and one stream processor

struct MultiPlan {
  std::vector<SelectedPlan> plans;  // per query
  std::vector<double> alphas;       // per query
  PathTotals totals;                // summed over queries
  std::string method;               // solo, shared-alpha or greedy
};

namespace detail {

inline PathTotals sum_totals(const std::vector<PathTotals>& parts, std::size_t M) {
  PathTotals t{std::vector<double>(M, 0.0), std::vector<double>(M, 0.0)};
  for (const auto& p : parts)
    for (std::size_t m = 0; m < M; ++m) {
      t.n[m] += p.n[m];
      t.b[m] += p.b[m];
    }
  return t;
}

inline double violation(const PathTotals& t) {
  double v = 0;
  for (std::size_t m = 0; m < t.n.size(); ++m) v += std::max(0.0, t.n[m] - 1.0) + std::max(0.0, t.b[m] - 1.0);
  return v;
}

}  // namespace detail

inline MultiPlan plan_multi(const std::vector<const QueryPlanGraph*>& graphs, const SelectOptions& opts = {}) {
  if (graphs.empty()) throw ArgumentError("plan_multi needs at least one query");
  const std::size_t M = graphs.front()->windows();
  for (const auto* g : graphs)
    if (g->windows() != M) throw ArgumentError("all queries must be measured on the same windows");

  if (graphs.size() == 1) {
    auto tp = tune_alpha(*graphs.front(), opts);
    return MultiPlan{{tp.plan}, {tp.alpha}, tp.totals, "solo"};
  }

  // solo optima, kept when they fit together
  {
    MultiPlan mp;
    std::vector<PathTotals> parts;
    bool all = true;
    for (const auto* g : graphs) {
      try {
        auto tp = tune_alpha(*g, opts);
        mp.plans.push_back(tp.plan);
        mp.alphas.push_back(tp.alpha);
        parts.push_back(tp.totals);
      } catch (const InfeasibleError&) {
        all = false;
        break;
      }
    }
    if (all) {
      mp.totals = detail::sum_totals(parts, M);
      if (mp.totals.ok()) {
        mp.method = "solo";
        return mp;
      }
    }
  }

  // one alpha for every query, constraints on the summed totals
  std::map<double, std::optional<std::vector<SelectedPlan>>> cache;
  auto select = [&](double a) -> const std::optional<std::vector<SelectedPlan>>& {
    auto it = cache.find(a);
    if (it != cache.end()) return it->second;
    std::optional<std::vector<SelectedPlan>> plans{std::vector<SelectedPlan>{}};
    for (const auto* g : graphs) {
      try {
        plans->push_back(select_plan(*g, a, opts));
      } catch (const InfeasibleError&) {
        plans.reset();
        break;
      }
    }
    return cache.emplace(a, std::move(plans)).first->second;
  };
  auto totals_at = [&](double a) {
    std::vector<PathTotals> parts;
    const auto& plans = *select(a);
    for (std::size_t q = 0; q < graphs.size(); ++q) parts.push_back(path_totals(*graphs[q], plans[q].path.edges));
    return detail::sum_totals(parts, M);
  };
  std::size_t probes = 0;
  auto alpha = detail::search_alpha(
      [&](double a) -> std::optional<std::pair<bool, bool>> {
        if (!select(a)) return std::nullopt;
        auto t = totals_at(a);
        return std::pair{t.n_ok(), t.b_ok()};
      },
      [&](double a) {
        double o = 0;
        for (const auto& p : *select(a)) o += p.mean_cost;
        return o;
      },
      probes);
  if (alpha) {
    MultiPlan mp;
    mp.plans = *select(*alpha);
    mp.alphas.assign(graphs.size(), *alpha);
    mp.totals = totals_at(*alpha);
    mp.method = "shared-alpha";
    return mp;
  }

  // greedy repair: start from the alpha = 0.5 plans and apply the single-query swap that
  // most reduces the total constraint violation until none is left
  struct Option {
    std::vector<std::size_t> vertices, edges;
    PathTotals totals;
    double cost;
  };
  std::vector<std::vector<Option>> options(graphs.size());
  std::vector<std::size_t> choice(graphs.size(), 0);
  for (std::size_t q = 0; q < graphs.size(); ++q) {
    const auto& g = *graphs[q];
    std::vector<WeightedGraph> wgs;
    for (std::size_t m = 0; m < M; ++m) wgs.push_back(weight_graph(g, m, 0.5));
    auto add = [&](const std::vector<std::size_t>& vertices, const std::vector<std::size_t>& edges) {
      double cost = 0;
      for (std::size_t m = 0; m < M; ++m)
        for (auto e : edges) cost += wgs[m].weight[e];
      options[q].push_back({vertices, edges, path_totals(g, edges), cost / static_cast<double>(M)});
    };
    if (count_paths(g) <= opts.exhaustive_cap) {
      walk_paths(g, [](std::size_t) { return true; }, [](std::size_t) {}, add);
    } else {
      for (const auto& edges : detail::k_best_paths(g, wgs, opts.k_best)) {
        std::vector<std::size_t> vertices{g.src()};
        for (auto e : edges) vertices.push_back(g.edges[e].to);
        add(vertices, edges);
      }
    }
    if (options[q].empty()) throw InfeasibleError("no feasible solution exists for " + std::to_string(q), "edge");
    std::sort(options[q].begin(), options[q].end(),
              [](const Option& a, const Option& b) { return path_before(a.cost, a.vertices, b.cost, b.vertices); });
  }
  auto current = [&] {
    std::vector<PathTotals> parts;
    for (std::size_t q = 0; q < graphs.size(); ++q) parts.push_back(options[q][choice[q]].totals);
    return detail::sum_totals(parts, M);
  };
  PathTotals now = current();
  while (!now.ok()) {
    double best_v = detail::violation(now);
    std::optional<std::pair<std::size_t, std::size_t>> swap;
    for (std::size_t q = 0; q < graphs.size(); ++q)
      for (std::size_t o = 0; o < options[q].size(); ++o) {
        if (o == choice[q]) continue;
        std::size_t keep = choice[q];
        choice[q] = o;
        double v = detail::violation(current());
        choice[q] = keep;
        if (v < best_v) {
          best_v = v;
          swap = {{q, o}};
        }
      }
    if (!swap) break;
    choice[swap->first] = swap->second;
    now = current();
  }
  if (!now.ok()) {
    // greedy stalled: settle it exhaustively when the combination space is small
    double space = 1;
    for (const auto& o : options) space *= static_cast<double>(o.size());
    if (space > static_cast<double>(opts.exhaustive_cap))
      throw InfeasibleError("no feasible solution found for the query set",
                            detail::binding_name(now.n_ok(), now.b_ok()));
    // cheapest fitting combination; without `best` it only answers whether one exists
    auto search = [&](bool check_n, bool check_b, std::vector<std::size_t>* best) {
      std::vector<std::size_t> pick(graphs.size());
      std::vector<std::vector<double>> n(graphs.size() + 1, std::vector<double>(M, 0.0)), b = n;
      double best_cost = std::numeric_limits<double>::infinity();
      bool found = false;
      std::function<void(std::size_t, double)> go = [&](std::size_t q, double cost) {
        if (found && !best) return;
        if (q == graphs.size()) {
          found = true;
          if (best && cost < best_cost) {
            best_cost = cost;
            *best = pick;
          }
          return;
        }
        for (std::size_t o = 0; o < options[q].size(); ++o) {
          const auto& t = options[q][o].totals;
          bool ok = true;
          for (std::size_t m = 0; m < M && ok; ++m) {
            n[q + 1][m] = n[q][m] + t.n[m];
            b[q + 1][m] = b[q][m] + t.b[m];
            ok = (!check_n || n[q + 1][m] <= 1.0) && (!check_b || b[q + 1][m] <= 1.0);
          }
          if (!ok) continue;
          pick[q] = o;
          go(q + 1, cost + options[q][o].cost);
        }
      };
      go(0, 0.0);
      return found;
    };
    std::vector<std::size_t> best;
    if (!search(true, true, &best))
      throw InfeasibleError("no feasible solution exists for the query set",
                            detail::binding_name(search(true, false, nullptr), search(false, true, nullptr)));
    choice = best;
    now = current();
  }
  MultiPlan mp;
  for (std::size_t q = 0; q < graphs.size(); ++q) {
    const auto& o = options[q][choice[q]];
    SelectedPlan sp;
    sp.path = PlanPath{o.vertices, o.edges, o.cost};
    sp.alpha = 0.5;
    sp.mean_cost = o.cost;
    sp.exhaustive = false;
    mp.plans.push_back(std::move(sp));
  }
  mp.alphas.assign(graphs.size(), 0.5);
  mp.totals = now;
  mp.method = "greedy";
  return mp;
}

// ---------------------------------------------------------------------------
// Measuring a query's graph on training windows

struct MeasureOptions {
  double n_max = 1;
  double b_max = 1;
  std::uint64_t seed = 0;
  std::vector<SetBindings> extra;  // per window, e.g. join sets
  QueryCatalog catalog;
};

// Fill every cost key with get_cost over each window. The edge entering level r_j from
// r_i runs r_j with its zoom filter fed by r_i's unfiltered output on the same window.
inline void measure_costs(QueryPlanGraph& g, const std::shared_ptr<const ValidatedQuery>& base,
                          const std::optional<std::string>& key, const ThresholdMap& thresholds,
                          const std::vector<std::vector<PacketTuple>>& windows, const MeasureOptions& mo) {
  static const SetBindings kNone;
  auto extra = [&](std::size_t m) -> const SetBindings& { return m < mo.extra.size() ? mo.extra[m] : kNone; };
  const std::size_t M = windows.size();
  g.costs.assign(g.cost_keys.size(), std::vector<CostPair>(M));

  if (!key) {
    for (std::size_t k = 0; k < g.cost_keys.size(); ++k)
      for (std::size_t m = 0; m < M; ++m)
        g.costs[k][m] = get_cost(base, g.partitions[g.cost_keys[k].partition], windows[m], mo.n_max, mo.b_max,
                                 extra(m), mo.seed);
    return;
  }

  std::map<std::pair<int, std::size_t>, RefinedQuery> refined;  // (parent, level)
  auto refined_at = [&](int parent, std::size_t li) -> const RefinedQuery& {
    auto it = refined.find({parent, li});
    if (it != refined.end()) return it->second;
    std::optional<int> pl;
    if (parent >= 0) pl = g.levels[static_cast<std::size_t>(parent)];
    return refined.emplace(std::pair{parent, li}, refine_query(base, *key, g.levels[li], pl, thresholds, mo.catalog))
        .first->second;
  };
  std::map<std::pair<std::size_t, std::size_t>, KeySet> zoom;  // (level, window) -> unfiltered output
  auto zoom_at = [&](std::size_t li, std::size_t m) -> const KeySet& {
    auto it = zoom.find({li, m});
    if (it != zoom.end()) return it->second;
    const RefinedQuery& rq = refined_at(-1, li);
    auto out = execute_window(*rq.query, to_records(*rq.query, windows[m]), extra(m)).outputs;
    return zoom.emplace(std::pair{li, m}, zoom_entries(rq, out)).first->second;
  };
  for (std::size_t k = 0; k < g.cost_keys.size(); ++k) {
    const CostKey& ck = g.cost_keys[k];
    const RefinedQuery& rq = refined_at(ck.parent, ck.level);
    const PartitionPlan& part = g.partitions[ck.partition];
    PartitionPlan mapped{rq.prefix_length(part.p), part.sketch};
    for (std::size_t m = 0; m < M; ++m) {
      SetBindings sets = extra(m);
      if (rq.zoom_set) sets[*rq.zoom_set] = zoom_at(static_cast<std::size_t>(ck.parent), m);
      g.costs[k][m] = get_cost(rq.query, mapped, windows[m], mo.n_max, mo.b_max, sets, mo.seed);
    }
  }
}

// Split points the planner explores by default: none, all, and every prefix not ending
// in a map (a trailing map never changes load or state).
inline std::vector<PartitionPlan> default_partitions(const ValidatedQuery& q, bool sketches) {
  std::vector<PartitionPlan> out;
  const std::size_t P = q.operator_count();
  for (std::size_t p = 0; p <= P; ++p) {
    if (p != 0 && p != P && q.ops[p - 1].kind == OpKind::Map) continue;
    for (bool sk : {false, true}) {
      if (sk && (!sketches || !prefix_has_stateful(q, p))) continue;
      PartitionPlan plan{p, sk};
      if (is_supported(q, plan)) out.push_back(plan);
    }
  }
  return out;
}

}  // namespace sonata
