#pragma once

// Orchestration: training plans from a trace, plan files, window replay with zoom-in
// updates, evaluation baselines and the metrics they report.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <future>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "sonata/error.hpp"
#include "sonata/packet.hpp"
#include "sonata/partitioning.hpp"
#include "sonata/pisa.hpp"
#include "sonata/planner.hpp"
#include "sonata/query.hpp"
#include "sonata/refinement.hpp"
#include "sonata/stream_engine.hpp"
#include "sonata/toml.hpp"
#include "sonata/validate.hpp"

namespace sonata {

using ordered_json = nlohmann::ordered_json;

inline std::string format_number(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", x);
  return buf;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << text;
}

// ---------------------------------------------------------------------------
// Config

struct Config {
  double window = 1.0;  // seconds
  double n_max = 1e9;
  double b_max = 1e9;
  std::optional<double> max_delay;  // seconds; defaults to the level count in windows
  std::vector<int> levels;          // empty: the key type's default grid
  std::size_t training_windows = 20;
  std::uint64_t seed = 0;
  bool sketches = false;
  bool shared = true;        // plan all queries against one switch
  bool alpha_search = true;  // false: select at `alpha` only
  double alpha = 0.5;
  std::map<std::string, std::string> keys;  // per-query refinement key, "none" disables
  SelectOptions select;
};

inline Config parse_config(std::string_view text) {
  auto t = toml::parse(text);
  Config c;
  c.window = t.number("window", c.window);
  c.n_max = t.number("n_max", c.n_max);
  c.b_max = t.number("b_max", c.b_max);
  if (t.find("max_delay")) c.max_delay = t.number("max_delay", 0);
  if (auto lv = t.integers("levels"))
    for (auto l : *lv) c.levels.push_back(static_cast<int>(l));
  c.training_windows = static_cast<std::size_t>(t.integer("training_windows", 20));
  c.seed = static_cast<std::uint64_t>(t.integer("seed", 0));
  c.sketches = t.boolean("sketches", false);
  c.shared = t.boolean("shared", true);
  if (const auto* a = t.table("alpha")) {
    c.alpha_search = a->boolean("search", true);
    c.alpha = a->number("value", 0.5);
  }
  if (const auto* k = t.table("keys"))
    for (const auto& [name, _] : k->values) c.keys[name] = *k->string(name);
  if (const auto* s = t.table("select")) {
    c.select.exhaustive_cap = static_cast<std::size_t>(s->integer("exhaustive_cap", 2'000'000));
    c.select.k_best = static_cast<std::size_t>(s->integer("k_best", 100));
  }
  if (!(c.window > 0)) throw ValidationError("config: window must be positive");
  if (c.n_max < 0 || c.b_max < 0) throw ValidationError("config: n_max and b_max must not be negative");
  if (c.training_windows == 0) throw ValidationError("config: training_windows must be positive");
  if (!(c.alpha >= 0 && c.alpha <= 1)) throw ValidationError("config: alpha must lie in [0, 1]");
  return c;
}

inline ordered_json config_json(const Config& c) {
  ordered_json j;
  j["window"] = c.window;
  j["n_max"] = c.n_max;
  j["b_max"] = c.b_max;
  j["max_delay"] = c.max_delay ? ordered_json(*c.max_delay) : ordered_json(nullptr);
  j["levels"] = c.levels;
  j["training_windows"] = c.training_windows;
  j["seed"] = c.seed;
  j["sketches"] = c.sketches;
  j["shared"] = c.shared;
  j["alpha_search"] = c.alpha_search;
  j["alpha"] = c.alpha;
  return j;
}

// ---------------------------------------------------------------------------
// Plans

struct PlanStep {
  int level = 0;  // 0 when the query runs unrefined
  PartitionPlan plan;
};

struct QueryPlan {
  std::string query;
  std::string source;  // printed query text
  std::size_t order = 0;
  std::optional<std::string> key;
  std::vector<PlanStep> steps;  // one per interval, coarse to fine
  ThresholdMap thresholds;
  double alpha = 0.5;
  std::string method = "solo";
  double rmse = 0;
  double mean_cost = 0;
  std::vector<double> train_n, train_b;  // normalized per training window
  std::vector<std::string> columns;      // trace columns used for training, name:type
  Config config;
};

inline ordered_json value_json(const Value& v) {
  if (auto i = std::get_if<std::int64_t>(&v)) return *i;
  if (auto d = std::get_if<double>(&v)) return *d;
  if (auto s = std::get_if<std::string>(&v)) return *s;
  return nullptr;
}

inline Value json_value(const ordered_json& j) {
  if (j.is_number_integer()) return j.get<std::int64_t>();
  if (j.is_number()) return j.get<double>();
  if (j.is_string()) return j.get<std::string>();
  return Value{};
}

inline ordered_json plan_json(const QueryPlan& p) {
  ordered_json j;
  j["format"] = "sonata-plan";
  j["version"] = 1;
  j["query"] = p.query;
  j["order"] = p.order;
  j["source"] = p.source;
  j["key"] = p.key ? ordered_json(*p.key) : ordered_json(nullptr);
  ordered_json steps = ordered_json::array();
  for (std::size_t i = 0; i < p.steps.size(); ++i) {
    ordered_json s;
    s["interval"] = i + 1;
    if (p.key) s["level"] = p.steps[i].level;
    s["p"] = p.steps[i].plan.p;
    s["sketch"] = p.steps[i].plan.sketch;
    steps.push_back(s);
  }
  j["steps"] = steps;
  ordered_json th = ordered_json::object();
  for (const auto& [level, v] : p.thresholds) th[std::to_string(level)] = value_json(v);
  j["thresholds"] = th;
  j["alpha"] = p.alpha;
  j["method"] = p.method;
  ordered_json train;
  train["rmse"] = p.rmse;
  train["mean_cost"] = p.mean_cost;
  train["n"] = p.train_n;
  train["b"] = p.train_b;
  j["training"] = train;
  j["columns"] = p.columns;
  j["config"] = config_json(p.config);
  return j;
}

inline std::string plan_text(const QueryPlan& p) { return plan_json(p).dump(2) + "\n"; }

inline QueryPlan plan_from_json(const ordered_json& j) {
  try {
    if (j.value("format", "") != "sonata-plan") throw SchemaError("not a plan file");
    if (j.at("version").get<int>() != 1) throw SchemaError("unsupported plan version");
    QueryPlan p;
    p.query = j.at("query").get<std::string>();
    p.order = j.at("order").get<std::size_t>();
    p.source = j.at("source").get<std::string>();
    if (!j.at("key").is_null()) p.key = j.at("key").get<std::string>();
    for (const auto& s : j.at("steps")) {
      PlanStep st;
      if (p.key) st.level = s.at("level").get<int>();
      st.plan.p = s.at("p").get<std::size_t>();
      st.plan.sketch = s.at("sketch").get<bool>();
      p.steps.push_back(st);
    }
    if (p.steps.empty()) throw SchemaError("plan has no steps");
    for (const auto& [level, v] : j.at("thresholds").items()) p.thresholds[std::stoi(level)] = json_value(v);
    p.alpha = j.at("alpha").get<double>();
    p.method = j.value("method", "solo");
    const auto& t = j.at("training");
    p.rmse = t.at("rmse").get<double>();
    p.mean_cost = t.at("mean_cost").get<double>();
    p.train_n = t.at("n").get<std::vector<double>>();
    p.train_b = t.at("b").get<std::vector<double>>();
    p.columns = j.at("columns").get<std::vector<std::string>>();
    const auto& c = j.at("config");
    p.config.window = c.at("window").get<double>();
    p.config.n_max = c.at("n_max").get<double>();
    p.config.b_max = c.at("b_max").get<double>();
    if (!c.at("max_delay").is_null()) p.config.max_delay = c.at("max_delay").get<double>();
    p.config.levels = c.at("levels").get<std::vector<int>>();
    p.config.training_windows = c.at("training_windows").get<std::size_t>();
    p.config.seed = c.at("seed").get<std::uint64_t>();
    p.config.sketches = c.at("sketches").get<bool>();
    p.config.shared = c.at("shared").get<bool>();
    p.config.alpha_search = c.at("alpha_search").get<bool>();
    p.config.alpha = c.at("alpha").get<double>();
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("malformed plan file: ") + e.what());
  }
}

inline std::string plan_file_name(const std::string& query) { return query + ".plan.json"; }

inline std::vector<QueryPlan> read_plan_dir(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw Error("plan directory '" + dir.string() + "' not found");
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    auto name = e.path().filename().string();
    if (name.size() > 10 && name.substr(name.size() - 10) == ".plan.json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<QueryPlan> plans;
  for (const auto& f : files) {
    ordered_json j;
    try {
      j = ordered_json::parse(read_file(f));
    } catch (const nlohmann::json::parse_error& e) {
      throw SchemaError(f.filename().string() + ": " + e.what());
    }
    plans.push_back(plan_from_json(j));
  }
  if (plans.empty()) throw Error("no plan files in '" + dir.string() + "'");
  std::stable_sort(plans.begin(), plans.end(), [](const QueryPlan& a, const QueryPlan& b) { return a.order < b.order; });
  return plans;
}

// ---------------------------------------------------------------------------
// Traces and schemas

inline std::vector<std::string> trace_columns(const TraceSchema& s) {
  std::vector<std::string> out;
  for (const auto& c : s) out.push_back(c.name + ":" + std::string(type_name(c.type)));
  return out;
}

// Built-in fields plus the trace's extension columns.
inline Schema query_schema(const TraceSchema& ts) {
  Schema s = default_packet_schema();
  for (const auto& c : ts)
    if (!c.field) s.push_back({c.name, c.type});
  return s;
}

inline std::vector<std::vector<PacketTuple>> trace_windows(const Trace& trace, double width) {
  std::vector<std::vector<PacketTuple>> out;
  for (auto& w : window_partition(trace.packets, width)) out.push_back(std::move(w.packets));
  return out;
}

inline Trace load_trace(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  return parse_trace(in);
}

// ---------------------------------------------------------------------------
// Executable plans

struct ExecLevel {
  std::shared_ptr<const ValidatedQuery> query;
  PartitionPlan plan;  // split point in this level's own operators
  std::optional<RefinedQuery> refined;
};

struct ExecQuery {
  std::string name;
  std::shared_ptr<const ValidatedQuery> base;
  std::vector<ExecLevel> levels;     // coarse to fine
  std::vector<std::string> depends;  // queries whose output this one reads
};

inline std::vector<std::string> query_dependencies(const ValidatedQuery& q, const QueryCatalog& catalog) {
  std::vector<std::string> out;
  for (const auto& s : q.set_names)
    if (catalog.count(s) && std::find(out.begin(), out.end(), s) == out.end()) out.push_back(s);
  return out;
}

inline ExecQuery make_exec(const std::shared_ptr<const ValidatedQuery>& base, const std::optional<std::string>& key,
                           const std::vector<PlanStep>& steps, const ThresholdMap& thresholds,
                           const QueryCatalog& catalog) {
  if (steps.empty()) throw ArgumentError(base->name() + ": plan has no steps");
  ExecQuery e;
  e.name = base->name();
  e.base = base;
  e.depends = query_dependencies(*base, catalog);
  if (!key) {
    if (steps.size() != 1) throw SchemaError(base->name() + ": an unrefined plan has exactly one step");
    if (auto why = prefix_unsupported_reason(*base, steps[0].plan.p, steps[0].plan.sketch))
      throw UnsupportedError(base->name() + ": " + *why);
    e.levels.push_back({base, steps[0].plan, std::nullopt});
    return e;
  }
  std::vector<int> levels;
  std::vector<PartitionPlan> plans;
  for (const auto& s : steps) {
    levels.push_back(s.level);
    plans.push_back(s.plan);
  }
  for (auto& cl : build_chain(base, *key, levels, plans, thresholds, catalog)) {
    auto pq = chain_partition(cl);
    if (auto why = prefix_unsupported_reason(*pq.query, pq.plan.p, pq.plan.sketch))
      throw UnsupportedError(pq.query->name() + ": " + *why);
    e.levels.push_back({pq.query, pq.plan, std::move(cl.refined)});
  }
  return e;
}

// Re-validate every plan's query in order and build its execution chain.
inline std::vector<ExecQuery> load_exec(const std::vector<QueryPlan>& plans, const TraceSchema& trace_schema) {
  std::set<std::string> have;
  for (const auto& c : trace_columns(trace_schema)) have.insert(c);
  Schema schema = query_schema(trace_schema);
  QueryCatalog catalog;
  std::vector<ExecQuery> out;
  for (const auto& p : plans) {
    for (const auto& c : p.columns)
      if (!have.count(c)) throw SchemaError(p.query + ": trace lacks column '" + c + "' used for planning");
    auto ast = parse_query(p.source);
    if (ast.name != p.query) throw SchemaError(p.query + ": plan source names '" + ast.name + "'");
    auto vq = std::make_shared<const ValidatedQuery>(validate(ast, schema, catalog));
    out.push_back(make_exec(vq, p.key, p.steps, p.thresholds, catalog));
    catalog.emplace(vq->name(), vq);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Replay

struct MetricsRow {
  std::size_t window = 0;
  std::string query;  // "__all__" for the switch-wide row
  std::uint64_t n_raw = 0;
  std::uint64_t b_raw = 0;
  std::uint64_t reports = 0;
  std::uint64_t detections = 0;
};

struct QuerySummary {
  std::string query;
  std::size_t intervals = 0;
  double mean_n_raw = 0;
  std::uint64_t max_n_raw = 0;
  std::uint64_t max_b_raw = 0;
  std::optional<std::size_t> delay;  // windows from first satisfying traffic to first detection
  std::set<std::string> detected;    // finest-level keys, formatted
  std::set<std::string> expected;    // keys the unrefined query finds over the same windows
};

struct RunMetrics {
  std::vector<MetricsRow> rows;
  std::vector<QuerySummary> queries;
  std::uint64_t report_tuples = 0;  // switch-wide, summed over windows
  std::uint64_t updates = 0;        // table updates installed between windows
};

inline std::string format_key(const ValidatedQuery& q, const Record& r) {
  if (r.empty()) return "";
  return format_value(r[0], q.output_schema().front().type);
}

// Stream-only outputs of every query over the windows; joins read the producer's
// previous-window output.
inline std::vector<std::vector<std::vector<Record>>> oracle_outputs(const std::vector<ExecQuery>& queries,
                                                                    const std::vector<std::vector<PacketTuple>>& windows) {
  std::map<std::string, std::size_t> idx;
  for (std::size_t q = 0; q < queries.size(); ++q) idx[queries[q].name] = q;
  std::vector<std::vector<std::vector<Record>>> out(queries.size(), std::vector<std::vector<Record>>(windows.size()));
  for (std::size_t t = 0; t < windows.size(); ++t)
    for (std::size_t q = 0; q < queries.size(); ++q) {
      SetBindings sets;
      for (const auto& d : queries[q].depends)
        sets[d] = t ? make_key_set(out[idx.at(d)][t - 1]) : KeySet{};
      out[q][t] = execute_window(*queries[q].base, to_records(*queries[q].base, windows[t]), sets).outputs;
    }
  return out;
}

// Replay windows through one shared switch. Every level of every query runs each window;
// between windows the zoom tables are refreshed from the previous outputs and the
// stateful stages are reset.
inline RunMetrics replay(const std::vector<ExecQuery>& queries, const std::vector<std::vector<PacketTuple>>& windows,
                         std::uint64_t seed, std::size_t first_window = 0) {
  if (queries.empty()) throw ArgumentError("nothing to run");
  std::map<std::string, std::size_t> qidx;
  std::vector<CompileRequest> reqs;
  std::map<std::string, std::size_t> owner;  // level query name -> query index
  for (std::size_t q = 0; q < queries.size(); ++q) {
    qidx[queries[q].name] = q;
    for (const auto& l : queries[q].levels) {
      reqs.push_back({l.query, l.plan.p, l.plan.sketch});
      owner[l.query->name()] = q;
    }
  }
  Pipeline pipe(reqs, PipelineOptions{seed, std::nullopt});

  RunMetrics m;
  std::vector<std::vector<std::vector<Record>>> prev(queries.size());  // [query][level]
  for (std::size_t q = 0; q < queries.size(); ++q) prev[q].resize(queries[q].levels.size());
  std::vector<std::vector<std::vector<Record>>> detections(queries.size());  // [query][window]

  std::map<std::string, std::uint64_t> last_reports;
  for (const auto& r : reqs) last_reports[r.query->name()] = 0;
  std::uint64_t last_total = 0;

  for (std::size_t t = 0; t < windows.size(); ++t) {
    pipe.begin_window(first_window + t);
    std::vector<std::vector<SetBindings>> level_sets(queries.size());
    for (std::size_t q = 0; q < queries.size(); ++q) {
      const auto& eq = queries[q];
      SetBindings shared;
      for (const auto& d : eq.depends) {
        std::size_t dq = qidx.at(d);
        shared[d] = t ? make_key_set(detections[dq][t - 1]) : KeySet{};
      }
      for (std::size_t i = 0; i < eq.levels.size(); ++i) {
        SetBindings s = shared;
        const auto& l = eq.levels[i];
        if (i && l.refined && l.refined->zoom_set)
          s[*l.refined->zoom_set] = zoom_entries(*eq.levels[i - 1].refined, prev[q][i - 1]);
        for (const auto& [name, keys] : s) m.updates += pipe.install_filter_entries(l.query->name(), keys, name);
        level_sets[q].push_back(std::move(s));
      }
    }

    std::map<std::string, std::vector<QueryReport>, std::less<>> reports;
    std::vector<std::uint64_t> query_tuples(queries.size(), 0);
    for (const auto& pkt : windows[t]) {
      auto rt = pipe.process_packet(pkt);
      if (!rt) continue;
      std::set<std::size_t> hit;
      for (auto& e : rt->entries) {
        hit.insert(owner.at(e.query));
        reports[e.query].push_back(std::move(e));
      }
      for (auto q : hit) ++query_tuples[q];
    }

    MetricsRow all{first_window + t, "__all__", 0, pipe.state_bits().total_bits, 0, 0};
    all.reports = pipe.reports_emitted() - last_total;
    last_total = pipe.reports_emitted();
    m.report_tuples += all.reports;
    for (std::size_t q = 0; q < queries.size(); ++q) {
      const auto& eq = queries[q];
      MetricsRow row{first_window + t, eq.name, 0, 0, query_tuples[q], 0};
      for (std::size_t i = 0; i < eq.levels.size(); ++i) {
        const auto& l = eq.levels[i];
        const std::string& name = l.query->name();
        std::uint64_t r = pipe.query_reports(name);
        row.n_raw += r - last_reports[name];
        last_reports[name] = r;
        row.b_raw += pipe.query_state_bits(name);
        auto collapsed = collapse_reports(*l.query, l.plan.p, std::move(reports[name]));
        prev[q][i] = run_suffix(*l.query, l.plan.p, std::move(collapsed), level_sets[q][i]);
      }
      detections[q].push_back(prev[q].back());
      row.detections = prev[q].back().size();
      all.n_raw += row.n_raw;
      all.detections += row.detections;
      m.rows.push_back(row);
    }
    m.rows.push_back(all);
  }

  auto oracle = oracle_outputs(queries, windows);
  for (std::size_t q = 0; q < queries.size(); ++q) {
    QuerySummary s;
    s.query = queries[q].name;
    s.intervals = queries[q].levels.size();
    std::size_t count = 0;
    for (const auto& r : m.rows) {
      if (r.query != s.query) continue;
      s.mean_n_raw += static_cast<double>(r.n_raw);
      s.max_n_raw = std::max(s.max_n_raw, r.n_raw);
      s.max_b_raw = std::max(s.max_b_raw, r.b_raw);
      ++count;
    }
    if (count) s.mean_n_raw /= static_cast<double>(count);
    std::optional<std::size_t> first_truth, first_hit;
    for (std::size_t t = 0; t < windows.size(); ++t) {
      for (const auto& r : oracle[q][t]) s.expected.insert(format_key(*queries[q].base, r));
      for (const auto& r : detections[q][t]) s.detected.insert(format_key(*queries[q].base, r));
      if (!first_truth && !oracle[q][t].empty()) first_truth = t;
      if (first_truth && !first_hit && !detections[q][t].empty()) first_hit = t;
    }
    if (first_truth && first_hit) s.delay = *first_hit - *first_truth + 1;
    m.queries.push_back(std::move(s));
  }
  return m;
}

inline void write_metrics_csv(std::ostream& os, const RunMetrics& m) {
  os << "window,query,n_raw,b_raw,reports,detections\n";
  for (const auto& r : m.rows)
    os << r.window << ',' << r.query << ',' << r.n_raw << ',' << r.b_raw << ',' << r.reports << ',' << r.detections
       << '\n';
}

inline std::string join_keys(const std::set<std::string>& keys) {
  std::string out;
  for (const auto& k : keys) out += (out.empty() ? "" : ";") + k;
  return out;
}

inline void write_summary(std::ostream& os, const RunMetrics& m) {
  for (const auto& s : m.queries)
    os << "query=" << s.query << " intervals=" << s.intervals << " mean_n_raw=" << format_number(s.mean_n_raw)
       << " max_n_raw=" << s.max_n_raw << " max_b_raw=" << s.max_b_raw
       << " delay=" << (s.delay ? std::to_string(*s.delay) : std::string("none"))
       << " detected=" << (s.detected.empty() ? "-" : join_keys(s.detected)) << '\n';
  os << "report_tuples=" << m.report_tuples << " updates=" << m.updates << '\n';
}

// ---------------------------------------------------------------------------
// Planning

struct PlanOutcome {
  std::string query;
  std::optional<QueryPlan> plan;
  std::string binding;  // set when infeasible
  std::string message;
};

struct QueryWorkload {
  std::vector<std::shared_ptr<const ValidatedQuery>> queries;
  QueryCatalog catalog;
  TraceSchema trace_schema;
  std::vector<std::vector<PacketTuple>> windows;  // every window of the trace
};

inline QueryWorkload load_workload(std::string_view query_text, const Trace& trace, double window) {
  QueryWorkload w;
  w.trace_schema = trace.schema;
  w.queries = validate_all(parse_query_file(query_text), query_schema(trace.schema));
  w.catalog = make_catalog(w.queries);
  w.windows = trace_windows(trace, window);
  return w;
}

// Refinement key for a query: configured, else its first refinement key when it has a
// threshold to backtrack.
inline std::optional<std::string> choose_key(const ValidatedQuery& q, const Config& c) {
  auto it = c.keys.find(q.name());
  if (it != c.keys.end()) {
    if (it->second == "none") return std::nullopt;
    const auto& keys = q.refinement_keys;
    if (std::find(keys.begin(), keys.end(), it->second) == keys.end())
      throw ValidationError(q.name() + ": '" + it->second + "' is not a refinement key");
    return it->second;
  }
  if (q.refinement_keys.empty() || !find_threshold_filter(q)) return std::nullopt;
  return q.refinement_keys.front();
}

inline std::vector<int> choose_levels(const ValidatedQuery& q, const std::string& key, const Config& c) {
  FieldType t = refinement_key_type(q, key);
  if (t == FieldType::Ipv4 && !c.levels.empty()) return c.levels;
  return default_levels(t);
}

// Everything needed to plan one query: its graph with measured costs.
struct QueryModel {
  std::shared_ptr<const ValidatedQuery> query;
  std::optional<std::string> key;
  std::vector<int> levels;
  ThresholdMap thresholds;
  QueryPlanGraph graph;
};

namespace detail {

// Per-window join bindings for training: each producer's stream-only output from the
// previous window.
inline std::vector<std::vector<SetBindings>> training_bindings(const QueryWorkload& w,
                                                               const std::vector<std::vector<PacketTuple>>& train) {
  std::vector<ExecQuery> plain;
  for (const auto& q : w.queries) {
    ExecQuery e;
    e.name = q->name();
    e.base = q;
    e.depends = query_dependencies(*q, w.catalog);
    plain.push_back(std::move(e));
  }
  auto out = oracle_outputs(plain, train);
  std::map<std::string, std::size_t> idx;
  for (std::size_t q = 0; q < plain.size(); ++q) idx[plain[q].name] = q;
  std::vector<std::vector<SetBindings>> sets(plain.size(), std::vector<SetBindings>(train.size()));
  for (std::size_t q = 0; q < plain.size(); ++q)
    for (std::size_t t = 0; t < train.size(); ++t)
      for (const auto& d : plain[q].depends) sets[q][t][d] = t ? make_key_set(out[idx.at(d)][t - 1]) : KeySet{};
  return sets;
}

// Partitions usable at every level of the chain.
inline std::vector<PartitionPlan> chain_partitions(const QueryModel& m, bool sketches, const QueryCatalog& catalog) {
  std::vector<PartitionPlan> out;
  for (const auto& part : default_partitions(*m.query, sketches)) {
    bool ok = true;
    if (m.key) {
      for (std::size_t i = 0; i < m.levels.size() && ok; ++i)
        for (bool zoomed : {false, true}) {
          if (zoomed && i == 0) continue;
          std::optional<int> parent;
          if (zoomed) parent = m.levels[i - 1];
          auto rq = refine_query(m.query, *m.key, m.levels[i], parent, m.thresholds, catalog);
          ok = ok && is_supported(*rq.query, {rq.prefix_length(part.p), part.sketch});
        }
    }
    if (ok) out.push_back(part);
  }
  return out;
}

}  // namespace detail

inline std::vector<QueryModel> build_models(const QueryWorkload& w, const Config& c) {
  const std::size_t M = std::min(c.training_windows, w.windows.size());
  if (M == 0) throw ValidationError("trace has no windows to train on");
  std::vector<std::vector<PacketTuple>> train(w.windows.begin(), w.windows.begin() + static_cast<std::ptrdiff_t>(M));
  auto sets = detail::training_bindings(w, train);
  std::vector<QueryModel> models;
  for (std::size_t q = 0; q < w.queries.size(); ++q) {
    QueryModel m;
    m.query = w.queries[q];
    m.key = choose_key(*m.query, c);
    if (m.key) {
      m.levels = choose_levels(*m.query, *m.key, c);
      m.thresholds = backtrack_thresholds(m.query, RefinementSpec{*m.key, m.levels}, train, sets[q], w.catalog);
    } else {
      m.levels = {0};
    }
    auto parts = detail::chain_partitions(m, c.sketches, w.catalog);
    if (parts.empty()) throw UnsupportedError(m.query->name() + ": no supported partition");
    std::size_t D = c.max_delay ? intervals_for_delay(*c.max_delay, c.window) : m.levels.size();
    m.graph = build_plan_graph(m.levels, parts, D);
    MeasureOptions mo;
    mo.n_max = c.n_max;
    mo.b_max = c.b_max;
    mo.seed = c.seed;
    mo.extra = sets[q];
    mo.catalog = w.catalog;
    measure_costs(m.graph, m.query, m.key, m.thresholds, train, mo);
    models.push_back(std::move(m));
  }
  return models;
}

inline QueryPlan make_plan(const QueryModel& m, const SelectedPlan& sp, double alpha, const std::string& method,
                           std::size_t order, const TraceSchema& schema, const Config& c) {
  QueryPlan p;
  p.query = m.query->name();
  p.source = print_query(m.query->ast);
  p.order = order;
  p.key = m.key;
  for (std::size_t i = 1; i + 1 < sp.path.vertices.size(); ++i) {
    const auto& v = m.graph.vertices[sp.path.vertices[i]];
    p.steps.push_back({m.key ? v.level : 0, v.plan});
  }
  if (m.key)
    for (const auto& s : p.steps) p.thresholds[s.level] = m.thresholds.at(s.level);
  p.alpha = alpha;
  p.method = method;
  p.rmse = sp.rmse;
  p.mean_cost = sp.mean_cost;
  auto t = path_totals(m.graph, sp.path.edges);
  p.train_n = t.n;
  p.train_b = t.b;
  p.columns = trace_columns(schema);
  p.config = c;
  return p;
}

// Plan every query; infeasible ones carry the binding constraint instead of a plan.
inline std::vector<PlanOutcome> plan_workload(const QueryWorkload& w, const Config& c) {
  std::vector<PlanOutcome> out;
  if (c.n_max <= 0) {
    // detections always reach the stream processor, so a zero tuple budget never fits
    for (const auto& q : w.queries)
      out.push_back({q->name(), std::nullopt, "N_max", "no feasible solution exists: N_max is zero"});
    return out;
  }
  auto models = build_models(w, c);
  std::vector<std::optional<TunedPlan>> solo(models.size());
  bool all = true;
  for (std::size_t q = 0; q < models.size(); ++q) {
    PlanOutcome o{models[q].query->name(), std::nullopt, "", ""};
    try {
      TunedPlan tp;
      if (c.alpha_search) {
        tp = tune_alpha(models[q].graph, c.select);
      } else {
        tp.plan = select_plan(models[q].graph, c.alpha, c.select);
        tp.alpha = c.alpha;
        tp.totals = path_totals(models[q].graph, tp.plan.path.edges);
        if (!tp.totals.ok())
          throw InfeasibleError("no feasible solution exists at the configured alpha",
                                tp.totals.n_ok() ? "B_max" : (tp.totals.b_ok() ? "N_max" : "N_max and B_max"));
      }
      o.plan = make_plan(models[q], tp.plan, tp.alpha, tp.fallback ? "fallback" : "solo", q, w.trace_schema, c);
      solo[q] = std::move(tp);
    } catch (const InfeasibleError& e) {
      o.binding = e.binding();
      o.message = e.what();
      all = false;
    }
    out.push_back(std::move(o));
  }
  if (!c.shared || !all || models.size() < 2) return out;

  std::vector<const QueryPlanGraph*> graphs;
  for (const auto& m : models) graphs.push_back(&m.graph);
  try {
    auto mp = plan_multi(graphs, c.select);
    for (std::size_t q = 0; q < models.size(); ++q)
      out[q].plan = make_plan(models[q], mp.plans[q], mp.alphas[q], mp.method, q, w.trace_schema, c);
  } catch (const InfeasibleError& e) {
    for (auto& o : out) {
      o.plan.reset();
      o.binding = e.binding();
      o.message = std::string(e.what()) + " (queries share the switch)";
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Baselines

struct BaselineResult {
  std::string name;
  std::vector<QueryPlan> plans;
  RunMetrics metrics;
};

// Leading filters only: the part a match-only switch can run.
inline std::size_t part_of_split(const ValidatedQuery& q) {
  std::size_t p = 0;
  while (p < q.operator_count() && q.ops[p].kind == OpKind::Filter) ++p;
  while (p > 0 && !is_supported(q, {p, false})) --p;
  return p;
}

inline std::size_t max_supported_split(const ValidatedQuery& q) {
  std::size_t p = q.operator_count();
  while (p > 0 && !is_supported(q, {p, false})) --p;
  return p;
}

inline QueryPlan fixed_plan(const QueryModel& m, std::size_t order, const TraceSchema& schema, const Config& c,
                            std::optional<std::string> key, std::vector<PlanStep> steps) {
  QueryPlan p;
  p.query = m.query->name();
  p.source = print_query(m.query->ast);
  p.order = order;
  p.key = std::move(key);
  p.steps = std::move(steps);
  if (p.key)
    for (const auto& s : p.steps) p.thresholds[s.level] = m.thresholds.at(s.level);
  p.method = "fixed";
  p.columns = trace_columns(schema);
  p.config = c;
  return p;
}

// The four reference planners plus the learned one, each replayed over the test windows
// (those after the training split).
inline std::vector<BaselineResult> run_baselines(const QueryWorkload& w, const Config& c) {
  auto models = build_models(w, c);
  auto learned = plan_workload(w, c);
  std::vector<BaselineResult> runs(5);
  runs[0].name = "stream-only";
  runs[1].name = "part-of";
  runs[2].name = "part-pisa";
  runs[3].name = "fixed-refinement";
  runs[4].name = "learned";
  for (std::size_t q = 0; q < models.size(); ++q) {
    const auto& m = models[q];
    const auto& vq = *m.query;
    runs[0].plans.push_back(fixed_plan(m, q, w.trace_schema, c, std::nullopt, {{0, {0, false}}}));
    runs[1].plans.push_back(fixed_plan(m, q, w.trace_schema, c, std::nullopt, {{0, {part_of_split(vq), false}}}));
    runs[2].plans.push_back(fixed_plan(m, q, w.trace_schema, c, std::nullopt, {{0, {max_supported_split(vq), false}}}));
    if (m.key) {
      // the deepest split every level supports
      auto parts = detail::chain_partitions(m, false, w.catalog);
      std::size_t p = 0;
      for (const auto& part : parts) p = std::max(p, part.p);
      std::vector<PlanStep> steps;
      for (int l : m.levels) steps.push_back({l, {p, false}});
      runs[3].plans.push_back(fixed_plan(m, q, w.trace_schema, c, m.key, steps));
    } else {
      runs[3].plans.push_back(runs[2].plans.back());
    }
    if (!learned[q].plan)
      throw InfeasibleError(learned[q].message, learned[q].binding);
    runs[4].plans.push_back(*learned[q].plan);
  }

  const std::size_t M = std::min(c.training_windows, w.windows.size());
  std::vector<std::vector<PacketTuple>> test(w.windows.begin() + static_cast<std::ptrdiff_t>(M), w.windows.end());
  if (test.empty()) throw ValidationError("no test windows after the training split");
  std::vector<std::future<RunMetrics>> jobs;
  for (auto& r : runs) {
    auto exec = load_exec(r.plans, w.trace_schema);
    jobs.push_back(std::async(std::launch::async, [exec = std::move(exec), &test, &c, M] {
      return replay(exec, test, c.seed, M);
    }));
  }
  for (std::size_t i = 0; i < runs.size(); ++i) runs[i].metrics = jobs[i].get();
  return runs;
}

inline void write_baseline_table(std::ostream& os, const std::vector<BaselineResult>& runs) {
  os << "planner,query,intervals,mean_n_raw,max_n_raw,max_b_raw,delay,detected\n";
  for (const auto& r : runs)
    for (const auto& s : r.metrics.queries)
      os << r.name << ',' << s.query << ',' << s.intervals << ',' << format_number(s.mean_n_raw) << ','
         << s.max_n_raw << ',' << s.max_b_raw << ',' << (s.delay ? std::to_string(*s.delay) : std::string("none"))
         << ',' << s.detected.size() << '\n';
}

}  // namespace sonata
