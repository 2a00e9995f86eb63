#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "scenario.hpp"
#include "sonata/runtime.hpp"
#include "sonata/toml.hpp"
#include "sonata/tracegen.hpp"
#include "support.hpp"

using namespace sonata;
using namespace sonata::testing;

namespace {

std::string csv(const RunMetrics& m) {
  std::ostringstream os;
  write_metrics_csv(os, m);
  return os.str();
}

QueryPlan stream_only(const std::shared_ptr<const ValidatedQuery>& q, std::size_t order, const TraceSchema& s) {
  QueryPlan p;
  p.query = q->name();
  p.source = print_query(q->ast);
  p.order = order;
  p.steps = {{0, {0, false}}};
  p.columns = trace_columns(s);
  return p;
}

}  // namespace

TEST(Toml, TablesArraysAndComments) {
  auto t = toml::parse(
      "# top\n"
      "seed = 7  # trailing\n"
      "rate = 1_000\n"
      "ratio = 2.5e-1\n"
      "name = \"a\\tb\"\n"
      "levels = [8, 16,\n  32]\n"
      "[background]\n"
      "skew = 1.1\n"
      "on = true\n"
      "[[anomaly]]\n"
      "key = \"1.2.3.4\"\n"
      "[[anomaly]]\n"
      "key = \"5.6.7.8\"\n");
  EXPECT_EQ(t.integer("seed", 0), 7);
  EXPECT_EQ(t.integer("rate", 0), 1000);
  EXPECT_DOUBLE_EQ(t.number("ratio", 0), 0.25);
  EXPECT_EQ(*t.string("name"), "a\tb");
  EXPECT_EQ(*t.integers("levels"), (std::vector<std::int64_t>{8, 16, 32}));
  EXPECT_DOUBLE_EQ(t.table("background")->number("skew", 0), 1.1);
  EXPECT_TRUE(t.table("background")->boolean("on", false));
  ASSERT_EQ(t.array("anomaly")->size(), 2u);
  EXPECT_EQ(*(*t.array("anomaly"))[1].string("key"), "5.6.7.8");
  EXPECT_EQ(t.number("missing", 3.0), 3.0);
}

TEST(Toml, ErrorsCarryLines) {
  auto line_of = [](const char* text) {
    try {
      toml::parse(text);
    } catch (const ParseError& e) {
      return e.line();
    }
    return std::size_t{0};
  };
  EXPECT_EQ(line_of("a = 1\nb = \n"), 2u);
  EXPECT_EQ(line_of("a = 1\na = 2\n"), 2u);
  EXPECT_EQ(line_of("a = 1\n\n[t]\n[t]\n"), 4u);
  EXPECT_EQ(line_of("a = \"open\n"), 1u);
  EXPECT_EQ(line_of("a = 1 2\n"), 1u);
  EXPECT_THROW(toml::parse("a = \"x\"\n").integer("a", 0), ParseError);
}

TEST(Config, ParsesAndValidates) {
  auto c = parse_config(
      "window = 2\nn_max = 100\nb_max = 5000\nlevels = [8, 32]\nseed = 3\nmax_delay = 6\n"
      "[alpha]\nsearch = false\nvalue = 0.25\n[keys]\nvictimIPs = \"none\"\n");
  EXPECT_EQ(c.window, 2.0);
  EXPECT_EQ(c.n_max, 100.0);
  EXPECT_EQ(c.levels, (std::vector<int>{8, 32}));
  EXPECT_EQ(*c.max_delay, 6.0);
  EXPECT_FALSE(c.alpha_search);
  EXPECT_EQ(c.alpha, 0.25);
  EXPECT_EQ(c.keys.at("victimIPs"), "none");
  EXPECT_THROW(parse_config("window = 0\n"), ValidationError);
  EXPECT_THROW(parse_config("n_max = -1\n"), ValidationError);
  EXPECT_THROW(parse_config("[alpha]\nvalue = 2\n"), ValidationError);
  EXPECT_THROW(parse_config("training_windows = 0\n"), ValidationError);
  EXPECT_NO_THROW(parse_config(read_file(SONATA_SAMPLES "/config.toml")));
}

TEST(PlanFile, JsonRoundTrip) {
  QueryPlan p;
  p.query = "pVictimIPs";
  p.source = print_query(parse_query(query1_text(20)));
  p.order = 0;
  p.key = "dstIP";
  p.steps = {{8, {3, false}}, {32, {5, true}}};
  p.thresholds = {{8, Value{std::int64_t{25}}}, {32, Value{std::int64_t{20}}}};
  p.alpha = 0.375;
  p.method = "shared-alpha";
  p.rmse = 0.125;
  p.mean_cost = 0.5;
  p.train_n = {0.1, 0.2};
  p.train_b = {0.3, 0.4};
  p.columns = {"ts:float", "dstIP:ipv4"};
  p.config = reflection_config();
  p.config.max_delay = 4;
  auto text = plan_text(p);
  auto back = plan_from_json(ordered_json::parse(text));
  EXPECT_EQ(plan_text(back), text);
  EXPECT_EQ(back.steps[1].level, 32);
  EXPECT_TRUE(back.steps[1].plan.sketch);
  EXPECT_EQ(back.thresholds.at(8), Value{std::int64_t{25}});
  EXPECT_THROW(plan_from_json(ordered_json::parse("{\"format\": \"other\"}")), SchemaError);
  EXPECT_THROW(plan_from_json(ordered_json::parse("{\"format\": \"sonata-plan\", \"version\": 1}")), SchemaError);
}

TEST(TraceGen, DeterministicAndTruthful) {
  auto spec = parse_tracegen_spec(
      "seed = 5\nduration = 60\nrate = 1000\n"
      "[[anomaly]]\nkind = \"ddos\"\nkey = \"66.6.6.6\"\nstart = 20\nduration = 10\nrate = 300\nsources = 500\n");
  auto a = generate_trace(spec), b = generate_trace(spec);
  std::ostringstream ta, tb, truth;
  write_trace(ta, a.trace);
  write_trace(tb, b.trace);
  EXPECT_EQ(ta.str(), tb.str());
  write_truth(truth, a.truth);
  auto t = parse_truth(truth.str());
  ASSERT_EQ(t.size(), 1u);
  EXPECT_EQ(t[0].field, "dstIP");
  EXPECT_EQ(t[0].key, static_cast<std::int64_t>(*parse_ipv4("66.6.6.6")));
  EXPECT_EQ(t[0].start, 20.0);
  EXPECT_EQ(t[0].end, 30.0);
  // the victim really receives from hundreds of distinct senders inside [20, 30)
  std::set<std::int64_t> senders;
  for (const auto& p : a.trace.packets)
    if (p.get(Field::dstIP) == Value{t[0].key}) {
      EXPECT_GE(p.ts(), 20.0);
      EXPECT_LT(p.ts(), 30.0);
      senders.insert(std::get<std::int64_t>(p.get(Field::srcIP)));
    }
  EXPECT_GT(senders.size(), 400u);
  EXPECT_LE(senders.size(), 500u);
  spec.seed = 6;
  std::ostringstream tc;
  write_trace(tc, generate_trace(spec).trace);
  EXPECT_NE(tc.str(), ta.str());
}

TEST(TraceGen, NoAnomaliesNoTruth) {
  auto g = generate_trace(parse_tracegen_spec("seed = 1\nduration = 5\nrate = 100\n"));
  EXPECT_TRUE(g.truth.empty());
  EXPECT_EQ(g.trace.packets.size(), 500u);
  std::ostringstream os;
  write_truth(os, g.truth);
  EXPECT_EQ(os.str(), "kind,field,key,start,end\n");
}

TEST(TraceGen, InvalidSpecs) {
  EXPECT_THROW(parse_tracegen_spec("duration = 0\n"), ValidationError);
  EXPECT_THROW(parse_tracegen_spec("duration = 5\n[[anomaly]]\nkey = \"1.2.3.4\"\nstart = 4\nduration = 3\n"),
               ValidationError);
  EXPECT_THROW(parse_tracegen_spec("[[anomaly]]\nkind = \"meteor\"\nkey = \"1.2.3.4\"\n"), ParseError);
  EXPECT_THROW(parse_tracegen_spec("[[anomaly]]\nkey = \"1.2.3\"\n"), ParseError);
  EXPECT_THROW(parse_tracegen_spec("[background]\ndns_share = 0.8\nudp_share = 0.5\n"), ValidationError);
}

TEST(Replay, AllStreamCountsEveryPacket) {
  auto g = generate_trace(reflection_spec(3, 10, 500));
  auto c = reflection_config();
  auto w = workload(reflection_queries(), g.trace, c);
  std::vector<QueryPlan> plans{stream_only(w.queries[0], 0, w.trace_schema)};
  auto exec = load_exec(plans, w.trace_schema);
  auto m = replay(exec, w.windows, 1);
  std::uint64_t total = 0;
  for (std::size_t t = 0; t < w.windows.size(); ++t) {
    const auto& row = m.rows[2 * t];
    EXPECT_EQ(row.query, "pVictimIPs");
    EXPECT_EQ(row.n_raw, w.windows[t].size());
    EXPECT_EQ(row.b_raw, 0u);
    total += m.rows[2 * t + 1].reports;
  }
  EXPECT_EQ(total, m.report_tuples);
  EXPECT_EQ(total, g.trace.packets.size());
  ASSERT_EQ(m.queries.size(), 1u);
  EXPECT_EQ(m.queries[0].delay, std::optional<std::size_t>{1});
  EXPECT_EQ(m.queries[0].detected, m.queries[0].expected);
}

TEST(Replay, MetricFidelityAndDeterminism) {
  auto g = generate_trace(reflection_spec(4, 30, 1000));
  auto c = reflection_config();
  auto w = workload(reflection_queries(), g.trace, c);
  auto outcomes = plan_workload(w, c);
  std::vector<QueryPlan> plans;
  for (const auto& o : outcomes) {
    ASSERT_TRUE(o.plan) << o.message;
    plans.push_back(*o.plan);
  }
  auto exec = load_exec(plans, w.trace_schema);
  auto a = replay(exec, w.windows, c.seed);
  auto b = replay(load_exec(plans, w.trace_schema), w.windows, c.seed);
  EXPECT_EQ(csv(a), csv(b));
  std::uint64_t sum = 0;
  for (const auto& r : a.rows)
    if (r.query == "__all__") sum += r.reports;
  EXPECT_EQ(sum, a.report_tuples);
  // per-query report rows never exceed the switch-wide report count
  for (std::size_t i = 0; i < a.rows.size(); ++i)
    if (a.rows[i].query != "__all__") {
      std::size_t all = i;
      while (a.rows[all].query != "__all__") ++all;
      EXPECT_LE(a.rows[i].reports, a.rows[all].reports);
    }
  auto again = plan_workload(w, c);
  for (std::size_t q = 0; q < outcomes.size(); ++q) EXPECT_EQ(plan_text(*again[q].plan), plan_text(*outcomes[q].plan));
}

TEST(Plan, ZeroStateForcesAllStream) {
  auto g = generate_trace(reflection_spec(5, 25, 500));
  auto c = reflection_config();
  c.b_max = 0;
  c.n_max = 1e7;
  auto w = workload(reflection_queries(), g.trace, c);
  for (const auto& o : plan_workload(w, c)) {
    ASSERT_TRUE(o.plan) << o.message;
    for (const auto& s : o.plan->steps) EXPECT_EQ(s.plan.p, 0u) << o.query;
  }
}

TEST(Plan, ZeroLoadIsInfeasible) {
  auto g = generate_trace(reflection_spec(5, 25, 500));
  auto c = reflection_config();
  c.n_max = 0;
  auto w = workload(reflection_queries(), g.trace, c);
  for (const auto& o : plan_workload(w, c)) {
    EXPECT_FALSE(o.plan);
    EXPECT_EQ(o.binding, "N_max");
  }
}

TEST(Plan, TightStateNamesBinding) {
  auto g = generate_trace(reflection_spec(5, 25, 500));
  auto c = reflection_config();
  c.n_max = 1;
  c.b_max = 1;
  auto w = workload(reflection_queries(), g.trace, c);
  for (const auto& o : plan_workload(w, c)) {
    EXPECT_FALSE(o.plan);
    EXPECT_FALSE(o.binding.empty());
  }
}

TEST(Plan, NonTrivialPathWithGenerousBudgets) {
  auto g = generate_trace(reflection_spec(6, 30, 2000));
  auto c = reflection_config();
  auto w = workload(reflection_queries(), g.trace, c);
  auto o = plan_workload(w, c);
  ASSERT_TRUE(o[0].plan) << o[0].message;
  const auto& steps = o[0].plan->steps;
  EXPECT_TRUE(steps.size() > 1 || steps[0].plan.p > 1);
  EXPECT_TRUE(o[0].plan->key);
}

TEST(Baselines, PartOfSplitsAfterLeadingFilters) {
  auto qs = make_queries(query1_text() + query2_text());
  EXPECT_EQ(part_of_split(*qs[0]), 1u);
  EXPECT_EQ(part_of_split(*qs[1]), 3u);
  EXPECT_EQ(max_supported_split(*qs[0]), qs[0]->operator_count());
}

TEST(Baselines, OrderingOnSkewedTrace) {
  auto g = generate_trace(reflection_spec(8, 40, 2000));
  auto c = reflection_config();
  auto w = workload(reflection_queries(), g.trace, c);
  auto runs = run_baselines(w, c);
  ASSERT_EQ(runs.size(), 5u);
  auto find = [&](const std::string& name) -> const QuerySummary& {
    for (const auto& r : runs)
      if (r.name == name) return r.metrics.queries[0];
    throw std::logic_error(name);
  };
  const auto& so = find("stream-only");
  const auto& of = find("part-of");
  const auto& pisa = find("part-pisa");
  const auto& learned = find("learned");
  EXPECT_LE(learned.mean_n_raw, of.mean_n_raw);
  EXPECT_LE(of.mean_n_raw, so.mean_n_raw);
  EXPECT_LE(learned.max_b_raw, pisa.max_b_raw);
  ASSERT_TRUE(find("fixed-refinement").delay);
  ASSERT_TRUE(learned.delay);
  EXPECT_LE(*learned.delay, *find("fixed-refinement").delay);
  // ground truth recovered on the stationary scenario
  for (const auto& t : g.truth) EXPECT_TRUE(learned.detected.count(format_value(Value{t.key}, FieldType::Ipv4)));
  std::ostringstream table;
  write_baseline_table(table, runs);
  EXPECT_EQ(table.str().substr(0, table.str().find('\n')),
            "planner,query,intervals,mean_n_raw,max_n_raw,max_b_raw,delay,detected");
}

TEST(Baselines, NothingSatisfiedOnUniformTrace) {
  auto g = generate_trace(reflection_spec(9, 30, 1000, 0));
  auto c = reflection_config();
  auto w = workload(reflection_queries(), g.trace, c);
  auto runs = run_baselines(w, c);
  double total = 0;
  for (std::size_t t = c.training_windows; t < w.windows.size(); ++t) total += static_cast<double>(w.windows[t].size());
  const double so = runs[0].metrics.queries[0].mean_n_raw;
  EXPECT_DOUBLE_EQ(so * static_cast<double>(w.windows.size() - c.training_windows), total);
  for (std::size_t i = 1; i < runs.size(); ++i) {
    EXPECT_LT(runs[i].metrics.queries[0].mean_n_raw, so) << runs[i].name;
    EXPECT_TRUE(runs[i].metrics.queries[0].detected.empty());
  }
}

TEST(Schema, PlanColumnsMustExistInTrace) {
  auto g = generate_trace(reflection_spec(3, 5, 200));
  auto c = reflection_config();
  auto w = workload(reflection_queries(), g.trace, c);
  auto plan = stream_only(w.queries[0], 0, w.trace_schema);
  auto narrow = parse_trace_header("ts:float,srcIP:ipv4,dstIP:ipv4,srcPort:u16");
  EXPECT_THROW(load_exec({plan}, narrow), SchemaError);
  plan.source = "other = pktStream(1).filter(proto == 17)\n";
  EXPECT_THROW(load_exec({plan}, w.trace_schema), SchemaError);
}
