#include <gtest/gtest.h>

#include <random>

#include "sonata/stream_engine.hpp"
#include "support.hpp"

using namespace sonata;
using namespace sonata::testing;

namespace {

std::vector<std::int64_t> keys_of(const WindowResult& r) {
  std::vector<std::int64_t> out;
  for (const auto& rec : r.outputs) out.push_back(std::get<std::int64_t>(rec[0]));
  return out;
}

TraceWindow window_of(std::size_t index, std::vector<PacketTuple> pkts) {
  TraceWindow w;
  w.index = index;
  w.start_ts = static_cast<double>(index);
  w.end_ts = w.start_ts + 1;
  w.packets = std::move(pkts);
  return w;
}

// Hand-written reference for Query 1: count distinct srcPort-53 senders per dstIP.
std::set<std::int64_t> query1_oracle(const std::vector<PacketTuple>& pkts, int th) {
  std::map<std::int64_t, std::set<std::int64_t>> senders;
  for (const auto& p : pkts)
    if (std::get<std::int64_t>(p.get(Field::srcPort)) == 53)
      senders[std::get<std::int64_t>(p.get(Field::dstIP))].insert(std::get<std::int64_t>(p.get(Field::srcIP)));
  std::set<std::int64_t> out;
  for (const auto& [d, s] : senders)
    if (static_cast<int>(s.size()) > th) out.insert(d);
  return out;
}

}  // namespace

TEST(Engine, Query1HandExample) {
  auto q = make_query(query1_text(2));
  const auto A = ip("1.2.3.4");
  std::vector<PacketTuple> w;
  for (int i = 0; i < 3; ++i) w.push_back(packet(A, ip("9.9.9.1")));
  w.push_back(packet(A, ip("9.9.9.2")));
  w.push_back(packet(A, ip("9.9.9.3")));
  w.push_back(packet(ip("5.5.5.5"), ip("9.9.9.1")));
  auto r = execute_window(*q, to_records(*q, w));
  EXPECT_EQ(keys_of(r), std::vector<std::int64_t>{A});
  EXPECT_EQ(r.tuples_processed, 6u);
  // one sender fewer drops A to exactly the threshold
  w.pop_back();
  w.pop_back();
  EXPECT_TRUE(execute_window(*q, to_records(*q, w)).outputs.empty());
}

TEST(Engine, EmptyWindow) {
  for (const auto& q : make_queries(evaluation_queries())) {
    if (q->join_target) continue;
    auto r = execute_window(*q, {});
    EXPECT_TRUE(r.outputs.empty());
    EXPECT_EQ(r.tuples_processed, 0u);
  }
}

TEST(Engine, EmptyJoinSetAnnihilates) {
  auto qs = make_queries(query1_text(2) + query2_text(1));
  std::mt19937_64 rng(2);
  auto w = random_window(rng, 2000);
  auto r = execute_window(*qs[1], to_records(*qs[1], w), KeySet{});
  EXPECT_TRUE(r.outputs.empty());
  EXPECT_THROW(execute_window(*qs[1], to_records(*qs[1], w)), ArgumentError);
}

TEST(Engine, ArityMismatch) {
  auto q = make_query(query1_text());
  EXPECT_THROW(execute_window(*q, {Record{Value{std::int64_t{1}}}}), SchemaError);
}

TEST(Engine, ReduceFunctions) {
  auto q = make_query("q = pktStream(1).map(dstIP, size).reduce(key=dstIP, func=max)");
  auto mk = [](std::int64_t d, std::int64_t s) { return PacketTuple().with(Field::dstIP, d).with(Field::size, s); };
  auto r = execute_window(*q, to_records(*q, {mk(1, 10), mk(1, 30), mk(2, 5), mk(1, 20)}));
  ASSERT_EQ(r.outputs.size(), 2u);
  EXPECT_EQ(r.outputs[0][1], Value{std::int64_t{30}});
  EXPECT_EQ(r.outputs[1][1], Value{std::int64_t{5}});
  auto mn = make_query("q = pktStream(1).map(dstIP, size).reduce(key=dstIP, func=min)");
  auto r2 = execute_window(*mn, to_records(*mn, {mk(1, 10), mk(1, 30), mk(2, 5), mk(1, 20)}));
  EXPECT_EQ(r2.outputs[0][1], Value{std::int64_t{10}});
}

TEST(Engine, SampleKeepsEveryNth) {
  auto q = make_query("q = pktStream(1).sample(3)");
  std::vector<PacketTuple> w;
  for (int i = 0; i < 10; ++i) w.push_back(PacketTuple().with(Field::size, std::int64_t{i + 1}));
  auto r = execute_window(*q, to_records(*q, w));
  EXPECT_EQ(r.outputs.size(), 4u);  // indices 0, 3, 6, 9
}

TEST(Stream, JoinUsesPreviousWindow) {
  auto qs = make_queries(query1_text(2) + query2_text(1));
  const auto A = ip("1.2.3.4"), B = ip("6.6.6.6");
  auto dns = [](std::int64_t dst, std::int64_t src) {
    auto p = packet(dst, src);
    p.set(Field::dns_rr_type, std::int64_t{46});
    return p;
  };
  // window 0 flags A; window 1 has only B traffic heavy enough for Query 2
  std::vector<PacketTuple> w0, w1;
  for (int i = 0; i < 5; ++i) w0.push_back(dns(A, ip("9.9.9.1") + i));
  for (int i = 0; i < 5; ++i) w1.push_back(dns(B, ip("9.9.9.1") + i));
  w1.push_back(dns(A, ip("9.9.9.1")));
  w1.push_back(dns(A, ip("9.9.9.2")));
  auto res = execute_stream(qs, {window_of(0, w0), window_of(1, w1)});
  EXPECT_EQ(keys_of(res[0][0]), std::vector<std::int64_t>{A});
  EXPECT_TRUE(res[1][0].outputs.empty());  // no previous interval
  EXPECT_EQ(keys_of(res[1][1]), std::vector<std::int64_t>{A});
}

TEST(Stream, ColdStartAndRepeatedFlags) {
  auto qs = make_queries(query1_text(2) + query2_text(1));
  const auto A = ip("1.2.3.4");
  std::vector<PacketTuple> w;
  for (int i = 0; i < 5; ++i) {
    auto p = packet(A, ip("9.9.9.1") + i);
    p.set(Field::dns_rr_type, std::int64_t{46});
    w.push_back(p);
  }
  auto one = execute_stream(qs, {window_of(0, w)});
  EXPECT_TRUE(one[1][0].outputs.empty());
  auto three = execute_stream(qs, {window_of(0, w), window_of(1, w), window_of(2, w)});
  EXPECT_TRUE(three[1][0].outputs.empty());
  EXPECT_FALSE(three[1][1].outputs.empty());
  EXPECT_FALSE(three[1][2].outputs.empty());
}

TEST(Stream, JoinOrderEnforced) {
  auto qs = make_queries(query1_text(2) + query2_text(1));
  std::vector<std::shared_ptr<const ValidatedQuery>> reversed{qs[1], qs[0]};
  EXPECT_THROW(execute_stream(reversed, {window_of(0, {})}), ArgumentError);
  EXPECT_THROW(execute_stream(*qs[1], {window_of(0, {})}), ArgumentError);
}

TEST(EngineProperty, Query1MatchesOracle) {
  auto q = make_query(query1_text(3));
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    auto w = random_window(rng, 500 + rng() % 3000);
    auto got = keys_of(execute_window(*q, to_records(*q, w)));
    auto want = query1_oracle(w, 3);
    EXPECT_EQ(std::set<std::int64_t>(got.begin(), got.end()), want);
  }
}

TEST(EngineProperty, Determinism) {
  std::mt19937_64 rng(8);
  auto w = random_window(rng, 4000);
  auto qs = make_queries(evaluation_queries());
  auto a = execute_stream(qs, {window_of(0, w), window_of(1, w)});
  auto b = execute_stream(qs, {window_of(0, w), window_of(1, w)});
  for (std::size_t i = 0; i < qs.size(); ++i)
    for (std::size_t k = 0; k < 2; ++k) EXPECT_EQ(a[i][k].outputs, b[i][k].outputs);
}

TEST(EngineProperty, ReduceSumConservation) {
  auto q = make_query("q = pktStream(1).map(dstIP, 1).reduce(key=dstIP, func=sum)");
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 10; ++trial) {
    auto w = random_window(rng, 100 + rng() % 5000);
    auto r = execute_window(*q, to_records(*q, w));
    std::int64_t total = 0;
    for (const auto& rec : r.outputs) total += std::get<std::int64_t>(rec[1]);
    EXPECT_EQ(static_cast<std::size_t>(total), w.size());
  }
}

TEST(EngineProperty, DistinctIdempotence) {
  auto q = make_query(query1_text(2));
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 10; ++trial) {
    auto w = random_window(rng, 2000);
    auto doubled = w;
    doubled.insert(doubled.end(), w.begin(), w.end());
    EXPECT_EQ(execute_window(*q, to_records(*q, w)).outputs, execute_window(*q, to_records(*q, doubled)).outputs);
  }
}

TEST(EngineProperty, TighterThresholdIsSubset) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    auto w = random_window(rng, 3000);
    int lo = static_cast<int>(rng() % 10), hi = lo + 1 + static_cast<int>(rng() % 20);
    auto loose = make_query(query1_text(lo));
    auto tight = make_query(query1_text(hi));
    auto a = keys_of(execute_window(*loose, to_records(*loose, w)));
    auto b = keys_of(execute_window(*tight, to_records(*tight, w)));
    EXPECT_TRUE(std::includes(a.begin(), a.end(), b.begin(), b.end()));
  }
}
