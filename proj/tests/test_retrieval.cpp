// Copyright (c) 2026, mmsae contributors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "mmsae/errors.hpp"
#include "mmsae/retrieval.hpp"
#include "test_util.hpp"

using namespace mmsae;

namespace {

std::string id_of(const char* prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s%03zu", prefix, i);
  return buf;
}

double cosine(const Vector& a, const Vector& b) { return a.dot(b) / (a.norm() * b.norm()); }

// Position of every candidate: 1 + number of candidates that beat it, where
// beating means a higher score or an equal score with a smaller id.
std::vector<std::string> brute_force_order(const Vector& q, const std::vector<LabeledEmbedding>& cands) {
  std::vector<std::pair<std::size_t, std::string>> pos;
  for (const auto& c : cands) {
    const double s = cosine(q, c.vector);
    std::size_t beaten = 0;
    for (const auto& o : cands) {
      const double t = cosine(q, o.vector);
      if (t > s || (t == s && o.id < c.id)) ++beaten;
    }
    pos.emplace_back(beaten, c.id);
  }
  std::sort(pos.begin(), pos.end());
  std::vector<std::string> out;
  for (std::size_t i = 0; i < pos.size(); ++i) {
    REQUIRE(pos[i].first == i);  // a strict total order
    out.push_back(pos[i].second);
  }
  return out;
}

TaskSpec small_task() {
  TaskSpec t;
  t.task_label = "q->c";
  t.queries = {{"q0", 0}, {"q1", 1}};
  t.candidates = {{"c0", 2}, {"c1", 3}, {"c2", 4}};
  t.qrels = {{"q0", {"c0"}}, {"q1", {"c1", "c2"}}};
  return t;
}

}  // namespace

TEST_CASE("cosine ranking matches brute force with ties") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Rng rng(seed);
    std::vector<LabeledEmbedding> queries, cands;
    for (std::size_t i = 0; i < 50; ++i) {
      Vector v(6);
      for (Eigen::Index j = 0; j < 6; ++j) v(j) = rng.normal();
      queries.push_back({id_of("q", i), v});
    }
    for (std::size_t i = 0; i < 50; ++i) {
      Vector v(6);
      if (i % 5 == 4) {
        v = cands[i - 1].vector;  // exact duplicate, guaranteed tie
      } else {
        for (Eigen::Index j = 0; j < 6; ++j) v(j) = rng.normal();
      }
      cands.push_back({id_of("c", 49 - i), v});  // ids deliberately out of order
    }
    const Rankings r = cosine_rank(queries, cands);
    REQUIRE(r.size() == 50);
    for (const auto& q : queries) CHECK(r.at(q.id) == brute_force_order(q.vector, cands));

    // Candidate order does not matter.
    std::vector<LabeledEmbedding> shuffled = cands;
    std::reverse(shuffled.begin(), shuffled.end());
    CHECK(cosine_rank(queries, shuffled) == r);
  }
}

TEST_CASE("cosine ranking errors") {
  std::vector<LabeledEmbedding> q = {{"q", Vector::Ones(3)}};
  std::vector<LabeledEmbedding> bad_dim = {{"c", Vector::Ones(4)}};
  std::vector<LabeledEmbedding> zero = {{"c", Vector::Zero(3)}};
  std::vector<LabeledEmbedding> dup = {{"c", Vector::Ones(3)}, {"c", Vector::Ones(3)}};
  CHECK_THROWS_AS(cosine_rank(q, bad_dim), ShapeError);
  CHECK_THROWS_AS(cosine_rank(q, zero), NumericError);
  CHECK_THROWS_AS(cosine_rank(q, dup), ConsistencyError);
}

TEST_CASE("recall examples") {
  Rankings r = {{"a", {"x", "y", "z"}}, {"b", {"z", "x", "y"}}};
  std::map<std::string, std::set<std::string>> qrels = {{"a", {"y"}}, {"b", {"y", "x"}}};
  const std::vector<std::size_t> ks = {1, 2, 3};
  const RetrievalReport rep = recall_at_k(r, qrels, ks);
  CHECK(rep.recall_at.at(1) == 0.0);
  CHECK(rep.recall_at.at(2) == 1.0);
  CHECK(rep.per_query_ranks.at("a") == 2u);
  CHECK(rep.per_query_ranks.at("b") == 2u);

  Rankings missing = {{"a", {}}, {"b", {"z"}}};
  const RetrievalReport rep2 = recall_at_k(missing, qrels, ks);
  CHECK_FALSE(rep2.per_query_ranks.at("a").has_value());
  CHECK(rep2.recall_at.at(3) == 0.0);
  CHECK(rep2.to_json()["per_query_ranks"]["a"].is_null());

  CHECK_THROWS_AS(recall_at_k(r, qrels, std::vector<std::size_t>{}), ConfigError);
  CHECK_THROWS_AS(recall_at_k(r, qrels, std::vector<std::size_t>{0}), ConfigError);
  CHECK_THROWS_AS(recall_at_k(r, {}, ks), ConfigError);
  CHECK_THROWS_AS(recall_at_k(Rankings{{"a", {}}}, qrels, ks), ConsistencyError);
}

TEST_CASE("recall is monotone in K and bounded") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<LabeledEmbedding> q, c;
    std::map<std::string, std::set<std::string>> qrels;
    for (std::size_t i = 0; i < 15; ++i) {
      Vector v(4);
      for (Eigen::Index j = 0; j < 4; ++j) v(j) = rng.normal();
      q.push_back({id_of("q", i), v});
      qrels[id_of("q", i)] = {id_of("c", rng.uniform_index(20))};
    }
    for (std::size_t i = 0; i < 20; ++i) {
      Vector v(4);
      for (Eigen::Index j = 0; j < 4; ++j) v(j) = rng.normal();
      c.push_back({id_of("c", i), v});
    }
    const std::vector<std::size_t> ks = {1, 2, 3, 5, 10, 20};
    const RetrievalReport rep = recall_at_k(cosine_rank(q, c), qrels, ks);
    double prev = 0.0;
    for (auto k : ks) {
      const double v = rep.recall_at.at(k);
      CHECK(v >= prev);
      CHECK(v <= 1.0);
      prev = v;
    }
    CHECK(rep.recall_at.at(20) == 1.0);
  }
}

TEST_CASE("task validation") {
  CHECK_NOTHROW(small_task().validate());
  TaskSpec t = small_task();
  t.queries.push_back({"q0", 9});
  CHECK_THROWS_AS(t.validate(), ConsistencyError);
  t = small_task();
  t.candidates.push_back({"c0", 9});
  CHECK_THROWS_AS(t.validate(), ConsistencyError);
  t = small_task();
  t.qrels["qx"] = {"c0"};
  CHECK_THROWS_AS(t.validate(), ConsistencyError);
  t = small_task();
  t.qrels["q0"] = {"cx"};
  CHECK_THROWS_AS(t.validate(), ConsistencyError);
  t = small_task();
  t.qrels.erase("q1");
  CHECK_THROWS_AS(t.validate(), ConsistencyError);
}

TEST_CASE("task JSON round trip and errors") {
  testutil::TempDir tmp("task");
  const TaskSpec t = small_task();
  write_task_spec(t, tmp / "task.json");
  const TaskSpec back = read_task_spec(tmp / "task.json");
  CHECK(task_to_json(back) == task_to_json(t));
  CHECK(back.queries[1].sample_id == 1u);

  nlohmann::json j = task_to_json(t);
  j["extra"] = 1;
  CHECK_THROWS_AS(task_from_json(j), FormatError);
  j = task_to_json(t);
  j["queries"] = "nope";
  CHECK_THROWS_AS(task_from_json(j), FormatError);

  std::ofstream(tmp / "broken.json") << "{not json";
  CHECK_THROWS_AS(read_task_spec(tmp / "broken.json"), FormatError);
  CHECK_THROWS_AS(read_task_spec(tmp / "absent.json"), IoError);
}

namespace {

ActivationShard one_token_shard(const std::vector<Vector>& vecs) {
  ActivationShard s;
  s.vectors.resize(static_cast<Eigen::Index>(vecs.size()), vecs.front().size());
  for (std::size_t i = 0; i < vecs.size(); ++i) {
    s.vectors.row(static_cast<Eigen::Index>(i)) = vecs[i].cast<float>().transpose();
    s.meta.push_back({i, i < 2 ? Modality::kImage : Modality::kText, TokenRole::kContent, 0});
  }
  return s;
}

}  // namespace

TEST_CASE("run_task end to end") {
  // Queries and candidates share a dominant direction e0; the signal sits in
  // e1/e2. Removing e0 turns a failing task into a perfect one.
  auto v = [](double a, double b, double c) {
    Vector x(3);
    x << a, b, c;
    return x;
  };
  const std::vector<ActivationShard> shards = {
      one_token_shard({v(10, 1, 0), v(10, 0, 1), v(3, 1, 0.2), v(3, -0.3, 1), v(10.5, 0.05, 0.05)})};
  TaskSpec task;
  task.task_label = "q->c";
  task.queries = {{"q0", 0}, {"q1", 1}};
  task.candidates = {{"c0", 2}, {"c1", 3}, {"c2", 4}};
  task.qrels = {{"q0", {"c0"}}, {"q1", {"c1"}}};
  const std::vector<std::size_t> ks = {1, 2};

  const RetrievalReport base = run_task(shards, task, {}, {}, ks);
  CHECK(base.recall_at.at(1) == 0.0);
  CHECK(base.config_echo["intervention"]["enabled"] == false);

  RemovalSubspace s = RemovalSubspace::identity(3);
  s.basis = Matrix::Zero(3, 1);
  s.basis(0, 0) = 1.0;
  s.source_indices = {0};
  const RetrievalReport after = run_task(shards, task, {}, {&s, true, true}, ks);
  CHECK(after.recall_at.at(1) == 1.0);
  CHECK(after.degenerate_candidates == 0);
  CHECK(after.config_echo["intervention"]["r"] == 1);

  std::ostringstream csv;
  write_recall_csv(after, csv);
  CHECK(csv.str() == "K,recall\n1,1\n2,1\n");

  // Removing a direction that contains a candidate drops it as degenerate.
  const std::vector<ActivationShard> with_axis = {
      one_token_shard({v(1, 1, 0), v(1, 0, 1), v(1, 1, 0), v(0, 0, 1), v(1, 0, 0)})};
  const RetrievalReport deg = run_task(with_axis, task, {}, {&s, false, true}, ks);
  CHECK(deg.degenerate_candidates == 1);
  CHECK(deg.degenerate_queries == 0);

  TaskSpec missing = task;
  missing.candidates.push_back({"c9", 99});
  CHECK_THROWS_AS(run_task(shards, missing, {}, {}, ks), ConsistencyError);
}
