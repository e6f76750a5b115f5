// Copyright (c) 2026, mmsae contributors
// SPDX-License-Identifier: Apache-2.0

#include "mmsae/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <ostream>
#include <unordered_map>
#include <unordered_set>

#include "mmsae/errors.hpp"

namespace mmsae {

void TaskSpec::validate() const {
  const std::string op = "task_spec";
  std::unordered_set<std::string> qids, cids;
  for (const auto& q : queries) {
    if (!qids.insert(q.id).second) throw ConsistencyError(op, "duplicate query id '" + q.id + "'");
  }
  for (const auto& c : candidates) {
    if (!cids.insert(c.id).second) throw ConsistencyError(op, "duplicate candidate id '" + c.id + "'");
  }
  for (const auto& [qid, rel] : qrels) {
    if (!qids.contains(qid)) throw ConsistencyError(op, "qrels query '" + qid + "' is not a query");
    for (const auto& cid : rel) {
      if (!cids.contains(cid)) throw ConsistencyError(op, "relevant id '" + cid + "' is not a candidate");
    }
  }
  for (const auto& q : queries) {
    auto it = qrels.find(q.id);
    if (it == qrels.end() || it->second.empty()) {
      throw ConsistencyError(op, "query '" + q.id + "' has no relevant candidate");
    }
  }
}

nlohmann::json task_to_json(const TaskSpec& task) {
  nlohmann::json j;
  j["task_label"] = task.task_label;
  auto items = [](const std::vector<TaskItem>& v) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& it : v) arr.push_back({{"id", it.id}, {"sample_id", it.sample_id}});
    return arr;
  };
  j["queries"] = items(task.queries);
  j["candidates"] = items(task.candidates);
  nlohmann::json qrels = nlohmann::json::object();
  for (const auto& [qid, rel] : task.qrels) qrels[qid] = std::vector<std::string>(rel.begin(), rel.end());
  j["qrels"] = qrels;
  return j;
}

TaskSpec task_from_json(const nlohmann::json& j) {
  const std::string op = "read_task_spec";
  TaskSpec t;
  try {
    for (const auto& [key, _] : j.items()) {
      if (key != "task_label" && key != "queries" && key != "candidates" && key != "qrels") {
        throw FormatError(op, "unknown key '" + key + "'");
      }
    }
    t.task_label = j.value("task_label", std::string());
    auto items = [&](const char* key) {
      std::vector<TaskItem> v;
      for (const auto& it : j.at(key)) v.push_back({it.at("id").get<std::string>(), it.at("sample_id").get<std::uint64_t>()});
      return v;
    };
    t.queries = items("queries");
    t.candidates = items("candidates");
    for (const auto& [qid, rel] : j.at("qrels").items()) {
      const auto ids = rel.get<std::vector<std::string>>();
      t.qrels[qid] = std::set<std::string>(ids.begin(), ids.end());
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(op, e.what());
  }
  t.validate();
  return t;
}

TaskSpec read_task_spec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("read_task_spec", "cannot open " + path.string());
  try {
    return task_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("read_task_spec", e.what());
  }
}

void write_task_spec(const TaskSpec& task, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  out << task_to_json(task).dump(2) << '\n';
  if (!out) throw IoError("write_task_spec", "cannot write " + path.string());
}

Rankings cosine_rank(std::span<const LabeledEmbedding> queries, std::span<const LabeledEmbedding> candidates) {
  const std::string op = "cosine_rank";
  Rankings out;
  if (queries.empty()) return out;
  const Eigen::Index d = queries.front().vector.size();

  auto unit = [&](const LabeledEmbedding& e) {
    if (e.vector.size() != d) throw ShapeError(op, "embedding '" + e.id + "' has a different dimension");
    const double n = e.vector.norm();
    if (!(n > 0.0) || !std::isfinite(n)) throw NumericError(op, "embedding '" + e.id + "' has zero or non-finite norm");
    return Vector(e.vector / n);
  };

  // Candidates sorted by id once; a stable sort by score keeps id order
  // inside tie groups.
  std::vector<std::size_t> by_id(candidates.size());
  std::iota(by_id.begin(), by_id.end(), 0);
  std::sort(by_id.begin(), by_id.end(), [&](std::size_t a, std::size_t b) { return candidates[a].id < candidates[b].id; });
  for (std::size_t i = 1; i < by_id.size(); ++i) {
    if (candidates[by_id[i]].id == candidates[by_id[i - 1]].id) {
      throw ConsistencyError(op, "duplicate candidate id '" + candidates[by_id[i]].id + "'");
    }
  }
  Matrix cand(static_cast<Eigen::Index>(candidates.size()), d);
  for (std::size_t i = 0; i < by_id.size(); ++i) cand.row(static_cast<Eigen::Index>(i)) = unit(candidates[by_id[i]]);

  std::vector<std::size_t> order(candidates.size());
  for (const auto& q : queries) {
    const Vector qv = unit(q);
    const Vector scores = cand * qv;
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return scores(static_cast<Eigen::Index>(a)) > scores(static_cast<Eigen::Index>(b));
    });
    auto& ranked = out[q.id];
    if (!ranked.empty()) throw ConsistencyError(op, "duplicate query id '" + q.id + "'");
    ranked.reserve(order.size());
    for (std::size_t pos : order) ranked.push_back(candidates[by_id[pos]].id);
  }
  return out;
}

nlohmann::json RetrievalReport::to_json() const {
  nlohmann::json j;
  nlohmann::json recall = nlohmann::json::object();
  for (const auto& [k, v] : recall_at) recall[std::to_string(k)] = v;
  j["recall_at"] = recall;
  nlohmann::json ranks = nlohmann::json::object();
  for (const auto& [qid, r] : per_query_ranks) ranks[qid] = r ? nlohmann::json(*r) : nlohmann::json(nullptr);
  j["per_query_ranks"] = ranks;
  j["degenerate_queries"] = degenerate_queries;
  j["degenerate_candidates"] = degenerate_candidates;
  j["config"] = config_echo;
  return j;
}

RetrievalReport recall_at_k(const Rankings& rankings, const std::map<std::string, std::set<std::string>>& qrels,
                            std::span<const std::size_t> ks) {
  const std::string op = "recall_at_k";
  if (ks.empty()) throw ConfigError(op, "no cutoffs given");
  for (std::size_t k : ks) {
    if (k == 0) throw ConfigError(op, "cutoffs must be positive");
  }
  if (qrels.empty()) throw ConfigError(op, "no judged queries");

  RetrievalReport report;
  for (const auto& [qid, relevant] : qrels) {
    auto it = rankings.find(qid);
    if (it == rankings.end()) throw ConsistencyError(op, "query '" + qid + "' missing from rankings");
    std::optional<std::size_t> best;
    for (std::size_t pos = 0; pos < it->second.size(); ++pos) {
      if (relevant.contains(it->second[pos])) {
        best = pos + 1;
        break;
      }
    }
    report.per_query_ranks[qid] = best;
  }
  const double n = static_cast<double>(qrels.size());
  for (std::size_t k : ks) {
    std::size_t hits = 0;
    for (const auto& [_, best] : report.per_query_ranks) hits += (best && *best <= k) ? 1 : 0;
    report.recall_at[k] = static_cast<double>(hits) / n;
  }
  return report;
}

RetrievalReport run_task(std::span<const ActivationShard> shards, const TaskSpec& task, const PoolingConfig& pooling,
                         const InterventionConfig& intervention, std::span<const std::size_t> ks) {
  const std::string op = "run_task";
  task.validate();
  const auto samples = collect_samples(shards);

  std::map<std::uint64_t, Vector> pooled;
  auto embed = [&](const TaskItem& item) -> const Vector& {
    auto it = pooled.find(item.sample_id);
    if (it != pooled.end()) return it->second;
    auto s = samples.find(item.sample_id);
    if (s == samples.end()) {
      throw ConsistencyError(op, "sample " + std::to_string(item.sample_id) + " for '" + item.id + "' not in shards");
    }
    return pooled.emplace(item.sample_id, pool_sample(s->second, pooling.strategy, pooling.mask).vector).first->second;
  };

  RetrievalReport report;
  auto side = [&](const std::vector<TaskItem>& items, bool apply, std::size_t& degenerate) {
    std::vector<LabeledEmbedding> out;
    out.reserve(items.size());
    for (const auto& item : items) {
      Vector v = embed(item);
      if (intervention.subspace && apply) {
        try {
          v = remove_and_normalize(v, *intervention.subspace);
        } catch (const NumericError&) {
          ++degenerate;
          continue;
        }
      }
      out.push_back({item.id, std::move(v)});
    }
    return out;
  };
  const auto queries = side(task.queries, intervention.apply_to_queries, report.degenerate_queries);
  const auto candidates = side(task.candidates, intervention.apply_to_candidates, report.degenerate_candidates);

  Rankings rankings = cosine_rank(queries, candidates);
  for (const auto& q : task.queries) rankings.try_emplace(q.id);

  RetrievalReport scored = recall_at_k(rankings, task.qrels, ks);
  scored.degenerate_queries = report.degenerate_queries;
  scored.degenerate_candidates = report.degenerate_candidates;

  nlohmann::json echo;
  echo["task_label"] = task.task_label;
  echo["pooling"] = std::string(to_string(pooling.strategy));
  echo["mask"] = to_string(pooling.mask);
  echo["ks"] = std::vector<std::size_t>(ks.begin(), ks.end());
  nlohmann::json iv;
  iv["enabled"] = intervention.subspace != nullptr;
  if (intervention.subspace) {
    iv["r"] = intervention.subspace->rank();
    iv["source_indices"] = intervention.subspace->source_indices;
    iv["queries"] = intervention.apply_to_queries;
    iv["candidates"] = intervention.apply_to_candidates;
  }
  echo["intervention"] = iv;
  scored.config_echo = echo;
  return scored;
}

void write_recall_csv(const RetrievalReport& report, std::ostream& out) {
  out << "K,recall\n";
  char buf[64];
  for (const auto& [k, v] : report.recall_at) {
    std::snprintf(buf, sizeof(buf), "%zu,%.17g\n", k, v);
    out << buf;
  }
}

}  // namespace mmsae
