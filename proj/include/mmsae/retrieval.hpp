// Copyright (c) 2026, mmsae contributors
// SPDX-License-Identifier: Apache-2.0
//
// Zero-shot retrieval evaluation: pooled embeddings, exhaustive cosine
// ranking, Recall@K (hit rate: at least one relevant candidate in the top K).

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmsae/activation_store.hpp"
#include "mmsae/intervention.hpp"
#include "mmsae/linalg.hpp"

namespace mmsae {

struct TaskItem {
  std::string id;
  std::uint64_t sample_id = 0;
};

/// Task spec as stored on disk: ids refer to samples in the shards.
struct TaskSpec {
  std::string task_label;
  std::vector<TaskItem> queries;
  std::vector<TaskItem> candidates;
  std::map<std::string, std::set<std::string>> qrels;

  void validate() const;
};

TaskSpec read_task_spec(const std::filesystem::path& path);
void write_task_spec(const TaskSpec& task, const std::filesystem::path& path);
nlohmann::json task_to_json(const TaskSpec& task);
TaskSpec task_from_json(const nlohmann::json& j);

struct LabeledEmbedding {
  std::string id;
  Vector vector;
};

/// Candidate ids per query, best first. Keyed by query id.
using Rankings = std::map<std::string, std::vector<std::string>>;

/// Exhaustive cosine ranking. Ties are broken by ascending candidate id
/// (lexicographic), so the result does not depend on candidate order.
Rankings cosine_rank(std::span<const LabeledEmbedding> queries, std::span<const LabeledEmbedding> candidates);

struct RetrievalReport {
  std::map<std::size_t, double> recall_at;
  // 1-based rank of the best relevant candidate; absent when none was ranked.
  std::map<std::string, std::optional<std::size_t>> per_query_ranks;
  std::size_t degenerate_queries = 0;
  std::size_t degenerate_candidates = 0;
  nlohmann::json config_echo = nlohmann::json::object();

  nlohmann::json to_json() const;
};

RetrievalReport recall_at_k(const Rankings& rankings, const std::map<std::string, std::set<std::string>>& qrels,
                            std::span<const std::size_t> ks);

struct PoolingConfig {
  PoolStrategy strategy = PoolStrategy::kMean;
  RoleMask mask;
};

struct InterventionConfig {
  const RemovalSubspace* subspace = nullptr;  // null: no intervention
  bool apply_to_queries = true;
  bool apply_to_candidates = true;
};

/// Pools every task sample, optionally removes the subspace from each side,
/// ranks and scores. Embeddings that become degenerate after removal are
/// dropped from ranking and counted; such queries count as misses.
RetrievalReport run_task(std::span<const ActivationShard> shards, const TaskSpec& task, const PoolingConfig& pooling,
                         const InterventionConfig& intervention, std::span<const std::size_t> ks);

void write_recall_csv(const RetrievalReport& report, std::ostream& out);

}  // namespace mmsae
