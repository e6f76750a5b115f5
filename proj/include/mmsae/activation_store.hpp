// Copyright (c) 2026, mmsae contributors
// SPDX-License-Identifier: Apache-2.0
//
// Token-level activation shards: on-disk format, streaming shuffle buffer and
// sample pooling.
//
// Binary layout (all little-endian):
//
//   offset  size        field
//   0       8           magic "SAEACT01"
//   8       4           version (u32, currently 1)
//   12      4           dim (u32)
//   16      8           count (u64)
//   24      count*dim*4 float32 rows, row-major
//
// Per-token metadata lives in a JSON-lines sidecar `<shard>.meta.jsonl`, one
// object per row: {"sample_id", "modality", "token_role", "token_index"}.
// The same container (without sidecar) stores parameter matrices.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mmsae/linalg.hpp"
#include "mmsae/rng.hpp"

namespace mmsae {

inline constexpr char kShardMagic[8] = {'S', 'A', 'E', 'A', 'C', 'T', '0', '1'};
inline constexpr std::uint32_t kShardVersion = 1;
inline constexpr std::size_t kShardHeaderBytes = 24;

enum class Modality : std::uint8_t { kImage, kText };
enum class TokenRole : std::uint8_t { kImage, kPrompt, kContent, kSpecial };

std::string_view to_string(Modality m);
std::string_view to_string(TokenRole r);
Modality parse_modality(std::string_view s);
TokenRole parse_token_role(std::string_view s);

struct TokenMeta {
  std::uint64_t sample_id = 0;
  Modality modality = Modality::kText;
  TokenRole token_role = TokenRole::kContent;
  std::uint32_t token_index = 0;

  bool operator==(const TokenMeta&) const = default;
};

struct ActivationShard {
  MatrixF vectors;  // count x dim
  std::vector<TokenMeta> meta;

  std::size_t dim() const { return static_cast<std::size_t>(vectors.cols()); }
  std::size_t count() const { return static_cast<std::size_t>(vectors.rows()); }
};

/// Bit-exact equality of vectors (compares float bit patterns, so NaN
/// payloads and signed zeros count) and metadata.
bool bit_equal(const ActivationShard& a, const ActivationShard& b);

/// Throws on any broken shard invariant: empty or zero-dim shard, meta size
/// mismatch, non-finite entries, non-consecutive token indices per sample.
void validate_shard(const ActivationShard& shard, std::string_view op = "validate_shard");

struct ShardHeader {
  std::uint32_t version = 0;
  std::uint32_t dim = 0;
  std::uint64_t count = 0;
};

/// Writes the binary payload to `data` and the JSON-lines sidecar to `meta`.
/// Returns the total number of bytes emitted to both sinks.
std::size_t write_shard(const ActivationShard& shard, std::ostream& data, std::ostream& meta);
ActivationShard read_shard(std::istream& data, std::istream& meta);

std::filesystem::path sidecar_path(const std::filesystem::path& shard_path);
std::size_t write_shard_file(const ActivationShard& shard, const std::filesystem::path& path);
ActivationShard read_shard_file(const std::filesystem::path& path);

ShardHeader read_header(std::istream& in, std::string_view op);

// Parameter matrices. Zero rows are allowed here (an empty removal basis).
std::size_t write_matrix(const MatrixF& m, std::ostream& out);
MatrixF read_matrix(std::istream& in);
void write_matrix_file(const MatrixF& m, const std::filesystem::path& path);
MatrixF read_matrix_file(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Shuffled training stream
// ---------------------------------------------------------------------------

struct ActivationBatch {
  MatrixF vectors;
  std::vector<TokenMeta> meta;
};

/// Yields shards in order; std::nullopt marks the end of the stream.
using ShardSource = std::function<std::optional<ActivationShard>()>;

ShardSource make_vector_source(std::vector<ActivationShard> shards);
/// Reads the given files in order, `passes` times over (0 = forever).
ShardSource make_file_source(std::vector<std::filesystem::path> paths, std::size_t passes);

/// Shuffle buffer over a token stream. The buffer is filled to `capacity`
/// tokens and topped up again whenever it falls below capacity/2; each batch
/// draws tokens uniformly without replacement from the buffer. Every input
/// token is emitted exactly once, and the emission order depends only on the
/// input order, capacity, batch size and seed. The final batch may be short.
class ShuffledBatches {
 public:
  ShuffledBatches(ShardSource source, std::size_t capacity, std::size_t batch_size,
                  std::uint64_t seed);

  std::optional<ActivationBatch> next();

  std::size_t tokens_emitted() const { return emitted_; }
  std::size_t dim() const { return dim_; }

 private:
  bool pull_token();
  void refill();

  ShardSource source_;
  std::size_t capacity_;
  std::size_t batch_size_;
  Rng rng_;

  std::optional<ActivationShard> current_;
  std::size_t cursor_ = 0;
  bool exhausted_ = false;

  std::size_t dim_ = 0;
  std::vector<float> rows_;
  std::vector<TokenMeta> meta_;
  std::size_t emitted_ = 0;
};

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

enum class PoolStrategy : std::uint8_t { kMean, kLastToken };

std::string_view to_string(PoolStrategy s);
PoolStrategy parse_pool_strategy(std::string_view s);

using RoleMask = std::set<TokenRole>;

RoleMask parse_role_mask(std::string_view comma_separated);
std::string to_string(const RoleMask& mask);

struct PooledEmbedding {
  Vector vector;
  std::uint64_t sample_id = 0;
  PoolStrategy strategy = PoolStrategy::kMean;
  RoleMask mask;
};

/// Tokens of a single sample, sorted by token_index.
struct SampleTokens {
  std::uint64_t sample_id = 0;
  MatrixF vectors;
  std::vector<TokenMeta> meta;
};

/// Groups rows of all shards by sample_id. All tokens of a sample must sit
/// in one shard, with token indices 0..n-1.
std::map<std::uint64_t, SampleTokens> collect_samples(std::span<const ActivationShard> shards);

PooledEmbedding pool_sample(const SampleTokens& sample, PoolStrategy strategy, const RoleMask& mask);

}  // namespace mmsae
