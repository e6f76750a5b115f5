// Copyright (c) 2026, mmsae contributors
// SPDX-License-Identifier: Apache-2.0

#include "mmsae/activation_store.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <unordered_map>

#include <json.hpp>

#include "mmsae/errors.hpp"

namespace mmsae {

namespace {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  }
  return v;
}

template <typename T>
void put(std::ostream& out, T v) {
  v = to_little(v);
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(const unsigned char* p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  return to_little(v);
}

std::size_t write_header(std::ostream& out, std::uint32_t dim, std::uint64_t count) {
  out.write(kShardMagic, sizeof(kShardMagic));
  put<std::uint32_t>(out, kShardVersion);
  put<std::uint32_t>(out, dim);
  put<std::uint64_t>(out, count);
  return kShardHeaderBytes;
}

std::size_t write_payload(std::ostream& out, const MatrixF& m) {
  const std::size_t n = static_cast<std::size_t>(m.size());
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(n * sizeof(float)));
  } else {
    for (std::size_t i = 0; i < n; ++i) put<float>(out, m.data()[i]);
  }
  return n * sizeof(float);
}

MatrixF read_payload(std::istream& in, const ShardHeader& h, std::string_view op) {
  const std::uint64_t max_elems = std::numeric_limits<std::uint64_t>::max() / sizeof(float) / h.dim;
  if (h.count > max_elems) throw CorruptionError(std::string(op), "count overflows payload size");
  MatrixF m(static_cast<Eigen::Index>(h.count), static_cast<Eigen::Index>(h.dim));
  const std::streamsize bytes = static_cast<std::streamsize>(h.count * h.dim * sizeof(float));
  if (bytes == 0) return m;
  in.read(reinterpret_cast<char*>(m.data()), bytes);
  if (in.gcount() != bytes) {
    throw CorruptionError(std::string(op), "truncated payload: expected " + std::to_string(bytes) +
                                               " bytes, got " + std::to_string(in.gcount()));
  }
  if constexpr (std::endian::native == std::endian::big) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = to_little(m.data()[i]);
  }
  return m;
}

std::string meta_line(const TokenMeta& t) {
  std::string line = "{\"sample_id\":";
  line += std::to_string(t.sample_id);
  line += ",\"modality\":\"";
  line += to_string(t.modality);
  line += "\",\"token_role\":\"";
  line += to_string(t.token_role);
  line += "\",\"token_index\":";
  line += std::to_string(t.token_index);
  line += "}\n";
  return line;
}

TokenMeta parse_meta_line(const std::string& line, std::size_t lineno) {
  const std::string op = "read_shard";
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(op, "sidecar line " + std::to_string(lineno) + ": " + e.what());
  }
  try {
    TokenMeta t;
    t.sample_id = j.at("sample_id").get<std::uint64_t>();
    t.modality = parse_modality(j.at("modality").get<std::string>());
    t.token_role = parse_token_role(j.at("token_role").get<std::string>());
    t.token_index = j.at("token_index").get<std::uint32_t>();
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(op, "sidecar line " + std::to_string(lineno) + ": " + e.what());
  }
}

}  // namespace

std::string_view to_string(Modality m) { return m == Modality::kImage ? "image" : "text"; }

std::string_view to_string(TokenRole r) {
  switch (r) {
    case TokenRole::kImage: return "image";
    case TokenRole::kPrompt: return "prompt";
    case TokenRole::kContent: return "content";
    case TokenRole::kSpecial: return "special";
  }
  return "?";
}

Modality parse_modality(std::string_view s) {
  if (s == "image") return Modality::kImage;
  if (s == "text") return Modality::kText;
  throw FormatError("parse_modality", "unknown modality '" + std::string(s) + "'");
}

TokenRole parse_token_role(std::string_view s) {
  if (s == "image") return TokenRole::kImage;
  if (s == "prompt") return TokenRole::kPrompt;
  if (s == "content") return TokenRole::kContent;
  if (s == "special") return TokenRole::kSpecial;
  throw FormatError("parse_token_role", "unknown token role '" + std::string(s) + "'");
}

bool bit_equal(const ActivationShard& a, const ActivationShard& b) {
  if (a.vectors.rows() != b.vectors.rows() || a.vectors.cols() != b.vectors.cols()) return false;
  if (a.meta != b.meta) return false;
  return std::memcmp(a.vectors.data(), b.vectors.data(),
                     static_cast<std::size_t>(a.vectors.size()) * sizeof(float)) == 0;
}

void validate_shard(const ActivationShard& shard, std::string_view op_view) {
  const std::string op(op_view);
  if (shard.dim() == 0) throw FormatError(op, "shard has zero dimension");
  if (shard.count() == 0) throw FormatError(op, "shard is empty");
  if (shard.meta.size() != shard.count()) {
    throw ConsistencyError(op, "meta has " + std::to_string(shard.meta.size()) + " records for " +
                                   std::to_string(shard.count()) + " vectors");
  }
  if (!shard.vectors.allFinite()) throw FormatError(op, "shard contains non-finite entries");

  std::unordered_map<std::uint64_t, std::vector<std::uint32_t>> per_sample;
  for (const auto& t : shard.meta) per_sample[t.sample_id].push_back(t.token_index);
  for (auto& [sample, indices] : per_sample) {
    std::sort(indices.begin(), indices.end());
    for (std::size_t i = 0; i < indices.size(); ++i) {
      if (indices[i] != i) {
        throw ConsistencyError(op, "sample " + std::to_string(sample) +
                                       " token indices are not consecutive from 0");
      }
    }
  }
}

std::size_t write_shard(const ActivationShard& shard, std::ostream& data, std::ostream& meta) {
  const std::string op = "write_shard";
  validate_shard(shard, op);
  if (shard.dim() > std::numeric_limits<std::uint32_t>::max()) throw FormatError(op, "dim exceeds u32");

  std::size_t bytes = write_header(data, static_cast<std::uint32_t>(shard.dim()), shard.count());
  bytes += write_payload(data, shard.vectors);
  for (const auto& t : shard.meta) {
    const std::string line = meta_line(t);
    meta.write(line.data(), static_cast<std::streamsize>(line.size()));
    bytes += line.size();
  }
  data.flush();
  meta.flush();
  if (!data || !meta) throw IoError(op, "sink write failed");
  return bytes;
}

ShardHeader read_header(std::istream& in, std::string_view op_view) {
  const std::string op(op_view);
  unsigned char buf[kShardHeaderBytes];
  in.read(reinterpret_cast<char*>(buf), sizeof(buf));
  const auto got = static_cast<std::size_t>(in.gcount());
  if (got >= sizeof(kShardMagic) && std::memcmp(buf, kShardMagic, sizeof(kShardMagic)) != 0) {
    throw FormatError(op, "bad magic");
  }
  if (got < sizeof(buf)) {
    if (got < sizeof(kShardMagic)) throw FormatError(op, "bad magic (stream too short)");
    throw CorruptionError(op, "truncated header");
  }
  ShardHeader h;
  h.version = get<std::uint32_t>(buf + 8);
  h.dim = get<std::uint32_t>(buf + 12);
  h.count = get<std::uint64_t>(buf + 16);
  if (h.version != kShardVersion) throw FormatError(op, "unsupported version " + std::to_string(h.version));
  if (h.dim == 0) throw FormatError(op, "zero dimension");
  return h;
}

ActivationShard read_shard(std::istream& data, std::istream& meta) {
  const std::string op = "read_shard";
  const ShardHeader h = read_header(data, op);
  if (h.count == 0) throw FormatError(op, "shard is empty");

  ActivationShard shard;
  shard.vectors = read_payload(data, h, op);

  std::string line;
  std::size_t lineno = 0;
  while (std::getline(meta, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    shard.meta.push_back(parse_meta_line(line, lineno));
  }
  validate_shard(shard, op);
  return shard;
}

std::filesystem::path sidecar_path(const std::filesystem::path& shard_path) {
  return std::filesystem::path(shard_path.string() + ".meta.jsonl");
}

std::size_t write_shard_file(const ActivationShard& shard, const std::filesystem::path& path) {
  std::ofstream data(path, std::ios::binary | std::ios::trunc);
  std::ofstream meta(sidecar_path(path), std::ios::binary | std::ios::trunc);
  if (!data || !meta) throw IoError("write_shard", "cannot open " + path.string() + " for writing");
  return write_shard(shard, data, meta);
}

ActivationShard read_shard_file(const std::filesystem::path& path) {
  std::ifstream data(path, std::ios::binary);
  if (!data) throw IoError("read_shard", "cannot open " + path.string());
  std::ifstream meta(sidecar_path(path), std::ios::binary);
  if (!meta) throw IoError("read_shard", "missing sidecar " + sidecar_path(path).string());
  return read_shard(data, meta);
}

std::size_t write_matrix(const MatrixF& m, std::ostream& out) {
  const std::string op = "write_matrix";
  if (m.cols() == 0) throw FormatError(op, "matrix has zero columns");
  if (!m.allFinite()) throw NumericError(op, "matrix contains non-finite entries");
  std::size_t bytes = write_header(out, static_cast<std::uint32_t>(m.cols()), static_cast<std::uint64_t>(m.rows()));
  bytes += write_payload(out, m);
  out.flush();
  if (!out) throw IoError(op, "sink write failed");
  return bytes;
}

MatrixF read_matrix(std::istream& in) {
  const ShardHeader h = read_header(in, "read_matrix");
  return read_payload(in, h, "read_matrix");
}

void write_matrix_file(const MatrixF& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("write_matrix", "cannot open " + path.string() + " for writing");
  write_matrix(m, out);
}

MatrixF read_matrix_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("read_matrix", "cannot open " + path.string());
  return read_matrix(in);
}

// ---------------------------------------------------------------------------

ShardSource make_vector_source(std::vector<ActivationShard> shards) {
  auto state = std::make_shared<std::pair<std::vector<ActivationShard>, std::size_t>>(std::move(shards), 0);
  return [state]() -> std::optional<ActivationShard> {
    if (state->second >= state->first.size()) return std::nullopt;
    return state->first[state->second++];
  };
}

ShardSource make_file_source(std::vector<std::filesystem::path> paths, std::size_t passes) {
  struct State {
    std::vector<std::filesystem::path> paths;
    std::size_t passes;
    std::size_t pass = 0;
    std::size_t next = 0;
  };
  auto state = std::make_shared<State>(State{std::move(paths), passes});
  return [state]() -> std::optional<ActivationShard> {
    if (state->paths.empty()) return std::nullopt;
    if (state->next == state->paths.size()) {
      state->next = 0;
      ++state->pass;
    }
    if (state->passes != 0 && state->pass >= state->passes) return std::nullopt;
    return read_shard_file(state->paths[state->next++]);
  };
}

ShuffledBatches::ShuffledBatches(ShardSource source, std::size_t capacity, std::size_t batch_size,
                                 std::uint64_t seed)
    : source_(std::move(source)), capacity_(capacity), batch_size_(batch_size), rng_(seed) {
  if (batch_size_ == 0) throw ConfigError("shuffled_batches", "batch_size must be positive");
  if (capacity_ < batch_size_) {
    throw ConfigError("shuffled_batches", "capacity (" + std::to_string(capacity_) +
                                              ") < batch_size (" + std::to_string(batch_size_) + ")");
  }
}

bool ShuffledBatches::pull_token() {
  while (!exhausted_ && (!current_ || cursor_ >= current_->count())) {
    current_ = source_();
    cursor_ = 0;
    if (!current_) {
      exhausted_ = true;
      return false;
    }
    if (dim_ == 0) dim_ = current_->dim();
    if (current_->dim() != dim_) {
      throw ShapeError("shuffled_batches", "shard dim " + std::to_string(current_->dim()) +
                                               " differs from stream dim " + std::to_string(dim_));
    }
  }
  if (exhausted_) return false;
  const auto row = current_->vectors.row(static_cast<Eigen::Index>(cursor_));
  rows_.insert(rows_.end(), row.data(), row.data() + dim_);
  meta_.push_back(current_->meta[cursor_]);
  ++cursor_;
  return true;
}

void ShuffledBatches::refill() {
  while (meta_.size() < capacity_ && pull_token()) {
  }
}

std::optional<ActivationBatch> ShuffledBatches::next() {
  if (2 * meta_.size() < capacity_ || meta_.size() < batch_size_) refill();
  if (meta_.empty()) return std::nullopt;

  const std::size_t n = std::min(batch_size_, meta_.size());
  ActivationBatch batch;
  batch.vectors.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim_));
  batch.meta.reserve(n);
  for (std::size_t b = 0; b < n; ++b) {
    const std::size_t j = rng_.uniform_index(meta_.size());
    const std::size_t last = meta_.size() - 1;
    std::copy_n(rows_.data() + j * dim_, dim_, batch.vectors.row(static_cast<Eigen::Index>(b)).data());
    batch.meta.push_back(meta_[j]);
    if (j != last) {
      std::copy_n(rows_.data() + last * dim_, dim_, rows_.data() + j * dim_);
      meta_[j] = meta_[last];
    }
    rows_.resize(last * dim_);
    meta_.pop_back();
  }
  emitted_ += n;
  return batch;
}

// ---------------------------------------------------------------------------

std::string_view to_string(PoolStrategy s) { return s == PoolStrategy::kMean ? "mean" : "last_token"; }

PoolStrategy parse_pool_strategy(std::string_view s) {
  if (s == "mean") return PoolStrategy::kMean;
  if (s == "last_token" || s == "last") return PoolStrategy::kLastToken;
  throw ConfigError("parse_pool_strategy", "unknown pooling strategy '" + std::string(s) + "'");
}

RoleMask parse_role_mask(std::string_view text) {
  RoleMask mask;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t end = std::min(text.find(',', start), text.size());
    const std::string_view item = text.substr(start, end - start);
    if (!item.empty()) {
      try {
        mask.insert(parse_token_role(item));
      } catch (const FormatError&) {
        throw ConfigError("parse_role_mask", "unknown token role '" + std::string(item) + "'");
      }
    }
    start = end + 1;
  }
  return mask;
}

std::string to_string(const RoleMask& mask) {
  std::string out;
  for (TokenRole r : mask) {
    if (!out.empty()) out += ',';
    out += to_string(r);
  }
  return out;
}

std::map<std::uint64_t, SampleTokens> collect_samples(std::span<const ActivationShard> shards) {
  const std::string op = "collect_samples";
  struct Ref {
    std::size_t shard;
    std::size_t row;
  };
  std::map<std::uint64_t, std::vector<Ref>> refs;
  std::map<std::uint64_t, std::size_t> owner;
  std::size_t dim = 0;
  for (std::size_t s = 0; s < shards.size(); ++s) {
    const auto& shard = shards[s];
    if (dim == 0) dim = shard.dim();
    if (shard.dim() != dim) throw ShapeError(op, "shards disagree on dim");
    if (shard.meta.size() != shard.count()) throw ConsistencyError(op, "meta/vector count mismatch");
    for (std::size_t r = 0; r < shard.count(); ++r) {
      const auto id = shard.meta[r].sample_id;
      auto [it, inserted] = owner.emplace(id, s);
      if (!inserted && it->second != s) {
        throw ConsistencyError(op, "sample " + std::to_string(id) + " is split across shards");
      }
      refs[id].push_back({s, r});
    }
  }

  std::map<std::uint64_t, SampleTokens> out;
  for (auto& [id, list] : refs) {
    std::sort(list.begin(), list.end(), [&](const Ref& a, const Ref& b) {
      return shards[a.shard].meta[a.row].token_index < shards[b.shard].meta[b.row].token_index;
    });
    SampleTokens sample;
    sample.sample_id = id;
    sample.vectors.resize(static_cast<Eigen::Index>(list.size()), static_cast<Eigen::Index>(dim));
    for (std::size_t i = 0; i < list.size(); ++i) {
      const auto& shard = shards[list[i].shard];
      const auto& meta = shard.meta[list[i].row];
      if (meta.token_index != i) {
        throw ConsistencyError(op, "sample " + std::to_string(id) + " token indices are not consecutive from 0");
      }
      sample.vectors.row(static_cast<Eigen::Index>(i)) = shard.vectors.row(static_cast<Eigen::Index>(list[i].row));
      sample.meta.push_back(meta);
    }
    out.emplace(id, std::move(sample));
  }
  return out;
}

PooledEmbedding pool_sample(const SampleTokens& sample, PoolStrategy strategy, const RoleMask& mask) {
  const std::string op = "pool_sample";
  if (static_cast<std::size_t>(sample.vectors.rows()) != sample.meta.size()) {
    throw ConsistencyError(op, "meta/vector count mismatch for sample " + std::to_string(sample.sample_id));
  }
  const Eigen::Index d = sample.vectors.cols();
  PooledEmbedding out;
  out.sample_id = sample.sample_id;
  out.strategy = strategy;
  out.mask = mask;
  out.vector = Vector::Zero(d);

  std::size_t kept = 0;
  std::optional<std::size_t> last;
  for (std::size_t t = 0; t < sample.meta.size(); ++t) {
    if (mask.contains(sample.meta[t].token_role)) continue;
    ++kept;
    if (strategy == PoolStrategy::kMean) {
      out.vector += sample.vectors.row(static_cast<Eigen::Index>(t)).transpose().cast<double>();
    } else if (!last || sample.meta[t].token_index > sample.meta[*last].token_index) {
      last = t;
    }
  }
  if (kept == 0) {
    throw EmptySampleError(op, "all tokens of sample " + std::to_string(sample.sample_id) + " are masked");
  }
  if (strategy == PoolStrategy::kMean) {
    out.vector /= static_cast<double>(kept);
  } else {
    out.vector = sample.vectors.row(static_cast<Eigen::Index>(*last)).transpose().cast<double>();
  }
  return out;
}

}  // namespace mmsae
