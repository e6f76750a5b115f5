// Copyright (c) 2026, mmsae contributors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "mmsae/activation_store.hpp"
#include "mmsae/errors.hpp"
#include "test_util.hpp"

using namespace mmsae;

namespace {

// Reads little-endian integers straight from bytes, independent of the
// library's own header parser.
template <typename T>
T le(const std::string& bytes, std::size_t offset) {
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    v |= static_cast<T>(static_cast<unsigned char>(bytes[offset + i])) << (8 * i);
  }
  return v;
}

ActivationShard tiny_shard() {
  ActivationShard s;
  s.vectors.resize(3, 2);
  s.vectors << 1.0f, -2.0f, 0.5f, 0.25f, -0.0f, 3.0f;
  s.meta = {{7, Modality::kImage, TokenRole::kImage, 0},
            {7, Modality::kImage, TokenRole::kPrompt, 1},
            {9, Modality::kText, TokenRole::kContent, 0}};
  return s;
}

std::pair<std::string, std::string> serialize(const ActivationShard& s) {
  std::ostringstream data, meta;
  write_shard(s, data, meta);
  return {data.str(), meta.str()};
}

ActivationShard deserialize(const std::string& data, const std::string& meta) {
  std::istringstream d(data), m(meta);
  return read_shard(d, m);
}

}  // namespace

TEST_CASE("header bytes follow the documented layout") {
  const ActivationShard s = tiny_shard();
  const auto [data, meta] = serialize(s);
  REQUIRE(data.size() == 24 + 3 * 2 * 4);
  CHECK(data.substr(0, 8) == "SAEACT01");
  CHECK(le<std::uint32_t>(data, 8) == 1);
  CHECK(le<std::uint32_t>(data, 12) == 2);
  CHECK(le<std::uint64_t>(data, 16) == 3);
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 2; ++c) {
      const auto bits = le<std::uint32_t>(data, 24 + static_cast<std::size_t>(4 * (r * 2 + c)));
      CHECK(bits == std::bit_cast<std::uint32_t>(s.vectors(r, c)));
    }
  }
  std::istringstream lines(meta);
  std::string line;
  std::getline(lines, line);
  CHECK(line.find("\"sample_id\":7") != std::string::npos);
  CHECK(line.find("\"token_role\":\"image\"") != std::string::npos);
}

TEST_CASE("write then read is bit exact, signed zero included") {
  const ActivationShard s = tiny_shard();
  const auto [data, meta] = serialize(s);
  const ActivationShard back = deserialize(data, meta);
  CHECK(bit_equal(s, back));
  CHECK(std::signbit(back.vectors(2, 0)));
}

TEST_CASE("random shards survive a file round trip") {
  testutil::TempDir dir("store");
  Rng rng(11);
  for (int i = 0; i < 20; ++i) {
    const auto s = testutil::random_shard(rng, 1 + rng.uniform_index(5), 1 + rng.uniform_index(4),
                                          1 + rng.uniform_index(9), rng.uniform_index(1000));
    const auto path = dir / ("s" + std::to_string(i) + ".saeact");
    const std::size_t bytes = write_shard_file(s, path);
    CHECK(std::filesystem::exists(sidecar_path(path)));
    CHECK(bytes == std::filesystem::file_size(path) + std::filesystem::file_size(sidecar_path(path)));
    CHECK(bit_equal(s, read_shard_file(path)));
  }
}

TEST_CASE("read errors are typed") {
  const auto [data, meta] = serialize(tiny_shard());

  SUBCASE("bad magic") {
    std::string bad = data;
    bad[0] = 'X';
    CHECK_THROWS_AS(deserialize(bad, meta), FormatError);
  }
  SUBCASE("bad version") {
    std::string bad = data;
    bad[8] = 2;
    CHECK_THROWS_AS(deserialize(bad, meta), FormatError);
  }
  SUBCASE("truncated payload") {
    CHECK_THROWS_AS(deserialize(data.substr(0, data.size() - 1), meta), CorruptionError);
  }
  SUBCASE("truncated header") { CHECK_THROWS_AS(deserialize(data.substr(0, 12), meta), CorruptionError); }
  SUBCASE("empty shard") {
    std::string bad = data.substr(0, 24);
    std::memset(bad.data() + 16, 0, 8);
    CHECK_THROWS_AS(deserialize(bad, ""), FormatError);
  }
  SUBCASE("missing meta line") {
    std::string short_meta = meta.substr(0, meta.rfind('\n', meta.size() - 2) + 1);
    CHECK_THROWS_AS(deserialize(data, short_meta), ConsistencyError);
  }
  SUBCASE("unknown role tag") {
    std::string bad = meta;
    bad.replace(bad.find("\"prompt\""), 8, "\"dialog\"");
    CHECK_THROWS_AS(deserialize(data, bad), FormatError);
  }
}

TEST_CASE("validate_shard rejects broken invariants") {
  ActivationShard s = tiny_shard();
  CHECK_NOTHROW(validate_shard(s));

  SUBCASE("non-finite") {
    s.vectors(0, 0) = std::numeric_limits<float>::infinity();
    CHECK_THROWS_AS(validate_shard(s), FormatError);
  }
  SUBCASE("gap in token indices") {
    s.meta[1].token_index = 2;
    CHECK_THROWS_AS(validate_shard(s), ConsistencyError);
  }
  SUBCASE("meta count mismatch") {
    s.meta.pop_back();
    CHECK_THROWS_AS(validate_shard(s), ConsistencyError);
  }
  SUBCASE("empty") {
    s.vectors.resize(0, 2);
    s.meta.clear();
    CHECK_THROWS_AS(validate_shard(s), FormatError);
  }
}

TEST_CASE("matrix container allows zero rows") {
  MatrixF m(0, 5);
  std::stringstream io;
  write_matrix(m, io);
  const MatrixF back = read_matrix(io);
  CHECK(back.rows() == 0);
  CHECK(back.cols() == 5);

  MatrixF r(2, 3);
  r << 1, 2, 3, 4, 5, 6;
  std::stringstream io2;
  write_matrix(r, io2);
  CHECK(read_matrix(io2) == r);
}

// --- shuffle buffer --------------------------------------------------------

namespace {

std::vector<ActivationShard> id_shards(std::size_t shards, std::size_t per_shard) {
  std::vector<ActivationShard> out;
  std::uint64_t id = 0;
  for (std::size_t s = 0; s < shards; ++s) {
    ActivationShard sh;
    sh.vectors.resize(static_cast<Eigen::Index>(per_shard), 2);
    for (std::size_t r = 0; r < per_shard; ++r) {
      sh.vectors(static_cast<Eigen::Index>(r), 0) = static_cast<float>(id);
      sh.vectors(static_cast<Eigen::Index>(r), 1) = -static_cast<float>(id);
      sh.meta.push_back({id++, Modality::kText, TokenRole::kContent, 0});
    }
    out.push_back(std::move(sh));
  }
  return out;
}

std::vector<std::uint64_t> drain(ShuffledBatches& stream, std::vector<std::size_t>* sizes = nullptr) {
  std::vector<std::uint64_t> ids;
  while (auto b = stream.next()) {
    if (sizes) sizes->push_back(b->meta.size());
    for (std::size_t i = 0; i < b->meta.size(); ++i) {
      // Rows travel with their metadata.
      CHECK(b->vectors(static_cast<Eigen::Index>(i), 0) == static_cast<float>(b->meta[i].sample_id));
      ids.push_back(b->meta[i].sample_id);
    }
  }
  return ids;
}

}  // namespace

TEST_CASE("capacity one reproduces input order") {
  ShuffledBatches stream(make_vector_source(id_shards(3, 4)), 1, 1, 5);
  const auto ids = drain(stream);
  REQUIRE(ids.size() == 12);
  for (std::size_t i = 0; i < ids.size(); ++i) CHECK(ids[i] == i);
}

TEST_CASE("every token is emitted exactly once") {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    for (std::size_t cap : {4u, 7u, 32u, 100u}) {
      ShuffledBatches stream(make_vector_source(id_shards(5, 9)), cap, 4, seed);
      std::vector<std::size_t> sizes;
      const auto ids = drain(stream, &sizes);
      std::map<std::uint64_t, int> seen;
      for (auto id : ids) ++seen[id];
      CHECK(seen.size() == 45);
      for (const auto& [id, n] : seen) CHECK(n == 1);
      for (std::size_t i = 0; i + 1 < sizes.size(); ++i) CHECK(sizes[i] == 4);
      CHECK(sizes.back() == 1);  // 45 = 11 * 4 + 1
      CHECK(stream.tokens_emitted() == 45);
    }
  }
}

TEST_CASE("shuffle is a function of the seed") {
  auto run = [](std::uint64_t seed) {
    ShuffledBatches stream(make_vector_source(id_shards(4, 10)), 16, 5, seed);
    return drain(stream);
  };
  CHECK(run(42) == run(42));
  CHECK(run(42) != run(43));
}

TEST_CASE("capacity below batch size is rejected") {
  CHECK_THROWS_AS(ShuffledBatches(make_vector_source(id_shards(1, 2)), 2, 3, 0), ConfigError);
}

TEST_CASE("file source honors the pass count") {
  testutil::TempDir dir("passes");
  auto shards = id_shards(2, 3);
  std::vector<std::filesystem::path> paths;
  for (std::size_t i = 0; i < shards.size(); ++i) {
    paths.push_back(dir / ("p" + std::to_string(i) + ".saeact"));
    write_shard_file(shards[i], paths.back());
  }
  ShuffledBatches stream(make_file_source(paths, 3), 4, 2, 9);
  const auto ids = drain(stream);
  CHECK(ids.size() == 18);
  std::map<std::uint64_t, int> seen;
  for (auto id : ids) ++seen[id];
  for (const auto& [id, n] : seen) CHECK(n == 3);

  auto forever = make_file_source(paths, 0);
  for (int i = 0; i < 10; ++i) CHECK(forever().has_value());
}

// --- pooling ----------------------------------------------------------------

TEST_CASE("mean and last-token pooling with masks") {
  ActivationShard s;
  s.vectors.resize(4, 2);
  s.vectors << 1, 1,   // image
      3, 5,            // prompt
      5, 9,            // content
      100, 100;        // special
  s.meta = {{1, Modality::kImage, TokenRole::kImage, 0},
            {1, Modality::kImage, TokenRole::kPrompt, 1},
            {1, Modality::kImage, TokenRole::kContent, 2},
            {1, Modality::kImage, TokenRole::kSpecial, 3}};
  const std::vector<ActivationShard> shards = {s};
  const auto samples = collect_samples(shards);
  const auto& sample = samples.at(1);

  const auto mean = pool_sample(sample, PoolStrategy::kMean, parse_role_mask("special"));
  CHECK(mean.vector(0) == doctest::Approx(3.0));
  CHECK(mean.vector(1) == doctest::Approx(5.0));

  const auto last = pool_sample(sample, PoolStrategy::kLastToken, parse_role_mask("special,content"));
  CHECK(last.vector(0) == 3.0);
  CHECK(last.vector(1) == 5.0);

  CHECK_THROWS_AS(pool_sample(sample, PoolStrategy::kMean, parse_role_mask("image,prompt,content,special")),
                  EmptySampleError);
  CHECK_THROWS_AS(parse_role_mask("image,nonsense"), ConfigError);
  CHECK(to_string(parse_role_mask("special,image")) == "image,special");
}

TEST_CASE("collect_samples orders tokens and rejects split samples") {
  ActivationShard a;
  a.vectors.resize(2, 1);
  a.vectors << 20, 10;
  a.meta = {{4, Modality::kText, TokenRole::kContent, 1}, {4, Modality::kText, TokenRole::kContent, 0}};
  const std::vector<ActivationShard> one = {a};
  const auto samples = collect_samples(one);
  CHECK(samples.at(4).vectors(0, 0) == 10.0f);
  CHECK(samples.at(4).vectors(1, 0) == 20.0f);

  ActivationShard b = a;
  b.meta = {{4, Modality::kText, TokenRole::kContent, 2}, {5, Modality::kText, TokenRole::kContent, 0}};
  const std::vector<ActivationShard> two = {a, b};
  CHECK_THROWS_AS(collect_samples(two), ConsistencyError);
}
