// Copyright (c) 2026, mmsae contributors
// SPDX-License-Identifier: Apache-2.0

#include "mmsae/sae.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <thread>

#include <json.hpp>

#include "mmsae/activation_store.hpp"
#include "mmsae/errors.hpp"
#include "mmsae/rng.hpp"

namespace mmsae {

namespace {

constexpr Eigen::Index kChunkRows = 256;

bool before(const SparseEntry& a, const SparseEntry& b) {
  return a.value > b.value || (a.value == b.value && a.index < b.index);
}

void check_batch(const Eigen::Ref<const Matrix>& batch, const SaeParams& p, const std::string& op) {
  if (batch.rows() == 0) throw ConfigError(op, "empty batch");
  if (static_cast<std::size_t>(batch.cols()) != p.input_dim()) {
    throw ShapeError(op, "batch has " + std::to_string(batch.cols()) + " columns, params expect " +
                             std::to_string(p.input_dim()));
  }
}

// Forward results for a contiguous block of rows.
struct ChunkForward {
  std::vector<SparseCode> codes;
  Matrix residual;  // reconstruction - scaled input, one row per input row
};

void forward_chunk(const Eigen::Ref<const Matrix>& rows, const SaeParams& p, ChunkForward& out) {
  const Matrix scaled = rows * p.input_scale;
  Matrix pre = scaled * p.enc_weight.transpose();
  pre.rowwise() += p.enc_bias.transpose();
  out.codes.resize(static_cast<std::size_t>(rows.rows()));
  out.residual = -scaled;
  for (Eigen::Index t = 0; t < rows.rows(); ++t) {
    auto& code = out.codes[static_cast<std::size_t>(t)];
    code = top_k_relu(pre.row(t).transpose(), p.k);
    for (const auto& e : code.entries) out.residual.row(t) += e.value * p.dictionary.row(e.index);
  }
}

// Runs forward_chunk over all chunks in waves of `threads` and hands each
// chunk to `consume` strictly in row order.
template <typename Consume>
void for_each_chunk(const Eigen::Ref<const Matrix>& batch, const SaeParams& p, std::size_t threads,
                    Consume&& consume) {
  const Eigen::Index n = batch.rows();
  const Eigen::Index chunks = (n + kChunkRows - 1) / kChunkRows;
  const Eigen::Index wave = static_cast<Eigen::Index>(std::max<std::size_t>(threads, 1));
  std::vector<ChunkForward> results(static_cast<std::size_t>(std::min(wave, chunks)));
  for (Eigen::Index first = 0; first < chunks; first += wave) {
    const Eigen::Index count = std::min(wave, chunks - first);
    auto run = [&](Eigen::Index c) {
      const Eigen::Index r0 = (first + c) * kChunkRows;
      const Eigen::Index len = std::min(kChunkRows, n - r0);
      forward_chunk(batch.middleRows(r0, len), p, results[static_cast<std::size_t>(c)]);
    };
    if (count == 1) {
      run(0);
    } else {
      std::vector<std::thread> workers;
      for (Eigen::Index c = 1; c < count; ++c) workers.emplace_back(run, c);
      run(0);
      for (auto& w : workers) w.join();
    }
    for (Eigen::Index c = 0; c < count; ++c) {
      consume((first + c) * kChunkRows, results[static_cast<std::size_t>(c)]);
    }
  }
}

void check_finite(const auto& m, const char* name, const std::string& op) {
  if (!m.allFinite()) throw NumericError(op, std::string("non-finite gradient in ") + name);
}

}  // namespace

void check_params(const SaeParams& p, const std::string& op) {
  const auto c = p.dictionary.rows();
  const auto d = p.dictionary.cols();
  if (c == 0 || d == 0) throw ShapeError(op, "empty dictionary");
  if (p.enc_weight.rows() != c || p.enc_weight.cols() != d) throw ShapeError(op, "enc_weight shape differs from dictionary");
  if (p.enc_bias.size() != c) throw ShapeError(op, "enc_bias length differs from dictionary width");
  if (p.k < 1 || p.k > static_cast<std::size_t>(c)) throw ConfigError(op, "k must satisfy 1 <= k <= c");
  if (!(p.input_scale > 0.0) || !std::isfinite(p.input_scale)) throw ConfigError(op, "input_scale must be positive");
  if (!p.dictionary.allFinite() || !p.enc_weight.allFinite() || !p.enc_bias.allFinite()) {
    throw NumericError(op, "parameters contain non-finite entries");
  }
}

Vector SparseCode::dense() const {
  Vector z = Vector::Zero(static_cast<Eigen::Index>(dim));
  for (const auto& e : entries) z(e.index) = e.value;
  return z;
}

double SparseCode::l1() const {
  double s = 0.0;
  for (const auto& e : entries) s += e.value;
  return s;
}

SparseCode sparse_from_dense(const Eigen::Ref<const Vector>& z) {
  SparseCode code;
  code.dim = static_cast<std::size_t>(z.size());
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    if (z(i) > 0.0) code.entries.push_back({static_cast<std::uint32_t>(i), z(i)});
  }
  return code;
}

void normalize_dictionary(Matrix& dictionary) {
  for (Eigen::Index i = 0; i < dictionary.rows(); ++i) {
    const double norm = dictionary.row(i).norm();
    if (!(norm > 0.0) || !std::isfinite(norm)) {
      throw NumericError("normalize_dictionary", "dictionary row " + std::to_string(i) + " has zero or non-finite norm");
    }
    dictionary.row(i) /= norm;
  }
}

SaeParams init_params(std::size_t width, std::size_t input_dim, std::size_t k, std::uint64_t seed) {
  if (width == 0 || input_dim == 0) throw ConfigError("init_params", "width and input_dim must be positive");
  if (k < 1 || k > width) throw ConfigError("init_params", "k must satisfy 1 <= k <= width");
  Rng rng(seed);
  SaeParams p;
  p.k = k;
  p.dictionary.resize(static_cast<Eigen::Index>(width), static_cast<Eigen::Index>(input_dim));
  for (Eigen::Index i = 0; i < p.dictionary.size(); ++i) p.dictionary.data()[i] = rng.normal();
  normalize_dictionary(p.dictionary);
  p.enc_weight = p.dictionary;
  p.enc_bias = Vector::Zero(static_cast<Eigen::Index>(width));
  return p;
}

Vector preactivation(const Eigen::Ref<const Vector>& h, const SaeParams& p) {
  if (static_cast<std::size_t>(h.size()) != p.input_dim()) {
    throw ShapeError("encode", "input has length " + std::to_string(h.size()) + ", expected " +
                                   std::to_string(p.input_dim()));
  }
  return p.enc_weight * (h * p.input_scale) + p.enc_bias;
}

SparseCode top_k_relu(const Eigen::Ref<const Vector>& pre, std::size_t k) {
  SparseCode code;
  code.dim = static_cast<std::size_t>(pre.size());
  auto& e = code.entries;
  for (Eigen::Index i = 0; i < pre.size(); ++i) {
    if (pre(i) > 0.0) e.push_back({static_cast<std::uint32_t>(i), pre(i)});
  }
  if (e.size() > k) {
    std::nth_element(e.begin(), e.begin() + static_cast<std::ptrdiff_t>(k), e.end(), before);
    e.resize(k);
    std::sort(e.begin(), e.end(), [](const SparseEntry& a, const SparseEntry& b) { return a.index < b.index; });
  }
  return code;
}

SparseCode encode(const Eigen::Ref<const Vector>& h, const SaeParams& p) {
  return top_k_relu(preactivation(h, p), p.k);
}

std::vector<SparseCode> encode_batch(const Eigen::Ref<const Matrix>& batch, const SaeParams& p) {
  if (static_cast<std::size_t>(batch.cols()) != p.input_dim()) {
    throw ShapeError("encode", "batch has " + std::to_string(batch.cols()) + " columns, params expect " +
                                   std::to_string(p.input_dim()));
  }
  std::vector<SparseCode> codes;
  codes.reserve(static_cast<std::size_t>(batch.rows()));
  for (Eigen::Index r0 = 0; r0 < batch.rows(); r0 += kChunkRows) {
    const Eigen::Index len = std::min(kChunkRows, batch.rows() - r0);
    Matrix pre = (batch.middleRows(r0, len) * p.input_scale) * p.enc_weight.transpose();
    pre.rowwise() += p.enc_bias.transpose();
    for (Eigen::Index t = 0; t < len; ++t) codes.push_back(top_k_relu(pre.row(t).transpose(), p.k));
  }
  return codes;
}

Vector decode(const SparseCode& z, const SaeParams& p) {
  if (z.dim != p.width()) {
    throw ShapeError("decode", "code dim " + std::to_string(z.dim) + " != dictionary width " + std::to_string(p.width()));
  }
  Vector out = Vector::Zero(p.dictionary.cols());
  for (const auto& e : z.entries) {
    if (e.index >= p.width()) throw IndexError("decode", "code index " + std::to_string(e.index) + " out of range");
    out += e.value * p.dictionary.row(e.index).transpose();
  }
  return out;
}

LossTerms sae_loss(const Eigen::Ref<const Matrix>& batch, const SaeParams& p, double alpha) {
  const std::string op = "sae_loss";
  check_batch(batch, p, op);
  double rec = 0.0;
  double l1 = 0.0;
  for_each_chunk(batch, p, 1, [&](Eigen::Index, const ChunkForward& f) {
    for (Eigen::Index t = 0; t < f.residual.rows(); ++t) {
      rec += f.residual.row(t).squaredNorm();
      l1 += f.codes[static_cast<std::size_t>(t)].l1();
    }
  });
  const double n = static_cast<double>(batch.rows());
  LossTerms out;
  out.reconstruction = rec / n;
  out.sparsity = l1 / n;
  out.total = out.reconstruction + alpha * out.sparsity;
  return out;
}

LossTerms sae_loss_and_grad(const Eigen::Ref<const Matrix>& batch, const SaeParams& p, double alpha,
                            Gradients& grads, std::size_t threads) {
  const std::string op = "sae_loss";
  check_batch(batch, p, op);
  const double n = static_cast<double>(batch.rows());
  const double two_over_n = 2.0 / n;
  const double l1_grad = alpha / n;

  grads.enc_weight = Matrix::Zero(p.enc_weight.rows(), p.enc_weight.cols());
  grads.dictionary = Matrix::Zero(p.dictionary.rows(), p.dictionary.cols());
  grads.enc_bias = Vector::Zero(p.enc_bias.size());

  double rec = 0.0;
  double l1 = 0.0;
  for_each_chunk(batch, p, threads, [&](Eigen::Index r0, const ChunkForward& f) {
    for (Eigen::Index t = 0; t < f.residual.rows(); ++t) {
      const auto residual = f.residual.row(t);
      const auto& code = f.codes[static_cast<std::size_t>(t)];
      rec += residual.squaredNorm();
      l1 += code.l1();
      for (const auto& e : code.entries) {
        grads.dictionary.row(e.index) += (two_over_n * e.value) * residual;
        const double dpre = two_over_n * p.dictionary.row(e.index).dot(residual) + l1_grad;
        grads.enc_weight.row(e.index) += (dpre * p.input_scale) * batch.row(r0 + t);
        grads.enc_bias(e.index) += dpre;
      }
    }
  });

  LossTerms out;
  out.reconstruction = rec / n;
  out.sparsity = l1 / n;
  out.total = out.reconstruction + alpha * out.sparsity;
  return out;
}

void TrainConfig::validate() const {
  const std::string op = "train";
  // A zero learning rate is accepted: it turns training into a pure
  // evaluation pass.
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError(op, "learning_rate must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError(op, "beta1 must lie in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError(op, "beta2 must lie in [0, 1)");
  if (!(epsilon > 0.0)) throw ConfigError(op, "epsilon must be positive");
  if (batch_size == 0) throw ConfigError(op, "batch_size must be positive");
  if (!(alpha >= 0.0)) throw ConfigError(op, "alpha must be nonnegative");
  if (steps == 0) throw ConfigError(op, "steps must be positive");
}

AdamState AdamState::zeros_like(const SaeParams& p) {
  AdamState s;
  s.m_enc = s.v_enc = Matrix::Zero(p.enc_weight.rows(), p.enc_weight.cols());
  s.m_dict = s.v_dict = Matrix::Zero(p.dictionary.rows(), p.dictionary.cols());
  s.m_bias = s.v_bias = Vector::Zero(p.enc_bias.size());
  return s;
}

namespace {

template <typename Param, typename Grad>
void adam_update(Param& param, const Grad& g, Param& m, Param& v, const TrainConfig& c, double bc1, double bc2) {
  m = c.beta1 * m + (1.0 - c.beta1) * g;
  v = c.beta2 * v + (1.0 - c.beta2) * g.cwiseProduct(g);
  param.array() -= c.learning_rate * (m.array() / bc1) / ((v.array() / bc2).sqrt() + c.epsilon);
}

}  // namespace

void adam_step(SaeParams& p, const Gradients& g, AdamState& state, const TrainConfig& config,
               std::size_t step_index) {
  const std::string op = "adam_step";
  if (step_index < 1) throw ConfigError(op, "step_index must be >= 1");
  if (g.enc_weight.rows() != p.enc_weight.rows() || g.enc_weight.cols() != p.enc_weight.cols() ||
      g.dictionary.rows() != p.dictionary.rows() || g.dictionary.cols() != p.dictionary.cols() ||
      g.enc_bias.size() != p.enc_bias.size()) {
    throw ShapeError(op, "gradient shapes differ from parameter shapes");
  }
  check_finite(g.enc_weight, "enc_weight", op);
  check_finite(g.dictionary, "dictionary", op);
  check_finite(g.enc_bias, "enc_bias", op);

  const double t = static_cast<double>(step_index);
  const double bc1 = 1.0 - std::pow(config.beta1, t);
  const double bc2 = 1.0 - std::pow(config.beta2, t);
  adam_update(p.enc_weight, g.enc_weight, state.m_enc, state.v_enc, config, bc1, bc2);
  adam_update(p.dictionary, g.dictionary, state.m_dict, state.v_dict, config, bc1, bc2);
  adam_update(p.enc_bias, g.enc_bias, state.m_bias, state.v_bias, config, bc1, bc2);
  normalize_dictionary(p.dictionary);
}

TrainResult train(const BatchSource& batches, const TrainConfig& config, SaeParams initial,
                  const std::function<void(const LossRecord&)>& on_step) {
  const std::string op = "train";
  config.validate();
  check_params(initial, op);
  normalize_dictionary(initial.dictionary);

  TrainResult result;
  result.params = std::move(initial);
  result.history.reserve(config.steps);
  AdamState state = AdamState::zeros_like(result.params);
  Gradients grads;
  for (std::size_t step = 1; step <= config.steps; ++step) {
    std::optional<Matrix> batch = batches();
    if (!batch) throw TrainingAborted(op, "batch stream exhausted", step - 1);
    LossRecord rec;
    rec.step = step;
    rec.loss = sae_loss_and_grad(*batch, result.params, config.alpha, grads, config.threads);
    adam_step(result.params, grads, state, config, step);
    result.history.push_back(rec);
    if (on_step) on_step(rec);
  }
  return result;
}

std::set<std::size_t> dead_feature_report(std::span<const SparseCode> codes, std::size_t width) {
  std::vector<double> total(width, 0.0);
  for (const auto& code : codes) {
    for (const auto& e : code.entries) {
      if (e.index >= width) throw IndexError("dead_feature_report", "code index out of range");
      total[e.index] += e.value;
    }
  }
  std::set<std::size_t> dead;
  for (std::size_t i = 0; i < width; ++i) {
    if (total[i] == 0.0) dead.insert(i);
  }
  return dead;
}

void save_checkpoint(const SaeParams& p, const CheckpointInfo& info, const std::filesystem::path& dir) {
  check_params(p, "save_checkpoint");
  std::filesystem::create_directories(dir);
  write_matrix_file(p.enc_weight.cast<float>(), dir / "enc_weight.bin");
  write_matrix_file(p.dictionary.cast<float>(), dir / "dictionary.bin");
  write_matrix_file(p.enc_bias.transpose().cast<float>(), dir / "enc_bias.bin");
  nlohmann::json manifest = {
      {"c", p.width()},         {"d", p.input_dim()}, {"k", p.k},
      {"alpha", info.alpha},    {"step", info.step},  {"seed", info.seed},
      {"input_scale", p.input_scale},
  };
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  out << manifest.dump(2) << '\n';
  if (!out) throw IoError("save_checkpoint", "cannot write manifest in " + dir.string());
}

SaeParams load_checkpoint(const std::filesystem::path& dir, CheckpointInfo* info) {
  const std::string op = "load_checkpoint";
  std::ifstream in(dir / "manifest.json");
  if (!in) throw IoError(op, "missing manifest.json in " + dir.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(op, std::string("manifest: ") + e.what());
  }
  SaeParams p;
  p.enc_weight = read_matrix_file(dir / "enc_weight.bin").cast<double>();
  p.dictionary = read_matrix_file(dir / "dictionary.bin").cast<double>();
  p.enc_bias = read_matrix_file(dir / "enc_bias.bin").cast<double>().transpose();
  try {
    p.k = manifest.at("k").get<std::size_t>();
    p.input_scale = manifest.value("input_scale", 1.0);
    if (manifest.at("c").get<std::size_t>() != p.width() || manifest.at("d").get<std::size_t>() != p.input_dim()) {
      throw ConsistencyError(op, "manifest shape disagrees with stored matrices");
    }
    if (info) {
      info->alpha = manifest.at("alpha").get<double>();
      info->step = manifest.at("step").get<std::size_t>();
      info->seed = manifest.at("seed").get<std::uint64_t>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(op, std::string("manifest: ") + e.what());
  }
  check_params(p, op);
  return p;
}

void write_loss_history_csv(std::span<const LossRecord> history, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("write_loss_history", "cannot open " + path.string());
  out << "step,total,reconstruction,sparsity\n";
  char buf[128];
  for (const auto& r : history) {
    std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.17g\n", r.step, r.loss.total, r.loss.reconstruction,
                  r.loss.sparsity);
    out << buf;
  }
}

}  // namespace mmsae
