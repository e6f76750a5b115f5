// Copyright (c) 2026, mmsae contributors
// SPDX-License-Identifier: Apache-2.0
//
// Top-K sparse autoencoder.
//
//   a = W_enc * (s * h) + b          pre-activation, s = input_scale
//   z = TopK_k(ReLU(a))              sparse code, ties to the lower index
//   h_hat = sum_i z_i * D_i          no decoder bias
//
//   loss = mean_t ||s*h_t - h_hat_t||^2 + alpha * mean_t ||z_t||_1
//
// Dictionary rows D_i are kept at unit norm after every optimizer step.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "mmsae/linalg.hpp"

namespace mmsae {

struct SaeParams {
  Matrix enc_weight;  // c x d
  Matrix dictionary;  // c x d, one atom per row
  Vector enc_bias;    // c
  std::size_t k = 1;
  // Global scalar applied to inputs before encoding. 1.0 unless training ran
  // with standardization.
  double input_scale = 1.0;

  std::size_t width() const { return static_cast<std::size_t>(dictionary.rows()); }
  std::size_t input_dim() const { return static_cast<std::size_t>(dictionary.cols()); }
};

/// Throws on broken invariants (shapes, 1 <= k <= c, finiteness).
void check_params(const SaeParams& p, const std::string& op);

struct SparseEntry {
  std::uint32_t index = 0;
  double value = 0.0;

  bool operator==(const SparseEntry&) const = default;
};

struct SparseCode {
  std::size_t dim = 0;
  std::vector<SparseEntry> entries;  // strictly increasing indices, values > 0

  Vector dense() const;
  double l1() const;
};

/// Builds a code from a dense vector, keeping strictly positive entries.
SparseCode sparse_from_dense(const Eigen::Ref<const Vector>& z);

/// Deterministic initialization: Gaussian dictionary rows, unit-normalized;
/// encoder weights copy the dictionary; zero bias.
SaeParams init_params(std::size_t width, std::size_t input_dim, std::size_t k, std::uint64_t seed);

/// Renormalizes every dictionary row to unit norm. Zero rows are an error.
void normalize_dictionary(Matrix& dictionary);

Vector preactivation(const Eigen::Ref<const Vector>& h, const SaeParams& p);

/// ReLU followed by Top-K on one pre-activation vector.
SparseCode top_k_relu(const Eigen::Ref<const Vector>& pre, std::size_t k);

SparseCode encode(const Eigen::Ref<const Vector>& h, const SaeParams& p);
std::vector<SparseCode> encode_batch(const Eigen::Ref<const Matrix>& batch, const SaeParams& p);
Vector decode(const SparseCode& z, const SaeParams& p);

struct LossTerms {
  double total = 0.0;
  double reconstruction = 0.0;
  double sparsity = 0.0;
};

struct Gradients {
  Matrix enc_weight;
  Matrix dictionary;
  Vector enc_bias;
};

LossTerms sae_loss(const Eigen::Ref<const Matrix>& batch, const SaeParams& p, double alpha);

/// Loss plus analytic gradients (through the active Top-K mask). Rows are
/// processed in fixed-size chunks; chunk forward passes may run on up to
/// `threads` workers but the gradient reduction always walks rows in order,
/// so results do not depend on the thread count.
LossTerms sae_loss_and_grad(const Eigen::Ref<const Matrix>& batch, const SaeParams& p, double alpha,
                            Gradients& grads, std::size_t threads = 1);

struct TrainConfig {
  double learning_rate = 8e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t batch_size = 4096;
  double alpha = 0.0;
  std::size_t steps = 1000;
  std::uint64_t seed = 0;
  std::size_t threads = 1;

  void validate() const;
};

struct AdamState {
  Matrix m_enc, v_enc;
  Matrix m_dict, v_dict;
  Vector m_bias, v_bias;

  static AdamState zeros_like(const SaeParams& p);
};

/// One Adam update with bias correction (step_index >= 1), then dictionary
/// renormalization. Non-finite gradients throw NumericError naming the
/// offending parameter.
void adam_step(SaeParams& p, const Gradients& g, AdamState& state, const TrainConfig& config,
               std::size_t step_index);

struct LossRecord {
  std::size_t step = 0;
  LossTerms loss;
};

struct TrainResult {
  SaeParams params;
  std::vector<LossRecord> history;
};

/// Yields training batches (n x d); std::nullopt ends the stream.
using BatchSource = std::function<std::optional<Matrix>()>;

/// Runs config.steps Adam iterations starting from `initial`. Each record
/// holds the loss of the batch before that step's update.
TrainResult train(const BatchSource& batches, const TrainConfig& config, SaeParams initial,
                  const std::function<void(const LossRecord&)>& on_step = {});

std::set<std::size_t> dead_feature_report(std::span<const SparseCode> codes, std::size_t width);

// Checkpoint directory: enc_weight.bin, dictionary.bin, enc_bias.bin in the
// shard container layout, plus manifest.json {c, d, k, alpha, step, seed,
// input_scale}.
struct CheckpointInfo {
  double alpha = 0.0;
  std::size_t step = 0;
  std::uint64_t seed = 0;
};

void save_checkpoint(const SaeParams& p, const CheckpointInfo& info, const std::filesystem::path& dir);
SaeParams load_checkpoint(const std::filesystem::path& dir, CheckpointInfo* info = nullptr);

void write_loss_history_csv(std::span<const LossRecord> history, const std::filesystem::path& path);

}  // namespace mmsae
