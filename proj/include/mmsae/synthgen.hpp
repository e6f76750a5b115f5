// Copyright (c) 2026, mmsae contributors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic data with known ground truth: planted dictionaries, sparse
// activations over them, and paired two-modality corpora with a planted
// nuisance direction shared by both sides.
//
// All draws come from Rng streams derived from the spec seed, in a fixed
// order, so output is bitwise reproducible.

#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include <json.hpp>

#include "mmsae/activation_store.hpp"
#include "mmsae/linalg.hpp"
#include "mmsae/retrieval.hpp"
#include "mmsae/sae.hpp"

namespace mmsae {

inline constexpr std::uint64_t kDefaultSynthSeed = 0xC0C0;

struct SynthSpec {
  std::size_t c_true = 128;
  std::size_t d = 64;
  std::size_t k_true = 4;
  double noise_sigma = 0.01;
  std::size_t n_samples = 500;  // pairs for the paired corpus
  double shared_fraction = 1.0;
  // Scales the whole text-side signal (shared and text-only concepts).
  double text_bias_beta = 4.0;
  double nuisance_strength = 20.0;
  std::uint64_t seed = kDefaultSynthSeed;

  void validate() const;
  nlohmann::json to_json() const;
  static SynthSpec from_json(const nlohmann::json& j);  // unknown keys rejected
};

/// Gaussian rows, unit-normalized.
Matrix gen_planted_dictionary(std::size_t c_true, std::size_t d, std::uint64_t seed);

struct SyntheticActivations {
  ActivationShard shard;  // one image-role token per sample, sample ids 0..n-1
  std::vector<SparseCode> codes;
};

/// Each sample activates k_true distinct uniform concepts with magnitudes
/// |N(0,1)| + 0.5, then adds N(0, noise_sigma^2) per coordinate.
SyntheticActivations gen_activations(const Eigen::Ref<const Matrix>& dictionary, std::size_t n, std::size_t k_true,
                                     double noise_sigma, std::uint64_t seed);

/// Unit vector orthogonal to the dictionary span when d > rows, otherwise the
/// direction least expressed by the rows (smallest eigenvector of D^T D).
Vector gen_nuisance_direction(const Eigen::Ref<const Matrix>& dictionary, std::uint64_t seed);

struct PairedCorpus {
  ActivationShard image;  // sample ids 0..n-1
  ActivationShard text;   // sample ids n..2n-1
  TaskSpec task;          // image queries, text candidates, pair j <-> j
  Vector nuisance;
  Matrix dictionary;
  std::vector<SparseCode> image_codes;
  std::vector<SparseCode> text_codes;  // text-side magnitudes include beta
  // Concept index ranges: [0, shared_end) shared, [shared_end, image_end)
  // image-only, [image_end, c_true) text-only.
  std::size_t shared_end = 0;
  std::size_t image_end = 0;
};

/// Concepts are split into a shared pool of round(shared_fraction * c_true)
/// and the remainder halved into image-only and text-only pools. Each pair
/// draws round(shared_fraction * k_true) shared concepts used by both sides
/// and fills up to k_true from its modality pool.
PairedCorpus gen_paired_corpus(const SynthSpec& spec);

}  // namespace mmsae
