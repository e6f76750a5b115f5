// Copyright (c) 2026, mmsae contributors
// SPDX-License-Identifier: Apache-2.0
//
// Per-concept statistics over sparse codes.
//
// Notation: D is the c x d dictionary, M = D D^T the c x c atom Gram matrix,
// so that z^T M z' = <decode(z), decode(z')>. Pair expectations are
// unweighted means over matched (image, text) pairs.
//
//   energy_i      = E_z[z_i]                               (image and text pooled)
//   modality_i    = E_text[z_i] / (E_image[z_i] + E_text[z_i])
//   B             = E[z_img z_txt^T] .* M
//   bridge_i      = 1/2 * sum_j (B_ij + B_ji)
//   attribution   = E[z_img .* (M z_txt) + z_txt .* (M z_img)]

#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mmsae/activation_store.hpp"
#include "mmsae/linalg.hpp"
#include "mmsae/sae.hpp"

namespace mmsae {

inline constexpr double kDefaultActivityEpsilon = 1e-8;

struct CodeCollection {
  std::vector<SparseCode> codes;
  Modality modality = Modality::kText;
  std::size_t dim = 0;
};

struct PairedCodes {
  std::vector<std::pair<SparseCode, SparseCode>> pairs;  // (image, text)
  // Optional per-pair weights for the pair expectation. Empty means the
  // plain mean, which is what the toolkit uses everywhere.
  std::vector<double> weights;
};

Vector energy(std::span<const CodeCollection> collections);

struct ModalityScores {
  Vector score;               // NaN where inactive
  std::vector<bool> active;

  /// Scores of active concepts only, in concept order.
  std::vector<double> active_scores() const;
};

ModalityScores modality_score(const CodeCollection& image, const CodeCollection& text,
                              double activity_epsilon = kDefaultActivityEpsilon);

/// Dense c x c Gram matrix of the dictionary atoms.
Matrix atom_gram(const Eigen::Ref<const Matrix>& dictionary);

struct BridgeResult {
  Matrix matrix;       // B, c x c
  Vector per_concept;  // symmetrized marginal
};

/// Forms the dense c x c bridge matrix. Memory grows as c^2; use
/// bridge_scores for wide dictionaries.
BridgeResult bridge_matrix(const PairedCodes& pairs, const Eigen::Ref<const Matrix>& dictionary);

enum class BridgeReduction {
  kSymmetrizedMarginal,  // 1/2 sum_j (B_ij + B_ji), the default
  kDiagonal,             // B_ii, co-activation of the same concept on both sides
};

/// Per-concept bridge score without materializing B.
Vector bridge_scores(const PairedCodes& pairs, const Eigen::Ref<const Matrix>& dictionary,
                     BridgeReduction reduction = BridgeReduction::kSymmetrizedMarginal);

Vector retrieval_attribution(const PairedCodes& pairs, const Eigen::Ref<const Matrix>& dictionary);

/// The ceil(fraction * c) highest-scoring indices, ties to the lower index.
/// Returned in ascending index order.
std::vector<std::size_t> top_fraction(const Eigen::Ref<const Vector>& scores, double fraction);

/// Number of concepts selected by top_fraction for a dictionary of width c.
std::size_t top_count(std::size_t width, double fraction);

double jaccard(const std::set<std::size_t>& a, const std::set<std::size_t>& b);
double jaccard(std::span<const std::size_t> a, std::span<const std::size_t> b);

/// |A ∩ B ∩ C| / |A ∪ B ∪ C|, 1 when all are empty.
double triple_overlap(std::span<const std::size_t> a, std::span<const std::size_t> b,
                      std::span<const std::size_t> c);

struct CurvePoint {
  std::size_t rank = 0;
  double fraction = 0.0;
};

std::vector<CurvePoint> cumulative_energy_curve(const Eigen::Ref<const Vector>& energy);

/// Silverman's rule of thumb 0.9 * min(sd, IQR/1.34) * n^(-1/5), with the
/// usual fallbacks when the spread statistics vanish.
double silverman_bandwidth(std::span<const double> samples);

struct DensityPoint {
  double x = 0.0;
  double density = 0.0;
};

/// Gaussian KDE on `grid` evenly spaced points over [-3h, 1 + 3h].
std::vector<DensityPoint> modality_density_export(std::span<const double> scores, double bandwidth,
                                                  std::size_t grid);

struct ConceptStats {
  Vector energy;
  ModalityScores modality;
  Vector bridge;
  Vector attribution;
};

/// Writes `concept,energy,modality_score,active,bridge,attribution`.
/// Inactive concepts leave modality_score empty.
void write_stats_csv(const ConceptStats& stats, std::ostream& out);
ConceptStats read_stats_csv(std::istream& in);

}  // namespace mmsae
