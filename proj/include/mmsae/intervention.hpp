// Copyright (c) 2026, mmsae contributors
// SPDX-License-Identifier: Apache-2.0
//
// Subspace removal: take the highest-attribution atoms D_R, compute the SVD
// D_R = U S V^T, keep the top-r right singular vectors V_r and project them
// out of embeddings, h~ = h - V_r V_r^T h, followed by normalization.

#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <variant>
#include <vector>

#include "mmsae/linalg.hpp"

namespace mmsae {

struct FixedRank {
  std::size_t r = 1;
};

/// Smallest r whose squared singular values capture at least `theta` of
/// the total squared spectrum.
struct EnergyThreshold {
  double theta = 0.99;
};

using RankPolicy = std::variant<FixedRank, EnergyThreshold>;

std::string describe(const RankPolicy& policy);

inline constexpr double kDefaultRemovalFraction = 0.01;

struct RemovalSubspace {
  Matrix basis;  // d x r, orthonormal columns
  std::vector<std::size_t> source_indices;
  Vector singular_values;  // of D_R, descending

  std::size_t rank() const { return static_cast<std::size_t>(basis.cols()); }
  std::size_t dim() const { return static_cast<std::size_t>(basis.rows()); }

  /// Empty basis: removal reduces to normalization.
  static RemovalSubspace identity(std::size_t dim);
};

RemovalSubspace build_removal_subspace(const Eigen::Ref<const Matrix>& dictionary,
                                       const Eigen::Ref<const Vector>& attribution, double fraction,
                                       const RankPolicy& policy = EnergyThreshold{});

/// Same as above on an explicit set of atom indices.
RemovalSubspace build_subspace_from_atoms(const Eigen::Ref<const Matrix>& dictionary,
                                          const std::vector<std::size_t>& indices, const RankPolicy& policy);

/// Projects out the subspace and returns the unit residual. Throws
/// NumericError when the residual norm falls below 1e-9 * max(1, ||h||).
Vector remove_and_normalize(const Eigen::Ref<const Vector>& h, const RemovalSubspace& subspace);

/// Checkpoint directory: basis.bin (r rows of length d, the columns of V_r)
/// and manifest.json {fraction, rank_policy, r, source_indices,
/// singular_values}.
void save_subspace(const RemovalSubspace& s, double fraction, const RankPolicy& policy,
                   const std::filesystem::path& dir);
RemovalSubspace load_subspace(const std::filesystem::path& dir);

}  // namespace mmsae
