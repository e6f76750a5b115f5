// Copyright (c) 2026, mmsae contributors
// SPDX-License-Identifier: Apache-2.0

#include "mmsae/intervention.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include <json.hpp>

#include "mmsae/activation_store.hpp"
#include "mmsae/concept_metrics.hpp"
#include "mmsae/errors.hpp"

namespace mmsae {

std::string describe(const RankPolicy& policy) {
  if (const auto* f = std::get_if<FixedRank>(&policy)) return "fixed:" + std::to_string(f->r);
  char buf[64];
  std::snprintf(buf, sizeof(buf), "energy:%.17g", std::get<EnergyThreshold>(policy).theta);
  return buf;
}

RemovalSubspace RemovalSubspace::identity(std::size_t dim) {
  RemovalSubspace s;
  s.basis = Matrix::Zero(static_cast<Eigen::Index>(dim), 0);
  s.singular_values = Vector::Zero(0);
  return s;
}

RemovalSubspace build_subspace_from_atoms(const Eigen::Ref<const Matrix>& dictionary,
                                          const std::vector<std::size_t>& indices, const RankPolicy& policy) {
  const std::string op = "build_removal_subspace";
  if (indices.empty()) throw ConfigError(op, "no atoms selected");
  const Eigen::Index d = dictionary.cols();
  const auto m = static_cast<Eigen::Index>(indices.size());

  Matrix selected(m, d);
  for (Eigen::Index i = 0; i < m; ++i) {
    const std::size_t idx = indices[static_cast<std::size_t>(i)];
    if (idx >= static_cast<std::size_t>(dictionary.rows())) throw IndexError(op, "atom index out of range");
    selected.row(i) = dictionary.row(static_cast<Eigen::Index>(idx));
  }
  if (!selected.allFinite()) throw NumericError(op, "selected atoms contain non-finite entries");

  Eigen::BDCSVD<Eigen::MatrixXd> svd(selected, Eigen::ComputeThinV);
  const Vector sv = svd.singularValues();
  const double total = sv.squaredNorm();
  if (!(total > 0.0)) throw NumericError(op, "selected atoms are all zero");

  const Eigen::Index max_rank = std::min(m, d);
  Eigen::Index r = 0;
  if (const auto* fixed = std::get_if<FixedRank>(&policy)) {
    if (fixed->r > static_cast<std::size_t>(max_rank)) {
      throw ConfigError(op, "rank " + std::to_string(fixed->r) + " exceeds min(m, d) = " + std::to_string(max_rank));
    }
    r = static_cast<Eigen::Index>(fixed->r);
  } else {
    const double theta = std::get<EnergyThreshold>(policy).theta;
    if (!(theta > 0.0 && theta <= 1.0)) throw ConfigError(op, "energy threshold must lie in (0, 1]");
    double running = 0.0;
    while (r < max_rank) {
      running += sv(r) * sv(r);
      ++r;
      if (running >= theta * total) break;
    }
  }

  RemovalSubspace out;
  out.basis = svd.matrixV().leftCols(r);
  out.source_indices = indices;
  out.singular_values = sv;
  return out;
}

RemovalSubspace build_removal_subspace(const Eigen::Ref<const Matrix>& dictionary,
                                       const Eigen::Ref<const Vector>& attribution, double fraction,
                                       const RankPolicy& policy) {
  const std::string op = "build_removal_subspace";
  if (attribution.size() != dictionary.rows()) {
    throw ShapeError(op, "attribution length " + std::to_string(attribution.size()) + " != dictionary width " +
                             std::to_string(dictionary.rows()));
  }
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError(op, "fraction must lie in (0, 1]");
  return build_subspace_from_atoms(dictionary, top_fraction(attribution, fraction), policy);
}

Vector remove_and_normalize(const Eigen::Ref<const Vector>& h, const RemovalSubspace& subspace) {
  const std::string op = "remove_and_normalize";
  if (static_cast<std::size_t>(h.size()) != subspace.dim()) {
    throw ShapeError(op, "embedding length " + std::to_string(h.size()) + " != subspace dim " +
                             std::to_string(subspace.dim()));
  }
  if (!h.allFinite()) throw NumericError(op, "embedding has non-finite entries");
  const double norm = h.norm();
  if (!(norm > 0.0)) throw NumericError(op, "embedding has zero norm");
  Vector residual = h;
  if (subspace.rank() > 0) residual -= subspace.basis * (subspace.basis.transpose() * h);
  const double rnorm = residual.norm();
  if (rnorm < 1e-9 * std::max(1.0, norm)) throw NumericError(op, "embedding lies inside the removal subspace");
  return residual / rnorm;
}

void save_subspace(const RemovalSubspace& s, double fraction, const RankPolicy& policy,
                   const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_matrix_file(s.basis.transpose().cast<float>(), dir / "basis.bin");
  nlohmann::json manifest = {
      {"fraction", fraction},
      {"rank_policy", describe(policy)},
      {"r", s.rank()},
      {"d", s.dim()},
      {"source_indices", s.source_indices},
      {"singular_values", std::vector<double>(s.singular_values.data(),
                                              s.singular_values.data() + s.singular_values.size())},
  };
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  out << manifest.dump(2) << '\n';
  if (!out) throw IoError("save_subspace", "cannot write manifest in " + dir.string());
}

RemovalSubspace load_subspace(const std::filesystem::path& dir) {
  const std::string op = "load_subspace";
  std::ifstream in(dir / "manifest.json");
  if (!in) throw IoError(op, "missing manifest.json in " + dir.string());
  RemovalSubspace s;
  try {
    const auto manifest = nlohmann::json::parse(in);
    const MatrixF rows = read_matrix_file(dir / "basis.bin");
    const auto r = manifest.at("r").get<std::size_t>();
    if (static_cast<std::size_t>(rows.rows()) != r) throw ConsistencyError(op, "manifest rank disagrees with basis");
    s.basis = rows.cast<double>().transpose();
    s.source_indices = manifest.at("source_indices").get<std::vector<std::size_t>>();
    const auto sv = manifest.at("singular_values").get<std::vector<double>>();
    s.singular_values = Eigen::Map<const Vector>(sv.data(), static_cast<Eigen::Index>(sv.size()));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(op, std::string("manifest: ") + e.what());
  }
  return s;
}

}  // namespace mmsae
