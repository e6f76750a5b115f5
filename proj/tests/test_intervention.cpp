// Copyright (c) 2026, mmsae contributors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mmsae/errors.hpp"
#include "mmsae/intervention.hpp"
#include "test_util.hpp"

using namespace mmsae;

namespace {

// Cyclic Jacobi on a symmetric matrix. Returns (eigenvalues, eigenvectors)
// sorted by descending eigenvalue.
std::pair<Vector, Matrix> jacobi_eigen(Matrix a) {
  const Eigen::Index n = a.rows();
  Matrix v = Matrix::Identity(n, n);
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (Eigen::Index p = 0; p < n; ++p)
      for (Eigen::Index q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    if (off < 1e-30) break;
    for (Eigen::Index p = 0; p < n; ++p) {
      for (Eigen::Index q = p + 1; q < n; ++q) {
        if (std::abs(a(p, q)) < 1e-300) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (Eigen::Index k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (Eigen::Index k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (Eigen::Index k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto x, auto y) { return a(x, x) > a(y, y); });
  Vector vals(n);
  Matrix vecs(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    vals(i) = a(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(i)]);
    vecs.col(i) = v.col(order[static_cast<std::size_t>(i)]);
  }
  return {vals, vecs};
}

}  // namespace

TEST_CASE("basis spans the top eigenvectors of the selected Gram") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed + 40);
    const Matrix dict = testutil::unit_rows(rng, 50, 8);
    Vector attr(50);
    for (Eigen::Index i = 0; i < 50; ++i) attr(i) = rng.uniform01();
    const std::size_t r = 1 + seed % 3;
    const RemovalSubspace s = build_removal_subspace(dict, attr, 0.1, FixedRank{r});

    REQUIRE(s.source_indices.size() == 5);
    Matrix selected(5, 8);
    for (int i = 0; i < 5; ++i) selected.row(i) = dict.row(static_cast<Eigen::Index>(s.source_indices[i]));
    const auto [vals, vecs] = jacobi_eigen(selected.transpose() * selected);

    REQUIRE(s.rank() == r);
    const Matrix p = s.basis * s.basis.transpose();
    const Matrix p_ref = vecs.leftCols(static_cast<Eigen::Index>(r)) * vecs.leftCols(static_cast<Eigen::Index>(r)).transpose();
    CHECK((p - p_ref).cwiseAbs().maxCoeff() < 1e-8);
    CHECK((s.basis.transpose() * s.basis - Matrix::Identity(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(r)))
              .cwiseAbs()
              .maxCoeff() < 1e-10);
    for (Eigen::Index i = 0; i < s.singular_values.size(); ++i)
      CHECK(s.singular_values(i) * s.singular_values(i) == doctest::Approx(vals(i)).epsilon(1e-8));
  }
}

TEST_CASE("source indices are the top attribution atoms") {
  Matrix dict = Matrix::Identity(10, 10);
  Vector attr = Vector::LinSpaced(10, 0.0, 9.0);
  const RemovalSubspace s = build_removal_subspace(dict, attr, 0.3, FixedRank{3});
  CHECK(s.source_indices == std::vector<std::size_t>{7, 8, 9});
}

TEST_CASE("energy threshold picks the smallest sufficient rank") {
  // Orthogonal atoms with squared norms 9, 4, 1 along the first three axes.
  Matrix dict = Matrix::Zero(3, 5);
  dict(0, 0) = 3.0;
  dict(1, 1) = 2.0;
  dict(2, 2) = 1.0;
  const std::vector<std::size_t> all = {0, 1, 2};
  CHECK(build_subspace_from_atoms(dict, all, EnergyThreshold{0.6}).rank() == 1);
  CHECK(build_subspace_from_atoms(dict, all, EnergyThreshold{9.0 / 14.0}).rank() == 1);
  CHECK(build_subspace_from_atoms(dict, all, EnergyThreshold{0.7}).rank() == 2);
  CHECK(build_subspace_from_atoms(dict, all, EnergyThreshold{0.99}).rank() == 3);
  CHECK(build_subspace_from_atoms(dict, all, EnergyThreshold{1.0}).rank() == 3);
  CHECK_THROWS_AS(build_subspace_from_atoms(dict, all, EnergyThreshold{0.0}), ConfigError);
  CHECK_THROWS_AS(build_subspace_from_atoms(dict, all, FixedRank{4}), ConfigError);
}

TEST_CASE("removal is orthogonal, unit and idempotent") {
  Rng rng(8);
  const Matrix dict = testutil::unit_rows(rng, 30, 10);
  const std::vector<std::size_t> idx = {1, 4, 9, 12};
  const RemovalSubspace s = build_subspace_from_atoms(dict, idx, FixedRank{3});
  for (int trial = 0; trial < 50; ++trial) {
    Vector h(10);
    for (Eigen::Index i = 0; i < 10; ++i) h(i) = rng.normal();
    const Vector out = remove_and_normalize(h, s);
    CHECK(out.norm() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK((s.basis.transpose() * out).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((remove_and_normalize(out, s) - out).cwiseAbs().maxCoeff() < 1e-10);
    // Positive scaling does not matter.
    CHECK((remove_and_normalize(7.5 * h, s) - out).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("identity subspace only normalizes") {
  Vector h(3);
  h << 3, 0, 4;
  const Vector out = remove_and_normalize(h, RemovalSubspace::identity(3));
  CHECK(out(0) == doctest::Approx(0.6));
  CHECK(out(2) == doctest::Approx(0.8));
}

TEST_CASE("degenerate removal is reported") {
  Matrix dict = Matrix::Zero(2, 3);
  dict(0, 0) = 1.0;
  dict(1, 1) = 1.0;
  const RemovalSubspace s = build_subspace_from_atoms(dict, {0, 1}, FixedRank{2});
  Vector inside(3);
  inside << 0.3, -2.0, 0.0;
  CHECK_THROWS_AS(remove_and_normalize(inside, s), NumericError);
  CHECK_THROWS_AS(remove_and_normalize(Vector::Zero(3), s), NumericError);
  CHECK_THROWS_AS(remove_and_normalize(Vector::Ones(4), s), ShapeError);
  Vector nan = Vector::Ones(3);
  nan(1) = std::nan("");
  CHECK_THROWS_AS(remove_and_normalize(nan, s), NumericError);
}

TEST_CASE("argument errors") {
  const Matrix dict = Matrix::Identity(4, 4);
  CHECK_THROWS_AS(build_removal_subspace(dict, Vector::Ones(3), 0.5), ShapeError);
  CHECK_THROWS_AS(build_removal_subspace(dict, Vector::Ones(4), 0.0), ConfigError);
  CHECK_THROWS_AS(build_subspace_from_atoms(dict, {}, FixedRank{1}), ConfigError);
  CHECK_THROWS_AS(build_subspace_from_atoms(dict, {9}, FixedRank{1}), IndexError);
  CHECK_THROWS_AS(build_subspace_from_atoms(Matrix::Zero(4, 4), {0}, FixedRank{1}), NumericError);
}

TEST_CASE("describe policies") {
  CHECK(describe(FixedRank{2}) == "fixed:2");
  CHECK(describe(EnergyThreshold{0.99}) == "energy:0.98999999999999999");
}

TEST_CASE("save and load round trip") {
  testutil::TempDir tmp("interv");
  Rng rng(2);
  const Matrix dict = testutil::unit_rows(rng, 20, 6);
  const RemovalSubspace s = build_subspace_from_atoms(dict, {2, 3, 5}, FixedRank{2});
  save_subspace(s, 0.15, FixedRank{2}, tmp.path());
  const RemovalSubspace back = load_subspace(tmp.path());
  CHECK(back.source_indices == s.source_indices);
  CHECK(back.rank() == 2);
  CHECK((back.basis - s.basis).cwiseAbs().maxCoeff() < 1e-6);  // stored as float32
  CHECK(back.singular_values == s.singular_values);

  CHECK_THROWS_AS(load_subspace(tmp / "missing"), IoError);
}
