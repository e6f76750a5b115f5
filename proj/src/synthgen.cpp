// Copyright (c) 2026, mmsae contributors
// SPDX-License-Identifier: Apache-2.0

#include "mmsae/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <Eigen/Eigenvalues>

#include "mmsae/errors.hpp"
#include "mmsae/rng.hpp"

namespace mmsae {

namespace {

// Partial Fisher-Yates over the pool; returns `count` distinct members.
std::vector<std::size_t> choose(Rng& rng, std::vector<std::size_t>& pool, std::size_t count) {
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.uniform_index(pool.size() - i));
    std::swap(pool[i], pool[j]);
  }
  return {pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(count)};
}

double magnitude(Rng& rng) { return std::abs(rng.normal()) + 0.5; }

SparseCode to_code(std::size_t dim, std::vector<std::size_t> idx, const std::vector<double>& mags) {
  std::vector<std::size_t> order(idx.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return idx[a] < idx[b]; });
  SparseCode z;
  z.dim = dim;
  for (std::size_t o : order)
    if (mags[o] > 0.0) z.entries.push_back({static_cast<std::uint32_t>(idx[o]), mags[o]});
  return z;
}

std::vector<std::size_t> range(std::size_t begin, std::size_t end) {
  std::vector<std::size_t> v(end - begin);
  std::iota(v.begin(), v.end(), begin);
  return v;
}

std::string padded(const char* prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s-%05zu", prefix, i);
  return buf;
}

}  // namespace

void SynthSpec::validate() const {
  const std::string op = "synth_spec";
  if (c_true == 0 || d == 0) throw ConfigError(op, "c_true and d must be positive");
  if (k_true == 0 || k_true > c_true) throw ConfigError(op, "k_true must lie in [1, c_true]");
  if (n_samples == 0) throw ConfigError(op, "n_samples must be positive");
  if (!(noise_sigma >= 0.0) || !(text_bias_beta >= 0.0) || !(nuisance_strength >= 0.0) ||
      !std::isfinite(noise_sigma + text_bias_beta + nuisance_strength)) {
    throw ConfigError(op, "scales must be finite and nonnegative");
  }
  if (!(shared_fraction >= 0.0 && shared_fraction <= 1.0)) throw ConfigError(op, "shared_fraction must lie in [0, 1]");

  const auto n_shared = static_cast<std::size_t>(std::llround(shared_fraction * static_cast<double>(c_true)));
  const auto k_shared = static_cast<std::size_t>(std::llround(shared_fraction * static_cast<double>(k_true)));
  const std::size_t rest = c_true - n_shared;
  const std::size_t k_own = k_true - k_shared;
  if (k_shared > n_shared || k_own > rest / 2) {
    throw ConfigError(op, "concept pools too small for k_true at this shared_fraction");
  }
}

nlohmann::json SynthSpec::to_json() const {
  return {{"c_true", c_true},
          {"d", d},
          {"k_true", k_true},
          {"noise_sigma", noise_sigma},
          {"n_samples", n_samples},
          {"shared_fraction", shared_fraction},
          {"text_bias_beta", text_bias_beta},
          {"nuisance_strength", nuisance_strength},
          {"seed", seed}};
}

SynthSpec SynthSpec::from_json(const nlohmann::json& j) {
  const std::string op = "synth_spec";
  SynthSpec s;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "c_true") s.c_true = value.get<std::size_t>();
      else if (key == "d") s.d = value.get<std::size_t>();
      else if (key == "k_true") s.k_true = value.get<std::size_t>();
      else if (key == "noise_sigma") s.noise_sigma = value.get<double>();
      else if (key == "n_samples") s.n_samples = value.get<std::size_t>();
      else if (key == "shared_fraction") s.shared_fraction = value.get<double>();
      else if (key == "text_bias_beta") s.text_bias_beta = value.get<double>();
      else if (key == "nuisance_strength") s.nuisance_strength = value.get<double>();
      else if (key == "seed") s.seed = value.get<std::uint64_t>();
      else throw ConfigError(op, "unknown key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(op, e.what());
  }
  s.validate();
  return s;
}

Matrix gen_planted_dictionary(std::size_t c_true, std::size_t d, std::uint64_t seed) {
  if (c_true == 0 || d == 0) throw ConfigError("gen_planted_dictionary", "c_true and d must be positive");
  Rng rng(seed);
  Matrix dict(static_cast<Eigen::Index>(c_true), static_cast<Eigen::Index>(d));
  for (Eigen::Index i = 0; i < dict.rows(); ++i) {
    for (Eigen::Index j = 0; j < dict.cols(); ++j) dict(i, j) = rng.normal();
    dict.row(i).normalize();
  }
  return dict;
}

SyntheticActivations gen_activations(const Eigen::Ref<const Matrix>& dictionary, std::size_t n, std::size_t k_true,
                                     double noise_sigma, std::uint64_t seed) {
  const std::string op = "gen_activations";
  const auto c = static_cast<std::size_t>(dictionary.rows());
  if (k_true == 0 || k_true > c) throw ConfigError(op, "k_true must lie in [1, rows(dictionary)]");
  if (n == 0) throw ConfigError(op, "n must be positive");
  if (!(noise_sigma >= 0.0)) throw ConfigError(op, "noise_sigma must be nonnegative");

  Rng rng(seed);
  SyntheticActivations out;
  out.shard.vectors.resize(static_cast<Eigen::Index>(n), dictionary.cols());
  out.shard.meta.reserve(n);
  out.codes.reserve(n);
  std::vector<std::size_t> pool = range(0, c);
  std::vector<double> mags(k_true);
  for (std::size_t t = 0; t < n; ++t) {
    const auto idx = choose(rng, pool, k_true);
    Vector h = Vector::Zero(dictionary.cols());
    for (std::size_t i = 0; i < k_true; ++i) {
      mags[i] = magnitude(rng);
      h += mags[i] * dictionary.row(static_cast<Eigen::Index>(idx[i])).transpose();
    }
    for (Eigen::Index j = 0; j < h.size(); ++j) h(j) += noise_sigma * rng.normal();
    out.shard.vectors.row(static_cast<Eigen::Index>(t)) = h.cast<float>().transpose();
    out.shard.meta.push_back({t, Modality::kImage, TokenRole::kImage, 0});
    out.codes.push_back(to_code(c, idx, mags));
  }
  return out;
}

Vector gen_nuisance_direction(const Eigen::Ref<const Matrix>& dictionary, std::uint64_t seed) {
  const Eigen::Index d = dictionary.cols();
  Vector u;
  if (d > dictionary.rows()) {
    Rng rng(seed);
    Vector g(d);
    for (Eigen::Index j = 0; j < d; ++j) g(j) = rng.normal();
    // Orthonormal basis of the row space from a thin QR of D^T.
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(dictionary.transpose());
    const Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(d, dictionary.rows());
    u = g - q * (q.transpose() * g);
  } else {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(dictionary.transpose() * dictionary);
    u = eig.eigenvectors().col(0);
  }
  u.normalize();
  Eigen::Index pivot = 0;
  u.cwiseAbs().maxCoeff(&pivot);
  if (u(pivot) < 0.0) u = -u;
  return u;
}

PairedCorpus gen_paired_corpus(const SynthSpec& spec) {
  spec.validate();
  PairedCorpus out;
  out.dictionary = gen_planted_dictionary(spec.c_true, spec.d, derive_seed(spec.seed, "synth/dictionary"));
  out.nuisance = gen_nuisance_direction(out.dictionary, derive_seed(spec.seed, "synth/nuisance"));

  const std::size_t c = spec.c_true;
  const auto n_shared = static_cast<std::size_t>(std::llround(spec.shared_fraction * static_cast<double>(c)));
  const auto k_shared = static_cast<std::size_t>(std::llround(spec.shared_fraction * static_cast<double>(spec.k_true)));
  const std::size_t k_own = spec.k_true - k_shared;
  out.shared_end = n_shared;
  out.image_end = n_shared + (c - n_shared) / 2;
  std::vector<std::size_t> shared_pool = range(0, out.shared_end);
  std::vector<std::size_t> image_pool = range(out.shared_end, out.image_end);
  std::vector<std::size_t> text_pool = range(out.image_end, c);

  const std::size_t n = spec.n_samples;
  const auto d = static_cast<Eigen::Index>(spec.d);
  out.image.vectors.resize(static_cast<Eigen::Index>(n), d);
  out.text.vectors.resize(static_cast<Eigen::Index>(n), d);
  out.task.task_label = "q_i->c_t";

  Rng rng(derive_seed(spec.seed, "synth/pairs"));
  const Vector offset = spec.nuisance_strength * out.nuisance;
  auto atom = [&](std::size_t i) { return out.dictionary.row(static_cast<Eigen::Index>(i)).transpose(); };

  for (std::size_t j = 0; j < n; ++j) {
    const auto sh = choose(rng, shared_pool, k_shared);
    std::vector<double> sh_mag(k_shared);
    for (auto& m : sh_mag) m = magnitude(rng);
    const auto im = choose(rng, image_pool, k_own);
    std::vector<double> im_mag(k_own);
    for (auto& m : im_mag) m = magnitude(rng);
    const auto tx = choose(rng, text_pool, k_own);
    std::vector<double> tx_mag(k_own);
    for (auto& m : tx_mag) m = magnitude(rng);

    Vector hi = offset, ht = offset;
    std::vector<std::size_t> i_idx = sh, t_idx = sh;
    std::vector<double> i_val = sh_mag, t_val;
    for (std::size_t a = 0; a < k_shared; ++a) {
      hi += sh_mag[a] * atom(sh[a]);
      ht += spec.text_bias_beta * sh_mag[a] * atom(sh[a]);
      t_val.push_back(spec.text_bias_beta * sh_mag[a]);
    }
    for (std::size_t a = 0; a < k_own; ++a) {
      hi += im_mag[a] * atom(im[a]);
      ht += spec.text_bias_beta * tx_mag[a] * atom(tx[a]);
      i_idx.push_back(im[a]);
      i_val.push_back(im_mag[a]);
      t_idx.push_back(tx[a]);
      t_val.push_back(spec.text_bias_beta * tx_mag[a]);
    }
    for (Eigen::Index q = 0; q < d; ++q) hi(q) += spec.noise_sigma * rng.normal();
    for (Eigen::Index q = 0; q < d; ++q) ht(q) += spec.noise_sigma * rng.normal();

    out.image.vectors.row(static_cast<Eigen::Index>(j)) = hi.cast<float>().transpose();
    out.text.vectors.row(static_cast<Eigen::Index>(j)) = ht.cast<float>().transpose();
    out.image.meta.push_back({j, Modality::kImage, TokenRole::kImage, 0});
    out.text.meta.push_back({n + j, Modality::kText, TokenRole::kContent, 0});
    out.image_codes.push_back(to_code(c, i_idx, i_val));
    out.text_codes.push_back(to_code(c, t_idx, t_val));

    const std::string qid = padded("img", j), cid = padded("txt", j);
    out.task.queries.push_back({qid, j});
    out.task.candidates.push_back({cid, n + j});
    out.task.qrels[qid] = {cid};
  }
  return out;
}

}  // namespace mmsae
