// Copyright (c) 2026, mmsae contributors
// SPDX-License-Identifier: Apache-2.0

#include "mmsae/concept_metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>

#include "mmsae/errors.hpp"

namespace mmsae {

namespace {

void check_code(const SparseCode& z, std::size_t width, const std::string& op) {
  if (z.dim != width) {
    throw ShapeError(op, "code dim " + std::to_string(z.dim) + " != dictionary width " + std::to_string(width));
  }
  for (const auto& e : z.entries) {
    if (e.index >= width) throw IndexError(op, "code index " + std::to_string(e.index) + " out of range");
  }
}

// Normalized pair weights; uniform when none are given.
std::vector<double> pair_weights(const PairedCodes& pairs, const std::string& op) {
  const std::size_t n = pairs.pairs.size();
  if (n == 0) throw ConfigError(op, "no pairs");
  if (pairs.weights.empty()) return std::vector<double>(n, 1.0 / static_cast<double>(n));
  if (pairs.weights.size() != n) throw ShapeError(op, "weight count differs from pair count");
  double total = 0.0;
  for (double w : pairs.weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError(op, "pair weights must be finite and nonnegative");
    total += w;
  }
  if (!(total > 0.0)) throw ConfigError(op, "pair weights sum to zero");
  std::vector<double> out(pairs.weights);
  for (double& w : out) w /= total;
  return out;
}

void check_pairs(const PairedCodes& pairs, const Eigen::Ref<const Matrix>& dictionary, const std::string& op) {
  const auto width = static_cast<std::size_t>(dictionary.rows());
  for (const auto& [img, txt] : pairs.pairs) {
    check_code(img, width, op);
    check_code(txt, width, op);
  }
}

Vector decode_with(const SparseCode& z, const Eigen::Ref<const Matrix>& dictionary) {
  Vector out = Vector::Zero(dictionary.cols());
  for (const auto& e : z.entries) out += e.value * dictionary.row(e.index).transpose();
  return out;
}

// Accumulates w * z_a,i * (M z_b)_i for active i of z_a, using
// (M z_b)_i = <D_i, decode(z_b)>.
void accumulate_cross(const SparseCode& a, const Vector& decoded_b, const Eigen::Ref<const Matrix>& dictionary,
                      double w, Vector& out) {
  for (const auto& e : a.entries) out(e.index) += w * e.value * dictionary.row(e.index).dot(decoded_b);
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

Vector energy(std::span<const CodeCollection> collections) {
  const std::string op = "energy";
  std::size_t total = 0;
  std::size_t dim = 0;
  for (const auto& col : collections) {
    if (dim == 0) dim = col.dim;
    if (col.dim != dim) throw ShapeError(op, "collections disagree on code dim");
    total += col.codes.size();
  }
  if (total == 0 || dim == 0) throw ConfigError(op, "no codes");
  Vector sum = Vector::Zero(static_cast<Eigen::Index>(dim));
  for (const auto& col : collections) {
    for (const auto& z : col.codes) {
      check_code(z, dim, op);
      for (const auto& e : z.entries) sum(e.index) += e.value;
    }
  }
  return sum / static_cast<double>(total);
}

std::vector<double> ModalityScores::active_scores() const {
  std::vector<double> out;
  for (std::size_t i = 0; i < active.size(); ++i) {
    if (active[i]) out.push_back(score(static_cast<Eigen::Index>(i)));
  }
  return out;
}

ModalityScores modality_score(const CodeCollection& image, const CodeCollection& text, double activity_epsilon) {
  const std::string op = "modality_score";
  if (image.modality != Modality::kImage) throw ConfigError(op, "first collection is not labelled image");
  if (text.modality != Modality::kText) throw ConfigError(op, "second collection is not labelled text");
  if (image.codes.empty() || text.codes.empty()) throw ConfigError(op, "empty collection");
  if (image.dim != text.dim) throw ShapeError(op, "collections disagree on code dim");

  const CodeCollection img_only[] = {image};
  const CodeCollection txt_only[] = {text};
  const Vector e_img = energy(img_only);
  const Vector e_txt = energy(txt_only);

  ModalityScores out;
  out.score = Vector::Constant(e_img.size(), std::numeric_limits<double>::quiet_NaN());
  out.active.assign(static_cast<std::size_t>(e_img.size()), false);
  for (Eigen::Index i = 0; i < e_img.size(); ++i) {
    const double denom = e_img(i) + e_txt(i);
    if (denom < activity_epsilon) continue;
    out.score(i) = e_txt(i) / denom;
    out.active[static_cast<std::size_t>(i)] = true;
  }
  return out;
}

Matrix atom_gram(const Eigen::Ref<const Matrix>& dictionary) { return dictionary * dictionary.transpose(); }

BridgeResult bridge_matrix(const PairedCodes& pairs, const Eigen::Ref<const Matrix>& dictionary) {
  const std::string op = "bridge_matrix";
  check_pairs(pairs, dictionary, op);
  const std::vector<double> w = pair_weights(pairs, op);
  const Eigen::Index c = dictionary.rows();

  Matrix co = Matrix::Zero(c, c);
  for (std::size_t p = 0; p < pairs.pairs.size(); ++p) {
    const auto& [img, txt] = pairs.pairs[p];
    for (const auto& a : img.entries) {
      for (const auto& b : txt.entries) co(a.index, b.index) += w[p] * a.value * b.value;
    }
  }
  BridgeResult out;
  out.matrix = co.cwiseProduct(atom_gram(dictionary));
  out.per_concept = 0.5 * (out.matrix.rowwise().sum() + out.matrix.colwise().sum().transpose());
  return out;
}

Vector bridge_scores(const PairedCodes& pairs, const Eigen::Ref<const Matrix>& dictionary,
                     BridgeReduction reduction) {
  const std::string op = "bridge_scores";
  check_pairs(pairs, dictionary, op);
  const std::vector<double> w = pair_weights(pairs, op);
  Vector out = Vector::Zero(dictionary.rows());
  for (std::size_t p = 0; p < pairs.pairs.size(); ++p) {
    const auto& [img, txt] = pairs.pairs[p];
    if (reduction == BridgeReduction::kDiagonal) {
      // Both entry lists are sorted by index: merge.
      auto ia = img.entries.begin();
      auto ib = txt.entries.begin();
      while (ia != img.entries.end() && ib != txt.entries.end()) {
        if (ia->index < ib->index) {
          ++ia;
        } else if (ib->index < ia->index) {
          ++ib;
        } else {
          out(ia->index) += w[p] * ia->value * ib->value * dictionary.row(ia->index).squaredNorm();
          ++ia;
          ++ib;
        }
      }
    } else {
      accumulate_cross(img, decode_with(txt, dictionary), dictionary, 0.5 * w[p], out);
      accumulate_cross(txt, decode_with(img, dictionary), dictionary, 0.5 * w[p], out);
    }
  }
  return out;
}

Vector retrieval_attribution(const PairedCodes& pairs, const Eigen::Ref<const Matrix>& dictionary) {
  const std::string op = "retrieval_attribution";
  check_pairs(pairs, dictionary, op);
  const std::vector<double> w = pair_weights(pairs, op);
  Vector out = Vector::Zero(dictionary.rows());
  for (std::size_t p = 0; p < pairs.pairs.size(); ++p) {
    const auto& [img, txt] = pairs.pairs[p];
    accumulate_cross(img, decode_with(txt, dictionary), dictionary, w[p], out);
    accumulate_cross(txt, decode_with(img, dictionary), dictionary, w[p], out);
  }
  return out;
}

std::size_t top_count(std::size_t width, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw ConfigError("top_fraction", "fraction must lie in (0, 1], got " + format_double(fraction));
  }
  const double x = fraction * static_cast<double>(width);
  // Absorb representation error so that e.g. (1/3) * 3 selects one index.
  const auto m = static_cast<std::size_t>(std::ceil(x - 1e-9 * std::max(1.0, x)));
  return std::clamp<std::size_t>(m, width == 0 ? 0 : 1, width);
}

std::vector<std::size_t> top_fraction(const Eigen::Ref<const Vector>& scores, double fraction) {
  const auto c = static_cast<std::size_t>(scores.size());
  const std::size_t m = top_count(c, fraction);
  std::vector<std::size_t> idx(c);
  std::iota(idx.begin(), idx.end(), 0);
  auto score = [&](std::size_t i) {
    const double s = scores(static_cast<Eigen::Index>(i));
    return std::isnan(s) ? -std::numeric_limits<double>::infinity() : s;
  };
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(m), idx.end(),
                    [&](std::size_t a, std::size_t b) {
                      const double sa = score(a);
                      const double sb = score(b);
                      return sa > sb || (sa == sb && a < b);
                    });
  idx.resize(m);
  std::sort(idx.begin(), idx.end());
  return idx;
}

double jaccard(const std::set<std::size_t>& a, const std::set<std::size_t>& b) {
  if (a.empty() && b.empty()) return 1.0;
  std::size_t inter = 0;
  for (std::size_t x : a) inter += b.count(x);
  const std::size_t uni = a.size() + b.size() - inter;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

double jaccard(std::span<const std::size_t> a, std::span<const std::size_t> b) {
  return jaccard(std::set<std::size_t>(a.begin(), a.end()), std::set<std::size_t>(b.begin(), b.end()));
}

double triple_overlap(std::span<const std::size_t> a, std::span<const std::size_t> b,
                      std::span<const std::size_t> c) {
  const std::set<std::size_t> sa(a.begin(), a.end()), sb(b.begin(), b.end()), sc(c.begin(), c.end());
  std::set<std::size_t> uni = sa;
  uni.insert(sb.begin(), sb.end());
  uni.insert(sc.begin(), sc.end());
  if (uni.empty()) return 1.0;
  std::size_t inter = 0;
  for (std::size_t x : sa) inter += (sb.count(x) && sc.count(x)) ? 1 : 0;
  return static_cast<double>(inter) / static_cast<double>(uni.size());
}

std::vector<CurvePoint> cumulative_energy_curve(const Eigen::Ref<const Vector>& energy) {
  const std::string op = "cumulative_energy_curve";
  std::vector<double> sorted(energy.data(), energy.data() + energy.size());
  for (double e : sorted) {
    if (!(e >= 0.0) || !std::isfinite(e)) throw NumericError(op, "energy must be finite and nonnegative");
  }
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  const double total = std::accumulate(sorted.begin(), sorted.end(), 0.0);
  if (!(total > 0.0)) throw NumericError(op, "total energy is zero");
  std::vector<CurvePoint> out;
  out.reserve(sorted.size());
  double running = 0.0;
  for (std::size_t r = 0; r < sorted.size(); ++r) {
    running += sorted[r];
    out.push_back({r + 1, running / total});
  }
  return out;
}

double silverman_bandwidth(std::span<const double> samples) {
  const std::string op = "silverman_bandwidth";
  const std::size_t n = samples.size();
  if (n == 0) throw ConfigError(op, "no samples");
  std::vector<double> x(samples.begin(), samples.end());
  std::sort(x.begin(), x.end());
  const double mean = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(n);
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  const double sd = n > 1 ? std::sqrt(var / static_cast<double>(n - 1)) : 0.0;
  // Type-7 quantiles.
  auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(n - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, n - 1);
    return x[lo] + (pos - static_cast<double>(lo)) * (x[hi] - x[lo]);
  };
  const double iqr = quantile(0.75) - quantile(0.25);
  double lo = std::min(sd, iqr / 1.34);
  if (!(lo > 0.0)) lo = sd;
  if (!(lo > 0.0)) lo = std::abs(x[0]);
  if (!(lo > 0.0)) lo = 1.0;
  return 0.9 * lo * std::pow(static_cast<double>(n), -0.2);
}

std::vector<DensityPoint> modality_density_export(std::span<const double> scores, double bandwidth,
                                                  std::size_t grid) {
  const std::string op = "modality_density_export";
  if (scores.empty()) throw ConfigError(op, "no active scores");
  if (!(bandwidth > 0.0) || !std::isfinite(bandwidth)) throw ConfigError(op, "bandwidth must be positive");
  if (grid < 2) throw ConfigError(op, "grid needs at least two points");
  const double lo = -3.0 * bandwidth;
  const double hi = 1.0 + 3.0 * bandwidth;
  const double step = (hi - lo) / static_cast<double>(grid - 1);
  const double norm = 1.0 / (static_cast<double>(scores.size()) * bandwidth * std::sqrt(2.0 * M_PI));
  std::vector<DensityPoint> out(grid);
  for (std::size_t g = 0; g < grid; ++g) {
    const double x = lo + step * static_cast<double>(g);
    double acc = 0.0;
    for (double s : scores) {
      const double u = (x - s) / bandwidth;
      acc += std::exp(-0.5 * u * u);
    }
    out[g] = {x, acc * norm};
  }
  return out;
}

void write_stats_csv(const ConceptStats& stats, std::ostream& out) {
  const Eigen::Index c = stats.energy.size();
  if (stats.modality.score.size() != c || stats.bridge.size() != c || stats.attribution.size() != c ||
      stats.modality.active.size() != static_cast<std::size_t>(c)) {
    throw ShapeError("write_stats", "stat vectors disagree on concept count");
  }
  out << "concept,energy,modality_score,active,bridge,attribution\n";
  for (Eigen::Index i = 0; i < c; ++i) {
    const bool active = stats.modality.active[static_cast<std::size_t>(i)];
    out << i << ',' << format_double(stats.energy(i)) << ','
        << (active ? format_double(stats.modality.score(i)) : std::string()) << ',' << (active ? 1 : 0) << ','
        << format_double(stats.bridge(i)) << ',' << format_double(stats.attribution(i)) << '\n';
  }
}

ConceptStats read_stats_csv(std::istream& in) {
  const std::string op = "read_stats";
  std::string line;
  if (!std::getline(in, line) || line != "concept,energy,modality_score,active,bridge,attribution") {
    throw FormatError(op, "unexpected stats header");
  }
  struct Row {
    double energy, modality, bridge, attribution;
    bool active;
  };
  std::vector<Row> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) f.push_back(field);
    if (line.back() == ',') f.emplace_back();
    if (f.size() != 6) throw FormatError(op, "expected 6 fields in '" + line + "'");
    try {
      if (std::stoull(f[0]) != rows.size()) throw FormatError(op, "concept rows out of order");
      Row r{};
      r.energy = std::stod(f[1]);
      r.active = f[3] == "1";
      r.modality = r.active ? std::stod(f[2]) : std::numeric_limits<double>::quiet_NaN();
      r.bridge = std::stod(f[4]);
      r.attribution = std::stod(f[5]);
      rows.push_back(r);
    } catch (const std::logic_error&) {
      throw FormatError(op, "malformed number in '" + line + "'");
    }
  }
  const auto c = static_cast<Eigen::Index>(rows.size());
  ConceptStats s;
  s.energy.resize(c);
  s.modality.score.resize(c);
  s.modality.active.resize(rows.size());
  s.bridge.resize(c);
  s.attribution.resize(c);
  for (Eigen::Index i = 0; i < c; ++i) {
    const Row& r = rows[static_cast<std::size_t>(i)];
    s.energy(i) = r.energy;
    s.modality.score(i) = r.modality;
    s.modality.active[static_cast<std::size_t>(i)] = r.active;
    s.bridge(i) = r.bridge;
    s.attribution(i) = r.attribution;
  }
  return s;
}

}  // namespace mmsae
