// Copyright (c) 2026, mmsae contributors
// SPDX-License-Identifier: Apache-2.0

#include "mmsae/cli.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "mmsae/activation_store.hpp"
#include "mmsae/concept_metrics.hpp"
#include "mmsae/errors.hpp"
#include "mmsae/intervention.hpp"
#include "mmsae/retrieval.hpp"
#include "mmsae/sae.hpp"
#include "mmsae/synthgen.hpp"

namespace mmsae {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Profile {
  std::size_t width;
};

const std::map<std::string, Profile> kProfiles = {{"mllm", {32768}}, {"vlm", {7168}}};

constexpr std::size_t kDefaultK = 32;
constexpr std::size_t kDefaultBuffer = 65536;

// Timestamps go here and nowhere else, so every other artifact stays
// reproducible.
class RunLog {
 public:
  explicit RunLog(const fs::path& dir) : out_(dir / "run.log", std::ios::app) {}

  void line(const std::string& msg) {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char stamp[32];
    std::strftime(stamp, sizeof(stamp), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    out_ << stamp << ' ' << msg << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw IoError("cli", "cannot write " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::vector<ActivationShard> read_all(const std::vector<std::string>& paths) {
  std::vector<ActivationShard> shards;
  shards.reserve(paths.size());
  for (const auto& p : paths) shards.push_back(read_shard_file(p));
  return shards;
}

fs::path prepare_out(const std::string& out) {
  fs::path dir(out);
  fs::create_directories(dir);
  return dir;
}

// ---------------------------------------------------------------------------
// Option sets
// ---------------------------------------------------------------------------

struct Common {
  std::string out;
  std::uint64_t seed = kDefaultCliSeed;
  std::size_t threads = 1;
  std::string config;
};

struct SynthOpts {
  std::string kind = "paired";
  SynthSpec spec;
};

struct TrainOpts {
  std::vector<std::string> shards;
  std::string profile = "mllm";
  std::size_t width = 0;
  std::size_t k = kDefaultK;
  TrainConfig config;
  std::size_t buffer = kDefaultBuffer;
  std::size_t passes = 0;
  bool standardize = false;
  bool dry_run = false;
};

struct AnalyzeOpts {
  std::string checkpoint;
  std::vector<std::string> shards;
  std::string task;
  std::string pooling = "mean";
  std::string mask;
  double fraction = 0.01;
  std::string bridge_reduction = "marginal";
  double epsilon = kDefaultActivityEpsilon;
  double bandwidth = 0.0;
  std::size_t grid = 512;
};

struct InterveneOpts {
  std::string checkpoint;
  std::string stats;
  double fraction = kDefaultRemovalFraction;
  std::size_t rank = 0;
  double theta = 0.99;
};

struct EvalOpts {
  std::vector<std::string> shards;
  std::string task;
  std::string subspace;
  std::string apply = "both";
  std::string pooling = "mean";
  std::string mask;
  std::vector<std::size_t> ks = {1, 5, 10};
};

struct ReportOpts {
  std::string in;
  std::string format = "json";
  std::string out;
};

struct ValidateOpts {
  std::vector<std::string> shards;
};

void add_common(CLI::App* sub, Common& c, bool with_out) {
  if (with_out) sub->add_option("--out", c.out, "Run directory for all outputs")->required();
  sub->add_option("--seed", c.seed, "Base seed; every random stream derives from it")->capture_default_str();
  sub->add_option("--threads", c.threads, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);
  sub->add_option("--config", c.config, "JSON file of option values keyed by long option name");
}

std::string env_name(const std::string& long_name) {
  std::string out = "MMSAE_";
  for (char ch : long_name) out += ch == '-' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
  return out;
}

void attach_env(CLI::App* sub) {
  for (CLI::Option* opt : sub->get_options()) {
    const auto& names = opt->get_lnames();
    if (names.empty() || names.front() == "help" || names.front() == "config") continue;
    opt->envname(env_name(names.front()));
  }
}

bool mentions(const std::vector<std::string>& args, const std::string& long_name) {
  const std::string flag = "--" + long_name;
  return std::any_of(args.begin(), args.end(),
                     [&](const std::string& a) { return a == flag || a.rfind(flag + "=", 0) == 0; });
}

std::string scalar_text(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  return v.dump();
}

// Splices values from a --config JSON file in front of the command-line
// arguments. Keys must name long options of the chosen subcommand.
std::vector<std::string> expand_config(CLI::App& app, const std::vector<std::string>& args) {
  if (args.empty() || args.front().rfind("-", 0) == 0) return args;
  std::optional<std::string> path;
  for (std::size_t i = 1; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
  }
  if (!path) return args;
  CLI::App* sub = app.get_subcommand_no_throw(args.front());
  if (!sub) return args;

  std::ifstream in(*path);
  if (!in) throw ConfigError("cli", "cannot open config file " + *path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("cli", "config file: " + std::string(e.what()));
  }
  if (!j.is_object()) throw ConfigError("cli", "config file must hold a JSON object");

  std::vector<std::string> spliced = {args.front()};
  for (const auto& [key, value] : j.items()) {
    const CLI::Option* opt = key == "config" ? nullptr : sub->get_option_no_throw("--" + key);
    if (!opt) throw ConfigError("cli", "unknown config key '" + key + "' for " + args.front());
    if (mentions(args, key)) continue;
    if (opt->get_expected_min() == 0) {
      if (!value.is_boolean()) throw ConfigError("cli", "config key '" + key + "' expects a boolean");
      if (value.get<bool>()) spliced.push_back("--" + key);
      continue;
    }
    spliced.push_back("--" + key);
    if (value.is_array()) {
      for (const auto& v : value) spliced.push_back(scalar_text(v));
    } else {
      spliced.push_back(scalar_text(value));
    }
  }
  spliced.insert(spliced.end(), args.begin() + 1, args.end());
  return spliced;
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

int cmd_synth(const Common& c, SynthOpts o, std::ostream& out) {
  o.spec.seed = c.seed;
  o.spec.validate();
  const fs::path dir = prepare_out(c.out);
  RunLog log(dir);
  log.line("synth start kind=" + o.kind);

  json echo = {{"subcommand", "synth"}, {"kind", o.kind}, {"seed", c.seed}, {"spec", o.spec.to_json()}};
  if (o.kind == "paired") {
    const PairedCorpus corpus = gen_paired_corpus(o.spec);
    write_shard_file(corpus.image, dir / "image.saeact");
    write_shard_file(corpus.text, dir / "text.saeact");
    write_task_spec(corpus.task, dir / "task.json");
    write_matrix_file(corpus.dictionary.cast<float>(), dir / "dictionary.bin");
    write_matrix_file(corpus.nuisance.transpose().cast<float>(), dir / "nuisance.bin");
    echo["outputs"] = {"image.saeact", "text.saeact", "task.json", "dictionary.bin", "nuisance.bin"};
  } else {
    const Matrix dict = gen_planted_dictionary(o.spec.c_true, o.spec.d, derive_seed(c.seed, "synth/dictionary"));
    const SyntheticActivations act = gen_activations(dict, o.spec.n_samples, o.spec.k_true, o.spec.noise_sigma,
                                                     derive_seed(c.seed, "synth/activations"));
    write_shard_file(act.shard, dir / "activations.saeact");
    write_matrix_file(dict.cast<float>(), dir / "dictionary.bin");
    echo["outputs"] = {"activations.saeact", "dictionary.bin"};
  }
  write_json(dir / "config.json", echo);
  log.line("synth done");
  out << "synth: wrote " << dir.string() << '\n';
  return kExitOk;
}

// Global scale 1/sqrt(mean ||h||^2) over every token of the training shards.
double input_scale_for(const std::vector<std::string>& paths) {
  long double sum = 0.0L;
  std::size_t rows = 0;
  for (const auto& p : paths) {
    const ActivationShard shard = read_shard_file(p);
    for (Eigen::Index r = 0; r < shard.vectors.rows(); ++r) {
      sum += static_cast<long double>(shard.vectors.row(r).cast<double>().squaredNorm());
    }
    rows += shard.count();
  }
  const double mean = static_cast<double>(sum / static_cast<long double>(rows));
  if (!(mean > 0.0)) throw NumericError("train", "cannot standardize all-zero activations");
  return 1.0 / std::sqrt(mean);
}

int cmd_train(const Common& c, TrainOpts o, std::ostream& out) {
  const std::size_t width = o.width ? o.width : kProfiles.at(o.profile).width;
  o.config.seed = c.seed;
  o.config.threads = c.threads;
  o.config.validate();
  if (o.k == 0 || o.k > width) throw ConfigError("train", "k must lie in [1, width]");
  if (o.buffer < o.config.batch_size) throw ConfigError("train", "buffer must hold at least one batch");

  const std::uint64_t init_seed = derive_seed(c.seed, "train/init");
  const std::uint64_t shuffle_seed = derive_seed(c.seed, "train/shuffle");
  json echo = {{"subcommand", "train"},
               {"shards", o.shards},
               {"profile", o.profile},
               {"width", width},
               {"k", o.k},
               {"lr", o.config.learning_rate},
               {"beta1", o.config.beta1},
               {"beta2", o.config.beta2},
               {"eps", o.config.epsilon},
               {"batch", o.config.batch_size},
               {"alpha", o.config.alpha},
               {"steps", o.config.steps},
               {"buffer", o.buffer},
               {"passes", o.passes},
               {"standardize", o.standardize},
               {"seed", c.seed},
               {"init_seed", init_seed},
               {"shuffle_seed", shuffle_seed}};

  const fs::path dir = prepare_out(c.out);
  if (o.dry_run) {
    write_json(dir / "config.json", echo);
    out << echo.dump(2) << '\n';
    return kExitOk;
  }

  RunLog log(dir);
  log.line("train start");
  std::size_t d = 0;
  {
    std::ifstream in(o.shards.front(), std::ios::binary);
    if (!in) throw IoError("train", "cannot open " + o.shards.front());
    d = read_header(in, "train").dim;
  }
  SaeParams init = init_params(width, d, o.k, init_seed);
  if (o.standardize) init.input_scale = input_scale_for(o.shards);
  echo["input_scale"] = init.input_scale;
  write_json(dir / "config.json", echo);

  std::vector<fs::path> paths(o.shards.begin(), o.shards.end());
  ShuffledBatches stream(make_file_source(paths, o.passes), o.buffer, o.config.batch_size, shuffle_seed);
  BatchSource batches = [&]() -> std::optional<Matrix> {
    auto b = stream.next();
    if (!b) return std::nullopt;
    return Matrix(b->vectors.cast<double>());
  };
  const std::size_t every = std::max<std::size_t>(1, o.config.steps / 20);
  TrainResult result = train(batches, o.config, std::move(init), [&](const LossRecord& r) {
    if (r.step % every == 0 || r.step == 1) log.line("step " + std::to_string(r.step) + " loss " + fmt(r.loss.total));
  });

  save_checkpoint(result.params, {o.config.alpha, o.config.steps, c.seed}, dir / "checkpoint");
  write_loss_history_csv(result.history, dir / "loss.csv");
  log.line("train done");
  out << "train: " << o.config.steps << " steps, final loss " << fmt(result.history.back().loss.total) << '\n';
  return kExitOk;
}

BridgeReduction parse_reduction(const std::string& s) {
  return s == "diagonal" ? BridgeReduction::kDiagonal : BridgeReduction::kSymmetrizedMarginal;
}

int cmd_analyze(const Common& c, const AnalyzeOpts& o, std::ostream& out) {
  const SaeParams params = load_checkpoint(o.checkpoint);
  const auto shards = read_all(o.shards);
  const auto samples = collect_samples(shards);
  const PoolStrategy strategy = parse_pool_strategy(o.pooling);
  const RoleMask mask = parse_role_mask(o.mask);
  const std::size_t width = params.width();

  const fs::path dir = prepare_out(c.out);
  RunLog log(dir);
  log.line("analyze start");

  CodeCollection image{{}, Modality::kImage, width};
  CodeCollection text{{}, Modality::kText, width};
  std::map<std::uint64_t, std::pair<Modality, SparseCode>> by_sample;
  std::size_t excluded = 0;
  for (const auto& [sid, sample] : samples) {
    PooledEmbedding pooled;
    try {
      pooled = pool_sample(sample, strategy, mask);
    } catch (const EmptySampleError&) {
      ++excluded;
      continue;
    }
    const Modality m = sample.meta.front().modality;
    SparseCode z = encode(pooled.vector, params);
    (m == Modality::kImage ? image : text).codes.push_back(z);
    by_sample.emplace(sid, std::make_pair(m, std::move(z)));
  }
  if (image.codes.empty() || text.codes.empty()) {
    throw ConsistencyError("analyze", "need samples of both modalities after masking");
  }

  PairedCodes pairs;
  if (!o.task.empty()) {
    const TaskSpec task = read_task_spec(o.task);
    std::map<std::string, std::uint64_t> sample_of;
    for (const auto& q : task.queries) sample_of[q.id] = q.sample_id;
    for (const auto& cand : task.candidates) sample_of[cand.id] = cand.sample_id;
    for (const auto& [qid, relevant] : task.qrels) {
      for (const auto& cid : relevant) {
        auto a = by_sample.find(sample_of.at(qid));
        auto b = by_sample.find(sample_of.at(cid));
        if (a == by_sample.end() || b == by_sample.end()) continue;
        if (a->second.first == b->second.first) {
          throw ConsistencyError("analyze", "pair " + qid + " / " + cid + " does not span both modalities");
        }
        if (a->second.first == Modality::kImage) {
          pairs.pairs.emplace_back(a->second.second, b->second.second);
        } else {
          pairs.pairs.emplace_back(b->second.second, a->second.second);
        }
      }
    }
    if (pairs.pairs.empty()) throw ConsistencyError("analyze", "task yields no usable image-text pairs");
  }

  const std::vector<CodeCollection> both = {image, text};
  ConceptStats stats;
  stats.energy = energy(both);
  stats.modality = modality_score(image, text, o.epsilon);
  if (pairs.pairs.empty()) {
    stats.bridge = Vector::Zero(static_cast<Eigen::Index>(width));
    stats.attribution = Vector::Zero(static_cast<Eigen::Index>(width));
  } else {
    stats.bridge = bridge_scores(pairs, params.dictionary, parse_reduction(o.bridge_reduction));
    stats.attribution = retrieval_attribution(pairs, params.dictionary);
  }
  {
    std::ostringstream csv;
    write_stats_csv(stats, csv);
    write_text(dir / "stats.csv", csv.str());
  }

  const std::map<std::string, const Vector*> metrics = {
      {"energy", &stats.energy}, {"bridge", &stats.bridge}, {"attribution", &stats.attribution}};
  std::map<std::string, std::vector<std::size_t>> sets;
  json top = json::array();
  for (const auto& [name, scores] : metrics) {
    sets[name] = top_fraction(*scores, o.fraction);
    top.push_back({{"metric", name}, {"fraction", o.fraction}, {"indices", sets[name]}});
  }
  write_json(dir / "top_sets.json", top);
  write_json(dir / "overlaps.json",
             {{"fraction", o.fraction},
              {"jaccard",
               {{"energy_attribution", jaccard(sets["energy"], sets["attribution"])},
                {"energy_bridge", jaccard(sets["energy"], sets["bridge"])},
                {"bridge_attribution", jaccard(sets["bridge"], sets["attribution"])}}},
              {"triple", triple_overlap(sets["energy"], sets["bridge"], sets["attribution"])}});

  std::string curve = "rank,fraction\n";
  if (stats.energy.sum() > 0.0) {
    for (const auto& p : cumulative_energy_curve(stats.energy)) curve += std::to_string(p.rank) + "," + fmt(p.fraction) + "\n";
  } else {
    log.line("energy is zero everywhere; curve left empty");
  }
  write_text(dir / "energy_curve.csv", curve);

  const std::vector<double> active = stats.modality.active_scores();
  std::string density = "x,density\n";
  double h = o.bandwidth;
  if (!active.empty()) {
    if (!(h > 0.0)) h = silverman_bandwidth(active);
    for (const auto& p : modality_density_export(active, h, o.grid)) density += fmt(p.x) + "," + fmt(p.density) + "\n";
  }
  write_text(dir / "modality_density.csv", density);

  std::vector<SparseCode> all = image.codes;
  all.insert(all.end(), text.codes.begin(), text.codes.end());
  const auto dead = dead_feature_report(all, width);
  write_json(dir / "dead_features.json",
             {{"width", width}, {"count", dead.size()}, {"indices", std::vector<std::size_t>(dead.begin(), dead.end())}});

  write_json(dir / "config.json", {{"subcommand", "analyze"},
                                   {"checkpoint", o.checkpoint},
                                   {"shards", o.shards},
                                   {"task", o.task},
                                   {"pooling", o.pooling},
                                   {"mask", to_string(mask)},
                                   {"fraction", o.fraction},
                                   {"bridge_reduction", o.bridge_reduction},
                                   {"epsilon", o.epsilon},
                                   {"bandwidth", h},
                                   {"grid", o.grid},
                                   {"samples_image", image.codes.size()},
                                   {"samples_text", text.codes.size()},
                                   {"samples_excluded", excluded},
                                   {"pairs", pairs.pairs.size()}});
  log.line("analyze done");
  out << "analyze: " << image.codes.size() << " image and " << text.codes.size() << " text samples, "
      << pairs.pairs.size() << " pairs, " << dead.size() << " dead features\n";
  return kExitOk;
}

int cmd_intervene(const Common& c, const InterveneOpts& o, std::ostream& out) {
  const SaeParams params = load_checkpoint(o.checkpoint);
  std::ifstream in(o.stats);
  if (!in) throw IoError("intervene", "cannot open " + o.stats);
  const ConceptStats stats = read_stats_csv(in);
  const RankPolicy policy = o.rank > 0 ? RankPolicy(FixedRank{o.rank}) : RankPolicy(EnergyThreshold{o.theta});
  const RemovalSubspace sub = build_removal_subspace(params.dictionary, stats.attribution, o.fraction, policy);

  const fs::path dir = prepare_out(c.out);
  RunLog log(dir);
  save_subspace(sub, o.fraction, policy, dir);
  write_json(dir / "config.json", {{"subcommand", "intervene"},
                                   {"checkpoint", o.checkpoint},
                                   {"stats", o.stats},
                                   {"fraction", o.fraction},
                                   {"rank_policy", describe(policy)},
                                   {"r", sub.rank()}});
  log.line("intervene done r=" + std::to_string(sub.rank()));
  out << "intervene: removed rank " << sub.rank() << " from " << sub.source_indices.size() << " atoms\n";
  return kExitOk;
}

int cmd_eval(const Common& c, const EvalOpts& o, std::ostream& out) {
  const auto shards = read_all(o.shards);
  const TaskSpec task = read_task_spec(o.task);
  PoolingConfig pooling{parse_pool_strategy(o.pooling), parse_role_mask(o.mask)};
  std::optional<RemovalSubspace> sub;
  InterventionConfig iv;
  if (!o.subspace.empty()) {
    sub = load_subspace(o.subspace);
    iv.subspace = &*sub;
    iv.apply_to_queries = o.apply != "candidates";
    iv.apply_to_candidates = o.apply != "queries";
  }
  const RetrievalReport report = run_task(shards, task, pooling, iv, o.ks);

  const fs::path dir = prepare_out(c.out);
  RunLog log(dir);
  write_json(dir / "report.json", report.to_json());
  std::ostringstream csv;
  write_recall_csv(report, csv);
  write_text(dir / "recall.csv", csv.str());
  write_json(dir / "config.json", {{"subcommand", "eval"},
                                   {"shards", o.shards},
                                   {"task", o.task},
                                   {"subspace", o.subspace},
                                   {"apply", o.apply},
                                   {"pooling", o.pooling},
                                   {"mask", to_string(pooling.mask)},
                                   {"k", o.ks}});
  log.line("eval done");
  for (const auto& [k, v] : report.recall_at) out << "R@" << k << " = " << fmt(v) << '\n';
  return kExitOk;
}

int cmd_report(const ReportOpts& o, std::ostream& out) {
  const fs::path in(o.in);
  std::string text;
  if (fs::exists(in / "stats.csv")) {
    std::ifstream f(in / "stats.csv");
    const ConceptStats stats = read_stats_csv(f);
    if (o.format == "csv") {
      std::ostringstream csv;
      write_stats_csv(stats, csv);
      text = csv.str();
    } else {
      json rows = json::array();
      for (Eigen::Index i = 0; i < stats.energy.size(); ++i) {
        const bool active = stats.modality.active[static_cast<std::size_t>(i)];
        rows.push_back({{"concept", i},
                        {"energy", stats.energy(i)},
                        {"modality_score", active ? json(stats.modality.score(i)) : json(nullptr)},
                        {"active", active},
                        {"bridge", stats.bridge(i)},
                        {"attribution", stats.attribution(i)}});
      }
      text = json{{"concepts", rows}}.dump(2) + "\n";
    }
  } else if (fs::exists(in / "report.json")) {
    std::ifstream f(in / "report.json");
    json j;
    try {
      j = json::parse(f);
    } catch (const json::parse_error& e) {
      throw FormatError("report", e.what());
    }
    if (o.format == "csv") {
      RetrievalReport r;
      for (const auto& [k, v] : j.at("recall_at").items()) r.recall_at[std::stoull(k)] = v.get<double>();
      std::ostringstream csv;
      write_recall_csv(r, csv);
      text = csv.str();
    } else {
      text = j.dump(2) + "\n";
    }
  } else {
    throw IoError("report", "no stats.csv or report.json in " + in.string());
  }
  if (o.out.empty()) {
    out << text;
  } else {
    write_text(o.out, text);
  }
  return kExitOk;
}

int cmd_validate(const ValidateOpts& o, std::ostream& out) {
  for (const auto& p : o.shards) {
    const ActivationShard shard = read_shard_file(p);
    out << p << ": ok (" << shard.count() << " x " << shard.dim() << ")\n";
  }
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Sparse-autoencoder concept analysis for multimodal embeddings", "mmsae"};
  app.require_subcommand(1);

  Common common;
  SynthOpts synth;
  TrainOpts tr;
  AnalyzeOpts an;
  InterveneOpts iv;
  EvalOpts ev;
  ReportOpts rep;
  ValidateOpts val;

  auto* s = app.add_subcommand("synth", "Generate synthetic shards with planted ground truth");
  add_common(s, common, true);
  s->add_option("--kind", synth.kind)->check(CLI::IsMember({"paired", "activations"}))->capture_default_str();
  s->add_option("--c-true", synth.spec.c_true)->capture_default_str();
  s->add_option("--d", synth.spec.d)->capture_default_str();
  s->add_option("--k-true", synth.spec.k_true)->capture_default_str();
  s->add_option("--noise", synth.spec.noise_sigma)->capture_default_str();
  s->add_option("--n", synth.spec.n_samples, "Pairs (paired) or samples (activations)")->capture_default_str();
  s->add_option("--shared-fraction", synth.spec.shared_fraction)->capture_default_str();
  s->add_option("--beta", synth.spec.text_bias_beta, "Text-side signal scale")->capture_default_str();
  s->add_option("--nuisance", synth.spec.nuisance_strength, "Nuisance strength s")->capture_default_str();

  auto* t = app.add_subcommand("train", "Train a Top-K sparse autoencoder on activation shards");
  add_common(t, common, true);
  t->add_option("--shards", tr.shards)->required()->expected(1, -1);
  t->add_option("--profile", tr.profile)->check(CLI::IsMember({"mllm", "vlm"}))->capture_default_str();
  t->add_option("--width", tr.width, "Dictionary width (default from profile)");
  t->add_option("--k", tr.k, "Active concepts per sample")->capture_default_str();
  t->add_option("--lr", tr.config.learning_rate)->capture_default_str();
  t->add_option("--beta1", tr.config.beta1)->capture_default_str();
  t->add_option("--beta2", tr.config.beta2)->capture_default_str();
  t->add_option("--eps", tr.config.epsilon)->capture_default_str();
  t->add_option("--batch", tr.config.batch_size)->capture_default_str();
  t->add_option("--alpha", tr.config.alpha, "L1 weight")->capture_default_str();
  t->add_option("--steps", tr.config.steps)->capture_default_str();
  t->add_option("--buffer", tr.buffer, "Shuffle buffer capacity in tokens")->capture_default_str();
  t->add_option("--passes", tr.passes, "Passes over the shards, 0 = unbounded")->capture_default_str();
  t->add_flag("--standardize", tr.standardize, "Scale inputs to unit mean squared norm");
  t->add_flag("--dry-run", tr.dry_run, "Resolve and echo the configuration, then stop");

  auto* a = app.add_subcommand("analyze", "Concept statistics for a trained dictionary");
  add_common(a, common, true);
  a->add_option("--checkpoint", an.checkpoint)->required();
  a->add_option("--shards", an.shards)->required()->expected(1, -1);
  a->add_option("--task", an.task, "Task spec whose qrels define matched pairs");
  a->add_option("--pooling", an.pooling)->check(CLI::IsMember({"mean", "last_token"}))->capture_default_str();
  a->add_option("--mask", an.mask, "Comma-separated token roles to exclude");
  a->add_option("--fraction", an.fraction, "Top-set fraction")->capture_default_str();
  a->add_option("--bridge-reduction", an.bridge_reduction)
      ->check(CLI::IsMember({"marginal", "diagonal"}))
      ->capture_default_str();
  a->add_option("--epsilon", an.epsilon, "Modality activity threshold")->capture_default_str();
  a->add_option("--bandwidth", an.bandwidth, "KDE bandwidth, 0 = Silverman")->capture_default_str();
  a->add_option("--grid", an.grid)->capture_default_str()->check(CLI::Range(2, 1 << 20));

  auto* i = app.add_subcommand("intervene", "Build a removal subspace from top-attribution atoms");
  add_common(i, common, true);
  i->add_option("--checkpoint", iv.checkpoint)->required();
  i->add_option("--stats", iv.stats, "stats.csv from analyze")->required();
  i->add_option("--fraction", iv.fraction)->capture_default_str();
  auto* rank = i->add_option("--rank", iv.rank, "Fixed rank r");
  auto* theta = i->add_option("--theta", iv.theta, "Energy threshold for the rank")->capture_default_str();
  rank->excludes(theta);

  auto* e = app.add_subcommand("eval", "Zero-shot retrieval evaluation");
  add_common(e, common, true);
  e->add_option("--shards", ev.shards)->required()->expected(1, -1);
  e->add_option("--task", ev.task)->required();
  e->add_option("--subspace", ev.subspace, "Removal subspace directory from intervene");
  e->add_option("--apply", ev.apply, "Sides the removal applies to")
      ->check(CLI::IsMember({"both", "queries", "candidates"}))
      ->capture_default_str();
  e->add_option("--pooling", ev.pooling)->check(CLI::IsMember({"mean", "last_token"}))->capture_default_str();
  e->add_option("--mask", ev.mask, "Comma-separated token roles to exclude");
  e->add_option("--k", ev.ks, "Recall cutoffs")->delimiter(',')->capture_default_str();

  auto* r = app.add_subcommand("report", "Print analyze or eval outputs");
  r->add_option("--in", rep.in, "Run directory")->required();
  r->add_option("--format", rep.format)->check(CLI::IsMember({"csv", "json"}))->capture_default_str();
  r->add_option("--out", rep.out, "Output file (default stdout)");
  r->add_option("--config", common.config);

  auto* v = app.add_subcommand("validate", "Check shards against the format");
  v->add_option("shards", val.shards)->required()->expected(1, -1);
  v->add_option("--config", common.config);

  for (CLI::App* sub : app.get_subcommands({})) attach_env(sub);

  try {
    std::vector<std::string> argv = expand_config(app, args);
    std::reverse(argv.begin(), argv.end());
    app.parse(argv);
  } catch (const CLI::ParseError& ex) {
    return app.exit(ex, out, err) == 0 ? kExitOk : kExitUsage;
  } catch (const ConfigError& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitUsage;
  }

  try {
    if (s->parsed()) return cmd_synth(common, synth, out);
    if (t->parsed()) return cmd_train(common, tr, out);
    if (a->parsed()) return cmd_analyze(common, an, out);
    if (i->parsed()) return cmd_intervene(common, iv, out);
    if (e->parsed()) return cmd_eval(common, ev, out);
    if (r->parsed()) return cmd_report(rep, out);
    if (v->parsed()) return cmd_validate(val, out);
  } catch (const ConfigError& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitUsage;
  } catch (const Error& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitData;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}

}  // namespace mmsae
