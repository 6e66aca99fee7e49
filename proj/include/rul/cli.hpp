#pragma once

// Command-line front end. Each subcommand reads file artifacts, runs one
// pipeline stage, and writes its outputs atomically together with a run
// manifest that records SHA-256 hashes of everything it produced.

#include <openssl/evp.h>

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "rul/corpus.hpp"
#include "rul/errors.hpp"
#include "rul/eval.hpp"
#include "rul/model.hpp"
#include "rul/training.hpp"

namespace rul::cli {

using json = nlohmann::ordered_json;

enum ExitCode { kOk = 0, kCheckFailed = 1, kUsage = 2, kRuntime = 3 };

inline constexpr double kGradCheckEps = 1e-4;
inline constexpr double kGradCheckTol = 1e-4;
inline constexpr std::size_t kGradCheckCoords = 200;

// ---------------------------------------------------------------------------
// Logging

enum class LogLevel { Quiet, Info, Debug };

inline LogLevel log_level_from_env() {
  const char* v = std::getenv("RUL_LOG");
  if (!v || !*v) return LogLevel::Info;
  const std::string s(v);
  if (s == "quiet") return LogLevel::Quiet;
  if (s == "info") return LogLevel::Info;
  if (s == "debug") return LogLevel::Debug;
  throw ConfigError("RUL_LOG must be quiet, info or debug, got " + s);
}

class Logger {
 public:
  Logger(LogLevel level, std::ostream& out, std::ostream& err) : level_(level), out_(out), err_(err) {}
  /// One JSON object per line on standard output, muted when quiet.
  void progress(const std::string& stage, nlohmann::ordered_json j) const {
    if (level_ < LogLevel::Info) return;
    nlohmann::ordered_json line{{"stage", stage}};
    line.update(j);
    out_ << line.dump() << "\n" << std::flush;
  }
  void info(const std::string& msg) const {
    if (level_ >= LogLevel::Info) err_ << "[rul] " << msg << "\n";
  }
  void debug(const std::string& msg) const {
    if (level_ >= LogLevel::Debug) err_ << "[rul] " << msg << "\n";
  }
  bool enabled(LogLevel l) const { return level_ >= l; }

 private:
  LogLevel level_;
  std::ostream& out_;
  std::ostream& err_;
};

// ---------------------------------------------------------------------------
// Hashing and manifests

inline std::string sha256_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("sha256 failed");
  std::ostringstream out;
  for (unsigned int i = 0; i < len; ++i) out << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return out.str();
}

inline std::string sha256_file(const std::string& path) { return sha256_hex(read_file(path)); }

inline std::string utc_timestamp() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct Manifest {
  std::string subcommand;
  json config = json::object();
  std::uint64_t seed = 0;
  std::map<std::string, std::string> inputs, outputs;
  std::string started_at = utc_timestamp();

  /// Hashes every output and writes the manifest last.
  void write(const std::string& path) const {
    json j;
    j["subcommand"] = subcommand;
    j["config"] = config;
    j["seed"] = seed;
    j["inputs"] = inputs;
    j["outputs"] = outputs;
    j["started_at"] = started_at;
    j["finished_at"] = utc_timestamp();
    json hashes = json::object();
    for (const auto& [role, p] : outputs) hashes[p] = sha256_file(p);
    j["hashes"] = hashes;
    write_file_atomic(path, j.dump(2) + "\n");
  }
};

// ---------------------------------------------------------------------------
// Configuration files

/// Reads one JSON section, rejecting unknown keys and mistyped values.
class SectionReader {
 public:
  using Setter = std::function<void(const nlohmann::json&)>;

  SectionReader(std::string name, const nlohmann::json& obj) : name_(std::move(name)), obj_(obj) {
    if (!obj_.is_object()) throw ConfigError(name_ + " must be an object");
  }

  template <class T>
  SectionReader& field(const std::string& key, T& out) {
    setters_[key] = [this, key, &out](const nlohmann::json& v) {
      try {
        out = v.get<T>();
      } catch (const nlohmann::json::exception&) {
        throw ConfigError(name_ + "." + key + " has the wrong type");
      }
    };
    return *this;
  }

  SectionReader& custom(const std::string& key, Setter f) {
    setters_[key] = std::move(f);
    return *this;
  }

  void apply() const {
    for (auto it = obj_.begin(); it != obj_.end(); ++it) {
      auto s = setters_.find(it.key());
      if (s == setters_.end()) throw ConfigError("unknown config key " + name_ + "." + it.key());
      s->second(it.value());
    }
  }

 private:
  std::string name_;
  const nlohmann::json& obj_;
  std::map<std::string, Setter> setters_;
};

struct PipelineConfig {
  ModelConfig model;
  TrainConfig sft;
  TrainConfig rm;
  RlTrainConfig rl;
  long pairs_train = 3000;
  long pairs_valid = 600;

  void set_seed(std::uint64_t seed) { sft.seed = rm.seed = rl.seed = seed; }
};

inline std::string get_string(const nlohmann::json& v, const std::string& field) {
  if (!v.is_string()) throw ConfigError(field + " must be a string");
  return v.get<std::string>();
}

inline void read_train_section(const std::string& name, const nlohmann::json& j, TrainConfig& c, bool weights) {
  SectionReader r(name, j);
  r.field("epochs", c.epochs).field("batch_size", c.batch_size).field("lr", c.lr).field("patience", c.patience);
  r.custom("optimizer", [&](const nlohmann::json& v) { c.optimizer = parse_optimizer(get_string(v, name + ".optimizer")); });
  if (weights) r.field("lambda_cls", c.weights.lambda_cls).field("lambda_gen", c.weights.lambda_gen).field("tau", c.tau);
  r.apply();
}

inline PipelineConfig config_from_json(const nlohmann::json& j) {
  PipelineConfig c;
  SectionReader top("config", j);
  top.custom("model", [&](const nlohmann::json& v) {
    SectionReader r("model", v);
    r.field("d", c.model.d).field("d_a", c.model.d_a).field("d_a_prime", c.model.d_a_prime).field("max_len", c.model.max_len);
    r.custom("aggregation", [&](const nlohmann::json& a) {
      c.model.aggregation = parse_aggregation(get_string(a, "model.aggregation"));
    });
    r.apply();
  });
  top.custom("sft", [&](const nlohmann::json& v) { read_train_section("sft", v, c.sft, true); });
  top.custom("rm", [&](const nlohmann::json& v) { read_train_section("rm", v, c.rm, false); });
  top.custom("rl", [&](const nlohmann::json& v) {
    SectionReader r("rl", v);
    r.field("beta_kl", c.rl.rl.beta_kl).field("batch_size", c.rl.rl.batch_size).field("temperature", c.rl.rl.temperature);
    r.field("baseline", c.rl.rl.baseline).field("iterations", c.rl.iterations).field("lr", c.rl.lr);
    r.field("kl_bound", c.rl.kl_bound).field("max_len", c.rl.max_len).field("heldout_size", c.rl.heldout_size);
    r.field("heldout_samples", c.rl.heldout_samples);
    r.field("tau", c.rl.tau).field("samples_per_prompt", c.rl.rl.samples_per_prompt).field("clip_norm", c.rl.clip_norm);
    r.custom("optimizer", [&](const nlohmann::json& o) { c.rl.optimizer = parse_optimizer(get_string(o, "rl.optimizer")); });
    r.apply();
  });
  top.custom("pairs", [&](const nlohmann::json& v) {
    SectionReader r("pairs", v);
    r.field("n_train", c.pairs_train).field("n_valid", c.pairs_valid);
    r.apply();
  });
  top.apply();
  c.sft.validate("sft");
  c.rm.validate("rm");
  c.rl.validate();
  if (c.pairs_train < 1) throw ConfigError("pairs.n_train must be >= 1");
  if (c.pairs_valid < 1) throw ConfigError("pairs.n_valid must be >= 1");
  ModelConfig probe = c.model;
  probe.vocab_size = static_cast<int>(kSpecialTokens.size()) + 1;
  probe.validate();
  return c;
}

inline PipelineConfig load_config(const std::string& path) {
  if (path.empty()) return {};
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path + ": malformed JSON: " + e.what());
  }
  return config_from_json(j);
}

inline json train_to_json(const TrainConfig& c, bool weights) {
  json j{{"epochs", c.epochs}, {"batch_size", c.batch_size}, {"lr", c.lr},
         {"optimizer", to_string(c.optimizer)}, {"patience", c.patience}};
  if (weights) {
    j["lambda_cls"] = c.weights.lambda_cls;
    j["lambda_gen"] = c.weights.lambda_gen;
    j["tau"] = c.tau;
  }
  return j;
}

inline json config_to_json(const PipelineConfig& c) {
  json j;
  j["model"] = {{"d", c.model.d}, {"d_a", c.model.d_a}, {"d_a_prime", c.model.d_a_prime},
                {"max_len", c.model.max_len}, {"aggregation", to_string(c.model.aggregation)}};
  j["sft"] = train_to_json(c.sft, true);
  j["rm"] = train_to_json(c.rm, false);
  j["rl"] = {{"beta_kl", c.rl.rl.beta_kl},   {"batch_size", c.rl.rl.batch_size},
             {"temperature", c.rl.rl.temperature}, {"baseline", c.rl.rl.baseline},
             {"iterations", c.rl.iterations}, {"lr", c.rl.lr},
             {"optimizer", to_string(c.rl.optimizer)}, {"kl_bound", c.rl.kl_bound},
             {"max_len", c.rl.max_len},       {"heldout_size", c.rl.heldout_size}, {"heldout_samples", c.rl.heldout_samples},
             {"tau", c.rl.tau},               {"samples_per_prompt", c.rl.rl.samples_per_prompt},
             {"clip_norm", c.rl.clip_norm}};
  j["pairs"] = {{"n_train", c.pairs_train}, {"n_valid", c.pairs_valid}};
  return j;
}

// ---------------------------------------------------------------------------
// Data directory layout

struct DataDir {
  std::string root;
  std::string path(const std::string& name) const { return (std::filesystem::path(root) / name).string(); }
  std::string split(const std::string& s) const { return path(s + ".jsonl"); }
  std::string vocab() const { return path("vocab.json"); }
  std::string manifest() const { return path("manifest.json"); }
};

inline std::string vocab_to_string(const Vocab& v) { return json{{"tokens", v.tokens()}}.dump() + "\n"; }

inline Vocab load_vocab(const std::string& path) {
  try {
    return Vocab(nlohmann::json::parse(read_file(path)).at("tokens").get<std::vector<std::string>>());
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path + ": " + e.what());
  }
}

inline void require_file(const std::string& path, const std::string& what) {
  if (path.empty()) throw ConfigError(what + " is required");
  if (!std::filesystem::is_regular_file(path)) throw ConfigError(what + " not found: " + path);
}

inline Dataset load_data(const DataDir& d) {
  Dataset ds;
  for (const char* s : {"train", "valid", "test"}) require_file(d.split(s), std::string(s) + " split");
  ds.train = load_dataset(d.split("train"));
  ds.valid = load_dataset(d.split("valid"));
  ds.test = load_dataset(d.split("test"));
  return ds;
}

inline Vocab load_data_vocab(const DataDir& d) {
  require_file(d.vocab(), "vocab file");
  return load_vocab(d.vocab());
}

inline std::string sibling(const std::string& out, const std::string& suffix) { return out + suffix; }

// ---------------------------------------------------------------------------
// Subcommands

struct Options {
  std::string spec, out, data, config, sft_ckpt, rm_ckpt, ckpt, report, loss = "all", split = "test";
  std::string aggregation;
  std::uint64_t seed = 0;
  bool seed_given = false;
  int timing_reps = 0;
  double tol = kGradCheckTol;
};

inline ProgressFn progress_logger(const Logger& log, const std::string& stage) {
  return [&log, stage](const json& j) { log.progress(stage, j); };
}

inline int cmd_gen_data(const Options& o, const Logger& log) {
  GenerationSpec spec;
  if (!o.spec.empty()) {
    require_file(o.spec, "spec file");
    try {
      spec = spec_from_json(nlohmann::json::parse(read_file(o.spec)));
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError(o.spec + ": malformed JSON: " + e.what());
    }
  }
  if (o.seed_given) spec.seed = o.seed;
  spec.validate();
  std::filesystem::create_directories(o.out);
  const DataDir d{o.out};
  Manifest m;
  m.subcommand = "gen-data";
  m.config = spec_to_json(spec);
  m.seed = spec.seed;
  if (!o.spec.empty()) m.inputs["spec"] = o.spec;

  const Dataset ds = generate_dataset(spec);
  for (const auto& [name, split] : {std::pair{"train", &ds.train}, {"valid", &ds.valid}, {"test", &ds.test}}) {
    save_dataset(*split, d.split(name));
    m.outputs[name] = d.split(name);
    log.info(std::string("wrote ") + std::to_string(split->size()) + " examples to " + d.split(name));
  }
  const Vocab vocab = build_vocab({&ds.train, &ds.valid, &ds.test}, kBareRefusal);
  write_file_atomic(d.vocab(), vocab_to_string(vocab));
  m.outputs["vocab"] = d.vocab();
  m.write(d.manifest());
  log.info("vocabulary size " + std::to_string(vocab.size()));
  return kOk;
}

inline void write_report(const std::string& path, const json& j) { write_file_atomic(path, j.dump(2) + "\n"); }

inline int cmd_train_sft(const Options& o, const Logger& log) {
  PipelineConfig cfg = load_config(o.config);
  cfg.set_seed(o.seed);
  const DataDir d{o.data};
  const Dataset ds = load_data(d);
  const Vocab vocab = load_data_vocab(d);
  SftResult r = train_sft(ds.train, ds.valid, vocab, cfg.model, cfg.sft, progress_logger(log, "sft"));
  save_checkpoint(r.params, vocab, o.out);
  const std::string report = o.report.empty() ? sibling(o.out, ".report.json") : o.report;
  r.report.checkpoint = o.out;
  write_report(report, report_to_json(r.report));

  Manifest m;
  m.subcommand = "train-sft";
  m.config = config_to_json(cfg);
  m.seed = o.seed;
  m.inputs = {{"data", o.data}, {"config", o.config}};
  m.outputs = {{"checkpoint", o.out}, {"report", report}};
  m.write(sibling(o.out, ".manifest.json"));
  log.info("best epoch " + std::to_string(r.report.best_epoch) + ", checkpoint " + o.out);
  return kOk;
}

inline int cmd_train_rm(const Options& o, const Logger& log) {
  PipelineConfig cfg = load_config(o.config);
  cfg.set_seed(o.seed);
  const DataDir d{o.data};
  const Dataset ds = load_data(d);
  const Vocab vocab = load_data_vocab(d);
  const auto train_pairs = make_preference_pairs(ds.train, cfg.pairs_train, substream_seed(o.seed, "pairs/train"));
  const auto valid_pairs = make_preference_pairs(ds.valid, cfg.pairs_valid, substream_seed(o.seed, "pairs/valid"));
  std::vector<Example> all = ds.train;
  all.insert(all.end(), ds.valid.begin(), ds.valid.end());
  RmResult r = train_reward_model(train_pairs, valid_pairs, all, vocab, cfg.model, cfg.rm, progress_logger(log, "rm"));
  save_checkpoint(r.params, vocab, o.out);
  const std::string pairs_path = sibling(o.out, ".pairs.jsonl");
  save_pairs(train_pairs, pairs_path);
  const std::string report = o.report.empty() ? sibling(o.out, ".report.json") : o.report;
  r.report.checkpoint = o.out;
  json rep = report_to_json(r.report);
  rep["heldout_accuracy"] = r.heldout_accuracy;
  write_report(report, rep);

  Manifest m;
  m.subcommand = "train-rm";
  m.config = config_to_json(cfg);
  m.seed = o.seed;
  m.inputs = {{"data", o.data}, {"config", o.config}};
  m.outputs = {{"checkpoint", o.out}, {"report", report}, {"pairs", pairs_path}};
  m.write(sibling(o.out, ".manifest.json"));
  log.info("held-out preference accuracy " + std::to_string(r.heldout_accuracy));
  return kOk;
}

inline int cmd_train_rl(const Options& o, const Logger& log) {
  require_file(o.sft_ckpt, "--sft-ckpt");
  require_file(o.rm_ckpt, "--rm-ckpt");
  PipelineConfig cfg = load_config(o.config);
  cfg.set_seed(o.seed);
  const DataDir d{o.data};
  const Dataset ds = load_data(d);
  const Checkpoint sft = load_checkpoint(o.sft_ckpt);
  const Checkpoint rm = load_checkpoint(o.rm_ckpt);
  if (!(sft.vocab == rm.vocab)) throw ValidationError("SFT and reward-model checkpoints use different vocabularies");
  RlResult r = train_rl(sft.params, reward_model_fn(rm.params), ds.train, ds.valid, sft.vocab, cfg.rl,
                        progress_logger(log, "rl"));
  save_checkpoint(r.params, sft.vocab, o.out);
  const std::string report = o.report.empty() ? sibling(o.out, ".report.json") : o.report;
  r.report.checkpoint = o.out;
  write_report(report, report_to_json(r.report));

  Manifest m;
  m.subcommand = "train-rl";
  m.config = config_to_json(cfg);
  m.seed = o.seed;
  m.inputs = {{"data", o.data}, {"config", o.config}, {"sft_ckpt", o.sft_ckpt}, {"rm_ckpt", o.rm_ckpt}};
  m.outputs = {{"checkpoint", o.out}, {"report", report}};
  m.write(sibling(o.out, ".manifest.json"));
  log.info("held-out reward " + std::to_string(r.report.heldout_reward_before) + " -> " +
           std::to_string(r.report.heldout_reward_after));
  return kOk;
}

inline int cmd_eval(const Options& o, const Logger& log) {
  require_file(o.ckpt, "--ckpt");
  const Checkpoint ck = load_checkpoint(o.ckpt);
  const DataDir d{o.data};
  if (o.split != "train" && o.split != "valid" && o.split != "test")
    throw ConfigError("--split must be train, valid or test");
  require_file(d.split(o.split), o.split + " split");
  const std::vector<Example> data = load_dataset(d.split(o.split));
  EvalOptions eo;
  eo.tau = ck.params.config.tau;
  eo.max_len = ck.params.config.max_len;
  eo.aggregation = o.aggregation.empty() ? ck.params.config.aggregation : parse_aggregation(o.aggregation);
  eo.timing_repetitions = o.timing_reps;
  const MetricsReport rep = evaluate(ck.params, data, ck.vocab, eo);
  write_report(o.out, metrics_to_json(rep));
  if (log.enabled(LogLevel::Info)) log.info("\n" + render_table(rep));

  Manifest m;
  m.subcommand = "eval";
  m.config = {{"split", o.split}, {"aggregation", to_string(eo.aggregation)}, {"timing_repetitions", o.timing_reps}};
  m.seed = o.seed;
  m.inputs = {{"data", o.data}, {"ckpt", o.ckpt}};
  m.outputs = {{"report", o.out}};
  m.write(sibling(o.out, ".manifest.json"));
  return kOk;
}

inline int cmd_gradcheck(const Options& o, std::ostream& out) {
  std::vector<LossSelector> losses;
  if (o.loss == "all")
    losses.assign(kAllLosses.begin(), kAllLosses.end());
  else
    losses.push_back(parse_loss_selector(o.loss));
  const GradCheckCase c = gradcheck_case(o.seed);
  bool ok = true;
  for (LossSelector sel : losses) {
    const GradCheckReport r = grad_check(c.params, c.batch, sel, kGradCheckEps, o.tol, kGradCheckCoords, o.seed);
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s %s max_rel_error=%.3e worst=%s(%ld,%ld) coords=%zu", r.passed ? "PASS" : "FAIL",
                  to_string(sel), r.max_rel_error, r.worst_tensor.c_str(), static_cast<long>(r.worst_row),
                  static_cast<long>(r.worst_col), r.coordinates);
    out << buf << (r.message.empty() ? "" : " " + r.message) << "\n";
    ok = ok && r.passed;
  }
  return ok ? kOk : kCheckFailed;
}

inline int cmd_ablate(const Options& o, const Logger& log) {
  PipelineConfig cfg = load_config(o.config);
  const DataDir d{o.data};
  const Dataset ds = load_data(d);
  const Vocab vocab = load_data_vocab(d);
  AblationConfig ac;
  ac.model = cfg.model;
  ac.sft = cfg.sft;
  ac.rm = cfg.rm;
  ac.rl = cfg.rl;
  ac.rm_train_pairs = cfg.pairs_train;
  ac.rm_valid_pairs = cfg.pairs_valid;
  ac.seed = o.seed;
  const AblationTable t = run_ablation(ds, vocab, ac, progress_logger(log, "ablate"));
  write_report(o.out, ablation_to_json(t));
  for (const auto& a : t.arms)
    log.info(a.name + ": ranking " + std::to_string(a.metrics.accuracy.ranking) + ", informativeness " +
             (a.metrics.informativeness_avg ? std::to_string(*a.metrics.informativeness_avg) : "n/a"));

  Manifest m;
  m.subcommand = "ablate";
  m.config = config_to_json(cfg);
  m.seed = o.seed;
  m.inputs = {{"data", o.data}, {"config", o.config}};
  m.outputs = {{"table", o.out}};
  m.write(sibling(o.out, ".manifest.json"));
  return kOk;
}

// ---------------------------------------------------------------------------
// Entry point

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Unanswerability detection and refusal generation pipeline", "rul"};
  app.require_subcommand(1, 1);
  Options o;
  auto seed_opt = [&](CLI::App* s) {
    s->add_option_function<std::uint64_t>(
        "--seed", [&](const std::uint64_t& v) { o.seed = v; o.seed_given = true; }, "Random seed");
  };

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic corpus");
  gen->add_option("--spec", o.spec, "Generation spec (JSON)");
  gen->add_option("--out", o.out, "Output directory")->required();
  seed_opt(gen);

  std::map<std::string, CLI::App*> train;
  for (const char* name : {"train-sft", "train-rm", "train-rl"}) {
    auto* s = app.add_subcommand(name, std::string("Run the ") + (name + 6) + " stage");
    s->add_option("--data", o.data, "Data directory from gen-data")->required();
    s->add_option("--config", o.config, "Pipeline config (JSON)");
    s->add_option("--out", o.out, "Checkpoint path")->required();
    s->add_option("--report", o.report, "Report path (default <out>.report.json)");
    seed_opt(s);
    train[name] = s;
  }
  train["train-rl"]->add_option("--sft-ckpt", o.sft_ckpt, "SFT policy checkpoint");
  train["train-rl"]->add_option("--rm-ckpt", o.rm_ckpt, "Reward-model checkpoint");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  ev->add_option("--data", o.data, "Data directory")->required();
  ev->add_option("--ckpt", o.ckpt, "Checkpoint")->required();
  ev->add_option("--aggregation", o.aggregation, "attention|mean (default: from checkpoint)")
      ->check(CLI::IsMember({"attention", "mean"}));
  ev->add_option("--split", o.split, "train|valid|test");
  ev->add_option("--timing-reps", o.timing_reps, "Timing repetitions (0 disables, otherwise >= 3)");
  ev->add_option("--out", o.out, "Report path")->required();
  seed_opt(ev);

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient check");
  gc->add_option("--loss", o.loss, "all|bce|nll|sft|rm|kl")->check(CLI::IsMember({"all", "bce", "nll", "sft", "rm", "kl"}));
  gc->add_option("--tol", o.tol, "Relative error tolerance");
  seed_opt(gc);

  auto* ab = app.add_subcommand("ablate", "Three-arm ablation");
  ab->add_option("--data", o.data, "Data directory")->required();
  ab->add_option("--config", o.config, "Pipeline config (JSON)");
  ab->add_option("--out", o.out, "Table path")->required();
  seed_opt(ab);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      return kOk;
    }
    err << "error: " << e.what() << "\n";
    return kUsage;
  }

  try {
    const Logger log(log_level_from_env(), out, err);
    if (gen->parsed()) return cmd_gen_data(o, log);
    if (train["train-sft"]->parsed()) return cmd_train_sft(o, log);
    if (train["train-rm"]->parsed()) return cmd_train_rm(o, log);
    if (train["train-rl"]->parsed()) return cmd_train_rl(o, log);
    if (ev->parsed()) return cmd_eval(o, log);
    if (gc->parsed()) return cmd_gradcheck(o, out);
    if (ab->parsed()) return cmd_ablate(o, log);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const TrainingAbort& e) {
    err << "training aborted: " << e.what() << "\n";
    return kRuntime;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}

}  // namespace rul::cli
