// SPDX-License-Identifier: Apache-2.0
#include "asrcl/cli.hpp"

#include <CLI11.hpp>

#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "asrcl/errors.hpp"

namespace asrcl {

namespace fs = std::filesystem;

Pretrained pretrain_stage(std::span<const PairedExample> pairs, const TrainingConfig& cfg) {
  if (pairs.empty()) throw ConfigError("no pre-training pairs");
  std::vector<std::string> texts;
  texts.reserve(2 * pairs.size());
  for (const auto& p : pairs) {
    texts.push_back(p.clean);
    texts.push_back(p.asr);
  }
  Pretrained out;
  out.vocab = build_vocab(texts, cfg.min_freq);
  out.model = Model(cfg.encoder_config(out.vocab.size(), {}), cfg.seed);
  if (cfg.pretrain_steps > 0) out.log = pretrain(out.model, out.vocab, pairs, cfg);
  return out;
}

PipelineRun finetune_and_evaluate(const Pretrained& base, std::span<const PairedExample> train,
                                  std::span<const PairedExample> test, const TrainingConfig& cfg,
                                  const std::string& label) {
  const LabelSpace labels = LabelSpace::from_examples(train, cfg.label_mode);
  Model model = base.model;
  model.reset_heads(labels.head_sizes());
  PipelineRun run;
  run.pretrain_log = base.log;
  run.finetune_log = finetune(model, base.vocab, train, labels, cfg).history;
  std::vector<double> wers;
  for (const auto& ex : test) wers.push_back(ex.wer);
  run.report = evaluate(model, base.vocab, test, labels, WerBuckets::named(cfg.buckets, wers), cfg.eval_batch);
  run.report.label = label;
  run.report.config = cfg.to_json();
  run.report.seeds = {cfg.seed};
  return run;
}

namespace {

/// Failure that maps to exit code 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
/// Failure that maps to exit code 1.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

nlohmann::json labels_to_json(const LabelSpace& l) {
  return {{"mode", l.mode() == LabelMode::kSingle ? "single" : "scenario_action"}, {"names", l.names()}};
}

LabelSpace labels_from_json(const nlohmann::json& j) {
  const auto mode = j.at("mode").get<std::string>() == "single" ? LabelMode::kSingle : LabelMode::kScenarioAction;
  return LabelSpace::from_names(mode, j.at("names").get<std::vector<std::vector<std::string>>>());
}

void require_file(const fs::path& p, const char* what) {
  if (p.empty()) throw UsageError(std::string("missing --") + what);
  if (!fs::is_regular_file(p)) throw IoError(std::string(what) + " file not found: " + p.string());
}

std::vector<std::string> read_lines(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot read " + p.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

std::ofstream open_out(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw IoError("cannot write " + p.string());
  return out;
}

void write_text(const fs::path& p, const std::string& text) {
  auto out = open_out(p);
  out << text;
  if (!out) throw IoError("write failed: " + p.string());
}

/// Shortest round-trip text of a double, always with a decimal point.
std::string short_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  std::string s(buf, res.ptr);
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      seeds.push_back(std::stoull(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw UsageError("--seeds expects a comma-separated list of integers, got '" + text + "'");
    }
  }
  if (seeds.empty()) throw UsageError("--seeds is empty");
  return seeds;
}

/// Options shared by the training subcommands: a config file, one flag per
/// config key and an output directory.
struct CommonOptions {
  std::string config_path;
  std::string out_dir;
  std::map<std::string, std::string> overrides;

  void attach(CLI::App& app) {
    app.add_option("--config", config_path, "flat key = value config file");
    app.add_option("--out-dir", out_dir, "output directory (default $ASRCL_OUTPUT_DIR or ./runs)");
    for (const auto& key : TrainingConfig::keys()) {
      std::string dashed = key;
      std::replace(dashed.begin(), dashed.end(), '_', '-');
      std::string names = "--" + key;
      if (dashed != key) names += ",--" + dashed;
      app.add_option(names, overrides[key], TrainingConfig::describe(key));
    }
  }

  TrainingConfig config(const CLI::App& app) const {
    TrainingConfig cfg;
    if (!config_path.empty()) {
      if (!fs::is_regular_file(config_path)) throw IoError("config file not found: " + config_path);
      cfg = TrainingConfig::load(config_path);
    }
    for (const auto& [key, value] : overrides) {
      if (app.count("--" + key) > 0) cfg.set(key, value);
    }
    cfg.validate();
    return cfg;
  }

  fs::path output() const {
    if (!out_dir.empty()) return out_dir;
    if (const char* env = std::getenv("ASRCL_OUTPUT_DIR"); env && *env) return env;
    return "runs";
  }
};

void write_jsonl(const fs::path& p, const std::vector<nlohmann::json>& rows) {
  auto out = open_out(p);
  for (const auto& r : rows) out << r.dump() << '\n';
  if (!out) throw IoError("write failed: " + p.string());
}

template <class Rec>
std::vector<nlohmann::json> log_rows(const std::vector<Rec>& recs, std::uint64_t seed) {
  std::vector<nlohmann::json> rows;
  for (const auto& r : recs) {
    auto j = to_json(r);
    j["seed"] = seed;
    rows.push_back(std::move(j));
  }
  return rows;
}

void write_report(const fs::path& dir, const EvalReport& r) {
  write_text(dir / "report.csv", to_csv(r));
  write_text(dir / "report.json", to_json(r).dump(2) + "\n");
}

void write_report(const fs::path& dir, const AggregateReport& a) {
  write_text(dir / "report.csv", to_csv(a.mean));
  write_text(dir / "report.json", to_json(a).dump(2) + "\n");
}

std::vector<PairedExample> load_examples(const std::string& path, const char* what) {
  require_file(path, what);
  return load_pairs(path);
}

// --- subcommands -----------------------------------------------------------

int cmd_pretrain(const CommonOptions& o, const CLI::App& app, const std::string& pairs_path, std::ostream& out) {
  const TrainingConfig cfg = o.config(app);
  const auto pairs = load_examples(pairs_path, "pairs");
  const fs::path dir = o.output();
  const Pretrained p = pretrain_stage(pairs, cfg);
  write_jsonl(dir / "pretrain_log.jsonl", log_rows(p.log, cfg.seed));
  cfg.save(dir / "config.txt");
  save_checkpoint(dir / "pretrain.ckpt", p.model, p.vocab, {{"config", cfg.to_json()}, {"stage", "pretrain"}});
  out << "pretrained " << cfg.pretrain_steps << " steps on " << pairs.size() << " pairs -> "
      << (dir / "pretrain.ckpt").string() << '\n';
  return 0;
}

int cmd_finetune(const CommonOptions& o, const CLI::App& app, const std::string& train_path,
                 const std::string& ckpt_path, std::ostream& out) {
  const TrainingConfig cfg = o.config(app);
  const auto train = load_examples(train_path, "train");
  Pretrained base;
  if (!ckpt_path.empty()) {
    require_file(ckpt_path, "checkpoint");
    Checkpoint ck = load_checkpoint(ckpt_path);
    base.model = std::move(ck.model);
    base.vocab = std::move(ck.vocab);
  } else {
    TrainingConfig scratch = cfg;
    scratch.pretrain_steps = 0;
    base = pretrain_stage(train, scratch);
  }
  const LabelSpace labels = LabelSpace::from_examples(train, cfg.label_mode);
  base.model.reset_heads(labels.head_sizes());
  const fs::path dir = o.output();
  const auto result = finetune(base.model, base.vocab, train, labels, cfg);
  write_jsonl(dir / "finetune_log.jsonl", log_rows(result.history, cfg.seed));
  cfg.save(dir / "config.txt");
  save_checkpoint(dir / "finetune.ckpt", base.model, base.vocab,
                  {{"config", cfg.to_json()}, {"labels", labels_to_json(labels)}, {"stage", "finetune"}});
  out << "fine-tuned " << result.history.size() << " epochs, best validation " << result.best_val << " at epoch "
      << result.best_epoch << " -> " << (dir / "finetune.ckpt").string() << '\n';
  return 0;
}

int cmd_evaluate(const CommonOptions& o, const CLI::App& app, const std::string& test_path,
                 const std::string& ckpt_path, const std::string& label, std::ostream& out) {
  const TrainingConfig cfg = o.config(app);
  const auto test = load_examples(test_path, "test");
  require_file(ckpt_path, "checkpoint");
  const Checkpoint ck = load_checkpoint(ckpt_path);
  if (!ck.meta.contains("labels")) throw ConfigError("checkpoint has no classification labels; run finetune first");
  const LabelSpace labels = labels_from_json(ck.meta.at("labels"));
  std::vector<double> wers;
  for (const auto& ex : test) wers.push_back(ex.wer);
  EvalReport r = evaluate(ck.model, ck.vocab, test, labels, WerBuckets::named(cfg.buckets, wers), cfg.eval_batch);
  r.label = label;
  r.config = ck.meta.value("config", nlohmann::json::object());
  if (r.config.contains("seed")) r.seeds = {std::stoull(r.config["seed"].get<std::string>())};
  write_report(o.output(), r);
  out << to_table(r);
  return 0;
}

int cmd_ablate(const CommonOptions& o, const CLI::App& app, const std::string& name, const std::string& train_path,
               const std::string& test_path, const std::string& seeds_text, std::ostream& out) {
  const TrainingConfig base_cfg = apply_ablation(o.config(app), name);
  const auto train = load_examples(train_path, "train");
  const auto test = load_examples(test_path, "test");
  const auto seeds = seeds_text.empty() ? std::vector<std::uint64_t>{base_cfg.seed} : parse_seeds(seeds_text);
  const fs::path dir = o.output() / name;
  std::vector<EvalReport> reports;
  std::vector<nlohmann::json> pt_rows, ft_rows;
  for (auto seed : seeds) {
    TrainingConfig cfg = base_cfg;
    cfg.seed = seed;
    const Pretrained base = pretrain_stage(train, cfg);
    PipelineRun run = finetune_and_evaluate(base, train, test, cfg, name);
    for (auto& r : log_rows(run.pretrain_log, seed)) pt_rows.push_back(std::move(r));
    for (auto& r : log_rows(run.finetune_log, seed)) ft_rows.push_back(std::move(r));
    reports.push_back(std::move(run.report));
  }
  write_jsonl(dir / "pretrain_log.jsonl", pt_rows);
  write_jsonl(dir / "finetune_log.jsonl", ft_rows);
  base_cfg.save(dir / "config.txt");
  if (reports.size() == 1) {
    write_report(dir, reports.front());
    out << to_table(reports.front());
  } else {
    const AggregateReport a = aggregate(std::move(reports));
    write_report(dir, a);
    out << to_table(a);
  }
  return 0;
}

int cmd_synth(const std::string& input, const std::string& output, double target, double spread,
              std::uint64_t seed, std::ostream& out) {
  require_file(input, "input");
  if (output.empty()) throw UsageError("missing --output");
  NoiseConfig nc;
  nc.target_wer_median = target;
  nc.wer_spread = spread;
  nc.seed = seed;
  nc.validate();
  Rng rng(seed);
  const bool text_in = fs::path(input).extension() == ".txt";
  std::vector<PairedExample> examples;
  if (text_in) {
    std::size_t i = 0;
    for (auto& line : read_lines(input)) {
      PairedExample ex;
      ex.id = std::to_string(i++);
      ex.clean = line;
      ex.asr = line;
      examples.push_back(std::move(ex));
    }
  } else {
    examples = load_pairs(input);
  }
  std::vector<std::string> corpus;
  for (const auto& ex : examples) corpus.push_back(ex.clean);
  const NoiseChannel channel(corpus, nc);
  for (auto& ex : examples) {
    ex.asr = channel.apply(ex.clean, rng);
    ex.wer = tokenize(ex.clean).empty() ? 0.0 : wer(ex.clean, ex.asr);
  }
  if (fs::path(output).extension() == ".txt") {
    std::string text;
    for (const auto& ex : examples) text += ex.asr + '\n';
    write_text(output, text);
  } else {
    if (fs::path(output).has_parent_path()) fs::create_directories(fs::path(output).parent_path());
    save_pairs(output, examples);
  }
  double total = 0.0;
  for (const auto& ex : examples) total += ex.wer;
  out << "wrote " << examples.size() << " utterances, mean WER "
      << (examples.empty() ? 0.0 : total / static_cast<double>(examples.size())) << '\n';
  return 0;
}

int cmd_wer(const std::string& ref_path, const std::string& hyp_path, std::ostream& out) {
  require_file(ref_path, "ref");
  require_file(hyp_path, "hyp");
  const auto ref = read_lines(ref_path);
  const auto hyp = read_lines(hyp_path);
  if (ref.size() != hyp.size()) {
    throw ConfigError("ref has " + std::to_string(ref.size()) + " lines but hyp has " + std::to_string(hyp.size()));
  }
  std::size_t edits = 0, words = 0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    const EditCounts c = align_words(ref[i], hyp[i]);
    edits += c.edits();
    words += c.reference_length;
  }
  if (words == 0) throw DegenerateInputError("reference is empty");
  out << short_double(static_cast<double>(edits) / static_cast<double>(words)) << '\n';
  return 0;
}

int cmd_toy(std::size_t size, std::uint64_t seed, double noise_median, double label_noise, double test_fraction,
            const std::string& out_dir, std::ostream& out) {
  if (out_dir.empty()) throw UsageError("missing --out-dir");
  if (!(test_fraction >= 0.0 && test_fraction < 1.0)) throw ConfigError("--test-fraction must be in [0, 1)");
  ToyCorpusConfig tc;
  tc.size = size;
  tc.seed = seed;
  tc.label_noise = label_noise;
  const auto examples = noisy_toy_corpus(tc, noise_median);
  const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(examples.size())));
  const std::span<const PairedExample> all(examples);
  fs::create_directories(out_dir);
  save_pairs(fs::path(out_dir) / "train.jsonl", all.subspan(0, all.size() - n_test));
  if (n_test > 0) save_pairs(fs::path(out_dir) / "test.jsonl", all.subspan(all.size() - n_test));
  out << "wrote " << all.size() - n_test << " train and " << n_test << " test pairs to " << out_dir << '\n';
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Robust representation learning on noisy transcripts", "asrcl"};
  app.require_subcommand(1);

  CommonOptions o_pt, o_ft, o_ev, o_ab;
  std::string pairs_path, train_path, test_path, ckpt_path, label = "evaluate", ablation, seeds;
  std::string ft_train, ft_ckpt, ab_train, ab_test;

  auto* pt = app.add_subcommand("pretrain", "contrastive + MLM pre-training on paired transcripts");
  o_pt.attach(*pt);
  pt->add_option("--pairs", pairs_path, "JSONL pairs")->required();

  auto* ft = app.add_subcommand("finetune", "fine-tune classification heads and encoder");
  o_ft.attach(*ft);
  ft->add_option("--train", ft_train, "JSONL training examples")->required();
  ft->add_option("--checkpoint", ft_ckpt, "pre-trained checkpoint (default: random init)");

  auto* ev = app.add_subcommand("evaluate", "WER-bucketed accuracy report");
  o_ev.attach(*ev);
  ev->add_option("--test", test_path, "JSONL test examples")->required();
  ev->add_option("--checkpoint", ckpt_path, "fine-tuned checkpoint")->required();
  ev->add_option("--label", label, "report label");

  auto* ab = app.add_subcommand("ablate", "pre-train, fine-tune and evaluate one named loss configuration");
  o_ab.attach(*ab);
  ab->add_option("--name", ablation, "configuration name")
      ->required()
      ->check(CLI::IsMember(ablation_names()));
  ab->add_option("--train", ab_train, "JSONL training pairs")->required();
  ab->add_option("--test", ab_test, "JSONL test examples")->required();
  ab->add_option("--seeds", seeds, "comma-separated seeds; metrics are averaged");

  std::string synth_in, synth_out;
  double target = 0.25, spread = 1.0;
  std::uint64_t synth_seed = 1;
  auto* sy = app.add_subcommand("synth", "build a noisy corpus from clean text");
  sy->add_option("--input", synth_in, ".txt (one sentence per line) or JSONL")->required();
  sy->add_option("--output", synth_out, ".txt for noisy lines, otherwise JSONL pairs")->required();
  sy->add_option("--target-wer", target, "median per-utterance WER");
  sy->add_option("--spread", spread, "half-width of the per-utterance WER distribution, relative to the median");
  sy->add_option("--seed", synth_seed, "random seed");

  std::string ref_path, hyp_path;
  auto* we = app.add_subcommand("wer", "corpus WER of line-aligned files");
  we->add_option("--ref", ref_path, "reference transcripts")->required();
  we->add_option("--hyp", hyp_path, "hypotheses")->required();

  std::size_t toy_size = 6000;
  std::uint64_t toy_seed = 7;
  double toy_noise = 0.25, toy_label_noise = 0.0, toy_test = 0.2;
  std::string toy_out;
  auto* toy = app.add_subcommand("toy", "write the bundled toy corpus with synthetic ASR noise");
  toy->add_option("--size", toy_size, "number of utterances");
  toy->add_option("--seed", toy_seed, "random seed");
  toy->add_option("--noise-median", toy_noise, "median synthetic WER");
  toy->add_option("--label-noise", toy_label_noise, "fraction of relabeled utterances");
  toy->add_option("--test-fraction", toy_test, "held-out fraction written to test.jsonl");
  toy->add_option("--out-dir", toy_out, "directory for train.jsonl and test.jsonl")->required();

  std::vector<std::string> argv(args.rbegin(), args.rend());
  try {
    app.parse(argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "asrcl: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    if (pt->parsed()) return cmd_pretrain(o_pt, *pt, pairs_path, out);
    if (ft->parsed()) return cmd_finetune(o_ft, *ft, ft_train, ft_ckpt, out);
    if (ev->parsed()) return cmd_evaluate(o_ev, *ev, test_path, ckpt_path, label, out);
    if (ab->parsed()) return cmd_ablate(o_ab, *ab, ablation, ab_train, ab_test, seeds, out);
    if (sy->parsed()) return cmd_synth(synth_in, synth_out, target, spread, synth_seed, out);
    if (we->parsed()) return cmd_wer(ref_path, hyp_path, out);
    if (toy->parsed()) return cmd_toy(toy_size, toy_seed, toy_noise, toy_label_noise, toy_test, toy_out, out);
  } catch (const UsageError& e) {
    err << "asrcl: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "asrcl: error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace asrcl
