// SPDX-License-Identifier: Apache-2.0
// Acceptance suite. Prints one PASS/FAIL line per criterion and exits
// nonzero if any criterion fails. Pass criterion numbers to run a subset.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "asrcl/cli.hpp"
#include "asrcl/errors.hpp"
#include "asrcl/losses.hpp"
#include "helpers.hpp"
#include "oracles.hpp"

using namespace asrcl;
namespace fs = std::filesystem;
using testutil::to_tensor;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

/// Collects failed checks with a short description of each.
class Checker {
 public:
  void expect(bool ok, const std::string& what) {
    ++checks_;
    if (!ok && failures_.size() < 5) failures_.push_back(what);
    failed_ += ok ? 0 : 1;
  }
  void near(double got, double want, double tol, const std::string& what) {
    std::ostringstream s;
    s.precision(17);
    s << what << ": got " << got << " want " << want;
    expect(std::abs(got - want) <= tol, s.str());
  }
  Outcome outcome(std::string extra = "") const {
    Outcome o;
    o.pass = failed_ == 0;
    std::ostringstream s;
    s << checks_ - failed_ << "/" << checks_ << " checks";
    if (!extra.empty()) s << "; " << extra;
    for (const auto& f : failures_) s << "\n      " << f;
    o.detail = s.str();
    return o;
  }

 private:
  std::size_t checks_ = 0, failed_ = 0;
  std::vector<std::string> failures_;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v, int prec = 4) {
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(prec);
  s << v;
  return s.str();
}

// ---------------------------------------------------------------- 1

Outcome loss_oracles() {
  const auto t0 = std::chrono::steady_clock::now();
  Checker c;
  std::mt19937_64 rng(20240601);
  double worst = 0.0;
  auto cmp = [&](double got, double want, const std::string& what) {
    worst = std::max(worst, std::abs(got - want));
    c.near(got, want, 1e-9, what);
  };
  for (int b = 0; b < 100; ++b) {
    const std::size_t n = 1 + rng() % 8, d = 1 + rng() % 16, k = 2 + rng() % 4;
    const auto clean = oracle::random_mat(rng, n, d), asr = oracle::random_mat(rng, n, d);
    const auto logits = oracle::random_mat(rng, n, k, 2.0);
    auto prev = oracle::random_probs(rng, n, k);
    if (b % 4 == 0) {
      for (auto& row : prev) {
        std::fill(row.begin(), row.end(), 0.0);
        row[rng() % k] = 1.0;
      }
    }
    std::vector<int> y(n);
    for (auto& v : y) v = static_cast<int>(rng() % k);
    const std::string tag = "batch " + std::to_string(b);
    for (double tau : {0.2, 1.0, 5.0}) {
      Tape t;
      const Var vc = t.constant(to_tensor(clean)), va = t.constant(to_tensor(asr));
      cmp(pair_contrastive_loss({vc, va}, tau).item(), oracle::l_c(clean, asr, tau), tag + " l_c");
      cmp(distill_loss(t.constant(to_tensor(logits)), to_tensor(prev), tau).item(), oracle::l_d(logits, prev, tau),
          tag + " l_d");
      if (n >= 2) {
        cmp(hard_contrastive_loss(vc, y, tau).item(), oracle::l_hard(clean, y, tau), tag + " l_hard");
        cmp(soft_contrastive_loss(vc, to_tensor(prev), tau).item(), oracle::l_soft(clean, prev, tau), tag + " l_soft");
      }
    }
    Tape t;
    cmp(mlm_loss(t.constant(to_tensor(logits)), y).item(), oracle::cross_entropy_mean(logits, y), tag + " l_mlm");
  }
  const double secs = seconds_since(t0);
  c.expect(secs < 10.0, "runtime " + fmt(secs, 2) + " s");
  return c.outcome("max abs diff " + std::to_string(worst) + ", " + fmt(secs, 2) + " s");
}

// ---------------------------------------------------------------- 2

Outcome gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  Checker c;
  const std::vector<std::string> clean_text = {"turn on the kitchen light", "play some jazz music",
                                               "set an alarm for six", "what is the weather today"};
  const std::vector<std::string> asr_text = {"turn on the kitchen night", "play sum jazz music", "set alarm for sex",
                                             "what is weather today"};
  std::vector<std::string> all = clean_text;
  all.insert(all.end(), asr_text.begin(), asr_text.end());
  const Vocab vocab = build_vocab(all);
  EncoderConfig ec;
  ec.vocab_size = vocab.size();
  ec.d_model = 8;
  ec.n_layers = 1;
  ec.n_heads = 2;
  ec.d_ff = 16;
  ec.max_len = 16;
  ec.dropout = 0.0;
  ec.head_sizes = {3};
  Model model(ec, 42);
  Rng init(43);
  std::normal_distribution<double> nd(0.0, 0.5);
  for (double& w : model.heads[0].weight.value.values) w = nd(init);

  std::vector<TokenSeq> clean, asr;
  for (const auto& s : clean_text) clean.push_back(encode(s, vocab, ec.max_len));
  for (const auto& s : asr_text) asr.push_back(encode(s, vocab, ec.max_len));
  std::vector<TokenSeq> masked;
  std::vector<MaskedPosition> positions;
  std::vector<int> targets;
  Rng mask_rng(44);
  for (std::size_t i = 0; i < clean.size(); ++i) {
    MaskedSeq m = apply_mlm_mask(clean[i], 0.4, vocab.size(), mask_rng);
    for (std::size_t k = 0; k < m.positions.size(); ++k) {
      positions.push_back({i, m.positions[k]});
      targets.push_back(m.targets[k]);
    }
    masked.push_back(m.seq);
  }
  const std::vector<int> labels = {0, 0, 1, 2};
  std::mt19937_64 prng(45);
  const Tensor prev = to_tensor(oracle::random_probs(prng, 4, 3));

  auto reps = [&](Tape& t, const std::vector<TokenSeq>& seqs) {
    Rng r(0);
    return encode_batch(t, model, seqs, false, r);
  };
  auto l_c = [&](Tape& t) { return pair_contrastive_loss({reps(t, clean), reps(t, asr)}, 0.2); };
  auto l_mlm = [&](Tape& t) {
    Rng r(0);
    const EncodedBatch enc = forward(t, model, masked, false, r);
    return mlm_loss(mlm_logits(t, model, enc, masked, positions), targets);
  };
  auto l_hard = [&](Tape& t) { return hard_contrastive_loss(reps(t, asr), labels, 0.2); };
  auto l_soft = [&](Tape& t) { return soft_contrastive_loss(reps(t, asr), prev, 0.2); };
  auto l_d = [&](Tape& t) { return distill_loss(classify(t, model, reps(t, asr))[0], prev, 5.0); };
  auto l_pt = [&](Tape& t) { return pretrain_loss(l_c(t), l_mlm(t), 1.0); };
  auto l_ft = [&](Tape& t) {
    const Var h = reps(t, asr);
    const Var z = classify(t, model, h)[0];
    return finetune_loss(ops::cross_entropy(z, labels), distill_loss(z, prev, 5.0), hard_contrastive_loss(h, labels, 0.2),
                         soft_contrastive_loss(h, prev, 0.2), LossWeights{});
  };

  // the trainer's own L_ft assembly, cache included
  const LabelSpace ls = LabelSpace::from_names(LabelMode::kSingle, {{"a", "b", "c"}});
  std::vector<PairedExample> ex(4);
  for (std::size_t i = 0; i < 4; ++i) {
    ex[i].id = "g" + std::to_string(i);
    ex[i].clean = clean_text[i];
    ex[i].asr = asr_text[i];
    ex[i].label = ls.names()[0][static_cast<std::size_t>(labels[i])];
  }
  const auto items = make_items(ex, ls, vocab, ec.max_len, FinetuneData::kAsr);
  std::vector<const TrainItem*> batch;
  for (const auto& it : items) batch.push_back(&it);
  const PredictionCache cache = snapshot_predictions(model, items, 5.0);
  TrainingConfig cfg;
  cfg.dropout = 0.0;
  auto l_ft_trainer = [&](Tape& t) {
    Rng r(0);
    return finetune_terms(t, model, batch, cache, cfg, r).l_ft;
  };

  auto params = model.parameters();
  std::ostringstream worst;
  const std::vector<std::pair<std::string, std::function<Var(Tape&)>>> cases = {
      {"l_c", l_c},   {"l_mlm", l_mlm}, {"l_hard", l_hard}, {"l_soft", l_soft},
      {"l_d", l_d},   {"L_pt", l_pt},   {"L_ft", l_ft},     {"L_ft(trainer)", l_ft_trainer}};
  for (const auto& [name, fn] : cases) {
    const double err = grad_check_params(fn, params, 1e-5);
    c.expect(err < 1e-4, name + " rel err " + std::to_string(err));
    worst << name << "=" << std::scientific << std::setprecision(1) << err << " ";
  }
  const double secs = seconds_since(t0);
  c.expect(secs < 60.0, "runtime " + fmt(secs, 2) + " s");
  return c.outcome(worst.str() + fmt(secs, 2) + " s");
}

// ---------------------------------------------------------------- 3

Outcome closed_forms() {
  Checker c;
  Tape t;
  c.near(pair_contrastive_loss({t.constant(to_tensor({{0.3, 1.2}})), t.constant(to_tensor({{-2.0, 0.5}}))}, 1.0).item(),
         0.0, 1e-9, "l_c N=1");
  c.near(pair_contrastive_loss({t.constant(to_tensor({{1, 0, 0, 0}, {0, 1, 0, 0}})),
                                t.constant(to_tensor({{0, 0, 1, 0}, {0, 0, 0, 1}}))},
                               1.0)
             .item(),
         std::log(3.0), 1e-9, "l_c orthogonal N=2");
  c.near(hard_contrastive_loss(t.constant(to_tensor({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}})), std::vector<int>{0, 0, 1}, 1.0)
             .item(),
         2.0 / 3.0 * std::log(2.0), 1e-9, "l_hard (A,A,B)");
  c.near(distill_loss(t.constant(to_tensor({{0.0, 0.0}})), to_tensor({{1.0, 0.0}}), 1.0).item(), std::log(2.0), 1e-9,
         "KL(one-hot||uniform)");
  return c.outcome();
}

// ---------------------------------------------------------------- 4

Outcome weighting() {
  Checker c;
  const TrainingConfig cfg;
  const LossWeights& w = cfg.weights;
  c.expect(w.lambda_mlm == 1.0 && w.lambda_sc == 0.1 && w.lambda_d == 10.0 && w.tau_c == 0.2 && w.tau_sc == 0.2 &&
               w.tau_d == 5.0 && cfg.mask_ratio == 0.15,
           "default hyperparameters");
  Tape t;
  const Var one = t.constant(Tensor::scalar(1.0));
  const double l_ft = finetune_loss(one, one, one, one, w).item();
  c.near(l_ft, 12.1, 1e-12, "L_ft of unit losses");
  c.near(pretrain_loss(one, one, w.lambda_mlm).item(), 2.0, 0.0, "L_pt of unit losses");

  std::string text;
  for (int i = 0; i < 10; ++i) text += "w" + std::to_string(i) + " ";
  const Vocab v = build_vocab(std::vector<std::string>{text});
  const TokenSeq seq = encode(text, v, 16);
  Rng rng(1500);
  std::size_t selected = 0;
  for (int s = 0; s < 1000; ++s) selected += apply_mlm_mask(seq, cfg.mask_ratio, v.size(), rng).positions.size();
  const double sigma = std::sqrt(10000 * 0.15 * 0.85);
  c.expect(std::abs(static_cast<double>(selected) - 1500.0) <= 3 * sigma,
           "masked " + std::to_string(selected) + " of 10000");
  return c.outcome("L_ft=" + fmt(l_ft, 12) + ", masked " + std::to_string(selected) + "/10000 (3 sigma = " +
                   fmt(3 * sigma, 1) + ")");
}

// ---------------------------------------------------------------- 5

std::string join(const std::vector<std::string>& w) {
  std::string s;
  for (const auto& x : w) s += (s.empty() ? "" : " ") + x;
  return s;
}

Outcome wer_oracle() {
  Checker c;
  std::mt19937_64 rng(5);
  const std::vector<std::string> alphabet = {"on", "off", "the", "light", "lights"};
  for (int i = 0; i < 500; ++i) {
    std::vector<std::string> r(1 + rng() % 8), h(rng() % 9);
    for (auto& w : r) w = alphabet[rng() % alphabet.size()];
    for (auto& w : h) w = alphabet[rng() % alphabet.size()];
    const double want = static_cast<double>(oracle::levenshtein(r, 0, h, 0)) / static_cast<double>(r.size());
    c.expect(wer(join(r), join(h)) == want, "pair " + std::to_string(i) + ": " + join(r) + " | " + join(h));
  }
  const WerBuckets g = WerBuckets::google();
  auto name = [&](double w) { return g.intervals()[g.index_of(w)].name; };
  c.expect(name(0.0) == "clean", "0 -> " + name(0.0));
  c.expect(name(0.16) == "low", "0.16 -> " + name(0.16));
  c.expect(name(0.41) == "high", "0.41 -> " + name(0.41));
  return c.outcome("500 random pairs, buckets 0/0.16/0.41 -> " + name(0.0) + "/" + name(0.16) + "/" + name(0.41));
}

// ---------------------------------------------------------------- 6

Outcome noise_calibration() {
  Checker c;
  const auto toy = toy_corpus({2000, 7, 0.0});
  std::vector<std::string> texts;
  for (const auto& e : toy) texts.push_back(e.clean);
  NoiseConfig cfg;
  cfg.target_wer_median = 0.25;
  const NoiseChannel ch(texts, cfg);
  auto noisy = toy;
  Rng rng(8);
  corrupt(noisy, ch, rng);
  std::vector<double> w;
  for (const auto& e : noisy) w.push_back(e.wer);
  std::sort(w.begin(), w.end());
  const double med = 0.5 * (w[w.size() / 2 - 1] + w[w.size() / 2]);
  c.near(med, 0.25, 0.05, "median WER");

  NoiseConfig zero;
  zero.target_wer_median = 0.0;
  const NoiseChannel identity(texts, zero);
  Rng rng0(9);
  std::size_t changed = 0;
  for (const auto& e : toy) changed += identity.apply(e.clean, rng0) != e.clean;
  c.expect(changed == 0, std::to_string(changed) + " sentences changed at target 0");
  return c.outcome("median " + fmt(med) + " over 2000 sentences, target 0 changed " + std::to_string(changed));
}

// ---------------------------------------------------------------- 7

std::vector<double> bucket_values(const EvalReport& r) {
  std::vector<double> v;
  for (const auto& b : r.buckets) v.push_back(b.accuracy);
  return v;
}

struct Gap {
  double mean = 0.0;
  std::vector<double> per_bucket;
  bool widens = false;  // gap(highest bucket) >= gap(lowest bucket)
  bool monotone = false;
};

Gap gap_between(const EvalReport& better, const EvalReport& worse) {
  Gap g;
  g.mean = better.primary() - worse.primary();
  const auto a = bucket_values(better), b = bucket_values(worse);
  std::vector<double> present;
  for (std::size_t i = 0; i < a.size(); ++i) {
    g.per_bucket.push_back(a[i] - b[i]);
    if (!std::isnan(a[i] - b[i])) present.push_back(a[i] - b[i]);
  }
  g.widens = present.size() >= 2 && present.back() >= present.front();
  g.monotone = g.widens && std::is_sorted(present.begin(), present.end());
  return g;
}

std::string describe(const Gap& g) {
  std::string s = "gap " + fmt(g.mean) + " [";
  for (std::size_t i = 0; i < g.per_bucket.size(); ++i) s += (i ? " " : "") + fmt(g.per_bucket[i], 3);
  return s + "]" + (g.monotone ? " monotone" : g.widens ? " widens" : " narrows");
}

Outcome direction() {
  const auto t0 = std::chrono::steady_clock::now();
  Checker c;
  ToyCorpusConfig tc;
  tc.size = 6250;
  tc.seed = 7;
  const auto corpus = noisy_toy_corpus(tc, 0.25);
  const std::span<const PairedExample> all(corpus);
  const auto train = all.subspan(0, 5000), test = all.subspan(5000);
  std::set<std::string> intents;
  for (const auto& e : train) intents.insert(e.label);
  c.expect(intents.size() >= 10, "intents " + std::to_string(intents.size()));

  TrainingConfig base;
  base.label_mode = LabelMode::kSingle;
  base.pretrain_steps = 1000;
  base.finetune_epochs = 15;

  std::vector<Gap> gap_a, gap_b;
  std::ostringstream runs;
  for (std::uint64_t seed : {1, 2, 3}) {
    TrainingConfig cfg = base;
    cfg.seed = seed;
    const TrainingConfig mlm_cfg = apply_ablation(cfg, "mlm_only_ce");
    const TrainingConfig ce_cfg = apply_ablation(cfg, "ce_finetune");
    const Pretrained mlm = pretrain_stage(train, mlm_cfg);
    const Pretrained proposed = pretrain_stage(train, cfg);
    const EvalReport r_mlm = finetune_and_evaluate(mlm, train, test, mlm_cfg, "mlm_only_ce").report;
    const EvalReport r_ce = finetune_and_evaluate(proposed, train, test, ce_cfg, "ce_finetune").report;
    const EvalReport r_full = finetune_and_evaluate(proposed, train, test, cfg, "full").report;
    gap_a.push_back(gap_between(r_ce, r_mlm));
    gap_b.push_back(gap_between(r_full, r_ce));
    runs << "\n      seed " << seed << ": mlm+ce " << fmt(r_mlm.primary()) << ", proposed+ce " << fmt(r_ce.primary())
         << ", proposed+proposed " << fmt(r_full.primary()) << "; (a) " << describe(gap_a.back()) << "; (b) "
         << describe(gap_b.back());
    std::cout << "    [7] seed " << seed << " done after " << fmt(seconds_since(t0), 0) << " s" << std::endl;
  }
  auto summarize = [&](const std::vector<Gap>& gaps, const std::string& name) {
    double mean = 0.0;
    int widening = 0;
    for (const auto& g : gaps) {
      mean += g.mean / static_cast<double>(gaps.size());
      widening += g.widens ? 1 : 0;
    }
    c.expect(mean >= 0.0, name + " mean margin " + fmt(mean));
    c.expect(widening >= 2, name + " gap widens in " + std::to_string(widening) + "/3 seeds");
    return name + " mean margin " + fmt(mean) + ", widens " + std::to_string(widening) + "/3";
  };
  const std::string sa = summarize(gap_a, "(a)"), sb = summarize(gap_b, "(b)");
  const double secs = seconds_since(t0);
  c.expect(secs < 900.0, "runtime " + fmt(secs, 0) + " s");
  return c.outcome(sa + "; " + sb + "; " + fmt(secs, 0) + " s" + runs.str());
}

// ---------------------------------------------------------------- 8

struct Captured {
  int code;
  std::string out, err;
};

Captured cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

Outcome ablations() {
  Checker c;
  const fs::path dir = testutil::temp_dir("acceptance_ablate");
  const std::string data = (dir / "data").string();
  c.expect(cli({"toy", "--out-dir", data, "--size", "400"}).code == 0, "toy corpus");
  const std::vector<std::string> names = {"no_mlm", "no_c", "no_hard_soft", "no_d_soft", "no_soft"};
  std::set<std::string> labels, reports;
  for (const auto& name : names) {
    const auto r = cli({"ablate", "--name", name, "--train", data + "/train.jsonl", "--test", data + "/test.jsonl",
                        "--out-dir", (dir / "runs").string(), "--pretrain-steps", "20", "--finetune-epochs", "2",
                        "--d-model", "16", "--n-heads", "2", "--d-ff", "32", "--n-layers", "1"});
    c.expect(r.code == 0, name + " exit " + std::to_string(r.code) + " " + r.err);
    const fs::path run = dir / "runs" / name;
    c.expect(fs::exists(run / "report.json") && fs::exists(run / "report.csv"), name + " report files");
    if (!fs::exists(run / "report.json")) continue;
    const auto report = nlohmann::json::parse(slurp(run / "report.json"));
    labels.insert(report.value("label", ""));
    reports.insert(slurp(run / "report.json"));
  }
  c.expect(labels.size() == names.size(), "distinct labels " + std::to_string(labels.size()));
  c.expect(reports.size() == names.size(), "distinct reports " + std::to_string(reports.size()));

  std::size_t rows = 0;
  bool zero = true;
  std::ifstream log(dir / "runs" / "no_d_soft" / "finetune_log.jsonl");
  for (std::string line; std::getline(log, line);) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    ++rows;
    zero = zero && j.at("l_d").get<double>() == 0.0 && j.at("l_soft").get<double>() == 0.0;
  }
  c.expect(rows > 0 && zero, "no_d_soft l_d/l_soft columns zero over " + std::to_string(rows) + " rows");
  return c.outcome("5 configurations, " + std::to_string(labels.size()) + " distinct labels, no_d_soft log rows " +
                   std::to_string(rows) + " with l_d = l_soft = 0");
}

// ---------------------------------------------------------------- 9

Outcome determinism() {
  Checker c;
  const fs::path dir = testutil::temp_dir("acceptance_determinism");
  const std::string data = (dir / "data").string();
  c.expect(cli({"toy", "--out-dir", data, "--size", "500"}).code == 0, "toy corpus");
  for (const char* run : {"a", "b"}) {
    const auto r = cli({"pretrain", "--pairs", data + "/train.jsonl", "--out-dir", (dir / run).string(),
                        "--pretrain-steps", "200", "--seed", "13", "--d-model", "32", "--d-ff", "64"});
    c.expect(r.code == 0, std::string("run ") + run + " exit " + std::to_string(r.code) + " " + r.err);
  }
  const std::string log_a = slurp(dir / "a" / "pretrain_log.jsonl"), log_b = slurp(dir / "b" / "pretrain_log.jsonl");
  const std::string ck_a = slurp(dir / "a" / "pretrain.ckpt"), ck_b = slurp(dir / "b" / "pretrain.ckpt");
  c.expect(!log_a.empty() && log_a == log_b, "loss logs identical");
  c.expect(!ck_a.empty() && ck_a == ck_b, "checkpoints identical");
  const auto lines = std::count(log_a.begin(), log_a.end(), '\n');
  return c.outcome(std::to_string(lines) + " log lines, " + std::to_string(ck_a.size()) + " checkpoint bytes, identical");
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"loss oracles", loss_oracles},
      {"gradient checks", gradients},
      {"closed-form values", closed_forms},
      {"loss weighting and mask rate", weighting},
      {"WER oracle and buckets", wer_oracle},
      {"noise calibration", noise_calibration},
      {"directional toy experiment", direction},
      {"ablation CLI", ablations},
      {"determinism", determinism}};
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += o.pass ? 0 : 1;
    std::cout << "criterion " << id << " " << (o.pass ? "PASS" : "FAIL") << ": " << criteria[i].first << " -- "
              << o.detail << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
