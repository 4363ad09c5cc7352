// SPDX-License-Identifier: Apache-2.0
#include "asrcl/eval.hpp"

#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "asrcl/errors.hpp"

namespace asrcl {

namespace {

template <class T>
void check_lengths(std::span<const T> pred, std::span<const T> gold) {
  if (pred.size() != gold.size()) {
    throw std::invalid_argument("prediction and gold lists differ in length (" + std::to_string(pred.size()) +
                                " vs " + std::to_string(gold.size()) + ")");
  }
  if (gold.empty()) throw std::invalid_argument("empty prediction list");
}

double ratio(std::size_t num, std::size_t den) {
  if (den == 0) return std::numeric_limits<double>::quiet_NaN();
  return static_cast<double>(num) / static_cast<double>(den);
}

std::string num(double v) {
  if (std::isnan(v)) return "";
  std::ostringstream os;
  os << std::setprecision(6) << std::fixed << v;
  return os.str();
}

nlohmann::json num_json(double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); }

}  // namespace

double joint_accuracy(std::span<const std::pair<int, int>> pred, std::span<const std::pair<int, int>> gold) {
  check_lengths(pred, gold);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) hit += pred[i] == gold[i] ? 1 : 0;
  return ratio(hit, gold.size());
}

double accuracy(std::span<const int> pred, std::span<const int> gold) {
  check_lengths(pred, gold);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) hit += pred[i] == gold[i] ? 1 : 0;
  return ratio(hit, gold.size());
}

EvalReport evaluate(const Model& model, const Vocab& vocab, std::span<const PairedExample> examples,
                    const LabelSpace& labels, const WerBuckets& buckets, std::size_t batch_size) {
  if (examples.empty()) throw ConfigError("evaluate: empty example list");
  if (model.config().head_sizes != labels.head_sizes()) {
    throw ConfigError("evaluate: model heads do not match the label space");
  }
  const std::size_t heads = labels.num_heads();
  std::vector<TokenSeq> seqs;
  std::vector<std::vector<int>> gold;
  seqs.reserve(examples.size());
  for (const auto& ex : examples) {
    seqs.push_back(encode(ex.asr, vocab, model.config().max_len));
    gold.push_back(labels.encode(ex));
  }
  const auto pred = predict(model, seqs, batch_size);

  // per example: number of correct heads, all heads correct
  std::vector<std::size_t> right(examples.size());
  std::vector<bool> exact(examples.size());
  EvalReport r;
  r.n = examples.size();
  r.head_accuracy.assign(heads, 0.0);
  for (std::size_t i = 0; i < examples.size(); ++i) {
    for (std::size_t h = 0; h < heads; ++h) {
      const bool ok = pred[i][h] == gold[i][h];
      right[i] += ok ? 1 : 0;
      r.head_accuracy[h] += ok ? 1.0 : 0.0;
    }
    exact[i] = right[i] == heads;
  }
  for (double& a : r.head_accuracy) a /= static_cast<double>(r.n);

  const bool two_heads = heads == 2;
  auto score = [&](const std::vector<std::size_t>& members, BucketRow& row) {
    row.n = members.size();
    std::size_t heads_right = 0, all_right = 0;
    for (auto i : members) {
      heads_right += right[i];
      all_right += exact[i] ? 1 : 0;
    }
    row.accuracy = ratio(heads_right, row.n * heads);
    if (two_heads) row.joint_accuracy = ratio(all_right, row.n);
  };

  std::vector<std::size_t> all(examples.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  BucketRow overall;
  score(all, overall);
  r.accuracy = overall.accuracy;
  r.joint_accuracy = overall.joint_accuracy;
  for (const auto& b : bucketize(examples, buckets)) {
    BucketRow row;
    row.name = b.name;
    score(b.members, row);
    r.buckets.push_back(std::move(row));
  }
  return r;
}

AggregateReport aggregate(std::vector<EvalReport> runs) {
  if (runs.empty()) throw ConfigError("aggregate: no runs");
  AggregateReport a;
  a.mean = runs.front();
  const double k = static_cast<double>(runs.size());
  auto mean_std = [&](auto get) {
    double s = 0.0, s2 = 0.0;
    std::size_t m = 0;
    for (const auto& r : runs) {
      const double v = get(r);
      if (std::isnan(v)) continue;
      s += v;
      ++m;
    }
    if (m == 0) return std::pair{std::numeric_limits<double>::quiet_NaN(), 0.0};
    const double mu = s / static_cast<double>(m);
    for (const auto& r : runs) {
      const double v = get(r);
      if (!std::isnan(v)) s2 += (v - mu) * (v - mu);
    }
    return std::pair{mu, m > 1 ? std::sqrt(s2 / static_cast<double>(m - 1)) : 0.0};
  };
  for (const auto& r : runs) {
    if (r.buckets.size() != a.mean.buckets.size() || r.head_accuracy.size() != a.mean.head_accuracy.size()) {
      throw ConfigError("aggregate: runs have different layouts");
    }
  }
  std::tie(a.mean.accuracy, a.accuracy_std) = mean_std([](const EvalReport& r) { return r.accuracy; });
  if (a.mean.joint_accuracy) {
    auto [m, s] = mean_std([](const EvalReport& r) { return r.joint_accuracy.value_or(0.0); });
    a.mean.joint_accuracy = m;
    a.joint_accuracy_std = s;
  }
  for (std::size_t h = 0; h < a.mean.head_accuracy.size(); ++h) {
    a.mean.head_accuracy[h] = mean_std([h](const EvalReport& r) { return r.head_accuracy[h]; }).first;
  }
  double n_total = 0.0;
  for (const auto& r : runs) n_total += static_cast<double>(r.n);
  a.mean.n = static_cast<std::size_t>(std::llround(n_total / k));
  for (std::size_t b = 0; b < a.mean.buckets.size(); ++b) {
    auto& row = a.mean.buckets[b];
    double nb = 0.0;
    for (const auto& r : runs) nb += static_cast<double>(r.buckets[b].n);
    row.n = static_cast<std::size_t>(std::llround(nb / k));
    row.accuracy = mean_std([b](const EvalReport& r) { return r.buckets[b].accuracy; }).first;
    if (row.joint_accuracy) {
      row.joint_accuracy = mean_std([b](const EvalReport& r) { return *r.buckets[b].joint_accuracy; }).first;
    }
    a.bucket_std.push_back(mean_std([b](const EvalReport& r) {
                             const auto& x = r.buckets[b];
                             return x.joint_accuracy ? *x.joint_accuracy : x.accuracy;
                           }).second);
  }
  a.mean.seeds.clear();
  for (const auto& r : runs) a.mean.seeds.insert(a.mean.seeds.end(), r.seeds.begin(), r.seeds.end());
  a.runs = std::move(runs);
  return a;
}

std::string to_csv(const EvalReport& r) {
  const bool joint = r.joint_accuracy.has_value();
  std::ostringstream os;
  os << "bucket,n,accuracy" << (joint ? ",joint_accuracy" : "") << '\n';
  os << "all," << r.n << ',' << num(r.accuracy);
  if (joint) os << ',' << num(*r.joint_accuracy);
  os << '\n';
  for (const auto& b : r.buckets) {
    os << b.name << ',' << b.n << ',' << num(b.accuracy);
    if (joint) os << ',' << num(b.joint_accuracy.value_or(std::numeric_limits<double>::quiet_NaN()));
    os << '\n';
  }
  return os.str();
}

nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j;
  j["label"] = r.label;
  j["n"] = r.n;
  j["accuracy"] = num_json(r.accuracy);
  if (r.joint_accuracy) j["joint_accuracy"] = num_json(*r.joint_accuracy);
  j["head_accuracy"] = r.head_accuracy;
  auto rows = nlohmann::json::array();
  for (const auto& b : r.buckets) {
    nlohmann::json row{{"bucket", b.name}, {"n", b.n}, {"accuracy", num_json(b.accuracy)}};
    if (b.joint_accuracy) row["joint_accuracy"] = num_json(*b.joint_accuracy);
    rows.push_back(std::move(row));
  }
  j["buckets"] = std::move(rows);
  j["config"] = r.config;
  j["seeds"] = r.seeds;
  return j;
}

nlohmann::json to_json(const AggregateReport& a) {
  nlohmann::json j = to_json(a.mean);
  j["accuracy_std"] = a.accuracy_std;
  if (a.joint_accuracy_std) j["joint_accuracy_std"] = *a.joint_accuracy_std;
  for (std::size_t b = 0; b < a.bucket_std.size(); ++b) j["buckets"][b]["std"] = a.bucket_std[b];
  auto runs = nlohmann::json::array();
  for (const auto& r : a.runs) runs.push_back(to_json(r));
  j["runs"] = std::move(runs);
  return j;
}

namespace {

std::string table(const EvalReport& r, const std::vector<double>* bucket_std, std::optional<double> overall_std) {
  const bool joint = r.joint_accuracy.has_value();
  std::ostringstream os;
  os << (r.label.empty() ? "report" : r.label) << '\n';
  os << std::left << std::setw(12) << "bucket" << std::right << std::setw(8) << "n" << std::setw(12) << "accuracy";
  if (joint) os << std::setw(12) << "joint";
  if (bucket_std) os << std::setw(10) << "std";
  os << '\n';
  auto line = [&](const std::string& name, std::size_t n, double acc, std::optional<double> j, double sd) {
    os << std::left << std::setw(12) << name << std::right << std::setw(8) << n << std::setw(12) << num(acc);
    if (joint) os << std::setw(12) << num(j.value_or(std::numeric_limits<double>::quiet_NaN()));
    if (bucket_std) os << std::setw(10) << num(sd);
    os << '\n';
  };
  line("all", r.n, r.accuracy, r.joint_accuracy, overall_std.value_or(0.0));
  for (std::size_t b = 0; b < r.buckets.size(); ++b) {
    const auto& row = r.buckets[b];
    line(row.name, row.n, row.accuracy, row.joint_accuracy, bucket_std ? (*bucket_std)[b] : 0.0);
  }
  return os.str();
}

}  // namespace

std::string to_table(const EvalReport& r) { return table(r, nullptr, std::nullopt); }

std::string to_table(const AggregateReport& a) {
  return table(a.mean, &a.bucket_std, a.joint_accuracy_std ? a.joint_accuracy_std : a.accuracy_std);
}

}  // namespace asrcl
