// SPDX-License-Identifier: Apache-2.0
#include "asrcl/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>

#include <nlohmann/json.hpp>

#include "asrcl/errors.hpp"
#include "asrcl/textproc.hpp"

namespace asrcl {

// ---------------------------------------------------------------------------
// labels

LabelSpace LabelSpace::from_names(LabelMode mode, std::vector<std::vector<std::string>> names) {
  LabelSpace ls;
  ls.mode_ = mode;
  const std::size_t heads = mode == LabelMode::kSingle ? 1 : 2;
  if (names.size() != heads) throw ConfigError("label space: wrong number of heads");
  ls.names_ = std::move(names);
  for (const auto& head : ls.names_) {
    if (head.empty()) throw ConfigError("label space: head without classes");
    std::unordered_map<std::string, int> idx;
    for (std::size_t i = 0; i < head.size(); ++i) idx.emplace(head[i], static_cast<int>(i));
    ls.index_.push_back(std::move(idx));
  }
  return ls;
}

LabelSpace LabelSpace::from_examples(std::span<const PairedExample> examples, LabelMode mode) {
  if (examples.empty()) throw ConfigError("label space: no examples");
  std::vector<std::set<std::string>> seen(mode == LabelMode::kSingle ? 1 : 2);
  for (const auto& ex : examples) {
    if (mode == LabelMode::kSingle) {
      if (ex.label.empty()) throw ConfigError("example '" + ex.id + "' has no label");
      seen[0].insert(ex.label);
    } else {
      if (ex.scenario.empty() || ex.action.empty()) {
        throw ConfigError("example '" + ex.id + "' lacks scenario/action");
      }
      seen[0].insert(ex.scenario);
      seen[1].insert(ex.action);
    }
  }
  std::vector<std::vector<std::string>> names;
  for (auto& s : seen) names.emplace_back(s.begin(), s.end());
  return from_names(mode, std::move(names));
}

std::vector<std::size_t> LabelSpace::head_sizes() const {
  std::vector<std::size_t> out;
  for (const auto& h : names_) out.push_back(h.size());
  return out;
}

std::vector<int> LabelSpace::encode(const PairedExample& ex) const {
  auto lookup = [&](std::size_t head, const std::string& name) {
    auto it = index_[head].find(name);
    if (it == index_[head].end()) {
      throw IndexError("unknown label '" + name + "' for example '" + ex.id + "'");
    }
    return it->second;
  };
  if (mode_ == LabelMode::kSingle) return {lookup(0, ex.label)};
  return {lookup(0, ex.scenario), lookup(1, ex.action)};
}

int LabelSpace::joint(std::span<const int> per_head) const {
  int j = 0;
  for (std::size_t h = 0; h < per_head.size(); ++h) j = j * static_cast<int>(names_[h].size()) + per_head[h];
  return j;
}

// ---------------------------------------------------------------------------
// file format

std::vector<PairedExample> load_pairs(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<PairedExample> out;
  std::string line;
  std::size_t lineno = 0;
  auto fail = [&](const std::string& msg) {
    throw ParseError(path.string() + ":" + std::to_string(lineno) + ": " + msg);
  };
  auto text_field = [&](const nlohmann::json& j, const char* key) -> std::string {
    if (!j.contains(key) || j[key].is_null()) return {};
    if (!j[key].is_string()) fail(std::string("field '") + key + "' must be a string");
    return j[key].get<std::string>();
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      fail(std::string("invalid JSON: ") + e.what());
    }
    if (!j.is_object()) fail("record must be a JSON object");
    PairedExample ex;
    if (j.contains("id") && j["id"].is_number_integer()) {
      ex.id = std::to_string(j["id"].get<long long>());
    } else {
      ex.id = text_field(j, "id");
    }
    if (ex.id.empty()) ex.id = std::to_string(out.size());
    ex.clean = text_field(j, "clean");
    if (tokenize(ex.clean).empty()) fail("missing or empty 'clean' transcript");
    ex.asr = j.contains("asr") ? text_field(j, "asr") : ex.clean;
    ex.scenario = text_field(j, "scenario");
    ex.action = text_field(j, "action");
    ex.label = text_field(j, "label");
    if (ex.label.empty() && !ex.scenario.empty() && !ex.action.empty()) {
      ex.label = ex.scenario + "_" + ex.action;
    }
    ex.wer = wer(ex.clean, ex.asr);
    out.push_back(std::move(ex));
  }
  return out;
}

void save_pairs(const std::filesystem::path& path, std::span<const PairedExample> examples) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& ex : examples) {
    nlohmann::json j{{"id", ex.id}, {"clean", ex.clean}, {"asr", ex.asr}};
    if (!ex.label.empty()) j["label"] = ex.label;
    if (!ex.scenario.empty()) j["scenario"] = ex.scenario;
    if (!ex.action.empty()) j["action"] = ex.action;
    out << j.dump() << '\n';
  }
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

// ---------------------------------------------------------------------------
// WER

EditCounts align_words(std::string_view reference, std::string_view hypothesis) {
  const auto ref = tokenize(reference);
  const auto hyp = tokenize(hypothesis);
  const std::size_t n = ref.size(), m = hyp.size();
  // cost[i][j]: edits aligning ref[0..i) with hyp[0..j)
  std::vector<std::size_t> cost((n + 1) * (m + 1));
  auto at = [&](std::size_t i, std::size_t j) -> std::size_t& { return cost[i * (m + 1) + j]; };
  for (std::size_t i = 0; i <= n; ++i) at(i, 0) = i;
  for (std::size_t j = 0; j <= m; ++j) at(0, j) = j;
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      const std::size_t diag = at(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
      at(i, j) = std::min({diag, at(i - 1, j) + 1, at(i, j - 1) + 1});
    }
  }
  EditCounts c;
  c.reference_length = n;
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 && at(i, j) == at(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1)) {
      if (ref[i - 1] != hyp[j - 1]) ++c.substitutions;
      --i, --j;
    } else if (i > 0 && at(i, j) == at(i - 1, j) + 1) {
      ++c.deletions;
      --i;
    } else {
      ++c.insertions;
      --j;
    }
  }
  return c;
}

double wer(std::string_view reference, std::string_view hypothesis) {
  const EditCounts c = align_words(reference, hypothesis);
  if (c.reference_length == 0) throw DegenerateInputError("WER is undefined for an empty reference");
  return static_cast<double>(c.edits()) / static_cast<double>(c.reference_length);
}

// ---------------------------------------------------------------------------
// noise channel

std::size_t char_edit_distance(std::string_view a, std::string_view b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = std::min({prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1), prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

void NoiseConfig::validate() const {
  if (!(target_wer_median >= 0.0 && target_wer_median < 1.0)) {
    throw ConfigError("target_wer_median must be in [0, 1)");
  }
  if (wer_spread < 0.0) throw ConfigError("wer_spread must be >= 0");
  if (sub_frac < 0.0 || del_frac < 0.0 || ins_frac < 0.0) throw ConfigError("edit mix must be nonnegative");
  if (std::abs(sub_frac + del_frac + ins_frac - 1.0) > 1e-9) throw ConfigError("edit mix must sum to 1");
}

namespace {

std::vector<std::string> nearest_words(const std::string& w, const std::vector<std::string>& words) {
  std::size_t best = std::numeric_limits<std::size_t>::max();
  std::vector<std::string> out;
  for (const auto& other : words) {
    if (other == w) continue;
    const std::size_t d = char_edit_distance(w, other);
    if (d < best) {
      best = d;
      out.clear();
    }
    if (d == best) out.push_back(other);
  }
  return out;
}

std::vector<std::string> split_ws(const std::string& s) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    std::size_t j = i;
    while (j < s.size() && !std::isspace(static_cast<unsigned char>(s[j]))) ++j;
    if (j > i) out.push_back(s.substr(i, j - i));
    i = j;
  }
  return out;
}

}  // namespace

NoiseChannel::NoiseChannel(std::span<const std::string> corpus, NoiseConfig cfg) : cfg_(cfg) {
  cfg_.validate();
  std::map<std::string, std::size_t> counts;
  for (const auto& line : corpus)
    for (auto& t : tokenize(line)) ++counts[t];
  for (const auto& [w, n] : counts) words_.push_back(w);
  for (const auto& w : words_) confusions_.emplace(w, nearest_words(w, words_));

  std::vector<std::pair<std::string, std::size_t>> by_freq(counts.begin(), counts.end());
  std::stable_sort(by_freq.begin(), by_freq.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  for (const auto& [w, n] : by_freq) {
    if (w.size() <= 3) insertions_.push_back(w);
    if (insertions_.size() == 10) break;
  }
  if (insertions_.empty()) {
    for (std::size_t i = 0; i < by_freq.size() && i < 10; ++i) insertions_.push_back(by_freq[i].first);
  }
}

double NoiseChannel::draw_target(Rng& rng) const {
  // Sum of two uniforms: triangular on median * [1 - spread, 1 + spread].
  const double u = uniform01(rng) + uniform01(rng) - 1.0;
  const double t = cfg_.target_wer_median * (1.0 + cfg_.wer_spread * u);
  return std::clamp(t, 0.0, std::nextafter(1.0, 0.0));
}

std::vector<std::string> NoiseChannel::confusions(const std::string& word) const {
  const std::string key = tokenize(word).empty() ? word : tokenize(word)[0];
  auto it = confusions_.find(key);
  if (it != confusions_.end()) return it->second;
  return nearest_words(key, words_);
}

std::string NoiseChannel::apply(const std::string& clean, Rng& rng) const {
  const double target = draw_target(rng);
  auto words = split_ws(clean);
  const std::size_t n = words.size();
  if (n == 0 || target <= 0.0) return clean;
  const double want = target * static_cast<double>(n);
  std::size_t edits = static_cast<std::size_t>(std::floor(want));
  if (uniform01(rng) < want - std::floor(want)) ++edits;
  edits = std::min(edits, n);
  if (edits == 0) return clean;

  std::size_t n_sub = 0, n_del = 0, n_ins = 0;
  for (std::size_t e = 0; e < edits; ++e) {
    const double r = uniform01(rng);
    if (r < cfg_.sub_frac) {
      ++n_sub;
    } else if (r < cfg_.sub_frac + cfg_.del_frac) {
      ++n_del;
    } else {
      ++n_ins;
    }
  }
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);

  std::vector<int> op(n, 0);  // 0 keep, 1 substitute, 2 delete
  for (std::size_t k = 0; k < n_sub; ++k) op[order[k]] = 1;
  for (std::size_t k = n_sub; k < n_sub + n_del; ++k) op[order[k]] = 2;

  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) {
    if (op[i] == 2) continue;
    if (op[i] == 1) {
      const auto cands = confusions(words[i]);
      out.push_back(cands.empty() ? insertions_[uniform_index(rng, insertions_.size())]
                                  : cands[uniform_index(rng, cands.size())]);
    } else {
      out.push_back(words[i]);
    }
  }
  for (std::size_t k = 0; k < n_ins; ++k) {
    const std::size_t slot = uniform_index(rng, out.size() + 1);
    out.insert(out.begin() + static_cast<std::ptrdiff_t>(slot),
               insertions_[uniform_index(rng, insertions_.size())]);
  }
  std::string s;
  for (std::size_t i = 0; i < out.size(); ++i) s += (i ? " " : "") + out[i];
  return s;
}

std::string synthesize_noise(const std::string& clean, const NoiseChannel& channel, Rng& rng) {
  return channel.apply(clean, rng);
}

void corrupt(std::vector<PairedExample>& examples, const NoiseChannel& channel, Rng& rng) {
  for (auto& ex : examples) {
    ex.asr = channel.apply(ex.clean, rng);
    ex.wer = wer(ex.clean, ex.asr);
  }
}

// ---------------------------------------------------------------------------
// buckets

bool WerInterval::contains(double w) const {
  const bool lo = lower_inclusive ? w >= lower : w > lower;
  const bool hi = upper_inclusive ? w <= upper : w < upper;
  return lo && hi;
}

WerBuckets::WerBuckets(std::vector<WerInterval> intervals) : intervals_(std::move(intervals)) {
  if (intervals_.empty()) throw ConfigError("WER buckets: no intervals");
  if (intervals_.front().lower != 0.0 || !intervals_.front().lower_inclusive) {
    throw ConfigError("WER buckets must start at 0 inclusive");
  }
  if (!std::isinf(intervals_.back().upper)) throw ConfigError("WER buckets must extend to infinity");
  for (std::size_t i = 1; i < intervals_.size(); ++i) {
    const auto& a = intervals_[i - 1];
    const auto& b = intervals_[i];
    if (a.upper != b.lower || a.upper_inclusive == b.lower_inclusive) {
      throw ConfigError("WER buckets '" + a.name + "' and '" + b.name + "' are not contiguous and disjoint");
    }
  }
}

WerBuckets WerBuckets::google() {
  const double inf = std::numeric_limits<double>::infinity();
  return WerBuckets({{"clean", 0.0, true, 0.0, true},
                     {"low", 0.0, false, 0.16, true},
                     {"medium", 0.16, false, 0.4, true},
                     {"high", 0.4, false, inf, false}});
}

WerBuckets WerBuckets::wav2vec() {
  const double inf = std::numeric_limits<double>::infinity();
  return WerBuckets({{"low", 0.0, true, 0.25, true},
                     {"medium", 0.25, false, 0.5, true},
                     {"high", 0.5, false, 0.83, true},
                     {"severe", 0.83, false, inf, false}});
}

WerBuckets WerBuckets::quartiles(std::span<const double> wers) {
  if (wers.empty()) throw ConfigError("quartile buckets need at least one WER value");
  std::vector<double> s(wers.begin(), wers.end());
  std::sort(s.begin(), s.end());
  auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(s.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, s.size() - 1);
    return s[lo] + (pos - static_cast<double>(lo)) * (s[hi] - s[lo]);
  };
  const double q1 = quantile(0.25), q2 = quantile(0.5), q3 = quantile(0.75);
  const double inf = std::numeric_limits<double>::infinity();
  return WerBuckets({{"low", 0.0, true, q1, true},
                     {"medium", q1, false, q2, true},
                     {"high", q2, false, q3, true},
                     {"severe", q3, false, inf, false}});
}

WerBuckets WerBuckets::named(const std::string& name, std::span<const double> wers) {
  if (name == "google") return google();
  if (name == "wav2vec") return wav2vec();
  if (name == "quartile") return quartiles(wers);
  throw ConfigError("unknown bucket scheme '" + name + "' (google, wav2vec, quartile)");
}

std::size_t WerBuckets::index_of(double w) const {
  for (std::size_t i = 0; i < intervals_.size(); ++i)
    if (intervals_[i].contains(w)) return i;
  throw ConfigError("WER " + std::to_string(w) + " falls outside every bucket");
}

std::vector<Bucket> bucketize(std::span<const PairedExample> examples, const WerBuckets& buckets) {
  std::vector<Bucket> out;
  for (const auto& iv : buckets.intervals()) out.push_back({iv.name, {}});
  for (std::size_t i = 0; i < examples.size(); ++i) out[buckets.index_of(examples[i].wer)].members.push_back(i);
  return out;
}

}  // namespace asrcl
