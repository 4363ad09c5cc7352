// SPDX-License-Identifier: Apache-2.0
#include "asrcl/textproc.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>

#include "asrcl/errors.hpp"

namespace asrcl {

namespace {
const char* const kReserved[kNumReserved] = {"[PAD]", "[UNK]", "[CLS]", "[MASK]"};
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

Vocab::Vocab() {
  for (const char* r : kReserved) add(r);
}

void Vocab::add(const std::string& token) {
  ids_.emplace(token, static_cast<int>(tokens_.size()));
  tokens_.push_back(token);
}

Vocab Vocab::from_tokens(std::vector<std::string> tokens, int min_freq) {
  if (tokens.size() < kNumReserved) throw ParseError("vocabulary is missing reserved tokens");
  for (int i = 0; i < kNumReserved; ++i) {
    if (tokens[static_cast<std::size_t>(i)] != kReserved[i]) {
      throw ParseError("reserved id " + std::to_string(i) + " must be " + kReserved[i]);
    }
  }
  Vocab v;
  v.min_freq_ = min_freq;
  for (std::size_t i = kNumReserved; i < tokens.size(); ++i) {
    if (v.ids_.count(tokens[i])) throw ParseError("duplicate vocabulary token '" + tokens[i] + "'");
    v.add(tokens[i]);
  }
  return v;
}

int Vocab::id(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  return it == ids_.end() ? kUnkId : it->second;
}

const std::string& Vocab::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw IndexError("token id " + std::to_string(id) + " outside vocabulary");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

bool Vocab::contains(std::string_view token) const { return ids_.count(std::string(token)) > 0; }

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write vocabulary to " + path.string());
  for (std::size_t i = 0; i < tokens_.size(); ++i) out << tokens_[i] << '\t' << i << '\n';
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read vocabulary " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto tab = line.rfind('\t');
    if (tab == std::string::npos) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": expected token<TAB>id");
    }
    if (std::stoul(line.substr(tab + 1)) != tokens.size()) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": ids must be contiguous");
    }
    tokens.push_back(line.substr(0, tab));
  }
  return from_tokens(std::move(tokens));
}

Vocab build_vocab(std::span<const std::string> corpus, int min_freq) {
  if (corpus.empty()) throw ConfigError("build_vocab: empty corpus");
  if (min_freq < 1) throw ConfigError("build_vocab: min_freq must be >= 1");
  std::map<std::string, std::size_t> counts;
  for (const auto& line : corpus)
    for (auto& tok : tokenize(line)) ++counts[tok];
  std::vector<std::pair<std::string, std::size_t>> kept;
  for (auto& [tok, n] : counts) {
    if (n >= static_cast<std::size_t>(min_freq) && !Vocab().contains(tok)) kept.emplace_back(tok, n);
  }
  std::stable_sort(kept.begin(), kept.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocab v;
  v.min_freq_ = min_freq;
  for (auto& [tok, n] : kept) v.add(tok);
  return v;
}

TokenSeq encode(std::string_view text, const Vocab& vocab, std::size_t max_len) {
  if (max_len < 2) throw ConfigError("encode: max_len must be >= 2");
  TokenSeq seq;
  seq.ids.assign(max_len, kPadId);
  seq.ids[0] = kClsId;
  std::size_t pos = 1;
  for (const auto& tok : tokenize(text)) {
    if (pos >= max_len) break;
    seq.ids[pos++] = vocab.id(tok);
  }
  seq.true_length = pos;
  return seq;
}

MaskedSeq apply_mlm_mask(const TokenSeq& seq, double ratio, std::size_t vocab_size, Rng& rng) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("mask ratio must be in (0, 1)");
  MaskedSeq out{seq, {}, {}};
  for (std::size_t i = 0; i < seq.true_length; ++i) {
    const int id = seq.ids[i];
    if (id == kClsId || id == kPadId || id == kMaskId) continue;
    if (uniform01(rng) >= ratio) continue;
    out.positions.push_back(i);
    out.targets.push_back(id);
    const double r = uniform01(rng);
    if (r < 0.8) {
      out.seq.ids[i] = kMaskId;
    } else if (r < 0.9 && vocab_size > kNumReserved) {
      out.seq.ids[i] = kNumReserved + static_cast<int>(uniform_index(rng, vocab_size - kNumReserved));
    }
  }
  return out;
}

}  // namespace asrcl
