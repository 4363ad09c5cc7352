// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "asrcl/autodiff.hpp"

namespace asrcl {

inline constexpr int kPadId = 0;
inline constexpr int kUnkId = 1;
inline constexpr int kClsId = 2;
inline constexpr int kMaskId = 3;
inline constexpr int kNumReserved = 4;

/// Lowercases ASCII letters and splits on whitespace.
std::vector<std::string> tokenize(std::string_view text);

/// Word-level vocabulary. Ids 0..3 are [PAD], [UNK], [CLS], [MASK]; the rest
/// are corpus words in descending frequency, ties broken alphabetically.
class Vocab {
 public:
  Vocab();

  /// Rebuilds a vocabulary from tokens listed in id order (reserved included).
  static Vocab from_tokens(std::vector<std::string> tokens, int min_freq = 1);

  int id(std::string_view token) const;
  const std::string& token(int id) const;
  bool contains(std::string_view token) const;
  std::size_t size() const { return tokens_.size(); }
  int min_freq() const { return min_freq_; }
  const std::vector<std::string>& tokens() const { return tokens_; }

  /// Two-column text file "token<TAB>id", one line per id in ascending order.
  void save(const std::filesystem::path& path) const;
  static Vocab load(const std::filesystem::path& path);

  bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

 private:
  friend Vocab build_vocab(std::span<const std::string> corpus, int min_freq);
  void add(const std::string& token);

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
  int min_freq_ = 1;
};

/// Throws ConfigError on an empty corpus or min_freq < 1.
Vocab build_vocab(std::span<const std::string> corpus, int min_freq = 1);

struct TokenSeq {
  std::vector<int> ids;
  std::size_t true_length = 0;
};

/// [CLS] + tokens, truncated to max_len and padded with [PAD].
TokenSeq encode(std::string_view text, const Vocab& vocab, std::size_t max_len);

struct MaskedSeq {
  TokenSeq seq;
  std::vector<std::size_t> positions;
  std::vector<int> targets;
};

/// Selects each non-special, non-pad position with probability `ratio`;
/// selected tokens become [MASK] 80% of the time, a random word 10%, and
/// stay unchanged 10%. Targets are the original ids.
MaskedSeq apply_mlm_mask(const TokenSeq& seq, double ratio, std::size_t vocab_size, Rng& rng);

}  // namespace asrcl
