// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "asrcl/autodiff.hpp"

namespace asrcl {

/// One utterance: manual transcript, ASR hypothesis and its label(s).
struct PairedExample {
  std::string id;
  std::string clean;
  std::string asr;
  std::string label;     // flat intent name
  std::string scenario;  // empty outside scenario/action data
  std::string action;
  double wer = 0.0;      // wer(clean, asr)
};

enum class LabelMode { kSingle, kScenarioAction };

/// Class inventories per classification head, sorted by name.
class LabelSpace {
 public:
  LabelSpace() = default;
  /// Collects the labels present in `examples`. Scenario/action mode
  /// requires both fields on every example.
  static LabelSpace from_examples(std::span<const PairedExample> examples, LabelMode mode);
  static LabelSpace from_names(LabelMode mode, std::vector<std::vector<std::string>> names);

  LabelMode mode() const { return mode_; }
  std::size_t num_heads() const { return names_.size(); }
  std::vector<std::size_t> head_sizes() const;
  const std::vector<std::vector<std::string>>& names() const { return names_; }

  /// Class index per head. Throws IndexError for an unknown label.
  std::vector<int> encode(const PairedExample& ex) const;
  /// Single integer identifying the full label (scenario and action jointly).
  int joint(std::span<const int> per_head) const;

 private:
  LabelMode mode_ = LabelMode::kSingle;
  std::vector<std::vector<std::string>> names_;
  std::vector<std::unordered_map<std::string, int>> index_;
};

/// Reads line-delimited JSON records {id, clean, asr?, label?, scenario?,
/// action?}. A missing asr means asr = clean; a missing label is built as
/// "scenario_action". Blank lines are skipped. Malformed records throw
/// ParseError with "path:line:".
std::vector<PairedExample> load_pairs(const std::filesystem::path& path);
void save_pairs(const std::filesystem::path& path, std::span<const PairedExample> examples);

struct EditCounts {
  std::size_t substitutions = 0;
  std::size_t deletions = 0;
  std::size_t insertions = 0;
  std::size_t reference_length = 0;
  std::size_t edits() const { return substitutions + deletions + insertions; }
};

/// Minimum-edit word alignment on lowercased whitespace tokens.
EditCounts align_words(std::string_view reference, std::string_view hypothesis);

/// Word error rate. Throws DegenerateInputError for an empty reference.
double wer(std::string_view reference, std::string_view hypothesis);

struct NoiseConfig {
  double target_wer_median = 0.25;
  /// Half-width of the triangular distribution of per-utterance target WER,
  /// relative to the median. A zero median makes the channel the identity.
  double wer_spread = 1.0;
  double sub_frac = 0.6;
  double del_frac = 0.2;
  double ins_frac = 0.2;
  std::uint64_t seed = 1;

  void validate() const;
};

/// Word-level synthetic ASR channel. Substitutions move a word to one of its
/// closest vocabulary words by character edit distance, deletions drop a
/// word and insertions add a frequent short word. The number of edits is at
/// most the number of reference words, so the achieved WER never exceeds 1.
class NoiseChannel {
 public:
  NoiseChannel(std::span<const std::string> corpus, NoiseConfig cfg);

  /// Per-utterance target WER, clamped to [0, 1).
  double draw_target(Rng& rng) const;
  std::string apply(const std::string& clean, Rng& rng) const;

  const NoiseConfig& config() const { return cfg_; }
  /// Closest other vocabulary words by character edit distance.
  std::vector<std::string> confusions(const std::string& word) const;
  const std::vector<std::string>& insertion_words() const { return insertions_; }

 private:
  NoiseConfig cfg_;
  std::vector<std::string> words_;
  std::unordered_map<std::string, std::vector<std::string>> confusions_;
  std::vector<std::string> insertions_;
};

std::string synthesize_noise(const std::string& clean, const NoiseChannel& channel, Rng& rng);

std::size_t char_edit_distance(std::string_view a, std::string_view b);

struct WerInterval {
  std::string name;
  double lower = 0.0;
  bool lower_inclusive = true;
  double upper = std::numeric_limits<double>::infinity();
  bool upper_inclusive = true;

  bool contains(double w) const;
};

/// Ordered, disjoint intervals covering [0, inf).
class WerBuckets {
 public:
  explicit WerBuckets(std::vector<WerInterval> intervals);

  /// clean =0, low (0,0.16], medium (0.16,0.4], high >0.4
  static WerBuckets google();
  /// low [0,0.25], medium (0.25,0.5], high (0.5,0.83], severe >0.83
  static WerBuckets wav2vec();
  /// Quartile boundaries of `wers` (linear interpolation); values on a
  /// boundary go to the lower bucket.
  static WerBuckets quartiles(std::span<const double> wers);
  /// "google", "wav2vec" or "quartile" (the latter needs `wers`).
  static WerBuckets named(const std::string& name, std::span<const double> wers);

  const std::vector<WerInterval>& intervals() const { return intervals_; }
  std::size_t index_of(double wer) const;

 private:
  std::vector<WerInterval> intervals_;
};

struct Bucket {
  std::string name;
  std::vector<std::size_t> members;  // indices into the example list
};

/// Partitions examples by their cached wer field, in bucket order.
std::vector<Bucket> bucketize(std::span<const PairedExample> examples, const WerBuckets& buckets);

struct ToyCorpusConfig {
  std::size_t size = 1000;
  std::uint64_t seed = 7;
  /// Fraction of examples whose label is replaced by a random other intent.
  double label_noise = 0.0;
};

/// Templated smart-assistant commands over 15 (scenario, action) intents.
/// asr == clean; run the result through a NoiseChannel to corrupt it.
std::vector<PairedExample> toy_corpus(const ToyCorpusConfig& cfg);

/// Fills asr and wer of every example using `channel`.
void corrupt(std::vector<PairedExample>& examples, const NoiseChannel& channel, Rng& rng);

/// toy_corpus passed through a NoiseChannel built from its own sentences,
/// both seeded from cfg.seed.
std::vector<PairedExample> noisy_toy_corpus(const ToyCorpusConfig& cfg, double noise_median);

}  // namespace asrcl
