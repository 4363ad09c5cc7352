// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "asrcl/corpus.hpp"
#include "asrcl/encoder.hpp"

namespace asrcl {

/// Fraction of positions where scenario and action both match.
/// Throws std::invalid_argument on a length mismatch or empty input.
double joint_accuracy(std::span<const std::pair<int, int>> pred, std::span<const std::pair<int, int>> gold);

/// Fraction of equal entries. Same errors as joint_accuracy.
double accuracy(std::span<const int> pred, std::span<const int> gold);

struct BucketRow {
  std::string name;
  std::size_t n = 0;
  double accuracy = 0.0;                // NaN when n == 0
  std::optional<double> joint_accuracy;  // scenario/action mode only
};

struct EvalReport {
  std::string label;
  std::size_t n = 0;
  /// Single-head: plain accuracy. Two heads: mean of the per-head accuracies.
  double accuracy = 0.0;
  std::optional<double> joint_accuracy;
  std::vector<double> head_accuracy;
  std::vector<BucketRow> buckets;
  nlohmann::json config = nlohmann::json::object();
  std::vector<std::uint64_t> seeds;

  /// The headline metric: joint accuracy when present, else accuracy.
  double primary() const { return joint_accuracy ? *joint_accuracy : accuracy; }
};

/// Dropout-off inference on the asr side of every example, scored overall and
/// per WER bucket. Throws ConfigError for an empty example list.
EvalReport evaluate(const Model& model, const Vocab& vocab, std::span<const PairedExample> examples,
                    const LabelSpace& labels, const WerBuckets& buckets, std::size_t batch_size = 256);

/// Mean of several single-seed reports with the same buckets. Bucket rows of
/// the result carry the mean; `std_*` fields hold the sample deviations.
struct AggregateReport {
  EvalReport mean;
  double accuracy_std = 0.0;
  std::optional<double> joint_accuracy_std;
  std::vector<double> bucket_std;  // of each bucket's primary metric
  std::vector<EvalReport> runs;
};
AggregateReport aggregate(std::vector<EvalReport> runs);

/// Columns: bucket,n,accuracy[,joint_accuracy]. The first row is "all".
std::string to_csv(const EvalReport& r);
nlohmann::json to_json(const EvalReport& r);
nlohmann::json to_json(const AggregateReport& r);
/// Fixed-width table for terminals.
std::string to_table(const EvalReport& r);
std::string to_table(const AggregateReport& r);

}  // namespace asrcl
