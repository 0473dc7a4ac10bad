#pragma once

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "protolab/attacks.hpp"
#include "protolab/training.hpp"

namespace protolab {

struct MeanStd {
  double mean = 0;
  double std = 0;  // population
  friend bool operator==(const MeanStd&, const MeanStd&) = default;
};

MeanStd mean_std(const std::vector<double>& xs);

double accuracy(const Model& theta, const Dataset& d);

// Fraction of inputs whose prediction by `attacked` changes once triggered.
// Trigger and corner per sample follow trigger_choice(cfg, index).
double attack_success_rate(const Model& ref, const Model& attacked, const Dataset& d, const PoisonConfig& cfg);

struct AlignmentStats {
  MeanStd no_trigger;  // alignment_loss(z, z_hat) on clean inputs
  MeanStd trigger;     // alignment_loss(z, z_hat') with z_hat' on the triggered input
  double ratio() const { return no_trigger.mean > 0 ? trigger.mean / no_trigger.mean : 0.0; }
};

AlignmentStats alignment_report(const Model& ref, const Model& attacked, const Dataset& d, const PoisonConfig& cfg);

// Fraction of samples whose largest class score is below `threshold`.
double ood_abstention(const Model& theta, const Dataset& d, double threshold);

inline constexpr int kReportSchemaVersion = 1;

struct EvalReport {
  int schema_version = kReportSchemaVersion;
  std::string variant;
  std::string split;
  std::size_t sample_count = 0;
  std::uint64_t seed = 0;
  double accuracy_clean = 0;
  std::optional<double> accuracy_attacked;
  std::optional<double> asr;
  std::optional<MeanStd> align_no_trigger;
  std::optional<MeanStd> align_trigger;
  std::optional<double> approx_error;
  std::optional<double> abstention_rate;
  std::optional<double> abstention_threshold;
  std::vector<std::pair<double, double>> abstention_curve;  // (threshold, rate)
  std::string abstention_rule;

  void validate() const;
  std::string csv_header() const;
  std::string csv_row() const;
  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

void to_json(nlohmann::json& j, const MeanStd& m);
void from_json(const nlohmann::json& j, MeanStd& m);
void to_json(nlohmann::json& j, const EvalReport& r);
void from_json(const nlohmann::json& j, EvalReport& r);

}  // namespace protolab
