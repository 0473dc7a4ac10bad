#include "protolab/eval.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>

namespace protolab {

namespace {

void require_nonempty(const Dataset& d, const char* what) {
  if (d.empty()) throw DataError(std::string(what) + ": empty dataset");
}

std::string fmt(double v) {
  std::ostringstream s;
  s << std::setprecision(17) << v;
  return s.str();
}

std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : ""; }

}  // namespace

MeanStd mean_std(const std::vector<double>& xs) {
  if (xs.empty()) return {};
  double mean = 0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double var = 0;
  for (double x : xs) var += (x - mean) * (x - mean);
  return {mean, std::sqrt(var / static_cast<double>(xs.size()))};
}

double accuracy(const Model& theta, const Dataset& d) {
  require_nonempty(d, "accuracy");
  std::size_t correct = 0;
  for (const auto& x : d.samples)
    if (predict(x, theta) == x.label) ++correct;
  return static_cast<double>(correct) / static_cast<double>(d.size());
}

double attack_success_rate(const Model& ref, const Model& attacked, const Dataset& d, const PoisonConfig& cfg) {
  require_nonempty(d, "attack_success_rate");
  if (ref.config.image_size != attacked.config.image_size || ref.config.channels != attacked.config.channels)
    throw ConfigError("attack_success_rate: models disagree on the input space");
  std::size_t flipped = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto& x = d.samples[i];
    const auto [t, corner] = trigger_choice(cfg, i);
    const ImageSample xt = apply_trigger(x, cfg.triggers[static_cast<std::size_t>(t)], corner);
    if (predict(xt, attacked) != predict(x, attacked)) ++flipped;
  }
  return static_cast<double>(flipped) / static_cast<double>(d.size());
}

AlignmentStats alignment_report(const Model& ref, const Model& attacked, const Dataset& d, const PoisonConfig& cfg) {
  require_nonempty(d, "alignment_report");
  if (ref.variant() != Variant::pipnet || attacked.variant() != Variant::pipnet)
    throw ConfigError("alignment_report requires pipnet models");
  std::vector<double> clean, trig;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto& x = d.samples[i];
    const auto [t, corner] = trigger_choice(cfg, i);
    const ImageSample xt = apply_trigger(x, cfg.triggers[static_cast<std::size_t>(t)], corner);
    const auto z = forward(x, ref).per_patch;
    clean.push_back(alignment_loss(z, forward(x, attacked).per_patch));
    trig.push_back(alignment_loss(z, forward(xt, attacked).per_patch));
  }
  return {mean_std(clean), mean_std(trig)};
}

double ood_abstention(const Model& theta, const Dataset& d, double threshold) {
  require_nonempty(d, "ood_abstention");
  if (theta.variant() != Variant::pipnet) throw ConfigError("ood_abstention requires the pipnet variant");
  std::size_t abstained = 0;
  for (const auto& x : d.samples)
    if (static_cast<double>(forward(x, theta).scores.maxCoeff()) < threshold) ++abstained;
  return static_cast<double>(abstained) / static_cast<double>(d.size());
}

void EvalReport::validate() const {
  if (sample_count == 0) throw InvariantViolation("report: sample_count must be positive");
  auto fraction = [](const char* name, double v) {
    if (!(v >= 0.0 && v <= 1.0)) throw InvariantViolation(std::string("report: ") + name + " outside [0,1]");
  };
  fraction("accuracy_clean", accuracy_clean);
  if (accuracy_attacked) fraction("accuracy_attacked", *accuracy_attacked);
  if (asr) fraction("asr", *asr);
  if (abstention_rate) fraction("abstention_rate", *abstention_rate);
  for (const auto& [t, r] : abstention_curve) fraction("abstention_curve", r);
}

std::string EvalReport::csv_header() const {
  return "schema_version,variant,split,sample_count,seed,accuracy_clean,accuracy_attacked,asr,align_no_trigger_mean,"
         "align_no_trigger_std,align_trigger_mean,align_trigger_std,approx_error,abstention_rate";
}

std::string EvalReport::csv_row() const {
  std::ostringstream s;
  s << schema_version << ',' << variant << ',' << split << ',' << sample_count << ',' << seed << ',' << fmt(accuracy_clean) << ','
    << fmt(accuracy_attacked) << ',' << fmt(asr) << ',' << (align_no_trigger ? fmt(align_no_trigger->mean) : "") << ','
    << (align_no_trigger ? fmt(align_no_trigger->std) : "") << ',' << (align_trigger ? fmt(align_trigger->mean) : "") << ','
    << (align_trigger ? fmt(align_trigger->std) : "") << ',' << fmt(approx_error) << ',' << fmt(abstention_rate);
  return s.str();
}

void to_json(nlohmann::json& j, const MeanStd& m) { j = {{"mean", m.mean}, {"std", m.std}}; }

void from_json(const nlohmann::json& j, MeanStd& m) {
  m.mean = j.at("mean").get<double>();
  m.std = j.at("std").get<double>();
}

void to_json(nlohmann::json& j, const EvalReport& r) {
  j = {{"schema_version", r.schema_version}, {"variant", r.variant}, {"split", r.split}, {"sample_count", r.sample_count},
       {"seed", r.seed}, {"accuracy_clean", r.accuracy_clean}};
  if (r.accuracy_attacked) j["accuracy_attacked"] = *r.accuracy_attacked;
  if (r.asr) j["asr"] = *r.asr;
  if (r.align_no_trigger) j["align_no_trigger"] = *r.align_no_trigger;
  if (r.align_trigger) j["align_trigger"] = *r.align_trigger;
  if (r.approx_error) j["approx_error"] = *r.approx_error;
  if (r.abstention_rate) j["abstention_rate"] = *r.abstention_rate;
  if (r.abstention_threshold) j["abstention_threshold"] = *r.abstention_threshold;
  if (!r.abstention_curve.empty()) {
    nlohmann::json curve = nlohmann::json::array();
    for (const auto& [t, rate] : r.abstention_curve) curve.push_back({{"threshold", t}, {"rate", rate}});
    j["abstention_curve"] = curve;
  }
  if (!r.abstention_rule.empty()) j["abstention_rule"] = r.abstention_rule;
}

void from_json(const nlohmann::json& j, EvalReport& r) {
  r = EvalReport{};
  r.schema_version = j.at("schema_version").get<int>();
  if (r.schema_version != kReportSchemaVersion)
    throw DataError("unsupported report schema version " + std::to_string(r.schema_version));
  r.variant = j.value("variant", std::string());
  r.split = j.value("split", std::string());
  r.sample_count = j.at("sample_count").get<std::size_t>();
  r.seed = j.value("seed", std::uint64_t{0});
  r.accuracy_clean = j.at("accuracy_clean").get<double>();
  if (j.contains("accuracy_attacked")) r.accuracy_attacked = j.at("accuracy_attacked").get<double>();
  if (j.contains("asr")) r.asr = j.at("asr").get<double>();
  if (j.contains("align_no_trigger")) r.align_no_trigger = j.at("align_no_trigger").get<MeanStd>();
  if (j.contains("align_trigger")) r.align_trigger = j.at("align_trigger").get<MeanStd>();
  if (j.contains("approx_error")) r.approx_error = j.at("approx_error").get<double>();
  if (j.contains("abstention_rate")) r.abstention_rate = j.at("abstention_rate").get<double>();
  if (j.contains("abstention_threshold")) r.abstention_threshold = j.at("abstention_threshold").get<double>();
  if (j.contains("abstention_curve"))
    for (const auto& e : j.at("abstention_curve")) r.abstention_curve.emplace_back(e.at("threshold").get<double>(), e.at("rate").get<double>());
  r.abstention_rule = j.value("abstention_rule", std::string());
}

}  // namespace protolab
