// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "csmap/vae.hpp"

namespace csmap {

enum class ConceptProvenance { attribute_mean_difference, correlation_top_k };

std::string to_string(ConceptProvenance p);

/// Latent-space direction z_c.
struct ConceptVector {
  std::vector<float> direction;
  std::string name;
  ConceptProvenance provenance = ConceptProvenance::attribute_mean_difference;
  std::size_t n_pos = 0;
  std::size_t n_neg = 0;
  /// Free-form record of how the concept was built (anchors, k, attribute).
  nlohmann::json details = nlohmann::json::object();
};

/// mean(positive means) - mean(negative means).
ConceptVector concept_from_attribute(std::span<const LatentCode> positives, std::span<const LatentCode> negatives,
                                     std::string name = "concept");

/// z_c . z, accumulated in double.
double concept_score(std::span<const float> direction, std::span<const float> z);
double concept_score(const ConceptVector& concept_vector, std::span<const float> z);

/// Pearson correlation; nullopt when either vector has zero variance.
std::optional<double> pearson(std::span<const double> a, std::span<const double> b);
std::optional<double> pearson(std::span<const float> a, std::span<const float> b);

struct CorrelationConcept {
  ConceptVector concept_vector;
  /// Per sample; NaN for anchors and for zero-variance samples.
  std::vector<double> correlations;
  /// Indices of the k selected samples, most correlated first.
  std::vector<std::size_t> selected;
  std::size_t excluded_zero_variance = 0;
};

/// Correlates every sample's latent mean with the anchor latent mean (the
/// average over anchors when several are given), treating the latent
/// coordinates as paired observations. The concept is the mean latent
/// vector of the k most correlated non-anchor samples.
CorrelationConcept concept_from_correlation(std::span<const LatentCode> codes, std::span<const std::string> ids,
                                            std::span<const std::string> anchor_ids, std::size_t k = 50,
                                            std::string name = "");

/// Mann-Whitney rank statistic with average ranks for ties.
double auc(std::span<const double> scores, std::span<const std::uint8_t> labels);

struct Histogram {
  double lo = 0.0;
  double hi = 0.0;
  std::vector<std::size_t> positive;
  std::vector<std::size_t> negative;
};

struct ScoreReport {
  std::string concept_name;
  std::vector<double> scores;
  std::vector<std::uint8_t> labels;
  Histogram histogram;
  double auc = 0.0;
  /// (mean_pos - mean_neg) / pooled standard deviation.
  double mean_gap = 0.0;
  double mean_positive = 0.0;
  double mean_negative = 0.0;
};

/// Throws DataError when only one class is present.
ScoreReport score_report(std::span<const double> scores, std::span<const std::uint8_t> labels,
                         std::string concept_name = "", std::size_t bins = 50);
/// Scores every sample of `data` against `concept` using posterior means.
ScoreReport score_report(const VaeModel& model, const ConceptVector& concept_vector, const Dataset& data,
                         const std::string& attribute, std::size_t bins = 50);

nlohmann::json to_json(const ScoreReport& report);

void save_concept(const ConceptVector& concept_vector, const std::filesystem::path& path);
ConceptVector load_concept(const std::filesystem::path& path);

}  // namespace csmap
