// SPDX-License-Identifier: Apache-2.0
#include "csmap/concepts.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "csmap/container.hpp"

namespace csmap {
namespace {

std::vector<double> mean_of(std::span<const LatentCode> codes, const char* which) {
  std::vector<double> acc(codes.front().mean.size(), 0.0);
  for (const auto& c : codes) {
    if (c.mean.size() != acc.size())
      throw DataError(std::string(which) + " codes mix latent sizes " + std::to_string(acc.size()) + " and " +
                      std::to_string(c.mean.size()));
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += c.mean[i];
  }
  for (double& v : acc) v /= static_cast<double>(codes.size());
  return acc;
}

template <typename T>
std::optional<double> pearson_impl(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size())
    throw DataError("pearson: lengths " + std::to_string(a.size()) + " and " + std::to_string(b.size()) + " differ");
  if (a.size() < 2) return std::nullopt;
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= static_cast<double>(a.size());
  mb /= static_cast<double>(b.size());
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma, db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa == 0.0 || sbb == 0.0) return std::nullopt;
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

}  // namespace

std::string to_string(ConceptProvenance p) {
  return p == ConceptProvenance::attribute_mean_difference ? "attribute-mean-difference" : "correlation-top-k";
}

ConceptVector concept_from_attribute(std::span<const LatentCode> positives, std::span<const LatentCode> negatives,
                                     std::string name) {
  if (positives.empty()) throw DataError("concept '" + name + "': positive set is empty");
  if (negatives.empty()) throw DataError("concept '" + name + "': negative set is empty");
  const auto mp = mean_of(positives, "positive");
  const auto mn = mean_of(negatives, "negative");
  if (mp.size() != mn.size())
    throw DataError("concept '" + name + "': positive latent size " + std::to_string(mp.size()) +
                    " differs from negative latent size " + std::to_string(mn.size()));
  ConceptVector c;
  c.name = std::move(name);
  c.provenance = ConceptProvenance::attribute_mean_difference;
  c.n_pos = positives.size();
  c.n_neg = negatives.size();
  c.direction.resize(mp.size());
  for (std::size_t i = 0; i < mp.size(); ++i) c.direction[i] = static_cast<float>(mp[i] - mn[i]);
  return c;
}

double concept_score(std::span<const float> direction, std::span<const float> z) {
  if (direction.size() != z.size())
    throw DataError("concept_score: concept has " + std::to_string(direction.size()) + " dims, latent has " +
                    std::to_string(z.size()));
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) s += static_cast<double>(direction[i]) * static_cast<double>(z[i]);
  return s;
}

double concept_score(const ConceptVector& concept_vector, std::span<const float> z) {
  return concept_score(std::span<const float>(concept_vector.direction), z);
}

std::optional<double> pearson(std::span<const double> a, std::span<const double> b) { return pearson_impl(a, b); }
std::optional<double> pearson(std::span<const float> a, std::span<const float> b) { return pearson_impl(a, b); }

CorrelationConcept concept_from_correlation(std::span<const LatentCode> codes, std::span<const std::string> ids,
                                            std::span<const std::string> anchor_ids, std::size_t k,
                                            std::string name) {
  if (codes.size() != ids.size())
    throw DataError("concept_from_correlation: " + std::to_string(codes.size()) + " codes but " +
                    std::to_string(ids.size()) + " ids");
  if (anchor_ids.empty()) throw UsageError("concept_from_correlation: at least one anchor id is required");
  if (k == 0) throw UsageError("concept_from_correlation: k must be positive");
  std::vector<bool> is_anchor(codes.size(), false);
  std::vector<LatentCode> anchors;
  for (const auto& a : anchor_ids) {
    const auto it = std::find(ids.begin(), ids.end(), a);
    if (it == ids.end()) throw DataError("anchor '" + a + "' is not a sample id");
    const auto idx = static_cast<std::size_t>(it - ids.begin());
    if (!is_anchor[idx]) anchors.push_back(codes[idx]);
    is_anchor[idx] = true;
  }
  const std::size_t pool = codes.size() - anchors.size();
  if (k > pool)
    throw UsageError("concept_from_correlation: k=" + std::to_string(k) + " exceeds the " + std::to_string(pool) +
                     " non-anchor samples");
  const auto anchor = mean_of(anchors, "anchor");

  CorrelationConcept out;
  out.correlations.assign(codes.size(), std::numeric_limits<double>::quiet_NaN());
  std::vector<std::size_t> candidates;
  std::vector<double> sample(anchor.size());
  for (std::size_t i = 0; i < codes.size(); ++i) {
    if (is_anchor[i]) continue;
    if (codes[i].mean.size() != anchor.size())
      throw DataError("sample '" + ids[i] + "' has latent size " + std::to_string(codes[i].mean.size()) +
                      ", anchors have " + std::to_string(anchor.size()));
    std::copy(codes[i].mean.begin(), codes[i].mean.end(), sample.begin());
    const auto r = pearson(std::span<const double>(sample), std::span<const double>(anchor));
    if (!r) {
      ++out.excluded_zero_variance;
      continue;
    }
    out.correlations[i] = *r;
    candidates.push_back(i);
  }
  if (candidates.size() < k)
    throw DataError("concept_from_correlation: only " + std::to_string(candidates.size()) +
                    " samples have a defined correlation, k=" + std::to_string(k));
  std::stable_sort(candidates.begin(), candidates.end(),
                   [&](std::size_t a, std::size_t b) { return out.correlations[a] > out.correlations[b]; });
  out.selected.assign(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(k));

  std::vector<LatentCode> chosen;
  chosen.reserve(k);
  for (std::size_t i : out.selected) chosen.push_back(codes[i]);
  const auto direction = mean_of(chosen, "selected");

  ConceptVector& c = out.concept_vector;
  c.name = name.empty() ? "corr:" + anchor_ids.front() : std::move(name);
  c.provenance = ConceptProvenance::correlation_top_k;
  c.n_pos = k;
  c.n_neg = 0;
  c.direction.assign(direction.begin(), direction.end());
  nlohmann::json selected_ids = nlohmann::json::array();
  for (std::size_t i : out.selected) selected_ids.push_back(ids[i]);
  c.details = {{"anchors", std::vector<std::string>(anchor_ids.begin(), anchor_ids.end())},
               {"k", k},
               {"selected", std::move(selected_ids)},
               {"excluded_zero_variance", out.excluded_zero_variance}};
  return out;
}

double auc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size())
    throw DataError("auc: " + std::to_string(scores.size()) + " scores but " + std::to_string(labels.size()) +
                    " labels");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t t = i; t < j; ++t)
      if (labels[order[t]]) {
        rank_sum += avg_rank;
        ++n_pos;
      }
    i = j;
  }
  const std::size_t n_neg = scores.size() - n_pos;
  if (n_pos == 0 || n_neg == 0)
    throw DataError("AUC is undefined: only " + std::string(n_pos == 0 ? "negative" : "positive") +
                    " samples are present");
  const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
  return (rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

ScoreReport score_report(std::span<const double> scores, std::span<const std::uint8_t> labels, std::string concept_name,
                         std::size_t bins) {
  if (bins == 0) throw UsageError("score_report: bins must be positive");
  ScoreReport r;
  r.concept_name = std::move(concept_name);
  r.auc = auc(scores, labels);
  r.scores.assign(scores.begin(), scores.end());
  r.labels.assign(labels.begin(), labels.end());

  double sum[2] = {0.0, 0.0}, sq[2] = {0.0, 0.0};
  std::size_t n[2] = {0, 0};
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const int g = labels[i] ? 1 : 0;
    sum[g] += scores[i];
    ++n[g];
  }
  r.mean_negative = sum[0] / static_cast<double>(n[0]);
  r.mean_positive = sum[1] / static_cast<double>(n[1]);
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const int g = labels[i] ? 1 : 0;
    const double d = scores[i] - (g ? r.mean_positive : r.mean_negative);
    sq[g] += d * d;
  }
  const double dof = static_cast<double>(n[0] + n[1]) - 2.0;
  const double pooled = dof > 0.0 ? std::sqrt((sq[0] + sq[1]) / dof) : 0.0;
  const double diff = r.mean_positive - r.mean_negative;
  r.mean_gap = pooled > 0.0 ? diff / pooled
                            : (diff == 0.0 ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), diff));

  const auto [lo, hi] = std::minmax_element(scores.begin(), scores.end());
  Histogram& h = r.histogram;
  h.lo = *lo;
  h.hi = *hi;
  h.positive.assign(bins, 0);
  h.negative.assign(bins, 0);
  const double width = (h.hi - h.lo) / static_cast<double>(bins);
  for (std::size_t i = 0; i < scores.size(); ++i) {
    std::size_t b = width > 0.0 ? static_cast<std::size_t>((scores[i] - h.lo) / width) : 0;
    b = std::min(b, bins - 1);
    (labels[i] ? h.positive : h.negative)[b] += 1;
  }
  return r;
}

ScoreReport score_report(const VaeModel& model, const ConceptVector& concept_vector, const Dataset& data,
                         const std::string& attribute, std::size_t bins) {
  if (concept_vector.direction.size() != model.latent_dim())
    throw DataError("concept '" + concept_vector.name + "' has " + std::to_string(concept_vector.direction.size()) +
                    " dims but the model latent_dim is " + std::to_string(model.latent_dim()));
  const auto& labels = data.label(attribute);
  const auto codes = encode_dataset(model, data);
  std::vector<double> scores(codes.size());
  for (std::size_t i = 0; i < codes.size(); ++i) scores[i] = concept_score(concept_vector, codes[i].mean);
  return score_report(scores, labels, concept_vector.name, bins);
}

nlohmann::json to_json(const ScoreReport& r) {
  auto finite_or_null = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
  return {{"concept", r.concept_name},
          {"n", r.scores.size()},
          {"auc", r.auc},
          {"mean_gap_pooled_sd", finite_or_null(r.mean_gap)},
          {"mean_positive", r.mean_positive},
          {"mean_negative", r.mean_negative},
          {"scores", r.scores},
          {"labels", r.labels},
          {"histogram",
           {{"lo", r.histogram.lo},
            {"hi", r.histogram.hi},
            {"bins", r.histogram.positive.size()},
            {"positive", r.histogram.positive},
            {"negative", r.histogram.negative}}}};
}

void save_concept(const ConceptVector& concept_vector, const std::filesystem::path& path) {
  Container c;
  c.manifest["kind"] = "concept";
  c.manifest["name"] = concept_vector.name;
  c.manifest["provenance"] = to_string(concept_vector.provenance);
  c.manifest["n_pos"] = concept_vector.n_pos;
  c.manifest["n_neg"] = concept_vector.n_neg;
  c.manifest["details"] = concept_vector.details;
  c.add("direction", Tensor<float>({concept_vector.direction.size()}, concept_vector.direction));
  write_container(c, path);
}

ConceptVector load_concept(const std::filesystem::path& path) {
  const Container c = read_container(path);
  if (c.manifest.value("kind", "") != "concept") throw DataError(path.string() + " is not a concept file");
  try {
    ConceptVector v;
    v.name = c.manifest.at("name").get<std::string>();
    const auto prov = c.manifest.at("provenance").get<std::string>();
    if (prov == "attribute-mean-difference")
      v.provenance = ConceptProvenance::attribute_mean_difference;
    else if (prov == "correlation-top-k")
      v.provenance = ConceptProvenance::correlation_top_k;
    else
      throw DataError(path.string() + ": unknown concept provenance '" + prov + "'");
    v.n_pos = c.manifest.at("n_pos").get<std::size_t>();
    v.n_neg = c.manifest.at("n_neg").get<std::size_t>();
    v.details = c.manifest.value("details", nlohmann::json::object());
    const auto& dir = c.array("direction");
    v.direction.assign(dir.data(), dir.data() + dir.size());
    return v;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": malformed concept manifest: " + e.what());
  }
}

}  // namespace csmap
