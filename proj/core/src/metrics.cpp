#include "permflow/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>

#include <fmt/format.h>

#include "permflow/errors.hpp"

namespace permflow {

std::size_t ScoreSet::positives() const {
  return static_cast<std::size_t>(std::count(positive.begin(), positive.end(), true));
}

namespace {

struct Group {
  double score;
  std::size_t pos;
  std::size_t neg;
};

// Distinct scores in descending order with class counts per score.
std::vector<Group> descending_groups(const ScoreSet& s, const char* metric) {
  if (s.scores.size() != s.positive.size()) throw DimensionError("score set: scores and labels differ in length");
  for (const double v : s.scores) {
    if (!std::isfinite(v)) throw NumericError(fmt::format("{}: non-finite score", metric));
  }
  const std::size_t p = s.positives();
  if (p == 0 || p == s.size()) {
    throw UndefinedMetricError(fmt::format("{} needs both fault and nominal windows ({} of {} positive)", metric, p, s.size()));
  }
  std::vector<std::size_t> order(s.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return s.scores[a] > s.scores[b]; });
  std::vector<Group> groups;
  for (const std::size_t i : order) {
    if (groups.empty() || groups.back().score != s.scores[i]) groups.push_back({s.scores[i], 0, 0});
    (s.positive[i] ? groups.back().pos : groups.back().neg)++;
  }
  return groups;
}

}  // namespace

double auroc(const ScoreSet& s) {
  const auto groups = descending_groups(s, "AUROC");
  const std::uint64_t p = s.positives(), n = s.negatives();
  // Twice the Mann-Whitney U: a win counts 2, a tie 1.
  std::uint64_t doubled = 0;
  std::uint64_t negatives_seen = 0;
  for (const Group& g : groups) {
    const std::uint64_t below = n - negatives_seen - g.neg;
    doubled += 2 * g.pos * below + g.pos * g.neg;
    negatives_seen += g.neg;
  }
  return static_cast<double>(doubled) / static_cast<double>(2 * p * n);
}

double fpr95(const ScoreSet& s) {
  const auto groups = descending_groups(s, "FPR95");
  const std::size_t p = s.positives(), n = s.negatives();
  std::size_t tp = 0, fp = 0;
  for (const Group& g : groups) {
    tp += g.pos;
    fp += g.neg;
    if (100 * tp >= 95 * p) return static_cast<double>(fp) / static_cast<double>(n);
  }
  return 1.0;  // unreachable: the lowest threshold flags everything
}

F1Result best_f1(const ScoreSet& s) {
  const auto groups = descending_groups(s, "F1");
  const std::size_t p = s.positives(), n = s.negatives();
  F1Result best;
  bool have = false;
  std::size_t tp = 0, fp = 0;
  for (const Group& g : groups) {
    tp += g.pos;
    fp += g.neg;
    const double f1 = static_cast<double>(2 * tp) / static_cast<double>(2 * tp + fp + (p - tp));
    if (!have || f1 > best.f1) {
      best.f1 = f1;
      best.threshold = g.score;
      best.counts = {tp, fp, p - tp, n - fp};
      have = true;
    }
  }
  return best;
}

double average_precision(const ScoreSet& s) {
  const auto groups = descending_groups(s, "average precision");
  const std::size_t p = s.positives();
  std::size_t tp = 0, fp = 0;
  double ap = 0.0;
  for (const Group& g : groups) {
    tp += g.pos;
    fp += g.neg;
    if (g.pos == 0) continue;
    const double recall_step = static_cast<double>(g.pos) / static_cast<double>(p);
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    ap += recall_step * precision;
  }
  return ap;
}

MetricsReport evaluate_scores(const ScoreSet& s) {
  MetricsReport r;
  r.auroc = auroc(s);
  r.fpr95 = fpr95(s);
  const F1Result f = best_f1(s);
  r.f1 = f.f1;
  r.threshold = f.threshold;
  r.counts = f.counts;
  r.average_precision = average_precision(s);
  return r;
}

void to_json(nlohmann::json& j, const MetricsReport& r) {
  j = nlohmann::json{{"auroc", r.auroc},
                     {"fpr95", r.fpr95},
                     {"f1", r.f1},
                     {"average_precision", r.average_precision},
                     {"threshold", r.threshold},
                     {"tp", r.counts.tp},
                     {"fp", r.counts.fp},
                     {"fn", r.counts.fn},
                     {"tn", r.counts.tn}};
}

void from_json(const nlohmann::json& j, MetricsReport& r) {
  r.auroc = j.at("auroc").get<double>();
  r.fpr95 = j.at("fpr95").get<double>();
  r.f1 = j.at("f1").get<double>();
  r.average_precision = j.at("average_precision").get<double>();
  r.threshold = j.value("threshold", 0.0);
  r.counts.tp = j.value("tp", std::size_t{0});
  r.counts.fp = j.value("fp", std::size_t{0});
  r.counts.fn = j.value("fn", std::size_t{0});
  r.counts.tn = j.value("tn", std::size_t{0});
}

ScoreSet score_windows(FlowModel& model, const WindowedDataset& data, ScoringStats* stats,
                       std::size_t batch) {
  if (batch == 0) batch = 1;
  ScoreSet out;
  out.scores.reserve(data.size());
  const std::size_t d = data.dim();
  std::size_t out_of_range = 0;
  for (std::size_t begin = 0; begin < data.size(); begin += batch) {
    const std::size_t rows = std::min(batch, data.size() - begin);
    const auto slice = data.windows.values().subspan(begin * d, rows * d);
    for (std::size_t i = 0; i < rows; ++i) {
      const auto w = slice.subspan(i * d, d);
      if (std::any_of(w.begin(), w.end(), [](double v) { return v < -1.0 || v > 2.0; })) ++out_of_range;
    }
    const DenseArray x({rows, d}, std::vector<double>(slice.begin(), slice.end()));
    for (const double lp : model.log_prob(x)) out.scores.push_back(-lp);
  }
  for (const RowLabel label : data.labels) out.positive.push_back(label == RowLabel::kFault);
  if (stats != nullptr) stats->out_of_range_windows = out_of_range;
  return out;
}

}  // namespace permflow
