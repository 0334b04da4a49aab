#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "fusedesc/errors.hpp"

namespace fusedesc {

// Matching pairs are expected to have low distance.
struct ScoredPair {
  std::uint64_t id = 0;
  int label = 0;
  double distance = 0.0;
};

struct RocPoint {
  double threshold = 0.0;
  double tpr = 0.0;
  double fpr = 0.0;

  friend bool operator==(const RocPoint&, const RocPoint&) = default;
};

// Cosine similarity in [-1,1] mapped to a distance in [0,1].
inline double cosine_to_distance(double cosine) { return (1.0 - cosine) / 2.0; }

// Step-function ROC: one point per distinct distance t, with TPR/FPR the
// fraction of positives/negatives at distance <= t. Points ascend in t.
inline std::vector<RocPoint> roc(std::span<const ScoredPair> pairs) {
  std::size_t positives = 0, negatives = 0;
  for (const auto& p : pairs) {
    if (!std::isfinite(p.distance)) throw EvaluationError("non-finite distance in pair set");
    (p.label == 1 ? positives : negatives)++;
  }
  if (positives == 0 || negatives == 0) {
    throw EvaluationError("ROC needs both matching and non-matching pairs");
  }
  std::vector<std::pair<double, int>> sorted;
  sorted.reserve(pairs.size());
  for (const auto& p : pairs) sorted.emplace_back(p.distance, p.label);
  std::sort(sorted.begin(), sorted.end());
  std::vector<RocPoint> points;
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < sorted.size();) {
    const double t = sorted[i].first;
    for (; i < sorted.size() && sorted[i].first == t; ++i) {
      (sorted[i].second == 1 ? tp : fp)++;
    }
    points.push_back({t, static_cast<double>(tp) / positives,
                      static_cast<double>(fp) / negatives});
  }
  return points;
}

// FPR at the smallest threshold whose TPR reaches `target`.
inline double fpr_at_tpr(std::span<const RocPoint> points, double target = 0.95) {
  for (const auto& p : points) {
    if (p.tpr >= target) return p.fpr;
  }
  throw EvaluationError("target TPR " + std::to_string(target) + " is unreachable");
}

inline double fpr_at_tpr95(std::span<const ScoredPair> pairs) {
  return fpr_at_tpr(roc(pairs), 0.95);
}

struct OverlapClass {
  std::size_t intersection = 0;
  std::size_t union_size = 0;
  double ratio() const {
    return union_size == 0 ? 0.0 : static_cast<double>(intersection) / union_size;
  }
};

struct OverlapReport {
  double threshold = 0.0;
  OverlapClass false_negatives;
  OverlapClass false_positives;
};

// Pairs are predicted matching when distance <= threshold. For each error
// class, reports |errors(A) ∩ errors(B)| / |errors(A) ∪ errors(B)|.
inline OverlapReport error_overlap(std::span<const ScoredPair> run_a,
                                   std::span<const ScoredPair> run_b, double threshold) {
  if (run_a.size() != run_b.size()) throw EvaluationError("runs cover different pair sets");
  std::unordered_map<std::uint64_t, const ScoredPair*> by_id;
  for (const auto& p : run_b) {
    if (!by_id.emplace(p.id, &p).second) throw EvaluationError("duplicate pair id in run B");
  }
  OverlapReport rep;
  rep.threshold = threshold;
  std::unordered_set<std::uint64_t> seen;
  for (const auto& a : run_a) {
    auto it = by_id.find(a.id);
    if (it == by_id.end() || it->second->label != a.label || !seen.insert(a.id).second) {
      throw EvaluationError("runs cover different pair sets (pair " + std::to_string(a.id) +
                            ")");
    }
    const auto& b = *it->second;
    const bool match_a = a.distance <= threshold;
    const bool match_b = b.distance <= threshold;
    OverlapClass& cls = a.label == 1 ? rep.false_negatives : rep.false_positives;
    const bool err_a = a.label == 1 ? !match_a : match_a;
    const bool err_b = a.label == 1 ? !match_b : match_b;
    if (err_a && err_b) ++cls.intersection;
    if (err_a || err_b) ++cls.union_size;
  }
  return rep;
}

enum class ErrorClass { kFalsePositive, kFalseNegative };

// kFalsePositive: non-matching pairs with the smallest distances.
// kFalseNegative: matching pairs with the largest distances.
// Ties are broken by ascending pair id.
inline std::vector<std::uint64_t> top_k_errors(std::span<const ScoredPair> pairs, ErrorClass cls,
                                               std::size_t k) {
  if (k == 0) throw EvaluationError("top_k_errors: k must be at least 1");
  const int label = cls == ErrorClass::kFalsePositive ? 0 : 1;
  std::vector<ScoredPair> candidates;
  for (const auto& p : pairs) {
    if (p.label == label) candidates.push_back(p);
  }
  auto worse = [cls](const ScoredPair& a, const ScoredPair& b) {
    if (a.distance != b.distance) {
      return cls == ErrorClass::kFalsePositive ? a.distance < b.distance
                                               : a.distance > b.distance;
    }
    return a.id < b.id;
  };
  const std::size_t n = std::min(k, candidates.size());
  std::partial_sort(candidates.begin(), candidates.begin() + static_cast<long>(n),
                    candidates.end(), worse);
  std::vector<std::uint64_t> ids;
  for (std::size_t i = 0; i < n; ++i) ids.push_back(candidates[i].id);
  return ids;
}

struct EvalReport {
  std::vector<RocPoint> curve;
  double fpr_at_tpr95 = 0.0;
  std::size_t positives = 0;
  std::size_t negatives = 0;
  std::string config;  // echo of the configuration that produced the scores
};

inline EvalReport evaluate(std::span<const ScoredPair> pairs, std::string config = {}) {
  EvalReport r;
  r.curve = roc(pairs);
  r.fpr_at_tpr95 = fpr_at_tpr(r.curve, 0.95);
  for (const auto& p : pairs) (p.label == 1 ? r.positives : r.negatives)++;
  r.config = std::move(config);
  return r;
}

// Spearman rank correlation with average ranks for ties.
inline double rank_correlation(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) {
    throw EvaluationError("rank_correlation needs two equal-length sequences");
  }
  auto ranks = [](std::span<const double> v) {
    std::vector<std::size_t> idx(v.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0;
      for (std::size_t q = i; q <= j; ++q) r[idx[q]] = avg;
      i = j + 1;
    }
    return r;
  };
  const auto rx = ranks(x), ry = ranks(y);
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    mx += rx[i];
    my += ry[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

// ---------------------------------------------------------------------------
// Report files.

namespace detail {
inline std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline std::ofstream open_csv(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  return out;
}
}  // namespace detail

inline void write_roc_csv(std::span<const RocPoint> points, const std::filesystem::path& path) {
  auto out = detail::open_csv(path);
  out << "threshold,tpr,fpr\n";
  for (const auto& p : points) {
    out << detail::fmt(p.threshold) << ',' << detail::fmt(p.tpr) << ',' << detail::fmt(p.fpr)
        << '\n';
  }
}

struct SummaryRow {
  std::string setup;
  std::size_t descriptor_bits = 0;
  std::string config;
  double fpr_at_tpr95 = 0.0;
};

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) {
    if (c == '"') q += '"';
    q += c;
  }
  return q + '"';
}

inline void write_summary_csv(std::span<const SummaryRow> rows,
                              const std::filesystem::path& path) {
  auto out = detail::open_csv(path);
  out << "setup,B,config,fpr_at_tpr95\n";
  for (const auto& r : rows) {
    out << csv_field(r.setup) << ',' << r.descriptor_bits << ',' << csv_field(r.config) << ','
        << detail::fmt(r.fpr_at_tpr95) << '\n';
  }
}

inline void write_overlap_csv(const OverlapReport& rep, const std::filesystem::path& path) {
  auto out = detail::open_csv(path);
  out << "class,intersection,union,ratio\n";
  out << "false_negative," << rep.false_negatives.intersection << ','
      << rep.false_negatives.union_size << ',' << detail::fmt(rep.false_negatives.ratio())
      << '\n';
  out << "false_positive," << rep.false_positives.intersection << ','
      << rep.false_positives.union_size << ',' << detail::fmt(rep.false_positives.ratio())
      << '\n';
}

// Scored pairs CSV: pair_id,label,distance.
inline void write_scored_csv(std::span<const ScoredPair> pairs,
                             const std::filesystem::path& path) {
  auto out = detail::open_csv(path);
  out << "pair_id,label,distance\n";
  for (const auto& p : pairs) {
    out << p.id << ',' << p.label << ',' << detail::fmt(p.distance) << '\n';
  }
}

inline std::vector<ScoredPair> read_scored_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw EvaluationError("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (line.rfind("pair_id,label,distance", 0) != 0) {
    throw FormatError(path.filename().string() + ": missing header", 0);
  }
  std::vector<ScoredPair> pairs;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    std::istringstream ls(line);
    ScoredPair p;
    char c1, c2;
    if (!(ls >> p.id >> c1 >> p.label >> c2 >> p.distance) || c1 != ',' || c2 != ',') {
      throw FormatError(path.filename().string() + ": bad row " + std::to_string(line_no), 0);
    }
    pairs.push_back(p);
  }
  return pairs;
}

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

// Self-contained SVG of one or more ROC curves (FPR on x, TPR on y), axes
// fixed to [0,1]^2.
inline std::string roc_svg(const std::vector<std::pair<std::string, std::vector<RocPoint>>>& curves,
                           const std::string& title) {
  constexpr double W = 480, H = 480, M = 60;
  const double pw = W - 2 * M, ph = H - 2 * M;
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};
  auto px = [&](double fpr) { return M + fpr * pw; };
  auto py = [&](double tpr) { return H - M - tpr * ph; };
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
     << "\" viewBox=\"0 0 " << W << ' ' << H << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << W / 2 << "\" y=\"30\" text-anchor=\"middle\" font-family=\"sans-serif\" "
        "font-size=\"16\">"
     << xml_escape(title) << "</text>\n";
  os << "<rect x=\"" << M << "\" y=\"" << M << "\" width=\"" << pw << "\" height=\"" << ph
     << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double v = i / 4.0;
    os << "<text x=\"" << px(v) << "\" y=\"" << H - M + 18
       << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" << v
       << "</text>\n";
    os << "<text x=\"" << M - 8 << "\" y=\"" << py(v) + 4
       << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" << v
       << "</text>\n";
  }
  os << "<text x=\"" << W / 2 << "\" y=\"" << H - 15
     << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">FPR</text>\n";
  os << "<text x=\"18\" y=\"" << H / 2 << "\" transform=\"rotate(-90 18 " << H / 2
     << ")\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">TPR</text>\n";
  os << "<line x1=\"" << M << "\" y1=\"" << py(0.95) << "\" x2=\"" << W - M << "\" y2=\""
     << py(0.95) << "\" stroke=\"#999\" stroke-dasharray=\"4 3\"/>\n";
  for (std::size_t c = 0; c < curves.size(); ++c) {
    const char* color = colors[c % 5];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\""
       << px(0) << ',' << py(0);
    double prev_tpr = 0.0;
    for (const auto& p : curves[c].second) {
      os << ' ' << px(p.fpr) << ',' << py(prev_tpr) << ' ' << px(p.fpr) << ',' << py(p.tpr);
      prev_tpr = p.tpr;
    }
    os << "\"/>\n";
    os << "<text x=\"" << M + pw - 10 << "\" y=\"" << M + ph - 10 - 16.0 * c
       << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"12\" fill=\"" << color
       << "\">" << xml_escape(curves[c].first) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

inline void write_roc_svg(const std::vector<std::pair<std::string, std::vector<RocPoint>>>& curves,
                          const std::string& title, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << roc_svg(curves, title);
}

}  // namespace fusedesc
