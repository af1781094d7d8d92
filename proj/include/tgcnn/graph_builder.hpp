#pragma once

// Code vocabulary and the sparse temporal-graph 3-tensor built from a patient's visits.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <tuple>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "tgcnn/cohort.hpp"
#include "tgcnn/date.hpp"
#include "tgcnn/error.hpp"
#include "tgcnn/log.hpp"

namespace tgcnn::graph {

/// Bijective code <-> node index map, ranked by frequency (index 0 = most frequent).
class CodeVocabulary {
 public:
  CodeVocabulary() = default;
  explicit CodeVocabulary(std::vector<std::string> codes, double coverage = 1.0) : codes_(std::move(codes)), coverage_(coverage) {
    for (std::size_t i = 0; i < codes_.size(); ++i) {
      if (!index_.emplace(codes_[i], static_cast<int>(i)).second) throw DataError("duplicate code in vocabulary: " + codes_[i]);
    }
  }

  std::size_t size() const noexcept { return codes_.size(); }
  const std::vector<std::string>& codes() const noexcept { return codes_; }
  const std::string& code(std::size_t idx) const { return codes_.at(idx); }
  std::optional<int> index(const std::string& code) const {
    auto it = index_.find(code);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }
  bool contains(const std::string& code) const { return index_.count(code) != 0; }

  /// Share of code occurrences in the build corpus covered by the kept codes.
  double coverage() const noexcept { return coverage_; }
  bool has_prescriptions() const noexcept { return extended_; }

  /// Appends the six prescription nodes. Throws if already extended.
  CodeVocabulary with_prescriptions() const {
    if (extended_) throw ConfigError("vocabulary already extended with prescriptions");
    auto codes = codes_;
    for (const auto& rx : cohort::prescription_codes()) codes.push_back(rx);
    CodeVocabulary out(std::move(codes), coverage_);
    out.extended_ = true;
    return out;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    out << "# coverage=" << coverage_ << " prescriptions=" << (extended_ ? 1 : 0) << '\n';
    for (const auto& c : codes_) out << c << '\n';
  }

  static CodeVocabulary load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    std::string line;
    double coverage = 1.0;
    bool extended = false;
    std::vector<std::string> codes;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      if (line[0] == '#') {
        std::istringstream ss(line.substr(1));
        std::string tok;
        while (ss >> tok) {
          if (tok.starts_with("coverage=")) coverage = std::stod(tok.substr(9));
          if (tok.starts_with("prescriptions=")) extended = tok.substr(14) == "1";
        }
        continue;
      }
      codes.push_back(line);
    }
    CodeVocabulary v(std::move(codes), coverage);
    v.extended_ = extended;
    return v;
  }

 private:
  std::vector<std::string> codes_;
  std::unordered_map<std::string, int> index_;
  double coverage_ = 1.0;
  bool extended_ = false;
};

/// Top-`max_size` codes by occurrence count (ties lexicographic). Prescription
/// tokens are left out; they only enter through `with_prescriptions`.
inline CodeVocabulary build_vocabulary(const std::vector<cohort::PatientHistory>& histories, std::size_t max_size = 512) {
  if (max_size < 1) throw ConfigError("vocabulary size must be >= 1");
  std::map<std::string, std::size_t> counts;
  std::size_t total = 0;
  for (const auto& h : histories)
    for (const auto& v : h.visits)
      for (const auto& c : v.codes) {
        if (cohort::is_prescription_code(c)) continue;
        ++counts[c];
        ++total;
      }
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  if (ranked.size() < max_size) {
    log_warning("only " + std::to_string(ranked.size()) + " distinct codes available for a vocabulary of " +
                std::to_string(max_size) + "; using all of them");
  } else {
    ranked.resize(max_size);
  }
  std::size_t kept = 0;
  std::vector<std::string> codes;
  codes.reserve(ranked.size());
  for (auto& [code, n] : ranked) {
    kept += n;
    codes.push_back(std::move(code));
  }
  const double coverage = total == 0 ? 1.0 : static_cast<double>(kept) / static_cast<double>(total);
  return CodeVocabulary(std::move(codes), coverage);
}

inline CodeVocabulary extend_vocabulary_with_prescriptions(const CodeVocabulary& vocab) { return vocab.with_prescriptions(); }

/// Elapsed months between two dates (days / 30.44).
inline double elapsed_months(Date a, Date b) {
  if (b < a) throw DataError("elapsed_months: second date precedes the first");
  return static_cast<double>(days_between(a, b)) / kDaysPerMonth;
}

struct TensorEntry {
  int i = 0;  ///< source node
  int j = 0;  ///< target node
  int k = 0;  ///< time slot
  double t = 0.0;  ///< elapsed months

  friend bool operator==(const TensorEntry&, const TensorEntry&) = default;
};

/// Coordinate-list V x V x K tensor; entries sorted by (k, i, j), unique.
struct TemporalGraphTensor {
  std::vector<TensorEntry> entries;
  int V = 0;
  int K = 0;

  std::size_t nnz() const noexcept { return entries.size(); }
};

struct TensorOptions {
  int K = 100;
  /// When set, only the K most recent visits are used (at most K-1 transitions).
  bool cap_visits = false;
  /// t = 0 edges between distinct codes of the target visit, added in that
  /// transition's slot. Off by default; breaks the one-t-per-slot property.
  bool intra_visit_edges = false;
};

/// Builds the tensor for one patient. Codes outside the vocabulary are dropped
/// first and visits left empty disappear. The most recent transition sits at k = K-1.
inline TemporalGraphTensor build_tensor(const cohort::PatientHistory& history, const CodeVocabulary& vocab,
                                        const TensorOptions& opt = {}) {
  if (opt.K < 1) throw ConfigError("K must be >= 1");
  struct Kept {
    Date date;
    std::vector<int> nodes;
  };
  std::vector<Kept> visits;
  for (const auto& v : history.visits) {
    Kept kept{v.date, {}};
    for (const auto& c : v.codes)
      if (auto idx = vocab.index(c)) kept.nodes.push_back(*idx);
    if (kept.nodes.empty()) continue;
    std::sort(kept.nodes.begin(), kept.nodes.end());
    kept.nodes.erase(std::unique(kept.nodes.begin(), kept.nodes.end()), kept.nodes.end());
    visits.push_back(std::move(kept));
  }
  if (visits.size() < 2) throw DataError("insufficient visits for patient '" + history.patient_id + "'");
  if (opt.cap_visits && visits.size() > static_cast<std::size_t>(opt.K))
    visits.erase(visits.begin(), visits.end() - opt.K);

  const std::size_t n_transitions = std::min(visits.size() - 1, static_cast<std::size_t>(opt.K));
  const std::size_t first = visits.size() - 1 - n_transitions;

  TemporalGraphTensor tensor;
  tensor.V = static_cast<int>(vocab.size());
  tensor.K = opt.K;
  for (std::size_t m = first; m + 1 < visits.size(); ++m) {
    const int k = opt.K - static_cast<int>(n_transitions) + static_cast<int>(m - first);
    const double t = elapsed_months(visits[m].date, visits[m + 1].date);
    std::vector<TensorEntry> slot;
    for (const int a : visits[m].nodes)
      for (const int b : visits[m + 1].nodes) slot.push_back({a, b, k, t});
    if (opt.intra_visit_edges) {
      const auto& target = visits[m + 1].nodes;
      for (const int a : target)
        for (const int b : target)
          if (a != b) {
            const bool exists = std::any_of(slot.begin(), slot.end(), [&](const TensorEntry& e) { return e.i == a && e.j == b; });
            if (!exists) slot.push_back({a, b, k, 0.0});
          }
    }
    std::sort(slot.begin(), slot.end(), [](const auto& x, const auto& y) { return std::tie(x.i, x.j) < std::tie(y.i, y.j); });
    tensor.entries.insert(tensor.entries.end(), slot.begin(), slot.end());
  }
  return tensor;
}

/// Debug dump: header `V K n_entries`, then one `i j k t` line per entry.
inline void write_tensor(std::ostream& out, const TemporalGraphTensor& t) {
  out << t.V << ' ' << t.K << ' ' << t.entries.size() << '\n';
  out.precision(17);
  for (const auto& e : t.entries) out << e.i << ' ' << e.j << ' ' << e.k << ' ' << e.t << '\n';
}

inline TemporalGraphTensor read_tensor(std::istream& in) {
  TemporalGraphTensor t;
  std::size_t n = 0;
  if (!(in >> t.V >> t.K >> n)) throw DataError("tensor dump: bad header");
  t.entries.resize(n);
  for (auto& e : t.entries)
    if (!(in >> e.i >> e.j >> e.k >> e.t)) throw DataError("tensor dump: truncated entry list");
  return t;
}

}  // namespace tgcnn::graph
