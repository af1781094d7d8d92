#pragma once

// Patient records: CSV ingestion, the synthetic cohort generator, time
// windowing, inclusion, case-control matching and the train/test/fold split.

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <unordered_map>
#include <utility>
#include <vector>

#include "tgcnn/date.hpp"
#include "tgcnn/error.hpp"
#include "tgcnn/log.hpp"
#include "tgcnn/random.hpp"

namespace tgcnn::cohort {

enum class Sex { female, male };

inline char sex_code(Sex s) { return s == Sex::female ? 'F' : 'M'; }

struct EventRecord {
  std::string patient_id;
  Date date;
  std::string code;
};

struct Demographics {
  Sex sex = Sex::female;
  int birth_year = 1950;
  int imd_quintile = 3;  ///< 1 = most deprived

  friend bool operator==(const Demographics&, const Demographics&) = default;
};

/// All codes recorded for one patient on one calendar date. Codes are sorted and unique.
struct Visit {
  Date date;
  std::vector<std::string> codes;

  friend bool operator==(const Visit&, const Visit&) = default;
};

struct PatientHistory {
  std::string patient_id;
  std::vector<Visit> visits;
  Demographics demographics;
  std::optional<Date> replacement_date;
  bool label = false;
  bool deceased = false;  ///< generator flag only; nothing downstream censors on it

  friend bool operator==(const PatientHistory&, const PatientHistory&) = default;
};

struct AnalysisPeriod {
  Date start{1900, 1, 1};
  Date end{2100, 12, 31};

  bool contains(Date d) const { return start <= d && d <= end; }
};

/// Whole years, using birth year only (birth dates are not recorded).
inline int age_at(const Demographics& demo, Date when) { return when.year() - demo.birth_year; }

/// Date the prediction is made for: the last retained visit.
inline std::optional<Date> prediction_date(const PatientHistory& h) {
  if (h.visits.empty()) return std::nullopt;
  return h.visits.back().date;
}

inline int age_at_prediction(const PatientHistory& h) {
  const auto d = prediction_date(h);
  return age_at(h.demographics, d ? *d : Date(2000, 1, 1));
}

/// Adds a code to a visit keeping the code list sorted and unique.
inline void add_code(Visit& v, std::string code) {
  auto it = std::lower_bound(v.codes.begin(), v.codes.end(), code);
  if (it == v.codes.end() || *it != code) v.codes.insert(it, std::move(code));
}

/// Groups event records by patient and date into visits (sorted by date, codes deduplicated).
inline std::vector<Visit> group_into_visits(std::vector<std::pair<Date, std::string>> events) {
  std::sort(events.begin(), events.end());
  std::vector<Visit> visits;
  for (auto& [date, code] : events) {
    if (visits.empty() || visits.back().date != date) visits.push_back(Visit{date, {}});
    add_code(visits.back(), std::move(code));
  }
  return visits;
}

// --------------------------------------------------------------------------
// CSV ingestion

namespace detail {

inline std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const auto pos = line.find(',', start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

/// Column (1-based, in characters) where field `idx` starts.
inline std::size_t column_of(const std::vector<std::string_view>& fields, std::size_t idx) {
  std::size_t col = 1;
  for (std::size_t i = 0; i < idx && i < fields.size(); ++i) col += fields[i].size() + 1;
  return col;
}

/// Reads a CSV with an exact header and `n_fields` columns per row.
template <class RowFn>
void read_csv(const std::filesystem::path& path, std::string_view header, std::size_t n_fields, RowFn&& on_row) {
  std::ifstream in(path);
  if (!in) throw DataError(path.string(), 0, 0, "cannot open file");
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(in, line)) throw DataError(path.string(), 1, 1, "missing header");
  ++line_no;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
  if (line != header) throw DataError(path.string(), 1, 1, "expected header '" + std::string(header) + "'");
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = split_commas(line);
    if (fields.size() != n_fields) {
      throw DataError(path.string(), line_no, column_of(fields, std::min(fields.size(), n_fields)),
                      "expected " + std::to_string(n_fields) + " fields, found " + std::to_string(fields.size()));
    }
    auto fail = [&](std::size_t field, const std::string& msg) {
      throw DataError(path.string(), line_no, column_of(fields, field), msg);
    };
    on_row(fields, fail);
  }
}

inline bool is_identifier(std::string_view s) {
  return !s.empty() && std::all_of(s.begin(), s.end(), [](char c) {
    return (c >= '0' && c <= '9') || (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z') || c == '_' || c == '-' || c == '.';
  });
}

}  // namespace detail

/// Reads events.csv, demographics.csv and outcomes.csv into one history per patient,
/// ordered by patient_id. Labels are set from outcomes inside `period`.
inline std::vector<PatientHistory> ingest_cohort(const std::filesystem::path& events_path,
                                                 const std::filesystem::path& demographics_path,
                                                 const std::filesystem::path& outcomes_path,
                                                 const AnalysisPeriod& period = {}) {
  std::map<std::string, PatientHistory> patients;

  detail::read_csv(demographics_path, "patient_id,sex,birth_year,imd_quintile", 4, [&](const auto& f, auto fail) {
    if (!detail::is_identifier(f[0])) fail(0, "invalid patient_id");
    PatientHistory h;
    h.patient_id = std::string(f[0]);
    if (f[1] == "F") {
      h.demographics.sex = Sex::female;
    } else if (f[1] == "M") {
      h.demographics.sex = Sex::male;
    } else {
      fail(1, "sex must be F or M");
    }
    int by = 0, imd = 0;
    if (auto [p, ec] = std::from_chars(f[2].data(), f[2].data() + f[2].size(), by); ec != std::errc{} || p != f[2].data() + f[2].size())
      fail(2, "birth_year is not an integer");
    if (auto [p, ec] = std::from_chars(f[3].data(), f[3].data() + f[3].size(), imd);
        ec != std::errc{} || p != f[3].data() + f[3].size() || imd < 1 || imd > 5)
      fail(3, "imd_quintile must be an integer in 1..5");
    h.demographics.birth_year = by;
    h.demographics.imd_quintile = imd;
    if (!patients.emplace(h.patient_id, std::move(h)).second) fail(0, "duplicate patient_id");
  });

  std::map<std::string, std::vector<std::pair<Date, std::string>>> events;
  detail::read_csv(events_path, "patient_id,date,code", 3, [&](const auto& f, auto fail) {
    const std::string id(f[0]);
    if (!patients.count(id)) fail(0, "unknown patient '" + id + "'");
    const auto date = Date::parse(f[1]);
    if (!date) fail(1, "date must be YYYY-MM-DD");
    if (!period.contains(*date)) fail(1, "date outside analysis period");
    if (f[2].empty()) fail(2, "empty code");
    events[id].emplace_back(*date, std::string(f[2]));
  });

  detail::read_csv(outcomes_path, "patient_id,replacement_date", 2, [&](const auto& f, auto fail) {
    const std::string id(f[0]);
    auto it = patients.find(id);
    if (it == patients.end()) fail(0, "unknown patient '" + id + "'");
    const auto date = Date::parse(f[1]);
    if (!date) fail(1, "date must be YYYY-MM-DD");
    if (it->second.replacement_date) fail(0, "duplicate outcome for patient '" + id + "'");
    it->second.replacement_date = *date;
    it->second.label = period.contains(*date);
  });

  std::vector<PatientHistory> out;
  out.reserve(patients.size());
  for (auto& [id, h] : patients) {
    if (auto it = events.find(id); it != events.end()) h.visits = group_into_visits(std::move(it->second));
    out.push_back(std::move(h));
  }
  return out;
}

/// Writes the three CSV files of a cohort into `dir`.
inline void write_cohort_csv(const std::vector<PatientHistory>& histories, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream ev(dir / "events.csv"), dm(dir / "demographics.csv"), oc(dir / "outcomes.csv");
  if (!ev || !dm || !oc) throw DataError("cannot write cohort files under " + dir.string());
  ev << "patient_id,date,code\n";
  dm << "patient_id,sex,birth_year,imd_quintile\n";
  oc << "patient_id,replacement_date\n";
  for (const auto& h : histories) {
    dm << h.patient_id << ',' << sex_code(h.demographics.sex) << ',' << h.demographics.birth_year << ','
       << h.demographics.imd_quintile << '\n';
    for (const auto& v : h.visits)
      for (const auto& c : v.codes) ev << h.patient_id << ',' << v.date.to_string() << ',' << c << '\n';
    if (h.replacement_date) oc << h.patient_id << ',' << h.replacement_date->to_string() << '\n';
  }
}

// --------------------------------------------------------------------------
// Synthetic generator

/// Codes whose probability rises for cases as the replacement approaches.
inline const std::vector<std::string>& signal_codes() {
  static const std::vector<std::string> codes{"HIPPN", "HIPOA", "WLKDF", "JNTST"};
  return codes;
}

/// Prescription tokens: {opioid, non-opioid analgesic, NSAID} x {acute, repeat}.
inline const std::vector<std::string>& prescription_codes() {
  static const std::vector<std::string> codes{"BNF040702A", "BNF040702R", "BNF040701A",
                                              "BNF040701R", "BNF100101A", "BNF100101R"};
  return codes;
}

inline bool is_prescription_code(std::string_view code) { return code.starts_with("BNF"); }

inline std::string background_code(std::size_t rank) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "R%04zu", rank);
  return buf;
}

struct GeneratorConfig {
  std::size_t n_patients = 1000;
  double case_prevalence = 0.07;
  std::size_t vocabulary_size = 120;  ///< distinct diagnosis codes, signal codes included
  double mean_visits = 30.0;          ///< background visits per patient over the whole period
  double mean_codes_per_visit = 1.36;
  AnalysisPeriod period{Date(2000, 1, 1), Date(2019, 12, 31)};
  int min_entry_age = 40;
  int max_entry_age = 75;
  double signal_base_rate = 0.02;       ///< per-code chance of a signal code for anyone
  double signal_strength = 0.45;        ///< extra chance for cases right at the replacement
  double signal_decay_months = 30.0;    ///< e-folding of the case signal going back in time
  double case_extra_visits = 8.0;       ///< mean additional visits in the pre-replacement run-up
  double case_extra_window_months = 48.0;
  double zipf_exponent = 1.0;
  bool emit_prescriptions = false;
  double deceased_fraction = 0.00007;
};

inline void validate(const GeneratorConfig& c) {
  if (!(c.case_prevalence > 0.0 && c.case_prevalence < 1.0)) throw ConfigError("case_prevalence must lie in (0,1)");
  if (c.n_patients == 0) throw ConfigError("n_patients must be positive");
  if (c.vocabulary_size <= signal_codes().size()) throw ConfigError("vocabulary_size must exceed the number of signal codes");
  if (c.mean_visits < 1.0) throw ConfigError("mean_visits must be >= 1");
  if (c.mean_codes_per_visit < 1.0) throw ConfigError("mean_codes_per_visit must be >= 1");
  if (c.min_entry_age > c.max_entry_age) throw ConfigError("min_entry_age exceeds max_entry_age");
  if (c.period.end <= c.period.start.plus_months(72)) throw ConfigError("analysis period must span more than six years");
}

/// Deterministic synthetic cohort; histories ordered by patient_id.
inline std::vector<PatientHistory> generate_synthetic_cohort(const GeneratorConfig& cfg, std::uint64_t seed) {
  validate(cfg);
  Rng rng(seed);
  const std::size_t n_background = cfg.vocabulary_size - signal_codes().size();

  std::vector<double> zipf_cdf(n_background);
  double acc = 0.0;
  for (std::size_t r = 0; r < n_background; ++r) {
    acc += 1.0 / std::pow(static_cast<double>(r + 1), cfg.zipf_exponent);
    zipf_cdf[r] = acc;
  }
  for (auto& x : zipf_cdf) x /= acc;
  auto draw_background = [&] {
    const auto it = std::lower_bound(zipf_cdf.begin(), zipf_cdf.end(), rng.uniform());
    return background_code(static_cast<std::size_t>(std::min<std::ptrdiff_t>(it - zipf_cdf.begin(), n_background - 1)));
  };

  const auto n_cases = static_cast<std::size_t>(std::llround(cfg.case_prevalence * static_cast<double>(cfg.n_patients)));
  std::vector<char> is_case(cfg.n_patients, 0);
  std::fill(is_case.begin(), is_case.begin() + static_cast<std::ptrdiff_t>(std::min(n_cases, cfg.n_patients)), 1);
  rng.shuffle(is_case);

  const Date start = cfg.period.start;
  const Date end = cfg.period.end;
  const long period_days = days_between(start, end);
  const Date earliest_replacement = start.plus_months(60);

  std::vector<PatientHistory> out;
  out.reserve(cfg.n_patients);
  for (std::size_t p = 0; p < cfg.n_patients; ++p) {
    PatientHistory h;
    char id[16];
    std::snprintf(id, sizeof id, "P%06zu", p + 1);
    h.patient_id = id;
    h.demographics.sex = rng.bernoulli(0.5) ? Sex::male : Sex::female;
    h.demographics.imd_quintile = static_cast<int>(rng.uniform_int(1, 5));
    const int entry_age = static_cast<int>(rng.uniform_int(cfg.min_entry_age, cfg.max_entry_age));
    h.demographics.birth_year = start.year() - entry_age;
    h.deceased = rng.bernoulli(cfg.deceased_fraction);

    Date obs_end = end;
    if (is_case[p]) {
      const long span = days_between(earliest_replacement, end);
      h.replacement_date = earliest_replacement.plus_days(rng.uniform_int(0, span));
      h.label = true;
      obs_end = *h.replacement_date;
    }

    std::vector<Date> dates;
    const long obs_days = days_between(start, obs_end);
    const double expected = cfg.mean_visits * static_cast<double>(obs_days) / static_cast<double>(period_days);
    const int n_visits = 1 + rng.poisson(std::max(0.0, expected - 1.0));
    for (int v = 0; v < n_visits; ++v) dates.push_back(start.plus_days(rng.uniform_int(0, std::max(0L, obs_days - 1))));
    if (h.label) {
      const long window = std::min<long>(obs_days, static_cast<long>(cfg.case_extra_window_months * kDaysPerMonth));
      const int extra = rng.poisson(cfg.case_extra_visits);
      for (int v = 0; v < extra; ++v) dates.push_back(obs_end.plus_days(-1 - rng.uniform_int(0, std::max(0L, window - 1))));
    }
    std::sort(dates.begin(), dates.end());

    std::vector<std::pair<Date, std::string>> events;
    for (const Date d : dates) {
      double p_signal = cfg.signal_base_rate;
      double p_rx = 0.05;
      if (h.label) {
        const double months_before = static_cast<double>(days_between(d, obs_end)) / kDaysPerMonth;
        const double boost = std::exp(-months_before / cfg.signal_decay_months);
        p_signal += cfg.signal_strength * boost;
        p_rx += 0.3 * boost;
      }
      const int n_codes = 1 + rng.poisson(cfg.mean_codes_per_visit - 1.0);
      for (int c = 0; c < n_codes; ++c) {
        if (rng.bernoulli(p_signal))
          events.emplace_back(d, signal_codes()[rng.index(signal_codes().size())]);
        else
          events.emplace_back(d, draw_background());
      }
      if (cfg.emit_prescriptions && rng.bernoulli(p_rx)) events.emplace_back(d, prescription_codes()[rng.index(6)]);
    }
    h.visits = group_into_visits(std::move(events));
    out.push_back(std::move(h));
  }
  return out;
}

// --------------------------------------------------------------------------
// Windowing and inclusion

/// Drops case visits on or after (replacement - horizon). Controls pass through.
inline PatientHistory apply_time_window(PatientHistory h, int horizon_months = 12) {
  if (horizon_months <= 0) throw ConfigError("horizon_months must be positive");
  if (h.label && h.replacement_date) {
    const Date cutoff = h.replacement_date->plus_months(-horizon_months);
    std::erase_if(h.visits, [cutoff](const Visit& v) { return v.date >= cutoff; });
    h.label = true;
  } else {
    h.label = false;
  }
  return h;
}

inline constexpr std::size_t kMinVisits = 2;

inline std::vector<PatientHistory> apply_inclusion_criteria(std::vector<PatientHistory> histories) {
  std::erase_if(histories, [](const PatientHistory& h) { return h.visits.size() < kMinVisits; });
  return histories;
}

// --------------------------------------------------------------------------
// Matching

struct MatchPair {
  std::string case_id;
  std::string control_id;
  int age_difference_years = 0;

  friend bool operator==(const MatchPair&, const MatchPair&) = default;
};

struct MatchResult {
  std::vector<MatchPair> pairs;
  std::vector<std::string> unmatched_case_ids;
};

/// Greedy one-to-one matching on exact sex and IMD, nearest age at the case's
/// replacement date. Cases go in ascending id order; ties go to the smaller control id.
inline MatchResult match_case_control(const std::vector<PatientHistory>& pool, int max_age_gap = 5) {
  if (max_age_gap < 0) throw ConfigError("max_age_gap must be >= 0");
  // (sex, imd) -> birth_year -> ids of unused controls
  std::map<std::pair<int, int>, std::map<int, std::set<std::string>>> controls;
  std::vector<const PatientHistory*> cases;
  for (const auto& h : pool) {
    if (h.label) {
      cases.push_back(&h);
    } else {
      controls[{static_cast<int>(h.demographics.sex), h.demographics.imd_quintile}][h.demographics.birth_year].insert(h.patient_id);
    }
  }
  std::sort(cases.begin(), cases.end(), [](auto* a, auto* b) { return a->patient_id < b->patient_id; });

  MatchResult result;
  for (const auto* c : cases) {
    auto stratum = controls.find({static_cast<int>(c->demographics.sex), c->demographics.imd_quintile});
    bool matched = false;
    if (stratum != controls.end()) {
      auto& by_year = stratum->second;
      const Date ref = c->replacement_date.value_or(c->visits.empty() ? Date(2000, 1, 1) : c->visits.back().date);
      const int case_age = age_at(c->demographics, ref);
      for (int gap = 0; gap <= max_age_gap && !matched; ++gap) {
        // control age = ref.year - birth_year, so a gap of `gap` years is birth_year = ref.year - case_age -/+ gap
        const std::string* best = nullptr;
        int best_year = 0;
        for (const int sign : {-1, 1}) {
          if (gap == 0 && sign == 1) break;
          const int year = ref.year() - case_age + sign * gap;
          auto it = by_year.find(year);
          if (it == by_year.end() || it->second.empty()) continue;
          const std::string& candidate = *it->second.begin();
          if (!best || candidate < *best) {
            best = &candidate;
            best_year = year;
          }
        }
        if (best) {
          auto& ids = by_year[best_year];
          const std::string control_id = *best;
          ids.erase(ids.begin());
          result.pairs.push_back(MatchPair{c->patient_id, control_id, gap});
          matched = true;
        }
      }
    }
    if (!matched) result.unmatched_case_ids.push_back(c->patient_id);
  }
  return result;
}

// --------------------------------------------------------------------------
// Splitting

struct CohortSplit {
  std::vector<PatientHistory> matched_train;
  std::vector<PatientHistory> test1;
  std::vector<PatientHistory> test2;
  std::vector<MatchPair> pairs;
  std::vector<std::string> unmatched_case_ids;
  std::map<std::string, int> fold_assignment;
};

struct SplitOptions {
  double test_fraction = 0.10;
  int max_age_gap = 5;
  int n_folds = 5;
};

/// Assigns folds per matched pair so each fold stays balanced. Fold sizes differ by at most one pair.
inline std::map<std::string, int> make_cv_folds(const std::vector<MatchPair>& pairs, int k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("k must be >= 2");
  std::vector<std::size_t> order(pairs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return pairs[a].case_id < pairs[b].case_id; });
  Rng rng(derive_seed(seed, 0xF01D));
  rng.shuffle(order);
  std::map<std::string, int> folds;
  for (std::size_t pos = 0; pos < order.size(); ++pos) {
    const int fold = static_cast<int>(pos % static_cast<std::size_t>(k));
    folds[pairs[order[pos]].case_id] = fold;
    folds[pairs[order[pos]].control_id] = fold;
  }
  return folds;
}

/// Stratified test sample halved into Test 1 / Test 2, matched training set from the rest.
inline CohortSplit split_cohort(std::vector<PatientHistory> histories, std::uint64_t seed, const SplitOptions& opt = {}) {
  if (!(opt.test_fraction > 0.0 && opt.test_fraction < 1.0)) throw ConfigError("test_fraction must lie in (0,1)");
  std::sort(histories.begin(), histories.end(), [](const auto& a, const auto& b) { return a.patient_id < b.patient_id; });
  const auto n_cases = std::count_if(histories.begin(), histories.end(), [](const auto& h) { return h.label; });
  if (histories.size() < 20 || n_cases == 0) throw DataError("cohort too small");

  Rng rng(derive_seed(seed, 0x5B117));
  std::vector<PatientHistory> pool, test1, test2;
  bool extra_to_test1 = true;
  for (const bool label : {true, false}) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < histories.size(); ++i)
      if (histories[i].label == label) idx.push_back(i);
    rng.shuffle(idx);
    const auto n_test = static_cast<std::size_t>(std::llround(opt.test_fraction * static_cast<double>(idx.size())));
    const std::size_t n_first = extra_to_test1 ? (n_test + 1) / 2 : n_test / 2;
    if (n_test % 2 == 1) extra_to_test1 = !extra_to_test1;
    for (std::size_t pos = 0; pos < idx.size(); ++pos) {
      auto& h = histories[idx[pos]];
      if (pos < n_first)
        test1.push_back(std::move(h));
      else if (pos < n_test)
        test2.push_back(std::move(h));
      else
        pool.push_back(std::move(h));
    }
  }
  auto by_id = [](const auto& a, const auto& b) { return a.patient_id < b.patient_id; };
  std::sort(pool.begin(), pool.end(), by_id);
  std::sort(test1.begin(), test1.end(), by_id);
  std::sort(test2.begin(), test2.end(), by_id);

  CohortSplit split;
  auto match = match_case_control(pool, opt.max_age_gap);
  if (!match.unmatched_case_ids.empty())
    log_info("matching: " + std::to_string(match.unmatched_case_ids.size()) + " case(s) left unmatched and dropped");
  std::set<std::string> in_train;
  for (const auto& p : match.pairs) {
    in_train.insert(p.case_id);
    in_train.insert(p.control_id);
  }
  for (auto& h : pool)
    if (in_train.count(h.patient_id)) split.matched_train.push_back(std::move(h));
  split.test1 = std::move(test1);
  split.test2 = std::move(test2);
  split.fold_assignment = make_cv_folds(match.pairs, opt.n_folds, seed);
  split.pairs = std::move(match.pairs);
  split.unmatched_case_ids = std::move(match.unmatched_case_ids);
  return split;
}

/// Windowing followed by inclusion: the standard preparation of raw histories.
inline std::vector<PatientHistory> prepare_histories(std::vector<PatientHistory> raw, int horizon_months = 12) {
  for (auto& h : raw) h = apply_time_window(std::move(h), horizon_months);
  return apply_inclusion_criteria(std::move(raw));
}

}  // namespace tgcnn::cohort
