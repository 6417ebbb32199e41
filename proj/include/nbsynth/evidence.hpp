#pragma once

// Study-level aggregate records, the comma-separated dataset format,
// A/B/C subset classification and the report-format conversions
// (derived totals, standard errors from confidence intervals).

#include <algorithm>
#include <charconv>
#include <cmath>
#include <istream>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <boost/math/distributions/normal.hpp>

#include "nbsynth/nbcore.hpp"

namespace nbsynth {

enum class TreatmentClass { placebo, active };

struct ArmRecord {
  TreatmentClass treatment_class = TreatmentClass::placebo;
  long n_patients = 0;
  std::optional<double> rate_est;
  std::optional<double> std_err;
  std::optional<long> total;
  std::optional<long> zeroes;

  bool has_rate_se() const { return rate_est.has_value() && std_err.has_value(); }
  // A quoted rate implies a total through derive_total.
  bool has_total() const { return total.has_value() || rate_est.has_value(); }
  bool has_zeroes() const { return zeroes.has_value(); }
  bool has_evidence() const {
    return has_rate_se() || has_total() || has_zeroes();
  }
  bool operator==(const ArmRecord&) const = default;
};

struct StudyRecord {
  std::string study_id;
  double duration = 1.0;  // years
  std::vector<ArmRecord> arms;

  std::size_t placebo_index() const {
    for (std::size_t j = 0; j < arms.size(); ++j) {
      if (arms[j].treatment_class == TreatmentClass::placebo) return j;
    }
    throw std::logic_error("study without placebo arm: " + study_id);
  }
  bool operator==(const StudyRecord&) const = default;
};

enum class SubsetLabel { A, B, C };

inline char to_char(SubsetLabel l) {
  switch (l) {
    case SubsetLabel::A: return 'A';
    case SubsetLabel::B: return 'B';
    case SubsetLabel::C: return 'C';
  }
  return '?';
}

inline SubsetLabel parse_subset_label(std::string_view s) {
  if (s == "A") return SubsetLabel::A;
  if (s == "B") return SubsetLabel::B;
  if (s == "C") return SubsetLabel::C;
  throw std::invalid_argument("subset must be one of A, B, C; got '" + std::string(s) + "'");
}

class parse_error : public std::runtime_error {
 public:
  parse_error(std::size_t row, const std::string& what)
      : std::runtime_error("row " + std::to_string(row) + ": " + what), row_(row) {}
  std::size_t row() const { return row_; }

 private:
  std::size_t row_;
};

inline constexpr std::string_view kDatasetHeader =
    "study,group,arm,patients,duration_yr,rate,std_err,total,zeroes";

/// Dataset rows in file order, kept alongside the grouped records so that
/// diagnostics can name rows.
struct ParsedDataset {
  std::vector<StudyRecord> studies;
  std::vector<std::size_t> first_row;  // 1-based file row of each study's first arm
  std::vector<std::string> declared_group;  // group column as written, may be empty
};

namespace detail {

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline std::string trim(std::string s) {
  const auto ws = " \t\r\n";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(ws) - b + 1);
}

template <typename T>
T parse_number(const std::string& cell, std::size_t row, const char* column) {
  T value{};
  const char* first = cell.data();
  const char* last = cell.data() + cell.size();
  const auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc() || ptr != last) {
    throw parse_error(row, std::string("malformed ") + column + " value '" + cell + "'");
  }
  if constexpr (std::is_floating_point_v<T>) {
    if (!std::isfinite(value)) {
      throw parse_error(row, std::string("non-finite ") + column + " value");
    }
  }
  return value;
}

template <typename T>
std::optional<T> parse_optional(const std::string& cell, std::size_t row,
                                const char* column) {
  if (cell.empty()) return std::nullopt;
  return parse_number<T>(cell, row, column);
}

inline std::string format_number(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

inline std::string format_number(long v) { return std::to_string(v); }

template <typename T>
std::string format_optional(const std::optional<T>& v) {
  return v ? format_number(*v) : std::string();
}

inline void check_study(const StudyRecord& s, std::size_t row) {
  std::size_t placebo = 0;
  for (const auto& a : s.arms) {
    if (a.treatment_class == TreatmentClass::placebo) ++placebo;
  }
  if (placebo == 0) throw parse_error(row, "study '" + s.study_id + "' has no placebo arm");
  if (placebo > 1) {
    throw parse_error(row, "study '" + s.study_id + "' has more than one placebo arm");
  }
  if (s.arms.size() < 2) {
    throw parse_error(row, "study '" + s.study_id + "' has no treatment arm");
  }
}

}  // namespace detail

/// Reads the comma-separated dataset. Throws parse_error naming the row
/// (1-based, header = row 1) for malformed cells or structural violations.
inline ParsedDataset parse_dataset_rows(std::istream& in) {
  ParsedDataset out;
  std::string line;
  std::size_t row = 0;
  bool have_header = false;
  StudyRecord current;
  std::size_t current_row = 0;
  std::string current_group;

  auto flush = [&] {
    if (current.arms.empty()) return;
    detail::check_study(current, current_row);
    for (const auto& seen : out.studies) {
      if (seen.study_id == current.study_id) {
        throw parse_error(current_row, "study '" + current.study_id + "' appears in non-adjacent rows");
      }
    }
    out.studies.push_back(std::move(current));
    out.first_row.push_back(current_row);
    out.declared_group.push_back(current_group);
    current = StudyRecord{};
  };

  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!have_header) {
      if (detail::trim(line) != kDatasetHeader) {
        throw parse_error(row, "header must be '" + std::string(kDatasetHeader) + "'");
      }
      have_header = true;
      continue;
    }
    if (detail::trim(line).empty()) continue;
    auto cells = detail::split_csv(line);
    if (cells.size() != 9) {
      throw parse_error(row, "expected 9 columns, found " + std::to_string(cells.size()));
    }
    for (auto& c : cells) c = detail::trim(c);
    const std::string& study = cells[0];
    if (study.empty()) throw parse_error(row, "empty study identifier");
    if (!cells[1].empty() && cells[1] != "A" && cells[1] != "B" && cells[1] != "C") {
      throw parse_error(row, "group must be A, B, C or empty");
    }

    ArmRecord arm;
    if (cells[2] == "P") {
      arm.treatment_class = TreatmentClass::placebo;
    } else if (cells[2] == "L") {
      arm.treatment_class = TreatmentClass::active;
    } else {
      throw parse_error(row, "arm must be P or L, got '" + cells[2] + "'");
    }
    arm.n_patients = detail::parse_number<long>(cells[3], row, "patients");
    if (arm.n_patients <= 0) throw parse_error(row, "patients must be positive");
    const double duration = detail::parse_number<double>(cells[4], row, "duration_yr");
    if (!(duration > 0.0)) throw parse_error(row, "duration must be positive");
    arm.rate_est = detail::parse_optional<double>(cells[5], row, "rate");
    arm.std_err = detail::parse_optional<double>(cells[6], row, "std_err");
    arm.total = detail::parse_optional<long>(cells[7], row, "total");
    arm.zeroes = detail::parse_optional<long>(cells[8], row, "zeroes");
    if (arm.rate_est && !(*arm.rate_est > 0.0)) throw parse_error(row, "rate must be positive");
    if (arm.std_err && !(*arm.std_err > 0.0)) {
      throw parse_error(row, "std_err must be positive");
    }
    if (arm.std_err && !arm.rate_est) throw parse_error(row, "std_err given without rate");
    if (arm.total && *arm.total < 0) throw parse_error(row, "total must be non-negative");
    if (arm.zeroes && (*arm.zeroes < 0 || *arm.zeroes > arm.n_patients)) {
      throw parse_error(row, "zeroes must lie in [0, patients]");
    }
    if (arm.zeroes && arm.total && *arm.zeroes == arm.n_patients && *arm.total > 0) {
      throw parse_error(row, "all patients event-free but total > 0");
    }

    if (!current.arms.empty() && current.study_id != study) flush();
    if (current.arms.empty()) {
      current.study_id = study;
      current.duration = duration;
      current_row = row;
      current_group = cells[1];
    } else if (duration != current.duration) {
      throw parse_error(row, "duration differs between arms of '" + study + "'");
    } else if (cells[1] != current_group) {
      throw parse_error(row, "group differs between arms of '" + study + "'");
    }
    current.arms.push_back(arm);
  }
  if (!have_header) throw parse_error(0, "empty input: no header");
  flush();
  return out;
}

inline std::vector<StudyRecord> parse_dataset(std::istream& in) {
  return parse_dataset_rows(in).studies;
}

// ---------------------------------------------------------------------------

/// Labels are cumulative: A implies B implies C. Arms without any evidence
/// field are ignored for classification and reported in `diagnostics`.
struct Classification {
  std::set<SubsetLabel> labels;
  std::vector<std::string> diagnostics;

  bool in(SubsetLabel l) const { return labels.count(l) > 0; }
  std::optional<SubsetLabel> highest() const {
    if (labels.empty()) return std::nullopt;
    return *labels.begin();
  }
};

inline Classification classify_subset(const StudyRecord& study) {
  Classification out;
  std::vector<const ArmRecord*> usable;
  for (std::size_t j = 0; j < study.arms.size(); ++j) {
    if (study.arms[j].has_evidence()) {
      usable.push_back(&study.arms[j]);
    } else {
      out.diagnostics.push_back(study.study_id + ": arm " + std::to_string(j + 1) +
                                " carries no evidence field and is excluded");
    }
  }
  if (usable.empty()) return out;
  auto all = [&](auto pred) { return std::all_of(usable.begin(), usable.end(), pred); };
  const bool a = all([](const ArmRecord* r) { return r->has_rate_se(); });
  const bool b = a || all([](const ArmRecord* r) { return r->has_total() && r->has_zeroes(); });
  const bool c = b || all([](const ArmRecord* r) { return r->has_total() || r->has_zeroes(); });
  if (a) out.labels.insert(SubsetLabel::A);
  if (b) out.labels.insert(SubsetLabel::B);
  if (c) out.labels.insert(SubsetLabel::C);
  return out;
}

inline std::vector<StudyRecord> select_subset(const std::vector<StudyRecord>& studies,
                                              SubsetLabel label) {
  std::vector<StudyRecord> out;
  for (const auto& s : studies) {
    if (classify_subset(s).in(label)) out.push_back(s);
  }
  return out;
}

/// Table-1 style tallies.
struct SubsetTally {
  std::size_t a = 0, b = 0, c = 0;
  // among studies outside A
  std::size_t total_only = 0, zeroes_only = 0, both = 0;
};

inline SubsetTally tally_subsets(const std::vector<StudyRecord>& studies) {
  SubsetTally t;
  for (const auto& s : studies) {
    const auto cls = classify_subset(s);
    if (cls.in(SubsetLabel::A)) ++t.a;
    if (cls.in(SubsetLabel::B)) ++t.b;
    if (cls.in(SubsetLabel::C)) ++t.c;
    if (cls.in(SubsetLabel::A) || !cls.in(SubsetLabel::C)) continue;
    if (cls.in(SubsetLabel::B)) {
      ++t.both;
    } else {
      const bool totals = std::all_of(s.arms.begin(), s.arms.end(),
                                      [](const ArmRecord& r) { return r.has_total(); });
      const bool zeroes = std::all_of(s.arms.begin(), s.arms.end(),
                                      [](const ArmRecord& r) { return r.has_zeroes(); });
      if (totals) ++t.total_only;
      else if (zeroes) ++t.zeroes_only;
    }
  }
  return t;
}

/// Total count implied by a rate over n patients followed for `duration`,
/// rounded to nearest (ties to even).
inline long derive_total(double rate_est, long n, double duration) {
  if (!(rate_est > 0.0) || n <= 0 || !(duration > 0.0)) {
    throw domain_error("derive_total: inputs must be positive");
  }
  return std::lrint(rate_est * static_cast<double>(n) * duration);
}

/// Standard error from a normal-theory confidence interval.
inline double se_from_ci(double lower, double upper, double level = 0.95) {
  if (!(upper > lower)) throw domain_error("interval must have positive width");
  if (!(level > 0.0 && level < 1.0)) throw domain_error("level must lie in (0, 1)");
  const boost::math::normal_distribution<double> std_normal;
  const double q = boost::math::quantile(std_normal, (1.0 + level) / 2.0);
  return (upper - lower) / (2.0 * q);
}

/// Writes the dataset in canonical form: numbers in shortest round-trip
/// representation, `group` set to the highest computed label.
inline void serialize_dataset(std::ostream& os, const std::vector<StudyRecord>& studies) {
  os << kDatasetHeader << '\n';
  for (const auto& s : studies) {
    const auto label = classify_subset(s).highest();
    const std::string group = label ? std::string(1, to_char(*label)) : std::string();
    for (const auto& a : s.arms) {
      os << s.study_id << ',' << group << ','
         << (a.treatment_class == TreatmentClass::placebo ? 'P' : 'L') << ','
         << a.n_patients << ',' << detail::format_number(s.duration) << ','
         << detail::format_optional(a.rate_est) << ','
         << detail::format_optional(a.std_err) << ','
         << detail::format_optional(a.total) << ','
         << detail::format_optional(a.zeroes) << '\n';
    }
  }
}

}  // namespace nbsynth
