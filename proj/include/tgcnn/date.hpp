#pragma once

#include <charconv>
#include <chrono>
#include <algorithm>
#include <compare>
#include <cstdio>
#include <optional>
#include <string>
#include <string_view>

namespace tgcnn {

/// Calendar date with day resolution.
class Date {
 public:
  constexpr Date() = default;
  constexpr explicit Date(std::chrono::sys_days d) : days_(d) {}
  constexpr Date(int y, unsigned m, unsigned d)
      : days_(std::chrono::sys_days(std::chrono::year{y} / std::chrono::month{m} / std::chrono::day{d})) {}

  /// Parses `YYYY-MM-DD`; nullopt on anything else, including impossible dates.
  static std::optional<Date> parse(std::string_view s) {
    if (s.size() != 10 || s[4] != '-' || s[7] != '-') return std::nullopt;
    int y = 0;
    unsigned m = 0, d = 0;
    auto num = [](std::string_view part, auto& out) {
      auto [p, ec] = std::from_chars(part.data(), part.data() + part.size(), out);
      return ec == std::errc{} && p == part.data() + part.size();
    };
    if (!num(s.substr(0, 4), y) || !num(s.substr(5, 2), m) || !num(s.substr(8, 2), d)) return std::nullopt;
    const std::chrono::year_month_day ymd{std::chrono::year{y}, std::chrono::month{m}, std::chrono::day{d}};
    if (!ymd.ok()) return std::nullopt;
    return Date(std::chrono::sys_days(ymd));
  }

  std::string to_string() const {
    const auto ymd = year_month_day();
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(ymd.year()), static_cast<unsigned>(ymd.month()),
                  static_cast<unsigned>(ymd.day()));
    return buf;
  }

  constexpr std::chrono::year_month_day year_month_day() const { return std::chrono::year_month_day(days_); }
  constexpr int year() const { return static_cast<int>(year_month_day().year()); }
  constexpr std::chrono::sys_days sys_days() const { return days_; }
  constexpr long day_number() const { return days_.time_since_epoch().count(); }

  constexpr Date plus_days(long n) const { return Date(days_ + std::chrono::days(n)); }

  /// Calendar month arithmetic, day clamped to the end of the target month.
  Date plus_months(int n) const {
    auto ymd = year_month_day();
    auto shifted = ymd.year() / ymd.month() / std::chrono::day{1} + std::chrono::months(n);
    auto last = std::chrono::year_month_day_last(shifted.year(), std::chrono::month_day_last(shifted.month()));
    const auto day = std::min(static_cast<unsigned>(ymd.day()), static_cast<unsigned>(last.day()));
    return Date(std::chrono::sys_days(shifted.year() / shifted.month() / std::chrono::day{day}));
  }

  friend constexpr long days_between(Date a, Date b) { return (b.days_ - a.days_).count(); }
  friend constexpr auto operator<=>(const Date&, const Date&) = default;
  friend constexpr bool operator==(const Date&, const Date&) = default;

 private:
  std::chrono::sys_days days_{};
};

/// Mean Gregorian month length used for every day-to-month conversion.
inline constexpr double kDaysPerMonth = 30.44;

}  // namespace tgcnn
