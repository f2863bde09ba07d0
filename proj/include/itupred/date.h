#pragma once

#include <chrono>
#include <compare>
#include <optional>
#include <string>
#include <string_view>

namespace itupred {

/// Calendar date at day granularity. A default-constructed Date
/// (1970-01-01) marks an unset date.
class Date {
 public:
  constexpr Date() = default;
  constexpr explicit Date(std::chrono::sys_days d) : days_(d) {}
  constexpr Date(int y, unsigned m, unsigned d)
      : days_(std::chrono::year_month_day{std::chrono::year{y},
                                          std::chrono::month{m},
                                          std::chrono::day{d}}) {}

  /// Parses strict ISO-8601 `YYYY-MM-DD`; nullopt on any deviation.
  static std::optional<Date> parse(std::string_view iso);

  std::string iso() const;

  constexpr long serial() const { return days_.time_since_epoch().count(); }
  constexpr Date operator+(long n) const {
    return Date(days_ + std::chrono::days{n});
  }
  constexpr Date operator-(long n) const {
    return Date(days_ - std::chrono::days{n});
  }
  constexpr long operator-(Date other) const {
    return (days_ - other.days_).count();
  }
  constexpr auto operator<=>(const Date&) const = default;

 private:
  std::chrono::sys_days days_{};
};

}  // namespace itupred
