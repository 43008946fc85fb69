#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace hydroseq {

// Error taxonomy. Everything thrown by the library derives from Error so
// callers can catch one base; the CLI maps subclasses to exit codes.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
    using Error::Error;
};
struct ParameterError : Error {
    using Error::Error;
};
struct ContractError : Error {
    using Error::Error;
};
struct ParseError : Error {
    using Error::Error;
};
struct IngestionError : Error {
    using Error::Error;
};
struct IoError : Error {
    using Error::Error;
};
struct TrainingError : Error {
    using Error::Error;
};
struct MetricUndefinedError : Error {
    using Error::Error;
};

// Calendar date as days since 1970-01-01 (proleptic Gregorian).
// Daily resolution is all the data pipeline needs.
class Date {
  public:
    Date() = default;
    explicit Date(std::int64_t epoch_day) : day_(epoch_day) {}

    static Date from_ymd(int y, unsigned m, unsigned d) {
        // Howard Hinnant's days_from_civil.
        y -= m <= 2;
        const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
        const unsigned yoe = static_cast<unsigned>(y - era * 400);
        const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
        const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
        return Date(era * 146097 + static_cast<std::int64_t>(doe) - 719468);
    }

    // Parses strict "YYYY-MM-DD".
    static Date parse(const std::string& s) {
        if (s.size() != 10 || s[4] != '-' || s[7] != '-')
            throw ParseError("bad date '" + s + "' (want YYYY-MM-DD)");
        for (std::size_t i : {0u, 1u, 2u, 3u, 5u, 6u, 8u, 9u})
            if (s[i] < '0' || s[i] > '9')
                throw ParseError("bad date '" + s + "' (want YYYY-MM-DD)");
        const int y = std::stoi(s.substr(0, 4));
        const unsigned m = static_cast<unsigned>(std::stoi(s.substr(5, 2)));
        const unsigned d = static_cast<unsigned>(std::stoi(s.substr(8, 2)));
        if (m < 1 || m > 12 || d < 1 || d > 31)
            throw ParseError("out-of-range date '" + s + "'");
        return from_ymd(y, m, d);
    }

    std::string to_string() const {
        // civil_from_days, inverse of the above.
        std::int64_t z = day_ + 719468;
        const std::int64_t era = (z >= 0 ? z : z - 146096) / 146097;
        const unsigned doe = static_cast<unsigned>(z - era * 146097);
        const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
        std::int64_t y = static_cast<std::int64_t>(yoe) + era * 400;
        const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
        const unsigned mp = (5 * doy + 2) / 153;
        const unsigned d = doy - (153 * mp + 2) / 5 + 1;
        const unsigned m = mp + (mp < 10 ? 3 : -9);
        y += m <= 2;
        char buf[16];
        std::snprintf(buf, sizeof(buf), "%04lld-%02u-%02u", static_cast<long long>(y), m, d);
        return buf;
    }

    std::int64_t epoch_day() const { return day_; }

    friend bool operator==(Date a, Date b) { return a.day_ == b.day_; }
    friend bool operator!=(Date a, Date b) { return a.day_ != b.day_; }
    friend bool operator<(Date a, Date b) { return a.day_ < b.day_; }
    friend bool operator<=(Date a, Date b) { return a.day_ <= b.day_; }
    friend bool operator>(Date a, Date b) { return a.day_ > b.day_; }
    friend bool operator>=(Date a, Date b) { return a.day_ >= b.day_; }

    Date operator+(std::int64_t n) const { return Date(day_ + n); }
    std::int64_t operator-(Date other) const { return day_ - other.day_; }

  private:
    std::int64_t day_ = 0;
};

}  // namespace hydroseq
