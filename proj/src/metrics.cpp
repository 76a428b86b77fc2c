#include "equate/metrics.hpp"

#include <cmath>

#include "equate/common.hpp"

namespace equate {

std::string fitness_mode_name(FitnessMode m) {
    return m == FitnessMode::Standard ? "standard" : "explained";
}

FitnessMode fitness_mode_from_name(const std::string& name) {
    if (name == "standard") return FitnessMode::Standard;
    if (name == "explained") return FitnessMode::Explained;
    throw Error("InvalidConfig", "fitness.mode must be standard or explained, got " + name);
}

std::optional<double> r2_score(std::span<const double> y, std::span<const double> y_hat, FitnessMode mode) {
    if (y.size() != y_hat.size())
        throw Error("LengthMismatch", std::to_string(y.size()) + " labels vs " +
                                          std::to_string(y_hat.size()) + " predictions");
    if (y.empty()) return std::nullopt;
    double mean = 0.0;
    for (double v : y) mean += v;
    mean /= static_cast<double>(y.size());
    double sse = 0.0, ss = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        if (!std::isfinite(y_hat[i])) return std::nullopt;
        sse += (y_hat[i] - y[i]) * (y_hat[i] - y[i]);
        const double c = mode == FitnessMode::Standard ? y[i] - mean : y_hat[i] - mean;
        ss += c * c;
    }
    if (!(ss >= 1e-12)) return std::nullopt;
    return 1.0 - sse / ss;
}

double fitness(std::span<const double> y, std::span<const double> y_hat, std::size_t complexity,
               const FitnessConfig& cfg, std::size_t flagged_rows) {
    if (y.size() != y_hat.size()) throw Error("LengthMismatch", "fitness inputs differ in length");
    if (y.size() < 2) throw Error("InvalidArgument", "fitness needs at least two rows");
    if (flagged_rows > 0) return cfg.floor;
    const auto r2 = r2_score(y, y_hat, cfg.mode);
    if (!r2) return cfg.floor;
    const double bonus =
        cfg.lambda * std::exp(-static_cast<double>(complexity) / static_cast<double>(cfg.max_len));
    const double r = *r2 + bonus;
    return std::isfinite(r) ? std::max(r, cfg.floor) : cfg.floor;
}

}  // namespace equate
