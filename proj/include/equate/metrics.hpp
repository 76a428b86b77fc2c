#pragma once

#include <optional>
#include <span>
#include <string>

namespace equate {

enum class FitnessMode { Standard, Explained };

std::string fitness_mode_name(FitnessMode m);
FitnessMode fitness_mode_from_name(const std::string& name);

/// Coefficient of determination 1 - SSE / SS. Standard mode centres SS on
/// the gold labels; Explained uses sum (y_hat - mean(y))^2. Returns
/// nullopt (the undefined sentinel) when the denominator is below 1e-12 or
/// a prediction is not finite. Throws Error("LengthMismatch").
std::optional<double> r2_score(std::span<const double> y, std::span<const double> y_hat,
                               FitnessMode mode = FitnessMode::Standard);

struct FitnessConfig {
    double lambda = 0.5;
    int max_len = 200;  // L
    FitnessMode mode = FitnessMode::Standard;
    double floor = -1.0;
};

/// r = R2 + lambda * exp(-l / L), clamped below at cfg.floor. Any flagged
/// row or a degenerate denominator gives cfg.floor. Throws LengthMismatch,
/// and InvalidArgument for fewer than two rows.
double fitness(std::span<const double> y, std::span<const double> y_hat, std::size_t complexity,
               const FitnessConfig& cfg, std::size_t flagged_rows = 0);

}  // namespace equate
