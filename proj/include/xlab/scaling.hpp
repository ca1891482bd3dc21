#pragma once

#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "xlab/common.hpp"

namespace xlab::scaling {

/// No acceptable decreasing fit. residual() is the best log-space RMS error
/// found (infinite when no candidate had a > 0).
class FitQualityError : public Error {
public:
    FitQualityError(const std::string& message, double residual);
    double residual() const noexcept { return residual_; }

private:
    double residual_;
};

/// ppl <= c: no token count reaches it.
class BelowAsymptoteError : public Error {
public:
    using Error::Error;
};

struct ScalingPoint {
    double tokens;
    double ppl;
};

struct FitOptions {
    bool floor = true;       // false: pure power law, c = 0
    double b_min = 0.05;
    double b_max = 2.0;
    double b_step = 0.001;
};

/// ppl(t) = a * t^-b + c
struct ScalingFit {
    double a = 0, b = 0, c = 0;
    double residual = 0;   // RMS error in log-ppl
    double t_min = 0, t_max = 0;

    double predict(double tokens) const;
    nlohmann::json to_json() const;
    static ScalingFit from_json(const nlohmann::json& j);
};

/// Least squares in log-ppl. b is scanned on a fixed grid and refined by
/// golden section; (a, c) come from a weighted linear solve polished by a few
/// Gauss-Newton steps, with c held at >= 1. Token counts must be distinct;
/// FitQualityError when log ppl does not trend downward in log tokens or no
/// candidate has a > 0.
ScalingFit fit_power_law(std::span<const ScalingPoint> points, const FitOptions& options = {});

struct Mlte {
    double tokens;
    bool extrapolated;   // outside [t_min, t_max]
};

Mlte mlte(const ScalingFit& fit, double ppl);
double mlpe(const ScalingFit& fit, double tokens);
double teff(double mlte_tokens, double actual_tokens);

struct LanguageEfficiency {
    std::string language;
    double tokens = 0;       // t_n
    double ppl = 0;
    double mlte = 0;         // +inf when ppl is at or below the asymptote
    double mlpe = 0;
    double teff = 0;
    bool extrapolated = false;
    bool below_asymptote = false;
};

struct EfficiencyReport {
    std::string run;
    double total_tokens = 0;
    std::vector<double> probs;   // marginal language shares
    std::vector<LanguageEfficiency> languages;

    nlohmann::json to_json() const;
};

/// One fit shared by every language, or one fit per language.
EfficiencyReport efficiency_report(std::string run, std::span<const ScalingFit> fits, std::span<const double> tokens,
                                   std::span<const double> ppl, std::vector<std::string> names = {});

/// "run,tokens,p_lang0,...,ppl_lang0,...,teff_lang0,..." one row per report.
std::string efficiency_csv(std::span<const EfficiencyReport> reports);

}  // namespace xlab::scaling
