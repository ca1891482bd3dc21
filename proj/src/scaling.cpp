#include "xlab/scaling.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

namespace xlab::scaling {

FitQualityError::FitQualityError(const std::string& message, double residual)
    : Error(message + " (log-ppl rms residual " + std::to_string(residual) + ")"), residual_(residual) {}

double ScalingFit::predict(double tokens) const { return a * std::pow(tokens, -b) + c; }

nlohmann::json ScalingFit::to_json() const {
    return {{"a", a}, {"b", b}, {"c", c}, {"residual", residual}, {"domain", {t_min, t_max}}};
}

ScalingFit ScalingFit::from_json(const nlohmann::json& j) {
    ScalingFit f;
    f.a = j.at("a").get<double>();
    f.b = j.at("b").get<double>();
    f.c = j.at("c").get<double>();
    f.residual = j.at("residual").get<double>();
    f.t_min = j.at("domain").at(0).get<double>();
    f.t_max = j.at("domain").at(1).get<double>();
    if (!(f.a > 0 && f.b > 0 && f.c >= 0 && f.t_min > 0 && f.t_max >= f.t_min)) {
        throw FormatError("scaling fit out of range");
    }
    return f;
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Token counts are divided by their geometric mean so the linear solves stay
// well conditioned; `a` is rescaled on the way out.
struct Problem {
    std::vector<double> u;     // t / t_ref
    std::vector<double> y;     // observed ppl
    std::vector<double> logy;
    bool floor;
};

struct Candidate {
    double a = 0, c = 0, loss = kInf;
};

double log_loss(const Problem& p, const std::vector<double>& x, double a, double c) {
    double s = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double pred = a * x[i] + c;
        if (!(pred > 0)) return kInf;
        const double r = std::log(pred) - p.logy[i];
        s += r * r;
    }
    return s;
}

Candidate solve_at(const Problem& p, double b) {
    const std::size_t n = p.u.size();
    std::vector<double> x(n);
    for (std::size_t i = 0; i < n; ++i) x[i] = std::pow(p.u[i], -b);

    // Weighted linear fit with weights 1/y^2 (first-order log-space error).
    double sw = 0, sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double w = 1.0 / (p.y[i] * p.y[i]);
        sw += w;
        sx += w * x[i];
        sy += w * p.y[i];
        sxx += w * x[i] * x[i];
        sxy += w * x[i] * p.y[i];
    }
    double a = 0, c = 0;
    bool c_fixed = !p.floor;
    if (p.floor) {
        const double det = sw * sxx - sx * sx;
        if (det > 0) {
            a = (sw * sxy - sx * sy) / det;
            c = (sxx * sy - sx * sxy) / det;
        }
        if (!(det > 0) || c < 1.0) {
            c = 1.0;
            c_fixed = true;
        }
    }
    if (c_fixed) a = (sxy - c * sx) / sxx;
    if (!(a > 0)) return {};

    // Gauss-Newton on the log loss, c projected onto [1, inf).
    double loss = log_loss(p, x, a, c);
    for (int it = 0; it < 30; ++it) {
        double jaa = 0, jac = 0, jcc = 0, ga = 0, gc = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const double pred = a * x[i] + c;
            const double r = std::log(pred) - p.logy[i];
            const double da = x[i] / pred, dc = 1.0 / pred;
            jaa += da * da;
            jac += da * dc;
            jcc += dc * dc;
            ga += da * r;
            gc += dc * r;
        }
        double step_a, step_c = 0;
        if (c_fixed) {
            step_a = -ga / jaa;
        } else {
            const double det = jaa * jcc - jac * jac;
            if (!(det > 0)) break;
            step_a = -(jcc * ga - jac * gc) / det;
            step_c = -(jaa * gc - jac * ga) / det;
        }
        bool improved = false;
        for (double t = 1.0; t > 1e-6; t *= 0.5) {
            const double na = a + t * step_a;
            double nc = c + t * step_c;
            if (p.floor) nc = std::max(nc, 1.0);
            if (!(na > 0)) continue;
            const double nl = log_loss(p, x, na, nc);
            if (nl < loss) {
                a = na;
                c = nc;
                loss = nl;
                improved = true;
                break;
            }
        }
        if (!improved) break;
        if (p.floor && !c_fixed && c == 1.0) c_fixed = true;
    }
    return {a, c, loss};
}

}  // namespace

ScalingFit fit_power_law(std::span<const ScalingPoint> points, const FitOptions& options) {
    if (points.size() < 3) throw std::invalid_argument("fit_power_law needs at least 3 points");
    if (!(options.b_min > 0 && options.b_max > options.b_min && options.b_step > 0)) {
        throw std::invalid_argument("bad b grid");
    }
    std::vector<ScalingPoint> pts(points.begin(), points.end());
    for (const auto& pt : pts) {
        if (!(pt.tokens > 0 && std::isfinite(pt.tokens))) throw std::invalid_argument("token counts must be positive");
        if (!(pt.ppl > 1 && std::isfinite(pt.ppl))) throw std::invalid_argument("ppl values must exceed 1");
    }
    std::sort(pts.begin(), pts.end(), [](const auto& l, const auto& r) { return l.tokens < r.tokens; });
    for (std::size_t i = 1; i < pts.size(); ++i) {
        if (pts[i].tokens == pts[i - 1].tokens) throw std::invalid_argument("token counts must be distinct");
    }

    double log_ref = 0;
    for (const auto& pt : pts) log_ref += std::log(pt.tokens);
    const double t_ref = std::exp(log_ref / static_cast<double>(pts.size()));

    Problem prob;
    prob.floor = options.floor;
    for (const auto& pt : pts) {
        prob.u.push_back(pt.tokens / t_ref);
        prob.y.push_back(pt.ppl);
        prob.logy.push_back(std::log(pt.ppl));
    }

    const auto steps = static_cast<std::size_t>(std::floor((options.b_max - options.b_min) / options.b_step + 1e-9));
    std::size_t best_k = 0;
    Candidate best;
    for (std::size_t k = 0; k <= steps; ++k) {
        const auto cand = solve_at(prob, options.b_min + static_cast<double>(k) * options.b_step);
        if (cand.loss < best.loss) {
            best = cand;
            best_k = k;
        }
    }
    double best_b = options.b_min + static_cast<double>(best_k) * options.b_step;
    const auto rms = [&](double loss) { return std::sqrt(loss / static_cast<double>(pts.size())); };

    // Noisy points may wiggle, but the overall log-log trend has to fall.
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < pts.size(); ++i) {
        mx += std::log(prob.u[i]);
        my += prob.logy[i];
    }
    mx /= static_cast<double>(pts.size());
    my /= static_cast<double>(pts.size());
    double cov = 0;
    for (std::size_t i = 0; i < pts.size(); ++i) cov += (std::log(prob.u[i]) - mx) * (prob.logy[i] - my);
    if (!(cov < 0)) throw FitQualityError("ppl does not decrease with tokens", rms(best.loss));
    if (!std::isfinite(best.loss)) throw FitQualityError("no decreasing power law fits the points", kInf);

    // Golden-section refinement inside the neighbouring grid cells.
    double lo = std::max(options.b_min, best_b - options.b_step);
    double hi = std::min(options.b_max, best_b + options.b_step);
    const double g = (std::sqrt(5.0) - 1.0) / 2.0;
    double x1 = hi - g * (hi - lo), x2 = lo + g * (hi - lo);
    auto f1 = solve_at(prob, x1), f2 = solve_at(prob, x2);
    for (int it = 0; it < 100 && hi - lo > 1e-14; ++it) {
        if (f1.loss <= f2.loss) {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = solve_at(prob, x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = solve_at(prob, x2);
        }
    }
    const auto& refined = f1.loss <= f2.loss ? f1 : f2;
    if (refined.loss < best.loss) {
        best = refined;
        best_b = f1.loss <= f2.loss ? x1 : x2;
    }

    ScalingFit fit;
    fit.b = best_b;
    fit.a = best.a * std::pow(t_ref, best_b);
    fit.c = best.c;
    fit.residual = rms(best.loss);
    fit.t_min = pts.front().tokens;
    fit.t_max = pts.back().tokens;
    return fit;
}

Mlte mlte(const ScalingFit& fit, double ppl) {
    if (!(ppl > fit.c)) {
        throw BelowAsymptoteError("ppl " + std::to_string(ppl) + " is at or below the fitted asymptote " +
                                  std::to_string(fit.c));
    }
    const double t = std::exp(-(std::log(ppl - fit.c) - std::log(fit.a)) / fit.b);
    constexpr double slack = 1e-9;
    const bool outside = t < fit.t_min * (1 - slack) || t > fit.t_max * (1 + slack);
    return {t, outside};
}

double mlpe(const ScalingFit& fit, double tokens) {
    if (!(tokens > 0)) throw std::invalid_argument("tokens must be positive");
    return fit.predict(tokens);
}

double teff(double mlte_tokens, double actual_tokens) {
    if (!(actual_tokens > 0)) throw std::invalid_argument("actual tokens must be positive");
    return mlte_tokens / actual_tokens;
}

EfficiencyReport efficiency_report(std::string run, std::span<const ScalingFit> fits, std::span<const double> tokens,
                                   std::span<const double> ppl, std::vector<std::string> names) {
    const std::size_t n = tokens.size();
    if (ppl.size() != n) throw std::invalid_argument("tokens and ppl must have one entry per language");
    if (fits.size() != 1 && fits.size() != n) throw std::invalid_argument("need one fit or one per language");
    if (!names.empty() && names.size() != n) throw std::invalid_argument("one name per language");
    EfficiencyReport r;
    r.run = std::move(run);
    for (double t : tokens) r.total_tokens += t;
    for (std::size_t i = 0; i < n; ++i) {
        const auto& fit = fits[fits.size() == 1 ? 0 : i];
        LanguageEfficiency e;
        e.language = names.empty() ? "lang" + std::to_string(i) : names[i];
        e.tokens = tokens[i];
        e.ppl = ppl[i];
        r.probs.push_back(r.total_tokens > 0 ? tokens[i] / r.total_tokens : 0.0);
        if (tokens[i] > 0) {
            e.mlpe = mlpe(fit, tokens[i]);
        } else {
            e.mlpe = kInf;
        }
        if (ppl[i] > fit.c) {
            const auto m = mlte(fit, ppl[i]);
            e.mlte = m.tokens;
            e.extrapolated = m.extrapolated;
        } else {
            e.mlte = kInf;
            e.below_asymptote = true;
            e.extrapolated = true;
        }
        e.teff = tokens[i] > 0 ? teff(e.mlte, tokens[i]) : 0.0;
        r.languages.push_back(std::move(e));
    }
    return r;
}

namespace {

nlohmann::json finite_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

std::string num(double v) {
    if (!std::isfinite(v)) return v > 0 ? "inf" : "nan";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

}  // namespace

nlohmann::json EfficiencyReport::to_json() const {
    nlohmann::json langs = nlohmann::json::array();
    for (const auto& l : languages) {
        langs.push_back({{"lang", l.language},
                         {"tokens", l.tokens},
                         {"ppl", l.ppl},
                         {"mlte", finite_or_null(l.mlte)},
                         {"mlpe", finite_or_null(l.mlpe)},
                         {"teff", finite_or_null(l.teff)},
                         {"extrapolated", l.extrapolated},
                         {"below_asymptote", l.below_asymptote}});
    }
    return {{"run", run}, {"total_tokens", total_tokens}, {"probs", probs}, {"languages", langs}};
}

std::string efficiency_csv(std::span<const EfficiencyReport> reports) {
    if (reports.empty()) return "run,tokens\n";
    const std::size_t n = reports.front().languages.size();
    std::string out = "run,tokens";
    for (const char* col : {"p", "ppl", "teff"}) {
        for (std::size_t i = 0; i < n; ++i) out += std::string(",") + col + "_" + reports.front().languages[i].language;
    }
    out += ",extrapolated\n";
    for (const auto& r : reports) {
        if (r.languages.size() != n) throw std::invalid_argument("reports differ in language count");
        out += r.run + "," + num(r.total_tokens);
        for (double p : r.probs) out += "," + num(p);
        for (const auto& l : r.languages) out += "," + num(l.ppl);
        for (const auto& l : r.languages) out += "," + num(l.teff);
        std::string flags;
        for (const auto& l : r.languages) {
            if (l.extrapolated) flags += (flags.empty() ? "" : ";") + l.language;
        }
        out += "," + flags + "\n";
    }
    return out;
}

}  // namespace xlab::scaling
