#ifndef MSNIMBLE_SELECTION_MATH_HPP
#define MSNIMBLE_SELECTION_MATH_HPP

// Selection CDF families, their derivatives, and the normal-convolved
// observation probability q(mu, sigma) = E_e[ Psi{alpha (mu + sigma e - delta)} ].

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include <boost/math/distributions/students_t.hpp>
#include <boost/math/special_functions/gamma.hpp>

namespace msnimble {

enum class CdfFamily { StudentT, Logistic, Normal };

struct SelectionCdf {
    CdfFamily family = CdfFamily::StudentT;
    double df = 4.0;  // only meaningful for StudentT

    static SelectionCdf student_t(double df) {
        if (!(df > 0.0) || !std::isfinite(df)) {
            throw std::invalid_argument("student-t degrees of freedom must be positive");
        }
        return {CdfFamily::StudentT, df};
    }
    static SelectionCdf logistic() { return {CdfFamily::Logistic, 0.0}; }
    static SelectionCdf normal() { return {CdfFamily::Normal, 0.0}; }

    /// Parses "t4", "t2.5", "logistic", "normal".
    static SelectionCdf parse(const std::string& s) {
        if (s == "logistic") return logistic();
        if (s == "normal") return normal();
        if (s.size() > 1 && s[0] == 't') {
            std::size_t used = 0;
            double v = 0.0;
            try {
                v = std::stod(s.substr(1), &used);
            } catch (const std::exception&) {
                used = 0;
            }
            if (used == s.size() - 1) return student_t(v);
        }
        throw std::invalid_argument("unknown selection CDF '" + s + "'");
    }

    std::string name() const {
        switch (family) {
            case CdfFamily::Logistic: return "logistic";
            case CdfFamily::Normal: return "normal";
            case CdfFamily::StudentT: {
                std::string d = std::to_string(df);
                d.erase(d.find_last_not_of('0') + 1);
                if (!d.empty() && d.back() == '.') d.pop_back();
                return "t" + d;
            }
        }
        return "?";
    }

    /// Length scale over which Psi bends: the distance from the real axis of its
    /// nearest complex singularity, or 1 for the entire normal CDF.
    double singularity_distance() const {
        switch (family) {
            case CdfFamily::StudentT: return std::sqrt(df);
            case CdfFamily::Logistic: return std::numbers::pi;
            case CdfFamily::Normal: return 1.0;
        }
        return 1.0;
    }

    friend bool operator==(const SelectionCdf& a, const SelectionCdf& b) {
        if (a.family != b.family) return false;
        return a.family != CdfFamily::StudentT || a.df == b.df;
    }
};

/// Psi and its first four derivatives, plus the upper tail 1 - Psi.
struct PsiValues {
    double cdf = 0.0;
    double upper = 0.0;
    std::array<double, 4> d{};  // d[k] = Psi^{(k+1)}
};

namespace detail {

inline PsiValues psi_t4(double x) {
    PsiValues v;
    const double u = x * x + 4.0;
    const double r = std::sqrt(u);
    // 1 - s with s = |x| / sqrt(x^2 + 4), computed without cancellation.
    const double ax = std::fabs(x);
    const double one_minus_s = 4.0 / (r * (r + ax));
    const double s = ax / r;
    const double tail = 0.25 * one_minus_s * one_minus_s * (2.0 + s);
    if (x >= 0.0) {
        v.upper = tail;
        v.cdf = 1.0 - tail;
    } else {
        v.cdf = tail;
        v.upper = 1.0 - tail;
    }
    const double inv = 1.0 / u;
    const double f = 12.0 * inv * inv / r;  // 12 u^{-5/2}
    v.d[0] = f;
    v.d[1] = -5.0 * x * inv * f;
    v.d[2] = (30.0 * x * x - 20.0) * inv * inv * f;
    v.d[3] = (-210.0 * x * x * x + 420.0 * x) * inv * inv * inv * f;
    return v;
}

inline PsiValues psi_student(double x, double nu) {
    PsiValues v;
    boost::math::students_t_distribution<double> dist(nu);
    if (x >= 0.0) {
        v.upper = boost::math::cdf(boost::math::complement(dist, x));
        v.cdf = 1.0 - v.upper;
    } else {
        v.cdf = boost::math::cdf(dist, x);
        v.upper = 1.0 - v.cdf;
    }
    const double u = 1.0 + x * x / nu;
    const double a = (nu + 1.0) / nu;
    const double f = boost::math::pdf(dist, x);
    const double g = -a * x / u;
    const double g1 = -a * (1.0 - x * x / nu) / (u * u);
    const double g2 = (2.0 * a * x / nu) * (3.0 - x * x / nu) / (u * u * u);
    v.d[0] = f;
    v.d[1] = g * f;
    v.d[2] = (g1 + g * g) * f;
    v.d[3] = (g2 + 3.0 * g * g1 + g * g * g) * f;
    return v;
}

inline PsiValues psi_logistic(double x) {
    PsiValues v;
    const double e = std::exp(-std::fabs(x));
    const double small = e / (1.0 + e);
    const double large = 1.0 / (1.0 + e);
    v.cdf = x >= 0.0 ? large : small;
    v.upper = x >= 0.0 ? small : large;
    const double p = v.cdf;
    const double pq = small * large;
    const double t = v.upper - v.cdf;  // 1 - 2p
    v.d[0] = pq;
    v.d[1] = pq * t;
    v.d[2] = pq * (1.0 - 6.0 * pq);
    v.d[3] = pq * t * (1.0 - 12.0 * p + 12.0 * p * p);
    return v;
}

inline PsiValues psi_normal(double x) {
    PsiValues v;
    v.cdf = 0.5 * std::erfc(-x / std::numbers::sqrt2);
    v.upper = 0.5 * std::erfc(x / std::numbers::sqrt2);
    const double phi = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
    v.d[0] = phi;
    v.d[1] = -x * phi;
    v.d[2] = (x * x - 1.0) * phi;
    v.d[3] = (3.0 * x - x * x * x) * phi;
    return v;
}

}  // namespace detail

/// All of Psi, 1 - Psi and the first four derivatives at x. Unchecked fast path.
inline PsiValues psi_all(const SelectionCdf& cdf, double x) {
    switch (cdf.family) {
        case CdfFamily::StudentT:
            return cdf.df == 4.0 ? detail::psi_t4(x) : detail::psi_student(x, cdf.df);
        case CdfFamily::Logistic: return detail::psi_logistic(x);
        case CdfFamily::Normal: return detail::psi_normal(x);
    }
    throw std::invalid_argument("unsupported selection CDF family");
}

/// Psi(x) alone. Unchecked fast path for inner loops.
inline double psi_cdf(const SelectionCdf& cdf, double x) {
    switch (cdf.family) {
        case CdfFamily::StudentT:
            if (cdf.df == 4.0) {
                const double r = std::sqrt(x * x + 4.0);
                const double oms = 4.0 / (r * (r + std::fabs(x)));
                const double tail = 0.25 * oms * oms * (2.0 + std::fabs(x) / r);
                return x >= 0.0 ? 1.0 - tail : tail;
            }
            return detail::psi_student(x, cdf.df).cdf;
        case CdfFamily::Logistic: {
            const double e = std::exp(-std::fabs(x));
            return x >= 0.0 ? 1.0 / (1.0 + e) : e / (1.0 + e);
        }
        case CdfFamily::Normal: return 0.5 * std::erfc(-x / std::numbers::sqrt2);
    }
    throw std::invalid_argument("unsupported selection CDF family");
}

/// Psi^{(deriv_order)}(x) for deriv_order in 0..4.
inline double psi(const SelectionCdf& cdf, double x, int deriv_order = 0) {
    if (!std::isfinite(x)) throw std::domain_error("psi: non-finite argument");
    if (deriv_order < 0 || deriv_order > 4) {
        throw std::invalid_argument("psi: derivative order must be in 0..4");
    }
    const PsiValues v = psi_all(cdf, x);
    return deriv_order == 0 ? v.cdf : v.d[deriv_order - 1];
}

/// 1 - Psi(x), accurate when Psi(x) is close to 1.
inline double psi_upper(const SelectionCdf& cdf, double x) {
    if (!std::isfinite(x)) throw std::domain_error("psi_upper: non-finite argument");
    return psi_all(cdf, x).upper;
}

/// Gauss-Legendre nodes and weights on [-1, 1]. The convolution integrator lays
/// copies of this rule on panels graded around the Psi transition.
struct QuadratureRule {
    int order = 0;
    std::vector<double> nodes;
    std::vector<double> weights;

    static constexpr int kDefaultOrder = 16;

    static QuadratureRule make(int order = kDefaultOrder) {
        if (order < 8) throw std::invalid_argument("quadrature order must be >= 8");
        QuadratureRule rule;
        rule.order = order;
        rule.nodes.resize(order);
        rule.weights.resize(order);
        const int m = (order + 1) / 2;
        for (int i = 0; i < m; ++i) {
            double z = std::cos(std::numbers::pi * (i + 0.75) / (order + 0.5));
            double dp = 0.0;
            for (int it = 0; it < 100; ++it) {
                double p0 = 1.0, p1 = 0.0;
                for (int j = 1; j <= order; ++j) {
                    const double p2 = p1;
                    p1 = p0;
                    p0 = ((2.0 * j - 1.0) * z * p1 - (j - 1.0) * p2) / j;
                }
                dp = order * (z * p0 - p1) / (z * z - 1.0);
                const double dz = p0 / dp;
                z -= dz;
                if (std::fabs(dz) < 1e-16) break;
            }
            rule.nodes[i] = -z;
            rule.nodes[order - 1 - i] = z;
            rule.weights[i] = rule.weights[order - 1 - i] = 2.0 / ((1.0 - z * z) * dp * dp);
        }
        return rule;
    }
};

inline const QuadratureRule& default_rule() {
    static const QuadratureRule rule = QuadratureRule::make();
    return rule;
}

/// Integrates f(e) phi(e) over the real line (truncated to |e| <= 10) with
/// panels starting at `center` of width `tau`, doubling outward up to width 2.
/// `visit(e, w)` is called once per node with w = quadrature weight * phi(e).
template <typename Visit>
void integrate_normal(const QuadratureRule& rule, double center, double tau, Visit&& visit) {
    constexpr double kLimit = 10.0;
    constexpr double kMaxWidth = 2.0;
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    const double start = std::clamp(center, -kLimit, kLimit);
    double width0 = std::clamp(tau, 1e-3, kMaxWidth);

    auto panel = [&](double lo, double hi) {
        const double mid = 0.5 * (lo + hi);
        const double half = 0.5 * (hi - lo);
        for (int k = 0; k < rule.order; ++k) {
            const double e = mid + half * rule.nodes[k];
            visit(e, half * rule.weights[k] * std::exp(-0.5 * e * e) * inv_sqrt_2pi);
        }
    };
    for (int side = 0; side < 2; ++side) {
        double x = start;
        double w = width0;
        if (side == 0) {
            while (x < kLimit) {
                const double next = std::min(x + w, kLimit);
                panel(x, next);
                x = next;
                w = std::min(2.0 * w, kMaxWidth);
            }
        } else {
            while (x > -kLimit) {
                const double next = std::max(x - w, -kLimit);
                panel(next, x);
                x = next;
                w = std::min(2.0 * w, kMaxWidth);
            }
        }
    }
}

/// Normal-weighted integrals of Psi and its derivatives at a = alpha (mu + sigma e - delta):
/// q = E Psi(a), q_upper = E{1 - Psi(a)}, D[k] = E Psi^{(k+1)}(a).
struct ConvolvedPsi {
    double q = 0.0;
    double q_upper = 0.0;
    std::array<double, 4> D{};
};

inline ConvolvedPsi convolve_psi(const SelectionCdf& cdf, double alpha, double delta, double mu,
                                 double sigma, const QuadratureRule& rule) {
    ConvolvedPsi out;
    const double b = alpha * (mu - delta);
    const double c = alpha * sigma;
    if (c == 0.0) {
        const PsiValues v = psi_all(cdf, b);
        out.q = v.cdf;
        out.q_upper = v.upper;
        out.D = v.d;
        return out;
    }
    const double center = -b / c;
    const double tau = cdf.singularity_distance() / c;
    integrate_normal(rule, center, tau, [&](double e, double w) {
        const PsiValues v = psi_all(cdf, b + c * e);
        out.q += w * v.cdf;
        out.q_upper += w * v.upper;
        for (int k = 0; k < 4; ++k) out.D[k] += w * v.d[k];
    });
    return out;
}

namespace detail {
inline void check_miss_args(double alpha, double sigma) {
    if (!(alpha >= 0.0) || !std::isfinite(alpha)) {
        throw std::invalid_argument("alpha must be finite and nonnegative");
    }
    if (!(sigma > 0.0) || !std::isfinite(sigma)) {
        throw std::invalid_argument("sigma must be finite and positive");
    }
}
}  // namespace detail

/// q(mu, sigma) = integral of Psi{alpha (mu + sigma e - delta)} phi(e) de, the
/// probability that a cell with mean mu and sd sigma is observed.
inline double miss_prob(const SelectionCdf& cdf, double alpha, double delta, double mu, double sigma,
                        const QuadratureRule& rule = default_rule()) {
    detail::check_miss_args(alpha, sigma);
    return convolve_psi(cdf, alpha, delta, mu, sigma, rule).q;
}

/// 1 - q(mu, sigma), computed from the upper tail of Psi.
inline double miss_prob_upper(const SelectionCdf& cdf, double alpha, double delta, double mu,
                              double sigma, const QuadratureRule& rule = default_rule()) {
    detail::check_miss_args(alpha, sigma);
    return convolve_psi(cdf, alpha, delta, mu, sigma, rule).q_upper;
}

struct MissProbPartials {
    double dq_dmu = 0.0;
    double dq_dsigma = 0.0;
    double d2q_dmu2 = 0.0;
    double d2q_dsigma2 = 0.0;
    double d2q_dmu_dsigma = 0.0;
};

inline MissProbPartials partials_from(const ConvolvedPsi& cv, double alpha, double sigma) {
    const double a2 = alpha * alpha;
    MissProbPartials p;
    p.dq_dmu = alpha * cv.D[0];
    p.dq_dsigma = a2 * sigma * cv.D[1];
    p.d2q_dmu2 = a2 * cv.D[1];
    p.d2q_dmu_dsigma = a2 * alpha * sigma * cv.D[2];
    p.d2q_dsigma2 = a2 * cv.D[1] + a2 * a2 * sigma * sigma * cv.D[3];
    return p;
}

inline MissProbPartials miss_prob_partials(const SelectionCdf& cdf, double alpha, double delta,
                                           double mu, double sigma,
                                           const QuadratureRule& rule = default_rule()) {
    detail::check_miss_args(alpha, sigma);
    if (alpha == 0.0) return {};
    return partials_from(convolve_psi(cdf, alpha, delta, mu, sigma, rule), alpha, sigma);
}

}  // namespace msnimble

#endif  // MSNIMBLE_SELECTION_MATH_HPP
