#ifndef MSNIMBLE_SIMULATE_HPP
#define MSNIMBLE_SIMULATE_HPP

// Synthetic data with latent factors and value-dependent missingness,
// imputation baselines, and operating-characteristic metrics.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include <boost/random/bernoulli_distribution.hpp>
#include <boost/random/binomial_distribution.hpp>
#include <boost/random/gamma_distribution.hpp>
#include <boost/random/mersenne_twister.hpp>
#include <boost/random/normal_distribution.hpp>
#include <boost/random/uniform_real_distribution.hpp>

#include "common.hpp"
#include "dataset.hpp"
#include "selection_math.hpp"

namespace msnimble {

using Rng = boost::random::mt19937_64;

/// log of the scale that gives Z with CDF Psi{exp(mu_alpha) x} unit variance.
inline double unit_variance_log_alpha(const SelectionCdf& cdf) {
    switch (cdf.family) {
        case CdfFamily::Logistic: return std::log(std::numbers::pi / std::sqrt(3.0));
        case CdfFamily::Normal: return 0.0;
        case CdfFamily::StudentT:
            if (!(cdf.df > 2.0)) throw Error("INVALID_ARGUMENT", "t with df <= 2 has no variance");
            return 0.5 * std::log(cdf.df / (cdf.df - 2.0));
    }
    return 0.0;
}

struct LoadingSpec {
    double pi = 0.2;   // point mass at zero
    double tau = 1.0;  // sd of the nonzero part
};

/// Geometric eigenvalues from `top` down to `bottom`, lambda_k = (1 - pi) tau_k^2.
inline std::vector<LoadingSpec> geometric_loadings(int k, double top = 0.8, double bottom = 0.05, double pi = 0.2) {
    std::vector<LoadingSpec> out;
    for (int j = 0; j < k; ++j) {
        const double t = k == 1 ? 0.0 : static_cast<double>(j) / (k - 1);
        const double lambda = top * std::pow(bottom / top, t);
        out.push_back({pi, std::sqrt(lambda / (1.0 - pi))});
    }
    return out;
}

struct SimConfig {
    int p = 400;
    int n = 300;
    int k = 5;
    double frac_nonzero_beta = 0.2;
    double beta_sd = 0.4;
    double mu_alpha = std::log(std::numbers::pi / std::sqrt(3.0));
    double alpha_log_sd = 0.4;
    double delta_mean = 16.0;
    double delta_sd = 1.2;
    double mu_mean = 18.0;
    double mu_sd = 5.0;
    double sigma_gamma_shape = 25.0;  // shape = rate, so E sigma^2 = 1
    double confounding_a = std::sqrt(3.0);
    int confounded_factors = 2;
    std::vector<LoadingSpec> loading_spec = geometric_loadings(5);
    SelectionCdf truth_cdf = SelectionCdf::logistic();
    std::uint64_t seed = 1;

    /// Default settings at a given size.
    static SimConfig desk(int p, int n, int k, std::uint64_t seed) {
        SimConfig c;
        c.p = p;
        c.n = n;
        c.k = k;
        c.loading_spec = geometric_loadings(k);
        c.seed = seed;
        return c;
    }

    void validate() const {
        if (p < 1 || n < 2 || k < 0) throw Error("INVALID_ARGUMENT", "bad simulation dimensions");
        if (static_cast<int>(loading_spec.size()) != k) throw Error("INVALID_ARGUMENT", "need one loading spec per factor");
        if (!(frac_nonzero_beta >= 0.0 && frac_nonzero_beta <= 1.0)) throw Error("INVALID_ARGUMENT", "bad beta fraction");
        for (const auto& l : loading_spec) {
            if (!(l.pi >= 0.0 && l.pi <= 1.0) || !(l.tau > 0.0)) throw Error("INVALID_ARGUMENT", "bad loading spec");
        }
        if (!(beta_sd > 0.0 && alpha_log_sd > 0.0 && delta_sd > 0.0 && mu_sd > 0.0 && sigma_gamma_shape > 0.0)) {
            throw Error("INVALID_ARGUMENT", "standard deviations must be positive");
        }
    }
};

struct SimTruth {
    Vector beta, mu, sigma, alpha, delta;
    Matrix ell;     // p x K
    Matrix c;       // n x K
    Vector x;       // treatment indicator
    Matrix y_full;  // p x n, before masking
    BoolMatrix r;
};

struct SimData {
    SimTruth truth;
    ObservedMatrix observed;
    DesignMatrix design;  // [treatment, intercept]
};

inline SimData generate(const SimConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    boost::random::normal_distribution<double> stdnorm(0.0, 1.0);
    boost::random::uniform_real_distribution<double> unif(0.0, 1.0);
    const Index p = cfg.p, n = cfg.n, K = cfg.k;

    SimData out;
    SimTruth& t = out.truth;
    t.x = Vector::Zero(n);
    for (Index i = 0; i < n / 2; ++i) t.x(i) = 1.0;

    t.alpha.resize(p);
    t.delta.resize(p);
    for (Index g = 0; g < p; ++g) {
        t.alpha(g) = std::exp(cfg.mu_alpha + cfg.alpha_log_sd * stdnorm(rng));
        t.delta(g) = cfg.delta_mean + cfg.delta_sd * stdnorm(rng);
    }
    t.c.resize(n, K);
    for (Index i = 0; i < n; ++i) {
        for (Index k = 0; k < K; ++k) {
            const double mean = k < cfg.confounded_factors ? cfg.confounding_a * t.x(i) : 0.0;
            t.c(i, k) = mean + stdnorm(rng);
        }
    }
    t.ell.resize(p, K);
    for (Index g = 0; g < p; ++g) {
        for (Index k = 0; k < K; ++k) {
            const auto& spec = cfg.loading_spec[static_cast<std::size_t>(k)];
            const bool zero = unif(rng) < spec.pi;
            const double v = spec.tau * stdnorm(rng);
            t.ell(g, k) = zero ? 0.0 : v;
        }
    }
    t.mu.resize(p);
    t.sigma.resize(p);
    boost::random::gamma_distribution<double> gam(cfg.sigma_gamma_shape, 1.0 / cfg.sigma_gamma_shape);
    for (Index g = 0; g < p; ++g) {
        t.mu(g) = cfg.mu_mean + cfg.mu_sd * stdnorm(rng);
        t.sigma(g) = std::sqrt(gam(rng));
    }
    t.beta.resize(p);
    for (Index g = 0; g < p; ++g) {
        const bool nonzero = unif(rng) < cfg.frac_nonzero_beta;
        const double v = cfg.beta_sd * stdnorm(rng);
        t.beta(g) = nonzero ? v : 0.0;
    }
    t.y_full.resize(p, n);
    for (Index g = 0; g < p; ++g) {
        for (Index i = 0; i < n; ++i) {
            t.y_full(g, i) = t.mu(g) + t.x(i) * t.beta(g) + t.c.row(i).dot(t.ell.row(g)) + t.sigma(g) * stdnorm(rng);
        }
    }
    t.r.resize(p, n);
    for (Index g = 0; g < p; ++g) {
        for (Index i = 0; i < n; ++i) {
            t.r(g, i) = unif(rng) < psi_cdf(cfg.truth_cdf, t.alpha(g) * (t.y_full(g, i) - t.delta(g)));
        }
    }

    out.observed = ObservedMatrix::from(t.y_full, t.r);
    Matrix xd(n, 2);
    xd.col(0) = t.x;
    xd.col(1).setOnes();
    out.design = make_design(xd, {"treatment", "(intercept)"}, 1);
    return out;
}

/// S x n genotypes, Binomial(2, maf) with maf ~ U(maf_lo, maf_hi) per SNP.
inline Matrix simulate_genotypes(Index s, Index n, std::uint64_t seed, double maf_lo = 0.05, double maf_hi = 0.5) {
    Rng rng(seed);
    boost::random::uniform_real_distribution<double> unif(maf_lo, maf_hi);
    Matrix g(s, n);
    for (Index j = 0; j < s; ++j) {
        boost::random::binomial_distribution<int> bin(2, unif(rng));
        for (Index i = 0; i < n; ++i) g(j, i) = bin(rng);
    }
    return g;
}

// ---------------------------------------------------------------------------
// Imputation baselines.

/// Fills each metabolite's missing cells with scale_a times its observed minimum.
inline Matrix impute_minimum(const ObservedMatrix& m, double scale_a = 1.0) {
    Matrix out = m.y;
    for (Index g = 0; g < m.p(); ++g) {
        double lo = std::numeric_limits<double>::infinity();
        for (Index i = 0; i < m.n(); ++i) {
            if (m.mask(g, i)) lo = std::min(lo, m.y(g, i));
        }
        if (!std::isfinite(lo)) throw Error("INSUFFICIENT_DATA", "metabolite '" + m.metabolite_ids[static_cast<std::size_t>(g)] + "' has no observed value");
        for (Index i = 0; i < m.n(); ++i) {
            if (!m.mask(g, i)) out(g, i) = scale_a * lo;
        }
    }
    return out;
}

struct SvdImputation {
    Matrix y;
    int iterations = 0;
    bool converged = false;
    std::vector<double> observed_fit;  // observed-cell squared error of each rank-k reconstruction
};

/// Iterative rank-k hard impute, started from row means.
inline SvdImputation impute_svd(const ObservedMatrix& m, int k, int max_iter = 200, double tol = 1e-8) {
    SvdImputation res;
    Matrix cur = m.y;
    for (Index g = 0; g < m.p(); ++g) {
        double sum = 0.0;
        Index cnt = 0;
        for (Index i = 0; i < m.n(); ++i) {
            if (m.mask(g, i)) {
                sum += m.y(g, i);
                ++cnt;
            }
        }
        if (cnt == 0) throw Error("INSUFFICIENT_DATA", "metabolite has no observed value");
        for (Index i = 0; i < m.n(); ++i) {
            if (!m.mask(g, i)) cur(g, i) = sum / static_cast<double>(cnt);
        }
    }
    if (k <= 0) {
        res.y = cur;
        res.converged = true;
        return res;
    }
    for (int it = 0; it < max_iter; ++it) {
        Eigen::BDCSVD<Matrix> svd(cur, Eigen::ComputeThinU | Eigen::ComputeThinV);
        const Index kk = std::min<Index>(k, svd.singularValues().size());
        const Matrix low = svd.matrixU().leftCols(kk) * svd.singularValues().head(kk).asDiagonal() *
                           svd.matrixV().leftCols(kk).transpose();
        double fit = 0.0, change = 0.0, norm = 0.0;
        Matrix next = cur;
        for (Index g = 0; g < m.p(); ++g) {
            for (Index i = 0; i < m.n(); ++i) {
                if (m.mask(g, i)) {
                    const double e = m.y(g, i) - low(g, i);
                    fit += e * e;
                } else {
                    const double d = low(g, i) - cur(g, i);
                    change += d * d;
                    next(g, i) = low(g, i);
                }
                norm += next(g, i) * next(g, i);
            }
        }
        res.observed_fit.push_back(fit);
        cur = std::move(next);
        res.iterations = it + 1;
        if (std::sqrt(change) <= tol * std::sqrt(norm)) {
            res.converged = true;
            break;
        }
    }
    res.y = std::move(cur);
    return res;
}

// ---------------------------------------------------------------------------
// Metrics.

/// Per-metabolite inference from one method, aligned with the truth rows.
struct MethodCalls {
    std::string method;
    Vector estimate;  // NaN where the method gave no answer
    Vector se;
    Vector qvalue;
};

struct MethodMetrics {
    std::string method;
    double q_threshold = 0.0;
    double fdp = 0.0;
    double power = 0.0;
    double coverage = 0.0;
    double mean_width = 0.0;
    Index n_rejected = 0;
    Index n_evaluated = 0;
};

/// FDP and power at each q threshold plus 95% CI coverage and width, over `rows`.
/// FDP with no rejections is 0.
inline std::vector<MethodMetrics> evaluate(const Vector& beta_true, const std::vector<MethodCalls>& methods,
                                           const std::vector<Index>& rows, const std::vector<double>& q_thresholds) {
    constexpr double z975 = 1.959963984540054;
    std::vector<MethodMetrics> out;
    for (const auto& mc : methods) {
        Index covered = 0, with_ci = 0;
        double width = 0.0;
        for (Index g : rows) {
            if (!std::isfinite(mc.estimate(g)) || !std::isfinite(mc.se(g))) continue;
            ++with_ci;
            if (std::fabs(mc.estimate(g) - beta_true(g)) <= z975 * mc.se(g)) ++covered;
            width += 2.0 * z975 * mc.se(g);
        }
        for (double qt : q_thresholds) {
            MethodMetrics mm;
            mm.method = mc.method;
            mm.q_threshold = qt;
            Index rejected = 0, false_rej = 0, signals = 0, true_rej = 0;
            for (Index g : rows) {
                const bool signal = beta_true(g) != 0.0;
                signals += signal;
                const bool rej = std::isfinite(mc.qvalue(g)) && mc.qvalue(g) <= qt;
                if (rej) {
                    ++rejected;
                    if (signal) ++true_rej;
                    else ++false_rej;
                }
            }
            mm.fdp = rejected == 0 ? 0.0 : static_cast<double>(false_rej) / static_cast<double>(rejected);
            mm.power = signals == 0 ? 0.0 : static_cast<double>(true_rej) / static_cast<double>(signals);
            mm.coverage = with_ci == 0 ? std::nan("") : static_cast<double>(covered) / static_cast<double>(with_ci);
            mm.mean_width = with_ci == 0 ? std::nan("") : width / static_cast<double>(with_ci);
            mm.n_rejected = rejected;
            mm.n_evaluated = static_cast<Index>(rows.size());
            out.push_back(mm);
        }
    }
    return out;
}

/// Root mean square of z = (b1 - b2) / sqrt(se1^2 + se2^2) over metabolites
/// estimated in two replicate datasets. Values above 1 indicate inflation.
inline double rms_z(const Vector& b1, const Vector& se1, const Vector& b2, const Vector& se2) {
    double s = 0.0;
    Index cnt = 0;
    for (Index g = 0; g < b1.size(); ++g) {
        const double z = (b1(g) - b2(g)) / std::sqrt(se1(g) * se1(g) + se2(g) * se2(g));
        if (!std::isfinite(z)) continue;
        s += z * z;
        ++cnt;
    }
    return cnt == 0 ? std::nan("") : std::sqrt(s / static_cast<double>(cnt));
}

}  // namespace msnimble

#endif  // MSNIMBLE_SIMULATE_HPP
