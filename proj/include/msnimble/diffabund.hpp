#ifndef MSNIMBLE_DIFFABUND_HPP
#define MSNIMBLE_DIFFABUND_HPP

// Per-metabolite regression on z = (x, c_hat): inverse-probability-weighted
// start, Fisher scoring on the observed-data likelihood, Wald tests, q-values.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "common.hpp"
#include "selection_math.hpp"

namespace msnimble {

using MaskVector = Eigen::Matrix<bool, Eigen::Dynamic, 1>;

/// Benjamini-Hochberg step-up q-values; with `storey` the null proportion is
/// estimated from the p-values above 0.5.
inline std::vector<double> qvalues(const std::vector<double>& p, bool storey = false) {
    const std::size_t m = p.size();
    std::vector<double> q(m);
    if (m == 0) return q;
    for (double v : p) {
        if (!(v >= 0.0 && v <= 1.0)) throw Error("INVALID_ARGUMENT", "p-values must lie in [0, 1]");
    }
    double pi0 = 1.0;
    if (storey) {
        const double lambda = 0.5;
        const auto above = std::count_if(p.begin(), p.end(), [&](double v) { return v > lambda; });
        pi0 = std::min(1.0, static_cast<double>(above) / (static_cast<double>(m) * (1.0 - lambda)));
        if (pi0 <= 0.0) pi0 = 1.0 / static_cast<double>(m);
    }
    std::vector<std::size_t> order(m);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] < p[b]; });
    double running = 1.0;
    for (std::size_t k = m; k-- > 0;) {
        const std::size_t idx = order[k];
        running = std::min(running, pi0 * p[idx] * static_cast<double>(m) / static_cast<double>(k + 1));
        q[idx] = std::min(running, 1.0);
    }
    return q;
}

// ---------------------------------------------------------------------------
// IPW estimator.

struct IpwFit {
    Vector theta;
    double sigma = 0.0;
};

/// Weighted least squares of y on z with weights w (cells with w == 0 ignored).
inline IpwFit ipw_fit(const Vector& y, const Matrix& z, const Vector& w, const std::string& id = "") {
    const Index n = z.rows(), q = z.cols();
    Matrix a = Matrix::Zero(q, q);
    Vector b = Vector::Zero(q);
    double wsum = 0.0;
    for (Index i = 0; i < n; ++i) {
        if (!(w(i) > 0.0)) continue;
        a.selfadjointView<Eigen::Lower>().rankUpdate(z.row(i).transpose(), w(i));
        b += w(i) * y(i) * z.row(i).transpose();
        wsum += w(i);
    }
    a = a.selfadjointView<Eigen::Lower>();
    Eigen::LDLT<Matrix> ldlt(a);
    const Vector d = ldlt.vectorD();
    if (ldlt.info() != Eigen::Success || !(d.minCoeff() > 1e-12 * std::max(1.0, d.cwiseAbs().maxCoeff()))) {
        throw Error("SINGULAR", "weighted normal matrix is singular" + (id.empty() ? std::string() : " for '" + id + "'"));
    }
    IpwFit fit;
    fit.theta = ldlt.solve(b);
    double ss = 0.0;
    for (Index i = 0; i < n; ++i) {
        if (!(w(i) > 0.0)) continue;
        const double e = y(i) - z.row(i).dot(fit.theta);
        ss += w(i) * e * e;
    }
    fit.sigma = std::sqrt(ss / wsum);
    return fit;
}

/// Sandwich covariance of the IPW coefficients.
inline Matrix ipw_sandwich(const Vector& y, const Matrix& z, const Vector& w, const Vector& theta) {
    const Index q = z.cols();
    Matrix bread = Matrix::Zero(q, q), meat = Matrix::Zero(q, q);
    for (Index i = 0; i < z.rows(); ++i) {
        if (!(w(i) > 0.0)) continue;
        const double e = y(i) - z.row(i).dot(theta);
        bread.selfadjointView<Eigen::Lower>().rankUpdate(z.row(i).transpose(), w(i));
        meat.selfadjointView<Eigen::Lower>().rankUpdate(z.row(i).transpose(), w(i) * w(i) * e * e);
    }
    bread = bread.selfadjointView<Eigen::Lower>();
    meat = meat.selfadjointView<Eigen::Lower>();
    const Matrix binv = bread.ldlt().solve(Matrix::Identity(q, q));
    return binv * meat * binv;
}

// ---------------------------------------------------------------------------
// Observed-data likelihood.

struct MechParams {
    double alpha = 0.0;
    double delta = 0.0;
};

/// Sum over samples of the observed-data log-likelihood (constants dropped).
/// Returns -inf when a missing cell has observation probability above 1 - 1e-14.
inline double loglik(const Vector& y, const MaskVector& r, const Matrix& z, const MechParams& mech, const SelectionCdf& cdf,
                     const QuadratureRule& rule, const Vector& theta, double sigma) {
    if (!(sigma > 0.0)) throw Error("INVALID_ARGUMENT", "sigma must be positive");
    double ll = 0.0;
    const double log_sigma = std::log(sigma);
    for (Index i = 0; i < z.rows(); ++i) {
        const double mu = z.row(i).dot(theta);
        if (r(i)) {
            const double e = (y(i) - mu) / sigma;
            ll += -log_sigma - 0.5 * e * e;
        } else {
            const double miss = convolve_psi(cdf, mech.alpha, mech.delta, mu, sigma, rule).q_upper;
            if (!(miss > 1e-14)) return -std::numeric_limits<double>::infinity();
            ll += std::log(miss);
        }
    }
    return ll;
}

/// Per-sample score components and expected-information entries at (mu, sigma).
struct SampleTerms {
    double s_mu = 0.0, s_sigma = 0.0;  // score of the realised cell
    double i_mm = 0.0, i_ms = 0.0, i_ss = 0.0;
};

inline SampleTerms sample_terms(bool observed, double y, double mu, double sigma, const MechParams& mech, const SelectionCdf& cdf,
                                const QuadratureRule& rule) {
    SampleTerms t;
    const double s2 = sigma * sigma;
    const ConvolvedPsi cv = convolve_psi(cdf, mech.alpha, mech.delta, mu, sigma, rule);
    const double a = mech.alpha;
    const MissProbPartials d = partials_from(cv, a, sigma);
    const double q = cv.q;
    const double one_minus_q = cv.q_upper;
    const bool tail = one_minus_q > 1e-300;
    if (observed) {
        const double e = y - mu;
        t.s_mu = e / s2;
        t.s_sigma = -1.0 / sigma + e * e / (s2 * sigma);
    } else if (tail) {
        t.s_mu = -d.dq_dmu / one_minus_q;
        t.s_sigma = -d.dq_dsigma / one_minus_q;
    }
    t.i_mm = q / s2 + d.d2q_dmu2;
    t.i_ms = 2.0 * a * cv.D[0] / sigma + d.d2q_dmu_dsigma;
    t.i_ss = 2.0 * q / s2 + 3.0 * a * a * cv.D[1] + d.d2q_dsigma2;
    if (tail) {
        t.i_mm += d.dq_dmu * d.dq_dmu / one_minus_q;
        t.i_ms += d.dq_dmu * d.dq_dsigma / one_minus_q;
        t.i_ss += d.dq_dsigma * d.dq_dsigma / one_minus_q;
    }
    return t;
}

struct ScoreInfo {
    Vector score;  // (theta, sigma)
    Matrix info;
    bool ridged = false;
};

/// Gradient of loglik and the expected information, both over (theta, sigma).
inline ScoreInfo score_and_info(const Vector& y, const MaskVector& r, const Matrix& z, const MechParams& mech,
                                const SelectionCdf& cdf, const QuadratureRule& rule, const Vector& theta, double sigma) {
    const Index q = z.cols();
    ScoreInfo out;
    out.score = Vector::Zero(q + 1);
    out.info = Matrix::Zero(q + 1, q + 1);
    Matrix zz = Matrix::Zero(q, q);
    for (Index i = 0; i < z.rows(); ++i) {
        const double mu = z.row(i).dot(theta);
        const SampleTerms t = sample_terms(r(i), r(i) ? y(i) : 0.0, mu, sigma, mech, cdf, rule);
        out.score.head(q) += t.s_mu * z.row(i).transpose();
        out.score(q) += t.s_sigma;
        zz.selfadjointView<Eigen::Lower>().rankUpdate(z.row(i).transpose(), t.i_mm);
        out.info.col(q).head(q) += t.i_ms * z.row(i).transpose();
        out.info(q, q) += t.i_ss;
    }
    out.info.topLeftCorner(q, q) = zz.selfadjointView<Eigen::Lower>();
    out.info.row(q).head(q) = out.info.col(q).head(q).transpose();
    Eigen::LDLT<Matrix> ldlt(out.info);
    if (ldlt.info() != Eigen::Success || !(ldlt.vectorD().minCoeff() > 0.0)) {
        out.info.diagonal().array() += 1e-8 * out.info.trace();
        out.ridged = true;
    }
    return out;
}

/// Gaussian score and information using observed cells only.
inline ScoreInfo gaussian_score_and_info(const Vector& y, const MaskVector& r, const Matrix& z, const Vector& theta, double sigma) {
    const Index q = z.cols();
    ScoreInfo out;
    out.score = Vector::Zero(q + 1);
    out.info = Matrix::Zero(q + 1, q + 1);
    const double s2 = sigma * sigma;
    Matrix zz = Matrix::Zero(q, q);
    double nobs = 0.0;
    for (Index i = 0; i < z.rows(); ++i) {
        if (!r(i)) continue;
        const double e = y(i) - z.row(i).dot(theta);
        out.score.head(q) += e / s2 * z.row(i).transpose();
        out.score(q) += -1.0 / sigma + e * e / (s2 * sigma);
        zz.selfadjointView<Eigen::Lower>().rankUpdate(z.row(i).transpose(), 1.0 / s2);
        nobs += 1.0;
    }
    out.info.topLeftCorner(q, q) = zz.selfadjointView<Eigen::Lower>();
    out.info(q, q) = 2.0 * nobs / s2;
    return out;
}

// ---------------------------------------------------------------------------
// Fisher scoring.

struct FisherConfig {
    int max_iter = 10;
    double tol = 1e-8;
    double backtrack_tol = 1e-10;
    int max_halvings = 20;
};

struct CoefInference {
    Vector theta;
    double sigma = 0.0;
    Matrix cov;  // over (theta, sigma)
    int n_iter = 0;
    bool converged = false;
    bool ridged = false;
    bool backtrack_failed = false;
    bool gaussian = false;  // fitted without a missingness model
    Vector se;              // sqrt(diag cov) for theta
    Vector wald_p;          // interest coefficients
};

namespace detail {

inline void finish_inference(CoefInference& out, const Matrix& info, Index n_interest) {
    const Index q = info.rows();
    Matrix inv;
    if (!spd_inverse(info, inv)) {
        Matrix ridged = info;
        ridged.diagonal().array() += 1e-8 * info.trace();
        out.ridged = true;
        if (!spd_inverse(ridged, inv)) throw Error("SINGULAR", "information matrix is singular");
    }
    out.cov = 0.5 * (inv + inv.transpose());
    out.se = out.cov.diagonal().head(q - 1).cwiseMax(0.0).cwiseSqrt();
    out.wald_p.resize(n_interest);
    for (Index j = 0; j < n_interest; ++j) out.wald_p(j) = normal_two_sided(out.theta(j) / out.se(j));
}

}  // namespace detail

/// Gaussian regression on observed cells: OLS with the maximum-likelihood sigma.
inline CoefInference gaussian_fit(const Vector& y, const MaskVector& r, const Matrix& z, Index n_interest) {
    Vector w(r.size());
    for (Index i = 0; i < r.size(); ++i) w(i) = r(i) ? 1.0 : 0.0;
    const IpwFit start = ipw_fit(y, z, w);
    CoefInference out;
    out.theta = start.theta;
    out.sigma = start.sigma;
    out.gaussian = true;
    out.converged = true;
    out.n_iter = 0;
    const ScoreInfo si = gaussian_score_and_info(y, r, z, out.theta, out.sigma);
    detail::finish_inference(out, si.info, n_interest);
    return out;
}

/// Fisher scoring from the IPW start. `w` holds the IPW weights.
inline CoefInference fisher_fit(const Vector& y, const MaskVector& r, const Matrix& z, const Vector& w, const MechParams& mech,
                                const SelectionCdf& cdf, const QuadratureRule& rule, Index n_interest,
                                const FisherConfig& cfg = {}) {
    const Index q = z.cols();
    const IpwFit start = ipw_fit(y, z, w);
    CoefInference out;
    Vector eta(q + 1);
    eta.head(q) = start.theta;
    eta(q) = start.sigma;
    double ll = loglik(y, r, z, mech, cdf, rule, eta.head(q), eta(q));
    ScoreInfo si = score_and_info(y, r, z, mech, cdf, rule, eta.head(q), eta(q));
    out.ridged = si.ridged;
    for (int it = 0; it < cfg.max_iter; ++it) {
        const Vector step = si.info.ldlt().solve(si.score);
        double scale = 1.0;
        Vector next = eta + step;
        double ll_next = next(q) > 0.0 ? loglik(y, r, z, mech, cdf, rule, next.head(q), next(q))
                                       : -std::numeric_limits<double>::infinity();
        int halvings = 0;
        while (!(ll_next >= ll - cfg.backtrack_tol) && halvings < cfg.max_halvings) {
            scale *= 0.5;
            next = eta + scale * step;
            ll_next = next(q) > 0.0 ? loglik(y, r, z, mech, cdf, rule, next.head(q), next(q))
                                    : -std::numeric_limits<double>::infinity();
            ++halvings;
        }
        if (!(ll_next >= ll - cfg.backtrack_tol)) {
            out.backtrack_failed = true;
            break;
        }
        eta = next;
        ll = ll_next;
        out.n_iter = it + 1;
        si = score_and_info(y, r, z, mech, cdf, rule, eta.head(q), eta(q));
        out.ridged = out.ridged || si.ridged;
        if ((scale * step).norm() <= cfg.tol) {
            out.converged = true;
            break;
        }
    }
    out.theta = eta.head(q);
    out.sigma = eta(q);
    detail::finish_inference(out, si.info, n_interest);
    return out;
}

}  // namespace msnimble

#endif  // MSNIMBLE_DIFFABUND_HPP
