#ifndef MSNIMBLE_FACTOR_HPP
#define MSNIMBLE_FACTOR_HPP

// Latent factors by inverse-probability-weighted alternating least squares,
// their regression on X (Omega), and the number of factors.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <boost/random/mersenne_twister.hpp>
#include <boost/random/uniform_int_distribution.hpp>
#include <json.hpp>

#include "common.hpp"
#include "dataset.hpp"
#include "diffabund.hpp"
#include "mechanism.hpp"
#include "selection_math.hpp"

namespace msnimble {

struct WeightMatrix {
    Matrix w;  // p x n; zero on missing cells and on discarded metabolites
    Index n_clamped = 0;
    std::vector<std::string> clamped_ids;  // one entry per metabolite with a clamped cell
};

/// Weights r / Psi{alpha (y - delta)} for missing-class rows, 1 on observed cells
/// of complete-class rows, 0 elsewhere; values above max_weight are clamped.
inline WeightMatrix compute_weights(const ObservedMatrix& m, const MetabolitePartition& part, const MechanismEstimate& mech,
                                    double max_weight = 50.0) {
    WeightMatrix out;
    out.w = Matrix::Zero(m.p(), m.n());
    for (Index g : part.complete) {
        for (Index i = 0; i < m.n(); ++i) out.w(g, i) = m.mask(g, i) ? 1.0 : 0.0;
    }
    for (Index g : part.missing) {
        const std::string& id = m.metabolite_ids[static_cast<std::size_t>(g)];
        const MechanismRecord* rec = mech.find(id);
        if (rec == nullptr) throw Error("MISSING_INPUT", "no mechanism estimate for metabolite '" + id + "'");
        bool clamped = false;
        for (Index i = 0; i < m.n(); ++i) {
            if (!m.mask(g, i)) continue;
            const double ps = psi_cdf(mech.cdf, rec->alpha * (m.y(g, i) - rec->delta));
            double w = ps > 0.0 ? 1.0 / ps : std::numeric_limits<double>::infinity();
            if (w > max_weight) {
                w = max_weight;
                ++out.n_clamped;
                clamped = true;
            }
            out.w(g, i) = w;
        }
        if (clamped) out.clamped_ids.push_back(id);
    }
    return out;
}

/// Complete-class block with missing cells at the row mean, times P_X^perp.
inline Matrix residual_complete_block(const ObservedMatrix& m, const MetabolitePartition& part, const DesignMatrix& x) {
    const Matrix b = centered_complete_block(m, part.complete);
    return project_out(x.x, b.transpose()).transpose();
}

/// First k right singular vectors of the complete block times P_X^perp.
inline Matrix init_subspace(const ObservedMatrix& m, const MetabolitePartition& part, const DesignMatrix& x, int k) {
    if (k < 1) throw Error("INVALID_ARGUMENT", "k must be at least 1");
    if (static_cast<int>(part.complete.size()) < k) {
        throw Error("INSUFFICIENT_DATA", "fewer complete metabolites than factors; use a smaller k");
    }
    const Matrix b = residual_complete_block(m, part, x);
    Eigen::BDCSVD<Matrix> svd(b, Eigen::ComputeThinV);
    const Vector& s = svd.singularValues();
    if (s.size() < k || !(s(k - 1) > 1e-10 * s(0))) {
        throw Error("RANK_DEFICIENT", "complete block has rank below k=" + std::to_string(k) + "; use a smaller k");
    }
    return orthonormalize(project_out(x.x, svd.matrixV().leftCols(k)));
}

struct FactorConfig {
    int max_iter = 200;
    double tol = 1e-8;
    int refine_iters = 3;
    double q_thresh = 0.1;
};

struct FactorEstimate {
    Matrix c_perp;    // n x K, orthonormal, X^T c_perp = 0
    Matrix loadings;  // p x K, coefficients on sqrt(n) c_perp
    Matrix coefs;     // p x d, coefficients on X
    Matrix omega_hat;  // d x K
    Matrix c_hat;     // n x K, sqrt(n) c_perp + X omega_hat
    std::vector<Index> rows;  // metabolite rows that entered the fit
    int k = 0;
    int iterations = 0;
    bool converged = false;
    std::vector<double> objective;       // after each (a) step
    std::vector<double> objective_b;     // after each (b) step, before re-orthonormalization
    std::vector<std::string> dropped;    // metabolites dropped from a C update
    std::vector<bool> omega_included;    // per entry of rows
    bool omega_reverted = false;
    double scale = 0.0;                  // sqrt(n)
};

namespace detail {

/// Weighted least squares of each row on [X, C]; rows whose normal matrix is
/// singular keep `ok = false`.
inline void regress_rows(const ObservedMatrix& m, const Matrix& w, const Matrix& z, const std::vector<Index>& rows, Matrix& coef,
                         std::vector<char>& ok) {
    const Index q = z.cols();
    parallel_for(rows.size(), [&](std::size_t k) {
        const Index g = rows[k];
        Matrix a = Matrix::Zero(q, q);
        Vector b = Vector::Zero(q);
        for (Index i = 0; i < m.n(); ++i) {
            const double wi = w(g, i);
            if (!(wi > 0.0)) continue;
            a.selfadjointView<Eigen::Lower>().rankUpdate(z.row(i).transpose(), wi);
            b.noalias() += (wi * m.y(g, i)) * z.row(i).transpose();
        }
        a = a.selfadjointView<Eigen::Lower>();
        Eigen::LDLT<Matrix> ldlt(a);
        const Vector d = ldlt.vectorD();
        if (ldlt.info() != Eigen::Success || !(d.minCoeff() > 1e-12 * std::max(1.0, d.cwiseAbs().maxCoeff()))) {
            ok[k] = 0;
            return;
        }
        ok[k] = 1;
        coef.row(static_cast<Index>(k)) = ldlt.solve(b).transpose();
    });
}

inline double objective(const ObservedMatrix& m, const Matrix& w, const std::vector<Index>& rows, const Matrix& bx,
                        const Matrix& lc) {
    // bx: |rows| x n fitted X part, lc: |rows| x n fitted factor part
    double total = 0.0;
    for (std::size_t k = 0; k < rows.size(); ++k) {
        const Index g = rows[k];
        for (Index i = 0; i < m.n(); ++i) {
            const double wi = w(g, i);
            if (!(wi > 0.0)) continue;
            const double e = m.y(g, i) - bx(static_cast<Index>(k), i) - lc(static_cast<Index>(k), i);
            total += wi * e * e;
        }
    }
    return total;
}

}  // namespace detail

/// Alternating weighted least squares for C^perp and per-metabolite (b_g, l_g).
inline FactorEstimate fit_factors(const ObservedMatrix& m, const DesignMatrix& x, const WeightMatrix& wm, int k, const Matrix& init,
                                  const FactorConfig& cfg = {}) {
    const Index n = m.n(), d = x.d();
    if (k < 0) throw Error("INVALID_ARGUMENT", "k must be nonnegative");
    if (x.n() != n) throw Error("INVALID_ARGUMENT", "design rows do not match samples");
    const Matrix& w = wm.w;
    FactorEstimate fe;
    fe.k = k;
    fe.scale = std::sqrt(static_cast<double>(n));
    for (Index g = 0; g < m.p(); ++g) {
        if ((w.row(g).array() > 0.0).any()) fe.rows.push_back(g);
    }
    const Index pr = static_cast<Index>(fe.rows.size());
    Matrix c = k > 0 ? orthonormalize(project_out(x.x, init)) : Matrix(n, 0);
    if (k > 0 && (init.rows() != n || init.cols() != k)) throw Error("INVALID_ARGUMENT", "init must be n x k");

    Matrix coef(pr, d + k);
    std::vector<char> ok(static_cast<std::size_t>(pr), 1);
    double prev = std::numeric_limits<double>::infinity();
    for (int it = 0; it < std::max(1, cfg.max_iter); ++it) {
        Matrix z(n, d + k);
        z << x.x, c;
        // (a) per-metabolite regressions
        detail::regress_rows(m, w, z, fe.rows, coef, ok);
        for (Index j = 0; j < pr; ++j) {
            if (!ok[static_cast<std::size_t>(j)]) {
                const std::string& id = m.metabolite_ids[static_cast<std::size_t>(fe.rows[static_cast<std::size_t>(j)])];
                if (std::find(fe.dropped.begin(), fe.dropped.end(), id) == fe.dropped.end()) fe.dropped.push_back(id);
                coef.row(j).setZero();
            }
        }
        const Matrix bx = coef.leftCols(d) * x.x.transpose();
        const Matrix lc = coef.rightCols(k) * c.transpose();
        const double obj = detail::objective(m, w, fe.rows, bx, lc);
        fe.objective.push_back(obj);
        fe.iterations = it + 1;
        if (k == 0) {
            fe.converged = true;
            break;
        }
        if (std::isfinite(prev) && prev - obj <= cfg.tol * std::max(prev, 1e-300)) {
            fe.converged = true;
            break;
        }
        prev = obj;
        // (b) per-sample K x K solves for the rows of C
        const Matrix ell = coef.rightCols(k);
        Matrix cnew = c;
        parallel_for(static_cast<std::size_t>(n), [&](std::size_t ii) {
            const Index i = static_cast<Index>(ii);
            Matrix a = Matrix::Zero(k, k);
            Vector b = Vector::Zero(k);
            for (Index j = 0; j < pr; ++j) {
                if (!ok[static_cast<std::size_t>(j)]) continue;
                const Index g = fe.rows[static_cast<std::size_t>(j)];
                const double wi = w(g, i);
                if (!(wi > 0.0)) continue;
                a.selfadjointView<Eigen::Lower>().rankUpdate(ell.row(j).transpose(), wi);
                b.noalias() += (wi * (m.y(g, i) - bx(j, i))) * ell.row(j).transpose();
            }
            a = a.selfadjointView<Eigen::Lower>();
            Eigen::LDLT<Matrix> ldlt(a);
            if (ldlt.info() == Eigen::Success && ldlt.vectorD().minCoeff() > 1e-12 * std::max(1.0, ldlt.vectorD().maxCoeff())) {
                cnew.row(i) = ldlt.solve(b).transpose();
            }
        });
        fe.objective_b.push_back(detail::objective(m, w, fe.rows, bx, ell * cnew.transpose()));
        c = orthonormalize(project_out(x.x, cnew));
    }
    fe.c_perp = c;
    fe.coefs = Matrix::Zero(m.p(), d);
    fe.loadings = Matrix::Zero(m.p(), k);
    for (Index j = 0; j < pr; ++j) {
        const Index g = fe.rows[static_cast<std::size_t>(j)];
        fe.coefs.row(g) = coef.row(j).head(d);
        fe.loadings.row(g) = coef.row(j).tail(k) / fe.scale;
    }
    return fe;
}

// ---------------------------------------------------------------------------
// Omega.

/// Closed-form (sum b l^T)(sum l l^T)^{-1} over the rows where include is true.
inline Matrix omega_closed_form(const Matrix& coefs, const Matrix& loadings, const std::vector<Index>& rows,
                                const std::vector<bool>& include) {
    const Index d = coefs.cols(), k = loadings.cols();
    Matrix bl = Matrix::Zero(d, k), ll = Matrix::Zero(k, k);
    for (std::size_t j = 0; j < rows.size(); ++j) {
        if (!include[j]) continue;
        const Index g = rows[j];
        bl += coefs.row(g).transpose() * loadings.row(g);
        ll += loadings.row(g).transpose() * loadings.row(g);
    }
    Eigen::LDLT<Matrix> ldlt(ll);
    if (ldlt.info() != Eigen::Success || !(ldlt.vectorD().minCoeff() > 1e-12 * std::max(1e-300, ldlt.vectorD().maxCoeff()))) {
        throw Error("SINGULAR", "sum of loading outer products is singular");
    }
    return ldlt.solve(bl.transpose()).transpose();
}

/// c_hat = sqrt(n) c_perp + X omega^T.
inline Matrix reconstruct_c(const FactorEstimate& fe, const DesignMatrix& x, const Matrix& omega) {
    return fe.scale * fe.c_perp + x.x * omega;
}

/// Per-metabolite IPW chi-square statistics for the interest coefficients with
/// sandwich covariance; p-values from chi^2_{d1}.
inline std::vector<double> ipw_interest_pvalues(const ObservedMatrix& m, const DesignMatrix& x, const Matrix& w, const Matrix& c_hat,
                                                const std::vector<Index>& rows) {
    const Index n = m.n(), d = x.d(), k = c_hat.cols(), d1 = x.n_interest;
    Matrix z(n, d + k);
    z << x.x, c_hat;
    std::vector<double> p(rows.size(), 1.0);
    parallel_for(rows.size(), [&](std::size_t j) {
        const Index g = rows[j];
        const Vector y = m.y.row(g).transpose().unaryExpr([](double v) { return std::isfinite(v) ? v : 0.0; });
        const Vector wg = w.row(g).transpose();
        try {
            const IpwFit fit = ipw_fit(y, z, wg);
            const Matrix v = ipw_sandwich(y, z, wg, fit.theta).topLeftCorner(d1, d1);
            const Vector b = fit.theta.head(d1);
            Eigen::LDLT<Matrix> ldlt(v);
            if (ldlt.info() != Eigen::Success || !(ldlt.vectorD().minCoeff() > 0.0)) return;
            p[j] = chi2_upper(b.dot(ldlt.solve(b)), static_cast<double>(d1));
        } catch (const Error&) {
            p[j] = 1.0;
        }
    });
    return p;
}

/// Omega by the closed form, then `refine_iters` rounds dropping metabolites
/// whose IPW interest test has q <= q_thresh. Fills omega_hat, c_hat and the
/// inclusion flags of fe.
inline void estimate_omega(FactorEstimate& fe, const ObservedMatrix& m, const DesignMatrix& x, const WeightMatrix& wm,
                           const FactorConfig& cfg = {}) {
    const Index d = x.d();
    if (fe.k == 0) {
        fe.omega_hat = Matrix::Zero(d, 0);
        fe.c_hat = Matrix::Zero(m.n(), 0);
        fe.omega_included.assign(fe.rows.size(), true);
        return;
    }
    std::vector<bool> include(fe.rows.size(), true);
    Matrix omega = omega_closed_form(fe.coefs, fe.loadings, fe.rows, include);
    fe.omega_reverted = false;
    for (int round = 0; round < cfg.refine_iters; ++round) {
        const Matrix c_hat = reconstruct_c(fe, x, omega);
        const std::vector<double> p = ipw_interest_pvalues(m, x, wm.w, c_hat, fe.rows);
        const std::vector<double> q = qvalues(p);
        std::vector<bool> next(fe.rows.size());
        bool any = false;
        for (std::size_t j = 0; j < q.size(); ++j) {
            next[j] = q[j] > cfg.q_thresh;
            any = any || next[j];
        }
        if (!any) {
            fe.omega_reverted = true;
            break;
        }
        try {
            omega = omega_closed_form(fe.coefs, fe.loadings, fe.rows, next);
        } catch (const Error&) {
            fe.omega_reverted = true;
            break;
        }
        include = std::move(next);
    }
    fe.omega_hat = omega;
    fe.omega_included = include;
    fe.c_hat = reconstruct_c(fe, x, omega);
}

struct ConfoundingTest {
    double stat = 0.0;
    double p_value = 1.0;
};

/// Omega_j^T Omega_j / [(X^T X)^{-1}]_jj against chi^2_K.
inline ConfoundingTest test_confounding(const Matrix& omega_hat, const DesignMatrix& x, Index j) {
    if (j < 0 || j >= x.n_interest) throw Error("INVALID_ARGUMENT", "column is not a covariate of interest");
    const Index d = x.d();
    const Matrix xtx_inv = (x.x.transpose() * x.x).ldlt().solve(Matrix::Identity(d, d));
    ConfoundingTest t;
    const double k = static_cast<double>(omega_hat.cols());
    t.stat = omega_hat.row(j).squaredNorm() / xtx_inv(j, j);
    t.p_value = k == 0 ? 1.0 : chi2_upper(t.stat, k);
    return t;
}

// ---------------------------------------------------------------------------
// Number of factors.

struct SelectKResult {
    int k = 0;
    Vector singular_values;
    Vector thresholds;  // 95th percentile under permutation
};

// Order statistic at position (N+1)p, so 19 permutations give the maximum and an exact 5% level.
inline double rank_quantile(std::vector<double> v, double prob) {
    std::sort(v.begin(), v.end());
    const double h = std::clamp((static_cast<double>(v.size()) + 1.0) * prob, 1.0, static_cast<double>(v.size()));
    const auto lo = static_cast<std::size_t>(std::floor(h)) - 1;
    const auto hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (h - std::floor(h)) * (v[hi] - v[lo]);
}

/// Parallel analysis on the X-residualized complete block: a component counts
/// while its singular value strictly exceeds the 95th percentile of the
/// corresponding singular value over row-wise permutations.
inline SelectKResult select_k(const ObservedMatrix& m, const MetabolitePartition& part, const DesignMatrix& x, int n_perm = 19,
                              std::uint64_t seed = 1, int max_k = -1) {
    if (part.complete.size() < 2) throw Error("INSUFFICIENT_DATA", "parallel analysis needs at least 2 complete metabolites");
    Matrix b = residual_complete_block(m, part, x);
    for (Index g = 0; g < b.rows(); ++g) {
        const double sd = b.row(g).norm();
        if (sd > 0.0) b.row(g) /= sd;
    }
    const Index kmax = max_k > 0 ? std::min<Index>(max_k, std::min(b.rows(), b.cols())) : std::min(b.rows(), b.cols());
    SelectKResult res;
    res.singular_values = Eigen::BDCSVD<Matrix>(b).singularValues().head(kmax);
    std::vector<std::vector<double>> perm_sv(static_cast<std::size_t>(kmax));
    boost::random::mt19937_64 rng(seed);
    std::vector<std::uint64_t> seeds(static_cast<std::size_t>(n_perm));
    for (auto& s : seeds) s = rng();
    std::vector<Vector> sv(static_cast<std::size_t>(n_perm));
    parallel_for(static_cast<std::size_t>(n_perm), [&](std::size_t t) {
        boost::random::mt19937_64 r(seeds[t]);
        Matrix pb = b;
        for (Index g = 0; g < pb.rows(); ++g) {
            for (Index i = pb.cols() - 1; i > 0; --i) {
                boost::random::uniform_int_distribution<Index> pick(0, i);
                std::swap(pb(g, i), pb(g, pick(r)));
            }
        }
        // permutation breaks orthogonality to X; restore it before the SVD
        pb = project_out(x.x, pb.transpose()).transpose();
        sv[t] = Eigen::BDCSVD<Matrix>(pb).singularValues().head(kmax);
    });
    res.thresholds.resize(kmax);
    for (Index j = 0; j < kmax; ++j) {
        std::vector<double> vals;
        for (const auto& v : sv) vals.push_back(v(j));
        res.thresholds(j) = rank_quantile(vals, 0.95);
    }
    res.k = 0;
    while (res.k < kmax && res.singular_values(res.k) > res.thresholds(res.k)) ++res.k;
    return res;
}

// ---------------------------------------------------------------------------
// Store.

namespace detail {

inline nlohmann::json matrix_json(const Matrix& a) {
    nlohmann::json rows = nlohmann::json::array();
    for (Index i = 0; i < a.rows(); ++i) {
        std::vector<double> r(static_cast<std::size_t>(a.cols()));
        for (Index j = 0; j < a.cols(); ++j) r[static_cast<std::size_t>(j)] = a(i, j);
        rows.push_back(r);
    }
    return {{"rows", a.rows()}, {"cols", a.cols()}, {"data", rows}};
}

inline Matrix json_matrix(const nlohmann::json& j) {
    Matrix a(j.at("rows").get<Index>(), j.at("cols").get<Index>());
    const auto& data = j.at("data");
    for (Index i = 0; i < a.rows(); ++i) {
        for (Index k = 0; k < a.cols(); ++k) a(i, k) = data.at(static_cast<std::size_t>(i)).at(static_cast<std::size_t>(k)).get<double>();
    }
    return a;
}

}  // namespace detail

inline void save_factors(const FactorEstimate& fe, const ObservedMatrix& m, const std::string& path) {
    nlohmann::json j;
    j["format"] = "msnimble-factors";
    j["version"] = 1;
    j["k"] = fe.k;
    j["iterations"] = fe.iterations;
    j["converged"] = fe.converged;
    j["omega_reverted"] = fe.omega_reverted;
    j["sample_ids"] = m.sample_ids;
    std::vector<std::string> ids;
    for (Index g : fe.rows) ids.push_back(m.metabolite_ids[static_cast<std::size_t>(g)]);
    j["metabolites"] = ids;
    std::vector<int> inc(fe.omega_included.begin(), fe.omega_included.end());
    j["omega_included"] = inc;
    j["c_perp"] = detail::matrix_json(fe.c_perp);
    j["c_hat"] = detail::matrix_json(fe.c_hat);
    j["omega_hat"] = detail::matrix_json(fe.omega_hat);
    Matrix l(static_cast<Index>(fe.rows.size()), fe.k), b(static_cast<Index>(fe.rows.size()), fe.coefs.cols());
    for (std::size_t r = 0; r < fe.rows.size(); ++r) {
        l.row(static_cast<Index>(r)) = fe.loadings.row(fe.rows[r]);
        b.row(static_cast<Index>(r)) = fe.coefs.row(fe.rows[r]);
    }
    j["loadings"] = detail::matrix_json(l);
    j["coefs"] = detail::matrix_json(b);
    j["objective"] = fe.objective;
    j["dropped"] = fe.dropped;
    std::ofstream out(path);
    if (!out) throw Error("IO_ERROR", "cannot write '" + path + "'");
    out << j.dump(1) << '\n';
}

/// Loads a factor store and re-indexes it against m's metabolite rows.
inline FactorEstimate load_factors(const std::string& path, const ObservedMatrix& m) {
    std::ifstream in(path);
    if (!in) throw Error("IO_ERROR", "cannot open '" + path + "'");
    try {
        nlohmann::json j;
        in >> j;
        if (j.at("format") != "msnimble-factors" || j.at("version") != 1) throw Error("FORMAT_ERROR", path + ": not a factor store");
        if (j.at("sample_ids").get<std::vector<std::string>>() != m.sample_ids) {
            throw Error("FORMAT_ERROR", path + ": sample ids differ from the input matrix");
        }
        FactorEstimate fe;
        fe.k = j.at("k");
        fe.iterations = j.at("iterations");
        fe.converged = j.at("converged");
        fe.omega_reverted = j.at("omega_reverted");
        fe.scale = std::sqrt(static_cast<double>(m.n()));
        fe.c_perp = detail::json_matrix(j.at("c_perp"));
        fe.c_hat = detail::json_matrix(j.at("c_hat"));
        fe.omega_hat = detail::json_matrix(j.at("omega_hat"));
        const Matrix l = detail::json_matrix(j.at("loadings"));
        const Matrix b = detail::json_matrix(j.at("coefs"));
        fe.loadings = Matrix::Zero(m.p(), fe.k);
        fe.coefs = Matrix::Zero(m.p(), b.cols());
        const auto ids = j.at("metabolites").get<std::vector<std::string>>();
        const auto inc = j.at("omega_included").get<std::vector<int>>();
        for (std::size_t r = 0; r < ids.size(); ++r) {
            auto it = std::find(m.metabolite_ids.begin(), m.metabolite_ids.end(), ids[r]);
            if (it == m.metabolite_ids.end()) throw Error("FORMAT_ERROR", path + ": unknown metabolite '" + ids[r] + "'");
            const Index g = static_cast<Index>(it - m.metabolite_ids.begin());
            fe.rows.push_back(g);
            fe.loadings.row(g) = l.row(static_cast<Index>(r));
            fe.coefs.row(g) = b.row(static_cast<Index>(r));
            fe.omega_included.push_back(inc.at(r) != 0);
        }
        fe.objective = j.at("objective").get<std::vector<double>>();
        fe.dropped = j.at("dropped").get<std::vector<std::string>>();
        return fe;
    } catch (const nlohmann::json::exception& e) {
        throw Error("FORMAT_ERROR", path + ": " + e.what());
    }
}

}  // namespace msnimble

#endif  // MSNIMBLE_FACTOR_HPP
