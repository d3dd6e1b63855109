#ifndef MSNIMBLE_MECHANISM_HPP
#define MSNIMBLE_MECHANISM_HPP

// Per-metabolite selection parameters (alpha_g, delta_g) by a grid-based
// Bayesian method of moments, and a JSON store for reusing them.

#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "common.hpp"
#include "dataset.hpp"
#include "selection_math.hpp"

namespace msnimble {

/// Candidate instruments: n x r matrix with centered, orthonormal columns.
struct InstrumentSet {
    Matrix u;
    std::string source;
};

/// Complete-class rows with the few missing cells filled by the row mean, then
/// row-centered.
inline Matrix centered_complete_block(const ObservedMatrix& m, const std::vector<Index>& rows) {
    Matrix b(static_cast<Index>(rows.size()), m.n());
    for (std::size_t k = 0; k < rows.size(); ++k) {
        const Index g = rows[k];
        double sum = 0.0;
        Index cnt = 0;
        for (Index i = 0; i < m.n(); ++i) {
            if (m.mask(g, i)) {
                sum += m.y(g, i);
                ++cnt;
            }
        }
        const double mean = cnt > 0 ? sum / static_cast<double>(cnt) : 0.0;
        for (Index i = 0; i < m.n(); ++i) b(static_cast<Index>(k), i) = m.mask(g, i) ? m.y(g, i) - mean : 0.0;
    }
    return b;
}

/// First `num_candidates` right singular vectors of the row-centered complete block.
inline InstrumentSet build_instruments(const ObservedMatrix& m, const MetabolitePartition& part, int num_candidates = 10) {
    if (num_candidates < 2) throw Error("INVALID_ARGUMENT", "need at least 2 candidate instruments");
    if (static_cast<int>(part.complete.size()) < num_candidates) {
        throw Error("INSUFFICIENT_DATA", "only " + std::to_string(part.complete.size()) +
                                             " complete metabolites for " + std::to_string(num_candidates) +
                                             " instruments");
    }
    const Matrix b = centered_complete_block(m, part.complete);
    Eigen::BDCSVD<Matrix> svd(b, Eigen::ComputeThinV);
    InstrumentSet inst;
    inst.u = svd.matrixV().leftCols(num_candidates);
    for (Index k = 0; k < inst.u.cols(); ++k) {
        // deterministic sign: largest-magnitude entry positive
        Index imax = 0;
        inst.u.col(k).cwiseAbs().maxCoeff(&imax);
        if (inst.u(imax, k) < 0.0) inst.u.col(k) *= -1.0;
    }
    inst.source = "top " + std::to_string(num_candidates) + " right singular vectors of " +
                  std::to_string(part.complete.size()) + " row-centered complete metabolites";
    return inst;
}

/// m_g = n^{-1/2} sum_i u_i [1 - r_i / Psi{alpha (y_i - delta)}]. Throws when
/// Psi underflows at an observed cell.
inline Vector moment_vector(const Eigen::Ref<const Vector>& y, const Eigen::Ref<const Eigen::Matrix<bool, Eigen::Dynamic, 1>>& r,
                            const Matrix& u, double alpha, double delta, const SelectionCdf& cdf) {
    if (!(alpha >= 0.0)) throw Error("INVALID_ARGUMENT", "alpha must be nonnegative");
    const Index n = u.rows();
    Vector out = Vector::Zero(u.cols());
    for (Index i = 0; i < n; ++i) {
        double term = 1.0;
        if (r(i)) {
            const double ps = psi_cdf(cdf, alpha * (y(i) - delta));
            if (!(ps > std::numeric_limits<double>::min())) {
                throw Error("INFEASIBLE", "observation probability underflows at sample " + std::to_string(i));
            }
            term = 1.0 - 1.0 / ps;
        }
        out += term * u.row(i).transpose();
    }
    return out / std::sqrt(static_cast<double>(n));
}

struct MechanismConfig {
    int n_alpha = 60;
    double log_alpha_lo = std::log(0.05);
    double log_alpha_hi = std::log(5.0);
    int n_delta = 80;
    double delta_sd_below = 2.0;  // delta grid starts at min(y) - this * sd(y)
    int instruments_kept = 3;
    int min_observed = 10;
    double prior_log_alpha_sd = 1.0;
    double boundary_mass_flag = 0.5;
    bool include_logdet = true;
    bool constant_instrument = true;  // prepend 1/sqrt(n) to the kept principal components
};

struct MechanismRecord {
    std::string id;
    double alpha = 0.0;
    double delta = 0.0;
    double sd_alpha = 0.0;
    double sd_delta = 0.0;
    double moment_norm = 0.0;  // ||m_g|| at the posterior mean
    double boundary_mass = 0.0;
    bool flagged = false;
    double delta_lo = 0.0;
    double delta_hi = 0.0;
    std::vector<int> instruments;
};

struct MechanismEstimate {
    static constexpr int kVersion = 1;
    SelectionCdf cdf;
    MechanismConfig config;
    std::vector<MechanismRecord> records;

    const MechanismRecord* find(const std::string& id) const {
        for (const auto& r : records) {
            if (r.id == id) return &r;
        }
        return nullptr;
    }
};

namespace detail {

inline std::vector<int> pick_instruments(const Vector& y, const Eigen::Matrix<bool, Eigen::Dynamic, 1>& r, const Matrix& u,
                                         int keep) {
    std::vector<double> score(static_cast<std::size_t>(u.cols()));
    double ybar = 0.0;
    Index nobs = 0;
    for (Index i = 0; i < y.size(); ++i) {
        if (r(i)) {
            ybar += y(i);
            ++nobs;
        }
    }
    ybar /= static_cast<double>(nobs);
    for (Index k = 0; k < u.cols(); ++k) {
        double ubar = 0.0;
        for (Index i = 0; i < y.size(); ++i) {
            if (r(i)) ubar += u(i, k);
        }
        ubar /= static_cast<double>(nobs);
        double sxy = 0.0, sxx = 0.0, syy = 0.0;
        for (Index i = 0; i < y.size(); ++i) {
            if (!r(i)) continue;
            const double a = u(i, k) - ubar;
            const double b = y(i) - ybar;
            sxy += a * b;
            sxx += a * a;
            syy += b * b;
        }
        score[static_cast<std::size_t>(k)] = sxx > 0.0 && syy > 0.0 ? std::fabs(sxy) / std::sqrt(sxx * syy) : 0.0;
    }
    std::vector<int> order(score.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return score[a] > score[b]; });
    order.resize(static_cast<std::size_t>(std::min<Index>(keep, u.cols())));
    std::sort(order.begin(), order.end());
    return order;
}

/// Grid-independent pieces of the moment likelihood: missing cells contribute
/// the fixed summand u_i.
struct GmmData {
    Matrix u_obs;   // observed rows of u
    Vector y_obs;
    Vector miss_sum;
    Matrix miss_outer;
    Index n = 0;

    GmmData(const Vector& y, const Eigen::Matrix<bool, Eigen::Dynamic, 1>& r, const Matrix& u) : n(u.rows()) {
        const Index q = u.cols();
        const Index no = r.count();
        u_obs.resize(no, q);
        y_obs.resize(no);
        miss_sum = Vector::Zero(q);
        miss_outer = Matrix::Zero(q, q);
        Index k = 0;
        for (Index i = 0; i < n; ++i) {
            if (r(i)) {
                u_obs.row(k) = u.row(i);
                y_obs(k++) = y(i);
            } else {
                miss_sum += u.row(i).transpose();
                miss_outer.noalias() += u.row(i).transpose() * u.row(i);
            }
        }
    }
};

/// Log of the N(0, V) density of m (up to a constant), with V the uncentered
/// sample covariance of the moment summands. -inf if infeasible.
inline double gmm_loglik(const GmmData& g, double alpha, double delta, const SelectionCdf& cdf, bool include_logdet = true) {
    const Index q = g.u_obs.cols();
    Vector t(g.y_obs.size());
    for (Index k = 0; k < t.size(); ++k) {
        const double ps = psi_cdf(cdf, alpha * (g.y_obs(k) - delta));
        if (!(ps > std::numeric_limits<double>::min())) return -std::numeric_limits<double>::infinity();
        t(k) = 1.0 - 1.0 / ps;
    }
    const double nd = static_cast<double>(g.n);
    const Vector mvec = (g.u_obs.transpose() * t + g.miss_sum) / std::sqrt(nd);
    Matrix v = (g.u_obs.transpose() * t.cwiseAbs2().asDiagonal() * g.u_obs + g.miss_outer) / nd;
    if (!mvec.allFinite() || !v.allFinite()) return -std::numeric_limits<double>::infinity();
    v.diagonal().array() += 1e-8 * v.trace() / static_cast<double>(q);
    Eigen::LLT<Matrix> llt(v);
    if (llt.info() != Eigen::Success) return -std::numeric_limits<double>::infinity();
    const double logdet = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
    const double quad = mvec.dot(llt.solve(mvec));
    return (include_logdet ? -0.5 * logdet : 0.0) - 0.5 * quad;
}

inline double gmm_loglik(const Vector& y, const Eigen::Matrix<bool, Eigen::Dynamic, 1>& r, const Matrix& u, double alpha,
                         double delta, const SelectionCdf& cdf, bool include_logdet = true) {
    return gmm_loglik(GmmData(y, r, u), alpha, delta, cdf, include_logdet);
}

}  // namespace detail

/// Posterior mean and sd of (alpha, delta) for one metabolite on the fixed grid.
inline MechanismRecord estimate_one(const Vector& y, const Eigen::Matrix<bool, Eigen::Dynamic, 1>& r, const Matrix& candidates,
                                    const SelectionCdf& cdf, const MechanismConfig& cfg) {
    std::vector<double> obs;
    for (Index i = 0; i < y.size(); ++i) {
        if (r(i)) obs.push_back(y(i));
    }
    if (static_cast<int>(obs.size()) < cfg.min_observed) {
        throw Error("INSUFFICIENT_DATA", "metabolite has " + std::to_string(obs.size()) + " observed values, need " +
                                             std::to_string(cfg.min_observed));
    }
    const double mean = std::accumulate(obs.begin(), obs.end(), 0.0) / static_cast<double>(obs.size());
    double ss = 0.0;
    for (double v : obs) ss += (v - mean) * (v - mean);
    const double sd = std::sqrt(ss / static_cast<double>(obs.size() - 1));
    const double ymin = *std::min_element(obs.begin(), obs.end());
    const double ymax = *std::max_element(obs.begin(), obs.end());

    MechanismRecord rec;
    rec.instruments = detail::pick_instruments(y, r, candidates, cfg.instruments_kept);
    const Index off = cfg.constant_instrument ? 1 : 0;
    Matrix u(candidates.rows(), static_cast<Index>(rec.instruments.size()) + off);
    if (off) u.col(0).setConstant(1.0 / std::sqrt(static_cast<double>(candidates.rows())));
    for (std::size_t k = 0; k < rec.instruments.size(); ++k) u.col(static_cast<Index>(k) + off) = candidates.col(rec.instruments[k]);

    rec.delta_lo = ymin - cfg.delta_sd_below * sd;
    rec.delta_hi = ymax;
    const double prior_delta_mean = quantile(obs, 0.10);
    const double prior_delta_sd = sd > 0.0 ? sd : 1.0;
    const double prior_la_mean = 0.5 * (cfg.log_alpha_lo + cfg.log_alpha_hi);

    const int na = cfg.n_alpha;
    const int nd = cfg.n_delta;
    const detail::GmmData gd(y, r, u);
    std::vector<double> logpost(static_cast<std::size_t>(na * nd));
    double best = -std::numeric_limits<double>::infinity();
    for (int a = 0; a < na; ++a) {
        const double la = cfg.log_alpha_lo + (cfg.log_alpha_hi - cfg.log_alpha_lo) * a / (na - 1);
        const double alpha = std::exp(la);
        for (int d = 0; d < nd; ++d) {
            const double delta = rec.delta_lo + (rec.delta_hi - rec.delta_lo) * d / (nd - 1);
            double lp = detail::gmm_loglik(gd, alpha, delta, cdf, cfg.include_logdet);
            const double za = (la - prior_la_mean) / cfg.prior_log_alpha_sd;
            const double zd = (delta - prior_delta_mean) / prior_delta_sd;
            lp += -0.5 * za * za - 0.5 * zd * zd;
            logpost[static_cast<std::size_t>(a * nd + d)] = lp;
            best = std::max(best, lp);
        }
    }
    if (!std::isfinite(best)) throw Error("INFEASIBLE", "no feasible (alpha, delta) on the grid");

    double total = 0.0, ma = 0.0, md = 0.0, saa = 0.0, sdd = 0.0, boundary = 0.0;
    for (int a = 0; a < na; ++a) {
        const double alpha = std::exp(cfg.log_alpha_lo + (cfg.log_alpha_hi - cfg.log_alpha_lo) * a / (na - 1));
        for (int d = 0; d < nd; ++d) {
            const double delta = rec.delta_lo + (rec.delta_hi - rec.delta_lo) * d / (nd - 1);
            const double w = std::exp(logpost[static_cast<std::size_t>(a * nd + d)] - best);
            total += w;
            ma += w * alpha;
            md += w * delta;
            saa += w * alpha * alpha;
            sdd += w * delta * delta;
            if (a == 0 || a == na - 1 || d == 0 || d == nd - 1) boundary += w;
        }
    }
    rec.alpha = ma / total;
    rec.delta = md / total;
    rec.sd_alpha = std::sqrt(std::max(0.0, saa / total - rec.alpha * rec.alpha));
    rec.sd_delta = std::sqrt(std::max(0.0, sdd / total - rec.delta * rec.delta));
    rec.boundary_mass = boundary / total;
    rec.flagged = rec.boundary_mass > cfg.boundary_mass_flag;
    try {
        rec.moment_norm = moment_vector(y, r, u, rec.alpha, rec.delta, cdf).norm();
    } catch (const Error&) {
        rec.moment_norm = std::numeric_limits<double>::infinity();
    }
    return rec;
}

/// Estimates (alpha_g, delta_g) for every missing-class metabolite.
inline MechanismEstimate estimate_mechanism(const ObservedMatrix& m, const MetabolitePartition& part, const InstrumentSet& inst,
                                            const SelectionCdf& cdf, const MechanismConfig& cfg = {}) {
    if (inst.u.rows() != m.n()) throw Error("INVALID_ARGUMENT", "instrument rows do not match sample count");
    if (inst.u.cols() < 2) throw Error("INVALID_ARGUMENT", "need at least 2 instruments");
    MechanismEstimate est;
    est.cdf = cdf;
    est.config = cfg;
    est.records.resize(part.missing.size());
    parallel_for(part.missing.size(), [&](std::size_t k) {
        const Index g = part.missing[k];
        const Vector y = m.y.row(g).transpose();
        const Eigen::Matrix<bool, Eigen::Dynamic, 1> r = m.mask.row(g).transpose();
        MechanismRecord rec = estimate_one(y, r, inst.u, cdf, cfg);
        rec.id = m.metabolite_ids[static_cast<std::size_t>(g)];
        est.records[k] = std::move(rec);
    });
    return est;
}

// ---------------------------------------------------------------------------
// Store.

inline nlohmann::json to_json(const MechanismEstimate& est) {
    nlohmann::json j;
    j["format"] = "msnimble-mechanisms";
    j["version"] = MechanismEstimate::kVersion;
    j["cdf"] = est.cdf.name();
    const auto& c = est.config;
    j["grid"] = {{"n_alpha", c.n_alpha},         {"log_alpha_lo", c.log_alpha_lo},
                 {"log_alpha_hi", c.log_alpha_hi}, {"n_delta", c.n_delta},
                 {"delta_sd_below", c.delta_sd_below}, {"instruments_kept", c.instruments_kept},
                 {"min_observed", c.min_observed}, {"prior_log_alpha_sd", c.prior_log_alpha_sd},
                 {"boundary_mass_flag", c.boundary_mass_flag}};
    j["records"] = nlohmann::json::array();
    for (const auto& r : est.records) {
        j["records"].push_back({{"id", r.id},
                                {"alpha", r.alpha},
                                {"delta", r.delta},
                                {"sd_alpha", r.sd_alpha},
                                {"sd_delta", r.sd_delta},
                                {"moment_norm", std::isfinite(r.moment_norm) ? nlohmann::json(r.moment_norm) : nlohmann::json()},
                                {"boundary_mass", r.boundary_mass},
                                {"flagged", r.flagged},
                                {"delta_lo", r.delta_lo},
                                {"delta_hi", r.delta_hi},
                                {"instruments", r.instruments}});
    }
    return j;
}

inline MechanismEstimate mechanisms_from_json(const nlohmann::json& j) {
    try {
        if (j.at("format") != "msnimble-mechanisms") throw Error("FORMAT_ERROR", "not a mechanism store");
        if (j.at("version").get<int>() != MechanismEstimate::kVersion) {
            throw Error("VERSION_MISMATCH", "mechanism store version " + j.at("version").dump());
        }
        MechanismEstimate est;
        est.cdf = SelectionCdf::parse(j.at("cdf").get<std::string>());
        const auto& g = j.at("grid");
        auto& c = est.config;
        c.n_alpha = g.at("n_alpha");
        c.log_alpha_lo = g.at("log_alpha_lo");
        c.log_alpha_hi = g.at("log_alpha_hi");
        c.n_delta = g.at("n_delta");
        c.delta_sd_below = g.at("delta_sd_below");
        c.instruments_kept = g.at("instruments_kept");
        c.min_observed = g.at("min_observed");
        c.prior_log_alpha_sd = g.at("prior_log_alpha_sd");
        c.boundary_mass_flag = g.at("boundary_mass_flag");
        for (const auto& r : j.at("records")) {
            MechanismRecord rec;
            rec.id = r.at("id");
            rec.alpha = r.at("alpha");
            rec.delta = r.at("delta");
            rec.sd_alpha = r.at("sd_alpha");
            rec.sd_delta = r.at("sd_delta");
            rec.moment_norm = r.at("moment_norm").is_null() ? std::numeric_limits<double>::infinity()
                                                            : r.at("moment_norm").get<double>();
            rec.boundary_mass = r.at("boundary_mass");
            rec.flagged = r.at("flagged");
            rec.delta_lo = r.at("delta_lo");
            rec.delta_hi = r.at("delta_hi");
            rec.instruments = r.at("instruments").get<std::vector<int>>();
            if (rec.alpha < 0.0) throw Error("FORMAT_ERROR", "negative alpha for '" + rec.id + "'");
            est.records.push_back(std::move(rec));
        }
        return est;
    } catch (const nlohmann::json::exception& e) {
        throw Error("FORMAT_ERROR", std::string("mechanism store: ") + e.what());
    } catch (const std::invalid_argument& e) {
        throw Error("FORMAT_ERROR", std::string("mechanism store: ") + e.what());
    }
}

inline void save_mechanisms(const MechanismEstimate& est, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw Error("IO_ERROR", "cannot write '" + path + "'");
    out << to_json(est).dump(1) << '\n';
}

/// Loads a store; fails if it was written for a different selection CDF.
inline MechanismEstimate load_mechanisms(const std::string& path, const SelectionCdf& expected) {
    std::ifstream in(path);
    if (!in) throw Error("IO_ERROR", "cannot open '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw Error("PARSE_ERROR", path + ": " + e.what());
    }
    MechanismEstimate est = mechanisms_from_json(j);
    if (!(est.cdf == expected)) {
        throw Error("CDF_MISMATCH", path + " was estimated with " + est.cdf.name() + ", not " + expected.name());
    }
    return est;
}

inline MechanismEstimate load_mechanisms(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("IO_ERROR", "cannot open '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw Error("PARSE_ERROR", path + ": " + e.what());
    }
    return mechanisms_from_json(j);
}

}  // namespace msnimble

#endif  // MSNIMBLE_MECHANISM_HPP
