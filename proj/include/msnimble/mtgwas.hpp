#ifndef MSNIMBLE_MTGWAS_HPP
#define MSNIMBLE_MTGWAS_HPP

// Genome-wide score tests. Everything that does not involve the genotype is
// computed once per metabolite, so each SNP costs a few length-n passes.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "common.hpp"
#include "dataset.hpp"
#include "diffabund.hpp"
#include "selection_math.hpp"

namespace msnimble {

struct GenotypeMatrix {
    Eigen::Matrix<std::int8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> g;  // S x n, entries in {0, 1, 2}; one contiguous row per SNP
    std::vector<std::string> snp_ids;
    std::vector<std::string> skipped;  // SNPs dropped for minor allele count < min_mac

    Index s() const { return g.rows(); }
    Vector row(Index s) const { return g.row(s).transpose().cast<double>(); }
};

inline double minor_allele_count(const Eigen::Ref<const Vector>& g) {
    const double alt = g.sum();
    return std::min(alt, 2.0 * static_cast<double>(g.size()) - alt);
}

/// Keeps SNPs with minor allele count >= min_mac; the rest are listed in `skipped`.
inline GenotypeMatrix make_genotypes(const Matrix& g, std::vector<std::string> ids, double min_mac = 3.0) {
    if (ids.empty()) {
        for (Index s = 0; s < g.rows(); ++s) ids.push_back("snp" + std::to_string(s + 1));
    }
    if (static_cast<Index>(ids.size()) != g.rows()) throw Error("INVALID_ARGUMENT", "one SNP id per genotype row");
    GenotypeMatrix out;
    std::vector<Index> keep;
    for (Index s = 0; s < g.rows(); ++s) {
        for (Index i = 0; i < g.cols(); ++i) {
            const double v = g(s, i);
            if (v != 0.0 && v != 1.0 && v != 2.0) {
                throw Error("INVALID_ARGUMENT", "genotype for '" + ids[static_cast<std::size_t>(s)] + "' is not in {0,1,2}");
            }
        }
        if (minor_allele_count(g.row(s).transpose()) < min_mac) {
            out.skipped.push_back(ids[static_cast<std::size_t>(s)]);
        } else {
            keep.push_back(s);
        }
    }
    out.g.resize(static_cast<Index>(keep.size()), g.cols());
    for (std::size_t k = 0; k < keep.size(); ++k) {
        out.g.row(static_cast<Index>(k)) = g.row(keep[k]).cast<std::int8_t>();
        out.snp_ids.push_back(ids[static_cast<std::size_t>(keep[k])]);
    }
    return out;
}

/// SNP x sample TSV with a header of sample ids; columns are matched to `sample_ids`.
inline GenotypeMatrix load_genotypes(const std::string& path, const std::vector<std::string>& sample_ids, double min_mac = 3.0) {
    std::vector<std::size_t> lines;
    const auto rows = detail::read_table(path, TableFormat::Tsv, lines);
    if (rows.empty()) throw Error("PARSE_ERROR", path + ": empty genotype file");
    std::unordered_map<std::string, std::size_t> col;
    for (std::size_t j = 1; j < rows[0].size(); ++j) col[detail::trim(rows[0][j])] = j;
    std::vector<std::size_t> pick;
    for (const auto& id : sample_ids) {
        auto it = col.find(id);
        if (it == col.end()) throw Error("PARSE_ERROR", path + ": no genotype column for sample '" + id + "'");
        pick.push_back(it->second);
    }
    Matrix g(static_cast<Index>(rows.size() - 1), static_cast<Index>(sample_ids.size()));
    std::vector<std::string> ids;
    std::set<std::string> seen;
    for (std::size_t r = 1; r < rows.size(); ++r) {
        if (rows[r].size() != rows[0].size()) throw Error("PARSE_ERROR", detail::location(path, lines[r], rows[r].size()) + ": ragged row");
        const std::string id = detail::trim(rows[r][0]);
        if (!seen.insert(id).second) throw Error("PARSE_ERROR", detail::location(path, lines[r], 1) + ": duplicate SNP id '" + id + "'");
        ids.push_back(id);
        for (std::size_t k = 0; k < pick.size(); ++k) {
            double v = 0.0;
            const std::string cell = detail::trim(rows[r][pick[k]]);
            if (!detail::parse_double(cell, v) || (v != 0.0 && v != 1.0 && v != 2.0)) {
                throw Error("PARSE_ERROR", detail::location(path, lines[r], pick[k] + 1) + ": genotype '" + cell + "' not in {0,1,2}");
            }
            g(static_cast<Index>(r - 1), static_cast<Index>(k)) = v;
        }
    }
    return make_genotypes(g, std::move(ids), min_mac);
}

// ---------------------------------------------------------------------------
// Per-metabolite precomputation.

struct MetabolitePrecompute {
    Matrix z;              // n x q design (x, c_hat)
    Vector s;              // per-sample score for the mean
    Vector a, b, c;        // per-sample information weights (mean-mean, mean-sigma, sigma-sigma)
    Eigen::LLT<Matrix> m;  // factorization of the (theta, sigma) information
    Vector m_inv_score;    // M^{-1} times the (theta, sigma) score at the fit
    Vector ell;            // loadings on c_hat
    Matrix v_ell;          // their covariance block
};

/// Score residuals and information weights at the fitted (theta, sigma) with
/// gamma = 0. `mech == nullptr` means a Gaussian fit on the observed cells.
inline MetabolitePrecompute precompute_metabolite(const Vector& y, const MaskVector& r, const Matrix& z, const MechParams* mech,
                                                  const SelectionCdf& cdf, const QuadratureRule& rule, const CoefInference& fit,
                                                  Index k_factors) {
    const Index n = z.rows(), q = z.cols();
    MetabolitePrecompute pre;
    pre.z = z;
    pre.s.resize(n);
    pre.a.resize(n);
    pre.b.resize(n);
    pre.c.resize(n);
    const double sigma = fit.sigma;
    for (Index i = 0; i < n; ++i) {
        const double mu = z.row(i).dot(fit.theta);
        if (mech == nullptr) {
            const double s2 = sigma * sigma;
            pre.s(i) = r(i) ? (y(i) - mu) / s2 : 0.0;
            pre.a(i) = r(i) ? 1.0 / s2 : 0.0;
            pre.b(i) = 0.0;
            pre.c(i) = r(i) ? 2.0 / s2 : 0.0;
        } else {
            const SampleTerms t = sample_terms(r(i), r(i) ? y(i) : 0.0, mu, sigma, *mech, cdf, rule);
            pre.s(i) = t.s_mu;
            pre.a(i) = t.i_mm;
            pre.b(i) = t.i_ms;
            pre.c(i) = t.i_ss;
        }
    }
    Matrix info = Matrix::Zero(q + 1, q + 1);
    info.topLeftCorner(q, q) = z.transpose() * pre.a.asDiagonal() * z;
    info.col(q).head(q) = z.transpose() * pre.b;
    info.row(q).head(q) = info.col(q).head(q).transpose();
    info(q, q) = pre.c.sum();
    Vector score(q + 1);
    score.head(q) = z.transpose() * pre.s;
    if (mech == nullptr) {
        double ss = 0.0;
        for (Index i = 0; i < n; ++i) {
            if (r(i)) ss += (y(i) - z.row(i).dot(fit.theta)) * (y(i) - z.row(i).dot(fit.theta));
        }
        score(q) = -static_cast<double>(r.count()) / sigma + ss / (sigma * sigma * sigma);
    } else {
        score(q) = 0.0;
        for (Index i = 0; i < n; ++i) {
            score(q) += sample_terms(r(i), r(i) ? y(i) : 0.0, z.row(i).dot(fit.theta), sigma, *mech, cdf, rule).s_sigma;
        }
    }
    pre.m.compute(info);
    if (pre.m.info() != Eigen::Success) throw Error("SINGULAR", "information matrix is not positive definite");
    pre.m_inv_score = pre.m.solve(score);
    pre.ell = fit.theta.tail(k_factors);
    pre.v_ell = fit.cov.block(q - k_factors, q - k_factors, k_factors, k_factors);
    return pre;
}

struct TestResult {
    double stat = 0.0;
    double p = 1.0;
    bool flagged = false;
};

/// Score statistic for adding gamma * g to the mean. Uses the efficient score
/// (the gamma score minus its projection on the nuisance scores), which equals
/// the plain score at the exact MLE.
inline TestResult eta_e(const MetabolitePrecompute& pre, const Eigen::Ref<const Vector>& g) {
    const Index q = pre.z.cols();
    const Vector ag = pre.a.cwiseProduct(g);
    Vector v(q + 1);
    v.head(q).noalias() = pre.z.transpose() * ag;
    v(q) = pre.b.dot(g);
    const double u = g.dot(pre.s) - v.dot(pre.m_inv_score);
    const double igg = ag.dot(g);
    const Vector half = pre.m.matrixL().solve(v);
    const double schur = igg - half.squaredNorm();
    TestResult t;
    if (!(schur > 1e-10 * igg)) {
        t.flagged = true;
        return t;
    }
    t.stat = u * u / schur;
    t.p = chi2_upper(t.stat, 1.0);
    return t;
}

/// (l^T gamma)^2 / (l^T V_gamma l + gamma^T V_l gamma) against chi^2_1.
inline TestResult eta_c(const Vector& ell_hat, const Matrix& v_ell, const Vector& gamma_hat, const Matrix& v_gamma) {
    const double num = ell_hat.dot(gamma_hat);
    const double den = ell_hat.dot(v_gamma * ell_hat) + gamma_hat.dot(v_ell * gamma_hat);
    if (!(den > 0.0)) throw Error("DEGENERATE", "eta_c denominator is not positive");
    TestResult t;
    t.stat = num * num / den;
    t.p = chi2_upper(t.stat, 1.0);
    return t;
}

struct FactorRegression {
    Vector gamma_hat;
    Matrix v_gamma;
};

/// Genotype-free pieces of the regression of P_X^perp c_hat on P_X^perp g.
struct FactorRegressor {
    Matrix q_x;      // orthonormal basis of im(X)
    Matrix c_perp;   // P_X^perp c_hat
    Matrix ctc;      // c_hat^T P_X^perp c_hat
    Index dof = 0;   // n - d - 1

    FactorRegressor(const Matrix& c_hat, const DesignMatrix& x) {
        Eigen::HouseholderQR<Matrix> qr(x.x);
        q_x = qr.householderQ() * Matrix::Identity(x.n(), x.d());
        c_perp = c_hat - q_x * (q_x.transpose() * c_hat);
        ctc = c_perp.transpose() * c_perp;
        dof = x.n() - x.d() - 1;
    }

    FactorRegression operator()(const Eigen::Ref<const Vector>& g) const {
        const Vector gp = g - q_x * (q_x.transpose() * g);
        const double gg = gp.squaredNorm();
        if (!(gg > 1e-10 * std::max(1.0, g.squaredNorm()))) throw Error("COLLINEAR", "genotype lies in the span of X");
        FactorRegression out;
        out.gamma_hat = c_perp.transpose() * gp / gg;
        const Matrix rss = ctc - gg * out.gamma_hat * out.gamma_hat.transpose();
        out.v_gamma = rss / (static_cast<double>(dof) * gg);
        return out;
    }
};

inline FactorRegression regress_factors_on_genotype(const Matrix& c_hat, const DesignMatrix& x, const Eigen::Ref<const Vector>& g) {
    return FactorRegressor(c_hat, x)(g);
}

/// Wald test for a genotype added to an OLS fit on the observed cells.
struct GaussianGwasPrecompute {
    Matrix q_z;     // orthonormal basis of the observed rows of z
    Vector resid;   // observed-row residuals
    std::vector<Index> obs;
    double rss = 0.0;
    Index dof = 0;  // n_obs - q - 1

    GaussianGwasPrecompute(const Vector& y, const MaskVector& r, const Matrix& z) {
        for (Index i = 0; i < r.size(); ++i) {
            if (r(i)) obs.push_back(i);
        }
        const Index no = static_cast<Index>(obs.size());
        Matrix zo(no, z.cols());
        Vector yo(no);
        for (Index k = 0; k < no; ++k) {
            zo.row(k) = z.row(obs[static_cast<std::size_t>(k)]);
            yo(k) = y(obs[static_cast<std::size_t>(k)]);
        }
        Eigen::HouseholderQR<Matrix> qr(zo);
        q_z = qr.householderQ() * Matrix::Identity(no, z.cols());
        resid = yo - q_z * (q_z.transpose() * yo);
        rss = resid.squaredNorm();
        dof = no - z.cols() - 1;
    }

    TestResult wald(const Eigen::Ref<const Vector>& g) const {
        const Index no = static_cast<Index>(obs.size());
        Vector go(no);
        for (Index k = 0; k < no; ++k) go(k) = g(obs[static_cast<std::size_t>(k)]);
        const Vector gp = go - q_z * (q_z.transpose() * go);
        const double gg = gp.squaredNorm();
        TestResult t;
        if (!(gg > 1e-10 * std::max(1.0, go.squaredNorm())) || dof <= 0) {
            t.flagged = true;
            return t;
        }
        const double ge = go.dot(resid);
        const double rss1 = rss - ge * ge / gg;
        const double s2 = rss1 / static_cast<double>(dof);
        t.stat = ge * ge / (gg * s2);
        t.p = chi2_upper(t.stat, 1.0);
        return t;
    }
};

// ---------------------------------------------------------------------------
// Genome-wide loop.

struct GwasRow {
    Index metabolite = 0;  // index into the list of tested metabolites
    Index snp = 0;
    double eta_e = 0.0, p_e = 1.0;
    double eta_c = 0.0, p_c = 1.0;
    double eta_ce = 0.0, p_ce = 1.0;
    std::string flags;
};

/// Everything needed to test one metabolite.
struct GwasTarget {
    std::string id;
    Vector y;
    MaskVector r;
    bool gaussian = false;  // complete class: Wald test from OLS on (g, z_hat)
    MechParams mech;
    CoefInference fit;
};

/// Runs all (metabolite, SNP) pairs. Metabolites are processed in parallel
/// batches; `sink` receives rows in (metabolite, SNP) order.
inline void run_gwas(const std::vector<GwasTarget>& targets, const Matrix& z_hat, const Matrix& c_hat, const DesignMatrix& x,
                     const GenotypeMatrix& geno, const SelectionCdf& cdf, const QuadratureRule& rule,
                     const std::function<void(const GwasRow&)>& sink) {
    const Index S = geno.s();
    const Index K = c_hat.cols();
    // genotype-side regression shared by every metabolite
    std::vector<FactorRegression> freg(static_cast<std::size_t>(S));
    std::vector<std::string> freg_err(static_cast<std::size_t>(S));
    if (K > 0) {
        const FactorRegressor reg(c_hat, x);
        parallel_for(static_cast<std::size_t>(S), [&](std::size_t s) {
            try {
                freg[s] = reg(geno.row(static_cast<Index>(s)));
            } catch (const Error& e) {
                freg_err[s] = e.kind();
            }
        });
    }
    const std::size_t batch = std::max<std::size_t>(1, 2 * threads());
    for (std::size_t start = 0; start < targets.size(); start += batch) {
        const std::size_t stop = std::min(targets.size(), start + batch);
        std::vector<std::vector<GwasRow>> out(stop - start);
        parallel_for(stop - start, [&](std::size_t b) {
            const std::size_t t = start + b;
            const GwasTarget& tg = targets[t];
            auto& rows = out[b];
            rows.resize(static_cast<std::size_t>(S));
            std::string pre_err;
            MetabolitePrecompute pre;
            std::optional<GaussianGwasPrecompute> gpre;
            try {
                if (tg.gaussian) {
                    gpre.emplace(tg.y, tg.r, z_hat);
                    pre.ell = tg.fit.theta.tail(K);
                    const Index q = z_hat.cols();
                    pre.v_ell = tg.fit.cov.block(q - K, q - K, K, K);
                } else {
                    pre = precompute_metabolite(tg.y, tg.r, z_hat, &tg.mech, cdf, rule, tg.fit, K);
                }
            } catch (const Error& e) {
                pre_err = e.kind();
            }
            Vector g(geno.g.cols());
            for (Index s = 0; s < S; ++s) {
                GwasRow& row = rows[static_cast<std::size_t>(s)];
                row.metabolite = static_cast<Index>(t);
                row.snp = s;
                if (!pre_err.empty()) {
                    row.flags = pre_err;
                    row.eta_e = row.eta_c = row.eta_ce = std::nan("");
                    row.p_e = row.p_c = row.p_ce = std::nan("");
                    continue;
                }
                g = geno.g.row(s).transpose().cast<double>();
                const TestResult te = tg.gaussian ? gpre->wald(g) : eta_e(pre, g);
                TestResult tc;
                if (K > 0 && freg_err[static_cast<std::size_t>(s)].empty()) {
                    try {
                        const auto& fr = freg[static_cast<std::size_t>(s)];
                        tc = eta_c(pre.ell, pre.v_ell, fr.gamma_hat, fr.v_gamma);
                    } catch (const Error& e) {
                        tc.flagged = true;
                        row.flags += (row.flags.empty() ? "" : ",") + e.kind();
                    }
                } else if (K > 0) {
                    tc.flagged = true;
                    row.flags += (row.flags.empty() ? "" : ",") + freg_err[static_cast<std::size_t>(s)];
                }
                if (te.flagged) row.flags += (row.flags.empty() ? "" : ",") + std::string("COLLINEAR");
                row.eta_e = te.stat;
                row.p_e = te.p;
                row.eta_c = tc.stat;
                row.p_c = tc.p;
                row.eta_ce = te.stat + tc.stat;
                row.p_ce = chi2_upper(row.eta_ce, 2.0);
            }
        });
        for (const auto& rows : out) {
            for (const auto& row : rows) sink(row);
        }
    }
}

}  // namespace msnimble

#endif  // MSNIMBLE_MTGWAS_HPP
