// Acceptance run: one PASS/FAIL line per criterion. Pass criterion numbers as
// arguments to run a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numbers>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include "msnimble/pipeline.hpp"

using namespace msnimble;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, double a) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), f, a);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------
// 1. math kernels

double oracle_q(const SelectionCdf& cdf, double alpha, double delta, double mu, double sigma) {
    auto f = [&](double e) {
        const double phi = std::exp(-0.5 * e * e) / std::sqrt(2.0 * std::numbers::pi);
        return psi(cdf, alpha * (mu + sigma * e - delta), 0) * phi;
    };
    const double mid = std::clamp(-(mu - delta) / sigma, -12.0, 12.0);
    using GK = boost::math::quadrature::gauss_kronrod<double, 31>;
    return GK::integrate(f, -12.0, mid, 15, 1e-13) + GK::integrate(f, mid, 12.0, 15, 1e-13);
}

Outcome criterion_1() {
    const SelectionCdf families[] = {SelectionCdf::student_t(4.0), SelectionCdf::logistic(), SelectionCdf::normal()};
    double psi_err = 0.0;
    const double h = 1e-5;
    for (const auto& cdf : families) {
        for (int i = 0; i < 200; ++i) {
            const double x = -50.0 + 100.0 * (i + 0.5) / 200.0;
            for (int k = 1; k <= 4; ++k) {
                const double fd = (psi(cdf, x + h, k - 1) - psi(cdf, x - h, k - 1)) / (2.0 * h);
                psi_err = std::max(psi_err, std::fabs(psi(cdf, x, k) - fd) / std::max(1.0, std::fabs(fd)));
            }
        }
    }

    double q_err = 0.0;
    for (const auto& cdf : families) {
        for (double alpha : {0.05, 0.5, 1.8, 5.0}) {
            for (double sigma : {0.3, 1.0, 2.5}) {
                for (double mu : {12.0, 16.0, 19.0, 30.0}) {
                    q_err = std::max(q_err, std::fabs(miss_prob(cdf, alpha, 16.0, mu, sigma) - oracle_q(cdf, alpha, 16.0, mu, sigma)));
                }
            }
        }
    }

    // 20 x 30 toy, z = (trt, 1, c); 20 random parameter points per metabolite
    const SelectionCdf t4 = SelectionCdf::student_t(4.0);
    std::mt19937_64 rng(11);
    std::normal_distribution<double> nd;
    std::uniform_real_distribution<double> unif;
    const Index p = 20, n = 30;
    Matrix z(n, 3);
    for (Index i = 0; i < n; ++i) z.row(i) << (i < n / 2 ? 1.0 : 0.0), 1.0, nd(rng);
    double score_err = 0.0;
    for (Index g = 0; g < p; ++g) {
        const Vector theta{{0.5 * nd(rng), 17.0 + nd(rng), nd(rng)}};
        const double sigma = 0.8 + 0.4 * unif(rng);
        const MechParams mp{0.5 + unif(rng), 16.0 + nd(rng)};
        Vector y(n);
        MaskVector r(n);
        for (Index i = 0; i < n; ++i) {
            const double v = z.row(i).dot(theta) + sigma * nd(rng);
            r(i) = unif(rng) < psi(t4, mp.alpha * (v - mp.delta), 0);
            y(i) = r(i) ? v : 0.0;
        }
        for (int k = 0; k < 20; ++k) {
            const Vector eta{{0.5 * nd(rng), 17.0 + nd(rng), 0.5 * nd(rng), 0.6 + unif(rng)}};
            const auto f = [&](const Vector& e) { return loglik(y, r, z, mp, t4, default_rule(), e.head(3), e(3)); };
            const ScoreInfo si = score_and_info(y, r, z, mp, t4, default_rule(), eta.head(3), eta(3));
            for (Index j = 0; j < 4; ++j) {
                auto cd = [&](double hh) {
                    Vector a = eta, b = eta;
                    a(j) += hh;
                    b(j) -= hh;
                    return (f(a) - f(b)) / (2.0 * hh);
                };
                const double fd = (4.0 * cd(5e-4) - cd(1e-3)) / 3.0;
                score_err = std::max(score_err, std::fabs(si.score(j) - fd) / std::max(1.0, std::fabs(fd)));
            }
        }
    }
    Outcome o;
    o.pass = psi_err <= 1e-6 && q_err <= 1e-8 && score_err <= 1e-6;
    o.detail = "psi deriv rel err " + fmt("%.2e", psi_err) + ", miss_prob err " + fmt("%.2e", q_err) + ", score rel err " +
               fmt("%.2e", score_err);
    return o;
}

// ---------------------------------------------------------------------------
// 2. oracle reductions

Outcome criterion_2() {
    std::mt19937_64 rng(17);
    std::normal_distribution<double> nd;
    auto gauss = [&](Index r, Index c) {
        Matrix a(r, c);
        for (Index i = 0; i < a.size(); ++i) a.data()[i] = nd(rng);
        return a;
    };
    const Index n = 60, p = 80;
    const int k = 3;
    Matrix xm(n, 2);
    for (Index i = 0; i < n; ++i) xm.row(i) << (i % 2 ? 1.0 : 0.0), 1.0;
    const DesignMatrix x = make_design(xm, {"treatment", "(intercept)"}, 1);
    const Matrix y = gauss(p, k) * gauss(k, n) + 0.3 * gauss(p, n) + gauss(p, 2) * xm.transpose();
    const ObservedMatrix m = ObservedMatrix::from(y, BoolMatrix::Constant(p, n, true));
    WeightMatrix wm;
    wm.w = Matrix::Ones(p, n);
    FactorConfig cfg;
    cfg.tol = 1e-15;
    cfg.max_iter = 5000;
    const FactorEstimate fe = fit_factors(m, x, wm, k, gauss(n, k), cfg);
    const Matrix resid = project_out(xm, y.transpose()).transpose();
    Eigen::BDCSVD<Matrix> svd(resid, Eigen::ComputeThinV);
    const double sub = subspace_distance(fe.c_perp, svd.matrixV().leftCols(k));

    const Index nn = 50;
    Matrix z(nn, 3);
    Vector yy(nn);
    for (Index i = 0; i < nn; ++i) {
        z.row(i) << (i % 2 ? 1.0 : 0.0), 1.0, nd(rng);
        yy(i) = 17 + 0.4 * z(i, 0) + 0.8 * z(i, 2) + nd(rng);
    }
    const Vector ols = z.colPivHouseholderQr().solve(yy);
    const double s2 = (yy - z * ols).squaredNorm() / static_cast<double>(nn);
    const Matrix cov_ols = s2 * (z.transpose() * z).inverse();
    // a mechanism that cannot hide a cell
    const CoefInference fit = fisher_fit(yy, MaskVector::Constant(nn, true), z, Vector::Ones(nn), MechParams{5.0, -100.0},
                                         SelectionCdf::normal(), default_rule(), 1);
    const double est_err = (fit.theta - ols).cwiseAbs().maxCoeff();
    const double cov_err = (fit.cov.topLeftCorner(3, 3) - cov_ols).cwiseAbs().maxCoeff();
    Outcome o;
    o.pass = sub <= 1e-6 && est_err <= 1e-8 && cov_err <= 1e-8;
    o.detail = "subspace dist " + fmt("%.2e", sub) + ", fisher vs OLS est " + fmt("%.2e", est_err) + " cov " + fmt("%.2e", cov_err);
    return o;
}

// ---------------------------------------------------------------------------
// 3 and 4. FDP and coverage, desk scale, logistic truth / t4 analysis

struct DeskRuns {
    std::vector<double> fdp_ms, fdp_min;
    // pooled over replicates, missing-class rows with a CI from both methods
    std::vector<double> abs_beta;
    std::vector<bool> cover_ms, cover_min;
    double seconds = 0.0;
};

const DeskRuns& desk_runs() {
    static DeskRuns runs = [] {
        DeskRuns d;
        const auto t0 = std::chrono::steady_clock::now();
        constexpr double z975 = 1.959963984540054;
        const RunConfig cfg;
        for (std::uint64_t seed = 1; seed <= 10; ++seed) {
            const ReplicateResult rr = run_replicate(SimConfig::desk(400, 300, 5, seed), {"msnimble", "min-impute"}, cfg);
            const auto mm = evaluate(rr.sim.truth.beta, rr.calls, rr.missing_rows, {0.2});
            d.fdp_ms.push_back(mm[0].fdp);
            d.fdp_min.push_back(mm[1].fdp);
            const MethodCalls& ms = rr.calls[0];
            const MethodCalls& mn = rr.calls[1];
            for (Index g : rr.missing_rows) {
                if (!std::isfinite(ms.estimate(g)) || !std::isfinite(mn.estimate(g))) continue;
                const double b = rr.sim.truth.beta(g);
                d.abs_beta.push_back(std::fabs(b));
                d.cover_ms.push_back(std::fabs(ms.estimate(g) - b) <= z975 * ms.se(g));
                d.cover_min.push_back(std::fabs(mn.estimate(g) - b) <= z975 * mn.se(g));
            }
        }
        d.seconds = seconds_since(t0);
        return d;
    }();
    return runs;
}

Outcome criterion_3() {
    const DeskRuns& d = desk_runs();
    const double ms = median(d.fdp_ms), mn = median(d.fdp_min);
    Outcome o;
    o.pass = ms <= 0.25 && mn >= 0.35;
    o.detail = "median FDP at q=0.2: msnimble " + fmt("%.3f", ms) + ", min-impute " + fmt("%.3f", mn) + " (" +
               fmt("%.0f", d.seconds) + " s)";
    return o;
}

Outcome criterion_4() {
    const DeskRuns& d = desk_runs();
    const std::size_t total = d.abs_beta.size();
    double cov_ms = 0.0;
    for (bool c : d.cover_ms) cov_ms += c;
    cov_ms /= static_cast<double>(total);
    // top decile of |beta| among the pooled missing-class rows
    std::vector<std::size_t> order(total);
    for (std::size_t i = 0; i < total; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return d.abs_beta[a] > d.abs_beta[b]; });
    const std::size_t top = std::max<std::size_t>(1, total / 10);
    double top_ms = 0.0, top_min = 0.0;
    for (std::size_t t = 0; t < top; ++t) {
        top_ms += d.cover_ms[order[t]];
        top_min += d.cover_min[order[t]];
    }
    top_ms /= static_cast<double>(top);
    top_min /= static_cast<double>(top);
    Outcome o;
    o.pass = cov_ms >= 0.91 && cov_ms <= 0.98 && top_min <= top_ms - 0.10;
    o.detail = "msnimble coverage " + fmt("%.3f", cov_ms) + " over " + std::to_string(total) + " rows; top |beta| decile: msnimble " +
               fmt("%.3f", top_ms) + ", min-impute " + fmt("%.3f", top_min);
    return o;
}

// ---------------------------------------------------------------------------
// 5. minimum imputation with known C

double min_impute_type1(double a) {
    Index rejected = 0, nulls = 0;
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        SimConfig sc = SimConfig::desk(400, 600, 5, seed);
        sc.confounding_a = a;
        const ReplicateResult rr = run_replicate(sc, {"min-impute-oracle"}, RunConfig{});
        const MethodCalls& mc = rr.calls[0];
        for (Index g : rr.missing_rows) {
            if (rr.sim.truth.beta(g) != 0.0 || !std::isfinite(mc.estimate(g))) continue;
            ++nulls;
            if (normal_two_sided(mc.estimate(g) / mc.se(g)) < 0.05) ++rejected;
        }
    }
    return static_cast<double>(rejected) / static_cast<double>(nulls);
}

Outcome criterion_5() {
    const auto t0 = std::chrono::steady_clock::now();
    const double free = min_impute_type1(0.0);
    const double conf = min_impute_type1(std::sqrt(3.0));
    Outcome o;
    o.pass = free >= 0.035 && free <= 0.065 && conf > 0.10;
    o.detail = "type-I a=0 " + fmt("%.3f", free) + ", a=sqrt(3) " + fmt("%.3f", conf) + " (" + fmt("%.0f", seconds_since(t0)) + " s)";
    return o;
}

// ---------------------------------------------------------------------------
// 6. confounding test under the null

Outcome criterion_6() {
    const auto t0 = std::chrono::steady_clock::now();
    const int reps = 500;
    int rejected = 0, done = 0;
    for (int r = 0; r < reps; ++r) {
        SimConfig sc = SimConfig::desk(200, 200, 5, 10000 + static_cast<std::uint64_t>(r));
        sc.confounding_a = 0.0;
        const SimData sim = generate(sc);
        const PipelineResult res = run_pipeline(sim.observed, sim.design, RunConfig{});
        ++done;
        if (res.da.confounding[0].p_value < 0.05) ++rejected;
    }
    const double rate = static_cast<double>(rejected) / done;
    Outcome o;
    o.pass = rate >= 0.03 && rate <= 0.07;
    o.detail = "null rejection " + fmt("%.3f", rate) + " over " + std::to_string(done) + " replicates (" +
               fmt("%.0f", seconds_since(t0)) + " s)";
    return o;
}

// ---------------------------------------------------------------------------
// 7. score-test calibration

Outcome criterion_7() {
    const auto t0 = std::chrono::steady_clock::now();
    Index pairs = 0, rej_e = 0, rej_c = 0, rej_ce = 0;
    double se = 0, sc = 0, see = 0, scc = 0, sec = 0;
    for (std::uint64_t seed = 1; seed <= 4; ++seed) {
        const SimData sim = generate(SimConfig::desk(400, 600, 5, seed));
        const RunConfig cfg;
        const PipelineResult res = run_pipeline(sim.observed, sim.design, cfg);
        std::vector<GwasTarget> targets;
        for (GwasTarget& t : gwas_targets(sim.observed, res.mech, res.da)) {
            if (!t.gaussian) targets.push_back(std::move(t));
        }
        const GenotypeMatrix geno = make_genotypes(simulate_genotypes(2500, 600, 500 + seed), {});
        run_gwas(targets, res.da.z_hat, res.factors.c_hat, sim.design, geno, cfg.cdf, QuadratureRule::make(cfg.quad_order),
                 [&](const GwasRow& row) {
                     if (!row.flags.empty()) return;
                     ++pairs;
                     rej_e += row.p_e < 0.05;
                     rej_c += row.p_c < 0.05;
                     rej_ce += row.p_ce < 0.05;
                     se += row.eta_e;
                     sc += row.eta_c;
                     see += row.eta_e * row.eta_e;
                     scc += row.eta_c * row.eta_c;
                     sec += row.eta_e * row.eta_c;
                 });
    }
    const double np = static_cast<double>(pairs);
    const double corr = (sec / np - (se / np) * (sc / np)) /
                        std::sqrt((see / np - (se / np) * (se / np)) * (scc / np - (sc / np) * (sc / np)));
    const double te = rej_e / np, tc = rej_c / np, tce = rej_ce / np;
    auto in = [](double v) { return v >= 0.04 && v <= 0.06; };
    Outcome o;
    o.pass = pairs >= 20000 && in(te) && in(tc) && in(tce) && std::fabs(corr) <= 0.05;
    o.detail = "type-I eta_e " + fmt("%.4f", te) + ", eta_c " + fmt("%.4f", tc) + ", eta_ce " + fmt("%.4f", tce) + ", corr " +
               fmt("%.4f", corr) + " over " + std::to_string(pairs) + " pairs (" + fmt("%.0f", seconds_since(t0)) + " s)";
    return o;
}

// ---------------------------------------------------------------------------
// 8. one Fisher step

Outcome criterion_8() {
    const SimData sim = generate(SimConfig::desk(400, 600, 5, 1));
    const RunConfig cfg;
    const MetabolitePartition part = partition_metabolites(sim.observed);
    const MechanismEstimate mech = estimate_mechanisms(sim.observed, part, cfg);
    const WeightMatrix wm = compute_weights(sim.observed, part, mech, cfg.max_weight);
    const FactorEstimate fe = estimate_factors(sim.observed, part, sim.design, wm, cfg);
    const Matrix z = z_hat_of(sim.design, fe);
    const QuadratureRule rule = QuadratureRule::make(cfg.quad_order);
    FisherConfig one;
    one.max_iter = 1;
    FisherConfig full;
    full.max_iter = 200;
    full.tol = 1e-10;
    std::vector<double> diffs;
    for (Index g : part.missing) {
        const MechanismRecord* mr = mech.find(sim.observed.metabolite_ids[static_cast<std::size_t>(g)]);
        const Vector y = observed_or_zero(sim.observed, g);
        const MaskVector r = sim.observed.mask.row(g).transpose();
        const Vector w = wm.w.row(g).transpose();
        const MechParams mp{mr->alpha, mr->delta};
        try {
            const CoefInference a = fisher_fit(y, r, z, w, mp, mech.cdf, rule, 1, one);
            const CoefInference b = fisher_fit(y, r, z, w, mp, mech.cdf, rule, 1, full);
            diffs.push_back(std::sqrt(600.0) * std::fabs(a.theta(0) - b.theta(0)));
        } catch (const Error&) {
        }
    }
    const double med = median(diffs);
    Outcome o;
    o.pass = med <= 0.05;
    o.detail = "median sqrt(n)|one step - converged| " + fmt("%.4f", med) + " over " + std::to_string(diffs.size()) + " metabolites";
    return o;
}

// ---------------------------------------------------------------------------
// 9. GWAS throughput

Outcome criterion_9() {
    const SimData sim = generate(SimConfig::desk(200, 300, 5, 3));
    const RunConfig cfg;
    const PipelineResult res = run_pipeline(sim.observed, sim.design, cfg);
    std::vector<GwasTarget> targets;
    for (GwasTarget& t : gwas_targets(sim.observed, res.mech, res.da)) {
        if (!t.gaussian) targets.push_back(std::move(t));
    }
    const GenotypeMatrix big = make_genotypes(simulate_genotypes(50000, 300, 99), {});
    GenotypeMatrix half;
    half.g = big.g.topRows(25000);
    half.snp_ids.assign(big.snp_ids.begin(), big.snp_ids.begin() + 25000);
    const QuadratureRule rule = QuadratureRule::make(cfg.quad_order);
    auto timed = [&](const GenotypeMatrix& geno) {
        double sink = 0.0;
        const auto t0 = std::chrono::steady_clock::now();
        run_gwas(targets, res.da.z_hat, res.factors.c_hat, sim.design, geno, cfg.cdf, rule, [&](const GwasRow& r) { sink += r.eta_ce; });
        const double s = seconds_since(t0);
        if (!std::isfinite(sink)) std::printf("# non-finite statistic\n");
        return s;
    };
    const double t25 = timed(half);
    const double t50 = timed(big);
    const double ratio = t50 / t25;
    Outcome o;
    o.pass = ratio <= 2.3;
    o.detail = "S=25k " + fmt("%.2f", t25) + " s, S=50k " + fmt("%.2f", t50) + " s, ratio " + fmt("%.2f", ratio) + " (" +
               std::to_string(targets.size()) + " metabolites, " + fmt("%.2f", 1e6 * t50 / (50000.0 * static_cast<double>(targets.size()))) +
               " us per pair)";
    return o;
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
        {"math kernels", criterion_1},        {"oracle reductions", criterion_2},   {"FDP control", criterion_3},
        {"CI coverage", criterion_4},         {"minimum imputation", criterion_5},  {"confounding test null", criterion_6},
        {"score-test calibration", criterion_7}, {"one-step sufficiency", criterion_8}, {"GWAS throughput", criterion_9},
    };
    std::set<int> pick;
    for (int i = 1; i < argc; ++i) pick.insert(std::stoi(argv[i]));
    int failed = 0;
    for (std::size_t c = 0; c < criteria.size(); ++c) {
        const int id = static_cast<int>(c) + 1;
        if (!pick.empty() && !pick.count(id)) continue;
        Outcome o;
        try {
            o = criteria[c].second();
        } catch (const std::exception& e) {
            o.pass = false;
            o.detail = std::string("error: ") + e.what();
        }
        std::printf("%s %d %s: %s\n", o.pass ? "PASS" : "FAIL", id, criteria[c].first.c_str(), o.detail.c_str());
        std::fflush(stdout);
        failed += !o.pass;
    }
    return failed == 0 ? 0 : 1;
}
