#include <catch_amalgamated.hpp>

#include <cmath>
#include <limits>
#include <random>

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include "msnimble/dataset.hpp"
#include "msnimble/simulate.hpp"
#include "support.hpp"

using namespace msnimble;

using testing::error_kind;

namespace {

double r2_of_x_on_c(const SimTruth& t) {
    Matrix a(t.x.size(), t.c.cols() + 1);
    a.col(0).setOnes();
    a.rightCols(t.c.cols()) = t.c;
    const Vector b = a.colPivHouseholderQr().solve(t.x);
    const double rss = (t.x - a * b).squaredNorm();
    const double tss = (t.x.array() - t.x.mean()).square().sum();
    return 1.0 - rss / tss;
}

double correlation(const Vector& a, const Vector& b) {
    const Vector ca = a.array() - a.mean();
    const Vector cb = b.array() - b.mean();
    return ca.dot(cb) / std::sqrt(ca.squaredNorm() * cb.squaredNorm());
}

ObservedMatrix with_mask(const Matrix& y, const BoolMatrix& mask) {
    Matrix v = y;
    for (Index g = 0; g < y.rows(); ++g) {
        for (Index i = 0; i < y.cols(); ++i) {
            if (!mask(g, i)) v(g, i) = std::numeric_limits<double>::quiet_NaN();
        }
    }
    return ObservedMatrix::from(v, mask);
}

MethodCalls calls(const std::string& name, Vector est, Vector se, Vector q) {
    return {name, std::move(est), std::move(se), std::move(q)};
}

}  // namespace

TEST_CASE("generate is deterministic and internally consistent") {
    const SimConfig cfg = SimConfig::desk(60, 41, 3, 9);
    const SimData a = generate(cfg);
    const SimData b = generate(cfg);
    CHECK(a.truth.y_full == b.truth.y_full);
    CHECK(a.truth.r == b.truth.r);
    CHECK(a.truth.ell == b.truth.ell);

    CHECK(a.truth.x.sum() == 20.0);
    CHECK(a.design.x.rows() == 41);
    CHECK(a.design.x.col(0) == a.truth.x);
    CHECK((a.design.x.col(1).array() == 1.0).all());
    CHECK(a.observed.mask == a.truth.r);
    for (Index g = 0; g < 60; ++g) {
        for (Index i = 0; i < 41; ++i) {
            if (a.truth.r(g, i)) CHECK(a.observed.y(g, i) == a.truth.y_full(g, i));
        }
    }
    CHECK(a.truth.ell.rows() == 60);
    CHECK(a.truth.c.rows() == 41);

    SimConfig other = cfg;
    other.seed = 10;
    CHECK(generate(other).truth.y_full != a.truth.y_full);
}

TEST_CASE("invalid simulation settings are rejected") {
    SimConfig c = SimConfig::desk(10, 10, 2, 1);
    c.loading_spec.pop_back();
    CHECK(error_kind([&] { generate(c); }) == "INVALID_ARGUMENT");
    c = SimConfig::desk(10, 10, 2, 1);
    c.frac_nonzero_beta = 1.5;
    CHECK(error_kind([&] { generate(c); }) == "INVALID_ARGUMENT");
    c = SimConfig::desk(10, 10, 2, 1);
    c.delta_sd = 0.0;
    CHECK(error_kind([&] { generate(c); }) == "INVALID_ARGUMENT");
    c = SimConfig::desk(10, 1, 2, 1);
    CHECK(error_kind([&] { generate(c); }) == "INVALID_ARGUMENT");
}

TEST_CASE("generator moments over 200 seeds") {
    double delta_sum = 0.0, mu_sum = 0.0, sigma2_sum = 0.0, log_alpha_sum = 0.0, nonzero = 0.0;
    Index count = 0;
    const SimConfig base = SimConfig::desk(100, 20, 5, 1);
    for (std::uint64_t s = 1; s <= 200; ++s) {
        const SimData d = generate(SimConfig::desk(100, 20, 5, s));
        delta_sum += d.truth.delta.sum();
        mu_sum += d.truth.mu.sum();
        sigma2_sum += d.truth.sigma.squaredNorm();
        log_alpha_sum += d.truth.alpha.array().log().sum();
        nonzero += static_cast<double>((d.truth.beta.array() != 0.0).count());
        count += 100;
    }
    const double n = static_cast<double>(count);
    CHECK(std::abs(delta_sum / n - 16.0) <= 0.3);
    CHECK(std::abs(mu_sum / n - 18.0) <= 1.0);
    CHECK(std::abs(sigma2_sum / n - 1.0) <= 0.02);
    CHECK(std::abs(log_alpha_sum / n - base.mu_alpha) <= 0.02);
    CHECK(std::abs(nonzero / n - 0.2) <= 0.01);
}

TEST_CASE("loading eigenvalues span the configured range") {
    const auto spec = geometric_loadings(10);
    REQUIRE(spec.size() == 10);
    CHECK((1.0 - spec.front().pi) * spec.front().tau * spec.front().tau == Catch::Approx(0.8));
    CHECK((1.0 - spec.back().pi) * spec.back().tau * spec.back().tau == Catch::Approx(0.05));

    const SimData d = generate(SimConfig::desk(4000, 10, 5, 3));
    const auto want = geometric_loadings(5);
    for (Index k = 0; k < 5; ++k) {
        const double lambda = d.truth.ell.col(k).squaredNorm() / 4000.0;
        const double expect = (1.0 - want[k].pi) * want[k].tau * want[k].tau;
        CAPTURE(k, lambda, expect);
        CHECK(std::abs(lambda / expect - 1.0) <= 0.1);
        const double zeros = static_cast<double>((d.truth.ell.col(k).array() == 0.0).count()) / 4000.0;
        CHECK(std::abs(zeros - 0.2) <= 0.03);
    }
}

TEST_CASE("mechanism scale gives a unit-variance selection variable") {
    for (const auto& cdf : {SelectionCdf::logistic(), SelectionCdf::normal(), SelectionCdf::student_t(4.0), SelectionCdf::student_t(7.5)}) {
        const double s = std::exp(unit_variance_log_alpha(cdf));
        auto f = [&](double x) { return x * x * s * psi(cdf, s * x, 1); };
        const double inf = std::numeric_limits<double>::infinity();
        const double var = boost::math::quadrature::gauss_kronrod<double, 61>::integrate(f, -inf, inf, 15, 1e-12);
        CAPTURE(cdf.name());
        CHECK(var == Catch::Approx(1.0).epsilon(1e-8));
    }
    CHECK(error_kind([] { unit_variance_log_alpha(SelectionCdf::student_t(2.0)); }) == "INVALID_ARGUMENT");
}

TEST_CASE("full-scale missing-class count matches the reported average") {
    double total = 0.0;
    for (std::uint64_t s = 1; s <= 10; ++s) {
        const SimData d = generate(SimConfig::desk(1200, 600, 10, s));
        total += static_cast<double>(partition_metabolites(d.observed).missing.size());
    }
    const double avg = total / 10.0;
    CAPTURE(avg);
    CHECK(avg >= 300.0 * 0.85);
    CHECK(avg <= 300.0 * 1.15);
}

TEST_CASE("latent factors are independent of treatment without confounding") {
    SimConfig c = SimConfig::desk(10, 600, 5, 4);
    c.confounding_a = 0.0;
    const SimData d = generate(c);
    for (Index k = 0; k < 5; ++k) {
        CAPTURE(k);
        CHECK(std::abs(correlation(d.truth.x, d.truth.c.col(k))) <= 3.0 / std::sqrt(600.0));
    }
}

TEST_CASE("default confounding explains about 60% of treatment variance") {
    double sum = 0.0;
    for (std::uint64_t s = 1; s <= 10; ++s) sum += r2_of_x_on_c(generate(SimConfig::desk(10, 600, 5, s)).truth);
    CHECK(std::abs(sum / 10.0 - 0.60) <= 0.05);
}

TEST_CASE("simulated genotypes") {
    const Matrix g = simulate_genotypes(200, 500, 5, 0.1, 0.3);
    CHECK(g == simulate_genotypes(200, 500, 5, 0.1, 0.3));
    CHECK(((g.array() == 0.0) || (g.array() == 1.0) || (g.array() == 2.0)).all());
    for (Index j = 0; j < g.rows(); ++j) {
        const double maf = g.row(j).mean() / 2.0;
        CHECK(maf > 0.1 - 0.07);
        CHECK(maf < 0.3 + 0.07);
    }
}

TEST_CASE("impute_minimum") {
    Matrix y(2, 4);
    y << 5, 3, 7, 4, 1, 2, 3, 4;
    BoolMatrix all = BoolMatrix::Constant(2, 4, true);
    CHECK(impute_minimum(with_mask(y, all)) == y);

    BoolMatrix mask = all;
    mask(0, 0) = false;
    mask(0, 2) = false;
    const Matrix out = impute_minimum(with_mask(y, mask));
    CHECK(out(0, 0) == 3.0);
    CHECK(out(0, 2) == 3.0);
    CHECK(out(0, 3) == 4.0);
    CHECK(out.row(1) == y.row(1));
    CHECK(impute_minimum(with_mask(y, mask), 0.5)(0, 0) == 1.5);

    mask.row(1).setConstant(false);
    CHECK(error_kind([&] { impute_minimum(with_mask(y, mask)); }) == "INSUFFICIENT_DATA");
}

TEST_CASE("impute_svd recovers an exactly low-rank matrix") {
    std::mt19937_64 rng(21);
    std::normal_distribution<double> nd;
    const Index p = 40, n = 30, k = 3;
    Matrix a(p, k), b(k, n);
    for (Index i = 0; i < a.size(); ++i) a.data()[i] = nd(rng);
    for (Index i = 0; i < b.size(); ++i) b.data()[i] = nd(rng);
    const Matrix y = a * b;
    BoolMatrix mask = BoolMatrix::Constant(p, n, true);
    std::bernoulli_distribution hide(0.15);
    for (Index g = 0; g < p; ++g) {
        for (Index i = 0; i < n; ++i) mask(g, i) = !hide(rng);
    }
    const SvdImputation res = impute_svd(with_mask(y, mask), 3, 5000, 1e-14);
    CHECK(res.converged);
    CHECK((res.y - y).cwiseAbs().maxCoeff() <= 1e-6);
    for (std::size_t t = 1; t < res.observed_fit.size(); ++t) {
        CHECK(res.observed_fit[t] <= res.observed_fit[t - 1] * (1.0 + 1e-12) + 1e-20);
    }
}

TEST_CASE("impute_svd with k=0 fills row means") {
    Matrix y(2, 3);
    y << 1, 2, 6, 4, 5, 6;
    BoolMatrix mask = BoolMatrix::Constant(2, 3, true);
    mask(0, 1) = false;
    const SvdImputation res = impute_svd(with_mask(y, mask), 0);
    CHECK(res.y(0, 1) == 3.5);
    CHECK(res.y(1, 1) == 5.0);
    CHECK(res.converged);
}

TEST_CASE("impute_svd objective is monotone on noisy data and flags non-convergence") {
    const SimData d = generate(SimConfig::desk(80, 60, 3, 2));
    std::vector<Index> keep;
    for (Index g = 0; g < d.observed.p(); ++g) {
        if (d.observed.observed_count(g) > 0) keep.push_back(g);
    }
    Matrix y(static_cast<Index>(keep.size()), 60);
    BoolMatrix m(static_cast<Index>(keep.size()), 60);
    for (std::size_t j = 0; j < keep.size(); ++j) {
        y.row(static_cast<Index>(j)) = d.observed.y.row(keep[j]);
        m.row(static_cast<Index>(j)) = d.observed.mask.row(keep[j]);
    }
    const SvdImputation res = impute_svd(ObservedMatrix::from(y, m), 3, 300, 1e-10);
    REQUIRE(res.observed_fit.size() >= 2);
    for (std::size_t t = 1; t < res.observed_fit.size(); ++t) {
        CHECK(res.observed_fit[t] <= res.observed_fit[t - 1] * (1.0 + 1e-10));
    }
    const SvdImputation short_run = impute_svd(ObservedMatrix::from(y, m), 3, 1, 1e-14);
    CHECK_FALSE(short_run.converged);
    CHECK(short_run.iterations == 1);
}

TEST_CASE("evaluate conventions") {
    Vector beta(4);
    beta << 0.0, 0.5, 0.0, -1.0;
    const std::vector<Index> rows{0, 1, 2, 3};
    Vector se = Vector::Constant(4, 0.1);

    Vector q_oracle(4);
    q_oracle << 1.0, 0.0, 1.0, 0.0;
    Vector none = Vector::Constant(4, 1.0);
    Vector mixed(4);
    mixed << 0.01, 0.5, 0.1, 0.02;
    Vector est_far = beta.array() + 1.0;
    est_far(3) = std::nan("");

    const auto out = evaluate(beta, {calls("oracle", beta, se, q_oracle), calls("none", beta, se, none),
                                     calls("mixed", est_far, se, mixed)},
                              rows, {0.05, 0.2});
    REQUIRE(out.size() == 6);
    CHECK(out[0].fdp == 0.0);
    CHECK(out[0].power == 1.0);
    CHECK(out[0].coverage == 1.0);
    CHECK(out[0].mean_width == Catch::Approx(2.0 * 1.959963984540054 * 0.1));
    CHECK(out[0].n_evaluated == 4);

    CHECK(out[2].fdp == 0.0);
    CHECK(out[2].power == 0.0);
    CHECK(out[2].n_rejected == 0);

    // q 0.05 rejects rows 0 and 3; q 0.2 adds row 2
    CHECK(out[4].n_rejected == 2);
    CHECK(out[4].fdp == 0.5);
    CHECK(out[4].power == 0.5);
    CHECK(out[5].n_rejected == 3);
    CHECK(out[5].fdp == Catch::Approx(2.0 / 3.0));
    CHECK(out[5].power == 0.5);
    CHECK(out[5].coverage == 0.0);
    CHECK(out[5].q_threshold == 0.2);

    const auto subset = evaluate(beta, {calls("oracle", beta, se, q_oracle)}, {0, 2}, {0.1});
    CHECK(subset[0].power == 0.0);
    CHECK(subset[0].n_evaluated == 2);
}

TEST_CASE("rms_z of paired replicate estimates") {
    Vector b1(3), b2(3), s1(3), s2(3);
    b1 << 1.0, 0.0, 2.0;
    b2 << 0.0, 0.0, 2.0;
    s1 << 0.6, 1.0, std::nan("");
    s2 << 0.8, 1.0, 1.0;
    // z = 1 and 0, third pair skipped
    CHECK(rms_z(b1, s1, b2, s2) == Catch::Approx(std::sqrt(0.5)));
    CHECK(std::isnan(rms_z(b1.head(0), s1.head(0), b2.head(0), s2.head(0))));
}
