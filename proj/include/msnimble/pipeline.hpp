#ifndef MSNIMBLE_PIPELINE_HPP
#define MSNIMBLE_PIPELINE_HPP

// End-to-end assembly: mechanisms -> factors -> per-metabolite inference, plus
// the imputation baselines used in simulations.

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "common.hpp"
#include "dataset.hpp"
#include "diffabund.hpp"
#include "factor.hpp"
#include "mechanism.hpp"
#include "mtgwas.hpp"
#include "selection_math.hpp"
#include "simulate.hpp"

namespace msnimble {

struct RunConfig {
    SelectionCdf cdf = SelectionCdf::student_t(4.0);
    int quad_order = 16;
    double max_weight = 50.0;
    FisherConfig fisher;
    FactorConfig factor;
    MechanismConfig mechanism;
    int num_candidates = 10;
    int k = -1;  // -1: parallel analysis
    int n_perm = 19;
    std::uint64_t seed = 1;
    int threads = 1;

    nlohmann::json to_json() const {
        return {{"cdf", cdf.name()},
                {"quad_order", quad_order},
                {"max_weight", max_weight},
                {"fisher_max_iter", fisher.max_iter},
                {"fisher_tol", fisher.tol},
                {"q_thresh", factor.q_thresh},
                {"refine_iters", factor.refine_iters},
                {"factor_max_iter", factor.max_iter},
                {"factor_tol", factor.tol},
                {"num_candidates", num_candidates},
                {"instruments_kept", mechanism.instruments_kept},
                {"k", k},
                {"n_perm", n_perm},
                {"seed", seed},
                {"threads", threads}};
    }

    /// Overrides fields present in `j`; unknown keys are an error.
    void update(const nlohmann::json& j) {
        if (!j.is_object()) throw Error("CONFIG_ERROR", "config must be a JSON object");
        try {
            for (const auto& [key, v] : j.items()) {
                if (key == "cdf") cdf = SelectionCdf::parse(v.get<std::string>());
                else if (key == "quad_order") quad_order = v.get<int>();
                else if (key == "max_weight") max_weight = v.get<double>();
                else if (key == "fisher_max_iter") fisher.max_iter = v.get<int>();
                else if (key == "fisher_tol") fisher.tol = v.get<double>();
                else if (key == "q_thresh") factor.q_thresh = v.get<double>();
                else if (key == "refine_iters") factor.refine_iters = v.get<int>();
                else if (key == "factor_max_iter") factor.max_iter = v.get<int>();
                else if (key == "factor_tol") factor.tol = v.get<double>();
                else if (key == "num_candidates") num_candidates = v.get<int>();
                else if (key == "instruments_kept") mechanism.instruments_kept = v.get<int>();
                else if (key == "k") k = v.get<int>();
                else if (key == "n_perm") n_perm = v.get<int>();
                else if (key == "seed") seed = v.get<std::uint64_t>();
                else if (key == "threads") threads = v.get<int>();
                else throw Error("CONFIG_ERROR", "unknown config key '" + key + "'");
            }
        } catch (const nlohmann::json::exception& e) {
            throw Error("CONFIG_ERROR", e.what());
        }
        if (quad_order < 8) throw Error("CONFIG_ERROR", "quad_order must be at least 8");
        if (threads < 1) throw Error("CONFIG_ERROR", "threads must be at least 1");
    }
};

inline Matrix z_hat_of(const DesignMatrix& x, const FactorEstimate& fe) {
    Matrix z(x.n(), x.d() + fe.c_hat.cols());
    z << x.x, fe.c_hat;
    return z;
}

/// Factor fit with K from the config or from parallel analysis (k = 0 allowed).
inline FactorEstimate estimate_factors(const ObservedMatrix& m, const MetabolitePartition& part, const DesignMatrix& x,
                                       const WeightMatrix& wm, const RunConfig& cfg) {
    int k = cfg.k;
    if (k < 0) k = select_k(m, part, x, cfg.n_perm, cfg.seed).k;
    FactorEstimate fe;
    if (k == 0) {
        fe.k = 0;
        fe.scale = std::sqrt(static_cast<double>(m.n()));
        fe.c_perp = Matrix::Zero(m.n(), 0);
        fe.loadings = Matrix::Zero(m.p(), 0);
        fe.coefs = Matrix::Zero(m.p(), x.d());
        fe.rows = part.analyzed();
        fe.converged = true;
    } else {
        fe = fit_factors(m, x, wm, k, init_subspace(m, part, x, k), cfg.factor);
    }
    estimate_omega(fe, m, x, wm, cfg.factor);
    return fe;
}

struct DaRecord {
    Index row = 0;
    std::string id;
    MetaboliteClass cls = MetaboliteClass::Discarded;
    bool ok = false;
    std::string error;
    CoefInference fit;
    Vector q;  // q-values of the interest coefficients
};

struct DaResult {
    std::vector<DaRecord> records;  // one per metabolite, in input order
    std::vector<ConfoundingTest> confounding;
    Matrix z_hat;
};

inline Vector observed_or_zero(const ObservedMatrix& m, Index g) {
    return m.y.row(g).transpose().unaryExpr([](double v) { return std::isfinite(v) ? v : 0.0; });
}

/// Per-metabolite fits: Fisher scoring for the missing class, Gaussian OLS for
/// the complete class. BH q-values are formed per interest column.
inline DaResult run_da(const ObservedMatrix& m, const MetabolitePartition& part, const DesignMatrix& x, const MechanismEstimate& mech,
                       const FactorEstimate& fe, const WeightMatrix& wm, const RunConfig& cfg) {
    DaResult res;
    res.z_hat = z_hat_of(x, fe);
    const QuadratureRule rule = QuadratureRule::make(cfg.quad_order);
    res.records.resize(static_cast<std::size_t>(m.p()));
    parallel_for(static_cast<std::size_t>(m.p()), [&](std::size_t gi) {
        const Index g = static_cast<Index>(gi);
        DaRecord& rec = res.records[gi];
        rec.row = g;
        rec.id = m.metabolite_ids[gi];
        rec.cls = part.class_of[gi];
        if (rec.cls == MetaboliteClass::Discarded) return;
        const Vector y = observed_or_zero(m, g);
        const MaskVector r = m.mask.row(g).transpose();
        try {
            if (rec.cls == MetaboliteClass::Complete) {
                rec.fit = gaussian_fit(y, r, res.z_hat, x.n_interest);
            } else {
                const MechanismRecord* mr = mech.find(rec.id);
                if (mr == nullptr) throw Error("MISSING_INPUT", "no mechanism estimate for '" + rec.id + "'");
                rec.fit = fisher_fit(y, r, res.z_hat, wm.w.row(g).transpose(), MechParams{mr->alpha, mr->delta}, mech.cdf, rule,
                                     x.n_interest, cfg.fisher);
            }
            rec.ok = true;
        } catch (const Error& e) {
            rec.error = e.kind();
        }
    });
    for (Index j = 0; j < x.n_interest; ++j) {
        std::vector<double> p;
        std::vector<std::size_t> idx;
        for (std::size_t gi = 0; gi < res.records.size(); ++gi) {
            if (res.records[gi].ok) {
                p.push_back(res.records[gi].fit.wald_p(j));
                idx.push_back(gi);
            }
        }
        const std::vector<double> q = qvalues(p);
        for (std::size_t t = 0; t < idx.size(); ++t) {
            auto& rec = res.records[idx[t]];
            if (rec.q.size() == 0) rec.q = Vector::Constant(x.n_interest, std::nan(""));
            rec.q(j) = q[t];
        }
        res.confounding.push_back(test_confounding(fe.omega_hat, x, j));
    }
    return res;
}

/// One GWAS target per metabolite whose DA fit succeeded, in input order.
inline std::vector<GwasTarget> gwas_targets(const ObservedMatrix& m, const MechanismEstimate& mech, const DaResult& da) {
    std::vector<GwasTarget> out;
    for (const DaRecord& rec : da.records) {
        if (!rec.ok) continue;
        GwasTarget t;
        t.id = rec.id;
        t.y = observed_or_zero(m, rec.row);
        t.r = m.mask.row(rec.row).transpose();
        t.gaussian = rec.cls == MetaboliteClass::Complete;
        if (!t.gaussian) {
            const MechanismRecord* mr = mech.find(rec.id);
            t.mech = MechParams{mr->alpha, mr->delta};
        }
        t.fit = rec.fit;
        out.push_back(std::move(t));
    }
    return out;
}

struct PipelineResult {
    MetabolitePartition part;
    InstrumentSet instruments;
    MechanismEstimate mech;
    WeightMatrix weights;
    FactorEstimate factors;
    DaResult da;
};

inline MechanismEstimate estimate_mechanisms(const ObservedMatrix& m, const MetabolitePartition& part, const RunConfig& cfg,
                                             InstrumentSet* inst_out = nullptr) {
    const InstrumentSet inst = build_instruments(m, part, cfg.num_candidates);
    if (inst_out != nullptr) *inst_out = inst;
    return estimate_mechanism(m, part, inst, cfg.cdf, cfg.mechanism);
}

inline PipelineResult run_pipeline(const ObservedMatrix& m, const DesignMatrix& x, const RunConfig& cfg) {
    PipelineResult out;
    out.part = partition_metabolites(m);
    out.mech = estimate_mechanisms(m, out.part, cfg, &out.instruments);
    out.weights = compute_weights(m, out.part, out.mech, cfg.max_weight);
    out.factors = estimate_factors(m, out.part, x, out.weights, cfg);
    out.da = run_da(m, out.part, x, out.mech, out.factors, out.weights, cfg);
    return out;
}

// ---------------------------------------------------------------------------
// Baselines.

/// OLS of each row of a complete matrix on z; calls for interest column j.
inline MethodCalls ols_calls(const std::string& name, const Matrix& y, const Matrix& z, Index j = 0) {
    const Index p = y.rows(), n = y.cols(), q = z.cols();
    MethodCalls mc;
    mc.method = name;
    mc.estimate = Vector::Constant(p, std::nan(""));
    mc.se = mc.estimate;
    mc.qvalue = mc.estimate;
    Eigen::ColPivHouseholderQR<Matrix> qr(z);
    if (qr.rank() < q || n <= q) throw Error("RANK_DEFICIENT", "baseline design is rank deficient");
    const Matrix zinv = (z.transpose() * z).ldlt().solve(Matrix::Identity(q, q));
    std::vector<double> pv(static_cast<std::size_t>(p));
    for (Index g = 0; g < p; ++g) {
        const Vector yg = y.row(g).transpose();
        const Vector th = qr.solve(yg);
        const double s2 = (yg - z * th).squaredNorm() / static_cast<double>(n - q);
        mc.estimate(g) = th(j);
        mc.se(g) = std::sqrt(s2 * zinv(j, j));
        pv[static_cast<std::size_t>(g)] = normal_two_sided(th(j) / mc.se(g));
    }
    const auto qv = qvalues(pv);
    for (Index g = 0; g < p; ++g) mc.qvalue(g) = qv[static_cast<std::size_t>(g)];
    return mc;
}

/// Calls from the full model, NaN for discarded or failed metabolites.
inline MethodCalls msnimble_calls(const DaResult& da, Index j = 0, const std::string& name = "msnimble") {
    const Index p = static_cast<Index>(da.records.size());
    MethodCalls mc;
    mc.method = name;
    mc.estimate = Vector::Constant(p, std::nan(""));
    mc.se = mc.estimate;
    mc.qvalue = mc.estimate;
    for (Index g = 0; g < p; ++g) {
        const auto& rec = da.records[static_cast<std::size_t>(g)];
        if (!rec.ok) continue;
        mc.estimate(g) = rec.fit.theta(j);
        mc.se(g) = rec.fit.se(j);
        mc.qvalue(g) = rec.q(j);
    }
    return mc;
}

/// Mechanism store holding the generating (alpha, delta) of every missing-class metabolite.
inline MechanismEstimate truth_mechanism(const SimData& sim, const MetabolitePartition& part, SelectionCdf cdf) {
    MechanismEstimate mech;
    mech.cdf = cdf;
    for (Index g : part.missing) {
        MechanismRecord r;
        r.id = sim.observed.metabolite_ids[static_cast<std::size_t>(g)];
        r.alpha = sim.truth.alpha(g);
        r.delta = sim.truth.delta(g);
        mech.records.push_back(r);
    }
    return mech;
}

/// Regressors for imputation baselines: the design alone ("naive") or the
/// design plus the true factors ("oracle").
inline Matrix baseline_design(const SimData& sim, bool oracle_c) {
    if (!oracle_c) return sim.design.x;
    Matrix z(sim.design.n(), sim.design.d() + sim.truth.c.cols());
    z << sim.design.x, sim.truth.c;
    return z;
}

struct ReplicateResult {
    std::vector<MethodCalls> calls;
    std::vector<Index> missing_rows;  // evaluation rows: missing-class metabolites
    SimData sim;
    PipelineResult fit;
};

/// One simulated dataset analyzed by each requested method. Known methods:
/// msnimble, min-impute, svd-impute, min-impute-oracle, svd-impute-oracle.
inline ReplicateResult run_replicate(const SimConfig& scfg, const std::vector<std::string>& methods, const RunConfig& cfg) {
    ReplicateResult rr;
    rr.sim = generate(scfg);
    const auto& m = rr.sim.observed;
    const MetabolitePartition part = partition_metabolites(m);
    rr.missing_rows = part.missing;
    // imputation baselines see the analyzed rows only
    const std::vector<Index> rows = part.analyzed();
    const ObservedMatrix sub = m.rows(rows);
    const auto widen = [&](MethodCalls mc) {
        MethodCalls out;
        out.method = mc.method;
        out.estimate = Vector::Constant(m.p(), std::nan(""));
        out.se = out.estimate;
        out.qvalue = out.estimate;
        for (std::size_t t = 0; t < rows.size(); ++t) {
            const Index k = static_cast<Index>(t);
            out.estimate(rows[t]) = mc.estimate(k);
            out.se(rows[t]) = mc.se(k);
            out.qvalue(rows[t]) = mc.qvalue(k);
        }
        return out;
    };
    for (const auto& name : methods) {
        if (name == "msnimble") {
            rr.fit = run_pipeline(m, rr.sim.design, cfg);
            rr.calls.push_back(msnimble_calls(rr.fit.da));
        } else if (name == "min-impute" || name == "min-impute-oracle") {
            rr.calls.push_back(widen(ols_calls(name, impute_minimum(sub), baseline_design(rr.sim, name != "min-impute"))));
        } else if (name == "svd-impute" || name == "svd-impute-oracle") {
            const int k = std::max(1, scfg.k);
            rr.calls.push_back(widen(ols_calls(name, impute_svd(sub, k).y, baseline_design(rr.sim, name != "svd-impute"))));
        } else {
            throw Error("INVALID_ARGUMENT", "unknown method '" + name + "'");
        }
    }
    return rr;
}

}  // namespace msnimble

#endif  // MSNIMBLE_PIPELINE_HPP
