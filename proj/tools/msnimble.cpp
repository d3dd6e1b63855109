// msnimble: command-line driver for mechanism, factor, differential-abundance
// and GWAS estimation, plus simulation and imputation baselines.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "msnimble/pipeline.hpp"

using namespace msnimble;
using nlohmann::json;

namespace {

constexpr const char* kVersion = "0.1.0";

std::uint64_t fnv1a_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("IO_ERROR", "cannot open '" + path + "'");
    std::uint64_t h = 14695981039346656037ull;
    char buf[1 << 16];
    while (in) {
        in.read(buf, sizeof(buf));
        for (std::streamsize i = 0; i < in.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 1099511628211ull;
        }
    }
    return h;
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::string num(double v) {
    if (std::isnan(v)) return "NA";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    return detail::format_double(v);
}

json read_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("IO_ERROR", "cannot open '" + path + "'");
    try {
        json j;
        in >> j;
        return j;
    } catch (const json::exception& e) {
        throw Error("CONFIG_ERROR", path + ": " + e.what());
    }
}

std::vector<std::string> split_commas(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

/// Options shared by the analysis subcommands. Unset optionals leave the
/// config-file (or default) value in place.
struct Options {
    std::string input, design, mech, factors, geno, out, config;
    std::vector<std::string> interest;
    bool no_intercept = false;
    std::optional<int> threads, k, quad_order, n_perm, num_candidates, fisher_max_iter, refine_iters;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> cdf;
    std::optional<double> max_weight, q_thresh;
    double min_mac = 3.0;
};

void add_run_flags(CLI::App* sub, Options& o) {
    sub->add_option("--config", o.config, "JSON config file; flags override it");
    sub->add_option("--threads", o.threads, "Worker threads");
    sub->add_option("--seed", o.seed, "Random seed");
    sub->add_option("--cdf", o.cdf, "Selection CDF: t4, t<df>, logistic or normal");
    sub->add_option("--quad-order", o.quad_order, "Quadrature points per panel");
    sub->add_option("--max-weight", o.max_weight, "Clamp for inverse-probability weights");
    sub->add_option("--k", o.k, "Number of latent factors (default: parallel analysis)");
    sub->add_option("--n-perm", o.n_perm, "Permutations for parallel analysis");
    sub->add_option("--num-candidates", o.num_candidates, "Candidate instruments per metabolite");
    sub->add_option("--fisher-max-iter", o.fisher_max_iter, "Fisher scoring iterations");
    sub->add_option("--refine-iters", o.refine_iters, "Omega refinement passes");
    sub->add_option("--q-thresh", o.q_thresh, "q-value cut for Omega refinement");
}

void add_data_flags(CLI::App* sub, Options& o, bool design) {
    sub->add_option("--input", o.input, "Metabolite x sample matrix (TSV or CSV)");
    if (design) {
        sub->add_option("--design", o.design, "Sample x covariate table");
        sub->add_option("--interest", o.interest, "Covariates of interest (default: first design column)")->delimiter(',');
        sub->add_flag("--no-intercept", o.no_intercept, "Do not add an intercept column");
    }
    sub->add_option("--out", o.out, "Output path");
}

RunConfig build_config(const Options& o) {
    RunConfig cfg;
    if (!o.config.empty()) cfg.update(read_json(o.config));
    json j = json::object();
    if (o.threads) j["threads"] = *o.threads;
    if (o.seed) j["seed"] = *o.seed;
    if (o.cdf) j["cdf"] = *o.cdf;
    if (o.quad_order) j["quad_order"] = *o.quad_order;
    if (o.max_weight) j["max_weight"] = *o.max_weight;
    if (o.k) j["k"] = *o.k;
    if (o.n_perm) j["n_perm"] = *o.n_perm;
    if (o.num_candidates) j["num_candidates"] = *o.num_candidates;
    if (o.fisher_max_iter) j["fisher_max_iter"] = *o.fisher_max_iter;
    if (o.refine_iters) j["refine_iters"] = *o.refine_iters;
    if (o.q_thresh) j["q_thresh"] = *o.q_thresh;
    cfg.update(j);
    set_threads(static_cast<unsigned>(cfg.threads));
    return cfg;
}

void require(const std::string& value, const std::string& flag) {
    if (value.empty()) throw Error("MISSING_INPUT", flag + " is required");
}

std::vector<std::string> first_design_column(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("IO_ERROR", "cannot open '" + path + "'");
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        const char sep = format_for_path(path) == TableFormat::Csv ? ',' : '\t';
        const auto cells = detail::split_line(line, sep);
        if (cells.size() < 2) break;
        return {detail::trim(cells[1])};
    }
    throw Error("PARSE_ERROR", path + ": design has no covariate columns");
}

DesignMatrix read_design(const Options& o, const ObservedMatrix& m) {
    require(o.design, "--design");
    const auto interest = o.interest.empty() ? first_design_column(o.design) : o.interest;
    return load_design(o.design, m.sample_ids, interest, !o.no_intercept);
}

/// Run manifest written beside every output.
class Manifest {
public:
    Manifest(std::string command, const RunConfig* cfg) : command_(std::move(command)) {
        j_["tool"] = "msnimble";
        j_["version"] = kVersion;
        j_["command"] = command_;
        j_["inputs"] = json::array();
        j_["outputs"] = json::array();
        if (cfg != nullptr) j_["config"] = cfg->to_json();
    }
    void input(const std::string& role, const std::string& path) {
        if (path.empty()) return;
        j_["inputs"].push_back({{"role", role}, {"path", path}, {"fnv1a64", hex64(fnv1a_file(path))}});
    }
    void output(const std::string& path) {
        j_["outputs"].push_back({{"path", path}, {"fnv1a64", hex64(fnv1a_file(path))}});
    }
    void set(const std::string& key, json v) { j_[key] = std::move(v); }
    void write(const std::string& out_path) const {
        const std::string path = out_path + ".manifest.json";
        std::ofstream f(path);
        if (!f) throw Error("IO_ERROR", "cannot write '" + path + "'");
        f << j_.dump(2) << '\n';
    }

private:
    std::string command_;
    json j_;
};

std::ofstream open_out(const std::string& path) {
    std::ofstream f(path);
    if (!f) throw Error("IO_ERROR", "cannot write '" + path + "'");
    return f;
}

void table_header(std::ostream& out, const std::string& command, const RunConfig* cfg) {
    out << "# msnimble " << kVersion << ' ' << command << '\n';
    if (cfg != nullptr) out << "# config " << cfg->to_json().dump() << '\n';
}

struct Loaded {
    ObservedMatrix m;
    DesignMatrix x;
    MetabolitePartition part;
    MechanismEstimate mech;
    WeightMatrix wm;
    FactorEstimate fe;
};

/// Matrix, design, mechanisms and weights; factors from the store when given,
/// else estimated.
Loaded load_analysis(const Options& o, const RunConfig& cfg, Manifest& man, bool need_factors) {
    require(o.input, "--input");
    require(o.mech, "--mech");
    Loaded d;
    d.m = load_matrix(o.input);
    d.x = read_design(o, d.m);
    d.part = partition_metabolites(d.m);
    d.mech = load_mechanisms(o.mech, cfg.cdf);
    d.wm = compute_weights(d.m, d.part, d.mech, cfg.max_weight);
    man.input("input", o.input);
    man.input("design", o.design);
    man.input("mech", o.mech);
    if (need_factors) {
        if (!o.factors.empty()) {
            d.fe = load_factors(o.factors, d.m);
            man.input("factors", o.factors);
        } else {
            d.fe = estimate_factors(d.m, d.part, d.x, d.wm, cfg);
        }
    }
    return d;
}

// ---------------------------------------------------------------------------

void cmd_estimate_mechanisms(const Options& o) {
    require(o.input, "--input");
    require(o.out, "--out");
    const RunConfig cfg = build_config(o);
    Manifest man("estimate-mechanisms", &cfg);
    const ObservedMatrix m = load_matrix(o.input);
    man.input("input", o.input);
    man.input("design", o.design);
    const MetabolitePartition part = partition_metabolites(m);
    const MechanismEstimate est = estimate_mechanisms(m, part, cfg);
    save_mechanisms(est, o.out);
    man.output(o.out);
    man.set("counts", {{"complete", part.complete.size()}, {"missing", part.missing.size()}, {"discarded", part.discarded.size()}});
    man.write(o.out);
}

void cmd_factors(const Options& o) {
    require(o.out, "--out");
    const RunConfig cfg = build_config(o);
    Manifest man("factors", &cfg);
    const Loaded d = load_analysis(o, cfg, man, false);
    const FactorEstimate fe = estimate_factors(d.m, d.part, d.x, d.wm, cfg);
    save_factors(fe, d.m, o.out);
    man.output(o.out);
    man.set("k", fe.k);
    man.set("clamped_weights", d.wm.n_clamped);
    man.write(o.out);
}

void write_da(std::ostream& out, const Loaded& d, const DaResult& da, const RunConfig& cfg) {
    table_header(out, "da", &cfg);
    out << "# k " << d.fe.k << '\n';
    for (Index j = 0; j < d.x.n_interest; ++j) {
        const auto& ct = da.confounding[static_cast<std::size_t>(j)];
        out << "# confounding " << d.x.column_names[static_cast<std::size_t>(j)] << " stat " << num(ct.stat) << " p "
            << num(ct.p_value) << '\n';
    }
    out << "metabolite\tclass";
    for (Index j = 0; j < d.x.n_interest; ++j) {
        const auto& name = d.x.column_names[static_cast<std::size_t>(j)];
        out << "\tbeta_" << name << "\tse_" << name << "\tp_" << name << "\tq_" << name;
    }
    out << "\tn_iter\tconverged\tstatus\n";
    for (const DaRecord& rec : da.records) {
        out << rec.id << '\t' << to_string(rec.cls);
        for (Index j = 0; j < d.x.n_interest; ++j) {
            if (rec.ok) {
                out << '\t' << num(rec.fit.theta(j)) << '\t' << num(rec.fit.se(j)) << '\t' << num(rec.fit.wald_p(j)) << '\t'
                    << num(rec.q(j));
            } else {
                out << "\tNA\tNA\tNA\tNA";
            }
        }
        if (rec.ok) {
            out << '\t' << rec.fit.n_iter << '\t' << (rec.fit.converged ? 1 : 0) << '\t' << "ok";
        } else {
            out << "\tNA\tNA\t" << (rec.cls == MetaboliteClass::Discarded ? "discarded" : rec.error);
        }
        out << '\n';
    }
}

void cmd_da(const Options& o) {
    require(o.mech, "--mech");
    require(o.out, "--out");
    const RunConfig cfg = build_config(o);
    Manifest man("da", &cfg);
    const Loaded d = load_analysis(o, cfg, man, true);
    const DaResult da = run_da(d.m, d.part, d.x, d.mech, d.fe, d.wm, cfg);
    {
        auto out = open_out(o.out);
        write_da(out, d, da, cfg);
    }
    man.output(o.out);
    man.write(o.out);
}

void cmd_gwas(const Options& o) {
    require(o.mech, "--mech");
    require(o.geno, "--geno");
    require(o.out, "--out");
    const RunConfig cfg = build_config(o);
    Manifest man("gwas", &cfg);
    const Loaded d = load_analysis(o, cfg, man, true);
    const GenotypeMatrix geno = load_genotypes(o.geno, d.m.sample_ids, o.min_mac);
    man.input("geno", o.geno);
    const DaResult da = run_da(d.m, d.part, d.x, d.mech, d.fe, d.wm, cfg);
    const std::vector<GwasTarget> targets = gwas_targets(d.m, d.mech, da);
    {
        auto out = open_out(o.out);
        table_header(out, "gwas", &cfg);
        out << "# k " << d.fe.k << '\n';
        out << "# snps " << geno.s() << " skipped_low_mac " << geno.skipped.size() << '\n';
        out << "metabolite\tsnp\teta_e\tp_e\teta_c\tp_c\teta_ce\tp_ce\tflags\n";
        run_gwas(targets, da.z_hat, d.fe.c_hat, d.x, geno, cfg.cdf, QuadratureRule::make(cfg.quad_order), [&](const GwasRow& r) {
            out << targets[static_cast<std::size_t>(r.metabolite)].id << '\t' << geno.snp_ids[static_cast<std::size_t>(r.snp)] << '\t'
                << num(r.eta_e) << '\t' << num(r.p_e) << '\t' << num(r.eta_c) << '\t' << num(r.p_c) << '\t' << num(r.eta_ce) << '\t'
                << num(r.p_ce) << '\t' << (r.flags.empty() ? "." : r.flags) << '\n';
        });
    }
    man.output(o.out);
    man.set("skipped_snps", geno.skipped);
    man.write(o.out);
}

// ---------------------------------------------------------------------------
// simulate

struct SimOptions {
    std::string config, out, emit, methods = "msnimble,min-impute,svd-impute", q_thresholds = "0.05,0.2";
    int replicates = 10;
    int snps = 0;
    bool full_scale = false;
    std::optional<int> threads;
    std::optional<std::uint64_t> seed;
};

SimConfig sim_config_from_json(const json& j, RunConfig& analysis) {
    SimConfig c;
    bool loadings_given = false;
    try {
        for (const auto& [key, v] : j.items()) {
            if (key == "p") c.p = v.get<int>();
            else if (key == "n") c.n = v.get<int>();
            else if (key == "k") c.k = v.get<int>();
            else if (key == "frac_nonzero_beta") c.frac_nonzero_beta = v.get<double>();
            else if (key == "beta_sd") c.beta_sd = v.get<double>();
            else if (key == "mu_alpha") c.mu_alpha = v.get<double>();
            else if (key == "alpha_log_sd") c.alpha_log_sd = v.get<double>();
            else if (key == "delta_mean") c.delta_mean = v.get<double>();
            else if (key == "delta_sd") c.delta_sd = v.get<double>();
            else if (key == "mu_mean") c.mu_mean = v.get<double>();
            else if (key == "mu_sd") c.mu_sd = v.get<double>();
            else if (key == "sigma_gamma_shape") c.sigma_gamma_shape = v.get<double>();
            else if (key == "confounding_a") c.confounding_a = v.get<double>();
            else if (key == "confounded_factors") c.confounded_factors = v.get<int>();
            else if (key == "truth_cdf") c.truth_cdf = SelectionCdf::parse(v.get<std::string>());
            else if (key == "seed") c.seed = v.get<std::uint64_t>();
            else if (key == "loadings") {
                c.loading_spec.clear();
                for (const auto& l : v) c.loading_spec.push_back({l.at("pi").get<double>(), l.at("tau").get<double>()});
                loadings_given = true;
            } else if (key == "analysis") analysis.update(v);
            else throw Error("CONFIG_ERROR", "unknown simulation key '" + key + "'");
        }
    } catch (const json::exception& e) {
        throw Error("CONFIG_ERROR", e.what());
    }
    if (!loadings_given) c.loading_spec = geometric_loadings(c.k);
    return c;
}

json sim_config_json(const SimConfig& c) {
    json l = json::array();
    for (const auto& s : c.loading_spec) l.push_back({{"pi", s.pi}, {"tau", s.tau}});
    return {{"p", c.p},
            {"n", c.n},
            {"k", c.k},
            {"frac_nonzero_beta", c.frac_nonzero_beta},
            {"beta_sd", c.beta_sd},
            {"mu_alpha", c.mu_alpha},
            {"alpha_log_sd", c.alpha_log_sd},
            {"delta_mean", c.delta_mean},
            {"delta_sd", c.delta_sd},
            {"mu_mean", c.mu_mean},
            {"mu_sd", c.mu_sd},
            {"sigma_gamma_shape", c.sigma_gamma_shape},
            {"confounding_a", c.confounding_a},
            {"confounded_factors", c.confounded_factors},
            {"truth_cdf", c.truth_cdf.name()},
            {"seed", c.seed},
            {"loadings", l}};
}

void emit_dataset(const SimData& sim, const SimConfig& sc, int snps, const std::string& dir, Manifest& man) {
    std::filesystem::create_directories(dir);
    const std::string y_path = (std::filesystem::path(dir) / "Y.tsv").string();
    const std::string x_path = (std::filesystem::path(dir) / "X.tsv").string();
    const std::string t_path = (std::filesystem::path(dir) / "truth.tsv").string();
    {
        auto out = open_out(y_path);
        out << "# msnimble " << kVersion << " simulate seed " << sc.seed << '\n';
        write_matrix(sim.observed, out);
    }
    {
        auto out = open_out(x_path);
        out << "sample\ttreatment\n";
        for (Index i = 0; i < sim.truth.x.size(); ++i) {
            out << sim.observed.sample_ids[static_cast<std::size_t>(i)] << '\t' << num(sim.truth.x(i)) << '\n';
        }
    }
    {
        auto out = open_out(t_path);
        out << "# msnimble " << kVersion << " simulate seed " << sc.seed << '\n';
        out << "metabolite\tbeta\talpha\tdelta\tmu\tsigma\n";
        for (Index g = 0; g < sim.truth.beta.size(); ++g) {
            out << sim.observed.metabolite_ids[static_cast<std::size_t>(g)] << '\t' << num(sim.truth.beta(g)) << '\t'
                << num(sim.truth.alpha(g)) << '\t' << num(sim.truth.delta(g)) << '\t' << num(sim.truth.mu(g)) << '\t'
                << num(sim.truth.sigma(g)) << '\n';
        }
    }
    man.output(y_path);
    man.output(x_path);
    man.output(t_path);
    if (snps > 0) {
        const std::string g_path = (std::filesystem::path(dir) / "G.tsv").string();
        const Matrix g = simulate_genotypes(snps, sc.n, sc.seed + 7919);
        auto out = open_out(g_path);
        out << "snp";
        for (const auto& s : sim.observed.sample_ids) out << '\t' << s;
        out << '\n';
        for (Index s = 0; s < g.rows(); ++s) {
            out << "snp" << (s + 1);
            for (Index i = 0; i < g.cols(); ++i) out << '\t' << static_cast<int>(g(s, i));
            out << '\n';
        }
        out.close();
        man.output(g_path);
    }
}

void cmd_simulate(const SimOptions& so) {
    if (so.out.empty() && so.emit.empty()) throw Error("MISSING_INPUT", "--out or --emit is required");
    RunConfig analysis;
    SimConfig sc;
    if (!so.config.empty()) sc = sim_config_from_json(read_json(so.config), analysis);
    if (so.full_scale) {
        sc.p = 1200;
        sc.n = 600;
        sc.k = 10;
        sc.loading_spec = geometric_loadings(10);
    }
    if (so.seed) sc.seed = *so.seed;
    if (so.threads) analysis.threads = *so.threads;
    sc.validate();
    set_threads(static_cast<unsigned>(analysis.threads));
    if (so.replicates < 1) throw Error("INVALID_ARGUMENT", "--replicates must be at least 1");

    Manifest man("simulate", &analysis);
    man.input("config", so.config);
    man.set("simulation", sim_config_json(sc));
    if (!so.emit.empty()) emit_dataset(generate(sc), sc, so.snps, so.emit, man);

    if (!so.out.empty()) {
        const auto methods = split_commas(so.methods);
        std::vector<double> qs;
        for (const auto& s : split_commas(so.q_thresholds)) {
            double v = 0.0;
            if (!detail::parse_double(s, v)) throw Error("INVALID_ARGUMENT", "bad q threshold '" + s + "'");
            qs.push_back(v);
        }
        std::vector<std::vector<MethodMetrics>> per_rep(static_cast<std::size_t>(so.replicates));
        parallel_for(per_rep.size(), [&](std::size_t r) {
            SimConfig rc = sc;
            rc.seed = sc.seed + r;
            const ReplicateResult rr = run_replicate(rc, methods, analysis);
            per_rep[r] = evaluate(rr.sim.truth.beta, rr.calls, rr.missing_rows, qs);
        });
        auto out = open_out(so.out);
        table_header(out, "simulate", &analysis);
        out << "# simulation " << sim_config_json(sc).dump() << '\n';
        out << "replicate\tmethod\tq_threshold\tfdp\tpower\tcoverage\tmean_width\tn_rejected\tn_evaluated\n";
        for (std::size_t r = 0; r < per_rep.size(); ++r) {
            for (const auto& mm : per_rep[r]) {
                out << (r + 1) << '\t' << mm.method << '\t' << num(mm.q_threshold) << '\t' << num(mm.fdp) << '\t' << num(mm.power)
                    << '\t' << num(mm.coverage) << '\t' << num(mm.mean_width) << '\t' << mm.n_rejected << '\t' << mm.n_evaluated
                    << '\n';
            }
        }
        // medians over replicates, one row per (method, threshold)
        for (std::size_t k = 0; k < per_rep[0].size(); ++k) {
            std::vector<double> fdp, power, cov, width;
            for (const auto& rep : per_rep) {
                fdp.push_back(rep[k].fdp);
                power.push_back(rep[k].power);
                cov.push_back(rep[k].coverage);
                width.push_back(rep[k].mean_width);
            }
            const auto& mm = per_rep[0][k];
            out << "median\t" << mm.method << '\t' << num(mm.q_threshold) << '\t' << num(median(fdp)) << '\t' << num(median(power))
                << '\t' << num(median(cov)) << '\t' << num(median(width)) << "\tNA\tNA\n";
        }
        out.close();
        man.output(so.out);
    }
    man.write(so.out.empty() ? (std::filesystem::path(so.emit) / "simulate").string() : so.out);
}

// ---------------------------------------------------------------------------
// impute

struct ImputeOptions {
    std::string input, out, method = "min";
    int k = 5;
    int max_iter = 200;
    double scale = 1.0;
    double tol = 1e-8;
};

void cmd_impute(const ImputeOptions& io) {
    require(io.input, "--input");
    require(io.out, "--out");
    Manifest man("impute", nullptr);
    man.set("method", io.method);
    const ObservedMatrix m = load_matrix(io.input);
    man.input("input", io.input);
    Matrix filled;
    std::string note;
    if (io.method == "min") {
        filled = impute_minimum(m, io.scale);
        man.set("scale", io.scale);
    } else if (io.method == "svd") {
        const SvdImputation res = impute_svd(m, io.k, io.max_iter, io.tol);
        filled = res.y;
        man.set("k", io.k);
        man.set("iterations", res.iterations);
        man.set("converged", res.converged);
        if (!res.converged) note = " not_converged";
    } else {
        throw Error("INVALID_ARGUMENT", "unknown imputation method '" + io.method + "'");
    }
    const ObservedMatrix full =
        ObservedMatrix::from(filled, BoolMatrix::Constant(m.p(), m.n(), true), m.metabolite_ids, m.sample_ids);
    {
        auto out = open_out(io.out);
        out << "# msnimble " << kVersion << " impute " << io.method << note << '\n';
        write_matrix(full, out);
    }
    man.output(io.out);
    man.write(io.out);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Metabolomics analysis with nonignorable missing data and latent factors"};
    app.set_version_flag("--version", kVersion);
    app.require_subcommand(1);

    Options o;
    auto* mech = app.add_subcommand("estimate-mechanisms", "Estimate per-metabolite missingness mechanisms");
    add_data_flags(mech, o, true);
    add_run_flags(mech, o);

    auto* fac = app.add_subcommand("factors", "Estimate latent factors and Omega");
    add_data_flags(fac, o, true);
    fac->add_option("--mech", o.mech, "Mechanism store");
    add_run_flags(fac, o);

    auto* da = app.add_subcommand("da", "Differential abundance");
    add_data_flags(da, o, true);
    da->add_option("--mech", o.mech, "Mechanism store");
    da->add_option("--factors", o.factors, "Factor store (estimated when absent)");
    add_run_flags(da, o);

    auto* gw = app.add_subcommand("gwas", "Metabolite GWAS score tests");
    add_data_flags(gw, o, true);
    gw->add_option("--mech", o.mech, "Mechanism store");
    gw->add_option("--factors", o.factors, "Factor store (estimated when absent)");
    gw->add_option("--geno", o.geno, "SNP x sample genotype table (0/1/2)");
    gw->add_option("--min-mac", o.min_mac, "Drop SNPs with minor allele count below this");
    add_run_flags(gw, o);

    SimOptions so;
    auto* sim = app.add_subcommand("simulate", "Simulate datasets and score methods");
    sim->add_option("--config", so.config, "JSON simulation settings; an \"analysis\" object holds run settings");
    sim->add_option("--methods", so.methods, "Comma list of msnimble, min-impute, svd-impute, min-impute-oracle, svd-impute-oracle");
    sim->add_option("--replicates", so.replicates, "Number of simulated datasets");
    sim->add_option("--q-thresholds", so.q_thresholds, "Comma list of q-value cuts");
    sim->add_option("--out", so.out, "Metrics table");
    sim->add_option("--emit", so.emit, "Directory for one simulated dataset (Y.tsv, X.tsv, truth.tsv)");
    sim->add_option("--snps", so.snps, "Also write this many simulated SNPs to G.tsv");
    sim->add_flag("--full-scale", so.full_scale, "p=1200, n=600, K=10");
    sim->add_option("--seed", so.seed, "Seed of the first replicate");
    sim->add_option("--threads", so.threads, "Worker threads");

    ImputeOptions io;
    auto* imp = app.add_subcommand("impute", "Imputation baselines");
    imp->add_option("--input", io.input, "Metabolite x sample matrix");
    imp->add_option("--out", io.out, "Completed matrix");
    imp->add_option("--method", io.method, "min or svd");
    imp->add_option("--k", io.k, "Rank for svd");
    imp->add_option("--scale", io.scale, "Multiplier of the row minimum for min");
    imp->add_option("--max-iter", io.max_iter, "Iterations for svd");
    imp->add_option("--tol", io.tol, "Relative change tolerance for svd");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        std::cerr << "error: USAGE: " << e.what() << '\n';
        return 2;
    }

    try {
        if (*mech) cmd_estimate_mechanisms(o);
        else if (*fac) cmd_factors(o);
        else if (*da) cmd_da(o);
        else if (*gw) cmd_gwas(o);
        else if (*sim) cmd_simulate(so);
        else if (*imp) cmd_impute(io);
    } catch (const Error& e) {
        std::cerr << "error: " << e.kind() << ": " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: INTERNAL: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
