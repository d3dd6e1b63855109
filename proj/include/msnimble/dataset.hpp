#ifndef MSNIMBLE_DATASET_HPP
#define MSNIMBLE_DATASET_HPP

#include <charconv>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "common.hpp"

namespace msnimble {

/// p x n log-abundance matrix. Missing cells hold NaN and have mask == false;
/// the mask is the source of truth.
struct ObservedMatrix {
    Matrix y;
    BoolMatrix mask;
    std::vector<std::string> metabolite_ids;
    std::vector<std::string> sample_ids;

    Index p() const { return y.rows(); }
    Index n() const { return y.cols(); }

    Index observed_count(Index g) const { return mask.row(g).count(); }

    /// Observed values of metabolite g, in sample order.
    std::vector<double> observed_values(Index g) const {
        std::vector<double> out;
        out.reserve(static_cast<std::size_t>(n()));
        for (Index i = 0; i < n(); ++i) {
            if (mask(g, i)) out.push_back(y(g, i));
        }
        return out;
    }

    /// Builds a matrix from values and mask, stamping NaN into unobserved cells.
    static ObservedMatrix from(Matrix y, BoolMatrix mask, std::vector<std::string> metabolite_ids = {},
                               std::vector<std::string> sample_ids = {}) {
        if (y.rows() != mask.rows() || y.cols() != mask.cols()) {
            throw Error("INVALID_ARGUMENT", "value and mask dimensions differ");
        }
        ObservedMatrix m;
        for (Index g = 0; g < y.rows(); ++g) {
            for (Index i = 0; i < y.cols(); ++i) {
                if (!mask(g, i)) {
                    y(g, i) = std::numeric_limits<double>::quiet_NaN();
                } else if (!std::isfinite(y(g, i))) {
                    throw Error("INVALID_ARGUMENT", "observed cell is not finite");
                }
            }
        }
        if (metabolite_ids.empty()) {
            for (Index g = 0; g < y.rows(); ++g) metabolite_ids.push_back("m" + std::to_string(g + 1));
        }
        if (sample_ids.empty()) {
            for (Index i = 0; i < y.cols(); ++i) sample_ids.push_back("s" + std::to_string(i + 1));
        }
        m.y = std::move(y);
        m.mask = std::move(mask);
        m.metabolite_ids = std::move(metabolite_ids);
        m.sample_ids = std::move(sample_ids);
        return m;
    }

    ObservedMatrix rows(const std::vector<Index>& idx) const {
        ObservedMatrix out;
        out.y.resize(static_cast<Index>(idx.size()), n());
        out.mask.resize(static_cast<Index>(idx.size()), n());
        for (std::size_t k = 0; k < idx.size(); ++k) {
            out.y.row(static_cast<Index>(k)) = y.row(idx[k]);
            out.mask.row(static_cast<Index>(k)) = mask.row(idx[k]);
            out.metabolite_ids.push_back(metabolite_ids[static_cast<std::size_t>(idx[k])]);
        }
        out.sample_ids = sample_ids;
        return out;
    }
};

/// n x d design. Columns [0, n_interest) are the covariates of interest.
struct DesignMatrix {
    Matrix x;
    std::vector<std::string> column_names;
    Index n_interest = 1;
    bool includes_intercept = true;

    Index n() const { return x.rows(); }
    Index d() const { return x.cols(); }
};

enum class MetaboliteClass { Complete, Missing, Discarded };

inline const char* to_string(MetaboliteClass c) {
    switch (c) {
        case MetaboliteClass::Complete: return "complete";
        case MetaboliteClass::Missing: return "missing";
        case MetaboliteClass::Discarded: return "discarded";
    }
    return "?";
}

struct MetabolitePartition {
    std::vector<Index> complete;   // fraction missing < 0.05
    std::vector<Index> missing;    // 0.05 <= fraction missing <= 0.50
    std::vector<Index> discarded;  // fraction missing > 0.50
    std::vector<MetaboliteClass> class_of;

    /// complete followed by missing, the rows that enter the factor model.
    std::vector<Index> analyzed() const {
        std::vector<Index> out;
        for (Index g = 0; g < static_cast<Index>(class_of.size()); ++g) {
            if (class_of[static_cast<std::size_t>(g)] != MetaboliteClass::Discarded) out.push_back(g);
        }
        return out;
    }
};

inline MetaboliteClass classify_missing(Index n_missing, Index n) {
    // Integer form of the 5% and 50% thresholds: both boundaries go to "missing".
    if (20 * n_missing < n) return MetaboliteClass::Complete;
    if (2 * n_missing <= n) return MetaboliteClass::Missing;
    return MetaboliteClass::Discarded;
}

inline MetabolitePartition partition_metabolites(const ObservedMatrix& m) {
    if (m.n() < 1) throw Error("INVALID_ARGUMENT", "matrix has no samples");
    MetabolitePartition part;
    part.class_of.resize(static_cast<std::size_t>(m.p()));
    for (Index g = 0; g < m.p(); ++g) {
        const Index n_missing = m.n() - m.observed_count(g);
        const MetaboliteClass c = classify_missing(n_missing, m.n());
        part.class_of[static_cast<std::size_t>(g)] = c;
        switch (c) {
            case MetaboliteClass::Complete: part.complete.push_back(g); break;
            case MetaboliteClass::Missing: part.missing.push_back(g); break;
            case MetaboliteClass::Discarded: part.discarded.push_back(g); break;
        }
    }
    return part;
}

// ---------------------------------------------------------------------------
// Delimited text I/O.

enum class TableFormat { Tsv, Csv };

inline TableFormat format_for_path(const std::string& path) {
    const auto dot = path.rfind('.');
    if (dot != std::string::npos && path.substr(dot) == ".csv") return TableFormat::Csv;
    return TableFormat::Tsv;
}

namespace detail {

inline std::vector<std::string> split_line(const std::string& line, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : line) {
        if (ch == sep) {
            out.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur.push_back(ch);
        }
    }
    out.push_back(cur);
    return out;
}

inline std::string trim(std::string s) {
    const auto b = s.find_first_not_of(" \t");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t");
    return s.substr(b, e - b + 1);
}

inline bool parse_double(const std::string& s, double& out) {
    const char* first = s.data();
    const char* last = s.data() + s.size();
    if (first != last && *first == '+') ++first;
    auto [ptr, ec] = std::from_chars(first, last, out);
    return ec == std::errc() && ptr == last;
}

inline std::string format_double(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
}

inline std::string location(const std::string& path, std::size_t row, std::size_t col) {
    return path + ":" + std::to_string(row) + ":" + std::to_string(col);
}

/// Reads non-comment lines ('#' prefix) split on the separator.
inline std::vector<std::vector<std::string>> read_table(const std::string& path, TableFormat fmt,
                                                        std::vector<std::size_t>& line_numbers) {
    std::ifstream in(path);
    if (!in) throw Error("IO_ERROR", "cannot open '" + path + "'");
    const char sep = fmt == TableFormat::Csv ? ',' : '\t';
    std::vector<std::vector<std::string>> rows;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        rows.push_back(split_line(line, sep));
        line_numbers.push_back(lineno);
    }
    return rows;
}

}  // namespace detail

/// Parses a metabolite x sample table: first row holds sample ids, first column
/// metabolite ids; empty cells and "NA" are missing.
inline ObservedMatrix load_matrix(const std::string& path, TableFormat fmt) {
    std::vector<std::size_t> lines;
    const auto rows = detail::read_table(path, fmt, lines);
    if (rows.empty()) throw Error("PARSE_ERROR", path + ": empty file");
    const auto& header = rows[0];
    if (header.size() < 2) throw Error("PARSE_ERROR", detail::location(path, lines[0], 1) + ": no sample columns");
    const std::size_t n = header.size() - 1;
    const std::size_t p = rows.size() - 1;

    ObservedMatrix m;
    m.y.resize(static_cast<Index>(p), static_cast<Index>(n));
    m.mask.resize(static_cast<Index>(p), static_cast<Index>(n));
    std::set<std::string> seen;
    for (std::size_t j = 1; j <= n; ++j) {
        std::string id = detail::trim(header[j]);
        if (!seen.insert(id).second) {
            throw Error("PARSE_ERROR", detail::location(path, lines[0], j + 1) + ": duplicate sample id '" + id + "'");
        }
        m.sample_ids.push_back(std::move(id));
    }
    seen.clear();
    for (std::size_t r = 0; r < p; ++r) {
        const auto& row = rows[r + 1];
        if (row.size() != n + 1) {
            throw Error("PARSE_ERROR", detail::location(path, lines[r + 1], row.size()) + ": expected " +
                                           std::to_string(n + 1) + " fields, found " + std::to_string(row.size()));
        }
        std::string id = detail::trim(row[0]);
        if (!seen.insert(id).second) {
            throw Error("PARSE_ERROR", detail::location(path, lines[r + 1], 1) + ": duplicate metabolite id '" + id + "'");
        }
        m.metabolite_ids.push_back(std::move(id));
        for (std::size_t j = 0; j < n; ++j) {
            const std::string cell = detail::trim(row[j + 1]);
            const auto gi = static_cast<Index>(r);
            const auto ii = static_cast<Index>(j);
            if (cell.empty() || cell == "NA") {
                m.y(gi, ii) = std::numeric_limits<double>::quiet_NaN();
                m.mask(gi, ii) = false;
                continue;
            }
            double v = 0.0;
            if (!detail::parse_double(cell, v) || !std::isfinite(v)) {
                throw Error("PARSE_ERROR",
                            detail::location(path, lines[r + 1], j + 2) + ": non-numeric cell '" + cell + "'");
            }
            m.y(gi, ii) = v;
            m.mask(gi, ii) = true;
        }
    }
    return m;
}

inline ObservedMatrix load_matrix(const std::string& path) { return load_matrix(path, format_for_path(path)); }

inline void write_matrix(const ObservedMatrix& m, std::ostream& out, char sep = '\t', const std::string& corner = "metabolite") {
    out << corner;
    for (const auto& s : m.sample_ids) out << sep << s;
    out << '\n';
    for (Index g = 0; g < m.p(); ++g) {
        out << m.metabolite_ids[static_cast<std::size_t>(g)];
        for (Index i = 0; i < m.n(); ++i) {
            out << sep << (m.mask(g, i) ? detail::format_double(m.y(g, i)) : std::string("NA"));
        }
        out << '\n';
    }
}

inline void write_matrix(const ObservedMatrix& m, const std::string& path, TableFormat fmt,
                         const std::string& corner = "metabolite") {
    std::ofstream out(path);
    if (!out) throw Error("IO_ERROR", "cannot write '" + path + "'");
    write_matrix(m, out, fmt == TableFormat::Csv ? ',' : '\t', corner);
}

inline void write_matrix(const ObservedMatrix& m, const std::string& path) {
    write_matrix(m, path, format_for_path(path));
}

/// True if the all-ones vector lies in the column space of x.
inline bool has_intercept(const Matrix& x) {
    if (x.cols() == 0) return false;
    const Vector ones = Vector::Ones(x.rows());
    const Vector res = project_out(x, ones);
    return res.norm() <= 1e-8 * std::sqrt(static_cast<double>(x.rows()));
}

/// Validates rank and intercept; appends an intercept column when asked.
inline DesignMatrix make_design(Matrix x, std::vector<std::string> names, Index n_interest, bool add_intercept = false) {
    if (names.empty()) {
        for (Index j = 0; j < x.cols(); ++j) names.push_back("x" + std::to_string(j + 1));
    }
    if (static_cast<Index>(names.size()) != x.cols()) throw Error("INVALID_ARGUMENT", "design column names mismatch");
    if (add_intercept && !has_intercept(x)) {
        x.conservativeResize(Eigen::NoChange, x.cols() + 1);
        x.col(x.cols() - 1).setOnes();
        names.push_back("(intercept)");
    }
    if (n_interest < 0 || n_interest > x.cols()) throw Error("INVALID_ARGUMENT", "bad number of interest columns");
    Eigen::ColPivHouseholderQR<Matrix> qr(x);
    qr.setThreshold(1e-10);
    if (qr.rank() != x.cols()) throw Error("RANK_DEFICIENT", "design matrix is not of full column rank");
    DesignMatrix d;
    d.includes_intercept = has_intercept(x);
    if (!d.includes_intercept) throw Error("INVALID_ARGUMENT", "design matrix must contain an intercept");
    d.x = std::move(x);
    d.column_names = std::move(names);
    d.n_interest = n_interest;
    return d;
}

/// Reads a sample x covariate table with a header naming the columns. Rows are
/// matched to `sample_ids`; `interest` names the covariates of interest, which
/// are moved to the front.
inline DesignMatrix load_design(const std::string& path, const std::vector<std::string>& sample_ids,
                                const std::vector<std::string>& interest, bool add_intercept = true) {
    std::vector<std::size_t> lines;
    const auto rows = detail::read_table(path, format_for_path(path), lines);
    if (rows.size() < 2) throw Error("PARSE_ERROR", path + ": design needs a header and rows");
    const auto& header = rows[0];
    const std::size_t d = header.size() - 1;
    std::vector<std::string> names;
    for (std::size_t j = 1; j < header.size(); ++j) names.push_back(detail::trim(header[j]));

    std::vector<std::size_t> order;
    for (const auto& name : interest) {
        auto it = std::find(names.begin(), names.end(), name);
        if (it == names.end()) throw Error("PARSE_ERROR", path + ": no design column '" + name + "'");
        order.push_back(static_cast<std::size_t>(it - names.begin()));
    }
    for (std::size_t j = 0; j < d; ++j) {
        if (std::find(order.begin(), order.end(), j) == order.end()) order.push_back(j);
    }

    std::unordered_map<std::string, std::size_t> row_of;
    for (std::size_t r = 1; r < rows.size(); ++r) {
        if (rows[r].size() != d + 1) {
            throw Error("PARSE_ERROR", detail::location(path, lines[r], rows[r].size()) + ": ragged row");
        }
        if (!row_of.emplace(detail::trim(rows[r][0]), r).second) {
            throw Error("PARSE_ERROR", detail::location(path, lines[r], 1) + ": duplicate sample id '" + rows[r][0] + "'");
        }
    }
    Matrix x(static_cast<Index>(sample_ids.size()), static_cast<Index>(d));
    for (std::size_t i = 0; i < sample_ids.size(); ++i) {
        auto it = row_of.find(sample_ids[i]);
        if (it == row_of.end()) throw Error("PARSE_ERROR", path + ": no design row for sample '" + sample_ids[i] + "'");
        const auto& row = rows[it->second];
        for (std::size_t k = 0; k < d; ++k) {
            double v = 0.0;
            const std::string cell = detail::trim(row[order[k] + 1]);
            if (!detail::parse_double(cell, v) || !std::isfinite(v)) {
                throw Error("PARSE_ERROR", detail::location(path, lines[it->second], order[k] + 2) +
                                               ": non-numeric design cell '" + cell + "'");
            }
            x(static_cast<Index>(i), static_cast<Index>(k)) = v;
        }
    }
    std::vector<std::string> ordered_names;
    for (auto j : order) ordered_names.push_back(names[j]);
    return make_design(std::move(x), std::move(ordered_names), static_cast<Index>(interest.size()), add_intercept);
}

inline void write_design(const DesignMatrix& d, const std::vector<std::string>& sample_ids, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw Error("IO_ERROR", "cannot write '" + path + "'");
    out << "sample";
    for (const auto& c : d.column_names) out << '\t' << c;
    out << '\n';
    for (Index i = 0; i < d.n(); ++i) {
        out << sample_ids[static_cast<std::size_t>(i)];
        for (Index j = 0; j < d.d(); ++j) out << '\t' << detail::format_double(d.x(i, j));
        out << '\n';
    }
}

}  // namespace msnimble

#endif  // MSNIMBLE_DATASET_HPP
