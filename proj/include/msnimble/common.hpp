#ifndef MSNIMBLE_COMMON_HPP
#define MSNIMBLE_COMMON_HPP

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <exception>
#include <mutex>
#include <numbers>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/special_functions/gamma.hpp>

namespace msnimble {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using BoolMatrix = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>;
using Index = Eigen::Index;

/// Error carrying a machine-readable class, e.g. PARSE_ERROR or SINGULAR.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& what)
        : std::runtime_error(what), kind_(std::move(kind)) {}
    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

/// Two-sided normal p-value for a z statistic.
inline double normal_two_sided(double z) { return std::erfc(std::fabs(z) / std::numbers::sqrt2); }

/// Upper tail P(chi^2_k > x).
inline double chi2_upper(double x, double k) {
    if (!(x > 0.0)) return 1.0;
    if (!std::isfinite(x)) return 0.0;
    return boost::math::gamma_q(0.5 * k, 0.5 * x);
}

// ---------------------------------------------------------------------------
// Thread pool size shared by all parallel maps. Every parallel map writes
// results by index, so output does not depend on the thread count.

inline std::atomic<unsigned>& thread_count_ref() {
    static std::atomic<unsigned> n{1};
    return n;
}
inline void set_threads(unsigned n) { thread_count_ref() = std::max(1u, n); }
inline unsigned threads() { return thread_count_ref(); }

// Set inside pool workers; a nested parallel_for then runs serially.
inline bool& in_parallel_region() {
    static thread_local bool inside = false;
    return inside;
}

template <typename F>
void parallel_for(std::size_t count, F&& body) {
    const unsigned nt = static_cast<unsigned>(std::min<std::size_t>(threads(), count));
    if (nt <= 1 || in_parallel_region()) {
        for (std::size_t i = 0; i < count; ++i) body(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto worker = [&] {
        in_parallel_region() = true;
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= count) return;
            try {
                body(i);
            } catch (...) {
                std::lock_guard lock(failure_mutex);
                if (!failure) failure = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    pool.reserve(nt);
    for (unsigned t = 0; t < nt; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
    if (failure) std::rethrow_exception(failure);
}

// ---------------------------------------------------------------------------
// Small dense helpers.

/// Residual-maker P_X^perp applied to the columns of M, via a QR of X.
inline Matrix project_out(const Matrix& x, const Matrix& m) {
    if (x.cols() == 0) return m;
    Eigen::HouseholderQR<Matrix> qr(x);
    const Matrix q = qr.householderQ() * Matrix::Identity(x.rows(), x.cols());
    return m - q * (q.transpose() * m);
}

/// Orthonormal basis of the column space of m (thin QR), keeping column count.
inline Matrix orthonormalize(const Matrix& m) {
    Eigen::HouseholderQR<Matrix> qr(m);
    Matrix q = qr.householderQ() * Matrix::Identity(m.rows(), m.cols());
    // Fix signs so that the diagonal of R is positive.
    const Matrix r = qr.matrixQR().topRows(m.cols()).triangularView<Eigen::Upper>();
    for (Index k = 0; k < m.cols(); ++k) {
        if (r(k, k) < 0.0) q.col(k) = -q.col(k);
    }
    return q;
}

/// Frobenius distance between the projections onto span(a) and span(b),
/// both with orthonormal columns.
inline double subspace_distance(const Matrix& a, const Matrix& b) {
    return (a * a.transpose() - b * b.transpose()).norm();
}

/// Symmetric positive-definite inverse through LDLT; returns false if singular.
inline bool spd_inverse(const Matrix& a, Matrix& out) {
    Eigen::LDLT<Matrix> ldlt(a);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) return false;
    const Vector d = ldlt.vectorD();
    const double scale = d.cwiseAbs().maxCoeff();
    if (!(scale > 0.0) || d.minCoeff() <= 1e-14 * scale) return false;
    out = ldlt.solve(Matrix::Identity(a.rows(), a.cols()));
    return true;
}

/// Empirical quantile with linear interpolation (type 7).
inline double quantile(std::vector<double> v, double prob) {
    if (v.empty()) return std::nan("");
    std::sort(v.begin(), v.end());
    const double h = (static_cast<double>(v.size()) - 1.0) * prob;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const auto hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

inline double median(std::vector<double> v) { return quantile(std::move(v), 0.5); }

}  // namespace msnimble

#endif  // MSNIMBLE_COMMON_HPP
