#ifndef GFEM_CORE_HPP
#define GFEM_CORE_HPP

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace gfem {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using MatX = Eigen::MatrixXd;
using VecX = Eigen::VectorXd;

// Per-node 3-vector block (displacements, forces), one row per node.
using MatN3 = Eigen::Matrix<double, Eigen::Dynamic, 3>;

// ---------------------------------------------------------------------------
// Errors

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ParseError : public Error {
public:
    ParseError(const std::string& what, int line)
        : Error(what + " (line " + std::to_string(line) + ")"), line_(line) {}
    int line() const { return line_; }

private:
    int line_;
};

class InvalidMeshError : public Error {
public:
    using Error::Error;
};

class InvalidParameterError : public Error {
public:
    using Error::Error;
};

class ElementInversionError : public Error {
public:
    ElementInversionError(int tet, double det_f)
        : Error("element inversion in tet " + std::to_string(tet) +
                " (det F = " + std::to_string(det_f) + ")"),
          tet_(tet) {}
    int tet() const { return tet_; }

private:
    int tet_;
};

class ConvergenceError : public Error {
public:
    ConvergenceError(const std::string& what, double last_residual)
        : Error(what + " (last residual " + std::to_string(last_residual) + " N)"),
          residual_(last_residual) {}
    double last_residual() const { return residual_; }

private:
    double residual_;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class DataError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    explicit ConfigError(std::vector<std::string> violations)
        : Error(join(violations)), violations_(std::move(violations)) {}
    const std::vector<std::string>& violations() const { return violations_; }

private:
    static std::string join(const std::vector<std::string>& v) {
        std::string s = "configuration invalid:";
        for (const auto& e : v) s += "\n  - " + e;
        return s;
    }
    std::vector<std::string> violations_;
};

// ---------------------------------------------------------------------------
// Deterministic randomness
//
// std::mt19937_64 is bit-exact everywhere, but the standard distributions are
// implementation-defined, so all draws go through hand-rolled conversions.

class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t next_u64() { return eng_(); }

    // uniform in [0, 1)
    double uniform() { return (next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // unbiased draw in [0, n)
    std::uint64_t below(std::uint64_t n) {
        // rejection sampling on the top bits
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return x % n;
    }

private:
    std::mt19937_64 eng_;
};

// Derives an independent stream seed from a master seed and an index
// (splitmix64 finalizer).
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) {
    std::uint64_t z = master + 0x9e3779b97f4a7c15ULL * (index + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Fisher-Yates with explicit bounded draws; identical output on every platform.
template <typename T>
void shuffle_in_place(std::vector<T>& v, Rng& rng) {
    for (std::size_t i = v.size(); i > 1; --i) {
        std::size_t j = static_cast<std::size_t>(rng.below(i));
        std::swap(v[i - 1], v[j]);
    }
}

// ---------------------------------------------------------------------------
// Parallel helper. Work items must write to disjoint output slots; the
// partition is by index so results never depend on the worker count.

void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& body);

}  // namespace gfem

#endif
