// Dense double-precision tensors, deterministic RNG and the error taxonomy
// shared by every module. Row-major layout throughout.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace fskgc {

// Negative-branch slope shared by every LeakyReLU in the model.
inline constexpr double kLeakySlope = 0.01;

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
// Shape disagreement between operands.
struct DimensionError : Error {
    using Error::Error;
};
// Caller violated an operation's precondition.
struct ContractError : Error {
    using Error::Error;
};
// Value outside the mathematical domain of the operation.
struct DomainError : Error {
    using Error::Error;
};
// Invalid run/schedule configuration.
struct ConfigError : Error {
    using Error::Error;
};
// Dataset loading, vocabulary, sampling and evaluation failures.
struct DataError : Error {
    using Error::Error;
};

inline std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

// Dense row-major tensor of 64-bit floats. Rank 0..3 is what the pipeline
// uses (scalars are shape {1}; conv kernels are rank 3).
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(numel_of(shape), 0.0) {}
    Tensor(std::vector<int> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
        if (numel_of(shape) != static_cast<long>(data.size()))
            throw DimensionError("Tensor: shape " + shape_str(shape) + " does not match value count " +
                                 std::to_string(data.size()));
    }

    static long numel_of(const std::vector<int>& s) {
        long n = 1;
        for (int e : s) {
            if (e < 0) throw DimensionError("Tensor: negative extent in shape " + shape_str(s));
            n *= e;
        }
        return n;
    }

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
    static Tensor full(std::vector<int> s, double v) {
        Tensor t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }
    static Tensor scalar(double v) { return Tensor({1}, {v}); }
    static Tensor identity(int n) {
        Tensor t({n, n});
        for (int i = 0; i < n; ++i) t.data[static_cast<size_t>(i) * n + i] = 1.0;
        return t;
    }

    long numel() const { return static_cast<long>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    bool is_scalar() const { return numel() == 1; }
    int rows() const { return shape.empty() ? 1 : shape[0]; }
    int cols() const {
        if (rank() != 2) throw DimensionError("Tensor: cols() on shape " + shape_str(shape));
        return shape[1];
    }

    double& at(int i) { return data[static_cast<size_t>(i)]; }
    double at(int i) const { return data[static_cast<size_t>(i)]; }
    double& at(int i, int j) { return data[static_cast<size_t>(i) * shape[1] + j]; }
    double at(int i, int j) const { return data[static_cast<size_t>(i) * shape[1] + j]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    double item() const {
        if (!is_scalar()) throw ContractError("Tensor: item() on non-scalar shape " + shape_str(shape));
        return data[0];
    }
};

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Deterministic RNG. Distributions are hand-rolled on top of splitmix64 so
// sequences are identical across platforms and standard-library versions.
class Rng {
public:
    explicit Rng(uint64_t seed) : seed_(seed), state_(splitmix64(seed)) {}

    uint64_t raw() {
        state_ = splitmix64(state_);
        return state_;
    }

    // [0,1)
    double uniform() { return static_cast<double>(raw() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // [0,n)
    int uniform_int(int n) {
        if (n <= 0) throw ContractError("Rng: uniform_int needs n >= 1");
        return static_cast<int>(raw() % static_cast<uint64_t>(n));
    }

    // Standard normal via Box-Muller; second value cached.
    double normal() {
        if (has_cache_) {
            has_cache_ = false;
            return cache_;
        }
        double u1 = uniform(), u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        cache_ = r * std::sin(a);
        has_cache_ = true;
        return r * std::cos(a);
    }

    Tensor normal_tensor(std::vector<int> shape) {
        Tensor t(std::move(shape));
        for (double& v : t.data) v = normal();
        return t;
    }

    // Independent stream derived from this generator's seed, not its state.
    Rng fork(uint64_t stream) const { return Rng(splitmix64(seed_ ^ (0xd1b54a32d192ed03ULL * (stream + 1)))); }

    // Deterministic partial Fisher-Yates: the first k elements of a seeded
    // shuffle of [0,n).
    std::vector<int> sample_indices(int n, int k) {
        std::vector<int> idx(static_cast<size_t>(n));
        std::iota(idx.begin(), idx.end(), 0);
        int take = std::min(n, k);
        for (int i = 0; i < take; ++i) {
            int j = i + uniform_int(n - i);
            std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
        }
        idx.resize(static_cast<size_t>(take));
        return idx;
    }

private:
    uint64_t seed_;
    uint64_t state_;
    bool has_cache_ = false;
    double cache_ = 0.0;
};

}  // namespace fskgc
