// Tape-based reverse-mode differentiation over dense tensors. The trace is
// rebuilt on every forward pass; nodes are only appended, so creation order
// is a valid topological order for the reverse sweep.
#pragma once

#include "fskgc/numerics.hpp"

#include <deque>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <unordered_map>
#include <utility>

namespace fskgc {

// Named trainable tensor. Gradient has the same shape as the value and is
// accumulated across backward calls until zero_grad().
struct Param {
    std::string name;
    Tensor value;
    Tensor grad;
};

// Owns trainable parameters in a stable creation order.
class ParamRegistry {
public:
    // Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)]. fan_in is the
    // product of all extents after the first (the input width), or the
    // length itself for vectors.
    Param& create(const std::string& name, std::vector<int> shape, Rng& rng) {
        long fan_in = 1;
        if (shape.size() <= 1) {
            fan_in = shape.empty() ? 1 : shape[0];
        } else {
            for (size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
        }
        double bound = 1.0 / std::sqrt(static_cast<double>(std::max<long>(fan_in, 1)));
        Tensor v(shape);
        for (double& x : v.data) x = rng.uniform(-bound, bound);
        return insert(name, std::move(v));
    }

    Param& create_zeros(const std::string& name, std::vector<int> shape) {
        return insert(name, Tensor(std::move(shape)));
    }

    Param& insert(const std::string& name, Tensor value) {
        if (index_.count(name)) throw ContractError("ParamRegistry: duplicate parameter name '" + name + "'");
        auto p = std::make_unique<Param>();
        p->name = name;
        p->grad = Tensor(value.shape);
        p->value = std::move(value);
        index_[name] = params_.size();
        params_.push_back(std::move(p));
        return *params_.back();
    }

    Param* find(const std::string& name) {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : params_[it->second].get();
    }

    Param& at(const std::string& name) {
        Param* p = find(name);
        if (!p) throw ContractError("ParamRegistry: unknown parameter '" + name + "'");
        return *p;
    }

    size_t size() const { return params_.size(); }
    Param& operator[](size_t i) { return *params_[i]; }
    const Param& operator[](size_t i) const { return *params_[i]; }

    void zero_grad() {
        for (auto& p : params_) std::fill(p->grad.data.begin(), p->grad.data.end(), 0.0);
    }

    long total_count() const {
        long n = 0;
        for (auto& p : params_) n += p->value.numel();
        return n;
    }

private:
    std::vector<std::unique_ptr<Param>> params_;
    std::unordered_map<std::string, size_t> index_;
};

// Handle into a Tape.
struct Val {
    int id = -1;
};

class Tape {
public:
    Val leaf(Param& p) {
        auto it = leaf_cache_.find(&p);
        if (it != leaf_cache_.end()) return Val{it->second};
        int id = emit_node(p.value, nullptr);
        nodes_[static_cast<size_t>(id)].param = &p;
        leaf_cache_[&p] = id;
        return Val{id};
    }

    Val constant(Tensor t) { return Val{emit_node(std::move(t), nullptr)}; }
    Val constant_scalar(double v) { return constant(Tensor::scalar(v)); }

    // Low-level node creation; back reads grad_buffer(self) and accumulates
    // into the parents' buffers. Used internally and by tests that need a
    // hand-built backward.
    Val emit(Tensor value, std::function<void(Tape&, int)> back) {
        return Val{emit_node(std::move(value), std::move(back))};
    }

    const Tensor& value(Val v) const { return nodes_[check(v)].value; }

    // Gradient buffer, allocated on first touch.
    Tensor& grad_buffer(Val v) {
        Node& n = nodes_[check(v)];
        if (n.grad.data.empty() && n.value.numel() > 0) n.grad = Tensor(n.value.shape);
        if (n.grad.data.empty() && n.value.numel() == 0) n.grad = Tensor(n.value.shape);
        return n.grad;
    }

    bool has_grad(Val v) const { return !nodes_[check(v)].grad.data.empty() || nodes_[check(v)].value.numel() == 0; }

    // Reverse sweep from a scalar loss. Gradients accumulate into Param::grad
    // without zeroing, so several tapes can contribute to one optimizer step.
    void backward_accumulate(Val loss) {
        const Tensor& lv = value(loss);
        if (!lv.is_scalar())
            throw ContractError("backward: loss must be scalar, got shape " + shape_str(lv.shape));
        if (swept_) throw ContractError("backward: tape already swept");
        swept_ = true;
        grad_buffer(loss).data[0] = 1.0;
        for (int id = static_cast<int>(nodes_.size()) - 1; id >= 0; --id) {
            Node& n = nodes_[static_cast<size_t>(id)];
            if (n.grad.data.empty() && n.value.numel() > 0) continue;  // no gradient flowed here
            if (n.param) {
                for (long i = 0; i < n.value.numel(); ++i) n.param->grad.data[static_cast<size_t>(i)] += n.grad.data[static_cast<size_t>(i)];
            } else if (n.back) {
                n.back(*this, id);
            }
        }
    }

    size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        std::function<void(Tape&, int)> back;
        Param* param = nullptr;
    };

    size_t check(Val v) const {
        if (v.id < 0 || static_cast<size_t>(v.id) >= nodes_.size())
            throw ContractError("Tape: invalid value handle");
        return static_cast<size_t>(v.id);
    }

    int emit_node(Tensor value, std::function<void(Tape&, int)> back) {
        Node n;
        n.value = std::move(value);
        n.back = std::move(back);
        nodes_.push_back(std::move(n));
        return static_cast<int>(nodes_.size()) - 1;
    }

    // deque keeps references from value()/grad_buffer() stable across emits
    std::deque<Node> nodes_;
    std::unordered_map<const Param*, int> leaf_cache_;
    bool swept_ = false;
};

// Zero all registry gradients, then sweep: every registry tensor ends up
// with a gradient, untouched parameters with zero.
inline void backward(Tape& tape, Val loss, ParamRegistry& reg) {
    reg.zero_grad();
    tape.backward_accumulate(loss);
}

// ---------------------------------------------------------------------------
// Elementwise and scalar ops
// ---------------------------------------------------------------------------

namespace detail {
inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b))
        throw DimensionError(std::string(op) + ": shape " + shape_str(a.shape) + " vs " + shape_str(b.shape));
}
inline void accumulate(Tensor& dst, const Tensor& src, double scale = 1.0) {
    for (size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += scale * src.data[i];
}
}  // namespace detail

inline Val add(Tape& t, Val a, Val b) {
    const Tensor &av = t.value(a), &bv = t.value(b);
    detail::require_same_shape("add", av, bv);
    Tensor out = av;
    detail::accumulate(out, bv);
    return t.emit(std::move(out), [a, b](Tape& tp, int self) {
        const Tensor& g = tp.grad_buffer(Val{self});
        detail::accumulate(tp.grad_buffer(a), g);
        detail::accumulate(tp.grad_buffer(b), g);
    });
}

inline Val sub(Tape& t, Val a, Val b) {
    const Tensor &av = t.value(a), &bv = t.value(b);
    detail::require_same_shape("sub", av, bv);
    Tensor out = av;
    detail::accumulate(out, bv, -1.0);
    return t.emit(std::move(out), [a, b](Tape& tp, int self) {
        const Tensor& g = tp.grad_buffer(Val{self});
        detail::accumulate(tp.grad_buffer(a), g);
        detail::accumulate(tp.grad_buffer(b), g, -1.0);
    });
}

inline Val mul(Tape& t, Val a, Val b) {
    const Tensor &av = t.value(a), &bv = t.value(b);
    detail::require_same_shape("mul", av, bv);
    Tensor out = av;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= bv.data[i];
    return t.emit(std::move(out), [a, b](Tape& tp, int self) {
        const Tensor& g = tp.grad_buffer(Val{self});
        const Tensor &av2 = tp.value(a), &bv2 = tp.value(b);
        Tensor &ga = tp.grad_buffer(a), &gb = tp.grad_buffer(b);
        for (size_t i = 0; i < g.data.size(); ++i) {
            ga.data[i] += g.data[i] * bv2.data[i];
            gb.data[i] += g.data[i] * av2.data[i];
        }
    });
}

inline Val scale(Tape& t, Val a, double c) {
    Tensor out = t.value(a);
    for (double& v : out.data) v *= c;
    return t.emit(std::move(out), [a, c](Tape& tp, int self) {
        detail::accumulate(tp.grad_buffer(a), tp.grad_buffer(Val{self}), c);
    });
}

inline Val leaky_relu(Tape& t, Val a, double slope = 0.01) {
    Tensor out = t.value(a);
    for (double& v : out.data)
        if (v < 0.0) v *= slope;
    return t.emit(std::move(out), [a, slope](Tape& tp, int self) {
        const Tensor& g = tp.grad_buffer(Val{self});
        const Tensor& x = tp.value(a);
        Tensor& ga = tp.grad_buffer(a);
        for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] * (x.data[i] >= 0.0 ? 1.0 : slope);
    });
}

inline Val relu(Tape& t, Val a) {
    Tensor out = t.value(a);
    for (double& v : out.data)
        if (v < 0.0) v = 0.0;
    return t.emit(std::move(out), [a](Tape& tp, int self) {
        const Tensor& g = tp.grad_buffer(Val{self});
        const Tensor& x = tp.value(a);
        Tensor& ga = tp.grad_buffer(a);
        for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += x.data[i] > 0.0 ? g.data[i] : 0.0;
    });
}

inline Val tanh_op(Tape& t, Val a) {
    Tensor out = t.value(a);
    for (double& v : out.data) v = std::tanh(v);
    return t.emit(std::move(out), [a](Tape& tp, int self) {
        const Tensor& g = tp.grad_buffer(Val{self});
        const Tensor& y = tp.value(Val{self});
        Tensor& ga = tp.grad_buffer(a);
        for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] * (1.0 - y.data[i] * y.data[i]);
    });
}

inline Val sigmoid_op(Tape& t, Val a) {
    Tensor out = t.value(a);
    for (double& v : out.data) v = 1.0 / (1.0 + std::exp(-v));
    return t.emit(std::move(out), [a](Tape& tp, int self) {
        const Tensor& g = tp.grad_buffer(Val{self});
        const Tensor& y = tp.value(Val{self});
        Tensor& ga = tp.grad_buffer(a);
        for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] * y.data[i] * (1.0 - y.data[i]);
    });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

// y = x W^T (+ b). W is (out, in); x is (n, in) or a length-in vector.
inline Val linear(Tape& t, Val x, Val W, std::optional<Val> b = std::nullopt) {
    const Tensor &xv = t.value(x), &Wv = t.value(W);
    if (Wv.rank() != 2) throw DimensionError("linear: W must be rank 2, got " + shape_str(Wv.shape));
    const int out = Wv.shape[0], in = Wv.shape[1];
    const bool vec = xv.rank() == 1;
    const int n = vec ? 1 : xv.shape[0];
    const int xin = vec ? xv.shape[0] : (xv.rank() == 2 ? xv.shape[1] : -1);
    if (xin != in)
        throw DimensionError("linear: x shape " + shape_str(xv.shape) + " incompatible with W shape " +
                             shape_str(Wv.shape));
    if (b) {
        const Tensor& bv = t.value(*b);
        if (bv.rank() != 1 || bv.shape[0] != out)
            throw DimensionError("linear: bias shape " + shape_str(bv.shape) + " incompatible with W shape " +
                                 shape_str(Wv.shape));
    }
    Tensor y(vec ? std::vector<int>{out} : std::vector<int>{n, out});
    for (int r = 0; r < n; ++r) {
        const double* xr = xv.data.data() + static_cast<size_t>(r) * in;
        double* yr = y.data.data() + static_cast<size_t>(r) * out;
        for (int o = 0; o < out; ++o) {
            const double* wr = Wv.data.data() + static_cast<size_t>(o) * in;
            double acc = 0.0;
            for (int i = 0; i < in; ++i) acc += xr[i] * wr[i];
            yr[o] = acc;
        }
        if (b) {
            const Tensor& bv = t.value(*b);
            for (int o = 0; o < out; ++o) yr[o] += bv.data[static_cast<size_t>(o)];
        }
    }
    Val bval = b.value_or(Val{-1});
    return t.emit(std::move(y), [x, W, bval, n, in, out](Tape& tp, int self) {
        const Tensor& g = tp.grad_buffer(Val{self});
        const Tensor &xv2 = tp.value(x), &Wv2 = tp.value(W);
        Tensor &gx = tp.grad_buffer(x), &gW = tp.grad_buffer(W);
        for (int r = 0; r < n; ++r) {
            const double* gr = g.data.data() + static_cast<size_t>(r) * out;
            const double* xr = xv2.data.data() + static_cast<size_t>(r) * in;
            double* gxr = gx.data.data() + static_cast<size_t>(r) * in;
            for (int o = 0; o < out; ++o) {
                const double go = gr[o];
                if (go == 0.0) continue;
                const double* wr = Wv2.data.data() + static_cast<size_t>(o) * in;
                double* gWr = gW.data.data() + static_cast<size_t>(o) * in;
                for (int i = 0; i < in; ++i) {
                    gxr[i] += go * wr[i];
                    gWr[i] += go * xr[i];
                }
            }
        }
        if (bval.id >= 0) {
            Tensor& gb = tp.grad_buffer(bval);
            for (int r = 0; r < n; ++r)
                for (int o = 0; o < out; ++o) gb.data[static_cast<size_t>(o)] += g.data[static_cast<size_t>(r) * out + o];
        }
    });
}

inline Val matmul(Tape& t, Val a, Val b) {
    const Tensor &av = t.value(a), &bv = t.value(b);
    if (av.rank() != 2 || bv.rank() != 2 || av.shape[1] != bv.shape[0])
        throw DimensionError("matmul: " + shape_str(av.shape) + " x " + shape_str(bv.shape));
    const int n = av.shape[0], m = av.shape[1], p = bv.shape[1];
    Tensor y({n, p});
    for (int i = 0; i < n; ++i)
        for (int k = 0; k < m; ++k) {
            const double aik = av.at(i, k);
            if (aik == 0.0) continue;
            for (int j = 0; j < p; ++j) y.at(i, j) += aik * bv.at(k, j);
        }
    return t.emit(std::move(y), [a, b, n, m, p](Tape& tp, int self) {
        const Tensor& g = tp.grad_buffer(Val{self});
        const Tensor &av2 = tp.value(a), &bv2 = tp.value(b);
        Tensor &ga = tp.grad_buffer(a), &gb = tp.grad_buffer(b);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < p; ++j) {
                const double gij = g.at(i, j);
                if (gij == 0.0) continue;
                for (int k = 0; k < m; ++k) {
                    ga.at(i, k) += gij * bv2.at(k, j);
                    gb.at(k, j) += gij * av2.at(i, k);
                }
            }
    });
}

// y = A x, A (n,m), x (m) -> (n)
inline Val matvec(Tape& t, Val A, Val x) {
    const Tensor &Av = t.value(A), &xv = t.value(x);
    if (Av.rank() != 2 || xv.rank() != 1 || Av.shape[1] != xv.shape[0])
        throw DimensionError("matvec: " + shape_str(Av.shape) + " x " + shape_str(xv.shape));
    const int n = Av.shape[0], m = Av.shape[1];
    Tensor y({n});
    for (int i = 0; i < n; ++i) {
        double acc = 0.0;
        for (int j = 0; j < m; ++j) acc += Av.at(i, j) * xv.at(j);
        y.at(i) = acc;
    }
    return t.emit(std::move(y), [A, x, n, m](Tape& tp, int self) {
        const Tensor& g = tp.grad_buffer(Val{self});
        const Tensor &Av2 = tp.value(A), &xv2 = tp.value(x);
        Tensor &gA = tp.grad_buffer(A), &gx = tp.grad_buffer(x);
        for (int i = 0; i < n; ++i) {
            const double gi = g.at(i);
            if (gi == 0.0) continue;
            for (int j = 0; j < m; ++j) {
                gA.at(i, j) += gi * xv2.at(j);
                gx.at(j) += gi * Av2.at(i, j);
            }
        }
    });
}

// y = A^T w, A (n,m), w (n) -> (m). Weighted sum of the rows of A.
inline Val tmatvec(Tape& t, Val A, Val w) {
    const Tensor &Av = t.value(A), &wv = t.value(w);
    if (Av.rank() != 2 || wv.rank() != 1 || Av.shape[0] != wv.shape[0])
        throw DimensionError("tmatvec: " + shape_str(Av.shape) + " vs " + shape_str(wv.shape));
    const int n = Av.shape[0], m = Av.shape[1];
    Tensor y({m});
    for (int i = 0; i < n; ++i) {
        const double wi = wv.at(i);
        if (wi == 0.0) continue;
        for (int j = 0; j < m; ++j) y.at(j) += wi * Av.at(i, j);
    }
    return t.emit(std::move(y), [A, w, n, m](Tape& tp, int self) {
        const Tensor& g = tp.grad_buffer(Val{self});
        const Tensor &Av2 = tp.value(A), &wv2 = tp.value(w);
        Tensor &gA = tp.grad_buffer(A), &gw = tp.grad_buffer(w);
        for (int i = 0; i < n; ++i) {
            const double wi = wv2.at(i);
            double acc = 0.0;
            for (int j = 0; j < m; ++j) {
                gA.at(i, j) += wi * g.at(j);
                acc += Av2.at(i, j) * g.at(j);
            }
            gw.at(i) += acc;
        }
    });
}

inline Val dot(Tape& t, Val a, Val b) {
    const Tensor &av = t.value(a), &bv = t.value(b);
    detail::require_same_shape("dot", av, bv);
    double acc = 0.0;
    for (size_t i = 0; i < av.data.size(); ++i) acc += av.data[i] * bv.data[i];
    return t.emit(Tensor::scalar(acc), [a, b](Tape& tp, int self) {
        const double g = tp.grad_buffer(Val{self}).data[0];
        const Tensor &av2 = tp.value(a), &bv2 = tp.value(b);
        Tensor &ga = tp.grad_buffer(a), &gb = tp.grad_buffer(b);
        for (size_t i = 0; i < av2.data.size(); ++i) {
            ga.data[i] += g * bv2.data[i];
            gb.data[i] += g * av2.data[i];
        }
    });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Val sum(Tape& t, Val a) {
    const Tensor& av = t.value(a);
    double acc = 0.0;
    for (double v : av.data) acc += v;
    return t.emit(Tensor::scalar(acc), [a](Tape& tp, int self) {
        const double g = tp.grad_buffer(Val{self}).data[0];
        Tensor& ga = tp.grad_buffer(a);
        for (double& v : ga.data) v += g;
    });
}

inline Val mean(Tape& t, Val a) {
    const long n = t.value(a).numel();
    if (n == 0) throw ContractError("mean: empty tensor");
    return scale(t, sum(t, a), 1.0 / static_cast<double>(n));
}

// Column means over the rows of a matrix, (n,c) -> (c).
inline Val mean_rows(Tape& t, Val a) {
    const Tensor& av = t.value(a);
    if (av.rank() != 2 || av.shape[0] == 0)
        throw ContractError("mean_rows: needs a non-empty matrix, got " + shape_str(av.shape));
    const int n = av.shape[0], c = av.shape[1];
    Tensor y({c});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < c; ++j) y.at(j) += av.at(i, j);
    for (int j = 0; j < c; ++j) y.at(j) /= n;
    return t.emit(std::move(y), [a, n, c](Tape& tp, int self) {
        const Tensor& g = tp.grad_buffer(Val{self});
        Tensor& ga = tp.grad_buffer(a);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < c; ++j) ga.at(i, j) += g.at(j) / n;
    });
}

// Euclidean norm; gradient is x/|x| (zero vector maps to zero gradient).
inline Val norm2(Tape& t, Val a) {
    const Tensor& av = t.value(a);
    double acc = 0.0;
    for (double v : av.data) acc += v * v;
    const double nrm = std::sqrt(acc);
    return t.emit(Tensor::scalar(nrm), [a, nrm](Tape& tp, int self) {
        if (nrm == 0.0) return;
        const double g = tp.grad_buffer(Val{self}).data[0];
        const Tensor& av2 = tp.value(a);
        Tensor& ga = tp.grad_buffer(a);
        for (size_t i = 0; i < av2.data.size(); ++i) ga.data[i] += g * av2.data[i] / nrm;
    });
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

// axis 0 for vectors; 0 (down columns) or 1 (along rows) for matrices.
inline Val softmax(Tape& t, Val a, int axis = -1) {
    const Tensor& av = t.value(a);
    if (av.rank() == 1) {
        if (axis != -1 && axis != 0) throw DomainError("softmax: axis " + std::to_string(axis) + " on a vector");
        if (av.shape[0] == 0) throw DomainError("softmax: empty axis");
        Tensor y = av;
        double mx = *std::max_element(y.data.begin(), y.data.end());
        double denom = 0.0;
        for (double& v : y.data) {
            v = std::exp(v - mx);
            denom += v;
        }
        for (double& v : y.data) v /= denom;
        return t.emit(std::move(y), [a](Tape& tp, int self) {
            const Tensor& y2 = tp.value(Val{self});
            const Tensor& g = tp.grad_buffer(Val{self});
            Tensor& ga = tp.grad_buffer(a);
            double gy = 0.0;
            for (size_t i = 0; i < y2.data.size(); ++i) gy += g.data[i] * y2.data[i];
            for (size_t i = 0; i < y2.data.size(); ++i) ga.data[i] += y2.data[i] * (g.data[i] - gy);
        });
    }
    if (av.rank() != 2) throw DimensionError("softmax: rank " + std::to_string(av.rank()) + " unsupported");
    if (axis == -1) axis = 1;
    if (axis != 0 && axis != 1) throw DomainError("softmax: axis " + std::to_string(axis) + " on a matrix");
    if (av.shape[axis] == 0) throw DomainError("softmax: empty axis");
    const int n = av.shape[0], c = av.shape[1];
    Tensor y = av;
    const int slices = axis == 1 ? n : c;
    const int len = axis == 1 ? c : n;
    auto idx = [&](int s, int k) { return axis == 1 ? static_cast<size_t>(s) * c + k : static_cast<size_t>(k) * c + s; };
    for (int s = 0; s < slices; ++s) {
        double mx = -std::numeric_limits<double>::infinity();
        for (int k = 0; k < len; ++k) mx = std::max(mx, y.data[idx(s, k)]);
        double denom = 0.0;
        for (int k = 0; k < len; ++k) {
            double& v = y.data[idx(s, k)];
            v = std::exp(v - mx);
            denom += v;
        }
        for (int k = 0; k < len; ++k) y.data[idx(s, k)] /= denom;
    }
    return t.emit(std::move(y), [a, axis, n, c](Tape& tp, int self) {
        const Tensor& y2 = tp.value(Val{self});
        const Tensor& g = tp.grad_buffer(Val{self});
        Tensor& ga = tp.grad_buffer(a);
        const int slices = axis == 1 ? n : c;
        const int len = axis == 1 ? c : n;
        auto idx = [&](int s, int k) { return axis == 1 ? static_cast<size_t>(s) * c + k : static_cast<size_t>(k) * c + s; };
        for (int s = 0; s < slices; ++s) {
            double gy = 0.0;
            for (int k = 0; k < len; ++k) gy += g.data[idx(s, k)] * y2.data[idx(s, k)];
            for (int k = 0; k < len; ++k) ga.data[idx(s, k)] += y2.data[idx(s, k)] * (g.data[idx(s, k)] - gy);
        }
    });
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

// axis 0 concatenates vectors end-to-end or stacks matrix rows; axis 1
// concatenates matrix columns.
inline Val concat(Tape& t, const std::vector<Val>& xs, int axis = 0) {
    if (xs.empty()) throw ContractError("concat: no inputs");
    const Tensor& first = t.value(xs[0]);
    if (first.rank() == 1 || (first.rank() == 2 && axis == 0)) {
        if (first.rank() == 2) {
            const int c = first.shape[1];
            int n = 0;
            for (Val v : xs) {
                const Tensor& tv = t.value(v);
                if (tv.rank() != 2 || tv.shape[1] != c)
                    throw DimensionError("concat: row stack needs matching columns, got " + shape_str(tv.shape) +
                                         " vs " + shape_str(first.shape));
                n += tv.shape[0];
            }
            Tensor y({n, c});
            size_t off = 0;
            for (Val v : xs) {
                const Tensor& tv = t.value(v);
                std::copy(tv.data.begin(), tv.data.end(), y.data.begin() + off);
                off += tv.data.size();
            }
            auto parts = xs;
            return t.emit(std::move(y), [parts](Tape& tp, int self) {
                const Tensor& g = tp.grad_buffer(Val{self});
                size_t off2 = 0;
                for (Val v : parts) {
                    Tensor& gv = tp.grad_buffer(v);
                    for (size_t i = 0; i < gv.data.size(); ++i) gv.data[i] += g.data[off2 + i];
                    off2 += gv.data.size();
                }
            });
        }
        int n = 0;
        for (Val v : xs) {
            const Tensor& tv = t.value(v);
            if (tv.rank() != 1) throw DimensionError("concat: expected vectors, got " + shape_str(tv.shape));
            n += tv.shape[0];
        }
        Tensor y({n});
        size_t off = 0;
        for (Val v : xs) {
            const Tensor& tv = t.value(v);
            std::copy(tv.data.begin(), tv.data.end(), y.data.begin() + off);
            off += tv.data.size();
        }
        auto parts = xs;
        return t.emit(std::move(y), [parts](Tape& tp, int self) {
            const Tensor& g = tp.grad_buffer(Val{self});
            size_t off2 = 0;
            for (Val v : parts) {
                Tensor& gv = tp.grad_buffer(v);
                for (size_t i = 0; i < gv.data.size(); ++i) gv.data[i] += g.data[off2 + i];
                off2 += gv.data.size();
            }
        });
    }
    if (first.rank() == 2 && axis == 1) {
        const int n = first.shape[0];
        int ctot = 0;
        for (Val v : xs) {
            const Tensor& tv = t.value(v);
            if (tv.rank() != 2 || tv.shape[0] != n)
                throw DimensionError("concat: column concat needs matching rows, got " + shape_str(tv.shape) +
                                     " vs " + shape_str(first.shape));
            ctot += tv.shape[1];
        }
        Tensor y({n, ctot});
        for (int r = 0; r < n; ++r) {
            int co = 0;
            for (Val v : xs) {
                const Tensor& tv = t.value(v);
                for (int j = 0; j < tv.shape[1]; ++j) y.at(r, co + j) = tv.at(r, j);
                co += tv.shape[1];
            }
        }
        auto parts = xs;
        return t.emit(std::move(y), [parts, n](Tape& tp, int self) {
            const Tensor& g = tp.grad_buffer(Val{self});
            for (int r = 0; r < n; ++r) {
                int co = 0;
                for (Val v : parts) {
                    Tensor& gv = tp.grad_buffer(v);
                    const int w = gv.shape[1];
                    for (int j = 0; j < w; ++j) gv.at(r, j) += g.at(r, co + j);
                    co += w;
                }
            }
        });
    }
    throw DimensionError("concat: unsupported axis " + std::to_string(axis) + " for shape " + shape_str(first.shape));
}

inline std::vector<Val> split(Tape& t, Val x, const std::vector<int>& sizes, int axis = 0) {
    const Tensor& xv = t.value(x);
    int total = 0;
    for (int s : sizes) total += s;
    const int extent = xv.rank() == 1 ? xv.shape[0] : xv.shape[axis == 0 ? 0 : 1];
    if ((xv.rank() == 1 && axis != 0) || xv.rank() > 2)
        throw DimensionError("split: unsupported axis " + std::to_string(axis) + " for shape " + shape_str(xv.shape));
    if (total != extent)
        throw DimensionError("split: sizes sum to " + std::to_string(total) + " but axis extent is " +
                             std::to_string(extent) + " for shape " + shape_str(xv.shape));
    std::vector<Val> parts;
    int off = 0;
    for (int s : sizes) {
        const int begin = off;
        off += s;
        if (xv.rank() == 1) {
            Tensor y({s});
            for (int i = 0; i < s; ++i) y.at(i) = xv.at(begin + i);
            parts.push_back(t.emit(std::move(y), [x, begin, s](Tape& tp, int self) {
                const Tensor& g = tp.grad_buffer(Val{self});
                Tensor& gx = tp.grad_buffer(x);
                for (int i = 0; i < s; ++i) gx.at(begin + i) += g.at(i);
            }));
        } else if (axis == 0) {
            const int c = xv.shape[1];
            Tensor y({s, c});
            for (int i = 0; i < s; ++i)
                for (int j = 0; j < c; ++j) y.at(i, j) = xv.at(begin + i, j);
            parts.push_back(t.emit(std::move(y), [x, begin, s, c](Tape& tp, int self) {
                const Tensor& g = tp.grad_buffer(Val{self});
                Tensor& gx = tp.grad_buffer(x);
                for (int i = 0; i < s; ++i)
                    for (int j = 0; j < c; ++j) gx.at(begin + i, j) += g.at(i, j);
            }));
        } else {
            const int n = xv.shape[0];
            Tensor y({n, s});
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < s; ++j) y.at(i, j) = xv.at(i, begin + j);
            parts.push_back(t.emit(std::move(y), [x, begin, s, n](Tape& tp, int self) {
                const Tensor& g = tp.grad_buffer(Val{self});
                Tensor& gx = tp.grad_buffer(x);
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < s; ++j) gx.at(i, begin + j) += g.at(i, j);
            }));
        }
    }
    return parts;
}

inline Val row(Tape& t, Val X, int i) {
    const Tensor& xv = t.value(X);
    if (xv.rank() != 2 || i < 0 || i >= xv.shape[0])
        throw DimensionError("row: index " + std::to_string(i) + " out of range for shape " + shape_str(xv.shape));
    const int c = xv.shape[1];
    Tensor y({c});
    for (int j = 0; j < c; ++j) y.at(j) = xv.at(i, j);
    return t.emit(std::move(y), [X, i, c](Tape& tp, int self) {
        const Tensor& g = tp.grad_buffer(Val{self});
        Tensor& gx = tp.grad_buffer(X);
        for (int j = 0; j < c; ++j) gx.at(i, j) += g.at(j);
    });
}

inline Val stack_rows(Tape& t, const std::vector<Val>& rows_in) {
    if (rows_in.empty()) throw ContractError("stack_rows: no inputs");
    const int c = t.value(rows_in[0]).shape[0];
    for (Val v : rows_in) {
        const Tensor& tv = t.value(v);
        if (tv.rank() != 1 || tv.shape[0] != c)
            throw DimensionError("stack_rows: inconsistent row shape " + shape_str(tv.shape));
    }
    const int n = static_cast<int>(rows_in.size());
    Tensor y({n, c});
    for (int i = 0; i < n; ++i) {
        const Tensor& tv = t.value(rows_in[static_cast<size_t>(i)]);
        for (int j = 0; j < c; ++j) y.at(i, j) = tv.at(j);
    }
    auto parts = rows_in;
    return t.emit(std::move(y), [parts, c](Tape& tp, int self) {
        const Tensor& g = tp.grad_buffer(Val{self});
        for (size_t i = 0; i < parts.size(); ++i) {
            Tensor& gv = tp.grad_buffer(parts[i]);
            for (int j = 0; j < c; ++j) gv.at(j) += g.at(static_cast<int>(i), j);
        }
    });
}

// Zero rows appended up to new_rows.
inline Val pad_rows(Tape& t, Val x, int new_rows) {
    const Tensor& xv = t.value(x);
    if (xv.rank() != 2) throw DimensionError("pad_rows: needs a matrix, got " + shape_str(xv.shape));
    const int n = xv.shape[0], c = xv.shape[1];
    if (new_rows < n) throw DimensionError("pad_rows: target " + std::to_string(new_rows) + " < rows " + std::to_string(n));
    Tensor y({new_rows, c});
    std::copy(xv.data.begin(), xv.data.end(), y.data.begin());
    return t.emit(std::move(y), [x, n, c](Tape& tp, int self) {
        const Tensor& g = tp.grad_buffer(Val{self});
        Tensor& gx = tp.grad_buffer(x);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < c; ++j) gx.at(i, j) += g.at(i, j);
    });
}

inline Val slice_rows(Tape& t, Val x, int begin, int count) {
    const Tensor& xv = t.value(x);
    if (xv.rank() != 2 || begin < 0 || begin + count > xv.shape[0])
        throw DimensionError("slice_rows: [" + std::to_string(begin) + "," + std::to_string(begin + count) +
                             ") out of range for shape " + shape_str(xv.shape));
    const int c = xv.shape[1];
    Tensor y({count, c});
    for (int i = 0; i < count; ++i)
        for (int j = 0; j < c; ++j) y.at(i, j) = xv.at(begin + i, j);
    return t.emit(std::move(y), [x, begin, count, c](Tape& tp, int self) {
        const Tensor& g = tp.grad_buffer(Val{self});
        Tensor& gx = tp.grad_buffer(x);
        for (int i = 0; i < count; ++i)
            for (int j = 0; j < c; ++j) gx.at(begin + i, j) += g.at(i, j);
    });
}

// ---------------------------------------------------------------------------
// 1-D convolution over the row axis (rows = sequence, columns = channels)
// ---------------------------------------------------------------------------

// x (L, IC), W (OC, IC, K), optional b (OC); zero padding.
inline Val conv1d(Tape& t, Val x, Val W, std::optional<Val> b, int stride, int pad) {
    const Tensor &xv = t.value(x), &Wv = t.value(W);
    if (xv.rank() != 2 || Wv.rank() != 3 || Wv.shape[1] != xv.shape[1])
        throw DimensionError("conv1d: x " + shape_str(xv.shape) + " vs W " + shape_str(Wv.shape));
    if (stride < 1) throw ContractError("conv1d: stride must be >= 1");
    const int L = xv.shape[0], IC = xv.shape[1], OC = Wv.shape[0], K = Wv.shape[2];
    const int Lout = (L + 2 * pad - K) / stride + 1;
    if (Lout < 1) throw DimensionError("conv1d: output length < 1 for input " + shape_str(xv.shape));
    if (b) {
        const Tensor& bv = t.value(*b);
        if (bv.rank() != 1 || bv.shape[0] != OC)
            throw DimensionError("conv1d: bias " + shape_str(bv.shape) + " vs W " + shape_str(Wv.shape));
    }
    Tensor y({Lout, OC});
    for (int i = 0; i < Lout; ++i) {
        for (int k = 0; k < K; ++k) {
            const int src = i * stride + k - pad;
            if (src < 0 || src >= L) continue;
            const double* xr = xv.data.data() + static_cast<size_t>(src) * IC;
            for (int oc = 0; oc < OC; ++oc) {
                const double* wr = Wv.data.data() + (static_cast<size_t>(oc) * IC) * K + k;
                double acc = 0.0;
                for (int ic = 0; ic < IC; ++ic) acc += xr[ic] * wr[static_cast<size_t>(ic) * K];
                y.at(i, oc) += acc;
            }
        }
    }
    if (b) {
        const Tensor& bv = t.value(*b);
        for (int i = 0; i < Lout; ++i)
            for (int oc = 0; oc < OC; ++oc) y.at(i, oc) += bv.at(oc);
    }
    Val bval = b.value_or(Val{-1});
    return t.emit(std::move(y), [x, W, bval, stride, pad, L, IC, OC, K, Lout](Tape& tp, int self) {
        const Tensor& g = tp.grad_buffer(Val{self});
        const Tensor &xv2 = tp.value(x), &Wv2 = tp.value(W);
        Tensor &gx = tp.grad_buffer(x), &gW = tp.grad_buffer(W);
        for (int i = 0; i < Lout; ++i) {
            for (int k = 0; k < K; ++k) {
                const int src = i * stride + k - pad;
                if (src < 0 || src >= L) continue;
                const double* xr = xv2.data.data() + static_cast<size_t>(src) * IC;
                double* gxr = gx.data.data() + static_cast<size_t>(src) * IC;
                for (int oc = 0; oc < OC; ++oc) {
                    const double go = g.at(i, oc);
                    if (go == 0.0) continue;
                    const double* wr = Wv2.data.data() + (static_cast<size_t>(oc) * IC) * K + k;
                    double* gwr = gW.data.data() + (static_cast<size_t>(oc) * IC) * K + k;
                    for (int ic = 0; ic < IC; ++ic) {
                        gxr[ic] += go * wr[static_cast<size_t>(ic) * K];
                        gwr[static_cast<size_t>(ic) * K] += go * xr[ic];
                    }
                }
            }
        }
        if (bval.id >= 0) {
            Tensor& gb = tp.grad_buffer(bval);
            for (int i = 0; i < Lout; ++i)
                for (int oc = 0; oc < OC; ++oc) gb.at(oc) += g.at(i, oc);
        }
    });
}

// Nearest-neighbour x2 along the row axis.
inline Val upsample2_rows(Tape& t, Val x) {
    const Tensor& xv = t.value(x);
    if (xv.rank() != 2) throw DimensionError("upsample2_rows: needs a matrix, got " + shape_str(xv.shape));
    const int n = xv.shape[0], c = xv.shape[1];
    Tensor y({2 * n, c});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < c; ++j) {
            y.at(2 * i, j) = xv.at(i, j);
            y.at(2 * i + 1, j) = xv.at(i, j);
        }
    return t.emit(std::move(y), [x, n, c](Tape& tp, int self) {
        const Tensor& g = tp.grad_buffer(Val{self});
        Tensor& gx = tp.grad_buffer(x);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < c; ++j) gx.at(i, j) += g.at(2 * i, j) + g.at(2 * i + 1, j);
    });
}

// Average of row pairs; row count must be even.
inline Val avgpool2_rows(Tape& t, Val x) {
    const Tensor& xv = t.value(x);
    if (xv.rank() != 2 || xv.shape[0] % 2 != 0)
        throw DimensionError("avgpool2_rows: needs an even-row matrix, got " + shape_str(xv.shape));
    const int n = xv.shape[0] / 2, c = xv.shape[1];
    Tensor y({n, c});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < c; ++j) y.at(i, j) = 0.5 * (xv.at(2 * i, j) + xv.at(2 * i + 1, j));
    return t.emit(std::move(y), [x, n, c](Tape& tp, int self) {
        const Tensor& g = tp.grad_buffer(Val{self});
        Tensor& gx = tp.grad_buffer(x);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < c; ++j) {
                gx.at(2 * i, j) += 0.5 * g.at(i, j);
                gx.at(2 * i + 1, j) += 0.5 * g.at(i, j);
            }
    });
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

struct GradCheckEntry {
    std::string name;
    double max_rel_err = 0.0;
    int checked = 0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double tolerance = 0.0;
    double max_rel_err = 0.0;
    bool pass = true;

    std::string summary() const {
        std::ostringstream os;
        os << (pass ? "pass" : "FAIL") << ", max_rel_err=" << max_rel_err << ", tol=" << tolerance;
        for (const auto& e : entries)
            if (e.max_rel_err > tolerance)
                os << "\n  " << e.name << ": " << e.max_rel_err << " (" << e.checked << " coords)";
        return os.str();
    }
};

// Central finite differences against the tape gradients of a deterministic
// scalar-producing forward function. With max_indices_per_param == 0 every
// coordinate is checked, otherwise a seeded sample per parameter.
inline GradCheckReport check_gradients(const std::function<Val(Tape&)>& build_loss, ParamRegistry& reg,
                                       double tolerance, double step = 1e-5, int max_indices_per_param = 0,
                                       uint64_t seed = 1234) {
    Tape tape;
    Val loss = build_loss(tape);
    backward(tape, loss, reg);
    std::vector<Tensor> analytic;
    analytic.reserve(reg.size());
    for (size_t p = 0; p < reg.size(); ++p) analytic.push_back(reg[p].grad);

    GradCheckReport report;
    report.tolerance = tolerance;
    Rng pick(seed);
    for (size_t p = 0; p < reg.size(); ++p) {
        Param& param = reg[p];
        const long n = param.value.numel();
        std::vector<int> indices;
        if (max_indices_per_param <= 0 || n <= max_indices_per_param) {
            indices.resize(static_cast<size_t>(n));
            std::iota(indices.begin(), indices.end(), 0);
        } else {
            indices = pick.sample_indices(static_cast<int>(n), max_indices_per_param);
        }
        GradCheckEntry entry;
        entry.name = param.name;
        entry.checked = static_cast<int>(indices.size());
        for (int i : indices) {
            const double orig = param.value.data[static_cast<size_t>(i)];
            param.value.data[static_cast<size_t>(i)] = orig + step;
            Tape tp;
            const double fp = tp.value(build_loss(tp)).item();
            param.value.data[static_cast<size_t>(i)] = orig - step;
            Tape tm;
            const double fm = tm.value(build_loss(tm)).item();
            param.value.data[static_cast<size_t>(i)] = orig;
            const double numeric = (fp - fm) / (2.0 * step);
            const double a = analytic[p].data[static_cast<size_t>(i)];
            // The 1e-6 denominator floor absorbs central-difference roundoff:
            // gradients below ~1e-6 cannot be resolved to 1e-3 relative by
            // double-precision differences of O(1)-magnitude losses.
            const double rel = std::abs(numeric - a) / std::max(1e-6, std::abs(numeric) + std::abs(a));
            entry.max_rel_err = std::max(entry.max_rel_err, rel);
        }
        report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
        if (entry.max_rel_err > tolerance) report.pass = false;
        report.entries.push_back(std::move(entry));
    }
    return report;
}

}  // namespace fskgc
