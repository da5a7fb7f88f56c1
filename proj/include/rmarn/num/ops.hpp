#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "rmarn/num/parallel.hpp"
#include "rmarn/num/rng.hpp"
#include "rmarn/num/var.hpp"

// Differentiable kernels. Each op validates shapes, computes the forward
// value, and registers a backward closure that adds into parent gradients.
// Kernels are plain loops; matmul and conv2d split rows across workers with
// every output element owned by exactly one worker, so results are identical
// for any RMARN_THREADS setting.

namespace rmarn::num {

namespace kernel {

// C = A(m×k) * B(k×n), overwriting C.
template <typename T>
void mm_nn(const TensorT<T>& a, const TensorT<T>& b, TensorT<T>& c) {
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    c.fill(T(0));
    auto row = [&](int64_t i) {
        const T* ap = a.data() + i * k;
        T* cp = c.data() + i * n;
        for (int64_t l = 0; l < k; ++l) {
            const T av = ap[l];
            const T* bp = b.data() + l * n;
            for (int64_t j = 0; j < n; ++j) cp[j] += av * bp[j];
        }
    };
    if (m * k * n >= 1 << 16) {
        parallel_for(m, row);
    } else {
        for (int64_t i = 0; i < m; ++i) row(i);
    }
}

// C += A(m×k) * B(n×k)^T
template <typename T>
void mm_nt_acc(const TensorT<T>& a, const TensorT<T>& b, TensorT<T>& c) {
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    for (int64_t i = 0; i < m; ++i) {
        const T* ap = a.data() + i * k;
        T* cp = c.data() + i * n;
        for (int64_t j = 0; j < n; ++j) {
            const T* bp = b.data() + j * k;
            T acc = T(0);
            for (int64_t l = 0; l < k; ++l) acc += ap[l] * bp[l];
            cp[j] += acc;
        }
    }
}

// C += A(k×m)^T * B(k×n)
template <typename T>
void mm_tn_acc(const TensorT<T>& a, const TensorT<T>& b, TensorT<T>& c) {
    const int64_t k = a.dim(0), m = a.dim(1), n = b.dim(1);
    for (int64_t i = 0; i < k; ++i) {
        const T* ap = a.data() + i * m;
        const T* bp = b.data() + i * n;
        for (int64_t l = 0; l < m; ++l) {
            const T av = ap[l];
            T* cp = c.data() + l * n;
            for (int64_t j = 0; j < n; ++j) cp[j] += av * bp[j];
        }
    }
}

}  // namespace kernel

template <typename T>
VarT<T> add(const VarT<T>& a, const VarT<T>& b) {
    require(a.value().same_shape(b.value()), ErrorKind::argument,
            "add: shape mismatch " + a.value().shape_str() + " vs " + b.value().shape_str());
    TensorT<T> out(a.value().shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] + b.value()[i];
    return VarT<T>::make(std::move(out), {a, b}, [](NodeT<T>& n) {
        if (n.parents[0]->requires_grad) n.parents[0]->accumulate(n.grad);
        if (n.parents[1]->requires_grad) n.parents[1]->accumulate(n.grad);
    });
}

template <typename T>
VarT<T> sub(const VarT<T>& a, const VarT<T>& b) {
    require(a.value().same_shape(b.value()), ErrorKind::argument,
            "sub: shape mismatch " + a.value().shape_str() + " vs " + b.value().shape_str());
    TensorT<T> out(a.value().shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] - b.value()[i];
    return VarT<T>::make(std::move(out), {a, b}, [](NodeT<T>& n) {
        if (n.parents[0]->requires_grad) n.parents[0]->accumulate(n.grad);
        if (n.parents[1]->requires_grad) {
            TensorT<T> g(n.grad.shape());
            for (int64_t i = 0; i < g.numel(); ++i) g[i] = -n.grad[i];
            n.parents[1]->accumulate(g);
        }
    });
}

template <typename T>
VarT<T> mul(const VarT<T>& a, const VarT<T>& b) {
    require(a.value().same_shape(b.value()), ErrorKind::argument,
            "mul: shape mismatch " + a.value().shape_str() + " vs " + b.value().shape_str());
    TensorT<T> out(a.value().shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * b.value()[i];
    return VarT<T>::make(std::move(out), {a, b}, [](NodeT<T>& n) {
        for (int side = 0; side < 2; ++side) {
            auto& self = n.parents[side];
            auto& other = n.parents[1 - side];
            if (!self->requires_grad) continue;
            TensorT<T> g(n.grad.shape());
            for (int64_t i = 0; i < g.numel(); ++i) g[i] = n.grad[i] * other->value[i];
            self->accumulate(g);
        }
    });
}

template <typename T>
VarT<T> scale(const VarT<T>& a, double c) {
    TensorT<T> out(a.value().shape());
    const T cv = static_cast<T>(c);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * cv;
    return VarT<T>::make(std::move(out), {a}, [cv](NodeT<T>& n) {
        if (!n.parents[0]->requires_grad) return;
        TensorT<T> g(n.grad.shape());
        for (int64_t i = 0; i < g.numel(); ++i) g[i] = n.grad[i] * cv;
        n.parents[0]->accumulate(g);
    });
}

// y = s * a with s a one-element variable (learnable scalar weight).
template <typename T>
VarT<T> mul_scalar(const VarT<T>& a, const VarT<T>& s) {
    require(s.value().numel() == 1, ErrorKind::argument, "mul_scalar: weight must be scalar");
    const T sv = s.value()[0];
    TensorT<T> out(a.value().shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * sv;
    return VarT<T>::make(std::move(out), {a, s}, [sv](NodeT<T>& n) {
        if (n.parents[0]->requires_grad) {
            TensorT<T> g(n.grad.shape());
            for (int64_t i = 0; i < g.numel(); ++i) g[i] = n.grad[i] * sv;
            n.parents[0]->accumulate(g);
        }
        if (n.parents[1]->requires_grad) {
            T acc = T(0);
            for (int64_t i = 0; i < n.grad.numel(); ++i) acc += n.grad[i] * n.parents[0]->value[i];
            n.parents[1]->accumulate(TensorT<T>::scalar(acc));
        }
    });
}

// m(s×d) + v(d) broadcast over rows.
template <typename T>
VarT<T> add_rowvec(const VarT<T>& m, const VarT<T>& v) {
    require(m.value().rank() == 2 && v.value().rank() == 1 && m.value().dim(1) == v.value().dim(0),
            ErrorKind::argument, "add_rowvec: width mismatch " + m.value().shape_str() + " vs " +
                                     v.value().shape_str());
    const int64_t s = m.value().dim(0), d = m.value().dim(1);
    TensorT<T> out(m.value().shape());
    for (int64_t i = 0; i < s; ++i)
        for (int64_t j = 0; j < d; ++j) out.at(i, j) = m.value().at(i, j) + v.value()[j];
    return VarT<T>::make(std::move(out), {m, v}, [s, d](NodeT<T>& n) {
        if (n.parents[0]->requires_grad) n.parents[0]->accumulate(n.grad);
        if (n.parents[1]->requires_grad) {
            TensorT<T> g({d});
            for (int64_t i = 0; i < s; ++i)
                for (int64_t j = 0; j < d; ++j) g[j] += n.grad.at(i, j);
            n.parents[1]->accumulate(g);
        }
    });
}

// m(k×n) + v(k) broadcast over columns (per-channel bias on flattened maps).
template <typename T>
VarT<T> add_colvec(const VarT<T>& m, const VarT<T>& v) {
    require(m.value().rank() == 2 && v.value().rank() == 1 && m.value().dim(0) == v.value().dim(0),
            ErrorKind::argument, "add_colvec: height mismatch " + m.value().shape_str() + " vs " +
                                     v.value().shape_str());
    const int64_t k = m.value().dim(0), nw = m.value().dim(1);
    TensorT<T> out(m.value().shape());
    for (int64_t i = 0; i < k; ++i)
        for (int64_t j = 0; j < nw; ++j) out.at(i, j) = m.value().at(i, j) + v.value()[i];
    return VarT<T>::make(std::move(out), {m, v}, [k, nw](NodeT<T>& n) {
        if (n.parents[0]->requires_grad) n.parents[0]->accumulate(n.grad);
        if (n.parents[1]->requires_grad) {
            TensorT<T> g({k});
            for (int64_t i = 0; i < k; ++i)
                for (int64_t j = 0; j < nw; ++j) g[i] += n.grad.at(i, j);
            n.parents[1]->accumulate(g);
        }
    });
}

template <typename T>
VarT<T> matmul(const VarT<T>& a, const VarT<T>& b) {
    require(a.value().rank() == 2 && b.value().rank() == 2, ErrorKind::argument,
            "matmul: expects matrices");
    require(a.value().dim(1) == b.value().dim(0), ErrorKind::argument,
            "matmul: inner dimension mismatch " + a.value().shape_str() + " vs " +
                b.value().shape_str());
    TensorT<T> out({a.value().dim(0), b.value().dim(1)});
    kernel::mm_nn(a.value(), b.value(), out);
    return VarT<T>::make(std::move(out), {a, b}, [](NodeT<T>& n) {
        const TensorT<T>& av = n.parents[0]->value;
        const TensorT<T>& bv = n.parents[1]->value;
        if (n.parents[0]->requires_grad) {
            TensorT<T> ga(av.shape());
            kernel::mm_nt_acc(n.grad, bv, ga);  // dA = G * B^T
            n.parents[0]->accumulate(ga);
        }
        if (n.parents[1]->requires_grad) {
            TensorT<T> gb(bv.shape());
            kernel::mm_tn_acc(av, n.grad, gb);  // dB = A^T * G
            n.parents[1]->accumulate(gb);
        }
    });
}

// C = A * B^T without materializing the transpose. The workhorse of the
// factorized similarity map: token projections and channel products are both
// row-by-row dot products.
template <typename T>
VarT<T> matmul_nt(const VarT<T>& a, const VarT<T>& b) {
    require(a.value().rank() == 2 && b.value().rank() == 2, ErrorKind::argument,
            "matmul_nt: expects matrices");
    require(a.value().dim(1) == b.value().dim(1), ErrorKind::argument,
            "matmul_nt: inner dimension mismatch " + a.value().shape_str() + " vs " +
                b.value().shape_str());
    TensorT<T> out({a.value().dim(0), b.value().dim(0)});
    kernel::mm_nt_acc(a.value(), b.value(), out);
    return VarT<T>::make(std::move(out), {a, b}, [](NodeT<T>& n) {
        const TensorT<T>& av = n.parents[0]->value;
        const TensorT<T>& bv = n.parents[1]->value;
        if (n.parents[0]->requires_grad) {
            TensorT<T> ga(av.shape());
            kernel::mm_nn(n.grad, bv, ga);  // dA = G * B
            n.parents[0]->accumulate(ga);
        }
        if (n.parents[1]->requires_grad) {
            TensorT<T> gb(bv.shape());
            kernel::mm_tn_acc(n.grad, av, gb);  // dB = G^T * A
            n.parents[1]->accumulate(gb);
        }
    });
}

template <typename T>
VarT<T> transpose(const VarT<T>& a) {
    require(a.value().rank() == 2, ErrorKind::argument, "transpose: expects a matrix");
    const int64_t r = a.value().dim(0), c = a.value().dim(1);
    TensorT<T> out({c, r});
    for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j) out.at(j, i) = a.value().at(i, j);
    return VarT<T>::make(std::move(out), {a}, [r, c](NodeT<T>& n) {
        if (!n.parents[0]->requires_grad) return;
        TensorT<T> g({r, c});
        for (int64_t i = 0; i < r; ++i)
            for (int64_t j = 0; j < c; ++j) g.at(i, j) = n.grad.at(j, i);
        n.parents[0]->accumulate(g);
    });
}

template <typename T>
VarT<T> reshape(const VarT<T>& a, std::vector<int64_t> shape) {
    TensorT<T> out = TensorT<T>::from(std::move(shape), a.value().vec());
    require(out.numel() == a.value().numel(), ErrorKind::argument, "reshape: element count changed");
    return VarT<T>::make(std::move(out), {a}, [](NodeT<T>& n) {
        if (!n.parents[0]->requires_grad) return;
        n.parents[0]->accumulate(TensorT<T>::from(n.parents[0]->value.shape(), n.grad.vec()));
    });
}

template <typename T>
VarT<T> slice_cols(const VarT<T>& a, int64_t c0, int64_t c1) {
    require(a.value().rank() == 2, ErrorKind::argument, "slice_cols: expects a matrix");
    const int64_t s = a.value().dim(0), d = a.value().dim(1);
    require(0 <= c0 && c0 < c1 && c1 <= d, ErrorKind::argument, "slice_cols: column range out of bounds");
    TensorT<T> out({s, c1 - c0});
    for (int64_t i = 0; i < s; ++i)
        for (int64_t j = c0; j < c1; ++j) out.at(i, j - c0) = a.value().at(i, j);
    return VarT<T>::make(std::move(out), {a}, [s, d, c0, c1](NodeT<T>& n) {
        if (!n.parents[0]->requires_grad) return;
        TensorT<T> g({s, d});
        for (int64_t i = 0; i < s; ++i)
            for (int64_t j = c0; j < c1; ++j) g.at(i, j) = n.grad.at(i, j - c0);
        n.parents[0]->accumulate(g);
    });
}

template <typename T>
VarT<T> concat_cols(const std::vector<VarT<T>>& parts) {
    require(!parts.empty(), ErrorKind::argument, "concat_cols: empty input");
    const int64_t s = parts[0].value().dim(0);
    int64_t d = 0;
    for (const auto& p : parts) {
        require(p.value().rank() == 2 && p.value().dim(0) == s, ErrorKind::argument,
                "concat_cols: row mismatch");
        d += p.value().dim(1);
    }
    TensorT<T> out({s, d});
    int64_t off = 0;
    std::vector<int64_t> widths;
    for (const auto& p : parts) {
        const int64_t w = p.value().dim(1);
        widths.push_back(w);
        for (int64_t i = 0; i < s; ++i)
            for (int64_t j = 0; j < w; ++j) out.at(i, off + j) = p.value().at(i, j);
        off += w;
    }
    return VarT<T>::make(std::move(out), parts, [s, widths](NodeT<T>& n) {
        int64_t off = 0;
        for (size_t p = 0; p < n.parents.size(); ++p) {
            const int64_t w = widths[p];
            if (n.parents[p]->requires_grad) {
                TensorT<T> g({s, w});
                for (int64_t i = 0; i < s; ++i)
                    for (int64_t j = 0; j < w; ++j) g.at(i, j) = n.grad.at(i, off + j);
                n.parents[p]->accumulate(g);
            }
            off += w;
        }
    });
}

// Stack row vectors (each shape {d}) into a {n×d} matrix.
template <typename T>
VarT<T> stack_rows(const std::vector<VarT<T>>& rows) {
    require(!rows.empty(), ErrorKind::argument, "stack_rows: empty input");
    const int64_t d = rows[0].value().numel();
    TensorT<T> out({static_cast<int64_t>(rows.size()), d});
    for (size_t i = 0; i < rows.size(); ++i) {
        require(rows[i].value().numel() == d, ErrorKind::argument, "stack_rows: width mismatch");
        for (int64_t j = 0; j < d; ++j) out.at(static_cast<int64_t>(i), j) = rows[i].value()[j];
    }
    return VarT<T>::make(std::move(out), rows, [d](NodeT<T>& n) {
        for (size_t i = 0; i < n.parents.size(); ++i) {
            if (!n.parents[i]->requires_grad) continue;
            TensorT<T> g(n.parents[i]->value.shape());
            for (int64_t j = 0; j < d; ++j) g[j] = n.grad.at(static_cast<int64_t>(i), j);
            n.parents[i]->accumulate(g);
        }
    });
}

// Row-wise numerically stabilized softmax.
template <typename T>
VarT<T> row_softmax(const VarT<T>& x) {
    require(x.value().rank() == 2, ErrorKind::argument, "row_softmax: expects a matrix");
    const int64_t s = x.value().dim(0), d = x.value().dim(1);
    TensorT<T> out({s, d});
    for (int64_t i = 0; i < s; ++i) {
        T mx = x.value().at(i, 0);
        for (int64_t j = 1; j < d; ++j) mx = std::max(mx, x.value().at(i, j));
        T sum = T(0);
        for (int64_t j = 0; j < d; ++j) {
            const T e = std::exp(x.value().at(i, j) - mx);
            out.at(i, j) = e;
            sum += e;
        }
        for (int64_t j = 0; j < d; ++j) out.at(i, j) /= sum;
    }
    return VarT<T>::make(std::move(out), {x}, [s, d](NodeT<T>& n) {
        if (!n.parents[0]->requires_grad) return;
        TensorT<T> g({s, d});
        for (int64_t i = 0; i < s; ++i) {
            T dot = T(0);
            for (int64_t j = 0; j < d; ++j) dot += n.value.at(i, j) * n.grad.at(i, j);
            for (int64_t j = 0; j < d; ++j)
                g.at(i, j) = n.value.at(i, j) * (n.grad.at(i, j) - dot);
        }
        n.parents[0]->accumulate(g);
    });
}

template <typename T>
VarT<T> row_log_softmax(const VarT<T>& x) {
    require(x.value().rank() == 2, ErrorKind::argument, "row_log_softmax: expects a matrix");
    const int64_t s = x.value().dim(0), d = x.value().dim(1);
    TensorT<T> out({s, d});
    for (int64_t i = 0; i < s; ++i) {
        T mx = x.value().at(i, 0);
        for (int64_t j = 1; j < d; ++j) mx = std::max(mx, x.value().at(i, j));
        T sum = T(0);
        for (int64_t j = 0; j < d; ++j) sum += std::exp(x.value().at(i, j) - mx);
        const T lse = mx + std::log(sum);
        for (int64_t j = 0; j < d; ++j) out.at(i, j) = x.value().at(i, j) - lse;
    }
    return VarT<T>::make(std::move(out), {x}, [s, d](NodeT<T>& n) {
        if (!n.parents[0]->requires_grad) return;
        TensorT<T> g({s, d});
        for (int64_t i = 0; i < s; ++i) {
            T gsum = T(0);
            for (int64_t j = 0; j < d; ++j) gsum += n.grad.at(i, j);
            for (int64_t j = 0; j < d; ++j)
                g.at(i, j) = n.grad.at(i, j) - std::exp(n.value.at(i, j)) * gsum;
        }
        n.parents[0]->accumulate(g);
    });
}

// Row-wise layer normalization with affine output: y = gain .* xhat + bias.
template <typename T>
VarT<T> layer_norm(const VarT<T>& x, const VarT<T>& gain, const VarT<T>& bias, double eps) {
    require(x.value().rank() == 2, ErrorKind::argument, "layer_norm: expects a matrix");
    const int64_t s = x.value().dim(0), d = x.value().dim(1);
    require(gain.value().numel() == d && bias.value().numel() == d, ErrorKind::argument,
            "layer_norm: gain/bias length must equal feature width");
    TensorT<T> hat({s, d});
    TensorT<T> inv({s});
    TensorT<T> out({s, d});
    for (int64_t i = 0; i < s; ++i) {
        T mean = T(0);
        for (int64_t j = 0; j < d; ++j) mean += x.value().at(i, j);
        mean /= static_cast<T>(d);
        T var = T(0);
        for (int64_t j = 0; j < d; ++j) {
            const T c = x.value().at(i, j) - mean;
            var += c * c;
        }
        var /= static_cast<T>(d);
        const T iv = T(1) / std::sqrt(var + static_cast<T>(eps));
        inv[i] = iv;
        for (int64_t j = 0; j < d; ++j) {
            hat.at(i, j) = (x.value().at(i, j) - mean) * iv;
            out.at(i, j) = hat.at(i, j) * gain.value()[j] + bias.value()[j];
        }
    }
    return VarT<T>::make(std::move(out), {x, gain, bias},
                         [s, d, hat = std::move(hat), inv = std::move(inv)](NodeT<T>& n) {
        const TensorT<T>& gv = n.parents[1]->value;
        if (n.parents[0]->requires_grad) {
            TensorT<T> g({s, d});
            for (int64_t i = 0; i < s; ++i) {
                T m1 = T(0), m2 = T(0);
                for (int64_t j = 0; j < d; ++j) {
                    const T q = n.grad.at(i, j) * gv[j];
                    m1 += q;
                    m2 += q * hat.at(i, j);
                }
                m1 /= static_cast<T>(d);
                m2 /= static_cast<T>(d);
                for (int64_t j = 0; j < d; ++j) {
                    const T q = n.grad.at(i, j) * gv[j];
                    g.at(i, j) = (q - m1 - hat.at(i, j) * m2) * inv[i];
                }
            }
            n.parents[0]->accumulate(g);
        }
        if (n.parents[1]->requires_grad) {
            TensorT<T> g({d});
            for (int64_t i = 0; i < s; ++i)
                for (int64_t j = 0; j < d; ++j) g[j] += n.grad.at(i, j) * hat.at(i, j);
            n.parents[1]->accumulate(g);
        }
        if (n.parents[2]->requires_grad) {
            TensorT<T> g({d});
            for (int64_t i = 0; i < s; ++i)
                for (int64_t j = 0; j < d; ++j) g[j] += n.grad.at(i, j);
            n.parents[2]->accumulate(g);
        }
    });
}

namespace detail {
inline constexpr double kSqrt2OverPi = 0.7978845608028653558798921198687;
}

// Tanh-form GELU with explicit scale parameters:
// y = eps * x * (1 + tanh(sqrt(2/pi) * (x + rho * x^3)))
template <typename T>
VarT<T> gelu(const VarT<T>& x, double eps, double rho) {
    constexpr double kC = detail::kSqrt2OverPi;
    TensorT<T> out(x.value().shape());
    for (int64_t i = 0; i < out.numel(); ++i) {
        const double v = static_cast<double>(x.value()[i]);
        out[i] = static_cast<T>(eps * v * (1.0 + std::tanh(kC * (v + rho * v * v * v))));
    }
    return VarT<T>::make(std::move(out), {x}, [eps, rho](NodeT<T>& n) {
        if (!n.parents[0]->requires_grad) return;
        constexpr double c = detail::kSqrt2OverPi;
        TensorT<T> g(n.grad.shape());
        for (int64_t i = 0; i < g.numel(); ++i) {
            const double v = static_cast<double>(n.parents[0]->value[i]);
            const double th = std::tanh(c * (v + rho * v * v * v));
            const double dy =
                eps * (1.0 + th) + eps * v * (1.0 - th * th) * c * (1.0 + 3.0 * rho * v * v);
            g[i] = static_cast<T>(static_cast<double>(n.grad[i]) * dy);
        }
        n.parents[0]->accumulate(g);
    });
}

template <typename T>
VarT<T> softplus(const VarT<T>& x) {
    TensorT<T> out(x.value().shape());
    for (int64_t i = 0; i < out.numel(); ++i) {
        const double v = static_cast<double>(x.value()[i]);
        out[i] = static_cast<T>(v > 30.0 ? v : std::log1p(std::exp(v)));
    }
    return VarT<T>::make(std::move(out), {x}, [](NodeT<T>& n) {
        if (!n.parents[0]->requires_grad) return;
        TensorT<T> g(n.grad.shape());
        for (int64_t i = 0; i < g.numel(); ++i) {
            const double v = static_cast<double>(n.parents[0]->value[i]);
            g[i] = static_cast<T>(static_cast<double>(n.grad[i]) / (1.0 + std::exp(-v)));
        }
        n.parents[0]->accumulate(g);
    });
}

// Plain scalar soft threshold (shrinkage).
template <typename T>
T soft_value(T x, T lam) {
    if (x > lam) return x - lam;
    if (x < -lam) return x + lam;
    return T(0);
}

// Elementwise soft threshold with a learnable scalar threshold. Subgradient 0
// is taken at the kinks |x| == lambda.
template <typename T>
VarT<T> soft_threshold(const VarT<T>& x, const VarT<T>& lam) {
    require(lam.value().numel() == 1, ErrorKind::argument, "soft_threshold: lambda must be scalar");
    const T lv = lam.value()[0];
    require(lv >= T(0), ErrorKind::argument, "soft_threshold: lambda must be nonnegative");
    TensorT<T> out(x.value().shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = soft_value(x.value()[i], lv);
    return VarT<T>::make(std::move(out), {x, lam}, [lv](NodeT<T>& n) {
        const TensorT<T>& xv = n.parents[0]->value;
        if (n.parents[0]->requires_grad) {
            TensorT<T> g(n.grad.shape());
            for (int64_t i = 0; i < g.numel(); ++i)
                g[i] = (xv[i] > lv || xv[i] < -lv) ? n.grad[i] : T(0);
            n.parents[0]->accumulate(g);
        }
        if (n.parents[1]->requires_grad) {
            T acc = T(0);
            for (int64_t i = 0; i < n.grad.numel(); ++i) {
                if (xv[i] > lv) acc -= n.grad[i];
                else if (xv[i] < -lv) acc += n.grad[i];
            }
            n.parents[1]->accumulate(TensorT<T>::scalar(acc));
        }
    });
}

template <typename T>
VarT<T> soft_threshold(const VarT<T>& x, double lam) {
    require(lam >= 0.0, ErrorKind::argument, "soft_threshold: lambda must be nonnegative");
    return soft_threshold(x, VarT<T>::scalar(static_cast<T>(lam)));
}

// Inverted dropout; identity when not training.
template <typename T>
VarT<T> dropout(const VarT<T>& x, double rate, Rng& rng, bool training) {
    require(rate >= 0.0 && rate < 1.0, ErrorKind::argument, "dropout: rate must be in [0, 1)");
    if (!training || rate == 0.0) return x;
    const T keep = static_cast<T>(1.0 - rate);
    TensorT<T> mask(x.value().shape());
    for (int64_t i = 0; i < mask.numel(); ++i)
        mask[i] = rng.uniform() < 1.0 - rate ? T(1) / keep : T(0);
    TensorT<T> out(x.value().shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = x.value()[i] * mask[i];
    return VarT<T>::make(std::move(out), {x}, [mask = std::move(mask)](NodeT<T>& n) {
        if (!n.parents[0]->requires_grad) return;
        TensorT<T> g(n.grad.shape());
        for (int64_t i = 0; i < g.numel(); ++i) g[i] = n.grad[i] * mask[i];
        n.parents[0]->accumulate(g);
    });
}

template <typename T>
VarT<T> sum_all(const VarT<T>& x) {
    T acc = T(0);
    for (int64_t i = 0; i < x.value().numel(); ++i) acc += x.value()[i];
    return VarT<T>::make(TensorT<T>::scalar(acc), {x}, [](NodeT<T>& n) {
        if (!n.parents[0]->requires_grad) return;
        TensorT<T> g(n.parents[0]->value.shape());
        for (int64_t i = 0; i < g.numel(); ++i) g[i] = n.grad[0];
        n.parents[0]->accumulate(g);
    });
}

template <typename T>
VarT<T> mean_all(const VarT<T>& x) {
    return scale(sum_all(x), 1.0 / static_cast<double>(x.value().numel()));
}

// Column means over rows: (s×d) -> (d). Token mean pooling.
template <typename T>
VarT<T> mean_rows(const VarT<T>& x) {
    require(x.value().rank() == 2, ErrorKind::argument, "mean_rows: expects a matrix");
    const int64_t s = x.value().dim(0), d = x.value().dim(1);
    TensorT<T> out({d});
    for (int64_t i = 0; i < s; ++i)
        for (int64_t j = 0; j < d; ++j) out[j] += x.value().at(i, j);
    for (int64_t j = 0; j < d; ++j) out[j] /= static_cast<T>(s);
    return VarT<T>::make(std::move(out), {x}, [s, d](NodeT<T>& n) {
        if (!n.parents[0]->requires_grad) return;
        TensorT<T> g({s, d});
        for (int64_t i = 0; i < s; ++i)
            for (int64_t j = 0; j < d; ++j) g.at(i, j) = n.grad[j] / static_cast<T>(s);
        n.parents[0]->accumulate(g);
    });
}

// Column-wise max over rows: (s×d) -> (d). Gradient routes to the first
// occurrence of the maximum, which keeps ties deterministic.
template <typename T>
VarT<T> max_rows(const VarT<T>& x) {
    require(x.value().rank() == 2, ErrorKind::argument, "max_rows: expects a matrix");
    const int64_t s = x.value().dim(0), d = x.value().dim(1);
    TensorT<T> out({d});
    std::vector<int64_t> arg(static_cast<size_t>(d), 0);
    for (int64_t j = 0; j < d; ++j) {
        T best = x.value().at(0, j);
        for (int64_t i = 1; i < s; ++i) {
            if (x.value().at(i, j) > best) {
                best = x.value().at(i, j);
                arg[static_cast<size_t>(j)] = i;
            }
        }
        out[j] = best;
    }
    return VarT<T>::make(std::move(out), {x}, [s, d, arg = std::move(arg)](NodeT<T>& n) {
        if (!n.parents[0]->requires_grad) return;
        TensorT<T> g({s, d});
        for (int64_t j = 0; j < d; ++j) g.at(arg[static_cast<size_t>(j)], j) = n.grad[j];
        n.parents[0]->accumulate(g);
    });
}

template <typename T>
VarT<T> diag(const VarT<T>& x) {
    require(x.value().rank() == 2 && x.value().dim(0) == x.value().dim(1), ErrorKind::argument,
            "diag: expects a square matrix");
    const int64_t b = x.value().dim(0);
    TensorT<T> out({b});
    for (int64_t i = 0; i < b; ++i) out[i] = x.value().at(i, i);
    return VarT<T>::make(std::move(out), {x}, [b](NodeT<T>& n) {
        if (!n.parents[0]->requires_grad) return;
        TensorT<T> g({b, b});
        for (int64_t i = 0; i < b; ++i) g.at(i, i) = n.grad[i];
        n.parents[0]->accumulate(g);
    });
}

// Normalize each row to unit L2 norm; all-zero rows pass through unchanged
// (their gradient is zero).
template <typename T>
VarT<T> row_l2_normalize(const VarT<T>& x) {
    require(x.value().rank() == 2, ErrorKind::argument, "row_l2_normalize: expects a matrix");
    const int64_t s = x.value().dim(0), d = x.value().dim(1);
    TensorT<T> out({s, d});
    TensorT<T> norms({s});
    for (int64_t i = 0; i < s; ++i) {
        T sq = T(0);
        for (int64_t j = 0; j < d; ++j) sq += x.value().at(i, j) * x.value().at(i, j);
        const T nrm = std::sqrt(sq);
        norms[i] = nrm;
        for (int64_t j = 0; j < d; ++j)
            out.at(i, j) = nrm > T(0) ? x.value().at(i, j) / nrm : T(0);
    }
    return VarT<T>::make(std::move(out), {x}, [s, d, norms = std::move(norms)](NodeT<T>& n) {
        if (!n.parents[0]->requires_grad) return;
        TensorT<T> g({s, d});
        for (int64_t i = 0; i < s; ++i) {
            if (norms[i] <= T(0)) continue;
            T dot = T(0);
            for (int64_t j = 0; j < d; ++j) dot += n.value.at(i, j) * n.grad.at(i, j);
            for (int64_t j = 0; j < d; ++j)
                g.at(i, j) = (n.grad.at(i, j) - n.value.at(i, j) * dot) / norms[i];
        }
        n.parents[0]->accumulate(g);
    });
}

// Cosine similarity of two vectors; defined as 0 when either norm vanishes.
// `zero_norm` (optional) reports that degenerate case to the caller.
template <typename T>
VarT<T> cosine(const VarT<T>& u, const VarT<T>& v, bool* zero_norm = nullptr) {
    require(u.value().numel() == v.value().numel(), ErrorKind::argument,
            "cosine: length mismatch");
    const int64_t d = u.value().numel();
    double dot = 0, nu = 0, nv = 0;
    for (int64_t i = 0; i < d; ++i) {
        dot += static_cast<double>(u.value()[i]) * v.value()[i];
        nu += static_cast<double>(u.value()[i]) * u.value()[i];
        nv += static_cast<double>(v.value()[i]) * v.value()[i];
    }
    nu = std::sqrt(nu);
    nv = std::sqrt(nv);
    const bool degenerate = nu == 0.0 || nv == 0.0;
    if (zero_norm) *zero_norm = degenerate;
    const double c = degenerate ? 0.0 : dot / (nu * nv);
    return VarT<T>::make(TensorT<T>::scalar(static_cast<T>(c)), {u, v},
                         [d, nu, nv, c, degenerate](NodeT<T>& n) {
        if (degenerate) return;
        const T go = n.grad[0];
        const TensorT<T>& uv = n.parents[0]->value;
        const TensorT<T>& vv = n.parents[1]->value;
        if (n.parents[0]->requires_grad) {
            TensorT<T> g({d});
            for (int64_t i = 0; i < d; ++i)
                g[i] = go * static_cast<T>(vv[i] / (nu * nv) - c * uv[i] / (nu * nu));
            n.parents[0]->accumulate(g);
        }
        if (n.parents[1]->requires_grad) {
            TensorT<T> g({d});
            for (int64_t i = 0; i < d; ++i)
                g[i] = go * static_cast<T>(uv[i] / (nu * nv) - c * vv[i] / (nv * nv));
            n.parents[1]->accumulate(g);
        }
    });
}

// 2-D cross-correlation. x: (c_in×h×w), kernels: (c_out×c_in×kh×kw),
// bias: (c_out). Stride 1 paths carry the training load and keep the inner
// loop contiguous over output columns.
template <typename T>
VarT<T> conv2d(const VarT<T>& x, const VarT<T>& w, const VarT<T>& b, int64_t pad_h, int64_t pad_w,
               int64_t stride_h = 1, int64_t stride_w = 1) {
    require(x.value().rank() == 3, ErrorKind::argument,
            "conv2d: input must have shape (channels, height, width), got " + x.value().shape_str());
    require(w.value().rank() == 4, ErrorKind::argument,
            "conv2d: kernels must have shape (out, in, kh, kw), got " + w.value().shape_str());
    const int64_t ci = x.value().dim(0), h = x.value().dim(1), wd = x.value().dim(2);
    const int64_t co = w.value().dim(0), kh = w.value().dim(2), kw = w.value().dim(3);
    require(w.value().dim(1) == ci, ErrorKind::argument,
            "conv2d: kernel input-channel axis is " + std::to_string(w.value().dim(1)) +
                " but input has " + std::to_string(ci) + " channels");
    require(b.value().numel() == co, ErrorKind::argument,
            "conv2d: bias axis is " + std::to_string(b.value().numel()) + " but kernels have " +
                std::to_string(co) + " output channels");
    require(stride_h >= 1 && stride_w >= 1 && pad_h >= 0 && pad_w >= 0, ErrorKind::argument,
            "conv2d: invalid stride/padding");
    require(h + 2 * pad_h >= kh, ErrorKind::config,
            "conv2d: kernel height " + std::to_string(kh) + " exceeds padded input height " +
                std::to_string(h + 2 * pad_h));
    require(wd + 2 * pad_w >= kw, ErrorKind::config,
            "conv2d: kernel width " + std::to_string(kw) + " exceeds padded input width " +
                std::to_string(wd + 2 * pad_w));
    const int64_t oh = (h + 2 * pad_h - kh) / stride_h + 1;
    const int64_t ow = (wd + 2 * pad_w - kw) / stride_w + 1;

    TensorT<T> out({co, oh, ow});
    const TensorT<T>& xv = x.value();
    const TensorT<T>& wv = w.value();
    for (int64_t o = 0; o < co; ++o) {
        for (int64_t i = 0; i < oh * ow; ++i) out.vec()[static_cast<size_t>(o * oh * ow + i)] = b.value()[o];
    }
    if (stride_h == 1 && stride_w == 1) {
        for (int64_t o = 0; o < co; ++o)
            for (int64_t c = 0; c < ci; ++c)
                for (int64_t r = 0; r < kh; ++r)
                    for (int64_t y = 0; y < oh; ++y) {
                        const int64_t iy = y + r - pad_h;
                        if (iy < 0 || iy >= h) continue;
                        T* orow = &out.at3(o, y, 0);
                        const T* xrow = &xv.at3(c, iy, 0);
                        for (int64_t q = 0; q < kw; ++q) {
                            const T kv = wv[((o * ci + c) * kh + r) * kw + q];
                            const int64_t x0 = std::max<int64_t>(0, pad_w - q);
                            const int64_t x1 = std::min<int64_t>(ow, wd + pad_w - q);
                            for (int64_t z = x0; z < x1; ++z) orow[z] += kv * xrow[z + q - pad_w];
                        }
                    }
    } else {
        for (int64_t o = 0; o < co; ++o)
            for (int64_t y = 0; y < oh; ++y)
                for (int64_t z = 0; z < ow; ++z) {
                    T acc = out.at3(o, y, z);
                    for (int64_t c = 0; c < ci; ++c)
                        for (int64_t r = 0; r < kh; ++r)
                            for (int64_t q = 0; q < kw; ++q) {
                                const int64_t iy = y * stride_h + r - pad_h;
                                const int64_t ix = z * stride_w + q - pad_w;
                                if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                                acc += xv.at3(c, iy, ix) * wv[((o * ci + c) * kh + r) * kw + q];
                            }
                    out.at3(o, y, z) = acc;
                }
    }
    return VarT<T>::make(
        std::move(out), {x, w, b},
        [ci, h, wd, co, kh, kw, pad_h, pad_w, stride_h, stride_w, oh, ow](NodeT<T>& n) {
            const TensorT<T>& xv = n.parents[0]->value;
            const TensorT<T>& wv = n.parents[1]->value;
            const TensorT<T>& g = n.grad;
            if (n.parents[2]->requires_grad) {
                TensorT<T> gb({co});
                for (int64_t o = 0; o < co; ++o) {
                    T acc = T(0);
                    for (int64_t i = 0; i < oh * ow; ++i) acc += g.vec()[static_cast<size_t>(o * oh * ow + i)];
                    gb[o] = acc;
                }
                n.parents[2]->accumulate(gb);
            }
            if (n.parents[1]->requires_grad) {
                TensorT<T> gw({co, ci, kh, kw});
                for (int64_t o = 0; o < co; ++o)
                    for (int64_t c = 0; c < ci; ++c)
                        for (int64_t r = 0; r < kh; ++r)
                            for (int64_t q = 0; q < kw; ++q) {
                                T acc = T(0);
                                for (int64_t y = 0; y < oh; ++y) {
                                    const int64_t iy = y * stride_h + r - pad_h;
                                    if (iy < 0 || iy >= h) continue;
                                    for (int64_t z = 0; z < ow; ++z) {
                                        const int64_t ix = z * stride_w + q - pad_w;
                                        if (ix < 0 || ix >= wd) continue;
                                        acc += g.at3(o, y, z) * xv.at3(c, iy, ix);
                                    }
                                }
                                gw[((o * ci + c) * kh + r) * kw + q] = acc;
                            }
                n.parents[1]->accumulate(gw);
            }
            if (n.parents[0]->requires_grad) {
                TensorT<T> gx({ci, h, wd});
                for (int64_t o = 0; o < co; ++o)
                    for (int64_t c = 0; c < ci; ++c)
                        for (int64_t r = 0; r < kh; ++r)
                            for (int64_t y = 0; y < oh; ++y) {
                                const int64_t iy = y * stride_h + r - pad_h;
                                if (iy < 0 || iy >= h) continue;
                                const T* grow = &g.at3(o, y, 0);
                                T* xrow = &gx.at3(c, iy, 0);
                                for (int64_t q = 0; q < kw; ++q) {
                                    const T kv = wv[((o * ci + c) * kh + r) * kw + q];
                                    if (stride_w == 1) {
                                        const int64_t z0 = std::max<int64_t>(0, pad_w - q);
                                        const int64_t z1 = std::min<int64_t>(ow, wd + pad_w - q);
                                        for (int64_t z = z0; z < z1; ++z)
                                            xrow[z + q - pad_w] += kv * grow[z];
                                    } else {
                                        for (int64_t z = 0; z < ow; ++z) {
                                            const int64_t ix = z * stride_w + q - pad_w;
                                            if (ix < 0 || ix >= wd) continue;
                                            xrow[ix] += kv * grow[z];
                                        }
                                    }
                                }
                            }
                n.parents[0]->accumulate(gx);
            }
        });
}

// Global average pool over spatial dims: (c×h×w) -> (c).
template <typename T>
VarT<T> global_avg_pool(const VarT<T>& x) {
    require(x.value().rank() == 3, ErrorKind::argument, "global_avg_pool: expects (c, h, w)");
    const int64_t c = x.value().dim(0), h = x.value().dim(1), w = x.value().dim(2);
    TensorT<T> out({c});
    for (int64_t o = 0; o < c; ++o) {
        T acc = T(0);
        for (int64_t i = 0; i < h * w; ++i) acc += x.value().vec()[static_cast<size_t>(o * h * w + i)];
        out[o] = acc / static_cast<T>(h * w);
    }
    return VarT<T>::make(std::move(out), {x}, [c, h, w](NodeT<T>& n) {
        if (!n.parents[0]->requires_grad) return;
        TensorT<T> g({c, h, w});
        for (int64_t o = 0; o < c; ++o) {
            const T v = n.grad[o] / static_cast<T>(h * w);
            for (int64_t i = 0; i < h * w; ++i) g.vec()[static_cast<size_t>(o * h * w + i)] = v;
        }
        n.parents[0]->accumulate(g);
    });
}

// Stack k same-shape matrices into a (k×s1×s2) map.
template <typename T>
VarT<T> stack_channels(const std::vector<VarT<T>>& mats) {
    require(!mats.empty(), ErrorKind::argument, "stack_channels: empty input");
    const int64_t s1 = mats[0].value().dim(0), s2 = mats[0].value().dim(1);
    TensorT<T> out({static_cast<int64_t>(mats.size()), s1, s2});
    for (size_t c = 0; c < mats.size(); ++c) {
        require(mats[c].value().rank() == 2 && mats[c].value().dim(0) == s1 &&
                    mats[c].value().dim(1) == s2,
                ErrorKind::argument, "stack_channels: shape mismatch");
        std::copy(mats[c].value().vec().begin(), mats[c].value().vec().end(),
                  out.vec().begin() + static_cast<int64_t>(c) * s1 * s2);
    }
    return VarT<T>::make(std::move(out), mats, [s1, s2](NodeT<T>& n) {
        for (size_t c = 0; c < n.parents.size(); ++c) {
            if (!n.parents[c]->requires_grad) continue;
            TensorT<T> g({s1, s2});
            std::copy(n.grad.vec().begin() + static_cast<int64_t>(c) * s1 * s2,
                      n.grad.vec().begin() + static_cast<int64_t>(c + 1) * s1 * s2, g.vec().begin());
            n.parents[c]->accumulate(g);
        }
    });
}

// Crop the leading (k×h×w) block out of a (k×H×W) table.
template <typename T>
VarT<T> crop3d(const VarT<T>& x, int64_t h, int64_t w) {
    require(x.value().rank() == 3, ErrorKind::argument, "crop3d: expects (k, H, W)");
    const int64_t k = x.value().dim(0), hh = x.value().dim(1), ww = x.value().dim(2);
    require(h <= hh && w <= ww, ErrorKind::config,
            "crop3d: requested " + std::to_string(h) + "x" + std::to_string(w) +
                " exceeds table capacity " + std::to_string(hh) + "x" + std::to_string(ww));
    TensorT<T> out({k, h, w});
    for (int64_t c = 0; c < k; ++c)
        for (int64_t i = 0; i < h; ++i)
            for (int64_t j = 0; j < w; ++j) out.at3(c, i, j) = x.value().at3(c, i, j);
    return VarT<T>::make(std::move(out), {x}, [k, h, w, hh, ww](NodeT<T>& n) {
        if (!n.parents[0]->requires_grad) return;
        TensorT<T> g({k, hh, ww});
        for (int64_t c = 0; c < k; ++c)
            for (int64_t i = 0; i < h; ++i)
                for (int64_t j = 0; j < w; ++j) g.at3(c, i, j) = n.grad.at3(c, i, j);
        n.parents[0]->accumulate(g);
    });
}

}  // namespace rmarn::num
