#pragma once

// Define-by-run reverse-mode autodiff on Tensor<T>. A Graph owns an
// append-only list of nodes; building an op records its inputs and a closure
// that scatters the node's gradient back into them. backward() walks node ids
// in decreasing order, so every node's gradient is complete before it is
// propagated. Values are never mutated by the backward pass.

#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "pwc/common.hpp"
#include "pwc/tensor.hpp"

namespace pwc {

template <typename T>
class Graph;

template <typename T>
struct Var {
    Graph<T>* g = nullptr;
    int id = -1;
    bool valid() const { return g != nullptr && id >= 0; }
};

template <typename T>
class Graph {
public:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;  // sized lazily at backward()
        bool requires_grad = false;
        std::vector<int> inputs;
        std::function<void(Graph&, int)> back;  // empty for leaves/constants
    };

    Var<T> leaf(Tensor<T> v, bool requires_grad = false) {
        check_finite(v, "leaf");
        Node n;
        n.value = std::move(v);
        n.requires_grad = requires_grad;
        return push(std::move(n));
    }

    Var<T> constant(Tensor<T> v) { return leaf(std::move(v), false); }

    const Tensor<T>& value(Var<T> v) const { return nodes_[v.id].value; }
    const Tensor<T>& grad(Var<T> v) const {
        if (!nodes_[v.id].requires_grad) throw std::logic_error("node has no gradient");
        return nodes_[v.id].grad;
    }
    std::size_t size() const { return nodes_.size(); }

    void backward(Var<T> loss) {
        Node& out = nodes_[loss.id];
        if (out.value.numel() != 1) throw std::invalid_argument("backward needs a scalar output");
        if (!out.requires_grad) throw std::invalid_argument("output does not require grad");
        for (auto& n : nodes_)
            if (n.requires_grad) n.grad = Tensor<T>(n.value.shape, T{0});
        out.grad.data[0] = T{1};
        for (int id = loss.id; id >= 0; --id) {
            Node& n = nodes_[id];
            if (n.requires_grad && n.back) n.back(*this, id);
        }
    }

    // ---- ops --------------------------------------------------------------

    Var<T> add(Var<T> a, Var<T> b) {
        const Tensor<T>&A = val(a), &B = val(b);
        if (A.numel() != 1 && B.numel() != 1 && !A.same_shape(B))
            throw std::invalid_argument("add: shape mismatch " + shape_str(A) + " vs " + shape_str(B));
        bool bs = B.numel() == 1 && A.numel() != 1;
        bool as = A.numel() == 1 && B.numel() != 1;
        Tensor<T> out = as ? B : A;
        if (as) {
            for (auto& v : out.data) v += A.data[0];
        } else if (bs) {
            for (auto& v : out.data) v += B.data[0];
        } else {
            for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += B.data[i];
        }
        return make(std::move(out), {a.id, b.id}, [as, bs](Graph& g, int id) {
            const Tensor<T>& G = g.nodes_[id].grad;
            if (Tensor<T>* da = g.grad_of(g.nodes_[id].inputs[0])) {
                if (as)
                    for (T gv : G.data) da->data[0] += gv;
                else
                    for (std::size_t i = 0; i < G.data.size(); ++i) da->data[i] += G.data[i];
            }
            if (Tensor<T>* db = g.grad_of(g.nodes_[id].inputs[1])) {
                if (bs)
                    for (T gv : G.data) db->data[0] += gv;
                else
                    for (std::size_t i = 0; i < G.data.size(); ++i) db->data[i] += G.data[i];
            }
        });
    }

    Var<T> mul(Var<T> a, Var<T> b) {
        const Tensor<T>&A = val(a), &B = val(b);
        if (A.numel() != 1 && B.numel() != 1 && !A.same_shape(B))
            throw std::invalid_argument("mul: shape mismatch");
        bool as = A.numel() == 1 && B.numel() != 1;
        bool bs = B.numel() == 1 && A.numel() != 1;
        Tensor<T> out = as ? B : A;
        if (as) {
            for (auto& v : out.data) v *= A.data[0];
        } else if (bs) {
            for (auto& v : out.data) v *= B.data[0];
        } else {
            for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= B.data[i];
        }
        return make(std::move(out), {a.id, b.id}, [as, bs](Graph& g, int id) {
            const Node& n = g.nodes_[id];
            const Tensor<T>& G = n.grad;
            const Tensor<T>& A2 = g.nodes_[n.inputs[0]].value;
            const Tensor<T>& B2 = g.nodes_[n.inputs[1]].value;
            if (Tensor<T>* da = g.grad_of(n.inputs[0])) {
                if (as)
                    for (std::size_t i = 0; i < G.data.size(); ++i) da->data[0] += G.data[i] * B2.data[i];
                else if (bs)
                    for (std::size_t i = 0; i < G.data.size(); ++i) da->data[i] += G.data[i] * B2.data[0];
                else
                    for (std::size_t i = 0; i < G.data.size(); ++i) da->data[i] += G.data[i] * B2.data[i];
            }
            if (Tensor<T>* db = g.grad_of(n.inputs[1])) {
                if (bs)
                    for (std::size_t i = 0; i < G.data.size(); ++i) db->data[0] += G.data[i] * A2.data[i];
                else if (as)
                    for (std::size_t i = 0; i < G.data.size(); ++i) db->data[i] += G.data[i] * A2.data[0];
                else
                    for (std::size_t i = 0; i < G.data.size(); ++i) db->data[i] += G.data[i] * A2.data[i];
            }
        });
    }

    Var<T> scale(Var<T> a, T c) {
        Tensor<T> out = val(a);
        for (auto& v : out.data) v *= c;
        return make(std::move(out), {a.id}, [c](Graph& g, int id) {
            const Tensor<T>& G = g.nodes_[id].grad;
            if (Tensor<T>* da = g.grad_of(g.nodes_[id].inputs[0]))
                for (std::size_t i = 0; i < G.data.size(); ++i) da->data[i] += c * G.data[i];
        });
    }

    Var<T> relu(Var<T> a) {
        Tensor<T> out = val(a);
        for (auto& v : out.data)
            if (v < T{0}) v = T{0};
        return make(std::move(out), {a.id}, [](Graph& g, int id) {
            const Node& n = g.nodes_[id];
            const Tensor<T>& G = n.grad;
            const Tensor<T>& X = g.nodes_[n.inputs[0]].value;
            if (Tensor<T>* da = g.grad_of(n.inputs[0]))
                for (std::size_t i = 0; i < G.data.size(); ++i)
                    if (X.data[i] > T{0}) da->data[i] += G.data[i];
        });
    }

    Var<T> sum(Var<T> a) {
        T s{0};
        for (T v : val(a).data) s += v;
        return make(Tensor<T>({1}, {s}), {a.id}, [](Graph& g, int id) {
            T gv = g.nodes_[id].grad.data[0];
            if (Tensor<T>* da = g.grad_of(g.nodes_[id].inputs[0]))
                for (auto& v : da->data) v += gv;
        });
    }

    // C = A * B for 2-D operands
    Var<T> matmul(Var<T> a, Var<T> b) {
        const Tensor<T>&A = val(a), &B = val(b);
        if (A.rank() != 2 || B.rank() != 2 || A.shape[1] != B.shape[0])
            throw std::invalid_argument("matmul: bad shapes " + shape_str(A) + " x " + shape_str(B));
        Tensor<T> out = matmul_raw(A, B);
        return make(std::move(out), {a.id, b.id}, [](Graph& g, int id) {
            const Node& n = g.nodes_[id];
            const Tensor<T>& G = n.grad;
            const Tensor<T>& A2 = g.nodes_[n.inputs[0]].value;
            const Tensor<T>& B2 = g.nodes_[n.inputs[1]].value;
            if (Tensor<T>* da = g.grad_of(n.inputs[0])) matmul_nt_acc(G, B2, *da);
            if (Tensor<T>* db = g.grad_of(n.inputs[1])) matmul_tn_acc(A2, G, *db);
        });
    }

    // C = K * X with a constant left factor; only X gets a gradient.
    Var<T> matmul_const_left(const Tensor<T>& K, Var<T> x) {
        Var<T> k = constant(K);
        return matmul(k, x);
    }

    Var<T> transpose(Var<T> a) {
        const Tensor<T>& A = val(a);
        if (A.rank() != 2) throw std::invalid_argument("transpose: rank must be 2");
        int r = A.shape[0], c = A.shape[1];
        Tensor<T> out({c, r});
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) out.at(j, i) = A.at(i, j);
        return make(std::move(out), {a.id}, [r, c](Graph& g, int id) {
            const Tensor<T>& G = g.nodes_[id].grad;
            if (Tensor<T>* da = g.grad_of(g.nodes_[id].inputs[0]))
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < c; ++j) da->at(i, j) += G.at(j, i);
        });
    }

    Var<T> reshape(Var<T> a, std::vector<int> shape) {
        const Tensor<T>& A = val(a);
        if (Tensor<T>::numel_of(shape) != A.numel())
            throw std::invalid_argument("reshape: element count mismatch");
        Tensor<T> out(std::move(shape), A.data);
        return make(std::move(out), {a.id}, [](Graph& g, int id) {
            const Tensor<T>& G = g.nodes_[id].grad;
            if (Tensor<T>* da = g.grad_of(g.nodes_[id].inputs[0]))
                for (std::size_t i = 0; i < G.data.size(); ++i) da->data[i] += G.data[i];
        });
    }

    // Per-column softmax of x/temperature, stabilized by max subtraction.
    Var<T> softmax_columns(Var<T> a, T temperature) {
        const Tensor<T>& A = val(a);
        if (A.rank() != 2) throw std::invalid_argument("softmax_columns: rank must be 2");
        if (!(temperature > T{0})) throw std::invalid_argument("softmax temperature must be positive");
        int r = A.shape[0], c = A.shape[1];
        T inv = T{1} / temperature;
        Tensor<T> out({r, c});
        for (int j = 0; j < c; ++j) {
            T m = A.at(0, j) * inv;
            for (int i = 1; i < r; ++i) m = std::max(m, A.at(i, j) * inv);
            T z{0};
            for (int i = 0; i < r; ++i) {
                T e = std::exp(A.at(i, j) * inv - m);
                out.at(i, j) = e;
                z += e;
            }
            for (int i = 0; i < r; ++i) out.at(i, j) /= z;
        }
        return make(std::move(out), {a.id}, [r, c, inv](Graph& g, int id) {
            const Node& n = g.nodes_[id];
            const Tensor<T>& G = n.grad;
            const Tensor<T>& Y = n.value;
            if (Tensor<T>* da = g.grad_of(n.inputs[0])) {
                for (int j = 0; j < c; ++j) {
                    T dot{0};
                    for (int i = 0; i < r; ++i) dot += G.at(i, j) * Y.at(i, j);
                    for (int i = 0; i < r; ++i)
                        da->at(i, j) += Y.at(i, j) * (G.at(i, j) - dot) * inv;
                }
            }
        });
    }

    // L2-normalizes each column: y(:,j) = x(:,j) / sqrt(|x(:,j)|^2 + eps)
    Var<T> l2_normalize_columns(Var<T> a, T eps) {
        const Tensor<T>& A = val(a);
        if (A.rank() != 2) throw std::invalid_argument("l2_normalize_columns: rank must be 2");
        int r = A.shape[0], c = A.shape[1];
        Tensor<T> out({r, c});
        std::vector<T> norms(c);
        for (int j = 0; j < c; ++j) {
            T s{0};
            for (int i = 0; i < r; ++i) s += A.at(i, j) * A.at(i, j);
            T n = std::sqrt(s + eps);
            norms[j] = n;
            for (int i = 0; i < r; ++i) out.at(i, j) = A.at(i, j) / n;
        }
        return make(std::move(out), {a.id}, [r, c, norms](Graph& g, int id) {
            const Node& n = g.nodes_[id];
            const Tensor<T>& G = n.grad;
            const Tensor<T>& X = g.nodes_[n.inputs[0]].value;
            if (Tensor<T>* da = g.grad_of(n.inputs[0])) {
                for (int j = 0; j < c; ++j) {
                    T nj = norms[j], dot{0};
                    for (int i = 0; i < r; ++i) dot += G.at(i, j) * X.at(i, j);
                    T n3 = nj * nj * nj;
                    for (int i = 0; i < r; ++i)
                        da->at(i, j) += G.at(i, j) / nj - X.at(i, j) * dot / n3;
                }
            }
        });
    }

    // 3x3 convolution over x [cin,h,w] with kernel [cout,cin,3,3], zero
    // padding 1, output [cout, ceil(h/stride), ceil(w/stride)].
    Var<T> conv2d_3x3(Var<T> x, Var<T> k, int stride) {
        const Tensor<T>&X = val(x), &K = val(k);
        if (X.rank() != 3 || K.rank() != 4 || K.shape[2] != 3 || K.shape[3] != 3)
            throw std::invalid_argument("conv2d_3x3: bad operand shapes");
        if (K.shape[1] != X.shape[0]) throw std::invalid_argument("conv2d_3x3: channel mismatch");
        if (stride != 1 && stride != 2) throw std::invalid_argument("conv2d_3x3: stride must be 1 or 2");
        int cin = X.shape[0], h = X.shape[1], w = X.shape[2], cout = K.shape[0];
        int oh = (h + stride - 1) / stride, ow = (w + stride - 1) / stride;
        Tensor<T> out({cout, oh, ow});
        conv_fwd(X, K, out, stride);
        return make(std::move(out), {x.id, k.id}, [stride](Graph& g, int id) {
            const Node& n = g.nodes_[id];
            const Tensor<T>& G = n.grad;
            const Tensor<T>& X2 = g.nodes_[n.inputs[0]].value;
            const Tensor<T>& K2 = g.nodes_[n.inputs[1]].value;
            Tensor<T>* dx = g.grad_of(n.inputs[0]);
            Tensor<T>* dk = g.grad_of(n.inputs[1]);
            conv_bwd(X2, K2, G, dx, dk, stride);
        });
    }

    // Adds bias[c] to every spatial position of channel c.
    Var<T> add_channel_bias(Var<T> x, Var<T> b) {
        const Tensor<T>&X = val(x), &B = val(b);
        if (X.rank() != 3 || B.rank() != 1 || B.shape[0] != X.shape[0])
            throw std::invalid_argument("add_channel_bias: bad shapes");
        Tensor<T> out = X;
        int c = X.shape[0];
        std::size_t plane = out.numel() / c;
        for (int ch = 0; ch < c; ++ch)
            for (std::size_t i = 0; i < plane; ++i) out.data[ch * plane + i] += B.data[ch];
        return make(std::move(out), {x.id, b.id}, [c, plane](Graph& g, int id) {
            const Tensor<T>& G = g.nodes_[id].grad;
            if (Tensor<T>* dx = g.grad_of(g.nodes_[id].inputs[0]))
                for (std::size_t i = 0; i < G.data.size(); ++i) dx->data[i] += G.data[i];
            if (Tensor<T>* db = g.grad_of(g.nodes_[id].inputs[1]))
                for (int ch = 0; ch < c; ++ch)
                    for (std::size_t i = 0; i < plane; ++i) db->data[ch] += G.data[ch * plane + i];
        });
    }

    // Appends one row filled with the scalar z, giving [r+1, c].
    Var<T> append_fill_row(Var<T> x, Var<T> z) {
        const Tensor<T>&X = val(x), &Z = val(z);
        if (X.rank() != 2 || Z.numel() != 1) throw std::invalid_argument("append_fill_row: bad shapes");
        int r = X.shape[0], c = X.shape[1];
        Tensor<T> out({r + 1, c});
        std::copy(X.data.begin(), X.data.end(), out.data.begin());
        for (int j = 0; j < c; ++j) out.at(r, j) = Z.data[0];
        return make(std::move(out), {x.id, z.id}, [r, c](Graph& g, int id) {
            const Tensor<T>& G = g.nodes_[id].grad;
            if (Tensor<T>* dx = g.grad_of(g.nodes_[id].inputs[0]))
                for (std::size_t i = 0; i < dx->data.size(); ++i) dx->data[i] += G.data[i];
            if (Tensor<T>* dz = g.grad_of(g.nodes_[id].inputs[1]))
                for (int j = 0; j < c; ++j) dz->data[0] += G.at(r, j);
        });
    }

    // Appends one fixed column (no gradient flows into it), giving [r, c+1].
    Var<T> append_const_col(Var<T> x, const std::vector<T>& col) {
        const Tensor<T>& X = val(x);
        if (X.rank() != 2 || static_cast<int>(col.size()) != X.shape[0])
            throw std::invalid_argument("append_const_col: bad shapes");
        int r = X.shape[0], c = X.shape[1];
        Tensor<T> out({r, c + 1});
        for (int i = 0; i < r; ++i) {
            for (int j = 0; j < c; ++j) out.at(i, j) = X.at(i, j);
            out.at(i, c) = col[i];
        }
        return make(std::move(out), {x.id}, [r, c](Graph& g, int id) {
            const Tensor<T>& G = g.nodes_[id].grad;
            if (Tensor<T>* dx = g.grad_of(g.nodes_[id].inputs[0]))
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < c; ++j) dx->at(i, j) += G.at(i, j);
        });
    }

    // Weighted cross entropy against a fixed target distribution:
    //   L = sum_j w_j * sum_i -target(i,j) * log(clamp(pred(i,j)))
    // The clamp floor keeps the loss finite; inside the clamped region the
    // gradient is zero, matching the flat spots of the clamped function.
    Var<T> ce_with_target(Var<T> pred, const Tensor<T>& target, const std::vector<T>& col_weight) {
        const Tensor<T>& P = val(pred);
        if (!P.same_shape(target))
            throw std::invalid_argument("ce_with_target: shape mismatch");
        if (static_cast<int>(col_weight.size()) != P.shape[1])
            throw std::invalid_argument("ce_with_target: weight count mismatch");
        int r = P.shape[0], c = P.shape[1];
        const T lo = T{1e-12};
        T loss{0};
        for (int j = 0; j < c; ++j) {
            if (col_weight[j] == T{0}) continue;
            T acc{0};
            for (int i = 0; i < r; ++i) {
                T t = target.at(i, j);
                if (t == T{0}) continue;
                T p = std::min(std::max(P.at(i, j), lo), T{1});
                acc -= t * std::log(p);
            }
            loss += col_weight[j] * acc;
        }
        Tensor<T> tgt = target;
        std::vector<T> w = col_weight;
        return make(Tensor<T>({1}, {loss}), {pred.id},
                    [r, c, lo, tgt, w](Graph& g, int id) {
                        const Node& n = g.nodes_[id];
                        T gv = n.grad.data[0];
                        const Tensor<T>& P2 = g.nodes_[n.inputs[0]].value;
                        if (Tensor<T>* dp = g.grad_of(n.inputs[0])) {
                            for (int j = 0; j < c; ++j) {
                                if (w[j] == T{0}) continue;
                                for (int i = 0; i < r; ++i) {
                                    T t = tgt.at(i, j);
                                    if (t == T{0}) continue;
                                    T p = P2.at(i, j);
                                    if (p >= lo && p <= T{1})
                                        dp->at(i, j) -= gv * w[j] * t / p;
                                }
                            }
                        }
                    });
    }

    // Binary cross entropy pulling the last row of p toward q, averaged over
    // the first n_cols columns:
    //   L = mean_j -( q*log(r_j) + (1-q)*log(1-r_j) ),  r_j = p(last, j)
    Var<T> bce_last_row(Var<T> p, T q, int n_cols) {
        const Tensor<T>& P = val(p);
        if (P.rank() != 2) throw std::invalid_argument("bce_last_row: rank must be 2");
        if (n_cols <= 0 || n_cols > P.shape[1]) throw std::invalid_argument("bce_last_row: bad column count");
        int last = P.shape[0] - 1;
        const T lo = T{1e-12};
        T loss{0};
        for (int j = 0; j < n_cols; ++j) {
            T r = P.at(last, j);
            T a = std::min(std::max(r, lo), T{1});
            T b = std::min(std::max(T{1} - r, lo), T{1});
            loss -= q * std::log(a) + (T{1} - q) * std::log(b);
        }
        loss /= static_cast<T>(n_cols);
        return make(Tensor<T>({1}, {loss}), {p.id}, [last, q, n_cols, lo](Graph& g, int id) {
            const Node& n = g.nodes_[id];
            T gv = n.grad.data[0] / static_cast<T>(n_cols);
            const Tensor<T>& P2 = g.nodes_[n.inputs[0]].value;
            if (Tensor<T>* dp = g.grad_of(n.inputs[0])) {
                for (int j = 0; j < n_cols; ++j) {
                    T r = P2.at(last, j);
                    T d{0};
                    if (r >= lo && r <= T{1}) d -= q / r;
                    T s = T{1} - r;
                    if (s >= lo && s <= T{1}) d += (T{1} - q) / s;
                    dp->at(last, j) += gv * d;
                }
            }
        });
    }

    // Mean over the first n_cols columns of the column maximum; ties pick the
    // lowest row so the subgradient is deterministic.
    Var<T> col_max_mean(Var<T> x, int n_cols) {
        const Tensor<T>& X = val(x);
        if (X.rank() != 2) throw std::invalid_argument("col_max_mean: rank must be 2");
        if (n_cols <= 0 || n_cols > X.shape[1]) throw std::invalid_argument("col_max_mean: bad column count");
        int r = X.shape[0];
        T acc{0};
        std::vector<int> arg(n_cols, 0);
        for (int j = 0; j < n_cols; ++j) {
            int best = 0;
            for (int i = 1; i < r; ++i)
                if (X.at(i, j) > X.at(best, j)) best = i;
            arg[j] = best;
            acc += X.at(best, j);
        }
        acc /= static_cast<T>(n_cols);
        return make(Tensor<T>({1}, {acc}), {x.id}, [arg, n_cols](Graph& g, int id) {
            T gv = g.nodes_[id].grad.data[0] / static_cast<T>(n_cols);
            if (Tensor<T>* dx = g.grad_of(g.nodes_[id].inputs[0]))
                for (int j = 0; j < n_cols; ++j) dx->at(arg[j], j) += gv;
        });
    }

    // Mean over the first n_cols columns of the entropy -sum p log p, with the
    // log clamped below at 1e-12.
    Var<T> col_entropy_mean(Var<T> x, int n_cols) {
        const Tensor<T>& X = val(x);
        if (X.rank() != 2) throw std::invalid_argument("col_entropy_mean: rank must be 2");
        if (n_cols <= 0 || n_cols > X.shape[1]) throw std::invalid_argument("col_entropy_mean: bad column count");
        int r = X.shape[0];
        const T lo = T{1e-12};
        T acc{0};
        for (int j = 0; j < n_cols; ++j)
            for (int i = 0; i < r; ++i) {
                T p = X.at(i, j);
                acc -= p * std::log(std::min(std::max(p, lo), T{1}));
            }
        acc /= static_cast<T>(n_cols);
        return make(Tensor<T>({1}, {acc}), {x.id}, [r, n_cols, lo](Graph& g, int id) {
            const Node& n = g.nodes_[id];
            T gv = n.grad.data[0] / static_cast<T>(n_cols);
            const Tensor<T>& X2 = g.nodes_[n.inputs[0]].value;
            if (Tensor<T>* dx = g.grad_of(n.inputs[0])) {
                for (int j = 0; j < n_cols; ++j)
                    for (int i = 0; i < r; ++i) {
                        T p = X2.at(i, j);
                        if (p >= lo && p <= T{1})
                            dx->at(i, j) -= gv * (std::log(p) + T{1});
                        else if (p < lo)
                            dx->at(i, j) -= gv * std::log(lo);
                    }
            }
        });
    }

    // Weighted mean Euclidean distance between predicted 2-D points (columns
    // of xy [2, n]) and fixed targets: L = sum_j w_j * |xy(:,j) - t(:,j)|.
    Var<T> euclid_to_const(Var<T> xy, const Tensor<T>& targets, const std::vector<T>& w) {
        const Tensor<T>& X = val(xy);
        if (X.rank() != 2 || X.shape[0] != 2 || !X.same_shape(targets))
            throw std::invalid_argument("euclid_to_const: bad shapes");
        if (w.size() != static_cast<std::size_t>(X.shape[1]))
            throw std::invalid_argument("euclid_to_const: weight count mismatch");
        int n = X.shape[1];
        const T eps = T{1e-12};
        T loss{0};
        for (int j = 0; j < n; ++j) {
            T dx = X.at(0, j) - targets.at(0, j);
            T dy = X.at(1, j) - targets.at(1, j);
            loss += w[j] * std::sqrt(dx * dx + dy * dy + eps);
        }
        Tensor<T> tgt = targets;
        std::vector<T> wc = w;
        return make(Tensor<T>({1}, {loss}), {xy.id}, [n, eps, tgt, wc](Graph& g, int id) {
            const Node& nd = g.nodes_[id];
            T gv = nd.grad.data[0];
            const Tensor<T>& X2 = g.nodes_[nd.inputs[0]].value;
            if (Tensor<T>* dp = g.grad_of(nd.inputs[0])) {
                for (int j = 0; j < n; ++j) {
                    T dx = X2.at(0, j) - tgt.at(0, j);
                    T dy = X2.at(1, j) - tgt.at(1, j);
                    T d = std::sqrt(dx * dx + dy * dy + eps);
                    dp->at(0, j) += gv * wc[j] * dx / d;
                    dp->at(1, j) += gv * wc[j] * dy / d;
                }
            }
        });
    }

    // ---- raw matmul helpers (also used outside the graph) ------------------

    static Tensor<T> matmul_raw(const Tensor<T>& A, const Tensor<T>& B) {
        int m = A.shape[0], k = A.shape[1], n = B.shape[1];
        Tensor<T> C({m, n}, T{0});
        for (int i = 0; i < m; ++i) {
            const T* arow = &A.data[static_cast<std::size_t>(i) * k];
            T* crow = &C.data[static_cast<std::size_t>(i) * n];
            for (int p = 0; p < k; ++p) {
                T av = arow[p];
                if (av == T{0}) continue;
                const T* brow = &B.data[static_cast<std::size_t>(p) * n];
                for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
        return C;
    }

private:
    std::vector<Node> nodes_;

    const Tensor<T>& val(Var<T> v) const {
        if (v.g != this) throw std::logic_error("var belongs to a different graph");
        return nodes_[v.id].value;
    }

    Tensor<T>* grad_of(int id) {
        Node& n = nodes_[id];
        return n.requires_grad ? &n.grad : nullptr;
    }

    Var<T> push(Node n) {
        nodes_.push_back(std::move(n));
        return Var<T>{this, static_cast<int>(nodes_.size() - 1)};
    }

    Var<T> make(Tensor<T> value, std::vector<int> inputs, std::function<void(Graph&, int)> back) {
        check_finite(value, "op");
        Node n;
        n.value = std::move(value);
        n.inputs = std::move(inputs);
        for (int i : n.inputs)
            if (nodes_[i].requires_grad) n.requires_grad = true;
        if (n.requires_grad) n.back = std::move(back);
        return push(std::move(n));
    }

    static void check_finite(const Tensor<T>& t, const char* where) {
        if (!all_finite(t))
            throw std::runtime_error(std::string("non-finite value produced by ") + where);
    }

    // dA += G * B^T
    static void matmul_nt_acc(const Tensor<T>& G, const Tensor<T>& B, Tensor<T>& dA) {
        int m = G.shape[0], n = G.shape[1], k = B.shape[0];
        for (int i = 0; i < m; ++i) {
            const T* grow = &G.data[static_cast<std::size_t>(i) * n];
            T* arow = &dA.data[static_cast<std::size_t>(i) * k];
            for (int p = 0; p < k; ++p) {
                const T* brow = &B.data[static_cast<std::size_t>(p) * n];
                T acc{0};
                for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
                arow[p] += acc;
            }
        }
    }

    // dB += A^T * G
    static void matmul_tn_acc(const Tensor<T>& A, const Tensor<T>& G, Tensor<T>& dB) {
        int m = A.shape[0], k = A.shape[1], n = G.shape[1];
        for (int p = 0; p < m; ++p) {
            const T* arow = &A.data[static_cast<std::size_t>(p) * k];
            const T* grow = &G.data[static_cast<std::size_t>(p) * n];
            for (int i = 0; i < k; ++i) {
                T av = arow[i];
                if (av == T{0}) continue;
                T* brow = &dB.data[static_cast<std::size_t>(i) * n];
                for (int j = 0; j < n; ++j) brow[j] += av * grow[j];
            }
        }
    }

    static void conv_fwd(const Tensor<T>& X, const Tensor<T>& K, Tensor<T>& out, int stride) {
        int cin = X.shape[0], h = X.shape[1], w = X.shape[2];
        int cout = out.shape[0], oh = out.shape[1], ow = out.shape[2];
        for (int co = 0; co < cout; ++co)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    T acc{0};
                    for (int ci = 0; ci < cin; ++ci)
                        for (int ky = 0; ky < 3; ++ky) {
                            int iy = oy * stride + ky - 1;
                            if (iy < 0 || iy >= h) continue;
                            for (int kx = 0; kx < 3; ++kx) {
                                int ix = ox * stride + kx - 1;
                                if (ix < 0 || ix >= w) continue;
                                acc += X.at(ci, iy, ix) * K.at(co, ci, ky, kx);
                            }
                        }
                    out.at(co, oy, ox) = acc;
                }
    }

    static void conv_bwd(const Tensor<T>& X, const Tensor<T>& K, const Tensor<T>& G,
                         Tensor<T>* dX, Tensor<T>* dK, int stride) {
        int cin = X.shape[0], h = X.shape[1], w = X.shape[2];
        int cout = G.shape[0], oh = G.shape[1], ow = G.shape[2];
        for (int co = 0; co < cout; ++co)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    T gv = G.at(co, oy, ox);
                    if (gv == T{0}) continue;
                    for (int ci = 0; ci < cin; ++ci)
                        for (int ky = 0; ky < 3; ++ky) {
                            int iy = oy * stride + ky - 1;
                            if (iy < 0 || iy >= h) continue;
                            for (int kx = 0; kx < 3; ++kx) {
                                int ix = ox * stride + kx - 1;
                                if (ix < 0 || ix >= w) continue;
                                if (dX) dX->at(ci, iy, ix) += gv * K.at(co, ci, ky, kx);
                                if (dK) dK->at(co, ci, ky, kx) += gv * X.at(ci, iy, ix);
                            }
                        }
                }
    }
};

// ---- finite-difference gradient check --------------------------------------

struct GradCheckResult {
    double max_err = 0.0;
    std::size_t entries = 0;
};

// build(graph, vars) must assemble a scalar loss from leaves created for
// `params`. Analytic gradients are compared against central differences;
// the reported error is |a - f| / max(|a|, |f|, 1e-8).
template <typename T, typename Builder>
GradCheckResult gradcheck(Builder&& build, const std::vector<Tensor<T>>& params, T step = T(1e-3)) {
    auto eval = [&](const std::vector<Tensor<T>>& p, bool with_grad,
                    std::vector<Tensor<T>>* grads_out) -> T {
        Graph<T> g;
        std::vector<Var<T>> vars;
        vars.reserve(p.size());
        for (const auto& t : p) vars.push_back(g.leaf(t, with_grad));
        Var<T> loss = build(g, vars);
        if (g.value(loss).numel() != 1) throw std::logic_error("gradcheck: loss must be scalar");
        if (with_grad) {
            g.backward(loss);
            grads_out->clear();
            for (auto v : vars) grads_out->push_back(g.grad(v));
        }
        return g.value(loss).data[0];
    };

    std::vector<Tensor<T>> analytic;
    eval(params, true, &analytic);

    std::vector<std::pair<std::size_t, std::size_t>> slots;
    for (std::size_t p = 0; p < params.size(); ++p)
        for (std::size_t e = 0; e < params[p].numel(); ++e) slots.emplace_back(p, e);

    std::vector<double> errs(slots.size(), 0.0);
    parallel_for(slots.size(), [&](std::size_t s) {
        auto [p, e] = slots[s];
        std::vector<Tensor<T>> probe = params;
        probe[p].data[e] = params[p].data[e] + step;
        T hi = eval(probe, false, nullptr);
        probe[p].data[e] = params[p].data[e] - step;
        T lo = eval(probe, false, nullptr);
        double fd = (static_cast<double>(hi) - static_cast<double>(lo)) / (2.0 * static_cast<double>(step));
        double an = static_cast<double>(analytic[p].data[e]);
        double denom = std::max({std::abs(an), std::abs(fd), 1e-8});
        errs[s] = std::abs(an - fd) / denom;
    });

    GradCheckResult r;
    r.entries = slots.size();
    for (double e : errs) r.max_err = std::max(r.max_err, e);
    return r;
}

}  // namespace pwc
