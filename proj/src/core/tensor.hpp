#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace l3d::ad {

struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Reverse-mode tape. Nodes own their values; gradients are allocated only
// for nodes on a differentiable path and accumulated in the reverse sweep.
template <class T>
class Tape {
public:
    struct Node {
        Mat<T> value;
        Mat<T> grad;
        std::function<void(Tape&, int)> backward;  // (tape, own id)
        bool needs_grad = false;
    };

    int push_leaf(Mat<T> value, bool needs_grad) {
        Node n;
        n.value = std::move(value);
        n.needs_grad = needs_grad;
        if (needs_grad) n.grad = Mat<T>::Zero(n.value.rows(), n.value.cols());
        nodes_.push_back(std::move(n));
        return static_cast<int>(nodes_.size()) - 1;
    }

    int push(Mat<T> value, bool needs_grad, std::function<void(Tape&, int)> backward) {
        Node n;
        n.value = std::move(value);
        n.needs_grad = needs_grad;
        if (needs_grad) {
            n.grad = Mat<T>::Zero(n.value.rows(), n.value.cols());
            n.backward = std::move(backward);
        }
        nodes_.push_back(std::move(n));
        return static_cast<int>(nodes_.size()) - 1;
    }

    Mat<T>& value(int id) { return nodes_[static_cast<std::size_t>(id)].value; }
    const Mat<T>& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
    Mat<T>& grad(int id) { return nodes_[static_cast<std::size_t>(id)].grad; }
    bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }

    // Reverse sweep from a scalar output node.
    void backward(int output_id) {
        auto& out = nodes_[static_cast<std::size_t>(output_id)];
        if (out.value.size() != 1) throw ShapeError("backward: output must be scalar");
        if (!out.needs_grad) return;
        out.grad.setConstant(T(1));
        for (int i = output_id; i >= 0; --i) {
            auto& n = nodes_[static_cast<std::size_t>(i)];
            if (n.needs_grad && n.backward) n.backward(*this, i);
        }
    }

    std::size_t size() const { return nodes_.size(); }

private:
    std::vector<Node> nodes_;
};

template <class T>
struct Var {
    Tape<T>* tape = nullptr;
    int id = -1;

    const Mat<T>& val() const { return tape->value(id); }
    const Mat<T>& grad() const { return tape->grad(id); }
    Eigen::Index rows() const { return val().rows(); }
    Eigen::Index cols() const { return val().cols(); }
};

template <class T>
Var<T> leaf(Tape<T>& tape, Mat<T> value, bool needs_grad = false) {
    return {&tape, tape.push_leaf(std::move(value), needs_grad)};
}

template <class T>
Var<T> constant(Tape<T>& tape, Mat<T> value) {
    return leaf(tape, std::move(value), false);
}

template <class T>
Var<T> scalar_const(Tape<T>& tape, T v) {
    Mat<T> m(1, 1);
    m(0, 0) = v;
    return constant(tape, std::move(m));
}

namespace detail {
template <class T>
void accum(Tape<T>& tape, int id, const Mat<T>& g) {
    if (id >= 0 && tape.needs_grad(id)) tape.grad(id) += g;
}
template <class T>
bool any_grad(Tape<T>& tape, std::initializer_list<int> ids) {
    for (int id : ids)
        if (tape.needs_grad(id)) return true;
    return false;
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("add: shape mismatch");
    Tape<T>& t = *a.tape;
    const bool ng = detail::any_grad(t, {a.id, b.id});
    const int aid = a.id, bid = b.id;
    int id = t.push(a.val() + b.val(), ng, [aid, bid](Tape<T>& t, int self) {
        detail::accum(t, aid, t.grad(self));
        detail::accum(t, bid, t.grad(self));
    });
    return {&t, id};
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("sub: shape mismatch");
    Tape<T>& t = *a.tape;
    const bool ng = detail::any_grad(t, {a.id, b.id});
    const int aid = a.id, bid = b.id;
    int id = t.push(a.val() - b.val(), ng, [aid, bid](Tape<T>& t, int self) {
        detail::accum(t, aid, t.grad(self));
        detail::accum(t, bid, Mat<T>(-t.grad(self)));
    });
    return {&t, id};
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("mul: shape mismatch");
    Tape<T>& t = *a.tape;
    const bool ng = detail::any_grad(t, {a.id, b.id});
    const int aid = a.id, bid = b.id;
    int id = t.push(a.val().cwiseProduct(b.val()), ng, [aid, bid](Tape<T>& t, int self) {
        detail::accum(t, aid, Mat<T>(t.grad(self).cwiseProduct(t.value(bid))));
        detail::accum(t, bid, Mat<T>(t.grad(self).cwiseProduct(t.value(aid))));
    });
    return {&t, id};
}

template <class T>
Var<T> scale(Var<T> a, T c) {
    Tape<T>& t = *a.tape;
    const int aid = a.id;
    int id = t.push(Mat<T>(a.val() * c), t.needs_grad(aid), [aid, c](Tape<T>& t, int self) {
        detail::accum(t, aid, Mat<T>(t.grad(self) * c));
    });
    return {&t, id};
}

template <class T>
Var<T> neg(Var<T> a) {
    return scale(a, T(-1));
}

template <class T>
Var<T> add_scalar(Var<T> a, T c) {
    Tape<T>& t = *a.tape;
    const int aid = a.id;
    int id = t.push(Mat<T>(a.val().array() + c), t.needs_grad(aid),
                    [aid](Tape<T>& t, int self) { detail::accum(t, aid, t.grad(self)); });
    return {&t, id};
}

template <class T>
Var<T> exp_(Var<T> a) {
    Tape<T>& t = *a.tape;
    const int aid = a.id;
    Mat<T> value = a.val().array().exp();
    int id = t.push(std::move(value), t.needs_grad(aid), [aid](Tape<T>& t, int self) {
        detail::accum(t, aid, Mat<T>(t.grad(self).cwiseProduct(t.value(self))));
    });
    return {&t, id};
}

template <class T>
Var<T> log_(Var<T> a) {
    Tape<T>& t = *a.tape;
    const int aid = a.id;
    if ((a.val().array() <= T(0)).any()) throw NumericError("log of non-positive value");
    Mat<T> value = a.val().array().log();
    int id = t.push(std::move(value), t.needs_grad(aid), [aid](Tape<T>& t, int self) {
        detail::accum(t, aid, Mat<T>(t.grad(self).cwiseQuotient(t.value(aid))));
    });
    return {&t, id};
}

template <class T>
Var<T> abs_(Var<T> a) {
    Tape<T>& t = *a.tape;
    const int aid = a.id;
    int id = t.push(Mat<T>(a.val().cwiseAbs()), t.needs_grad(aid), [aid](Tape<T>& t, int self) {
        const Mat<T> sign = t.value(aid).unaryExpr(
            [](T v) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
        detail::accum(t, aid, Mat<T>(t.grad(self).cwiseProduct(sign)));
    });
    return {&t, id};
}

template <class T>
Var<T> relu(Var<T> a) {
    Tape<T>& t = *a.tape;
    const int aid = a.id;
    int id = t.push(Mat<T>(a.val().cwiseMax(T(0))), t.needs_grad(aid), [aid](Tape<T>& t, int self) {
        const Mat<T> mask = t.value(aid).unaryExpr([](T v) { return v > T(0) ? T(1) : T(0); });
        detail::accum(t, aid, Mat<T>(t.grad(self).cwiseProduct(mask)));
    });
    return {&t, id};
}

// Tanh-approximated GELU.
template <class T>
Var<T> gelu(Var<T> a) {
    Tape<T>& t = *a.tape;
    const int aid = a.id;
    constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double kA = 0.044715;
    Mat<T> value = a.val().unaryExpr([](T x) {
        const T inner = T(kC) * (x + T(kA) * x * x * x);
        return T(0.5) * x * (T(1) + std::tanh(inner));
    });
    int id = t.push(std::move(value), t.needs_grad(aid), [aid](Tape<T>& t, int self) {
        const Mat<T> deriv = t.value(aid).unaryExpr([](T x) {
            const T inner = T(kC) * (x + T(kA) * x * x * x);
            const T th = std::tanh(inner);
            const T sech2 = T(1) - th * th;
            return T(0.5) * (T(1) + th) +
                   T(0.5) * x * sech2 * T(kC) * (T(1) + T(3) * T(kA) * x * x);
        });
        detail::accum(t, aid, Mat<T>(t.grad(self).cwiseProduct(deriv)));
    });
    return {&t, id};
}

// ---------------------------------------------------------------------------
// Linear algebra / structure
// ---------------------------------------------------------------------------

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
    if (a.cols() != b.rows()) throw ShapeError("matmul: inner dimension mismatch");
    Tape<T>& t = *a.tape;
    const bool ng = detail::any_grad(t, {a.id, b.id});
    const int aid = a.id, bid = b.id;
    Mat<T> value(a.rows(), b.cols());
    value.noalias() = a.val() * b.val();
    int id = t.push(std::move(value), ng, [aid, bid](Tape<T>& t, int self) {
        const Mat<T>& g = t.grad(self);
        if (t.needs_grad(aid)) {
            Mat<T> ga(t.value(aid).rows(), t.value(aid).cols());
            ga.noalias() = g * t.value(bid).transpose();
            t.grad(aid) += ga;
        }
        if (t.needs_grad(bid)) {
            Mat<T> gb(t.value(bid).rows(), t.value(bid).cols());
            gb.noalias() = t.value(aid).transpose() * g;
            t.grad(bid) += gb;
        }
    });
    return {&t, id};
}

// x (n x d) + bias (1 x d) broadcast over rows.
template <class T>
Var<T> row_broadcast_add(Var<T> x, Var<T> v) {
    if (v.rows() != 1 || v.cols() != x.cols()) throw ShapeError("row_broadcast_add: bad shapes");
    Tape<T>& t = *x.tape;
    const bool ng = detail::any_grad(t, {x.id, v.id});
    const int xid = x.id, vid = v.id;
    Mat<T> value = x.val().rowwise() + v.val().row(0);
    int id = t.push(std::move(value), ng, [xid, vid](Tape<T>& t, int self) {
        detail::accum(t, xid, t.grad(self));
        if (t.needs_grad(vid)) t.grad(vid) += t.grad(self).colwise().sum();
    });
    return {&t, id};
}

template <class T>
Var<T> row_broadcast_mul(Var<T> x, Var<T> v) {
    if (v.rows() != 1 || v.cols() != x.cols()) throw ShapeError("row_broadcast_mul: bad shapes");
    Tape<T>& t = *x.tape;
    const bool ng = detail::any_grad(t, {x.id, v.id});
    const int xid = x.id, vid = v.id;
    Mat<T> value = x.val().array().rowwise() * v.val().row(0).array();
    int id = t.push(std::move(value), ng, [xid, vid](Tape<T>& t, int self) {
        if (t.needs_grad(xid))
            t.grad(xid) += Mat<T>(t.grad(self).array().rowwise() * t.value(vid).row(0).array());
        if (t.needs_grad(vid))
            t.grad(vid) += t.grad(self).cwiseProduct(t.value(xid)).colwise().sum();
    });
    return {&t, id};
}

template <class T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: empty input");
    Tape<T>& t = *parts.front().tape;
    const Eigen::Index cols = parts.front().cols();
    Eigen::Index rows = 0;
    bool ng = false;
    std::vector<int> ids;
    ids.reserve(parts.size());
    for (const auto& p : parts) {
        if (p.cols() != cols) throw ShapeError("concat_rows: column mismatch");
        rows += p.rows();
        ng = ng || t.needs_grad(p.id);
        ids.push_back(p.id);
    }
    Mat<T> value(rows, cols);
    Eigen::Index r = 0;
    for (const auto& p : parts) {
        value.middleRows(r, p.rows()) = p.val();
        r += p.rows();
    }
    int id = t.push(std::move(value), ng, [ids](Tape<T>& t, int self) {
        Eigen::Index r = 0;
        for (int pid : ids) {
            const Eigen::Index nr = t.value(pid).rows();
            if (t.needs_grad(pid)) t.grad(pid) += t.grad(self).middleRows(r, nr);
            r += nr;
        }
    });
    return {&t, id};
}

template <class T>
Var<T> slice_rows(Var<T> x, Eigen::Index start, Eigen::Index count) {
    if (start < 0 || count < 0 || start + count > x.rows())
        throw ShapeError("slice_rows: out of range");
    Tape<T>& t = *x.tape;
    const int xid = x.id;
    int id = t.push(Mat<T>(x.val().middleRows(start, count)), t.needs_grad(xid),
                    [xid, start, count](Tape<T>& t, int self) {
                        if (t.needs_grad(xid))
                            t.grad(xid).middleRows(start, count) += t.grad(self);
                    });
    return {&t, id};
}

template <class T>
Var<T> slice_cols(Var<T> x, Eigen::Index start, Eigen::Index count) {
    if (start < 0 || count < 0 || start + count > x.cols())
        throw ShapeError("slice_cols: out of range");
    Tape<T>& t = *x.tape;
    const int xid = x.id;
    int id = t.push(Mat<T>(x.val().middleCols(start, count)), t.needs_grad(xid),
                    [xid, start, count](Tape<T>& t, int self) {
                        if (t.needs_grad(xid))
                            t.grad(xid).middleCols(start, count) += t.grad(self);
                    });
    return {&t, id};
}

// ---------------------------------------------------------------------------
// Normalization, attention, reductions
// ---------------------------------------------------------------------------

// Per-row normalization with no learned affine.
template <class T>
Var<T> layernorm_rows(Var<T> x, T eps = T(1e-6)) {
    Tape<T>& t = *x.tape;
    const int xid = x.id;
    const Eigen::Index d = x.cols();
    Mat<T> y(x.rows(), d);
    Mat<T> inv_sigma(x.rows(), 1);
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const T mean = x.val().row(r).mean();
        const auto centered = x.val().row(r).array() - mean;
        const T var = centered.square().mean();
        const T is = T(1) / std::sqrt(var + eps);
        inv_sigma(r, 0) = is;
        y.row(r) = centered * is;
    }
    int id = t.push(std::move(y), t.needs_grad(xid),
                    [xid, inv_sigma, d](Tape<T>& t, int self) {
                        if (!t.needs_grad(xid)) return;
                        const Mat<T>& yv = t.value(self);
                        const Mat<T>& g = t.grad(self);
                        Mat<T> gx(yv.rows(), d);
                        for (Eigen::Index r = 0; r < yv.rows(); ++r) {
                            const T gmean = g.row(r).mean();
                            const T gymean = g.row(r).cwiseProduct(yv.row(r)).mean();
                            gx.row(r) =
                                (inv_sigma(r, 0) *
                                 (g.row(r).array() - gmean - yv.row(r).array() * gymean))
                                    .matrix();
                        }
                        t.grad(xid) += gx;
                    });
    return {&t, id};
}

// 2D rotary embedding over per-token grid positions, applied per head.
// Tokens with apply=false (e.g. latent slots) pass through unchanged.
struct RopePos {
    bool apply = false;
    double x = 0.0;
    double y = 0.0;
};

namespace detail {
template <class T>
void rope_rotate(Mat<T>& m, const std::vector<RopePos>& pos, int n_heads, T sign) {
    const Eigen::Index d = m.cols();
    const Eigen::Index hd = d / n_heads;
    const Eigen::Index half = hd / 2;   // dims per axis
    const Eigen::Index pairs = half / 2;
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        const auto& p = pos[static_cast<std::size_t>(r)];
        if (!p.apply) continue;
        for (int h = 0; h < n_heads; ++h) {
            const Eigen::Index base = static_cast<Eigen::Index>(h) * hd;
            for (int axis = 0; axis < 2; ++axis) {
                const T coord = T(axis == 0 ? p.x : p.y);
                const Eigen::Index off = base + axis * half;
                for (Eigen::Index j = 0; j < pairs; ++j) {
                    const T theta = sign * coord *
                                    T(std::pow(100.0, -static_cast<double>(j) /
                                                           static_cast<double>(pairs)));
                    const T c = std::cos(theta), s = std::sin(theta);
                    const T a = m(r, off + 2 * j), b = m(r, off + 2 * j + 1);
                    m(r, off + 2 * j) = a * c - b * s;
                    m(r, off + 2 * j + 1) = a * s + b * c;
                }
            }
        }
    }
}
}  // namespace detail

template <class T>
Var<T> rope2d(Var<T> x, std::vector<RopePos> pos, int n_heads) {
    Tape<T>& t = *x.tape;
    const int xid = x.id;
    if (static_cast<Eigen::Index>(pos.size()) != x.rows())
        throw ShapeError("rope2d: position count mismatch");
    const Eigen::Index hd = x.cols() / n_heads;
    if (x.cols() % n_heads != 0 || hd % 4 != 0)
        throw ShapeError("rope2d: head dim must be divisible by 4");
    Mat<T> value = x.val();
    detail::rope_rotate(value, pos, n_heads, T(1));
    int id = t.push(std::move(value), t.needs_grad(xid),
                    [xid, pos = std::move(pos), n_heads](Tape<T>& t, int self) {
                        if (!t.needs_grad(xid)) return;
                        Mat<T> g = t.grad(self);
                        detail::rope_rotate(g, pos, n_heads, T(-1));
                        t.grad(xid) += g;
                    });
    return {&t, id};
}

// Fused multi-head softmax attention. q: n x d, k/v: m x d.
template <class T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, int n_heads) {
    if (q.cols() != k.cols() || k.rows() != v.rows() || k.cols() != v.cols())
        throw ShapeError("attention: shape mismatch");
    if (q.cols() % n_heads != 0) throw ShapeError("attention: width not divisible by heads");
    Tape<T>& t = *q.tape;
    const int qid = q.id, kid = k.id, vid = v.id;
    const bool ng = detail::any_grad(t, {qid, kid, vid});
    const Eigen::Index d = q.cols();
    const Eigen::Index hd = d / n_heads;
    const T s = T(1) / std::sqrt(static_cast<T>(hd));

    std::vector<Mat<T>> attn(static_cast<std::size_t>(n_heads));
    Mat<T> out(q.rows(), d);
    for (int h = 0; h < n_heads; ++h) {
        const auto qh = q.val().middleCols(h * hd, hd);
        const auto kh = k.val().middleCols(h * hd, hd);
        const auto vh = v.val().middleCols(h * hd, hd);
        Mat<T> scores(q.rows(), k.rows());
        scores.noalias() = qh * kh.transpose();
        scores *= s;
        for (Eigen::Index r = 0; r < scores.rows(); ++r) {
            const T mx = scores.row(r).maxCoeff();
            scores.row(r) = (scores.row(r).array() - mx).exp();
            scores.row(r) /= scores.row(r).sum();
        }
        out.middleCols(h * hd, hd).noalias() = scores * vh;
        attn[static_cast<std::size_t>(h)] = std::move(scores);
    }

    int id = t.push(std::move(out), ng,
                    [qid, kid, vid, n_heads, hd, s, attn = std::move(attn)](Tape<T>& t, int self) {
                        const Mat<T>& g = t.grad(self);
                        for (int h = 0; h < n_heads; ++h) {
                            const auto& A = attn[static_cast<std::size_t>(h)];
                            const auto gh = g.middleCols(h * hd, hd);
                            const auto qh = t.value(qid).middleCols(h * hd, hd);
                            const auto kh = t.value(kid).middleCols(h * hd, hd);
                            const auto vh = t.value(vid).middleCols(h * hd, hd);
                            if (t.needs_grad(vid)) {
                                Mat<T> gv(vh.rows(), hd);
                                gv.noalias() = A.transpose() * gh;
                                t.grad(vid).middleCols(h * hd, hd) += gv;
                            }
                            if (t.needs_grad(qid) || t.needs_grad(kid)) {
                                Mat<T> dA(A.rows(), A.cols());
                                dA.noalias() = gh * vh.transpose();
                                Mat<T> dS = A.cwiseProduct(dA);
                                const Eigen::Array<T, Eigen::Dynamic, 1> rowsum =
                                    dS.rowwise().sum();
                                dS -= Mat<T>((A.array().colwise() * rowsum).matrix());
                                if (t.needs_grad(qid)) {
                                    Mat<T> gq(A.rows(), hd);
                                    gq.noalias() = dS * kh;
                                    t.grad(qid).middleCols(h * hd, hd) += gq * s;
                                }
                                if (t.needs_grad(kid)) {
                                    Mat<T> gk(A.cols(), hd);
                                    gk.noalias() = dS.transpose() * qh;
                                    t.grad(kid).middleCols(h * hd, hd) += gk * s;
                                }
                            }
                        }
                    });
    return {&t, id};
}

template <class T>
Var<T> sum_all(Var<T> x) {
    Tape<T>& t = *x.tape;
    const int xid = x.id;
    Mat<T> value(1, 1);
    value(0, 0) = x.val().sum();
    int id = t.push(std::move(value), t.needs_grad(xid), [xid](Tape<T>& t, int self) {
        if (t.needs_grad(xid)) t.grad(xid).array() += t.grad(self)(0, 0);
    });
    return {&t, id};
}

template <class T>
Var<T> mean_all(Var<T> x) {
    const T n = static_cast<T>(x.rows() * x.cols());
    return scale(sum_all(x), T(1) / n);
}

template <class T>
Var<T> mse(Var<T> a, Var<T> b) {
    Var<T> d = sub(a, b);
    return mean_all(mul(d, d));
}

// 2x average pooling on an image stored as (H*W) x C rows.
template <class T>
Var<T> avg_pool2(Var<T> x, int H, int W) {
    if (H % 2 != 0 || W % 2 != 0 || x.rows() != static_cast<Eigen::Index>(H) * W)
        throw ShapeError("avg_pool2: bad image shape");
    Tape<T>& t = *x.tape;
    const int xid = x.id;
    const Eigen::Index C = x.cols();
    const int Ho = H / 2, Wo = W / 2;
    Mat<T> value = Mat<T>::Zero(static_cast<Eigen::Index>(Ho) * Wo, C);
    for (int r = 0; r < H; ++r)
        for (int c = 0; c < W; ++c)
            value.row(static_cast<Eigen::Index>(r / 2) * Wo + c / 2) +=
                T(0.25) * x.val().row(static_cast<Eigen::Index>(r) * W + c);
    int id = t.push(std::move(value), t.needs_grad(xid), [xid, H, W, Wo](Tape<T>& t, int self) {
        if (!t.needs_grad(xid)) return;
        for (int r = 0; r < H; ++r)
            for (int c = 0; c < W; ++c)
                t.grad(xid).row(static_cast<Eigen::Index>(r) * W + c) +=
                    T(0.25) *
                    t.grad(self).row(static_cast<Eigen::Index>(r / 2) * Wo + c / 2);
    });
    return {&t, id};
}

// Token grid (Ht*Wt) x (patch*patch*C) -> image (Ht*patch * Wt*patch) x C.
template <class T>
Var<T> unpatchify(Var<T> x, int Ht, int Wt, int patch, int C) {
    if (x.rows() != static_cast<Eigen::Index>(Ht) * Wt ||
        x.cols() != static_cast<Eigen::Index>(patch) * patch * C)
        throw ShapeError("unpatchify: bad token shape");
    Tape<T>& t = *x.tape;
    const int xid = x.id;
    const int H = Ht * patch, W = Wt * patch;
    Mat<T> value(static_cast<Eigen::Index>(H) * W, C);
    for (int r = 0; r < H; ++r) {
        for (int c = 0; c < W; ++c) {
            const Eigen::Index tok = static_cast<Eigen::Index>(r / patch) * Wt + c / patch;
            const Eigen::Index off =
                (static_cast<Eigen::Index>(r % patch) * patch + c % patch) * C;
            for (int ch = 0; ch < C; ++ch)
                value(static_cast<Eigen::Index>(r) * W + c, ch) = x.val()(tok, off + ch);
        }
    }
    int id = t.push(std::move(value), t.needs_grad(xid),
                    [xid, Ht, Wt, patch, C, H, W](Tape<T>& t, int self) {
                        (void)Ht;
                        if (!t.needs_grad(xid)) return;
                        for (int r = 0; r < H; ++r) {
                            for (int c = 0; c < W; ++c) {
                                const Eigen::Index tok =
                                    static_cast<Eigen::Index>(r / patch) * Wt + c / patch;
                                const Eigen::Index off =
                                    (static_cast<Eigen::Index>(r % patch) * patch + c % patch) *
                                    C;
                                for (int ch = 0; ch < C; ++ch)
                                    t.grad(xid)(tok, off + ch) +=
                                        t.grad(self)(static_cast<Eigen::Index>(r) * W + c, ch);
                            }
                        }
                    });
    return {&t, id};
}

// Image (H*W) x C -> token grid (Ht*Wt) x (patch*patch*C); inverse of
// unpatchify.
template <class T>
Var<T> patchify(Var<T> x, int H, int W, int patch, int C) {
    if (H % patch != 0 || W % patch != 0 || x.rows() != static_cast<Eigen::Index>(H) * W ||
        x.cols() != C)
        throw ShapeError("patchify: bad image shape");
    Tape<T>& t = *x.tape;
    const int xid = x.id;
    const int Ht = H / patch, Wt = W / patch;
    Mat<T> value(static_cast<Eigen::Index>(Ht) * Wt,
                 static_cast<Eigen::Index>(patch) * patch * C);
    for (int r = 0; r < H; ++r) {
        for (int c = 0; c < W; ++c) {
            const Eigen::Index tok = static_cast<Eigen::Index>(r / patch) * Wt + c / patch;
            const Eigen::Index off =
                (static_cast<Eigen::Index>(r % patch) * patch + c % patch) * C;
            for (int ch = 0; ch < C; ++ch)
                value(tok, off + ch) = x.val()(static_cast<Eigen::Index>(r) * W + c, ch);
        }
    }
    int id = t.push(std::move(value), t.needs_grad(xid),
                    [xid, Wt, patch, C, H, W](Tape<T>& t, int self) {
                        if (!t.needs_grad(xid)) return;
                        for (int r = 0; r < H; ++r) {
                            for (int c = 0; c < W; ++c) {
                                const Eigen::Index tok =
                                    static_cast<Eigen::Index>(r / patch) * Wt + c / patch;
                                const Eigen::Index off =
                                    (static_cast<Eigen::Index>(r % patch) * patch + c % patch) *
                                    C;
                                for (int ch = 0; ch < C; ++ch)
                                    t.grad(xid)(static_cast<Eigen::Index>(r) * W + c, ch) +=
                                        t.grad(self)(tok, off + ch);
                            }
                        }
                    });
    return {&t, id};
}

// x @ W + b with b broadcast over rows.
template <class T>
Var<T> linear(Var<T> x, Var<T> W, Var<T> b) {
    return row_broadcast_add(matmul(x, W), b);
}

}  // namespace l3d::ad
