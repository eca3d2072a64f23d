#include "pg/tensor.hpp"

#include "pg/error.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <sstream>

namespace pg {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap as_mat(std::span<const double> d, std::size_t r, std::size_t c) {
    return ConstMap(d.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

MutMap as_mat(std::span<double> d, std::size_t r, std::size_t c) {
    return MutMap(d.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

void require_2d(const Tensor& t, const char* op) {
    if (t.ndim() != 2) {
        throw DimensionError(std::string(op) + ": expected a 2-D operand, got " + shape_str(t.shape()));
    }
}

void add_into(std::vector<double>& dst, std::span<const double> src) {
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
}

// Output-element -> input-element index maps for a broadcast pair.
struct Broadcast {
    Shape out;
    bool same = false;
    std::vector<std::size_t> a_idx;
    std::vector<std::size_t> b_idx;
};

std::vector<std::size_t> index_map(const Shape& in, const Shape& out) {
    const std::size_t nd = out.size();
    const std::size_t off = nd - in.size();
    std::vector<std::size_t> stride(nd, 0);
    std::size_t s = 1;
    for (std::size_t i = in.size(); i-- > 0;) {
        stride[off + i] = in[i] == 1 ? 0 : s;
        s *= in[i];
    }
    const std::size_t total = shape_numel(out);
    std::vector<std::size_t> map(total);
    std::vector<std::size_t> idx(nd, 0);
    for (std::size_t e = 0; e < total; ++e) {
        std::size_t lin = 0;
        for (std::size_t d = 0; d < nd; ++d) lin += idx[d] * stride[d];
        map[e] = lin;
        for (std::size_t d = nd; d-- > 0;) {
            if (++idx[d] < out[d]) break;
            idx[d] = 0;
        }
    }
    return map;
}

Broadcast plan_broadcast(const Shape& a, const Shape& b) {
    Broadcast plan;
    if (a == b) {
        plan.out = a;
        plan.same = true;
        return plan;
    }
    plan.out = broadcast_shape(a, b);
    plan.a_idx = index_map(a, plan.out);
    plan.b_idx = index_map(b, plan.out);
    return plan;
}

template <typename Fwd, typename DA, typename DB>
Var binary_op(Var a, Var b, Fwd fwd, DA da, DB db) {
    Tape& tape = *a.tape;
    if (b.tape != a.tape) throw ContractError("operands recorded on different tapes");
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    auto plan = std::make_shared<Broadcast>(plan_broadcast(av.shape(), bv.shape()));
    Tensor out(plan->out);
    const std::size_t n = out.numel();
    auto ai = [&](std::size_t e) { return plan->same ? e : plan->a_idx[e]; };
    auto bi = [&](std::size_t e) { return plan->same ? e : plan->b_idx[e]; };
    for (std::size_t e = 0; e < n; ++e) out[e] = fwd(av[ai(e)], bv[bi(e)]);
    const std::size_t aid = a.id;
    const std::size_t bid = b.id;
    return tape.record(std::move(out), {a, b}, [aid, bid, plan, da, db](Tape& t, std::span<const double> g) {
        const Tensor& x = t.value_of(aid);
        const Tensor& y = t.value_of(bid);
        auto ai = [&](std::size_t e) { return plan->same ? e : plan->a_idx[e]; };
        auto bi = [&](std::size_t e) { return plan->same ? e : plan->b_idx[e]; };
        if (t.needs_grad(aid)) {
            auto& ga = t.grad_buffer(aid);
            for (std::size_t e = 0; e < g.size(); ++e) ga[ai(e)] += da(g[e], x[ai(e)], y[bi(e)]);
        }
        if (t.needs_grad(bid)) {
            auto& gb = t.grad_buffer(bid);
            for (std::size_t e = 0; e < g.size(); ++e) gb[bi(e)] += db(g[e], x[ai(e)], y[bi(e)]);
        }
    });
}

template <typename Fwd, typename Dfn>
Var unary_op(Var a, Fwd fwd, Dfn dfn) {
    Tape& tape = *a.tape;
    const Tensor& av = a.value();
    Tensor out(av.shape());
    for (std::size_t i = 0; i < av.numel(); ++i) out[i] = fwd(av[i]);
    const std::size_t aid = a.id;
    const std::size_t oid = tape.size();
    return tape.record(std::move(out), {a}, [aid, oid, dfn](Tape& t, std::span<const double> g) {
        const Tensor& x = t.value_of(aid);
        const Tensor& y = t.value_of(oid);
        auto& ga = t.grad_buffer(aid);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += dfn(g[i], x[i], y[i]);
    });
}

}  // namespace

// ---------------- Tensor ----------------

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto s : shape) n *= s;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != data_.size()) {
        throw DimensionError("tensor shape " + shape_str(shape_) + " does not match " +
                             std::to_string(data_.size()) + " values");
    }
}

double Tensor::item() const {
    if (data_.size() != 1) throw ContractError("item() on a tensor with " + std::to_string(data_.size()) + " values");
    return data_[0];
}

void Tensor::reshape(Shape shape) {
    if (shape_numel(shape) != data_.size()) {
        throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    shape_ = std::move(shape);
}

// ---------------- Tape ----------------

const Tensor& Var::value() const { return tape->value_of(id); }

void Tape::check_owner(Var v) const {
    if (v.tape != this || v.id >= nodes_.size()) throw ContractError("variable does not belong to this tape");
}

Var Tape::param(Tensor& t) {
    Node n;
    n.borrowed = &t;
    if (t.requires_grad) {
        n.leaf = &t;
        n.needs_grad = true;
    }
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
}

Var Tape::constant(const Tensor& t) {
    Node n;
    n.borrowed = &t;
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
}

Var Tape::value(Tensor t) {
    Node n;
    n.owned = std::move(t);
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
}

const Tensor& Tape::value_of(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.borrowed ? *n.borrowed : n.owned;
}

Var Tape::record(Tensor out, std::initializer_list<Var> inputs, BackwardFn fn) {
    if (consumed_) throw ContractError("cannot record on a tape whose backward pass already ran");
    Node n;
    n.owned = std::move(out);
    for (const Var& v : inputs) {
        check_owner(v);
        n.needs_grad = n.needs_grad || nodes_[v.id].needs_grad;
    }
    if (n.needs_grad) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
}

std::vector<double>& Tape::grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(value_of(id).numel(), 0.0);
    return n.grad;
}

void Tape::backward(Var loss, GradMode mode) {
    check_owner(loss);
    if (consumed_) throw ContractError("backward called twice on the same tape");
    if (loss.value().numel() != 1) {
        throw ContractError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
    }
    consumed_ = true;

    grad_buffer(loss.id)[0] = 1.0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (n.grad.empty() || !n.backward) continue;
        n.backward(*this, n.grad);
    }

    for (Node& n : nodes_) {
        if (!n.leaf) continue;
        if (mode == GradMode::overwrite || !n.leaf->grad) n.leaf->grad.emplace(n.leaf->numel(), 0.0);
    }
    for (Node& n : nodes_) {
        if (!n.leaf || n.grad.empty()) continue;
        add_into(*n.leaf->grad, n.grad);
    }
}

// ---------------- ops ----------------

Shape broadcast_shape(const Shape& a, const Shape& b) {
    const std::size_t nd = std::max(a.size(), b.size());
    Shape out(nd);
    for (std::size_t i = 0; i < nd; ++i) {
        const std::size_t da = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
        const std::size_t db = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
        if (da != db && da != 1 && db != 1) {
            throw DimensionError("shapes " + shape_str(a) + " and " + shape_str(b) + " are not broadcastable");
        }
        out[i] = std::max(da, db);
    }
    return out;
}

Var matmul(Var a, Var b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    require_2d(av, "matmul");
    require_2d(bv, "matmul");
    const std::size_t m = av.dim(0), k = av.dim(1), p = bv.dim(1);
    if (bv.dim(0) != k) {
        throw DimensionError("matmul: inner dimensions differ: " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
    }
    Tensor out({m, p});
    as_mat(out.data(), m, p).noalias() = as_mat(av.data(), m, k) * as_mat(bv.data(), k, p);
    const std::size_t aid = a.id, bid = b.id;
    return a.tape->record(std::move(out), {a, b}, [aid, bid, m, k, p](Tape& t, std::span<const double> g) {
        auto G = as_mat(g, m, p);
        if (t.needs_grad(aid)) {
            auto& ga = t.grad_buffer(aid);
            as_mat(std::span<double>(ga), m, k).noalias() += G * as_mat(t.value_of(bid).data(), k, p).transpose();
        }
        if (t.needs_grad(bid)) {
            auto& gb = t.grad_buffer(bid);
            as_mat(std::span<double>(gb), k, p).noalias() += as_mat(t.value_of(aid).data(), m, k).transpose() * G;
        }
    });
}

Var matmul_nt(Var a, Var b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    require_2d(av, "matmul_nt");
    require_2d(bv, "matmul_nt");
    const std::size_t m = av.dim(0), k = av.dim(1), p = bv.dim(0);
    if (bv.dim(1) != k) {
        throw DimensionError("matmul_nt: inner dimensions differ: " + shape_str(av.shape()) + " x " +
                             shape_str(bv.shape()) + "^T");
    }
    Tensor out({m, p});
    as_mat(out.data(), m, p).noalias() = as_mat(av.data(), m, k) * as_mat(bv.data(), p, k).transpose();
    const std::size_t aid = a.id, bid = b.id;
    return a.tape->record(std::move(out), {a, b}, [aid, bid, m, k, p](Tape& t, std::span<const double> g) {
        auto G = as_mat(g, m, p);
        if (t.needs_grad(aid)) {
            auto& ga = t.grad_buffer(aid);
            as_mat(std::span<double>(ga), m, k).noalias() += G * as_mat(t.value_of(bid).data(), p, k);
        }
        if (t.needs_grad(bid)) {
            auto& gb = t.grad_buffer(bid);
            as_mat(std::span<double>(gb), p, k).noalias() += G.transpose() * as_mat(t.value_of(aid).data(), m, k);
        }
    });
}

Var add(Var a, Var b) {
    return binary_op(
        a, b, [](double x, double y) { return x + y; }, [](double g, double, double) { return g; },
        [](double g, double, double) { return g; });
}

Var sub(Var a, Var b) {
    return binary_op(
        a, b, [](double x, double y) { return x - y; }, [](double g, double, double) { return g; },
        [](double g, double, double) { return -g; });
}

Var mul(Var a, Var b) {
    return binary_op(
        a, b, [](double x, double y) { return x * y; }, [](double g, double, double y) { return g * y; },
        [](double g, double x, double) { return g * x; });
}

Var scale(Var a, double c) {
    return unary_op(a, [c](double x) { return c * x; }, [c](double g, double, double) { return c * g; });
}

Var sigmoid(Var a) {
    return unary_op(
        a,
        [](double x) {
            if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
            const double e = std::exp(x);
            return e / (1.0 + e);
        },
        [](double g, double, double y) { return g * y * (1.0 - y); });
}

Var relu(Var a) {
    return unary_op(
        a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double g, double x, double) { return x > 0.0 ? g : 0.0; });
}

Var exp(Var a) {
    return unary_op(a, [](double x) { return std::exp(x); }, [](double g, double, double y) { return g * y; });
}

Var log(Var a) {
    for (double x : a.value().data()) {
        if (!(x > 0.0)) throw DomainError("log of non-positive entry " + std::to_string(x));
    }
    return unary_op(a, [](double x) { return std::log(x); }, [](double g, double x, double) { return g / x; });
}

Var square(Var a) {
    return unary_op(a, [](double x) { return x * x; }, [](double g, double x, double) { return 2.0 * g * x; });
}

Var sum(Var a) {
    double s = 0.0;
    for (double x : a.value().data()) s += x;
    const std::size_t aid = a.id;
    return a.tape->record(Tensor::scalar(s), {a}, [aid](Tape& t, std::span<const double> g) {
        auto& ga = t.grad_buffer(aid);
        for (double& v : ga) v += g[0];
    });
}

Var mean(Var a) {
    const std::size_t n = a.value().numel();
    if (n == 0) throw DimensionError("mean of an empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var reshape(Var a, Shape shape) {
    Tensor out = a.value();
    out.requires_grad = false;
    out.grad.reset();
    out.reshape(std::move(shape));
    const std::size_t aid = a.id;
    return a.tape->record(std::move(out), {a}, [aid](Tape& t, std::span<const double> g) {
        add_into(t.grad_buffer(aid), g);
    });
}

Var softmax(Var a, int axis) {
    const Tensor& x = a.value();
    const int nd = static_cast<int>(x.ndim());
    const int ax = axis < 0 ? axis + nd : axis;
    if (nd == 0 || ax < 0 || ax >= nd) throw DimensionError("softmax: axis out of range for " + shape_str(x.shape()));
    const std::size_t len = x.dim(static_cast<std::size_t>(ax));
    if (len == 0) throw DimensionError("softmax over an empty axis");
    std::size_t outer = 1, inner = 1;
    for (int i = 0; i < ax; ++i) outer *= x.dim(static_cast<std::size_t>(i));
    for (int i = ax + 1; i < nd; ++i) inner *= x.dim(static_cast<std::size_t>(i));

    Tensor y(x.shape());
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, x[base + j * inner]);
            double s = 0.0;
            for (std::size_t j = 0; j < len; ++j) {
                const double e = std::exp(x[base + j * inner] - mx);
                y[base + j * inner] = e;
                s += e;
            }
            for (std::size_t j = 0; j < len; ++j) y[base + j * inner] /= s;
        }
    }
    const std::size_t aid = a.id;
    const std::size_t oid = a.tape->size();
    return a.tape->record(std::move(y), {a}, [aid, oid, outer, inner, len](Tape& t, std::span<const double> g) {
        const Tensor& yv = t.value_of(oid);
        auto& ga = t.grad_buffer(aid);
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t in = 0; in < inner; ++in) {
                const std::size_t base = o * len * inner + in;
                double dot = 0.0;
                for (std::size_t j = 0; j < len; ++j) dot += g[base + j * inner] * yv[base + j * inner];
                for (std::size_t j = 0; j < len; ++j) {
                    const std::size_t e = base + j * inner;
                    ga[e] += yv[e] * (g[e] - dot);
                }
            }
        }
    });
}

Var cross_entropy(Var logits, std::span<const std::int32_t> targets, std::span<const std::uint8_t> mask) {
    const Tensor& x = logits.value();
    require_2d(x, "cross_entropy");
    const std::size_t rows = x.dim(0), vocab = x.dim(1);
    if (targets.size() != rows || mask.size() != rows) {
        throw DimensionError("cross_entropy: targets/mask length must equal the number of logit rows");
    }
    std::size_t count = 0;
    for (std::size_t r = 0; r < rows; ++r) {
        if (!mask[r]) continue;
        if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= vocab) {
            throw DimensionError("cross_entropy: target id " + std::to_string(targets[r]) + " outside vocabulary of " +
                                 std::to_string(vocab));
        }
        ++count;
    }
    if (count == 0) throw ContractError("cross_entropy: every position is masked (empty loss)");

    auto probs = std::make_shared<std::vector<double>>(rows * vocab, 0.0);
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        if (!mask[r]) continue;
        auto row = x.row(r);
        const double mx = *std::max_element(row.begin(), row.end());
        double s = 0.0;
        for (std::size_t j = 0; j < vocab; ++j) {
            const double e = std::exp(row[j] - mx);
            (*probs)[r * vocab + j] = e;
            s += e;
        }
        for (std::size_t j = 0; j < vocab; ++j) (*probs)[r * vocab + j] /= s;
        total += (mx + std::log(s)) - row[static_cast<std::size_t>(targets[r])];
    }
    const double inv = 1.0 / static_cast<double>(count);
    std::vector<std::int32_t> tgt(targets.begin(), targets.end());
    std::vector<std::uint8_t> msk(mask.begin(), mask.end());
    const std::size_t lid = logits.id;
    return logits.tape->record(
        Tensor::scalar(total * inv), {logits},
        [lid, probs, tgt = std::move(tgt), msk = std::move(msk), rows, vocab, inv](Tape& t, std::span<const double> g) {
            auto& gl = t.grad_buffer(lid);
            const double s = g[0] * inv;
            for (std::size_t r = 0; r < rows; ++r) {
                if (!msk[r]) continue;
                for (std::size_t j = 0; j < vocab; ++j) gl[r * vocab + j] += s * (*probs)[r * vocab + j];
                gl[r * vocab + static_cast<std::size_t>(tgt[r])] -= s;
            }
        });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
    const Tensor& xv = x.value();
    require_2d(xv, "layer_norm");
    const std::size_t rows = xv.dim(0), d = xv.dim(1);
    if (gamma.value().numel() != d || beta.value().numel() != d) {
        throw DimensionError("layer_norm: affine parameters must have width " + std::to_string(d));
    }
    const Tensor& gv = gamma.value();
    const Tensor& bv = beta.value();
    auto xhat = std::make_shared<std::vector<double>>(rows * d);
    auto rstd = std::make_shared<std::vector<double>>(rows);
    Tensor y({rows, d});
    for (std::size_t r = 0; r < rows; ++r) {
        auto row = xv.row(r);
        double mu = 0.0;
        for (double v : row) mu += v;
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (double v : row) var += (v - mu) * (v - mu);
        var /= static_cast<double>(d);
        const double rs = 1.0 / std::sqrt(var + eps);
        (*rstd)[r] = rs;
        for (std::size_t j = 0; j < d; ++j) {
            const double h = (row[j] - mu) * rs;
            (*xhat)[r * d + j] = h;
            y[r * d + j] = h * gv[j] + bv[j];
        }
    }
    const std::size_t xid = x.id, gid = gamma.id, bid = beta.id;
    return x.tape->record(std::move(y), {x, gamma, beta},
                          [xid, gid, bid, xhat, rstd, rows, d](Tape& t, std::span<const double> g) {
                              const Tensor& gv = t.value_of(gid);
                              if (t.needs_grad(gid)) {
                                  auto& gg = t.grad_buffer(gid);
                                  for (std::size_t r = 0; r < rows; ++r)
                                      for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * (*xhat)[r * d + j];
                              }
                              if (t.needs_grad(bid)) {
                                  auto& gb = t.grad_buffer(bid);
                                  for (std::size_t r = 0; r < rows; ++r)
                                      for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
                              }
                              if (t.needs_grad(xid)) {
                                  auto& gx = t.grad_buffer(xid);
                                  const double invd = 1.0 / static_cast<double>(d);
                                  for (std::size_t r = 0; r < rows; ++r) {
                                      double m1 = 0.0, m2 = 0.0;
                                      for (std::size_t j = 0; j < d; ++j) {
                                          const double dh = g[r * d + j] * gv[j];
                                          m1 += dh;
                                          m2 += dh * (*xhat)[r * d + j];
                                      }
                                      m1 *= invd;
                                      m2 *= invd;
                                      for (std::size_t j = 0; j < d; ++j) {
                                          const double dh = g[r * d + j] * gv[j];
                                          gx[r * d + j] += (*rstd)[r] * (dh - m1 - (*xhat)[r * d + j] * m2);
                                      }
                                  }
                              }
                          });
}

Var embedding(Var table, std::span<const std::int32_t> ids) {
    const Tensor& tv = table.value();
    require_2d(tv, "embedding");
    const std::size_t vocab = tv.dim(0), d = tv.dim(1);
    Tensor out({ids.size(), d});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
            throw DimensionError("embedding: id " + std::to_string(ids[i]) + " outside table of " +
                                 std::to_string(vocab) + " rows");
        }
        auto src = tv.row(static_cast<std::size_t>(ids[i]));
        std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    std::vector<std::int32_t> idv(ids.begin(), ids.end());
    const std::size_t tid = table.id;
    return table.tape->record(std::move(out), {table}, [tid, idv = std::move(idv), d](Tape& t, std::span<const double> g) {
        auto& gt = t.grad_buffer(tid);
        for (std::size_t i = 0; i < idv.size(); ++i) {
            const std::size_t r = static_cast<std::size_t>(idv[i]);
            for (std::size_t j = 0; j < d; ++j) gt[r * d + j] += g[i * d + j];
        }
    });
}

Var attention(Var q, Var k, Var v, const AttentionLayout& L) {
    const Tensor& qv = q.value();
    const Tensor& kv = k.value();
    const Tensor& vv = v.value();
    require_2d(qv, "attention");
    require_2d(kv, "attention");
    require_2d(vv, "attention");
    const std::size_t D = qv.dim(1);
    if (kv.dim(1) != D || vv.dim(1) != D || qv.dim(0) != L.batch * L.q_len || kv.dim(0) != L.batch * L.k_len ||
        vv.dim(0) != L.batch * L.k_len) {
        throw DimensionError("attention: operand shapes do not match the layout");
    }
    if (L.heads == 0 || D % L.heads != 0) throw DimensionError("attention: width not divisible by head count");
    if (!L.key_mask.empty() && L.key_mask.size() != L.batch * L.k_len) {
        throw DimensionError("attention: key mask must have batch*k_len entries");
    }
    if (L.causal && L.q_len != L.k_len) throw DimensionError("attention: causal masking needs q_len == k_len");

    const std::size_t B = L.batch, Tq = L.q_len, Tk = L.k_len, H = L.heads, dh = D / H;
    const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
    auto P = std::make_shared<std::vector<double>>(B * H * Tq * Tk, 0.0);
    std::vector<std::uint8_t> mask(L.key_mask.begin(), L.key_mask.end());
    const bool causal = L.causal;

    auto allowed = [&mask, causal, Tk](std::size_t b, std::size_t i, std::size_t j) {
        if (causal && j > i) return false;
        return mask.empty() || mask[b * Tk + j] != 0;
    };

    Tensor out({B * Tq, D});
    std::vector<double> s(Tk);
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t i = 0; i < Tq; ++i) {
                const double* qi = &qv[(b * Tq + i) * D + h * dh];
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j < Tk; ++j) {
                    if (!allowed(b, i, j)) continue;
                    const double* kj = &kv[(b * Tk + j) * D + h * dh];
                    double acc = 0.0;
                    for (std::size_t c = 0; c < dh; ++c) acc += qi[c] * kj[c];
                    s[j] = acc * sc;
                    mx = std::max(mx, s[j]);
                }
                double* p = &(*P)[((b * H + h) * Tq + i) * Tk];
                if (mx == -std::numeric_limits<double>::infinity()) continue;
                double z = 0.0;
                for (std::size_t j = 0; j < Tk; ++j) {
                    if (!allowed(b, i, j)) continue;
                    p[j] = std::exp(s[j] - mx);
                    z += p[j];
                }
                double* oi = &out[(b * Tq + i) * D + h * dh];
                for (std::size_t j = 0; j < Tk; ++j) {
                    if (p[j] == 0.0) continue;
                    p[j] /= z;
                    const double* vj = &vv[(b * Tk + j) * D + h * dh];
                    for (std::size_t c = 0; c < dh; ++c) oi[c] += p[j] * vj[c];
                }
            }
        }
    }

    const std::size_t qid = q.id, kid = k.id, vid = v.id;
    return q.tape->record(std::move(out), {q, k, v}, [=](Tape& t, std::span<const double> g) {
        const Tensor& qv = t.value_of(qid);
        const Tensor& kv = t.value_of(kid);
        const Tensor& vv = t.value_of(vid);
        const bool gq = t.needs_grad(qid), gk = t.needs_grad(kid), gv = t.needs_grad(vid);
        std::vector<double>* dq = gq ? &t.grad_buffer(qid) : nullptr;
        std::vector<double>* dk = gk ? &t.grad_buffer(kid) : nullptr;
        std::vector<double>* dv = gv ? &t.grad_buffer(vid) : nullptr;
        std::vector<double> dp(Tk);
        for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t h = 0; h < H; ++h) {
                for (std::size_t i = 0; i < Tq; ++i) {
                    const double* p = &(*P)[((b * H + h) * Tq + i) * Tk];
                    const double* gi = &g[(b * Tq + i) * D + h * dh];
                    double dot = 0.0;
                    for (std::size_t j = 0; j < Tk; ++j) {
                        if (p[j] == 0.0) {
                            dp[j] = 0.0;
                            continue;
                        }
                        const double* vj = &vv[(b * Tk + j) * D + h * dh];
                        double acc = 0.0;
                        for (std::size_t c = 0; c < dh; ++c) acc += gi[c] * vj[c];
                        dp[j] = acc;
                        dot += acc * p[j];
                        if (gv) {
                            double* dvj = &(*dv)[(b * Tk + j) * D + h * dh];
                            for (std::size_t c = 0; c < dh; ++c) dvj[c] += p[j] * gi[c];
                        }
                    }
                    if (!gq && !gk) continue;
                    const double* qi = &qv[(b * Tq + i) * D + h * dh];
                    for (std::size_t j = 0; j < Tk; ++j) {
                        if (p[j] == 0.0) continue;
                        const double ds = p[j] * (dp[j] - dot) * sc;
                        const double* kj = &kv[(b * Tk + j) * D + h * dh];
                        if (gq) {
                            double* dqi = &(*dq)[(b * Tq + i) * D + h * dh];
                            for (std::size_t c = 0; c < dh; ++c) dqi[c] += ds * kj[c];
                        }
                        if (gk) {
                            double* dkj = &(*dk)[(b * Tk + j) * D + h * dh];
                            for (std::size_t c = 0; c < dh; ++c) dkj[c] += ds * qi[c];
                        }
                    }
                }
            }
        }
    });
}

}  // namespace pg
