// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "elder/core/errors.hpp"

namespace elder {

template <class S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// A named, trainable dense parameter. Gradients are accumulated here by
// Tape::backward and consumed by the optimizer.
template <class S>
struct Parameter {
    std::string name;
    MatX<S> value;
    MatX<S> grad;
    bool trainable = true;
    // Set by Tape::backward when this parameter accumulates a gradient; lets
    // the optimizer skip parameters that were never touched in a step.
    bool grad_active = false;

    Parameter() = default;
    Parameter(std::string n, MatX<S> v, bool train = true)
        : name(std::move(n)),
          value(std::move(v)),
          grad(MatX<S>::Zero(value.rows(), value.cols())),
          trainable(train) {}

    void zero_grad() { grad.setZero(); }
};

struct Var {
    int idx = -1;
    bool valid() const { return idx >= 0; }
};

// Reverse-mode tape. Operations append nodes in execution order; backward
// replays them once in reverse order. Single-threaded per training run.
template <class S>
class Tape {
public:
    using Mat = MatX<S>;
    // A local backward rule: given the output gradient, scatter into inputs.
    using Pull = std::function<void(Tape&, const Mat&)>;

    struct Node {
        Mat value;
        Mat grad;
        bool requires_grad = false;
        Parameter<S>* owner = nullptr;
        Pull pull;
    };

    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

    bool grad_enabled() const { return grad_enabled_; }
    int size() const { return static_cast<int>(nodes_.size()); }
    std::size_t backward_visits() const { return backward_visits_; }
    std::size_t clamp_warnings() const { return clamp_warnings_; }
    void note_clamp() { ++clamp_warnings_; }

    const Mat& value(Var v) const {
        const Node& n = nodes_[check(v)];
        return n.owner != nullptr ? n.owner->value : n.value;
    }
    const Mat& grad(Var v) const { return nodes_[check(v)].grad; }
    bool requires_grad(Var v) const { return nodes_[check(v)].requires_grad; }

    Var constant(Mat v) {
        return push(std::move(v), false, nullptr, {}, "constant");
    }

    Var leaf(Mat v, bool needs_grad) {
        return push(std::move(v), grad_enabled_ && needs_grad, nullptr, {}, "leaf");
    }

    // Parameter nodes reference the owning Parameter's storage; no copy.
    Var param(Parameter<S>& p) {
        Node n;
        n.requires_grad = grad_enabled_ && p.trainable;
        n.owner = &p;
        nodes_.push_back(std::move(n));
        return Var{size() - 1};
    }

    Var op(Mat value, bool needs_grad, Pull pull, const char* name) {
        bool rg = grad_enabled_ && needs_grad;
        return push(std::move(value), rg, nullptr, rg ? std::move(pull) : Pull{}, name);
    }

    Mat& grad_buf(Var v) { return nodes_[check(v)].grad; }

    void accum(Var v, const Mat& g) {
        Node& n = nodes_[check(v)];
        if (!n.requires_grad) return;
        n.grad += g;
    }

    // Populates grads of every requires_grad node reachable from `loss`, then
    // flushes leaf grads into their owning Parameters. Parameters the loss
    // does not depend on receive nothing (zero grad after zero_grad).
    void backward(Var loss) {
        const Mat& lv = value(loss);
        if (lv.rows() != 1 || lv.cols() != 1)
            throw ContractError("backward requires a scalar loss");
        backward_visits_ = 0;
        for (Node& n : nodes_)
            if (n.requires_grad) {
                const Mat& val = n.owner != nullptr ? n.owner->value : n.value;
                n.grad = Mat::Zero(val.rows(), val.cols());
            }
        if (!nodes_[check(loss)].requires_grad) return;
        nodes_[check(loss)].grad = Mat::Ones(1, 1);
        for (int i = loss.idx; i >= 0; --i) {
            Node& n = nodes_[static_cast<std::size_t>(i)];
            if (!n.requires_grad) continue;
            ++backward_visits_;
            if (n.pull) n.pull(*this, n.grad);
            if (n.owner != nullptr && n.owner->trainable) {
                n.owner->grad += n.grad;
                n.owner->grad_active = true;
            }
        }
    }

private:
    std::size_t check(Var v) const {
        if (!v.valid() || v.idx >= size()) throw ContractError("invalid tape variable");
        return static_cast<std::size_t>(v.idx);
    }

    Var push(Mat value, bool needs_grad, Parameter<S>* owner, Pull pull, const char* name) {
        if (!value.allFinite())
            throw NumericError(std::string("non-finite values produced at node '") + name + "'");
        Node n;
        n.value = std::move(value);
        n.requires_grad = needs_grad;
        n.owner = owner;
        n.pull = std::move(pull);
        nodes_.push_back(std::move(n));
        return Var{size() - 1};
    }

    std::vector<Node> nodes_;
    bool grad_enabled_;
    std::size_t backward_visits_ = 0;
    std::size_t clamp_warnings_ = 0;
};

// ---------------------------------------------------------------------------
// Ops. Free functions; each appends one node carrying its local backward rule.
// ---------------------------------------------------------------------------

template <class S>
Var matmul(Tape<S>& t, Var a, Var b) {
    const auto& av = t.value(a);
    const auto& bv = t.value(b);
    if (av.cols() != bv.rows())
        throw DimensionError("matmul inner dimensions disagree: " + std::to_string(av.cols()) +
                             " vs " + std::to_string(bv.rows()));
    MatX<S> y = av * bv;
    bool rg = t.requires_grad(a) || t.requires_grad(b);
    return t.op(std::move(y), rg,
                [a, b](Tape<S>& tp, const MatX<S>& g) {
                    if (tp.requires_grad(a)) tp.grad_buf(a).noalias() += g * tp.value(b).transpose();
                    if (tp.requires_grad(b)) tp.grad_buf(b).noalias() += tp.value(a).transpose() * g;
                },
                "matmul");
}

template <class S>
Var add(Tape<S>& t, Var a, Var b) {
    const auto& av = t.value(a);
    const auto& bv = t.value(b);
    if (av.rows() != bv.rows() || av.cols() != bv.cols())
        throw DimensionError("add shapes disagree");
    bool rg = t.requires_grad(a) || t.requires_grad(b);
    return t.op(av + bv, rg,
                [a, b](Tape<S>& tp, const MatX<S>& g) {
                    tp.accum(a, g);
                    tp.accum(b, g);
                },
                "add");
}

// Broadcast a 1xN bias over every row.
template <class S>
Var add_rowvec(Tape<S>& t, Var a, Var bias) {
    const auto& av = t.value(a);
    const auto& bv = t.value(bias);
    if (bv.rows() != 1 || bv.cols() != av.cols())
        throw DimensionError("add_rowvec bias must be 1 x cols(a)");
    MatX<S> y = av.rowwise() + bv.row(0);
    bool rg = t.requires_grad(a) || t.requires_grad(bias);
    return t.op(std::move(y), rg,
                [a, bias](Tape<S>& tp, const MatX<S>& g) {
                    tp.accum(a, g);
                    if (tp.requires_grad(bias)) tp.grad_buf(bias) += g.colwise().sum();
                },
                "add_rowvec");
}

template <class S>
Var scale(Tape<S>& t, Var a, S c) {
    return t.op(t.value(a) * c, t.requires_grad(a),
                [a, c](Tape<S>& tp, const MatX<S>& g) { tp.accum(a, MatX<S>(g * c)); }, "scale");
}

// Add a constant matrix (e.g. an attention mask); no gradient into the mask.
template <class S>
Var add_const(Tape<S>& t, Var a, const MatX<S>& m) {
    const auto& av = t.value(a);
    if (av.rows() != m.rows() || av.cols() != m.cols())
        throw DimensionError("add_const shapes disagree");
    return t.op(av + m, t.requires_grad(a),
                [a](Tape<S>& tp, const MatX<S>& g) { tp.accum(a, g); }, "add_const");
}

template <class S>
Var transpose(Tape<S>& t, Var a) {
    return t.op(t.value(a).transpose(), t.requires_grad(a),
                [a](Tape<S>& tp, const MatX<S>& g) { tp.accum(a, MatX<S>(g.transpose())); },
                "transpose");
}

// Scale a matrix by a 1x1 tape scalar (used for score-weighted LoRA deltas).
template <class S>
Var scale_by(Tape<S>& t, Var m, Var s) {
    const auto& sv = t.value(s);
    if (sv.rows() != 1 || sv.cols() != 1) throw DimensionError("scale_by expects a 1x1 scalar");
    bool rg = t.requires_grad(m) || t.requires_grad(s);
    return t.op(MatX<S>(t.value(m) * sv(0, 0)), rg,
                [m, s](Tape<S>& tp, const MatX<S>& g) {
                    if (tp.requires_grad(m)) tp.grad_buf(m) += g * tp.value(s)(0, 0);
                    if (tp.requires_grad(s)) tp.grad_buf(s)(0, 0) += (g.array() * tp.value(m).array()).sum();
                },
                "scale_by");
}

template <class S>
Var pick(Tape<S>& t, Var a, int r, int c) {
    const auto& av = t.value(a);
    if (r < 0 || r >= av.rows() || c < 0 || c >= av.cols())
        throw IndexError("pick out of range");
    MatX<S> y(1, 1);
    y(0, 0) = av(r, c);
    return t.op(std::move(y), t.requires_grad(a),
                [a, r, c](Tape<S>& tp, const MatX<S>& g) {
                    if (tp.requires_grad(a)) tp.grad_buf(a)(r, c) += g(0, 0);
                },
                "pick");
}

// -log(max(a[r,c], floor)). The clamp keeps a degenerate score from aborting
// training; each clamp bumps the tape's warning counter.
template <class S>
Var neg_log_pick(Tape<S>& t, Var a, int r, int c, S floor) {
    const auto& av = t.value(a);
    if (r < 0 || r >= av.rows() || c < 0 || c >= av.cols())
        throw IndexError("neg_log_pick out of range");
    S x = av(r, c);
    if (x < floor) {
        x = floor;
        t.note_clamp();
    }
    MatX<S> y(1, 1);
    y(0, 0) = -std::log(x);
    return t.op(std::move(y), t.requires_grad(a),
                [a, r, c, x](Tape<S>& tp, const MatX<S>& g) {
                    if (tp.requires_grad(a)) tp.grad_buf(a)(r, c) += -g(0, 0) / x;
                },
                "neg_log_pick");
}

// sum over (row, col) pairs of -log(max(a[r,c], floor)); one node for a whole
// batch of picks. Clamps bump the tape's warning counter like neg_log_pick.
template <class S>
Var neg_log_picks(Tape<S>& t, Var a, const std::vector<std::pair<int, int>>& cells, S floor) {
    const auto& av = t.value(a);
    std::vector<S> clamped(cells.size());
    S total = S(0);
    for (std::size_t i = 0; i < cells.size(); ++i) {
        const auto [r, c] = cells[i];
        if (r < 0 || r >= av.rows() || c < 0 || c >= av.cols())
            throw IndexError("neg_log_picks out of range");
        S x = av(r, c);
        if (x < floor) {
            x = floor;
            t.note_clamp();
        }
        clamped[i] = x;
        total -= std::log(x);
    }
    MatX<S> y(1, 1);
    y(0, 0) = total;
    return t.op(std::move(y), t.requires_grad(a),
                [a, cells, clamped](Tape<S>& tp, const MatX<S>& g) {
                    if (!tp.requires_grad(a)) return;
                    auto& buf = tp.grad_buf(a);
                    for (std::size_t i = 0; i < cells.size(); ++i)
                        buf(cells[i].first, cells[i].second) += -g(0, 0) / clamped[i];
                },
                "neg_log_picks");
}

// Multi-label ranking hinge on a logit matrix: for every row r, every
// assigned column a and every other column u, adds max(0, x[r,u] - x[r,a] +
// margin). Zero loss (and zero gradient) once each assigned logit leads every
// competitor by the margin, so satisfied rows stop moving.
template <class S>
Var margin_hinge_rows(Tape<S>& t, Var logits, const std::vector<std::vector<int>>& assigned,
                      S margin) {
    const auto& x = t.value(logits);
    if (static_cast<long>(assigned.size()) != x.rows())
        throw DimensionError("margin_hinge_rows: one assigned set per row required");
    // Per (row, assigned) pair, hinge against the single strongest competitor
    // (multiclass SVM form): max(0, max_u x[r,u] - x[r,a] + margin). Gradients
    // stay bounded by the number of assigned entries no matter how many
    // competitors currently violate the margin.
    const auto top_competitor = [](const MatX<S>& m, const std::vector<int>& a, long r) {
        long best = -1;
        S hi = -std::numeric_limits<S>::infinity();
        for (long u = 0; u < m.cols(); ++u) {
            if (std::find(a.begin(), a.end(), int(u)) != a.end()) continue;
            if (m(r, u) > hi) {
                hi = m(r, u);
                best = u;
            }
        }
        return best;
    };
    S total = S(0);
    for (long r = 0; r < x.rows(); ++r) {
        const long u = top_competitor(x, assigned[std::size_t(r)], r);
        if (u < 0) continue; // every column assigned: nothing to separate
        for (int a : assigned[std::size_t(r)]) {
            if (a < 0 || a >= x.cols()) throw IndexError("margin_hinge_rows column out of range");
            const S v = x(r, u) - x(r, a) + margin;
            if (v > S(0)) total += v;
        }
    }
    MatX<S> y(1, 1);
    y(0, 0) = total;
    // Capture the forward values so the backward pass recomputes the active set
    // consistently even if someone mutates parameters in between.
    MatX<S> xc = x;
    return t.op(std::move(y), t.requires_grad(logits),
                [logits, assigned, margin, xc, top_competitor](Tape<S>& tp, const MatX<S>& g) {
                    if (!tp.requires_grad(logits)) return;
                    auto& buf = tp.grad_buf(logits);
                    for (long r = 0; r < xc.rows(); ++r) {
                        const long u = top_competitor(xc, assigned[std::size_t(r)], r);
                        if (u < 0) continue;
                        for (int a : assigned[std::size_t(r)]) {
                            if (xc(r, u) - xc(r, int(a)) + margin > S(0)) {
                                buf(r, u) += g(0, 0);
                                buf(r, int(a)) -= g(0, 0);
                            }
                        }
                    }
                },
                "margin_hinge_rows");
}

// sum(a .* w) for a constant weight matrix w; returns 1x1.
template <class S>
Var dot_const(Tape<S>& t, Var a, const MatX<S>& w) {
    const auto& av = t.value(a);
    if (av.rows() != w.rows() || av.cols() != w.cols())
        throw DimensionError("dot_const shapes disagree");
    MatX<S> y(1, 1);
    y(0, 0) = (av.array() * w.array()).sum();
    return t.op(std::move(y), t.requires_grad(a),
                [a, w](Tape<S>& tp, const MatX<S>& g) {
                    if (tp.requires_grad(a)) tp.grad_buf(a) += g(0, 0) * w;
                },
                "dot_const");
}

template <class S>
Var sum_all(Tape<S>& t, Var a) {
    MatX<S> y(1, 1);
    y(0, 0) = t.value(a).sum();
    return t.op(std::move(y), t.requires_grad(a),
                [a](Tape<S>& tp, const MatX<S>& g) {
                    if (tp.requires_grad(a))
                        tp.grad_buf(a).array() += g(0, 0);
                },
                "sum_all");
}

// GELU (erf form); smooth everywhere, which keeps finite-difference checks clean.
template <class S>
Var gelu(Tape<S>& t, Var a) {
    const auto& av = t.value(a);
    const S inv_sqrt2 = S(0.7071067811865475244);
    MatX<S> y = av.unaryExpr([inv_sqrt2](S x) { return S(0.5) * x * (S(1) + std::erf(x * inv_sqrt2)); });
    return t.op(std::move(y), t.requires_grad(a),
                [a, inv_sqrt2](Tape<S>& tp, const MatX<S>& g) {
                    if (!tp.requires_grad(a)) return;
                    const auto& x = tp.value(a);
                    const S inv_sqrt2pi = S(0.3989422804014326779);
                    MatX<S> d = x.unaryExpr([inv_sqrt2, inv_sqrt2pi](S v) {
                        S phi = S(0.5) * (S(1) + std::erf(v * inv_sqrt2));
                        S pdf = inv_sqrt2pi * std::exp(S(-0.5) * v * v);
                        return phi + v * pdf;
                    });
                    tp.grad_buf(a).array() += g.array() * d.array();
                },
                "gelu");
}

// Row-wise softmax with max-subtraction.
template <class S>
Var softmax_rows(Tape<S>& t, Var z) {
    const auto& zv = t.value(z);
    if (zv.rows() == 0 || zv.cols() == 0) throw DimensionError("softmax of empty input");
    MatX<S> y(zv.rows(), zv.cols());
    for (Eigen::Index r = 0; r < zv.rows(); ++r) {
        S m = zv.row(r).maxCoeff();
        Eigen::Array<S, 1, Eigen::Dynamic> e = (zv.row(r).array() - m).exp();
        y.row(r) = e / e.sum();
    }
    return t.op(std::move(y), t.requires_grad(z),
                [z](Tape<S>& tp, const MatX<S>& g) {
                    if (!tp.requires_grad(z)) return;
                    // dz_i = y_i * (g_i - sum_j g_j y_j), per row; y recomputed from z.
                    const auto& zv2 = tp.value(z);
                    MatX<S>& gz = tp.grad_buf(z);
                    for (Eigen::Index r = 0; r < zv2.rows(); ++r) {
                        S m = zv2.row(r).maxCoeff();
                        Eigen::Array<S, 1, Eigen::Dynamic> e = (zv2.row(r).array() - m).exp();
                        Eigen::Array<S, 1, Eigen::Dynamic> yr = e / e.sum();
                        S dot = (g.row(r).array() * yr).sum();
                        gz.row(r).array() += yr * (g.row(r).array() - dot);
                    }
                },
                "softmax");
}

template <class S>
Var slice_cols(Tape<S>& t, Var a, int c0, int w) {
    const auto& av = t.value(a);
    if (c0 < 0 || w <= 0 || c0 + w > av.cols()) throw IndexError("slice_cols out of range");
    return t.op(av.middleCols(c0, w), t.requires_grad(a),
                [a, c0, w](Tape<S>& tp, const MatX<S>& g) {
                    if (tp.requires_grad(a)) tp.grad_buf(a).middleCols(c0, w) += g;
                },
                "slice_cols");
}

template <class S>
Var concat_cols(Tape<S>& t, const std::vector<Var>& parts) {
    if (parts.empty()) throw DimensionError("concat_cols of nothing");
    Eigen::Index rows = t.value(parts[0]).rows();
    Eigen::Index cols = 0;
    bool rg = false;
    for (Var p : parts) {
        if (t.value(p).rows() != rows) throw DimensionError("concat_cols row mismatch");
        cols += t.value(p).cols();
        rg = rg || t.requires_grad(p);
    }
    MatX<S> y(rows, cols);
    Eigen::Index off = 0;
    for (Var p : parts) {
        y.middleCols(off, t.value(p).cols()) = t.value(p);
        off += t.value(p).cols();
    }
    return t.op(std::move(y), rg,
                [parts](Tape<S>& tp, const MatX<S>& g) {
                    Eigen::Index off2 = 0;
                    for (Var p : parts) {
                        Eigen::Index w = tp.value(p).cols();
                        if (tp.requires_grad(p)) tp.grad_buf(p) += g.middleCols(off2, w);
                        off2 += w;
                    }
                },
                "concat_cols");
}

template <class S>
Var row_at(Tape<S>& t, Var a, int r) {
    const auto& av = t.value(a);
    if (r < 0 || r >= av.rows()) throw IndexError("row_at out of range");
    return t.op(av.row(r), t.requires_grad(a),
                [a, r](Tape<S>& tp, const MatX<S>& g) {
                    if (tp.requires_grad(a)) tp.grad_buf(a).row(r) += g;
                },
                "row_at");
}

// Row-wise layer norm with learnable gain/bias (both 1 x cols).
template <class S>
Var layer_norm(Tape<S>& t, Var x, Var gain, Var bias, S eps = S(1e-5)) {
    const auto& xv = t.value(x);
    const auto& gv = t.value(gain);
    const auto& bv = t.value(bias);
    if (gv.rows() != 1 || gv.cols() != xv.cols() || bv.rows() != 1 || bv.cols() != xv.cols())
        throw DimensionError("layer_norm gain/bias must be 1 x cols(x)");
    const Eigen::Index n = xv.cols();
    MatX<S> y(xv.rows(), n);
    for (Eigen::Index r = 0; r < xv.rows(); ++r) {
        S mu = xv.row(r).mean();
        S var = (xv.row(r).array() - mu).square().sum() / S(n);
        S inv = S(1) / std::sqrt(var + eps);
        y.row(r) = (((xv.row(r).array() - mu) * inv) * gv.row(0).array()) + bv.row(0).array();
    }
    bool rg = t.requires_grad(x) || t.requires_grad(gain) || t.requires_grad(bias);
    return t.op(std::move(y), rg,
                [x, gain, bias, eps](Tape<S>& tp, const MatX<S>& g) {
                    const auto& xv2 = tp.value(x);
                    const auto& gv2 = tp.value(gain);
                    const Eigen::Index n2 = xv2.cols();
                    for (Eigen::Index r = 0; r < xv2.rows(); ++r) {
                        S mu = xv2.row(r).mean();
                        S var = (xv2.row(r).array() - mu).square().sum() / S(n2);
                        S inv = S(1) / std::sqrt(var + eps);
                        Eigen::Array<S, 1, Eigen::Dynamic> xhat = (xv2.row(r).array() - mu) * inv;
                        Eigen::Array<S, 1, Eigen::Dynamic> gy = g.row(r).array();
                        if (tp.requires_grad(gain)) tp.grad_buf(gain).row(0).array() += gy * xhat;
                        if (tp.requires_grad(bias)) tp.grad_buf(bias).row(0).array() += gy;
                        if (tp.requires_grad(x)) {
                            Eigen::Array<S, 1, Eigen::Dynamic> gh = gy * gv2.row(0).array();
                            S mean_gh = gh.mean();
                            S mean_ghx = (gh * xhat).mean();
                            tp.grad_buf(x).row(r).array() += inv * (gh - mean_gh - xhat * mean_ghx);
                        }
                    }
                },
                "layer_norm");
}

// Gather rows of an embedding table; backward scatter-adds.
template <class S>
Var embedding(Tape<S>& t, Var table, const std::vector<int>& ids) {
    const auto& ev = t.value(table);
    MatX<S> y(static_cast<Eigen::Index>(ids.size()), ev.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= ev.rows()) throw IndexError("embedding id out of range");
        y.row(static_cast<Eigen::Index>(i)) = ev.row(ids[i]);
    }
    return t.op(std::move(y), t.requires_grad(table),
                [table, ids](Tape<S>& tp, const MatX<S>& g) {
                    if (!tp.requires_grad(table)) return;
                    MatX<S>& ge = tp.grad_buf(table);
                    for (std::size_t i = 0; i < ids.size(); ++i)
                        ge.row(ids[i]) += g.row(static_cast<Eigen::Index>(i));
                },
                "embedding");
}

// Masked token-level negative log-likelihood, averaged over unmasked positions.
template <class S>
Var cross_entropy(Tape<S>& t, Var logits, const std::vector<int>& targets,
                  const std::vector<bool>& mask) {
    const auto& lv = t.value(logits);
    const auto T = static_cast<std::size_t>(lv.rows());
    const auto V = lv.cols();
    if (targets.size() != T || mask.size() != T)
        throw DimensionError("cross_entropy targets/mask length must equal rows(logits)");
    std::size_t n_active = 0;
    S total = S(0);
    for (std::size_t i = 0; i < T; ++i) {
        if (!mask[i]) continue;
        if (targets[i] < 0 || targets[i] >= V) throw IndexError("cross_entropy target id out of range");
        ++n_active;
        const auto row = lv.row(static_cast<Eigen::Index>(i));
        S m = row.maxCoeff();
        S lse = std::log((row.array() - m).exp().sum()) + m;
        total += lse - row(targets[i]);
    }
    if (n_active == 0) throw DegenerateInputError("cross_entropy: all positions masked");
    MatX<S> y(1, 1);
    y(0, 0) = total / S(n_active);
    return t.op(std::move(y), t.requires_grad(logits),
                [logits, targets, mask, n_active](Tape<S>& tp, const MatX<S>& g) {
                    if (!tp.requires_grad(logits)) return;
                    const auto& lv2 = tp.value(logits);
                    MatX<S>& gl = tp.grad_buf(logits);
                    const S w = g(0, 0) / S(n_active);
                    for (std::size_t i = 0; i < targets.size(); ++i) {
                        if (!mask[i]) continue;
                        const auto row = lv2.row(static_cast<Eigen::Index>(i));
                        S m = row.maxCoeff();
                        Eigen::Array<S, 1, Eigen::Dynamic> e = (row.array() - m).exp();
                        Eigen::Array<S, 1, Eigen::Dynamic> p = e / e.sum();
                        gl.row(static_cast<Eigen::Index>(i)).array() += w * p;
                        gl(static_cast<Eigen::Index>(i), targets[i]) -= w;
                    }
                },
                "cross_entropy");
}

} // namespace elder
