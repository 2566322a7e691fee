#include "mmlora/autodiff.hpp"

#include <cmath>
#include <stdexcept>

namespace mmlora::autodiff {

Node* Tape::push(Matrix value, Op op, std::vector<Node*> parents) {
    if (compute_ == Dtype::f32 && op != Op::leaf) {
        // kernels already ran in f32; this covers ops assembled from doubles
        value = round_to_f32(value);
    }
    Node& n = nodes_.emplace_back();
    n.value = std::move(value);
    n.grad = Matrix(n.value.rows(), n.value.cols());
    n.op = op;
    n.parents = std::move(parents);
    n.index = static_cast<std::uint32_t>(nodes_.size() - 1);
    for (Node* p : n.parents) {
        if (p->requires_grad) n.requires_grad = true;
    }
    return &n;
}

Node* Tape::leaf(Matrix value, bool requires_grad) {
    Node* n = push(std::move(value), Op::leaf, {});
    n->requires_grad = requires_grad;
    return n;
}

Node* Tape::watch(const Matrix& storage, bool requires_grad) {
    for (auto& [key, node] : watches_) {
        if (key == &storage) return node;
    }
    Node* n = leaf(storage, requires_grad);
    watches_.emplace_back(&storage, n);
    return n;
}

Node* Tape::watched(const Matrix& storage) const {
    for (const auto& [key, node] : watches_) {
        if (key == &storage) return node;
    }
    return nullptr;
}

Node* Tape::matmul(Node* a, Node* b) {
    return push(mmlora::matmul(a->value, b->value, compute_), Op::matmul, {a, b});
}

Node* Tape::add(Node* a, Node* b) {
    return push(mmlora::add(a->value, b->value, compute_), Op::add, {a, b});
}

Node* Tape::sub(Node* a, Node* b) {
    return push(mmlora::sub(a->value, b->value, compute_), Op::sub, {a, b});
}

Node* Tape::scale(Node* a, double c) {
    Node* n = push(mmlora::scale(a->value, c, compute_), Op::scale, {a});
    n->scalar = c;
    return n;
}

Node* Tape::relu(Node* a) {
    return push(mmlora::relu(a->value), Op::relu, {a});
}

Node* Tape::log(Node* a) {
    return push(mmlora::elem_log(a->value, compute_), Op::log, {a});
}

Node* Tape::transpose(Node* a) {
    return push(mmlora::transpose(a->value), Op::transpose, {a});
}

Node* Tape::reshape(Node* a, int rows, int cols) {
    Node* n = push(mmlora::reshape(a->value, rows, cols), Op::reshape, {a});
    return n;
}

Node* Tape::softmax(Node* a) {
    return push(mmlora::softmax_rows(a->value, compute_), Op::softmax_rows, {a});
}

Node* Tape::concat_cols(Node* a, Node* b) {
    Node* n = push(mmlora::concat_cols(a->value, b->value), Op::concat_cols, {a, b});
    n->split = a->value.cols();
    return n;
}

Node* Tape::nll(Node* probs, int label) {
    if (probs->value.rows() != 1) {
        throw ShapeError("nll: expected a single distribution row, got " + probs->value.shape_str());
    }
    if (label < 0 || label >= probs->value.cols()) {
        throw std::out_of_range("nll: label " + std::to_string(label) + " out of range for " +
                                std::to_string(probs->value.cols()) + " classes");
    }
    Matrix out(1, 1);
    out(0, 0) = -std::log(probs->value(0, label));
    Node* n = push(std::move(out), Op::nll, {probs});
    n->labels = {label};
    return n;
}

Node* Tape::nll_mean(Node* probs, std::vector<int> labels) {
    const int r = probs->value.rows(), c = probs->value.cols();
    if (static_cast<int>(labels.size()) != r) {
        throw ShapeError("nll_mean: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(r) + " rows");
    }
    double acc = 0.0;
    for (int i = 0; i < r; ++i) {
        if (labels[i] < 0 || labels[i] >= c) {
            throw std::out_of_range("nll_mean: label " + std::to_string(labels[i]) +
                                    " out of range for " + std::to_string(c) + " classes");
        }
        acc += -std::log(probs->value(i, labels[i]));
    }
    Matrix out(1, 1);
    out(0, 0) = acc / r;
    Node* n = push(std::move(out), Op::nll_mean_rows, {probs});
    n->labels = std::move(labels);
    return n;
}

Node* Tape::ce_mean(Node* logits, std::vector<int> labels) {
    const int r = logits->value.rows(), c = logits->value.cols();
    if (static_cast<int>(labels.size()) != r) {
        throw ShapeError("ce_mean: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(r) + " rows");
    }
    double acc = 0.0;
    for (int i = 0; i < r; ++i) {
        if (labels[i] < 0 || labels[i] >= c) {
            throw std::out_of_range("ce_mean: label " + std::to_string(labels[i]) +
                                    " out of range for " + std::to_string(c) + " classes");
        }
        double mx = logits->value(i, 0);
        for (int j = 1; j < c; ++j) mx = std::max(mx, logits->value(i, j));
        double s = 0.0;
        for (int j = 0; j < c; ++j) s += std::exp(logits->value(i, j) - mx);
        acc += mx + std::log(s) - logits->value(i, labels[i]);
    }
    Matrix out(1, 1);
    out(0, 0) = acc / r;
    Node* n = push(std::move(out), Op::ce_mean_rows, {logits});
    n->labels = std::move(labels);
    return n;
}

Node* Tape::mean_rows(Node* a) {
    return push(mmlora::mean_rows(a->value, compute_), Op::mean_rows, {a});
}

namespace {

// dst (adjoint slot) += src, allocating on first touch
void adj_acc(Matrix& dst, const Matrix& src) {
    if (dst.rows() == 0 && dst.cols() == 0) {
        dst = src;
    } else {
        accumulate(dst, src);
    }
}

}  // namespace

void Tape::backward(Node* loss) {
    if (loss->value.rows() != 1 || loss->value.cols() != 1) {
        throw ShapeError("backward: loss must be 1x1, got " + loss->value.shape_str());
    }
    // Per-call adjoints live in scratch so that repeated backward() calls
    // add identical contributions into Node::grad.
    std::vector<Matrix> adj(nodes_.size());
    Matrix seed(1, 1);
    seed(0, 0) = 1.0;
    adj[loss->index] = std::move(seed);

    for (std::size_t pos = loss->index + 1; pos-- > 0;) {
        Node& n = nodes_[pos];
        Matrix& g = adj[pos];
        if (g.rows() == 0 && g.cols() == 0) continue;
        if (!n.requires_grad) continue;
        switch (n.op) {
            case Op::leaf:
                break;
            case Op::matmul: {
                Node* a = n.parents[0];
                Node* b = n.parents[1];
                if (a->requires_grad) adj_acc(adj[a->index], mmlora::matmul(g, mmlora::transpose(b->value), compute_));
                if (b->requires_grad) adj_acc(adj[b->index], mmlora::matmul(mmlora::transpose(a->value), g, compute_));
                break;
            }
            case Op::add: {
                if (n.parents[0]->requires_grad) adj_acc(adj[n.parents[0]->index], g);
                if (n.parents[1]->requires_grad) adj_acc(adj[n.parents[1]->index], g);
                break;
            }
            case Op::sub: {
                if (n.parents[0]->requires_grad) adj_acc(adj[n.parents[0]->index], g);
                if (n.parents[1]->requires_grad) adj_acc(adj[n.parents[1]->index], mmlora::scale(g, -1.0, compute_));
                break;
            }
            case Op::scale: {
                if (n.parents[0]->requires_grad) adj_acc(adj[n.parents[0]->index], mmlora::scale(g, n.scalar, compute_));
                break;
            }
            case Op::relu: {
                Node* a = n.parents[0];
                if (a->requires_grad) adj_acc(adj[a->index], mmlora::elem_mul(g, relu_mask(a->value), compute_));
                break;
            }
            case Op::log: {
                Node* a = n.parents[0];
                if (!a->requires_grad) break;
                Matrix d(g.rows(), g.cols());
                for (std::size_t i = 0; i < g.size(); ++i) d.values()[i] = g.values()[i] / a->value.values()[i];
                adj_acc(adj[a->index], compute_ == Dtype::f32 ? round_to_f32(d) : d);
                break;
            }
            case Op::transpose: {
                if (n.parents[0]->requires_grad) adj_acc(adj[n.parents[0]->index], mmlora::transpose(g));
                break;
            }
            case Op::reshape: {
                Node* a = n.parents[0];
                if (a->requires_grad) adj_acc(adj[a->index], mmlora::reshape(g, a->value.rows(), a->value.cols()));
                break;
            }
            case Op::softmax_rows: {
                Node* a = n.parents[0];
                if (!a->requires_grad) break;
                const Matrix& s = n.value;
                Matrix d(s.rows(), s.cols());
                for (int i = 0; i < s.rows(); ++i) {
                    double dot = 0.0;
                    for (int j = 0; j < s.cols(); ++j) dot += g(i, j) * s(i, j);
                    for (int j = 0; j < s.cols(); ++j) d(i, j) = s(i, j) * (g(i, j) - dot);
                }
                adj_acc(adj[a->index], compute_ == Dtype::f32 ? round_to_f32(d) : d);
                break;
            }
            case Op::concat_cols: {
                Node* a = n.parents[0];
                Node* b = n.parents[1];
                if (a->requires_grad) {
                    Matrix da(g.rows(), n.split);
                    for (int i = 0; i < g.rows(); ++i)
                        for (int j = 0; j < n.split; ++j) da(i, j) = g(i, j);
                    adj_acc(adj[a->index], da);
                }
                if (b->requires_grad) {
                    Matrix db(g.rows(), g.cols() - n.split);
                    for (int i = 0; i < g.rows(); ++i)
                        for (int j = 0; j < db.cols(); ++j) db(i, j) = g(i, n.split + j);
                    adj_acc(adj[b->index], db);
                }
                break;
            }
            case Op::nll: {
                Node* p = n.parents[0];
                if (!p->requires_grad) break;
                Matrix d(p->value.rows(), p->value.cols());
                const int label = n.labels[0];
                d(0, label) = -g(0, 0) / p->value(0, label);
                adj_acc(adj[p->index], d);
                break;
            }
            case Op::nll_mean_rows: {
                Node* p = n.parents[0];
                if (!p->requires_grad) break;
                Matrix d(p->value.rows(), p->value.cols());
                const double w = g(0, 0) / p->value.rows();
                for (int i = 0; i < p->value.rows(); ++i) {
                    const int label = n.labels[i];
                    d(i, label) = -w / p->value(i, label);
                }
                adj_acc(adj[p->index], d);
                break;
            }
            case Op::ce_mean_rows: {
                Node* z = n.parents[0];
                if (!z->requires_grad) break;
                Matrix probs = mmlora::softmax_rows(z->value, compute_);
                const double w = g(0, 0) / z->value.rows();
                for (int i = 0; i < probs.rows(); ++i) {
                    for (int j = 0; j < probs.cols(); ++j) probs(i, j) *= w;
                    probs(i, n.labels[i]) -= w;
                }
                adj_acc(adj[z->index], probs);
                break;
            }
            case Op::mean_rows: {
                Node* a = n.parents[0];
                if (!a->requires_grad) break;
                Matrix d(a->value.rows(), a->value.cols());
                const double inv = 1.0 / a->value.rows();
                for (int i = 0; i < d.rows(); ++i)
                    for (int j = 0; j < d.cols(); ++j) d(i, j) = g(0, j) * inv;
                adj_acc(adj[a->index], d);
                break;
            }
        }
    }

    for (std::size_t pos = 0; pos <= loss->index; ++pos) {
        Node& n = nodes_[pos];
        if (!n.requires_grad) continue;
        Matrix& g = adj[pos];
        if (g.rows() == 0 && g.cols() == 0) continue;
        accumulate(n.grad, compute_ == Dtype::f32 ? round_to_f32(g) : g);
    }
}

void Tape::zero_grad() {
    for (Node& n : nodes_) n.grad.fill(0.0);
}

double grad_check(const std::function<Node*(Tape&)>& build_loss,
                  const std::vector<Matrix*>& params, double eps) {
    if (!(eps > 0.0)) throw std::invalid_argument("grad_check: eps must be positive");

    std::vector<Matrix> analytic;
    {
        Tape tape;
        Node* loss = build_loss(tape);
        if (!loss->value.all_finite()) throw std::runtime_error("grad_check: loss is non-finite at base point");
        tape.backward(loss);
        for (const Matrix* p : params) {
            Node* n = tape.watched(*p);
            if (n == nullptr) {
                throw std::runtime_error("grad_check: a parameter was never watched by build_loss");
            }
            analytic.push_back(n->grad);
        }
    }

    auto eval = [&](std::size_t pi, std::size_t ci) {
        Tape tape;
        Node* loss = build_loss(tape);
        const double v = loss->value(0, 0);
        if (!std::isfinite(v)) {
            throw std::runtime_error("grad_check: non-finite loss while perturbing parameter " +
                                     std::to_string(pi) + " coordinate " + std::to_string(ci));
        }
        return v;
    };

    double worst = 0.0;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Matrix& p = *params[pi];
        for (std::size_t ci = 0; ci < p.size(); ++ci) {
            const double keep = p.values()[ci];
            p.values()[ci] = keep + eps;
            const double fp = eval(pi, ci);
            p.values()[ci] = keep - eps;
            const double fm = eval(pi, ci);
            p.values()[ci] = keep;
            const double numeric = (fp - fm) / (2.0 * eps);
            const double a = analytic[pi].values()[ci];
            const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
            if (!std::isfinite(err)) {
                throw std::runtime_error("grad_check: non-finite difference at parameter " +
                                         std::to_string(pi) + " coordinate " + std::to_string(ci));
            }
            worst = std::max(worst, err);
        }
    }
    return worst;
}

}  // namespace mmlora::autodiff
