// Reverse-mode automatic differentiation over dense matrices.
//
// A Tape owns every Node created during a forward pass, in creation order;
// since an operation can only consume already-existing nodes, that order is
// topological and the backward sweep simply walks it in reverse. Gradients
// accumulate into Node::grad across backward() calls until zero_grad().
#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <string>
#include <vector>

#include "mmlora/matrix.hpp"

namespace mmlora::autodiff {

enum class Op : std::uint8_t {
    leaf,
    matmul,
    add,
    sub,
    scale,
    relu,
    log,
    transpose,
    reshape,
    softmax_rows,
    concat_cols,
    nll,             // -log(probs[label]) of a single distribution row
    nll_mean_rows,   // mean over rows of -log(probs[r][label_r])
    ce_mean_rows,    // fused log-sum-exp cross entropy from logits, mean over rows
    mean_rows,
};

struct Node {
    Matrix value;
    Matrix grad;  // same shape as value, zero until backward() accumulates
    Op op = Op::leaf;
    std::vector<Node*> parents;
    bool requires_grad = false;

    // op-specific payload
    double scalar = 0.0;       // scale factor
    int split = 0;             // concat_cols: column count of the left operand
    std::vector<int> labels;   // nll / ce targets
    std::uint32_t index = 0;   // position on the owning tape
};

class Tape {
  public:
    explicit Tape(Dtype compute = Dtype::f64) : compute_(compute) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Dtype compute_dtype() const { return compute_; }
    std::size_t size() const { return nodes_.size(); }
    const Node& node(std::size_t i) const { return nodes_[i]; }

    Node* leaf(Matrix value, bool requires_grad = false);
    // Leaf whose value is copied from external storage and cached by that
    // storage's address, so a parameter bound twice maps to one node.
    Node* watch(const Matrix& storage, bool requires_grad);
    Node* watched(const Matrix& storage) const;

    Node* matmul(Node* a, Node* b);
    Node* add(Node* a, Node* b);
    Node* sub(Node* a, Node* b);
    Node* scale(Node* a, double c);
    Node* relu(Node* a);
    Node* log(Node* a);
    Node* transpose(Node* a);
    Node* reshape(Node* a, int rows, int cols);
    Node* softmax(Node* a);  // row-wise, max-subtracted
    Node* concat_cols(Node* a, Node* b);
    Node* nll(Node* probs, int label);
    Node* nll_mean(Node* probs, std::vector<int> labels);
    // log-sum-exp fused softmax + nll, mean over rows
    Node* ce_mean(Node* logits, std::vector<int> labels);
    Node* mean_rows(Node* a);

    // Accumulates d(loss)/d(node) into every requires_grad node's grad.
    // Calling twice without zero_grad doubles every gradient exactly.
    void backward(Node* loss);
    void zero_grad();

  private:
    Node* push(Matrix value, Op op, std::vector<Node*> parents);

    std::deque<Node> nodes_;
    std::vector<std::pair<const Matrix*, Node*>> watches_;
    Dtype compute_;
};

// Central-difference gradient verification. `build_loss` must construct the
// scalar loss on a fresh tape, reading the current contents of `params`
// through Tape::watch. Returns max over coordinates of
// |analytic - numeric| / max(1, |analytic|).
double grad_check(const std::function<Node*(Tape&)>& build_loss,
                  const std::vector<Matrix*>& params, double eps);

}  // namespace mmlora::autodiff
