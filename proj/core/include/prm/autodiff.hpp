#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "prm/tensor.hpp"

namespace prm {

/// One value in the computation graph. Owned by a Tape and alive until the
/// tape is destroyed. `value` is written once by the producing op and treated
/// as immutable afterwards, so read-only sharing across threads is safe.
struct Node {
    Tensor2 value;
    Tensor2 grad;  // same shape as value, zero until backward
    bool requires_grad = false;
    std::vector<Node*> parents;
    std::function<void()> backprop;  // pulls this->grad into the parents' grad
    int id = 0;                      // creation index; creation order is topological
};

/// Key for the deterministic dropout stream: the mask at a given (seed,
/// layer, step) is fixed no matter how calls interleave.
struct DropoutKey {
    std::uint64_t seed = 0;
    std::uint64_t layer = 0;
    std::uint64_t step = 0;
};

/// Per-entry mask for softmax_rows, row-major over the input shape.
/// Nonzero means the entry participates.
using EntryMask = std::vector<std::uint8_t>;

/// Define-by-run computation tape. Build a fresh tape per training step;
/// nodes are invalidated when the tape goes away. Graph construction and
/// backward are single-threaded.
class Tape {
public:
    Node* constant(Tensor2 v);
    Node* param(Tensor2 v);  // leaf with requires_grad = true
    Node* leaf(Tensor2 v, bool requires_grad);

    /// [m x k] * [k x n] -> [m x n].
    Node* matmul(Node* a, Node* b);
    Node* transpose(Node* a);
    Node* add(Node* a, Node* b);
    /// Broadcast a [1 x n] row over every row of a [m x n] matrix.
    Node* add_row(Node* a, Node* row);
    /// Elementwise product.
    Node* mul(Node* a, Node* b);
    /// Elementwise a * scale + shift.
    Node* affine(Node* a, double scale, double shift);
    Node* scale(Node* a, double c) { return affine(a, c, 0.0); }
    Node* relu(Node* a);
    Node* sigmoid(Node* a);
    /// Natural log; caller is responsible for keeping inputs positive
    /// (compose with clamp).
    Node* log(Node* a);
    /// Clamp into [lo, hi]; gradient is zero outside the interval.
    Node* clamp(Node* a, double lo, double hi);
    /// Inverted dropout: zero with probability p, scale survivors by
    /// 1/(1-p). Identity when !training or p == 0. Requires 0 <= p < 1.
    Node* dropout(Node* a, double p, bool training, const DropoutKey& key);
    /// Per-row softmax, numerically stabilized by subtracting the row max
    /// over unmasked entries. Masked entries are exactly 0 in the output.
    /// A fully masked row is an error.
    Node* softmax_rows(Node* a, const EntryMask* mask = nullptr);
    /// Per-row normalization to mean 0 / variance 1 (epsilon-guarded),
    /// then elementwise gain and bias ([1 x n] each, broadcast over rows).
    Node* layer_norm(Node* a, Node* gain, Node* bias, double epsilon);
    Node* concat_cols(std::span<Node* const> parts);
    Node* slice_rows(Node* a, int first, int count);
    /// Pick rows of `table` by index; duplicates accumulate in backward.
    Node* gather_rows(Node* table, std::span<const int> ids);
    /// Sum of all entries -> [1 x 1].
    Node* sum(Node* a);
    /// -sum over unmasked clicked items of log(score). scores is [1 x n];
    /// labels and item_mask have length n. Padded (masked-out) items are
    /// excluded entirely.
    Node* listwise_nll(Node* scores, const std::vector<int>& labels,
                       const std::vector<std::uint8_t>& item_mask);

    /// Reverse pass from a scalar [1 x 1] loss. Seeds loss grad with 1 and
    /// visits every reachable node exactly once in reverse creation order
    /// (a valid reverse topological order for a define-by-run graph).
    /// Repeated calls accumulate into .grad; there is no implicit zeroing.
    void backward(Node* loss);

    std::size_t size() const { return nodes_.size(); }

private:
    Node* make(Tensor2 value, std::vector<Node*> parents);
    std::deque<Node> nodes_;
};

}  // namespace prm
