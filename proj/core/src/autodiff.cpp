#include "prm/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <unordered_set>

#include "prm/errors.hpp"
#include "prm/rng.hpp"

namespace prm {

namespace {

// Guards log/div in the listwise loss against exact zeros.
constexpr double kScoreFloor = 1e-300;

bool any_requires_grad(const std::vector<Node*>& parents) {
    return std::any_of(parents.begin(), parents.end(),
                       [](const Node* p) { return p->requires_grad; });
}

}  // namespace

Node* Tape::make(Tensor2 value, std::vector<Node*> parents) {
    Node& n = nodes_.emplace_back();
    n.value = std::move(value);
    n.grad = Tensor2::zeros(n.value.rows, n.value.cols);
    n.parents = std::move(parents);
    n.requires_grad = any_requires_grad(n.parents);
    n.id = static_cast<int>(nodes_.size()) - 1;
    return &n;
}

Node* Tape::constant(Tensor2 v) { return leaf(std::move(v), false); }

Node* Tape::param(Tensor2 v) { return leaf(std::move(v), true); }

Node* Tape::leaf(Tensor2 v, bool requires_grad) {
    Node* n = make(std::move(v), {});
    n->requires_grad = requires_grad;
    return n;
}

Node* Tape::matmul(Node* a, Node* b) {
    Node* out = make(matmul_value(a->value, b->value), {a, b});
    if (out->requires_grad) {
        out->backprop = [out, a, b] {
            if (a->requires_grad) {
                // a.grad += out.grad * b^T
                const Tensor2& g = out->grad;
                const Tensor2& bv = b->value;
                for (int i = 0; i < a->value.rows; ++i) {
                    for (int k = 0; k < a->value.cols; ++k) {
                        double acc = 0.0;
                        for (int j = 0; j < g.cols; ++j) {
                            acc += g.at(i, j) * bv.at(k, j);
                        }
                        a->grad.at(i, k) += acc;
                    }
                }
            }
            if (b->requires_grad) {
                // b.grad += a^T * out.grad
                const Tensor2& g = out->grad;
                const Tensor2& av = a->value;
                for (int k = 0; k < b->value.rows; ++k) {
                    for (int j = 0; j < b->value.cols; ++j) {
                        double acc = 0.0;
                        for (int i = 0; i < av.rows; ++i) {
                            acc += av.at(i, k) * g.at(i, j);
                        }
                        b->grad.at(k, j) += acc;
                    }
                }
            }
        };
    }
    return out;
}

Node* Tape::transpose(Node* a) {
    Node* out = make(transpose_value(a->value), {a});
    if (out->requires_grad) {
        out->backprop = [out, a] {
            for (int i = 0; i < out->grad.rows; ++i) {
                for (int j = 0; j < out->grad.cols; ++j) {
                    a->grad.at(j, i) += out->grad.at(i, j);
                }
            }
        };
    }
    return out;
}

Node* Tape::add(Node* a, Node* b) {
    check_same_shape(a->value, b->value, "add");
    Tensor2 v = a->value;
    for (int i = 0; i < v.size(); ++i) {
        v.data[i] += b->value.data[i];
    }
    Node* out = make(std::move(v), {a, b});
    if (out->requires_grad) {
        out->backprop = [out, a, b] {
            if (a->requires_grad) {
                for (int i = 0; i < out->grad.size(); ++i) {
                    a->grad.data[i] += out->grad.data[i];
                }
            }
            if (b->requires_grad) {
                for (int i = 0; i < out->grad.size(); ++i) {
                    b->grad.data[i] += out->grad.data[i];
                }
            }
        };
    }
    return out;
}

Node* Tape::add_row(Node* a, Node* row) {
    if (row->value.rows != 1 || row->value.cols != a->value.cols) {
        throw ShapeError("add_row: row " + row->value.shape_str() +
                         " does not broadcast over " + a->value.shape_str());
    }
    Tensor2 v = a->value;
    for (int i = 0; i < v.rows; ++i) {
        for (int j = 0; j < v.cols; ++j) {
            v.at(i, j) += row->value.at(0, j);
        }
    }
    Node* out = make(std::move(v), {a, row});
    if (out->requires_grad) {
        out->backprop = [out, a, row] {
            if (a->requires_grad) {
                for (int i = 0; i < out->grad.size(); ++i) {
                    a->grad.data[i] += out->grad.data[i];
                }
            }
            if (row->requires_grad) {
                for (int i = 0; i < out->grad.rows; ++i) {
                    for (int j = 0; j < out->grad.cols; ++j) {
                        row->grad.at(0, j) += out->grad.at(i, j);
                    }
                }
            }
        };
    }
    return out;
}

Node* Tape::mul(Node* a, Node* b) {
    check_same_shape(a->value, b->value, "mul");
    Tensor2 v = a->value;
    for (int i = 0; i < v.size(); ++i) {
        v.data[i] *= b->value.data[i];
    }
    Node* out = make(std::move(v), {a, b});
    if (out->requires_grad) {
        out->backprop = [out, a, b] {
            if (a->requires_grad) {
                for (int i = 0; i < out->grad.size(); ++i) {
                    a->grad.data[i] += out->grad.data[i] * b->value.data[i];
                }
            }
            if (b->requires_grad) {
                for (int i = 0; i < out->grad.size(); ++i) {
                    b->grad.data[i] += out->grad.data[i] * a->value.data[i];
                }
            }
        };
    }
    return out;
}

Node* Tape::affine(Node* a, double scale, double shift) {
    Tensor2 v = a->value;
    for (double& x : v.data) {
        x = x * scale + shift;
    }
    Node* out = make(std::move(v), {a});
    if (out->requires_grad) {
        out->backprop = [out, a, scale] {
            for (int i = 0; i < out->grad.size(); ++i) {
                a->grad.data[i] += out->grad.data[i] * scale;
            }
        };
    }
    return out;
}

Node* Tape::relu(Node* a) {
    Tensor2 v = a->value;
    for (double& x : v.data) {
        x = x > 0.0 ? x : 0.0;
    }
    Node* out = make(std::move(v), {a});
    if (out->requires_grad) {
        out->backprop = [out, a] {
            for (int i = 0; i < out->grad.size(); ++i) {
                if (a->value.data[i] > 0.0) {
                    a->grad.data[i] += out->grad.data[i];
                }
            }
        };
    }
    return out;
}

Node* Tape::sigmoid(Node* a) {
    Tensor2 v = a->value;
    for (double& x : v.data) {
        x = 1.0 / (1.0 + std::exp(-x));
    }
    Node* out = make(std::move(v), {a});
    if (out->requires_grad) {
        out->backprop = [out, a] {
            for (int i = 0; i < out->grad.size(); ++i) {
                const double s = out->value.data[i];
                a->grad.data[i] += out->grad.data[i] * s * (1.0 - s);
            }
        };
    }
    return out;
}

Node* Tape::log(Node* a) {
    Tensor2 v = a->value;
    for (double& x : v.data) {
        x = std::log(x);
    }
    Node* out = make(std::move(v), {a});
    if (out->requires_grad) {
        out->backprop = [out, a] {
            for (int i = 0; i < out->grad.size(); ++i) {
                a->grad.data[i] += out->grad.data[i] / a->value.data[i];
            }
        };
    }
    return out;
}

Node* Tape::clamp(Node* a, double lo, double hi) {
    if (lo > hi) {
        throw ConfigError("clamp: lo > hi");
    }
    Tensor2 v = a->value;
    for (double& x : v.data) {
        x = std::min(std::max(x, lo), hi);
    }
    Node* out = make(std::move(v), {a});
    if (out->requires_grad) {
        out->backprop = [out, a, lo, hi] {
            for (int i = 0; i < out->grad.size(); ++i) {
                const double x = a->value.data[i];
                if (x > lo && x < hi) {
                    a->grad.data[i] += out->grad.data[i];
                }
            }
        };
    }
    return out;
}

Node* Tape::dropout(Node* a, double p, bool training, const DropoutKey& key) {
    if (p < 0.0 || p >= 1.0) {
        throw ConfigError("dropout: p must be in [0, 1), got " + std::to_string(p));
    }
    if (!training || p == 0.0) {
        return a;  // identity in eval mode
    }
    const double keep_scale = 1.0 / (1.0 - p);
    // The mask is a pure function of the key and the entry index.
    std::vector<double> mask(static_cast<std::size_t>(a->value.size()));
    for (std::size_t i = 0; i < mask.size(); ++i) {
        const double u = counter_uniform(key.seed, key.layer, key.step, i);
        mask[i] = u >= p ? keep_scale : 0.0;
    }
    Tensor2 v = a->value;
    for (int i = 0; i < v.size(); ++i) {
        v.data[i] *= mask[static_cast<std::size_t>(i)];
    }
    Node* out = make(std::move(v), {a});
    if (out->requires_grad) {
        out->backprop = [out, a, mask = std::move(mask)] {
            for (int i = 0; i < out->grad.size(); ++i) {
                a->grad.data[i] += out->grad.data[i] * mask[static_cast<std::size_t>(i)];
            }
        };
    }
    return out;
}

Node* Tape::softmax_rows(Node* a, const EntryMask* mask) {
    const Tensor2& x = a->value;
    if (mask != nullptr && static_cast<int>(mask->size()) != x.size()) {
        throw ShapeError("softmax_rows: mask length " + std::to_string(mask->size()) +
                         " does not match " + x.shape_str());
    }
    auto on = [&](int i, int j) {
        return mask == nullptr || (*mask)[static_cast<std::size_t>(i) * x.cols + j] != 0;
    };
    Tensor2 v(x.rows, x.cols);
    for (int i = 0; i < x.rows; ++i) {
        double row_max = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < x.cols; ++j) {
            if (on(i, j)) {
                row_max = std::max(row_max, x.at(i, j));
            }
        }
        if (!std::isfinite(row_max)) {
            throw MaskError("softmax_rows: row " + std::to_string(i) +
                            " has every entry masked");
        }
        double denom = 0.0;
        for (int j = 0; j < x.cols; ++j) {
            if (on(i, j)) {
                const double e = std::exp(x.at(i, j) - row_max);
                v.at(i, j) = e;
                denom += e;
            }
        }
        for (int j = 0; j < x.cols; ++j) {
            if (on(i, j)) {
                v.at(i, j) /= denom;
            }
        }
    }
    EntryMask mask_copy = mask != nullptr ? *mask : EntryMask();
    Node* out = make(std::move(v), {a});
    if (out->requires_grad) {
        out->backprop = [out, a, mask_copy = std::move(mask_copy)] {
            const Tensor2& s = out->value;
            const bool masked = !mask_copy.empty();
            for (int i = 0; i < s.rows; ++i) {
                // dL/dx_j = s_j * (g_j - sum_k g_k s_k) over unmasked entries
                double dot = 0.0;
                for (int j = 0; j < s.cols; ++j) {
                    if (!masked || mask_copy[static_cast<std::size_t>(i) * s.cols + j]) {
                        dot += out->grad.at(i, j) * s.at(i, j);
                    }
                }
                for (int j = 0; j < s.cols; ++j) {
                    if (!masked || mask_copy[static_cast<std::size_t>(i) * s.cols + j]) {
                        a->grad.at(i, j) += s.at(i, j) * (out->grad.at(i, j) - dot);
                    }
                }
            }
        };
    }
    return out;
}

Node* Tape::layer_norm(Node* a, Node* gain, Node* bias, double epsilon) {
    const Tensor2& x = a->value;
    if (x.cols < 1) {
        throw ShapeError("layer_norm: needs at least one column");
    }
    if (gain->value.rows != 1 || gain->value.cols != x.cols || bias->value.rows != 1 ||
        bias->value.cols != x.cols) {
        throw ShapeError("layer_norm: gain " + gain->value.shape_str() + " / bias " +
                         bias->value.shape_str() + " do not match " + x.shape_str());
    }
    const int n = x.cols;
    Tensor2 normalized(x.rows, n);  // pre-gain value, kept for backward
    Tensor2 inv_std(x.rows, 1);
    for (int i = 0; i < x.rows; ++i) {
        double mean = 0.0;
        for (int j = 0; j < n; ++j) {
            mean += x.at(i, j);
        }
        mean /= n;
        double var = 0.0;
        for (int j = 0; j < n; ++j) {
            const double d = x.at(i, j) - mean;
            var += d * d;
        }
        var /= n;
        const double inv = 1.0 / std::sqrt(var + epsilon);
        inv_std.at(i, 0) = inv;
        for (int j = 0; j < n; ++j) {
            normalized.at(i, j) = (x.at(i, j) - mean) * inv;
        }
    }
    Tensor2 v(x.rows, n);
    for (int i = 0; i < x.rows; ++i) {
        for (int j = 0; j < n; ++j) {
            v.at(i, j) = normalized.at(i, j) * gain->value.at(0, j) + bias->value.at(0, j);
        }
    }
    Node* out = make(std::move(v), {a, gain, bias});
    if (out->requires_grad) {
        out->backprop = [out, a, gain, bias, normalized = std::move(normalized),
                         inv_std = std::move(inv_std)] {
            const int cols = out->value.cols;
            for (int i = 0; i < out->value.rows; ++i) {
                if (gain->requires_grad) {
                    for (int j = 0; j < cols; ++j) {
                        gain->grad.at(0, j) += out->grad.at(i, j) * normalized.at(i, j);
                    }
                }
                if (bias->requires_grad) {
                    for (int j = 0; j < cols; ++j) {
                        bias->grad.at(0, j) += out->grad.at(i, j);
                    }
                }
                if (a->requires_grad) {
                    // h = g * gain; dx = inv * (h - mean(h) - y * mean(h .* y))
                    double mean_h = 0.0;
                    double mean_hy = 0.0;
                    for (int j = 0; j < cols; ++j) {
                        const double h = out->grad.at(i, j) * gain->value.at(0, j);
                        mean_h += h;
                        mean_hy += h * normalized.at(i, j);
                    }
                    mean_h /= cols;
                    mean_hy /= cols;
                    const double inv = inv_std.at(i, 0);
                    for (int j = 0; j < cols; ++j) {
                        const double h = out->grad.at(i, j) * gain->value.at(0, j);
                        a->grad.at(i, j) +=
                            inv * (h - mean_h - normalized.at(i, j) * mean_hy);
                    }
                }
            }
        };
    }
    return out;
}

Node* Tape::concat_cols(std::span<Node* const> parts) {
    if (parts.empty()) {
        throw ShapeError("concat_cols: no parts");
    }
    std::vector<const Tensor2*> values;
    values.reserve(parts.size());
    for (Node* p : parts) {
        values.push_back(&p->value);
    }
    Tensor2 v = hconcat_value(values);
    std::vector<Node*> parents(parts.begin(), parts.end());
    Node* out = make(std::move(v), std::move(parents));
    if (out->requires_grad) {
        out->backprop = [out] {
            int offset = 0;
            for (Node* p : out->parents) {
                if (p->requires_grad) {
                    for (int i = 0; i < p->value.rows; ++i) {
                        for (int j = 0; j < p->value.cols; ++j) {
                            p->grad.at(i, j) += out->grad.at(i, offset + j);
                        }
                    }
                }
                offset += p->value.cols;
            }
        };
    }
    return out;
}

Node* Tape::slice_rows(Node* a, int first, int count) {
    if (first < 0 || count < 0 || first + count > a->value.rows) {
        throw ShapeError("slice_rows: [" + std::to_string(first) + ", " +
                         std::to_string(first + count) + ") out of " +
                         a->value.shape_str());
    }
    Tensor2 v(count, a->value.cols);
    for (int i = 0; i < count; ++i) {
        for (int j = 0; j < v.cols; ++j) {
            v.at(i, j) = a->value.at(first + i, j);
        }
    }
    Node* out = make(std::move(v), {a});
    if (out->requires_grad) {
        out->backprop = [out, a, first] {
            for (int i = 0; i < out->grad.rows; ++i) {
                for (int j = 0; j < out->grad.cols; ++j) {
                    a->grad.at(first + i, j) += out->grad.at(i, j);
                }
            }
        };
    }
    return out;
}

Node* Tape::gather_rows(Node* table, std::span<const int> ids) {
    for (int id : ids) {
        if (id < 0 || id >= table->value.rows) {
            throw ShapeError("gather_rows: row " + std::to_string(id) + " out of " +
                             table->value.shape_str());
        }
    }
    Tensor2 v(static_cast<int>(ids.size()), table->value.cols);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        for (int j = 0; j < v.cols; ++j) {
            v.at(static_cast<int>(i), j) = table->value.at(ids[i], j);
        }
    }
    std::vector<int> ids_copy(ids.begin(), ids.end());
    Node* out = make(std::move(v), {table});
    if (out->requires_grad) {
        out->backprop = [out, table, ids_copy = std::move(ids_copy)] {
            for (std::size_t i = 0; i < ids_copy.size(); ++i) {
                for (int j = 0; j < out->grad.cols; ++j) {
                    table->grad.at(ids_copy[i], j) += out->grad.at(static_cast<int>(i), j);
                }
            }
        };
    }
    return out;
}

Node* Tape::sum(Node* a) {
    double total = 0.0;
    for (double v : a->value.data) {
        total += v;
    }
    Node* out = make(Tensor2(1, 1, {total}), {a});
    if (out->requires_grad) {
        out->backprop = [out, a] {
            const double g = out->grad.at(0, 0);
            for (int i = 0; i < a->grad.size(); ++i) {
                a->grad.data[i] += g;
            }
        };
    }
    return out;
}

Node* Tape::listwise_nll(Node* scores, const std::vector<int>& labels,
                         const std::vector<std::uint8_t>& item_mask) {
    const Tensor2& s = scores->value;
    if (s.rows != 1) {
        throw ShapeError("listwise_nll: scores must be a row vector, got " + s.shape_str());
    }
    const std::size_t n = static_cast<std::size_t>(s.cols);
    if (labels.size() != n || item_mask.size() != n) {
        throw ShapeError("listwise_nll: labels/mask length does not match scores " +
                         s.shape_str());
    }
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (item_mask[i] != 0 && labels[i] != 0) {
            total -= std::log(std::max(s.at(0, static_cast<int>(i)), kScoreFloor));
        }
    }
    Node* out = make(Tensor2(1, 1, {total}), {scores});
    if (out->requires_grad) {
        std::vector<std::uint8_t> active(n, 0);
        for (std::size_t i = 0; i < n; ++i) {
            active[i] = (item_mask[i] != 0 && labels[i] != 0) ? 1 : 0;
        }
        out->backprop = [out, scores, active = std::move(active)] {
            const double g = out->grad.at(0, 0);
            for (std::size_t i = 0; i < active.size(); ++i) {
                if (active[i]) {
                    const double v =
                        std::max(scores->value.at(0, static_cast<int>(i)), kScoreFloor);
                    scores->grad.at(0, static_cast<int>(i)) -= g / v;
                }
            }
        };
    }
    return out;
}

void Tape::backward(Node* loss) {
    if (loss == nullptr || loss->value.rows != 1 || loss->value.cols != 1) {
        throw Error("backward: loss must be a [1x1] scalar node");
    }

    // Mark the subgraph reachable from the loss.
    std::unordered_set<Node*> reachable;
    std::vector<Node*> stack = {loss};
    reachable.insert(loss);
    while (!stack.empty()) {
        Node* n = stack.back();
        stack.pop_back();
        for (Node* p : n->parents) {
            if (reachable.insert(p).second) {
                stack.push_back(p);
            }
        }
    }

    // Interior grads are scratch space for this pass; only leaf grads
    // accumulate across repeated backward calls.
    for (Node* n : reachable) {
        if (!n->parents.empty()) {
            n->grad.fill(0.0);
        }
    }
    loss->grad.at(0, 0) += 1.0;

    // Creation order is a topological order, so the reverse sweep visits
    // every node after all of its consumers.
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        Node& n = *it;
        if (n.id > loss->id || !reachable.contains(&n)) {
            continue;
        }
        if (n.backprop) {
            n.backprop();
        }
    }
}

}  // namespace prm
