#pragma once

#include <string>
#include <vector>

#include "prm/autodiff.hpp"
#include "prm/tensor.hpp"

namespace prm {

/// Named handle to one learnable tensor of a model.
struct ParamRef {
    std::string name;
    Tensor2* tensor;
};

/// One parameter bound into a tape for a training step: the persistent
/// tensor together with the leaf node whose grad the optimizer reads.
struct BoundTensor {
    std::string name;
    Tensor2* tensor;
    Node* node;
};

/// Copy every referenced tensor into a requires-grad leaf on the tape.
inline std::vector<BoundTensor> bind_params(Tape& tape, const std::vector<ParamRef>& refs) {
    std::vector<BoundTensor> bound;
    bound.reserve(refs.size());
    for (const ParamRef& ref : refs) {
        bound.push_back({ref.name, ref.tensor, tape.param(*ref.tensor)});
    }
    return bound;
}

}  // namespace prm
