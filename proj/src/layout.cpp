#include "sdm/layout.hpp"

#include <stdexcept>

namespace sdm {

torch::Tensor SemanticLayout::condition() const {
    if (!onehot.defined()) {
        throw std::logic_error("SemanticLayout: empty layout");
    }
    auto block = onehot.to(torch::kFloat32);
    if (has_edge()) {
        return torch::cat({block, edge.to(torch::kFloat32)}, 0);
    }
    return block;
}

bool SemanticLayout::is_null() const {
    if (onehot.count_nonzero().item<int64_t>() != 0) return false;
    return !has_edge() || edge.count_nonzero().item<int64_t>() == 0;
}

SemanticLayout make_null_layout(int num_classes, bool with_edge, int64_t height, int64_t width) {
    SemanticLayout layout;
    layout.num_classes = num_classes;
    layout.onehot = torch::zeros({num_classes, height, width});
    if (with_edge) layout.edge = torch::zeros({1, height, width});
    return layout;
}

torch::Tensor stack_conditions(const std::vector<SemanticLayout>& layouts) {
    if (layouts.empty()) {
        throw std::invalid_argument("stack_conditions: no layouts");
    }
    std::vector<torch::Tensor> parts;
    parts.reserve(layouts.size());
    for (const auto& l : layouts) parts.push_back(l.condition());
    return torch::stack(parts, 0);
}

}  // namespace sdm
