#pragma once

#include <torch/torch.h>

#include <vector>

namespace sdm {

// The condition fed to the denoiser: a one-hot class map [C, H, W] plus an
// optional binary instance-edge channel [1, H, W]. The null layout has every
// channel identically zero.
struct SemanticLayout {
    torch::Tensor onehot;
    torch::Tensor edge;  // undefined when the edge channel is not used
    int num_classes = 0;

    bool has_edge() const { return edge.defined(); }
    int64_t height() const { return onehot.size(1); }
    int64_t width() const { return onehot.size(2); }
    int channels() const { return num_classes + (has_edge() ? 1 : 0); }

    // [C (+1), H, W] float tensor: one-hot block followed by the edge channel.
    torch::Tensor condition() const;
    bool is_null() const;
};

SemanticLayout make_null_layout(int num_classes, bool with_edge, int64_t height, int64_t width);

// Stacks layouts into a [B, L, H, W] condition batch.
torch::Tensor stack_conditions(const std::vector<SemanticLayout>& layouts);

}  // namespace sdm
