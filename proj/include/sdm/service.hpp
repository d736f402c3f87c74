#pragma once

#include <memory>
#include <string>

#include "sdm/config.hpp"
#include "sdm/inference.hpp"

namespace sdm {

// HTTP inference service.
//   GET  /health              status and model config
//   GET  /palette             class id, name, hue and color per class
//   POST /generate            {layout, guidance_scale, guidance, steps, seed, num_samples, clamp_y0} -> {job_id}
//   POST /edit                {source_image, edited_layout, region_mask, sampler fields} -> {job_id}
//   GET  /jobs/{id}           {id, state, progress, error}
//   GET  /jobs/{id}/result    {images: [base64 PNG]}
// Layouts are palette-indexed PNGs (base64) or nested integer arrays; masks are
// grayscale PNGs or arrays. Jobs run on a bounded worker pool; a full queue
// answers 429.
class Service {
public:
    Service(InferenceModel model, ServiceConfig config, SamplerConfig defaults = {});
    ~Service();
    Service(const Service&) = delete;
    Service& operator=(const Service&) = delete;

    // Binds the listening socket; port 0 picks a free port. Returns the port.
    int bind(const std::string& host, int port);
    // Serves until stop(). Requires a prior bind().
    void run();
    void stop();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace sdm
