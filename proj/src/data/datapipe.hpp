#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "core/rng.hpp"
#include "io/config.hpp"
#include "scenegen/scenegen.hpp"

namespace l3d::data {

struct ShapeSample {
    int height = 0, width = 0;
    int n_views = 0;
    int batch_size = 0;
};

struct BudgetConfig {
    int patch = 14;
    int pixel_min = 2500, pixel_max = 6500;
    double aspect_min = 0.7, aspect_max = 1.8;
    int views_min = 2, views_max = 8;
    int token_budget = 1024;

    void validate() const;
};

struct MaskPolicy {
    double mask_probability = 0.0;
    double ratio_min = 0.0, ratio_max = 0.0;
    double drop_all_probability = 0.0;

    void validate() const;
};

enum class Stage { Rae, DitStage1, DitStage2 };

// One scene sample inside a batch. Cameras are pose-normalized; invisible
// views keep their cameras but their pixels must never be read downstream.
struct Sample {
    std::vector<scenegen::RenderedView> views;
    std::vector<bool> visible;
    int category = 0;
    bool has_pointmaps = true;
};

struct MultiViewBatch {
    std::vector<Sample> samples;
    int height = 0, width = 0;
};

// Dynamic resolution/aspect/view-count sampling under a token budget.
ShapeSample sample_shape(const BudgetConfig& cfg, std::uint64_t seed);
ShapeSample sample_shape(const BudgetConfig& cfg, Rng& rng);

// Weighted dataset index draw; probability weight_i / sum(weights).
std::size_t mixture_sample(const std::vector<double>& weights, Rng& rng);
std::size_t mixture_sample(const std::vector<double>& weights, std::uint64_t seed);

// Random view masking for both training stages. Keeps at least one view
// visible unless the drop-all branch fires (DiT unconditioning).
MultiViewBatch apply_view_mask(MultiViewBatch batch, const MaskPolicy& policy, Stage stage,
                               std::uint64_t seed);
MultiViewBatch apply_view_mask(MultiViewBatch batch, const MaskPolicy& policy, Stage stage,
                               Rng& rng);

// Bilinear image resize with intrinsics rescale; pointmaps/valid use nearest
// so hit points stay on surfaces.
scenegen::RenderedView resize_view(const scenegen::RenderedView& view, int height, int width);

// Resize the chosen views to (height, width), pose-normalize their cameras
// to the first view and move pointmaps into the normalized frame.
Sample assemble_sample(const scenegen::StoredScene& scene, const std::vector<int>& view_indices,
                       int height, int width);

// In-memory dataset over the scenegen directory layout.
class Dataset {
public:
    explicit Dataset(const std::filesystem::path& root);

    std::size_t size() const { return scenes_.size(); }
    const scenegen::StoredScene& scene(std::size_t i) const { return scenes_[i]; }

    // Draws batch_size scenes, picks n_views views per scene, resizes to the
    // sampled shape and pose-normalizes the chosen cameras.
    MultiViewBatch make_batch(const ShapeSample& shape, Rng& rng) const;

private:
    std::vector<scenegen::StoredScene> scenes_;
};

}  // namespace l3d::data
