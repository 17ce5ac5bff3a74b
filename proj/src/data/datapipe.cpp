#include "data/datapipe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace l3d::data {

namespace {

// All (H, W) pairs satisfying divisibility, pixel and aspect constraints.
std::vector<std::pair<int, int>> valid_shapes(const BudgetConfig& cfg) {
    std::vector<std::pair<int, int>> shapes;
    for (int h = cfg.patch; h * cfg.patch <= cfg.pixel_max; h += cfg.patch) {
        for (int w = cfg.patch; h * w <= cfg.pixel_max; w += cfg.patch) {
            if (h * w < cfg.pixel_min) continue;
            const double aspect = static_cast<double>(w) / h;
            if (aspect < cfg.aspect_min || aspect > cfg.aspect_max) continue;
            shapes.emplace_back(h, w);
        }
    }
    return shapes;
}

}  // namespace

void BudgetConfig::validate() const {
    if (patch < 1 || pixel_min < 1 || pixel_max < pixel_min)
        throw io::ConfigError("budget config: bad pixel range");
    if (aspect_min <= 0.0 || aspect_max < aspect_min)
        throw io::ConfigError("budget config: bad aspect range");
    if (views_min < 1 || views_max < views_min)
        throw io::ConfigError("budget config: bad view range");
    if (token_budget < 1) throw io::ConfigError("budget config: bad token budget");
    if (valid_shapes(*this).empty())
        throw io::ConfigError("budget config: no (H, W) satisfies the constraints");
}

void MaskPolicy::validate() const {
    if (mask_probability < 0.0 || mask_probability > 1.0 || drop_all_probability < 0.0 ||
        drop_all_probability > 1.0)
        throw io::ConfigError("mask policy: probabilities must be in [0, 1]");
    if (ratio_min < 0.0 || ratio_max > 1.0 || ratio_min > ratio_max)
        throw io::ConfigError("mask policy: bad ratio range");
}

ShapeSample sample_shape(const BudgetConfig& cfg, Rng& rng) {
    cfg.validate();

    // Sample aspect then pixel count, snap to the nearest valid shape.
    const double aspect = rng.uniform(cfg.aspect_min, cfg.aspect_max);
    const double pixels = rng.uniform(static_cast<double>(cfg.pixel_min),
                                      static_cast<double>(cfg.pixel_max));
    const auto shapes = valid_shapes(cfg);
    double best_cost = 1e300;
    std::pair<int, int> best = shapes.front();
    for (const auto& [h, w] : shapes) {
        const double a = static_cast<double>(w) / h;
        const double cost = std::abs(std::log(a / aspect)) +
                            std::abs(std::log(static_cast<double>(h) * w / pixels));
        if (cost < best_cost) {
            best_cost = cost;
            best = {h, w};
        }
    }

    ShapeSample s;
    s.height = best.first;
    s.width = best.second;
    s.n_views = cfg.views_min +
                static_cast<int>(rng.uniform_index(
                    static_cast<std::uint64_t>(cfg.views_max - cfg.views_min + 1)));
    const int tokens_per_view = (s.height / cfg.patch) * (s.width / cfg.patch);
    s.batch_size = std::max(1, cfg.token_budget / (s.n_views * tokens_per_view));
    return s;
}

ShapeSample sample_shape(const BudgetConfig& cfg, std::uint64_t seed) {
    Rng rng(seed);
    return sample_shape(cfg, rng);
}

std::size_t mixture_sample(const std::vector<double>& weights, Rng& rng) {
    double total = 0.0;
    for (double w : weights) {
        if (w < 0.0) throw io::ConfigError("mixture weights must be nonnegative");
        total += w;
    }
    if (total <= 0.0) throw io::ConfigError("mixture weights sum to zero");
    const double u = rng.uniform() * total;
    double acc = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        acc += weights[i];
        if (u < acc) return i;
    }
    return weights.size() - 1;
}

std::size_t mixture_sample(const std::vector<double>& weights, std::uint64_t seed) {
    Rng rng(seed);
    return mixture_sample(weights, rng);
}

MultiViewBatch apply_view_mask(MultiViewBatch batch, const MaskPolicy& policy, Stage stage,
                               Rng& rng) {
    policy.validate();
    for (auto& sample : batch.samples) {
        const int n = static_cast<int>(sample.views.size());
        if (n == 0) continue;

        if (stage != Stage::Rae && rng.uniform() < policy.drop_all_probability) {
            std::fill(sample.visible.begin(), sample.visible.end(), false);
            continue;
        }
        if (rng.uniform() >= policy.mask_probability) continue;
        if (n == 1) continue;  // nothing to mask while keeping one visible

        const double fraction = rng.uniform(policy.ratio_min, policy.ratio_max);
        // Keep the realized fraction inside the policy range when possible.
        const int n_min = static_cast<int>(std::ceil(policy.ratio_min * n - 1e-9));
        const int n_max = static_cast<int>(std::floor(policy.ratio_max * n + 1e-9));
        int masked = static_cast<int>(std::lround(fraction * n));
        if (n_min <= n_max)
            masked = std::clamp(masked, n_min, n_max);
        masked = std::clamp(masked, policy.mask_probability >= 1.0 ? 1 : 0, n - 1);

        // Partial Fisher-Yates pick of `masked` distinct view indices.
        std::vector<int> order(static_cast<std::size_t>(n));
        std::iota(order.begin(), order.end(), 0);
        for (int i = 0; i < masked; ++i) {
            const auto j = i + static_cast<int>(rng.uniform_index(
                                   static_cast<std::uint64_t>(n - i)));
            std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
            sample.visible[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = false;
        }
    }
    return batch;
}

MultiViewBatch apply_view_mask(MultiViewBatch batch, const MaskPolicy& policy, Stage stage,
                               std::uint64_t seed) {
    Rng rng(seed);
    return apply_view_mask(std::move(batch), policy, stage, rng);
}

scenegen::RenderedView resize_view(const scenegen::RenderedView& view, int height, int width) {
    if (view.height == height && view.width == width) return view;
    scenegen::RenderedView out;
    out.height = height;
    out.width = width;
    const std::size_t pixels = static_cast<std::size_t>(height) * width;
    out.image.resize(pixels * 3);
    out.pointmap.resize(pixels * 3);
    out.valid.resize(pixels);

    const double sx = static_cast<double>(view.width) / width;
    const double sy = static_cast<double>(view.height) / height;
    for (int r = 0; r < height; ++r) {
        for (int c = 0; c < width; ++c) {
            const std::size_t idx = static_cast<std::size_t>(r) * width + c;
            const double fy = (r + 0.5) * sy - 0.5;
            const double fx = (c + 0.5) * sx - 0.5;
            const int y0 = std::clamp(static_cast<int>(std::floor(fy)), 0, view.height - 1);
            const int x0 = std::clamp(static_cast<int>(std::floor(fx)), 0, view.width - 1);
            const int y1 = std::min(y0 + 1, view.height - 1);
            const int x1 = std::min(x0 + 1, view.width - 1);
            const double wy = std::clamp(fy - y0, 0.0, 1.0);
            const double wx = std::clamp(fx - x0, 0.0, 1.0);
            for (int ch = 0; ch < 3; ++ch) {
                auto px = [&](int y, int x) {
                    return static_cast<double>(
                        view.image[(static_cast<std::size_t>(y) * view.width + x) * 3 + ch]);
                };
                out.image[idx * 3 + ch] = static_cast<float>(
                    (1 - wy) * ((1 - wx) * px(y0, x0) + wx * px(y0, x1)) +
                    wy * ((1 - wx) * px(y1, x0) + wx * px(y1, x1)));
            }
            // Nearest neighbour keeps geometry on surfaces.
            const int yn = std::clamp(static_cast<int>(std::lround(fy)), 0, view.height - 1);
            const int xn = std::clamp(static_cast<int>(std::lround(fx)), 0, view.width - 1);
            const std::size_t src = static_cast<std::size_t>(yn) * view.width + xn;
            for (int ch = 0; ch < 3; ++ch)
                out.pointmap[idx * 3 + ch] = view.pointmap[src * 3 + ch];
            out.valid[idx] = view.valid[src];
        }
    }

    out.camera = view.camera;
    out.camera.width = width;
    out.camera.height = height;
    out.camera.fx = view.camera.fx / sx;
    out.camera.fy = view.camera.fy / sy;
    out.camera.cx = view.camera.cx / sx;
    out.camera.cy = view.camera.cy / sy;
    return out;
}

Dataset::Dataset(const std::filesystem::path& root) {
    for (const auto& dir : scenegen::list_scene_dirs(root))
        scenes_.push_back(scenegen::read_scene_dir(dir));
    if (scenes_.empty())
        throw io::ConfigError("dataset is empty: " + root.string());
}

Sample assemble_sample(const scenegen::StoredScene& scene, const std::vector<int>& view_indices,
                       int height, int width) {
    Sample sample;
    sample.category = scene.category;
    std::vector<geom::Camera> cams;
    for (int idx : view_indices) {
        if (idx < 0 || idx >= static_cast<int>(scene.views.size()))
            throw io::ConfigError("assemble_sample: view index out of range");
        auto view = resize_view(scene.views[static_cast<std::size_t>(idx)], height, width);
        cams.push_back(view.camera);
        sample.views.push_back(std::move(view));
    }
    auto [normalized, scale] = geom::normalize_poses(cams);
    const Eigen::Matrix3d R0t = cams.front().R.transpose();
    const Eigen::Vector3d t0 = cams.front().t;
    for (std::size_t i = 0; i < sample.views.size(); ++i) {
        auto& view = sample.views[i];
        view.camera = normalized[i];
        // Point maps move into the same normalized frame.
        auto& pm = view.pointmap;
        for (std::size_t px = 0; px < view.valid.size(); ++px) {
            if (!view.valid[px]) continue;
            const std::size_t p = px * 3;
            Eigen::Vector3d world(pm[p], pm[p + 1], pm[p + 2]);
            const Eigen::Vector3d local = R0t * (world - t0) / scale;
            pm[p] = static_cast<float>(local.x());
            pm[p + 1] = static_cast<float>(local.y());
            pm[p + 2] = static_cast<float>(local.z());
        }
    }
    sample.visible.assign(sample.views.size(), true);
    return sample;
}

MultiViewBatch Dataset::make_batch(const ShapeSample& shape, Rng& rng) const {
    MultiViewBatch batch;
    batch.height = shape.height;
    batch.width = shape.width;
    for (int b = 0; b < shape.batch_size; ++b) {
        const auto& scene = scenes_[rng.uniform_index(scenes_.size())];
        const int available = static_cast<int>(scene.views.size());
        const int n_views = std::min(shape.n_views, available);

        std::vector<int> order(static_cast<std::size_t>(available));
        std::iota(order.begin(), order.end(), 0);
        for (int i = 0; i < n_views; ++i) {
            const auto j = i + static_cast<int>(rng.uniform_index(
                                   static_cast<std::uint64_t>(available - i)));
            std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
        }
        std::sort(order.begin(), order.begin() + n_views);
        order.resize(static_cast<std::size_t>(n_views));

        batch.samples.push_back(assemble_sample(scene, order, shape.height, shape.width));
    }
    return batch;
}

}  // namespace l3d::data
