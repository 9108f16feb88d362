#include "misa/attribution.hpp"

#include <cmath>
#include <stdexcept>

#include "misa/rng.hpp"

namespace misa {

std::string BaselinePolicy::id() const {
    switch (kind) {
        case Kind::black: return "black";
        case Kind::dataset_mean: return "dataset_mean(" + source_split + ")";
        case Kind::sample_set:
            return "sample_set(n=" + std::to_string(sample_count) +
                   ",seed=" + std::to_string(rng_seed) + "," + source_split + ")";
    }
    throw std::logic_error("BaselinePolicy::id: unreachable");
}

json BaselinePolicy::to_json() const {
    json j;
    switch (kind) {
        case Kind::black: j["kind"] = "black"; break;
        case Kind::dataset_mean: j["kind"] = "dataset_mean"; break;
        case Kind::sample_set: j["kind"] = "sample_set"; break;
    }
    if (kind != Kind::black) j["source_split"] = source_split;
    if (kind == Kind::sample_set) {
        j["sample_count"] = sample_count;
        j["rng_seed"] = rng_seed;
    }
    return j;
}

BaselinePolicy BaselinePolicy::from_json(const json& j) {
    BaselinePolicy p;
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "black")
        p.kind = Kind::black;
    else if (kind == "dataset_mean")
        p.kind = Kind::dataset_mean;
    else if (kind == "sample_set")
        p.kind = Kind::sample_set;
    else
        throw std::invalid_argument("unknown baseline policy kind: " + kind);
    p.source_split = j.value("source_split", std::string("validation"));
    p.sample_count = j.value("sample_count", 8);
    p.rng_seed = j.value("rng_seed", std::uint64_t{1});
    return p;
}

std::vector<Tensor> resolve_baselines(const BaselinePolicy& policy,
                                      const std::vector<int>& image_shape,
                                      const LabeledDataset* source) {
    switch (policy.kind) {
        case BaselinePolicy::Kind::black: {
            Tensor black(image_shape);
            return {std::move(black)};
        }
        case BaselinePolicy::Kind::dataset_mean: {
            if (source == nullptr)
                throw std::invalid_argument("dataset_mean baseline needs a source dataset");
            Tensor mean = dataset_mean_image(*source);
            if (mean.shape != image_shape)
                throw std::invalid_argument("baseline source shape " + shape_to_string(mean.shape) +
                                            " does not match image shape " +
                                            shape_to_string(image_shape));
            return {std::move(mean)};
        }
        case BaselinePolicy::Kind::sample_set: {
            if (source == nullptr)
                throw std::invalid_argument("sample_set baseline needs a source dataset");
            if (policy.sample_count < 1)
                throw std::invalid_argument("sample_set baseline needs sample_count >= 1");
            if (static_cast<std::size_t>(policy.sample_count) > source->size())
                throw std::invalid_argument("sample_set baseline wants " +
                                            std::to_string(policy.sample_count) + " images but " +
                                            source->name + " holds " +
                                            std::to_string(source->size()));
            Rng rng(policy.rng_seed);
            const auto idx = rng.sample_without_replacement(
                source->size(), static_cast<std::size_t>(policy.sample_count));
            std::vector<Tensor> out;
            out.reserve(idx.size());
            for (std::size_t i : idx) {
                if (source->images[i].shape != image_shape)
                    throw std::invalid_argument("baseline source shape mismatch at sample " +
                                                std::to_string(i));
                out.push_back(source->images[i]);
            }
            return out;
        }
    }
    throw std::logic_error("resolve_baselines: unreachable");
}

AttributionMap integrated_gradients(const NetworkModel& model, const Tensor& image, int target,
                                    int boundary, const std::vector<Tensor>& baselines, int steps,
                                    const std::string& baseline_id) {
    if (!model.is_monitored(boundary))
        throw std::invalid_argument("attribution boundary " + std::to_string(boundary) +
                                    " is not monitored by this model");
    if (steps < 1) throw std::invalid_argument("integrated gradients need steps >= 1");
    if (baselines.empty()) throw std::invalid_argument("integrated gradients need a baseline");
    if (target < 0 || target >= model.class_count)
        throw std::invalid_argument("attribution target class out of range");

    const Tensor feat = boundary_activation(model, image, boundary);
    const std::size_t n = feat.size();

    // The Riemann sum and the baseline average run in double; each gradient
    // evaluation itself stays in the network's float arithmetic.
    std::vector<double> mean_map(n, 0.0);
    Tensor point(feat.shape);
    for (const Tensor& base_img : baselines) {
        const Tensor base = boundary_activation(model, base_img, boundary);
        std::vector<double> path_sum(n, 0.0);
        for (int k = 1; k <= steps; ++k) {
            const float t = (static_cast<float>(k) - 0.5f) / static_cast<float>(steps);
            for (std::size_t i = 0; i < n; ++i)
                point.data[i] = base.data[i] + t * (feat.data[i] - base.data[i]);
            const Tensor grad = suffix_logit_grad(model, boundary, point, target);
            for (std::size_t i = 0; i < n; ++i) path_sum[i] += static_cast<double>(grad.data[i]);
        }
        for (std::size_t i = 0; i < n; ++i)
            mean_map[i] += static_cast<double>(feat.data[i] - base.data[i]) * path_sum[i] /
                           static_cast<double>(steps);
    }

    AttributionMap map;
    map.boundary = boundary;
    map.target_class = target;
    map.steps = steps;
    map.baseline_id = baseline_id;
    map.values = Tensor(feat.shape);
    const double scale = 1.0 / static_cast<double>(baselines.size());
    for (std::size_t i = 0; i < n; ++i) {
        const double v = mean_map[i] * scale;
        if (!std::isfinite(v))
            throw std::runtime_error("attribution produced a non-finite value at index " +
                                     std::to_string(i));
        map.values.data[i] = static_cast<float>(v);
    }
    return map;
}

double completeness_gap(const AttributionMap& map, const NetworkModel& model, const Tensor& image,
                        const Tensor& baseline, int target) {
    const Tensor feat = boundary_activation(model, image, map.boundary);
    const Tensor base = boundary_activation(model, baseline, map.boundary);
    const Tensor lx = suffix_logits(model, map.boundary, feat);
    const Tensor lb = suffix_logits(model, map.boundary, base);
    double total = 0.0;
    for (float v : map.values.data) total += static_cast<double>(v);
    const double gap = static_cast<double>(lx.data[static_cast<std::size_t>(target)]) -
                       static_cast<double>(lb.data[static_cast<std::size_t>(target)]);
    return std::abs(total - gap);
}

std::vector<AttributionMap> batch_attribute(const NetworkModel& model,
                                            const std::vector<Tensor>& images,
                                            const std::vector<int>& targets, int boundary,
                                            const std::vector<Tensor>& baselines, int steps,
                                            const std::string& baseline_id) {
    if (!targets.empty() && targets.size() != images.size())
        throw std::invalid_argument("batch_attribute: " + std::to_string(targets.size()) +
                                    " targets for " + std::to_string(images.size()) + " images");
    std::vector<AttributionMap> maps;
    maps.reserve(images.size());
    for (std::size_t i = 0; i < images.size(); ++i) {
        const int target = targets.empty() ? predict(model, images[i]) : targets[i];
        try {
            maps.push_back(integrated_gradients(model, images[i], target, boundary, baselines,
                                                steps, baseline_id));
        } catch (const std::exception& e) {
            throw std::runtime_error("batch_attribute: item " + std::to_string(i) + ": " +
                                     e.what());
        }
    }
    return maps;
}

void save_attribution_maps(const std::vector<AttributionMap>& maps, const std::string& path) {
    if (maps.empty()) throw std::invalid_argument("save_attribution_maps: nothing to save");
    const AttributionMap& first = maps.front();
    json targets = json::array();
    for (const AttributionMap& m : maps) {
        if (m.boundary != first.boundary || m.steps != first.steps ||
            m.baseline_id != first.baseline_id || !m.values.same_shape(first.values))
            throw std::invalid_argument(
                "save_attribution_maps: maps in one file must share boundary, shape, steps, and "
                "baseline");
        targets.push_back(m.target_class);
    }
    json header;
    header["kind"] = "attribution_maps";
    header["boundary"] = first.boundary;
    header["shape"] = first.values.shape;
    header["steps"] = first.steps;
    header["baseline"] = first.baseline_id;
    header["targets"] = targets;
    header["count"] = maps.size();

    std::vector<std::uint8_t> blob;
    blob.reserve(maps.size() * first.values.size() * 4);
    for (const AttributionMap& m : maps)
        append_f32_span_le(blob, m.values.data.data(), m.values.size());
    write_blob_file(path, header, blob);
}

std::vector<AttributionMap> load_attribution_maps(const std::string& path) {
    const BlobFile file = read_blob_file(path);
    if (file.header.value("kind", "") != "attribution_maps")
        throw std::runtime_error(path + ": not an attribution map file");
    const auto shape = file.header.at("shape").get<std::vector<int>>();
    const auto targets = file.header.at("targets").get<std::vector<int>>();
    const std::size_t count = file.header.at("count").get<std::size_t>();
    if (targets.size() != count)
        throw std::runtime_error(path + ": target list does not match map count");

    const std::size_t numel = Tensor::numel(shape);
    BlobReader reader(file.blob.data(), file.blob.size());
    std::vector<AttributionMap> maps(count);
    for (std::size_t i = 0; i < count; ++i) {
        AttributionMap& m = maps[i];
        m.boundary = file.header.at("boundary").get<int>();
        m.steps = file.header.at("steps").get<int>();
        m.baseline_id = file.header.at("baseline").get<std::string>();
        m.target_class = targets[i];
        m.values = Tensor(shape);
        reader.f32_array(m.values.data.data(), numel);
    }
    reader.expect_exhausted(path);
    return maps;
}

}  // namespace misa
