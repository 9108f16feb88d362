#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "misa/datakit.hpp"
#include "misa/io.hpp"
#include "misa/nnet.hpp"
#include "misa/tensor.hpp"

namespace misa {

// Where attribution paths start. black is the all-zero image; dataset_mean is
// the per-pixel mean over a source dataset; sample_set draws `sample_count`
// images from the source under `rng_seed`.
struct BaselinePolicy {
    enum class Kind { black, dataset_mean, sample_set };
    Kind kind = Kind::black;
    int sample_count = 8;
    std::uint64_t rng_seed = 1;
    std::string source_split = "validation";

    std::string id() const;
    json to_json() const;
    static BaselinePolicy from_json(const json& j);
};

// Baseline images for a policy. `source` may be null for the black policy and
// must otherwise be the split the policy names.
std::vector<Tensor> resolve_baselines(const BaselinePolicy& policy,
                                      const std::vector<int>& image_shape,
                                      const LabeledDataset* source);

struct AttributionMap {
    int boundary = 0;      // activation boundary the map lives at
    int target_class = 0;  // logit the path integral follows
    int steps = 0;
    std::string baseline_id;
    Tensor values;  // shaped like the boundary activation
};

// Path-integrated gradients of logit[target] with respect to the boundary
// activations, midpoint rule with `steps` points, averaged over the baseline
// images. Interpolation happens in activation space at the boundary; each
// baseline contributes its own boundary activations as the path start.
AttributionMap integrated_gradients(const NetworkModel& model, const Tensor& image, int target,
                                    int boundary, const std::vector<Tensor>& baselines, int steps,
                                    const std::string& baseline_id = "custom");

// |sum(values) - (logit[target](image) - logit[target](baseline))| for a map
// computed against that single baseline. Diagnostic for the sum rule the
// detector depends on.
double completeness_gap(const AttributionMap& map, const NetworkModel& model, const Tensor& image,
                        const Tensor& baseline, int target);

// Elementwise integrated_gradients over a batch. Empty `targets` means each
// image attributes its own predicted class. Errors carry the item index.
std::vector<AttributionMap> batch_attribute(const NetworkModel& model,
                                            const std::vector<Tensor>& images,
                                            const std::vector<int>& targets, int boundary,
                                            const std::vector<Tensor>& baselines, int steps,
                                            const std::string& baseline_id = "custom");

// One file per boundary: JSON header (boundary, shape, steps, baseline,
// per-map targets) + little-endian float blob of all map values.
void save_attribution_maps(const std::vector<AttributionMap>& maps, const std::string& path);
std::vector<AttributionMap> load_attribution_maps(const std::string& path);

}  // namespace misa
