#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "misa/datakit.hpp"
#include "misa/io.hpp"
#include "misa/nnet.hpp"
#include "misa/rng.hpp"
#include "misa/tensor.hpp"

namespace misa {

enum class TriggerKind { patch, dynamic, spread_out, noise, smooth, color_transform };
enum class PatchLocation { top_middle, center_middle, bottom_middle, bottom_right, explicit_pos };
enum class InjectMode { paste, add_clamped };

std::string trigger_kind_name(TriggerKind kind);
std::string patch_location_name(PatchLocation loc);
PatchLocation patch_location_from_name(const std::string& name);

// Tagged union over the trigger families. Only the fields of the active kind
// are populated; validate() checks the family's range invariants.
struct TriggerSpec {
    TriggerKind kind = TriggerKind::patch;
    InjectMode mode = InjectMode::paste;  // honored by paste-style families

    // patch
    Tensor pattern;       // {C,h,w}, values in [0,1]
    Tensor pattern_mask;  // {h,w} binary; empty means all-ones
    PatchLocation location = PatchLocation::bottom_right;
    int row = -1, col = -1;  // explicit_pos

    // dynamic: patterns pasted at one of the 9 grid locations per injection
    std::vector<Tensor> patterns;

    // spread_out: fixed isolated pixels painted with a color
    std::vector<std::pair<int, int>> positions;
    std::vector<float> color;

    // noise: elementwise bounded delta, added and clamped
    Tensor delta;
    float amplitude = 20.0f / 255.0f;

    // smooth: full-image low-frequency pattern, added and clamped
    Tensor trigger_image;
    float range = 0.2f;

    // color_transform: y_c = clamp(gain_c * sum_k mix[c,k] x_k + bias_c)
    std::vector<float> mix;  // C*C row-major
    std::vector<float> gain, bias;

    void validate(const std::vector<int>& image_shape) const;
    json to_json() const;
    static TriggerSpec from_json(const json& j);
};

struct PoisonPlan {
    TriggerSpec trigger;
    int target_label = 0;
    double fraction = 0.01;
    std::uint64_t rng_seed = 1;
};

// Constructors for the trigger families.
TriggerSpec make_solid_patch(int channels, int h, int w, float value,
                             PatchLocation loc = PatchLocation::bottom_right);
TriggerSpec make_random_patch(int channels, int h, int w, Rng& rng,
                              PatchLocation loc = PatchLocation::bottom_right);
TriggerSpec make_dynamic_trigger(int channels, int h, int w, int pattern_count, Rng& rng);
TriggerSpec make_spread_out_trigger(const std::vector<int>& image_shape, int pixel_count,
                                    const std::vector<float>& color, Rng& rng,
                                    int min_chebyshev_distance = 2);
TriggerSpec make_noise_trigger(const std::vector<int>& image_shape, float amplitude, Rng& rng);
TriggerSpec make_smooth_trigger(const std::vector<int>& image_shape, int frequency_cutoff,
                                float amplitude, Rng& rng);
TriggerSpec make_color_transform(const std::string& preset, int channels);

// Applies one trigger to one image; output stays in [0,1]. The rng feeds the
// dynamic family's (pattern, location) draw and is untouched otherwise.
Tensor inject(const Tensor& image, const TriggerSpec& spec, Rng& rng);

// Resolved top-left corner of a patch on an image of the given size.
std::pair<int, int> resolve_patch_location(PatchLocation loc, int row, int col, int image_h,
                                           int image_w, int patch_h, int patch_w);

// Copies the dataset, trigger-injects exactly llround(fraction*N) samples
// chosen without replacement under the plan seed, and overwrites their labels.
// Returns the poisoned copy and the (ascending) poisoned index set.
std::pair<LabeledDataset, std::vector<std::size_t>> poison_dataset(const LabeledDataset& dataset,
                                                                   const PoisonPlan& plan);

// Fraction of trigger-injected images (true label != target) classified as
// the target label.
double attack_success_rate(const NetworkModel& model, const LabeledDataset& clean_set,
                           const TriggerSpec& spec, int target_label, Rng& rng);

}  // namespace misa
