#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "misa/tensor.hpp"

namespace misa {

// Images are stored one tensor per sample in {C,H,W} layout, values in [0,1].
struct LabeledDataset {
    std::string name;
    int height = 0, width = 0, channels = 0;
    int class_count = 0;
    std::vector<Tensor> images;
    std::vector<int> labels;

    std::size_t size() const { return images.size(); }
    std::vector<int> image_shape() const { return {channels, height, width}; }
    void validate() const;
};

struct SplitSpec {
    double train = 0.8;
    double validation = 0.1;
    double holdout = 0.1;
    std::uint64_t rng_seed = 1;
};

struct SplitResult {
    LabeledDataset train;
    LabeledDataset validation;
    LabeledDataset holdout;
};

// IDX ubyte files (big-endian dims, magic 0x00000803 images / 0x00000801 labels).
// Pixel bytes are scaled to [0,1].
LabeledDataset load_idx_dataset(const std::string& images_path, const std::string& labels_path);

// Procedurally rendered glyph classes (up to 10) with per-sample jitter,
// intensity variation, and additive noise. Deterministic under seed.
LabeledDataset generate_synthetic_dataset(int class_count, int height, int width, int channels,
                                          int per_class, std::uint64_t rng_seed);

// Label-stratified disjoint split; per-class counts within +/-1 of the
// proportional ideal (largest-remainder allocation).
SplitResult split(const LabeledDataset& dataset, const SplitSpec& spec);

void save_dataset_cache(const LabeledDataset& dataset, const std::string& path);
LabeledDataset load_dataset_cache(const std::string& path);

Tensor dataset_mean_image(const LabeledDataset& dataset);

}  // namespace misa
