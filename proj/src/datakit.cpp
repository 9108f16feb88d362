#include "misa/datakit.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "misa/io.hpp"
#include "misa/rng.hpp"

namespace misa {

void LabeledDataset::validate() const {
    if (images.size() != labels.size())
        throw std::runtime_error("dataset '" + name + "': " + std::to_string(images.size()) +
                                 " images vs " + std::to_string(labels.size()) + " labels");
    const std::vector<int> shp = image_shape();
    for (std::size_t i = 0; i < images.size(); ++i) {
        if (images[i].shape != shp)
            throw std::runtime_error("dataset '" + name + "': image " + std::to_string(i) +
                                     " has shape " + shape_to_string(images[i].shape) +
                                     ", expected " + shape_to_string(shp));
        if (labels[i] < 0 || labels[i] >= class_count)
            throw std::runtime_error("dataset '" + name + "': label " + std::to_string(labels[i]) +
                                     " at index " + std::to_string(i) + " outside [0," +
                                     std::to_string(class_count) + ")");
        for (float v : images[i].data)
            if (!(v >= 0.0f && v <= 1.0f))
                throw std::runtime_error("dataset '" + name + "': pixel value " + std::to_string(v) +
                                         " in image " + std::to_string(i) + " outside [0,1]");
    }
}

namespace {

std::vector<std::uint8_t> read_all_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open: " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                    std::istreambuf_iterator<char>());
    return bytes;
}

std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t off) {
    return (static_cast<std::uint32_t>(b[off]) << 24) | (static_cast<std::uint32_t>(b[off + 1]) << 16) |
           (static_cast<std::uint32_t>(b[off + 2]) << 8) | static_cast<std::uint32_t>(b[off + 3]);
}

struct IdxPayload {
    std::vector<std::uint32_t> dims;
    std::size_t data_offset;
};

IdxPayload parse_idx_header(const std::string& path, const std::vector<std::uint8_t>& bytes,
                            std::uint32_t expected_magic) {
    if (bytes.size() < 4)
        throw std::runtime_error(path + ": truncated header at byte " + std::to_string(bytes.size()) +
                                 " (need 4 magic bytes)");
    const std::uint32_t magic = be32(bytes, 0);
    if (magic != expected_magic) {
        char msg[128];
        std::snprintf(msg, sizeof(msg), "%s: bad magic 0x%08x at offset 0 (expected 0x%08x)",
                      path.c_str(), magic, expected_magic);
        throw std::runtime_error(msg);
    }
    const std::size_t ndim = magic & 0xFF;
    const std::size_t header_size = 4 + 4 * ndim;
    if (bytes.size() < header_size)
        throw std::runtime_error(path + ": truncated header at byte " + std::to_string(bytes.size()) +
                                 " (need " + std::to_string(header_size) + " bytes)");
    IdxPayload out;
    for (std::size_t d = 0; d < ndim; ++d) out.dims.push_back(be32(bytes, 4 + 4 * d));
    out.data_offset = header_size;
    std::size_t expect = 1;
    for (std::uint32_t d : out.dims) expect *= d;
    const std::size_t have = bytes.size() - header_size;
    if (have != expect)
        throw std::runtime_error(path + ": truncated file: expected " + std::to_string(expect) +
                                 " payload bytes after offset " + std::to_string(header_size) +
                                 ", found " + std::to_string(have));
    return out;
}

}  // namespace

LabeledDataset load_idx_dataset(const std::string& images_path, const std::string& labels_path) {
    const auto img_bytes = read_all_bytes(images_path);
    const auto lab_bytes = read_all_bytes(labels_path);
    const IdxPayload img = parse_idx_header(images_path, img_bytes, 0x00000803u);
    const IdxPayload lab = parse_idx_header(labels_path, lab_bytes, 0x00000801u);

    const std::size_t n = img.dims[0];
    if (lab.dims[0] != n)
        throw std::runtime_error("IDX count mismatch: " + images_path + " has " + std::to_string(n) +
                                 " images, " + labels_path + " has " + std::to_string(lab.dims[0]) +
                                 " labels");
    const int h = static_cast<int>(img.dims[1]);
    const int w = static_cast<int>(img.dims[2]);

    LabeledDataset ds;
    ds.name = images_path;
    ds.height = h;
    ds.width = w;
    ds.channels = 1;
    ds.images.reserve(n);
    ds.labels.reserve(n);
    int max_label = 0;
    for (std::size_t i = 0; i < n; ++i) {
        Tensor t({1, h, w});
        const std::size_t base = img.data_offset + i * static_cast<std::size_t>(h) * w;
        for (int p = 0; p < h * w; ++p)
            t.data[static_cast<std::size_t>(p)] = static_cast<float>(img_bytes[base + p]) / 255.0f;
        ds.images.push_back(std::move(t));
        const int y = lab_bytes[lab.data_offset + i];
        max_label = std::max(max_label, y);
        ds.labels.push_back(y);
    }
    ds.class_count = max_label + 1;
    ds.validate();
    return ds;
}

namespace {

// One glyph painter per class, drawn on an s-by-s cell as intensities in {0,1}.
float glyph_pixel(int cls, int r, int c, int s) {
    const int t = std::max(2, s / 6);  // stroke thickness
    const int mid = s / 2;
    const bool v_bar = std::abs(c - mid) < t;
    const bool h_bar = std::abs(r - mid) < t;
    const bool diag = std::abs(r - c) < t;
    const bool anti = std::abs(r + c - (s - 1)) < t;
    switch (cls) {
        case 0:  // hollow square ring
            return (r < t || r >= s - t || c < t || c >= s - t) ? 1.0f : 0.0f;
        case 1: return v_bar ? 1.0f : 0.0f;
        case 2: return h_bar ? 1.0f : 0.0f;
        case 3: return diag ? 1.0f : 0.0f;
        case 4: return anti ? 1.0f : 0.0f;
        case 5: return (v_bar || h_bar) ? 1.0f : 0.0f;
        case 6: return (diag || anti) ? 1.0f : 0.0f;
        case 7:  // filled diamond
            return (std::abs(r - mid) + std::abs(c - mid) <= mid - 1) ? 1.0f : 0.0f;
        case 8: {  // filled disk
            const float dr = static_cast<float>(r - mid), dc = static_cast<float>(c - mid);
            const float rad = static_cast<float>(mid - 1);
            return (dr * dr + dc * dc <= rad * rad) ? 1.0f : 0.0f;
        }
        case 9:  // T: top bar plus center column
            return (r < t || v_bar) ? 1.0f : 0.0f;
        default: return 0.0f;
    }
}

// Distinct per-class color weights for multi-channel rendering.
const float kPalette[10][3] = {
    {1.0f, 0.2f, 0.2f}, {0.2f, 1.0f, 0.2f}, {0.2f, 0.4f, 1.0f}, {1.0f, 1.0f, 0.2f},
    {1.0f, 0.2f, 1.0f}, {0.2f, 1.0f, 1.0f}, {1.0f, 0.6f, 0.2f}, {0.6f, 0.2f, 1.0f},
    {0.9f, 0.9f, 0.9f}, {0.4f, 0.8f, 0.5f},
};

}  // namespace

LabeledDataset generate_synthetic_dataset(int class_count, int height, int width, int channels,
                                          int per_class, std::uint64_t rng_seed) {
    if (class_count < 2) throw std::invalid_argument("generate_synthetic_dataset: class_count must be >= 2");
    if (class_count > 10)
        throw std::invalid_argument("generate_synthetic_dataset: only 10 glyph classes are defined");
    if (height < 8 || width < 8)
        throw std::invalid_argument("generate_synthetic_dataset: image size must be at least 8x8");
    if (channels != 1 && channels != 3)
        throw std::invalid_argument("generate_synthetic_dataset: channels must be 1 or 3");
    if (per_class < 1) throw std::invalid_argument("generate_synthetic_dataset: per_class must be >= 1");

    const int margin = 2;
    const int cell = std::min(height, width) - 2 * margin;  // glyph cell size
    const int jitter = std::max(1, std::min(height, width) / 8);

    LabeledDataset ds;
    ds.name = "synthetic";
    ds.height = height;
    ds.width = width;
    ds.channels = channels;
    ds.class_count = class_count;
    ds.images.reserve(static_cast<std::size_t>(class_count) * per_class);
    ds.labels.reserve(static_cast<std::size_t>(class_count) * per_class);

    Rng rng(rng_seed);
    for (int cls = 0; cls < class_count; ++cls) {
        for (int s = 0; s < per_class; ++s) {
            const int dr = static_cast<int>(rng.below(2 * jitter + 1)) - jitter;
            const int dc = static_cast<int>(rng.below(2 * jitter + 1)) - jitter;
            const float intensity = 0.7f + 0.3f * rng.uniform_f(0.0f, 1.0f);
            Tensor img({channels, height, width});
            for (int r = 0; r < height; ++r) {
                for (int c = 0; c < width; ++c) {
                    const int gr = r - margin - dr, gc = c - margin - dc;
                    float g = 0.0f;
                    if (gr >= 0 && gr < cell && gc >= 0 && gc < cell)
                        g = glyph_pixel(cls, gr, gc, cell);
                    for (int ch = 0; ch < channels; ++ch) {
                        const float tint = (channels == 3) ? kPalette[cls][ch] : 1.0f;
                        float v = g * intensity * tint +
                                  0.05f * static_cast<float>(rng.normal());
                        img.at(ch, r, c) = std::clamp(v, 0.0f, 1.0f);
                    }
                }
            }
            ds.images.push_back(std::move(img));
            ds.labels.push_back(cls);
        }
    }
    return ds;
}

SplitResult split(const LabeledDataset& dataset, const SplitSpec& spec) {
    const double fracs[3] = {spec.train, spec.validation, spec.holdout};
    double sum = 0.0;
    for (double f : fracs) {
        if (f <= 0.0) throw std::invalid_argument("split: fractions must be positive");
        sum += f;
    }
    if (std::abs(sum - 1.0) > 1e-9)
        throw std::invalid_argument("split: fractions sum to " + std::to_string(sum) + ", expected 1");

    std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(dataset.class_count));
    for (std::size_t i = 0; i < dataset.size(); ++i)
        by_class[static_cast<std::size_t>(dataset.labels[i])].push_back(i);

    SplitResult out;
    LabeledDataset* parts[3] = {&out.train, &out.validation, &out.holdout};
    const char* part_names[3] = {"train", "validation", "holdout"};
    for (int p = 0; p < 3; ++p) {
        parts[p]->name = dataset.name + "/" + part_names[p];
        parts[p]->height = dataset.height;
        parts[p]->width = dataset.width;
        parts[p]->channels = dataset.channels;
        parts[p]->class_count = dataset.class_count;
    }

    Rng rng(spec.rng_seed);
    for (int cls = 0; cls < dataset.class_count; ++cls) {
        auto& idx = by_class[static_cast<std::size_t>(cls)];
        rng.shuffle(idx);
        const std::size_t n = idx.size();

        // Largest-remainder allocation keeps every count within 1 of n*frac.
        std::size_t counts[3];
        double rema[3];
        std::size_t assigned = 0;
        for (int p = 0; p < 3; ++p) {
            const double ideal = static_cast<double>(n) * fracs[p];
            counts[p] = static_cast<std::size_t>(ideal);
            rema[p] = ideal - static_cast<double>(counts[p]);
            assigned += counts[p];
        }
        while (assigned < n) {
            int best = 0;
            for (int p = 1; p < 3; ++p)
                if (rema[p] > rema[best]) best = p;
            counts[best]++;
            rema[best] = -1.0;
            assigned++;
        }
        for (int p = 0; p < 3; ++p)
            if (counts[p] == 0)
                throw std::runtime_error("split: class " + std::to_string(cls) + " has " +
                                         std::to_string(n) + " samples, " + part_names[p] +
                                         " split would be empty");

        std::size_t cursor = 0;
        for (int p = 0; p < 3; ++p) {
            for (std::size_t k = 0; k < counts[p]; ++k, ++cursor) {
                parts[p]->images.push_back(dataset.images[idx[cursor]]);
                parts[p]->labels.push_back(cls);
            }
        }
    }
    return out;
}

void save_dataset_cache(const LabeledDataset& dataset, const std::string& path) {
    json header;
    header["channels"] = dataset.channels;
    header["class_count"] = dataset.class_count;
    header["count"] = dataset.size();
    header["height"] = dataset.height;
    header["kind"] = "dataset_cache";
    header["layout"] = "nchw";
    header["name"] = dataset.name;
    header["version"] = 1;
    header["width"] = dataset.width;

    std::vector<std::uint8_t> blob;
    blob.reserve(dataset.size() * Tensor::numel(dataset.image_shape()) * 4 + dataset.size() * 4);
    for (const Tensor& img : dataset.images) append_f32_span_le(blob, img.data.data(), img.size());
    for (int y : dataset.labels) append_u32_le(blob, static_cast<std::uint32_t>(y));
    write_blob_file(path, header, blob);
}

LabeledDataset load_dataset_cache(const std::string& path) {
    const BlobFile file = read_blob_file(path);
    if (file.header.value("kind", "") != "dataset_cache")
        throw std::runtime_error(path + ": not a dataset cache file");
    LabeledDataset ds;
    ds.channels = file.header.at("channels").get<int>();
    ds.class_count = file.header.at("class_count").get<int>();
    ds.height = file.header.at("height").get<int>();
    ds.width = file.header.at("width").get<int>();
    ds.name = file.header.at("name").get<std::string>();
    const std::size_t n = file.header.at("count").get<std::size_t>();

    BlobReader reader(file.blob.data(), file.blob.size());
    const std::vector<int> shp = ds.image_shape();
    const std::size_t numel = Tensor::numel(shp);
    ds.images.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        Tensor t(shp);
        reader.f32_array(t.data.data(), numel);
        ds.images.push_back(std::move(t));
    }
    ds.labels.reserve(n);
    for (std::size_t i = 0; i < n; ++i) ds.labels.push_back(static_cast<int>(reader.u32()));
    reader.expect_exhausted(path);
    return ds;
}

Tensor dataset_mean_image(const LabeledDataset& dataset) {
    if (dataset.size() == 0) throw std::invalid_argument("dataset_mean_image: empty dataset");
    std::vector<double> acc(Tensor::numel(dataset.image_shape()), 0.0);
    for (const Tensor& img : dataset.images)
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += img.data[i];
    Tensor mean(dataset.image_shape());
    for (std::size_t i = 0; i < acc.size(); ++i)
        mean.data[i] = static_cast<float>(acc[i] / static_cast<double>(dataset.size()));
    return mean;
}

}  // namespace misa
