#pragma once

#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace misa {

// Dense row-major float tensor. Rank is dynamic; shapes are small int vectors
// such as {C,H,W} for images and {N} for flat feature vectors.
struct Tensor {
    std::vector<int> shape;
    std::vector<float> data;

    Tensor() = default;

    explicit Tensor(std::vector<int> shp) : shape(std::move(shp)) {
        data.assign(numel(shape), 0.0f);
    }

    Tensor(std::vector<int> shp, std::vector<float> values)
        : shape(std::move(shp)), data(std::move(values)) {
        if (data.size() != numel(shape))
            throw std::invalid_argument("Tensor: data size " + std::to_string(data.size()) +
                                        " does not match shape (" + std::to_string(numel(shape)) +
                                        " elements)");
    }

    static std::size_t numel(const std::vector<int>& shp) {
        std::size_t n = 1;
        for (int d : shp) {
            if (d <= 0) throw std::invalid_argument("Tensor: non-positive dimension");
            n *= static_cast<std::size_t>(d);
        }
        return n;
    }

    std::size_t size() const { return data.size(); }
    int rank() const { return static_cast<int>(shape.size()); }

    float& operator[](std::size_t i) { return data[i]; }
    float operator[](std::size_t i) const { return data[i]; }

    // Checked 3-D access for {C,H,W} tensors.
    float& at(int c, int h, int w) { return data[index3(c, h, w)]; }
    float at(int c, int h, int w) const { return data[index3(c, h, w)]; }

    std::size_t index3(int c, int h, int w) const {
        if (rank() != 3) throw std::invalid_argument("Tensor: index3 on rank-" + std::to_string(rank()) + " tensor");
        if (c < 0 || c >= shape[0] || h < 0 || h >= shape[1] || w < 0 || w >= shape[2])
            throw std::out_of_range("Tensor: index out of range");
        return (static_cast<std::size_t>(c) * shape[1] + h) * shape[2] + w;
    }

    bool same_shape(const Tensor& other) const { return shape == other.shape; }

    void fill(float v) { std::fill(data.begin(), data.end(), v); }
};

inline std::string shape_to_string(const std::vector<int>& shp) {
    std::string s = "(";
    for (std::size_t i = 0; i < shp.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shp[i]);
    }
    s += ")";
    return s;
}

}  // namespace misa
