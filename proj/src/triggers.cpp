#include "misa/triggers.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <stdexcept>

namespace misa {

std::string trigger_kind_name(TriggerKind kind) {
    switch (kind) {
        case TriggerKind::patch: return "patch";
        case TriggerKind::dynamic: return "dynamic";
        case TriggerKind::spread_out: return "spread_out";
        case TriggerKind::noise: return "noise";
        case TriggerKind::smooth: return "smooth";
        case TriggerKind::color_transform: return "color_transform";
    }
    throw std::logic_error("trigger_kind_name: unreachable");
}

namespace {

TriggerKind trigger_kind_from_name(const std::string& name) {
    if (name == "patch") return TriggerKind::patch;
    if (name == "dynamic") return TriggerKind::dynamic;
    if (name == "spread_out") return TriggerKind::spread_out;
    if (name == "noise") return TriggerKind::noise;
    if (name == "smooth") return TriggerKind::smooth;
    if (name == "color_transform") return TriggerKind::color_transform;
    throw std::invalid_argument("unknown trigger kind: " + name);
}

}  // namespace

std::string patch_location_name(PatchLocation loc) {
    switch (loc) {
        case PatchLocation::top_middle: return "top_middle";
        case PatchLocation::center_middle: return "center_middle";
        case PatchLocation::bottom_middle: return "bottom_middle";
        case PatchLocation::bottom_right: return "bottom_right";
        case PatchLocation::explicit_pos: return "explicit";
    }
    throw std::logic_error("patch_location_name: unreachable");
}

PatchLocation patch_location_from_name(const std::string& name) {
    if (name == "top_middle") return PatchLocation::top_middle;
    if (name == "center_middle") return PatchLocation::center_middle;
    if (name == "bottom_middle") return PatchLocation::bottom_middle;
    if (name == "bottom_right") return PatchLocation::bottom_right;
    if (name == "explicit") return PatchLocation::explicit_pos;
    throw std::invalid_argument("unknown patch location: " + name);
}

std::pair<int, int> resolve_patch_location(PatchLocation loc, int row, int col, int image_h,
                                           int image_w, int patch_h, int patch_w) {
    if (patch_h > image_h || patch_w > image_w)
        throw std::invalid_argument("trigger pattern " + std::to_string(patch_h) + "x" +
                                    std::to_string(patch_w) + " larger than image " +
                                    std::to_string(image_h) + "x" + std::to_string(image_w));
    switch (loc) {
        case PatchLocation::top_middle: return {0, (image_w - patch_w) / 2};
        case PatchLocation::center_middle: return {(image_h - patch_h) / 2, (image_w - patch_w) / 2};
        case PatchLocation::bottom_middle: return {image_h - patch_h, (image_w - patch_w) / 2};
        case PatchLocation::bottom_right: return {image_h - patch_h, image_w - patch_w};
        case PatchLocation::explicit_pos:
            if (row < 0 || col < 0 || row + patch_h > image_h || col + patch_w > image_w)
                throw std::invalid_argument("explicit patch location (" + std::to_string(row) + "," +
                                            std::to_string(col) + ") out of bounds");
            return {row, col};
    }
    throw std::logic_error("resolve_patch_location: unreachable");
}

namespace {

void check_pattern(const Tensor& pattern, const char* what) {
    if (pattern.rank() != 3)
        throw std::invalid_argument(std::string(what) + ": pattern must be {C,h,w}");
    for (float v : pattern.data)
        if (!(v >= 0.0f && v <= 1.0f))
            throw std::invalid_argument(std::string(what) + ": pattern values must lie in [0,1]");
}

void check_full_image(const Tensor& t, const std::vector<int>& image_shape, const char* what) {
    if (t.shape != image_shape)
        throw std::invalid_argument(std::string(what) + ": tensor shape " +
                                    shape_to_string(t.shape) + " does not match image shape " +
                                    shape_to_string(image_shape));
}

}  // namespace

void TriggerSpec::validate(const std::vector<int>& image_shape) const {
    if (image_shape.size() != 3) throw std::invalid_argument("trigger: image shape must be {C,H,W}");
    const int c = image_shape[0], h = image_shape[1], w = image_shape[2];
    switch (kind) {
        case TriggerKind::patch: {
            check_pattern(pattern, "patch");
            if (pattern.shape[0] != c)
                throw std::invalid_argument("patch: channel count mismatch");
            if (!pattern_mask.data.empty()) {
                if (pattern_mask.shape != std::vector<int>{pattern.shape[1], pattern.shape[2]})
                    throw std::invalid_argument("patch: mask shape must match pattern {h,w}");
                for (float v : pattern_mask.data)
                    if (v != 0.0f && v != 1.0f)
                        throw std::invalid_argument("patch: mask must be binary");
            }
            resolve_patch_location(location, row, col, h, w, pattern.shape[1], pattern.shape[2]);
            break;
        }
        case TriggerKind::dynamic: {
            if (patterns.empty()) throw std::invalid_argument("dynamic: needs at least one pattern");
            for (const Tensor& p : patterns) {
                check_pattern(p, "dynamic");
                if (p.shape[0] != c) throw std::invalid_argument("dynamic: channel count mismatch");
                if (p.shape[1] > h || p.shape[2] > w)
                    throw std::invalid_argument("dynamic: pattern larger than image");
            }
            break;
        }
        case TriggerKind::spread_out: {
            if (positions.empty()) throw std::invalid_argument("spread_out: no pixel positions");
            if (static_cast<int>(color.size()) != c)
                throw std::invalid_argument("spread_out: color needs one value per channel");
            for (float v : color)
                if (!(v >= 0.0f && v <= 1.0f))
                    throw std::invalid_argument("spread_out: color values must lie in [0,1]");
            for (const auto& [r, cc] : positions)
                if (r < 0 || r >= h || cc < 0 || cc >= w)
                    throw std::invalid_argument("spread_out: pixel (" + std::to_string(r) + "," +
                                                std::to_string(cc) + ") outside image");
            break;
        }
        case TriggerKind::noise: {
            check_full_image(delta, image_shape, "noise");
            for (float v : delta.data)
                if (!(v >= -amplitude && v <= amplitude))
                    throw std::invalid_argument("noise: delta exceeds amplitude bound " +
                                                std::to_string(amplitude));
            break;
        }
        case TriggerKind::smooth: {
            check_full_image(trigger_image, image_shape, "smooth");
            for (float v : trigger_image.data)
                if (!(v >= 0.0f && v <= range))
                    throw std::invalid_argument("smooth: trigger values must lie in [0, " +
                                                std::to_string(range) + "]");
            break;
        }
        case TriggerKind::color_transform: {
            if (static_cast<int>(gain.size()) != c || static_cast<int>(bias.size()) != c ||
                static_cast<int>(mix.size()) != c * c)
                throw std::invalid_argument("color_transform: coefficient sizes must match channels");
            break;
        }
    }
}

TriggerSpec make_solid_patch(int channels, int h, int w, float value, PatchLocation loc) {
    TriggerSpec s;
    s.kind = TriggerKind::patch;
    s.location = loc;
    s.pattern = Tensor({channels, h, w});
    s.pattern.fill(value);
    return s;
}

TriggerSpec make_random_patch(int channels, int h, int w, Rng& rng, PatchLocation loc) {
    TriggerSpec s;
    s.kind = TriggerKind::patch;
    s.location = loc;
    s.pattern = Tensor({channels, h, w});
    for (float& v : s.pattern.data) v = rng.uniform_f(0.0f, 1.0f);
    return s;
}

TriggerSpec make_dynamic_trigger(int channels, int h, int w, int pattern_count, Rng& rng) {
    if (pattern_count < 1) throw std::invalid_argument("dynamic: pattern_count must be >= 1");
    TriggerSpec s;
    s.kind = TriggerKind::dynamic;
    for (int i = 0; i < pattern_count; ++i) {
        Tensor p({channels, h, w});
        for (float& v : p.data) v = rng.uniform_f(0.0f, 1.0f);
        s.patterns.push_back(std::move(p));
    }
    return s;
}

TriggerSpec make_spread_out_trigger(const std::vector<int>& image_shape, int pixel_count,
                                    const std::vector<float>& color, Rng& rng,
                                    int min_chebyshev_distance) {
    if (image_shape.size() != 3)
        throw std::invalid_argument("spread_out: image shape must be {C,H,W}");
    if (pixel_count < 9 || pixel_count > 16)
        throw std::invalid_argument("spread_out: pixel_count " + std::to_string(pixel_count) +
                                    " outside the default range [9,16]");
    const int h = image_shape[1], w = image_shape[2];
    TriggerSpec s;
    s.kind = TriggerKind::spread_out;
    s.color = color;
    const int max_attempts = 10000;
    int attempts = 0;
    while (static_cast<int>(s.positions.size()) < pixel_count) {
        if (++attempts > max_attempts)
            throw std::runtime_error("spread_out: could not place " + std::to_string(pixel_count) +
                                     " pixels at Chebyshev distance >= " +
                                     std::to_string(min_chebyshev_distance));
        const int r = static_cast<int>(rng.below(static_cast<std::uint64_t>(h)));
        const int c = static_cast<int>(rng.below(static_cast<std::uint64_t>(w)));
        bool ok = true;
        for (const auto& [pr, pc] : s.positions)
            if (std::max(std::abs(pr - r), std::abs(pc - c)) < min_chebyshev_distance) {
                ok = false;
                break;
            }
        if (ok) s.positions.emplace_back(r, c);
    }
    s.validate(image_shape);
    return s;
}

TriggerSpec make_noise_trigger(const std::vector<int>& image_shape, float amplitude, Rng& rng) {
    if (image_shape.size() != 3) throw std::invalid_argument("noise: image shape must be {C,H,W}");
    if (amplitude < 0.0f) throw std::invalid_argument("noise: amplitude must be >= 0");
    TriggerSpec s;
    s.kind = TriggerKind::noise;
    s.amplitude = amplitude;
    s.delta = Tensor(image_shape);
    for (float& v : s.delta.data) v = rng.uniform_f(-amplitude, amplitude);
    return s;
}

TriggerSpec make_smooth_trigger(const std::vector<int>& image_shape, int frequency_cutoff,
                                float amplitude, Rng& rng) {
    if (image_shape.size() != 3) throw std::invalid_argument("smooth: image shape must be {C,H,W}");
    const int c = image_shape[0], h = image_shape[1], w = image_shape[2];
    if (frequency_cutoff < 1 || frequency_cutoff >= std::min(h, w) / 2)
        throw std::invalid_argument("smooth: frequency cutoff " + std::to_string(frequency_cutoff) +
                                    " must lie in [1, " + std::to_string(std::min(h, w) / 2) +
                                    ") below the Nyquist index");
    if (amplitude < 0.0f) throw std::invalid_argument("smooth: amplitude must be >= 0");

    // White noise, then zero every 2-D DFT coefficient with radial index above
    // the cutoff, invert, and min-max rescale into [0, amplitude]. Sizes are
    // desk-scale, so the direct O((HW)^2) transform is fine.
    const double tau = 6.283185307179586476925286766559;
    Tensor trig(image_shape);
    std::vector<double> field(static_cast<std::size_t>(c) * h * w, 0.0);
    for (int ch = 0; ch < c; ++ch) {
        std::vector<double> noise(static_cast<std::size_t>(h) * w);
        for (double& v : noise) v = rng.uniform();
        std::vector<std::complex<double>> freq(static_cast<std::size_t>(h) * w);
        for (int u = 0; u < h; ++u) {
            const int ru = std::min(u, h - u);
            for (int v = 0; v < w; ++v) {
                const int rv = std::min(v, w - v);
                if (std::sqrt(static_cast<double>(ru) * ru + static_cast<double>(rv) * rv) >
                    static_cast<double>(frequency_cutoff)) {
                    freq[static_cast<std::size_t>(u) * w + v] = 0.0;
                    continue;
                }
                std::complex<double> acc(0.0, 0.0);
                for (int r = 0; r < h; ++r)
                    for (int cc = 0; cc < w; ++cc) {
                        const double phase = -tau * (static_cast<double>(u) * r / h +
                                                     static_cast<double>(v) * cc / w);
                        acc += noise[static_cast<std::size_t>(r) * w + cc] *
                               std::complex<double>(std::cos(phase), std::sin(phase));
                    }
                freq[static_cast<std::size_t>(u) * w + v] = acc;
            }
        }
        for (int r = 0; r < h; ++r)
            for (int cc = 0; cc < w; ++cc) {
                std::complex<double> acc(0.0, 0.0);
                for (int u = 0; u < h; ++u)
                    for (int v = 0; v < w; ++v) {
                        if (freq[static_cast<std::size_t>(u) * w + v] == std::complex<double>(0.0, 0.0))
                            continue;
                        const double phase = tau * (static_cast<double>(u) * r / h +
                                                    static_cast<double>(v) * cc / w);
                        acc += freq[static_cast<std::size_t>(u) * w + v] *
                               std::complex<double>(std::cos(phase), std::sin(phase));
                    }
                field[(static_cast<std::size_t>(ch) * h + r) * w + cc] =
                    acc.real() / (static_cast<double>(h) * w);
            }
    }
    const auto [mn_it, mx_it] = std::minmax_element(field.begin(), field.end());
    const double mn = *mn_it, mx = *mx_it;
    for (std::size_t i = 0; i < field.size(); ++i) {
        const double scaled = (mx > mn) ? (field[i] - mn) / (mx - mn) * static_cast<double>(amplitude)
                                        : 0.0;
        trig.data[i] = static_cast<float>(scaled);
    }

    TriggerSpec s;
    s.kind = TriggerKind::smooth;
    s.range = amplitude;
    s.trigger_image = std::move(trig);
    return s;
}

TriggerSpec make_color_transform(const std::string& preset, int channels) {
    TriggerSpec s;
    s.kind = TriggerKind::color_transform;
    s.mix.assign(static_cast<std::size_t>(channels) * channels, 0.0f);
    for (int i = 0; i < channels; ++i) s.mix[static_cast<std::size_t>(i) * channels + i] = 1.0f;
    s.gain.assign(static_cast<std::size_t>(channels), 1.0f);
    s.bias.assign(static_cast<std::size_t>(channels), 0.0f);
    const auto set3 = [&](float g0, float g1, float g2, float b0, float b1, float b2) {
        s.gain = {g0, g1, g2};
        s.bias = {b0, b1, b2};
    };
    if (preset == "warm") {
        if (channels == 3)
            set3(1.15f, 1.0f, 0.85f, 0.04f, 0.01f, 0.0f);
        else
            s.gain[0] = 1.15f, s.bias[0] = 0.04f;
    } else if (preset == "cool") {
        if (channels == 3)
            set3(0.85f, 1.0f, 1.15f, 0.0f, 0.01f, 0.04f);
        else
            s.gain[0] = 0.85f, s.bias[0] = 0.02f;
    } else if (preset == "high_contrast" || preset == "high-contrast") {
        for (int i = 0; i < channels; ++i) {
            s.gain[static_cast<std::size_t>(i)] = 1.4f;
            s.bias[static_cast<std::size_t>(i)] = -0.2f;
        }
    } else {
        throw std::invalid_argument("color_transform: unknown preset '" + preset +
                                    "' (warm, cool, high_contrast)");
    }
    return s;
}

namespace {

void paste_patch(Tensor& img, const Tensor& pattern, const Tensor& mask, int at_r, int at_c,
                 InjectMode mode) {
    const int c = img.shape[0];
    const int ph = pattern.shape[1], pw = pattern.shape[2];
    for (int i = 0; i < ph; ++i)
        for (int j = 0; j < pw; ++j) {
            if (!mask.data.empty() && mask.at(0, i, j) == 0.0f) continue;
            for (int ch = 0; ch < c; ++ch) {
                float& px = img.at(ch, at_r + i, at_c + j);
                const float pv = pattern.at(ch, i, j);
                px = (mode == InjectMode::paste) ? pv : std::clamp(px + pv, 0.0f, 1.0f);
            }
        }
}

}  // namespace

Tensor inject(const Tensor& image, const TriggerSpec& spec, Rng& rng) {
    spec.validate(image.shape);
    const int h = image.shape[1], w = image.shape[2];
    Tensor out = image;
    switch (spec.kind) {
        case TriggerKind::patch: {
            const auto [r, c] = resolve_patch_location(spec.location, spec.row, spec.col, h, w,
                                                       spec.pattern.shape[1], spec.pattern.shape[2]);
            Tensor mask2;
            if (!spec.pattern_mask.data.empty())
                mask2 = Tensor({1, spec.pattern_mask.shape[0], spec.pattern_mask.shape[1]},
                               spec.pattern_mask.data);
            paste_patch(out, spec.pattern, mask2, r, c, spec.mode);
            break;
        }
        case TriggerKind::dynamic: {
            const Tensor& p = spec.patterns[rng.below(spec.patterns.size())];
            const int grid = static_cast<int>(rng.below(9));
            const int rows[3] = {0, (h - p.shape[1]) / 2, h - p.shape[1]};
            const int cols[3] = {0, (w - p.shape[2]) / 2, w - p.shape[2]};
            paste_patch(out, p, Tensor{}, rows[grid / 3], cols[grid % 3], spec.mode);
            break;
        }
        case TriggerKind::spread_out:
            for (const auto& [r, c] : spec.positions)
                for (int ch = 0; ch < image.shape[0]; ++ch) {
                    float& px = out.at(ch, r, c);
                    const float cv = spec.color[static_cast<std::size_t>(ch)];
                    px = (spec.mode == InjectMode::paste) ? cv : std::clamp(px + cv, 0.0f, 1.0f);
                }
            break;
        case TriggerKind::noise:
            for (std::size_t i = 0; i < out.size(); ++i)
                out.data[i] = std::clamp(out.data[i] + spec.delta.data[i], 0.0f, 1.0f);
            break;
        case TriggerKind::smooth:
            for (std::size_t i = 0; i < out.size(); ++i)
                out.data[i] = std::clamp(out.data[i] + spec.trigger_image.data[i], 0.0f, 1.0f);
            break;
        case TriggerKind::color_transform: {
            const int c = image.shape[0];
            std::vector<float> px(static_cast<std::size_t>(c));
            for (int r = 0; r < h; ++r)
                for (int cc = 0; cc < w; ++cc) {
                    for (int ch = 0; ch < c; ++ch) px[static_cast<std::size_t>(ch)] = image.at(ch, r, cc);
                    for (int ch = 0; ch < c; ++ch) {
                        float acc = 0.0f;
                        for (int k = 0; k < c; ++k)
                            acc += spec.mix[static_cast<std::size_t>(ch) * c + k] *
                                   px[static_cast<std::size_t>(k)];
                        out.at(ch, r, cc) = std::clamp(
                            spec.gain[static_cast<std::size_t>(ch)] * acc +
                                spec.bias[static_cast<std::size_t>(ch)],
                            0.0f, 1.0f);
                    }
                }
            break;
        }
    }
    return out;
}

std::pair<LabeledDataset, std::vector<std::size_t>> poison_dataset(const LabeledDataset& dataset,
                                                                   const PoisonPlan& plan) {
    if (plan.target_label < 0 || plan.target_label >= dataset.class_count)
        throw std::invalid_argument("poison_dataset: target label out of range");
    if (!(plan.fraction > 0.0 && plan.fraction <= 1.0))
        throw std::invalid_argument("poison_dataset: fraction must lie in (0,1]");
    const double expected = plan.fraction * static_cast<double>(dataset.size());
    if (expected < 1.0)
        throw std::invalid_argument("poison_dataset: fraction * N = " + std::to_string(expected) +
                                    " selects no samples");
    const std::size_t count = static_cast<std::size_t>(std::llround(expected));

    Rng rng(plan.rng_seed);
    std::vector<std::size_t> chosen = rng.sample_without_replacement(dataset.size(), count);
    std::sort(chosen.begin(), chosen.end());

    LabeledDataset out = dataset;
    out.name = dataset.name + "/poisoned";
    for (std::size_t idx : chosen) {
        out.images[idx] = inject(dataset.images[idx], plan.trigger, rng);
        out.labels[idx] = plan.target_label;
    }
    return {std::move(out), std::move(chosen)};
}

double attack_success_rate(const NetworkModel& model, const LabeledDataset& clean_set,
                           const TriggerSpec& spec, int target_label, Rng& rng) {
    if (clean_set.size() == 0) throw std::invalid_argument("attack_success_rate: empty dataset");
    std::size_t eligible = 0, hits = 0;
    for (std::size_t i = 0; i < clean_set.size(); ++i) {
        if (clean_set.labels[i] == target_label) continue;
        ++eligible;
        const Tensor trojaned = inject(clean_set.images[i], spec, rng);
        if (predict(model, trojaned) == target_label) ++hits;
    }
    if (eligible == 0)
        throw std::invalid_argument("attack_success_rate: every image already has the target label");
    return static_cast<double>(hits) / static_cast<double>(eligible);
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

namespace {

json tensor_to_json(const Tensor& t) {
    json j;
    j["shape"] = t.shape;
    j["data"] = t.data;
    return j;
}

Tensor tensor_from_json(const json& j) {
    return Tensor(j.at("shape").get<std::vector<int>>(), j.at("data").get<std::vector<float>>());
}

}  // namespace

json TriggerSpec::to_json() const {
    json j;
    j["kind"] = trigger_kind_name(kind);
    j["mode"] = (mode == InjectMode::paste) ? "paste" : "add_clamped";
    switch (kind) {
        case TriggerKind::patch:
            j["pattern"] = tensor_to_json(pattern);
            if (!pattern_mask.data.empty()) j["mask"] = tensor_to_json(pattern_mask);
            j["location"] = patch_location_name(location);
            if (location == PatchLocation::explicit_pos) {
                j["row"] = row;
                j["col"] = col;
            }
            break;
        case TriggerKind::dynamic: {
            j["patterns"] = json::array();
            for (const Tensor& p : patterns) j["patterns"].push_back(tensor_to_json(p));
            break;
        }
        case TriggerKind::spread_out: {
            json pos = json::array();
            for (const auto& [r, c] : positions) pos.push_back({r, c});
            j["positions"] = pos;
            j["color"] = color;
            break;
        }
        case TriggerKind::noise:
            j["delta"] = tensor_to_json(delta);
            j["amplitude"] = amplitude;
            break;
        case TriggerKind::smooth:
            j["trigger_image"] = tensor_to_json(trigger_image);
            j["range"] = range;
            break;
        case TriggerKind::color_transform:
            j["mix"] = mix;
            j["gain"] = gain;
            j["bias"] = bias;
            break;
    }
    return j;
}

TriggerSpec TriggerSpec::from_json(const json& j) {
    TriggerSpec s;
    s.kind = trigger_kind_from_name(j.at("kind").get<std::string>());
    s.mode = (j.value("mode", "paste") == "paste") ? InjectMode::paste : InjectMode::add_clamped;
    switch (s.kind) {
        case TriggerKind::patch:
            s.pattern = tensor_from_json(j.at("pattern"));
            if (j.contains("mask")) s.pattern_mask = tensor_from_json(j.at("mask"));
            s.location = patch_location_from_name(j.at("location").get<std::string>());
            if (s.location == PatchLocation::explicit_pos) {
                s.row = j.at("row").get<int>();
                s.col = j.at("col").get<int>();
            }
            break;
        case TriggerKind::dynamic:
            for (const json& p : j.at("patterns")) s.patterns.push_back(tensor_from_json(p));
            break;
        case TriggerKind::spread_out:
            for (const json& p : j.at("positions"))
                s.positions.emplace_back(p.at(0).get<int>(), p.at(1).get<int>());
            s.color = j.at("color").get<std::vector<float>>();
            break;
        case TriggerKind::noise:
            s.delta = tensor_from_json(j.at("delta"));
            s.amplitude = j.at("amplitude").get<float>();
            break;
        case TriggerKind::smooth:
            s.trigger_image = tensor_from_json(j.at("trigger_image"));
            s.range = j.at("range").get<float>();
            break;
        case TriggerKind::color_transform:
            s.mix = j.at("mix").get<std::vector<float>>();
            s.gain = j.at("gain").get<std::vector<float>>();
            s.bias = j.at("bias").get<std::vector<float>>();
            break;
    }
    return s;
}

}  // namespace misa
