#include "misa/ocsvm.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <stdexcept>

namespace misa {

double rbf_kernel(const std::vector<float>& a, const std::vector<float>& b, double gamma) {
    if (a.size() != b.size())
        throw std::invalid_argument("rbf_kernel: dimension mismatch (" + std::to_string(a.size()) +
                                    " vs " + std::to_string(b.size()) + ")");
    if (!(gamma > 0.0)) throw std::invalid_argument("rbf_kernel: gamma must be positive");
    double d2 = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        d2 += d * d;
    }
    return std::exp(-gamma * d2);
}

namespace {

std::vector<float> apply_standardization(const OneClassSvmModel& model,
                                         const std::vector<float>& x) {
    std::vector<float> z(x.size());
    for (std::size_t d = 0; d < x.size(); ++d)
        z[d] = (x[d] - model.feat_mean[d]) / model.feat_scale[d];
    return z;
}

}  // namespace

OneClassSvmModel fit_one_class_svm(const std::vector<std::vector<float>>& features,
                                   const OcsvmConfig& config, int boundary) {
    const std::size_t n = features.size();
    if (n < 2) throw std::invalid_argument("one-class SVM needs at least 2 training points");
    if (!(config.nu > 0.0 && config.nu <= 1.0))
        throw std::invalid_argument("one-class SVM: nu must lie in (0,1]");
    if (!(config.gamma > 0.0)) throw std::invalid_argument("one-class SVM: gamma must be positive");
    const std::size_t dim = features.front().size();
    if (dim == 0) throw std::invalid_argument("one-class SVM: empty feature vectors");
    for (const auto& f : features)
        if (f.size() != dim)
            throw std::invalid_argument("one-class SVM: inconsistent feature dimensions");

    OneClassSvmModel model;
    model.boundary = boundary;
    model.feature_dim = static_cast<int>(dim);
    model.nu = config.nu;
    model.gamma = config.gamma;
    model.standardized = config.standardize;

    // Optional per-dimension z-scoring, stats from the training set. Scales
    // with zero variance fall back to 1 so constant dimensions pass through.
    std::vector<std::vector<float>> train = features;
    if (config.standardize) {
        model.feat_mean.resize(dim);
        model.feat_scale.resize(dim);
        for (std::size_t d = 0; d < dim; ++d) {
            double mu = 0.0;
            for (const auto& f : train) mu += static_cast<double>(f[d]);
            mu /= static_cast<double>(n);
            double var = 0.0;
            for (const auto& f : train) {
                const double c = static_cast<double>(f[d]) - mu;
                var += c * c;
            }
            var /= static_cast<double>(n);
            const double sd = std::sqrt(var);
            model.feat_mean[d] = static_cast<float>(mu);
            model.feat_scale[d] = sd > 1e-12 ? static_cast<float>(sd) : 1.0f;
        }
        for (auto& f : train)
            for (std::size_t d = 0; d < dim; ++d) f[d] = (f[d] - model.feat_mean[d]) / model.feat_scale[d];
    }

    const double upper = 1.0 / (config.nu * static_cast<double>(n));

    // Full kernel matrix; desk-scale n keeps this a few MB.
    std::vector<double> kmat(n * n);
    for (std::size_t i = 0; i < n; ++i) {
        kmat[i * n + i] = 1.0;
        for (std::size_t j = i + 1; j < n; ++j) {
            const double k = rbf_kernel(train[i], train[j], config.gamma);
            kmat[i * n + j] = k;
            kmat[j * n + i] = k;
        }
    }

    // Uniform feasible start; gradient g = K alpha.
    std::vector<double> alpha(n, 1.0 / static_cast<double>(n));
    std::vector<double> grad(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        double g = 0.0;
        for (std::size_t j = 0; j < n; ++j) g += kmat[i * n + j] * alpha[j];
        grad[i] = g;
    }

    // Max-violating pair: shift weight from the highest-gradient point that
    // can still give (alpha > 0) to the lowest-gradient point that can still
    // take (alpha < upper); optimal when the spread is inside tolerance.
    std::uint64_t iter = 0;
    double residual = 0.0;
    while (true) {
        std::size_t up = n, dn = n;
        double gmax = -1e300, gmin = 1e300;
        for (std::size_t i = 0; i < n; ++i) {
            if (alpha[i] > 0.0 && grad[i] > gmax) {
                gmax = grad[i];
                up = i;
            }
            if (alpha[i] < upper && grad[i] < gmin) {
                gmin = grad[i];
                dn = i;
            }
        }
        residual = gmax - gmin;
        if (up == n || dn == n || up == dn || residual <= config.kkt_tolerance) break;
        if (++iter > config.max_iterations)
            throw std::runtime_error("one-class SVM did not converge within " +
                                     std::to_string(config.max_iterations) +
                                     " iterations; KKT residual " + std::to_string(residual));

        const double eta = kmat[up * n + up] + kmat[dn * n + dn] - 2.0 * kmat[up * n + dn];
        const double room = std::min(alpha[up], upper - alpha[dn]);
        double step = (eta > 1e-12) ? std::min((gmax - gmin) / eta, room) : room;
        alpha[up] -= step;
        alpha[dn] += step;
        for (std::size_t k = 0; k < n; ++k)
            grad[k] += step * (kmat[dn * n + k] - kmat[up * n + k]);
    }
    model.iterations = iter;
    model.kkt_residual = residual;

    // rho from the margin vectors (strictly inside the box), falling back to
    // the most conservative support-vector boundary when none are free.
    const double box_eps = 1e-9 * upper;
    double rho_sum = 0.0;
    std::size_t free_count = 0;
    double sv_min = 1e300;
    for (std::size_t i = 0; i < n; ++i) {
        if (alpha[i] <= 0.0) continue;
        sv_min = std::min(sv_min, grad[i]);
        if (alpha[i] < upper - box_eps && alpha[i] > box_eps) {
            rho_sum += grad[i];
            ++free_count;
        }
    }
    model.rho = free_count > 0 ? rho_sum / static_cast<double>(free_count) : sv_min;

    for (std::size_t i = 0; i < n; ++i) {
        if (alpha[i] <= 0.0) continue;
        model.alpha.push_back(alpha[i]);
        model.support_vectors.push_back(train[i]);
    }
    return model;
}

OneClassSvmModel fit_one_class_svm(const std::vector<AttributionMap>& maps,
                                   const OcsvmConfig& config) {
    if (maps.size() < 2) throw std::invalid_argument("one-class SVM needs at least 2 maps");
    const int boundary = maps.front().boundary;
    const auto& shape = maps.front().values.shape;
    std::vector<std::vector<float>> features;
    features.reserve(maps.size());
    for (const AttributionMap& m : maps) {
        if (m.boundary != boundary || m.values.shape != shape)
            throw std::invalid_argument("one-class SVM: maps must share one boundary and shape");
        features.push_back(m.values.data);
    }
    return fit_one_class_svm(features, config, boundary);
}

SvmDecision decide(const OneClassSvmModel& model, const std::vector<float>& features) {
    if (static_cast<int>(features.size()) != model.feature_dim)
        throw std::invalid_argument("SVM decide: feature dimension " +
                                    std::to_string(features.size()) + " does not match model (" +
                                    std::to_string(model.feature_dim) + ")");
    std::vector<float> holder;
    const std::vector<float>* px = &features;
    if (model.standardized) {
        holder = apply_standardization(model, features);
        px = &holder;
    }
    double score = 0.0;
    for (std::size_t i = 0; i < model.alpha.size(); ++i)
        score += model.alpha[i] * rbf_kernel(model.support_vectors[i], *px, model.gamma);
    score -= model.rho;
    return {score >= 0.0 ? 1 : -1, score};
}

SvmDecision decide(const OneClassSvmModel& model, const AttributionMap& map) {
    if (model.boundary >= 0 && map.boundary != model.boundary)
        throw std::invalid_argument("SVM decide: map boundary " + std::to_string(map.boundary) +
                                    " does not match model boundary " +
                                    std::to_string(model.boundary));
    return decide(model, map.values.data);
}

void save_svm_model(const OneClassSvmModel& model, const std::string& path) {
    json header;
    header["kind"] = "ocsvm";
    header["boundary"] = model.boundary;
    header["dim"] = model.feature_dim;
    header["nu"] = model.nu;
    header["gamma"] = model.gamma;
    header["n_sv"] = model.alpha.size();
    header["standardized"] = model.standardized;
    header["iterations"] = model.iterations;

    std::vector<std::uint8_t> blob;
    append_f64_le(blob, model.rho);
    append_f64_le(blob, model.kkt_residual);
    for (double a : model.alpha) append_f64_le(blob, a);
    for (const auto& sv : model.support_vectors) append_f32_span_le(blob, sv.data(), sv.size());
    if (model.standardized) {
        append_f32_span_le(blob, model.feat_mean.data(), model.feat_mean.size());
        append_f32_span_le(blob, model.feat_scale.data(), model.feat_scale.size());
    }
    write_blob_file(path, header, blob);
}

OneClassSvmModel load_svm_model(const std::string& path) {
    const BlobFile file = read_blob_file(path);
    if (file.header.value("kind", "") != "ocsvm")
        throw std::runtime_error(path + ": not a one-class SVM file");

    OneClassSvmModel model;
    model.boundary = file.header.at("boundary").get<int>();
    model.feature_dim = file.header.at("dim").get<int>();
    model.nu = file.header.at("nu").get<double>();
    model.gamma = file.header.at("gamma").get<double>();
    model.standardized = file.header.at("standardized").get<bool>();
    model.iterations = file.header.at("iterations").get<std::uint64_t>();
    const std::size_t n_sv = file.header.at("n_sv").get<std::size_t>();

    BlobReader reader(file.blob.data(), file.blob.size());
    model.rho = reader.f64();
    model.kkt_residual = reader.f64();
    model.alpha.resize(n_sv);
    for (double& a : model.alpha) a = reader.f64();
    model.support_vectors.assign(n_sv, std::vector<float>(model.feature_dim));
    for (auto& sv : model.support_vectors)
        reader.f32_array(sv.data(), static_cast<std::size_t>(model.feature_dim));
    if (model.standardized) {
        model.feat_mean.resize(static_cast<std::size_t>(model.feature_dim));
        model.feat_scale.resize(static_cast<std::size_t>(model.feature_dim));
        reader.f32_array(model.feat_mean.data(), model.feat_mean.size());
        reader.f32_array(model.feat_scale.data(), model.feat_scale.size());
    }
    reader.expect_exhausted(path);
    return model;
}

const OneClassSvmModel& SvmBank::at(int boundary) const {
    const auto it = models.find(boundary);
    if (it == models.end())
        throw std::invalid_argument("SVM bank has no model for boundary " +
                                    std::to_string(boundary));
    return it->second;
}

void save_svm_bank(const SvmBank& bank, const std::string& dir) {
    if (bank.models.empty()) throw std::invalid_argument("refusing to save an empty SVM bank");
    std::filesystem::create_directories(dir);
    json index;
    index["kind"] = "svm_bank";
    index["provenance"] = bank.provenance;
    json boundaries = json::array();
    json files = json::object();
    for (const auto& [boundary, model] : bank.models) {
        const std::string name = "boundary_" + std::to_string(boundary) + ".svm";
        save_svm_model(model, (std::filesystem::path(dir) / name).string());
        boundaries.push_back(boundary);
        files[std::to_string(boundary)] = name;
    }
    index["boundaries"] = boundaries;
    index["files"] = files;
    write_text_file((std::filesystem::path(dir) / "bank.json").string(), index.dump() + "\n");
}

SvmBank load_svm_bank(const std::string& dir) {
    const std::string index_path = (std::filesystem::path(dir) / "bank.json").string();
    json index;
    try {
        index = json::parse(read_text_file(index_path));
    } catch (const json::parse_error& e) {
        throw std::runtime_error(index_path + ": bad bank index: " + e.what());
    }
    if (index.value("kind", "") != "svm_bank")
        throw std::runtime_error(index_path + ": not an SVM bank index");
    SvmBank bank;
    bank.provenance = index.value("provenance", json::object());
    for (const auto& [key, name] : index.at("files").items()) {
        const int boundary = std::stoi(key);
        OneClassSvmModel model =
            load_svm_model((std::filesystem::path(dir) / name.get<std::string>()).string());
        if (model.boundary != boundary)
            throw std::runtime_error(dir + ": bank file " + name.get<std::string>() +
                                     " claims boundary " + std::to_string(model.boundary));
        bank.models.emplace(boundary, std::move(model));
    }
    return bank;
}

}  // namespace misa
