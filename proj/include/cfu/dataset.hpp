#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "cfu/tensor.hpp"

namespace cfu {

/// Per-feature affine map y = x * scale + offset applied by normalize().
struct Normalization {
    std::vector<double> scale;
    std::vector<double> offset;

    std::vector<double> inverse(std::span<const double> y) const;
};

struct Dataset {
    std::vector<double> features;  // rows x dims, row-major
    std::size_t dims = 0;
    std::vector<int> labels;
    std::size_t num_classes = 0;
    Shape feature_shape;                // {dims} for tabular, {1, rows, cols} for images
    std::optional<FeatureRange> range;  // declared range every feature lies in
    std::string provenance;
    std::optional<Normalization> normalization;
    std::vector<std::string> warnings;

    std::size_t size() const { return labels.size(); }
    MatrixView view() const { return {features, size(), dims}; }
    std::span<const double> row(std::size_t i) const { return {features.data() + i * dims, dims}; }

    /// Throws std::invalid_argument when an invariant is broken (NaN, label range, N >= 1).
    void validate() const;
};

class IdxError : public std::runtime_error {
public:
    enum class Kind { Io, BadMagic, Truncated, CountMismatch, Empty };
    IdxError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    Kind kind() const { return kind_; }

private:
    Kind kind_;
};

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

/// Reads an IDX image/label pair (gzip-compressed when the name ends in ".gz").
/// Pixels are mapped to [0, 1]; declared range is [0, 1].
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);

void write_idx_images(const std::filesystem::path& path, std::size_t rows, std::size_t cols,
                      std::span<const std::uint8_t> pixels);
void write_idx_labels(const std::filesystem::path& path, std::span<const std::uint8_t> labels);

/// RFC-4180 style: quoted fields, doubled quotes, embedded separators and newlines.
std::vector<std::vector<std::string>> parse_csv(const std::string& text);

struct CsvOptions {
    std::optional<std::string> label_column;  // header name; the last column when unset
    bool has_labels = true;
};

/// Tabular CSV with a header row. Labels must be non-negative integers.
Dataset load_csv(const std::filesystem::path& path, const CsvOptions& options = {});

/// Maps features into `range`. Data with a declared range is mapped affinely from
/// it (pixels in [0, 1] become [-0.5, 0.5]); undeclared data is min-max scaled per
/// feature. Data already declared in `range` is returned unchanged.
Dataset normalize(const Dataset& ds, FeatureRange range = {});

/// Applies an existing transform (e.g. fitted on a training split).
Dataset apply_normalization(const Dataset& ds, const Normalization& norm, FeatureRange range);

struct SynthConfig {
    std::uint64_t seed = 0;
    std::size_t n_train = 3000;
    std::size_t n_test = 1000;
    double shift = 5.0;
    std::size_t dims = 16;
    std::size_t classes = 3;
    double class_separation = 3.0;  // distance of each class mean from the origin, in noise std units
    std::vector<double> class_weights;  // uniform when empty
};

struct ShiftPair {
    Dataset train;
    Dataset test;  // same distribution as train
    Dataset ood;   // translated by shift x data radius, with covariance distortion
};

/// Seeded Gaussian-mixture stand-in for an in-distribution / shifted test pair.
/// All three splits share one normalization onto [-0.5, 0.5].
ShiftPair synth_shift_pair(const SynthConfig& cfg);

nlohmann::json dataset_summary(const Dataset& ds);

/// Manifest naming each split and its normalization parameters.
void write_manifest(const std::filesystem::path& path,
                    const std::vector<std::pair<std::string, const Dataset*>>& splits);

}  // namespace cfu
