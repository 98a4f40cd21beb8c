#include "cfu/dataset.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace cfu {

std::vector<double> Normalization::inverse(std::span<const double> y) const {
    if (y.size() != scale.size()) throw std::invalid_argument("normalization inverse: width mismatch");
    std::vector<double> x(y.size());
    for (std::size_t j = 0; j < y.size(); ++j) x[j] = scale[j] == 0.0 ? offset[j] : (y[j] - offset[j]) / scale[j];
    return x;
}

void Dataset::validate() const {
    if (labels.empty()) throw std::invalid_argument("dataset must contain at least one row");
    if (dims == 0 || features.size() != labels.size() * dims)
        throw std::invalid_argument("dataset feature matrix does not match rows x dims");
    if (!all_finite(features)) throw std::invalid_argument("dataset contains non-finite features");
    for (int y : labels)
        if (y < 0 || static_cast<std::size_t>(y) >= num_classes)
            throw std::invalid_argument("dataset label " + std::to_string(y) + " outside [0, " +
                                        std::to_string(num_classes) + ")");
}

// ---------------------------------------------------------------------------
// IDX

namespace {

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
    std::vector<std::uint8_t> out;
    const auto name = path.string();
    if (name.size() >= 3 && name.compare(name.size() - 3, 3, ".gz") == 0) {
        gzFile f = gzopen(name.c_str(), "rb");
        if (!f) throw IdxError(IdxError::Kind::Io, "cannot open " + name);
        std::uint8_t buf[1 << 16];
        int got = 0;
        while ((got = gzread(f, buf, sizeof buf)) > 0) out.insert(out.end(), buf, buf + got);
        const bool failed = got < 0;
        gzclose(f);
        if (failed) throw IdxError(IdxError::Kind::Io, "gzip decode failed for " + name);
        return out;
    }
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IdxError(IdxError::Kind::Io, "cannot open " + name);
    out.assign(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
    return out;
}

std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t at, const std::string& name) {
    if (at + 4 > b.size()) throw IdxError(IdxError::Kind::Truncated, name + ": truncated header");
    return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) |
           std::uint32_t{b[at + 3]};
}

void put_be32(std::ostream& os, std::uint32_t v) {
    const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                       static_cast<char>(v)};
    os.write(b, 4);
}

}  // namespace

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
    const auto img = read_bytes(images);
    const auto lab = read_bytes(labels);
    const auto iname = images.string(), lname = labels.string();

    if (be32(img, 0, iname) != kIdxImageMagic)
        throw IdxError(IdxError::Kind::BadMagic, iname + ": expected image magic 0x00000803");
    if (be32(lab, 0, lname) != kIdxLabelMagic)
        throw IdxError(IdxError::Kind::BadMagic, lname + ": expected label magic 0x00000801");
    const std::size_t n = be32(img, 4, iname);
    const std::size_t rows = be32(img, 8, iname);
    const std::size_t cols = be32(img, 12, iname);
    const std::size_t nl = be32(lab, 4, lname);
    if (n != nl)
        throw IdxError(IdxError::Kind::CountMismatch,
                       "image count " + std::to_string(n) + " does not match label count " + std::to_string(nl));
    if (n == 0) throw IdxError(IdxError::Kind::Empty, iname + ": no images");
    const std::size_t pix = rows * cols;
    if (img.size() < 16 + n * pix) throw IdxError(IdxError::Kind::Truncated, iname + ": truncated pixel data");
    if (lab.size() < 8 + n) throw IdxError(IdxError::Kind::Truncated, lname + ": truncated label data");

    Dataset ds;
    ds.dims = pix;
    ds.feature_shape = {1, rows, cols};
    ds.features.resize(n * pix);
    for (std::size_t i = 0; i < n * pix; ++i) ds.features[i] = static_cast<double>(img[16 + i]) / 255.0;
    ds.labels.resize(n);
    int max_label = 0;
    for (std::size_t i = 0; i < n; ++i) max_label = std::max(max_label, ds.labels[i] = lab[8 + i]);
    ds.num_classes = static_cast<std::size_t>(max_label) + 1;
    ds.range = FeatureRange{0.0, 1.0};
    ds.provenance = "idx:" + iname;
    return ds;
}

void write_idx_images(const std::filesystem::path& path, std::size_t rows, std::size_t cols,
                      std::span<const std::uint8_t> pixels) {
    if (rows * cols == 0 || pixels.size() % (rows * cols) != 0)
        throw std::invalid_argument("idx images: pixel count not a multiple of rows x cols");
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IdxError(IdxError::Kind::Io, "cannot write " + path.string());
    put_be32(os, kIdxImageMagic);
    put_be32(os, static_cast<std::uint32_t>(pixels.size() / (rows * cols)));
    put_be32(os, static_cast<std::uint32_t>(rows));
    put_be32(os, static_cast<std::uint32_t>(cols));
    os.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
}

void write_idx_labels(const std::filesystem::path& path, std::span<const std::uint8_t> labels) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IdxError(IdxError::Kind::Io, "cannot write " + path.string());
    put_be32(os, kIdxLabelMagic);
    put_be32(os, static_cast<std::uint32_t>(labels.size()));
    os.write(reinterpret_cast<const char*>(labels.data()), static_cast<std::streamsize>(labels.size()));
}

// ---------------------------------------------------------------------------
// CSV

std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
    std::vector<std::vector<std::string>> rows;
    std::vector<std::string> row;
    std::string field;
    bool quoted = false, field_started = false;
    auto end_field = [&] {
        row.push_back(std::move(field));
        field.clear();
        field_started = false;
    };
    auto end_row = [&] {
        end_field();
        if (!(row.size() == 1 && row[0].empty())) rows.push_back(std::move(row));
        row.clear();
    };
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < text.size() && text[i + 1] == '"') {
                    field += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                field += c;
            }
            continue;
        }
        switch (c) {
            case '"':
                if (field_started) throw std::invalid_argument("csv: stray quote inside unquoted field");
                quoted = field_started = true;
                break;
            case ',': end_field(); break;
            case '\r':
                if (i + 1 < text.size() && text[i + 1] == '\n') ++i;
                end_row();
                break;
            case '\n': end_row(); break;
            default:
                field += c;
                field_started = true;
        }
    }
    if (quoted) throw std::invalid_argument("csv: unterminated quoted field");
    if (!field.empty() || !row.empty()) end_row();
    return rows;
}

namespace {

double parse_number(const std::string& s, std::size_t line, std::size_t col) {
    std::size_t used = 0;
    double v = 0.0;
    try {
        v = std::stod(s, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    while (used < s.size() && std::isspace(static_cast<unsigned char>(s[used]))) ++used;
    if (used == 0 || used != s.size() || !std::isfinite(v))
        throw std::invalid_argument("csv line " + std::to_string(line) + ", column " + std::to_string(col) +
                                    ": not a finite number '" + s + "'");
    return v;
}

}  // namespace

Dataset load_csv(const std::filesystem::path& path, const CsvOptions& options) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    std::stringstream buf;
    buf << is.rdbuf();
    const auto rows = parse_csv(buf.str());
    if (rows.size() < 2) throw std::invalid_argument(path.string() + ": csv has no data rows");
    const auto& header = rows[0];
    std::optional<std::size_t> label_col;
    if (options.has_labels) {
        label_col = header.size() - 1;
        if (options.label_column) {
            const auto it = std::find(header.begin(), header.end(), *options.label_column);
            if (it == header.end())
                throw std::invalid_argument(path.string() + ": no column named '" + *options.label_column + "'");
            label_col = static_cast<std::size_t>(it - header.begin());
        }
    }
    Dataset ds;
    ds.dims = header.size() - (label_col ? 1 : 0);
    if (ds.dims == 0) throw std::invalid_argument(path.string() + ": csv has no feature columns");
    ds.feature_shape = {ds.dims};
    int max_label = 0;
    for (std::size_t r = 1; r < rows.size(); ++r) {
        if (rows[r].size() != header.size())
            throw std::invalid_argument(path.string() + ": line " + std::to_string(r + 1) + " has " +
                                        std::to_string(rows[r].size()) + " fields, header has " +
                                        std::to_string(header.size()));
        for (std::size_t c = 0; c < header.size(); ++c) {
            const double v = parse_number(rows[r][c], r + 1, c + 1);
            if (label_col && c == *label_col) {
                if (v < 0 || v != std::floor(v))
                    throw std::invalid_argument(path.string() + ": line " + std::to_string(r + 1) +
                                                ": label must be a non-negative integer");
                ds.labels.push_back(static_cast<int>(v));
                max_label = std::max(max_label, ds.labels.back());
            } else {
                ds.features.push_back(v);
            }
        }
        if (!label_col) ds.labels.push_back(0);
    }
    ds.num_classes = static_cast<std::size_t>(max_label) + 1;
    ds.provenance = "csv:" + path.string();
    return ds;
}

// ---------------------------------------------------------------------------
// Normalization

Dataset apply_normalization(const Dataset& ds, const Normalization& norm, FeatureRange range) {
    if (norm.scale.size() != ds.dims || norm.offset.size() != ds.dims)
        throw std::invalid_argument("normalization width does not match dataset");
    Dataset out = ds;
    bool inside = true;
    for (std::size_t i = 0; i < out.size(); ++i)
        for (std::size_t j = 0; j < out.dims; ++j) {
            double& v = out.features[i * out.dims + j];
            v = v * norm.scale[j] + norm.offset[j];
            if (v < range.lo - 1e-12 || v > range.hi + 1e-12) inside = false;
        }
    if (ds.normalization) {
        Normalization composed = norm;
        for (std::size_t j = 0; j < ds.dims; ++j) {
            composed.scale[j] = ds.normalization->scale[j] * norm.scale[j];
            composed.offset[j] = ds.normalization->offset[j] * norm.scale[j] + norm.offset[j];
        }
        out.normalization = std::move(composed);
    } else {
        out.normalization = norm;
    }
    if (inside) {
        out.range = range;
    } else {
        out.range.reset();
        out.warnings.push_back("values fall outside the target range after normalization");
    }
    return out;
}

Dataset normalize(const Dataset& ds, FeatureRange range) {
    if (!(range.lo < range.hi)) throw std::invalid_argument("normalize: empty target range");
    if (ds.range && *ds.range == range) return ds;
    Normalization norm;
    norm.scale.resize(ds.dims);
    norm.offset.resize(ds.dims);
    std::vector<std::string> warnings;
    if (ds.range) {
        const double s = (range.hi - range.lo) / (ds.range->hi - ds.range->lo);
        for (std::size_t j = 0; j < ds.dims; ++j) {
            norm.scale[j] = s;
            norm.offset[j] = range.lo - ds.range->lo * s;
        }
    } else {
        for (std::size_t j = 0; j < ds.dims; ++j) {
            double mn = ds.features[j], mx = ds.features[j];
            for (std::size_t i = 1; i < ds.size(); ++i) {
                mn = std::min(mn, ds.features[i * ds.dims + j]);
                mx = std::max(mx, ds.features[i * ds.dims + j]);
            }
            if (mx == mn) {
                norm.scale[j] = 0.0;
                norm.offset[j] = 0.5 * (range.lo + range.hi);
                warnings.push_back("feature " + std::to_string(j) + " is constant; mapped to range midpoint");
            } else {
                norm.scale[j] = (range.hi - range.lo) / (mx - mn);
                norm.offset[j] = range.lo - mn * norm.scale[j];
            }
        }
    }
    Dataset out = apply_normalization(ds, norm, range);
    for (auto& v : out.features) v = std::clamp(v, range.lo, range.hi);
    out.range = range;
    out.warnings.insert(out.warnings.end(), warnings.begin(), warnings.end());
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic shift pair

namespace {

std::vector<int> balanced_labels(std::size_t n, const std::vector<double>& weights, Rng& rng) {
    const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
    std::vector<std::size_t> counts(weights.size());
    std::vector<std::pair<double, std::size_t>> remainders;
    std::size_t assigned = 0;
    for (std::size_t c = 0; c < weights.size(); ++c) {
        const double exact = static_cast<double>(n) * weights[c] / total;
        counts[c] = static_cast<std::size_t>(std::floor(exact));
        assigned += counts[c];
        remainders.push_back({-(exact - std::floor(exact)), c});
    }
    std::sort(remainders.begin(), remainders.end());
    for (std::size_t i = 0; assigned < n; ++i, ++assigned) ++counts[remainders[i % remainders.size()].second];
    std::vector<int> labels;
    labels.reserve(n);
    for (std::size_t c = 0; c < counts.size(); ++c) labels.insert(labels.end(), counts[c], static_cast<int>(c));
    for (std::size_t i = labels.size(); i > 1; --i) std::swap(labels[i - 1], labels[rng() % i]);
    return labels;
}

Dataset draw_mixture(std::size_t n, const std::vector<std::vector<double>>& means, const std::vector<double>& weights,
                     Rng rng) {
    const std::size_t D = means[0].size();
    Dataset ds;
    ds.dims = D;
    ds.feature_shape = {D};
    ds.num_classes = means.size();
    ds.labels = balanced_labels(n, weights, rng);
    ds.features.resize(n * D);
    std::normal_distribution<double> noise(0.0, 1.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < D; ++j) ds.features[i * D + j] = means[ds.labels[i]][j] + noise(rng);
    return ds;
}

}  // namespace

ShiftPair synth_shift_pair(const SynthConfig& cfg) {
    if (cfg.shift < 0.0) throw std::invalid_argument("synth: shift magnitude must be non-negative");
    if (cfg.dims == 0 || cfg.classes < 2) throw std::invalid_argument("synth: need dims >= 1 and classes >= 2");
    if (cfg.n_train == 0 || cfg.n_test == 0) throw std::invalid_argument("synth: split sizes must be positive");
    std::vector<double> weights = cfg.class_weights;
    if (weights.empty()) weights.assign(cfg.classes, 1.0);
    if (weights.size() != cfg.classes) throw std::invalid_argument("synth: class_weights size mismatch");
    for (double w : weights)
        if (!(w > 0.0)) throw std::invalid_argument("synth: class weights must be positive");

    const std::size_t D = cfg.dims;
    Rng geometry = derive_rng(cfg.seed, 0);
    std::normal_distribution<double> gauss(0.0, 1.0);
    auto unit_vector = [&] {
        std::vector<double> v(D);
        double norm = 0.0;
        for (auto& x : v) {
            x = gauss(geometry);
            norm += x * x;
        }
        norm = std::sqrt(norm);
        for (auto& x : v) x /= norm;
        return v;
    };
    std::vector<std::vector<double>> means(cfg.classes);
    for (auto& m : means) {
        m = unit_vector();
        for (auto& x : m) x *= cfg.class_separation;
    }
    const auto direction = unit_vector();
    std::vector<double> distortion(D);
    for (auto& d : distortion) d = 1.0 + 0.2 * cfg.shift * uniform01(geometry);

    ShiftPair out;
    out.train = draw_mixture(cfg.n_train, means, weights, derive_rng(cfg.seed, 1));
    out.test = draw_mixture(cfg.n_test, means, weights, derive_rng(cfg.seed, 2));
    out.ood = draw_mixture(cfg.n_test, means, weights, derive_rng(cfg.seed, 3));

    std::vector<double> centroid(D, 0.0);
    for (std::size_t i = 0; i < out.train.size(); ++i)
        for (std::size_t j = 0; j < D; ++j) centroid[j] += out.train.features[i * D + j];
    for (auto& c : centroid) c /= static_cast<double>(out.train.size());
    double radius = 0.0;
    for (std::size_t i = 0; i < out.train.size(); ++i) {
        double r2 = 0.0;
        for (std::size_t j = 0; j < D; ++j) r2 += std::pow(out.train.features[i * D + j] - centroid[j], 2);
        radius += std::sqrt(r2);
    }
    radius /= static_cast<double>(out.train.size());

    for (std::size_t i = 0; i < out.ood.size(); ++i)
        for (std::size_t j = 0; j < D; ++j) {
            double& v = out.ood.features[i * D + j];
            v = centroid[j] + (v - centroid[j]) * distortion[j] + cfg.shift * radius * direction[j];
        }

    // One affine map for all splits, fitted on their union, so the splits stay comparable.
    Normalization norm;
    norm.scale.resize(D);
    norm.offset.resize(D);
    const FeatureRange range{};
    for (std::size_t j = 0; j < D; ++j) {
        double mn = out.train.features[j], mx = mn;
        for (const Dataset* ds : {&out.train, &out.test, &out.ood})
            for (std::size_t i = 0; i < ds->size(); ++i) {
                mn = std::min(mn, ds->features[i * D + j]);
                mx = std::max(mx, ds->features[i * D + j]);
            }
        norm.scale[j] = (range.hi - range.lo) / (mx - mn);
        norm.offset[j] = range.lo - mn * norm.scale[j];
    }
    const std::string tag = "synth:seed=" + std::to_string(cfg.seed) + ",shift=" + std::to_string(cfg.shift);
    for (auto [ds, name] : {std::pair{&out.train, "train"}, std::pair{&out.test, "test"}, std::pair{&out.ood, "ood"}}) {
        *ds = apply_normalization(*ds, norm, range);
        for (auto& v : ds->features) v = std::clamp(v, range.lo, range.hi);
        ds->range = range;
        ds->warnings.clear();
        ds->provenance = tag + "," + name;
    }
    return out;
}

nlohmann::json dataset_summary(const Dataset& ds) {
    nlohmann::json j;
    j["rows"] = ds.size();
    j["dims"] = ds.dims;
    j["classes"] = ds.num_classes;
    j["feature_shape"] = ds.feature_shape;
    j["provenance"] = ds.provenance;
    if (ds.range) j["range"] = {ds.range->lo, ds.range->hi};
    else j["range"] = nullptr;
    if (ds.normalization) j["normalization"] = {{"scale", ds.normalization->scale}, {"offset", ds.normalization->offset}};
    else j["normalization"] = nullptr;
    j["warnings"] = ds.warnings;
    return j;
}

void write_manifest(const std::filesystem::path& path,
                    const std::vector<std::pair<std::string, const Dataset*>>& splits) {
    nlohmann::json j;
    j["splits"] = nlohmann::json::object();
    for (const auto& [name, ds] : splits) j["splits"][name] = dataset_summary(*ds);
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write manifest " + path.string());
    os << j.dump(2) << '\n';
}

}  // namespace cfu
