#include "cfu/network.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>

#include <json.hpp>

namespace cfu {

namespace {

[[noreturn]] void shape_error(std::size_t layer, const std::string& what) {
    throw std::invalid_argument("layer " + std::to_string(layer) + ": " + what);
}

}  // namespace

std::string to_string(LayerKind kind) {
    switch (kind) {
        case LayerKind::Dense: return "dense";
        case LayerKind::Relu: return "relu";
        case LayerKind::Dropout: return "dropout";
        case LayerKind::Conv2d: return "conv2d";
        case LayerKind::MaxPool: return "maxpool";
        case LayerKind::Flatten: return "flatten";
    }
    return "unknown";
}

LayerKind layer_kind_from_string(const std::string& name) {
    for (auto k : {LayerKind::Dense, LayerKind::Relu, LayerKind::Dropout, LayerKind::Conv2d, LayerKind::MaxPool,
                   LayerKind::Flatten})
        if (to_string(k) == name) return k;
    throw std::invalid_argument("unknown layer type '" + name + "'");
}

LayerSpec LayerSpec::dense(std::size_t in, std::size_t out) {
    LayerSpec s;
    s.kind = LayerKind::Dense;
    s.in = in;
    s.out = out;
    return s;
}

LayerSpec LayerSpec::relu() { return LayerSpec{}; }

LayerSpec LayerSpec::dropout(double rate) {
    LayerSpec s;
    s.kind = LayerKind::Dropout;
    s.rate = rate;
    return s;
}

LayerSpec LayerSpec::conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
                            std::size_t stride) {
    LayerSpec s;
    s.kind = LayerKind::Conv2d;
    s.in_channels = in_channels;
    s.out_channels = out_channels;
    s.kernel = kernel;
    s.stride = stride;
    return s;
}

LayerSpec LayerSpec::maxpool(std::size_t size) {
    LayerSpec s;
    s.kind = LayerKind::MaxPool;
    s.pool = size;
    return s;
}

LayerSpec LayerSpec::flatten() {
    LayerSpec s;
    s.kind = LayerKind::Flatten;
    return s;
}

Network::Network(Shape input_shape, std::vector<LayerSpec> layers, OutputHead head, std::uint64_t init_seed)
    : input_shape_(std::move(input_shape)), specs_(std::move(layers)), head_(head) {
    if (input_shape_.empty() || element_count(input_shape_) == 0)
        throw std::invalid_argument("network input shape must be non-empty");
    Shape shape = input_shape_;
    for (std::size_t i = 0; i < specs_.size(); ++i) {
        const LayerSpec& s = specs_[i];
        Layer layer{s, shape, shape};
        switch (s.kind) {
            case LayerKind::Dense: {
                if (shape.size() != 1 || shape[0] != s.in)
                    shape_error(i, "dense expects input (" + std::to_string(s.in) + "), got " +
                                       shape_to_string(shape));
                if (s.out == 0) shape_error(i, "dense output width must be positive");
                layer.out_shape = {s.out};
                layer.weight = static_cast<int>(params_.size());
                Tensor w({s.out, s.in});
                Rng rng = derive_rng(init_seed, i);
                const double bound = std::sqrt(6.0 / static_cast<double>(s.in));
                for (auto& v : w.values) v = (2.0 * uniform01(rng) - 1.0) * bound;
                params_.push_back(std::move(w));
                layer.bias = static_cast<int>(params_.size());
                params_.emplace_back(Shape{s.out});
                break;
            }
            case LayerKind::Relu:
                break;
            case LayerKind::Dropout:
                if (!(s.rate >= 0.0 && s.rate < 1.0)) shape_error(i, "dropout rate must lie in [0, 1)");
                break;
            case LayerKind::Conv2d: {
                if (shape.size() != 3 || shape[0] != s.in_channels)
                    shape_error(i, "conv2d expects (" + std::to_string(s.in_channels) + ",H,W), got " +
                                       shape_to_string(shape));
                if (s.kernel == 0 || s.stride == 0 || s.out_channels == 0)
                    shape_error(i, "conv2d kernel, stride and channels must be positive");
                if (shape[1] < s.kernel || shape[2] < s.kernel) shape_error(i, "conv2d kernel larger than input");
                layer.out_shape = {s.out_channels, (shape[1] - s.kernel) / s.stride + 1,
                                   (shape[2] - s.kernel) / s.stride + 1};
                layer.weight = static_cast<int>(params_.size());
                Tensor w({s.out_channels, s.in_channels, s.kernel, s.kernel});
                Rng rng = derive_rng(init_seed, i);
                const double bound = std::sqrt(6.0 / static_cast<double>(s.in_channels * s.kernel * s.kernel));
                for (auto& v : w.values) v = (2.0 * uniform01(rng) - 1.0) * bound;
                params_.push_back(std::move(w));
                layer.bias = static_cast<int>(params_.size());
                params_.emplace_back(Shape{s.out_channels});
                break;
            }
            case LayerKind::MaxPool:
                if (shape.size() != 3) shape_error(i, "maxpool expects (C,H,W), got " + shape_to_string(shape));
                if (s.pool == 0 || shape[1] < s.pool || shape[2] < s.pool)
                    shape_error(i, "maxpool window invalid for " + shape_to_string(shape));
                layer.out_shape = {shape[0], shape[1] / s.pool, shape[2] / s.pool};
                break;
            case LayerKind::Flatten:
                layer.out_shape = {element_count(shape)};
                break;
        }
        shape = layer.out_shape;
        layers_.push_back(std::move(layer));
    }
    if (head_ == OutputHead::Softmax && (shape.size() != 1 || shape[0] < 2))
        throw std::invalid_argument("softmax head needs a 1-D output with at least two classes, got " +
                                    shape_to_string(shape));
}

std::size_t Network::output_size() const {
    return layers_.empty() ? element_count(input_shape_) : element_count(layers_.back().out_shape);
}

bool Network::has_active_dropout() const {
    return std::any_of(specs_.begin(), specs_.end(),
                       [](const LayerSpec& s) { return s.kind == LayerKind::Dropout && s.rate > 0.0; });
}

ParamGrads Network::zero_grads() const {
    ParamGrads g;
    g.reserve(params_.size());
    for (const auto& p : params_) g.emplace_back(p.size(), 0.0);
    return g;
}

void Network::layer_forward(std::size_t i, std::span<const double> in, std::vector<double>& out, Mode mode,
                            Rng* rng, ForwardTrace* trace) const {
    const Layer& L = layers_[i];
    const LayerSpec& s = L.spec;
    switch (s.kind) {
        case LayerKind::Dense: {
            const auto& W = params_[L.weight].values;
            const auto& b = params_[L.bias].values;
            out.assign(s.out, 0.0);
            for (std::size_t o = 0; o < s.out; ++o) {
                const double* w = W.data() + o * s.in;
                double acc = b[o];
                for (std::size_t j = 0; j < s.in; ++j) acc += w[j] * in[j];
                out[o] = acc;
            }
            break;
        }
        case LayerKind::Relu:
            out.resize(in.size());
            for (std::size_t j = 0; j < in.size(); ++j) out[j] = in[j] > 0.0 ? in[j] : 0.0;
            break;
        case LayerKind::Dropout: {
            out.assign(in.begin(), in.end());
            if (mode == Mode::Eval || s.rate == 0.0) break;
            if (rng == nullptr) throw std::invalid_argument("stochastic forward pass requires an rng stream");
            const double keep_scale = 1.0 / (1.0 - s.rate);
            std::vector<double> mask(in.size());
            for (std::size_t j = 0; j < in.size(); ++j) {
                mask[j] = uniform01(*rng) >= s.rate ? keep_scale : 0.0;
                out[j] *= mask[j];
            }
            if (trace) trace->masks[i] = std::move(mask);
            break;
        }
        case LayerKind::Conv2d: {
            const std::size_t H = L.in_shape[1], Wd = L.in_shape[2];
            const std::size_t Ho = L.out_shape[1], Wo = L.out_shape[2];
            const std::size_t k = s.kernel, st = s.stride;
            const auto& W = params_[L.weight].values;
            const auto& b = params_[L.bias].values;
            out.assign(element_count(L.out_shape), 0.0);
            for (std::size_t o = 0; o < s.out_channels; ++o)
                for (std::size_t y = 0; y < Ho; ++y)
                    for (std::size_t x = 0; x < Wo; ++x) {
                        double acc = b[o];
                        for (std::size_t c = 0; c < s.in_channels; ++c)
                            for (std::size_t u = 0; u < k; ++u)
                                for (std::size_t v = 0; v < k; ++v)
                                    acc += W[((o * s.in_channels + c) * k + u) * k + v] *
                                           in[(c * H + y * st + u) * Wd + x * st + v];
                        out[(o * Ho + y) * Wo + x] = acc;
                    }
            break;
        }
        case LayerKind::MaxPool: {
            const std::size_t C = L.in_shape[0], H = L.in_shape[1], Wd = L.in_shape[2];
            const std::size_t Ho = L.out_shape[1], Wo = L.out_shape[2], p = s.pool;
            out.assign(C * Ho * Wo, 0.0);
            std::vector<std::size_t> winners(out.size());
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t y = 0; y < Ho; ++y)
                    for (std::size_t x = 0; x < Wo; ++x) {
                        std::size_t best = (c * H + y * p) * Wd + x * p;
                        for (std::size_t u = 0; u < p; ++u)
                            for (std::size_t v = 0; v < p; ++v) {
                                const std::size_t idx = (c * H + y * p + u) * Wd + x * p + v;
                                if (in[idx] > in[best]) best = idx;
                            }
                        const std::size_t o = (c * Ho + y) * Wo + x;
                        out[o] = in[best];
                        winners[o] = best;
                    }
            if (trace) trace->argmax[i] = std::move(winners);
            break;
        }
        case LayerKind::Flatten:
            out.assign(in.begin(), in.end());
            break;
    }
}

std::vector<double> Network::forward(std::span<const double> x, Mode mode, Rng* rng) const {
    if (x.size() != input_size())
        throw std::invalid_argument("input has " + std::to_string(x.size()) + " values, network expects " +
                                    shape_to_string(input_shape_));
    std::vector<double> cur(x.begin(), x.end()), next;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        layer_forward(i, cur, next, mode, rng, nullptr);
        if (!all_finite(next)) throw NumericError("non-finite activation after layer " + std::to_string(i));
        std::swap(cur, next);
    }
    return head_ == OutputHead::Softmax ? softmax(cur) : cur;
}

std::vector<double> Network::forward(std::span<const double> x, Mode mode, Rng* rng, ForwardTrace& trace) const {
    if (x.size() != input_size())
        throw std::invalid_argument("input has " + std::to_string(x.size()) + " values, network expects " +
                                    shape_to_string(input_shape_));
    trace.inputs.assign(layers_.size(), {});
    trace.masks.assign(layers_.size(), {});
    trace.argmax.assign(layers_.size(), {});
    std::vector<double> cur(x.begin(), x.end()), next;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        layer_forward(i, cur, next, mode, rng, &trace);
        if (!all_finite(next)) throw NumericError("non-finite activation after layer " + std::to_string(i));
        trace.inputs[i] = std::move(cur);
        cur = next;
    }
    trace.output = head_ == OutputHead::Softmax ? softmax(cur) : cur;
    return trace.output;
}

std::vector<double> Network::layer_backward(std::size_t i, const ForwardTrace& trace, std::vector<double> g,
                                            ParamGrads* grads) const {
    const Layer& L = layers_[i];
    const LayerSpec& s = L.spec;
    const std::vector<double>& in = trace.inputs[i];
    switch (s.kind) {
        case LayerKind::Dense: {
            const auto& W = params_[L.weight].values;
            std::vector<double> dx(s.in, 0.0);
            for (std::size_t o = 0; o < s.out; ++o) {
                const double* w = W.data() + o * s.in;
                for (std::size_t j = 0; j < s.in; ++j) dx[j] += w[j] * g[o];
            }
            if (grads) {
                auto& dW = (*grads)[L.weight];
                auto& db = (*grads)[L.bias];
                for (std::size_t o = 0; o < s.out; ++o) {
                    double* dw = dW.data() + o * s.in;
                    for (std::size_t j = 0; j < s.in; ++j) dw[j] += g[o] * in[j];
                    db[o] += g[o];
                }
            }
            return dx;
        }
        case LayerKind::Relu:
            for (std::size_t j = 0; j < g.size(); ++j)
                if (!(in[j] > 0.0)) g[j] = 0.0;
            return g;
        case LayerKind::Dropout: {
            const auto& mask = trace.masks[i];
            if (!mask.empty())
                for (std::size_t j = 0; j < g.size(); ++j) g[j] *= mask[j];
            return g;
        }
        case LayerKind::Conv2d: {
            const std::size_t H = L.in_shape[1], Wd = L.in_shape[2];
            const std::size_t Ho = L.out_shape[1], Wo = L.out_shape[2];
            const std::size_t k = s.kernel, st = s.stride;
            const auto& W = params_[L.weight].values;
            std::vector<double> dx(in.size(), 0.0);
            for (std::size_t o = 0; o < s.out_channels; ++o)
                for (std::size_t y = 0; y < Ho; ++y)
                    for (std::size_t x = 0; x < Wo; ++x) {
                        const double go = g[(o * Ho + y) * Wo + x];
                        if (grads) (*grads)[L.bias][o] += go;
                        for (std::size_t c = 0; c < s.in_channels; ++c)
                            for (std::size_t u = 0; u < k; ++u)
                                for (std::size_t v = 0; v < k; ++v) {
                                    const std::size_t wi = ((o * s.in_channels + c) * k + u) * k + v;
                                    const std::size_t xi = (c * H + y * st + u) * Wd + x * st + v;
                                    dx[xi] += W[wi] * go;
                                    if (grads) (*grads)[L.weight][wi] += go * in[xi];
                                }
                    }
            return dx;
        }
        case LayerKind::MaxPool: {
            std::vector<double> dx(in.size(), 0.0);
            const auto& winners = trace.argmax[i];
            for (std::size_t o = 0; o < g.size(); ++o) dx[winners[o]] += g[o];
            return dx;
        }
        case LayerKind::Flatten:
            return g;
    }
    return g;
}

std::vector<double> Network::backward_logits(const ForwardTrace& trace, std::span<const double> grad_logits,
                                             ParamGrads* grads) const {
    if (grad_logits.size() != output_size()) throw std::invalid_argument("gradient size does not match output");
    if (grads && grads->size() != params_.size()) throw std::invalid_argument("gradient store layout mismatch");
    std::vector<double> g(grad_logits.begin(), grad_logits.end());
    for (std::size_t i = layers_.size(); i-- > 0;) g = layer_backward(i, trace, std::move(g), grads);
    return g;
}

std::vector<double> Network::backward(const ForwardTrace& trace, std::span<const double> grad_output,
                                      ParamGrads* grads) const {
    if (head_ == OutputHead::Identity) return backward_logits(trace, grad_output, grads);
    const auto& p = trace.output;
    double dot = 0.0;
    for (std::size_t j = 0; j < p.size(); ++j) dot += grad_output[j] * p[j];
    std::vector<double> gz(p.size());
    for (std::size_t j = 0; j < p.size(); ++j) gz[j] = p[j] * (grad_output[j] - dot);
    return backward_logits(trace, gz, grads);
}

std::vector<double> softmax(std::span<const double> logits) {
    const double mx = *std::max_element(logits.begin(), logits.end());
    std::vector<double> p(logits.size());
    double sum = 0.0;
    for (std::size_t j = 0; j < logits.size(); ++j) sum += p[j] = std::exp(logits[j] - mx);
    for (auto& v : p) v /= sum;
    return p;
}

std::size_t argmax(std::span<const double> v) {
    return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

LossAndGrads grad_params(const Network& net, MatrixView batch, std::span<const int> labels, Reduction reduction,
                         Mode mode, Rng* rng) {
    if (net.head() != OutputHead::Softmax) throw std::invalid_argument("cross-entropy needs a softmax head");
    if (batch.rows == 0) throw std::invalid_argument("empty batch");
    if (labels.size() != batch.rows) throw std::invalid_argument("label count does not match batch rows");
    const auto classes = static_cast<int>(net.output_size());
    LossAndGrads out{0.0, net.zero_grads()};
    ForwardTrace trace;
    for (std::size_t r = 0; r < batch.rows; ++r) {
        const int y = labels[r];
        if (y < 0 || y >= classes)
            throw std::out_of_range("label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
        const auto p = net.forward(batch.row(r), mode, rng, trace);
        out.loss += -std::log(std::max(p[y], std::numeric_limits<double>::min()));
        std::vector<double> gz = p;
        gz[y] -= 1.0;
        net.backward_logits(trace, gz, &out.grads);
    }
    if (reduction == Reduction::Mean) {
        const double inv = 1.0 / static_cast<double>(batch.rows);
        out.loss *= inv;
        for (auto& g : out.grads)
            for (auto& v : g) v *= inv;
    }
    return out;
}

double cross_entropy(const Network& net, MatrixView features, std::span<const int> labels) {
    double loss = 0.0;
    for (std::size_t r = 0; r < features.rows; ++r) {
        const auto p = net.forward(features.row(r));
        loss += -std::log(std::max(p.at(labels[r]), std::numeric_limits<double>::min()));
    }
    return features.rows ? loss / static_cast<double>(features.rows) : 0.0;
}

double accuracy(const Network& net, MatrixView features, std::span<const int> labels) {
    std::size_t hits = 0;
    for (std::size_t r = 0; r < features.rows; ++r)
        if (static_cast<int>(argmax(net.forward(features.row(r)))) == labels[r]) ++hits;
    return features.rows ? static_cast<double>(hits) / static_cast<double>(features.rows) : 0.0;
}

// ---------------------------------------------------------------------------
// Checkpoint

namespace {

constexpr char kMagic[8] = {'C', 'F', 'U', 'N', 'E', 'T', '\0', '\1'};

void put_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_u64(std::istream& is) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8)) throw std::runtime_error("checkpoint truncated");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

nlohmann::json spec_to_json(const LayerSpec& s) {
    nlohmann::json j{{"type", to_string(s.kind)}};
    switch (s.kind) {
        case LayerKind::Dense: j["in"] = s.in; j["out"] = s.out; break;
        case LayerKind::Dropout: j["rate"] = s.rate; break;
        case LayerKind::Conv2d:
            j["in_channels"] = s.in_channels;
            j["out_channels"] = s.out_channels;
            j["kernel"] = s.kernel;
            j["stride"] = s.stride;
            break;
        case LayerKind::MaxPool: j["size"] = s.pool; break;
        default: break;
    }
    return j;
}

LayerSpec spec_from_json(const nlohmann::json& j) {
    const auto kind = layer_kind_from_string(j.at("type").get<std::string>());
    switch (kind) {
        case LayerKind::Dense: return LayerSpec::dense(j.at("in"), j.at("out"));
        case LayerKind::Relu: return LayerSpec::relu();
        case LayerKind::Dropout: return LayerSpec::dropout(j.at("rate"));
        case LayerKind::Conv2d:
            return LayerSpec::conv2d(j.at("in_channels"), j.at("out_channels"), j.at("kernel"), j.value("stride", 1));
        case LayerKind::MaxPool: return LayerSpec::maxpool(j.at("size"));
        case LayerKind::Flatten: return LayerSpec::flatten();
    }
    throw std::invalid_argument("unreachable layer kind");
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Network& net) {
    nlohmann::json header;
    header["version"] = kCheckpointVersion;
    header["input_shape"] = net.input_shape();
    header["head"] = net.head() == OutputHead::Softmax ? "softmax" : "identity";
    header["layers"] = nlohmann::json::array();
    for (const auto& s : net.layers()) header["layers"].push_back(spec_to_json(s));
    const std::string text = header.dump();

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path.string());
    os.write(kMagic, sizeof kMagic);
    put_u64(os, kCheckpointVersion);
    put_u64(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    put_u64(os, net.parameters().size());
    for (const auto& p : net.parameters()) {
        put_u64(os, p.size());
        for (double v : p.values) put_u64(os, std::bit_cast<std::uint64_t>(v));
    }
    if (!os) throw std::runtime_error("failed writing checkpoint: " + path.string());
}

Network load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint: " + path.string());
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0)
        throw std::runtime_error("not a network checkpoint: " + path.string());
    const auto version = get_u64(is);
    if (version != kCheckpointVersion)
        throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
    const auto len = get_u64(is);
    std::string text(len, '\0');
    if (!is.read(text.data(), static_cast<std::streamsize>(len))) throw std::runtime_error("checkpoint truncated");
    const auto header = nlohmann::json::parse(text);
    std::vector<LayerSpec> specs;
    for (const auto& j : header.at("layers")) specs.push_back(spec_from_json(j));
    const auto head = header.at("head").get<std::string>() == "softmax" ? OutputHead::Softmax : OutputHead::Identity;
    Network net(header.at("input_shape").get<Shape>(), std::move(specs), head, 0);
    const auto count = get_u64(is);
    if (count != net.parameters().size()) throw std::runtime_error("checkpoint parameter count mismatch");
    for (auto& p : net.parameters()) {
        if (get_u64(is) != p.size()) throw std::runtime_error("checkpoint parameter size mismatch");
        for (auto& v : p.values) v = std::bit_cast<double>(get_u64(is));
    }
    return net;
}

}  // namespace cfu
