#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cfu/tensor.hpp"

namespace cfu {

enum class LayerKind { Dense, Relu, Dropout, Conv2d, MaxPool, Flatten };

std::string to_string(LayerKind kind);
LayerKind layer_kind_from_string(const std::string& name);

struct LayerSpec {
    LayerKind kind = LayerKind::Relu;
    // dense
    std::size_t in = 0;
    std::size_t out = 0;
    // dropout
    double rate = 0.0;
    // conv2d, input laid out as (channels, height, width), no padding
    std::size_t in_channels = 0;
    std::size_t out_channels = 0;
    std::size_t kernel = 0;
    std::size_t stride = 1;
    // maxpool, window == stride
    std::size_t pool = 0;

    static LayerSpec dense(std::size_t in, std::size_t out);
    static LayerSpec relu();
    static LayerSpec dropout(double rate);
    static LayerSpec conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
                            std::size_t stride = 1);
    static LayerSpec maxpool(std::size_t size);
    static LayerSpec flatten();

    bool operator==(const LayerSpec&) const = default;
};

enum class OutputHead { Softmax, Identity };

/// Eval: dropout is the identity. Train and McDropout draw a fresh inverted-dropout
/// mask on every forward pass.
enum class Mode { Train, Eval, McDropout };

/// Activations retained by a forward pass for the backward pass.
struct ForwardTrace {
    std::vector<std::vector<double>> inputs;  // input of every layer
    std::vector<std::vector<double>> masks;   // scaled dropout masks, empty when identity
    std::vector<std::vector<std::size_t>> argmax;  // maxpool winners
    std::vector<double> output;               // after the head
};

/// One gradient block per parameter tensor, same layout as Network::parameters().
using ParamGrads = std::vector<std::vector<double>>;

/// Stack of layers followed by a softmax (classifier) or identity head.
///
/// A const Network is safe to share between threads as long as each caller
/// brings its own Rng.
class Network {
public:
    Network() = default;
    Network(Shape input_shape, std::vector<LayerSpec> layers, OutputHead head, std::uint64_t init_seed);

    std::vector<double> forward(std::span<const double> x, Mode mode = Mode::Eval, Rng* rng = nullptr) const;
    std::vector<double> forward(std::span<const double> x, Mode mode, Rng* rng, ForwardTrace& trace) const;

    /// Back-propagates dL/d(output). Adds parameter gradients into `grads` when
    /// non-null and returns dL/dx.
    std::vector<double> backward(const ForwardTrace& trace, std::span<const double> grad_output,
                                 ParamGrads* grads) const;

    /// Same, but starting from dL/d(logits), skipping the softmax Jacobian.
    std::vector<double> backward_logits(const ForwardTrace& trace, std::span<const double> grad_logits,
                                        ParamGrads* grads) const;

    const Shape& input_shape() const { return input_shape_; }
    std::size_t input_size() const { return element_count(input_shape_); }
    std::size_t output_size() const;
    OutputHead head() const { return head_; }
    const std::vector<LayerSpec>& layers() const { return specs_; }
    bool has_active_dropout() const;

    std::vector<Tensor>& parameters() { return params_; }
    const std::vector<Tensor>& parameters() const { return params_; }
    ParamGrads zero_grads() const;

private:
    struct Layer {
        LayerSpec spec;
        Shape in_shape;
        Shape out_shape;
        int weight = -1;
        int bias = -1;
    };

    Shape input_shape_;
    std::vector<LayerSpec> specs_;
    OutputHead head_ = OutputHead::Softmax;
    std::vector<Layer> layers_;
    std::vector<Tensor> params_;

    void layer_forward(std::size_t i, std::span<const double> in, std::vector<double>& out, Mode mode, Rng* rng,
                       ForwardTrace* trace) const;
    std::vector<double> layer_backward(std::size_t i, const ForwardTrace& trace, std::vector<double> g,
                                       ParamGrads* grads) const;
};

std::vector<double> softmax(std::span<const double> logits);

/// Index of the largest entry; ties go to the lowest index.
std::size_t argmax(std::span<const double> v);

/// Mean (or summed) softmax cross-entropy of a labelled batch and its parameter gradient.
enum class Reduction { Mean, Sum };

struct LossAndGrads {
    double loss = 0.0;
    ParamGrads grads;
};

LossAndGrads grad_params(const Network& net, MatrixView batch, std::span<const int> labels,
                         Reduction reduction = Reduction::Mean, Mode mode = Mode::Eval, Rng* rng = nullptr);

double cross_entropy(const Network& net, MatrixView features, std::span<const int> labels);
double accuracy(const Network& net, MatrixView features, std::span<const int> labels);

/// Binary checkpoint: magic, version, JSON layer header, little-endian f64 parameters.
inline constexpr std::uint32_t kCheckpointVersion = 1;
void save_checkpoint(const std::filesystem::path& path, const Network& net);
Network load_checkpoint(const std::filesystem::path& path);

}  // namespace cfu
