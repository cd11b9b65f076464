#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "protean/matrix.hpp"
#include "protean/prototype.hpp"
#include "protean/rng.hpp"

// Minimal differentiable network for 1-D tabular inputs. The default layout is
// the detection CNN:
//
//   conv(64) relu pool dropout(.2) conv(128) relu pool dropout(.5)
//   flatten dense(128) relu | dense(K) log-softmax
//
// Everything left of the bar is the embedding function, the rest is the
// classification head. Inputs are read as a single-channel signal of length
// input_dim; convolutions use kernel 3, stride 1 and zero "same" padding,
// pooling is max over non-overlapping windows of 2 (a trailing odd element
// is dropped).
namespace protean::nn {

enum class LayerKind { Conv1d, Relu, MaxPool, Dropout, Flatten, Dense, LogSoftmax };

const char* to_string(LayerKind kind);

struct LayerSpec {
  LayerKind kind = LayerKind::Relu;
  int in_channels = 0;   // conv input channels, dense input width
  int out_channels = 0;  // conv filters, dense units
  int in_length = 1;     // signal length entering the layer
  int kernel = 0;        // conv kernel, pool window
  double rate = 0.0;     // dropout rate
  std::size_t offset = 0;        // first parameter in the flat vector
  std::size_t weight_count = 0;  // weights stored [out][kernel][in]
  std::size_t bias_count = 0;

  std::size_t param_count() const { return weight_count + bias_count; }
  int out_length() const;
  int out_width() const;  // channels leaving the layer

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

enum class ModelKind { Cnn, Mlp };

struct Architecture {
  ModelKind kind = ModelKind::Cnn;
  int conv1_filters = 64;
  int conv2_filters = 128;
  int embedding_dim = 128;
  double dropout1 = 0.2;
  double dropout2 = 0.5;
  int mlp_hidden = 64;  // Mlp only: flatten dense(h) relu dense(d) relu | dense(K)

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

/// Flat parameter vector laid out layer by layer; the embedding section is the
/// prefix [0, embedding_size) and the head section is the remainder.
struct ModelParams {
  std::vector<LayerSpec> layout;
  std::size_t head_layer = 0;  // first layer of the classification head
  std::size_t embedding_size = 0;
  int input_dim = 0;
  int num_classes = 0;
  int embedding_dim = 0;
  std::vector<double> values;

  std::size_t size() const { return values.size(); }
  std::span<double> embedding() { return {values.data(), embedding_size}; }
  std::span<const double> embedding() const { return {values.data(), embedding_size}; }
  std::span<double> head() { return {values.data() + embedding_size, values.size() - embedding_size}; }
  std::span<const double> head() const {
    return {values.data() + embedding_size, values.size() - embedding_size};
  }
  std::size_t head_size() const { return values.size() - embedding_size; }

  bool same_layout(const ModelParams& other) const;

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

ModelParams build_model(int input_dim, int num_classes, std::uint64_t seed,
                        const Architecture& arch = {});

struct ForwardResult {
  Matrix embeddings;  // batch x embedding_dim
  Matrix log_probs;   // batch x num_classes
  // Cached state for backprop: inputs of every layer (activations[l] feeds
  // layer l), the final output, pooling winners and dropout masks.
  std::vector<Matrix> activations;
  std::vector<std::vector<Eigen::Index>> pool_argmax;
  std::vector<Matrix> dropout_masks;
  bool train_mode = false;

  Eigen::Index batch_size() const { return log_probs.rows(); }
};

/// `rng` drives dropout and is required when train_mode is set.
ForwardResult forward(const ModelParams& model, const Matrix& batch, bool train_mode,
                      Rng* rng = nullptr);

/// Embeddings only, eval mode.
Matrix embed(const ModelParams& model, const Matrix& batch);

/// Selects and weights the terms of the local objective
///   ce * mean CE + align * sum_j |C_j - Cbar_j|^2 + prox/2 * |w - w_ref|^2
/// where C_j is the batch prototype of class j and only classes present in
/// both the batch and `global_prototypes` contribute.
struct LossSpec {
  double ce_weight = 1.0;
  double align_weight = 0.0;
  const PrototypeSet* global_prototypes = nullptr;
  double prox_weight = 0.0;
  const ModelParams* reference = nullptr;
};

struct LossBreakdown {
  double cross_entropy = 0.0;  // unweighted mean CE
  double alignment = 0.0;      // align_weight * L_R
  double proximal = 0.0;       // prox_weight / 2 * |w - w_ref|^2
  double total = 0.0;
};

struct GradientResult {
  std::vector<double> gradient;  // aligned with ModelParams::values
  LossBreakdown loss;
};

GradientResult backward(const ModelParams& model, const ForwardResult& fwd,
                        std::span<const int> labels, const LossSpec& spec);

/// Loss value only (same terms as backward).
LossBreakdown evaluate_loss(const ModelParams& model, const ForwardResult& fwd,
                            std::span<const int> labels, const LossSpec& spec);

/// Gradient over x of scale * |phi(x) - target|^2 with dropout disabled.
std::vector<double> input_gradient(const ModelParams& model, std::span<const double> x,
                                   std::span<const double> target, double scale = 1.0,
                                   double* objective = nullptr);

ModelParams sgd_step(const ModelParams& model, std::span<const double> gradient, double lr);
void sgd_step_inplace(ModelParams& model, std::span<const double> gradient, double lr);

std::vector<int> predict_head(const ModelParams& model, const Matrix& batch);

}  // namespace protean::nn
