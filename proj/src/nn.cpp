#include "protean/nn.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace protean::nn {
namespace {

using ConstMap = Eigen::Map<const Matrix>;
using MutMap = Eigen::Map<Matrix>;
using ConstRowMap = Eigen::Map<const Eigen::RowVectorXd>;
using MutRowMap = Eigen::Map<Eigen::RowVectorXd>;

constexpr int kConvKernel = 3;
constexpr int kPoolWindow = 2;

LayerSpec make_layer(LayerKind kind, int in_channels, int in_length) {
  LayerSpec s;
  s.kind = kind;
  s.in_channels = in_channels;
  s.in_length = in_length;
  return s;
}

// Appends a layer and returns the (channels, length) leaving it.
void push(std::vector<LayerSpec>& layout, LayerSpec spec, std::size_t& offset, int& channels,
          int& length) {
  if (spec.kind == LayerKind::Conv1d) {
    spec.weight_count = static_cast<std::size_t>(spec.out_channels) * spec.kernel * spec.in_channels;
    spec.bias_count = static_cast<std::size_t>(spec.out_channels);
  } else if (spec.kind == LayerKind::Dense) {
    spec.weight_count = static_cast<std::size_t>(spec.out_channels) * spec.in_channels;
    spec.bias_count = static_cast<std::size_t>(spec.out_channels);
  }
  spec.offset = offset;
  offset += spec.param_count();
  channels = spec.out_width();
  length = spec.out_length();
  layout.push_back(spec);
}

std::vector<LayerSpec> cnn_layout(int input_dim, int num_classes, const Architecture& a,
                                  std::size_t& head_layer) {
  std::vector<LayerSpec> layout;
  std::size_t offset = 0;
  int ch = 1;
  int len = input_dim;
  auto conv = [&](int filters) {
    LayerSpec s = make_layer(LayerKind::Conv1d, ch, len);
    s.out_channels = filters;
    s.kernel = kConvKernel;
    push(layout, s, offset, ch, len);
  };
  auto simple = [&](LayerKind kind, int kernel = 0, double rate = 0.0) {
    LayerSpec s = make_layer(kind, ch, len);
    s.kernel = kernel;
    s.rate = rate;
    push(layout, s, offset, ch, len);
  };
  auto dense = [&](int units) {
    LayerSpec s = make_layer(LayerKind::Dense, ch, len);
    s.out_channels = units;
    push(layout, s, offset, ch, len);
  };
  conv(a.conv1_filters);
  simple(LayerKind::Relu);
  simple(LayerKind::MaxPool, kPoolWindow);
  simple(LayerKind::Dropout, 0, a.dropout1);
  conv(a.conv2_filters);
  simple(LayerKind::Relu);
  simple(LayerKind::MaxPool, kPoolWindow);
  simple(LayerKind::Dropout, 0, a.dropout2);
  simple(LayerKind::Flatten);
  dense(a.embedding_dim);
  simple(LayerKind::Relu);
  head_layer = layout.size();
  dense(num_classes);
  simple(LayerKind::LogSoftmax);
  return layout;
}

std::vector<LayerSpec> mlp_layout(int input_dim, int num_classes, const Architecture& a,
                                  std::size_t& head_layer) {
  std::vector<LayerSpec> layout;
  std::size_t offset = 0;
  int ch = 1;
  int len = input_dim;
  auto simple = [&](LayerKind kind) { push(layout, make_layer(kind, ch, len), offset, ch, len); };
  auto dense = [&](int units) {
    LayerSpec s = make_layer(LayerKind::Dense, ch, len);
    s.out_channels = units;
    push(layout, s, offset, ch, len);
  };
  simple(LayerKind::Flatten);
  dense(a.mlp_hidden);
  simple(LayerKind::Relu);
  dense(a.embedding_dim);
  simple(LayerKind::Relu);
  head_layer = layout.size();
  dense(num_classes);
  simple(LayerKind::LogSoftmax);
  return layout;
}

// im2col for a same-padded 1-D convolution: row (b, t) holds the kernel
// window [t-1, t+1] across all input channels, zero outside the signal.
Matrix im2col(const Matrix& in, const LayerSpec& s, Eigen::Index batch) {
  const int L = s.in_length;
  const int C = s.in_channels;
  const int pad = s.kernel / 2;
  Matrix cols = Matrix::Zero(batch * L, static_cast<Eigen::Index>(s.kernel) * C);
  for (Eigen::Index b = 0; b < batch; ++b) {
    for (int t = 0; t < L; ++t) {
      const Eigen::Index row = b * L + t;
      for (int k = 0; k < s.kernel; ++k) {
        const int src = t + k - pad;
        if (src < 0 || src >= L) continue;
        cols.block(row, static_cast<Eigen::Index>(k) * C, 1, C) = in.row(b * L + src);
      }
    }
  }
  return cols;
}

void col2im_add(const Matrix& dcols, const LayerSpec& s, Eigen::Index batch, Matrix& din) {
  const int L = s.in_length;
  const int C = s.in_channels;
  const int pad = s.kernel / 2;
  for (Eigen::Index b = 0; b < batch; ++b) {
    for (int t = 0; t < L; ++t) {
      const Eigen::Index row = b * L + t;
      for (int k = 0; k < s.kernel; ++k) {
        const int src = t + k - pad;
        if (src < 0 || src >= L) continue;
        din.row(b * L + src) += dcols.block(row, static_cast<Eigen::Index>(k) * C, 1, C);
      }
    }
  }
}

ConstMap weights(const ModelParams& m, const LayerSpec& s) {
  return ConstMap(m.values.data() + s.offset, s.out_channels,
                  static_cast<Eigen::Index>(s.weight_count / static_cast<std::size_t>(s.out_channels)));
}

ConstRowMap bias(const ModelParams& m, const LayerSpec& s) {
  return ConstRowMap(m.values.data() + s.offset + s.weight_count, s.out_channels);
}

ForwardResult forward_impl(const ModelParams& model, const Matrix& batch, bool train_mode, Rng* rng,
                           std::size_t stop_layer) {
  if (batch.cols() != model.input_dim)
    throw std::invalid_argument("forward: batch width " + std::to_string(batch.cols()) +
                                " != input_dim " + std::to_string(model.input_dim));
  if (train_mode && rng == nullptr) throw std::invalid_argument("forward: train mode needs an rng");
  const Eigen::Index B = batch.rows();
  ForwardResult out;
  out.train_mode = train_mode;
  out.activations.reserve(stop_layer + 1);
  out.pool_argmax.resize(model.layout.size());
  out.dropout_masks.resize(model.layout.size());
  out.activations.push_back(ConstMap(batch.data(), B * model.input_dim, 1));

  for (std::size_t l = 0; l < stop_layer; ++l) {
    const LayerSpec& s = model.layout[l];
    const Matrix& in = out.activations.back();
    Matrix next;
    switch (s.kind) {
      case LayerKind::Conv1d: {
        const Matrix cols = im2col(in, s, B);
        next.noalias() = cols * weights(model, s).transpose();
        next.rowwise() += bias(model, s);
        break;
      }
      case LayerKind::Dense:
        next.noalias() = in * weights(model, s).transpose();
        next.rowwise() += bias(model, s);
        break;
      case LayerKind::Relu:
        next = in.cwiseMax(0.0);
        break;
      case LayerKind::MaxPool: {
        const int L = s.in_length;
        const int Lout = s.out_length();
        const Eigen::Index C = in.cols();
        next.resize(B * Lout, C);
        auto& arg = out.pool_argmax[l];
        arg.resize(static_cast<std::size_t>(B * Lout * C));
        for (Eigen::Index b = 0; b < B; ++b) {
          for (int t = 0; t < Lout; ++t) {
            const Eigen::Index orow = b * Lout + t;
            for (Eigen::Index c = 0; c < C; ++c) {
              Eigen::Index best = b * L + static_cast<Eigen::Index>(t) * s.kernel;
              for (int k = 1; k < s.kernel; ++k) {
                const Eigen::Index r = b * L + static_cast<Eigen::Index>(t) * s.kernel + k;
                if (in(r, c) > in(best, c)) best = r;
              }
              next(orow, c) = in(best, c);
              arg[static_cast<std::size_t>(orow * C + c)] = best;
            }
          }
        }
        break;
      }
      case LayerKind::Dropout: {
        if (!train_mode || s.rate == 0.0) {
          next = in;
          break;
        }
        std::uniform_real_distribution<double> unif(0.0, 1.0);
        const double keep_scale = 1.0 / (1.0 - s.rate);
        Matrix mask(in.rows(), in.cols());
        for (Eigen::Index i = 0; i < mask.size(); ++i)
          mask.data()[i] = unif(*rng) < s.rate ? 0.0 : keep_scale;
        next = in.cwiseProduct(mask);
        out.dropout_masks[l] = std::move(mask);
        break;
      }
      case LayerKind::Flatten:
        next = ConstMap(in.data(), B, in.size() / std::max<Eigen::Index>(B, 1));
        break;
      case LayerKind::LogSoftmax: {
        next.resize(in.rows(), in.cols());
        for (Eigen::Index r = 0; r < in.rows(); ++r) {
          const double mx = in.row(r).maxCoeff();
          const double lse = mx + std::log((in.row(r).array() - mx).exp().sum());
          next.row(r) = in.row(r).array() - lse;
        }
        break;
      }
    }
    out.activations.push_back(std::move(next));
  }
  if (stop_layer >= model.head_layer) out.embeddings = out.activations[model.head_layer];
  if (stop_layer == model.layout.size()) out.log_probs = out.activations.back();
  return out;
}

// Propagates `grad` (w.r.t. the output of layer end-1) down to the input of
// layer `begin`, accumulating parameter gradients when `param_grad` is set.
Matrix backprop(const ModelParams& model, const ForwardResult& fwd, std::size_t begin,
                std::size_t end, Matrix grad, double* param_grad) {
  const Eigen::Index B = fwd.activations.front().rows() / model.input_dim;
  for (std::size_t l = end; l-- > begin;) {
    const LayerSpec& s = model.layout[l];
    const Matrix& in = fwd.activations[l];
    const Matrix& out = fwd.activations[l + 1];
    Matrix din;
    switch (s.kind) {
      case LayerKind::Conv1d: {
        const Matrix cols = im2col(in, s, B);
        if (param_grad != nullptr) {
          MutMap dw(param_grad + s.offset, s.out_channels, cols.cols());
          dw.noalias() += grad.transpose() * cols;
          MutRowMap(param_grad + s.offset + s.weight_count, s.out_channels) += grad.colwise().sum();
        }
        Matrix dcols;
        dcols.noalias() = grad * weights(model, s);
        din = Matrix::Zero(in.rows(), in.cols());
        col2im_add(dcols, s, B, din);
        break;
      }
      case LayerKind::Dense: {
        if (param_grad != nullptr) {
          MutMap dw(param_grad + s.offset, s.out_channels, s.in_channels);
          dw.noalias() += grad.transpose() * in;
          MutRowMap(param_grad + s.offset + s.weight_count, s.out_channels) += grad.colwise().sum();
        }
        din.noalias() = grad * weights(model, s);
        break;
      }
      case LayerKind::Relu:
        din = (in.array() > 0.0).select(grad, 0.0);
        break;
      case LayerKind::MaxPool: {
        din = Matrix::Zero(in.rows(), in.cols());
        const auto& arg = fwd.pool_argmax[l];
        const Eigen::Index C = in.cols();
        for (Eigen::Index r = 0; r < grad.rows(); ++r)
          for (Eigen::Index c = 0; c < C; ++c)
            din(arg[static_cast<std::size_t>(r * C + c)], c) += grad(r, c);
        break;
      }
      case LayerKind::Dropout:
        if (fwd.dropout_masks[l].size() == 0)
          din = std::move(grad);
        else
          din = grad.cwiseProduct(fwd.dropout_masks[l]);
        break;
      case LayerKind::Flatten:
        din = ConstMap(grad.data(), in.rows(), in.cols());
        break;
      case LayerKind::LogSoftmax: {
        const Matrix probs = out.array().exp().matrix();
        const Eigen::VectorXd gsum = grad.rowwise().sum();
        din = grad - probs.cwiseProduct(gsum.replicate(1, probs.cols()));
        break;
      }
    }
    grad = std::move(din);
  }
  return grad;
}

void check_labels(const ModelParams& model, std::span<const int> labels, Eigen::Index batch) {
  if (static_cast<Eigen::Index>(labels.size()) != batch)
    throw std::invalid_argument("backward: labels/batch length mismatch");
  for (int y : labels)
    if (y < 0 || y >= model.num_classes)
      throw std::out_of_range("backward: label " + std::to_string(y) + " outside [0, " +
                              std::to_string(model.num_classes) + ")");
}

double proximal_sq_distance(const ModelParams& model, const ModelParams& reference) {
  if (!model.same_layout(reference)) throw std::invalid_argument("proximal term: layout mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < model.values.size(); ++i) {
    const double d = model.values[i] - reference.values[i];
    acc += d * d;
  }
  return acc;
}

bool uses_alignment(const LossSpec& spec) {
  return spec.align_weight != 0.0 && spec.global_prototypes != nullptr &&
         spec.global_prototypes->present_count() > 0;
}

}  // namespace

const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::Conv1d: return "conv1d";
    case LayerKind::Relu: return "relu";
    case LayerKind::MaxPool: return "maxpool";
    case LayerKind::Dropout: return "dropout";
    case LayerKind::Flatten: return "flatten";
    case LayerKind::Dense: return "dense";
    case LayerKind::LogSoftmax: return "log_softmax";
  }
  return "?";
}

int LayerSpec::out_length() const {
  switch (kind) {
    case LayerKind::MaxPool: return in_length / kernel;
    case LayerKind::Flatten:
    case LayerKind::Dense: return 1;
    default: return in_length;
  }
}

int LayerSpec::out_width() const {
  switch (kind) {
    case LayerKind::Conv1d:
    case LayerKind::Dense: return out_channels;
    case LayerKind::Flatten: return in_length * in_channels;
    default: return in_channels;
  }
}

bool ModelParams::same_layout(const ModelParams& other) const {
  return layout == other.layout && head_layer == other.head_layer &&
         values.size() == other.values.size() && embedding_size == other.embedding_size;
}

ModelParams build_model(int input_dim, int num_classes, std::uint64_t seed, const Architecture& arch) {
  if (input_dim < 4) throw std::invalid_argument("build_model: input_dim must be >= 4");
  if (num_classes < 2) throw std::invalid_argument("build_model: num_classes must be >= 2");
  if (arch.embedding_dim < 1 || arch.conv1_filters < 1 || arch.conv2_filters < 1 || arch.mlp_hidden < 1)
    throw std::invalid_argument("build_model: layer widths must be positive");
  if (arch.dropout1 < 0.0 || arch.dropout1 >= 1.0 || arch.dropout2 < 0.0 || arch.dropout2 >= 1.0)
    throw std::invalid_argument("build_model: dropout rates must lie in [0, 1)");

  ModelParams m;
  m.input_dim = input_dim;
  m.num_classes = num_classes;
  m.embedding_dim = arch.embedding_dim;
  m.layout = arch.kind == ModelKind::Cnn ? cnn_layout(input_dim, num_classes, arch, m.head_layer)
                                         : mlp_layout(input_dim, num_classes, arch, m.head_layer);
  const LayerSpec& last = m.layout.back();
  m.values.assign(last.offset + last.param_count(), 0.0);
  m.embedding_size = m.layout[m.head_layer].offset;

  // Fan-in scaled uniform: He bound for weights, 1/sqrt(fan_in) for biases.
  Rng rng = make_rng(seed, "init");
  for (const auto& s : m.layout) {
    if (s.weight_count == 0) continue;
    const double fan_in = static_cast<double>(s.weight_count) / s.out_channels;
    const double wb = std::sqrt(6.0 / fan_in);
    const double bb = 1.0 / std::sqrt(fan_in);
    std::uniform_real_distribution<double> wdist(-wb, wb);
    std::uniform_real_distribution<double> bdist(-bb, bb);
    for (std::size_t i = 0; i < s.weight_count; ++i) m.values[s.offset + i] = wdist(rng);
    for (std::size_t i = 0; i < s.bias_count; ++i) m.values[s.offset + s.weight_count + i] = bdist(rng);
  }
  return m;
}

ForwardResult forward(const ModelParams& model, const Matrix& batch, bool train_mode, Rng* rng) {
  return forward_impl(model, batch, train_mode, rng, model.layout.size());
}

Matrix embed(const ModelParams& model, const Matrix& batch) {
  return std::move(forward_impl(model, batch, false, nullptr, model.head_layer).embeddings);
}

LossBreakdown evaluate_loss(const ModelParams& model, const ForwardResult& fwd,
                            std::span<const int> labels, const LossSpec& spec) {
  const Eigen::Index B = fwd.batch_size();
  check_labels(model, labels, B);
  LossBreakdown loss;
  if (B > 0) {
    double ce = 0.0;
    for (Eigen::Index b = 0; b < B; ++b) ce -= fwd.log_probs(b, labels[static_cast<std::size_t>(b)]);
    loss.cross_entropy = ce / static_cast<double>(B);
  }
  if (uses_alignment(spec)) {
    const PrototypeSet batch_protos = compute_local_prototypes(fwd.embeddings, labels, model.num_classes);
    loss.alignment = spec.align_weight * alignment_loss(batch_protos, *spec.global_prototypes).value;
  }
  if (spec.prox_weight != 0.0 && spec.reference != nullptr)
    loss.proximal = 0.5 * spec.prox_weight * proximal_sq_distance(model, *spec.reference);
  loss.total = spec.ce_weight * loss.cross_entropy + loss.alignment + loss.proximal;
  return loss;
}

GradientResult backward(const ModelParams& model, const ForwardResult& fwd, std::span<const int> labels,
                        const LossSpec& spec) {
  const Eigen::Index B = fwd.batch_size();
  if (fwd.activations.size() != model.layout.size() + 1)
    throw std::invalid_argument("backward: forward result lacks the full activation cache");
  GradientResult out;
  out.loss = evaluate_loss(model, fwd, labels, spec);
  out.gradient.assign(model.values.size(), 0.0);
  if (B == 0) return out;

  const bool ce = spec.ce_weight != 0.0;
  const bool align = uses_alignment(spec);
  if (ce || align) {
    Matrix demb = Matrix::Zero(B, model.embedding_dim);
    if (ce) {
      Matrix dlogp = Matrix::Zero(B, model.num_classes);
      const double w = -spec.ce_weight / static_cast<double>(B);
      for (Eigen::Index b = 0; b < B; ++b) dlogp(b, labels[static_cast<std::size_t>(b)]) = w;
      demb = backprop(model, fwd, model.head_layer, model.layout.size(), std::move(dlogp),
                      out.gradient.data());
    }
    if (align) {
      const PrototypeSet batch_protos =
          compute_local_prototypes(fwd.embeddings, labels, model.num_classes);
      const AlignmentLoss al = alignment_loss(batch_protos, *spec.global_prototypes);
      for (Eigen::Index b = 0; b < B; ++b) {
        const int y = labels[static_cast<std::size_t>(b)];
        const auto n = static_cast<double>(batch_protos.support[static_cast<std::size_t>(y)]);
        const double scale = spec.align_weight / n;
        const double* g = al.gradient.data() + static_cast<std::size_t>(y) * model.embedding_dim;
        for (int k = 0; k < model.embedding_dim; ++k) demb(b, k) += scale * g[k];
      }
    }
    backprop(model, fwd, 0, model.head_layer, std::move(demb), out.gradient.data());
  }
  if (spec.prox_weight != 0.0 && spec.reference != nullptr) {
    const auto& ref = spec.reference->values;
    for (std::size_t i = 0; i < out.gradient.size(); ++i)
      out.gradient[i] += spec.prox_weight * (model.values[i] - ref[i]);
  }
  return out;
}

std::vector<double> input_gradient(const ModelParams& model, std::span<const double> x,
                                   std::span<const double> target, double scale, double* objective) {
  if (static_cast<int>(x.size()) != model.input_dim)
    throw std::invalid_argument("input_gradient: x width != input_dim");
  if (static_cast<int>(target.size()) != model.embedding_dim)
    throw std::invalid_argument("input_gradient: target width != embedding_dim");
  Matrix batch = ConstMap(x.data(), 1, model.input_dim);
  const ForwardResult fwd = forward_impl(model, batch, false, nullptr, model.head_layer);
  Matrix diff = fwd.embeddings - ConstMap(target.data(), 1, model.embedding_dim);
  if (objective != nullptr) *objective = scale * diff.squaredNorm();
  const Matrix dx = backprop(model, fwd, 0, model.head_layer, 2.0 * scale * diff, nullptr);
  return {dx.data(), dx.data() + dx.size()};
}

void sgd_step_inplace(ModelParams& model, std::span<const double> gradient, double lr) {
  if (gradient.size() != model.values.size())
    throw std::invalid_argument("sgd_step: gradient length != parameter count");
  if (!(lr >= 0.0)) throw std::invalid_argument("sgd_step: learning rate must be nonnegative");
  for (std::size_t i = 0; i < gradient.size(); ++i) model.values[i] -= lr * gradient[i];
}

ModelParams sgd_step(const ModelParams& model, std::span<const double> gradient, double lr) {
  ModelParams out = model;
  sgd_step_inplace(out, gradient, lr);
  return out;
}

std::vector<int> predict_head(const ModelParams& model, const Matrix& batch) {
  const ForwardResult fwd = forward(model, batch, false);
  std::vector<int> out(static_cast<std::size_t>(fwd.batch_size()));
  for (Eigen::Index b = 0; b < fwd.batch_size(); ++b) {
    Eigen::Index arg = 0;
    fwd.log_probs.row(b).maxCoeff(&arg);
    out[static_cast<std::size_t>(b)] = static_cast<int>(arg);
  }
  return out;
}

}  // namespace protean::nn
