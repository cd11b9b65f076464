#include "protean/prototype.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace protean {

PrototypeSet::PrototypeSet(int num_classes, int dim)
    : num_classes(num_classes),
      dim(dim),
      vectors(static_cast<std::size_t>(num_classes) * static_cast<std::size_t>(dim), 0.0),
      support(static_cast<std::size_t>(num_classes), 0) {
  if (num_classes < 1 || dim < 1) throw std::invalid_argument("PrototypeSet: empty shape");
}

int PrototypeSet::present_count() const {
  int n = 0;
  for (auto s : support) n += s > 0 ? 1 : 0;
  return n;
}

std::span<const double> PrototypeSet::vector(int cls) const {
  return {vectors.data() + static_cast<std::size_t>(cls) * dim, static_cast<std::size_t>(dim)};
}

std::span<double> PrototypeSet::vector(int cls) {
  return {vectors.data() + static_cast<std::size_t>(cls) * dim, static_cast<std::size_t>(dim)};
}

PrototypeAccumulator::PrototypeAccumulator(int num_classes, int dim)
    : num_classes_(num_classes),
      dim_(dim),
      sums_(static_cast<std::size_t>(num_classes) * dim, 0.0),
      counts_(static_cast<std::size_t>(num_classes), 0) {}

void PrototypeAccumulator::add(const Matrix& embeddings, std::span<const int> labels) {
  if (static_cast<std::size_t>(embeddings.rows()) != labels.size())
    throw std::invalid_argument("prototype accumulator: embeddings/labels length mismatch");
  if (embeddings.rows() > 0 && embeddings.cols() != dim_)
    throw std::invalid_argument("prototype accumulator: embedding width mismatch");
  for (std::size_t n = 0; n < labels.size(); ++n) {
    const int cls = labels[n];
    if (cls < 0 || cls >= num_classes_) throw std::out_of_range("prototype accumulator: label");
    double* sum = sums_.data() + static_cast<std::size_t>(cls) * dim_;
    for (int k = 0; k < dim_; ++k) sum[k] += embeddings(static_cast<Eigen::Index>(n), k);
    ++counts_[static_cast<std::size_t>(cls)];
  }
}

void PrototypeAccumulator::merge(const PrototypeAccumulator& other) {
  if (other.num_classes_ != num_classes_ || other.dim_ != dim_)
    throw std::invalid_argument("prototype accumulator: shape mismatch on merge");
  for (std::size_t i = 0; i < sums_.size(); ++i) sums_[i] += other.sums_[i];
  for (std::size_t j = 0; j < counts_.size(); ++j) counts_[j] += other.counts_[j];
}

PrototypeSet PrototypeAccumulator::finish() const {
  PrototypeSet out(num_classes_, dim_);
  for (int j = 0; j < num_classes_; ++j) {
    const auto count = counts_[static_cast<std::size_t>(j)];
    if (count == 0) continue;
    out.support[static_cast<std::size_t>(j)] = count;
    auto dst = out.vector(j);
    const double* sum = sums_.data() + static_cast<std::size_t>(j) * dim_;
    for (int k = 0; k < dim_; ++k) dst[static_cast<std::size_t>(k)] = sum[k] / static_cast<double>(count);
  }
  return out;
}

PrototypeSet compute_local_prototypes(const Matrix& embeddings, std::span<const int> labels,
                                      int num_classes) {
  PrototypeAccumulator acc(num_classes, static_cast<int>(embeddings.cols()));
  acc.add(embeddings, labels);
  return acc.finish();
}

PrototypeSet aggregate_global_prototypes(std::span<const PrototypeSet> locals,
                                         PrototypeDivisor divisor) {
  if (locals.empty()) throw std::invalid_argument("aggregate_global_prototypes: no submissions");
  const int K = locals.front().num_classes;
  const int d = locals.front().dim;
  for (const auto& p : locals)
    if (p.num_classes != K || p.dim != d)
      throw std::invalid_argument("aggregate_global_prototypes: prototype shape mismatch");

  PrototypeSet out(K, d);
  std::vector<int> contributors(static_cast<std::size_t>(K), 0);
  for (const auto& p : locals) {
    for (int j = 0; j < K; ++j) {
      if (!p.present(j)) continue;
      ++contributors[static_cast<std::size_t>(j)];
      out.support[static_cast<std::size_t>(j)] += p.support[static_cast<std::size_t>(j)];
      auto dst = out.vector(j);
      auto src = p.vector(j);
      for (int k = 0; k < d; ++k) dst[static_cast<std::size_t>(k)] += src[static_cast<std::size_t>(k)];
    }
  }
  for (int j = 0; j < K; ++j) {
    const int c = contributors[static_cast<std::size_t>(j)];
    if (c == 0) continue;
    const double denom = divisor == PrototypeDivisor::Contributors
                             ? static_cast<double>(c)
                             : static_cast<double>(locals.size());
    for (auto& v : out.vector(j)) v /= denom;
  }
  return out;
}

AlignmentLoss alignment_loss(const PrototypeSet& local, const PrototypeSet& global_prev) {
  if (local.dim != global_prev.dim || local.num_classes != global_prev.num_classes)
    throw std::invalid_argument("alignment_loss: prototype shape mismatch");
  AlignmentLoss out;
  out.gradient.assign(local.vectors.size(), 0.0);
  for (int j = 0; j < local.num_classes; ++j) {
    if (!local.present(j) || !global_prev.present(j)) continue;
    auto a = local.vector(j);
    auto b = global_prev.vector(j);
    double* g = out.gradient.data() + static_cast<std::size_t>(j) * local.dim;
    for (std::size_t k = 0; k < a.size(); ++k) {
      const double diff = a[k] - b[k];
      out.value += diff * diff;
      g[k] = 2.0 * diff;
    }
  }
  return out;
}

PrototypeSet add_dp_noise(const PrototypeSet& protos, double sigma, Rng& rng) {
  if (!(sigma >= 0.0)) throw std::invalid_argument("add_dp_noise: sigma must be >= 0");
  PrototypeSet out = protos;
  if (sigma == 0.0) return out;
  std::normal_distribution<double> noise(0.0, sigma);
  for (int j = 0; j < out.num_classes; ++j) {
    if (!out.present(j)) continue;
    for (auto& v : out.vector(j)) v += noise(rng);
  }
  return out;
}

int nearest_prototype_classify(std::span<const double> embedding, const PrototypeSet& global) {
  if (static_cast<int>(embedding.size()) != global.dim)
    throw std::invalid_argument("nearest_prototype_classify: embedding width mismatch");
  int best = -1;
  double best_dist = std::numeric_limits<double>::infinity();
  for (int j = 0; j < global.num_classes; ++j) {
    if (!global.present(j)) continue;
    auto c = global.vector(j);
    double dist = 0.0;
    for (std::size_t k = 0; k < c.size(); ++k) {
      const double diff = embedding[k] - c[k];
      dist += diff * diff;
    }
    if (best < 0 || dist < best_dist) {
      best = j;
      best_dist = dist;
    }
  }
  if (best < 0) throw std::invalid_argument("nearest_prototype_classify: no present prototype");
  return best;
}

std::vector<int> nearest_prototype_classify(const Matrix& embeddings, const PrototypeSet& global) {
  std::vector<int> out(static_cast<std::size_t>(embeddings.rows()));
  for (Eigen::Index n = 0; n < embeddings.rows(); ++n)
    out[static_cast<std::size_t>(n)] = nearest_prototype_classify(
        std::span<const double>(embeddings.row(n).data(), static_cast<std::size_t>(embeddings.cols())),
        global);
  return out;
}

}  // namespace protean
