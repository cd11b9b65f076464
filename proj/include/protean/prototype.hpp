#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "protean/matrix.hpp"
#include "protean/rng.hpp"

namespace protean {

/// One d-dimensional vector per class. A class is present exactly when its
/// support (number of samples backing the vector) is nonzero; vectors of
/// absent classes are zero-filled and must not be read.
struct PrototypeSet {
  int num_classes = 0;
  int dim = 0;
  std::vector<double> vectors;       // num_classes x dim, row-major
  std::vector<std::size_t> support;  // per class

  PrototypeSet() = default;
  PrototypeSet(int num_classes, int dim);

  bool present(int cls) const { return support[static_cast<std::size_t>(cls)] > 0; }
  int present_count() const;
  std::span<const double> vector(int cls) const;
  std::span<double> vector(int cls);

  friend bool operator==(const PrototypeSet&, const PrototypeSet&) = default;
};

/// Running (sum, count) per class so prototypes can be built across batches.
class PrototypeAccumulator {
 public:
  PrototypeAccumulator(int num_classes, int dim);

  void add(const Matrix& embeddings, std::span<const int> labels);
  void merge(const PrototypeAccumulator& other);
  PrototypeSet finish() const;

 private:
  int num_classes_;
  int dim_;
  std::vector<double> sums_;
  std::vector<std::size_t> counts_;
};

PrototypeSet compute_local_prototypes(const Matrix& embeddings, std::span<const int> labels,
                                      int num_classes);

enum class PrototypeDivisor {
  Contributors,  // mean over participants that observed the class
  Participants,  // literal 1/M with zero vectors for absent classes
};

PrototypeSet aggregate_global_prototypes(std::span<const PrototypeSet> locals,
                                         PrototypeDivisor divisor = PrototypeDivisor::Contributors);

struct AlignmentLoss {
  double value = 0.0;
  std::vector<double> gradient;  // d value / d local.vectors, same layout
};

/// Sum of squared distances over classes present in both sets.
AlignmentLoss alignment_loss(const PrototypeSet& local, const PrototypeSet& global_prev);

/// Gaussian mechanism on every present vector; sigma == 0 returns a copy.
PrototypeSet add_dp_noise(const PrototypeSet& protos, double sigma, Rng& rng);

/// Index of the closest present prototype; ties go to the smallest class id.
int nearest_prototype_classify(std::span<const double> embedding, const PrototypeSet& global);
std::vector<int> nearest_prototype_classify(const Matrix& embeddings, const PrototypeSet& global);

}  // namespace protean
