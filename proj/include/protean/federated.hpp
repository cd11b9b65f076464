#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "protean/data.hpp"
#include "protean/nn.hpp"
#include "protean/prototype.hpp"
#include "protean/rng.hpp"

namespace protean {

enum class StrategyKind {
  FedAvg,            // Cerberus: average every parameter
  FedProx,           // FedAvg + proximal term
  FedProto,          // prototypes only, models stay local
  Protean,           // parameters + prototypes, alignment + proximal terms
  ProteanEmbedding,  // as Protean, aggregating only the embedding section
  LocalOnly,         // no communication at all (zero-shot reference arm)
};

enum class AggregationScope { All, EmbeddingOnly, None };
enum class InferenceMode { Auto, Prototype, Head };

std::string to_string(StrategyKind kind);
StrategyKind parse_strategy(std::string_view name);
std::string to_string(InferenceMode mode);
InferenceMode parse_inference(std::string_view name);

// Alignment weight. Larger values pull every round toward prototypes computed
// by the previous round's local models, which the averaged model does not
// reproduce; on the synthetic benchmark anything above ~1e-3 contracts the
// embedding and costs accuracy.
inline constexpr double kDefaultLambda = 3e-4;

struct Strategy {
  StrategyKind kind = StrategyKind::Protean;
  double lambda = 0.0;  // prototype alignment weight
  double mu = 0.0;      // proximal weight
  bool exchange_prototypes = false;
  AggregationScope scope = AggregationScope::All;

  /// Canonical configuration of a strategy; lambda/mu are ignored where the
  /// strategy has no such term.
  static Strategy make(StrategyKind kind, double lambda = kDefaultLambda, double mu = 0.1);

  /// Prototype-bearing strategies classify by nearest prototype, the rest
  /// through the classification head.
  InferenceMode resolve(InferenceMode requested) const;

  friend bool operator==(const Strategy&, const Strategy&) = default;
};

/// Where uploaded prototypes come from: embeddings gathered during the last
/// local epoch (train mode, evolving parameters) or one eval-mode pass over
/// the shard with the final parameters.
enum class PrototypeSource { FinalEpoch, EvalPass };

std::string to_string(PrototypeSource source);
PrototypeSource parse_prototype_source(std::string_view name);

struct TrainingConfig {
  int epochs = 3;
  std::size_t batch_size = 32;
  double lr = 0.01;
  double dp_sigma = 0.0;  // Gaussian noise on uploaded prototypes
  PrototypeDivisor divisor = PrototypeDivisor::Contributors;
  int workers = 1;  // participants trained concurrently within a round
  PrototypeSource prototype_source = PrototypeSource::EvalPass;
};

struct LocalResult {
  nn::ModelParams model;
  PrototypeSet prototypes;                // per TrainingConfig::prototype_source
  std::vector<nn::LossBreakdown> trace;   // one entry per minibatch
  nn::LossBreakdown final_epoch;          // mean over the last epoch's batches
  nn::LossBreakdown objective;            // full-shard objective at the returned parameters
};

/// One participant's LocalUpdate: `epochs` passes of minibatch SGD on
///   mean CE + lambda * sum_j |C_j - Cbar_j|^2 + mu/2 |w - w_start|^2
/// starting from (and anchored to) `start`. The batch size is clamped to the
/// shard size.
LocalResult local_update(const Dataset& shard, const nn::ModelParams& start,
                         const PrototypeSet& global_prev, const Strategy& strategy,
                         const TrainingConfig& training, Rng& rng);

/// Full-shard objective, eval mode, with `reference` as the proximal anchor.
/// Also returns the shard prototypes through `prototypes` when non-null.
nn::LossBreakdown shard_objective(const Dataset& shard, const nn::ModelParams& model,
                                  const nn::ModelParams& reference, const PrototypeSet& global_prev,
                                  const Strategy& strategy, PrototypeSet* prototypes = nullptr);

/// Elementwise mean of the submissions over `scope`. For EmbeddingOnly the
/// head is taken from `previous_global` (or the first submission).
nn::ModelParams aggregate_models(std::span<const nn::ModelParams> submissions, AggregationScope scope,
                                 const nn::ModelParams* previous_global = nullptr);

std::size_t aggregated_parameter_count(const Strategy& strategy, const nn::ModelParams& model);

/// Scalars exchanged per round (uploads plus downloads):
/// 2M(m' + dK) with m' the aggregated parameter count and the dK term only
/// when prototypes are exchanged.
std::size_t communication_cost(const Strategy& strategy, int participants, std::size_t aggregated_params,
                               int dim, int num_classes);

/// Serialized payload. `scalars` carries model sections and the full K x d
/// prototype block (absent classes zero-filled); `header` carries sizes and
/// per-class support.
struct WireMessage {
  std::vector<std::uint64_t> header;
  std::vector<double> scalars;

  std::size_t byte_size() const { return 8 * (header.size() + scalars.size()); }
};

WireMessage encode_payload(std::span<const double> params, const PrototypeSet* prototypes);

struct DecodedPayload {
  std::vector<double> params;
  PrototypeSet prototypes;
  bool has_prototypes = false;
};

DecodedPayload decode_payload(const WireMessage& msg, int num_classes, int dim);

struct RoundState {
  int round = 0;
  nn::ModelParams global_model;
  PrototypeSet global_prototypes;
  std::vector<nn::ModelParams> local_models;       // as submitted in the last round
  std::vector<PrototypeSet> local_prototypes;      // as uploaded (after DP noise)
  std::vector<nn::ModelParams> start_models;       // what each participant trains from next
  std::vector<Rng> train_rngs;
  std::vector<Rng> dp_rngs;
};

RoundState init_state(const nn::ModelParams& initial, int participants, std::uint64_t seed);

struct ParticipantRoundReport {
  int participant = 0;
  std::size_t samples = 0;
  nn::LossBreakdown final_epoch;
  nn::LossBreakdown objective;
};

struct RoundReport {
  int round = 0;
  std::vector<ParticipantRoundReport> participants;
  std::size_t scalars_up = 0;
  std::size_t scalars_down = 0;
  std::size_t bytes_up = 0;
  std::size_t bytes_down = 0;
  std::vector<int> absent_global_classes;
  double mean_objective = 0.0;
  std::vector<double> participant_macro_accuracy;  // filled by the experiment runner
  double wall_seconds = 0.0;                       // not part of determinism checks
};

/// Error from a participant's local update, tagged with its id.
class ParticipantError : public std::runtime_error {
 public:
  ParticipantError(int participant, const std::string& what)
      : std::runtime_error("participant " + std::to_string(participant) + ": " + what),
        participant_(participant) {}
  int participant() const { return participant_; }

 private:
  int participant_;
};

/// Broadcast, local updates, aggregation and share-back for one round.
RoundReport run_round(RoundState& state, std::span<const Dataset> shards, const Strategy& strategy,
                      const TrainingConfig& training);

}  // namespace protean
