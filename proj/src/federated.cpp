#include "protean/federated.hpp"

#include <algorithm>
#include <chrono>
#include <exception>
#include <numeric>
#include <thread>

namespace protean {
namespace {

std::vector<double> mean_of(std::span<const std::vector<double>> vectors) {
  std::vector<double> out(vectors.front().size(), 0.0);
  for (const auto& v : vectors) {
    if (v.size() != out.size()) throw std::invalid_argument("aggregate: section length mismatch");
    for (std::size_t k = 0; k < out.size(); ++k) out[k] += v[k];
  }
  const auto n = static_cast<double>(vectors.size());
  for (auto& x : out) x /= n;
  return out;
}

std::span<const double> scoped_section(const nn::ModelParams& model, AggregationScope scope) {
  switch (scope) {
    case AggregationScope::All: return model.values;
    case AggregationScope::EmbeddingOnly: return model.embedding();
    case AggregationScope::None: return {};
  }
  return {};
}

void write_section(nn::ModelParams& model, AggregationScope scope, std::span<const double> values) {
  if (scope == AggregationScope::None) return;
  const auto dst = scope == AggregationScope::All ? std::span<double>(model.values) : model.embedding();
  if (dst.size() != values.size()) throw std::invalid_argument("payload section length mismatch");
  std::copy(values.begin(), values.end(), dst.begin());
}

nn::LossSpec loss_spec(const Strategy& strategy, const PrototypeSet& global_prev, const nn::ModelParams& reference) {
  nn::LossSpec spec;
  if (strategy.exchange_prototypes && strategy.lambda != 0.0) {
    spec.align_weight = strategy.lambda;
    spec.global_prototypes = &global_prev;
  }
  if (strategy.mu != 0.0) {
    spec.prox_weight = strategy.mu;
    spec.reference = &reference;
  }
  return spec;
}

nn::LossBreakdown mean_of(std::span<const nn::LossBreakdown> items) {
  nn::LossBreakdown out;
  if (items.empty()) return out;
  for (const auto& l : items) {
    out.cross_entropy += l.cross_entropy;
    out.alignment += l.alignment;
    out.proximal += l.proximal;
    out.total += l.total;
  }
  const auto n = static_cast<double>(items.size());
  out.cross_entropy /= n;
  out.alignment /= n;
  out.proximal /= n;
  out.total /= n;
  return out;
}

}  // namespace

std::string to_string(StrategyKind kind) {
  switch (kind) {
    case StrategyKind::FedAvg: return "fedavg";
    case StrategyKind::FedProx: return "fedprox";
    case StrategyKind::FedProto: return "fedproto";
    case StrategyKind::Protean: return "protean";
    case StrategyKind::ProteanEmbedding: return "protean-embedding";
    case StrategyKind::LocalOnly: return "local-only";
  }
  return "?";
}

StrategyKind parse_strategy(std::string_view name) {
  if (name == "fedavg" || name == "cerberus") return StrategyKind::FedAvg;
  if (name == "fedprox") return StrategyKind::FedProx;
  if (name == "fedproto") return StrategyKind::FedProto;
  if (name == "protean") return StrategyKind::Protean;
  if (name == "protean-embedding") return StrategyKind::ProteanEmbedding;
  if (name == "local-only") return StrategyKind::LocalOnly;
  throw std::invalid_argument("unknown strategy '" + std::string(name) + "'");
}

std::string to_string(InferenceMode mode) {
  switch (mode) {
    case InferenceMode::Auto: return "auto";
    case InferenceMode::Prototype: return "prototype";
    case InferenceMode::Head: return "head";
  }
  return "?";
}

std::string to_string(PrototypeSource source) {
  return source == PrototypeSource::FinalEpoch ? "final-epoch" : "eval-pass";
}

PrototypeSource parse_prototype_source(std::string_view name) {
  if (name == "final-epoch") return PrototypeSource::FinalEpoch;
  if (name == "eval-pass") return PrototypeSource::EvalPass;
  throw std::invalid_argument("unknown prototype source '" + std::string(name) + "'");
}

InferenceMode parse_inference(std::string_view name) {
  if (name == "auto") return InferenceMode::Auto;
  if (name == "prototype") return InferenceMode::Prototype;
  if (name == "head") return InferenceMode::Head;
  throw std::invalid_argument("unknown inference mode '" + std::string(name) + "'");
}

Strategy Strategy::make(StrategyKind kind, double lambda, double mu) {
  Strategy s;
  s.kind = kind;
  switch (kind) {
    case StrategyKind::FedAvg:
      break;
    case StrategyKind::FedProx:
      s.mu = mu;
      break;
    case StrategyKind::FedProto:
      s.lambda = lambda;
      s.exchange_prototypes = true;
      s.scope = AggregationScope::None;
      break;
    case StrategyKind::Protean:
      s.lambda = lambda;
      s.mu = mu;
      s.exchange_prototypes = true;
      break;
    case StrategyKind::ProteanEmbedding:
      s.lambda = lambda;
      s.mu = mu;
      s.exchange_prototypes = true;
      s.scope = AggregationScope::EmbeddingOnly;
      break;
    case StrategyKind::LocalOnly:
      s.scope = AggregationScope::None;
      break;
  }
  return s;
}

InferenceMode Strategy::resolve(InferenceMode requested) const {
  if (requested != InferenceMode::Auto) return requested;
  // Local-only participants classify against their own prototypes.
  if (exchange_prototypes || kind == StrategyKind::LocalOnly) return InferenceMode::Prototype;
  return InferenceMode::Head;
}

nn::LossBreakdown shard_objective(const Dataset& shard, const nn::ModelParams& model,
                                  const nn::ModelParams& reference, const PrototypeSet& global_prev,
                                  const Strategy& strategy, PrototypeSet* prototypes) {
  const nn::ForwardResult fwd = nn::forward(model, shard.features, false);
  const nn::LossSpec spec = loss_spec(strategy, global_prev, reference);
  // Prototypes of the whole shard stand in for the per-batch ones.
  nn::LossBreakdown loss;
  double ce = 0.0;
  for (Eigen::Index b = 0; b < fwd.batch_size(); ++b) ce -= fwd.log_probs(b, shard.labels[static_cast<std::size_t>(b)]);
  loss.cross_entropy = ce / static_cast<double>(std::max<Eigen::Index>(fwd.batch_size(), 1));
  PrototypeSet local = compute_local_prototypes(fwd.embeddings, shard.labels, model.num_classes);
  if (spec.global_prototypes != nullptr)
    loss.alignment = spec.align_weight * alignment_loss(local, *spec.global_prototypes).value;
  if (spec.reference != nullptr) {
    double sq = 0.0;
    for (std::size_t k = 0; k < model.values.size(); ++k) {
      const double d = model.values[k] - reference.values[k];
      sq += d * d;
    }
    loss.proximal = 0.5 * spec.prox_weight * sq;
  }
  loss.total = loss.cross_entropy + loss.alignment + loss.proximal;
  if (prototypes != nullptr) *prototypes = std::move(local);
  return loss;
}

LocalResult local_update(const Dataset& shard, const nn::ModelParams& start, const PrototypeSet& global_prev,
                         const Strategy& strategy, const TrainingConfig& training, Rng& rng) {
  if (shard.size() == 0) throw std::invalid_argument("local_update: empty shard");
  if (!(training.lr > 0.0)) throw std::invalid_argument("local_update: learning rate must be positive");
  if (training.epochs < 1) throw std::invalid_argument("local_update: epochs must be >= 1");
  if (training.batch_size < 1) throw std::invalid_argument("local_update: batch size must be >= 1");

  LocalResult out;
  out.model = start;
  const nn::LossSpec spec = loss_spec(strategy, global_prev, start);
  const std::size_t N = shard.size();
  const std::size_t B = std::min(training.batch_size, N);
  std::vector<std::size_t> order(N);
  std::iota(order.begin(), order.end(), 0);
  const std::size_t batches_per_epoch = (N + B - 1) / B;
  out.trace.reserve(batches_per_epoch * static_cast<std::size_t>(training.epochs));

  Matrix xb;
  std::vector<int> yb;
  PrototypeAccumulator last_epoch(start.num_classes, start.embedding_dim);
  for (int epoch = 0; epoch < training.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t begin = 0; begin < N; begin += B) {
      const std::size_t n = std::min(B, N - begin);
      xb.resize(static_cast<Eigen::Index>(n), shard.features.cols());
      yb.resize(n);
      for (std::size_t r = 0; r < n; ++r) {
        xb.row(static_cast<Eigen::Index>(r)) = shard.features.row(static_cast<Eigen::Index>(order[begin + r]));
        yb[r] = shard.labels[order[begin + r]];
      }
      const nn::ForwardResult fwd = nn::forward(out.model, xb, true, &rng);
      const nn::GradientResult g = nn::backward(out.model, fwd, yb, spec);
      if (epoch + 1 == training.epochs) last_epoch.add(fwd.embeddings, yb);
      nn::sgd_step_inplace(out.model, g.gradient, training.lr);
      out.trace.push_back(g.loss);
    }
  }
  out.final_epoch = mean_of(std::span<const nn::LossBreakdown>(out.trace).last(batches_per_epoch));
  out.objective = shard_objective(shard, out.model, start, global_prev, strategy, &out.prototypes);
  if (training.prototype_source == PrototypeSource::FinalEpoch) out.prototypes = last_epoch.finish();
  return out;
}

nn::ModelParams aggregate_models(std::span<const nn::ModelParams> submissions, AggregationScope scope,
                                 const nn::ModelParams* previous_global) {
  if (submissions.empty()) throw std::invalid_argument("aggregate_models: no submissions");
  const nn::ModelParams& first = submissions.front();
  for (const auto& s : submissions)
    if (!s.same_layout(first)) throw std::invalid_argument("aggregate_models: layout mismatch");
  if (previous_global != nullptr && !previous_global->same_layout(first))
    throw std::invalid_argument("aggregate_models: layout mismatch with the previous global model");

  nn::ModelParams out = previous_global != nullptr ? *previous_global : first;
  if (scope == AggregationScope::None) return out;
  std::vector<std::vector<double>> sections;
  sections.reserve(submissions.size());
  for (const auto& s : submissions) {
    const auto sec = scoped_section(s, scope);
    sections.emplace_back(sec.begin(), sec.end());
  }
  write_section(out, scope, mean_of(std::span<const std::vector<double>>(sections)));
  return out;
}

std::size_t aggregated_parameter_count(const Strategy& strategy, const nn::ModelParams& model) {
  return scoped_section(model, strategy.scope).size();
}

std::size_t communication_cost(const Strategy& strategy, int participants, std::size_t aggregated_params,
                               int dim, int num_classes) {
  const std::size_t per_direction =
      (strategy.scope == AggregationScope::None ? 0 : aggregated_params) +
      (strategy.exchange_prototypes ? static_cast<std::size_t>(dim) * static_cast<std::size_t>(num_classes) : 0);
  return 2 * static_cast<std::size_t>(participants) * per_direction;
}

WireMessage encode_payload(std::span<const double> params, const PrototypeSet* prototypes) {
  WireMessage msg;
  msg.header.push_back(params.size());
  msg.header.push_back(prototypes != nullptr ? 1 : 0);
  msg.scalars.assign(params.begin(), params.end());
  if (prototypes != nullptr) {
    msg.header.push_back(static_cast<std::uint64_t>(prototypes->num_classes));
    msg.header.push_back(static_cast<std::uint64_t>(prototypes->dim));
    msg.header.insert(msg.header.end(), prototypes->support.begin(), prototypes->support.end());
    msg.scalars.insert(msg.scalars.end(), prototypes->vectors.begin(), prototypes->vectors.end());
  }
  return msg;
}

DecodedPayload decode_payload(const WireMessage& msg, int num_classes, int dim) {
  if (msg.header.size() < 2) throw std::invalid_argument("decode_payload: truncated header");
  DecodedPayload out;
  const auto n_params = static_cast<std::size_t>(msg.header[0]);
  out.has_prototypes = msg.header[1] != 0;
  const std::size_t block = static_cast<std::size_t>(num_classes) * static_cast<std::size_t>(dim);
  if (msg.scalars.size() != n_params + (out.has_prototypes ? block : 0))
    throw std::invalid_argument("decode_payload: scalar count does not match header");
  out.params.assign(msg.scalars.begin(), msg.scalars.begin() + static_cast<long>(n_params));
  if (out.has_prototypes) {
    if (msg.header.size() != 4 + static_cast<std::size_t>(num_classes) ||
        msg.header[2] != static_cast<std::uint64_t>(num_classes) || msg.header[3] != static_cast<std::uint64_t>(dim))
      throw std::invalid_argument("decode_payload: prototype block shape mismatch");
    out.prototypes = PrototypeSet(num_classes, dim);
    std::copy(msg.header.begin() + 4, msg.header.end(), out.prototypes.support.begin());
    std::copy(msg.scalars.begin() + static_cast<long>(n_params), msg.scalars.end(), out.prototypes.vectors.begin());
  }
  return out;
}

RoundState init_state(const nn::ModelParams& initial, int participants, std::uint64_t seed) {
  if (participants < 1) throw std::invalid_argument("init_state: need at least one participant");
  RoundState s;
  s.global_model = initial;
  s.global_prototypes = PrototypeSet(initial.num_classes, initial.embedding_dim);
  const auto M = static_cast<std::size_t>(participants);
  s.local_models.assign(M, initial);
  s.start_models.assign(M, initial);
  s.local_prototypes.assign(M, s.global_prototypes);
  for (std::size_t i = 0; i < M; ++i) {
    s.train_rngs.push_back(make_rng(seed, "train", i));
    s.dp_rngs.push_back(make_rng(seed, "dp", i));
  }
  return s;
}

RoundReport run_round(RoundState& state, std::span<const Dataset> shards, const Strategy& strategy,
                      const TrainingConfig& training) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t M = shards.size();
  if (M == 0 || state.start_models.size() != M || state.train_rngs.size() != M)
    throw std::invalid_argument("run_round: participant count does not match the round state");
  const int K = state.global_model.num_classes;
  const int d = state.global_model.embedding_dim;

  // Local updates; each participant owns its rng so scheduling cannot change results.
  std::vector<LocalResult> results(M);
  std::vector<std::exception_ptr> errors(M);
  auto work = [&](std::size_t i) {
    try {
      results[i] = local_update(shards[i], state.start_models[i], state.global_prototypes, strategy, training,
                                state.train_rngs[i]);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  const auto workers = static_cast<std::size_t>(std::max(1, training.workers));
  if (workers == 1) {
    for (std::size_t i = 0; i < M; ++i) work(i);
  } else {
    for (std::size_t first = 0; first < M; first += workers) {
      std::vector<std::jthread> pool;
      for (std::size_t i = first; i < std::min(M, first + workers); ++i) pool.emplace_back(work, i);
    }
  }
  for (std::size_t i = 0; i < M; ++i) {
    if (!errors[i]) continue;
    try {
      std::rethrow_exception(errors[i]);
    } catch (const std::exception& e) {
      throw ParticipantError(static_cast<int>(i), e.what());
    }
  }

  RoundReport report;
  report.round = state.round + 1;

  // Uploads.
  std::vector<WireMessage> uploads;
  uploads.reserve(M);
  for (std::size_t i = 0; i < M; ++i) {
    PrototypeSet shared = results[i].prototypes;
    if (strategy.exchange_prototypes && training.dp_sigma > 0.0)
      shared = add_dp_noise(shared, training.dp_sigma, state.dp_rngs[i]);
    uploads.push_back(encode_payload(scoped_section(results[i].model, strategy.scope),
                                     strategy.exchange_prototypes ? &shared : nullptr));
    report.scalars_up += uploads.back().scalars.size();
    report.bytes_up += uploads.back().byte_size();
    state.local_models[i] = std::move(results[i].model);
    state.local_prototypes[i] = std::move(shared);

    ParticipantRoundReport pr;
    pr.participant = static_cast<int>(i);
    pr.samples = shards[i].size();
    pr.final_epoch = results[i].final_epoch;
    pr.objective = results[i].objective;
    report.mean_objective += pr.objective.total / static_cast<double>(M);
    report.participants.push_back(pr);
  }

  // Server: decode, aggregate in participant order.
  if (strategy.scope != AggregationScope::None || strategy.exchange_prototypes) {
    std::vector<std::vector<double>> sections;
    std::vector<PrototypeSet> protos;
    for (const auto& msg : uploads) {
      DecodedPayload p = decode_payload(msg, K, d);
      if (strategy.scope != AggregationScope::None) sections.push_back(std::move(p.params));
      if (p.has_prototypes) protos.push_back(std::move(p.prototypes));
    }
    if (!sections.empty())
      write_section(state.global_model, strategy.scope, mean_of(std::span<const std::vector<double>>(sections)));
    if (!protos.empty()) state.global_prototypes = aggregate_global_prototypes(protos, training.divisor);
  }
  for (int j = 0; j < K; ++j)
    if (strategy.exchange_prototypes && !state.global_prototypes.present(j)) report.absent_global_classes.push_back(j);

  // Share back.
  for (std::size_t i = 0; i < M; ++i) {
    nn::ModelParams next = state.local_models[i];
    if (strategy.scope != AggregationScope::None || strategy.exchange_prototypes) {
      const WireMessage down = encode_payload(scoped_section(state.global_model, strategy.scope),
                                              strategy.exchange_prototypes ? &state.global_prototypes : nullptr);
      report.scalars_down += down.scalars.size();
      report.bytes_down += down.byte_size();
      write_section(next, strategy.scope, decode_payload(down, K, d).params);
    }
    state.start_models[i] = std::move(next);
  }

  ++state.round;
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

}  // namespace protean
