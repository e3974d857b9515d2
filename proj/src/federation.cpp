#include "ufid/federation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <future>

#include "ufid/errors.hpp"
#include "ufid/rng.hpp"

namespace ufid {

AggregationMode parse_aggregation(const std::string& name) {
  if (name == "unweighted") return AggregationMode::kUnweighted;
  if (name == "sample_weighted") return AggregationMode::kSampleWeighted;
  throw ConfigError("unknown aggregation '" + name + "' (expected unweighted or sample_weighted)");
}

std::string to_string(AggregationMode mode) {
  return mode == AggregationMode::kUnweighted ? "unweighted" : "sample_weighted";
}

void OrchestratorConfig::validate() const {
  const std::pair<const char*, std::size_t> counts[] = {
      {"rounds", rounds},         {"num_clients", num_clients},
      {"min_fit", min_fit},       {"min_evaluate", min_evaluate},
      {"min_available", min_available}, {"batch_size", batch_size},
      {"local_epochs", local_epochs},   {"fisher_samples", fisher_samples},
      {"workers", workers}};
  for (const auto& [name, value] : counts) {
    if (value == 0) throw ConfigError(std::string("federation ") + name + " must be positive");
  }
  if (min_fit > num_clients) {
    throw ConfigError("min_fit (" + std::to_string(min_fit) + ") exceeds num_clients (" +
                      std::to_string(num_clients) + ")");
  }
  if (min_evaluate > num_clients) throw ConfigError("min_evaluate exceeds num_clients");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("learning_rate must be finite and nonnegative");
  }
  if (!(lambda_ewc >= 0.0) || !std::isfinite(lambda_ewc)) {
    throw ConfigError("lambda_ewc must be finite and nonnegative");
  }
}

ClientState make_client(int client_id, SwarmDataset train, SwarmDataset test,
                        EncoderClassifierConfig model_config, std::uint64_t seed) {
  train.validate();
  test.validate();
  if (train.feature_dim != test.feature_dim || train.num_classes != test.num_classes) {
    throw ConfigError("client " + std::to_string(client_id) +
                      ": train and test splits disagree on dimensions");
  }
  model_config.input_dim = train.feature_dim;
  model_config.num_classes = train.num_classes;
  model_config.seed = seed;
  EncoderClassifier model(model_config);
  return ClientState{client_id, std::move(train), std::move(test), std::move(model), std::nullopt,
                     seed};
}

LocalUpdate local_train(ClientState& client, const ParameterList& global_shared,
                        const OrchestratorConfig& config, std::size_t round) {
  auto& model = client.model;
  if (model.config().input_dim != client.train.feature_dim ||
      model.config().num_classes != client.train.num_classes) {
    throw ConfigError("client " + std::to_string(client.client_id) + ": model expects " +
                      std::to_string(model.config().input_dim) + " features / " +
                      std::to_string(model.config().num_classes) + " classes, dataset has " +
                      std::to_string(client.train.feature_dim) + " / " +
                      std::to_string(client.train.num_classes));
  }
  if (round == 0) throw UsageError("rounds are numbered from 1");
  model.load_shared(global_shared);
  model.zero_grad();

  const auto params = model.parameters();
  auto optimizer = make_optimizer(config.optimizer, config.learning_rate);
  const bool use_ewc = config.lambda_ewc > 0.0 && client.ewc.has_value();

  LocalUpdate update;
  double loss_sum = 0.0;
  for (std::size_t e = 0; e < config.local_epochs; ++e) {
    const std::uint64_t epoch = (round - 1) * config.local_epochs + e;
    BatchStream stream(client.train, config.batch_size, client.rng_seed, epoch);
    Batch batch;
    while (stream.next(batch)) {
      Tape tape;
      const Var logits = model.forward(tape, batch.features, nn::Mode::kTrain);
      const Var loss = nn::cross_entropy(nn::softmax(logits), batch.labels);
      tape.backward(loss);
      if (use_ewc) ewc_grad(params, *client.ewc);
      optimizer->step(params);
      loss_sum += loss.value()[0] * static_cast<double>(batch.labels.size());
      update.metrics.samples += batch.labels.size();
      ++update.metrics.steps;
    }
  }
  update.metrics.mean_loss = loss_sum / static_cast<double>(update.metrics.samples);
  if (!std::isfinite(update.metrics.mean_loss)) {
    throw NumericError("client " + std::to_string(client.client_id) + ": training loss diverged");
  }

  if (config.lambda_ewc > 0.0) {
    FisherOptions fisher{config.fisher_samples, mix_seed(client.rng_seed, 0xE3C0 + round), 64};
    client.ewc = update_anchor(model, client.train, config.lambda_ewc, fisher);
  } else {
    client.ewc.reset();
  }
  update.shared = model.shared_parameters();
  return update;
}

ParameterList aggregate(std::vector<SharedUpdate> updates, AggregationMode mode) {
  if (updates.empty()) throw AggregationError("aggregate needs at least one update");
  std::stable_sort(updates.begin(), updates.end(),
                   [](const SharedUpdate& a, const SharedUpdate& b) {
                     return a.client_id < b.client_id;
                   });
  const ParameterList& first = updates.front().params;
  for (const auto& u : updates) {
    if (u.params.size() != first.size()) {
      throw AggregationError("client " + std::to_string(u.client_id) + " sent " +
                             std::to_string(u.params.size()) + " tensors, expected " +
                             std::to_string(first.size()));
    }
    for (std::size_t p = 0; p < first.size(); ++p) {
      if (u.params[p].name != first[p].name || !u.params[p].value.same_shape(first[p].value)) {
        throw AggregationError("client " + std::to_string(u.client_id) + " diverges at parameter '" +
                               first[p].name + "' (got '" + u.params[p].name + "' " +
                               u.params[p].value.shape_string() + ")");
      }
    }
    if (mode == AggregationMode::kSampleWeighted && !(u.weight > 0.0)) {
      throw AggregationError("client " + std::to_string(u.client_id) +
                             " has a non-positive aggregation weight");
    }
  }

  double total_weight = 0.0;
  for (const auto& u : updates) {
    total_weight += mode == AggregationMode::kSampleWeighted ? u.weight : 1.0;
  }
  ParameterList out = first;
  for (std::size_t p = 0; p < out.size(); ++p) {
    auto dst = out[p].value.data();
    const auto ref = first[p].value.data();
    for (std::size_t i = 0; i < dst.size(); ++i) {
      double acc = 0.0;
      for (const auto& u : updates) {
        const double w = mode == AggregationMode::kSampleWeighted ? u.weight : 1.0;
        acc += w * (u.params[p].value[i] - ref[i]);
      }
      dst[i] = ref[i] + acc / total_weight;
    }
  }
  return out;
}

bool same_outcome(const RoundRecord& a, const RoundRecord& b) {
  return a.round == b.round && a.selected == b.selected && a.clients == b.clients;
}

std::size_t payload_bytes(const ParameterList& shared) {
  std::size_t n = 0;
  for (const auto& t : shared) n += t.value.numel();
  return n * 4;
}

Orchestrator::Orchestrator(OrchestratorConfig config, std::vector<ClientState> clients)
    : config_(std::move(config)), clients_(std::move(clients)) {
  config_.validate();
  if (clients_.size() < config_.min_available) {
    throw AvailabilityError(std::to_string(clients_.size()) + " clients available, need " +
                            std::to_string(config_.min_available));
  }
  if (clients_.size() != config_.num_clients) {
    throw ConfigError("num_clients is " + std::to_string(config_.num_clients) + " but " +
                      std::to_string(clients_.size()) + " clients were supplied");
  }
  std::sort(clients_.begin(), clients_.end(),
            [](const ClientState& a, const ClientState& b) { return a.client_id < b.client_id; });
  for (std::size_t i = 1; i < clients_.size(); ++i) {
    if (clients_[i].client_id == clients_[i - 1].client_id) {
      throw ConfigError("duplicate client id " + std::to_string(clients_[i].client_id));
    }
  }
  // The initial global encoder depends only on the experiment seed.
  EncoderClassifierConfig reference = clients_.front().model.config();
  reference.seed = config_.seed;
  global_ = EncoderClassifier(reference).shared_parameters();
  for (auto& c : clients_) {
    const auto theirs = c.model.shared_parameters();
    bool same = theirs.size() == global_.size();
    for (std::size_t i = 0; same && i < theirs.size(); ++i) {
      same = theirs[i].name == global_[i].name && theirs[i].value.same_shape(global_[i].value);
    }
    if (!same) {
      throw PartitionError("client " + std::to_string(c.client_id) +
                           " has a different shared encoder architecture");
    }
    c.model.load_shared(global_);
  }
}

std::vector<std::size_t> Orchestrator::select_clients() {
  std::vector<std::size_t> idx(clients_.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  if (config_.min_fit < clients_.size()) {
    SplitMix64 rng(mix_seed(config_.seed, 0x5E1EC7000ULL + round_));
    rng.shuffle(std::span<std::size_t>(idx));
    idx.resize(config_.min_fit);
    std::sort(idx.begin(), idx.end());
  }
  return idx;
}

RoundRecord Orchestrator::run_round() {
  const auto start = std::chrono::steady_clock::now();
  ++round_;
  RoundRecord record;
  record.round = round_;
  const auto chosen = select_clients();
  for (const auto i : chosen) record.selected.push_back(clients_[i].client_id);

  const ParameterList broadcast = global_;
  const std::size_t bytes = payload_bytes(broadcast);
  std::vector<LocalUpdate> local(chosen.size());
  auto train_one = [&](std::size_t k) {
    local[k] = local_train(clients_[chosen[k]], broadcast, config_, round_);
  };
  if (config_.workers > 1) {
    for (std::size_t base = 0; base < chosen.size(); base += config_.workers) {
      std::vector<std::future<void>> wave;
      for (std::size_t k = base; k < std::min(chosen.size(), base + config_.workers); ++k) {
        wave.push_back(std::async(std::launch::async, train_one, k));
      }
      for (auto& f : wave) f.get();
    }
  } else {
    for (std::size_t k = 0; k < chosen.size(); ++k) train_one(k);
  }

  std::vector<SharedUpdate> updates;
  for (std::size_t k = 0; k < chosen.size(); ++k) {
    updates.push_back({clients_[chosen[k]].client_id, std::move(local[k].shared),
                       static_cast<double>(local[k].metrics.samples)});
  }
  global_ = aggregate(std::move(updates), config_.aggregation);

  std::vector<double> accuracy(clients_.size());
  auto evaluate_one = [&](std::size_t i) {
    clients_[i].model.load_shared(global_);
    accuracy[i] = scores(evaluate_confusion(clients_[i].model, clients_[i].test)).accuracy;
  };
  if (config_.workers > 1) {
    std::vector<std::future<void>> all;
    for (std::size_t i = 0; i < clients_.size(); ++i) {
      all.push_back(std::async(std::launch::async, evaluate_one, i));
    }
    for (auto& f : all) f.get();
  } else {
    for (std::size_t i = 0; i < clients_.size(); ++i) evaluate_one(i);
  }

  for (std::size_t i = 0; i < clients_.size(); ++i) {
    ClientRoundMetrics m;
    m.client_id = clients_[i].client_id;
    m.test_accuracy = accuracy[i];
    for (std::size_t k = 0; k < chosen.size(); ++k) {
      if (chosen[k] == i) {
        m.selected = true;
        m.train_loss = local[k].metrics.mean_loss;
        m.payload_bytes_up = bytes;
        m.payload_bytes_down = bytes;
      }
    }
    record.clients.push_back(m);
  }
  record.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return record;
}

ExperimentResult run_experiment(const OrchestratorConfig& config, std::vector<ClientState> clients,
                                const RoundObserver& observer) {
  Orchestrator orchestrator(config, std::move(clients));
  ExperimentResult result;
  for (std::size_t r = 0; r < config.rounds; ++r) {
    result.rounds.push_back(orchestrator.run_round());
    if (observer && !observer(result.rounds.back())) break;
  }
  for (auto& c : orchestrator.clients()) {
    ClientEvaluation ev;
    ev.client_id = c.client_id;
    ev.confusion = evaluate_confusion(c.model, c.test);
    ev.scores = scores(ev.confusion);
    result.evaluation.push_back(std::move(ev));
  }
  result.global_shared = orchestrator.global_shared();
  result.clients = std::move(orchestrator.clients());
  return result;
}

}  // namespace ufid
