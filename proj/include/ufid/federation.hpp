#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "ufid/continual.hpp"
#include "ufid/data.hpp"
#include "ufid/metrics.hpp"
#include "ufid/model.hpp"
#include "ufid/optim.hpp"

namespace ufid {

enum class AggregationMode { kUnweighted, kSampleWeighted };

AggregationMode parse_aggregation(const std::string& name);
std::string to_string(AggregationMode mode);

// Defaults are the published four-client training configuration.
struct OrchestratorConfig {
  std::size_t rounds = 50;
  std::size_t num_clients = 4;
  std::size_t min_fit = 4;
  std::size_t min_evaluate = 4;
  std::size_t min_available = 4;
  std::size_t batch_size = 32;
  std::size_t local_epochs = 1;
  double learning_rate = 0.001;
  double lambda_ewc = 0.4;
  std::uint64_t seed = 0;
  AggregationMode aggregation = AggregationMode::kUnweighted;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  std::size_t fisher_samples = 1000;
  // Client tasks run concurrently when > 1; results do not depend on it.
  std::size_t workers = 1;

  void validate() const;
};

// One swarm's edge server: its data halves, its full model and its EWC
// state. Nothing here is ever read by another client.
struct ClientState {
  int client_id = 0;
  SwarmDataset train;
  SwarmDataset test;
  EncoderClassifier model;
  std::optional<EwcState> ewc;
  std::uint64_t rng_seed = 0;
};

// Builds a client whose model input/class dims follow its dataset. Local
// layers are seeded from `seed`; the encoder is overwritten on broadcast.
ClientState make_client(int client_id, SwarmDataset train, SwarmDataset test,
                        EncoderClassifierConfig model_config, std::uint64_t seed);

struct TrainMetrics {
  double mean_loss = 0.0;  // sample-weighted cross-entropy over the epoch(s)
  std::size_t samples = 0;
  std::size_t steps = 0;
};

struct LocalUpdate {
  ParameterList shared;
  TrainMetrics metrics;
};

// Loads the broadcast encoder, trains on local data with the EWC penalty
// from the previous round, then refreshes the EWC anchor. `round` is 1-based.
LocalUpdate local_train(ClientState& client, const ParameterList& global_shared,
                        const OrchestratorConfig& config, std::size_t round);

struct SharedUpdate {
  int client_id = 0;
  ParameterList params;
  double weight = 1.0;
};

// Elementwise (weighted) mean, consumed in ascending client-id order as
//   ref + sum_k w_k (v_k - ref) / sum_k w_k,   ref = lowest-id value,
// which returns the common value exactly when all updates agree.
ParameterList aggregate(std::vector<SharedUpdate> updates, AggregationMode mode);

struct ClientRoundMetrics {
  int client_id = 0;
  bool selected = false;
  double train_loss = 0.0;
  double test_accuracy = 0.0;
  std::size_t payload_bytes_up = 0;
  std::size_t payload_bytes_down = 0;

  friend bool operator==(const ClientRoundMetrics&, const ClientRoundMetrics&) = default;
};

struct RoundRecord {
  std::size_t round = 0;
  std::vector<int> selected;
  std::vector<ClientRoundMetrics> clients;
  double wall_seconds = 0.0;  // excluded from equality
};

bool same_outcome(const RoundRecord& a, const RoundRecord& b);

// Simulated wire size of one shared-parameter set (f32 on the wire).
std::size_t payload_bytes(const ParameterList& shared);

class Orchestrator {
 public:
  Orchestrator(OrchestratorConfig config, std::vector<ClientState> clients);

  RoundRecord run_round();

  const ParameterList& global_shared() const { return global_; }
  std::vector<ClientState>& clients() { return clients_; }
  const std::vector<ClientState>& clients() const { return clients_; }
  const OrchestratorConfig& config() const { return config_; }
  std::size_t rounds_completed() const { return round_; }

 private:
  std::vector<std::size_t> select_clients();

  OrchestratorConfig config_;
  std::vector<ClientState> clients_;
  ParameterList global_;
  std::size_t round_ = 0;
};

struct ClientEvaluation {
  int client_id = 0;
  ConfusionMatrix confusion;
  ScoreReport scores;
};

struct ExperimentResult {
  std::vector<RoundRecord> rounds;
  std::vector<ClientEvaluation> evaluation;
  ParameterList global_shared;
  std::vector<ClientState> clients;
};

// Called after every round; returning false stops the run early.
using RoundObserver = std::function<bool(const RoundRecord&)>;

ExperimentResult run_experiment(const OrchestratorConfig& config, std::vector<ClientState> clients,
                                const RoundObserver& observer = {});

}  // namespace ufid
