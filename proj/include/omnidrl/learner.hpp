#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "omnidrl/box_env.hpp"
#include "omnidrl/nn.hpp"
#include "omnidrl/region_metrics.hpp"
#include "omnidrl/scene_synth.hpp"
#include "json.hpp"

namespace omnidrl {

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Observation = std::vector<std::uint8_t>;  // CHW, one byte per value

struct Experience {
  Observation state;
  int action = 0;
  float reward = 0.0f;
  Observation next_state;
  bool terminal = false;  // no bootstrap term in the target
};

struct ClassSample {
  Observation crop;
  int label = 0;
};

// Fixed-capacity ring buffer with uniform sampling over its current contents.
template <typename E>
class ReplayMemory {
 public:
  explicit ReplayMemory(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw std::invalid_argument("replay capacity must be positive");
  }

  void push(E e) {
    if (items_.size() < capacity_) {
      items_.push_back(std::move(e));
    } else {
      items_[head_] = std::move(e);
    }
    head_ = (head_ + 1) % capacity_;
  }

  std::vector<std::size_t> sample_indices(std::size_t n, std::mt19937_64& rng) const {
    if (items_.empty()) throw std::logic_error("sampling from an empty replay memory");
    std::uniform_int_distribution<std::size_t> pick(0, items_.size() - 1);
    std::vector<std::size_t> out(n);
    for (auto& i : out) i = pick(rng);
    return out;
  }

  std::size_t size() const { return items_.size(); }
  std::size_t capacity() const { return capacity_; }
  bool empty() const { return items_.empty(); }
  const E& operator[](std::size_t i) const { return items_[i]; }
  std::size_t head() const { return head_; }

  // Raw access for serialization.
  const std::vector<E>& items() const { return items_; }
  void restore(std::vector<E> items, std::size_t head) {
    if (items.size() > capacity_ || head >= capacity_) throw std::invalid_argument("bad replay state");
    items_ = std::move(items);
    head_ = head;
  }

 private:
  std::size_t capacity_;
  std::vector<E> items_;
  std::size_t head_ = 0;
};

enum class OptimizerKind { kSgd, kMomentum, kAdam };

struct TrainConfig {
  double gamma = 0.9;
  double learning_rate = 1e-4;
  OptimizerKind optimizer = OptimizerKind::kSgd;
  double momentum = 0.9;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int batch_size = 32;
  int target_sync = 15000;  // C
  double temp_start = 1.0;
  double temp_end = 0.05;
  double temp_decay_fraction = 0.5;  // of max_steps
  std::size_t replay_capacity = 50000;
  std::size_t class_capacity = 50000;
  int max_steps = 200000;
  int learn_start = 1000;  // replay size before updates begin
  int drl_updates = 1;     // per environment step
  int cls_updates = 1;     // per environment step, multi-task only
  bool multi_task = true;
  int checkpoint_every = 0;  // 0 disables periodic checkpoints
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

template <typename T>
struct Network {
  nn::Layout layout;
  std::vector<T> params;

  explicit Network(const nn::ArchSpec& arch) : layout(arch), params(layout.num_params(), T(0)) {}
  std::span<const T> view() const { return params; }
};

using QNetwork = Network<float>;

// Softmax over each column of a logits matrix, max-subtracted.
template <typename T>
nn::Mat<T> softmax_columns(const nn::Mat<T>& logits);

// Double-DQN targets: r + gamma * Q(s', argmax_a Q(s', a; online); target),
// or r alone for terminal samples.
template <typename T>
std::vector<T> ddqn_target(std::span<const Experience* const> batch, const nn::Layout& layout,
                           std::span<const T> online, std::span<const T> target, double gamma);

// Mean squared error between targets and Q(s, a; params). Accumulates the
// gradient into grad when non-empty; targets are constants.
template <typename T>
T drl_loss(std::span<const Experience* const> batch, std::span<const T> targets,
           const nn::Layout& layout, std::span<const T> params, std::span<T> grad);

// Mean cross-entropy of the class head.
template <typename T>
T cls_loss(std::span<const ClassSample* const> batch, const nn::Layout& layout,
           std::span<const T> params, std::span<T> grad);

std::vector<double> boltzmann_probabilities(std::span<const double> q, double temperature);
int select_action_boltzmann(std::span<const double> q, double temperature, std::mt19937_64& rng);
int select_action_greedy(std::span<const double> q);  // lowest index on ties
int classify(std::span<const double> logits);         // lowest index on ties

// Single-observation evaluation helpers on a float network.
std::vector<double> q_values(const QNetwork& net, const Observation& obs);
std::vector<double> class_logits(const QNetwork& net, const Observation& obs);
int classify(const QNetwork& net, const Observation& obs);

class Optimizer {
 public:
  Optimizer(const TrainConfig& cfg, std::size_t num_params);
  void step(std::span<float> params, std::span<const float> grad);

  void save(std::ostream& os) const;
  void load(std::istream& is);

 private:
  OptimizerKind kind_;
  double lr_, momentum_, beta1_, beta2_, eps_;
  std::vector<float> m_, v_;
  std::int64_t t_ = 0;
};

struct Transition {
  Observation next;
  double reward = 0.0;
  bool terminal = false;  // trigger fired
  bool timeout = false;   // step cap reached without trigger
  double iou = 0.0;
};

// Episodic environment driven by the trainer.
class Environment {
 public:
  virtual ~Environment() = default;
  virtual std::size_t observation_size() const = 0;
  // Starts a new episode. Labeled crops produced along the way are appended to
  // samples.
  virtual Observation reset(std::mt19937_64& rng, std::vector<ClassSample>& samples) = 0;
  virtual Transition step(int action) = 0;
  virtual nlohmann::json save_state() const = 0;
  virtual Observation load_state(const nlohmann::json& j) = 0;
};

// Three states on a line, one-hot observations of shape 3x1x1. Action 0 moves
// right, action 1 moves left, the trigger (action 8) ends the episode with +10
// at the rightmost state and -10 elsewhere; every other action costs -1 and
// keeps the state. Episodes start at state 0.
class ChainEnv : public Environment {
 public:
  static constexpr int kStates = 3;
  static constexpr int kTrigger = 8;
  explicit ChainEnv(int max_steps = 20) : max_steps_(max_steps) {}

  std::size_t observation_size() const override { return kStates; }
  Observation reset(std::mt19937_64& rng, std::vector<ClassSample>& samples) override;
  Transition step(int action) override;
  nlohmann::json save_state() const override;
  Observation load_state(const nlohmann::json& j) override;

  static Observation encode(int state);
  static nn::ArchSpec arch(int hidden = 16);
  int state() const { return state_; }

 private:
  int max_steps_;
  int state_ = 0;
  int steps_ = 0;
};

// Box-refinement episodes over a set of rendered scenes.
class BoxTrainingEnv : public Environment {
 public:
  BoxTrainingEnv(std::vector<OmniImage> images, std::vector<std::optional<CylBox>> gts,
                 std::vector<double> ground_z, EnvConfig cfg);

  std::size_t observation_size() const override;
  Observation reset(std::mt19937_64& rng, std::vector<ClassSample>& samples) override;
  Transition step(int action) override;
  nlohmann::json save_state() const override;
  Observation load_state(const nlohmann::json& j) override;

 private:
  Observation restart(std::size_t scene, const CylBox& box, int step_index);

  std::vector<OmniImage> images_;
  std::vector<std::optional<CylBox>> gts_;
  std::vector<double> ground_z_;
  std::vector<std::size_t> positives_;
  EnvConfig cfg_;
  std::optional<BoxEnv> env_;
  std::size_t scene_ = 0;
};

Observation to_observation(const cv::Mat& crop);

struct LogRow {
  std::int64_t step = 0;
  std::int64_t episode = 0;
  double reward = 0.0;
  double drl_loss = 0.0;
  double cls_loss = 0.0;
  double avg_iou = 0.0;  // mean final IoU over the last 100 finished episodes
  bool operator==(const LogRow&) const = default;
};

void write_log_csv(const std::filesystem::path& path, std::span<const LogRow> rows);
std::string log_csv_header();
std::string log_csv_row(const LogRow& row);

class Trainer {
 public:
  Trainer(const nn::ArchSpec& arch, const TrainConfig& cfg, Environment& env, std::uint64_t seed);

  // Runs until step() == until (capped at max_steps). Calls on_row for every
  // logged step.
  void run(std::int64_t until, const std::function<void(const LogRow&)>& on_row = {});

  std::int64_t step() const { return step_; }
  double temperature() const;
  const QNetwork& online() const { return online_; }
  const QNetwork& target() const { return target_; }
  const std::vector<LogRow>& log() const { return log_; }
  const std::vector<std::int64_t>& sync_steps() const { return sync_steps_; }
  const ReplayMemory<Experience>& replay() const { return replay_; }
  const ReplayMemory<ClassSample>& class_memory() const { return class_memory_; }

  // Complete trainer state for exact resume.
  void save_state(const std::filesystem::path& path) const;
  void load_state(const std::filesystem::path& path);

 private:
  void begin_episode();
  double drl_update();
  double cls_update();

  TrainConfig cfg_;
  Environment* env_;
  QNetwork online_, target_;
  Optimizer opt_;
  std::mt19937_64 rng_;
  ReplayMemory<Experience> replay_;
  ReplayMemory<ClassSample> class_memory_;
  std::vector<float> grad_;
  Observation obs_;
  bool in_episode_ = false;
  std::int64_t step_ = 0, episode_ = 0;
  std::vector<double> recent_iou_;
  std::vector<LogRow> log_;
  std::vector<std::int64_t> sync_steps_;
};

struct Checkpoint {
  nn::ArchSpec arch;
  std::int64_t step = 0;
  std::vector<float> params;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);
QNetwork network_from(const Checkpoint& ckpt);

// Chooses the next action given the current environment. Must not return the
// trigger on a terminal environment.
using Policy = std::function<Action(const BoxEnv&)>;

struct EpisodeResult {
  EvalRecord record;
  CylBox final_box;
  bool triggered = false;
  std::vector<CylBox> trajectory;  // box after each action, start included
};

// Runs policy from start until the trigger fires or the step cap is reached.
EpisodeResult run_episode(BoxEnv& env, const CylBox& start, const Policy& policy);

Policy greedy_policy(const QNetwork& net);

// Test protocol: builds the candidates, then either starts from the candidate
// with the highest pedestrian probability (multi-task) or tries candidates in
// order until one triggers (single-task).
EpisodeResult infer_episode(const QNetwork& net, BoxEnv& env, double ground_z, bool multi_task,
                            std::mt19937_64& rng);

// Agents with ground-truth access, for pipeline checks.
// Teleports to the ground-truth box and triggers.
EpisodeResult teleport_oracle_episode(BoxEnv& env);
// Moves one parameter step toward the ground truth per action, largest
// normalised error first, and triggers once every parameter is within half a
// step; starts from the candidate nearest in beta.
Policy planner_oracle_policy();
EpisodeResult planner_oracle_episode(BoxEnv& env, double ground_z, std::mt19937_64& rng);

}  // namespace omnidrl
