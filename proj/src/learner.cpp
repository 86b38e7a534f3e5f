#include "omnidrl/learner.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

namespace omnidrl {

namespace {

template <typename T>
using Mat = nn::Mat<T>;

std::string_view optimizer_name(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::kSgd: return "sgd";
    case OptimizerKind::kMomentum: return "momentum";
    case OptimizerKind::kAdam: return "adam";
  }
  return "sgd";
}

OptimizerKind optimizer_from(const std::string& s) {
  if (s == "sgd") return OptimizerKind::kSgd;
  if (s == "momentum") return OptimizerKind::kMomentum;
  if (s == "adam") return OptimizerKind::kAdam;
  throw std::invalid_argument("train.optimizer must be sgd, momentum or adam");
}

template <typename T>
Mat<T> batch_input(const nn::Layout& layout, std::span<const Observation* const> obs) {
  std::vector<const std::uint8_t*> ptrs(obs.size());
  for (std::size_t i = 0; i < obs.size(); ++i) {
    if (obs[i]->size() != layout.input_size()) {
      throw std::invalid_argument("observation size does not match the network input");
    }
    ptrs[i] = obs[i]->data();
  }
  return nn::make_input<T>(layout, ptrs);
}

// Binary helpers for checkpoint and trainer-state files.
template <typename P>
void put(std::ostream& os, const P& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(P));
}

template <typename P>
P get(std::istream& is) {
  P v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(P));
  if (!is) throw std::runtime_error("unexpected end of file");
  return v;
}

template <typename P>
void put_vec(std::ostream& os, const std::vector<P>& v) {
  put<std::uint64_t>(os, v.size());
  os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(P)));
}

template <typename P>
std::vector<P> get_vec(std::istream& is) {
  const auto n = get<std::uint64_t>(is);
  if (n > (std::uint64_t{1} << 34)) throw std::runtime_error("corrupt vector length");
  std::vector<P> v(n);
  is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(P)));
  if (!is) throw std::runtime_error("unexpected end of file");
  return v;
}

void put_str(std::ostream& os, const std::string& s) { put_vec(os, std::vector<char>(s.begin(), s.end())); }

std::string get_str(std::istream& is) {
  const auto v = get_vec<char>(is);
  return {v.begin(), v.end()};
}

constexpr char kCheckpointMagic[8] = {'O', 'M', 'N', 'I', 'C', 'K', 'P', 'T'};
constexpr char kTrainerMagic[8] = {'O', 'M', 'N', 'I', 'T', 'R', 'N', 'S'};
constexpr std::uint32_t kFormatVersion = 1;

void check_magic(std::istream& is, const char (&magic)[8], const std::filesystem::path& path) {
  char buf[8];
  is.read(buf, 8);
  if (!is || std::memcmp(buf, magic, 8) != 0) {
    throw std::runtime_error("not an omnidrl file of the expected kind: " + path.string());
  }
  if (get<std::uint32_t>(is) != kFormatVersion) {
    throw std::runtime_error("unsupported file version: " + path.string());
  }
}

}  // namespace

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"gamma", c.gamma},
                     {"learning_rate", c.learning_rate},
                     {"optimizer", std::string(optimizer_name(c.optimizer))},
                     {"momentum", c.momentum},
                     {"adam_beta1", c.adam_beta1},
                     {"adam_beta2", c.adam_beta2},
                     {"adam_eps", c.adam_eps},
                     {"batch_size", c.batch_size},
                     {"target_sync", c.target_sync},
                     {"temp_start", c.temp_start},
                     {"temp_end", c.temp_end},
                     {"temp_decay_fraction", c.temp_decay_fraction},
                     {"replay_capacity", c.replay_capacity},
                     {"class_capacity", c.class_capacity},
                     {"max_steps", c.max_steps},
                     {"learn_start", c.learn_start},
                     {"drl_updates", c.drl_updates},
                     {"cls_updates", c.cls_updates},
                     {"multi_task", c.multi_task},
                     {"checkpoint_every", c.checkpoint_every}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.gamma = j.value("gamma", c.gamma);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.optimizer = optimizer_from(j.value("optimizer", std::string(optimizer_name(c.optimizer))));
  c.momentum = j.value("momentum", c.momentum);
  c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
  c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
  c.adam_eps = j.value("adam_eps", c.adam_eps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.target_sync = j.value("target_sync", c.target_sync);
  c.temp_start = j.value("temp_start", c.temp_start);
  c.temp_end = j.value("temp_end", c.temp_end);
  c.temp_decay_fraction = j.value("temp_decay_fraction", c.temp_decay_fraction);
  c.replay_capacity = j.value("replay_capacity", c.replay_capacity);
  c.class_capacity = j.value("class_capacity", c.class_capacity);
  c.max_steps = j.value("max_steps", c.max_steps);
  c.learn_start = j.value("learn_start", c.learn_start);
  c.drl_updates = j.value("drl_updates", c.drl_updates);
  c.cls_updates = j.value("cls_updates", c.cls_updates);
  c.multi_task = j.value("multi_task", c.multi_task);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  if (!(c.gamma >= 0.0 && c.gamma < 1.0)) throw std::invalid_argument("train.gamma must lie in [0, 1)");
  if (!(c.learning_rate > 0.0)) throw std::invalid_argument("train.learning_rate must be positive");
  if (c.batch_size <= 0 || c.target_sync <= 0 || c.max_steps <= 0 || c.replay_capacity == 0 ||
      c.class_capacity == 0 || c.drl_updates < 0 || c.cls_updates < 0 || c.learn_start < 0 ||
      c.checkpoint_every < 0) {
    throw std::invalid_argument("train: sizes and periods must be positive");
  }
  if (!(c.temp_start > 0.0 && c.temp_end > 0.0 && c.temp_decay_fraction > 0.0)) {
    throw std::invalid_argument("train: temperatures and decay fraction must be positive");
  }
}

template <typename T>
Mat<T> softmax_columns(const Mat<T>& logits) {
  Mat<T> p(logits.rows(), logits.cols());
  for (Eigen::Index c = 0; c < logits.cols(); ++c) {
    const T m = logits.col(c).maxCoeff();
    T sum = 0;
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
      p(r, c) = std::exp(logits(r, c) - m);
      sum += p(r, c);
    }
    p.col(c) /= sum;
  }
  return p;
}

template <typename T>
std::vector<T> ddqn_target(std::span<const Experience* const> batch, const nn::Layout& layout,
                           std::span<const T> online, std::span<const T> target, double gamma) {
  if (batch.empty()) throw std::invalid_argument("ddqn_target: empty batch");
  std::vector<T> out(batch.size());
  std::vector<const Observation*> next;
  std::vector<std::size_t> where;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    out[i] = static_cast<T>(batch[i]->reward);
    if (!batch[i]->terminal) {
      next.push_back(&batch[i]->next_state);
      where.push_back(i);
    }
  }
  if (next.empty()) return out;
  const int n = static_cast<int>(next.size());
  const Mat<T> input = batch_input<T>(layout, next);
  const auto q_online = nn::forward<T>(layout, online, input, n, {true, false}, false).q;
  const auto q_target = nn::forward<T>(layout, target, input, n, {true, false}, false).q;
  for (int k = 0; k < n; ++k) {
    Eigen::Index best = 0;
    for (Eigen::Index a = 1; a < q_online.rows(); ++a) {
      if (q_online(a, k) > q_online(best, k)) best = a;
    }
    out[where[k]] += static_cast<T>(gamma) * q_target(best, k);
  }
  return out;
}

template <typename T>
T drl_loss(std::span<const Experience* const> batch, std::span<const T> targets, const nn::Layout& layout,
           std::span<const T> params, std::span<T> grad) {
  if (batch.empty() || targets.size() != batch.size()) {
    throw std::invalid_argument("drl_loss: batch and targets must be non-empty and aligned");
  }
  std::vector<const Observation*> states(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) states[i] = &batch[i]->state;
  const int n = static_cast<int>(batch.size());
  const bool want_grad = !grad.empty();
  auto pass = nn::forward<T>(layout, params, batch_input<T>(layout, states), n, {true, false}, want_grad);
  Mat<T> d_q = Mat<T>::Zero(pass.q.rows(), n);
  T loss = 0;
  for (int k = 0; k < n; ++k) {
    const int a = batch[k]->action;
    if (a < 0 || a >= pass.q.rows()) throw std::invalid_argument("drl_loss: action index out of range");
    const T residual = targets[k] - pass.q(a, k);
    loss += residual * residual;
    d_q(a, k) = T(-2) * residual / T(n);
  }
  loss /= T(n);
  if (want_grad) nn::backward<T>(layout, params, pass, &d_q, nullptr, grad);
  return loss;
}

template <typename T>
T cls_loss(std::span<const ClassSample* const> batch, const nn::Layout& layout, std::span<const T> params,
           std::span<T> grad) {
  if (batch.empty()) throw std::invalid_argument("cls_loss: empty batch");
  std::vector<const Observation*> crops(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) crops[i] = &batch[i]->crop;
  const int n = static_cast<int>(batch.size());
  const bool want_grad = !grad.empty();
  auto pass = nn::forward<T>(layout, params, batch_input<T>(layout, crops), n, {false, true}, want_grad);
  const Mat<T> p = softmax_columns<T>(pass.logits);
  Mat<T> d_logits = p;
  T loss = 0;
  for (int k = 0; k < n; ++k) {
    const int y = batch[k]->label;
    if (y < 0 || y >= p.rows()) throw std::invalid_argument("cls_loss: label out of range");
    // log-softmax evaluated from the logits for accuracy at saturated probabilities
    const T m = pass.logits.col(k).maxCoeff();
    const T lse = m + std::log((pass.logits.col(k).array() - m).exp().sum());
    loss += lse - pass.logits(y, k);
    d_logits(y, k) -= T(1);
  }
  loss /= T(n);
  d_logits /= T(n);
  if (want_grad) nn::backward<T>(layout, params, pass, nullptr, &d_logits, grad);
  return loss;
}

#define OMNIDRL_LEARNER_INSTANTIATE(T)                                                               \
  template Mat<T> softmax_columns<T>(const Mat<T>&);                                                 \
  template std::vector<T> ddqn_target<T>(std::span<const Experience* const>, const nn::Layout&,      \
                                         std::span<const T>, std::span<const T>, double);            \
  template T drl_loss<T>(std::span<const Experience* const>, std::span<const T>, const nn::Layout&,  \
                         std::span<const T>, std::span<T>);                                          \
  template T cls_loss<T>(std::span<const ClassSample* const>, const nn::Layout&, std::span<const T>, \
                         std::span<T>);

OMNIDRL_LEARNER_INSTANTIATE(float)
OMNIDRL_LEARNER_INSTANTIATE(double)

#undef OMNIDRL_LEARNER_INSTANTIATE

std::vector<double> boltzmann_probabilities(std::span<const double> q, double temperature) {
  if (!(temperature > 0.0)) throw std::invalid_argument("Boltzmann temperature must be positive");
  if (q.empty()) throw std::invalid_argument("Boltzmann selection over no actions");
  const double m = *std::max_element(q.begin(), q.end());
  std::vector<double> p(q.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) sum += p[i] = std::exp((q[i] - m) / temperature);
  for (auto& v : p) v /= sum;
  return p;
}

int select_action_boltzmann(std::span<const double> q, double temperature, std::mt19937_64& rng) {
  const auto p = boltzmann_probabilities(q, temperature);
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    acc += p[i];
    if (u < acc) return static_cast<int>(i);
  }
  // u landed in the rounding gap above the last partial sum
  for (std::size_t i = p.size(); i-- > 0;) {
    if (p[i] > 0.0) return static_cast<int>(i);
  }
  return 0;
}

int select_action_greedy(std::span<const double> q) {
  if (q.empty()) throw std::invalid_argument("greedy selection over no actions");
  return static_cast<int>(std::max_element(q.begin(), q.end()) - q.begin());
}

int classify(std::span<const double> logits) { return select_action_greedy(logits); }

std::vector<double> q_values(const QNetwork& net, const Observation& obs) {
  const Observation* one[] = {&obs};
  auto pass = nn::forward<float>(net.layout, net.view(), batch_input<float>(net.layout, one), 1,
                                 {true, false}, false);
  return {pass.q.data(), pass.q.data() + pass.q.size()};
}

std::vector<double> class_logits(const QNetwork& net, const Observation& obs) {
  const Observation* one[] = {&obs};
  auto pass = nn::forward<float>(net.layout, net.view(), batch_input<float>(net.layout, one), 1,
                                 {false, true}, false);
  return {pass.logits.data(), pass.logits.data() + pass.logits.size()};
}

int classify(const QNetwork& net, const Observation& obs) { return classify(class_logits(net, obs)); }

Optimizer::Optimizer(const TrainConfig& cfg, std::size_t num_params)
    : kind_(cfg.optimizer),
      lr_(cfg.learning_rate),
      momentum_(cfg.momentum),
      beta1_(cfg.adam_beta1),
      beta2_(cfg.adam_beta2),
      eps_(cfg.adam_eps) {
  if (kind_ != OptimizerKind::kSgd) m_.assign(num_params, 0.0f);
  if (kind_ == OptimizerKind::kAdam) v_.assign(num_params, 0.0f);
}

void Optimizer::step(std::span<float> params, std::span<const float> grad) {
  if (params.size() != grad.size()) throw std::invalid_argument("optimizer: size mismatch");
  ++t_;
  const float lr = static_cast<float>(lr_);
  switch (kind_) {
    case OptimizerKind::kSgd:
      for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr * grad[i];
      break;
    case OptimizerKind::kMomentum: {
      const float mu = static_cast<float>(momentum_);
      for (std::size_t i = 0; i < params.size(); ++i) {
        m_[i] = mu * m_[i] + grad[i];
        params[i] -= lr * m_[i];
      }
      break;
    }
    case OptimizerKind::kAdam: {
      const float b1 = static_cast<float>(beta1_), b2 = static_cast<float>(beta2_);
      const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
      const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
      const float step = static_cast<float>(lr_ * std::sqrt(c2) / c1);
      const float eps = static_cast<float>(eps_ * std::sqrt(c2));
      for (std::size_t i = 0; i < params.size(); ++i) {
        m_[i] = b1 * m_[i] + (1.0f - b1) * grad[i];
        v_[i] = b2 * v_[i] + (1.0f - b2) * grad[i] * grad[i];
        params[i] -= step * m_[i] / (std::sqrt(v_[i]) + eps);
      }
      break;
    }
  }
}

void Optimizer::save(std::ostream& os) const {
  put<std::int32_t>(os, static_cast<std::int32_t>(kind_));
  put<std::int64_t>(os, t_);
  put_vec(os, m_);
  put_vec(os, v_);
}

void Optimizer::load(std::istream& is) {
  if (get<std::int32_t>(is) != static_cast<std::int32_t>(kind_)) {
    throw std::runtime_error("optimizer state was saved with a different optimizer");
  }
  t_ = get<std::int64_t>(is);
  auto m = get_vec<float>(is);
  auto v = get_vec<float>(is);
  if (m.size() != m_.size() || v.size() != v_.size()) throw std::runtime_error("optimizer state size mismatch");
  m_ = std::move(m);
  v_ = std::move(v);
}

// ---- chain MDP ----

Observation ChainEnv::encode(int state) {
  Observation o(kStates, 0);
  o.at(static_cast<std::size_t>(state)) = 255;
  return o;
}

nn::ArchSpec ChainEnv::arch(int hidden) {
  nn::ArchSpec a;
  a.in_channels = kStates;
  a.in_height = a.in_width = 1;
  a.fc_hidden = hidden;
  return a;
}

Observation ChainEnv::reset(std::mt19937_64&, std::vector<ClassSample>&) {
  state_ = 0;
  steps_ = 0;
  return encode(state_);
}

Transition ChainEnv::step(int action) {
  if (action < 0 || action >= kNumActions) throw std::out_of_range("ChainEnv: bad action");
  Transition t;
  ++steps_;
  if (action == kTrigger) {
    t.reward = state_ == kStates - 1 ? 10.0 : -10.0;
    t.terminal = true;
  } else {
    if (action == 0) state_ = std::min(state_ + 1, kStates - 1);
    if (action == 1) state_ = std::max(state_ - 1, 0);
    t.reward = -1.0;
    t.timeout = steps_ >= max_steps_;
  }
  t.next = encode(state_);
  t.iou = state_ == kStates - 1 ? 1.0 : 0.0;
  return t;
}

nlohmann::json ChainEnv::save_state() const { return {{"state", state_}, {"steps", steps_}}; }

Observation ChainEnv::load_state(const nlohmann::json& j) {
  state_ = j.at("state").get<int>();
  steps_ = j.at("steps").get<int>();
  return encode(state_);
}

// ---- box environment adapter ----

Observation to_observation(const cv::Mat& crop) {
  if (crop.type() != CV_8UC1) throw std::invalid_argument("crop must be CV_8UC1");
  Observation o(crop.total());
  if (crop.isContinuous()) {
    std::memcpy(o.data(), crop.data, o.size());
  } else {
    for (int r = 0; r < crop.rows; ++r) std::memcpy(o.data() + r * crop.cols, crop.ptr(r), crop.cols);
  }
  return o;
}

BoxTrainingEnv::BoxTrainingEnv(std::vector<OmniImage> images, std::vector<std::optional<CylBox>> gts,
                               std::vector<double> ground_z, EnvConfig cfg)
    : images_(std::move(images)), gts_(std::move(gts)), ground_z_(std::move(ground_z)), cfg_(cfg) {
  if (images_.size() != gts_.size() || images_.size() != ground_z_.size()) {
    throw std::invalid_argument("BoxTrainingEnv: images, boxes and ground heights must align");
  }
  for (std::size_t i = 0; i < gts_.size(); ++i) {
    if (gts_[i]) positives_.push_back(i);
  }
  if (positives_.empty()) throw std::invalid_argument("BoxTrainingEnv: no scene contains a pedestrian");
}

std::size_t BoxTrainingEnv::observation_size() const {
  return static_cast<std::size_t>(cfg_.input_size) * cfg_.input_size;
}

Observation BoxTrainingEnv::restart(std::size_t scene, const CylBox& box, int step_index) {
  scene_ = scene;
  env_.emplace(images_[scene], gts_[scene], cfg_);
  return to_observation(env_->reset(box, step_index).crop);
}

Observation BoxTrainingEnv::reset(std::mt19937_64& rng, std::vector<ClassSample>& samples) {
  std::uniform_int_distribution<std::size_t> pick_pos(0, positives_.size() - 1);
  const std::size_t scene = positives_[pick_pos(rng)];

  // Classifier samples: the test-time candidates of this scene, and those of
  // a random scene (possibly pedestrian-free) every other episode.
  auto push_candidates = [&](std::size_t s) {
    BoxEnv probe(images_[s], gts_[s], cfg_);
    for (const CylBox& c : test_candidates(cfg_, ground_z_[s], rng)) {
      try {
        probe.reset(c);
      } catch (const GeometryError&) {
        continue;
      }
      samples.push_back({to_observation(probe.state().crop), probe.crop_label()});
    }
  };
  push_candidates(scene);
  if (std::uniform_int_distribution<int>(0, 1)(rng) == 1) {
    push_candidates(std::uniform_int_distribution<std::size_t>(0, images_.size() - 1)(rng));
  }

  for (int attempt = 0;; ++attempt) {
    const CylBox start = train_init(*gts_[scene], cfg_, rng);
    try {
      return restart(scene, start, 0);
    } catch (const GeometryError&) {
      if (attempt >= 16) throw;
    }
  }
}

Transition BoxTrainingEnv::step(int action) {
  if (!env_) throw std::logic_error("BoxTrainingEnv::step before reset");
  const StepOutcome out = env_->step(action_from_index(action));
  Transition t;
  t.next = to_observation(out.next_state.crop);
  t.reward = out.reward;
  t.terminal = out.triggered;
  t.timeout = out.terminal && !out.triggered;
  t.iou = out.iou;
  return t;
}

nlohmann::json BoxTrainingEnv::save_state() const {
  if (!env_) return nlohmann::json{{"active", false}};
  return {{"active", true},
          {"scene", scene_},
          {"box", env_->state().box},
          {"step_index", env_->state().step_index}};
}

Observation BoxTrainingEnv::load_state(const nlohmann::json& j) {
  if (!j.at("active").get<bool>()) {
    env_.reset();
    return {};
  }
  const auto scene = j.at("scene").get<std::size_t>();
  if (scene >= images_.size()) throw std::runtime_error("saved scene index out of range");
  return restart(scene, j.at("box").get<CylBox>(), j.at("step_index").get<int>());
}

// ---- training log ----

std::string log_csv_header() { return "step,episode,reward,drl_loss,cls_loss,avg_iou"; }

std::string log_csv_row(const LogRow& r) {
  std::ostringstream os;
  os.precision(9);
  os << r.step << ',' << r.episode << ',' << r.reward << ',' << r.drl_loss << ',' << r.cls_loss << ','
     << r.avg_iou;
  return os.str();
}

void write_log_csv(const std::filesystem::path& path, std::span<const LogRow> rows) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << log_csv_header() << '\n';
  for (const auto& r : rows) f << log_csv_row(r) << '\n';
}

// ---- trainer ----

Trainer::Trainer(const nn::ArchSpec& arch, const TrainConfig& cfg, Environment& env, std::uint64_t seed)
    : cfg_(cfg),
      env_(&env),
      online_(arch),
      target_(arch),
      opt_(cfg, online_.layout.num_params()),
      rng_(seed),
      replay_(cfg.replay_capacity),
      class_memory_(cfg.class_capacity),
      grad_(online_.layout.num_params(), 0.0f) {
  if (env.observation_size() != online_.layout.input_size()) {
    throw std::invalid_argument("Trainer: environment observations do not match the network input");
  }
  nn::init_params<float>(online_.layout, online_.params, rng_);
  target_.params = online_.params;
}

double Trainer::temperature() const {
  const double horizon = cfg_.temp_decay_fraction * cfg_.max_steps;
  const double frac = std::min(1.0, static_cast<double>(step_) / std::max(horizon, 1.0));
  return cfg_.temp_start + (cfg_.temp_end - cfg_.temp_start) * frac;
}

void Trainer::begin_episode() {
  std::vector<ClassSample> samples;
  obs_ = env_->reset(rng_, samples);
  if (cfg_.multi_task) {
    for (auto& s : samples) class_memory_.push(std::move(s));
  }
  in_episode_ = true;
}

double Trainer::drl_update() {
  const auto idx = replay_.sample_indices(static_cast<std::size_t>(cfg_.batch_size), rng_);
  std::vector<const Experience*> batch(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) batch[i] = &replay_[idx[i]];
  const auto targets = ddqn_target<float>(batch, online_.layout, online_.view(), target_.view(), cfg_.gamma);
  std::fill(grad_.begin(), grad_.end(), 0.0f);
  const float loss = drl_loss<float>(batch, targets, online_.layout, online_.view(), grad_);
  if (!std::isfinite(loss)) {
    throw TrainingDiverged("DRL loss became non-finite at step " + std::to_string(step_));
  }
  opt_.step(online_.params, grad_);
  return loss;
}

double Trainer::cls_update() {
  const auto idx = class_memory_.sample_indices(static_cast<std::size_t>(cfg_.batch_size), rng_);
  std::vector<const ClassSample*> batch(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) batch[i] = &class_memory_[idx[i]];
  std::fill(grad_.begin(), grad_.end(), 0.0f);
  const float loss = cls_loss<float>(batch, online_.layout, online_.view(), grad_);
  if (!std::isfinite(loss)) {
    throw TrainingDiverged("classification loss became non-finite at step " + std::to_string(step_));
  }
  opt_.step(online_.params, grad_);
  return loss;
}

void Trainer::run(std::int64_t until, const std::function<void(const LogRow&)>& on_row) {
  until = std::min<std::int64_t>(until, cfg_.max_steps);
  const std::size_t warm = std::max<std::size_t>(cfg_.learn_start, cfg_.batch_size);
  while (step_ < until) {
    if (!in_episode_) begin_episode();
    const auto q = q_values(online_, obs_);
    const int a = select_action_boltzmann(q, temperature(), rng_);
    Transition tr = env_->step(a);
    replay_.push({obs_, a, static_cast<float>(tr.reward), tr.next, tr.terminal});
    ++step_;

    LogRow row;
    row.step = step_;
    row.episode = episode_;
    row.reward = tr.reward;
    if (replay_.size() >= warm) {
      for (int k = 0; k < cfg_.drl_updates; ++k) row.drl_loss = drl_update();
    }
    if (cfg_.multi_task && class_memory_.size() >= static_cast<std::size_t>(cfg_.batch_size) &&
        replay_.size() >= warm) {
      for (int k = 0; k < cfg_.cls_updates; ++k) row.cls_loss = cls_update();
    }
    if (step_ % cfg_.target_sync == 0) {
      target_.params = online_.params;
      sync_steps_.push_back(step_);
    }
    if (tr.terminal || tr.timeout) {
      in_episode_ = false;
      ++episode_;
      recent_iou_.push_back(tr.iou);
      if (recent_iou_.size() > 100) recent_iou_.erase(recent_iou_.begin());
    } else {
      obs_ = std::move(tr.next);
    }
    if (!recent_iou_.empty()) {
      row.avg_iou = std::accumulate(recent_iou_.begin(), recent_iou_.end(), 0.0) / recent_iou_.size();
    }
    log_.push_back(row);
    if (on_row) on_row(row);
  }
}

void Trainer::save_state(const std::filesystem::path& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f.write(kTrainerMagic, 8);
  put<std::uint32_t>(f, kFormatVersion);
  put<std::int64_t>(f, step_);
  put<std::int64_t>(f, episode_);
  put<std::uint8_t>(f, in_episode_ ? 1 : 0);
  put_vec(f, obs_);
  put_vec(f, online_.params);
  put_vec(f, target_.params);
  opt_.save(f);
  std::ostringstream rng;
  rng << rng_;
  put_str(f, rng.str());
  put<std::uint64_t>(f, replay_.items().size());
  put<std::uint64_t>(f, replay_.head());
  for (const auto& e : replay_.items()) {
    put_vec(f, e.state);
    put<std::int32_t>(f, e.action);
    put<float>(f, e.reward);
    put_vec(f, e.next_state);
    put<std::uint8_t>(f, e.terminal ? 1 : 0);
  }
  put<std::uint64_t>(f, class_memory_.items().size());
  put<std::uint64_t>(f, class_memory_.head());
  for (const auto& s : class_memory_.items()) {
    put_vec(f, s.crop);
    put<std::int32_t>(f, s.label);
  }
  put_vec(f, recent_iou_);
  put<std::uint64_t>(f, log_.size());
  for (const auto& r : log_) {
    put(f, r.step);
    put(f, r.episode);
    put(f, r.reward);
    put(f, r.drl_loss);
    put(f, r.cls_loss);
    put(f, r.avg_iou);
  }
  put_vec(f, sync_steps_);
  put_str(f, env_->save_state().dump());
  if (!f) throw std::runtime_error("error while writing " + path.string());
}

void Trainer::load_state(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path.string());
  check_magic(f, kTrainerMagic, path);
  step_ = get<std::int64_t>(f);
  episode_ = get<std::int64_t>(f);
  in_episode_ = get<std::uint8_t>(f) != 0;
  obs_ = get_vec<std::uint8_t>(f);
  auto online = get_vec<float>(f);
  auto target = get_vec<float>(f);
  if (online.size() != online_.params.size() || target.size() != target_.params.size()) {
    throw std::runtime_error("trainer state does not match the network architecture");
  }
  online_.params = std::move(online);
  target_.params = std::move(target);
  opt_.load(f);
  std::istringstream rng(get_str(f));
  rng >> rng_;
  {
    const auto n = get<std::uint64_t>(f);
    const auto head = get<std::uint64_t>(f);
    std::vector<Experience> items(n);
    for (auto& e : items) {
      e.state = get_vec<std::uint8_t>(f);
      e.action = get<std::int32_t>(f);
      e.reward = get<float>(f);
      e.next_state = get_vec<std::uint8_t>(f);
      e.terminal = get<std::uint8_t>(f) != 0;
    }
    replay_.restore(std::move(items), head);
  }
  {
    const auto n = get<std::uint64_t>(f);
    const auto head = get<std::uint64_t>(f);
    std::vector<ClassSample> items(n);
    for (auto& s : items) {
      s.crop = get_vec<std::uint8_t>(f);
      s.label = get<std::int32_t>(f);
    }
    class_memory_.restore(std::move(items), head);
  }
  recent_iou_ = get_vec<double>(f);
  log_.resize(get<std::uint64_t>(f));
  for (auto& r : log_) {
    r.step = get<std::int64_t>(f);
    r.episode = get<std::int64_t>(f);
    r.reward = get<double>(f);
    r.drl_loss = get<double>(f);
    r.cls_loss = get<double>(f);
    r.avg_iou = get<double>(f);
  }
  sync_steps_ = get_vec<std::int64_t>(f);
  const Observation obs = env_->load_state(nlohmann::json::parse(get_str(f)));
  if (in_episode_ && obs != obs_) throw std::runtime_error("restored environment does not match the saved observation");
}

// ---- checkpoints ----

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  if (ckpt.params.size() != nn::Layout(ckpt.arch).num_params()) {
    throw std::invalid_argument("checkpoint parameters do not match the architecture");
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f.write(kCheckpointMagic, 8);
  put<std::uint32_t>(f, kFormatVersion);
  put_str(f, nlohmann::json(ckpt.arch).dump());
  put<std::int64_t>(f, ckpt.step);
  put_vec(f, ckpt.params);
  if (!f) throw std::runtime_error("error while writing " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path.string());
  check_magic(f, kCheckpointMagic, path);
  Checkpoint c;
  c.arch = nlohmann::json::parse(get_str(f)).get<nn::ArchSpec>();
  c.step = get<std::int64_t>(f);
  c.params = get_vec<float>(f);
  if (c.params.size() != nn::Layout(c.arch).num_params()) {
    throw std::runtime_error("checkpoint parameters do not match its architecture: " + path.string());
  }
  return c;
}

QNetwork network_from(const Checkpoint& ckpt) {
  QNetwork net(ckpt.arch);
  net.params = ckpt.params;
  return net;
}

// ---- inference ----

namespace {

EpisodeResult finish(const BoxEnv& env, int steps, bool triggered, std::vector<CylBox> trajectory) {
  EpisodeResult res;
  res.final_box = env.state().box;
  res.triggered = triggered;
  res.trajectory = std::move(trajectory);
  res.record.steps = steps;
  res.record.final_iou = env.iou();
  res.record.triggered_correct = triggered && env.iou() >= env.config().tau;
  if (env.has_gt()) {
    res.record.rho_error = res.final_box.rho - env.gt().rho;
    res.record.beta_error = angle_diff(res.final_box.beta, env.gt().beta);
  }
  return res;
}

}  // namespace

EpisodeResult run_episode(BoxEnv& env, const CylBox& start, const Policy& policy) {
  env.reset(start);
  std::vector<CylBox> traj{env.state().box};
  int steps = 0;
  bool triggered = false;
  while (!env.terminal()) {
    const StepOutcome out = env.step(policy(env));
    ++steps;
    traj.push_back(env.state().box);
    if (out.triggered) triggered = true;
  }
  return finish(env, steps, triggered, std::move(traj));
}

Policy greedy_policy(const QNetwork& net) {
  return [&net](const BoxEnv& env) {
    return action_from_index(select_action_greedy(q_values(net, to_observation(env.state().crop))));
  };
}

EpisodeResult infer_episode(const QNetwork& net, BoxEnv& env, double ground_z, bool multi_task,
                            std::mt19937_64& rng) {
  const auto candidates = test_candidates(env.config(), ground_z, rng);
  const Policy policy = greedy_policy(net);
  if (multi_task) {
    std::size_t best = 0;
    double best_p = -1.0;
    for (std::size_t k = 0; k < candidates.size(); ++k) {
      BoxState st;
      try {
        st = render_state(candidates[k], env.image(), env.config());
      } catch (const GeometryError&) {
        continue;
      }
      const auto logits = class_logits(net, to_observation(st.crop));
      const double p = boltzmann_probabilities(logits, 1.0).at(1);
      if (p > best_p) {
        best_p = p;
        best = k;
      }
    }
    return run_episode(env, candidates[best], policy);
  }
  EpisodeResult res;
  for (const CylBox& c : candidates) {
    res = run_episode(env, c, policy);
    if (res.triggered) break;
  }
  return res;
}

EpisodeResult teleport_oracle_episode(BoxEnv& env) {
  if (!env.has_gt()) throw std::logic_error("teleport oracle needs a ground-truth box");
  env.reset(env.gt());
  env.step(Action::kTrigger);
  return finish(env, 1, true, {env.gt()});
}

Policy planner_oracle_policy() {
  return [](const BoxEnv& env) {
    const CylBox& b = env.state().box;
    const CylBox& g = env.gt();
    const ActionStepSizes& s = env.config().steps;
    const std::array<double, 4> err = {(g.rho - b.rho) / s.rho, angle_diff(g.beta, b.beta) / s.beta,
                                       (g.w - b.w) / s.w, (g.h - b.h) / s.h};
    std::size_t worst = 0;
    for (std::size_t i = 1; i < err.size(); ++i) {
      if (std::abs(err[i]) > std::abs(err[worst])) worst = i;
    }
    if (std::abs(err[worst]) <= 0.5) return Action::kTrigger;
    return action_from_index(static_cast<int>(2 * worst + (err[worst] > 0 ? 0 : 1)));
  };
}

EpisodeResult planner_oracle_episode(BoxEnv& env, double ground_z, std::mt19937_64& rng) {
  if (!env.has_gt()) throw std::logic_error("planner oracle needs a ground-truth box");
  const auto candidates = test_candidates(env.config(), ground_z, rng);
  std::size_t best = 0;
  for (std::size_t k = 1; k < candidates.size(); ++k) {
    if (std::abs(angle_diff(candidates[k].beta, env.gt().beta)) <
        std::abs(angle_diff(candidates[best].beta, env.gt().beta))) {
      best = k;
    }
  }
  return run_episode(env, candidates[best], planner_oracle_policy());
}

}  // namespace omnidrl
