#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "json.hpp"

namespace omnidrl::nn {

// Activations are row-major [channels, batch * height * width] inside the
// convolutional stack and [features, batch] in the dense layers.
template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ConvSpec {
  int filters = 8;
  int kernel = 3;
  int stride = 1;
  int pad = 0;
  bool operator==(const ConvSpec&) const = default;
};

// Hard parameter sharing: a shared convolutional trunk, then two branches
// (Q-values and class logits), each with its own convolutions followed by one
// hidden and one output fully-connected layer.
struct ArchSpec {
  int in_channels = 1;
  int in_height = 64;
  int in_width = 64;
  std::vector<ConvSpec> shared;
  std::vector<ConvSpec> branch;
  int fc_hidden = 64;
  int num_actions = 9;
  int num_classes = 2;
  bool operator==(const ArchSpec&) const = default;

  // Five convolutions (three shared, two per branch) on 224x224 grayscale input.
  static ArchSpec paper();
  // 64x64 grayscale, two shared plus one branch convolution.
  static ArchSpec desk();
};

void to_json(nlohmann::json& j, const ConvSpec& c);
void from_json(const nlohmann::json& j, ConvSpec& c);
void to_json(nlohmann::json& j, const ArchSpec& a);
void from_json(const nlohmann::json& j, ArchSpec& a);

struct ConvGeom {
  int in_c, in_h, in_w;
  int out_c, out_h, out_w;
  int k, s, p;
  std::size_t w_off, b_off;  // weights [out_c, in_c*k*k] row-major, bias [out_c]
};

struct DenseGeom {
  int in, out;
  bool relu;
  std::size_t w_off, b_off;  // weights [out, in] row-major, bias [out]
};

struct BranchGeom {
  std::vector<ConvGeom> convs;
  std::vector<DenseGeom> dense;  // hidden (ReLU) then output (linear)
  std::size_t begin = 0, end = 0;  // parameter range
};

struct ParamGroup {
  std::string name;
  std::size_t begin, end;
};

// Parameter offsets and shapes derived from an ArchSpec. Stateless.
class Layout {
 public:
  explicit Layout(const ArchSpec& arch);

  const ArchSpec& arch() const { return arch_; }
  std::size_t num_params() const { return num_params_; }
  std::size_t input_size() const {
    return static_cast<std::size_t>(arch_.in_channels) * arch_.in_height * arch_.in_width;
  }
  const std::vector<ConvGeom>& shared() const { return shared_; }
  const BranchGeom& q_branch() const { return q_; }
  const BranchGeom& cls_branch() const { return cls_; }
  // One group per weight or bias tensor, for gradient checks.
  const std::vector<ParamGroup>& groups() const { return groups_; }

 private:
  ArchSpec arch_;
  std::vector<ConvGeom> shared_;
  BranchGeom q_, cls_;
  std::vector<ParamGroup> groups_;
  std::size_t num_params_ = 0;
};

struct Heads {
  bool q = true;
  bool cls = false;
};

template <typename T>
struct ConvCache {
  Mat<T> cols;  // im2col of the layer input
  Mat<T> out;   // post-ReLU output
};

template <typename T>
struct BranchCache {
  std::vector<ConvCache<T>> convs;
  std::vector<Mat<T>> dense_in;   // input to each dense layer
  std::vector<Mat<T>> dense_out;  // output of each dense layer (post-activation)
};

template <typename T>
struct ForwardPass {
  int batch = 0;
  Mat<T> q;       // [num_actions, batch]
  Mat<T> logits;  // [num_classes, batch]
  Mat<T> input;
  std::vector<ConvCache<T>> shared;
  BranchCache<T> q_cache, cls_cache;
  bool cached = false;
};

// Builds the [C, N*H*W] input matrix from N CHW-ordered 8-bit observations,
// scaling to [0, 1].
template <typename T>
Mat<T> make_input(const Layout& layout, std::span<const std::uint8_t* const> observations);

template <typename T>
ForwardPass<T> forward(const Layout& layout, std::span<const T> params, Mat<T> input, int batch,
                       Heads heads, bool keep_cache);

// Accumulates dLoss/dparams into grad. Either head gradient may be null.
template <typename T>
void backward(const Layout& layout, std::span<const T> params, const ForwardPass<T>& pass,
              const Mat<T>* d_q, const Mat<T>* d_logits, std::span<T> grad);

// He-normal weights, zero biases.
template <typename T>
void init_params(const Layout& layout, std::span<T> params, std::mt19937_64& rng);

}  // namespace omnidrl::nn
