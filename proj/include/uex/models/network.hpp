#pragma once

#include <memory>
#include <span>
#include <vector>

#include "uex/core/dual.hpp"
#include "uex/core/tensor.hpp"
#include "uex/models/layout.hpp"

namespace uex {

/// Activations recorded by a forward pass, consumed by backward.
template <class T>
struct Tape {
  std::vector<Tensor<T>> acts;
  Tensor<T> features;  // penultimate layer [N, D]
  Tensor<T> logits;    // [N, K]
};

/// A classifier over a flat parameter vector. Parameters are passed in on every
/// call, so one Network object serves any number of parameter states.
/// Instantiated for float, double, Dual<float> and Dual<double>.
template <class T>
class Network {
 public:
  virtual ~Network() = default;

  const ParamLayout& layout() const { return layout_; }
  int classes() const { return classes_; }

  virtual Tape<T> forward(std::span<const T> params, const Tensor<T>& x) const = 0;

  /// Accumulates d(loss)/d(params) into `gparams`; writes d(loss)/d(x) when `gx` is set.
  virtual void backward(std::span<const T> params, const Tape<T>& tape, const Tensor<T>& dlogits,
                        std::span<T> gparams, Tensor<T>* gx) const = 0;

 protected:
  Network(ParamLayout layout, int classes) : layout_(std::move(layout)), classes_(classes) {}

  ParamLayout layout_;
  int classes_;
};

template <class T>
std::unique_ptr<Network<T>> make_network(const ArchSpec& arch, int head_classes);

/// Mean softmax cross-entropy against soft targets [N, K]. Writes d(loss)/d(logits)
/// when `dlogits` is non-null.
template <class T>
T softmax_cross_entropy(const Tensor<T>& logits, const Tensor<T>& targets, Tensor<T>* dlogits);

template <class T>
Tensor<T> one_hot(std::span<const int> labels, int classes);

template <class T>
struct LossGrad {
  T loss{};
  std::vector<T> gparams;
  Tensor<T> ginput;  // empty unless requested
  Tensor<T> logits;
};

template <class T>
LossGrad<T> loss_and_grad(const Network<T>& net, std::span<const T> params, const Tensor<T>& x,
                          const Tensor<T>& targets, bool want_input_grad);

extern template class Network<float>;
extern template class Network<double>;
extern template class Network<Dual<float>>;
extern template class Network<Dual<double>>;

}  // namespace uex
