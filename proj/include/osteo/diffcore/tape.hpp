#pragma once

#include <functional>
#include <vector>

#include "osteo/diffcore/tensor.hpp"

namespace osteo::diffcore {

/// Ordered record of differentiable operations for one forward pass.
///
/// Operations are appended as they execute, so inputs always precede the
/// operations that consume them. backward() walks the record in reverse.
/// A tape only records while it is the active tape of the current thread
/// (see TapeScope); without one, every operation is a pure forward
/// computation.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  struct Entry {
    std::vector<Tensor> inputs;
    Tensor output;
    BackwardFn backward;
  };

  void record(std::vector<Tensor> inputs, Tensor output, BackwardFn fn);

  /// Seeds d(loss)/d(loss) = 1 and propagates to every reachable leaf that
  /// requires a gradient. Leaf gradients accumulate across calls.
  void backward(const Tensor& loss);

  void clear() { entries_.clear(); }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::vector<Entry>& entries() const { return entries_; }

 private:
  std::vector<Entry> entries_;
};

/// Makes `tape` the recording target of this thread for the scope lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

/// Suspends recording for the scope lifetime.
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

/// Free-function form of Tape::backward.
void backward(const Tensor& loss, Tape& tape);

/// True when an active tape exists and one of `inputs` requires a gradient.
bool should_record(std::initializer_list<const Tensor*> inputs);
bool should_record(const std::vector<Tensor>& inputs);

/// Turns `t` into a recorded (non-leaf) node that carries gradients.
void mark_interior(Tensor& t);

/// Records `output = op(inputs)` on the active tape if any input needs a
/// gradient. `fn` reads output.grad() and accumulates into input grads.
/// Used by every primitive and by module-specific custom operations.
void record_op(std::vector<Tensor> inputs, Tensor& output, Tape::BackwardFn fn);

}  // namespace osteo::diffcore
