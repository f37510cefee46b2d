#include "fedsp/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <new>
#include <sstream>
#include <unordered_set>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace fedsp {

namespace {

std::atomic<std::uint64_t> next_tensor_id{1};
thread_local bool grad_mode = true;

#if defined(__GLIBC__)
// Activation buffers are a few hundred KiB and churn every op. Keeping them in
// the heap instead of fresh mmap regions avoids a page-fault storm per step.
[[maybe_unused]] const bool heap_tuned = [] {
  mallopt(M_MMAP_THRESHOLD, 64 << 20);
  mallopt(M_TRIM_THRESHOLD, 256 << 20);
  mallopt(M_TOP_PAD, 64 << 20);
  return true;
}();
#endif

// Cache-line aligned storage. Vectorised kernels peel scalar iterations
// until the first aligned element, and the peeled path rounds differently;
// a fixed base alignment makes every result independent of where the heap
// happened to place a buffer.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }
  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

using Storage = std::vector<double, AlignedAllocator<double>>;

}  // namespace

std::size_t numel_of(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

struct Tensor::Impl {
  Shape shape;
  Storage data;
  Storage grad;
  bool requires_grad = false;
  std::uint64_t id = 0;
  std::string name;
};

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return filled(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::filled(Shape shape, double value, bool requires_grad) {
  auto n = numel_of(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (numel_of(shape) != values.size()) {
    throw ShapeError("tensor", "shape " + shape_str(shape) + " needs " + std::to_string(numel_of(shape)) +
                                   " values, got " + std::to_string(values.size()));
  }
  auto impl = std::make_shared<Impl>();
  impl->shape = std::move(shape);
  impl->data.assign(values.begin(), values.end());
  impl->requires_grad = requires_grad;
  impl->id = next_tensor_id.fetch_add(1, std::memory_order_relaxed);
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({}, {value}, requires_grad); }

Tensor::Impl& Tensor::impl() const {
  if (!impl_) throw std::logic_error("access to null tensor");
  return *impl_;
}

const Shape& Tensor::shape() const { return impl().shape; }
std::size_t Tensor::numel() const { return impl().data.size(); }
std::span<const double> Tensor::data() const { return impl().data; }
std::span<double> Tensor::mutable_data() const { return impl().data; }

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item", "expected one element, shape " + shape_str(shape()));
  return impl().data[0];
}

bool Tensor::requires_grad() const { return impl().requires_grad; }
void Tensor::set_requires_grad(bool flag) const { impl().requires_grad = flag; }

bool Tensor::has_grad() const { return !impl().grad.empty() || (numel() == 0 && impl().requires_grad); }
std::span<const double> Tensor::grad() const { return impl().grad; }
std::span<double> Tensor::mutable_grad() const { return impl().grad; }

std::span<double> Tensor::ensure_grad() const {
  auto& im = impl();
  if (im.grad.size() != im.data.size()) im.grad.assign(im.data.size(), 0.0);
  return im.grad;
}

void Tensor::zero_grad() const {
  auto& g = impl().grad;
  std::fill(g.begin(), g.end(), 0.0);
}

void Tensor::clear_grad() const {
  impl().grad.clear();
  impl().grad.shrink_to_fit();
}

std::uint64_t Tensor::id() const { return impl().id; }
const std::string& Tensor::name() const { return impl().name; }
void Tensor::set_name(std::string name) const { impl().name = std::move(name); }

Tensor Tensor::clone() const {
  auto t = from(shape(), std::vector<double>(impl().data.begin(), impl().data.end()), requires_grad());
  t.set_name(name());
  return t;
}

Tensor Tensor::detach() const {
  return from(shape(), std::vector<double>(impl().data.begin(), impl().data.end()), false);
}

Tape& Tape::active() {
  thread_local Tape tape;
  return tape;
}

void Tape::record(const char* op, std::vector<Tensor> inputs, Tensor output, BackwardFn fn) {
  output.set_requires_grad(true);
  entries_.push_back(Entry{op, std::move(inputs), std::move(output), std::move(fn)});
}

bool Tape::contains(const Tensor& t) const {
  return std::any_of(entries_.begin(), entries_.end(),
                     [&](const Entry& e) { return e.output.same_storage(t); });
}

void Tape::backward(const Tensor& loss) {
  if (!loss) throw std::invalid_argument("backward: null loss");
  if (loss.numel() != 1 || loss.rank() != 0) {
    throw ShapeError("backward", "loss must be a scalar, got shape " + shape_str(loss.shape()));
  }
  if (entries_.empty() || !contains(loss)) {
    throw std::invalid_argument("backward: loss is not on the active tape");
  }

  std::unordered_set<std::uint64_t> seen;
  auto reset = [&](const Tensor& t) {
    if (t.requires_grad() && seen.insert(t.id()).second) {
      t.ensure_grad();
      t.zero_grad();
    }
  };
  for (const auto& e : entries_) {
    for (const auto& in : e.inputs) reset(in);
    reset(e.output);
  }

  loss.mutable_grad()[0] = 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    it->backward();
  }
  entries_.clear();
}

void backward(const Tensor& loss) { Tape::active().backward(loss); }

NoGradGuard::NoGradGuard() : previous_(grad_mode) { grad_mode = false; }
NoGradGuard::~NoGradGuard() { grad_mode = previous_; }

bool grad_enabled() { return grad_mode; }

}  // namespace fedsp
