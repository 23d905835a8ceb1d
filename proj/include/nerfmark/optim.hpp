#pragma once

// Adam with bias correction over named parameter collections.

#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "nerfmark/tensor.hpp"

namespace nerfmark {

struct AdamConfig {
  float learning_rate = 3.16227766e-5f;  // 10^-4.5
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

// A parameter watched for one optimization step: the owning tensor plus the
// node id it had on the step's tape.
struct ParamRef {
  std::string name;
  Tensor* value = nullptr;
  int node = -1;
};

// Model parameter plumbing. Models expose
//   template <class F> void visit_params(F&& fn)   with fn(name, Tensor&).

template <class Model>
std::vector<ParamRef> watch_params(Model& model, GradTape& tape, const std::string& prefix = "") {
  std::vector<ParamRef> refs;
  model.visit_params([&](const std::string& name, Tensor& t) {
    tape.watch(t);
    refs.push_back(ParamRef{prefix + name, &t, t.node()});
  });
  return refs;
}

template <class Model>
void export_params(Model& model, std::unordered_map<std::string, Tensor>& out,
                   const std::string& prefix = "") {
  model.visit_params([&](const std::string& name, Tensor& t) { out[prefix + name] = t.clone(); });
}

template <class Model>
void import_params(Model& model, const std::unordered_map<std::string, Tensor>& in,
                   const std::string& prefix = "") {
  model.visit_params([&](const std::string& name, Tensor& t) {
    auto it = in.find(prefix + name);
    if (it == in.end()) throw std::runtime_error("missing parameter in checkpoint: " + prefix + name);
    if (it->second.shape() != t.shape())
      detail::fail_shapes("import_params", "shape mismatch for " + prefix + name,
                          it->second.shape(), t.shape());
    t.data() = it->second.data();
  });
}

class Adam {
 public:
  Adam() = default;
  explicit Adam(AdamConfig config) : config_(config) {}

  AdamConfig& config() { return config_; }
  const AdamConfig& config() const { return config_; }
  std::int64_t step_count() const { return t_; }

  // Applies one update. Parameters without a gradient in `grads` are treated
  // as having zero gradient (their moments still decay).
  void step(const std::vector<ParamRef>& params, const GradTape::GradMap& grads) {
    t_ += 1;
    const double bc1 = 1.0 - std::pow(static_cast<double>(config_.beta1), static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(static_cast<double>(config_.beta2), static_cast<double>(t_));
    for (const ParamRef& p : params) {
      Tensor& theta = *p.value;
      Moments& mom = slot(p.name, theta.shape());
      if (mom.m.size() != theta.size())
        detail::fail_shapes("adam_step", "state shape mismatch for " + p.name, mom.m.shape(),
                            theta.shape());
      const Tensor* g = nullptr;
      auto it = grads.find(p.node);
      if (it != grads.end()) {
        if (it->second.size() != theta.size())
          detail::fail_shapes("adam_step", "gradient shape mismatch for " + p.name,
                              it->second.shape(), theta.shape());
        g = &it->second;
      }
      float* th = theta.ptr();
      float* m = mom.m.ptr();
      float* v = mom.v.ptr();
      for (std::size_t i = 0; i < theta.size(); ++i) {
        const float gi = g ? (*g)[i] : 0.0f;
        m[i] = config_.beta1 * m[i] + (1.0f - config_.beta1) * gi;
        v[i] = config_.beta2 * v[i] + (1.0f - config_.beta2) * gi * gi;
        const double mhat = static_cast<double>(m[i]) / bc1;
        const double vhat = static_cast<double>(v[i]) / bc2;
        th[i] = static_cast<float>(th[i] - static_cast<double>(config_.learning_rate) * mhat /
                                               (std::sqrt(vhat) + config_.eps));
      }
    }
  }

  // State export/import for checkpointing; tensors are keyed
  // "<param>.m" / "<param>.v" plus the scalar "t".
  void export_state(std::unordered_map<std::string, Tensor>& out, const std::string& prefix) const {
    for (const auto& [name, mom] : state_) {
      out[prefix + name + ".m"] = mom.m;
      out[prefix + name + ".v"] = mom.v;
    }
    out[prefix + "t"] = Tensor::scalar(static_cast<float>(t_));
  }

  void import_state(const std::unordered_map<std::string, Tensor>& in, const std::string& prefix) {
    state_.clear();
    t_ = 0;
    auto it = in.find(prefix + "t");
    if (it != in.end()) t_ = static_cast<std::int64_t>(it->second.item());
    for (const auto& [key, tensor] : in) {
      if (key.size() <= prefix.size() + 2 || key.compare(0, prefix.size(), prefix) != 0) continue;
      const std::string tail = key.substr(prefix.size());
      if (tail == "t") continue;
      const bool is_m = tail.size() > 2 && tail.compare(tail.size() - 2, 2, ".m") == 0;
      const bool is_v = tail.size() > 2 && tail.compare(tail.size() - 2, 2, ".v") == 0;
      if (!is_m && !is_v) continue;
      const std::string name = tail.substr(0, tail.size() - 2);
      Moments& mom = state_[name];
      if (is_m)
        mom.m = tensor.clone();
      else
        mom.v = tensor.clone();
    }
  }

 private:
  struct Moments {
    Tensor m, v;
  };

  Moments& slot(const std::string& name, const Shape& shape) {
    auto it = state_.find(name);
    if (it == state_.end()) {
      Moments mom{Tensor::zeros(shape), Tensor::zeros(shape)};
      it = state_.emplace(name, std::move(mom)).first;
    }
    return it->second;
  }

  AdamConfig config_;
  std::int64_t t_ = 0;
  std::unordered_map<std::string, Moments> state_;
};

}  // namespace nerfmark
