#pragma once

#include "tristream/autodiff.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

namespace tristream {

using Rng = std::mt19937_64;

std::string save_rng(const Rng& rng);
void load_rng(Rng& rng, const std::string& state);

// Named trainable arrays. Entries are never removed, so indices are stable
// handles. Copies are deep: the copy owns fresh leaves with equal values.
class ParameterStore {
 public:
  struct Entry {
    std::string name;
    ad::Var var;
    ad::Matrix grad;
  };

  ParameterStore() = default;
  ParameterStore(const ParameterStore& other);
  ParameterStore& operator=(const ParameterStore& other);
  ParameterStore(ParameterStore&&) noexcept = default;
  ParameterStore& operator=(ParameterStore&&) noexcept = default;

  std::size_t add(const std::string& name, ad::Matrix init);
  std::size_t index_of(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  const ad::Var& var(std::size_t i) const { return entries_.at(i).var; }
  const ad::Var& var(const std::string& name) const { return var(index_of(name)); }
  ad::Matrix& value(std::size_t i) { return entries_.at(i).var.mutable_value(); }
  const ad::Matrix& value(std::size_t i) const { return entries_.at(i).var.value(); }
  ad::Matrix& grad(std::size_t i) { return entries_.at(i).grad; }
  const ad::Matrix& grad(std::size_t i) const { return entries_.at(i).grad; }

  std::size_t size() const { return entries_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<ad::Var> vars() const;
  std::vector<std::size_t> indices_with_prefix(const std::string& prefix) const;
  std::size_t scalar_count() const;
  std::size_t scalar_count(const std::vector<std::size_t>& subset) const;

  void zero_grad();
  // Stores gradients in the slots, in entry order.
  void set_grads(const std::vector<ad::Var>& grads);

  // Flat views over a subset of entries, in the order given.
  Eigen::VectorXd flatten(const std::vector<std::size_t>& subset) const;
  Eigen::VectorXd flatten_grads(const std::vector<std::size_t>& subset) const;
  void assign(const std::vector<std::size_t>& subset, const Eigen::VectorXd& flat);

  std::uint64_t seed = 0;

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace tristream
