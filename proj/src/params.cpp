#include "tristream/params.hpp"

#include <sstream>
#include <stdexcept>

namespace tristream {

std::string save_rng(const Rng& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

void load_rng(Rng& rng, const std::string& state) {
  std::istringstream is(state);
  is >> rng;
  if (!is) throw std::runtime_error("corrupt random-generator state");
}

ParameterStore::ParameterStore(const ParameterStore& other) : seed(other.seed), index_(other.index_) {
  entries_.reserve(other.entries_.size());
  for (const auto& e : other.entries_) entries_.push_back({e.name, ad::Var(e.var.value(), true), e.grad});
}

ParameterStore& ParameterStore::operator=(const ParameterStore& other) {
  if (this != &other) {
    ParameterStore copy(other);
    *this = std::move(copy);
  }
  return *this;
}

std::size_t ParameterStore::add(const std::string& name, ad::Matrix init) {
  if (index_.count(name)) throw std::invalid_argument("duplicate parameter name '" + name + "'");
  const std::size_t i = entries_.size();
  ad::Matrix g = ad::Matrix::Zero(init.rows(), init.cols());
  entries_.push_back({name, ad::Var(std::move(init), true), std::move(g)});
  index_.emplace(name, i);
  return i;
}

std::size_t ParameterStore::index_of(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  return it->second;
}

std::vector<ad::Var> ParameterStore::vars() const {
  std::vector<ad::Var> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.var);
  return out;
}

std::vector<std::size_t> ParameterStore::indices_with_prefix(const std::string& prefix) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].name.compare(0, prefix.size(), prefix) == 0) out.push_back(i);
  }
  return out;
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += static_cast<std::size_t>(e.var.value().size());
  return n;
}

std::size_t ParameterStore::scalar_count(const std::vector<std::size_t>& subset) const {
  std::size_t n = 0;
  for (std::size_t i : subset) n += static_cast<std::size_t>(entries_.at(i).var.value().size());
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& e : entries_) e.grad.setZero();
}

void ParameterStore::set_grads(const std::vector<ad::Var>& grads) {
  if (grads.size() != entries_.size()) throw std::invalid_argument("gradient count differs from parameter count");
  for (std::size_t i = 0; i < grads.size(); ++i) entries_[i].grad = grads[i].value();
}

Eigen::VectorXd ParameterStore::flatten(const std::vector<std::size_t>& subset) const {
  Eigen::VectorXd out(static_cast<Eigen::Index>(scalar_count(subset)));
  Eigen::Index at = 0;
  for (std::size_t i : subset) {
    const auto& v = entries_.at(i).var.value();
    out.segment(at, v.size()) = Eigen::Map<const Eigen::VectorXd>(v.data(), v.size());
    at += v.size();
  }
  return out;
}

Eigen::VectorXd ParameterStore::flatten_grads(const std::vector<std::size_t>& subset) const {
  Eigen::VectorXd out(static_cast<Eigen::Index>(scalar_count(subset)));
  Eigen::Index at = 0;
  for (std::size_t i : subset) {
    const auto& g = entries_.at(i).grad;
    out.segment(at, g.size()) = Eigen::Map<const Eigen::VectorXd>(g.data(), g.size());
    at += g.size();
  }
  return out;
}

void ParameterStore::assign(const std::vector<std::size_t>& subset, const Eigen::VectorXd& flat) {
  if (static_cast<std::size_t>(flat.size()) != scalar_count(subset)) {
    throw std::invalid_argument("flat parameter vector has the wrong length");
  }
  Eigen::Index at = 0;
  for (std::size_t i : subset) {
    auto& v = entries_.at(i).var.mutable_value();
    Eigen::Map<Eigen::VectorXd>(v.data(), v.size()) = flat.segment(at, v.size());
    at += v.size();
  }
}

}  // namespace tristream
