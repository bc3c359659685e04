#include "fedpull/dynpull.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "fedpull/rng.hpp"

namespace fedpull {

std::string_view to_string(PullMode m) {
  switch (m) {
    case PullMode::full:
      return "full";
    case PullMode::dp_greater:
      return "dp_greater";
    case PullMode::dp_less:
      return "dp_less";
    case PullMode::random:
      return "random";
  }
  return "full";
}

std::string_view to_string(PullScope s) {
  return s == PullScope::pull_only ? "pull_only" : "push_and_pull";
}

std::string_view to_string(Direction d) {
  return d == Direction::pull ? "pull" : "push";
}

PullMode pull_mode_from_string(std::string_view s) {
  for (auto m : {PullMode::full, PullMode::dp_greater, PullMode::dp_less,
                 PullMode::random})
    if (to_string(m) == s) return m;
  throw Error("unknown pull mode '" + std::string(s) + "'");
}

PullScope pull_scope_from_string(std::string_view s) {
  if (s == "pull_only") return PullScope::pull_only;
  if (s == "push_and_pull") return PullScope::push_and_pull;
  throw Error("unknown pull scope '" + std::string(s) + "'");
}

void PullPolicy::validate() const {
  if (!(kept_fraction > 0.0 && kept_fraction <= 1.0))
    throw Error("kept_fraction must be in (0, 1], got " +
                std::to_string(kept_fraction));
}

std::vector<DeltaRecord> tensor_deltas(const ModelState& current,
                                       const ModelState& snapshot) {
  std::vector<std::string> missing;
  for (const auto& [name, _] : current.tensors)
    if (!snapshot.tensors.contains(name)) missing.push_back(name);
  for (const auto& [name, _] : snapshot.tensors)
    if (!current.tensors.contains(name)) missing.push_back(name);
  if (!missing.empty()) {
    std::string msg = "tensor name sets differ:";
    for (const auto& n : missing) msg += " " + n;
    throw Error(msg);
  }

  std::vector<const NamedTensor*> cur, snap;
  for (const auto& [name, t] : current.tensors) {
    cur.push_back(&t);
    snap.push_back(&snapshot.tensors.at(name));
  }
  std::vector<DeltaRecord> out(cur.size());
  const auto n = static_cast<std::ptrdiff_t>(cur.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const auto& a = *cur[static_cast<std::size_t>(i)];
    const auto& b = *snap[static_cast<std::size_t>(i)];
    out[static_cast<std::size_t>(i)] =
        DeltaRecord{a.name(), l1_norm(diff(a, b)), a.numel(), a.group()};
  }
  std::sort(out.begin(), out.end(), [](const auto& x, const auto& y) {
    if (x.group != y.group) return x.group < y.group;
    return x.name < y.name;
  });
  return out;
}

std::size_t kept_count(double fraction, std::size_t total) {
  if (total == 0) return 0;
  // The small slack keeps e.g. (1/3) * 3 from rounding up to 2.
  const double raw = std::ceil(fraction * static_cast<double>(total) - 1e-9);
  const auto k = static_cast<std::size_t>(std::max(raw, 1.0));
  return std::min(k, total);
}

GroupSelection select_threshold(std::span<const DeltaRecord> group_deltas,
                                double fraction, PullMode mode) {
  if (group_deltas.empty()) throw Error("select_threshold: empty group");
  if (mode != PullMode::dp_greater && mode != PullMode::dp_less)
    throw Error("select_threshold needs a dp mode");
  std::vector<const DeltaRecord*> order;
  order.reserve(group_deltas.size());
  for (const auto& d : group_deltas) order.push_back(&d);
  const bool greater = mode == PullMode::dp_greater;
  std::sort(order.begin(), order.end(), [greater](const auto* a, const auto* b) {
    if (a->norm != b->norm) return greater ? a->norm > b->norm : a->norm < b->norm;
    return a->name < b->name;
  });
  const std::size_t k = kept_count(fraction, order.size());
  GroupSelection sel;
  sel.threshold = order[k - 1]->norm;
  for (std::size_t i = 0; i < k; ++i) sel.kept.push_back(order[i]->name);
  std::sort(sel.kept.begin(), sel.kept.end());
  return sel;
}

namespace {

std::vector<std::string> random_pick(std::vector<std::string> names,
                                     double fraction, std::uint64_t seed) {
  std::sort(names.begin(), names.end());
  const std::size_t k = kept_count(fraction, names.size());
  Rng rng(seed);
  // Partial Fisher-Yates: the first k slots become the sample.
  for (std::size_t i = 0; i < k; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.below(names.size() - i));
    std::swap(names[i], names[j]);
  }
  names.resize(k);
  std::sort(names.begin(), names.end());
  return names;
}

}  // namespace

SelectionResult select_from_deltas(std::vector<DeltaRecord> deltas,
                                   const PullPolicy& policy) {
  policy.validate();
  std::sort(deltas.begin(), deltas.end(), [](const auto& x, const auto& y) {
    if (x.group != y.group) return x.group < y.group;
    return x.name < y.name;
  });
  SelectionResult r;
  std::set<std::string> kept;
  if (policy.mode == PullMode::full) {
    for (const auto& d : deltas) kept.insert(d.name);
  } else {
    for (auto g : {Group::encoder, Group::decoder, Group::shared}) {
      std::vector<DeltaRecord> group;
      for (const auto& d : deltas)
        if (d.group == g) group.push_back(d);
      if (group.empty()) continue;
      if (policy.mode == PullMode::random) {
        std::vector<std::string> names;
        for (const auto& d : group) names.push_back(d.name);
        for (auto& n : random_pick(std::move(names), policy.kept_fraction,
                                   mix_seed(policy.seed,
                                            static_cast<std::uint64_t>(g))))
          kept.insert(std::move(n));
      } else {
        auto sel = select_threshold(group, policy.kept_fraction, policy.mode);
        r.thresholds[g] = sel.threshold;
        kept.insert(sel.kept.begin(), sel.kept.end());
      }
    }
  }
  for (const auto& d : deltas) {
    if (kept.contains(d.name))
      r.kept.push_back(d.name);
    else
      r.dropped.push_back(d.name);
  }
  std::sort(r.kept.begin(), r.kept.end());
  std::sort(r.dropped.begin(), r.dropped.end());
  r.deltas = std::move(deltas);
  return r;
}

SelectionResult select_dp(const ModelState& current,
                          const std::optional<ModelState>& snapshot,
                          const PullPolicy& policy) {
  if (!snapshot) throw Error("no previous round");
  return select_from_deltas(tensor_deltas(current, *snapshot), policy);
}

SelectionResult select_all(const ModelState& model) {
  SelectionResult r;
  r.kept = model.names();
  return r;
}

std::vector<TensorSpec> manifest(const ModelState& model) {
  std::vector<TensorSpec> out;
  out.reserve(model.tensors.size());
  for (const auto& [name, t] : model.tensors) out.push_back({name, t.shape()});
  return out;
}

BandwidthRecord bandwidth(std::span<const std::string> kept,
                          std::span<const TensorSpec> manifest,
                          Direction direction) {
  std::map<std::string_view, const TensorSpec*> by_name;
  BandwidthRecord rec;
  rec.direction = direction;
  for (const auto& spec : manifest) {
    by_name.emplace(spec.name, &spec);
    rec.params_total += shape_numel(spec.shape);
  }
  for (const auto& name : kept) {
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw Error("bandwidth: unknown tensor '" + name + "'");
    const auto n = shape_numel(it->second->shape);
    rec.params_sent += n;
    rec.bytes_sent += serialized_size(name, it->second->shape.size(), n);
  }
  return rec;
}

BandwidthRecord bandwidth(const SelectionResult& selection,
                          const ModelState& model, Direction direction) {
  const auto m = manifest(model);
  return bandwidth(selection.kept, m, direction);
}

double jaccard(std::span<const std::string> a, std::span<const std::string> b) {
  std::set<std::string> sa(a.begin(), a.end()), sb(b.begin(), b.end());
  if (sa.empty() && sb.empty()) return 1.0;
  std::size_t inter = 0;
  for (const auto& x : sa) inter += sb.contains(x) ? 1 : 0;
  const std::size_t uni = sa.size() + sb.size() - inter;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

std::vector<double> cluster_persistence(
    std::span<const std::vector<std::string>> kept_per_round) {
  if (kept_per_round.size() < 2)
    throw Error("cluster_persistence needs at least two rounds");
  std::vector<double> out;
  for (std::size_t r = 0; r + 1 < kept_per_round.size(); ++r)
    out.push_back(jaccard(kept_per_round[r], kept_per_round[r + 1]));
  return out;
}

}  // namespace fedpull
