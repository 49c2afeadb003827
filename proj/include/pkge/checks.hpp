#pragma once

// Finite-difference checks of every training loss at random parameter
// points. Shared by the grad-check subcommand and the acceptance binary.

#include <string>
#include <vector>

#include "pkge/baselines.hpp"
#include "pkge/trainer.hpp"

namespace pkge {

struct LossCheck {
  std::string loss;
  int point = 0;
  double max_rel_error = 0.0;
  std::size_t coords = 0;
  bool passed = false;
};

namespace detail {

// Flat view over every PkgModel parameter the losses can touch.
struct PkgPacker {
  PkgModel* m;

  std::vector<std::span<double>> blocks() const {
    std::vector<std::span<double>> out;
    for (auto* t : {&m->z_in, &m->z_buy_out, &m->z_view_out, &m->words, &m->categories}) out.push_back(t->values.flat());
    for (auto task : {Task::complement, Task::co_view, Task::search, Task::describe}) {
      for (auto b : m->attention(task).blocks()) out.push_back(b);
    }
    return out;
  }

  Vec pack() const {
    Vec out;
    for (auto b : blocks()) out.insert(out.end(), b.begin(), b.end());
    return out;
  }

  void unpack(std::span<const double> x) const {
    std::size_t o = 0;
    for (auto b : blocks()) {
      std::copy(x.begin() + o, x.begin() + o + b.size(), b.begin());
      o += b.size();
    }
  }

  std::size_t offset_of(const std::string& table) const {
    std::size_t o = 0;
    for (auto* t : {&m->z_in, &m->z_buy_out, &m->z_view_out, &m->words, &m->categories}) {
      if (t->name == table) return o;
      o += t->values.flat().size();
    }
    throw UsageError("no table " + table);
  }

  std::size_t offset_of(Task task) const {
    std::size_t o = 0;
    for (auto* t : {&m->z_in, &m->z_buy_out, &m->z_view_out, &m->words, &m->categories}) o += t->values.flat().size();
    for (auto t : {Task::complement, Task::co_view, Task::search, Task::describe}) {
      if (t == task) return o;
      o += m->attention(t).parameter_count();
    }
    throw UsageError("no attention block");
  }

  Vec gradient(const StepGrads& g, Task task) const {
    Vec out(pack().size(), 0.0);
    const std::size_t d = m->dim();
    for (const auto& [name, slice] : g.tables) {
      const auto base = offset_of(name);
      for (std::size_t k = 0; k < slice.size(); ++k) {
        auto row = slice.grad(k);
        std::copy(row.begin(), row.end(), out.begin() + base + slice.rows()[k] * d);
      }
    }
    if (g.attention) {
      auto o = offset_of(task);
      for (auto b : g.attention->blocks()) {
        std::copy(b.begin(), b.end(), out.begin() + o);
        o += b.size();
      }
    }
    return out;
  }
};

inline void randomize(PkgModel& m, Rng& rng) {
  for (auto* t : {&m.z_in, &m.z_buy_out, &m.z_view_out, &m.words}) {
    for (Index r = 1; r < t->rows(); ++r) {
      for (auto& v : t->row(r)) v = rng.uniform(-0.6, 0.6);
    }
  }
  for (Index r = 1; r < m.categories.rows(); ++r) {
    for (auto& v : m.categories.row(r)) v = rng.uniform(-0.4, 0.4);
  }
  for (auto task : {Task::complement, Task::co_view, Task::search, Task::describe}) {
    auto& p = m.attention(task);
    for (auto& v : p.positions.flat()) v = rng.uniform(-0.3, 0.3);
    for (auto* th : {&p.theta1, &p.theta2}) {
      for (auto& v : th->flat()) v += rng.uniform(-0.3, 0.3);
    }
    for (auto* b : {&p.bias1, &p.bias2}) {
      for (auto& v : *b) v = rng.uniform(-0.2, 0.2);
    }
  }
}

}  // namespace detail

/// Runs every loss at `points` random parameter settings.
inline std::vector<LossCheck> check_all_gradients(std::uint64_t seed = 7, int points = 3) {
  std::vector<LossCheck> out;
  Rng rng(seed);
  const SequenceLengths lengths{6, 6, 6, 6};
  auto record = [&](const std::string& name, int point, const GradCheckReport& rep) {
    out.push_back({name, point, rep.max_rel_error, rep.checked, rep.passed()});
  };

  for (int point = 0; point < points; ++point) {
    auto m = PkgModel::init(8, 9, 8, 4, lengths, derive_seed(seed, static_cast<std::uint64_t>(point)));
    detail::randomize(m, rng);
    detail::PkgPacker pk{&m};
    const Vec theta = pk.pack();
    const Matrix frozen = m.categories.values;
    auto check = [&](const std::string& name, Task task, const std::function<StepGrads()>& loss,
                     bool categories_fixed = false) {
      auto g = loss();
      auto analytic = pk.gradient(g, task);
      auto rep = grad_check(
          [&](std::span<const double> x) {
            pk.unpack(x);
            if (categories_fixed) m.categories.values = frozen;
            const double f = loss().loss;
            pk.unpack(theta);
            return f;
          },
          theta, analytic);
      record(name, point, rep);
    };

    const Index n1[] = {3, 4, 6}, n2[] = {5, 7, 3};
    check("substitute", Task::substitute, [&] { return substitution_loss({1, 2}, m.z_in, n1, n2); });

    const Index item_negs[] = {1, 4, 6};
    const SeqExample items{{2, 5, 7, 5}, 3};
    check("complement", Task::complement, [&] { return relation_loss(items, Task::complement, m, item_negs); });
    check("co_view", Task::co_view, [&] { return relation_loss(items, Task::co_view, m, item_negs); });
    const SeqExample words{{1, 8, 4}, 3};
    check("search", Task::search, [&] { return relation_loss(words, Task::search, m, item_negs); });
    check("describe", Task::describe, [&] { return relation_loss(words, Task::describe, m, item_negs); });

    const IsaExample isa{2, {3, 1}};
    const std::vector<std::vector<Index>> isa_negs{{2, 5, 7}, {4, 6, 2}};
    check("isa", Task::isa, [&] { return isa_task_loss(isa, m, isa_negs); }, true);

    const Index cat_negs[] = {1, 4, 6};
    check("category_hierarchy", Task::isa, [&] {
      auto r = hierarchy_pair_loss(m.categories, {2, 5}, cat_negs);
      StepGrads s{r.loss, TableGradSet(m.dim()), std::nullopt};
      auto& slice = s.tables.for_table(kCategories);
      for (std::size_t k = 0; k < r.grads.size(); ++k) slice.add(r.grads.rows()[k], r.grads.grad(k));
      return s;
    });
  }

  for (auto v : kAllKgVariants) {
    for (auto norm : {KgNorm::l2, KgNorm::l1}) {
      if (norm == KgNorm::l1 && !is_translational(v)) continue;
      for (int point = 0; point < points; ++point) {
        auto m = init_kg(v, 7, {"r0", "r1"}, 4, derive_seed(seed, 100 + static_cast<std::uint64_t>(point)), norm);
        const KgTriple pos{1, 1, 2};
        const std::vector<KgTriple> negs{{1, 1, 4}, {5, 1, 2}, {3, 1, 6}};
        const double gamma = 10.0;  // every hinge active
        auto blocks = m.blocks();
        auto pack = [&] {
          Vec x;
          for (auto& [n, b] : blocks) x.insert(x.end(), b->flat().begin(), b->flat().end());
          return x;
        };
        const Vec theta = pack();
        auto l = margin_loss(m, pos, negs, gamma);
        Vec analytic;
        for (auto& [n, b] : blocks) {
          Vec part(b->flat().size(), 0.0);
          if (auto it = l.grads.slices().find(n); it != l.grads.slices().end()) {
            for (std::size_t k = 0; k < it->second.size(); ++k) {
              auto g = it->second.grad(k);
              std::copy(g.begin(), g.end(), part.begin() + it->second.rows()[k] * b->cols());
            }
          }
          analytic.insert(analytic.end(), part.begin(), part.end());
        }
        auto rep = grad_check(
            [&](std::span<const double> x) {
              KgModel c = m;
              std::size_t o = 0;
              for (auto& [n, b] : c.blocks()) {
                auto f = b->flat();
                std::copy(x.begin() + o, x.begin() + o + f.size(), f.begin());
                o += f.size();
              }
              return margin_loss(c, pos, negs, gamma).loss;
            },
            theta, analytic);
        record(std::string(to_string(v)) + (is_translational(v) ? (norm == KgNorm::l1 ? "/l1" : "/l2") : ""), point,
               rep);
      }
    }
  }
  return out;
}

}  // namespace pkge
