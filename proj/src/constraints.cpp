#include "rw/constraints.hpp"

#include <algorithm>
#include <deque>
#include <set>
#include <tuple>

namespace rw {

void BindEnv::push_qual(std::vector<Qual> lowers, std::vector<Qual> uppers) {
  quals.push_back({std::move(lowers), std::move(uppers), (uint32_t)quals.size()});
}

void BindEnv::push_size(std::vector<Size> lowers, std::vector<Size> uppers) {
  sizes.push_back({std::move(lowers), std::move(uppers), (uint32_t)sizes.size()});
}

void BindEnv::push_type(Qual qualLower, Size sizeUpper, bool mayHaveCaps) {
  types.push_back({qualLower, std::move(sizeUpper), mayHaveCaps, (uint32_t)quals.size(),
                   (uint32_t)sizes.size()});
}

void BindEnv::push_quantifier(const Quantifier& q) {
  if (std::holds_alternative<LocQ>(q)) {
    push_loc();
  } else if (auto* sq = std::get_if<SizeQ>(&q)) {
    push_size(sq->lowers, sq->uppers);
  } else if (auto* qq = std::get_if<QualQ>(&q)) {
    push_qual(qq->lowers, qq->uppers);
  } else {
    const auto& tq = std::get<TypeQ>(q);
    push_type(tq.qualLower, tq.sizeUpper, tq.mayHaveCaps);
  }
}

std::vector<Qual> BindEnv::qual_lowers(uint32_t idx) const {
  if (idx >= quals.size()) return {};
  const auto& e = quals[quals.size() - 1 - idx];
  uint32_t d = (uint32_t)quals.size() - e.qdepth;
  std::vector<Qual> out;
  out.reserve(e.lowers.size());
  for (auto& q : e.lowers) out.push_back(shift(q, VarKind::Qual, d));
  return out;
}

std::vector<Qual> BindEnv::qual_uppers(uint32_t idx) const {
  if (idx >= quals.size()) return {};
  const auto& e = quals[quals.size() - 1 - idx];
  uint32_t d = (uint32_t)quals.size() - e.qdepth;
  std::vector<Qual> out;
  out.reserve(e.uppers.size());
  for (auto& q : e.uppers) out.push_back(shift(q, VarKind::Qual, d));
  return out;
}

std::vector<Size> BindEnv::size_lowers(uint32_t idx) const {
  if (idx >= sizes.size()) return {};
  const auto& e = sizes[sizes.size() - 1 - idx];
  uint32_t d = (uint32_t)sizes.size() - e.sdepth;
  std::vector<Size> out;
  out.reserve(e.lowers.size());
  for (auto& s : e.lowers) out.push_back(shift(s, VarKind::Size, d));
  return out;
}

std::vector<Size> BindEnv::size_uppers(uint32_t idx) const {
  if (idx >= sizes.size()) return {};
  const auto& e = sizes[sizes.size() - 1 - idx];
  uint32_t d = (uint32_t)sizes.size() - e.sdepth;
  std::vector<Size> out;
  out.reserve(e.uppers.size());
  for (auto& s : e.uppers) out.push_back(shift(s, VarKind::Size, d));
  return out;
}

std::optional<Qual> BindEnv::type_qual_lower(uint32_t idx) const {
  if (idx >= types.size()) return std::nullopt;
  const auto& e = types[types.size() - 1 - idx];
  return shift(e.qualLower, VarKind::Qual, (uint32_t)quals.size() - e.qdepth);
}

std::optional<Size> BindEnv::type_size_upper(uint32_t idx) const {
  if (idx >= types.size()) return std::nullopt;
  const auto& e = types[types.size() - 1 - idx];
  return shift(e.sizeUpper, VarKind::Size, (uint32_t)sizes.size() - e.sdepth);
}

std::optional<bool> BindEnv::type_may_have_caps(uint32_t idx) const {
  if (idx >= types.size()) return std::nullopt;
  return types[types.size() - 1 - idx].mayHaveCaps;
}

// ---------------------------------------------------------------------------
// qual_leq: BFS over the edge relation
//   Unr -> Lin,  lower(v) -> v,  v -> upper(v)

namespace {

// Node ids: 0 = Unr, 1 = Lin, 2+i = var i.
uint32_t qnode(const Qual& q) {
  switch (q.kind) {
    case Qual::Kind::Unr: return 0;
    case Qual::Kind::Lin: return 1;
    default: return 2 + q.index;
  }
}

}  // namespace

bool qual_leq(const BindEnv& env, const Qual& a, const Qual& b) {
  if (a == b) return true;
  uint32_t goal = qnode(b);
  std::set<uint32_t> seen;
  std::deque<Qual> work{a};
  seen.insert(qnode(a));
  auto visit = [&](const Qual& q) {
    if (seen.insert(qnode(q)).second) work.push_back(q);
  };
  while (!work.empty()) {
    Qual cur = work.front();
    work.pop_front();
    if (qnode(cur) == goal) return true;
    if (cur.kind == Qual::Kind::Unr) visit(Qual::lin());
    if (cur.is_var())
      for (auto& u : env.qual_uppers(cur.index)) visit(u);
    for (uint32_t i = 0; i < env.quals.size(); ++i) {
      for (auto& l : env.qual_lowers(i))
        if (l == cur) visit(Qual::var(i));
    }
  }
  return false;
}

// ---------------------------------------------------------------------------
// Size normalization and ordering

NormSize normalize_size(const Size& s) {
  NormSize out;
  std::vector<const Size*> stack{&s};
  while (!stack.empty()) {
    const Size* cur = stack.back();
    stack.pop_back();
    switch (cur->kind) {
      case Size::Kind::Const: out.c += cur->bits; break;
      case Size::Kind::Var: out.vars.push_back(cur->index); break;
      case Size::Kind::Plus:
        stack.push_back(cur->lhs.get());
        stack.push_back(cur->rhs.get());
        break;
    }
  }
  std::sort(out.vars.begin(), out.vars.end());
  return out;
}

Size denormalize(const NormSize& n) {
  if (n.vars.empty()) return Size::constant(n.c);
  Size acc = Size::var(n.vars[0]);
  for (size_t i = 1; i < n.vars.size(); ++i) acc = Size::plus(std::move(acc), Size::var(n.vars[i]));
  if (n.c != 0) acc = Size::plus(std::move(acc), Size::constant(n.c));
  return acc;
}

namespace {

// vars(a) ⊆ vars(b) as multisets, both sorted.
bool multiset_subset(const std::vector<uint32_t>& a, const std::vector<uint32_t>& b) {
  size_t j = 0;
  for (uint32_t x : a) {
    while (j < b.size() && b[j] < x) ++j;
    if (j == b.size() || b[j] != x) return false;
    ++j;
  }
  return true;
}

bool norm_leq_syntactic(const NormSize& a, const NormSize& b) {
  return a.c <= b.c && multiset_subset(a.vars, b.vars);
}

NormSize replace_var_once(const NormSize& n, size_t pos, const NormSize& repl) {
  NormSize out;
  out.c = n.c + repl.c;
  out.vars.reserve(n.vars.size() - 1 + repl.vars.size());
  for (size_t i = 0; i < n.vars.size(); ++i)
    if (i != pos) out.vars.push_back(n.vars[i]);
  out.vars.insert(out.vars.end(), repl.vars.begin(), repl.vars.end());
  std::sort(out.vars.begin(), out.vars.end());
  return out;
}

}  // namespace

bool size_leq(const BindEnv& env, const Size& a, const Size& b) {
  using State = std::tuple<std::vector<uint32_t>, uint64_t, std::vector<uint32_t>, uint64_t>;
  constexpr size_t kBudget = 20000;

  NormSize na = normalize_size(a), nb = normalize_size(b);
  if (norm_leq_syntactic(na, nb)) return true;

  std::set<State> seen;
  std::deque<std::pair<NormSize, NormSize>> work{{na, nb}};
  seen.insert({na.vars, na.c, nb.vars, nb.c});
  while (!work.empty() && seen.size() < kBudget) {
    auto [l, r] = work.front();
    work.pop_front();
    auto push = [&](NormSize nl, NormSize nr) {
      if (norm_leq_syntactic(nl, nr)) return true;
      State st{nl.vars, nl.c, nr.vars, nr.c};
      if (seen.insert(st).second) work.push_back({std::move(nl), std::move(nr)});
      return false;
    };
    // raise one LHS variable to one of its upper bounds
    for (size_t i = 0; i < l.vars.size(); ++i) {
      if (i > 0 && l.vars[i] == l.vars[i - 1]) continue;
      for (auto& u : env.size_uppers(l.vars[i]))
        if (push(replace_var_once(l, i, normalize_size(u)), r)) return true;
    }
    // lower one RHS variable to one of its lower bounds
    for (size_t i = 0; i < r.vars.size(); ++i) {
      if (i > 0 && r.vars[i] == r.vars[i - 1]) continue;
      for (auto& lo : env.size_lowers(r.vars[i]))
        if (push(l, replace_var_once(r, i, normalize_size(lo)))) return true;
    }
  }
  return false;
}

// ---------------------------------------------------------------------------
// size_of

namespace {

bool size_of_pre(const BindEnv& env, uint32_t recDepth, const PreType& p, NormSize& acc,
                 std::string* err);

bool size_of_ty(const BindEnv& env, uint32_t recDepth, const Type& t, NormSize& acc,
                std::string* err) {
  return size_of_pre(env, recDepth, t.pre, acc, err);
}

bool size_of_pre(const BindEnv& env, uint32_t recDepth, const PreType& p, NormSize& acc,
                 std::string* err) {
  const auto& v = p->v;
  if (std::holds_alternative<UnitT>(v) || std::holds_alternative<CapT>(v) ||
      std::holds_alternative<OwnT>(v))
    return true;
  if (auto* n = std::get_if<NumT>(&v)) {
    acc.c += num_bits(n->nt);
    return true;
  }
  if (std::holds_alternative<RefT>(v) || std::holds_alternative<PtrT>(v) ||
      std::holds_alternative<CodeRefT>(v)) {
    acc.c += 32;
    return true;
  }
  if (auto* tv = std::get_if<VarT>(&v)) {
    if (tv->index < recDepth) {
      if (err) *err = "recursion variable occurs outside a reference; type has no size";
      return false;
    }
    auto up = env.type_size_upper(tv->index - recDepth);
    if (!up) {
      if (err) *err = "unbound type variable";
      return false;
    }
    NormSize nu = normalize_size(*up);
    acc.c += nu.c;
    acc.vars.insert(acc.vars.end(), nu.vars.begin(), nu.vars.end());
    return true;
  }
  if (auto* pr = std::get_if<ProdT>(&v)) {
    for (auto& c : pr->components)
      if (!size_of_ty(env, recDepth, c, acc, err)) return false;
    return true;
  }
  if (auto* rc = std::get_if<RecT>(&v)) return size_of_ty(env, recDepth + 1, rc->body, acc, err);
  // ExLocT: the location binder does not affect size or type variables
  return size_of_ty(env, recDepth, std::get<ExLocT>(v).body, acc, err);
}

}  // namespace

std::optional<Size> size_of(const BindEnv& env, const Type& t, std::string* err) {
  NormSize acc;
  if (!size_of_ty(env, 0, t, acc, err)) return std::nullopt;
  std::sort(acc.vars.begin(), acc.vars.end());
  return denormalize(acc);
}

std::optional<uint64_t> size_const(const Size& s) {
  NormSize n = normalize_size(s);
  if (!n.vars.empty()) return std::nullopt;
  return n.c;
}

}  // namespace rw
