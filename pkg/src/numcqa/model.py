"""Number Reasoning Network: a two-phase query encoder.

Entity-phase states are vectors in R^d. Numeric-phase states are the
parameters theta = (mu, s) in R^{2d} of a diagonal Gaussian with variance
exp(s). Projections are gated transitions; intersection and union are
attention DeepSets. With ``value_mode="entity"`` the same backbone treats
every value node as an opaque entity (the ablation baseline).
"""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dsl import ENTITY, NUMERIC, Node, value_type_of
from .encoding import EncodingSpec
from .kg import NUM_RELATION_INDEX, NUM_RELATIONS, KnowledgeGraph

LOG_2PI = math.log(2 * math.pi)

NRN = "nrn"
VALUES_AS_ENTITIES = "entity"

GATE_WEIGHTS = ("Wp", "bp", "Wz", "Uz", "bz", "Wr", "Ur", "br", "Wh", "Uh", "bh")
DEEPSET_WEIGHTS = ("Wq", "Wk", "Wv", "W1", "b1", "W2", "b2")


@dataclass
class ModelConfig:
    dim: int = 16
    encoding: str = "sinusoidal"
    value_mode: str = NRN
    anchor_var: float = 0.01
    seed: int = 0

    def to_dict(self):
        return asdict(self)


class StateError(FloatingPointError):
    pass


# -- functional building blocks ----------------------------------------------

def gated_transition(x, ctx, w: dict, ops=ad, ctx_terms=None) -> Tensor:
    """Gated transition of ``x`` under context embedding ``ctx``.

    ``p = Wp x + bp``, update gate ``z`` and reset gate ``r`` are sigmoids of
    ``W ctx + U p + b``, the candidate is ``tanh(Wh ctx + Uh (r*p) + bh)``
    and the output ``(1 - z) * p + z * candidate``. Operates row-wise on
    batches; weights are stored ``(out, in)``. ``ops=ad.numpy_ops`` runs it
    on plain arrays without recording a tape. ``ctx_terms`` optionally gives
    the three context products ``(Wz ctx, Wr ctx, Wh ctx)`` precomputed.
    """
    if ctx_terms is None:
        ctx_terms = (ops.linear(ctx, w["Wz"]), ops.linear(ctx, w["Wr"]), ops.linear(ctx, w["Wh"]))
    cz, cr, ch = ctx_terms
    p = ops.linear(x, w["Wp"], w["bp"])
    z = ops.sigmoid(cz + ops.linear(p, w["Uz"]) + w["bz"])
    r = ops.sigmoid(cr + ops.linear(p, w["Ur"]) + w["br"])
    t = ops.tanh(ch + ops.linear(r * p, w["Uh"]) + w["bh"])
    return (1.0 - z) * p + z * t


def attention_weights(x, w: dict, ops=ad) -> Tensor:
    """Row-softmax of scaled dot products for stacked inputs ``x`` of shape (B, n, m)."""
    q = ops.linear(x, w["Wq"])
    k = ops.linear(x, w["Wk"])
    m = x.shape[-1]
    return ops.softmax(ops.matmul(q, ops.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(m)), axis=-1)


def deepset_merge(states, w: dict, ops=ad) -> Tensor:
    """Permutation-invariant merge of 2-3 same-phase states, each (B, m).

    Self-attention over the stacked inputs, mean pooling over the set, then
    a two-layer ReLU perceptron.
    """
    if not 2 <= len(states) <= 3:
        raise ValueError(f"deepset_merge takes 2 or 3 inputs, got {len(states)}")
    x = ops.stack(states, axis=1)
    att = ops.matmul(attention_weights(x, w, ops), ops.linear(x, w["Wv"]))
    pooled = ops.mean(att, axis=1)
    hidden = ops.relu(ops.linear(pooled, w["W1"], w["b1"]))
    return ops.linear(hidden, w["W2"], w["b2"])


def gaussian_logpdf(theta, x) -> Tensor:
    """Row-wise log density of a diagonal Gaussian, theta = (mu, log variance)."""
    theta, x = ad.as_tensor(theta), ad.as_tensor(x)
    d = theta.shape[-1] // 2
    mu, s = theta[..., :d], theta[..., d:]
    quad = ad.square(x - mu) * ad.exp(-s)
    return -0.5 * ad.sum(quad + s + LOG_2PI, axis=-1)


def diag_gaussian_logpdf(x, mean, logvar) -> Tensor:
    return -0.5 * ad.sum(ad.square(x - mean) * ad.exp(-ad.as_tensor(logvar)) + logvar + LOG_2PI, axis=-1)


def entity_score(q, e_v) -> np.ndarray:
    return np.asarray(ad.as_tensor(q).data) @ np.asarray(ad.as_tensor(e_v).data)


# -- the model ------------------------------------------------------------------

class NumberReasoningNetwork:
    """Parameters plus the encoder, losses and scoring for one graph vocabulary."""

    def __init__(self, kg: KnowledgeGraph, config: ModelConfig, spec: EncodingSpec | None = None,
                 rng: np.random.Generator | None = None):
        if config.value_mode not in (NRN, VALUES_AS_ENTITIES):
            raise ValueError(f"unknown value_mode {config.value_mode!r}")
        self.kg = kg
        self.config = config
        self.d = config.dim
        self.k = 2 * config.dim
        self.value_types = kg.value_types
        self.type_index = {t: i for i, t in enumerate(self.value_types)}
        self.spec = spec if spec is not None else EncodingSpec.from_graph(config.encoding, config.dim, kg)
        if self.spec.dim != self.d:
            raise ValueError("encoding dimension must equal the model dimension")
        rng = np.random.default_rng(config.seed) if rng is None else rng
        self.params: dict[str, Tensor] = {}
        self._pools: dict[str, np.ndarray] = {}  # value type -> candidate value ids
        self._init_params(rng)
        self._value_cache = self.spec.encode([v for v, _ in kg.values], [t for _, t in kg.values]) \
            if kg.values else np.zeros((0, self.d))

    @property
    def ablation(self) -> bool:
        return self.config.value_mode == VALUES_AS_ENTITIES

    # parameters ----------------------------------------------------------------

    def _add(self, name, array):
        self.params[name] = Tensor(array, requires_grad=True, name=name)

    def _init_params(self, rng):
        d, k = self.d, self.k
        kg = self.kg
        bound = 1.0 / math.sqrt(d)
        n_ent = kg.n_entities + (kg.n_values if self.ablation else 0)
        n_rel = len(kg.relation_names)
        if self.ablation:
            n_rel += 2 * len(kg.attribute_names) + len(NUM_RELATIONS)
        self._add("entity_emb", rng.uniform(-bound, bound, (n_ent, d)))
        self._add("relation_emb", rng.uniform(-bound, bound, (max(n_rel, 1), d)))
        self._gate("rel", d, d, d, rng)
        for op in ("i", "u"):
            self._deepset(f"{op}.E", d, rng)
        if self.ablation:
            return
        self._add("attr_emb", rng.uniform(-bound, bound, (max(len(kg.attribute_names), 1), k)))
        self._add("numrel_emb", rng.uniform(-bound, bound, (len(NUM_RELATIONS), k)))
        self._gate("attr", d, k, k, rng)   # entity -> numeric
        self._gate("rev", k, d, k, rng)    # numeric -> entity
        self._gate("num", k, k, k, rng)    # numeric -> numeric
        for op in ("i", "u"):
            self._deepset(f"{op}.N", k, rng)
        n_types = max(len(self.value_types), 1)
        self._add("prior_mean", rng.uniform(-bound, bound, (n_types, d)))
        # prior variance is 1 + exp(raw): a learned prior whose variance could
        # shrink to zero would make the MAP term unbounded (mu collapses onto m_t)
        self._add("prior_raw_var", np.full((n_types, d), -2.0))

    def _glorot(self, rng, out_dim, in_dim):
        a = math.sqrt(6.0 / (in_dim + out_dim))
        return rng.uniform(-a, a, (out_dim, in_dim))

    def _gate(self, prefix, in_dim, out_dim, ctx_dim, rng):
        self._add(f"{prefix}.Wp", self._glorot(rng, out_dim, in_dim))
        self._add(f"{prefix}.bp", np.zeros(out_dim))
        for g in "zrh":
            self._add(f"{prefix}.W{g}", self._glorot(rng, out_dim, ctx_dim))
            self._add(f"{prefix}.U{g}", self._glorot(rng, out_dim, out_dim))
            self._add(f"{prefix}.b{g}", np.zeros(out_dim))

    def _deepset(self, prefix, m, rng):
        for name in ("Wq", "Wk", "Wv"):
            self._add(f"{prefix}.{name}", self._glorot(rng, m, m))
        self._add(f"{prefix}.W1", self._glorot(rng, 2 * m, m))
        self._add(f"{prefix}.b1", np.zeros(2 * m))
        self._add(f"{prefix}.W2", self._glorot(rng, m, 2 * m))
        self._add(f"{prefix}.b2", np.zeros(m))

    def weights(self, prefix: str) -> dict:
        n = len(prefix) + 1
        return {name[n:]: t for name, t in self.params.items() if name.startswith(prefix + ".")}

    def state_dict(self) -> dict:
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_state_dict(self, state: dict):
        missing = set(self.params) ^ set(state)
        if missing:
            raise KeyError(f"parameter mismatch: {sorted(missing)}")
        for name, arr in state.items():
            if arr.shape != self.params[name].shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {self.params[name].shape}")
            self.params[name].data = np.array(arr, dtype=np.float64)

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    # single operations -------------------------------------------------------------

    def _weights_for(self, prefix, ops):
        w = self.weights(prefix)
        return w if ops is ad else {k: t.data for k, t in w.items()}

    def _project(self, prefix, table, ids, x, ops=ad):
        emb = self.params[table]
        w = self._weights_for(prefix, ops)
        if ops is ad:
            out = gated_transition(x, ad.take(emb, ids), w)
        else:
            # few distinct contexts: project the table once, then gather rows
            ids = np.asarray(ids, dtype=np.int64)
            terms = tuple((emb.data @ w[k].T)[ids] for k in ("Wz", "Wr", "Wh"))
            out = gated_transition(x, None, w, ops, ctx_terms=terms)
        # attr and num land in the numeric phase
        return self._checked(out) if prefix in ("attr", "num") else out

    def rel_projection(self, q, rel_ids) -> Tensor:
        return self._project("rel", "relation_emb", rel_ids, q)

    def attr_projection(self, q, attr_ids) -> Tensor:
        return self._project("attr", "attr_emb", attr_ids, q)

    def rev_attr_projection(self, theta, attr_ids) -> Tensor:
        return self._project("rev", "attr_emb", attr_ids, theta)

    def num_projection(self, theta, numrel_ids) -> Tensor:
        return self._project("num", "numrel_emb", numrel_ids, theta)

    def merge(self, states, op: str, phase: str, ops=ad) -> Tensor:
        out = deepset_merge(states, self._weights_for(f"{op}.{'E' if phase == ENTITY else 'N'}", ops), ops)
        return self._checked(out) if phase == NUMERIC else out

    def _checked(self, theta):
        data = theta.data if isinstance(theta, Tensor) else theta
        with np.errstate(over="ignore"):
            var = np.exp(data[..., self.d:])
        if not (np.all(np.isfinite(data)) and np.all(var > 0) and np.all(np.isfinite(var))):
            raise StateError("numeric state lost a finite, positive variance")
        return theta

    def value_anchor(self, values, vtypes) -> Tensor:
        mu = self.spec.encode(values, vtypes)
        s = np.full_like(mu, math.log(self.config.anchor_var))
        return Tensor(np.concatenate([mu, s], axis=-1))

    def encode_values(self, value_ids) -> np.ndarray:
        return self._value_cache[np.asarray(value_ids, dtype=np.int64)]

    # encoder --------------------------------------------------------------------------

    def encode(self, queries) -> Tensor:
        """Encode a batch of queries sharing one specific structure.

        Returns (B, d) for entity-rooted queries and (B, 2d) for
        numeric-rooted ones (entity-phase everywhere under the ablation).
        """
        if isinstance(queries, Node):
            queries = [queries]
        return self._encode(list(queries))

    def _encode(self, nodes) -> Tensor:
        n0 = nodes[0]
        if any(n.op != n0.op or len(n.children) != len(n0.children) for n in nodes):
            raise ValueError("batched queries must share one structure")
        kids = [self._encode([n.children[j] for n in nodes]) for j in range(len(n0.children))]
        return self._apply(nodes, kids)

    def _apply(self, nodes, kids, ops=ad) -> Tensor:
        """One batched operation for same-op ``nodes`` whose children are already encoded."""
        kg = self.kg
        op = nodes[0].op
        taped = ops is ad
        if op in ("e", "nv"):
            if op == "nv" and not self.ablation:
                out = self.value_anchor([n.value for n in nodes], [n.vtype for n in nodes])
                return out if taped else out.data
            if op == "e":
                rows = [kg.entity_id(n.label) for n in nodes]
            else:
                rows = [kg.n_entities + kg.value_id(n.value, n.vtype) for n in nodes]
            emb = self.params["entity_emb"]
            return ad.take(emb, rows) if taped else emb.data[rows]
        if op in ("i", "u"):
            phase = ENTITY if self.ablation else nodes[0].phase
            return self.merge(kids, op, phase, ops)
        if self.ablation:
            plan = ("rel", "relation_emb", self.rel_projection, [self._ablation_relation(n) for n in nodes])
        elif op == "rp":
            plan = ("rel", "relation_emb", self.rel_projection, [kg.relation_id(n.label) for n in nodes])
        elif op == "ap":
            plan = ("attr", "attr_emb", self.attr_projection, [kg.attribute_id(n.label) for n in nodes])
        elif op == "rap":
            plan = ("rev", "attr_emb", self.rev_attr_projection, [kg.attribute_id(n.label) for n in nodes])
        elif op == "np":
            plan = ("num", "numrel_emb", self.num_projection, [NUM_RELATION_INDEX[n.label] for n in nodes])
        else:
            plan = None
        if plan is not None:
            prefix, table, method, ids = plan
            # the taped path goes through the public methods so they stay the single entry point
            return method(kids[0], ids) if taped else self._project(prefix, table, ids, kids[0], ops)
        raise ValueError(f"unknown op {op!r}")

    def encode_mixed(self, queries) -> list[np.ndarray]:
        """Root states (no gradient, no tape) for queries of arbitrary, mixed structures.

        Nodes from all queries are grouped by height and operator, so each
        group costs one batched call however many structures are present.
        """
        groups = defaultdict(list)  # (height, op, arity, phase) -> [(node, child locations)]

        def visit(n):
            h, locs = 0, []
            for c in n.children:
                loc = visit(c)
                locs.append(loc)
                if loc[0][0] >= h:
                    h = loc[0][0] + 1
            key = (h, n.op, len(locs), n.phase)
            g = groups[key]
            g.append((n, locs))
            return key, len(g) - 1

        roots = [visit(q) for q in queries]
        out = {}
        for key in sorted(groups):
            entries = groups[key]
            kids = []
            for j in range(key[2]):
                locs = [locs[j] for _, locs in entries]
                src = {k for k, _ in locs}
                if len(src) == 1:
                    kids.append(out[locs[0][0]][[r for _, r in locs]])
                    continue
                x = np.empty((len(locs), out[locs[0][0]].shape[1]))
                for i, (k, r) in enumerate(locs):
                    x[i] = out[k][r]
                kids.append(x)
            out[key] = self._apply([n for n, _ in entries], kids, ad.numpy_ops)
        return [out[k][r] for k, r in roots]

    def _ablation_relation(self, n: Node) -> int:
        kg = self.kg
        n_rel, n_attr = len(kg.relation_names), len(kg.attribute_names)
        if n.op == "rp":
            return kg.relation_id(n.label)
        if n.op == "ap":
            return n_rel + kg.attribute_id(n.label)
        if n.op == "rap":
            return n_rel + n_attr + kg.attribute_id(n.label)
        return n_rel + 2 * n_attr + NUM_RELATION_INDEX[n.label]

    # scores and losses --------------------------------------------------------------------

    def entity_logits(self, q) -> Tensor:
        """Scores <q, e_v> against every entity row (entities only, or all nodes under the ablation)."""
        return ad.matmul(q, self.params["entity_emb"].T)

    def entity_loss(self, queries, answers) -> Tensor:
        """Mean negative log softmax of the answer entities, denominator over all entities."""
        q = self.encode(queries)
        logits = self.entity_logits(q)
        picked = logits[np.arange(len(answers)), np.asarray(answers, dtype=np.int64)]
        return ad.mean(ad.logsumexp(logits, axis=-1) - picked)

    def prior_logvar(self, type_ids) -> Tensor:
        raw = ad.take(self.params["prior_raw_var"], type_ids)
        return ad.log(1.0 + ad.exp(raw))

    def type_prior_logpdf(self, type_ids, theta) -> Tensor:
        """log phi_t(theta): diagonal Gaussian over the mean half of theta, variance >= 1."""
        mu = ad.as_tensor(theta)[..., : self.d]
        return diag_gaussian_logpdf(mu, ad.take(self.params["prior_mean"], type_ids), self.prior_logvar(type_ids))

    def attribute_loss(self, queries, value_ids) -> Tensor:
        """Mean of -log p_theta(psi(v)) - log phi_t(theta) over the batch."""
        theta = self.encode(queries)
        value_ids = np.asarray(value_ids, dtype=np.int64)
        x = Tensor(self.encode_values(value_ids))
        types = [self.type_index[self.kg.values[v][1]] for v in value_ids]
        nll = -gaussian_logpdf(theta, x) - self.type_prior_logpdf(types, theta)
        return ad.mean(nll)

    def value_loss_as_entities(self, queries, value_ids) -> Tensor:
        """Ablation loss for numeric-rooted queries: softmax over all node rows."""
        rows = self.kg.n_entities + np.asarray(value_ids, dtype=np.int64)
        return self.entity_loss(queries, rows)

    def numeric_loss(self, queries, value_ids) -> Tensor:
        if self.ablation:
            return self.value_loss_as_entities(queries, value_ids)
        return self.attribute_loss(queries, value_ids)

    # ranking ------------------------------------------------------------------------------

    def candidates(self, query: Node) -> np.ndarray:
        if query.phase == ENTITY:
            return np.arange(self.kg.n_entities)
        return self._type_pool(value_type_of(query, self.kg))

    def _type_pool(self, vtype: str) -> np.ndarray:
        if vtype not in self._pools:
            self._pools[vtype] = np.asarray(self.kg.values_of_type(vtype), dtype=np.int64)
        return self._pools[vtype]

    def score_candidates(self, queries) -> list[tuple[np.ndarray, np.ndarray]]:
        """``(candidate_ids, scores)`` per query; structures may be mixed."""
        states = self.encode_mixed(queries)
        emb = self.params["entity_emb"].data
        n_ent = self.kg.n_entities
        out = [None] * len(queries)
        ent = [i for i, q in enumerate(queries) if q.phase == ENTITY]
        if ent:
            cand = np.arange(n_ent)
            scores = np.stack([states[i] for i in ent]) @ emb[:n_ent].T
            for j, i in enumerate(ent):
                out[i] = (cand, scores[j])
        # numeric roots of one value type share a candidate pool; score each group at once
        vtypes = {i: value_type_of(q, self.kg) for i, q in enumerate(queries) if q.phase != ENTITY}
        for vt in dict.fromkeys(vtypes.values()):
            rows = [i for i, t in vtypes.items() if t == vt]
            cand = self._type_pool(vt)
            sub = np.stack([states[i] for i in rows])
            if self.ablation:
                scores = sub @ emb[n_ent + cand].T
            else:
                # expanded quadratic form: two matrix products instead of a (B, n, d) array
                mu, s = sub[:, : self.d], sub[:, self.d:]
                w = np.exp(-s)
                x = self.encode_values(cand)
                const = (mu * mu * w).sum(axis=1) + s.sum(axis=1) + self.d * LOG_2PI
                scores = (mu * w) @ x.T - 0.5 * (w @ (x * x).T) - 0.5 * const[:, None]
            for j, i in enumerate(rows):
                out[i] = (cand, scores[j])
        return out


def filtered_ranks(candidates: np.ndarray, scores: np.ndarray, targets, known) -> dict:
    """Rank of each target with every other known answer removed.

    Ranks count candidates scoring strictly higher, plus equal scorers with
    a smaller id; rank 1 is best.
    """
    candidates = np.asarray(candidates)
    known_mask = np.isin(candidates, np.fromiter((int(k) for k in known), dtype=np.int64))
    pos = {int(c): i for i, c in enumerate(candidates)}
    out = {}
    for v in targets:
        v = int(v)
        s = scores[pos[v]]
        keep = ~known_mask | (candidates == v)
        better = (scores > s) | ((scores == s) & (candidates < v))
        out[v] = int(np.count_nonzero(better & keep)) + 1
    return out
