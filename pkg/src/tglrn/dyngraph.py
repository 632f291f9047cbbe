"""Dynamic graph construction: one weighted adjacency per input time step.

Recurrent chains evolve three node-embedding streams backwards through
the input window (start-of-edge, end-of-edge, and hop-selection
embeddings). At every step the start/end embeddings are gated by
per-step base embeddings, scored pairwise into edge logits, normalized
to mean 0 / std alpha, squashed by a sigmoid, relaxed with
logistic-Gumbel noise (training only), randomly thinned with keep
probability gamma (training only), and finally pruned so that node i
only keeps weights toward nodes within its selected hop radius.

Hard decisions (hop argmax) use a straight-through estimator: forward
sees the hard one-hot, backward sees the relaxed softmax gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Linear, Parameter, Tensor
from .errors import ConfigError

__all__ = [
    "GruCell",
    "EmbeddingChain",
    "GraphConstruction",
    "GraphSequence",
    "GraphDiagnostics",
    "gate",
    "edge_logits",
    "normalize_logits",
    "bernoulli_means",
    "gumbel_relax",
    "edge_sample",
    "hop_probs",
    "select_hops",
    "prune",
]

OMEGA_CLAMP = 1e-6


class GruCell:
    """One recurrence step over node embeddings, driven by the previous flow reading.

    Update gate z and reset gate r are sigmoids of linear maps over the
    concatenated [embedding ; projected input]; the candidate is a tanh of
    a linear map over [r * embedding ; projected input]; the new embedding
    is (1 - z) * candidate + z * embedding.
    """

    def __init__(self, embed_dim, in_features, proj_dim, rng):
        self.proj = Linear(in_features, proj_dim, rng)
        self.f_z = Linear(embed_dim + proj_dim, embed_dim, rng)
        self.f_r = Linear(embed_dim + proj_dim, embed_dim, rng)
        self.g = Linear(embed_dim + proj_dim, embed_dim, rng)

    def step(self, e, x):
        u = self.proj(x)
        eu = dc.concat([e, u], axis=-1)
        z = self.f_z(eu).sigmoid()
        r = self.f_r(eu).sigmoid()
        cand = self.g(dc.concat([r * e, u], axis=-1)).tanh()
        return (1.0 - z) * cand + z * e

    def params(self):
        out = []
        for label, lin in (("proj", self.proj), ("f_z", self.f_z), ("f_r", self.f_r), ("g", self.g)):
            out.extend((f"{label}.{k}", p) for k, p in lin.params())
        return out


class EmbeddingChain:
    """A learnable initial embedding evolved backwards through the window."""

    def __init__(self, num_nodes, embed_dim, in_features, proj_dim, rng):
        self.e_init = Parameter(rng.standard_normal((num_nodes, embed_dim)))
        self.cell = GruCell(embed_dim, in_features, proj_dim, rng)

    def run(self, window):
        """Embeddings for every window position.

        ``window`` is (B, T_in, N, F); position T_in-1 holds the initial
        embedding, and position j is one recurrence step from position j+1
        consuming the flow reading at position j.
        """
        b, t_in = window.shape[0], window.shape[1]
        e = self.e_init.broadcast_to((b,) + self.e_init.shape)
        embeddings = [None] * t_in
        embeddings[t_in - 1] = e
        for j in range(t_in - 2, -1, -1):
            e = self.cell.step(e, window[:, j])
            embeddings[j] = e
        return embeddings

    def params(self):
        return [("e_init", self.e_init)] + [(f"gru.{k}", p) for k, p in self.cell.params()]


def gate(e, e_base, gate_linear):
    """Elementwise gating: embedding * sigmoid(linear(base embedding))."""
    return e * gate_linear(e_base).sigmoid()


def _swap_last2(t):
    axes = list(range(t.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return t.transpose(axes)


def edge_logits(e_st, e_ed, weight, bias):
    """Pairwise scores w[i, j] = linear(tanh([e_st_i ; e_ed_j])).

    Because tanh acts elementwise and the head is affine, the concatenated
    form splits into two partial projections added with broadcasting,
    which avoids materializing all N^2 concatenations.
    """
    d = e_st.shape[-1]
    u = e_st.tanh() @ weight[:d]  # (..., N, 1)
    v = e_ed.tanh() @ weight[d:]  # (..., N, 1)
    return u + _swap_last2(v) + bias


def normalize_logits(w, alpha=1.0):
    """Shift/scale all N^2 logits per step to mean 0 and std alpha.

    Degenerate inputs (all entries identical) map to all zeros, so the
    subsequent sigmoid emits maximally non-committal 0.5 weights.
    """
    mu = w.mean(axis=(-2, -1), keepdims=True)
    var = ((w - mu) ** 2).mean(axis=(-2, -1), keepdims=True)
    spread = w.data.max(axis=(-2, -1), keepdims=True) - w.data.min(axis=(-2, -1), keepdims=True)
    live = (spread > 0).astype(np.float64)
    return (w - mu) * dc.rsqrt_or_zero(var) * (alpha * live)


def bernoulli_means(w_hat):
    """Sigmoid of normalized logits, clamped away from {0, 1} to keep logits finite."""
    return w_hat.sigmoid().clamp(OMEGA_CLAMP, 1.0 - OMEGA_CLAMP)


def gumbel_relax(w_bar, tau, delta):
    """Continuous relaxation of Bernoulli(w_bar) via logistic noise.

    p = sigmoid((logit(delta) + logit(w_bar)) / tau) with delta ~ U(0, 1).
    Differentiable in w_bar; p > 0.5 happens with probability w_bar.
    """
    delta = np.clip(np.asarray(delta, dtype=np.float64), 1e-12, 1.0 - 1e-12)
    noise = np.log(delta) - np.log1p(-delta)
    logits = w_bar.log() - (1.0 - w_bar).log()
    return ((logits + noise) * (1.0 / tau)).sigmoid()


def edge_sample(p, gamma, rho):
    """Random edge thinning: keep each candidate weight with probability gamma."""
    rho = np.maximum(np.asarray(rho, dtype=np.float64), 1e-300)
    keep = (rho <= gamma).astype(np.float64)
    return p * keep


def hop_probs(e_h, lin1, lin2):
    """Per-node hop-radius distribution: softmax(lin2(tanh(lin1(e_h))))."""
    return dc.softmax(lin2(lin1(e_h).tanh()), axis=-1)


def select_hops(p, tau, mode, rng=None, straight_through=True):
    """Choose a hop radius per node; returns (0-based indices, mixing tensor).

    Eval mode takes the plain argmax (ties break toward the smaller
    radius) and returns no mixing tensor. Train mode perturbs
    log-probabilities with Gumbel noise, which samples the categorical
    exactly; the mixing tensor is straight-through (hard one-hot forward,
    relaxed softmax gradient) unless ``straight_through`` is False, in
    which case the relaxed softmax itself is returned.
    """
    if mode == "eval":
        return np.argmax(p.data, axis=-1), None
    if rng is None:
        raise ConfigError("select_hops: train mode requires a random generator")
    u = np.clip(rng.uniform(size=p.shape), 1e-12, 1.0 - 1e-12)
    gumbel = -np.log(-np.log(u))
    y = dc.softmax((p.clamp(1e-300, 2.0).log() + gumbel) * (1.0 / tau), axis=-1)
    h = np.argmax(y.data, axis=-1)
    if not straight_through:
        return h, y
    hard = np.zeros(p.shape)
    np.put_along_axis(hard, h[..., None], 1.0, axis=-1)
    return h, y - y.detach() + Tensor(hard)


def _rows_from_choices(masks, hop_choices):
    """Row i of S^{h[i]} for every leading index; ``hop_choices`` is 0-based."""
    n = masks.shape[1]
    return masks[hop_choices, np.arange(n), :]


def prune(a_raw, hop_choices, group):
    """Mask row i of the adjacency by the reachability rows of its hop radius.

    ``hop_choices`` holds 1-based radii in {1..L}, one per node (with any
    leading batch axes).
    """
    hop_choices = np.asarray(hop_choices)
    if hop_choices.min() < 1 or hop_choices.max() > group.L:
        raise ConfigError(f"prune: hop choices must lie in [1, {group.L}]")
    rows = _rows_from_choices(group.stacked(), hop_choices - 1)
    a_raw = a_raw if isinstance(a_raw, Tensor) else Tensor(a_raw)
    return a_raw * Tensor(rows)


@dataclass
class GraphSequence:
    """Per-step weighted adjacencies plus the hop radius chosen per node."""

    adjacencies: list  # T_in tensors, each (B, N, N) in [0, 1]
    hop_choices: np.ndarray  # (B, T_in, N) of 1-based radii

    @property
    def t_in(self):
        return len(self.adjacencies)


@dataclass
class GraphDiagnostics:
    """Per-step arrays captured for invariant checks and inspection dumps."""

    prenorm_logits: list  # (B, N, N) normalized pre-sigmoid logits
    omega_bar: list  # (B, N, N) deterministic edge weights after sigmoid
    support_masks: list  # (B, N, N) selected reachability rows in {0, 1}


class GraphConstruction:
    """Everything needed to emit one weighted adjacency per window position."""

    def __init__(
        self,
        num_nodes,
        t_in,
        in_features,
        embed_dim,
        hop_dim,
        proj_dim,
        group,
        gamma,
        alpha,
        tau,
        rng,
    ):
        if not 0.0 <= gamma <= 1.0:
            raise ConfigError(f"gamma must lie in [0, 1], got {gamma}")
        self.num_nodes = num_nodes
        self.t_in = t_in
        self.gamma = float(gamma)
        self.alpha = float(alpha)
        self.tau = float(tau)
        self.group = group
        self.masks = group.stacked()  # (L, N, N) constants
        self.levels = group.L

        self.chain_st = EmbeddingChain(num_nodes, embed_dim, in_features, proj_dim, rng)
        self.chain_ed = EmbeddingChain(num_nodes, embed_dim, in_features, proj_dim, rng)
        self.chain_h = EmbeddingChain(num_nodes, hop_dim, in_features, proj_dim, rng)
        scale = 1.0 / np.sqrt(embed_dim)
        self.base_st = Parameter(rng.standard_normal((t_in, num_nodes, embed_dim)) * scale)
        self.base_ed = Parameter(rng.standard_normal((t_in, num_nodes, embed_dim)) * scale)
        self.gate_st = Linear(embed_dim, embed_dim, rng)
        self.gate_ed = Linear(embed_dim, embed_dim, rng)
        limit = np.sqrt(6.0 / (2 * embed_dim + 1))
        self.edge_w = Parameter(rng.uniform(-limit, limit, size=(2 * embed_dim, 1)))
        self.edge_b = Parameter(np.zeros(1))
        self.hop_l1 = Linear(hop_dim, hop_dim, rng)
        self.hop_l2 = Linear(hop_dim, group.L, rng)

    def build(self, window, mode, rng=None, sample_edges=None, hop_mode="hard", want_diag=False):
        """Compose the per-step pipeline over the whole input window.

        ``mode`` is "train" or "eval". Edge thinning defaults to train-only
        but can be forced on or off via ``sample_edges``. ``hop_mode="soft"``
        replaces the straight-through hard hop mask with its relaxed value,
        which makes the full path exactly differentiable for gradient
        checking.
        """
        if mode not in ("train", "eval"):
            raise ConfigError(f"unknown mode {mode!r}")
        training = mode == "train"
        if sample_edges is None:
            sample_edges = training
        if (training or sample_edges) and rng is None:
            raise ConfigError("stochastic graph construction requires a random generator")

        emb_st = self.chain_st.run(window)
        emb_ed = self.chain_ed.run(window)
        emb_h = self.chain_h.run(window)

        b = window.shape[0]
        n = self.num_nodes
        adjacencies = []
        hop_choices = np.zeros((b, self.t_in, n), dtype=np.int64)
        diag = GraphDiagnostics([], [], []) if want_diag else None

        for j in range(self.t_in):
            e_st = gate(emb_st[j], self.base_st[j], self.gate_st)
            e_ed = gate(emb_ed[j], self.base_ed[j], self.gate_ed)
            w = edge_logits(e_st, e_ed, self.edge_w, self.edge_b)
            w_hat = normalize_logits(w, self.alpha)
            w_bar = bernoulli_means(w_hat)

            if training:
                delta = rng.uniform(size=(b, n, n))
                p = gumbel_relax(w_bar, self.tau, delta)
            else:
                p = w_bar
            if sample_edges:
                rho = rng.uniform(size=(b, n, n))
                p = edge_sample(p, self.gamma, rho)

            probs = hop_probs(emb_h[j], self.hop_l1, self.hop_l2)
            if training:
                h, mixing = select_hops(
                    probs, self.tau, "train", rng, straight_through=(hop_mode == "hard")
                )
                mask = dc.einsum2("bnl,lnj->bnj", mixing, Tensor(self.masks))
            else:
                h, _ = select_hops(probs, self.tau, "eval")
                mask = Tensor(_rows_from_choices(self.masks, h))
            a_t = p * mask

            adjacencies.append(a_t)
            hop_choices[:, j, :] = h + 1
            if want_diag:
                diag.prenorm_logits.append(w_hat.data.copy())
                diag.omega_bar.append(w_bar.data.copy())
                diag.support_masks.append(mask.data.copy())

        seq = GraphSequence(adjacencies=adjacencies, hop_choices=hop_choices)
        return (seq, diag) if want_diag else seq

    def params(self):
        out = []
        for label, chain in (
            ("chain_st", self.chain_st),
            ("chain_ed", self.chain_ed),
            ("chain_h", self.chain_h),
        ):
            out.extend((f"{label}.{k}", p) for k, p in chain.params())
        out.append(("base_st", self.base_st))
        out.append(("base_ed", self.base_ed))
        out.extend((f"gate_st.{k}", p) for k, p in self.gate_st.params())
        out.extend((f"gate_ed.{k}", p) for k, p in self.gate_ed.params())
        out.append(("edge_w", self.edge_w))
        out.append(("edge_b", self.edge_b))
        out.extend((f"hop_l1.{k}", p) for k, p in self.hop_l1.params())
        out.extend((f"hop_l2.{k}", p) for k, p in self.hop_l2.params())
        return out
