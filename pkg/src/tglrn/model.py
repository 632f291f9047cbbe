"""End-to-end model: graph construction, stacked blocks, prediction head.

The forward pass z-scores the raw input window, builds one weighted
adjacency per input step, lifts features through the input layer, runs
the spatio-temporal blocks over the shrinking stream, concatenates the
per-block outputs along channels, and maps them to all horizons at once
through the prediction head. Predictions come back in normalized space;
``predict_raw`` undoes the scaling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Linear, Parameter, Tensor
from .dyngraph import GraphConstruction
from .errors import ConfigError
from .stnet import SpatioTemporalBlock, block_schedule

__all__ = ["ModelConfig", "TGLRN"]


@dataclass
class ModelConfig:
    """Shape hyperparameters of one model instance."""

    num_nodes: int
    t_in: int = 12
    t_out: int = 12
    in_features: int = 1
    embed_dim: int = 16  # d, edge-embedding chains
    hop_dim: int = 16  # m, hop-selector chain
    hidden_dim: int = 64  # D, block channel width
    levels: int = 5  # L, hop radii available
    diff_steps: int = 2  # K
    kernel_size: int = 2  # Ks
    n_blocks: int = 3
    gamma: float = 0.3
    alpha: float = 1.0
    tau: float = 1.0
    dropout_rate: float = 0.1
    eval_sampling_override: bool = False

    def validate(self):
        if self.in_features >= self.hidden_dim:
            raise ConfigError("input layer must lift features into a wider space")
        block_schedule(self.t_in, self.n_blocks, self.kernel_size)


class TGLRN:
    """Traffic forecaster over learned per-step graphs."""

    def __init__(self, cfg, group, scaler, rng):
        cfg.validate()
        if group.L != cfg.levels:
            raise ConfigError(f"structure group has {group.L} levels, config wants {cfg.levels}")
        if group.masks[0].shape[0] != cfg.num_nodes:
            raise ConfigError(
                f"structure group is over {group.masks[0].shape[0]} nodes, config wants {cfg.num_nodes}"
            )
        self.cfg = cfg
        self.scaler = scaler
        self.graph_block = GraphConstruction(
            num_nodes=cfg.num_nodes,
            t_in=cfg.t_in,
            in_features=cfg.in_features,
            embed_dim=cfg.embed_dim,
            hop_dim=cfg.hop_dim,
            proj_dim=cfg.hidden_dim,
            group=group,
            gamma=cfg.gamma,
            alpha=cfg.alpha,
            tau=cfg.tau,
            rng=rng,
        )
        self.input_layer = Linear(cfg.in_features, cfg.hidden_dim, rng)
        lengths = block_schedule(cfg.t_in, cfg.n_blocks, cfg.kernel_size)
        self.blocks = []
        t = cfg.t_in
        for _ in range(cfg.n_blocks):
            self.blocks.append(
                SpatioTemporalBlock(cfg.hidden_dim, cfg.diff_steps, cfg.kernel_size, t, rng)
            )
            t = t - 2 * (cfg.kernel_size - 1)
        assert lengths[-1] == t

        total = cfg.n_blocks * cfg.hidden_dim
        limit = np.sqrt(6.0 / (total + cfg.t_out * cfg.in_features))
        self.head_w = Parameter(
            rng.uniform(-limit, limit, size=(total, cfg.t_out, cfg.in_features))
        )
        self.head_b = Parameter(np.zeros((cfg.t_out, cfg.in_features)))
        self._named = self._collect_params()

    def _collect_params(self):
        named = [("graph." + k, p) for k, p in self.graph_block.params()]
        named.extend(("input." + k, p) for k, p in self.input_layer.params())
        for i, block in enumerate(self.blocks):
            named.extend((f"block{i}.{k}", p) for k, p in block.params())
        named.append(("head.w", self.head_w))
        named.append(("head.b", self.head_b))
        seen = set()
        for name, p in named:
            if name in seen:
                raise ConfigError(f"duplicate parameter name {name}")
            seen.add(name)
            p.name = name
        return named

    def parameters(self):
        """Ordered (name, Parameter) pairs; names are unique paths."""
        return list(self._named)

    def num_parameters(self):
        return sum(p.size for _, p in self._named)

    def forward(self, window_raw, mode="eval", rng=None, hop_mode="hard", want_diag=False):
        """Raw input window (B, T_in, N, F) to normalized predictions (B, T_out, N, F)."""
        cfg = self.cfg
        x = np.asarray(window_raw, dtype=np.float64)
        if x.ndim != 4 or x.shape[1] != cfg.t_in or x.shape[2] != cfg.num_nodes:
            raise ConfigError(
                f"forward: expected window of shape (B, {cfg.t_in}, {cfg.num_nodes}, {cfg.in_features}), got {x.shape}"
            )
        window = Tensor(self.scaler.apply(x))

        sample_edges = None
        if mode == "eval" and cfg.eval_sampling_override:
            sample_edges = True
        built = self.graph_block.build(
            window, mode, rng=rng, sample_edges=sample_edges, hop_mode=hop_mode, want_diag=want_diag
        )
        seq, diag = built if want_diag else (built, None)

        stream = self.input_layer(window)
        dropout = (cfg.dropout_rate, rng) if mode == "train" else None
        used = [] if want_diag else None
        offset = 0
        outputs = []
        for block in self.blocks:
            stream, block_out, offset = block.forward(
                stream, seq.adjacencies, offset, dropout=dropout, used_indices=used
            )
            outputs.append(block_out)

        feats = dc.concat(outputs, axis=-1)  # (B, N, n_blocks * D)
        pred = dc.einsum2("bic,ctf->btif", feats, self.head_w)
        pred = pred + self.head_b.reshape(1, cfg.t_out, 1, cfg.in_features)

        if want_diag:
            return pred, ForwardDiagnostics(seq=seq, graphs=diag, graph_indices=used)
        return pred

    def predict_raw(self, window_raw, mode="eval", rng=None):
        """Predictions in original units (no tape)."""
        with dc.no_grad():
            pred = self.forward(window_raw, mode=mode, rng=rng)
        return self.scaler.invert(pred.data)

    def state_arrays(self):
        """Copy of every parameter array, keyed by name."""
        return {name: p.data.copy() for name, p in self._named}

    def load_state_arrays(self, state):
        for name, p in self._named:
            if name not in state:
                raise ConfigError(f"missing parameter {name} in state")
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ConfigError(
                    f"parameter {name}: expected shape {p.data.shape}, got {arr.shape}"
                )
            p.data[...] = arr


@dataclass
class ForwardDiagnostics:
    """Graph internals plus the graph index used by every spatial slice."""

    seq: object
    graphs: object
    graph_indices: list = field(default_factory=list)
