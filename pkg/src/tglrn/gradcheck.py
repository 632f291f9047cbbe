"""Central finite-difference verification of analytic gradients.

``finite_diff_check`` re-evaluates a user-supplied loss builder while
perturbing each parameter element by +/- eps, and compares the resulting
central-difference slope against the gradient produced by one backward
pass. Callers are responsible for freezing any stochastic draws inside
the loss builder (e.g. by reseeding a generator on every call) so that
the function being differenced is the same function every time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["GradCheckReport", "finite_diff_check", "max_relative_error"]


@dataclass
class GradCheckReport:
    name: str
    max_rel_err: float
    tolerance: float

    @property
    def passed(self):
        return bool(self.max_rel_err < self.tolerance)

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<32s} max_rel_err={self.max_rel_err:.3e} (tol {self.tolerance:g})"


def max_relative_error(analytic, numeric, floor=1e-4):
    """Elementwise |a - n| / max(|a|, |n|, floor), reduced to the maximum.

    The floor turns the comparison absolute for elements below it: a
    central difference of an O(1) function at step 1e-5 carries roundoff
    noise near 1e-10, so demanding relative agreement on 1e-7-sized
    gradient entries would reject correct derivatives. With the floor,
    sub-floor entries must still agree to floor * tolerance absolutely.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / denom))


def _numeric_grad(build_loss, param, eps):
    grad = np.zeros_like(param.data)
    flat = param.data.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = float(build_loss().data)
        flat[i] = orig - eps
        f_minus = float(build_loss().data)
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def finite_diff_check(build_loss, params, eps=1e-5, tolerance=1e-4):
    """Compare analytic and central-difference gradients per parameter.

    ``build_loss`` must take no arguments and return a scalar Tensor built
    from the current values of ``params`` (a list of Parameters, or of
    (name, Parameter) pairs). Returns one GradCheckReport per parameter.
    """
    if eps <= 0:
        raise ValueError("finite_diff_check: eps must be positive")
    named = []
    for i, p in enumerate(params):
        if isinstance(p, tuple):
            named.append(p)
        else:
            named.append((p.name or f"param{i}", p))

    for _, p in named:
        p.zero_grad()
    loss = build_loss()
    loss.backward()
    analytic = {name: p.grad.copy() for name, p in named}

    reports = []
    for name, p in named:
        numeric = _numeric_grad(build_loss, p, eps)
        reports.append(GradCheckReport(name, max_relative_error(analytic[name], numeric), tolerance))
    return reports


# -- layer-by-layer verification suite -------------------------------------------


def _weighted_sum(out, weights):
    from .diffcore import Tensor

    return (out * Tensor(weights)).sum()


def _check_linear_input_layer(seed):
    from .diffcore import Linear, Parameter

    rng = np.random.default_rng([seed, 1])
    lin = Linear(1, 8, rng)
    x = Parameter(rng.standard_normal((4, 1)), "x")
    r = rng.standard_normal((4, 8))
    params = [("w", lin.w), ("b", lin.b), ("x", x)]
    return finite_diff_check(lambda: _weighted_sum(lin(x), r), params)


def _check_gru_cell(seed):
    from .diffcore import Parameter
    from .dyngraph import GruCell

    rng = np.random.default_rng([seed, 2])
    cell = GruCell(embed_dim=4, in_features=1, proj_dim=6, rng=rng)
    e = Parameter(rng.standard_normal((3, 4)), "e")
    x = Parameter(rng.standard_normal((3, 1)), "x")
    r = rng.standard_normal((3, 4))
    params = [("e", e), ("x", x)] + cell.params()
    return finite_diff_check(lambda: _weighted_sum(cell.step(e, x), r), params)


def _check_gating(seed):
    from .diffcore import Linear, Parameter
    from .dyngraph import gate

    rng = np.random.default_rng([seed, 3])
    lin = Linear(4, 4, rng)
    e = Parameter(rng.standard_normal((3, 4)), "e")
    base = Parameter(rng.standard_normal((3, 4)), "base")
    r = rng.standard_normal((3, 4))
    params = [("e", e), ("base", base)] + lin.params()
    return finite_diff_check(lambda: _weighted_sum(gate(e, base, lin), r), params)


def _check_edge_logits(seed):
    from .diffcore import Parameter
    from .dyngraph import edge_logits

    rng = np.random.default_rng([seed, 4])
    e_st = Parameter(rng.standard_normal((3, 4)), "e_st")
    e_ed = Parameter(rng.standard_normal((3, 4)), "e_ed")
    w = Parameter(rng.standard_normal((8, 1)), "w")
    b = Parameter(rng.standard_normal(1), "b")
    r = rng.standard_normal((3, 3))
    params = [("e_st", e_st), ("e_ed", e_ed), ("w", w), ("b", b)]
    return finite_diff_check(lambda: _weighted_sum(edge_logits(e_st, e_ed, w, b), r), params)


def _check_normalize_sigmoid(seed):
    from .diffcore import Parameter
    from .dyngraph import bernoulli_means, normalize_logits

    rng = np.random.default_rng([seed, 5])
    w = Parameter(rng.standard_normal((4, 4)), "w")
    r = rng.standard_normal((4, 4))
    return finite_diff_check(
        lambda: _weighted_sum(bernoulli_means(normalize_logits(w, 1.0)), r), [("w", w)]
    )


def _check_gumbel_path(seed):
    from .diffcore import Parameter
    from .dyngraph import bernoulli_means, gumbel_relax, normalize_logits

    rng = np.random.default_rng([seed, 6])
    w = Parameter(rng.standard_normal((4, 4)), "w")
    delta = rng.uniform(size=(4, 4))
    r = rng.standard_normal((4, 4))

    def build():
        p = gumbel_relax(bernoulli_means(normalize_logits(w, 1.0)), 1.0, delta)
        return _weighted_sum(p, r)

    return finite_diff_check(build, [("w", w)])


def _check_hop_selector(seed):
    from .diffcore import Linear, Parameter
    from .dyngraph import hop_probs

    rng = np.random.default_rng([seed, 7])
    lin1 = Linear(4, 4, rng)
    lin2 = Linear(4, 3, rng)
    e = Parameter(rng.standard_normal((5, 4)), "e_h")
    r = rng.standard_normal((5, 3))
    params = [("e_h", e)] + [(f"l1.{k}", p) for k, p in lin1.params()] + [
        (f"l2.{k}", p) for k, p in lin2.params()
    ]
    return finite_diff_check(lambda: _weighted_sum(hop_probs(e, lin1, lin2), r), params)


def _check_diffusion_conv(seed):
    from .diffcore import Parameter
    from .stnet import diffusion_conv

    rng = np.random.default_rng([seed, 8])
    x = Parameter(rng.standard_normal((5, 4)), "x")
    a_raw = Parameter(rng.standard_normal((5, 5)), "a_raw")
    theta = Parameter(rng.standard_normal((2, 2, 4, 4)) * 0.3, "theta")
    r = rng.standard_normal((5, 4))

    def build():
        return _weighted_sum(diffusion_conv(x, a_raw.sigmoid(), theta, 2), r)

    return finite_diff_check(build, [("x", x), ("a_raw", a_raw), ("theta", theta)])


def _check_gtu(seed):
    from .diffcore import Parameter
    from .stnet import gtu_conv

    rng = np.random.default_rng([seed, 9])
    x = Parameter(rng.standard_normal((4, 3, 2)), "x")
    lam = Parameter(rng.standard_normal((2, 2, 4)) * 0.5, "lam")
    r = rng.standard_normal((3, 3, 2))
    return finite_diff_check(lambda: _weighted_sum(gtu_conv(x, lam, 2), r), [("x", x), ("lam", lam)])


def _check_tpl(seed):
    from .diffcore import Parameter
    from .stnet import tpl

    rng = np.random.default_rng([seed, 10])
    x = Parameter(rng.standard_normal((4, 3, 2)), "x")
    lam = Parameter(rng.standard_normal((2, 2, 4)) * 0.5, "lam")
    scale = Parameter(rng.standard_normal(2), "scale")
    shift = Parameter(rng.standard_normal(2), "shift")
    r = rng.standard_normal((3, 3, 2))
    params = [("x", x), ("lam", lam), ("ln_scale", scale), ("ln_shift", shift)]
    return finite_diff_check(lambda: _weighted_sum(tpl(x, lam, 2, scale, shift), r), params)


def _check_output_layer(seed):
    from .diffcore import Parameter
    from .stnet import OutputLayer

    rng = np.random.default_rng([seed, 11])
    layer = OutputLayer(3, 4, rng)
    x = Parameter(rng.standard_normal((3, 2, 4)), "x")
    r = rng.standard_normal((2, 4))
    params = [("x", x)] + layer.params()
    return finite_diff_check(lambda: _weighted_sum(layer(x), r), params)


def _check_prediction_head(seed):
    from . import diffcore as dc
    from .diffcore import Parameter

    rng = np.random.default_rng([seed, 12])
    feats = Parameter(rng.standard_normal((2, 3, 8)), "feats")
    w = Parameter(rng.standard_normal((8, 2, 1)) * 0.3, "w")
    b = Parameter(rng.standard_normal((2, 1)), "b")
    r = rng.standard_normal((2, 2, 3, 1))

    def build():
        pred = dc.einsum2("bic,ctf->btif", feats, w) + b.reshape(1, 2, 1, 1)
        return _weighted_sum(pred, r)

    return finite_diff_check(build, [("feats", feats), ("w", w), ("b", b)])


def toy_model(seed=0):
    """4-node chain model small enough for exhaustive finite differencing."""
    from .data import Scaler
    from .model import ModelConfig
    from .trainer import build_model

    cfg = ModelConfig(
        num_nodes=4,
        t_in=6,
        t_out=2,
        embed_dim=4,
        hop_dim=4,
        hidden_dim=8,
        levels=2,
        diff_steps=2,
        kernel_size=2,
        n_blocks=1,
        gamma=0.3,
        dropout_rate=0.1,
    )
    scaler = Scaler(mean=np.full((4, 1), 5.0), std=np.full((4, 1), 2.0))
    return build_model(cfg, edges=[(0, 1), (1, 2), (2, 3)], scaler=scaler, seed=seed)


def _check_end_to_end(seed):
    from .trainer import mae_loss

    model = toy_model(seed)
    data_rng = np.random.default_rng([seed, 13])
    window = data_rng.normal(5.0, 2.0, size=(1, 6, 4, 1))
    target = data_rng.normal(5.0, 2.0, size=(1, 2, 4, 1))

    def build():
        noise = np.random.default_rng([seed, 14])  # frozen draws: same stream every call
        pred = model.forward(window, mode="train", rng=noise, hop_mode="soft")
        pred_raw = pred * model.scaler.std + model.scaler.mean
        return mae_loss(pred_raw, target)

    return finite_diff_check(build, model.parameters())


_SUITE = [
    ("input_layer", _check_linear_input_layer),
    ("gru_cell", _check_gru_cell),
    ("gating", _check_gating),
    ("edge_logits", _check_edge_logits),
    ("normalize_sigmoid", _check_normalize_sigmoid),
    ("gumbel_path", _check_gumbel_path),
    ("hop_selector", _check_hop_selector),
    ("diffusion_conv", _check_diffusion_conv),
    ("gtu", _check_gtu),
    ("tpl_layernorm", _check_tpl),
    ("output_layer", _check_output_layer),
    ("prediction_head", _check_prediction_head),
    ("end_to_end", _check_end_to_end),
]


def run_gradcheck_suite(seed=0, quick=False):
    """Finite-difference reports for every layer and the end-to-end toy model."""
    reports = []
    for label, fn in _SUITE:
        if quick and label == "end_to_end":
            continue
        for rep in fn(seed):
            reports.append(GradCheckReport(f"{label}/{rep.name}", rep.max_rel_err, rep.tolerance))
    return reports
