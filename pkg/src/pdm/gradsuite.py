"""Registry of finite-difference gradient checks over ops, modules and losses.

Hinge losses are sampled at random points and resampled until every hinge
argument (and every max/min selection gap) is more than ``10 * eps`` from
its kink, so central differences never straddle a non-differentiable point.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from pdm import ndnum as nd
from pdm.losses import (
    IR,
    VIS,
    ClassifierParams,
    IdentityBatch,
    compute_centers,
    cosine_heterogeneity_loss,
    cpm_loss,
    dual_center_separation_loss,
    identity_loss,
    total_loss,
    triplet_loss,
)
from pdm.mfgm import MfgmConfig, init_params, mfgm_forward
from pdm.ndnum import Tensor, grad_check
from pdm.plm import PrototypeBank, plm_forward

EPS = 1e-5
TOLERANCE = 1e-5
KINK_CLEARANCE = 10 * EPS
MAX_RESAMPLES = 1000

Check = Callable[[np.random.Generator], float]


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error < TOLERANCE)


def _away_from_zero(rng, shape, clearance=KINK_CLEARANCE):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < clearance, np.copysign(2 * clearance, x), x)


# ---------------------------------------------------------------------------
# ops


def _binary(op):
    def check(rng):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        w = Tensor(rng.normal(size=(3, 4)))
        return max(
            grad_check(lambda t: nd.sum(op(t, Tensor(b)) * w), a, EPS),
            grad_check(lambda t: nd.sum(op(Tensor(a), t) * w), b, EPS),
        )
    return check


def _check_div(rng):
    a = rng.normal(size=(3, 4))
    b = rng.uniform(0.5, 2.0, size=(3, 4)) * rng.choice([-1, 1], size=(3, 4))
    w = Tensor(rng.normal(size=(3, 4)))
    return max(
        grad_check(lambda t: nd.sum(nd.div(t, Tensor(b)) * w), a, EPS),
        grad_check(lambda t: nd.sum(nd.div(Tensor(a), t) * w), b, EPS),
    )


def _unary(op, sampler=None):
    def check(rng):
        x = sampler(rng) if sampler else rng.normal(size=(3, 4))
        w = Tensor(rng.normal(size=x.shape))
        return grad_check(lambda t: nd.sum(op(t) * w), x, EPS)
    return check


def _check_matmul(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    w = Tensor(rng.normal(size=(3, 2)))
    return max(
        grad_check(lambda t: nd.sum(nd.matmul(t, Tensor(b)) * w), a, EPS),
        grad_check(lambda t: nd.sum(nd.matmul(Tensor(a), t) * w), b, EPS),
    )


def _check_conv(dilation):
    def check(rng):
        x, k = rng.normal(size=(2, 2, 5, 4)), rng.normal(size=(3, 2, 3, 3))
        bias = rng.normal(size=3)
        w = Tensor(rng.normal(size=(2, 3, 5, 4)))
        return max(
            grad_check(lambda t: nd.sum(nd.conv2d(t, Tensor(k), dilation, Tensor(bias)) * w), x, EPS),
            grad_check(lambda t: nd.sum(nd.conv2d(Tensor(x), t, dilation, Tensor(bias)) * w), k, EPS),
            grad_check(lambda t: nd.sum(nd.conv2d(Tensor(x), Tensor(k), dilation, t) * w), bias, EPS),
        )
    return check


def _check_reduce(kind):
    def check(rng):
        x = rng.normal(size=(3, 4, 2))
        if kind == "max":
            # distinct entries well apart so the arg-max is stable under perturbation
            x = rng.permutation(np.arange(x.size, dtype=float)).reshape(x.shape) * 0.1 + rng.normal(size=x.shape) * 1e-3
        w = Tensor(rng.normal(size=(3, 2)))
        return grad_check(lambda t: nd.sum(nd.reduce(kind, t, axis=1) * w), x, EPS)
    return check


def _check_logsumexp(rng):
    x = rng.normal(size=(3, 5))
    w = Tensor(rng.normal(size=3))
    return grad_check(lambda t: nd.sum(nd.logsumexp(t, axis=1) * w), x, EPS)


def _check_concat(rng):
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 4))
    w = Tensor(rng.normal(size=(2, 7)))
    return max(
        grad_check(lambda t: nd.sum(nd.concat([t, Tensor(b)], axis=1) * w), a, EPS),
        grad_check(lambda t: nd.sum(nd.concat([Tensor(a), t], axis=1) * w), b, EPS),
    )


def _check_reshape_transpose(rng):
    x = rng.normal(size=(2, 3, 4))
    w = Tensor(rng.normal(size=(4, 6)))
    return grad_check(lambda t: nd.sum(nd.transpose(nd.reshape(t, (6, 4))) * w), x, EPS)


def _check_getitem(rng):
    x = rng.normal(size=(5, 3))
    idx = np.array([0, 2, 2, 4])
    w = Tensor(rng.normal(size=(4, 3)))
    return grad_check(lambda t: nd.sum(nd.getitem(t, idx) * w), x, EPS)


def _check_norm(rng):
    x = rng.normal(size=(4, 3))
    w = Tensor(rng.normal(size=4))
    return grad_check(lambda t: nd.sum(nd.norm(t, axis=1) * w), x, EPS)


def _check_pairwise(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(5, 4))
    w = Tensor(rng.normal(size=(3, 5)))
    return max(
        grad_check(lambda t: nd.sum(nd.pairwise_euclidean(t, Tensor(b)) * w), a, EPS),
        grad_check(lambda t: nd.sum(nd.pairwise_euclidean(Tensor(a), t) * w), b, EPS),
    )


def _check_cosine(rng):
    u, v = rng.normal(size=6), rng.normal(size=6)
    return max(
        grad_check(lambda t: nd.cosine(t, Tensor(v)), u, EPS),
        grad_check(lambda t: nd.cosine(Tensor(u), t), v, EPS),
    )


# ---------------------------------------------------------------------------
# modules


def _check_mfgm(rng):
    cfg = MfgmConfig(channels=4, num_branches=2)
    params = init_params(cfg, rng)
    x = rng.normal(size=(2, 4, 3, 3))
    w = Tensor(rng.normal(size=(2, 12, 3, 3)))
    return grad_check(lambda t: nd.sum(mfgm_forward(t, cfg, params) * w), x, EPS)


def _check_plm(rng):
    bank = PrototypeBank.init(3, 4, rng)
    x = rng.normal(size=(2, 4, 3, 2))
    w = Tensor(rng.normal(size=(2, 16)))
    return max(
        grad_check(lambda t: nd.sum(plm_forward(bank, t)[0] * w), x, EPS),
        grad_check(lambda t: nd.sum(plm_forward(PrototypeBank(t), Tensor(x))[0] * w), bank.P.data, EPS),
    )


# ---------------------------------------------------------------------------
# losses


def _labels(ids, per):
    labels, mods = [], []
    for j in range(ids):
        for mod in (VIS, IR):
            labels += [j] * per
            mods += [mod] * per
    return np.array(labels), np.array(mods)


def _pairwise_np(a, b):
    return np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))


def _group_means(x, labels, mods=None, mod=None):
    ids = np.unique(labels)
    keep = np.ones(len(labels), bool) if mods is None else (mods == mod)
    return np.stack([x[(labels == y) & keep].mean(axis=0) for y in ids])


def cpm_kink_distance(originals, branches, labels, mods, alpha):
    vis, ir = _group_means(originals, labels, mods, VIS), _group_means(originals, labels, mods, IR)
    J = len(vis)
    off = ~np.eye(J, dtype=bool)
    args = []
    for own, other, mod in ((vis, ir, VIS), (ir, vis, IR)):
        between = _pairwise_np(own, own)
        for br in branches:
            g = _group_means(br, labels, mods, mod)
            gap = np.linalg.norm(other - g, axis=1) - np.linalg.norm(own - g, axis=1)
            args.append((gap[:, None] - between + alpha)[off])
    return float(np.min(np.abs(np.concatenate(args))))


def dcs_kink_distance(F, labels, rho1, rho2):
    cent = _group_means(F, labels)
    own = cent[np.searchsorted(np.unique(labels), labels)]
    args = [np.linalg.norm(F - own, axis=1) - rho1]
    M = len(cent)
    if M > 1:
        iu = np.triu_indices(M, 1)
        args.append(rho2 - _pairwise_np(cent, cent)[iu])
    return float(np.min(np.abs(np.concatenate(args))))


def triplet_kink_distance(F, labels, margin):
    D = _pairwise_np(F, F)
    same = labels[:, None] == labels[None, :]
    gaps = []
    for a in range(len(F)):
        pos = np.sort(D[a][same[a]])[::-1]
        neg = np.sort(D[a][~same[a]])
        gaps.append(abs(pos[0] - neg[0] + margin))
        if len(pos) > 1:
            gaps.append(pos[0] - pos[1])
        if len(neg) > 1:
            gaps.append(neg[1] - neg[0])
    return float(min(gaps))


def _resample(draw, kink_distance, rng):
    for _ in range(MAX_RESAMPLES):
        sample = draw(rng)
        if kink_distance(*sample) > KINK_CLEARANCE:
            return sample
    raise RuntimeError("could not sample a point away from hinge kinks")


def _check_triplet(rng):
    labels, mods = _labels(3, 2)
    F, _ = _resample(
        lambda r: (r.normal(size=(len(labels), 4)) * 0.4, None),
        lambda F, _: triplet_kink_distance(F, labels, 0.3),
        rng,
    )
    return grad_check(lambda t: triplet_loss(IdentityBatch(t, labels, mods), 0.3), F, EPS)


def _check_dcs(rng):
    labels, mods = _labels(3, 2)
    F, _ = _resample(
        lambda r: (r.normal(size=(len(labels), 4)) * 0.5, None),
        lambda F, _: dcs_kink_distance(F, labels, 0.1, 1.0),
        rng,
    )
    return grad_check(
        lambda t: dual_center_separation_loss(IdentityBatch(t, labels, mods), rho1=0.1, rho2=1.0), F, EPS
    )


def _check_cpm(rng):
    labels, mods = _labels(3, 2)
    n = len(labels)
    orig, branches = _resample(
        lambda r: (r.normal(size=(n, 4)) * 0.5, [r.normal(size=(n, 4)) * 0.5 for _ in range(2)]),
        lambda o, b: cpm_kink_distance(o, b, labels, mods, 0.3),
        rng,
    )

    def loss(o, b):
        batch = IdentityBatch(o, labels, mods, originals=o, branches=b)
        return cpm_loss(compute_centers(batch), 0.3)

    return max(
        grad_check(lambda t: loss(t, [Tensor(x) for x in branches]), orig, EPS),
        grad_check(lambda t: loss(Tensor(orig), [t, Tensor(branches[1])]), branches[0], EPS),
    )


def _check_ch(variant):
    mods = np.array([VIS, IR, IR])

    def draw(rng):
        return rng.normal(size=(4, 5)), rng.normal(size=(3, 6, 5))

    def kink(P, pixels):
        # the prose form hinges the mean cosine at zero; stay on the active side
        # so the check exercises a non-trivial gradient
        if variant != "prose":
            return np.inf
        return 1.0 - float(cosine_heterogeneity_loss(PrototypeBank(Tensor(P)), Tensor(pixels), "as-written", mods).data)

    def check(rng):
        P, pixels = _resample(draw, kink, rng)
        return max(
            grad_check(lambda t: cosine_heterogeneity_loss(PrototypeBank(t), Tensor(pixels), variant, mods), P, EPS),
            grad_check(lambda t: cosine_heterogeneity_loss(PrototypeBank(Tensor(P)), t, variant, mods), pixels, EPS),
        )
    return check


def _check_identity(rng):
    labels = rng.integers(0, 4, 8)
    params = ClassifierParams.init(5, 4, rng, std=0.5)
    F = rng.normal(size=(8, 5))
    gamma = rng.uniform(0.5, 1.5, 5)
    return max(
        grad_check(lambda t: identity_loss(t, labels, params), F, EPS),
        grad_check(
            lambda t: identity_loss(Tensor(F), labels, ClassifierParams(params.gamma, params.beta, t)),
            params.weight.data, EPS,
        ),
        grad_check(
            lambda t: identity_loss(Tensor(F), labels, ClassifierParams(t, params.beta, params.weight)),
            gamma, EPS,
        ),
    )


def _check_total(rng):
    w = rng.normal(size=5)

    def fn(t):
        parts = {name: nd.sigmoid(t[i]) * float(w[i]) for i, name in enumerate(("id", "tri", "ch", "dcs", "cpm"))}
        return total_loss(parts).tensor

    return grad_check(fn, rng.normal(size=5), EPS)


REGISTRY: dict[str, Check] = {
    "op:add": _binary(nd.add),
    "op:sub": _binary(nd.sub),
    "op:mul": _binary(nd.mul),
    "op:div": _check_div,
    "op:exp": _unary(nd.exp),
    "op:log": _unary(nd.log, lambda r: r.uniform(0.5, 3.0, size=(3, 4))),
    "op:sqrt": _unary(nd.sqrt, lambda r: r.uniform(0.5, 3.0, size=(3, 4))),
    "op:relu": _unary(nd.relu, lambda r: _away_from_zero(r, (3, 4))),
    "op:sigmoid": _unary(nd.sigmoid),
    "op:matmul": _check_matmul,
    "op:conv2d[d=1]": _check_conv(1),
    "op:conv2d[d=2]": _check_conv(2),
    "op:conv2d[d=3]": _check_conv(3),
    "op:sum": _check_reduce("sum"),
    "op:mean": _check_reduce("mean"),
    "op:max": _check_reduce("max"),
    "op:logsumexp": _check_logsumexp,
    "op:concat": _check_concat,
    "op:reshape+transpose": _check_reshape_transpose,
    "op:getitem": _check_getitem,
    "op:norm": _check_norm,
    "op:pairwise_euclidean": _check_pairwise,
    "op:cosine": _check_cosine,
    "module:mfgm_forward": _check_mfgm,
    "module:plm_forward": _check_plm,
    "loss:identity": _check_identity,
    "loss:triplet": _check_triplet,
    "loss:cosine_heterogeneity[prose]": _check_ch("prose"),
    "loss:cosine_heterogeneity[as-written]": _check_ch("as-written"),
    "loss:dual_center_separation": _check_dcs,
    "loss:center_pair_mining": _check_cpm,
    "loss:total": _check_total,
}


def run_suite(registry: dict[str, Check] | None = None, seed: int = 0, points: int = 3) -> list[CheckResult]:
    """Run every check at ``points`` independently drawn points; report the worst error."""
    registry = REGISTRY if registry is None else registry
    results = []
    for i, (name, check) in enumerate(registry.items()):
        rng = np.random.default_rng([seed, i])
        start = time.perf_counter()
        try:
            worst = max(check(rng) for _ in range(points))
        except Exception:  # a crashing check is a failing check
            worst = float("inf")
        results.append(CheckResult(name, float(worst), time.perf_counter() - start))
    return results


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  {'max rel err':>12}  status"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.max_rel_error:12.3e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
