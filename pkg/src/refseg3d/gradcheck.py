"""Central finite-difference gradient checking.

The analytic gradients from :mod:`refseg3d.autodiff` are verified against
a second, independent route: central differences (f(x+h) - f(x-h)) / 2h at
fp64.  The relative error for a gradient component a with numeric estimate
n is |a - n| / max(1, |a|, |n|); the floor of 1 keeps finite-difference
rounding noise from dominating near-zero gradients.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tape, Tensor


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    passed: bool

    def __str__(self) -> str:
        flag = "ok" if self.passed else "FAIL"
        return f"{self.name}: max rel err {self.max_rel_err:.3e} [{flag}]"


def finite_difference_check(
    fn: Callable[[], Tensor],
    leaves: Sequence[Tensor],
    h: float = 1e-5,
    sample: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Return the worst relative error between analytic and numeric grads.

    ``fn`` must rebuild the scalar loss from the ``leaves`` on every call
    (their ``.data`` is perturbed in place between calls).  With ``sample``
    set, only that many randomly chosen components per leaf are probed.
    """
    for leaf in leaves:
        leaf.zero_grad()
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)

    worst = 0.0
    for leaf in leaves:
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        indices = np.arange(flat.size)
        if sample is not None and sample < flat.size:
            if rng is None:
                rng = np.random.default_rng(0)
            indices = rng.choice(flat.size, size=sample, replace=False)
        for i in indices:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(fn().data)
            flat[i] = orig - h
            f_minus = float(fn().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# named check suites
#
# Each suite runs several randomized instances of one building block and
# returns the worst relative error seen.  The registry drives both the
# command-line checker and the release gate.

INSTANCES = 5
TOLERANCE = 1e-4

_SUITES: dict[str, Callable[[np.random.Generator, float], float]] = {}


def _suite(name: str):
    def register(fn):
        _SUITES[name] = fn
        return fn
    return register


def suite_names() -> list[str]:
    return sorted(_SUITES)


def _leaf(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.normal(0.0, scale, shape), requires_grad=True)


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    from . import autodiff as ad
    return ad.sum_(ad.mul(out, Tensor(weights)))


@_suite("elementwise")
def _check_elementwise(rng, h):
    from . import autodiff as ad
    worst = 0.0
    for _ in range(INSTANCES):
        x, y, z = _leaf(rng, 6), _leaf(rng, 6), _leaf(rng, 6)

        def fn():
            mixed = ad.add(ad.mul(ad.tanh(x), ad.sigmoid(y)), ad.softplus(z))
            return ad.sum_(ad.mul(mixed, ad.relu(ad.add(x, y))))

        worst = max(worst, finite_difference_check(fn, [x, y, z], h=h))
    return worst


@_suite("matmul")
def _check_matmul(rng, h):
    worst = 0.0
    for _ in range(INSTANCES):
        a, b = _leaf(rng, 3, 4), _leaf(rng, 4, 2)
        c = rng.normal(size=(3, 2))
        from . import autodiff as ad
        worst = max(worst, finite_difference_check(
            lambda: _weighted_sum(ad.matmul(a, b), c), [a, b], h=h))
    return worst


@_suite("softmax")
def _check_softmax(rng, h):
    from . import autodiff as ad
    worst = 0.0
    for _ in range(INSTANCES):
        x = _leaf(rng, 3, 5)
        c = rng.normal(size=(3, 5))
        worst = max(worst, finite_difference_check(
            lambda: _weighted_sum(ad.softmax(x, axis=-1), c), [x], h=h))
    return worst


@_suite("masked_softmax")
def _check_masked_softmax(rng, h):
    from . import autodiff as ad
    worst = 0.0
    for _ in range(INSTANCES):
        x = _leaf(rng, 3, 5)
        mask = (rng.random((3, 5)) < 0.6).astype(np.float64)
        mask[np.arange(3), rng.integers(0, 5, 3)] = 1.0  # keep rows visible
        c = rng.normal(size=(3, 5))
        worst = max(worst, finite_difference_check(
            lambda: _weighted_sum(ad.softmax(x, axis=-1, mask=mask), c),
            [x], h=h))
    return worst


@_suite("normalize")
def _check_normalize(rng, h):
    from . import autodiff as ad
    worst = 0.0
    for _ in range(INSTANCES):
        x = _leaf(rng, 4, 3)
        c = rng.normal(size=(4, 3))
        worst = max(worst, finite_difference_check(
            lambda: _weighted_sum(ad.l2_normalize_rows(x), c), [x], h=h))
    return worst


@_suite("attention")
def _check_attention(rng, h):
    from .fusion import CrossAttention
    worst = 0.0
    for _ in range(INSTANCES):
        attn = CrossAttention(rng, dim=4)
        queries, keyvals = _leaf(rng, 2, 4), _leaf(rng, 6, 4)
        c = rng.normal(size=(2, 4))
        leaves = [queries, keyvals] + list(attn.params.values())
        worst = max(worst, finite_difference_check(
            lambda: _weighted_sum(attn.forward(queries, keyvals), c),
            leaves, h=h))
    return worst


@_suite("gru_cell")
def _check_gru_cell(rng, h):
    from .text import gru_cell
    worst = 0.0
    for _ in range(INSTANCES):
        dim = 4
        x, hidden = _leaf(rng, 1, dim), _leaf(rng, 1, dim)
        p = {}
        for gate in ("r", "z", "n"):
            p[f"W{gate}"] = _leaf(rng, dim, dim)
            p[f"U{gate}"] = _leaf(rng, dim, dim)
            p[f"b{gate}"] = _leaf(rng, dim)
        c = rng.normal(size=(1, dim))
        leaves = [x, hidden] + list(p.values())
        worst = max(worst, finite_difference_check(
            lambda: _weighted_sum(gru_cell(x, hidden, p), c), leaves, h=h))
    return worst


@_suite("fusion_gated")
def _check_fusion_gated(rng, h):
    from .fusion import GatedWordFusion
    worst = 0.0
    for _ in range(INSTANCES):
        stage = GatedWordFusion(rng, word_dim=4, stage_dim=3)
        # the output layer initializes to zero; randomize it so gradient
        # reaches the whole branch
        stage.params["gate2"].data[...] = rng.normal(0.0, 0.5, (3, 3))
        stage.params["gate2_b"].data[...] = rng.normal(0.0, 0.5, 3)
        voxels, words = _leaf(rng, 5, 3), _leaf(rng, 3, 4)
        c = rng.normal(size=(5, 3))
        leaves = [voxels, words] + list(stage.params.values())
        worst = max(worst, finite_difference_check(
            lambda: _weighted_sum(stage.forward(voxels, words), c),
            leaves, h=h))
    return worst


@_suite("fusion_additive")
def _check_fusion_additive(rng, h):
    from .fusion import AdditiveWordFusion
    worst = 0.0
    for _ in range(INSTANCES):
        stage = AdditiveWordFusion(rng, word_dim=4, stage_dim=3)
        voxels, words = _leaf(rng, 5, 3), _leaf(rng, 3, 4)
        c = rng.normal(size=(5, 3))
        leaves = [voxels, words] + list(stage.params.values())
        worst = max(worst, finite_difference_check(
            lambda: _weighted_sum(stage.forward(voxels, words), c),
            leaves, h=h))
    return worst


@_suite("sparse_conv")
def _check_sparse_conv(rng, h):
    from .sparse import SparseVoxelTensor, sparse_conv
    worst = 0.0
    for _ in range(INSTANCES):
        coords = np.unique(rng.integers(-2, 3, (12, 3)), axis=0)
        feats = _leaf(rng, coords.shape[0], 2)
        kernel = _leaf(rng, 3, 3, 3, 2, 3, scale=0.5)
        c = rng.normal(size=(coords.shape[0], 3))

        def fn():
            out = sparse_conv(SparseVoxelTensor(1, coords, feats), kernel)
            return _weighted_sum(out.features, c)

        worst = max(worst, finite_difference_check(fn, [feats, kernel], h=h))
    return worst


@_suite("decoder_layer")
def _check_decoder_layer(rng, h):
    from .head import HeadConfig, MaskDecoder
    worst = 0.0
    done = 0
    while done < INSTANCES:
        decoder = MaskDecoder(rng, HeadConfig(queries=2, layers=1), dim=4)
        feats = _leaf(rng, 7, 4)
        # resample when a proposal logit sits on the visibility threshold:
        # central differences would step across the discontinuity
        init = decoder.init_state(feats)
        state = decoder.forward(feats)
        margin = min(np.abs(init.mask_logits.data).min(),
                     np.abs(state.mask_logits.data).min())
        if margin < 1e-3:
            continue
        c = rng.normal(size=(2, 7))
        leaves = [feats] + list(decoder.params.values())
        worst = max(worst, finite_difference_check(
            lambda: _weighted_sum(decoder.forward(feats).mask_logits, c),
            leaves, h=h))
        done += 1
    return worst


@_suite("seg_loss")
def _check_seg_loss(rng, h):
    from .losses import seg_loss
    worst = 0.0
    for _ in range(INSTANCES):
        logits = _leaf(rng, 1, 9, scale=2.0)
        targets = (rng.random(9) < 0.5).astype(np.int64)
        worst = max(worst, finite_difference_check(
            lambda: seg_loss(logits, targets), [logits], h=h))
    return worst


@_suite("area_loss")
def _check_area_loss(rng, h):
    from .losses import area_loss
    worst = 0.0
    for _ in range(INSTANCES):
        logits = _leaf(rng, 1, 9, scale=2.0)
        worst = max(worst, finite_difference_check(
            lambda: area_loss(logits), [logits], h=h))
    return worst


@_suite("p2p_loss")
def _check_p2p_loss(rng, h):
    from .losses import LossConfig, p2p_loss
    worst = 0.0
    for i in range(INSTANCES):
        form = ("log_form", "as_written")[i % 2]
        cfg = LossConfig(tau=0.2, p2p_form=form, max_negatives=4096)
        feats = _leaf(rng, 10, 4)
        targets = np.zeros(10, dtype=np.int64)
        targets[rng.choice(10, 4, replace=False)] = 1
        sub_rng = np.random.default_rng(0)
        worst = max(worst, finite_difference_check(
            lambda: p2p_loss(feats, targets, cfg, sub_rng), [feats], h=h))
    return worst


@_suite("total_loss")
def _check_total_loss(rng, h):
    from .losses import LossConfig, area_loss, p2p_loss, seg_loss, total_loss
    worst = 0.0
    for _ in range(INSTANCES):
        cfg = LossConfig(tau=0.2, max_negatives=4096)
        logits = _leaf(rng, 1, 10, scale=2.0)
        feats = _leaf(rng, 10, 4)
        targets = np.zeros(10, dtype=np.int64)
        targets[rng.choice(10, 4, replace=False)] = 1
        sub_rng = np.random.default_rng(0)

        def fn():
            return total_loss(seg_loss(logits, targets), area_loss(logits),
                              p2p_loss(feats, targets, cfg, sub_rng), cfg)

        worst = max(worst, finite_difference_check(fn, [logits, feats], h=h))
    return worst


def run_suite(name: str, seed: int = 0, h: float = 1e-5,
              tolerance: float = TOLERANCE) -> CheckResult:
    if name not in _SUITES:
        from .errors import ContractError
        raise ContractError(f"unknown check suite {name!r}; "
                            f"available: {suite_names()}")
    rng = np.random.default_rng(seed)
    err = _SUITES[name](rng, h)
    return CheckResult(name=name, max_rel_err=err, passed=err < tolerance)


def run_suites(names: Sequence[str] | None = None, seed: int = 0,
               h: float = 1e-5, tolerance: float = TOLERANCE
               ) -> list[CheckResult]:
    return [run_suite(n, seed=seed, h=h, tolerance=tolerance)
            for n in (names if names else suite_names())]
