"""Self-check suite behind ``tsvit verify``: each property returns pass/fail plus a detail."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .block import norm_projection_forward, transformer_module_forward
from .checkpoint import CheckpointError, dumps, load, loads
from .data import synthetic_images
from .dynamic_layer import RouterConfig, router_infer, saliency_scores
from .encoder import (
    EncoderConfig,
    encoder_backward,
    encoder_forward,
    encoder_train_forward,
    frozen_digest,
    init_weights,
    is_trainable,
    plug_and_play_restore,
)
from .finetune import FinetuneConfig, peft_finetune
from .kernels import finite_diff_entries, relative_error, sigmoid
from .windowing import (
    TokenMask,
    gather_selected,
    rank_and_select_per_window,
    reverse_index,
    token_merge,
    window_partition,
    window_unpartition,
)


@dataclass
class PropertyResult:
    name: str
    passed: bool
    detail: str

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": bool(self.passed), "detail": self.detail}


def _perturbed(cfg: EncoderConfig, seed: int):
    """Weights with a non-zero compensator and spread-out gates."""
    w = init_weights(cfg, seed)
    rng = np.random.default_rng(seed + 1)
    for lw in w.layers:
        if lw.compensator is not None:
            lw.compensator.W_up = rng.normal(0.0, 0.1, lw.compensator.W_up.shape)
            lw.compensator.norm.beta = rng.normal(0.0, 0.1, cfg.d)
            lw.selector.w_sel = rng.normal(0.0, 0.2, lw.selector.w_sel.shape)
            lw.selector.b_sel = np.array([0.0])
    return w


def masked_dense_reference(M_hat, S, norm, proj, theta):
    """Everything projected, then unselected columns zeroed."""
    B = sigmoid(S) > theta
    P, _ = norm_projection_forward(M_hat, norm, proj)
    return np.where(B, P, 0.0) + M_hat


def check_sparse_dense(cfg: EncoderConfig, seed: int, n_inputs: int = 100, tol: float = 1e-10) -> PropertyResult:
    w = _perturbed(cfg, seed)
    lw = w.layers[0]
    router = RouterConfig(theta=cfg.theta, mode="inference")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_inputs):
        f = rng.normal(size=(cfg.d, cfg.N))
        M_hat, _ = transformer_module_forward(f, lw, cfg.grid)
        S = saliency_scores(M_hat, lw.selector)
        sparse, _ = router_infer(M_hat, S, lw.norm2, lw.proj, router)
        ref = masked_dense_reference(M_hat, S, lw.norm2, lw.proj, cfg.theta)
        worst = max(worst, relative_error(sparse, ref))
    return PropertyResult("sparse_dense_equivalence", worst < tol, f"max relative error {worst:.3e} over {n_inputs} inputs")


def check_gradients(cfg: EncoderConfig, seed: int, per_tensor: int = 3, tol: float = 1e-4) -> PropertyResult:
    w = _perturbed(cfg, seed)
    rng = np.random.default_rng(seed + 2)
    x = synthetic_images(1, cfg.C, cfg.H, cfg.W, seed=seed)[0]
    noise = [rng.logistic(size=(1, cfg.N)) for _ in range(cfg.L)]
    z, Z, cache = encoder_train_forward(x, cfg, w, None, noise)
    R = rng.normal(size=z.shape)
    RZ = [rng.normal(size=g.shape) for g in Z]
    grads = encoder_backward(R, cache, RZ).named()

    def loss():
        z2, Z2, _ = encoder_train_forward(x, cfg, w, None, noise)
        return float(np.sum(z2 * R) + sum(np.sum(a * b) for a, b in zip(Z2, RZ)))

    worst, worst_name = 0.0, ""
    for name, arr in w.named().items():
        idx = rng.choice(arr.size, size=min(per_tensor, arr.size), replace=False)
        num = finite_diff_entries(loss, arr, idx, 1e-5)
        err = relative_error(grads[name].reshape(-1)[idx], num)
        if err > worst:
            worst, worst_name = err, name
    return PropertyResult("gradient_check", worst < tol, f"worst relative error {worst:.3e} ({worst_name})")


def check_roundtrips(cfg: EncoderConfig, seed: int, cases: int = 50) -> PropertyResult:
    rng = np.random.default_rng(seed)
    grid = cfg.grid
    for _ in range(cases):
        f = rng.normal(size=(cfg.d, grid.N))
        if not np.array_equal(window_unpartition(window_partition(f, grid), grid), f):
            return PropertyResult("structural_roundtrips", False, "partition/unpartition mismatch")
        mask = TokenMask.from_scores(rng.random((1, grid.N)), 0.5)
        back = reverse_index(gather_selected(f, mask), mask)
        if not np.array_equal(back[:, mask.J_star], f[:, mask.J_star]) or np.any(back[:, ~mask.B]):
            return PropertyResult("structural_roundtrips", False, "gather/reverse-index mismatch")
        O = window_partition(f, grid)
        A = rng.random((1, grid.E, grid.n_win))
        kk = int(rng.integers(1, grid.n_win + 1))
        O_star, perm = rank_and_select_per_window(O, A, kk)
        if not np.array_equal(token_merge(O_star, O, perm), O):
            return PropertyResult("structural_roundtrips", False, "token merge of unmodified tokens changed O")
    return PropertyResult("structural_roundtrips", True, f"{cases} cases each")


def check_freezing(cfg: EncoderConfig, seed: int, steps: int = 5) -> PropertyResult:
    w = init_weights(cfg, seed)
    before = frozen_digest(w)
    trainable_before = {n: a.copy() for n, a in w.named().items() if is_trainable(n)}
    imgs = synthetic_images(2, cfg.C, cfg.H, cfg.W, seed=seed)
    res = peft_finetune(imgs, cfg, w, FinetuneConfig(steps=steps, seed=seed, rate_weight=20.0))
    after = frozen_digest(res.weights)
    changed = any(not np.array_equal(a, res.weights.named()[n]) for n, a in trainable_before.items())
    ok = before == after and frozen_digest(w) == before and changed
    return PropertyResult("peft_freezing", ok, f"frozen digest {'unchanged' if before == after else 'CHANGED'}; trainable {'changed' if changed else 'unchanged'}")


def check_restore(cfg: EncoderConfig, seed: int) -> PropertyResult:
    w = init_weights(cfg, seed)
    dense_cfg = cfg.replace(mode="dense")
    original = init_weights(dense_cfg, seed)
    restored = plug_and_play_restore(_perturbed(cfg, seed))
    same = all(np.array_equal(a, original.named()[n]) for n, a in restored.named().items())
    same = same and set(restored.named()) == set(original.named())
    x = synthetic_images(1, cfg.C, cfg.H, cfg.W, seed=seed)[0]
    z1, _ = encoder_forward(x, dense_cfg, restored)
    z2, _ = encoder_forward(x, dense_cfg, original)
    twice = plug_and_play_restore(plug_and_play_restore(w))
    idem = all(np.array_equal(a, twice.named()[n]) for n, a in plug_and_play_restore(w).named().items())
    ok = same and np.array_equal(z1, z2) and idem
    return PropertyResult("plug_and_play_restore", ok, "bit-identical dense weights and outputs" if ok else "restored encoder differs")


def check_checkpoint(cfg: EncoderConfig, seed: int, path=None) -> PropertyResult:
    try:
        if path is not None:
            stored, w = load(path)
            buf = dumps(stored, w)
            if buf != open(path, "rb").read():
                return PropertyResult("checkpoint_roundtrip", False, "re-serialized bytes differ")
            return PropertyResult("checkpoint_roundtrip", True, "checkpoint valid and byte-stable")
        w = _perturbed(cfg, seed)
        buf = dumps(cfg, w)
        c2, arrays = loads(buf)
        ok = c2 == cfg and all(np.array_equal(a, arrays[n]) for n, a in w.named().items())
        return PropertyResult("checkpoint_roundtrip", ok and dumps(cfg, w) == buf, "in-memory roundtrip")
    except CheckpointError as exc:
        return PropertyResult(exc.invariant, False, str(exc))


def run_suite(cfg: EncoderConfig, seed: int = 0, checkpoint=None, n_inputs: int = 100) -> list[PropertyResult]:
    cfg = cfg.replace(mode="dynamic")
    return [
        check_sparse_dense(cfg, seed, n_inputs),
        check_gradients(cfg.replace(L=min(cfg.L, 2)), seed),
        check_roundtrips(cfg, seed),
        check_freezing(cfg, seed),
        check_restore(cfg, seed),
        check_checkpoint(cfg, seed, checkpoint),
    ]
