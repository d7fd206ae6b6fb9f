import hashlib

import numpy as np
import pytest

from tsvit.data import synthetic_images, synthetic_views
from tsvit.encoder import (
    PRESETS,
    EncoderConfig,
    count_parameters,
    encode_views,
    encoder_forward,
    frozen_digest,
    init_weights,
    is_trainable,
    parameter_shapes,
    patch_embed,
    peft_partition,
    plug_and_play_restore,
    preset,
)
from tsvit.errors import ConfigurationError, DimensionError, PartitionError, TrainingError
from tsvit.finetune import FinetuneConfig, peft_finetune

DESK = preset("desk")


def test_presets():
    assert (PRESETS["eva02l"].L, PRESETS["eva02l"].d, PRESETS["eva02l"].A) == (24, 1024, 16)
    assert (PRESETS["samb"].L, PRESETS["samb"].d, PRESETS["samb"].f) == (12, 768, 14)
    assert (DESK.L, DESK.d, DESK.A, DESK.f, DESK.k) == (4, 64, 4, 4, 8)
    assert PRESETS["eva02l"].N == 1000 and PRESETS["eva02l"].d_o == 2723
    with pytest.raises(ConfigurationError):
        preset("vit-h")


def test_config_validation():
    with pytest.raises(ConfigurationError):
        EncoderConfig(L=1, d=8, A=3, f=2, k=4, H=8, W=8)
    with pytest.raises(ConfigurationError):
        EncoderConfig(L=1, d=8, A=2, f=2, k=3, H=8, W=8)
    with pytest.raises(ConfigurationError):
        EncoderConfig(L=1, d=8, A=2, f=2, k=4, H=8, W=8, mode="sparse")


def test_config_digest_tracks_fields():
    assert DESK.digest() == preset("desk").digest()
    assert DESK.digest() != DESK.replace(theta=0.4).digest()


def test_patch_embed_examples():
    rng = np.random.default_rng(0)
    W, b = rng.normal(size=(5, 3 * 4 * 4)), rng.normal(size=5)
    one = patch_embed(rng.random((3, 4, 4)), W, b, 4)
    assert one.shape == (5, 1)
    const = patch_embed(np.full((3, 8, 12), 0.3), W, b, 4)
    assert np.all(const == const[:, :1])
    assert patch_embed(np.zeros((3, 320, 800)), np.zeros((2, 768)), np.zeros(2), 16).shape == (2, 1000)
    with pytest.raises(ConfigurationError):
        patch_embed(np.zeros((3, 9, 8)), W, b, 4)
    with pytest.raises(DimensionError):
        patch_embed(np.zeros((8, 8)), W, b, 4)


def test_patch_embed_matches_explicit_patch_loop():
    rng = np.random.default_rng(1)
    x = rng.random((3, 8, 12))
    W, b = rng.normal(size=(4, 48)), rng.normal(size=4)
    out = patch_embed(x, W, b, 4)
    for r in range(2):
        for c in range(3):
            patch = x[:, 4 * r:4 * r + 4, 4 * c:4 * c + 4].reshape(-1)
            assert np.allclose(out[:, r * 3 + c], W @ patch + b, atol=1e-12)


def test_zero_layers_is_patch_embedding():
    cfg = DESK.replace(L=0)
    w = init_weights(cfg, 0)
    x = synthetic_images(1, 3, cfg.H, cfg.W)[0]
    z, masks = encoder_forward(x, cfg, w)
    assert masks == [] and np.array_equal(z, patch_embed(x, w.patch_W, w.patch_b, cfg.k))


def test_dynamic_with_tiny_theta_equals_dense():
    cfg = DESK.replace(mode="dynamic", theta=1e-9)
    w = init_weights(cfg, 3)
    x = synthetic_images(1, 3, cfg.H, cfg.W, seed=3)[0]
    z_dyn, masks = encoder_forward(x, cfg, w)
    z_dense, _ = encoder_forward(x, cfg.replace(mode="dense"), plug_and_play_restore(w))
    assert all(m.K_bar == cfg.N for m in masks)
    # compensator starts as identity, so only gather rounding separates the two
    assert np.max(np.abs(z_dyn - z_dense)) / np.max(np.abs(z_dense)) < 1e-12


def test_golden_output_stable_across_runs():
    def run():
        cfg = DESK.replace(mode="dynamic")
        z, _ = encoder_forward(synthetic_images(1, 3, cfg.H, cfg.W, seed=5)[0], cfg, init_weights(cfg, 5))
        return hashlib.sha256(z.tobytes()).hexdigest()

    assert run() == run()


def test_encode_views_shares_weights():
    cfg = DESK
    w = init_weights(cfg, 0)
    views = synthetic_views(cfg, 1, seed=2)[0]
    outs = encode_views(views, cfg, w)
    assert len(outs) == cfg.V
    assert np.array_equal(outs[1][0], encoder_forward(views[1], cfg, w)[0])


def test_backbone_identical_across_modes():
    dense = init_weights(DESK, 9).named()
    for mode in ("dynamic", "baseline"):
        other = init_weights(DESK.replace(mode=mode), 9).named()
        assert all(np.array_equal(dense[n], other[n]) for n in dense)


def test_trainable_counts():
    desk = peft_partition(DESK.replace(mode="dynamic"))
    assert desk.trainable_count == 4 * (65 + 1032 + 128) == 4900
    eva = peft_partition(PRESETS["eva02l"].replace(mode="dynamic"))
    per_layer = (1024 + 1) + (2 * 1024 * 32 + 32) + 2 * 1024
    assert per_layer == 68_641
    assert eva.trainable_count == 24 * per_layer == 1_647_384
    assert 1.45e6 <= eva.trainable_count <= 1.75e6
    assert abs(eva.trainable_count / 1.6e6 - 1) < 0.1


def test_partition_is_disjoint_cover():
    for name in ("desk", "samb", "eva02l"):
        cfg = PRESETS[name].replace(mode="dynamic")
        p = peft_partition(cfg)
        assert not (p.trainable & p.frozen) and p.trainable | p.frozen == set(parameter_shapes(cfg))
        assert p.trainable_count + p.frozen_count == p.total_count == count_parameters(cfg)
        assert p.trainable_count == cfg.L * (cfg.d + 1 + 2 * cfg.d * cfg.d_h + cfg.d_h + 2 * cfg.d)


def test_partition_requires_dynamic_mode():
    with pytest.raises(PartitionError):
        peft_partition(DESK)


def test_parameter_shapes_match_allocation():
    for mode in ("dense", "baseline", "dynamic"):
        cfg = DESK.replace(mode=mode)
        named = init_weights(cfg, 0).named()
        assert {n: a.shape for n, a in named.items()} == parameter_shapes(cfg)


def test_trainable_names():
    assert is_trainable("layers.3.selector.w_sel") and is_trainable("layers.0.compensator.norm.beta")
    assert not is_trainable("layers.0.attn.W_Q") and not is_trainable("patch_W")


def test_restore_is_exact_and_idempotent():
    cfg = DESK.replace(mode="dynamic")
    w = init_weights(cfg, 4)
    original = init_weights(DESK, 4)
    restored = plug_and_play_restore(w)
    assert restored.named().keys() == original.named().keys()
    assert all(np.array_equal(a, original.named()[n]) for n, a in restored.named().items())
    twice = plug_and_play_restore(restored)
    assert all(np.array_equal(a, twice.named()[n]) for n, a in restored.named().items())
    # the restored copy does not alias the source
    restored.layers[0].attn.W_Q[0, 0] += 1.0
    assert w.layers[0].attn.W_Q[0, 0] != restored.layers[0].attn.W_Q[0, 0]


def _small():
    return DESK.replace(mode="dynamic", L=2)


def test_finetune_freezes_backbone_and_is_deterministic():
    cfg = _small()
    w = init_weights(cfg, 0)
    imgs = synthetic_images(2, 3, cfg.H, cfg.W, seed=0)
    ft = FinetuneConfig(steps=6, rate_weight=20.0, seed=1)
    a, b = peft_finetune(imgs, cfg, w, ft), peft_finetune(imgs, cfg, w, ft)
    assert a.log == b.log and len(a.log) == 6
    assert frozen_digest(a.weights) == frozen_digest(w)
    assert any(not np.array_equal(x, a.weights.named()[n]) for n, x in w.named().items() if is_trainable(n))
    z1, _ = encoder_forward(imgs[0], DESK.replace(L=2), plug_and_play_restore(a.weights))
    z2, _ = encoder_forward(imgs[0], DESK.replace(L=2), plug_and_play_restore(w))
    assert np.array_equal(z1, z2)


def test_loss_near_zero_when_student_equals_teacher():
    cfg = _small()
    w = init_weights(cfg, 0)
    for lw in w.layers:
        lw.selector.b_sel[:] = 40.0
    imgs = synthetic_images(2, 3, cfg.H, cfg.W, seed=0)
    res = peft_finetune(imgs, cfg, w, FinetuneConfig(steps=1, rate_weight=0.0))
    assert res.log[0]["distill"] < 1e-20 and res.log[0]["loss"] < 1e-20


def test_distillation_loss_decreases():
    cfg = _small()
    w = init_weights(cfg, 2)
    rng = np.random.default_rng(3)
    for lw in w.layers:
        lw.compensator.W_up = rng.normal(0, 0.05, lw.compensator.W_up.shape)
    imgs = synthetic_images(2, 3, cfg.H, cfg.W, seed=1)
    res = peft_finetune(imgs, cfg, w, FinetuneConfig(steps=40, rate_weight=0.0, lr=1e-3, batch_size=2))
    first = np.mean([r["distill"] for r in res.log[:5]])
    last = np.mean([r["distill"] for r in res.log[-5:]])
    assert last <= first


def test_lambda_warmup():
    ft = FinetuneConfig(steps=100, rate_weight=2.0, warmup_frac=0.1)
    assert ft.lambda_at(0) == pytest.approx(0.2)
    assert ft.lambda_at(9) == ft.lambda_at(50) == 2.0


def test_finetune_rejects_bad_inputs():
    with pytest.raises(PartitionError):
        peft_finetune(synthetic_images(1, 3, DESK.H, DESK.W), DESK, init_weights(DESK, 0))
    with pytest.raises(ConfigurationError):
        FinetuneConfig(lr=0.0)
    cfg = _small()
    w = init_weights(cfg, 0)
    w.layers[0].compensator.W_up[:] = np.nan
    with pytest.raises(TrainingError):
        peft_finetune(synthetic_images(1, 3, cfg.H, cfg.W), cfg, w, FinetuneConfig(steps=2))
