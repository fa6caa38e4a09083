"""Prompt initialization and checkpoint persistence."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pointad.prompts import (
    PROMPT_LENGTHS,
    PromptFingerprintError,
    init_prompts,
    load_checkpoint,
    load_prompts,
    save_checkpoint,
    save_prompts,
)


def test_agnostic_default_shape():
    ps = init_prompts()
    assert ps.learnable.shape == (4, 12, 32) and ps.E == 12
    assert ps.suffixes == (("object",), ("damaged", "object"), ("point", "cloud"),
                           ("damaged", "point", "cloud"))


def test_init_statistics():
    ps = init_prompts(E=12, d_word=512, seed=4)
    assert abs(ps.learnable.std() - 0.02) < 0.001


def test_same_seed_same_init():
    np.testing.assert_array_equal(init_prompts(seed=3).learnable, init_prompts(seed=3).learnable)
    assert not np.array_equal(init_prompts(seed=3).learnable, init_prompts(seed=4).learnable)


def test_class_aware_substitutes_class_word():
    aware = init_prompts("class-aware", class_name="carrot")
    agnostic = init_prompts()
    assert all("carrot" in s for s in aware.suffixes)
    assert not any("carrot" in s for s in agnostic.suffixes)
    with pytest.raises(ValueError):
        init_prompts("class-aware")
    with pytest.raises(ValueError):
        init_prompts("fancy")


def test_ablation_lengths():
    assert PROMPT_LENGTHS == (6, 8, 10, 12, 14)


@settings(max_examples=20, deadline=None)
@given(E=st.integers(1, 16), seed=st.integers(0, 2**20), mode=st.sampled_from(["object-agnostic", "class-aware"]))
def test_save_load_bit_identical(tmp_path_factory, E, seed, mode):
    ps = init_prompts(mode, E, seed, class_name="cookie" if mode == "class-aware" else None,
                      backbone_id="toy-x")
    p = tmp_path_factory.mktemp("ck") / "p.ckpt"
    save_prompts(p, ps)
    back = load_prompts(p, backbone_id="toy-x", E=E, mode=mode)
    assert back.learnable.tobytes() == ps.learnable.tobytes()
    assert back.suffixes == ps.suffixes and back.class_name == ps.class_name


def test_fingerprint_mismatch(tmp_path):
    ps = init_prompts(backbone_id="toy-a")
    save_prompts(tmp_path / "p.ckpt", ps)
    with pytest.raises(PromptFingerprintError, match="backbone_id"):
        load_prompts(tmp_path / "p.ckpt", backbone_id="toy-b")
    with pytest.raises(PromptFingerprintError, match="E"):
        load_prompts(tmp_path / "p.ckpt", E=8)
    forced = load_prompts(tmp_path / "p.ckpt", backbone_id="toy-b", force=True)
    assert forced.warnings and "backbone_id" in forced.warnings[0]
    np.testing.assert_array_equal(forced.learnable, ps.learnable)


def test_checkpoint_extras_and_info(tmp_path):
    ps = init_prompts()
    extras = {"adam_step": np.array([3.0]), "m": np.arange(6.0).reshape(2, 3)}
    save_checkpoint(tmp_path / "c.ckpt", ps, extras, {"epoch": 2})
    back, ex, info = load_checkpoint(tmp_path / "c.ckpt")
    assert info == {"epoch": 2}
    np.testing.assert_array_equal(ex["m"], extras["m"])


def test_not_a_checkpoint(tmp_path):
    (tmp_path / "x").write_bytes(b"hello")
    with pytest.raises(ValueError, match="not a prompt checkpoint"):
        load_checkpoint(tmp_path / "x")
